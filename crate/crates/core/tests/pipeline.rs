use caplens_core::adapter::{MockAdapter, MockConfig, MockFixtures};
use caplens_core::pipeline::{
    register_dataset, run_ingest, DatasetManifest, DatasetRecord, DatasetView, IngestOptions, IngestStage, JobState,
    PipelineConfig,
};
use caplens_core::store::{ArtifactStore, Stage};
use caplens_core::Error;

fn manifest(id: &str, n: usize) -> DatasetManifest {
    DatasetManifest {
        dataset_id: id.into(),
        records: (0..n)
            .map(|i| DatasetRecord {
                id: format!("img{i}"),
                path: format!("images/img{i}.jpg"),
                width: 96 + 8 * i as u32,
                height: 72,
                label: if i % 2 == 0 { "tench".into() } else { "goldfish".into() },
                split: "train".into(),
            })
            .collect(),
        config: PipelineConfig::default(),
    }
}

#[test]
fn ingest_commits_every_stage_and_reruns_clean() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let adapter = MockAdapter::new(MockConfig::default());
    register_dataset(&store, &manifest("fish", 5)).unwrap();

    let job = run_ingest(&store, &adapter, "fish", &IngestOptions::default()).unwrap();
    assert_eq!(job.state, JobState::Done);
    assert!(job.errors.is_empty());
    for stage in IngestStage::ALL {
        let p = job.progress(stage);
        assert_eq!(p.done, p.total, "{stage:?}");
        assert_eq!(p.failed, 0);
    }
    for stage in Stage::ALL {
        if stage != Stage::Steering {
            assert!(!store.list("fish", stage).unwrap().is_empty(), "{stage:?} empty");
        }
    }

    let view = DatasetView::open(&store, "fish").unwrap();
    assert_eq!(view.captions().unwrap().len(), 5);
    let segments = view.segments().unwrap();
    assert!(segments.len() >= 5);
    let union = view.union().unwrap();
    assert_eq!(union.rows.len(), segments.len());
    for s in &segments {
        assert!(union.row_index(&s.segment_id).is_some());
    }
    assert!(!view.graph().unwrap().is_empty());

    let before = store.write_count();
    let again = run_ingest(&store, &adapter, "fish", &IngestOptions::default()).unwrap();
    assert_eq!(again.state, JobState::Done);
    assert_eq!(again.writes, 0);
    assert_eq!(store.write_count(), before);
    for stage in IngestStage::ALL {
        assert_eq!(again.progress(stage).done, 0);
    }
}

#[test]
fn failing_image_is_logged_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let fixtures = MockFixtures {
        failing_images: ["img2".to_string()].into(),
        ..Default::default()
    };
    let adapter = MockAdapter::new(MockConfig::default()).with_fixtures(fixtures);
    register_dataset(&store, &manifest("broken", 4)).unwrap();
    let job = run_ingest(&store, &adapter, "broken", &IngestOptions::default()).unwrap();
    assert_eq!(job.state, JobState::Done);
    assert_eq!(job.errors.len(), 1);
    assert_eq!(job.errors[0].image_id, "img2");
    assert_eq!(job.errors[0].stage, IngestStage::Caption);
    let view = DatasetView::open(&store, "broken").unwrap();
    let ids: Vec<String> = view.captions().unwrap().into_iter().map(|c| c.image_id).collect();
    assert_eq!(ids, vec!["img0", "img1", "img3"]);
}

#[test]
fn manifest_is_frozen_after_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let adapter = MockAdapter::new(MockConfig {
        layers: 8,
        heads: 2,
        ..Default::default()
    });
    let m = manifest("small", 2);
    register_dataset(&store, &m).unwrap();
    run_ingest(&store, &adapter, "small", &IngestOptions::default()).unwrap();
    assert!(!register_dataset(&store, &m).unwrap());
    let mut changed = m.clone();
    changed.config.layer = 3;
    assert!(matches!(register_dataset(&store, &changed), Err(Error::Conflict(_))));
    assert!(matches!(
        run_ingest(&store, &adapter, "missing", &IngestOptions::default()),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn segment_detail_highlights_caption_word() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let adapter = MockAdapter::new(MockConfig {
        heads: 2,
        ..Default::default()
    });
    register_dataset(&store, &manifest("detail", 2)).unwrap();
    run_ingest(&store, &adapter, "detail", &IngestOptions::default()).unwrap();
    let view = DatasetView::open(&store, "detail").unwrap();
    let seg = view.segments().unwrap().remove(0);
    let caption = view.caption(&seg.image_id).unwrap();
    let word = caption.normalized_words.iter().next().unwrap().clone();
    let detail = view.segment_detail(&seg.segment_id, Some(&word)).unwrap();
    assert!(!detail.highlights.is_empty());
    assert!(detail.score.is_some());
    assert!(detail.overlay_png.is_some());
    let colors = view.word_colors(&word).unwrap();
    assert_eq!(colors.get(&seg.segment_id).copied(), detail.score);
    assert!(matches!(view.segment_detail("nope", None), Err(Error::NotFound(_))));
}
