//! Word normalization, stop words and caption tokenization.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Identifier recorded in dataset metadata for [`StopWords::english`].
pub const ENGLISH_STOPWORDS_VERSION: &str = "nltk-english-179";

const ENGLISH: &[&str] = &[
    "i",
    "me",
    "my",
    "myself",
    "we",
    "our",
    "ours",
    "ourselves",
    "you",
    "you're",
    "you've",
    "you'll",
    "you'd",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "he",
    "him",
    "his",
    "himself",
    "she",
    "she's",
    "her",
    "hers",
    "herself",
    "it",
    "it's",
    "its",
    "itself",
    "they",
    "them",
    "their",
    "theirs",
    "themselves",
    "what",
    "which",
    "who",
    "whom",
    "this",
    "that",
    "that'll",
    "these",
    "those",
    "am",
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "being",
    "have",
    "has",
    "had",
    "having",
    "do",
    "does",
    "did",
    "doing",
    "a",
    "an",
    "the",
    "and",
    "but",
    "if",
    "or",
    "because",
    "as",
    "until",
    "while",
    "of",
    "at",
    "by",
    "for",
    "with",
    "about",
    "against",
    "between",
    "into",
    "through",
    "during",
    "before",
    "after",
    "above",
    "below",
    "to",
    "from",
    "up",
    "down",
    "in",
    "out",
    "on",
    "off",
    "over",
    "under",
    "again",
    "further",
    "then",
    "once",
    "here",
    "there",
    "when",
    "where",
    "why",
    "how",
    "all",
    "any",
    "both",
    "each",
    "few",
    "more",
    "most",
    "other",
    "some",
    "such",
    "no",
    "nor",
    "not",
    "only",
    "own",
    "same",
    "so",
    "than",
    "too",
    "very",
    "s",
    "t",
    "can",
    "will",
    "just",
    "don",
    "don't",
    "should",
    "should've",
    "now",
    "d",
    "ll",
    "m",
    "o",
    "re",
    "ve",
    "y",
    "ain",
    "aren",
    "aren't",
    "couldn",
    "couldn't",
    "didn",
    "didn't",
    "doesn",
    "doesn't",
    "hadn",
    "hadn't",
    "hasn",
    "hasn't",
    "haven",
    "haven't",
    "isn",
    "isn't",
    "ma",
    "mightn",
    "mightn't",
    "mustn",
    "mustn't",
    "needn",
    "needn't",
    "shan",
    "shan't",
    "shouldn",
    "shouldn't",
    "wasn",
    "wasn't",
    "weren",
    "weren't",
    "won",
    "won't",
    "wouldn",
    "wouldn't",
];

/// A versioned stop-word list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopWords {
    version: String,
    words: BTreeSet<String>,
}

impl Default for StopWords {
    fn default() -> Self {
        Self::english()
    }
}

impl StopWords {
    pub fn english() -> Self {
        Self {
            version: ENGLISH_STOPWORDS_VERSION.to_string(),
            words: ENGLISH.iter().map(|w| w.to_string()).collect(),
        }
    }

    pub fn custom(version: impl Into<String>, words: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            version: version.into(),
            words: words.into_iter().map(|w| w.into().to_lowercase()).collect(),
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

const IRREGULAR: &[(&str, &str)] = &[
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("people", "person"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("oxen", "ox"),
    ("dice", "die"),
    ("lice", "louse"),
    // -ves plurals of -f / -fe nouns
    ("knives", "knife"),
    ("wives", "wife"),
    ("lives", "life"),
    ("leaves", "leaf"),
    ("wolves", "wolf"),
    ("shelves", "shelf"),
    ("halves", "half"),
    ("loaves", "loaf"),
    ("calves", "calf"),
    ("thieves", "thief"),
    ("scarves", "scarf"),
    ("hooves", "hoof"),
    ("elves", "elf"),
    ("selves", "self"),
    ("sheaves", "sheaf"),
    // -oes plurals
    ("tomatoes", "tomato"),
    ("potatoes", "potato"),
    ("heroes", "hero"),
    ("echoes", "echo"),
    ("volcanoes", "volcano"),
    ("mosquitoes", "mosquito"),
    ("mangoes", "mango"),
    ("torpedoes", "torpedo"),
    ("buffaloes", "buffalo"),
    // -ses plurals of -s nouns
    ("buses", "bus"),
    ("gases", "gas"),
    ("lenses", "lens"),
    ("bonuses", "bonus"),
    ("campuses", "campus"),
    ("viruses", "virus"),
    ("circuses", "circus"),
    ("octopuses", "octopus"),
    ("cactuses", "cactus"),
    ("canvases", "canvas"),
    ("atlases", "atlas"),
    ("quizzes", "quiz"),
];

/// Words that look plural but are not (or whose plural is identical).
const INVARIANT: &[&str] = &[
    "fish",
    "sheep",
    "deer",
    "moose",
    "bison",
    "salmon",
    "trout",
    "aircraft",
    "species",
    "series",
    "news",
    "pants",
    "jeans",
    "shorts",
    "scissors",
    "clothes",
    "trousers",
    "physics",
    "mathematics",
    "athletics",
    "always",
    "towards",
    "afterwards",
    "perhaps",
    "across",
    "whereas",
    "sometimes",
    "besides",
    "gas",
    "lens",
    "canvas",
    "atlas",
    "chaos",
    "christmas",
    "texas",
    "kudos",
    "yes",
    "thus",
    "plus",
    "bus",
    "cosmos",
    "lotus",
    "diabetes",
    "mumps",
    "barracks",
    "headquarters",
    "means",
    "overseas",
    "outdoors",
    "indoors",
    "downstairs",
    "upstairs",
];

/// Singular nouns ending in `-ie`, whose plural must not become `-y`.
const IE_NOUNS: &[&str] = &[
    "hoodie", "beanie", "cookie", "movie", "tie", "pie", "lie", "goalie", "zombie", "brownie", "selfie", "smoothie",
    "pixie", "calorie", "prairie", "rookie", "genie", "auntie", "collie", "bootie", "necktie", "bowtie", "walkie",
    "veggie", "birdie", "sweetie", "cutie",
];

/// `-ches` nouns whose singular keeps the `e`.
const CHE_NOUNS: &[&str] = &[
    "headache",
    "ache",
    "moustache",
    "mustache",
    "niche",
    "cliche",
    "avalanche",
    "panache",
];

/// Singular nouns ending in `-men` that are not `-man` plurals.
const MEN_SINGULARS: &[&str] = &[
    "specimen", "abdomen", "omen", "semen", "regimen", "stamen", "hymen", "amen",
];

fn singularize_once(w: &str) -> String {
    if let Some((_, s)) = IRREGULAR.iter().find(|(p, _)| *p == w) {
        return s.to_string();
    }
    if INVARIANT.contains(&w) || !w.chars().all(|c| c.is_ascii_alphabetic()) {
        return w.to_string();
    }
    if w.len() > 4 && w.ends_with("men") && !MEN_SINGULARS.contains(&w) {
        return format!("{}man", &w[..w.len() - 3]);
    }
    if w.len() <= 3 || !w.ends_with('s') {
        return w.to_string();
    }
    if w.ends_with("ss") || w.ends_with("us") || w.ends_with("is") || w.ends_with("ous") {
        return w.to_string();
    }
    if let Some(stem) = w.strip_suffix("ies") {
        let ie = format!("{stem}ie");
        if IE_NOUNS.contains(&ie.as_str()) || w.len() <= 4 {
            return ie;
        }
        return format!("{stem}y");
    }
    if w.ends_with("sses") || w.ends_with("shes") || w.ends_with("xes") || w.ends_with("zzes") {
        return w[..w.len() - 2].to_string();
    }
    if w.ends_with("ches") {
        let che = &w[..w.len() - 1];
        if CHE_NOUNS.contains(&che) {
            return che.to_string();
        }
        return w[..w.len() - 2].to_string();
    }
    w[..w.len() - 1].to_string()
}

/// Lowercase a word and map plural nouns to their singular form.
///
/// Rules are applied until the word stops changing, so the result is a
/// fixed point and the function is idempotent.
pub fn normalize_word(word: &str) -> String {
    let mut w = word.to_lowercase();
    // each rule shortens the word or leaves it unchanged, so this terminates
    loop {
        let next = singularize_once(&w);
        if next == w {
            return w;
        }
        w = next;
    }
}

/// Drop `prompt` from the front of `text` when it matches exactly on a word
/// boundary.
pub fn strip_prompt<'a>(text: &'a str, prompt: &str) -> &'a str {
    let trimmed = text.trim_start();
    let prompt = prompt.trim();
    if prompt.is_empty() {
        return trimmed;
    }
    match trimmed.strip_prefix(prompt) {
        Some(rest) if rest.is_empty() || !rest.starts_with(|c: char| c.is_alphanumeric()) => rest,
        _ => trimmed,
    }
}

/// Lowercased, punctuation-free raw tokens (apostrophes kept).
pub fn raw_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
}

/// Normalize one raw token; `None` when it is a stop word or empty.
pub fn content_word(raw: &str, stop: &StopWords) -> Option<String> {
    let raw = raw
        .trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
        .to_lowercase();
    if raw.is_empty() || stop.contains(&raw) {
        return None;
    }
    let base = raw.strip_suffix("'s").unwrap_or(&raw);
    let base: String = base.chars().filter(|&c| c != '\'').collect();
    if base.is_empty() || stop.contains(&base) {
        return None;
    }
    let w = normalize_word(&base);
    (!stop.contains(&w)).then_some(w)
}

/// Content words of a caption: prompt stripped, punctuation and stop words
/// removed, normalized, deduplicated.
pub fn tokenize_caption(text: &str, prompt: &str, stop: &StopWords) -> BTreeSet<String> {
    raw_words(strip_prompt(text, prompt))
        .filter_map(|w| content_word(&w, stop))
        .collect()
}
