use std::io::Cursor;

use image::{ImageFormat, Rgba, RgbaImage};

use super::Heatmap;
use crate::error::{invalid, Error, Result};
use crate::mask::RawMask;

/// Linear red-to-blue ramp: the map maximum is pure red, the minimum pure
/// blue. A constant map is all red.
pub fn heatmap_rgb(map: &Heatmap) -> Vec<[u8; 3]> {
    let (lo, hi) = map
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    map.values
        .iter()
        .map(|&v| {
            let t = if span > 0.0 { (v - lo) / span } else { 1.0 };
            [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
        })
        .collect()
}

/// PNG of the heatmap with the segment shown opaque and the rest faded.
pub fn overlay_png(map: &Heatmap, mask: &RawMask) -> Result<Vec<u8>> {
    if (map.width, map.height) != (mask.width() as usize, mask.height() as usize) {
        return Err(invalid("overlay map and mask sizes differ"));
    }
    let colors = heatmap_rgb(map);
    let img = RgbaImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let [r, g, b] = colors[y as usize * map.width + x as usize];
        let alpha = if mask.get(x, y) { 200 } else { 50 };
        Rgba([r, g, b, alpha])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}
