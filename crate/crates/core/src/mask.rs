use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};
use crate::store::rle::{rle_decode, rle_encode, Rle};

/// Binary segment mask over an image, stored row-major (`y * width + x`).
#[derive(Clone, PartialEq, Eq)]
pub struct RawMask {
    image_id: String,
    width: u32,
    height: u32,
    bits: Vec<bool>,
    area: u64,
}

impl std::fmt::Debug for RawMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RawMask")
            .field("image_id", &self.image_id)
            .field("dims", &(self.width, self.height))
            .field("area", &self.area)
            .finish()
    }
}

impl RawMask {
    pub fn empty(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            bits: vec![false; width as usize * height as usize],
            area: 0,
        }
    }

    pub fn from_bits(image_id: impl Into<String>, width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(invalid(format!(
                "mask has {} pixels, expected {width}x{height}",
                bits.len()
            )));
        }
        let area = bits.iter().filter(|&&b| b).count() as u64;
        Ok(Self {
            image_id: image_id.into(),
            width,
            height,
            bits,
            area,
        })
    }

    pub fn from_fn(image_id: impl Into<String>, width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::from_bits(image_id, width, height, bits).expect("dims match by construction")
    }

    /// Axis-aligned rectangle `[x0, x1) x [y0, y1)`, clipped to the image.
    pub fn rect(image_id: impl Into<String>, width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self::from_fn(image_id, width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn from_rle(image_id: impl Into<String>, rle: &Rle) -> Result<Self> {
        let [h, w] = rle.size;
        let bits = rle_decode(&rle.counts, h, w)?;
        Self::from_bits(image_id, w, h, bits)
    }

    pub fn to_rle(&self) -> Rle {
        Rle {
            size: [self.height, self.width],
            counts: rle_encode(&self.bits, self.height, self.width),
        }
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Number of set pixels.
    pub fn area(&self) -> u64 {
        self.area
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn area_fraction(&self) -> f64 {
        self.area as f64 / (self.width as f64 * self.height as f64)
    }

    /// Mean pixel coordinate of the set pixels, `None` when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        if self.area == 0 {
            return None;
        }
        let (mut sx, mut sy) = (0f64, 0f64);
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            sx += (i % self.width as usize) as f64;
            sy += (i / self.width as usize) as f64;
        }
        Some((sx / self.area as f64, sy / self.area as f64))
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let w = self.width as usize;
        let mut it = self
            .bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ((i % w) as u32, (i / w) as u32));
        let (x, y) = it.next()?;
        Some(it.fold((x, y, x, y), |(x0, y0, x1, y1), (x, y)| {
            (x0.min(x), y0.min(y), x1.max(x), y1.max(y))
        }))
    }

    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    image_id: String,
    #[serde(flatten)]
    rle: Rle,
}

impl Serialize for RawMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskRepr {
            image_id: self.image_id.clone(),
            rle: self.to_rle(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RawMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MaskRepr::deserialize(d)?;
        RawMask::from_rle(repr.image_id, &repr.rle).map_err(serde::de::Error::custom)
    }
}
