//! Images and first-layer input binarization.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitops;
use crate::error::{Error, Result};
use crate::model::ThresholdVector;
use crate::tensor::{PackedFeatureMap, Shape3};

/// A binarized image is stored exactly like any other binary feature map.
pub type BinaryImage = PackedFeatureMap;

/// H×W×C pixels in `[0, 255]`, interleaved (HWC). `C` is 1 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: Shape3,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(shape: Shape3, pixels: Vec<f32>) -> Result<Self> {
        if shape.height == 0 || shape.width == 0 || !matches!(shape.channels, 1 | 3) {
            return Err(Error::Image(format!("unsupported image shape {shape}")));
        }
        if pixels.len() != shape.len() {
            return Err(Error::Image(format!(
                "{} pixel values for a {shape} image",
                pixels.len()
            )));
        }
        Ok(Image { shape, pixels })
    }

    pub fn from_bytes(shape: Shape3, bytes: &[u8]) -> Result<Self> {
        Image::new(shape, bytes.iter().map(|&b| b as f32).collect())
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.shape.width + x) * self.shape.channels + c]
    }
}

/// `out[i,j,c] = sign(x[i,j,c] + T[c])`.
pub fn threshold_binarize(image: &Image, thresholds: &ThresholdVector) -> Result<BinaryImage> {
    let shape = image.shape();
    if thresholds.len() != shape.channels {
        return Err(Error::param(format!(
            "{} thresholds for a {}-channel image",
            thresholds.len(),
            shape.channels
        )));
    }
    let t = thresholds.values();
    Ok(PackedFeatureMap::from_fn(shape, |y, x, c| {
        bitops::sign((image.get(y, x, c) + t[c]) as f64).bit()
    }))
}

/// Rec. 601 luma of an RGB image.
pub fn grayscale(image: &Image) -> Result<Image> {
    let shape = image.shape();
    if shape.channels != 3 {
        return Err(Error::param(format!(
            "grayscale needs an RGB image, got {shape}"
        )));
    }
    let pixels = image
        .pixels()
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) as f32)
        .collect();
    Image::new(Shape3::new(shape.height, shape.width, 1), pixels)
}

/// Radius-1 neighbors, clockwise from the top-left, as (dy, dx).
pub const LBP_NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// Neighbor indices feeding output channels 0, 1 and 2.
pub const LBP_CHANNEL_NEIGHBORS: [usize; 3] = [0, 3, 6];

/// Three-channel LBP encoding of a grayscale image.
///
/// Channel `c` is +1 where neighbor `LBP_CHANNEL_NEIGHBORS[c]` is strictly
/// brighter than the center. Borders replicate the nearest pixel.
pub fn lbp_binarize(image: &Image) -> Result<BinaryImage> {
    let shape = image.shape();
    if shape.channels != 1 {
        return Err(Error::param(format!(
            "lbp needs a grayscale image, got {shape}"
        )));
    }
    let (h, w) = (shape.height as isize, shape.width as isize);
    let at = |y: isize, x: isize| image.get(y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize, 0);
    Ok(PackedFeatureMap::from_fn(
        Shape3::new(shape.height, shape.width, 3),
        |y, x, c| {
            let (dy, dx) = LBP_NEIGHBORS[LBP_CHANNEL_NEIGHBORS[c]];
            let (y, x) = (y as isize, x as isize);
            at(y + dy, x + dx) > at(y, x)
        },
    ))
}

/// Uniform random bytes in `[0, 255]` per channel.
pub fn random_image(rng: &mut impl Rng, shape: Shape3) -> Image {
    let pixels = (0..shape.len()).map(|_| rng.gen::<u8>() as f32).collect();
    Image::new(shape, pixels).expect("shape checked by caller")
}

/// Image `index` of the random stream `seed`; independent of how many
/// other images were drawn before it.
pub fn seeded_image(seed: u64, index: u64, shape: Shape3) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    random_image(&mut rng, shape)
}

/// Reads a binary PPM (P6, RGB) or PGM (P5, grayscale) with maxval 255.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes)
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::Image("expected P5 or P6 magic".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image(format!("malformed header at byte {start}")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Image(format!("malformed header at byte {pos}")));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Image(format!(
            "unsupported maxval {maxval}, only 255 is accepted"
        )));
    }
    let shape = Shape3::new(height, width, channels);
    let raster = &bytes[pos..];
    if raster.len() < shape.len() {
        return Err(Error::Image(format!(
            "truncated pixel data: {} of {} bytes",
            raster.len(),
            shape.len()
        )));
    }
    Image::from_bytes(shape, &raster[..shape.len()])
}

/// Encodes an image as P6/P5; pixel values are rounded and clamped to bytes.
pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let s = image.shape();
    let magic = if s.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(image.pixels().iter().map(|&p| p.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(image)).map_err(|e| Error::io(path, e))
}
