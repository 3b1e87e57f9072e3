//! Feature-map containers shared by the preprocessing, engine and oracle.

use std::fmt;

use crate::bitops::{BinaryValue, PackedVector, Word, WORD_BITS};
use crate::error::{Error, Result};

/// Height × width × channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape3 {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape3 {
            height,
            width,
            channels,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Binarized H×W×C activation tensor.
///
/// Storage is channel-planar: each channel is one [`PackedVector`] with
/// `B = 32` over the row-major `H·W` pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedFeatureMap {
    shape: Shape3,
    planes: Vec<PackedVector>,
}

impl PackedFeatureMap {
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        assert!(shape.height > 0 && shape.width > 0 && shape.channels > 0);
        let planes = (0..shape.channels)
            .map(|c| {
                let bits = (0..shape.height)
                    .flat_map(|y| (0..shape.width).map(move |x| (y, x)))
                    .map(|(y, x)| f(y, x, c));
                PackedVector::from_bits(bits, WORD_BITS).expect("32 is a valid bitwidth")
            })
            .collect();
        PackedFeatureMap { shape, planes }
    }

    /// Builds a map from already-packed channel planes.
    pub fn from_planes(shape: Shape3, planes: Vec<PackedVector>) -> Result<Self> {
        if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
            return Err(Error::param(format!("empty feature map {shape}")));
        }
        if planes.len() != shape.channels
            || planes
                .iter()
                .any(|p| p.len() != shape.pixels() || p.bitwidth() != WORD_BITS)
        {
            return Err(Error::param(format!(
                "planes do not describe a {shape} feature map"
            )));
        }
        Ok(PackedFeatureMap { shape, planes })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn plane(&self, channel: usize) -> &PackedVector {
        &self.planes[channel]
    }

    #[inline]
    pub fn bit(&self, y: usize, x: usize, c: usize) -> bool {
        let idx = y * self.shape.width + x;
        self.planes[c].words()[idx >> 5] >> (31 - (idx & 31)) & 1 == 1
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> BinaryValue {
        BinaryValue::from_bit(self.bit(y, x, c))
    }

    /// Flattens channel-major (`c·H·W + y·W + x`) into one B=32 vector.
    pub fn flatten(&self) -> PackedVector {
        let pixels = self.shape.pixels();
        if pixels % WORD_BITS as usize == 0 {
            let words: Vec<Word> = self
                .planes
                .iter()
                .flat_map(|p| p.words().iter().copied())
                .collect();
            return PackedVector::from_words(words, self.shape.len(), WORD_BITS)
                .expect("planes carry no pad bits");
        }
        let bits: Vec<bool> = self
            .planes
            .iter()
            .flat_map(|p| p.iter().map(BinaryValue::bit))
            .collect();
        PackedVector::from_bits(bits, WORD_BITS).expect("32 is a valid bitwidth")
    }
}

/// Signed accumulators of a binarized layer, stored HWC.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegerFeatureMap {
    shape: Shape3,
    data: Vec<i32>,
}

impl IntegerFeatureMap {
    pub fn new(shape: Shape3, data: Vec<i32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::param(format!(
                "{} values for a {shape} map",
                data.len()
            )));
        }
        Ok(IntegerFeatureMap { shape, data })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> i32 {
        self.data[(y * self.shape.width + x) * self.shape.channels + c]
    }
}

/// Real-valued accumulators of the float-input first layer, stored HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatFeatureMap {
    shape: Shape3,
    data: Vec<f32>,
}

impl FloatFeatureMap {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::param(format!(
                "{} values for a {shape} map",
                data.len()
            )));
        }
        Ok(FloatFeatureMap { shape, data })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.shape.width + x) * self.shape.channels + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_access_matches_construction() {
        let shape = Shape3::new(5, 7, 3);
        let f = |y: usize, x: usize, c: usize| (y * 31 + x * 7 + c * 3) % 5 < 2;
        let m = PackedFeatureMap::from_fn(shape, f);
        for y in 0..5 {
            for x in 0..7 {
                for c in 0..3 {
                    assert_eq!(m.bit(y, x, c), f(y, x, c));
                }
            }
        }
    }

    #[test]
    fn flatten_is_channel_major() {
        for shape in [Shape3::new(4, 8, 3), Shape3::new(3, 5, 2)] {
            let f = |y: usize, x: usize, c: usize| (y + 2 * x + 5 * c) % 3 == 0;
            let m = PackedFeatureMap::from_fn(shape, f);
            let flat = m.flatten();
            assert_eq!(flat.len(), shape.len());
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        let idx = c * shape.pixels() + y * shape.width + x;
                        assert_eq!(flat.get(idx).bit(), f(y, x, c));
                    }
                }
            }
        }
    }
}
