use crate::bitops::{PackedVector, Word, WORD_BITS};
use crate::error::{Error, Result};
use crate::tensor::{PackedFeatureMap, Shape3};

/// 2×2 max pooling of a binarized map: the OR of each window.
///
/// Since sign is monotone, this equals binarizing the integer max-pool of
/// the accumulators.
pub fn maxpool2x2(x: &PackedFeatureMap) -> Result<PackedFeatureMap> {
    let s = x.shape();
    if s.height % 2 != 0 || s.width % 2 != 0 {
        return Err(Error::param(format!("2x2 pooling needs even dimensions, got {s}")));
    }
    let out = Shape3::new(s.height / 2, s.width / 2, s.channels);
    let n_words = out.pixels().div_ceil(WORD_BITS as usize);
    let bit = |plane: &[Word], i: usize| plane[i >> 5] >> (31 - (i & 31)) & 1;
    let planes = (0..s.channels)
        .map(|c| {
            let src = x.plane(c).words();
            let mut words = vec![0 as Word; n_words];
            for y in 0..out.height {
                let top = 2 * y * s.width;
                let bottom = top + s.width;
                for xx in 0..out.width {
                    let q = y * out.width + xx;
                    let v = bit(src, top + 2 * xx)
                        | bit(src, top + 2 * xx + 1)
                        | bit(src, bottom + 2 * xx)
                        | bit(src, bottom + 2 * xx + 1);
                    words[q >> 5] |= v << (31 - (q & 31));
                }
            }
            PackedVector::from_words(words, out.pixels(), WORD_BITS).expect("pad bits stay zero")
        })
        .collect();
    PackedFeatureMap::from_planes(out, planes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_or() {
        let zero = PackedFeatureMap::from_fn(Shape3::new(2, 2, 1), |_, _, _| false);
        assert!(!maxpool2x2(&zero).unwrap().bit(0, 0, 0));
        let one = PackedFeatureMap::from_fn(Shape3::new(2, 2, 1), |y, x, _| (y, x) == (0, 1));
        assert!(maxpool2x2(&one).unwrap().bit(0, 0, 0));
    }

    #[test]
    fn checkerboard_pools_to_ones() {
        let m = PackedFeatureMap::from_fn(Shape3::new(6, 8, 2), |y, x, c| (y + x + c) % 2 == 0);
        let p = maxpool2x2(&m).unwrap();
        assert_eq!(p.shape(), Shape3::new(3, 4, 2));
        for y in 0..3 {
            for x in 0..4 {
                assert!(p.bit(y, x, 0) && p.bit(y, x, 1));
            }
        }
    }

    #[test]
    fn odd_dimensions_rejected() {
        let m = PackedFeatureMap::from_fn(Shape3::new(3, 4, 1), |_, _, _| true);
        assert!(matches!(maxpool2x2(&m), Err(Error::Parameter(_))));
    }
}
