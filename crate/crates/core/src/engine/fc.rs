use crate::bitops::{packed_dot_range, PackedVector};
use crate::error::{Error, Result};
use crate::model::{FloatLinear, PackedFcWeights};

/// Partial sums per weight row in the segmented fully-connected layer.
pub const DEFAULT_SEGMENTS: usize = 64;

/// `out[l] = w.rows[l] · x`.
///
/// Each row's words are split into `segments` contiguous ranges; the
/// partial dot products are then combined by a pairwise tree reduction.
pub fn fc_binary(x: &PackedVector, w: &PackedFcWeights, segments: usize) -> Result<Vec<i32>> {
    if x.len() != w.in_dim() || x.bitwidth() != 32 {
        return Err(Error::param(format!(
            "input of length {} (B={}) for a layer expecting {} at B=32",
            x.len(),
            x.bitwidth(),
            w.in_dim()
        )));
    }
    if segments == 0 {
        return Err(Error::param("segment count must be positive"));
    }
    #[cfg(target_arch = "x86_64")]
    if crate::bitops::has_hw_popcount() {
        // SAFETY: the CPU was just checked for popcnt support.
        return Ok(unsafe { rows_popcnt(x, w, segments) });
    }
    Ok(rows(x, w, segments))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn rows_popcnt(x: &PackedVector, w: &PackedFcWeights, segments: usize) -> Vec<i32> {
    rows(x, w, segments)
}

#[inline(always)]
fn rows(x: &PackedVector, w: &PackedFcWeights, segments: usize) -> Vec<i32> {
    let n_words = x.words().len();
    let seg_len = n_words.div_ceil(segments).max(1);
    let mut partials = Vec::with_capacity(segments);
    w.rows()
        .iter()
        .map(|row| {
            partials.clear();
            partials.extend(
                (0..n_words)
                    .step_by(seg_len)
                    .map(|s| packed_dot_range(row, x, s..(s + seg_len).min(n_words))),
            );
            tree_reduce(&mut partials)
        })
        .collect()
}

/// Sums `values` by repeatedly adding element pairs `(i, i + half)`.
pub fn tree_reduce(values: &mut [i32]) -> i32 {
    let mut n = values.len();
    if n == 0 {
        return 0;
    }
    while n > 1 {
        let half = n.div_ceil(2);
        for i in 0..n / 2 {
            values[i] += values[i + half];
        }
        n = half;
    }
    values[0]
}

/// Affine map of the float head. Products are accumulated in f64 and the
/// result rounded once to f32.
pub fn fc_float(x: &[f32], w: &FloatLinear) -> Result<Vec<f32>> {
    if x.len() != w.in_dim() {
        return Err(Error::param(format!(
            "input of length {} for a layer expecting {}",
            x.len(),
            w.in_dim()
        )));
    }
    Ok((0..w.out_dim())
        .map(|l| {
            let dot: f64 = w
                .row(l)
                .iter()
                .zip(x)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let bias = w.bias().map_or(0.0, |b| b[l] as f64);
            (dot + bias) as f32
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitops::{pack, BinaryValue};
    use rand::{Rng, SeedableRng};

    fn weights(bits: &[Vec<bool>]) -> PackedFcWeights {
        let d = bits[0].len();
        PackedFcWeights::new(
            bits.iter()
                .map(|r| PackedVector::from_bits(r.iter().copied(), 32).unwrap())
                .collect(),
            d,
        )
        .unwrap()
    }

    #[test]
    fn self_and_complement() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<bool> = (0..100).map(|_| rng.gen()).collect();
        let not_x: Vec<bool> = x.iter().map(|b| !b).collect();
        let xp = PackedVector::from_bits(x.iter().copied(), 32).unwrap();
        let w = weights(&[not_x.clone(), x.clone(), not_x]);
        assert_eq!(fc_binary(&xp, &w, 64).unwrap(), vec![-100, 100, -100]);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<BinaryValue> = (0..64).map(|_| BinaryValue::from_bit(rng.gen())).collect();
        let w: Vec<Vec<BinaryValue>> = (0..2)
            .map(|_| (0..64).map(|_| BinaryValue::from_bit(rng.gen())).collect())
            .collect();
        let expected: Vec<i32> = w
            .iter()
            .map(|r| r.iter().zip(&x).map(|(a, b)| a.to_i32() * b.to_i32()).sum())
            .collect();
        let weights = PackedFcWeights::new(w.iter().map(|r| pack(r, 32).unwrap()).collect(), 64).unwrap();
        for segments in [1, 2, 3, 64] {
            assert_eq!(fc_binary(&pack(&x, 32).unwrap(), &weights, segments).unwrap(), expected);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let w = weights(&[vec![true; 40]]);
        let x = PackedVector::from_bits(vec![true; 41], 32).unwrap();
        assert!(fc_binary(&x, &w, 64).is_err());
        assert!(fc_float(&[1.0], &FloatLinear::new(1, 2, vec![1.0, 1.0], None).unwrap()).is_err());
    }

    #[test]
    fn tree_reduce_sums() {
        for n in 0..20 {
            let mut v: Vec<i32> = (0..n).map(|i| i * 3 - 7).collect();
            let expected: i32 = v.iter().sum();
            assert_eq!(tree_reduce(&mut v), expected);
        }
    }

    #[test]
    fn float_examples() {
        let id = FloatLinear::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], Some(vec![0.0, 0.0])).unwrap();
        assert_eq!(fc_float(&[3.5, -2.0], &id).unwrap(), vec![3.5, -2.0]);
        let zero = FloatLinear::new(2, 2, vec![0.0; 4], Some(vec![0.25, -1.0])).unwrap();
        assert_eq!(fc_float(&[3.5, -2.0], &zero).unwrap(), vec![0.25, -1.0]);
        let w = FloatLinear::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], None).unwrap();
        assert_eq!(fc_float(&[1.0, 1.0], &w).unwrap(), vec![3.0, 7.0]);
    }
}
