//! Word-level primitives for ±1 arithmetic.
//!
//! A ±1 vector of length `D` is stored in `⌈D/B⌉` 32-bit words, `B` elements
//! per word, MSB-first: element `i` (0-based) of a word lives at bit
//! `B - 1 - i`. Bit 1 encodes +1 and bit 0 encodes -1. Every bit outside the
//! valid range of a word is zero, which keeps [`xnor_dot`] exact on partial
//! final words. This layout is also the on-disk layout of the model format.

use crate::error::{Error, Result};

/// Machine word used for all packed data.
pub type Word = u32;

/// Bits in a [`Word`]; the largest supported packing bitwidth.
pub const WORD_BITS: u32 = Word::BITS;

/// One element of a binarized tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryValue {
    Minus,
    Plus,
}

impl BinaryValue {
    #[inline]
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            BinaryValue::Plus
        } else {
            BinaryValue::Minus
        }
    }

    #[inline]
    pub fn bit(self) -> bool {
        self == BinaryValue::Plus
    }

    #[inline]
    pub fn to_i32(self) -> i32 {
        match self {
            BinaryValue::Minus => -1,
            BinaryValue::Plus => 1,
        }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.to_i32() as f64
    }
}

/// Deterministic sign: `+1` for `x > 0`, `-1` otherwise (zero maps to `-1`).
#[inline]
pub fn sign(x: f64) -> BinaryValue {
    debug_assert!(x.is_finite(), "sign() of non-finite value {x}");
    BinaryValue::from_bit(x > 0.0)
}

/// Integer form of [`sign`]; integer accumulators never need the float path.
#[inline]
pub fn sign_i32(x: i32) -> BinaryValue {
    BinaryValue::from_bit(x > 0)
}

#[inline]
fn check_bitwidth(bitwidth: u32) -> Result<()> {
    if bitwidth == 0 || bitwidth > WORD_BITS {
        return Err(Error::param(format!(
            "packing bitwidth {bitwidth} outside 1..=32"
        )));
    }
    Ok(())
}

/// Mask of the `valid` high-order positions of a `bitwidth`-bit word, i.e.
/// bits `bitwidth-1 ..= bitwidth-valid`.
#[inline]
pub fn valid_mask(bitwidth: u32, valid: u32) -> Word {
    debug_assert!(valid <= bitwidth && bitwidth <= WORD_BITS);
    if valid == 0 {
        return 0;
    }
    let low = low_bits(bitwidth - valid);
    low_bits(bitwidth) & !low
}

#[inline]
fn low_bits(n: u32) -> Word {
    if n >= WORD_BITS {
        Word::MAX
    } else {
        (1 << n) - 1
    }
}

/// A ±1 vector packed into words, MSB-first within each word.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PackedVector {
    words: Vec<Word>,
    len: usize,
    bitwidth: u32,
}

impl PackedVector {
    /// Wraps raw words, checking the word count and that every pad bit is 0.
    pub fn from_words(words: Vec<Word>, len: usize, bitwidth: u32) -> Result<Self> {
        check_bitwidth(bitwidth)?;
        let expected = len.div_ceil(bitwidth as usize);
        if words.len() != expected {
            return Err(Error::param(format!(
                "{} words for a length-{len} vector at B={bitwidth}, expected {expected}",
                words.len()
            )));
        }
        let v = PackedVector {
            words,
            len,
            bitwidth,
        };
        for (j, &w) in v.words.iter().enumerate() {
            let mask = valid_mask(bitwidth, v.word_valid(j));
            if w & !mask != 0 {
                return Err(Error::Corrupt(format!(
                    "word {j} = {w:#x} has pad bits set outside mask {mask:#x}"
                )));
            }
        }
        Ok(v)
    }

    /// Builds a vector directly from a bit iterator (`true` = +1).
    pub fn from_bits<I>(bits: I, bitwidth: u32) -> Result<Self>
    where
        I: IntoIterator<Item = bool>,
    {
        check_bitwidth(bitwidth)?;
        let mut words = Vec::new();
        let mut len = 0usize;
        let mut cur: Word = 0;
        let mut pos = 0u32;
        for bit in bits {
            cur |= (bit as Word) << (bitwidth - 1 - pos);
            pos += 1;
            len += 1;
            if pos == bitwidth {
                words.push(cur);
                cur = 0;
                pos = 0;
            }
        }
        if pos != 0 {
            words.push(cur);
        }
        Ok(PackedVector {
            words,
            len,
            bitwidth,
        })
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn into_words(self) -> Vec<Word> {
        self.words
    }

    /// Logical element count `D`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bitwidth(&self) -> u32 {
        self.bitwidth
    }

    /// Valid bits in the final word: `D mod B`, or `B` when divisible.
    pub fn last_word_valid(&self) -> u32 {
        if self.words.is_empty() {
            return 0;
        }
        match (self.len % self.bitwidth as usize) as u32 {
            0 => self.bitwidth,
            r => r,
        }
    }

    /// Valid bits in word `j`.
    #[inline]
    pub fn word_valid(&self, j: usize) -> u32 {
        if j + 1 == self.words.len() {
            self.last_word_valid()
        } else {
            self.bitwidth
        }
    }

    /// Element `i` (0-based).
    pub fn get(&self, i: usize) -> BinaryValue {
        assert!(i < self.len, "index {i} out of range for length {}", self.len);
        let b = self.bitwidth as usize;
        let word = self.words[i / b];
        BinaryValue::from_bit(word >> (b - 1 - i % b) & 1 == 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = BinaryValue> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }
}

/// Packs a ±1 sequence with `bitwidth` elements per word.
pub fn pack(values: &[BinaryValue], bitwidth: u32) -> Result<PackedVector> {
    PackedVector::from_bits(values.iter().map(|v| v.bit()), bitwidth)
}

/// Inverse of [`pack`]. Fails if any pad bit is set.
pub fn unpack(packed: &PackedVector) -> Result<Vec<BinaryValue>> {
    for (j, &w) in packed.words.iter().enumerate() {
        let mask = valid_mask(packed.bitwidth, packed.word_valid(j));
        if w & !mask != 0 {
            return Err(Error::Corrupt(format!(
                "word {j} = {w:#x} has pad bits set outside mask {mask:#x}"
            )));
        }
    }
    Ok(packed.iter().collect())
}

/// Dot product of two ±1 vectors of `valid` elements each, packed in `a` and
/// `b`: `valid - 2 * popcount(a ^ b)`. Bits outside the valid positions must
/// be zero in both words.
#[inline]
pub fn xnor_dot(a: Word, b: Word, valid: u32) -> i32 {
    debug_assert!((1..=WORD_BITS).contains(&valid));
    debug_assert!(
        a.count_ones() <= valid && b.count_ones() <= valid,
        "pad bits set: a={a:#x} b={b:#x} valid={valid}"
    );
    valid as i32 - 2 * (a ^ b).count_ones() as i32
}

/// Dot product over word range `range` of two equally shaped vectors.
#[inline(always)]
pub(crate) fn packed_dot_range(
    a: &PackedVector,
    b: &PackedVector,
    range: std::ops::Range<usize>,
) -> i32 {
    let last = a.words.len().wrapping_sub(1);
    let mut valid_bits = 0i32;
    let mut flips = 0i32;
    for j in range {
        valid_bits += if j == last {
            a.last_word_valid()
        } else {
            a.bitwidth
        } as i32;
        flips += (a.words[j] ^ b.words[j]).count_ones() as i32;
    }
    valid_bits - 2 * flips
}

/// Whether the running CPU has a population-count instruction. Kernels use
/// it to pick a variant compiled with that instruction enabled.
#[inline]
pub fn has_hw_popcount() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("popcnt")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Whether the running CPU has 256-bit integer vectors (AVX2).
#[inline]
pub fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Exact ±1 dot product of two packed vectors of identical shape.
pub fn packed_dot(a: &PackedVector, b: &PackedVector) -> Result<i32> {
    if a.len != b.len || a.bitwidth != b.bitwidth || a.words.len() != b.words.len() {
        return Err(Error::param(format!(
            "packed_dot shape mismatch: (D={}, B={}) vs (D={}, B={})",
            a.len, a.bitwidth, b.len, b.bitwidth
        )));
    }
    Ok(packed_dot_range(a, b, 0..a.words.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use BinaryValue::{Minus as M, Plus as P};

    fn brute_dot(a: &[BinaryValue], b: &[BinaryValue]) -> i32 {
        a.iter().zip(b).map(|(x, y)| x.to_i32() * y.to_i32()).sum()
    }

    /// Evaluates the packing sum term by term: element i (1-based) adds
    /// (1 + x_i) * 2^(B - 2 - (i-1) mod B), i.e. sets bit B-1-(i-1) mod B.
    fn pack_by_formula(x: &[i32], b: u32) -> Vec<u64> {
        x.chunks(b as usize)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .map(|(m, &xi)| ((1 + xi) as u64) << (b as u64 - 1 - m as u64) >> 1)
                    .sum()
            })
            .collect()
    }

    #[test]
    fn sign_boundaries() {
        assert_eq!(sign(0.0), M);
        assert_eq!(sign(-0.0), M);
        assert_eq!(sign(3.7), P);
        assert_eq!(sign(-2.0), M);
        assert_eq!(sign(f64::MIN_POSITIVE), P);
        assert_eq!(sign_i32(0), M);
        assert_eq!(sign_i32(1), P);
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic]
    fn sign_rejects_nan_in_debug() {
        sign(f64::NAN);
    }

    #[test]
    fn pack_examples() {
        let v = pack(&[P, M, P, P], 4).unwrap();
        assert_eq!(v.words(), &[0b1011]);
        assert_eq!(pack_by_formula(&[1, -1, 1, 1], 4), vec![11]);

        assert_eq!(pack(&[M; 25], 25).unwrap().words(), &[0]);
        assert_eq!(pack(&[P; 25], 25).unwrap().words(), &[0x1FF_FFFF]);
        assert_eq!(pack(&[P; 32], 32).unwrap().words(), &[u32::MAX]);
    }

    #[test]
    fn pack_rejects_bad_bitwidth() {
        assert!(matches!(pack(&[P], 0), Err(Error::Parameter(_))));
        assert!(matches!(pack(&[P], 33), Err(Error::Parameter(_))));
    }

    #[test]
    fn pack_partial_last_word() {
        let v = pack(&[P, P, P, P, P], 3).unwrap();
        assert_eq!(v.words(), &[0b111, 0b110]);
        assert_eq!(v.last_word_valid(), 2);
        let empty = pack(&[], 7).unwrap();
        assert!(empty.words().is_empty());
        assert_eq!(empty.last_word_valid(), 0);
    }

    #[test]
    fn unpack_examples() {
        let v = PackedVector::from_words(vec![11], 4, 4).unwrap();
        assert_eq!(unpack(&v).unwrap(), vec![P, M, P, P]);
        let v = PackedVector::from_words(vec![0], 8, 8).unwrap();
        assert_eq!(unpack(&v).unwrap(), vec![M; 8]);
        let v = PackedVector::from_words(vec![0b10, 0b1], 4, 2).unwrap();
        assert_eq!(unpack(&v).unwrap(), vec![P, M, M, P]);
    }

    #[test]
    fn pad_bits_are_rejected() {
        // B=4 word with bit 4 set
        assert!(matches!(
            PackedVector::from_words(vec![0b1_0000], 4, 4),
            Err(Error::Corrupt(_))
        ));
        // final word of D=5, B=4 has one valid bit (bit 3); bit 0 is pad
        assert!(matches!(
            PackedVector::from_words(vec![0, 0b0001], 5, 4),
            Err(Error::Corrupt(_))
        ));
        assert!(PackedVector::from_words(vec![0, 0b1000], 5, 4).is_ok());
        let corrupt = PackedVector {
            words: vec![0b1_0000],
            len: 4,
            bitwidth: 4,
        };
        assert!(matches!(unpack(&corrupt), Err(Error::Corrupt(_))));
    }

    #[test]
    fn xnor_dot_examples() {
        assert_eq!(xnor_dot(0b1101, 0b1001, 4), 2);
        assert_eq!(brute_dot(&[P, P, M, P], &[P, M, M, P]), 2);
        assert_eq!(xnor_dot(0x0AB_CDEF, 0x0AB_CDEF, 25), 25);
        assert_eq!(xnor_dot(0, 0x1FF_FFFF, 25), -25);
        assert_eq!(xnor_dot(u32::MAX, 0, 32), -32);
    }

    #[test]
    fn packed_dot_examples() {
        let e = pack(&[], 4).unwrap();
        assert_eq!(packed_dot(&e, &e).unwrap(), 0);

        let a = pack(&[P; 50], 25).unwrap();
        assert_eq!(packed_dot(&a, &a).unwrap(), 50);

        let x = [P, M, P, M, M, P];
        let y = [P, P, P, P, M, M];
        let a = pack(&x, 3).unwrap();
        let b = pack(&y, 3).unwrap();
        assert_eq!(brute_dot(&x, &y), 0);
        assert_eq!(packed_dot(&a, &b).unwrap(), 0);
    }

    #[test]
    fn packed_dot_shape_mismatch() {
        let a = pack(&[P; 6], 3).unwrap();
        let b = pack(&[P; 6], 2).unwrap();
        let c = pack(&[P; 5], 3).unwrap();
        assert!(packed_dot(&a, &b).is_err());
        assert!(packed_dot(&a, &c).is_err());
    }

    #[test]
    fn valid_mask_layout() {
        assert_eq!(valid_mask(4, 4), 0b1111);
        assert_eq!(valid_mask(4, 1), 0b1000);
        assert_eq!(valid_mask(32, 32), u32::MAX);
        assert_eq!(valid_mask(32, 1), 1 << 31);
        assert_eq!(valid_mask(25, 25), 0x1FF_FFFF);
        assert_eq!(valid_mask(7, 0), 0);
    }

    #[test]
    fn xnor_dot_exhaustive_small_widths() {
        for w in 1..=8u32 {
            for a in 0..(1u32 << w) {
                for b in 0..(1u32 << w) {
                    let va = pack_word_values(a, w);
                    let vb = pack_word_values(b, w);
                    assert_eq!(xnor_dot(a, b, w), brute_dot(&va, &vb));
                }
            }
        }
    }

    fn pack_word_values(word: u32, w: u32) -> Vec<BinaryValue> {
        (0..w)
            .map(|i| BinaryValue::from_bit(word >> (w - 1 - i) & 1 == 1))
            .collect()
    }

    fn values(max: usize) -> impl Strategy<Value = Vec<BinaryValue>> {
        prop::collection::vec(any::<bool>().prop_map(BinaryValue::from_bit), 0..max)
    }

    proptest! {
        #[test]
        fn roundtrip(x in values(200), b in 1u32..=32) {
            let p = pack(&x, b).unwrap();
            prop_assert_eq!(p.words().len(), x.len().div_ceil(b as usize));
            prop_assert_eq!(unpack(&p).unwrap(), x);
        }

        #[test]
        fn pack_matches_formula(x in values(100), b in 1u32..=32) {
            let ints: Vec<i32> = x.iter().map(|v| v.to_i32()).collect();
            let p = pack(&x, b).unwrap();
            let words: Vec<u64> = p.words().iter().map(|&w| w as u64).collect();
            // The formula places bits relative to a full word; a partial final
            // word keeps its elements in the high positions, as the formula does.
            prop_assert_eq!(words, pack_by_formula(&ints, b));
        }

        #[test]
        fn range_and_parity(a in any::<u32>(), b in any::<u32>(), w in 1u32..=32) {
            let mask = valid_mask(w, w);
            let d = xnor_dot(a & mask, b & mask, w);
            prop_assert!(d.abs() <= w as i32);
            prop_assert_eq!((d - w as i32).rem_euclid(2), 0);
        }

        #[test]
        fn concatenation_linearity(
            words in 1usize..6,
            extra in 0usize..6,
            b in 1u32..=32,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n1 = words * b as usize;
            let n2 = extra * b as usize + rng.gen_range(0..b as usize);
            let mut gen = |n: usize| -> Vec<BinaryValue> {
                (0..n).map(|_| BinaryValue::from_bit(rng.gen())).collect()
            };
            let (a1, a2, b1, b2) = (gen(n1), gen(n2), gen(n1), gen(n2));
            let cat = |x: &[BinaryValue], y: &[BinaryValue]| [x, y].concat();
            let whole = packed_dot(&pack(&cat(&a1, &a2), b).unwrap(), &pack(&cat(&b1, &b2), b).unwrap()).unwrap();
            let left = packed_dot(&pack(&a1, b).unwrap(), &pack(&b1, b).unwrap()).unwrap();
            let right = packed_dot(&pack(&a2, b).unwrap(), &pack(&b2, b).unwrap()).unwrap();
            prop_assert_eq!(whole, left + right);
            prop_assert_eq!(whole, brute_dot(&cat(&a1, &a2), &cat(&b1, &b2)));
        }
    }
}
