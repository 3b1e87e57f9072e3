//! Patch extraction and the XNOR-popcount convolution.

use crate::bitops::{valid_mask, PackedVector, Word, WORD_BITS};
use crate::error::{Error, Result};
use crate::model::{check_kernel_size, PackedConvWeights};
use crate::preproc::Image;
use crate::tensor::{FloatFeatureMap, IntegerFeatureMap, PackedFeatureMap, Shape3};

/// Image rows staged per band during patch extraction.
pub const DEFAULT_BAND_ROWS: usize = 2;

/// Packed K×K windows of every output pixel: one word per (pixel, channel),
/// element `dy·K + dx` of the window at bit `K·K - 1 - (dy·K + dx)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedPatchMatrix {
    shape: Shape3,
    kernel_size: usize,
    words: Vec<Word>,
}

impl PackedPatchMatrix {
    /// Spatial extent of the source map (rows = `height·width`).
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn rows(&self) -> usize {
        self.shape.pixels()
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    /// The `C_in` words of output pixel `p`.
    #[inline]
    pub fn row(&self, p: usize) -> &[Word] {
        let c = self.shape.channels;
        &self.words[p * c..(p + 1) * c]
    }
}

/// Same-size patch extraction with fused packing; out-of-bounds taps read
/// as -1 (bit 0).
pub fn im2col_pack(x: &PackedFeatureMap, kernel_size: usize) -> Result<PackedPatchMatrix> {
    im2col_pack_banded(x, kernel_size, DEFAULT_BAND_ROWS)
}

/// [`im2col_pack`] staging `band_rows` output rows (plus a `R`-row halo
/// above and below) into a zero-initialized scratch buffer of width `W+2R`
/// at a time. The zero border supplies the padding.
pub fn im2col_pack_banded(
    x: &PackedFeatureMap,
    kernel_size: usize,
    band_rows: usize,
) -> Result<PackedPatchMatrix> {
    check_kernel_size(kernel_size)?;
    if band_rows == 0 {
        return Err(Error::param("band_rows must be positive"));
    }
    let shape = x.shape();
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let r = (kernel_size - 1) / 2;
    let stride = w + 2 * r;
    let bits = (kernel_size * kernel_size) as u32;
    let mut words = vec![0 as Word; h * w * ch];
    let mut scratch = vec![0u8; (band_rows + 2 * r) * stride];

    let k = kernel_size;
    let row_mask = valid_mask(k as u32, k as u32);
    let mut regs = [0 as Word; 5];
    for y0 in (0..h).step_by(band_rows) {
        let rows = band_rows.min(h - y0);
        for c in 0..ch {
            stage_band(x, c, y0, rows, r, &mut scratch);
            for ty in 0..rows {
                let out_row = (y0 + ty) * w;
                let band = &scratch[ty * stride..(ty + k) * stride];
                // regs[dy] holds the K cells of window row dy ending at column tx+K-1
                for (dy, reg) in regs.iter_mut().enumerate().take(k) {
                    *reg = band[dy * stride..dy * stride + k - 1]
                        .iter()
                        .fold(0, |a, &b| a << 1 | b as Word);
                }
                for tx in 0..w {
                    let mut v: Word = 0;
                    for (dy, reg) in regs.iter_mut().enumerate().take(k) {
                        *reg = (*reg << 1 | band[dy * stride + tx + k - 1] as Word) & row_mask;
                        v = v << k | *reg;
                    }
                    words[(out_row + tx) * ch + c] = v;
                }
            }
        }
    }
    debug_assert!(bits <= WORD_BITS);
    Ok(PackedPatchMatrix {
        shape,
        kernel_size,
        words,
    })
}

/// Copies image rows `y0-R .. y0+rows+R` of channel `c` into `scratch`,
/// leaving every out-of-image cell zero.
fn stage_band(
    x: &PackedFeatureMap,
    c: usize,
    y0: usize,
    rows: usize,
    r: usize,
    scratch: &mut [u8],
) {
    let shape = x.shape();
    let (h, w) = (shape.height, shape.width);
    let stride = w + 2 * r;
    scratch.fill(0);
    let plane = x.plane(c).words();
    for sr in 0..rows + 2 * r {
        let Some(y) = (y0 + sr).checked_sub(r).filter(|&y| y < h) else {
            continue;
        };
        let dst = &mut scratch[sr * stride + r..sr * stride + r + w];
        // walk the plane bit by bit from element y*W
        let start = y * w;
        let mut word = start >> 5;
        let mut shift = 31 - (start & 31) as u32;
        for d in dst.iter_mut() {
            *d = (plane[word] >> shift & 1) as u8;
            if shift == 0 {
                shift = 31;
                word += 1;
            } else {
                shift -= 1;
            }
        }
    }
}

/// Input-channel tiles at least this wide reduce over channels innermost.
const WIDE_TILE: usize = 8;

/// Block sizes for [`binarized_conv_tiled`]. `usize::MAX` means one tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTiling {
    pub pixels: usize,
    pub out_channels: usize,
    pub in_channels: usize,
}

impl ConvTiling {
    pub const WHOLE: ConvTiling = ConvTiling {
        pixels: usize::MAX,
        out_channels: usize::MAX,
        in_channels: usize::MAX,
    };

    pub fn uniform(size: usize) -> Self {
        ConvTiling {
            pixels: size,
            out_channels: size,
            in_channels: size,
        }
    }
}

impl Default for ConvTiling {
    fn default() -> Self {
        ConvTiling {
            pixels: 64,
            out_channels: usize::MAX,
            in_channels: usize::MAX,
        }
    }
}

/// `F[p, o] = Σ_c xnor_dot(patch[p, c], kernel[o, c], K·K)`.
pub fn binarized_conv(
    patches: &PackedPatchMatrix,
    weights: &PackedConvWeights,
) -> Result<IntegerFeatureMap> {
    binarized_conv_tiled(patches, weights, ConvTiling::default())
}

pub fn binarized_conv_tiled(
    patches: &PackedPatchMatrix,
    weights: &PackedConvWeights,
    tiling: ConvTiling,
) -> Result<IntegerFeatureMap> {
    if patches.channels() != weights.in_channels()
        || patches.kernel_size() != weights.kernel_size()
    {
        return Err(Error::param(format!(
            "patches ({} channels, K={}) do not fit kernels ({} channels, K={})",
            patches.channels(),
            patches.kernel_size(),
            weights.in_channels(),
            weights.kernel_size()
        )));
    }
    if tiling.pixels == 0 || tiling.out_channels == 0 || tiling.in_channels == 0 {
        return Err(Error::param("tile sizes must be positive"));
    }
    let n_out = weights.out_channels();
    let mut acc = vec![0i32; patches.rows() * n_out];
    #[cfg(target_arch = "x86_64")]
    if crate::bitops::has_avx2() && crate::bitops::has_hw_popcount() {
        // SAFETY: the CPU was just checked for both features.
        unsafe { accumulate_avx2(patches, weights, tiling, &mut acc) };
    } else if crate::bitops::has_hw_popcount() {
        // SAFETY: as above.
        unsafe { accumulate_popcnt(patches, weights, tiling, &mut acc) };
    } else {
        accumulate(patches, weights, tiling, &mut acc);
    }
    #[cfg(not(target_arch = "x86_64"))]
    accumulate(patches, weights, tiling, &mut acc);
    let s = patches.shape();
    IntegerFeatureMap::new(Shape3::new(s.height, s.width, n_out), acc)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn accumulate_popcnt(
    patches: &PackedPatchMatrix,
    weights: &PackedConvWeights,
    tiling: ConvTiling,
    acc: &mut [i32],
) {
    accumulate(patches, weights, tiling, acc)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,popcnt")]
unsafe fn accumulate_avx2(
    patches: &PackedPatchMatrix,
    weights: &PackedConvWeights,
    tiling: ConvTiling,
    acc: &mut [i32],
) {
    accumulate(patches, weights, tiling, acc)
}

#[inline(always)]
fn accumulate(
    patches: &PackedPatchMatrix,
    weights: &PackedConvWeights,
    tiling: ConvTiling,
    acc: &mut [i32],
) {
    let n_pix = patches.rows();
    let (n_out, n_in) = (weights.out_channels(), weights.in_channels());
    let kk = weights.bitwidth() as i32;
    // [c][o], so narrow tiles can sweep contiguous output channels
    let mut filters_t = vec![0 as Word; n_in * n_out];
    for o in 0..n_out {
        for (c, &w) in weights.filter(o).iter().enumerate() {
            filters_t[c * n_out + o] = w;
        }
    }
    for p0 in (0..n_pix).step_by(tiling.pixels.min(n_pix)) {
        let p1 = p0.saturating_add(tiling.pixels).min(n_pix);
        for o0 in (0..n_out).step_by(tiling.out_channels.min(n_out)) {
            let o1 = o0.saturating_add(tiling.out_channels).min(n_out);
            for c0 in (0..n_in).step_by(tiling.in_channels.min(n_in)) {
                let c1 = c0.saturating_add(tiling.in_channels).min(n_in);
                for p in p0..p1 {
                    let row = &patches.row(p)[c0..c1];
                    let out = &mut acc[p * n_out + o0..p * n_out + o1];
                    if row.len() >= WIDE_TILE {
                        let valid = kk * row.len() as i32;
                        let filters = &weights.words()[o0 * n_in..o1 * n_in];
                        for (slot, f) in out.iter_mut().zip(filters.chunks_exact(n_in)) {
                            let flips: u32 = row
                                .iter()
                                .zip(&f[c0..c1])
                                .map(|(&a, &b)| (a ^ b).count_ones())
                                .sum();
                            *slot += valid - 2 * flips as i32;
                        }
                    } else {
                        for (c, &a) in (c0..c1).zip(row) {
                            let w = &filters_t[c * n_out + o0..c * n_out + o1];
                            for (slot, &b) in out.iter_mut().zip(w) {
                                *slot += kk - 2 * (a ^ b).count_ones() as i32;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// First layer over real pixels: `F[y,x,o] = Σ ±x[y+dy-R, x+dx-R, c]` with
/// zero padding, evaluated with additions and subtractions only.
pub fn float_input_conv(image: &Image, weights: &PackedConvWeights) -> Result<FloatFeatureMap> {
    let shape = image.shape();
    if shape.channels != weights.in_channels() {
        return Err(Error::param(format!(
            "kernel expects {} channels, image has {}",
            weights.in_channels(),
            shape.channels
        )));
    }
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let k = weights.kernel_size();
    let r = weights.radius();
    let bits = weights.bitwidth();
    let n_out = weights.out_channels();
    let px = image.pixels();
    let mut out = vec![0f32; h * w * n_out];
    for y in 0..h {
        for x in 0..w {
            let acc = &mut out[(y * w + x) * n_out..(y * w + x + 1) * n_out];
            for dy in 0..k {
                let Some(yy) = (y + dy).checked_sub(r).filter(|&v| v < h) else {
                    continue;
                };
                for dx in 0..k {
                    let Some(xx) = (x + dx).checked_sub(r).filter(|&v| v < w) else {
                        continue;
                    };
                    let shift = bits - 1 - (dy * k + dx) as u32;
                    let base = (yy * w + xx) * ch;
                    for c in 0..ch {
                        let v = px[base + c];
                        for (o, a) in acc.iter_mut().enumerate() {
                            if weights.word(o, c) >> shift & 1 == 1 {
                                *a += v;
                            } else {
                                *a -= v;
                            }
                        }
                    }
                }
            }
        }
    }
    FloatFeatureMap::new(Shape3::new(h, w, n_out), out)
}

/// Elementwise sign of integer accumulators, packed channel-planar.
pub fn binarize_featuremap(f: &IntegerFeatureMap) -> PackedFeatureMap {
    pack_planes(f.shape(), f.data(), |&v| v > 0)
}

pub fn binarize_float_featuremap(f: &FloatFeatureMap) -> PackedFeatureMap {
    pack_planes(f.shape(), f.data(), |&v| crate::bitops::sign(v as f64).bit())
}

/// Splits HWC values into B=32 channel planes of `positive(v)` bits, one
/// 32-pixel block at a time.
fn pack_planes<T>(s: Shape3, data: &[T], positive: impl Fn(&T) -> bool) -> PackedFeatureMap {
    let ch = s.channels;
    let block = WORD_BITS as usize * ch;
    let mut planes: Vec<Vec<Word>> =
        vec![Vec::with_capacity(s.pixels().div_ceil(WORD_BITS as usize)); ch];
    for chunk in data.chunks(block) {
        let n = chunk.len() / ch;
        for (c, plane) in planes.iter_mut().enumerate() {
            let mut word: Word = 0;
            for p in 0..n {
                word = word << 1 | positive(&chunk[p * ch + c]) as Word;
            }
            plane.push(word << (WORD_BITS as usize - n));
        }
    }
    let planes = planes
        .into_iter()
        .map(|w| PackedVector::from_words(w, s.pixels(), WORD_BITS).expect("pad bits stay zero"))
        .collect();
    PackedFeatureMap::from_planes(s, planes).expect("planes built from the map shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitops::BinaryValue;

    fn map(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> bool) -> PackedFeatureMap {
        PackedFeatureMap::from_fn(Shape3::new(h, w, c), f)
    }

    /// Naive window read with -1 padding, packed MSB-first.
    fn naive_patch(x: &PackedFeatureMap, y: usize, xx: usize, c: usize, k: usize) -> Word {
        let s = x.shape();
        let r = (k - 1) as isize / 2;
        let mut v = 0;
        for dy in 0..k as isize {
            for dx in 0..k as isize {
                let (py, px) = (y as isize + dy - r, xx as isize + dx - r);
                let inside = py >= 0 && px >= 0 && (py as usize) < s.height && (px as usize) < s.width;
                let bit = inside && x.bit(py as usize, px as usize, c);
                v = v << 1 | bit as Word;
            }
        }
        v
    }

    #[test]
    fn k1_is_identity() {
        let m = map(3, 4, 2, |y, x, c| (y + x + c) % 2 == 0);
        let p = im2col_pack(&m, 1).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                for c in 0..2 {
                    assert_eq!(p.row(y * 4 + x)[c], m.bit(y, x, c) as Word);
                }
            }
        }
    }

    #[test]
    fn corner_and_interior_windows() {
        let ones = map(4, 4, 1, |_, _, _| true);
        let p = im2col_pack(&ones, 3).unwrap();
        assert_eq!(p.row(0)[0], 27);
        assert_eq!(p.row(0)[0], 0b000_011_011);

        let ones = map(9, 9, 1, |_, _, _| true);
        let p = im2col_pack(&ones, 5).unwrap();
        assert_eq!(p.row(4 * 9 + 4)[0], 0x1FF_FFFF);
    }

    #[test]
    fn unsupported_kernel() {
        let m = map(2, 2, 1, |_, _, _| true);
        assert!(matches!(im2col_pack(&m, 2), Err(Error::UnsupportedKernel(2))));
        assert!(matches!(im2col_pack(&m, 7), Err(Error::UnsupportedKernel(7))));
    }

    #[test]
    fn band_size_does_not_change_patches() {
        let m = map(7, 5, 3, |y, x, c| (y * 7 + x * 3 + c) % 4 < 2);
        for k in [1, 3, 5] {
            let reference = im2col_pack_banded(&m, k, 7).unwrap();
            for band in [1, 2, 3, 64] {
                assert_eq!(im2col_pack_banded(&m, k, band).unwrap(), reference);
            }
            for y in 0..7 {
                for x in 0..5 {
                    for c in 0..3 {
                        assert_eq!(reference.row(y * 5 + x)[c], naive_patch(&m, y, x, c, k));
                    }
                }
            }
        }
    }

    #[test]
    fn conv_examples() {
        let ones = map(9, 9, 3, |_, _, _| true);
        let w = PackedConvWeights::new(1, 3, 5, vec![0x1FF_FFFF; 3]).unwrap();
        let f = binarized_conv(&im2col_pack(&ones, 5).unwrap(), &w).unwrap();
        assert_eq!(f.get(4, 4, 0), 75);

        // checkerboard patch against all-ones kernel: 5 agreements, 4 disagreements
        let checker = map(3, 3, 1, |y, x, _| (y + x) % 2 == 0);
        let w = PackedConvWeights::new(1, 1, 3, vec![0x1FF]).unwrap();
        let f = binarized_conv(&im2col_pack(&checker, 3).unwrap(), &w).unwrap();
        assert_eq!(f.get(1, 1, 0), 1);

        // self-correlation: kernel = patch at the centre
        let m = map(5, 5, 2, |y, x, c| (y * 5 + x + c) % 3 == 0);
        let p = im2col_pack(&m, 3).unwrap();
        let centre = p.row(2 * 5 + 2);
        let w = PackedConvWeights::new(1, 2, 3, centre.to_vec()).unwrap();
        assert_eq!(binarized_conv(&p, &w).unwrap().get(2, 2, 0), 18);
    }

    #[test]
    fn conv_shape_mismatch() {
        let m = map(3, 3, 2, |_, _, _| true);
        let p = im2col_pack(&m, 3).unwrap();
        let w = PackedConvWeights::new(1, 3, 3, vec![0; 3]).unwrap();
        assert!(binarized_conv(&p, &w).is_err());
        let w = PackedConvWeights::new(1, 2, 1, vec![0; 2]).unwrap();
        assert!(binarized_conv(&p, &w).is_err());
    }

    #[test]
    fn float_input_examples() {
        let zeros = Image::new(Shape3::new(4, 4, 3), vec![0.0; 48]).unwrap();
        let w = PackedConvWeights::new(2, 3, 3, vec![0x155; 6]).unwrap();
        assert!(float_input_conv(&zeros, &w).unwrap().data().iter().all(|&v| v == 0.0));

        let img = Image::new(Shape3::new(2, 2, 1), vec![1.0, 2.5, -3.0, 4.0]).unwrap();
        let id = PackedConvWeights::new(1, 1, 1, vec![1]).unwrap();
        assert_eq!(float_input_conv(&img, &id).unwrap().data(), img.pixels());

        let ones = Image::new(Shape3::new(3, 3, 1), vec![1.0; 9]).unwrap();
        let w = PackedConvWeights::new(1, 1, 3, vec![0x1FF]).unwrap();
        let f = float_input_conv(&ones, &w).unwrap();
        assert_eq!(f.get(1, 1, 0), 9.0);
        assert_eq!(f.get(0, 0, 0), 4.0, "real-zero padding");
    }

    #[test]
    fn binarize_examples() {
        let f = IntegerFeatureMap::new(Shape3::new(1, 4, 1), vec![-3, 0, 2, 7]).unwrap();
        let b = binarize_featuremap(&f);
        let bits: Vec<bool> = (0..4).map(|x| b.bit(0, x, 0)).collect();
        assert_eq!(bits, [false, false, true, true]);
        assert_eq!(b.plane(0).words()[0] >> 28, 0b0011);
        assert_eq!(b.get(0, 3, 0), BinaryValue::Plus);
    }
}
