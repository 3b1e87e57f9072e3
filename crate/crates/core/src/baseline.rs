//! Full-precision counterpart of the packed network at identical shapes.
//!
//! Activations and weights are f32 (weights are the ±1 values of the model),
//! convolutions are lowered to an explicit im2col matrix followed by a
//! cache-blocked GEMM, and fully-connected layers are dense GEMVs. The
//! network is the same function as the packed engine, so the two agree on
//! every class decision; only the arithmetic differs.

use crate::engine::{fc_float, Probe};
use crate::error::{Error, Result};
use crate::model::{Activation, InputMode, Layer, ModelDescriptor, PackedConvWeights};
use crate::preproc::{self, Image};
use crate::tensor::Shape3;

/// Column blocking of the GEMM's reduction dimension.
const KC: usize = 256;

/// Float weights of one layer, prepared once per model.
enum Prepared {
    /// `[K·K·C_in][C_out]` row-major; reduction index `(c·K + dy)·K + dx`.
    Conv {
        weights: Vec<f32>,
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        pad: f32,
    },
    Pool,
    /// `[L][D]` row-major.
    Dense { weights: Vec<f32>, out_dim: usize },
    Head,
}

/// A model lowered to dense f32 tensors.
pub struct FloatNetwork<'m> {
    model: &'m ModelDescriptor,
    layers: Vec<Prepared>,
}

fn conv_matrix(w: &PackedConvWeights) -> Vec<f32> {
    let (k, ci, co) = (w.kernel_size(), w.in_channels(), w.out_channels());
    let mut m = vec![0f32; k * k * ci * co];
    for c in 0..ci {
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                for o in 0..co {
                    m[row * co + o] = w.weight(o, c, dy, dx).to_i32() as f32;
                }
            }
        }
    }
    m
}

impl<'m> FloatNetwork<'m> {
    pub fn new(model: &'m ModelDescriptor) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::ConvBinary(w) | Layer::ConvFloatInput(w) => Prepared::Conv {
                    weights: conv_matrix(w),
                    kernel_size: w.kernel_size(),
                    in_channels: w.in_channels(),
                    out_channels: w.out_channels(),
                    pad: if matches!(layer, Layer::ConvBinary(_)) { -1.0 } else { 0.0 },
                },
                Layer::MaxPool2x2 => Prepared::Pool,
                Layer::FcBinary(w) => Prepared::Dense {
                    weights: w
                        .rows()
                        .iter()
                        .flat_map(|r| r.iter().map(|v| v.to_i32() as f32))
                        .collect(),
                    out_dim: w.out_dim(),
                },
                Layer::FcFloat(_) => Prepared::Head,
            })
            .collect();
        FloatNetwork { model, layers }
    }

    pub fn forward(&self, image: &Image) -> Result<Vec<f32>> {
        self.forward_probed(image, &mut ())
    }

    /// Same stage boundaries as the packed engine's probe.
    pub fn forward_probed(&self, image: &Image, probe: &mut impl Probe) -> Result<Vec<f32>> {
        let model = self.model;
        if image.shape() != model.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: model.input_shape().to_string(),
                actual: image.shape().to_string(),
            });
        }
        let mut stage = 0;
        let mut done = |probe: &mut _| {
            Probe::stage_done(probe, stage);
            stage += 1;
        };
        // current activation, HWC
        let mut x: Vec<f32> = match model.input_mode() {
            InputMode::None => image.pixels().to_vec(),
            InputMode::ThresholdRgb | InputMode::ThresholdGray => {
                let t = model.thresholds().expect("validated").values();
                let c = image.shape().channels;
                let v = image
                    .pixels()
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| if p + t[i % c] > 0.0 { 1.0 } else { -1.0 })
                    .collect();
                done(probe);
                v
            }
            InputMode::Lbp => {
                let gray;
                let src = if image.shape().channels == 3 {
                    gray = preproc::grayscale(image)?;
                    &gray
                } else {
                    image
                };
                let b = preproc::lbp_binarize(src)?;
                let s = b.shape();
                let mut v = Vec::with_capacity(s.len());
                for y in 0..s.height {
                    for xx in 0..s.width {
                        for c in 0..s.channels {
                            v.push(if b.bit(y, xx, c) { 1.0 } else { -1.0 });
                        }
                    }
                }
                done(probe);
                v
            }
        };
        let mut cols = Vec::new();
        for ((layer, prep), io) in model.layers().iter().zip(&self.layers).zip(model.plan()) {
            match prep {
                Prepared::Conv {
                    weights,
                    kernel_size,
                    in_channels,
                    out_channels,
                    pad,
                } => {
                    let s = match io.input {
                        Activation::Image(s) | Activation::Map(s) => s,
                        _ => unreachable!("validated plan"),
                    };
                    let binary = matches!(layer, Layer::ConvBinary(_));
                    im2col(&x, s, *kernel_size, *pad, binary, &mut cols);
                    if binary {
                        done(probe);
                    }
                    let kdim = kernel_size * kernel_size * in_channels;
                    x = gemm(&cols, weights, s.pixels(), kdim, *out_channels);
                    done(probe);
                }
                Prepared::Pool => {
                    let Activation::Map(s) = io.input else { unreachable!() };
                    x = maxpool_sign(&x, s);
                    done(probe);
                }
                Prepared::Dense { weights, out_dim } => {
                    let input = match io.input {
                        Activation::Map(s) => flatten_sign(&x, s),
                        _ => x.iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect(),
                    };
                    x = gemv(weights, &input, *out_dim);
                    done(probe);
                }
                Prepared::Head => {
                    let Layer::FcFloat(w) = layer else { unreachable!() };
                    x = fc_float(&x, w)?;
                    done(probe);
                }
            }
        }
        Ok(x)
    }
}

/// Patch matrix `[H·W][C·K·K]` with `pad` outside the map, optionally
/// taking the sign of every value.
fn im2col(x: &[f32], s: Shape3, k: usize, pad: f32, binarize: bool, cols: &mut Vec<f32>) {
    let (h, w, ch) = (s.height, s.width, s.channels);
    let r = (k - 1) / 2;
    let kdim = ch * k * k;
    cols.clear();
    cols.resize(h * w * kdim, pad);
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * kdim..(y * w + xx + 1) * kdim];
            for dy in 0..k {
                let Some(iy) = (y + dy).checked_sub(r).filter(|&v| v < h) else {
                    continue;
                };
                for dx in 0..k {
                    let Some(ix) = (xx + dx).checked_sub(r).filter(|&v| v < w) else {
                        continue;
                    };
                    let src = &x[(iy * w + ix) * ch..(iy * w + ix + 1) * ch];
                    for (c, &v) in src.iter().enumerate() {
                        row[(c * k + dy) * k + dx] = match binarize {
                            true if v > 0.0 => 1.0,
                            true => -1.0,
                            false => v,
                        };
                    }
                }
            }
        }
    }
}

/// `C[m][n] = Σ_k A[m][k] · B[k][n]`, blocked over the reduction dimension
/// so a panel of `B` stays in cache while it is swept by every row of `A`.
fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0f32; m * n];
    for k0 in (0..k).step_by(KC) {
        let k1 = (k0 + KC).min(k);
        for i in 0..m {
            let a_row = &a[i * k + k0..i * k + k1];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (p, &av) in a_row.iter().enumerate() {
                let b_row = &b[(k0 + p) * n..(k0 + p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

fn gemv(w: &[f32], x: &[f32], out_dim: usize) -> Vec<f32> {
    let d = x.len();
    (0..out_dim)
        .map(|l| w[l * d..(l + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// 2×2 max pooling followed by sign.
fn maxpool_sign(x: &[f32], s: Shape3) -> Vec<f32> {
    let (oh, ow, ch) = (s.height / 2, s.width / 2, s.channels);
    let mut out = vec![0f32; oh * ow * ch];
    for y in 0..oh {
        for xx in 0..ow {
            let i00 = ((2 * y) * s.width + 2 * xx) * ch;
            let i10 = i00 + s.width * ch;
            for c in 0..ch {
                let m = x[i00 + c].max(x[i00 + ch + c]).max(x[i10 + c]).max(x[i10 + ch + c]);
                out[(y * ow + xx) * ch + c] = if m > 0.0 { 1.0 } else { -1.0 };
            }
        }
    }
    out
}

fn flatten_sign(x: &[f32], s: Shape3) -> Vec<f32> {
    let ch = s.channels;
    let mut v = Vec::with_capacity(s.len());
    for c in 0..ch {
        v.extend(
            x.iter()
                .skip(c)
                .step_by(ch)
                .map(|&a| if a > 0.0 { 1.0 } else { -1.0 }),
        );
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{argmax, Engine};
    use crate::model::ReferenceConfig;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (5, 300, 7);
        let a: Vec<f32> = (0..m * k).map(|i| (i % 13) as f32 - 6.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let c = gemm(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let e: f32 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert_eq!(c[i * n + j], e);
            }
        }
    }

    #[test]
    fn agrees_with_packed_engine() {
        for mode in [InputMode::None, InputMode::ThresholdRgb, InputMode::ThresholdGray, InputMode::Lbp] {
            let cfg = ReferenceConfig {
                input_mode: mode,
                height: 12,
                width: 8,
                conv_channels: 5,
                kernel_size: 5,
                fc_units: 9,
                head: vec![4],
            };
            let m = cfg.random_model(21).unwrap();
            let net = FloatNetwork::new(&m);
            for i in 0..4 {
                let img = preproc::seeded_image(3, i, m.input_shape());
                let packed = Engine::default().forward(&m, &img).unwrap();
                let float = net.forward(&img).unwrap();
                assert_eq!(argmax(&float), packed.class);
                assert_eq!(float, packed.scores, "{mode}");
            }
        }
    }
}
