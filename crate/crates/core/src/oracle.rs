//! Naive floating-point reference of the network semantics.
//!
//! Every layer is evaluated from unpacked ±1 values with direct loops in
//! f64, which represents all accumulators exactly. Binary layers pad with
//! -1, the float-input layer pads with 0.0. Pooling takes the max of the
//! raw accumulators and binarization happens when a binary layer consumes
//! them; the packed engine does the opposite order, so agreement also
//! checks that pooling commutes with sign.

use std::fmt;

use crate::engine::{Engine, LayerOutput, Trace};
use crate::error::{Error, Result};
use crate::model::{Activation, InputMode, Layer, ModelDescriptor, PackedConvWeights};
use crate::preproc::{self, Image};
use crate::tensor::Shape3;

/// Relative tolerance for float-valued outputs (float-input conv and head).
pub const FLOAT_RTOL: f64 = 1e-5;

/// Values of one layer: HWC for maps, flat for vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleLayer {
    pub activation: Activation,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutput {
    /// Binarized input (±1, HWC), absent for float-input models.
    pub input: Option<OracleLayer>,
    pub layers: Vec<OracleLayer>,
    pub scores: Vec<f64>,
    pub class: usize,
}

fn pm1(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn kernel_value(w: &PackedConvWeights, o: usize, c: usize, dy: usize, dx: usize) -> f64 {
    let k = w.kernel_size();
    let pos = w.bitwidth() as usize - 1 - (dy * k + dx);
    if w.word(o, c) >> pos & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

fn oracle_input(model: &ModelDescriptor, image: &Image) -> Result<Option<OracleLayer>> {
    let s = image.shape();
    let values = match model.input_mode() {
        InputMode::None => return Ok(None),
        InputMode::ThresholdRgb | InputMode::ThresholdGray => {
            let t = model.thresholds().expect("validated").values();
            (0..s.len())
                .map(|i| pm1(image.pixels()[i] as f64 + t[i % s.channels] as f64))
                .collect()
        }
        InputMode::Lbp => {
            let gray = if s.channels == 3 {
                preproc::grayscale(image)?
            } else {
                image.clone()
            };
            let (h, w) = (s.height as isize, s.width as isize);
            let px = |y: isize, x: isize| {
                let y = y.max(0).min(h - 1) as usize;
                let x = x.max(0).min(w - 1) as usize;
                gray.pixels()[y * s.width + x]
            };
            // neighbors 0, 3 and 6 walking clockwise from the top-left
            let taps = [(-1, -1), (0, 1), (1, -1)];
            let mut v = Vec::with_capacity(s.pixels() * 3);
            for y in 0..h {
                for x in 0..w {
                    for (dy, dx) in taps {
                        v.push(if px(y + dy, x + dx) > px(y, x) { 1.0 } else { -1.0 });
                    }
                }
            }
            v
        }
    };
    let c = model.input_mode().binarized_channels(s.channels);
    Ok(Some(OracleLayer {
        activation: Activation::Map(Shape3::new(s.height, s.width, c)),
        values,
    }))
}

/// Cross-correlation of an HWC map with ±1 kernels; taps outside the map
/// read `pad`.
pub fn reference_conv(x: &[f64], s: Shape3, w: &PackedConvWeights, pad: f64) -> Vec<f64> {
    let (h, wd, ch) = (s.height as isize, s.width as isize, s.channels);
    let k = w.kernel_size();
    let r = w.radius() as isize;
    let n_out = w.out_channels();
    // kernel[dy][dx][c][o] as ±1.0
    let mut kernel = vec![0.0; k * k * ch * n_out];
    for dy in 0..k {
        for dx in 0..k {
            for c in 0..ch {
                for o in 0..n_out {
                    kernel[((dy * k + dx) * ch + c) * n_out + o] = kernel_value(w, o, c, dy, dx);
                }
            }
        }
    }
    let mut out = vec![0.0; s.pixels() * n_out];
    for i in 0..h {
        for j in 0..wd {
            let acc = &mut out[(i * wd + j) as usize * n_out..(i * wd + j + 1) as usize * n_out];
            for dy in 0..k {
                for dx in 0..k {
                    let (y, xx) = (i + dy as isize - r, j + dx as isize - r);
                    let inside = y >= 0 && xx >= 0 && y < h && xx < wd;
                    for c in 0..ch {
                        let v = if inside {
                            x[(y * wd + xx) as usize * ch + c]
                        } else {
                            pad
                        };
                        let taps = &kernel[((dy * k + dx) * ch + c) * n_out..][..n_out];
                        for (a, &kv) in acc.iter_mut().zip(taps) {
                            *a += kv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 max pooling of an HWC map.
pub fn reference_maxpool(x: &[f64], s: Shape3) -> Vec<f64> {
    let (oh, ow, ch) = (s.height / 2, s.width / 2, s.channels);
    let mut out = vec![0.0; oh * ow * ch];
    for y in 0..oh {
        for xx in 0..ow {
            for c in 0..ch {
                let at = |dy: usize, dx: usize| x[((2 * y + dy) * s.width + 2 * xx + dx) * ch + c];
                out[(y * ow + xx) * ch + c] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
            }
        }
    }
    out
}

/// Integer 2×2 max pooling, HWC.
pub fn maxpool_int(x: &[i32], s: Shape3) -> Vec<i32> {
    let (oh, ow, ch) = (s.height / 2, s.width / 2, s.channels);
    let mut out = vec![0; oh * ow * ch];
    for y in 0..oh {
        for xx in 0..ow {
            for c in 0..ch {
                let at = |dy: usize, dx: usize| x[((2 * y + dy) * s.width + 2 * xx + dx) * ch + c];
                out[(y * ow + xx) * ch + c] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
            }
        }
    }
    out
}

/// ±1 view of the values feeding a binary fully-connected layer, flattened
/// channel-major.
fn fc_input(prev: &OracleLayer) -> Vec<f64> {
    match prev.activation {
        Activation::Map(s) => {
            let mut v = Vec::with_capacity(s.len());
            for c in 0..s.channels {
                for p in 0..s.pixels() {
                    v.push(pm1(prev.values[p * s.channels + c]));
                }
            }
            v
        }
        _ => prev.values.iter().map(|&x| pm1(x)).collect(),
    }
}

/// Evaluates `model` on `image` by direct summation.
pub fn reference_forward(model: &ModelDescriptor, image: &Image) -> Result<OracleOutput> {
    if image.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape().to_string(),
            actual: image.shape().to_string(),
        });
    }
    let input = oracle_input(model, image)?;
    let mut prev = match &input {
        Some(l) => l.clone(),
        None => OracleLayer {
            activation: Activation::Image(image.shape()),
            values: image.pixels().iter().map(|&p| p as f64).collect(),
        },
    };
    let mut layers = Vec::with_capacity(model.layers().len());
    for (layer, io) in model.layers().iter().zip(model.plan()) {
        let values = match layer {
            Layer::ConvFloatInput(w) => {
                let Activation::Image(s) = io.input else { unreachable!() };
                reference_conv(&prev.values, s, w, 0.0)
            }
            Layer::ConvBinary(w) => {
                let Activation::Map(s) = io.input else { unreachable!() };
                let x: Vec<f64> = prev.values.iter().map(|&v| pm1(v)).collect();
                reference_conv(&x, s, w, -1.0)
            }
            Layer::MaxPool2x2 => {
                let Activation::Map(s) = io.input else { unreachable!() };
                reference_maxpool(&prev.values, s)
            }
            Layer::FcBinary(w) => {
                let x = fc_input(&prev);
                w.rows()
                    .iter()
                    .map(|row| {
                        row.iter()
                            .zip(&x)
                            .map(|(wv, &xv)| wv.to_f64() * xv)
                            .sum()
                    })
                    .collect()
            }
            Layer::FcFloat(w) => (0..w.out_dim())
                .map(|l| {
                    let mut acc = w.bias().map_or(0.0, |b| b[l] as f64);
                    for (d, &xv) in prev.values.iter().enumerate() {
                        acc += w.row(l)[d] as f64 * xv;
                    }
                    // head layers produce f32 outputs
                    acc as f32 as f64
                })
                .collect(),
        };
        prev = OracleLayer {
            activation: io.output,
            values,
        };
        layers.push(prev.clone());
    }
    let scores = prev.values.clone();
    let mut class = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[class] {
            class = i;
        }
    }
    Ok(OracleOutput {
        input,
        layers,
        scores,
        class,
    })
}

/// Where engine and oracle first disagreed for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub sample: usize,
    /// Model layer index; `None` for the binarized input.
    pub layer: Option<usize>,
    /// Flat index into the layer's values (HWC for maps).
    pub index: usize,
    /// `(y, x, c)` for map-valued layers.
    pub position: Option<(usize, usize, usize)>,
    pub engine: f64,
    pub oracle: f64,
    /// Every channel (or output unit) of that layer with a mismatch.
    pub channels: Vec<usize>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layer = self
            .layer
            .map_or_else(|| "input".to_string(), |l| format!("layer {l}"));
        write!(f, "sample {} {layer}", self.sample)?;
        match self.position {
            Some((y, x, c)) => write!(f, " at (y={y}, x={x}, c={c})")?,
            None => write!(f, " at index {}", self.index)?,
        }
        write!(
            f,
            ": engine {} vs oracle {} ({} channel(s) affected: {:?})",
            self.engine,
            self.oracle,
            self.channels.len(),
            self.channels
        )
    }
}

/// Outcome of running engine and oracle side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub seed: u64,
    /// Samples with at least one mismatch.
    pub divergent_samples: usize,
    /// First divergence of each divergent sample, in sample order.
    pub divergences: Vec<Divergence>,
    pub argmax_agreement: usize,
    /// Largest relative error seen on float outputs.
    pub max_float_rel_err: f64,
}

impl EquivalenceReport {
    pub fn is_equivalent(&self) -> bool {
        self.divergent_samples == 0
    }

    pub fn first(&self) -> Option<&Divergence> {
        self.divergences.first()
    }
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} divergences / {} samples (seed {}), argmax agreement {}/{}, max float rel err {:.3e}",
            self.divergent_samples,
            self.samples,
            self.seed,
            self.argmax_agreement,
            self.samples,
            self.max_float_rel_err
        )?;
        if let Some(d) = self.first() {
            write!(f, "\nfirst divergence: {d}")?;
        }
        Ok(())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Engine view of a layer as f64 values in the oracle's layout, plus a flag
/// telling whether the oracle value must be compared by sign only.
fn engine_values(out: &LayerOutput) -> (Vec<f64>, bool) {
    match out {
        LayerOutput::FloatMap(f) => (f.data().iter().map(|&v| v as f64).collect(), false),
        LayerOutput::IntMap(f) => (f.data().iter().map(|&v| v as f64).collect(), false),
        LayerOutput::Pooled(m) => {
            let s = m.shape();
            let mut v = Vec::with_capacity(s.len());
            for y in 0..s.height {
                for x in 0..s.width {
                    for c in 0..s.channels {
                        v.push(if m.bit(y, x, c) { 1.0 } else { -1.0 });
                    }
                }
            }
            (v, true)
        }
        LayerOutput::IntVector(v) => (v.iter().map(|&a| a as f64).collect(), false),
        LayerOutput::Scores(v) => (v.iter().map(|&a| a as f64).collect(), false),
    }
}

struct LayerCompare {
    mismatches: Vec<usize>,
    max_rel: f64,
}

fn compare_layer(engine: &[f64], oracle: &[f64], sign_only: bool, float: bool) -> LayerCompare {
    let mut mismatches = Vec::new();
    let mut max_rel = 0.0f64;
    for (i, (&e, &o)) in engine.iter().zip(oracle).enumerate() {
        let ok = if sign_only {
            e == pm1(o)
        } else if float {
            let r = rel_err(e, o);
            max_rel = max_rel.max(r);
            r <= FLOAT_RTOL && (e > 0.0) == (o > 0.0)
        } else {
            e == o
        };
        if !ok {
            mismatches.push(i);
        }
    }
    if engine.len() != oracle.len() {
        mismatches.push(engine.len().min(oracle.len()));
    }
    LayerCompare {
        mismatches,
        max_rel,
    }
}

/// Compares one engine trace against the oracle; returns the first
/// divergence (if any) and the largest float relative error.
pub fn compare_trace(
    sample: usize,
    trace: &Trace,
    engine_class: usize,
    oracle: &OracleOutput,
) -> (Option<Divergence>, f64) {
    let mut max_rel = 0.0f64;
    let to_div = |layer: Option<usize>, act: Activation, cmp: &LayerCompare, e: &[f64], o: &[f64]| {
        let i = cmp.mismatches[0];
        let (position, channel_of): (Option<(usize, usize, usize)>, Box<dyn Fn(usize) -> usize>) =
            match act {
                Activation::Map(s) | Activation::Image(s) => (
                    Some((i / s.channels / s.width, i / s.channels % s.width, i % s.channels)),
                    Box::new(move |j| j % s.channels),
                ),
                _ => (None, Box::new(|j| j)),
            };
        let mut channels: Vec<usize> = cmp.mismatches.iter().map(|&j| channel_of(j)).collect();
        channels.sort_unstable();
        channels.dedup();
        Divergence {
            sample,
            layer,
            index: i,
            position,
            engine: e.get(i).copied().unwrap_or(f64::NAN),
            oracle: o.get(i).copied().unwrap_or(f64::NAN),
            channels,
        }
    };

    if let (Some(ei), Some(oi)) = (&trace.input, &oracle.input) {
        let (e, _) = engine_values(&LayerOutput::Pooled(ei.clone()));
        let cmp = compare_layer(&e, &oi.values, false, false);
        if !cmp.mismatches.is_empty() {
            return (Some(to_div(None, oi.activation, &cmp, &e, &oi.values)), max_rel);
        }
    }
    for (l, (eo, oo)) in trace.layers.iter().zip(&oracle.layers).enumerate() {
        let (e, sign_only) = engine_values(eo);
        let float = matches!(eo, LayerOutput::FloatMap(_) | LayerOutput::Scores(_));
        let cmp = compare_layer(&e, &oo.values, sign_only, float);
        max_rel = max_rel.max(cmp.max_rel);
        if !cmp.mismatches.is_empty() {
            return (
                Some(to_div(Some(l), oo.activation, &cmp, &e, &oo.values)),
                max_rel,
            );
        }
    }
    if engine_class != oracle.class {
        let last = oracle.layers.len() - 1;
        return (
            Some(Divergence {
                sample,
                layer: Some(last),
                index: engine_class,
                position: None,
                engine: engine_class as f64,
                oracle: oracle.class as f64,
                channels: vec![engine_class, oracle.class],
            }),
            max_rel,
        );
    }
    (None, max_rel)
}

/// Runs engine and oracle on `n_samples` seeded random images.
pub fn check_equivalence(
    model: &ModelDescriptor,
    n_samples: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    check_equivalence_between(&Engine::default(), model, model, n_samples, seed)
}

/// Like [`check_equivalence`], but lets the engine run a different model
/// from the oracle (fault injection) and use custom engine settings.
pub fn check_equivalence_between(
    engine: &Engine,
    engine_model: &ModelDescriptor,
    oracle_model: &ModelDescriptor,
    n_samples: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    if n_samples == 0 {
        return Err(Error::param("n_samples must be at least 1"));
    }
    if engine_model.input_shape() != oracle_model.input_shape() {
        return Err(Error::param("engine and oracle models take different inputs"));
    }
    let shape = oracle_model.input_shape();
    let mut report = EquivalenceReport {
        samples: n_samples,
        seed,
        divergent_samples: 0,
        divergences: Vec::new(),
        argmax_agreement: 0,
        max_float_rel_err: 0.0,
    };
    for i in 0..n_samples {
        let image = preproc::seeded_image(seed, i as u64, shape);
        let (inf, trace) = engine.forward_traced(engine_model, &image)?;
        let oracle = reference_forward(oracle_model, &image)?;
        if inf.class == oracle.class {
            report.argmax_agreement += 1;
        }
        let (div, rel) = compare_trace(i, &trace, inf.class, &oracle);
        report.max_float_rel_err = report.max_float_rel_err.max(rel);
        if let Some(d) = div {
            report.divergent_samples += 1;
            report.divergences.push(d);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PackedFcWeights, ReferenceConfig, ThresholdVector};
    use crate::bitops::PackedVector;

    fn small(mode: InputMode) -> ModelDescriptor {
        ReferenceConfig {
            input_mode: mode,
            height: 8,
            width: 12,
            conv_channels: 4,
            kernel_size: 3,
            fc_units: 7,
            head: vec![3],
        }
        .random_model(11)
        .unwrap()
    }

    #[test]
    fn hand_computed_conv() {
        // 3x3 single-channel ±1 input, asymmetric kernel, -1 padding.
        // x = [[+,-,+],[+,+,-],[-,-,+]]
        let x = [1., -1., 1., 1., 1., -1., -1., -1., 1.];
        // kernel rows [+,+,-],[-,+,-],[+,-,-] -> bits 110 010 100
        let w = PackedConvWeights::new(1, 1, 3, vec![0b110_010_100]).unwrap();
        let f = reference_conv(&x, Shape3::new(3, 3, 1), &w, -1.0);
        // centre: (+1)(+1)+(+1)(-1)+(-1)(+1) + (-1)(+1)+(+1)(+1)+(-1)(-1)
        //       + (+1)(-1)+(-1)(-1)+(-1)(+1) = -1 + 1 - 1 = -1
        assert_eq!(f[4], -1.0);
        // top-left corner: window rows (-1,-1,-1), (-1,+,-), (-1,+,+)
        // row sums -1, +3, -3
        assert_eq!(f[0], -1.0);
        // bottom-right: window rows (+,-,-1), (-,+,-1), (-1,-1,-1)
        // row sums +1, +3, +1
        assert_eq!(f[8], 5.0);
        // zero padding instead
        let f0 = reference_conv(&x, Shape3::new(3, 3, 1), &w, 0.0);
        // top-left: in-bounds taps (1,1)->x[0,0]=+1 w=+1, (1,2)->x[0,1]=-1 w=-1,
        // (2,1)->x[1,0]=+1 w=-1, (2,2)->x[1,1]=+1 w=-1  => 1+1-1-1 = 0
        assert_eq!(f0[0], 0.0);
    }

    #[test]
    fn all_plus_conv1_interior_is_75() {
        let w = PackedConvWeights::new(1, 3, 5, vec![0x1FF_FFFF; 3]).unwrap();
        let x = vec![1.0; 9 * 9 * 3];
        assert_eq!(reference_conv(&x, Shape3::new(9, 9, 3), &w, -1.0)[4 * 9 + 4], 75.0);
    }

    #[test]
    fn engine_matches_oracle_in_every_mode() {
        for mode in [InputMode::None, InputMode::ThresholdRgb, InputMode::ThresholdGray, InputMode::Lbp] {
            let m = small(mode);
            let r = check_equivalence(&m, 6, 42).unwrap();
            assert!(r.is_equivalent(), "{mode}: {r}");
            assert_eq!(r.argmax_agreement, 6);
        }
    }

    #[test]
    fn flipped_weight_is_localized() {
        let m = small(InputMode::ThresholdRgb);
        let (mode, shape, t, mut layers) = m.clone().into_parts();
        let Layer::ConvBinary(w) = &layers[0] else { panic!() };
        layers[0] = Layer::ConvBinary(w.with_flipped_bit(2, 1, 4));
        let faulty = ModelDescriptor::new(mode, shape, t, layers).unwrap();
        let r = check_equivalence_between(&Engine::default(), &faulty, &m, 3, 7).unwrap();
        assert_eq!(r.divergent_samples, 3);
        let d = r.first().unwrap();
        assert_eq!(d.layer, Some(0));
        assert_eq!(d.channels, vec![2]);
    }

    #[test]
    fn report_is_reproducible() {
        let m = small(InputMode::Lbp);
        assert_eq!(check_equivalence(&m, 1, 5).unwrap(), check_equivalence(&m, 1, 5).unwrap());
        assert!(check_equivalence(&m, 0, 5).is_err());
    }

    #[test]
    fn zero_image_positive_threshold() {
        let m = small(InputMode::ThresholdRgb);
        let (mode, shape, _, layers) = m.into_parts();
        let m = ModelDescriptor::new(mode, shape, Some(ThresholdVector::new(vec![1.0; 3]).unwrap()), layers)
            .unwrap();
        let img = Image::new(shape, vec![0.0; shape.len()]).unwrap();
        let out = reference_forward(&m, &img).unwrap();
        assert!(out.input.unwrap().values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fc_binary_on_vector_input() {
        // FC -> FC chain exercises binarization of an integer vector.
        let row = |bits: Vec<bool>| PackedVector::from_bits(bits, 32).unwrap();
        let fc1 = PackedFcWeights::new(vec![row(vec![true; 12]), row(vec![false; 12])], 12).unwrap();
        let fc2 = PackedFcWeights::new(vec![row(vec![true, false])], 2).unwrap();
        let m = ModelDescriptor::new(
            InputMode::ThresholdGray,
            Shape3::new(3, 4, 1),
            Some(ThresholdVector::new(vec![-128.0]).unwrap()),
            vec![Layer::FcBinary(fc1), Layer::FcBinary(fc2)],
        )
        .unwrap();
        assert!(check_equivalence(&m, 4, 1).unwrap().is_equivalent());
    }
}
