//! The packed forward pass.

mod conv;
mod fc;
mod pool;

pub use conv::{
    binarize_featuremap, binarize_float_featuremap, binarized_conv, binarized_conv_tiled,
    float_input_conv, im2col_pack, im2col_pack_banded, ConvTiling, PackedPatchMatrix,
    DEFAULT_BAND_ROWS,
};
pub use fc::{fc_binary, fc_float, tree_reduce, DEFAULT_SEGMENTS};
pub use pool::maxpool2x2;

use crate::bitops::{PackedVector, WORD_BITS};
use crate::error::{Error, Result};
use crate::model::{Activation, InputMode, Layer, ModelDescriptor};
use crate::preproc::{self, BinaryImage, Image};
use crate::tensor::{FloatFeatureMap, IntegerFeatureMap, PackedFeatureMap};

/// Execution knobs. None of them changes any output bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Engine {
    pub conv_tiling: ConvTiling,
    pub fc_segments: usize,
    pub band_rows: usize,
}

impl Default for Engine {
    fn default() -> Self {
        Engine {
            conv_tiling: ConvTiling::default(),
            fc_segments: DEFAULT_SEGMENTS,
            band_rows: DEFAULT_BAND_ROWS,
        }
    }
}

/// Head scores and the winning class (lowest index on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub scores: Vec<f32>,
    pub class: usize,
}

/// Raw output of one layer, before any binarization by its consumer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerOutput {
    FloatMap(FloatFeatureMap),
    IntMap(IntegerFeatureMap),
    Pooled(PackedFeatureMap),
    IntVector(Vec<i32>),
    Scores(Vec<f32>),
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub input: Option<BinaryImage>,
    pub layers: Vec<LayerOutput>,
}

/// Timed unit of the forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    /// Index of the model layer, `None` for input binarization.
    pub layer: Option<usize>,
}

/// Stages executed by [`Engine::forward_probed`], in order.
///
/// Packing a layer's output is charged to the layer that consumes it.
pub fn stages(model: &ModelDescriptor) -> Vec<Stage> {
    let mut out = Vec::new();
    let s = model.input_shape();
    if model.input_mode() != InputMode::None {
        out.push(Stage {
            name: format!("Input binarization ({},{},{})", s.height, s.width, s.channels),
            layer: None,
        });
    }
    for (i, (layer, io)) in model.layers().iter().zip(model.plan()).enumerate() {
        let dims = |a: &Activation| match *a {
            Activation::Image(s) | Activation::Map(s) => {
                format!("{},{},{}", s.height, s.width, s.channels)
            }
            Activation::Vector(d) | Activation::Scores(d) => d.to_string(),
        };
        let mut push = |name: String| out.push(Stage { name, layer: Some(i) });
        match layer {
            Layer::ConvBinary(w) => {
                push(format!("Im2col3d ({})", dims(&io.input)));
                push(format!(
                    "GEMM-convolution ({},{},{},{})",
                    w.out_channels(),
                    w.kernel_size(),
                    w.kernel_size(),
                    w.in_channels()
                ));
            }
            Layer::ConvFloatInput(w) => push(format!(
                "Float-input convolution ({},{},{},{})",
                w.out_channels(),
                w.kernel_size(),
                w.kernel_size(),
                w.in_channels()
            )),
            Layer::MaxPool2x2 => push(format!("Max-Pooling ({})", dims(&io.input))),
            Layer::FcBinary(w) => {
                let input = match io.input {
                    Activation::Map(s) => format!("{}×{}×{}", s.height, s.width, s.channels),
                    other => other.len().to_string(),
                };
                push(format!("Fully-Connected ({}, {input})", w.out_dim()));
            }
            Layer::FcFloat(w) => push(format!(
                "Fully-Connected float ({}, {})",
                w.out_dim(),
                w.in_dim()
            )),
        }
    }
    out
}

/// Observer of stage completion; see [`Engine::forward_probed`].
pub trait Probe {
    fn stage_done(&mut self, stage: usize);
}

impl Probe for () {
    #[inline]
    fn stage_done(&mut self, _stage: usize) {}
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

enum State<'a> {
    Image(&'a Image),
    Float(FloatFeatureMap),
    Int(IntegerFeatureMap),
    Binary(PackedFeatureMap),
    IntVector(Vec<i32>),
    Scores(Vec<f32>),
}

impl State<'_> {
    fn into_binary_map(self) -> PackedFeatureMap {
        match self {
            State::Float(f) => binarize_float_featuremap(&f),
            State::Int(f) => binarize_featuremap(&f),
            State::Binary(b) => b,
            _ => unreachable!("validated plan feeds a map"),
        }
    }

    fn into_binary_vector(self) -> PackedVector {
        match self {
            State::IntVector(v) => {
                PackedVector::from_bits(v.iter().map(|&a| a > 0), WORD_BITS).expect("valid bitwidth")
            }
            other => other.into_binary_map().flatten(),
        }
    }

    fn into_float_vector(self) -> Vec<f32> {
        match self {
            State::IntVector(v) => v.into_iter().map(|a| a as f32).collect(),
            State::Scores(s) => s,
            _ => unreachable!("validated plan feeds a vector"),
        }
    }

    fn snapshot(&self) -> LayerOutput {
        match self {
            State::Float(f) => LayerOutput::FloatMap(f.clone()),
            State::Int(f) => LayerOutput::IntMap(f.clone()),
            State::Binary(b) => LayerOutput::Pooled(b.clone()),
            State::IntVector(v) => LayerOutput::IntVector(v.clone()),
            State::Scores(s) => LayerOutput::Scores(s.clone()),
            State::Image(_) => unreachable!("no layer outputs an image"),
        }
    }
}

/// Binarizes `image` according to the model's input mode.
pub fn binarize_input(model: &ModelDescriptor, image: &Image) -> Result<Option<BinaryImage>> {
    check_input(model, image)?;
    Ok(match model.input_mode() {
        InputMode::None => None,
        InputMode::ThresholdRgb | InputMode::ThresholdGray => Some(preproc::threshold_binarize(
            image,
            model.thresholds().expect("validated threshold model"),
        )?),
        InputMode::Lbp => {
            let gray;
            let src = if image.shape().channels == 3 {
                gray = preproc::grayscale(image)?;
                &gray
            } else {
                image
            };
            Some(preproc::lbp_binarize(src)?)
        }
    })
}

fn check_input(model: &ModelDescriptor, image: &Image) -> Result<()> {
    if image.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape().to_string(),
            actual: image.shape().to_string(),
        });
    }
    Ok(())
}

impl Engine {
    pub fn forward(&self, model: &ModelDescriptor, image: &Image) -> Result<Inference> {
        self.run(model, image, &mut (), None)
    }

    /// Forward pass that also returns every layer's raw output.
    pub fn forward_traced(
        &self,
        model: &ModelDescriptor,
        image: &Image,
    ) -> Result<(Inference, Trace)> {
        let mut trace = Trace {
            input: None,
            layers: Vec::with_capacity(model.layers().len()),
        };
        let inf = self.run(model, image, &mut (), Some(&mut trace))?;
        Ok((inf, trace))
    }

    /// Forward pass calling `probe.stage_done(i)` as stage `i` of
    /// [`stages`] completes.
    pub fn forward_probed(
        &self,
        model: &ModelDescriptor,
        image: &Image,
        probe: &mut impl Probe,
    ) -> Result<Inference> {
        self.run(model, image, probe, None)
    }

    fn run(
        &self,
        model: &ModelDescriptor,
        image: &Image,
        probe: &mut impl Probe,
        mut trace: Option<&mut Trace>,
    ) -> Result<Inference> {
        let mut stage = 0;
        let mut done = |probe: &mut _| {
            Probe::stage_done(probe, stage);
            stage += 1;
        };
        let mut state = match binarize_input(model, image)? {
            None => State::Image(image),
            Some(b) => {
                done(probe);
                if let Some(t) = trace.as_deref_mut() {
                    t.input = Some(b.clone());
                }
                State::Binary(b)
            }
        };
        for layer in model.layers() {
            state = match layer {
                Layer::ConvFloatInput(w) => {
                    let State::Image(img) = state else {
                        unreachable!("validated plan")
                    };
                    let out = float_input_conv(img, w)?;
                    done(probe);
                    State::Float(out)
                }
                Layer::ConvBinary(w) => {
                    let x = state.into_binary_map();
                    let patches = im2col_pack_banded(&x, w.kernel_size(), self.band_rows)?;
                    done(probe);
                    let out = binarized_conv_tiled(&patches, w, self.conv_tiling)?;
                    done(probe);
                    State::Int(out)
                }
                Layer::MaxPool2x2 => {
                    let out = maxpool2x2(&state.into_binary_map())?;
                    done(probe);
                    State::Binary(out)
                }
                Layer::FcBinary(w) => {
                    let out = fc_binary(&state.into_binary_vector(), w, self.fc_segments)?;
                    done(probe);
                    State::IntVector(out)
                }
                Layer::FcFloat(w) => {
                    let out = fc_float(&state.into_float_vector(), w)?;
                    done(probe);
                    State::Scores(out)
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.layers.push(state.snapshot());
            }
        }
        let scores = state.into_float_vector();
        let class = argmax(&scores);
        Ok(Inference { scores, class })
    }
}
