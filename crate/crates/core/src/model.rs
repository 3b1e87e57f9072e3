//! Model representation and the `BCNN` wire format.
//!
//! Layout (all fields little-endian u32 unless noted):
//!
//! ```text
//! "BCNN" | version=1 | input_mode | H | W | C
//! [C x f32 thresholds, input modes 1 and 2 only]
//! num_layers
//! per layer: kind, then
//!   1/2 conv:    out_c, in_c, K, out_c*in_c words (outer out_c)
//!   3 maxpool:   (nothing)
//!   4 fc binary: L, D, L*ceil(D/32) words, row-major
//!   5 fc float:  L, D, has_bias, L*D f32 row-major, [L f32 bias]
//! ```

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitops::{self, valid_mask, PackedVector, Word, WORD_BITS};
use crate::error::{Error, Result};
use crate::tensor::Shape3;

pub const MAGIC: [u8; 4] = *b"BCNN";
pub const FORMAT_VERSION: u32 = 1;

/// How the first layer sees the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputMode {
    /// Real-valued pixels feed a [`Layer::ConvFloatInput`] layer.
    None,
    /// `sign(x + T)` per RGB channel.
    ThresholdRgb,
    /// `sign(x + T)` on a single grayscale channel.
    ThresholdGray,
    /// Three-channel local-binary-pattern encoding of the grayscale image.
    Lbp,
}

impl InputMode {
    pub fn code(self) -> u32 {
        match self {
            InputMode::None => 0,
            InputMode::ThresholdRgb => 1,
            InputMode::ThresholdGray => 2,
            InputMode::Lbp => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => InputMode::None,
            1 => InputMode::ThresholdRgb,
            2 => InputMode::ThresholdGray,
            3 => InputMode::Lbp,
            _ => return None,
        })
    }

    pub fn uses_thresholds(self) -> bool {
        matches!(self, InputMode::ThresholdRgb | InputMode::ThresholdGray)
    }

    /// Channels of the binarized image produced from a `channels`-channel input.
    pub fn binarized_channels(self, channels: usize) -> usize {
        match self {
            InputMode::None | InputMode::ThresholdRgb | InputMode::ThresholdGray => channels,
            InputMode::Lbp => 3,
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::None => "none",
            InputMode::ThresholdRgb => "threshold-rgb",
            InputMode::ThresholdGray => "threshold-gray",
            InputMode::Lbp => "lbp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    ConvBinary,
    ConvFloatInput,
    MaxPool2x2,
    FcBinary,
    FcFloat,
}

impl LayerKind {
    pub fn code(self) -> u32 {
        match self {
            LayerKind::ConvBinary => 1,
            LayerKind::ConvFloatInput => 2,
            LayerKind::MaxPool2x2 => 3,
            LayerKind::FcBinary => 4,
            LayerKind::FcFloat => 5,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            1 => LayerKind::ConvBinary,
            2 => LayerKind::ConvFloatInput,
            3 => LayerKind::MaxPool2x2,
            4 => LayerKind::FcBinary,
            5 => LayerKind::FcFloat,
            _ => return None,
        })
    }
}

/// Shape summary of one layer. `in_channels`/`out_channels` double as
/// `in_dim`/`out_dim` for fully-connected layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub radius: usize,
    pub bitwidth: u32,
}

/// Checks that `k` is a supported odd kernel size with `k*k <= 32`.
pub fn check_kernel_size(k: usize) -> Result<()> {
    if k % 2 == 0 || k * k > WORD_BITS as usize {
        return Err(Error::UnsupportedKernel(k));
    }
    Ok(())
}

/// Binarized convolution kernels, one `K·K`-bit word per (out, in) channel
/// pair, row-major over the window and MSB-first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedConvWeights {
    out_channels: usize,
    in_channels: usize,
    kernel_size: usize,
    words: Vec<Word>,
}

impl PackedConvWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_size: usize,
        words: Vec<Word>,
    ) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::param("convolution with zero channels"));
        }
        if words.len() != out_channels * in_channels {
            return Err(Error::param(format!(
                "{} kernel words for {out_channels}x{in_channels} channels",
                words.len()
            )));
        }
        let b = (kernel_size * kernel_size) as u32;
        let mask = valid_mask(b, b);
        if let Some(i) = words.iter().position(|&w| w & !mask != 0) {
            return Err(Error::Corrupt(format!(
                "kernel word {i} = {:#x} has bits above position {}",
                words[i],
                b - 1
            )));
        }
        Ok(PackedConvWeights {
            out_channels,
            in_channels,
            kernel_size,
            words,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn radius(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    /// Packing bitwidth, `K·K`.
    pub fn bitwidth(&self) -> u32 {
        (self.kernel_size * self.kernel_size) as u32
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    /// Kernel words of output channel `o`, one per input channel.
    #[inline]
    pub fn filter(&self, o: usize) -> &[Word] {
        &self.words[o * self.in_channels..(o + 1) * self.in_channels]
    }

    #[inline]
    pub fn word(&self, o: usize, c: usize) -> Word {
        self.words[o * self.in_channels + c]
    }

    /// Kernel value at window row `dy`, column `dx`.
    pub fn weight(&self, o: usize, c: usize, dy: usize, dx: usize) -> bitops::BinaryValue {
        let b = self.bitwidth();
        let i = (dy * self.kernel_size + dx) as u32;
        bitops::BinaryValue::from_bit(self.word(o, c) >> (b - 1 - i) & 1 == 1)
    }

    /// Returns a copy with one kernel bit inverted.
    pub fn with_flipped_bit(&self, o: usize, c: usize, bit: u32) -> Self {
        assert!(bit < self.bitwidth());
        let mut out = self.clone();
        out.words[o * self.in_channels + c] ^= 1 << bit;
        out
    }
}

/// Binarizes trained float kernels. `weights` is a `K×K×C_in×C_out` tensor
/// flattened row-major, so element `(a, b, c, o)` sits at
/// `((a·K + b)·C_in + c)·C_out + o`.
pub fn pack_float_weights(
    weights: &[f32],
    kernel_size: usize,
    in_channels: usize,
    out_channels: usize,
) -> Result<PackedConvWeights> {
    check_kernel_size(kernel_size)?;
    let kk = kernel_size * kernel_size;
    if weights.len() != kk * in_channels * out_channels {
        return Err(Error::param(format!(
            "{} weights for a {kernel_size}x{kernel_size}x{in_channels}x{out_channels} kernel",
            weights.len()
        )));
    }
    let mut words = Vec::with_capacity(out_channels * in_channels);
    for o in 0..out_channels {
        for c in 0..in_channels {
            let bits = (0..kk).map(|i| {
                let w = weights[(i * in_channels + c) * out_channels + o];
                bitops::sign(w as f64).bit()
            });
            let packed = PackedVector::from_bits(bits, kk as u32)?;
            words.push(packed.words()[0]);
        }
    }
    PackedConvWeights::new(out_channels, in_channels, kernel_size, words)
}

/// Binarized fully-connected weights: `L` rows of logical length `D`, B=32.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedFcWeights {
    rows: Vec<PackedVector>,
    in_dim: usize,
}

impl PackedFcWeights {
    pub fn new(rows: Vec<PackedVector>, in_dim: usize) -> Result<Self> {
        if rows.is_empty() || in_dim == 0 {
            return Err(Error::param("empty fully-connected layer"));
        }
        if rows
            .iter()
            .any(|r| r.len() != in_dim || r.bitwidth() != WORD_BITS)
        {
            return Err(Error::param(format!(
                "fully-connected rows must all be length {in_dim} at B=32"
            )));
        }
        Ok(PackedFcWeights { rows, in_dim })
    }

    pub fn rows(&self) -> &[PackedVector] {
        &self.rows
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.rows.len()
    }
}

/// Full-precision affine layer of the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatLinear {
    out_dim: usize,
    in_dim: usize,
    weights: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl FloatLinear {
    pub fn new(
        out_dim: usize,
        in_dim: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::param("empty float layer"));
        }
        if weights.len() != out_dim * in_dim {
            return Err(Error::param(format!(
                "{} weights for a {out_dim}x{in_dim} float layer",
                weights.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != out_dim) {
            return Err(Error::param("bias length differs from output dimension"));
        }
        let finite = weights.iter().chain(bias.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("non-finite float weight"));
        }
        Ok(FloatLinear {
            out_dim,
            in_dim,
            weights,
            bias,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn row(&self, l: usize) -> &[f32] {
        &self.weights[l * self.in_dim..(l + 1) * self.in_dim]
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }
}

/// Per-channel offsets added before input binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdVector(Vec<f32>);

impl ThresholdVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("thresholds must be finite and non-empty"));
        }
        Ok(ThresholdVector(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    ConvBinary(PackedConvWeights),
    ConvFloatInput(PackedConvWeights),
    MaxPool2x2,
    FcBinary(PackedFcWeights),
    FcFloat(FloatLinear),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::ConvBinary(_) => LayerKind::ConvBinary,
            Layer::ConvFloatInput(_) => LayerKind::ConvFloatInput,
            Layer::MaxPool2x2 => LayerKind::MaxPool2x2,
            Layer::FcBinary(_) => LayerKind::FcBinary,
            Layer::FcFloat(_) => LayerKind::FcFloat,
        }
    }

    /// Shape parameters; `MaxPool2x2` reports zero channels since it keeps
    /// whatever it is given.
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::ConvBinary(w) | Layer::ConvFloatInput(w) => LayerSpec {
                kind: self.kind(),
                in_channels: w.in_channels(),
                out_channels: w.out_channels(),
                kernel_size: w.kernel_size(),
                radius: w.radius(),
                bitwidth: w.bitwidth(),
            },
            Layer::MaxPool2x2 => LayerSpec {
                kind: LayerKind::MaxPool2x2,
                in_channels: 0,
                out_channels: 0,
                kernel_size: 2,
                radius: 0,
                bitwidth: 0,
            },
            Layer::FcBinary(w) => LayerSpec {
                kind: LayerKind::FcBinary,
                in_channels: w.in_dim(),
                out_channels: w.out_dim(),
                kernel_size: 0,
                radius: 0,
                bitwidth: WORD_BITS,
            },
            Layer::FcFloat(w) => LayerSpec {
                kind: LayerKind::FcFloat,
                in_channels: w.in_dim(),
                out_channels: w.out_dim(),
                kernel_size: 0,
                radius: 0,
                bitwidth: 0,
            },
        }
    }
}

/// What flows between two layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Real-valued image (input mode `None` only).
    Image(Shape3),
    /// Spatial map; binarized before any binary consumer.
    Map(Shape3),
    /// Integer accumulators of a binary fully-connected layer.
    Vector(usize),
    /// Float outputs of the head.
    Scores(usize),
}

impl Activation {
    pub fn len(&self) -> usize {
        match *self {
            Activation::Image(s) | Activation::Map(s) => s.len(),
            Activation::Vector(d) | Activation::Scores(d) => d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Image(s) => write!(f, "image {s}"),
            Activation::Map(s) => write!(f, "map {s}"),
            Activation::Vector(d) => write!(f, "vector {d}"),
            Activation::Scores(d) => write!(f, "scores {d}"),
        }
    }
}

/// Input and output activation of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIo {
    pub input: Activation,
    pub output: Activation,
}

/// A validated network. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDescriptor {
    input_mode: InputMode,
    input_shape: Shape3,
    thresholds: Option<ThresholdVector>,
    layers: Vec<Layer>,
    plan: Vec<LayerIo>,
}

impl ModelDescriptor {
    pub fn new(
        input_mode: InputMode,
        input_shape: Shape3,
        thresholds: Option<ThresholdVector>,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let plan = validate(input_mode, input_shape, thresholds.as_ref(), &layers)?;
        Ok(ModelDescriptor {
            input_mode,
            input_shape,
            thresholds,
            layers,
            plan,
        })
    }

    pub fn input_mode(&self) -> InputMode {
        self.input_mode
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn thresholds(&self) -> Option<&ThresholdVector> {
        self.thresholds.as_ref()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Activation shapes around every layer, in order.
    pub fn plan(&self) -> &[LayerIo] {
        &self.plan
    }

    /// Shape of the binarized input image, `None` for float-input models.
    pub fn binarized_input_shape(&self) -> Option<Shape3> {
        match self.input_mode {
            InputMode::None => None,
            mode => Some(Shape3::new(
                self.input_shape.height,
                self.input_shape.width,
                mode.binarized_channels(self.input_shape.channels),
            )),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.plan.last().map_or(0, |io| io.output.len())
    }

    pub fn into_parts(self) -> (InputMode, Shape3, Option<ThresholdVector>, Vec<Layer>) {
        (
            self.input_mode,
            self.input_shape,
            self.thresholds,
            self.layers,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serialize_model(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        deserialize_model(bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        deserialize_model(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serialize_model(self)).map_err(|e| Error::io(path, e))
    }
}

fn validate(
    mode: InputMode,
    shape: Shape3,
    thresholds: Option<&ThresholdVector>,
    layers: &[Layer],
) -> Result<Vec<LayerIo>> {
    let bad_input = |reason: String| Err(Error::Model(reason));
    if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
        return bad_input(format!("empty input shape {shape}"));
    }
    match mode {
        InputMode::ThresholdRgb if shape.channels != 3 => {
            return bad_input(format!("threshold-rgb needs 3 input channels, got {shape}"))
        }
        InputMode::ThresholdGray if shape.channels != 1 => {
            return bad_input(format!("threshold-gray needs 1 input channel, got {shape}"))
        }
        InputMode::Lbp if !matches!(shape.channels, 1 | 3) => {
            return bad_input(format!("lbp needs 1 or 3 input channels, got {shape}"))
        }
        _ => {}
    }
    match (mode.uses_thresholds(), thresholds) {
        (true, None) => return bad_input(format!("input mode {mode} requires thresholds")),
        (true, Some(t)) if t.len() != shape.channels => {
            return bad_input(format!(
                "{} thresholds for {} input channels",
                t.len(),
                shape.channels
            ))
        }
        (false, Some(_)) => return bad_input(format!("input mode {mode} takes no thresholds")),
        _ => {}
    }
    if layers.is_empty() {
        return bad_input("model has no layers".into());
    }

    let mut cur = match mode {
        InputMode::None => Activation::Image(shape),
        m => Activation::Map(Shape3::new(
            shape.height,
            shape.width,
            m.binarized_channels(shape.channels),
        )),
    };
    let mut plan = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let fail = |reason: String| Error::Validation { layer: i, reason };
        let next = match (layer, cur) {
            (Layer::ConvFloatInput(w), Activation::Image(s)) => {
                if w.in_channels() != s.channels {
                    return Err(fail(format!(
                        "kernel expects {} channels, input has {}",
                        w.in_channels(),
                        s.channels
                    )));
                }
                Activation::Map(Shape3::new(s.height, s.width, w.out_channels()))
            }
            (Layer::ConvFloatInput(_), _) => {
                return Err(fail(
                    "ConvFloatInput is only valid as the first layer of a float-input model".into(),
                ))
            }
            (_, Activation::Image(_)) => {
                return Err(fail(
                    "input mode none requires a ConvFloatInput first layer".into(),
                ))
            }
            (Layer::ConvBinary(w), Activation::Map(s)) => {
                if w.in_channels() != s.channels {
                    return Err(fail(format!(
                        "kernel expects {} channels, input has {}",
                        w.in_channels(),
                        s.channels
                    )));
                }
                Activation::Map(Shape3::new(s.height, s.width, w.out_channels()))
            }
            (Layer::MaxPool2x2, Activation::Map(s)) => {
                if s.height % 2 != 0 || s.width % 2 != 0 {
                    return Err(fail(format!("2x2 pooling of odd-sized map {s}")));
                }
                Activation::Map(Shape3::new(s.height / 2, s.width / 2, s.channels))
            }
            (Layer::FcBinary(w), Activation::Map(_) | Activation::Vector(_)) => {
                if w.in_dim() != cur.len() {
                    return Err(fail(format!(
                        "weights expect {} inputs, previous layer gives {}",
                        w.in_dim(),
                        cur.len()
                    )));
                }
                Activation::Vector(w.out_dim())
            }
            (Layer::FcFloat(w), Activation::Vector(d) | Activation::Scores(d)) => {
                if w.in_dim() != d {
                    return Err(fail(format!(
                        "weights expect {} inputs, previous layer gives {d}",
                        w.in_dim()
                    )));
                }
                Activation::Scores(w.out_dim())
            }
            (layer, cur) => {
                return Err(fail(format!("{:?} cannot consume {cur}", layer.kind())));
            }
        };
        plan.push(LayerIo {
            input: cur,
            output: next,
        });
        cur = next;
    }
    if !matches!(cur, Activation::Vector(_) | Activation::Scores(_)) {
        return Err(Error::Validation {
            layer: layers.len() - 1,
            reason: format!("network must end in a fully-connected layer, ends in {cur}"),
        });
    }
    Ok(plan)
}

/// Encodes a model in the `BCNN` v1 format. Deterministic.
pub fn serialize_model(m: &ModelDescriptor) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    let put_f = |out: &mut Vec<u8>, v: f32| out.extend_from_slice(&v.to_le_bytes());

    out.extend_from_slice(&MAGIC);
    put(&mut out, FORMAT_VERSION);
    put(&mut out, m.input_mode.code());
    put(&mut out, m.input_shape.height as u32);
    put(&mut out, m.input_shape.width as u32);
    put(&mut out, m.input_shape.channels as u32);
    if let Some(t) = &m.thresholds {
        for &v in t.values() {
            put_f(&mut out, v);
        }
    }
    put(&mut out, m.layers.len() as u32);
    for layer in &m.layers {
        put(&mut out, layer.kind().code());
        match layer {
            Layer::ConvBinary(w) | Layer::ConvFloatInput(w) => {
                put(&mut out, w.out_channels() as u32);
                put(&mut out, w.in_channels() as u32);
                put(&mut out, w.kernel_size() as u32);
                for &word in w.words() {
                    put(&mut out, word);
                }
            }
            Layer::MaxPool2x2 => {}
            Layer::FcBinary(w) => {
                put(&mut out, w.out_dim() as u32);
                put(&mut out, w.in_dim() as u32);
                for row in w.rows() {
                    for &word in row.words() {
                        put(&mut out, word);
                    }
                }
            }
            Layer::FcFloat(w) => {
                put(&mut out, w.out_dim() as u32);
                put(&mut out, w.in_dim() as u32);
                put(&mut out, w.bias().is_some() as u32);
                for &v in w.weights() {
                    put_f(&mut out, v);
                }
                for &v in w.bias().into_iter().flatten() {
                    put_f(&mut out, v);
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.offset;
        if n > remaining {
            return Err(Error::Truncated {
                offset: self.offset,
                needed: n - remaining,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    /// Reads `n` u32 values, checking the length before allocating.
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = n.checked_mul(4).ok_or(Error::Truncated {
            offset: self.offset,
            needed: usize::MAX,
        })?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.u32s(n)?.into_iter().map(f32::from_bits).collect())
    }
}

/// Decodes and validates a `BCNN` stream.
pub fn deserialize_model(bytes: &[u8]) -> Result<ModelDescriptor> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4).map_err(|_| Error::BadMagic {
        found: magic_prefix(bytes),
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic_prefix(bytes),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mode_code = r.u32()?;
    let mode = InputMode::from_code(mode_code)
        .ok_or_else(|| Error::Model(format!("unknown input mode {mode_code}")))?;
    let (h, w, c) = (r.count()?, r.count()?, r.count()?);
    let shape = Shape3::new(h, w, c);
    let thresholds = if mode.uses_thresholds() {
        Some(ThresholdVector::new(r.f32s(c)?)?)
    } else {
        None
    };

    let num_layers = r.count()?;
    let mut layers = Vec::new();
    for i in 0..num_layers {
        let at = |e: Error| match e {
            e @ Error::Truncated { .. } => e,
            e => Error::Validation {
                layer: i,
                reason: e.to_string(),
            },
        };
        let kind_code = r.u32()?;
        let kind = LayerKind::from_code(kind_code).ok_or_else(|| Error::Validation {
            layer: i,
            reason: format!("unknown layer kind {kind_code}"),
        })?;
        let layer = match kind {
            LayerKind::ConvBinary | LayerKind::ConvFloatInput => {
                let (out_c, in_c, k) = (r.count()?, r.count()?, r.count()?);
                let n = out_c.checked_mul(in_c).ok_or_else(|| {
                    at(Error::param("channel count overflow"))
                })?;
                let words = r.u32s(n)?;
                let weights = PackedConvWeights::new(out_c, in_c, k, words).map_err(at)?;
                if kind == LayerKind::ConvBinary {
                    Layer::ConvBinary(weights)
                } else {
                    Layer::ConvFloatInput(weights)
                }
            }
            LayerKind::MaxPool2x2 => Layer::MaxPool2x2,
            LayerKind::FcBinary => {
                let (l, d) = (r.count()?, r.count()?);
                let per_row = d.div_ceil(WORD_BITS as usize);
                let n = l
                    .checked_mul(per_row)
                    .ok_or_else(|| at(Error::param("dimension overflow")))?;
                let words = r.u32s(n)?;
                let rows = words
                    .chunks(per_row.max(1))
                    .take(l)
                    .map(|chunk| PackedVector::from_words(chunk.to_vec(), d, WORD_BITS))
                    .collect::<Result<Vec<_>>>()
                    .map_err(at)?;
                Layer::FcBinary(PackedFcWeights::new(rows, d).map_err(at)?)
            }
            LayerKind::FcFloat => {
                let (l, d, has_bias) = (r.count()?, r.count()?, r.u32()?);
                if has_bias > 1 {
                    return Err(at(Error::param(format!("has_bias flag {has_bias}"))));
                }
                let n = l
                    .checked_mul(d)
                    .ok_or_else(|| at(Error::param("dimension overflow")))?;
                let weights = r.f32s(n)?;
                let bias = if has_bias == 1 { Some(r.f32s(l)?) } else { None };
                Layer::FcFloat(FloatLinear::new(l, d, weights, bias).map_err(at)?)
            }
        };
        layers.push(layer);
    }
    if r.offset != bytes.len() {
        return Err(Error::Model(format!(
            "{} trailing bytes after last layer",
            bytes.len() - r.offset
        )));
    }
    ModelDescriptor::new(mode, shape, thresholds, layers)
}

fn magic_prefix(bytes: &[u8]) -> [u8; 4] {
    let mut m = [0u8; 4];
    for (d, s) in m.iter_mut().zip(bytes) {
        *d = *s;
    }
    m
}

/// Shape-level description of the reference vehicle-classifier network.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceConfig {
    pub input_mode: InputMode,
    pub height: usize,
    pub width: usize,
    pub conv_channels: usize,
    pub kernel_size: usize,
    pub fc_units: usize,
    /// Output sizes of the float head layers after the binary FC layer.
    pub head: Vec<usize>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            input_mode: InputMode::ThresholdRgb,
            height: 96,
            width: 96,
            conv_channels: 32,
            kernel_size: 5,
            fc_units: 100,
            head: vec![4],
        }
    }
}

impl ReferenceConfig {
    pub fn with_mode(mode: InputMode) -> Self {
        ReferenceConfig {
            input_mode: mode,
            ..Default::default()
        }
    }

    pub fn input_shape(&self) -> Shape3 {
        let c = if self.input_mode == InputMode::ThresholdGray {
            1
        } else {
            3
        };
        Shape3::new(self.height, self.width, c)
    }

    /// Builds conv, pool, conv, pool, binary FC, float head with seeded
    /// random weights.
    pub fn random_model(&self, seed: u64) -> Result<ModelDescriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = self.input_shape();
        let k = self.kernel_size;
        check_kernel_size(k)?;
        let b = (k * k) as u32;
        let mask = valid_mask(b, b);
        let conv = |out_c: usize, in_c: usize, rng: &mut ChaCha8Rng| {
            let words = (0..out_c * in_c).map(|_| rng.gen::<u32>() & mask).collect();
            PackedConvWeights::new(out_c, in_c, k, words)
        };
        let c_bin = self.input_mode.binarized_channels(shape.channels);
        let cc = self.conv_channels;
        let first = conv(cc, c_bin, &mut rng)?;
        let mut layers = vec![
            if self.input_mode == InputMode::None {
                Layer::ConvFloatInput(first)
            } else {
                Layer::ConvBinary(first)
            },
            Layer::MaxPool2x2,
            Layer::ConvBinary(conv(cc, cc, &mut rng)?),
            Layer::MaxPool2x2,
        ];
        let d = (self.height / 4) * (self.width / 4) * cc;
        let rows = (0..self.fc_units)
            .map(|_| {
                PackedVector::from_bits((0..d).map(|_| rng.gen::<bool>()).collect::<Vec<_>>(), 32)
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(Layer::FcBinary(PackedFcWeights::new(rows, d)?));
        let mut prev = self.fc_units;
        for &units in &self.head {
            let weights = (0..units * prev).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let bias = (0..units).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            layers.push(Layer::FcFloat(FloatLinear::new(
                units,
                prev,
                weights,
                Some(bias),
            )?));
            prev = units;
        }
        let thresholds = if self.input_mode.uses_thresholds() {
            Some(ThresholdVector::new(
                (0..shape.channels)
                    .map(|_| rng.gen_range(-160.0f32..-96.0))
                    .collect(),
            )?)
        } else {
            None
        };
        ModelDescriptor::new(self.input_mode, shape, thresholds, layers)
    }
}
