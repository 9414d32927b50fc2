//! Network architecture description and parameter storage.
//!
//! A model is a base part (convolutions or a recurrent layer, frozen during
//! continual updates) followed by a dense part ending in a 2-way softmax.
//! All parameters live in one flat `Vec<f64>` so masking, Fisher weighting,
//! and serialization can address every parameter by a single index.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolution kernel edge; all convolutions are 3x3, stride 1, no padding.
pub const CONV_KERNEL: usize = 3;
/// Dropout rate used after every layer but the last in the stock models.
pub const DEFAULT_DROPOUT: f64 = 0.2;
/// Both detectors decide between benign and attack.
pub const N_CLASSES: usize = 2;

/// One pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully connected: `units x inputs` weights plus `units` biases.
    Dense { inputs: usize, units: usize },
    /// 3x3 valid convolution, stride 1.
    Conv2d { in_channels: usize, out_channels: usize },
    /// Many-to-many LSTM: one output per input step.
    LstmM2m { inputs: usize, cells: usize },
    Relu,
    Dropout { rate: f64 },
    Softmax,
}

impl LayerSpec {
    /// Number of parameters this layer owns.
    pub fn n_params(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, units } => inputs * units + units,
            LayerSpec::Conv2d { in_channels, out_channels } => {
                in_channels * CONV_KERNEL * CONV_KERNEL * out_channels + out_channels
            }
            LayerSpec::LstmM2m { inputs, cells } => {
                4 * cells * inputs + 4 * cells * cells + 4 * cells
            }
            _ => 0,
        }
    }
}

/// What the first layer consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// Single-channel image `[rows, cols]`.
    Grid { rows: usize, cols: usize },
    /// Sequence of `dim`-wide steps.
    Sequence { dim: usize },
}

/// Shape flowing between layers during validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Shape {
    Map { h: usize, w: usize, c: usize },
    Vector { d: usize },
    Steps { d: usize },
}

impl Shape {
    pub(crate) fn width(&self) -> usize {
        match *self {
            Shape::Map { h, w, c } => h * w * c,
            Shape::Vector { d } | Shape::Steps { d } => d,
        }
    }
}

/// Full pipeline: `layers[..dense_start]` is the base part,
/// `layers[dense_start..]` the dense part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub dense_start: usize,
}

impl Architecture {
    /// Convolutional detector: each entry of `conv_channels` adds a 3x3
    /// convolution with ReLU and dropout; `dense_units` lists the dense
    /// widths including the final layer, which must be 2.
    pub fn cnn(rows: usize, cols: usize, conv_channels: &[usize], dense_units: &[usize]) -> Architecture {
        let mut layers = Vec::new();
        let mut in_ch = 1;
        for &out_ch in conv_channels {
            layers.push(LayerSpec::Conv2d { in_channels: in_ch, out_channels: out_ch });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Dropout { rate: DEFAULT_DROPOUT });
            in_ch = out_ch;
        }
        let dense_start = layers.len();
        let mut h = rows;
        let mut w = cols;
        for _ in conv_channels {
            h -= CONV_KERNEL - 1;
            w -= CONV_KERNEL - 1;
        }
        let mut inputs = h * w * in_ch;
        push_dense(&mut layers, &mut inputs, dense_units);
        Architecture { input: InputSpec::Grid { rows, cols }, layers, dense_start }
    }

    /// Recurrent detector: one many-to-many LSTM, then the dense stack
    /// applied to every step's output.
    pub fn lstm(input_dim: usize, cells: usize, dense_units: &[usize]) -> Architecture {
        let mut layers = vec![
            LayerSpec::LstmM2m { inputs: input_dim, cells },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: DEFAULT_DROPOUT },
        ];
        let dense_start = layers.len();
        let mut inputs = cells;
        push_dense(&mut layers, &mut inputs, dense_units);
        Architecture { input: InputSpec::Sequence { dim: input_dim }, layers, dense_start }
    }

    /// Plain dense stack over a flat input; used for small test models.
    pub fn mlp(input_dim: usize, dense_units: &[usize]) -> Architecture {
        let mut layers = Vec::new();
        let mut inputs = input_dim;
        push_dense(&mut layers, &mut inputs, dense_units);
        Architecture { input: InputSpec::Grid { rows: 1, cols: input_dim }, layers, dense_start: 0 }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::n_params).sum()
    }

    /// Widths of the dense layers in order, ending in 2.
    pub fn dense_widths(&self) -> Vec<usize> {
        self.layers[self.dense_start..]
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units, .. } => Some(*units),
                _ => None,
            })
            .collect()
    }

    /// Spatial output sizes after each convolution, for shape checks.
    pub fn conv_output_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        if let InputSpec::Grid { rows, cols } = self.input {
            let (mut h, mut w) = (rows, cols);
            for layer in &self.layers {
                if let LayerSpec::Conv2d { out_channels, .. } = layer {
                    h -= CONV_KERNEL - 1;
                    w -= CONV_KERNEL - 1;
                    out.push((h, w, *out_channels));
                }
            }
        }
        out
    }

    /// Checks layer compatibility and returns the shape after every layer.
    pub(crate) fn shapes(&self) -> Result<Vec<Shape>> {
        if self.dense_start > self.layers.len() {
            return Err(Error::Config("dense_start beyond layer list".into()));
        }
        let mut shape = match self.input {
            InputSpec::Grid { rows, cols } => {
                if rows == 0 || cols == 0 {
                    return Err(Error::Config("grid input must be non-empty".into()));
                }
                Shape::Map { h: rows, w: cols, c: 1 }
            }
            InputSpec::Sequence { dim } => {
                if dim == 0 {
                    return Err(Error::Config("sequence input dim must be positive".into()));
                }
                Shape::Steps { d: dim }
            }
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let in_dense = i >= self.dense_start;
            // entering the dense part flattens a feature map
            if in_dense {
                if let Shape::Map { .. } = shape {
                    shape = Shape::Vector { d: shape.width() };
                }
            }
            shape = match (*layer, shape) {
                (LayerSpec::Conv2d { in_channels, out_channels }, Shape::Map { h, w, c })
                    if !in_dense =>
                {
                    if c != in_channels {
                        return Err(Error::Config(format!(
                            "layer {i}: conv expects {in_channels} channels, input has {c}"
                        )));
                    }
                    if h < CONV_KERNEL || w < CONV_KERNEL {
                        return Err(Error::Config(format!(
                            "layer {i}: {h}x{w} too small for a {CONV_KERNEL}x{CONV_KERNEL} kernel"
                        )));
                    }
                    Shape::Map { h: h - CONV_KERNEL + 1, w: w - CONV_KERNEL + 1, c: out_channels }
                }
                (LayerSpec::LstmM2m { inputs, cells }, Shape::Steps { d }) if !in_dense => {
                    if d != inputs {
                        return Err(Error::Config(format!(
                            "layer {i}: lstm expects {inputs}-wide steps, input has {d}"
                        )));
                    }
                    Shape::Steps { d: cells }
                }
                (LayerSpec::Dense { inputs, units }, s) if in_dense => {
                    let d = s.width();
                    if d != inputs {
                        return Err(Error::Config(format!(
                            "layer {i}: dense expects {inputs} inputs, got {d}"
                        )));
                    }
                    match s {
                        Shape::Steps { .. } => Shape::Steps { d: units },
                        _ => Shape::Vector { d: units },
                    }
                }
                (LayerSpec::Relu, s) | (LayerSpec::Dropout { .. }, s) => {
                    if let LayerSpec::Dropout { rate } = *layer {
                        if !(0.0..1.0).contains(&rate) {
                            return Err(Error::Config(format!(
                                "layer {i}: dropout rate {rate} outside [0, 1)"
                            )));
                        }
                    }
                    s
                }
                (LayerSpec::Softmax, s) if in_dense => {
                    if s.width() != N_CLASSES {
                        return Err(Error::Config(format!(
                            "layer {i}: softmax input must be {N_CLASSES}-wide, got {}",
                            s.width()
                        )));
                    }
                    s
                }
                (l, s) => {
                    return Err(Error::Config(format!(
                        "layer {i}: {l:?} not valid here (shape {s:?}, dense part: {in_dense})"
                    )))
                }
            };
            out.push(shape);
        }
        match out.last() {
            Some(s) if s.width() == N_CLASSES => {}
            _ => return Err(Error::Config("network must end in a 2-way output".into())),
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            return Err(Error::Config("network must end with softmax".into()));
        }
        Ok(out)
    }
}

fn push_dense(layers: &mut Vec<LayerSpec>, inputs: &mut usize, dense_units: &[usize]) {
    for (i, &units) in dense_units.iter().enumerate() {
        layers.push(LayerSpec::Dense { inputs: *inputs, units });
        if i + 1 < dense_units.len() {
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Dropout { rate: DEFAULT_DROPOUT });
        } else {
            layers.push(LayerSpec::Softmax);
        }
        *inputs = units;
    }
}

/// Offsets of one layer's parameters inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBlock {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

/// A parameterized network: architecture plus flat parameter storage.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    arch: Architecture,
    params: Vec<f64>,
    blocks: Vec<ParamBlock>,
}

impl NetworkModel {
    /// Random initialization: weights uniform in
    /// `+-sqrt(6 / (fan_in + fan_out))`, biases zero except the LSTM forget
    /// gate, which starts at 1 so long sequences keep their memory early in
    /// training.
    pub fn init(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<NetworkModel> {
        arch.shapes()?;
        let mut model = NetworkModel::zeroed(arch)?;
        for b in 0..model.blocks.len() {
            let block = model.blocks[b];
            match model.arch.layers[block.layer] {
                LayerSpec::Dense { inputs, units } => {
                    let a = glorot(inputs, units);
                    for w in &mut model.params[block.offset..block.offset + inputs * units] {
                        *w = rng.random_range(-a..=a);
                    }
                }
                LayerSpec::Conv2d { in_channels, out_channels } => {
                    let k2 = CONV_KERNEL * CONV_KERNEL;
                    let a = glorot(in_channels * k2, out_channels * k2);
                    let n_w = in_channels * k2 * out_channels;
                    for w in &mut model.params[block.offset..block.offset + n_w] {
                        *w = rng.random_range(-a..=a);
                    }
                }
                LayerSpec::LstmM2m { inputs, cells } => {
                    let (wx, wh, bias) = lstm_spans(block, inputs, cells);
                    let ax = glorot(inputs, cells);
                    for w in &mut model.params[wx] {
                        *w = rng.random_range(-ax..=ax);
                    }
                    let ah = glorot(cells, cells);
                    for w in &mut model.params[wh] {
                        *w = rng.random_range(-ah..=ah);
                    }
                    // gate order i, f, g, o: forget biases start at 1
                    let b0 = bias.start;
                    for w in &mut model.params[b0 + cells..b0 + 2 * cells] {
                        *w = 1.0;
                    }
                }
                _ => {}
            }
        }
        Ok(model)
    }

    /// All-zero parameters; used by deserialization and tests.
    pub fn zeroed(arch: Architecture) -> Result<NetworkModel> {
        arch.shapes()?;
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        for (i, layer) in arch.layers.iter().enumerate() {
            let len = layer.n_params();
            if len > 0 {
                blocks.push(ParamBlock { layer: i, offset, len });
                offset += len;
            }
        }
        Ok(NetworkModel { arch, params: vec![0.0; offset], blocks })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ParamCountMismatch {
                model: self.params.len(),
                message: values.len(),
            });
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    /// The parameter block of layer `layer`, if it has parameters.
    pub fn block_of(&self, layer: usize) -> Option<ParamBlock> {
        self.blocks.iter().copied().find(|b| b.layer == layer)
    }

    /// Indices owned by the dense part; the complement is the base part.
    pub fn dense_param_indices(&self) -> Vec<usize> {
        let mut idx = Vec::new();
        for b in &self.blocks {
            if b.layer >= self.arch.dense_start {
                idx.extend(b.offset..b.offset + b.len);
            }
        }
        idx
    }
}

pub(crate) fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Parameter spans of an LSTM block: input weights (4c x inputs), recurrent
/// weights (4c x cells), biases (4c), gates stacked in i, f, g, o order.
pub(crate) fn lstm_spans(
    block: ParamBlock,
    inputs: usize,
    cells: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let wx = block.offset..block.offset + 4 * cells * inputs;
    let wh = wx.end..wx.end + 4 * cells * cells;
    let bias = wh.end..wh.end + 4 * cells;
    (wx, wh, bias)
}

/// The full-scale convolutional detector: two 3x3 convolutions (8 then 16
/// channels) over the 100x200 matrix, dense 256/128/64/2.
pub fn build_cnn_model(rng: &mut ChaCha8Rng) -> NetworkModel {
    NetworkModel::init(Architecture::cnn(100, 200, &[8, 16], &[256, 128, 64, 2]), rng)
        .expect("stock architecture is valid")
}

/// The full-scale recurrent detector: 1024 LSTM cells over 200-byte packet
/// rows, dense 512/256/128/64/2 applied to every step.
pub fn build_lstm_model(rng: &mut ChaCha8Rng) -> NetworkModel {
    NetworkModel::init(Architecture::lstm(200, 1024, &[512, 256, 128, 64, 2]), rng)
        .expect("stock architecture is valid")
}
