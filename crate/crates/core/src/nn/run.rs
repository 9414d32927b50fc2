//! Forward and backward passes.
//!
//! A batch flows through the network as one row-major matrix: one row per
//! sample for convolutional models, one row per (sample, step) once a
//! recurrent layer has unrolled its input. Convolutions treat each row as a
//! height x width x channels feature map. The backward pass consumes a
//! trace recorded during the forward pass and produces the gradient for
//! every parameter analytically; the terminal softmax is fused with the
//! loss, so loss gradients are always expressed with respect to logits.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::model::{lstm_spans, LayerSpec, NetworkModel, Shape, CONV_KERNEL, N_CLASSES};
use crate::nn::tensor::ModelInput;

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-sample, per-step logits and probabilities.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub logits: Vec<Vec<[f64; N_CLASSES]>>,
    pub probs: Vec<Vec<[f64; N_CLASSES]>>,
}

impl BatchOutput {
    /// Final-step probabilities, the flow-level prediction.
    pub fn final_probs(&self, sample: usize) -> [f64; N_CLASSES] {
        *self.probs[sample].last().expect("at least one step")
    }
}

/// Recorded activations needed by the backward pass.
pub struct Trace {
    entries: Vec<TraceEntry>,
    sample_rows: Vec<std::ops::Range<usize>>,
}

enum TraceEntry {
    Dense { input: Array2<f64> },
    Conv { input: Array2<f64>, in_dims: (usize, usize, usize), out_dims: (usize, usize, usize) },
    Lstm { x: Vec<Array2<f64>>, cells: Vec<LstmTrace> },
    Relu { output: Array2<f64> },
    Dropout { mask: Option<Array2<f64>> },
    Softmax,
}

/// Per-sample recurrent state history; all matrices are steps x cells.
struct LstmTrace {
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

/// Runs the network over a batch and keeps the trace for [`backward`].
///
/// `rng` drives dropout and is required in train mode when any dropout
/// layer has a positive rate; dropout with rate zero draws nothing, so it
/// is exactly the eval path.
pub fn forward(
    model: &NetworkModel,
    inputs: &[ModelInput],
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(BatchOutput, Trace)> {
    run(model, inputs, mode, rng, true)
}

/// Forward pass without trace retention, for inference and evaluation.
pub fn infer(
    model: &NetworkModel,
    inputs: &[ModelInput],
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchOutput> {
    Ok(run(model, inputs, mode, rng, false)?.0)
}

fn run(
    model: &NetworkModel,
    inputs: &[ModelInput],
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
    keep_trace: bool,
) -> Result<(BatchOutput, Trace)> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset("forward pass over an empty batch".into()));
    }
    let arch = model.arch();
    let shapes = arch.shapes()?;

    // load the batch; sequences stay ragged until the recurrent layer
    let mut current: Batch = match arch.input {
        crate::nn::model::InputSpec::Grid { rows, cols } => {
            let mut m = Array2::zeros((inputs.len(), rows * cols));
            for (i, input) in inputs.iter().enumerate() {
                let ModelInput::Grid(t) = input else {
                    return Err(Error::ShapeMismatch {
                        expected: "grid input".into(),
                        actual: "sequence input".into(),
                    });
                };
                if t.shape() != [rows, cols] {
                    return Err(Error::ShapeMismatch {
                        expected: format!("[{rows}, {cols}]"),
                        actual: format!("{:?}", t.shape()),
                    });
                }
                m.row_mut(i).assign(&ArrayView1::from(t.data()));
            }
            Batch::Flat { m, sample_rows: (0..inputs.len()).map(|i| i..i + 1).collect() }
        }
        crate::nn::model::InputSpec::Sequence { dim } => {
            let mut seqs = Vec::with_capacity(inputs.len());
            for input in inputs {
                let ModelInput::Sequence(t) = input else {
                    return Err(Error::ShapeMismatch {
                        expected: "sequence input".into(),
                        actual: "grid input".into(),
                    });
                };
                if t.shape().len() != 2 || t.shape()[1] != dim || t.shape()[0] == 0 {
                    return Err(Error::ShapeMismatch {
                        expected: format!("[steps >= 1, {dim}]"),
                        actual: format!("{:?}", t.shape()),
                    });
                }
                seqs.push(
                    ArrayView2::from_shape((t.shape()[0], dim), t.data())
                        .expect("shape checked")
                        .to_owned(),
                );
            }
            Batch::Ragged(seqs)
        }
    };

    let mut entries = Vec::with_capacity(arch.layers.len());
    for (li, layer) in arch.layers.iter().enumerate() {
        let in_shape = if li == 0 {
            match arch.input {
                crate::nn::model::InputSpec::Grid { rows, cols } => {
                    Shape::Map { h: rows, w: cols, c: 1 }
                }
                crate::nn::model::InputSpec::Sequence { dim } => Shape::Steps { d: dim },
            }
        } else {
            shapes[li - 1]
        };
        let entry = match *layer {
            LayerSpec::Conv2d { in_channels, out_channels } => {
                let Shape::Map { h, w, c } = in_shape else { unreachable!("validated") };
                debug_assert_eq!(c, in_channels);
                let block = model.block_of(li).expect("conv has params");
                let n_w = in_channels * CONV_KERNEL * CONV_KERNEL * out_channels;
                let filters = &model.params()[block.offset..block.offset + n_w];
                let bias = &model.params()[block.offset + n_w..block.offset + block.len];
                let input = current.take_flat();
                let out = conv_forward(&input, (h, w, c), out_channels, filters, bias);
                let out_dims = (h - CONV_KERNEL + 1, w - CONV_KERNEL + 1, out_channels);
                let rows = current.rows_clone();
                current = Batch::Flat { m: out, sample_rows: rows };
                TraceEntry::Conv { input, in_dims: (h, w, c), out_dims }
            }
            LayerSpec::LstmM2m { inputs: in_dim, cells } => {
                let seqs = current.take_ragged();
                let block = model.block_of(li).expect("lstm has params");
                let (wx_r, wh_r, b_r) = lstm_spans(block, in_dim, cells);
                let wx = ArrayView2::from_shape((4 * cells, in_dim), &model.params()[wx_r])
                    .expect("layout");
                let wh = ArrayView2::from_shape((4 * cells, cells), &model.params()[wh_r])
                    .expect("layout");
                let b = ArrayView1::from(&model.params()[b_r]);
                let total: usize = seqs.iter().map(|s| s.nrows()).sum();
                let mut m = Array2::zeros((total, cells));
                let mut sample_rows = Vec::with_capacity(seqs.len());
                let mut cells_trace = Vec::with_capacity(seqs.len());
                let mut row = 0usize;
                for seq in &seqs {
                    let trace = lstm_forward(seq.view(), wx, wh, b, cells);
                    let t = seq.nrows();
                    m.slice_mut(ndarray::s![row..row + t, ..]).assign(&trace.h);
                    sample_rows.push(row..row + t);
                    row += t;
                    cells_trace.push(trace);
                }
                current = Batch::Flat { m, sample_rows };
                TraceEntry::Lstm { x: seqs, cells: cells_trace }
            }
            LayerSpec::Dense { inputs: in_dim, units } => {
                let block = model.block_of(li).expect("dense has params");
                let w = ArrayView2::from_shape(
                    (in_dim, units),
                    &model.params()[block.offset..block.offset + in_dim * units],
                )
                .expect("layout");
                let bias = &model.params()[block.offset + in_dim * units..block.offset + block.len];
                let input = current.take_flat();
                let mut out = Array2::zeros((input.nrows(), units));
                general_mat_mul(1.0, &input, &w, 0.0, &mut out);
                let bv = ArrayView1::from(bias);
                for mut row in out.rows_mut() {
                    row += &bv;
                }
                let rows = current.rows_clone();
                current = Batch::Flat { m: out, sample_rows: rows };
                TraceEntry::Dense { input }
            }
            LayerSpec::Relu => {
                let m = current.flat_mut();
                m.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
                TraceEntry::Relu { output: if keep_trace { m.clone() } else { Array2::zeros((0, 0)) } }
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Train && rate > 0.0 {
                    let r = rng.as_deref_mut().ok_or_else(|| {
                        Error::Config("train-mode forward with dropout needs an rng".into())
                    })?;
                    let scale = 1.0 / (1.0 - rate);
                    let m = current.flat_mut();
                    let mut mask = Array2::zeros(m.raw_dim());
                    for (v, keep) in m.iter_mut().zip(mask.iter_mut()) {
                        if r.random::<f64>() >= rate {
                            *keep = scale;
                            *v *= scale;
                        } else {
                            *keep = 0.0;
                            *v = 0.0;
                        }
                    }
                    TraceEntry::Dropout { mask: Some(mask) }
                } else {
                    TraceEntry::Dropout { mask: None }
                }
            }
            LayerSpec::Softmax => {
                // handled after the loop from the final logits
                TraceEntry::Softmax
            }
        };
        entries.push(entry);
    }

    let logits_m = current.take_flat();
    let sample_rows = current.rows_clone();
    let mut logits = Vec::with_capacity(inputs.len());
    let mut probs = Vec::with_capacity(inputs.len());
    for range in &sample_rows {
        let mut sl = Vec::with_capacity(range.len());
        let mut sp = Vec::with_capacity(range.len());
        for r in range.clone() {
            let z = [logits_m[[r, 0]], logits_m[[r, 1]]];
            sl.push(z);
            sp.push(softmax2(z));
        }
        logits.push(sl);
        probs.push(sp);
    }
    Ok((BatchOutput { logits, probs }, Trace { entries, sample_rows }))
}

/// Gradient of the batch with respect to every parameter.
///
/// `dlogits[s][t]` is the loss gradient at the pre-softmax output of sample
/// `s`, step `t`, already carrying any batch or step averaging weights.
/// Frozen parameters still receive their true gradient; masking happens at
/// the optimizer.
pub fn backward(
    model: &NetworkModel,
    trace: &Trace,
    dlogits: &[Vec<[f64; N_CLASSES]>],
) -> Result<Vec<f64>> {
    if dlogits.len() != trace.sample_rows.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} samples", trace.sample_rows.len()),
            actual: format!("{} gradient entries", dlogits.len()),
        });
    }
    let total_rows = trace.sample_rows.iter().map(|r| r.len()).sum::<usize>();
    let mut g = Array2::zeros((total_rows, N_CLASSES));
    for (s, range) in trace.sample_rows.iter().enumerate() {
        if dlogits[s].len() != range.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} steps for sample {s}", range.len()),
                actual: format!("{}", dlogits[s].len()),
            });
        }
        for (t, r) in range.clone().enumerate() {
            g[[r, 0]] = dlogits[s][t][0];
            g[[r, 1]] = dlogits[s][t][1];
        }
    }

    let mut grad = vec![0.0; model.n_params()];
    let arch = model.arch();
    let mut gm = g;
    for (li, layer) in arch.layers.iter().enumerate().rev() {
        match (&trace.entries[li], *layer) {
            (TraceEntry::Softmax, LayerSpec::Softmax) => {}
            (TraceEntry::Dropout { mask }, LayerSpec::Dropout { .. }) => {
                if let Some(mask) = mask {
                    gm *= mask;
                }
            }
            (TraceEntry::Relu { output }, LayerSpec::Relu) => {
                ndarray::Zip::from(&mut gm).and(output).for_each(|g, &o| {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            (TraceEntry::Dense { input }, LayerSpec::Dense { inputs: in_dim, units }) => {
                let block = model.block_of(li).expect("dense has params");
                {
                    let (w_grad, b_grad) =
                        grad[block.offset..block.offset + block.len].split_at_mut(in_dim * units);
                    let mut dw = ndarray::ArrayViewMut2::from_shape((in_dim, units), w_grad)
                        .expect("layout");
                    general_mat_mul(1.0, &input.t(), &gm, 0.0, &mut dw);
                    let db = gm.sum_axis(Axis(0));
                    b_grad.copy_from_slice(db.as_slice().expect("contiguous"));
                }
                if li > 0 {
                    let w = ArrayView2::from_shape(
                        (in_dim, units),
                        &model.params()[block.offset..block.offset + in_dim * units],
                    )
                    .expect("layout");
                    let mut dx = Array2::zeros((gm.nrows(), in_dim));
                    general_mat_mul(1.0, &gm, &w.t(), 0.0, &mut dx);
                    gm = dx;
                }
            }
            (TraceEntry::Conv { input, in_dims, out_dims }, LayerSpec::Conv2d { in_channels, out_channels }) => {
                let block = model.block_of(li).expect("conv has params");
                let gm_owned = std::mem::replace(&mut gm, Array2::zeros((0, 0)));
                gm = conv_backward(
                    &gm_owned,
                    input,
                    *in_dims,
                    *out_dims,
                    in_channels,
                    out_channels,
                    model,
                    block.offset,
                    &mut grad,
                    li > 0,
                );
            }
            (TraceEntry::Lstm { x, cells: traces }, LayerSpec::LstmM2m { inputs: in_dim, cells }) => {
                let block = model.block_of(li).expect("lstm has params");
                let (wx_r, wh_r, _) = lstm_spans(block, in_dim, cells);
                let wh = ArrayView2::from_shape((4 * cells, cells), &model.params()[wh_r.clone()])
                    .expect("layout");
                for (s, range) in trace.sample_rows.iter().enumerate() {
                    let dh = gm.slice(ndarray::s![range.clone(), ..]);
                    lstm_backward(
                        x[s].view(),
                        &traces[s],
                        wh,
                        dh,
                        in_dim,
                        cells,
                        &mut grad[wx_r.start..wh_r.end + 4 * cells],
                    );
                }
                // recurrent layers sit first; no gradient flows further back
                gm = Array2::zeros((0, 0));
            }
            _ => {
                return Err(Error::Config(format!(
                    "backward: trace entry mismatch at layer {li} (was the trace recorded?)"
                )))
            }
        }
    }
    Ok(grad)
}

/// Two-way softmax with max shift; strictly positive for finite logits of
/// reasonable magnitude.
pub fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let sum = e0 + e1;
    [e0 / sum, e1 / sum]
}

/// `log softmax(z)[class]`, computed stably from logits.
pub fn log_softmax2(z: [f64; 2], class: usize) -> f64 {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    z[class] - lse
}

enum Batch {
    Flat { m: Array2<f64>, sample_rows: Vec<std::ops::Range<usize>> },
    Ragged(Vec<Array2<f64>>),
}

impl Batch {
    fn take_flat(&mut self) -> Array2<f64> {
        match self {
            Batch::Flat { m, .. } => std::mem::replace(m, Array2::zeros((0, 0))),
            Batch::Ragged(_) => unreachable!("validated architecture keeps phases ordered"),
        }
    }

    fn flat_mut(&mut self) -> &mut Array2<f64> {
        match self {
            Batch::Flat { m, .. } => m,
            Batch::Ragged(_) => unreachable!("validated architecture keeps phases ordered"),
        }
    }

    fn take_ragged(&mut self) -> Vec<Array2<f64>> {
        match self {
            Batch::Ragged(seqs) => std::mem::take(seqs),
            Batch::Flat { .. } => unreachable!("validated architecture keeps phases ordered"),
        }
    }

    fn rows_clone(&self) -> Vec<std::ops::Range<usize>> {
        match self {
            Batch::Flat { sample_rows, .. } => sample_rows.clone(),
            Batch::Ragged(_) => unreachable!(),
        }
    }
}

fn conv_forward(
    x: &Array2<f64>,
    (h, w, c): (usize, usize, usize),
    out_c: usize,
    filters: &[f64],
    bias: &[f64],
) -> Array2<f64> {
    let oh = h - CONV_KERNEL + 1;
    let ow = w - CONV_KERNEL + 1;
    let k2 = CONV_KERNEL * CONV_KERNEL;
    let f = ArrayView2::from_shape((c * k2, out_c), filters).expect("filter layout");
    let n = x.nrows();
    let mut out = Array2::zeros((n, oh * ow * out_c));
    let mut patches = Array2::zeros((oh * ow, c * k2));
    let mut y = Array2::zeros((oh * ow, out_c));
    for s in 0..n {
        im2col(x.row(s).as_slice().expect("contiguous"), (h, w, c), patches.as_slice_mut().unwrap());
        general_mat_mul(1.0, &patches, &f, 0.0, &mut y);
        let out_row = out.row_mut(s).into_slice().expect("contiguous");
        for (px, yrow) in y.rows().into_iter().enumerate() {
            for oc in 0..out_c {
                out_row[px * out_c + oc] = yrow[oc] + bias[oc];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    g: &Array2<f64>,
    x: &Array2<f64>,
    in_dims: (usize, usize, usize),
    out_dims: (usize, usize, usize),
    in_c: usize,
    out_c: usize,
    model: &NetworkModel,
    param_offset: usize,
    grad: &mut [f64],
    want_dx: bool,
) -> Array2<f64> {
    let (h, w, c) = in_dims;
    let (oh, ow, _) = out_dims;
    let k2 = CONV_KERNEL * CONV_KERNEL;
    let n = x.nrows();
    let n_w = in_c * k2 * out_c;
    let mut patches = Array2::zeros((oh * ow, c * k2));
    let mut dx = if want_dx { Array2::zeros((n, h * w * c)) } else { Array2::zeros((0, 0)) };
    let mut dpatches = Array2::zeros((oh * ow, c * k2));
    let f = ArrayView2::from_shape(
        (c * k2, out_c),
        &model.params()[param_offset..param_offset + n_w],
    )
    .expect("filter layout");
    for s in 0..n {
        let g_row = g.row(s);
        let gy = ArrayView2::from_shape((oh * ow, out_c), g_row.as_slice().unwrap())
            .expect("layout");
        im2col(x.row(s).as_slice().unwrap(), (h, w, c), patches.as_slice_mut().unwrap());
        {
            let (w_grad, b_grad) = grad[param_offset..param_offset + n_w + out_c].split_at_mut(n_w);
            let mut df = ndarray::ArrayViewMut2::from_shape((c * k2, out_c), w_grad)
                .expect("filter layout");
            general_mat_mul(1.0, &patches.t(), &gy, 1.0, &mut df);
            let db = gy.sum_axis(Axis(0));
            for (b, d) in b_grad.iter_mut().zip(db.iter()) {
                *b += d;
            }
        }
        if want_dx {
            general_mat_mul(1.0, &gy, &f.t(), 0.0, &mut dpatches);
            col2im_add(
                dpatches.as_slice().unwrap(),
                (h, w, c),
                dx.row_mut(s).into_slice().unwrap(),
            );
        }
    }
    dx
}

/// Expands a feature map into convolution patches: row `(r, s)` holds the
/// 3x3 window at that output position, ordered (channel, kernel row, kernel
/// column) to match the filter layout.
fn im2col(x: &[f64], (h, w, c): (usize, usize, usize), out: &mut [f64]) {
    let oh = h - CONV_KERNEL + 1;
    let ow = w - CONV_KERNEL + 1;
    let k2 = CONV_KERNEL * CONV_KERNEL;
    let row_len = c * k2;
    for r in 0..oh {
        for s in 0..ow {
            let base = (r * ow + s) * row_len;
            for ic in 0..c {
                for kr in 0..CONV_KERNEL {
                    for kc in 0..CONV_KERNEL {
                        out[base + ic * k2 + kr * CONV_KERNEL + kc] =
                            x[((r + kr) * w + (s + kc)) * c + ic];
                    }
                }
            }
        }
    }
}

fn col2im_add(dpatches: &[f64], (h, w, c): (usize, usize, usize), dx: &mut [f64]) {
    let oh = h - CONV_KERNEL + 1;
    let ow = w - CONV_KERNEL + 1;
    let k2 = CONV_KERNEL * CONV_KERNEL;
    let row_len = c * k2;
    for r in 0..oh {
        for s in 0..ow {
            let base = (r * ow + s) * row_len;
            for ic in 0..c {
                for kr in 0..CONV_KERNEL {
                    for kc in 0..CONV_KERNEL {
                        dx[((r + kr) * w + (s + kc)) * c + ic] +=
                            dpatches[base + ic * k2 + kr * CONV_KERNEL + kc];
                    }
                }
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn lstm_forward(
    x: ArrayView2<f64>,
    wx: ArrayView2<f64>,
    wh: ArrayView2<f64>,
    b: ArrayView1<f64>,
    cells: usize,
) -> LstmTrace {
    let t_len = x.nrows();
    let mut tr = LstmTrace {
        i: Array2::zeros((t_len, cells)),
        f: Array2::zeros((t_len, cells)),
        g: Array2::zeros((t_len, cells)),
        o: Array2::zeros((t_len, cells)),
        c: Array2::zeros((t_len, cells)),
        tanh_c: Array2::zeros((t_len, cells)),
        h: Array2::zeros((t_len, cells)),
    };
    let mut h_prev = Array1::zeros(cells);
    let mut c_prev: Array1<f64> = Array1::zeros(cells);
    for t in 0..t_len {
        let mut z = wx.dot(&x.row(t));
        z += &wh.dot(&h_prev);
        z += &b;
        for j in 0..cells {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[cells + j]);
            let g = z[2 * cells + j].tanh();
            let o = sigmoid(z[3 * cells + j]);
            let c = f * c_prev[j] + i * g;
            let tc = c.tanh();
            let h = o * tc;
            tr.i[[t, j]] = i;
            tr.f[[t, j]] = f;
            tr.g[[t, j]] = g;
            tr.o[[t, j]] = o;
            tr.c[[t, j]] = c;
            tr.tanh_c[[t, j]] = tc;
            tr.h[[t, j]] = h;
        }
        h_prev.assign(&tr.h.row(t));
        c_prev.assign(&tr.c.row(t));
    }
    tr
}

/// Backpropagation through time for one sample. `grad` spans the layer's
/// full parameter block `[wx | wh | b]`.
fn lstm_backward(
    x: ArrayView2<f64>,
    tr: &LstmTrace,
    wh: ArrayView2<f64>,
    dh_out: ArrayView2<f64>,
    in_dim: usize,
    cells: usize,
    grad: &mut [f64],
) {
    let t_len = x.nrows();
    let (dwx, rest) = grad.split_at_mut(4 * cells * in_dim);
    let (dwh, db) = rest.split_at_mut(4 * cells * cells);
    let mut dh_next: Array1<f64> = Array1::zeros(cells);
    let mut dc_next: Array1<f64> = Array1::zeros(cells);
    let mut dz = Array1::zeros(4 * cells);
    for t in (0..t_len).rev() {
        for j in 0..cells {
            let dh = dh_out[[t, j]] + dh_next[j];
            let o = tr.o[[t, j]];
            let tc = tr.tanh_c[[t, j]];
            let mut dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            let i = tr.i[[t, j]];
            let f = tr.f[[t, j]];
            let g = tr.g[[t, j]];
            let c_prev = if t == 0 { 0.0 } else { tr.c[[t - 1, j]] };
            let d_o = dh * tc;
            let d_i = dc * g;
            let d_g = dc * i;
            let d_f = dc * c_prev;
            dz[j] = d_i * i * (1.0 - i);
            dz[cells + j] = d_f * f * (1.0 - f);
            dz[2 * cells + j] = d_g * (1.0 - g * g);
            dz[3 * cells + j] = d_o * o * (1.0 - o);
            dc *= f;
            dc_next[j] = dc;
        }
        // parameter gradients: dz outer x_t and dz outer h_{t-1}
        let xt = x.row(t);
        for r in 0..4 * cells {
            let dzr = dz[r];
            if dzr != 0.0 {
                let row = &mut dwx[r * in_dim..(r + 1) * in_dim];
                for (dst, &xv) in row.iter_mut().zip(xt.iter()) {
                    *dst += dzr * xv;
                }
                if t > 0 {
                    let hrow = tr.h.row(t - 1);
                    let row = &mut dwh[r * cells..(r + 1) * cells];
                    for (dst, &hv) in row.iter_mut().zip(hrow.iter()) {
                        *dst += dzr * hv;
                    }
                }
            }
            db[r] += dzr;
        }
        dh_next = wh.t().dot(&dz);
    }
}

/// Incremental recurrent inference: feed one step at a time and read the
/// same logits a batched forward pass would produce for that prefix.
pub struct LstmStream<'m> {
    model: &'m NetworkModel,
    h: Array1<f64>,
    c: Array1<f64>,
    cells: usize,
    in_dim: usize,
}

impl<'m> LstmStream<'m> {
    pub fn new(model: &'m NetworkModel) -> Result<LstmStream<'m>> {
        let arch = model.arch();
        match (arch.input, arch.layers.first()) {
            (
                crate::nn::model::InputSpec::Sequence { dim },
                Some(LayerSpec::LstmM2m { inputs, cells }),
            ) if dim == *inputs => Ok(LstmStream {
                model,
                h: Array1::zeros(*cells),
                c: Array1::zeros(*cells),
                cells: *cells,
                in_dim: *inputs,
            }),
            _ => Err(Error::Config("streaming needs a sequence model with a leading LSTM".into())),
        }
    }

    /// Consumes one step and returns its `(logits, probabilities)`.
    pub fn step(&mut self, x: &[f64]) -> Result<([f64; 2], [f64; 2])> {
        if x.len() != self.in_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} inputs", self.in_dim),
                actual: format!("{}", x.len()),
            });
        }
        let model = self.model;
        let block = model.block_of(0).expect("lstm has params");
        let (wx_r, wh_r, b_r) = lstm_spans(block, self.in_dim, self.cells);
        let wx = ArrayView2::from_shape((4 * self.cells, self.in_dim), &model.params()[wx_r])
            .expect("layout");
        let wh = ArrayView2::from_shape((4 * self.cells, self.cells), &model.params()[wh_r])
            .expect("layout");
        let b = ArrayView1::from(&model.params()[b_r]);
        let mut z = wx.dot(&ArrayView1::from(x));
        z += &wh.dot(&self.h);
        z += &b;
        for j in 0..self.cells {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[self.cells + j]);
            let g = z[2 * self.cells + j].tanh();
            let o = sigmoid(z[3 * self.cells + j]);
            let c = f * self.c[j] + i * g;
            self.c[j] = c;
            self.h[j] = o * c.tanh();
        }

        // dense head on this step, eval mode
        let arch = model.arch();
        let mut v = Array2::zeros((1, self.cells));
        v.row_mut(0).assign(&self.h);
        for (li, layer) in arch.layers.iter().enumerate().skip(1) {
            match *layer {
                LayerSpec::Dense { inputs, units } => {
                    let block = model.block_of(li).expect("dense has params");
                    let w = ArrayView2::from_shape(
                        (inputs, units),
                        &model.params()[block.offset..block.offset + inputs * units],
                    )
                    .expect("layout");
                    let bias =
                        &model.params()[block.offset + inputs * units..block.offset + block.len];
                    let mut out = Array2::zeros((1, units));
                    general_mat_mul(1.0, &v, &w, 0.0, &mut out);
                    {
                        let mut row = out.row_mut(0);
                        row += &ArrayView1::from(bias);
                    }
                    v = out;
                }
                LayerSpec::Relu => v.mapv_inplace(|u| if u > 0.0 { u } else { 0.0 }),
                LayerSpec::Dropout { .. } | LayerSpec::Softmax => {}
                _ => return Err(Error::Config("unexpected layer after the recurrent base".into())),
            }
        }
        let z = [v[[0, 0]], v[[0, 1]]];
        Ok((z, softmax2(z)))
    }
}
