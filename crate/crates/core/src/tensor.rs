//! Flat `f64` tensors and a Wengert-tape reverse-mode autodiff engine.
//!
//! A [`Tape`] is rebuilt for every optimization step (define-by-run). Ops are
//! methods on the tape; each records a node holding the op kind, input node
//! ids and the forward value, and [`Tape::backward`] replays the nodes in
//! reverse, accumulating gradients. Leaves with `requires_grad = false`
//! never receive a gradient, but gradients still flow *through* ops whose
//! other inputs require one (that is how a frozen teacher passes gradients
//! back into projected BEV embeddings).
//!
//! The forward arithmetic for every op lives in a plain kernel function
//! (`matmul_into`, `conv2d_into`, ...) shared by the tape and by the
//! tape-free inference paths, so training and evaluation can never drift
//! apart numerically.
//!
//! Shape violations are programming errors and panic loudly; fallible
//! user-facing paths (checkpoints, configs, tokenizers) return `Result` in
//! their own modules.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::math;

pub type NodeId = usize;

/// Epsilon inside every layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Constants of the tanh GELU approximation
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub const GELU_COEF: f64 = 0.044715;
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Set when the tensor is registered on (or produced by) a tape. Node ids
    /// are only meaningful for the tape that created them.
    pub node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data, requires_grad: false, node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new(&[1], vec![x])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn dim2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn dim3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank-3 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

// ---------------------------------------------------------------------------
// Forward kernels (shared by tape ops and tape-free inference)
// ---------------------------------------------------------------------------

/// `out[m,n] = a[m,k] * b[k,n]`.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + math::tanh(inner))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = math::tanh(inner);
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Row-wise softmax of `x[rows, cols]`, numerically stabilized.
pub fn softmax_rows_into(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for j in 0..cols {
            let e = math::exp(row[j] - mx);
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
}

/// Layer norm of each row of `x[rows, d]` with per-feature gain and bias.
pub fn layer_norm_into(x: &[f64], gain: &[f64], bias: &[f64], rows: usize, d: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            orow[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
}

/// Conv2d over a single image `x[cin, h, w]` with weight
/// `w[cout, cin/groups, kh, kw]`, zero padding `pad`, square stride.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_into(
    x: &[f64],
    wgt: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    out: &mut [f64],
) {
    assert!(cin % groups == 0 && cout % groups == 0, "groups must divide channels");
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    assert_eq!(out.len(), cout * oh * ow);
    out.fill(0.0);
    for co in 0..cout {
        let g = co / cout_g;
        for ci_l in 0..cin_g {
            let ci = g * cin_g + ci_l;
            for di in 0..kh {
                for dj in 0..kw {
                    let wv = wgt[((co * cin_g + ci_l) * kh + di) * kw + dj];
                    if wv == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let ih = (i * stride + di) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let iw = (j * stride + dj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            out[(co * oh + i) * ow + j] +=
                                wv * x[(ci * h + ih as usize) * w + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolMode {
    Max,
    Avg,
}

/// `f`-stride, `f`-window pooling over `x[c, h, w]`; `f` must divide `h`, `w`.
/// For max pooling the argmax index (flat into `x`) per output cell is
/// written to `argmax` when provided; ties go to the first index in
/// row-major window order.
pub fn pool2d_into(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    mode: PoolMode,
    out: &mut [f64],
    mut argmax: Option<&mut Vec<usize>>,
) {
    assert!(f > 0 && h % f == 0 && w % f == 0, "pool factor {f} must divide {h}x{w}");
    let (oh, ow) = (h / f, w / f);
    assert_eq!(out.len(), c * oh * ow);
    if let Some(am) = argmax.as_deref_mut() {
        am.clear();
        am.resize(c * oh * ow, 0);
    }
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                match mode {
                    PoolMode::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for di in 0..f {
                            for dj in 0..f {
                                let idx = (ch * h + i * f + di) * w + j * f + dj;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[(ch * oh + i) * ow + j] = best;
                        if let Some(am) = argmax.as_deref_mut() {
                            am[(ch * oh + i) * ow + j] = best_idx;
                        }
                    }
                    PoolMode::Avg => {
                        let mut sum = 0.0;
                        for di in 0..f {
                            for dj in 0..f {
                                sum += x[(ch * h + i * f + di) * w + j * f + dj];
                            }
                        }
                        out[(ch * oh + i) * ow + j] = sum / (f * f) as f64;
                    }
                }
            }
        }
    }
}

/// Space-to-depth: `x[c, h, w] -> out[c f^2, h/f, w/f]` with
/// `out[(c f + di) f + dj, i, j] = x[c, i f + di, j f + dj]`.
pub fn pixel_unshuffle_into(x: &[f64], c: usize, h: usize, w: usize, f: usize, out: &mut [f64]) {
    assert!(f > 0 && h % f == 0 && w % f == 0, "unshuffle factor {f} must divide {h}x{w}");
    let (oh, ow) = (h / f, w / f);
    assert_eq!(out.len(), c * f * f * oh * ow);
    for ch in 0..c {
        for di in 0..f {
            for dj in 0..f {
                let oc = (ch * f + di) * f + dj;
                for i in 0..oh {
                    for j in 0..ow {
                        out[(oc * oh + i) * ow + j] = x[(ch * h + i * f + di) * w + j * f + dj];
                    }
                }
            }
        }
    }
}

/// Exact inverse of [`pixel_unshuffle_into`].
pub fn pixel_shuffle_into(x: &[f64], c_out: usize, h: usize, w: usize, f: usize, out: &mut [f64]) {
    assert_eq!(out.len(), c_out * h * w);
    let (sh, sw) = (h / f, w / f);
    for ch in 0..c_out {
        for di in 0..f {
            for dj in 0..f {
                let ic = (ch * f + di) * f + dj;
                for i in 0..sh {
                    for j in 0..sw {
                        out[(ch * h + i * f + di) * w + j * f + dj] = x[(ic * sh + i) * sw + j];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// One sampling entry of the view-to-BEV lift: the output spatial cell takes
/// `w0 * col0 + w1 * col1` of the mean-over-rows feature column of `view`.
#[derive(Clone, Debug)]
pub struct LiftCell {
    pub view: usize,
    pub col0: usize,
    pub col1: usize,
    pub w0: f64,
    pub w1: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { m: usize, k: usize, n: usize },
    Transpose2d { rows: usize, cols: usize },
    Add,
    Sub,
    Mul,
    Scale { c: f64 },
    AddRowVector { rows: usize, d: usize },
    AddChannelBias { c: usize, hw: usize },
    Gelu,
    LayerNorm { rows: usize, d: usize },
    Softmax { rows: usize, cols: usize },
    SoftmaxCrossEntropy { rows: usize, cols: usize, targets: Vec<usize>, mask: Vec<f64>, probs: Vec<f64> },
    BceWithLogits { labels: Vec<f64> },
    EmbeddingLookup { ids: Vec<usize>, dim: usize },
    Conv2d { cin: usize, h: usize, w: usize, cout: usize, kh: usize, kw: usize, stride: usize, pad: usize, groups: usize },
    Pool2d { c: usize, h: usize, w: usize, f: usize, mode: PoolMode, argmax: Vec<usize> },
    PixelUnshuffle { c: usize, h: usize, w: usize, f: usize },
    ViewLift { c: usize, h: usize, w: usize, cells: Vec<LiftCell> },
    GlobalAvgPool { c: usize, hw: usize },
    GlobalMaxPool { c: usize, hw: usize, argmax: Vec<usize> },
    SliceRows { rows: usize, cols: usize, start: usize, len: usize },
    SliceCols { rows: usize, cols: usize, start: usize, len: usize },
    ConcatRows { cols: usize, row_counts: Vec<usize> },
    Sum,
    Mean { n: usize },
    Reshape,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Vec<f64>,
    needs_grad: bool,
    is_grad_leaf: bool,
}

/// Gradients keyed by node id, as produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a tensor registered on the tape, if one was accumulated.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node.expect("tensor was never registered on the tape");
        self.by_node.get(id).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, value: Vec<f64>) -> Tensor {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value: value.clone(), needs_grad, is_grad_leaf: false });
        Tensor { shape, data: value, requires_grad: needs_grad, node: Some(id) }
    }

    fn input_id(&self, t: &Tensor) -> NodeId {
        t.node.expect("input tensor is not on the tape; register it with var() or constant()")
    }

    fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Register a trainable leaf (gradient will be accumulated for it).
    pub fn var(&mut self, t: &Tensor) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t.data.clone(),
            needs_grad: true,
            is_grad_leaf: true,
        });
        Tensor { shape: t.shape.clone(), data: t.data.clone(), requires_grad: true, node: Some(id) }
    }

    /// Register a frozen leaf: no gradient is ever accumulated for it.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t.data.clone(),
            needs_grad: false,
            is_grad_leaf: false,
        });
        Tensor { shape: t.shape.clone(), data: t.data.clone(), requires_grad: false, node: Some(id) }
    }

    // -- ops ----------------------------------------------------------------

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dim2();
        let (k2, n) = b.dim2();
        assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?}", a.shape, b.shape);
        let mut out = vec![0.0; m * n];
        matmul_into(&a.data, &b.data, m, k, n, &mut out);
        let (ia, ib) = (self.input_id(a), self.input_id(b));
        self.push(Op::Matmul { m, k, n }, vec![ia, ib], vec![m, n], out)
    }

    pub fn transpose2d(&mut self, a: &Tensor) -> Tensor {
        let (r, c) = a.dim2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data[i * c + j];
            }
        }
        let ia = self.input_id(a);
        self.push(Op::Transpose2d { rows: r, cols: c }, vec![ia], vec![c, r], out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "add shape mismatch");
        let out = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        let (ia, ib) = (self.input_id(a), self.input_id(b));
        self.push(Op::Add, vec![ia, ib], a.shape.clone(), out)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "sub shape mismatch");
        let out = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        let (ia, ib) = (self.input_id(a), self.input_id(b));
        self.push(Op::Sub, vec![ia, ib], a.shape.clone(), out)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "mul shape mismatch");
        let out = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        let (ia, ib) = (self.input_id(a), self.input_id(b));
        self.push(Op::Mul, vec![ia, ib], a.shape.clone(), out)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let out = a.data.iter().map(|x| x * c).collect();
        let ia = self.input_id(a);
        self.push(Op::Scale { c }, vec![ia], a.shape.clone(), out)
    }

    /// `x[rows, d] + v[d]` broadcast over rows.
    pub fn add_row_vector(&mut self, x: &Tensor, v: &Tensor) -> Tensor {
        let (rows, d) = x.dim2();
        assert_eq!(v.len(), d, "row vector length mismatch");
        let mut out = x.data.clone();
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] += v.data[j];
            }
        }
        let (ix, iv) = (self.input_id(x), self.input_id(v));
        self.push(Op::AddRowVector { rows, d }, vec![ix, iv], x.shape.clone(), out)
    }

    /// `x[c, h, w] + b[c]` broadcast over the spatial extent.
    pub fn add_channel_bias(&mut self, x: &Tensor, b: &Tensor) -> Tensor {
        let (c, h, w) = x.dim3();
        assert_eq!(b.len(), c, "channel bias length mismatch");
        let hw = h * w;
        let mut out = x.data.clone();
        for ch in 0..c {
            for i in 0..hw {
                out[ch * hw + i] += b.data[ch];
            }
        }
        let (ix, ib) = (self.input_id(x), self.input_id(b));
        self.push(Op::AddChannelBias { c, hw }, vec![ix, ib], x.shape.clone(), out)
    }

    pub fn gelu(&mut self, a: &Tensor) -> Tensor {
        let out = a.data.iter().map(|&x| gelu_scalar(x)).collect();
        let ia = self.input_id(a);
        self.push(Op::Gelu, vec![ia], a.shape.clone(), out)
    }

    /// Row-wise layer norm with learned gain/bias, eps = [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
        let d = *x.shape.last().expect("layer_norm on empty shape");
        let rows = x.len() / d;
        assert_eq!(gain.len(), d, "layer_norm gain length mismatch");
        assert_eq!(bias.len(), d, "layer_norm bias length mismatch");
        let mut out = vec![0.0; x.len()];
        layer_norm_into(&x.data, &gain.data, &bias.data, rows, d, &mut out);
        let (ix, ig, ib) = (self.input_id(x), self.input_id(gain), self.input_id(bias));
        self.push(Op::LayerNorm { rows, d }, vec![ix, ig, ib], x.shape.clone(), out)
    }

    pub fn softmax_rows(&mut self, x: &Tensor) -> Tensor {
        let (rows, cols) = x.dim2();
        let mut out = vec![0.0; x.len()];
        softmax_rows_into(&x.data, rows, cols, &mut out);
        let ix = self.input_id(x);
        self.push(Op::Softmax { rows, cols }, vec![ix], x.shape.clone(), out)
    }

    /// Mean masked token-level cross entropy. `targets[r]` is the class index
    /// of row `r`; rows with `mask[r] = 0` contribute nothing. Returns a
    /// scalar; the mean is over `sum(mask)`, which must be positive.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, targets: &[usize], mask: &[f64]) -> Tensor {
        let (rows, cols) = logits.dim2();
        assert_eq!(targets.len(), rows, "targets length mismatch");
        assert_eq!(mask.len(), rows, "mask length mismatch");
        let denom: f64 = mask.iter().sum();
        assert!(denom > 0.0, "cross entropy mask selects no rows");
        let mut probs = vec![0.0; rows * cols];
        softmax_rows_into(&logits.data, rows, cols, &mut probs);
        let mut loss = 0.0;
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            assert!(targets[r] < cols, "target {} out of range {}", targets[r], cols);
            let p = probs[r * cols + targets[r]].max(1e-300);
            loss -= mask[r] * math::ln(p);
        }
        loss /= denom;
        let ix = self.input_id(logits);
        self.push(
            Op::SoftmaxCrossEntropy {
                rows,
                cols,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            vec![ix],
            vec![1],
            vec![loss],
        )
    }

    /// Mean binary cross entropy on logits, numerically stable form.
    pub fn bce_with_logits(&mut self, logits: &Tensor, labels: &[f64]) -> Tensor {
        assert_eq!(logits.len(), labels.len(), "label length mismatch");
        assert!(!labels.is_empty());
        let mut loss = 0.0;
        for (&z, &y) in logits.data.iter().zip(labels) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            loss += z.max(0.0) - z * y + math::ln(1.0 + math::exp(-math::abs(z)));
        }
        loss /= labels.len() as f64;
        let ix = self.input_id(logits);
        self.push(Op::BceWithLogits { labels: labels.to_vec() }, vec![ix], vec![1], vec![loss])
    }

    /// Rows of `table[vocab, dim]` gathered by id; backward scatter-adds.
    pub fn embedding_lookup(&mut self, table: &Tensor, ids: &[usize]) -> Tensor {
        let (vocab, dim) = table.dim2();
        let mut out = vec![0.0; ids.len() * dim];
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < vocab, "token id {id} out of vocab {vocab}");
            out[r * dim..(r + 1) * dim].copy_from_slice(&table.data[id * dim..(id + 1) * dim]);
        }
        let it = self.input_id(table);
        self.push(
            Op::EmbeddingLookup { ids: ids.to_vec(), dim },
            vec![it],
            vec![ids.len(), dim],
            out,
        )
    }

    pub fn conv2d(&mut self, x: &Tensor, wgt: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
        let (cin, h, w) = x.dim3();
        assert_eq!(wgt.shape.len(), 4, "conv weight must be rank 4");
        let (cout, cin_g, kh, kw) = (wgt.shape[0], wgt.shape[1], wgt.shape[2], wgt.shape[3]);
        assert_eq!(cin_g * groups, cin, "conv weight in-channels mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        conv2d_into(&x.data, &wgt.data, cin, h, w, cout, kh, kw, stride, pad, groups, &mut out);
        let (ix, iw) = (self.input_id(x), self.input_id(wgt));
        self.push(
            Op::Conv2d { cin, h, w, cout, kh, kw, stride, pad, groups },
            vec![ix, iw],
            vec![cout, oh, ow],
            out,
        )
    }

    /// Max routes its gradient to the first row-major argmax of each window.
    pub fn pool2d(&mut self, x: &Tensor, f: usize, mode: PoolMode) -> Tensor {
        let (c, h, w) = x.dim3();
        let mut out = vec![0.0; c * (h / f) * (w / f)];
        let mut argmax = Vec::new();
        pool2d_into(
            &x.data,
            c,
            h,
            w,
            f,
            mode,
            &mut out,
            if mode == PoolMode::Max { Some(&mut argmax) } else { None },
        );
        let ix = self.input_id(x);
        self.push(Op::Pool2d { c, h, w, f, mode, argmax }, vec![ix], vec![c, h / f, w / f], out)
    }

    pub fn pixel_unshuffle(&mut self, x: &Tensor, f: usize) -> Tensor {
        let (c, h, w) = x.dim3();
        let mut out = vec![0.0; c * h * w];
        pixel_unshuffle_into(&x.data, c, h, w, f, &mut out);
        let ix = self.input_id(x);
        self.push(Op::PixelUnshuffle { c, h, w, f }, vec![ix], vec![c * f * f, h / f, w / f], out)
    }

    /// Lift per-view feature maps (all `[c, h, w]`) onto a BEV spatial grid of
    /// `cells.len()` cells: each cell takes a weighted pair of mean-over-rows
    /// feature columns from one view.
    pub fn view_lift(&mut self, views: &[Tensor], cells: &[LiftCell], out_h: usize, out_w: usize) -> Tensor {
        assert!(!views.is_empty());
        let (c, h, w) = views[0].dim3();
        for v in views {
            assert_eq!(v.shape, views[0].shape, "all view features must share extents");
        }
        assert_eq!(cells.len(), out_h * out_w, "lift cell table does not match grid");
        let mut out = vec![0.0; c * out_h * out_w];
        let inv_h = 1.0 / h as f64;
        for (cell_idx, cell) in cells.iter().enumerate() {
            assert!(cell.view < views.len() && cell.col0 < w && cell.col1 < w);
            let vdata = &views[cell.view].data;
            for ch in 0..c {
                let mut acc = 0.0;
                for r in 0..h {
                    acc += cell.w0 * vdata[(ch * h + r) * w + cell.col0]
                        + cell.w1 * vdata[(ch * h + r) * w + cell.col1];
                }
                out[ch * (out_h * out_w) + cell_idx] = acc * inv_h;
            }
        }
        let ids: Vec<NodeId> = views.iter().map(|v| self.input_id(v)).collect();
        self.push(
            Op::ViewLift { c, h, w, cells: cells.to_vec() },
            ids,
            vec![c, out_h, out_w],
            out,
        )
    }

    pub fn global_avg_pool(&mut self, x: &Tensor) -> Tensor {
        let (c, h, w) = x.dim3();
        let hw = h * w;
        let mut out = vec![0.0; c];
        for ch in 0..c {
            out[ch] = x.data[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let ix = self.input_id(x);
        self.push(Op::GlobalAvgPool { c, hw }, vec![ix], vec![1, c], out)
    }

    pub fn global_max_pool(&mut self, x: &Tensor) -> Tensor {
        let (c, h, w) = x.dim3();
        let hw = h * w;
        let mut out = vec![0.0; c];
        let mut argmax = vec![0usize; c];
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            for i in 0..hw {
                if x.data[ch * hw + i] > best {
                    best = x.data[ch * hw + i];
                    argmax[ch] = ch * hw + i;
                }
            }
            out[ch] = best;
        }
        let ix = self.input_id(x);
        self.push(Op::GlobalMaxPool { c, hw, argmax }, vec![ix], vec![1, c], out)
    }

    pub fn slice_rows(&mut self, x: &Tensor, start: usize, len: usize) -> Tensor {
        let (rows, cols) = x.dim2();
        assert!(start + len <= rows, "slice_rows out of range");
        let out = x.data[start * cols..(start + len) * cols].to_vec();
        let ix = self.input_id(x);
        self.push(Op::SliceRows { rows, cols, start, len }, vec![ix], vec![len, cols], out)
    }

    pub fn slice_cols(&mut self, x: &Tensor, start: usize, len: usize) -> Tensor {
        let (rows, cols) = x.dim2();
        assert!(start + len <= cols, "slice_cols out of range");
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&x.data[r * cols + start..r * cols + start + len]);
        }
        let ix = self.input_id(x);
        self.push(Op::SliceCols { rows, cols, start, len }, vec![ix], vec![rows, len], out)
    }

    /// Concatenate rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let cols = parts[0].dim2().1;
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = p.dim2();
            assert_eq!(c, cols, "concat_rows column mismatch");
            row_counts.push(r);
            out.extend_from_slice(&p.data);
        }
        let total: usize = row_counts.iter().sum();
        let ids: Vec<NodeId> = parts.iter().map(|p| self.input_id(p)).collect();
        self.push(Op::ConcatRows { cols, row_counts }, ids, vec![total, cols], out)
    }

    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let s = x.data.iter().sum();
        let ix = self.input_id(x);
        self.push(Op::Sum, vec![ix], vec![1], vec![s])
    }

    pub fn mean(&mut self, x: &Tensor) -> Tensor {
        let n = x.len();
        assert!(n > 0);
        let s = x.data.iter().sum::<f64>() / n as f64;
        let ix = self.input_id(x);
        self.push(Op::Mean { n }, vec![ix], vec![1], vec![s])
    }

    /// Metadata-only shape change.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), x.len(), "reshape element count mismatch");
        let ix = self.input_id(x);
        self.push(Op::Reshape, vec![ix], shape.to_vec(), x.data.clone())
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// grad-leaf (tensors registered via [`Tape::var`]) reachable from it.
    pub fn backward(&self, loss: &Tensor) -> Gradients {
        let loss_id = self.input_id(loss);
        assert_eq!(self.nodes[loss_id].value.len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_id] = Some(vec![1.0]);
        for id in (0..=loss_id).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad && !matches!(node.op, Op::Leaf) {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if !node.is_grad_leaf {
                    grads[id] = None;
                }
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
        }
        Gradients { by_node: grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn backprop_node(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = self.value(ins[0]);
                let b = self.value(ins[1]);
                if self.nodes[ins[0]].needs_grad {
                    // dA = g * B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * b[p * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, ins[0], &da);
                }
                if self.nodes[ins[1]].needs_grad {
                    // dB = A^T * g
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, ins[1], &db);
                }
            }
            Op::Transpose2d { rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        dx[i * cols + j] = g[j * rows + i];
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::Add => {
                self.accumulate(grads, ins[0], g);
                self.accumulate(grads, ins[1], g);
            }
            Op::Sub => {
                self.accumulate(grads, ins[0], g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(grads, ins[1], &neg);
            }
            Op::Mul => {
                let a = self.value(ins[0]);
                let b = self.value(ins[1]);
                if self.nodes[ins[0]].needs_grad {
                    let da: Vec<f64> = g.iter().zip(b).map(|(gv, bv)| gv * bv).collect();
                    self.accumulate(grads, ins[0], &da);
                }
                if self.nodes[ins[1]].needs_grad {
                    let db: Vec<f64> = g.iter().zip(a).map(|(gv, av)| gv * av).collect();
                    self.accumulate(grads, ins[1], &db);
                }
            }
            Op::Scale { c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(grads, ins[0], &dx);
            }
            Op::AddRowVector { rows, d } => {
                self.accumulate(grads, ins[0], g);
                if self.nodes[ins[1]].needs_grad {
                    let mut dv = vec![0.0; *d];
                    for r in 0..*rows {
                        for j in 0..*d {
                            dv[j] += g[r * d + j];
                        }
                    }
                    self.accumulate(grads, ins[1], &dv);
                }
            }
            Op::AddChannelBias { c, hw } => {
                self.accumulate(grads, ins[0], g);
                if self.nodes[ins[1]].needs_grad {
                    let mut db = vec![0.0; *c];
                    for ch in 0..*c {
                        db[ch] = g[ch * hw..(ch + 1) * hw].iter().sum();
                    }
                    self.accumulate(grads, ins[1], &db);
                }
            }
            Op::Gelu => {
                let x = self.value(ins[0]);
                let dx: Vec<f64> =
                    g.iter().zip(x).map(|(gv, &xv)| gv * gelu_grad_scalar(xv)).collect();
                self.accumulate(grads, ins[0], &dx);
            }
            Op::LayerNorm { rows, d } => {
                let x = self.value(ins[0]);
                let gain = self.value(ins[1]);
                let d = *d;
                let mut dx = vec![0.0; x.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..*rows {
                    let row = &x[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
                    // xhat_j = (x_j - mean) * inv
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let gy = grow[j] * gain[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let gy = grow[j] * gain[j];
                        dx[r * d + j] =
                            inv * (gy - sum_gy / d as f64 - xhat * sum_gy_xhat / d as f64);
                    }
                }
                self.accumulate(grads, ins[0], &dx);
                self.accumulate(grads, ins[1], &dgain);
                self.accumulate(grads, ins[2], &dbias);
            }
            Op::Softmax { rows, cols } => {
                let p = &node.value;
                let mut dx = vec![0.0; p.len()];
                for r in 0..*rows {
                    let prow = &p[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..*cols {
                        dx[r * cols + j] = prow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::SoftmaxCrossEntropy { rows, cols, targets, mask, probs } => {
                let upstream = g[0];
                let denom: f64 = mask.iter().sum();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    if mask[r] == 0.0 {
                        continue;
                    }
                    let scale = upstream * mask[r] / denom;
                    for j in 0..*cols {
                        let delta = if j == targets[r] { 1.0 } else { 0.0 };
                        dx[r * cols + j] = scale * (probs[r * cols + j] - delta);
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::BceWithLogits { labels } => {
                let upstream = g[0];
                let z = self.value(ins[0]);
                let n = labels.len() as f64;
                let dx: Vec<f64> = z
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| upstream * (1.0 / (1.0 + math::exp(-z)) - y) / n)
                    .collect();
                self.accumulate(grads, ins[0], &dx);
            }
            Op::EmbeddingLookup { ids, dim } => {
                if self.nodes[ins[0]].needs_grad {
                    let mut dt = vec![0.0; self.nodes[ins[0]].value.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..*dim {
                            dt[id * dim + j] += g[r * dim + j];
                        }
                    }
                    self.accumulate(grads, ins[0], &dt);
                }
            }
            Op::Conv2d { cin, h, w, cout, kh, kw, stride, pad, groups } => {
                let (cin, h, w, cout, kh, kw, stride, pad, groups) =
                    (*cin, *h, *w, *cout, *kh, *kw, *stride, *pad, *groups);
                let cin_g = cin / groups;
                let cout_g = cout / groups;
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kw) / stride + 1;
                let x = self.value(ins[0]);
                let wgt = self.value(ins[1]);
                let want_dx = self.nodes[ins[0]].needs_grad;
                let want_dw = self.nodes[ins[1]].needs_grad;
                let mut dx = vec![0.0; if want_dx { x.len() } else { 0 }];
                let mut dw = vec![0.0; if want_dw { wgt.len() } else { 0 }];
                for co in 0..cout {
                    let grp = co / cout_g;
                    for ci_l in 0..cin_g {
                        let ci = grp * cin_g + ci_l;
                        for di in 0..kh {
                            for dj in 0..kw {
                                let widx = ((co * cin_g + ci_l) * kh + di) * kw + dj;
                                let wv = wgt[widx];
                                for i in 0..oh {
                                    let ih = (i * stride + di) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for j in 0..ow {
                                        let iw = (j * stride + dj) as isize - pad as isize;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        let gv = g[(co * oh + i) * ow + j];
                                        if gv == 0.0 {
                                            continue;
                                        }
                                        let xidx = (ci * h + ih as usize) * w + iw as usize;
                                        if want_dx {
                                            dx[xidx] += wv * gv;
                                        }
                                        if want_dw {
                                            dw[widx] += x[xidx] * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_dx {
                    self.accumulate(grads, ins[0], &dx);
                }
                if want_dw {
                    self.accumulate(grads, ins[1], &dw);
                }
            }
            Op::Pool2d { c, h, w, f, mode, argmax } => {
                let (oh, ow) = (h / f, w / f);
                let mut dx = vec![0.0; c * h * w];
                match mode {
                    PoolMode::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += g[o];
                        }
                    }
                    PoolMode::Avg => {
                        let inv = 1.0 / (f * f) as f64;
                        for ch in 0..*c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let gv = g[(ch * oh + i) * ow + j] * inv;
                                    for di in 0..*f {
                                        for dj in 0..*f {
                                            dx[(ch * h + i * f + di) * w + j * f + dj] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::PixelUnshuffle { c, h, w, f } => {
                let mut dx = vec![0.0; c * h * w];
                // inverse index map of the forward
                let (oh, ow) = (h / f, w / f);
                for ch in 0..*c {
                    for di in 0..*f {
                        for dj in 0..*f {
                            let oc = (ch * f + di) * f + dj;
                            for i in 0..oh {
                                for j in 0..ow {
                                    dx[(ch * h + i * f + di) * w + j * f + dj] +=
                                        g[(oc * oh + i) * ow + j];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::ViewLift { c, h, w, cells } => {
                let n_cells = cells.len();
                let inv_h = 1.0 / *h as f64;
                let mut dviews: Vec<Vec<f64>> = ins
                    .iter()
                    .map(|&i| {
                        if self.nodes[i].needs_grad {
                            vec![0.0; c * h * w]
                        } else {
                            Vec::new()
                        }
                    })
                    .collect();
                for (cell_idx, cell) in cells.iter().enumerate() {
                    let dv = &mut dviews[cell.view];
                    if dv.is_empty() {
                        continue;
                    }
                    for ch in 0..*c {
                        let gv = g[ch * n_cells + cell_idx] * inv_h;
                        for r in 0..*h {
                            dv[(ch * h + r) * w + cell.col0] += cell.w0 * gv;
                            dv[(ch * h + r) * w + cell.col1] += cell.w1 * gv;
                        }
                    }
                }
                for (slot, dv) in ins.iter().zip(dviews) {
                    if !dv.is_empty() {
                        self.accumulate(grads, *slot, &dv);
                    }
                }
            }
            Op::GlobalAvgPool { c, hw } => {
                let inv = 1.0 / *hw as f64;
                let mut dx = vec![0.0; c * hw];
                for ch in 0..*c {
                    for i in 0..*hw {
                        dx[ch * hw + i] = g[ch] * inv;
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::GlobalMaxPool { c, hw, argmax } => {
                let mut dx = vec![0.0; c * hw];
                for ch in 0..*c {
                    dx[argmax[ch]] += g[ch];
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::SliceRows { rows, cols, start, len } => {
                let mut dx = vec![0.0; rows * cols];
                dx[start * cols..(start + len) * cols].copy_from_slice(g);
                self.accumulate(grads, ins[0], &dx);
            }
            Op::SliceCols { rows, cols, start, len } => {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for j in 0..*len {
                        dx[r * cols + start + j] = g[r * len + j];
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::ConcatRows { cols, row_counts } => {
                let mut offset = 0;
                for (slot, &rc) in ins.iter().zip(row_counts) {
                    let part = &g[offset * cols..(offset + rc) * cols];
                    self.accumulate(grads, *slot, part);
                    offset += rc;
                }
            }
            Op::Sum => {
                let n = self.nodes[ins[0]].value.len();
                let dx = vec![g[0]; n];
                self.accumulate(grads, ins[0], &dx);
            }
            Op::Mean { n } => {
                let dx = vec![g[0] / *n as f64; *n];
                self.accumulate(grads, ins[0], &dx);
            }
            Op::Reshape => {
                self.accumulate(grads, ins[0], g);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter sets
// ---------------------------------------------------------------------------

/// Named parameter tensors with deterministic (sorted-name) iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not found"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not found"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Merge `other` under `prefix.` (used to assemble full-model sets).
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (name, t) in other.iter() {
            let mut key = String::from(prefix);
            key.push('.');
            key.push_str(name);
            self.entries.insert(key, t.clone());
        }
    }

    /// Split out entries under `prefix.`, stripping the prefix.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        let mut pat = String::from(prefix);
        pat.push('.');
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(pat.as_str()) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Order-stable content digest over names, shapes and raw values.
    pub fn digest(&self) -> crate::digest::Digest {
        let mut h = crate::digest::Hasher::new();
        for (name, t) in &self.entries {
            h.update_str(name);
            h.update_u64(t.shape.len() as u64);
            for &d in &t.shape {
                h.update_u64(d as u64);
            }
            for &v in &t.data {
                h.update_f64(v);
            }
        }
        h.finish()
    }
}

/// Tape handles for every entry of a [`ParamSet`], registered exactly once.
pub struct BoundParams {
    map: BTreeMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("bound parameter {name:?} not found"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }
}

impl Tape {
    /// Register every parameter as a leaf. `trainable = false` makes them
    /// frozen constants: gradients flow through but are never accumulated.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> BoundParams {
        let mut map = BTreeMap::new();
        for (name, t) in params.iter() {
            let bound = if trainable { self.var(t) } else { self.constant(t) };
            map.insert(name.clone(), bound);
        }
        BoundParams { map }
    }
}

/// Pull per-parameter gradients after a backward sweep; absent gradients
/// (parameters unused by the loss) come back as zeros.
pub fn collect_grads(grads: &Gradients, bound: &BoundParams) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, t) in bound.iter() {
        let g = match grads.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        };
        out.insert(name.clone(), g);
    }
    out
}
