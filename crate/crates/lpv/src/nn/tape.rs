//! Reverse-mode autodiff over [`Mat`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes and
//! return ids; [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients for every node that (transitively) depends on a parameter leaf.
//!
//! The op set is exactly what the prosody autoencoder and the index predictor
//! need: affine maps, 1-D convolutions built from shifted matmuls, layer norm,
//! segment pooling/broadcast for word boundaries, row softmax for attention,
//! and summed cross-entropy / mean-square losses.

use super::tensor::{matmul, matmul_nt, matmul_tn, Mat};

pub type Id = usize;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Id, Id),
    /// a @ b^T
    MatMulNt(Id, Id),
    Add(Id, Id),
    Scale(Id, f64),
    /// a (N×M) + bias (1×M) broadcast over rows
    AddRowBroadcast(Id, Id),
    Relu(Id),
    /// tanh-form gelu; smooth everywhere, so finite-difference checks need
    /// no kink margin
    Gelu(Id),
    LayerNorm {
        x: Id,
        gain: Id,
        bias: Id,
    },
    /// y[i] = x[i + offset], zero outside; used to build 1-D convolutions
    ShiftRows {
        x: Id,
        offset: isize,
    },
    /// row w = mean of x rows in segs[w]
    SegmentMean {
        x: Id,
        segs: Vec<(usize, usize)>,
    },
    /// y[i] = x[w] for i in segs[w]
    SegmentBroadcast {
        x: Id,
        segs: Vec<(usize, usize)>,
    },
    GatherRows {
        table: Id,
        idx: Vec<usize>,
    },
    SoftmaxRows(Id),
    SliceCols {
        x: Id,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Id>),
    /// mean over all elements of (x - target)^2; scalar output
    MeanSq {
        x: Id,
        target: Id,
    },
    /// sum over (row, class) pairs of -log softmax(logits[row])[class]; scalar output
    CrossEntropySum {
        logits: Id,
        targets: Vec<(usize, usize)>,
    },
}

struct Node {
    op: Op,
    value: Mat,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape id; `None` for nodes that need no gradient.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: Id) -> Option<&Mat> {
        self.grads[id].as_ref()
    }

    /// Gradient for a node, zeros if it never received one.
    pub fn get_or_zeros(&self, id: Id, shape: (usize, usize)) -> Mat {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Mat::zeros(shape.0, shape.1),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Id) -> &Mat {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Mat, requires_grad: bool) -> Id {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes[id].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Id {
        self.push(Op::Leaf, value, false)
    }

    /// Parameter leaf; receives a gradient.
    pub fn param(&mut self, value: Mat) -> Id {
        self.push(Op::Leaf, value, true)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = matmul(self.value(a), self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, rg)
    }

    pub fn matmul_nt(&mut self, a: Id, b: Id) -> Id {
        let v = matmul_nt(self.value(a), self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNt(a, b), v, rg)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut v = va.clone();
        v.add_scaled(vb, 1.0);
        let rg = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        let v = self.value(a).map(|x| x * c);
        let rg = self.needs(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn add_row_broadcast(&mut self, a: Id, bias: Id) -> Id {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.rows(), 1, "bias must be 1×M");
        assert_eq!(va.cols(), vb.cols(), "bias width mismatch");
        let mut v = va.clone();
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                let x = v.get(i, j) + vb.get(0, j);
                v.set(i, j, x);
            }
        }
        let rg = self.needs(a) || self.needs(bias);
        self.push(Op::AddRowBroadcast(a, bias), v, rg)
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.needs(a);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn gelu(&mut self, a: Id) -> Id {
        let v = self.value(a).map(gelu_fwd);
        let rg = self.needs(a);
        self.push(Op::Gelu(a), v, rg)
    }

    /// Smallest |input| over every relu node: the distance from the recorded
    /// forward pass to the nearest activation kink. Finite-difference checks
    /// are only trustworthy with step sizes well below this margin.
    pub fn relu_input_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &x in self.nodes[a].value.data() {
                    margin = margin.min(x.abs());
                }
            }
        }
        margin
    }

    pub fn layer_norm(&mut self, x: Id, gain: Id, bias: Id) -> Id {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gain), self.value(bias));
        assert_eq!(vg.shape(), (1, vx.cols()));
        assert_eq!(vb.shape(), (1, vx.cols()));
        let mut v = Mat::zeros(vx.rows(), vx.cols());
        for i in 0..vx.rows() {
            let row = vx.row(i);
            let (mu, inv_std) = row_norm_stats(row);
            for j in 0..vx.cols() {
                let xhat = (row[j] - mu) * inv_std;
                v.set(i, j, vg.get(0, j) * xhat + vb.get(0, j));
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNorm { x, gain, bias }, v, rg)
    }

    pub fn shift_rows(&mut self, x: Id, offset: isize) -> Id {
        let vx = self.value(x);
        let n = vx.rows() as isize;
        let mut v = Mat::zeros(vx.rows(), vx.cols());
        for i in 0..n {
            let src = i + offset;
            if src >= 0 && src < n {
                v.row_mut(i as usize).copy_from_slice(vx.row(src as usize));
            }
        }
        let rg = self.needs(x);
        self.push(Op::ShiftRows { x, offset }, v, rg)
    }

    pub fn segment_mean(&mut self, x: Id, segs: &[(usize, usize)]) -> Id {
        let vx = self.value(x);
        let mut v = Mat::zeros(segs.len(), vx.cols());
        for (w, &(s, e)) in segs.iter().enumerate() {
            assert!(s < e && e <= vx.rows(), "bad segment ({s},{e})");
            let inv = 1.0 / (e - s) as f64;
            for i in s..e {
                let row = vx.row(i);
                let out = v.row_mut(w);
                for (o, &r) in out.iter_mut().zip(row.iter()) {
                    *o += r * inv;
                }
            }
        }
        let rg = self.needs(x);
        self.push(
            Op::SegmentMean {
                x,
                segs: segs.to_vec(),
            },
            v,
            rg,
        )
    }

    pub fn segment_broadcast(&mut self, x: Id, segs: &[(usize, usize)], n_rows: usize) -> Id {
        let vx = self.value(x);
        assert_eq!(vx.rows(), segs.len());
        let mut v = Mat::zeros(n_rows, vx.cols());
        for (w, &(s, e)) in segs.iter().enumerate() {
            assert!(s < e && e <= n_rows, "bad segment ({s},{e})");
            for i in s..e {
                v.row_mut(i).copy_from_slice(vx.row(w));
            }
        }
        let rg = self.needs(x);
        self.push(
            Op::SegmentBroadcast {
                x,
                segs: segs.to_vec(),
            },
            v,
            rg,
        )
    }

    pub fn gather_rows(&mut self, table: Id, idx: &[usize]) -> Id {
        let vt = self.value(table);
        let mut v = Mat::zeros(idx.len(), vt.cols());
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < vt.rows(), "gather index out of range");
            v.row_mut(i).copy_from_slice(vt.row(r));
        }
        let rg = self.needs(table);
        self.push(
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            v,
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let va = self.value(a);
        let mut v = Mat::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            softmax_into(va.row(i), v.row_mut(i));
        }
        let rg = self.needs(a);
        self.push(Op::SoftmaxRows(a), v, rg)
    }

    pub fn slice_cols(&mut self, x: Id, start: usize, len: usize) -> Id {
        let vx = self.value(x);
        assert!(start + len <= vx.cols());
        let v = Mat::from_fn(vx.rows(), len, |i, j| vx.get(i, start + j));
        let rg = self.needs(x);
        self.push(Op::SliceCols { x, start, len }, v, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows);
            for i in 0..rows {
                v.row_mut(i)[off..off + vp.cols()].copy_from_slice(vp.row(i));
            }
            off += vp.cols();
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, rg)
    }

    pub fn mean_sq(&mut self, x: Id, target: Id) -> Id {
        let (vx, vt) = (self.value(x), self.value(target));
        assert_eq!(vx.shape(), vt.shape(), "mean_sq shape mismatch");
        let n = vx.numel() as f64;
        let s: f64 = vx
            .data()
            .iter()
            .zip(vt.data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let v = Mat::from_vec(1, 1, vec![s / n]);
        let rg = self.needs(x) || self.needs(target);
        self.push(Op::MeanSq { x, target }, v, rg)
    }

    /// Sum of -log softmax(logits[row])[class] over the given (row, class) pairs.
    pub fn cross_entropy_sum(&mut self, logits: Id, targets: &[(usize, usize)]) -> Id {
        let vl = self.value(logits);
        let mut total = 0.0;
        for &(r, c) in targets {
            assert!(r < vl.rows() && c < vl.cols(), "target out of range");
            total += log_sum_exp(vl.row(r)) - vl.get(r, c);
        }
        let v = Mat::from_vec(1, 1, vec![total]);
        let rg = self.needs(logits);
        self.push(
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
            },
            v,
            rg,
        )
    }

    /// Backpropagate from a scalar loss node.
    pub fn backward(&self, loss: Id) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Mat::filled(1, 1, 1.0));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], id: Id, delta: Mat) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: Id, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, vb));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(va, g));
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a @ b^T; dA = g @ b; dB = g^T @ a
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul(g, vb));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, va));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.map(|x| x * c));
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.needs(*bias) {
                    let mut gb = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gb.set(0, j, gb.get(0, j) + g.get(i, j));
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(va.data().iter()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(va.data().iter()) {
                    *gv *= gelu_bwd(xv);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let cols = vx.cols();
                let mut gx = Mat::zeros(vx.rows(), cols);
                let mut ggain = Mat::zeros(1, cols);
                let mut gbias = Mat::zeros(1, cols);
                for i in 0..vx.rows() {
                    let row = vx.row(i);
                    let (mu, inv_std) = row_norm_stats(row);
                    // dxhat = g ⊙ gain; dx = inv_std (dxhat - mean(dxhat) - xhat mean(dxhat ⊙ xhat))
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..cols {
                        let xhat = (row[j] - mu) * inv_std;
                        let dxhat = g.get(i, j) * vg.get(0, j);
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        ggain.set(0, j, ggain.get(0, j) + g.get(i, j) * xhat);
                        gbias.set(0, j, gbias.get(0, j) + g.get(i, j));
                    }
                    mean_dxhat /= cols as f64;
                    mean_dxhat_xhat /= cols as f64;
                    for j in 0..cols {
                        let xhat = (row[j] - mu) * inv_std;
                        let dxhat = g.get(i, j) * vg.get(0, j);
                        gx.set(i, j, inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*gain) {
                    self.accumulate(grads, *gain, ggain);
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, gbias);
                }
            }
            Op::ShiftRows { x, offset } => {
                let vx = self.value(*x);
                let n = vx.rows() as isize;
                let mut gx = Mat::zeros(vx.rows(), vx.cols());
                for i in 0..n {
                    let src = i + offset;
                    if src >= 0 && src < n {
                        gx.row_mut(src as usize)
                            .iter_mut()
                            .zip(g.row(i as usize).iter())
                            .for_each(|(a, b)| *a += b);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentMean { x, segs } => {
                let vx = self.value(*x);
                let mut gx = Mat::zeros(vx.rows(), vx.cols());
                for (w, &(s, e)) in segs.iter().enumerate() {
                    let inv = 1.0 / (e - s) as f64;
                    for i in s..e {
                        gx.row_mut(i)
                            .iter_mut()
                            .zip(g.row(w).iter())
                            .for_each(|(a, b)| *a += b * inv);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentBroadcast { x, segs } => {
                let vx = self.value(*x);
                let mut gx = Mat::zeros(vx.rows(), vx.cols());
                for (w, &(s, e)) in segs.iter().enumerate() {
                    for i in s..e {
                        gx.row_mut(w)
                            .iter_mut()
                            .zip(g.row(i).iter())
                            .for_each(|(a, b)| *a += b);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { table, idx } => {
                let vt = self.value(*table);
                let mut gt = Mat::zeros(vt.rows(), vt.cols());
                for (i, &r) in idx.iter().enumerate() {
                    gt.row_mut(r)
                        .iter_mut()
                        .zip(g.row(i).iter())
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *table, gt);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = y
                        .row(i)
                        .iter()
                        .zip(g.row(i).iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in 0..y.cols() {
                        ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols { x, start, len } => {
                let vx = self.value(*x);
                let mut gx = Mat::zeros(vx.rows(), vx.cols());
                for i in 0..g.rows() {
                    for j in 0..*len {
                        gx.set(i, start + j, g.get(i, j));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let gp = Mat::from_fn(g.rows(), w, |i, j| g.get(i, off + j));
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::MeanSq { x, target } => {
                let (vx, vt) = (self.value(*x), self.value(*target));
                let scale = 2.0 / vx.numel() as f64 * g.scalar();
                if self.needs(*x) {
                    let gx = Mat::from_fn(vx.rows(), vx.cols(), |i, j| {
                        scale * (vx.get(i, j) - vt.get(i, j))
                    });
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*target) {
                    let gt = Mat::from_fn(vx.rows(), vx.cols(), |i, j| {
                        -scale * (vx.get(i, j) - vt.get(i, j))
                    });
                    self.accumulate(grads, *target, gt);
                }
            }
            Op::CrossEntropySum { logits, targets } => {
                let vl = self.value(*logits);
                let gs = g.scalar();
                let mut gl = Mat::zeros(vl.rows(), vl.cols());
                let mut probs = vec![0.0; vl.cols()];
                for &(r, c) in targets {
                    softmax_into(vl.row(r), &mut probs);
                    for j in 0..vl.cols() {
                        gl.set(r, j, gl.get(r, j) + gs * probs[j]);
                    }
                    gl.set(r, c, gl.get(r, c) - gs);
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

const GELU_C0: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}
