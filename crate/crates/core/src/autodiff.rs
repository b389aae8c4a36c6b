//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for nodes that
//! (transitively) depend on a leaf created with `requires_grad`.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, rstd: Vec<f64> },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Pick { sources: Vec<Var>, picks: Vec<(usize, usize)> },
    L2NormalizeRows(Var, Vec<f64>),
    NormalizeCols(Var, Vec<f64>),
    MeanRows(Var),
    Combine(Vec<(Var, f64)>),
    WeightedSqErr { pred: Var, target: Mat, weight: Mat, denom: f64 },
    BceLogits { logits: Var, target: Mat, weight: Mat, denom: f64 },
    SoftCrossEntropy { logits: Var, target: Mat, inv_temp: f64, probs: Mat },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; `None` for nodes outside the backward cone.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn add_into(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// `a + 1·row` with `row` of shape 1×n broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Builds a matrix whose row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    pub fn pick_rows(&mut self, sources: &[Var], picks: Vec<(usize, usize)>) -> Var {
        let cols = self.value(sources[0]).ncols();
        let mut v = Mat::zeros((picks.len(), cols));
        for (i, &(s, r)) in picks.iter().enumerate() {
            v.row_mut(i).assign(&self.value(sources[s]).row(r));
        }
        self.push(v, Op::Pick { sources: sources.to_vec(), picks }, sources)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        self.push(v, Op::L2NormalizeRows(a, norms), &[a])
    }

    pub fn normalize_cols(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.ncols());
        for mut col in v.columns_mut() {
            let n = col.dot(&col).sqrt().max(NORM_EPS);
            col.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        self.push(v, Op::NormalizeCols(a, norms), &[a])
    }

    /// Column-wise mean, 1×n.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a), &[a])
    }

    /// `Σ c_i · v_i` over same-shaped inputs.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut v = Mat::zeros(self.value(terms[0].0).dim());
        for &(t, c) in terms {
            v.scaled_add(c, self.value(t));
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(v, Op::Combine(terms.to_vec()), &inputs)
    }

    /// `Σ w·(pred − target)² / denom` as a 1×1 value.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Mat, weight: Mat, denom: f64) -> Var {
        let mut s = 0.0;
        Zip::from(self.value(pred)).and(&target).and(&weight).for_each(|p, t, w| {
            s += w * (p - t) * (p - t);
        });
        let v = Mat::from_elem((1, 1), s / denom);
        self.push(v, Op::WeightedSqErr { pred, target, weight, denom }, &[pred])
    }

    /// Weighted binary cross-entropy with logits, 1×1.
    pub fn bce_logits(&mut self, logits: Var, target: Mat, weight: Mat, denom: f64) -> Var {
        let mut s = 0.0;
        Zip::from(self.value(logits)).and(&target).and(&weight).for_each(|z, y, w| {
            s += w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
        });
        let v = Mat::from_elem((1, 1), s / denom);
        self.push(v, Op::BceLogits { logits, target, weight, denom }, &[logits])
    }

    /// Mean over rows of `−Σ_k target_k · log softmax(logits · inv_temp)_k`.
    /// `target` is treated as a constant distribution per row.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Mat, inv_temp: f64) -> Var {
        let scaled = self.value(logits) * inv_temp;
        let logp = log_softmax_rows(&scaled);
        let rows = scaled.nrows() as f64;
        let loss = -(&target * &logp).sum() / rows;
        let probs = logp.mapv(f64::exp);
        let v = Mat::from_elem((1, 1), loss);
        self.push(v, Op::SoftCrossEntropy { logits, target, inv_temp, probs }, &[logits])
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones(self.value(root).dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if self.wants(v) {
            add_into(&mut grads[v.0], g);
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.send(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    self.send(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    self.send(grads, *a, g.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    self.send(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::AddRow(a, r) => {
                self.send(grads, *a, g.clone());
                if self.wants(*r) {
                    self.send(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.send(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    self.send(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.send(grads, *a, g * *c),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                self.send(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                self.send(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * s);
                }
                self.send(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                if self.wants(*gamma) {
                    self.send(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*beta) {
                    self.send(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let dxhat = g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let m1 = dh.sum() / n;
                        let m2 = dh.dot(&xh) / n;
                        Zip::from(&mut row).and(&dh).and(&xh).for_each(|o, &d, &h| {
                            *o = rstd[r] * (d - m1 - h * m2);
                        });
                    }
                    self.send(grads, *x, dx);
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.send(grads, *a, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.wants(*p) {
                        self.send(grads, *p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::Pick { sources, picks } => {
                let mut ds: Vec<Option<Mat>> = sources
                    .iter()
                    .map(|s| self.wants(*s).then(|| Mat::zeros(self.value(*s).dim())))
                    .collect();
                for (i, &(si, r)) in picks.iter().enumerate() {
                    if let Some(d) = ds[si].as_mut() {
                        let mut row = d.row_mut(r);
                        row += &g.row(i);
                    }
                }
                for (s, d) in sources.iter().zip(ds) {
                    if let Some(d) = d {
                        self.send(grads, *s, d);
                    }
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = g.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let proj = row.dot(&yr);
                    Zip::from(&mut row).and(&yr).for_each(|dv, &yv| *dv = (*dv - yv * proj) / norms[r]);
                }
                self.send(grads, *a, d);
            }
            Op::NormalizeCols(a, norms) => {
                let y = &node.value;
                let mut d = g.clone();
                for (c, mut col) in d.columns_mut().into_iter().enumerate() {
                    let yc = y.column(c);
                    let proj = col.dot(&yc);
                    Zip::from(&mut col).and(&yc).for_each(|dv, &yv| *dv = (*dv - yv * proj) / norms[c]);
                }
                self.send(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).dim();
                let mut d = Mat::zeros((rows, cols));
                let gr = g.row(0).mapv(|v| v / rows as f64);
                for mut row in d.rows_mut() {
                    row.assign(&gr);
                }
                self.send(grads, *a, d);
            }
            Op::Combine(terms) => {
                for &(t, c) in terms {
                    self.send(grads, t, g * c);
                }
            }
            Op::WeightedSqErr { pred, target, weight, denom } => {
                let scale = 2.0 * g[[0, 0]] / denom;
                let mut d = self.value(*pred) - target;
                Zip::from(&mut d).and(weight).for_each(|d, &w| *d *= w * scale);
                self.send(grads, *pred, d);
            }
            Op::BceLogits { logits, target, weight, denom } => {
                let scale = g[[0, 0]] / denom;
                let mut d = self.value(*logits).mapv(sigmoid);
                Zip::from(&mut d).and(target).and(weight).for_each(|d, &y, &w| *d = (*d - y) * w * scale);
                self.send(grads, *logits, d);
            }
            Op::SoftCrossEntropy { logits, target, inv_temp, probs } => {
                let rows = probs.nrows() as f64;
                let scale = g[[0, 0]] * inv_temp / rows;
                let mut d = probs.clone();
                for (mut drow, trow) in d.rows_mut().into_iter().zip(target.rows()) {
                    let mass = trow.sum();
                    Zip::from(&mut drow).and(&trow).for_each(|dv, &t| *dv = (*dv * mass - t) * scale);
                }
                self.send(grads, *logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        let mut g = rng::stream(seed, &[]);
        Mat::from_shape_fn((r, c), |_| rng::normal(&mut g))
    }

    /// Checks d(sum(f · probe))/d(input) against central differences.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, input: Mat) {
        let probe_of = |shape: (usize, usize)| rand_mat(shape.0, shape.1, 999);
        let eval = |x: &Mat| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone(), true);
            let out = build(&mut g, v);
            let probe = probe_of(g.value(out).dim());
            (g.value(out) * &probe).sum()
        };
        let mut g = Graph::new();
        let v = g.leaf(input.clone(), true);
        let out = build(&mut g, v);
        let probe = g.constant(probe_of(g.value(out).dim()));
        let prod = g.mul(out, probe);
        let ones = g.constant(Mat::ones((1, g.value(prod).nrows())));
        let colsum = g.matmul(ones, prod);
        let ones_c = g.constant(Mat::ones((g.value(colsum).ncols(), 1)));
        let root = g.matmul(colsum, ones_c);
        let grads = g.backward(root);
        let analytic = grads.get(v).expect("input reached");
        let h = 1e-6;
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let mut xp = input.clone();
            xp[[r, c]] += h;
            let mut xm = input.clone();
            xm[[r, c]] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "({r},{c}) analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn grad_matmul_both_sides() {
        let w = rand_mat(4, 3, 1);
        check(|g, x| { let c = g.constant(w.clone()); g.matmul(x, c) }, rand_mat(2, 4, 2));
        let a = rand_mat(2, 4, 3);
        check(|g, x| { let c = g.constant(a.clone()); g.matmul(c, x) }, rand_mat(4, 3, 4));
        let b = rand_mat(5, 4, 5);
        check(|g, x| { let c = g.constant(b.clone()); g.matmul_nt(x, c) }, rand_mat(3, 4, 6));
        check(|g, x| { let c = g.constant(b.clone()); g.matmul_nt(c, x) }, rand_mat(3, 4, 7));
    }

    #[test]
    fn grad_elementwise() {
        check(|g, x| g.gelu(x), rand_mat(3, 4, 8));
        check(|g, x| g.relu(x), rand_mat(3, 4, 9).mapv(|v| v + 0.01 * v.signum()));
        check(|g, x| g.scale(x, -1.7), rand_mat(2, 2, 10));
        check(|g, x| g.mul(x, x), rand_mat(2, 3, 11));
        check(|g, x| g.add(x, x), rand_mat(2, 3, 11));
        let row = rand_mat(3, 4, 12);
        check(|g, x| { let a = g.constant(row.clone()); g.add_row(a, x) }, rand_mat(1, 4, 13));
    }

    #[test]
    fn grad_softmax_and_norms() {
        check(|g, x| g.softmax_rows(x), rand_mat(3, 5, 14));
        check(|g, x| g.l2_normalize_rows(x), rand_mat(3, 5, 15));
        check(|g, x| g.normalize_cols(x), rand_mat(4, 3, 16));
        check(|g, x| g.mean_rows(x), rand_mat(4, 3, 17));
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        let gamma = rand_mat(1, 6, 18);
        let beta = rand_mat(1, 6, 19);
        let x0 = rand_mat(3, 6, 20);
        check(
            |g, x| {
                let (a, b) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                g.layer_norm(x, a, b)
            },
            x0.clone(),
        );
        check(
            |g, gm| {
                let (x, b) = (g.constant(x0.clone()), g.constant(beta.clone()));
                g.layer_norm(x, gm, b)
            },
            gamma.clone(),
        );
        check(
            |g, bt| {
                let (x, a) = (g.constant(x0.clone()), g.constant(gamma.clone()));
                g.layer_norm(x, a, bt)
            },
            beta.clone(),
        );
    }

    #[test]
    fn grad_structural() {
        check(|g, x| g.slice_cols(x, 1, 2), rand_mat(3, 5, 21));
        check(
            |g, x| {
                let a = g.slice_cols(x, 0, 2);
                let b = g.slice_cols(x, 2, 3);
                g.concat_cols(&[b, a])
            },
            rand_mat(2, 5, 22),
        );
        let other = rand_mat(2, 3, 23);
        check(
            |g, x| {
                let o = g.constant(other.clone());
                g.pick_rows(&[x, o], vec![(0, 1), (1, 0), (0, 1), (0, 0)])
            },
            rand_mat(3, 3, 24),
        );
        check(|g, x| g.combine(&[(x, 0.3), (x, -2.0)]), rand_mat(2, 2, 25));
    }

    #[test]
    fn grad_losses() {
        let t = rand_mat(3, 4, 26);
        let w = rand_mat(3, 4, 27).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        check(|g, x| g.weighted_sq_err(x, t.clone(), w.clone(), 5.0), rand_mat(3, 4, 28));
        let y = t.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        check(|g, x| g.bce_logits(x, y.clone(), w.clone(), 7.0), rand_mat(3, 4, 29));
        let p = softmax_rows(&rand_mat(2, 5, 30));
        check(|g, x| g.soft_cross_entropy(x, p.clone(), 10.0), rand_mat(2, 5, 31));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(rand_mat(2, 2, 1));
        let b = g.leaf(rand_mat(2, 2, 2), true);
        let c = g.matmul(a, b);
        let root = g.weighted_sq_err(c, Mat::zeros((2, 2)), Mat::ones((2, 2)), 1.0);
        let grads = g.backward(root);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn bce_saturates() {
        let mut g = Graph::new();
        let z = g.leaf(Mat::from_shape_vec((1, 2), vec![12.0, -12.0]).unwrap(), true);
        let l = g.bce_logits(z, Mat::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap(), Mat::ones((1, 2)), 2.0);
        assert!(g.scalar(l) < 1e-3);
    }
}
