//! A small reverse-mode tape over dense matrices.
//!
//! Operations append nodes holding their forward value. `backward` walks the
//! tape in reverse, accumulating gradients into every node that depends on a
//! tracked leaf. Only the operations the denoiser needs are provided.

use std::sync::Arc;

use crate::linalg::Mat;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Directed edge list: `src[e]` receives a message from `dst[e]`.
#[derive(Clone, Debug)]
pub struct Edges {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl Edges {
    /// Flattens neighbour lists; each node's edges are contiguous.
    pub fn from_neighbors(nbrs: &[Vec<usize>]) -> Self {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (i, list) in nbrs.iter().enumerate() {
            for &j in list {
                src.push(i);
                dst.push(j);
            }
        }
        Self { src, dst }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Input,
    Param(usize),
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, S),
    Silu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Mat<S>, rstd: Vec<S> },
    GatherRows { a: Var, idx: Arc<Vec<usize>> },
    SegmentSum { a: Var, group: usize },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    EdgeDist { x: Var, edges: Arc<Edges>, eps: S },
    CoordUpdate { x: Var, fx: Var, edges: Arc<Edges>, movable_from: usize, clamp: S, raw: Mat<S> },
}

struct Node<S> {
    value: Mat<S>,
    op: Op<S>,
    tracked: bool,
}

/// Deliberate gradient corruption used to prove the gradient check is sensitive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradFault {
    #[default]
    None,
    /// Negates the gradient flowing into the coordinate-update weights.
    FlipCoordWeightSign,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<S> {
    grads: Vec<Option<Mat<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Mat<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<S>> {
        self.grads[v.0].take()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat<S>, op: Op<S>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Mat<S>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Trainable parameter identified by its store index.
    pub fn param(&mut self, index: usize, value: Mat<S>) -> Var {
        self.push(value, Op::Param(index), true)
    }

    /// Tracked non-parameter leaf (for example input coordinates).
    pub fn leaf(&mut self, value: Mat<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(v, Op::MatMulNT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(v, Op::Add(a, b), t)
    }

    /// Adds the `1 × m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1);
        assert_eq!(bias.cols(), self.value(a).cols());
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, &y) in v.row_mut(i).iter_mut().zip(bias.as_slice()) {
                *x += y;
            }
        }
        let t = self.tracked(&[a, b]);
        self.push(v, Op::AddRow(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.as_slice().iter().zip(y.as_slice()).map(|(&p, &q)| p * q).collect();
        let v = Mat::from_vec(x.rows(), x.cols(), data);
        let t = self.tracked(&[a, b]);
        self.push(v, Op::Mul(a, b), t)
    }

    /// Scales row `i` of `a` by the scalar `w[i]` (`w` is `n × 1`).
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let (x, col) = (self.value(a), self.value(w));
        assert_eq!(col.shape(), (x.rows(), 1));
        let mut v = x.clone();
        for i in 0..v.rows() {
            let s = col[(i, 0)];
            v.row_mut(i).iter_mut().for_each(|e| *e *= s);
        }
        let t = self.tracked(&[a, w]);
        self.push(v, Op::MulCol(a, w), t)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).scale(s);
        let t = self.tracked(&[a]);
        self.push(v, Op::Scale(a, s), t)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let t = self.tracked(&[a]);
        self.push(v, Op::Silu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let t = self.tracked(&[a]);
        self.push(v, Op::Sigmoid(a), t)
    }

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`
    /// and the remaining entries are exactly zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let width = if causal { (i + 1).min(x.cols()) } else { x.cols() };
            let row = &x.row(i)[..width];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let out = &mut v.row_mut(i)[..width];
            let mut z = S::zero();
            for (o, &r) in out.iter_mut().zip(row) {
                *o = (r - max).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::Softmax(a), t)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (`1 × d`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let x = self.value(a);
        let (n, d) = x.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Mat::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        let mut v = Mat::zeros(n, d);
        let dn = S::lit(d as f64);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&r| (r - mean) * (r - mean)).sum::<S>() / dn;
            let r = S::one() / (var + S::lit(LN_EPS)).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[(i, j)] = h;
                v[(i, j)] = g.as_slice()[j] * h + b.as_slice()[j];
            }
        }
        let t = self.tracked(&[a, gamma, beta]);
        self.push(v, Op::LayerNorm { a, gamma, beta, xhat, rstd }, t)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(idx.len(), x.cols());
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(x.row(i));
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::GatherRows { a, idx }, t)
    }

    /// Sums consecutive groups of `group` rows.
    pub fn segment_sum(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert!(group > 0 && x.rows() % group == 0);
        let mut v = Mat::zeros(x.rows() / group, x.cols());
        for r in 0..x.rows() {
            let dst = r / group;
            for (o, &e) in v.row_mut(dst).iter_mut().zip(x.row(r)) {
                *o += e;
            }
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::SegmentSum { a, group }, t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows);
                v.row_mut(i)[off..off + src.cols()].copy_from_slice(src.row(i));
                off += src.cols();
            }
        }
        let t = self.tracked(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows(), len);
        for i in 0..x.rows() {
            v.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::SliceCols { a, start }, t)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).select_rows(start, len);
        let t = self.tracked(&[a]);
        self.push(v, Op::SliceRows { a, start }, t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols);
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        let t = self.tracked(parts);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Mat::from_vec(rows, cols, self.value(a).as_slice().to_vec());
        let t = self.tracked(&[a]);
        self.push(v, Op::Reshape(a), t)
    }

    /// Edge lengths `‖x_src − x_dst‖ + eps` as an `E × 1` column.
    pub fn edge_dist(&mut self, x: Var, edges: Arc<Edges>, eps: S) -> Var {
        let pts = self.value(x);
        let data = edges
            .src
            .iter()
            .zip(&edges.dst)
            .map(|(&i, &j)| crate::knn::squared_distance(pts.row(i), pts.row(j)).sqrt() + eps)
            .collect();
        let v = Mat::from_vec(edges.len(), 1, data);
        let t = self.tracked(&[x]);
        self.push(v, Op::EdgeDist { x, edges, eps }, t)
    }

    /// `x_i ← x_i + clip(Σ_e (x_i − x_dst)·fx_e)` for rows `i ≥ movable_from`;
    /// the displacement norm is clipped at `clamp`.
    pub fn coord_update(&mut self, x: Var, fx: Var, edges: Arc<Edges>, movable_from: usize, clamp: S) -> Var {
        let pts = self.value(x);
        let w = self.value(fx);
        assert_eq!(w.shape(), (edges.len(), 1));
        let mut raw = Mat::zeros(pts.rows(), 3);
        for (e, (&i, &j)) in edges.src.iter().zip(&edges.dst).enumerate() {
            if i < movable_from {
                continue;
            }
            let f = w[(e, 0)];
            for a in 0..3 {
                raw[(i, a)] += (pts[(i, a)] - pts[(j, a)]) * f;
            }
        }
        let mut v = pts.clone();
        for i in movable_from..pts.rows() {
            let d = raw.row(i);
            let norm = d.iter().map(|&c| c * c).sum::<S>().sqrt();
            let s = if norm > clamp { clamp / norm } else { S::one() };
            for a in 0..3 {
                v[(i, a)] += d[a] * s;
            }
        }
        let t = self.tracked(&[x, fx]);
        self.push(v, Op::CoordUpdate { x, fx, edges, movable_from, clamp, raw }, t)
    }

    /// Reverse pass from the given output seeds.
    pub fn backward(&self, seeds: &[(Var, Mat<S>)], fault: GradFault) -> Gradients<S> {
        let mut grads: Vec<Option<Mat<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads, fault);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of all parameter leaves, keyed by store index.
    pub fn param_grads(&self, grads: &mut Gradients<S>) -> Vec<(usize, Mat<S>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => grads.grads[i].take().map(|g| (p, g)),
                _ => None,
            })
            .collect()
    }

    fn backprop_node(&self, node: &Node<S>, g: &Mat<S>, grads: &mut [Option<Mat<S>>], fault: GradFault) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Input | Op::Param(_) | Op::Leaf => {}
            Op::MatMul(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if tracked(*b) {
                    accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if tracked(*b) {
                    accumulate(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if tracked(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if tracked(*b) {
                    let mut db = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &e) in db.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *o += e;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if tracked(*a) {
                    let d = g.as_slice().iter().zip(y.as_slice()).map(|(&p, &q)| p * q).collect();
                    accumulate(grads, *a, Mat::from_vec(g.rows(), g.cols(), d));
                }
                if tracked(*b) {
                    let d = g.as_slice().iter().zip(x.as_slice()).map(|(&p, &q)| p * q).collect();
                    accumulate(grads, *b, Mat::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::MulCol(a, w) => {
                let (x, col) = (self.value(*a), self.value(*w));
                if tracked(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        let s = col[(i, 0)];
                        d.row_mut(i).iter_mut().for_each(|e| *e *= s);
                    }
                    accumulate(grads, *a, d);
                }
                if tracked(*w) {
                    let mut d = Mat::zeros(col.rows(), 1);
                    for i in 0..g.rows() {
                        d[(i, 0)] = g.row(i).iter().zip(x.row(i)).map(|(&p, &q)| p * q).sum();
                    }
                    accumulate(grads, *w, d);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = g
                    .as_slice()
                    .iter()
                    .zip(x.as_slice())
                    .map(|(&gg, &xx)| {
                        let s = sigmoid(xx);
                        gg * s * (S::one() + xx * (S::one() - s))
                    })
                    .collect();
                accumulate(grads, *a, Mat::from_vec(g.rows(), g.cols(), d));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g.as_slice().iter().zip(y.as_slice()).map(|(&gg, &yy)| gg * yy * (S::one() - yy)).collect();
                accumulate(grads, *a, Mat::from_vec(g.rows(), g.cols(), d));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: S = g.row(i).iter().zip(y.row(i)).map(|(&p, &q)| p * q).sum();
                    for j in 0..g.cols() {
                        d[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm { a, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma);
                let (n, dim) = g.shape();
                if tracked(*gamma) || tracked(*beta) {
                    let mut dg = Mat::zeros(1, dim);
                    let mut db = Mat::zeros(1, dim);
                    for i in 0..n {
                        for j in 0..dim {
                            dg[(0, j)] += g[(i, j)] * xhat[(i, j)];
                            db[(0, j)] += g[(i, j)];
                        }
                    }
                    if tracked(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if tracked(*beta) {
                        accumulate(grads, *beta, db);
                    }
                }
                if tracked(*a) {
                    let dn = S::lit(dim as f64);
                    let mut dx = Mat::zeros(n, dim);
                    for i in 0..n {
                        let dxhat: Vec<S> = (0..dim).map(|j| g[(i, j)] * gam.as_slice()[j]).collect();
                        let sum: S = dxhat.iter().copied().sum();
                        let dot: S = dxhat.iter().zip(xhat.row(i)).map(|(&p, &q)| p * q).sum();
                        for j in 0..dim {
                            dx[(i, j)] = rstd[i] / dn * (dn * dxhat[j] - sum - xhat[(i, j)] * dot);
                        }
                    }
                    accumulate(grads, *a, dx);
                }
            }
            Op::GatherRows { a, idx } => {
                let x = self.value(*a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &e) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += e;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SegmentSum { a, group } => {
                let x = self.value(*a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    d.row_mut(r).copy_from_slice(g.row(r / group));
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if tracked(p) {
                        let mut d = Mat::zeros(g.rows(), cols);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + cols]);
                        }
                        accumulate(grads, p, d);
                    }
                    off += cols;
                }
            }
            Op::SliceCols { a, start } => {
                let x = self.value(*a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, d);
            }
            Op::SliceRows { a, start } => {
                let x = self.value(*a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for i in 0..g.rows() {
                    d.row_mut(start + i).copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if tracked(p) {
                        accumulate(grads, p, g.select_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::Reshape(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, Mat::from_vec(x.rows(), x.cols(), g.as_slice().to_vec()));
            }
            Op::EdgeDist { x, edges, eps } => {
                let pts = self.value(*x);
                let mut d = Mat::zeros(pts.rows(), pts.cols());
                for (e, (&i, &j)) in edges.src.iter().zip(&edges.dst).enumerate() {
                    let len = node.value[(e, 0)] - *eps;
                    if len <= S::zero() {
                        continue;
                    }
                    let ge = g[(e, 0)] / len;
                    for a in 0..3 {
                        let u = (pts[(i, a)] - pts[(j, a)]) * ge;
                        d[(i, a)] += u;
                        d[(j, a)] -= u;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::CoordUpdate { x, fx, edges, movable_from, clamp, raw } => {
                let pts = self.value(*x);
                let w = self.value(*fx);
                // Gradient with respect to the (unclipped) displacement.
                let mut graw = Mat::zeros(pts.rows(), 3);
                for i in *movable_from..pts.rows() {
                    let r = raw.row(i);
                    let gi = g.row(i);
                    let norm = r.iter().map(|&c| c * c).sum::<S>().sqrt();
                    if norm > *clamp {
                        let unit: Vec<S> = r.iter().map(|&c| c / norm).collect();
                        let proj: S = unit.iter().zip(gi).map(|(&u, &q)| u * q).sum();
                        for a in 0..3 {
                            graw[(i, a)] = *clamp / norm * (gi[a] - unit[a] * proj);
                        }
                    } else {
                        graw.row_mut(i).copy_from_slice(gi);
                    }
                }
                let mut dx = g.clone();
                let mut dw = Mat::zeros(w.rows(), 1);
                for (e, (&i, &j)) in edges.src.iter().zip(&edges.dst).enumerate() {
                    if i < *movable_from {
                        continue;
                    }
                    let f = w[(e, 0)];
                    let mut acc = S::zero();
                    for a in 0..3 {
                        let gr = graw[(i, a)];
                        acc += gr * (pts[(i, a)] - pts[(j, a)]);
                        dx[(i, a)] += gr * f;
                        dx[(j, a)] -= gr * f;
                    }
                    dw[(e, 0)] = if fault == GradFault::FlipCoordWeightSign { -acc } else { acc };
                }
                if tracked(*x) {
                    accumulate(grads, *x, dx);
                }
                if tracked(*fx) {
                    accumulate(grads, *fx, dw);
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Mat<S>>], v: Var, g: Mat<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks every leaf gradient of `build` against central differences.
    fn check(leaves: Vec<Mat<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |vals: &[Mat<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(&leaves);
        let shape = tape.value(out).shape();
        let upstream = rand_mat(&mut rng, shape.0, shape.1);
        let grads = tape.backward(&[(out, upstream.clone())], GradFault::None);
        let loss = |vals: &[Mat<f64>]| {
            let (t, _, o) = eval(vals);
            t.value(o).as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        for (li, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Mat::zeros(leaves[li].rows(), leaves[li].cols()));
            for e in 0..leaves[li].as_slice().len() {
                let h = 1e-6;
                let mut up = leaves.clone();
                up[li].as_mut_slice()[e] += h;
                let mut dn = leaves.clone();
                dn[li].as_mut_slice()[e] -= h;
                let num = (loss(&up) - loss(&dn)) / (2.0 * h);
                let a = analytic.as_slice()[e];
                assert!((num - a).abs() < 1e-6 * (1.0 + num.abs()), "leaf {li} entry {e}: {a} vs {num}");
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let c = rand_mat(&mut rng, 3, 2);
        let bias = rand_mat(&mut rng, 1, 2);
        check(vec![a, b, c, bias], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[3]);
            let m = t.mul(m, v[2]);
            let s = t.silu(m);
            let q = t.sigmoid(s);
            let r = t.matmul_nt(q, v[2]);
            t.scale(r, 0.7)
        });
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 4, 4);
        let g = rand_mat(&mut rng, 1, 4);
        let b = rand_mat(&mut rng, 1, 4);
        check(vec![x.clone(), g, b], |t, v| {
            let n = t.layer_norm(v[0], v[1], v[2]);
            let p = t.softmax(n, true);
            let q = t.softmax(n, false);
            let s = t.add(p, q);
            t.matmul(s, v[0])
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 4, 3);
        let w = rand_mat(&mut rng, 4, 1);
        let idx = Arc::new(vec![2, 0, 2, 3, 1, 1, 0, 3]);
        check(vec![x, w], |t, v| {
            let g = t.gather_rows(v[0], idx.clone());
            let s = t.segment_sum(g, 2);
            let c = t.concat_cols(&[s, v[0]]);
            let sl = t.slice_cols(c, 1, 3);
            let r = t.slice_rows(sl, 1, 2);
            let cr = t.concat_rows(&[r, v[0]]);
            let rs = t.reshape(cr, 3, 6);
            let m = t.mul_col(v[0], v[1]);
            let z = t.reshape(m, 2, 6);
            t.concat_rows(&[rs, z])
        });
    }

    #[test]
    fn geometric_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 5, 3);
        let nbrs: Vec<Vec<usize>> = (0..5).map(|i| vec![(i + 1) % 5, (i + 3) % 5]).collect();
        let edges = Arc::new(Edges::from_neighbors(&nbrs));
        let w = rand_mat(&mut rng, edges.len(), 1);
        for clamp in [10.0, 0.05] {
            let edges = edges.clone();
            check(vec![x.clone(), w.clone()], move |t, v| {
                let d = t.edge_dist(v[0], edges.clone(), 1e-8);
                let f = t.mul(d, v[1]);
                t.coord_update(v[0], f, edges.clone(), 2, clamp)
            });
        }
    }

    #[test]
    fn causal_softmax_masks_exactly() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Mat::from_vec(3, 3, vec![1.0, 2.0, 3.0, 0.5, 0.1, 9.0, 0.0, 0.0, 0.0]));
        let p = tape.softmax(x, true);
        let v = tape.value(p);
        assert_eq!(v[(0, 0)], 1.0);
        assert_eq!(v[(0, 1)], 0.0);
        assert_eq!(v[(1, 2)], 0.0);
        for i in 0..3 {
            assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
