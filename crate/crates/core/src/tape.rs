//! A small reverse-mode autodiff tape over dense `f32` matrices.
//!
//! Nodes are appended in evaluation order, so the reverse pass is a single
//! backwards sweep. Parameters live in a [`ParamStore`]; a forward pass copies
//! the ones it touches onto the tape and [`Graph::backward`] returns gradients
//! keyed by [`ParamId`].

use std::rc::Rc;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::geometry;
use crate::latent;
use crate::losses;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f32) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn from_points(points: &[Vector3<f32>]) -> Self {
        let mut data = Vec::with_capacity(points.len() * 3);
        for p in points {
            data.extend_from_slice(&[p.x, p.y, p.z]);
        }
        Self::from_vec(points.len(), 3, data)
    }

    pub fn to_points(&self) -> Vec<Vector3<f32>> {
        assert_eq!(self.cols, 3);
        self.data
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// `out = beta * out + op(a) * op(b)` where `op` optionally transposes.
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out: &mut Tensor, beta: f32) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    assert_eq!((out.rows, out.cols), (m, n), "matmul output shape mismatch");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides and dimensions describe the owned buffers exactly.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(a, false, b, false, &mut out, 0.0);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform weight matrix.
    /// Weight matrix drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        self.add_uniform(name, fan_in, fan_out, 1.0 / (fan_in.max(1) as f32).sqrt(), rng)
    }

    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f32,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradients for the parameters that took part in a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, bool, Var, bool),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f32),
    LeakyRelu(Var, f32),
    Softplus(Var),
    Exp(Var),
    Ln(Var, f32),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    GroupMax(Var, Vec<u32>),
    ColMax(Var, Vec<u32>),
    SoftmaxRows(Var),
    Transpose(Var),
    RowNorm(Var),
    Sum(Var),
    EdgeMax {
        center: Var,
        neighbor: Var,
        edge: Option<Var>,
        slope: f32,
        /// Winning edge index `i*k + j` per output entry.
        arg: Vec<u32>,
        nbrs: Rc<Vec<usize>>,
    },
    RigidFit {
        source: Var,
        targets: Var,
        weights: Var,
    },
    RigidApply(Var, Var),
    Jsd(Var, Var),
    GumbelSt {
        logits: Var,
        soft: Vec<f64>,
        tau: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows, t.cols)
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v).data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.get(id).clone();
        self.push(t, Op::Leaf(Some(id)))
    }

    /// Same value as `v`, but the reverse pass stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols } else { av.rows };
        let n = if tb { bv.rows } else { bv.cols };
        let mut out = Tensor::zeros(m, n);
        gemm(av, ta, bv, tb, &mut out, 0.0);
        self.push(out, Op::MatMul(a, ta, b, tb))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "add_row shape mismatch");
        let mut out = av.clone();
        for chunk in out.data.chunks_exact_mut(av.cols) {
            for (o, r) in chunk.iter_mut().zip(&rv.data) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!((cv.rows, cv.cols), (av.rows, 1), "mul_col shape mismatch");
        let mut out = av.clone();
        for (chunk, c) in out.data.chunks_exact_mut(av.cols.max(1)).zip(&cv.data) {
            chunk.iter_mut().for_each(|o| *o *= c);
        }
        self.push(out, Op::MulCol(a, col))
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let av = self.value(a);
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|&x| f(x)).collect());
        self.push(out, op)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f32::exp, Op::Exp(a))
    }

    /// `ln(max(x, floor))`.
    pub fn ln(&mut self, a: Var, floor: f32) -> Var {
        self.map(a, |x| x.max(floor).ln(), Op::Ln(a, floor))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + pv.cols]
                    .copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice out of range");
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * av.cols..(r + 1) * av.cols].copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Repeats a `1×c` row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        self.gather_rows(row, Rc::new(vec![0; n]))
    }

    /// Max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows % group, 0, "group_max rows not divisible");
        let n = av.rows / group;
        let mut out = Tensor::zeros(n, av.cols);
        let mut arg = vec![0u32; n * av.cols];
        for g in 0..n {
            for c in 0..av.cols {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0;
                for j in 0..group {
                    let v = av.at(g * group + j, c);
                    if v > best {
                        best = v;
                        bi = j;
                    }
                }
                out.data[g * av.cols + c] = best;
                arg[g * av.cols + c] = (g * group + bi) as u32;
            }
        }
        self.push(out, Op::GroupMax(a, arg))
    }

    /// Column-wise max over all rows; `1×c`.
    pub fn col_max(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::from_vec(1, av.cols, vec![f32::NEG_INFINITY; av.cols]);
        let mut arg = vec![0u32; av.cols];
        for r in 0..av.rows {
            for c in 0..av.cols {
                let v = av.at(r, c);
                if v > out.data[c] {
                    out.data[c] = v;
                    arg[c] = r as u32;
                }
            }
        }
        self.push(out, Op::ColMax(a, arg))
    }

    /// Column means as a `1×C` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0;
        let avg = self.constant(Tensor::from_vec(1, n, vec![1.0 / n as f32; n]));
        self.matmul(avg, a)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for chunk in out.data.chunks_exact_mut(av.cols) {
            softmax_in_place(chunk);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.cols, av.rows);
        for r in 0..av.rows {
            for c in 0..av.cols {
                out.data[c * av.rows + r] = av.at(r, c);
            }
        }
        self.push(out, Op::Transpose(a))
    }

    /// Euclidean norm of each row; `n×1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows)
            .map(|r| av.row(r).iter().map(|v| v * v).sum::<f32>().sqrt())
            .collect();
        let out = Tensor::from_vec(av.rows, 1, data);
        self.push(out, Op::RowNorm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|&v| v as f64).sum::<f64>();
        self.push(Tensor::scalar(s as f32), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f32)
    }

    /// `out[i] = max_j act(center[i] + neighbor[nbrs[i*k + j]])` with a leaky
    /// ReLU activation: one fused edge-convolution layer.
    pub fn edge_max(&mut self, center: Var, neighbor: Var, nbrs: &[usize], k: usize, slope: f32) -> Var {
        self.edge_max_with(center, neighbor, None, nbrs, k, slope)
    }

    /// As [`Graph::edge_max`], plus a per-edge term `edge[i*k + j]` inside the
    /// activation.
    pub fn edge_max_with(
        &mut self,
        center: Var,
        neighbor: Var,
        edge: Option<Var>,
        nbrs: &[usize],
        k: usize,
        slope: f32,
    ) -> Var {
        let (cv, nv) = (self.value(center), self.value(neighbor));
        let ev = edge.map(|e| self.value(e));
        assert_eq!(cv.cols, nv.cols);
        assert_eq!(nbrs.len(), cv.rows * k);
        if let Some(ev) = ev {
            assert_eq!((ev.rows, ev.cols), (nbrs.len(), cv.cols), "edge term shape mismatch");
        }
        let cols = cv.cols;
        let mut out = Tensor::from_vec(cv.rows, cols, vec![f32::NEG_INFINITY; cv.rows * cols]);
        let mut arg = vec![0u32; cv.rows * cols];
        for i in 0..cv.rows {
            let ci = cv.row(i);
            let orow = &mut out.data[i * cols..(i + 1) * cols];
            let arow = &mut arg[i * cols..(i + 1) * cols];
            for (slot, &j) in nbrs[i * k..(i + 1) * k].iter().enumerate() {
                let nj = nv.row(j);
                let e = i * k + slot;
                for c in 0..cols {
                    let mut x = ci[c] + nj[c];
                    if let Some(ev) = ev {
                        x += ev.data[e * cols + c];
                    }
                    let y = if x > 0.0 { x } else { slope * x };
                    if y > orow[c] {
                        orow[c] = y;
                        arow[c] = e as u32;
                    }
                }
            }
        }
        self.push(
            out,
            Op::EdgeMax {
                center,
                neighbor,
                edge,
                slope,
                arg,
                nbrs: Rc::new(nbrs.to_vec()),
            },
        )
    }

    /// Weighted rigid fit of `source` (n×3) onto `targets` (n×3) with
    /// `weights` (n×1). The result is `1×12`: row-major rotation, translation.
    pub fn rigid_fit(&mut self, source: Var, targets: Var, weights: Var) -> Result<Var> {
        let s = to_f64_points(self.value(source));
        let t = to_f64_points(self.value(targets));
        let w: Vec<f64> = self.value(weights).data.iter().map(|&v| v as f64).collect();
        let fit = geometry::weighted_rigid_fit(&s, &t, &w)?;
        let out = Tensor::from_vec(1, 12, fit.to_array().iter().map(|&v| v as f32).collect());
        Ok(self.push(
            out,
            Op::RigidFit {
                source,
                targets,
                weights,
            },
        ))
    }

    /// Applies a `1×12` pose to every row of `points` (n×3).
    pub fn rigid_apply(&mut self, pose: Var, points: Var) -> Var {
        let (pv, xv) = (self.value(pose), self.value(points));
        let r = &pv.data[..9];
        let t = &pv.data[9..12];
        let mut out = Tensor::zeros(xv.rows, 3);
        for i in 0..xv.rows {
            let x = xv.row(i);
            for a in 0..3 {
                out.data[i * 3 + a] =
                    r[a * 3] * x[0] + r[a * 3 + 1] * x[1] + r[a * 3 + 2] * x[2] + t[a];
            }
        }
        self.push(out, Op::RigidApply(pose, points))
    }

    /// Jensen-Shannon divergence between two `1×n` probability rows.
    pub fn jsd(&mut self, q: Var, p: Var) -> Var {
        let qv: Vec<f64> = self.value(q).data.iter().map(|&v| v as f64).collect();
        let pv: Vec<f64> = self.value(p).data.iter().map(|&v| v as f64).collect();
        let v = losses::jsd_unchecked(&qv, &pv);
        self.push(Tensor::scalar(v as f32), Op::Jsd(q, p))
    }

    /// Gumbel-softmax over a `1×n` logit row with explicit noise. With `hard`
    /// the forward value is one-hot and the reverse pass uses the relaxed
    /// weights (straight-through).
    pub fn gumbel_softmax(&mut self, logits: Var, noise: &[f64], tau: f64, hard: bool) -> Var {
        let lv: Vec<f64> = self.value(logits).data.iter().map(|&v| v as f64).collect();
        let soft = latent::relaxed_weights(&lv, noise, tau);
        let value: Vec<f32> = if hard {
            let k = latent::argmax(&soft);
            (0..soft.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
        } else {
            soft.iter().map(|&v| v as f32).collect()
        };
        let out = Tensor::from_vec(1, value.len(), value);
        self.push(out, Op::GumbelSt { logits, soft, tau })
    }

    /// `mean + exp(0.5 * logvar) * eps` with fresh standard-normal `eps`.
    pub fn reparameterize<R: Rng + ?Sized>(&mut self, mean: Var, logvar: Var, rng: &mut R) -> Var {
        let (rows, cols) = self.shape(mean);
        let eps = Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                .collect(),
        );
        let eps = self.constant(eps);
        let half = self.scale(logvar, 0.5);
        let std = self.exp(half);
        let noise = self.mul(std, eps);
        self.add(mean, noise)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf(Some(id)) => out.accumulate(*id, &g),
                Op::Leaf(None) => {}
                Op::MatMul(a, ta, b, tb) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // C = op(A) op(B)
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    if *ta {
                        // A^T: dA = op(B) dC^T
                        gemm(bv, *tb, &g, true, &mut ga, 0.0);
                    } else {
                        gemm(&g, false, bv, !*tb, &mut ga, 0.0);
                    }
                    add_grad(&mut grads, *a, ga);
                    let mut gb = Tensor::zeros(bv.rows, bv.cols);
                    if *tb {
                        gemm(&g, true, av, *ta, &mut gb, 0.0);
                    } else {
                        gemm(av, !*ta, &g, false, &mut gb, 0.0);
                    }
                    add_grad(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, g.clone());
                    add_grad(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|v| -v).collect());
                    add_grad(&mut grads, *a, g);
                    add_grad(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = elementwise(&g, bv, |x, y| x * y);
                    let gb = elementwise(&g, av, |x, y| x * y);
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for chunk in g.data.chunks_exact(g.cols) {
                        for (o, v) in gr.data.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    add_grad(&mut grads, *row, gr);
                    add_grad(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let mut gc = Tensor::zeros(cv.rows, 1);
                    let mut ga = g.clone();
                    for r in 0..g.rows {
                        let mut acc = 0.0;
                        for c in 0..g.cols {
                            acc += g.at(r, c) * av.at(r, c);
                            ga.data[r * g.cols + c] *= cv.data[r];
                        }
                        gc.data[r] = acc;
                    }
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *col, gc);
                }
                Op::Scale(a, s) => {
                    let ga = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * s).collect());
                    add_grad(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let av = self.value(*a);
                    let ga = elementwise(&g, av, |gv, x| if x > 0.0 { gv } else { slope * gv });
                    add_grad(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let av = self.value(*a);
                    let ga = elementwise(&g, av, |gv, x| gv * sigmoid(x));
                    add_grad(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = elementwise(&g, &node.value, |gv, y| gv * y);
                    add_grad(&mut grads, *a, ga);
                }
                Op::Ln(a, floor) => {
                    let av = self.value(*a);
                    let ga = elementwise(&g, av, |gv, x| if x > *floor { gv / x } else { 0.0 });
                    add_grad(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let mut gp = Tensor::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.data[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        add_grad(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    for r in 0..g.rows {
                        ga.data[r * av.cols + start..r * av.cols + start + g.cols]
                            .copy_from_slice(g.row(r));
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..g.cols {
                            ga.data[i * av.cols + c] += g.data[r * g.cols + c];
                        }
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::GroupMax(a, arg) | Op::ColMax(a, arg) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    for (o, &src_row) in arg.iter().enumerate() {
                        let c = o % g.cols;
                        ga.data[src_row as usize * av.cols + c] += g.data[o];
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    let mut ga = Tensor::zeros(g.cols, g.rows);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[c * g.rows + r] = g.at(r, c);
                        }
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::RowNorm(a) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        let n = node.value.data[r];
                        if n > 0.0 {
                            for c in 0..av.cols {
                                ga.data[r * av.cols + c] = g.data[r] * av.at(r, c) / n;
                            }
                        }
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let ga = Tensor::from_vec(av.rows, av.cols, vec![g.data[0]; av.len()]);
                    add_grad(&mut grads, *a, ga);
                }
                Op::EdgeMax {
                    center,
                    neighbor,
                    edge,
                    slope,
                    arg,
                    nbrs,
                } => {
                    let (cv, nv) = (self.value(*center), self.value(*neighbor));
                    let cols = cv.cols;
                    let mut gc = Tensor::zeros(cv.rows, cols);
                    let mut gn = Tensor::zeros(nv.rows, cols);
                    let mut ge = edge.map(|_| Tensor::zeros(nbrs.len(), cols));
                    for i in 0..cv.rows {
                        for c in 0..cols {
                            let o = i * cols + c;
                            let d = if node.value.data[o] > 0.0 { g.data[o] } else { slope * g.data[o] };
                            let e = arg[o] as usize;
                            gc.data[o] += d;
                            gn.data[nbrs[e] * cols + c] += d;
                            if let Some(ge) = ge.as_mut() {
                                ge.data[e * cols + c] += d;
                            }
                        }
                    }
                    add_grad(&mut grads, *center, gc);
                    add_grad(&mut grads, *neighbor, gn);
                    if let (Some(e), Some(ge)) = (edge, ge) {
                        add_grad(&mut grads, *e, ge);
                    }
                }
                Op::RigidFit {
                    source,
                    targets,
                    weights,
                } => {
                    let s = to_f64_points(self.value(*source));
                    let t = to_f64_points(self.value(*targets));
                    let w: Vec<f64> = self.value(*weights).data.iter().map(|&v| v as f64).collect();
                    let gr: [f64; 9] = std::array::from_fn(|i| g.data[i] as f64);
                    let gt = Vector3::new(g.data[9] as f64, g.data[10] as f64, g.data[11] as f64);
                    let vjp = geometry::weighted_rigid_fit_vjp(&s, &t, &w, &gr, &gt);
                    add_grad(&mut grads, *source, from_f64_points(&vjp.source));
                    add_grad(&mut grads, *targets, from_f64_points(&vjp.targets));
                    let gw = vjp.weights.iter().map(|&v| v as f32).collect();
                    add_grad(&mut grads, *weights, Tensor::from_vec(w.len(), 1, gw));
                }
                Op::RigidApply(pose, points) => {
                    let (pv, xv) = (self.value(*pose), self.value(*points));
                    let r = &pv.data[..9];
                    let mut gp = Tensor::zeros(1, 12);
                    let mut gx = Tensor::zeros(xv.rows, 3);
                    for i in 0..xv.rows {
                        let x = xv.row(i);
                        let gi = g.row(i);
                        for a in 0..3 {
                            for b in 0..3 {
                                gp.data[a * 3 + b] += gi[a] * x[b];
                                gx.data[i * 3 + b] += gi[a] * r[a * 3 + b];
                            }
                            gp.data[9 + a] += gi[a];
                        }
                    }
                    add_grad(&mut grads, *pose, gp);
                    add_grad(&mut grads, *points, gx);
                }
                Op::Jsd(q, p) => {
                    let qv: Vec<f64> = self.value(*q).data.iter().map(|&v| v as f64).collect();
                    let pv: Vec<f64> = self.value(*p).data.iter().map(|&v| v as f64).collect();
                    let (dq, dp) = losses::jsd_gradients(&qv, &pv);
                    let s = g.data[0];
                    let to_t = |d: Vec<f64>| {
                        Tensor::from_vec(1, d.len(), d.iter().map(|&v| v as f32 * s).collect())
                    };
                    add_grad(&mut grads, *q, to_t(dq));
                    add_grad(&mut grads, *p, to_t(dp));
                }
                Op::GumbelSt { logits, soft, tau } => {
                    let gv: Vec<f64> = g.data.iter().map(|&v| v as f64).collect();
                    let gl = latent::relaxed_weights_vjp(soft, *tau, &gv);
                    let gl = Tensor::from_vec(1, gl.len(), gl.iter().map(|&v| v as f32).collect());
                    add_grad(&mut grads, *logits, gl);
                }
            }
        }
        out
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn to_f64_points(t: &Tensor) -> Vec<Vector3<f64>> {
    t.data
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect()
}

fn from_f64_points(p: &[Vector3<f64>]) -> Tensor {
    Tensor::from_vec(
        p.len(),
        3,
        p.iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect(),
    )
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let m = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(param) for every scalar of one
    /// parameter, with the forward pass given as a closure.
    fn check_param(
        store: &mut ParamStore,
        id: ParamId,
        f: &dyn Fn(&mut Graph) -> Var,
        tol: f64,
    ) {
        let analytic = {
            let mut g = Graph::new(store);
            let l = f(&mut g);
            g.backward(l).get(id).cloned().unwrap_or_else(|| {
                let t = store.get(id);
                Tensor::zeros(t.rows, t.cols)
            })
        };
        let h = 1e-2f32;
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + h;
            let up = {
                let mut g = Graph::new(store);
                let l = f(&mut g);
                g.scalar(l) as f64
            };
            store.get_mut(id).data[i] = orig - h;
            let down = {
                let mut g = Graph::new(store);
                let l = f(&mut g);
                g.scalar(l) as f64
            };
            store.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            let a = analytic.data[i] as f64;
            assert!(
                (a - numeric).abs() <= tol * (1.0 + numeric.abs()),
                "param {} [{i}]: analytic {a} vs numeric {numeric}",
                store.name(id)
            );
        }
    }

    #[test]
    fn matmul_variants_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = store.add("a", random_tensor(&mut rng, 3, 4));
        let b = store.add("b", random_tensor(&mut rng, 4, 2));
        let bt = store.add("bt", random_tensor(&mut rng, 2, 4));
        let f = move |g: &mut Graph| {
            let av = g.param(a);
            let bv = g.param(b);
            let btv = g.param(bt);
            let c = g.matmul(av, bv);
            let d = g.matmul_t(av, false, btv, true);
            let e = g.matmul_t(av, true, av, false);
            let cd = g.mul(c, d);
            let s1 = g.sum(cd);
            let s2 = g.sum(e);
            let s2 = g.scale(s2, 0.1);
            g.add(s1, s2)
        };
        for id in [a, b, bt] {
            check_param(&mut store, id, &f, 2e-3);
        }
    }

    #[test]
    fn elementwise_and_reduction_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, 5, 3));
        let row = store.add("row", random_tensor(&mut rng, 1, 3));
        let col = store.add("col", random_tensor(&mut rng, 5, 1));
        let f = move |g: &mut Graph| {
            let xv = g.param(x);
            let rv = g.param(row);
            let cv = g.param(col);
            let a = g.add_row(xv, rv);
            let a = g.leaky_relu(a, 0.2);
            let b = g.mul_col(a, cv);
            let sp = g.softplus(b);
            let ex = g.exp(sp);
            let lnv = g.ln(ex, 1e-6);
            let cat = g.concat_cols(&[lnv, xv]);
            let sl = g.slice_cols(cat, 1, 4);
            let sm = g.softmax_rows(sl);
            let tr = g.transpose(sm);
            let nrm = g.row_norm(tr);
            let gm = g.group_max(xv, 5);
            let cm = g.col_max(b);
            let s1 = g.sum(nrm);
            let s2 = g.sum(gm);
            let s3 = g.mean(cm);
            let t = g.add(s1, s2);
            let idx = Rc::new(vec![0, 2, 2, 4]);
            let gr = g.gather_rows(a, idx);
            let s4 = g.sum(gr);
            let t = g.add(t, s4);
            g.add(t, s3)
        };
        for id in [x, row, col] {
            check_param(&mut store, id, &f, 5e-3);
        }
    }

    #[test]
    fn edge_max_matches_unfused_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let c = store.add("c", random_tensor(&mut rng, 4, 3));
        let n = store.add("n", random_tensor(&mut rng, 4, 3));
        let nbrs = Rc::new(vec![0, 1, 1, 2, 2, 3, 3, 0]);
        let fused = {
            let nbrs = nbrs.clone();
            move |g: &mut Graph| {
                let cv = g.param(c);
                let nv = g.param(n);
                let e = g.edge_max(cv, nv, &nbrs, 2, 0.2);
                let sq = g.mul(e, e);
                g.sum(sq)
            }
        };
        let unfused = {
            let nbrs = nbrs.clone();
            move |g: &mut Graph| {
                let cv = g.param(c);
                let nv = g.param(n);
                let rep = g.gather_rows(cv, Rc::new(vec![0, 0, 1, 1, 2, 2, 3, 3]));
                let nb = g.gather_rows(nv, nbrs.clone());
                let s = g.add(rep, nb);
                let s = g.leaky_relu(s, 0.2);
                let e = g.group_max(s, 2);
                let sq = g.mul(e, e);
                g.sum(sq)
            }
        };
        let (va, ga) = {
            let mut g = Graph::new(&store);
            let l = fused(&mut g);
            (g.scalar(l), g.backward(l))
        };
        let (vb, gb) = {
            let mut g = Graph::new(&store);
            let l = unfused(&mut g);
            (g.scalar(l), g.backward(l))
        };
        assert!((va - vb).abs() < 1e-6);
        for id in [c, n] {
            let (x, y) = (ga.get(id).unwrap(), gb.get(id).unwrap());
            for (p, q) in x.data.iter().zip(&y.data) {
                assert!((p - q).abs() < 1e-5);
            }
        }
        check_param(&mut store, c, &fused, 5e-3);
    }

    #[test]
    fn edge_term_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let c = store.add("c", random_tensor(&mut rng, 3, 2));
        let n = store.add("n", random_tensor(&mut rng, 3, 2));
        let e = store.add("e", random_tensor(&mut rng, 6, 2));
        let nbrs = vec![0, 1, 1, 2, 2, 0];
        let f = move |g: &mut Graph| {
            let cv = g.param(c);
            let nv = g.param(n);
            let ev = g.param(e);
            let out = g.edge_max_with(cv, nv, Some(ev), &nbrs, 2, 0.2);
            let sq = g.mul(out, out);
            g.sum(sq)
        };
        for id in [c, n, e] {
            check_param(&mut store, id, &f, 5e-3);
        }
    }

    #[test]
    fn rigid_fit_and_apply_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let src = store.add("src", random_tensor(&mut rng, 8, 3));
        let tgt = store.add("tgt", random_tensor(&mut rng, 8, 3));
        let w = store.add(
            "w",
            Tensor::from_vec(8, 1, (0..8).map(|_| rng.gen_range(0.5..1.5)).collect()),
        );
        let goal = random_tensor(&mut rng, 8, 3);
        let f = move |g: &mut Graph| {
            let s = g.param(src);
            let t = g.param(tgt);
            let wv = g.param(w);
            let pose = g.rigid_fit(s, t, wv).unwrap();
            let moved = g.rigid_apply(pose, s);
            let goal = g.constant(goal.clone());
            let d = g.sub(moved, goal);
            let n = g.row_norm(d);
            g.mean(n)
        };
        for id in [src, tgt, w] {
            check_param(&mut store, id, &f, 2e-2);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let d = g.detach(xv);
        let s = g.sum(d);
        let grads = g.backward(s);
        assert!(grads.get(x).is_none());
    }
}
