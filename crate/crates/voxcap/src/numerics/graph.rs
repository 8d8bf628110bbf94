//! Tape-based reverse-mode automatic differentiation over `Tensor` values.
//!
//! A `Graph` records eager (define-by-run) operations; `backward` or
//! `backward_seeded` replays the tape in reverse and accumulates gradients for
//! every node that requires them. Matrices are row-major rank-2 tensors;
//! vectors are rank-1; scalars are shape `[1]`.

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    requires_grad: bool,
    back: Option<Box<dyn Backward>>,
}

/// Per-node gradient accumulator produced by a backward pass.
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.axpy(&g, 1.0),
            slot => *slot = Some(g),
        }
    }
}

trait Backward {
    fn apply(&self, out_grad: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()>;
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input node. Gradients are collected for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires: bool, back: Option<Box<dyn Backward>>) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad: requires,
            back: if requires { back } else { None },
        });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                format!("{op}: matching shapes {:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, req, Some(Box::new(AddBack { a, b }))))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let mut v = self.value(a).clone();
        v.axpy(self.value(b), -1.0);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, req, Some(Box::new(SubBack { a, b }))))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let vb = self.value(b).clone();
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(vb.data().iter()) {
            *x *= y;
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, req, Some(Box::new(MulBack { a, b }))))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(SquareBack { a }))))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::abs);
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(AbsBack { a }))))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        let req = self.requires(a);
        let id = self.push(v, req, None);
        self.nodes[id.0].back = if req {
            Some(Box::new(ExpBack { a, out: id }))
        } else {
            None
        };
        Ok(id)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let req = self.requires(a);
        let id = self.push(v, req, None);
        self.nodes[id.0].back = if req {
            Some(Box::new(SigmoidBack { a, out: id }))
        } else {
            None
        };
        Ok(id)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(gelu_tanh);
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(GeluBack { a }))))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.value(a).scale(k);
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(ScaleBack { a, k }))))
    }

    /// Multiplies every element of `a` by the scalar node `s` (shape `[1]`).
    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("[1] scalar node", format!("{:?}", self.value(s).shape())));
        }
        let sv = self.value(s).item();
        let v = self.value(a).scale(sv);
        let req = self.requires(a) || self.requires(s);
        Ok(self.push(v, req, Some(Box::new(MulScalarNodeBack { a, s }))))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, req, Some(Box::new(MatmulBack { a, b }))))
    }

    /// `a` is `[m,n]`, `bias` is `[n]`; adds the bias to every row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(Error::shape(format!("[{n}] bias"), format!("{:?}", self.value(bias).shape())));
        }
        let bd = self.value(bias).clone();
        let mut v = self.value(a).clone();
        {
            let vd = v.data_mut();
            for i in 0..m {
                for (x, y) in vd[i * n..(i + 1) * n].iter_mut().zip(bd.data().iter()) {
                    *x += y;
                }
            }
        }
        let req = self.requires(a) || self.requires(bias);
        Ok(self.push(v, req, Some(Box::new(AddBiasBack { a, bias }))))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = transpose_val(self.value(a))?;
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(TransposeBack { a }))))
    }

    // ---- row/column structure ----

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if start >= end || end > m {
            return Err(Error::validation(format!(
                "slice_rows {start}..{end} out of range for {m} rows"
            )));
        }
        let v = Tensor::from_vec(&[end - start, n], self.value(a).data()[start * n..end * n].to_vec())?;
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(SliceRowsBack { a, start }))))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if start >= end || end > n {
            return Err(Error::validation(format!(
                "slice_cols {start}..{end} out of range for {n} cols"
            )));
        }
        let w = end - start;
        let mut out = vec![0.0; m * w];
        let d = self.value(a).data();
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&d[i * n + start..i * n + end]);
        }
        let v = Tensor::from_vec(&[m, w], out)?;
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(SliceColsBack { a, start }))))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::validation("concat_rows of zero parts"));
        }
        let (_, n) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::shape(format!("[_, {n}]"), format!("[{pm}, {pn}]")));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(&[rows, n], data)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(v, req, Some(Box::new(ConcatRowsBack { parts: parts.to_vec() }))))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::validation("concat_cols of zero parts"));
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.value(p).dims2().map(|(_, w)| w))
            .collect::<Result<_>>()?;
        for &p in parts {
            let (pm, _) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::shape(format!("[{m}, _]"), format!("[{pm}, _]")));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let d = self.value(p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let v = Tensor::from_vec(&[m, total], out)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(v, req, Some(Box::new(ConcatColsBack { parts: parts.to_vec() }))))
    }

    // ---- reductions ----

    /// `[m,n] -> [1,n]`: mean over rows (mean pooling over a token axis).
    pub fn mean_pool_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += d[i * n + j];
            }
        }
        for v in out.iter_mut() {
            *v /= m as f64;
        }
        let v = Tensor::from_vec(&[1, n], out)?;
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(MeanPoolRowsBack { a }))))
    }

    /// `[m,n] -> [m]`: per-row sum.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let out: Vec<f64> = (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        let v = Tensor::from_vec(&[m], out)?;
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(SumRowsBack { a }))))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(SumAllBack { a, mean: false }))))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let len = self.value(a).len();
        if len == 0 {
            return Err(Error::validation("mean_all of an empty tensor"));
        }
        let v = Tensor::scalar(self.value(a).sum() / len as f64);
        let req = self.requires(a);
        Ok(self.push(v, req, Some(Box::new(SumAllBack { a, mean: true }))))
    }

    // ---- normalization / attention pieces ----

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = softmax_rows_val(self.value(a))?;
        let req = self.requires(a);
        let id = self.push(v, req, None);
        self.nodes[id.0].back = if req {
            Some(Box::new(SoftmaxRowsBack { a, out: id }))
        } else {
            None
        };
        Ok(id)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let v = Tensor::from_vec(&[m, n], out)?;
        let req = self.requires(a);
        let id = self.push(v, req, None);
        self.nodes[id.0].back = if req {
            Some(Box::new(LogSoftmaxRowsBack { a, out: id }))
        } else {
            None
        };
        Ok(id)
    }

    /// Row-wise layer norm over `[m,n]` with per-feature `gamma`/`beta` of `[n]`.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(Error::shape(
                format!("gamma/beta of [{n}]"),
                format!(
                    "{:?} / {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let d = self.value(a).data();
        let gd = self.value(gamma).clone();
        let bd = self.value(beta).clone();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mu) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * gd.data()[j] + bd.data()[j];
            }
        }
        let v = Tensor::from_vec(&[m, n], out)?;
        let req = self.requires(a) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            v,
            req,
            Some(Box::new(LayerNormBack {
                a,
                gamma,
                beta,
                xhat: Tensor::from_vec(&[m, n], xhat)?,
                inv_std: Tensor::from_vec(&[m], inv_std)?,
            })),
        ))
    }

    /// Normalizes each row of `[m,n]` to unit L2 norm; zero rows are an error.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut inv_norms = vec![0.0; m];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(format!(
                    "l2_normalize_rows: row {i} has zero norm"
                )));
            }
            inv_norms[i] = 1.0 / norm;
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let v = Tensor::from_vec(&[m, n], out)?;
        let req = self.requires(a);
        let id = self.push(v, req, None);
        self.nodes[id.0].back = if req {
            Some(Box::new(L2NormRowsBack {
                a,
                out: id,
                inv_norms: Tensor::from_vec(&[m], inv_norms)?,
            }))
        } else {
            None
        };
        Ok(id)
    }

    // ---- gathers ----

    /// Embedding-style lookup: `table[idx[i], :]` stacked into `[len(idx), n]`.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(table).dims2()?;
        if idx.is_empty() {
            return Err(Error::validation("gather_rows with empty index list"));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::validation(format!(
                    "gather_rows index {i} out of range for {m} rows"
                )));
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let v = Tensor::from_vec(&[idx.len(), n], out)?;
        let req = self.requires(table);
        Ok(self.push(
            v,
            req,
            Some(Box::new(GatherRowsBack {
                table,
                idx: idx.to_vec(),
            })),
        ))
    }

    /// Picks one element per row: `out[i] = a[i, cols[i]]`, shape `[m]`.
    pub fn pick_per_row(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if cols.len() != m {
            return Err(Error::shape(format!("{m} column picks"), format!("{}", cols.len())));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(Error::validation(format!(
                    "pick_per_row column {c} out of range for {n} cols"
                )));
            }
            out.push(d[i * n + c]);
        }
        let v = Tensor::from_vec(&[m], out)?;
        let req = self.requires(a);
        Ok(self.push(
            v,
            req,
            Some(Box::new(PickPerRowBack {
                a,
                cols: cols.to_vec(),
            })),
        ))
    }

    /// Gathers arbitrary flat offsets of `src` into a tensor of `out_shape`
    /// (the im2col workhorse). Offsets may repeat; backward scatter-adds.
    pub fn gather_flat(&mut self, src: NodeId, offsets: &[usize], out_shape: &[usize]) -> Result<NodeId> {
        let n: usize = out_shape.iter().product();
        if n != offsets.len() {
            return Err(Error::shape(
                format!("{n} offsets for {out_shape:?}"),
                format!("{}", offsets.len()),
            ));
        }
        let d = self.value(src).data();
        let mut out = Vec::with_capacity(n);
        for &o in offsets {
            if o >= d.len() {
                return Err(Error::validation(format!(
                    "gather_flat offset {o} out of range for {} elements",
                    d.len()
                )));
            }
            out.push(d[o]);
        }
        let v = Tensor::from_vec(out_shape, out)?;
        let req = self.requires(src);
        Ok(self.push(
            v,
            req,
            Some(Box::new(GatherFlatBack {
                src,
                offsets: offsets.to_vec(),
            })),
        ))
    }

    // ---- loss-specific ----

    /// Entropy-separation penalty applied elementwise to a vector of entropies:
    /// `f(h) = -|h - rho|` when `|h - rho| > margin`, else `0`.
    pub fn es_penalty(&mut self, h: NodeId, rho: f64, margin: f64) -> Result<NodeId> {
        if margin < 0.0 {
            return Err(Error::validation(format!("negative ES margin {margin}")));
        }
        let v = self.value(h).map(|x| {
            let d = x - rho;
            if d.abs() > margin {
                -d.abs()
            } else {
                0.0
            }
        });
        let req = self.requires(h);
        Ok(self.push(v, req, Some(Box::new(EsPenaltyBack { h, rho, margin }))))
    }

    // ---- backward ----

    /// Backward from a scalar root with seed 1.
    pub fn backward(&self, root: NodeId) -> Result<GradStore> {
        if self.value(root).len() != 1 {
            return Err(Error::validation(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_seeded(vec![(root, seed)])
    }

    /// Backward pass with explicit output gradients injected at `seeds`.
    /// Seeds at multiple nodes accumulate, which is what stitched multi-graph
    /// training steps rely on.
    pub fn backward_seeded(&self, seeds: Vec<(NodeId, Tensor)>) -> Result<GradStore> {
        if seeds.is_empty() {
            return Err(Error::validation("backward with no seeds"));
        }
        let mut grads = GradStore::new(self.nodes.len());
        for (id, seed) in seeds {
            if id.0 >= self.nodes.len() {
                return Err(Error::validation("backward seed for unknown node"));
            }
            if seed.shape() != self.value(id).shape() {
                return Err(Error::shape(
                    format!("seed of {:?}", self.value(id).shape()),
                    format!("{:?}", seed.shape()),
                ));
            }
            seed.ensure_finite("backward seed")?;
            grads.accumulate(id, seed);
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads.grads[i].clone() else {
                continue;
            };
            if let Some(back) = &self.nodes[i].back {
                back.apply(&g, self, &mut grads)?;
            }
        }
        Ok(grads)
    }
}

fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn transpose_val(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

pub(crate) fn softmax_rows_val(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &d[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out[i * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out[i * n + j] /= sum;
        }
    }
    Tensor::from_vec(&[m, n], out)
}

// ---- backward impls ----

struct AddBack {
    a: NodeId,
    b: NodeId,
}

impl Backward for AddBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        if g.requires(self.a) {
            grads.accumulate(self.a, og.clone());
        }
        if g.requires(self.b) {
            grads.accumulate(self.b, og.clone());
        }
        Ok(())
    }
}

struct SubBack {
    a: NodeId,
    b: NodeId,
}

impl Backward for SubBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        if g.requires(self.a) {
            grads.accumulate(self.a, og.clone());
        }
        if g.requires(self.b) {
            grads.accumulate(self.b, og.scale(-1.0));
        }
        Ok(())
    }
}

struct MulBack {
    a: NodeId,
    b: NodeId,
}

impl Backward for MulBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        if g.requires(self.a) {
            let mut ga = og.clone();
            for (x, y) in ga.data_mut().iter_mut().zip(g.value(self.b).data().iter()) {
                *x *= y;
            }
            grads.accumulate(self.a, ga);
        }
        if g.requires(self.b) {
            let mut gb = og.clone();
            for (x, y) in gb.data_mut().iter_mut().zip(g.value(self.a).data().iter()) {
                *x *= y;
            }
            grads.accumulate(self.b, gb);
        }
        Ok(())
    }
}

struct SquareBack {
    a: NodeId,
}

impl Backward for SquareBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let mut ga = og.clone();
        for (x, y) in ga.data_mut().iter_mut().zip(g.value(self.a).data().iter()) {
            *x *= 2.0 * y;
        }
        grads.accumulate(self.a, ga);
        Ok(())
    }
}

struct AbsBack {
    a: NodeId,
}

impl Backward for AbsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let mut ga = og.clone();
        for (x, y) in ga.data_mut().iter_mut().zip(g.value(self.a).data().iter()) {
            *x *= if *y > 0.0 {
                1.0
            } else if *y < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        grads.accumulate(self.a, ga);
        Ok(())
    }
}

struct ExpBack {
    a: NodeId,
    out: NodeId,
}

impl Backward for ExpBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let mut ga = og.clone();
        for (x, y) in ga.data_mut().iter_mut().zip(g.value(self.out).data().iter()) {
            *x *= y;
        }
        grads.accumulate(self.a, ga);
        Ok(())
    }
}

struct SigmoidBack {
    a: NodeId,
    out: NodeId,
}

impl Backward for SigmoidBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let mut ga = og.clone();
        for (x, s) in ga.data_mut().iter_mut().zip(g.value(self.out).data().iter()) {
            *x *= s * (1.0 - s);
        }
        grads.accumulate(self.a, ga);
        Ok(())
    }
}

struct GeluBack {
    a: NodeId,
}

impl Backward for GeluBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let mut ga = og.clone();
        for (x, y) in ga.data_mut().iter_mut().zip(g.value(self.a).data().iter()) {
            *x *= gelu_tanh_deriv(*y);
        }
        grads.accumulate(self.a, ga);
        Ok(())
    }
}

struct ScaleBack {
    a: NodeId,
    k: f64,
}

impl Backward for ScaleBack {
    fn apply(&self, og: &Tensor, _g: &Graph, grads: &mut GradStore) -> Result<()> {
        grads.accumulate(self.a, og.scale(self.k));
        Ok(())
    }
}

struct MulScalarNodeBack {
    a: NodeId,
    s: NodeId,
}

impl Backward for MulScalarNodeBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        if g.requires(self.a) {
            grads.accumulate(self.a, og.scale(g.value(self.s).item()));
        }
        if g.requires(self.s) {
            let dot: f64 = og
                .data()
                .iter()
                .zip(g.value(self.a).data().iter())
                .map(|(x, y)| x * y)
                .sum();
            grads.accumulate(self.s, Tensor::scalar(dot));
        }
        Ok(())
    }
}

struct MatmulBack {
    a: NodeId,
    b: NodeId,
}

impl Backward for MatmulBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        if g.requires(self.a) {
            grads.accumulate(self.a, tensor::matmul_nt(og, g.value(self.b))?);
        }
        if g.requires(self.b) {
            grads.accumulate(self.b, tensor::matmul_tn(g.value(self.a), og)?);
        }
        Ok(())
    }
}

struct AddBiasBack {
    a: NodeId,
    bias: NodeId,
}

impl Backward for AddBiasBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        if g.requires(self.a) {
            grads.accumulate(self.a, og.clone());
        }
        if g.requires(self.bias) {
            let (m, n) = og.dims2()?;
            let d = og.data();
            let mut gb = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    gb[j] += d[i * n + j];
                }
            }
            grads.accumulate(self.bias, Tensor::from_vec(&[n], gb)?);
        }
        Ok(())
    }
}

struct TransposeBack {
    a: NodeId,
}

impl Backward for TransposeBack {
    fn apply(&self, og: &Tensor, _g: &Graph, grads: &mut GradStore) -> Result<()> {
        grads.accumulate(self.a, transpose_val(og)?);
        Ok(())
    }
}

struct SliceRowsBack {
    a: NodeId,
    start: usize,
}

impl Backward for SliceRowsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (sm, n) = og.dims2()?;
        let mut ga = Tensor::zeros(g.value(self.a).shape());
        ga.data_mut()[self.start * n..(self.start + sm) * n].copy_from_slice(og.data());
        grads.accumulate(self.a, ga);
        Ok(())
    }
}

struct SliceColsBack {
    a: NodeId,
    start: usize,
}

impl Backward for SliceColsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (m, w) = og.dims2()?;
        let (_, n) = g.value(self.a).dims2()?;
        let mut ga = Tensor::zeros(g.value(self.a).shape());
        {
            let gd = ga.data_mut();
            for i in 0..m {
                gd[i * n + self.start..i * n + self.start + w]
                    .copy_from_slice(&og.data()[i * w..(i + 1) * w]);
            }
        }
        grads.accumulate(self.a, ga);
        Ok(())
    }
}

struct ConcatRowsBack {
    parts: Vec<NodeId>,
}

impl Backward for ConcatRowsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (_, n) = og.dims2()?;
        let mut row = 0;
        for &p in &self.parts {
            let (pm, _) = g.value(p).dims2()?;
            if g.requires(p) {
                let gp = Tensor::from_vec(&[pm, n], og.data()[row * n..(row + pm) * n].to_vec())?;
                grads.accumulate(p, gp);
            }
            row += pm;
        }
        Ok(())
    }
}

struct ConcatColsBack {
    parts: Vec<NodeId>,
}

impl Backward for ConcatColsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (m, total) = og.dims2()?;
        let mut off = 0;
        for &p in &self.parts {
            let (_, w) = g.value(p).dims2()?;
            if g.requires(p) {
                let mut out = vec![0.0; m * w];
                for i in 0..m {
                    out[i * w..(i + 1) * w]
                        .copy_from_slice(&og.data()[i * total + off..i * total + off + w]);
                }
                grads.accumulate(p, Tensor::from_vec(&[m, w], out)?);
            }
            off += w;
        }
        Ok(())
    }
}

struct MeanPoolRowsBack {
    a: NodeId,
}

impl Backward for MeanPoolRowsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (m, n) = g.value(self.a).dims2()?;
        let mut ga = Tensor::zeros(&[m, n]);
        {
            let gd = ga.data_mut();
            for i in 0..m {
                for j in 0..n {
                    gd[i * n + j] = og.data()[j] / m as f64;
                }
            }
        }
        grads.accumulate(self.a, ga);
        Ok(())
    }
}

struct SumRowsBack {
    a: NodeId,
}

impl Backward for SumRowsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (m, n) = g.value(self.a).dims2()?;
        let mut ga = Tensor::zeros(&[m, n]);
        {
            let gd = ga.data_mut();
            for i in 0..m {
                for j in 0..n {
                    gd[i * n + j] = og.data()[i];
                }
            }
        }
        grads.accumulate(self.a, ga);
        Ok(())
    }
}

struct SumAllBack {
    a: NodeId,
    mean: bool,
}

impl Backward for SumAllBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let shape = g.value(self.a).shape();
        let len: usize = shape.iter().product();
        let k = if self.mean {
            og.item() / len as f64
        } else {
            og.item()
        };
        grads.accumulate(self.a, Tensor::full(shape, k));
        Ok(())
    }
}

struct SoftmaxRowsBack {
    a: NodeId,
    out: NodeId,
}

impl Backward for SoftmaxRowsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (m, n) = og.dims2()?;
        let p = g.value(self.out).data();
        let gd = og.data();
        let mut ga = vec![0.0; m * n];
        for i in 0..m {
            let pr = &p[i * n..(i + 1) * n];
            let gr = &gd[i * n..(i + 1) * n];
            let dot: f64 = pr.iter().zip(gr.iter()).map(|(x, y)| x * y).sum();
            for j in 0..n {
                ga[i * n + j] = pr[j] * (gr[j] - dot);
            }
        }
        grads.accumulate(self.a, Tensor::from_vec(&[m, n], ga)?);
        Ok(())
    }
}

struct LogSoftmaxRowsBack {
    a: NodeId,
    out: NodeId,
}

impl Backward for LogSoftmaxRowsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (m, n) = og.dims2()?;
        let lp = g.value(self.out).data();
        let gd = og.data();
        let mut ga = vec![0.0; m * n];
        for i in 0..m {
            let gr = &gd[i * n..(i + 1) * n];
            let gsum: f64 = gr.iter().sum();
            for j in 0..n {
                ga[i * n + j] = gr[j] - lp[i * n + j].exp() * gsum;
            }
        }
        grads.accumulate(self.a, Tensor::from_vec(&[m, n], ga)?);
        Ok(())
    }
}

struct LayerNormBack {
    a: NodeId,
    gamma: NodeId,
    beta: NodeId,
    xhat: Tensor,
    inv_std: Tensor,
}

impl Backward for LayerNormBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (m, n) = og.dims2()?;
        let gd = og.data();
        let xh = self.xhat.data();
        if g.requires(self.gamma) {
            let mut gg = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    gg[j] += gd[i * n + j] * xh[i * n + j];
                }
            }
            grads.accumulate(self.gamma, Tensor::from_vec(&[n], gg)?);
        }
        if g.requires(self.beta) {
            let mut gb = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    gb[j] += gd[i * n + j];
                }
            }
            grads.accumulate(self.beta, Tensor::from_vec(&[n], gb)?);
        }
        if g.requires(self.a) {
            let gam = g.value(self.gamma).data();
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                let is = self.inv_std.data()[i];
                let mut mean_gg = 0.0;
                let mut mean_ggx = 0.0;
                for j in 0..n {
                    let t = gd[i * n + j] * gam[j];
                    mean_gg += t;
                    mean_ggx += t * xh[i * n + j];
                }
                mean_gg /= n as f64;
                mean_ggx /= n as f64;
                for j in 0..n {
                    let t = gd[i * n + j] * gam[j];
                    ga[i * n + j] = (t - mean_gg - xh[i * n + j] * mean_ggx) * is;
                }
            }
            grads.accumulate(self.a, Tensor::from_vec(&[m, n], ga)?);
        }
        Ok(())
    }
}

struct L2NormRowsBack {
    a: NodeId,
    out: NodeId,
    inv_norms: Tensor,
}

impl Backward for L2NormRowsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (m, n) = og.dims2()?;
        let y = g.value(self.out).data();
        let gd = og.data();
        let mut ga = vec![0.0; m * n];
        for i in 0..m {
            let is = self.inv_norms.data()[i];
            let yr = &y[i * n..(i + 1) * n];
            let gr = &gd[i * n..(i + 1) * n];
            let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
            for j in 0..n {
                ga[i * n + j] = (gr[j] - dot * yr[j]) * is;
            }
        }
        grads.accumulate(self.a, Tensor::from_vec(&[m, n], ga)?);
        Ok(())
    }
}

struct GatherRowsBack {
    table: NodeId,
    idx: Vec<usize>,
}

impl Backward for GatherRowsBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (_, n) = og.dims2()?;
        let mut gt = Tensor::zeros(g.value(self.table).shape());
        {
            let gd = gt.data_mut();
            for (r, &i) in self.idx.iter().enumerate() {
                for j in 0..n {
                    gd[i * n + j] += og.data()[r * n + j];
                }
            }
        }
        grads.accumulate(self.table, gt);
        Ok(())
    }
}

struct PickPerRowBack {
    a: NodeId,
    cols: Vec<usize>,
}

impl Backward for PickPerRowBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let (m, n) = g.value(self.a).dims2()?;
        let mut ga = Tensor::zeros(&[m, n]);
        {
            let gd = ga.data_mut();
            for (i, &c) in self.cols.iter().enumerate() {
                gd[i * n + c] = og.data()[i];
            }
        }
        grads.accumulate(self.a, ga);
        Ok(())
    }
}

struct GatherFlatBack {
    src: NodeId,
    offsets: Vec<usize>,
}

impl Backward for GatherFlatBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let mut gs = Tensor::zeros(g.value(self.src).shape());
        {
            let gd = gs.data_mut();
            for (k, &o) in self.offsets.iter().enumerate() {
                gd[o] += og.data()[k];
            }
        }
        grads.accumulate(self.src, gs);
        Ok(())
    }
}

struct EsPenaltyBack {
    h: NodeId,
    rho: f64,
    margin: f64,
}

impl Backward for EsPenaltyBack {
    fn apply(&self, og: &Tensor, g: &Graph, grads: &mut GradStore) -> Result<()> {
        let mut gh = og.clone();
        for (x, y) in gh.data_mut().iter_mut().zip(g.value(self.h).data().iter()) {
            let d = y - self.rho;
            *x *= if d.abs() > self.margin {
                -d.signum()
            } else {
                0.0
            };
        }
        grads.accumulate(self.h, gh);
        Ok(())
    }
}
