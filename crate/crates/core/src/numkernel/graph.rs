//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and `backward` is a single reverse sweep.

use crate::error::{ElmError, Result};

use super::kernels::{self, PearsonRow};
use super::tensor::{DType, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape(Var),
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    Transpose(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Log(Var),
    ClampMin(Var, f64),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanMiddle {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    PearsonRows {
        u: Var,
        v: Var,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    dtype: DType,
}

/// Gradients of a scalar loss with respect to every leaf of a graph.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient for `leaf`; zeros of the leaf's shape when the loss does not depend on it.
    pub fn wrt(&self, leaf: Var) -> Tensor {
        match &self.grads[leaf.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[leaf.0]),
        }
    }

    pub fn take(&mut self, leaf: Var) -> Tensor {
        self.grads[leaf.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[leaf.0]))
    }

    pub fn is_reached(&self, leaf: Var) -> bool {
        self.grads[leaf.0].is_some()
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> ElmError {
    ElmError::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new(dtype: DType) -> Self {
        Graph {
            nodes: Vec::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let mut value = Tensor::from_parts(shape, data, self.dtype);
        value.round_in_place();
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: &Tensor, trainable: bool) -> Var {
        let value = value.cast(self.dtype);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push("add", shape, data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.push("sub", shape, data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push("mul", shape, data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|v| v * c).collect();
        self.push("scale", shape, data, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|v| v + c).collect();
        self.push("add_scalar", shape, data, Op::AddScalar(x), &[x])
    }

    /// Adds a length-`n` vector to every trailing-axis row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(row) != [n] {
            return Err(dim_err("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row);
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_exact_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(d, b)| *d += b);
        }
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, data, Op::AddRow(x, row), &[x, row])
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `x·w + bias` for `x [m×k]`, `w [k×n]`, `bias [n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    /// Batched product: `a [P,m,k]` with `b [P,k,n]`, or `b [P,n,k]` transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("batch_matmul", &sa, &sb));
        }
        let (p, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err("batch_matmul", &sa, &sb));
        }
        let mut out = vec![0.0; p * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..p {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(ai, bi, oi, m, k, n);
            } else {
                kernels::gemm_nn(ai, bi, oi, m, k, n);
            }
        }
        self.push("batch_matmul", vec![p, m, n], out, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(dim_err("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Views `x` as `dims = [d0,d1,d2,d3]` and returns `[d0,d2,d1,d3]`.
    pub fn swap_axes12(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        if dims.iter().product::<usize>() != self.value(x).numel() {
            return Err(dim_err("swap_axes12", self.shape(x), &dims));
        }
        let data = swap12(self.data(x), dims);
        let shape = vec![dims[0], dims[2], dims[1], dims[3]];
        self.push("swap_axes12", shape, data, Op::SwapAxes12 { x, dims }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        let shape = t.shape().to_vec();
        self.push("transpose", shape, t.into_data(), Op::Transpose(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push("gelu", shape, data, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(ElmError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let n = *self.shape(x).last().unwrap();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xhat, inv_std) = kernels::layer_norm_stats(self.data(x), n, eps);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = xhat.clone();
        for chunk in out.chunks_exact_mut(n) {
            for ((o, gv), bv) in chunk.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", shape, out, op, &[x, gain, bias])
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        let data = kernels::softmax_rows(self.data(x), n);
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, data, Op::Softmax(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|v| v.ln()).collect();
        self.push("log", shape, data, Op::Log(x), &[x])
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|v| v.max(floor)).collect();
        self.push("clamp_min", shape, data, Op::ClampMin(x, floor), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|v| v * v).collect();
        self.push("square", shape, data, Op::Square(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum_all", vec![1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum::<f64>() / self.value(x).numel() as f64;
        self.push("mean_all", vec![1], vec![s], Op::MeanAll(x), &[x])
    }

    /// Views `x` as `[outer, mid, inner]` and averages over `mid`.
    /// The result takes `out_shape` (product `outer·inner`).
    pub fn mean_middle(&mut self, x: Var, outer: usize, mid: usize, inner: usize, out_shape: &[usize]) -> Result<Var> {
        if outer * mid * inner != self.value(x).numel() || out_shape.iter().product::<usize>() != outer * inner {
            return Err(dim_err("mean_middle", self.shape(x), out_shape));
        }
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let s = &src[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d /= mid as f64);
        }
        let op = Op::MeanMiddle { x, outer, mid, inner };
        self.push("mean_middle", out_shape.to_vec(), out, op, &[x])
    }

    /// Row lookup: `table [V×C]`, returns `[ids.len()×C]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(ElmError::Contract(format!("embedding id {bad} out of range for table of {v} rows")));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let op = Op::Embedding { table, ids: ids.to_vec() };
        self.push("embedding", vec![ids.len(), c], out, op, &[table])
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if rows.is_empty() {
            return Err(ElmError::Contract("gather_rows needs at least one row".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(ElmError::Contract(format!("row {bad} out of range for {m} rows")));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&d[r * n..(r + 1) * n]);
        }
        let op = Op::GatherRows { x, rows: rows.to_vec() };
        self.push("gather_rows", vec![rows.len(), n], out, op, &[x])
    }

    /// Mean token cross-entropy over rows where `mask` is set. Zero when nothing is masked.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (m, v) = self.value(logits).dims2()?;
        if targets.len() != m || mask.len() != m {
            return Err(ElmError::Dimension(format!(
                "cross_entropy: {m} logit rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let probs = kernels::softmax_rows(self.data(logits), v);
        let mut total = 0.0;
        let mut count = 0;
        for (r, (&t, &on)) in targets.iter().zip(mask).enumerate() {
            if !on {
                continue;
            }
            if t >= v {
                return Err(ElmError::Contract(format!("target id {t} out of range for {v} classes")));
            }
            total -= probs[r * v + t].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        self.push("cross_entropy", vec![1], vec![loss], op, &[logits])
    }

    /// `1 − ρ(u_i, v_i)` for every trailing-axis row pair; output has one entry per row.
    pub fn pearson_rows(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        self.same_shape("pearson_rows", u, v)?;
        let n = *self.shape(u).last().unwrap();
        if n < 2 {
            return Err(ElmError::Contract(format!("pearson needs vectors of length >= 2, got {n}")));
        }
        let out: Vec<f64> = self
            .data(u)
            .chunks_exact(n)
            .zip(self.data(v).chunks_exact(n))
            .map(|(a, b)| 1.0 - PearsonRow::compute(a, b, eps).rho())
            .collect();
        let rows = out.len();
        self.push("pearson_rows", vec![rows], out, Op::PearsonRows { u, v, eps }, &[u, v])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(ElmError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; count];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(idx, gy, &mut grads, &mut leaf_grads)?;
        }

        Ok(Grads {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(
        &self,
        idx: usize,
        gy: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaf_grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut send = |v: Var, delta: Vec<f64>| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {
                let mut t = Tensor::from_parts(node.value.shape().to_vec(), gy, self.dtype);
                t.round_in_place();
                t.ensure_finite("gradient")?;
                leaf_grads[idx] = Some(t);
            }
            Op::Add(a, b) => {
                send(*b, gy.clone());
                send(*a, gy);
            }
            Op::Sub(a, b) => {
                send(*b, gy.iter().map(|g| -g).collect());
                send(*a, gy);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, gy.iter().zip(bd).map(|(g, v)| g * v).collect());
                send(*b, gy.iter().zip(ad).map(|(g, v)| g * v).collect());
            }
            Op::Scale(x, c) => send(*x, gy.iter().map(|g| g * c).collect()),
            Op::AddScalar(x) => send(*x, gy),
            Op::AddRow(x, row) => {
                let n = self.value(*row).numel();
                let mut gr = vec![0.0; n];
                for chunk in gy.chunks_exact(n) {
                    gr.iter_mut().zip(chunk).for_each(|(a, g)| *a += g);
                }
                send(*row, gr);
                send(*x, gy);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(&gy, self.data(*b), &mut ga, m, n, k);
                    send(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(self.data(*a), &gy, &mut gb, m, k, n);
                    send(*b, gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (p, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; p * m * k];
                let mut gb = vec![0.0; p * k * n];
                for i in 0..p {
                    let gyi = &gy[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let gai = &mut ga[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // y = a bᵀ, b is [n×k]
                        kernels::gemm_nn(gyi, bi, gai, m, n, k);
                        kernels::gemm_tn(gyi, ai, gbi, m, n, k);
                    } else {
                        kernels::gemm_nt(gyi, bi, gai, m, n, k);
                        kernels::gemm_tn(ai, gyi, gbi, m, k, n);
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Reshape(x) => send(*x, gy),
            Op::SwapAxes12 { x, dims } => {
                send(*x, swap12(&gy, [dims[0], dims[2], dims[1], dims[3]]));
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let t = Tensor::from_parts(s.to_vec(), gy, DType::F64).transpose2()?;
                send(*x, t.into_data());
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                send(*x, gy.iter().zip(xd).map(|(g, &v)| g * kernels::gelu_grad(v)).collect());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).numel();
                let g = self.data(*gain);
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                let mut gx = vec![0.0; gy.len()];
                for (r, ((gyr, xh), gxr)) in gy
                    .chunks_exact(n)
                    .zip(xhat.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                    .enumerate()
                {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        ggain[j] += gyr[j] * xh[j];
                        gbias[j] += gyr[j];
                        let d = gyr[j] * g[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = gyr[j] * g[j];
                        gxr[j] = inv_std[r] * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                send(*gain, ggain);
                send(*bias, gbias);
                send(*x, gx);
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; gy.len()];
                for ((gyr, yr), gxr) in gy.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let dot: f64 = gyr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gxr[j] = yr[j] * (gyr[j] - dot);
                    }
                }
                send(*x, gx);
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                send(*x, gy.iter().zip(xd).map(|(g, v)| g / v).collect());
            }
            Op::ClampMin(x, floor) => {
                let xd = self.data(*x);
                send(*x, gy.iter().zip(xd).map(|(g, v)| if v > floor { *g } else { 0.0 }).collect());
            }
            Op::Square(x) => {
                let xd = self.data(*x);
                send(*x, gy.iter().zip(xd).map(|(g, v)| 2.0 * g * v).collect());
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![gy[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![gy[0] / n as f64; n]);
            }
            Op::MeanMiddle { x, outer, mid, inner } => {
                let mut gx = vec![0.0; outer * mid * inner];
                let scale = 1.0 / *mid as f64;
                for o in 0..*outer {
                    let src = &gy[o * inner..(o + 1) * inner];
                    for m in 0..*mid {
                        let base = (o * mid + m) * inner;
                        for (d, s) in gx[base..base + inner].iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Embedding { table, ids } => {
                let c = self.value(*table).last_dim();
                let mut gt = vec![0.0; self.value(*table).numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for (d, s) in gt[i * c..(i + 1) * c].iter_mut().zip(&gy[r * c..(r + 1) * c]) {
                        *d += s;
                    }
                }
                send(*table, gt);
            }
            Op::GatherRows { x, rows } => {
                let n = self.value(*x).last_dim();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (r, &src) in rows.iter().enumerate() {
                    for (d, s) in gx[src * n..(src + 1) * n].iter_mut().zip(&gy[r * n..(r + 1) * n]) {
                        *d += s;
                    }
                }
                send(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).last_dim();
                let mut gx = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = gy[0] / *count as f64;
                    for (r, (&t, &on)) in targets.iter().zip(mask).enumerate() {
                        if !on {
                            continue;
                        }
                        for j in 0..v {
                            gx[r * v + j] = probs[r * v + j] * scale;
                        }
                        gx[r * v + t] -= scale;
                    }
                }
                send(*logits, gx);
            }
            Op::PearsonRows { u, v, eps } => {
                let n = self.value(*u).last_dim();
                let mut gu = vec![0.0; self.value(*u).numel()];
                let mut gv = vec![0.0; gu.len()];
                let (ud, vd) = (self.data(*u), self.data(*v));
                for (r, &g) in gy.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    let stats = PearsonRow::compute(&ud[span.clone()], &vd[span.clone()], *eps);
                    // loss = 1 − ρ
                    for (d, s) in gu[span.clone()].iter_mut().zip(stats.grad_u()) {
                        *d = -g * s;
                    }
                    for (d, s) in gv[span].iter_mut().zip(stats.grad_v()) {
                        *d = -g * s;
                    }
                }
                send(*u, gu);
                send(*v, gv);
            }
        }
        Ok(())
    }
}

fn swap12(src: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [d0, d1, d2, d3] = dims;
    let mut out = vec![0.0; src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let s = ((a * d1 + b) * d2 + c) * d3;
                let d = ((a * d2 + c) * d1 + b) * d3;
                out[d..d + d3].copy_from_slice(&src[s..s + d3]);
            }
        }
    }
    out
}
