//! Dense tensors, reverse-mode differentiation and the spectral routines
//! used by training and analysis.

mod graph;
mod kernels;
mod linalg;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use linalg::{svd_spectrum, symmetric_eigenvalues};
pub use tensor::{DType, Tensor};

use crate::error::{ElmError, Result};

/// Matrix product `[m×k]·[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(ElmError::Dimension(format!(
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    let t = Tensor::from_parts(vec![m, n], out, a.dtype());
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// `aᵀ·b` for `a [m×k]`, `b [m×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (m2, n) = b.dims2()?;
    if m != m2 {
        return Err(ElmError::Dimension(format!(
            "matmul_tn: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; k * n];
    kernels::gemm_tn(a.data(), b.data(), &mut out, m, k, n);
    let t = Tensor::from_parts(vec![k, n], out, a.dtype());
    t.ensure_finite("matmul_tn")?;
    Ok(t)
}

/// Softmax over the trailing axis, stabilized by the row maximum.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let data = kernels::softmax_rows(x.data(), x.last_dim());
    Tensor::from_parts(x.shape().to_vec(), data, x.dtype())
}

/// Per-row normalization followed by the affine map `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new(x.dtype());
    let (xv, gv, bv) = (g.constant(x), g.constant(gain), g.constant(bias));
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

/// Subtracts each column's mean.
pub fn center_columns(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut means = vec![0.0; n];
    for row in x.data().chunks_exact(n) {
        means.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    means.iter_mut().for_each(|a| *a /= m as f64);
    let data = x
        .data()
        .chunks_exact(n)
        .flat_map(|row| row.iter().zip(&means).map(|(v, mu)| v - mu))
        .collect();
    Ok(Tensor::from_parts(vec![m, n], data, x.dtype()))
}
