//! Slice-level kernels shared by the plain tensor API and the autodiff graph.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        let inv = 1.0 / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

/// Normalized rows and per-row inverse standard deviations.
pub(crate) fn layer_norm_stats(x: &[f64], n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for (r, (src, dst)) in x.chunks_exact(n).zip(xhat.chunks_exact_mut(n)).enumerate() {
        let mean = src.iter().sum::<f64>() / n as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
    }
    (xhat, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Per-row statistics of the centered Pearson correlation between `u` and `v`.
pub(crate) struct PearsonRow {
    pub centered_u: Vec<f64>,
    pub centered_v: Vec<f64>,
    pub cov: f64,
    pub std_u: f64,
    pub std_v: f64,
    pub denom: f64,
}

impl PearsonRow {
    pub fn compute(u: &[f64], v: &[f64], eps: f64) -> Self {
        let n = u.len() as f64;
        let mu = u.iter().sum::<f64>() / n;
        let mv = v.iter().sum::<f64>() / n;
        let centered_u: Vec<f64> = u.iter().map(|x| x - mu).collect();
        let centered_v: Vec<f64> = v.iter().map(|x| x - mv).collect();
        let cov = centered_u
            .iter()
            .zip(&centered_v)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n;
        let std_u = (centered_u.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
        let std_v = (centered_v.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
        let denom = std_u * std_v + eps;
        PearsonRow {
            centered_u,
            centered_v,
            cov,
            std_u,
            std_v,
            denom,
        }
    }

    pub fn rho(&self) -> f64 {
        self.cov / self.denom
    }

    /// d rho / d v (use with swapped roles for d rho / d u).
    pub fn grad_v(&self) -> Vec<f64> {
        grad_second(
            &self.centered_u,
            &self.centered_v,
            self.cov,
            self.std_u,
            self.std_v,
            self.denom,
        )
    }

    pub fn grad_u(&self) -> Vec<f64> {
        grad_second(
            &self.centered_v,
            &self.centered_u,
            self.cov,
            self.std_v,
            self.std_u,
            self.denom,
        )
    }
}

fn grad_second(cu: &[f64], cv: &[f64], cov: f64, su: f64, sv: f64, denom: f64) -> Vec<f64> {
    let n = cu.len() as f64;
    let second = if sv > 0.0 {
        cov * su / (n * sv * denom * denom)
    } else {
        0.0
    };
    cu.iter()
        .zip(cv)
        .map(|(a, b)| a / (n * denom) - second * b)
        .collect()
}
