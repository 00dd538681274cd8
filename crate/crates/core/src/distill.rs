//! Knowledge-distillation losses, classic (KL / MSE) and relational (Pearson),
//! plus the frozen teacher and the learned width-bridging projections.

use rand::Rng;

use crate::corpus::Batch;
use crate::error::{ElmError, Result};
use crate::numkernel::{softmax_rows, DType, Graph, Tensor, Var};
use crate::supernet::{Binder, Forward, Init, Model, ParamStore, TensorSpec};

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdMode {
    None,
    Classic,
    Relational,
}

impl KdMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KdMode::None),
            "classic" | "mse" => Ok(KdMode::Classic),
            "relational" | "pearson" => Ok(KdMode::Relational),
            other => Err(ElmError::Config(format!("unknown kd mode `{other}` (none|classic|relational)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KdMode::None => "none",
            KdMode::Classic => "classic",
            KdMode::Relational => "relational",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdConfig {
    pub mode: KdMode,
    pub lambda_cd: f64,
    pub lambda_ad: f64,
    pub lambda_fd: f64,
    pub eps: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            mode: KdMode::None,
            lambda_cd: 1.0,
            lambda_ad: 1.0,
            lambda_fd: 1.0,
            eps: DEFAULT_EPS,
        }
    }
}

// ---- graph-level losses -------------------------------------------------

/// `(1/B) Σ Yt·log(Yt / max(Ys, eps))` over rows. `yt` is treated as data.
pub fn kl_rows(g: &mut Graph, yt: &Tensor, ys: Var, eps: f64) -> Result<Var> {
    let rows = yt.rows() as f64;
    let self_term: f64 = yt.data().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    let t = g.constant(yt);
    let clamped = g.clamp_min(ys, eps)?;
    let logs = g.log(clamped)?;
    let cross = g.mul(t, logs)?;
    let cross = g.sum_all(cross)?;
    let neg = g.scale(cross, -1.0 / rows)?;
    g.add_scalar(neg, self_term / rows)
}

/// Mean squared elementwise difference.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(ElmError::Contract(format!(
            "distillation shapes differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    g.mean_all(sq)
}

/// Mean of `1 − ρ` over trailing-axis rows.
pub fn pearson_mean(g: &mut Graph, a: Var, b: Var, eps: f64) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(ElmError::Contract(format!(
            "distillation shapes differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let per_row = g.pearson_rows(a, b, eps)?;
    g.mean_all(per_row)
}

/// Averages `[B·H, N, N]` attention over heads into `[B·N, N]` rows.
pub fn head_average(g: &mut Graph, attn: Var, batch: usize, heads: usize, seq: usize) -> Result<Var> {
    g.mean_middle(attn, batch, heads, seq * seq, &[batch * seq, seq])
}

/// Applies the projection for one layer, or the identity when widths agree and none exists.
fn project(g: &mut Graph, b: &mut Binder, layer: usize, fs: Var, teacher_width: usize) -> Result<Var> {
    let w_name = projection_name(layer, "w");
    let student_width = g.shape(fs)[1];
    match b.get(g, &w_name) {
        Ok(w) => {
            let bias = b.get(g, &projection_name(layer, "b"))?;
            g.linear(fs, w, bias)
        }
        Err(_) if student_width == teacher_width => Ok(fs),
        Err(_) => Err(ElmError::Contract(format!(
            "layer {layer}: no projection from width {student_width} to {teacher_width}"
        ))),
    }
}

pub fn projection_name(layer: usize, part: &str) -> String {
    format!("kd.proj.{layer}.{part}")
}

/// Learned `C_s → C_t` maps, one per student layer.
pub fn new_projections<R: Rng + ?Sized>(layers: usize, student: usize, teacher: usize, rng: &mut R, dtype: DType) -> ParamStore {
    let mut specs = Vec::new();
    for l in 0..layers {
        specs.push(TensorSpec {
            name: projection_name(l, "w"),
            shape: vec![student, teacher],
            init: Init::Normal,
        });
        specs.push(TensorSpec {
            name: projection_name(l, "b"),
            shape: vec![teacher],
            init: Init::Zeros,
        });
    }
    let mut store = ParamStore::new();
    store.materialize(&specs, rng, dtype);
    store
}

/// Teacher layer paired with each student layer: identity for equal depth,
/// otherwise `⌊(l+1)·L_t/L_s⌋ − 1`.
pub fn layer_map(student_layers: usize, teacher_layers: usize) -> Vec<usize> {
    if student_layers == teacher_layers {
        return (0..student_layers).collect();
    }
    (0..student_layers)
        .map(|l| (((l + 1) * teacher_layers) / student_layers).max(1) - 1)
        .collect()
}

// ---- teacher ------------------------------------------------------------

/// Teacher signals for one batch, computed once outside the student graph.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    /// Softmax over the vocabulary, `[B·N, V]`.
    pub probs: Tensor,
    /// Head-averaged attention per layer, `[B·N, N]`.
    pub attention: Vec<Tensor>,
    /// FFN branch output per layer, `[B·N, C_t]`.
    pub ffn: Vec<Tensor>,
}

/// A trained model used only for inference.
#[derive(Clone, Debug)]
pub struct TeacherBundle {
    model: Model,
}

impl TeacherBundle {
    pub fn new(model: Model) -> Self {
        TeacherBundle { model }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn width(&self) -> usize {
        use crate::supernet::Network;
        self.model.dims().hidden
    }

    pub fn layers(&self) -> usize {
        self.model.genome().len()
    }

    pub fn targets(&self, batch: &Batch) -> Result<TeacherTargets> {
        let (logits, trace) = self.model.forward_path(batch, true)?;
        let trace = trace.expect("trace requested");
        let (b, n) = (batch.batch_size, batch.seq_len);
        let mut attention = Vec::with_capacity(trace.layers.len());
        let mut ffn = Vec::with_capacity(trace.layers.len());
        for lt in &trace.layers {
            let h = lt.attention.shape()[1];
            let mut avg = vec![0.0; b * n * n];
            for bi in 0..b {
                for hi in 0..h {
                    let src = &lt.attention.data()[(bi * h + hi) * n * n..(bi * h + hi + 1) * n * n];
                    avg[bi * n * n..(bi + 1) * n * n]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, v)| *a += v / h as f64);
                }
            }
            attention.push(Tensor::new(vec![b * n, n], avg)?);
            let c = lt.ffn_out.shape()[2];
            ffn.push(lt.ffn_out.reshape(&[b * n, c])?);
        }
        Ok(TeacherTargets {
            probs: softmax_rows(&logits),
            attention,
            ffn,
        })
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let n = t.last_dim();
    let mut out = Vec::with_capacity(rows.len() * n);
    for &r in rows {
        out.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), n], out)
}

/// Weighted distillation term for a student forward pass, or `None` when KD is off.
/// Projection leaves are bound through `proj`.
pub fn kd_loss(
    g: &mut Graph,
    student: &Forward,
    teacher: &TeacherTargets,
    batch: &Batch,
    proj: &mut Binder,
    cfg: &KdConfig,
) -> Result<Option<Var>> {
    if cfg.mode == KdMode::None {
        return Ok(None);
    }
    let (b, n) = (batch.batch_size, batch.seq_len);
    let map = layer_map(student.layers.len(), teacher.attention.len());
    let mut total: Option<Var> = None;
    let mut push = |g: &mut Graph, term: Var, lambda: f64| -> Result<()> {
        if lambda == 0.0 {
            return Ok(());
        }
        let t = g.scale(term, lambda)?;
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
        Ok(())
    };

    // Class distillation on positions that carry a loss.
    let rows: Vec<usize> = (0..b * n).filter(|&i| batch.loss_mask[i]).collect();
    if !rows.is_empty() {
        let yt = select_rows(&teacher.probs, &rows)?;
        let s_logits = g.gather_rows(student.logits, &rows)?;
        let ys = g.softmax(s_logits)?;
        let term = match cfg.mode {
            KdMode::Classic => kl_rows(g, &yt, ys, cfg.eps)?,
            _ => {
                let t = g.constant(&yt);
                pearson_mean(g, t, ys, cfg.eps)?
            }
        };
        push(g, term, cfg.lambda_cd)?;
    }

    let layers = student.layers.len() as f64;
    let mut ad: Option<Var> = None;
    let mut fd: Option<Var> = None;
    for (l, lv) in student.layers.iter().enumerate() {
        let tl = map[l];
        let s_att = head_average(g, lv.attn, b, lv.heads, n)?;
        let t_att = g.constant(&teacher.attention[tl]);
        let a = match cfg.mode {
            KdMode::Classic => mse(g, t_att, s_att)?,
            _ => pearson_mean(g, t_att, s_att, cfg.eps)?,
        };
        ad = Some(match ad {
            Some(acc) => g.add(acc, a)?,
            None => a,
        });
        let ft = &teacher.ffn[tl];
        let fs = project(g, proj, l, lv.ffn_out, ft.last_dim())?;
        let t_ffn = g.constant(ft);
        let f = match cfg.mode {
            KdMode::Classic => mse(g, t_ffn, fs)?,
            _ => pearson_mean(g, t_ffn, fs, cfg.eps)?,
        };
        fd = Some(match fd {
            Some(acc) => g.add(acc, f)?,
            None => f,
        });
    }
    if let Some(ad) = ad {
        let ad = g.scale(ad, 1.0 / layers)?;
        push(g, ad, cfg.lambda_ad)?;
    }
    if let Some(fd) = fd {
        let fd = g.scale(fd, 1.0 / layers)?;
        push(g, fd, cfg.lambda_fd)?;
    }
    Ok(total)
}

// ---- value-level wrappers ------------------------------------------------

fn check_prob_rows(name: &str, t: &Tensor) -> Result<()> {
    let n = t.last_dim();
    for (r, row) in t.data().chunks_exact(n).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-5 || row.iter().any(|&p| p < 0.0) {
            return Err(ElmError::Contract(format!(
                "{name} row {r} is not a probability vector (sums to {s})"
            )));
        }
    }
    Ok(())
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}

/// Class distillation, KL form. Rows of both arguments must be distributions.
pub fn loss_cd_kl(yt: &Tensor, ys: &Tensor, eps: f64) -> Result<f64> {
    check_prob_rows("teacher", yt)?;
    check_prob_rows("student", ys)?;
    let mut g = Graph::new(DType::F64);
    let s = g.constant(ys);
    let l = kl_rows(&mut g, yt, s, eps)?;
    Ok(scalar(&g, l))
}

fn to_rows(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        // [B, H, N, N] → head-averaged [B·N, N]
        4 => {
            let s = t.shape();
            let (b, h, n) = (s[0], s[1], s[2]);
            let mut g = Graph::new(DType::F64);
            let v = g.constant(t);
            let avg = head_average(&mut g, v, b, h, n)?;
            Ok(g.value(avg).clone())
        }
        3 => {
            let s = t.shape();
            t.reshape(&[s[0] * s[1], s[2]])
        }
        _ => Ok(t.clone()),
    }
}

fn layerwise(at: &[Tensor], as_: &[Tensor], f: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    if at.len() != as_.len() || at.is_empty() {
        return Err(ElmError::Contract(format!(
            "teacher has {} layers, student {}",
            at.len(),
            as_.len()
        )));
    }
    let mut total = 0.0;
    for (t, s) in at.iter().zip(as_) {
        let (t, s) = (to_rows(t)?, to_rows(s)?);
        let mut g = Graph::new(DType::F64);
        let (tv, sv) = (g.constant(&t), g.constant(&s));
        let l = f(&mut g, tv, sv)?;
        total += scalar(&g, l);
    }
    Ok(total / at.len() as f64)
}

/// Attention distillation, MSE form. Inputs are `[B,H,N,N]` per layer (head counts may differ).
pub fn loss_ad_mse(at: &[Tensor], as_: &[Tensor]) -> Result<f64> {
    layerwise(at, as_, mse)
}

/// Attention distillation, relational form over head-averaged attention rows.
pub fn loss_ad_rel(at: &[Tensor], as_: &[Tensor], eps: f64) -> Result<f64> {
    layerwise(at, as_, |g, a, b| pearson_mean(g, a, b, eps))
}

/// Optional `(weight [C_s×C_t], bias [C_t])` per layer.
pub type Projection = Option<(Tensor, Tensor)>;

fn projected(fs: &[Tensor], proj: &[Projection], teacher: &[Tensor]) -> Result<Vec<Tensor>> {
    fs.iter()
        .zip(teacher)
        .enumerate()
        .map(|(l, (f, t))| {
            let f = to_rows(f)?;
            match proj.get(l).and_then(|p| p.as_ref()) {
                Some((w, b)) => {
                    let mut g = Graph::new(DType::F64);
                    let (x, w, b) = (g.constant(&f), g.constant(w), g.constant(b));
                    let y = g.linear(x, w, b)?;
                    Ok(g.value(y).clone())
                }
                None if f.last_dim() == to_rows(t)?.last_dim() => Ok(f),
                None => Err(ElmError::Contract(format!(
                    "layer {l}: no projection from width {} to {}",
                    f.last_dim(),
                    t.last_dim()
                ))),
            }
        })
        .collect()
}

/// FFN distillation, MSE form, after projecting student features.
pub fn loss_fd_mse(ft: &[Tensor], fs: &[Tensor], proj: &[Projection]) -> Result<f64> {
    let fs = projected(fs, proj, ft)?;
    layerwise(ft, &fs, mse)
}

/// FFN distillation, relational form: mean `1 − ρ` over token feature vectors.
pub fn loss_fd_rel(ft: &[Tensor], fs: &[Tensor], proj: &[Projection], eps: f64) -> Result<f64> {
    let fs = projected(fs, proj, ft)?;
    layerwise(ft, &fs, |g, a, b| pearson_mean(g, a, b, eps))
}

/// Class distillation, relational form: mean per-row `1 − ρ`.
pub fn loss_cd_rel(yt: &Tensor, ys: &Tensor, eps: f64) -> Result<f64> {
    let mut g = Graph::new(DType::F64);
    let (t, s) = (g.constant(yt), g.constant(ys));
    let l = pearson_mean(&mut g, t, s, eps)?;
    Ok(scalar(&g, l))
}

/// `1 − ρ(u, v)` for two vectors.
pub fn pearson_loss(u: &[f64], v: &[f64], eps: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(ElmError::Contract(format!("pearson: lengths {} and {} differ", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(ElmError::Contract(format!("pearson needs vectors of length >= 2, got {}", u.len())));
    }
    loss_cd_rel(
        &Tensor::new(vec![1, u.len()], u.to_vec())?,
        &Tensor::new(vec![1, v.len()], v.to_vec())?,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_example() {
        let yt = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let ys = Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap();
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((loss_cd_kl(&yt, &ys, DEFAULT_EPS).unwrap() - expect).abs() < 1e-12);
        assert!(loss_cd_kl(&yt, &yt, DEFAULT_EPS).unwrap().abs() < 1e-15);
        let bad = Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap();
        assert!(matches!(loss_cd_kl(&bad, &ys, DEFAULT_EPS), Err(ElmError::Contract(_))));
        let zero = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(loss_cd_kl(&yt, &zero, DEFAULT_EPS).unwrap().is_finite());
    }

    #[test]
    fn scalar_mse_examples() {
        let t = vec![Tensor::new(vec![1, 1], vec![1.0]).unwrap()];
        let s = vec![Tensor::new(vec![1, 1], vec![3.0]).unwrap()];
        assert_eq!(loss_ad_mse(&t, &s).unwrap(), 4.0);
        let t2 = vec![t[0].clone(), t[0].clone()];
        let s2 = vec![s[0].clone(), s[0].clone()];
        assert_eq!(loss_ad_mse(&t2, &s2).unwrap(), 4.0);
        let ft = vec![Tensor::new(vec![1, 1], vec![2.0]).unwrap()];
        let fs = vec![Tensor::new(vec![1, 1], vec![1.0]).unwrap()];
        let p = vec![Some((Tensor::new(vec![1, 1], vec![1.0]).unwrap(), Tensor::zeros(&[1])))];
        assert_eq!(loss_fd_mse(&ft, &fs, &p).unwrap(), 1.0);
    }

    #[test]
    fn missing_projection_is_an_error() {
        let ft = vec![Tensor::zeros(&[2, 3])];
        let fs = vec![Tensor::zeros(&[2, 2])];
        assert!(matches!(loss_fd_mse(&ft, &fs, &[None]), Err(ElmError::Contract(_))));
    }

    #[test]
    fn pearson_examples() {
        let u = [1.0, 2.0, 3.0];
        assert!(pearson_loss(&u, &u, DEFAULT_EPS).unwrap().abs() < 1e-6);
        assert!((pearson_loss(&u, &[-1.0, -2.0, -3.0], DEFAULT_EPS).unwrap() - 2.0).abs() < 1e-6);
        assert!(pearson_loss(&[1.0], &[1.0], DEFAULT_EPS).is_err());
    }

    #[test]
    fn strided_layer_map() {
        assert_eq!(layer_map(4, 4), vec![0, 1, 2, 3]);
        assert_eq!(layer_map(4, 12), vec![2, 5, 8, 11]);
        assert_eq!(layer_map(3, 2), vec![0, 0, 1]);
    }
}
