//! PCA scores of FFN hidden states, CKA between attention heads, cosine
//! similarity between candidate blocks, and CSV export of all three.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{ElmError, Result};
use crate::numkernel::{center_columns, matmul_tn, svd_spectrum, Tensor};

pub const DEFAULT_TAU: f64 = 0.99;
const CKA_EPS: f64 = 1e-12;

fn as_rows(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        2 => Ok(t.clone()),
        r if r > 2 => {
            let last = t.last_dim();
            t.reshape(&[t.numel() / last, last])
        }
        _ => Err(ElmError::Contract(format!("expected a matrix, got shape {:?}", t.shape()))),
    }
}

/// Fraction of dimensions needed to explain `tau` of the variance of the
/// column-centered hidden states. All-zero input scores `1/d`.
pub fn pca_score(f_hid: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ElmError::Contract(format!("tau must lie in (0, 1), got {tau}")));
    }
    let x = as_rows(f_hid)?;
    let (m, d) = x.dims2()?;
    if m < 2 {
        return Err(ElmError::Contract(format!("pca needs at least 2 rows, got {m}")));
    }
    let centered = center_columns(&x)?;
    let energy: Vec<f64> = svd_spectrum(&centered)?.iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    if total <= 0.0 {
        return Ok(1.0 / d as f64);
    }
    let mut acc = 0.0;
    for (k, e) in energy.iter().enumerate() {
        acc += e;
        if acc / total >= tau {
            return Ok((k + 1) as f64 / d as f64);
        }
    }
    Ok(energy.len() as f64 / d as f64)
}

/// Linear CKA between two representations of the same rows.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (x, y) = (as_rows(x)?, as_rows(y)?);
    if x.rows() != y.rows() {
        return Err(ElmError::Contract(format!(
            "cka: row counts differ ({} vs {})",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(ElmError::Contract("cka needs at least 2 rows".into()));
    }
    let (xc, yc) = (center_columns(&x)?, center_columns(&y)?);
    let cross = matmul_tn(&xc, &yc)?.frobenius_sq();
    let xx = matmul_tn(&xc, &xc)?.frobenius_sq().sqrt();
    let yy = matmul_tn(&yc, &yc)?.frobenius_sq().sqrt();
    Ok((cross / (xx * yy + CKA_EPS)).clamp(0.0, 1.0))
}

/// Pairwise head similarity of one layer. Symmetric with a unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CkaMatrix {
    pub layer: usize,
    h: usize,
    values: Vec<f64>,
}

impl CkaMatrix {
    pub fn new(layer: usize, h: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || values.len() != h * h {
            return Err(ElmError::Contract(format!(
                "cka matrix of {h} heads needs {} entries, got {}",
                h * h,
                values.len()
            )));
        }
        Ok(CkaMatrix { layer, h, values })
    }

    pub fn heads(&self) -> usize {
        self.h
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.h + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn cka_heads(layer: usize, heads: &[Tensor]) -> Result<CkaMatrix> {
    let h = heads.len();
    if h == 0 {
        return Err(ElmError::Contract("cka_heads needs at least one head".into()));
    }
    let mut values = vec![0.0; h * h];
    for i in 0..h {
        values[i * h + i] = 1.0;
        for j in (i + 1)..h {
            let v = linear_cka(&heads[i], &heads[j])?;
            values[i * h + j] = v;
            values[j * h + i] = v;
        }
    }
    CkaMatrix::new(layer, h, values)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean per-token cosine similarity between two feature sets of equal shape.
pub fn token_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (a, b) = (as_rows(a)?, as_rows(b)?);
    if a.shape() != b.shape() {
        return Err(ElmError::Contract(format!(
            "feature shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.last_dim();
    let rows = a.rows();
    let total: f64 = a
        .data()
        .chunks_exact(n)
        .zip(b.data().chunks_exact(n))
        .map(|(x, y)| cosine(x, y))
        .sum();
    Ok(total / rows as f64)
}

/// `(a, b, similarity)` for every unordered pair of blocks.
pub fn pairwise_similarity(features: &[Tensor]) -> Result<Vec<(usize, usize, f64)>> {
    if features.len() < 2 {
        return Err(ElmError::Contract("block similarity needs at least two blocks".into()));
    }
    let mut out = Vec::new();
    for i in 0..features.len() {
        for j in (i + 1)..features.len() {
            out.push((i, j, token_cosine(&features[i], &features[j])?));
        }
    }
    Ok(out)
}

/// Mean over block pairs of the per-token cosine similarity of FFN outputs.
pub fn block_similarity(features: &[Tensor]) -> Result<f64> {
    let pairs = pairwise_similarity(features)?;
    Ok(pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcaRecord {
    pub epoch: usize,
    pub layer: usize,
    pub cand: usize,
    pub ffn_dim: usize,
    pub score: f64,
}

/// PCA scores of every trained block at every measured epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PcaScoreTable {
    pub records: Vec<PcaRecord>,
}

impl PcaScoreTable {
    pub fn push(&mut self, r: PcaRecord) -> Result<()> {
        if !(r.score > 0.0 && r.score <= 1.0) {
            return Err(ElmError::Contract(format!("pca score {} outside (0, 1]", r.score)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn epoch(&self, epoch: usize) -> Vec<PcaRecord> {
        self.records.iter().filter(|r| r.epoch == epoch).copied().collect()
    }

    pub fn epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.records.iter().map(|r| r.epoch).collect();
        e.dedup();
        e
    }
}

pub const PCA_HEADER: &str = "epoch,layer,cand,ffn_dim,score";
pub const CKA_HEADER: &str = "layer,i,j,value";
pub const SIMILARITY_HEADER: &str = "layer,pair_a,pair_b,value";

fn write(path: &Path, body: String) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| ElmError::io(dir, e))?;
        }
    }
    fs::write(path, body).map_err(|e| ElmError::io(path, e))
}

fn read_rows(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| ElmError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(ElmError::Parse(format!("{}: expected header `{header}`", path.display())));
    }
    Ok(lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn field<T: std::str::FromStr>(row: &[String], i: usize) -> Result<T> {
    row.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ElmError::Parse(format!("bad csv field {i} in `{}`", row.join(","))))
}

pub fn write_pca_csv(table: &PcaScoreTable, path: &Path) -> Result<()> {
    let mut s = format!("{PCA_HEADER}\n");
    for r in &table.records {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.layer, r.cand, r.ffn_dim, r.score);
    }
    write(path, s)
}

pub fn read_pca_csv(path: &Path) -> Result<PcaScoreTable> {
    let mut t = PcaScoreTable::default();
    for row in read_rows(path, PCA_HEADER)? {
        t.records.push(PcaRecord {
            epoch: field(&row, 0)?,
            layer: field(&row, 1)?,
            cand: field(&row, 2)?,
            ffn_dim: field(&row, 3)?,
            score: field(&row, 4)?,
        });
    }
    Ok(t)
}

pub fn write_cka_csv(matrices: &[CkaMatrix], path: &Path) -> Result<()> {
    let mut s = format!("{CKA_HEADER}\n");
    for m in matrices {
        for i in 0..m.h {
            for j in 0..m.h {
                let _ = writeln!(s, "{},{},{},{}", m.layer, i, j, m.get(i, j));
            }
        }
    }
    write(path, s)
}

pub fn read_cka_csv(path: &Path) -> Result<Vec<CkaMatrix>> {
    let mut by_layer: std::collections::BTreeMap<usize, Vec<(usize, usize, f64)>> = Default::default();
    for row in read_rows(path, CKA_HEADER)? {
        by_layer
            .entry(field(&row, 0)?)
            .or_default()
            .push((field(&row, 1)?, field(&row, 2)?, field(&row, 3)?));
    }
    by_layer
        .into_iter()
        .map(|(layer, cells)| {
            let h = (cells.len() as f64).sqrt().round() as usize;
            let mut values = vec![0.0; h * h];
            for (i, j, v) in cells {
                if i >= h || j >= h {
                    return Err(ElmError::Parse(format!("cka cell ({i},{j}) outside {h}×{h}")));
                }
                values[i * h + j] = v;
            }
            CkaMatrix::new(layer, h, values)
        })
        .collect()
}

/// Rows `(layer, a, b, value)`.
pub fn write_similarity_csv(rows: &[(usize, usize, usize, f64)], path: &Path) -> Result<()> {
    let mut s = format!("{SIMILARITY_HEADER}\n");
    for (l, a, b, v) in rows {
        let _ = writeln!(s, "{l},{a},{b},{v}");
    }
    write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_dimension_scores_one() {
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 0.5, 3.0]).unwrap();
        assert_eq!(pca_score(&x, 0.99).unwrap(), 1.0);
    }

    #[test]
    fn zero_input_scores_one_over_d() {
        assert_eq!(pca_score(&Tensor::zeros(&[5, 4]), 0.99).unwrap(), 0.25);
    }

    #[test]
    fn tau_bounds_are_checked() {
        assert!(pca_score(&Tensor::zeros(&[5, 4]), 1.0).is_err());
        assert!(pca_score(&Tensor::zeros(&[5, 4]), 0.0).is_err());
    }

    #[test]
    fn negated_features_have_cosine_minus_one() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![-1.0, -2.0, 3.0, -0.5]).unwrap();
        assert!((block_similarity(&[a.clone(), b]).unwrap() + 1.0).abs() < 1e-12);
        assert!((block_similarity(&[a.clone(), a]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cka_row_mismatch_is_an_error() {
        assert!(linear_cka(&Tensor::zeros(&[3, 2]), &Tensor::zeros(&[4, 2])).is_err());
    }
}
