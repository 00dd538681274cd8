//! Per-epoch top-K FFN growth and CKA-driven head-count reduction.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{cka_heads, CkaMatrix};
use crate::archspace::{ArchGenome, ModelDims, ParamBudget, SearchSpace};
use crate::corpus::Batch;
use crate::error::{ElmError, Result};
use crate::supernet::{GrowInit, Growth, Network, Supernet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthPolicy {
    /// Blocks grown per epoch.
    pub k: usize,
    pub step: usize,
    pub ffn_max: usize,
    pub budget: ParamBudget,
}

impl GrowthPolicy {
    pub fn new(k: usize, dims: &ModelDims, budget: ParamBudget) -> Self {
        GrowthPolicy {
            k,
            step: dims.ffn_step,
            ffn_max: dims.ffn_max,
            budget,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockScore {
    pub layer: usize,
    pub cand: usize,
    pub score: f64,
}

/// Blocks to grow this epoch: highest score first, ties by (layer, candidate).
/// Capped blocks are skipped; the list stops before the first growth that
/// would push the largest path over the ceiling.
pub fn select_growth(
    scores: &[BlockScore],
    policy: &GrowthPolicy,
    dims: &ModelDims,
    space: &SearchSpace,
) -> Vec<(usize, usize)> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.layer.cmp(&b.layer))
            .then(a.cand.cmp(&b.cand))
    });
    let mut trial = space.clone();
    let mut out = Vec::new();
    for s in ranked {
        if out.len() >= policy.k {
            break;
        }
        let current = trial.ffn[s.layer][s.cand];
        if current + policy.step > policy.ffn_max {
            continue;
        }
        trial.ffn[s.layer][s.cand] = current + policy.step;
        if trial.max_path_params(dims, &policy.budget) > policy.budget.ceiling {
            break;
        }
        out.push((s.layer, s.cand));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrownBlock {
    pub layer: usize,
    pub cand: usize,
    pub old: usize,
    pub new: usize,
}

/// One line of the growth log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthRecord {
    pub epoch: usize,
    pub grown: Vec<GrownBlock>,
    /// Budgeted size of the largest path after this epoch's growth.
    pub params_after: u64,
}

/// Applies a selection to the supernet and reports what changed.
pub fn apply_growth<R: Rng + ?Sized>(
    net: &mut Supernet,
    selection: &[(usize, usize)],
    epoch: usize,
    budget: &ParamBudget,
    init: GrowInit,
    rng: &mut R,
) -> Result<GrowthRecord> {
    let mut grown = Vec::new();
    for &(layer, cand) in selection {
        let old = net.space().ffn[layer][cand];
        match net.grow_ffn(layer, cand, old + net.dims().ffn_step, init, rng)? {
            Growth::Grown { old, new } => grown.push(GrownBlock { layer, cand, old, new }),
            Growth::Refused => {}
        }
    }
    Ok(GrowthRecord {
        epoch,
        grown,
        params_after: net.space().max_path_params(net.dims(), budget),
    })
}

/// Rebuilds the width layout from an initial space and the growth log.
pub fn replay(initial: &SearchSpace, records: &[GrowthRecord]) -> Result<SearchSpace> {
    let mut space = initial.clone();
    for r in records {
        for g in &r.grown {
            let slot = space
                .ffn
                .get_mut(g.layer)
                .and_then(|l| l.get_mut(g.cand))
                .ok_or_else(|| ElmError::Parse(format!("growth log names missing block {}/{}", g.layer, g.cand)))?;
            if *slot != g.old {
                return Err(ElmError::Parse(format!(
                    "growth log epoch {}: block {}/{} was {} but log says {}",
                    r.epoch, g.layer, g.cand, slot, g.old
                )));
            }
            *slot = g.new;
        }
    }
    Ok(space)
}

pub fn append_growth_log(path: &Path, record: &GrowthRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ElmError::io(path, e))?;
    let line = serde_json::to_string(record).map_err(|e| ElmError::Parse(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| ElmError::io(path, e))
}

pub fn read_growth_log(path: &Path) -> Result<Vec<GrowthRecord>> {
    let text = fs::read_to_string(path).map_err(|e| ElmError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ElmError::Parse(format!("growth log: {e}"))))
        .collect()
}

/// Head count after removing heads whose CKA with an earlier kept head exceeds
/// `eta`, reduced further until it divides `width`.
pub fn search_head_count(q: &CkaMatrix, eta: f64, width: usize) -> Result<usize> {
    let h = q.heads();
    if h < 1 {
        return Err(ElmError::Contract("head search needs at least one head".into()));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(ElmError::Contract(format!("eta must lie in (0, 1], got {eta}")));
    }
    let mut removed = BTreeSet::new();
    for i in 0..h {
        if removed.contains(&i) {
            continue;
        }
        for j in (i + 1)..h {
            if q.get(i, j) > eta {
                removed.insert(j);
            }
        }
    }
    let mut kept = h - removed.len();
    while width % kept != 0 {
        kept -= 1;
    }
    Ok(kept)
}

/// Runs head search layer by layer on the probe batch; supernet weights are untouched.
pub fn apply_head_search(
    net: &Supernet,
    genome: &ArchGenome,
    probe: &Batch,
    eta: f64,
) -> Result<(ArchGenome, Vec<CkaMatrix>)> {
    let (_, trace) = net.forward_path(genome, probe, true)?;
    let trace = trace.expect("trace requested");
    let mut out = genome.clone();
    let mut matrices = Vec::with_capacity(genome.len());
    for (l, lt) in trace.layers.iter().enumerate() {
        let q = cka_heads(l, &lt.heads)?;
        let width = net.dims().width(genome.layers[l].choice.kind);
        out.layers[l].heads = search_head_count(&q, eta, width)?;
        matrices.push(q);
    }
    Ok((out, matrices))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(h: usize, above: &[(usize, usize)]) -> CkaMatrix {
        let mut v = vec![0.1; h * h];
        for i in 0..h {
            v[i * h + i] = 1.0;
        }
        for &(i, j) in above {
            v[i * h + j] = 0.95;
            v[j * h + i] = 0.95;
        }
        CkaMatrix::new(0, h, v).unwrap()
    }

    #[test]
    fn one_redundant_pair_removes_one_head() {
        assert_eq!(search_head_count(&matrix(12, &[(0, 1)]), 0.9, 528).unwrap(), 11);
    }

    #[test]
    fn nine_is_rounded_down_to_a_divisor() {
        let q = matrix(12, &[(0, 1), (0, 2), (0, 3)]);
        assert_eq!(search_head_count(&q, 0.9, 528).unwrap(), 8);
    }

    #[test]
    fn nothing_above_threshold_keeps_all_heads() {
        assert_eq!(search_head_count(&matrix(12, &[]), 0.9, 528).unwrap(), 12);
        assert_eq!(search_head_count(&matrix(12, &[(2, 5)]), 1.0, 528).unwrap(), 12);
    }

    #[test]
    fn growth_ranking_example() {
        let dims = ModelDims::desk(50);
        let space = SearchSpace::initial(&dims, true);
        let scores: Vec<BlockScore> = [0.5, 0.9, 0.7, 0.95, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &s)| BlockScore { layer: 0, cand: i, score: s })
            .collect();
        let policy = GrowthPolicy::new(2, &dims, ParamBudget::new(u64::MAX));
        assert_eq!(select_growth(&scores, &policy, &dims, &space), vec![(0, 3), (0, 1)]);
    }
}
