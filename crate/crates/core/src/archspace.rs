//! Architecture genomes, closed-form parameter accounting and the parameter ceiling.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ElmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    /// BERT-style block operating at the model width.
    Standard,
    /// MobileBERT-style block routed through a narrow inner width.
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShareMode {
    NoShare,
    /// Query and value projections are one tensor.
    ShareQV,
    /// Key and value projections are one tensor.
    ShareKV,
}

/// One of the six per-layer candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockChoice {
    pub kind: BlockKind,
    pub share: ShareMode,
}

pub const NUM_CANDIDATES: usize = 6;

impl BlockChoice {
    pub const ALL: [BlockChoice; NUM_CANDIDATES] = [
        BlockChoice::new(BlockKind::Standard, ShareMode::NoShare),
        BlockChoice::new(BlockKind::Standard, ShareMode::ShareQV),
        BlockChoice::new(BlockKind::Standard, ShareMode::ShareKV),
        BlockChoice::new(BlockKind::Bottleneck, ShareMode::NoShare),
        BlockChoice::new(BlockKind::Bottleneck, ShareMode::ShareQV),
        BlockChoice::new(BlockKind::Bottleneck, ShareMode::ShareKV),
    ];

    /// The candidates left when weight-sharing blocks are removed from the space.
    pub const UNSHARED: [BlockChoice; 2] = [BlockChoice::ALL[0], BlockChoice::ALL[3]];

    pub const fn new(kind: BlockKind, share: ShareMode) -> Self {
        BlockChoice { kind, share }
    }

    /// Candidate slot within a supernet layer.
    pub fn index(self) -> usize {
        let k = match self.kind {
            BlockKind::Standard => 0,
            BlockKind::Bottleneck => 3,
        };
        let s = match self.share {
            ShareMode::NoShare => 0,
            ShareMode::ShareQV => 1,
            ShareMode::ShareKV => 2,
        };
        k + s
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_shared(self) -> bool {
        self.share != ShareMode::NoShare
    }

    fn kind_tag(self) -> &'static str {
        match self.kind {
            BlockKind::Standard => "std",
            BlockKind::Bottleneck => "btl",
        }
    }

    fn share_tag(self) -> &'static str {
        match self.share {
            ShareMode::NoShare => "none",
            ShareMode::ShareQV => "qv",
            ShareMode::ShareKV => "kv",
        }
    }
}

impl fmt::Display for BlockChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind_tag(), self.share_tag())
    }
}

/// Model-wide dimensions shared by every genome of a search space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    /// Hidden size `C`.
    pub hidden: usize,
    pub layers: usize,
    /// Default head count before head search.
    pub heads: usize,
    /// Bottleneck inner width `c`.
    pub inner: usize,
    pub ffn_init: usize,
    pub ffn_step: usize,
    pub ffn_max: usize,
    /// Positional-embedding rows.
    pub max_len: usize,
    pub tie_head: bool,
}

impl ModelDims {
    /// Laptop-scale profile.
    pub fn desk(vocab: usize) -> Self {
        ModelDims {
            vocab,
            hidden: 64,
            layers: 4,
            heads: 8,
            inner: 16,
            ffn_init: 16,
            ffn_step: 16,
            ffn_max: 128,
            max_len: 128,
            tie_head: false,
        }
    }

    /// Full-size supernet: C=528, 12 layers, 12 heads, FFN 132→1056, inner 132.
    pub fn full(vocab: usize) -> Self {
        ModelDims {
            vocab,
            hidden: 528,
            layers: 12,
            heads: 12,
            inner: 132,
            ffn_init: 132,
            ffn_step: 132,
            ffn_max: 1056,
            max_len: 512,
            tie_head: false,
        }
    }

    /// Reduced profile: C=192 over 6 layers.
    pub fn micro(vocab: usize) -> Self {
        ModelDims {
            vocab,
            hidden: 192,
            layers: 6,
            heads: 12,
            inner: 48,
            ffn_init: 48,
            ffn_step: 48,
            ffn_max: 384,
            max_len: 512,
            tie_head: false,
        }
    }

    pub fn profile(name: &str, vocab: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(vocab)),
            "full" => Ok(Self::full(vocab)),
            "micro" => Ok(Self::micro(vocab)),
            other => Err(ElmError::Config(format!("unknown profile `{other}` (desk|full|micro)"))),
        }
    }

    /// Attention width of a block kind.
    pub fn width(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Standard => self.hidden,
            BlockKind::Bottleneck => self.inner,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ElmError::Config(m));
        if self.vocab < 4 || self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.inner == 0 {
            return bad(format!("degenerate model dims {self:?}"));
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.inner % self.heads != 0 {
            return bad(format!("inner {} not divisible by heads {}", self.inner, self.heads));
        }
        if self.ffn_step == 0 || self.ffn_init == 0 || self.ffn_init > self.ffn_max {
            return bad(format!(
                "ffn range {}..={} step {} is invalid",
                self.ffn_init, self.ffn_max, self.ffn_step
            ));
        }
        if self.ffn_init % self.ffn_step != 0 || self.ffn_max % self.ffn_step != 0 {
            return bad(format!(
                "ffn bounds {} and {} must be multiples of the step {}",
                self.ffn_init, self.ffn_max, self.ffn_step
            ));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        Ok(())
    }
}

/// One layer of a genome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerGene {
    pub choice: BlockChoice,
    pub ffn_dim: usize,
    pub heads: usize,
}

/// A complete architecture: one gene per layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchGenome {
    pub layers: Vec<LayerGene>,
}

const GENOME_HEADER: &str = "ELMGENOME 1";

impl ArchGenome {
    pub fn new(layers: Vec<LayerGene>) -> Self {
        ArchGenome { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn choices(&self) -> Vec<BlockChoice> {
        self.layers.iter().map(|g| g.choice).collect()
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        if self.layers.len() != dims.layers {
            return Err(ElmError::Contract(format!(
                "genome has {} layers, model has {}",
                self.layers.len(),
                dims.layers
            )));
        }
        for (i, g) in self.layers.iter().enumerate() {
            if g.ffn_dim < dims.ffn_init || g.ffn_dim > dims.ffn_max || g.ffn_dim % dims.ffn_step != 0 {
                return Err(ElmError::Contract(format!(
                    "layer {i}: ffn_dim {} outside {}..={} in steps of {}",
                    g.ffn_dim, dims.ffn_init, dims.ffn_max, dims.ffn_step
                )));
            }
            let width = dims.width(g.choice.kind);
            if g.heads == 0 || width % g.heads != 0 {
                return Err(ElmError::Contract(format!(
                    "layer {i}: width {width} is not divisible by {} heads",
                    g.heads
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(GENOME_HEADER);
        out.push('\n');
        for (i, g) in self.layers.iter().enumerate() {
            out.push_str(&format!(
                "layer={i} kind={} share={} ffn={} heads={}\n",
                g.choice.kind_tag(),
                g.choice.share_tag(),
                g.ffn_dim,
                g.heads
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some(GENOME_HEADER) {
            return Err(ElmError::Parse(format!("genome must start with `{GENOME_HEADER}`")));
        }
        let mut layers = Vec::new();
        for line in lines {
            let mut fields = std::collections::HashMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| ElmError::Parse(format!("bad genome token `{tok}`")))?;
                fields.insert(k, v);
            }
            let get = |k: &str| {
                fields
                    .get(k)
                    .copied()
                    .ok_or_else(|| ElmError::Parse(format!("genome line `{line}` lacks `{k}`")))
            };
            let num = |k: &str| -> Result<usize> {
                get(k)?
                    .parse()
                    .map_err(|_| ElmError::Parse(format!("bad `{k}` in `{line}`")))
            };
            if num("layer")? != layers.len() {
                return Err(ElmError::Parse(format!("layers out of order at `{line}`")));
            }
            let kind = match get("kind")? {
                "std" => BlockKind::Standard,
                "btl" => BlockKind::Bottleneck,
                k => return Err(ElmError::Parse(format!("unknown kind `{k}`"))),
            };
            let share = match get("share")? {
                "none" => ShareMode::NoShare,
                "qv" => ShareMode::ShareQV,
                "kv" => ShareMode::ShareKV,
                s => return Err(ElmError::Parse(format!("unknown share mode `{s}`"))),
            };
            layers.push(LayerGene {
                choice: BlockChoice::new(kind, share),
                ffn_dim: num("ffn")?,
                heads: num("heads")?,
            });
        }
        Ok(ArchGenome { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| ElmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ElmError::io(path, e))?;
        Self::from_text(&text)
    }
}

impl fmt::Display for ArchGenome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|g| format!("{}:d{}:h{}", g.choice, g.ffn_dim, g.heads))
            .collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

/// Attention parameter count at width `w`: four projections, minus one when a pair is shared.
fn attention_params(w: u64, share: ShareMode) -> u64 {
    let projections = if share == ShareMode::NoShare { 4 } else { 3 };
    projections * (w * w + w)
}

/// Parameters of one block with FFN hidden size `ffn`.
pub fn block_params(choice: BlockChoice, ffn: usize, dims: &ModelDims) -> u64 {
    let c = dims.hidden as u64;
    let d = ffn as u64;
    match choice.kind {
        BlockKind::Standard => attention_params(c, choice.share) + (2 * c * d + d + c) + 4 * c,
        BlockKind::Bottleneck => {
            let i = dims.inner as u64;
            let entry = c * i + i;
            let exit = i * c + c;
            let ffn = 2 * i * d + d + i;
            entry + attention_params(i, choice.share) + ffn + exit + 6 * i + 2 * c
        }
    }
}

/// Embeddings, final norm and output head: present once in every model.
pub fn embedding_params(dims: &ModelDims) -> u64 {
    let (v, c, n) = (dims.vocab as u64, dims.hidden as u64, dims.max_len as u64);
    let head = if dims.tie_head { v } else { c * v + v };
    v * c + n * c + 2 * c + head
}

/// Exact parameter count of a whole model built from `genome`.
pub fn count_params(genome: &ArchGenome, dims: &ModelDims) -> Result<u64> {
    genome.validate(dims)?;
    Ok(count_blocks(genome, dims) + embedding_params(dims))
}

fn count_blocks(genome: &ArchGenome, dims: &ModelDims) -> u64 {
    genome
        .layers
        .iter()
        .map(|g| block_params(g.choice, g.ffn_dim, dims))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub ceiling: u64,
    pub embedding_counted: bool,
}

impl ParamBudget {
    pub fn new(ceiling: u64) -> Self {
        ParamBudget {
            ceiling,
            embedding_counted: true,
        }
    }

    /// Count that is compared against the ceiling.
    pub fn budgeted_count(&self, genome: &ArchGenome, dims: &ModelDims) -> Result<u64> {
        genome.validate(dims)?;
        let blocks = count_blocks(genome, dims);
        Ok(if self.embedding_counted {
            blocks + embedding_params(dims)
        } else {
            blocks
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetCheck {
    pub pass: bool,
    pub count: u64,
}

/// Passes iff the budgeted count is at most the ceiling. Invalid genomes fail.
pub fn check_budget(genome: &ArchGenome, dims: &ModelDims, budget: &ParamBudget) -> BudgetCheck {
    match budget.budgeted_count(genome, dims) {
        Ok(count) => BudgetCheck {
            pass: count <= budget.ceiling,
            count,
        },
        Err(_) => BudgetCheck {
            pass: false,
            count: u64::MAX,
        },
    }
}

/// Elastic state of the search space: current FFN width of every candidate
/// block, the default head count and the candidate set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub ffn: Vec<[usize; NUM_CANDIDATES]>,
    pub heads: usize,
    pub choices: Vec<BlockChoice>,
}

impl SearchSpace {
    pub fn initial(dims: &ModelDims, weight_sharing: bool) -> Self {
        SearchSpace {
            ffn: vec![[dims.ffn_init; NUM_CANDIDATES]; dims.layers],
            heads: dims.heads,
            choices: if weight_sharing {
                BlockChoice::ALL.to_vec()
            } else {
                BlockChoice::UNSHARED.to_vec()
            },
        }
    }

    pub fn layers(&self) -> usize {
        self.ffn.len()
    }

    pub fn gene(&self, layer: usize, choice: BlockChoice) -> LayerGene {
        LayerGene {
            choice,
            ffn_dim: self.ffn[layer][choice.index()],
            heads: self.heads,
        }
    }

    pub fn genome_from_choices(&self, choices: &[BlockChoice]) -> ArchGenome {
        ArchGenome::new(
            choices
                .iter()
                .enumerate()
                .map(|(l, &c)| self.gene(l, c))
                .collect(),
        )
    }

    /// Uniform draw over the candidate set at every layer.
    pub fn random_genome<R: Rng + ?Sized>(&self, rng: &mut R) -> ArchGenome {
        let choices: Vec<BlockChoice> = (0..self.layers())
            .map(|_| self.choices[rng.random_range(0..self.choices.len())])
            .collect();
        self.genome_from_choices(&choices)
    }

    /// Most expensive candidate at every layer under the current widths.
    pub fn max_genome(&self, dims: &ModelDims) -> ArchGenome {
        let choices: Vec<BlockChoice> = (0..self.layers())
            .map(|l| {
                *self
                    .choices
                    .iter()
                    .max_by_key(|c| (block_params(**c, self.ffn[l][c.index()], dims), std::cmp::Reverse(c.index())))
                    .expect("non-empty candidate set")
            })
            .collect();
        self.genome_from_choices(&choices)
    }

    /// Budgeted size of the largest path; the quantity held under the ceiling during growth.
    pub fn max_path_params(&self, dims: &ModelDims, budget: &ParamBudget) -> u64 {
        let g = self.max_genome(dims);
        let blocks: u64 = g.layers.iter().map(|l| block_params(l.choice, l.ffn_dim, dims)).sum();
        if budget.embedding_counted {
            blocks + embedding_params(dims)
        } else {
            blocks
        }
    }

    /// Number of distinct block combinations.
    pub fn cardinality(&self) -> u128 {
        (self.choices.len() as u128).pow(self.layers() as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> ModelDims {
        ModelDims {
            vocab: 10,
            hidden: 8,
            layers: 2,
            heads: 2,
            inner: 4,
            ffn_init: 16,
            ffn_step: 16,
            ffn_max: 64,
            max_len: 8,
            tie_head: false,
        }
    }

    #[test]
    fn standard_block_counts() {
        let d = small_dims();
        let none = BlockChoice::new(BlockKind::Standard, ShareMode::NoShare);
        let qv = BlockChoice::new(BlockKind::Standard, ShareMode::ShareQV);
        assert_eq!(block_params(none, 16, &d), 600);
        assert_eq!(block_params(qv, 16, &d), 528);
    }

    #[test]
    fn ffn_below_init_is_a_contract_error() {
        let d = small_dims();
        let mut g = SearchSpace::initial(&d, true).genome_from_choices(&[BlockChoice::ALL[0]; 2]);
        g.layers[0].ffn_dim = 0;
        assert!(matches!(count_params(&g, &d), Err(ElmError::Contract(_))));
    }

    #[test]
    fn budget_boundary_is_inclusive() {
        let d = small_dims();
        let g = SearchSpace::initial(&d, true).genome_from_choices(&[BlockChoice::ALL[0]; 2]);
        let n = count_params(&g, &d).unwrap();
        assert!(check_budget(&g, &d, &ParamBudget::new(n)).pass);
        assert!(!check_budget(&g, &d, &ParamBudget::new(n - 1)).pass);
        assert!(!check_budget(&g, &d, &ParamBudget::new(0)).pass);
    }

    #[test]
    fn full_profile_all_standard_exceeds_five_million() {
        let d = ModelDims::full(512);
        let mut space = SearchSpace::initial(&d, true);
        space.ffn.iter_mut().for_each(|l| *l = [1056; 6]);
        let g = space.genome_from_choices(&[BlockChoice::ALL[0]; 12]);
        let check = check_budget(&g, &d, &ParamBudget::new(5_000_000));
        assert!(!check.pass);
        assert!(check.count > 5_000_000);
    }

    #[test]
    fn sharing_is_cheaper_and_symmetric() {
        let d = ModelDims::desk(80);
        for kind in [BlockKind::Standard, BlockKind::Bottleneck] {
            let n = block_params(BlockChoice::new(kind, ShareMode::NoShare), 32, &d);
            let qv = block_params(BlockChoice::new(kind, ShareMode::ShareQV), 32, &d);
            let kv = block_params(BlockChoice::new(kind, ShareMode::ShareKV), 32, &d);
            assert_eq!(qv, kv);
            assert!(qv < n);
        }
    }

    #[test]
    fn genome_text_format() {
        let d = small_dims();
        let g = SearchSpace::initial(&d, true).genome_from_choices(&[BlockChoice::ALL[4], BlockChoice::ALL[2]]);
        let text = g.to_text();
        assert_eq!(
            text,
            "ELMGENOME 1\nlayer=0 kind=btl share=qv ffn=16 heads=2\nlayer=1 kind=std share=kv ffn=16 heads=2\n"
        );
        assert_eq!(ArchGenome::from_text(&text).unwrap(), g);
        assert!(ArchGenome::from_text("ELMGENOME 2\n").is_err());
    }

    #[test]
    fn random_genome_is_seeded() {
        let space = SearchSpace::initial(&ModelDims::full(512), true);
        let a = space.random_genome(&mut ChaCha8Rng::seed_from_u64(5));
        let b = space.random_genome(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(space.cardinality(), 6u128.pow(12));
    }

    #[test]
    fn candidate_indices_round_trip() {
        for (i, c) in BlockChoice::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(BlockChoice::from_index(i), Some(*c));
        }
    }
}
