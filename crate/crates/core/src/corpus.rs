//! Character-level corpus ingestion and masked / causal LM batch construction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ElmError, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: usize = 3;
pub const MAX_VOCAB: usize = 512;

const VOCAB_HEADER: &str = "ELMVOCAB 1";

/// Character ↔ id map. Ids `0..3` are PAD, MASK and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocab {
    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + RESERVED))
            .collect();
        Vocab { chars, index }
    }

    /// Builds a vocabulary of at most [`MAX_VOCAB`] ids.
    pub fn build(text: &str) -> Result<Self> {
        Self::build_limited(text, MAX_VOCAB)
    }

    /// Keeps the `limit - 3` most frequent characters (ties by codepoint),
    /// then orders them by codepoint.
    pub fn build_limited(text: &str, limit: usize) -> Result<Self> {
        if text.is_empty() {
            return Err(ElmError::Input("cannot build a vocabulary from empty text".into()));
        }
        if !(RESERVED + 1..=MAX_VOCAB).contains(&limit) {
            return Err(ElmError::Config(format!(
                "vocab limit must be in {}..={MAX_VOCAB}, got {limit}",
                RESERVED + 1
            )));
        }
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        for c in text.chars() {
            *counts.entry(c).or_default() += 1;
        }
        let mut ranked: Vec<(char, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(limit - RESERVED);
        let mut chars: Vec<char> = ranked.into_iter().map(|(c, _)| c).collect();
        chars.sort_unstable();
        Ok(Self::from_chars(chars))
    }

    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| match i {
                PAD => '\u{2400}',
                MASK => '\u{2588}',
                UNK => '\u{fffd}',
                _ => self.chars.get(i - RESERVED).copied().unwrap_or('\u{fffd}'),
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for (i, c) in self.chars.iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", i + RESERVED, *c as u32));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(ElmError::Parse(format!("vocab file must start with `{VOCAB_HEADER}`")));
        }
        let mut chars = Vec::new();
        for (n, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let (id, cp) = line
                .split_once('\t')
                .ok_or_else(|| ElmError::Parse(format!("bad vocab line `{line}`")))?;
            let id: usize = id.parse().map_err(|_| ElmError::Parse(format!("bad id in `{line}`")))?;
            if id != n + RESERVED {
                return Err(ElmError::Parse(format!("vocab ids not contiguous at `{line}`")));
            }
            let c = cp
                .parse::<u32>()
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| ElmError::Parse(format!("bad codepoint in `{line}`")))?;
            chars.push(c);
        }
        Ok(Self::from_chars(chars))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| ElmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ElmError::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Mlm,
    Clm,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Clm => "clm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(Objective::Mlm),
            "clm" => Ok(Objective::Clm),
            other => Err(ElmError::Config(format!("unknown objective `{other}` (mlm|clm)"))),
        }
    }
}

/// A `B×N` batch. All arrays are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub objective: Objective,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

fn check_grid(ids: &[usize], batch_size: usize, seq_len: usize) -> Result<()> {
    if batch_size == 0 || seq_len == 0 || ids.len() != batch_size * seq_len {
        return Err(ElmError::Input(format!(
            "{} ids do not form a {batch_size}×{seq_len} grid",
            ids.len()
        )));
    }
    Ok(())
}

/// BERT-style corruption: each non-PAD position is selected with `mask_prob`;
/// selected positions become MASK (80%), a random token (10%) or stay (10%).
///
/// Per position, in row-major order, the generator draws one uniform for
/// selection and, if selected, one uniform for the corruption kind and
/// possibly one token id.
pub fn make_mlm_batch(
    ids: &[usize],
    batch_size: usize,
    seq_len: usize,
    vocab_size: usize,
    mask_prob: f64,
    seed: u64,
) -> Result<Batch> {
    check_grid(ids, batch_size, seq_len)?;
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(ElmError::Contract(format!("mask_prob must be in [0,1], got {mask_prob}")));
    }
    if vocab_size <= RESERVED {
        return Err(ElmError::Contract("vocabulary has no ordinary tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input_ids = ids.to_vec();
    let mut loss_mask = vec![false; ids.len()];
    for (pos, &id) in ids.iter().enumerate() {
        if id == PAD {
            continue;
        }
        if rng.random::<f64>() >= mask_prob {
            continue;
        }
        loss_mask[pos] = true;
        let kind: f64 = rng.random();
        if kind < 0.8 {
            input_ids[pos] = MASK;
        } else if kind < 0.9 {
            input_ids[pos] = rng.random_range(RESERVED..vocab_size);
        }
    }
    Ok(Batch {
        input_ids,
        target_ids: ids.to_vec(),
        loss_mask,
        batch_size,
        seq_len,
        objective: Objective::Mlm,
    })
}

/// Next-token targets: `target[b,t] = input[b,t+1]`; the last column and PAD
/// positions carry no loss.
pub fn make_clm_batch(ids: &[usize], batch_size: usize, seq_len: usize) -> Result<Batch> {
    check_grid(ids, batch_size, seq_len)?;
    if seq_len < 2 {
        return Err(ElmError::Input(format!("causal batches need seq_len >= 2, got {seq_len}")));
    }
    let mut target_ids = vec![PAD; ids.len()];
    let mut loss_mask = vec![false; ids.len()];
    for b in 0..batch_size {
        for t in 0..seq_len - 1 {
            let pos = b * seq_len + t;
            target_ids[pos] = ids[pos + 1];
            loss_mask[pos] = ids[pos] != PAD && ids[pos + 1] != PAD;
        }
    }
    Ok(Batch {
        input_ids: ids.to_vec(),
        target_ids,
        loss_mask,
        batch_size,
        seq_len,
        objective: Objective::Clm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    Downstream,
    Validation,
}

/// Encoded corpus with contiguous pretrain / downstream / validation slices.
/// Validation is the final 10%, downstream the 10% before it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    ids: Vec<usize>,
    bounds: [usize; 2],
}

impl Corpus {
    pub fn from_text(text: &str, vocab_limit: usize) -> Result<Self> {
        let vocab = Vocab::build_limited(text, vocab_limit)?;
        Self::with_vocab(text, vocab)
    }

    pub fn with_vocab(text: &str, vocab: Vocab) -> Result<Self> {
        let ids = vocab.encode(text);
        if ids.len() < 20 {
            return Err(ElmError::Input(format!(
                "corpus of {} characters is too small to split",
                ids.len()
            )));
        }
        let n = ids.len();
        let bounds = [n * 8 / 10, n * 9 / 10];
        Ok(Corpus { vocab, ids, bounds })
    }

    pub fn load(path: &Path, vocab_limit: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ElmError::io(path, e))?;
        Self::from_text(&text, vocab_limit)
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Pretrain => &self.ids[..self.bounds[0]],
            Split::Downstream => &self.ids[self.bounds[0]..self.bounds[1]],
            Split::Validation => &self.ids[self.bounds[1]..],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `batch_size` windows at uniformly random offsets, PAD-filled past the end.
    pub fn random_windows<R: Rng + ?Sized>(&self, split: Split, batch_size: usize, seq_len: usize, rng: &mut R) -> Vec<usize> {
        let src = self.split(split);
        let span = src.len().saturating_sub(seq_len) + 1;
        let mut out = Vec::with_capacity(batch_size * seq_len);
        for _ in 0..batch_size {
            let start = rng.random_range(0..span);
            out.extend((start..start + seq_len).map(|i| src.get(i).copied().unwrap_or(PAD)));
        }
        out
    }

    /// Consecutive non-overlapping windows grouped into batches; the final
    /// window is PAD-filled.
    pub fn sequential_windows(&self, split: Split, batch_size: usize, seq_len: usize, max_batches: usize) -> Vec<Vec<usize>> {
        let src = self.split(split);
        let windows: Vec<Vec<usize>> = src
            .chunks(seq_len)
            .map(|c| {
                let mut w = c.to_vec();
                w.resize(seq_len, PAD);
                w
            })
            .collect();
        windows
            .chunks(batch_size)
            .filter(|group| group.len() == batch_size)
            .take(max_batches)
            .map(|group| group.concat())
            .collect()
    }

    /// Objective-specific batch from raw ids.
    pub fn make_batch(&self, ids: &[usize], batch_size: usize, seq_len: usize, objective: Objective, mask_prob: f64, seed: u64) -> Result<Batch> {
        match objective {
            Objective::Mlm => make_mlm_batch(ids, batch_size, seq_len, self.vocab.len(), mask_prob, seed),
            Objective::Clm => make_clm_batch(ids, batch_size, seq_len),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_enumerates_sorted_characters() {
        let v = Vocab::build("aba").unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id('a'), 3);
        assert_eq!(v.id('b'), 4);
        assert_eq!(v.id('z'), UNK);
        assert_eq!(Vocab::build("aba").unwrap(), v);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(Vocab::build(""), Err(ElmError::Input(_))));
    }

    #[test]
    fn limited_vocab_keeps_frequent_chars() {
        let v = Vocab::build_limited("zzzyyx", 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id('x'), UNK);
        assert!(v.id('y') < v.id('z'));
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::build("héllo wörld\n\t").unwrap();
        let text = v.to_text();
        assert!(text.starts_with("ELMVOCAB 1\n"));
        assert_eq!(Vocab::from_text(&text).unwrap(), v);
    }

    #[test]
    fn mlm_zero_probability_is_identity() {
        let ids = vec![3, 4, 5, 6, 0, 0];
        let b = make_mlm_batch(&ids, 2, 3, 10, 0.0, 1).unwrap();
        assert_eq!(b.input_ids, ids);
        assert!(b.loss_mask.iter().all(|m| !m));
    }

    #[test]
    fn mlm_never_selects_padding() {
        let ids = vec![3, 4, 0, 0, 5, 0];
        let b = make_mlm_batch(&ids, 1, 6, 10, 1.0, 3).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(b.loss_mask[i], id != PAD);
        }
    }

    #[test]
    fn clm_shift() {
        let b = make_clm_batch(&[5, 6, 7], 1, 3).unwrap();
        assert_eq!(&b.target_ids[..2], &[6, 7]);
        assert_eq!(b.loss_mask, vec![true, true, false]);
        // un-shifting the targets reproduces the input tail
        assert_eq!(&b.target_ids[..2], &b.input_ids[1..]);
        let pad = make_clm_batch(&[0, 0, 0], 1, 3).unwrap();
        assert!(pad.loss_mask.iter().all(|m| !m));
        assert!(make_clm_batch(&[5], 1, 1).is_err());
    }

    #[test]
    fn splits_partition_the_corpus() {
        let text: String = "abcdefghij".repeat(10);
        let c = Corpus::from_text(&text, 64).unwrap();
        let total: usize = [Split::Pretrain, Split::Downstream, Split::Validation]
            .iter()
            .map(|&s| c.split(s).len())
            .sum();
        assert_eq!(total, 100);
        assert_eq!(c.split(Split::Validation).len(), 10);
    }
}
