//! Named parameter storage and the tensor manifests that define every block's layout.

use std::collections::BTreeMap;

use rand::Rng;

use crate::archspace::{BlockChoice, BlockKind, ModelDims, ShareMode};
use crate::error::{ElmError, Result};
use crate::numkernel::{DType, Graph, Tensor, Var};

/// Standard deviation of freshly initialized weight matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl TensorSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        TensorSpec { name, shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R, dtype: DType) -> Tensor {
        let t = match self.init {
            Init::Normal => Tensor::randn(&self.shape, INIT_STD, rng),
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, 1.0),
        };
        t.cast(dtype)
    }
}

fn linear(out: &mut Vec<TensorSpec>, name: String, fan_in: usize, fan_out: usize) {
    out.push(TensorSpec::new(format!("{name}.w"), vec![fan_in, fan_out], Init::Normal));
    out.push(TensorSpec::new(format!("{name}.b"), vec![fan_out], Init::Zeros));
}

fn norm(out: &mut Vec<TensorSpec>, name: String, width: usize) {
    out.push(TensorSpec::new(format!("{name}.g"), vec![width], Init::Ones));
    out.push(TensorSpec::new(format!("{name}.b"), vec![width], Init::Zeros));
}

/// Projection tensor names for query, key, value and output. A shared
/// pair maps two roles to one name.
pub fn projection_names(share: ShareMode) -> [&'static str; 4] {
    match share {
        ShareMode::NoShare => ["attn.q", "attn.k", "attn.v", "attn.o"],
        ShareMode::ShareQV => ["attn.qv", "attn.k", "attn.qv", "attn.o"],
        ShareMode::ShareKV => ["attn.q", "attn.kv", "attn.kv", "attn.o"],
    }
}

fn attention(out: &mut Vec<TensorSpec>, prefix: &str, share: ShareMode, width: usize) {
    let mut seen: Vec<&str> = Vec::new();
    for name in projection_names(share) {
        if !seen.contains(&name) {
            seen.push(name);
            linear(out, format!("{prefix}.{name}"), width, width);
        }
    }
}

fn ffn(out: &mut Vec<TensorSpec>, prefix: &str, width: usize, d: usize) {
    out.push(TensorSpec::new(format!("{prefix}.ffn.w1"), vec![width, d], Init::Normal));
    out.push(TensorSpec::new(format!("{prefix}.ffn.b1"), vec![d], Init::Zeros));
    out.push(TensorSpec::new(format!("{prefix}.ffn.w2"), vec![d, width], Init::Normal));
    out.push(TensorSpec::new(format!("{prefix}.ffn.b2"), vec![width], Init::Zeros));
}

/// Every tensor of one block, in initialization order.
pub fn block_manifest(prefix: &str, choice: BlockChoice, ffn_dim: usize, dims: &ModelDims) -> Vec<TensorSpec> {
    let c = dims.hidden;
    let mut out = Vec::new();
    match choice.kind {
        BlockKind::Standard => {
            norm(&mut out, format!("{prefix}.ln1"), c);
            attention(&mut out, prefix, choice.share, c);
            norm(&mut out, format!("{prefix}.ln2"), c);
            ffn(&mut out, prefix, c, ffn_dim);
        }
        BlockKind::Bottleneck => {
            let i = dims.inner;
            linear(&mut out, format!("{prefix}.entry"), c, i);
            norm(&mut out, format!("{prefix}.entry_norm"), i);
            norm(&mut out, format!("{prefix}.ln1"), i);
            attention(&mut out, prefix, choice.share, i);
            norm(&mut out, format!("{prefix}.ln2"), i);
            ffn(&mut out, prefix, i, ffn_dim);
            linear(&mut out, format!("{prefix}.exit"), i, c);
            norm(&mut out, format!("{prefix}.exit_norm"), c);
        }
    }
    out
}

/// Embeddings, final norm and output head.
pub fn embedding_manifest(dims: &ModelDims) -> Vec<TensorSpec> {
    let (v, c) = (dims.vocab, dims.hidden);
    let mut out = vec![
        TensorSpec::new("emb.tok".into(), vec![v, c], Init::Normal),
        TensorSpec::new("emb.pos".into(), vec![dims.max_len, c], Init::Normal),
    ];
    norm(&mut out, "head.norm".into(), c);
    if !dims.tie_head {
        out.push(TensorSpec::new("head.out".into(), vec![c, v], Init::Normal));
    }
    out.push(TensorSpec::new("head.bias".into(), vec![v], Init::Zeros));
    out
}

/// Name → tensor map, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn materialize<R: Rng + ?Sized>(&mut self, specs: &[TensorSpec], rng: &mut R, dtype: DType) {
        for s in specs {
            self.tensors.insert(s.name.clone(), s.materialize(rng, dtype));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ElmError::Contract(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    /// Total elements of tensors whose name starts with `prefix.`.
    pub fn numel_under(&self, prefix: &str) -> u64 {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(&p))
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    /// Replaces a tensor; the new value must keep the old shape.
    pub fn update(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| ElmError::Contract(format!("no parameter named `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(ElmError::Dimension(format!(
                "update of `{name}`: shape {:?} does not match {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn cast(&self, dtype: DType) -> ParamStore {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast(dtype))).collect(),
        }
    }
}

/// Binds stored tensors as graph leaves, once per name per graph.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: bool,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = g.leaf(self.store.get(name)?, self.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Every bound leaf, by parameter name.
    pub fn into_bound(self) -> BTreeMap<String, Var> {
        self.bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::block_params;

    #[test]
    fn shared_pair_is_one_tensor() {
        let dims = ModelDims::desk(40);
        let qv = block_manifest("b", BlockChoice::ALL[1], 16, &dims);
        assert!(qv.iter().any(|s| s.name == "b.attn.qv.w"));
        assert!(!qv.iter().any(|s| s.name == "b.attn.q.w" || s.name == "b.attn.v.w"));
        let kv = block_manifest("b", BlockChoice::ALL[5], 16, &dims);
        assert!(kv.iter().any(|s| s.name == "b.attn.kv.w"));
    }

    #[test]
    fn manifests_are_unique_and_match_closed_form() {
        let dims = ModelDims::desk(40);
        for c in BlockChoice::ALL {
            let m = block_manifest("b", c, 48, &dims);
            let mut names: Vec<&str> = m.iter().map(|s| s.name.as_str()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), m.len());
            let n: usize = m.iter().map(TensorSpec::numel).sum();
            assert_eq!(n as u64, block_params(c, 48, &dims), "{c}");
        }
    }
}
