//! Forward pass shared by the supernet and standalone models.

use std::collections::BTreeMap;

use crate::archspace::{BlockKind, LayerGene, ModelDims};
use crate::corpus::{Batch, Objective, PAD};
use crate::error::{ElmError, Result};
use crate::numkernel::{Graph, Tensor, Var};

use super::params::{projection_names, Binder, ParamStore};

pub const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;

/// Graph handles for one layer's intermediate activations.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    /// Attention probabilities, `[B·H, N, N]`.
    pub attn: Var,
    /// Attention context before head merge, `[B·H, N, w/H]`.
    pub ctx: Var,
    /// FFN activation after GELU, `[B·N, d]`.
    pub ffn_hidden: Var,
    /// FFN branch output in model width, `[B·N, C]`.
    pub ffn_out: Var,
    /// Block output, `[B·N, C]`.
    pub output: Var,
    pub heads: usize,
    pub width: usize,
}

pub struct Forward {
    /// `[B·N, V]`.
    pub logits: Var,
    pub layers: Vec<LayerVars>,
    /// Leaves bound during the pass, by parameter name.
    pub leaves: BTreeMap<String, Var>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Additive attention mask for `heads` heads, or `None` when nothing is masked.
fn attention_mask(batch: &Batch, heads: usize) -> Option<Tensor> {
    let (b, n) = (batch.batch_size, batch.seq_len);
    let causal = batch.objective == Objective::Clm;
    let has_pad = batch.input_ids.contains(&PAD);
    if !causal && !has_pad {
        return None;
    }
    let mut data = vec![0.0; b * heads * n * n];
    for bi in 0..b {
        let ids = &batch.input_ids[bi * n..(bi + 1) * n];
        for h in 0..heads {
            let base = (bi * heads + h) * n * n;
            for q in 0..n {
                for (k, &id) in ids.iter().enumerate() {
                    if id == PAD || (causal && k > q) {
                        data[base + q * n + k] = MASK_FILL;
                    }
                }
            }
        }
    }
    Some(Tensor::new(vec![b * heads, n, n], data).expect("finite mask"))
}

struct Ctx<'a, 'b> {
    g: &'a mut Graph,
    p: &'a mut Binder<'b>,
    batch: &'a Batch,
    masks: BTreeMap<usize, Option<Var>>,
}

impl Ctx<'_, '_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        self.p.get(self.g, name)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.g.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.param(&format!("{name}.g"))?;
        let b = self.param(&format!("{name}.b"))?;
        self.g.layer_norm(x, g, b, LN_EPS)
    }

    fn mask(&mut self, heads: usize) -> Option<Var> {
        if let Some(m) = self.masks.get(&heads) {
            return *m;
        }
        let m = attention_mask(self.batch, heads).map(|t| self.g.constant(&t));
        self.masks.insert(heads, m);
        m
    }

    /// Multi-head self-attention at width `w`. Returns (output, probs, ctx).
    fn attention(&mut self, x: Var, prefix: &str, gene: &LayerGene, w: usize) -> Result<(Var, Var, Var)> {
        let (b, n, h) = (self.batch.batch_size, self.batch.seq_len, gene.heads);
        let dh = w / h;
        let names = projection_names(gene.choice.share);
        let mut projected: BTreeMap<&str, Var> = BTreeMap::new();
        let mut split = [None; 3];
        for (role, name) in names[..3].iter().enumerate() {
            let y = match projected.get(name) {
                Some(&y) => y,
                None => {
                    let y = self.linear(x, &format!("{prefix}.{name}"))?;
                    projected.insert(name, y);
                    y
                }
            };
            let y4 = self.g.reshape(y, &[b, n, h, dh])?;
            let t = self.g.swap_axes12(y4, [b, n, h, dh])?;
            split[role] = Some(self.g.reshape(t, &[b * h, n, dh])?);
        }
        let [q, k, v] = split.map(|s| s.expect("all roles projected"));
        let scores = self.g.batch_matmul(q, k, true)?;
        let mut scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = self.mask(h) {
            scores = self.g.add(scores, m)?;
        }
        let probs = self.g.softmax(scores)?;
        let ctx = self.g.batch_matmul(probs, v, false)?;
        let merged = self.g.swap_axes12(ctx, [b, h, n, dh])?;
        let merged = self.g.reshape(merged, &[b * n, w])?;
        let out = self.linear(merged, &format!("{prefix}.{}", names[3]))?;
        Ok((out, probs, ctx))
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<(Var, Var)> {
        let w1 = self.param(&format!("{prefix}.ffn.w1"))?;
        let b1 = self.param(&format!("{prefix}.ffn.b1"))?;
        let pre = self.g.linear(x, w1, b1)?;
        let hidden = self.g.gelu(pre)?;
        let w2 = self.param(&format!("{prefix}.ffn.w2"))?;
        let b2 = self.param(&format!("{prefix}.ffn.b2"))?;
        let out = self.g.linear(hidden, w2, b2)?;
        Ok((out, hidden))
    }

    fn block(&mut self, x: Var, prefix: &str, gene: &LayerGene, dims: &ModelDims) -> Result<LayerVars> {
        match gene.choice.kind {
            BlockKind::Standard => {
                let w = dims.hidden;
                let a_in = self.norm(x, &format!("{prefix}.ln1"))?;
                let (a, attn, ctx) = self.attention(a_in, prefix, gene, w)?;
                let h = self.g.add(x, a)?;
                let f_in = self.norm(h, &format!("{prefix}.ln2"))?;
                let (ffn_out, ffn_hidden) = self.ffn(f_in, prefix)?;
                let output = self.g.add(h, ffn_out)?;
                Ok(LayerVars {
                    attn,
                    ctx,
                    ffn_hidden,
                    ffn_out,
                    output,
                    heads: gene.heads,
                    width: w,
                })
            }
            BlockKind::Bottleneck => {
                let w = dims.inner;
                let e = self.linear(x, &format!("{prefix}.entry"))?;
                let h = self.norm(e, &format!("{prefix}.entry_norm"))?;
                let a_in = self.norm(h, &format!("{prefix}.ln1"))?;
                let (a, attn, ctx) = self.attention(a_in, prefix, gene, w)?;
                let h = self.g.add(h, a)?;
                let f_in = self.norm(h, &format!("{prefix}.ln2"))?;
                let (f, ffn_hidden) = self.ffn(f_in, prefix)?;
                let h = self.g.add(h, f)?;
                let y = self.linear(h, &format!("{prefix}.exit"))?;
                let ffn_out = self.norm(y, &format!("{prefix}.exit_norm"))?;
                let output = self.g.add(x, ffn_out)?;
                Ok(LayerVars {
                    attn,
                    ctx,
                    ffn_hidden,
                    ffn_out,
                    output,
                    heads: gene.heads,
                    width: w,
                })
            }
        }
    }
}

/// Runs embeddings, the given blocks (`(parameter prefix, gene)` per layer) and the output head.
pub fn forward_network(
    g: &mut Graph,
    store: &ParamStore,
    dims: &ModelDims,
    layers: &[(String, LayerGene)],
    batch: &Batch,
    trainable: bool,
) -> Result<Forward> {
    let (b, n) = (batch.batch_size, batch.seq_len);
    if batch.input_ids.len() != b * n {
        return Err(ElmError::Input(format!(
            "batch holds {} ids, expected {b}×{n}",
            batch.input_ids.len()
        )));
    }
    if n > dims.max_len {
        return Err(ElmError::Input(format!(
            "sequence length {n} exceeds the positional table ({})",
            dims.max_len
        )));
    }
    let mut binder = Binder::new(store, trainable);
    let mut cx = Ctx {
        g,
        p: &mut binder,
        batch,
        masks: BTreeMap::new(),
    };
    let tok = cx.param("emb.tok")?;
    let pos = cx.param("emb.pos")?;
    let tok_rows = cx.g.embedding(tok, &batch.input_ids)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
    let pos_rows = cx.g.embedding(pos, &positions)?;
    let mut x = cx.g.add(tok_rows, pos_rows)?;
    let mut vars = Vec::with_capacity(layers.len());
    for (prefix, gene) in layers {
        let lv = cx.block(x, prefix, gene, dims)?;
        x = lv.output;
        vars.push(lv);
    }
    let x = cx.norm(x, "head.norm")?;
    let bias = cx.param("head.bias")?;
    let logits = if dims.tie_head {
        let t = cx.g.transpose(tok)?;
        cx.g.linear(x, t, bias)?
    } else {
        let w = cx.param("head.out")?;
        cx.g.linear(x, w, bias)?
    };
    Ok(Forward {
        logits,
        layers: vars,
        leaves: binder.into_bound(),
        batch_size: b,
        seq_len: n,
    })
}

/// Materialized activations of one layer.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// `[B, H, N, N]`.
    pub attention: Tensor,
    /// One `[(B·N) × w/H]` matrix per head.
    pub heads: Vec<Tensor>,
    /// `[(B·N) × d]`.
    pub ffn_hidden: Tensor,
    /// `[B, N, C]`.
    pub ffn_out: Tensor,
}

#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
    /// `[(B·N) × V]`.
    pub logits: Tensor,
}

impl ActivationTrace {
    pub fn collect(g: &Graph, fwd: &Forward) -> Result<Self> {
        let (b, n) = (fwd.batch_size, fwd.seq_len);
        let mut layers = Vec::with_capacity(fwd.layers.len());
        for lv in &fwd.layers {
            let h = lv.heads;
            let dh = lv.width / h;
            let attention = g.value(lv.attn).reshape(&[b, h, n, n])?;
            let ctx = g.value(lv.ctx).data();
            let heads = (0..h)
                .map(|hi| {
                    let mut rows = Vec::with_capacity(b * n * dh);
                    for bi in 0..b {
                        let start = (bi * h + hi) * n * dh;
                        rows.extend_from_slice(&ctx[start..start + n * dh]);
                    }
                    Tensor::new(vec![b * n, dh], rows)
                })
                .collect::<Result<Vec<_>>>()?;
            let c = g.shape(lv.ffn_out)[1];
            layers.push(LayerTrace {
                attention,
                heads,
                ffn_hidden: g.value(lv.ffn_hidden).clone(),
                ffn_out: g.value(lv.ffn_out).reshape(&[b, n, c])?,
            });
        }
        Ok(ActivationTrace {
            layers,
            logits: g.value(fwd.logits).clone(),
        })
    }
}
