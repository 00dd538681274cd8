//! The weight-sharing supernet: six candidate blocks per layer, single-path
//! execution, in-place FFN growth and activation tracing. Standalone models
//! built from a single genome live here too, since they run the same blocks.

mod network;
mod params;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archspace::{ArchGenome, BlockChoice, LayerGene, ModelDims, SearchSpace, NUM_CANDIDATES};
use crate::corpus::Batch;
use crate::error::{ElmError, Result};
use crate::numkernel::{DType, Graph, Tensor};

pub use network::{forward_network, ActivationTrace, Forward, LayerTrace, LayerVars, LN_EPS};
pub use params::{
    block_manifest, embedding_manifest, projection_names, Binder, Init, ParamStore, TensorSpec, INIT_STD,
};

/// How new FFN coordinates are filled when a block grows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrowInit {
    /// New weights from N(0, INIT_STD²), new biases zero.
    Normal,
    /// Everything new is zero; the block computes the same function.
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Growth {
    Grown { old: usize, new: usize },
    /// The block is already at the FFN cap.
    Refused,
}

/// Anything with named parameters that can be trained by the same loop.
pub trait Network {
    fn dims(&self) -> &ModelDims;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn dtype(&self) -> DType;
}

pub fn block_prefix(layer: usize, cand: usize) -> String {
    format!("layer.{layer}.cand.{cand}")
}

fn check_names(store: &ParamStore, specs: &[TensorSpec]) -> Result<()> {
    for s in specs {
        let t = store.get(&s.name)?;
        if t.shape() != s.shape.as_slice() {
            return Err(ElmError::Dimension(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                s.name,
                t.shape(),
                s.shape
            )));
        }
    }
    if store.len() != specs.len() {
        return Err(ElmError::Contract(format!(
            "parameter store holds {} tensors, layout expects {}",
            store.len(),
            specs.len()
        )));
    }
    Ok(())
}

/// Shared forward + optional trace materialization.
fn run_path(
    store: &ParamStore,
    dims: &ModelDims,
    layers: &[(String, LayerGene)],
    batch: &Batch,
    dtype: DType,
    trace: bool,
) -> Result<(Tensor, Option<ActivationTrace>)> {
    let mut g = Graph::new(dtype);
    let fwd = forward_network(&mut g, store, dims, layers, batch, false)?;
    let tr = if trace { Some(ActivationTrace::collect(&g, &fwd)?) } else { None };
    Ok((g.value(fwd.logits).clone(), tr))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Supernet {
    dims: ModelDims,
    space: SearchSpace,
    params: ParamStore,
    dtype: DType,
}

impl Supernet {
    pub fn new(dims: ModelDims, weight_sharing: bool, dtype: DType, seed: u64) -> Result<Self> {
        dims.validate()?;
        let space = SearchSpace::initial(&dims, weight_sharing);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.materialize(&embedding_manifest(&dims), &mut rng, dtype);
        for l in 0..dims.layers {
            for &c in &space.choices {
                let specs = block_manifest(&block_prefix(l, c.index()), c, space.ffn[l][c.index()], &dims);
                params.materialize(&specs, &mut rng, dtype);
            }
        }
        Ok(Supernet {
            dims,
            space,
            params,
            dtype,
        })
    }

    /// Reassembles a supernet from stored parts, checking every tensor.
    pub fn from_parts(dims: ModelDims, space: SearchSpace, params: ParamStore, dtype: DType) -> Result<Self> {
        dims.validate()?;
        if space.layers() != dims.layers {
            return Err(ElmError::Contract(format!(
                "search space has {} layers, dims say {}",
                space.layers(),
                dims.layers
            )));
        }
        let net = Supernet {
            dims,
            space,
            params,
            dtype,
        };
        check_names(&net.params, &net.manifest())?;
        Ok(net)
    }

    /// Layout of every tensor under the current elastic state.
    pub fn manifest(&self) -> Vec<TensorSpec> {
        let mut out = embedding_manifest(&self.dims);
        for l in 0..self.dims.layers {
            for &c in &self.space.choices {
                out.extend(block_manifest(
                    &block_prefix(l, c.index()),
                    c,
                    self.space.ffn[l][c.index()],
                    &self.dims,
                ));
            }
        }
        out
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn set_default_heads(&mut self, heads: usize) {
        self.space.heads = heads;
    }

    pub fn set_dtype(&mut self, dtype: DType) {
        self.dtype = dtype;
        self.params = self.params.cast(dtype);
    }

    /// `(prefix, gene)` per layer, after checking the genome against the elastic state.
    pub fn layer_plan(&self, genome: &ArchGenome) -> Result<Vec<(String, LayerGene)>> {
        genome.validate(&self.dims)?;
        genome
            .layers
            .iter()
            .enumerate()
            .map(|(l, gene)| {
                if !self.space.choices.contains(&gene.choice) {
                    return Err(ElmError::Contract(format!(
                        "layer {l}: candidate {} is not in this search space",
                        gene.choice
                    )));
                }
                let current = self.space.ffn[l][gene.choice.index()];
                if gene.ffn_dim != current {
                    return Err(ElmError::Contract(format!(
                        "layer {l}: genome asks for ffn {} but block {} is at {current}",
                        gene.ffn_dim, gene.choice
                    )));
                }
                Ok((block_prefix(l, gene.choice.index()), *gene))
            })
            .collect()
    }

    /// Builds the forward graph of one path. Only the chosen blocks are bound.
    pub fn forward(&self, g: &mut Graph, genome: &ArchGenome, batch: &Batch, trainable: bool) -> Result<Forward> {
        let plan = self.layer_plan(genome)?;
        forward_network(g, &self.params, &self.dims, &plan, batch, trainable)
    }

    pub fn forward_path(&self, genome: &ArchGenome, batch: &Batch, trace: bool) -> Result<(Tensor, Option<ActivationTrace>)> {
        let plan = self.layer_plan(genome)?;
        run_path(&self.params, &self.dims, &plan, batch, self.dtype, trace)
    }

    /// Widens one block's FFN by exactly one step, keeping existing weights in place.
    pub fn grow_ffn<R: Rng + ?Sized>(
        &mut self,
        layer: usize,
        cand: usize,
        new_dim: usize,
        init: GrowInit,
        rng: &mut R,
    ) -> Result<Growth> {
        if layer >= self.dims.layers || cand >= NUM_CANDIDATES {
            return Err(ElmError::Contract(format!("no block at layer {layer}, candidate {cand}")));
        }
        let choice = BlockChoice::ALL[cand];
        if !self.space.choices.contains(&choice) {
            return Err(ElmError::Contract(format!("candidate {choice} is not in this search space")));
        }
        let old = self.space.ffn[layer][cand];
        if new_dim > self.dims.ffn_max {
            return Ok(Growth::Refused);
        }
        if new_dim != old + self.dims.ffn_step {
            return Err(ElmError::Contract(format!(
                "growth must add exactly {} (from {old}), got {new_dim}",
                self.dims.ffn_step
            )));
        }
        let prefix = block_prefix(layer, cand);
        let width = self.dims.width(choice.kind);
        let extra = new_dim - old;
        let draw = |rng: &mut R, n: usize| -> Vec<f64> {
            match init {
                GrowInit::Normal => Tensor::randn(&[n], INIT_STD, rng).into_data(),
                GrowInit::Zeros => vec![0.0; n],
            }
        };

        let w1_name = format!("{prefix}.ffn.w1");
        let w1 = self.params.get(&w1_name)?;
        let fresh = draw(rng, width * extra);
        let mut data = Vec::with_capacity(width * new_dim);
        for (r, row) in w1.data().chunks_exact(old).enumerate() {
            data.extend_from_slice(row);
            data.extend_from_slice(&fresh[r * extra..(r + 1) * extra]);
        }
        let w1 = Tensor::with_dtype(vec![width, new_dim], data, self.dtype)?;

        let b1_name = format!("{prefix}.ffn.b1");
        let mut b1 = self.params.get(&b1_name)?.data().to_vec();
        b1.resize(new_dim, 0.0);
        let b1 = Tensor::with_dtype(vec![new_dim], b1, self.dtype)?;

        let w2_name = format!("{prefix}.ffn.w2");
        let mut w2 = self.params.get(&w2_name)?.data().to_vec();
        w2.extend(draw(rng, extra * width));
        let w2 = Tensor::with_dtype(vec![new_dim, width], w2, self.dtype)?;

        self.params.insert(w1_name, w1);
        self.params.insert(b1_name, b1);
        self.params.insert(w2_name, w2);
        self.space.ffn[layer][cand] = new_dim;
        Ok(Growth::Grown { old, new: new_dim })
    }

    /// Read-only copy for concurrent evaluation while training continues elsewhere.
    pub fn snapshot(&self) -> Arc<Supernet> {
        Arc::new(self.clone())
    }

    pub fn param_count(&self) -> u64 {
        self.params.numel()
    }
}

impl Network for Supernet {
    fn dims(&self) -> &ModelDims {
        &self.dims
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn dtype(&self) -> DType {
        self.dtype
    }
}

/// A single architecture with its own weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    dims: ModelDims,
    genome: ArchGenome,
    params: ParamStore,
    dtype: DType,
}

fn model_prefix(layer: usize) -> String {
    format!("layer.{layer}")
}

fn model_manifest(dims: &ModelDims, genome: &ArchGenome) -> Vec<TensorSpec> {
    let mut out = embedding_manifest(dims);
    for (l, gene) in genome.layers.iter().enumerate() {
        out.extend(block_manifest(&model_prefix(l), gene.choice, gene.ffn_dim, dims));
    }
    out
}

impl Model {
    pub fn new(dims: ModelDims, genome: ArchGenome, dtype: DType, seed: u64) -> Result<Self> {
        dims.validate()?;
        genome.validate(&dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.materialize(&model_manifest(&dims, &genome), &mut rng, dtype);
        Ok(Model {
            dims,
            genome,
            params,
            dtype,
        })
    }

    pub fn from_parts(dims: ModelDims, genome: ArchGenome, params: ParamStore, dtype: DType) -> Result<Self> {
        dims.validate()?;
        genome.validate(&dims)?;
        check_names(&params, &model_manifest(&dims, &genome))?;
        Ok(Model {
            dims,
            genome,
            params,
            dtype,
        })
    }

    pub fn genome(&self) -> &ArchGenome {
        &self.genome
    }

    pub fn set_dtype(&mut self, dtype: DType) {
        self.dtype = dtype;
        self.params = self.params.cast(dtype);
    }

    fn plan(&self) -> Vec<(String, LayerGene)> {
        self.genome
            .layers
            .iter()
            .enumerate()
            .map(|(l, g)| (model_prefix(l), *g))
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, trainable: bool) -> Result<Forward> {
        forward_network(g, &self.params, &self.dims, &self.plan(), batch, trainable)
    }

    pub fn forward_path(&self, batch: &Batch, trace: bool) -> Result<(Tensor, Option<ActivationTrace>)> {
        run_path(&self.params, &self.dims, &self.plan(), batch, self.dtype, trace)
    }

    pub fn param_count(&self) -> u64 {
        self.params.numel()
    }
}

impl Network for Model {
    fn dims(&self) -> &ModelDims {
        &self.dims
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn dtype(&self) -> DType {
        self.dtype
    }
}

/// Fresh, independently initialized model for a searched genome.
pub fn instantiate_final(net: &Supernet, genome: &ArchGenome, seed: u64) -> Result<Model> {
    Model::new(net.dims.clone(), genome.clone(), net.dtype, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{BlockKind, ShareMode};
    use crate::corpus::{make_mlm_batch, Objective};

    fn tiny() -> ModelDims {
        ModelDims {
            vocab: 20,
            hidden: 16,
            layers: 3,
            heads: 4,
            inner: 8,
            ffn_init: 8,
            ffn_step: 8,
            ffn_max: 24,
            max_len: 16,
            tie_head: false,
        }
    }

    fn batch() -> Batch {
        let ids: Vec<usize> = (0..2 * 6).map(|i| 3 + (i * 7) % 17).collect();
        make_mlm_batch(&ids, 2, 6, 20, 0.3, 1).unwrap()
    }

    #[test]
    fn trace_does_not_change_logits() {
        let net = Supernet::new(tiny(), true, DType::F32, 1).unwrap();
        let g = net.space().genome_from_choices(&[BlockChoice::ALL[0], BlockChoice::ALL[4], BlockChoice::ALL[2]]);
        let (a, _) = net.forward_path(&g, &batch(), false).unwrap();
        let (b, t) = net.forward_path(&g, &batch(), true).unwrap();
        assert!(a.bit_eq(&b));
        let t = t.unwrap();
        assert_eq!(t.layers[1].attention.shape(), &[2, 4, 6, 6]);
        assert_eq!(t.layers[1].heads[0].shape(), &[12, 2]);
        assert_eq!(t.layers[0].heads[0].shape(), &[12, 4]);
        assert_eq!(t.layers[2].ffn_out.shape(), &[2, 6, 16]);
    }

    #[test]
    fn ffn_mismatch_names_the_layer() {
        let net = Supernet::new(tiny(), true, DType::F64, 1).unwrap();
        let mut g = net.space().genome_from_choices(&[BlockChoice::ALL[0]; 3]);
        g.layers[2].ffn_dim = 16;
        let err = net.forward_path(&g, &batch(), false).unwrap_err().to_string();
        assert!(err.contains("layer 2"), "{err}");
    }

    #[test]
    fn growth_refused_at_cap_and_strict_step() {
        let mut net = Supernet::new(tiny(), true, DType::F64, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(net.grow_ffn(0, 1, 24, GrowInit::Normal, &mut rng).is_err());
        assert_eq!(net.grow_ffn(0, 1, 16, GrowInit::Normal, &mut rng).unwrap(), Growth::Grown { old: 8, new: 16 });
        net.grow_ffn(0, 1, 24, GrowInit::Normal, &mut rng).unwrap();
        assert_eq!(net.grow_ffn(0, 1, 32, GrowInit::Normal, &mut rng).unwrap(), Growth::Refused);
        assert_eq!(net.space().ffn[0][1], 24);
    }

    #[test]
    fn clm_attention_is_causal() {
        let net = Supernet::new(tiny(), true, DType::F64, 2).unwrap();
        let ids: Vec<usize> = (0..12).map(|i| 3 + i % 9).collect();
        let b = crate::corpus::make_clm_batch(&ids, 2, 6).unwrap();
        assert_eq!(b.objective, Objective::Clm);
        let g = net.space().genome_from_choices(&[BlockChoice::ALL[3]; 3]);
        let (_, t) = net.forward_path(&g, &b, true).unwrap();
        let a = &t.unwrap().layers[0].attention;
        for q in 0..6 {
            for k in (q + 1)..6 {
                assert_eq!(a.data()[q * 6 + k], 0.0);
            }
        }
    }

    #[test]
    fn bottleneck_head_dim_uses_inner_width() {
        let dims = tiny();
        let choice = BlockChoice::new(BlockKind::Bottleneck, ShareMode::ShareKV);
        let genome = ArchGenome::new(vec![
            LayerGene {
                choice,
                ffn_dim: 8,
                heads: 2
            };
            3
        ]);
        let m = Model::new(dims, genome, DType::F64, 0).unwrap();
        let (_, t) = m.forward_path(&batch(), true).unwrap();
        assert_eq!(t.unwrap().layers[0].heads[0].shape(), &[12, 4]);
    }
}
