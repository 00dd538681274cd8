//! Training steps for supernets (one sampled path per step) and standalone models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::archspace::ArchGenome;
use crate::corpus::{Batch, Corpus, Split};
use crate::distill::{kd_loss, KdConfig, TeacherBundle};
use crate::error::Result;
use crate::metrics::Metrics;
use crate::numkernel::Graph;
use crate::optim::{clip_global_norm, collect_grads, lr_at, AdamW};
use crate::supernet::{Binder, Forward, Model, Network, ParamStore, Supernet};

use super::config::SearchConfig;

/// Optimizer plus schedule position.
pub struct Trainer {
    pub opt: AdamW,
    pub base_lr: f64,
    pub warmup: f64,
    pub clip: f64,
    pub total_steps: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: &SearchConfig, total_steps: usize) -> Self {
        let mut opt = AdamW::new(cfg.train.weight_decay);
        opt.beta1 = cfg.train.beta1;
        opt.beta2 = cfg.train.beta2;
        Trainer {
            opt,
            base_lr: cfg.train.lr,
            warmup: cfg.train.warmup,
            clip: cfg.train.clip,
            total_steps,
            step: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.step, self.total_steps, self.base_lr, self.warmup)
    }
}

/// Frozen teacher, loss settings and the student-side projections.
pub struct KdState {
    pub teacher: TeacherBundle,
    pub cfg: KdConfig,
    pub proj: ParamStore,
}

/// One random training batch from `split`.
pub fn sample_batch(corpus: &Corpus, split: Split, cfg: &SearchConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let (b, n) = (cfg.train.batch_size, cfg.train.seq_len);
    let ids = corpus.random_windows(split, b, n, rng);
    let seed = rng.random::<u64>();
    corpus.make_batch(&ids, b, n, cfg.data.objective, cfg.data.mask_prob, seed)
}

/// Fixed validation batches; identical for every call with the same config.
pub fn validation_batches(corpus: &Corpus, cfg: &SearchConfig) -> Result<Vec<Batch>> {
    let (b, n) = (cfg.train.batch_size, cfg.train.seq_len);
    corpus
        .sequential_windows(Split::Validation, b, n, cfg.data.val_batches)
        .iter()
        .enumerate()
        .map(|(i, ids)| {
            corpus.make_batch(ids, b, n, cfg.data.objective, cfg.data.mask_prob, cfg.seed ^ (0x5eed_0000 + i as u64))
        })
        .collect()
}

/// The analysis probe: the first `probe_sequences` validation windows, uncorrupted.
pub fn probe_batch(corpus: &Corpus, cfg: &SearchConfig) -> Result<Batch> {
    let n = cfg.train.seq_len;
    let b = cfg.data.probe_sequences;
    let ids = corpus
        .sequential_windows(Split::Validation, b, n, 1)
        .into_iter()
        .next()
        .ok_or_else(|| crate::ElmError::Input(format!("validation split holds fewer than {b} windows of {n}")))?;
    corpus.make_batch(&ids, b, n, cfg.data.objective, 0.0, 0)
}

/// Forward, loss, backward and update for one batch. Returns the task loss.
pub fn train_step<N: Network>(
    net: &mut N,
    batch: &Batch,
    build: impl FnOnce(&N, &mut Graph) -> Result<Forward>,
    trainer: &mut Trainer,
    kd: Option<&mut KdState>,
) -> Result<f64> {
    let mut g = Graph::new(net.dtype());
    let fwd = build(net, &mut g)?;
    let task = g.cross_entropy(fwd.logits, &batch.target_ids, &batch.loss_mask)?;
    let task_value = g.value(task).item();
    let mut loss = task;
    let mut proj_leaves = None;
    if let Some(state) = kd.as_deref() {
        let targets = state.teacher.targets(batch)?;
        let mut binder = Binder::new(&state.proj, true);
        if let Some(term) = kd_loss(&mut g, &fwd, &targets, batch, &mut binder, &state.cfg)? {
            loss = g.add(loss, term)?;
        }
        proj_leaves = Some(binder.into_bound());
    }
    let mut grads = collect_grads(&g, loss, &fwd.leaves)?;
    let mut proj_grads = match &proj_leaves {
        Some(leaves) => collect_grads(&g, loss, leaves)?,
        None => Vec::new(),
    };
    clip_global_norm(&mut [&mut grads, &mut proj_grads], trainer.clip);
    let lr = trainer.lr();
    trainer.opt.step(net.params_mut(), &grads, lr)?;
    if let Some(state) = kd {
        trainer.opt.step(&mut state.proj, &proj_grads, lr)?;
    }
    trainer.step += 1;
    Ok(task_value)
}

/// `steps` single-path updates, each on a freshly sampled path. Returns the mean task loss.
pub fn supernet_epoch(
    net: &mut Supernet,
    corpus: &Corpus,
    split: Split,
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
    trainer: &mut Trainer,
    mut kd: Option<&mut KdState>,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..cfg.train.steps_per_epoch {
        let genome = net.space().random_genome(rng);
        let batch = sample_batch(corpus, split, cfg, rng)?;
        total += train_step(
            net,
            &batch,
            |n, g| n.forward(g, &genome, &batch, true),
            trainer,
            kd.as_deref_mut(),
        )?;
    }
    Ok(total / cfg.train.steps_per_epoch as f64)
}

pub fn model_epoch(
    model: &mut Model,
    corpus: &Corpus,
    splits: &[Split],
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
    trainer: &mut Trainer,
    mut kd: Option<&mut KdState>,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..cfg.train.steps_per_epoch {
        let split = splits[rng.random_range(0..splits.len())];
        let batch = sample_batch(corpus, split, cfg, rng)?;
        total += train_step(model, &batch, |m, g| m.forward(g, &batch, true), trainer, kd.as_deref_mut())?;
    }
    Ok(total / cfg.train.steps_per_epoch as f64)
}

/// Metrics of several supernet paths over the same batches, pooled.
pub fn eval_paths(net: &Supernet, genomes: &[ArchGenome], batches: &[Batch]) -> Result<Metrics> {
    let mut m = Metrics::default();
    for g in genomes {
        for b in batches {
            let (logits, _) = net.forward_path(g, b, false)?;
            m.add(&logits, b)?;
        }
    }
    Ok(m)
}

pub fn eval_model(model: &Model, batches: &[Batch]) -> Result<Metrics> {
    let mut m = Metrics::default();
    for b in batches {
        let (logits, _) = model.forward_path(b, false)?;
        m.add(&logits, b)?;
    }
    Ok(m)
}
