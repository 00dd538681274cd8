//! End-to-end search: supernet pretraining with growth, finetuning,
//! evolutionary search, head search, and final training of the winner.
//!
//! Every stage reads its predecessor's checkpoint from the run directory, so
//! stages can run in separate processes and a run can resume at any stage
//! boundary.

pub mod checkpoint;
pub mod config;
pub mod train;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{
    cka_heads, pairwise_similarity, pca_score, read_pca_csv, write_cka_csv, write_pca_csv, write_similarity_csv,
    CkaMatrix, PcaRecord, PcaScoreTable,
};
use crate::archspace::{count_params, ArchGenome, BlockChoice, LayerGene, ModelDims};
use crate::corpus::{Batch, Corpus, Split};
use crate::distill::{new_projections, KdMode, TeacherBundle};
use crate::elastic::{append_growth_log, apply_growth, apply_head_search, select_growth, BlockScore, GrowthPolicy};
use crate::error::{ElmError, Result};
use crate::evosearch::{run_evolution, EvalRecord, SearchLogLine, SupernetFitness};
use crate::metrics::Metrics;
use crate::supernet::{block_prefix, Model, Network, Supernet};

pub use checkpoint::Checkpoint;
pub use config::SearchConfig;
use train::{eval_model, eval_paths, model_epoch, probe_batch, supernet_epoch, validation_batches, KdState, Trainer};

pub const STAGE_NAMES: [&str; 4] = ["pretrain-supernet", "finetune-supernet", "search", "head-search"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Skip stages whose checkpoint already exists under the same config.
    pub resume: bool,
    /// Accept checkpoints written under a different config.
    pub force: bool,
}

/// Exclusive ownership of a run directory; released on drop.
struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(ElmError::Config(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(ElmError::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Append-only JSON-lines log.
struct Jsonl {
    path: PathBuf,
}

impl Jsonl {
    fn fresh(path: PathBuf) -> Result<Self> {
        fs::write(&path, "").map_err(|e| ElmError::io(&path, e))?;
        Ok(Jsonl { path })
    }

    fn push(&self, value: &impl Serialize) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| ElmError::io(&self.path, e))?;
        let line = serde_json::to_string(value).map_err(|e| ElmError::Parse(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| ElmError::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub epochs: Vec<EpochReport>,
    pub supernet_params: u64,
    pub max_path_params: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalReport {
    pub genome: ArchGenome,
    pub params: u64,
    pub counted_params: u64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// One run directory with its resolved config and corpus.
pub struct Run {
    cfg: SearchConfig,
    corpus: Corpus,
    hash: String,
    opts: RunOptions,
    _lock: WorkdirLock,
}

impl Run {
    pub fn open(cfg: SearchConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.workdir.clone();
        for sub in ["", "logs", "figures"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| ElmError::io(&p, e))?;
        }
        let lock = WorkdirLock::acquire(&dir)?;
        let corpus = Corpus::load(&cfg.data.corpus, cfg.model.vocab_limit)?;
        let resolved = dir.join("config.resolved");
        fs::write(&resolved, cfg.resolved_text()).map_err(|e| ElmError::io(&resolved, e))?;
        Ok(Run {
            hash: cfg.hash(),
            cfg,
            corpus,
            opts,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn workdir(&self) -> &Path {
        &self.cfg.workdir
    }

    pub fn dims(&self) -> Result<ModelDims> {
        self.cfg.dims(self.corpus.vocab.len())
    }

    pub fn stage_dir(&self, stage: usize) -> PathBuf {
        self.workdir().join(format!("stage-{stage}.ckpt"))
    }

    fn log(&self, name: &str) -> Result<Jsonl> {
        Jsonl::fresh(self.workdir().join("logs").join(name))
    }

    fn figure(&self, name: &str) -> PathBuf {
        self.workdir().join("figures").join(name)
    }

    /// Independent stream per stage, fixed by the seed.
    fn stage_rng(&self, stage: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stage.wrapping_mul(0xbf58_476d_1ce4_e5b9))
    }

    fn load_stage(&self, stage: usize) -> Result<Checkpoint> {
        let dir = self.stage_dir(stage);
        if !dir.join("manifest.txt").exists() {
            return Err(ElmError::Config(format!(
                "stage {} ({}) has not been run in {}",
                stage,
                STAGE_NAMES[stage - 1],
                self.workdir().display()
            )));
        }
        let ck = Checkpoint::load(&dir)?;
        ck.check_hash(&self.hash, self.opts.force)?;
        Ok(ck)
    }

    /// True when a stage checkpoint exists and matches the current config.
    pub fn stage_done(&self, stage: usize) -> bool {
        let dir = self.stage_dir(stage);
        dir.join("manifest.txt").exists()
            && Checkpoint::load(&dir)
                .map(|c| c.get("config_hash").map(|h| h == self.hash).unwrap_or(false))
                .unwrap_or(false)
    }

    pub fn load_supernet(&self, stage: usize) -> Result<Supernet> {
        checkpoint::supernet_from_checkpoint(&self.load_stage(stage)?)
    }

    /// Most trained supernet available: stage 2 if present, else stage 1.
    pub fn latest_supernet(&self) -> Result<Supernet> {
        if self.stage_dir(2).join("manifest.txt").exists() {
            self.load_supernet(2)
        } else {
            self.load_supernet(1)
        }
    }

    pub fn validation(&self) -> Result<Vec<Batch>> {
        validation_batches(&self.corpus, &self.cfg)
    }

    pub fn probe(&self) -> Result<Batch> {
        probe_batch(&self.corpus, &self.cfg)
    }

    // ---- teacher ----------------------------------------------------------

    pub fn teacher_path(&self) -> PathBuf {
        self.cfg
            .kd
            .teacher
            .clone()
            .unwrap_or_else(|| self.workdir().join("teacher.ckpt"))
    }

    fn teacher_genome(&self, dims: &ModelDims) -> ArchGenome {
        ArchGenome::new(vec![
            LayerGene {
                choice: BlockChoice::ALL[0],
                ffn_dim: self.cfg.kd.teacher_ffn,
                heads: self.cfg.kd.teacher_heads,
            };
            dims.layers
        ])
    }

    /// Trains the fixed wide teacher on the pretraining split.
    pub fn pretrain_teacher(&self) -> Result<FinalReport> {
        let inner = || -> Result<FinalReport> {
            let dims = self.cfg.teacher_dims(self.corpus.vocab.len());
            let genome = self.teacher_genome(&dims);
            let mut rng = self.stage_rng(10);
            let mut model = Model::new(dims, genome.clone(), self.cfg.train.dtype, rng.random())?;
            let epochs = self.cfg.kd.teacher_epochs;
            let mut trainer = Trainer::new(&self.cfg, epochs * self.cfg.train.steps_per_epoch);
            let log = self.log("teacher.jsonl")?;
            let val = self.validation()?;
            for epoch in 0..epochs {
                let loss = model_epoch(&mut model, &self.corpus, &[Split::Pretrain], &self.cfg, &mut rng, &mut trainer, None)?;
                let m = eval_model(&model, &val)?;
                log.push(&json!({"epoch": epoch, "train_loss": loss, "val_loss": m.loss(), "val_accuracy": m.accuracy()}))?;
            }
            let m = eval_model(&model, &val)?;
            let path = self.teacher_path();
            checkpoint::model_checkpoint(&model, &self.hash, "teacher").save(&path)?;
            Ok(FinalReport {
                counted_params: count_params(&genome, model.dims())?,
                params: model.param_count(),
                genome,
                val_loss: m.loss(),
                val_accuracy: m.accuracy(),
            })
        };
        inner().map_err(|e| e.in_stage("pretrain-teacher"))
    }

    fn kd_state(&self, rng: &mut ChaCha8Rng) -> Result<Option<KdState>> {
        if self.cfg.kd.mode == KdMode::None {
            return Ok(None);
        }
        let path = self.teacher_path();
        if !path.join("manifest.txt").exists() {
            return Err(ElmError::Config(format!(
                "kd.mode = {} needs a teacher at {} (run pretrain-teacher)",
                self.cfg.kd.mode.name(),
                path.display()
            )));
        }
        let teacher = TeacherBundle::new(checkpoint::model_from_checkpoint(&Checkpoint::load(&path)?)?);
        if teacher.model().dims().vocab != self.corpus.vocab.len() {
            return Err(ElmError::Config("teacher vocabulary does not match the corpus".into()));
        }
        let proj = new_projections(
            self.cfg.model.layers,
            self.cfg.model.hidden,
            teacher.width(),
            rng,
            self.cfg.train.dtype,
        );
        Ok(Some(KdState {
            teacher,
            cfg: self.cfg.kd_config(),
            proj,
        }))
    }

    // ---- stage 1 ----------------------------------------------------------

    /// Fixed sample of paths used to report supernet validation loss.
    fn report_paths(&self, net: &Supernet) -> Vec<ArchGenome> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7a7a);
        (0..4)
            .map(|_| {
                let g = net.space().random_genome(&mut rng);
                net.space().genome_from_choices(&g.choices())
            })
            .collect()
    }

    /// PCA score of every block, measured on one uniform path per candidate.
    pub fn measure_pca(&self, net: &Supernet, probe: &Batch, epoch: usize) -> Result<Vec<PcaRecord>> {
        let space = net.space();
        let mut out = Vec::new();
        for &c in &space.choices {
            let genome = space.genome_from_choices(&vec![c; space.layers()]);
            let (_, trace) = net.forward_path(&genome, probe, true)?;
            for (l, lt) in trace.expect("trace requested").layers.iter().enumerate() {
                out.push(PcaRecord {
                    epoch,
                    layer: l,
                    cand: c.index(),
                    ffn_dim: space.ffn[l][c.index()],
                    score: pca_score(&lt.ffn_hidden, self.cfg.growth.tau)?,
                });
            }
        }
        out.sort_by_key(|r| (r.layer, r.cand));
        Ok(out)
    }

    pub fn pretrain_supernet(&self) -> Result<StageReport> {
        self.stage1().map_err(|e| e.in_stage(STAGE_NAMES[0]))
    }

    fn stage1(&self) -> Result<StageReport> {
        let dims = self.dims()?;
        let budget = self.cfg.budget();
        let mut rng = self.stage_rng(1);
        let mut net = Supernet::new(dims.clone(), self.cfg.model.weight_sharing, self.cfg.train.dtype, rng.random())?;
        let initial = net.space().max_path_params(&dims, &budget);
        if initial > budget.ceiling {
            return Err(ElmError::Config(format!(
                "ceiling infeasible: the initial supernet's largest path has {initial} parameters, ceiling is {}",
                budget.ceiling
            )));
        }
        let mut kd = self.kd_state(&mut rng)?;
        let epochs = self.cfg.train.epochs_pretrain;
        let mut trainer = Trainer::new(&self.cfg, epochs * self.cfg.train.steps_per_epoch);
        let policy = GrowthPolicy::new(self.cfg.growth.k, &dims, budget);
        let probe = self.probe()?;
        let val = self.validation()?;
        let log = self.log("pretrain.jsonl")?;
        let growth_path = self.workdir().join("logs").join("growth.jsonl");
        fs::write(&growth_path, "").map_err(|e| ElmError::io(&growth_path, e))?;
        let mut table = PcaScoreTable::default();
        let mut epochs_out = Vec::new();

        for epoch in 0..epochs {
            let train_loss = supernet_epoch(&mut net, &self.corpus, Split::Pretrain, &self.cfg, &mut rng, &mut trainer, kd.as_mut())?;
            let scores = self.measure_pca(&net, &probe, epoch)?;
            for r in &scores {
                table.push(*r)?;
            }
            let ranked: Vec<BlockScore> = scores
                .iter()
                .map(|r| BlockScore {
                    layer: r.layer,
                    cand: r.cand,
                    score: r.score,
                })
                .collect();
            let selection = select_growth(&ranked, &policy, &dims, net.space());
            let record = apply_growth(&mut net, &selection, epoch, &budget, self.cfg.growth.init, &mut rng)?;
            for g in &record.grown {
                trainer.opt.reset_prefix(&block_prefix(g.layer, g.cand));
            }
            append_growth_log(&growth_path, &record)?;
            let m = eval_paths(&net, &self.report_paths(&net), &val)?;
            log.push(&json!({
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": m.loss(),
                "val_accuracy": m.accuracy(),
                "grown": record.grown.len(),
                "max_path_params": record.params_after,
            }))?;
            epochs_out.push(EpochReport {
                epoch,
                train_loss,
                val_loss: m.loss(),
                val_accuracy: m.accuracy(),
            });
        }
        let dir = self.stage_dir(1);
        checkpoint::supernet_checkpoint(&net, &self.hash, "1").save(&dir)?;
        write_pca_csv(&table, &dir.join("pca.csv"))?;
        write_pca_csv(&table, &self.figure("pca.csv"))?;
        Ok(StageReport {
            epochs: epochs_out,
            supernet_params: net.param_count(),
            max_path_params: net.space().max_path_params(&dims, &budget),
        })
    }

    // ---- stage 2 ----------------------------------------------------------

    pub fn finetune_supernet(&self) -> Result<StageReport> {
        self.stage2().map_err(|e| e.in_stage(STAGE_NAMES[1]))
    }

    fn stage2(&self) -> Result<StageReport> {
        let mut net = self.load_supernet(1)?;
        let mut rng = self.stage_rng(2);
        let mut kd = self.kd_state(&mut rng)?;
        let epochs = self.cfg.train.epochs_finetune;
        let mut trainer = Trainer::new(&self.cfg, epochs * self.cfg.train.steps_per_epoch);
        let val = self.validation()?;
        let log = self.log("finetune.jsonl")?;
        let mut epochs_out = Vec::new();
        for epoch in 0..epochs {
            let train_loss = supernet_epoch(&mut net, &self.corpus, Split::Downstream, &self.cfg, &mut rng, &mut trainer, kd.as_mut())?;
            let m = eval_paths(&net, &self.report_paths(&net), &val)?;
            log.push(&json!({"epoch": epoch, "train_loss": train_loss, "val_loss": m.loss(), "val_accuracy": m.accuracy()}))?;
            epochs_out.push(EpochReport {
                epoch,
                train_loss,
                val_loss: m.loss(),
                val_accuracy: m.accuracy(),
            });
        }
        checkpoint::supernet_checkpoint(&net, &self.hash, "2").save(&self.stage_dir(2))?;
        let dims = self.dims()?;
        Ok(StageReport {
            epochs: epochs_out,
            supernet_params: net.param_count(),
            max_path_params: net.space().max_path_params(&dims, &self.cfg.budget()),
        })
    }

    // ---- stage 3 ----------------------------------------------------------

    pub fn search(&self) -> Result<EvalRecord> {
        self.stage3().map_err(|e| e.in_stage(STAGE_NAMES[2]))
    }

    fn stage3(&self) -> Result<EvalRecord> {
        let net = self.load_supernet(2)?;
        let dims = self.dims()?;
        let fitness = SupernetFitness::new(net.snapshot(), self.validation()?);
        let mut evo = self.cfg.evo_config();
        evo.seed = self.stage_rng(3).random();
        let result = run_evolution(net.space(), &dims, &fitness, &evo)?;
        let log = self.log("search.jsonl")?;
        for r in &result.log {
            log.push(&SearchLogLine::from(r))?;
        }
        let mut ck = Checkpoint::new();
        ck.set("kind", "genome");
        ck.set("stage", "3");
        ck.set("config_hash", &self.hash);
        ck.set("fitness", result.best.fitness);
        ck.set("params", result.best.params);
        ck.genome = Some(result.best.genome.clone());
        ck.save(&self.stage_dir(3))?;
        Ok(result.best)
    }

    pub fn searched_genome(&self) -> Result<ArchGenome> {
        self.load_stage(3)?
            .genome
            .ok_or_else(|| ElmError::Parse("stage 3 checkpoint lacks its genome".into()))
    }

    // ---- stage 4 ----------------------------------------------------------

    pub fn head_search(&self) -> Result<ArchGenome> {
        self.stage4().map_err(|e| e.in_stage(STAGE_NAMES[3]))
    }

    fn stage4(&self) -> Result<ArchGenome> {
        let net = self.load_supernet(2)?;
        let genome = self.searched_genome()?;
        let (searched, matrices) = apply_head_search(&net, &genome, &self.probe()?, self.cfg.heads.eta)?;
        write_cka_csv(&matrices, &self.figure("cka.csv"))?;
        let log = self.log("heads.jsonl")?;
        for (l, gene) in searched.layers.iter().enumerate() {
            log.push(&json!({"layer": l, "kind": gene.choice.to_string(), "heads_before": genome.layers[l].heads, "heads_after": gene.heads}))?;
        }
        let mut ck = Checkpoint::new();
        ck.set("kind", "genome");
        ck.set("stage", "4");
        ck.set("config_hash", &self.hash);
        ck.genome = Some(searched.clone());
        ck.save(&self.stage_dir(4))?;
        searched.save(&self.workdir().join("genome.final"))?;
        Ok(searched)
    }

    /// The four search stages in order. With `resume`, completed stages are skipped.
    /// A teacher is trained first when distillation is on and none exists.
    pub fn run_all(&self) -> Result<ArchGenome> {
        if self.cfg.kd.mode != KdMode::None && !self.teacher_path().join("manifest.txt").exists() {
            self.pretrain_teacher()?;
        }
        let skip = |s: usize| self.opts.resume && self.stage_done(s);
        if !skip(1) {
            self.pretrain_supernet()?;
        }
        if !skip(2) {
            self.finetune_supernet()?;
        }
        if !skip(3) {
            self.search()?;
        }
        if !skip(4) || !self.workdir().join("genome.final").exists() {
            return self.head_search();
        }
        ArchGenome::load(&self.workdir().join("genome.final"))
    }

    // ---- final model --------------------------------------------------------

    pub fn final_genome(&self) -> Result<ArchGenome> {
        ArchGenome::load(&self.workdir().join("genome.final"))
    }

    /// Fresh weights for `genome`, trained on pretraining and downstream data.
    pub fn train_final(&self, genome: &ArchGenome) -> Result<FinalReport> {
        let inner = || -> Result<FinalReport> {
            let dims = self.dims()?;
            let mut rng = self.stage_rng(5);
            let mut model = Model::new(dims.clone(), genome.clone(), self.cfg.train.dtype, rng.random())?;
            let mut kd = self.kd_state(&mut rng)?;
            let epochs = self.cfg.train.epochs_final;
            let mut trainer = Trainer::new(&self.cfg, epochs * self.cfg.train.steps_per_epoch);
            let val = self.validation()?;
            let log = self.log("final.jsonl")?;
            for epoch in 0..epochs {
                let loss = model_epoch(
                    &mut model,
                    &self.corpus,
                    &[Split::Pretrain, Split::Downstream],
                    &self.cfg,
                    &mut rng,
                    &mut trainer,
                    kd.as_mut(),
                )?;
                let m = eval_model(&model, &val)?;
                log.push(&json!({"epoch": epoch, "train_loss": loss, "val_loss": m.loss(), "val_accuracy": m.accuracy(), "kd_mode": self.cfg.kd.mode.name()}))?;
            }
            checkpoint::model_checkpoint(&model, &self.hash, "final").save(&self.workdir().join("final.ckpt"))?;
            let m = eval_model(&model, &val)?;
            Ok(FinalReport {
                genome: genome.clone(),
                params: model.param_count(),
                counted_params: count_params(genome, &dims)?,
                val_loss: m.loss(),
                val_accuracy: m.accuracy(),
            })
        };
        inner().map_err(|e| e.in_stage("train-final"))
    }

    pub fn eval(&self) -> Result<(Metrics, u64)> {
        let path = self.workdir().join("final.ckpt");
        if !path.join("manifest.txt").exists() {
            return Err(ElmError::Config(format!("no trained model at {} (run train-final)", path.display())));
        }
        let ck = Checkpoint::load(&path)?;
        ck.check_hash(&self.hash, self.opts.force)?;
        let model = checkpoint::model_from_checkpoint(&ck)?;
        Ok((eval_model(&model, &self.validation()?)?, model.param_count()))
    }

    // ---- analysis -----------------------------------------------------------

    /// Genome used for head analyses: the final one if present, else the search winner,
    /// else all-standard blocks.
    fn analysis_genome(&self, net: &Supernet) -> ArchGenome {
        let fit = |g: ArchGenome| net.space().genome_from_choices(&g.choices());
        if let Ok(g) = self.final_genome() {
            return fit(g);
        }
        if let Ok(g) = self.searched_genome() {
            return fit(g);
        }
        net.space()
            .genome_from_choices(&vec![net.space().choices[0]; net.space().layers()])
    }

    pub fn analyze_pca(&self) -> Result<PathBuf> {
        let net = self.latest_supernet()?;
        let mut table = PcaScoreTable::default();
        for r in self.measure_pca(&net, &self.probe()?, self.cfg.train.epochs_pretrain)? {
            table.push(r)?;
        }
        let path = self.figure("pca-latest.csv");
        write_pca_csv(&table, &path)?;
        Ok(path)
    }

    pub fn cka_matrices(&self) -> Result<Vec<CkaMatrix>> {
        let net = self.latest_supernet()?;
        let genome = self.analysis_genome(&net);
        let (_, trace) = net.forward_path(&genome, &self.probe()?, true)?;
        trace
            .expect("trace requested")
            .layers
            .iter()
            .enumerate()
            .map(|(l, lt)| cka_heads(l, &lt.heads))
            .collect()
    }

    pub fn analyze_cka(&self, layer: Option<usize>) -> Result<PathBuf> {
        let all = self.cka_matrices()?;
        let (chosen, path) = match layer {
            Some(l) => {
                let m = all
                    .into_iter()
                    .find(|m| m.layer == l)
                    .ok_or_else(|| ElmError::Input(format!("no layer {l}")))?;
                (vec![m], self.figure(&format!("cka-layer{l}.csv")))
            }
            None => (all, self.figure("cka.csv")),
        };
        write_cka_csv(&chosen, &path)?;
        Ok(path)
    }

    /// Pairwise cosine similarity of FFN outputs between the candidates of each layer.
    /// Earlier layers use the first candidate so every block sees identical inputs.
    pub fn block_similarity(&self, net: &Supernet, layer: usize) -> Result<Vec<(usize, usize, f64)>> {
        let space = net.space();
        if layer >= space.layers() {
            return Err(ElmError::Input(format!("no layer {layer}")));
        }
        let probe = self.probe()?;
        let mut features = Vec::new();
        for &c in &space.choices {
            let mut choices = vec![space.choices[0]; space.layers()];
            choices[layer] = c;
            let (_, trace) = net.forward_path(&space.genome_from_choices(&choices), &probe, true)?;
            features.push(trace.expect("trace requested").layers[layer].ffn_out.clone());
        }
        let idx: Vec<usize> = space.choices.iter().map(|c| c.index()).collect();
        Ok(pairwise_similarity(&features)?
            .into_iter()
            .map(|(a, b, v)| (idx[a], idx[b], v))
            .collect())
    }

    /// Mean pairwise block similarity per layer, written to `figures/blocksim.csv`.
    pub fn analyze_blocksim(&self, layer: Option<usize>) -> Result<(PathBuf, Vec<(usize, f64)>)> {
        let net = self.latest_supernet()?;
        let layers: Vec<usize> = match layer {
            Some(l) => vec![l],
            None => (0..net.space().layers()).collect(),
        };
        let mut rows = Vec::new();
        let mut means = Vec::new();
        for l in layers {
            let pairs = self.block_similarity(&net, l)?;
            means.push((l, pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64));
            rows.extend(pairs.into_iter().map(|(a, b, v)| (l, a, b, v)));
        }
        let path = self.figure("blocksim.csv");
        write_similarity_csv(&rows, &path)?;
        Ok((path, means))
    }

    /// Regenerates every figure CSV from the run's checkpoints.
    pub fn export_figures(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        let history = self.stage_dir(1).join("pca.csv");
        let table = read_pca_csv(&history)?;
        let pca = self.figure("pca.csv");
        write_pca_csv(&table, &pca)?;
        out.push(pca);
        let cka = self.figure("cka.csv");
        write_cka_csv(&self.cka_matrices()?, &cka)?;
        out.push(cka);
        out.push(self.analyze_blocksim(None)?.0);
        Ok(out)
    }
}
