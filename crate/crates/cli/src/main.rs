//! `elm`: command-line driver for the supernet search pipeline.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use elm_core::archspace::{check_budget, count_params, ArchGenome};
use elm_core::corpus::{Corpus, MAX_VOCAB};
use elm_core::numkernel::DType;
use elm_core::pipeline::{Run, RunOptions, SearchConfig};
use elm_core::Result;

#[derive(Parser, Debug)]
#[command(name = "elm", version, about = "Elastic transformer supernet search")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Config file of `section.key = value` lines (default: desk profile).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Skip stages whose checkpoints already match the config.
    #[arg(long, global = true)]
    resume: bool,
    /// Train and evaluate in float64 instead of float32.
    #[arg(long, global = true)]
    verify_f64: bool,
    /// Accept checkpoints written under a different config.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage 1: train the supernet with PCA-guided FFN growth.
    PretrainSupernet,
    /// Stage 2: continue supernet training on the downstream split.
    FinetuneSupernet,
    /// Stage 3: evolutionary search under the parameter ceiling.
    Search,
    /// Stage 4: CKA-guided head-count search on the winning genome.
    HeadSearch,
    /// Stages 1 to 4 in order.
    RunAll,
    /// Train the fixed wide teacher used for distillation.
    PretrainTeacher,
    /// Train a genome from scratch (default: the run's final genome).
    TrainFinal {
        #[arg(long)]
        genome: Option<PathBuf>,
    },
    /// Validation metrics of the trained final model.
    Eval,
    /// Write one analysis CSV under `figures/`.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Exact parameter count of a genome file.
    CountParams {
        #[arg(long)]
        genome: PathBuf,
        /// Model profile (desk|full|micro); default: the config's dimensions.
        #[arg(long)]
        profile: Option<String>,
        /// Vocabulary size; default: the config's corpus vocabulary.
        #[arg(long)]
        vocab: Option<usize>,
    },
    /// Regenerate every figure CSV from the run's checkpoints.
    ExportFigures,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AnalysisKind {
    Pca,
    Cka,
    Blocksim,
}

fn config(g: &Global) -> Result<SearchConfig> {
    let mut cfg = match &g.config {
        Some(p) => SearchConfig::load(p)?,
        None => SearchConfig::desk(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = &g.workdir {
        cfg.workdir = w.clone();
    }
    if g.verify_f64 {
        cfg.train.dtype = DType::F64;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open(g: &Global) -> Result<Run> {
    Run::open(
        config(g)?,
        RunOptions {
            resume: g.resume,
            force: g.force,
        },
    )
}

fn count(g: &Global, genome: &Path, profile: Option<&str>, vocab: Option<usize>) -> Result<()> {
    let mut cfg = config(g)?;
    if let Some(p) = profile {
        let mut base = SearchConfig::profile(p)?;
        base.data = cfg.data.clone();
        cfg = base;
    }
    let vocab = match (vocab, profile) {
        (Some(v), _) => v,
        (None, Some(_)) => MAX_VOCAB,
        (None, None) => Corpus::load(&cfg.data.corpus, cfg.model.vocab_limit)?.vocab.len(),
    };
    let dims = cfg.dims(vocab)?;
    let genome = ArchGenome::load(genome)?;
    let total = count_params(&genome, &dims)?;
    let check = check_budget(&genome, &dims, &cfg.budget());
    println!("{total}");
    eprintln!(
        "budgeted {} against ceiling {}: {}",
        check.count,
        cfg.budget.ceiling,
        if check.pass { "within budget" } else { "over budget" }
    );
    Ok(())
}

fn print_genome(g: &ArchGenome) {
    print!("{}", g.to_text());
}

fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::CountParams { genome, profile, vocab } => return count(g, &genome, profile.as_deref(), vocab),
        Command::PretrainSupernet => {
            let r = open(g)?.pretrain_supernet()?;
            for e in &r.epochs {
                println!("epoch {} train {:.4} val {:.4} acc {:.4}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
            }
            println!("supernet params {} largest path {}", r.supernet_params, r.max_path_params);
        }
        Command::FinetuneSupernet => {
            let r = open(g)?.finetune_supernet()?;
            for e in &r.epochs {
                println!("epoch {} train {:.4} val {:.4} acc {:.4}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
            }
        }
        Command::Search => {
            let best = open(g)?.search()?;
            println!("fitness {:.6} params {}", best.fitness, best.params);
            print_genome(&best.genome);
        }
        Command::HeadSearch => print_genome(&open(g)?.head_search()?),
        Command::RunAll => print_genome(&open(g)?.run_all()?),
        Command::PretrainTeacher => {
            let r = open(g)?.pretrain_teacher()?;
            println!("teacher params {} val loss {:.4} acc {:.4}", r.params, r.val_loss, r.val_accuracy);
        }
        Command::TrainFinal { genome } => {
            let run = open(g)?;
            let genome = match genome {
                Some(p) => ArchGenome::load(&p)?,
                None => run.final_genome()?,
            };
            let r = run.train_final(&genome)?;
            println!(
                "params {} (counted {}) val loss {:.4} acc {:.4}",
                r.params, r.counted_params, r.val_loss, r.val_accuracy
            );
        }
        Command::Eval => {
            let (m, params) = open(g)?.eval()?;
            println!("params {params} val loss {:.4} acc {:.4}", m.loss(), m.accuracy());
        }
        Command::Analyze { kind, layer } => {
            let run = open(g)?;
            let path = match kind {
                AnalysisKind::Pca => run.analyze_pca()?,
                AnalysisKind::Cka => run.analyze_cka(layer)?,
                AnalysisKind::Blocksim => {
                    let (path, means) = run.analyze_blocksim(layer)?;
                    for (l, m) in means {
                        println!("layer {l} mean similarity {m:.4}");
                    }
                    path
                }
            };
            println!("{}", path.display());
        }
        Command::ExportFigures => {
            for p in open(g)?.export_figures()? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                // --help and --version
                return ExitCode::SUCCESS;
            }
            eprintln!("\n{}", Cli::command().render_help());
            return ExitCode::from(1);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_apply_after_the_subcommand() {
        let cli = Cli::try_parse_from(["elm", "search", "--seed", "4", "--verify-f64"]).unwrap();
        let cfg = config(&cli.global).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.dtype, DType::F64);
    }
}
