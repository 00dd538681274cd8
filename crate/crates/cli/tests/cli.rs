//! The `elm` binary end to end: exit codes, parameter counting and the staged commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elm_core::archspace::{count_params, BlockChoice, ModelDims, SearchSpace};
use tempfile::TempDir;

fn elm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elm")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt")
}

/// Writes a config for a two-layer model that runs every stage in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let text = format!(
        "model.layers = 2
model.hidden = 16
model.heads = 4
model.inner = 8
model.ffn_init = 8
model.ffn_step = 8
model.ffn_max = 32
model.max_len = 32
model.vocab_limit = 60
growth.k = 3
budget.ceiling = 40000
data.corpus = {}
data.probe_sequences = 4
data.val_batches = 2
train.epochs_pretrain = 2
train.epochs_finetune = 1
train.epochs_final = 1
train.steps_per_epoch = 2
train.batch_size = 2
train.seq_len = 16
evo.population = 6
evo.generations = 2
evo.parents = 3
evo.elites = 1
",
        corpus().display()
    );
    let path = dir.join("tiny.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_one_with_help() {
    let o = elm(&["search", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert!(stderr(&o).contains("pretrain-supernet"));
    assert_eq!(elm(&[]).status.code(), Some(1));
    assert_eq!(elm(&["analyze", "heads"]).status.code(), Some(1));
    let help = elm(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("count-params"));
}

#[test]
fn count_params_prints_the_exact_count() {
    let dir = TempDir::new().unwrap();
    let dims = ModelDims::full(512);
    let space = SearchSpace::initial(&dims, true);
    let genome = space.genome_from_choices(&[BlockChoice::ALL[4]; 12]);
    let path = dir.path().join("g.txt");
    genome.save(&path).unwrap();
    let o = elm(&["count-params", "--genome", path.to_str().unwrap(), "--profile", "full"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), count_params(&genome, &dims).unwrap().to_string());
    assert!(stderr(&o).contains("within budget"));

    let o = elm(&["count-params", "--genome", path.to_str().unwrap(), "--profile", "full", "--vocab", "100"]);
    assert_eq!(stdout(&o).trim(), count_params(&genome, &ModelDims::full(100)).unwrap().to_string());

    let missing = elm(&["count-params", "--genome", "/nonexistent/g.txt", "--profile", "full"]);
    assert_eq!(missing.status.code(), Some(2));
    // A full-size genome against desk dimensions is a data error.
    let desk = elm(&["count-params", "--genome", path.to_str().unwrap(), "--profile", "desk", "--vocab", "83"]);
    assert_eq!(desk.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "model.colour = red\n").unwrap();
    let o = elm(&["--config", cfg.to_str().unwrap(), "search"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key"));
}

#[test]
fn run_all_equals_the_four_stage_commands() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (a_s, b_s) = (a.to_str().unwrap(), b.to_str().unwrap());

    let o = elm(&["--config", cfg, "--workdir", a_s, "--seed", "3", "run-all"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for stage in ["pretrain-supernet", "finetune-supernet", "search", "head-search"] {
        let o = elm(&["--config", cfg, "--workdir", b_s, "--seed", "3", stage]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    let final_a = fs::read_to_string(a.join("genome.final")).unwrap();
    assert_eq!(final_a, fs::read_to_string(b.join("genome.final")).unwrap());
    assert!(a.join("config.resolved").exists());
    for log in ["pretrain.jsonl", "growth.jsonl", "finetune.jsonl", "search.jsonl", "heads.jsonl"] {
        assert!(a.join("logs").join(log).exists(), "{log}");
    }

    // Resuming a finished run reruns nothing and prints the same genome.
    let again = elm(&["--config", cfg, "--workdir", a_s, "--seed", "3", "--resume", "run-all"]);
    assert_eq!(stdout(&again), final_a);

    // Another seed is another config: its checkpoints are refused without --force.
    let other = elm(&["--config", cfg, "--workdir", a_s, "--seed", "4", "search"]);
    assert_eq!(other.status.code(), Some(2));
    assert!(stderr(&other).contains("--force"), "{}", stderr(&other));

    let cka = elm(&["--config", cfg, "--workdir", a_s, "--seed", "3", "analyze", "cka", "--layer", "1"]);
    assert_eq!(cka.status.code(), Some(0), "{}", stderr(&cka));
    assert!(a.join("figures/cka-layer1.csv").exists());
    let blocksim = elm(&["--config", cfg, "--workdir", a_s, "--seed", "3", "analyze", "blocksim"]);
    assert!(stdout(&blocksim).contains("layer 1 mean similarity"));

    let no_model = elm(&["--config", cfg, "--workdir", a_s, "--seed", "3", "eval"]);
    assert_eq!(no_model.status.code(), Some(2));
    assert!(stderr(&no_model).contains("train-final"));
    let trained = elm(&["--config", cfg, "--workdir", a_s, "--seed", "3", "train-final"]);
    assert_eq!(trained.status.code(), Some(0), "{}", stderr(&trained));
    let eval = elm(&["--config", cfg, "--workdir", a_s, "--seed", "3", "eval"]);
    assert_eq!(eval.status.code(), Some(0));
    assert!(stdout(&eval).starts_with("params "));
    let figures = elm(&["--config", cfg, "--workdir", a_s, "--seed", "3", "export-figures"]);
    assert_eq!(stdout(&figures).lines().count(), 3);
}

#[test]
fn stage_out_of_order_names_the_missing_stage() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let w = dir.path().join("w");
    let o = elm(&["--config", cfg.to_str().unwrap(), "--workdir", w.to_str().unwrap(), "head-search"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("head-search"), "{}", stderr(&o));
}
