//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;

use elm_core::archspace::{ArchGenome, BlockChoice, ModelDims, SearchSpace};
use elm_core::distill::{head_average, kl_rows, mse, pearson_mean, DEFAULT_EPS};
use elm_core::numkernel::{softmax_rows, DType, Graph, Tensor, Var};
use elm_core::Result;
use elm_core::supernet::{block_manifest, embedding_manifest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn corpus_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt")
}

/// Parameter count by listing every tensor a model of `genome` would hold.
pub fn enumerate_params(genome: &ArchGenome, dims: &ModelDims) -> u64 {
    let mut specs = embedding_manifest(dims);
    for (l, g) in genome.layers.iter().enumerate() {
        specs.extend(block_manifest(&format!("layer.{l}"), g.choice, g.ffn_dim, dims));
    }
    specs.iter().map(|s| s.shape.iter().product::<usize>() as u64).sum()
}

/// Head-number search written line for line from the pseudocode:
/// R ← ∅; for i in 1..H: if i ∉ R: for j in i+1..H: if Q[i,j] > η: R ← R ∪ {j};
/// H* ← H − |R|; while C mod H* ≠ 0: H* ← H* − 1.
pub fn head_search_literal(q: &[f64], h: usize, eta: f64, c: usize) -> usize {
    let mut r: Vec<usize> = Vec::new();
    let mut i = 1;
    while i <= h {
        if !r.contains(&i) {
            let mut j = i + 1;
            while j <= h {
                if q[(i - 1) * h + (j - 1)] > eta && !r.contains(&j) {
                    r.push(j);
                }
                j += 1;
            }
        }
        i += 1;
    }
    let mut hs = h - r.len();
    while c % hs != 0 {
        hs -= 1;
    }
    hs
}

/// Random symmetric matrix with unit diagonal and entries in [0, 1].
pub fn random_unit_diag(h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut q = vec![0.0; h * h];
    for i in 0..h {
        q[i * h + i] = 1.0;
        for j in (i + 1)..h {
            // Mass near the threshold so both branches are exercised.
            let v: f64 = if rng.random_bool(0.3) { rng.random_range(0.85..1.0) } else { rng.random() };
            q[i * h + j] = v;
            q[j * h + i] = v;
        }
    }
    q
}

/// Linear CKA by explicit summation: centering, cross-covariances, Frobenius norms.
pub fn cka_double_loop(x: &Tensor, y: &Tensor) -> f64 {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let q = y.shape()[1];
    let center = |t: &Tensor, d: usize| {
        let mut c = vec![vec![0.0; d]; n];
        for k in 0..d {
            let mut mean = 0.0;
            for i in 0..n {
                mean += t.at2(i, k);
            }
            mean /= n as f64;
            for (i, row) in c.iter_mut().enumerate() {
                row[k] = t.at2(i, k) - mean;
            }
        }
        c
    };
    let (xc, yc) = (center(x, p), center(y, q));
    let cross = |a: &[Vec<f64>], da: usize, b: &[Vec<f64>], db: usize| {
        let mut s = 0.0;
        for k in 0..da {
            for l in 0..db {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += a[i][k] * b[i][l];
                }
                s += dot * dot;
            }
        }
        s
    };
    cross(&xc, p, &yc, q) / (cross(&xc, p, &xc, p).sqrt() * cross(&yc, q, &yc, q).sqrt())
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, rng)
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
pub fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut data = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            data[i * n + j] = c[i];
        }
    }
    Tensor::new(vec![n, n], data).unwrap()
}

/// Two-layer toy space with a random fitness for each of its 36 genomes.
pub fn toy_table(space: &SearchSpace, seed: u64) -> (HashMap<Vec<usize>, f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = HashMap::new();
    let mut best = (f64::NEG_INFINITY, vec![]);
    for a in BlockChoice::ALL {
        for b in BlockChoice::ALL {
            let key = space.genome_from_choices(&[a, b]).layers.iter().map(|g| g.choice.index()).collect::<Vec<_>>();
            let f: f64 = rng.random();
            if f > best.0 {
                best = (f, key.clone());
            }
            table.insert(key, f);
        }
    }
    (table, best.1)
}

pub fn toy_dims() -> ModelDims {
    let mut d = ModelDims::desk(40);
    d.layers = 2;
    d
}

/// A run small enough for the whole pipeline to finish in a few seconds.
pub fn tiny_config(workdir: &std::path::Path, seed: u64) -> elm_core::pipeline::SearchConfig {
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
train.epochs_pretrain = 3
train.epochs_finetune = 1
train.epochs_final = 1
train.steps_per_epoch = 3
train.batch_size = 2
train.seq_len = 16
kd.teacher_hidden = 24
kd.teacher_heads = 4
kd.teacher_ffn = 32
kd.teacher_epochs = 1
evo.population = 6
evo.generations = 3
evo.parents = 3
evo.elites = 1
run.seed = {seed}
run.workdir = {}
",
        corpus_path().display(),
        workdir.display()
    );
    elm_core::pipeline::SearchConfig::parse(&text).expect("tiny config parses")
}

pub fn randt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Central-difference gradient check of a scalar loss over all `inputs`.
pub fn grad_rel_err(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new(DType::F64);
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x)).collect();
        let l = build(&mut g, &vars).unwrap();
        (g, vars, l)
    };
    let (g, vars, loss) = eval(inputs);
    let grads = g.backward(loss).unwrap();
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0f64, 0.0f64);
    let h = 1e-6;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        for j in 0..x.numel() {
            let shifted = |delta: f64| {
                let mut xs = inputs.to_vec();
                let mut d = x.data().to_vec();
                d[j] += delta;
                xs[i] = Tensor::new(x.shape().to_vec(), d).unwrap();
                let (g2, _, l2) = eval(&xs);
                g2.value(l2).item()
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = analytic.data()[j];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-10)
}

pub fn probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    softmax_rows(&randt(rng, &[rows, cols]))
}

/// The five losses as graph builders over random small shapes.
pub fn check_all_losses(trials: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4b44);
    let mut worst = vec![("cd_kl", 0.0f64), ("cd_rel", 0.0), ("ad_mse", 0.0), ("ad_rel", 0.0), ("fd_mse", 0.0), ("fd_rel", 0.0)];
    for _ in 0..trials {
        // Two-class rows are always perfectly (anti)correlated, so their relational gradient is zero.
        let (rows, v) = (rng.random_range(1..5), rng.random_range(3..7));
        let yt = probs(&mut rng, rows, v);
        let logits = randt(&mut rng, &[rows, v]);
        let e = grad_rel_err(std::slice::from_ref(&logits), &|g, x| {
            let ys = g.softmax(x[0])?;
            kl_rows(g, &yt, ys, DEFAULT_EPS)
        });
        worst[0].1 = worst[0].1.max(e);
        let e = grad_rel_err(std::slice::from_ref(&logits), &|g, x| {
            let ys = g.softmax(x[0])?;
            let t = g.constant(&yt);
            pearson_mean(g, t, ys, DEFAULT_EPS)
        });
        worst[1].1 = worst[1].1.max(e);

        let (b, h, n) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(3..6));
        let scores = randt(&mut rng, &[b * h * n, n]);
        let target = probs(&mut rng, b * n, n);
        for (slot, relational) in [(2, false), (3, true)] {
            let e = grad_rel_err(std::slice::from_ref(&scores), &|g, x| {
                let att = g.softmax(x[0])?;
                let att = g.reshape(att, &[b * h, n, n])?;
                let avg = head_average(g, att, b, h, n)?;
                let t = g.constant(&target);
                if relational {
                    pearson_mean(g, t, avg, DEFAULT_EPS)
                } else {
                    mse(g, t, avg)
                }
            });
            worst[slot].1 = worst[slot].1.max(e);
        }

        let (tok, cs, ct) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(3..6));
        let inputs = vec![randt(&mut rng, &[tok, cs]), randt(&mut rng, &[cs, ct]), randt(&mut rng, &[ct])];
        let ft = randt(&mut rng, &[tok, ct]);
        for (slot, relational) in [(4, false), (5, true)] {
            let e = grad_rel_err(&inputs, &|g, x| {
                let fs = g.linear(x[0], x[1], x[2])?;
                let t = g.constant(&ft);
                if relational {
                    pearson_mean(g, t, fs, DEFAULT_EPS)
                } else {
                    mse(g, t, fs)
                }
            });
            worst[slot].1 = worst[slot].1.max(e);
        }
    }
    worst
}

pub fn affine_rows(x: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(n) {
        let (a, b) = (rng.random_range(0.1..5.0), rng.random_range(-3.0..3.0));
        out.extend(row.iter().map(|v| a * v + b));
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}
