//! Central finite-difference checks for every differentiable graph operation.

use elm_core::numkernel::{DType, Graph, Tensor, Var};
use elm_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TRIALS: usize = 50;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn weighted_loss(inputs: &[Tensor], build: &Build, weights: &mut Option<Tensor>, rng: &mut ChaCha8Rng) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new(DType::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = build(&mut g, &vars).unwrap();
    let shape = g.shape(out).to_vec();
    let w = weights.get_or_insert_with(|| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    });
    let wv = g.constant(w);
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum_all(prod).unwrap();
    (g, vars, loss)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

/// Runs `TRIALS` randomized checks; `make` draws fresh inputs each trial.
fn check(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a7d);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let inputs = make(&mut rng);
        let mut weights = None;
        let (g, vars, loss) = weighted_loss(&inputs, build, &mut weights, &mut rng);
        let grads = g.backward(loss).unwrap();
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]);
            let mut numeric = vec![0.0; input.numel()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let eval = |delta: f64| {
                    let mut shifted = inputs.clone();
                    let mut data = shifted[i].data().to_vec();
                    data[j] += delta;
                    shifted[i] = Tensor::new(input.shape().to_vec(), data).unwrap();
                    let mut w = weights.clone();
                    let (g2, _, l2) = weighted_loss(&shifted, build, &mut w, &mut ChaCha8Rng::seed_from_u64(0));
                    g2.value(l2).item()
                };
                *slot = (eval(H) - eval(-H)) / (2.0 * H);
            }
            worst = worst.max(rel_err(analytic.data(), &numeric));
        }
    }
    assert!(worst < 1e-4, "{name}: worst relative gradient error {worst:e}");
}

fn randt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

#[test]
fn elementwise_binary_ops() {
    let two = |r: &mut ChaCha8Rng| vec![randt(r, &[3, 4]), randt(r, &[3, 4])];
    check("add", two, &|g, v| g.add(v[0], v[1]));
    check("sub", two, &|g, v| g.sub(v[0], v[1]));
    check("mul", two, &|g, v| g.mul(v[0], v[1]));
}

#[test]
fn elementwise_unary_ops() {
    let one = |r: &mut ChaCha8Rng| vec![randt(r, &[2, 5])];
    check("scale", one, &|g, v| g.scale(v[0], -0.7));
    check("add_scalar", one, &|g, v| g.add_scalar(v[0], 3.0));
    check("square", one, &|g, v| g.square(v[0]));
    check("gelu", one, &|g, v| g.gelu(v[0]));
    check("log", |r| vec![positive(r, &[2, 5])], &|g, v| g.log(v[0]));
    // Values kept away from the floor so the kink is never straddled.
    check("clamp_min", |r| vec![positive(r, &[2, 5])], &|g, v| g.clamp_min(v[0], 0.1));
    check("sum_all", one, &|g, v| g.sum_all(v[0]));
    check("mean_all", one, &|g, v| g.mean_all(v[0]));
}

#[test]
fn matrix_products() {
    check("matmul", |r| vec![randt(r, &[3, 4]), randt(r, &[4, 2])], &|g, v| g.matmul(v[0], v[1]));
    check("linear", |r| vec![randt(r, &[3, 4]), randt(r, &[4, 2]), randt(r, &[2])], &|g, v| {
        g.linear(v[0], v[1], v[2])
    });
    check("batch_matmul", |r| vec![randt(r, &[2, 3, 4]), randt(r, &[2, 4, 2])], &|g, v| {
        g.batch_matmul(v[0], v[1], false)
    });
    check("batch_matmul_t", |r| vec![randt(r, &[2, 3, 4]), randt(r, &[2, 5, 4])], &|g, v| {
        g.batch_matmul(v[0], v[1], true)
    });
    check("transpose", |r| vec![randt(r, &[3, 2])], &|g, v| g.transpose(v[0]));
}

#[test]
fn shape_ops() {
    check("reshape", |r| vec![randt(r, &[2, 6])], &|g, v| g.reshape(v[0], &[3, 4]));
    check("swap_axes12", |r| vec![randt(r, &[2, 3, 2, 2])], &|g, v| g.swap_axes12(v[0], [2, 3, 2, 2]));
    check("mean_middle", |r| vec![randt(r, &[2, 3, 4])], &|g, v| g.mean_middle(v[0], 2, 3, 4, &[2, 4]));
    check("add_row", |r| vec![randt(r, &[3, 4]), randt(r, &[4])], &|g, v| g.add_row(v[0], v[1]));
    check("embedding", |r| vec![randt(r, &[5, 3])], &|g, v| g.embedding(v[0], &[4, 0, 4, 2]));
    check("gather_rows", |r| vec![randt(r, &[4, 3])], &|g, v| g.gather_rows(v[0], &[3, 1, 3]));
}

#[test]
fn normalization_ops() {
    check("softmax", |r| vec![randt(r, &[3, 5])], &|g, v| g.softmax(v[0]));
    check("layer_norm", |r| vec![randt(r, &[3, 5]), randt(r, &[5]), randt(r, &[5])], &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn loss_ops() {
    check("cross_entropy", |r| vec![randt(r, &[4, 6])], &|g, v| {
        g.cross_entropy(v[0], &[1, 5, 0, 2], &[true, false, true, true])
    });
    check("pearson_rows", |r| vec![randt(r, &[3, 5]), randt(r, &[3, 5])], &|g, v| {
        g.pearson_rows(v[0], v[1], 1e-8)
    });
}

#[test]
fn softmax_and_layer_norm_row_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = randt(&mut rng, &[4, 7]);
        let s = elm_core::numkernel::softmax_rows(&x);
        for r in 0..4 {
            let row = s.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let shifted = Tensor::new(vec![4, 7], x.data().iter().map(|v| v + 12.5).collect()).unwrap();
        assert!(elm_core::numkernel::softmax_rows(&shifted).max_abs_diff(&s) < 1e-12);

        let eps = 1e-5;
        let y = elm_core::numkernel::layer_norm(&x, &Tensor::full(&[7], 1.0), &Tensor::zeros(&[7]), eps).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 7.0;
            let xr = x.row(r);
            let xm = xr.iter().sum::<f64>() / 7.0;
            let xv = xr.iter().map(|v| (v - xm) * (v - xm)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - xv / (xv + eps)).abs() < 1e-4);
        }
    }
}
