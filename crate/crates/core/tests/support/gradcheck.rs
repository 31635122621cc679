//! Central-difference gradient checks for every tape op.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tve_core::tensor::RowMix;
use tve_core::{rng, Tape, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-2;

type Build = dyn Fn(&mut Tape, &[Var]) -> tve_core::Result<Var>;

/// Scalar loss of `build` applied to `inputs`, reduced by a fixed target.
fn loss(inputs: &[Tensor], target: Option<&Tensor>, build: &Build) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars).expect("op runs");
    let l = match target {
        Some(t) => {
            let t = tape.constant(t.clone());
            tape.mse(out, t).expect("mse runs")
        }
        None => out,
    };
    (tape, vars, l)
}

/// Worst norm-wise relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// over all inputs of one instance.
pub fn relative_error(inputs: &[Tensor], target: Option<&Tensor>, build: &Build) -> f64 {
    let (tape, vars, l) = loss(inputs, target, build);
    let grads = tape.backward(l).expect("backward runs");
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("input receives a gradient");
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let mut shifted = inputs.to_vec();
                let mut data = input.data().to_vec();
                data[i] = (data[i] as f64 + delta) as f32;
                let mut t = Tensor::new(input.dims().to_vec(), data).unwrap();
                t.set_requires_grad(true);
                shifted[k] = t;
                let (tape, _, l) = loss(&shifted, target, build);
                tape.value(l).item() as f64
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let a = analytic[i] as f64;
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 1e-8 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

fn param(dims: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(dims, 1.0, r).into_param()
}

/// Values bounded away from zero, for ops with a kink or a pole there.
fn away_from_zero(dims: &[usize], low: f32, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = r.random_range(low..2.0);
            if r.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap().into_param()
}

fn positive(dims: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| r.random_range(0.3f32..2.0)).collect()).unwrap().into_param()
}

fn random_mix(rows_in: usize, rows_out: usize, r: &mut ChaCha8Rng) -> RowMix {
    let mut mix = RowMix::new();
    for _ in 0..rows_out {
        let k = r.random_range(1..=rows_in);
        mix.push_row((0..k).map(|_| (r.random_range(0..rows_in), r.random_range(-1.0f32..1.0))));
    }
    mix
}

pub const OPS: [&str; 12] = [
    "matmul", "add", "add_broadcast", "scale", "relu", "gelu", "layer_norm", "softmax", "log", "mse", "cross_entropy", "row_mix",
];

/// Worst relative error of `op` over `instances` random instances.
pub fn check_op(op: &str, instances: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = rng::stream(seed, &[op.len() as u64, op.bytes().map(u64::from).sum(), i as u64]);
        let (m, n) = (r.random_range(1..5usize), r.random_range(1..5usize));
        let err = match op {
            "matmul" => {
                let k = r.random_range(1..5usize);
                let t = Tensor::randn(&[m, n], 1.0, &mut r);
                relative_error(&[param(&[m, k], &mut r), param(&[k, n], &mut r)], Some(&t), &|t, v| t.matmul(v[0], v[1]))
            }
            "add" => {
                let t = Tensor::randn(&[m, n], 1.0, &mut r);
                relative_error(&[param(&[m, n], &mut r), param(&[m, n], &mut r)], Some(&t), &|t, v| t.add(v[0], v[1]))
            }
            "add_broadcast" => {
                let t = Tensor::randn(&[2, m, n], 1.0, &mut r);
                relative_error(&[param(&[2, m, n], &mut r), param(&[n], &mut r)], Some(&t), &|t, v| t.add(v[0], v[1]))
            }
            "scale" => {
                let f: f32 = r.random_range(-2.0..2.0);
                let t = Tensor::randn(&[m, n], 1.0, &mut r);
                relative_error(&[param(&[m, n], &mut r)], Some(&t), &move |t, v| t.scale(v[0], f))
            }
            "relu" => {
                let t = Tensor::randn(&[m, n], 1.0, &mut r);
                relative_error(&[away_from_zero(&[m, n], 0.05, &mut r)], Some(&t), &|t, v| t.relu(v[0]))
            }
            "gelu" => {
                let t = Tensor::randn(&[m, n], 1.0, &mut r);
                relative_error(&[param(&[m, n], &mut r)], Some(&t), &|t, v| t.gelu(v[0]))
            }
            "layer_norm" => {
                // Two features normalize to ±1 whatever the input; use at least three.
                let n = n + 2;
                let t = Tensor::randn(&[m, n], 1.0, &mut r);
                let inputs = [param(&[m, n], &mut r), param(&[n], &mut r), param(&[n], &mut r)];
                relative_error(&inputs, Some(&t), &|t, v| t.layer_norm(v[0], v[1], v[2]))
            }
            "softmax" => {
                let t = Tensor::randn(&[m, n + 1], 0.3, &mut r);
                relative_error(&[param(&[m, n + 1], &mut r)], Some(&t), &|t, v| t.softmax(v[0]))
            }
            "log" => {
                let t = Tensor::randn(&[m, n], 1.0, &mut r);
                relative_error(&[positive(&[m, n], &mut r)], Some(&t), &|t, v| t.log(v[0]))
            }
            "mse" => relative_error(&[param(&[m, n], &mut r), param(&[m, n], &mut r)], None, &|t, v| t.mse(v[0], v[1])),
            "cross_entropy" => {
                let k = n + 1;
                let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..k)).collect();
                relative_error(&[param(&[m, k], &mut r)], None, &move |t, v| t.cross_entropy(v[0], &labels))
            }
            "row_mix" => {
                let out = r.random_range(1..5usize);
                let mix = Arc::new(random_mix(m, out, &mut r));
                let t = Tensor::randn(&[out, n], 1.0, &mut r);
                relative_error(&[param(&[m, n], &mut r)], Some(&t), &move |t, v| t.row_mix(v[0], mix.clone()))
            }
            other => panic!("unknown op {other}"),
        };
        worst = worst.max(err);
    }
    worst
}
