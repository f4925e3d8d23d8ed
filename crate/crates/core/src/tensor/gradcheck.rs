//! Finite-difference verification of every graph op.
//!
//! Each instance draws random shapes and values, reduces the op's output to a
//! scalar through a fixed random projection, and compares the analytic input
//! gradients with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_grad, BnMode, Conv2dAttrs, Graph, Tensor, TensorError, Var};

/// Builds the op under test from its input vars.
type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

/// Largest relative error seen for one op.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.data().iter().zip(numeric.data()).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.data().iter().copied()).max(norm(&mut numeric.data().iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn projected(g: &mut Graph, out: Var, proj_seed: u64) -> Result<Var, TensorError> {
    if g.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let r = g.constant(Tensor::randn(shape, 1.0, &mut rng));
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

fn scalar_of(case: &Case, inputs: &[Tensor], proj_seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars).expect("op evaluates");
    let l = projected(&mut g, out, proj_seed).expect("projection");
    g.value(l).item()
}

fn check_case(case: &Case, proj_seed: u64, eps: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars).expect("op evaluates");
    let l = projected(&mut g, out, proj_seed).expect("projection");
    g.backward(l).expect("backward");
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape().to_vec()));
        let numeric = finite_diff_grad(
            |x| {
                let mut inputs = case.inputs.clone();
                inputs[i] = x.clone();
                scalar_of(case, &inputs, proj_seed)
            },
            &case.inputs[i],
            eps,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// A shuffled, well-separated grid so max-pool windows never tie.
fn distinct(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn make_case(op: &'static str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "conv2d" => {
            let (n, c_in, c_out) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4));
            let k = [1, 3][rng.random_range(0..2)];
            let stride = dim(rng, 1, 2);
            let pad = if k == 3 { dim(rng, 0, 1) } else { 0 };
            let (h, w) = (dim(rng, k.max(3), 6), dim(rng, k.max(3), 6));
            let bias = rng.random_bool(0.5);
            let out_active: Option<Vec<bool>> = rng
                .random_bool(0.3)
                .then(|| (0..c_out).map(|o| o == 0 || rng.random_bool(0.5)).collect());
            let mut inputs = vec![
                Tensor::randn(vec![n, c_in, h, w], 1.0, rng),
                Tensor::randn(vec![c_out, c_in, k, k], 0.5, rng),
            ];
            if bias {
                inputs.push(Tensor::randn(vec![c_out], 0.5, rng));
            }
            let attrs = Conv2dAttrs {
                stride,
                pad,
                out_active,
            };
            Case {
                inputs,
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), &attrs)),
            }
        }
        "batchnorm2d_train" => {
            let (n, c, h, w) = (dim(rng, 2, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            Case {
                inputs: vec![
                    Tensor::randn(vec![n, c, h, w], 1.0, rng),
                    Tensor::uniform(vec![c], 0.5, 1.5, rng),
                    Tensor::randn(vec![c], 0.5, rng),
                ],
                build: Box::new(|g, v| Ok(g.batchnorm2d(v[0], v[1], v[2], BnMode::Train, 1e-5)?.0)),
            }
        }
        "batchnorm2d_eval" => {
            let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            Case {
                inputs: vec![
                    Tensor::randn(vec![n, c, h, w], 1.0, rng),
                    Tensor::uniform(vec![c], 0.5, 1.5, rng),
                    Tensor::randn(vec![c], 0.5, rng),
                ],
                build: Box::new(move |g, v| {
                    Ok(g
                        .batchnorm2d(
                            v[0],
                            v[1],
                            v[2],
                            BnMode::Eval {
                                mean: &mean,
                                var: &var,
                            },
                            1e-5,
                        )?
                        .0)
                }),
            }
        }
        "relu" => {
            let shape = vec![dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
            Case {
                inputs: vec![away_from_zero(shape, rng)],
                build: Box::new(|g, v| g.relu(v[0])),
            }
        }
        "maxpool2d" => {
            let k = dim(rng, 1, 2);
            let stride = dim(rng, 1, 2);
            let shape = vec![dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 6), dim(rng, 2, 6)];
            Case {
                inputs: vec![distinct(shape, rng)],
                build: Box::new(move |g, v| g.maxpool2d(v[0], k, stride)),
            }
        }
        "avgpool2d" => {
            let k = dim(rng, 1, 3);
            let stride = dim(rng, 1, 3);
            let shape = vec![dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 3, 6), dim(rng, 3, 6)];
            Case {
                inputs: vec![Tensor::randn(shape, 1.0, rng)],
                build: Box::new(move |g, v| g.avgpool2d(v[0], k, stride)),
            }
        }
        "linear" => {
            let (n, i, o) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 5));
            let bias = rng.random_bool(0.5);
            let mut inputs = vec![Tensor::randn(vec![n, i], 1.0, rng), Tensor::randn(vec![o, i], 0.5, rng)];
            if bias {
                inputs.push(Tensor::randn(vec![o], 0.5, rng));
            }
            Case {
                inputs,
                build: Box::new(|g, v| g.linear(v[0], v[1], v.get(2).copied())),
            }
        }
        "add" | "mul" => {
            let shape = vec![dim(rng, 1, 3), dim(rng, 1, 4)];
            let inputs = vec![Tensor::randn(shape.clone(), 1.0, rng), Tensor::randn(shape, 1.0, rng)];
            let build: Build = if op == "add" {
                Box::new(|g, v| g.add(v[0], v[1]))
            } else {
                Box::new(|g, v| g.mul(v[0], v[1]))
            };
            Case { inputs, build }
        }
        "mul_scalar" => {
            let c = rng.random_range(-2.0..2.0);
            Case {
                inputs: vec![Tensor::randn(vec![dim(rng, 1, 5)], 1.0, rng)],
                build: Box::new(move |g, v| g.mul_scalar(v[0], c)),
            }
        }
        "channel_mask_mul" => {
            let c = dim(rng, 1, 4);
            let gates: Vec<f64> = (0..c)
                .map(|i| if i == 0 { 1.0 } else { [0.0, 1.0, 0.5][rng.random_range(0..3)] })
                .collect();
            let shape = vec![dim(rng, 1, 2), c, dim(rng, 1, 3), dim(rng, 1, 3)];
            Case {
                inputs: vec![Tensor::randn(shape, 1.0, rng)],
                build: Box::new(move |g, v| g.channel_mask_mul(v[0], &gates)),
            }
        }
        "softmax_cross_entropy" => {
            let (n, k) = (dim(rng, 1, 5), dim(rng, 2, 6));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            Case {
                inputs: vec![Tensor::randn(vec![n, k], 2.0, rng)],
                build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
            }
        }
        "flatten" => {
            let shape = vec![dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            Case {
                inputs: vec![Tensor::randn(shape, 1.0, rng)],
                build: Box::new(|g, v| g.flatten(v[0])),
            }
        }
        "sum" => Case {
            inputs: vec![Tensor::randn(vec![dim(rng, 1, 4), dim(rng, 1, 4)], 1.0, rng)],
            build: Box::new(|g, v| g.sum(v[0])),
        },
        "composite" => {
            // conv → bn → relu → gate → avgpool → flatten → linear → CE
            let (n, c_in, c) = (dim(rng, 2, 3), dim(rng, 1, 2), dim(rng, 2, 3));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let gates: Vec<f64> = (0..c).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
            Case {
                inputs: vec![
                    Tensor::randn(vec![n, c_in, 4, 4], 1.0, rng),
                    Tensor::randn(vec![c, c_in, 3, 3], 0.5, rng),
                    Tensor::uniform(vec![c], 0.5, 1.5, rng),
                    Tensor::randn(vec![c], 0.3, rng),
                    Tensor::randn(vec![3, c], 0.5, rng),
                ],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], None, &Conv2dAttrs::new(1, 1))?;
                    let (y, _) = g.batchnorm2d(y, v[2], v[3], BnMode::Train, 1e-5)?;
                    let y = g.relu(y)?;
                    let y = g.channel_mask_mul(y, &gates)?;
                    let y = g.avgpool2d(y, 4, 4)?;
                    let y = g.flatten(y)?;
                    let y = g.linear(y, v[4], None)?;
                    g.softmax_cross_entropy(y, &labels)
                }),
            }
        }
        other => panic!("no gradient check for op {other}"),
    }
}

pub const OPS: &[&str] = &[
    "conv2d",
    "batchnorm2d_train",
    "batchnorm2d_eval",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "linear",
    "add",
    "mul",
    "mul_scalar",
    "channel_mask_mul",
    "softmax_cross_entropy",
    "flatten",
    "sum",
    "composite",
];

/// Runs `instances` random checks of every op in [`OPS`] with step `eps`.
pub fn check_all_ops(instances: usize, seed: u64, eps: f64) -> Vec<OpCheck> {
    OPS.iter()
        .enumerate()
        .map(|(i, &op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 * i as u64));
            let mut worst = 0.0f64;
            for j in 0..instances {
                let case = make_case(op, &mut rng);
                worst = worst.max(check_case(&case, seed ^ (j as u64 + 1), eps));
            }
            OpCheck {
                op,
                instances,
                max_rel_err: worst,
            }
        })
        .collect()
}
