use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Check;
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
const CASES: usize = 20;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Reduces any output to a scalar through fixed random weights so every
/// output entry contributes to the checked gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = tape.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::from_fn([1, n], |_| rng.gen_range(-1.0..1.0)));
    let flat = tape.reshape(y, &[n])?;
    let z = tape.linear(flat, w, None)?;
    tape.sum(z)
}

fn evaluate(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let y = build(&mut tape, &vars)?;
    let l = project(&mut tape, y, seed)?;
    Ok(tape.value(l).item())
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-6)` (Euclidean norms per
/// input) between reverse-mode and central-difference gradients, worst over
/// all inputs.
pub fn grad_check(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = build(&mut tape, &vars)?;
    let l = project(&mut tape, y, seed)?;
    tape.backward(l)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            *slot = (evaluate(&plus, build, seed)? - evaluate(&minus, build, seed)?) / (2.0 * STEP);
        }
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let denom = norm(&analytic).max(norm(&numeric)).max(1e-6);
        worst = worst.max(norm(&diff) / denom);
    }
    Ok(worst)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn run(name: &str, mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build<'static>>)) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..CASES as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let (inputs, build) = case(&mut rng);
        worst = match grad_check(&inputs, &*build, seed) {
            Ok(e) => worst.max(e),
            Err(_) => f64::INFINITY,
        };
    }
    Check::new(format!("grad/{name}"), CASES, worst, TOLERANCE)
}

fn chw(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..6)]
}

/// Finite-difference gradient checks for every differentiable op.
pub fn autodiff_suite() -> Vec<Check> {
    vec![
        run("conv2d", |rng| {
            let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (kh, stride, pad) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(0..2));
            let (h, w) = (rng.gen_range(kh..7), rng.gen_range(kh..7));
            let inputs = vec![randn(rng, &[cin, h, w]), randn(rng, &[cout, cin, kh, kh]), randn(rng, &[cout])];
            (
                inputs,
                Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
            )
        }),
        run("relu", |rng| {
            let s = chw(rng);
            (vec![randn(rng, &s)], Box::new(|t, v| t.relu(v[0])))
        }),
        run("leaky_relu", |rng| {
            let s = chw(rng);
            (vec![randn(rng, &s)], Box::new(|t, v| t.leaky_relu(v[0], 0.1)))
        }),
        run("tanh", |rng| {
            let s = chw(rng);
            (vec![randn(rng, &s)], Box::new(|t, v| t.tanh(v[0])))
        }),
        run("scale", |rng| {
            let s = chw(rng);
            let k = rng.gen_range(-3.0..3.0);
            (vec![randn(rng, &s)], Box::new(move |t, v| t.scale(v[0], k)))
        }),
        run("add_sub", |rng| {
            let s = chw(rng);
            (
                vec![randn(rng, &s), randn(rng, &s)],
                Box::new(|t, v| {
                    let a = t.add(v[0], v[1])?;
                    let b = t.sub(a, v[1])?;
                    t.sub(b, v[0])
                }),
            )
        }),
        run("add_all_fan_out", |rng| {
            let s = chw(rng);
            (
                vec![randn(rng, &s), randn(rng, &s)],
                Box::new(|t, v| {
                    let r = t.relu(v[0])?;
                    t.add_all(&[v[0], v[1], r, v[0]])
                }),
            )
        }),
        run("sum_mean", |rng| {
            let s = chw(rng);
            (
                vec![randn(rng, &s)],
                Box::new(|t, v| {
                    let a = t.sum(v[0])?;
                    let b = t.mean(v[0])?;
                    t.add(a, b)
                }),
            )
        }),
        run("reshape_select_row", |rng| {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..6));
            let row = rng.gen_range(0..r);
            (
                vec![randn(rng, &[r * c])],
                Box::new(move |t, v| {
                    let m = t.reshape(v[0], &[r, c])?;
                    t.select_row(m, row)
                }),
            )
        }),
        run("concat", |rng| {
            let [_, h, w] = chw(rng);
            let (a, b) = (rng.gen_range(1..4), rng.gen_range(1..4));
            (
                vec![randn(rng, &[a, h, w]), randn(rng, &[b, h, w])],
                Box::new(|t, v| t.concat(&[v[0], v[1], v[0]])),
            )
        }),
        run("upsample2x", |rng| {
            let s = chw(rng);
            (vec![randn(rng, &s)], Box::new(|t, v| t.upsample2x(v[0])))
        }),
        run("maxpool2", |rng| {
            let s = chw(rng);
            (vec![randn(rng, &s)], Box::new(|t, v| t.maxpool2(v[0])))
        }),
        run("channel_normalize", |rng| {
            let s = chw(rng);
            (vec![randn(rng, &s)], Box::new(|t, v| t.channel_normalize(v[0], 1e-5)))
        }),
        run("channel_affine", |rng| {
            let s = chw(rng);
            (
                vec![randn(rng, &s), randn(rng, &[s[0]]), randn(rng, &[s[0]])],
                Box::new(|t, v| t.channel_affine(v[0], v[1], v[2])),
            )
        }),
        run("linear", |rng| {
            let (i, o) = (rng.gen_range(1..8), rng.gen_range(1..6));
            (
                vec![randn(rng, &[i]), randn(rng, &[o, i]), randn(rng, &[o])],
                Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
            )
        }),
        run("gather_cells", |rng| {
            let c = rng.gen_range(1..4);
            let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
            let shapes = [[c, 3, 2], [c, 2, 4]];
            let index: Arc<[Option<(usize, usize)>]> = (0..h * w)
                .map(|_| match rng.gen_range(0..3) {
                    0 => None,
                    s => Some((s - 1, rng.gen_range(0..shapes[s - 1][1] * shapes[s - 1][2]))),
                })
                .collect();
            (
                vec![randn(rng, &shapes[0]), randn(rng, &shapes[1]), randn(rng, &[c])],
                Box::new(move |t, v| t.gather_cells(&[v[0], v[1]], v[2], index.clone(), h, w)),
            )
        }),
        run("mse", |rng| {
            let s = chw(rng);
            (vec![randn(rng, &s), randn(rng, &s)], Box::new(|t, v| t.mse(v[0], v[1])))
        }),
        run("focal_loss", |rng| {
            let (n, k) = (rng.gen_range(1..6), rng.gen_range(2..5));
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let alpha: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let gamma = [0.0, 1.0, 2.0][rng.gen_range(0..3)];
            let logits = Tensor::from_fn([n, k], |_| rng.gen_range(-3.0..3.0));
            (
                vec![logits],
                Box::new(move |t, v| t.focal_loss(v[0], &targets, &alpha, gamma)),
            )
        }),
        run("l1_line_loss", |rng| {
            let k = rng.gen_range(2..7);
            let target = randn(rng, &[k, 2]);
            (vec![randn(rng, &[k, 2])], Box::new(move |t, v| t.l1_line_loss(v[0], &target)))
        }),
        run("composite", |rng| {
            let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..4));
            let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
            let target = randn(rng, &[cout, h, w]);
            (
                vec![randn(rng, &[cin, h, w]), randn(rng, &[cout, cin, 3, 3]), randn(rng, &[cout])],
                Box::new(move |t, v| {
                    let c = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                    let r = t.relu(c)?;
                    let n = t.channel_normalize(r, 1e-5)?;
                    let goal = t.constant(target.clone());
                    t.mse(n, goal)
                }),
            )
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for check in autodiff_suite() {
            assert!(check.passed(), "{check}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A detached branch hides part of the dependence from reverse mode.
        let inputs = vec![Tensor::from_fn([4], |i| i as f64 + 0.5)];
        let err = grad_check(
            &inputs,
            &|t, v| {
                let detached = t.constant(t.value(v[0]).clone());
                t.add(v[0], detached)
            },
            0,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }
}
