use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_abs_diff, Check};
use crate::geometry::{chamfer_distance, MapClass, MapElement, Point};
use crate::tensor::{Tape, Tensor};

/// Direct quadruple-loop cross-correlation.
pub fn conv2d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([cout, ho, wo]);
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = bias[o];
                for c in 0..cin {
                    for a in 0..kh {
                        for b in 0..kw {
                            let (r, s) = ((i * stride + a) as isize - pad as isize, (j * stride + b) as isize - pad as isize);
                            if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                acc += k.data()[((o * cin + c) * kh + a) * kw + b]
                                    * x.data()[(c * h + r as usize) * w + s as usize];
                            }
                        }
                    }
                }
                out.data_mut()[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    out
}

fn conv_check() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (kh, stride, pad) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(0..2));
        let (h, w) = (rng.gen_range(kh..9), rng.gen_range(kh..9));
        let x = Tensor::from_fn([cin, h, w], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn([cout, cin, kh, kh], |_| rng.gen_range(-1.0..1.0));
        let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(Tensor::new([cout], b.clone()).expect("shape")));
        let got = match t.conv2d(xv, kv, Some(bv), stride, pad) {
            Ok(y) => t.value(y).clone(),
            Err(_) => return Check::new("oracle/conv2d", 20, f64::INFINITY, 1e-12),
        };
        worst = worst.max(max_abs_diff(got.data(), conv2d_oracle(&x, &k, &b, stride, pad).data()));
    }
    Check::new("oracle/conv2d", 20, worst, 1e-12)
}

fn mse_check() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..6)];
        let a = Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0));
        let b = Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0));
        let mut oracle = 0.0;
        for i in 0..a.len() {
            let d = a.data()[i] - b.data()[i];
            oracle += d * d;
        }
        oracle /= a.len() as f64;
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let ab = t.mse(av, bv).map(|v| t.value(v).item());
        let ba = t.mse(bv, av).map(|v| t.value(v).item());
        match (ab, ba) {
            (Ok(ab), Ok(ba)) if ab.to_bits() == ba.to_bits() => worst = worst.max((ab - oracle).abs()),
            _ => worst = f64::INFINITY,
        }
    }
    Check::new("oracle/mse", 20, worst, 1e-12)
}

fn focal_check() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (n, k) = (rng.gen_range(1..9), 4);
        let logits: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut oracle = 0.0;
        for r in 0..n {
            let row = &logits[r * k..(r + 1) * k];
            let denom: f64 = row.iter().map(|z| z.exp()).sum();
            let p = row[targets[r]].exp() / denom;
            oracle += -0.25 * (1.0 - p).powi(2) * p.ln();
        }
        oracle /= n as f64;
        let mut t = Tape::new();
        let z = t.constant(Tensor::new([n, k], logits).expect("shape"));
        worst = match t.focal_loss(z, &targets, &[0.25; 4], 2.0) {
            Ok(v) => worst.max((t.value(v).item() - oracle).abs()),
            Err(_) => f64::INFINITY,
        };
    }
    Check::new("oracle/focal_loss", 20, worst, 1e-10)
}

/// Dense brute force: sample each polyline every `step` meters by walking
/// every segment, measure each sample against a dense sampling of the other.
fn chamfer_dense(a: &[Point], b: &[Point], step: f64) -> f64 {
    let sample = |pts: &[Point]| {
        let mut out = Vec::new();
        for w in pts.windows(2) {
            let n = (w[0].dist(w[1]) / step).ceil() as usize;
            for i in 0..n {
                out.push(w[0] + (w[1] - w[0]) * (i as f64 / n as f64));
            }
        }
        out.push(*pts.last().expect("non-empty"));
        out
    };
    let (sa, sb) = (sample(a), sample(b));
    let one_way = |from: &[Point], to: &[Point]| {
        from.iter()
            .map(|p| to.iter().map(|q| p.dist(*q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (one_way(&sa, &sb) + one_way(&sb, &sa))
}

fn chamfer_check() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut poly = || {
            (0..5)
                .map(|_| Point::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
                .collect::<Vec<_>>()
        };
        let (a, b) = (poly(), poly());
        let ea = MapElement::ground_truth(MapClass::Divider, a.clone()).expect("valid");
        let eb = MapElement::ground_truth(MapClass::Divider, b.clone()).expect("valid");
        let oracle = chamfer_dense(&a, &b, 0.01);
        worst = match chamfer_distance(&ea, &eb, 0.1) {
            Ok(d) => worst.max((d - oracle).abs() / oracle),
            Err(_) => f64::INFINITY,
        };
    }
    Check::new("oracle/chamfer_distance", 10, worst, 0.02)
}

fn normalize_checks() -> [Check; 2] {
    let (mut worst_var, mut worst_mean) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (c, h, w) = (4, 3, 3);
        let scale = rng.gen_range(0.5..20.0);
        let x = Tensor::from_fn([c, h, w], |_| scale * rng.gen_range(-1.0..1.0) + 3.0);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = match t.channel_normalize(xv, 1e-5) {
            Ok(y) => t.value(y).clone(),
            Err(_) => {
                (worst_var, worst_mean) = (f64::INFINITY, f64::INFINITY);
                continue;
            }
        };
        for ch in 0..c {
            let xs = &x.data()[ch * h * w..(ch + 1) * h * w];
            let ys = &y.data()[ch * h * w..(ch + 1) * h * w];
            // Two-pass statistics of the input predict the output variance.
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / xs.len() as f64;
            let want_var = var / (var + 1e-5);
            let ym = ys.iter().sum::<f64>() / ys.len() as f64;
            let yvar = ys.iter().map(|v| (v - ym) * (v - ym)).sum::<f64>() / ys.len() as f64;
            worst_var = worst_var.max((yvar - want_var).abs());
            worst_mean = worst_mean.max(ym.abs());
        }
    }
    [
        Check::new("oracle/channel_normalize_variance", 20, worst_var, 1e-9),
        Check::new("oracle/channel_normalize_mean", 20, worst_mean, 1e-12),
    ]
}

/// Tensor and geometry oracles.
pub fn oracle_suite() -> Vec<Check> {
    let mut checks = vec![conv_check(), mse_check(), focal_check(), chamfer_check()];
    checks.extend(normalize_checks());
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_pass() {
        for c in oracle_suite() {
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn dense_chamfer_of_parallel_lines() {
        let a = [Point::new(0.0, 0.0), Point::new(10.0, 0.0)];
        let b = [Point::new(0.0, 1.0), Point::new(10.0, 1.0)];
        assert!((chamfer_dense(&a, &b, 0.01) - 1.0).abs() < 1e-9);
    }
}
