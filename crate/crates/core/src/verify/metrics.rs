use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Check;
use crate::analysis::{linear_cka, r_squared, FeatureMatrix};
use crate::geometry::{chamfer_distance, MapClass, MapElement, Point, DEFAULT_SAMPLE_STEP};
use crate::mapeval::{
    average_precision, clip_to_roi, evaluate, match_instances, match_with_distances, EvalConfig, EvalResult, Roi,
    SceneMaps,
};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
    FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid")
}

fn matmul(a: &FeatureMatrix, b: &[f64], cols: usize) -> FeatureMatrix {
    let mut out = vec![0.0; a.rows * cols];
    for r in 0..a.rows {
        for j in 0..cols {
            out[r * cols + j] = (0..a.cols).map(|k| a.at(r, k) * b[k * cols + j]).sum();
        }
    }
    FeatureMatrix::new(a.rows, cols, out).expect("valid")
}

/// Random orthogonal `n x n` matrix by Gram-Schmidt on a random draw.
fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-3 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    (0..n * n).map(|i| cols[i % n][i / n]).collect()
}

/// Eq.-verbatim CKA with explicit loops over `X^T Y`, `X^T X`, `Y^T Y`.
fn cka_longhand(x: &FeatureMatrix, y: &FeatureMatrix) -> f64 {
    let gram = |a: &FeatureMatrix, b: &FeatureMatrix| {
        let mut f = 0.0;
        for i in 0..a.cols {
            for j in 0..b.cols {
                let mut s = 0.0;
                for r in 0..a.rows {
                    s += a.at(r, i) * b.at(r, j);
                }
                f += s * s;
            }
        }
        f
    };
    gram(x, y) / (gram(x, x).sqrt() * gram(y, y).sqrt())
}

fn cka_oracle_check() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut int = || FeatureMatrix::new(3, 2, (0..6).map(|_| rng.gen_range(-5..=5) as f64).collect()).expect("valid");
        let (x, y) = (int(), int());
        match linear_cka(&x, &y, false) {
            Ok(v) => worst = worst.max((v - cka_longhand(&x, &y)).abs()),
            Err(_) if x.data.iter().all(|&v| v == 0.0) || y.data.iter().all(|&v| v == 0.0) => {}
            Err(_) => worst = f64::INFINITY,
        }
    }
    Check::new("oracle/linear_cka", 20, worst, 1e-12)
}

fn r2_checks() -> [Check; 3] {
    let (mut exact, mut noise, mut reparam) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let y = random_matrix(&mut rng, 120, 6);
        let w: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = matmul(&y, &w, 4);
        exact = exact.max(r_squared(&x, &y).map_or(f64::INFINITY, |r| (r - 1.0).abs()));
        exact = exact.max(r_squared(&y, &y).map_or(f64::INFINITY, |r| (r - 1.0).abs()));
        let xn = random_matrix(&mut rng, 120, 4);
        let a: Vec<f64> = (0..36).map(|i| if i % 7 == 0 { 2.0 } else { 0.0 } + rng.gen_range(-0.5..0.5)).collect();
        let ya = matmul(&y, &a, 6);
        let d = match (r_squared(&xn, &y), r_squared(&xn, &ya)) {
            (Ok(p), Ok(q)) => (p - q).abs(),
            _ => f64::INFINITY,
        };
        reparam = reparam.max(d);
    }
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = random_matrix(&mut rng, 2000, 8);
        let y = random_matrix(&mut rng, 2000, 8);
        noise = noise.max(r_squared(&x, &y).unwrap_or(f64::INFINITY));
    }
    [
        Check::new("oracle/r_squared_exact_relation", 20, exact, 1e-9),
        Check::new("oracle/r_squared_independent_noise", 5, noise, 0.1),
        Check::new("property/r_squared_reparameterization", 20, reparam, 1e-6),
    ]
}

/// Interpolated AP computed the other way round: precision envelope swept
/// from the lowest-ranked prediction upward, then summed over recall steps.
fn ap_sweep(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut s = scored.to_vec();
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    let mut tp = 0.0;
    for (i, &(_, hit)) in s.iter().enumerate() {
        if hit {
            tp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (i + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

fn ap_checks() -> [Check; 2] {
    let table = [(0.9, true), (0.8, false), (0.7, true), (0.6, false), (0.5, true)];
    let hand = 0.25 * 1.0 + 0.25 * (2.0 / 3.0) + 0.25 * 0.6;
    let hand_err = (average_precision(&table, 4) - hand).abs();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let n = rng.gen_range(1..30);
        let scored: Vec<(f64, bool)> = (0..n).map(|_| (rng.gen_range(0.0..1.0), rng.gen_bool(0.5))).collect();
        let n_gt = scored.iter().filter(|s| s.1).count() + rng.gen_range(0..4);
        if n_gt == 0 {
            continue;
        }
        worst = worst.max((average_precision(&scored, n_gt) - ap_sweep(&scored, n_gt)).abs());
    }
    [
        Check::new("oracle/average_precision_hand_table", 1, hand_err, 1e-15),
        Check::new("oracle/average_precision_sweep", 100, worst, 1e-12),
    ]
}

fn segment(c: MapClass, a: (f64, f64), b: (f64, f64), score: f64) -> MapElement {
    MapElement::new(c, vec![Point::new(a.0, a.1), Point::new(b.0, b.1)], score).expect("valid element")
}

/// Best total TP count over every one-to-one assignment within threshold.
fn exhaustive_tp(dist: &[Vec<f64>], thr: f64) -> usize {
    fn go(dist: &[Vec<f64>], i: usize, used: &mut Vec<bool>, thr: f64) -> usize {
        if i == dist.len() {
            return 0;
        }
        let mut best = go(dist, i + 1, used, thr);
        for g in 0..used.len() {
            if !used[g] && dist[i][g] <= thr {
                used[g] = true;
                best = best.max(1 + go(dist, i + 1, used, thr));
                used[g] = false;
            }
        }
        best
    }
    go(dist, 0, &mut vec![false; dist.first().map_or(0, Vec::len)], thr)
}

fn matching_checks() -> [Check; 2] {
    // Three predictions near two lines: the best-scored sits on line A, a
    // lower-scored duplicate of A and one on line B.
    let c = MapClass::Divider;
    let gts = [segment(c, (0.0, 0.0), (10.0, 0.0), 1.0), segment(c, (0.0, 5.0), (10.0, 5.0), 1.0)];
    let preds = [
        segment(c, (0.0, 0.2), (10.0, 0.2), 0.9),
        segment(c, (0.0, -0.3), (10.0, -0.3), 0.8),
        segment(c, (0.0, 5.4), (10.0, 5.4), 0.7),
    ];
    let pr: Vec<&MapElement> = preds.iter().collect();
    let gr: Vec<&MapElement> = gts.iter().collect();
    let flags = match_instances(&pr, &gr, 1.0).unwrap_or_default();
    let constructed = flags == [true, false, true];
    let dist: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| chamfer_distance(p, g, DEFAULT_SAMPLE_STEP).unwrap_or(f64::INFINITY)).collect())
        .collect();
    let optimal = exhaustive_tp(&dist, 1.0) == flags.iter().filter(|&&f| f).count();
    // Random small cases: greedy never beats the optimum and each TP is
    // a legal one-to-one match.
    let mut bounded = true;
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let (np, ng) = (rng.gen_range(0..5), rng.gen_range(0..4));
        let dist: Vec<Vec<f64>> = (0..np).map(|_| (0..ng).map(|_| rng.gen_range(0.0..3.0)).collect()).collect();
        let scores: Vec<f64> = (0..np).map(|_| rng.gen_range(0.0..1.0)).collect();
        let flags = match_with_distances(&scores, &dist, 1.5);
        bounded &= flags.iter().filter(|&&f| f).count() <= exhaustive_tp(&dist, 1.5);
    }
    [
        Check::flag("oracle/match_instances_constructed", 1, constructed && optimal),
        Check::flag("oracle/match_instances_bounded_by_optimum", 200, bounded),
    ]
}

/// AP table computed with thresholds outside and classes inside, from
/// distances evaluated independently of the library's evaluation loop.
fn evaluate_reordered(scenes: &[SceneMaps], cfg: &EvalConfig) -> EvalResult {
    let grid = cfg.roi.grid();
    let clipped: Vec<(Vec<MapElement>, Vec<MapElement>)> =
        scenes.iter().map(|s| (clip_to_roi(&s.preds, &grid), clip_to_roi(&s.gts, &grid))).collect();
    let mut ap: [Vec<f64>; 3] = Default::default();
    for &thr in &cfg.thresholds {
        for c in MapClass::ALL.into_iter().rev() {
            let mut scored = Vec::new();
            let mut n_gt = 0;
            for (preds, gts) in &clipped {
                let p: Vec<&MapElement> = preds.iter().filter(|e| e.class == c).collect();
                let g: Vec<&MapElement> = gts.iter().filter(|e| e.class == c).collect();
                n_gt += g.len();
                let flags = if g.is_empty() {
                    vec![false; p.len()]
                } else {
                    match_instances(&p, &g, thr).expect("single class")
                };
                scored.extend(p.iter().map(|e| e.score).zip(flags));
            }
            ap[c.id()].push(average_precision(&scored, n_gt));
        }
    }
    let class_ap: [f64; 3] = std::array::from_fn(|c| ap[c].iter().sum::<f64>() / cfg.thresholds.len() as f64);
    EvalResult {
        roi: cfg.roi,
        thresholds: cfg.thresholds.clone(),
        ap,
        class_ap,
        map: class_ap.iter().sum::<f64>() / 3.0,
    }
}

/// Random corpus: per scene, parallel ground-truth lines per class spaced
/// 6 m apart (more than twice the largest threshold), predictions as
/// jittered copies, some ground truth missed and some spurious lines.
pub fn random_corpus(seed: u64, roi: Roi) -> Vec<SceneMaps> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = roi.grid();
    let (hx, hy) = (g.x_extent / 2.0, g.y_extent / 2.0);
    (0..rng.gen_range(1..5))
        .map(|scene| {
            let mut gts = Vec::new();
            let mut preds = Vec::new();
            for c in MapClass::ALL {
                let n = rng.gen_range(0..4);
                let vertical = c == MapClass::Crossing;
                let base = rng.gen_range(-hy + 1.0..hy - 19.0);
                for k in 0..n {
                    let off = base + 6.0 * k as f64;
                    let len = rng.gen_range(4.0..hx);
                    let start = rng.gen_range(-hx..hx - len);
                    let (a, b) = if vertical {
                        ((off.clamp(-hx, hx), start.clamp(-hy, hy)), (off.clamp(-hx, hx), (start + len).clamp(-hy, hy)))
                    } else {
                        ((start, off), (start + len, off))
                    };
                    if (a.0 - b.0).abs() + (a.1 - b.1).abs() < 1.0 {
                        continue;
                    }
                    gts.push(segment(c, a, b, 1.0));
                    if rng.gen_bool(0.8) {
                        let j = rng.gen_range(-1.2..1.2);
                        let (da, db) = if vertical { ((j, 0.0), (j, 0.0)) } else { ((0.0, j), (0.0, j)) };
                        preds.push(segment(c, (a.0 + da.0, a.1 + da.1), (b.0 + db.0, b.1 + db.1), rng.gen_range(0.05..1.0)));
                    }
                }
                if rng.gen_bool(0.3) {
                    let y = rng.gen_range(-hy..hy);
                    preds.push(segment(c, (-hx * 0.5, y), (hx * 0.5, y + 1.0), rng.gen_range(0.05..1.0)));
                }
            }
            SceneMaps { scene, preds, gts }
        })
        .collect()
}

fn all_ap(r: &EvalResult) -> Vec<f64> {
    r.ap.iter().flatten().copied().collect()
}

/// Threshold monotonicity, score-scale invariance, duplicate penalty and
/// perfect-prediction mAP over `corpora` random corpora per RoI, plus the
/// reordered-loop oracle of `evaluate`.
pub fn mapeval_property_suite(corpora: usize) -> Vec<Check> {
    let (mut mono, mut scale, mut dup, mut perfect, mut reorder) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut cases = 0;
    for seed in 0..corpora as u64 {
        let roi = Roi::ALL[seed as usize % 2];
        let cfg = EvalConfig::new(roi);
        let corpus = random_corpus(800 + seed, roi);
        let Ok(base) = evaluate(&corpus, &cfg) else {
            return vec![Check::flag("property/mapeval_runs", corpora, false)];
        };
        cases += 1;
        for c in 0..3 {
            for w in base.ap[c].windows(2) {
                mono = mono.max(w[0] - w[1]);
            }
        }
        let scaled: Vec<SceneMaps> = corpus
            .iter()
            .map(|s| SceneMaps {
                preds: s.preds.iter().map(|p| MapElement { score: p.score * 0.37, ..p.clone() }).collect(),
                ..s.clone()
            })
            .collect();
        let r = evaluate(&scaled, &cfg).expect("valid corpus");
        scale = scale.max(all_ap(&r).iter().zip(all_ap(&base)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let doubled: Vec<SceneMaps> = corpus
            .iter()
            .map(|s| SceneMaps {
                preds: s.preds.iter().flat_map(|p| [p.clone(), p.clone()]).collect(),
                ..s.clone()
            })
            .collect();
        let r = evaluate(&doubled, &cfg).expect("valid corpus");
        dup = dup.max(all_ap(&r).iter().zip(all_ap(&base)).map(|(d, b)| d - b).fold(0.0, f64::max));
        let exact: Vec<SceneMaps> = corpus
            .iter()
            .map(|s| SceneMaps {
                preds: s.gts.iter().map(|g| MapElement { score: 0.5, ..g.clone() }).collect(),
                ..s.clone()
            })
            .collect();
        perfect = perfect.max((evaluate(&exact, &cfg).expect("valid corpus").map - 1.0).abs());
        let other = evaluate_reordered(&corpus, &cfg);
        reorder = reorder.max(all_ap(&other).iter().zip(all_ap(&base)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        reorder = reorder.max((other.map - base.map).abs());
    }
    vec![
        Check::new("property/ap_threshold_monotone", cases, mono, 0.0),
        Check::new("property/ap_score_scale_invariant", cases, scale, 0.0),
        Check::new("property/ap_duplicate_penalty", cases, dup, 0.0),
        Check::new("property/perfect_prediction_map", cases, perfect, 0.0),
        Check::new("oracle/evaluate_reordered_loops", cases, reorder, 1e-12),
    ]
}

/// CKA self-similarity, symmetry and invariance to `X -> alpha X Q` over
/// `draws` random draws for each of several base matrices.
pub fn cka_invariance_suite(draws: usize) -> Vec<Check> {
    let (mut selfsim, mut sym, mut inv) = (0.0f64, 0.0f64, 0.0f64);
    let mut n = 0;
    for base in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + base);
        let cols = 3 + base as usize * 2;
        let x = random_matrix(&mut rng, 40 + 20 * base as usize, cols);
        let y = random_matrix(&mut rng, x.rows, 4);
        for center in [false, true] {
            selfsim = selfsim.max(linear_cka(&x, &x, center).map_or(f64::INFINITY, |v| (v - 1.0).abs()));
            let d = match (linear_cka(&x, &y, center), linear_cka(&y, &x, center)) {
                (Ok(a), Ok(b)) => (a - b).abs(),
                _ => f64::INFINITY,
            };
            sym = sym.max(d);
        }
        for _ in 0..draws {
            let alpha = rng.gen_range(0.01..100.0);
            let q = random_orthogonal(&mut rng, cols);
            let xq = matmul(&x, &q.iter().map(|v| v * alpha).collect::<Vec<_>>(), cols);
            inv = inv.max(linear_cka(&x, &xq, false).map_or(f64::INFINITY, |v| (v - 1.0).abs()));
            n += 1;
        }
    }
    vec![
        Check::new("property/cka_self_similarity", 6, selfsim, 1e-12),
        Check::new("property/cka_symmetry", 6, sym, 1e-12),
        Check::new("property/cka_scale_orthogonal_invariance", n, inv, 1e-9),
    ]
}

/// Similarity and evaluation oracles.
pub fn metric_oracle_suite() -> Vec<Check> {
    let mut checks = vec![cka_oracle_check()];
    checks.extend(r2_checks());
    checks.extend(ap_checks());
    checks.extend(matching_checks());
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_oracles_pass() {
        for c in metric_oracle_suite() {
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn cka_invariances_pass() {
        for c in cka_invariance_suite(50) {
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn mapeval_properties_pass() {
        for c in mapeval_property_suite(100) {
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn orthogonal_draw_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_orthogonal(&mut rng, 5);
        for i in 0..5 {
            for j in 0..5 {
                let d: f64 = (0..5).map(|k| q[k * 5 + i] * q[k * 5 + j]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
