use crate::encoders::{softmax, to_normalized, BACKGROUND, NUM_CLASSES};
use crate::geometry::{polyline_length, resample_count, BevGrid, MapClass, MapElement};
use crate::mapeval::clip_to_roi;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Cost added when a query's most probable class differs from the target
/// class, in meters of mean coordinate error.
pub const CLASS_PENALTY: f64 = 5.0;

/// A ground-truth element prepared for the decoder: `K` arc-length samples
/// in half-extent units, shape `[K, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineTarget<T> {
    pub class: MapClass,
    pub points: Tensor<T>,
}

/// Clips ground truth to the grid and resamples it to `k` points. When more
/// than `max_targets` fragments survive, the longest are kept.
pub fn line_targets<T: Real>(gts: &[MapElement], grid: &BevGrid, k: usize, max_targets: usize) -> Vec<LineTarget<T>> {
    let mut clipped = clip_to_roi(gts, grid);
    clipped.sort_by(|a, b| polyline_length(&b.points).total_cmp(&polyline_length(&a.points)));
    clipped.truncate(max_targets);
    clipped
        .into_iter()
        .map(|el| {
            let pts = resample_count(&el.points, k);
            LineTarget {
                class: el.class,
                points: Tensor::from_fn([k, 2], |i| T::of(to_normalized(grid, pts[i / 2])[i % 2])),
            }
        })
        .collect()
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Columns are scanned in ascending order with strict
/// comparisons, so among equal-cost choices lower column indices win.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    // Potentials and matching over 1-based indices; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Mean absolute coordinate error in meters, best of both point orders.
fn line_cost<T: Real>(pred: &[T], target: &Tensor<T>, grid: &BevGrid) -> f64 {
    let t = target.data();
    let k = t.len() / 2;
    let sx = grid.x_extent / 2.0;
    let sy = grid.y_extent / 2.0;
    let err = |i: usize, tv: T| (pred[i].as_f64() - tv.as_f64()).abs() * if i % 2 == 0 { sx } else { sy };
    let fwd: f64 = (0..2 * k).map(|i| err(i, t[i])).sum();
    let rev: f64 = (0..2 * k).map(|i| err(i, t[(k - 1 - i / 2) * 2 + i % 2])).sum();
    fwd.min(rev) / (2 * k) as f64
}

/// One-to-one assignment of targets to queries. Returns, per query, the
/// matched target index or `None` (background).
pub fn match_queries<T: Real>(
    logits: &Tensor<T>,
    points: &Tensor<T>,
    targets: &[LineTarget<T>],
    grid: &BevGrid,
    class_penalty: f64,
) -> Vec<Option<usize>> {
    let q = logits.shape()[0];
    let k2 = points.shape()[1];
    let mut out = vec![None; q];
    if targets.is_empty() {
        return out;
    }
    let argmax: Vec<usize> = (0..q)
        .map(|i| {
            let p = softmax(&logits.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]);
            (0..NUM_CLASSES).fold(BACKGROUND, |b, c| if p[c] > p[b] { c } else { b })
        })
        .collect();
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| {
            (0..q)
                .map(|i| {
                    let penalty = if argmax[i] == t.class.id() { 0.0 } else { class_penalty };
                    line_cost(&points.data()[i * k2..(i + 1) * k2], &t.points, grid) + penalty
                })
                .collect()
        })
        .collect();
    for (t, qi) in hungarian(&cost).into_iter().enumerate() {
        out[qi] = Some(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + go(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(n..=6);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
            let a = hungarian(&cost);
            let mut cols = a.clone();
            cols.sort();
            cols.dedup();
            assert_eq!(cols.len(), n);
            let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            assert!((total - brute_force(&cost)).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_costs_prefer_lower_query() {
        assert_eq!(hungarian(&[vec![1.0, 1.0, 1.0]]), vec![0]);
    }

    fn logits_for(classes: &[usize]) -> Tensor<f64> {
        Tensor::from_fn([classes.len(), 4], |i| if i % 4 == classes[i / 4] { 4.0 } else { 0.0 })
    }

    #[test]
    fn exact_predictions_get_identity_assignment() {
        let g = BevGrid::standard();
        let gts = vec![
            MapElement::ground_truth(MapClass::Divider, vec![Point::new(-20.0, 1.0), Point::new(20.0, 1.0)]).unwrap(),
            MapElement::ground_truth(MapClass::Boundary, vec![Point::new(-20.0, 6.0), Point::new(20.0, 7.0)]).unwrap(),
        ];
        let targets = line_targets::<f64>(&gts, &g, 8, 12);
        let mut pts = Tensor::zeros([4, 16]);
        for (q, t) in targets.iter().enumerate() {
            pts.data_mut()[q * 16..(q + 1) * 16].copy_from_slice(t.points.data());
        }
        let classes: Vec<usize> = targets.iter().map(|t| t.class.id()).chain([BACKGROUND, BACKGROUND]).collect();
        let m = match_queries(&logits_for(&classes), &pts, &targets, &g, CLASS_PENALTY);
        assert_eq!(m, vec![Some(0), Some(1), None, None]);
        for (q, t) in targets.iter().enumerate() {
            assert_eq!(line_cost(&pts.data()[q * 16..(q + 1) * 16], &t.points, &g), 0.0);
        }
    }

    #[test]
    fn single_target_matches_brute_force_over_three_queries() {
        let g = BevGrid::standard();
        let gts = vec![MapElement::ground_truth(MapClass::Crossing, vec![Point::new(5.0, -6.0), Point::new(5.0, 6.0)]).unwrap()];
        let targets = line_targets::<f64>(&gts, &g, 8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let pts = Tensor::from_fn([3, 16], |_| rng.gen_range(-1.0..1.0));
            let classes: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            let logits = logits_for(&classes);
            let m = match_queries(&logits, &pts, &targets, &g, CLASS_PENALTY);
            let cost = |q: usize| {
                line_cost(&pts.data()[q * 16..(q + 1) * 16], &targets[0].points, &g)
                    + if classes[q] == 0 { 0.0 } else { CLASS_PENALTY }
            };
            let best = (0..3).fold(0, |b, q| if cost(q) < cost(b) { q } else { b });
            assert_eq!(m.iter().position(|x| x.is_some()), Some(best));
        }
    }

    #[test]
    fn empty_targets_leave_all_background() {
        let g = BevGrid::standard();
        let m = match_queries::<f64>(&logits_for(&[0, 1, 2]), &Tensor::zeros([3, 16]), &[], &g, CLASS_PENALTY);
        assert_eq!(m, vec![None; 3]);
    }

    #[test]
    fn targets_are_clipped_and_truncated() {
        let g = BevGrid::standard();
        let gts: Vec<MapElement> = (0..5)
            .map(|i| {
                MapElement::ground_truth(MapClass::Divider, vec![Point::new(-40.0, i as f64), Point::new(10.0 + i as f64, i as f64)])
                    .unwrap()
            })
            .collect();
        let t = line_targets::<f64>(&gts, &g, 8, 3);
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|t| t.points.data().iter().all(|v| v.abs() <= 1.0 + 1e-12)));
        // Longest survivors are the ones reaching furthest forward.
        assert!((t[0].points.data()[14] - 14.0 / 30.0).abs() < 1e-12);
    }
}
