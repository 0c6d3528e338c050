use super::{MapElement, Point};
use crate::error::{Error, Result};

/// Arc-length spacing used when sampling polylines for Chamfer matching.
pub const DEFAULT_SAMPLE_STEP: f64 = 0.1;

pub fn polyline_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Distance from `p` to segment `ab`. Endpoints are put in a canonical order
/// first so the result does not depend on segment direction.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (a, b) = if (a.x, a.y) <= (b.x, b.y) { (a, b) } else { (b, a) };
    let d = b - a;
    let len2 = d.x * d.x + d.y * d.y;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * d.x + (p.y - a.y) * d.y) / len2).clamp(0.0, 1.0);
    p.dist(Point::new(a.x + t * d.x, a.y + t * d.y))
}

pub fn point_to_polyline(p: Point, points: &[Point]) -> f64 {
    points
        .windows(2)
        .map(|w| point_segment_distance(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

fn point_at(points: &[Point], cumulative: &[f64], s: f64) -> Point {
    let i = match cumulative.binary_search_by(|c| c.total_cmp(&s)) {
        Ok(i) => return points[i],
        Err(i) => i.clamp(1, points.len() - 1),
    };
    let seg = cumulative[i] - cumulative[i - 1];
    let t = if seg > 0.0 { (s - cumulative[i - 1]) / seg } else { 0.0 };
    points[i - 1] + (points[i] - points[i - 1]) * t
}

fn cumulative(points: &[Point]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(points.len());
    let mut s = 0.0;
    acc.push(0.0);
    for w in points.windows(2) {
        s += w[0].dist(w[1]);
        acc.push(s);
    }
    acc
}

/// Samples at arc lengths `0, step, 2*step, ...` plus the final endpoint.
pub fn resample_step(points: &[Point], step: f64) -> Vec<Point> {
    let cum = cumulative(points);
    let total = *cum.last().expect("non-empty");
    let n = (total / step).floor() as usize;
    let mut out: Vec<Point> = (0..=n).map(|i| point_at(points, &cum, i as f64 * step)).collect();
    if total - n as f64 * step > 1e-12 {
        out.push(*points.last().expect("non-empty"));
    }
    out
}

/// `k >= 2` points evenly spaced by arc length, endpoints included.
pub fn resample_count(points: &[Point], k: usize) -> Vec<Point> {
    let cum = cumulative(points);
    let total = *cum.last().expect("non-empty");
    (0..k)
        .map(|i| {
            if i + 1 == k {
                *points.last().expect("non-empty")
            } else {
                point_at(points, &cum, total * i as f64 / (k - 1) as f64)
            }
        })
        .collect()
}

fn one_way(samples: &[Point], other: &[Point]) -> f64 {
    samples.iter().map(|&p| point_to_polyline(p, other)).sum::<f64>() / samples.len() as f64
}

/// Symmetric Chamfer distance: both polylines are resampled every
/// `sample_step` meters and the two directed mean nearest-segment distances
/// are averaged.
pub fn chamfer_distance(a: &MapElement, b: &MapElement, sample_step: f64) -> Result<f64> {
    if !(sample_step > 0.0) {
        return Err(Error::Geometry(format!("sample step must be positive, got {sample_step}")));
    }
    a.validate()?;
    b.validate()?;
    let sa = resample_step(&a.points, sample_step);
    let sb = resample_step(&b.points, sample_step);
    let ab = one_way(&sa, &b.points);
    let ba = one_way(&sb, &a.points);
    let d = 0.5 * (ab + ba);
    // Interpolated samples sit ~1e-16 m off their own segment.
    Ok(if d < 1e-12 { 0.0 } else { d })
}

/// Clips a polyline to an axis-aligned rectangle, splitting it wherever it
/// leaves and re-enters. Returned fragments have at least two points.
pub fn clip_polyline(points: &[Point], x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Vec<Vec<Point>> {
    let mut out = Vec::new();
    let mut cur: Vec<Point> = Vec::new();
    for w in points.windows(2) {
        match clip_segment(w[0], w[1], x_min, x_max, y_min, y_max) {
            Some((p, q, enters_inside, exits_inside)) => {
                if !enters_inside || cur.is_empty() {
                    if cur.len() >= 2 {
                        out.push(std::mem::take(&mut cur));
                    }
                    cur = vec![p];
                }
                if q.dist(*cur.last().expect("non-empty")) > 1e-9 {
                    cur.push(q);
                }
                if !exits_inside {
                    if cur.len() >= 2 {
                        out.push(std::mem::take(&mut cur));
                    }
                    cur.clear();
                }
            }
            None => {
                if cur.len() >= 2 {
                    out.push(std::mem::take(&mut cur));
                }
                cur.clear();
            }
        }
    }
    if cur.len() >= 2 {
        out.push(cur);
    }
    out
}

/// Liang-Barsky. Returns the clipped endpoints and whether each original
/// endpoint was kept unchanged.
fn clip_segment(a: Point, b: Point, x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Option<(Point, Point, bool, bool)> {
    let d = b - a;
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [
        (-d.x, a.x - x_min),
        (d.x, x_max - a.x),
        (-d.y, a.y - y_min),
        (d.y, y_max - a.y),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    let pa = if t0 > 0.0 { a + d * t0 } else { a };
    let pb = if t1 < 1.0 { a + d * t1 } else { b };
    if pa.dist(pb) <= 1e-12 {
        return None;
    }
    Some((pa, pb, t0 == 0.0, t1 == 1.0))
}
