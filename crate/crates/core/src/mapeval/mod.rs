//! Per-class average precision under Chamfer-distance thresholds.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::geometry::{chamfer_distance, clip_polyline, polyline_length, BevGrid, MapClass, MapElement, DEFAULT_SAMPLE_STEP};

/// Clipped fragments shorter than this are discarded.
pub const MIN_FRAGMENT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Roi {
    Standard,
    Extended,
}

impl Roi {
    pub const ALL: [Roi; 2] = [Roi::Standard, Roi::Extended];

    pub fn grid(self) -> BevGrid {
        match self {
            Roi::Standard => BevGrid::standard(),
            Roi::Extended => BevGrid::extended(),
        }
    }

    pub fn thresholds(self) -> Vec<f64> {
        match self {
            Roi::Standard => vec![0.5, 1.0, 1.5],
            Roi::Extended => vec![1.0, 1.5, 2.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Roi::Standard => "standard",
            Roi::Extended => "extended",
        }
    }
}

impl fmt::Display for Roi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Roi {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Roi::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown roi {s}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub roi: Roi,
    pub thresholds: Vec<f64>,
    pub sample_step: f64,
}

impl EvalConfig {
    pub fn new(roi: Roi) -> Self {
        Self {
            roi,
            thresholds: roi.thresholds(),
            sample_step: DEFAULT_SAMPLE_STEP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds[0] <= 0.0
            || self.thresholds.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Config(format!(
                "thresholds must be positive and strictly increasing: {:?}",
                self.thresholds
            )));
        }
        if !(self.sample_step > 0.0) {
            return Err(Error::Config("sample step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub roi: Roi,
    pub thresholds: Vec<f64>,
    /// `ap[class][threshold]`.
    pub ap: [Vec<f64>; 3],
    /// Threshold-averaged AP per class.
    pub class_ap: [f64; 3],
    pub map: f64,
}

impl EvalResult {
    /// `class threshold ap` lines, then `class ap_mean`, then `mAP value`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in MapClass::ALL {
            for (t, ap) in self.thresholds.iter().zip(&self.ap[c.id()]) {
                writeln!(s, "{} {t} {ap:.17e}", c.name()).expect("string write");
            }
        }
        for c in MapClass::ALL {
            writeln!(s, "{} {:.17e}", c.name(), self.class_ap[c.id()]).expect("string write");
        }
        writeln!(s, "mAP {:.17e}", self.map).expect("string write");
        s
    }

    pub fn parse(text: &str, roi: Roi, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number {v}")));
        let mut thresholds = Vec::new();
        let mut ap: [Vec<f64>; 3] = Default::default();
        let mut class_ap = [f64::NAN; 3];
        let mut map = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["mAP", v] => map = Some(num(v)?),
                [c, t, v] => {
                    let c: MapClass = c.parse().map_err(|_| bad(format!("unknown class {c}")))?;
                    let t = num(t)?;
                    if c == MapClass::ALL[0] {
                        thresholds.push(t);
                    }
                    ap[c.id()].push(num(v)?);
                }
                [c, v] => {
                    let c: MapClass = c.parse().map_err(|_| bad(format!("unknown class {c}")))?;
                    class_ap[c.id()] = num(v)?;
                }
                _ => return Err(bad(format!("unrecognized line {line:?}"))),
            }
        }
        let map = map.ok_or_else(|| bad("missing mAP line".into()))?;
        if ap.iter().any(|a| a.len() != thresholds.len()) || class_ap.iter().any(|v| v.is_nan()) {
            return Err(bad("incomplete result table".into()));
        }
        Ok(Self {
            roi,
            thresholds,
            ap,
            class_ap,
            map,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("eval_{}.txt", self.roi));
        std::fs::write(&path, self.to_text()).at(&path)
    }

    pub fn read(dir: &Path, roi: Roi) -> Result<Self> {
        let path = dir.join(format!("eval_{roi}.txt"));
        let text = std::fs::read_to_string(&path).at(&path)?;
        Self::parse(&text, roi, &path)
    }
}

/// Clips every element to the grid rectangle, splitting at boundary
/// crossings and dropping fragments shorter than [`MIN_FRAGMENT`].
pub fn clip_to_roi(elements: &[MapElement], grid: &BevGrid) -> Vec<MapElement> {
    let mut out = Vec::new();
    for el in elements {
        for frag in clip_polyline(&el.points, grid.x_min(), grid.x_max(), grid.y_min(), grid.y_max()) {
            if polyline_length(&frag) >= MIN_FRAGMENT {
                if let Ok(e) = MapElement::new(el.class, frag, el.score) {
                    out.push(e);
                }
            }
        }
    }
    out
}

/// Greedy one-to-one matching given precomputed `dist[pred][gt]`:
/// predictions in descending score order (ties by index) take the nearest
/// unmatched ground truth within `threshold`.
pub fn match_with_distances(scores: &[f64], dist: &[Vec<f64>], threshold: f64) -> Vec<bool> {
    let n_gt = dist.first().map_or(0, Vec::len);
    let mut taken = vec![false; n_gt];
    let mut tp = vec![false; scores.len()];
    for i in score_order(scores) {
        let best = (0..n_gt)
            .filter(|&g| !taken[g] && dist[i][g] <= threshold)
            .min_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]));
        if let Some(g) = best {
            taken[g] = true;
            tp[i] = true;
        }
    }
    tp
}

fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn distance_table(preds: &[&MapElement], gts: &[&MapElement], step: f64) -> Result<Vec<Vec<f64>>> {
    preds
        .iter()
        .map(|p| gts.iter().map(|g| chamfer_distance(p, g, step)).collect())
        .collect()
}

/// TP flags for `preds` against `gts` of one class in one scene.
pub fn match_instances(preds: &[&MapElement], gts: &[&MapElement], threshold: f64) -> Result<Vec<bool>> {
    if preds.iter().chain(gts).any(|e| e.class != preds.first().or(gts.first()).expect("non-empty").class) {
        return Err(Error::Geometry("match_instances needs a single class".into()));
    }
    let dist = distance_table(preds, gts, DEFAULT_SAMPLE_STEP)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    Ok(match_with_distances(&scores, &dist, threshold))
}

/// All-point AP from pooled `(score, is_tp)` pairs: the area under the
/// precision envelope over the recall steps. Empty predictions with no
/// ground truth score 1.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if scored.is_empty() { 1.0 } else { 0.0 };
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(scored.len());
    for (rank, i) in score_order(&scores).into_iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..curve.len() {
        let (r, _) = curve[k];
        if r > prev_recall {
            let envelope = curve[k..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    ap
}

/// Predictions and ground truth for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMaps {
    pub scene: usize,
    pub preds: Vec<MapElement>,
    pub gts: Vec<MapElement>,
}

/// Clips both sides to the RoI, pools TP flags over scenes per
/// (class, threshold), averages thresholds per class and classes to mAP.
pub fn evaluate(scenes: &[SceneMaps], cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.validate()?;
    let grid = cfg.roi.grid();
    let nt = cfg.thresholds.len();
    let mut pooled: Vec<Vec<Vec<(f64, bool)>>> = vec![vec![Vec::new(); nt]; 3];
    let mut n_gt = [0usize; 3];
    for s in scenes {
        let preds = clip_to_roi(&s.preds, &grid);
        let gts = clip_to_roi(&s.gts, &grid);
        for c in MapClass::ALL {
            let p: Vec<&MapElement> = preds.iter().filter(|e| e.class == c).collect();
            let g: Vec<&MapElement> = gts.iter().filter(|e| e.class == c).collect();
            n_gt[c.id()] += g.len();
            let dist = distance_table(&p, &g, cfg.sample_step)?;
            let scores: Vec<f64> = p.iter().map(|e| e.score).collect();
            for (t, &thr) in cfg.thresholds.iter().enumerate() {
                let flags = match_with_distances(&scores, &dist, thr);
                pooled[c.id()][t].extend(scores.iter().copied().zip(flags));
            }
        }
    }
    let ap: [Vec<f64>; 3] =
        std::array::from_fn(|c| pooled[c].iter().map(|s| average_precision(s, n_gt[c])).collect());
    let class_ap: [f64; 3] = std::array::from_fn(|c| ap[c].iter().sum::<f64>() / nt as f64);
    let map = class_ap.iter().sum::<f64>() / 3.0;
    Ok(EvalResult {
        roi: cfg.roi,
        thresholds: cfg.thresholds.clone(),
        ap,
        class_ap,
        map,
    })
}

/// Aligns predictions with ground truth by scene id.
pub fn align_scenes(
    preds: Vec<(usize, Vec<MapElement>)>,
    gts: Vec<(usize, Vec<MapElement>)>,
) -> Result<Vec<SceneMaps>> {
    if preds.len() != gts.len() {
        return Err(Error::SceneMismatch(format!("{} prediction sets vs {} ground-truth sets", preds.len(), gts.len())));
    }
    preds
        .into_iter()
        .zip(gts)
        .map(|((a, p), (b, g))| {
            if a != b {
                return Err(Error::SceneMismatch(format!("prediction scene {a} vs ground-truth scene {b}")));
            }
            Ok(SceneMaps {
                scene: a,
                preds: p,
                gts: g,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    fn line(c: MapClass, pts: &[(f64, f64)], score: f64) -> MapElement {
        MapElement::new(c, pts.iter().map(|&(x, y)| Point::new(x, y)).collect(), score).unwrap()
    }

    #[test]
    fn clip_keeps_inside_drops_outside() {
        let g = BevGrid::standard();
        let inside = line(MapClass::Divider, &[(-5.0, 1.0), (5.0, 1.0)], 1.0);
        assert_eq!(clip_to_roi(&[inside.clone()], &g), vec![inside]);
        let outside = line(MapClass::Divider, &[(40.0, 1.0), (45.0, 1.0)], 1.0);
        assert!(clip_to_roi(&[outside], &g).is_empty());
    }

    #[test]
    fn clipped_endpoint_lies_on_edge() {
        let g = BevGrid::standard();
        let el = line(MapClass::Boundary, &[(0.0, 0.0), (40.0, 20.0)], 1.0);
        let out = clip_to_roi(&[el], &g);
        assert_eq!(out.len(), 1);
        let end = *out[0].points.last().unwrap();
        // The segment y = x/2 leaves through the top edge y = 15 at x = 30.
        assert!((end.x - 30.0).abs() < 1e-9 && (end.y - 15.0).abs() < 1e-9);
    }

    #[test]
    fn short_fragment_dropped() {
        let g = BevGrid::standard();
        let el = line(MapClass::Boundary, &[(29.7, 0.0), (35.0, 0.0)], 1.0);
        assert!(clip_to_roi(&[el], &g).is_empty());
    }

    #[test]
    fn hand_computed_pr_table() {
        // Ranks: TP FP TP FP TP against 4 ground truths.
        // Precision 1, 1/2, 2/3, 2/4, 3/5 at recalls 1/4, 1/4, 2/4, 2/4, 3/4.
        // Envelope: 1 on (0, 1/4], 2/3 on (1/4, 2/4], 3/5 on (2/4, 3/4].
        let scored = [(0.9, true), (0.8, false), (0.7, true), (0.6, false), (0.5, true)];
        let want = 0.25 * 1.0 + 0.25 * (2.0 / 3.0) + 0.25 * 0.6;
        assert!((average_precision(&scored, 4) - want).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[(0.5, false)], 0), 0.0);
    }

    #[test]
    fn exact_and_displaced_predictions() {
        let g = [line(MapClass::Divider, &[(0.0, 0.0), (10.0, 0.0)], 1.0), line(MapClass::Divider, &[(0.0, 5.0), (10.0, 5.0)], 1.0)];
        let gr: Vec<&MapElement> = g.iter().collect();
        assert_eq!(match_instances(&gr, &gr, 0.5).unwrap(), vec![true, true]);
        let shifted: Vec<MapElement> = g.iter().map(|e| e.translated(Point::new(0.0, 4.0 * 2.0 + 0.1))).collect();
        let sr: Vec<&MapElement> = shifted.iter().collect();
        assert_eq!(match_instances(&sr, &gr, 2.0).unwrap(), vec![false, false]);
    }

    #[test]
    fn perfect_and_single_class_evaluation() {
        let gts = vec![line(MapClass::Divider, &[(-10.0, 0.0), (10.0, 0.0)], 1.0)];
        let scenes = vec![SceneMaps {
            scene: 0,
            preds: gts.clone(),
            gts: gts.clone(),
        }];
        let r = evaluate(&scenes, &EvalConfig::new(Roi::Standard)).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.ap.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn text_round_trip() {
        let r = EvalResult {
            roi: Roi::Extended,
            thresholds: vec![1.0, 1.5, 2.0],
            ap: [vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6], vec![1.0 / 3.0, 0.0, 1.0]],
            class_ap: [0.2, 0.5, 4.0 / 9.0],
            map: 0.38,
        };
        let p = EvalResult::parse(&r.to_text(), Roi::Extended, Path::new("x")).unwrap();
        assert_eq!(p, r);
    }

    #[test]
    fn mismatched_scene_ids_rejected() {
        assert!(align_scenes(vec![(1, vec![])], vec![(2, vec![])]).is_err());
        assert!(align_scenes(vec![(1, vec![])], vec![]).is_err());
    }
}
