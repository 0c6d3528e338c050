//! Procedural paired cross-view data: vector ground truth, an occlusion-free
//! overhead raster and perspective camera images with occluders.

mod dataset;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_polyline, EgoPose, MapClass, MapElement, PinholeCamera, Point};

pub use dataset::{export_dataset, load_dataset, read_manifest, Dataset, Manifest, ManifestEntry, Sample, Split};
pub use render::{background_color, render_cameras, render_overhead, CameraImage, SKY};

pub const LANE_WIDTH: f64 = 3.5;
const GEN_HALF_X: f64 = 50.0;
const GEN_HALF_Y: f64 = 25.0;
const ROAD_HALF_LENGTH: f64 = 80.0;
const RETRY_BUDGET: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub seed: u64,
    /// Inclusive `[min, max]` number of roads.
    pub road_count: [usize; 2],
    pub lane_count: [usize; 2],
    /// Maximum absolute centerline curvature, radians per meter.
    pub curvature: f64,
    /// Chance of each of the two crosswalk slots on a road being filled.
    pub crossing_probability: f64,
    pub occluder_count: [usize; 2],
    /// Occluder length range in meters.
    pub occluder_size: [f64; 2],
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            seed: 0,
            road_count: [1, 2],
            lane_count: [2, 3],
            curvature: 0.012,
            crossing_probability: 0.6,
            occluder_count: [3, 8],
            occluder_size: [3.5, 6.0],
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, r) in [
            ("road_count", self.road_count),
            ("lane_count", self.lane_count),
            ("occluder_count", self.occluder_count),
        ] {
            if r[0] > r[1] {
                return bad(format!("{name} range {r:?} is empty"));
            }
        }
        if self.road_count[0] == 0 || self.lane_count[0] == 0 {
            return bad("scenes need at least one road with one lane".into());
        }
        if !(self.curvature >= 0.0) {
            return bad(format!("curvature {} must be >= 0", self.curvature));
        }
        if !(0.0..=1.0).contains(&self.crossing_probability) {
            return bad(format!("crossing_probability {} outside [0, 1]", self.crossing_probability));
        }
        if !(self.occluder_size[0] > 0.0 && self.occluder_size[0] <= self.occluder_size[1]) {
            return bad(format!("occluder_size range {:?} is invalid", self.occluder_size));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Road surface: centerline and total paved width.
#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub centerline: Vec<Point>,
    pub width: f64,
}

/// Axis-aligned box standing on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub min: Point,
    pub max: Point,
    pub height: f64,
    pub shade: f64,
}

impl Occluder {
    /// Entry distance of the ray `origin + t * dir` into the box, if any.
    pub fn ray_entry(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let lo = [self.min.x, self.min.y, 0.0];
        let hi = [self.max.x, self.max.y, self.height];
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < lo[a] || origin[a] > hi[a] {
                    return None;
                }
            } else {
                let (mut ta, mut tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some(t0)
    }

    fn overlaps(&self, o: &Occluder, margin: f64) -> bool {
        self.min.x - margin < o.max.x
            && o.min.x - margin < self.max.x
            && self.min.y - margin < o.max.y
            && o.min.y - margin < self.max.y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub ground_truth: Vec<MapElement>,
    pub roads: Vec<Road>,
    pub occluders: Vec<Occluder>,
    pub ego_pose: EgoPose,
    pub texture_seed: u64,
}

impl Scene {
    /// Same scene with every occluder removed.
    pub fn without_occluders(&self) -> Self {
        Self {
            occluders: Vec::new(),
            ..self.clone()
        }
    }

    pub fn count(&self, class: MapClass) -> usize {
        self.ground_truth.iter().filter(|e| e.class == class).count()
    }

    /// Human-readable metadata written next to exported tensors.
    pub fn meta_text(&self) -> String {
        let mut s = format!(
            "seed {}\ntexture_seed {}\nego_pose {:.6} {:.6} {:.6}\n",
            self.seed,
            self.texture_seed,
            self.ego_pose.position.x,
            self.ego_pose.position.y,
            self.ego_pose.yaw()
        );
        for r in &self.roads {
            s += &format!("road width {:.6} points {}\n", r.width, r.centerline.len());
        }
        for o in &self.occluders {
            s += &format!(
                "occluder {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                o.min.x, o.min.y, o.max.x, o.max.y, o.height
            );
        }
        s
    }
}

/// Camera rig; the default is four cameras at 90 degree spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<PinholeCamera>,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self::ring(4, [96, 64], 44.0, 1.6, 0.12).expect("valid default rig")
    }
}

impl CameraRig {
    /// `n` cameras evenly spaced in yaw around the ego origin.
    pub fn ring(n: usize, image_size: [usize; 2], focal: f64, height: f64, pitch: f64) -> Result<Self> {
        let cameras = (0..n)
            .map(|k| {
                let yaw = crate::geometry::normalize_angle(k as f64 * 2.0 * std::f64::consts::PI / n as f64);
                PinholeCamera::new([0.0, 0.0, height], yaw, pitch, focal, image_size)
            })
            .collect::<Result<Vec<_>>>()?;
        let rig = Self { cameras };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Config("camera rig needs at least one camera".into()));
        }
        self.cameras.iter().try_for_each(PinholeCamera::validate)
    }

    /// Azimuth covered by the union of horizontal fields of view, degrees.
    pub fn azimuth_coverage(&self) -> f64 {
        let covered = (0..3600)
            .filter(|&i| {
                let az = ((i as f64 + 0.5) / 10.0).to_radians();
                self.cameras.iter().any(|c| {
                    let d = crate::geometry::normalize_angle(az - c.yaw).abs();
                    d <= c.hfov() / 2.0
                })
            })
            .count();
        covered as f64 / 10.0
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.gen_range(r[0]..=r[1])
}

fn arc(start: Point, heading: f64, curvature: f64, s_from: f64, s_to: f64, step: f64) -> (Vec<Point>, Vec<f64>) {
    let n = ((s_to - s_from) / step).ceil() as usize;
    let mut pts = Vec::with_capacity(n + 1);
    let mut headings = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let s = s_from + (s_to - s_from) * i as f64 / n as f64;
        let th = heading + curvature * s;
        let p = if curvature.abs() < 1e-9 {
            start + Point::new(heading.cos(), heading.sin()) * s
        } else {
            Point::new(
                start.x + ((th).sin() - heading.sin()) / curvature,
                start.y - ((th).cos() - heading.cos()) / curvature,
            )
        };
        pts.push(p);
        headings.push(th);
    }
    (pts, headings)
}

fn offset(pts: &[Point], headings: &[f64], lateral: f64) -> Vec<Point> {
    pts.iter()
        .zip(headings)
        .map(|(&p, &th)| p + Point::new(-th.sin(), th.cos()) * lateral)
        .collect()
}

/// Rounds coordinates to the six decimals of the polyline text format so
/// in-memory and exported ground truth agree exactly.
fn quantize(p: Point) -> Point {
    let q = |v: f64| format!("{v:.6}").parse::<f64>().expect("formatted float");
    Point::new(q(p.x), q(p.y))
}

fn push_clipped(out: &mut Vec<MapElement>, class: MapClass, pts: &[Point]) {
    for frag in clip_polyline(pts, -GEN_HALF_X, GEN_HALF_X, -GEN_HALF_Y, GEN_HALF_Y) {
        let mut q: Vec<Point> = frag.into_iter().map(quantize).collect();
        q.dedup_by(|a, b| a.dist(*b) <= 1e-9);
        if q.len() >= 2 && crate::geometry::polyline_length(&q) >= 1.0 {
            out.push(MapElement::ground_truth(class, q).expect("valid clipped polyline"));
        }
    }
}

struct RoadLayout {
    road: Road,
    pts: Vec<Point>,
    headings: Vec<f64>,
    stations: Vec<f64>,
    lanes: usize,
}

impl RoadLayout {
    fn new(anchor: Point, heading: f64, curvature: f64, lanes: usize) -> Self {
        let (pts, headings) = arc(anchor, heading, curvature, -ROAD_HALF_LENGTH, ROAD_HALF_LENGTH, 2.0);
        let n = pts.len() - 1;
        let stations = (0..=n)
            .map(|i| -ROAD_HALF_LENGTH + 2.0 * ROAD_HALF_LENGTH * i as f64 / n as f64)
            .collect();
        let width = lanes as f64 * LANE_WIDTH;
        Self {
            road: Road {
                centerline: pts.clone(),
                width,
            },
            pts,
            headings,
            stations,
            lanes,
        }
    }

    fn at(&self, s: f64) -> (Point, f64) {
        let i = self
            .stations
            .iter()
            .position(|&t| t >= s)
            .unwrap_or(self.stations.len() - 1)
            .max(1);
        let t = (s - self.stations[i - 1]) / (self.stations[i] - self.stations[i - 1]);
        let t = t.clamp(0.0, 1.0);
        let p = self.pts[i - 1] + (self.pts[i] - self.pts[i - 1]) * t;
        let h = self.headings[i - 1] + (self.headings[i] - self.headings[i - 1]) * t;
        (p, h)
    }

    fn emit(&self, out: &mut Vec<MapElement>) {
        let half = self.road.width / 2.0;
        push_clipped(out, MapClass::Boundary, &offset(&self.pts, &self.headings, half));
        push_clipped(out, MapClass::Boundary, &offset(&self.pts, &self.headings, -half));
        for j in 1..self.lanes {
            push_clipped(
                out,
                MapClass::Divider,
                &offset(&self.pts, &self.headings, -half + j as f64 * LANE_WIDTH),
            );
        }
    }

    fn crossing(&self, s: f64) -> Vec<Point> {
        let (p, h) = self.at(s);
        let n = Point::new(-h.sin(), h.cos());
        let half = self.road.width / 2.0;
        vec![p - n * half, p + n * half]
    }
}

/// Deterministic procedural scene for `params.seed`.
pub fn generate_scene(params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5CE4_E5EE_D000_0001);
    let ego_pose = EgoPose::new(
        Point::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0)),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    );
    let texture_seed = rng.gen();

    // Main road: the ego drives in one of its lanes.
    let lanes = sample_range(&mut rng, params.lane_count);
    let heading: f64 = rng.gen_range(-0.12..0.12);
    let curvature = rng.gen_range(-params.curvature..=params.curvature);
    let ego_lane = rng.gen_range(0..lanes);
    let lateral = -(lanes as f64) * LANE_WIDTH / 2.0 + (ego_lane as f64 + 0.5) * LANE_WIDTH;
    let anchor = Point::new(lateral * heading.sin(), -lateral * heading.cos());
    let mut layouts = vec![RoadLayout::new(anchor, heading, curvature, lanes)];

    let road_count = sample_range(&mut rng, params.road_count);
    for _ in 1..road_count {
        let s_int = rng.gen_range(-30.0..30.0);
        let (p, h) = layouts[0].at(s_int);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let th = h + side * (std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.3..0.3));
        let lanes2 = sample_range(&mut rng, params.lane_count);
        let k2 = rng.gen_range(-params.curvature..=params.curvature) * 0.5;
        layouts.push(RoadLayout::new(p, th, k2, lanes2));
    }

    let mut ground_truth = Vec::new();
    for layout in &layouts {
        layout.emit(&mut ground_truth);
    }
    for (r, layout) in layouts.iter().enumerate() {
        let mut placed: Vec<f64> = Vec::new();
        for _slot in 0..2 {
            if !rng.gen_bool(params.crossing_probability) {
                continue;
            }
            let mut ok = None;
            for _ in 0..RETRY_BUDGET {
                let s = if r == 0 {
                    rng.gen_range(-25.0..25.0)
                } else {
                    let main_half = layouts[0].road.width / 2.0 + 3.0;
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    side * rng.gen_range(main_half..main_half + 15.0)
                };
                if placed.iter().all(|&q| (q - s).abs() > 8.0) {
                    ok = Some(s);
                    break;
                }
            }
            let s = ok.ok_or_else(|| Error::Unsatisfiable {
                seed: params.seed,
                attempts: RETRY_BUDGET,
                reason: "crosswalk spacing".into(),
            })?;
            placed.push(s);
            push_clipped(&mut ground_truth, MapClass::Crossing, &layout.crossing(s));
        }
    }

    let n_occ = sample_range(&mut rng, params.occluder_count);
    let mut occluders: Vec<Occluder> = Vec::with_capacity(n_occ);
    for _ in 0..n_occ {
        let mut ok = None;
        for _ in 0..RETRY_BUDGET {
            let layout = &layouts[rng.gen_range(0..layouts.len())];
            let s = rng.gen_range(-35.0..35.0);
            let lane = rng.gen_range(0..layout.lanes);
            let (p, h) = layout.at(s);
            let lat = -layout.road.width / 2.0 + (lane as f64 + 0.5) * LANE_WIDTH;
            let c = p + Point::new(-h.sin(), h.cos()) * lat;
            let len = rng.gen_range(params.occluder_size[0]..=params.occluder_size[1]);
            let wid = 1.9;
            let along_x = h.cos().abs() >= h.sin().abs();
            let (hx, hy) = if along_x { (len / 2.0, wid / 2.0) } else { (wid / 2.0, len / 2.0) };
            let occ = Occluder {
                min: Point::new(c.x - hx, c.y - hy),
                max: Point::new(c.x + hx, c.y + hy),
                height: rng.gen_range(1.5..=2.5),
                shade: rng.gen_range(0.0..1.0),
            };
            let ego_zone = Occluder {
                min: Point::new(-3.0, -2.0),
                max: Point::new(3.0, 2.0),
                height: 2.0,
                shade: 0.0,
            };
            if !occ.overlaps(&ego_zone, 0.5) && occluders.iter().all(|o| !occ.overlaps(o, 0.5)) {
                ok = Some(occ);
                break;
            }
        }
        occluders.push(ok.ok_or_else(|| Error::Unsatisfiable {
            seed: params.seed,
            attempts: RETRY_BUDGET,
            reason: "occluder placement".into(),
        })?);
    }

    if ground_truth.is_empty() {
        return Err(Error::Unsatisfiable {
            seed: params.seed,
            attempts: 1,
            reason: "no ground truth inside the generation region".into(),
        });
    }
    Ok(Scene {
        seed: params.seed,
        ground_truth,
        roads: layouts.into_iter().map(|l| l.road).collect(),
        occluders,
        ego_pose,
        texture_seed,
    })
}
