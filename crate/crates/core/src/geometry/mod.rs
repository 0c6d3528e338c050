//! Metric BEV grids, poses, map elements, cameras and polyline metrics.
//!
//! Frame convention: x forward, y left, z up, meters. Grid rows run from the
//! leftmost y (row 0) to the rightmost; columns from the rearmost x (col 0)
//! forward, so a `[C, H, W]` feature map indexes `(row, col)` directly.

mod camera;
mod polyline;
mod raster;

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use camera::{ground_hit, PinholeCamera};
pub use polyline::{
    chamfer_distance, clip_polyline, point_segment_distance, point_to_polyline, polyline_length, resample_count,
    resample_step, DEFAULT_SAMPLE_STEP,
};
pub use raster::{rasterize_polyline, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Cell address: `row` along H (lateral), `col` along W (longitudinal).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

/// Metric region of interest discretized into `height_cells x width_cells`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    /// Forward span in meters.
    pub x_extent: f64,
    /// Lateral span in meters.
    pub y_extent: f64,
    pub width_cells: usize,
    pub height_cells: usize,
    /// Ego-frame point at the grid center.
    #[serde(default)]
    pub origin: Point,
}

impl BevGrid {
    pub fn new(x_extent: f64, y_extent: f64, width_cells: usize, height_cells: usize) -> Result<Self> {
        let g = Self {
            x_extent,
            y_extent,
            width_cells,
            height_cells,
            origin: Point::default(),
        };
        g.validate()?;
        Ok(g)
    }

    /// 60 x 30 m at 48 x 24 cells.
    pub fn standard() -> Self {
        Self::new(60.0, 30.0, 48, 24).expect("valid")
    }

    /// 100 x 50 m at 48 x 24 cells.
    pub fn extended() -> Self {
        Self::new(100.0, 50.0, 48, 24).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_cells < 2 || self.height_cells < 2 {
            return Err(Error::Geometry(format!(
                "grid needs at least 2x2 cells, got {}x{}",
                self.height_cells, self.width_cells
            )));
        }
        let (cx, cy) = (self.cell_x(), self.cell_y());
        if !(cx.is_finite() && cy.is_finite() && cx > 0.0 && cy > 0.0) || !self.origin.is_finite() {
            return Err(Error::Geometry(format!("invalid cell size {cx} x {cy}")));
        }
        Ok(())
    }

    pub fn cell_x(&self) -> f64 {
        self.x_extent / self.width_cells as f64
    }

    pub fn cell_y(&self) -> f64 {
        self.y_extent / self.height_cells as f64
    }

    pub fn cells(&self) -> usize {
        self.width_cells * self.height_cells
    }

    pub fn x_min(&self) -> f64 {
        self.origin.x - self.x_extent / 2.0
    }

    pub fn x_max(&self) -> f64 {
        self.origin.x + self.x_extent / 2.0
    }

    pub fn y_min(&self) -> f64 {
        self.origin.y - self.y_extent / 2.0
    }

    pub fn y_max(&self) -> f64 {
        self.origin.y + self.y_extent / 2.0
    }

    /// RoI membership, half-open: `[x_min, x_max) x (y_min, y_max]`.
    pub fn contains(&self, p: Point) -> bool {
        self.world_to_cell(p).is_some()
    }

    pub fn world_to_cell(&self, p: Point) -> Option<Cell> {
        if !p.is_finite() {
            return None;
        }
        let fc = (p.x - self.x_min()) / self.cell_x();
        let fr = (self.y_max() - p.y) / self.cell_y();
        if fc < 0.0 || fr < 0.0 {
            return None;
        }
        let (col, row) = (fc.floor() as usize, fr.floor() as usize);
        (col < self.width_cells && row < self.height_cells).then_some(Cell { row, col })
    }

    pub fn cell_center(&self, c: Cell) -> Point {
        Point::new(
            self.x_min() + (c.col as f64 + 0.5) * self.cell_x(),
            self.y_max() - (c.row as f64 + 0.5) * self.cell_y(),
        )
    }

    /// Flat index `row * W + col`.
    pub fn flat(&self, c: Cell) -> usize {
        c.row * self.width_cells + c.col
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height_cells).flat_map(move |row| (0..self.width_cells).map(move |col| Cell { row, col }))
    }
}

/// Ego pose in a world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub position: Point,
    yaw: f64,
}

impl EgoPose {
    pub fn new(position: Point, yaw: f64) -> Self {
        Self {
            position,
            yaw: normalize_angle(yaw),
        }
    }

    /// Heading in `(-pi, pi]`.
    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn to_world(&self, p: Point) -> Point {
        let (s, c) = self.yaw.sin_cos();
        Point::new(self.position.x + c * p.x - s * p.y, self.position.y + s * p.x + c * p.y)
    }

    pub fn to_ego(&self, p: Point) -> Point {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.position;
        Point::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MapClass {
    Crossing = 0,
    Divider = 1,
    Boundary = 2,
}

impl MapClass {
    pub const ALL: [MapClass; 3] = [MapClass::Crossing, MapClass::Divider, MapClass::Boundary];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MapClass::Crossing => "ped",
            MapClass::Divider => "divider",
            MapClass::Boundary => "boundary",
        }
    }
}

impl FromStr for MapClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MapClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown class {s}")))
    }
}

/// Class-labelled polyline in ego coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MapElement {
    pub class: MapClass,
    pub points: Vec<Point>,
    /// Confidence in `[0, 1]`; 1 for ground truth.
    pub score: f64,
}

impl MapElement {
    pub fn new(class: MapClass, points: Vec<Point>, score: f64) -> Result<Self> {
        let el = Self { class, points, score };
        el.validate()?;
        Ok(el)
    }

    pub fn ground_truth(class: MapClass, points: Vec<Point>) -> Result<Self> {
        Self::new(class, points, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Geometry(format!("polyline needs >= 2 points, got {}", self.points.len())));
        }
        if !self.points.iter().all(|p| p.is_finite()) {
            return Err(Error::Geometry("non-finite coordinate".into()));
        }
        if self.points.windows(2).any(|w| w[0].dist(w[1]) <= 1e-9) {
            return Err(Error::Geometry("coincident consecutive points".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Geometry(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        polyline_length(&self.points)
    }

    pub fn translated(&self, d: Point) -> Self {
        Self {
            points: self.points.iter().map(|&p| p + d).collect(),
            ..self.clone()
        }
    }
}

/// Serializes elements as `class_id score x0 y0 x1 y1 ...`, one per line,
/// with six decimals.
pub fn write_polylines(elements: &[MapElement]) -> String {
    let mut s = String::new();
    for el in elements {
        write!(s, "{} {:.6}", el.class.id(), el.score).expect("string write");
        for p in &el.points {
            write!(s, " {:.6} {:.6}", p.x, p.y).expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn parse_polylines(text: &str) -> Result<Vec<MapElement>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |why: &str| Error::Geometry(format!("line {}: {why}", i + 1));
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() < 6 || vals.len() % 2 != 0 {
                return Err(bad("expected class, score and at least two points"));
            }
            let class = vals[0]
                .parse::<usize>()
                .ok()
                .and_then(MapClass::from_id)
                .ok_or_else(|| bad("bad class id"))?;
            let nums = vals[1..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad("bad number")))
                .collect::<Result<Vec<_>>>()?;
            let points = nums[1..].chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
            MapElement::new(class, points, nums[0]).map_err(|e| bad(&e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_center_maps_to_central_cell() {
        let g = BevGrid::standard();
        assert_eq!(g.world_to_cell(Point::new(0.0, 0.0)), Some(Cell { row: 12, col: 24 }));
        assert_eq!(g.world_to_cell(Point::new(30.0001, 0.0)), None);
        assert_eq!(g.world_to_cell(Point::new(-30.0001, 0.0)), None);
        assert_eq!(g.world_to_cell(Point::new(0.0, 15.0001)), None);
    }

    #[test]
    fn world_to_cell_matches_containment_scan() {
        let g = BevGrid::standard();
        let p = Point::new(7.5, -3.75);
        // Oracle: test every cell rectangle for containment.
        let mut hits = vec![];
        for row in 0..g.height_cells {
            for col in 0..g.width_cells {
                let x0 = -30.0 + col as f64 * 1.25;
                let y1 = 15.0 - row as f64 * 1.25;
                if p.x >= x0 && p.x < x0 + 1.25 && p.y <= y1 && p.y > y1 - 1.25 {
                    hits.push(Cell { row, col });
                }
            }
        }
        assert_eq!(hits.len(), 1);
        assert_eq!(g.world_to_cell(p), Some(hits[0]));
        assert_eq!(hits[0], Cell { row: 15, col: 30 });
    }

    #[test]
    fn round_trip_within_half_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for g in [BevGrid::standard(), BevGrid::extended()] {
            for _ in 0..1000 {
                let p = Point::new(
                    rng.gen_range(g.x_min()..g.x_max()),
                    rng.gen_range(g.y_min() + 1e-9..g.y_max()),
                );
                let c = g.world_to_cell(p).expect("in RoI");
                let q = g.cell_center(c);
                assert!((p.x - q.x).abs() <= g.cell_x() / 2.0 + 1e-12);
                assert!((p.y - q.y).abs() <= g.cell_y() / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert!(BevGrid::new(60.0, 30.0, 1, 24).is_err());
        assert!(BevGrid::new(0.0, 30.0, 48, 24).is_err());
        assert!(BevGrid::new(f64::INFINITY, 30.0, 48, 24).is_err());
    }

    #[test]
    fn yaw_is_normalized() {
        use std::f64::consts::PI;
        assert!((EgoPose::new(Point::default(), 3.0 * PI).yaw() - PI).abs() < 1e-12);
        assert!((EgoPose::new(Point::default(), -PI).yaw() - PI).abs() < 1e-12);
        let pose = EgoPose::new(Point::new(10.0, -4.0), 0.7);
        let p = Point::new(3.0, 2.0);
        let back = pose.to_ego(pose.to_world(p));
        assert!(back.dist(p) < 1e-12);
    }

    #[test]
    fn element_validation() {
        let p = Point::new(1.0, 1.0);
        assert!(MapElement::ground_truth(MapClass::Divider, vec![p]).is_err());
        assert!(MapElement::ground_truth(MapClass::Divider, vec![p, p]).is_err());
        assert!(MapElement::ground_truth(MapClass::Divider, vec![p, Point::new(f64::NAN, 0.0)]).is_err());
        assert!(MapElement::ground_truth(MapClass::Divider, vec![p, Point::new(2.0, 1.0)]).is_ok());
    }

    #[test]
    fn polyline_text_format() {
        let el = MapElement::new(
            MapClass::Boundary,
            vec![Point::new(1.0, -2.5), Point::new(3.25, 4.0)],
            0.5,
        )
        .unwrap();
        let text = write_polylines(&[el.clone()]);
        assert_eq!(text, "2 0.500000 1.000000 -2.500000 3.250000 4.000000\n");
        assert_eq!(parse_polylines(&text).unwrap(), vec![el]);
        assert!(parse_polylines("7 1.0 0 0 1 1").is_err());
        assert!(parse_polylines("1 1.0 0 0").is_err());
    }
}
