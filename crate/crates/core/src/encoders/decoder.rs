use super::layers::{Bound, Builder, Conv, Linear};
use super::{check_grid_shape, EncoderConfig, FeatureMap};
use crate::error::Result;
use crate::geometry::{BevGrid, MapClass, MapElement, Point};
use crate::scalar::Real;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: usize = 3;
/// Point outputs are squashed to this multiple of the RoI half extents.
pub const POINT_BOUND: f64 = 1.5;
const CONV_CHANNELS: usize = 16;
const BACKGROUND_PRIOR: f64 = 2.0;

/// Query logits `[Q, 4]` and squashed points `[Q, 2K]` in half-extent units.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub logits: Var,
    pub points: Var,
}

/// Fixed-query set predictor: a strided conv, pooling, a shared hidden
/// layer and per-query class and point heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MapDecoder<T> {
    pub params: ParamSet<T>,
    conv: Conv,
    hidden: Linear,
    class_head: Linear,
    point_head: Linear,
    channels: usize,
    queries: usize,
    points: usize,
    grid: BevGrid,
}

impl<T: Real> MapDecoder<T> {
    pub fn new(cfg: &EncoderConfig, grid: BevGrid, seed: u64, tag: &str) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(seed ^ 0xDEC0_DE00);
        let conv = b.conv(&format!("{tag}.conv"), cfg.channels, CONV_CHANNELS, 3, 2);
        let pooled = ((grid.height_cells - 1) / 2 + 1) / 2 * (((grid.width_cells - 1) / 2 + 1) / 2);
        let hidden = b.linear(
            &format!("{tag}.hidden"),
            CONV_CHANNELS * pooled,
            cfg.decoder_hidden,
            1.0,
            Tensor::zeros([cfg.decoder_hidden]),
        );
        let prior = Tensor::from_fn([cfg.queries * NUM_CLASSES], |i| {
            T::of(if i % NUM_CLASSES == BACKGROUND { BACKGROUND_PRIOR } else { 0.0 })
        });
        let class_head = b.linear(&format!("{tag}.cls"), cfg.decoder_hidden, cfg.queries * NUM_CLASSES, 0.1, prior);
        let k2 = cfg.points_per_element * 2;
        let point_head = b.linear(
            &format!("{tag}.pts"),
            cfg.decoder_hidden,
            cfg.queries * k2,
            0.1,
            Tensor::zeros([cfg.queries * k2]),
        );
        Ok(Self {
            params: b.params,
            conv,
            hidden,
            class_head,
            point_head,
            channels: cfg.channels,
            queries: cfg.queries,
            points: cfg.points_per_element,
            grid,
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn points_per_element(&self) -> usize {
        self.points
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound::new(tape, &self.params)
    }

    pub fn forward_var(&self, tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<DecoderOutput> {
        check_grid_shape("decoder input", tape.shape(features), self.channels, &self.grid)?;
        let x = self.conv.relu(tape, bound, features)?;
        let x = tape.maxpool2(x)?;
        let x = self.hidden.apply(tape, bound, x)?;
        let x = tape.relu(x)?;
        let logits = self.class_head.apply(tape, bound, x)?;
        let logits = tape.reshape(logits, &[self.queries, NUM_CLASSES])?;
        let p = self.point_head.apply(tape, bound, x)?;
        let p = tape.tanh(p)?;
        let p = tape.scale(p, POINT_BOUND)?;
        let points = tape.reshape(p, &[self.queries, 2 * self.points])?;
        Ok(DecoderOutput { logits, points })
    }

    /// Points of query `q` as a `[K, 2]` variable.
    pub fn query_points(&self, tape: &mut Tape<T>, out: &DecoderOutput, q: usize) -> Result<Var> {
        let row = tape.select_row(out.points, q)?;
        tape.reshape(row, &[self.points, 2])
    }

    /// Vector map predicted from `f`: one element per query whose most
    /// probable class is not background, scored by that class probability.
    pub fn decode_map(&self, f: &FeatureMap<T>) -> Result<Vec<MapElement>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(f.tensor.clone());
        let out = self.forward_var(&mut tape, &bound, x)?;
        Ok(decode_values(tape.value(out.logits), tape.value(out.points), &self.grid))
    }
}

/// Converts a normalized `[x, y]` pair to ego-frame meters.
pub fn to_metric(grid: &BevGrid, u: f64, v: f64) -> Point {
    Point::new(
        grid.origin.x + u * grid.x_extent / 2.0,
        grid.origin.y + v * grid.y_extent / 2.0,
    )
}

/// Converts an ego-frame point to half-extent units.
pub fn to_normalized(grid: &BevGrid, p: Point) -> [f64; 2] {
    [
        (p.x - grid.origin.x) / (grid.x_extent / 2.0),
        (p.y - grid.origin.y) / (grid.y_extent / 2.0),
    ]
}

/// Softmax over one row of logits.
pub fn softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn decode_values<T: Real>(logits: &Tensor<T>, points: &Tensor<T>, grid: &BevGrid) -> Vec<MapElement> {
    let q = logits.shape()[0];
    let k2 = points.shape()[1];
    let mut out = Vec::new();
    for i in 0..q {
        let p = softmax(&logits.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]);
        let (best, score) = p
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, v)| if v > acc.1 { (c, v) } else { acc });
        if best == BACKGROUND {
            continue;
        }
        let row = &points.data()[i * k2..(i + 1) * k2];
        let mut pts: Vec<Point> = row
            .chunks_exact(2)
            .map(|c| to_metric(grid, c[0].as_f64(), c[1].as_f64()))
            .collect();
        pts.dedup_by(|a, b| a.dist(*b) <= 1e-9);
        let class = MapClass::from_id(best).expect("foreground class");
        if let Ok(el) = MapElement::new(class, pts, score.clamp(0.0, 1.0)) {
            out.push(el);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Producer;

    fn fmap(grid: BevGrid) -> FeatureMap<f64> {
        FeatureMap {
            tensor: Tensor::from_fn([16, 24, 48], |i| ((i * 37) % 101) as f64 / 50.0 - 1.0),
            grid,
            producer: Producer::Teacher,
            frozen: true,
        }
    }

    #[test]
    fn random_decoder_respects_bounds() {
        let g = BevGrid::extended();
        for seed in 0..5 {
            let d = MapDecoder::<f64>::new(&EncoderConfig::default(), g, seed, "dec").unwrap();
            let els = d.decode_map(&fmap(g)).unwrap();
            assert!(els.len() <= 12);
            for e in &els {
                for p in &e.points {
                    assert!(p.x.abs() <= 1.5 * 50.0 + 1e-9 && p.y.abs() <= 1.5 * 25.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn background_logits_give_empty_map() {
        let g = BevGrid::standard();
        let logits = Tensor::from_fn([12, 4], |i| if i % 4 == BACKGROUND { 5.0 } else { 0.0 });
        let points = Tensor::from_fn([12, 16], |i| i as f64 * 0.01);
        assert!(decode_values(&logits, &points, &g).is_empty());
    }

    #[test]
    fn decoded_elements_use_metric_points() {
        let g = BevGrid::standard();
        let mut logits = Tensor::from_fn([12, 4], |i| if i % 4 == BACKGROUND { 5.0 } else { 0.0 });
        logits.data_mut()[4 + 2] = 9.0;
        let points = Tensor::from_fn([12, 16], |i| if i % 2 == 0 { (i % 16) as f64 / 16.0 - 0.5 } else { 0.2 });
        let els = decode_values(&logits, &points, &g);
        assert_eq!(els.len(), 1);
        assert_eq!(els[0].class, MapClass::Boundary);
        assert!((els[0].points[0].x - (-0.5 * 30.0)).abs() < 1e-12);
        assert!((els[0].points[0].y - 0.2 * 15.0).abs() < 1e-12);
        let p = softmax(&logits.data()[4..8]);
        assert!((els[0].score - p[2]).abs() < 1e-15);
    }

    #[test]
    fn normalization_round_trip() {
        let g = BevGrid::extended();
        let p = Point::new(12.5, -7.25);
        let [u, v] = to_normalized(&g, p);
        assert!(to_metric(&g, u, v).dist(p) < 1e-12);
    }
}
