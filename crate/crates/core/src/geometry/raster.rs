use super::{point_segment_distance, BevGrid, Cell, MapElement};
use crate::error::{Error, Result};

/// Binary `H x W` mask over a [`BevGrid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn get(&self, c: Cell) -> bool {
        self.bits[c.row * self.width + c.col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }
}

/// Sets every cell whose center lies within `thickness / 2` of a segment.
pub fn rasterize_polyline(el: &MapElement, grid: &BevGrid, thickness: f64) -> Result<Mask> {
    if el.points.len() < 2 {
        return Err(Error::Geometry("rasterize_polyline needs >= 2 points".into()));
    }
    let min_cell = grid.cell_x().min(grid.cell_y());
    if thickness < min_cell * (1.0 - 1e-12) {
        return Err(Error::Geometry(format!(
            "thickness {thickness} below one cell ({min_cell})"
        )));
    }
    let half = thickness / 2.0;
    let mut mask = Mask::empty(grid.height_cells, grid.width_cells);
    for w in el.points.windows(2) {
        let (a, b) = (w[0], w[1]);
        // Candidate column/row span of the segment's bounding box, padded.
        let col_lo = ((a.x.min(b.x) - half - grid.x_min()) / grid.cell_x()).floor() - 1.0;
        let col_hi = ((a.x.max(b.x) + half - grid.x_min()) / grid.cell_x()).ceil() + 1.0;
        let row_lo = ((grid.y_max() - a.y.max(b.y) - half) / grid.cell_y()).floor() - 1.0;
        let row_hi = ((grid.y_max() - a.y.min(b.y) + half) / grid.cell_y()).ceil() + 1.0;
        let clamp = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
        for row in clamp(row_lo, grid.height_cells)..clamp(row_hi, grid.height_cells) {
            for col in clamp(col_lo, grid.width_cells)..clamp(col_hi, grid.width_cells) {
                let c = Cell { row, col };
                if point_segment_distance(grid.cell_center(c), a, b) <= half {
                    mask.bits[grid.flat(c)] = true;
                }
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{MapClass, Point};

    fn line(pts: &[(f64, f64)]) -> MapElement {
        MapElement::ground_truth(MapClass::Boundary, pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    #[test]
    fn axis_aligned_line_sets_one_row() {
        let g = BevGrid::standard();
        // Row 12 has its centers at y = -0.625.
        let m = rasterize_polyline(&line(&[(-30.0, -0.625), (30.0, -0.625)]), &g, 1.25).unwrap();
        for c in g.iter_cells() {
            assert_eq!(m.get(c), c.row == 12, "{c:?}");
        }
    }

    #[test]
    fn outside_roi_is_empty() {
        let g = BevGrid::standard();
        let m = rasterize_polyline(&line(&[(40.0, 20.0), (80.0, 25.0)]), &g, 2.5).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn diagonal_matches_per_cell_oracle() {
        let g = BevGrid::standard();
        let (a, b) = (Point::new(-20.0, -9.0), Point::new(17.0, 11.5));
        let m = rasterize_polyline(&line(&[(a.x, a.y), (b.x, b.y)]), &g, 2.5).unwrap();
        // Oracle: closest point on the infinite line, clamped by hand.
        for c in g.iter_cells() {
            let p = g.cell_center(c);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let d = ((a.x + t * dx - p.x).powi(2) + (a.y + t * dy - p.y).powi(2)).sqrt();
            assert_eq!(m.get(c), d <= 1.25, "{c:?}");
        }
        assert!(m.count() > 40);
    }

    #[test]
    fn reversal_invariant() {
        let g = BevGrid::extended();
        let fwd = line(&[(-40.0, -20.0), (-3.0, 2.0), (10.0, 2.0), (45.0, 20.0)]);
        let mut rev = fwd.clone();
        rev.points.reverse();
        assert_eq!(
            rasterize_polyline(&fwd, &g, 3.0).unwrap(),
            rasterize_polyline(&rev, &g, 3.0).unwrap()
        );
    }

    #[test]
    fn thickness_below_cell_rejected() {
        let g = BevGrid::standard();
        assert!(rasterize_polyline(&line(&[(0.0, 0.0), (1.0, 0.0)]), &g, 0.5).is_err());
    }
}
