use std::sync::Arc;

use super::layers::{Bound, Builder, Conv, UNet};
use super::teacher::check_divisible;
use super::{EncoderConfig, FeatureMap, FeatureVar, Producer};
use crate::error::{Error, Result};
use crate::geometry::BevGrid;
use crate::scalar::Real;
use crate::scenegen::CameraRig;
use crate::tensor::{GatherIndex, ParamSet, Tape, Tensor, Var};

const IMAGE_CHANNELS: usize = 3;
const IMAGE_STRIDE: usize = 2;

/// For every grid cell, the camera and feature-map position it samples,
/// or `None` when no camera sees the cell center.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingTable {
    pub index: GatherIndex,
    pub feature_size: Vec<[usize; 2]>,
    pub grid: BevGrid,
}

fn feature_extent(n: usize) -> usize {
    (n - 1) / IMAGE_STRIDE + 1
}

impl LiftingTable {
    /// Projects each cell center into every camera and keeps the camera
    /// where it lands closest to the image's vertical center line; ties go
    /// to the smaller yaw so camera order never matters.
    pub fn build(rig: &CameraRig, grid: &BevGrid) -> Result<Self> {
        rig.validate()?;
        let feature_size: Vec<[usize; 2]> = rig
            .cameras
            .iter()
            .map(|c| [feature_extent(c.image_size[1]), feature_extent(c.image_size[0])])
            .collect();
        let index: Vec<Option<(usize, usize)>> = grid
            .iter_cells()
            .map(|cell| {
                let mut best: Option<(f64, f64, usize, [f64; 2])> = None;
                for (k, cam) in rig.cameras.iter().enumerate() {
                    let Some(px) = cam.cell_to_pixel(cell, grid) else { continue };
                    let offset = (px[0] - cam.principal[0]).abs() / (cam.image_size[0] as f64 / 2.0);
                    let better = match best {
                        None => true,
                        Some((o, yaw, _, _)) => match offset.total_cmp(&o) {
                            std::cmp::Ordering::Less => true,
                            std::cmp::Ordering::Equal => cam.yaw.total_cmp(&yaw).is_lt(),
                            std::cmp::Ordering::Greater => false,
                        },
                    };
                    if better {
                        best = Some((offset, cam.yaw, k, px));
                    }
                }
                best.map(|(_, _, k, px)| {
                    let [fh, fw] = feature_size[k];
                    // Output position i of the stride-2 conv is centered on pixel 2i.
                    let near = |v: f64, n: usize| (((v - 0.5) / IMAGE_STRIDE as f64).round().max(0.0) as usize).min(n - 1);
                    (k, near(px[1], fh) * fw + near(px[0], fw))
                })
            })
            .collect();
        Ok(Self {
            index: Arc::from(index),
            feature_size,
            grid: *grid,
        })
    }

    /// Camera sampled by each cell.
    pub fn camera_of_cell(&self) -> Vec<Option<usize>> {
        self.index.iter().map(|e| e.map(|(k, _)| k)).collect()
    }

    pub fn unseen_cells(&self) -> usize {
        self.index.iter().filter(|e| e.is_none()).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StudentOutput {
    /// Lifted BEV features before refinement.
    pub lifted: Var,
    pub features: FeatureVar,
}

/// Shared per-camera conv stack, IPM lifting and a BEV U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentEncoder<T> {
    pub params: ParamSet<T>,
    image: [Conv; 2],
    default_feature: usize,
    refine: UNet,
    grid: BevGrid,
}

impl<T: Real> StudentEncoder<T> {
    pub fn new(cfg: &EncoderConfig, grid: BevGrid, seed: u64) -> Result<Self> {
        cfg.validate()?;
        check_divisible(&grid)?;
        let mut b = Builder::new(seed ^ 0x57D0_E271);
        let cc = cfg.camera_channels;
        let image = [
            b.conv("student.cam0", IMAGE_CHANNELS, cc, 3, IMAGE_STRIDE),
            b.conv("student.cam1", cc, cc, 3, 1),
        ];
        let default_feature = b.vector("student.default", Tensor::zeros([cc]));
        let refine = UNet::build(&mut b, "student.bev", cc, cfg.unet_widths, cfg.channels);
        Ok(Self {
            params: b.params,
            image,
            default_feature,
            refine,
            grid,
        })
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound::new(tape, &self.params)
    }

    pub fn forward_var(&self, tape: &mut Tape<T>, bound: &Bound, images: &[Var], table: &LiftingTable) -> Result<StudentOutput> {
        if table.grid != self.grid {
            return Err(Error::Geometry("lifting table built for a different grid".into()));
        }
        if images.len() != table.feature_size.len() {
            return Err(Error::Missing(format!(
                "camera images: rig has {} cameras, got {}",
                table.feature_size.len(),
                images.len()
            )));
        }
        let mut feats = Vec::with_capacity(images.len());
        for (k, &img) in images.iter().enumerate() {
            let x = self.image[0].relu(tape, bound, img)?;
            let x = self.image[1].relu(tape, bound, x)?;
            let s = tape.shape(x);
            if s[1..] != table.feature_size[k] {
                return Err(Error::shape("camera features", table.feature_size[k], &s[1..]));
            }
            feats.push(x);
        }
        let (h, w) = (self.grid.height_cells, self.grid.width_cells);
        let lifted = tape.gather_cells(&feats, bound.vars[self.default_feature], table.index.clone(), h, w)?;
        let var = self.refine.forward(tape, bound, lifted)?;
        Ok(StudentOutput {
            lifted,
            features: FeatureVar {
                var,
                grid: self.grid,
                producer: Producer::Student,
            },
        })
    }

    /// Feature values for one set of camera images, on a private tape.
    pub fn forward(&self, images: &[Tensor<T>], table: &LiftingTable) -> Result<FeatureMap<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let vars: Vec<Var> = images.iter().map(|i| tape.constant(i.clone())).collect();
        let out = self.forward_var(&mut tape, &bound, &vars, table)?;
        Ok(FeatureMap {
            tensor: tape.value(out.features.var).clone(),
            grid: self.grid,
            producer: Producer::Student,
            frozen: self.params.is_frozen(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ground_hit, Cell, PinholeCamera};

    #[test]
    fn default_rig_leaves_only_the_ego_footprint_unseen() {
        let g = BevGrid::standard();
        let t = LiftingTable::build(&CameraRig::default(), &g).unwrap();
        let unseen = t.unseen_cells();
        assert!(unseen > 0 && unseen < 20, "{unseen}");
        for (i, e) in t.index.iter().enumerate() {
            if e.is_none() {
                let c = g.cell_center(Cell {
                    row: i / g.width_cells,
                    col: i % g.width_cells,
                });
                assert!(c.x.abs() < 4.0 && c.y.abs() < 4.0, "{c:?}");
            }
        }
    }

    #[test]
    fn forward_only_rig_cannot_see_behind() {
        let g = BevGrid::standard();
        let rig = CameraRig {
            cameras: vec![PinholeCamera::new([0.0, 0.0, 1.6], 0.0, 0.12, 44.0, [96, 64]).unwrap()],
        };
        let t = LiftingTable::build(&rig, &g).unwrap();
        let behind = g.world_to_cell(crate::geometry::Point::new(-20.0, 0.0)).unwrap();
        assert!(t.index[g.flat(behind)].is_none());
    }

    #[test]
    fn visible_cells_agree_with_ray_march() {
        let g = BevGrid::standard();
        let rig = CameraRig::default();
        for cam in &rig.cameras {
            for cell in g.iter_cells() {
                let Some(px) = cam.cell_to_pixel(cell, &g) else { continue };
                // March the pixel ray in 1 cm steps until it drops below ground.
                let d = cam.ray(px);
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let mut p = cam.position;
                while p[2] > 0.0 {
                    for a in 0..3 {
                        p[a] += 0.01 * d[a] / n;
                    }
                }
                let landed = crate::geometry::Point::new(p[0], p[1]);
                assert!(landed.dist(g.cell_center(cell)) < 0.02);
                let (hit, _) = ground_hit(cam.position, d).unwrap();
                assert!(hit.dist(g.cell_center(cell)) < 1e-6);
            }
        }
    }

    #[test]
    fn camera_permutation_does_not_change_features() {
        let g = BevGrid::standard();
        let cfg = EncoderConfig::default();
        let s = StudentEncoder::<f64>::new(&cfg, g, 1).unwrap();
        let rig = CameraRig::default();
        let imgs: Vec<Tensor<f64>> = (0..4)
            .map(|k| Tensor::from_fn([3, 64, 96], |i| (((i + 7 * k) * 13) % 29) as f64 / 29.0))
            .collect();
        let a = s.forward(&imgs, &LiftingTable::build(&rig, &g).unwrap()).unwrap();
        let mut rig2 = rig.clone();
        rig2.cameras.swap(0, 2);
        let mut imgs2 = imgs.clone();
        imgs2.swap(0, 2);
        let b = s.forward(&imgs2, &LiftingTable::build(&rig2, &g).unwrap()).unwrap();
        assert_eq!(a.tensor, b.tensor);
        let z: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::zeros([3, 64, 96])).collect();
        assert!(s.forward(&z, &LiftingTable::build(&rig, &g).unwrap()).unwrap().tensor.is_finite());
    }

    #[test]
    fn missing_camera_is_an_error() {
        let g = BevGrid::standard();
        let s = StudentEncoder::<f64>::new(&EncoderConfig::default(), g, 1).unwrap();
        let t = LiftingTable::build(&CameraRig::default(), &g).unwrap();
        let imgs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::zeros([3, 64, 96])).collect();
        assert!(matches!(s.forward(&imgs, &t), Err(Error::Missing(_))));
    }
}
