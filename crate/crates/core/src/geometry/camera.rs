use serde::{Deserialize, Serialize};

use super::{BevGrid, Cell, Point};
use crate::error::{Error, Result};

/// Distortion-free pinhole camera. Optical frame: x right, y down, z along
/// the viewing direction. `pitch > 0` tilts the camera toward the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub focal: f64,
    pub principal: [f64; 2],
    pub image_size: [usize; 2],
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl PinholeCamera {
    pub fn new(position: [f64; 3], yaw: f64, pitch: f64, focal: f64, image_size: [usize; 2]) -> Result<Self> {
        let cam = Self {
            position,
            yaw,
            pitch,
            focal,
            principal: [image_size[0] as f64 / 2.0, image_size[1] as f64 / 2.0],
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Geometry(format!("focal must be positive, got {}", self.focal)));
        }
        if !(self.position[2] > 0.0) {
            return Err(Error::Geometry("camera must be mounted above the ground plane".into()));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::Geometry("empty image".into()));
        }
        Ok(())
    }

    /// Orthonormal `(right, down, forward)` axes in the world frame.
    pub fn axes(&self) -> (Vec3, Vec3, Vec3) {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let forward = [cy * cp, sy * cp, -sp];
        let right = [sy, -cy, 0.0];
        let down = cross(forward, right);
        (right, down, forward)
    }

    /// Horizontal field of view in radians.
    pub fn hfov(&self) -> f64 {
        2.0 * (self.image_size[0] as f64 / (2.0 * self.focal)).atan()
    }

    /// Continuous pixel coordinates `(u, v)` of a world point, when it lies in
    /// front of the camera and inside the image.
    pub fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        let (r, d, f) = self.axes();
        let v = [p[0] - self.position[0], p[1] - self.position[1], p[2] - self.position[2]];
        let z = dot(v, f);
        if !(z > 1e-9) {
            return None;
        }
        let u = self.principal[0] + self.focal * dot(v, r) / z;
        let w = self.principal[1] + self.focal * dot(v, d) / z;
        let inside = u >= 0.0 && w >= 0.0 && u < self.image_size[0] as f64 && w < self.image_size[1] as f64;
        inside.then_some([u, w])
    }

    /// World-frame direction of the ray through continuous pixel `(u, v)`.
    pub fn ray(&self, pixel: [f64; 2]) -> Vec3 {
        let (r, d, f) = self.axes();
        let a = (pixel[0] - self.principal[0]) / self.focal;
        let b = (pixel[1] - self.principal[1]) / self.focal;
        [f[0] + a * r[0] + b * d[0], f[1] + a * r[1] + b * d[1], f[2] + a * r[2] + b * d[2]]
    }

    /// Projection of a grid cell center on the ground plane.
    pub fn cell_to_pixel(&self, cell: Cell, grid: &BevGrid) -> Option<[f64; 2]> {
        let c = grid.cell_center(cell);
        self.project([c.x, c.y, 0.0])
    }
}

/// Ground-plane (`z = 0`) intersection of the ray from `origin` along `dir`,
/// with the ray parameter.
pub fn ground_hit(origin: Vec3, dir: Vec3) -> Option<(Point, f64)> {
    if !(dir[2] < -1e-12) {
        return None;
    }
    let t = -origin[2] / dir[2];
    (t > 0.0).then(|| (Point::new(origin[0] + t * dir[0], origin[1] + t * dir[1]), t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front() -> PinholeCamera {
        PinholeCamera::new([0.0, 0.0, 1.6], 0.0, 0.1, 44.0, [96, 64]).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = front();
        let (_, _, f) = cam.axes();
        for depth in [0.5, 3.0, 40.0] {
            let p = [cam.position[0] + depth * f[0], cam.position[1] + depth * f[1], cam.position[2] + depth * f[2]];
            let px = cam.project(p).unwrap();
            assert!((px[0] - 48.0).abs() < 1e-9 && (px[1] - 32.0).abs() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_none() {
        assert!(front().project([-5.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn longhand_projection() {
        let cam = PinholeCamera::new([0.5, -0.2, 1.5], 0.3, 0.12, 40.0, [96, 64]).unwrap();
        let p = [10.0, 2.0, 0.0];
        // Rotate into the camera frame by hand: undo yaw about z, then pitch.
        let (dx, dy, dz) = (p[0] - 0.5, p[1] + 0.2, p[2] - 1.5);
        let (s, c) = (0.3f64).sin_cos();
        let (xf, yl) = (c * dx + s * dy, -s * dx + c * dy);
        let (sp, cp) = (0.12f64).sin_cos();
        let depth = cp * xf - sp * dz;
        let down = -(sp * xf + cp * dz);
        let right = -yl;
        let want = [48.0 + 40.0 * right / depth, 32.0 + 40.0 * down / depth];
        let got = cam.project(p).unwrap();
        assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9, "{got:?} {want:?}");
    }

    #[test]
    fn ground_ahead_projects_below_principal_point() {
        let cam = PinholeCamera::new([0.0, 0.0, 1.6], 0.0, 0.0, 44.0, [96, 64]).unwrap();
        let g = BevGrid::standard();
        let cell = g.world_to_cell(Point::new(10.0, 0.3)).unwrap();
        let px = cam.cell_to_pixel(cell, &g).unwrap();
        assert!(px[1] > cam.principal[1]);
    }

    #[test]
    fn pixel_ray_round_trip() {
        let cam = front();
        let g = BevGrid::standard();
        for cell in g.iter_cells() {
            if let Some(px) = cam.cell_to_pixel(cell, &g) {
                let (hit, _) = ground_hit(cam.position, cam.ray(px)).unwrap();
                assert!(hit.dist(g.cell_center(cell)) < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_camera_rejected() {
        assert!(PinholeCamera::new([0.0, 0.0, 0.0], 0.0, 0.0, 44.0, [96, 64]).is_err());
        assert!(PinholeCamera::new([0.0, 0.0, 1.0], 0.0, 0.0, 0.0, [96, 64]).is_err());
    }
}
