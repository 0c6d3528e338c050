use super::{CameraRig, Scene};
use crate::geometry::{ground_hit, point_to_polyline, rasterize_polyline, BevGrid, MapClass, Point};
use crate::tensor::Tensor;

/// `3 x h x w` image with values in `[0, 1]`.
pub type CameraImage = Tensor<f64>;

pub const SKY: [f64; 3] = [0.62, 0.76, 0.94];
const ASPHALT: [f64; 3] = [0.30, 0.30, 0.33];
const BOUNDARY: [f64; 3] = [0.92, 0.78, 0.22];
const DIVIDER: [f64; 3] = [0.97, 0.97, 0.97];
const CROSSING: [f64; 3] = [0.78, 0.80, 0.95];
const TEXTURE_CELL: f64 = 2.0;

fn mix(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

fn unit_hash(seed: u64, a: i64, b: i64) -> f64 {
    let h = mix(seed ^ mix(a as u64 ^ mix(b as u64 ^ 0x9e37_79b9_7f4a_7c15)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Procedural ground texture at a world point, constant over 2 m tiles.
pub fn background_color(texture_seed: u64, p: Point) -> [f64; 3] {
    let (i, j) = ((p.x / TEXTURE_CELL).floor() as i64, (p.y / TEXTURE_CELL).floor() as i64);
    let n = unit_hash(texture_seed, i, j);
    [0.22 + 0.12 * n, 0.40 + 0.14 * n, 0.18 + 0.08 * n]
}

/// Line width used to paint a marking class on `grid`.
pub fn marking_thickness(class: MapClass, grid: &BevGrid) -> f64 {
    let cell = grid.cell_x().min(grid.cell_y());
    match class {
        MapClass::Crossing => 2.0 * cell,
        MapClass::Divider | MapClass::Boundary => cell,
    }
}

fn rgb_overhead(scene: &Scene, grid: &BevGrid) -> Vec<[f64; 3]> {
    let mut px: Vec<[f64; 3]> = grid
        .iter_cells()
        .map(|c| {
            let p = grid.cell_center(c);
            let on_road = scene
                .roads
                .iter()
                .any(|r| point_to_polyline(p, &r.centerline) <= r.width / 2.0);
            if on_road {
                ASPHALT
            } else {
                background_color(scene.texture_seed, p)
            }
        })
        .collect();
    for (class, color) in [
        (MapClass::Crossing, CROSSING),
        (MapClass::Divider, DIVIDER),
        (MapClass::Boundary, BOUNDARY),
    ] {
        for el in scene.ground_truth.iter().filter(|e| e.class == class) {
            let mask = rasterize_polyline(el, grid, marking_thickness(class, grid)).expect("ground truth is valid");
            for (dst, &set) in px.iter_mut().zip(&mask.bits) {
                if set {
                    *dst = color;
                }
            }
        }
    }
    px
}

/// Occlusion-free top-down raster at grid resolution, `channels x H x W`.
/// Channel `k` carries color component `k mod 3`.
pub fn render_overhead(scene: &Scene, grid: &BevGrid, channels: usize) -> Tensor<f64> {
    let rgb = rgb_overhead(scene, grid);
    let hw = grid.cells();
    Tensor::from_fn([channels, grid.height_cells, grid.width_cells], |i| rgb[i % hw][(i / hw) % 3])
}

fn occluder_color(shade: f64) -> [f64; 3] {
    [0.45 + 0.35 * shade, 0.10 + 0.10 * shade, 0.12 + 0.25 * (1.0 - shade)]
}

/// Perspective renders: ground inside the grid takes the overhead raster
/// color, ground outside takes the procedural texture, rays hitting an
/// occluder first take its color and rays missing the ground show sky.
pub fn render_cameras(scene: &Scene, rig: &CameraRig, grid: &BevGrid) -> Vec<CameraImage> {
    let overhead = rgb_overhead(scene, grid);
    rig.cameras
        .iter()
        .map(|cam| {
            let [w, h] = cam.image_size;
            let mut img = Tensor::zeros([3, h, w]);
            let data = img.data_mut();
            for v in 0..h {
                for u in 0..w {
                    let dir = cam.ray([u as f64 + 0.5, v as f64 + 0.5]);
                    let color = match ground_hit(cam.position, dir) {
                        None => SKY,
                        Some((g, t)) => {
                            let blocker = scene
                                .occluders
                                .iter()
                                .filter_map(|o| o.ray_entry(cam.position, dir).map(|e| (e, o.shade)))
                                .filter(|&(e, _)| e < t)
                                .min_by(|a, b| a.0.total_cmp(&b.0));
                            match (blocker, grid.world_to_cell(g)) {
                                (Some((_, shade)), _) => occluder_color(shade),
                                (None, Some(c)) => overhead[grid.flat(c)],
                                (None, None) => background_color(scene.texture_seed, g),
                            }
                        }
                    };
                    for (ch, val) in color.iter().enumerate() {
                        data[(ch * h + v) * w + u] = *val;
                    }
                }
            }
            img
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EgoPose, MapElement};
    use crate::scenegen::{generate_scene, Occluder, SceneParams};

    fn empty(texture_seed: u64) -> Scene {
        Scene {
            seed: 0,
            ground_truth: vec![],
            roads: vec![],
            occluders: vec![],
            ego_pose: EgoPose::new(Point::default(), 0.0),
            texture_seed,
        }
    }

    fn pixel(img: &CameraImage, u: usize, v: usize) -> [f64; 3] {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        [0, 1, 2].map(|c| img.data()[(c * h + v) * w + u])
    }

    #[test]
    fn empty_scene_is_background() {
        let g = BevGrid::standard();
        let a = render_overhead(&empty(9), &g, 3);
        assert_eq!(a, render_overhead(&empty(9), &g, 3));
        assert_ne!(a, render_overhead(&empty(10), &g, 3));
        for c in g.iter_cells() {
            let want = background_color(9, g.cell_center(c));
            for ch in 0..3 {
                assert_eq!(a.data()[ch * g.cells() + g.flat(c)], want[ch]);
            }
        }
    }

    #[test]
    fn single_boundary_matches_rasterizer() {
        let g = BevGrid::standard();
        let mut s = empty(3);
        let el = MapElement::ground_truth(
            MapClass::Boundary,
            vec![Point::new(-28.0, -6.0), Point::new(4.0, 3.3), Point::new(29.0, 12.0)],
        )
        .unwrap();
        s.ground_truth.push(el.clone());
        let bg = render_overhead(&empty(3), &g, 3);
        let img = render_overhead(&s, &g, 3);
        let mask = rasterize_polyline(&el, &g, marking_thickness(MapClass::Boundary, &g)).unwrap();
        for c in g.iter_cells() {
            let i = g.flat(c);
            let differs = (0..3).any(|ch| img.data()[ch * g.cells() + i] != bg.data()[ch * g.cells() + i]);
            assert_eq!(differs, mask.get(c), "{c:?}");
        }
    }

    #[test]
    fn overhead_ignores_occluders() {
        let g = BevGrid::extended();
        let s = generate_scene(&SceneParams { seed: 5, ..Default::default() }).unwrap();
        assert!(!s.occluders.is_empty());
        assert_eq!(render_overhead(&s, &g, 3), render_overhead(&s.without_occluders(), &g, 3));
    }

    #[test]
    fn ground_pixels_match_overhead_without_occluders() {
        let g = BevGrid::standard();
        let rig = CameraRig::default();
        let s = generate_scene(&SceneParams { seed: 11, ..Default::default() })
            .unwrap()
            .without_occluders();
        let over = render_overhead(&s, &g, 3);
        let imgs = render_cameras(&s, &rig, &g);
        let mut checked = 0;
        for (cam, img) in rig.cameras.iter().zip(&imgs) {
            for v in 0..64 {
                for u in 0..96 {
                    let dir = cam.ray([u as f64 + 0.5, v as f64 + 0.5]);
                    let Some((hit, _)) = ground_hit(cam.position, dir) else { continue };
                    let Some(c) = g.world_to_cell(hit) else { continue };
                    let want = [0, 1, 2].map(|ch| over.data()[ch * g.cells() + g.flat(c)]);
                    assert_eq!(pixel(img, u, v), want);
                    checked += 1;
                }
            }
        }
        assert!(checked > 5000, "{checked}");
    }

    #[test]
    fn occluder_hides_crossing() {
        let g = BevGrid::standard();
        let rig = CameraRig::default();
        let mut s = empty(1);
        s.ground_truth.push(
            MapElement::ground_truth(MapClass::Crossing, vec![Point::new(15.0, -3.0), Point::new(15.0, 3.0)]).unwrap(),
        );
        let clear = render_cameras(&s, &rig, &g);
        let over = render_overhead(&s, &g, 3);
        let crossing_px = |img: &CameraImage| {
            (0..64)
                .flat_map(|v| (0..96).map(move |u| (u, v)))
                .filter(|&(u, v)| pixel(img, u, v) == CROSSING)
                .count()
        };
        assert!(crossing_px(&clear[0]) > 0);
        s.occluders.push(Occluder {
            min: Point::new(5.0, -5.0),
            max: Point::new(7.0, 5.0),
            height: 2.5,
            shade: 0.5,
        });
        let blocked = render_cameras(&s, &rig, &g);
        assert_eq!(crossing_px(&blocked[0]), 0);
        assert_eq!(over, render_overhead(&s, &g, 3));
    }

    #[test]
    fn top_row_is_sky_and_values_in_unit_range() {
        let g = BevGrid::standard();
        let s = generate_scene(&SceneParams { seed: 2, ..Default::default() }).unwrap();
        let imgs = render_cameras(&s, &CameraRig::default(), &g);
        for img in &imgs {
            for u in 0..96 {
                assert_eq!(pixel(img, u, 0), SKY);
            }
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(render_overhead(&s, &g, 3).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
