use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{render_cameras, render_overhead, CameraImage, CameraRig, Scene};
use crate::error::{Error, IoContext, Result};
use crate::geometry::{parse_polylines, write_polylines, BevGrid, MapElement};
use crate::tensor::{io, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// One paired example: overhead raster, camera images and vector targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    pub overhead: Tensor<f64>,
    pub cameras: Vec<CameraImage>,
    pub ground_truth: Vec<MapElement>,
}

impl Sample {
    pub fn render(id: usize, split: Split, scene: &Scene, rig: &CameraRig, grid: &BevGrid) -> Self {
        Self {
            id,
            split,
            seed: scene.seed,
            overhead: render_overhead(scene, grid, 3),
            cameras: render_cameras(scene, rig, grid),
            ground_truth: scene.ground_truth.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
}

/// Index of an exported dataset. Splits are disjoint seed ranges: seeds
/// below `val_from_seed` are training scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub grid: BevGrid,
    pub cameras: usize,
    pub val_from_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split_of(val_from_seed: u64, seed: u64) -> Split {
        if seed < val_from_seed {
            Split::Train
        } else {
            Split::Val
        }
    }

    fn seed_range(&self, split: Split) -> Option<(u64, u64)> {
        let seeds = self.entries.iter().filter(|e| e.split == split).map(|e| e.seed);
        let lo = seeds.clone().min()?;
        Some((lo, seeds.max()?))
    }

    /// `manifest.txt`: one `id split seed` line per scene.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {}\n", e.id, e.split, e.seed))
            .collect()
    }

    /// `dataset.txt`: grid, camera count and split seed ranges.
    pub fn info_text(&self) -> String {
        let g = &self.grid;
        let mut s = format!(
            "grid {} {} {} {}\ncameras {}\nval_from_seed {}\n",
            g.x_extent, g.y_extent, g.width_cells, g.height_cells, self.cameras, self.val_from_seed
        );
        for split in [Split::Train, Split::Val] {
            if let Some((lo, hi)) = self.seed_range(split) {
                s += &format!("split {split} {lo} {hi}\n");
            }
        }
        s
    }

    pub fn parse(manifest: &str, info: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut grid = None;
        let mut cameras = None;
        let mut val_from_seed = None;
        for (n, line) in info.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let field = |i: usize| f.get(i).copied().unwrap_or("");
            let err = || bad(format!("dataset.txt line {}: malformed {:?}", n + 1, line));
            match field(0) {
                "" | "split" => {}
                "grid" => {
                    let x = field(1).parse().map_err(|_| err())?;
                    let y = field(2).parse().map_err(|_| err())?;
                    let w = field(3).parse().map_err(|_| err())?;
                    let h = field(4).parse().map_err(|_| err())?;
                    grid = Some(BevGrid::new(x, y, w, h)?);
                }
                "cameras" => cameras = Some(field(1).parse::<usize>().map_err(|_| err())?),
                "val_from_seed" => val_from_seed = Some(field(1).parse::<u64>().map_err(|_| err())?),
                _ => return Err(err()),
            }
        }
        let entries = manifest
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, line)| {
                let err = || bad(format!("manifest.txt line {}: malformed {:?}", n + 1, line));
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(err());
                }
                Ok(ManifestEntry {
                    id: f[0].parse().map_err(|_| err())?,
                    split: f[1].parse()?,
                    seed: f[2].parse().map_err(|_| err())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: grid.ok_or_else(|| bad("dataset.txt: missing grid record".into()))?,
            cameras: cameras.ok_or_else(|| bad("dataset.txt: missing cameras record".into()))?,
            val_from_seed: val_from_seed.ok_or_else(|| bad("dataset.txt: missing val_from_seed record".into()))?,
            entries,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: BevGrid,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Renders scenes in memory, assigning ids in order.
    pub fn render(scenes: &[Scene], rig: &CameraRig, grid: &BevGrid, val_from_seed: u64) -> Self {
        let samples = scenes
            .iter()
            .enumerate()
            .map(|(id, s)| Sample::render(id, Manifest::split_of(val_from_seed, s.seed), s, rig, grid))
            .collect();
        Self { grid: *grid, samples }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

fn scene_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("scene_{id:05}"))
}

/// Writes `manifest.txt`, `dataset.txt` and one directory per scene holding
/// `overhead.ten`, `cam_<k>.ten`, `gt.txt` and `meta.txt`.
pub fn export_dataset(
    scenes: &[Scene],
    rig: &CameraRig,
    grid: &BevGrid,
    val_from_seed: u64,
    path: &Path,
) -> Result<Manifest> {
    rig.validate()?;
    fs::create_dir_all(path).at(path)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (id, scene) in scenes.iter().enumerate() {
        let sample = Sample::render(id, Manifest::split_of(val_from_seed, scene.seed), scene, rig, grid);
        let dir = scene_dir(path, id);
        let write = || -> Result<()> {
            fs::create_dir_all(&dir).at(&dir)?;
            io::write(&dir.join("overhead.ten"), &sample.overhead)?;
            for (k, img) in sample.cameras.iter().enumerate() {
                io::write(&dir.join(format!("cam_{k}.ten")), img)?;
            }
            let gt = dir.join("gt.txt");
            fs::write(&gt, write_polylines(&sample.ground_truth)).at(&gt)?;
            let meta = dir.join("meta.txt");
            fs::write(&meta, scene.meta_text()).at(&meta)
        };
        write().map_err(|e| Error::Scene {
            scene: id,
            source: Box::new(e),
        })?;
        entries.push(ManifestEntry {
            id,
            split: sample.split,
            seed: scene.seed,
        });
    }
    let manifest = Manifest {
        grid: *grid,
        cameras: rig.cameras.len(),
        val_from_seed,
        entries,
    };
    let mpath = path.join("manifest.txt");
    fs::write(&mpath, manifest.to_text()).at(&mpath)?;
    let ipath = path.join("dataset.txt");
    fs::write(&ipath, manifest.info_text()).at(&ipath)?;
    Ok(manifest)
}

fn load_sample(root: &Path, e: &ManifestEntry, cameras: usize) -> Result<Sample> {
    let dir = scene_dir(root, e.id);
    if !dir.is_dir() {
        return Err(Error::Missing(dir.display().to_string()));
    }
    let overhead = io::read(&dir.join("overhead.ten"))?;
    let cameras = (0..cameras)
        .map(|k| io::read(&dir.join(format!("cam_{k}.ten"))))
        .collect::<Result<Vec<_>>>()?;
    let gt = dir.join("gt.txt");
    let text = fs::read_to_string(&gt).at(&gt)?;
    let ground_truth = parse_polylines(&text).map_err(|err| Error::Format {
        path: gt.clone(),
        reason: err.to_string(),
    })?;
    Ok(Sample {
        id: e.id,
        split: e.split,
        seed: e.seed,
        overhead,
        cameras,
        ground_truth,
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = path.join("manifest.txt");
    let ipath = path.join("dataset.txt");
    let manifest = fs::read_to_string(&mpath).at(&mpath)?;
    let info = fs::read_to_string(&ipath).at(&ipath)?;
    Manifest::parse(&manifest, &info, &mpath)
}

/// Loads every scene listed in the manifest. Failures name the scene id.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(path)?;
    let samples = manifest
        .entries
        .iter()
        .map(|e| {
            load_sample(path, e, manifest.cameras).map_err(|err| Error::Scene {
                scene: e.id,
                source: Box::new(err),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        grid: manifest.grid,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneParams};

    fn scenes(n: u64) -> Vec<Scene> {
        (0..n)
            .map(|seed| generate_scene(&SceneParams { seed, ..Default::default() }).unwrap())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (rig, grid) = (CameraRig::default(), BevGrid::standard());
        let sc = scenes(3);
        let m = export_dataset(&sc, &rig, &grid, 2, dir.path()).unwrap();
        assert_eq!(m.entries.iter().filter(|e| e.split == Split::Val).count(), 1);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, Dataset::render(&sc, &rig, &grid, 2));
    }

    #[test]
    fn seed_range_split_is_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let sc: Vec<Scene> = (0..100)
            .map(|seed| generate_scene(&SceneParams { seed, occluder_count: [0, 0], ..Default::default() }).unwrap())
            .collect();
        let rig = CameraRig::ring(1, [8, 6], 4.0, 1.6, 0.1).unwrap();
        let m = export_dataset(&sc, &rig, &BevGrid::standard(), 80, dir.path()).unwrap();
        let seeds = |s: Split| m.entries.iter().filter(|e| e.split == s).map(|e| e.seed).collect::<Vec<_>>();
        let (train, val) = (seeds(Split::Train), seeds(Split::Val));
        assert_eq!((train.len(), val.len()), (80, 20));
        assert!(train.iter().all(|s| !val.contains(s)));
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        assert!(m.info_text().contains("split train 0 79\nsplit val 80 99"));
    }

    #[test]
    fn truncated_file_names_scene() {
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&scenes(2), &CameraRig::default(), &BevGrid::standard(), 1, dir.path()).unwrap();
        let f = dir.path().join("scene_00001").join("cam_2.ten");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 10]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Scene { scene: 1, source }) => {
                assert!(matches!(*source, Error::Truncated { .. }), "{source}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_scene_dir_names_scene() {
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&scenes(2), &CameraRig::default(), &BevGrid::standard(), 1, dir.path()).unwrap();
        fs::remove_dir_all(dir.path().join("scene_00000")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Scene { scene: 0, .. }), "{err}");
    }
}
