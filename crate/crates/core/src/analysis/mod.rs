//! Feature-space similarity between teacher and student BEV maps, and
//! channel-mean visualizations.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoders::{FeatureMap, LiftingTable, StudentEncoder, TeacherEncoder};
use crate::error::{Error, IoContext, Result};
use crate::scalar::Real;
use crate::scenegen::Sample;
use crate::tensor::Tensor;

/// Diagonal ridge added to the normal equations of [`r_squared`].
pub const RIDGE: f64 = 1e-8;

/// Row-major `N x C` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let m = Self { rows, cols, data };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 1 || self.data.len() != self.rows * self.cols {
            return Err(Error::shape("FeatureMatrix", "N >= 2, C >= 1, N*C values", (self.rows, self.cols, self.data.len())));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite feature value".into()));
        }
        Ok(())
    }

    /// One row per cell, one column per channel, from a `[C, H, W]` map.
    pub fn from_map<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("FeatureMatrix::from_map", "[C, H, W]", s));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let d = t.data();
        Self::new(hw, c, (0..hw * c).map(|i| d[(i % c) * hw + i / c].as_f64()).collect())
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn centered(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.cols {
            let mean = (0..self.rows).map(|r| self.at(r, c)).sum::<f64>() / self.rows as f64;
            for r in 0..self.rows {
                out.data[r * self.cols + c] -= mean;
            }
        }
        out
    }

    /// `self^T other`, shape `C_self x C_other`.
    fn cross(&self, other: &Self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols * other.cols];
        for r in 0..self.rows {
            let a = &self.data[r * self.cols..(r + 1) * self.cols];
            let b = &other.data[r * other.cols..(r + 1) * other.cols];
            for (i, &ai) in a.iter().enumerate() {
                for (j, &bj) in b.iter().enumerate() {
                    out[i * other.cols + j] += ai * bj;
                }
            }
        }
        out
    }
}

fn frobenius_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// `||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F)`, optionally after removing
/// column means from both matrices.
pub fn linear_cka(x: &FeatureMatrix, y: &FeatureMatrix, center: bool) -> Result<f64> {
    x.validate()?;
    y.validate()?;
    if x.rows != y.rows {
        return Err(Error::shape("linear_cka", x.rows, y.rows));
    }
    let (x, y) = if center { (x.centered(), y.centered()) } else { (x.clone(), y.clone()) };
    let xy = frobenius_sq(&x.cross(&y));
    let den = frobenius_sq(&x.cross(&x)).sqrt() * frobenius_sq(&y.cross(&y)).sqrt();
    if !(den > 0.0) {
        return Err(Error::Degenerate("CKA of a zero matrix".into()));
    }
    Ok(xy / den)
}

/// In-place Cholesky factor of a symmetric positive-definite `n x n` matrix.
/// Pivots below `n * eps * max_diag` count as numerically singular.
fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    if !max_diag.is_finite() {
        return Err(Error::Degenerate("student feature Gram matrix overflows".into()));
    }
    let floor = n as f64 * f64::EPSILON * max_diag;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > floor) {
            return Err(Error::Degenerate("student features are rank deficient beyond the ridge".into()));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Solves `L L^T x = b` given the factor from [`cholesky`].
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

/// Fraction of teacher variance explained by the least-squares linear map
/// from student features: `W = (Y^T Y + ridge I)^-1 Y^T X`, then
/// `1 - SS_res / SS_tot` per teacher channel with `SS_tot` about the
/// channel mean, averaged over channels with nonzero variance.
pub fn r_squared(x_teacher: &FeatureMatrix, y_student: &FeatureMatrix) -> Result<f64> {
    x_teacher.validate()?;
    y_student.validate()?;
    let (x, y) = (x_teacher, y_student);
    if x.rows != y.rows {
        return Err(Error::shape("r_squared", x.rows, y.rows));
    }
    if y.rows <= y.cols {
        return Err(Error::shape("r_squared", "N > C", (y.rows, y.cols)));
    }
    let c = y.cols;
    let mut gram = y.cross(y);
    for i in 0..c {
        gram[i * c + i] += RIDGE;
    }
    cholesky(&mut gram, c)?;
    let yx = y.cross(x);
    let mut total = 0.0;
    let mut used = 0;
    for j in 0..x.cols {
        let mut w: Vec<f64> = (0..c).map(|i| yx[i * x.cols + j]).collect();
        cholesky_solve(&gram, c, &mut w);
        let mean = (0..x.rows).map(|r| x.at(r, j)).sum::<f64>() / x.rows as f64;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for r in 0..x.rows {
            let pred: f64 = (0..c).map(|i| y.at(r, i) * w[i]).sum();
            ss_res += (x.at(r, j) - pred).powi(2);
            ss_tot += (x.at(r, j) - mean).powi(2);
        }
        if ss_tot > 0.0 {
            total += 1.0 - ss_res / ss_tot;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("every teacher channel is constant".into()));
    }
    Ok(total / used as f64)
}

/// Similarity of one validation sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityRow {
    pub scene: usize,
    pub cka: f64,
    pub cka_centered: f64,
    pub r2: f64,
}

impl SimilarityRow {
    pub fn compute(scene: usize, teacher: &FeatureMatrix, student: &FeatureMatrix) -> Result<Self> {
        Ok(Self {
            scene,
            cka: linear_cka(teacher, student, false)?,
            cka_centered: linear_cka(teacher, student, true)?,
            r2: r_squared(teacher, student)?,
        })
    }
}

/// Median and interquartile range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Degenerate("summary of an empty distribution".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
        })
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.q1..=self.q3).contains(&v)
    }
}

/// Per-sample similarity rows of one student variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub variant: String,
    pub rows: Vec<SimilarityRow>,
}

impl SimilarityReport {
    pub fn cka(&self) -> Result<Summary> {
        Summary::of(&self.rows.iter().map(|r| r.cka).collect::<Vec<_>>())
    }

    pub fn cka_centered(&self) -> Result<Summary> {
        Summary::of(&self.rows.iter().map(|r| r.cka_centered).collect::<Vec<_>>())
    }

    pub fn r2(&self) -> Result<Summary> {
        Summary::of(&self.rows.iter().map(|r| r.r2).collect::<Vec<_>>())
    }

    /// `scene_id cka cka_centered r2` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            writeln!(s, "{} {:.17e} {:.17e} {:.17e}", r.scene, r.cka, r.cka_centered, r.r2).expect("string write");
        }
        s
    }

    pub fn parse(variant: &str, text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split_whitespace().collect();
                let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(format!("bad line {l:?}")));
                Ok(SimilarityRow {
                    scene: f[0].parse().map_err(|_| bad(format!("bad scene id in {l:?}")))?,
                    cka: num(1)?,
                    cka_centered: num(2)?,
                    r2: num(3)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            variant: variant.to_string(),
            rows,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("similarity_{}.txt", self.variant));
        std::fs::write(&path, self.to_text()).at(&path)
    }

    pub fn read(dir: &Path, variant: &str) -> Result<Self> {
        let path = dir.join(format!("similarity_{variant}.txt"));
        let text = std::fs::read_to_string(&path).at(&path)?;
        Self::parse(variant, &text, &path)
    }
}

/// Compares the teacher's features with a student's raw (pre-adapter)
/// features on every sample.
pub fn similarity_report<T: Real>(
    variant: &str,
    teacher: &TeacherEncoder<T>,
    student: &StudentEncoder<T>,
    table: &LiftingTable,
    samples: &[&Sample],
) -> Result<SimilarityReport> {
    let rows = samples
        .iter()
        .map(|s| {
            let x = FeatureMatrix::from_map(&teacher.forward(&s.overhead.cast())?.tensor)?;
            let imgs: Vec<Tensor<T>> = s.cameras.iter().map(Tensor::cast).collect();
            let y = FeatureMatrix::from_map(&student.forward(&imgs, table)?.tensor)?;
            SimilarityRow::compute(s.id, &x, &y)
        })
        .collect::<Result<_>>()?;
    Ok(SimilarityReport {
        variant: variant.to_string(),
        rows,
    })
}

/// Grayscale raster with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    /// Binary portable graymap, 8 bits per pixel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).at(path)
    }
}

/// Mean over channels of each cell of a `[C, H, W]` map.
pub fn channel_mean<T: Real>(f: &FeatureMap<T>) -> Vec<f64> {
    let s = f.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let d = f.tensor.data();
    (0..hw)
        .map(|i| (0..c).map(|ci| d[ci * hw + i].as_f64()).sum::<f64>() / c as f64)
        .collect()
}

/// Joint minimum and maximum of the channel means of several maps.
pub fn shared_scale<T: Real>(maps: &[&FeatureMap<T>]) -> (f64, f64) {
    maps.iter()
        .flat_map(|m| channel_mean(m))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Channel-mean activation per cell mapped affinely onto `[0, 1]` using
/// `scale` (or the map's own range). A degenerate range renders mid-gray.
pub fn channel_mean_viz<T: Real>(f: &FeatureMap<T>, scale: Option<(f64, f64)>) -> GrayImage {
    let means = channel_mean(f);
    let (lo, hi) = scale.unwrap_or_else(|| shared_scale(&[f]));
    let pixels = means
        .iter()
        .map(|&m| if hi > lo { ((m - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 })
        .collect();
    GrayImage {
        width: f.shape()[2],
        height: f.shape()[1],
        pixels,
    }
}
