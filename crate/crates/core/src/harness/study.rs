//! Multi-run studies and the tables built from their run records.

use std::fmt::Write as _;

use super::config::RunConfig;
use super::plot::category_plot;
use super::run::{run_many, RunRecord, RunSpec, StudyInputs};
use crate::analysis::Summary;
use crate::error::Result;
use crate::geometry::MapClass;
use crate::mapeval::Roi;
use crate::supervision::Variant;

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn spread(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// AP values are printed in points (x100).
fn pts(v: f64) -> String {
    if v.is_finite() {
        format!("{:.2}", 100.0 * v)
    } else {
        "n/a".into()
    }
}

fn signed(v: f64) -> String {
    if v.is_finite() {
        format!("{:+.2}", 100.0 * v)
    } else {
        "n/a".into()
    }
}

/// Seed-averaged scores of one model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub maps: Vec<f64>,
    pub class_ap: [f64; 3],
}

impl Aggregate {
    pub fn of(records: &[&RunRecord]) -> Self {
        let class_ap = std::array::from_fn(|c| mean(&records.iter().map(|r| r.eval.class_ap[c]).collect::<Vec<_>>()));
        Self {
            seeds: records.iter().map(|r| r.seed).collect(),
            maps: records.iter().map(|r| r.eval.map).collect(),
            class_ap,
        }
    }

    pub fn mean(&self) -> f64 {
        mean(&self.maps)
    }

    pub fn spread(&self) -> f64 {
        spread(&self.maps)
    }
}

fn select<'a>(records: &'a [RunRecord], roi: Roi, variant: Variant, lambda: Option<f64>) -> Vec<&'a RunRecord> {
    let mut v: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.roi == roi && r.variant == variant && lambda.map_or(true, |l| r.lambda == l))
        .collect();
    v.sort_by_key(|r| r.seed);
    v
}

/// Baseline versus the full method in one RoI, per class and overall.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub roi: Roi,
    pub lambda: f64,
    pub baseline: Aggregate,
    pub cvs: Aggregate,
}

impl ComparisonTable {
    pub fn from_records(roi: Roi, lambda: f64, records: &[RunRecord]) -> Self {
        Self {
            roi,
            lambda,
            baseline: Aggregate::of(&select(records, roi, Variant::Baseline, None)),
            cvs: Aggregate::of(&select(records, roi, Variant::NormAdapter, Some(lambda))),
        }
    }

    pub fn delta(&self) -> f64 {
        self.cvs.mean() - self.baseline.mean()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| {} RoI | {} | {} | {} | mAP | seeds |\n|---|---|---|---|---|---|\n",
            self.roi,
            MapClass::Crossing.name(),
            MapClass::Divider.name(),
            MapClass::Boundary.name()
        );
        for (name, a) in [("baseline", &self.baseline), ("cvs (norm_adapter)", &self.cvs)] {
            writeln!(
                s,
                "| {name} | {} | {} | {} | {} ± {} | {} |",
                pts(a.class_ap[0]),
                pts(a.class_ap[1]),
                pts(a.class_ap[2]),
                pts(a.mean()),
                pts(a.spread()),
                a.seeds.len()
            )
            .expect("string write");
        }
        let d: Vec<String> = (0..3).map(|c| signed(self.cvs.class_ap[c] - self.baseline.class_ap[c])).collect();
        writeln!(s, "| Δ | {} | {} | {} | {} | |", d[0], d[1], d[2], signed(self.delta())).expect("string write");
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub agg: Aggregate,
}

/// The four training variants in one RoI.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub roi: Roi,
    pub lambda: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn from_records(roi: Roi, lambda: f64, records: &[RunRecord]) -> Self {
        let rows = Variant::ALL
            .into_iter()
            .map(|variant| {
                let l = (variant != Variant::Baseline).then_some(lambda);
                AblationRow {
                    variant,
                    agg: Aggregate::of(&select(records, roi, variant, l)),
                }
            })
            .collect();
        Self { roi, lambda, rows }
    }

    pub fn mean_of(&self, v: Variant) -> f64 {
        self.rows.iter().find(|r| r.variant == v).map_or(f64::NAN, |r| r.agg.mean())
    }

    pub fn to_markdown(&self) -> String {
        let base = self.mean_of(Variant::Baseline);
        let mut s = format!("| variant ({} RoI) | mAP | Δ vs baseline | seeds |\n|---|---|---|---|\n", self.roi);
        for r in &self.rows {
            writeln!(
                s,
                "| {} | {} ± {} | {} | {} |",
                r.variant,
                pts(r.agg.mean()),
                pts(r.agg.spread()),
                signed(r.agg.mean() - base),
                r.agg.seeds.len()
            )
            .expect("string write");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub agg: Aggregate,
}

/// Full method across alignment weights; `lambda = 0` included.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub roi: Roi,
    pub tuned: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn from_records(roi: Roi, tuned: f64, records: &[RunRecord]) -> Self {
        let mut lambdas: Vec<f64> = select(records, roi, Variant::NormAdapter, None).iter().map(|r| r.lambda).collect();
        lambdas.sort_by(f64::total_cmp);
        lambdas.dedup();
        let rows = lambdas
            .into_iter()
            .map(|lambda| SweepRow {
                lambda,
                agg: Aggregate::of(&select(records, roi, Variant::NormAdapter, Some(lambda))),
            })
            .collect();
        Self { roi, tuned, rows }
    }

    fn mean_at(&self, lambda: f64) -> f64 {
        self.rows.iter().find(|r| r.lambda == lambda).map_or(f64::NAN, |r| r.agg.mean())
    }

    /// Spread of the seed means over the `lambda > 0` points.
    pub fn variation(&self) -> f64 {
        let m: Vec<f64> = self.rows.iter().filter(|r| r.lambda > 0.0).map(|r| r.agg.mean()).collect();
        if m.is_empty() {
            return f64::NAN;
        }
        m.iter().copied().fold(f64::NEG_INFINITY, f64::max) - m.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Gain at the tuned weight over `lambda = 0`.
    pub fn gain(&self) -> f64 {
        self.mean_at(self.tuned) - self.mean_at(0.0)
    }

    /// `lambda mAP spread seeds` rows.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# lambda mAP spread seeds\n");
        for r in &self.rows {
            writeln!(s, "{} {:.17e} {:.17e} {}", r.lambda, r.agg.mean(), r.agg.spread(), r.agg.seeds.len()).expect("string write");
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let pts: Vec<(String, f64, f64)> = self.rows.iter().map(|r| (format!("{}", r.lambda), r.agg.mean(), r.agg.spread())).collect();
        category_plot(&format!("{} RoI: mAP vs lambda_bev", self.roi), "lambda_bev", "mAP", &pts)
    }
}

/// Per-sample similarity to the teacher, pooled over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRowSummary {
    pub variant: Variant,
    /// Median per-sample CKA of each seed.
    pub seed_medians: Vec<f64>,
    pub cka: Option<Summary>,
    pub cka_centered: Option<Summary>,
    pub r2: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    pub roi: Roi,
    pub lambda: f64,
    pub rows: Vec<SimilarityRowSummary>,
}

impl SimilarityTable {
    pub fn from_records(roi: Roi, lambda: f64, records: &[RunRecord]) -> Self {
        let rows = Variant::ALL
            .into_iter()
            .map(|variant| {
                let l = (variant != Variant::Baseline).then_some(lambda);
                let runs = select(records, roi, variant, l);
                let pooled = |f: fn(&crate::analysis::SimilarityRow) -> f64| {
                    let v: Vec<f64> = runs.iter().flat_map(|r| r.similarity.rows.iter().map(f)).collect();
                    Summary::of(&v).ok()
                };
                SimilarityRowSummary {
                    variant,
                    seed_medians: runs.iter().filter_map(|r| r.similarity.cka().ok().map(|s| s.median)).collect(),
                    cka: pooled(|r| r.cka),
                    cka_centered: pooled(|r| r.cka_centered),
                    r2: pooled(|r| r.r2),
                }
            })
            .collect();
        Self { roi, lambda, rows }
    }

    pub fn median_cka(&self, v: Variant) -> f64 {
        self.rows
            .iter()
            .find(|r| r.variant == v)
            .and_then(|r| r.cka)
            .map_or(f64::NAN, |s| s.median)
    }

    pub fn to_markdown(&self) -> String {
        let fmt = |s: Option<Summary>| s.map_or("n/a".into(), |s| format!("{:.3} [{:.3}, {:.3}]", s.median, s.q1, s.q3));
        let mut s = format!(
            "| variant ({} RoI) | CKA median [q1, q3] | centered CKA | R² | per-seed CKA medians |\n|---|---|---|---|---|\n",
            self.roi
        );
        for r in &self.rows {
            let seeds: Vec<String> = r.seed_medians.iter().map(|v| format!("{v:.3}")).collect();
            writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                r.variant,
                fmt(r.cka),
                fmt(r.cka_centered),
                fmt(r.r2),
                seeds.join(", ")
            )
            .expect("string write");
        }
        s
    }
}

/// Records of a study plus the runs that failed.
#[derive(Debug)]
pub struct StudyRuns {
    pub records: Vec<RunRecord>,
    pub failures: Vec<(RunSpec, String)>,
}

impl StudyRuns {
    pub fn partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

pub fn seeds_from(first: u64, n: usize) -> Vec<u64> {
    (first..first + n as u64).collect()
}

/// Trains every (variant, lambda, seed) in `specs` for `cfg.roi`, after
/// preparing the corpus and the frozen teacher once.
pub fn run_specs(cfg: &RunConfig, specs: &[RunSpec], jobs: usize, reuse: bool) -> Result<StudyRuns> {
    let inputs = StudyInputs::prepare(cfg)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (spec, r) in specs.iter().zip(run_many(cfg, &inputs, specs, jobs, reuse)) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((*spec, e.to_string())),
        }
    }
    Ok(StudyRuns { records, failures })
}

pub fn comparison_specs(cfg: &RunConfig, seeds: &[u64]) -> Vec<RunSpec> {
    let lambda = cfg.supervision.lambda_bev;
    [Variant::Baseline, Variant::NormAdapter]
        .into_iter()
        .flat_map(|variant| seeds.iter().map(move |&seed| RunSpec { variant, lambda, seed }))
        .collect()
}

pub fn ablation_specs(cfg: &RunConfig, seeds: &[u64]) -> Vec<RunSpec> {
    let lambda = cfg.supervision.lambda_bev;
    Variant::ALL
        .into_iter()
        .flat_map(|variant| seeds.iter().map(move |&seed| RunSpec { variant, lambda, seed }))
        .collect()
}

/// Sweep runs plus the baseline runs the `lambda = 0` point is checked against.
pub fn sweep_specs(cfg: &RunConfig, seeds: &[u64], lambdas: &[f64]) -> Vec<RunSpec> {
    let mut v: Vec<RunSpec> = lambdas
        .iter()
        .flat_map(|&lambda| {
            seeds.iter().map(move |&seed| RunSpec {
                variant: Variant::NormAdapter,
                lambda,
                seed,
            })
        })
        .collect();
    v.extend(seeds.iter().map(|&seed| RunSpec {
        variant: Variant::Baseline,
        lambda: cfg.supervision.lambda_bev,
        seed,
    }));
    v
}

/// Default sweep: 0 and {0.25, 0.5, 1, 2, 4} times the tuned weight.
pub fn default_lambdas(tuned: f64) -> Vec<f64> {
    std::iter::once(0.0).chain([0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|m| m * tuned)).collect()
}

/// Seeds whose `lambda = 0` eval file differs from the baseline's.
pub fn zero_lambda_mismatches(roi: Roi, records: &[RunRecord]) -> Vec<u64> {
    let base = select(records, roi, Variant::Baseline, None);
    select(records, roi, Variant::NormAdapter, Some(0.0))
        .into_iter()
        .filter(|z| !base.iter().any(|b| b.seed == z.seed && b.eval_checksum == z.eval_checksum))
        .map(|z| z.seed)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{SimilarityReport, SimilarityRow};
    use crate::mapeval::EvalResult;
    use std::path::PathBuf;

    fn record(variant: Variant, lambda: f64, seed: u64, map: f64) -> RunRecord {
        RunRecord {
            name: String::new(),
            dir: PathBuf::new(),
            roi: Roi::Extended,
            variant,
            lambda,
            seed,
            steps: 1,
            config_key: String::new(),
            teacher_key: String::new(),
            code_version: String::new(),
            teacher_invocations: 0,
            student_checksum: String::new(),
            decoder_checksum: String::new(),
            adapter_checksum: String::new(),
            eval_checksum: format!("{map}"),
            similarity_checksum: String::new(),
            wall_seconds: 0.0,
            contracts: Vec::new(),
            eval: EvalResult {
                roi: Roi::Extended,
                thresholds: vec![1.0],
                ap: [vec![0.0], vec![map], vec![2.0 * map]],
                class_ap: [0.0, map, 2.0 * map],
                map,
            },
            similarity: SimilarityReport {
                variant: variant.name().into(),
                rows: vec![SimilarityRow {
                    scene: 0,
                    cka: map,
                    cka_centered: map,
                    r2: map,
                }],
            },
        }
    }

    fn corpus() -> Vec<RunRecord> {
        let mut v = Vec::new();
        for seed in 0..3 {
            v.push(record(Variant::Baseline, 1.0, seed, 0.2 + 0.01 * seed as f64));
            v.push(record(Variant::Raw, 1.0, seed, 0.25));
            v.push(record(Variant::NormOnly, 1.0, seed, 0.3));
            v.push(record(Variant::NormAdapter, 1.0, seed, 0.32));
            v.push(record(Variant::NormAdapter, 0.5, seed, 0.31));
            v.push(record(Variant::NormAdapter, 0.0, seed, 0.2 + 0.01 * seed as f64));
        }
        v
    }

    #[test]
    fn ablation_has_four_rows_and_zero_baseline_delta() {
        let t = AblationTable::from_records(Roi::Extended, 1.0, &corpus());
        assert_eq!(t.rows.len(), 4);
        assert!((t.mean_of(Variant::Baseline) - 0.21).abs() < 1e-12);
        let md = t.to_markdown();
        assert_eq!(md.lines().count(), 6);
        assert!(md.lines().nth(2).unwrap().contains("| +0.00 |"));
    }

    #[test]
    fn comparison_delta() {
        let t = ComparisonTable::from_records(Roi::Extended, 1.0, &corpus());
        assert!((t.delta() - 0.11).abs() < 1e-12);
        assert_eq!(t.cvs.seeds, vec![0, 1, 2]);
        assert!(t.to_markdown().contains("| Δ |"));
    }

    #[test]
    fn sweep_sensitivity() {
        let t = SweepTable::from_records(Roi::Extended, 1.0, &corpus());
        assert_eq!(t.rows.len(), 3);
        assert!((t.variation() - 0.01).abs() < 1e-12);
        assert!((t.gain() - 0.11).abs() < 1e-12);
        assert_eq!(t.to_svg().matches("<circle").count(), 3);
        assert!(zero_lambda_mismatches(Roi::Extended, &corpus()).is_empty());
    }

    #[test]
    fn similarity_medians() {
        let t = SimilarityTable::from_records(Roi::Extended, 1.0, &corpus());
        assert!((t.median_cka(Variant::NormAdapter) - 0.32).abs() < 1e-12);
        assert_eq!(t.rows[0].seed_medians.len(), 3);
    }

    #[test]
    fn spread_is_sample_std() {
        assert!((spread(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        assert_eq!(spread(&[4.0]), 0.0);
        assert_eq!(default_lambdas(2.0), vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0]);
    }
}
