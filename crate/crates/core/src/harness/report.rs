//! Consolidated markdown report built only from files on disk.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::RunRecord;
use super::study::{AblationTable, ComparisonTable, SimilarityTable, SweepTable};
use crate::error::{IoContext, Result};
use crate::mapeval::{EvalResult, Roi};
use crate::supervision::Variant;

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(path)
        .at(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

/// Loads every complete run record under `root/runs`. Directories without
/// a readable record or whose files no longer match their checksums are
/// returned as missing.
pub fn collect_records(root: &Path) -> Result<(Vec<RunRecord>, Vec<String>)> {
    let mut records = Vec::new();
    let mut missing = Vec::new();
    for roi_dir in sorted_dirs(&root.join("runs"))? {
        for dir in sorted_dirs(&roi_dir)? {
            match RunRecord::read(&dir).and_then(|r| r.verify_files().map(|_| r)) {
                Ok(r) => records.push(r),
                Err(e) => missing.push(format!("{}: {e}", rel(root, &dir))),
            }
        }
    }
    Ok((records, missing))
}

/// Report text for the runs under `root`, with `lambda` as the tuned
/// alignment weight. Writes the lambda plots next to the report.
pub fn build_report(root: &Path, lambda: f64) -> Result<String> {
    let (records, mut missing) = collect_records(root)?;
    let mut s = String::from("# Cross-view supervision study\n\n");
    writeln!(s, "Tuned alignment weight: {lambda}. AP values in points (x100), mean ± sample std over seeds.\n").expect("write");

    s += "## Teachers\n\n| RoI | teacher key | val mAP |\n|---|---|---|\n";
    for dir in sorted_dirs(&root.join("teachers"))? {
        let name = dir.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        let roi = Roi::ALL.into_iter().find(|r| name.starts_with(r.name()));
        match roi.map(|r| EvalResult::read(&dir, r)) {
            Some(Ok(e)) => writeln!(s, "| {} | {} | {:.2} |", e.roi, name, 100.0 * e.map).expect("write"),
            _ => missing.push(format!("{}: no teacher evaluation", rel(root, &dir))),
        }
    }
    s.push('\n');

    for roi in Roi::ALL {
        let here: Vec<RunRecord> = records.iter().filter(|r| r.roi == roi).cloned().collect();
        if here.is_empty() {
            continue;
        }
        writeln!(s, "## {roi} RoI\n").expect("write");
        let has = |v: Variant, l: Option<f64>| here.iter().any(|r| r.variant == v && l.map_or(true, |l| r.lambda == l));
        if has(Variant::Baseline, None) && has(Variant::NormAdapter, Some(lambda)) {
            s += "### Baseline versus cross-view supervision\n\n";
            s += &ComparisonTable::from_records(roi, lambda, &here).to_markdown();
            s.push('\n');
        }
        if has(Variant::Raw, Some(lambda)) || has(Variant::NormOnly, Some(lambda)) {
            s += "### Normalization ablation\n\n";
            s += &AblationTable::from_records(roi, lambda, &here).to_markdown();
            s.push('\n');
        }
        let sweep = SweepTable::from_records(roi, lambda, &here);
        if sweep.rows.len() > 1 {
            let plot = root.join(format!("sweep_{roi}.svg"));
            fs::write(&plot, sweep.to_svg()).at(&plot)?;
            s += "### Sensitivity to the alignment weight\n\n| lambda | mAP | seeds |\n|---|---|---|\n";
            for r in &sweep.rows {
                writeln!(s, "| {} | {:.2} ± {:.2} | {} |", r.lambda, 100.0 * r.agg.mean(), 100.0 * r.agg.spread(), r.agg.seeds.len())
                    .expect("write");
            }
            writeln!(
                s,
                "\nmax - min over lambda > 0: {:.2}; gain of tuned lambda over lambda = 0: {:.2}\n\n![lambda sweep](sweep_{roi}.svg)\n",
                100.0 * sweep.variation(),
                100.0 * sweep.gain()
            )
            .expect("write");
        }
        s += "### Feature similarity to the teacher (validation split)\n\n";
        s += &SimilarityTable::from_records(roi, lambda, &here).to_markdown();
        s.push('\n');

        let seed = here.iter().map(|r| r.seed).min().unwrap_or(0);
        let pick = |v: Variant, l: Option<f64>| {
            here.iter()
                .find(|r| r.seed == seed && r.variant == v && l.map_or(true, |l| r.lambda == l))
        };
        let shown: Vec<&RunRecord> = [pick(Variant::Baseline, None), pick(Variant::NormAdapter, Some(lambda))]
            .into_iter()
            .flatten()
            .collect();
        if !shown.is_empty() {
            writeln!(
                s,
                "### Channel-mean features, first validation scene, seed {seed}\n\nEach student image shares its intensity scale with the teacher image beside it.\n"
            )
            .expect("write");
            s += "| run | teacher | student |\n|---|---|---|\n";
            for r in shown {
                let d = rel(root, &r.dir);
                writeln!(s, "| {} | ![]({d}/viz_teacher.svg) | ![]({d}/viz_student.svg) |", r.name).expect("write");
            }
            s.push('\n');
        }
    }

    s += "## Sources\n\n| run | eval file sha256 | teacher invocations | steps |\n|---|---|---|---|\n";
    for r in &records {
        writeln!(
            s,
            "| {} | {} | {} | {} |",
            rel(root, &r.dir),
            &r.eval_checksum[..16],
            r.teacher_invocations,
            r.steps
        )
        .expect("write");
    }
    if !missing.is_empty() {
        s += "\n## Missing artifacts\n\n";
        for m in &missing {
            writeln!(s, "- {m}").expect("write");
        }
    }
    Ok(s)
}

/// Builds the report and writes `root/report.md`.
pub fn write_report(root: &Path, lambda: f64) -> Result<PathBuf> {
    let text = build_report(root, lambda)?;
    let path = root.join("report.md");
    fs::write(&path, text).at(&path)?;
    Ok(path)
}
