use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::plot::gray_svg;
use crate::analysis::{channel_mean_viz, shared_scale, similarity_report, SimilarityReport};
use crate::encoders::{load_checkpoint, save_checkpoint, Checkpoint, LiftingTable, MapDecoder, StudentEncoder, TeacherEncoder};
use crate::error::{Error, IoContext, Result};
use crate::mapeval::{EvalResult, Roi};
use crate::scenegen::{export_dataset, generate_scene, load_dataset, Dataset, Sample, Split};
use crate::supervision::{
    evaluate_samples, predict_student, pretrain_teacher, train_student, ContractReport, LossBreakdown, Variant,
};

/// Short form of a hex key used in directory names.
pub fn short_key(key: &str) -> &str {
    &key[..16]
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `dir` through a sibling temporary directory renamed into place
/// on success, so a partially written artifact is never picked up.
fn build_atomically(dir: &Path, build: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir_all(&tmp).at(&tmp)?;
    build(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::rename(&tmp, dir).at(dir)
}

pub fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.join("data").join(format!("{}_{}", cfg.roi, short_key(&cfg.dataset_key())))
}

/// Generates and exports the corpus unless an export with the same key
/// exists, then loads it from disk.
pub fn ensure_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let dir = dataset_dir(cfg);
    if !dir.join("manifest.txt").is_file() {
        let scenes = cfg
            .data
            .seeds()
            .map(|seed| generate_scene(&cfg.scene.with_seed(seed)))
            .collect::<Result<Vec<_>>>()?;
        build_atomically(&dir, |tmp| {
            export_dataset(&scenes, &cfg.rig, &cfg.roi.grid(), cfg.data.val_from_seed(), tmp)?;
            cfg.save(&tmp.join("config.toml"))
        })
        .map_err(|e| e.context(format!("exporting dataset {}", dir.display())))?;
    }
    load_dataset(&dir).map_err(|e| e.context(format!("loading dataset {}", dir.display())))
}

pub fn split(data: &Dataset, which: Split) -> Vec<&Sample> {
    data.split(which).collect()
}

/// A frozen teacher with its own decoder head and validation score.
#[derive(Debug, Clone)]
pub struct TeacherArtifacts {
    pub key: String,
    pub dir: PathBuf,
    pub teacher: TeacherEncoder<f64>,
    pub decoder: MapDecoder<f64>,
    pub val: EvalResult,
}

pub fn teacher_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.join("teachers").join(format!("{}_{}", cfg.roi, short_key(&cfg.teacher_key())))
}

fn write_log(path: &Path, log: &[LossBreakdown]) -> Result<()> {
    let mut s = String::from("# step lr l_cls l_reg l_bev l_total\n");
    for b in log {
        s += &b.line();
        s.push('\n');
    }
    fs::write(path, s).at(path)
}

/// Pretrains the teacher unless one with the same key is cached, and
/// returns it frozen.
pub fn ensure_teacher(cfg: &RunConfig, data: &Dataset) -> Result<TeacherArtifacts> {
    let key = cfg.teacher_key();
    let dir = teacher_dir(cfg);
    let grid = cfg.roi.grid();
    if !dir.join(format!("eval_{}.txt", cfg.roi)).is_file() {
        let run = pretrain_teacher::<f64>(
            &split(data, Split::Train),
            &split(data, Split::Val),
            &cfg.encoder,
            cfg.roi,
            &cfg.teacher_train,
            cfg.teacher_seed,
            &mut |_| Ok(()),
        )?;
        build_atomically(&dir, |tmp| {
            let mut info = Checkpoint {
                step: cfg.teacher_train.steps,
                frozen: true,
                ..Checkpoint::default()
            };
            info.meta.insert("key".into(), key.clone());
            save_checkpoint(&tmp.join("encoder"), &run.teacher.params, &info)?;
            info.frozen = false;
            save_checkpoint(&tmp.join("decoder"), &run.decoder.params, &info)?;
            write_log(&tmp.join("steps.log"), &run.log)?;
            run.val.write(tmp)?;
            cfg.save(&tmp.join("config.toml"))
        })
        .map_err(|e| e.context(format!("writing teacher {}", dir.display())))?;
    }
    let mut teacher = TeacherEncoder::new(&cfg.encoder, grid, cfg.teacher_seed)?;
    let mut decoder = MapDecoder::new(&cfg.encoder, grid, cfg.teacher_seed, "teacher_head")?;
    let ctx = |e: Error| e.context(format!("loading teacher {}", dir.display()));
    let info = load_checkpoint(&dir.join("encoder"), &mut teacher.params).map_err(ctx)?;
    if !info.frozen || info.meta.get("key") != Some(&key) {
        return Err(ctx(Error::Format {
            path: dir.join("encoder"),
            reason: "cached teacher is not frozen or has a different key".into(),
        }));
    }
    load_checkpoint(&dir.join("decoder"), &mut decoder.params).map_err(ctx)?;
    let val = EvalResult::read(&dir, cfg.roi).map_err(ctx)?;
    Ok(TeacherArtifacts {
        key,
        dir,
        teacher,
        decoder,
        val,
    })
}

/// Everything a finished student run left on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub name: String,
    pub dir: PathBuf,
    pub roi: Roi,
    pub variant: Variant,
    pub lambda: f64,
    pub seed: u64,
    pub steps: usize,
    pub config_key: String,
    pub teacher_key: String,
    pub code_version: String,
    /// Teacher forward passes made while training the student.
    pub teacher_invocations: usize,
    pub student_checksum: String,
    pub decoder_checksum: String,
    pub adapter_checksum: String,
    pub eval_checksum: String,
    pub similarity_checksum: String,
    pub wall_seconds: f64,
    /// `name value` lines of the contract report, when checked.
    pub contracts: Vec<(String, String)>,
    pub eval: EvalResult,
    pub similarity: SimilarityReport,
}

fn contract_lines(r: &ContractReport) -> Vec<(String, String)> {
    vec![
        ("steps".into(), r.steps.to_string()),
        (
            "adapter_identity_at_init".into(),
            r.adapter_identity_at_init.map_or("n/a".into(), |v| v.to_string()),
        ),
        ("worst_norm_mean".into(), format!("{:e}", r.worst_norm_mean)),
        ("worst_additivity".into(), format!("{:e}", r.worst_additivity)),
        ("teacher_grads_absent".into(), r.teacher_grads_absent.to_string()),
        ("teacher_checksum_unchanged".into(), r.teacher_checksum_unchanged.to_string()),
        ("decoder_input_raw".into(), r.decoder_input_raw.to_string()),
    ]
}

impl RunRecord {
    /// `key value` lines; written last, so its presence marks completion.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} {v}").expect("string write");
        kv("name", &self.name);
        kv("roi", &self.roi);
        kv("variant", &self.variant);
        kv("lambda", &self.lambda);
        kv("seed", &self.seed);
        kv("steps", &self.steps);
        kv("config_key", &self.config_key);
        kv("teacher_key", &self.teacher_key);
        kv("code_version", &self.code_version);
        kv("teacher_invocations", &self.teacher_invocations);
        kv("student_checksum", &self.student_checksum);
        kv("decoder_checksum", &self.decoder_checksum);
        kv("adapter_checksum", &self.adapter_checksum);
        kv("eval_checksum", &self.eval_checksum);
        kv("similarity_checksum", &self.similarity_checksum);
        kv("wall_seconds", &format!("{:.3}", self.wall_seconds));
        for (k, v) in &self.contracts {
            writeln!(s, "contract {k} {v}").expect("string write");
        }
        s
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("record.txt");
        let text = fs::read_to_string(&path).at(&path)?;
        let bad = |reason: String| Error::Format {
            path: path.clone(),
            reason,
        };
        let mut map = std::collections::BTreeMap::new();
        let mut contracts = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.splitn(3, ' ').collect();
            match f.as_slice() {
                ["contract", k, v] => contracts.push((k.to_string(), v.to_string())),
                [k, v] => {
                    map.insert(k.to_string(), v.to_string());
                }
                _ => return Err(bad(format!("malformed line {line:?}"))),
            }
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let int = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let roi: Roi = get("roi")?.parse()?;
        let variant: Variant = get("variant")?.parse()?;
        let eval = EvalResult::read(dir, roi)?;
        let similarity = SimilarityReport::read(dir, variant.name())?;
        Ok(Self {
            name: get("name")?,
            dir: dir.to_path_buf(),
            roi,
            variant,
            lambda: num("lambda")?,
            seed: int("seed")?,
            steps: int("steps")? as usize,
            config_key: get("config_key")?,
            teacher_key: get("teacher_key")?,
            code_version: get("code_version")?,
            teacher_invocations: int("teacher_invocations")? as usize,
            student_checksum: get("student_checksum")?,
            decoder_checksum: get("decoder_checksum")?,
            adapter_checksum: get("adapter_checksum")?,
            eval_checksum: get("eval_checksum")?,
            similarity_checksum: get("similarity_checksum")?,
            wall_seconds: num("wall_seconds")?,
            contracts,
            eval,
            similarity,
        })
    }

    /// Re-hashes the eval and similarity files against the record.
    pub fn verify_files(&self) -> Result<()> {
        for (file, want) in [
            (format!("eval_{}.txt", self.roi), &self.eval_checksum),
            (format!("similarity_{}.txt", self.variant), &self.similarity_checksum),
        ] {
            let path = self.dir.join(&file);
            if &file_checksum(&path)? != want {
                return Err(Error::Format {
                    path,
                    reason: "checksum differs from record.txt".into(),
                });
            }
        }
        Ok(())
    }
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.join("runs").join(cfg.roi.name()).join(cfg.run_name())
}

/// Shared inputs of the student runs of one study.
pub struct StudyInputs {
    pub data: Dataset,
    pub table: LiftingTable,
    pub teacher: TeacherArtifacts,
}

impl StudyInputs {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        let data = ensure_dataset(cfg)?;
        let table = LiftingTable::build(&cfg.rig, &cfg.roi.grid())?;
        let teacher = ensure_teacher(cfg, &data)?;
        Ok(Self { data, table, teacher })
    }
}

/// Trains one student variant and writes its run directory. With `reuse`,
/// an existing complete record with the same config key is returned as is.
pub fn train_run(cfg: &RunConfig, inputs: &StudyInputs, reuse: bool) -> Result<RunRecord> {
    let dir = run_dir(cfg);
    let key = cfg.run_key();
    if reuse && dir.join("record.txt").is_file() {
        if let Ok(r) = RunRecord::read(&dir) {
            if r.config_key == key && r.teacher_key == inputs.teacher.key && r.verify_files().is_ok() {
                return Ok(r);
            }
        }
    }
    train_fresh(cfg, inputs, &dir, key).map_err(|e| e.context(format!("run {}", dir.display())))
}

fn train_fresh(cfg: &RunConfig, inputs: &StudyInputs, dir: &Path, key: String) -> Result<RunRecord> {
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::create_dir_all(dir).at(dir)?;
    cfg.save(&dir.join("config.toml"))?;
    let start = Instant::now();
    let train = split(&inputs.data, Split::Train);
    let val = split(&inputs.data, Split::Val);
    let log_path = dir.join("steps.log");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).at(&log_path)?);
    writeln!(log, "# step lr l_cls l_reg l_bev l_total").at(&log_path)?;
    let teacher = cfg.supervision.supervised().then_some(&inputs.teacher.teacher);
    let run = train_student::<f64>(
        &train,
        teacher,
        &inputs.table,
        &cfg.encoder,
        &cfg.supervision,
        &cfg.train,
        cfg.seed,
        &mut |b| writeln!(log, "{}", b.line()).at(&log_path),
    )?;
    log.flush().at(&log_path)?;
    drop(log);

    let info = Checkpoint {
        step: cfg.train.steps,
        ..Checkpoint::default()
    };
    save_checkpoint(&dir.join("student"), &run.student.params, &info)?;
    save_checkpoint(&dir.join("decoder"), &run.decoder.params, &info)?;
    save_checkpoint(&dir.join("adapter"), &run.adapter.params, &info)?;

    let preds = predict_student(&run.student, &run.decoder, &val, &inputs.table)?;
    let eval = evaluate_samples(preds, &val, cfg.roi)?;
    eval.write(dir)?;
    let variant = cfg.supervision.variant;
    let similarity = similarity_report(variant.name(), &inputs.teacher.teacher, &run.student, &inputs.table, &val)?;
    similarity.write(dir)?;
    write_visualizations(dir, &inputs.teacher.teacher, &run.student, &inputs.table, val[0])?;

    let record = RunRecord {
        name: cfg.run_name(),
        dir: dir.to_path_buf(),
        roi: cfg.roi,
        variant,
        lambda: cfg.supervision.lambda_bev,
        seed: cfg.seed,
        steps: cfg.train.steps,
        config_key: key,
        teacher_key: inputs.teacher.key.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        teacher_invocations: run.teacher_invocations,
        student_checksum: run.student.params.checksum(),
        decoder_checksum: run.decoder.params.checksum(),
        adapter_checksum: run.adapter.params.checksum(),
        eval_checksum: file_checksum(&dir.join(format!("eval_{}.txt", cfg.roi)))?,
        similarity_checksum: file_checksum(&dir.join(format!("similarity_{variant}.txt")))?,
        wall_seconds: start.elapsed().as_secs_f64(),
        contracts: run.contracts.as_ref().map(contract_lines).unwrap_or_default(),
        eval,
        similarity,
    };
    let path = dir.join("record.txt");
    fs::write(&path, record.to_text()).at(&path)?;
    Ok(record)
}

/// Channel-mean images of teacher and student features for one sample,
/// on a shared intensity scale.
fn write_visualizations(
    dir: &Path,
    teacher: &TeacherEncoder<f64>,
    student: &StudentEncoder<f64>,
    table: &LiftingTable,
    sample: &Sample,
) -> Result<()> {
    let ft = teacher.forward(&sample.overhead)?;
    let fs_ = student.forward(&sample.cameras, table)?;
    let scale = shared_scale(&[&ft, &fs_]);
    for (name, map) in [("teacher", &ft), ("student", &fs_)] {
        let img = channel_mean_viz(map, Some(scale));
        img.write_pgm(&dir.join(format!("viz_{name}.pgm")))?;
        let path = dir.join(format!("viz_{name}.svg"));
        fs::write(&path, gray_svg(&img, 6)).at(&path)?;
    }
    Ok(())
}

/// One student run of a study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub variant: Variant,
    pub lambda: f64,
    pub seed: u64,
}

/// Runs every spec on up to `jobs` worker threads. Each job owns its run
/// directory; results come back in spec order.
pub fn run_many(cfg: &RunConfig, inputs: &StudyInputs, specs: &[RunSpec], jobs: usize, reuse: bool) -> Vec<Result<RunRecord>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..specs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, specs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(s) = specs.get(i) else { break };
                let r = train_run(&cfg.for_run(s.variant, s.lambda, s.seed), inputs, reuse);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every spec ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(root: &Path) -> RunConfig {
        let mut c = RunConfig::smoke(5, 3);
        c.output = root.to_path_buf();
        c.train.batch_size = 2;
        c.teacher_train.batch_size = 2;
        c
    }

    #[test]
    fn dataset_and_teacher_are_cached() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let a = StudyInputs::prepare(&cfg).unwrap();
        assert_eq!(a.data.samples.len(), 5);
        assert!(a.teacher.teacher.is_frozen());
        let stamp = fs::metadata(teacher_dir(&cfg).join("encoder/manifest.txt")).unwrap().modified().unwrap();
        let b = StudyInputs::prepare(&cfg).unwrap();
        assert_eq!(a.teacher.teacher.params.checksum(), b.teacher.teacher.params.checksum());
        let again = fs::metadata(teacher_dir(&cfg).join("encoder/manifest.txt")).unwrap().modified().unwrap();
        assert_eq!(stamp, again);
        let mut other = cfg.clone();
        other.teacher_seed = 1;
        assert_ne!(teacher_dir(&cfg), teacher_dir(&other));
    }

    #[test]
    fn run_record_round_trips_and_reuses() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let inputs = StudyInputs::prepare(&cfg).unwrap();
        let specs = [
            RunSpec {
                variant: Variant::Baseline,
                lambda: 1.0,
                seed: 0,
            },
            RunSpec {
                variant: Variant::NormAdapter,
                lambda: 1.0,
                seed: 0,
            },
        ];
        let runs: Vec<RunRecord> = run_many(&cfg, &inputs, &specs, 2, true).into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(runs[0].teacher_invocations, 0);
        assert_eq!(runs[1].teacher_invocations, inputs.data.split(Split::Train).count());
        let back = RunRecord::read(&runs[1].dir).unwrap();
        assert_eq!(back.eval, runs[1].eval);
        assert_eq!(back.student_checksum, runs[1].student_checksum);
        back.verify_files().unwrap();
        let again = train_run(&cfg.for_run(Variant::NormAdapter, 1.0, 0), &inputs, true).unwrap();
        assert_eq!(again.wall_seconds, back.wall_seconds);
        let eval_before = fs::read(runs[1].dir.join("eval_extended.txt")).unwrap();
        let fresh = train_run(&cfg.for_run(Variant::NormAdapter, 1.0, 0), &inputs, false).unwrap();
        assert_eq!(fs::read(fresh.dir.join("eval_extended.txt")).unwrap(), eval_before);
        assert!(runs[0].dir.join("viz_student.pgm").is_file());
    }
}
