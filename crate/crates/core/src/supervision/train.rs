use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matching::{line_targets, match_queries, LineTarget, CLASS_PENALTY};
use super::{bev_alignment_loss, AffineAdapter, SupervisionConfig};
use crate::encoders::{
    DecoderOutput, EncoderConfig, FeatureMap, LiftingTable, MapDecoder, StudentEncoder, TeacherEncoder, BACKGROUND,
    NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, MapElement};
use crate::mapeval::{align_scenes, evaluate, EvalConfig, EvalResult, Roi};
use crate::scalar::Real;
use crate::scenegen::Sample;
use crate::tensor::{AdamW, AdamWConfig, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// The cosine horizon is always reset to `steps`.
    pub optimizer: AdamWConfig,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub class_penalty: f64,
    /// Assert the loss contracts at every step.
    pub check_contracts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            class_penalty: CLASS_PENALTY,
            check_contracts: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) || !(self.focal_alpha > 0.0) || self.focal_gamma < 0.0 {
            return Err(Error::Config("learning rate and focal alpha must be positive, gamma >= 0".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            horizon: self.steps,
            ..self.optimizer
        }
    }
}

/// Batch-mean loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_bev: f64,
    pub lambda: f64,
    /// Batch mean of the recorded per-sample totals.
    pub l_total: f64,
}

impl LossBreakdown {
    /// `step lr l_cls l_reg l_bev l_total`.
    pub fn line(&self) -> String {
        format!(
            "{} {:.9e} {:.17e} {:.17e} {:.17e} {:.17e}",
            self.step, self.lr, self.l_cls, self.l_reg, self.l_bev, self.l_total
        )
    }

    /// `|l_total - (l_cls + l_reg + lambda * l_bev)|`.
    pub fn additivity_error(&self) -> f64 {
        (self.l_total - (self.l_cls + self.l_reg + self.lambda * self.l_bev)).abs()
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_reg, self.l_bev, self.l_total].iter().all(|v| v.is_finite())
    }
}

/// Worst-case values of the per-step loss contracts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractReport {
    pub steps: usize,
    /// Adapter output equal to its input bit for bit before the first update.
    pub adapter_identity_at_init: Option<bool>,
    /// Largest absolute per-channel mean of any normalized map.
    pub worst_norm_mean: f64,
    pub worst_additivity: f64,
    /// No gradient reached the teacher features at any step.
    pub teacher_grads_absent: bool,
    pub teacher_checksum_unchanged: bool,
    /// The decoder consumed the raw student features at every step.
    pub decoder_input_raw: bool,
}

impl Default for ContractReport {
    fn default() -> Self {
        Self {
            steps: 0,
            adapter_identity_at_init: None,
            worst_norm_mean: 0.0,
            worst_additivity: 0.0,
            teacher_grads_absent: true,
            teacher_checksum_unchanged: true,
            decoder_input_raw: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudentRun<T> {
    pub student: StudentEncoder<T>,
    pub decoder: MapDecoder<T>,
    pub adapter: AffineAdapter<T>,
    pub log: Vec<LossBreakdown>,
    pub teacher_invocations: usize,
    pub contracts: Option<ContractReport>,
}

#[derive(Debug, Clone)]
pub struct TeacherRun<T> {
    pub teacher: TeacherEncoder<T>,
    pub decoder: MapDecoder<T>,
    pub log: Vec<LossBreakdown>,
    pub val: EvalResult,
}

struct Prepared<T> {
    images: Vec<Tensor<T>>,
    overhead: Tensor<T>,
    targets: Vec<LineTarget<T>>,
}

fn prepare<T: Real>(samples: &[&Sample], grid: &BevGrid, enc: &EncoderConfig) -> Vec<Prepared<T>> {
    samples
        .iter()
        .map(|s| Prepared {
            images: s.cameras.iter().map(Tensor::cast).collect(),
            overhead: s.overhead.cast(),
            targets: line_targets(&s.ground_truth, grid, enc.points_per_element, enc.queries),
        })
        .collect()
}

/// Classification and regression terms for one decoder output:
/// focal loss over all queries with unmatched ones labelled background,
/// and the mean line L1 over matched queries (zero when nothing matches).
pub fn set_loss<T: Real>(
    tape: &mut Tape<T>,
    decoder: &MapDecoder<T>,
    out: &DecoderOutput,
    targets: &[LineTarget<T>],
    tc: &TrainConfig,
) -> Result<(Var, Var)> {
    let assign = match_queries(
        tape.value(out.logits),
        tape.value(out.points),
        targets,
        decoder.grid(),
        tc.class_penalty,
    );
    let classes: Vec<usize> = assign
        .iter()
        .map(|a| a.map_or(BACKGROUND, |t| targets[t].class.id()))
        .collect();
    let cls = tape.focal_loss(out.logits, &classes, &[tc.focal_alpha; NUM_CLASSES], tc.focal_gamma)?;
    let mut terms = Vec::new();
    for (q, a) in assign.iter().enumerate() {
        if let Some(t) = a {
            let p = decoder.query_points(tape, out, q)?;
            terms.push(tape.l1_line_loss(p, &targets[*t].points)?);
        }
    }
    let reg = if terms.is_empty() {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        let s = tape.add_all(&terms)?;
        tape.scale(s, 1.0 / terms.len() as f64)?
    };
    Ok((cls, reg))
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            component: op.to_string(),
        },
        other => other,
    }
}

struct GradSum<T> {
    sums: Vec<Vec<T>>,
}

impl<T: Real> GradSum<T> {
    fn new(params: &ParamSet<T>) -> Self {
        Self {
            sums: params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect(),
        }
    }

    fn add(&mut self, grads: &[Option<&[T]>]) {
        for (s, g) in self.sums.iter_mut().zip(grads) {
            if let Some(g) = g {
                for (a, &b) in s.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
        }
    }

    fn apply(&mut self, opt: &mut AdamW<T>, params: &mut ParamSet<T>, n: usize) -> Result<()> {
        let inv = T::one() / T::of(n as f64);
        for s in &mut self.sums {
            for v in s.iter_mut() {
                *v *= inv;
            }
        }
        let grads: Vec<Option<&[T]>> = self.sums.iter().map(|s| Some(s.as_slice())).collect();
        opt.step(params, &grads)?;
        for s in &mut self.sums {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(())
    }
}

/// Epoch-shuffled batch indices.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C_4E55),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn max_channel_mean<T: Real>(t: &Tensor<T>) -> f64 {
    let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    (0..c)
        .map(|ci| (t.data()[ci * hw..(ci + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64).abs())
        .fold(0.0, f64::max)
}

/// Trains a student encoder and decoder on camera images. Supervised
/// variants add the alignment term against cached features of the frozen
/// teacher; the baseline never touches the teacher. `on_step` receives
/// every step's breakdown.
#[allow(clippy::too_many_arguments)]
pub fn train_student<T: Real>(
    train: &[&Sample],
    teacher: Option<&TeacherEncoder<T>>,
    table: &LiftingTable,
    enc: &EncoderConfig,
    sup: &SupervisionConfig,
    tc: &TrainConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&LossBreakdown) -> Result<()>,
) -> Result<StudentRun<T>> {
    tc.validate()?;
    sup.validate()?;
    if train.is_empty() {
        return Err(Error::Missing("training split is empty".into()));
    }
    let grid = table.grid;
    let mut student = StudentEncoder::new(enc, grid, seed)?;
    let mut decoder = MapDecoder::new(enc, grid, seed, "student_head")?;
    let mut adapter = AffineAdapter::new(enc.channels);
    let data = prepare::<T>(train, &grid, enc);

    let mut teacher_invocations = 0;
    let (aerial, teacher_checksum) = if sup.supervised() {
        let t = teacher.ok_or_else(|| Error::Missing("teacher for a supervised variant".into()))?;
        if !t.is_frozen() {
            return Err(Error::TeacherNotFrozen);
        }
        let maps = data
            .iter()
            .map(|d| {
                teacher_invocations += 1;
                t.forward(&d.overhead)
            })
            .collect::<Result<Vec<FeatureMap<T>>>>()?;
        (maps, Some(t.params.checksum()))
    } else {
        (Vec::new(), None)
    };

    let adamw = tc.adamw();
    let mut opt_s = AdamW::new(adamw, &student.params);
    let mut opt_d = AdamW::new(adamw, &decoder.params);
    let mut opt_a = AdamW::new(adamw, &adapter.params);
    let mut g_s = GradSum::new(&student.params);
    let mut g_d = GradSum::new(&decoder.params);
    let mut g_a = GradSum::new(&adapter.params);
    let mut batcher = Batcher::new(data.len(), seed);
    let mut report = tc.check_contracts.then(ContractReport::default);
    let lambda = sup.effective_lambda();
    let mut log = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let lr = opt_s.current_lr();
        let batch = batcher.next(tc.batch_size);
        let mut sums = [0.0f64; 4];
        for &i in &batch {
            let d = &data[i];
            let mut tape = Tape::new();
            let sb = student.bind(&mut tape);
            let db = decoder.bind(&mut tape);
            let ab = adapter.bind(&mut tape);
            let imgs: Vec<Var> = d.images.iter().map(|im| tape.constant(im.clone())).collect();
            let fwd = (|| -> Result<_> {
                let so = student.forward_var(&mut tape, &sb, &imgs, table)?;
                let dec_in = so.features.var;
                let out = decoder.forward_var(&mut tape, &db, dec_in)?;
                let (cls, reg) = set_loss(&mut tape, &decoder, &out, &d.targets, tc)?;
                let align = if sup.supervised() {
                    Some(bev_alignment_loss(&mut tape, &so.features, &aerial[i], Some(ab), sup)?)
                } else {
                    None
                };
                let total = match align {
                    Some(a) => {
                        let w = tape.scale(a.loss, lambda)?;
                        tape.add_all(&[cls, reg, w])?
                    }
                    None => tape.add(cls, reg)?,
                };
                Ok((so, dec_in, cls, reg, align, total))
            })();
            let (so, dec_in, cls, reg, align, total) = fwd.map_err(diverged(step))?;
            tape.backward(total).map_err(diverged(step))?;
            let bev = align.map_or(0.0, |a| tape.value(a.loss).item().as_f64());
            for (acc, v) in sums.iter_mut().zip([
                tape.value(cls).item().as_f64(),
                tape.value(reg).item().as_f64(),
                bev,
                tape.value(total).item().as_f64(),
            ]) {
                *acc += v;
            }
            if let Some(r) = report.as_mut() {
                let raw = tape.value(so.features.var);
                r.decoder_input_raw &= dec_in == so.features.var && tape.value(dec_in).checksum() == raw.checksum();
                if let Some(a) = align {
                    r.teacher_grads_absent &= tape.grad(a.aerial).is_none();
                    if let Some([c, t]) = a.normalized {
                        r.worst_norm_mean = r
                            .worst_norm_mean
                            .max(max_channel_mean(tape.value(c)))
                            .max(max_channel_mean(tape.value(t)));
                    }
                    if step == 0 && sup.use_adapter() {
                        let adapted = tape.value(a.adapted.expect("adapter in loss path"));
                        let same = adapted.to_bytes() == raw.to_bytes();
                        r.adapter_identity_at_init = Some(r.adapter_identity_at_init.unwrap_or(true) && same);
                    }
                }
            }
            g_s.add(&sb.grads(&tape));
            g_d.add(&db.grads(&tape));
            g_a.add(&ab.iter().map(|&v| tape.grad(v)).collect::<Vec<_>>());
        }
        let n = batch.len();
        g_s.apply(&mut opt_s, &mut student.params, n)?;
        g_d.apply(&mut opt_d, &mut decoder.params, n)?;
        g_a.apply(&mut opt_a, &mut adapter.params, n)?;
        let nb = n as f64;
        let b = LossBreakdown {
            step,
            lr,
            l_cls: sums[0] / nb,
            l_reg: sums[1] / nb,
            l_bev: sums[2] / nb,
            lambda,
            l_total: sums[3] / nb,
        };
        if !b.is_finite() {
            return Err(Error::Diverged {
                step,
                component: "l_total".into(),
            });
        }
        if let Some(r) = report.as_mut() {
            r.steps += 1;
            r.worst_additivity = r.worst_additivity.max(b.additivity_error());
        }
        on_step(&b)?;
        log.push(b);
    }
    if let (Some(r), Some(t), Some(before)) = (report.as_mut(), teacher, teacher_checksum) {
        r.teacher_checksum_unchanged = t.params.checksum() == before;
    }
    Ok(StudentRun {
        student,
        decoder,
        adapter,
        log,
        teacher_invocations,
        contracts: report,
    })
}

/// Trains the overhead teacher with its own decoder head against ground
/// truth (no alignment term), freezes the encoder and scores the
/// validation split.
pub fn pretrain_teacher<T: Real>(
    train: &[&Sample],
    val: &[&Sample],
    enc: &EncoderConfig,
    roi: Roi,
    tc: &TrainConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&LossBreakdown) -> Result<()>,
) -> Result<TeacherRun<T>> {
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Missing("training split is empty".into()));
    }
    let grid = roi.grid();
    let mut teacher = TeacherEncoder::new(enc, grid, seed)?;
    let mut decoder = MapDecoder::new(enc, grid, seed, "teacher_head")?;
    let data = prepare::<T>(train, &grid, enc);
    let adamw = tc.adamw();
    let mut opt_t = AdamW::new(adamw, &teacher.params);
    let mut opt_d = AdamW::new(adamw, &decoder.params);
    let mut g_t = GradSum::new(&teacher.params);
    let mut g_d = GradSum::new(&decoder.params);
    let mut batcher = Batcher::new(data.len(), seed);
    let mut log = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let lr = opt_t.current_lr();
        let batch = batcher.next(tc.batch_size);
        let mut sums = [0.0f64; 3];
        for &i in &batch {
            let d = &data[i];
            let mut tape = Tape::new();
            let tb = teacher.bind(&mut tape);
            let db = decoder.bind(&mut tape);
            let x = tape.constant(d.overhead.clone());
            let fwd = (|| -> Result<_> {
                let f = teacher.forward_var(&mut tape, &tb, x)?;
                let out = decoder.forward_var(&mut tape, &db, f.var)?;
                let (cls, reg) = set_loss(&mut tape, &decoder, &out, &d.targets, tc)?;
                let total = tape.add(cls, reg)?;
                Ok((cls, reg, total))
            })();
            let (cls, reg, total) = fwd.map_err(diverged(step))?;
            tape.backward(total).map_err(diverged(step))?;
            for (acc, v) in sums.iter_mut().zip([cls, reg, total]) {
                *acc += tape.value(v).item().as_f64();
            }
            g_t.add(&tb.grads(&tape));
            g_d.add(&db.grads(&tape));
        }
        let n = batch.len();
        g_t.apply(&mut opt_t, &mut teacher.params, n)?;
        g_d.apply(&mut opt_d, &mut decoder.params, n)?;
        let nb = n as f64;
        let b = LossBreakdown {
            step,
            lr,
            l_cls: sums[0] / nb,
            l_reg: sums[1] / nb,
            l_bev: 0.0,
            lambda: 0.0,
            l_total: sums[2] / nb,
        };
        if !b.is_finite() {
            return Err(Error::Diverged {
                step,
                component: "l_total".into(),
            });
        }
        on_step(&b)?;
        log.push(b);
    }
    teacher.freeze();
    let preds = predict_teacher(&teacher, &decoder, val)?;
    let val = evaluate_samples(preds, val, roi)?;
    Ok(TeacherRun {
        teacher,
        decoder,
        log,
        val,
    })
}

/// Decoded maps for each sample's camera images.
pub fn predict_student<T: Real>(
    student: &StudentEncoder<T>,
    decoder: &MapDecoder<T>,
    samples: &[&Sample],
    table: &LiftingTable,
) -> Result<Vec<(usize, Vec<MapElement>)>> {
    samples
        .iter()
        .map(|s| {
            let imgs: Vec<Tensor<T>> = s.cameras.iter().map(Tensor::cast).collect();
            let f = student.forward(&imgs, table)?;
            Ok((s.id, decoder.decode_map(&f)?))
        })
        .collect()
}

/// Decoded maps for each sample's overhead raster.
pub fn predict_teacher<T: Real>(
    teacher: &TeacherEncoder<T>,
    decoder: &MapDecoder<T>,
    samples: &[&Sample],
) -> Result<Vec<(usize, Vec<MapElement>)>> {
    samples
        .iter()
        .map(|s| {
            let f = teacher.forward(&s.overhead.cast())?;
            Ok((s.id, decoder.decode_map(&f)?))
        })
        .collect()
}

/// Scores predictions against the samples' ground truth.
pub fn evaluate_samples(preds: Vec<(usize, Vec<MapElement>)>, samples: &[&Sample], roi: Roi) -> Result<EvalResult> {
    let gts = samples.iter().map(|s| (s.id, s.ground_truth.clone())).collect();
    evaluate(&align_scenes(preds, gts)?, &EvalConfig::new(roi))
}
