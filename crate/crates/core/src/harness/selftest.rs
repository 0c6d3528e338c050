//! Oracle and property suites plus a contract-checked smoke run.

use std::fs;
use std::path::Path;

use super::config::RunConfig;
use super::run::{split, StudyInputs};
use crate::error::{IoContext, Result};
use crate::scenegen::Split;
use crate::supervision::{evaluate_samples, predict_student, train_student, SupervisionConfig, Variant};
use crate::verify::{autodiff_suite, cka_invariance_suite, mapeval_property_suite, metric_oracle_suite, oracle_suite, Check};

/// Smoke configuration for the contract run under `root`.
pub fn smoke_config(root: &Path, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::smoke(10, 50);
    cfg.output = root.to_path_buf();
    cfg.train.steps = steps;
    cfg.train.check_contracts = true;
    cfg
}

/// Trains the full method for `steps` steps with every loss contract
/// checked at every step, plus a short baseline run, and writes the smoke
/// evaluation to `root/selftest/`.
pub fn contract_smoke(root: &Path, steps: usize) -> Result<Vec<Check>> {
    let cfg = smoke_config(root, steps);
    let inputs = StudyInputs::prepare(&cfg)?;
    let train = split(&inputs.data, Split::Train);
    let val = split(&inputs.data, Split::Val);
    let sup = SupervisionConfig::new(Variant::NormAdapter, cfg.supervision.lambda_bev);
    let run = train_student::<f64>(
        &train,
        Some(&inputs.teacher.teacher),
        &inputs.table,
        &cfg.encoder,
        &sup,
        &cfg.train,
        cfg.seed,
        &mut |_| Ok(()),
    )?;
    let c = run.contracts.clone().unwrap_or_default();
    let mut base_cfg = cfg.train.clone();
    base_cfg.steps = 5;
    let base = train_student::<f64>(
        &train,
        None,
        &inputs.table,
        &cfg.encoder,
        &SupervisionConfig::new(Variant::Baseline, 1.0),
        &base_cfg,
        cfg.seed,
        &mut |_| Ok(()),
    )?;
    let dir = root.join("selftest");
    fs::create_dir_all(&dir).at(&dir)?;
    evaluate_samples(predict_student(&run.student, &run.decoder, &val, &inputs.table)?, &val, cfg.roi)?.write(&dir)?;
    Ok(vec![
        Check::flag("contract/steps_checked", c.steps, c.steps == steps),
        Check::flag("contract/adapter_identity_at_init", 1, c.adapter_identity_at_init == Some(true)),
        Check::new("contract/normalized_channel_mean", c.steps, c.worst_norm_mean, 1e-10),
        Check::new("contract/loss_additivity", c.steps, c.worst_additivity, 1e-12),
        Check::flag("contract/teacher_gradients_absent", c.steps, c.teacher_grads_absent),
        Check::flag("contract/teacher_parameters_unchanged", 1, c.teacher_checksum_unchanged),
        Check::flag("contract/decoder_reads_raw_features", c.steps, c.decoder_input_raw),
        Check::flag("contract/baseline_never_calls_teacher", 1, base.teacher_invocations == 0),
    ])
}

/// Every suite in a fixed order. `smoke_steps = 0` skips the training run.
pub fn selftest(root: &Path, smoke_steps: usize) -> Result<Vec<Check>> {
    let mut checks = autodiff_suite();
    checks.extend(oracle_suite());
    checks.extend(metric_oracle_suite());
    checks.extend(cka_invariance_suite(50));
    checks.extend(mapeval_property_suite(100));
    if smoke_steps > 0 {
        checks.extend(contract_smoke(root, smoke_steps)?);
    }
    Ok(checks)
}

/// One check per line.
pub fn checks_text(checks: &[Check]) -> String {
    checks.iter().map(|c| format!("{c}\n")).collect()
}
