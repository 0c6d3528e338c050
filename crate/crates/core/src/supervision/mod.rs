//! Cross-view feature alignment objective, set matching and training loops.

mod matching;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMap, FeatureVar, Producer};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub use matching::{hungarian, line_targets, match_queries, LineTarget, CLASS_PENALTY};
pub use train::{
    evaluate_samples, pretrain_teacher, predict_student, predict_teacher, set_loss, train_student, ContractReport, LossBreakdown,
    StudentRun, TeacherRun, TrainConfig,
};

/// Variance floor used by the channel normalization inside the loss.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Raw,
    NormOnly,
    NormAdapter,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Raw, Variant::NormOnly, Variant::NormAdapter];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Raw => "raw",
            Variant::NormOnly => "norm_only",
            Variant::NormAdapter => "norm_adapter",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisionConfig {
    pub variant: Variant,
    pub lambda_bev: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::NormAdapter,
            lambda_bev: 1.0,
        }
    }
}

impl SupervisionConfig {
    pub fn new(variant: Variant, lambda_bev: f64) -> Self {
        Self { variant, lambda_bev }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_bev >= 0.0 && self.lambda_bev.is_finite()) {
            return Err(Error::Config(format!("lambda_bev must be finite and >= 0, got {}", self.lambda_bev)));
        }
        Ok(())
    }

    pub fn normalize(&self) -> bool {
        matches!(self.variant, Variant::NormOnly | Variant::NormAdapter)
    }

    pub fn use_adapter(&self) -> bool {
        self.variant == Variant::NormAdapter
    }

    /// Whether the alignment term is computed at all.
    pub fn supervised(&self) -> bool {
        self.variant != Variant::Baseline
    }

    /// Weight applied to the alignment term; zero for the baseline.
    pub fn effective_lambda(&self) -> f64 {
        if self.supervised() {
            self.lambda_bev
        } else {
            0.0
        }
    }
}

/// Per-channel scale and shift applied to student features inside the
/// alignment loss only.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineAdapter<T> {
    pub params: ParamSet<T>,
}

impl<T: Real> AffineAdapter<T> {
    pub fn new(channels: usize) -> Self {
        let mut params = ParamSet::new();
        params.add("adapter.gamma", Tensor::full([channels], T::one()));
        params.add("adapter.beta", Tensor::zeros([channels]));
        Self { params }
    }

    pub fn gamma(&self) -> &Tensor<T> {
        self.params.get(0)
    }

    pub fn beta(&self) -> &Tensor<T> {
        self.params.get(1)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> [Var; 2] {
        [tape.param(&self.params, 0), tape.param(&self.params, 1)]
    }
}

/// Variables produced by the alignment loss.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub loss: Var,
    /// The teacher features as a gradient-free constant.
    pub aerial: Var,
    /// Adapter output when the adapter is in the loss path.
    pub adapted: Option<Var>,
    /// Normalized student and teacher maps when normalization is on.
    pub normalized: Option<[Var; 2]>,
}

/// `mse(norm(adapter(f_cam)), norm(f_aerial))`, with the adapter and the
/// normalization switched per variant. The teacher map enters as a
/// constant and must come from a frozen teacher.
pub fn bev_alignment_loss<T: Real>(
    tape: &mut Tape<T>,
    f_cam: &FeatureVar,
    f_aerial: &FeatureMap<T>,
    adapter: Option<[Var; 2]>,
    cfg: &SupervisionConfig,
) -> Result<Alignment> {
    if f_aerial.producer != Producer::Teacher || !f_aerial.frozen {
        return Err(Error::TeacherNotFrozen);
    }
    f_aerial.check_compatible(tape.shape(f_cam.var), &f_cam.grid)?;
    let aerial = tape.constant(f_aerial.tensor.clone());
    let mut cam = f_cam.var;
    let mut adapted = None;
    if cfg.use_adapter() {
        let [g, b] = adapter.ok_or_else(|| Error::Missing("adapter parameters for norm_adapter".into()))?;
        cam = tape.channel_affine(cam, g, b)?;
        adapted = Some(cam);
    }
    let (cam, target, normalized) = if cfg.normalize() {
        let c = tape.channel_normalize(cam, NORM_EPS)?;
        let a = tape.channel_normalize(aerial, NORM_EPS)?;
        (c, a, Some([c, a]))
    } else {
        (cam, aerial, None)
    };
    let loss = tape.mse(cam, target)?;
    Ok(Alignment {
        loss,
        aerial,
        adapted,
        normalized,
    })
}

/// Value of the alignment loss for two materialized maps.
pub fn bev_alignment_value<T: Real>(
    f_cam: &FeatureMap<T>,
    f_aerial: &FeatureMap<T>,
    adapter: Option<&AffineAdapter<T>>,
    cfg: &SupervisionConfig,
) -> Result<T> {
    let mut tape = Tape::new();
    let var = tape.constant(f_cam.tensor.clone());
    let fv = FeatureVar {
        var,
        grid: f_cam.grid,
        producer: f_cam.producer,
    };
    let ad = adapter.map(|a| a.bind(&mut tape));
    let out = bev_alignment_loss(&mut tape, &fv, f_aerial, ad, cfg)?;
    Ok(tape.value(out.loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BevGrid;

    fn map(seed: usize, producer: Producer) -> FeatureMap<f64> {
        FeatureMap {
            tensor: Tensor::from_fn([4, 6, 8], |i| (((i + seed) * 7919) % 1013) as f64 / 500.0 - 1.0),
            grid: BevGrid::new(8.0, 6.0, 8, 6).unwrap(),
            producer,
            frozen: producer == Producer::Teacher,
        }
    }

    #[test]
    fn identical_maps_give_zero() {
        let a = map(1, Producer::Teacher);
        let mut s = a.clone();
        s.producer = Producer::Student;
        let ad = AffineAdapter::new(4);
        for v in [Variant::Raw, Variant::NormOnly, Variant::NormAdapter] {
            let l = bev_alignment_value(&s, &a, Some(&ad), &SupervisionConfig::new(v, 1.0)).unwrap();
            assert_eq!(l, 0.0, "{v}");
        }
    }

    #[test]
    fn adapter_at_init_matches_norm_only_bitwise() {
        let a = map(1, Producer::Teacher);
        let s = map(5, Producer::Student);
        let ad = AffineAdapter::new(4);
        let x = bev_alignment_value(&s, &a, Some(&ad), &SupervisionConfig::new(Variant::NormAdapter, 1.0)).unwrap();
        let y = bev_alignment_value(&s, &a, None, &SupervisionConfig::new(Variant::NormOnly, 1.0)).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn raw_variant_matches_loop_oracle() {
        let a = map(1, Producer::Teacher);
        let s = map(9, Producer::Student);
        let got = bev_alignment_value(&s, &a, None, &SupervisionConfig::new(Variant::Raw, 1.0)).unwrap();
        let (sd, ad) = (s.tensor.data(), a.tensor.data());
        let mut acc = 0.0;
        for c in 0..4 {
            for h in 0..6 {
                for w in 0..8 {
                    let i = (c * 6 + h) * 8 + w;
                    acc += (sd[i] - ad[i]) * (sd[i] - ad[i]);
                }
            }
        }
        assert!((got - acc / (4.0 * 6.0 * 8.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_unfrozen_or_mismatched_teacher() {
        let s = map(9, Producer::Student);
        let mut a = map(1, Producer::Teacher);
        a.frozen = false;
        let cfg = SupervisionConfig::new(Variant::Raw, 1.0);
        assert!(matches!(bev_alignment_value(&s, &a, None, &cfg), Err(Error::TeacherNotFrozen)));
        let student_as_target = map(1, Producer::Student);
        assert!(matches!(
            bev_alignment_value(&s, &student_as_target, None, &cfg),
            Err(Error::TeacherNotFrozen)
        ));
        let mut other = map(1, Producer::Teacher);
        other.grid = BevGrid::new(16.0, 6.0, 8, 6).unwrap();
        assert!(bev_alignment_value(&s, &other, None, &cfg).is_err());
    }

    #[test]
    fn gradient_reaches_student_and_adapter_only() {
        let a = map(1, Producer::Teacher);
        let s = map(9, Producer::Student);
        let ad = AffineAdapter::new(4);
        let mut tape = Tape::new();
        let var = tape.leaf(s.tensor.clone(), true);
        let fv = FeatureVar {
            var,
            grid: s.grid,
            producer: Producer::Student,
        };
        let vars = ad.bind(&mut tape);
        let out = bev_alignment_loss(&mut tape, &fv, &a, Some(vars), &SupervisionConfig::new(Variant::NormAdapter, 1.0)).unwrap();
        tape.backward(out.loss).unwrap();
        assert!(tape.grad(var).is_some());
        assert!(tape.grad(vars[0]).is_some() && tape.grad(vars[1]).is_some());
        assert!(tape.grad(out.aerial).is_none());
    }

    #[test]
    fn baseline_has_zero_effective_lambda() {
        assert_eq!(SupervisionConfig::new(Variant::Baseline, 3.0).effective_lambda(), 0.0);
        assert_eq!(SupervisionConfig::new(Variant::Raw, 3.0).effective_lambda(), 3.0);
        assert!(SupervisionConfig::new(Variant::Raw, -1.0).validate().is_err());
    }
}
