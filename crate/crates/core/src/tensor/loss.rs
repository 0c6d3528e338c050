//! Scalar training objectives.

use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

impl<T: Real> Tape<T> {
    /// Mean squared difference over every entry. Symmetric bit for bit.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / T::of(av.len() as f64);
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Softmax focal loss over rows of `logits: [N, K]`, averaged over rows:
    /// `-alpha[t] * (1 - p_t)^gamma * ln p_t`.
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], alpha: &[f64], gamma: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [n, k] = s[..] else {
            return Err(Error::shape("focal_loss", "[N, K]", s));
        };
        if targets.len() != n || alpha.len() != k {
            return Err(Error::shape("focal_loss", (n, k), (targets.len(), alpha.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidClass { index: bad, classes: k });
        }
        let z = self.value(logits).data();
        let g = T::of(gamma);
        let inv_n = T::one() / T::of(n.max(1) as f64);
        let mut total = T::zero();
        let mut dz = vec![T::zero(); n * k];
        for (r, &t) in targets.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            let log_pt = row[t] - lse;
            let pt = log_pt.exp();
            let a = T::of(alpha[t]);
            let q = T::one() - pt;
            let mod_f = if gamma == 0.0 { T::one() } else { q.powf(g) };
            total += -a * mod_f * log_pt;
            // d loss / d p_t, then chained through the softmax Jacobian.
            let d_mod = if gamma == 0.0 || q <= T::zero() {
                T::zero()
            } else {
                g * q.powf(g - T::one()) * log_pt
            };
            let dl_dpt = -a * (-d_mod + mod_f / pt);
            for j in 0..k {
                let pj = (row[j] - lse).exp();
                let delta = if j == t { T::one() } else { T::zero() };
                dz[r * k + j] = dl_dpt * pt * (delta - pj) * inv_n;
            }
        }
        let v = Tensor::scalar(total * inv_n);
        self.push("focal_loss", v, Op::Local { x: logits, dx: dz }, &[logits])
    }

    /// Mean absolute coordinate error between `pred: [K, 2]` and `target`,
    /// taking the better of the target's forward and reversed point order.
    pub fn l1_line_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || s[1] != 2 || target.shape() != s.as_slice() {
            return Err(Error::shape("l1_line_loss", s, target.shape()));
        }
        let k = s[0];
        let p = self.value(pred).data();
        let t = target.data();
        let n = T::of((2 * k) as f64);
        let fwd = p.iter().zip(t).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
        let rev_at = |i: usize| t[(k - 1 - i / 2) * 2 + i % 2];
        let rev = (0..2 * k).map(|i| (p[i] - rev_at(i)).abs()).sum::<T>() / n;
        let (value, chosen): (T, Vec<T>) = if rev < fwd {
            (rev, (0..2 * k).map(rev_at).collect())
        } else {
            (fwd, t.to_vec())
        };
        let dx = p.iter().zip(&chosen).map(|(&a, &b)| signum0(a - b) / n).collect();
        self.push("l1_line_loss", Tensor::scalar(value), Op::Local { x: pred, dx }, &[pred])
    }
}

fn signum0<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
