use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Parameters of one network recorded on a tape, in `ParamSet` order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn new<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>) -> Self {
        Self {
            vars: (0..params.len()).map(|i| tape.param(params, i)).collect(),
        }
    }

    /// Gradient slices in `ParamSet` order, for the optimizer.
    pub fn grads<'t, T: Real>(&self, tape: &'t Tape<T>) -> Vec<Option<&'t [T]>> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.vars[self.w], Some(p.vars[self.b]), self.stride, self.pad)
    }

    pub fn relu<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.apply(tape, p, x)?;
        tape.relu(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.vars[self.w], Some(p.vars[self.b]))
    }
}

/// Seeded parameter factory using He-uniform initialization.
pub(crate) struct Builder<T> {
    pub params: ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-bound..bound)))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = self.uniform(&[cout, cin, k, k], bound);
        let w = self.params.add(format!("{name}.w"), w);
        let b = self.params.add(format!("{name}.b"), Tensor::zeros([cout]));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    /// `gain` scales the He bound; small gains start outputs near zero.
    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize, gain: f64, bias: Tensor<T>) -> Linear {
        let bound = gain * (6.0 / inputs as f64).sqrt();
        let w = self.uniform(&[outputs, inputs], bound);
        let w = self.params.add(format!("{name}.w"), w);
        let b = self.params.add(format!("{name}.b"), bias);
        Linear { w, b }
    }

    pub fn vector(&mut self, name: &str, value: Tensor<T>) -> usize {
        self.params.add(name, value)
    }
}

/// Three-level encoder-decoder with concatenated skips on `[C, H, W]` maps.
/// Odd spatial sizes are not supported; the desk grids are 24 x 48.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct UNet {
    enc: [Conv; 3],
    bottleneck: Conv,
    dec: [Conv; 3],
}

impl UNet {
    pub fn build<T: Real>(b: &mut Builder<T>, prefix: &str, cin: usize, widths: [usize; 3], cout: usize) -> Self {
        let [w0, w1, w2] = widths;
        Self {
            enc: [
                b.conv(&format!("{prefix}.enc0"), cin, w0, 3, 1),
                b.conv(&format!("{prefix}.enc1"), w0, w1, 3, 1),
                b.conv(&format!("{prefix}.enc2"), w1, w2, 3, 1),
            ],
            bottleneck: b.conv(&format!("{prefix}.mid"), w2, w2, 3, 1),
            dec: [
                b.conv(&format!("{prefix}.dec2"), w2 + w2, w2, 3, 1),
                b.conv(&format!("{prefix}.dec1"), w2 + w1, w1, 3, 1),
                b.conv(&format!("{prefix}.dec0"), w1 + w0, cout, 3, 1),
            ],
        }
    }

    /// Final layer is linear so features can take either sign.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s0 = self.enc[0].relu(tape, p, x)?;
        let d = tape.maxpool2(s0)?;
        let s1 = self.enc[1].relu(tape, p, d)?;
        let d = tape.maxpool2(s1)?;
        let s2 = self.enc[2].relu(tape, p, d)?;
        let d = tape.maxpool2(s2)?;
        let m = self.bottleneck.relu(tape, p, d)?;
        let u = tape.upsample2x(m)?;
        let c = tape.concat(&[u, s2])?;
        let u = self.dec[0].relu(tape, p, c)?;
        let u = tape.upsample2x(u)?;
        let c = tape.concat(&[u, s1])?;
        let u = self.dec[1].relu(tape, p, c)?;
        let u = tape.upsample2x(u)?;
        let c = tape.concat(&[u, s0])?;
        self.dec[2].apply(tape, p, c)
    }
}
