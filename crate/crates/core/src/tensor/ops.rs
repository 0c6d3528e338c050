//! Forward definitions of the differentiable building blocks.

use super::conv::{im2col, ConvGeom};
use super::tape::{GatherIndex, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

fn chw(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match s {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::shape(op, "[C, H, W]", s)),
    }
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `x: [Cin, H, W]` with `k: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, w) = chw("conv2d", self.shape(x))?;
        let ks = self.shape(k).to_vec();
        let [cout, kcin, kh, kw] = ks[..] else {
            return Err(Error::shape("conv2d", "[Cout, Cin, kh, kw]", ks));
        };
        if kcin != cin {
            return Err(Error::shape("conv2d", cin, kcin));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", [cout], self.shape(b)));
            }
        }
        let geom = ConvGeom::new(cin, h, w, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", "kernel fitting padded input", (h, w, kh, kw, pad)))?;
        let cols = im2col(&geom, self.value(x).data());
        let p = geom.positions();
        let mut out = vec![T::zero(); cout * p];
        if let Some(b) = bias {
            for (c, &bv) in self.value(b).data().iter().enumerate() {
                out[c * p..(c + 1) * p].iter_mut().for_each(|o| *o = bv);
            }
        }
        T::gemm(cout, geom.patch(), p, T::one(), self.value(k).data(), false, &cols, false, T::one(), &mut out);
        let value = Tensor::new([cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                k,
                bias,
                geom,
                cols,
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push("relu", v, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        let v = self.value(x).map(|a| if a > T::zero() { a } else { a * s });
        self.push("leaky_relu", v, Op::LeakyRelu(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.tanh());
        self.push("tanh", v, Op::Tanh(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let v = self.value(x).map(|a| a * s);
        self.push("scale", v, Op::Scale(x, s), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Sum of several scalars, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::shape("add_all", "at least one term", 0))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// Slice `x[row]` along the leading axis.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || row >= s[0] {
            return Err(Error::shape("select_row", format!("row < {:?}", s.first()), row));
        }
        let n: usize = s[1..].iter().product();
        let data = self.value(x).data()[row * n..(row + 1) * n].to_vec();
        let v = Tensor::new(s[1..].to_vec(), data)?;
        self.push("select_row", v, Op::SelectRow { x, row }, &[x])
    }

    /// Concatenation of `[Ci, H, W]` maps along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = chw("concat", self.shape(parts[0]))?;
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pc, ph, pw) = chw("concat", self.shape(p))?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape("concat", (h, w), (ph, pw)));
            }
            c += pc;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new([c, h, w], data)?;
        self.push("concat", v, Op::Concat(parts.to_vec()), parts)
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("upsample2x", self.shape(x))?;
        let src = self.value(x).data();
        let v = Tensor::from_fn([c, 2 * h, 2 * w], |i| {
            let xx = i % (2 * w);
            let y = (i / (2 * w)) % (2 * h);
            let ci = i / (4 * h * w);
            src[(ci * h + y / 2) * w + xx / 2]
        });
        self.push("upsample2x", v, Op::Upsample2x(x), &[x])
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("maxpool2", self.shape(x))?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("maxpool2", "H, W >= 2", (h, w)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = (ci * h + 2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = (ci * h + 2 * y + dy) * w + 2 * xx + dx;
                        if src[j] > src[best] {
                            best = j;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new([c, ho, wo], out)?;
        self.push("maxpool2", v, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Per-channel standardization over spatial positions:
    /// `(x - mean) / sqrt(var + eps)` with the population variance.
    pub fn channel_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = chw("channel_normalize", self.shape(x))?;
        let hw = h * w;
        if hw < 2 {
            return Err(Error::shape("channel_normalize", "H*W >= 2", hw));
        }
        let n = T::of(hw as f64);
        let eps = T::of(eps);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * hw];
        let mut inv_std = Vec::with_capacity(c);
        for ci in 0..c {
            let xs = &src[ci * hw..(ci + 1) * hw];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in out[ci * hw..(ci + 1) * hw].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new([c, h, w], out)?;
        self.push("channel_normalize", v, Op::ChannelNormalize { x, inv_std }, &[x])
    }

    /// `y[i] = gamma[i] * x[i] + beta[i]` for every channel `i`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = chw("channel_affine", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "channel_affine",
                [c],
                (self.shape(gamma).to_vec(), self.shape(beta).to_vec()),
            ));
        }
        let hw = h * w;
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(c * hw);
        for ci in 0..c {
            for &v in &xv[ci * hw..(ci + 1) * hw] {
                let s = gv[ci] * v;
                // Skipping a zero shift keeps the identity adapter exact for -0.0.
                out.push(if bv[ci] == T::zero() { s } else { s + bv[ci] });
            }
        }
        let v = Tensor::new([c, h, w], out)?;
        self.push("channel_affine", v, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta])
    }

    /// Dense layer on the flattened input: `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let nin = self.value(x).len();
        let ws = self.shape(w).to_vec();
        let [nout, win] = ws[..] else {
            return Err(Error::shape("linear", "[Out, In]", ws));
        };
        if win != nin {
            return Err(Error::shape("linear", win, nin));
        }
        let mut out = match b {
            Some(b) if self.shape(b) == [nout] => self.value(b).data().to_vec(),
            Some(b) => return Err(Error::shape("linear bias", [nout], self.shape(b))),
            None => vec![T::zero(); nout],
        };
        T::gemm(nout, nin, 1, T::one(), self.value(w).data(), false, self.value(x).data(), false, T::one(), &mut out);
        let v = Tensor::new([nout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", v, Op::Linear { x, w, b }, &inputs)
    }

    /// Builds a `[C, H, W]` map where each cell copies the channel vector at
    /// `index[cell] = (source, offset)`, or `fallback: [C]` when the entry is
    /// empty. Sources are `[C, h_s, w_s]` maps.
    pub fn gather_cells(&mut self, sources: &[Var], fallback: Var, index: GatherIndex, h: usize, w: usize) -> Result<Var> {
        if index.len() != h * w {
            return Err(Error::shape("gather_cells", h * w, index.len()));
        }
        let fb = self.value(fallback);
        let c = fb.len();
        if fb.shape() != [c] {
            return Err(Error::shape("gather_cells fallback", [c], fb.shape()));
        }
        for &s in sources {
            let (sc, _, _) = chw("gather_cells", self.shape(s))?;
            if sc != c {
                return Err(Error::shape("gather_cells", c, sc));
            }
        }
        let cells = h * w;
        let mut out = vec![T::zero(); c * cells];
        for (cell, entry) in index.iter().enumerate() {
            match *entry {
                Some((src, offset)) => {
                    let sv = self
                        .value(*sources.get(src).ok_or_else(|| Error::shape("gather_cells", sources.len(), src))?);
                    let sp = sv.shape()[1] * sv.shape()[2];
                    if offset >= sp {
                        return Err(Error::shape("gather_cells offset", sp, offset));
                    }
                    for ci in 0..c {
                        out[ci * cells + cell] = sv.data()[ci * sp + offset];
                    }
                }
                None => {
                    for ci in 0..c {
                        out[ci * cells + cell] = fb.data()[ci];
                    }
                }
            }
        }
        let v = Tensor::new([c, h, w], out)?;
        let mut inputs = sources.to_vec();
        inputs.push(fallback);
        self.push(
            "gather_cells",
            v,
            Op::Gather {
                sources: sources.to_vec(),
                fallback,
                index,
            },
            &inputs,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.same_shape(op, a, b)
    }
}
