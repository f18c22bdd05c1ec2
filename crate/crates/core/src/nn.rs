//! Dense layers over "jets": values carried together with their first
//! derivatives and Laplacian with respect to a set of coordinates.
//!
//! A [`Jets`] tensor is laid out `[item][channel][feature]`. Channel 0 holds
//! the value; channels `1..=ngrad` hold partial derivatives; when
//! `ngrad > 0` a final channel holds the Laplacian summed over the same
//! coordinates. With `ngrad == 0` the tensor is a plain row-major matrix,
//! which is what the value-only forward pass and the reverse-mode parameter
//! gradients use.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::linalg::{gemm, gemm_bt};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `x Φ(x)` with the exact Gaussian CDF.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Value, first and second derivative of GELU.
#[inline]
pub fn gelu_jet(x: f64) -> (f64, f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    (x * cdf, cdf + x * pdf, pdf * (2.0 - x * x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Jets {
    pub items: usize,
    pub feats: usize,
    pub ngrad: usize,
    pub data: Vec<f64>,
}

impl Jets {
    #[inline]
    pub fn chans_for(ngrad: usize) -> usize {
        if ngrad == 0 {
            1
        } else {
            ngrad + 2
        }
    }

    pub fn zeros(items: usize, feats: usize, ngrad: usize) -> Self {
        Self {
            items,
            feats,
            ngrad,
            data: vec![0.0; items * Self::chans_for(ngrad) * feats],
        }
    }

    /// Constant values (all derivative channels zero).
    pub fn constant(values: &[f64], items: usize, feats: usize, ngrad: usize) -> Self {
        assert_eq!(values.len(), items * feats);
        let mut j = Self::zeros(items, feats, ngrad);
        for it in 0..items {
            j.value_mut(it).copy_from_slice(&values[it * feats..(it + 1) * feats]);
        }
        j
    }

    #[inline]
    pub fn chans(&self) -> usize {
        Self::chans_for(self.ngrad)
    }

    #[inline]
    pub fn lap_chan(&self) -> usize {
        self.ngrad + 1
    }

    #[inline]
    pub fn idx(&self, item: usize, chan: usize, feat: usize) -> usize {
        (item * self.chans() + chan) * self.feats + feat
    }

    #[inline]
    pub fn item(&self, item: usize) -> &[f64] {
        let s = self.chans() * self.feats;
        &self.data[item * s..(item + 1) * s]
    }

    #[inline]
    pub fn item_mut(&mut self, item: usize) -> &mut [f64] {
        let s = self.chans() * self.feats;
        &mut self.data[item * s..(item + 1) * s]
    }

    #[inline]
    pub fn chan(&self, item: usize, chan: usize) -> &[f64] {
        let o = self.idx(item, chan, 0);
        &self.data[o..o + self.feats]
    }

    #[inline]
    pub fn chan_mut(&mut self, item: usize, chan: usize) -> &mut [f64] {
        let o = self.idx(item, chan, 0);
        let f = self.feats;
        &mut self.data[o..o + f]
    }

    #[inline]
    pub fn value(&self, item: usize) -> &[f64] {
        self.chan(item, 0)
    }

    #[inline]
    pub fn value_mut(&mut self, item: usize) -> &mut [f64] {
        self.chan_mut(item, 0)
    }

    /// Values only, `[item][feat]`.
    pub fn values(&self) -> Vec<f64> {
        if self.ngrad == 0 {
            return self.data.clone();
        }
        let mut out = Vec::with_capacity(self.items * self.feats);
        for it in 0..self.items {
            out.extend_from_slice(self.value(it));
        }
        out
    }

    /// `x Wᵀ + b`, with `W` stored `out×in` row-major. The bias only touches
    /// the value channel.
    pub fn linear(&self, w: &[f64], b: Option<&[f64]>, out: usize) -> Jets {
        assert_eq!(w.len(), out * self.feats);
        let rows = self.items * self.chans();
        let mut res = Jets::zeros(self.items, out, self.ngrad);
        gemm_bt(rows, self.feats, out, &self.data, w, &mut res.data, false);
        if let Some(b) = b {
            for it in 0..self.items {
                for (v, bb) in res.value_mut(it).iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        res
    }

    /// Elementwise GELU with the chain rule on every channel.
    pub fn gelu_in_place(&mut self) {
        let f = self.feats;
        let c = self.chans();
        let ng = self.ngrad;
        for it in 0..self.items {
            let blk = &mut self.data[it * c * f..(it + 1) * c * f];
            for k in 0..f {
                let x = blk[k];
                if ng == 0 {
                    blk[k] = gelu(x);
                    continue;
                }
                let (s0, s1, s2) = gelu_jet(x);
                let mut g2 = 0.0;
                for ch in 1..=ng {
                    let g = blk[ch * f + k];
                    g2 += g * g;
                    blk[ch * f + k] = s1 * g;
                }
                let l = &mut blk[(ng + 1) * f + k];
                *l = s1 * *l + s2 * g2;
                blk[k] = s0;
            }
        }
    }

    /// Feature-wise concatenation `[self, other]`.
    pub fn concat(&self, other: &Jets) -> Jets {
        assert_eq!(self.items, other.items);
        assert_eq!(self.ngrad, other.ngrad);
        let c = self.chans();
        let f = self.feats + other.feats;
        let mut res = Jets::zeros(self.items, f, self.ngrad);
        for it in 0..self.items {
            for ch in 0..c {
                let o = (it * c + ch) * f;
                res.data[o..o + self.feats].copy_from_slice(self.chan(it, ch));
                res.data[o + self.feats..o + f].copy_from_slice(other.chan(it, ch));
            }
        }
        res
    }

    /// Feature columns `start..start+len`.
    pub fn slice_feats(&self, start: usize, len: usize) -> Jets {
        let c = self.chans();
        let mut res = Jets::zeros(self.items, len, self.ngrad);
        for it in 0..self.items {
            for ch in 0..c {
                let src = &self.chan(it, ch)[start..start + len];
                res.chan_mut(it, ch).copy_from_slice(src);
            }
        }
        res
    }
}

/// Location of one dense layer inside a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

/// Multilayer perceptron: GELU between layers, linear output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<LayerSpec>,
}

/// Layer inputs and pre-activations recorded by a value-mode forward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub items: usize,
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.layers[0].inp
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out
    }

    pub fn forward(&self, params: &[f64], x: &Jets) -> Jets {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            h = h.linear(&params[l.w..l.w + l.out * l.inp], Some(&params[l.b..l.b + l.out]), l.out);
            if k != last {
                h.gelu_in_place();
            }
        }
        h
    }

    /// Value-only forward pass keeping what the backward pass needs.
    pub fn forward_cached(&self, params: &[f64], x: &Jets, cache: &mut MlpCache) -> Jets {
        assert_eq!(x.ngrad, 0);
        cache.inputs.clear();
        cache.pre.clear();
        cache.items = x.items;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            cache.inputs.push(h.data.clone());
            h = h.linear(&params[l.w..l.w + l.out * l.inp], Some(&params[l.b..l.b + l.out]), l.out);
            if k != last {
                cache.pre.push(h.data.clone());
                h.gelu_in_place();
            }
        }
        h
    }

    /// Reverse pass with `seeds` adjoint channels per item (`[item][seed][out]`).
    /// Parameter gradients are accumulated into `grads[seed]`; the adjoint of
    /// the input is returned in the same layout.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        d_out: &[f64],
        seeds: usize,
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let items = cache.items;
        let mut d = d_out.to_vec();
        for (k, l) in self.layers.iter().enumerate().rev() {
            if k != self.layers.len() - 1 {
                // through the GELU that follows layer k
                let pre = &cache.pre[k];
                for it in 0..items {
                    for s in 0..seeds {
                        let row = &mut d[(it * seeds + s) * l.out..(it * seeds + s + 1) * l.out];
                        for (q, r) in row.iter_mut().enumerate() {
                            *r *= gelu_jet(pre[it * l.out + q]).1;
                        }
                    }
                }
            }
            let x = &cache.inputs[k];
            linear_backward_params(l, x, &d, items, seeds, grads);
            let mut dx = vec![0.0; items * seeds * l.inp];
            gemm(items * seeds, l.out, l.inp, &d, &params[l.w..l.w + l.out * l.inp], &mut dx, false);
            d = dx;
        }
        d
    }
}

/// Accumulates `dW += dYᵀ X` and `db += Σ dY` for every adjoint seed.
pub fn linear_backward_params(l: &LayerSpec, x: &[f64], d: &[f64], items: usize, seeds: usize, grads: &mut [Vec<f64>]) {
    for s in 0..seeds {
        let g = &mut grads[s];
        unsafe {
            matrixmultiply::dgemm(
                l.out,
                items,
                l.inp,
                1.0,
                d.as_ptr().add(s * l.out),
                1,
                (seeds * l.out) as isize,
                x.as_ptr(),
                l.inp as isize,
                1,
                1.0,
                g.as_mut_ptr().add(l.w),
                l.inp as isize,
                1,
            );
        }
        for it in 0..items {
            let row = &d[(it * seeds + s) * l.out..(it * seeds + s + 1) * l.out];
            for (q, v) in row.iter().enumerate() {
                g[l.b + q] += v;
            }
        }
    }
}

/// Accumulates `dW += dYᵀ X` for a bias-free linear map with weights at `w`.
pub fn matrix_backward_params(w: usize, inp: usize, out: usize, x: &[f64], d: &[f64], items: usize, seeds: usize, grads: &mut [Vec<f64>]) {
    for s in 0..seeds {
        let g = &mut grads[s];
        unsafe {
            matrixmultiply::dgemm(
                out,
                items,
                inp,
                1.0,
                d.as_ptr().add(s * out),
                1,
                (seeds * out) as isize,
                x.as_ptr(),
                inp as isize,
                1,
                1.0,
                g.as_mut_ptr().add(w),
                inp as isize,
                1,
            );
        }
    }
}

/// Normal draw via Box-Muller; keeps initialization independent of
/// distribution crates' sampling algorithms.
pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}
