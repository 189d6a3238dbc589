// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward and reverse-mode passes over the fixed architecture.
//!
//! Everything here is generic over the float type so that the gradient
//! checker can evaluate the exact same code in `f64`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{One, Zero};

use super::layout::{Layout, LayerOffsets};
use super::ModelConfig;

/// Epsilon inside every RMS normalization.
pub const RMS_EPS: f64 = 1e-5;

/// Transcendentals always go through `libm` so results do not depend on
/// which `num-traits` backend feature unification happens to select.
pub trait Real:
    Copy
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn neg_infinity() -> Self;
    #[inline(always)]
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Real for f32 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        libm::expf(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        libm::logf(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        libm::sqrtf(self)
    }
    #[inline(always)]
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn exp(self) -> Self {
        libm::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        libm::log(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    #[inline(always)]
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `out[t, r] = inp[t, :] . w[r, :]` for an `out_dim x in_dim` weight.
fn linear<T: Real>(inp: &[T], in_dim: usize, w: &[T], out_dim: usize, out: &mut [T]) {
    for (x, o) in inp.chunks_exact(in_dim).zip(out.chunks_exact_mut(out_dim)) {
        for (r, ov) in o.iter_mut().enumerate() {
            *ov = dot(x, &w[r * in_dim..(r + 1) * in_dim]);
        }
    }
}

/// Accumulates `d_inp += d_out . w` and `d_w += d_out^T . inp`.
fn linear_backward<T: Real>(
    inp: &[T],
    in_dim: usize,
    w: &[T],
    out_dim: usize,
    d_out: &[T],
    d_inp: Option<&mut [T]>,
    d_w: &mut [T],
) {
    let rows = d_out.chunks_exact(out_dim);
    if let Some(d_inp) = d_inp {
        for (dy, dx) in rows.clone().zip(d_inp.chunks_exact_mut(in_dim)) {
            for (r, &g) in dy.iter().enumerate() {
                if g != T::zero() {
                    axpy(dx, g, &w[r * in_dim..(r + 1) * in_dim]);
                }
            }
        }
    }
    for (dy, x) in rows.zip(inp.chunks_exact(in_dim)) {
        for (r, &g) in dy.iter().enumerate() {
            if g != T::zero() {
                axpy(&mut d_w[r * in_dim..(r + 1) * in_dim], g, x);
            }
        }
    }
}

/// Row-wise RMS norm; returns the per-row inverse RMS.
fn rms_norm<T: Real>(x: &[T], gain: &[T], out: &mut [T]) -> Vec<T> {
    let d = gain.len();
    let eps = T::of(RMS_EPS);
    let inv_d = T::of(1.0 / d as f64);
    x.chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .map(|(xr, yr)| {
            let ms = dot(xr, xr) * inv_d;
            let inv = T::one() / (ms + eps).sqrt();
            for ((y, &xv), &g) in yr.iter_mut().zip(xr).zip(gain) {
                *y = xv * inv * g;
            }
            inv
        })
        .collect()
}

fn rms_norm_backward<T: Real>(x: &[T], inv: &[T], gain: &[T], dy: &[T], dx: &mut [T], dgain: &mut [T]) {
    let d = gain.len();
    let inv_d = T::of(1.0 / d as f64);
    for (((xr, &r), dyr), dxr) in x
        .chunks_exact(d)
        .zip(inv)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let mut s = T::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * r;
            s += dyr[j] * gain[j] * xr[j];
        }
        let c = r * r * r * s * inv_d;
        for j in 0..d {
            dxr[j] += r * gain[j] * dyr[j] - xr[j] * c;
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// `down . (silu(gate . x) * (up . x))` for a single vector.
pub(crate) fn gated_ffn_vec<T: Real>(gate: &[T], up: &[T], down: &[T], d: usize, f: usize, x: &[T]) -> Vec<T> {
    let mut g = vec![T::zero(); f];
    let mut u = vec![T::zero(); f];
    linear(x, d, gate, f, &mut g);
    linear(x, d, up, f, &mut u);
    let h: Vec<T> = g.iter().zip(&u).map(|(&gv, &uv)| silu(gv) * uv).collect();
    let mut out = vec![T::zero(); d];
    linear(&h, f, down, d, &mut out);
    out
}

/// Activations of one block, kept for the backward pass.
pub(crate) struct LayerCache<T> {
    x_in: Vec<T>,
    a: Vec<T>,
    a_inv: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    x_mid: Vec<T>,
    f: Vec<T>,
    f_inv: Vec<T>,
    g: Vec<T>,
    u: Vec<T>,
    h: Vec<T>,
}

pub(crate) struct Cache<T> {
    pub n: usize,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    /// Post-final-norm hidden states, `n x d_model`.
    pub hidden: Vec<T>,
    hidden_inv: Vec<T>,
    /// `n x vocab_size`.
    pub logits: Vec<T>,
}

pub(crate) struct Net<'a, T> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a Layout,
    pub params: &'a [T],
}

impl<'a, T: Real> Net<'a, T> {
    fn slice(&self, offset: usize, len: usize) -> &'a [T] {
        &self.params[offset..offset + len]
    }

    /// Full forward pass; `tokens` must already be validated.
    pub fn forward(&self, tokens: &[u32]) -> Cache<T> {
        let cfg = self.cfg;
        let (d, f, vsz) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let n = tokens.len();
        let embed = self.slice(self.layout.embed, vsz * d);
        let pos = self.slice(self.layout.positions, cfg.max_seq_len * d);
        let mut x = vec![T::zero(); n * d];
        for (t, (&tok, xr)) in tokens.iter().zip(x.chunks_exact_mut(d)).enumerate() {
            let e = &embed[tok as usize * d..(tok as usize + 1) * d];
            let p = &pos[t * d..(t + 1) * d];
            for ((xv, &ev), &pv) in xr.iter_mut().zip(e).zip(p) {
                *xv = ev + pv;
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lo in &self.layout.layers {
            let x_in = x;
            let mut a = vec![T::zero(); n * d];
            let a_inv = rms_norm(&x_in, self.slice(lo.norm_attn, d), &mut a);
            let mut q = vec![T::zero(); n * d];
            let mut k = vec![T::zero(); n * d];
            let mut v = vec![T::zero(); n * d];
            linear(&a, d, self.slice(lo.q, d * d), d, &mut q);
            linear(&a, d, self.slice(lo.k, d * d), d, &mut k);
            linear(&a, d, self.slice(lo.v, d * d), d, &mut v);
            let (probs, ctx) = self.attention(n, &q, &k, &v);
            let mut x_mid = vec![T::zero(); n * d];
            linear(&ctx, d, self.slice(lo.o, d * d), d, &mut x_mid);
            for (m, &xi) in x_mid.iter_mut().zip(&x_in) {
                *m += xi;
            }

            let mut fnorm = vec![T::zero(); n * d];
            let f_inv = rms_norm(&x_mid, self.slice(lo.norm_ffn, d), &mut fnorm);
            let mut g = vec![T::zero(); n * f];
            let mut u = vec![T::zero(); n * f];
            linear(&fnorm, d, self.slice(lo.gate, f * d), f, &mut g);
            linear(&fnorm, d, self.slice(lo.up, f * d), f, &mut u);
            let h: Vec<T> = g.iter().zip(&u).map(|(&gv, &uv)| silu(gv) * uv).collect();
            let mut x_out = vec![T::zero(); n * d];
            linear(&h, f, self.slice(lo.down, d * f), d, &mut x_out);
            for (o, &m) in x_out.iter_mut().zip(&x_mid) {
                *o += m;
            }
            layers.push(LayerCache {
                x_in,
                a,
                a_inv,
                q,
                k,
                v,
                probs,
                ctx,
                x_mid,
                f: fnorm,
                f_inv,
                g,
                u,
                h,
            });
            x = x_out;
        }

        let mut hidden = vec![T::zero(); n * d];
        let hidden_inv = rms_norm(&x, self.slice(self.layout.norm_final, d), &mut hidden);
        let mut logits = vec![T::zero(); n * vsz];
        linear(&hidden, d, self.slice(self.layout.head_weight, vsz * d), vsz, &mut logits);
        if let Some(b) = self.layout.head_bias {
            let bias = self.slice(b, vsz);
            for row in logits.chunks_exact_mut(vsz) {
                for (l, &bv) in row.iter_mut().zip(bias) {
                    *l += bv;
                }
            }
        }
        Cache {
            n,
            layers,
            x_final: x,
            hidden,
            hidden_inv,
            logits,
        }
    }

    /// Causal multi-head attention; returns (`heads x n x n` probabilities, context).
    fn attention(&self, n: usize, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * n * n];
        let mut ctx = vec![T::zero(); n * d];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for t in 0..n {
                let qt = &q[t * d..][cols.clone()];
                let row = &mut probs[(h * n + t) * n..(h * n + t) * n + t + 1];
                let mut max = T::neg_infinity();
                for (s, p) in row.iter_mut().enumerate() {
                    *p = dot(qt, &k[s * d..][cols.clone()]) * scale;
                    max = max.max(*p);
                }
                let mut sum = T::zero();
                for p in row.iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                let inv = T::one() / sum;
                let out = &mut ctx[t * d..][cols.clone()];
                for (s, p) in row.iter_mut().enumerate() {
                    *p *= inv;
                    axpy(out, *p, &v[s * d..][cols.clone()]);
                }
            }
        }
        (probs, ctx)
    }

    /// Sum of next-token cross-entropies over positions `0..n-1`.
    ///
    /// Adds `scale * dLoss/dparams` into `grad` and returns the unscaled loss sum.
    pub fn loss_and_grad(&self, tokens: &[u32], scale: T, grad: &mut [T]) -> T {
        let cache = self.forward(tokens);
        let vsz = self.cfg.vocab_size;
        let n = cache.n;
        let mut loss = T::zero();
        let mut dlogits = vec![T::zero(); n * vsz];
        for t in 0..n.saturating_sub(1) {
            let row = &cache.logits[t * vsz..(t + 1) * vsz];
            let target = tokens[t + 1] as usize;
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().fold(T::zero(), |acc, &l| acc + (l - max).exp());
            let lse = max + sum.ln();
            loss += lse - row[target];
            let drow = &mut dlogits[t * vsz..(t + 1) * vsz];
            for (dl, &l) in drow.iter_mut().zip(row) {
                *dl = (l - lse).exp() * scale;
            }
            drow[target] -= scale;
        }
        self.backward(tokens, &cache, &dlogits, grad);
        loss
    }

    /// Cross-entropy sum only (used by finite differences).
    pub fn loss(&self, tokens: &[u32]) -> T {
        let cache = self.forward(tokens);
        let vsz = self.cfg.vocab_size;
        let mut loss = T::zero();
        for t in 0..cache.n.saturating_sub(1) {
            let row = &cache.logits[t * vsz..(t + 1) * vsz];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().fold(T::zero(), |acc, &l| acc + (l - max).exp());
            loss += max + sum.ln() - row[tokens[t + 1] as usize];
        }
        loss
    }

    fn backward(&self, tokens: &[u32], cache: &Cache<T>, dlogits: &[T], grad: &mut [T]) {
        let cfg = self.cfg;
        let lay = self.layout;
        let (d, vsz) = (cfg.d_model, cfg.vocab_size);
        let n = cache.n;

        if let Some(b) = lay.head_bias {
            let db = &mut grad[b..b + vsz];
            for row in dlogits.chunks_exact(vsz) {
                for (g, &dl) in db.iter_mut().zip(row) {
                    *g += dl;
                }
            }
        }
        let mut dhidden = vec![T::zero(); n * d];
        linear_backward(
            &cache.hidden,
            d,
            self.slice(lay.head_weight, vsz * d),
            vsz,
            dlogits,
            Some(&mut dhidden),
            &mut grad[lay.head_weight..lay.head_weight + vsz * d],
        );
        let mut dx = vec![T::zero(); n * d];
        {
            let (gain, dgain) = (self.slice(lay.norm_final, d), lay.norm_final);
            rms_norm_backward(
                &cache.x_final,
                &cache.hidden_inv,
                gain,
                &dhidden,
                &mut dx,
                &mut grad[dgain..dgain + d],
            );
        }

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(lo, lc, n, dx, grad);
        }

        for (t, (&tok, dxr)) in tokens.iter().zip(dx.chunks_exact(d)).enumerate() {
            let e = lay.embed + tok as usize * d;
            axpy(&mut grad[e..e + d], T::one(), dxr);
            let p = lay.positions + t * d;
            axpy(&mut grad[p..p + d], T::one(), dxr);
        }
    }

    /// Takes the gradient w.r.t. the block output, returns it w.r.t. the block input.
    fn layer_backward(&self, lo: &LayerOffsets, lc: &LayerCache<T>, n: usize, dout: Vec<T>, grad: &mut [T]) -> Vec<T> {
        let cfg = self.cfg;
        let (d, f) = (cfg.d_model, cfg.d_ff);

        // Feed-forward half: x_out = x_mid + down(silu(g) * u).
        let mut dmid = dout.clone();
        let mut dh = vec![T::zero(); n * f];
        linear_backward(
            &lc.h,
            f,
            self.slice(lo.down, d * f),
            d,
            &dout,
            Some(&mut dh),
            &mut grad[lo.down..lo.down + d * f],
        );
        let mut dg = vec![T::zero(); n * f];
        let mut du = vec![T::zero(); n * f];
        for i in 0..n * f {
            let (g, u) = (lc.g[i], lc.u[i]);
            let s = sigmoid(g);
            du[i] = dh[i] * g * s;
            dg[i] = dh[i] * u * s * (T::one() + g * (T::one() - s));
        }
        let mut dfnorm = vec![T::zero(); n * d];
        linear_backward(
            &lc.f,
            d,
            self.slice(lo.gate, f * d),
            f,
            &dg,
            Some(&mut dfnorm),
            &mut grad[lo.gate..lo.gate + f * d],
        );
        linear_backward(
            &lc.f,
            d,
            self.slice(lo.up, f * d),
            f,
            &du,
            Some(&mut dfnorm),
            &mut grad[lo.up..lo.up + f * d],
        );
        rms_norm_backward(
            &lc.x_mid,
            &lc.f_inv,
            self.slice(lo.norm_ffn, d),
            &dfnorm,
            &mut dmid,
            &mut grad[lo.norm_ffn..lo.norm_ffn + d],
        );

        // Attention half: x_mid = x_in + o(attn(q, k, v)).
        let mut dx_in = dmid.clone();
        let mut dctx = vec![T::zero(); n * d];
        linear_backward(
            &lc.ctx,
            d,
            self.slice(lo.o, d * d),
            d,
            &dmid,
            Some(&mut dctx),
            &mut grad[lo.o..lo.o + d * d],
        );
        let heads = cfg.n_heads;
        let dhd = d / heads;
        let scale = T::of(1.0 / (dhd as f64).sqrt());
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for h in 0..heads {
            let cols = h * dhd..(h + 1) * dhd;
            for t in 0..n {
                let p = &lc.probs[(h * n + t) * n..(h * n + t) * n + t + 1];
                let dct = &dctx[t * d..][cols.clone()];
                let mut sum_pdp = T::zero();
                for s in 0..=t {
                    dp[s] = dot(dct, &lc.v[s * d..][cols.clone()]);
                    sum_pdp += p[s] * dp[s];
                    axpy(&mut dv[s * d..][cols.clone()], p[s], dct);
                }
                let qt = &lc.q[t * d..][cols.clone()];
                for s in 0..=t {
                    let ds = p[s] * (dp[s] - sum_pdp) * scale;
                    if ds != T::zero() {
                        axpy(&mut dq[t * d..][cols.clone()], ds, &lc.k[s * d..][cols.clone()]);
                        axpy(&mut dk[s * d..][cols.clone()], ds, qt);
                    }
                }
            }
        }
        let mut da = vec![T::zero(); n * d];
        for (off, dproj) in [(lo.q, &dq), (lo.k, &dk), (lo.v, &dv)] {
            linear_backward(
                &lc.a,
                d,
                self.slice(off, d * d),
                d,
                dproj,
                Some(&mut da),
                &mut grad[off..off + d * d],
            );
        }
        rms_norm_backward(
            &lc.x_in,
            &lc.a_inv,
            self.slice(lo.norm_attn, d),
            &da,
            &mut dx_in,
            &mut grad[lo.norm_attn..lo.norm_attn + d],
        );
        dx_in
    }
}
