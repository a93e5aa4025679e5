//! Minimal neural-network toolkit with hand-written backpropagation.
//!
//! Activations are (H, W, C) grids; parameters live in a flat named
//! registry so the optimizer, checkpoints and finite-difference checks can
//! all walk the same storage. Every backward function here is validated
//! against central finite differences in the tests.

use std::collections::HashMap;

use ndarray::Array3;

use crate::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.dims.len(), 2);
        i * self.dims[1] + j
    }

    #[inline]
    pub fn idx4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        debug_assert_eq!(self.dims.len(), 4);
        ((a * self.dims[1] + b) * self.dims[2] + c) * self.dims[3] + d
    }
}

/// Named parameter registry with stable iteration order.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zeros_like(&self) -> Params {
        let mut out = Params::new();
        for (name, t) in &self.entries {
            out.add(name, Tensor::zeros(&t.dims));
        }
        out
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Flat coordinate access across all tensors, in registry order.
    pub fn flat_get(&self, mut idx: usize) -> f64 {
        for (_, t) in &self.entries {
            if idx < t.numel() {
                return t.data[idx];
            }
            idx -= t.numel();
        }
        panic!("flat index out of range");
    }

    pub fn flat_add(&mut self, mut idx: usize, delta: f64) {
        for (_, t) in &mut self.entries {
            if idx < t.numel() {
                t.data[idx] += delta;
                return;
            }
            idx -= t.numel();
        }
        panic!("flat index out of range");
    }

    /// Accumulates `other` (same layout) scaled by `factor`.
    pub fn accumulate(&mut self, other: &Params, factor: f64) {
        assert_eq!(self.entries.len(), other.entries.len());
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += factor * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// Validates that layout matches `reference` (names, order, dims).
    pub fn check_layout(&self, reference: &Params) -> Result<()> {
        if self.entries.len() != reference.entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter count {} vs {}",
                self.entries.len(),
                reference.entries.len()
            )));
        }
        for ((an, at), (bn, bt)) in self.entries.iter().zip(&reference.entries) {
            if an != bn || at.dims != bt.dims {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {an} {:?} vs {bn} {:?}",
                    at.dims, bt.dims
                )));
            }
        }
        Ok(())
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// 3×3 same-padding convolution: `weight` is (c_out, c_in, 3, 3),
/// `bias` (c_out); input (H, W, c_in) → output (H, W, c_out).
pub fn conv3x3_forward(input: &Array3<f64>, weight: &Tensor, bias: &Tensor) -> Array3<f64> {
    let (h, w, c_in) = input.dim();
    let c_out = weight.dims[0];
    debug_assert_eq!(weight.dims[1], c_in);
    let mut out = Array3::zeros((h, w, c_out));
    for y in 0..h {
        for x in 0..w {
            for co in 0..c_out {
                let mut acc = bias.data[co];
                for ky in 0..3usize {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let wbase = weight.idx4(co, 0, ky, kx);
                        for ci in 0..c_in {
                            acc += input[(iy as usize, ix as usize, ci)]
                                * weight.data[wbase + ci * 9];
                        }
                    }
                }
                out[(y, x, co)] = acc;
            }
        }
    }
    out
}

/// Backward of [`conv3x3_forward`]: returns the input cotangent and, when
/// `grads` is given, accumulates weight/bias gradients under the names
/// `{prefix}.weight` / `{prefix}.bias`.
pub fn conv3x3_backward(
    input: &Array3<f64>,
    weight: &Tensor,
    d_out: &Array3<f64>,
    prefix: &str,
    grads: Option<&mut Params>,
) -> Array3<f64> {
    let (h, w, c_in) = input.dim();
    let c_out = weight.dims[0];
    let mut d_in = Array3::zeros((h, w, c_in));

    if let Some(grads) = grads {
        {
            let gw = grads.get_mut(&format!("{prefix}.weight"));
            for y in 0..h {
                for x in 0..w {
                    for co in 0..c_out {
                        let g = d_out[(y, x, co)];
                        if g == 0.0 {
                            continue;
                        }
                        for ky in 0..3usize {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = x as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let wbase = gw.idx4(co, 0, ky, kx);
                                for ci in 0..c_in {
                                    gw.data[wbase + ci * 9] +=
                                        g * input[(iy as usize, ix as usize, ci)];
                                }
                            }
                        }
                    }
                }
            }
        }
        let gb = grads.get_mut(&format!("{prefix}.bias"));
        for y in 0..h {
            for x in 0..w {
                for co in 0..c_out {
                    gb.data[co] += d_out[(y, x, co)];
                }
            }
        }
    }

    for y in 0..h {
        for x in 0..w {
            for co in 0..c_out {
                let g = d_out[(y, x, co)];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..3usize {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let wbase = weight.idx4(co, 0, ky, kx);
                        for ci in 0..c_in {
                            d_in[(iy as usize, ix as usize, ci)] +=
                                g * weight.data[wbase + ci * 9];
                        }
                    }
                }
            }
        }
    }
    d_in
}

const GN_EPS: f64 = 1e-5;

/// Group-norm statistics cached for the backward pass.
pub struct GnCache {
    pub normalized: Array3<f64>,
    pub inv_std: Vec<f64>,
    pub groups: usize,
}

/// Group normalization over channel groups and all spatial positions,
/// followed by the learned per-channel affine (gamma, beta).
pub fn groupnorm_forward(
    input: &Array3<f64>,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> (Array3<f64>, GnCache) {
    let (h, w, c) = input.dim();
    debug_assert_eq!(c % groups, 0);
    let gsize = c / groups;
    let n = (h * w * gsize) as f64;

    let mut normalized = Array3::zeros((h, w, c));
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let (c0, c1) = (g * gsize, (g + 1) * gsize);
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                for ci in c0..c1 {
                    mean += input[(y, x, ci)];
                }
            }
        }
        mean /= n;
        let mut var = 0.0;
        for y in 0..h {
            for x in 0..w {
                for ci in c0..c1 {
                    let d = input[(y, x, ci)] - mean;
                    var += d * d;
                }
            }
        }
        var /= n;
        let istd = 1.0 / (var + GN_EPS).sqrt();
        inv_std[g] = istd;
        for y in 0..h {
            for x in 0..w {
                for ci in c0..c1 {
                    normalized[(y, x, ci)] = (input[(y, x, ci)] - mean) * istd;
                }
            }
        }
    }

    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                out[(y, x, ci)] = normalized[(y, x, ci)] * gamma.data[ci] + beta.data[ci];
            }
        }
    }
    (
        out,
        GnCache {
            normalized,
            inv_std,
            groups,
        },
    )
}

pub fn groupnorm_backward(
    cache: &GnCache,
    gamma: &Tensor,
    d_out: &Array3<f64>,
    prefix: &str,
    grads: Option<&mut Params>,
) -> Array3<f64> {
    let (h, w, c) = d_out.dim();
    let groups = cache.groups;
    let gsize = c / groups;
    let n = (h * w * gsize) as f64;

    if let Some(grads) = grads {
        {
            let gg = grads.get_mut(&format!("{prefix}.gamma"));
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        gg.data[ci] += d_out[(y, x, ci)] * cache.normalized[(y, x, ci)];
                    }
                }
            }
        }
        let gb = grads.get_mut(&format!("{prefix}.beta"));
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    gb.data[ci] += d_out[(y, x, ci)];
                }
            }
        }
    }

    // d_in = istd/N · (N·dxh − Σdxh − x̂·Σ(dxh·x̂)), per group, dxh = d_out·γ.
    let mut d_in = Array3::zeros((h, w, c));
    for g in 0..groups {
        let (c0, c1) = (g * gsize, (g + 1) * gsize);
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for y in 0..h {
            for x in 0..w {
                for ci in c0..c1 {
                    let dxh = d_out[(y, x, ci)] * gamma.data[ci];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * cache.normalized[(y, x, ci)];
                }
            }
        }
        let istd = cache.inv_std[g];
        for y in 0..h {
            for x in 0..w {
                for ci in c0..c1 {
                    let dxh = d_out[(y, x, ci)] * gamma.data[ci];
                    d_in[(y, x, ci)] = istd / n
                        * (n * dxh - sum_dxh - cache.normalized[(y, x, ci)] * sum_dxh_xh);
                }
            }
        }
    }
    d_in
}

/// Dense layer y = W x + b with `weight` (out, in).
pub fn linear_forward(input: &[f64], weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (rows, cols) = (weight.dims[0], weight.dims[1]);
    debug_assert_eq!(cols, input.len());
    let mut out = bias.data.clone();
    for i in 0..rows {
        let base = i * cols;
        let mut acc = 0.0;
        for j in 0..cols {
            acc += weight.data[base + j] * input[j];
        }
        out[i] += acc;
    }
    out
}

pub fn linear_backward(
    input: &[f64],
    weight: &Tensor,
    d_out: &[f64],
    prefix: &str,
    grads: Option<&mut Params>,
) -> Vec<f64> {
    let (rows, cols) = (weight.dims[0], weight.dims[1]);
    if let Some(grads) = grads {
        {
            let gw = grads.get_mut(&format!("{prefix}.weight"));
            for i in 0..rows {
                let base = i * cols;
                for j in 0..cols {
                    gw.data[base + j] += d_out[i] * input[j];
                }
            }
        }
        let gb = grads.get_mut(&format!("{prefix}.bias"));
        for i in 0..rows {
            gb.data[i] += d_out[i];
        }
    }
    let mut d_in = vec![0.0; cols];
    for i in 0..rows {
        let base = i * cols;
        for j in 0..cols {
            d_in[j] += weight.data[base + j] * d_out[i];
        }
    }
    d_in
}

/// Feature-wise affine modulation: y = x·(1 + scale_c) + shift_c, with
/// scale/shift stacked in one vector [scale..., shift...].
pub fn film_forward(input: &Array3<f64>, scale_shift: &[f64]) -> Array3<f64> {
    let (h, w, c) = input.dim();
    debug_assert_eq!(scale_shift.len(), 2 * c);
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                out[(y, x, ci)] =
                    input[(y, x, ci)] * (1.0 + scale_shift[ci]) + scale_shift[c + ci];
            }
        }
    }
    out
}

/// Returns (d_input, d_scale_shift).
pub fn film_backward(
    input: &Array3<f64>,
    scale_shift: &[f64],
    d_out: &Array3<f64>,
) -> (Array3<f64>, Vec<f64>) {
    let (h, w, c) = input.dim();
    let mut d_in = Array3::zeros((h, w, c));
    let mut d_ss = vec![0.0; 2 * c];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let g = d_out[(y, x, ci)];
                d_in[(y, x, ci)] = g * (1.0 + scale_shift[ci]);
                d_ss[ci] += g * input[(y, x, ci)];
                d_ss[c + ci] += g;
            }
        }
    }
    (d_in, d_ss)
}

/// Transformer-style sinusoidal embedding of a diffusion step index.
pub fn sinusoidal_embedding(step: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10_000.0_f64.ln()).exp();
        out[2 * i] = (step as f64 * freq).sin();
        out[2 * i + 1] = (step as f64 * freq).cos();
    }
    out
}

/// Adam with decoupled weight decay. Decay applies only to tensors whose
/// name ends in `.weight`; biases and norm parameters are exempt.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, params: &Params) -> Self {
        let m = params.entries().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.entries().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, ((name, tensor), (_, grad))) in params
            .entries
            .iter_mut()
            .zip(grads.entries())
            .enumerate()
        {
            let decay = if name.ends_with(".weight") {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..tensor.data.len() {
                let g = grad.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= self.learning_rate
                    * (m_hat / (v_hat.sqrt() + self.eps) + decay * tensor.data[i]);
            }
        }
    }
}

/// Adam state over a plain latent grid, used for latent fitting.
#[derive(Debug, Clone)]
pub struct AdamGrid {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Array3<f64>,
    v: Array3<f64>,
}

impl AdamGrid {
    pub fn new(learning_rate: f64, shape: (usize, usize, usize)) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Array3::zeros(shape),
            v: Array3::zeros(shape),
        }
    }

    /// Applies one update; `scale` multiplies the base learning rate.
    pub fn step(&mut self, x: &mut Array3<f64>, grad: &Array3<f64>, scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((xi, mi), (vi, gi)) in x
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut().zip(grad.iter()))
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *xi -= scale * self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Reverts the bookkeeping of the latest step (for rejected updates).
    pub fn undo(&mut self, x: &mut Array3<f64>, grad: &Array3<f64>, scale: f64) {
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((xi, mi), (vi, gi)) in x
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut().zip(grad.iter()))
        {
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *xi += scale * self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            *mi = (*mi - (1.0 - self.beta1) * gi) / self.beta1;
            *vi = (*vi - (1.0 - self.beta2) * gi * gi) / self.beta2;
        }
        self.t -= 1;
    }
}
