//! The conditional noise predictor ε̂(z_s, s | poses, shape, material) and
//! its analytic test oracle.
//!
//! The trainable predictor is a small convolutional network over the latent
//! grid. Conditioning enters through feature-wise affine modulation: a
//! two-layer embedding of the condition vector is concatenated with a
//! sinusoidal step embedding and mapped to per-channel scale/shift after
//! each group norm. The final convolution is zero-initialized so a fresh
//! network predicts exactly zero noise.

pub mod checkpoint;
pub mod codec;
pub mod nn;
pub mod train;

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DifferentiablePredictor, NoisePredictor, NoiseSchedule};
use crate::simlite::MaterialParams;
use crate::{Error, Result};

use nn::{
    conv3x3_backward, conv3x3_forward, film_backward, film_forward, groupnorm_backward,
    groupnorm_forward, linear_backward, linear_forward, silu, silu_grad, sinusoidal_embedding,
    GnCache, Params, Tensor,
};

pub use crate::simlite::body::{POSE_DIM, SHAPE_DIM};
pub use crate::simlite::JOINT_COUNT;

pub const MATERIAL_DIM: usize = 3;
/// Three stacked poses, the body shape and the material parameters.
pub const COND_DIM: usize = 3 * POSE_DIM + SHAPE_DIM + MATERIAL_DIM;

/// Which condition groups feed the denoiser. Disabling a group zeroes its
/// features, mirroring ablation trainings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondMask {
    pub material: bool,
    /// When false, the two preceding poses are zeroed (current pose kept).
    pub motion: bool,
}

impl Default for CondMask {
    fn default() -> Self {
        Self {
            material: true,
            motion: true,
        }
    }
}

/// Conditioning for one generated frame: the pose triplet θ_{t−2}, θ_{t−1},
/// θ_t, the body shape β and the cloth material γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondVector {
    pub poses: [Vec<f64>; 3],
    pub shape: Vec<f64>,
    pub material: MaterialParams,
}

impl CondVector {
    pub fn new(poses: [Vec<f64>; 3], shape: Vec<f64>, material: MaterialParams) -> Result<Self> {
        for p in &poses {
            if p.len() != POSE_DIM {
                return Err(Error::ShapeMismatch(format!(
                    "pose vector length {} (expected {POSE_DIM})",
                    p.len()
                )));
            }
        }
        if shape.len() != SHAPE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "shape vector length {} (expected {SHAPE_DIM})",
                shape.len()
            )));
        }
        Ok(Self {
            poses,
            shape,
            material,
        })
    }

    /// Identity pose triplet, zero shape, mid-range material.
    pub fn neutral() -> Self {
        let pose = crate::simlite::body::identity_pose_vector();
        Self {
            poses: [pose.clone(), pose.clone(), pose],
            shape: vec![0.0; SHAPE_DIM],
            material: MaterialParams {
                stretch: 120.0,
                density: 0.3,
                bending: 1e-6,
            },
        }
    }

    /// True when the material lies in the training distribution ranges.
    pub fn is_in_distribution(&self) -> bool {
        self.material.is_in_distribution()
            && self.shape.iter().all(|b| (-1.0..=1.0).contains(b))
    }

    /// Flattened, normalized feature vector of length [`COND_DIM`].
    ///
    /// Stretch and density are min-max scaled over their sampling ranges;
    /// bending spans four decades and is log-scaled first.
    pub fn features(&self, mask: CondMask) -> Vec<f64> {
        let mut out = Vec::with_capacity(COND_DIM);
        for (k, pose) in self.poses.iter().enumerate() {
            if !mask.motion && k < 2 {
                out.extend(std::iter::repeat(0.0).take(POSE_DIM));
            } else {
                out.extend_from_slice(pose);
            }
        }
        out.extend_from_slice(&self.shape);
        if mask.material {
            out.extend_from_slice(&self.material.normalized_features());
        } else {
            out.extend_from_slice(&[0.0; MATERIAL_DIM]);
        }
        debug_assert_eq!(out.len(), COND_DIM);
        out
    }
}

/// Architecture of the desk-scale conditional denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Latent grid shape (H, W, C).
    pub latent: (usize, usize, usize),
    /// Hidden channels of the three conv layers.
    pub hidden: [usize; 3],
    /// Group counts of the three group norms.
    pub groups: [usize; 3],
    pub step_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub mask: CondMask,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent: (16, 16, 4),
            hidden: [16, 32, 16],
            groups: [4, 8, 4],
            step_embed_dim: 32,
            cond_embed_dim: 64,
            mask: CondMask::default(),
        }
    }
}

impl DenoiserConfig {
    fn embed_dim(&self) -> usize {
        self.step_embed_dim + self.cond_embed_dim
    }
}

/// The trainable conditional noise predictor.
#[derive(Debug, Clone)]
pub struct ConditionalDenoiser {
    pub config: DenoiserConfig,
    pub params: Params,
}

struct ForwardCache {
    features: Vec<f64>,
    cond_pre: [Vec<f64>; 2],
    cond_act: [Vec<f64>; 2],
    embed: Vec<f64>,
    conv_in: [Array3<f64>; 3],
    gn: [GnCache; 3],
    normed: [Array3<f64>; 3],
    scale_shift: [Vec<f64>; 3],
    pre_act: [Array3<f64>; 3],
    hidden: [Array3<f64>; 3],
}

impl ConditionalDenoiser {
    /// Fresh network; hidden weights are fan-in-uniform, the final
    /// convolution and all modulation layers start at zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut dense = |params: &mut Params, name: &str, rows: usize, cols: usize, zero: bool| {
            let mut w = Tensor::zeros(&[rows, cols]);
            if !zero {
                let k = 1.0 / (cols as f64).sqrt();
                for v in &mut w.data {
                    *v = rng.random_range(-k..k);
                }
            }
            params.add(&format!("{name}.weight"), w);
            params.add(&format!("{name}.bias"), Tensor::zeros(&[rows]));
        };

        let embed = config.embed_dim();
        dense(&mut params, "cond1", config.cond_embed_dim, COND_DIM, false);
        dense(
            &mut params,
            "cond2",
            config.cond_embed_dim,
            config.cond_embed_dim,
            false,
        );

        let in_channels = [
            config.latent.2,
            config.hidden[0],
            config.hidden[1],
        ];
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5f5f_5f5f);
        for l in 0..3 {
            let (ci, co) = (in_channels[l], config.hidden[l]);
            let mut w = Tensor::zeros(&[co, ci, 3, 3]);
            let k = 1.0 / ((ci * 9) as f64).sqrt();
            for v in &mut w.data {
                *v = rng2.random_range(-k..k);
            }
            params.add(&format!("conv{}.weight", l + 1), w);
            params.add(&format!("conv{}.bias", l + 1), Tensor::zeros(&[co]));
            params.add(
                &format!("gn{}.gamma", l + 1),
                Tensor {
                    dims: vec![co],
                    data: vec![1.0; co],
                },
            );
            params.add(&format!("gn{}.beta", l + 1), Tensor::zeros(&[co]));
            dense(&mut params, &format!("film{}", l + 1), 2 * co, embed, true);
        }
        // Zero-initialized output projection: a fresh net predicts zero.
        params.add(
            "out.weight",
            Tensor::zeros(&[config.latent.2, config.hidden[2], 3, 3]),
        );
        params.add("out.bias", Tensor::zeros(&[config.latent.2]));

        Self { config, params }
    }

    pub fn with_params(config: DenoiserConfig, params: Params) -> Result<Self> {
        let reference = Self::init(config.clone(), 0);
        params.check_layout(&reference.params)?;
        Ok(Self { config, params })
    }

    fn forward(&self, z: &Array3<f64>, step: usize, cond: &CondVector) -> (Array3<f64>, ForwardCache) {
        let p = &self.params;
        let features = cond.features(self.config.mask);

        let c1_pre = linear_forward(&features, p.get("cond1.weight"), p.get("cond1.bias"));
        let c1: Vec<f64> = c1_pre.iter().map(|&v| silu(v)).collect();
        let c2_pre = linear_forward(&c1, p.get("cond2.weight"), p.get("cond2.bias"));
        let c2: Vec<f64> = c2_pre.iter().map(|&v| silu(v)).collect();

        let mut embed = sinusoidal_embedding(step, self.config.step_embed_dim);
        embed.extend_from_slice(&c2);

        let mut conv_in: Vec<Array3<f64>> = Vec::with_capacity(3);
        let mut gn: Vec<GnCache> = Vec::with_capacity(3);
        let mut normed: Vec<Array3<f64>> = Vec::with_capacity(3);
        let mut scale_shift: Vec<Vec<f64>> = Vec::with_capacity(3);
        let mut pre_act: Vec<Array3<f64>> = Vec::with_capacity(3);
        let mut hidden: Vec<Array3<f64>> = Vec::with_capacity(3);

        let mut h = z.clone();
        for l in 1..=3 {
            let a = conv3x3_forward(
                &h,
                p.get(&format!("conv{l}.weight")),
                p.get(&format!("conv{l}.bias")),
            );
            let (n, cache) = groupnorm_forward(
                &a,
                p.get(&format!("gn{l}.gamma")),
                p.get(&format!("gn{l}.beta")),
                self.config.groups[l - 1],
            );
            let ss = linear_forward(
                &embed,
                p.get(&format!("film{l}.weight")),
                p.get(&format!("film{l}.bias")),
            );
            let f = film_forward(&n, &ss);
            let act = f.mapv(silu);

            conv_in.push(h);
            gn.push(cache);
            normed.push(n);
            scale_shift.push(ss);
            pre_act.push(f);
            hidden.push(act.clone());
            h = act;
        }

        let out = conv3x3_forward(&h, p.get("out.weight"), p.get("out.bias"));
        let cache = ForwardCache {
            features,
            cond_pre: [c1_pre, c2_pre],
            cond_act: [c1, c2],
            embed,
            conv_in: conv_in.try_into().unwrap(),
            gn: gn.try_into().map_err(|_| ()).unwrap(),
            normed: normed.try_into().unwrap(),
            scale_shift: scale_shift.try_into().unwrap(),
            pre_act: pre_act.try_into().unwrap(),
            hidden: hidden.try_into().unwrap(),
        };
        (out, cache)
    }

    /// Backward pass; accumulates parameter gradients into `grads` when
    /// given, and always returns the input cotangent.
    fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &Array3<f64>,
        mut grads: Option<&mut Params>,
    ) -> Array3<f64> {
        let p = &self.params;
        let mut d_embed = vec![0.0; cache.embed.len()];

        let mut d_h = conv3x3_backward(
            &cache.hidden[2],
            p.get("out.weight"),
            d_out,
            "out",
            grads.as_deref_mut(),
        );

        for l in (1..=3usize).rev() {
            let i = l - 1;
            // SiLU
            let mut d_f = d_h;
            for (df, f) in d_f.iter_mut().zip(cache.pre_act[i].iter()) {
                *df *= silu_grad(*f);
            }
            // FiLM
            let (d_n, d_ss) = film_backward(&cache.normed[i], &cache.scale_shift[i], &d_f);
            let d_e = linear_backward(
                &cache.embed,
                p.get(&format!("film{l}.weight")),
                &d_ss,
                &format!("film{l}"),
                grads.as_deref_mut(),
            );
            for (a, b) in d_embed.iter_mut().zip(&d_e) {
                *a += b;
            }
            // GroupNorm
            let d_a = groupnorm_backward(
                &cache.gn[i],
                p.get(&format!("gn{l}.gamma")),
                &d_n,
                &format!("gn{l}"),
                grads.as_deref_mut(),
            );
            // Conv
            d_h = conv3x3_backward(
                &cache.conv_in[i],
                p.get(&format!("conv{l}.weight")),
                &d_a,
                &format!("conv{l}"),
                grads.as_deref_mut(),
            );
        }

        // Condition embedding path (step embedding part is constant).
        let d_c2: Vec<f64> = d_embed[self.config.step_embed_dim..].to_vec();
        let d_c2_pre: Vec<f64> = d_c2
            .iter()
            .zip(&cache.cond_pre[1])
            .map(|(g, &x)| g * silu_grad(x))
            .collect();
        let d_c1 = linear_backward(
            &cache.cond_act[0],
            p.get("cond2.weight"),
            &d_c2_pre,
            "cond2",
            grads.as_deref_mut(),
        );
        let d_c1_pre: Vec<f64> = d_c1
            .iter()
            .zip(&cache.cond_pre[0])
            .map(|(g, &x)| g * silu_grad(x))
            .collect();
        let _ = linear_backward(
            &cache.features,
            p.get("cond1.weight"),
            &d_c1_pre,
            "cond1",
            grads,
        );

        d_h
    }

    /// Squared-error denoising loss for one sample, with parameter
    /// gradients accumulated into `grads`: L = mean((ε̂ − ε)²).
    pub fn loss_and_grad(
        &self,
        z_noised: &Array3<f64>,
        step: usize,
        cond: &CondVector,
        eps_target: &Array3<f64>,
        grads: &mut Params,
    ) -> f64 {
        let (out, cache) = self.forward(z_noised, step, cond);
        let n = out.len() as f64;
        let mut loss = 0.0;
        let mut d_out = Array3::zeros(out.dim());
        for ((o, t), d) in out.iter().zip(eps_target.iter()).zip(d_out.iter_mut()) {
            let r = o - t;
            loss += r * r;
            *d = 2.0 * r / n;
        }
        self.backward(&cache, &d_out, Some(grads));
        loss / n
    }
}

impl NoisePredictor for ConditionalDenoiser {
    fn predict(&self, z: &Array3<f64>, step: usize, cond: &CondVector) -> Array3<f64> {
        self.forward(z, step, cond).0
    }
}

impl DifferentiablePredictor for ConditionalDenoiser {
    fn vjp_input(
        &self,
        z: &Array3<f64>,
        step: usize,
        cond: &CondVector,
        cotangent: &Array3<f64>,
    ) -> Array3<f64> {
        let (_, cache) = self.forward(z, step, cond);
        self.backward(&cache, cotangent, None)
    }
}

/// Exact posterior-expected noise for data z₀ ~ N(mean, variance·I):
/// ε̂(z_s, s) = σ_s (z_s − α_s·mean) / (α_s²·variance + σ_s²).
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    pub mean: Array3<f64>,
    pub variance: f64,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mean: Array3<f64>, variance: f64, schedule: NoiseSchedule) -> Result<Self> {
        if variance <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "variance {variance} must be positive"
            )));
        }
        Ok(Self {
            mean,
            variance,
            schedule,
        })
    }

    fn gain(&self, step: usize) -> f64 {
        let (a, s) = (self.schedule.alpha(step), self.schedule.sigma(step));
        s / (a * a * self.variance + s * s)
    }
}

impl NoisePredictor for AnalyticGaussianDenoiser {
    fn predict(&self, z: &Array3<f64>, step: usize, _cond: &CondVector) -> Array3<f64> {
        let a = self.schedule.alpha(step);
        (z - &(&self.mean * a)) * self.gain(step)
    }
}

impl DifferentiablePredictor for AnalyticGaussianDenoiser {
    fn vjp_input(
        &self,
        _z: &Array3<f64>,
        step: usize,
        _cond: &CondVector,
        cotangent: &Array3<f64>,
    ) -> Array3<f64> {
        cotangent * self.gain(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{cosine_schedule, gaussian_grid};
    use approx::assert_relative_eq;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            latent: (4, 4, 2),
            hidden: [4, 6, 4],
            groups: [2, 3, 2],
            step_embed_dim: 8,
            cond_embed_dim: 12,
            mask: CondMask::default(),
        }
    }

    fn randomize(params: &mut Params, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = params.entries().map(|(n, _)| n.to_string()).collect();
        for name in names {
            for v in &mut params.get_mut(&name).data {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }

    #[test]
    fn fresh_network_predicts_zero() {
        let net = ConditionalDenoiser::init(small_config(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = gaussian_grid((4, 4, 2), &mut rng);
        let out = net.predict(&z, 100, &CondVector::neutral());
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = ConditionalDenoiser::init(small_config(), 3);
        randomize(&mut net.params, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = gaussian_grid((4, 4, 2), &mut rng);
        let cond = CondVector::neutral();
        assert_eq!(net.predict(&z, 50, &cond), net.predict(&z, 50, &cond));
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut net = ConditionalDenoiser::init(small_config(), 6);
        randomize(&mut net.params, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = gaussian_grid((4, 4, 2), &mut rng);
        let eps_target = gaussian_grid((4, 4, 2), &mut rng);
        let cond = CondVector::neutral();
        let step = 77;

        let mut grads = net.params.zeros_like();
        let _ = net.loss_and_grad(&z, step, &cond, &eps_target, &mut grads);

        let total = net.params.total_len();
        let eps = 1e-5;
        let mut checked = 0;
        for probe in 0..300 {
            let idx = (probe * 977) % total;
            let analytic = grads.flat_get(idx);
            let mut plus = net.clone();
            plus.params.flat_add(idx, eps);
            let mut minus = net.clone();
            minus.params.flat_add(idx, -eps);
            let mut sink = net.params.zeros_like();
            let lp = plus.loss_and_grad(&z, step, &cond, &eps_target, &mut sink);
            let lm = minus.loss_and_grad(&z, step, &cond, &eps_target, &mut sink);
            let fd = (lp - lm) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs());
            if denom < 1e-9 {
                continue;
            }
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "param {idx}: analytic {analytic} vs fd {fd}"
            );
            checked += 1;
        }
        assert!(checked > 100, "only {checked} gradients were checkable");
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let mut net = ConditionalDenoiser::init(small_config(), 9);
        randomize(&mut net.params, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = gaussian_grid((4, 4, 2), &mut rng);
        let cot = gaussian_grid((4, 4, 2), &mut rng);
        let cond = CondVector::neutral();
        let step = 300;

        let vjp = net.vjp_input(&z, step, &cond, &cot);
        let loss = |z: &Array3<f64>| -> f64 {
            net.predict(z, step, &cond)
                .iter()
                .zip(cot.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for i in (0..z.len()).step_by(3) {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus.as_slice_mut().unwrap()[i] += eps;
            minus.as_slice_mut().unwrap()[i] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            assert_relative_eq!(
                vjp.as_slice().unwrap()[i],
                fd,
                epsilon = 1e-6,
                max_relative = 1e-4
            );
        }
    }

    #[test]
    fn conditioning_changes_output() {
        let mut net = ConditionalDenoiser::init(small_config(), 12);
        randomize(&mut net.params, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = gaussian_grid((4, 4, 2), &mut rng);
        let a = CondVector::neutral();
        let mut b = CondVector::neutral();
        b.material.stretch = 40.0;
        b.shape[0] = 0.9;
        assert_ne!(net.predict(&z, 50, &a), net.predict(&z, 50, &b));
    }

    #[test]
    fn cond_mask_zeroes_feature_groups() {
        let cond = CondVector::neutral();
        let full = cond.features(CondMask::default());
        let no_material = cond.features(CondMask {
            material: false,
            motion: true,
        });
        assert_eq!(full.len(), COND_DIM);
        assert!(no_material[COND_DIM - 3..].iter().all(|&v| v == 0.0));
        assert_ne!(full[COND_DIM - 3..], no_material[COND_DIM - 3..]);

        let no_motion = cond.features(CondMask {
            material: true,
            motion: false,
        });
        assert!(no_motion[..2 * POSE_DIM].iter().all(|&v| v == 0.0));
        assert_eq!(no_motion[2 * POSE_DIM..3 * POSE_DIM], full[2 * POSE_DIM..3 * POSE_DIM]);
    }

    #[test]
    fn analytic_denoiser_zero_at_scaled_mean() {
        let sched = cosine_schedule(1000, 1e-4, 0.02).unwrap();
        let mean = Array3::from_elem((2, 2, 1), 0.7);
        let den = AnalyticGaussianDenoiser::new(mean.clone(), 0.25, sched.clone()).unwrap();
        let s = 500;
        let z = &mean * sched.alpha(s);
        let out = den.predict(&z, s, &CondVector::neutral());
        assert!(out.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn analytic_denoiser_point_mass_limit() {
        let sched = cosine_schedule(1000, 1e-4, 0.02).unwrap();
        let mean = Array3::from_elem((1, 1, 1), 0.3);
        let tiny = AnalyticGaussianDenoiser::new(mean.clone(), 1e-12, sched.clone()).unwrap();
        let s = 600;
        let z = Array3::from_elem((1, 1, 1), 1.1);
        let out = tiny.predict(&z, s, &CondVector::neutral());
        let expected = (1.1 - sched.alpha(s) * 0.3) / sched.sigma(s);
        assert_relative_eq!(out[(0, 0, 0)], expected, max_relative = 1e-9);
    }

    #[test]
    fn analytic_denoiser_matches_posterior_regression() {
        // Regress ε on z_s over joint draws: the slope must match the
        // closed-form gain σ/(α²v+σ²) within 3 standard errors.
        let sched = cosine_schedule(1000, 1e-4, 0.02).unwrap();
        let (m, v, s) = (0.4, 0.09, 350);
        let den =
            AnalyticGaussianDenoiser::new(Array3::from_elem((1, 1, 1), m), v, sched.clone())
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = 100_000;
        let mut zs = Vec::with_capacity(n);
        let mut es = Vec::with_capacity(n);
        for _ in 0..n {
            let z0 = m + v.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            zs.push(sched.alpha(s) * z0 + sched.sigma(s) * e);
            es.push(e);
        }
        let mean_z = zs.iter().sum::<f64>() / n as f64;
        let mean_e = es.iter().sum::<f64>() / n as f64;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for i in 0..n {
            sxy += (zs[i] - mean_z) * (es[i] - mean_e);
            sxx += (zs[i] - mean_z) * (zs[i] - mean_z);
        }
        let slope = sxy / sxx;
        let gain = den.gain(s);
        // Residual-based slope standard error.
        let mut ss_res = 0.0;
        for i in 0..n {
            let r = (es[i] - mean_e) - slope * (zs[i] - mean_z);
            ss_res += r * r;
        }
        let se = (ss_res / (n as f64 - 2.0) / sxx).sqrt();
        assert!(
            (slope - gain).abs() < 3.0 * se,
            "slope {slope} vs gain {gain} (se {se})"
        );
    }
}
