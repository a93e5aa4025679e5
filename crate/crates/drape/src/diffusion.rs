//! Noise schedules, forward diffusion and reverse samplers.
//!
//! The reverse samplers are deterministic ODE-style updates: plain DDIM and
//! the second-order multistep DPM-Solver++ (2M), which reduces to DDIM at
//! first order. Guidance gradients are folded into the predicted noise by
//! the sampling loop before each update. An optional stochastic churn term
//! is available behind a config flag; the default is fully deterministic.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::CondVector;
use crate::{Error, Result};

/// Per-step noise variance tables over the training step range.
///
/// Step index s runs from 0 (clean data, ᾱ₀ = 1) to `steps` (most noised).
/// For every s, α_s² + σ_s² = 1 exactly.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Total diffusion steps S.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, step: usize) -> f64 {
        self.betas[step - 1]
    }

    pub fn alpha_bar(&self, step: usize) -> f64 {
        self.alpha_bars[step]
    }

    /// Scaling factor α_s = √ᾱ_s.
    pub fn alpha(&self, step: usize) -> f64 {
        self.alpha_bars[step].sqrt()
    }

    /// Noise standard deviation σ_s = √(1 − ᾱ_s).
    pub fn sigma(&self, step: usize) -> f64 {
        (1.0 - self.alpha_bars[step]).sqrt()
    }

    /// Log signal-to-noise half-ratio λ_s = ln(α_s/σ_s); +∞ at s = 0.
    pub fn log_snr(&self, step: usize) -> f64 {
        if step == 0 {
            f64::INFINITY
        } else {
            (self.alpha(step) / self.sigma(step)).ln()
        }
    }

    fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for (i, &b) in betas.iter().enumerate() {
            if !(0.0..1.0).contains(&b) || b == 0.0 {
                return Err(Error::InvalidParam(format!("beta[{i}] = {b} outside (0,1)")));
            }
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }
}

/// Squared-cosine variance schedule, affinely rescaled so the per-step
/// variances span exactly [`beta_start`, `beta_end`].
pub fn cosine_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidParam("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParam(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    const OFFSET: f64 = 0.008;
    let f = |t: f64| ((t + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2)
        .cos()
        .powi(2);
    let raw: Vec<f64> = (1..=steps)
        .map(|u| {
            let t0 = (u - 1) as f64 / steps as f64;
            let t1 = u as f64 / steps as f64;
            1.0 - f(t1) / f(t0)
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let betas = raw
        .iter()
        .map(|&b| {
            if span <= 0.0 {
                beta_start
            } else {
                beta_start + (b - lo) / span * (beta_end - beta_start)
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// Constant-β schedule; ᾱ_s = (1 − β)^s in closed form. Test fallback.
pub fn constant_beta_schedule(steps: usize, beta: f64) -> Result<NoiseSchedule> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParam(format!("beta = {beta} outside (0,1)")));
    }
    NoiseSchedule::from_betas(vec![beta; steps])
}

/// H×W×C latent grid together with the schedule step it represents.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub grid: Array3<f64>,
    pub step: usize,
}

impl Latent {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.grid.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.grid.iter().all(|v| v.is_finite())
    }
}

/// Which reverse-update rule the sampler applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ddim,
    /// Second-order multistep DPM-Solver++; first step falls back to DDIM.
    DpmPlusPlus2M,
}

/// Sampler settings; fully determines the reverse trajectory given a seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub inference_steps: usize,
    pub kind: SamplerKind,
    /// Temporal-consistency guidance weight λ_t.
    pub lambda_temporal: f64,
    /// Penetration guidance weight λ_c.
    pub lambda_collision: f64,
    pub latent_opt_iterations: usize,
    pub latent_opt_step: f64,
    /// DDPM-style ancestral noise scale in [0,1]; 0 keeps the ODE sampler.
    pub churn: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            inference_steps: 20,
            kind: SamplerKind::DpmPlusPlus2M,
            lambda_temporal: 1.0,
            lambda_collision: 1.0,
            latent_opt_iterations: 10,
            latent_opt_step: 0.1,
            churn: 0.0,
            seed: 0,
        }
    }
}

/// A conditional noise predictor ε̂(z_s, s | cond).
pub trait NoisePredictor {
    fn predict(&self, z: &Array3<f64>, step: usize, cond: &CondVector) -> Array3<f64>;
}

/// Noise predictor that can also backpropagate a cotangent to its input.
pub trait DifferentiablePredictor: NoisePredictor {
    /// Returns (∂ε̂/∂z)ᵀ· cotangent at (z, step, cond).
    fn vjp_input(
        &self,
        z: &Array3<f64>,
        step: usize,
        cond: &CondVector,
        cotangent: &Array3<f64>,
    ) -> Array3<f64>;
}

/// Evaluates guidance-loss gradients ∇_z L at a sampler step.
pub trait GuidanceEval {
    fn gradient(&self, z: &Array3<f64>, step: usize) -> Result<Array3<f64>>;
}

/// Forward diffusion z_s = α_s z₀ + σ_s ε.
pub fn forward_diffuse(
    z0: &Latent,
    step: usize,
    eps: &Array3<f64>,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    if eps.dim() != z0.grid.dim() {
        return Err(Error::ShapeMismatch(format!(
            "noise shape {:?} vs latent {:?}",
            eps.dim(),
            z0.grid.dim()
        )));
    }
    let (a, s) = (schedule.alpha(step), schedule.sigma(step));
    Ok(Latent {
        grid: &z0.grid * a + eps * s,
        step,
    })
}

/// Deterministic DDIM update from step `s_from` to `s_to` (< s_from):
/// z' = α'·(z − σ ε̂)/α + σ' ε̂.
pub fn ddim_step(
    z: &Array3<f64>,
    s_from: usize,
    s_to: usize,
    eps_hat: &Array3<f64>,
    schedule: &NoiseSchedule,
) -> Array3<f64> {
    let (a0, s0) = (schedule.alpha(s_from), schedule.sigma(s_from));
    let (a1, s1) = (schedule.alpha(s_to), schedule.sigma(s_to));
    (z - &(eps_hat * s0)) * (a1 / a0) + eps_hat * s1
}

/// Previous model output carried between multistep updates.
#[derive(Debug, Clone)]
pub struct DpmState {
    /// Step at which `data_pred` was produced.
    pub step: usize,
    /// Data prediction x̂ = (z − σ ε̃)/α at that step.
    pub data_pred: Array3<f64>,
}

/// Second-order multistep DPM-Solver++ update from `s_from` to `s_to`.
///
/// `eps_tilde` is the guided noise prediction at `s_from` (guidance
/// gradients already added). With `state = None`, or on the final step to
/// s = 0, this is exactly the DDIM update. Returns the new latent and the
/// data prediction to carry forward.
pub fn dpmpp_step(
    z: &Array3<f64>,
    s_from: usize,
    s_to: usize,
    eps_tilde: &Array3<f64>,
    state: Option<&DpmState>,
    schedule: &NoiseSchedule,
) -> (Array3<f64>, DpmState) {
    let (a0, s0) = (schedule.alpha(s_from), schedule.sigma(s_from));
    let data_pred = (z - &(eps_tilde * s0)) / a0;

    let first_order = state.is_none() || s_to == 0;
    let next = if first_order {
        ddim_step(z, s_from, s_to, eps_tilde, schedule)
    } else {
        let prev = state.unwrap();
        let (a1, s1) = (schedule.alpha(s_to), schedule.sigma(s_to));
        let h = schedule.log_snr(s_to) - schedule.log_snr(s_from);
        let h_prev = schedule.log_snr(s_from) - schedule.log_snr(prev.step);
        let r = h_prev / h;
        // D = x̂ + (1/2r)(x̂ − x̂_prev); z' = (σ'/σ) z − α'(e^{−h} − 1) D.
        let d = &data_pred + &((&data_pred - &prev.data_pred) * (0.5 / r));
        z * (s1 / s0) - d * (a1 * ((-h).exp() - 1.0))
    };
    (
        next,
        DpmState {
            step: s_from,
            data_pred,
        },
    )
}

/// Uniform-stride step subsequence from `training_steps` down to 0 with
/// `inference_steps` transitions.
pub fn step_subsequence(training_steps: usize, inference_steps: usize) -> Result<Vec<usize>> {
    if inference_steps == 0 || inference_steps > training_steps {
        return Err(Error::InvalidParam(format!(
            "inference steps {inference_steps} must be in 1..={training_steps}"
        )));
    }
    let seq: Vec<usize> = (0..=inference_steps)
        .map(|i| {
            (((inference_steps - i) as f64) * training_steps as f64 / inference_steps as f64)
                .round() as usize
        })
        .collect();
    for w in seq.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::InvalidParam(
                "step subsequence is not strictly decreasing".into(),
            ));
        }
    }
    Ok(seq)
}

/// The reverse trajectory of one sampling run, kept for truncated
/// backpropagation: `steps[i]` is the schedule step of `latents[i]`, with
/// `latents[0] = z_T` and the last entry z₀.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub steps: Vec<usize>,
    pub latents: Vec<Array3<f64>>,
    /// Guided noise predictions ε̃ at each visited step except the last.
    pub eps_tilde: Vec<Array3<f64>>,
    pub kind: SamplerKind,
}

/// Runs the configured reverse sampler from a caller-supplied initial
/// latent. Deterministic unless `config.churn > 0`.
pub fn sample_from(
    z_init: Array3<f64>,
    predictor: &dyn NoisePredictor,
    cond: &CondVector,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    guidance: Option<&dyn GuidanceEval>,
) -> Result<(Latent, SampleTrace)> {
    let seq = step_subsequence(schedule.steps(), config.inference_steps)?;
    let use_guidance =
        guidance.is_some() && (config.lambda_temporal > 0.0 || config.lambda_collision > 0.0);

    let mut churn_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut z = z_init;
    let mut state: Option<DpmState> = None;
    let mut trace = SampleTrace {
        steps: seq.clone(),
        latents: vec![z.clone()],
        eps_tilde: Vec::new(),
        kind: config.kind,
    };

    for w in seq.windows(2) {
        let (s_from, s_to) = (w[0], w[1]);
        let mut eps = predictor.predict(&z, s_from, cond);
        if use_guidance {
            let g = guidance.unwrap().gradient(&z, s_from)?;
            if g.dim() != eps.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "guidance gradient {:?} vs latent {:?}",
                    g.dim(),
                    eps.dim()
                )));
            }
            eps += &g;
        }

        z = match config.kind {
            SamplerKind::Ddim => ddim_step(&z, s_from, s_to, &eps, schedule),
            SamplerKind::DpmPlusPlus2M => {
                let (next, new_state) = dpmpp_step(&z, s_from, s_to, &eps, state.as_ref(), schedule);
                state = Some(new_state);
                next
            }
        };

        if config.churn > 0.0 && s_to > 0 {
            // DDPM-style ancestral noise, scaled by the churn factor.
            let var = (schedule.sigma(s_to) / schedule.sigma(s_from)).powi(2)
                * (1.0 - schedule.alpha_bar(s_from) / schedule.alpha_bar(s_to));
            let std = config.churn * var.max(0.0).sqrt();
            z.mapv_inplace(|v| v + std * churn_rng.sample::<f64, _>(StandardNormal));
        }

        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sampler latent"));
        }
        trace.eps_tilde.push(eps);
        trace.latents.push(z.clone());
    }

    Ok((
        Latent {
            grid: z,
            step: 0,
        },
        trace,
    ))
}

/// Draws z_T ~ N(0, I) from the config seed and runs the reverse sampler.
pub fn sample(
    predictor: &dyn NoisePredictor,
    cond: &CondVector,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    guidance: Option<&dyn GuidanceEval>,
    shape: (usize, usize, usize),
) -> Result<(Latent, SampleTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let z_init = gaussian_grid(shape, &mut rng);
    sample_from(z_init, predictor, cond, config, schedule, guidance)
}

/// Standard-normal grid from an explicit RNG.
pub fn gaussian_grid(shape: (usize, usize, usize), rng: &mut impl Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// Backpropagates ∂L/∂z₀ through the last `depth` sampler transitions of a
/// recorded trajectory, re-linearizing the predictor at each visited point.
///
/// Earlier transitions are treated as frozen: the cotangent at the
/// truncation boundary is returned as the gradient with respect to z_T.
/// Guidance terms recorded in the trace are treated as constants.
pub fn backprop_through_trace(
    trace: &SampleTrace,
    cotangent_z0: &Array3<f64>,
    depth: usize,
    predictor: &dyn DifferentiablePredictor,
    cond: &CondVector,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    let n = trace.steps.len() - 1; // number of transitions
    if trace.latents.len() != n + 1 || trace.eps_tilde.len() != n {
        return Err(Error::ShapeMismatch("inconsistent sample trace".into()));
    }
    let depth = depth.min(n);
    let lowest = n - depth;

    // Express transition i as z_{i+1} = u_i z_i + p_i x_i + q_i x_{i-1},
    // where x_i is the data prediction at step i.
    let mut cz = cotangent_z0.clone();
    let mut cx: Vec<Option<Array3<f64>>> = vec![None; n + 1];

    for i in (lowest..n).rev() {
        let (s_from, s_to) = (trace.steps[i], trace.steps[i + 1]);
        let (a0, s0) = (schedule.alpha(s_from), schedule.sigma(s_from));
        let (a1, s1) = (schedule.alpha(s_to), schedule.sigma(s_to));

        let first_order = trace.kind == SamplerKind::Ddim || i == 0 || s_to == 0;
        let (u, p, q) = if first_order {
            (s1 / s0, a1 - s1 * a0 / s0, 0.0)
        } else {
            let h = schedule.log_snr(s_to) - schedule.log_snr(s_from);
            let h_prev = schedule.log_snr(s_from) - schedule.log_snr(trace.steps[i - 1]);
            let c = 0.5 * h / h_prev;
            let base = -a1 * ((-h).exp() - 1.0);
            (s1 / s0, base * (1.0 + c), -base * c)
        };

        // Accumulate cotangents of this transition's inputs.
        let mut cxi = &cz * p;
        if let Some(extra) = cx[i].take() {
            cxi += &extra;
        }
        if q != 0.0 {
            let contrib = &cz * q;
            match &mut cx[i - 1] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        }
        let mut cz_next = &cz * u;

        // x_i = (z_i − σ ε̃(z_i))/α: route the x cotangent into z both
        // directly and through the predictor's input Jacobian.
        cz_next += &(&cxi * (1.0 / a0));
        let eps_cot = &cxi * (-s0 / a0);
        cz_next += &predictor.vjp_input(&trace.latents[i], s_from, cond, &eps_cot);

        cz = cz_next;
        if !cz.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sampler backprop"));
        }
    }
    Ok(cz)
}

/// Gradient descent with backtracking on the initial latent.
///
/// `objective` returns the loss and its gradient with respect to z_T. The
/// accepted-iterate objective sequence is non-increasing; a step that fails
/// to decrease the loss after backtracking ends the optimization.
pub fn optimize_initial_latent(
    z_init: Array3<f64>,
    objective: &mut dyn FnMut(&Array3<f64>) -> Result<(f64, Array3<f64>)>,
    iterations: usize,
    step_size: f64,
) -> Result<Array3<f64>> {
    if iterations == 0 {
        return Ok(z_init);
    }
    let mut z = z_init;
    let (mut value, mut grad) = objective(&z)?;
    if !value.is_finite() || !grad.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("latent objective"));
    }
    let mut lr = step_size;
    for _ in 0..iterations {
        let mut accepted = false;
        for _ in 0..12 {
            let candidate = &z - &(&grad * lr);
            let (cand_value, cand_grad) = objective(&candidate)?;
            if !cand_value.is_finite() || !cand_grad.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("latent objective"));
            }
            if cand_value <= value {
                z = candidate;
                value = cand_value;
                grad = cand_grad;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
        lr = (lr * 1.5).min(step_size);
    }
    Ok(z)
}
