//! Confidence-adaptive prior guidance for flow-matching and diffusion
//! samplers.
//!
//! A retrieved elite prior replaces pure noise as the sampler's starting
//! point: the flow is started at `x_t0 = (1 - t0) prior + t0 eps` and
//! integrated the rest of the way, so the frozen velocity field still has the
//! last word. Confident retrievals (high similarity, low DTW dispersion) start
//! closer to the prior.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::action_space::{ActionChunk, ActionScale, GripperMode};
use crate::error::{invalid, Error, Result};
use crate::policy::{NoisePredictor, VelocityField};
use crate::retrieval::EliteActionPrior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Similarity reference; matches the retrieval gate by default.
    pub s_ref: f64,
    pub s_scale: f64,
    pub c_max: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub t_min: f64,
    /// Euler steps over the full `t: 1 -> 0` interval.
    pub num_steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_ref: 0.9992,
            s_scale: 5e-4,
            c_max: 50.0,
            alpha: 1.0,
            beta: 0.05,
            gamma: 2.0,
            t_min: 0.3,
            num_steps: 10,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("guidance: {m}")));
        if !(self.s_scale > 0.0) {
            return bad("s_scale must be > 0");
        }
        if !(self.c_max > 0.0) {
            return bad("c_max must be > 0");
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return bad("t_min must lie in (0, 1)");
        }
        if self.num_steps == 0 {
            return bad("num_steps must be >= 1");
        }
        if ![self.s_ref, self.alpha, self.beta, self.gamma].iter().all(|v| v.is_finite()) {
            return bad("non-finite coefficient");
        }
        Ok(())
    }
}

/// `clip((s_mean - s_ref) / s_scale, -c_max, c_max)`.
pub fn normalized_similarity(mean_similarity: f64, config: &GuidanceConfig) -> f64 {
    ((mean_similarity - config.s_ref) / config.s_scale).clamp(-config.c_max, config.c_max)
}

/// `alpha * s_tilde - beta * sigma_dtw`.
pub fn retrieval_confidence(s_tilde: f64, dtw_dispersion: f64, config: &GuidanceConfig) -> f64 {
    config.alpha * s_tilde - config.beta * dtw_dispersion
}

/// `t_min + (1 - t_min) * sigmoid(-gamma * c)`.
pub fn guidance_start_time(confidence: f64, config: &GuidanceConfig) -> f64 {
    let u = config.gamma * confidence;
    // sigmoid(-u), written to stay finite for large |u|
    let s = if u >= 0.0 {
        let e = (-u).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + u.exp())
    };
    config.t_min + (1.0 - config.t_min) * s
}

/// Full confidence chain from a prior's retrieval statistics to `t0`.
pub fn prior_start_time(prior: &EliteActionPrior, config: &GuidanceConfig) -> f64 {
    let s = normalized_similarity(prior.mean_similarity, config);
    guidance_start_time(retrieval_confidence(s, prior.dtw_dispersion, config), config)
}

/// Number of Euler steps left after snapping `t0` up to the grid
/// `{0, 1/n, ..., 1}`.
pub fn snapped_steps(t0: f64, num_steps: usize) -> usize {
    let k = (t0.clamp(0.0, 1.0) * num_steps as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(num_steps)
}

fn standard_normal(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Euler integration `x <- x - dt v(x, t)` over the last `steps` grid points.
pub fn integrate_flow(field: &dyn VelocityField, x: &mut [f64], steps: usize, num_steps: usize) -> Result<()> {
    let dt = 1.0 / num_steps as f64;
    let mut v = vec![0.0; x.len()];
    for i in 0..steps {
        let t = (steps - i) as f64 * dt;
        field.velocity(x, t, &mut v);
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: i });
        }
    }
    Ok(())
}

/// Plain flow sampling from `x_1 = eps`.
pub fn flow_sample(field: &dyn VelocityField, num_steps: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut x = standard_normal(field.dim(), rng);
    integrate_flow(field, &mut x, num_steps, num_steps)?;
    Ok(x)
}

/// Result of one guided sampling call.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedSample {
    pub chunk: ActionChunk,
    /// Start time actually used (after grid snapping), `None` on fallback.
    pub t0: Option<f64>,
    /// Velocity-field or denoiser evaluations performed.
    pub evaluations: usize,
}

fn decode(flat: &[f64], scale: &ActionScale, mode: GripperMode) -> Result<ActionChunk> {
    ActionChunk::from_flat(flat, scale, mode)
}

/// Flow sampling started from `prior` at time `t0` (snapped up to the grid),
/// or from pure noise when `prior` is `None`.
pub fn flow_sample_from(
    field: &dyn VelocityField,
    prior: Option<(&ActionChunk, f64)>,
    num_steps: usize,
    scale: &ActionScale,
    mode: GripperMode,
    rng: &mut impl Rng,
) -> Result<GuidedSample> {
    if num_steps == 0 {
        return Err(invalid("flow sampler needs at least one step"));
    }
    let Some((chunk, t0)) = prior else {
        let x = flow_sample(field, num_steps, rng)?;
        return Ok(GuidedSample {
            chunk: decode(&x, scale, mode)?,
            t0: None,
            evaluations: num_steps,
        });
    };
    let k = snapped_steps(t0, num_steps);
    let t_snap = k as f64 / num_steps as f64;
    if k == 0 {
        return Ok(GuidedSample {
            chunk: chunk.clone(),
            t0: Some(0.0),
            evaluations: 0,
        });
    }
    let p = chunk.to_flat(scale);
    if p.len() != field.dim() {
        return Err(invalid(format!("prior dimension {} != policy dimension {}", p.len(), field.dim())));
    }
    let eps = standard_normal(p.len(), rng);
    let mut x: Vec<f64> = p.iter().zip(&eps).map(|(pi, ei)| (1.0 - t_snap) * pi + t_snap * ei).collect();
    integrate_flow(field, &mut x, k, num_steps)?;
    Ok(GuidedSample {
        chunk: decode(&x, scale, mode)?,
        t0: Some(t_snap),
        evaluations: k,
    })
}

/// Flow sampling with confidence-adaptive prior injection; falls back to
/// the plain sampler when no prior is available.
pub fn guided_flow_sample(
    field: &dyn VelocityField,
    prior: Option<&EliteActionPrior>,
    config: &GuidanceConfig,
    scale: &ActionScale,
    mode: GripperMode,
    rng: &mut impl Rng,
) -> Result<GuidedSample> {
    let guide = prior.map(|p| (&p.chunk, prior_start_time(p, config)));
    flow_sample_from(field, guide, config.num_steps, scale, mode, rng)
}

/// DDPM schedule on `n_steps` inference steps, subsampled from a linear beta
/// schedule over `train_steps`. `alpha_bar[0] = 1` is the clean-data level
/// and `alpha_bar[n_steps]` the fully noised one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub n_steps: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip)]
    alpha_bar: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::new(50, 1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn new(n_steps: usize, train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n_steps == 0 || train_steps < n_steps {
            return Err(Error::Config("diffusion: need 1 <= n_steps <= train_steps".into()));
        }
        if !(beta_start > 0.0 && beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::Config("diffusion: betas must satisfy 0 < start <= end < 1".into()));
        }
        let mut cum = Vec::with_capacity(train_steps + 1);
        cum.push(1.0);
        let denom = (train_steps.max(2) - 1) as f64;
        for i in 0..train_steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / denom;
            let prev = cum[i];
            cum.push(prev * (1.0 - beta));
        }
        let alpha_bar = (0..=n_steps)
            .map(|n| cum[((n * train_steps) as f64 / n_steps as f64).round() as usize])
            .collect();
        Ok(Self {
            n_steps,
            train_steps,
            beta_start,
            beta_end,
            alpha_bar,
        })
    }

    /// Rebuilds the cached cumulative products (needed after deserializing).
    pub fn rebuilt(&self) -> Result<Self> {
        Self::new(self.n_steps, self.train_steps, self.beta_start, self.beta_end)
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }
}

/// One ancestral step `x_n -> x_{n-1}` using the posterior mean given the
/// predicted clean sample.
fn reverse_step(
    predictor: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    x: &mut [f64],
    n: usize,
    eps_buf: &mut [f64],
    rng: &mut impl Rng,
) {
    let ab = schedule.alpha_bar[n];
    let ab_prev = schedule.alpha_bar[n - 1];
    let a = ab / ab_prev;
    let b = 1.0 - a;
    predictor.predict_noise(x, ab, eps_buf);
    let c0 = ab_prev.sqrt() * b / (1.0 - ab);
    let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
    let sd = (b * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
    for (xi, ei) in x.iter_mut().zip(eps_buf.iter()) {
        let x0 = (*xi - s1a * ei) / sa;
        *xi = c0 * x0 + ct * *xi;
    }
    if n > 1 {
        for xi in x.iter_mut() {
            *xi += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn reverse_from(
    predictor: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    x: &mut [f64],
    n0: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut buf = vec![0.0; x.len()];
    for n in (1..=n0).rev() {
        reverse_step(predictor, schedule, x, n, &mut buf, rng);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: n0 - n });
        }
    }
    Ok(())
}

/// Plain ancestral DDPM sampling from `x_N ~ N(0, I)`.
pub fn ddpm_sample(predictor: &dyn NoisePredictor, schedule: &DiffusionSchedule, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut x = standard_normal(predictor.dim(), rng);
    reverse_from(predictor, schedule, &mut x, schedule.n_steps, rng)?;
    Ok(x)
}

/// Diffusion start step for a flow-time `t0`: `round(t0 N)`, at least 1
/// unless `t0` is exactly 0.
pub fn diffusion_start_step(t0: f64, n_steps: usize) -> usize {
    if t0 <= 0.0 {
        0
    } else {
        ((t0.min(1.0) * n_steps as f64).round() as usize).max(1)
    }
}

/// Diffusion sampling started from the forward-noised prior at step `n0`.
pub fn diffusion_sample_from(
    predictor: &dyn NoisePredictor,
    prior: Option<(&ActionChunk, f64)>,
    schedule: &DiffusionSchedule,
    scale: &ActionScale,
    mode: GripperMode,
    rng: &mut impl Rng,
) -> Result<GuidedSample> {
    let Some((chunk, t0)) = prior else {
        let x = ddpm_sample(predictor, schedule, rng)?;
        return Ok(GuidedSample {
            chunk: decode(&x, scale, mode)?,
            t0: None,
            evaluations: schedule.n_steps,
        });
    };
    let n0 = diffusion_start_step(t0, schedule.n_steps);
    if n0 == 0 {
        return Ok(GuidedSample {
            chunk: chunk.clone(),
            t0: Some(0.0),
            evaluations: 0,
        });
    }
    let p = chunk.to_flat(scale);
    if p.len() != predictor.dim() {
        return Err(invalid(format!("prior dimension {} != policy dimension {}", p.len(), predictor.dim())));
    }
    let ab = schedule.alpha_bar[n0];
    let eps = standard_normal(p.len(), rng);
    let mut x: Vec<f64> = p.iter().zip(&eps).map(|(pi, ei)| ab.sqrt() * pi + (1.0 - ab).sqrt() * ei).collect();
    reverse_from(predictor, schedule, &mut x, n0, rng)?;
    Ok(GuidedSample {
        chunk: decode(&x, scale, mode)?,
        t0: Some(n0 as f64 / schedule.n_steps as f64),
        evaluations: n0,
    })
}

pub fn guided_diffusion_sample(
    predictor: &dyn NoisePredictor,
    prior: Option<&EliteActionPrior>,
    schedule: &DiffusionSchedule,
    config: &GuidanceConfig,
    scale: &ActionScale,
    mode: GripperMode,
    rng: &mut impl Rng,
) -> Result<GuidedSample> {
    let guide = prior.map(|p| (&p.chunk, prior_start_time(p, config)));
    diffusion_sample_from(predictor, guide, schedule, scale, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_space::{ActionStep, Vec3};
    use crate::policy::MixtureSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn similarity_normalization() {
        let c = GuidanceConfig::default();
        assert_eq!(normalized_similarity(c.s_ref, &c), 0.0);
        assert!((normalized_similarity(c.s_ref + 5e-4, &c) - 1.0).abs() < 1e-9);
        assert_eq!(normalized_similarity(c.s_ref + 1.0, &c), 50.0);
        assert_eq!(normalized_similarity(c.s_ref - 1.0, &c), -50.0);
    }

    #[test]
    fn confidence_chain() {
        let c = GuidanceConfig::default();
        assert_eq!(retrieval_confidence(0.0, 0.0, &c), 0.0);
        assert!((retrieval_confidence(2.0, 4.0, &c) - 1.8).abs() < 1e-12);
        assert!(retrieval_confidence(2.0, 5.0, &c) < retrieval_confidence(2.0, 4.0, &c));
        assert_eq!(guidance_start_time(0.0, &c), 0.3 + 0.7 / 2.0);
        assert!((guidance_start_time(1.8, &c) - 0.318618).abs() < 1e-5);
        assert!((guidance_start_time(1e6, &c) - 0.3).abs() < 1e-12);
        assert!((guidance_start_time(-1e6, &c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_snapping() {
        assert_eq!(snapped_steps(0.65, 10), 7);
        assert_eq!(snapped_steps(0.3, 10), 3);
        assert_eq!(snapped_steps(0.31, 10), 4);
        assert_eq!(snapped_steps(0.0, 10), 0);
        assert_eq!(snapped_steps(1.0, 10), 10);
    }

    fn chunk() -> ActionChunk {
        ActionChunk::new(vec![
            ActionStep::new(Vec3::new(1.0, -2.0, 0.5), Vec3::new(0.0, 0.1, 0.0), 1.0),
            ActionStep::new(Vec3::new(0.3, 0.0, 0.0), Vec3::zeros(), 0.2),
        ])
    }

    #[test]
    fn zero_start_returns_prior() {
        let spec = MixtureSpec::single(vec![0.0; 14], 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scale = ActionScale::default();
        let c = chunk();
        let out = flow_sample_from(&spec, Some((&c, 0.0)), 10, &scale, GripperMode::Continuous, &mut rng).unwrap();
        assert_eq!(out.chunk, c);
        assert_eq!(out.evaluations, 0);
        let sched = DiffusionSchedule::default();
        let out = diffusion_sample_from(&spec, Some((&c, 0.0)), &sched, &scale, GripperMode::Continuous, &mut rng).unwrap();
        assert_eq!(out.chunk, c);
    }

    #[test]
    fn fallback_matches_base_sampler() {
        let spec = MixtureSpec::single(vec![0.2; 14], 0.05).unwrap();
        let scale = ActionScale::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let guided =
            guided_flow_sample(&spec, None, &GuidanceConfig::default(), &scale, GripperMode::Continuous, &mut r1).unwrap();
        let base = ActionChunk::from_flat(&flow_sample(&spec, 10, &mut r2).unwrap(), &scale, GripperMode::Continuous).unwrap();
        assert_eq!(guided.chunk, base);
    }

    #[test]
    fn schedule_shape() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1) > 0.99);
        assert!(s.alpha_bar(50) < 1e-4);
        assert!((1..=50).all(|n| s.alpha_bar(n) < s.alpha_bar(n - 1)));
        assert_eq!(diffusion_start_step(0.31866, 50), 16);
        assert_eq!(diffusion_start_step(1e-4, 50), 1);
    }
}
