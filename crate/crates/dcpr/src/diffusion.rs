//! Diffusion schedule and the forward / reverse processes.
//!
//! The noise schedule is built directly in cumulative form: a square-root
//! curve `abar(t) = 1 - sqrt(t/T + w)` clamped to `[1e-5, 1 - 1e-5]`, with
//! short linear ramps substituted where clamping would flatten the curve so
//! that `abar` stays *strictly* decreasing and ends exactly on the floor at
//! `t = T`. Per-step quantities derive from it: `alpha_t =
//! abar_t/abar_{t-1}`, `beta_t = 1 - alpha_t`.
//!
//! The reverse direction comes in two flavours: the stochastic single-step
//! posterior update, and a deterministic skip-step update used with a
//! shortened step subsequence for accelerated inference.

use thiserror::Error;

use crate::numerics::{Matrix, Real, Rng};

/// Lower clamp for `abar`; the schedule ends exactly here at `t = T`.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;
/// Upper clamp for `abar`.
pub const ALPHA_BAR_CEIL: f64 = 1.0 - 1e-5;
/// Largest supported step count.
pub const MAX_STEPS: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("step count must be in [2, {MAX_STEPS}], got {t_max}")]
    InvalidStepCount { t_max: usize },
    #[error("noise offset w={w} is outside the usable range (need 0 < w and 1 - sqrt(w) > 4e-5)")]
    InvalidNoiseOffset { w: f64 },
    #[error("diffusion step {t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("reverse step count must be in 1..={t_max}, got {t_r}")]
    InvalidSubsequence { t_r: usize, t_max: usize },
    #[error("skip step must go backwards: from {from} to {to}")]
    StepOrder { from: usize, to: usize },
}

/// Precomputed noise schedule for `t = 0..=T`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    t_max: usize,
    w: f64,
    /// `abar[t]`, length `T + 1`; strictly decreasing within the clamp range.
    alpha_bar: Vec<f64>,
    /// `alpha[t] = abar[t]/abar[t-1]`, length `T + 1`; index 0 unused.
    alpha: Vec<f64>,
    /// `beta[t] = 1 - alpha[t]`, length `T + 1`; index 0 unused.
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Build the schedule for `t_max` steps with noise offset `w`.
    pub fn build(t_max: usize, w: f64) -> Result<Self, DiffusionError> {
        if t_max < 2 || t_max > MAX_STEPS {
            return Err(DiffusionError::InvalidStepCount { t_max });
        }
        // The raw curve must start clearly above the floor ramp's trigger
        // (2e-5) or the whole schedule degenerates into the clamp.
        if !(w > 0.0) || 1.0 - w.sqrt() <= 4.0 * ALPHA_BAR_FLOOR {
            return Err(DiffusionError::InvalidNoiseOffset { w });
        }

        let tf = t_max as f64;
        let raw: Vec<f64> = (0..=t_max).map(|t| 1.0 - (t as f64 / tf + w).sqrt()).collect();

        let mut alpha_bar = raw.clone();

        // Head: if the curve starts above the ceiling, replace the clamped
        // prefix with a strictly decreasing ramp from the ceiling down to
        // the first comfortably-unclamped value.
        let head_trigger = 1.0 - 2.0 * ALPHA_BAR_FLOOR;
        if raw[0] > ALPHA_BAR_CEIL {
            let mut join = 0;
            while join <= t_max && raw[join] > head_trigger {
                join += 1;
            }
            // raw(T) < 0, so a join below the trigger always exists.
            let lo = raw[join];
            for t in 0..join {
                let frac = t as f64 / join as f64;
                alpha_bar[t] = ALPHA_BAR_CEIL + frac * (lo - ALPHA_BAR_CEIL);
            }
        }

        // Tail: the raw curve always dips below the floor by t = T (raw(T)
        // < 0). Replace the tail from the first value near the floor with a
        // ramp that lands exactly on the floor at t = T.
        let tail_trigger = 2.0 * ALPHA_BAR_FLOOR;
        let mut start = 0;
        while start <= t_max && alpha_bar[start] >= tail_trigger {
            start += 1;
        }
        debug_assert!(start > 0, "w validation keeps abar[0] above the tail trigger");
        let hi = alpha_bar[start - 1];
        let span = (t_max - (start - 1)) as f64;
        for t in start..=t_max {
            let frac = (t - (start - 1)) as f64 / span;
            alpha_bar[t] = hi + frac * (ALPHA_BAR_FLOOR - hi);
        }
        // Exactness at the endpoint regardless of rounding.
        alpha_bar[t_max] = ALPHA_BAR_FLOOR;

        let mut alpha = vec![f64::NAN; t_max + 1];
        let mut beta = vec![f64::NAN; t_max + 1];
        for t in 1..=t_max {
            alpha[t] = alpha_bar[t] / alpha_bar[t - 1];
            beta[t] = 1.0 - alpha[t];
        }

        let sched = NoiseSchedule { t_max, w, alpha_bar, alpha, beta };
        debug_assert!(sched.check_invariants().is_ok(), "{:?}", sched.check_invariants());
        Ok(sched)
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn noise_offset(&self) -> f64 {
        self.w
    }

    /// Cumulative signal fraction `abar_t`, valid for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "alpha_bar({t}) out of range 0..={}", self.t_max);
        self.alpha_bar[t]
    }

    /// Per-step retention `alpha_t`, valid for `t = 1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max, "alpha({t}) out of range 1..={}", self.t_max);
        self.alpha[t]
    }

    /// Per-step noise rate `beta_t`, valid for `t = 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max, "beta({t}) out of range 1..={}", self.t_max);
        self.beta[t]
    }

    fn in_range(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.t_max {
            Err(DiffusionError::StepOutOfRange { t, t_max: self.t_max })
        } else {
            Ok(())
        }
    }

    /// Structural invariants; exercised by tests and debug builds.
    pub fn check_invariants(&self) -> Result<(), String> {
        for t in 0..=self.t_max {
            let ab = self.alpha_bar[t];
            if !(ALPHA_BAR_FLOOR..=ALPHA_BAR_CEIL).contains(&ab) {
                return Err(format!("abar[{t}] = {ab} outside clamp range"));
            }
            if t > 0 {
                if ab >= self.alpha_bar[t - 1] {
                    return Err(format!("abar not strictly decreasing at t={t}"));
                }
                let b = self.beta[t];
                if !(0.0 < b && b < 1.0) {
                    return Err(format!("beta[{t}] = {b} outside (0, 1)"));
                }
            }
        }
        if self.alpha_bar[self.t_max] != ALPHA_BAR_FLOOR {
            return Err("abar[T] must sit exactly on the floor".into());
        }
        // Cumulative/per-step consistency: abar_t = abar_0 * prod(alpha_s).
        let mut prod = self.alpha_bar[0];
        for t in 1..=self.t_max {
            prod *= self.alpha[t];
            if (prod - self.alpha_bar[t]).abs() > 1e-12 {
                return Err(format!(
                    "product identity violated at t={t}: {prod} vs {}",
                    self.alpha_bar[t]
                ));
            }
        }
        Ok(())
    }
}

/// Draw a training step uniformly from `1..=T`.
pub fn sample_step(rng: &mut Rng, t_max: usize) -> usize {
    rng.below(t_max) + 1
}

/// Corrupt `x0` to diffusion step `t`, returning `(x_t, eps)` with the
/// Gaussian draw that produced it.
pub fn forward_diffuse<F: Real>(
    x0: &Matrix<F>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Matrix<F>, Matrix<F>), DiffusionError> {
    sched.in_range(t)?;
    let eps: Matrix<F> = rng.gaussian_matrix(x0.rows(), x0.cols());
    let x_t = forward_diffuse_with_eps(x0, t, sched, &eps)?;
    Ok((x_t, eps))
}

/// Forward corruption with caller-supplied noise (deterministic tests,
/// frozen validation draws).
pub fn forward_diffuse_with_eps<F: Real>(
    x0: &Matrix<F>,
    t: usize,
    sched: &NoiseSchedule,
    eps: &Matrix<F>,
) -> Result<Matrix<F>, DiffusionError> {
    sched.in_range(t)?;
    let ab = sched.alpha_bar(t);
    let signal = F::from_f64(ab.sqrt());
    let noise = F::from_f64((1.0 - ab).sqrt());
    Ok(x0.scale(signal).add(&eps.scale(noise)))
}

/// One stochastic reverse step from `x_t` to `x_{t-1}` given the denoiser's
/// clean-target estimate `x0_hat`.
pub fn reverse_step<F: Real>(
    x_t: &Matrix<F>,
    t: usize,
    x0_hat: &Matrix<F>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Matrix<F>, DiffusionError> {
    let eps: Matrix<F> = rng.gaussian_matrix(x_t.rows(), x_t.cols());
    reverse_step_with_eps(x_t, t, x0_hat, sched, &eps)
}

/// Reverse step with caller-supplied noise. With `eps = 0`,
/// `x_t = sqrt(abar_t) * x0` and `x0_hat = x0`, this reproduces
/// `sqrt(abar_{t-1}) * x0` exactly.
pub fn reverse_step_with_eps<F: Real>(
    x_t: &Matrix<F>,
    t: usize,
    x0_hat: &Matrix<F>,
    sched: &NoiseSchedule,
    eps: &Matrix<F>,
) -> Result<Matrix<F>, DiffusionError> {
    sched.in_range(t)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let a_t = sched.alpha(t);
    let denom = 1.0 - ab_t;
    let c_xt = a_t.sqrt() * (1.0 - ab_prev) / denom;
    let c_x0 = ab_prev.sqrt() * (1.0 - a_t) / denom;
    let c_eps = (1.0 - a_t) * (1.0 - ab_prev) / denom;
    Ok(x_t
        .scale(F::from_f64(c_xt))
        .add(&x0_hat.scale(F::from_f64(c_x0)))
        .add(&eps.scale(F::from_f64(c_eps))))
}

/// Deterministic skip step from `x_{t_s}` directly to `x_{t_prev}`:
/// re-noise the clean estimate to the earlier step, preserving the
/// direction that pointed from `x0_hat` to `x_{t_s}`.
pub fn accelerated_reverse_step<F: Real>(
    x_ts: &Matrix<F>,
    t_s: usize,
    t_prev: usize,
    x0_hat: &Matrix<F>,
    sched: &NoiseSchedule,
) -> Result<Matrix<F>, DiffusionError> {
    sched.in_range(t_s)?;
    if t_prev >= t_s {
        return Err(DiffusionError::StepOrder { from: t_s, to: t_prev });
    }
    let ab_s = sched.alpha_bar(t_s);
    let ab_p = sched.alpha_bar(t_prev);
    // Implied noise direction; 1 - abar is bounded away from 0 by the clamp.
    let dir = x_ts
        .sub(&x0_hat.scale(F::from_f64(ab_s.sqrt())))
        .scale(F::from_f64(1.0 / (1.0 - ab_s).sqrt()));
    Ok(x0_hat.scale(F::from_f64(ab_p.sqrt())).add(&dir.scale(F::from_f64((1.0 - ab_p).sqrt()))))
}

/// Shortened reverse-step subsequence: `T_R + 1` strictly decreasing steps
/// from `T` down to `0`, i.e. exactly `T_R` denoiser invocations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReverseSubsequence {
    steps: Vec<usize>,
}

impl ReverseSubsequence {
    pub fn build(t_max: usize, t_r: usize) -> Result<Self, DiffusionError> {
        if t_r < 1 || t_r > t_max {
            return Err(DiffusionError::InvalidSubsequence { t_r, t_max });
        }
        let stride = t_max as f64 / t_r as f64;
        let steps: Vec<usize> = (0..=t_r)
            .map(|i| {
                if i == 0 {
                    t_max
                } else if i == t_r {
                    0
                } else {
                    (t_max as f64 - i as f64 * stride).round() as usize
                }
            })
            .collect();
        debug_assert!(steps.windows(2).all(|w| w[0] > w[1]), "subsequence not strictly decreasing");
        Ok(ReverseSubsequence { steps })
    }

    /// The step values, from `T` down to `0` inclusive.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Number of denoiser invocations a full reverse pass performs.
    pub fn transitions(&self) -> usize {
        self.steps.len() - 1
    }

    /// `(from, to)` pairs, in inference order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps.windows(2).map(|w| (w[0], w[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T: usize = 1024;
    const W: f64 = 1e-4;

    #[test]
    fn schedule_matches_closed_form_where_unclamped() {
        let s = NoiseSchedule::build(T, W).unwrap();
        // Frozen oracles: 1 - sqrt(t/T + w) evaluated independently.
        assert!((s.alpha_bar(0) - 0.99).abs() < 1e-15);
        assert!((s.alpha_bar(256) - 0.49990000999800055).abs() < 1e-15);
        assert!((s.alpha_bar(512) - 0.2928225116705142).abs() < 1e-15);
        assert_eq!(s.alpha_bar(T), ALPHA_BAR_FLOOR);
    }

    #[test]
    fn schedule_invariants_hold_for_reference_sizes() {
        for (t_max, w) in [(16, 1e-4), (1024, 1e-4), (2, 1e-4), (1024, 0.3)] {
            let s = NoiseSchedule::build(t_max, w).unwrap();
            s.check_invariants().unwrap_or_else(|e| panic!("T={t_max} w={w}: {e}"));
        }
    }

    #[test]
    fn tiny_noise_offset_engages_head_ramp() {
        // 1 - sqrt(1e-12) is above the ceiling: the head must still be
        // strictly decreasing and start exactly at the ceiling.
        let s = NoiseSchedule::build(64, 1e-12).unwrap();
        assert_eq!(s.alpha_bar(0), ALPHA_BAR_CEIL);
        s.check_invariants().unwrap();
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(matches!(
            NoiseSchedule::build(1, W),
            Err(DiffusionError::InvalidStepCount { t_max: 1 })
        ));
        assert!(matches!(
            NoiseSchedule::build(MAX_STEPS + 1, W),
            Err(DiffusionError::InvalidStepCount { .. })
        ));
        assert!(matches!(
            NoiseSchedule::build(16, 0.0),
            Err(DiffusionError::InvalidNoiseOffset { .. })
        ));
        assert!(matches!(
            NoiseSchedule::build(16, 1.0),
            Err(DiffusionError::InvalidNoiseOffset { .. })
        ));
        assert!(matches!(
            NoiseSchedule::build(16, 0.99999),
            Err(DiffusionError::InvalidNoiseOffset { .. })
        ));
    }

    #[test]
    fn forward_diffuse_interpolates_signal_and_noise() {
        let s = NoiseSchedule::build(T, W).unwrap();
        let x0 = Matrix::from_rows(&[vec![2.0f64, -1.0, 0.5]]);
        let eps = Matrix::from_rows(&[vec![1.0f64, 1.0, 1.0]]);
        let t = 256;
        let xt = forward_diffuse_with_eps(&x0, t, &s, &eps).unwrap();
        let ab = s.alpha_bar(t);
        for c in 0..3 {
            let expect = ab.sqrt() * x0.get(0, c) + (1.0 - ab).sqrt();
            assert!((xt.get(0, c) - expect).abs() < 1e-15);
        }
        // t = 0 and t = T+1 are rejected.
        assert!(forward_diffuse_with_eps(&x0, 0, &s, &eps).is_err());
        assert!(forward_diffuse_with_eps(&x0, T + 1, &s, &eps).is_err());
    }

    #[test]
    fn forward_moments_match_schedule_small_sample() {
        let s = NoiseSchedule::build(T, W).unwrap();
        let x0 = Matrix::from_rows(&[vec![1.5f64]]);
        let t = 512;
        let mut rng = crate::numerics::Rng::new(77);
        let n = 20_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let (xt, _) = forward_diffuse(&x0, t, &s, &mut rng).unwrap();
            let v = xt.get(0, 0);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let ab = s.alpha_bar(t);
        let expect_mean = ab.sqrt() * 1.5;
        let expect_var = 1.0 - ab;
        let se = expect_var.sqrt() / (n as f64).sqrt();
        assert!((mean - expect_mean).abs() < 4.0 * se, "mean {mean} vs {expect_mean}");
        assert!((var - expect_var).abs() / expect_var < 0.05, "var {var} vs {expect_var}");
    }

    #[test]
    fn noiseless_reverse_step_recovers_scaled_clean_target() {
        let s = NoiseSchedule::build(T, W).unwrap();
        let x0 = Matrix::from_rows(&[vec![0.3f64, -2.0, 1.0, 0.0]]);
        let zero = Matrix::zeros(1, 4);
        for t in [1, 2, 100, 512, 1023, 1024] {
            let xt = x0.scale(s.alpha_bar(t).sqrt());
            let prev = reverse_step_with_eps(&xt, t, &x0, &s, &zero).unwrap();
            let expect = x0.scale(s.alpha_bar(t - 1).sqrt());
            assert!(prev.max_abs_diff(&expect) < 1e-10, "t={t}");
        }
    }

    #[test]
    fn accelerated_step_preserves_clean_target_on_schedule_points() {
        let s = NoiseSchedule::build(T, W).unwrap();
        let x0 = Matrix::from_rows(&[vec![0.7f64, -0.1, 2.5]]);
        for (from, to) in [(1024, 960), (1024, 0), (512, 64), (2, 1), (1, 0)] {
            let x_from = x0.scale(s.alpha_bar(from).sqrt());
            let out = accelerated_reverse_step(&x_from, from, to, &x0, &s).unwrap();
            let expect = x0.scale(s.alpha_bar(to).sqrt());
            assert!(out.max_abs_diff(&expect) < 1e-10, "{from}->{to}");
        }
        assert!(matches!(
            accelerated_reverse_step(&x0, 64, 64, &x0, &s),
            Err(DiffusionError::StepOrder { .. })
        ));
    }

    #[test]
    fn chained_accelerated_steps_walk_the_whole_subsequence() {
        let s = NoiseSchedule::build(T, W).unwrap();
        let sub = ReverseSubsequence::build(T, 16).unwrap();
        let x0 = Matrix::from_rows(&[vec![1.0f64, -1.0]]);
        let mut x = x0.scale(s.alpha_bar(T).sqrt());
        for (from, to) in sub.pairs() {
            x = accelerated_reverse_step(&x, from, to, &x0, &s).unwrap();
        }
        let expect = x0.scale(s.alpha_bar(0).sqrt());
        assert!(x.max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn subsequence_matches_expected_grid() {
        let sub = ReverseSubsequence::build(1024, 16).unwrap();
        let expect: Vec<usize> = (0..=16).map(|i| 1024 - 64 * i).collect();
        assert_eq!(sub.steps(), expect.as_slice());
        assert_eq!(sub.transitions(), 16);

        let full = ReverseSubsequence::build(8, 8).unwrap();
        assert_eq!(full.steps(), &[8, 7, 6, 5, 4, 3, 2, 1, 0]);

        let single = ReverseSubsequence::build(1024, 1).unwrap();
        assert_eq!(single.steps(), &[1024, 0]);

        assert!(ReverseSubsequence::build(16, 0).is_err());
        assert!(ReverseSubsequence::build(16, 17).is_err());
    }

    #[test]
    fn sample_step_covers_full_range() {
        let mut rng = crate::numerics::Rng::new(5);
        let mut seen = vec![false; 17];
        for _ in 0..2000 {
            let t = sample_step(&mut rng, 16);
            assert!((1..=16).contains(&t));
            seen[t] = true;
        }
        assert!(seen[1..].iter().all(|&s| s));
    }

    proptest! {
        #[test]
        fn schedule_invariants_hold_for_arbitrary_parameters(
            t_max in 2usize..2048,
            w in 1e-8f64..0.5,
        ) {
            let s = NoiseSchedule::build(t_max, w).unwrap();
            prop_assert!(s.check_invariants().is_ok());
        }

        #[test]
        fn subsequence_is_strictly_decreasing_with_forced_endpoints(
            t_max in 2usize..4096,
            t_r_frac in 0.0f64..1.0,
        ) {
            let t_r = 1 + ((t_max - 1) as f64 * t_r_frac) as usize;
            let sub = ReverseSubsequence::build(t_max, t_r).unwrap();
            prop_assert_eq!(sub.steps().len(), t_r + 1);
            prop_assert_eq!(sub.steps()[0], t_max);
            prop_assert_eq!(*sub.steps().last().unwrap(), 0);
            prop_assert!(sub.steps().windows(2).all(|w| w[0] > w[1]));
        }

        #[test]
        fn accelerated_jump_renoises_with_the_same_implied_direction(
            seed in 0u64..1000,
            t in 2usize..=1024,
        ) {
            let s = NoiseSchedule::build(1024, 1e-4).unwrap();
            let mut rng = crate::numerics::Rng::new(seed);
            let x0: Matrix<f64> = rng.gaussian_matrix(1, 8);
            let (xt, eps) = forward_diffuse(&x0, t, &s, &mut rng).unwrap();
            // With the true x0 as the clean estimate, a skip step lands on
            // the forward corruption of x0 at the earlier step with the
            // *same* noise draw: the implied direction is preserved.
            let to = t / 2;
            let out = accelerated_reverse_step(&xt, t, to, &x0, &s).unwrap();
            let ab = s.alpha_bar(to);
            let expect = x0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()));
            prop_assert!(out.max_abs_diff(&expect) < 1e-9);
        }
    }
}
