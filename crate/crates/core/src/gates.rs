//! Data-dependent gate signals.
//!
//! Each head produces, per token, a scalar decay `alpha` in (0,1), a write
//! strength `beta` in (0,1), a state-feedback strength `beta_tilde = b * beta`
//! where `b = sigmoid(b_logit)` is a per-head, data-independent blend, and a
//! per-head output-correction strength `d`.
//!
//! Parameterization:
//!
//! ```text
//! delta = softplus(x . w_delta[:, h] + delta_bias[h])
//! alpha = exp(-delta * softplus(a_log[h]))
//! beta  = sigmoid(x . w_beta[:, h])
//! ```
//!
//! The initialization keeps `delta` in [1e-3, 1e-1] at zero pre-activation so
//! `alpha` concentrates near 1 (slow forgetting at init), sets `b_logit = 0`
//! (`b = 0.5`), and takes `d` from configuration.

use crate::error::{KernelError, Result};
use crate::numerics::Matrix;
use crate::real::Real;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Saturation bound on `delta * softplus(a_log)`: keeps `alpha = exp(-z)`
/// strictly positive in single precision instead of flushing to zero.
const MAX_DECAY_EXPONENT: f64 = 30.0;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`]: `ln(e^y - 1)` for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // For small y, e^y - 1 ~ y; expm1 keeps precision.
    y.exp_m1().ln()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-head gate parameters. Projection matrices are `model_dim x heads`
/// (one column per head); the rest are per-head scalars.
#[derive(Debug, Clone)]
pub struct GateParams<T> {
    pub w_delta: Matrix<T>,
    pub w_beta: Matrix<T>,
    pub a_log: Vec<T>,
    pub delta_bias: Vec<T>,
    pub b_logit: Vec<T>,
    pub d_value: Vec<T>,
}

/// One token's gate signals for one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSignals<T> {
    /// Scalar decay, in (0, 1).
    pub alpha: T,
    /// Write strength, in (0, 1).
    pub beta: T,
    /// State-feedback strength `b * beta`.
    pub beta_tilde: T,
    /// Data-independent feedback blend, in (0, 1).
    pub b: T,
    /// Output-correction strength.
    pub d: T,
}

impl<T: Real> GateSignals<T> {
    /// Signals for a plain (ungated) delta-rule step: `alpha = 1`, `b = 1`.
    pub fn ungated(beta: T, d: T) -> Self {
        GateSignals {
            alpha: T::one(),
            beta,
            beta_tilde: beta,
            b: T::one(),
            d,
        }
    }
}

/// Configuration for [`init_gate_params`].
#[derive(Debug, Clone)]
pub struct GateInit {
    pub model_dim: usize,
    pub heads: usize,
    /// Initial output-correction strength (small models ~0.02; larger ~1.0).
    pub d_init: f64,
    /// `delta` at zero pre-activation is drawn log-uniformly from this range.
    pub delta_init: (f64, f64),
    /// `softplus(a_log)` is drawn uniformly from this range.
    pub a_init: (f64, f64),
}

impl GateInit {
    pub fn new(model_dim: usize, heads: usize, d_init: f64) -> Self {
        GateInit {
            model_dim,
            heads,
            d_init,
            delta_init: (1e-3, 1e-1),
            a_init: (1.0, 4.0),
        }
    }
}

/// Initialize gate parameters per the init contract: `delta` in
/// `cfg.delta_init` at zero pre-activation, `b = 0.5`, `d = cfg.d_init`,
/// zero delta projection (data dependence is learned), small random beta
/// projection.
pub fn init_gate_params<T: Real, R: Rng>(cfg: &GateInit, rng: &mut R) -> GateParams<T> {
    let h = cfg.heads;
    let normal = Normal::new(0.0, (1.0 / cfg.model_dim as f64).sqrt()).unwrap();
    let w_delta = Matrix::zeros(cfg.model_dim, h);
    let w_beta = Matrix::from_fn(cfg.model_dim, h, |_, _| T::from_f64(normal.sample(rng)));
    let (dlo, dhi) = cfg.delta_init;
    let (alo, ahi) = cfg.a_init;
    let mut a_log = Vec::with_capacity(h);
    let mut delta_bias = Vec::with_capacity(h);
    for _ in 0..h {
        let a = rng.random_range(alo..=ahi);
        a_log.push(T::from_f64(softplus_inverse(a)));
        let delta = (rng.random_range(dlo.ln()..=dhi.ln())).exp();
        delta_bias.push(T::from_f64(softplus_inverse(delta)));
    }
    GateParams {
        w_delta,
        w_beta,
        a_log,
        delta_bias,
        b_logit: vec![T::zero(); h],
        d_value: vec![T::from_f64(cfg.d_init); h],
    }
}

/// Intermediate values cached by [`compute_gates_cached`] for the backward
/// pass, one entry per head.
#[derive(Debug, Clone, Copy)]
pub struct GateCache<T> {
    /// Pre-softplus delta pre-activation.
    pub z_delta: T,
    /// Post-softplus delta.
    pub delta: T,
    /// `softplus(a_log)`.
    pub a: T,
    /// Whether the decay exponent hit the saturation clamp (gradient is cut).
    pub clamped: bool,
}

/// Compute one token's gate signals for every head from the token activation
/// `x` (length `model_dim`).
pub fn compute_gates<T: Real>(x: &[T], params: &GateParams<T>) -> Result<Vec<GateSignals<T>>> {
    let (signals, _) = compute_gates_cached(x, params)?;
    Ok(signals)
}

/// As [`compute_gates`], also returning per-head cached intermediates for
/// the backward pass.
pub fn compute_gates_cached<T: Real>(
    x: &[T],
    params: &GateParams<T>,
) -> Result<(Vec<GateSignals<T>>, Vec<GateCache<T>>)> {
    let dim = params.w_delta.rows();
    let heads = params.w_delta.cols();
    if x.len() != dim {
        return Err(KernelError::dim("compute_gates", format!("{dim}"), format!("{}", x.len())));
    }
    let mut signals = Vec::with_capacity(heads);
    let mut caches = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut zd = params.delta_bias[h].as_f64();
        let mut zb = 0.0f64;
        for (i, xi) in x.iter().enumerate() {
            let xf = xi.as_f64();
            zd += xf * params.w_delta.get(i, h).as_f64();
            zb += xf * params.w_beta.get(i, h).as_f64();
        }
        let delta = softplus(zd);
        let a = softplus(params.a_log[h].as_f64());
        let mut expo = delta * a;
        let clamped = expo > MAX_DECAY_EXPONENT;
        if clamped {
            expo = MAX_DECAY_EXPONENT;
        }
        let alpha = (-expo).exp();
        let beta = sigmoid(zb);
        let b = sigmoid(params.b_logit[h].as_f64());
        let d = params.d_value[h];
        signals.push(GateSignals {
            alpha: T::from_f64(alpha),
            beta: T::from_f64(beta),
            beta_tilde: T::from_f64(b * beta),
            b: T::from_f64(b),
            d,
        });
        caches.push(GateCache {
            z_delta: T::from_f64(zd),
            delta: T::from_f64(delta),
            a: T::from_f64(a),
            clamped,
        });
    }
    Ok((signals, caches))
}

/// Gradients of the gate parameters, mirroring [`GateParams`].
#[derive(Debug, Clone)]
pub struct GateParamGrads<T> {
    pub w_delta: Matrix<T>,
    pub w_beta: Matrix<T>,
    pub a_log: Vec<T>,
    pub delta_bias: Vec<T>,
    pub b_logit: Vec<T>,
    pub d_value: Vec<T>,
}

impl<T: Real> GateParamGrads<T> {
    pub fn zeros_like(params: &GateParams<T>) -> Self {
        GateParamGrads {
            w_delta: Matrix::zeros(params.w_delta.rows(), params.w_delta.cols()),
            w_beta: Matrix::zeros(params.w_beta.rows(), params.w_beta.cols()),
            a_log: vec![T::zero(); params.a_log.len()],
            delta_bias: vec![T::zero(); params.delta_bias.len()],
            b_logit: vec![T::zero(); params.b_logit.len()],
            d_value: vec![T::zero(); params.d_value.len()],
        }
    }
}

/// Backward through [`compute_gates_cached`] for one token and one head.
///
/// `g_alpha` / `g_beta` are the loss gradients of that head's `alpha` and
/// `beta` at this token. Accumulates parameter gradients into `grads` and the
/// token-activation gradient into `gx`.
#[allow(clippy::too_many_arguments)]
pub fn backward_gates_token<T: Real>(
    x: &[T],
    params: &GateParams<T>,
    signals: &GateSignals<T>,
    cache: &GateCache<T>,
    head: usize,
    g_alpha: T,
    g_beta: T,
    grads: &mut GateParamGrads<T>,
    gx: &mut [T],
) {
    let h = head;
    // alpha = exp(-delta * a): d(alpha)/d(expo) = -alpha, cut if clamped.
    let g_expo = if cache.clamped {
        0.0
    } else {
        -signals.alpha.as_f64() * g_alpha.as_f64()
    };
    let g_delta = g_expo * cache.a.as_f64();
    let g_a = g_expo * cache.delta.as_f64();
    // delta = softplus(z_delta): d(delta)/dz = sigmoid(z).
    let g_zd = g_delta * sigmoid(cache.z_delta.as_f64());
    // a = softplus(a_log).
    let g_alog = g_a * sigmoid(params.a_log[h].as_f64());
    // beta = sigmoid(z_beta).
    let bf = signals.beta.as_f64();
    let g_zb = g_beta.as_f64() * bf * (1.0 - bf);

    grads.delta_bias[h] = grads.delta_bias[h] + T::from_f64(g_zd);
    grads.a_log[h] = grads.a_log[h] + T::from_f64(g_alog);
    for (i, xi) in x.iter().enumerate() {
        let xf = xi.as_f64();
        let wd = grads.w_delta.get(i, h).as_f64() + g_zd * xf;
        grads.w_delta.set(i, h, T::from_f64(wd));
        let wb = grads.w_beta.get(i, h).as_f64() + g_zb * xf;
        grads.w_beta.set(i, h, T::from_f64(wb));
        let gxi = gx[i].as_f64()
            + g_zd * params.w_delta.get(i, h).as_f64()
            + g_zb * params.w_beta.get(i, h).as_f64();
        gx[i] = T::from_f64(gxi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_params(dim: usize, heads: usize, d_init: f64, seed: u64) -> GateParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_gate_params(&GateInit::new(dim, heads, d_init), &mut rng)
    }

    #[test]
    fn softplus_matches_reference_values() {
        assert!((softplus(0.0) - 2.0f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus(-50.0) > 0.0);
        assert!(softplus(-50.0) < 1e-20);
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-3, 1e-2, 0.5, 1.0, 4.0] {
            let x = softplus_inverse(y);
            assert!((softplus(x) - y).abs() < 1e-12, "y = {y}");
        }
    }

    #[test]
    fn zero_preactivation_gives_half_beta_and_quarter_beta_tilde() {
        // x . w_beta = 0 => beta = 0.5; with b_logit = 0, b = 0.5 so
        // beta_tilde = 0.25.
        let params = default_params(8, 2, 0.02, 1);
        let x = vec![0.0f64; 8];
        let signals = compute_gates(&x, &params).unwrap();
        for s in &signals {
            assert!((s.beta - 0.5).abs() < 1e-15);
            assert!((s.b - 0.5).abs() < 1e-15);
            assert!((s.beta_tilde - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn d_init_propagates_to_signals() {
        for d_init in [0.02, 1.0] {
            let params = default_params(8, 2, d_init, 2);
            let signals = compute_gates(&vec![0.3f64; 8], &params).unwrap();
            for s in &signals {
                assert_eq!(s.d, d_init);
            }
        }
    }

    #[test]
    fn delta_at_init_is_in_contract_range() {
        let params = default_params(16, 8, 0.02, 3);
        let x = vec![0.0f64; 16];
        let (_, caches) = compute_gates_cached(&x, &params).unwrap();
        for c in &caches {
            assert!(c.delta >= 1e-3 - 1e-12 && c.delta <= 1e-1 + 1e-12, "delta = {}", c.delta);
        }
    }

    #[test]
    fn mean_alpha_at_init_concentrates_near_one() {
        let params = default_params(32, 4, 0.02, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut sum = 0.0;
        let mut n = 0usize;
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            for s in compute_gates(&x, &params).unwrap() {
                sum += s.alpha;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(mean > 0.9, "mean alpha at init = {mean}");
    }

    #[test]
    fn signals_stay_in_open_unit_ranges() {
        let params = default_params(16, 4, 0.02, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(-4.0..4.0)).collect();
            for s in compute_gates(&x, &params).unwrap() {
                assert!(s.alpha > 0.0 && s.alpha < 1.0);
                assert!(s.beta > 0.0 && s.beta < 1.0);
                assert!(s.beta_tilde > 0.0 && s.beta_tilde < s.beta);
                assert!(s.b > 0.0 && s.b < 1.0);
            }
        }
    }

    #[test]
    fn larger_delta_preactivation_decays_faster() {
        // Monotonicity: alpha falls as the delta pathway's pre-activation
        // rises.
        let mut params = default_params(4, 1, 0.02, 6);
        // Give the delta projection some weight so x matters.
        for i in 0..4 {
            params.w_delta.set(i, 0, 0.5);
        }
        let mut last = f64::INFINITY;
        for scale in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let x = vec![scale; 4];
            let s = &compute_gates(&x, &params).unwrap()[0];
            assert!(s.alpha < last);
            last = s.alpha;
        }
    }

    #[test]
    fn gates_are_deterministic() {
        let params = default_params(12, 3, 0.02, 8);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = compute_gates(&x, &params).unwrap();
        let b = compute_gates(&x, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let params = default_params(8, 2, 0.02, 9);
        assert!(compute_gates(&vec![0.0f64; 7], &params).is_err());
    }

    #[test]
    fn saturated_decay_exponent_stays_positive() {
        let mut params = default_params(4, 1, 0.02, 10);
        params.delta_bias[0] = 500.0; // softplus(500) = 500 -> expo huge
        let s = &compute_gates(&vec![0.0f64; 4], &params).unwrap()[0];
        assert!(s.alpha > 0.0, "alpha must not flush to zero");
        assert!(s.alpha < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut params = default_params(6, 2, 0.02, 11);
        // Non-zero delta projection so every pathway is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for i in 0..6 {
            for h in 0..2 {
                params.w_delta.set(i, h, rng.random_range(-0.5..0.5));
            }
        }
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Scalar probe loss: L = sum_h (wa_h * alpha_h + wb_h * beta_h).
        let wa = [0.7, -0.3];
        let wb = [0.2, 0.9];
        let loss = |params: &GateParams<f64>, x: &[f64]| -> f64 {
            let s = compute_gates(x, params).unwrap();
            (0..2).map(|h| wa[h] * s[h].alpha + wb[h] * s[h].beta).sum()
        };
        let (signals, caches) = compute_gates_cached(&x, &params).unwrap();
        let mut grads = GateParamGrads::zeros_like(&params);
        let mut gx = vec![0.0f64; 6];
        for h in 0..2 {
            backward_gates_token(&x, &params, &signals[h], &caches[h], h, wa[h], wb[h], &mut grads, &mut gx);
        }
        let eps = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-6, "{what}: analytic {analytic} vs numeric {numeric} (rel {rel})");
        };
        // x coordinates
        for i in 0..6 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            check(gx[i], loss(&params, &xp), loss(&params, &xm), &format!("x[{i}]"));
        }
        // scalar params per head
        for h in 0..2 {
            let mut p = params.clone();
            p.delta_bias[h] += eps;
            let mut m = params.clone();
            m.delta_bias[h] -= eps;
            check(grads.delta_bias[h], loss(&p, &x), loss(&m, &x), &format!("delta_bias[{h}]"));
            let mut p = params.clone();
            p.a_log[h] += eps;
            let mut m = params.clone();
            m.a_log[h] -= eps;
            check(grads.a_log[h], loss(&p, &x), loss(&m, &x), &format!("a_log[{h}]"));
        }
        // projection entries
        for h in 0..2 {
            for i in [0usize, 3, 5] {
                let mut p = params.clone();
                p.w_delta.set(i, h, p.w_delta.get(i, h) + eps);
                let mut m = params.clone();
                m.w_delta.set(i, h, m.w_delta.get(i, h) - eps);
                check(grads.w_delta.get(i, h), loss(&p, &x), loss(&m, &x), &format!("w_delta[{i},{h}]"));
                let mut p = params.clone();
                p.w_beta.set(i, h, p.w_beta.get(i, h) + eps);
                let mut m = params.clone();
                m.w_beta.set(i, h, m.w_beta.get(i, h) - eps);
                check(grads.w_beta.get(i, h), loss(&p, &x), loss(&m, &x), &format!("w_beta[{i},{h}]"));
            }
        }
    }
}
