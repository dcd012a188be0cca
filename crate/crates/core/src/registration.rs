//! Feature registration: for a source batch `S` and target batch `T`, find
//! features `F` minimizing `sum|F - S| + alpha * sum|F - T|`.
//!
//! The objective is separable over matrix elements. Per element the minimizer
//! is `s` for `alpha < 1`, `t` for `alpha > 1`, and any point between them for
//! `alpha = 1`.

use crate::error::{Error, Result};
use crate::numerics::{sign, Matrix, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};

/// Steps without per-element improvement before that element's step size is
/// halved; also the window of the global stopping rule.
const PATIENCE: usize = 5;

/// Starting point of the inner optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegistrationInit {
    /// `T - S`
    #[default]
    Difference,
    /// `S`
    Source,
    /// `(S + T) / 2`
    Midpoint,
}

impl RegistrationInit {
    pub fn name(self) -> &'static str {
        match self {
            RegistrationInit::Difference => "difference",
            RegistrationInit::Source => "source",
            RegistrationInit::Midpoint => "midpoint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "difference" => Some(RegistrationInit::Difference),
            "source" => Some(RegistrationInit::Source),
            "midpoint" => Some(RegistrationInit::Midpoint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    /// Weight of the target term.
    pub alpha: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Stop once the loss improved by less than this over the last few steps.
    pub tolerance: f64,
    pub init: RegistrationInit,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            inner_steps: 50,
            inner_lr: 0.3,
            tolerance: 1e-6,
            init: RegistrationInit::Difference,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("registration needs at least one inner step"));
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::config(format!(
                "registration learning rate must be positive, got {}",
                self.inner_lr
            )));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::config("registration tolerance must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub registered: Matrix,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss of the running iterate after each step, starting with the
    /// initial point.
    pub loss_history: Vec<f64>,
    pub steps_used: usize,
}

#[inline]
fn element_loss(f: f64, s: f64, t: f64, alpha: f64) -> f64 {
    (f - s).abs() + alpha * (f - t).abs()
}

/// Registration loss and its subgradient w.r.t. `features`, with
/// `sign(0) = 0`.
pub fn registration_loss(
    features: &Matrix,
    source: &Matrix,
    target: &Matrix,
    alpha: f64,
) -> Result<(f64, Matrix)> {
    features.ensure_same_shape(source, "registration loss (source)")?;
    features.ensure_same_shape(target, "registration loss (target)")?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(features.len());
    for ((&f, &s), &t) in features.as_slice().iter().zip(source.as_slice()).zip(target.as_slice()) {
        loss += element_loss(f, s, t, alpha);
        grad.push(sign(f - s) + alpha * sign(f - t));
    }
    Ok((loss, Matrix::from_raw(features.rows(), features.cols(), grad)))
}

/// Registers a source batch against a target batch.
///
/// Runs Adam from the configured initial point. Each element keeps its own
/// best value; an element whose loss has not improved for a few steps is
/// reset to its best value and its step size halved, which lets the L1
/// iterates settle on the kink instead of oscillating around it. The
/// returned matrix holds the per-element best values, so `final_loss` never
/// exceeds the loss at the initial point.
///
/// Stops after `inner_steps`, or earlier once the total loss improved by less
/// than `tolerance` over the last few steps while no element with a step size
/// of at least `tolerance` was annealed.
pub fn register_features(
    source: &Matrix,
    target: &Matrix,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    source.ensure_same_shape(target, "register_features")?;
    if !source.is_finite() || !target.is_finite() {
        return Err(Error::numeric("registration inputs contain non-finite values"));
    }
    let alpha = cfg.alpha;
    let s = source.as_slice();
    let t = target.as_slice();
    let n = s.len();

    let mut f: Vec<f64> = match cfg.init {
        RegistrationInit::Difference => t.iter().zip(s).map(|(t, s)| t - s).collect(),
        RegistrationInit::Source => s.to_vec(),
        RegistrationInit::Midpoint => t.iter().zip(s).map(|(t, s)| 0.5 * (t + s)).collect(),
    };
    let mut best_val = f.clone();
    let mut best_loss: Vec<f64> = (0..n).map(|i| element_loss(f[i], s[i], t[i], alpha)).collect();
    let mut lr = vec![cfg.inner_lr; n];
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut step = vec![0i32; n];
    let mut stall = vec![0usize; n];

    let initial_loss: f64 = best_loss.iter().sum();
    let mut loss_history = vec![initial_loss];
    let mut best_history = vec![initial_loss];
    let mut steps_used = 0;
    let mut last_anneal = 0;

    for _ in 0..cfg.inner_steps {
        steps_used += 1;
        let mut current = 0.0;
        for i in 0..n {
            let g = sign(f[i] - s[i]) + alpha * sign(f[i] - t[i]);
            step[i] += 1;
            m[i] = DEFAULT_BETA1 * m[i] + (1.0 - DEFAULT_BETA1) * g;
            v[i] = DEFAULT_BETA2 * v[i] + (1.0 - DEFAULT_BETA2) * g * g;
            let m_hat = m[i] / (1.0 - DEFAULT_BETA1.powi(step[i]));
            let v_hat = v[i] / (1.0 - DEFAULT_BETA2.powi(step[i]));
            f[i] -= lr[i] * m_hat / (v_hat.sqrt() + DEFAULT_EPSILON);

            let loss = element_loss(f[i], s[i], t[i], alpha);
            // a crawl slower than `tolerance` per step counts as a stall
            let gain = best_loss[i] - loss;
            if gain > 0.0 {
                best_loss[i] = loss;
                best_val[i] = f[i];
            }
            if gain >= cfg.tolerance {
                stall[i] = 0;
            } else {
                stall[i] += 1;
                if stall[i] >= PATIENCE {
                    if lr[i] >= cfg.tolerance {
                        last_anneal = steps_used;
                    }
                    f[i] = best_val[i];
                    lr[i] *= 0.5;
                    m[i] = 0.0;
                    v[i] = 0.0;
                    step[i] = 0;
                    stall[i] = 0;
                }
            }
            current += element_loss(f[i], s[i], t[i], alpha);
        }
        loss_history.push(current);
        best_history.push(best_loss.iter().sum());

        // stalled elements still annealing may yet improve
        let k = best_history.len();
        if k > PATIENCE
            && steps_used - last_anneal >= PATIENCE
            && best_history[k - 1 - PATIENCE] - best_history[k - 1] < cfg.tolerance
        {
            break;
        }
    }

    let registered = Matrix::from_raw(source.rows(), source.cols(), best_val);
    let final_loss = registration_loss(&registered, source, target, alpha)?.0;
    Ok(RegistrationResult {
        registered,
        initial_loss,
        final_loss,
        loss_history,
        steps_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![v]).unwrap()
    }

    fn generous(alpha: f64) -> RegistrationConfig {
        RegistrationConfig {
            alpha,
            inner_steps: 2000,
            ..RegistrationConfig::default()
        }
    }

    /// Minimizer of |x - s| + alpha |x - t| over a grid with step 1e-4.
    fn grid_minimizer(s: f64, t: f64, alpha: f64, lo: f64, hi: f64) -> f64 {
        let steps = ((hi - lo) / 1e-4).round() as usize;
        let mut best = (f64::INFINITY, lo);
        for k in 0..=steps {
            let x = lo + k as f64 * 1e-4;
            let l = (x - s).abs() + alpha * (x - t).abs();
            if l < best.0 {
                best = (l, x);
            }
        }
        best.1
    }

    #[test]
    fn loss_examples() {
        let (l, g) = registration_loss(&scalar(0.5), &scalar(0.0), &scalar(1.0), 0.6).unwrap();
        assert!((l - 0.8).abs() < 1e-15);
        assert!((g.get(0, 0) - 0.4).abs() < 1e-15);

        let m = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let (l, g) = registration_loss(&m, &m, &m, 0.6).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);

        assert!(matches!(
            registration_loss(&m, &scalar(0.0), &m, 0.6),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_m = || Matrix::from_fn(3, 4, |_, _| rng.gen_range(-2.0..2.0));
        let (f, s, t) = (rand_m(), rand_m(), rand_m());
        let (_, g) = registration_loss(&f, &s, &t, 0.6).unwrap();
        let numeric =
            finite_diff_gradient(|m| registration_loss(m, &s, &t, 0.6).unwrap().0, &f, 1e-6).unwrap();
        for (a, b) in g.as_slice().iter().zip(numeric.as_slice()) {
            assert!(relative_error(*a, *b) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn identical_domains_converge_to_source() {
        let s = Matrix::from_rows(&[[0.3, -0.7, 1.2], [0.05, 0.9, -1.4]]).unwrap();
        let r = register_features(&s, &s, &generous(0.6)).unwrap();
        assert!(r.final_loss < 1e-6, "final loss {}", r.final_loss);
    }

    #[test]
    fn scalar_minimizer_follows_alpha() {
        let below = register_features(&scalar(0.0), &scalar(1.0), &generous(0.6)).unwrap();
        assert!((below.registered.get(0, 0) - grid_minimizer(0.0, 1.0, 0.6, -1.0, 2.0)).abs() < 0.05);
        assert!(below.registered.get(0, 0).abs() < 0.05);

        let above = register_features(&scalar(0.0), &scalar(1.0), &generous(2.0)).unwrap();
        assert!((above.registered.get(0, 0) - grid_minimizer(0.0, 1.0, 2.0, -1.0, 2.0)).abs() < 0.05);
        assert!((above.registered.get(0, 0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn default_budget_reaches_the_minimizer_from_the_difference_start() {
        // T - S starts about |T - 2S| away from the minimizer S
        let s = Matrix::from_rows(&[[2.5, -3.0, 0.5], [-1.0, 2.0, 1.5]]).unwrap();
        let t = Matrix::from_rows(&[[-2.0, 1.0, 3.0], [3.0, -2.5, 0.0]]).unwrap();
        let r = register_features(&s, &t, &RegistrationConfig::default()).unwrap();
        assert!(r.steps_used <= 50);
        let optimum = 0.6 * s.sub(&t).as_slice().iter().map(|v| v.abs()).sum::<f64>();
        assert!(r.final_loss - optimum < 0.01 * optimum, "{} vs {optimum}", r.final_loss);
        assert!(r.registered.sub(&s).max_abs() < 0.1);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = RegistrationConfig {
            inner_steps: 0,
            ..RegistrationConfig::default()
        };
        assert!(matches!(
            register_features(&scalar(0.0), &scalar(1.0), &cfg),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lands_in_the_elementwise_minimizer_set(
            s in -1.0f64..1.0,
            t in -1.0f64..1.0,
            alpha in prop::sample::select(vec![0.3, 0.6, 1.0, 1.5, 2.0]),
        ) {
            let r = register_features(&scalar(s), &scalar(t), &generous(alpha)).unwrap();
            let x = r.registered.get(0, 0);
            if alpha < 1.0 {
                prop_assert!((x - s).abs() < 0.05);
            } else if alpha > 1.0 {
                prop_assert!((x - t).abs() < 0.05);
            } else {
                prop_assert!(x >= s.min(t) - 0.05 && x <= s.max(t) + 0.05);
            }
        }

        #[test]
        fn never_worse_than_init_and_row_equivariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-2.0..2.0));
            let t = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-2.0..2.0));
            let cfg = RegistrationConfig::default();
            let r = register_features(&s, &t, &cfg).unwrap();
            prop_assert!(r.final_loss <= r.initial_loss);
            prop_assert_eq!(&r, &register_features(&s, &t, &cfg).unwrap());

            let perm = [2, 0, 3, 1];
            let rp = register_features(&s.select_rows(&perm), &t.select_rows(&perm), &cfg).unwrap();
            prop_assert_eq!(rp.registered, r.registered.select_rows(&perm));
        }
    }
}
