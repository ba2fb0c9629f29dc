//! Central finite-difference verification of analytic gradients.
//!
//! Both the analytic and the numeric side run in `f64` graphs built from the
//! same f32 parameters, so the comparison measures the backward formulas
//! rather than f32 rounding noise.
//!
//! A central difference that straddles a ReLU kink measures the average of
//! two one-sided slopes, not the derivative. When a perturbed evaluation
//! flips any ReLU input sign, the coordinate is retried with a step ten
//! times smaller (up to three times) and skipped if the kink is never
//! avoided.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{ParameterStore, Real};

/// A scalar function of the parameters, evaluable in any precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore) -> Result<Var>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all when the tensor is
    /// smaller).
    pub per_param: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            per_param: 8,
            seed: 0,
        }
    }
}

/// Outcome of a check over sampled coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error `|g_a − g_n| / max(1e-8, |g_a| + |g_n|)`.
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose stencil could not avoid a ReLU kink.
    pub skipped: usize,
}

const KINK_RETRIES: usize = 3;

/// Max relative error over sampled coordinates.
pub fn grad_check<F: ScalarFn>(f: &F, store: &ParameterStore, eps: f64) -> Result<f64> {
    GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(f, store)
}

impl GradCheck {
    pub fn run<F: ScalarFn>(&self, f: &F, store: &ParameterStore) -> Result<f64> {
        Ok(self.report(f, store)?.max_rel)
    }

    pub fn report<F: ScalarFn>(&self, f: &F, store: &ParameterStore) -> Result<GradCheckReport> {
        let mut g = Graph::<f64>::new();
        let loss = f.eval(&mut g, store)?;
        check_finite(g.scalar(loss), "loss")?;
        let kinks = g.relu_pattern();
        g.backward(loss)?;
        let analytic = g.param_grads_exact();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut rep = GradCheckReport {
            max_rel: 0.0,
            checked: 0,
            skipped: 0,
        };
        for (name, grad) in &analytic {
            let n = grad.len();
            let picks: Vec<usize> = if n <= self.per_param {
                (0..n).collect()
            } else {
                sample(&mut rng, n, self.per_param).into_vec()
            };
            for idx in picks {
                let ga = grad[idx];
                check_finite(ga, name)?;
                let mut eps = self.eps;
                let mut numeric = None;
                for _ in 0..=KINK_RETRIES {
                    let (plus, kp) = self.eval_at(f, store, name, idx, eps)?;
                    let (minus, km) = self.eval_at(f, store, name, idx, -eps)?;
                    if kp == kinks && km == kinks {
                        numeric = Some((plus - minus) / (2.0 * eps));
                        break;
                    }
                    eps /= 10.0;
                }
                let Some(numeric) = numeric else {
                    rep.skipped += 1;
                    continue;
                };
                check_finite(numeric, name)?;
                let rel = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-8);
                rep.max_rel = rep.max_rel.max(rel);
                rep.checked += 1;
            }
        }
        Ok(rep)
    }

    fn eval_at<F: ScalarFn>(
        &self,
        f: &F,
        store: &ParameterStore,
        name: &str,
        idx: usize,
        delta: f64,
    ) -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::<f64>::inference().perturbed(name, idx, delta);
        let loss = f.eval(&mut g, store)?;
        let v = g.scalar(loss);
        check_finite(v, "perturbed loss")?;
        Ok((v, g.relu_pattern()))
    }
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(format!("{what} = {v}")))
    }
}
