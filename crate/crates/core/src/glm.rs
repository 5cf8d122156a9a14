//! Penalized GLM fitting by damped Newton iterations (penalized IRLS).
//!
//! Minimizes the negative log-likelihood of a canonical-link GLM plus a
//! diagonal ridge penalty `0.5 * sum(precision_j * theta_j^2)`, which is the
//! MAP estimate under independent mean-zero Gaussian priors. All three
//! supported links are canonical, so the gradient is `X' W0 (mu - y)` and the
//! Hessian `X' diag(W0 V(mu)) X`.
//!
//! Rows are sparse and supplied through [`SparseDesign`]. Accumulation runs
//! over a fixed number of contiguous shards whose partial sums are added in
//! shard order, so results do not depend on thread scheduling.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// Beyond this, `logistic` returns exactly 0 or 1.
const LOGIT_LIMIT: f64 = 36.0;
/// Keeps `exp` finite and nonzero.
const LOG_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Gaussian response, identity link.
    GaussianIdentity,
    /// Binomial proportion, logit link.
    BinomialLogit,
    /// Poisson count, log link.
    PoissonLog,
}

impl Family {
    /// Mean for a linear predictor. The predictor is clamped where the
    /// mean would round to the edge of its range (0 or 1, 0 or infinity).
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => eta,
            Family::BinomialLogit => logistic(eta.clamp(-LOGIT_LIMIT, LOGIT_LIMIT)),
            Family::PoissonLog => eta.clamp(-LOG_LIMIT, LOG_LIMIT).exp(),
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => mu,
            Family::BinomialLogit => (mu / (1.0 - mu)).ln(),
            Family::PoissonLog => mu.ln(),
        }
    }

    pub fn link_name(self) -> &'static str {
        match self {
            Family::GaussianIdentity => "identity",
            Family::BinomialLogit => "logit",
            Family::PoissonLog => "log",
        }
    }

    /// Per-row negative log-likelihood up to constants, before prior weight
    /// and dispersion scaling.
    fn loss(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 0.5 * (y - eta) * (y - eta),
            Family::BinomialLogit => softplus(eta) - y * eta,
            Family::PoissonLog => eta.exp() - y * eta,
        }
    }

    fn variance(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::BinomialLogit => mu * (1.0 - mu),
            Family::PoissonLog => mu,
        }
    }
}

/// Inverse logit evaluated so that `logistic(x) + logistic(-x) == 1.0`
/// exactly in floating point.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        // 1 - logistic(-x); exact because logistic(-x) >= 0.5
        1.0 - 1.0 / (1.0 + x.exp())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row access for a sparse design matrix.
pub trait SparseDesign: Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    /// Fills `out` with the row's non-zero `(column, value)` entries and
    /// returns `(response, prior_weight)`.
    fn row(&self, i: usize, out: &mut Vec<(usize, f64)>) -> (f64, f64);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop when the relative objective change falls below this.
    pub relative_tolerance: f64,
    /// Or when the gradient max-norm falls below this.
    pub gradient_tolerance: f64,
    pub shards: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            relative_tolerance: 1e-8,
            gradient_tolerance: 1e-6,
            shards: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmSolution {
    pub coefficients: Vec<f64>,
    /// Residual variance for the Gaussian family, 1 otherwise.
    pub dispersion: f64,
    pub iterations: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    /// Penalized objective after every accepted step (fixed dispersion
    /// within each Gaussian round).
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

struct Pass {
    objective: f64,
    gradient: Vec<f64>,
    hessian: Option<Vec<f64>>,
}

fn shard_ranges(n: usize, shards: usize) -> Vec<(usize, usize)> {
    let shards = shards.max(1);
    let step = n.div_ceil(shards).max(1);
    (0..n).step_by(step).map(|s| (s, (s + step).min(n))).collect()
}

fn accumulate<D: SparseDesign>(
    design: &D,
    family: Family,
    theta: &[f64],
    dispersion: f64,
    with_hessian: bool,
    shards: usize,
) -> Pass {
    let p = design.n_cols();
    let parts: Vec<Pass> = shard_ranges(design.n_rows(), shards)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut row = Vec::with_capacity(16);
            let mut objective = 0.0;
            let mut gradient = vec![0.0; p];
            let mut hessian = if with_hessian { Some(vec![0.0; p * p]) } else { None };
            for i in lo..hi {
                let (y, w) = design.row(i, &mut row);
                if w == 0.0 {
                    continue;
                }
                let eta: f64 = row.iter().map(|&(c, v)| theta[c] * v).sum();
                objective += w * family.loss(y, eta);
                let mu = family.inverse_link(eta);
                let r = w * (mu - y);
                for &(c, v) in &row {
                    gradient[c] += r * v;
                }
                if let Some(h) = hessian.as_mut() {
                    let hw = w * family.variance(mu);
                    for &(a, va) in &row {
                        for &(b, vb) in &row {
                            if b >= a {
                                h[a * p + b] += hw * va * vb;
                            }
                        }
                    }
                }
            }
            Pass {
                objective,
                gradient,
                hessian,
            }
        })
        .collect();

    let mut total = Pass {
        objective: 0.0,
        gradient: vec![0.0; p],
        hessian: if with_hessian { Some(vec![0.0; p * p]) } else { None },
    };
    for part in parts {
        total.objective += part.objective;
        for (t, g) in total.gradient.iter_mut().zip(&part.gradient) {
            *t += g;
        }
        if let (Some(t), Some(h)) = (total.hessian.as_mut(), part.hessian.as_ref()) {
            for (a, b) in t.iter_mut().zip(h) {
                *a += b;
            }
        }
    }
    let scale = 1.0 / dispersion;
    total.objective *= scale;
    total.gradient.iter_mut().for_each(|g| *g *= scale);
    if let Some(h) = total.hessian.as_mut() {
        h.iter_mut().for_each(|v| *v *= scale);
    }
    total
}

fn penalized(pass: &mut Pass, theta: &[f64], precision: &[f64]) {
    let p = theta.len();
    for j in 0..p {
        pass.objective += 0.5 * precision[j] * theta[j] * theta[j];
        pass.gradient[j] += precision[j] * theta[j];
        if let Some(h) = pass.hessian.as_mut() {
            h[j * p + j] += precision[j];
        }
    }
}

fn objective_at<D: SparseDesign>(
    design: &D,
    family: Family,
    theta: &[f64],
    precision: &[f64],
    dispersion: f64,
    shards: usize,
) -> f64 {
    let mut pass = accumulate(design, family, theta, dispersion, false, shards);
    penalized(&mut pass, theta, precision);
    if pass.objective.is_nan() {
        f64::INFINITY
    } else {
        pass.objective
    }
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn newton_direction(hessian: Vec<f64>, gradient: &[f64]) -> Result<Vec<f64>> {
    let p = gradient.len();
    let mut h = DMatrix::from_row_slice(p, p, &hessian);
    // only the upper triangle was accumulated
    for a in 0..p {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    let g = DVector::from_column_slice(gradient);
    let chol = match h.clone().cholesky() {
        Some(c) => c,
        None => {
            let jitter = 1e-10 * (h.trace() / p as f64).max(1e-12);
            let mut hj = h;
            for j in 0..p {
                hj[(j, j)] += jitter;
            }
            hj.cholesky().ok_or_else(|| {
                AuditError::Numerical("penalized Hessian is not positive definite".into())
            })?
        }
    };
    Ok((-chol.solve(&g)).as_slice().to_vec())
}

/// Newton iterations at fixed dispersion, with step halving so the
/// objective never increases.
fn newton<D: SparseDesign>(
    design: &D,
    family: Family,
    precision: &[f64],
    theta: &mut [f64],
    dispersion: f64,
    cfg: &OptimizerConfig,
    trace: &mut Vec<f64>,
    budget: usize,
) -> Result<(usize, f64, f64, bool)> {
    let mut iterations = 0;
    loop {
        let mut pass = accumulate(design, family, theta, dispersion, true, cfg.shards);
        penalized(&mut pass, theta, precision);
        let f0 = pass.objective;
        let gnorm = max_norm(&pass.gradient);
        if trace.is_empty() {
            trace.push(f0);
        }
        if gnorm < cfg.gradient_tolerance {
            return Ok((iterations, f0, gnorm, true));
        }
        if iterations >= budget {
            return Ok((iterations, f0, gnorm, false));
        }
        let step = newton_direction(pass.hessian.take().expect("hessian requested"), &pass.gradient)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, d)| a + t * d).collect();
            let f1 = objective_at(design, family, &cand, precision, dispersion, cfg.shards);
            if f1 <= f0 {
                accepted = Some((cand, f1));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        let Some((cand, f1)) = accepted else {
            // No descent possible: we are at the optimum to machine precision.
            return Ok((iterations, f0, gnorm, true));
        };
        theta.copy_from_slice(&cand);
        trace.push(f1);
        if (f0 - f1).abs() <= cfg.relative_tolerance * f0.abs().max(1.0) {
            let pass = accumulate(design, family, theta, dispersion, false, cfg.shards);
            let mut pass = pass;
            penalized(&mut pass, theta, precision);
            return Ok((iterations, f1, max_norm(&pass.gradient), true));
        }
    }
}

/// Fits a penalized GLM. `precision[j]` is the prior precision of
/// coefficient `j` (0 leaves it unpenalized). For the Gaussian family the
/// residual variance is estimated by alternating with the coefficient
/// update.
pub fn fit_penalized<D: SparseDesign>(
    design: &D,
    family: Family,
    precision: &[f64],
    init: Option<&[f64]>,
    cfg: &OptimizerConfig,
) -> Result<GlmSolution> {
    let p = design.n_cols();
    if precision.len() != p {
        return Err(AuditError::Config(format!(
            "precision has {} entries for {p} columns",
            precision.len()
        )));
    }
    if design.n_rows() == 0 {
        return Err(AuditError::Data("no observations to fit".into()));
    }
    let mut theta = match init {
        Some(v) if v.len() == p => v.to_vec(),
        Some(_) => return Err(AuditError::Config("initial coefficients have wrong length".into())),
        None => vec![0.0; p],
    };
    let mut trace = Vec::new();

    if family != Family::GaussianIdentity {
        let (iterations, objective, gradient_norm, converged) =
            newton(design, family, precision, &mut theta, 1.0, cfg, &mut trace, cfg.max_iterations)?;
        if !converged {
            return Err(AuditError::NonConvergence {
                iterations,
                objective,
                gradient_norm,
            });
        }
        return Ok(GlmSolution {
            coefficients: theta,
            dispersion: 1.0,
            iterations,
            objective,
            gradient_norm,
            objective_trace: trace,
        });
    }

    // Gaussian: alternate exact penalized least squares with the
    // residual-variance update.
    let (ybar, yvar, wsum) = response_moments(design);
    let mut dispersion = if yvar > 0.0 { yvar } else { 1.0 };
    let floor = 1e-12 * yvar.max(ybar.abs()).max(1e-300);
    let mut total_iterations = 0;
    let mut last = (0.0, f64::INFINITY);
    for _ in 0..100 {
        let budget = cfg.max_iterations.saturating_sub(total_iterations);
        let (it, objective, gradient_norm, converged) =
            newton(design, family, precision, &mut theta, dispersion, cfg, &mut trace, budget)?;
        total_iterations += it;
        last = (objective, gradient_norm);
        if !converged {
            return Err(AuditError::NonConvergence {
                iterations: total_iterations,
                objective,
                gradient_norm,
            });
        }
        let rss = 2.0 * accumulate(design, family, &theta, 1.0, false, cfg.shards).objective;
        let next = (rss / wsum).max(floor);
        let done = ((next - dispersion) / dispersion).abs() < 1e-10;
        dispersion = next;
        if done {
            break;
        }
    }
    // final gradient at the settled dispersion
    let mut pass = accumulate(design, family, &theta, dispersion, false, cfg.shards);
    penalized(&mut pass, &theta, precision);
    let gradient_norm = max_norm(&pass.gradient);
    if gradient_norm > cfg.gradient_tolerance && total_iterations >= cfg.max_iterations {
        return Err(AuditError::NonConvergence {
            iterations: total_iterations,
            objective: last.0,
            gradient_norm,
        });
    }
    Ok(GlmSolution {
        coefficients: theta,
        dispersion,
        iterations: total_iterations,
        objective: pass.objective,
        gradient_norm,
        objective_trace: trace,
    })
}

fn response_moments<D: SparseDesign>(design: &D) -> (f64, f64, f64) {
    let mut row = Vec::new();
    let (mut sw, mut sy, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..design.n_rows() {
        let (y, w) = design.row(i, &mut row);
        sw += w;
        sy += w * y;
        syy += w * y * y;
    }
    let mean = sy / sw;
    (mean, (syy / sw - mean * mean).max(0.0), sw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense rows for tests.
    struct Dense {
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        w: Vec<f64>,
    }

    impl SparseDesign for Dense {
        fn n_rows(&self) -> usize {
            self.y.len()
        }
        fn n_cols(&self) -> usize {
            self.x[0].len()
        }
        fn row(&self, i: usize, out: &mut Vec<(usize, f64)>) -> (f64, f64) {
            out.clear();
            out.extend(self.x[i].iter().copied().enumerate().filter(|(_, v)| *v != 0.0));
            (self.y[i], self.w[i])
        }
    }

    #[test]
    fn logistic_is_exactly_complementary() {
        for x in [0.0, 1e-300, 0.1, 0.2, 1.0, 3.7, 20.0, 40.0, 745.0] {
            assert_eq!(logistic(x) + logistic(-x), 1.0, "x = {x}");
        }
        assert!((logistic(0.2) - 0.549_834_0).abs() < 1e-7);
    }

    #[test]
    fn inverse_links_stay_inside_their_ranges() {
        for eta in [-1e6, -800.0, -40.0, 0.0, 40.0, 800.0, 1e6] {
            let p = Family::BinomialLogit.inverse_link(eta);
            assert!(p > 0.0 && p < 1.0, "{eta} -> {p}");
            let m = Family::PoissonLog.inverse_link(eta);
            assert!(m > 0.0 && m.is_finite(), "{eta} -> {m}");
        }
        let b = Family::BinomialLogit;
        assert_eq!(b.inverse_link(50.0) + b.inverse_link(-50.0), 1.0);
    }

    #[test]
    fn unpenalized_gaussian_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 500;
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x + 0.1 * (rng.random::<f64>() - 0.5)).collect();
        let d = Dense {
            x: xs.iter().map(|&x| vec![1.0, x]).collect(),
            y: y.clone(),
            w: vec![1.0; n],
        };
        let s = fit_penalized(&d, Family::GaussianIdentity, &[0.0, 0.0], None, &OptimizerConfig::default()).unwrap();
        // closed form
        let (mx, my) = (xs.iter().sum::<f64>() / n as f64, y.iter().sum::<f64>() / n as f64);
        let sxy: f64 = xs.iter().zip(&y).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((s.coefficients[1] - slope).abs() < 1e-10);
        assert!((s.coefficients[0] - (my - slope * mx)).abs() < 1e-10);
    }

    #[test]
    fn binomial_matches_finite_difference_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random::<f64>() * 2.0 - 1.0]).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| f64::from(rng.random::<f64>() < logistic(0.3 + 1.5 * r[1])))
            .collect();
        let d = Dense { x: rows, y, w: vec![1.0; n] };
        let prec = [0.5, 0.5];
        let s = fit_penalized(&d, Family::BinomialLogit, &prec, None, &OptimizerConfig::default()).unwrap();
        assert!(s.gradient_norm < 1e-6);
        // central differences of the objective vanish at the optimum
        for j in 0..2 {
            let h = 1e-5;
            let mut up = s.coefficients.clone();
            up[j] += h;
            let mut dn = s.coefficients.clone();
            dn[j] -= h;
            let fu = objective_at(&d, Family::BinomialLogit, &up, &prec, 1.0, 4);
            let fd = objective_at(&d, Family::BinomialLogit, &dn, &prec, 1.0, 4);
            assert!(((fu - fd) / (2.0 * h)).abs() < 1e-4);
        }
        assert!(s.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn separable_logistic_stays_finite_under_penalty() {
        let d = Dense {
            x: vec![vec![1.0, -1.0], vec![1.0, -0.5], vec![1.0, 0.5], vec![1.0, 1.0]],
            y: vec![0.0, 0.0, 1.0, 1.0],
            w: vec![1.0; 4],
        };
        let s = fit_penalized(&d, Family::BinomialLogit, &[1.0, 1.0], None, &OptimizerConfig::default()).unwrap();
        assert!(s.coefficients.iter().all(|c| c.is_finite()));
        assert!(s.coefficients[1] > 0.0);
    }

    #[test]
    fn poisson_recovers_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 3000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random::<f64>()]).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| {
                let lam = (0.2 + 0.8 * r[1]).exp();
                let p = rand_distr::Poisson::new(lam).unwrap();
                rng.sample(p)
            })
            .collect();
        let d = Dense { x: rows, y, w: vec![1.0; n] };
        let s = fit_penalized(&d, Family::PoissonLog, &[0.0, 0.0], None, &OptimizerConfig::default()).unwrap();
        assert!((s.coefficients[0] - 0.2).abs() < 0.1);
        assert!((s.coefficients[1] - 0.8).abs() < 0.15);
    }

    #[test]
    fn shard_count_does_not_change_the_answer_materially() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random::<f64>()]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 2.0 * r[1] + rng.random::<f64>()).collect();
        let d = Dense { x: rows, y, w: vec![1.0; n] };
        let a = fit_penalized(&d, Family::GaussianIdentity, &[1.0, 1.0], None, &OptimizerConfig { shards: 1, ..Default::default() }).unwrap();
        let b = fit_penalized(&d, Family::GaussianIdentity, &[1.0, 1.0], None, &OptimizerConfig { shards: 7, ..Default::default() }).unwrap();
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((x - y).abs() < 1e-9);
        }
        let c = fit_penalized(&d, Family::GaussianIdentity, &[1.0, 1.0], None, &OptimizerConfig { shards: 7, ..Default::default() }).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let d = Dense {
            x: vec![vec![1.0], vec![1.0]],
            y: vec![0.0, 1.0],
            w: vec![1.0; 2],
        };
        let cfg = OptimizerConfig {
            max_iterations: 0,
            ..Default::default()
        };
        let err = fit_penalized(&d, Family::BinomialLogit, &[0.0], Some(&[5.0]), &cfg).unwrap_err();
        assert!(matches!(err, AuditError::NonConvergence { .. }));
    }
}
