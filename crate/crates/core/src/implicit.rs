//! The implicit map `F(y) = z` solving `z = y + delta * U0(z)`, and the
//! modified vector fields `U0 o F`, `V_k o F` built on it.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::SdeProblem;
use crate::sampling::BallSampler;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImplicitSolveConfig {
    /// Target for the residual `|z - y - delta U0(z)|`.
    pub abs_tol: f64,
    pub max_newton_iters: usize,
    pub max_bisection_iters: usize,
    /// Reject `delta >= 1 / (2 c0)` when the registered `c0` is positive.
    pub delta_max_check: bool,
}

impl Default for ImplicitSolveConfig {
    fn default() -> Self {
        ImplicitSolveConfig {
            abs_tol: 1e-12,
            max_newton_iters: 50,
            max_bisection_iters: 200,
            delta_max_check: true,
        }
    }
}

impl ImplicitSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0) {
            return Err(invalid("implicit.abs_tol must be positive"));
        }
        if self.max_newton_iters == 0 {
            return Err(invalid("implicit.max_newton_iters must be >= 1"));
        }
        if self.max_bisection_iters == 0 {
            return Err(invalid("implicit.max_bisection_iters must be >= 1"));
        }
        Ok(())
    }
}

/// Checks `delta` against the registered one-sided Lipschitz constant.
pub fn check_delta(problem: &SdeProblem, delta: f64, cfg: &ImplicitSolveConfig) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid(format!("delta must be positive, got {delta}")));
    }
    if cfg.delta_max_check {
        if let Some(c0) = problem.constants().c0 {
            if c0 > 0.0 {
                let limit = 1.0 / (2.0 * c0);
                if delta >= limit {
                    return Err(Error::DeltaTooLarge { delta, limit });
                }
            }
        }
    }
    Ok(())
}

/// Reusable Newton solver with its own scratch space.
#[derive(Clone, Debug)]
pub struct ImplicitSolver {
    n: usize,
    delta: f64,
    cfg: ImplicitSolveConfig,
    u: Vec<f64>,
    g: Vec<f64>,
    trial: Vec<f64>,
    step: Vec<f64>,
    jac: Vec<f64>,
}

impl ImplicitSolver {
    pub fn new(problem: &SdeProblem, delta: f64, cfg: ImplicitSolveConfig) -> Result<Self> {
        cfg.validate()?;
        check_delta(problem, delta, &cfg)?;
        let n = problem.dim_state();
        Ok(ImplicitSolver {
            n,
            delta,
            cfg,
            u: vec![0.0; n],
            g: vec![0.0; n],
            trial: vec![0.0; n],
            step: vec![0.0; n],
            jac: vec![0.0; n * n],
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Residual `|z - y - delta U0(z)|`, leaving `G(z)` in `self.g`.
    fn residual(&mut self, problem: &SdeProblem, y: &[f64], z: &[f64]) -> f64 {
        problem.drift(z, &mut self.u);
        for i in 0..self.n {
            self.g[i] = z[i] - y[i] - self.delta * self.u[i];
        }
        linalg::norm(&self.g)
    }

    /// Rounding floor on the residual: below this no solver can do better.
    fn floor(&self, y: &[f64], z: &[f64]) -> f64 {
        16.0 * f64::EPSILON
            * (linalg::norm(y) + linalg::norm(z) + self.delta * linalg::norm(&self.u))
    }

    fn converged(&self, res: f64, y: &[f64], z: &[f64]) -> bool {
        res <= self.cfg.abs_tol || res <= self.floor(y, z)
    }

    /// Writes `F(y)` into `z`.
    pub fn solve(&mut self, problem: &SdeProblem, y: &[f64], z: &mut [f64]) -> Result<()> {
        let n = self.n;
        // Explicit Euler predictor, unless y itself is already closer.
        let res_y = self.residual(problem, y, y);
        for i in 0..n {
            self.trial[i] = y[i] + self.delta * self.u[i];
        }
        let trial = std::mem::take(&mut self.trial);
        let res_p = self.residual(problem, y, &trial);
        self.trial = trial;
        if res_p.is_finite() && res_p <= res_y {
            z.copy_from_slice(&self.trial);
        } else {
            z.copy_from_slice(y);
        }
        let mut res = self.residual(problem, y, z);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonConvergence {
                iterations: 0,
                residual: f64::NAN,
            });
        }
        if self.converged(res, y, z) {
            return Ok(());
        }

        let mut iters = 0;
        while iters < self.cfg.max_newton_iters {
            iters += 1;
            problem.drift_jacobian(z, &mut self.jac);
            for v in self.jac.iter_mut() {
                *v *= -self.delta;
            }
            for i in 0..n {
                self.jac[i * n + i] += 1.0;
            }
            self.step.copy_from_slice(&self.g);
            if !linalg::solve_in_place(&mut self.jac, &mut self.step, n) {
                break;
            }
            // Backtracking on the residual norm.
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                for i in 0..n {
                    self.trial[i] = z[i] - t * self.step[i];
                }
                let trial = std::mem::take(&mut self.trial);
                let r = self.residual(problem, y, &trial);
                self.trial = trial;
                if r.is_finite() && r < res {
                    z.copy_from_slice(&self.trial);
                    res = r;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            // restore g for the accepted point
            res = self.residual(problem, y, z).min(res);
            if self.converged(res, y, z) {
                return Ok(());
            }
            if !accepted {
                break;
            }
        }

        if n == 1 {
            self.bisect(problem, y, z)
        } else {
            self.damped_fixed_point(problem, y, z)
        }
    }

    /// Guarded bisection on `G(z) = z - y - delta U0(z)`, increasing in `z`
    /// under the one-sided Lipschitz condition.
    fn bisect(&mut self, problem: &SdeProblem, y: &[f64], z: &mut [f64]) -> Result<()> {
        let g_at = |s: &mut Self, v: f64| -> f64 {
            s.residual(problem, y, &[v]);
            s.g[0]
        };
        let centre = if z[0].is_finite() { z[0] } else { y[0] };
        let mut width = 1.0_f64.max(y[0].abs());
        let (mut lo, mut hi) = (centre - width, centre + width);
        let mut expand = 0;
        while !(g_at(self, lo) <= 0.0 && g_at(self, hi) >= 0.0) {
            width *= 2.0;
            lo = centre - width;
            hi = centre + width;
            expand += 1;
            if expand > 200 {
                return Err(Error::NonConvergence {
                    iterations: expand,
                    residual: f64::NAN,
                });
            }
        }
        let mut res = f64::INFINITY;
        for it in 0..self.cfg.max_bisection_iters {
            let mid = 0.5 * (lo + hi);
            let gm = g_at(self, mid);
            z[0] = mid;
            res = gm.abs();
            if self.converged(res, y, z) || mid == lo || mid == hi {
                return Ok(());
            }
            if gm > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if it + 1 == self.cfg.max_bisection_iters {
                break;
            }
        }
        Err(Error::NonConvergence {
            iterations: self.cfg.max_bisection_iters,
            residual: res,
        })
    }

    /// Damped fixed-point iteration `z <- (1 - w) z + w (y + delta U0(z))`,
    /// halving `w` whenever the residual grows.
    fn damped_fixed_point(&mut self, problem: &SdeProblem, y: &[f64], z: &mut [f64]) -> Result<()> {
        let n = self.n;
        let mut w = 1.0;
        let mut res = self.residual(problem, y, z);
        for _ in 0..self.cfg.max_bisection_iters {
            // g = z - y - delta U0(z); fixed-point update is z - w g
            for i in 0..n {
                self.trial[i] = z[i] - w * self.g[i];
            }
            let trial = std::mem::take(&mut self.trial);
            let r = self.residual(problem, y, &trial);
            self.trial = trial;
            if r.is_finite() && r < res {
                z.copy_from_slice(&self.trial);
                res = r;
                if self.converged(res, y, z) {
                    return Ok(());
                }
            } else {
                w *= 0.5;
                self.residual(problem, y, z);
                if w < 1e-300 {
                    break;
                }
            }
        }
        Err(Error::NonConvergence {
            iterations: self.cfg.max_bisection_iters,
            residual: res,
        })
    }
}

/// Allocating convenience wrapper around [`ImplicitSolver`].
pub fn solve_fdelta(
    problem: &SdeProblem,
    delta: f64,
    y: &[f64],
    cfg: &ImplicitSolveConfig,
) -> Result<Vec<f64>> {
    if y.len() != problem.dim_state() {
        return Err(invalid(format!(
            "state has length {} but problem dimension is {}",
            y.len(),
            problem.dim_state()
        )));
    }
    let mut solver = ImplicitSolver::new(problem, delta, *cfg)?;
    let mut z = vec![0.0; y.len()];
    solver.solve(problem, y, &mut z)?;
    Ok(z)
}

/// `F`, `U0 o F` and `V_k o F` for a fixed step. Every evaluation performs
/// one implicit solve.
#[derive(Clone, Debug)]
pub struct ModifiedFields {
    problem: SdeProblem,
    delta: f64,
    cfg: ImplicitSolveConfig,
}

pub fn make_modified_fields(
    problem: &SdeProblem,
    delta: f64,
    cfg: &ImplicitSolveConfig,
) -> Result<ModifiedFields> {
    cfg.validate()?;
    check_delta(problem, delta, cfg)?;
    Ok(ModifiedFields {
        problem: problem.clone(),
        delta,
        cfg: *cfg,
    })
}

impl ModifiedFields {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn fdelta(&self, y: &[f64]) -> Result<Vec<f64>> {
        solve_fdelta(&self.problem, self.delta, y, &self.cfg)
    }

    pub fn drift(&self, y: &[f64]) -> Result<Vec<f64>> {
        let z = self.fdelta(y)?;
        Ok(self.problem.drift_vec(&z))
    }

    /// Flat `d x N` layout, as [`SdeProblem::diffusion`].
    pub fn diffusion(&self, y: &[f64]) -> Result<Vec<f64>> {
        let z = self.fdelta(y)?;
        Ok(self.problem.diffusion_vec(&z))
    }
}

/// Sampling parameters for [`fdelta_property_check`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdeltaCheckSpec {
    /// Points for the derivative bound.
    pub points: usize,
    /// Random pairs for contraction, growth and the fixed-point identity.
    pub pairs: usize,
    pub radius: f64,
    pub seed: u64,
    /// Allowed relative excess of the finite-difference derivative over its bound.
    pub derivative_tol: f64,
    /// Absolute slack for the pairwise inequalities.
    pub pair_tol: f64,
}

impl Default for FdeltaCheckSpec {
    fn default() -> Self {
        FdeltaCheckSpec {
            points: 1000,
            pairs: 10_000,
            radius: 10.0,
            seed: 7,
            derivative_tol: 1e-4,
            pair_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FdeltaCheckReport {
    pub delta: f64,
    pub points: usize,
    pub pairs: usize,
    /// max over points and columns of `|d_i F(x)| * (1 + delta lambda(F(x)))`.
    pub max_derivative_ratio: f64,
    pub derivative_pass: bool,
    /// max of `|F(x) - F(y)| - (1 - 2 delta c0)^(-1/2) |x - y|`; `None`
    /// without a registered `c0`.
    pub max_contraction_excess: Option<f64>,
    /// max of `|F(x) - F(y)| / |x - y|`.
    pub max_contraction_ratio: f64,
    pub contraction_pass: bool,
    /// max of `|U0(F(x))| - (1 - delta c0)^(-1) |U0(x)|`.
    pub max_growth_excess: Option<f64>,
    pub growth_pass: bool,
    /// max of `|F(x) - x - delta U0(F(x))|`.
    pub max_fixed_point_residual: f64,
    pub fixed_point_pass: bool,
    pub pass: bool,
}

/// Finite-difference and pairwise checks of the derivative, Lipschitz and
/// growth bounds of `F`, with default sampling.
pub fn fdelta_derivative_bounds_check(
    problem: &SdeProblem,
    delta: f64,
    samples: usize,
) -> Result<FdeltaCheckReport> {
    let spec = FdeltaCheckSpec {
        points: samples,
        pairs: samples,
        ..Default::default()
    };
    fdelta_property_check(problem, delta, &spec, &ImplicitSolveConfig::default())
}

pub fn fdelta_property_check(
    problem: &SdeProblem,
    delta: f64,
    spec: &FdeltaCheckSpec,
    cfg: &ImplicitSolveConfig,
) -> Result<FdeltaCheckReport> {
    let lambda = problem
        .constants()
        .lambda_fn
        .clone()
        .ok_or_else(|| invalid("the derivative bound needs a registered lambda function"))?;
    if spec.points == 0 || !(spec.radius > 0.0) {
        return Err(invalid("points must be >= 1 and radius positive"));
    }
    let n = problem.dim_state();
    let mut solver = ImplicitSolver::new(problem, delta, *cfg)?;
    let mut sampler = BallSampler::new(spec.seed, n, spec.radius);

    let mut z = vec![0.0; n];
    let mut zp = vec![0.0; n];
    let mut zm = vec![0.0; n];
    let mut max_derivative_ratio: f64 = 0.0;
    for _ in 0..spec.points {
        let x = sampler.sample();
        solver.solve(problem, &x, &mut z)?;
        let bound = 1.0 / (1.0 + delta * lambda(&z));
        let mut xs = x.clone();
        for i in 0..n {
            let h = 1e-4 * x[i].abs().max(1.0);
            xs[i] = x[i] + h;
            solver.solve(problem, &xs, &mut zp)?;
            xs[i] = x[i] - h;
            solver.solve(problem, &xs, &mut zm)?;
            xs[i] = x[i];
            let col: f64 = zp
                .iter()
                .zip(&zm)
                .map(|(a, b)| ((a - b) / (2.0 * h)).powi(2))
                .sum::<f64>()
                .sqrt();
            max_derivative_ratio = max_derivative_ratio.max(col / bound);
        }
    }

    let c0 = problem.constants().c0;
    let lip = c0.map(|c| (1.0 - 2.0 * delta * c).powf(-0.5));
    let grow = c0.map(|c| 1.0 / (1.0 - delta * c));
    let mut max_contraction_excess = lip.map(|_| f64::NEG_INFINITY);
    let mut max_growth_excess = grow.map(|_| f64::NEG_INFINITY);
    let mut max_contraction_ratio: f64 = 0.0;
    let mut max_fixed_point_residual: f64 = 0.0;
    let mut zx = vec![0.0; n];
    let mut zy = vec![0.0; n];
    for _ in 0..spec.pairs {
        let x = sampler.sample();
        let y = sampler.sample();
        solver.solve(problem, &x, &mut zx)?;
        solver.solve(problem, &y, &mut zy)?;
        let dxy = linalg::dist(&x, &y);
        let dz = linalg::dist(&zx, &zy);
        if dxy > 0.0 {
            max_contraction_ratio = max_contraction_ratio.max(dz / dxy);
        }
        if let (Some(l), Some(m)) = (lip, max_contraction_excess.as_mut()) {
            *m = m.max(dz - l * dxy);
        }
        let ux = problem.drift_vec(&x);
        let uz = problem.drift_vec(&zx);
        if let (Some(g), Some(m)) = (grow, max_growth_excess.as_mut()) {
            *m = m.max(linalg::norm(&uz) - g * linalg::norm(&ux));
        }
        let r: f64 = (0..n)
            .map(|i| (zx[i] - x[i] - delta * uz[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        max_fixed_point_residual = max_fixed_point_residual.max(r);
    }

    let derivative_pass = max_derivative_ratio <= 1.0 + spec.derivative_tol;
    let contraction_pass = max_contraction_excess.is_none_or(|m| m <= spec.pair_tol);
    let growth_pass = max_growth_excess.is_none_or(|m| m <= spec.pair_tol);
    let fixed_point_pass = max_fixed_point_residual <= spec.pair_tol;
    Ok(FdeltaCheckReport {
        delta,
        points: spec.points,
        pairs: spec.pairs,
        max_derivative_ratio,
        derivative_pass,
        max_contraction_excess,
        max_contraction_ratio,
        contraction_pass,
        max_growth_excess,
        growth_pass,
        max_fixed_point_residual,
        fixed_point_pass,
        pass: derivative_pass && contraction_pass && growth_pass && fixed_point_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_cubic_1d, make_linear_ou};

    fn bisection_oracle(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        while hi - lo > 1e-13 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn linear_closed_form() {
        let p = make_linear_ou(1.0, 0.0).unwrap();
        let z = solve_fdelta(&p, 0.1, &[1.0], &Default::default()).unwrap();
        assert!((z[0] - 1.0 / 1.1).abs() < 1e-14);
        let m = make_modified_fields(&p, 0.1, &Default::default()).unwrap();
        assert!((m.drift(&[1.0]).unwrap()[0] + 1.0 / 1.1).abs() < 1e-14);
    }

    #[test]
    fn cubic_root_matches_bisection() {
        let p = make_cubic_1d(1.0, 0.0).unwrap();
        let oracle = bisection_oracle(|z| 1.1 * z + 0.1 * z * z * z - 1.0, 0.0, 1.0);
        let z = solve_fdelta(&p, 0.1, &[1.0], &Default::default()).unwrap();
        assert!((z[0] - oracle).abs() < 1e-10);
        assert!((z[0] - 0.852_723_073_569_864_7).abs() < 1e-12);
        let m = make_modified_fields(&p, 0.1, &Default::default()).unwrap();
        let u = m.drift(&[1.0]).unwrap()[0];
        assert!((u - (-oracle.powi(3) - oracle)).abs() < 1e-10);
        assert!((u + 1.472_769_264_305_140_4).abs() < 1e-11);
        assert_eq!(solve_fdelta(&p, 0.37, &[0.0], &Default::default()).unwrap(), vec![0.0]);
    }

    #[test]
    fn constant_diffusion_unchanged() {
        let p = make_linear_ou(2.0, 0.7).unwrap();
        let m = make_modified_fields(&p, 0.2, &Default::default()).unwrap();
        for y in [-5.0, 0.0, 3.0] {
            assert_eq!(m.diffusion(&[y]).unwrap(), vec![0.7]);
        }
    }

    #[test]
    fn large_states_converge() {
        let p = make_cubic_1d(1.0, 0.0).unwrap();
        for y in [1e3, -1e6, 1e10] {
            let z = solve_fdelta(&p, 0.05, &[y], &Default::default()).unwrap();
            let r = z[0] - y - 0.05 * (-z[0].powi(3) - z[0]);
            assert!(r.abs() <= 1e-12_f64.max(32.0 * f64::EPSILON * y.abs()), "{y}: {r}");
        }
    }

    #[test]
    fn delta_limit_enforced_for_positive_c0() {
        let p = make_linear_ou(1.0, 0.0).unwrap();
        let mut c = p.constants().clone();
        c.c0 = Some(2.0);
        let p = p.with_constants(c);
        let err = solve_fdelta(&p, 0.3, &[1.0], &Default::default()).unwrap_err();
        assert!(matches!(err, Error::DeltaTooLarge { .. }));
        let cfg = ImplicitSolveConfig {
            delta_max_check: false,
            ..Default::default()
        };
        assert!(solve_fdelta(&p, 0.3, &[1.0], &cfg).is_ok());
    }

    #[test]
    fn derivative_at_origin_attains_bound() {
        let p = make_cubic_1d(1.0, 0.0).unwrap();
        let h = 1e-5;
        let zp = solve_fdelta(&p, 0.1, &[h], &Default::default()).unwrap()[0];
        let zm = solve_fdelta(&p, 0.1, &[-h], &Default::default()).unwrap()[0];
        let d = (zp - zm) / (2.0 * h);
        assert!((d - 1.0 / 1.1).abs() < 1e-8);
    }

    #[test]
    fn bounds_report_passes_for_cubic() {
        let p = make_cubic_1d(1.0, 0.3).unwrap();
        let r = fdelta_derivative_bounds_check(&p, 0.1, 200).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_contraction_ratio <= 1.0);
    }

    #[test]
    fn two_dimensional_solve() {
        let p = crate::model::make_coupled_2d(1.0, 1.0, [0.1, 0.0], [0.0, 0.1]).unwrap();
        let y = [3.0, -2.0];
        let z = solve_fdelta(&p, 0.1, &y, &Default::default()).unwrap();
        let u = p.drift_vec(&z);
        for i in 0..2 {
            assert!((z[i] - y[i] - 0.1 * u[i]).abs() < 1e-12);
        }
    }
}
