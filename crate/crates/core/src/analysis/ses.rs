//! Decay of `grad P_t f` and `hess P_t f` from the tangent process.
//!
//! `(x_t, J_t)` with `J_0 = I` are advanced jointly by explicit Euler,
//! `J <- J + delta grad U0(x) J + s sum_k grad V_k(x) J dB_k`, and the
//! gradient of the semigroup is estimated by `E[J_t^T grad f(x_t)]`. The
//! Hessian is a central difference of that estimate across initial points
//! displaced by `hessian_step`, on common random numbers.

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{record_grid, Welford, BLOCK, BLOWUP_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::model::{DerivativeSource, ObservableFn, SdeProblem};
use crate::noise::{steps_in, Level, NoisePlan};

#[derive(Clone, Debug)]
pub struct SesSpec {
    pub problem: SdeProblem,
    pub observable: ObservableFn,
    pub initial_points: Vec<Vec<f64>>,
    pub horizon: f64,
    pub record_every: f64,
    pub n_paths: usize,
    pub fine_delta: f64,
    pub master_seed: u64,
    /// Displacement for the Hessian central difference.
    pub hessian_step: f64,
    /// Reject problems whose first derivatives are finite-difference fallbacks.
    pub require_analytic: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SesPointCurve {
    pub x0: Vec<f64>,
    /// `|E[J^T grad f]|` per record time.
    pub gradient: Vec<f64>,
    pub gradient_stderr: Vec<f64>,
    /// Frobenius norm of the difference-quotient Hessian estimate.
    pub hessian: Vec<f64>,
    pub hessian_stderr: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub rate: f64,
    pub rate_stderr: f64,
    /// 95% band.
    pub lower: f64,
    pub upper: f64,
    pub points_used: usize,
    /// Rate significantly positive.
    pub exponential: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SesProbeReport {
    pub observable: String,
    pub times: Vec<f64>,
    pub points: Vec<SesPointCurve>,
    /// Sup over initial points of the gradient estimate, with the standard
    /// error of the maximising point.
    pub sup_gradient: Vec<f64>,
    pub sup_gradient_stderr: Vec<f64>,
    pub sup_hessian: Vec<f64>,
    pub sup_hessian_stderr: Vec<f64>,
    pub gradient_rate: Option<RateFit>,
    pub hessian_rate: Option<RateFit>,
    /// Largest `|estimate(0) - |grad f(x0)||` over the points; zero since `J_0 = I`.
    pub initial_gradient_error: f64,
    pub derivatives_analytic: bool,
}

/// Least-squares fit of `ln est = a - rate * t` over the times where the
/// estimate exceeds five standard errors.
pub fn fit_decay_rate(times: &[f64], est: &[f64], se: &[f64]) -> Option<RateFit> {
    let keep: Vec<usize> = (0..times.len())
        .filter(|&i| est[i] > 0.0 && est[i] > 5.0 * se[i])
        .collect();
    if keep.len() < 3 {
        return None;
    }
    let x: Vec<f64> = keep.iter().map(|&i| times[i]).collect();
    let y: Vec<f64> = keep.iter().map(|&i| est[i].ln()).collect();
    // Log-scale variance (se / est)^2; exact points get the largest weight
    // seen, and all-exact curves use the residual scatter.
    let fit = if keep.iter().all(|&i| se[i] == 0.0) {
        super::fit::ordinary_linear_fit(&x, &y).ok()?
    } else {
        let mut w: Vec<f64> = keep
            .iter()
            .map(|&i| if se[i] > 0.0 { (est[i] / se[i]).powi(2) } else { 0.0 })
            .collect();
        let wmax = w.iter().cloned().fold(0.0, f64::max);
        for v in &mut w {
            if *v == 0.0 {
                *v = wmax;
            }
        }
        super::fit::weighted_linear_fit(&x, &y, &w).ok()?
    };
    let rate = -fit.slope;
    let se = fit.slope_se;
    Some(RateFit {
        rate,
        rate_stderr: se,
        lower: rate - super::weak_error::Z95 * se,
        upper: rate + super::weak_error::Z95 * se,
        points_used: keep.len(),
        exponential: rate > (super::weak_error::Z95 * se).max(1e-3),
    })
}

struct PointStats {
    /// `[t * n + j]`
    grad: Vec<Welford>,
    /// `[(t * n + j) * n + i]`: `d/dx0_j` of gradient component `i`.
    hess: Vec<Welford>,
}

/// Writes `J^T grad f(x)` at every record step into `out` and returns
/// which record steps the path was still finite at.
#[allow(clippy::too_many_arguments)]
fn run_path(
    problem: &SdeProblem,
    f: &ObservableFn,
    plan: &NoisePlan,
    path: usize,
    x0: &[f64],
    record_steps: &[usize],
    out: &mut [f64],
    scratch: &mut Scratch,
) -> Result<Vec<bool>> {
    let n = problem.dim_state();
    let d = problem.dim_noise();
    let s = problem.noise_scale();
    let delta = plan.fine_delta;
    let Scratch {
        x,
        jm,
        jn,
        u,
        du,
        dv,
        db,
        gf,
        v,
        dx,
    } = scratch;
    x.copy_from_slice(x0);
    jm.fill(0.0);
    for i in 0..n {
        jm[i * n + i] = 1.0;
    }
    let mut stream = plan.increments_for(path, Level::Fine)?;
    let mut alive = vec![true; record_steps.len()];
    let mut ok = true;
    let mut step = 0;
    for (t, &target) in record_steps.iter().enumerate() {
        while step < target {
            stream.next_into(db);
            step += 1;
            if !ok {
                continue;
            }
            problem.drift(x, u);
            problem.drift_jacobian(x, du);
            problem.diffusion_jacobians(x, dv);
            // J' = J + delta DU J + s sum_k DV_k J dB_k
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        let mut a = delta * du[i * n + l];
                        for k in 0..d {
                            a += s * dv[(k * n + i) * n + l] * db[k];
                        }
                        acc += a * jm[l * n + j];
                    }
                    jn[i * n + j] = jm[i * n + j] + acc;
                }
            }
            std::mem::swap(jm, jn);
            for i in 0..n {
                dx[i] = delta * u[i];
            }
            if s != 0.0 {
                problem.diffusion(x, v);
                for k in 0..d {
                    for i in 0..n {
                        dx[i] += s * v[k * n + i] * db[k];
                    }
                }
            }
            for i in 0..n {
                x[i] += dx[i];
            }
            if x.iter().chain(jm.iter()).any(|v| !(v.abs() <= BLOWUP_THRESHOLD)) {
                ok = false;
            }
        }
        alive[t] = ok;
        if ok {
            (f.grad)(x, gf);
            let o = &mut out[t * n..(t + 1) * n];
            for j in 0..n {
                o[j] = (0..n).map(|i| jm[i * n + j] * gf[i]).sum();
            }
        }
    }
    Ok(alive)
}

struct Scratch {
    x: Vec<f64>,
    jm: Vec<f64>,
    jn: Vec<f64>,
    u: Vec<f64>,
    du: Vec<f64>,
    dv: Vec<f64>,
    db: Vec<f64>,
    gf: Vec<f64>,
    v: Vec<f64>,
    dx: Vec<f64>,
}

impl Scratch {
    fn new(n: usize, d: usize) -> Self {
        Scratch {
            x: vec![0.0; n],
            jm: vec![0.0; n * n],
            jn: vec![0.0; n * n],
            u: vec![0.0; n],
            du: vec![0.0; n * n],
            dv: vec![0.0; d * n * n],
            db: vec![0.0; d],
            gf: vec![0.0; n],
            v: vec![0.0; n * d],
            dx: vec![0.0; n],
        }
    }
}

fn probe_point(spec: &SesSpec, plan: &NoisePlan, x0: &[f64], record_steps: &[usize]) -> Result<PointStats> {
    let n = spec.problem.dim_state();
    let d = spec.problem.dim_noise();
    let n_rec = record_steps.len();
    let h = spec.hessian_step;
    let run_block = |b: usize| -> Result<PointStats> {
        let mut scratch = Scratch::new(n, d);
        let mut grad = vec![Welford::default(); n_rec * n];
        let mut hess = vec![Welford::default(); n_rec * n * n];
        let mut base = vec![0.0; n_rec * n];
        let mut plus = vec![0.0; n_rec * n];
        let mut minus = vec![0.0; n_rec * n];
        let mut xp = x0.to_vec();
        for path in b * BLOCK..((b + 1) * BLOCK).min(spec.n_paths) {
            let alive = run_path(&spec.problem, &spec.observable, plan, path, x0, record_steps, &mut base, &mut scratch)?;
            for t in 0..n_rec {
                if alive[t] {
                    for j in 0..n {
                        grad[t * n + j].push(base[t * n + j]);
                    }
                }
            }
            for j in 0..n {
                xp.copy_from_slice(x0);
                xp[j] += h;
                let ap = run_path(&spec.problem, &spec.observable, plan, path, &xp, record_steps, &mut plus, &mut scratch)?;
                xp[j] = x0[j] - h;
                let am = run_path(&spec.problem, &spec.observable, plan, path, &xp, record_steps, &mut minus, &mut scratch)?;
                for t in 0..n_rec {
                    if ap[t] && am[t] {
                        for i in 0..n {
                            hess[(t * n + j) * n + i].push((plus[t * n + i] - minus[t * n + i]) / (2.0 * h));
                        }
                    }
                }
            }
        }
        Ok(PointStats { grad, hess })
    };
    let blocks: Vec<Result<PointStats>> = (0..spec.n_paths.div_ceil(BLOCK))
        .into_par_iter()
        .map(run_block)
        .collect();
    let mut total = PointStats {
        grad: vec![Welford::default(); n_rec * n],
        hess: vec![Welford::default(); n_rec * n * n],
    };
    for b in blocks {
        let b = b?;
        for (a, o) in total.grad.iter_mut().zip(&b.grad) {
            a.merge(o);
        }
        for (a, o) in total.hess.iter_mut().zip(&b.hess) {
            a.merge(o);
        }
    }
    Ok(total)
}

/// Norm of a vector of means with its delta-method standard error,
/// ignoring cross-covariances.
fn norm_with_se(ws: &[Welford]) -> (f64, f64) {
    let norm = ws.iter().map(|w| w.mean * w.mean).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (0.0, ws.iter().map(|w| w.stderr()).fold(0.0, f64::max));
    }
    let var: f64 = ws.iter().map(|w| (w.mean / norm * w.stderr()).powi(2)).sum();
    (norm, var.sqrt())
}

pub fn ses_probe(spec: &SesSpec) -> Result<SesProbeReport> {
    let problem = &spec.problem;
    let sources = problem.sources();
    let analytic = sources.drift_jacobian == DerivativeSource::Analytic
        && sources.diffusion_jacobians == DerivativeSource::Analytic;
    if spec.require_analytic && !analytic {
        return Err(Error::MissingDerivatives(problem.name().to_string()));
    }
    if spec.initial_points.is_empty() {
        return Err(invalid("ses probe needs at least one initial point"));
    }
    let n = problem.dim_state();
    if spec.initial_points.iter().any(|x| x.len() != n) {
        return Err(invalid("initial point length differs from the problem dimension"));
    }
    if !(spec.hessian_step > 0.0) {
        return Err(invalid("ses.hessian_step must be positive"));
    }
    let plan = NoisePlan::new(
        spec.master_seed,
        spec.n_paths,
        problem.dim_noise(),
        spec.fine_delta,
        1,
        spec.horizon,
    )?;
    let times = record_grid(spec.horizon, spec.record_every)?;
    let record_steps = times
        .iter()
        .map(|&t| steps_in(t, spec.fine_delta).ok_or_else(|| invalid(format!("record time {t} is off the step grid"))))
        .collect::<Result<Vec<_>>>()?;
    let n_rec = times.len();

    let mut points = Vec::with_capacity(spec.initial_points.len());
    let mut initial_gradient_error: f64 = 0.0;
    let mut gf = vec![0.0; n];
    for x0 in &spec.initial_points {
        let st = probe_point(spec, &plan, x0, &record_steps)?;
        if st.grad[..n].iter().any(|w| w.n == 0) {
            return Err(Error::AllPathsBlewUp {
                n_paths: spec.n_paths,
                time: 0.0,
            });
        }
        let mut curve = SesPointCurve {
            x0: x0.clone(),
            gradient: Vec::with_capacity(n_rec),
            gradient_stderr: Vec::with_capacity(n_rec),
            hessian: Vec::with_capacity(n_rec),
            hessian_stderr: Vec::with_capacity(n_rec),
        };
        for t in 0..n_rec {
            let (g, gs) = norm_with_se(&st.grad[t * n..(t + 1) * n]);
            let (hh, hs) = norm_with_se(&st.hess[t * n * n..(t + 1) * n * n]);
            curve.gradient.push(g);
            curve.gradient_stderr.push(gs);
            curve.hessian.push(hh);
            curve.hessian_stderr.push(hs);
        }
        (spec.observable.grad)(x0, &mut gf);
        let exact = gf.iter().map(|v| v * v).sum::<f64>().sqrt();
        initial_gradient_error = initial_gradient_error.max((curve.gradient[0] - exact).abs());
        points.push(curve);
    }

    let sup_of = |val: fn(&SesPointCurve) -> (&Vec<f64>, &Vec<f64>)| -> (Vec<f64>, Vec<f64>) {
        (0..n_rec)
            .map(|t| {
                points
                    .iter()
                    .map(|p| {
                        let (v, s) = val(p);
                        (v[t], s[t])
                    })
                    .fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a })
            })
            .unzip()
    };
    let (sup_gradient, sup_gradient_stderr) = sup_of(|p| (&p.gradient, &p.gradient_stderr));
    let (sup_hessian, sup_hessian_stderr) = sup_of(|p| (&p.hessian, &p.hessian_stderr));
    Ok(SesProbeReport {
        observable: spec.observable.name.clone(),
        gradient_rate: fit_decay_rate(&times, &sup_gradient, &sup_gradient_stderr),
        hessian_rate: fit_decay_rate(&times, &sup_hessian, &sup_hessian_stderr),
        times,
        points,
        sup_gradient,
        sup_gradient_stderr,
        sup_hessian,
        sup_hessian_stderr,
        initial_gradient_error,
        derivatives_analytic: analytic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_linear_ou, SdeProblem};
    use std::sync::Arc;

    fn spec(problem: SdeProblem, g: ObservableFn) -> SesSpec {
        SesSpec {
            problem,
            observable: g,
            initial_points: vec![vec![0.0], vec![1.0]],
            horizon: 3.0,
            record_every: 0.25,
            n_paths: 64,
            fine_delta: 0.01,
            master_seed: 9,
            hessian_step: 1e-2,
            require_analytic: false,
        }
    }

    #[test]
    fn linear_tangent_is_exponential() {
        let r = ses_probe(&spec(make_linear_ou(1.0, 0.5).unwrap(), ObservableFn::coordinate(0))).unwrap();
        let fit = r.gradient_rate.unwrap();
        // Euler tangent decays at -ln(1 - delta) / delta.
        assert!((fit.rate - (-(0.99f64).ln() / 0.01)).abs() < 1e-9, "{fit:?}");
        assert!(fit.exponential && fit.rate_stderr < 1e-6);
        assert_eq!(r.initial_gradient_error, 0.0);
        assert!(r.derivatives_analytic);
    }

    #[test]
    fn zero_drift_is_not_exponential() {
        let p = SdeProblem::builder(
            "free",
            1,
            1,
            Arc::new(|_x, o| o[0] = 0.0),
            Arc::new(|_x, o| o[0] = 1.0),
        )
        .build()
        .unwrap();
        let r = ses_probe(&spec(p.clone(), ObservableFn::coordinate(0))).unwrap();
        assert!(!r.gradient_rate.unwrap().exponential);
        assert!(!r.derivatives_analytic);
        let mut s = spec(p, ObservableFn::coordinate(0));
        s.require_analytic = true;
        assert!(matches!(ses_probe(&s), Err(Error::MissingDerivatives(_))));
    }

    #[test]
    fn rate_fit_skips_noisy_times() {
        let t = [0.0, 1.0, 2.0, 3.0, 4.0];
        let est: Vec<f64> = t.iter().map(|t: &f64| (-2.0 * t).exp()).collect();
        let se = [0.0, 1e-3, 1e-3, 1e-2, 1e-2];
        let fit = fit_decay_rate(&t, &est, &se).unwrap();
        assert_eq!(fit.points_used, 3);
        assert!((fit.rate - 2.0).abs() < 1e-9);
    }
}
