//! One-step weak error `|E_x g(X_delta) - E_x g(x_delta)|` of a scheme.
//!
//! The exact one-step law is replaced by a standard tamed scheme run with
//! `m` substeps on the same Brownian increments, so the difference is a
//! paired estimate.

use rayon::prelude::*;
use serde::Serialize;

use super::fit::{log_log_fit, LinearFit};
use crate::engine::{Welford, BLOCK};
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::{ObservableFn, SdeProblem};
use crate::noise::{Level, NoisePlan};
use crate::schemes::{SchemeConfig, SchemeKind, Stepper};

/// Fewest and most reference substeps per scheme step.
pub const MIN_SUBSTEPS: usize = 64;
pub const MAX_SUBSTEPS: usize = 65_536;

#[derive(Clone, Debug)]
pub struct LocalErrorSpec {
    pub problem: SdeProblem,
    /// Scheme under test; `delta` is replaced by each entry of `deltas`.
    pub scheme: SchemeConfig,
    pub states: Vec<Vec<f64>>,
    pub deltas: Vec<f64>,
    /// Test functions; the reported value is the largest normalised error.
    pub observables: Vec<ObservableFn>,
    pub n_paths: usize,
    pub master_seed: u64,
}

/// `arctan` and `sin` of every coordinate.
pub fn default_observables(dim: usize) -> Vec<ObservableFn> {
    (0..dim)
        .flat_map(|i| [ObservableFn::arctan(i), ObservableFn::sin(i)])
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct LocalErrorRow {
    pub state: Vec<f64>,
    pub state_norm: f64,
    pub delta: f64,
    /// `max_g |E[g(X) - g(x_ref)]| / seminorm(g)`.
    pub phi: f64,
    pub phi_stderr: f64,
    /// Observable attaining the maximum.
    pub observable: String,
    pub reference_substeps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlopeFit {
    /// The quantity held fixed (`|x|` for delta slopes, delta for state slopes).
    pub fixed: f64,
    pub slope: f64,
    pub slope_stderr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LocalErrorReport {
    pub scheme: SchemeKind,
    pub rows: Vec<LocalErrorRow>,
    /// Slope of `ln phi` against `ln delta` per state (needs >= 2 deltas).
    pub delta_slopes: Vec<SlopeFit>,
    /// Slope of `ln phi` against `ln |x|` per delta over nonzero states.
    pub state_slopes: Vec<SlopeFit>,
    /// Proven bound shape for the scheme, for display.
    pub model_shape: &'static str,
}

/// Bound shape the theory gives for each scheme's local error.
pub fn model_shape(kind: SchemeKind) -> &'static str {
    match kind {
        SchemeKind::ExplicitEm => "|x| d^2 + d^1.5",
        SchemeKind::SplitStep | SchemeKind::ExplicitEmOnModified | SchemeKind::ImplicitEuler => {
            "d^1.5 (1 + |x|^(2q+1))"
        }
        SchemeKind::TamedTruncated | SchemeKind::TamedStandard => "d^2 |x|^(2q+2) + d^1.5",
    }
}

/// Reference substeps so that each substep moves the drift by a small
/// fraction of its local scale.
pub fn reference_substeps(problem: &SdeProblem, x: &[f64], delta: f64) -> usize {
    let n = problem.dim_state();
    let u = problem.drift_vec(x);
    let mut jac = vec![0.0; n * n];
    problem.drift_jacobian(x, &mut jac);
    let scale = delta * (linalg::norm(&u) + linalg::frobenius(&jac));
    let want = (50.0 * scale).ceil();
    if !want.is_finite() || want >= MAX_SUBSTEPS as f64 {
        return MAX_SUBSTEPS;
    }
    (want as usize).next_power_of_two().clamp(MIN_SUBSTEPS, MAX_SUBSTEPS)
}

/// Paired one-step differences for one state and step size; one Welford
/// per observable.
fn one_step(spec: &LocalErrorSpec, x: &[f64], delta: f64, m: usize) -> Result<Vec<Welford>> {
    let problem = &spec.problem;
    let scheme = spec.scheme.with_delta(delta);
    let reference = SchemeConfig::new(SchemeKind::TamedStandard, delta / m as f64);
    let plan = NoisePlan {
        master_seed: spec.master_seed,
        n_paths: spec.n_paths,
        d: problem.dim_noise(),
        fine_delta: delta / m as f64,
        coarsen_factor: m,
        horizon: delta,
    };
    Stepper::new(problem, &scheme)?;
    let n_obs = spec.observables.len();
    let run_block = |b: usize| -> Result<Vec<Welford>> {
        let mut coarse = Stepper::new(problem, &scheme)?;
        let mut fine = Stepper::new(problem, &reference)?;
        let n = problem.dim_state();
        let d = problem.dim_noise();
        let mut stats = vec![Welford::default(); n_obs];
        let (mut xs, mut xr) = (vec![0.0; n], vec![0.0; n]);
        let (mut db, mut sum) = (vec![0.0; d], vec![0.0; d]);
        for path in b * BLOCK..((b + 1) * BLOCK).min(spec.n_paths) {
            let mut stream = plan.increments_for(path, Level::Fine)?;
            xr.copy_from_slice(x);
            sum.fill(0.0);
            while stream.next_into(&mut db) {
                fine.step(&mut xr, &db)?;
                for k in 0..d {
                    sum[k] += db[k];
                }
            }
            xs.copy_from_slice(x);
            coarse.step(&mut xs, &sum)?;
            if xs.iter().chain(&xr).any(|v| !v.is_finite()) {
                return Err(Error::Analysis(format!(
                    "one-step state is not finite at |x| = {}",
                    linalg::norm(x)
                )));
            }
            for (w, g) in stats.iter_mut().zip(&spec.observables) {
                w.push((g.eval)(&xs) - (g.eval)(&xr));
            }
        }
        Ok(stats)
    };
    let blocks: Vec<Result<Vec<Welford>>> = (0..spec.n_paths.div_ceil(BLOCK))
        .into_par_iter()
        .map(run_block)
        .collect();
    let mut total = vec![Welford::default(); n_obs];
    for block in blocks {
        for (a, b) in total.iter_mut().zip(&block?) {
            a.merge(b);
        }
    }
    Ok(total)
}

pub fn local_weak_error_profile(spec: &LocalErrorSpec) -> Result<LocalErrorReport> {
    if spec.states.is_empty() || spec.deltas.is_empty() || spec.observables.is_empty() {
        return Err(invalid("local error needs states, deltas and observables"));
    }
    if spec.n_paths < 2 {
        return Err(invalid("local error needs at least 2 paths"));
    }
    let n = spec.problem.dim_state();
    if spec.states.iter().any(|x| x.len() != n) {
        return Err(invalid("state length differs from the problem dimension"));
    }
    if spec.deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(invalid("local error deltas must be positive"));
    }

    let mut rows = Vec::new();
    for x in &spec.states {
        for &delta in &spec.deltas {
            let m = reference_substeps(&spec.problem, x, delta);
            let stats = one_step(spec, x, delta, m)?;
            let (j, w) = stats
                .iter()
                .enumerate()
                .max_by(|a, b| {
                    let sa = a.1.mean.abs() / spec.observables[a.0].c2b_seminorm;
                    let sb = b.1.mean.abs() / spec.observables[b.0].c2b_seminorm;
                    sa.total_cmp(&sb)
                })
                .expect("observables present");
            let norm = spec.observables[j].c2b_seminorm;
            rows.push(LocalErrorRow {
                state: x.clone(),
                state_norm: linalg::norm(x),
                delta,
                phi: w.mean.abs() / norm,
                phi_stderr: w.stderr() / norm,
                observable: spec.observables[j].name.clone(),
                reference_substeps: m,
            });
        }
    }

    let fit_of = |sel: &[&LocalErrorRow], by_delta: bool| -> Option<LinearFit> {
        let pts: Vec<&&LocalErrorRow> = sel
            .iter()
            .filter(|r| r.phi > 0.0 && (by_delta || r.state_norm > 0.0))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let x: Vec<f64> = pts
            .iter()
            .map(|r| if by_delta { r.delta } else { r.state_norm })
            .collect();
        let y: Vec<f64> = pts.iter().map(|r| r.phi).collect();
        let se: Vec<f64> = pts.iter().map(|r| r.phi_stderr).collect();
        log_log_fit(&x, &y, &se).ok()
    };
    let mut delta_slopes = Vec::new();
    for x in &spec.states {
        let sel: Vec<&LocalErrorRow> = rows.iter().filter(|r| &r.state == x).collect();
        if let Some(f) = fit_of(&sel, true) {
            delta_slopes.push(SlopeFit {
                fixed: linalg::norm(x),
                slope: f.slope,
                slope_stderr: f.slope_se,
            });
        }
    }
    let mut state_slopes = Vec::new();
    for &delta in &spec.deltas {
        let sel: Vec<&LocalErrorRow> = rows.iter().filter(|r| r.delta == delta).collect();
        if let Some(f) = fit_of(&sel, false) {
            state_slopes.push(SlopeFit {
                fixed: delta,
                slope: f.slope,
                slope_stderr: f.slope_se,
            });
        }
    }
    Ok(LocalErrorReport {
        scheme: spec.scheme.kind,
        rows,
        delta_slopes,
        state_slopes,
        model_shape: model_shape(spec.scheme.kind),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_fig1, make_linear_ou};

    #[test]
    fn substeps_grow_with_the_drift_scale() {
        let p = make_fig1();
        assert_eq!(reference_substeps(&p, &[0.0], 0.01), MIN_SUBSTEPS);
        let big = reference_substeps(&p, &[8.0], 0.05);
        assert!(big > 1000 && big.is_power_of_two());
        assert_eq!(reference_substeps(&p, &[1e6], 0.05), MAX_SUBSTEPS);
    }

    #[test]
    fn deterministic_euler_local_error_is_second_order() {
        // Without noise the one-step error of Euler on x' = -x is x d^2 / 2.
        let spec = LocalErrorSpec {
            problem: make_linear_ou(1.0, 0.0).unwrap(),
            scheme: SchemeConfig::new(SchemeKind::ExplicitEm, 0.1),
            states: vec![vec![0.5]],
            deltas: vec![0.2, 0.1, 0.05],
            observables: vec![ObservableFn::coordinate(0)],
            n_paths: 2,
            master_seed: 3,
        };
        let r = local_weak_error_profile(&spec).unwrap();
        assert_eq!(r.rows.len(), 3);
        let s = &r.delta_slopes[0];
        assert!((s.slope - 2.0).abs() < 0.1, "{}", s.slope);
        assert_eq!(r.rows[0].phi_stderr, 0.0);
    }
}
