//! Weak error of a scheme against a fine reference driven by the same
//! Brownian paths.

use serde::Serialize;

use crate::coupled::{simulate_coupled, CoupledMember, CoupledSpec};
use crate::engine::ObservableSeries;
use crate::error::{invalid, Result};
use crate::model::{ObservableFn, SdeProblem};
use crate::noise::{ratio_of, Level, NoisePlan};
use crate::schemes::{SchemeConfig, SchemeKind};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

#[derive(Clone, Debug)]
pub struct WeakErrorSpec {
    pub problem: SdeProblem,
    pub scheme: SchemeConfig,
    pub reference: SchemeConfig,
    pub x0: Vec<f64>,
    pub horizon: f64,
    /// Spacing of the record grid; a multiple of the scheme step.
    pub record_every: f64,
    pub observable: ObservableFn,
    /// Paths for the scheme; the reference uses all `plan.n_paths`.
    pub n_paths: usize,
    /// `fine_delta` is the reference step.
    pub plan: NoisePlan,
}

impl WeakErrorSpec {
    /// Standard tamed reference at `reference_delta` over `reference_paths`
    /// paths, with the scheme on the first `n_paths` of them.
    #[allow(clippy::too_many_arguments)]
    pub fn with_tamed_reference(
        problem: SdeProblem,
        scheme: SchemeConfig,
        reference_delta: f64,
        reference_paths: usize,
        x0: Vec<f64>,
        horizon: f64,
        record_every: f64,
        observable: ObservableFn,
        n_paths: usize,
        master_seed: u64,
    ) -> Result<Self> {
        let plan = NoisePlan::new(
            master_seed,
            reference_paths.max(n_paths),
            problem.dim_noise(),
            reference_delta,
            ratio_of(scheme.delta, reference_delta)?,
            horizon,
        )?;
        Ok(WeakErrorSpec {
            problem,
            scheme,
            reference: SchemeConfig::new(SchemeKind::TamedStandard, reference_delta),
            x0,
            horizon,
            record_every,
            observable,
            n_paths,
            plan,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WeakErrorReport {
    pub observable: String,
    pub times: Vec<f64>,
    pub scheme: ObservableSeries,
    pub reference: ObservableSeries,
    /// `|mean_scheme - mean_reference|` per time.
    pub err: Vec<f64>,
    /// `1.96 * sqrt(se_scheme^2 + se_reference^2)` per time.
    pub half_width: Vec<f64>,
    /// Paired (common random number) mean difference and its standard error.
    pub paired_diff: Vec<f64>,
    pub paired_stderr: Vec<f64>,
    pub sup_err: f64,
    pub sup_err_time: f64,
    pub max_half_width: f64,
    pub plateau: PlateauCheck,
    /// Checksums of coarse and fine streams agree on sampled paths.
    pub coupling_verified: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PlateauCheck {
    pub first_half_max: f64,
    pub second_half_max: f64,
    pub allowance: f64,
    pub flag: bool,
}

/// `max_{t >= T/2} err <= max_{t <= T/2} err + 2 * max half-width`.
pub fn plateau_check(times: &[f64], err: &[f64], half_width: &[f64], horizon: f64) -> PlateauCheck {
    let mid = 0.5 * horizon;
    let tol = 1e-9 * horizon.max(1.0);
    let mut first: f64 = 0.0;
    let mut second: f64 = 0.0;
    for (&t, &e) in times.iter().zip(err) {
        if t <= mid + tol {
            first = first.max(e);
        }
        if t >= mid - tol {
            second = second.max(e);
        }
    }
    let allowance = 2.0 * half_width.iter().cloned().fold(0.0, f64::max);
    PlateauCheck {
        first_half_max: first,
        second_half_max: second,
        allowance,
        flag: second <= first + allowance,
    }
}

/// Compares two independent-looking series time by time.
pub fn compare_series(scheme: &ObservableSeries, reference: &ObservableSeries) -> (Vec<f64>, Vec<f64>) {
    scheme
        .mean
        .iter()
        .zip(&reference.mean)
        .zip(scheme.stderr.iter().zip(&reference.stderr))
        .map(|((a, b), (sa, sb))| ((a - b).abs(), Z95 * (sa * sa + sb * sb).sqrt()))
        .unzip()
}

pub fn weak_error_curve(spec: &WeakErrorSpec) -> Result<WeakErrorReport> {
    let m = ratio_of(spec.scheme.delta, spec.plan.fine_delta)?;
    if (spec.reference.delta - spec.plan.fine_delta).abs() > 1e-12 * spec.plan.fine_delta {
        return Err(invalid("the noise plan must run at the reference step"));
    }
    if spec.n_paths == 0 || spec.n_paths > spec.plan.n_paths {
        return Err(invalid("scheme path count must lie in 1..=plan.n_paths"));
    }
    let record_times = crate::engine::record_grid(spec.horizon, spec.record_every)?;
    let plan = NoisePlan {
        horizon: spec.horizon,
        coarsen_factor: 1,
        ..spec.plan.clone()
    };
    let coupled = CoupledSpec {
        problem: spec.problem.clone(),
        members: vec![
            CoupledMember {
                scheme: spec.reference.clone(),
                n_paths: spec.plan.n_paths,
            },
            CoupledMember {
                scheme: spec.scheme.clone(),
                n_paths: spec.n_paths,
            },
        ],
        x0: spec.x0.clone(),
        record_times: record_times.clone(),
        noise: plan.clone(),
    };
    let res = simulate_coupled(&coupled, &spec.observable)?;
    let reference = res.series[0].clone();
    let scheme = res.series[1].clone();
    let (err, half_width) = compare_series(&scheme, &reference);
    let diff = res.differences[1].clone().expect("member 1 has differences");

    // Coarse aggregation must consume exactly the fine increments.
    let mut coupling_verified = true;
    for path in 0..spec.n_paths.min(4) {
        let mut fine = plan.increments_for(path, Level::Fine)?;
        let mut coarse = plan.increments_for(path, Level::Factor(m))?;
        let mut buf = vec![0.0; plan.d];
        while fine.next_into(&mut buf) {}
        while coarse.next_into(&mut buf) {}
        coupling_verified &= fine.checksum() == coarse.checksum() && fine.checksum() == res.checksums[path];
    }

    let (sup_idx, sup_err) = err
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (i, e)| if e > a.1 { (i, e) } else { a });
    let plateau = plateau_check(&record_times, &err, &half_width, spec.horizon);
    Ok(WeakErrorReport {
        observable: spec.observable.name.clone(),
        times: record_times.clone(),
        sup_err_time: record_times[sup_idx],
        max_half_width: half_width.iter().cloned().fold(0.0, f64::max),
        scheme,
        reference,
        err,
        half_width,
        paired_diff: diff.mean,
        paired_stderr: diff.stderr,
        sup_err,
        plateau,
        coupling_verified,
    })
}
