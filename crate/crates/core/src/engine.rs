//! Ensemble simulation with deterministic parallel reduction.
//!
//! Paths are processed in fixed blocks of [`BLOCK`] consecutive indices.
//! Each block accumulates its own streaming statistics and the blocks are
//! merged in index order, so results do not depend on the worker count.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::{ObservableFn, SdeProblem};
use crate::noise::{ratio_of, steps_in, Level, NoisePlan};
use crate::schemes::{select_alpha, SchemeConfig, SchemeKind, Stepper};

/// Paths per work item.
pub const BLOCK: usize = 32;

/// States with a coordinate of magnitude above this (or NaN) count as blown up.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Streaming mean and variance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Welford {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub problem: SdeProblem,
    pub scheme: SchemeConfig,
    pub x0: Vec<f64>,
    pub horizon: f64,
    /// Sorted times in `[0, horizon]`, each a multiple of the scheme step.
    pub record_times: Vec<f64>,
    /// Number of paths simulated; the first `n_paths` streams of the plan.
    pub n_paths: usize,
    pub noise: NoisePlan,
}

/// `0, every, 2 every, ..., horizon`.
pub fn record_grid(horizon: f64, every: f64) -> Result<Vec<f64>> {
    let n = steps_in(horizon, every).ok_or_else(|| {
        invalid(format!("record.every = {every} does not divide the horizon {horizon}"))
    })?;
    Ok((0..=n).map(|i| i as f64 * every).collect())
}

impl EnsembleSpec {
    /// A spec whose noise plan runs at the scheme's own step.
    pub fn new(
        problem: SdeProblem,
        scheme: SchemeConfig,
        x0: Vec<f64>,
        horizon: f64,
        record_times: Vec<f64>,
        n_paths: usize,
        master_seed: u64,
    ) -> Result<Self> {
        let noise = NoisePlan::new(
            master_seed,
            n_paths,
            problem.dim_noise(),
            scheme.delta,
            1,
            horizon,
        )?;
        Ok(EnsembleSpec {
            problem,
            scheme,
            x0,
            horizon,
            record_times,
            n_paths,
            noise,
        })
    }

    /// Scheme steps per noise-plan step, and the record steps.
    fn layout(&self) -> Result<(usize, Vec<usize>)> {
        self.scheme.validate()?;
        if self.x0.len() != self.problem.dim_state() {
            return Err(invalid(format!(
                "x0 has length {} but the problem dimension is {}",
                self.x0.len(),
                self.problem.dim_state()
            )));
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            return Err(invalid("x0 must be finite"));
        }
        if self.n_paths == 0 {
            return Err(invalid("n_paths must be >= 1"));
        }
        self.noise.validate()?;
        if self.n_paths > self.noise.n_paths {
            return Err(invalid(format!(
                "{} paths requested but the noise plan has {}",
                self.n_paths, self.noise.n_paths
            )));
        }
        if self.noise.d != self.problem.dim_noise() {
            return Err(invalid("noise plan dimension differs from the problem's"));
        }
        let m = ratio_of(self.scheme.delta, self.noise.fine_delta)?;
        if self.horizon > self.noise.horizon * (1.0 + 1e-9) {
            return Err(invalid("horizon exceeds the noise plan horizon"));
        }
        let total = steps_in(self.horizon, self.scheme.delta).ok_or_else(|| {
            invalid(format!(
                "horizon {} is not a multiple of scheme.delta {}",
                self.horizon, self.scheme.delta
            ))
        })?;
        if self.record_times.is_empty() {
            return Err(invalid("record_times must not be empty"));
        }
        let mut steps = Vec::with_capacity(self.record_times.len());
        for &t in &self.record_times {
            let s = steps_in(t, self.scheme.delta).ok_or_else(|| {
                invalid(format!(
                    "record time {t} is not a multiple of scheme.delta {}",
                    self.scheme.delta
                ))
            })?;
            if s > total {
                return Err(invalid(format!("record time {t} exceeds the horizon")));
            }
            if steps.last().is_some_and(|&p| s <= p) {
                return Err(invalid("record_times must be strictly increasing"));
            }
            steps.push(s);
        }
        Ok((m, steps))
    }

    /// Value of the TTE constant used, if the scheme is TTE.
    pub fn effective_alpha(&self) -> Option<f64> {
        (self.scheme.kind == SchemeKind::TamedTruncated).then(|| {
            self.scheme
                .alpha
                .or_else(|| select_alpha(self.problem.constants()).ok().map(|s| s.alpha))
                .unwrap_or(f64::NAN)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObservableSeries {
    pub name: String,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_effective: Vec<usize>,
    /// Paths blown up at or before each time (cumulative).
    pub blowups: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentSeries {
    pub powers: Vec<f64>,
    pub times: Vec<f64>,
    /// `mean[p][t]` estimates `E|X_t|^powers[p]`.
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub n_effective: Vec<usize>,
    pub blowups: Vec<usize>,
}

impl MomentSeries {
    /// Series for one power as an [`ObservableSeries`] named `|x|^p`.
    pub fn as_series(&self, index: usize) -> ObservableSeries {
        ObservableSeries {
            name: format!("|x|^{}", self.powers[index]),
            times: self.times.clone(),
            mean: self.mean[index].clone(),
            stderr: self.stderr[index].clone(),
            n_effective: self.n_effective.clone(),
            blowups: self.blowups.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub observables: Vec<ObservableSeries>,
    pub moments: MomentSeries,
    /// Per-path checksum of the fine increments consumed.
    pub checksums: Vec<f64>,
    /// Total paths that blew up before the horizon.
    pub blowups: usize,
}

struct BlockOut {
    /// `stats[t * width + j]`, observables first, then moments.
    stats: Vec<Welford>,
    /// Paths that blew up at record index `t` (not cumulative).
    new_blowups: Vec<usize>,
    checksums: Vec<f64>,
}

fn blown_up(x: &[f64]) -> bool {
    x.iter().any(|v| !(v.abs() <= BLOWUP_THRESHOLD))
}

/// Runs the ensemble and returns per-time statistics of every observable
/// and of `|x|^p` for every requested power.
pub fn simulate_ensemble(
    spec: &EnsembleSpec,
    observables: &[ObservableFn],
    moment_powers: &[f64],
) -> Result<EnsembleResult> {
    let (m, record_steps) = spec.layout()?;
    // Check the stepper can be built before spawning work.
    Stepper::new(&spec.problem, &spec.scheme)?;

    let n_rec = record_steps.len();
    let width = observables.len() + moment_powers.len();
    let n_blocks = spec.n_paths.div_ceil(BLOCK);

    let run_block = |b: usize| -> Result<BlockOut> {
        let n = spec.problem.dim_state();
        let d = spec.problem.dim_noise();
        let mut stepper = Stepper::new(&spec.problem, &spec.scheme)?;
        let mut stats = vec![Welford::default(); n_rec * width];
        let mut new_blowups = vec![0usize; n_rec];
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(spec.n_paths);
        let mut checksums = Vec::with_capacity(hi - lo);
        let mut x = vec![0.0; n];
        let mut db = vec![0.0; d];
        for path in lo..hi {
            let mut stream = spec.noise.increments_for(path, Level::Factor(m))?;
            x.copy_from_slice(&spec.x0);
            let mut step = 0usize;
            let mut alive = true;
            for (t, &target) in record_steps.iter().enumerate() {
                // Frozen paths keep consuming noise so checksums stay comparable.
                while step < target {
                    if !stream.next_into(&mut db) {
                        return Err(invalid("noise stream shorter than the horizon"));
                    }
                    step += 1;
                    if alive {
                        stepper.step(&mut x, &db)?;
                        if blown_up(&x) {
                            alive = false;
                            new_blowups[t] += 1;
                        }
                    }
                }
                if !alive {
                    continue;
                }
                let row = &mut stats[t * width..(t + 1) * width];
                for (j, g) in observables.iter().enumerate() {
                    row[j].push((g.eval)(&x));
                }
                if !moment_powers.is_empty() {
                    let r = linalg::norm(&x);
                    for (j, &p) in moment_powers.iter().enumerate() {
                        let v = if p == 2.0 { linalg::dot(&x, &x) } else { r.powf(p) };
                        row[observables.len() + j].push(v);
                    }
                }
            }
            checksums.push(stream.checksum());
        }
        Ok(BlockOut {
            stats,
            new_blowups,
            checksums,
        })
    };

    let blocks: Vec<Result<BlockOut>> = (0..n_blocks).into_par_iter().map(run_block).collect();

    let mut stats = vec![Welford::default(); n_rec * width];
    let mut new_blowups = vec![0usize; n_rec];
    let mut checksums = Vec::with_capacity(spec.n_paths);
    for block in blocks {
        let block = block?;
        for (a, b) in stats.iter_mut().zip(&block.stats) {
            a.merge(b);
        }
        for (a, b) in new_blowups.iter_mut().zip(&block.new_blowups) {
            *a += b;
        }
        checksums.extend(block.checksums);
    }

    let mut blowups = Vec::with_capacity(n_rec);
    let mut acc = 0;
    for b in &new_blowups {
        acc += b;
        blowups.push(acc);
    }
    let n_effective: Vec<usize> = blowups.iter().map(|b| spec.n_paths - b).collect();
    if let Some(t) = n_effective.iter().position(|&n| n == 0) {
        return Err(Error::AllPathsBlewUp {
            n_paths: spec.n_paths,
            time: spec.record_times[t],
        });
    }

    let column = |j: usize| -> (Vec<f64>, Vec<f64>) {
        (0..n_rec)
            .map(|t| {
                let s = &stats[t * width + j];
                (s.mean, s.stderr())
            })
            .unzip()
    };
    let times = spec.record_times.clone();
    let observables_out = observables
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let (mean, stderr) = column(j);
            ObservableSeries {
                name: g.name.clone(),
                times: times.clone(),
                mean,
                stderr,
                n_effective: n_effective.clone(),
                blowups: blowups.clone(),
            }
        })
        .collect();
    let (mut mmean, mut mse) = (Vec::new(), Vec::new());
    for j in 0..moment_powers.len() {
        let (mean, se) = column(observables.len() + j);
        mmean.push(mean);
        mse.push(se);
    }
    Ok(EnsembleResult {
        observables: observables_out,
        moments: MomentSeries {
            powers: moment_powers.to_vec(),
            times,
            mean: mmean,
            stderr: mse,
            n_effective,
            blowups: blowups.clone(),
        },
        checksums,
        blowups: acc,
    })
}

/// One-step check of the second-moment recursion from a single state.
#[derive(Clone, Debug, Serialize)]
pub struct FirstStepCheck {
    pub state_norm: f64,
    /// Monte Carlo estimate of `E|J_1|^2` started from the state.
    pub second_moment: f64,
    pub stderr: f64,
    /// `eps |x|^2 + C delta` with `C = s^2 K` the noise contribution.
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentAuditReport {
    pub alpha: f64,
    pub q: f64,
    pub delta: f64,
    pub epsilon_delta: f64,
    pub x0_norm_sq: f64,
    /// `sup_n` of the estimated `E|J_{t_n}|^2` over the record grid.
    pub sup_second_moment: f64,
    /// Smallest `C >= 0` with `sup <= |x0|^2 + C`.
    pub fitted_c: f64,
    pub blowups: usize,
    /// max over the deterministic grid `|x| > 1` of `|J_1|^2 / (eps |x|^2)`.
    pub grid_max_ratio: f64,
    pub grid_pass: bool,
    pub first_step: Vec<FirstStepCheck>,
    pub first_step_pass: bool,
}

impl MomentAuditReport {
    pub fn bounded_by(&self, c: f64) -> bool {
        self.sup_second_moment <= self.x0_norm_sq + c
    }
}

/// Second-moment audit of a TTE run: the ensemble's `sup_n E|J|^2`, the
/// deterministic one-step contraction `|J_1|^2 <= eps |J_0|^2` on a grid of
/// states with `|x| > 1`, and Monte Carlo one-step second moments from a
/// few such states.
pub fn moment_recursion_audit(spec: &EnsembleSpec) -> Result<MomentAuditReport> {
    if spec.scheme.kind != SchemeKind::TamedTruncated {
        return Err(invalid("moment_recursion_audit needs a TTE scheme"));
    }
    let problem = &spec.problem;
    let (alpha, q) = spec.scheme.resolve_tte(problem)?;
    let c = problem.constants();
    let b0 = c
        .tamed_b0
        .ok_or_else(|| invalid("moment audit needs the tamed Lyapunov constant"))?;
    let c0 = c
        .tamed_c0
        .ok_or_else(|| invalid("moment audit needs the tamed growth constant"))?;
    let delta = spec.scheme.delta;
    let eps = crate::schemes::contraction_factor(b0, c0, alpha, delta);

    let res = simulate_ensemble(spec, &[], &[2.0])?;
    let sup = res.moments.mean[0].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x0_sq = linalg::dot(&spec.x0, &spec.x0);

    let n = problem.dim_state();
    let d = problem.dim_noise();
    let cfg = SchemeConfig {
        alpha: Some(alpha),
        q: Some(q),
        ..spec.scheme.clone()
    };
    let mut det = Stepper::new(problem, &cfg)?;
    let zero = vec![0.0; d];
    let mut grid_max: f64 = 0.0;
    let mut x = vec![0.0; n];
    for dir in 0..n {
        for i in 0..400 {
            let r = 1.0 + 1e-6 + (i as f64 / 399.0).powi(3) * 1e3;
            for sign in [1.0, -1.0] {
                x.fill(0.0);
                x[dir] = sign * r;
                det.step(&mut x, &zero)?;
                grid_max = grid_max.max(linalg::dot(&x, &x) / (eps * r * r));
            }
        }
    }

    let s = problem.noise_scale();
    let noise_c = s * s * c.k.unwrap_or(0.0);
    let mut first_step = Vec::new();
    let probes = [1.5, 3.0, 10.0, 100.0];
    let n_mc = spec.n_paths.max(1000);
    let plan = NoisePlan::new(spec.noise.master_seed ^ 0x5eed, n_mc, d, delta, 1, delta)?;
    let mut db = vec![0.0; d];
    for &r in &probes {
        let mut w = Welford::default();
        for path in 0..n_mc {
            let mut stream = plan.increments_for(path, Level::Fine)?;
            stream.next_into(&mut db);
            x.fill(0.0);
            x[0] = r;
            det.step(&mut x, &db)?;
            w.push(linalg::dot(&x, &x));
        }
        let bound = eps * r * r + noise_c * delta;
        first_step.push(FirstStepCheck {
            state_norm: r,
            second_moment: w.mean,
            stderr: w.stderr(),
            bound,
            pass: w.mean <= bound + 3.0 * w.stderr(),
        });
    }
    Ok(MomentAuditReport {
        alpha,
        q,
        delta,
        epsilon_delta: eps,
        x0_norm_sq: x0_sq,
        sup_second_moment: sup,
        fitted_c: (sup - x0_sq).max(0.0),
        blowups: res.blowups,
        grid_max_ratio: grid_max,
        grid_pass: grid_max <= 1.0,
        first_step_pass: first_step.iter().all(|f| f.pass),
        first_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_fig1, ObservableFn, SdeProblem};
    use std::sync::Arc;

    #[test]
    fn welford_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..97).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let mut all = Welford::default();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = Welford::default();
        let mut b = Welford::default();
        xs[..40].iter().for_each(|&x| a.push(x));
        xs[40..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert_eq!(a.n, all.n);
        assert!((a.mean - all.mean).abs() < 1e-14);
        assert!((a.m2 - all.m2).abs() < 1e-11);
    }

    #[test]
    fn frozen_dynamics_are_constant() {
        let p = SdeProblem::builder(
            "frozen",
            1,
            1,
            Arc::new(|_x, o| o[0] = 0.0),
            Arc::new(|_x, o| o[0] = 0.0),
        )
        .build()
        .unwrap();
        let spec = EnsembleSpec::new(
            p,
            SchemeConfig::new(SchemeKind::ExplicitEm, 0.1),
            vec![0.7],
            1.0,
            record_grid(1.0, 0.5).unwrap(),
            50,
            3,
        )
        .unwrap();
        let r = simulate_ensemble(&spec, &[ObservableFn::coordinate(0)], &[2.0]).unwrap();
        assert!(r.observables[0].mean.iter().all(|&m| (m - 0.7).abs() < 1e-15));
        assert!(r.observables[0].stderr.iter().all(|&s| s < 1e-15));
        assert!(r.moments.mean[0].iter().all(|&m| (m - 0.49).abs() < 1e-14));
    }

    #[test]
    fn explicit_em_blows_up_from_large_data() {
        let spec = EnsembleSpec::new(
            make_fig1(),
            SchemeConfig::new(SchemeKind::ExplicitEm, 0.05),
            vec![100.0],
            1.0,
            record_grid(1.0, 0.25).unwrap(),
            64,
            1,
        )
        .unwrap();
        let err = simulate_ensemble(&spec, &[ObservableFn::coordinate(0)], &[]).unwrap_err();
        assert!(matches!(err, Error::AllPathsBlewUp { n_paths: 64, .. }));
    }

    #[test]
    fn misaligned_record_times_rejected() {
        let spec = EnsembleSpec::new(
            make_fig1(),
            SchemeConfig::tte(0.05, 1.3),
            vec![1.0],
            1.0,
            vec![0.0, 0.33],
            8,
            1,
        )
        .unwrap();
        assert!(simulate_ensemble(&spec, &[], &[2.0]).is_err());
    }

    #[test]
    fn reruns_are_bitwise_equal() {
        let spec = EnsembleSpec::new(
            make_fig1(),
            SchemeConfig::tte(0.05, 1.3),
            vec![1.0],
            2.0,
            record_grid(2.0, 0.25).unwrap(),
            100,
            11,
        )
        .unwrap();
        let a = simulate_ensemble(&spec, &[ObservableFn::coordinate(0)], &[2.0]).unwrap();
        let b = simulate_ensemble(&spec, &[ObservableFn::coordinate(0)], &[2.0]).unwrap();
        assert_eq!(a, b);
    }
}
