//! Several schemes driven by one fine Brownian path per index.
//!
//! Member 0 is the baseline (usually a fine reference). Every member steps
//! on sums of its own number of consecutive fine increments taken from the
//! same stream, so paired differences against the baseline use common
//! random numbers exactly.

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{ObservableSeries, Welford, BLOCK, BLOWUP_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::model::{ObservableFn, SdeProblem};
use crate::noise::{ratio_of, steps_in, Level, NoisePlan};
use crate::schemes::{SchemeConfig, Stepper};

#[derive(Clone, Debug)]
pub struct CoupledMember {
    pub scheme: SchemeConfig,
    /// Runs on paths `0..n_paths` of the plan.
    pub n_paths: usize,
}

#[derive(Clone, Debug)]
pub struct CoupledSpec {
    pub problem: SdeProblem,
    pub members: Vec<CoupledMember>,
    pub x0: Vec<f64>,
    /// Multiples of every member's step.
    pub record_times: Vec<f64>,
    /// `fine_delta` must divide every member's step.
    pub noise: NoisePlan,
}

/// Paired statistics of `g(member) - g(baseline)` on the paths where both
/// are alive.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DifferenceSeries {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_pairs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupledResult {
    /// `series[member]`.
    pub series: Vec<ObservableSeries>,
    /// `differences[member]` against member 0; `None` for member 0.
    pub differences: Vec<Option<DifferenceSeries>>,
    /// Checksums of the fine stream per path (over all members' paths).
    pub checksums: Vec<f64>,
}

struct Block {
    /// `stats[(member * n_rec + t)]`
    stats: Vec<Welford>,
    diffs: Vec<Welford>,
    new_blowups: Vec<usize>,
    checksums: Vec<f64>,
}

pub fn simulate_coupled(spec: &CoupledSpec, g: &ObservableFn) -> Result<CoupledResult> {
    if spec.members.is_empty() {
        return Err(invalid("coupled run needs at least one member"));
    }
    spec.noise.validate()?;
    let problem = &spec.problem;
    if spec.x0.len() != problem.dim_state() {
        return Err(invalid("x0 length differs from the problem dimension"));
    }
    if spec.noise.d != problem.dim_noise() {
        return Err(invalid("noise plan dimension differs from the problem's"));
    }
    let fine = spec.noise.fine_delta;
    let mut factors = Vec::with_capacity(spec.members.len());
    for m in &spec.members {
        m.scheme.validate()?;
        if m.n_paths == 0 || m.n_paths > spec.noise.n_paths {
            return Err(invalid(format!(
                "member path count {} outside 1..={}",
                m.n_paths, spec.noise.n_paths
            )));
        }
        factors.push(ratio_of(m.scheme.delta, fine)?);
        Stepper::new(problem, &m.scheme)?;
    }
    let total_fine = spec.noise.fine_steps();
    let mut record_fine = Vec::with_capacity(spec.record_times.len());
    for &t in &spec.record_times {
        let s = steps_in(t, fine)
            .ok_or_else(|| invalid(format!("record time {t} is off the fine grid")))?;
        if s > total_fine {
            return Err(invalid(format!("record time {t} exceeds the noise horizon")));
        }
        if factors.iter().any(|&f| s % f != 0) {
            return Err(invalid(format!("record time {t} is not on every member's grid")));
        }
        if record_fine.last().is_some_and(|&p| s <= p) {
            return Err(invalid("record_times must be strictly increasing"));
        }
        record_fine.push(s);
    }
    let last = *record_fine
        .last()
        .ok_or_else(|| invalid("record_times must not be empty"))?;

    let n_mem = spec.members.len();
    let n_rec = record_fine.len();
    let max_paths = spec.members.iter().map(|m| m.n_paths).max().unwrap_or(0);
    let n_blocks = max_paths.div_ceil(BLOCK);
    let n = problem.dim_state();
    let d = problem.dim_noise();

    let run_block = |b: usize| -> Result<Block> {
        let mut steppers = spec
            .members
            .iter()
            .map(|m| Stepper::new(problem, &m.scheme))
            .collect::<Result<Vec<_>>>()?;
        let mut stats = vec![Welford::default(); n_mem * n_rec];
        let mut diffs = vec![Welford::default(); n_mem * n_rec];
        let mut new_blowups = vec![0usize; n_mem * n_rec];
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(max_paths);
        let mut checksums = Vec::with_capacity(hi - lo);
        let mut states = vec![0.0; n_mem * n];
        let mut acc = vec![0.0; n_mem * d];
        let mut alive = vec![false; n_mem];
        let mut values = vec![0.0; n_mem];
        let mut db = vec![0.0; d];
        for path in lo..hi {
            let mut stream = spec.noise.increments_for(path, Level::Fine)?;
            for (i, m) in spec.members.iter().enumerate() {
                alive[i] = path < m.n_paths;
                states[i * n..(i + 1) * n].copy_from_slice(&spec.x0);
            }
            acc.fill(0.0);
            let mut next_rec = 0;
            for step in 0..=last {
                if step > 0 {
                    stream.next_into(&mut db);
                    for i in 0..n_mem {
                        if !alive[i] {
                            continue;
                        }
                        let a = &mut acc[i * d..(i + 1) * d];
                        for k in 0..d {
                            a[k] += db[k];
                        }
                        if step % factors[i] == 0 {
                            let x = &mut states[i * n..(i + 1) * n];
                            steppers[i].step(x, a)?;
                            a.fill(0.0);
                            if x.iter().any(|v| !(v.abs() <= BLOWUP_THRESHOLD)) {
                                alive[i] = false;
                                new_blowups[i * n_rec + next_rec] += 1;
                            }
                        }
                    }
                }
                if next_rec < n_rec && step == record_fine[next_rec] {
                    let t = next_rec;
                    for i in 0..n_mem {
                        if alive[i] {
                            values[i] = (g.eval)(&states[i * n..(i + 1) * n]);
                            stats[i * n_rec + t].push(values[i]);
                        }
                    }
                    if alive[0] {
                        for i in 1..n_mem {
                            if alive[i] {
                                diffs[i * n_rec + t].push(values[i] - values[0]);
                            }
                        }
                    }
                    next_rec += 1;
                }
            }
            checksums.push(stream.checksum());
        }
        Ok(Block {
            stats,
            diffs,
            new_blowups,
            checksums,
        })
    };

    let blocks: Vec<Result<Block>> = (0..n_blocks).into_par_iter().map(run_block).collect();
    let mut stats = vec![Welford::default(); n_mem * n_rec];
    let mut diffs = vec![Welford::default(); n_mem * n_rec];
    let mut new_blowups = vec![0usize; n_mem * n_rec];
    let mut checksums = Vec::with_capacity(max_paths);
    for block in blocks {
        let block = block?;
        for (a, b) in stats.iter_mut().zip(&block.stats) {
            a.merge(b);
        }
        for (a, b) in diffs.iter_mut().zip(&block.diffs) {
            a.merge(b);
        }
        for (a, b) in new_blowups.iter_mut().zip(&block.new_blowups) {
            *a += b;
        }
        checksums.extend(block.checksums);
    }

    let times = spec.record_times.clone();
    let mut series = Vec::with_capacity(n_mem);
    let mut differences = Vec::with_capacity(n_mem);
    for (i, m) in spec.members.iter().enumerate() {
        let mut blowups = Vec::with_capacity(n_rec);
        let mut total = 0;
        for t in 0..n_rec {
            total += new_blowups[i * n_rec + t];
            blowups.push(total);
        }
        let n_effective: Vec<usize> = blowups.iter().map(|b| m.n_paths - b).collect();
        if let Some(t) = n_effective.iter().position(|&v| v == 0) {
            return Err(Error::AllPathsBlewUp {
                n_paths: m.n_paths,
                time: times[t],
            });
        }
        let row = &stats[i * n_rec..(i + 1) * n_rec];
        series.push(ObservableSeries {
            name: g.name.clone(),
            times: times.clone(),
            mean: row.iter().map(|w| w.mean).collect(),
            stderr: row.iter().map(|w| w.stderr()).collect(),
            n_effective,
            blowups,
        });
        differences.push((i > 0).then(|| {
            let row = &diffs[i * n_rec..(i + 1) * n_rec];
            DifferenceSeries {
                times: times.clone(),
                mean: row.iter().map(|w| w.mean).collect(),
                stderr: row.iter().map(|w| w.stderr()).collect(),
                n_pairs: row.iter().map(|w| w.n as usize).collect(),
            }
        }));
    }
    Ok(CoupledResult {
        series,
        differences,
        checksums,
    })
}
