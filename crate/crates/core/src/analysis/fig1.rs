//! Standard tamed Euler against truncated tamed Euler for several `alpha`
//! on the `fig1` problem, each compared with a fine tamed reference on the
//! same Brownian paths.

use serde::Serialize;

use crate::coupled::{simulate_coupled, CoupledMember, CoupledSpec};
use crate::engine::{record_grid, ObservableSeries};
use crate::error::{invalid, Result};
use crate::model::{make_fig1, ObservableFn};
use crate::noise::{ratio_of, NoisePlan};
use crate::schemes::{SchemeConfig, SchemeKind};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig1Spec {
    pub x0: f64,
    pub delta: f64,
    pub alphas: Vec<f64>,
    pub n_paths: usize,
    pub reference_delta: f64,
    pub reference_paths: usize,
    pub horizon: f64,
    pub record_every: f64,
    pub master_seed: u64,
}

impl Default for Fig1Spec {
    fn default() -> Self {
        Fig1Spec {
            x0: 1.0,
            delta: 0.05,
            alphas: vec![1.0, 1.3, 5.0],
            n_paths: 1000,
            reference_delta: 5e-4,
            reference_paths: 10_000,
            horizon: 5.0,
            record_every: 0.25,
            master_seed: 2024,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Fig1Curve {
    /// `tamed` or `tte_alpha_<alpha>`.
    pub label: String,
    pub scheme: SchemeConfig,
    pub series: ObservableSeries,
    /// `max_t |E X_t - E X_t(ref)|` over the record grid.
    pub sup_deviation: f64,
    /// Largest `|difference| / combined standard error` over the grid.
    pub max_z: f64,
    pub max_z_time: f64,
    /// How far the first step lands beyond the reference in the direction
    /// of motion; 0 when it stops short.
    pub first_step_overshoot: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Fig1Report {
    pub spec: Fig1Spec,
    pub times: Vec<f64>,
    pub reference: ObservableSeries,
    pub curves: Vec<Fig1Curve>,
}

impl Fig1Report {
    pub fn curve(&self, label: &str) -> Option<&Fig1Curve> {
        self.curves.iter().find(|c| c.label == label)
    }
}

pub fn tte_label(alpha: f64) -> String {
    format!("tte_alpha_{alpha}")
}

/// `{0, delta} U {0, every, 2 every, ..., horizon}`; the extra point is
/// the first step, where the overshoot is read off.
pub fn fig1_record_times(spec: &Fig1Spec) -> Result<Vec<f64>> {
    let mut t = record_grid(spec.horizon, spec.record_every)?;
    if ratio_of(spec.record_every, spec.delta).is_err() {
        return Err(invalid(format!(
            "record_every {} must be a multiple of delta {}",
            spec.record_every, spec.delta
        )));
    }
    if spec.delta < spec.record_every {
        t.insert(1, spec.delta);
    }
    Ok(t)
}

pub fn run_fig1(spec: &Fig1Spec) -> Result<Fig1Report> {
    if spec.alphas.is_empty() {
        return Err(invalid("fig1 needs at least one alpha"));
    }
    if spec.n_paths == 0 || spec.reference_paths == 0 {
        return Err(invalid("fig1 path counts must be >= 1"));
    }
    let problem = make_fig1();
    ratio_of(spec.delta, spec.reference_delta)?;
    let times = fig1_record_times(spec)?;
    let mut members = vec![CoupledMember {
        scheme: SchemeConfig::new(SchemeKind::TamedStandard, spec.reference_delta),
        n_paths: spec.reference_paths,
    }];
    let mut labels = vec!["tamed".to_string()];
    members.push(CoupledMember {
        scheme: SchemeConfig::new(SchemeKind::TamedStandard, spec.delta),
        n_paths: spec.n_paths,
    });
    for &a in &spec.alphas {
        labels.push(tte_label(a));
        members.push(CoupledMember {
            scheme: SchemeConfig::tte(spec.delta, a),
            n_paths: spec.n_paths,
        });
    }
    let noise = NoisePlan::new(
        spec.master_seed,
        spec.reference_paths.max(spec.n_paths),
        1,
        spec.reference_delta,
        1,
        spec.horizon,
    )?;
    let coupled = CoupledSpec {
        problem,
        members: members.clone(),
        x0: vec![spec.x0],
        record_times: times.clone(),
        noise,
    };
    let res = simulate_coupled(&coupled, &ObservableFn::coordinate(0))?;
    let reference = res.series[0].clone();
    let first = times.iter().position(|&t| t > 0.0).unwrap_or(0);

    let curves = labels
        .into_iter()
        .zip(members.into_iter().skip(1))
        .zip(res.series.into_iter().skip(1))
        .map(|((label, member), series)| {
            let mut sup = 0.0f64;
            let (mut max_z, mut max_z_time) = (0.0f64, 0.0);
            for i in 0..times.len() {
                let d = (series.mean[i] - reference.mean[i]).abs();
                sup = sup.max(d);
                let se = series.stderr[i].hypot(reference.stderr[i]);
                if se > 0.0 && d / se > max_z {
                    max_z = d / se;
                    max_z_time = times[i];
                }
            }
            let (r1, m1) = (reference.mean[first], series.mean[first]);
            let first_step_overshoot = if spec.x0 >= r1 {
                (r1 - m1).max(0.0)
            } else {
                (m1 - r1).max(0.0)
            };
            Fig1Curve {
                label,
                scheme: member.scheme,
                series,
                sup_deviation: sup,
                max_z,
                max_z_time,
                first_step_overshoot,
            }
        })
        .collect();
    Ok(Fig1Report {
        spec: spec.clone(),
        times,
        reference,
        curves,
    })
}
