//! Empirical weak order from a sweep over step sizes.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use super::fit::{log_log_fit, LinearFit};
use crate::coupled::{simulate_coupled, CoupledMember, CoupledSpec};
use crate::engine::record_grid;
use crate::error::{invalid, Error, Result};
use crate::model::{ObservableFn, SdeProblem};
use crate::noise::{ratio_of, NoisePlan};
use crate::schemes::SchemeConfig;

/// What the scheme is compared against.
#[derive(Clone)]
pub enum OrderReference {
    /// A fine scheme driven by the same Brownian paths.
    Scheme(SchemeConfig),
    /// Closed-form `E g(x_t)`.
    Exact(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for OrderReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderReference::Scheme(c) => f.debug_tuple("Scheme").field(c).finish(),
            OrderReference::Exact(_) => f.write_str("Exact(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OrderSpec {
    pub problem: SdeProblem,
    /// Scheme under test; its `delta` is replaced by each sweep value.
    pub scheme: SchemeConfig,
    pub deltas: Vec<f64>,
    pub x0: Vec<f64>,
    pub horizon: f64,
    /// Multiple of the largest delta.
    pub record_every: f64,
    pub observable: ObservableFn,
    pub n_paths: usize,
    pub reference: OrderReference,
    pub master_seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderRow {
    pub delta: f64,
    pub sup_err: f64,
    pub sup_err_stderr: f64,
    pub sup_err_time: f64,
    pub blowups: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderReport {
    pub rows: Vec<OrderRow>,
    /// Fitted exponent of `sup_err ~ C delta^beta`.
    pub beta: f64,
    pub beta_stderr: f64,
    pub fit: LinearFit,
}

fn check_deltas(deltas: &[f64]) -> Result<()> {
    if deltas.len() < 3 {
        return Err(Error::InsufficientDeltas(deltas.len()));
    }
    if deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(invalid("order.deltas must be positive"));
    }
    let r0 = deltas[1] / deltas[0];
    if (r0 - 1.0).abs() < 1e-12
        || deltas
            .windows(2)
            .any(|w| ((w[1] / w[0]) / r0 - 1.0).abs() > 1e-9)
    {
        return Err(invalid("order.deltas must form a geometric progression"));
    }
    Ok(())
}

/// Sup over record times `t > 0` of the weak error for every delta, then a
/// weighted log-log fit of sup error against delta.
pub fn convergence_order(spec: &OrderSpec) -> Result<OrderReport> {
    check_deltas(&spec.deltas)?;
    let dmin = spec.deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    let (fine, reference) = match &spec.reference {
        OrderReference::Scheme(cfg) => (cfg.delta, Some(cfg.clone())),
        OrderReference::Exact(_) => (dmin, None),
    };
    let mut members = Vec::new();
    if let Some(r) = &reference {
        members.push(CoupledMember {
            scheme: r.clone(),
            n_paths: spec.n_paths,
        });
    }
    for &d in &spec.deltas {
        ratio_of(d, fine)?;
        members.push(CoupledMember {
            scheme: spec.scheme.with_delta(d),
            n_paths: spec.n_paths,
        });
    }
    let noise = NoisePlan::new(
        spec.master_seed,
        spec.n_paths,
        spec.problem.dim_noise(),
        fine,
        1,
        spec.horizon,
    )?;
    let times = record_grid(spec.horizon, spec.record_every)?;
    let cs = CoupledSpec {
        problem: spec.problem.clone(),
        members,
        x0: spec.x0.clone(),
        record_times: times.clone(),
        noise,
    };
    let res = simulate_coupled(&cs, &spec.observable)?;
    let offset = usize::from(reference.is_some());

    let mut rows = Vec::with_capacity(spec.deltas.len());
    for (j, &delta) in spec.deltas.iter().enumerate() {
        let idx = offset + j;
        let series = &res.series[idx];
        let (errs, ses): (Vec<f64>, Vec<f64>) = match &spec.reference {
            OrderReference::Scheme(_) => {
                let d = res.differences[idx].as_ref().expect("paired member");
                d.mean.iter().map(|m| m.abs()).zip(d.stderr.iter().cloned()).unzip()
            }
            OrderReference::Exact(f) => times
                .iter()
                .zip(series.mean.iter().zip(&series.stderr))
                .map(|(&t, (m, s))| ((m - f(t)).abs(), *s))
                .unzip(),
        };
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &e) in errs.iter().enumerate() {
            if times[i] > 0.0 && e > best.1 {
                best = (i, e);
            }
        }
        rows.push(OrderRow {
            delta,
            sup_err: best.1,
            sup_err_stderr: ses[best.0],
            sup_err_time: times[best.0],
            blowups: *series.blowups.last().unwrap_or(&0),
        });
    }
    if rows.iter().any(|r| !(r.sup_err > 0.0)) {
        return Err(Error::Analysis(
            "a sup error is zero; the order is not identifiable".into(),
        ));
    }
    let x: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.sup_err).collect();
    let se: Vec<f64> = rows.iter().map(|r| r.sup_err_stderr).collect();
    let fit = log_log_fit(&x, &y, &se)?;
    Ok(OrderReport {
        rows,
        beta: fit.slope,
        beta_stderr: fit.slope_se,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_linear_ou;
    use crate::schemes::SchemeKind;

    fn spec(deltas: Vec<f64>) -> OrderSpec {
        OrderSpec {
            problem: make_linear_ou(1.0, 0.0).unwrap(),
            scheme: SchemeConfig::new(SchemeKind::ExplicitEm, 0.1),
            deltas,
            x0: vec![1.0],
            horizon: 4.0,
            record_every: 0.2,
            observable: ObservableFn::coordinate(0),
            n_paths: 4,
            reference: OrderReference::Exact(Arc::new(|t: f64| (-t).exp())),
            master_seed: 1,
        }
    }

    #[test]
    fn deterministic_euler_is_first_order() {
        let r = convergence_order(&spec(vec![0.2, 0.1, 0.05, 0.025])).unwrap();
        assert!((r.beta - 1.0).abs() < 0.1, "{}", r.beta);
    }

    #[test]
    fn needs_three_deltas() {
        let err = convergence_order(&spec(vec![0.2, 0.1])).unwrap_err();
        assert_eq!(err, Error::InsufficientDeltas(2));
        assert!(err.to_string().contains("need >= 3 deltas"));
        assert!(convergence_order(&spec(vec![0.2, 0.1, 0.04])).is_err());
    }
}
