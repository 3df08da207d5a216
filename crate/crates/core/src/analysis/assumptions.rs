//! Numeric evaluation of the structural inequalities on a point set.
//!
//! Pointwise conditions are evaluated on a Halton set in the ball plus the
//! origin; two-point conditions on seeded random pairs. Each condition
//! records its worst margin `rhs - lhs` (plus a rounding allowance of
//! `1e-12 (|lhs| + |rhs|)`) and passes iff that margin is non-negative.
//! Conditions whose constants are not registered are listed as skipped.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::linalg::{dist, dot, frobenius, norm, sym_eig_range};
use crate::model::{AssumptionConstants, DerivativeSources, SdeProblem};
use crate::sampling::{halton_ball, BallSampler};

const ROUNDING: f64 = 1e-12;
const PAIR_SEED: u64 = 0xa55e;

#[derive(Clone, Debug, Serialize)]
pub struct ConditionVerdict {
    pub id: String,
    pub radius: f64,
    pub samples: usize,
    pub worst_margin: f64,
    /// Point (or first point of the pair) attaining the worst margin.
    pub worst_at: Vec<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupVerdict {
    pub id: &'static str,
    pub conditions: Vec<&'static str>,
    /// `None` when a member condition was skipped.
    pub pass: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub problem: String,
    pub radius: f64,
    pub samples: usize,
    pub conditions: Vec<ConditionVerdict>,
    pub skipped: Vec<String>,
    pub groups: Vec<GroupVerdict>,
    pub derivatives: DerivativeSources,
}

impl AssumptionReport {
    pub fn condition(&self, id: &str) -> Option<&ConditionVerdict> {
        self.conditions.iter().find(|c| c.id == id)
    }

    pub fn group(&self, id: &str) -> Option<&GroupVerdict> {
        self.groups.iter().find(|g| g.id == id)
    }

    /// Every evaluated condition passed.
    pub fn all_evaluated_pass(&self) -> bool {
        self.conditions.iter().all(|c| c.pass)
    }
}

/// Condition groups, one per assumption block.
pub const GROUPS: [(&str, &[&str]); 6] = [
    ("ses_first_order", &["drift_dissipativity", "diffusion_gradient_bound"]),
    (
        "ses_second_order",
        &[
            "drift_dissipativity",
            "drift_hessian_bound",
            "diffusion_gradient_bound_strict",
            "diffusion_curvature_bound",
        ],
    ),
    (
        "global_lipschitz",
        &["drift_lipschitz", "diffusion_lipschitz", "diffusion_bounded", "lyapunov"],
    ),
    (
        "one_sided_lipschitz",
        &[
            "diffusion_lipschitz",
            "diffusion_bounded",
            "lyapunov",
            "one_sided_lipschitz",
            "polynomial_growth",
        ],
    ),
    (
        "modified_ses",
        &[
            "modified_dissipativity_two_sided",
            "modified_drift_hessian_bound",
            "modified_diffusion_gradient_bound",
            "modified_diffusion_curvature_bound",
        ],
    ),
    (
        "tamed",
        &["polynomial_growth", "tamed_lyapunov", "diffusion_lipschitz", "diffusion_bounded"],
    ),
];

/// Derivative data at one point.
struct Local {
    x: Vec<f64>,
    u: Vec<f64>,
    jac: Vec<f64>,
    hess: Vec<f64>,
    v: Vec<f64>,
    dv: Vec<f64>,
    dvh: Vec<f64>,
    lambda: Option<f64>,
}

struct Tracker {
    id: String,
    worst: f64,
    at: Vec<f64>,
    count: usize,
}

impl Tracker {
    fn new(id: &str) -> Self {
        Tracker {
            id: id.to_string(),
            worst: f64::INFINITY,
            at: Vec::new(),
            count: 0,
        }
    }

    fn push(&mut self, lhs: f64, rhs: f64, at: &[f64]) {
        let mut m = rhs - lhs + ROUNDING * (lhs.abs() + rhs.abs());
        if m.is_nan() {
            m = f64::NEG_INFINITY;
        }
        self.count += 1;
        if m < self.worst {
            self.worst = m;
            self.at = at.to_vec();
        }
    }

    fn finish(self, radius: f64) -> ConditionVerdict {
        ConditionVerdict {
            pass: self.worst >= 0.0,
            id: self.id,
            radius,
            samples: self.count,
            worst_margin: self.worst,
            worst_at: self.at,
        }
    }
}

type PointCheck<'a> = Box<dyn Fn(&Local) -> (f64, f64) + 'a>;
type PairCheck<'a> = Box<dyn Fn(&Local, &Local) -> (f64, f64) + 'a>;

pub fn check_assumptions(
    problem: &SdeProblem,
    constants: &AssumptionConstants,
    radius: f64,
    samples: usize,
) -> Result<AssumptionReport> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(invalid("check.radius must be positive"));
    }
    if samples < 100 {
        return Err(invalid(format!("check.samples must be >= 100, got {samples}")));
    }
    constants.validate()?;
    let n = problem.dim_state();
    let d = problem.dim_noise();
    let nf = n as f64;
    let c = constants;

    let local = |x: Vec<f64>| -> Local {
        Local {
            u: problem.drift_vec(&x),
            jac: problem.drift_jacobian_vec(&x),
            hess: problem.drift_hessian_vec(&x),
            v: problem.diffusion_vec(&x),
            dv: problem.diffusion_jacobians_vec(&x),
            dvh: problem.diffusion_hessians_vec(&x),
            lambda: c.lambda(&x),
            x,
        }
    };

    // |d_i V_k|^2 summed over k, for each direction i.
    let grad_v_sq = move |p: &Local, i: usize| -> f64 {
        (0..d)
            .map(|k| (0..n).map(|m| p.dv[(k * n + m) * n + i].powi(2)).sum::<f64>())
            .sum()
    };
    // |d_i d_j U0|
    let hess_u = move |p: &Local, i: usize, j: usize| -> f64 {
        (0..n).map(|m| p.hess[(m * n + i) * n + j].powi(2)).sum::<f64>().sqrt()
    };
    let hess_u_sum = move |p: &Local| -> f64 {
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| hess_u(p, i, j)).sum()
    };
    let v_norm = move |p: &Local, k: usize| norm(&p.v[k * n..(k + 1) * n]);
    let dv_frob = move |p: &Local, k: usize| frobenius(&p.dv[k * n * n..(k + 1) * n * n]);
    let dvh_frob = move |p: &Local, k: usize| frobenius(&p.dvh[k * n * n * n..(k + 1) * n * n * n]);
    let max_eig = move |p: &Local| sym_eig_range(&p.jac, n);

    let mut point_checks: Vec<(&str, PointCheck)> = Vec::new();
    let mut pair_checks: Vec<(&str, PairCheck)> = Vec::new();
    let mut skipped: Vec<String> = Vec::new();
    let mut skip = |id: &str| skipped.push(id.to_string());

    let has_lambda = c.lambda_fn.is_some();
    let lam = |p: &Local| p.lambda.expect("lambda registered");

    if has_lambda {
        point_checks.push(("drift_dissipativity", Box::new(move |p| (max_eig(p).1, -lam(p)))));
    } else {
        skip("drift_dissipativity");
    }
    match (has_lambda, c.gamma) {
        (true, Some(g)) => {
            point_checks.push((
                "diffusion_gradient_bound",
                Box::new(move |p| {
                    let l = (0..n).map(|i| grad_v_sq(p, i)).fold(0.0, f64::max);
                    (l, (lam(p) - g) / nf)
                }),
            ));
        }
        _ => skip("diffusion_gradient_bound"),
    }
    match (has_lambda, c.alpha_ses) {
        (true, Some(a)) => {
            point_checks.push(("drift_hessian_bound", Box::new(move |p| (hess_u_sum(p), a * (1.0 + lam(p))))));
        }
        _ => skip("drift_hessian_bound"),
    }
    match (has_lambda, c.gamma_strict.or(c.gamma), c.rho) {
        (true, Some(g), Some(rho)) => {
            point_checks.push((
                "diffusion_gradient_bound_strict",
                Box::new(move |p| {
                    let l = (0..n).map(|i| grad_v_sq(p, i)).fold(0.0, f64::max);
                    (l, (rho * lam(p) - g) / nf)
                }),
            ));
            point_checks.push((
                "diffusion_curvature_bound",
                Box::new(move |p| {
                    let mut worst: f64 = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            let s: f64 = (0..d)
                                .map(|k| {
                                    let h = (0..n)
                                        .map(|m| p.dvh[((k * n + m) * n + i) * n + j].powi(2))
                                        .sum::<f64>()
                                        .sqrt();
                                    v_norm(p, k) * h
                                })
                                .sum();
                            worst = worst.max(s);
                        }
                    }
                    (worst, rho * lam(p) - g)
                }),
            ));
        }
        _ => {
            skip("diffusion_gradient_bound_strict");
            skip("diffusion_curvature_bound");
        }
    }
    match c.k {
        Some(k) => point_checks.push((
            "diffusion_bounded",
            Box::new(move |p| ((0..d).map(|j| v_norm(p, j).powi(2)).sum(), k)),
        )),
        None => skip("diffusion_bounded"),
    }
    match (c.b0, c.b1) {
        (Some(b0), Some(b1)) => point_checks.push((
            "lyapunov",
            Box::new(move |p| (dot(&p.u, &p.x), -b0 * dot(&p.x, &p.x) + b1)),
        )),
        _ => skip("lyapunov"),
    }
    match (c.tamed_b0.or(c.b0), c.tamed_b1.or(c.b1), c.q) {
        (Some(b0), Some(b1), Some(q)) => point_checks.push((
            "tamed_lyapunov",
            Box::new(move |p| (dot(&p.u, &p.x), -b0 * norm(&p.x).powf(q + 2.0) + b1)),
        )),
        _ => skip("tamed_lyapunov"),
    }
    match (c.tamed_c0, c.tamed_c1, c.q) {
        (Some(c0), Some(c1), Some(q)) => point_checks.push((
            "tamed_growth",
            Box::new(move |p| {
                let r = norm(&p.x);
                (dot(&p.u, &p.u), c0 * r.powf(2.0 * q + 2.0) + c1 * (1.0 + r.powf(2.0 * q)))
            }),
        )),
        _ => skip("tamed_growth"),
    }
    match (has_lambda, c.beta_ses) {
        (true, Some(beta)) => point_checks.push((
            "modified_dissipativity_two_sided",
            Box::new(move |p| {
                // Both sides folded into one margin: min of the two.
                let (lo, hi) = max_eig(p);
                let l = lam(p);
                let upper = -l - hi;
                let lower = lo + beta * l;
                if upper <= lower {
                    (hi, -l)
                } else {
                    (-beta * l, lo)
                }
            }),
        )),
        _ => skip("modified_dissipativity_two_sided"),
    }
    match (has_lambda, c.alpha_ses) {
        (true, Some(a)) => point_checks.push(("modified_drift_hessian_bound", Box::new(move |p| (hess_u_sum(p), a * lam(p))))),
        _ => skip("modified_drift_hessian_bound"),
    }
    match (has_lambda, c.rho, c.beta_ses) {
        (true, Some(rho), Some(beta)) => point_checks.push((
            "modified_diffusion_gradient_bound",
            Box::new(move |p| {
                let l: f64 = (0..d).map(|k| dv_frob(p, k).powi(2)).sum();
                (l, rho * lam(p) / (nf * beta * beta))
            }),
        )),
        _ => skip("modified_diffusion_gradient_bound"),
    }
    match (has_lambda, c.rho, c.beta_ses, c.alpha_ses, c.k_hat) {
        (true, Some(rho), Some(beta), Some(a), Some(kh)) if kh > 0.0 => {
            point_checks.push((
                "modified_diffusion_curvature_bound",
                Box::new(move |p| {
                    let l: f64 = (0..d).map(|k| dvh_frob(p, k) + a * dv_frob(p, k)).sum();
                    (l, rho * lam(p) / (kh * beta * beta))
                }),
            ));
            point_checks.push((
                "diffusion_sup_bound",
                Box::new(move |p| ((0..d).map(|k| v_norm(p, k)).fold(0.0, f64::max), kh)),
            ));
        }
        _ => {
            skip("modified_diffusion_curvature_bound");
            skip("diffusion_sup_bound");
        }
    }
    for extra in &c.extra {
        let f = extra.lhs_rhs.clone();
        point_checks.push((extra.id.as_str(), Box::new(move |p| f(&p.x))));
    }

    match c.drift_lipschitz {
        Some(l) => pair_checks.push(("drift_lipschitz", Box::new(move |a, b| (dist(&a.u, &b.u), l * dist(&a.x, &b.x))))),
        None => skip("drift_lipschitz"),
    }
    match c.c1 {
        Some(c1) => pair_checks.push((
            "diffusion_lipschitz",
            Box::new(move |a, b| {
                let l: f64 = (0..d)
                    .map(|k| dist(&a.v[k * n..(k + 1) * n], &b.v[k * n..(k + 1) * n]))
                    .sum();
                (l, c1 * dist(&a.x, &b.x))
            }),
        )),
        None => skip("diffusion_lipschitz"),
    }
    match c.c0 {
        Some(c0) => pair_checks.push((
            "one_sided_lipschitz",
            Box::new(move |a, b| {
                let du: Vec<f64> = a.u.iter().zip(&b.u).map(|(p, q)| p - q).collect();
                let dx: Vec<f64> = a.x.iter().zip(&b.x).map(|(p, q)| p - q).collect();
                (dot(&du, &dx), c0 * dot(&dx, &dx))
            }),
        )),
        None => skip("one_sided_lipschitz"),
    }
    match (c.c2, c.q) {
        (Some(c2), Some(q)) => pair_checks.push((
            "polynomial_growth",
            Box::new(move |a, b| {
                let w = 1.0 + norm(&a.x).powf(2.0 * q) + norm(&b.x).powf(2.0 * q);
                (dist(&a.u, &b.u).powi(2), c2 * w * dist(&a.x, &b.x).powi(2))
            }),
        )),
        _ => skip("polynomial_growth"),
    }

    let mut points = vec![vec![0.0; n]];
    points.extend(halton_ball(n, samples, radius));
    let locals: Vec<Local> = points.into_iter().map(local).collect();
    let mut trackers: Vec<Tracker> = point_checks.iter().map(|(id, _)| Tracker::new(id)).collect();
    for p in &locals {
        for ((_, f), t) in point_checks.iter().zip(trackers.iter_mut()) {
            let (l, r) = f(p);
            t.push(l, r, &p.x);
        }
    }
    let mut conditions: Vec<ConditionVerdict> = trackers.into_iter().map(|t| t.finish(radius)).collect();

    if !pair_checks.is_empty() {
        let mut sampler = BallSampler::new(PAIR_SEED, n, radius);
        let mut trackers: Vec<Tracker> = pair_checks.iter().map(|(id, _)| Tracker::new(id)).collect();
        for _ in 0..samples {
            let a = local(sampler.sample());
            let b = local(sampler.sample());
            for ((_, f), t) in pair_checks.iter().zip(trackers.iter_mut()) {
                let (l, r) = f(&a, &b);
                t.push(l, r, &a.x);
            }
        }
        conditions.extend(trackers.into_iter().map(|t| t.finish(radius)));
    }

    let groups = GROUPS
        .iter()
        .map(|(id, members)| {
            let mut pass = Some(true);
            for m in members.iter() {
                match conditions.iter().find(|c| c.id == *m) {
                    Some(c) => pass = pass.map(|p| p && c.pass),
                    None => pass = None,
                }
                if pass.is_none() {
                    break;
                }
            }
            GroupVerdict {
                id,
                conditions: members.to_vec(),
                pass,
            }
        })
        .collect();

    Ok(AssumptionReport {
        problem: problem.name().to_string(),
        radius,
        samples,
        conditions,
        skipped,
        groups,
        derivatives: problem.sources(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_cubic_1d, make_linear_ou};

    fn report(p: &SdeProblem) -> AssumptionReport {
        check_assumptions(p, p.constants(), 10.0, 400).unwrap()
    }

    #[test]
    fn margins_agree_with_verdicts() {
        let p = make_cubic_1d(1.0, 2.0).unwrap();
        let r = report(&p);
        for c in &r.conditions {
            assert_eq!(c.pass, c.worst_margin >= 0.0, "{}", c.id);
        }
        let strict = r.condition("diffusion_gradient_bound_strict").unwrap();
        assert!(!strict.pass);
        assert_eq!(strict.worst_at, vec![0.0]);
    }

    #[test]
    fn constant_diffusion_has_zero_left_sides() {
        let p = make_linear_ou(1.0, 0.5).unwrap();
        let r = report(&p);
        for id in ["diffusion_gradient_bound", "diffusion_gradient_bound_strict", "diffusion_curvature_bound"] {
            let c = r.condition(id).unwrap();
            assert!(c.pass, "{id}");
        }
        assert_eq!(r.group("ses_second_order").unwrap().pass, Some(true));
    }

    #[test]
    fn missing_constants_are_skipped() {
        let p = make_linear_ou(1.0, 0.5).unwrap();
        let r = check_assumptions(&p, &AssumptionConstants::default(), 5.0, 100).unwrap();
        assert!(r.conditions.is_empty());
        assert!(r.skipped.contains(&"lyapunov".to_string()));
        assert!(r.groups.iter().all(|g| g.pass.is_none()));
        assert!(check_assumptions(&p, p.constants(), 5.0, 10).is_err());
    }
}
