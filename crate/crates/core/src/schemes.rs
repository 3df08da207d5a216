//! One-step maps. None of them draws randomness: the Brownian increments
//! for the step arrive from the caller, so two schemes fed the same
//! increments can be compared path by path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::implicit::{ImplicitSolveConfig, ImplicitSolver};
use crate::linalg;
use crate::model::{AssumptionConstants, SdeProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(rename = "em")]
    ExplicitEm,
    #[serde(rename = "splitstep")]
    SplitStep,
    #[serde(rename = "implicit")]
    ImplicitEuler,
    #[serde(rename = "tamed")]
    TamedStandard,
    #[serde(rename = "tte")]
    TamedTruncated,
    #[serde(rename = "em-modified")]
    ExplicitEmOnModified,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 6] = [
        SchemeKind::ExplicitEm,
        SchemeKind::SplitStep,
        SchemeKind::ImplicitEuler,
        SchemeKind::TamedStandard,
        SchemeKind::TamedTruncated,
        SchemeKind::ExplicitEmOnModified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::ExplicitEm => "em",
            SchemeKind::SplitStep => "splitstep",
            SchemeKind::ImplicitEuler => "implicit",
            SchemeKind::TamedStandard => "tamed",
            SchemeKind::TamedTruncated => "tte",
            SchemeKind::ExplicitEmOnModified => "em-modified",
        }
    }

    pub fn needs_implicit_solve(self) -> bool {
        matches!(
            self,
            SchemeKind::SplitStep | SchemeKind::ImplicitEuler | SchemeKind::ExplicitEmOnModified
        )
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                invalid(format!(
                    "unknown scheme `{s}` (expected em, splitstep, implicit, tamed, tte or em-modified)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    pub delta: f64,
    /// TTE constant; [`select_alpha`] is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// TTE exponent; defaults to the registered growth exponent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default)]
    pub implicit: ImplicitSolveConfig,
}

impl SchemeConfig {
    pub fn new(kind: SchemeKind, delta: f64) -> Self {
        SchemeConfig {
            kind,
            delta,
            alpha: None,
            q: None,
            implicit: ImplicitSolveConfig::default(),
        }
    }

    pub fn tte(delta: f64, alpha: f64) -> Self {
        SchemeConfig {
            alpha: Some(alpha),
            ..Self::new(SchemeKind::TamedTruncated, delta)
        }
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        SchemeConfig {
            delta,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(invalid(format!("scheme.delta must be positive, got {}", self.delta)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(invalid(format!("scheme.alpha must be positive, got {a}")));
            }
        }
        if let Some(q) = self.q {
            if !(q >= 0.0 && q.is_finite()) {
                return Err(invalid(format!("scheme.q must be nonnegative, got {q}")));
            }
        }
        self.implicit.validate()
    }

    /// `(alpha, q)` actually used by the TTE step for this problem.
    pub fn resolve_tte(&self, problem: &SdeProblem) -> Result<(f64, f64)> {
        let registered_q = problem.constants().q;
        let q = match (self.q, registered_q) {
            (Some(q), Some(r)) => {
                if q != r {
                    log::warn!(
                        "TTE exponent q = {q} differs from the registered growth exponent {r} of `{}`",
                        problem.name()
                    );
                }
                q
            }
            (Some(q), None) => q,
            (None, Some(r)) => r,
            (None, None) => {
                return Err(invalid(format!(
                    "scheme.q is required: problem `{}` has no registered growth exponent",
                    problem.name()
                )))
            }
        };
        let alpha = match self.alpha {
            Some(a) => a,
            None => select_alpha(problem.constants())?.alpha,
        };
        Ok((alpha, q))
    }
}

/// One step's input: the current state and the Brownian increments.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub state: Vec<f64>,
    pub db: Vec<f64>,
}

impl StepInput {
    pub fn new(state: impl Into<Vec<f64>>, db: impl Into<Vec<f64>>) -> Self {
        StepInput {
            state: state.into(),
            db: db.into(),
        }
    }
}

/// Allocation-free stepping for one scheme on one problem.
pub struct Stepper<'a> {
    problem: &'a SdeProblem,
    kind: SchemeKind,
    delta: f64,
    alpha: f64,
    q: f64,
    solver: Option<ImplicitSolver>,
    u: Vec<f64>,
    v: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(problem: &'a SdeProblem, cfg: &SchemeConfig) -> Result<Self> {
        cfg.validate()?;
        let n = problem.dim_state();
        let (alpha, q) = if cfg.kind == SchemeKind::TamedTruncated {
            cfg.resolve_tte(problem)?
        } else {
            (0.0, 0.0)
        };
        let solver = if cfg.kind.needs_implicit_solve() {
            Some(ImplicitSolver::new(problem, cfg.delta, cfg.implicit)?)
        } else {
            None
        };
        Ok(Stepper {
            problem,
            kind: cfg.kind,
            delta: cfg.delta,
            alpha,
            q,
            solver,
            u: vec![0.0; n],
            v: vec![0.0; n * problem.dim_noise()],
            z: vec![0.0; n],
        })
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn q(&self) -> f64 {
        self.q
    }

    /// `x += s * sum_k V_k(at) dB_k`.
    #[inline]
    fn add_noise(&mut self, at: &[f64], x: &mut [f64], db: &[f64]) {
        let n = x.len();
        let s = self.problem.noise_scale();
        if s == 0.0 {
            return;
        }
        self.problem.diffusion(at, &mut self.v);
        for (k, dbk) in db.iter().enumerate() {
            let vk = &self.v[k * n..(k + 1) * n];
            for i in 0..n {
                x[i] += s * vk[i] * dbk;
            }
        }
    }

    /// Advances `x` in place by one step with increments `db`.
    pub fn step(&mut self, x: &mut [f64], db: &[f64]) -> Result<()> {
        debug_assert_eq!(x.len(), self.problem.dim_state());
        debug_assert_eq!(db.len(), self.problem.dim_noise());
        let n = x.len();
        let delta = self.delta;
        match self.kind {
            SchemeKind::ExplicitEm | SchemeKind::TamedStandard | SchemeKind::TamedTruncated => {
                self.problem.drift(x, &mut self.u);
                let factor = match self.kind {
                    SchemeKind::ExplicitEm => delta,
                    SchemeKind::TamedStandard => delta / (1.0 + delta * linalg::norm(&self.u)),
                    _ => {
                        let r = if self.q == 2.0 {
                            linalg::dot(x, x)
                        } else {
                            linalg::norm(x).powf(self.q)
                        };
                        delta / (1.0 + delta * self.alpha * r)
                    }
                };
                self.z.copy_from_slice(x);
                let z = std::mem::take(&mut self.z);
                self.add_noise(&z, x, db);
                self.z = z;
                for i in 0..n {
                    x[i] += factor * self.u[i];
                }
            }
            SchemeKind::SplitStep => {
                let solver = self.solver.as_mut().expect("solver present");
                solver.solve(self.problem, x, &mut self.z)?;
                x.copy_from_slice(&self.z);
                let z = std::mem::take(&mut self.z);
                self.add_noise(&z, x, db);
                self.z = z;
            }
            SchemeKind::ExplicitEmOnModified => {
                let solver = self.solver.as_mut().expect("solver present");
                solver.solve(self.problem, x, &mut self.z)?;
                self.problem.drift(&self.z, &mut self.u);
                let z = std::mem::take(&mut self.z);
                self.add_noise(&z, x, db);
                self.z = z;
                for i in 0..n {
                    x[i] += delta * self.u[i];
                }
            }
            SchemeKind::ImplicitEuler => {
                self.z.copy_from_slice(x);
                let z = std::mem::take(&mut self.z);
                self.add_noise(&z, x, db);
                self.z = z;
                // x now holds the shifted point; solve from a copy of it
                self.z.copy_from_slice(x);
                let solver = self.solver.as_mut().expect("solver present");
                solver.solve(self.problem, &self.z, x)?;
            }
        }
        Ok(())
    }
}

fn step_with(problem: &SdeProblem, cfg: &SchemeConfig, kind: SchemeKind, input: &StepInput) -> Result<Vec<f64>> {
    if input.state.len() != problem.dim_state() || input.db.len() != problem.dim_noise() {
        return Err(invalid(format!(
            "step input has state length {} and {} increments; problem expects {} and {}",
            input.state.len(),
            input.db.len(),
            problem.dim_state(),
            problem.dim_noise()
        )));
    }
    let cfg = SchemeConfig {
        kind,
        ..cfg.clone()
    };
    let mut stepper = Stepper::new(problem, &cfg)?;
    let mut x = input.state.clone();
    stepper.step(&mut x, &input.db)?;
    Ok(x)
}

/// `x + delta U0(x) + s sum_k V_k(x) dB_k`.
pub fn step_explicit_em(problem: &SdeProblem, cfg: &SchemeConfig, input: &StepInput) -> Result<Vec<f64>> {
    step_with(problem, cfg, SchemeKind::ExplicitEm, input)
}

/// `z = F(x)`, then `z + s sum_k V_k(z) dB_k`.
pub fn step_split_step(problem: &SdeProblem, cfg: &SchemeConfig, input: &StepInput) -> Result<Vec<f64>> {
    step_with(problem, cfg, SchemeKind::SplitStep, input)
}

/// `F(x + s sum_k V_k(x) dB_k)`.
pub fn step_implicit_euler(problem: &SdeProblem, cfg: &SchemeConfig, input: &StepInput) -> Result<Vec<f64>> {
    step_with(problem, cfg, SchemeKind::ImplicitEuler, input)
}

/// `x + delta U0(x) / (1 + delta |U0(x)|) + noise`.
pub fn step_tamed_standard(problem: &SdeProblem, cfg: &SchemeConfig, input: &StepInput) -> Result<Vec<f64>> {
    step_with(problem, cfg, SchemeKind::TamedStandard, input)
}

/// `x + delta U0(x) / (1 + delta alpha |x|^q) + noise`.
pub fn step_tamed_truncated(problem: &SdeProblem, cfg: &SchemeConfig, input: &StepInput) -> Result<Vec<f64>> {
    step_with(problem, cfg, SchemeKind::TamedTruncated, input)
}

/// Explicit Euler on the modified fields: `x + delta U0(F(x)) + s sum_k V_k(F(x)) dB_k`.
pub fn step_explicit_em_on_modified(
    problem: &SdeProblem,
    cfg: &SchemeConfig,
    input: &StepInput,
) -> Result<Vec<f64>> {
    step_with(problem, cfg, SchemeKind::ExplicitEmOnModified, input)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaBranch {
    /// `b0^2 >= c0`: both lower bounds apply.
    BothBounds,
    /// `b0^2 < c0`: only `c0 / (2 b0)` applies.
    RatioOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlphaSelection {
    pub alpha: f64,
    pub branch: AlphaBranch,
    pub b0: f64,
    pub c0: f64,
}

impl AlphaSelection {
    /// Per-step second-moment contraction factor
    /// `1 - (2 b0 alpha - c0) delta^2 / (1 + delta alpha)^2`.
    pub fn epsilon(&self, delta: f64) -> f64 {
        contraction_factor(self.b0, self.c0, self.alpha, delta)
    }
}

pub fn contraction_factor(b0: f64, c0: f64, alpha: f64, delta: f64) -> f64 {
    1.0 - (2.0 * b0 * alpha - c0) * delta * delta / (1.0 + delta * alpha).powi(2)
}

/// Margin applied on top of the sufficient lower bound for alpha.
pub const ALPHA_MARGIN: f64 = 1.05;

/// Picks the TTE constant from the tamed Lyapunov constant `b0` and the
/// leading growth constant `c0`, with a 5% margin over the sufficient bound.
pub fn select_alpha(constants: &AssumptionConstants) -> Result<AlphaSelection> {
    let b0 = constants
        .tamed_b0
        .or(constants.b0)
        .ok_or_else(|| invalid("select_alpha needs a registered b0"))?;
    let c0 = constants
        .tamed_c0
        .ok_or_else(|| invalid("select_alpha needs a registered growth constant c0"))?;
    if !(b0 > 0.0) {
        return Err(invalid(format!("select_alpha needs b0 > 0, got {b0}")));
    }
    let ratio = c0 / (2.0 * b0);
    let (bound, branch) = if b0 * b0 >= c0 {
        (ratio.max(b0 + (b0 * b0 - c0).sqrt()), AlphaBranch::BothBounds)
    } else {
        (ratio, AlphaBranch::RatioOnly)
    };
    Ok(AlphaSelection {
        alpha: ALPHA_MARGIN * bound,
        branch,
        b0,
        c0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_cubic_1d, make_fig1, make_linear_ou, SdeProblem};
    use std::sync::Arc;

    fn input(x: f64, db: f64) -> StepInput {
        StepInput::new(vec![x], vec![db])
    }

    #[test]
    fn em_linear_and_pure_noise() {
        let p = make_linear_ou(1.0, 0.0).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::ExplicitEm, 0.1);
        assert!((step_explicit_em(&p, &cfg, &input(1.0, 0.0)).unwrap()[0] - 0.9).abs() < 1e-15);

        let free = SdeProblem::builder(
            "free",
            1,
            1,
            Arc::new(|_x, o| o[0] = 0.0),
            Arc::new(|_x, o| o[0] = 1.0),
        )
        .noise_scale(1.0)
        .build()
        .unwrap();
        let out = step_explicit_em(&free, &cfg, &input(0.3, 0.123)).unwrap()[0];
        assert_eq!(out - 0.3, 0.123 + 0.3 - 0.3);
    }

    #[test]
    fn em_fig1_large_data() {
        let p = make_fig1();
        let cfg = SchemeConfig::new(SchemeKind::ExplicitEm, 0.05);
        assert_eq!(step_explicit_em(&p, &cfg, &input(100.0, 0.0)).unwrap()[0], -49905.0);
    }

    #[test]
    fn tamed_fig1_large_data() {
        let p = make_fig1();
        let cfg = SchemeConfig::new(SchemeKind::TamedStandard, 0.05);
        let x = step_tamed_standard(&p, &cfg, &input(100.0, 0.0)).unwrap()[0];
        let inc = 0.05 * -1000100.0 / (1.0 + 0.05 * 1000100.0);
        assert!((x - 100.0 - inc).abs() < 1e-12);
        assert!((x - 99.0000).abs() < 1e-4);
        assert_eq!(step_tamed_standard(&p, &cfg, &input(0.0, 0.0)).unwrap()[0], 0.0);
    }

    #[test]
    fn tte_fig1_large_data() {
        let p = make_fig1();
        let cfg = SchemeConfig::tte(0.05, 1.3);
        let x = step_tamed_truncated(&p, &cfg, &input(100.0, 0.0)).unwrap()[0];
        assert!((x - (100.0 - 50005.0 / 651.0)).abs() < 1e-10);
        assert!((x - 23.187).abs() < 1e-3);
        assert_eq!(step_tamed_truncated(&p, &cfg, &input(0.0, 0.0)).unwrap()[0], 0.0);
        let huge = step_tamed_truncated(&p, &SchemeConfig::tte(0.05, 1e300), &input(2.0, 0.0)).unwrap();
        assert!((huge[0] - 2.0).abs() < 1e-250);
    }

    #[test]
    fn implicit_schemes_linear() {
        let p = make_linear_ou(1.0, 0.0).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::SplitStep, 0.1);
        let s = step_split_step(&p, &cfg, &input(1.0, 0.0)).unwrap()[0];
        let i = step_implicit_euler(&p, &cfg, &input(1.0, 0.0)).unwrap()[0];
        assert!((s - 1.0 / 1.1).abs() < 1e-14);
        assert!((i - 1.0 / 1.1).abs() < 1e-14);
        let c = make_cubic_1d(1.0, 0.0).unwrap();
        assert_eq!(step_implicit_euler(&c, &cfg, &input(0.0, 0.0)).unwrap()[0], 0.0);
        assert!((step_split_step(&c, &cfg, &input(1.0, 0.0)).unwrap()[0] - 0.852_723_073_569_864_7).abs() < 1e-12);
    }

    #[test]
    fn split_step_equals_modified_em() {
        let p = make_cubic_1d(1.0, 0.3).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::SplitStep, 0.05);
        for (x, db) in [(0.3, 0.1), (-4.0, -0.2), (12.0, 0.05)] {
            let a = step_split_step(&p, &cfg, &input(x, db)).unwrap()[0];
            let b = step_explicit_em_on_modified(&p, &cfg, &input(x, db)).unwrap()[0];
            assert!((a - b).abs() < 1e-11, "{x}: {a} vs {b}");
        }
    }

    #[test]
    fn alpha_for_fig1() {
        let sel = select_alpha(make_fig1().constants()).unwrap();
        assert_eq!(sel.branch, AlphaBranch::RatioOnly);
        assert!((sel.alpha - 1.05).abs() < 1e-15);
        let eps = contraction_factor(1.0, 2.0, 1.3, 0.05);
        assert!((eps - (1.0 - 0.6 * 0.0025 / (1.065f64 * 1.065))).abs() < 1e-15);
        assert!((eps - 0.998678).abs() < 1e-6);
    }

    #[test]
    fn alpha_rejects_nonpositive_b0() {
        let c = AssumptionConstants {
            tamed_b0: Some(0.0),
            tamed_c0: Some(1.0),
            ..Default::default()
        };
        assert!(select_alpha(&c).is_err());
        let c = AssumptionConstants {
            tamed_b0: Some(2.0),
            tamed_c0: Some(1.0),
            ..Default::default()
        };
        let sel = select_alpha(&c).unwrap();
        assert_eq!(sel.branch, AlphaBranch::BothBounds);
        assert!((sel.alpha - 1.05 * (2.0 + 3f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn negative_delta_rejected() {
        let p = make_fig1();
        let cfg = SchemeConfig::new(SchemeKind::ExplicitEm, -0.1);
        let err = step_explicit_em(&p, &cfg, &input(1.0, 0.0)).unwrap_err();
        assert!(err.to_string().contains("scheme.delta"));
    }

    #[test]
    fn scheme_names_roundtrip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.as_str().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("rk4".parse::<SchemeKind>().is_err());
    }
}
