//! SDE problems `dx = U0(x) dt + s * sum_k V_k(x) dB^k` with their derivative
//! callbacks, assumption constants, test observables and the shipped example
//! problems.
//!
//! Flat buffer layouts (row-major everywhere, `N` = state dim, `d` = noise dim):
//!
//! | callback              | length      | entry                              |
//! |-----------------------|-------------|------------------------------------|
//! | `drift`               | `N`         | `U0^i`                             |
//! | `drift_jacobian`      | `N*N`       | `[i*N + j] = d_j U0^i`             |
//! | `drift_hessian`       | `N*N*N`     | `[(i*N + j)*N + l] = d_j d_l U0^i` |
//! | `diffusion`           | `d*N`       | `[k*N + i] = V_k^i`                |
//! | `diffusion_jacobians` | `d*N*N`     | `[(k*N + i)*N + j] = d_j V_k^i`    |
//! | `diffusion_hessians`  | `d*N*N*N`   | `[((k*N + i)*N + j)*N + l]`        |

use std::f64::consts::{FRAC_PI_2, SQRT_2};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg;
use crate::sampling::halton_ball;

/// Vector-valued callback writing into a caller-provided buffer.
pub type VecField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Scalar callback.
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Returns `(lhs, rhs)` of an inequality `lhs <= rhs`.
pub type InequalityFn = Arc<dyn Fn(&[f64]) -> (f64, f64) + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeSource {
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DerivativeSources {
    pub drift_jacobian: DerivativeSource,
    pub drift_hessian: DerivativeSource,
    pub diffusion_jacobians: DerivativeSource,
    pub diffusion_hessians: DerivativeSource,
}

impl DerivativeSources {
    pub fn all_analytic(&self) -> bool {
        [
            self.drift_jacobian,
            self.drift_hessian,
            self.diffusion_jacobians,
            self.diffusion_hessians,
        ]
        .iter()
        .all(|s| *s == DerivativeSource::Analytic)
    }
}

/// Problem-specific inequality `lhs(x) <= rhs(x)` checked alongside the
/// generic conditions.
#[derive(Clone)]
pub struct ExtraCondition {
    pub id: String,
    pub lhs_rhs: InequalityFn,
}

/// Constants of the structural assumptions. `None` means "not registered";
/// the checker skips conditions whose constants are missing.
#[derive(Clone, Default)]
pub struct AssumptionConstants {
    /// Lyapunov condition `<U0(x), x> <= -b0 |x|^2 + b1`.
    pub b0: Option<f64>,
    pub b1: Option<f64>,
    /// Tamed Lyapunov condition `<U0(x), x> <= -b0 |x|^(q+2) + b1`.
    pub tamed_b0: Option<f64>,
    pub tamed_b1: Option<f64>,
    /// Growth split `|U0(x)|^2 <= c0 |x|^(2q+2) + c1 (1 + |x|^(2q))` used to
    /// pick the TTE constant.
    pub tamed_c0: Option<f64>,
    pub tamed_c1: Option<f64>,
    /// One-sided Lipschitz constant of the drift (0 for monotone drifts).
    pub c0: Option<f64>,
    /// Global Lipschitz constant of the drift, when one exists.
    pub drift_lipschitz: Option<f64>,
    /// `sum_k |V_k(x) - V_k(y)| <= c1 |x - y|`.
    pub c1: Option<f64>,
    /// `|U0(x) - U0(y)|^2 <= c2 (1 + |x|^2q + |y|^2q) |x - y|^2`.
    pub c2: Option<f64>,
    pub q: Option<f64>,
    /// `sum_k |V_k(x)|^2 <= K`.
    pub k: Option<f64>,
    /// `sup_k |V_k(x)| <= k_hat`.
    pub k_hat: Option<f64>,
    pub lambda_fn: Option<ScalarField>,
    pub lambda_star: Option<f64>,
    /// Gap in the first-order gradient bound `(lambda - gamma) / N`.
    pub gamma: Option<f64>,
    /// Gap in the `rho`-weighted bounds; falls back to `gamma`.
    pub gamma_strict: Option<f64>,
    pub rho: Option<f64>,
    pub alpha_ses: Option<f64>,
    pub beta_ses: Option<f64>,
    pub extra: Vec<ExtraCondition>,
}

impl fmt::Debug for AssumptionConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AssumptionConstants")
            .field("b0", &self.b0)
            .field("b1", &self.b1)
            .field("tamed_b0", &self.tamed_b0)
            .field("tamed_c0", &self.tamed_c0)
            .field("c0", &self.c0)
            .field("c1", &self.c1)
            .field("c2", &self.c2)
            .field("q", &self.q)
            .field("k", &self.k)
            .field("lambda_star", &self.lambda_star)
            .field("gamma", &self.gamma)
            .field("gamma_strict", &self.gamma_strict)
            .field("rho", &self.rho)
            .field("alpha_ses", &self.alpha_ses)
            .field("beta_ses", &self.beta_ses)
            .finish_non_exhaustive()
    }
}

impl AssumptionConstants {
    pub fn validate(&self) -> Result<()> {
        if let Some(rho) = self.rho {
            if !(rho > 0.0 && rho < 0.2) {
                return Err(invalid(format!("rho must lie in (0, 0.2), got {rho}")));
            }
        }
        if let Some(beta) = self.beta_ses {
            if !(beta >= 1.0) {
                return Err(invalid(format!("beta_ses must be >= 1, got {beta}")));
            }
        }
        if self.lambda_fn.is_some() && !self.lambda_star.is_some_and(|l| l > 0.0) {
            return Err(invalid("lambda_star must be positive when lambda_fn is set"));
        }
        if let Some(b0) = self.b0 {
            if !(b0 > 0.0) {
                return Err(invalid(format!("b0 must be positive, got {b0}")));
            }
        }
        Ok(())
    }

    pub fn lambda(&self, x: &[f64]) -> Option<f64> {
        self.lambda_fn.as_ref().map(|f| f(x))
    }
}

/// A drift/diffusion pair with derivatives and metadata.
#[derive(Clone)]
pub struct SdeProblem {
    name: String,
    dim_state: usize,
    dim_noise: usize,
    noise_scale: f64,
    drift: VecField,
    drift_jacobian: VecField,
    drift_hessian: VecField,
    diffusion: VecField,
    diffusion_jacobians: VecField,
    diffusion_hessians: VecField,
    sources: DerivativeSources,
    constants: AssumptionConstants,
}

impl fmt::Debug for SdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeProblem")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("noise_scale", &self.noise_scale)
            .field("sources", &self.sources)
            .finish_non_exhaustive()
    }
}

impl SdeProblem {
    pub fn builder(
        name: impl Into<String>,
        dim_state: usize,
        dim_noise: usize,
        drift: VecField,
        diffusion: VecField,
    ) -> SdeProblemBuilder {
        SdeProblemBuilder {
            name: name.into(),
            dim_state,
            dim_noise,
            noise_scale: SQRT_2,
            drift,
            diffusion,
            drift_jacobian: None,
            drift_hessian: None,
            diffusion_jacobians: None,
            diffusion_hessians: None,
            constants: AssumptionConstants::default(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim_state(&self) -> usize {
        self.dim_state
    }
    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }
    /// Factor in front of the noise; `sqrt(2)` by default.
    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }
    pub fn sources(&self) -> DerivativeSources {
        self.sources
    }
    pub fn constants(&self) -> &AssumptionConstants {
        &self.constants
    }

    pub fn with_noise_scale(mut self, s: f64) -> Self {
        self.noise_scale = s;
        self
    }

    pub fn with_constants(mut self, c: AssumptionConstants) -> Self {
        self.constants = c;
        self
    }

    /// Replaces the drift Jacobian callback, keeping its source flag.
    /// Mostly useful for negative controls.
    pub fn with_drift_jacobian(mut self, f: VecField) -> Self {
        self.drift_jacobian = f;
        self
    }

    #[inline]
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }
    #[inline]
    pub fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
        (self.drift_jacobian)(x, out)
    }
    #[inline]
    pub fn drift_hessian(&self, x: &[f64], out: &mut [f64]) {
        (self.drift_hessian)(x, out)
    }
    #[inline]
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }
    #[inline]
    pub fn diffusion_jacobians(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion_jacobians)(x, out)
    }
    #[inline]
    pub fn diffusion_hessians(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion_hessians)(x, out)
    }

    pub fn drift_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state];
        self.drift(x, &mut out);
        out
    }
    pub fn drift_jacobian_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state * self.dim_state];
        self.drift_jacobian(x, &mut out);
        out
    }
    pub fn drift_hessian_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim_state;
        let mut out = vec![0.0; n * n * n];
        self.drift_hessian(x, &mut out);
        out
    }
    pub fn diffusion_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_noise * self.dim_state];
        self.diffusion(x, &mut out);
        out
    }
    pub fn diffusion_jacobians_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim_state;
        let mut out = vec![0.0; self.dim_noise * n * n];
        self.diffusion_jacobians(x, &mut out);
        out
    }
    pub fn diffusion_hessians_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim_state;
        let mut out = vec![0.0; self.dim_noise * n * n * n];
        self.diffusion_hessians(x, &mut out);
        out
    }
}

pub struct SdeProblemBuilder {
    name: String,
    dim_state: usize,
    dim_noise: usize,
    noise_scale: f64,
    drift: VecField,
    diffusion: VecField,
    drift_jacobian: Option<VecField>,
    drift_hessian: Option<VecField>,
    diffusion_jacobians: Option<VecField>,
    diffusion_hessians: Option<VecField>,
    constants: AssumptionConstants,
}

impl SdeProblemBuilder {
    pub fn noise_scale(mut self, s: f64) -> Self {
        self.noise_scale = s;
        self
    }
    pub fn drift_jacobian(mut self, f: VecField) -> Self {
        self.drift_jacobian = Some(f);
        self
    }
    pub fn drift_hessian(mut self, f: VecField) -> Self {
        self.drift_hessian = Some(f);
        self
    }
    pub fn diffusion_jacobians(mut self, f: VecField) -> Self {
        self.diffusion_jacobians = Some(f);
        self
    }
    pub fn diffusion_hessians(mut self, f: VecField) -> Self {
        self.diffusion_hessians = Some(f);
        self
    }
    pub fn constants(mut self, c: AssumptionConstants) -> Self {
        self.constants = c;
        self
    }

    /// Finalises the problem. Missing derivative callbacks are replaced by
    /// central differences with step `cbrt(eps) * max(1, |x_j|)` and flagged
    /// as [`DerivativeSource::FiniteDifference`].
    pub fn build(self) -> Result<SdeProblem> {
        let n = self.dim_state;
        let d = self.dim_noise;
        if n == 0 || d == 0 {
            return Err(invalid("dim_state and dim_noise must be positive"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(invalid("noise_scale must be finite and nonnegative"));
        }
        self.constants.validate()?;

        let pick = |f: Option<VecField>, base: &VecField, out_len: usize| match f {
            Some(f) => (f, DerivativeSource::Analytic),
            None => (
                fd_jacobian(base.clone(), n, out_len),
                DerivativeSource::FiniteDifference,
            ),
        };
        let (dj, dj_src) = pick(self.drift_jacobian, &self.drift, n);
        let (dh, dh_src) = pick(self.drift_hessian, &dj, n * n);
        let (vj, vj_src) = pick(self.diffusion_jacobians, &self.diffusion, d * n);
        let (vh, vh_src) = pick(self.diffusion_hessians, &vj, d * n * n);

        Ok(SdeProblem {
            name: self.name,
            dim_state: n,
            dim_noise: d,
            noise_scale: self.noise_scale,
            drift: self.drift,
            drift_jacobian: dj,
            drift_hessian: dh,
            diffusion: self.diffusion,
            diffusion_jacobians: vj,
            diffusion_hessians: vh,
            sources: DerivativeSources {
                drift_jacobian: dj_src,
                drift_hessian: dh_src,
                diffusion_jacobians: vj_src,
                diffusion_hessians: vh_src,
            },
            constants: self.constants,
        })
    }
}

/// Central-difference Jacobian of `f: R^n -> R^m` laid out as `[a*n + j]`.
fn fd_jacobian(f: VecField, n: usize, m: usize) -> VecField {
    let step = f64::EPSILON.cbrt();
    Arc::new(move |x: &[f64], out: &mut [f64]| {
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; m];
        let mut fm = vec![0.0; m];
        for j in 0..n {
            let h = step * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            f(&xp, &mut fp);
            xp[j] = x[j] - h;
            f(&xp, &mut fm);
            xp[j] = x[j];
            for a in 0..m {
                out[a * n + j] = (fp[a] - fm[a]) / (2.0 * h);
            }
        }
    })
}

/// A test function `g` with its gradient, Hessian and `C^2_b` seminorm
/// `sup|grad g| + sup||hess g||`.
#[derive(Clone)]
pub struct ObservableFn {
    pub name: String,
    pub eval: ScalarField,
    pub grad: VecField,
    pub hess: VecField,
    pub c2b_seminorm: f64,
}

impl fmt::Debug for ObservableFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObservableFn")
            .field("name", &self.name)
            .field("c2b_seminorm", &self.c2b_seminorm)
            .finish_non_exhaustive()
    }
}

impl ObservableFn {
    /// `g(x) = x_i`.
    pub fn coordinate(i: usize) -> Self {
        ObservableFn {
            name: if i == 0 { "x".into() } else { format!("x{}", i + 1) },
            eval: Arc::new(move |x| x[i]),
            grad: Arc::new(move |_x, out| {
                out.fill(0.0);
                out[i] = 1.0;
            }),
            hess: Arc::new(|_x, out| out.fill(0.0)),
            c2b_seminorm: 1.0,
        }
    }

    /// `g(x) = arctan(x_i)`.
    pub fn arctan(i: usize) -> Self {
        // sup |g'| = 1, sup |g''| = 3 sqrt(3) / 8 at x = 1/sqrt(3)
        let seminorm = 1.0 + 3.0 * 3f64.sqrt() / 8.0;
        let n_of = |out: &[f64]| (out.len() as f64).sqrt().round() as usize;
        ObservableFn {
            name: if i == 0 {
                "arctan".into()
            } else {
                format!("arctan{}", i + 1)
            },
            eval: Arc::new(move |x| x[i].atan()),
            grad: Arc::new(move |x, out| {
                out.fill(0.0);
                out[i] = 1.0 / (1.0 + x[i] * x[i]);
            }),
            hess: Arc::new(move |x, out| {
                out.fill(0.0);
                let n = n_of(out);
                let s = 1.0 + x[i] * x[i];
                out[i * n + i] = -2.0 * x[i] / (s * s);
            }),
            c2b_seminorm: seminorm,
        }
    }

    /// `g(x) = sin(x_i)`.
    pub fn sin(i: usize) -> Self {
        let n_of = |out: &[f64]| (out.len() as f64).sqrt().round() as usize;
        ObservableFn {
            name: if i == 0 { "sin".into() } else { format!("sin{}", i + 1) },
            eval: Arc::new(move |x| x[i].sin()),
            grad: Arc::new(move |x, out| {
                out.fill(0.0);
                out[i] = x[i].cos();
            }),
            hess: Arc::new(move |x, out| {
                out.fill(0.0);
                let n = n_of(out);
                out[i * n + i] = -x[i].sin();
            }),
            c2b_seminorm: 2.0,
        }
    }

    /// Looks up an observable by its config name (`x`, `x2`, `arctan`,
    /// `arctan2`, `sin`, ...).
    pub fn by_name(name: &str, dim: usize) -> Result<Self> {
        let (base, idx) = split_index(name);
        if idx >= dim {
            return Err(invalid(format!(
                "observable `{name}` refers to coordinate {} but state dim is {dim}",
                idx + 1
            )));
        }
        match base {
            "x" => Ok(Self::coordinate(idx)),
            "arctan" => Ok(Self::arctan(idx)),
            "sin" => Ok(Self::sin(idx)),
            _ => Err(invalid(format!("unknown observable `{name}`"))),
        }
    }
}

fn split_index(name: &str) -> (&str, usize) {
    let cut = name
        .find(|c: char| c.is_ascii_digit())
        .unwrap_or(name.len());
    let (base, digits) = name.split_at(cut);
    let idx = digits.parse::<usize>().map(|v| v.saturating_sub(1)).unwrap_or(0);
    (base, idx)
}

/// Parameters accepted by the problem registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemParams {
    #[serde(default = "default_a")]
    pub a: f64,
    /// Defaults to 0 for `cubic1d` and 1 for `coupled2d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default = "default_sigma1")]
    pub sigma1: [f64; 2],
    #[serde(default = "default_sigma2")]
    pub sigma2: [f64; 2],
    /// OU mean-reversion rate.
    #[serde(default = "default_a")]
    pub rate: f64,
    /// OU diffusion magnitude.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,
}

fn default_a() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    0.5
}
fn default_sigma1() -> [f64; 2] {
    [0.1, 0.0]
}
fn default_sigma2() -> [f64; 2] {
    [0.0, 0.1]
}

impl Default for ProblemParams {
    fn default() -> Self {
        ProblemParams {
            a: 1.0,
            b: None,
            sigma1: default_sigma1(),
            sigma2: default_sigma2(),
            rate: 1.0,
            sigma: default_sigma(),
            noise_scale: None,
        }
    }
}

/// Registry names understood by [`from_registry`].
pub const REGISTRY: [&str; 4] = ["cubic1d", "coupled2d", "fig1", "ou"];

pub fn from_registry(name: &str, p: &ProblemParams) -> Result<SdeProblem> {
    let problem = match name {
        "cubic1d" => make_cubic_1d(p.a, p.b.unwrap_or(0.0))?,
        "coupled2d" => make_coupled_2d(p.a, p.b.unwrap_or(1.0), p.sigma1, p.sigma2)?,
        "fig1" => make_fig1(),
        "ou" => make_linear_ou(p.rate, p.sigma)?,
        other => {
            return Err(invalid(format!(
                "unknown problem `{other}` (known: {})",
                REGISTRY.join(", ")
            )))
        }
    };
    Ok(match p.noise_scale {
        Some(s) => problem.with_noise_scale(s),
        None => problem,
    })
}

const RHO_DEFAULT: f64 = 0.19;

/// `U0(x) = -x^3 - a x`, `V(x) = b arctan(x)` in one dimension.
pub fn make_cubic_1d(a: f64, b: f64) -> Result<SdeProblem> {
    if !(a > 0.0) {
        return Err(invalid(format!("cubic1d needs a > 0, got {a}")));
    }
    if !(b >= 0.0) {
        return Err(invalid(format!("cubic1d needs b >= 0, got {b}")));
    }
    let rho = RHO_DEFAULT;
    let gamma = if a > 5.0 * b * b {
        0.5 * (rho * a - b * b)
    } else {
        0.5 * rho * a
    };
    let constants = AssumptionConstants {
        b0: Some(a),
        b1: Some(0.0),
        tamed_b0: Some(1.0),
        tamed_b1: Some(0.0),
        tamed_c0: Some(2.0),
        tamed_c1: Some(2.0 * a * a),
        c0: Some(0.0),
        drift_lipschitz: None,
        c1: Some(b),
        c2: Some(9f64.max(2.0 * a * a)),
        q: Some(2.0),
        k: Some(b * b * FRAC_PI_2 * FRAC_PI_2),
        k_hat: Some(b * FRAC_PI_2),
        lambda_fn: Some(Arc::new(move |x: &[f64]| 3.0 * x[0] * x[0] + a)),
        lambda_star: Some(a),
        gamma: Some(gamma),
        gamma_strict: None,
        rho: Some(rho),
        alpha_ses: Some(2.0 / a.sqrt()),
        beta_ses: Some(1.0),
        extra: Vec::new(),
    };
    SdeProblem::builder(
        "cubic1d",
        1,
        1,
        Arc::new(move |x, out| out[0] = -x[0] * x[0] * x[0] - a * x[0]),
        Arc::new(move |x, out| out[0] = b * x[0].atan()),
    )
    .drift_jacobian(Arc::new(move |x, out| out[0] = -3.0 * x[0] * x[0] - a))
    .drift_hessian(Arc::new(|x, out| out[0] = -6.0 * x[0]))
    .diffusion_jacobians(Arc::new(move |x, out| out[0] = b / (1.0 + x[0] * x[0])))
    .diffusion_hessians(Arc::new(move |x, out| {
        let s = 1.0 + x[0] * x[0];
        out[0] = -2.0 * b * x[0] / (s * s)
    }))
    .constants(constants)
    .build()
}

/// The `fig1` benchmark `dx = -(x^3 + x) dt + dB`: cubic drift with
/// `a = 1`, additive unit noise and `noise_scale = 1`.
pub fn make_fig1() -> SdeProblem {
    let base = make_cubic_1d(1.0, 0.0).expect("a = 1 is valid");
    let mut constants = base.constants().clone();
    constants.c1 = Some(0.0);
    constants.k = Some(1.0);
    constants.k_hat = Some(1.0);
    constants.gamma = Some(0.5 * RHO_DEFAULT);
    SdeProblem::builder(
        "fig1",
        1,
        1,
        Arc::new(|x, out| out[0] = -x[0] * x[0] * x[0] - x[0]),
        Arc::new(|_x, out| out[0] = 1.0),
    )
    .noise_scale(1.0)
    .drift_jacobian(Arc::new(|x, out| out[0] = -3.0 * x[0] * x[0] - 1.0))
    .drift_hessian(Arc::new(|x, out| out[0] = -6.0 * x[0]))
    .diffusion_jacobians(Arc::new(|_x, out| out[0] = 0.0))
    .diffusion_hessians(Arc::new(|_x, out| out[0] = 0.0))
    .constants(constants)
    .build()
    .expect("fig1 is well formed")
}

/// Closed-form smallest eigenvalue of `-grad U0` for the coupled example,
/// clamped at the square root.
pub fn coupled_2d_lambda(a: f64, b: f64, x: &[f64]) -> f64 {
    let (x1s, x2s) = (x[0] * x[0], x[1] * x[1]);
    let disc = ((3.0 * a - 1.0) * x1s - (3.0 * b - 1.0) * x2s).powi(2) + 16.0 * x1s * x2s;
    1.0 + 0.5 * ((3.0 * a + 1.0) * x1s + (3.0 * b + 1.0) * x2s) - 0.5 * disc.max(0.0).sqrt()
}

/// Two-dimensional coupled cubic drift with constant diffusion fields
/// `sigma1`, `sigma2`. The default `sigma = 0.1` magnitudes are a choice.
pub fn make_coupled_2d(a: f64, b: f64, sigma1: [f64; 2], sigma2: [f64; 2]) -> Result<SdeProblem> {
    if !(a > 0.0 && b > 0.0) {
        return Err(invalid(format!("coupled2d needs a, b > 0, got a={a}, b={b}")));
    }
    let m = a.max(b).max(1.0);
    let lambda = move |x: &[f64]| coupled_2d_lambda(a, b, x);

    // grad U0 = -(I + M(x)) with M PSD for every x iff a*b >= 1/9; then the
    // infimum of lambda is attained at the origin.
    let psd = 9.0 * a * b >= 1.0;
    let grid = halton_ball(2, 4000, 20.0);
    let lambda_star = if psd {
        1.0
    } else {
        grid.iter().map(|p| lambda(p)).fold(lambda(&[0.0, 0.0]), f64::min)
    };
    let hess_sum = |x: &[f64]| {
        let (x1, x2) = (x[0], x[1]);
        2.0 * ((9.0 * a * a * x1 * x1 + x2 * x2).sqrt()
            + 2.0 * (x2 * x2 + x1 * x1).sqrt()
            + (x1 * x1 + 9.0 * b * b * x2 * x2).sqrt())
    };
    let positive = lambda_star > 0.0;
    let (alpha_ses, beta_ses) = if positive {
        // existence constants, estimated on a grid with a 5% margin
        let mut alpha: f64 = 0.0;
        let mut beta: f64 = 1.0;
        for p in grid.iter() {
            let l = lambda(p);
            alpha = alpha.max(hess_sum(p) / l);
            let (x1s, x2s) = (p[0] * p[0], p[1] * p[1]);
            let j = [
                -1.0 - 3.0 * a * x1s - x2s,
                -2.0 * p[0] * p[1],
                -2.0 * p[0] * p[1],
                -1.0 - 3.0 * b * x2s - x1s,
            ];
            let (lo, _) = linalg::sym_eig_range(&j, 2);
            beta = beta.max(-lo / l);
        }
        (Some(1.05 * alpha), Some(1.05 * beta))
    } else {
        (None, None)
    };
    let k = sigma1.iter().chain(sigma2.iter()).map(|v| v * v).sum::<f64>();
    let k_hat = linalg::norm(&sigma1).max(linalg::norm(&sigma2));
    let constants = AssumptionConstants {
        b0: Some(1.0),
        b1: Some(0.0),
        tamed_b0: Some(a.min(b).min(1.0)),
        tamed_b1: Some(0.0),
        tamed_c0: Some(2.0 * m * m),
        tamed_c1: Some(2.0),
        c0: if psd { Some(0.0) } else { None },
        drift_lipschitz: None,
        c1: Some(0.0),
        c2: Some(2.0 * (3.0 * m + 2.0).powi(2)),
        q: Some(2.0),
        k: Some(k),
        k_hat: Some(k_hat),
        lambda_fn: if positive { Some(Arc::new(lambda)) } else { None },
        lambda_star: if positive { Some(lambda_star) } else { None },
        gamma: if positive { Some(0.99 * lambda_star) } else { None },
        gamma_strict: if positive { Some(0.5 * RHO_DEFAULT * lambda_star) } else { None },
        rho: Some(RHO_DEFAULT),
        alpha_ses,
        beta_ses,
        extra: vec![ExtraCondition {
            id: "coupled_eigen_negativity".into(),
            lhs_rhs: Arc::new(move |x: &[f64]| {
                let (x1s, x2s) = (x[0] * x[0], x[1] * x[1]);
                (
                    4.0 * x1s * x2s,
                    (1.0 + 3.0 * a * x1s + x2s) * (1.0 + 3.0 * b * x2s + x1s),
                )
            }),
        }],
    };
    let noise = [sigma1, sigma2];
    SdeProblem::builder(
        "coupled2d",
        2,
        2,
        Arc::new(move |x, out| {
            let (x1, x2) = (x[0], x[1]);
            out[0] = -x1 - a * x1 * x1 * x1 - x2 * x2 * x1;
            out[1] = -x2 - b * x2 * x2 * x2 - x1 * x1 * x2;
        }),
        Arc::new(move |_x, out| {
            out[..2].copy_from_slice(&noise[0]);
            out[2..4].copy_from_slice(&noise[1]);
        }),
    )
    .drift_jacobian(Arc::new(move |x, out| {
        let (x1, x2) = (x[0], x[1]);
        out[0] = -1.0 - 3.0 * a * x1 * x1 - x2 * x2;
        out[1] = -2.0 * x1 * x2;
        out[2] = -2.0 * x1 * x2;
        out[3] = -1.0 - 3.0 * b * x2 * x2 - x1 * x1;
    }))
    .drift_hessian(Arc::new(move |x, out| {
        let (x1, x2) = (x[0], x[1]);
        // component 1: d11 = -6a x1, d12 = d21 = -2 x2, d22 = -2 x1
        out[0] = -6.0 * a * x1;
        out[1] = -2.0 * x2;
        out[2] = -2.0 * x2;
        out[3] = -2.0 * x1;
        // component 2: d11 = -2 x2, d12 = d21 = -2 x1, d22 = -6b x2
        out[4] = -2.0 * x2;
        out[5] = -2.0 * x1;
        out[6] = -2.0 * x1;
        out[7] = -6.0 * b * x2;
    }))
    .diffusion_jacobians(Arc::new(|_x, out| out.fill(0.0)))
    .diffusion_hessians(Arc::new(|_x, out| out.fill(0.0)))
    .constants(constants)
    .build()
}

/// Linear Ornstein-Uhlenbeck problem `U0(x) = -rate x`, `V = sigma`.
pub fn make_linear_ou(rate: f64, sigma: f64) -> Result<SdeProblem> {
    if !(rate > 0.0) {
        return Err(invalid(format!("ou needs rate > 0, got {rate}")));
    }
    if !(sigma >= 0.0) {
        return Err(invalid(format!("ou needs sigma >= 0, got {sigma}")));
    }
    let rho = RHO_DEFAULT;
    let constants = AssumptionConstants {
        b0: Some(rate),
        b1: Some(0.0),
        tamed_b0: Some(rate),
        tamed_b1: Some(0.0),
        tamed_c0: Some(rate * rate),
        tamed_c1: Some(0.0),
        c0: Some(0.0),
        drift_lipschitz: Some(rate),
        c1: Some(0.0),
        c2: Some(rate * rate),
        q: Some(0.0),
        k: Some(sigma * sigma),
        k_hat: Some(sigma),
        lambda_fn: Some(Arc::new(move |_x: &[f64]| rate)),
        lambda_star: Some(rate),
        gamma: Some(0.5 * rho * rate),
        gamma_strict: None,
        rho: Some(rho),
        alpha_ses: Some(1.0),
        beta_ses: Some(1.0),
        extra: Vec::new(),
    };
    SdeProblem::builder(
        "ou",
        1,
        1,
        Arc::new(move |x, out| out[0] = -rate * x[0]),
        Arc::new(move |_x, out| out[0] = sigma),
    )
    .drift_jacobian(Arc::new(move |_x, out| out[0] = -rate))
    .drift_hessian(Arc::new(|_x, out| out[0] = 0.0))
    .diffusion_jacobians(Arc::new(|_x, out| out[0] = 0.0))
    .diffusion_hessians(Arc::new(|_x, out| out[0] = 0.0))
    .constants(constants)
    .build()
}

/// Per-callback result of [`check_derivatives`].
#[derive(Clone, Debug, Serialize)]
pub struct DerivativeCheck {
    pub callback: &'static str,
    pub source: DerivativeSource,
    /// `max |analytic - fd| / max(1, |fd|)` over points and entries.
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DerivativeReport {
    pub samples: usize,
    pub radius: f64,
    pub tol: f64,
    pub checks: Vec<DerivativeCheck>,
    pub pass: bool,
}

/// Compares every derivative callback against fourth-order central
/// differences of the callback one order below, at `samples` Halton points
/// in the ball of the given radius.
pub fn check_derivatives(
    problem: &SdeProblem,
    samples: usize,
    radius: f64,
    tol: f64,
) -> Result<DerivativeReport> {
    if samples == 0 || !(radius > 0.0) || !(tol > 0.0) {
        return Err(invalid("check_derivatives needs samples >= 1, radius > 0, tol > 0"));
    }
    let n = problem.dim_state();
    let d = problem.dim_noise();
    let points = halton_ball(n, samples, radius);
    let src = problem.sources();

    type Field<'a> = &'a dyn Fn(&[f64], &mut [f64]);
    let cases: [(&'static str, DerivativeSource, usize, Field, Field); 4] = [
        ("drift_jacobian", src.drift_jacobian, n, &|x, o| problem.drift(x, o), &|x, o| problem.drift_jacobian(x, o)),
        ("drift_hessian", src.drift_hessian, n * n, &|x, o| problem.drift_jacobian(x, o), &|x, o| problem.drift_hessian(x, o)),
        ("diffusion_jacobians", src.diffusion_jacobians, d * n, &|x, o| problem.diffusion(x, o), &|x, o| problem.diffusion_jacobians(x, o)),
        ("diffusion_hessians", src.diffusion_hessians, d * n * n, &|x, o| problem.diffusion_jacobians(x, o), &|x, o| problem.diffusion_hessians(x, o)),
    ];

    let mut checks = Vec::with_capacity(cases.len());
    for (label, source, m, base, deriv) in cases {
        let mut worst: f64 = 0.0;
        let mut analytic = vec![0.0; m * n];
        let mut fd = vec![0.0; m * n];
        for p in &points {
            deriv(p, &mut analytic);
            fd4_jacobian(base, p, m, &mut fd);
            for (a, f) in analytic.iter().zip(&fd) {
                let e = (a - f).abs() / f.abs().max(1.0);
                worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
                if worst.is_nan() {
                    break;
                }
            }
            if worst.is_nan() {
                break;
            }
        }
        checks.push(DerivativeCheck {
            callback: label,
            source,
            max_rel_error: worst,
            pass: worst <= tol,
        });
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(DerivativeReport {
        samples,
        radius,
        tol,
        checks,
        pass,
    })
}

fn fd4_jacobian(f: &dyn Fn(&[f64], &mut [f64]), x: &[f64], m: usize, out: &mut [f64]) {
    let n = x.len();
    let mut xp = x.to_vec();
    let mut vals = [vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    for j in 0..n {
        let h = f64::EPSILON.powf(0.2) * x[j].abs().max(1.0);
        for (slot, off) in [2.0, 1.0, -1.0, -2.0].iter().enumerate() {
            xp[j] = x[j] + off * h;
            f(&xp, &mut vals[slot]);
        }
        xp[j] = x[j];
        for a in 0..m {
            out[a * n + j] =
                (-vals[0][a] + 8.0 * vals[1][a] - 8.0 * vals[2][a] + vals[3][a]) / (12.0 * h);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_values() {
        let p = make_cubic_1d(1.0, 0.0).unwrap();
        assert_eq!(p.drift_vec(&[2.0]), vec![-10.0]);
        assert_eq!(p.drift_jacobian_vec(&[2.0]), vec![-13.0]);
        assert_eq!(p.constants().lambda(&[2.0]), Some(13.0));
        let p = make_cubic_1d(1.0, 0.3).unwrap();
        assert_eq!(p.diffusion_vec(&[0.0]), vec![0.0]);
        assert!((p.diffusion_jacobians_vec(&[0.0])[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn cubic_rejects_bad_a() {
        assert!(make_cubic_1d(0.0, 0.1).is_err());
        assert!(make_cubic_1d(-1.0, 0.1).is_err());
    }

    #[test]
    fn remark_condition_a_gt_5b2() {
        let (a, b) = (2.0_f64, 0.5_f64);
        assert!(a > 5.0 * b * b);
    }

    #[test]
    fn coupled_origin() {
        let p = make_coupled_2d(1.0, 1.0, [0.1, 0.0], [0.0, 0.1]).unwrap();
        assert_eq!(p.drift_vec(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(p.drift_jacobian_vec(&[0.0, 0.0]), vec![-1.0, 0.0, 0.0, -1.0]);
        assert!((p.constants().lambda(&[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(p.drift_vec(&[1.0, 1.0]), vec![-3.0, -3.0]);
    }

    #[test]
    fn coupled_rejects_nonpositive() {
        assert!(make_coupled_2d(0.0, 1.0, [0.1, 0.0], [0.0, 0.1]).is_err());
        assert!(make_coupled_2d(1.0, -1.0, [0.1, 0.0], [0.0, 0.1]).is_err());
    }

    #[test]
    fn fd_fallbacks_are_flagged() {
        let p = SdeProblem::builder(
            "user",
            1,
            1,
            Arc::new(|x, o| o[0] = -x[0].powi(3)),
            Arc::new(|_x, o| o[0] = 1.0),
        )
        .build()
        .unwrap();
        assert_eq!(p.sources().drift_jacobian, DerivativeSource::FiniteDifference);
        assert!(!p.sources().all_analytic());
        let j = p.drift_jacobian_vec(&[2.0])[0];
        assert!((j + 12.0).abs() < 1e-8, "{j}");
        let h = p.drift_hessian_vec(&[2.0])[0];
        assert!((h + 12.0).abs() < 1e-3, "{h}");
    }

    #[test]
    fn registry_lookup() {
        for name in REGISTRY {
            let p = from_registry(name, &ProblemParams::default()).unwrap();
            assert_eq!(p.name(), name);
        }
        assert!(from_registry("nope", &ProblemParams::default()).is_err());
        let f = from_registry("fig1", &ProblemParams::default()).unwrap();
        assert_eq!(f.noise_scale(), 1.0);
        let c = from_registry("cubic1d", &ProblemParams::default()).unwrap();
        assert_eq!(c.noise_scale(), SQRT_2);
    }

    #[test]
    fn constants_validation() {
        let c = AssumptionConstants {
            rho: Some(0.25),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = AssumptionConstants {
            beta_ses: Some(0.5),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn observable_lookup() {
        assert_eq!(ObservableFn::by_name("arctan", 1).unwrap().name, "arctan");
        assert_eq!(ObservableFn::by_name("x2", 2).unwrap().name, "x2");
        assert!(ObservableFn::by_name("x2", 1).is_err());
        assert!(ObservableFn::by_name("cosh", 1).is_err());
    }
}
