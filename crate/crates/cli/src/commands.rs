use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;
use uitsde::analysis::assumptions::check_assumptions;
use uitsde::analysis::fig1::{run_fig1, Fig1Spec};
use uitsde::analysis::local_error::{local_weak_error_profile, LocalErrorSpec};
use uitsde::analysis::order::{convergence_order, OrderReference, OrderSpec};
use uitsde::analysis::ses::{ses_probe, SesSpec};
use uitsde::analysis::weak_error::{weak_error_curve, WeakErrorSpec};
use uitsde::engine::{moment_recursion_audit, record_grid, simulate_ensemble, EnsembleSpec};
use uitsde::model::{ObservableFn, SdeProblem};
use uitsde::noise::{ratio_of, NoisePlan};
use uitsde::output::{series_csv, table_csv, CsvHeader, TOOL_VERSION};
use uitsde::schemes::{SchemeConfig, SchemeKind};

use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] uitsde::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use uitsde::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::AllPathsBlewUp { .. }) => 3,
            CliError::Core(
                E::InvalidArgument(_)
                | E::DeltaTooLarge { .. }
                | E::NonDivisibleDelta { .. }
                | E::InsufficientDeltas(_)
                | E::MissingDerivatives(_),
            ) => 2,
            CliError::Core(E::NonConvergence { .. } | E::Analysis(_)) => 4,
            CliError::Io { .. } => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Everything a subcommand needs besides its config section.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub problem: SdeProblem,
    pub out: PathBuf,
    hash: String,
}

impl Run {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        let problem = cfg.validate()?;
        let hash = cfg.hash();
        Ok(Run {
            cfg,
            problem,
            out,
            hash,
        })
    }

    fn x0(&self) -> Vec<f64> {
        self.cfg.x0_for(&self.problem)
    }

    fn observable(&self) -> Result<ObservableFn> {
        let mut all = self.cfg.observable_fns(self.problem.dim_state())?;
        if all.is_empty() {
            return Err(ConfigError {
                field: "observables".into(),
                message: "at least one observable is required".into(),
            }
            .into());
        }
        Ok(all.swap_remove(0))
    }

    fn header(&self, command: &str) -> CsvHeader {
        CsvHeader::new()
            .with("command", command)
            .with("config_sha256", &self.hash)
            .with("seed", self.cfg.seed)
            .with("problem", self.problem.name())
    }

    /// Header fields describing one scheme.
    fn scheme_header(&self, h: CsvHeader, scheme: &SchemeConfig, x0: &[f64]) -> CsvHeader {
        let (alpha, q) = match scheme.kind {
            SchemeKind::TamedTruncated => scheme
                .resolve_tte(&self.problem)
                .map(|(a, q)| (a.to_string(), q.to_string()))
                .unwrap_or_else(|_| ("?".into(), "?".into())),
            _ => ("-".into(), "-".into()),
        };
        h.with("scheme", scheme.kind)
            .with("delta", scheme.delta)
            .with("alpha", alpha)
            .with("q", q)
            .with("x0", format!("{x0:?}"))
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|source| CliError::Io {
            path: self.out.clone(),
            source,
        })?;
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn write_json(&self, name: &str, command: &str, result: impl Serialize) -> Result<()> {
        let doc = json!({
            "tool": TOOL_VERSION,
            "command": command,
            "config_sha256": self.hash,
            "seed": self.cfg.seed,
            "config": self.cfg,
            "result": result,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("json");
        text.push('\n');
        self.write(name, &text)
    }
}

fn file_tag(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn rows<const N: usize>(columns: impl IntoIterator<Item = [String; N]>) -> Vec<Vec<String>> {
    columns.into_iter().map(|r| r.to_vec()).collect()
}

pub fn simulate(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let x0 = run.x0();
    let spec = EnsembleSpec::new(
        run.problem.clone(),
        cfg.scheme.clone(),
        x0.clone(),
        cfg.horizon,
        record_grid(cfg.horizon, cfg.record.every)?,
        cfg.n_paths,
        cfg.seed,
    )?;
    let obs = cfg.observable_fns(run.problem.dim_state())?;
    let res = simulate_ensemble(&spec, &obs, &cfg.moments)?;
    let header = run
        .scheme_header(run.header("simulate"), &cfg.scheme, &x0)
        .with("n_paths", cfg.n_paths);
    for s in &res.observables {
        run.write(&format!("simulate_{}.csv", file_tag(&s.name)), &series_csv(&header, s))?;
    }
    for (i, p) in res.moments.powers.iter().enumerate() {
        let s = res.moments.as_series(i);
        run.write(&format!("moments_p{}.csv", file_tag(&p.to_string())), &series_csv(&header, &s))?;
    }
    run.write_json(
        "simulate.json",
        "simulate",
        json!({ "blowups": res.blowups, "n_paths": cfg.n_paths }),
    )?;
    println!("simulate: {} paths, {} blow-ups", cfg.n_paths, res.blowups);
    Ok(())
}

pub fn fig1(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let f = &cfg.fig1;
    if f.x0.is_empty() {
        return Err(ConfigError {
            field: "fig1.x0".into(),
            message: "at least one initial value is required".into(),
        }
        .into());
    }
    let mut summary = Vec::new();
    for &x0 in &f.x0 {
        let spec = Fig1Spec {
            x0,
            delta: f.delta,
            alphas: f.alphas.clone(),
            n_paths: f.n_paths,
            reference_delta: f.reference_delta,
            reference_paths: f.reference_paths,
            horizon: f.horizon,
            record_every: cfg.record.every,
            master_seed: cfg.seed,
        };
        let r = run_fig1(&spec)?;
        let tag = format!("fig1_x0_{}", file_tag(&x0.to_string()));
        let reference = SchemeConfig::new(SchemeKind::TamedStandard, f.reference_delta);
        let h = run
            .scheme_header(run.header("fig1"), &reference, &[x0])
            .with("curve", "reference")
            .with("n_paths", f.reference_paths);
        run.write(&format!("{tag}_reference.csv"), &series_csv(&h, &r.reference))?;
        for c in &r.curves {
            let h = run
                .scheme_header(run.header("fig1"), &c.scheme, &[x0])
                .with("curve", &c.label)
                .with("n_paths", f.n_paths);
            run.write(&format!("{tag}_{}.csv", c.label), &series_csv(&h, &c.series))?;
        }
        let tte: Vec<_> = r.curves.iter().filter(|c| c.scheme.kind == SchemeKind::TamedTruncated).collect();
        let largest = |key: fn(&&&uitsde::analysis::fig1::Fig1Curve) -> f64| {
            tte.iter()
                .max_by(|a, b| key(a).total_cmp(&key(b)))
                .map(|c| c.label.clone())
        };
        let curves: Vec<_> = r
            .curves
            .iter()
            .map(|c| {
                json!({
                    "label": c.label,
                    "sup_deviation": c.sup_deviation,
                    "max_z": c.max_z,
                    "max_z_time": c.max_z_time,
                    "first_step_overshoot": c.first_step_overshoot,
                })
            })
            .collect();
        for c in &r.curves {
            println!(
                "fig1 x0={x0} {:<16} sup deviation {:.4}  max z {:.2}  first-step overshoot {:.4}",
                c.label, c.sup_deviation, c.max_z, c.first_step_overshoot
            );
        }
        summary.push(json!({
            "x0": x0,
            "times": r.times,
            "curves": curves,
            "largest_tte_sup_deviation": largest(|c| c.sup_deviation),
            "largest_tte_first_step_overshoot": largest(|c| c.first_step_overshoot),
            "tte_within_3_combined_se": tte.iter().all(|c| c.max_z <= 3.0),
        }));
    }
    run.write_json("fig1_summary.json", "fig1", summary)
}

fn weak_error_spec(run: &Run) -> Result<WeakErrorSpec> {
    let cfg = &run.cfg;
    let r = &cfg.reference;
    if r.kind == "exact" {
        return Err(ConfigError {
            field: "reference.kind".into(),
            message: "weak-error needs a scheme reference".into(),
        }
        .into());
    }
    let kind = r.kind.parse::<SchemeKind>()?;
    let plan = NoisePlan::new(
        cfg.seed,
        r.paths.max(cfg.n_paths),
        run.problem.dim_noise(),
        r.delta,
        ratio_of(cfg.scheme.delta, r.delta)?,
        cfg.horizon,
    )?;
    Ok(WeakErrorSpec {
        problem: run.problem.clone(),
        scheme: cfg.scheme.clone(),
        reference: SchemeConfig {
            kind,
            delta: r.delta,
            ..cfg.scheme.clone()
        },
        x0: run.x0(),
        horizon: cfg.horizon,
        record_every: cfg.record.every,
        observable: run.observable()?,
        n_paths: cfg.n_paths,
        plan,
    })
}

pub fn weak_error(run: &Run) -> Result<()> {
    let spec = weak_error_spec(run)?;
    let r = weak_error_curve(&spec)?;
    let h = run
        .scheme_header(run.header("weak-error"), &spec.scheme, &spec.x0)
        .with("reference", format!("{} delta {}", spec.reference.kind, spec.reference.delta))
        .with("observable", &r.observable)
        .with("n_paths", spec.n_paths);
    let table = rows((0..r.times.len()).map(|i| {
        [
            r.times[i].to_string(),
            r.scheme.mean[i].to_string(),
            r.scheme.stderr[i].to_string(),
            r.reference.mean[i].to_string(),
            r.reference.stderr[i].to_string(),
            r.err[i].to_string(),
            r.half_width[i].to_string(),
            r.paired_diff[i].to_string(),
            r.paired_stderr[i].to_string(),
        ]
    }));
    let columns = [
        "time",
        "scheme_mean",
        "scheme_stderr",
        "reference_mean",
        "reference_stderr",
        "err",
        "half_width",
        "paired_diff",
        "paired_stderr",
    ];
    run.write("weak_error.csv", &table_csv(&h, &columns, &table))?;
    println!(
        "weak-error: sup err {:.4e} at t={} (max half-width {:.2e}), plateau {}",
        r.sup_err, r.sup_err_time, r.max_half_width, r.plateau.flag
    );
    run.write_json(
        "weak_error.json",
        "weak-error",
        json!({
            "observable": r.observable,
            "sup_err": r.sup_err,
            "sup_err_time": r.sup_err_time,
            "max_half_width": r.max_half_width,
            "plateau": r.plateau,
            "coupling_verified": r.coupling_verified,
        }),
    )
}

pub fn order(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let observable = run.observable()?;
    let reference = if cfg.reference.kind == "exact" {
        if run.problem.name() != "ou" || observable.name != "x" {
            return Err(ConfigError {
                field: "reference.kind".into(),
                message: "`exact` is only available for problem `ou` with observable `x`".into(),
            }
            .into());
        }
        let x0 = run.x0()[0];
        let rate = cfg.problem.params().rate;
        OrderReference::Exact(Arc::new(move |t: f64| x0 * (-rate * t).exp()))
    } else {
        OrderReference::Scheme(SchemeConfig {
            kind: cfg.reference.kind.parse()?,
            delta: cfg.reference.delta,
            ..cfg.scheme.clone()
        })
    };
    let spec = OrderSpec {
        problem: run.problem.clone(),
        scheme: cfg.scheme.clone(),
        deltas: cfg.order.deltas.clone(),
        x0: run.x0(),
        horizon: cfg.horizon,
        record_every: cfg.record.every,
        observable,
        n_paths: cfg.n_paths,
        reference,
        master_seed: cfg.seed,
    };
    let r = convergence_order(&spec)?;
    let h = run
        .scheme_header(run.header("order"), &spec.scheme, &spec.x0)
        .with("reference", &cfg.reference.kind)
        .with("observable", &spec.observable.name)
        .with("n_paths", spec.n_paths);
    let table = rows(r.rows.iter().map(|row| {
        [
            row.delta.to_string(),
            row.sup_err.to_string(),
            row.sup_err_stderr.to_string(),
            row.sup_err_time.to_string(),
            row.blowups.to_string(),
        ]
    }));
    run.write(
        "order.csv",
        &table_csv(&h, &["delta", "sup_err", "sup_err_stderr", "sup_err_time", "blowups"], &table),
    )?;
    println!("order: beta {:.4} +- {:.4}", r.beta, r.beta_stderr);
    run.write_json(
        "order.json",
        "order",
        json!({ "beta": r.beta, "beta_stderr": r.beta_stderr, "rows": r.rows, "fit": r.fit }),
    )
}

pub fn local_error(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let states = if cfg.local_error.states.is_empty() {
        vec![run.x0()]
    } else {
        cfg.local_error.states.clone()
    };
    let spec = LocalErrorSpec {
        problem: run.problem.clone(),
        scheme: cfg.scheme.clone(),
        states,
        deltas: cfg.local_error.deltas.clone(),
        observables: cfg.observable_fns(run.problem.dim_state())?,
        n_paths: cfg.n_paths,
        master_seed: cfg.seed,
    };
    let r = local_weak_error_profile(&spec)?;
    let h = run
        .scheme_header(run.header("local-error"), &spec.scheme, &run.x0())
        .with("n_paths", spec.n_paths)
        .with("model_shape", r.model_shape);
    let table = rows(r.rows.iter().map(|row| {
        [
            format!("\"{:?}\"", row.state),
            row.state_norm.to_string(),
            row.delta.to_string(),
            row.observable.clone(),
            row.phi.to_string(),
            row.phi_stderr.to_string(),
            row.reference_substeps.to_string(),
        ]
    }));
    let columns = ["state", "state_norm", "delta", "observable", "phi", "phi_stderr", "reference_substeps"];
    run.write("local_error.csv", &table_csv(&h, &columns, &table))?;
    for s in &r.delta_slopes {
        println!("local-error: delta slope {:.3} +- {:.3} at |x| = {}", s.slope, s.slope_stderr, s.fixed);
    }
    run.write_json(
        "local_error.json",
        "local-error",
        json!({
            "model_shape": r.model_shape,
            "delta_slopes": r.delta_slopes,
            "state_slopes": r.state_slopes,
        }),
    )
}

pub fn moments(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let x0 = run.x0();
    let spec = EnsembleSpec::new(
        run.problem.clone(),
        cfg.scheme.clone(),
        x0.clone(),
        cfg.horizon,
        record_grid(cfg.horizon, cfg.record.every)?,
        cfg.n_paths,
        cfg.seed,
    )?;
    let res = simulate_ensemble(&spec, &[], &cfg.moments)?;
    let h = run
        .scheme_header(run.header("moments"), &cfg.scheme, &x0)
        .with("n_paths", cfg.n_paths);
    let mut sups = Vec::new();
    for (i, p) in res.moments.powers.iter().enumerate() {
        let s = res.moments.as_series(i);
        let sup = s.mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("moments: sup E|X|^{p} = {sup:.6}, blow-ups {}", res.blowups);
        sups.push(json!({ "power": p, "sup": sup }));
        run.write(&format!("moments_p{}.csv", file_tag(&p.to_string())), &series_csv(&h, &s))?;
    }
    let audit = if cfg.scheme.kind == SchemeKind::TamedTruncated {
        Some(moment_recursion_audit(&spec)?)
    } else {
        None
    };
    run.write_json(
        "moments.json",
        "moments",
        json!({ "sup": sups, "blowups": res.blowups, "tte_audit": audit }),
    )
}

pub fn ses(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let points = if cfg.ses.points.is_empty() {
        vec![run.x0()]
    } else {
        cfg.ses.points.clone()
    };
    let spec = SesSpec {
        problem: run.problem.clone(),
        observable: run.observable()?,
        initial_points: points,
        horizon: cfg.horizon,
        record_every: cfg.record.every,
        n_paths: cfg.n_paths,
        fine_delta: cfg.ses.fine_delta,
        master_seed: cfg.seed,
        hessian_step: cfg.ses.hessian_step,
        require_analytic: cfg.ses.require_analytic,
    };
    let r = ses_probe(&spec)?;
    let h = run
        .header("ses")
        .with("scheme", "em (tangent process)")
        .with("delta", spec.fine_delta)
        .with("observable", &r.observable)
        .with("n_paths", spec.n_paths)
        .with("derivatives", if r.derivatives_analytic { "analytic" } else { "finite-difference" });
    let table = rows((0..r.times.len()).map(|i| {
        [
            r.times[i].to_string(),
            r.sup_gradient[i].to_string(),
            r.sup_gradient_stderr[i].to_string(),
            r.sup_hessian[i].to_string(),
            r.sup_hessian_stderr[i].to_string(),
        ]
    }));
    let columns = ["time", "sup_gradient", "sup_gradient_stderr", "sup_hessian", "sup_hessian_stderr"];
    run.write("ses.csv", &table_csv(&h, &columns, &table))?;
    match &r.gradient_rate {
        Some(f) => println!("ses: gamma_hat {:.4} +- {:.4} (exponential: {})", f.rate, f.rate_stderr, f.exponential),
        None => println!("ses: too few resolved points for a gradient rate"),
    }
    run.write_json(
        "ses.json",
        "ses",
        json!({
            "gamma_hat": r.gradient_rate.map(|f| f.rate),
            "gradient_rate": r.gradient_rate,
            "hessian_rate": r.hessian_rate,
            "initial_gradient_error": r.initial_gradient_error,
            "derivatives_analytic": r.derivatives_analytic,
        }),
    )
}

pub fn check(run: &Run) -> Result<()> {
    let c = &run.cfg.check;
    let r = check_assumptions(&run.problem, run.problem.constants(), c.radius, c.samples)?;
    for v in &r.conditions {
        println!(
            "check: {:<40} {}  worst margin {:.4e}",
            v.id,
            if v.pass { "pass" } else { "FAIL" },
            v.worst_margin
        );
    }
    for g in &r.groups {
        let verdict = match g.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "not evaluated",
        };
        println!("check: group {:<31} {verdict}", g.id);
    }
    run.write_json("assumptions.json", "check", &r)
}

/// Output directory: the flag, then the config, then `out`.
pub fn out_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}
