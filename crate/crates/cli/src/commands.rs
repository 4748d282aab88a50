use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use qtrans_core::andersen::{
    ensemble_relaxation, predicted_rate, run_trajectory, trajectory_rng, write_ensemble_csv,
    CavityStart, EnsembleSummary, ReferenceSystem, ThermostatConfig,
};
use qtrans_core::cl_limit::{limit_check, write_limit_csv, LimitConfig};
use qtrans_core::fit::{fit_exponential, linear_regression};
use qtrans_core::oscillator::{harmonic_hamiltonian, position_operator};
use qtrans_core::propagator::{
    energy_weight, flux_cumulants, lambda_from_beta, load_or_build_g0, G0CacheKey,
};
use qtrans_core::relaxation::{
    diffusion_for_rate, evolve_populations, sample_trajectory, write_population_csv,
    RATE_PER_DIFFUSION,
};
use qtrans_core::spin::{collapse_timecourse, write_collapse_csv, BlochState, CollapseConfig};
use qtrans_core::stationary::{scan_points, ScanConfig, DEFAULT_MAX_ITER, DEFAULT_TOL};
use qtrans_core::{BetaConvention, DensityMatrix, NoiseModel, Wavefunction, WeightedPropagator};

use crate::config::RawConfig;
use crate::error::CliError;
use crate::output::{num, Output};

/// Settings shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Context {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub cache: Option<PathBuf>,
}

impl Context {
    fn params<T>(&self, mut raw: RawConfig, seeded: bool) -> Result<T, CliError>
    where
        T: Default + Serialize + for<'de> Deserialize<'de>,
    {
        if let (true, Some(seed)) = (seeded, self.seed) {
            raw.insert("seed", json!(seed));
        }
        raw.into_params()
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn oscillator_propagator(
    ctx: &Context,
    n_levels: usize,
    hbar_omega: f64,
    diffusion: f64,
    dt: f64,
    quadrature_order: usize,
    lambda: f64,
) -> Result<WeightedPropagator, CliError> {
    let h = harmonic_hamiltonian(n_levels, hbar_omega);
    let x = position_operator(n_levels, 1.0, hbar_omega, 1.0);
    let model = NoiseModel::from_diffusion(h.clone(), x, diffusion, dt)?
        .with_quadrature_order(quadrature_order)?;
    let key = G0CacheKey {
        n_levels,
        hbar_omega,
        diffusion,
        dt,
        quadrature_order,
    };
    let g0 = load_or_build_g0(ctx.cache.as_deref(), &key, &model)?;
    Ok(energy_weight(&g0, &h, lambda)?)
}

fn population_rows<W: Write>(out: &mut W, times: &[f64], pops: &[Vec<f64>]) -> std::io::Result<()> {
    let n = pops.first().map_or(0, Vec::len);
    let cols: Vec<String> = (0..n).map(|k| format!("p{k}")).collect();
    writeln!(out, "t,{}", cols.join(","))?;
    for (t, p) in times.iter().zip(pops) {
        let vals: Vec<String> = p.iter().map(|v| format!("{v:.12e}")).collect();
        writeln!(out, "{t},{}", vals.join(","))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefTrajParams {
    /// `single` or `ensemble`.
    pub mode: String,
    pub n_levels: usize,
    pub hbar_omega: f64,
    pub c: f64,
    pub beta: f64,
    pub t_reset: f64,
    pub n_traj: usize,
    pub run_length: usize,
    pub system_start: usize,
    /// `thermal` or a Fock level.
    pub cavity_start: String,
    pub record_energy: bool,
    pub seed: u64,
}

impl Default for RefTrajParams {
    fn default() -> Self {
        let t = ThermostatConfig::default();
        Self {
            mode: "ensemble".into(),
            n_levels: t.n_levels,
            hbar_omega: t.hbar_omega,
            c: t.c,
            beta: t.beta,
            t_reset: t.t_reset,
            n_traj: t.n_traj,
            run_length: t.run_length,
            system_start: t.system_start,
            cavity_start: "thermal".into(),
            record_energy: false,
            seed: 0,
        }
    }
}

impl RefTrajParams {
    fn thermostat(&self) -> Result<ThermostatConfig, CliError> {
        let cavity_start = match self.cavity_start.as_str() {
            "thermal" => CavityStart::Thermal,
            s => CavityStart::Fock(s.parse().map_err(|_| {
                config_error(format!(
                    "cavity_start must be `thermal` or a level, got `{s}`"
                ))
            })?),
        };
        let cfg = ThermostatConfig {
            n_levels: self.n_levels,
            hbar_omega: self.hbar_omega,
            c: self.c,
            beta: self.beta,
            t_reset: self.t_reset,
            n_traj: self.n_traj,
            run_length: self.run_length,
            system_start: self.system_start,
            cavity_start,
            record_energy: self.record_energy,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn ref_traj(raw: RawConfig, ctx: &Context) -> Result<Output, CliError> {
    let p: RefTrajParams = ctx.params(raw, true)?;
    let cfg = p.thermostat()?;
    let mut out = Output::new(&ctx.out, "ref-traj", &p)?;
    let prediction = predicted_rate(cfg.c, cfg.beta, cfg.hbar_omega, cfg.t_reset, cfg.n_levels);
    match p.mode.as_str() {
        "single" => {
            let system = ReferenceSystem::new(cfg.clone())?;
            let traj = run_trajectory(&system, &mut trajectory_rng(p.seed, 0))?;
            let times: Vec<f64> = (0..traj.populations.len())
                .map(|k| k as f64 * cfg.t_reset)
                .collect();
            out.csv("ref_traj.csv", |w| {
                population_rows(w, &times, &traj.populations)
            })?;
            if cfg.record_energy {
                out.csv("ref_traj_energy.csv", |w| {
                    writeln!(w, "cycle,evolved,measured,reset")?;
                    for (k, e) in traj.energies.iter().enumerate() {
                        writeln!(
                            w,
                            "{},{:.12e},{:.12e},{:.12e}",
                            k + 1,
                            e.evolved,
                            e.measured,
                            e.reset
                        )?;
                    }
                    Ok(())
                })?;
            }
            out.summary(
                "ref_traj.json",
                json!({
                    "mode": "single",
                    "initial_energy": num(traj.initial_energy),
                    "final_populations": traj.populations.last(),
                    "measurements": traj.measurements,
                    "predicted_rate": num(prediction),
                }),
            )?;
        }
        "ensemble" => {
            let result = ensemble_relaxation(&cfg, p.seed)?;
            out.csv("ref_traj.csv", |w| write_ensemble_csv(w, &result))?;
            let summary = EnsembleSummary::new(&cfg, p.seed, &result);
            out.summary(
                "ref_traj.json",
                json!({
                    "mode": "ensemble",
                    "rate": num(summary.rate),
                    "rate_stderr": num(summary.rate_stderr),
                    "asymptote": num(summary.asymptote),
                    "predicted_rate": num(summary.predicted_rate),
                    "relative_deviation": num(summary.rate / summary.predicted_rate - 1.0),
                }),
            )?;
        }
        m => {
            return Err(config_error(format!(
                "mode must be `single` or `ensemble`, got `{m}`"
            )))
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WtTrajParams {
    /// `density`, `sampled` or `compare`.
    pub mode: String,
    pub n_levels: usize,
    pub hbar_omega: f64,
    pub beta: f64,
    pub convention: BetaConvention,
    pub diffusion: f64,
    /// Relaxation rate per step; overrides `diffusion` through the rate law.
    pub target_rate: Option<f64>,
    pub dt: f64,
    pub steps: usize,
    pub quadrature_order: usize,
    pub system_start: usize,
    pub seed: u64,
    /// Reference-bath settings for `compare`.
    pub c: f64,
    pub t_reset: f64,
    pub n_traj: usize,
    pub run_length: usize,
}

impl Default for WtTrajParams {
    fn default() -> Self {
        let t = ThermostatConfig::default();
        Self {
            mode: "density".into(),
            n_levels: 10,
            hbar_omega: 1.0,
            beta: 1.0,
            convention: BetaConvention::Half,
            diffusion: 1e-3,
            target_rate: None,
            dt: 1.0,
            steps: 3000,
            quadrature_order: 20,
            system_start: 0,
            seed: 0,
            c: t.c,
            t_reset: t.t_reset,
            n_traj: t.n_traj,
            run_length: t.run_length,
        }
    }
}

pub fn wt_traj(raw: RawConfig, ctx: &Context) -> Result<Output, CliError> {
    let p: WtTrajParams = ctx.params(raw, true)?;
    if p.system_start >= p.n_levels {
        return Err(config_error("system_start outside the basis"));
    }
    let mut out = Output::new(&ctx.out, "wt-traj", &p)?;
    let lambda = lambda_from_beta(p.beta, p.convention);
    let mut results = serde_json::Map::new();

    // In `compare` mode one step stands for one reset period of the reference bath.
    let (diffusion, steps, step_time) = match p.mode.as_str() {
        "density" | "sampled" => {
            let d = match p.target_rate {
                Some(r) if r > 0.0 => diffusion_for_rate(r),
                Some(r) => {
                    return Err(config_error(format!(
                        "target_rate must be positive, got {r}"
                    )))
                }
                None => p.diffusion,
            };
            (d, p.steps, p.dt)
        }
        "compare" => {
            let cfg = ThermostatConfig {
                n_levels: p.n_levels,
                hbar_omega: p.hbar_omega,
                c: p.c,
                beta: p.beta,
                t_reset: p.t_reset,
                n_traj: p.n_traj,
                run_length: p.run_length,
                system_start: p.system_start,
                cavity_start: CavityStart::Thermal,
                record_energy: false,
            };
            cfg.validate()?;
            let reference = ensemble_relaxation(&cfg, p.seed)?;
            out.csv("ref_ensemble.csv", |w| write_ensemble_csv(w, &reference))?;
            let per_step = reference.fit.rate * p.t_reset;
            if per_step.is_nan() || per_step <= 0.0 {
                return Err(CliError::Numeric(qtrans_core::Error::Fit(
                    "reference ensemble shows no relaxation".into(),
                )));
            }
            results.insert("reference_rate".into(), num(reference.fit.rate));
            (diffusion_for_rate(per_step), p.run_length, p.t_reset)
        }
        m => {
            return Err(config_error(format!(
                "mode must be `density`, `sampled` or `compare`, got `{m}`"
            )))
        }
    };
    let wp = oscillator_propagator(
        ctx,
        p.n_levels,
        p.hbar_omega,
        diffusion,
        p.dt,
        p.quadrature_order,
        lambda,
    )?;
    let start = Wavefunction::basis(p.n_levels, p.system_start);
    let pops = if p.mode == "sampled" {
        sample_trajectory(&wp, &start, steps, &mut trajectory_rng(p.seed, 0))?
    } else {
        evolve_populations(&wp, &DensityMatrix::pure(&start), steps)?
    };
    out.csv("wt_traj.csv", |w| write_population_csv(w, step_time, &pops))?;

    let t: Vec<f64> = (0..pops.len()).map(|k| k as f64).collect();
    let p0: Vec<f64> = pops.iter().map(|v| v[0]).collect();
    results.insert("lambda".into(), num(lambda));
    results.insert("diffusion".into(), num(diffusion));
    results.insert("rate_law".into(), num(RATE_PER_DIFFUSION));
    match fit_exponential(&t, &p0, None) {
        Ok(fit) => {
            results.insert("rate_per_step".into(), num(fit.rate));
            results.insert("rate_per_diffusion".into(), num(fit.rate / diffusion));
            results.insert("asymptote".into(), num(fit.asymptote));
        }
        Err(e) => {
            results.insert("fit_error".into(), json!(e.to_string()));
        }
    }
    results.insert("final_populations".into(), json!(pops.last()));
    out.summary("wt_traj.json", Value::Object(results))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    pub n_levels: usize,
    pub hbar_omega: f64,
    pub dt: f64,
    pub quadrature_order: usize,
    pub lambdas: Vec<f64>,
    pub diffusions: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Slope windows: `lambda <= small_lambda_max` and `lambda >= large_lambda_min`.
    pub small_lambda_max: f64,
    pub large_lambda_min: f64,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            n_levels: 10,
            hbar_omega: 1.0,
            dt: 1.0,
            quadrature_order: 20,
            lambdas: vec![
                0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0,
            ],
            diffusions: vec![1e-3],
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            small_lambda_max: 0.3,
            large_lambda_min: 3.0,
        }
    }
}

fn window_slope(points: &[(f64, f64)], keep: impl Fn(f64) -> bool) -> Value {
    let (x, y): (Vec<f64>, Vec<f64>) = points.iter().copied().filter(|(l, _)| keep(*l)).unzip();
    linear_regression(&x, &y).map_or(Value::Null, |f| num(f.slope))
}

pub fn stationary_scan(raw: RawConfig, ctx: &Context) -> Result<Output, CliError> {
    let p: ScanParams = ctx.params(raw, false)?;
    let config = ScanConfig {
        hamiltonian: harmonic_hamiltonian(p.n_levels, p.hbar_omega),
        kick_operator: position_operator(p.n_levels, 1.0, p.hbar_omega, 1.0),
        dt: p.dt,
        quadrature_order: p.quadrature_order,
        lambdas: p.lambdas.clone(),
        diffusions: p.diffusions.clone(),
        tol: p.tol,
        max_iter: p.max_iter,
    };
    let points = scan_points(&config)?;
    if points.iter().all(|pt| pt.row.is_err()) {
        let first = points.into_iter().find_map(|pt| pt.row.err());
        return Err(first.map_or_else(|| config_error("empty scan"), CliError::from));
    }
    let mut out = Output::new(&ctx.out, "stationary-scan", &p)?;
    out.csv("stationary_scan.csv", |w| {
        writeln!(w, "{}", qtrans_core::stationary::SCAN_CSV_HEADER)?;
        for pt in &points {
            match &pt.row {
                Ok(r) => writeln!(
                    w,
                    "{},{},{:.12e},{:.12e},{:.12e},{},{}",
                    r.lambda,
                    r.diffusion,
                    r.log_p1_p0,
                    r.log_p2_p0,
                    r.offdiag_mag,
                    r.iterations,
                    r.converged
                )?,
                Err(e) => {
                    writeln!(
                        w,
                        "# failed at lambda={} D={}: {e}",
                        pt.lambda, pt.diffusion
                    )?;
                    writeln!(w, "{},{},NaN,NaN,NaN,0,false", pt.lambda, pt.diffusion)?;
                }
            }
        }
        Ok(())
    })?;
    let per_d: Vec<Value> = p
        .diffusions
        .iter()
        .map(|&d| {
            let rows: Vec<_> = points
                .iter()
                .filter(|pt| pt.diffusion == d)
                .filter_map(|pt| pt.row.as_ref().ok())
                .collect();
            let curve: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda, r.log_p1_p0)).collect();
            let peak = rows
                .iter()
                .max_by(|a, b| a.offdiag_mag.total_cmp(&b.offdiag_mag))
                .map(|r| json!({"lambda": r.lambda, "offdiag_mag": num(r.offdiag_mag)}));
            json!({
                "diffusion": d,
                "small_lambda_slope": window_slope(&curve, |l| l <= p.small_lambda_max),
                "large_lambda_slope": window_slope(&curve, |l| l >= p.large_lambda_min),
                "offdiag_peak": peak,
                "unconverged": rows.iter().filter(|r| !r.converged).count(),
            })
        })
        .collect();
    let failed = points.iter().filter(|pt| pt.row.is_err()).count();
    out.summary(
        "stationary_scan.json",
        json!({"per_diffusion": per_d, "failed_points": failed}),
    )?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluxParams {
    pub n_levels: usize,
    pub hbar_omega: f64,
    pub diffusion: f64,
    pub dt: f64,
    pub quadrature_order: usize,
    /// Each point uses the state `exp(-lambda H) / Z` weighted at the same `lambda`.
    pub lambdas: Vec<f64>,
}

impl Default for FluxParams {
    fn default() -> Self {
        Self {
            n_levels: 10,
            hbar_omega: 1.0,
            diffusion: 1e-3,
            dt: 1.0,
            quadrature_order: 20,
            lambdas: vec![0.1, 0.25, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

pub fn flux(raw: RawConfig, ctx: &Context) -> Result<Output, CliError> {
    let p: FluxParams = ctx.params(raw, false)?;
    let h = harmonic_hamiltonian(p.n_levels, p.hbar_omega);
    let mut rows = Vec::new();
    let mut totals = Vec::new();
    for &lambda in &p.lambdas {
        let wp = oscillator_propagator(
            ctx,
            p.n_levels,
            p.hbar_omega,
            p.diffusion,
            p.dt,
            p.quadrature_order,
            lambda,
        )?;
        let rho = DensityMatrix::thermal(&h, lambda)?;
        let fc = flux_cumulants(&wp, &rho)?;
        let mut states: Vec<(f64, f64, f64, f64)> = fc
            .states
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let v = fc.basis.vector(j);
                let e = qtrans_core::state::expectation(h.matrix(), &v).re;
                (e, s.probability, s.k1, s.k2)
            })
            .collect();
        states.sort_by(|a, b| a.0.total_cmp(&b.0));
        rows.push((lambda, states));
        totals.push(
            json!({"lambda": lambda, "k1_total": num(fc.k1_total), "k2_total": num(fc.k2_total)}),
        );
    }
    let mut out = Output::new(&ctx.out, "flux", &p)?;
    out.csv("flux.csv", |w| {
        writeln!(w, "lambda,level,energy,probability,k1,k2")?;
        for (lambda, states) in &rows {
            for (level, (e, pr, k1, k2)) in states.iter().enumerate() {
                writeln!(w, "{lambda},{level},{e:.12e},{pr:.12e},{k1:.12e},{k2:.12e}")?;
            }
        }
        Ok(())
    })?;
    out.summary("flux.json", json!({"totals": totals}))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinParams {
    pub beta: f64,
    pub energy: f64,
    pub diffusion: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub order: usize,
    /// `x`, `isotropic` or `both`.
    pub start: String,
}

impl Default for SpinParams {
    fn default() -> Self {
        let c = CollapseConfig::default();
        Self {
            beta: c.beta,
            energy: c.energy,
            diffusion: c.diffusion,
            dt: c.dt,
            n_steps: c.n_steps,
            order: c.order,
            start: "both".into(),
        }
    }
}

pub fn spin_collapse(raw: RawConfig, ctx: &Context) -> Result<Output, CliError> {
    let p: SpinParams = ctx.params(raw, false)?;
    let starts: Vec<(&str, BlochState)> = match p.start.as_str() {
        "x" => vec![("x", BlochState::x_superposition())],
        "isotropic" => vec![("isotropic", BlochState::isotropic())],
        "both" => vec![
            ("x", BlochState::x_superposition()),
            ("isotropic", BlochState::isotropic()),
        ],
        s => {
            return Err(config_error(format!(
                "start must be `x`, `isotropic` or `both`, got `{s}`"
            )))
        }
    };
    let mut out = Output::new(&ctx.out, "spin-collapse", &p)?;
    let mut runs = Vec::new();
    for (name, start) in &starts {
        for (tag, convention) in [
            ("equal", BetaConvention::Equal),
            ("half", BetaConvention::Half),
        ] {
            let cfg = CollapseConfig {
                beta: p.beta,
                energy: p.energy,
                diffusion: p.diffusion,
                dt: p.dt,
                n_steps: p.n_steps,
                order: p.order,
                convention,
            };
            let ledgers = collapse_timecourse(start, &cfg)?;
            out.csv(&format!("spin_collapse_{name}_{tag}.csv"), |w| {
                write_collapse_csv(w, p.dt, &ledgers)
            })?;
            let heat: Vec<f64> = ledgers.iter().map(|l| l.heat).collect();
            let crossover = heat
                .windows(2)
                .position(|w| w[0].signum() != w[1].signum() && w[0] != 0.0)
                .map(|k| k + 2);
            runs.push(json!({
                "start": name,
                "convention": tag,
                "first_dQ": heat.first().copied().map(num),
                "first_sign_change_step": crossover,
                "min_dS_tot": num(ledgers.iter().map(|l| l.total_entropy).fold(f64::INFINITY, f64::min)),
                "support_violations": ledgers.iter().filter(|l| l.support_violation).count(),
            }));
        }
    }
    out.summary("spin_collapse.json", json!({"runs": runs}))?;
    Ok(out)
}

pub fn cl_check(raw: RawConfig, ctx: &Context) -> Result<(Output, String), CliError> {
    let p: LimitConfig = ctx.params(raw, true)?;
    let report = limit_check(&p)?;
    let mut out = Output::new(&ctx.out, "cl-check", &p)?;
    out.csv("cl_check.csv", |w| write_limit_csv(w, &report))?;
    let norms: Vec<Value> = report
        .term_norms
        .iter()
        .map(|(name, n)| {
            json!({"state": name, "unitary": num(n[0]), "dissipation": num(n[1]), "decoherence": num(n[2]), "total": num(n[3])})
        })
        .collect();
    out.summary(
        "cl_check.json",
        json!({
            "gamma": num(report.gamma),
            "beta": num(report.beta),
            "monotone": report.monotone(),
            "min_order": report.min_order().map(num),
            "term_norms": norms,
        }),
    )?;
    let mut text = String::new();
    text.push_str(&format!(
        "gamma = {:.6e}, beta = {:.6e}; weighting lambda = {} (lambda = beta), low-temperature stationary regime lambda = beta/2 = {}\n",
        report.gamma,
        report.beta,
        p.lambda,
        report.beta / 2.0
    ));
    text.push_str("state       |unitary|     |dissipation| |decoherence| |total|\n");
    for (name, n) in &report.term_norms {
        text.push_str(&format!(
            "{name:<11} {:.4e}  {:.4e}    {:.4e}    {:.4e}\n",
            n[0], n[1], n[2], n[3]
        ));
    }
    text.push_str("dt          max_discrepancy  order\n");
    for r in &report.rows {
        let order = r
            .order_estimate
            .map_or("-".to_string(), |o| format!("{o:.3}"));
        text.push_str(&format!(
            "{:<11} {:.4e}       {order}\n",
            r.dt, r.max_discrepancy
        ));
    }
    Ok((out, text))
}

pub fn written_list(out: &Output) -> String {
    out.written()
        .iter()
        .map(|p: &PathBuf| p.display().to_string())
        .collect::<Vec<_>>()
        .join("\n")
}
