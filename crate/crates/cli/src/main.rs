mod config;
mod table;

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spinsde::ed::{direct_norm_variance, ed_observables, KrylovOptions};
use spinsde::lattice::NoiseTransform;
use spinsde::observables::{LoschmidtKind, ObservableFn, SiteSel};
use spinsde::saddle::{mean_field_sp, recursive_sp, sp_endtime_scan, SpAction};
use spinsde::sampling::{loschmidt_rate, record_grid, run_ensemble, variance_fit, EnsembleRequest, SamplingMode};

use config::{InitialState, Resolved, RunConfig};
use table::Table;

const LOCAL_COLUMNS: [&str; 8] = ["t", "re", "im", "stderr", "stderr_im", "stderr_batch", "sigma_f2", "n_valid"];
const RATE_COLUMNS: [&str; 7] = ["t", "rate", "stderr", "probability", "probability_stderr", "rate_dd", "rate_ud"];

#[derive(Parser)]
#[command(name = "spinsde", version, about = "Stochastic spin dynamics with saddle-point importance sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config, or a CSV written by a previous run.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `sampling.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, env = "SPINSDE_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the configured observables and write one CSV per observable.
    Simulate(RunArgs),
    /// Export the saddle-point field, or scan it over `saddle.end_times`.
    Saddle(RunArgs),
    /// Exact-diagonalization reference in the same CSV layout as `simulate`.
    Oracle(RunArgs),
    /// Per-time z-scores between two CSV files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Value column; defaults to `re` or `rate`.
        #[arg(long)]
        column: Option<String>,
        #[arg(long, default_value_t = 3.0)]
        threshold: f64,
        /// Only compare times up to this value.
        #[arg(long)]
        t_max: Option<f64>,
    },
    /// Fit σ² ≈ α e^{βNt} to the `sigma_f2` column of a CSV.
    VarianceFit {
        file: PathBuf,
        #[arg(long)]
        from: Option<f64>,
        #[arg(long)]
        to: Option<f64>,
        /// Site count; read from the embedded config when omitted.
        #[arg(long)]
        sites: Option<usize>,
        /// Also fit the exact direct-sampling variance of the embedded model.
        #[arg(long)]
        exact: bool,
    },
}

/// A run that finished but whose statistics cannot be trusted.
#[derive(Debug)]
struct Unreliable(String);

impl std::fmt::Display for Unreliable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "unreliable run: {}", self.0)
    }
}

impl Error for Unreliable {}

type Res<T> = Result<T, Box<dyn Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => with_config(&a, simulate),
        Command::Saddle(a) => with_config(&a, saddle),
        Command::Oracle(a) => with_config(&a, oracle),
        Command::Compare { a, b, column, threshold, t_max } => compare(&a, &b, column.as_deref(), threshold, t_max),
        Command::VarianceFit { file, from, to, sites, exact } => fit(&file, from, to, sites, exact),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Unreliable>() => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

struct Job {
    config: RunConfig,
    resolved: Resolved,
    dir: PathBuf,
    embedded: String,
}

impl Job {
    fn path(&self, stem: &str) -> PathBuf {
        self.dir.join(format!("{}_{stem}.csv", self.config.prefix()))
    }

    fn write(&self, stem: &str, table: &Table) -> Res<()> {
        let path = self.path(stem);
        table.write(&path, &self.embedded)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn write_raw(&self, stem: &str, meta: &[(&str, String)], body: &str) -> Res<()> {
        let path = self.path(stem);
        let mut text: String = meta.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect();
        text.push_str(&self.embedded);
        text.push_str(body);
        fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn with_config(args: &RunArgs, run: fn(&Job) -> Res<()>) -> Res<()> {
    let text = fs::read_to_string(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let mut config = RunConfig::from_text(&text)?;
    if let Some(seed) = args.seed {
        config.sampling.seed = seed;
    }
    let mut resolved = config.resolve()?;
    if let Some(w) = args.workers {
        if w == 0 {
            return Err("--workers must be positive".into());
        }
        resolved.plan = resolved.plan.with_workers(w);
    }
    let dir = args.out.clone().or_else(|| config.output_dir()).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let embedded = config.embedded();
    run(&Job { config, resolved, dir, embedded })
}

fn simulate(job: &Job) -> Res<()> {
    match job.resolved.initial {
        InitialState::Down => simulate_down(job),
        InitialState::FmSuperposition => simulate_rate(job),
    }
}

fn simulate_down(job: &Job) -> Res<()> {
    let r = &job.resolved;
    let transform = NoiseTransform::new(&r.model)?;
    let n = r.integrator.steps_for(r.t_max)?;
    let shift = match r.plan.mode {
        SamplingMode::Direct => None,
        SamplingMode::Importance => Some(match r.action {
            SpAction::Normalization => mean_field_sp(&r.model, r.t_max, r.integrator.dt)?,
            action => {
                let (field, entry) = recursive_sp(&r.model, action, r.t_max, &r.sp_options, None)?;
                if !entry.converged {
                    eprintln!("warning: saddle point for {action} did not converge (residual {:.2e})", entry.residual);
                }
                field
            }
        }),
    };
    let run = run_ensemble(&EnsembleRequest {
        model: &r.model,
        transform: &transform,
        integrator: &r.integrator,
        observables: &r.observables,
        plan: &r.plan,
        t_max: r.t_max,
        record_steps: record_grid(n, r.record_every),
        shift: shift.as_ref(),
    })?;
    for est in &run.estimates {
        let mut t = Table::new(&LOCAL_COLUMNS);
        t.meta("observable", est.observable);
        t.meta("mode", run.mode);
        t.meta("scheme", run.scheme.name());
        t.meta("n_traj", run.n_traj);
        t.meta("invalid", run.invalid);
        t.meta("chart_switches", run.chart_switches);
        t.meta("unreliable", run.unreliable);
        for (k, p) in est.points.iter().enumerate() {
            t.push(vec![
                run.times[k],
                p.mean.re,
                p.mean.im,
                p.stderr_re,
                p.stderr_im,
                p.stderr_batch,
                run.sigma_f2[k],
                p.n_valid as f64,
            ]);
        }
        job.write(&est.observable.name().replace(':', "-"), &t)?;
    }
    if run.unreliable {
        return Err(Unreliable(format!("{} of {} trajectories diverged", run.invalid, run.n_traj)).into());
    }
    Ok(())
}

fn simulate_rate(job: &Job) -> Res<()> {
    let r = &job.resolved;
    let transform = NoiseTransform::new(&r.model)?;
    let points = loschmidt_rate(&r.model, &transform, &r.integrator, &r.plan, &r.end_times, &r.sp_options)?;
    let n = r.model.n_sites() as f64;
    let mut t = Table::new(&RATE_COLUMNS);
    t.meta("observable", "rate");
    t.meta("mode", r.plan.mode);
    t.meta("scheme", r.integrator.scheme.name());
    t.meta("n_traj", r.plan.n_traj);
    let mut bad = Vec::new();
    for p in &points {
        let rate_of = |a: spinsde::C64| -(a.norm_sqr()).ln() / n;
        t.push(vec![
            p.time,
            p.rate.rate,
            p.rate.rate_stderr,
            p.rate.probability,
            p.rate.probability_stderr,
            rate_of(p.dd.mean),
            rate_of(p.ud.mean),
        ]);
        if p.unreliable || !p.rate.reliable {
            bad.push(p.time);
        }
    }
    t.meta("unreliable_times", format!("{bad:?}"));
    job.write("rate", &t)?;
    if !bad.is_empty() {
        return Err(Unreliable(format!("rate estimate unreliable at t = {bad:?}")).into());
    }
    Ok(())
}

fn saddle(job: &Job) -> Res<()> {
    let r = &job.resolved;
    let meta = [("action", r.action.to_string()), ("dt", r.sp_options.dt.to_string())];
    if r.end_times.is_empty() {
        let (field, entry) = recursive_sp(&r.model, r.action, r.t_max, &r.sp_options, None)?;
        let mut meta = meta.to_vec();
        meta.push(("iterations", entry.iterations.to_string()));
        meta.push(("converged", entry.converged.to_string()));
        meta.push(("residual", entry.residual.to_string()));
        job.write_raw("sp_field", &meta, &field.to_csv())?;
        if !entry.converged {
            return Err(Unreliable(format!("saddle point did not converge (residual {:.2e})", entry.residual)).into());
        }
        return Ok(());
    }
    let scan = sp_endtime_scan(&r.model, r.action, &r.end_times, &r.sp_options, r.warm_start)?;
    job.write_raw("sp_fields", &meta, &scan.fields_csv())?;
    job.write_raw("sp_trace", &meta, &scan.trace.to_csv())?;
    let failed = scan.trace.entries.iter().filter(|e| !e.converged).count();
    if failed > 0 {
        // non-convergence near a dynamical transition is a result, not an error
        println!("{failed} of {} end times did not converge", scan.trace.entries.len());
    }
    Ok(())
}

fn oracle(job: &Job) -> Res<()> {
    let r = &job.resolved;
    let opts = KrylovOptions::default();
    if r.initial == InitialState::FmSuperposition {
        let mut times = vec![0.0];
        times.extend(&r.end_times);
        let ed = ed_observables(&r.model, &times, &opts)?;
        let mut t = Table::new(&RATE_COLUMNS);
        t.meta("observable", "rate");
        t.meta("mode", "exact");
        for k in 1..times.len() {
            let p = ed.a_dd[k].norm_sqr() + ed.a_ud[k].norm_sqr();
            t.push(vec![times[k], ed.rate[k], 0.0, p, 0.0, ed.rate_dd[k], ed.rate_ud[k]]);
        }
        return job.write("rate_ed", &t);
    }
    let n = r.integrator.steps_for(r.t_max)?;
    let times: Vec<f64> = record_grid(n, r.record_every).iter().map(|&k| k as f64 * r.integrator.dt).collect();
    let ed = ed_observables(&r.model, &times, &opts)?;
    for &o in &r.observables {
        let values: Vec<spinsde::C64> = match o {
            ObservableFn::Norm => vec![spinsde::C64::new(1.0, 0.0); times.len()],
            ObservableFn::MagnetizationZ(sel) => {
                uniform_only(job, sel)?;
                ed.mz.iter().map(|&v| v.into()).collect()
            }
            ObservableFn::MagnetizationX(sel) => {
                uniform_only(job, sel)?;
                ed.mx.iter().map(|&v| v.into()).collect()
            }
            ObservableFn::Loschmidt(LoschmidtKind::Dd) => ed.a_dd.clone(),
            ObservableFn::Loschmidt(LoschmidtKind::Ud) => ed.a_ud.clone(),
        };
        let mut t = Table::new(&LOCAL_COLUMNS);
        t.meta("observable", o);
        t.meta("mode", "exact");
        for (k, v) in values.iter().enumerate() {
            t.push(vec![times[k], v.re, v.im, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        job.write(&format!("{}_ed", o.name().replace(':', "-")), &t)?;
    }
    Ok(())
}

/// The exact reference only tracks lattice averages, which equal single-site
/// values when every site is equivalent.
fn uniform_only(job: &Job, sel: SiteSel) -> Res<()> {
    match sel {
        SiteSel::Site(_) if !job.resolved.model.is_uniform() => {
            Err("site-resolved exact magnetizations need a translation-invariant model".into())
        }
        _ => Ok(()),
    }
}

fn compare(a: &Path, b: &Path, column: Option<&str>, threshold: f64, t_max: Option<f64>) -> Res<()> {
    let ta = Table::read(a)?;
    let tb = Table::read(b)?;
    let column = match column {
        Some(c) => c.to_string(),
        None => ["re", "rate"]
            .into_iter()
            .find(|c| ta.columns.iter().any(|x| x == c))
            .ok_or("no default value column; pass --column")?
            .to_string(),
    };
    let grab = |t: &Table, path: &Path, name: &str| {
        t.column(name).ok_or_else(|| format!("{}: no column '{name}'", path.display()))
    };
    let (times_a, times_b) = (grab(&ta, a, "t")?, grab(&tb, b, "t")?);
    let keep: Vec<usize> = (0..times_a.len()).filter(|&k| t_max.is_none_or(|m| times_a[k] <= m + 1e-12)).collect();
    if keep.len() > times_b.len() || keep.iter().any(|&k| (times_a[k] - times_b[k]).abs() > 1e-9) {
        return Err(format!("time grids of {} and {} differ", a.display(), b.display()).into());
    }
    let (va, vb) = (grab(&ta, a, &column)?, grab(&tb, b, &column)?);
    let zeros = vec![0.0; times_a.len().max(times_b.len())];
    let ea = ta.column("stderr").unwrap_or_else(|| zeros.clone());
    let eb = tb.column("stderr").unwrap_or(zeros);
    println!("t,{column}_a,{column}_b,z");
    let mut worst = (0.0f64, f64::NAN, 0.0f64);
    for &k in &keep {
        let dev = (va[k] - vb[k]).abs();
        let err = (ea[k] * ea[k] + eb[k] * eb[k]).sqrt();
        let z = if err > 0.0 { dev / err } else if dev <= 1e-12 { 0.0 } else { f64::INFINITY };
        println!("{},{},{},{z:.3}", times_a[k], va[k], vb[k]);
        if !(z <= worst.0) {
            worst = (z, times_a[k], dev);
        }
    }
    let pass = worst.0 <= threshold;
    println!(
        "# max z = {:.3} at t = {} (|deviation| = {:.3e}); threshold {threshold}: {}",
        worst.0,
        worst.1,
        worst.2,
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(format!("max z-score {:.3} exceeds {threshold}", worst.0).into())
    }
}

fn fit(file: &Path, from: Option<f64>, to: Option<f64>, sites: Option<usize>, exact: bool) -> Res<()> {
    let t = Table::read(file)?;
    let times = t.column("t").ok_or("no column 't'")?;
    let var = t.column("sigma_f2").ok_or("no column 'sigma_f2'")?;
    let embedded = || -> Res<Resolved> {
        let text = fs::read_to_string(file)?;
        Ok(RunConfig::from_text(&text)?.resolve()?)
    };
    let n_sites = match sites {
        Some(n) => n,
        None => embedded().map_err(|e| format!("site count: {e}; pass --sites"))?.model.n_sites(),
    };
    let window = (from.unwrap_or(0.0), to.unwrap_or(f64::INFINITY));
    let f = variance_fit(&times, &var, n_sites, window)?;
    println!("sampled: alpha = {:.4e} beta = {:.4} ({} points)", f.alpha, f.beta, f.points_used);
    if exact {
        let model = embedded()?.model;
        let v = direct_norm_variance(&model, &times)?;
        let e = variance_fit(&times, &v, n_sites, window)?;
        println!("exact direct: alpha = {:.4e} beta = {:.4} ({} points)", e.alpha, e.beta, e.points_used);
    }
    Ok(())
}
