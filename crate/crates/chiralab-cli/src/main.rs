//! `chiralab` command line runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use chiralab::acceptance::{run_acceptance, TolScale};
use chiralab::continuum::{h_g_table, solve_profile_report, Constraint, HgOptions, ProfileProblem, SolveOptions};
use chiralab::energies::{breakdown, ModelParams};
use chiralab::geometry::{e3, rotation_between, Boundary, SpinChain, Vec3};
use chiralab::io::{parse_chain, write_chain, write_profile};
use chiralab::minimize::{ground_pins, minimize_chain, mode_energy, MinimizeOptions, Mode};
use chiralab::penalty::PenaltySpec;
use chiralab::profiles::{
    ground_helix, oscillating_chain, oscillating_params, sample_model, soft_profile, switched_model,
    tanh_profile_h, zero_cost_profile, SpeedFn, DEFAULT_H, DEFAULT_T_SPAN,
};
use chiralab::sweep::{run_sweep, SweepConfig};

#[derive(Parser, Debug)]
#[command(name = "chiralab", version, about = "Frustrated spin chains: energies, minimizers, profiles and sweeps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Evaluate the energies of a chain file.
    Energy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minimize a chain file and write the minimizer.
    Minimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve a continuum transition problem and write the profile.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate h_G over all pairs of chirality values.
    Hgtable {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a regime sweep; exits with 2 when a run did not converge.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_path` of the config; stdout when neither is set.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Replace the seed list of the config by this single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the acceptance suite.
    Accept {
        #[arg(long)]
        only: Option<u8>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an analytic profile or chain.
    Emit {
        kind: EmitKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EmitKind {
    TanhProfile,
    SoftProfile,
    ZeroCostProfile,
    TanhChain,
    HelixChain,
    OscillatingChain,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Default)]
#[serde(rename_all = "lowercase")]
enum ModeName {
    #[default]
    Free,
    Soft,
    Hard,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Pen {
    axes: Vec<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PinPair {
    left: [f64; 3],
    right: [f64; 3],
}

/// Shared by `energy` and `minimize`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainJob {
    chain: PathBuf,
    lambda: f64,
    delta: f64,
    #[serde(default)]
    mu: f64,
    #[serde(default)]
    mode: ModeName,
    pen: Option<Pen>,
    pins: Option<PinPair>,
    #[serde(default = "default_iters")]
    max_iters: usize,
    #[serde(default = "default_grad_tol")]
    grad_tol: f64,
}

fn default_iters() -> usize {
    20_000
}

fn default_grad_tol() -> f64 {
    1e-6
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileJob {
    q_minus: [f64; 3],
    q_plus: [f64; 3],
    #[serde(default)]
    constraint: ModeName,
    pen: Option<Pen>,
    #[serde(default = "default_span")]
    t_span: f64,
    #[serde(default = "default_step")]
    h: f64,
    #[serde(default = "default_profile_iters")]
    max_iters: usize,
    seeds: Option<Vec<u64>>,
}

fn default_span() -> f64 {
    20.0
}

fn default_step() -> f64 {
    5e-3
}

fn default_profile_iters() -> usize {
    SolveOptions::default().max_iters
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableJob {
    pen: Pen,
    #[serde(default = "default_span")]
    t_span: f64,
    #[serde(default = "default_step")]
    h: f64,
    #[serde(default = "default_profile_iters")]
    max_iters: usize,
    seeds: Option<Vec<u64>>,
    #[serde(default = "default_asym")]
    asym_tol: f64,
}

fn default_asym() -> f64 {
    0.02
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct EmitJob {
    q_minus: Option<[f64; 3]>,
    q_plus: Option<[f64; 3]>,
    t_span: Option<f64>,
    h: Option<f64>,
    epsilon: Option<f64>,
    rho: Option<f64>,
    margin: Option<f64>,
    lambda: Option<f64>,
    delta: Option<f64>,
    eta: Option<f64>,
    axis: Option<[f64; 3]>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("config {}", path.display()))
}

fn unit(v: [f64; 3], what: &str) -> anyhow::Result<Vec3> {
    let v = Vec3::from(v);
    if !(v.norm() > 1e-12) {
        bail!("{what} must be nonzero");
    }
    Ok(v.normalize())
}

fn penalty(pen: Option<&Pen>) -> anyhow::Result<Option<PenaltySpec>> {
    pen.map(|p| {
        let axes = p.axes.iter().map(|a| unit(*a, "pen.axes entry")).collect::<anyhow::Result<Vec<_>>>()?;
        Ok(PenaltySpec::dist_to_qk(axes)?)
    })
    .transpose()
}

fn mode_for(name: ModeName, pen: Option<PenaltySpec>) -> anyhow::Result<Mode> {
    Ok(match (name, pen) {
        (ModeName::Free, _) => Mode::Free,
        (ModeName::Soft, Some(p)) => Mode::SoftG(p),
        (ModeName::Hard, Some(p)) => Mode::HardMk(p),
        (m, None) => bail!("mode {m:?} needs pen.axes"),
    })
}

/// Write only after everything succeeded, so a failed run leaves no file behind.
fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_chain_job(config: &Path) -> anyhow::Result<(ChainJob, SpinChain, ModelParams, Mode)> {
    let job: ChainJob = read_toml(config)?;
    let params = ModelParams::new(job.lambda, job.delta)?.with_mu(job.mu)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let path = base.join(&job.chain);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let spins = parse_chain(&text).with_context(|| format!("chain {}", path.display()))?;
    let chain = SpinChain::new(spins, job.lambda, Boundary::Free)?;
    let mode = mode_for(job.mode, penalty(job.pen.as_ref())?)?;
    Ok((job, chain, params, mode))
}

fn energy(config: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (_, chain, params, mode) = load_chain_job(config)?;
    let pen = match &mode {
        Mode::SoftG(p) | Mode::HardMk(p) => Some(p),
        Mode::Free => None,
    };
    if let Mode::HardMk(p) = &mode {
        chiralab::energies::eval_hhard(&chain, &params, p)?;
    }
    let b = breakdown(&chain, &params, pen)?;
    let scaled = mode_energy(&chain, &params, &mode) / params.energy_scale();
    let text = format!("mode={}\nmode_energy_scaled={scaled:.17e}\n{}", mode.name(), b.to_record());
    emit(out, &text)
}

fn minimize(config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let (job, chain, params, mode) = load_chain_job(config)?;
    let pin = match &job.pins {
        Some(p) => Some(ground_pins(&unit(p.left, "pins.left")?, &unit(p.right, "pins.right")?, params.delta)),
        None => None,
    };
    let opts = MinimizeOptions {
        max_iters: job.max_iters,
        grad_tol: job.grad_tol,
        mode,
        pin,
        seed: seed.unwrap_or(0),
        ..Default::default()
    };
    let (m, rep) = minimize_chain(&chain, &params, &opts)?;
    emit(Some(out), &write_chain(m.spins()))?;
    eprintln!(
        "scaled_energy={:.12} iterations={} converged={} grad_norm={:.3e}",
        rep.scaled_energy, rep.iterations, rep.converged, rep.grad_norm
    );
    Ok(())
}

fn solve_options(max_iters: usize, seeds: Option<Vec<u64>>, seed: Option<u64>) -> SolveOptions {
    let mut o = SolveOptions { max_iters, ..Default::default() };
    if let Some(s) = seeds {
        o.seeds = s;
    }
    if let Some(s) = seed {
        o.seeds = vec![s];
    }
    o
}

fn profile(config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let job: ProfileJob = read_toml(config)?;
    let (qm, qp) = (unit(job.q_minus, "q_minus")?, unit(job.q_plus, "q_plus")?);
    let prob = match job.constraint {
        ModeName::Free => ProfileProblem::new(qm, qp, Constraint::FreeS2),
        ModeName::Hard => ProfileProblem::new(qm, qp, Constraint::HardMk),
        ModeName::Soft => match penalty(job.pen.as_ref())? {
            Some(p) => ProfileProblem::soft(qm, qp, p),
            None => bail!("constraint \"soft\" needs pen.axes"),
        },
    }
    .with_grid(job.t_span, job.h);
    prob.validate()?;
    let (p, rep) = solve_profile_report(&prob, &solve_options(job.max_iters, job.seeds, seed))?;
    emit(Some(out), &write_profile(&p))?;
    eprintln!(
        "energy={:.12} certificate={:.12} seed={:?} converged={} constraint_residual={:.3e}",
        rep.energy, rep.certificate, rep.seed, rep.converged, rep.constraint_residual
    );
    Ok(())
}

fn hgtable(config: &Path, out: &Path, threads: usize, seed: Option<u64>) -> anyhow::Result<()> {
    let job: TableJob = read_toml(config)?;
    let pen = penalty(Some(&job.pen))?.expect("present");
    let opts = HgOptions { t_span: job.t_span, h: job.h, solve: solve_options(job.max_iters, job.seeds, seed), asym_tol: job.asym_tol };
    let table = chiralab::with_threads(threads, || h_g_table(&pen, &opts))??;
    for (i, j, r) in table.asymmetric_pairs() {
        eprintln!("asymmetric pair ({i}, {j}): relative difference {r:.3e}");
    }
    emit(Some(out), &table.to_csv())
}

fn sweep(config: &Path, out: Option<&Path>, threads: usize, seed: Option<u64>) -> anyhow::Result<bool> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = SweepConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let target = out.map(Path::to_path_buf).or_else(|| cfg.output_path.as_ref().map(PathBuf::from));
    let result = run_sweep(&cfg, threads)?;
    emit(target.as_deref(), &result.to_csv()?)?;
    Ok(result.all_converged())
}

fn accept(only: Option<u8>, out: Option<&Path>) -> anyhow::Result<bool> {
    let scale = TolScale::from_env()?;
    let outcomes = run_acceptance(only, &scale)?;
    let mut report = String::new();
    for o in &outcomes {
        println!("{o}");
        report.push_str(&format!("{o}\n"));
    }
    if let Some(p) = out {
        emit(Some(p), &report)?;
    }
    Ok(outcomes.iter().all(|o| o.passed))
}

fn emit_cmd(kind: EmitKind, config: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let job: EmitJob = match config {
        Some(c) => read_toml(c)?,
        None => EmitJob::default(),
    };
    let qm = unit(job.q_minus.unwrap_or([0.0, 0.0, 1.0]), "q_minus")?;
    let qp_default = match kind {
        EmitKind::ZeroCostProfile | EmitKind::SoftProfile => [0.0, 1.0, 0.0],
        _ => [0.0, 0.0, -1.0],
    };
    let qp = unit(job.q_plus.unwrap_or(qp_default), "q_plus")?;
    let delta = job.delta.unwrap_or(1e-3);
    let lambda = job.lambda.unwrap_or(0.05 * delta.sqrt());
    let text = match kind {
        EmitKind::TanhProfile => write_profile(&tanh_profile_h(&qm, &qp, job.t_span.unwrap_or(DEFAULT_T_SPAN), job.h.unwrap_or(DEFAULT_H))?),
        EmitKind::SoftProfile => write_profile(&soft_profile(&qm, &qp, job.epsilon.unwrap_or(0.1))?),
        EmitKind::ZeroCostProfile => {
            write_profile(&zero_cost_profile(&qm, &qp, job.rho.unwrap_or(16.0), job.margin.unwrap_or(3.0), job.h.unwrap_or(DEFAULT_H))?)
        }
        EmitKind::TanhChain => {
            let model = switched_model(&qm, &qp, SpeedFn::Tanh)?;
            write_chain(sample_model(&model, lambda, delta, 0.0)?.spins())
        }
        EmitKind::HelixChain => {
            let axis = unit(job.axis.unwrap_or([0.0, 0.0, 1.0]), "axis")?;
            let params = ModelParams::new(lambda, delta)?;
            let h = ground_helix(delta, &rotation_between(&e3(), &axis), params.sites_on_unit_interval(), lambda)?;
            write_chain(h.spins())
        }
        EmitKind::OscillatingChain => {
            let eta = job.eta.unwrap_or(0.2);
            let params = match job.lambda {
                Some(l) => ModelParams::new(l, delta)?,
                None => oscillating_params(eta, delta)?,
            };
            write_chain(oscillating_chain(eta, &params)?.spins())
        }
    };
    emit(Some(out), &text)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Energy { config, out } => energy(&config, out.as_deref())?,
        Cmd::Minimize { config, out, seed } => minimize(&config, &out, seed)?,
        Cmd::Profile { config, out, seed } => profile(&config, &out, seed)?,
        Cmd::Hgtable { config, out, threads, seed } => hgtable(&config, &out, threads, seed)?,
        Cmd::Sweep { config, out, threads, seed } => {
            if !sweep(&config, out.as_deref(), threads, seed)? {
                eprintln!("some sweep runs did not converge");
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Accept { only, out } => {
            if !accept(only, out.as_deref())? {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Emit { kind, config, out } => emit_cmd(kind, config.as_deref(), &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
