// SPDX-License-Identifier: Apache-2.0

//! `hyperspin` command-line driver. Every subcommand reads a config (a TOML
//! file or the built-in `malonic-ref`), writes CSV and pulse files into the
//! output directory and finishes with a `manifest.json` record.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use hyperspin::dynamics::{NoiseModel, ShapedPulse};
use hyperspin::experiments::{
    coherence_pair, double_coherence_readout, double_coherence_scan, eseem_3pulse, fft_peaks, fieldswept,
    predict_frequency, refine_hamiltonian, FrequencyLabel, GateModel, RefineOptions,
};
use hyperspin::grape::{
    cnot_gate, nuclear_gate_target, optimize_with_progress, swap_gate, target_subspace_pi2, GrapeConfig,
};
use hyperspin::hardware::{apply_filter, power_spectrum, predistort};
use hyperspin::io::{
    read_pulse, write_peaks_csv, write_pulse, write_signal_csv, write_summary_csv, write_transitions_csv,
    ExperimentConfig, NucleusSpec,
};
use hyperspin::spin_system::{transition_table, Manifold, SpinSystem};
use hyperspin::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_IO: i32 = 1;

/// Name accepted by `--config` for the built-in malonic acid system.
pub const BUILTIN_CONFIG: &str = "malonic-ref";

#[derive(Debug, Parser)]
#[command(
    name = "hyperspin",
    version,
    about = "Electron-nuclear spin simulations and pulse design"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file, or `malonic-ref`.
    #[arg(long, global = true, default_value = BUILTIN_CONFIG)]
    pub config: String,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the GRAPE seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Points in the static-detuning ensemble (odd).
    #[arg(long, global = true)]
    pub ensemble_points: Option<usize>,
    /// Overrides the inhomogeneous linewidth (FWHM), MHz.
    #[arg(long, global = true)]
    pub linewidth_mhz: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ManifoldArg {
    Up,
    Down,
}

impl From<ManifoldArg> for Manifold {
    fn from(m: ManifoldArg) -> Self {
        match m {
            ManifoldArg::Up => Manifold::Up,
            ManifoldArg::Down => Manifold::Down,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateArg {
    /// Hadamard-type step on the double-coherence pair of `--manifold`.
    Coherence,
    /// Nuclear CNOT, first nucleus controls.
    Cnot,
    /// Nuclear SWAP.
    Swap,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Echo-detected field sweep and the transition table.
    Spectrum,
    /// Three-pulse ESEEM with ideal hard pulses.
    Eseem,
    /// Optimize a shaped pulse and save it.
    Grape {
        /// Defaults to the `[grape]` manifold of the config.
        #[arg(long, value_enum)]
        manifold: Option<ManifoldArg>,
        #[arg(long, value_enum, default_value = "coherence")]
        gate: GateArg,
    },
    /// Double nuclear coherence scan over the delay.
    DoubleCoherence {
        /// Pulse file for both Hadamard-type steps.
        #[arg(long, conflicts_with = "ideal_gates")]
        pulse: Option<PathBuf>,
        /// Use exact subspace gates instead of a pulse.
        #[arg(long)]
        ideal_gates: bool,
        #[arg(long, value_enum, default_value = "down")]
        manifold: ManifoldArg,
        /// Longest delay, µs.
        #[arg(long)]
        tau_max: Option<f64>,
        /// Delay step, µs.
        #[arg(long)]
        tau_step: Option<f64>,
    },
    /// Resonator pre-distortion of a pulse file.
    Predistort {
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
    /// Fit hyperfine parameters to the `[[measured]]` frequencies.
    Refine,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Eseem => "eseem",
            Command::Grape { .. } => "grape",
            Command::DoubleCoherence { .. } => "double-coherence",
            Command::Predistort { .. } => "predistort",
            Command::Refine => "refine",
        }
    }
}

/// One record per successful run, written last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub output_dir: String,
    pub seed: u64,
    pub timestamp: String,
    pub outputs: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Numerical(_) => EXIT_NUMERICAL,
            Failure::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged(_) | Error::NotHermitian(_) | Error::DegenerateFrame(_) => {
                Failure::Numerical(e.to_string())
            }
            other => Failure::Config(other.to_string()),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Files written so far; removed again if the run fails.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Outcome<Self> {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> hyperspin::Result<()>) -> Outcome<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        let path = self.dir.join(name);
        self.written.push(path.clone());
        fs::write(&path, buf).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }

    fn names(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }
}

pub fn load_config(source: &str) -> Outcome<ExperimentConfig> {
    if source == BUILTIN_CONFIG {
        return Ok(ExperimentConfig::for_system(&SpinSystem::malonic_ref()));
    }
    let text = fs::read_to_string(source).map_err(|e| Failure::Config(format!("cannot read config {source}: {e}")))?;
    ExperimentConfig::from_toml(&text).map_err(|e| Failure::Config(format!("bad config {source}: {e}")))
}

fn load_pulse(path: &Path) -> Outcome<ShapedPulse> {
    let file =
        fs::File::open(path).map_err(|e| Failure::Config(format!("cannot open pulse {}: {e}", path.display())))?;
    read_pulse(std::io::BufReader::new(file))
        .map_err(|e| Failure::Config(format!("bad pulse file {}: {e}", path.display())))
}

fn grid(start: f64, stop: f64, step: f64, what: &str) -> Outcome<Vec<f64>> {
    if !(step > 0.0 && step.is_finite() && stop.is_finite() && start.is_finite() && stop > start) {
        return Err(Failure::Config(format!(
            "invalid {what} range {start}..{stop} step {step}"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| start + k as f64 * step).collect())
}

struct Context {
    cfg: ExperimentConfig,
    sys: SpinSystem,
    linewidth: f64,
    ensemble_points: usize,
    seed: u64,
}

impl Context {
    fn noise(&self, with_dephasing: bool) -> Outcome<NoiseModel> {
        let t2e = if with_dephasing { self.sys.t2e } else { f64::INFINITY };
        Ok(NoiseModel::gaussian(t2e, self.linewidth, self.ensemble_points)?)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message());
        return f.exit_code();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}

fn configure_threads() -> Outcome<()> {
    let Ok(value) = std::env::var("HYPERSPIN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Config(format!("HYPERSPIN_THREADS must be a positive integer, got '{value}'")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cli: &Cli) -> Outcome<()> {
    let cfg = load_config(&cli.common.config)?;
    let sys = cfg.system()?;
    let ctx = Context {
        linewidth: cli.common.linewidth_mhz.unwrap_or(sys.t2e_star_linewidth),
        ensemble_points: cli.common.ensemble_points.unwrap_or(cfg.grape.ensemble_points),
        seed: cli.common.seed.unwrap_or(cfg.grape.seed),
        cfg,
        sys,
    };
    let mut out = Outputs::new(&cli.common.out)?;
    let result = match &cli.command {
        Command::Spectrum => spectrum(&ctx, &mut out),
        Command::Eseem => eseem(&ctx, &mut out),
        Command::Grape { manifold, gate } => {
            let manifold = manifold.map(Manifold::from).unwrap_or(ctx.cfg.grape.manifold);
            grape(&ctx, &mut out, manifold, *gate)
        }
        Command::DoubleCoherence {
            pulse,
            ideal_gates,
            manifold,
            tau_max,
            tau_step,
        } => double_coherence(
            &ctx,
            &mut out,
            pulse.as_deref(),
            *ideal_gates,
            (*manifold).into(),
            tau_max.unwrap_or(ctx.cfg.double_coherence.tau_max_us),
            tau_step.unwrap_or(ctx.cfg.double_coherence.tau_step_us),
        ),
        Command::Predistort { pulse } => predistortion(&ctx, &mut out, pulse.as_deref()),
        Command::Refine => refine(&ctx, &mut out),
    };
    let finished = result.and_then(|()| {
        let manifest = RunManifest {
            command: cli.command.name().to_string(),
            config_path: cli.common.config.clone(),
            output_dir: cli.common.out.display().to_string(),
            seed: ctx.seed,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            outputs: out.names(),
        };
        out.write(MANIFEST_FILE, |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest).map_err(|e| Error::Parse(e.to_string()))?;
            w.push(b'\n');
            Ok(())
        })
    });
    if finished.is_err() {
        out.discard();
    }
    finished
}

fn spectrum(ctx: &Context, out: &mut Outputs) -> Outcome<()> {
    let s = &ctx.cfg.spectrum;
    let offsets = grid(s.offset_min_mhz, s.offset_max_mhz, s.offset_step_mhz, "offset")?;
    let series = fieldswept(&ctx.sys, &offsets, ctx.linewidth)?;
    let top = series.values.iter().cloned().fold(0.0, f64::max);
    let lines: Vec<(f64, f64)> = (1..series.len().saturating_sub(1))
        .filter(|&k| {
            let v = series.values[k];
            v > series.values[k - 1] && v >= series.values[k + 1] && v > 0.1 * top
        })
        .map(|k| (series.axis(k), series.values[k]))
        .collect();
    out.write("spectrum.csv", |w| {
        write_signal_csv(w, &series, "offset_mhz", "intensity")
    })?;
    out.write("transitions.csv", |w| {
        write_transitions_csv(w, &transition_table(&ctx.sys))
    })?;
    out.write("lines.csv", |w| {
        let rows: Vec<String> = lines
            .iter()
            .map(|(f, v)| {
                format!(
                    "{},{}\n",
                    hyperspin::io::format_sig(*f, 12),
                    hyperspin::io::format_sig(*v, 12)
                )
            })
            .collect();
        w.extend_from_slice(b"offset_mhz,intensity\n");
        w.extend(rows.concat().into_bytes());
        Ok(())
    })?;
    let list: Vec<String> = lines.iter().map(|(f, _)| format!("{f:.2}")).collect();
    println!("{} resolved lines at {} MHz", lines.len(), list.join(", "));
    Ok(())
}

fn eseem(ctx: &Context, out: &mut Outputs) -> Outcome<()> {
    let e = &ctx.cfg.eseem;
    let times = grid(0.0, e.t_max_us, e.t_step_us, "mixing time")?;
    let series = eseem_3pulse(&ctx.sys, e.tau1_us, &times, &ctx.noise(true)?)?;
    let peaks = fft_peaks(&series, 0.05)?;
    out.write("eseem.csv", |w| write_signal_csv(w, &series, "t_us", "echo"))?;
    out.write("eseem_peaks.csv", |w| write_peaks_csv(w, &peaks))?;
    for p in peaks.iter().take(4) {
        println!("peak {:.3} MHz, amplitude {:.4}", p.frequency, p.amplitude);
    }
    Ok(())
}

fn gate_target(ctx: &Context, manifold: Manifold, gate: GateArg) -> Outcome<hyperspin::linalg::CMatrix> {
    Ok(match gate {
        GateArg::Coherence => {
            let readout = double_coherence_readout(&ctx.sys, manifold)?;
            let pair = coherence_pair(&ctx.sys, &readout)?;
            target_subspace_pi2(&ctx.sys, manifold, pair, 1.0)?
        }
        GateArg::Cnot => nuclear_gate_target(&ctx.sys, &cnot_gate())?,
        GateArg::Swap => nuclear_gate_target(&ctx.sys, &swap_gate())?,
    })
}

fn grape(ctx: &Context, out: &mut Outputs, manifold: Manifold, gate: GateArg) -> Outcome<()> {
    let g = &ctx.cfg.grape;
    let mut cfg = GrapeConfig::new(gate_target(ctx, manifold, gate)?, g.duration_us);
    cfg.dt = g.dt_us;
    cfg.n_segments = (g.duration_us / g.dt_us).round() as usize;
    cfg.amp_max = g.amp_max_mhz;
    cfg.max_iters = g.max_iters;
    cfg.fidelity_goal = g.fidelity_goal;
    cfg.seed = ctx.seed;
    cfg.ensemble = ctx.noise(false)?;
    let res = optimize_with_progress(&ctx.sys, &cfg, |i, f| {
        if i % 100 == 0 {
            eprintln!("iteration {i}: robust fidelity {f:.5}");
        }
    })?;
    out.write("pulse.txt", |w| write_pulse(w, &res.pulse))?;
    out.write("grape.csv", |w| {
        write_summary_csv(
            w,
            &[
                ("fidelity_ideal", res.fidelity_ideal),
                ("fidelity_robust", res.fidelity_robust),
                ("iterations", res.iterations as f64),
                ("converged", if res.converged { 1.0 } else { 0.0 }),
                ("seed", ctx.seed as f64),
            ],
        )
    })?;
    out.write("trace.csv", |w| {
        let mut text = String::from("step,fidelity_robust\n");
        for (k, f) in res.fidelity_trace.iter().enumerate() {
            text.push_str(&format!("{k},{}\n", hyperspin::io::format_sig(*f, 12)));
        }
        w.extend(text.into_bytes());
        Ok(())
    })?;
    println!(
        "robust fidelity {:.5}, ideal {:.5}, {} iterations{}",
        res.fidelity_robust,
        res.fidelity_ideal,
        res.iterations,
        if res.converged { "" } else { " (goal not reached)" }
    );
    Ok(())
}

fn double_coherence(
    ctx: &Context,
    out: &mut Outputs,
    pulse: Option<&Path>,
    ideal_gates: bool,
    manifold: Manifold,
    tau_max: f64,
    tau_step: f64,
) -> Outcome<()> {
    let gate = match (pulse, ideal_gates) {
        (Some(p), false) => GateModel::Pulse(load_pulse(p)?),
        (None, true) => GateModel::Ideal,
        _ => {
            return Err(Failure::Config(
                "double-coherence needs --pulse PATH or --ideal-gates".into(),
            ))
        }
    };
    let taus = grid(0.0, tau_max, tau_step, "delay")?;
    let readout = double_coherence_readout(&ctx.sys, manifold)?;
    let series = double_coherence_scan(&ctx.sys, &gate, &readout, manifold, &taus, &ctx.noise(true)?)?;
    let peaks = fft_peaks(&series, 0.05)?;
    out.write("signal.csv", |w| write_signal_csv(w, &series, "tau_us", "signal"))?;
    out.write("peaks.csv", |w| write_peaks_csv(w, &peaks))?;
    match peaks.first() {
        Some(p) => println!("dominant peak {:.3} MHz, amplitude {:.4}", p.frequency, p.amplitude),
        None => println!("no modulation found"),
    }
    Ok(())
}

fn predistortion(ctx: &Context, out: &mut Outputs, pulse: Option<&Path>) -> Outcome<()> {
    let path = pulse.ok_or_else(|| Failure::Config("predistort needs --pulse PATH".into()))?;
    let target = load_pulse(path)?;
    let r = &ctx.cfg.resonator;
    let res = r.model()?;
    let before = apply_filter(&target, &res)?;
    let fixed = predistort(&target, &res, r.gain, r.max_iters, r.tol_mhz)?;
    let after = apply_filter(&fixed.corrected, &res)?;
    let initial = fixed.residual_trace.first().copied().unwrap_or(0.0);
    out.write("corrected.txt", |w| write_pulse(w, &fixed.corrected))?;
    out.write("filtered_before.txt", |w| write_pulse(w, &before))?;
    out.write("filtered_after.txt", |w| write_pulse(w, &after))?;
    out.write("residual.csv", |w| {
        let mut text = String::from("iteration,rms_error_mhz\n");
        for (k, v) in fixed.residual_trace.iter().enumerate() {
            text.push_str(&format!("{},{}\n", k + 1, hyperspin::io::format_sig(*v, 12)));
        }
        w.extend(text.into_bytes());
        Ok(())
    })?;
    out.write("target_spectrum.csv", |w| {
        write_signal_csv(w, &power_spectrum(&target)?, "frequency_mhz", "energy_density")
    })?;
    println!(
        "rms error {:.4} MHz uncorrected, {:.4} MHz after {} iterations (bandwidth {:.2} MHz)",
        initial,
        fixed.residual,
        fixed.iterations,
        res.bandwidth()
    );
    Ok(())
}

fn label_name(label: FrequencyLabel) -> String {
    let m = |m: Manifold| if m == Manifold::Up { "up" } else { "down" };
    match label {
        FrequencyLabel::Nuclear { nucleus, manifold } => format!("nuclear:{nucleus}:{}", m(manifold)),
        FrequencyLabel::DoubleCoherence { manifold } => format!("double_coherence:{}", m(manifold)),
        FrequencyLabel::Splitting { nucleus } => format!("splitting:{nucleus}"),
    }
}

fn refine(ctx: &Context, out: &mut Outputs) -> Outcome<()> {
    let measured = ctx.cfg.measured_frequencies()?;
    if measured.is_empty() {
        return Err(Failure::Config(
            "refine needs [[measured]] entries in the config".into(),
        ));
    }
    let fit = refine_hamiltonian(&ctx.sys, &measured, RefineOptions::default())?;
    let mut refined_cfg = ctx.cfg.clone();
    refined_cfg.nuclei = fit
        .refined
        .nuclei
        .iter()
        .map(|n| NucleusSpec {
            label: n.label.clone(),
            larmor_mhz: n.larmor,
            a_mhz: n.a_coeff,
            b_mhz: n.b_coeff,
        })
        .collect();
    let toml = refined_cfg.to_toml()?;
    out.write("refined.toml", |w| {
        w.extend(toml.into_bytes());
        Ok(())
    })?;
    out.write("refine.csv", |w| {
        write_summary_csv(
            w,
            &[
                ("rel_distance", fit.rel_distance),
                ("rms_residual_mhz", fit.rms_residual),
                ("iterations", fit.iterations as f64),
            ],
        )
    })?;
    let mut text = String::from("label,measured_mhz,initial_mhz,refined_mhz\n");
    for m in &measured {
        let before = predict_frequency(&ctx.sys, m.label)?;
        let after = predict_frequency(&fit.refined, m.label)?;
        text.push_str(&format!(
            "{},{},{},{}\n",
            label_name(m.label),
            hyperspin::io::format_sig(m.value, 12),
            hyperspin::io::format_sig(before, 12),
            hyperspin::io::format_sig(after, 12)
        ));
    }
    out.write("frequencies.csv", |w| {
        w.extend(text.into_bytes());
        Ok(())
    })?;
    println!(
        "relative Hamiltonian change {:.5}, rms residual {:.2e} MHz",
        fit.rel_distance, fit.rms_residual
    );
    Ok(())
}
