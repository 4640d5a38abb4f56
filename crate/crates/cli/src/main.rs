use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use costate_core::experiment::{batch, summarize, RunOutcome};
use costate_core::generator::{mfpt, GeneratorMatrix, ModeProbabilities};
use costate_core::mpc::{MpcConfig, MpcGuidance};
use costate_core::pipeline::io::{read_telemetry_file, write_ekf_rows, write_json, write_report, write_telemetry_file};
use costate_core::pipeline::{run_ekf_baseline, run_pipeline, NoiseModel, PipelineConfig};
use costate_core::sim::{simulate_descent, simulate_with_guidance, DescentConfig, FaultConfig, FaultKind};
use costate_core::Error;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "costate", version, about = "Co-state consistency monitoring for powered descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the simulator seed (base seed for `compare`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a descent and write telemetry.csv.
    Simulate {
        /// Include ground-truth state columns.
        #[arg(long)]
        emit_truth: bool,
    },
    /// Run the co-state pipeline over a telemetry CSV.
    Run { input: PathBuf },
    /// Run only the EKF baseline over a telemetry CSV.
    Ekf { input: PathBuf },
    /// Monte Carlo alarm-time comparison on simulated faults.
    Compare {
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Generator calibration diagnostics over a telemetry CSV.
    Calibrate { input: PathBuf },
    /// Closed-loop descent under the risk-aware MPC.
    MpcDemo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompareConfig {
    runs: usize,
    nominal_runs: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { runs: 100, nominal_runs: 20 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MpcDemoConfig {
    mpc: MpcConfig,
    /// Off-diagonal transition rates, `rates[i][j]` from mode `j` into `i`.
    rates: Vec<Vec<f64>>,
    initial_probs: Option<Vec<f64>>,
    lambda: [f64; 3],
}

impl Default for MpcDemoConfig {
    fn default() -> Self {
        MpcDemoConfig {
            mpc: MpcConfig { iterations: 30, ..MpcConfig::default() },
            rates: vec![vec![0.0, 0.2, 0.0], vec![0.05, 0.0, 0.1], vec![0.01, 0.05, 0.0]],
            initial_probs: None,
            lambda: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    sim: DescentConfig,
    fault: FaultConfig,
    pipeline: PipelineConfig,
    compare: CompareConfig,
    mpc_demo: MpcDemoConfig,
}

fn input_err(msg: String) -> Error {
    Error::Input { line: 0, msg }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Error> {
    let raw: serde_json::Value = match path {
        None => serde_json::json!({}),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let is_json = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
            if is_json {
                serde_json::from_str(&text)?
            } else {
                let v: toml::Value = toml::from_str(&text).map_err(|e| input_err(format!("{}: {e}", p.display())))?;
                serde_json::to_value(v)?
            }
        }
    };
    let given = |key: &str| raw.get("pipeline").and_then(|p| p.get(key)).is_some();
    let (noise_given, init_given) = (given("noise"), given("initial_state"));
    let mut cfg: RunConfig = serde_json::from_value(raw)?;
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    // estimator defaults follow the simulated world unless set explicitly
    if !noise_given {
        cfg.pipeline.noise = NoiseModel::from(&cfg.sim);
    }
    if !init_given {
        cfg.pipeline.initial_state = cfg.sim.initial_state().0.into();
    }
    cfg.sim.validate()?;
    cfg.fault.validate()?;
    cfg.pipeline.validate()?;
    Ok(cfg)
}

fn compare_fault(cfg: &RunConfig) -> FaultConfig {
    if cfg.fault.kind == FaultKind::None {
        FaultConfig::thrust_scale(0.9, 7000.0)
    } else {
        cfg.fault.clone()
    }
}

fn write_outcomes(path: &Path, rows: &[RunOutcome], label: &str) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "kind",
        "seed",
        "fault_onset_t",
        "costate_alarm_t",
        "ekf_alarm_t",
        "costate_first",
        "peak_hazard_prob",
        "costate_alarm_rate",
        "ekf_alarm_rate",
    ])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in rows {
        w.write_record([
            label.to_string(),
            r.seed.to_string(),
            opt(r.fault_onset_t),
            opt(r.costate_alarm_t),
            opt(r.ekf_alarm_t),
            u8::from(r.costate_first()).to_string(),
            opt(r.peak_hazard_prob),
            r.costate_alarm_rate.to_string(),
            r.ekf_alarm_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Calibration {
    calibration_errors: Vec<f64>,
    mean_calibration_error: Option<f64>,
    generator: Option<Vec<Vec<f64>>>,
    mode_labels: Option<Vec<costate_core::regimes::ModeLabel>>,
    hazard_modes: Vec<usize>,
    /// `(mode, expected time to hazard)` for each transient mode.
    mfpt: Vec<(usize, Option<f64>)>,
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    match cli.command {
        Command::Simulate { emit_truth } => {
            let sim = simulate_descent(&cfg.sim, &cfg.fault)?;
            write_telemetry_file(&out.join("telemetry.csv"), &sim.telemetry, emit_truth)?;
            log::info!("{} samples, touchdown at {:?}", sim.telemetry.len(), sim.touchdown_t);
        }
        Command::Run { input } => {
            let tel = read_telemetry_file(&input)?;
            let report = run_pipeline(&tel, &cfg.pipeline)?;
            write_report(out, &report)?;
            let s = &report.summary;
            println!(
                "co-state alarm: {:?}  EKF alarm: {:?}  peak hazard: {:?}",
                s.first_costate_alarm_t, s.first_ekf_alarm_t, s.peak_hazard_prob
            );
        }
        Command::Ekf { input } => {
            let tel = read_telemetry_file(&input)?;
            let mut report = run_ekf_baseline(&tel, &cfg.pipeline)?;
            write_ekf_rows(fs::File::create(out.join("ekf.csv"))?, &report.rows)?;
            report.rows.clear();
            write_json(&out.join("ekf_summary.json"), &report)?;
            println!("EKF alarm: {:?}", report.first_ekf_alarm_t);
        }
        Command::Compare { runs } => {
            let n = runs.unwrap_or(cfg.compare.runs);
            let base = cfg.sim.seed;
            let seeds: Vec<u64> = (0..n as u64).map(|i| base + i).collect();
            let nominal_seeds: Vec<u64> = (0..cfg.compare.nominal_runs as u64).map(|i| base + n as u64 + i).collect();
            let faulted = batch(&cfg.sim, &compare_fault(&cfg), &cfg.pipeline, &seeds)?;
            let nominal = batch(&cfg.sim, &FaultConfig::none(), &cfg.pipeline, &nominal_seeds)?;
            write_outcomes(&out.join("compare.csv"), &faulted, "fault")?;
            write_outcomes(&out.join("compare_nominal.csv"), &nominal, "nominal")?;
            let summary = summarize(&faulted, &nominal);
            write_json(&out.join("compare.json"), &summary)?;
            println!(
                "co-state first in {}/{} runs; nominal false-alarm rates: co-state {:.4}, EKF {:.4}",
                summary.costate_first,
                summary.runs,
                summary.nominal_costate_false_alarm_rate,
                summary.nominal_ekf_false_alarm_rate
            );
        }
        Command::Calibrate { input } => {
            let tel = read_telemetry_file(&input)?;
            let s = run_pipeline(&tel, &cfg.pipeline)?.summary;
            let mut times = Vec::new();
            if let Some(g) = &s.generator {
                let k = g.len();
                let l = GeneratorMatrix(DMatrix::from_fn(k, k, |i, j| g[i][j]));
                let transient: Vec<usize> = (0..k).filter(|j| !s.hazard_modes.contains(j)).collect();
                match mfpt(&l, &s.hazard_modes) {
                    Ok(m) => times = m.modes.iter().copied().zip(m.times.iter().map(|t| t.is_finite().then_some(*t))).collect(),
                    Err(_) => times = transient.into_iter().map(|j| (j, None)).collect(),
                }
            }
            let report = Calibration {
                calibration_errors: s.calibration_errors,
                mean_calibration_error: s.mean_calibration_error,
                generator: s.generator,
                mode_labels: s.mode_labels,
                hazard_modes: s.hazard_modes,
                mfpt: times,
            };
            write_json(&out.join("calibration.json"), &report)?;
            println!("mean calibration error: {:?}", report.mean_calibration_error);
        }
        Command::MpcDemo => {
            let d = &cfg.mpc_demo;
            let k = d.rates.len();
            if k == 0 || d.rates.iter().any(|r| r.len() != k) {
                return Err(Error::InvalidConfig("mpc_demo.rates must be a nonempty square matrix".into()));
            }
            let l = GeneratorMatrix::from_rates(DMatrix::from_fn(k, k, |i, j| d.rates[i][j]))?;
            let p = match &d.initial_probs {
                Some(v) => ModeProbabilities::from_vec(v.clone()),
                None => ModeProbabilities::point(k, 0),
            };
            let mut g = MpcGuidance::new(d.mpc.clone(), l, p);
            g.lambda = costate_core::costate::CoState(d.lambda.into());
            let sim = simulate_with_guidance(&cfg.sim, &cfg.fault, &mut g)?;
            let mut w = csv::Writer::from_path(out.join("mpc_trace.csv"))?;
            w.write_record([
                "t", "x", "y", "z", "vx", "vy", "vz", "u_x", "u_y", "u_z", "cost", "fallback", "hazard_prob",
                "terminal_inv_mfpt",
            ])?;
            for s in &g.log {
                let mut rec: Vec<String> = vec![s.t.to_string()];
                rec.extend(s.state.iter().map(|v| v.to_string()));
                rec.extend(s.control.iter().map(|v| v.to_string()));
                rec.push(s.cost.to_string());
                rec.push(u8::from(s.fallback).to_string());
                rec.push(s.hazard_prob.to_string());
                rec.push(s.terminal_inv_mfpt.to_string());
                w.write_record(&rec)?;
            }
            w.flush()?;
            let summary = serde_json::json!({
                "steps": g.log.len(),
                "fallbacks": g.fallbacks,
                "touchdown_t": sim.touchdown_t,
                "touchdown_velocity": sim.touchdown_velocity.map(|v| [v.x, v.y, v.z]),
            });
            write_json(&out.join("mpc_summary.json"), &summary)?;
            println!("{} MPC steps, {} fallbacks, touchdown at {:?}", g.log.len(), g.fallbacks, sim.touchdown_t);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
