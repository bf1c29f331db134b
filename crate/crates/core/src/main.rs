use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use cosim::bridge::{Channel, ExchangeFlag};
use cosim::engine::{compare_traces, Model, SimConfig, Trace};
use cosim::orchestrator::{
    reference_with_delays, run_cosim, run_follower, run_mono, CosimError, CosimOptions, CutSet, FollowerSpec,
    ModelDocument,
};
use cosim::testbed::{self, Scenario, TestbedParams};

const EXIT_USAGE: u8 = 1;
const EXIT_COSIM: u8 = 2;
const EXIT_MODEL: u8 = 3;

/// Block-diagram simulation and two-process lockstep co-simulation.
#[derive(Debug, Parser)]
#[command(name = "cosim", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    #[command(flatten)]
    role: RoleArgs,
}

/// Role-selected invocation; `--role follower` is what the orchestrator spawns.
#[derive(Debug, Args)]
struct RoleArgs {
    #[arg(long, value_enum)]
    role: Option<Role>,
    #[arg(long)]
    channel: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    cut: Option<String>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "timeout-ms", default_value_t = 5000)]
    timeout_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Role {
    Mono,
    Master,
    Follower,
}

#[derive(Debug, Args)]
struct Horizon {
    /// Step size, seconds.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// End time, seconds.
    #[arg(long = "t-end", default_value_t = 10.0)]
    t_end: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a model in this process and write its trace as CSV.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        horizon: Horizon,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a model at a cut and co-simulate the halves in two processes.
    Cosim {
        #[arg(long)]
        model: PathBuf,
        /// Name of a cut stored in the model file, or a cut JSON file.
        #[arg(long)]
        cut: String,
        #[command(flatten)]
        horizon: Horizon,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "timeout-ms", default_value_t = 5000)]
        timeout_ms: u64,
    },
    /// Write the single-process model equivalent to co-simulating under a cut.
    Oracle {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cut: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two CSV traces column by column.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Time monolithic against co-simulated runs.
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Without a cut only the monolithic run is timed.
        #[arg(long)]
        cut: Option<String>,
        #[command(flatten)]
        horizon: Horizon,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Print the result as one JSON object.
        #[arg(long)]
        json: bool,
        #[arg(long = "timeout-ms", default_value_t = 5000)]
        timeout_ms: u64,
    },
    /// Write the single-machine testbed models, scenarios and cuts.
    Testbed {
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Testbed parameters as JSON; defaults otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Horizon the scenarios are checked against.
        #[arg(long = "t-end", default_value_t = 10.0)]
        t_end: f64,
    },
    /// Raw channel peer for protocol testing.
    #[command(hide = true)]
    BridgePeer {
        #[command(subcommand)]
        mode: PeerMode,
    },
}

#[derive(Debug, Subcommand)]
enum PeerMode {
    /// Follower copying input `i` to output `i`.
    Echo {
        #[arg(long)]
        channel: String,
        #[arg(long = "timeout-ms", default_value_t = 5000)]
        timeout_ms: u64,
    },
    /// Master sending random payloads and checking the echo.
    Drive {
        #[arg(long)]
        channel: String,
        #[arg(long)]
        inputs: usize,
        #[arg(long)]
        outputs: usize,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "timeout-ms", default_value_t = 5000)]
        timeout_ms: u64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Some(cmd) => dispatch(cmd),
        None => by_role(cli.role),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::usage(format!("--{flag} is required for this role")))
}

fn by_role(args: RoleArgs) -> CmdResult {
    let timeout = Duration::from_millis(args.timeout_ms);
    match args.role {
        None => Err(Failure::usage("give a subcommand or --role (see --help)")),
        Some(Role::Follower) => {
            let spec = FollowerSpec {
                program: PathBuf::new(),
                model_path: required(args.model, "model")?,
                channel_name: required(args.channel, "channel")?,
                dt: required(args.dt, "dt")?,
                t_end: required(args.t_end, "t-end")?,
                timeout,
            };
            match run_follower(&spec) {
                Ok(stats) => {
                    print_json(&stats);
                    Ok(())
                }
                Err(e) => Err(Failure {
                    code: e.exit_code() as u8,
                    message: e.to_string(),
                }),
            }
        }
        Some(Role::Mono) => cmd_run(
            &required(args.model, "model")?,
            required(args.dt, "dt")?,
            required(args.t_end, "t-end")?,
            &required(args.out, "out")?,
        ),
        Some(Role::Master) => cmd_cosim(
            &required(args.model, "model")?,
            &required(args.cut, "cut")?,
            required(args.dt, "dt")?,
            required(args.t_end, "t-end")?,
            &required(args.out, "out")?,
            timeout,
        ),
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Run { model, horizon, out } => cmd_run(&model, horizon.dt, horizon.t_end, &out),
        Command::Cosim {
            model,
            cut,
            horizon,
            out,
            timeout_ms,
        } => cmd_cosim(&model, &cut, horizon.dt, horizon.t_end, &out, Duration::from_millis(timeout_ms)),
        Command::Oracle { model, cut, out } => cmd_oracle(&model, &cut, &out),
        Command::Compare { a, b, tol } => cmd_compare(&a, &b, tol),
        Command::Bench {
            model,
            cut,
            horizon,
            repeats,
            json,
            timeout_ms,
        } => cmd_bench(
            &model,
            cut.as_deref(),
            horizon.dt,
            horizon.t_end,
            repeats,
            json,
            Duration::from_millis(timeout_ms),
        ),
        Command::Testbed { out_dir, params, t_end } => cmd_testbed(&out_dir, params.as_deref(), t_end),
        Command::BridgePeer { mode } => match mode {
            PeerMode::Echo { channel, timeout_ms } => peer_echo(&channel, Duration::from_millis(timeout_ms)),
            PeerMode::Drive {
                channel,
                inputs,
                outputs,
                steps,
                seed,
                timeout_ms,
            } => peer_drive(&channel, inputs, outputs, steps, seed, Duration::from_millis(timeout_ms)),
        },
    }
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("plain data serializes"));
}

fn load_document(path: &Path) -> Result<(ModelDocument, Model), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let doc: ModelDocument =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let model = doc
        .model
        .clone()
        .validate()
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok((doc, model))
}

/// A cut named in the model file, else a cut JSON file.
fn resolve_cut(doc: &ModelDocument, cut: &str) -> Result<CutSet, Failure> {
    if let Some(c) = doc.cuts.get(cut) {
        return Ok(c.clone());
    }
    let path = Path::new(cut);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{cut}: {e}")))?;
        return serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{cut}: {e}")));
    }
    let available: Vec<&str> = doc.cuts.keys().map(String::as_str).collect();
    Err(Failure::usage(format!(
        "unknown cut {cut:?}; available cuts: {}",
        if available.is_empty() {
            "(none in this model)".to_owned()
        } else {
            available.join(", ")
        }
    )))
}

fn save_trace(trace: &Trace, out: &Path) -> CmdResult {
    trace
        .save_csv(out)
        .map_err(|e| Failure::usage(format!("{}: {e}", out.display())))
}

fn cmd_run(model_path: &Path, dt: f64, t_end: f64, out: &Path) -> CmdResult {
    let (_, model) = load_document(model_path)?;
    let (trace, stats) = run_mono(&model, &SimConfig::new(dt, t_end)).map_err(|e| Failure::usage(e.to_string()))?;
    save_trace(&trace, out)?;
    print_json(&stats);
    Ok(())
}

fn cosim_failure(e: CosimError) -> Failure {
    let code = match &e {
        CosimError::Split(_) | CosimError::Config(_) => EXIT_USAGE,
        CosimError::CosimFailed {
            exit_code: Some(c), ..
        } if *c == EXIT_MODEL as i32 => EXIT_MODEL,
        _ => EXIT_COSIM,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

fn cmd_cosim(model_path: &Path, cut: &str, dt: f64, t_end: f64, out: &Path, timeout: Duration) -> CmdResult {
    let (doc, model) = load_document(model_path)?;
    let cut = resolve_cut(&doc, cut)?;
    let opts = CosimOptions {
        timeout,
        ..CosimOptions::default()
    };
    let outcome = run_cosim(&model, &cut, &SimConfig::new(dt, t_end), &opts).map_err(cosim_failure)?;
    save_trace(&outcome.trace, out)?;
    print_json(&outcome.master);
    if let Some(f) = &outcome.follower {
        print_json(f);
    }
    Ok(())
}

fn cmd_oracle(model_path: &Path, cut: &str, out: &Path) -> CmdResult {
    let (doc, model) = load_document(model_path)?;
    let cut = resolve_cut(&doc, cut)?;
    let reference = reference_with_delays(&model, &cut).map_err(|e| Failure::usage(e.to_string()))?;
    let text = serde_json::to_string_pretty(reference.spec()).expect("model serializes");
    fs::write(out, text).map_err(|e| Failure::usage(format!("{}: {e}", out.display())))
}

fn cmd_compare(a: &Path, b: &Path, tol: f64) -> CmdResult {
    let load = |p: &Path| Trace::load_csv(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())));
    let (ta, tb) = (load(a)?, load(b)?);
    let report = compare_traces(&ta, &tb, tol).map_err(|e| Failure::usage(e.to_string()))?;
    println!("{:<24} {:>24}", "column", "max |diff|");
    for c in &report.columns {
        println!("{:<24} {:>24.6e}", c.name, c.max_abs_diff);
    }
    if let Some(d) = &report.first_divergence {
        println!(
            "first divergence: row {} (t = {}), column {:?}: {} vs {}",
            d.row, d.t, report.columns[d.column].name, d.a, d.b
        );
    }
    if report.passed {
        println!("PASS (tol {tol:e})");
        Ok(())
    } else {
        println!("FAIL (tol {tol:e})");
        Err(Failure {
            code: EXIT_USAGE,
            message: format!("traces differ by {:e}, above tolerance {tol:e}", report.max_abs_diff()),
        })
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Serialize)]
struct BenchReport {
    repeats: usize,
    steps: u64,
    mono_median_s: f64,
    cosim_median_s: Option<f64>,
    ratio: Option<f64>,
}

fn cmd_bench(
    model_path: &Path,
    cut: Option<&str>,
    dt: f64,
    t_end: f64,
    repeats: usize,
    json: bool,
    timeout: Duration,
) -> CmdResult {
    if repeats < 3 {
        return Err(Failure::usage(format!("--repeats must be at least 3, got {repeats}")));
    }
    let (doc, model) = load_document(model_path)?;
    let cut = cut.map(|c| resolve_cut(&doc, c)).transpose()?;
    let config = SimConfig::new(dt, t_end);
    let steps = config.steps().map_err(|e| Failure::usage(e.to_string()))?;

    let mut mono = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        run_mono(&model, &config).map_err(|e| Failure::usage(e.to_string()))?;
        mono.push(start.elapsed().as_secs_f64());
    }
    let mut cosim = Vec::with_capacity(repeats);
    if let Some(cut) = &cut {
        let opts = CosimOptions {
            timeout,
            ..CosimOptions::default()
        };
        for _ in 0..repeats {
            let start = Instant::now();
            run_cosim(&model, cut, &config, &opts).map_err(cosim_failure)?;
            cosim.push(start.elapsed().as_secs_f64());
        }
    }
    let mono_median_s = median(mono);
    let cosim_median_s = (!cosim.is_empty()).then(|| median(cosim));
    let report = BenchReport {
        repeats,
        steps,
        mono_median_s,
        cosim_median_s,
        ratio: cosim_median_s.map(|c| c / mono_median_s),
    };
    if json {
        print_json(&report);
    } else {
        println!("{:<18} {:>14} {:>14}", "", "monolithic", "co-simulated");
        let c = report.cosim_median_s.map(|c| format!("{c:.6}")).unwrap_or_else(|| "-".into());
        println!("{:<18} {:>14.6} {:>14}", "median wall (s)", report.mono_median_s, c);
        if let Some(r) = report.ratio {
            println!("{:<18} {:>14} {:>14.2}", "overhead ratio", "", r);
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(v).expect("plain data serializes");
    fs::write(path, text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn cmd_testbed(out_dir: &Path, params: Option<&Path>, t_end: f64) -> CmdResult {
    let params: TestbedParams = match params {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => TestbedParams::default(),
    };
    let smib = testbed::build_smib_model(&params).map_err(|e| Failure::usage(e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(|e| Failure::usage(format!("{}: {e}", out_dir.display())))?;

    write_json(&out_dir.join("smib.json"), &testbed::document(&smib))?;
    write_json(&out_dir.join("params.json"), &params)?;
    write_json(&out_dir.join("cuts.json"), &testbed::standard_cuts(&smib))?;
    for (name, scenario) in [("load_step", Scenario::load_step()), ("fault", Scenario::fault())] {
        let disturbed = testbed::apply_scenario(&smib, &scenario, t_end).map_err(|e| Failure::usage(e.to_string()))?;
        write_json(&out_dir.join(format!("scenario_{name}.json")), &scenario)?;
        write_json(&out_dir.join(format!("smib_{name}.json")), &testbed::document(&disturbed))?;
    }
    println!("wrote testbed files to {}", out_dir.display());
    Ok(())
}

fn bridge_failure(e: cosim::bridge::BridgeError) -> Failure {
    Failure {
        code: EXIT_COSIM,
        message: e.to_string(),
    }
}

#[derive(Serialize)]
struct PeerReport {
    exchanges: u64,
    transitions: BTreeMap<String, u64>,
}

fn transition_counts(log: &[(ExchangeFlag, ExchangeFlag)]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for (a, b) in log {
        *counts.entry(format!("{a}->{b}")).or_insert(0) += 1;
    }
    counts
}

fn peer_echo(channel: &str, timeout: Duration) -> CmdResult {
    let mut ch = Channel::open_follower(channel, timeout).map_err(bridge_failure)?;
    ch.enable_transition_log();
    let mut expected = 0u32;
    let served = ch
        .follower_serve(|step, _, inputs: &[f64], outputs: &mut [f64]| {
            if step != expected {
                return Err(format!("expected step {expected}, got {step}"));
            }
            expected = expected.wrapping_add(1);
            for (i, o) in outputs.iter_mut().enumerate() {
                *o = inputs.get(i).copied().unwrap_or(0.0);
            }
            Ok(())
        })
        .map_err(bridge_failure)?;
    print_json(&PeerReport {
        exchanges: served,
        transitions: transition_counts(ch.transitions()),
    });
    Ok(())
}

fn peer_drive(channel: &str, n_in: usize, n_out: usize, steps: u64, seed: u64, timeout: Duration) -> CmdResult {
    let mut ch = Channel::create_master(channel, n_in, n_out, timeout).map_err(bridge_failure)?;
    ch.enable_transition_log();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut inputs = vec![0.0; n_in];
    let mut outputs = vec![0.0; n_out];
    for k in 0..steps {
        for v in inputs.iter_mut() {
            *v = f64::from_bits(rng.random());
        }
        ch.master_exchange_into(k as u32, k as f64, &inputs, &mut outputs)
            .map_err(bridge_failure)?;
        for (j, o) in outputs.iter().enumerate() {
            let want = inputs.get(j).copied().unwrap_or(0.0);
            if o.to_bits() != want.to_bits() {
                ch.abort();
                return Err(Failure {
                    code: EXIT_COSIM,
                    message: format!("step {k}: output {j} is {o:e}, sent {want:e}"),
                });
            }
        }
    }
    ch.close();
    print_json(&PeerReport {
        exchanges: steps,
        transitions: transition_counts(ch.transitions()),
    });
    Ok(())
}
