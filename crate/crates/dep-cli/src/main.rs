//! `dep`: benchmark runs, parameter sweeps, component ablations, suite
//! generation, and single-step inspection, all on the built-in mock model.
//!
//! Every subcommand resolves one effective configuration (defaults <
//! `DEP_SEED` < `--config` file < `--set`), writes it to
//! `<out>/effective.cfg`, and drops its results next to it. Exit codes:
//! 0 success, 2 usage, 3 configuration, 4 runtime failure.

mod settings;
mod svg;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dep::bench::{
    evaluate, generate_suite, load_suite, persist_runs, run_ablation, run_sweep, save_suite,
    sweep_csv, BenchSuite, DecoderSpec, RunRecord, SweepAxis, SweepTable,
};
use dep::core::{argmax_token, PosTag, Prompt};
use dep::engine::{write_traces, Engine, Model, StepTrace};
use dep::mockvlm::{LabelDetector, LanguageParams, MockLanguage, MockVlm, MockWorld, VlmParams, WorldParams};

use settings::Effective;

#[derive(Parser)]
#[command(
    name = "dep",
    version,
    about = "Decoding-calibration benchmarks on a deterministic mock vision-language model"
)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key (KEY=VALUE); repeatable, applied
    /// after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory; created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "dep-out")]
    out: PathBuf,

    /// Print nothing on success; results still land in the output
    /// directory.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate plain greedy decoding and the full decoder on one suite.
    RunBench {
        /// Evaluate this suite file instead of generating one.
        #[arg(long, value_name = "PATH")]
        suite: Option<PathBuf>,
    },
    /// Sweep one decoder parameter; writes per-repeat records, a CSV
    /// summary, and a chart.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values; defaults depend on the axis.
        #[arg(long, value_name = "V,V,..")]
        values: Option<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_name = "PATH")]
        suite: Option<PathBuf>,
    },
    /// Run the component ablation: origin, each toggle alone, full.
    Ablate {
        #[arg(long, value_name = "PATH")]
        suite: Option<PathBuf>,
    },
    /// Decode one step and dump its full trace.
    InspectStep {
        #[arg(long)]
        world_seed: u64,
        /// Question posed to the model, e.g. "is there a red cup".
        #[arg(long)]
        prompt: String,
        /// Decode this many tokens first, then inspect the next step.
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
    /// Generate a benchmark suite file for later runs.
    GenSuite,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum AxisArg {
    M,
    Alpha,
    Beta,
    Gamma,
    Delta,
    FixedP,
}

impl AxisArg {
    fn to_axis(self) -> SweepAxis {
        match self {
            AxisArg::M => SweepAxis::M,
            AxisArg::Alpha => SweepAxis::Alpha,
            AxisArg::Beta => SweepAxis::Beta,
            AxisArg::Gamma => SweepAxis::Gamma,
            AxisArg::Delta => SweepAxis::Delta,
            AxisArg::FixedP => SweepAxis::FixedP,
        }
    }

    fn default_values(self) -> Vec<f64> {
        match self {
            AxisArg::M => vec![1.0, 2.0, 3.0, 4.0, 5.0],
            AxisArg::Alpha => vec![0.0, 0.1, 0.2, 0.5, 1.0],
            AxisArg::Beta => vec![0.0, 0.5, 1.0, 2.0, 4.0],
            AxisArg::Gamma => vec![0.0, 0.1, 0.3, 0.5, 1.0],
            AxisArg::Delta => vec![1.0, 1.5, 2.0, 3.0, 4.0],
            AxisArg::FixedP => vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// The two failure classes behind the nonzero exit codes clap does not own.
#[derive(Debug)]
pub enum CliError {
    /// Configuration could not be read, parsed, or validated (exit 3).
    Config(String),
    /// The run itself failed: engine error or unwritable output (exit 4).
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

fn runtime<E: fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                CliError::Config(_) => ExitCode::from(3),
                CliError::Runtime(_) => ExitCode::from(4),
            }
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let env_seed = std::env::var("DEP_SEED").ok();
    let effective = Effective::assemble(cli.config.as_deref(), &cli.set, env_seed.as_deref())?;

    fs::create_dir_all(&cli.out).map_err(runtime)?;
    fs::write(cli.out.join("effective.cfg"), effective.to_text()).map_err(runtime)?;

    match &cli.command {
        Command::RunBench { suite } => cmd_run_bench(cli, &effective, suite.as_deref()),
        Command::Sweep {
            axis,
            values,
            repeats,
            suite,
        } => cmd_sweep(cli, &effective, *axis, values.as_deref(), *repeats, suite.as_deref()),
        Command::Ablate { suite } => cmd_ablate(cli, &effective, suite.as_deref()),
        Command::InspectStep {
            world_seed,
            prompt,
            step,
        } => cmd_inspect_step(cli, &effective, *world_seed, prompt, *step),
        Command::GenSuite => cmd_gen_suite(cli, &effective),
    }
}

/// Loads the given suite (rebuilding its language) or generates one from
/// the effective benchmark settings.
fn obtain_suite(
    effective: &Effective,
    path: Option<&Path>,
) -> Result<(MockLanguage, BenchSuite), CliError> {
    match path {
        Some(p) => {
            let suite = load_suite(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            let lang = MockLanguage::generate(suite.language).map_err(runtime)?;
            Ok((lang, suite))
        }
        None => {
            let bench = &effective.bench;
            let lang = MockLanguage::generate(LanguageParams::default()).map_err(runtime)?;
            let suite = generate_suite(
                &lang,
                WorldParams::default(),
                VlmParams {
                    bias: bench.bias,
                    ..VlmParams::default()
                },
                bench.split,
                bench.items,
                bench.suite_seed,
            )
            .map_err(runtime)?;
            Ok((lang, suite))
        }
    }
}

fn print_metrics_row(label: &str, record: &RunRecord) {
    let m = &record.metrics;
    println!(
        "{label:>10}  yes {:.3}  acc {:.3}  prec {:.3}  rec {:.3}  f1 {:.3}  fwd/step {:.2}  {} ms",
        m.yes_rate, m.accuracy, m.precision, m.recall, m.f1, record.mean_forwards_per_step, record.wall_ms
    );
}

fn cmd_run_bench(cli: &Cli, effective: &Effective, suite: Option<&Path>) -> Result<(), CliError> {
    let (lang, suite) = obtain_suite(effective, suite)?;
    let eval_seed = effective.bench.eval_seed;
    let origin = evaluate(&lang, &suite, &DecoderSpec::Baseline, eval_seed, "origin")
        .map_err(runtime)?;
    let full = evaluate(
        &lang,
        &suite,
        &DecoderSpec::Dep(effective.decoder),
        eval_seed,
        "dep_full",
    )
    .map_err(runtime)?;

    let path = cli.out.join("runs.jsonl");
    persist_runs(&path, &[origin.clone(), full.clone()]).map_err(runtime)?;
    if !cli.quiet {
        println!(
            "suite: {} items, {} split, seed {}",
            suite.items.len(),
            suite.split,
            suite.base_seed
        );
        print_metrics_row("origin", &origin);
        print_metrics_row("dep_full", &full);
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ablate(cli: &Cli, effective: &Effective, suite: Option<&Path>) -> Result<(), CliError> {
    let (lang, suite) = obtain_suite(effective, suite)?;
    let rows = run_ablation(&lang, &suite, effective.decoder, effective.bench.eval_seed)
        .map_err(runtime)?;
    let records: Vec<RunRecord> = rows.iter().map(|r| r.record.clone()).collect();
    let path = cli.out.join("ablation.jsonl");
    persist_runs(&path, &records).map_err(runtime)?;
    if !cli.quiet {
        for row in &rows {
            print_metrics_row(&row.record.label, &row.record);
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_values(axis: AxisArg, text: Option<&str>) -> Result<Vec<f64>, CliError> {
    let Some(text) = text else {
        return Ok(axis.default_values());
    };
    text.split(',')
        .map(|v| {
            let v = v.trim();
            v.parse::<f64>()
                .map_err(|_| CliError::Config(format!("axis value {v:?} is not a real")))
        })
        .collect()
}

fn cmd_sweep(
    cli: &Cli,
    effective: &Effective,
    axis: AxisArg,
    values: Option<&str>,
    repeats: usize,
    suite: Option<&Path>,
) -> Result<(), CliError> {
    let values = parse_values(axis, values)?;
    if repeats < 1 {
        return Err(CliError::Config("repeats must be at least 1".into()));
    }
    let (lang, suite) = obtain_suite(effective, suite)?;
    let started = Instant::now();
    let table = run_sweep(
        &lang,
        &suite,
        effective.decoder,
        axis.to_axis(),
        &values,
        repeats,
    )
    .map_err(runtime)?;

    let stem = format!("sweep_{}", table.axis);
    let csv_path = cli.out.join(format!("{stem}.csv"));
    fs::write(&csv_path, sweep_csv(&table)).map_err(runtime)?;
    let records: Vec<RunRecord> = table
        .cells
        .iter()
        .flat_map(|c| c.runs.iter().cloned())
        .collect();
    persist_runs(&cli.out.join(format!("{stem}.jsonl")), &records).map_err(runtime)?;

    // The chart is a convenience on top of the CSV; a failure to render or
    // write it must not fail the sweep.
    if let Err(e) = write_chart(&cli.out.join(format!("{stem}.svg")), &table) {
        eprintln!("warning: chart not written: {e}");
    }

    if !cli.quiet {
        for cell in &table.cells {
            let value = match cell.value {
                Some(v) => format!("{v}"),
                None => "adaptive".into(),
            };
            println!(
                "{} = {value:>8}: mean f1 {:.4}, var f1 {:.3e} over {repeats} repeats",
                table.axis, cell.mean_f1, cell.var_f1
            );
        }
        println!("swept {} cells in {:?}", table.cells.len(), started.elapsed());
        println!("wrote {}", csv_path.display());
    }
    Ok(())
}

fn write_chart(path: &Path, table: &SweepTable) -> Result<(), CliError> {
    let points: Vec<svg::ChartPoint> = table
        .cells
        .iter()
        .filter_map(|c| c.value.map(|v| (v, c.mean_f1, c.var_f1.sqrt())))
        .collect();
    let reference = table
        .cells
        .iter()
        .find(|c| c.value.is_none())
        .map(|c| ("adaptive", c.mean_f1));
    let chart = svg::line_chart(
        &format!("mean F1 vs {}", table.axis),
        &table.axis.to_string(),
        &points,
        reference,
    );
    fs::write(path, chart).map_err(runtime)
}

fn cmd_gen_suite(cli: &Cli, effective: &Effective) -> Result<(), CliError> {
    let (_, suite) = obtain_suite(effective, None)?;
    let path = cli.out.join("suite.json");
    save_suite(&path, &suite).map_err(runtime)?;
    if !cli.quiet {
        println!(
            "wrote {} ({} items, {} split)",
            path.display(),
            suite.items.len(),
            suite.split
        );
    }
    Ok(())
}

fn cmd_inspect_step(
    cli: &Cli,
    effective: &Effective,
    world_seed: u64,
    prompt_text: &str,
    step: usize,
) -> Result<(), CliError> {
    let lang = MockLanguage::generate(LanguageParams::default()).map_err(runtime)?;
    let prompt = Prompt::parse(lang.vocab(), prompt_text)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let world = MockWorld::generate(&lang, WorldParams::default(), world_seed).map_err(runtime)?;
    let img = world.render(&lang).map_err(runtime)?;
    let vlm = MockVlm::new(
        &lang,
        VlmParams {
            bias: effective.bench.bias,
            ..VlmParams::default()
        },
    )
    .map_err(runtime)?;
    let det = LabelDetector::new(lang.vocab());
    let engine = Engine::new(&vlm, lang.vocab(), lang.lexicon(), &det, effective.decoder)
        .map_err(runtime)?;

    let mut rng = ChaCha8Rng::seed_from_u64(effective.decoder.seed);
    let mut prefix = Vec::new();
    for s in 0..step {
        let (token, _) = engine
            .decode_step(&img, &prompt, &prefix, s, &mut rng)
            .map_err(runtime)?;
        if vlm.eos_token() == Some(token) {
            return Err(CliError::Runtime(format!(
                "sequence ended at step {s}, before the requested step {step}"
            )));
        }
        prefix.push(token);
    }
    let (token, trace) = engine
        .decode_step(&img, &prompt, &prefix, step, &mut rng)
        .map_err(runtime)?;

    let path = cli.out.join("step_trace.jsonl");
    write_traces(&path, &[trace.clone()]).map_err(runtime)?;
    if !cli.quiet {
        print_trace(&lang, &world, &trace, token);
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_trace(lang: &MockLanguage, world: &MockWorld, trace: &StepTrace, token: dep::core::TokenId) {
    let vocab = lang.vocab();
    let words = |ids: &[dep::core::TokenId]| -> String {
        ids.iter().map(|t| vocab.token(*t)).collect::<Vec<_>>().join(" ")
    };
    println!("prompt:  {}", trace.prompt.surface());
    println!(
        "world:   {}",
        world
            .present_objects()
            .iter()
            .map(|t| vocab.token(*t))
            .collect::<Vec<_>>()
            .join(", ")
    );
    if !trace.prefix.is_empty() {
        println!("prefix:  {}", words(&trace.prefix));
    }
    println!("step {}: N_eff {:.4}", trace.step, trace.neff);
    for (m, prov) in trace.perturbations.provenance().iter().enumerate() {
        let detail = match (prov.position, prov.replacement) {
            (Some(pos), Some(rep)) => format!(
                "pos {pos}: {} -> {}",
                vocab.token(trace.prompt.token_at(pos)),
                vocab.token(rep)
            ),
            _ => "unchanged".into(),
        };
        println!("  variant {m}: {:?}, {detail}", prov.strategy);
    }
    if trace.probe_degenerate {
        println!("  probe degenerate: every variant fell through to identity");
    }
    if let Some(moments) = &trace.moments {
        let lo = moments.mean.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = moments.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let vhi = moments.variance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("  attention mean range [{lo:.4}, {hi:.4}], max variance {vhi:.3e}");
    }
    if let Some(masks) = &trace.masks {
        println!("  evidence patches:   {:?}", masks.evidence_patches());
        println!("  suspicious patches: {:?}", masks.suspicious_patches());
    }
    if let Some(drift) = &trace.drift {
        let top: Vec<String> = drift
            .top_k(5)
            .into_iter()
            .map(|(i, v)| format!("{} {v:+.4}", vocab.token(dep::core::TokenId(i))))
            .collect();
        println!("  drift top-5: {}", top.join(", "));
    }
    let baseline = argmax_token(&trace.original.logits);
    println!(
        "chosen:  {:?} (baseline would pick {:?})",
        vocab.token(token),
        vocab.token(baseline)
    );
    let queried = trace
        .prompt
        .first_tagged(vocab, PosTag::Noun)
        .map(|(_, id)| vocab.token(id).to_string());
    if let Some(noun) = queried {
        println!("queried: {noun} ({})", if world.contains(vocab.id(&noun).expect("queried noun is in vocab")) { "present" } else { "absent" });
    }
}
