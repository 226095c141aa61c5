use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use specq_cli::bench::{run_bench, write_csv, BenchOptions, Strategy};
use specq_cli::compare::{compare_report, read_csv};
use specq_cli::config::{load_cost_profile, load_model_config, load_ngram};
use specq_cli::sweep::run_cost_sweep;
use specq_core::decode::{ar_decode, eagle2_decode, hierspec_decode, vanilla_sp_decode};
use specq_core::draft::{Drafter, ModelDrafter};
use specq_core::engine::{
    build_toy_model, encode_prompt, load_checkpoint, quantize_weights, save_checkpoint,
    ModelWeights, Precision,
};
use specq_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "specq",
    version,
    about = "Speculative decoding laboratory: toy-model checkpoints, seeded benchmarks, cost sweeps"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a deterministic toy transformer checkpoint from a config file.
    MakeToyModel {
        /// Toy-model description (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Requantize a checkpoint's linear weights.
    Quantize {
        /// Source checkpoint.
        #[arg(long)]
        input: PathBuf,
        /// Weight width: 4 or 8.
        #[arg(long)]
        bits: u8,
        /// Group size for 4-bit quantization (one scale per group).
        #[arg(long)]
        group: Option<usize>,
        /// Hadamard-rotate weights before 4-bit quantization.
        #[arg(long)]
        rotate: bool,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode one prompt and print the result as JSON.
    Decode {
        /// Target model: a checkpoint, or a toy-model TOML built on the fly.
        #[arg(long)]
        target: PathBuf,
        /// Drafter: a checkpoint, a toy-model TOML, or an n-gram JSON table.
        #[arg(long)]
        drafter: Option<PathBuf>,
        /// Intermediate model for hierspec: a checkpoint or toy-model TOML.
        #[arg(long)]
        intermediate: Option<PathBuf>,
        /// One of: ar, sp, eagle2, hierspec.
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        max_tokens: usize,
        /// Draft length (sp, eagle2) or target draft length (hierspec).
        #[arg(long, default_value_t = 4)]
        d: usize,
        /// Tree beam width.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Tree size (eagle2).
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Stage-one draft depth (hierspec).
        #[arg(long, default_value_t = 2)]
        d1: usize,
        /// Stage-one tree size (hierspec).
        #[arg(long, default_value_t = 6)]
        n1: usize,
        /// Cost profile; when given, the output includes simulated timing.
        #[arg(long)]
        cost: Option<PathBuf>,
        /// Seed for toy builds; the intermediate derives seed+1, the
        /// drafter seed+2.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a benchmark config over its prompt corpus and write a CSV.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// CSV path to write.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; overrides SPECQ_THREADS. Defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
        /// Measure wall time per prompt (informational; breaks no
        /// determinism because wall time is excluded from comparisons).
        #[arg(long)]
        wall: bool,
        /// Replaces the config's base seed for toy-model builds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Price a tree-size grid or a method table and emit CSV.
    CostSweep {
        #[arg(long)]
        config: PathBuf,
        /// CSV path to write; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diff two benchmark CSVs; exits nonzero when outputs changed.
    Compare { a: PathBuf, b: PathBuf },
}

/// Loads a model argument: `.toml` builds a toy model, anything else loads
/// a checkpoint.
fn load_model_arg(path: &Path, seed: u64) -> Result<ModelWeights> {
    if path.extension().and_then(|e| e.to_str()) == Some("toml") {
        build_toy_model(&load_model_config(path)?, seed)
    } else {
        load_checkpoint(path)
    }
}

/// Loads a drafter argument: `.json` parses an n-gram table, everything
/// else goes through [`load_model_arg`].
fn load_drafter_arg(path: &Path, seed: u64) -> Result<Box<dyn Drafter>> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        Ok(Box::new(load_ngram(path)?.build()?))
    } else {
        Ok(Box::new(ModelDrafter::new(load_model_arg(path, seed)?)?))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_decode(
    target: &Path,
    drafter: Option<&Path>,
    intermediate: Option<&Path>,
    strategy: &str,
    prompt: &str,
    max_tokens: usize,
    d: usize,
    k: usize,
    n: usize,
    d1: usize,
    n1: usize,
    cost: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let strategy = Strategy::parse(strategy)?;
    let target = load_model_arg(target, seed)?;
    let tokens = encode_prompt(&target.config, prompt)?;

    let mut drafter = match (strategy, drafter) {
        (Strategy::Ar, _) => None,
        (_, Some(path)) => Some(load_drafter_arg(path, seed.wrapping_add(2))?),
        (_, None) => {
            return Err(Error::config(format!("strategy {} needs --drafter", strategy.label())))
        }
    };
    let out = match strategy {
        Strategy::Ar => ar_decode(&target, &tokens, max_tokens)?,
        Strategy::Sp => {
            vanilla_sp_decode(&target, drafter.as_mut().unwrap().as_mut(), &tokens, max_tokens, d)?
        }
        Strategy::Eagle2 => eagle2_decode(
            &target,
            drafter.as_mut().unwrap().as_mut(),
            &tokens,
            max_tokens,
            d,
            k,
            n,
        )?,
        Strategy::HierSpec => {
            let inter_path = intermediate
                .ok_or_else(|| Error::config("strategy hierspec needs --intermediate"))?;
            let inter = load_model_arg(inter_path, seed.wrapping_add(1))?;
            hierspec_decode(
                &target,
                &inter,
                drafter.as_mut().unwrap().as_mut(),
                &tokens,
                max_tokens,
                d,
                d1,
                k,
                n1,
            )?
        }
    };

    let mut doc = serde_json::json!({
        "strategy": strategy.label(),
        "text": out.text,
        "tokens": out.tokens,
        "stats": out.stats,
    });
    if let Some(cost_path) = cost {
        let profile = load_cost_profile(cost_path)?;
        let times = out.simulate_cost(&profile.to_cost_model()?)?;
        doc["sim"] = serde_json::json!({
            "total_s": times.total_s(),
            "decode_s": times.decode_s(),
            "drafting_s": times.drafting_s,
            "verification_s": times.verification_s,
            "target_prefill_s": times.target_prefill_s,
            "draft_prefill_s": times.draft_prefill_s,
            "tokens_per_s": out.stats.tokens_generated as f64 / times.decode_s(),
        });
    }
    println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
    Ok(())
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::MakeToyModel { config, seed, out } => {
            let weights = build_toy_model(&load_model_config(&config)?, seed)?;
            save_checkpoint(&out, &weights)?;
            println!("wrote {} ({})", out.display(), weights.config.precision);
        }
        Cmd::Quantize { input, bits, group, rotate, out } => {
            let precision = match (bits, group) {
                (8, None) => Precision::W8,
                (8, Some(_)) => {
                    return Err(Error::config("8-bit quantization is per-channel; drop --group"))
                }
                (4, Some(g)) => Precision::W4 { group: g, rotate },
                (4, None) => return Err(Error::config("4-bit quantization needs --group")),
                (b, _) => return Err(Error::config(format!("unsupported bit width {b}"))),
            };
            if rotate && bits != 4 {
                return Err(Error::config("--rotate only applies to 4-bit quantization"));
            }
            let weights = quantize_weights(&load_checkpoint(&input)?, precision)?;
            save_checkpoint(&out, &weights)?;
            println!("wrote {} ({})", out.display(), weights.config.precision);
        }
        Cmd::Decode {
            target,
            drafter,
            intermediate,
            strategy,
            prompt,
            max_tokens,
            d,
            k,
            n,
            d1,
            n1,
            cost,
            seed,
        } => cmd_decode(
            &target,
            drafter.as_deref(),
            intermediate.as_deref(),
            &strategy,
            &prompt,
            max_tokens,
            d,
            k,
            n,
            d1,
            n1,
            cost.as_deref(),
            seed,
        )?,
        Cmd::Bench { config, out, threads, wall, seed } => {
            let report = run_bench(&config, &BenchOptions { threads, wall, seed })?;
            write_csv(&out, &report.rows)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Cmd::CostSweep { config, out } => {
            let csv = run_cost_sweep(&config)?.to_csv();
            match out {
                Some(path) => std::fs::write(&path, csv)
                    .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))?,
                None => print!("{csv}"),
            }
        }
        Cmd::Compare { a, b } => {
            let report = compare_report(&read_csv(&a)?, &read_csv(&b)?)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // Rust ignores SIGPIPE by default, which turns `specq ... | head` into a
    // broken-pipe panic; restore the default so pipelines end quietly.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
