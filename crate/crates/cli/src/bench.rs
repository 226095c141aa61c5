//! Seeded benchmark runs over a prompt corpus, reduced to CSV rows and
//! per-category aggregates.
//!
//! Determinism contract: the emitted CSV depends only on the config file,
//! the seed, and the build. Prompts may decode on any number of threads;
//! rows are reassembled in corpus order and aggregates are reduced in that
//! same order, so thread count never changes a byte of output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use specq_core::decode::{
    ar_decode, eagle2_decode, hierspec_decode, vanilla_sp_decode, DecodeOutput,
};
use specq_core::draft::{Drafter, ModelDrafter};
use specq_core::engine::{
    build_toy_model, encode_prompt, load_checkpoint, quantize_weights, ModelWeights,
};
use specq_core::perf::{CostModel, TimeBreakdown};
use specq_core::{Error, Result};

use crate::config::{
    load_bench_config, load_cost_profile, load_model_config, load_ngram, sibling, BenchConfigFile,
    ModelEntry, NgramFile, StrategyParams,
};

/// One benchmark prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRecord {
    pub id: String,
    pub category: String,
    pub prompt: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptLine {
    id: String,
    prompt: String,
    category: Option<String>,
}

/// A field that will be written into unquoted CSV must stay delimiter-free.
fn csv_safe(what: &str, value: &str) -> Result<()> {
    if value.contains([',', '"', '\n', '\r']) {
        return Err(Error::input(format!("{what} {value:?} contains CSV delimiter characters")));
    }
    Ok(())
}

/// Reads a prompt corpus: one JSON object per line with fields `id`,
/// `prompt`, and optional `category`. Blank lines are permitted. Order is
/// preserved; ids must be unique.
pub fn ingest_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    let text = crate::config::read_file(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PromptLine = serde_json::from_str(line)
            .map_err(|e| Error::input(format!("{}: line {}: {e}", path.display(), idx + 1)))?;
        if !seen.insert(parsed.id.clone()) {
            return Err(Error::input(format!(
                "{}: line {}: duplicate prompt id {:?}",
                path.display(),
                idx + 1,
                parsed.id
            )));
        }
        let category = parsed.category.unwrap_or_else(|| "uncategorized".to_string());
        csv_safe("prompt id", &parsed.id)?;
        csv_safe("category", &category)?;
        out.push(PromptRecord { id: parsed.id, category, prompt: parsed.prompt });
    }
    Ok(out)
}

/// Benchmark strategies the driver can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Ar,
    Sp,
    Eagle2,
    HierSpec,
}

impl Strategy {
    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "ar" => Ok(Strategy::Ar),
            "sp" => Ok(Strategy::Sp),
            "eagle2" => Ok(Strategy::Eagle2),
            "hierspec" => Ok(Strategy::HierSpec),
            other => Err(Error::config(format!(
                "unknown strategy {other:?}; expected ar, sp, eagle2, or hierspec"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Ar => "ar",
            Strategy::Sp => "sp",
            Strategy::Eagle2 => "eagle2",
            Strategy::HierSpec => "hierspec",
        }
    }
}

/// Fully resolved strategy knobs. The CSV reports d, n, k as the strategy
/// used them: sequence drafts have no tree, so n and k stay zero, and
/// two-stage runs report their stage-one tree (n1, k) under n, k.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedParams {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub d1: usize,
    pub n1: usize,
}

fn resolve_params(strategy: Strategy, p: &StrategyParams) -> Result<ResolvedParams> {
    let need = |v: Option<usize>, name: &str| {
        v.ok_or_else(|| Error::config(format!("strategy {} needs params.{name}", strategy.label())))
    };
    let r = match strategy {
        Strategy::Ar => ResolvedParams { d: 0, k: 0, n: 0, d1: 0, n1: 0 },
        Strategy::Sp => ResolvedParams { d: need(p.d, "d")?, k: 0, n: 0, d1: 0, n1: 0 },
        Strategy::Eagle2 => {
            let r = ResolvedParams {
                d: need(p.d, "d")?,
                k: need(p.k, "k")?,
                n: need(p.n, "n")?,
                d1: 0,
                n1: 0,
            };
            if r.n < r.d {
                return Err(Error::config(format!(
                    "eagle2 tree size n={} cannot cover draft depth d={}",
                    r.n, r.d
                )));
            }
            r
        }
        Strategy::HierSpec => {
            let r = ResolvedParams {
                d: need(p.d, "d")?,
                k: need(p.k, "k")?,
                n: need(p.n1, "n1")?,
                d1: need(p.d1, "d1")?,
                n1: need(p.n1, "n1")?,
            };
            if r.d < r.d1 {
                return Err(Error::config(format!(
                    "hierspec needs d >= d1, got d={} d1={}",
                    r.d, r.d1
                )));
            }
            r
        }
    };
    Ok(r)
}

/// One CSV row of a benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub prompt_id: String,
    pub category: String,
    pub strategy: String,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    /// Delivered tokens per target verification pass.
    pub tau: f64,
    /// Tokens delivered after the prompt. A speculative step may commit
    /// past max_tokens; the overshoot is trimmed before delivery.
    pub tokens: u64,
    pub target_forwards: u64,
    /// Measured wall seconds; 0 unless wall timing was requested.
    pub wall_s: f64,
    /// Simulated seconds for the whole run, prefill included.
    pub sim_s: f64,
    /// Simulated seconds of non-target prompt absorption: the latency cost
    /// of keeping a drafter around at all.
    pub draft_latency_s: f64,
}

pub const CSV_HEADER: &str =
    "prompt_id,category,strategy,d,n,k,tau,tokens,target_forwards,wall_s,sim_s,draft_latency_s";

impl BenchRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{},{},{:.6},{:.6},{:.9}",
            self.prompt_id,
            self.category,
            self.strategy,
            self.d,
            self.n,
            self.k,
            self.tau,
            self.tokens,
            self.target_forwards,
            self.wall_s,
            self.sim_s,
            self.draft_latency_s
        )
    }
}

/// Serializes rows to CSV: UTF-8, header row, fixed column order.
pub fn csv_bytes(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    out
}

/// Aggregate statistics over a set of rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub prompts: usize,
    pub tokens: u64,
    pub target_forwards: u64,
    /// Micro-averaged accepted length: total tokens over total passes.
    pub tau: f64,
    /// Tokens per simulated steady-state decoding second.
    pub tokens_per_s_sim: f64,
    /// Tokens per measured wall second; absent without wall timing.
    pub tokens_per_s_wall: Option<f64>,
    pub draft_latency_s_mean: f64,
    pub drafting_s: f64,
    pub verification_s: f64,
}

/// A finished benchmark: rows in corpus order plus aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub tool_version: String,
    pub strategy: String,
    /// The config text this run executed, so the report can re-run itself.
    pub config_echo: String,
    pub overall: Aggregate,
    pub per_category: BTreeMap<String, Aggregate>,
    pub rows: Vec<BenchRow>,
}

/// Run-time options not stored in the config file.
#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    pub threads: Option<usize>,
    /// Measure wall time per prompt. Wall numbers are informational only;
    /// nothing asserts on them.
    pub wall: bool,
    /// Replaces the config's base seed for toy-model builds.
    pub seed: Option<u64>,
}

enum DrafterSource {
    Model(ModelWeights),
    Ngram(NgramFile),
}

impl DrafterSource {
    fn fresh(&self) -> Result<Box<dyn Drafter>> {
        match self {
            DrafterSource::Model(w) => Ok(Box::new(ModelDrafter::new(w.clone())?)),
            DrafterSource::Ngram(f) => Ok(Box::new(f.build()?)),
        }
    }
}

fn load_weights(
    entry: &ModelEntry,
    config_path: &Path,
    seed: Option<u64>,
    role: &str,
) -> Result<ModelWeights> {
    match (&entry.path, &entry.config, &entry.ngram) {
        (Some(_), None, None) | (None, Some(_), None) => {}
        (None, None, Some(_)) => {
            return Err(Error::config(format!(
                "model {role} cannot be an n-gram table; only the drafter can"
            )))
        }
        _ => {
            return Err(Error::config(format!(
                "model {role} must set exactly one of path, config, ngram"
            )))
        }
    }
    let weights = if let Some(path) = &entry.path {
        let mut w = load_checkpoint(sibling(config_path, path))?;
        if let Some(precision) = entry.precision {
            w = quantize_weights(&w, precision)?;
        }
        w
    } else {
        let mut cfg = load_model_config(&sibling(config_path, entry.config.as_ref().unwrap()))?;
        if let Some(precision) = entry.precision {
            cfg.precision = precision;
        }
        let seed = seed.ok_or_else(|| {
            Error::config(format!("toy model {role} needs a seed (entry or base)"))
        })?;
        build_toy_model(&cfg, seed)?
    };
    Ok(weights)
}

fn load_drafter_source(
    entry: &ModelEntry,
    config_path: &Path,
    seed: Option<u64>,
) -> Result<DrafterSource> {
    if let Some(ngram) = &entry.ngram {
        if entry.path.is_some() || entry.config.is_some() {
            return Err(Error::config("drafter must set exactly one of path, config, ngram"));
        }
        return Ok(DrafterSource::Ngram(load_ngram(&sibling(config_path, ngram))?));
    }
    Ok(DrafterSource::Model(load_weights(entry, config_path, seed, "drafter")?))
}

struct Workload {
    strategy: Strategy,
    params: ResolvedParams,
    max_tokens: usize,
    target: ModelWeights,
    intermediate: Option<ModelWeights>,
    drafter: Option<DrafterSource>,
    cost: CostModel,
}

impl Workload {
    fn decode_one(&self, prompt: &str) -> Result<DecodeOutput> {
        let tokens = encode_prompt(&self.target.config, prompt)?;
        let p = &self.params;
        match self.strategy {
            Strategy::Ar => ar_decode(&self.target, &tokens, self.max_tokens),
            Strategy::Sp => {
                let mut drafter = self.drafter.as_ref().unwrap().fresh()?;
                vanilla_sp_decode(&self.target, drafter.as_mut(), &tokens, self.max_tokens, p.d)
            }
            Strategy::Eagle2 => {
                let mut drafter = self.drafter.as_ref().unwrap().fresh()?;
                eagle2_decode(
                    &self.target,
                    drafter.as_mut(),
                    &tokens,
                    self.max_tokens,
                    p.d,
                    p.k,
                    p.n,
                )
            }
            Strategy::HierSpec => {
                let mut drafter = self.drafter.as_ref().unwrap().fresh()?;
                hierspec_decode(
                    &self.target,
                    self.intermediate.as_ref().unwrap(),
                    drafter.as_mut(),
                    &tokens,
                    self.max_tokens,
                    p.d,
                    p.d1,
                    p.k,
                    p.n1,
                )
            }
        }
    }

    fn run_prompt(&self, rec: &PromptRecord, wall: bool) -> Result<(BenchRow, TimeBreakdown)> {
        let started = Instant::now();
        let out = self.decode_one(&rec.prompt)?;
        let wall_s = if wall { started.elapsed().as_secs_f64() } else { 0.0 };
        let times = out.simulate_cost(&self.cost)?;
        // Rows count delivered tokens, not committed ones: a speculative
        // step can overshoot max_tokens and the overshoot is trimmed from
        // the output, so delivered counts are what lossless strategies must
        // agree on. tau follows the same convention to keep aggregates
        // recomputable from rows alone.
        let delivered = out.tokens.len() as u64;
        let row = BenchRow {
            prompt_id: rec.id.clone(),
            category: rec.category.clone(),
            strategy: self.strategy.label().to_string(),
            d: self.params.d,
            n: self.params.n,
            k: self.params.k,
            tau: if out.stats.target_forwards == 0 {
                1.0
            } else {
                delivered as f64 / out.stats.target_forwards as f64
            },
            tokens: delivered,
            target_forwards: out.stats.target_forwards,
            wall_s,
            sim_s: times.total_s(),
            draft_latency_s: times.draft_prefill_s,
        };
        Ok((row, times))
    }
}

fn build_workload(
    config: &BenchConfigFile,
    config_path: &Path,
    opts: &BenchOptions,
) -> Result<Workload> {
    let strategy = Strategy::parse(&config.strategy)?;
    let params = resolve_params(strategy, &config.params)?;
    // Seed precedence: the command line beats everything, an entry's own
    // seed beats the config base, and roles offset the shared bases so no
    // two toy models are ever built alike. Target +0, intermediate +1,
    // drafter +2.
    let seed_for = |entry: &ModelEntry, offset: u64| -> Option<u64> {
        opts.seed
            .map(|s| s.wrapping_add(offset))
            .or(entry.seed)
            .or(config.seed.map(|s| s.wrapping_add(offset)))
    };

    let target_entry = &config.models.target;
    let target = load_weights(target_entry, config_path, seed_for(target_entry, 0), "target")?;
    let intermediate = match (strategy, &config.models.intermediate) {
        (Strategy::HierSpec, Some(entry)) => {
            Some(load_weights(entry, config_path, seed_for(entry, 1), "intermediate")?)
        }
        (Strategy::HierSpec, None) => {
            return Err(Error::config("hierspec needs models.intermediate"))
        }
        _ => None,
    };
    let drafter = match (strategy, &config.models.drafter) {
        (Strategy::Ar, _) => None,
        (_, Some(entry)) => Some(load_drafter_source(entry, config_path, seed_for(entry, 2))?),
        (_, None) => {
            return Err(Error::config(format!(
                "strategy {} needs models.drafter",
                strategy.label()
            )))
        }
    };

    let profile = load_cost_profile(&sibling(config_path, &config.cost.profile))?;
    let mut profile = profile;
    if let Some(ctx) = config.cost.ctx_len {
        profile.ctx_len = ctx;
    }
    let cost = profile.to_cost_model()?;

    Ok(Workload {
        strategy,
        params,
        max_tokens: config.max_tokens,
        target,
        intermediate,
        drafter,
        cost,
    })
}

fn aggregate(pairs: &[(BenchRow, TimeBreakdown)], wall: bool) -> Aggregate {
    let tokens: u64 = pairs.iter().map(|(r, _)| r.tokens).sum();
    let forwards: u64 = pairs.iter().map(|(r, _)| r.target_forwards).sum();
    let decode_s: f64 = pairs.iter().map(|(_, t)| t.decode_s()).sum();
    let wall_s: f64 = pairs.iter().map(|(r, _)| r.wall_s).sum();
    let draft_latency: f64 = pairs.iter().map(|(r, _)| r.draft_latency_s).sum();
    Aggregate {
        prompts: pairs.len(),
        tokens,
        target_forwards: forwards,
        tau: if forwards == 0 { 1.0 } else { tokens as f64 / forwards as f64 },
        tokens_per_s_sim: if decode_s > 0.0 { tokens as f64 / decode_s } else { 0.0 },
        tokens_per_s_wall: (wall && wall_s > 0.0).then(|| tokens as f64 / wall_s),
        draft_latency_s_mean: if pairs.is_empty() {
            0.0
        } else {
            draft_latency / pairs.len() as f64
        },
        drafting_s: pairs.iter().map(|(_, t)| t.drafting_s).sum(),
        verification_s: pairs.iter().map(|(_, t)| t.verification_s).sum(),
    }
}

fn resolve_threads(requested: Option<usize>) -> Result<Option<usize>> {
    if requested.is_some() {
        return Ok(requested);
    }
    match std::env::var("SPECQ_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Error::config(format!("SPECQ_THREADS={v:?} is not a thread count")))?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

/// Runs the benchmark described by `config_path`. Any prompt failure aborts
/// the run, naming the prompt id.
pub fn run_bench(config_path: &Path, opts: &BenchOptions) -> Result<BenchReport> {
    let config_text = crate::config::read_file(config_path)?;
    let config = load_bench_config(config_path)?;
    let prompts = ingest_prompts(&sibling(config_path, &config.prompts))?;
    let workload = build_workload(&config, config_path, opts)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_threads(opts.threads)?.unwrap_or(0))
        .build()
        .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
    let results: Vec<Result<(BenchRow, TimeBreakdown)>> = pool.install(|| {
        prompts
            .par_iter()
            .map(|rec| {
                workload
                    .run_prompt(rec, opts.wall)
                    .map_err(|e| Error::input(format!("prompt {}: {e}", rec.id)))
            })
            .collect()
    });
    let mut pairs = Vec::with_capacity(results.len());
    for r in results {
        pairs.push(r?);
    }

    let mut per_category: BTreeMap<String, Vec<(BenchRow, TimeBreakdown)>> = BTreeMap::new();
    for pair in &pairs {
        per_category.entry(pair.0.category.clone()).or_default().push(pair.clone());
    }

    Ok(BenchReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        strategy: workload.strategy.label().to_string(),
        config_echo: config_text,
        overall: aggregate(&pairs, opts.wall),
        per_category: per_category
            .into_iter()
            .map(|(cat, group)| (cat.clone(), aggregate(&group, opts.wall)))
            .collect(),
        rows: pairs.into_iter().map(|(row, _)| row).collect(),
    })
}

/// Writes rows to `path` in the fixed CSV format.
pub fn write_csv(path: &PathBuf, rows: &[BenchRow]) -> Result<()> {
    std::fs::write(path, csv_bytes(rows))
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))
}
