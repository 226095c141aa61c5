//! File formats the driver reads: toy-model configs, cost profiles, sweep
//! grids, method tables, and benchmark definitions.
//!
//! Every path written inside a config file resolves relative to the file's
//! own directory, so a config directory can be copied or checked out
//! anywhere and still self-describe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use specq_core::draft::NgramDrafter;
use specq_core::engine::{ModelConfig, Precision};
use specq_core::perf::{
    CostModel, HardwareProfile, MethodSpec, ModelDims, RoleCost, SchemeProfile,
};
use specq_core::{Error, Result};

/// Resolves `child` against the directory containing `config_path`.
pub fn sibling(config_path: &Path, child: &Path) -> PathBuf {
    if child.is_absolute() {
        child.to_path_buf()
    } else {
        config_path.parent().unwrap_or_else(|| Path::new(".")).join(child)
    }
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))
}

fn parse_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_file(path)?).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Toy-model description, the input of `make-toy-model`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFileConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// Precision tag: `fp32`, `w8`, `w4:<group>`, or `w4r:<group>`.
    pub precision: Precision,
}

impl ModelFileConfig {
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            vocab_size: self.vocab_size,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            precision: self.precision,
        })
    }
}

pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    parse_toml::<ModelFileConfig>(path)?.to_model_config()
}

/// Named hardware, scheme, and dimension profiles plus the role wiring that
/// turns them into a [`CostModel`].
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfileFile {
    /// Context length every forward is priced against.
    pub ctx_len: usize,
    pub hardware: HardwareProfile,
    #[serde(default)]
    pub schemes: BTreeMap<String, SchemeProfile>,
    #[serde(default)]
    pub dims: BTreeMap<String, ModelDims>,
    #[serde(default)]
    pub roles: BTreeMap<String, RoleRef>,
}

/// A role entry names a dims profile and a scheme profile.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleRef {
    pub dims: String,
    pub scheme: String,
}

impl CostProfileFile {
    pub fn scheme(&self, name: &str) -> Result<SchemeProfile> {
        self.schemes
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("profile defines no scheme named {name:?}")))
    }

    pub fn dims(&self, name: &str) -> Result<ModelDims> {
        self.dims
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("profile defines no dims named {name:?}")))
    }

    pub fn resolve_role(&self, role: &RoleRef) -> Result<RoleCost> {
        Ok(RoleCost {
            hw: self.hardware,
            scheme: self.scheme(&role.scheme)?,
            dims: self.dims(&role.dims)?,
        })
    }

    /// Wires the named roles into a cost model. `target` is mandatory;
    /// `intermediate` and `draft` are optional; anything else is a typo.
    pub fn to_cost_model(&self) -> Result<CostModel> {
        for key in self.roles.keys() {
            if !matches!(key.as_str(), "target" | "intermediate" | "draft") {
                return Err(Error::config(format!(
                    "unknown role {key:?}; expected target, intermediate, or draft"
                )));
            }
        }
        let target = self
            .roles
            .get("target")
            .ok_or_else(|| Error::config("cost profile defines no target role"))?;
        let model = CostModel {
            target: self.resolve_role(target)?,
            intermediate: self
                .roles
                .get("intermediate")
                .map(|r| self.resolve_role(r))
                .transpose()?,
            draft: self.roles.get("draft").map(|r| self.resolve_role(r)).transpose()?,
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn load_cost_profile(path: &Path) -> Result<CostProfileFile> {
    parse_toml(path)
}

/// Tree-size sweep definition: a grid of (d, n) points priced under each
/// listed target scheme, with measured accepted lengths supplied per point.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfigFile {
    /// Cost profile supplying hardware, schemes, and dims.
    pub profile: PathBuf,
    pub ctx_len: Option<usize>,
    pub grid_d: Vec<usize>,
    pub grid_n: Vec<usize>,
    /// Target schemes to sweep, in output order.
    pub schemes: Vec<String>,
    /// Dims profile the target runs at every sweep point.
    pub target_dims: String,
    pub draft: RoleRef,
    #[serde(rename = "tau", default)]
    pub taus: Vec<TauEntry>,
}

/// One measured accepted length for a sweep point under one scheme.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauEntry {
    pub scheme: String,
    pub d: usize,
    pub n: usize,
    pub value: f64,
}

pub fn load_sweep_config(path: &Path) -> Result<SweepConfigFile> {
    parse_toml(path)
}

/// Method-table definition: closed-form throughput predictions for a list
/// of strategies with measured accepted lengths.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodsConfigFile {
    pub profile: PathBuf,
    pub ctx_len: Option<usize>,
    pub methods: Vec<MethodSpec>,
}

pub fn load_methods_config(path: &Path) -> Result<MethodsConfigFile> {
    parse_toml(path)
}

/// Benchmark run definition.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfigFile {
    /// One of `ar`, `sp`, `eagle2`, `hierspec`.
    pub strategy: String,
    /// Prompt corpus, one JSON object per line.
    pub prompts: PathBuf,
    pub max_tokens: usize,
    /// Base seed for toy builds whose entries give no explicit seed. The
    /// target derives seed+0, the intermediate seed+1, the drafter seed+2.
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: StrategyParams,
    pub models: ModelsSection,
    pub cost: CostRef,
}

/// Strategy knobs; which ones matter depends on the strategy.
#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyParams {
    /// Draft length (sp, eagle2) or target draft length (hierspec).
    pub d: Option<usize>,
    /// Tree beam width (eagle2, hierspec stage one).
    pub k: Option<usize>,
    /// Tree size (eagle2).
    pub n: Option<usize>,
    /// Stage-one draft depth (hierspec).
    pub d1: Option<usize>,
    /// Stage-one tree size (hierspec).
    pub n1: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsSection {
    pub target: ModelEntry,
    pub intermediate: Option<ModelEntry>,
    pub drafter: Option<ModelEntry>,
}

/// One model source: a checkpoint, a toy build, or (drafter only) an
/// n-gram table. Exactly one of `path`, `config`, `ngram` must be set.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub path: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Overrides the precision of a toy build or requantizes a checkpoint.
    pub precision: Option<Precision>,
    pub ngram: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRef {
    pub profile: PathBuf,
    pub ctx_len: Option<usize>,
}

pub fn load_bench_config(path: &Path) -> Result<BenchConfigFile> {
    parse_toml(path)
}

/// N-gram drafter table, stored as JSON. Probability maps are sparse;
/// unlisted tokens get zero.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NgramFile {
    pub vocab_size: usize,
    #[serde(default)]
    pub entries: Vec<NgramEntryFile>,
    /// `"uniform"` spreads fallback mass evenly over non-control tokens;
    /// absent means contexts matching no entry draft nothing.
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NgramEntryFile {
    pub context: Vec<u32>,
    pub probs: BTreeMap<String, f32>,
}

impl NgramFile {
    fn dense(&self, probs: &BTreeMap<String, f32>) -> Result<Vec<f32>> {
        let mut row = vec![0.0f32; self.vocab_size];
        for (tok, &p) in probs {
            let t: usize = tok.parse().map_err(|_| {
                Error::config(format!("n-gram token key {tok:?} is not a token id"))
            })?;
            if t >= self.vocab_size {
                return Err(Error::config(format!(
                    "n-gram token {t} outside vocab of {}",
                    self.vocab_size
                )));
            }
            row[t] = p;
        }
        Ok(row)
    }

    pub fn build(&self) -> Result<NgramDrafter> {
        let fallback = match self.fallback.as_deref() {
            None => None,
            Some("uniform") => {
                if self.vocab_size < 3 {
                    return Err(Error::config(
                        "uniform fallback needs a vocab beyond the control tokens",
                    ));
                }
                // Control tokens sit at the top of the vocab and are never
                // worth drafting.
                let drawable = self.vocab_size - 2;
                let mut row = vec![1.0f32 / drawable as f32; self.vocab_size];
                row[self.vocab_size - 2] = 0.0;
                row[self.vocab_size - 1] = 0.0;
                Some(row)
            }
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown fallback {other:?}; expected \"uniform\" or nothing"
                )))
            }
        };
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            entries.push((e.context.clone(), self.dense(&e.probs)?));
        }
        NgramDrafter::new(self.vocab_size, entries, fallback)
    }
}

pub fn load_ngram(path: &Path) -> Result<NgramFile> {
    serde_json::from_str(&read_file(path)?)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))
}
