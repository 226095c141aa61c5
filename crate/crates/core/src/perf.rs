//! Roofline-style latency model for speculative decoding.
//!
//! A forward pass is costed as the maximum of a weight-streaming term and a
//! compute term. The streaming term pays for reading every weight byte plus
//! the KV cache once per pass and does not depend on how many tokens the pass
//! carries; the compute term grows linearly with the token count. Batching
//! drafted tokens into one verification pass is therefore close to free until
//! the pass crosses from the memory-bound into the compute-bound regime, and
//! weight quantization moves that crossover to smaller batches by shrinking
//! the streaming term.
//!
//! On top of the per-pass cost the module provides the per-token latency
//! identity for draft-then-verify decoding,
//!
//! ```text
//! T_avg / T_target = (d * T_draft / T_target + T_verify / T_target) / tau
//! ```
//!
//! where `tau` is the tokens committed per target pass, plus a simulated
//! clock that replays a decode run's forward-event log through the cost
//! model, a tree-size sweep, and closed-form throughput predictions for the
//! decoding strategies in [`crate::decode`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Accelerator throughput ceilings with sustained-efficiency derates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Peak memory bandwidth in bytes per second.
    pub mem_bandwidth: f64,
    /// Peak arithmetic throughput in FLOP per second.
    pub compute_throughput: f64,
    /// Fraction of peak bandwidth sustained in steady state, in (0, 1].
    pub bandwidth_efficiency: f64,
    /// Fraction of peak compute sustained in steady state, in (0, 1].
    pub compute_efficiency: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("mem_bandwidth", self.mem_bandwidth), ("compute_throughput", self.compute_throughput)]
        {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("bandwidth_efficiency", self.bandwidth_efficiency),
            ("compute_efficiency", self.compute_efficiency),
        ] {
            if !v.is_finite() || v <= 0.0 || v > 1.0 {
                return Err(Error::config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// How a weight-storage scheme changes the cost of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeProfile {
    /// Bytes streamed per weight, including quantization metadata.
    /// 2.0 for fp16; 0.53125 for 4-bit codes with one f32 scale per 128.
    pub bytes_per_weight: f64,
    /// Multiplier on the matmul FLOP cost. Below 1.0 when the scheme's
    /// arithmetic runs on a faster unit than the fp16 baseline.
    pub activation_compute_scale: f64,
    /// Extra FLOPs spent per weight to dequantize it before use.
    pub dequant_overhead_per_weight: f64,
}

impl SchemeProfile {
    pub fn validate(&self) -> Result<()> {
        if !self.bytes_per_weight.is_finite() || self.bytes_per_weight <= 0.0 {
            return Err(Error::config(format!(
                "bytes_per_weight must be positive, got {}",
                self.bytes_per_weight
            )));
        }
        if !self.activation_compute_scale.is_finite() || self.activation_compute_scale <= 0.0 {
            return Err(Error::config(format!(
                "activation_compute_scale must be positive, got {}",
                self.activation_compute_scale
            )));
        }
        if !self.dequant_overhead_per_weight.is_finite() || self.dequant_overhead_per_weight < 0.0 {
            return Err(Error::config(format!(
                "dequant_overhead_per_weight must be non-negative, got {}",
                self.dequant_overhead_per_weight
            )));
        }
        Ok(())
    }
}

/// Size of the model a role runs, in cost-relevant units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Parameter count.
    pub params: f64,
    /// Bytes of KV cache read per token of context per pass.
    pub kv_bytes_per_token: f64,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if !self.params.is_finite() || self.params <= 0.0 {
            return Err(Error::config(format!("params must be positive, got {}", self.params)));
        }
        if !self.kv_bytes_per_token.is_finite() || self.kv_bytes_per_token < 0.0 {
            return Err(Error::config(format!(
                "kv_bytes_per_token must be non-negative, got {}",
                self.kv_bytes_per_token
            )));
        }
        Ok(())
    }
}

/// Seconds for one forward pass that carries `n_tokens` new tokens against
/// `ctx_len` tokens of cached context.
///
/// The pass costs the slower of two terms: streaming every weight byte plus
/// the KV cache through memory, and running `2 * params` FLOPs per token
/// (scaled by the scheme) plus a one-off dequantization sweep over the
/// weights. The streaming term is independent of `n_tokens`, which is what
/// makes batched verification cheap below the crossover.
pub fn forward_cost(
    hw: &HardwareProfile,
    scheme: &SchemeProfile,
    dims: &ModelDims,
    n_tokens: usize,
    ctx_len: usize,
) -> f64 {
    let mem_bytes =
        dims.params * scheme.bytes_per_weight + dims.kv_bytes_per_token * ctx_len as f64;
    let mem_s = mem_bytes / (hw.mem_bandwidth * hw.bandwidth_efficiency);
    let matmul_flops = 2.0 * dims.params * n_tokens as f64 * scheme.activation_compute_scale;
    let dequant_flops = scheme.dequant_overhead_per_weight * dims.params;
    let compute_s =
        (matmul_flops + dequant_flops) / (hw.compute_throughput * hw.compute_efficiency);
    mem_s.max(compute_s)
}

/// One model role's fully resolved cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleCost {
    pub hw: HardwareProfile,
    pub scheme: SchemeProfile,
    pub dims: ModelDims,
}

impl RoleCost {
    pub fn validate(&self) -> Result<()> {
        self.hw.validate()?;
        self.scheme.validate()?;
        self.dims.validate()
    }

    /// Seconds for one pass of this role. See [`forward_cost`].
    pub fn forward_cost(&self, n_tokens: usize, ctx_len: usize) -> f64 {
        forward_cost(&self.hw, &self.scheme, &self.dims, n_tokens, ctx_len)
    }
}

/// Cost parameters for every role a decode run can exercise.
///
/// `intermediate` and `draft` may be absent when the run never forwards a
/// model in that role; replaying an event log that does reference a missing
/// role is an error rather than a silently zero-cost pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub target: RoleCost,
    pub intermediate: Option<RoleCost>,
    pub draft: Option<RoleCost>,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        if let Some(im) = &self.intermediate {
            im.validate()?;
        }
        if let Some(dr) = &self.draft {
            dr.validate()?;
        }
        Ok(())
    }

    /// Cost parameters for `role`, erroring when the model never configured
    /// that role.
    pub fn role_cost(&self, role: Role) -> Result<&RoleCost> {
        match role {
            Role::Target => Ok(&self.target),
            Role::Intermediate => self
                .intermediate
                .as_ref()
                .ok_or_else(|| Error::config("event log references the intermediate role but the cost model has no intermediate entry")),
            Role::Draft => self
                .draft
                .as_ref()
                .ok_or_else(|| Error::config("event log references the draft role but the cost model has no draft entry")),
        }
    }
}

/// Which model performed a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Target,
    Intermediate,
    Draft,
}

/// Why a forward pass was performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    /// Absorbing the prompt before decoding starts.
    Prefill,
    /// Proposing candidate tokens.
    Drafting,
    /// Scoring proposed tokens to accept or reject them (for the target, this
    /// includes plain autoregressive steps, which verify an empty draft).
    Verification,
}

/// Record of one forward pass during a decode run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardEvent {
    pub role: Role,
    pub purpose: Purpose,
    /// Tokens carried by the pass.
    pub n_tokens: usize,
    /// Cached context length the pass attended over.
    pub ctx_len: usize,
}

/// Simulated wall time of a decode run, split by what the time was spent on.
///
/// Target prefill is kept out of `decode_s` so that per-token throughput
/// reflects steady-state decoding; draft prefill is reported separately
/// because it is the latency a draft model adds before the first token.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeBreakdown {
    /// Seconds in drafting passes, plus intermediate-model verification in
    /// two-stage decoding (time spent producing candidates for the target).
    pub drafting_s: f64,
    /// Seconds in target verification passes.
    pub verification_s: f64,
    /// Seconds the target spent absorbing the prompt.
    pub target_prefill_s: f64,
    /// Seconds non-target models spent absorbing the prompt.
    pub draft_prefill_s: f64,
    /// Number of drafting-bucket passes.
    pub drafting_forwards: u64,
    /// Number of target verification passes.
    pub verification_forwards: u64,
}

impl TimeBreakdown {
    /// Steady-state decoding seconds: drafting plus target verification.
    pub fn decode_s(&self) -> f64 {
        self.drafting_s + self.verification_s
    }

    /// Seconds from prompt arrival to the end of decoding.
    pub fn total_s(&self) -> f64 {
        self.decode_s() + self.target_prefill_s + self.draft_prefill_s
    }
}

/// Replays a forward-event log through the cost model.
///
/// Every event lands in exactly one bucket of the returned breakdown:
/// target verification in `verification_s`, prefill in `target_prefill_s` or
/// `draft_prefill_s` by role, and everything else (all drafting, plus
/// intermediate-model verification) in `drafting_s`.
pub fn simulated_clock(events: &[ForwardEvent], model: &CostModel) -> Result<TimeBreakdown> {
    model.validate()?;
    let mut out = TimeBreakdown::default();
    for ev in events {
        let cost = model.role_cost(ev.role)?.forward_cost(ev.n_tokens, ev.ctx_len);
        match (ev.role, ev.purpose) {
            (Role::Target, Purpose::Prefill) => out.target_prefill_s += cost,
            (_, Purpose::Prefill) => out.draft_prefill_s += cost,
            (Role::Target, Purpose::Verification) => {
                out.verification_s += cost;
                out.verification_forwards += 1;
            }
            _ => {
                out.drafting_s += cost;
                out.drafting_forwards += 1;
            }
        }
    }
    Ok(out)
}

/// Inputs to the per-token latency identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupInputs {
    /// Tokens committed per target verification pass.
    pub tau: f64,
    /// Drafting passes per target verification pass.
    pub d: f64,
    /// Seconds per drafting pass.
    pub t_draft: f64,
    /// Seconds per plain single-token target pass.
    pub t_target: f64,
    /// Seconds per target verification pass.
    pub t_verify: f64,
}

/// Per-token latency of draft-then-verify decoding relative to plain
/// autoregression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRatio {
    /// `T_avg / T_target`; below 1.0 means speculation wins.
    pub ratio: f64,
    /// `1 / ratio`, the throughput multiplier over autoregression.
    pub speedup: f64,
}

/// Evaluates `ratio = (d * t_draft + t_verify) / (tau * t_target)`.
///
/// One decode step costs `d` drafting passes plus one verification pass and
/// commits `tau` tokens; autoregression commits one token per `t_target`.
/// With `tau = 1`, `d = 0`, and `t_verify = t_target` the ratio is exactly 1.
pub fn eq1_latency_ratio(inputs: &SpeedupInputs) -> Result<LatencyRatio> {
    let SpeedupInputs { tau, d, t_draft, t_target, t_verify } = *inputs;
    if !tau.is_finite() || tau < 1.0 {
        return Err(Error::input(format!("tau must be at least 1, got {tau}")));
    }
    if !d.is_finite() || d < 0.0 {
        return Err(Error::input(format!("d must be non-negative, got {d}")));
    }
    if !t_draft.is_finite() || t_draft < 0.0 {
        return Err(Error::input(format!("t_draft must be non-negative, got {t_draft}")));
    }
    for (name, v) in [("t_target", t_target), ("t_verify", t_verify)] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::input(format!("{name} must be positive, got {v}")));
        }
    }
    let ratio = (d * t_draft + t_verify) / (tau * t_target);
    Ok(LatencyRatio { ratio, speedup: 1.0 / ratio })
}

/// Averages a finished run's event log into [`SpeedupInputs`], so the
/// identity can be checked against the clock the run actually accumulated.
///
/// `tau` becomes tokens per verification pass, `d` the mean drafting passes
/// per verification pass, and the per-pass times are bucket averages.
pub fn eq1_inputs_from_run(
    tokens_generated: u64,
    times: &TimeBreakdown,
    t_target: f64,
) -> Result<SpeedupInputs> {
    if times.verification_forwards == 0 {
        return Err(Error::input("run has no target verification passes to average over"));
    }
    let verify = times.verification_forwards as f64;
    let d = times.drafting_forwards as f64 / verify;
    let t_draft = if times.drafting_forwards == 0 {
        0.0
    } else {
        times.drafting_s / times.drafting_forwards as f64
    };
    Ok(SpeedupInputs {
        tau: tokens_generated as f64 / verify,
        d,
        t_draft,
        t_target,
        t_verify: times.verification_s / verify,
    })
}

/// Accepted-length lookup for sweep predictions, keyed by `(d, n)`.
///
/// Acceptance behaviour comes from measurement, not from the cost model, so
/// sweeps take it as data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TauTable {
    entries: BTreeMap<(usize, usize), f64>,
}

impl TauTable {
    pub fn from_entries(entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (d, n, tau) in entries {
            if !tau.is_finite() || tau < 1.0 {
                return Err(Error::config(format!(
                    "tau for d={d} n={n} must be at least 1, got {tau}"
                )));
            }
            if map.insert((d, n), tau).is_some() {
                return Err(Error::config(format!("duplicate tau entry for d={d} n={n}")));
            }
        }
        Ok(Self { entries: map })
    }

    pub fn get(&self, d: usize, n: usize) -> Result<f64> {
        self.entries
            .get(&(d, n))
            .copied()
            .ok_or_else(|| Error::config(format!("tau table has no entry for d={d} n={n}")))
    }
}

/// One point of a tree-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scheme: String,
    pub d: usize,
    pub n: usize,
    pub tau: f64,
    /// `forward_cost(n) / forward_cost(1)` for the target under this scheme:
    /// how much more a tree verification pass costs than a plain step.
    pub tv_over_tt: f64,
    /// Predicted throughput multiplier over autoregression, from the latency
    /// identity with a verification pass of `n + 1` tokens (tree plus the
    /// committed token that rides along).
    pub speedup: f64,
}

/// Predicts how speedup responds to tree size for each weight scheme.
///
/// Rows are ordered scheme-major in the order given, then by `d`, then `n`.
/// The draft cost is one single-token pass of `draft` per drafting round.
#[allow(clippy::too_many_arguments)]
pub fn sweep_tree_size(
    hw: &HardwareProfile,
    schemes: &[(String, SchemeProfile)],
    target_dims: &ModelDims,
    draft: &RoleCost,
    ctx_len: usize,
    grid_d: &[usize],
    grid_n: &[usize],
    taus: &TauTable,
) -> Result<Vec<SweepRow>> {
    hw.validate()?;
    target_dims.validate()?;
    draft.validate()?;
    if schemes.is_empty() || grid_d.is_empty() || grid_n.is_empty() {
        return Err(Error::input("sweep needs at least one scheme, one d, and one n"));
    }
    let t_draft = draft.forward_cost(1, ctx_len);
    let mut rows = Vec::with_capacity(schemes.len() * grid_d.len() * grid_n.len());
    for (name, scheme) in schemes {
        scheme.validate()?;
        let t_target = forward_cost(hw, scheme, target_dims, 1, ctx_len);
        for &d in grid_d {
            for &n in grid_n {
                if n == 0 {
                    return Err(Error::input("tree size n must be at least 1"));
                }
                let tau = taus.get(d, n)?;
                let t_verify = forward_cost(hw, scheme, target_dims, n + 1, ctx_len);
                let lat = eq1_latency_ratio(&SpeedupInputs {
                    tau,
                    d: d as f64,
                    t_draft,
                    t_target,
                    t_verify,
                })?;
                rows.push(SweepRow {
                    scheme: name.clone(),
                    d,
                    n,
                    tau,
                    tv_over_tt: forward_cost(hw, scheme, target_dims, n, ctx_len) / t_target,
                    speedup: lat.speedup,
                });
            }
        }
    }
    Ok(rows)
}

/// Decode-strategy shape for closed-form prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MethodKind {
    /// Plain autoregression: one target pass per token.
    Ar,
    /// Sequence speculation: `d` drafter passes, then one target pass over
    /// `d + 1` tokens.
    Sp { d: usize },
    /// Tree speculation: `d` drafter rounds, then one target pass over the
    /// `n`-node tree plus the feed token.
    Eagle2 { d: usize, n: usize },
    /// Two-stage speculation: the intermediate model accumulates `d` tokens
    /// via tree speculation (rounds of `d1` drafter passes plus one
    /// intermediate pass over `n1 + 1` tokens, committing `tau_intermediate`
    /// per round), then one target pass over `d + 1` tokens.
    HierSpec { d: usize, d1: usize, n1: usize, tau_intermediate: f64 },
}

/// One strategy to predict, with its measured accepted length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    /// Tokens committed per target pass, taken from measurement.
    pub tau: f64,
    /// Which cost-model role produces this method's drafts.
    pub drafter: Role,
    #[serde(flatten)]
    pub kind: MethodKind,
}

/// Predicted steady-state throughput for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodPrediction {
    pub name: String,
    pub tau: f64,
    /// Seconds per committed token.
    pub per_token_s: f64,
    pub tokens_per_s: f64,
    /// Throughput multiplier over plain autoregression on the same target.
    pub speedup: f64,
}

/// Closed-form throughput predictions from measured `tau` values.
///
/// All methods share the cost model's target; drafting costs come from the
/// role each method names. Two-stage prediction charges `d / tau_intermediate`
/// first-stage rounds per target pass.
pub fn predict_methods(
    model: &CostModel,
    ctx_len: usize,
    methods: &[MethodSpec],
) -> Result<Vec<MethodPrediction>> {
    model.validate()?;
    let t_target = model.target.forward_cost(1, ctx_len);
    let mut out = Vec::with_capacity(methods.len());
    for m in methods {
        let lat = match m.kind {
            MethodKind::Ar => eq1_latency_ratio(&SpeedupInputs {
                tau: m.tau,
                d: 0.0,
                t_draft: 0.0,
                t_target,
                t_verify: t_target,
            })?,
            MethodKind::Sp { d } => {
                let t_draft = model.role_cost(m.drafter)?.forward_cost(1, ctx_len);
                eq1_latency_ratio(&SpeedupInputs {
                    tau: m.tau,
                    d: d as f64,
                    t_draft,
                    t_target,
                    t_verify: model.target.forward_cost(d + 1, ctx_len),
                })?
            }
            MethodKind::Eagle2 { d, n } => {
                let t_draft = model.role_cost(m.drafter)?.forward_cost(1, ctx_len);
                eq1_latency_ratio(&SpeedupInputs {
                    tau: m.tau,
                    d: d as f64,
                    t_draft,
                    t_target,
                    t_verify: model.target.forward_cost(n + 1, ctx_len),
                })?
            }
            MethodKind::HierSpec { d, d1, n1, tau_intermediate } => {
                if !tau_intermediate.is_finite() || tau_intermediate < 1.0 {
                    return Err(Error::config(format!(
                        "method {:?}: tau_intermediate must be at least 1, got {tau_intermediate}",
                        m.name
                    )));
                }
                let t_draft = model.role_cost(m.drafter)?.forward_cost(1, ctx_len);
                let t_inter = model.role_cost(Role::Intermediate)?.forward_cost(n1 + 1, ctx_len);
                // First-stage rounds per target pass: the intermediate model
                // commits tau_intermediate tokens per round and must reach d.
                let rounds = d as f64 / tau_intermediate;
                let drafting_per_step = rounds * (d1 as f64 * t_draft + t_inter);
                eq1_latency_ratio(&SpeedupInputs {
                    tau: m.tau,
                    d: 1.0,
                    t_draft: drafting_per_step,
                    t_target,
                    t_verify: model.target.forward_cost(d + 1, ctx_len),
                })?
            }
        };
        let per_token_s = lat.ratio * t_target;
        out.push(MethodPrediction {
            name: m.name.clone(),
            tau: m.tau,
            per_token_s,
            tokens_per_s: 1.0 / per_token_s,
            speedup: lat.speedup,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a100() -> HardwareProfile {
        HardwareProfile {
            mem_bandwidth: 2.0e12,
            compute_throughput: 312.0e12,
            bandwidth_efficiency: 0.62,
            compute_efficiency: 0.40,
        }
    }

    fn fp16() -> SchemeProfile {
        SchemeProfile {
            bytes_per_weight: 2.0,
            activation_compute_scale: 1.0,
            dequant_overhead_per_weight: 0.0,
        }
    }

    fn w4() -> SchemeProfile {
        SchemeProfile {
            bytes_per_weight: 0.53125,
            activation_compute_scale: 1.0,
            dequant_overhead_per_weight: 2.0,
        }
    }

    fn dims_70b() -> ModelDims {
        ModelDims { params: 70.0e9, kv_bytes_per_token: 327_680.0 }
    }

    fn dims_8b() -> ModelDims {
        ModelDims { params: 8.0e9, kv_bytes_per_token: 131_072.0 }
    }

    #[test]
    fn latency_ratio_matches_hand_arithmetic() {
        // One drafting pass at 0.3 units, verification at 1.2 units, four
        // tokens per step: (0.3 + 1.2) / 4 = 0.375, so speculation runs the
        // decoder 2.666x faster than one unit per token.
        let lat = eq1_latency_ratio(&SpeedupInputs {
            tau: 4.0,
            d: 1.0,
            t_draft: 0.3,
            t_target: 1.0,
            t_verify: 1.2,
        })
        .unwrap();
        assert!((lat.ratio - 0.375).abs() < 1e-15);
        assert!((lat.speedup - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_give_ratio_one() {
        // No drafting and verification equal to a plain step is exactly
        // autoregression.
        let lat = eq1_latency_ratio(&SpeedupInputs {
            tau: 1.0,
            d: 0.0,
            t_draft: 0.0,
            t_target: 7.5e-3,
            t_verify: 7.5e-3,
        })
        .unwrap();
        assert_eq!(lat.ratio, 1.0);
        assert_eq!(lat.speedup, 1.0);
    }

    #[test]
    fn latency_ratio_rejects_bad_inputs() {
        let good = SpeedupInputs { tau: 2.0, d: 1.0, t_draft: 0.1, t_target: 1.0, t_verify: 1.0 };
        for bad in [
            SpeedupInputs { tau: 0.5, ..good },
            SpeedupInputs { d: -1.0, ..good },
            SpeedupInputs { t_draft: -0.1, ..good },
            SpeedupInputs { t_target: 0.0, ..good },
            SpeedupInputs { t_verify: f64::NAN, ..good },
        ] {
            assert!(eq1_latency_ratio(&bad).is_err());
        }
        assert!(eq1_latency_ratio(&good).is_ok());
    }

    #[test]
    fn single_token_cost_is_memory_bound_at_desk_scale() {
        // 70B at 4 bit: streaming 37.18 GB of weights plus 0.33 GB of KV at
        // 1.24 TB/s effective takes 30.25 ms; two dequant-inflated token
        // FLOPs are an order of magnitude cheaper.
        let cost = forward_cost(&a100(), &w4(), &dims_70b(), 1, 1000);
        let expected = (70.0e9 * 0.53125 + 327_680.0 * 1000.0) / (2.0e12 * 0.62);
        assert!((cost - expected).abs() / expected < 1e-12);
        assert!((cost - 3.025_418e-2).abs() < 1e-7);
    }

    #[test]
    fn batched_cost_is_flat_then_linear() {
        let hw = a100();
        let scheme = w4();
        let dims = dims_8b();
        let single = forward_cost(&hw, &scheme, &dims, 1, 1000);
        // Memory-bound region: a handful of extra tokens costs nothing.
        assert_eq!(forward_cost(&hw, &scheme, &dims, 8, 1000), single);
        // Compute-bound region: cost grows with the batch and dominates the
        // streaming term.
        let at_40 = forward_cost(&hw, &scheme, &dims, 40, 1000);
        let at_80 = forward_cost(&hw, &scheme, &dims, 80, 1000);
        assert!(at_40 > single);
        assert!(at_80 > at_40);
        // In that region the cost is affine in n with slope 2 * params / C.
        let slope = 2.0 * dims.params / (hw.compute_throughput * hw.compute_efficiency);
        assert!((at_80 - at_40 - slope * 40.0).abs() / at_80 < 1e-12);
        // Never below either bound.
        for n in 1..100 {
            let c = forward_cost(&hw, &scheme, &dims, n, 1000);
            assert!(c + 1e-18 >= single);
        }
    }

    #[test]
    fn quantization_moves_the_crossover_earlier() {
        let hw = a100();
        let dims = dims_8b();
        let crossover = |scheme: &SchemeProfile| {
            let single = forward_cost(&hw, scheme, &dims, 1, 1000);
            (1..10_000).find(|&n| forward_cost(&hw, scheme, &dims, n, 1000) > single).unwrap()
        };
        // Shrinking the streaming term leaves less room before compute takes
        // over, so the 4-bit scheme saturates at a smaller batch.
        assert!(crossover(&w4()) < crossover(&fp16()));
    }

    #[test]
    fn costs_scale_with_hardware_throughput() {
        // Doubling both ceilings halves every cost, so ratios between
        // schemes and batch sizes are unchanged.
        let hw = a100();
        let faster = HardwareProfile {
            mem_bandwidth: hw.mem_bandwidth * 2.0,
            compute_throughput: hw.compute_throughput * 2.0,
            ..hw
        };
        for (scheme, n) in [(fp16(), 1), (fp16(), 64), (w4(), 1), (w4(), 64)] {
            let slow = forward_cost(&hw, &scheme, &dims_8b(), n, 1000);
            let fast = forward_cost(&faster, &scheme, &dims_8b(), n, 1000);
            assert!((slow / fast - 2.0).abs() < 1e-12);
        }
    }

    fn toy_cost_model() -> CostModel {
        CostModel {
            target: RoleCost { hw: a100(), scheme: w4(), dims: dims_70b() },
            intermediate: Some(RoleCost { hw: a100(), scheme: w4(), dims: dims_8b() }),
            draft: Some(RoleCost {
                hw: a100(),
                scheme: fp16(),
                dims: ModelDims { params: 1.5e9, kv_bytes_per_token: 32_768.0 },
            }),
        }
    }

    #[test]
    fn clock_buckets_partition_the_event_log() {
        let model = toy_cost_model();
        let events = [
            ForwardEvent { role: Role::Target, purpose: Purpose::Prefill, n_tokens: 9, ctx_len: 0 },
            ForwardEvent { role: Role::Draft, purpose: Purpose::Prefill, n_tokens: 10, ctx_len: 0 },
            ForwardEvent {
                role: Role::Draft,
                purpose: Purpose::Drafting,
                n_tokens: 1,
                ctx_len: 10,
            },
            ForwardEvent {
                role: Role::Draft,
                purpose: Purpose::Drafting,
                n_tokens: 3,
                ctx_len: 10,
            },
            ForwardEvent {
                role: Role::Intermediate,
                purpose: Purpose::Verification,
                n_tokens: 5,
                ctx_len: 10,
            },
            ForwardEvent {
                role: Role::Target,
                purpose: Purpose::Verification,
                n_tokens: 4,
                ctx_len: 10,
            },
        ];
        let bd = simulated_clock(&events, &model).unwrap();
        // Intermediate verification is time spent making candidates for the
        // target, so it lands in the drafting bucket.
        assert_eq!(bd.drafting_forwards, 3);
        assert_eq!(bd.verification_forwards, 1);
        let total: f64 = events
            .iter()
            .map(|e| model.role_cost(e.role).unwrap().forward_cost(e.n_tokens, e.ctx_len))
            .sum();
        assert!((bd.total_s() - total).abs() / total < 1e-12);
        assert!(bd.target_prefill_s > 0.0 && bd.draft_prefill_s > 0.0);
        assert!(bd.decode_s() < total);
    }

    #[test]
    fn clock_rejects_events_for_missing_roles() {
        let model = CostModel { target: toy_cost_model().target, intermediate: None, draft: None };
        let ev =
            ForwardEvent { role: Role::Draft, purpose: Purpose::Drafting, n_tokens: 1, ctx_len: 4 };
        let err = simulated_clock(&[ev], &model).unwrap_err();
        assert!(err.to_string().contains("draft role"));
    }

    #[test]
    fn run_averages_reproduce_the_clock_identity() {
        // The identity evaluated on a run's own bucket averages must equal
        // the throughput read directly off the clock. 3 drafting passes per
        // step, 25 steps, 96 tokens.
        let times = TimeBreakdown {
            drafting_s: 0.075,
            verification_s: 0.80,
            target_prefill_s: 0.03,
            draft_prefill_s: 0.001,
            drafting_forwards: 75,
            verification_forwards: 25,
        };
        let t_target = 0.03;
        let inputs = eq1_inputs_from_run(96, &times, t_target).unwrap();
        assert!((inputs.tau - 96.0 / 25.0).abs() < 1e-15);
        assert!((inputs.d - 3.0).abs() < 1e-15);
        let lat = eq1_latency_ratio(&inputs).unwrap();
        let from_clock = 96.0 / times.decode_s();
        let from_identity = 1.0 / (lat.ratio * t_target);
        assert!((from_clock - from_identity).abs() / from_clock < 1e-12);
    }

    #[test]
    fn sweep_orders_rows_and_tracks_verify_cost() {
        let hw = a100();
        let schemes = vec![("fp16".to_string(), fp16()), ("w4g128".to_string(), w4())];
        let draft = RoleCost {
            hw,
            scheme: fp16(),
            dims: ModelDims { params: 2.5e8, kv_bytes_per_token: 8_192.0 },
        };
        let taus =
            TauTable::from_entries([(6, 30, 3.36), (6, 40, 3.73), (6, 50, 3.99), (6, 60, 4.12)])
                .unwrap();
        let rows = sweep_tree_size(
            &hw,
            &schemes,
            &dims_8b(),
            &draft,
            1000,
            &[6],
            &[30, 40, 50, 60],
            &taus,
        )
        .unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].scheme, "fp16");
        assert_eq!(rows[4].scheme, "w4g128");
        assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), [30, 40, 50, 60, 30, 40, 50, 60]);
        for w in rows[..4].windows(2).chain(rows[4..].windows(2)) {
            assert!(w[1].tv_over_tt >= w[0].tv_over_tt, "verify cost ratio never shrinks with n");
        }
        // fp16 stays memory bound through n = 60 at these dims, w4 does not.
        assert_eq!(rows[3].tv_over_tt, 1.0);
        assert!(rows[7].tv_over_tt > 1.5);
        // Missing tau entry is an error, not a silent skip.
        assert!(
            sweep_tree_size(&hw, &schemes, &dims_8b(), &draft, 1000, &[5], &[30], &taus).is_err()
        );
    }

    #[test]
    fn identical_schemes_produce_identical_sweep_curves() {
        let hw = a100();
        let schemes = vec![("a".to_string(), fp16()), ("b".to_string(), fp16())];
        let draft = RoleCost {
            hw,
            scheme: fp16(),
            dims: ModelDims { params: 2.5e8, kv_bytes_per_token: 8_192.0 },
        };
        let taus = TauTable::from_entries([(4, 24, 3.0), (4, 48, 3.4)]).unwrap();
        let rows = sweep_tree_size(&hw, &schemes, &dims_8b(), &draft, 1000, &[4], &[24, 48], &taus)
            .unwrap();
        assert_eq!(rows[0].speedup, rows[2].speedup);
        assert_eq!(rows[1].speedup, rows[3].speedup);
    }

    #[test]
    fn predictions_rank_methods_and_anchor_autoregression() {
        let model = toy_cost_model();
        let methods = vec![
            MethodSpec { name: "ar".into(), tau: 1.0, drafter: Role::Target, kind: MethodKind::Ar },
            MethodSpec {
                name: "sp".into(),
                tau: 4.72,
                drafter: Role::Intermediate,
                kind: MethodKind::Sp { d: 6 },
            },
            MethodSpec {
                name: "eagle2".into(),
                tau: 3.57,
                drafter: Role::Draft,
                kind: MethodKind::Eagle2 { d: 4, n: 30 },
            },
            MethodSpec {
                name: "hier".into(),
                tau: 5.28,
                drafter: Role::Draft,
                kind: MethodKind::HierSpec { d: 6, d1: 3, n1: 24, tau_intermediate: 3.3 },
            },
        ];
        let preds = predict_methods(&model, 1000, &methods).unwrap();
        let by_name = |n: &str| preds.iter().find(|p| p.name == n).unwrap();
        let ar = by_name("ar");
        assert!((ar.speedup - 1.0).abs() < 1e-12);
        assert!((ar.tokens_per_s - 1.0 / model.target.forward_cost(1, 1000)).abs() < 1e-9);
        // Two-stage wins by amortizing cheap intermediate verification into
        // long accepted runs; plain tree drafting pays compute-bound target
        // verification over a wide tree and comes in last of the three.
        assert!(by_name("hier").tokens_per_s > by_name("sp").tokens_per_s);
        assert!(by_name("sp").tokens_per_s > by_name("eagle2").tokens_per_s);
        assert!(by_name("eagle2").tokens_per_s > ar.tokens_per_s);
    }

    #[test]
    fn two_stage_prediction_needs_an_intermediate_role() {
        let model = CostModel {
            target: toy_cost_model().target,
            intermediate: None,
            draft: toy_cost_model().draft,
        };
        let methods = vec![MethodSpec {
            name: "hier".into(),
            tau: 5.0,
            drafter: Role::Draft,
            kind: MethodKind::HierSpec { d: 6, d1: 3, n1: 24, tau_intermediate: 3.3 },
        }];
        let err = predict_methods(&model, 1000, &methods).unwrap_err();
        assert!(err.to_string().contains("intermediate"));
    }

    #[test]
    fn profile_validation_catches_nonsense() {
        let mut hw = a100();
        hw.bandwidth_efficiency = 1.5;
        assert!(hw.validate().is_err());
        let mut s = fp16();
        s.bytes_per_weight = 0.0;
        assert!(s.validate().is_err());
        let mut d = dims_8b();
        d.params = -1.0;
        assert!(d.validate().is_err());
        let mut q = w4();
        q.dequant_overhead_per_weight = -0.5;
        assert!(q.validate().is_err());
    }
}
