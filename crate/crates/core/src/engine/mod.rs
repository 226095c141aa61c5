//! Tiny decoder-only transformer with tree-capable attention.
//!
//! Architecture notes:
//!
//! 1. Byte-level vocabulary: ids 0..=255 are raw bytes, then BOS, then EOS
//!    (`vocab_size - 2` and `vocab_size - 1`; 258 in the default setup).
//! 2. Learned absolute positions with explicit per-token position ids, so a
//!    flattened draft tree can place sibling nodes at the same position
//!    (`cached prefix length + node depth`).
//! 3. Pre-norm blocks: RMS norm -> attention -> residual, RMS norm ->
//!    SiLU-gated MLP -> residual, final RMS norm, dense LM head.
//! 4. Attention over (full cached prefix) + (batch entries admitted by an
//!    [`AncestryMask`]). All reductions run in a fixed sequential order, so a
//!    batched forward under a linear-chain mask is bit-identical to feeding
//!    the same tokens one at a time.
//!
//! [`forward`] appends the batch to the cache only after the whole pass
//! succeeds; decode strategies then keep or discard entries with
//! [`KvCache::truncate`] and [`KvCache::select`].

mod cache;
mod checkpoint;
mod init;

pub use cache::{AncestryMask, KvCache};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use init::{build_toy_model, quantize_weights};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::quant::{gemv, hadamard_rotate_vec, qgemv, Matrix, QuantizedMatrix};
use crate::{Error, Result};

const RMS_EPS: f32 = 1e-5;

/// Weight storage format for the per-layer projection matrices.
///
/// Embeddings, position table, norms, and the LM head always stay dense:
/// weight-only quantization targets the projections, and the LM head is
/// treated as not quantizable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Fp32,
    /// 8-bit symmetric, one scale per output channel.
    W8,
    /// 4-bit symmetric with `group`-sized scale groups; `rotate` applies an
    /// orthonormal Hadamard rotation to weights (and activations at matvec
    /// time) before quantizing.
    W4 { group: usize, rotate: bool },
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Fp32 => write!(f, "fp32"),
            Precision::W8 => write!(f, "w8"),
            Precision::W4 { group, rotate: false } => write!(f, "w4:{group}"),
            Precision::W4 { group, rotate: true } => write!(f, "w4r:{group}"),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fp32" {
            return Ok(Precision::Fp32);
        }
        if s == "w8" {
            return Ok(Precision::W8);
        }
        for (prefix, rotate) in [("w4:", false), ("w4r:", true)] {
            if let Some(rest) = s.strip_prefix(prefix) {
                let group = rest.parse::<usize>().map_err(|_| {
                    Error::config(format!("invalid group size in precision tag {s:?}"))
                })?;
                return Ok(Precision::W4 { group, rotate });
            }
        }
        Err(Error::config(format!(
            "unknown precision tag {s:?}; expected fp32, w8, w4:<group>, or w4r:<group>"
        )))
    }
}

impl Serialize for Precision {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Precision {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Model shape plus weight precision tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::config("vocab_size must be at least 3 (one token + BOS + EOS)"));
        }
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::config("layer count and dimensions must be nonzero"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        match self.precision {
            Precision::Fp32 | Precision::W8 => {}
            Precision::W4 { group, rotate } => {
                if group == 0
                    || !self.d_model.is_multiple_of(group)
                    || !self.d_ff.is_multiple_of(group)
                {
                    return Err(Error::config(format!(
                        "w4 group size {group} must divide d_model {} and d_ff {}",
                        self.d_model, self.d_ff
                    )));
                }
                if rotate && !(self.d_model.is_power_of_two() && self.d_ff.is_power_of_two()) {
                    return Err(Error::config(
                        "hadamard rotation requires power-of-two d_model and d_ff",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn bos(&self) -> u32 {
        (self.vocab_size - 2) as u32
    }

    pub fn eos(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }
}

/// Projection weight, dense or quantized per the model's precision tag.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(Matrix),
    Quant(QuantizedMatrix),
}

impl Linear {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Linear::Dense(m) => (m.rows(), m.cols()),
            Linear::Quant(q) => (q.rows, q.cols),
        }
    }

    /// `y = W x`; rotated quantized weights transform `x` internally, so
    /// callers never see the rotated basis.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        match self {
            Linear::Dense(m) => gemv(m, x),
            Linear::Quant(q) if q.rotated => qgemv(q, &hadamard_rotate_vec(x)?),
            Linear::Quant(q) => qgemv(q, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mlp_norm: Vec<f32>,
    pub w_up: Linear,
    pub w_gate: Linear,
    pub w_down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// vocab_size x d_model
    pub embedding: Matrix,
    /// max_positions x d_model
    pub pos_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// vocab_size x d_model, always dense
    pub lm_head: Matrix,
}

impl ModelWeights {
    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let expect = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::config(format!("{name} has shape {got:?}, expected {want:?}")))
            }
        };
        expect(
            "embedding",
            (self.embedding.rows(), self.embedding.cols()),
            (c.vocab_size, c.d_model),
        )?;
        expect(
            "pos_embedding",
            (self.pos_embedding.rows(), self.pos_embedding.cols()),
            (c.max_positions, c.d_model),
        )?;
        expect("lm_head", (self.lm_head.rows(), self.lm_head.cols()), (c.vocab_size, c.d_model))?;
        if self.layers.len() != c.n_layers {
            return Err(Error::config(format!(
                "weights hold {} layers, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.attn_norm.len() != c.d_model || layer.mlp_norm.len() != c.d_model {
                return Err(Error::config(format!("layer {i} norm length mismatch")));
            }
            for (name, lin, want) in [
                ("wq", &layer.wq, (c.d_model, c.d_model)),
                ("wk", &layer.wk, (c.d_model, c.d_model)),
                ("wv", &layer.wv, (c.d_model, c.d_model)),
                ("wo", &layer.wo, (c.d_model, c.d_model)),
                ("w_up", &layer.w_up, (c.d_ff, c.d_model)),
                ("w_gate", &layer.w_gate, (c.d_ff, c.d_model)),
                ("w_down", &layer.w_down, (c.d_model, c.d_ff)),
            ] {
                expect(&format!("layer {i} {name}"), lin.shape(), want)?;
            }
        }
        if self.final_norm.len() != c.d_model {
            return Err(Error::config("final norm length mismatch"));
        }
        Ok(())
    }
}

fn rms_norm(x: &[f32], weight: &[f32]) -> Vec<f32> {
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let rms = (ss / x.len() as f32 + RMS_EPS).sqrt();
    x.iter().zip(weight).map(|(v, w)| v / rms * w).collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Greedy argmax; ties break toward the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax with sequential accumulation.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let mut mx = f32::NEG_INFINITY;
    for &v in logits {
        if v > mx {
            mx = v;
        }
    }
    let mut out: Vec<f32> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let mut denom = 0.0f32;
    for &v in &out {
        denom += v;
    }
    for v in &mut out {
        *v /= denom;
    }
    out
}

/// Runs one batched forward pass and appends the batch to the cache.
///
/// `tokens`, `positions`, and `mask` describe a flattened (possibly
/// tree-shaped) batch; token i attends the full cached prefix plus every
/// batch entry j with `mask.allows(i, j)`. Returns one logits row per input
/// token. On error the cache is left untouched.
pub fn forward(
    weights: &ModelWeights,
    tokens: &[u32],
    positions: &[u32],
    mask: &AncestryMask,
    cache: &mut KvCache,
) -> Result<Matrix> {
    let cfg = &weights.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::input("forward requires at least one token"));
    }
    if positions.len() != n || mask.len() != n {
        return Err(Error::input(format!(
            "batch size mismatch: {} tokens, {} positions, mask of {}",
            n,
            positions.len(),
            mask.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::input(format!(
            "token id {t} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p as usize >= cfg.max_positions) {
        return Err(Error::input(format!(
            "position {p} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    cache.check_compatible(cfg)?;
    if cache.len() + n > cfg.max_positions {
        return Err(Error::input(format!(
            "position overflow: cache holds {}, batch adds {n}, max_positions is {}",
            cache.len(),
            cfg.max_positions
        )));
    }

    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let score_scale = 1.0 / (hd as f32).sqrt();
    let base = cache.len();

    let mut xs: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        let te = weights.embedding.row(tokens[i] as usize);
        let pe = weights.pos_embedding.row(positions[i] as usize);
        xs.push(te.iter().zip(pe).map(|(a, b)| a + b).collect());
    }

    // per-layer batch K/V, appended to the cache only after the pass succeeds
    let mut batch_k: Vec<Vec<f32>> = vec![Vec::with_capacity(n * d); cfg.n_layers];
    let mut batch_v: Vec<Vec<f32>> = vec![Vec::with_capacity(n * d); cfg.n_layers];

    let mut scores: Vec<f32> = Vec::new();
    for (l, layer) in weights.layers.iter().enumerate() {
        let mut qs: Vec<Vec<f32>> = Vec::with_capacity(n);
        for x in &xs {
            let h = rms_norm(x, &layer.attn_norm);
            qs.push(layer.wq.matvec(&h)?);
            batch_k[l].extend(layer.wk.matvec(&h)?);
            batch_v[l].extend(layer.wv.matvec(&h)?);
        }
        let (cached_k, cached_v) = cache.layer(l);
        for i in 0..n {
            let mut attn = vec![0.0f32; d];
            for h in 0..n_heads {
                let qh = &qs[i][h * hd..(h + 1) * hd];
                // pass 1: scores over cached prefix, then admitted batch
                // entries, in that fixed order
                scores.clear();
                for j in 0..base {
                    scores.push(dot(qh, &cached_k[j * d + h * hd..][..hd]) * score_scale);
                }
                for jj in 0..=i {
                    if mask.allows(i, jj) {
                        scores.push(dot(qh, &batch_k[l][jj * d + h * hd..][..hd]) * score_scale);
                    }
                }
                let mut mx = f32::NEG_INFINITY;
                for &s in &scores {
                    if s > mx {
                        mx = s;
                    }
                }
                let mut denom = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    denom += *s;
                }
                // pass 2: weighted values in the same visiting order
                let mut si = 0;
                let out = &mut attn[h * hd..(h + 1) * hd];
                for j in 0..base {
                    let w = scores[si] / denom;
                    si += 1;
                    let vh = &cached_v[j * d + h * hd..][..hd];
                    for t in 0..hd {
                        out[t] += w * vh[t];
                    }
                }
                for jj in 0..=i {
                    if mask.allows(i, jj) {
                        let w = scores[si] / denom;
                        si += 1;
                        let vh = &batch_v[l][jj * d + h * hd..][..hd];
                        for t in 0..hd {
                            out[t] += w * vh[t];
                        }
                    }
                }
            }
            let o = layer.wo.matvec(&attn)?;
            for (xv, ov) in xs[i].iter_mut().zip(&o) {
                *xv += ov;
            }
        }
        for x in xs.iter_mut() {
            let h = rms_norm(x, &layer.mlp_norm);
            let up = layer.w_up.matvec(&h)?;
            let gate = layer.w_gate.matvec(&h)?;
            let act: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * *u).collect();
            let down = layer.w_down.matvec(&act)?;
            for (xv, dv) in x.iter_mut().zip(&down) {
                *xv += dv;
            }
        }
    }

    let mut logits = Matrix::zeros(n, cfg.vocab_size);
    for (i, x) in xs.iter().enumerate() {
        let h = rms_norm(x, &weights.final_norm);
        let row = gemv(&weights.lm_head, &h)?;
        for (c, v) in row.into_iter().enumerate() {
            logits.set(i, c, v);
        }
    }

    cache.append(positions, batch_k, batch_v);
    Ok(logits)
}

/// Forwards `tokens` as a plain chain from an empty cache and returns the
/// full logits matrix. Convenience path for oracles and one-shot scoring.
pub fn forward_full(weights: &ModelWeights, tokens: &[u32]) -> Result<Matrix> {
    let mut cache = KvCache::new(&weights.config);
    let positions: Vec<u32> = (0..tokens.len() as u32).collect();
    forward(weights, tokens, &positions, &AncestryMask::chain(tokens.len()), &mut cache)
}

/// Encodes a text prompt as BOS followed by its raw bytes.
pub fn encode_prompt(config: &ModelConfig, text: &str) -> Result<Vec<u32>> {
    let mut tokens = Vec::with_capacity(text.len() + 1);
    tokens.push(config.bos());
    for &b in text.as_bytes() {
        if (b as usize) >= config.vocab_size - 2 {
            return Err(Error::input(format!(
                "prompt byte {b} does not fit in vocab of {}",
                config.vocab_size
            )));
        }
        tokens.push(b as u32);
    }
    Ok(tokens)
}

/// Renders generated tokens as text, stopping at EOS and replacing invalid
/// UTF-8 lossily. Non-byte tokens other than EOS are skipped.
pub fn render_text(config: &ModelConfig, tokens: &[u32]) -> String {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t == config.eos() {
            break;
        }
        if t < 256 {
            bytes.push(t as u8);
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
pub(crate) fn test_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 61,
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_positions: 64,
        precision: Precision::Fp32,
    }
}
