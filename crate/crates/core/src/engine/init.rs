//! Seeded toy-model construction and post-hoc weight quantization.

use super::{LayerWeights, Linear, ModelConfig, ModelWeights, Precision};
use crate::quant::{hadamard_rotate, quantize_group, Matrix};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Builds a toy model from (config, seed), bit-identically reproducible.
///
/// Weights come from a single splitmix64 stream in a fixed draw order:
/// embedding, position table, then per layer wq, wk, wv, wo, w_up, w_gate,
/// w_down (row-major within each matrix), then the LM head. Norm weights are
/// constant 1 and consume no draws. Each draw is a normal scaled by
/// `0.02 / sqrt(n_layers)`. If the config carries a quantized precision tag,
/// the dense draw is quantized before returning.
pub fn build_toy_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let std = 0.02 / (config.n_layers as f64).sqrt();
    let mut draw =
        |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| (rng.normal() * std) as f32);

    let embedding = draw(config.vocab_size, config.d_model);
    let pos_embedding = draw(config.max_positions, config.d_model);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: vec![1.0; config.d_model],
            wq: Linear::Dense(draw(config.d_model, config.d_model)),
            wk: Linear::Dense(draw(config.d_model, config.d_model)),
            wv: Linear::Dense(draw(config.d_model, config.d_model)),
            wo: Linear::Dense(draw(config.d_model, config.d_model)),
            mlp_norm: vec![1.0; config.d_model],
            w_up: Linear::Dense(draw(config.d_ff, config.d_model)),
            w_gate: Linear::Dense(draw(config.d_ff, config.d_model)),
            w_down: Linear::Dense(draw(config.d_model, config.d_ff)),
        });
    }
    let final_norm = vec![1.0; config.d_model];
    let lm_head = draw(config.vocab_size, config.d_model);

    let dense = ModelWeights {
        config: ModelConfig { precision: Precision::Fp32, ..config.clone() },
        embedding,
        pos_embedding,
        layers,
        final_norm,
        lm_head,
    };
    match config.precision {
        Precision::Fp32 => Ok(dense),
        p => quantize_weights(&dense, p),
    }
}

fn quantize_linear(lin: &Linear, precision: Precision) -> Result<Linear> {
    let m = match lin {
        Linear::Dense(m) => m,
        Linear::Quant(_) => {
            return Err(Error::input(
                "weights are already quantized; requantization would compound error",
            ))
        }
    };
    let q = match precision {
        Precision::Fp32 => return Ok(Linear::Dense(m.clone())),
        Precision::W8 => quantize_group(m, 8, m.cols())?, // one scale per output channel
        Precision::W4 { group, rotate: false } => quantize_group(m, 4, group)?,
        Precision::W4 { group, rotate: true } => {
            let mut q = quantize_group(&hadamard_rotate(m)?, 4, group)?;
            q.rotated = true;
            q
        }
    };
    Ok(Linear::Quant(q))
}

/// Converts every per-layer projection of a dense model to the requested
/// precision. Embeddings, norms, and the LM head are left untouched.
pub fn quantize_weights(weights: &ModelWeights, precision: Precision) -> Result<ModelWeights> {
    let mut config = weights.config.clone();
    config.precision = precision;
    config.validate()?;
    let mut layers = Vec::with_capacity(weights.layers.len());
    for layer in &weights.layers {
        layers.push(LayerWeights {
            attn_norm: layer.attn_norm.clone(),
            wq: quantize_linear(&layer.wq, precision)?,
            wk: quantize_linear(&layer.wk, precision)?,
            wv: quantize_linear(&layer.wv, precision)?,
            wo: quantize_linear(&layer.wo, precision)?,
            mlp_norm: layer.mlp_norm.clone(),
            w_up: quantize_linear(&layer.w_up, precision)?,
            w_gate: quantize_linear(&layer.w_gate, precision)?,
            w_down: quantize_linear(&layer.w_down, precision)?,
        });
    }
    Ok(ModelWeights {
        config,
        embedding: weights.embedding.clone(),
        pos_embedding: weights.pos_embedding.clone(),
        layers,
        final_norm: weights.final_norm.clone(),
        lm_head: weights.lm_head.clone(),
    })
}
