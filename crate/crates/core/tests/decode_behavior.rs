//! Speculation must change the cost of decoding, never its output.

use specq_core::decode::{
    ar_decode, eagle2_decode, hierspec_decode, tau_oracle, vanilla_sp_decode, OracleStrategy,
};
use specq_core::draft::{ModelDrafter, NgramDrafter};
use specq_core::engine::{build_toy_model, ModelConfig, ModelWeights, Precision};

fn config(precision: Precision) -> ModelConfig {
    ModelConfig {
        vocab_size: 61,
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_positions: 96,
        precision,
    }
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_positions: 48,
        precision: Precision::Fp32,
    }
}

fn with_bos(weights: &ModelWeights, body: &[u32]) -> Vec<u32> {
    let mut p = vec![weights.config.bos()];
    p.extend_from_slice(body);
    p
}

#[test]
fn every_strategy_emits_the_autoregressive_sequence() {
    let precisions = [
        Precision::Fp32,
        Precision::W8,
        Precision::W4 { group: 8, rotate: false },
        Precision::W4 { group: 8, rotate: true },
    ];
    for precision in precisions {
        let target = build_toy_model(&config(precision), 101).unwrap();
        let inter = build_toy_model(&config(precision), 103).unwrap();
        let drafter_weights = build_toy_model(&config(Precision::Fp32), 105).unwrap();
        for body in [&[4u32, 18, 2][..], &[51, 3, 3, 9, 26][..]] {
            let prompt = with_bos(&target, body);
            let reference = ar_decode(&target, &prompt, 16).unwrap();
            assert!((reference.stats.tau() - 1.0).abs() < 1e-15);

            let mut md = ModelDrafter::new(drafter_weights.clone()).unwrap();
            let sp = vanilla_sp_decode(&target, &mut md, &prompt, 16, 4).unwrap();
            assert_eq!(sp.tokens, reference.tokens, "{precision}: sequence drafts changed output");

            let mut md = ModelDrafter::new(drafter_weights.clone()).unwrap();
            let tree = eagle2_decode(&target, &mut md, &prompt, 16, 4, 3, 10).unwrap();
            assert_eq!(tree.tokens, reference.tokens, "{precision}: tree drafts changed output");

            let mut md = ModelDrafter::new(drafter_weights.clone()).unwrap();
            let hier = hierspec_decode(&target, &inter, &mut md, &prompt, 16, 5, 2, 2, 6).unwrap();
            assert_eq!(hier.tokens, reference.tokens, "{precision}: two stages changed output");
            assert_eq!(hier.text, reference.text);
        }
    }
}

#[test]
fn ngram_drafts_are_also_lossless() {
    let target = build_toy_model(&config(Precision::W8), 7).unwrap();
    let prompt = with_bos(&target, &[10, 20, 30]);
    let reference = ar_decode(&target, &prompt, 14).unwrap();
    let mut uniform = vec![1.0f32 / 59.0; 61];
    uniform[59] = 0.0; // never draft control tokens
    uniform[60] = 0.0;
    let mut ng = NgramDrafter::new(
        61,
        [(vec![20u32, 30], {
            let mut p = vec![0.0f32; 61];
            p[5] = 0.6;
            p[9] = 0.4;
            p
        })],
        Some(uniform),
    )
    .unwrap();
    let sp = vanilla_sp_decode(&target, &mut ng, &prompt, 14, 3).unwrap();
    assert_eq!(sp.tokens, reference.tokens);
    // A weak drafter accepts little, but the bonus keeps decoding moving.
    assert!(sp.stats.tau() >= 1.0);
}

#[test]
fn oracle_and_harness_agree_on_micro_models() {
    let target = build_toy_model(&micro_config(), 55).unwrap();
    let drafter_weights = build_toy_model(&micro_config(), 56).unwrap();
    let prompt = vec![target.config.bos(), 3, 8];

    let mut md = ModelDrafter::new(drafter_weights.clone()).unwrap();
    let run = vanilla_sp_decode(&target, &mut md, &prompt, 4, 3).unwrap();
    let mut md = ModelDrafter::new(drafter_weights.clone()).unwrap();
    let tau = tau_oracle(&target, &mut md, &prompt, 4, OracleStrategy::Vanilla { d: 3 }).unwrap();
    assert_eq!(run.stats.tau(), tau, "sequence harness disagrees with the naive oracle");

    let mut md = ModelDrafter::new(drafter_weights.clone()).unwrap();
    let run = eagle2_decode(&target, &mut md, &prompt, 4, 2, 2, 5).unwrap();
    let mut md = ModelDrafter::new(drafter_weights).unwrap();
    let tau = tau_oracle(&target, &mut md, &prompt, 4, OracleStrategy::Eagle2 { d: 2, k: 2, n: 5 })
        .unwrap();
    assert_eq!(run.stats.tau(), tau, "tree harness disagrees with the naive oracle");
}

#[test]
fn oracle_refuses_oversized_requests_loudly() {
    let target = build_toy_model(&micro_config(), 5).unwrap();
    let mut md = ModelDrafter::new(build_toy_model(&micro_config(), 6).unwrap()).unwrap();
    let prompt = vec![target.config.bos()];
    let err = tau_oracle(&target, &mut md, &prompt, 40, OracleStrategy::Vanilla { d: 2 })
        .unwrap_err()
        .to_string();
    assert!(err.contains("refuses"), "{err}");
    assert!(err.contains("bounded at 4"), "{err}");
}

#[test]
fn self_drafting_two_stage_run_reaches_full_depth() {
    // With the target acting as its own drafter and intermediate, stage one
    // only ever proposes the target's greedy continuation, so every target
    // pass commits at least d + 1 tokens.
    let target = build_toy_model(&config(Precision::Fp32), 77).unwrap();
    let prompt = with_bos(&target, &[2, 2, 35]);
    let d = 4;
    let mut md = ModelDrafter::new(target.clone()).unwrap();
    let out = hierspec_decode(&target, &target, &mut md, &prompt, 20, d, 2, 2, 6).unwrap();
    assert!(
        out.stats.tau() >= (d + 1) as f64,
        "tau {} below the perfect floor {}",
        out.stats.tau(),
        d + 1
    );
    let reference = ar_decode(&target, &prompt, 20).unwrap();
    assert_eq!(out.tokens, reference.tokens);
}

#[test]
fn emission_respects_budget_and_requested_length() {
    let mut cfg = config(Precision::Fp32);
    cfg.max_positions = 20;
    let target = build_toy_model(&cfg, 31).unwrap();
    let inter = build_toy_model(&cfg, 32).unwrap();
    let prompt = with_bos(&target, &[1, 2, 3]);
    let reference = ar_decode(&target, &prompt, 64).unwrap();
    // The position budget, not the request, bounds this run.
    assert!(reference.tokens.len() < 64);

    let mut md = ModelDrafter::new(build_toy_model(&cfg, 33).unwrap()).unwrap();
    let hier = hierspec_decode(&target, &inter, &mut md, &prompt, 64, 3, 2, 2, 4).unwrap();
    assert_eq!(hier.tokens, reference.tokens, "budget-clamped run still lossless");

    let short = ar_decode(&target, &prompt, 5).unwrap();
    assert!(short.tokens.len() <= 5);
    assert_eq!(short.tokens[..], reference.tokens[..short.tokens.len()]);
}
