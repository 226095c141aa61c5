//! The simulated clock must partition real event logs into disjoint buckets
//! and reproduce the latency-ratio identity on runs it prices.

use specq_core::decode::{ar_decode, eagle2_decode, vanilla_sp_decode};
use specq_core::draft::ModelDrafter;
use specq_core::engine::{build_toy_model, ModelConfig, Precision};
use specq_core::perf::{
    eq1_inputs_from_run, eq1_latency_ratio, CostModel, HardwareProfile, ModelDims, RoleCost,
    SchemeProfile,
};

const A100: HardwareProfile = HardwareProfile {
    mem_bandwidth: 2.039e12,
    compute_throughput: 3.12e14,
    bandwidth_efficiency: 0.62,
    compute_efficiency: 0.40,
};

const FP16: SchemeProfile = SchemeProfile {
    bytes_per_weight: 2.0,
    activation_compute_scale: 1.0,
    dequant_overhead_per_weight: 0.0,
};

const W4G128: SchemeProfile = SchemeProfile {
    bytes_per_weight: 0.53125,
    activation_compute_scale: 1.0,
    dequant_overhead_per_weight: 2.0,
};

const DENSE_70B: ModelDims = ModelDims { params: 70e9, kv_bytes_per_token: 327_680.0 };
const DENSE_8B: ModelDims = ModelDims { params: 8e9, kv_bytes_per_token: 131_072.0 };
const HEAD_70B: ModelDims = ModelDims { params: 1.5e9, kv_bytes_per_token: 32_768.0 };

fn role(scheme: SchemeProfile, dims: ModelDims) -> RoleCost {
    RoleCost { hw: A100, scheme, dims }
}

fn config(max_positions: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 61,
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_positions,
        precision: Precision::Fp32,
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-30)
}

#[test]
fn clock_partitions_every_forward_exactly_once() {
    let target = build_toy_model(&config(96), 11).unwrap();
    let drafter_weights = build_toy_model(&config(96), 12).unwrap();
    let prompt = vec![target.config.bos(), 5, 9, 33];

    let model = CostModel {
        target: role(W4G128, DENSE_70B),
        intermediate: None,
        draft: Some(role(FP16, HEAD_70B)),
    };

    let ar = ar_decode(&target, &prompt, 12).unwrap();
    let ar_times = ar.simulate_cost(&model).unwrap();
    assert_eq!(ar_times.drafting_s, 0.0, "plain decoding drafts nothing");
    assert_eq!(ar_times.draft_prefill_s, 0.0);
    assert_eq!(ar_times.drafting_forwards, 0);
    assert_eq!(ar_times.verification_forwards, ar.stats.target_forwards);
    assert!(ar_times.target_prefill_s > 0.0);

    let mut md = ModelDrafter::new(drafter_weights.clone()).unwrap();
    let sp = vanilla_sp_decode(&target, &mut md, &prompt, 12, 4).unwrap();
    let mut md = ModelDrafter::new(drafter_weights).unwrap();
    let tree = eagle2_decode(&target, &mut md, &prompt, 12, 4, 3, 10).unwrap();

    for out in [&sp, &tree] {
        let times = out.simulate_cost(&model).unwrap();
        assert!(times.drafting_s > 0.0);
        assert!(times.draft_prefill_s > 0.0, "drafter prompt absorption must be priced");
        assert_eq!(times.verification_forwards, out.stats.target_forwards);

        // Re-price each event independently; the bucket sums must cover the
        // log with nothing dropped and nothing counted twice.
        let mut total = 0.0;
        for ev in &out.events {
            total += model.role_cost(ev.role).unwrap().forward_cost(ev.n_tokens, ev.ctx_len);
        }
        assert!(relative_gap(total, times.total_s()) < 1e-12);
    }
}

#[test]
fn sequence_drafting_on_a_full_model_outprices_tree_drafting_on_a_head() {
    // Same target either way; the drafter role is what changes. A 4-bit 8B
    // drafter streams far more weight bytes per query than a 1.5B fp16 head,
    // so its per-step drafting bill must come out higher even though the
    // tree issues several queries per round.
    let target = build_toy_model(&config(128), 21).unwrap();
    let drafter_weights = build_toy_model(&config(128), 22).unwrap();
    let prompt = vec![target.config.bos(), 7, 7, 40];

    let full_drafter_model = CostModel {
        target: role(W4G128, DENSE_70B),
        intermediate: None,
        draft: Some(role(W4G128, DENSE_8B)),
    };
    let head_drafter_model = CostModel {
        target: role(W4G128, DENSE_70B),
        intermediate: None,
        draft: Some(role(FP16, HEAD_70B)),
    };

    let mut md = ModelDrafter::new(drafter_weights.clone()).unwrap();
    let sp = vanilla_sp_decode(&target, &mut md, &prompt, 24, 6).unwrap();
    let sp_times = sp.simulate_cost(&full_drafter_model).unwrap();

    let mut md = ModelDrafter::new(drafter_weights).unwrap();
    let tree = eagle2_decode(&target, &mut md, &prompt, 24, 6, 4, 40).unwrap();
    let tree_times = tree.simulate_cost(&head_drafter_model).unwrap();

    let sp_draft_per_step = sp_times.drafting_s / sp_times.verification_forwards as f64;
    let tree_draft_per_step = tree_times.drafting_s / tree_times.verification_forwards as f64;
    assert!(
        sp_draft_per_step > tree_draft_per_step,
        "full-model drafting {sp_draft_per_step} should cost more than head drafting {tree_draft_per_step}"
    );

    // Wide tree batches push target verification past the memory-bound
    // plateau, so the tree pays more per verification pass than the chain.
    let sp_verify_per_step = sp_times.verification_s / sp_times.verification_forwards as f64;
    let tree_verify_per_step = tree_times.verification_s / tree_times.verification_forwards as f64;
    assert!(
        tree_verify_per_step > sp_verify_per_step,
        "tree verification {tree_verify_per_step} should cost more than chain verification {sp_verify_per_step}"
    );
}

#[test]
fn averaged_run_inputs_reproduce_the_accumulated_clock() {
    let target = build_toy_model(&config(96), 31).unwrap();
    let drafter_weights = build_toy_model(&config(96), 32).unwrap();
    let prompt = vec![target.config.bos(), 2, 44, 17, 6];

    let model = CostModel {
        target: role(W4G128, DENSE_70B),
        intermediate: None,
        draft: Some(role(FP16, HEAD_70B)),
    };
    let t_target = model.target.forward_cost(1, 1000);

    let mut md = ModelDrafter::new(drafter_weights).unwrap();
    let out = eagle2_decode(&target, &mut md, &prompt, 16, 3, 3, 8).unwrap();
    let times = out.simulate_cost(&model).unwrap();
    let inputs = eq1_inputs_from_run(out.stats.tokens_generated, &times, t_target).unwrap();
    let ratio = eq1_latency_ratio(&inputs).unwrap();

    // The identity: averaging per-pass costs and recombining them through
    // the ratio must return exactly the decode seconds the clock summed.
    let per_token_from_ratio = ratio.ratio * t_target;
    let per_token_from_clock = times.decode_s() / out.stats.tokens_generated as f64;
    assert!(relative_gap(per_token_from_ratio, per_token_from_clock) < 1e-9);
    assert!(relative_gap(ratio.speedup * per_token_from_clock, t_target) < 1e-9);

    // An autoregressive run averaged the same way is the ratio-1 baseline
    // when its verification passes are priced at t_target itself.
    let ar = ar_decode(&target, &prompt, 16).unwrap();
    let ar_times = ar.simulate_cost(&model).unwrap();
    let ar_inputs = eq1_inputs_from_run(ar.stats.tokens_generated, &ar_times, t_target).unwrap();
    assert_eq!(ar_inputs.d, 0.0);
    assert!((ar_inputs.tau - 1.0).abs() < 1e-15);
}
