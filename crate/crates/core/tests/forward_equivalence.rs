//! The cached engine must be bit-identical to fresh full forwards.
//!
//! Everything downstream (acceptance decisions, losslessness of speculation)
//! leans on incremental forwards, tree-masked batches, and cache surgery
//! producing exactly the logits a from-scratch forward would. These tests
//! pin that equivalence at the f32-bit level.

use specq_core::decode::{Session, StepOutcome};
use specq_core::draft::{build_draft_tree, flatten_tree, ModelDrafter};
use specq_core::engine::{
    argmax, build_toy_model, forward, forward_full, AncestryMask, KvCache, ModelConfig,
    ModelWeights, Precision,
};
use specq_core::perf::Role;

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

fn greedy_fresh(weights: &ModelWeights, context: &[u32]) -> u32 {
    let logits = forward_full(weights, context).unwrap();
    argmax(logits.row(context.len() - 1)) as u32
}

/// Small deterministic generator for fuzz schedules; the model's own RNG
/// stays reserved for weight initialization.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self, bound: usize) -> usize {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 33) as usize) % bound
    }
}

#[test]
fn incremental_forwards_match_one_full_pass() {
    for precision in [Precision::Fp32, Precision::W8, Precision::W4 { group: 8, rotate: false }] {
        let w = build_toy_model(&config(precision), 7).unwrap();
        let tokens: Vec<u32> = vec![w.config.bos(), 5, 17, 3, 3, 29, 11, 2, 44, 8];
        let full = forward_full(&w, &tokens).unwrap();

        // One token at a time through a persistent cache.
        let mut cache = KvCache::new(&w.config);
        for (i, &t) in tokens.iter().enumerate() {
            let row = forward(&w, &[t], &[i as u32], &AncestryMask::chain(1), &mut cache).unwrap();
            assert_eq!(row.row(0), full.row(i), "row {i} diverged under {precision}");
        }

        // Again in uneven chunks.
        let mut cache = KvCache::new(&w.config);
        let mut at = 0;
        for chunk in [3usize, 1, 4, 2] {
            let feed = &tokens[at..at + chunk];
            let positions: Vec<u32> = (at as u32..(at + chunk) as u32).collect();
            let rows =
                forward(&w, feed, &positions, &AncestryMask::chain(chunk), &mut cache).unwrap();
            for j in 0..chunk {
                assert_eq!(rows.row(j), full.row(at + j), "chunked row {} diverged", at + j);
            }
            at += chunk;
        }
    }
}

#[test]
fn tree_batch_rows_match_their_path_chains() {
    let w = build_toy_model(&config(Precision::Fp32), 19).unwrap();
    let context: Vec<u32> = vec![w.config.bos(), 9, 30, 2, 14];
    let mut drafter =
        ModelDrafter::new(build_toy_model(&config(Precision::Fp32), 23).unwrap()).unwrap();
    let tree = build_draft_tree(&mut drafter, &context, 3, 9, 3).unwrap();
    assert!(tree.len() >= 5, "tree should branch for this check to bite");
    let flat = flatten_tree(&tree, context.len()).unwrap();

    // Cache the whole context, then run the tree as one masked batch.
    let mut cache = KvCache::new(&w.config);
    let positions: Vec<u32> = (0..context.len() as u32).collect();
    forward(&w, &context, &positions, &AncestryMask::chain(context.len()), &mut cache).unwrap();
    let rows = forward(&w, &flat.tokens, &flat.positions, &flat.mask, &mut cache).unwrap();

    // Each node's row must equal the last row of a fresh forward over
    // context + that node's root-to-node chain.
    for i in 0..tree.len() {
        let mut chain = context.clone();
        chain.extend(tree.path_tokens(i));
        let fresh = forward_full(&w, &chain).unwrap();
        assert_eq!(
            rows.row(i),
            fresh.row(chain.len() - 1),
            "node {i} saw different context through the mask"
        );
    }
}

#[test]
fn cache_surgery_never_leaks_rejected_entries() {
    let w = build_toy_model(&config(Precision::Fp32), 41).unwrap();
    let drafter_weights = build_toy_model(&config(Precision::Fp32), 43).unwrap();
    let mut rng = Lcg(0x5eed);

    // Fifty short sessions, each a random mix of accepted and rejected
    // sequence drafts, tree drafts, and forced re-alignments. After every
    // operation the session must still produce the same next token as a
    // from-scratch forward over its committed sequence.
    for round in 0..50 {
        let mut session = Session::new(&w, Role::Target).unwrap();
        let prompt = vec![w.config.bos(), (round % 40) as u32, 7];
        session.prefill(&prompt).unwrap();
        for _ in 0..6 {
            if session.draft_budget() < 8 {
                break;
            }
            let committed = session.committed().to_vec();
            let step: StepOutcome = match rng.next(4) {
                0 => {
                    // Perfect chain: drafts are the model's own greedy path.
                    let mut chain = committed.clone();
                    for _ in 0..rng.next(3) + 1 {
                        chain.push(greedy_fresh(&w, &chain));
                    }
                    session.verify_sequence(&chain[committed.len()..]).unwrap()
                }
                1 => {
                    // Corrupted chain: acceptance must stop at the flip.
                    let mut chain = committed.clone();
                    for _ in 0..3 {
                        chain.push(greedy_fresh(&w, &chain));
                    }
                    let mut drafts = chain[committed.len()..].to_vec();
                    let at = rng.next(drafts.len());
                    drafts[at] = (drafts[at] + 1 + rng.next(5) as u32) % 59;
                    session.verify_sequence(&drafts).unwrap()
                }
                2 => {
                    let mut d = ModelDrafter::new(drafter_weights.clone()).unwrap();
                    let depth = rng.next(3) + 1;
                    let tree = build_draft_tree(&mut d, &committed, depth, depth + 3, 2).unwrap();
                    let flat = flatten_tree(&tree, committed.len()).unwrap();
                    session.verify_tree(&flat).unwrap()
                }
                _ => {
                    // Diverge the history and re-align onto it.
                    let cut = committed.len() - 1 - rng.next(2);
                    let mut reference = committed[..cut.max(prompt.len())].to_vec();
                    reference.push(rng.next(59) as u32);
                    reference.push(rng.next(59) as u32);
                    session.sync_to(&reference).unwrap();
                    StepOutcome { accepted: 0, bonus: 0, tokens: Vec::new() }
                }
            };
            let _ = step;
            let committed = session.committed().to_vec();
            let next = session.greedy_step().unwrap().bonus;
            assert_eq!(
                next,
                greedy_fresh(&w, &committed),
                "round {round}: cache state diverged from committed history {committed:?}"
            );
        }
    }
}

#[test]
fn quantized_weights_change_logits_but_not_determinism() {
    // A quantized rebuild is the same computation twice, so logits are
    // bit-stable; against the dense build they must differ (the model really
    // is running on quantized weights, not silently falling back).
    let dense = build_toy_model(&config(Precision::Fp32), 7).unwrap();
    let q1 = build_toy_model(&config(Precision::W4 { group: 8, rotate: true }), 7).unwrap();
    let q2 = build_toy_model(&config(Precision::W4 { group: 8, rotate: true }), 7).unwrap();
    let tokens = vec![dense.config.bos(), 12, 40, 3];
    let a = forward_full(&q1, &tokens).unwrap();
    let b = forward_full(&q2, &tokens).unwrap();
    let c = forward_full(&dense, &tokens).unwrap();
    assert_eq!(a.row(3), b.row(3));
    assert_ne!(a.row(3), c.row(3));
}
