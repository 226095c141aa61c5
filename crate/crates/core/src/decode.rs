//! Greedy decoding strategies over a shared verified-prefix session.
//!
//! Every strategy here commits exactly the token sequence greedy
//! autoregression would produce; speculation only changes how many target
//! passes that takes. The unit of progress is one verification step: the
//! target forwards its last committed token together with a batch of drafted
//! tokens, reads one next-token distribution per fed token, accepts the
//! longest drafted prefix that matches its own argmax choices, and always
//! commits one extra token (the argmax at the first divergence, or the
//! continuation when everything matched). A step therefore commits between
//! one and `drafts + 1` tokens, and plain autoregression is the degenerate
//! case with an empty draft.
//!
//! [`Session`] owns the KV-cache bookkeeping that makes this correct: the
//! cache always holds exactly the committed sequence minus its last token, so
//! the next step's feed starts from that last token, and rejected draft
//! entries are cut back out of the cache before they can contaminate later
//! steps. Strategies log every model pass as a [`ForwardEvent`] for the cost
//! model in [`crate::perf`].

use std::collections::BTreeMap;

use serde::Serialize;

use crate::draft::{build_draft_tree_traced, flatten_tree, Drafter, FlatDraft};
use crate::engine::{
    argmax, forward, forward_full, render_text, AncestryMask, KvCache, ModelConfig, ModelWeights,
};
use crate::perf::{simulated_clock, CostModel, ForwardEvent, Purpose, Role, TimeBreakdown};
use crate::{Error, Result};

/// Tokens committed by one verification step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    /// Drafted tokens the target agreed with.
    pub accepted: usize,
    /// The extra token the target supplied itself.
    pub bonus: u32,
    /// All tokens the step committed: the accepted drafts plus the bonus.
    pub tokens: Vec<u32>,
}

/// One model's decoding state: committed tokens plus the cache that mirrors
/// them.
///
/// Invariant between calls: the cache holds key/value entries for exactly
/// `committed[..committed.len() - 1]`. The last committed token is always
/// re-fed as the first token of the next pass, which is what produces the
/// next-token distribution the step needs.
pub struct Session<'a> {
    weights: &'a ModelWeights,
    role: Role,
    cache: KvCache,
    committed: Vec<u32>,
    events: Vec<ForwardEvent>,
}

impl<'a> Session<'a> {
    pub fn new(weights: &'a ModelWeights, role: Role) -> Result<Self> {
        weights.validate()?;
        Ok(Session {
            weights,
            role,
            cache: KvCache::new(&weights.config),
            committed: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn committed(&self) -> &[u32] {
        &self.committed
    }

    pub fn events(&self) -> &[ForwardEvent] {
        &self.events
    }

    /// True while the position budget still admits a verification pass.
    pub fn can_step(&self) -> bool {
        self.cache.len() < self.weights.config.max_positions
    }

    /// Largest draft batch the next verification pass can carry.
    pub fn draft_budget(&self) -> usize {
        self.weights.config.max_positions.saturating_sub(self.cache.len() + 1)
    }

    /// Absorbs the prompt. All but its last token enter the cache; the last
    /// token stays pending as the feed of the first decoding step.
    pub fn prefill(&mut self, prompt: &[u32]) -> Result<()> {
        if !self.committed.is_empty() {
            return Err(Error::input("session is already prefilled"));
        }
        if prompt.is_empty() {
            return Err(Error::input("prompt must contain at least one token"));
        }
        let max = self.weights.config.max_positions;
        if prompt.len() > max {
            return Err(Error::input(format!(
                "prompt of {} tokens exceeds the {max}-position budget",
                prompt.len()
            )));
        }
        self.committed = prompt.to_vec();
        if prompt.len() > 1 {
            let feed = &prompt[..prompt.len() - 1];
            let positions: Vec<u32> = (0..feed.len() as u32).collect();
            forward(
                self.weights,
                feed,
                &positions,
                &AncestryMask::chain(feed.len()),
                &mut self.cache,
            )?;
            self.events.push(ForwardEvent {
                role: self.role,
                purpose: Purpose::Prefill,
                n_tokens: feed.len(),
                ctx_len: 0,
            });
        }
        Ok(())
    }

    /// One plain autoregressive step: a verification pass over an empty
    /// draft.
    pub fn greedy_step(&mut self) -> Result<StepOutcome> {
        self.verify_sequence(&[])
    }

    /// Verifies a drafted chain in one pass and commits the accepted prefix
    /// plus the bonus token.
    pub fn verify_sequence(&mut self, drafts: &[u32]) -> Result<StepOutcome> {
        let Some(&pending) = self.committed.last() else {
            return Err(Error::input("session has no context; prefill before decoding"));
        };
        let ctx_before = self.cache.len();
        let n = drafts.len() + 1;
        let mut feed = Vec::with_capacity(n);
        feed.push(pending);
        feed.extend_from_slice(drafts);
        let start = (self.committed.len() - 1) as u32;
        let positions: Vec<u32> = (start..start + n as u32).collect();
        let logits =
            forward(self.weights, &feed, &positions, &AncestryMask::chain(n), &mut self.cache)?;
        self.events.push(ForwardEvent {
            role: self.role,
            purpose: Purpose::Verification,
            n_tokens: n,
            ctx_len: ctx_before,
        });

        // Row i is the distribution after committed + drafts[..i]; accept
        // while the draft keeps matching its argmax.
        let mut accepted = 0;
        let mut bonus = 0;
        for i in 0..n {
            let greedy = argmax(logits.row(i)) as u32;
            if i < drafts.len() && drafts[i] == greedy {
                accepted += 1;
            } else {
                bonus = greedy;
                break;
            }
        }
        let mut tokens = drafts[..accepted].to_vec();
        tokens.push(bonus);
        self.committed.extend_from_slice(&tokens);
        // The pass cached the pending token plus every draft; keep only the
        // pending token and the accepted prefix. The bonus stays uncached as
        // the next pending token.
        self.cache.truncate(ctx_before + 1 + accepted)?;
        Ok(StepOutcome { accepted, bonus, tokens })
    }

    /// Verifies a drafted tree in one pass and commits the greedy root-to-
    /// leaf path the target agrees with, plus the bonus token.
    pub fn verify_tree(&mut self, flat: &FlatDraft) -> Result<StepOutcome> {
        let Some(&pending) = self.committed.last() else {
            return Err(Error::input("session has no context; prefill before decoding"));
        };
        let n_nodes = flat.tokens.len();
        if flat.positions.len() != n_nodes || flat.parents.len() != n_nodes {
            return Err(Error::input("draft tree arrays disagree on node count"));
        }
        // Nodes must be parent-before-child and positioned exactly one past
        // this session's committed context.
        let mut depth = vec![0usize; n_nodes];
        for i in 0..n_nodes {
            match flat.parents[i] {
                None => depth[i] = 0,
                Some(p) if p < i => depth[i] = depth[p] + 1,
                Some(p) => {
                    return Err(Error::input(format!("tree parent {p} does not precede node {i}")));
                }
            }
            let want = self.committed.len() + depth[i];
            if flat.positions[i] as usize != want {
                return Err(Error::input(format!(
                    "node {i} is laid out for position {} but this context puts it at {want}",
                    flat.positions[i]
                )));
            }
        }

        let ctx_before = self.cache.len();
        let mut feed = Vec::with_capacity(n_nodes + 1);
        feed.push(pending);
        feed.extend_from_slice(&flat.tokens);
        let mut positions = Vec::with_capacity(n_nodes + 1);
        positions.push((self.committed.len() - 1) as u32);
        positions.extend_from_slice(&flat.positions);
        // Re-root the ancestry on the fed pending token at index 0.
        let mut feed_parents = Vec::with_capacity(n_nodes + 1);
        feed_parents.push(None);
        feed_parents.extend(flat.parents.iter().map(|p| Some(p.map_or(0, |j| j + 1))));
        let mask = AncestryMask::from_parents(&feed_parents)?;
        let logits = forward(self.weights, &feed, &positions, &mask, &mut self.cache)?;
        self.events.push(ForwardEvent {
            role: self.role,
            purpose: Purpose::Verification,
            n_tokens: n_nodes + 1,
            ctx_len: ctx_before,
        });

        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
        let mut roots = Vec::new();
        for (i, parent) in flat.parents.iter().enumerate() {
            match parent {
                None => roots.push(i),
                Some(p) => children[*p].push(i),
            }
        }

        // Walk down from the context: at each tip take the argmax of its
        // logits row and descend into the child carrying that token, if any.
        // Siblings carry distinct tokens, so the walk is unambiguous.
        let mut path = Vec::new();
        let mut kids: &[usize] = &roots;
        let mut row = 0;
        let bonus = loop {
            let greedy = argmax(logits.row(row)) as u32;
            match kids.iter().copied().find(|&i| flat.tokens[i] == greedy) {
                Some(i) => {
                    path.push(i);
                    row = i + 1;
                    kids = &children[i];
                }
                None => break greedy,
            }
        };

        let mut tokens: Vec<u32> = path.iter().map(|&i| flat.tokens[i]).collect();
        tokens.push(bonus);
        self.committed.extend_from_slice(&tokens);
        // Keep the pending token (batch index 0) and the accepted path;
        // node i sits at batch index i + 1. Path indices ascend because
        // parents precede children.
        let mut keep = Vec::with_capacity(path.len() + 1);
        keep.push(0);
        keep.extend(path.iter().map(|&i| i + 1));
        self.cache.select(ctx_before, &keep)?;
        Ok(StepOutcome { accepted: path.len(), bonus, tokens })
    }

    /// Re-aligns this session onto `reference`, reusing every cache entry
    /// the two histories share and re-forwarding only the divergent tail.
    /// Used to roll an intermediate model back to what the target actually
    /// committed.
    pub fn sync_to(&mut self, reference: &[u32]) -> Result<()> {
        if reference.is_empty() {
            return Err(Error::input("cannot sync a session to an empty sequence"));
        }
        let max = self.weights.config.max_positions;
        if reference.len() > max {
            return Err(Error::input(format!(
                "reference of {} tokens exceeds the {max}-position budget",
                reference.len()
            )));
        }
        let lcp = self.committed.iter().zip(reference).take_while(|(a, b)| a == b).count();
        let keep = lcp.min(reference.len() - 1).min(self.cache.len());
        self.cache.truncate(keep)?;
        self.committed = reference.to_vec();
        let missing = &reference[keep..reference.len() - 1];
        if !missing.is_empty() {
            let positions: Vec<u32> = (keep as u32..(keep + missing.len()) as u32).collect();
            forward(
                self.weights,
                missing,
                &positions,
                &AncestryMask::chain(missing.len()),
                &mut self.cache,
            )?;
            self.events.push(ForwardEvent {
                role: self.role,
                purpose: Purpose::Drafting,
                n_tokens: missing.len(),
                ctx_len: keep,
            });
        }
        Ok(())
    }
}

/// Counters describing a finished decode run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DecodeStats {
    /// Tokens committed beyond the prompt, before any emission trimming.
    pub tokens_generated: u64,
    /// Target verification passes (prefill excluded).
    pub target_forwards: u64,
    /// Intermediate-model passes, verification and re-alignment alike.
    pub intermediate_forwards: u64,
    /// Drafter distribution queries.
    pub draft_queries: u64,
    /// How many steps accepted each draft count.
    pub accepted_histogram: BTreeMap<usize, u64>,
}

impl DecodeStats {
    /// Tokens committed per target pass. 1.0 for an empty run, matching
    /// plain autoregression.
    pub fn tau(&self) -> f64 {
        if self.target_forwards == 0 {
            1.0
        } else {
            self.tokens_generated as f64 / self.target_forwards as f64
        }
    }
}

/// A finished decode run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeOutput {
    /// Generated tokens: trimmed at the first end-of-sequence token
    /// (inclusive), then capped at the requested length.
    pub tokens: Vec<u32>,
    /// The generated tokens rendered back to text.
    pub text: String,
    pub stats: DecodeStats,
    /// Every model pass of the run: target passes first, then intermediate,
    /// then draft-role passes, each group in execution order.
    pub events: Vec<ForwardEvent>,
}

impl DecodeOutput {
    /// Replays this run's passes through a cost model.
    pub fn simulate_cost(&self, model: &CostModel) -> Result<TimeBreakdown> {
        simulated_clock(&self.events, model)
    }
}

fn check_drafter_vocab(config: &ModelConfig, drafter: &dyn Drafter) -> Result<()> {
    if drafter.vocab_size() != config.vocab_size {
        return Err(Error::config(format!(
            "drafter vocab of {} does not match the model vocab of {}",
            drafter.vocab_size(),
            config.vocab_size
        )));
    }
    Ok(())
}

fn finalize(
    target: Session,
    extra_events: Vec<ForwardEvent>,
    draft_events: Vec<ForwardEvent>,
    accepted_histogram: BTreeMap<usize, u64>,
    prompt_len: usize,
    max_tokens: usize,
) -> DecodeOutput {
    let config = &target.weights.config;
    let eos = config.eos();
    let mut tokens: Vec<u32> = target.committed[prompt_len..].to_vec();
    let tokens_generated = tokens.len() as u64;
    if let Some(i) = tokens.iter().position(|&t| t == eos) {
        tokens.truncate(i + 1);
    }
    tokens.truncate(max_tokens);
    let text = render_text(config, &tokens);

    let mut events = target.events;
    events.extend(extra_events);
    events.extend(draft_events);
    let target_forwards = events
        .iter()
        .filter(|e| e.role == Role::Target && e.purpose == Purpose::Verification)
        .count() as u64;
    let intermediate_forwards = events
        .iter()
        .filter(|e| e.role == Role::Intermediate && e.purpose != Purpose::Prefill)
        .count() as u64;
    let draft_queries = events
        .iter()
        .filter(|e| e.role == Role::Draft && e.purpose == Purpose::Drafting)
        .map(|e| e.n_tokens as u64)
        .sum();

    DecodeOutput {
        tokens,
        text,
        stats: DecodeStats {
            tokens_generated,
            target_forwards,
            intermediate_forwards,
            draft_queries,
            accepted_histogram,
        },
        events,
    }
}

/// Plain greedy autoregression: one target pass per token.
pub fn ar_decode(
    weights: &ModelWeights,
    prompt: &[u32],
    max_tokens: usize,
) -> Result<DecodeOutput> {
    let mut target = Session::new(weights, Role::Target)?;
    target.prefill(prompt)?;
    let eos = weights.config.eos();
    let mut histogram = BTreeMap::new();
    let mut saw_eos = false;
    while target.committed.len() - prompt.len() < max_tokens && !saw_eos && target.can_step() {
        let step = target.greedy_step()?;
        *histogram.entry(step.accepted).or_insert(0) += 1;
        saw_eos = step.tokens.contains(&eos);
    }
    Ok(finalize(target, Vec::new(), Vec::new(), histogram, prompt.len(), max_tokens))
}

/// Sequence speculation: the drafter proposes a greedy chain of up to `d`
/// tokens, the target verifies the whole chain in one pass.
pub fn vanilla_sp_decode(
    weights: &ModelWeights,
    drafter: &mut dyn Drafter,
    prompt: &[u32],
    max_tokens: usize,
    d: usize,
) -> Result<DecodeOutput> {
    if d < 1 {
        return Err(Error::config("sequence speculation needs a draft length of at least 1"));
    }
    check_drafter_vocab(&weights.config, drafter)?;
    let mut target = Session::new(weights, Role::Target)?;
    target.prefill(prompt)?;
    let eos = weights.config.eos();
    let mut draft_events = Vec::new();
    if prompt.len() > 1 {
        draft_events.push(ForwardEvent {
            role: Role::Draft,
            purpose: Purpose::Prefill,
            n_tokens: prompt.len() - 1,
            ctx_len: 0,
        });
    }
    let mut histogram = BTreeMap::new();
    let mut saw_eos = false;
    while target.committed.len() - prompt.len() < max_tokens && !saw_eos && target.can_step() {
        let d_eff = d.min(target.draft_budget());
        let mut ctx = target.committed.clone();
        let mut drafts = Vec::with_capacity(d_eff);
        for _ in 0..d_eff {
            let dist = drafter.next_distribution(&ctx)?;
            draft_events.push(ForwardEvent {
                role: Role::Draft,
                purpose: Purpose::Drafting,
                n_tokens: 1,
                ctx_len: ctx.len() - 1,
            });
            let t = argmax(&dist);
            if dist[t] <= 0.0 {
                break;
            }
            ctx.push(t as u32);
            drafts.push(t as u32);
        }
        let step = target.verify_sequence(&drafts)?;
        *histogram.entry(step.accepted).or_insert(0) += 1;
        saw_eos = step.tokens.contains(&eos);
    }
    Ok(finalize(target, Vec::new(), draft_events, histogram, prompt.len(), max_tokens))
}

/// Tree speculation: each step drafts a tree of up to `n` nodes over `d`
/// expansion rounds with beam `k`, and the target verifies the whole tree in
/// one pass. Every drafting round is logged as one draft pass carrying that
/// round's queries.
pub fn eagle2_decode(
    weights: &ModelWeights,
    drafter: &mut dyn Drafter,
    prompt: &[u32],
    max_tokens: usize,
    d: usize,
    k: usize,
    n: usize,
) -> Result<DecodeOutput> {
    if d < 1 || k < 1 {
        return Err(Error::config("tree speculation needs depth >= 1 and beam >= 1"));
    }
    if n < d {
        return Err(Error::config(format!("tree size {n} cannot cover a depth-{d} chain")));
    }
    check_drafter_vocab(&weights.config, drafter)?;
    let mut target = Session::new(weights, Role::Target)?;
    target.prefill(prompt)?;
    let eos = weights.config.eos();
    let mut draft_events = Vec::new();
    if prompt.len() > 1 {
        draft_events.push(ForwardEvent {
            role: Role::Draft,
            purpose: Purpose::Prefill,
            n_tokens: prompt.len() - 1,
            ctx_len: 0,
        });
    }
    let mut histogram = BTreeMap::new();
    let mut saw_eos = false;
    while target.committed.len() - prompt.len() < max_tokens && !saw_eos && target.can_step() {
        let budget = target.draft_budget();
        let step = if budget == 0 {
            target.greedy_step()?
        } else {
            let n_eff = n.min(budget);
            let d_eff = d.min(n_eff);
            let (tree, trace) =
                build_draft_tree_traced(drafter, &target.committed, d_eff, n_eff, k)?;
            for (round, &queries) in trace.round_queries.iter().enumerate() {
                draft_events.push(ForwardEvent {
                    role: Role::Draft,
                    purpose: Purpose::Drafting,
                    n_tokens: queries,
                    ctx_len: target.committed.len() - 1 + round,
                });
            }
            let flat = flatten_tree(&tree, target.committed.len())?;
            target.verify_tree(&flat)?
        };
        *histogram.entry(step.accepted).or_insert(0) += 1;
        saw_eos = step.tokens.contains(&eos);
    }
    Ok(finalize(target, Vec::new(), draft_events, histogram, prompt.len(), max_tokens))
}

/// Two-stage speculation: an intermediate model tree-verifies drafter
/// proposals until it has committed at least `d` tokens beyond the shared
/// context, then the target verifies that whole accumulated chain in one
/// pass and the intermediate is re-aligned onto the outcome.
///
/// Stage one runs tree speculation with depth `d1`, beam `k1`, and tree size
/// `n1` against the intermediate model; its accepted tokens and bonuses all
/// become draft material for the target.
#[allow(clippy::too_many_arguments)]
pub fn hierspec_decode(
    target_weights: &ModelWeights,
    intermediate_weights: &ModelWeights,
    drafter: &mut dyn Drafter,
    prompt: &[u32],
    max_tokens: usize,
    d: usize,
    d1: usize,
    k1: usize,
    n1: usize,
) -> Result<DecodeOutput> {
    if d < 1 || d1 < 1 || k1 < 1 {
        return Err(Error::config("two-stage speculation needs d >= 1, d1 >= 1, and k1 >= 1"));
    }
    if n1 < d1 {
        return Err(Error::config(format!("tree size {n1} cannot cover a depth-{d1} chain")));
    }
    if intermediate_weights.config.vocab_size != target_weights.config.vocab_size {
        return Err(Error::config(format!(
            "intermediate vocab of {} does not match the target vocab of {}",
            intermediate_weights.config.vocab_size, target_weights.config.vocab_size
        )));
    }
    check_drafter_vocab(&target_weights.config, drafter)?;

    let mut target = Session::new(target_weights, Role::Target)?;
    target.prefill(prompt)?;
    let mut inter = Session::new(intermediate_weights, Role::Intermediate)?;
    inter.prefill(prompt)?;
    let eos = target_weights.config.eos();
    let mut draft_events = Vec::new();
    if prompt.len() > 1 {
        draft_events.push(ForwardEvent {
            role: Role::Draft,
            purpose: Purpose::Prefill,
            n_tokens: prompt.len() - 1,
            ctx_len: 0,
        });
    }
    let mut histogram = BTreeMap::new();
    let mut saw_eos = false;
    while target.committed.len() - prompt.len() < max_tokens && !saw_eos && target.can_step() {
        let budget = target.draft_budget();
        let mut accumulated: Vec<u32> = Vec::new();
        loop {
            if accumulated.len() >= d {
                break;
            }
            // Room for this round's tree plus its bonus inside the target's
            // verification batch.
            let room = budget.saturating_sub(accumulated.len() + 1);
            let n1_eff = n1.min(room).min(inter.draft_budget());
            if n1_eff == 0 || !inter.can_step() {
                break;
            }
            let d1_eff = d1.min(n1_eff);
            let (tree, trace) =
                build_draft_tree_traced(drafter, &inter.committed, d1_eff, n1_eff, k1)?;
            for (round, &queries) in trace.round_queries.iter().enumerate() {
                draft_events.push(ForwardEvent {
                    role: Role::Draft,
                    purpose: Purpose::Drafting,
                    n_tokens: queries,
                    ctx_len: inter.committed.len() - 1 + round,
                });
            }
            let flat = flatten_tree(&tree, inter.committed.len())?;
            let step = inter.verify_tree(&flat)?;
            accumulated.extend_from_slice(&step.tokens);
            if step.tokens.contains(&eos) {
                break;
            }
        }
        let step = target.verify_sequence(&accumulated)?;
        *histogram.entry(step.accepted).or_insert(0) += 1;
        saw_eos = step.tokens.contains(&eos);
        inter.sync_to(&target.committed)?;
    }
    let inter_events = inter.events;
    Ok(finalize(target, inter_events, draft_events, histogram, prompt.len(), max_tokens))
}

/// Decoding shape the naive oracle can re-simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleStrategy {
    Vanilla { d: usize },
    Eagle2 { d: usize, k: usize, n: usize },
}

const ORACLE_VOCAB: usize = 16;
const ORACLE_PROMPT: usize = 16;
const ORACLE_TOKENS: usize = 4;
const ORACLE_DEPTH: usize = 3;
const ORACLE_BEAM: usize = 7;
const ORACLE_TREE: usize = 7;

fn oracle_bound(what: &str, got: usize, limit: usize) -> Result<()> {
    if got > limit {
        return Err(Error::input(format!(
            "tau oracle refuses {what} of {got}; the naive re-simulation is bounded at {limit}"
        )));
    }
    Ok(())
}

/// Next-token argmax for a bare context, recomputed from scratch with a full
/// forward and no cache.
fn oracle_greedy(weights: &ModelWeights, context: &[u32]) -> Result<u32> {
    let logits = forward_full(weights, context)?;
    Ok(argmax(logits.row(context.len() - 1)) as u32)
}

/// Tokens per target pass, measured by an intentionally naive re-simulation.
///
/// Every acceptance decision is recomputed from scratch with full forwards,
/// with no KV cache, no tree masks, and no session bookkeeping, so the
/// result is an independent check on the decode harness. The cost is steep,
/// so inputs are bounded and anything larger is refused.
pub fn tau_oracle(
    weights: &ModelWeights,
    drafter: &mut dyn Drafter,
    prompt: &[u32],
    max_tokens: usize,
    strategy: OracleStrategy,
) -> Result<f64> {
    oracle_bound("a vocab", weights.config.vocab_size, ORACLE_VOCAB)?;
    oracle_bound("a prompt", prompt.len(), ORACLE_PROMPT)?;
    oracle_bound("a token budget", max_tokens, ORACLE_TOKENS)?;
    match strategy {
        OracleStrategy::Vanilla { d } => oracle_bound("a draft length", d, ORACLE_DEPTH)?,
        OracleStrategy::Eagle2 { d, k, n } => {
            oracle_bound("a draft depth", d, ORACLE_DEPTH)?;
            oracle_bound("a beam", k, ORACLE_BEAM)?;
            oracle_bound("a tree size", n, ORACLE_TREE)?;
        }
    }
    match strategy {
        OracleStrategy::Vanilla { d } if d < 1 => {
            return Err(Error::config("sequence speculation needs a draft length of at least 1"));
        }
        OracleStrategy::Eagle2 { d, k, n } if d < 1 || k < 1 || n < d => {
            return Err(Error::config("tree speculation needs d >= 1, k >= 1, and n >= d"));
        }
        _ => {}
    }
    check_drafter_vocab(&weights.config, drafter)?;
    if prompt.is_empty() {
        return Err(Error::input("prompt must contain at least one token"));
    }
    let max_pos = weights.config.max_positions;
    if prompt.len() > max_pos {
        return Err(Error::input(format!(
            "prompt of {} tokens exceeds the {max_pos}-position budget",
            prompt.len()
        )));
    }

    let eos = weights.config.eos();
    let mut committed = prompt.to_vec();
    let mut steps = 0u64;
    let mut saw_eos = false;
    // Mirrors the harness loop exactly: same stopping rules, same budget
    // clamps, same drafting, different verification machinery.
    while committed.len() - prompt.len() < max_tokens && !saw_eos && committed.len() <= max_pos {
        let budget = max_pos - committed.len();
        let newly: Vec<u32> = match strategy {
            OracleStrategy::Vanilla { d } => {
                let d_eff = d.min(budget);
                let mut ctx = committed.clone();
                let mut drafts = Vec::with_capacity(d_eff);
                for _ in 0..d_eff {
                    let dist = drafter.next_distribution(&ctx)?;
                    let t = argmax(&dist);
                    if dist[t] <= 0.0 {
                        break;
                    }
                    ctx.push(t as u32);
                    drafts.push(t as u32);
                }
                let mut tokens = Vec::new();
                for i in 0..=drafts.len() {
                    let mut full = committed.clone();
                    full.extend_from_slice(&drafts[..i]);
                    let greedy = oracle_greedy(weights, &full)?;
                    if i < drafts.len() && drafts[i] == greedy {
                        tokens.push(drafts[i]);
                    } else {
                        tokens.push(greedy);
                        break;
                    }
                }
                tokens
            }
            OracleStrategy::Eagle2 { d, k, n } => {
                if budget == 0 {
                    vec![oracle_greedy(weights, &committed)?]
                } else {
                    let n_eff = n.min(budget);
                    let d_eff = d.min(n_eff);
                    let (tree, _) = build_draft_tree_traced(drafter, &committed, d_eff, n_eff, k)?;
                    let mut children: Vec<Vec<usize>> = vec![Vec::new(); tree.len()];
                    let mut roots = Vec::new();
                    for (i, node) in tree.nodes.iter().enumerate() {
                        match node.parent {
                            None => roots.push(i),
                            Some(p) => children[p].push(i),
                        }
                    }
                    let mut tokens = Vec::new();
                    let mut kids: &[usize] = &roots;
                    loop {
                        let mut full = committed.clone();
                        full.extend_from_slice(&tokens);
                        let greedy = oracle_greedy(weights, &full)?;
                        match kids.iter().copied().find(|&i| tree.nodes[i].token == greedy) {
                            Some(i) => {
                                tokens.push(greedy);
                                kids = &children[i];
                            }
                            None => {
                                tokens.push(greedy);
                                break;
                            }
                        }
                    }
                    tokens
                }
            }
        };
        steps += 1;
        saw_eos = newly.contains(&eos);
        committed.extend_from_slice(&newly);
    }
    if steps == 0 {
        return Ok(1.0);
    }
    Ok((committed.len() - prompt.len()) as f64 / steps as f64)
}
