//! Draft-token proposers and the beam-searched draft tree.
//!
//! A [`Drafter`] turns a committed token sequence into a next-token
//! distribution. [`build_draft_tree`] grows a tree of likely continuations
//! from any drafter, and [`flatten_tree`] turns that tree into the flat
//! (tokens, positions, mask) batch the engine verifies in one forward pass.
//!
//! Tree construction runs a fixed number of expansion rounds. Round 1 expands
//! the committed context with its top-k tokens; every later round expands the
//! k best-scoring nodes of the previous round with their top-k children. A
//! node's score is the cumulative log-probability of its path, so scores only
//! fall with depth. The final tree keeps the best `tree_size` candidates,
//! pulling in ancestors so the result is always a valid tree; a candidate
//! whose missing ancestors would not fit is skipped in favor of later, deeper
//! nodes that might (they cannot, score being monotone, but the guard keeps
//! the selection well-defined for every input).

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::engine::{forward, softmax, AncestryMask, KvCache, ModelWeights};
use crate::{Error, Result};

/// Longest context suffix an n-gram table may key on.
pub const MAX_SUFFIX: usize = 3;

/// Autoregressive next-token proposer.
///
/// Implementations must be deterministic functions of `context` and must
/// return a distribution over their full vocabulary summing to 1 within
/// 1e-6. Stateful implementations may cache, but a call with any context,
/// including one that rolls an earlier context back, must behave as if
/// computed fresh.
pub trait Drafter {
    fn vocab_size(&self) -> usize;
    fn next_distribution(&mut self, context: &[u32]) -> Result<Vec<f32>>;
}

/// One kept node of a draft tree.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftNode {
    pub token: u32,
    /// Index of the parent within the tree's node list; `None` for nodes
    /// hanging directly off the committed context.
    pub parent: Option<usize>,
    /// Zero for context children, so a node's verified position is
    /// `prefix_len + depth`.
    pub depth: usize,
    /// Cumulative natural-log probability of the path ending at this node.
    pub log_score: f64,
}

/// Tree of draft tokens, stored parents-first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DraftTree {
    pub nodes: Vec<DraftNode>,
}

impl DraftTree {
    #[must_use]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest node depth, or `None` for an empty tree.
    pub fn max_depth(&self) -> Option<usize> {
        self.nodes.iter().map(|n| n.depth).max()
    }

    /// Node indices from the shallowest ancestor down to `i`, inclusive.
    pub fn path_to(&self, i: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = Some(i);
        while let Some(j) = cur {
            path.push(j);
            cur = self.nodes[j].parent;
        }
        path.reverse();
        path
    }

    /// Tokens along [`Self::path_to`], the chain a verifier would commit if
    /// it accepted node `i` and everything above it.
    pub fn path_tokens(&self, i: usize) -> Vec<u32> {
        self.path_to(i).into_iter().map(|j| self.nodes[j].token).collect()
    }
}

/// Draft tree batch in engine form.
#[derive(Debug, Clone)]
pub struct FlatDraft {
    pub tokens: Vec<u32>,
    pub positions: Vec<u32>,
    pub parents: Vec<Option<usize>>,
    pub mask: AncestryMask,
}

/// Lays a tree out for one batched forward at positions `prefix_len + depth`.
pub fn flatten_tree(tree: &DraftTree, prefix_len: usize) -> Result<FlatDraft> {
    let parents: Vec<Option<usize>> = tree.nodes.iter().map(|n| n.parent).collect();
    Ok(FlatDraft {
        tokens: tree.nodes.iter().map(|n| n.token).collect(),
        positions: tree.nodes.iter().map(|n| (prefix_len + n.depth) as u32).collect(),
        parents: parents.clone(),
        mask: AncestryMask::from_parents(&parents)?,
    })
}

/// Every node proposed during tree construction, kept or not.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub token: u32,
    /// Index into the candidate pool, not the final tree.
    pub parent: Option<usize>,
    pub depth: usize,
    pub log_score: f64,
    pub selected: bool,
}

/// Construction record for cost accounting and selection audits.
#[derive(Debug, Clone, Default)]
pub struct TreeTrace {
    /// Distribution queries issued per expansion round. Round 1 always costs
    /// one query (the context itself); later rounds cost one per expanded
    /// frontier node, so an entry is at most the beam width and zero once
    /// the drafter has nothing left to propose.
    pub round_queries: Vec<usize>,
    pub candidates: Vec<Candidate>,
}

/// Candidate comparison key: best score first, then shallower, then lower
/// token id, then earlier creation. f64 total order keeps ties exact.
fn better(pool: &[Candidate], a: usize, b: usize) -> std::cmp::Ordering {
    let (x, y) = (&pool[a], &pool[b]);
    y.log_score
        .total_cmp(&x.log_score)
        .then(x.depth.cmp(&y.depth))
        .then(x.token.cmp(&y.token))
        .then(a.cmp(&b))
}

/// Tokens of one distribution worth expanding: probability order, at most
/// `k`, zero-probability tokens never proposed.
fn top_k_tokens(dist: &[f32], k: usize) -> Vec<(u32, f32)> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|t| (t as u32, dist[t])).filter(|&(_, p)| p > 0.0).collect()
}

/// Builds a draft tree and reports how it was built.
///
/// `depth` is the number of expansion rounds, `tree_size` the node budget,
/// `beam` the per-round expansion width. Kept nodes appear in creation
/// order, which puts every parent before its children.
pub fn build_draft_tree_traced(
    drafter: &mut dyn Drafter,
    context: &[u32],
    depth: usize,
    tree_size: usize,
    beam: usize,
) -> Result<(DraftTree, TreeTrace)> {
    if depth < 1 || beam < 1 {
        return Err(Error::config("draft tree needs depth >= 1 and beam >= 1"));
    }
    if tree_size < depth {
        return Err(Error::config(format!(
            "tree size {tree_size} cannot cover a depth-{depth} chain"
        )));
    }
    if context.is_empty() {
        return Err(Error::input("cannot draft from an empty context"));
    }

    let mut pool: Vec<Candidate> = Vec::new();
    let mut trace = TreeTrace::default();
    let mut prev_round: Vec<usize> = Vec::new();

    for round in 0..depth {
        let mut this_round = Vec::new();
        let queries = if round == 0 {
            let dist = drafter.next_distribution(context)?;
            for (token, p) in top_k_tokens(&dist, beam) {
                this_round.push(pool.len());
                pool.push(Candidate {
                    token,
                    parent: None,
                    depth: 0,
                    log_score: (p as f64).ln(),
                    selected: false,
                });
            }
            1
        } else {
            let mut frontier = prev_round.clone();
            frontier.sort_by(|&a, &b| better(&pool, a, b));
            frontier.truncate(beam);
            for &pi in &frontier {
                let mut ctx = context.to_vec();
                ctx.extend(path_tokens_in_pool(&pool, pi));
                let dist = drafter.next_distribution(&ctx)?;
                for (token, p) in top_k_tokens(&dist, beam) {
                    this_round.push(pool.len());
                    pool.push(Candidate {
                        token,
                        parent: Some(pi),
                        depth: round,
                        log_score: pool[pi].log_score + (p as f64).ln(),
                        selected: false,
                    });
                }
            }
            frontier.len()
        };
        trace.round_queries.push(queries);
        prev_round = this_round;
        if prev_round.is_empty() {
            break;
        }
    }

    // Keep the best `tree_size` candidates, ancestors included. Score is
    // non-increasing along paths, so an ancestor is never worse than its
    // descendant and the chain walk usually adds exactly one node.
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| better(&pool, a, b));
    let mut kept = 0usize;
    for ci in order {
        if pool[ci].selected {
            continue;
        }
        let mut chain = Vec::new();
        let mut cur = Some(ci);
        while let Some(i) = cur {
            if !pool[i].selected {
                chain.push(i);
            }
            cur = pool[i].parent;
        }
        if kept + chain.len() > tree_size {
            continue;
        }
        kept += chain.len();
        for i in chain {
            pool[i].selected = true;
        }
        if kept == tree_size {
            break;
        }
    }

    let mut tree_index = vec![usize::MAX; pool.len()];
    let mut nodes = Vec::with_capacity(kept);
    for (ci, cand) in pool.iter().enumerate() {
        if !cand.selected {
            continue;
        }
        tree_index[ci] = nodes.len();
        nodes.push(DraftNode {
            token: cand.token,
            parent: cand.parent.map(|p| tree_index[p]),
            depth: cand.depth,
            log_score: cand.log_score,
        });
    }
    trace.candidates = pool;
    Ok((DraftTree { nodes }, trace))
}

fn path_tokens_in_pool(pool: &[Candidate], i: usize) -> Vec<u32> {
    let mut toks = Vec::new();
    let mut cur = Some(i);
    while let Some(j) = cur {
        toks.push(pool[j].token);
        cur = pool[j].parent;
    }
    toks.reverse();
    toks
}

pub fn build_draft_tree(
    drafter: &mut dyn Drafter,
    context: &[u32],
    depth: usize,
    tree_size: usize,
    beam: usize,
) -> Result<DraftTree> {
    build_draft_tree_traced(drafter, context, depth, tree_size, beam).map(|(t, _)| t)
}

fn validate_distribution(what: &str, probs: &[f32], vocab_size: usize) -> Result<()> {
    if probs.len() != vocab_size {
        return Err(Error::config(format!(
            "{what} has {} probabilities for a vocab of {vocab_size}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::config(format!("{what} contains a negative or non-finite probability")));
    }
    let sum: f64 = probs.iter().map(|&p| p as f64).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Table-driven drafter for reproducible tests: the longest suffix of the
/// context (up to [`MAX_SUFFIX`] tokens) with a table entry decides the
/// distribution, and contexts matching nothing fall back to a fixed row,
/// uniform unless one was supplied.
#[derive(Debug, Clone)]
pub struct NgramDrafter {
    vocab_size: usize,
    fallback: Vec<f32>,
    table: HashMap<Vec<u32>, Vec<f32>>,
}

#[derive(Deserialize)]
struct NgramFile {
    vocab_size: usize,
    #[serde(default)]
    fallback: Option<Vec<f32>>,
    #[serde(default)]
    entries: Vec<NgramEntry>,
}

#[derive(Deserialize)]
struct NgramEntry {
    suffix: Vec<u32>,
    probs: Vec<f32>,
}

impl NgramDrafter {
    pub fn new(
        vocab_size: usize,
        entries: impl IntoIterator<Item = (Vec<u32>, Vec<f32>)>,
        fallback: Option<Vec<f32>>,
    ) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::config("n-gram drafter needs a nonzero vocab"));
        }
        let fallback = match fallback {
            Some(f) => {
                validate_distribution("fallback", &f, vocab_size)?;
                f
            }
            None => vec![1.0 / vocab_size as f32; vocab_size],
        };
        let mut table = HashMap::new();
        for (suffix, probs) in entries {
            if suffix.len() > MAX_SUFFIX {
                return Err(Error::config(format!(
                    "suffix {suffix:?} is longer than {MAX_SUFFIX} tokens"
                )));
            }
            if let Some(&t) = suffix.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::config(format!("suffix token {t} out of vocab range")));
            }
            validate_distribution(&format!("entry for suffix {suffix:?}"), &probs, vocab_size)?;
            if table.insert(suffix.clone(), probs).is_some() {
                return Err(Error::config(format!("duplicate table entry for suffix {suffix:?}")));
            }
        }
        Ok(NgramDrafter { vocab_size, fallback, table })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NgramFile = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("bad n-gram table: {e}")))?;
        NgramDrafter::new(
            file.vocab_size,
            file.entries.into_iter().map(|e| (e.suffix, e.probs)),
            file.fallback,
        )
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        NgramDrafter::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Drafter for NgramDrafter {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&mut self, context: &[u32]) -> Result<Vec<f32>> {
        for take in (0..=MAX_SUFFIX.min(context.len())).rev() {
            if let Some(probs) = self.table.get(&context[context.len() - take..]) {
                return Ok(probs.clone());
            }
        }
        Ok(self.fallback.clone())
    }
}

/// Drafter backed by a toy transformer: the distribution is the softmax of
/// the model's next-token logits.
///
/// The instance keeps a KV cache over the last context it saw and reuses the
/// longest common prefix on the next call, so consecutive calls that extend
/// one path cost a single incremental forward and rollbacks after a rejected
/// draft are transparent.
#[derive(Debug, Clone)]
pub struct ModelDrafter {
    weights: ModelWeights,
    cache: KvCache,
    seq: Vec<u32>,
    last: Option<Vec<f32>>,
}

impl ModelDrafter {
    pub fn new(weights: ModelWeights) -> Result<Self> {
        weights.validate()?;
        let cache = KvCache::new(&weights.config);
        Ok(ModelDrafter { weights, cache, seq: Vec::new(), last: None })
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }
}

impl Drafter for ModelDrafter {
    fn vocab_size(&self) -> usize {
        self.weights.config.vocab_size
    }

    fn next_distribution(&mut self, context: &[u32]) -> Result<Vec<f32>> {
        if context.is_empty() {
            return Err(Error::input("model drafter needs a non-empty context"));
        }
        if let Some(last) = &self.last {
            if self.seq == context {
                return Ok(last.clone());
            }
        }
        // The cache holds entries for all of `seq`; keep the part that is
        // also a prefix of the new context, leaving at least one token to
        // feed so there is a logits row to read.
        let lcp = self.seq.iter().zip(context).take_while(|(a, b)| a == b).count();
        let keep = lcp.min(context.len() - 1);
        self.cache.truncate(keep)?;
        let tokens = &context[keep..];
        let positions: Vec<u32> = (keep as u32..context.len() as u32).collect();
        let logits = forward(
            &self.weights,
            tokens,
            &positions,
            &AncestryMask::chain(tokens.len()),
            &mut self.cache,
        )?;
        let dist = softmax(logits.row(logits.rows() - 1));
        self.seq = context.to_vec();
        self.last = Some(dist.clone());
        Ok(dist)
    }
}
