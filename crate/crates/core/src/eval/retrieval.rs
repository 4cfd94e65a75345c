//! Retrieval evaluation over curriculum examples.
//!
//! Candidates are the distinct target payloads of the evaluated examples and
//! their distractors. Document queries carry graded relevance: the gold
//! target scores 2, any other candidate reading the same header scores 1.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{hits, ndcg_at_k, rank, RetrievalPool};
use crate::autodiff::Tape;
use crate::backbone::{AnchorPlacement, MultimodalSequence};
use crate::data::curriculum::{query_prefix, target_prefix};
use crate::data::{CurriculumExample, Modality, SceneSpec};
use crate::error::Result;
use crate::model::Model;
use crate::params::ParamStore;
use crate::rollout::embed_prefix;
use crate::vocab::Vocab;

pub struct RetrievalSet {
    pub queries: Vec<MultimodalSequence>,
    pub candidates: Vec<MultimodalSequence>,
    /// Target tokens of each candidate.
    pub candidate_keys: Vec<Vec<String>>,
    pub gold: Vec<usize>,
    pub modalities: Vec<Modality>,
    pub relevance: Vec<Vec<f64>>,
}

fn payload(spec: &SceneSpec) -> Vec<String> {
    match spec {
        SceneSpec::Txt { tokens } => tokens.clone(),
        _ => Vec::new(),
    }
}

pub fn build_retrieval_set(examples: &[CurriculumExample], vocab: &Vocab, placement: AnchorPlacement) -> Result<RetrievalSet> {
    let mut index: HashMap<Vec<String>, usize> = HashMap::new();
    let mut candidates = Vec::new();
    let mut keys: Vec<Vec<String>> = Vec::new();
    let mut intern = |spec: &SceneSpec, candidates: &mut Vec<MultimodalSequence>| -> Result<usize> {
        let key = payload(spec);
        if let Some(&i) = index.get(&key) {
            return Ok(i);
        }
        candidates.push(target_prefix(spec, vocab, placement)?);
        keys.push(key.clone());
        index.insert(key, candidates.len() - 1);
        Ok(candidates.len() - 1)
    };
    let mut gold = Vec::with_capacity(examples.len());
    let mut queries = Vec::with_capacity(examples.len());
    for ex in examples {
        gold.push(intern(&ex.target, &mut candidates)?);
        for d in &ex.distractors {
            intern(d, &mut candidates)?;
        }
        queries.push(query_prefix(ex, vocab, placement)?);
    }
    let relevance = examples
        .iter()
        .zip(&gold)
        .map(|(ex, &g)| {
            if ex.modality != Modality::Doc {
                return Vec::new();
            }
            let header = &keys[g][0];
            keys.iter()
                .enumerate()
                .map(|(c, k)| if c == g { 2.0 } else if k.first() == Some(header) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(RetrievalSet {
        queries,
        candidates,
        candidate_keys: keys,
        gold,
        modalities: examples.iter().map(|e| e.modality).collect(),
        relevance,
    })
}

/// Inference-mode `e_gen` of one prefix with `steps` latent positions.
pub fn embed_one(model: &Model, store: &ParamStore<f32>, prefix: &MultimodalSequence, steps: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let (emb, _) = embed_prefix(&mut tape, model, prefix, steps)?;
    Ok(tape.value(emb.e_gen).iter().map(|v| *v as f64).collect())
}

/// Embeds prefixes independently; the output order matches the input.
pub fn embed_all(model: &Model, store: &ParamStore<f32>, prefixes: &[MultimodalSequence], steps: usize) -> Result<Vec<Vec<f64>>> {
    prefixes.par_iter().map(|p| embed_one(model, store, p, steps)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub hit_at_1: f64,
    pub per_modality: BTreeMap<String, f64>,
    /// Mean NDCG@5 over document queries, if any.
    pub ndcg_at_5_doc: Option<f64>,
    pub query_count: usize,
    pub candidate_count: usize,
}

pub fn report_from_embeddings(queries: &[Vec<f64>], pool: &RetrievalPool) -> Result<RetrievalReport> {
    let h = hits(queries, pool)?;
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (hit, m) in h.iter().zip(&pool.modalities) {
        let e = per.entry(m.name().to_string()).or_default();
        e.0 += *hit as usize;
        e.1 += 1;
    }
    let mut ndcg = Vec::new();
    for (q, m) in pool.modalities.iter().enumerate() {
        if *m == Modality::Doc {
            ndcg.push(ndcg_at_k(&rank(&queries[q], &pool.candidates), &pool.relevance_of(q), 5)?);
        }
    }
    Ok(RetrievalReport {
        hit_at_1: h.iter().filter(|x| **x).count() as f64 / h.len() as f64,
        per_modality: per.into_iter().map(|(k, (a, n))| (k, a as f64 / n as f64)).collect(),
        ndcg_at_5_doc: (!ndcg.is_empty()).then(|| ndcg.iter().sum::<f64>() / ndcg.len() as f64),
        query_count: queries.len(),
        candidate_count: pool.candidates.len(),
    })
}

/// Embeds queries and candidates, then scores the retrieval.
pub fn evaluate_retrieval(
    model: &Model,
    store: &ParamStore<f32>,
    examples: &[CurriculumExample],
    steps: usize,
    vocab: &Vocab,
) -> Result<(RetrievalReport, RetrievalPool, Vec<Vec<f64>>)> {
    let set = build_retrieval_set(examples, vocab, model.backbone.config.anchor_placement)?;
    let queries = embed_all(model, store, &set.queries, steps)?;
    let candidates = embed_all(model, store, &set.candidates, steps)?;
    let pool = RetrievalPool { candidates, gold: set.gold, modalities: set.modalities, relevance: set.relevance };
    let report = report_from_embeddings(&queries, &pool)?;
    Ok((report, pool, queries))
}
