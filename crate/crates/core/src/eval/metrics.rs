//! Exact cosine retrieval, Hit@1 and NDCG@k.

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::kernels;

/// Candidate embeddings plus per-query gold labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPool {
    /// Unit-norm candidate embeddings.
    pub candidates: Vec<Vec<f64>>,
    /// Gold candidate index per query.
    pub gold: Vec<usize>,
    pub modalities: Vec<Modality>,
    /// Graded relevance over candidates per query; empty means binary gold.
    pub relevance: Vec<Vec<f64>>,
}

impl RetrievalPool {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::InvalidArgument("empty candidate pool".into()));
        }
        if self.modalities.len() != self.gold.len() || (!self.relevance.is_empty() && self.relevance.len() != self.gold.len()) {
            return Err(Error::Shape("per-query fields disagree in length".into()));
        }
        if let Some(&g) = self.gold.iter().find(|&&g| g >= self.candidates.len()) {
            return Err(Error::OutOfRange { what: "gold candidate", index: g, limit: self.candidates.len() });
        }
        for c in &self.candidates {
            let n = kernels::l2_norm(c);
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!("candidate embedding has norm {n}")));
            }
        }
        Ok(())
    }

    /// Relevance of every candidate for query `q`.
    pub fn relevance_of(&self, q: usize) -> Vec<f64> {
        match self.relevance.get(q) {
            Some(r) if !r.is_empty() => r.clone(),
            _ => (0..self.candidates.len()).map(|c| if c == self.gold[q] { 1.0 } else { 0.0 }).collect(),
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = kernels::l2_norm(a) * kernels::l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        kernels::dot(a, b) / n
    }
}

/// Candidate indices by decreasing cosine similarity; ties keep the lower index first.
pub fn rank(query: &[f64], candidates: &[Vec<f64>]) -> Vec<usize> {
    let sims: Vec<f64> = candidates.iter().map(|c| cosine(query, c)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Nearest candidate; ties go to the lower index.
pub fn nearest(query: &[f64], candidates: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = cosine(query, c);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Per-query top-1 correctness.
pub fn hits(queries: &[Vec<f64>], pool: &RetrievalPool) -> Result<Vec<bool>> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    if queries.len() != pool.gold.len() {
        return Err(Error::Shape(format!("{} queries but {} gold labels", queries.len(), pool.gold.len())));
    }
    pool.validate()?;
    Ok(queries
        .iter()
        .zip(&pool.gold)
        .map(|(q, g)| nearest(q, &pool.candidates) == Some(*g))
        .collect())
}

/// Fraction of queries whose nearest candidate is the gold one.
pub fn hit_at_1(queries: &[Vec<f64>], pool: &RetrievalPool) -> Result<f64> {
    let h = hits(queries, pool)?;
    Ok(h.iter().filter(|x| **x).count() as f64 / h.len() as f64)
}

/// NDCG@k of a ranking with linear gains and `log2(rank + 1)` discounts.
/// All-zero relevance scores 0.
pub fn ndcg_at_k(ranking: &[usize], relevance: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if let Some(&r) = ranking.iter().find(|&&r| r >= relevance.len()) {
        return Err(Error::OutOfRange { what: "ranked item", index: r, limit: relevance.len() });
    }
    let discount = |i: usize| ((i + 2) as f64).log2();
    let dcg: f64 = ranking.iter().take(k).enumerate().map(|(i, &r)| relevance[r] / discount(i)).sum();
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, r)| r / discount(i)).sum();
    Ok(if idcg <= 0.0 { 0.0 } else { dcg / idcg })
}
