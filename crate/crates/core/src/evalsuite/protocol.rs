use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::metrics::{bleu, cider_vectors, NgramStats, TfIdf, MAX_N};
use crate::error::{Error, Result};
use crate::priors::ClusterVector;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    /// Where the candidate came from, e.g. `z3` or `beam0`.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub scene: u64,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.text.as_str())
    }
}

/// Corpus means of per-scene maxima.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// BLEU-1..4.
    pub bleu: [f64; MAX_N],
    pub cider: f64,
}

/// Scores one candidate against its scene's references.
pub fn score_candidate(text: &str, refs: &[&str], ref_vecs: &[TfIdf], stats: &NgramStats) -> Scores {
    Scores {
        bleu: bleu(text, refs),
        cider: cider_vectors(&stats.vectorize(text), ref_vecs),
    }
}

/// For every scene and metric the best candidate's value, averaged over scenes.
///
/// `references[i]` belongs to `sets[i]`; `stats` is built over the
/// evaluation references.
pub fn oracle_scores<S: AsRef<str>>(
    sets: &[CandidateSet],
    references: &[Vec<S>],
    stats: &NgramStats,
) -> Result<Scores> {
    if sets.len() != references.len() {
        return Err(Error::invalid("one reference list per candidate set is required"));
    }
    let mut total = Scores::default();
    for (set, refs) in sets.iter().zip(references) {
        if set.candidates.is_empty() {
            return Err(Error::invalid(format!("scene {} has no candidates", set.scene)));
        }
        let refs: Vec<&str> = refs.iter().map(AsRef::as_ref).collect();
        let ref_vecs: Vec<TfIdf> = refs.iter().map(|r| stats.vectorize(r)).collect();
        let mut best = Scores::default();
        let mut seen = HashSet::new();
        for text in set.texts() {
            if !seen.insert(text) {
                continue;
            }
            let s = score_candidate(text, &refs, &ref_vecs, stats);
            for n in 0..MAX_N {
                best.bleu[n] = best.bleu[n].max(s.bleu[n]);
            }
            best.cider = best.cider.max(s.cider);
        }
        for n in 0..MAX_N {
            total.bleu[n] += best.bleu[n];
        }
        total.cider += best.cider;
    }
    let m = sets.len().max(1) as f64;
    for b in &mut total.bleu {
        *b /= m;
    }
    total.cider /= m;
    Ok(total)
}

/// Training scenes available for neighbor retrieval, with cached TF-IDF
/// vectors of their references.
pub struct ConsensusIndex {
    clusters: Vec<ClusterVector>,
    ref_vecs: Vec<Vec<TfIdf>>,
    stats: NgramStats,
}

impl ConsensusIndex {
    /// `scenes[i] = (cluster vector, references)`; document frequencies come
    /// from these references.
    pub fn new<S: AsRef<str>>(scenes: &[(ClusterVector, Vec<S>)]) -> Self {
        let ref_sets: Vec<Vec<&str>> = scenes
            .iter()
            .map(|(_, r)| r.iter().map(AsRef::as_ref).collect())
            .collect();
        let stats = NgramStats::from_reference_sets(&ref_sets);
        let ref_vecs = ref_sets
            .iter()
            .map(|refs| refs.iter().map(|r| stats.vectorize(r)).collect())
            .collect();
        Self {
            clusters: scenes.iter().map(|(c, _)| c.clone()).collect(),
            ref_vecs,
            stats,
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Indices of the `m` scenes most cosine-similar to `c`, lowest index first on ties.
    pub fn neighbors(&self, c: &ClusterVector, m: usize) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self.clusters.iter().map(|t| c.cosine(t)).zip(0..).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        scored.into_iter().take(m).map(|(_, i)| i).collect()
    }

    /// Mean CIDEr-D of each text against the pooled neighbor references.
    pub fn consensus_scores<'a>(
        &self,
        texts: impl IntoIterator<Item = &'a str>,
        c: &ClusterVector,
        m: usize,
    ) -> Vec<f64> {
        let pooled: Vec<TfIdf> = self
            .neighbors(c, m)
            .into_iter()
            .flat_map(|i| self.ref_vecs[i].iter().cloned())
            .collect();
        texts
            .into_iter()
            .map(|t| cider_vectors(&self.stats.vectorize(t), &pooled))
            .collect()
    }
}

/// Candidates sorted by consensus score, best first; ties keep input order.
pub fn consensus_rerank(
    set: &CandidateSet,
    c: &ClusterVector,
    index: &ConsensusIndex,
    m_neighbors: usize,
) -> Result<Vec<Candidate>> {
    if m_neighbors == 0 {
        return Err(Error::invalid("m_neighbors must be >= 1"));
    }
    let scores = index.consensus_scores(set.texts(), c, m_neighbors);
    let mut order: Vec<usize> = (0..set.candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    Ok(order.into_iter().map(|i| set.candidates[i].clone()).collect())
}

/// Mean over scenes of distinct candidates / candidates.
pub fn unique_fraction(sets: &[CandidateSet]) -> f64 {
    let per_scene: Vec<f64> = sets
        .iter()
        .filter(|s| !s.candidates.is_empty())
        .map(|s| s.texts().collect::<HashSet<_>>().len() as f64 / s.candidates.len() as f64)
        .collect();
    if per_scene.is_empty() {
        0.0
    } else {
        per_scene.iter().sum::<f64>() / per_scene.len() as f64
    }
}

/// Share of pooled top sentences absent from the training references.
///
/// For each scene the first `top_m` distinct texts of the re-ranked list are
/// taken.
pub fn novel_fraction(ranked: &[Vec<Candidate>], train_sentences: &HashSet<&str>, top_m: usize) -> f64 {
    let (mut novel, mut total) = (0usize, 0usize);
    for list in ranked {
        let mut seen = HashSet::new();
        for c in list {
            if seen.len() == top_m {
                break;
            }
            if seen.insert(c.text.as_str()) {
                total += 1;
                if !train_sentences.contains(c.text.as_str()) {
                    novel += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        novel as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub unique: f64,
    pub novel: f64,
}

pub fn diversity_metrics(
    sets: &[CandidateSet],
    ranked: &[Vec<Candidate>],
    train_sentences: &HashSet<&str>,
    top_m: usize,
) -> Diversity {
    Diversity {
        unique: unique_fraction(sets),
        novel: novel_fraction(ranked, train_sentences, top_m),
    }
}
