//! Caption metrics and the evaluation protocol built on them.

mod metrics;
mod protocol;

pub use metrics::{bleu, cider, cider_vectors, tokenize, NgramStats, TfIdf, MAX_N};
pub use protocol::{
    consensus_rerank, diversity_metrics, novel_fraction, oracle_scores, score_candidate, unique_fraction, Candidate,
    CandidateSet, ConsensusIndex, Diversity, Scores,
};
