use std::collections::{BTreeMap, HashMap, HashSet};

pub const MAX_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

pub type Ngram<'a> = &'a [&'a str];

pub fn tokenize(sentence: &str) -> Vec<&str> {
    sentence.split_whitespace().collect()
}

/// Counts of all n-grams of order `n` in `words`.
fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<Ngram<'a>, usize> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence-level BLEU-1..4.
///
/// Clipped n-gram precisions are combined by geometric mean and multiplied
/// by the brevity penalty against the closest reference length (shorter
/// wins ties). A zero precision at any order gives zero for that and all
/// higher orders.
pub fn bleu(candidate: &str, references: &[&str]) -> [f64; MAX_N] {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<&str>> = references.iter().map(|r| tokenize(r)).collect();
    let mut out = [0.0; MAX_N];
    if cand.is_empty() || refs.is_empty() {
        return out;
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("nonempty references");
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };

    let mut log_sum = 0.0;
    for n in 1..=MAX_N {
        let counts = ngram_counts(&cand, n);
        let total: usize = counts.values().sum();
        if total == 0 {
            break;
        }
        let mut max_ref: HashMap<Ngram, usize> = HashMap::new();
        for rw in &refs {
            for (g, k) in ngram_counts(rw, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let clipped: usize = counts
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            break;
        }
        log_sum += (clipped as f64 / total as f64).ln();
        out[n - 1] = bp * (log_sum / n as f64).exp();
    }
    out
}

/// Document frequencies of n-grams over a reference corpus, one document per
/// scene. Fixed once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramStats {
    df: HashMap<Vec<String>, usize>,
    num_docs: usize,
}

impl NgramStats {
    pub fn from_reference_sets<S: AsRef<str>>(sets: &[Vec<S>]) -> Self {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for refs in sets {
            let mut seen: HashSet<Vec<String>> = HashSet::new();
            for r in refs {
                let words = tokenize(r.as_ref());
                for n in 1..=MAX_N {
                    if words.len() >= n {
                        for g in words.windows(n) {
                            seen.insert(g.iter().map(|w| w.to_string()).collect());
                        }
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Self {
            df,
            num_docs: sets.len(),
        }
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn df(&self, ngram: &[&str]) -> usize {
        let key: Vec<String> = ngram.iter().map(|w| w.to_string()).collect();
        self.df.get(&key).copied().unwrap_or(0)
    }

    /// `log N − log max(1, df)`.
    pub fn idf(&self, ngram: &[&str]) -> f64 {
        (self.num_docs.max(1) as f64).ln() - (self.df(ngram).max(1) as f64).ln()
    }

    /// TF-IDF vectors of one sentence, per order.
    pub fn vectorize(&self, sentence: &str) -> TfIdf {
        let words = tokenize(sentence);
        let mut grams = Vec::with_capacity(MAX_N);
        let mut norms = [0.0; MAX_N];
        for n in 1..=MAX_N {
            let v: BTreeMap<Vec<String>, f64> = ngram_counts(&words, n)
                .into_iter()
                .map(|(g, k)| (g.iter().map(|w| w.to_string()).collect(), k as f64 * self.idf(g)))
                .collect();
            norms[n - 1] = v.values().map(|x| x * x).sum::<f64>().sqrt();
            grams.push(v);
        }
        TfIdf {
            grams,
            norms,
            length: words.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfIdf {
    grams: Vec<BTreeMap<Vec<String>, f64>>,
    norms: [f64; MAX_N],
    length: usize,
}

impl TfIdf {
    pub fn length(&self) -> usize {
        self.length
    }

    /// Per-order clipped cosine with the Gaussian length penalty.
    pub fn similarity(&self, reference: &TfIdf) -> [f64; MAX_N] {
        let delta = self.length as f64 - reference.length as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut out = [0.0; MAX_N];
        for (n, slot) in out.iter_mut().enumerate() {
            let mut dot = 0.0;
            for (g, &h) in &self.grams[n] {
                if let Some(&r) = reference.grams[n].get(g) {
                    dot += h.min(r) * r;
                }
            }
            if self.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                dot /= self.norms[n] * reference.norms[n];
            }
            *slot = dot * penalty;
        }
        out
    }
}

/// CIDEr-D of a candidate against precomputed reference vectors.
pub fn cider_vectors(candidate: &TfIdf, references: &[TfIdf]) -> f64 {
    if candidate.length == 0 || references.is_empty() {
        return 0.0;
    }
    let mut per_n = [0.0; MAX_N];
    for r in references {
        for (acc, s) in per_n.iter_mut().zip(candidate.similarity(r)) {
            *acc += s;
        }
    }
    10.0 * per_n.iter().sum::<f64>() / MAX_N as f64 / references.len() as f64
}

/// CIDEr-D: mean over orders 1..4 of the mean clipped TF-IDF cosine against
/// each reference, with a Gaussian length penalty (σ = 6), times 10.
pub fn cider(candidate: &str, references: &[&str], stats: &NgramStats) -> f64 {
    let refs: Vec<TfIdf> = references.iter().map(|r| stats.vectorize(r)).collect();
    cider_vectors(&stats.vectorize(candidate), &refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bleu_examples() {
        let b = bleu("the cat sat on the mat", &["the cat sat on the mat"]);
        assert!((b[3] - 1.0).abs() < 1e-12);
        assert_eq!(bleu("dog runs", &["the cat sat"])[0], 0.0);
        let b = bleu("the cat sat", &["the cat sat down"]);
        let expect = (1.0f64 - 4.0 / 3.0).exp();
        assert!((b[0] - expect).abs() < 1e-9);
        assert!((b[0] - 0.7165).abs() < 1e-4);
        assert_eq!(bleu("", &["a b"]), [0.0; 4]);
    }

    #[test]
    fn bleu_clips_repeats() {
        // "the the the the" vs "the cat": clipped unigram precision 1/4, length 4 > 2
        let b = bleu("the the the the", &["the cat"]);
        assert!((b[0] - 0.25).abs() < 1e-12);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn bleu_closest_reference_length() {
        // c = 2, references of length 1 and 3 tie on distance; the shorter wins, no penalty
        let b = bleu("a b", &["a", "a b c"]);
        assert!((b[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_words_can_raise_higher_orders() {
        // unigram precision 3/4 after clipping, bigram precision 3/3
        let b = bleu("b a a b", &["a b a a"]);
        assert!((b[0] - 0.75).abs() < 1e-12);
        assert!((b[1] - 0.75f64.sqrt()).abs() < 1e-12);
        assert!(b[1] > b[0]);
    }

    #[test]
    fn cider_hand_computed() {
        // Three one-reference documents over a five-word vocabulary.
        let docs = vec![vec!["a b c"], vec!["a b d"], vec!["e e"]];
        let stats = NgramStats::from_reference_sets(&docs);
        let ln3 = 3f64.ln();
        let idf = |df: f64| ln3 - df.ln();
        // candidate "a b" vs reference "a b c"
        // unigrams: a,b df=2 in both; reference c df=1
        let (ia, ic) = (idf(2.0), idf(1.0));
        let uni_h = (2.0 * ia * ia).sqrt();
        let uni_r = (2.0 * ia * ia + ic * ic).sqrt();
        let s1 = (2.0 * ia * ia) / (uni_h * uni_r);
        // bigram "a b" df=2; reference has also "b c" df=1
        let bi_h = ia;
        let bi_r = (ia * ia + ic * ic).sqrt();
        let s2 = (ia * ia) / (bi_h * bi_r);
        let penalty = (-1.0f64 / 72.0).exp();
        let expect = 10.0 * (s1 + s2) * penalty / 4.0;
        let got = cider("a b", &["a b c"], &stats);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn cider_basic_cases() {
        let docs = vec![vec!["x y z w"], vec!["p q r s"]];
        let stats = NgramStats::from_reference_sets(&docs);
        let own = cider("x y z w", &["x y z w"], &stats);
        assert!(own > 0.0);
        assert!((own - 10.0).abs() < 1e-9);
        assert!(cider("x y z", &["x y z w"], &stats) < own);
        assert_eq!(cider("p q r s", &["x y z w"], &stats), 0.0);
        assert_eq!(cider("", &["x y z w"], &stats), 0.0);
    }

    #[test]
    fn clipping_limits_repeated_terms() {
        let docs = vec![vec!["a b"], vec!["c d"], vec!["e f"]];
        let stats = NgramStats::from_reference_sets(&docs);
        let once = stats.vectorize("a c");
        let reference = stats.vectorize("a b");
        let twice = stats.vectorize("a a");
        let ia = stats.idf(&["a"]);
        // min(2 idf, idf)·idf over norms (2 idf)(√2 idf)
        let expect = (ia * ia) / (2.0 * ia * 2f64.sqrt() * ia);
        assert!((twice.similarity(&reference)[0] - expect).abs() < 1e-12);
        assert!(once.similarity(&reference)[0] > 0.0);
    }

    proptest! {
        #[test]
        fn reference_order_does_not_matter(words in prop::collection::vec(0usize..6, 1..8), rot in 0usize..3) {
            let vocab = ["a", "b", "c", "d", "e", "f"];
            let cand: String = words.iter().map(|&i| vocab[i]).collect::<Vec<_>>().join(" ");
            let refs = ["a b c d", "b c e", "f a a b"];
            let mut rotated = refs.to_vec();
            rotated.rotate_left(rot);
            prop_assert_eq!(bleu(&cand, &refs), bleu(&cand, &rotated));
            let stats = NgramStats::from_reference_sets(&[refs.to_vec()]);
            let a = cider(&cand, &refs, &stats);
            let b = cider(&cand, &rotated, &stats);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn bleu_nonincreasing_for_distinct_word_candidates(
            perm in Just((0usize..6).collect::<Vec<_>>()).prop_shuffle(),
            len in 2usize..7,
            reference in prop::collection::vec(0usize..6, 2..10),
        ) {
            let vocab = ["a", "b", "c", "d", "e", "f"];
            let join = |w: &[usize]| w.iter().map(|&i| vocab[i]).collect::<Vec<_>>().join(" ");
            let b = bleu(&join(&perm[..len]), &[&join(&reference)]);
            for n in 1..MAX_N {
                if b[n] > 0.0 {
                    prop_assert!(b[n] <= b[n - 1] + 1e-12);
                }
            }
        }
    }
}
