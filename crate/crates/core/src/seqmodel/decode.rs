use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nets::CaptionModel;
use super::vocab::{TokenSequence, Vocabulary};
use crate::error::Result;
use crate::priors::ClusterVector;

/// An autoregressive next-token distribution.
///
/// `initial` is the state after `<start>` has been consumed.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn initial(&self) -> Self::State;
    fn log_probs(&self, state: &Self::State) -> Vec<f64>;
    fn advance(&self, state: &Self::State, token: usize) -> Self::State;
}

/// A trained decoder bound to one `(feat, c, z)` conditioning.
pub struct DecoderStepper<'m> {
    model: &'m CaptionModel,
    h0: Vec<f64>,
}

impl<'m> DecoderStepper<'m> {
    /// `z = None` feeds a zero latent, which is how the baseline decodes.
    pub fn new(model: &'m CaptionModel, feat: &[f64], c: &ClusterVector, z: Option<&[f64]>) -> Result<Self> {
        model.check_inputs(feat, c, None)?;
        let zeros = vec![0.0; model.latent_dim()];
        let z = z.unwrap_or(&zeros);
        model.check_latent(z)?;
        let dec = &model.decoder;
        let h = dec.prefix_values(&model.params, feat, c, z);
        let h0 = dec.step_values(&model.params, &h, Vocabulary::START_ID);
        Ok(Self { model, h0 })
    }
}

impl StepModel for DecoderStepper<'_> {
    type State = Vec<f64>;

    fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    fn initial(&self) -> Vec<f64> {
        self.h0.clone()
    }

    fn log_probs(&self, state: &Vec<f64>) -> Vec<f64> {
        self.model.decoder.log_probs_values(&self.model.params, state)
    }

    fn advance(&self, state: &Vec<f64>, token: usize) -> Vec<f64> {
        self.model.decoder.step_values(&self.model.params, state, token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Lowest index wins ties; `<start>` is never chosen.
fn argmax(lp: &[f64]) -> usize {
    let mut best = Vocabulary::END_ID;
    for (i, &v) in lp.iter().enumerate().skip(Vocabulary::END_ID + 1) {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(lp: &[f64], rng: &mut R) -> usize {
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let mass: f64 = probs[Vocabulary::END_ID..].iter().sum();
    let mut u = rng.random::<f64>() * mass;
    let mut last = Vocabulary::END_ID;
    for (i, &p) in probs.iter().enumerate().skip(Vocabulary::END_ID) {
        if p > 0.0 {
            last = i;
            if u < p {
                return i;
            }
            u -= p;
        }
    }
    last
}

/// Rolls the model out until `<end>` or `max_len` tokens.
pub fn generate<M: StepModel, R: Rng + ?Sized>(
    model: &M,
    mode: DecodeMode,
    rng: &mut R,
    max_len: usize,
) -> TokenSequence {
    let mut state = model.initial();
    let mut ids = Vec::new();
    while ids.len() < max_len {
        let lp = model.log_probs(&state);
        let tok = match mode {
            DecodeMode::Greedy => argmax(&lp),
            DecodeMode::Sample => draw(&lp, rng),
        };
        if tok == Vocabulary::END_ID {
            break;
        }
        ids.push(tok);
        state = model.advance(&state, tok);
    }
    TokenSequence::new(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub seq: TokenSequence,
    /// Sum of token log-probabilities, including the final `<end>`.
    pub log_prob: f64,
}

/// Beam search keeping the best `width` expansions per step.
///
/// A hypothesis that emits `<end>` leaves the beam and the beam shrinks by
/// one. At `max_len` tokens only `<end>` may follow. Returns at most `width`
/// finished hypotheses, best first.
pub fn beam_search<M: StepModel>(model: &M, width: usize, max_len: usize) -> Vec<Hypothesis> {
    let width = width.max(1);
    let vocab = model.vocab_size();
    let mut alive: Vec<(Vec<usize>, f64, M::State)> = vec![(Vec::new(), 0.0, model.initial())];
    let mut done: Vec<Hypothesis> = Vec::new();

    while !alive.is_empty() && done.len() < width {
        let mut expansions: Vec<(f64, usize, usize)> = Vec::new();
        for (b, (ids, score, state)) in alive.iter().enumerate() {
            let lp = model.log_probs(state);
            if ids.len() >= max_len {
                expansions.push((score + lp[Vocabulary::END_ID], b, Vocabulary::END_ID));
            } else {
                for (tok, &l) in lp.iter().enumerate().take(vocab).skip(Vocabulary::END_ID) {
                    expansions.push((score + l, b, tok));
                }
            }
        }
        expansions.retain(|e| e.0 > f64::NEG_INFINITY);
        expansions.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        expansions.truncate(width - done.len());

        let mut next = Vec::with_capacity(expansions.len());
        for (score, b, tok) in expansions {
            let (ids, _, state) = &alive[b];
            if tok == Vocabulary::END_ID {
                done.push(Hypothesis {
                    seq: TokenSequence::new(ids.clone()),
                    log_prob: score,
                });
            } else {
                let mut ids = ids.clone();
                ids.push(tok);
                next.push((ids, score, model.advance(state, tok)));
            }
        }
        alive = next;
    }
    done.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap_or(Ordering::Equal));
    done
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::log_softmax;
    use crate::seqmodel::{CellKind, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// First-order Markov table over `<start>`, `<end>`, `<unk>` and three words.
    struct Table {
        rows: Vec<Vec<f64>>,
    }

    impl Table {
        fn new(logits: &[[f64; 6]]) -> Self {
            Self {
                rows: logits.iter().map(|r| log_softmax(r)).collect(),
            }
        }
    }

    impl StepModel for Table {
        type State = usize;
        fn vocab_size(&self) -> usize {
            6
        }
        fn initial(&self) -> usize {
            Vocabulary::START_ID
        }
        fn log_probs(&self, s: &usize) -> Vec<f64> {
            self.rows[*s].clone()
        }
        fn advance(&self, _: &usize, tok: usize) -> usize {
            tok
        }
    }

    fn toy_table() -> Table {
        let n = f64::NEG_INFINITY;
        Table::new(&[
            [n, -1.0, n, 1.0, 0.5, 0.0],
            [n, 0.0, n, 0.0, 0.0, 0.0],
            [n, 0.0, n, 0.0, 0.0, 0.0],
            [n, 0.2, n, -0.5, 1.5, 0.1],
            [n, 1.0, n, 0.3, -1.0, 0.9],
            [n, 1.2, n, 0.8, 0.4, -0.3],
        ])
    }

    fn enumerate<M: StepModel>(m: &M, max_len: usize) -> Vec<Hypothesis> {
        fn rec<M: StepModel>(
            m: &M,
            ids: &mut Vec<usize>,
            s: M::State,
            lp: f64,
            max_len: usize,
            out: &mut Vec<Hypothesis>,
        ) {
            let dist = m.log_probs(&s);
            out.push(Hypothesis {
                seq: TokenSequence::new(ids.clone()),
                log_prob: lp + dist[Vocabulary::END_ID],
            });
            if ids.len() == max_len {
                return;
            }
            for (tok, &p) in dist.iter().enumerate().skip(Vocabulary::END_ID + 1) {
                if p == f64::NEG_INFINITY {
                    continue;
                }
                ids.push(tok);
                rec(m, ids, m.advance(&s, tok), lp + p, max_len, out);
                ids.pop();
            }
        }
        let mut out = Vec::new();
        rec(m, &mut Vec::new(), m.initial(), 0.0, max_len, &mut out);
        out.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap());
        out
    }

    #[test]
    fn beam_two_matches_exhaustive_top_two() {
        let t = toy_table();
        let exact = enumerate(&t, 4);
        let beam = beam_search(&t, 2, 4);
        assert_eq!(beam.len(), 2);
        for (b, e) in beam.iter().zip(&exact) {
            assert_eq!(b.seq, e.seq);
            assert!((b.log_prob - e.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn unbounded_width_is_exhaustive() {
        let t = toy_table();
        let exact = enumerate(&t, 3);
        let beam = beam_search(&t, exact.len(), 3);
        assert_eq!(beam.len(), exact.len());
        for (b, e) in beam.iter().zip(&exact) {
            assert!((b.log_prob - e.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_sorted_and_distinct() {
        let t = toy_table();
        let beam = beam_search(&t, 5, 4);
        for w in beam.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        let set: std::collections::HashSet<_> = beam.iter().map(|h| h.seq.clone()).collect();
        assert_eq!(set.len(), beam.len());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let flat = Table::new(&[[0.0; 6]; 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate(&flat, DecodeMode::Greedy, &mut rng, 5).is_empty());
        let no_end = Table::new(&[[0.0, -9.0, 0.0, 0.0, 0.0, 0.0]; 6]);
        assert_eq!(generate(&no_end, DecodeMode::Greedy, &mut rng, 3).ids, vec![2, 2, 2]);
    }

    fn small_model() -> CaptionModel {
        let cfg = ModelConfig {
            embed_dim: 5,
            hidden_dim: 7,
            latent_dim: 3,
            max_len: 6,
            cell: CellKind::Gru,
        };
        CaptionModel::new(&cfg, 8, 4, 3, 1.0, 11).unwrap()
    }

    #[test]
    fn beam_one_is_greedy_and_scores_rescore() {
        let m = small_model();
        let c = ClusterVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let feat = [0.5, -0.4, 0.1, 0.9];
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let stepper = DecoderStepper::new(&m, &feat, &c, Some(&z)).unwrap();
            let greedy = generate(&stepper, DecodeMode::Greedy, &mut rng, 6);
            let beam1 = beam_search(&stepper, 1, 6);
            assert_eq!(beam1[0].seq, greedy);
            for h in beam_search(&stepper, 4, 6) {
                let loss = m.sequence_logloss(&feat, &c, Some(&z), &h.seq).unwrap();
                assert!((h.log_prob + loss).abs() < 1e-9, "{} vs {}", h.log_prob, -loss);
            }
        }
    }

    #[test]
    fn generation_contract() {
        let m = small_model();
        let c = ClusterVector::uniform(3).unwrap();
        let stepper = DecoderStepper::new(&m, &[0.0; 4], &c, None).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = generate(&stepper, DecodeMode::Sample, &mut r1, 6);
            let b = generate(&stepper, DecodeMode::Sample, &mut r2, 6);
            assert_eq!(a, b);
            assert!(a.len() <= 6);
            assert!(!a.ids.contains(&Vocabulary::START_ID));
            assert!(!a.ids.contains(&Vocabulary::END_ID));
        }
        let g1 = generate(&stepper, DecodeMode::Greedy, &mut r1, 6);
        let g2 = generate(&stepper, DecodeMode::Greedy, &mut r2, 6);
        assert_eq!(g1, g2);
    }
}
