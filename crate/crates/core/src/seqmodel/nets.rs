use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cell::{vec_mat_acc, CellKind, RecurrentCell};
use super::vocab::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numcore::{log_softmax, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::priors::{ClusterVector, GaussianPosterior, PriorKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub max_len: usize,
    pub cell: CellKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            latent_dim: 16,
            max_len: 20,
            cell: CellKind::Gru,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 || self.max_len == 0 {
            return Err(Error::invalid("model dimensions must all be >= 1"));
        }
        Ok(())
    }
}

/// How the K encoder heads collapse into one posterior.
#[derive(Debug, Clone, Copy)]
pub enum HeadMix<'a> {
    /// Use head 1 only (fixed and mixture priors).
    First,
    /// `μ = Σ c_k μ_k`, `σ² = Σ c_k² σ_k²`.
    Weighted(&'a ClusterVector),
}

impl<'a> HeadMix<'a> {
    pub fn for_prior(kind: PriorKind, c: &'a ClusterVector) -> Self {
        match kind {
            PriorKind::Additive => HeadMix::Weighted(c),
            PriorKind::Fixed | PriorKind::Gmm => HeadMix::First,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PosteriorNodes {
    pub mu: NodeId,
    pub log_var: NodeId,
}

fn row_leaf(tape: &mut Tape, values: &[f64]) -> NodeId {
    tape.leaf(Tensor::row(values.to_vec()))
}

/// Recurrent encoder: feature step, cluster step, then the caption words.
/// The final hidden state feeds K mean heads and K log-variance heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderNet {
    embed: ParamId,
    feat_proj: ParamId,
    cluster_proj: ParamId,
    cell: RecurrentCell,
    mu_heads: ParamId,
    mu_bias: ParamId,
    lv_heads: ParamId,
    lv_bias: ParamId,
    /// Mean heads emit values in units of this scale.
    mean_scale: f64,
    pub num_heads: usize,
    pub latent_dim: usize,
}

impl EncoderNet {
    pub fn mean_scale(&self) -> f64 {
        self.mean_scale
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        feat: &[f64],
        c: &ClusterVector,
        x: &TokenSequence,
        mix: HeadMix,
    ) -> Result<PosteriorNodes> {
        let (mu_all, lv_all) = self.head_outputs(tape, feat, c, x)?;
        let d = self.latent_dim;
        let kd = self.num_heads * d;
        let weights: Vec<f64> = match mix {
            HeadMix::First => {
                let mut w = vec![0.0; self.num_heads];
                w[0] = 1.0;
                w
            }
            HeadMix::Weighted(c) => c.weights().to_vec(),
        };
        let mix_matrix = |power: i32| {
            let mut m = vec![0.0; kd * d];
            for (k, w) in weights.iter().enumerate() {
                for i in 0..d {
                    m[(k * d + i) * d + i] = w.powi(power);
                }
            }
            Tensor::matrix(kd, d, m).expect("consistent shape")
        };
        let mean_mix = tape.leaf(mix_matrix(1));
        let var_mix = tape.leaf(mix_matrix(2));
        let mu = tape.matmul(mu_all, mean_mix)?;
        let var_all = tape.exp(lv_all)?;
        let var = tape.matmul(var_all, var_mix)?;
        let log_var = tape.log(var)?;
        Ok(PosteriorNodes { mu, log_var })
    }

    /// All K head outputs side by side: `([1, K·d] means, [1, K·d] log-variances)`.
    pub fn head_outputs(
        &self,
        tape: &mut Tape,
        feat: &[f64],
        c: &ClusterVector,
        x: &TokenSequence,
    ) -> Result<(NodeId, NodeId)> {
        let hidden = self.cell.hidden_dim;
        let mut h = tape.leaf(Tensor::zeros(&[1, hidden]));
        let feat_node = row_leaf(tape, feat);
        let feat_proj = tape.param(self.feat_proj);
        let input = tape.matmul(feat_node, feat_proj)?;
        h = self.cell.step(tape, input, h)?;
        let c_node = row_leaf(tape, c.weights());
        let cluster_proj = tape.param(self.cluster_proj);
        let input = tape.matmul(c_node, cluster_proj)?;
        h = self.cell.step(tape, input, h)?;
        let embed = tape.param(self.embed);
        for &tok in &x.ids {
            let input = tape.row(embed, tok)?;
            h = self.cell.step(tape, input, h)?;
        }
        let mu_heads = tape.param(self.mu_heads);
        let mu_bias = tape.param(self.mu_bias);
        let lv_heads = tape.param(self.lv_heads);
        let lv_bias = tape.param(self.lv_bias);
        let mu = tape.matmul(h, mu_heads)?;
        let mu = tape.add(mu, mu_bias)?;
        let mu = tape.scale(mu, self.mean_scale)?;
        let lv = tape.matmul(h, lv_heads)?;
        let lv = tape.add(lv, lv_bias)?;
        Ok((mu, lv))
    }
}

/// Recurrent decoder: feature step, cluster step, latent step, then
/// `<start>` and the caption words; a linear head predicts the next token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderNet {
    embed: ParamId,
    feat_proj: ParamId,
    cluster_proj: ParamId,
    latent_proj: ParamId,
    cell: RecurrentCell,
    out_w: ParamId,
    out_b: ParamId,
    pub vocab_size: usize,
}

impl DecoderNet {
    /// Hidden state after the feature, cluster and latent steps.
    pub fn prefix(&self, tape: &mut Tape, feat: &[f64], c: &ClusterVector, z: NodeId) -> Result<NodeId> {
        let mut h = tape.leaf(Tensor::zeros(&[1, self.cell.hidden_dim]));
        let feat_node = row_leaf(tape, feat);
        let feat_proj = tape.param(self.feat_proj);
        let input = tape.matmul(feat_node, feat_proj)?;
        h = self.cell.step(tape, input, h)?;
        let c_node = row_leaf(tape, c.weights());
        let cluster_proj = tape.param(self.cluster_proj);
        let input = tape.matmul(c_node, cluster_proj)?;
        h = self.cell.step(tape, input, h)?;
        let latent_proj = tape.param(self.latent_proj);
        let input = tape.matmul(z, latent_proj)?;
        self.cell.step(tape, input, h)
    }

    pub fn step(&self, tape: &mut Tape, h: NodeId, token: usize) -> Result<NodeId> {
        let embed = tape.param(self.embed);
        let input = tape.row(embed, token)?;
        self.cell.step(tape, input, h)
    }

    pub fn logits(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        let out_w = tape.param(self.out_w);
        let out_b = tape.param(self.out_b);
        let l = tape.matmul(h, out_w)?;
        tape.add(l, out_b)
    }

    /// `Σ_t −log p(x_t | x_<t, feat, c, z)`, including the final `<end>`.
    pub fn logloss(
        &self,
        tape: &mut Tape,
        feat: &[f64],
        c: &ClusterVector,
        z: NodeId,
        x: &TokenSequence,
    ) -> Result<NodeId> {
        let mut h = self.prefix(tape, feat, c, z)?;
        h = self.step(tape, h, Vocabulary::START_ID)?;
        let mut total: Option<NodeId> = None;
        let targets = x.ids.iter().copied().chain(std::iter::once(Vocabulary::END_ID));
        let n = x.ids.len() + 1;
        for (t, target) in targets.enumerate() {
            let logits = self.logits(tape, h)?;
            let ce = tape.softmax_cross_entropy(logits, target)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
            if t + 1 < n {
                h = self.step(tape, h, target)?;
            }
        }
        Ok(total.expect("at least the end token"))
    }

    fn project_values(store: &ParamStore, x: &[f64], w: ParamId, out_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; out_dim];
        vec_mat_acc(x, store.get(w).data(), &mut out);
        out
    }

    pub fn prefix_values(&self, store: &ParamStore, feat: &[f64], c: &ClusterVector, z: &[f64]) -> Vec<f64> {
        let e = self.cell.input_dim;
        let h = vec![0.0; self.cell.hidden_dim];
        let h = self
            .cell
            .step_values(store, &Self::project_values(store, feat, self.feat_proj, e), &h);
        let h = self.cell.step_values(
            store,
            &Self::project_values(store, c.weights(), self.cluster_proj, e),
            &h,
        );
        self.cell
            .step_values(store, &Self::project_values(store, z, self.latent_proj, e), &h)
    }

    pub fn step_values(&self, store: &ParamStore, h: &[f64], token: usize) -> Vec<f64> {
        let e = self.cell.input_dim;
        let x = &store.get(self.embed).data()[token * e..(token + 1) * e];
        self.cell.step_values(store, x, h)
    }

    pub fn log_probs_values(&self, store: &ParamStore, h: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0; self.vocab_size];
        vec_mat_acc(h, store.get(self.out_w).data(), &mut logits);
        for (l, b) in logits.iter_mut().zip(store.get(self.out_b).data()) {
            *l += b;
        }
        log_softmax(&logits)
    }
}

/// Encoder, decoder and their parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub num_categories: usize,
    pub params: ParamStore,
    pub encoder: EncoderNet,
    pub decoder: DecoderNet,
}

impl CaptionModel {
    /// Fresh model. The posterior heads start at the prior's scale: log-variance
    /// biases at `ln(prior_sigma²)` and mean heads scaled by `prior_sigma`.
    pub fn new(
        config: &ModelConfig,
        vocab_size: usize,
        feat_dim: usize,
        num_categories: usize,
        prior_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !(prior_sigma > 0.0 && prior_sigma.is_finite()) {
            return Err(Error::invalid("prior_sigma must be positive and finite"));
        }
        if vocab_size <= 3 || feat_dim == 0 || num_categories == 0 {
            return Err(Error::invalid("model needs a vocabulary, features and categories"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (e, h, d, k) = (config.embed_dim, config.hidden_dim, config.latent_dim, num_categories);

        let encoder = EncoderNet {
            embed: store.add_uniform("enc.embed", vocab_size, e, &mut rng),
            feat_proj: store.add_uniform("enc.feat_proj", feat_dim, e, &mut rng),
            cluster_proj: store.add_uniform("enc.cluster_proj", k, e, &mut rng),
            cell: RecurrentCell::new(&mut store, "enc.cell", e, h, &mut rng),
            mu_heads: store.add_uniform("enc.mu_heads", h, k * d, &mut rng),
            mu_bias: store.add("enc.mu_bias", Tensor::zeros(&[1, k * d])),
            lv_heads: store.add_uniform("enc.lv_heads", h, k * d, &mut rng),
            lv_bias: store.add(
                "enc.lv_bias",
                Tensor::row(vec![(prior_sigma * prior_sigma).ln(); k * d]),
            ),
            mean_scale: prior_sigma,
            num_heads: k,
            latent_dim: d,
        };
        let decoder = DecoderNet {
            embed: store.add_uniform("dec.embed", vocab_size, e, &mut rng),
            feat_proj: store.add_uniform("dec.feat_proj", feat_dim, e, &mut rng),
            cluster_proj: store.add_uniform("dec.cluster_proj", k, e, &mut rng),
            latent_proj: store.add_uniform("dec.latent_proj", d, e, &mut rng),
            cell: RecurrentCell::new(&mut store, "dec.cell", e, h, &mut rng),
            out_w: store.add_uniform("dec.out_w", h, vocab_size, &mut rng),
            out_b: store.add("dec.out_b", Tensor::zeros(&[1, vocab_size])),
            vocab_size,
        };
        Ok(Self {
            config: config.clone(),
            vocab_size,
            feat_dim,
            num_categories,
            params: store,
            encoder,
            decoder,
        })
    }

    /// Zeroes the latent projection so the decoder ignores `z` entirely.
    pub fn zero_latent_projection(&mut self) {
        self.params.get_mut(self.decoder.latent_proj).data_mut().fill(0.0);
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn check_inputs(&self, feat: &[f64], c: &ClusterVector, x: Option<&TokenSequence>) -> Result<()> {
        if feat.len() != self.feat_dim {
            return Err(Error::shape(
                "model",
                format!("feature has {} entries, model expects {}", feat.len(), self.feat_dim),
            ));
        }
        if c.len() != self.num_categories {
            return Err(Error::shape(
                "model",
                format!(
                    "cluster vector has {} entries, model expects {}",
                    c.len(),
                    self.num_categories
                ),
            ));
        }
        if let Some(x) = x {
            if x.len() > self.config.max_len {
                return Err(Error::invalid(format!(
                    "sequence of length {} exceeds max length {}",
                    x.len(),
                    self.config.max_len
                )));
            }
            if let Some(&bad) = x
                .ids
                .iter()
                .find(|&&i| i >= self.vocab_size || i == Vocabulary::START_ID || i == Vocabulary::END_ID)
            {
                return Err(Error::invalid(format!("token id {bad} is not a valid caption token")));
            }
        }
        Ok(())
    }

    pub fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::shape(
                "model",
                format!("latent has {} entries, model expects {}", z.len(), self.latent_dim()),
            ));
        }
        Ok(())
    }

    /// Posterior for one caption; the head mix follows the prior kind.
    pub fn encode(
        &self,
        feat: &[f64],
        c: &ClusterVector,
        x: &TokenSequence,
        kind: PriorKind,
    ) -> Result<GaussianPosterior> {
        self.check_inputs(feat, c, Some(x))?;
        let mut tape = Tape::new(&self.params);
        let q = self
            .encoder
            .forward(&mut tape, feat, c, x, HeadMix::for_prior(kind, c))?;
        GaussianPosterior::new(tape.value(q.mu).data().to_vec(), tape.value(q.log_var).data().to_vec())
    }

    /// Reconstruction log-loss of `x` given latent `z` (zeros when `None`).
    pub fn sequence_logloss(
        &self,
        feat: &[f64],
        c: &ClusterVector,
        z: Option<&[f64]>,
        x: &TokenSequence,
    ) -> Result<f64> {
        self.check_inputs(feat, c, Some(x))?;
        let zeros = vec![0.0; self.latent_dim()];
        let z = z.unwrap_or(&zeros);
        self.check_latent(z)?;
        let mut tape = Tape::new(&self.params);
        let z_node = row_leaf(&mut tape, z);
        let loss = self.decoder.logloss(&mut tape, feat, c, z_node, x)?;
        Ok(tape.value(loss).item())
    }
}
