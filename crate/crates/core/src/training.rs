//! Conditional ELBO training and checkpoint persistence.
//!
//! Checkpoint layout: a header line `{"format","version","sha256"}` followed
//! by one line of JSON payload. The checksum covers the payload bytes after
//! the header's newline. Floats are written in shortest round-trip form.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusSplit, SceneRecord};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tape, Tensor};
use crate::priors::{
    additive_prior_params, init_prior, kl_node, sample_gmm_component, ClusterVector, PriorKind, PriorSpec,
};
use crate::seqmodel::{CaptionModel, HeadMix, ModelConfig, TokenSequence, Vocabulary};

pub const CHECKPOINT_FORMAT: &str = "capvae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    LstmBaseline,
    Cvae,
    GmmCvae,
    AgCvae,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::LstmBaseline, Variant::Cvae, Variant::GmmCvae, Variant::AgCvae];

    pub fn prior_kind(self) -> PriorKind {
        match self {
            Variant::LstmBaseline | Variant::Cvae => PriorKind::Fixed,
            Variant::GmmCvae => PriorKind::Gmm,
            Variant::AgCvae => PriorKind::Additive,
        }
    }

    pub fn uses_latent(self) -> bool {
        self != Variant::LstmBaseline
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::LstmBaseline => "lstm-baseline",
            Variant::Cvae => "cvae",
            Variant::GmmCvae => "gmm-cvae",
            Variant::AgCvae => "ag-cvae",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    /// Component std of the mixture and additive priors.
    pub sigma_train: f64,
    /// Std of the fixed prior.
    pub sigma_fixed: f64,
    pub lr0: f64,
    /// Total epochs; resuming trains up to this count.
    pub epochs: usize,
    pub halve_every: usize,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::AgCvae,
            model: ModelConfig::default(),
            sigma_train: 0.1,
            sigma_fixed: 1.0,
            lr0: 0.01,
            epochs: 30,
            halve_every: 5,
            kl_weight: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid("lr0 must be positive"));
        }
        if self.epochs == 0 || self.halve_every == 0 {
            return Err(Error::invalid("epochs and halve_every must be >= 1"));
        }
        for (name, s) in [("sigma_train", self.sigma_train), ("sigma_fixed", self.sigma_fixed)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::invalid("kl_weight must be nonnegative"));
        }
        Ok(())
    }

    fn prior_sigma(&self) -> f64 {
        match self.variant.prior_kind() {
            PriorKind::Fixed => self.sigma_fixed,
            _ => self.sigma_train,
        }
    }
}

/// `lr0 · 2^(−floor(epoch / halve_every))` for a zero-based epoch.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.halve_every) as i32)
}

/// Position of the training generator, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub vocab: Vocabulary,
    pub model: CaptionModel,
    pub prior: PriorSpec,
    pub config: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
    pub rng: RngState,
    /// Free-form record of the tool and settings that produced this file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl ModelCheckpoint {
    /// Posterior head mix for this checkpoint's prior.
    pub fn head_mix<'a>(&self, c: &'a ClusterVector) -> HeadMix<'a> {
        HeadMix::for_prior(self.prior.kind(), c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub recon: f64,
    pub kl: f64,
}

impl EpochMetrics {
    pub fn loss(&self) -> f64 {
        self.recon + self.kl
    }
}

/// Graph nodes of one ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
}

/// `z = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparameterize(g: &mut Graph, mu: NodeId, log_var: NodeId, eps: &[f64]) -> Result<NodeId> {
    let half = g.scale(log_var, 0.5)?;
    let std = g.exp(half)?;
    let eps = g.leaf(Tensor::row(eps.to_vec()));
    let noise = g.mul(std, eps)?;
    g.add(mu, noise)
}

/// Single-sample negative ELBO: reconstruction log-loss plus `kl_weight · KL`.
///
/// The baseline decodes from a zero latent and has no KL term. The mixture
/// prior draws a fresh component `k ~ c` on every call.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &CaptionModel,
    prior: &PriorSpec,
    variant: Variant,
    feat: &[f64],
    c: &ClusterVector,
    x: &TokenSequence,
    kl_weight: f64,
    rng: &mut R,
) -> Result<ElboNodes> {
    model.check_inputs(feat, c, Some(x))?;
    let d = model.latent_dim();
    if !variant.uses_latent() {
        let z = tape.leaf(Tensor::zeros(&[1, d]));
        let recon = model.decoder.logloss(tape, feat, c, z, x)?;
        let kl = tape.constant(0.0);
        return Ok(ElboNodes {
            total: recon,
            recon,
            kl,
        });
    }
    if prior.kind() != variant.prior_kind() {
        return Err(Error::invalid(format!(
            "{variant} needs a {} prior",
            variant.prior_kind()
        )));
    }
    let q = model
        .encoder
        .forward(tape, feat, c, x, HeadMix::for_prior(prior.kind(), c))?;
    let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let z = reparameterize(tape, q.mu, q.log_var, &eps)?;
    let recon = model.decoder.logloss(tape, feat, c, z, x)?;
    let kl = match prior.kind() {
        PriorKind::Additive => {
            let (mean, var) = additive_prior_params(prior, c)?;
            kl_node(tape, q.mu, q.log_var, &mean, var)?
        }
        PriorKind::Gmm => {
            let k = sample_gmm_component(c, rng);
            let (mean, var) = prior.component(k)?;
            kl_node(tape, q.mu, q.log_var, mean, var)?
        }
        PriorKind::Fixed => {
            let (mean, var) = prior.component(0)?;
            kl_node(tape, q.mu, q.log_var, mean, var)?
        }
    };
    let weighted = tape.scale(kl, kl_weight)?;
    let total = tape.add(recon, weighted)?;
    Ok(ElboNodes { total, recon, kl })
}

/// Untrained checkpoint for a corpus.
pub fn init_checkpoint(corpus: &CorpusSplit, cfg: &TrainConfig) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let k = corpus.k();
    let sigma = cfg.prior_sigma();
    let mut model = CaptionModel::new(&cfg.model, corpus.vocab.len(), corpus.feat_dim(), k, sigma, cfg.seed)?;
    if !cfg.variant.uses_latent() {
        model.zero_latent_projection();
    }
    let prior = init_prior(
        cfg.variant.prior_kind(),
        k,
        cfg.model.latent_dim,
        sigma,
        cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    Ok(ModelCheckpoint {
        vocab: corpus.vocab.clone(),
        model,
        prior,
        config: cfg.clone(),
        epoch: 0,
        rng: RngState::capture(cfg.seed, &rng),
        provenance: None,
    })
}

fn diverged(epoch: usize, example: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } | Error::Domain { .. } => Error::Diverged {
            epoch,
            example,
            detail: err.to_string(),
        },
        other => other,
    }
}

/// Trains `ckpt` until `ckpt.config.epochs` epochs are complete.
///
/// An epoch visits every training scene once in shuffled order and uses one
/// uniformly chosen reference caption per scene. `on_epoch` sees each
/// epoch's mean reconstruction loss and mean KL.
pub fn continue_training(
    ckpt: &mut ModelCheckpoint,
    corpus: &CorpusSplit,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if corpus.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if corpus.vocab != ckpt.vocab {
        return Err(Error::invalid("corpus vocabulary differs from the checkpoint's"));
    }
    let k = corpus.k();
    let cfg = ckpt.config.clone();
    let examples: Vec<(ClusterVector, Vec<TokenSequence>)> = corpus
        .train
        .iter()
        .map(|s| {
            Ok((
                s.true_cluster(k)?,
                s.references.iter().map(|r| ckpt.vocab.encode(r)).collect(),
            ))
        })
        .collect::<Result<_>>()?;

    let mut rng = ckpt.rng.restore();
    let mut log = Vec::new();
    while ckpt.epoch < cfg.epochs {
        let epoch = ckpt.epoch;
        let lr = learning_rate(&cfg, epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        for &i in &order {
            let scene = &corpus.train[i];
            let (c, refs) = &examples[i];
            let x = &refs[rng.random_range(0..refs.len())];
            let mut tape = Tape::new(&ckpt.model.params);
            let nodes = elbo_loss(
                &mut tape,
                &ckpt.model,
                &ckpt.prior,
                cfg.variant,
                &scene.feat,
                c,
                x,
                cfg.kl_weight,
                &mut rng,
            )
            .map_err(|e| diverged(epoch, i, e))?;
            let recon = tape.value(nodes.recon).item();
            let kl = tape.value(nodes.kl).item();
            tape.backward(nodes.total).map_err(|e| diverged(epoch, i, e))?;
            let grads = tape.into_gradients();
            if !(recon.is_finite() && kl.is_finite() && grads.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    example: i,
                    detail: format!("recon {recon}, kl {kl}"),
                });
            }
            recon_sum += recon;
            kl_sum += kl;
            ckpt.model.params.sgd_step(&grads, lr);
        }
        let n = order.len() as f64;
        let m = EpochMetrics {
            epoch,
            lr,
            recon: recon_sum / n,
            kl: kl_sum / n,
        };
        ckpt.epoch += 1;
        ckpt.rng = RngState::capture(ckpt.rng.seed, &rng);
        on_epoch(&m);
        log.push(m);
    }
    Ok(log)
}

/// Fresh training run.
pub fn train(corpus: &CorpusSplit, cfg: &TrainConfig) -> Result<(ModelCheckpoint, Vec<EpochMetrics>)> {
    let mut ckpt = init_checkpoint(corpus, cfg)?;
    let log = continue_training(&mut ckpt, corpus, |_| {})?;
    Ok((ckpt, log))
}

/// Mean reconstruction loss and KL over every reference of `scenes`,
/// without updating parameters. `epoch` and `lr` are reported as zero.
pub fn mean_loss(ckpt: &ModelCheckpoint, scenes: &[SceneRecord], k: usize, seed: u64) -> Result<EpochMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut recon, mut kl, mut n) = (0.0, 0.0, 0usize);
    for scene in scenes {
        let c = scene.true_cluster(k)?;
        for r in &scene.references {
            let x = ckpt.vocab.encode(r);
            let mut tape = Tape::new(&ckpt.model.params);
            let nodes = elbo_loss(
                &mut tape,
                &ckpt.model,
                &ckpt.prior,
                ckpt.config.variant,
                &scene.feat,
                &c,
                &x,
                ckpt.config.kl_weight,
                &mut rng,
            )?;
            recon += tape.value(nodes.recon).item();
            kl += tape.value(nodes.kl).item();
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok(EpochMetrics {
        epoch: 0,
        lr: 0.0,
        recon: recon / n,
        kl: kl / n,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    sha256: String,
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn checkpoint_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let mut payload = serde_json::to_vec(ckpt).map_err(|e| Error::Parse(e.to_string()))?;
    payload.push(b'\n');
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::Parse(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelCheckpoint> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt(path, "missing header line"))?;
    let header: Header =
        serde_json::from_slice(&bytes[..split]).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(corrupt(path, format!("unknown format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &bytes[split + 1..];
    if hex::encode(Sha256::digest(payload)) != header.sha256 {
        return Err(corrupt(path, "checksum mismatch"));
    }
    let ckpt: ModelCheckpoint =
        serde_json::from_slice(payload).map_err(|e| corrupt(path, format!("bad payload: {e}")))?;
    ckpt.model.params.validate()?;
    ckpt.prior.validate()?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::seqmodel::{generate, CellKind, DecodeMode, DecoderStepper};

    #[test]
    fn schedule_halves() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(&cfg, 0), 0.01);
        assert_eq!(learning_rate(&cfg, 4), 0.01);
        assert_eq!(learning_rate(&cfg, 5), 0.005);
        assert_eq!(learning_rate(&cfg, 12), 0.0025);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
        assert!("vae".parse::<Variant>().is_err());
    }

    pub(crate) fn tiny_corpus() -> CorpusSplit {
        generate_corpus(&CorpusConfig {
            k: 3,
            n_train: 12,
            n_val: 3,
            n_test: 3,
            seed: 7,
            feat_dim: 4,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    pub(crate) fn tiny_config(variant: Variant, epochs: usize) -> TrainConfig {
        TrainConfig {
            variant,
            model: ModelConfig {
                embed_dim: 6,
                hidden_dim: 8,
                latent_dim: 3,
                max_len: 20,
                cell: CellKind::Gru,
            },
            epochs,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    /// Encoder outputs equal to the prior: zero head weights, biases set to
    /// the prior mean and log-variance of component `k`.
    fn freeze_encoder_at_prior(ckpt: &mut ModelCheckpoint, k: usize) {
        let d = ckpt.model.latent_dim();
        let heads = ckpt.model.num_categories;
        let scale = ckpt.model.encoder.mean_scale();
        let (mean, var) = ckpt
            .prior
            .component(k)
            .map(|(m, v)| (m.iter().map(|x| x / scale).collect::<Vec<_>>(), v))
            .unwrap();
        let p = &mut ckpt.model.params;
        for name in ["enc.mu_heads", "enc.lv_heads"] {
            let id = p.find(name).unwrap();
            p.get_mut(id).data_mut().fill(0.0);
        }
        let id = p.find("enc.mu_bias").unwrap();
        for chunk in p.get_mut(id).data_mut().chunks_mut(d).take(heads) {
            chunk.copy_from_slice(&mean);
        }
        let id = p.find("enc.lv_bias").unwrap();
        p.get_mut(id).data_mut().fill(var.ln());
    }

    #[test]
    fn kl_vanishes_when_posterior_equals_prior() {
        let corpus = tiny_corpus();
        let scene = corpus
            .train
            .iter()
            .find(|s| s.categories.len() == 1)
            .expect("singleton scene");
        let c = scene.true_cluster(3).unwrap();
        let x = corpus.vocab.encode(&scene.references[0]);
        for variant in [Variant::Cvae, Variant::GmmCvae, Variant::AgCvae] {
            let mut ckpt = init_checkpoint(&corpus, &tiny_config(variant, 1)).unwrap();
            let k = if variant == Variant::Cvae {
                0
            } else {
                scene.categories[0]
            };
            freeze_encoder_at_prior(&mut ckpt, k);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut tape = Tape::new(&ckpt.model.params);
            let n = elbo_loss(
                &mut tape,
                &ckpt.model,
                &ckpt.prior,
                variant,
                &scene.feat,
                &c,
                &x,
                1.0,
                &mut rng,
            )
            .unwrap();
            let (total, recon, kl) = (
                tape.value(n.total).item(),
                tape.value(n.recon).item(),
                tape.value(n.kl).item(),
            );
            assert!(kl.abs() < 1e-12, "{variant}: kl {kl}");
            assert!((total - recon).abs() < 1e-12);

            // KL gradient w.r.t. the head biases vanishes at q = p
            tape.backward(n.kl).unwrap();
            let grads = tape.into_gradients();
            for name in ["enc.mu_bias", "enc.lv_bias"] {
                let g = grads.get(ckpt.model.params.find(name).unwrap()).unwrap();
                assert!(g.data().iter().all(|v| v.abs() < 1e-12), "{variant} {name}");
            }
        }
    }

    #[test]
    fn loss_dominates_kl() {
        let corpus = tiny_corpus();
        let k = corpus.k();
        for variant in [Variant::Cvae, Variant::GmmCvae, Variant::AgCvae] {
            let ckpt = init_checkpoint(&corpus, &tiny_config(variant, 1)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for scene in &corpus.train {
                let c = scene.true_cluster(k).unwrap();
                let x = corpus.vocab.encode(&scene.references[1]);
                let mut tape = Tape::new(&ckpt.model.params);
                let n = elbo_loss(
                    &mut tape,
                    &ckpt.model,
                    &ckpt.prior,
                    variant,
                    &scene.feat,
                    &c,
                    &x,
                    1.0,
                    &mut rng,
                )
                .unwrap();
                let kl = tape.value(n.kl).item();
                assert!(kl >= -1e-12);
                assert!(tape.value(n.total).item() >= kl);
            }
        }
    }

    #[test]
    fn reparameterized_samples_match_posterior() {
        let mu = [0.5, -1.0, 2.0];
        let lv = [(0.3f64).ln() * 2.0, 0.0, (1.7f64).ln() * 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let mut sums = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let mut g = Graph::new();
            let m = g.leaf(Tensor::row(mu.to_vec()));
            let l = g.leaf(Tensor::row(lv.to_vec()));
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = reparameterize(&mut g, m, l, &eps).unwrap();
            for (i, v) in g.value(z).data().iter().enumerate() {
                sums[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..3 {
            let mean = sums[i] / n as f64;
            let std = (sq[i] / n as f64 - mean * mean).sqrt();
            let want_std = (0.5 * lv[i]).exp();
            assert!((mean - mu[i]).abs() < 0.02 * mu[i].abs().max(want_std), "mean {mean}");
            assert!((std - want_std).abs() < 0.02 * want_std, "std {std}");
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let corpus = tiny_corpus();
        let (a, log_a) = train(&corpus, &tiny_config(Variant::GmmCvae, 4)).unwrap();
        let (b, _) = train(&corpus, &tiny_config(Variant::GmmCvae, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a.len(), 4);

        let (mut half, _) = train(&corpus, &tiny_config(Variant::GmmCvae, 2)).unwrap();
        half.config.epochs = 4;
        let rest = continue_training(&mut half, &corpus, |_| {}).unwrap();
        assert_eq!(rest[0].epoch, 2);
        half.config.epochs = 2;
        let mut full = a.clone();
        full.config.epochs = 2;
        assert_eq!(half.model, full.model);
        assert_eq!(half.rng, full.rng);
    }

    #[test]
    fn baseline_ignores_latent() {
        let corpus = tiny_corpus();
        let (ckpt, log) = train(&corpus, &tiny_config(Variant::LstmBaseline, 2)).unwrap();
        assert!(log.iter().all(|m| m.kl == 0.0));
        let id = ckpt.model.params.find("dec.latent_proj").unwrap();
        assert!(ckpt.model.params.get(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let corpus = tiny_corpus();
        let (ckpt, _) = train(&corpus, &tiny_config(Variant::AgCvae, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let k = corpus.k();
        for scene in corpus.train.iter().chain(&corpus.val).take(10) {
            let c = scene.true_cluster(k).unwrap();
            let z = [0.3, -0.2, 0.9];
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let before = generate(
                &DecoderStepper::new(&ckpt.model, &scene.feat, &c, Some(&z)).unwrap(),
                DecodeMode::Greedy,
                &mut rng,
                20,
            );
            let after = generate(
                &DecoderStepper::new(&loaded.model, &scene.feat, &c, Some(&z)).unwrap(),
                DecodeMode::Greedy,
                &mut rng,
                20,
            );
            assert_eq!(before, after);
        }
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let corpus = tiny_corpus();
        let ckpt = init_checkpoint(&corpus, &tiny_config(Variant::Cvae, 1)).unwrap();
        let bytes = checkpoint_bytes(&ckpt).unwrap();
        let p = Path::new("mem");
        for cut in [bytes.len() - 10, bytes.len() / 2, 5] {
            let err = parse_checkpoint(&bytes[..cut], p).unwrap_err();
            assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
        }
        let text = String::from_utf8(bytes)
            .unwrap()
            .replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(
            parse_checkpoint(text.as_bytes(), p),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
