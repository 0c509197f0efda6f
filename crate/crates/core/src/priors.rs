//! Latent priors: a fixed Gaussian, a Gaussian mixture whose weights come
//! from the cluster vector, and the additive Gaussian whose mean is the
//! cluster-weighted sum of the component means.
//!
//! All KL divergences are against a diagonal Gaussian posterior and are
//! written as a sum over latent dimensions of the scalar expression
//! `log(σ/σ_q) + (σ_q² + (μ_q − μ)²) / (2σ²) − 1/2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Normalized nonnegative weights over the content categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClusterVector {
    weights: Vec<f64>,
}

impl ClusterVector {
    /// Normalizes `weights` to sum to one. Rejects negative, non-finite or
    /// all-zero input.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("cluster vector must have at least one entry"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("cluster weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("cluster vector is all zero"));
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn one_hot(k: usize, len: usize) -> Result<Self> {
        if k >= len {
            return Err(Error::IndexOutOfRange { index: k, len });
        }
        let mut w = vec![0.0; len];
        w[k] = 1.0;
        Ok(Self { weights: w })
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Self::new(vec![1.0; len])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Indices with nonzero weight.
    pub fn support(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&k| self.weights[k] > 0.0).collect()
    }

    pub fn cosine(&self, other: &ClusterVector) -> f64 {
        let dot: f64 = self.weights.iter().zip(&other.weights).map(|(a, b)| a * b).sum();
        let na = self.weights.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = other.weights.iter().map(|b| b * b).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

impl TryFrom<Vec<f64>> for ClusterVector {
    type Error = Error;

    fn try_from(weights: Vec<f64>) -> Result<Self> {
        Self::new(weights)
    }
}

impl From<ClusterVector> for Vec<f64> {
    fn from(c: ClusterVector) -> Self {
        c.weights
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Fixed,
    Gmm,
    Additive,
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorKind::Fixed => "fixed",
            PriorKind::Gmm => "gmm",
            PriorKind::Additive => "additive",
        })
    }
}

/// Prior parameters. Means and standard deviations are frozen once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    kind: PriorKind,
    latent_dim: usize,
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
}

/// Builds a prior. Component means are standard-normal draws projected onto
/// the unit sphere; every component gets standard deviation `sigma`. The
/// fixed prior has one zero-mean component.
pub fn init_prior(kind: PriorKind, k: usize, latent_dim: usize, sigma: f64, seed: u64) -> Result<PriorSpec> {
    if k == 0 || latent_dim == 0 {
        return Err(Error::invalid("prior needs K >= 1 and latent_dim >= 1"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("prior sigma must be positive, got {sigma}")));
    }
    if kind == PriorKind::Fixed {
        return Ok(PriorSpec {
            kind,
            latent_dim,
            means: vec![vec![0.0; latent_dim]],
            stds: vec![sigma],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = (0..k)
        .map(|_| loop {
            let v: Vec<f64> = (0..latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    Ok(PriorSpec {
        kind,
        latent_dim,
        means,
        stds: vec![sigma; k],
    })
}

impl PriorSpec {
    /// Builds a prior from explicit parameters.
    pub fn from_parts(kind: PriorKind, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        let spec = Self {
            kind,
            latent_dim: means.first().map_or(0, Vec::len),
            means,
            stds,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.means.is_empty() || self.means.len() != self.stds.len() {
            return Err(Error::invalid("prior needs matching, nonempty means and stds"));
        }
        if self.kind == PriorKind::Fixed && self.means.len() != 1 {
            return Err(Error::invalid("fixed prior has exactly one component"));
        }
        if self
            .means
            .iter()
            .any(|m| m.len() != self.latent_dim || m.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::invalid("prior means must be finite latent_dim vectors"));
        }
        if self.stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("prior stds must be positive"));
        }
        Ok(())
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Number of mixture components (1 for the fixed prior).
    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    fn check_kind(&self, expected: PriorKind) -> Result<()> {
        if self.kind != expected {
            return Err(Error::invalid(format!(
                "operation needs a {expected} prior, got {}",
                self.kind
            )));
        }
        Ok(())
    }

    fn check_cluster(&self, c: &ClusterVector) -> Result<()> {
        if c.len() != self.means.len() {
            return Err(Error::shape(
                "prior",
                format!(
                    "cluster vector has {} entries, prior has {} components",
                    c.len(),
                    self.means.len()
                ),
            ));
        }
        Ok(())
    }

    /// Mean and (scalar) variance of the Gaussian this prior assigns to
    /// content `c`, whichever the kind: the additive combination, the fixed
    /// zero-mean Gaussian, or component `k` of a mixture.
    pub fn component(&self, k: usize) -> Result<(&[f64], f64)> {
        let mean = self.means.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: self.means.len(),
        })?;
        Ok((mean, self.stds[k] * self.stds[k]))
    }
}

/// Additive prior parameters: `μ = Σ c_k μ_k`, `σ² = Σ c_k² σ_k²`.
pub fn additive_prior_params(spec: &PriorSpec, c: &ClusterVector) -> Result<(Vec<f64>, f64)> {
    spec.check_kind(PriorKind::Additive)?;
    spec.check_cluster(c)?;
    let mut mu = vec![0.0; spec.latent_dim];
    let mut var = 0.0;
    for ((ck, mean), sk) in c.weights().iter().zip(&spec.means).zip(&spec.stds) {
        for (m, x) in mu.iter_mut().zip(mean) {
            *m += ck * x;
        }
        var += ck * ck * sk * sk;
    }
    Ok((mu, var))
}

/// Diagonal Gaussian produced by the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        let q = Self { mu, log_var };
        q.validate()?;
        Ok(q)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.mu.len() != self.log_var.len() {
            return Err(Error::shape("posterior", "mu and log_var lengths differ"));
        }
        let finite = self.mu.iter().all(|x| x.is_finite())
            && self
                .log_var
                .iter()
                .all(|lv| lv.is_finite() && lv.exp().is_finite() && lv.exp() > 0.0);
        if !finite {
            return Err(Error::NonFinite { op: "posterior" });
        }
        Ok(())
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.mu)
            .zip(&self.log_var)
            .map(|((z, m), lv)| -0.5 * (LN_2PI + lv + (z - m) * (z - m) / lv.exp()))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(self.std())
            .map(|(m, s)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + s * eps
            })
            .collect()
    }
}

/// A latent draw, tagged with its mixture component when one was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub component: Option<usize>,
}

/// KL(q ‖ N(mean, var·I)) for a diagonal `q`.
pub fn kl_to_isotropic(q: &GaussianPosterior, mean: &[f64], var: f64) -> Result<f64> {
    q.validate()?;
    if mean.len() != q.dim() {
        return Err(Error::shape(
            "kl",
            format!("posterior dim {} vs prior dim {}", q.dim(), mean.len()),
        ));
    }
    let half_log_var = 0.5 * var.ln();
    let kl =
        q.mu.iter()
            .zip(&q.log_var)
            .zip(mean)
            .map(|((m, lv), p)| half_log_var - 0.5 * lv + (lv.exp() + (m - p) * (m - p)) / (2.0 * var) - 0.5)
            .sum();
    Ok(kl)
}

pub fn kl_ag(q: &GaussianPosterior, spec: &PriorSpec, c: &ClusterVector) -> Result<f64> {
    let (mu, var) = additive_prior_params(spec, c)?;
    kl_to_isotropic(q, &mu, var)
}

pub fn kl_gmm_component(q: &GaussianPosterior, spec: &PriorSpec, k: usize) -> Result<f64> {
    spec.check_kind(PriorKind::Gmm)?;
    let (mean, var) = spec.component(k)?;
    kl_to_isotropic(q, mean, var)
}

pub fn kl_fixed(q: &GaussianPosterior, spec: &PriorSpec) -> Result<f64> {
    spec.check_kind(PriorKind::Fixed)?;
    let (mean, var) = spec.component(0)?;
    kl_to_isotropic(q, mean, var)
}

/// Graph version of [`kl_to_isotropic`]; `mu` and `log_var` are `[1, d]` nodes.
pub fn kl_node(g: &mut Graph, mu: NodeId, log_var: NodeId, mean: &[f64], var: f64) -> Result<NodeId> {
    let prior_mean = g.leaf(Tensor::row(mean.to_vec()));
    let diff = g.sub(mu, prior_mean)?;
    let diff_sq = g.square(diff)?;
    let post_var = g.exp(log_var)?;
    let spread = g.add(post_var, diff_sq)?;
    let spread = g.scale(spread, 1.0 / (2.0 * var))?;
    let half_lv = g.scale(log_var, -0.5)?;
    let per_dim = g.add(spread, half_lv)?;
    let total = g.sum(per_dim)?;
    let offset = g.constant(mean.len() as f64 * (0.5 * var.ln() - 0.5));
    g.add(total, offset)
}

/// Draws a component index with probability `c_k`. Zero-weight components are
/// never returned.
pub fn sample_gmm_component<R: Rng + ?Sized>(c: &ClusterVector, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (k, w) in c.weights().iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        last_nonzero = k;
        if u < acc {
            return k;
        }
    }
    last_nonzero
}

/// Test-time latent draw. `test_std` replaces every component's standard
/// deviation.
pub fn sample_prior<R: Rng + ?Sized>(
    spec: &PriorSpec,
    c: &ClusterVector,
    test_std: f64,
    rng: &mut R,
) -> Result<LatentSample> {
    if !(test_std > 0.0 && test_std.is_finite()) {
        return Err(Error::invalid(format!("test_std must be positive, got {test_std}")));
    }
    let (center, component): (Vec<f64>, Option<usize>) = match spec.kind {
        PriorKind::Fixed => (spec.means[0].clone(), None),
        PriorKind::Gmm => {
            spec.check_cluster(c)?;
            let k = sample_gmm_component(c, rng);
            (spec.means[k].clone(), Some(k))
        }
        PriorKind::Additive => (additive_prior_params(spec, c)?.0, None),
    };
    let z = center
        .into_iter()
        .map(|m| {
            let eps: f64 = StandardNormal.sample(rng);
            m + test_std * eps
        })
        .collect();
    Ok(LatentSample { z, component })
}

/// `log N(z | mean, var·I)`.
pub fn isotropic_log_density(z: &[f64], mean: &[f64], var: f64) -> f64 {
    let sq: f64 = z.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * (z.len() as f64 * (LN_2PI + var.ln()) + sq / var)
}

/// Log density of the prior at `z` given content `c`. For the mixture this is
/// the full mixture density, not the single-component approximation.
pub fn prior_log_density(spec: &PriorSpec, c: &ClusterVector, z: &[f64]) -> Result<f64> {
    match spec.kind {
        PriorKind::Fixed => {
            let (m, v) = spec.component(0)?;
            Ok(isotropic_log_density(z, m, v))
        }
        PriorKind::Additive => {
            let (m, v) = additive_prior_params(spec, c)?;
            Ok(isotropic_log_density(z, &m, v))
        }
        PriorKind::Gmm => {
            spec.check_cluster(c)?;
            let terms: Vec<f64> = c
                .weights()
                .iter()
                .enumerate()
                .filter(|(_, w)| **w > 0.0)
                .map(|(k, w)| {
                    let (m, v) = spec.component(k).expect("index in range");
                    w.ln() + isotropic_log_density(z, m, v)
                })
                .collect();
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
        }
    }
}

/// Monte-Carlo estimate of `E_q[log q(z) − log p(z)]` from `n` draws.
pub fn mc_kl_oracle<R, F>(q: &GaussianPosterior, log_p: F, n: usize, rng: &mut R) -> Result<f64>
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> f64,
{
    if n == 0 {
        return Err(Error::invalid("Monte-Carlo oracle needs at least one sample"));
    }
    q.validate()?;
    let mut total = 0.0;
    for _ in 0..n {
        let z = q.sample(rng);
        let diff = q.log_density(&z) - log_p(&z);
        if !diff.is_finite() {
            return Err(Error::NonFinite { op: "mc_kl_oracle" });
        }
        total += diff;
    }
    Ok(total / n as f64)
}
