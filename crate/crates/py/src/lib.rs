//! Python bindings: corpus generation, training, sampling, metrics and KL.

use std::path::PathBuf;

use capvae::corpus::{generate_corpus, read_corpus, write_corpus, CorpusConfig, CorpusSplit, SceneRecord, Split};
use capvae::evalsuite::{self, NgramStats};
use capvae::priors::{self, ClusterVector, GaussianPosterior, PriorKind, PriorSpec};
use capvae::training::{self, ModelCheckpoint, TrainConfig, Variant};
use capvae_cli::pipeline::{sample_scene, SampleSettings};
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    }
}

/// Synthetic scene/caption corpus with train, val and test splits.
#[pyclass(name = "Corpus", module = "pycapvae")]
struct PyCorpus {
    inner: CorpusSplit,
}

impl PyCorpus {
    fn scene(&self, id: u64) -> PyResult<&SceneRecord> {
        self.inner
            .scenes()
            .find(|s| s.id == id)
            .ok_or_else(|| PyKeyError::new_err(format!("no scene {id}")))
    }
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (k = 8, n_train = 2000, n_val = 200, n_test = 200, seed = 1))]
    fn generate(k: usize, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> PyResult<Self> {
        let cfg = CorpusConfig {
            k,
            n_train,
            n_val,
            n_test,
            seed,
            ..CorpusConfig::default()
        };
        Ok(Self {
            inner: generate_corpus(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_corpus(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_corpus(&path, &self.inner, None).map_err(err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab.tokens().to_vec()
    }

    #[getter]
    fn categories(&self) -> Vec<String> {
        self.inner.lexicon.categories.iter().map(|c| c.name.clone()).collect()
    }

    fn scene_ids(&self, split: &str) -> PyResult<Vec<u64>> {
        Ok(self.inner.split(parse_split(split)?).iter().map(|s| s.id).collect())
    }

    fn references(&self, scene: u64) -> PyResult<Vec<String>> {
        Ok(self.scene(scene)?.references.clone())
    }

    /// Ground-truth category indices of a scene.
    fn scene_categories(&self, scene: u64) -> PyResult<Vec<usize>> {
        Ok(self.scene(scene)?.categories.clone())
    }

    /// Number of nouns of category `k` in `sentence`.
    fn count_nouns(&self, k: usize, sentence: &str) -> usize {
        self.inner.lexicon.count_nouns(k, sentence)
    }

    fn __len__(&self) -> usize {
        self.inner.scenes().count()
    }
}

/// `(epoch, lr, recon, kl)` per training epoch.
type EpochLog = Vec<(usize, f64, f64, f64)>;

/// Trained model together with its prior, vocabulary and training state.
#[pyclass(name = "Checkpoint", module = "pycapvae")]
struct PyCheckpoint {
    inner: ModelCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Trains a variant with default hyperparameters. Returns the checkpoint
    /// and `(epoch, lr, recon, kl)` per epoch.
    #[staticmethod]
    #[pyo3(signature = (corpus, variant, epochs = 30, seed = 1))]
    fn train(py: Python<'_>, corpus: &PyCorpus, variant: &str, epochs: usize, seed: u64) -> PyResult<(Self, EpochLog)> {
        let cfg = TrainConfig {
            variant: variant.parse::<Variant>().map_err(err)?,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let (ckpt, log) = py.detach(|| training::train(&corpus.inner, &cfg)).map_err(err)?;
        let log = log.into_iter().map(|m| (m.epoch, m.lr, m.recon, m.kl)).collect();
        Ok((Self { inner: ckpt }, log))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: training::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        training::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config.variant.to_string()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    /// Candidate captions for one scene. `categories` overrides the scene's
    /// test-time categories.
    #[pyo3(signature = (corpus, scene, n_z = 20, test_std = 1.0, beam_width = 10, seed = 1, categories = None))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        corpus: &PyCorpus,
        scene: u64,
        n_z: usize,
        test_std: f64,
        beam_width: usize,
        seed: u64,
        categories: Option<Vec<usize>>,
    ) -> PyResult<Vec<String>> {
        let record = corpus.scene(scene)?;
        let k = corpus.inner.k();
        let c = match categories {
            Some(cats) => capvae::corpus::cluster_vector_from_labels(&cats, k),
            None => record.test_cluster(k),
        }
        .map_err(err)?;
        let settings = SampleSettings {
            n_z,
            test_std,
            beam_width,
            seed,
        };
        let set = sample_scene(&self.inner, record, &c, &settings).map_err(err)?;
        Ok(set.candidates.into_iter().map(|c| c.text).collect())
    }

    /// Mean `(recon, kl)` over a split with one reference per scene.
    #[pyo3(signature = (corpus, split = "val", seed = 1))]
    fn loss(&self, corpus: &PyCorpus, split: &str, seed: u64) -> PyResult<(f64, f64)> {
        let scenes = corpus.inner.split(parse_split(split)?);
        let m = training::mean_loss(&self.inner, scenes, corpus.inner.k(), seed).map_err(err)?;
        Ok((m.recon, m.kl))
    }
}

/// BLEU-1..4 of a candidate against references.
#[pyfunction]
fn bleu(candidate: &str, references: Vec<String>) -> [f64; 4] {
    let refs: Vec<&str> = references.iter().map(String::as_str).collect();
    evalsuite::bleu(candidate, &refs)
}

/// CIDEr-D with document frequencies from `corpus` (one reference list per document).
#[pyfunction]
fn cider(candidate: &str, references: Vec<String>, corpus: Vec<Vec<String>>) -> f64 {
    let stats = NgramStats::from_reference_sets(&corpus);
    let refs: Vec<&str> = references.iter().map(String::as_str).collect();
    evalsuite::cider(candidate, &refs, &stats)
}

fn posterior_and_prior(
    kind: PriorKind,
    mu: Vec<f64>,
    log_var: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
) -> PyResult<(GaussianPosterior, PriorSpec)> {
    let q = GaussianPosterior::new(mu, log_var).map_err(err)?;
    let spec = PriorSpec::from_parts(kind, means, stds).map_err(err)?;
    Ok((q, spec))
}

/// KL from a diagonal Gaussian to the additive prior under cluster weights `c`.
#[pyfunction]
fn kl_ag(mu: Vec<f64>, log_var: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>, c: Vec<f64>) -> PyResult<f64> {
    let (q, spec) = posterior_and_prior(PriorKind::Additive, mu, log_var, means, stds)?;
    let c = ClusterVector::new(c).map_err(err)?;
    priors::kl_ag(&q, &spec, &c).map_err(err)
}

/// KL from a diagonal Gaussian to mixture component `k`.
#[pyfunction]
fn kl_gmm_component(mu: Vec<f64>, log_var: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>, k: usize) -> PyResult<f64> {
    let (q, spec) = posterior_and_prior(PriorKind::Gmm, mu, log_var, means, stds)?;
    priors::kl_gmm_component(&q, &spec, k).map_err(err)
}

#[pymodule]
fn pycapvae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(cider, m)?)?;
    m.add_function(wrap_pyfunction!(kl_ag, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gmm_component, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
