//! Sampling, evaluation and controllable generation over trained checkpoints.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use capvae::corpus::{cluster_vector_from_labels, CorpusSplit, SceneRecord, Split};
use capvae::evalsuite::{
    consensus_rerank, novel_fraction, oracle_scores, score_candidate, unique_fraction, Candidate, CandidateSet,
    ConsensusIndex, NgramStats, Scores, TfIdf, MAX_N,
};
use capvae::priors::{sample_prior, ClusterVector};
use capvae::seqmodel::{beam_search, generate, DecodeMode, DecoderStepper};
use capvae::training::{ModelCheckpoint, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CANDIDATE_FORMAT: &str = "capvae-candidates";
pub const CANDIDATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSettings {
    pub n_z: usize,
    pub test_std: f64,
    pub beam_width: usize,
    pub seed: u64,
}

/// Per-scene generator, independent of the order scenes are visited in.
pub fn scene_rng(seed: u64, scene: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene);
    rng
}

/// Candidates for one scene under cluster vector `c`.
///
/// Latent variants draw `n_z` prior samples and decode each greedily. The
/// baseline runs beam search and ignores `n_z` and `test_std`.
pub fn sample_scene(
    ckpt: &ModelCheckpoint,
    scene: &SceneRecord,
    c: &ClusterVector,
    s: &SampleSettings,
) -> Result<CandidateSet> {
    let model = &ckpt.model;
    let max_len = model.max_len();
    let candidates = if ckpt.config.variant.uses_latent() {
        let mut rng = scene_rng(s.seed, scene.id);
        (0..s.n_z)
            .map(|i| {
                let z = sample_prior(&ckpt.prior, c, s.test_std, &mut rng)?.z;
                let stepper = DecoderStepper::new(model, &scene.feat, c, Some(&z))?;
                let seq = generate(&stepper, DecodeMode::Greedy, &mut rng, max_len);
                Ok(Candidate {
                    text: ckpt.vocab.decode(&seq),
                    provenance: format!("z{i}"),
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let stepper = DecoderStepper::new(model, &scene.feat, c, None)?;
        beam_search(&stepper, s.beam_width, max_len)
            .into_iter()
            .enumerate()
            .map(|(r, h)| Candidate {
                text: ckpt.vocab.decode(&h.seq),
                provenance: format!("beam{r}"),
            })
            .collect()
    };
    Ok(CandidateSet {
        scene: scene.id,
        candidates,
    })
}

/// Samples every scene with its test-time cluster vector, in scene-id order.
pub fn sample_scenes(
    ckpt: &ModelCheckpoint,
    scenes: &[&SceneRecord],
    k: usize,
    s: &SampleSettings,
) -> Result<Vec<CandidateSet>> {
    let mut sorted: Vec<&SceneRecord> = scenes.to_vec();
    sorted.sort_by_key(|sc| sc.id);
    sorted
        .into_iter()
        .map(|scene| sample_scene(ckpt, scene, &scene.test_cluster(k)?, s))
        .collect()
}

fn references<'a>(scenes: &[&'a SceneRecord]) -> Vec<Vec<&'a str>> {
    scenes
        .iter()
        .map(|s| s.references.iter().map(String::as_str).collect())
        .collect()
}

/// Picks `test_std` from `grid` by oracle BLEU-4 on the validation split.
/// Ties go to the earlier grid entry. Returns the choice and the grid scores.
pub fn tune_test_std(
    ckpt: &ModelCheckpoint,
    corpus: &CorpusSplit,
    grid: &[f64],
    s: &SampleSettings,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        bail!("empty test_std grid");
    }
    let mut val: Vec<&SceneRecord> = corpus.val.iter().collect();
    val.sort_by_key(|sc| sc.id);
    let refs = references(&val);
    let stats = NgramStats::from_reference_sets(&refs);
    let mut table = Vec::with_capacity(grid.len());
    for &std in grid {
        let sets = sample_scenes(ckpt, &val, corpus.k(), &SampleSettings { test_std: std, ..*s })?;
        table.push((std, oracle_scores(&sets, &refs, &stats)?.bleu[3]));
    }
    let best = table
        .iter()
        .fold(table[0], |best, &cur| if cur.1 > best.1 { cur } else { best });
    Ok((best.0, table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateHeader {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub split: Split,
    pub settings: SampleSettings,
    /// `(test_std, validation oracle BLEU-4)` when the std was tuned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<Vec<(f64, f64)>>,
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CandidateRecord {
    scene: u64,
    provenance: String,
    text: String,
}

pub fn write_candidates(path: &Path, header: &CandidateHeader, sets: &[CandidateSet]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(out, "{}", serde_json::to_string(header)?)?;
    for set in sets {
        for c in &set.candidates {
            let rec = CandidateRecord {
                scene: set.scene,
                provenance: c.provenance.clone(),
                text: c.text.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<(CandidateHeader, Vec<CandidateSet>)> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| anyhow!("{}: empty candidate file", path.display()))??;
    let header: CandidateHeader =
        serde_json::from_str(&first).with_context(|| format!("{}: bad header", path.display()))?;
    if header.format != CANDIDATE_FORMAT || header.version != CANDIDATE_VERSION {
        bail!(
            "{}: unsupported candidate file {} v{}",
            path.display(),
            header.format,
            header.version
        );
    }
    let mut sets: Vec<CandidateSet> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CandidateRecord =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 2))?;
        let cand = Candidate {
            text: rec.text,
            provenance: rec.provenance,
        };
        match sets.last_mut() {
            Some(set) if set.scene == rec.scene => set.candidates.push(cand),
            _ => sets.push(CandidateSet {
                scene: rec.scene,
                candidates: vec![cand],
            }),
        }
    }
    Ok((header, sets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub scenes: usize,
    pub oracle: Scores,
    /// Scores of the consensus re-ranked first candidate.
    pub rerank: Scores,
    pub unique: f64,
    pub novel: f64,
}

/// Training-split neighbor index for consensus re-ranking.
pub fn consensus_index(corpus: &CorpusSplit) -> Result<ConsensusIndex> {
    let scenes: Vec<(ClusterVector, Vec<&str>)> = corpus
        .train
        .iter()
        .map(|s| {
            Ok((
                s.true_cluster(corpus.k())?,
                s.references.iter().map(String::as_str).collect(),
            ))
        })
        .collect::<capvae::Result<_>>()?;
    Ok(ConsensusIndex::new(&scenes))
}

/// Evaluates candidate sets for scenes of `split`.
pub fn evaluate(
    name: &str,
    corpus: &CorpusSplit,
    split: Split,
    sets: &[CandidateSet],
    index: &ConsensusIndex,
    m_neighbors: usize,
    top_m: usize,
) -> Result<ReportRow> {
    let by_id: HashMap<u64, &SceneRecord> = corpus.split(split).iter().map(|s| (s.id, s)).collect();
    let scenes: Vec<&SceneRecord> = sets
        .iter()
        .map(|set| {
            by_id
                .get(&set.scene)
                .copied()
                .ok_or_else(|| anyhow!("scene {} is not in the {split:?} split", set.scene))
        })
        .collect::<Result<_>>()?;
    let refs = references(&scenes);
    let stats = NgramStats::from_reference_sets(&refs);
    let oracle = oracle_scores(sets, &refs, &stats)?;

    let train: HashSet<&str> = corpus.train_sentences();
    let mut ranked = Vec::with_capacity(sets.len());
    let mut rerank = Scores::default();
    for ((set, scene), scene_refs) in sets.iter().zip(&scenes).zip(&refs) {
        let list = consensus_rerank(set, &scene.test_cluster(corpus.k())?, index, m_neighbors)?;
        let ref_vecs: Vec<TfIdf> = scene_refs.iter().map(|r| stats.vectorize(r)).collect();
        let top = score_candidate(&list[0].text, scene_refs, &ref_vecs, &stats);
        for n in 0..MAX_N {
            rerank.bleu[n] += top.bleu[n];
        }
        rerank.cider += top.cider;
        ranked.push(list);
    }
    let m = sets.len().max(1) as f64;
    for b in &mut rerank.bleu {
        *b /= m;
    }
    rerank.cider /= m;
    Ok(ReportRow {
        model: name.to_string(),
        scenes: sets.len(),
        oracle,
        rerank,
        unique: unique_fraction(sets),
        novel: novel_fraction(&ranked, &train, top_m),
    })
}

/// Fixed-width table with columns `B4 B3 B2 B1 C` for oracle and re-ranked scores.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:<16} {:>6} | {:>6} {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6}\n",
        "model", "scenes", "B4", "B3", "B2", "B1", "C", "rB4", "rB3", "rB2", "rB1", "rC", "unique", "novel"
    );
    for r in rows {
        let s = |x: &Scores| {
            format!(
                "{:6.3} {:6.3} {:6.3} {:6.3} {:6.3}",
                x.bleu[3], x.bleu[2], x.bleu[1], x.bleu[0], x.cider
            )
        };
        out.push_str(&format!(
            "{:<16} {:>6} | {} | {} | {:6.3} {:6.3}\n",
            r.model,
            r.scenes,
            s(&r.oracle),
            s(&r.rerank),
            r.unique,
            r.novel
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlOutcome {
    pub scene: u64,
    pub before_categories: Vec<usize>,
    pub after_categories: Vec<usize>,
    pub before: Vec<String>,
    pub after: Vec<String>,
    /// Mean noun count per candidate, per category.
    pub before_freq: Vec<f64>,
    pub after_freq: Vec<f64>,
}

/// Samples `n_z` candidates under the scene's test-time categories and under
/// an edited set, reusing the same generator seed for both.
pub fn control(
    ckpt: &ModelCheckpoint,
    corpus: &CorpusSplit,
    scene: &SceneRecord,
    add: &[usize],
    remove: &[usize],
    s: &SampleSettings,
) -> Result<ControlOutcome> {
    if !ckpt.config.variant.uses_latent() {
        bail!("control needs a latent variant, got {}", ckpt.config.variant);
    }
    let k = corpus.k();
    if let Some(bad) = add.iter().chain(remove).find(|&&c| c >= k) {
        bail!("category index {bad} is out of range for K = {k}");
    }
    let before: BTreeSet<usize> = scene
        .detected
        .as_deref()
        .unwrap_or(&scene.categories)
        .iter()
        .copied()
        .collect();
    let mut after = before.clone();
    after.extend(add.iter().copied());
    for r in remove {
        after.remove(r);
    }
    if after.is_empty() {
        bail!("the edit removes every category");
    }
    let before: Vec<usize> = before.into_iter().collect();
    let after: Vec<usize> = after.into_iter().collect();
    let run = |cats: &[usize]| -> Result<(Vec<String>, Vec<f64>)> {
        let c = cluster_vector_from_labels(cats, k)?;
        let set = sample_scene(ckpt, scene, &c, s)?;
        let texts: Vec<String> = set.candidates.into_iter().map(|c| c.text).collect();
        let freq = (0..k)
            .map(|cat| {
                texts.iter().map(|t| corpus.lexicon.count_nouns(cat, t)).sum::<usize>() as f64
                    / texts.len().max(1) as f64
            })
            .collect();
        Ok((texts, freq))
    };
    let (before_texts, before_freq) = run(&before)?;
    let (after_texts, after_freq) = run(&after)?;
    Ok(ControlOutcome {
        scene: scene.id,
        before_categories: before,
        after_categories: after,
        before: before_texts,
        after: after_texts,
        before_freq,
        after_freq,
    })
}

/// Unique candidates side by side, then per-category noun frequencies.
pub fn render_control(outcome: &ControlOutcome, corpus: &CorpusSplit) -> String {
    let names = |cats: &[usize]| {
        cats.iter()
            .map(|&c| corpus.lexicon.categories[c].name.as_str())
            .collect::<Vec<_>>()
            .join(",")
    };
    let uniq = |texts: &[String]| {
        let mut seen = HashSet::new();
        texts
            .iter()
            .filter(|t| seen.insert(t.as_str()))
            .cloned()
            .collect::<Vec<_>>()
    };
    let (a, b) = (uniq(&outcome.before), uniq(&outcome.after));
    let width = a.iter().map(String::len).max().unwrap_or(0).max(24);
    let before = format!("before [{}]", names(&outcome.before_categories));
    let after = format!("after [{}]", names(&outcome.after_categories));
    let mut out = format!("scene {}\n{before:<width$} | {after}\n", outcome.scene);
    for i in 0..a.len().max(b.len()) {
        out.push_str(&format!(
            "{:<width$} | {}\n",
            a.get(i).map_or("", String::as_str),
            b.get(i).map_or("", String::as_str)
        ));
    }
    out.push_str("\nnoun frequency per candidate\n");
    for (c, cat) in corpus.lexicon.categories.iter().enumerate() {
        out.push_str(&format!(
            "{:<12} {:6.3} -> {:6.3}\n",
            cat.name, outcome.before_freq[c], outcome.after_freq[c]
        ));
    }
    out
}
