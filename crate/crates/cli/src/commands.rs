use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use capvae::corpus::{generate_corpus, read_corpus, write_corpus, CorpusSplit, Split};
use capvae::training::{
    continue_training, init_checkpoint, load_checkpoint, save_checkpoint, ModelCheckpoint, Variant,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{RunConfig, TOOL};
use crate::pipeline::{
    consensus_index, control, evaluate, read_candidates, render_control, render_table, sample_scenes, tune_test_std,
    write_candidates, CandidateHeader, SampleSettings, CANDIDATE_FORMAT, CANDIDATE_VERSION,
};

/// Invalid user input, reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "capvae",
    version,
    about = "Diverse caption generation with structured-prior CVAEs"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed for training and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Write candidate captions for a split.
    Sample(SampleArgs),
    /// Score candidate files and write a report.
    Eval(EvalArgs),
    /// Compare samples before and after editing a scene's categories.
    Control(ControlArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub corpus_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint path; defaults to `<checkpoints>/<variant>.ckpt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the existing checkpoint up to `epochs`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Checkpoint to sample from; defaults to the variant's checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub n_z: Option<usize>,
    #[arg(long)]
    pub test_std: Option<f64>,
    /// Choose test_std from the configured grid on the validation split.
    #[arg(long)]
    pub tune_std: bool,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Comma-separated scene ids; defaults to the whole split.
    #[arg(long, value_delimiter = ',')]
    pub scenes: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Candidate files; defaults to every variant's file that exists.
    #[arg(long, num_args = 1..)]
    pub candidates: Vec<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub m_neighbors: Option<usize>,
    #[arg(long)]
    pub top_m: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub scene: u64,
    /// Category names to add.
    #[arg(long, value_delimiter = ',')]
    pub add: Vec<String>,
    /// Category names to remove.
    #[arg(long, value_delimiter = ',')]
    pub remove: Vec<String>,
    #[arg(long)]
    pub n_z: Option<usize>,
    #[arg(long)]
    pub test_std: Option<f64>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: capvae::Error| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Sample(a) => cmd_sample(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Control(a) => cmd_control(cfg, a),
    }
}

fn validated(cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
    Ok(cfg)
}

fn load_corpus(path: &Path) -> Result<CorpusSplit> {
    read_corpus(path).with_context(|| format!("loading corpus from {}", path.display()))
}

pub fn cmd_gen_corpus(mut cfg: RunConfig, a: GenCorpusArgs) -> Result<()> {
    if let Some(v) = a.out {
        cfg.paths.corpus = v;
    }
    let c = &mut cfg.corpus;
    for (dst, src) in [
        (&mut c.k, a.k),
        (&mut c.n_train, a.n_train),
        (&mut c.n_val, a.n_val),
        (&mut c.n_test, a.n_test),
    ] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    if let Some(v) = a.corpus_seed {
        c.seed = v;
    }
    let cfg = validated(cfg)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    write_corpus(&cfg.paths.corpus, &corpus, Some(cfg.provenance()))?;
    println!(
        "corpus {}: K={} train={} val={} test={} vocab={}",
        cfg.paths.corpus.display(),
        corpus.k(),
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        corpus.vocab.len()
    );
    Ok(())
}

pub fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(v) = a.variant {
        cfg.train.variant = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.corpus {
        cfg.paths.corpus = v;
    }
    let cfg = validated(cfg)?;
    let variant = cfg.train.variant;
    let ckpt_path = a.out.unwrap_or_else(|| cfg.checkpoint_path(variant));
    let metrics_path = ckpt_path.with_extension("metrics.jsonl");
    let corpus = load_corpus(&cfg.paths.corpus)?;

    let mut ckpt = if a.resume {
        let mut ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.config.variant != variant {
            bail!("checkpoint holds {}, not {variant}", ckpt.config.variant);
        }
        ckpt.config.epochs = cfg.train.epochs;
        ckpt
    } else {
        init_checkpoint(&corpus, &cfg.train_config())?
    };
    ckpt.provenance = Some(cfg.provenance());
    if let Some(parent) = ckpt_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut log = if a.resume {
        std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&metrics_path)?
    } else {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "{}", serde_json::json!({ "header": cfg.provenance() }))?;
        f
    };
    let start = ckpt.epoch;
    let mut io_err = None;
    let metrics = continue_training(&mut ckpt, &corpus, |m| {
        eprintln!(
            "{variant} epoch {:>3} lr {:.5} recon {:.4} kl {:.4}",
            m.epoch, m.lr, m.recon, m.kl
        );
        if let Err(e) = serde_json::to_string(m)
            .map_err(anyhow::Error::from)
            .and_then(|s| Ok(writeln!(log, "{s}")?))
        {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.context(format!("writing {}", metrics_path.display())));
    }
    save_checkpoint(&ckpt, &ckpt_path)?;
    println!(
        "trained {variant} epochs {start}..{} -> {}{}",
        ckpt.epoch,
        ckpt_path.display(),
        metrics
            .last()
            .map(|m| format!(" (final loss {:.4})", m.loss()))
            .unwrap_or_default()
    );
    Ok(())
}

fn resolve_checkpoint(
    cfg: &RunConfig,
    variant: Option<Variant>,
    path: Option<PathBuf>,
) -> Result<(ModelCheckpoint, PathBuf)> {
    let path = match (path, variant) {
        (Some(p), _) => p,
        (None, Some(v)) => cfg.checkpoint_path(v),
        (None, None) => cfg.checkpoint_path(cfg.train.variant),
    };
    let ckpt = load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((ckpt, path))
}

pub fn cmd_sample(mut cfg: RunConfig, a: SampleArgs) -> Result<()> {
    if let Some(v) = a.corpus {
        cfg.paths.corpus = v;
    }
    if let Some(v) = a.beam_width {
        cfg.sample.beam_width = v;
    }
    let latent_flags = a.n_z.is_some() || a.test_std.is_some() || a.tune_std;
    if let Some(v) = a.n_z {
        cfg.sample.n_z = v;
    }
    if let Some(v) = a.test_std {
        cfg.sample.test_std = v;
    }
    let cfg = validated(cfg)?;
    let (ckpt, _) = resolve_checkpoint(&cfg, a.variant, a.checkpoint)?;
    let variant = ckpt.config.variant;
    let corpus = load_corpus(&cfg.paths.corpus)?;
    if ckpt.vocab != corpus.vocab {
        bail!("checkpoint vocabulary does not match the corpus");
    }
    if !variant.uses_latent() && latent_flags {
        eprintln!("warning: {variant} uses beam search; n_z and test_std are ignored");
    }
    let mut settings = SampleSettings {
        n_z: cfg.sample.n_z,
        test_std: cfg.sample.test_std,
        beam_width: cfg.sample.beam_width,
        seed: cfg.seed,
    };
    let mut tuning = None;
    if a.tune_std && variant.uses_latent() {
        let (best, table) = tune_test_std(&ckpt, &corpus, &cfg.sample.std_grid, &settings)?;
        for (std, b4) in &table {
            eprintln!("{variant} test_std {std}: validation oracle B4 {b4:.4}");
        }
        settings.test_std = best;
        tuning = Some(table);
    }
    let split: Split = a.split.into();
    let pool = corpus.split(split);
    let scenes: Vec<_> = if a.scenes.is_empty() {
        pool.iter().collect()
    } else {
        a.scenes
            .iter()
            .map(|id| {
                pool.iter()
                    .find(|s| s.id == *id)
                    .ok_or_else(|| anyhow::anyhow!("scene {id} is not in the {split:?} split"))
            })
            .collect::<Result<_>>()?
    };
    let sets = sample_scenes(&ckpt, &scenes, corpus.k(), &settings)?;
    let header = CandidateHeader {
        format: CANDIDATE_FORMAT.into(),
        version: CANDIDATE_VERSION,
        variant,
        split,
        settings,
        tuning,
        provenance: cfg.provenance(),
    };
    let out = a.out.unwrap_or_else(|| cfg.candidates_path(variant));
    write_candidates(&out, &header, &sets)?;
    println!(
        "{variant}: {} scenes, {} candidates -> {}",
        sets.len(),
        sets.iter().map(|s| s.candidates.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    if let Some(v) = a.corpus {
        cfg.paths.corpus = v;
    }
    if let Some(v) = a.out {
        cfg.paths.reports = v;
    }
    if let Some(v) = a.m_neighbors {
        cfg.eval.m_neighbors = v;
    }
    if let Some(v) = a.top_m {
        cfg.eval.top_m = v;
    }
    let cfg = validated(cfg)?;
    let files: Vec<PathBuf> = if a.candidates.is_empty() {
        Variant::ALL
            .iter()
            .map(|v| cfg.candidates_path(*v))
            .filter(|p| p.exists())
            .collect()
    } else {
        a.candidates
    };
    if files.is_empty() {
        return Err(usage("no candidate files to evaluate"));
    }
    let corpus = load_corpus(&cfg.paths.corpus)?;
    let index = consensus_index(&corpus)?;
    let mut rows = Vec::new();
    for file in &files {
        let (header, sets) = read_candidates(file)?;
        let name = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        rows.push(evaluate(
            &name,
            &corpus,
            header.split,
            &sets,
            &index,
            cfg.eval.m_neighbors,
            cfg.eval.top_m,
        )?);
    }
    std::fs::create_dir_all(&cfg.paths.reports)?;
    let table = render_table(&rows);
    let table_path = cfg.paths.reports.join("report.txt");
    std::fs::write(&table_path, format!("# {TOOL}\n{table}"))?;
    let jsonl_path = cfg.paths.reports.join("report.jsonl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&jsonl_path)?);
    writeln!(out, "{}", serde_json::json!({ "header": cfg.provenance() }))?;
    for r in &rows {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    print!("{table}");
    Ok(())
}

pub fn cmd_control(mut cfg: RunConfig, a: ControlArgs) -> Result<()> {
    if let Some(v) = a.corpus {
        cfg.paths.corpus = v;
    }
    if let Some(v) = a.n_z {
        cfg.sample.n_z = v;
    }
    if let Some(v) = a.test_std {
        cfg.sample.test_std = v;
    }
    let cfg = validated(cfg)?;
    let (ckpt, _) = resolve_checkpoint(&cfg, a.variant, a.checkpoint)?;
    let corpus = load_corpus(&cfg.paths.corpus)?;
    let scene = corpus
        .scenes()
        .find(|s| s.id == a.scene)
        .ok_or_else(|| usage(format!("unknown scene {}", a.scene)))?;
    let lookup = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                corpus
                    .lexicon
                    .index_of(n)
                    .ok_or_else(|| usage(format!("unknown category {n:?}")))
            })
            .collect()
    };
    let (add, remove) = (lookup(&a.add)?, lookup(&a.remove)?);
    let settings = SampleSettings {
        n_z: cfg.sample.n_z,
        test_std: cfg.sample.test_std,
        beam_width: cfg.sample.beam_width,
        seed: cfg.seed,
    };
    let outcome = control(&ckpt, &corpus, scene, &add, &remove, &settings).map_err(|e| {
        if e.to_string().contains("removes every category") {
            usage(e.to_string())
        } else {
            e
        }
    })?;
    print!("{}", render_control(&outcome, &corpus));
    Ok(())
}
