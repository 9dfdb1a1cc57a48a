use std::fs;
use std::path::{Path, PathBuf};

use actgen::motiondata::{
    augment, corpus_stats, load_jsonl, normalize_records, save_jsonl, split_by_caption, synth_dataset, to_samples,
    CorpusStats, NormalizationStats, ProcessedAction,
};
use actgen::selfcheck::{gradcheck_suite, BlockResult, SuiteOptions};
use actgen::textproc::{CaptionIds, Vocab, MAX_VOCAB};
use actgen::training::{evaluate, load_checkpoint, prepare, train, DatasetMode, Metrics, Model, RunPaths, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| actgen::Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| actgen::Error::io(path, e).into())
}

fn json<T: Serialize>(value: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value).map_err(actgen::Error::from)? + "\n")
}

fn require(path: &Path, what: &str, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{what} not found at {}; {hint}",
            path.display()
        )))
    }
}

/// Synthesizes a corpus, rotates every pair by `angles` random angles, and
/// writes the rotated pairs as un-normalized frames.
pub fn synth(seed: u64, captions: usize, variants: usize, angles: usize, out: &Path) -> Result<CorpusStats, CliError> {
    let base = synth_dataset(seed, captions, variants)?;
    let rotated = augment(&base, angles, seed);
    let stats = corpus_stats(&base, &rotated)?;
    let records = to_samples(&rotated)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| actgen::Error::io(dir, e))?;
    }
    save_jsonl(&records, out)?;
    Ok(stats)
}

#[derive(Debug, Serialize)]
pub struct PreprocessSummary {
    pub train_captions: usize,
    pub val_captions: usize,
    pub vocab_size: usize,
    /// feature indices whose std was floored to 1
    pub constant_features: Vec<usize>,
}

/// Splits by caption, fits normalization on the training split, and writes
/// `train.jsonl`, `val.jsonl`, `stats.json` and `vocab.txt` into `out`.
pub fn preprocess(data: &Path, out: &Path, val_fraction: f64, seed: u64) -> Result<PreprocessSummary, CliError> {
    require(data, "dataset", "run `actgen synth-data` first")?;
    let records = load_jsonl(data)?;
    let (train, val) = split_by_caption(&records, val_fraction, seed)?;
    let (stats, constant) = NormalizationStats::fit(train.iter().flat_map(|r| &r.actions))?;
    let captions: Vec<&str> = train.iter().map(|r| r.caption.as_str()).collect();
    let vocab = Vocab::build(&captions, MAX_VOCAB)?;
    fs::create_dir_all(out).map_err(|e| actgen::Error::io(out, e))?;
    save_jsonl(&normalize_records(&stats, &train), &out.join("train.jsonl"))?;
    save_jsonl(&normalize_records(&stats, &val), &out.join("val.jsonl"))?;
    write(&out.join("stats.json"), json(&stats)?)?;
    vocab.save(&out.join("vocab.txt"))?;
    Ok(PreprocessSummary {
        train_captions: train.len(),
        val_captions: val.len(),
        vocab_size: vocab.len(),
        constant_features: constant,
    })
}

/// Generated-output file: the dataset action schema plus the noise vectors
/// and the clips mapped back to raw coordinates.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedFile {
    pub caption: String,
    pub actions: Vec<Vec<Vec<f64>>>,
    pub mask: Vec<Vec<bool>>,
    pub z: Vec<Vec<f64>>,
    pub denormalized: Vec<Vec<Vec<f64>>>,
}

fn frames(a: &ProcessedAction) -> Vec<Vec<f64>> {
    a.frames().map(<[f64]>::to_vec).collect()
}

fn render(
    model: &mut Model,
    stats: &NormalizationStats,
    caption: &str,
    ids: &CaptionIds,
    zs: Vec<Vec<f64>>,
    m: usize,
) -> Result<GeneratedFile, CliError> {
    let clips = zs
        .iter()
        .map(|z| model.generate(ids, z, m))
        .collect::<actgen::Result<Vec<_>>>()?;
    Ok(GeneratedFile {
        caption: caption.to_string(),
        actions: clips.iter().map(frames).collect(),
        mask: clips.iter().map(|c| vec![true; c.len()]).collect(),
        denormalized: clips.iter().map(|c| frames(&stats.invert(c))).collect(),
        z: zs,
    })
}

fn noise(rng: &mut ChaCha8Rng, k: usize, d_z: usize, zero: bool) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            if zero {
                vec![0.0; d_z]
            } else {
                (0..d_z).map(|_| rng.sample(StandardNormal)).collect()
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub iterations: u64,
    pub metrics: Metrics,
}

pub fn train_run(config: &Path, resume: Option<&Path>) -> Result<TrainSummary, CliError> {
    let cfg = RunConfig::load(config)?;
    let d = &cfg.data;
    let hint = "run `actgen preprocess` first or fix the [data] section";
    require(&d.train, "training data", hint)?;
    require(&d.stats, "normalization stats", hint)?;
    require(&d.vocab, "vocabulary", hint)?;
    let records = load_jsonl(&d.train)?;

    let mut trainer = match resume {
        Some(path) => {
            require(path, "checkpoint", "pass a file from the run's checkpoints/ directory")?;
            let ck = load_checkpoint(path)?;
            if ck.model.gen_cfg != cfg.generator || ck.model.critic_cfg != cfg.critic {
                return Err(CliError::Validation(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            let samples = prepare(&records, &ck.vocab, cfg.train.dataset_mode)?;
            Trainer::resume(ck, cfg.train.clone(), samples)?
        }
        None => {
            let vocab = Vocab::load(&d.vocab)?;
            if vocab.len() > cfg.generator.vocab_size {
                return Err(CliError::Validation(format!(
                    "vocabulary has {} entries but generator.vocab_size is {}",
                    vocab.len(),
                    cfg.generator.vocab_size
                )));
            }
            let text = fs::read_to_string(&d.stats).map_err(|e| actgen::Error::io(&d.stats, e))?;
            let stats: NormalizationStats = serde_json::from_str(&text).map_err(actgen::Error::from)?;
            stats.validate()?;
            let samples = prepare(&records, &vocab, cfg.train.dataset_mode)?;
            let model = Model::init_params(&cfg.generator, &cfg.critic, cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone(), samples, vocab, stats)?
        }
    };

    let run = RunPaths::new(&d.run_dir);
    write(&run.dir.join("config.toml"), cfg.to_toml()?)?;
    train(&mut trainer, &run)?;

    let zero = cfg.train.dataset_mode == DatasetMode::OneToOne;
    let samples = trainer.samples().to_vec();
    let metrics = evaluate(
        &mut trainer.model,
        &samples,
        cfg.eval.samples_per_caption,
        cfg.eval.seed,
        zero,
    )?;
    write(&run.metrics(), json(&metrics)?)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let d_z = cfg.generator.d_z;
    for (i, s) in samples.iter().take(cfg.eval.preview_captions).enumerate() {
        let m = s.actions.iter().map(ProcessedAction::len).max().unwrap_or(1);
        let zs = noise(&mut rng, 1, d_z, zero);
        let file = render(&mut trainer.model, &trainer.stats, &s.text, &s.caption, zs, m)?;
        write(
            &run.samples().join(format!("{i:03}.json")),
            serde_json::to_vec(&file).map_err(actgen::Error::from)?,
        )?;
    }
    Ok(TrainSummary {
        run_dir: run.dir,
        iterations: trainer.step,
        metrics,
    })
}

pub struct GenerateRequest<'a> {
    pub checkpoint: &'a Path,
    pub caption: &'a str,
    pub k: usize,
    pub seed: u64,
    /// frames per clip; the model maximum when absent
    pub frames: Option<usize>,
    pub zero_noise: bool,
    pub out: &'a Path,
}

pub fn generate(req: &GenerateRequest) -> Result<GeneratedFile, CliError> {
    if req.k == 0 {
        return Err(CliError::Validation("--k must be at least 1".into()));
    }
    require(req.checkpoint, "checkpoint", "train a model first")?;
    let mut ck = load_checkpoint(req.checkpoint)?;
    let (ids, unknown) = ck.vocab.encode(req.caption)?;
    if !unknown.is_empty() {
        log::warn!("words not in the vocabulary, read as <unk>: {}", unknown.join(", "));
    }
    let m = req.frames.unwrap_or(ck.model.gen_cfg.m_max);
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let zs = noise(&mut rng, req.k, ck.model.gen_cfg.d_z, req.zero_noise);
    let file = render(&mut ck.model, &ck.stats, req.caption, &ids, zs, m)?;
    write(req.out, serde_json::to_vec(&file).map_err(actgen::Error::from)?)?;
    Ok(file)
}

/// Returns the per-block report; fails when any block is over tolerance.
pub fn gradcheck(seed: u64, corrupt: f64) -> Result<Vec<BlockResult>, CliError> {
    let report = gradcheck_suite(&SuiteOptions {
        seed,
        analytic_offset: corrupt,
        ..SuiteOptions::default()
    })?;
    Ok(report)
}

pub fn eval(checkpoint: &Path, data: &Path, k: usize, seed: u64, zero_noise: bool) -> Result<Metrics, CliError> {
    require(checkpoint, "checkpoint", "train a model first")?;
    require(
        data,
        "dataset",
        "pass a normalized split written by `actgen preprocess`",
    )?;
    let mut ck = load_checkpoint(checkpoint)?;
    let records = load_jsonl(data)?;
    let samples = prepare(&records, &ck.vocab, DatasetMode::OneToMany)?;
    Ok(evaluate(&mut ck.model, &samples, k, seed, zero_noise)?)
}
