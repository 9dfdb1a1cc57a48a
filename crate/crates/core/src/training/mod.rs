//! Adversarial training with teacher forcing, the optimizer, checkpoints
//! and evaluation metrics.

mod adam;
mod checkpoint;
mod losses;
mod metrics;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use losses::{
    critic_losses, generator_losses, masked_mse, nearest_target, overall, stack_frames, teacher_forcing_loss,
    valid_rows, CriticInputs, Terms,
};
pub use metrics::{clip_distance, diversity_score, frame_collapse_score, Metrics};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critics::{CriticConfig, Critics};
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::motiondata::{NormalizationStats, ProcessedAction, SampleRecord};
use crate::nn::{Group, NormBank, ParamSet, Session};
use crate::textproc::{CaptionIds, Vocab};

/// Generator, critics and all of their state.
pub struct Model {
    pub gen_cfg: GeneratorConfig,
    pub critic_cfg: CriticConfig,
    pub params: ParamSet,
    pub norms: NormBank,
    pub generator: Generator,
    pub critics: Critics,
}

impl Model {
    /// Architecture only; every tensor is zero (gammas one).
    pub fn build(gen_cfg: &GeneratorConfig, critic_cfg: &CriticConfig) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut norms = NormBank::default();
        let generator = Generator::build(gen_cfg, &mut params, &mut norms)?;
        let critics = Critics::build(critic_cfg, gen_cfg, &mut params, &mut norms)?;
        Ok(Model {
            gen_cfg: gen_cfg.clone(),
            critic_cfg: critic_cfg.clone(),
            params,
            norms,
            generator,
            critics,
        })
    }

    /// Weights from N(0, 0.02²), norm gammas 1, every bias and beta 0.
    pub fn init_params(gen_cfg: &GeneratorConfig, critic_cfg: &CriticConfig, seed: u64) -> Result<Self> {
        let mut model = Self::build(gen_cfg, critic_cfg)?;
        model.params.initialize(seed);
        Ok(model)
    }

    /// SHA-256 over the names, values and running statistics of one group.
    pub fn fingerprint(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.params.iter().filter(|(_, p)| p.group == group) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        for e in self.norms.entries().iter().filter(|e| e.group == group) {
            h.update(e.name.as_bytes());
            for v in e.state.running_mean.iter().chain(&e.state.running_var) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Eval-mode generation of one clip of `m` frames.
    pub fn generate(&mut self, ids: &CaptionIds, z: &[f64], m: usize) -> Result<ProcessedAction> {
        self.generator.generate(&self.params, &mut self.norms, ids, z, m)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    /// every caption keeps all of its actions; noise is sampled
    #[default]
    OneToMany,
    /// each caption-action pair stands alone and the noise is fixed at zero
    OneToOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    pub tf_steps: usize,
    pub iterations: u64,
    pub seed: u64,
    pub dataset_mode: DatasetMode,
    pub checkpoint_every: u64,
    /// When false the `seconds` column is written as 0 so that loss logs
    /// of identical runs compare equal byte for byte.
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-6,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            d_steps: 1,
            g_steps: 1,
            tf_steps: 1,
            iterations: 1000,
            seed: 0,
            dataset_mode: DatasetMode::OneToMany,
            checkpoint_every: 100,
            log_wallclock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// A caption with its token ids and every action that realizes it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub text: String,
    pub caption: CaptionIds,
    pub actions: Vec<ProcessedAction>,
}

/// Encodes captions; words outside the vocabulary become `<unk>`.
pub fn prepare(records: &[SampleRecord], vocab: &Vocab, mode: DatasetMode) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for r in records {
        let (caption, unknown) = vocab.encode(&r.caption)?;
        if !unknown.is_empty() {
            log::warn!("caption {:?}: unknown words {:?} map to <unk>", r.caption, unknown);
        }
        if r.actions.is_empty() {
            return Err(Error::Contract(format!("caption {:?} has no actions", r.caption)));
        }
        match mode {
            DatasetMode::OneToMany => out.push(TrainSample {
                text: r.caption.clone(),
                caption,
                actions: r.actions.clone(),
            }),
            DatasetMode::OneToOne => out.extend(r.actions.iter().map(|a| TrainSample {
                text: r.caption.clone(),
                caption: caption.clone(),
                actions: vec![a.clone()],
            })),
        }
    }
    Ok(out)
}

pub const LOSS_CSV_HEADER: &str = "step,L1d,L1g,L2d,L2g,L3d,L3g,Ld,Lg,Ltf,seconds";

/// Losses of one iteration. A phase that did not run leaves its fields
/// empty; when a phase runs several times the last value is kept.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l1d: Option<f64>,
    pub l1g: Option<f64>,
    pub l2d: Option<f64>,
    pub l2g: Option<f64>,
    pub l3d: Option<f64>,
    pub l3g: Option<f64>,
    pub ld: Option<f64>,
    pub lg: Option<f64>,
    pub ltf: Option<f64>,
    pub seconds: f64,
}

impl LossReport {
    fn set_d(&mut self, t: [f64; 3]) {
        (self.l1d, self.l2d, self.l3d) = (Some(t[0]), Some(t[1]), Some(t[2]));
        self.ld = Some((t[0] + t[1] + t[2]) / 3.0);
    }

    fn set_g(&mut self, t: [f64; 3]) {
        (self.l1g, self.l2g, self.l3g) = (Some(t[0]), Some(t[1]), Some(t[2]));
        self.lg = Some((t[0] + t[1] + t[2]) / 3.0);
    }

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            f(self.l1d),
            f(self.l1g),
            f(self.l2d),
            f(self.l2g),
            f(self.l3d),
            f(self.l3g),
            f(self.ld),
            f(self.lg),
            f(self.ltf),
            self.seconds
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Critic,
    Generator,
    TeacherForcing,
}

pub struct Trainer {
    pub model: Model,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub cfg: TrainConfig,
    pub vocab: Vocab,
    pub stats: NormalizationStats,
    samples: Vec<TrainSample>,
    /// completed iterations
    pub step: u64,
}

impl Trainer {
    pub fn new(
        model: Model,
        cfg: TrainConfig,
        samples: Vec<TrainSample>,
        vocab: Vocab,
        stats: NormalizationStats,
    ) -> Result<Self> {
        cfg.validate()?;
        let opt = |group| {
            Adam::new(
                &model.params,
                group,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )
        };
        let (opt_g, opt_d) = (opt(Group::Generator)?, opt(Group::Critic)?);
        Self::assemble(model, opt_g, opt_d, cfg, samples, vocab, stats, 0)
    }

    /// Continues from a checkpoint. Optimizer moments and the step counter
    /// carry over; learning rates and betas come from `cfg`.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, samples: Vec<TrainSample>) -> Result<Self> {
        cfg.validate()?;
        let Checkpoint {
            step,
            model,
            mut opt_g,
            mut opt_d,
            vocab,
            stats,
        } = ckpt;
        for opt in [&mut opt_g, &mut opt_d] {
            (opt.lr, opt.beta1, opt.beta2, opt.eps) = (cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        }
        Self::assemble(model, opt_g, opt_d, cfg, samples, vocab, stats, step)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: Model,
        opt_g: Adam,
        opt_d: Adam,
        cfg: TrainConfig,
        samples: Vec<TrainSample>,
        vocab: Vocab,
        stats: NormalizationStats,
        step: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let m_max = model.gen_cfg.m_max;
        for s in &samples {
            if let Some(a) = s.actions.iter().find(|a| a.len() > m_max) {
                return Err(Error::Config(format!(
                    "an action of {:?} has {} frames, more than generator.m_max = {m_max}",
                    s.text,
                    a.len()
                )));
            }
        }
        if vocab.len() > model.gen_cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but generator.vocab_size is {}",
                vocab.len(),
                model.gen_cfg.vocab_size
            )));
        }
        Ok(Trainer {
            model,
            opt_g,
            opt_d,
            cfg,
            vocab,
            stats,
            samples,
            step,
        })
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    fn noise(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<Tensor> {
        let d_z = self.model.gen_cfg.d_z;
        let data = match self.cfg.dataset_mode {
            DatasetMode::OneToOne => vec![0.0; batch * d_z],
            DatasetMode::OneToMany => (0..batch * d_z).map(|_| rng.sample(StandardNormal)).collect(),
        };
        Tensor::new(vec![batch, d_z], data)
    }

    pub fn iteration(&mut self) -> Result<LossReport> {
        self.iteration_observed(&mut |_, _| {})
    }

    /// One pass of the loop: critic steps, generator steps, then teacher
    /// forcing steps. `observe` runs after every parameter update.
    pub fn iteration_observed(&mut self, observe: &mut dyn FnMut(Phase, &Model)) -> Result<LossReport> {
        let start = Instant::now();
        let step = self.step + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        let n = self.samples.len();
        let picks = sample(&mut rng, n, self.cfg.batch_size.min(n)).into_vec();
        let items: Vec<(usize, usize)> = picks
            .into_iter()
            .map(|i| (i, rng.random_range(0..self.samples[i].actions.len())))
            .collect();
        let z = self.noise(&mut rng, items.len())?;
        let mut report = LossReport {
            step,
            ..LossReport::default()
        };
        for _ in 0..self.cfg.d_steps {
            let t = adversarial_step(
                &mut self.model,
                &mut self.opt_d,
                &self.samples,
                &items,
                &z,
                Phase::Critic,
                step,
            )?;
            report.set_d(t);
            observe(Phase::Critic, &self.model);
        }
        for _ in 0..self.cfg.g_steps {
            let t = adversarial_step(
                &mut self.model,
                &mut self.opt_g,
                &self.samples,
                &items,
                &z,
                Phase::Generator,
                step,
            )?;
            report.set_g(t);
            observe(Phase::Generator, &self.model);
        }
        for _ in 0..self.cfg.tf_steps {
            let z = self.noise(&mut rng, items.len())?;
            report.ltf = Some(tf_step(
                &mut self.model,
                &mut self.opt_g,
                &self.samples,
                &items,
                &z,
                step,
            )?);
            observe(Phase::TeacherForcing, &self.model);
        }
        self.step = step;
        if self.cfg.log_wallclock {
            report.seconds = start.elapsed().as_secs_f64();
        }
        Ok(report)
    }

    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            self.step,
            &self.model,
            &self.opt_g,
            &self.opt_d,
            &self.vocab,
            &self.stats,
        )
    }
}

fn finite(name: &str, v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} = {v} at step {step}")))
    }
}

fn adversarial_step(
    model: &mut Model,
    opt: &mut Adam,
    samples: &[TrainSample],
    items: &[(usize, usize)],
    z: &Tensor,
    phase: Phase,
    step: u64,
) -> Result<[f64; 3]> {
    let captions: Vec<CaptionIds> = items.iter().map(|&(i, _)| samples[i].caption.clone()).collect();
    let real: Vec<&ProcessedAction> = items.iter().map(|&(i, a)| &samples[i].actions[a]).collect();
    let lengths: Vec<usize> = real.iter().map(|a| a.len()).collect();
    let m = lengths.iter().copied().max().unwrap_or(1);
    let critic = phase == Phase::Critic;
    let group = if critic { Group::Critic } else { Group::Generator };
    let Model {
        params,
        norms,
        generator,
        critics,
        ..
    } = model;
    let mut g = Graph::new();
    let (values, grads) = {
        let mut s = Session::new(&mut g, params, norms, true, Some(group));
        let zv = s.constant(z.clone());
        let (enc, frames) = generator.forward(&mut s, &captions, zv, m)?;
        let fake = valid_rows(&mut s, frames, m, &lengths)?;
        let inputs = CriticInputs::new(&mut s, generator, &enc, &lengths)?;
        let terms = if critic {
            let real = s.constant(stack_frames(&real)?);
            critic_losses(&mut s, critics, &inputs, real, fake)?
        } else {
            generator_losses(&mut s, critics, &inputs, fake)?
        };
        let names = if critic {
            ["L1d", "L2d", "L3d"]
        } else {
            ["L1g", "L2g", "L3g"]
        };
        let mut values = [0.0; 3];
        for k in 0..3 {
            values[k] = finite(names[k], s.value(terms[k]).item()?, step)?;
        }
        let total = overall(&mut s, &terms)?;
        (values, s.backward(total)?)
    };
    opt.step(params, &grads)?;
    Ok(values)
}

fn tf_step(
    model: &mut Model,
    opt: &mut Adam,
    samples: &[TrainSample],
    items: &[(usize, usize)],
    z: &Tensor,
    step: u64,
) -> Result<f64> {
    let captions: Vec<CaptionIds> = items.iter().map(|&(i, _)| samples[i].caption.clone()).collect();
    let targets: Vec<&[ProcessedAction]> = items.iter().map(|&(i, _)| samples[i].actions.as_slice()).collect();
    let m = targets
        .iter()
        .flat_map(|t| t.iter().map(ProcessedAction::len))
        .max()
        .unwrap_or(1);
    let Model {
        params,
        norms,
        generator,
        ..
    } = model;
    let mut g = Graph::new();
    let (value, grads) = {
        let mut s = Session::new(&mut g, params, norms, true, Some(Group::Generator));
        let zv = s.constant(z.clone());
        let (_, frames) = generator.forward(&mut s, &captions, zv, m)?;
        let loss = teacher_forcing_loss(&mut s, frames, m, &targets)?;
        let value = finite("Ltf", s.value(loss).item()?, step)?;
        (value, s.backward(loss)?)
    };
    opt.step(params, &grads)?;
    Ok(value)
}

/// Files of a training run directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }

    pub fn losses(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:06}.ckpt"))
    }

    pub fn latest(&self) -> PathBuf {
        self.checkpoints().join("latest.ckpt")
    }

    pub fn halt(&self) -> PathBuf {
        self.checkpoints().join("halt.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }

    pub fn samples(&self) -> PathBuf {
        self.dir.join("samples")
    }
}

/// Runs until `cfg.iterations`, appending to `losses.csv` and writing a
/// checkpoint every `checkpoint_every` steps and at the end. A non-finite
/// loss stops the run after writing `checkpoints/halt.ckpt`.
pub fn train(trainer: &mut Trainer, run: &RunPaths) -> Result<Vec<LossReport>> {
    fs::create_dir_all(run.checkpoints()).map_err(|e| Error::io(run.checkpoints(), e))?;
    let csv_path = run.losses();
    let fresh = trainer.step == 0 || !csv_path.exists();
    let file = if fresh {
        File::create(&csv_path)
    } else {
        OpenOptions::new().append(true).open(&csv_path)
    }
    .map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    let io = |e| Error::io(&csv_path, e);
    if fresh {
        writeln!(csv, "{LOSS_CSV_HEADER}").map_err(io)?;
    }
    let mut reports = Vec::new();
    while trainer.step < trainer.cfg.iterations {
        let report = match trainer.iteration() {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                csv.flush().map_err(io)?;
                trainer.checkpoint(&run.halt())?;
                log::error!("halting: {e}; state written to {}", run.halt().display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(csv, "{}", report.csv_row()).map_err(io)?;
        csv.flush().map_err(io)?;
        if report.step % trainer.cfg.checkpoint_every == 0 {
            trainer.checkpoint(&run.checkpoint(report.step))?;
        }
        log::info!("{}", report.csv_row());
        reports.push(report);
    }
    trainer.checkpoint(&run.latest())?;
    Ok(reports)
}

/// Eval-mode metrics over a set of captions: `k` clips per caption, each as
/// long as that caption's longest real action.
pub fn evaluate(model: &mut Model, samples: &[TrainSample], k: usize, seed: u64, zero_noise: bool) -> Result<Metrics> {
    if samples.is_empty() || k == 0 {
        return Err(Error::Contract(
            "evaluation needs captions and at least one sample each".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_z = model.gen_cfg.d_z;
    let (mut collapse, mut n_collapse) = (0.0, 0usize);
    let (mut diversity, mut n_diversity) = (0.0, 0usize);
    let mut tf = 0.0;
    for s in samples {
        let m = s.actions.iter().map(ProcessedAction::len).max().unwrap_or(1);
        let clips = (0..k)
            .map(|_| {
                let z: Vec<f64> = if zero_noise {
                    vec![0.0; d_z]
                } else {
                    (0..d_z).map(|_| rng.sample(StandardNormal)).collect()
                };
                model.generate(&s.caption, &z, m)
            })
            .collect::<Result<Vec<_>>>()?;
        if m >= 2 {
            for c in &clips {
                collapse += frame_collapse_score(c)?;
                n_collapse += 1;
            }
        }
        if k >= 2 {
            diversity += diversity_score(&clips)?;
            n_diversity += 1;
        }
        tf += nearest_target(clips[0].data(), &s.actions)?.1;
    }
    let mean = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    Ok(Metrics {
        frame_collapse_score: mean(collapse, n_collapse),
        diversity_score: mean(diversity, n_diversity),
        tf_distance: tf / samples.len() as f64,
    })
}
