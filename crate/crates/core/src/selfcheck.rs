//! Whole-model checks on toy sizes: finite-difference verification of the
//! generator and each critic loss, and decoder causality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::critics::{CriticConfig, Critics};
use crate::diffcore::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::motiondata::FRAME_WIDTH;
use crate::nn::{segments, Init, NormBank, ParamSet, Session};
use crate::textproc::CaptionIds;
use crate::training::{critic_losses, CriticInputs};

/// Relative error a block must stay under.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Coordinates sampled per tensor.
    pub coords_per_tensor: usize,
    /// Negative-control hook forwarded to the checker; keep at 0.
    pub analytic_offset: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            coords_per_tensor: 3,
            analytic_offset: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockResult {
    pub block: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

impl BlockResult {
    fn new(block: &str, r: GradCheckReport) -> Self {
        BlockResult {
            block: block.into(),
            max_rel_error: r.max_rel_error,
            coords_checked: r.coords_checked,
            passed: r.max_rel_error < GRADCHECK_TOLERANCE,
        }
    }
}

fn toy_generator() -> GeneratorConfig {
    GeneratorConfig {
        d: 8,
        d_z: 4,
        layers: 2,
        heads: 2,
        d_h: 4,
        d_p: 16,
        m_max: 5,
        n_max: 6,
        vocab_size: 12,
        ..GeneratorConfig::default()
    }
}

fn toy_critic() -> CriticConfig {
    CriticConfig {
        conv_channels: vec![4, 3],
        d1_hidden: 6,
        branch_width: 3,
        trunk_hidden: 5,
        ..CriticConfig::default()
    }
}

/// Normal-initialized weights are scaled up so that every path carries a
/// visible signal.
fn widen(ps: &mut ParamSet, k: f64) {
    for id in ps.ids().collect::<Vec<_>>() {
        let p = ps.get_mut(id);
        if p.init == Init::Normal {
            p.value.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Result<Tensor> {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<Vec<BlockResult>> {
    let check = GradCheckOptions {
        coords_per_tensor: Some(opts.coords_per_tensor),
        seed: opts.seed,
        analytic_offset: opts.analytic_offset,
        ..GradCheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();

    // generator: 2-token caption, 3 frames, mean squared error
    let gcfg = toy_generator();
    let mut ps = ParamSet::new();
    let mut nb = NormBank::default();
    let gen = Generator::build(&gcfg, &mut ps, &mut nb)?;
    ps.initialize(opts.seed);
    widen(&mut ps, 15.0);
    let caption = CaptionIds::new(vec![2, 5])?;
    let target = random(&mut rng, 3, FRAME_WIDTH)?;
    let z = random(&mut rng, 1, gcfg.d_z)?;
    let inputs: Vec<Tensor> = ps.iter().map(|(_, p)| p.value.clone()).collect();
    for (name, train) in [("generator", true), ("generator (eval)", false)] {
        let r = grad_check(&inputs, &check, |g, vars| {
            let mut s = Session::prebound(g, &ps, &mut nb, vars, train)?;
            let zv = s.constant(z.clone());
            let (_, frames) = gen.forward(&mut s, std::slice::from_ref(&caption), zv, 3)?;
            let t = s.constant(target.clone());
            let diff = s.g.sub(frames, t)?;
            let sq = s.g.mul(diff, diff)?;
            Ok(s.g.mean(sq))
        })?;
        out.push(BlockResult::new(name, r));
    }

    // critics: two captions of 2 and 4 words, clips of 3 and 5 frames
    let mut ps = ParamSet::new();
    let mut nb = NormBank::default();
    let critics = Critics::build(&toy_critic(), &gcfg, &mut ps, &mut nb)?;
    ps.initialize(opts.seed + 1);
    widen(&mut ps, 10.0);
    let (nw, nf) = ([2, 4], [3, 5]);
    let data = [
        random(&mut rng, 6, gcfg.d)?,
        random(&mut rng, 2, gcfg.d)?,
        random(&mut rng, 8, FRAME_WIDTH)?,
        random(&mut rng, 8, FRAME_WIDTH)?,
    ];
    let mut inputs: Vec<Tensor> = ps.iter().map(|(_, p)| p.value.clone()).collect();
    let np = inputs.len();
    inputs.extend(data);
    for (k, name) in ["D1", "D2", "D3"].into_iter().enumerate() {
        let r = grad_check(&inputs, &check, |g, vars| {
            let mut s = Session::prebound(g, &ps, &mut nb, &vars[..np], true)?;
            let ci = CriticInputs {
                words: vars[np],
                word_segs: segments(&nw),
                sent: vars[np + 1],
                frame_segs: segments(&nf),
            };
            let terms = critic_losses(&mut s, &critics, &ci, vars[np + 2], vars[np + 3])?;
            Ok(terms[k])
        })?;
        out.push(BlockResult::new(name, r));
    }
    Ok(out)
}

/// Largest change of output rows `..=t` after perturbing rows `> t` of the
/// decoder input, over `trials` random cases (eval mode, 3 layers).
pub fn causality_deviation(trials: usize, seed: u64) -> Result<f64> {
    let cfg = GeneratorConfig {
        layers: 3,
        m_max: 8,
        ..toy_generator()
    };
    let mut ps = ParamSet::new();
    let mut nb = NormBank::default();
    let gen = Generator::build(&cfg, &mut ps, &mut nb)?;
    ps.initialize(seed);
    widen(&mut ps, 15.0);
    let caption = CaptionIds::new(vec![2, 7, 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let m = rng.random_range(2..=cfg.m_max);
        let t = rng.random_range(0..m - 1);
        let h = random(&mut rng, m, cfg.d)?;
        let mut h2 = h.clone();
        for v in &mut h2.data_mut()[(t + 1) * cfg.d..] {
            *v += rng.random_range(-5.0..5.0);
        }
        let mut run = |h: Tensor| -> Result<Tensor> {
            let mut g = Graph::new();
            let mut s = Session::new(&mut g, &ps, &mut nb, false, None);
            let enc = gen.encode(&mut s, std::slice::from_ref(&caption))?;
            let hv = s.constant(h);
            let out = gen.refine(&mut s, hv, &enc, m)?;
            let frames = gen.project(&mut s, out)?;
            Ok(s.value(frames).clone())
        };
        let (a, b) = (run(h)?, run(h2)?);
        for r in 0..=t {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                worst = worst.max((x - y).abs());
            }
        }
        if a.row(m - 1) == b.row(m - 1) {
            return Err(Error::Numeric("perturbation did not reach the last step".into()));
        }
    }
    Ok(worst)
}
