use crate::critics::{Critics, RowLogits};
use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::{Encoded, Generator};
use crate::motiondata::{ProcessedAction, FRAME_WIDTH};
use crate::nn::{segments, Segment, Session};

/// Graph inputs shared by the three critics for one batch.
pub struct CriticInputs {
    pub words: Var,
    pub word_segs: Vec<Segment>,
    pub sent: Var,
    /// valid frames of each clip, stacked
    pub frame_segs: Vec<Segment>,
}

impl CriticInputs {
    /// Word embeddings come straight from the generator's table.
    pub fn new(s: &mut Session, gen: &Generator, enc: &Encoded, lengths: &[usize]) -> Result<Self> {
        let table = s.param(gen.embed);
        let words = s.g.gather_rows(table, &enc.tokens)?;
        Ok(CriticInputs {
            words,
            word_segs: enc.segs.clone(),
            sent: enc.s,
            frame_segs: segments(lengths),
        })
    }
}

/// Keeps the first `lengths[b]` of the `m` generated rows of each sample.
pub fn valid_rows(s: &mut Session, frames: Var, m: usize, lengths: &[usize]) -> Result<Var> {
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > m) {
        return Err(Error::Contract(format!("clip length {bad} outside 1..={m}")));
    }
    let idx: Vec<usize> = lengths
        .iter()
        .enumerate()
        .flat_map(|(b, &l)| (0..l).map(move |t| b * m + t))
        .collect();
    s.g.gather_rows(frames, &idx)
}

/// Stacks the valid frames of each clip.
pub fn stack_frames(clips: &[&ProcessedAction]) -> Result<Tensor> {
    let data: Vec<f64> = clips.iter().flat_map(|c| c.data().iter().copied()).collect();
    Tensor::new(vec![data.len() / FRAME_WIDTH, FRAME_WIDTH], data)
}

/// Row weights that average within each sample, then over the samples
/// that own at least one row.
fn owner_weights(owner: &[usize], batch: usize) -> Result<Tensor> {
    let mut count = vec![0usize; batch];
    for &o in owner {
        count[o] += 1;
    }
    let present = count.iter().filter(|&&c| c > 0).count() as f64;
    let w = owner.iter().map(|&o| 1.0 / (present * count[o] as f64)).collect();
    Tensor::new(vec![owner.len(), 1], w)
}

/// `Σ_rows w · softplus(sign · logit)`; with `sign = -1` this is the
/// weighted `-ln σ(a)`, with `sign = +1` the weighted `-ln(1 - σ(a))`.
fn weighted_softplus(s: &mut Session, logits: Var, weights: &Tensor, sign: f64) -> Result<Var> {
    let a = if sign < 0.0 { s.g.scale(logits, -1.0) } else { logits };
    let sp = s.g.softplus(a);
    let w = s.constant(weights.clone());
    let prod = s.g.mul(sp, w)?;
    Ok(s.g.sum(prod))
}

fn per_sample(batch: usize) -> Result<Tensor> {
    Tensor::new(vec![batch, 1], vec![1.0 / batch as f64; batch])
}

/// The three adversarial terms, as graph scalars.
pub type Terms = [Var; 3];

/// Critic losses: real pairs should score 1 and generated pairs 0.
pub fn critic_losses(s: &mut Session, critics: &Critics, inputs: &CriticInputs, real: Var, fake: Var) -> Result<Terms> {
    let batch = inputs.word_segs.len();
    let pb = per_sample(batch)?;
    let d1r = critics.d1_logits(s, inputs.words, &inputs.word_segs, real, &inputs.frame_segs)?;
    let d1f = critics.d1_logits(s, inputs.words, &inputs.word_segs, fake, &inputs.frame_segs)?;
    let a = weighted_softplus(s, d1r, &pb, -1.0)?;
    let b = weighted_softplus(s, d1f, &pb, 1.0)?;
    let l1 = s.g.add(a, b)?;

    let pair = |s: &mut Session, r: RowLogits, f: RowLogits| -> Result<Var> {
        let a = weighted_softplus(s, r.logits, &owner_weights(&r.owner, batch)?, -1.0)?;
        let b = weighted_softplus(s, f.logits, &owner_weights(&f.owner, batch)?, 1.0)?;
        s.g.add(a, b)
    };
    let r2 = critics.d2_logits(s, inputs.sent, real, &inputs.frame_segs)?;
    let f2 = critics.d2_logits(s, inputs.sent, fake, &inputs.frame_segs)?;
    let l2 = pair(s, r2, f2)?;
    let r3 = critics.d3_logits(s, inputs.sent, real, &inputs.frame_segs)?;
    let f3 = critics.d3_logits(s, inputs.sent, fake, &inputs.frame_segs)?;
    let l3 = pair(s, r3, f3)?;
    Ok([l1, l2, l3])
}

/// Generator losses: generated pairs should score 1.
pub fn generator_losses(s: &mut Session, critics: &Critics, inputs: &CriticInputs, fake: Var) -> Result<Terms> {
    let batch = inputs.word_segs.len();
    let d1f = critics.d1_logits(s, inputs.words, &inputs.word_segs, fake, &inputs.frame_segs)?;
    let l1 = weighted_softplus(s, d1f, &per_sample(batch)?, -1.0)?;
    let f2 = critics.d2_logits(s, inputs.sent, fake, &inputs.frame_segs)?;
    let l2 = weighted_softplus(s, f2.logits, &owner_weights(&f2.owner, batch)?, -1.0)?;
    let f3 = critics.d3_logits(s, inputs.sent, fake, &inputs.frame_segs)?;
    let l3 = weighted_softplus(s, f3.logits, &owner_weights(&f3.owner, batch)?, -1.0)?;
    Ok([l1, l2, l3])
}

/// Mean of the three terms.
pub fn overall(s: &mut Session, terms: &Terms) -> Result<Var> {
    let a = s.g.add(terms[0], terms[1])?;
    let b = s.g.add(a, terms[2])?;
    Ok(s.g.scale(b, 1.0 / 3.0))
}

/// Mean squared error between the first `len(target)` generated rows and
/// the target, over every valid element.
pub fn masked_mse(generated: &[f64], target: &ProcessedAction) -> Result<f64> {
    let n = target.data().len();
    if generated.len() < n {
        return Err(Error::shape("masked_mse", &[generated.len()], &[n]));
    }
    Ok(generated[..n]
        .iter()
        .zip(target.data())
        .map(|(g, t)| (g - t).powi(2))
        .sum::<f64>()
        / n as f64)
}

/// Distance to the nearest target and its index.
pub fn nearest_target(generated: &[f64], targets: &[ProcessedAction]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in targets.iter().enumerate() {
        let d = masked_mse(generated, t)?;
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.ok_or_else(|| Error::Contract("teacher forcing needs at least one target".into()))
}

/// Teacher-forcing loss over a batch of generated `[batch·m, 87]` frames:
/// each sample regresses toward whichever of its targets is nearest.
pub fn teacher_forcing_loss(s: &mut Session, frames: Var, m: usize, targets: &[&[ProcessedAction]]) -> Result<Var> {
    let batch = targets.len();
    if s.value(frames).rows() != batch * m {
        return Err(Error::shape(
            "teacher forcing",
            s.value(frames).shape(),
            &[batch * m, FRAME_WIDTH],
        ));
    }
    let mut terms = Vec::with_capacity(batch);
    for (b, set) in targets.iter().enumerate() {
        let gen = &s.value(frames).data()[b * m * FRAME_WIDTH..(b + 1) * m * FRAME_WIDTH];
        let (best, _) = nearest_target(gen, set)?;
        let target = &set[best];
        let rows = s.g.slice_rows(frames, b * m, target.len())?;
        let t = s.constant(Tensor::new(vec![target.len(), FRAME_WIDTH], target.data().to_vec())?);
        let diff = s.g.sub(rows, t)?;
        let sq = s.g.mul(diff, diff)?;
        terms.push(s.g.mean(sq));
    }
    let total = s.g.concat_rows(&terms)?;
    Ok(s.g.mean(total))
}
