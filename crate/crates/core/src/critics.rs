//! The three critics: caption-action consistency over a word × frame grid
//! (D1), per-pose realism (D2), and per-transition realism (D3). All return
//! logits; probabilities are their sigmoid.

use serde::{Deserialize, Serialize};

use crate::diffcore::{conv_out, sigmoid_scalar, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::motiondata::{Joint, FRAME_WIDTH, POSE_WIDTH};
use crate::nn::{Builder, Group, Linear, Norm, NormBank, NormKind, ParamSet, Segment, Session};

/// Joints of each limb chain. Head and neck are shared by all four.
pub const BRANCHES: [[Joint; 5]; 4] = [
    [Joint::Head, Joint::Neck, Joint::LShoulder, Joint::LElbow, Joint::LHand],
    [Joint::Head, Joint::Neck, Joint::LThigh, Joint::LShin, Joint::LFoot],
    [Joint::Head, Joint::Neck, Joint::RShoulder, Joint::RElbow, Joint::RHand],
    [Joint::Head, Joint::Neck, Joint::RThigh, Joint::RShin, Joint::RFoot],
];
pub const BRANCH_WIDTH: usize = 15;

/// Column indices of branch `k` within a 42-wide pose.
pub fn branch_columns(k: usize) -> [usize; BRANCH_WIDTH] {
    let mut out = [0; BRANCH_WIDTH];
    for (i, j) in BRANCHES[k].iter().enumerate() {
        for c in 0..3 {
            out[3 * i + c] = *j as usize * 3 + c;
        }
    }
    out
}

pub fn branch_split(pose: &[f64]) -> Result<[[f64; BRANCH_WIDTH]; 4]> {
    if pose.len() != POSE_WIDTH {
        return Err(Error::shape("branch_split", &[POSE_WIDTH], &[pose.len()]));
    }
    let mut out = [[0.0; BRANCH_WIDTH]; 4];
    for (k, b) in out.iter_mut().enumerate() {
        for (dst, src) in b.iter_mut().zip(branch_columns(k)) {
            *dst = pose[src];
        }
    }
    Ok(out)
}

/// Splits `m` frames into `2m` poses: the `m` poses of actor A, then the
/// `m` poses of actor B. The second vector tags each row with its actor.
pub fn extract_poses(frames: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if frames.shape().len() != 2 || frames.cols() != FRAME_WIDTH {
        return Err(Error::shape("extract_poses", frames.shape(), &[FRAME_WIDTH]));
    }
    let m = frames.rows();
    let mut data = Vec::with_capacity(2 * m * POSE_WIDTH);
    for actor in 0..2 {
        for t in 0..m {
            data.extend_from_slice(&frames.row(t)[actor * POSE_WIDTH..(actor + 1) * POSE_WIDTH]);
        }
    }
    let tags = (0..2 * m).map(|r| r / m).collect();
    Ok((Tensor::new(vec![2 * m, POSE_WIDTH], data)?, tags))
}

/// Forward differences `x[t+1] - x[t]` of a row sequence.
pub fn motion_diff(seq: &Tensor) -> Result<Tensor> {
    let m = seq.rows();
    if m < 2 {
        return Err(Error::Contract("motion needs at least two poses".into()));
    }
    let c = seq.cols();
    let data = (0..m - 1)
        .flat_map(|t| {
            seq.row(t + 1)
                .iter()
                .zip(seq.row(t))
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(vec![m - 1, c], data)
}

/// `n × m × (d_e + d_y)` with cell `(i, j)` equal to `[e_i ; y_j]`.
pub fn build_grid(e: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (n, m) = (e.rows(), y.rows());
    let (ev, yv) = (g.constant(e.clone()), g.constant(y.clone()));
    let grid = g.grid(ev, yv, n, m)?;
    g.value(grid).reshape(&[n, m, e.cols() + y.cols()])
}

pub fn probabilities(logits: &Tensor) -> Vec<f64> {
    logits.data().iter().map(|&a| sigmoid_scalar(a)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    /// output channels of each strided convolution in D1
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// D1 hidden FC width
    pub d1_hidden: usize,
    /// per-branch feature width in D2 and D3
    pub branch_width: usize,
    /// D2/D3 hidden FC width
    pub trunk_hidden: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            conv_channels: vec![128, 128, 128],
            kernel: 3,
            stride: 2,
            padding: 1,
            d1_hidden: 256,
            branch_width: 32,
            trunk_hidden: 128,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config(
                "critic.conv_channels must be non-empty and positive".into(),
            ));
        }
        for (name, v) in [
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("d1_hidden", self.d1_hidden),
            ("branch_width", self.branch_width),
            ("trunk_hidden", self.trunk_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("critic.{name} must be positive")));
            }
        }
        Ok(())
    }
}

struct ConvLayer {
    lin: Linear,
    norm: Norm,
    h_in: usize,
    w_in: usize,
}

struct D1 {
    convs: Vec<ConvLayer>,
    /// spatial extent after the last convolution
    out_hw: (usize, usize),
    fc1: Linear,
    fc2: Linear,
}

/// Distinct linear map per branch input, then a two-layer trunk over the
/// branch features and the sentence representation.
pub struct BranchCritic {
    pub branches: Vec<Linear>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BranchCritic {
    fn new(b: &mut Builder, name: &str, n_branches: usize, cfg: &CriticConfig, d_sent: usize) -> Self {
        let branches = (0..n_branches)
            .map(|k| Linear::new(b, &format!("{name}.branch.{k}"), BRANCH_WIDTH, cfg.branch_width, true))
            .collect();
        let width = n_branches * cfg.branch_width + d_sent;
        BranchCritic {
            branches,
            fc1: Linear::new(b, &format!("{name}.trunk.0"), width, cfg.trunk_hidden, true),
            fc2: Linear::new(b, &format!("{name}.trunk.1"), cfg.trunk_hidden, 1, true),
        }
    }

    /// `inputs` holds 42-wide pose-like rows; each contributes four
    /// branches, in order. `sent` has one row per input row.
    fn forward(&self, s: &mut Session, inputs: &[Var], sent: Var) -> Result<Var> {
        let mut feats = Vec::with_capacity(self.branches.len() + 1);
        for (i, &x) in inputs.iter().enumerate() {
            for k in 0..4 {
                let cols = s.g.gather_cols(x, &branch_columns(k))?;
                let f = self.branches[4 * i + k].forward(s, cols)?;
                feats.push(s.g.gelu(f));
            }
        }
        feats.push(sent);
        let h = s.g.concat_cols(&feats)?;
        let h = self.fc1.forward(s, h)?;
        let h = s.g.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Logits with the batch sample that owns each row.
pub struct RowLogits {
    /// `[rows, 1]`
    pub logits: Var,
    pub owner: Vec<usize>,
}

pub struct Critics {
    cfg: CriticConfig,
    canvas: (usize, usize),
    d_word: usize,
    d1: D1,
    pub d2: BranchCritic,
    pub d3: BranchCritic,
}

impl Critics {
    /// Registers every critic tensor under the `critic.` prefix. The D1
    /// canvas is `n_max × m_max` of the generator configuration.
    pub fn build(
        cfg: &CriticConfig,
        gen: &GeneratorConfig,
        params: &mut ParamSet,
        norms: &mut NormBank,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            params,
            norms,
            group: Group::Critic,
        };
        let (mut h, mut w) = (gen.n_max, gen.m_max);
        let mut c = gen.d + gen.d_f;
        let mut convs = Vec::new();
        for (i, &out) in cfg.conv_channels.iter().enumerate() {
            let (oh, ow) = conv_out(h, cfg.kernel, cfg.stride, cfg.padding)
                .zip(conv_out(w, cfg.kernel, cfg.stride, cfg.padding))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "consistency grid {h}×{w} is smaller than the {k}×{k} receptive field of convolution {i}",
                        k = cfg.kernel
                    ))
                })?;
            convs.push(ConvLayer {
                lin: Linear::new(
                    &mut b,
                    &format!("critic.d1.conv.{i}"),
                    cfg.kernel * cfg.kernel * c,
                    out,
                    true,
                ),
                norm: Norm::new(&mut b, &format!("critic.d1.norm.{i}"), out, NormKind::Batch),
                h_in: h,
                w_in: w,
            });
            (h, w, c) = (oh, ow, out);
        }
        let flat = h * w * c;
        let d1 = D1 {
            convs,
            out_hw: (h, w),
            fc1: Linear::new(&mut b, "critic.d1.fc.0", flat, cfg.d1_hidden, true),
            fc2: Linear::new(&mut b, "critic.d1.fc.1", cfg.d1_hidden, 1, true),
        };
        let d2 = BranchCritic::new(&mut b, "critic.d2", 4, cfg, gen.d);
        let d3 = BranchCritic::new(&mut b, "critic.d3", 8, cfg, gen.d);
        Ok(Critics {
            cfg: cfg.clone(),
            canvas: (gen.n_max, gen.m_max),
            d_word: gen.d,
            d1,
            d2,
            d3,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.cfg
    }

    /// D1 final layer, for tests that pin the output.
    pub fn d1_head(&self) -> &Linear {
        &self.d1.fc2
    }

    /// One logit per sample. `words` stacks the word embeddings of every
    /// caption and `frames` the valid frames of every clip.
    pub fn d1_logits(
        &self,
        s: &mut Session,
        words: Var,
        word_segs: &[Segment],
        frames: Var,
        frame_segs: &[Segment],
    ) -> Result<Var> {
        if word_segs.len() != frame_segs.len() {
            return Err(Error::shape("d1 batch", &[word_segs.len()], &[frame_segs.len()]));
        }
        if s.value(words).cols() != self.d_word || s.value(frames).cols() != FRAME_WIDTH {
            return Err(Error::shape(
                "d1 input",
                s.value(words).shape(),
                s.value(frames).shape(),
            ));
        }
        let (h, w) = self.canvas;
        let batch = word_segs.len();
        let mut grids = Vec::with_capacity(batch);
        for (&(e0, n), &(f0, m)) in word_segs.iter().zip(frame_segs) {
            let e = s.g.slice_rows(words, e0, n)?;
            let y = s.g.slice_rows(frames, f0, m)?;
            grids.push(s.g.grid(e, y, h, w)?);
        }
        let mut x = if batch == 1 { grids[0] } else { s.g.concat_rows(&grids)? };
        for layer in &self.d1.convs {
            let cols = s.g.im2col(
                x,
                batch,
                layer.h_in,
                layer.w_in,
                self.cfg.kernel,
                self.cfg.stride,
                self.cfg.padding,
            )?;
            let y = layer.lin.forward(s, cols)?;
            let y = layer.norm.forward(s, y)?;
            x = s.g.gelu(y);
        }
        let (oh, ow) = self.d1.out_hw;
        let c = s.value(x).cols();
        let flat = s.g.reshape(x, &[batch, oh * ow * c])?;
        let hdn = self.d1.fc1.forward(s, flat)?;
        let hdn = s.g.gelu(hdn);
        self.d1.fc2.forward(s, hdn)
    }

    /// One logit per pose: for each clip, its actor-A poses then its
    /// actor-B poses. `sent` is `[batch, d]`.
    pub fn d2_logits(&self, s: &mut Session, sent: Var, frames: Var, frame_segs: &[Segment]) -> Result<RowLogits> {
        let mut rows = Vec::new();
        let mut owner = Vec::new();
        for (b, &(f0, m)) in frame_segs.iter().enumerate() {
            for actor in 0..2 {
                for t in 0..m {
                    rows.push((f0 + t, actor));
                    owner.push(b);
                }
            }
        }
        let poses = self.pose_rows(s, frames, &rows, 0)?;
        let sv = s.g.gather_rows(sent, &owner)?;
        let logits = self.d2.forward(s, &[poses], sv)?;
        Ok(RowLogits { logits, owner })
    }

    /// One logit per transition `t → t+1` of each actor; clips with a
    /// single frame contribute none.
    pub fn d3_logits(&self, s: &mut Session, sent: Var, frames: Var, frame_segs: &[Segment]) -> Result<RowLogits> {
        let mut cur = Vec::new();
        let mut owner = Vec::new();
        for (b, &(f0, m)) in frame_segs.iter().enumerate() {
            for actor in 0..2 {
                for t in 0..m.saturating_sub(1) {
                    cur.push((f0 + t, actor));
                    owner.push(b);
                }
            }
        }
        if cur.is_empty() {
            return Err(Error::Contract("no clip in the batch has a transition".into()));
        }
        let poses = self.pose_rows(s, frames, &cur, 0)?;
        let next = self.pose_rows(s, frames, &cur, 1)?;
        let motion = s.g.sub(next, poses)?;
        let sv = s.g.gather_rows(sent, &owner)?;
        let logits = self.d3.forward(s, &[poses, motion], sv)?;
        Ok(RowLogits { logits, owner })
    }

    /// Gathers the 42-wide pose of `(frame + offset, actor)` for each entry.
    fn pose_rows(&self, s: &mut Session, frames: Var, rows: &[(usize, usize)], offset: usize) -> Result<Var> {
        let mut parts = Vec::with_capacity(2);
        for actor in 0..2 {
            let idx: Vec<usize> = rows.iter().filter(|r| r.1 == actor).map(|r| r.0 + offset).collect();
            if idx.is_empty() {
                continue;
            }
            let cols: Vec<usize> = (actor * POSE_WIDTH..(actor + 1) * POSE_WIDTH).collect();
            let sel = s.g.gather_rows(frames, &idx)?;
            parts.push((actor, s.g.gather_cols(sel, &cols)?));
        }
        // restore the caller's row order
        let stacked = if parts.len() == 1 {
            parts[0].1
        } else {
            let vars: Vec<Var> = parts.iter().map(|p| p.1).collect();
            s.g.concat_rows(&vars)?
        };
        let mut seen = [0usize; 2];
        let count_a = rows.iter().filter(|r| r.1 == 0).count();
        let order: Vec<usize> = rows
            .iter()
            .map(|r| {
                let k = seen[r.1];
                seen[r.1] += 1;
                if r.1 == 0 {
                    k
                } else {
                    count_a + k
                }
            })
            .collect();
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            Ok(stacked)
        } else {
            s.g.gather_rows(stacked, &order)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckOptions};
    use crate::generator::tests::toy_config;
    use crate::nn::{segments, Init};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_critic() -> CriticConfig {
        CriticConfig {
            conv_channels: vec![4, 3],
            d1_hidden: 6,
            branch_width: 3,
            trunk_hidden: 5,
            ..CriticConfig::default()
        }
    }

    fn fixture(seed: u64, scale: f64) -> (Critics, ParamSet, NormBank) {
        let mut ps = ParamSet::new();
        let mut nb = NormBank::default();
        let c = Critics::build(&toy_critic(), &toy_config(), &mut ps, &mut nb).unwrap();
        ps.initialize(seed);
        for id in ps.ids().collect::<Vec<_>>() {
            let p = ps.get_mut(id);
            if p.init == Init::Normal {
                p.value.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
        (c, ps, nb)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn branch_table() {
        let names = [[0, 1, 2, 3, 4], [0, 1, 5, 6, 7], [0, 1, 8, 9, 10], [0, 1, 11, 12, 13]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pose: Vec<f64> = (0..POSE_WIDTH).map(|_| rng.random()).collect();
        let split = branch_split(&pose).unwrap();
        for (k, joints) in names.iter().enumerate() {
            for (i, &j) in joints.iter().enumerate() {
                assert_eq!(&split[k][3 * i..3 * i + 3], &pose[3 * j..3 * j + 3]);
            }
            assert_eq!(&split[k][..3], &pose[..3]);
        }
        assert_eq!(branch_split(&[0.0; POSE_WIDTH]).unwrap()[0], [0.0; 15]);
        assert!(branch_split(&[0.0; 41]).is_err());
    }

    #[test]
    fn pose_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in [1, 3, 26] {
            let frames = random(&mut rng, m, FRAME_WIDTH);
            let (poses, tags) = extract_poses(&frames).unwrap();
            assert_eq!(poses.rows(), 2 * m);
            assert_eq!(tags.iter().filter(|&&t| t == 1).count(), m);
            for t in 0..m {
                let mut joined = poses.row(t).to_vec();
                joined.extend_from_slice(poses.row(m + t));
                assert_eq!(joined.as_slice(), &frames.row(t)[..84]);
            }
        }
        assert!(extract_poses(&Tensor::zeros(&[2, 86])).is_err());
    }

    #[test]
    fn motion_differences() {
        let c = Tensor::full(&[4, 3], 2.5);
        assert!(motion_diff(&c).unwrap().data().iter().all(|&v| v == 0.0));
        let lin = Tensor::new(
            vec![4, 2],
            (0..4).flat_map(|t| [t as f64 * 0.5, 1.0 - t as f64]).collect(),
        )
        .unwrap();
        let d = motion_diff(&lin).unwrap();
        assert_eq!(d.data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random(&mut rng, 5, 7);
        let d = motion_diff(&r).unwrap();
        for t in 0..4 {
            for j in 0..7 {
                assert_eq!(d.at(t, j), r.at(t + 1, j) - r.at(t, j));
            }
        }
        assert!(motion_diff(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn grid_rows_and_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (e, y) = (random(&mut rng, 3, 128), random(&mut rng, 4, FRAME_WIDTH));
        let g = build_grid(&e, &y).unwrap();
        assert_eq!(g.shape(), &[3, 4, 215]);
        for i in 0..3 {
            for j in 0..4 {
                let cell = &g.data()[(i * 4 + j) * 215..][..215];
                assert_eq!(&cell[..128], e.row(i));
                assert_eq!(&cell[128..], y.row(j));
            }
        }
        let one = build_grid(&random(&mut rng, 1, 128), &random(&mut rng, 1, FRAME_WIDTH)).unwrap();
        assert_eq!(one.shape(), &[1, 1, 215]);
    }

    struct Batch {
        words: Tensor,
        word_segs: Vec<Segment>,
        frames: Tensor,
        frame_segs: Vec<Segment>,
        sent: Tensor,
    }

    fn batch(rng: &mut ChaCha8Rng) -> Batch {
        let (nw, nf) = ([2, 4], [3, 5]);
        Batch {
            words: random(rng, 6, 8),
            word_segs: segments(&nw),
            frames: random(rng, 8, FRAME_WIDTH),
            frame_segs: segments(&nf),
            sent: random(rng, 2, 8),
        }
    }

    fn all_logits(c: &Critics, s: &mut Session, b: &Batch) -> (Tensor, RowLogits, RowLogits) {
        let w = s.constant(b.words.clone());
        let f = s.constant(b.frames.clone());
        let sv = s.constant(b.sent.clone());
        let l1 = c.d1_logits(s, w, &b.word_segs, f, &b.frame_segs).unwrap();
        let l2 = c.d2_logits(s, sv, f, &b.frame_segs).unwrap();
        let l3 = c.d3_logits(s, sv, f, &b.frame_segs).unwrap();
        (s.value(l1).clone(), l2, l3)
    }

    #[test]
    fn outputs_are_probabilities_with_expected_counts() {
        let (c, ps, mut nb) = fixture(4, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = batch(&mut rng);
        for train in [true, false] {
            let mut g = Graph::new();
            let mut s = Session::new(&mut g, &ps, &mut nb, train, None);
            let (l1, l2, l3) = all_logits(&c, &mut s, &b);
            assert_eq!(l1.shape(), &[2, 1]);
            assert_eq!(s.value(l2.logits).shape(), &[2 * 8, 1]);
            assert_eq!(l2.owner, [vec![0; 6], vec![1; 10]].concat());
            // 2(m-1) transitions per clip
            assert_eq!(s.value(l3.logits).shape(), &[2 * 2 + 2 * 4, 1]);
            assert_eq!(l3.owner.iter().filter(|&&o| o == 1).count(), 8);
            for p in probabilities(&l1)
                .into_iter()
                .chain(probabilities(s.value(l2.logits)))
                .chain(probabilities(s.value(l3.logits)))
            {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn zero_heads_give_one_half() {
        let (c, mut ps, mut nb) = fixture(6, 1.0);
        for lin in [c.d1_head(), &c.d2.fc2, &c.d3.fc2] {
            ps.get_mut(lin.w).value.data_mut().fill(0.0);
            ps.get_mut(lin.b.unwrap()).value.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = batch(&mut rng);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &ps, &mut nb, true, None);
        let (l1, l2, l3) = all_logits(&c, &mut s, &b);
        let all: Vec<f64> = probabilities(&l1)
            .into_iter()
            .chain(probabilities(s.value(l2.logits)))
            .chain(probabilities(s.value(l3.logits)))
            .collect();
        assert!(all.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn branch_parameters_are_not_shared() {
        let (c, ps, mut nb) = fixture(8, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frame = random(&mut rng, 1, FRAME_WIDTH);
        let mut swapped = frame.clone();
        // exchange left and right arm joints of actor A
        for (l, r) in [(2, 8), (3, 9), (4, 10)] {
            for c in 0..3 {
                swapped.data_mut().swap(3 * l + c, 3 * r + c);
            }
        }
        let sent = random(&mut rng, 1, 8);
        let run = |nb: &mut NormBank, f: &Tensor| {
            let mut g = Graph::new();
            let mut s = Session::new(&mut g, &ps, nb, false, None);
            let (fv, sv) = (s.constant(f.clone()), s.constant(sent.clone()));
            let out = c.d2_logits(&mut s, sv, fv, &[(0, 1)]).unwrap();
            s.value(out.logits).at(0, 0)
        };
        assert_ne!(run(&mut nb, &frame), run(&mut nb, &swapped));
    }

    #[test]
    fn canvas_smaller_than_receptive_field() {
        let cfg = CriticConfig {
            kernel: 9,
            padding: 0,
            ..toy_critic()
        };
        let mut ps = ParamSet::new();
        let mut nb = NormBank::default();
        assert!(matches!(
            Critics::build(&cfg, &toy_config(), &mut ps, &mut nb),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn default_parameter_count() {
        let gen = GeneratorConfig::default();
        let cfg = CriticConfig::default();
        let mut ps = ParamSet::new();
        let mut nb = NormBank::default();
        Critics::build(&cfg, &gen, &mut ps, &mut nb).unwrap();
        let conv = 9 * 215 * 128 + 128 + 2 * (9 * 128 * 128 + 128) + 3 * 2 * 128;
        // 43×26 → 22×13 → 11×7 → 6×4
        let d1 = conv + 6 * 4 * 128 * 256 + 256 + 256 + 1;
        let branch = 15 * 32 + 32;
        let d2 = 4 * branch + (4 * 32 + 128) * 128 + 128 + 128 + 1;
        let d3 = 8 * branch + (8 * 32 + 128) * 128 + 128 + 128 + 1;
        assert_eq!(ps.count(Group::Critic), d1 + d2 + d3);
        assert!(ps.iter().all(|(_, p)| p.name.starts_with("critic.")));
    }

    fn check(which: usize, train: bool) -> f64 {
        let (c, ps, mut nb) = fixture(10 + which as u64, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = batch(&mut rng);
        let mut inputs: Vec<Tensor> = ps.iter().map(|(_, p)| p.value.clone()).collect();
        let np = inputs.len();
        inputs.extend([b.words.clone(), b.frames.clone(), b.sent.clone()]);
        let opts = GradCheckOptions {
            coords_per_tensor: Some(4),
            ..GradCheckOptions::default()
        };
        let report = grad_check(&inputs, &opts, |g, vars| {
            let mut s = Session::prebound(g, &ps, &mut nb, &vars[..np], train)?;
            let (w, f, sv) = (vars[np], vars[np + 1], vars[np + 2]);
            let logits = match which {
                1 => c.d1_logits(&mut s, w, &b.word_segs, f, &b.frame_segs)?,
                2 => c.d2_logits(&mut s, sv, f, &b.frame_segs)?.logits,
                _ => c.d3_logits(&mut s, sv, f, &b.frame_segs)?.logits,
            };
            let sp = s.g.softplus(logits);
            Ok(s.g.mean(sp))
        })
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn gradients_match_finite_differences() {
        for which in 1..=3 {
            for train in [true, false] {
                let err = check(which, train);
                assert!(err < 1e-5, "D{which} train={train}: {err}");
            }
        }
    }
}
