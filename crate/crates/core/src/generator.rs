//! Encoder-decoder generator: caption tokens plus a noise vector become a
//! sequence of action frames in one forward pass.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::motiondata::{ProcessedAction, FRAME_WIDTH, MAX_ACTION_LEN};
use crate::nn::{
    causal_mask, segments, Attention, Builder, FeedForward, Group, Init, Linear, Norm, NormBank, NormKind, ParamId,
    ParamSet, Segment, Session,
};
use crate::textproc::{positional_encoding, CaptionIds, MAX_CAPTION_LEN, MAX_VOCAB};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// model width
    pub d: usize,
    /// noise width
    pub d_z: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_h: usize,
    /// feed-forward inner width
    pub d_p: usize,
    /// frame width
    pub d_f: usize,
    pub m_max: usize,
    pub n_max: usize,
    pub vocab_size: usize,
    pub norm: NormKind,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d: 128,
            d_z: 128,
            layers: 4,
            heads: 8,
            d_h: 64,
            d_p: 512,
            d_f: FRAME_WIDTH,
            m_max: MAX_ACTION_LEN,
            n_max: MAX_CAPTION_LEN,
            vocab_size: MAX_VOCAB,
            norm: NormKind::Batch,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d", self.d),
            ("d_z", self.d_z),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_h", self.d_h),
            ("d_p", self.d_p),
            ("m_max", self.m_max),
            ("n_max", self.n_max),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator.{name} must be positive")));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!("generator.d must be even, got {}", self.d)));
        }
        if self.d_f != FRAME_WIDTH {
            return Err(Error::Config(format!(
                "generator.d_f must be {FRAME_WIDTH}, got {}",
                self.d_f
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "generator.vocab_size must leave room for <pad> and <unk>".into(),
            ));
        }
        Ok(())
    }
}

struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
}

struct RefineLayer {
    self_attn: Attention,
    norm1: Norm,
    cross: Attention,
    norm2: Norm,
    ff: FeedForward,
    norm3: Norm,
}

/// Encoder outputs for a batch, with sequences stacked as rows.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// word representations, `[Σn, d]`
    pub w: Var,
    /// sentence representations, `[batch, d]`
    pub s: Var,
    pub segs: Vec<Segment>,
    /// real token ids in stacked order
    pub tokens: Vec<usize>,
}

impl Encoded {
    pub fn batch(&self) -> usize {
        self.segs.len()
    }
}

pub struct Generator {
    cfg: GeneratorConfig,
    pe: Tensor,
    pub embed: ParamId,
    encoder: Vec<EncoderLayer>,
    query: Linear,
    init_cross: Attention,
    init_norm1: Norm,
    init_ff: FeedForward,
    init_norm2: Norm,
    refine: Vec<RefineLayer>,
    output: FeedForward,
}

impl Generator {
    /// Registers every generator tensor under the `gen.` prefix.
    pub fn build(cfg: &GeneratorConfig, params: &mut ParamSet, norms: &mut NormBank) -> Result<Self> {
        cfg.validate()?;
        let (d, kind) = (cfg.d, cfg.norm);
        let mut b = Builder {
            params,
            norms,
            group: Group::Generator,
        };
        let embed = b.tensor("gen.embed.0.table", &[cfg.vocab_size, d], Init::Normal);
        let encoder = (0..cfg.layers)
            .map(|i| {
                let p = format!("gen.encoder.{i}");
                EncoderLayer {
                    attn: Attention::new(&mut b, &format!("{p}.attn"), d, cfg.heads, cfg.d_h),
                    norm1: Norm::new(&mut b, &format!("{p}.norm1"), d, kind),
                    ff: FeedForward::new(&mut b, &format!("{p}.ff"), d, cfg.d_p, d),
                    norm2: Norm::new(&mut b, &format!("{p}.norm2"), d, kind),
                }
            })
            .collect();
        let query = Linear::new(&mut b, "gen.decoder.0.query", d + cfg.d_z, cfg.m_max * d, true);
        let init_cross = Attention::new(&mut b, "gen.decoder.0.cross", d, cfg.heads, cfg.d_h);
        let init_norm1 = Norm::new(&mut b, "gen.decoder.0.norm1", d, kind);
        let init_ff = FeedForward::new(&mut b, "gen.decoder.0.ff", d, cfg.d_p, d);
        let init_norm2 = Norm::new(&mut b, "gen.decoder.0.norm2", d, kind);
        let refine = (1..cfg.layers)
            .map(|i| {
                let p = format!("gen.decoder.{i}");
                RefineLayer {
                    self_attn: Attention::new(&mut b, &format!("{p}.self"), d, cfg.heads, cfg.d_h),
                    norm1: Norm::new(&mut b, &format!("{p}.norm1"), d, kind),
                    cross: Attention::new(&mut b, &format!("{p}.cross"), d, cfg.heads, cfg.d_h),
                    norm2: Norm::new(&mut b, &format!("{p}.norm2"), d, kind),
                    ff: FeedForward::new(&mut b, &format!("{p}.ff"), d, cfg.d_p, d),
                    norm3: Norm::new(&mut b, &format!("{p}.norm3"), d, kind),
                }
            })
            .collect();
        let output = FeedForward::new(&mut b, "gen.output.0.ff", d, cfg.d_p, cfg.d_f);
        Ok(Generator {
            pe: positional_encoding(cfg.n_max.max(cfg.m_max), d)?,
            cfg: cfg.clone(),
            embed,
            encoder,
            query,
            init_cross,
            init_norm1,
            init_ff,
            init_norm2,
            refine,
            output,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    fn positions(&self, lengths: &[usize]) -> Result<Tensor> {
        let d = self.cfg.d;
        let mut data = Vec::with_capacity(lengths.iter().sum::<usize>() * d);
        for &n in lengths {
            for t in 0..n {
                data.extend_from_slice(self.pe.row(t));
            }
        }
        Tensor::new(vec![data.len() / d, d], data)
    }

    /// Embeds the real tokens of each caption, runs the encoder stack and
    /// mean-pools each caption into a sentence representation. Padding
    /// never enters the computation.
    pub fn encode(&self, s: &mut Session, captions: &[CaptionIds]) -> Result<Encoded> {
        if captions.is_empty() {
            return Err(Error::Contract("empty caption batch".into()));
        }
        let mut tokens = Vec::new();
        let mut lengths = Vec::with_capacity(captions.len());
        for c in captions {
            let real = c.real();
            if real.is_empty() {
                return Err(Error::Contract("caption has no tokens".into()));
            }
            if real.len() > self.cfg.n_max {
                return Err(Error::Config(format!(
                    "caption has {} tokens, at most {} supported",
                    real.len(),
                    self.cfg.n_max
                )));
            }
            if let Some(&bad) = real.iter().find(|&&t| t >= self.cfg.vocab_size) {
                return Err(Error::Index {
                    index: bad,
                    bound: self.cfg.vocab_size,
                });
            }
            tokens.extend_from_slice(real);
            lengths.push(real.len());
        }
        let segs = segments(&lengths);
        let table = s.param(self.embed);
        let x = s.g.gather_rows(table, &tokens)?;
        let pe = s.constant(self.positions(&lengths)?);
        let mut x = s.g.add(x, pe)?;
        for layer in &self.encoder {
            let a = layer.attn.forward_segments(s, x, x, x, &segs, &segs, |_| None)?;
            x = layer.norm1.residual(s, x, a)?;
            let f = layer.ff.forward(s, x)?;
            x = layer.norm2.residual(s, x, f)?;
        }
        let total = tokens.len();
        let mut avg = vec![0.0; captions.len() * total];
        for (b, &(start, n)) in segs.iter().enumerate() {
            for j in start..start + n {
                avg[b * total + j] = 1.0 / n as f64;
            }
        }
        let avg = s.constant(Tensor::new(vec![captions.len(), total], avg)?);
        let sent = s.g.matmul(avg, x)?;
        Ok(Encoded {
            w: x,
            s: sent,
            segs,
            tokens,
        })
    }

    fn decoder_segments(&self, batch: usize, m: usize) -> Result<Vec<Segment>> {
        if m == 0 || m > self.cfg.m_max {
            return Err(Error::Config(format!(
                "action length {m} outside 1..={}",
                self.cfg.m_max
            )));
        }
        Ok(segments(&vec![m; batch]))
    }

    /// `[s; z]` through the query layer gives `m_max` queries per sample; the
    /// first `m` receive positional encodings and attend over the words.
    /// `z` is `[batch, d_z]`. Returns `[batch·m, d]`.
    pub fn init_features(&self, s: &mut Session, enc: &Encoded, z: Var, m: usize) -> Result<Var> {
        let batch = enc.batch();
        let dec = self.decoder_segments(batch, m)?;
        if s.value(z).shape() != [batch, self.cfg.d_z] {
            return Err(Error::shape("noise", s.value(z).shape(), &[batch, self.cfg.d_z]));
        }
        let sz = s.g.concat_cols(&[enc.s, z])?;
        let q = self.query.forward(s, sz)?;
        let q = s.g.reshape(q, &[batch * self.cfg.m_max, self.cfg.d])?;
        let keep: Vec<usize> = (0..batch)
            .flat_map(|b| (0..m).map(move |t| b * self.cfg.m_max + t))
            .collect();
        let q = s.g.gather_rows(q, &keep)?;
        let pe = s.constant(self.positions(&vec![m; batch])?);
        let h = s.g.add(q, pe)?;
        let a = self
            .init_cross
            .forward_segments(s, h, enc.w, enc.w, &dec, &enc.segs, |_| None)?;
        let h = self.init_norm1.residual(s, h, a)?;
        let f = self.init_ff.forward(s, h)?;
        self.init_norm2.residual(s, h, f)
    }

    /// Causal self-attention, cross-attention over the words, feed-forward;
    /// once per refine layer. `h` is `[batch·m, d]`.
    pub fn refine(&self, s: &mut Session, h: Var, enc: &Encoded, m: usize) -> Result<Var> {
        let dec = self.decoder_segments(enc.batch(), m)?;
        let mask = causal_mask(m)?;
        let mut h = h;
        for layer in &self.refine {
            let a = layer
                .self_attn
                .forward_segments(s, h, h, h, &dec, &dec, |_| Some(mask.clone()))?;
            h = layer.norm1.residual(s, h, a)?;
            let c = layer
                .cross
                .forward_segments(s, h, enc.w, enc.w, &dec, &enc.segs, |_| None)?;
            h = layer.norm2.residual(s, h, c)?;
            let f = layer.ff.forward(s, h)?;
            h = layer.norm3.residual(s, h, f)?;
        }
        Ok(h)
    }

    /// Final feed-forward to frame width; no residual, no normalization.
    pub fn project(&self, s: &mut Session, h: Var) -> Result<Var> {
        self.output.forward(s, h)
    }

    /// Full pass. Returns the encoder outputs and `[batch·m, d_f]` frames.
    pub fn forward(&self, s: &mut Session, captions: &[CaptionIds], z: Var, m: usize) -> Result<(Encoded, Var)> {
        let enc = self.encode(s, captions)?;
        let h = self.init_features(s, &enc, z, m)?;
        let h = self.refine(s, h, &enc, m)?;
        let frames = self.project(s, h)?;
        Ok((enc, frames))
    }

    /// Eval-mode generation of one clip.
    pub fn generate(
        &self,
        params: &ParamSet,
        norms: &mut NormBank,
        ids: &CaptionIds,
        z: &[f64],
        m: usize,
    ) -> Result<ProcessedAction> {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, params, norms, false, None);
        let zt = s.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let (_, frames) = self.forward(&mut s, std::slice::from_ref(ids), zt, m)?;
        ProcessedAction::from_flat(s.value(frames).data().to_vec())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckOptions};
    use crate::textproc::PAD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_config() -> GeneratorConfig {
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

    fn fixture(cfg: &GeneratorConfig, seed: u64) -> (Generator, ParamSet, NormBank) {
        let mut ps = ParamSet::new();
        let mut nb = NormBank::default();
        let gen = Generator::build(cfg, &mut ps, &mut nb).unwrap();
        ps.initialize(seed);
        // larger weights than the training init so that differences show
        for id in ps.ids().collect::<Vec<_>>() {
            let p = ps.get_mut(id);
            if p.init == Init::Normal {
                p.value.data_mut().iter_mut().for_each(|v| *v *= 15.0);
            }
        }
        (gen, ps, nb)
    }

    fn ids(v: &[usize]) -> CaptionIds {
        CaptionIds::new(v.to_vec()).unwrap()
    }

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn parameter_count_formula() {
        let cfg = GeneratorConfig::default();
        let mut ps = ParamSet::new();
        let mut nb = NormBank::default();
        Generator::build(&cfg, &mut ps, &mut nb).unwrap();
        let (d, hd, dp, df) = (cfg.d, cfg.heads * cfg.d_h, cfg.d_p, cfg.d_f);
        let attn = 4 * d * hd;
        let ff = d * dp + dp + dp * d + d;
        let norm = 2 * d;
        let encoder = cfg.layers * (attn + ff + 2 * norm);
        let query = (d + cfg.d_z) * cfg.m_max * d + cfg.m_max * d;
        let first = attn + ff + 2 * norm;
        let refine = (cfg.layers - 1) * (2 * attn + ff + 3 * norm);
        let out = d * dp + dp + dp * df + df;
        let expect = cfg.vocab_size * d + encoder + query + first + refine + out;
        assert_eq!(ps.count(Group::Generator), expect);
        assert_eq!(ps.count(Group::Critic), 0);
        assert_eq!(nb.len(), 2 * cfg.layers + 2 + 3 * (cfg.layers - 1));
        assert!(ps
            .iter()
            .all(|(_, p)| p.name.starts_with("gen.") && p.name.split('.').count() >= 4));
    }

    #[test]
    fn encoder_shapes_and_mean_pool() {
        let cfg = GeneratorConfig {
            vocab_size: 20,
            ..GeneratorConfig::default()
        };
        let (gen, ps, mut nb) = fixture(&cfg, 1);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &ps, &mut nb, false, None);
        let enc = gen.encode(&mut s, &[ids(&[2, 5, 7]), ids(&[3, 4])]).unwrap();
        let w = s.value(enc.w).clone();
        let sent = s.value(enc.s).clone();
        assert_eq!(w.shape(), &[5, 128]);
        assert_eq!(sent.shape(), &[2, 128]);
        for c in 0..128 {
            let m0 = (w.at(0, c) + w.at(1, c) + w.at(2, c)) / 3.0;
            let m1 = (w.at(3, c) + w.at(4, c)) / 2.0;
            assert!((sent.at(0, c) - m0).abs() <= 1e-12 * m0.abs().max(1.0));
            assert!((sent.at(1, c) - m1).abs() <= 1e-12 * m1.abs().max(1.0));
        }
    }

    #[test]
    fn padding_changes_nothing() {
        let cfg = toy_config();
        let (gen, ps, mut nb) = fixture(&cfg, 2);
        let short = ids(&[3, 6, 2]);
        let padded = short.padded_to(6).unwrap();
        assert_eq!(padded.ids.len(), 6);
        assert!(padded.ids[3..].iter().all(|&t| t == PAD));
        let z = [0.3, -0.2, 0.9, 0.1];
        let a = gen.generate(&ps, &mut nb, &short, &z, 4).unwrap();
        let b = gen.generate(&ps, &mut nb, &padded, &z, 4).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn eval_generation_is_deterministic_and_noise_matters() {
        let cfg = toy_config();
        let (gen, ps, mut nb) = fixture(&cfg, 3);
        let c = ids(&[4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (z1, z2) = (noise(&mut rng, 4), noise(&mut rng, 4));
        let a = gen.generate(&ps, &mut nb, &c, &z1, 5).unwrap();
        let again = gen.generate(&ps, &mut nb, &c, &z1, 5).unwrap();
        let b = gen.generate(&ps, &mut nb, &c, &z2, 5).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.len(), 5);
        assert_eq!(a.frame(0).len(), FRAME_WIDTH);
        let dist: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn init_features_differ_with_noise() {
        let cfg = toy_config();
        let (gen, ps, mut nb) = fixture(&cfg, 4);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &ps, &mut nb, false, None);
        let enc = gen.encode(&mut s, &[ids(&[2, 3])]).unwrap();
        let z1 = s.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let z2 = s.constant(Tensor::new(vec![1, 4], vec![0.0, -1.0, 0.0, 0.5]).unwrap());
        let h1 = gen.init_features(&mut s, &enc, z1, 3).unwrap();
        let h2 = gen.init_features(&mut s, &enc, z2, 3).unwrap();
        assert_eq!(s.value(h1).shape(), &[3, 8]);
        let dist: f64 = s
            .value(h1)
            .data()
            .iter()
            .zip(s.value(h2).data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn limits_are_enforced() {
        let cfg = toy_config();
        let (gen, ps, mut nb) = fixture(&cfg, 5);
        let z = [0.0; 4];
        let long = ids(&[2; 7]);
        assert!(matches!(
            gen.generate(&ps, &mut nb, &long, &z, 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            gen.generate(&ps, &mut nb, &ids(&[2]), &z, 6),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            gen.generate(&ps, &mut nb, &ids(&[12]), &z, 2),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            gen.generate(&ps, &mut nb, &ids(&[2]), &[0.0; 3], 2),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn refine_is_causal() {
        assert!(crate::selfcheck::causality_deviation(20, 11).unwrap() < 1e-9);
    }

    #[test]
    fn single_layer_refine_is_identity() {
        let cfg = GeneratorConfig {
            layers: 1,
            ..toy_config()
        };
        let (gen, ps, mut nb) = fixture(&cfg, 6);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &ps, &mut nb, false, None);
        let enc = gen.encode(&mut s, &[ids(&[2, 3])]).unwrap();
        let h = s.constant(Tensor::full(&[3, 8], 0.25));
        let out = gen.refine(&mut s, h, &enc, 3).unwrap();
        assert_eq!(s.value(out), s.value(h));
    }

    #[test]
    fn zero_output_weights_give_bias() {
        let cfg = toy_config();
        let (gen, mut ps, mut nb) = fixture(&cfg, 7);
        ps.get_mut(gen.output.outer.w).value.data_mut().fill(0.0);
        let bias: Vec<f64> = (0..FRAME_WIDTH).map(|i| i as f64 * 0.1).collect();
        ps.get_mut(gen.output.outer.b.unwrap())
            .value
            .data_mut()
            .copy_from_slice(&bias);
        let a = gen.generate(&ps, &mut nb, &ids(&[2, 3]), &[0.5; 4], 3).unwrap();
        for f in a.frames() {
            assert_eq!(f, bias.as_slice());
        }
    }

    #[test]
    fn layer_norm_variant_builds_and_runs() {
        let cfg = GeneratorConfig {
            norm: NormKind::Layer,
            ..toy_config()
        };
        let (gen, ps, mut nb) = fixture(&cfg, 8);
        let a = gen.generate(&ps, &mut nb, &ids(&[2, 3]), &[0.5; 4], 3).unwrap();
        assert!(a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = toy_config();
        let (gen, ps, mut nb) = fixture(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target: Vec<f64> = noise(&mut rng, 3 * FRAME_WIDTH);
        let z = noise(&mut rng, 4);
        let inputs: Vec<Tensor> = ps.iter().map(|(_, p)| p.value.clone()).collect();
        let opts = GradCheckOptions {
            coords_per_tensor: Some(3),
            ..GradCheckOptions::default()
        };
        for train in [false, true] {
            let report = grad_check(&inputs, &opts, |g, vars| {
                let mut s = Session::prebound(g, &ps, &mut nb, vars, train)?;
                let zv = s.constant(Tensor::new(vec![1, 4], z.clone())?);
                let (_, frames) = gen.forward(&mut s, &[ids(&[2, 5])], zv, 3)?;
                let t = s.constant(Tensor::new(vec![3, FRAME_WIDTH], target.clone())?);
                let diff = s.g.sub(frames, t)?;
                let sq = s.g.mul(diff, diff)?;
                Ok(s.g.mean(sq))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "train={train}: {report:?}");
        }
    }
}
