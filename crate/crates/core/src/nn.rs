//! Named parameters, normalization state, and the layers shared by the
//! generator and the critics. A [`Session`] binds parameters into one
//! forward graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NormState, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Which adversary owns a parameter. Each group has its own optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Generator,
    Critic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    /// `module.layer.index.tensor`
    pub name: String,
    pub group: Group,
    pub init: Init,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, shape: &[usize], init: Init) -> ParamId {
        let value = match init {
            Init::Ones => Tensor::full(shape, 1.0),
            _ => Tensor::zeros(shape),
        };
        self.params.push(Param {
            name: name.into(),
            group,
            init,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalars in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Draws every `Normal` tensor i.i.d. from N(0, [`INIT_STD`]²) in
    /// registration order; resets the others.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for p in &mut self.params {
            let fill = match p.init {
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
                Init::Normal => {
                    p.value.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                    continue;
                }
            };
            p.value.data_mut().iter_mut().for_each(|v| *v = fill);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct NormEntry {
    pub name: String,
    pub group: Group,
    pub state: NormState,
}

/// Running statistics of every batch-norm layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormBank {
    entries: Vec<NormEntry>,
}

impl NormBank {
    pub fn add(&mut self, name: impl Into<String>, group: Group, features: usize) -> NormId {
        self.entries.push(NormEntry {
            name: name.into(),
            group,
            state: NormState::new(features),
        });
        NormId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NormEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [NormEntry] {
        &mut self.entries
    }

    pub fn reset(&mut self) {
        for e in &mut self.entries {
            e.state = NormState::new(e.state.features());
        }
    }
}

/// One forward pass. Parameters become graph leaves on first use: leaves
/// with gradients for the trainable group, constants otherwise. Running
/// statistics are only committed for the trainable group; other groups
/// normalize with batch statistics but leave their state untouched.
pub struct Session<'a> {
    pub g: &'a mut Graph,
    params: &'a ParamSet,
    norms: &'a mut NormBank,
    vars: Vec<Option<Var>>,
    scratch: Vec<Option<NormState>>,
    train: bool,
    trainable: Option<Group>,
}

impl<'a> Session<'a> {
    pub fn new(
        g: &'a mut Graph,
        params: &'a ParamSet,
        norms: &'a mut NormBank,
        train: bool,
        trainable: Option<Group>,
    ) -> Self {
        let (np, nn) = (params.len(), norms.len());
        Session {
            g,
            params,
            norms,
            vars: vec![None; np],
            scratch: vec![None; nn],
            train,
            trainable,
        }
    }

    /// Binds every parameter to a caller-made variable, in registration
    /// order. Used by gradient checks; running statistics are not committed.
    pub fn prebound(
        g: &'a mut Graph,
        params: &'a ParamSet,
        norms: &'a mut NormBank,
        vars: &[Var],
        train: bool,
    ) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::shape("prebound session", &[params.len()], &[vars.len()]));
        }
        let mut s = Session::new(g, params, norms, train, None);
        s.vars = vars.iter().copied().map(Some).collect();
        Ok(s)
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = &self.params.params[id.0];
        let v = if Some(p.group) == self.trainable {
            self.g.leaf(p.value.clone())
        } else {
            self.g.constant(p.value.clone())
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    pub fn batchnorm(&mut self, x: Var, gamma: ParamId, beta: ParamId, state: NormId) -> Result<Var> {
        let (gv, bv) = (self.param(gamma), self.param(beta));
        let train = self.train;
        // the state borrow is disjoint from the graph
        let st = {
            let entry = &mut self.norms.entries[state.0];
            if Some(entry.group) == self.trainable {
                &mut entry.state
            } else {
                self.scratch[state.0].get_or_insert_with(|| entry.state.clone())
            }
        };
        self.g.batchnorm(x, gv, bv, st, train)
    }

    pub fn layernorm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let (gv, bv) = (self.param(gamma), self.param(beta));
        self.g.layernorm(x, gv, bv, NORM_EPS)
    }

    /// Runs backward from `loss` and returns the gradient of every bound
    /// trainable parameter, indexed by [`ParamId`].
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        self.g.backward(loss)?;
        Ok(self.gradients())
    }

    pub fn gradients(&self) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| self.g.grad(v).map(<[f64]>::to_vec)))
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn running_state(&self, id: NormId) -> NormState {
        match &self.scratch[id.0] {
            Some(st) => st.clone(),
            None => self.norms.entries[id.0].state.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Batch,
    Layer,
}

/// Registers tensors under a common name prefix.
pub struct Builder<'b> {
    pub params: &'b mut ParamSet,
    pub norms: &'b mut NormBank,
    pub group: Group,
}

impl Builder<'_> {
    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.params.add(name, self.group, shape, init)
    }
}

/// `x W + b`
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = b.tensor(&format!("{name}.w"), &[fan_in, fan_out], Init::Normal);
        let bias = bias.then(|| b.tensor(&format!("{name}.b"), &[fan_out], Init::Zeros));
        Linear {
            w,
            b: bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let y = s.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Position-wise feed-forward: linear, GELU, linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        FeedForward {
            inner: Linear::new(b, &format!("{name}.fc1"), d_in, d_hidden, true),
            outer: Linear::new(b, &format!("{name}.fc2"), d_hidden, d_out, true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.inner.forward(s, x)?;
        let h = s.g.gelu(h);
        self.outer.forward(s, h)
    }
}

/// Affine normalization after a residual sum.
#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: NormId,
}

impl Norm {
    pub fn new(b: &mut Builder, name: &str, features: usize, kind: NormKind) -> Self {
        Norm {
            kind,
            gamma: b.tensor(&format!("{name}.gamma"), &[features], Init::Ones),
            beta: b.tensor(&format!("{name}.beta"), &[features], Init::Zeros),
            state: b.norms.add(name, b.group, features),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self.kind {
            NormKind::Batch => s.batchnorm(x, self.gamma, self.beta, self.state),
            NormKind::Layer => s.layernorm(x, self.gamma, self.beta),
        }
    }

    /// `norm(x + y)`
    pub fn residual(&self, s: &mut Session, x: Var, y: Var) -> Result<Var> {
        let sum = s.g.add(x, y)?;
        self.forward(s, sum)
    }
}

/// Additive mask for `m` steps: 0 where `j <= i`, −∞ above the diagonal.
pub fn causal_mask(m: usize) -> Result<Tensor> {
    if m == 0 {
        return Err(Error::Contract("causal mask needs at least one step".into()));
    }
    let data = (0..m)
        .flat_map(|i| (0..m).map(move |j| if j <= i { 0.0 } else { f64::NEG_INFINITY }))
        .collect();
    Tensor::new(vec![m, m], data)
}

/// Row range `[start, start + len)` of one sequence inside a stacked batch.
pub type Segment = (usize, usize);

/// Consecutive segments for the given lengths.
pub fn segments(lengths: &[usize]) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&n| {
            let seg = (start, n);
            start += n;
            seg
        })
        .collect()
}

/// Multi-head scaled dot-product attention with per-head slices of shared
/// `[d, H·d_h]` projections and an output projection back to `d`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_h: usize,
    pub d: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, d: usize, heads: usize, d_h: usize) -> Self {
        let hd = heads * d_h;
        Attention {
            wq: b.tensor(&format!("{name}.wq"), &[d, hd], Init::Normal),
            wk: b.tensor(&format!("{name}.wk"), &[d, hd], Init::Normal),
            wv: b.tensor(&format!("{name}.wv"), &[d, hd], Init::Normal),
            wo: b.tensor(&format!("{name}.wo"), &[hd, d], Init::Normal),
            heads,
            d_h,
            d,
        }
    }

    /// Attention of one query sequence over one key/value sequence, with an
    /// optional additive `n_q × n_k` mask.
    pub fn forward(&self, s: &mut Session, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
        let nq = s.value(q).rows();
        let nk = s.value(k).rows();
        self.forward_segments(s, q, k, v, &[(0, nq)], &[(0, nk)], |_| mask.cloned())
    }

    /// Batched form: query segment `i` attends only to key segment `i`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_segments(
        &self,
        s: &mut Session,
        q: Var,
        k: Var,
        v: Var,
        q_segs: &[Segment],
        k_segs: &[Segment],
        mask_for: impl Fn(usize) -> Option<Tensor>,
    ) -> Result<Var> {
        if q_segs.len() != k_segs.len() {
            return Err(Error::shape("attention segments", &[q_segs.len()], &[k_segs.len()]));
        }
        for x in [q, k, v] {
            if s.value(x).cols() != self.d {
                return Err(Error::shape("attention input", s.value(x).shape(), &[self.d]));
            }
        }
        let (wq, wk, wv, wo) = (s.param(self.wq), s.param(self.wk), s.param(self.wv), s.param(self.wo));
        let qp = s.g.matmul(q, wq)?;
        let kp = s.g.matmul(k, wk)?;
        let vp = s.g.matmul(v, wv)?;
        let scale = 1.0 / (self.d_h as f64).sqrt();
        let mut outs = Vec::with_capacity(q_segs.len());
        for (i, (&(q0, nq), &(k0, nk))) in q_segs.iter().zip(k_segs).enumerate() {
            let mask = match mask_for(i) {
                Some(m) if m.shape() != [nq, nk] => {
                    return Err(Error::shape("attention mask", m.shape(), &[nq, nk]));
                }
                Some(m) => Some(s.constant(m)),
                None => None,
            };
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let c0 = h * self.d_h;
                let qh = s.g.slice(qp, q0, nq, c0, self.d_h)?;
                let kh = s.g.slice(kp, k0, nk, c0, self.d_h)?;
                let vh = s.g.slice(vp, k0, nk, c0, self.d_h)?;
                let kt = s.g.transpose(kh)?;
                let scores = s.g.matmul(qh, kt)?;
                let mut scores = s.g.scale(scores, scale);
                if let Some(m) = mask {
                    scores = s.g.add(scores, m)?;
                }
                let weights = s.g.softmax(scores)?;
                heads.push(s.g.matmul(weights, vh)?);
            }
            outs.push(if heads.len() == 1 {
                heads[0]
            } else {
                s.g.concat_cols(&heads)?
            });
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            s.g.concat_rows(&outs)?
        };
        s.g.matmul(cat, wo)
    }
}
