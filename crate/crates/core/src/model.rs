//! Decoder-only toy transformer with one gated adapter on each of the six
//! host weights of every block.
//!
//! Layout is pre-norm: `h = x + MHA(LN(x))`, `h = h + FFN(LN(h))`, then a final
//! normalization and unembedding. Layer norms carry no affine parameters and
//! every base tensor is frozen.

use alora_autodiff::{Float, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{AloraError, Result};
use crate::lora::{GateState, GatedLoraAdapter};
use crate::regularizers::HardConcreteGate;

pub const MODULES_PER_BLOCK: usize = 6;
pub const BASE_INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; MODULES_PER_BLOCK] = [
        ModuleKind::Query,
        ModuleKind::Key,
        ModuleKind::Value,
        ModuleKind::Output,
        ModuleKind::Up,
        ModuleKind::Down,
    ];

    pub fn short(self) -> &'static str {
        match self {
            ModuleKind::Query => "Q",
            ModuleKind::Key => "K",
            ModuleKind::Value => "V",
            ModuleKind::Output => "O",
            ModuleKind::Up => "U",
            ModuleKind::Down => "D",
        }
    }
}

/// Flat adapter index `layer · 6 + kind`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModuleId(pub usize);

impl ModuleId {
    pub fn new(layer: usize, kind: ModuleKind) -> Self {
        ModuleId(layer * MODULES_PER_BLOCK + kind as usize)
    }

    pub fn layer(self) -> usize {
        self.0 / MODULES_PER_BLOCK
    }

    pub fn kind(self) -> ModuleKind {
        ModuleKind::ALL[self.0 % MODULES_PER_BLOCK]
    }

    /// e.g. `L1.V`
    pub fn label(self) -> String {
        format!("L{}.{}", self.layer(), self.kind().short())
    }
}

impl std::fmt::Display for ModuleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            vocab: 32,
            max_seq_len: 24,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.layers", self.layers),
            ("model.d_model", self.d_model),
            ("model.heads", self.heads),
            ("model.d_ff", self.d_ff),
            ("model.vocab", self.vocab),
            ("model.max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(AloraError::config(field, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(AloraError::config(
                "model.heads",
                format!("{} heads do not divide d_model = {}", self.heads, self.d_model),
            ));
        }
        Ok(())
    }

    pub fn module_count(&self) -> usize {
        self.layers * MODULES_PER_BLOCK
    }

    /// `(d_in, d_out)` of the host weight for a module.
    pub fn module_shape(&self, kind: ModuleKind) -> (usize, usize) {
        match kind {
            ModuleKind::Up => (self.d_model, self.d_ff),
            ModuleKind::Down => (self.d_ff, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }
}

/// Frozen weights of one block. Matrices act on row vectors: `y = x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<S> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
    pub b_up: Tensor<S>,
    pub b_down: Tensor<S>,
}

impl<S: Float> BlockWeights<S> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (d, f) = (config.d_model, config.d_ff);
        Self {
            w_q: Tensor::randn([d, d], BASE_INIT_STD, rng),
            w_k: Tensor::randn([d, d], BASE_INIT_STD, rng),
            w_v: Tensor::randn([d, d], BASE_INIT_STD, rng),
            w_o: Tensor::randn([d, d], BASE_INIT_STD, rng),
            w_up: Tensor::randn([d, f], BASE_INIT_STD, rng),
            w_down: Tensor::randn([f, d], BASE_INIT_STD, rng),
            b_up: Tensor::zeros([f]),
            b_down: Tensor::zeros([d]),
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, f) = (config.d_model, config.d_ff);
        Self {
            w_q: Tensor::zeros([d, d]),
            w_k: Tensor::zeros([d, d]),
            w_v: Tensor::zeros([d, d]),
            w_o: Tensor::zeros([d, d]),
            w_up: Tensor::zeros([d, f]),
            w_down: Tensor::zeros([f, d]),
            b_up: Tensor::zeros([f]),
            b_down: Tensor::zeros([d]),
        }
    }

    pub fn host(&self, kind: ModuleKind) -> &Tensor<S> {
        match kind {
            ModuleKind::Query => &self.w_q,
            ModuleKind::Key => &self.w_k,
            ModuleKind::Value => &self.w_v,
            ModuleKind::Output => &self.w_o,
            ModuleKind::Up => &self.w_up,
            ModuleKind::Down => &self.w_down,
        }
    }

    pub fn host_mut(&mut self, kind: ModuleKind) -> &mut Tensor<S> {
        match kind {
            ModuleKind::Query => &mut self.w_q,
            ModuleKind::Key => &mut self.w_k,
            ModuleKind::Value => &mut self.w_v,
            ModuleKind::Output => &mut self.w_o,
            ModuleKind::Up => &mut self.w_up,
            ModuleKind::Down => &mut self.w_down,
        }
    }

    fn bias(&self, kind: ModuleKind) -> Option<&Tensor<S>> {
        match kind {
            ModuleKind::Up => Some(&self.b_up),
            ModuleKind::Down => Some(&self.b_down),
            _ => None,
        }
    }
}

/// The model `M`: frozen base plus every adapter with all gates available.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperNetwork<S> {
    pub config: ModelConfig,
    /// `[vocab, d]`
    pub embed: Tensor<S>,
    /// `[max_seq_len, d]`
    pub pos: Tensor<S>,
    pub blocks: Vec<BlockWeights<S>>,
    /// `[d, vocab]`
    pub unembed: Tensor<S>,
    /// Indexed by `ModuleId`.
    pub adapters: Vec<GatedLoraAdapter<S>>,
    /// Installed only by the L0 baseline.
    pub l0_gates: Option<Vec<HardConcreteGate<S>>>,
}

/// Initial per-module rank for a total budget, rejecting uneven splits.
pub fn initial_rank(config: &ModelConfig, r_target: usize) -> Result<usize> {
    let n = config.module_count();
    if r_target < n {
        return Err(AloraError::config(
            "allocator.r_target",
            format!("budget {r_target} is below the {n} adapted modules"),
        ));
    }
    if !r_target.is_multiple_of(n) {
        return Err(AloraError::config(
            "allocator.r_target",
            format!("budget {r_target} does not divide evenly over {n} modules"),
        ));
    }
    Ok(r_target / n)
}

/// Random frozen base with a fresh adapter of rank `r_target / modules` on
/// every host weight.
pub fn build_supernetwork<S: Float, R: Rng + ?Sized>(
    config: &ModelConfig,
    r_target: usize,
    rng: &mut R,
) -> Result<SuperNetwork<S>> {
    config.validate()?;
    let rank = initial_rank(config, r_target)?;
    let (d, v) = (config.d_model, config.vocab);
    let embed = Tensor::randn([v, d], BASE_INIT_STD, rng);
    let pos = Tensor::randn([config.max_seq_len, d], BASE_INIT_STD, rng);
    let blocks = (0..config.layers)
        .map(|_| BlockWeights::init(config, rng))
        .collect();
    let unembed = Tensor::randn([d, v], BASE_INIT_STD, rng);
    let adapters = (0..config.module_count())
        .map(|m| {
            let id = ModuleId(m);
            let (d_in, d_out) = config.module_shape(id.kind());
            GatedLoraAdapter::new(id, d_in, d_out, rank, rng)
        })
        .collect();
    Ok(SuperNetwork {
        config: config.clone(),
        embed,
        pos,
        blocks,
        unembed,
        adapters,
        l0_gates: None,
    })
}

/// Where the per-rank gate values of a forward pass come from.
#[derive(Debug, Clone, Copy, Default)]
pub enum GateSource<'a, S> {
    /// `α'` from the adapters' logits and states.
    #[default]
    Current,
    /// Explicit gate values per module, e.g. an ablation view.
    Override(&'a [Vec<S>]),
    /// `α'` times Hard-Concrete draws for the given noise (one per rank).
    HardConcreteSample(&'a [Vec<f64>]),
    /// `α'` times the noiseless Hard-Concrete gate.
    HardConcreteDeterministic,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a, S> {
    pub train_adapters: bool,
    pub train_gate_logits: bool,
    pub train_l0: bool,
    pub gates: GateSource<'a, S>,
}

impl<'a, S> ForwardOptions<'a, S> {
    pub fn eval() -> Self {
        Self {
            train_adapters: false,
            train_gate_logits: false,
            train_l0: false,
            gates: GateSource::Current,
        }
    }

    pub fn train() -> Self {
        Self {
            train_adapters: true,
            ..Self::eval()
        }
    }

    pub fn with_gates(mut self, gates: GateSource<'a, S>) -> Self {
        self.gates = gates;
        self
    }
}

fn state_mask<S: Float>(states: &[GateState]) -> Tensor<S> {
    Tensor::from_fn([states.len()], |i| match states[i] {
        GateState::Active => S::one(),
        GateState::Pruned => S::zero(),
    })
}

fn activation<'t, S: Float>(x: Var<'t, S>, act: Activation) -> Result<Var<'t, S>> {
    Ok(match act {
        Activation::Relu => x.relu()?,
        Activation::Gelu => x.gelu()?,
    })
}

fn width_error(op: &'static str, got: &[usize], want: usize) -> AloraError {
    AloraError::Tensor(alora_autodiff::TensorError::Shape {
        op,
        lhs: got.to_vec(),
        rhs: vec![want],
    })
}

/// Multi-head attention over `[batch·t, d]` rows grouped into `batch`
/// sequences of length `t`.
fn attention<'t, S: Float>(
    u: Var<'t, S>,
    batch: usize,
    t: usize,
    heads: usize,
    causal: bool,
    mut linear: impl FnMut(Var<'t, S>, ModuleKind) -> Result<Var<'t, S>>,
) -> Result<Var<'t, S>> {
    let d = *u.shape().last().unwrap_or(&0);
    let dh = d / heads;
    let split = |x: Var<'t, S>| -> Result<Var<'t, S>> {
        Ok(x.reshape(&[batch, t, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch * heads, t, dh])?)
    };
    let q = split(linear(u, ModuleKind::Query)?)?;
    let k = split(linear(u, ModuleKind::Key)?)?;
    let v = split(linear(u, ModuleKind::Value)?)?;
    let scores = q.bmm_t(k)?.scale(1.0 / (dh as f64).sqrt())?;
    let probs = if causal {
        scores.causal_softmax()?
    } else {
        scores.softmax()?
    };
    let ctx = probs
        .bmm(v)?
        .reshape(&[batch, heads, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch * t, d])?;
    linear(ctx, ModuleKind::Output)
}

fn feed_forward<'t, S: Float>(
    u: Var<'t, S>,
    act: Activation,
    mut linear: impl FnMut(Var<'t, S>, ModuleKind) -> Result<Var<'t, S>>,
) -> Result<Var<'t, S>> {
    let h = activation(linear(u, ModuleKind::Up)?, act)?;
    linear(h, ModuleKind::Down)
}

fn base_linear<'t, S: Float>(
    tape: &'t Tape<S>,
    x: Var<'t, S>,
    w: &BlockWeights<S>,
    kind: ModuleKind,
) -> Result<Var<'t, S>> {
    let mut y = x.matmul(tape.constant(w.host(kind).clone()))?;
    if let Some(b) = w.bias(kind) {
        y = y.add(tape.constant(b.clone()))?;
    }
    Ok(y)
}

/// `MHA(H)` on the base weights alone for one `[l, d]` sequence.
pub fn mha_forward<S: Float>(
    h: &Tensor<S>,
    weights: &BlockWeights<S>,
    heads: usize,
    causal: bool,
) -> Result<Tensor<S>> {
    let d = weights.w_q.rows();
    if h.rank() != 2 || h.cols() != d {
        return Err(width_error("mha_forward", h.shape(), d));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(AloraError::config("model.heads", "must divide d_model"));
    }
    let tape = Tape::no_grad();
    let x = tape.constant(h.clone());
    let out = attention(x, 1, h.rows(), heads, causal, |x, kind| {
        base_linear(&tape, x, weights, kind)
    })?;
    Ok(out.value())
}

/// `g(H·W_U + b_U)·W_D + b_D` on the base weights.
pub fn ffn_forward<S: Float>(
    h: &Tensor<S>,
    weights: &BlockWeights<S>,
    act: Activation,
) -> Result<Tensor<S>> {
    let d = weights.w_up.rows();
    if h.rank() != 2 || h.cols() != d {
        return Err(width_error("ffn_forward", h.shape(), d));
    }
    let tape = Tape::no_grad();
    let x = tape.constant(h.clone());
    let out = feed_forward(x, act, |x, kind| base_linear(&tape, x, weights, kind))?;
    Ok(out.value())
}

impl<S: Float> SuperNetwork<S> {
    pub fn module_count(&self) -> usize {
        self.adapters.len()
    }

    pub fn adapter(&self, m: ModuleId) -> &GatedLoraAdapter<S> {
        &self.adapters[m.0]
    }

    pub fn active_total(&self) -> usize {
        self.adapters.iter().map(|a| a.active_count()).sum()
    }

    /// Active rank count per module.
    pub fn rank_map(&self) -> Vec<usize> {
        self.adapters.iter().map(|a| a.active_count()).collect()
    }

    /// Current effective gates of every module.
    pub fn current_gates(&self) -> Vec<Vec<S>> {
        self.adapters.iter().map(|a| a.gates()).collect()
    }

    /// Installs Hard-Concrete gates on every adapter rank.
    pub fn install_l0_gates(&mut self, init_log_theta: f64, config: crate::regularizers::HardConcreteConfig) {
        self.l0_gates = Some(
            self.adapters
                .iter()
                .map(|a| HardConcreteGate::new(a.module, a.rank(), init_log_theta, config))
                .collect(),
        );
    }

    /// Token plus position embeddings for `[batch, t]` inputs, `[batch·t, d]`.
    fn embed_inputs(&self, inputs: &[&[usize]]) -> Result<(Tensor<S>, usize)> {
        let batch = inputs.len();
        let t = inputs.first().map_or(0, |s| s.len());
        if batch == 0 || t == 0 {
            return Err(AloraError::Contract("forward on an empty batch".into()));
        }
        if t > self.config.max_seq_len {
            return Err(AloraError::Contract(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(batch * t * d);
        for seq in inputs {
            if seq.len() != t {
                return Err(AloraError::Contract("ragged batch".into()));
            }
            for (p, &tok) in seq.iter().enumerate() {
                if tok >= self.config.vocab {
                    return Err(AloraError::Contract(format!(
                        "token {tok} outside vocab {}",
                        self.config.vocab
                    )));
                }
                let e = &self.embed.data()[tok * d..(tok + 1) * d];
                let q = &self.pos.data()[p * d..(p + 1) * d];
                out.extend(e.iter().zip(q).map(|(&a, &b)| a + b));
            }
        }
        Ok((Tensor::new([batch * t, d], out)?, t))
    }

    /// Per-module gate vectors on the tape, `None` where every gate is zero
    /// and the adapter can be skipped.
    fn gate_vars<'t>(
        &self,
        tape: &'t Tape<S>,
        opts: &ForwardOptions<'_, S>,
    ) -> Result<Vec<Option<Var<'t, S>>>> {
        let l0 = |m: usize| -> Result<&HardConcreteGate<S>> {
            self.l0_gates
                .as_ref()
                .and_then(|g| g.get(m))
                .ok_or_else(|| AloraError::Contract("Hard-Concrete gates are not installed".into()))
        };
        let mut out = Vec::with_capacity(self.adapters.len());
        for (m, ad) in self.adapters.iter().enumerate() {
            let r = ad.rank();
            if r == 0 {
                out.push(None);
                continue;
            }
            let alpha = if opts.train_gate_logits {
                let logits = tape.param(&ad.gate_logits);
                let mask = tape.constant(state_mask(&ad.gate_state));
                Some(logits.sigmoid()?.scale(2.0)?.mul(mask)?)
            } else {
                None
            };
            let alpha_const = || Tensor::new([r], ad.gates());
            let gate = match opts.gates {
                GateSource::Current => match alpha {
                    Some(v) => Some(v),
                    None => {
                        let g = alpha_const()?;
                        nonzero(&g).then(|| tape.constant(g))
                    }
                },
                GateSource::Override(values) => {
                    let g = values.get(m).ok_or_else(|| {
                        AloraError::Contract(format!("gate override has no entry for module {m}"))
                    })?;
                    if g.len() != r {
                        return Err(AloraError::Contract(format!(
                            "gate override for module {m} has {} values, rank is {r}",
                            g.len()
                        )));
                    }
                    let g = Tensor::new([r], g.clone())?;
                    nonzero(&g).then(|| tape.constant(g))
                }
                GateSource::HardConcreteSample(noise) => {
                    let gate = l0(m)?;
                    let u = noise.get(m).filter(|u| u.len() == r).ok_or_else(|| {
                        AloraError::Contract(format!("noise for module {m} must have {r} draws"))
                    })?;
                    let lt = if opts.train_l0 {
                        tape.param(&gate.log_theta)
                    } else {
                        tape.constant(gate.log_theta.value.clone())
                    };
                    let lam = gate.sample_on(tape, lt, u)?;
                    let a = match alpha {
                        Some(v) => v,
                        None => tape.constant(alpha_const()?),
                    };
                    Some(lam.mul(a)?)
                }
                GateSource::HardConcreteDeterministic => {
                    let lam = l0(m)?.deterministic();
                    let g: Vec<S> = ad.gates().iter().zip(&lam).map(|(&a, &l)| a * l).collect();
                    let g = Tensor::new([r], g)?;
                    nonzero(&g).then(|| tape.constant(g))
                }
            };
            out.push(gate);
        }
        Ok(out)
    }

    /// Logits `[batch·t, vocab]` for equal-length input sequences.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<S>,
        inputs: &[&[usize]],
        opts: &ForwardOptions<'_, S>,
    ) -> Result<Var<'t, S>> {
        let (x0, t) = self.embed_inputs(inputs)?;
        let batch = inputs.len();
        let gates = self.gate_vars(tape, opts)?;
        let mut x = tape.constant(x0);
        for (layer, w) in self.blocks.iter().enumerate() {
            let linear = |x: Var<'t, S>, kind: ModuleKind| -> Result<Var<'t, S>> {
                let m = ModuleId::new(layer, kind);
                let y = base_linear(tape, x, w, kind)?;
                match gates[m.0] {
                    Some(g) => {
                        let z = self.adapters[m.0].forward_on(tape, x, g, opts.train_adapters)?;
                        Ok(y.add(z)?)
                    }
                    None => Ok(y),
                }
            };
            let u = x.layer_norm(LN_EPS)?;
            x = x.add(attention(u, batch, t, self.config.heads, true, linear)?)?;
            let u = x.layer_norm(LN_EPS)?;
            x = x.add(feed_forward(u, self.config.activation, linear)?)?;
        }
        Ok(x
            .layer_norm(LN_EPS)?
            .matmul(tape.constant(self.unembed.clone()))?)
    }

    /// Mean next-token cross-entropy over the target positions of `batch`.
    pub fn lm_loss<'t>(
        &self,
        tape: &'t Tape<S>,
        batch: &[Example],
        opts: &ForwardOptions<'_, S>,
    ) -> Result<Var<'t, S>> {
        if batch.is_empty() {
            return Err(AloraError::Contract("lm_loss on an empty batch".into()));
        }
        let inputs: Vec<&[usize]> = batch.iter().map(Example::inputs).collect();
        let targets: Vec<Option<usize>> = batch.iter().flat_map(Example::targets).collect();
        Ok(self.forward(tape, &inputs, opts)?.cross_entropy(&targets)?)
    }

    /// Untaped loss value.
    pub fn eval_loss(&self, batch: &[Example], gates: GateSource<'_, S>) -> Result<f64> {
        let tape = Tape::no_grad();
        let opts = ForwardOptions::eval().with_gates(gates);
        Ok(self.lm_loss(&tape, batch, &opts)?.item().as_f64())
    }

    /// Untaped logits for a batch of inputs.
    pub fn logits(&self, inputs: &[&[usize]], gates: GateSource<'_, S>) -> Result<Tensor<S>> {
        let tape = Tape::no_grad();
        let opts = ForwardOptions::eval().with_gates(gates);
        Ok(self.forward(&tape, inputs, &opts)?.value())
    }
}

fn nonzero<S: Float>(g: &Tensor<S>) -> bool {
    g.data().iter().any(|&x| x != S::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab: 11,
            max_seq_len: 6,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn module_ids_round_trip() {
        let m = ModuleId::new(1, ModuleKind::Up);
        assert_eq!(m.0, 10);
        assert_eq!(m.layer(), 1);
        assert_eq!(m.kind(), ModuleKind::Up);
        assert_eq!(m.label(), "L1.U");
    }

    #[test]
    fn budget_division() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = build_supernetwork::<f64, _>(&cfg, 48, &mut rng).unwrap();
        assert_eq!(net.adapters.len(), 12);
        assert!(net.adapters.iter().all(|a| a.rank() == 4));
        assert!(build_supernetwork::<f64, _>(&cfg, 12, &mut rng)
            .unwrap()
            .adapters
            .iter()
            .all(|a| a.rank() == 1));
        let err = build_supernetwork::<f64, _>(&cfg, 11, &mut rng).unwrap_err();
        assert!(matches!(err, AloraError::Config { .. }));
        assert!(build_supernetwork::<f64, _>(&cfg, 50, &mut rng).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_gates_match_bare_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = build_supernetwork::<f64, _>(&small(), 24, &mut rng).unwrap();
        for ad in &mut net.adapters {
            ad.b.value = Tensor::randn(ad.b.value.shape().to_vec(), 0.5, &mut rng);
        }
        let inputs: Vec<Vec<usize>> = vec![vec![1, 4, 2, 9, 3], vec![5, 5, 0, 7, 10]];
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let zeros: Vec<Vec<f64>> = net.adapters.iter().map(|a| vec![0.0; a.rank()]).collect();
        let gated = net.logits(&refs, GateSource::Override(&zeros)).unwrap();
        let mut bare = net.clone();
        for a in &mut bare.adapters {
            for i in 0..a.rank() {
                a.prune_rank(i).unwrap();
            }
            a.compact().unwrap();
            assert_eq!(a.rank(), 0);
        }
        let base = bare.logits(&refs, GateSource::Current).unwrap();
        assert_eq!(gated.data(), base.data());
        let with = net.logits(&refs, GateSource::Current).unwrap();
        assert_ne!(with.data(), base.data());
    }

    #[test]
    fn causal_prefix_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = build_supernetwork::<f64, _>(&small(), 12, &mut rng).unwrap();
        let a = [3usize, 1, 4, 1, 5];
        let b = [3usize, 1, 4, 9, 2];
        let la = net.logits(&[&a], GateSource::Current).unwrap();
        let lb = net.logits(&[&b], GateSource::Current).unwrap();
        let v = net.config.vocab;
        assert_eq!(la.data()[..3 * v], lb.data()[..3 * v]);
        assert_ne!(la.data()[3 * v..], lb.data()[3 * v..]);
    }
}
