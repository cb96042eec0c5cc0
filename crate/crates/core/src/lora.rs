//! Gated low-rank adapters.
//!
//! An adapter on a host weight `W0: d_in×d_out` adds
//! `z = scaling · ((x·W_A) ∘ g)·W_B` to the host output `x·W0 + b0`, where
//! `g` holds one gate per rank. A rank is one column of `W_A`, the matching
//! row of `W_B` and its gate, so an adapter of rank `r` is the sum of `r`
//! rank-one adapters.
//!
//! Pruning is logical: the gate is forced to zero and the factors stay in
//! place, keeping rank indices stable until [`GatedLoraAdapter::compact`] is
//! called explicitly.

use alora_autodiff::{Float, Param, ParamId, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AloraError, Result};
use crate::model::ModuleId;

/// Standard deviation for freshly initialized down-projection columns.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateState {
    Active,
    Pruned,
}

impl GateState {
    pub fn to_byte(self) -> u8 {
        match self {
            GateState::Active => 1,
            GateState::Pruned => 0,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(GateState::Active),
            0 => Some(GateState::Pruned),
            _ => None,
        }
    }
}

/// Effective gate `α' = 2·sigmoid(a')` for an active rank, exactly 0 when pruned.
pub fn gate_value<S: Float>(logit: S, state: GateState) -> S {
    match state {
        GateState::Pruned => S::zero(),
        GateState::Active => S::lit(2.0) * alora_autodiff::sigmoid(logit),
    }
}

/// One allocation round's structural changes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AllocationDelta {
    pub round: usize,
    /// `(module, rank index)` pairs whose gates were closed.
    pub pruned: Vec<(ModuleId, usize)>,
    /// `(module, count)` pairs of freshly appended ranks.
    pub added: Vec<(ModuleId, usize)>,
}

impl AllocationDelta {
    pub fn pruned_count(&self) -> usize {
        self.pruned.len()
    }

    pub fn added_count(&self) -> usize {
        self.added.iter().map(|(_, n)| n).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedLoraAdapter<S> {
    pub module: ModuleId,
    /// Down-projection `W_A`, shape `[d_in, r]`.
    pub a: Param<S>,
    /// Up-projection `W_B`, shape `[r, d_out]`.
    pub b: Param<S>,
    /// Gate logits `a'`, shape `[r]`; trained only by the DNAS baseline.
    pub gate_logits: Param<S>,
    pub gate_state: Vec<GateState>,
    pub scaling: f64,
}

impl<S: Float> GatedLoraAdapter<S> {
    pub fn param_ids(module: ModuleId) -> [ParamId; 3] {
        let base = module.0 * 4;
        [ParamId(base), ParamId(base + 1), ParamId(base + 2)]
    }

    /// Fresh adapter: `W_A ~ N(0, 0.02²)`, `W_B = 0`, every gate open at `a' = 0`.
    pub fn new<R: Rng + ?Sized>(
        module: ModuleId,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let a = Tensor::randn([d_in, rank], INIT_STD, rng);
        let b = Tensor::zeros([rank, d_out]);
        Self::from_factors(module, a, b).expect("shapes built to agree")
    }

    /// Adapter with the given factors and every gate open.
    pub fn from_factors(module: ModuleId, a: Tensor<S>, b: Tensor<S>) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
            return Err(AloraError::Tensor(alora_autodiff::TensorError::Shape {
                op: "adapter factors",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            }));
        }
        let r = a.cols();
        let [ia, ib, ig] = Self::param_ids(module);
        let mut gate_logits = Param::new(ig, Tensor::zeros([r]));
        gate_logits.requires_grad = false;
        Ok(Self {
            module,
            a: Param::new(ia, a),
            b: Param::new(ib, b),
            gate_logits,
            gate_state: vec![GateState::Active; r],
            scaling: 1.0,
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b.value.cols()
    }

    /// Allocated rank, pruned slots included.
    pub fn rank(&self) -> usize {
        self.gate_state.len()
    }

    pub fn active_count(&self) -> usize {
        self.gate_state
            .iter()
            .filter(|s| **s == GateState::Active)
            .count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.gate_state
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == GateState::Active)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.gate_state.get(i) == Some(&GateState::Active)
    }

    /// Current gate values `α'_i`.
    pub fn gates(&self) -> Vec<S> {
        self.gate_logits
            .value
            .data()
            .iter()
            .zip(&self.gate_state)
            .map(|(&l, &s)| gate_value(l, s))
            .collect()
    }

    /// Adapter output for a `[batch, d_in]` input.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let gates = tape.constant(Tensor::new([self.rank()], self.gates())?);
        Ok(self.forward_on(&tape, xv, gates, false)?.value())
    }

    /// Taped forward with an explicit gate vector.
    pub fn forward_on<'t>(
        &self,
        tape: &'t Tape<S>,
        x: Var<'t, S>,
        gates: Var<'t, S>,
        trainable: bool,
    ) -> Result<Var<'t, S>> {
        let width = *x.shape().last().unwrap_or(&0);
        if width != self.d_in() {
            return Err(AloraError::Tensor(alora_autodiff::TensorError::Shape {
                op: "adapter_forward",
                lhs: x.shape(),
                rhs: self.a.value.shape().to_vec(),
            }));
        }
        let (a, b) = if trainable {
            (tape.param(&self.a), tape.param(&self.b))
        } else {
            (
                tape.constant(self.a.value.clone()),
                tape.constant(self.b.value.clone()),
            )
        };
        let mut z = x.matmul(a)?.diag_scale(gates)?.matmul(b)?;
        if self.scaling != 1.0 {
            z = z.scale(self.scaling)?;
        }
        Ok(z)
    }

    /// Dense `W0 + scaling · W_A·diag(g)·W_B` with the same linear action as
    /// the host layer plus this adapter.
    pub fn merge(&self, w0: &Tensor<S>) -> Result<Tensor<S>> {
        if w0.shape() != [self.d_in(), self.d_out()] {
            return Err(AloraError::Tensor(alora_autodiff::TensorError::Shape {
                op: "merge",
                lhs: w0.shape().to_vec(),
                rhs: vec![self.d_in(), self.d_out()],
            }));
        }
        let gates = self.gates();
        let mut scaled_a = self.a.value.clone();
        let r = self.rank();
        for row in scaled_a.data_mut().chunks_mut(r.max(1)) {
            for (x, &g) in row.iter_mut().zip(&gates) {
                *x *= g;
            }
        }
        let delta = scaled_a.matmul(&self.b.value)?;
        let s = S::lit(self.scaling);
        let data = w0
            .data()
            .iter()
            .zip(delta.data())
            .map(|(&w, &d)| w + s * d)
            .collect();
        Ok(Tensor::new(w0.shape().to_vec(), data)?)
    }

    /// Closes gate `i`. The factors are kept but no longer contribute.
    pub fn prune_rank(&mut self, i: usize) -> Result<()> {
        match self.gate_state.get(i) {
            None => Err(AloraError::Contract(format!(
                "module {}: rank index {i} out of range (r = {})",
                self.module.0,
                self.rank()
            ))),
            Some(GateState::Pruned) => Err(AloraError::Contract(format!(
                "module {}: rank {i} is already pruned",
                self.module.0
            ))),
            Some(GateState::Active) => {
                self.gate_state[i] = GateState::Pruned;
                Ok(())
            }
        }
    }

    /// Appends `count` ranks: `W_A` columns drawn from `N(0, 0.02²)`, zero
    /// `W_B` rows and open gates, so the output is unchanged until the next
    /// update. Existing entries are copied bit for bit.
    pub fn grow_ranks<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Result<()> {
        if count == 0 {
            return Err(AloraError::Contract("grow_ranks needs count >= 1".into()));
        }
        let (d_in, d_out, r) = (self.d_in(), self.d_out(), self.rank());
        let fresh = Tensor::<S>::randn([d_in, count], INIT_STD, rng);
        let mut a = Vec::with_capacity(d_in * (r + count));
        for i in 0..d_in {
            a.extend_from_slice(&self.a.value.data()[i * r..(i + 1) * r]);
            a.extend_from_slice(&fresh.data()[i * count..(i + 1) * count]);
        }
        self.a.value = Tensor::new([d_in, r + count], a)?;

        let mut b = self.b.value.data().to_vec();
        b.extend(std::iter::repeat_n(S::zero(), count * d_out));
        self.b.value = Tensor::new([r + count, d_out], b)?;

        let mut logits = self.gate_logits.value.data().to_vec();
        logits.extend(std::iter::repeat_n(S::zero(), count));
        self.gate_logits.value = Tensor::new([r + count], logits)?;

        self.gate_state
            .extend(std::iter::repeat_n(GateState::Active, count));
        Ok(())
    }

    /// Physically removes pruned ranks. Returns, for each surviving rank, its
    /// index before compaction.
    pub fn compact(&mut self) -> Result<Vec<usize>> {
        let keep = self.active_indices();
        let (d_in, d_out, r) = (self.d_in(), self.d_out(), self.rank());
        let mut a = Vec::with_capacity(d_in * keep.len());
        for i in 0..d_in {
            a.extend(keep.iter().map(|&k| self.a.value.data()[i * r + k]));
        }
        let mut b = Vec::with_capacity(keep.len() * d_out);
        for &k in &keep {
            b.extend_from_slice(&self.b.value.data()[k * d_out..(k + 1) * d_out]);
        }
        let logits = keep
            .iter()
            .map(|&k| self.gate_logits.value.data()[k])
            .collect();
        self.a.value = Tensor::new([d_in, keep.len()], a)?;
        self.b.value = Tensor::new([keep.len(), d_out], b)?;
        self.gate_logits.value = Tensor::new([keep.len()], logits)?;
        self.gate_state = vec![GateState::Active; keep.len()];
        Ok(keep)
    }

    /// Rank-one adapter built from column `i` of `W_A` and row `i` of `W_B`,
    /// carrying rank `i`'s current gate value.
    pub fn rank_one(&self, i: usize) -> Result<Self> {
        let (d_in, d_out, r) = (self.d_in(), self.d_out(), self.rank());
        let a = Tensor::new(
            [d_in, 1],
            (0..d_in).map(|row| self.a.value.data()[row * r + i]).collect(),
        )?;
        let b = Tensor::new(
            [1, d_out],
            self.b.value.data()[i * d_out..(i + 1) * d_out].to_vec(),
        )?;
        let mut out = Self::from_factors(self.module, a, b)?;
        out.gate_logits.value = Tensor::new([1], vec![self.gate_logits.value.data()[i]])?;
        out.gate_state = vec![self.gate_state[i]];
        out.scaling = self.scaling;
        Ok(out)
    }
}
