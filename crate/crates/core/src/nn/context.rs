use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics in BN, dropout active.
    Train,
    /// Running statistics in BN, dropout off.
    Eval,
}

/// One forward pass: a tape plus the bindings from stored parameters to tape
/// leaves. Parameters are bound lazily, at most once each.
#[derive(Debug)]
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    dropout: f64,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Vec<f64>)>,
}

/// What a forward/backward pass wants written back into the store.
#[derive(Debug, Default)]
pub struct ForwardUpdates {
    pub grads: Vec<(ParamId, Vec<f64>)>,
    pub buffers: Vec<(ParamId, Vec<f64>)>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        let tape = match mode {
            Mode::Train => Tape::training(),
            Mode::Eval => Tape::new(),
        };
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            mode,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            buffer_updates: Vec::new(),
        }
    }

    /// Enables dropout at `rate` (only effective in train mode), drawing
    /// masks from `rng`.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        self.dropout = rate;
        self.rng = rng;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng
    }

    /// Tape leaf for a stored parameter. The leaf starts without a gradient
    /// whatever the store currently holds.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let mut value = self.store.tensor(id).clone();
        value.zero_grad();
        let v = self.tape.leaf(value);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.tape.constant(x)
    }

    /// Dropout at this pass's configured rate; identity in eval mode.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        super::layers::dropout(&mut self.tape, x, self.dropout, self.mode, &mut self.rng)
    }

    pub(crate) fn record_buffer(&mut self, id: ParamId, value: Vec<f64>) {
        self.buffer_updates.push((id, value));
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Collects parameter gradients and pending buffer writes; the store can
    /// then be mutated with [`ParamStore::apply_updates`].
    pub fn into_updates(self) -> (ForwardUpdates, ChaCha8Rng) {
        let grads = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect();
        (
            ForwardUpdates {
                grads,
                buffers: self.buffer_updates,
            },
            self.rng,
        )
    }
}

impl ParamStore {
    pub fn apply_updates(&mut self, updates: &ForwardUpdates) {
        for (id, g) in &updates.grads {
            self.tensor_mut(*id).accumulate_grad(g);
        }
        for (id, value) in &updates.buffers {
            self.tensor_mut(*id).data_mut().copy_from_slice(value);
        }
    }
}
