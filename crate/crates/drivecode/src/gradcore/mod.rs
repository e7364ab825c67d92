//! Minimal dense tensor engine with reverse-mode differentiation.
//!
//! Everything is double precision and two-dimensional (scalars are `[1,1]`,
//! vectors `[1,n]`). Operations append nodes to a [`Tape`]; `backward` walks
//! the tape in reverse, so each node is visited exactly once in reverse
//! topological order. A [`ParamStore`] holds named parameters outside any
//! tape; a [`Session`] binds them to leaves for one forward/backward pass and
//! copies the resulting gradients back.

mod checkpoint;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{Param, ParamStore};
pub use tape::{erf, gelu_scalar, Reduction, Shape, Tape, TensorId};

use crate::Result;

/// One forward/backward pass over a fresh tape with parameters bound as
/// leaves. Gradients flow back into the store via [`Session::accumulate_grads`].
pub struct Session {
    pub tape: Tape,
    bound: Vec<(String, TensorId)>,
}

impl Session {
    pub fn new() -> Self {
        Session { tape: Tape::new(), bound: Vec::new() }
    }

    /// Bind a named parameter as a leaf tensor, copying its current values.
    /// Repeated binds of the same name return the same leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        if let Some((_, id)) = self.bound.iter().find(|(n, _)| n == name) {
            return Ok(*id);
        }
        let p = store.get(name)?;
        let id = self.tape.leaf(p.shape, p.data.clone());
        self.bound.push((name.to_string(), id));
        Ok(id)
    }

    /// Run backward from a scalar loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Add each bound leaf's gradient into the store's gradient buffers.
    pub fn accumulate_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (name, id) in &self.bound {
            let g = self.tape.grad(*id)?;
            let p = store.get_mut(name)?;
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
        Ok(())
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}
