use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

type BackwardFn = Box<dyn Fn()>;

/// Reverse-mode autodiff tape. Every differentiable op pushes one closure;
/// `backward` replays them in reverse recording order, which is a valid
/// topological order because closures are pushed after their inputs exist.
/// A tape is confined to one logical thread of execution and is typically
/// created fresh per optimization step and dropped afterwards.
pub struct Tape {
    nodes: RefCell<Vec<BackwardFn>>,
    recording: Cell<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A tape that records nothing: forward passes through it behave like
    /// plain evaluation (outputs never require gradients).
    pub fn no_grad() -> Self {
        let t = Tape::new();
        t.recording.set(false);
        t
    }

    pub fn recording(&self) -> bool {
        self.recording.get()
    }

    pub fn set_recording(&self, on: bool) {
        self.recording.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub(crate) fn record(&self, f: impl Fn() + 'static) {
        if self.recording.get() {
            self.nodes.borrow_mut().push(Box::new(f));
        }
    }

    /// Seeds the root gradient with 1 and visits every node exactly once in
    /// reverse order. Gradients accumulate additively across fan-out within
    /// the pass. One backward per forward: a second call would re-seed on top
    /// of stale intermediate gradients, so each optimization step records on
    /// a fresh tape and zeroes parameter gradients afterwards.
    pub fn backward<E: Element>(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                loss.shape()
            )));
        }
        loss.accum_grad(&[E::one()]);
        let nodes = self.nodes.borrow();
        for f in nodes.iter().rev() {
            f();
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
