//! Linear classification heads and the gradient reversal layer.

use rand::Rng;

use super::{init_linear, ParamGroup};
use crate::autodiff::{Mat, Tape, Var};

/// `logits = x · w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub w: Mat,
    pub b: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
}

impl LinearHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            w: init_linear(dim, classes, rng),
            b: Mat::zeros((1, classes)),
        }
    }

    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            w: Mat::zeros((dim, classes)),
            b: Mat::zeros((1, classes)),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.ncols()
    }

    pub(crate) fn names(prefix: &str) -> (&'static str, &'static str) {
        match prefix {
            "id_head" => ("id_head.w", "id_head.b"),
            "domain_head" => ("domain_head.w", "domain_head.b"),
            _ => ("head.w", "head.b"),
        }
    }

    pub fn params(&self, prefix: &str, group: ParamGroup) -> Vec<(&'static str, ParamGroup, &Mat)> {
        let (w, b) = Self::names(prefix);
        vec![(w, group, &self.w), (b, group, &self.b)]
    }

    pub fn params_mut(
        &mut self,
        prefix: &str,
        group: ParamGroup,
    ) -> Vec<(&'static str, ParamGroup, &mut Mat)> {
        let (w, b) = Self::names(prefix);
        vec![(w, group, &mut self.w), (b, group, &mut self.b)]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        HeadVars {
            w: tape.leaf(self.w.clone(), trainable),
            b: tape.leaf(self.b.clone(), trainable),
        }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        x.dot(&self.w) + &self.b
    }
}

fn linear(tape: &mut Tape, head: &HeadVars, x: Var) -> Var {
    let z = tape.matmul(x, head.w);
    tape.add_row(z, head.b)
}

/// Identity logits over the training classes.
pub fn id_classify(tape: &mut Tape, head: &HeadVars, features: Var) -> Var {
    linear(tape, head, features)
}

/// Domain logits over the source domains.
pub fn domain_classify(tape: &mut Tape, head: &HeadVars, features: Var) -> Var {
    linear(tape, head, features)
}

/// Identity in the forward pass; multiplies the incoming gradient by `-lambda`.
pub fn grl(tape: &mut Tape, x: Var, lambda: f64) -> Var {
    tape.grl(x, lambda)
}
