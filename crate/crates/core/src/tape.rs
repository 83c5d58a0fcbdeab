//! Reverse-mode differentiation over a sequential chain of recorded
//! operations.
//!
//! The network is a straight pipeline, so the tape is a list of boxed
//! [`TapeOp`]s. Each op caches what its backward rule needs at record time,
//! maps the adjoint of its output to the adjoint of its input, and
//! accumulates adjoints of the parameters it touched into [`Gradients`].

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Index of a trainable parameter matrix in a model's canonical ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// One adjoint matrix per trainable parameter, shaped like the parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(shapes: &[(usize, usize)]) -> Self {
        Self {
            grads: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &Matrix) -> Result<()> {
        let g = self
            .grads
            .get_mut(id.0)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {}", id.0)))?;
        if g.shape() != delta.shape() {
            return Err(Error::Shape(format!(
                "adjoint for parameter {} has shape {:?}, expected {:?}",
                id.0,
                delta.shape(),
                g.shape()
            )));
        }
        for (a, d) in g.as_mut_slice().iter_mut().zip(delta.as_slice()) {
            *a += d;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.grads.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}

pub trait TapeOp: Send {
    fn name(&self) -> &'static str;

    /// Maps the adjoint of this op's output to the adjoint of its input,
    /// accumulating parameter adjoints into `grads`.
    fn backward(&self, output_adjoint: &Matrix, grads: &mut Gradients) -> Result<Matrix>;
}

/// Records one forward pass. Single writer.
pub struct GradientTape {
    param_shapes: Vec<(usize, usize)>,
    ops: Vec<Box<dyn TapeOp>>,
    output: Option<Matrix>,
}

impl GradientTape {
    pub fn new(param_shapes: Vec<(usize, usize)>) -> Self {
        Self {
            param_shapes,
            ops: Vec::new(),
            output: None,
        }
    }

    pub fn record(&mut self, op: Box<dyn TapeOp>) {
        self.ops.push(op);
    }

    /// Marks the scalar (1×1) value that ends the recorded pass.
    pub fn finish(&mut self, output: Matrix) {
        self.output = Some(output);
    }

    pub fn output(&self) -> Option<&Matrix> {
        self.output.as_ref()
    }

    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().map(|op| op.name()).collect()
    }
}

/// Walks the tape in reverse from the scalar output seeded with `loss_seed`.
pub fn backward(tape: &GradientTape, loss_seed: f64) -> Result<Gradients> {
    let output = tape.output.as_ref().ok_or(Error::EmptyTape)?;
    if output.shape() != (1, 1) {
        return Err(Error::Shape(format!(
            "backward needs a scalar output, got {:?}",
            output.shape()
        )));
    }
    let mut grads = Gradients::zeros_like(&tape.param_shapes);
    let mut adjoint = Matrix::from_vec(1, 1, vec![loss_seed])?;
    for op in tape.ops.iter().rev() {
        adjoint = op.backward(&adjoint, &mut grads)?;
    }
    Ok(grads)
}
