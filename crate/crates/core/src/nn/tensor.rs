//! Minimal dense n-d array and the model input wrapper.

use crate::error::{Error, Result};
use crate::ingest::{FlowMatrix, MATRIX_COLS, MATRIX_ROWS};

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{expect} values for shape {shape:?}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// One sample as the network sees it.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    /// A 2-d single-channel image, shape `[rows, cols]`.
    Grid(Tensor),
    /// A step sequence, shape `[steps, dim]` with `steps >= 1`.
    Sequence(Tensor),
}

impl ModelInput {
    /// Full 100x200 matrix as a convolution input.
    pub fn grid_from_matrix(m: &FlowMatrix) -> ModelInput {
        let data = m.data().iter().map(|&v| v as f64).collect();
        ModelInput::Grid(Tensor::new(vec![MATRIX_ROWS, MATRIX_COLS], data).expect("fixed shape"))
    }

    /// Real packet rows as a sequence input; an empty flow becomes a single
    /// zero step so recurrent models always see at least one input.
    pub fn sequence_from_matrix(m: &FlowMatrix) -> ModelInput {
        let steps = (m.n_real_packets() as usize).max(1);
        let mut data = Vec::with_capacity(steps * MATRIX_COLS);
        for r in 0..steps {
            data.extend(m.row(r).iter().map(|&v| v as f64));
        }
        ModelInput::Sequence(Tensor::new(vec![steps, MATRIX_COLS], data).expect("fixed shape"))
    }

    /// Number of output steps this input produces (1 for grids).
    pub fn steps(&self) -> usize {
        match self {
            ModelInput::Grid(_) => 1,
            ModelInput::Sequence(t) => t.shape()[0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::zeros(vec![4, 5]).len(), 20);
    }

    #[test]
    fn sequence_uses_real_packets_only() {
        let mut m = FlowMatrix::zeroed();
        m.row_mut(0)[0] = 1.0;
        m.row_mut(1)[0] = 0.5;
        m.set_n_real_packets(2);
        match ModelInput::sequence_from_matrix(&m) {
            ModelInput::Sequence(t) => {
                assert_eq!(t.shape(), &[2, MATRIX_COLS]);
                assert_eq!(t.data()[0], 1.0);
                assert_eq!(t.data()[MATRIX_COLS], 0.5);
            }
            _ => unreachable!(),
        }
        // empty flow still yields one step
        let empty = FlowMatrix::zeroed();
        assert_eq!(ModelInput::sequence_from_matrix(&empty).steps(), 1);
    }
}
