//! Dense tensors, the gradient tape, gradient checking and AdamW.

mod gradcheck;
mod graph;
mod optim;
mod param;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{logit, sigmoid, FocalParams, Gradients, Graph, LocScale, Var, LAYER_NORM_EPS};
pub use optim::{adamw_step, AdamW, AdamWConfig};
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::{softmax, Tensor};

pub(crate) use graph::masked_softmax_slice;
pub(crate) use tensor::softmax_slice;

use crate::error::{Error, Result};

/// `x · w + b` for `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
pub fn linear_forward(x: &Tensor, w: &Parameter, b: &Parameter) -> Result<Tensor> {
    let (w, b) = (&w.value, &b.value);
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::arg(format!(
            "linear: input {:?} does not fit weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if b.len() != w.shape()[1] {
        return Err(Error::arg(format!(
            "linear: bias {:?} does not fit weight {:?}",
            b.shape(),
            w.shape()
        )));
    }
    let mut out = x.matmul(w)?;
    let m = b.len();
    for row in out.data_mut().chunks_mut(m) {
        for (o, bb) in row.iter_mut().zip(b.data()) {
            *o += bb;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(shape: Vec<usize>, data: Vec<f64>) -> Parameter {
        Parameter::new(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let eye = p(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = linear_forward(&x, &eye, &p(vec![2], vec![0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let y = linear_forward(&x, &p(vec![2, 1], vec![1.0, 1.0]), &p(vec![1], vec![3.0])).unwrap();
        assert_eq!(y.data(), &[6.0]);

        let z = Tensor::zeros(&[3, 2]);
        let w = p(vec![2, 4], vec![0.3, -0.1, 2.0, 5.0, 1.0, 1.0, -4.0, 0.5]);
        let y = linear_forward(&z, &w, &p(vec![4], vec![0.0; 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_shape_mismatch() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let w = p(vec![2, 2], vec![1.0; 4]);
        let b = p(vec![2], vec![0.0; 2]);
        assert!(matches!(linear_forward(&x, &w, &b), Err(Error::Argument(_))));
    }
}
