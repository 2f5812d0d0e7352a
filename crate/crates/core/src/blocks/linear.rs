use crate::blocks::param::{visit_fields, Init, Param};
use crate::error::{ensure, Error, Result};
use crate::tensor::{gemm, MatLayout, Real, Tokens};

/// Token-wise affine map `y = x W^T + b`, weight stored `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tokens<T>>,
}

visit_fields!(Linear { weight, bias });

impl<T: Real> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, init: &mut Init) -> Self {
        Self {
            weight: init.trunc_normal(&[out_dim, in_dim]),
            bias: init.zeros(&[out_dim]),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Tokens<T>) -> Result<Tokens<T>> {
        ensure!(
            x.d == self.in_dim(),
            "linear layer expects {} features, got {}",
            self.in_dim(),
            x.d
        );
        let (rows, din, dout) = (x.rows(), self.in_dim(), self.out_dim());
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias.value);
        }
        gemm(
            T::one(),
            &x.data,
            MatLayout::row_major(0, rows, din),
            &self.weight.value,
            MatLayout::row_major(0, dout, din).t(),
            T::one(),
            &mut out,
            MatLayout::row_major(0, rows, dout),
        );
        Ok(x.with_data(dout, out))
    }

    pub fn forward_train(&mut self, x: &Tokens<T>) -> Result<Tokens<T>> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tokens<T>) -> Result<Tokens<T>> {
        let x = self.cache.take().ok_or(Error::NoCache("linear"))?;
        let (rows, din, dout) = (x.rows(), self.in_dim(), self.out_dim());
        ensure!(
            dy.d == dout && dy.rows() == rows,
            "linear backward: gradient shape mismatch"
        );
        let dyl = MatLayout::row_major(0, rows, dout);
        {
            let bg = self.bias.grad_mut();
            for row in dy.data.chunks_exact(dout) {
                for (g, &v) in bg.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let (w, wg) = self.weight.value_and_grad();
        gemm(
            T::one(),
            &dy.data,
            dyl.t(),
            &x.data,
            MatLayout::row_major(0, rows, din),
            T::one(),
            wg,
            MatLayout::row_major(0, dout, din),
        );
        let mut dx = vec![T::zero(); rows * din];
        gemm(
            T::one(),
            &dy.data,
            dyl,
            w,
            MatLayout::row_major(0, dout, din),
            T::zero(),
            &mut dx,
            MatLayout::row_major(0, rows, din),
        );
        Ok(x.with_data(din, dx))
    }
}
