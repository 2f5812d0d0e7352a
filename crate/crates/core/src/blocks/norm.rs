use crate::blocks::param::{visit_fields, Init, Param, ParamKind};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor4, Tokens};

/// Batch normalization over `(n, h, w)` per channel.
///
/// Training uses batch statistics and updates the running estimates with
/// `momentum` (unbiased variance); evaluation uses the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
}

visit_fields!(BatchNorm2d {
    weight,
    bias,
    running_mean,
    running_var
});

impl<T: Real> BatchNorm2d<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize, init: &mut Init) -> Self {
        Self {
            weight: init.ones(&[channels]),
            bias: init.zeros(&[channels]),
            running_mean: Param::filled(&[channels], T::zero(), ParamKind::Buffer),
            running_var: Param::filled(&[channels], T::one(), ParamKind::Buffer),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        ensure!(
            x.shape().c == self.channels(),
            "batch norm over {} channels got input {}",
            self.channels(),
            x.shape()
        );
        Ok(())
    }

    fn apply(&self, x: &Tensor4<T>, mean: &[T], inv_std: &[T]) -> (Tensor4<T>, Tensor4<T>) {
        let s = x.shape();
        let plane = s.plane();
        let mut xhat = Tensor4::zeros(s);
        let mut y = Tensor4::zeros(s);
        for n in 0..s.n {
            let src = x.image(n);
            let (xh, out) = (xhat.image_mut(n), y.image_mut(n));
            for c in 0..s.c {
                let (m, is) = (mean[c], inv_std[c]);
                let (g, b) = (self.weight.value[c], self.bias.value[c]);
                let r = c * plane..(c + 1) * plane;
                for ((h, o), &v) in xh[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&src[r]) {
                    *h = (v - m) * is;
                    *o = g * *h + b;
                }
            }
        }
        (y, xhat)
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let eps = T::lit(self.eps);
        let inv_std: Vec<T> = self
            .running_var
            .value
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        Ok(self.apply(x, &self.running_mean.value, &inv_std).0)
    }

    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let s = x.shape();
        let plane = s.plane();
        let count = s.n * plane;
        let cnt = T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); s.c];
        let mut var = vec![T::zero(); s.c];
        for n in 0..s.n {
            let img = x.image(n);
            for c in 0..s.c {
                mean[c] += img[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        for n in 0..s.n {
            let img = x.image(n);
            for c in 0..s.c {
                let m = mean[c];
                var[c] += img[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let eps = T::lit(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = self.apply(x, &mean, &inv_std);

        let mom = T::lit(self.momentum);
        let unbias = if count > 1 {
            cnt / (cnt - T::one())
        } else {
            T::one()
        };
        for c in 0..s.c {
            let rm = &mut self.running_mean.value[c];
            *rm = (T::one() - mom) * *rm + mom * mean[c];
            let rv = &mut self.running_var.value[c];
            *rv = (T::one() - mom) * *rv + mom * var[c] * unbias;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let BnCache { xhat, inv_std } = self.cache.take().ok_or(Error::NoCache("batch_norm"))?;
        let s = xhat.shape();
        ensure!(dy.shape() == s, "batch norm backward shape {}", dy.shape());
        let plane = s.plane();
        let cnt = T::from_usize(s.n * plane).unwrap();
        let mut dgamma = vec![T::zero(); s.c];
        let mut dbeta = vec![T::zero(); s.c];
        for n in 0..s.n {
            let (g, xh) = (dy.image(n), xhat.image(n));
            for c in 0..s.c {
                let r = c * plane..(c + 1) * plane;
                for (&d, &h) in g[r.clone()].iter().zip(&xh[r]) {
                    dgamma[c] += d * h;
                    dbeta[c] += d;
                }
            }
        }
        let mut dx = Tensor4::zeros(s);
        for n in 0..s.n {
            let (g, xh) = (dy.image(n), xhat.image(n));
            let out = dx.image_mut(n);
            for c in 0..s.c {
                let k = self.weight.value[c] * inv_std[c] / cnt;
                let r = c * plane..(c + 1) * plane;
                for ((o, &d), &h) in out[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                    *o = k * (cnt * d - dbeta[c] - h * dgamma[c]);
                }
            }
        }
        for (a, b) in self.weight.grad_mut().iter_mut().zip(&dgamma) {
            *a += *b;
        }
        for (a, b) in self.bias.grad_mut().iter_mut().zip(&dbeta) {
            *a += *b;
        }
        Ok(dx)
    }
}

/// Layer normalization over the embedding dimension of each token.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub eps: f64,
    cache: Option<(Vec<T>, Vec<T>)>,
}

visit_fields!(LayerNorm { weight, bias });

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize, eps: f64, init: &mut Init) -> Self {
        Self {
            weight: init.ones(&[dim]),
            bias: init.zeros(&[dim]),
            eps,
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    fn run(&self, x: &Tokens<T>) -> Result<(Tokens<T>, Vec<T>, Vec<T>)> {
        ensure!(
            x.d == self.dim(),
            "layer norm over {} features got tokens with d = {}",
            self.dim(),
            x.d
        );
        let d = x.d;
        let df = T::from_usize(d).unwrap();
        let eps = T::lit(self.eps);
        let mut out = vec![T::zero(); x.data.len()];
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(x.rows());
        for ((row, o), h) in x
            .data
            .chunks_exact(d)
            .zip(out.chunks_exact_mut(d))
            .zip(xhat.chunks_exact_mut(d))
        {
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            for j in 0..d {
                h[j] = (row[j] - mean) * is;
                o[j] = h[j] * self.weight.value[j] + self.bias.value[j];
            }
            inv_std.push(is);
        }
        Ok((x.with_data(d, out), xhat, inv_std))
    }

    pub fn forward(&self, x: &Tokens<T>) -> Result<Tokens<T>> {
        Ok(self.run(x)?.0)
    }

    pub fn forward_train(&mut self, x: &Tokens<T>) -> Result<Tokens<T>> {
        let (y, xhat, inv_std) = self.run(x)?;
        self.cache = Some((xhat, inv_std));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tokens<T>) -> Result<Tokens<T>> {
        let (xhat, inv_std) = self.cache.take().ok_or(Error::NoCache("layer_norm"))?;
        let d = self.dim();
        ensure!(dy.d == d && dy.data.len() == xhat.len(), "layer norm backward shape");
        let df = T::from_usize(d).unwrap();
        let mut dx = vec![T::zero(); dy.data.len()];
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut g = vec![T::zero(); d];
        for (((drow, h), o), &is) in dy
            .data
            .chunks_exact(d)
            .zip(xhat.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .zip(&inv_std)
        {
            let mut sum_g = T::zero();
            let mut sum_gh = T::zero();
            for j in 0..d {
                dgamma[j] += drow[j] * h[j];
                dbeta[j] += drow[j];
                g[j] = drow[j] * self.weight.value[j];
                sum_g += g[j];
                sum_gh += g[j] * h[j];
            }
            for j in 0..d {
                o[j] = is / df * (df * g[j] - sum_g - h[j] * sum_gh);
            }
        }
        for (a, b) in self.weight.grad_mut().iter_mut().zip(&dgamma) {
            *a += *b;
        }
        for (a, b) in self.bias.grad_mut().iter_mut().zip(&dbeta) {
            *a += *b;
        }
        Ok(dy.with_data(d, dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn batch_norm_train_normalizes_each_channel() {
        let mut bn = BatchNorm2d::<f64>::new(3, &mut Init::new(0));
        let x = Tensor4::from_fn(Shape4::new(2, 3, 4, 4), |n, c, y, x| {
            (c as f64 + 1.0) * ((n * 16 + y * 4 + x) as f64).cos() + c as f64
        });
        let y = bn.forward_train(&x).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..16).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, c, i / 4, i % 4))
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running mean moved 10% toward the batch mean of channel 2
        assert!(bn.running_mean.value[2] > 0.1);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let bn = BatchNorm2d::<f64>::new(1, &mut Init::new(0));
        let x = Tensor4::filled(Shape4::new(1, 1, 2, 2), 3.0);
        let y = bn.forward(&x).unwrap();
        let expect = 3.0 / (1.0f64 + 1e-5).sqrt();
        assert!(y.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn layer_norm_unit_affine_gives_zero_mean_unit_variance() {
        let ln = LayerNorm::<f64>::new(16, 1e-5, &mut Init::new(0));
        let data: Vec<f64> = (0..4 * 16).map(|i| (i as f64 * 1.3).sin() * 50.0).collect();
        let x = Tokens::from_vec(1, 2, 2, 16, data).unwrap();
        let y = ln.forward(&x).unwrap();
        for row in y.data.chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn channel_mismatch() {
        let bn = BatchNorm2d::<f32>::new(4, &mut Init::new(0));
        assert!(bn.forward(&Tensor4::zeros(Shape4::new(1, 3, 2, 2))).is_err());
    }
}
