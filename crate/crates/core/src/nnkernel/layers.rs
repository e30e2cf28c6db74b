use serde::{Deserialize, Serialize};

use super::{KernelError, Matrix, RngStream};

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub step: u64,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            step: 0,
        }
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut RngStream) -> Self {
        let mut value = Matrix::zeros(rows, cols);
        for v in value.as_mut_slice() {
            *v = (2.0 * rng.uniform() - 1.0) * bound;
        }
        Self::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Matrix) -> Result<(), KernelError> {
        self.grad.add_assign(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(pre),
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large x.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output of a dense layer with the cached pre-activation.
#[derive(Debug, Clone)]
pub struct DenseOut {
    pub pre: Matrix,
    pub output: Matrix,
}

/// Fully connected layer `y = act(x·W + b)` with `W` of shape `in × out`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    /// PyTorch-style initialisation, `U(-1/√in, 1/√in)` for weights and bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weight: Param::uniform(inputs, outputs, bound, rng),
            bias: Param::uniform(1, outputs, bound, rng),
        }
    }

    pub fn from_weights(weight: Matrix, bias: Matrix) -> Result<Self, KernelError> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(KernelError::ShapeMismatch {
                op: "dense",
                left: weight.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix, act: Activation) -> Result<DenseOut, KernelError> {
        let mut pre = x.matmul(&self.weight.value)?;
        pre.add_row_broadcast(&self.bias.value)?;
        let output = match act {
            Activation::Identity => pre.clone(),
            _ => pre.map(|v| act.apply(v)),
        };
        Ok(DenseOut { pre, output })
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &mut self,
        x: &Matrix,
        out: &DenseOut,
        dy: &Matrix,
        act: Activation,
    ) -> Result<Matrix, KernelError> {
        let dpre = match act {
            Activation::Identity => dy.clone(),
            _ => dy.zip_map(&out.pre, |g, p| g * act.derivative(p))?,
        };
        let dw = x.t_matmul(&dpre)?;
        self.weight.accumulate(&dw)?;
        self.bias.accumulate(&dpre.sum_rows())?;
        dpre.matmul_t(&self.weight.value)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Cached batch statistics for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

/// Per-feature batch normalisation with optional affine parameters.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub features: usize,
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// `(gamma, beta)` when affine.
    pub affine: Option<(Param, Param)>,
}

impl BatchNorm {
    pub fn new(features: usize, affine: bool) -> Self {
        Self {
            features,
            eps: 1e-5,
            momentum: 0.1,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            affine: affine.then(|| {
                (
                    Param::new(Matrix::filled(1, features, 1.0)),
                    Param::new(Matrix::zeros(1, features)),
                )
            }),
        }
    }

    fn check_width(&self, x: &Matrix) -> Result<(), KernelError> {
        if x.cols() != self.features {
            return Err(KernelError::ShapeMismatch {
                op: "batchnorm",
                left: x.shape(),
                right: (1, self.features),
            });
        }
        Ok(())
    }

    fn apply_affine(&self, x_hat: &Matrix) -> Matrix {
        match &self.affine {
            None => x_hat.clone(),
            Some((gamma, beta)) => {
                let mut y = x_hat.clone();
                for i in 0..y.rows() {
                    for (j, v) in y.row_mut(i).iter_mut().enumerate() {
                        *v = *v * gamma.value[(0, j)] + beta.value[(0, j)];
                    }
                }
                y
            }
        }
    }

    /// Training-mode forward: normalises with batch statistics and updates
    /// the running estimates (unbiased variance, exponential averaging).
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, BatchNormCache), KernelError> {
        self.check_width(x)?;
        let n = x.rows();
        if n < 2 {
            return Err(KernelError::BatchTooSmall(n));
        }
        let mut mean = vec![0.0; self.features];
        for row in x.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; self.features];
        for row in x.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = x.clone();
        for i in 0..n {
            for (j, v) in x_hat.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let unbias = n as f64 / (n as f64 - 1.0);
        for j in 0..self.features {
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] =
                (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j] * unbias;
        }
        let y = self.apply_affine(&x_hat);
        Ok((y, BatchNormCache { x_hat, inv_std }))
    }

    /// Evaluation-mode forward with running statistics.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix, KernelError> {
        self.check_width(x)?;
        let mut x_hat = x.clone();
        for i in 0..x.rows() {
            for (j, v) in x_hat.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.running_mean[j]) / (self.running_var[j] + self.eps).sqrt();
            }
        }
        Ok(self.apply_affine(&x_hat))
    }

    /// Backward pass for a training-mode forward; returns `dL/dx`.
    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Matrix) -> Result<Matrix, KernelError> {
        let n = dy.rows() as f64;
        let dx_hat = match &mut self.affine {
            None => dy.clone(),
            Some((gamma, beta)) => {
                let mut dgamma = Matrix::zeros(1, self.features);
                let mut dx_hat = dy.clone();
                for i in 0..dy.rows() {
                    for j in 0..self.features {
                        dgamma[(0, j)] += dy[(i, j)] * cache.x_hat[(i, j)];
                        dx_hat[(i, j)] *= gamma.value[(0, j)];
                    }
                }
                gamma.accumulate(&dgamma)?;
                beta.accumulate(&dy.sum_rows())?;
                dx_hat
            }
        };
        let sum_d = dx_hat.sum_rows();
        let sum_dx = dx_hat.zip_map(&cache.x_hat, |a, b| a * b)?.sum_rows();
        let mut dx = Matrix::zeros(dy.rows(), self.features);
        for i in 0..dy.rows() {
            for j in 0..self.features {
                dx[(i, j)] = cache.inv_std[j] / n
                    * (n * dx_hat[(i, j)] - sum_d[(0, j)] - cache.x_hat[(i, j)] * sum_dx[(0, j)]);
            }
        }
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.affine {
            None => Vec::new(),
            Some((g, b)) => vec![g, b],
        }
    }
}

/// Inverted dropout. Returns the output and the multiplicative mask
/// (entries are `0` or `1/(1-p)`); eval mode is the identity.
pub fn dropout(x: &Matrix, p: f64, train: bool, rng: &mut RngStream) -> (Matrix, Option<Matrix>) {
    if !train || p <= 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 - p;
    let mut mask = Matrix::zeros(x.rows(), x.cols());
    for m in mask.as_mut_slice() {
        *m = if rng.uniform() < keep { 1.0 / keep } else { 0.0 };
    }
    let y = x.zip_map(&mask, |a, b| a * b).expect("same shape");
    (y, Some(mask))
}

/// Reparameterised Gaussian draw `z = mu + exp(log_var/2)·ε`; returns `(z, ε)`.
pub fn sample_gaussian(
    mu: &Matrix,
    log_var: &Matrix,
    rng: &mut RngStream,
) -> Result<(Matrix, Matrix), KernelError> {
    if mu.shape() != log_var.shape() {
        return Err(KernelError::ShapeMismatch {
            op: "sample_gaussian",
            left: mu.shape(),
            right: log_var.shape(),
        });
    }
    let mut eps = Matrix::zeros(mu.rows(), mu.cols());
    for e in eps.as_mut_slice() {
        *e = rng.standard_normal();
    }
    let mut z = mu.clone();
    for ((zv, &lv), &e) in z.as_mut_slice().iter_mut().zip(log_var.as_slice()).zip(eps.as_slice()) {
        *zv += (0.5 * lv).exp() * e;
    }
    Ok((z, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernel::gradcheck::{central_difference, relative_error};

    #[test]
    fn dense_identity_forward() {
        let layer = Dense::from_weights(Matrix::identity(2), Matrix::zeros(1, 2)).unwrap();
        let x = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let y = layer.forward(&x, Activation::Identity).unwrap();
        assert_eq!(y.output.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn dense_forward_matches_triple_loop() {
        let mut rng = RngStream::new(11);
        let layer = Dense::init(4, 3, &mut rng);
        let x = Param::uniform(3, 4, 2.0, &mut rng).value;
        let y = layer.forward(&x, Activation::Softplus).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = layer.bias.value[(0, j)];
                for k in 0..4 {
                    s += x[(i, k)] * layer.weight.value[(k, j)];
                }
                let expect = (1.0 + s.exp()).ln();
                assert!((y.output[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_backward_square_loss() {
        // f(w) = (w·x)² with x = 1, w = 3 → df/dw = 6.
        let mut layer = Dense::from_weights(Matrix::filled(1, 1, 3.0), Matrix::zeros(1, 1)).unwrap();
        let x = Matrix::filled(1, 1, 1.0);
        let out = layer.forward(&x, Activation::Identity).unwrap();
        let dy = out.output.map(|y| 2.0 * y);
        layer.backward(&x, &out, &dy, Activation::Identity).unwrap();
        assert_eq!(layer.weight.grad[(0, 0)], 6.0);
    }

    #[test]
    fn dense_gradcheck() {
        let mut rng = RngStream::new(5);
        let mut layer = Dense::init(3, 2, &mut rng);
        let x = Param::uniform(4, 3, 1.5, &mut rng).value;
        let coef = Param::uniform(4, 2, 1.0, &mut rng).value;
        let loss = |l: &Dense| -> f64 {
            let y = l.forward(&x, Activation::Softplus).unwrap().output;
            y.as_slice().iter().zip(coef.as_slice()).map(|(a, b)| a * b).sum()
        };
        let out = layer.forward(&x, Activation::Softplus).unwrap();
        layer.backward(&x, &out, &coef, Activation::Softplus).unwrap();
        let base = layer.clone();
        let numeric = central_difference(
            |w| {
                let mut l = base.clone();
                l.weight.value.as_mut_slice().copy_from_slice(w);
                loss(&l)
            },
            base.weight.value.as_slice(),
            1e-5,
        );
        for (a, n) in layer.weight.grad.as_slice().iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn batchnorm_two_rows() {
        let mut bn = BatchNorm::new(1, false);
        let x = Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        assert!((y[(0, 0)] + 1.0).abs() < 1e-5);
        assert!((y[(1, 0)] - 1.0).abs() < 1e-5);
        assert!(matches!(
            bn.forward_train(&Matrix::zeros(1, 1)),
            Err(KernelError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let mut bn = BatchNorm::new(3, false);
        bn.eps = 0.0;
        let x = Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, -7.0]).unwrap();
        assert_eq!(bn.forward_eval(&x).unwrap(), x);
    }

    #[test]
    fn batchnorm_gradcheck() {
        let mut rng = RngStream::new(9);
        let x = Param::uniform(4, 3, 2.0, &mut rng).value;
        let coef = Param::uniform(4, 3, 1.0, &mut rng).value;
        let mut bn = BatchNorm::new(3, true);
        if let Some((g, b)) = &mut bn.affine {
            g.value = Param::uniform(1, 3, 1.0, &mut rng).value.map(|v| v + 1.5);
            b.value = Param::uniform(1, 3, 1.0, &mut rng).value;
        }
        let base = bn.clone();
        let loss = |xv: &[f64]| -> f64 {
            let mut b = base.clone();
            let xm = Matrix::from_vec(4, 3, xv.to_vec()).unwrap();
            let (y, _) = b.forward_train(&xm).unwrap();
            // Non-linear read-out so the gradient is not trivially zero.
            y.as_slice().iter().zip(coef.as_slice()).map(|(a, c)| c * a + 0.3 * a * a * a).sum()
        };
        let (y, cache) = bn.forward_train(&x).unwrap();
        let dy = y.zip_map(&coef, |a, c| c + 0.9 * a * a).unwrap();
        let dx = bn.backward(&cache, &dy).unwrap();
        let numeric = central_difference(loss, x.as_slice(), 1e-5);
        for (a, n) in dx.as_slice().iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-4, "{a} vs {n}");
        }
        let (gamma, _) = bn.affine.as_ref().unwrap();
        let numeric_gamma = central_difference(
            |g| {
                let mut b = base.clone();
                b.affine.as_mut().unwrap().0.value.as_mut_slice().copy_from_slice(g);
                let (y, _) = b.forward_train(&x).unwrap();
                y.as_slice().iter().zip(coef.as_slice()).map(|(a, c)| c * a + 0.3 * a * a * a).sum()
            },
            base.affine.as_ref().unwrap().0.value.as_slice(),
            1e-5,
        );
        for (a, n) in gamma.grad.as_slice().iter().zip(&numeric_gamma) {
            assert!(relative_error(*a, *n) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn dropout_eval_identity_and_train_unbiased() {
        let mut rng = RngStream::new(1);
        let x = Matrix::filled(200, 50, 1.0);
        let (y, mask) = dropout(&x, 0.2, false, &mut rng);
        assert_eq!(y, x);
        assert!(mask.is_none());
        let (y, _) = dropout(&x, 0.2, true, &mut rng);
        let mean = y.as_slice().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn gaussian_sampling() {
        let mu = Matrix::from_vec(1, 2, vec![0.5, -2.0]).unwrap();
        let lv = Matrix::filled(1, 2, f64::NEG_INFINITY);
        let (z, _) = sample_gaussian(&mu, &lv, &mut RngStream::new(3)).unwrap();
        assert_eq!(z, mu);

        let lv = Matrix::zeros(1, 2);
        let a = sample_gaussian(&mu, &lv, &mut RngStream::new(3)).unwrap().0;
        let b = sample_gaussian(&mu, &lv, &mut RngStream::new(3)).unwrap().0;
        assert_eq!(a, b);

        let n = 100_000;
        let mu = Matrix::zeros(n, 1);
        let lv = Matrix::zeros(n, 1);
        let (z, _) = sample_gaussian(&mu, &lv, &mut RngStream::new(42)).unwrap();
        let mean = z.as_slice().iter().sum::<f64>() / n as f64;
        let var = z.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.98..=1.02).contains(&var), "var {var}");
    }
}
