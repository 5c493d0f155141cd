use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ensure_finite, Matrix, Real};
use crate::error::{Error, Result};

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::LeakyRelu => {
                if z > T::zero() {
                    z
                } else {
                    z * T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Identity => z,
        }
    }

    fn derivative<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Affine map followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    /// `in_dim × out_dim`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    activation: Activation,
}

/// What a forward pass keeps around for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub input: Matrix<T>,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn new(weight: Array2<T>, bias: Array1<T>, activation: Activation) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(Error::shape("DenseLayer::new", weight.dim(), bias.len()));
        }
        Ok(Self {
            weight: weight.as_standard_layout().to_owned(),
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight =
            Array2::from_shape_simple_fn((in_dim, out_dim), || T::lit(rng.random_range(-limit..=limit)));
        Self {
            weight,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn affine(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape(
                "dense_forward",
                x.dim(),
                self.weight.dim(),
            ));
        }
        let mut pre = x.dot(&self.weight);
        pre += &self.bias;
        Ok(pre)
    }

    /// `act(x · W + b)`, keeping the pre-activation for [`Self::backward`].
    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, LayerCache<T>)> {
        let pre = self.affine(x)?;
        let act = self.activation;
        let out = pre.mapv(|z| act.apply(z));
        ensure_finite("dense_forward", out.iter())?;
        Ok((
            out,
            LayerCache {
                input: x.clone(),
                pre,
            },
        ))
    }

    /// Forward pass without a cache.
    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = self.affine(x)?;
        let act = self.activation;
        out.mapv_inplace(|z| act.apply(z));
        ensure_finite("dense_forward", out.iter())?;
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Matrix<T>, cache: &LayerCache<T>) -> Result<LayerGrads<T>> {
        if cache.pre.ncols() != self.out_dim() || cache.input.ncols() != self.in_dim() {
            return Err(Error::Usage(format!(
                "dense_backward: cache for a {}x{} layer used with a {}x{} layer",
                cache.input.ncols(),
                cache.pre.ncols(),
                self.in_dim(),
                self.out_dim()
            )));
        }
        if grad_out.dim() != cache.pre.dim() {
            return Err(Error::shape("dense_backward", grad_out.dim(), cache.pre.dim()));
        }
        let act = self.activation;
        let mut delta = grad_out.as_standard_layout().into_owned();
        ndarray::Zip::from(&mut delta)
            .and(&cache.pre)
            .for_each(|d, &z| *d *= act.derivative(z));
        let weight = cache.input.t().dot(&delta).as_standard_layout().into_owned();
        let bias = delta.sum_axis(Axis(0));
        let input = delta.dot(&self.weight.t());
        ensure_finite("dense_backward", weight.iter().chain(bias.iter()).chain(input.iter()))?;
        Ok(LayerGrads {
            input,
            weight,
            bias,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer::new(Array2::<f64>::eye(2), Array1::zeros(2), Activation::Identity).unwrap();
        let (y, _) = layer.forward(&array![[1.0, 2.0]]).unwrap();
        assert_eq!(y, array![[1.0, 2.0]]);
    }

    #[test]
    fn relu_clamps_negative() {
        let layer = DenseLayer::new(array![[1.0f64]], Array1::zeros(1), Activation::Relu).unwrap();
        let (y, _) = layer.forward(&array![[-1.0]]).unwrap();
        assert_eq!(y, array![[0.0]]);
    }

    #[test]
    fn matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = DenseLayer::<f64>::glorot(4, 5, Activation::Identity, &mut rng);
        let x = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let (y, _) = layer.forward(&x).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = layer.bias[j];
                for k in 0..4 {
                    acc += x[[i, k]] * layer.weight[[k, j]];
                }
                assert!((acc - y[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let layer = DenseLayer::<f32>::new(Array2::eye(3), Array1::zeros(3), Activation::Relu).unwrap();
        let err = layer.forward(&Array2::zeros((2, 4))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 4)") && msg.contains("(3, 3)"), "{msg}");
    }

    #[test]
    fn identity_backward_is_passthrough() {
        let layer = DenseLayer::new(Array2::<f64>::eye(3), Array1::zeros(3), Activation::Identity).unwrap();
        let (_, cache) = layer.forward(&array![[0.5, -1.0, 2.0]]).unwrap();
        let g = array![[1.0, 2.0, 3.0]];
        assert_eq!(layer.backward(&g, &cache).unwrap().input, g);
    }

    #[test]
    fn dead_relu_units_block_gradient() {
        let layer = DenseLayer::new(array![[1.0f64, 1.0]], Array1::zeros(2), Activation::Relu).unwrap();
        let (_, cache) = layer.forward(&array![[-2.0], [-0.5]]).unwrap();
        let grads = layer.backward(&array![[1.0, 1.0], [3.0, -2.0]], &cache).unwrap();
        assert!(grads.input.iter().all(|&v| v == 0.0));
        assert!(grads.weight.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_input_is_a_numeric_error() {
        let layer = DenseLayer::new(array![[1.0f32]], Array1::zeros(1), Activation::Identity).unwrap();
        let err = layer.forward(&array![[f32::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Numeric { op: "dense_forward", .. }));
    }

    #[test]
    fn foreign_cache_is_a_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DenseLayer::<f64>::glorot(2, 3, Activation::Relu, &mut rng);
        let b = DenseLayer::<f64>::glorot(4, 3, Activation::Relu, &mut rng);
        let (y, cache) = a.forward(&Array2::ones((1, 2))).unwrap();
        assert!(matches!(b.backward(&y, &cache), Err(Error::Usage(_))));
    }
}
