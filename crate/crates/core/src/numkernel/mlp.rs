use ndarray::{Array1, Array2};
use rand::Rng;

use super::{Activation, DenseLayer, LayerCache, Matrix, Real};
use crate::error::{Error, Result};

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<DenseLayer<T>>,
}

/// Per-layer caches from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape<T> {
    caches: Vec<LayerCache<T>>,
}

/// Parameter gradients, one `(weight, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<(Array2<T>, Array1<T>)>,
}

impl<T: Real> Mlp<T> {
    pub fn from_layers(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    pair[0].weight.dim(),
                    pair[1].weight.dim(),
                ));
            }
        }
        if layers.is_empty() {
            return Err(Error::Usage("an Mlp needs at least one layer".into()));
        }
        Ok(Self { layers })
    }

    /// `widths = [in, h1, ..., out]`; every layer but the last uses `hidden`,
    /// the last uses `output`.
    pub fn glorot<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::glorot(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, MlpTape<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&h)?;
            caches.push(cache);
            h = out;
        }
        Ok((h, MlpTape { caches }))
    }

    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = self.layers[0].infer(x)?;
        for layer in &self.layers[1..] {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Returns the gradient with respect to the input and the parameter
    /// gradients.
    pub fn backward(&self, tape: &MlpTape<T>, grad_out: &Matrix<T>) -> Result<(Matrix<T>, MlpGrads<T>)> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "backward needs {} layer caches, tape holds {}",
                self.layers.len(),
                tape.caches.len()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            let lg = layer.backward(&g, cache)?;
            grads.push((lg.weight, lg.bias));
            g = lg.input;
        }
        grads.reverse();
        Ok((g, MlpGrads { layers: grads }))
    }

    /// Copies every parameter into one flat vector (weights then bias, per layer).
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Inverse of [`Self::flat_params`]; returns how many values were consumed.
    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<usize> {
        if flat.len() < self.num_params() {
            return Err(Error::shape("Mlp::set_flat_params", flat.len(), self.num_params()));
        }
        let mut at = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = flat[at];
                at += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[at];
                at += 1;
            }
        }
        Ok(at)
    }

    /// Mutable views of each parameter tensor, in the same order as
    /// [`MlpGrads::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(vec![l.in_dim(), l.out_dim()]);
            out.push(vec![l.out_dim()]);
        }
        out
    }
}

impl<T: Real> MlpGrads<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads<T>) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, c: T) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * c);
            b.mapv_inplace(|v| v * c);
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (w, b) in &self.layers {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn flat(&self) -> Vec<T> {
        self.slices().into_iter().flatten().copied().collect()
    }
}
