//! Framewise audio encoder: a stack of affine layers applied to every
//! spectrogram frame, followed by a temporal mean pool.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init_uniform;
use super::pooling::mean_over_rows;
use crate::error::{Error, Result};
use crate::features::{Modality, PooledFeature};
use crate::frontend::Spectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    /// `[d_out, d_in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoderParams {
    pub layers: Vec<EncoderLayer>,
}

/// Per-layer outputs of a framewise pass; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub activations: Vec<Array2<f64>>,
}

impl AudioEncoderParams {
    /// ReLU hidden layers of the given widths, then an identity output layer.
    pub fn random(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut impl Rng) -> Self {
        Self::build(input_dim, hidden, output_dim, |shape| init_uniform(shape, &mut *rng))
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self::build(input_dim, hidden, output_dim, Array2::zeros)
    }

    fn build(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        mut weight: impl FnMut((usize, usize)) -> Array2<f64>,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| EncoderLayer {
                weight: weight((w[1], w[0])),
                bias: Array1::zeros(w[1]),
                activation: if i == last { Activation::Identity } else { Activation::Relu },
            })
            .collect();
        AudioEncoderParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("audio encoder has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::ShapeMismatch(format!("encoder layer {i}: bias does not match weight rows")));
            }
            if i > 0 && l.weight.ncols() != self.layers[i - 1].weight.nrows() {
                return Err(Error::ShapeMismatch(format!("encoder layer {i}: input dim does not chain")));
            }
        }
        Ok(())
    }

    /// Applies the layer stack to every row of `frames`.
    pub fn forward_frames(&self, frames: ArrayView2<f64>) -> Result<(Array2<f64>, EncoderCache)> {
        self.validate()?;
        if frames.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {} bands, got {}",
                self.input_dim(),
                frames.ncols()
            )));
        }
        let mut activations = vec![frames.to_owned()];
        for layer in &self.layers {
            let mut z = activations.last().unwrap().dot(&layer.weight.t()) + &layer.bias;
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z);
        }
        let out = activations.last().unwrap().clone();
        Ok((out, EncoderCache { activations }))
    }

    /// Backpropagates `d_out` (same shape as the framewise output) and
    /// accumulates layer gradients into `grads`.
    pub fn backward_frames(&self, cache: &EncoderCache, d_out: Array2<f64>, grads: &mut AudioEncoderParams) {
        let mut delta = d_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                // Zero-valued outputs are treated as inactive.
                Zip::from(&mut delta)
                    .and(&cache.activations[i + 1])
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let input = &cache.activations[i];
            grads.layers[i].weight += &delta.t().dot(input);
            grads.layers[i].bias += &delta.sum_axis(Axis(0));
            if i > 0 {
                delta = delta.dot(&layer.weight);
            }
        }
    }
}

/// Encodes every frame, then mean-pools over time.
pub fn audio_encoder_forward(spec: &Spectrogram, params: &AudioEncoderParams) -> Result<PooledFeature> {
    if spec.num_frames() == 0 {
        return Err(Error::EmptySequence);
    }
    let (framewise, _) = params.forward_frames(spec.frames.view())?;
    Ok(PooledFeature::new(Modality::Audio, mean_over_rows(framewise.view())?))
}
