//! Non-linear gated projection heads.
//!
//! A head maps `x` to `h ⊙ σ(W2·h + b2)` with `h = W1·x + b1`, so each output
//! coordinate is rescaled by a learned gate in `(0, 1)`. The fused head sums
//! two affine branches (audio and text) into `h` before a shared gate.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::init_uniform;
use crate::error::{Error, Result};
use crate::features::PooledFeature;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    /// `[d_out, d_in]`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `[d_out, d_out]`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl GatingParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        GatingParams {
            w1: Array2::zeros((d_out, d_in)),
            b1: Array1::zeros(d_out),
            w2: Array2::zeros((d_out, d_out)),
            b2: Array1::zeros(d_out),
        }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn random(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        GatingParams {
            w1: init_uniform((d_out, d_in), rng),
            b1: Array1::zeros(d_out),
            w2: init_uniform((d_out, d_out), rng),
            b2: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w1.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_out();
        if self.b1.len() != d || self.w2.dim() != (d, d) || self.b2.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "gating params: w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                self.w1.dim(),
                self.b1.len(),
                self.w2.dim(),
                self.b2.len()
            )));
        }
        Ok(())
    }

    /// Row-wise projection of `x: [B, d_in]`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, GateCache)> {
        self.validate()?;
        if x.ncols() != self.d_in() {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} inputs, got {}",
                self.d_in(),
                x.ncols()
            )));
        }
        let h = x.dot(&self.w1.t()) + &self.b1;
        Ok(gate_forward(h, &self.w2, &self.b2))
    }

    /// Accumulates parameter gradients into `grads` and returns `d loss / d x`.
    pub fn backward_batch(
        &self,
        x: ArrayView2<f64>,
        cache: &GateCache,
        d_out: &Array2<f64>,
        grads: &mut GatingParams,
    ) -> Array2<f64> {
        let dh = gate_backward(cache, d_out, &self.w2, &mut grads.w2, &mut grads.b2);
        grads.w1 += &dh.t().dot(&x);
        grads.b1 += &dh.sum_axis(Axis(0));
        dh.dot(&self.w1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedGatingParams {
    /// `[d_out, d_audio]`
    pub wa1: Array2<f64>,
    /// `[d_out, d_text]`
    pub wt1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `[d_out, d_out]`
    pub wg: Array2<f64>,
    pub bg: Array1<f64>,
}

impl FusedGatingParams {
    pub fn zeros(d_audio: usize, d_text: usize, d_out: usize) -> Self {
        FusedGatingParams {
            wa1: Array2::zeros((d_out, d_audio)),
            wt1: Array2::zeros((d_out, d_text)),
            b1: Array1::zeros(d_out),
            wg: Array2::zeros((d_out, d_out)),
            bg: Array1::zeros(d_out),
        }
    }

    pub fn random(d_audio: usize, d_text: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        FusedGatingParams {
            wa1: init_uniform((d_out, d_audio), rng),
            wt1: init_uniform((d_out, d_text), rng),
            b1: Array1::zeros(d_out),
            wg: init_uniform((d_out, d_out), rng),
            bg: Array1::zeros(d_out),
        }
    }

    pub fn d_out(&self) -> usize {
        self.wa1.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_out();
        if self.wt1.nrows() != d || self.b1.len() != d || self.wg.dim() != (d, d) || self.bg.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "fused params: wa1 {:?}, wt1 {:?}, b1 {}, wg {:?}, bg {}",
                self.wa1.dim(),
                self.wt1.dim(),
                self.b1.len(),
                self.wg.dim(),
                self.bg.len()
            )));
        }
        Ok(())
    }

    /// The audio branch with its own gate, as a plain head.
    pub fn audio_head(&self) -> GatingParams {
        GatingParams {
            w1: self.wa1.clone(),
            b1: self.b1.clone(),
            w2: self.wg.clone(),
            b2: self.bg.clone(),
        }
    }

    pub fn forward_batch(&self, a: ArrayView2<f64>, t: ArrayView2<f64>) -> Result<(Array2<f64>, GateCache)> {
        self.validate()?;
        if a.ncols() != self.wa1.ncols() || t.ncols() != self.wt1.ncols() || a.nrows() != t.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "fused head expects [B, {}] audio and [B, {}] text, got {:?} and {:?}",
                self.wa1.ncols(),
                self.wt1.ncols(),
                a.dim(),
                t.dim()
            )));
        }
        let h = a.dot(&self.wa1.t()) + &self.b1 + t.dot(&self.wt1.t());
        Ok(gate_forward(h, &self.wg, &self.bg))
    }

    /// Accumulates parameter gradients and returns `(d/da, d/dt)`.
    pub fn backward_batch(
        &self,
        a: ArrayView2<f64>,
        t: ArrayView2<f64>,
        cache: &GateCache,
        d_out: &Array2<f64>,
        grads: &mut FusedGatingParams,
    ) -> (Array2<f64>, Array2<f64>) {
        let dh = gate_backward(cache, d_out, &self.wg, &mut grads.wg, &mut grads.bg);
        grads.wa1 += &dh.t().dot(&a);
        grads.wt1 += &dh.t().dot(&t);
        grads.b1 += &dh.sum_axis(Axis(0));
        (dh.dot(&self.wa1), dh.dot(&self.wt1))
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GateCache {
    pub h: Array2<f64>,
    pub gate: Array2<f64>,
}

fn gate_forward(h: Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> (Array2<f64>, GateCache) {
    let gate = (h.dot(&w.t()) + b).mapv_into(sigmoid);
    let out = &h * &gate;
    (out, GateCache { h, gate })
}

fn gate_backward(
    cache: &GateCache,
    d_out: &Array2<f64>,
    w: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    // d/dz of σ(z) is g(1 - g).
    let mut dz = Array2::zeros(d_out.dim());
    Zip::from(&mut dz)
        .and(d_out)
        .and(&cache.h)
        .and(&cache.gate)
        .for_each(|dz, &d, &h, &g| *dz = d * h * g * (1.0 - g));
    *dw += &dz.t().dot(&cache.h);
    *db += &dz.sum_axis(Axis(0));
    d_out * &cache.gate + dz.dot(w)
}

fn single_row(x: &PooledFeature) -> ArrayView2<'_, f64> {
    x.values.view().insert_axis(Axis(0))
}

/// `h ⊙ σ(W2·h + b2)` with `h = W1·x + b1`.
pub fn gated_projection(x: &PooledFeature, p: &GatingParams) -> Result<Array1<f64>> {
    let (out, _) = p.forward_batch(single_row(x))?;
    Ok(out.row(0).to_owned())
}

/// `h ⊙ σ(Wg·h + bg)` with `h = Wa1·a + Wt1·t + b1`.
pub fn fused_gated_projection(a: &PooledFeature, t: &PooledFeature, p: &FusedGatingParams) -> Result<Array1<f64>> {
    let (out, _) = p.forward_batch(single_row(a), single_row(t))?;
    Ok(out.row(0).to_owned())
}
