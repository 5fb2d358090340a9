use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Modality, PooledFeature};

/// Elementwise maximum over time steps.
pub fn temporal_max_pool(seq: &FeatureSequence) -> Result<PooledFeature> {
    Ok(PooledFeature::new(seq.modality, max_over_rows(seq.values.view())?))
}

/// Elementwise mean over time steps.
pub fn temporal_mean_pool(seq: &FeatureSequence) -> Result<PooledFeature> {
    Ok(PooledFeature::new(seq.modality, mean_over_rows(seq.values.view())?))
}

/// Max-pools word vectors into one caption vector.
pub fn text_pool(words: &FeatureSequence) -> Result<PooledFeature> {
    if words.num_steps() == 0 {
        return Err(Error::EmptyCaption);
    }
    Ok(PooledFeature::new(Modality::Text, max_over_rows(words.values.view())?))
}

pub(crate) fn max_over_rows(x: ArrayView2<f64>) -> Result<Array1<f64>> {
    if x.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(x.fold_axis(Axis(0), f64::NEG_INFINITY, |&m, &v| m.max(v)))
}

pub(crate) fn mean_over_rows(x: ArrayView2<f64>) -> Result<Array1<f64>> {
    x.mean_axis(Axis(0)).ok_or(Error::EmptySequence)
}

/// Row of the first maximal step for each column.
pub fn argmax_steps(x: ArrayView2<f64>) -> Vec<usize> {
    (0..x.ncols())
        .map(|c| {
            let col = x.column(c);
            let mut best = 0;
            for t in 1..col.len() {
                if col[t] > col[best] {
                    best = t;
                }
            }
            best
        })
        .collect()
}

/// Adjoint of [`temporal_max_pool`]: each output gradient flows to the
/// earliest maximal step of its column; all other steps get zero.
pub fn temporal_max_pool_backward(seq: &FeatureSequence, upstream: &Array1<f64>) -> Result<Array2<f64>> {
    if seq.num_steps() == 0 {
        return Err(Error::EmptySequence);
    }
    if upstream.len() != seq.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} entries for {} features",
            upstream.len(),
            seq.dim()
        )));
    }
    let mut grad = Array2::zeros(seq.values.dim());
    for (c, t) in argmax_steps(seq.values.view()).into_iter().enumerate() {
        grad[[t, c]] = upstream[c];
    }
    Ok(grad)
}

/// Adjoint of [`temporal_mean_pool`].
pub fn temporal_mean_pool_backward(num_steps: usize, upstream: &Array1<f64>) -> Result<Array2<f64>> {
    if num_steps == 0 {
        return Err(Error::EmptySequence);
    }
    let scale = 1.0 / num_steps as f64;
    Ok(Array2::from_shape_fn((num_steps, upstream.len()), |(_, c)| upstream[c] * scale))
}

/// Which visual streams feed the video head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualMode {
    /// 2D and 3D features concatenated.
    Concat,
    /// Image setting: the 2D vector alone.
    Only2D,
}

/// Concatenates pooled 2D and 3D visual vectors, 2D first. In
/// [`VisualMode::Only2D`] the 2D vector passes through and `v3d` is ignored.
pub fn concat_visual(v2d: &PooledFeature, v3d: Option<&PooledFeature>, mode: VisualMode) -> Result<PooledFeature> {
    if v2d.modality != Modality::Visual2D {
        return Err(Error::ModalityMismatch(format!("first input is {}, expected visual_2d", v2d.modality)));
    }
    match mode {
        VisualMode::Only2D => Ok(PooledFeature::new(Modality::Visual2D, v2d.values.clone())),
        VisualMode::Concat => {
            let v3d = v3d.ok_or_else(|| Error::ModalityMismatch("missing visual_3d input".into()))?;
            if v3d.modality != Modality::Visual3D {
                return Err(Error::ModalityMismatch(format!(
                    "second input is {}, expected visual_3d",
                    v3d.modality
                )));
            }
            let values = concatenate(Axis(0), &[v2d.values.view(), v3d.values.view()]).unwrap();
            Ok(PooledFeature::new(Modality::VisualConcat, values))
        }
    }
}
