//! Contrastive losses over a batch of aligned embedding pairs.
//!
//! Every loss is a function of the score matrix `S[i][j] = x_i · y_j`, where
//! row `i` of both sets is a true pair and all `j != i` are negatives. Each
//! loss returns its value together with `d loss / d S`, from which the
//! embedding gradients follow as `dX = dS · Y` and `dY = dSᵀ · X`.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Symmetric margin softmax.
    Mms,
    InfoNce,
    MaxMargin,
    Bce,
    MilNce,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Mms,
        LossKind::InfoNce,
        LossKind::MaxMargin,
        LossKind::Bce,
        LossKind::MilNce,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Margin subtracted from the positive logit (MMS).
    pub margin: f64,
    /// Hinge margin (MaxMargin).
    pub ranking_margin: f64,
    /// Number of neighboring clips counted as positives (MIL-NCE).
    pub neighbor_radius: usize,
    /// Score both retrieval directions (InfoNCE).
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Mms,
            margin: 0.001,
            ranking_margin: 0.1,
            neighbor_radius: 1,
            symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.ranking_margin >= 0.0) {
            return Err(Error::InvalidConfig("loss margins must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Per-pair contributions; entries sum to `value`. Softmax losses put
    /// each query's term on the diagonal.
    pub per_pair_terms: Option<Array2<f64>>,
}

impl LossValue {
    fn scalar(value: f64) -> Self {
        LossValue {
            value,
            per_pair_terms: None,
        }
    }
}

/// Value, per-pair terms and score-matrix gradient of one loss evaluation.
#[derive(Debug, Clone)]
pub struct ScoreLoss {
    pub value: f64,
    pub terms: Array2<f64>,
    pub d_scores: Array2<f64>,
}

fn check_pair(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::CountMismatch {
            left: x.nrows(),
            right: y.nrows(),
        });
    }
    if x.ncols() != y.ncols() {
        return Err(Error::DimMismatch {
            left: x.ncols(),
            right: y.ncols(),
        });
    }
    Ok(())
}

/// `ln Σ exp(z)` with the maximum subtracted first.
fn log_sum_exp(z: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = z.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// One retrieval direction of the margin softmax: query `i` must pick
/// column `i` of row `i`, whose logit is lowered by `margin`.
/// Adds `scale * d loss / d S` into `d_scores` (transposed if `transpose`).
fn softmax_direction(
    scores: ArrayView2<f64>,
    margin: f64,
    transpose: bool,
    terms: &mut Array2<f64>,
    d_scores: &mut Array2<f64>,
) -> f64 {
    let b = scores.nrows();
    let inv_b = 1.0 / b as f64;
    let at = |i: usize, j: usize| if transpose { scores[[j, i]] } else { scores[[i, j]] };
    let mut total = 0.0;
    for i in 0..b {
        let logit = |j: usize| if j == i { at(i, j) - margin } else { at(i, j) };
        let lse = log_sum_exp((0..b).map(logit));
        let term = (lse - logit(i)) * inv_b;
        terms[[i, i]] += term;
        total += term;
        for j in 0..b {
            let p = (logit(j) - lse).exp();
            let g = (p - if i == j { 1.0 } else { 0.0 }) * inv_b;
            if transpose {
                d_scores[[j, i]] += g;
            } else {
                d_scores[[i, j]] += g;
            }
        }
    }
    total
}

/// Loss of the configured kind evaluated on a square score matrix.
pub fn score_loss(config: &LossConfig, scores: ArrayView2<f64>, neighbors: Option<&[Vec<usize>]>) -> Result<ScoreLoss> {
    config.validate()?;
    let b = scores.nrows();
    if scores.ncols() != b {
        return Err(Error::CountMismatch { left: b, right: scores.ncols() });
    }
    let mut terms = Array2::zeros((b, b));
    let mut d = Array2::zeros((b, b));
    let value = match config.kind {
        LossKind::Mms => {
            softmax_direction(scores, config.margin, false, &mut terms, &mut d)
                + softmax_direction(scores, config.margin, true, &mut terms, &mut d)
        }
        LossKind::InfoNce => {
            let mut v = softmax_direction(scores, 0.0, false, &mut terms, &mut d);
            if config.symmetric {
                v += softmax_direction(scores, 0.0, true, &mut terms, &mut d);
            }
            v
        }
        LossKind::MaxMargin => {
            let m = config.ranking_margin;
            let inv_b = 1.0 / b as f64;
            let mut total = 0.0;
            for i in 0..b {
                let pos = scores[[i, i]];
                for j in (0..b).filter(|&j| j != i) {
                    let mut term = 0.0;
                    let h1 = m + scores[[i, j]] - pos;
                    if h1 > 0.0 {
                        term += h1;
                        d[[i, j]] += inv_b;
                        d[[i, i]] -= inv_b;
                    }
                    let h2 = m + scores[[j, i]] - pos;
                    if h2 > 0.0 {
                        term += h2;
                        d[[j, i]] += inv_b;
                        d[[i, i]] -= inv_b;
                    }
                    terms[[i, j]] = term * inv_b;
                    total += term * inv_b;
                }
            }
            total
        }
        LossKind::Bce => {
            // Positives are weighted by B - 1 to balance the B(B-1) negatives.
            let inv_b2 = 1.0 / (b * b) as f64;
            let pos_weight = (b - 1) as f64;
            let mut total = 0.0;
            for i in 0..b {
                for j in 0..b {
                    let s = scores[[i, j]];
                    let (term, grad) = if i == j {
                        // -ln σ(s) = softplus(-s)
                        (pos_weight * softplus(-s), -pos_weight * crate::model::sigmoid(-s))
                    } else {
                        // -ln(1 - σ(s)) = softplus(s)
                        (softplus(s), crate::model::sigmoid(s))
                    };
                    terms[[i, j]] = term * inv_b2;
                    total += term * inv_b2;
                    d[[i, j]] = grad * inv_b2;
                }
            }
            total
        }
        LossKind::MilNce => {
            let neighbors = neighbors.ok_or(Error::MissingNeighborMap)?;
            if neighbors.len() != b {
                return Err(Error::CountMismatch { left: b, right: neighbors.len() });
            }
            let inv_b = 1.0 / b as f64;
            let mut total = 0.0;
            for i in 0..b {
                let mut positives = vec![i];
                positives.extend(neighbors[i].iter().copied().filter(|&p| p != i && p < b));
                positives.sort_unstable();
                positives.dedup();
                let row = scores.row(i);
                let lse_all = log_sum_exp(row.iter().copied());
                let lse_pos = log_sum_exp(positives.iter().map(|&p| row[p]));
                let term = (lse_all - lse_pos) * inv_b;
                terms[[i, i]] = term;
                total += term;
                for j in 0..b {
                    d[[i, j]] += (row[j] - lse_all).exp() * inv_b;
                }
                for &p in &positives {
                    d[[i, p]] -= (row[p] - lse_pos).exp() * inv_b;
                }
            }
            total
        }
    };
    Ok(ScoreLoss {
        value,
        terms,
        d_scores: d,
    })
}

/// Loss value and gradients with respect to both embedding sets.
pub fn pair_loss_with_grad(
    config: &LossConfig,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    neighbors: Option<&[Vec<usize>]>,
) -> Result<(ScoreLoss, Array2<f64>, Array2<f64>)> {
    check_pair(x, y)?;
    let scores = x.dot(&y.t());
    let loss = score_loss(config, scores.view(), neighbors)?;
    let dx = loss.d_scores.dot(&y);
    let dy = loss.d_scores.t().dot(&x);
    Ok((loss, dx, dy))
}

/// Symmetric margin softmax `L(x, y) + L(y, x)`, where
/// `L(x, y) = -(1/B) Σ_i ln( e^{x_i·y_i - δ} / (e^{x_i·y_i - δ} + Σ_{j≠i} e^{x_i·y_j}) )`.
pub fn mms_loss(x: ArrayView2<f64>, y: ArrayView2<f64>, margin: f64) -> Result<LossValue> {
    let config = LossConfig {
        kind: LossKind::Mms,
        margin,
        ..LossConfig::default()
    };
    ablation_loss(&config, x, y, None)
}

/// Any loss of the ablation family, selected by `config.kind`.
pub fn ablation_loss(
    config: &LossConfig,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    neighbors: Option<&[Vec<usize>]>,
) -> Result<LossValue> {
    check_pair(x, y)?;
    if config.kind == LossKind::MilNce && neighbors.is_none() {
        return Err(Error::MissingNeighborMap);
    }
    let scores = x.dot(&y.t());
    let loss = score_loss(config, scores.view(), neighbors)?;
    Ok(LossValue {
        value: loss.value,
        per_pair_terms: Some(loss.terms),
    })
}

/// `mms(v, a) + mms(a, t) + mms(v, t)`.
pub fn tri_modal_loss(v: ArrayView2<f64>, a: ArrayView2<f64>, t: ArrayView2<f64>, margin: f64) -> Result<LossValue> {
    for rows in [a.nrows(), t.nrows()] {
        if rows != v.nrows() {
            return Err(Error::CountMismatch {
                left: v.nrows(),
                right: rows,
            });
        }
    }
    let value = mms_loss(v, a, margin)?.value + mms_loss(a, t, margin)?.value + mms_loss(v, t, margin)?.value;
    Ok(LossValue::scalar(value))
}

/// Margin softmax between video and fused audio+text embeddings.
pub fn fused_loss(v: ArrayView2<f64>, language: ArrayView2<f64>, margin: f64) -> Result<LossValue> {
    mms_loss(v, language, margin)
}

/// Per-query loss terms (diagonal of the per-pair matrix for softmax kinds).
pub fn per_query_terms(value: &LossValue) -> Option<Array1<f64>> {
    value.per_pair_terms.as_ref().map(|t| t.sum_axis(ndarray::Axis(1)))
}
