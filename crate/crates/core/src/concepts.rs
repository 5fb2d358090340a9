//! Probing embedding dimensions by the labels of their maximally activating
//! visual inputs and audio frames.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Modality};
use crate::frontend::Spectrogram;
use crate::model::{ModelConfig, ModelParams};
use crate::sampler::{evaluation_clips, AsrSegment, Dataset, SamplerConfig};

pub const DEFAULT_TOP_K: usize = 50;

/// Embeddings (one row per input) with an identifier and label set per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub values: Array2<f64>,
    pub labels: Vec<BTreeSet<String>>,
}

impl LabeledSet {
    pub fn new(ids: Vec<String>, values: Array2<f64>, labels: Vec<BTreeSet<String>>) -> Result<Self> {
        if ids.len() != values.nrows() || labels.len() != values.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids and {} label sets for {} rows",
                ids.len(),
                labels.len(),
                values.nrows()
            )));
        }
        Ok(LabeledSet { ids, values, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-frame audio embeddings: the audio branch without its temporal pooling.
/// Timestamps follow the spectrogram hop.
pub fn framewise_audio_embeddings(spec: &Spectrogram, params: &ModelParams) -> Result<FeatureSequence> {
    let values = crate::model::framewise_audio_embeddings(spec.frames.view(), params)?;
    let hop = spec.config.hop_ms;
    let timestamps_ms = (0..values.nrows()).map(|i| (i as f64 * hop).round() as u64).collect();
    FeatureSequence::new(Modality::Audio, values, timestamps_ms)
}

/// Row indices of the `k` largest values in column `dim`, descending, ties
/// by row order.
pub fn top_activations(set: &LabeledSet, dim: usize, k: usize) -> Result<Vec<usize>> {
    if k > set.len() {
        return Err(Error::KTooLarge { k, available: set.len() });
    }
    if dim >= set.dim() {
        return Err(Error::ShapeMismatch(format!("dimension {dim} of {}", set.dim())));
    }
    let col = set.values.column(dim);
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Fraction of `top` whose label set contains `label`.
pub fn purity(top: &[usize], label_sets: &[BTreeSet<String>], label: &str) -> f64 {
    if top.is_empty() {
        return 0.0;
    }
    let hits = top.iter().filter(|&&i| label_sets[i].contains(label)).count();
    hits as f64 / top.len() as f64
}

/// Most frequent label over `top`, lexicographically smallest on ties.
pub fn modal_label(top: &[usize], label_sets: &[BTreeSet<String>]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &i in top {
        for l in &label_sets[i] {
            *counts.entry(l.as_str()).or_default() += 1;
        }
    }
    // BTreeMap iterates lexicographically, so the first maximum wins ties.
    let mut best: Option<(&str, usize)> = None;
    for (l, c) in counts {
        if best.map_or(true, |(_, bc)| c > bc) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionLabel {
    pub audio_label: Option<String>,
    pub visual_label: Option<String>,
    pub audio_purity: f64,
    pub visual_purity: f64,
    pub combined: f64,
}

impl DimensionLabel {
    pub fn new(audio_label: Option<String>, audio_purity: f64, visual_label: Option<String>, visual_purity: f64) -> Self {
        DimensionLabel {
            audio_label,
            visual_label,
            audio_purity,
            visual_purity,
            combined: (audio_purity * visual_purity).sqrt(),
        }
    }
}

/// Top-`k` rows per dimension for each modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationIndex {
    pub k: usize,
    pub visual: Vec<Vec<usize>>,
    pub audio: Vec<Vec<usize>>,
}

impl ActivationIndex {
    pub fn build(visual: &LabeledSet, audio: &LabeledSet, k: usize) -> Result<Self> {
        if visual.dim() != audio.dim() {
            return Err(Error::DimMismatch {
                left: visual.dim(),
                right: audio.dim(),
            });
        }
        let per_dim = |set: &LabeledSet| (0..set.dim()).map(|d| top_activations(set, d, k)).collect::<Result<Vec<_>>>();
        Ok(ActivationIndex {
            k,
            visual: per_dim(visual)?,
            audio: per_dim(audio)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionEntry {
    pub index: usize,
    #[serde(flatten)]
    pub label: DimensionLabel,
    pub visual_exemplars: Vec<String>,
    pub audio_exemplars: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub k: usize,
    /// Every dimension, by combined purity descending, ties by index.
    pub dimensions: Vec<DimensionEntry>,
}

impl ConceptReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Text table of the `rows` best dimensions.
    pub fn format_table(&self, rows: usize) -> String {
        let mut out = format!(
            "{:>5}  {:<16} {:>6}  {:<16} {:>6}  {:>8}\n",
            "dim", "visual", "pur", "audio", "pur", "combined"
        );
        for e in self.dimensions.iter().take(rows) {
            let l = &e.label;
            out.push_str(&format!(
                "{:>5}  {:<16} {:>6.2}  {:<16} {:>6.2}  {:>8.3}\n",
                e.index,
                l.visual_label.as_deref().unwrap_or("-"),
                l.visual_purity,
                l.audio_label.as_deref().unwrap_or("-"),
                l.audio_purity,
                l.combined
            ));
        }
        out
    }
}

/// Labels every dimension from its top-`k` visual and audio activations and
/// ranks dimensions by the geometric mean of the two purities.
pub fn concept_report(visual: &LabeledSet, audio: &LabeledSet, k: usize) -> Result<ConceptReport> {
    if visual.labels.iter().all(BTreeSet::is_empty) {
        return Err(Error::EmptyLabelSpace("visual".into()));
    }
    if audio.labels.iter().all(BTreeSet::is_empty) {
        return Err(Error::EmptyLabelSpace("audio".into()));
    }
    let index = ActivationIndex::build(visual, audio, k)?;
    let mut dimensions: Vec<DimensionEntry> = (0..visual.dim())
        .map(|d| {
            let (vt, at) = (&index.visual[d], &index.audio[d]);
            let vl = modal_label(vt, &visual.labels);
            let al = modal_label(at, &audio.labels);
            let vp = vl.as_deref().map_or(0.0, |l| purity(vt, &visual.labels, l));
            let ap = al.as_deref().map_or(0.0, |l| purity(at, &audio.labels, l));
            DimensionEntry {
                index: d,
                label: DimensionLabel::new(al, ap, vl, vp),
                visual_exemplars: vt.iter().map(|&i| visual.ids[i].clone()).collect(),
                audio_exemplars: at.iter().map(|&i| audio.ids[i].clone()).collect(),
            }
        })
        .collect();
    dimensions.sort_by(|a, b| b.label.combined.total_cmp(&a.label.combined).then(a.index.cmp(&b.index)));
    Ok(ConceptReport { k, dimensions })
}

/// Visual and audio probe sets from one evaluation clip per video.
///
/// Each video contributes its video embedding (labelled with its manifest
/// labels) and one framewise audio embedding per spectrogram frame. Frames
/// are labelled with the transcript words within one second of the frame
/// when the video has a transcript, otherwise with the manifest labels.
pub fn probe_sets(
    params: &ModelParams,
    model: &ModelConfig,
    dataset: &Dataset,
    sampler: &SamplerConfig,
) -> Result<(LabeledSet, LabeledSet)> {
    let batch = evaluation_clips(dataset, sampler, &model.required_modalities())?;
    let emb = crate::train::embed_batch(params, model, &batch)?;
    let mut visual_labels = Vec::with_capacity(batch.len());
    let mut audio_rows = Vec::new();
    let (mut audio_ids, mut audio_labels) = (Vec::new(), Vec::new());
    for clip in &batch.clips {
        let record = &dataset.videos[clip.video_index].record;
        let tags: BTreeSet<String> = record.labels.iter().flatten().cloned().collect();
        visual_labels.push(tags.clone());
        let Some(spec) = &clip.audio else { continue };
        let frames = framewise_audio_embeddings(spec, params)?;
        let tokens = record.asr.as_deref().map(tokens_from_segments);
        for (i, row) in frames.values.rows().into_iter().enumerate() {
            let t_s = clip.span.start_s + frames.timestamps_ms[i] as f64 / 1000.0;
            audio_ids.push(format!("{}@{:.2}", clip.video_id, t_s));
            audio_labels.push(match &tokens {
                Some(tokens) => window_labels(tokens, t_s, 1.0),
                None => tags.clone(),
            });
            audio_rows.push(row.to_owned());
        }
    }
    let dim = emb.video.ncols();
    let views: Vec<_> = audio_rows.iter().map(|r| r.view()).collect();
    let audio_values = if views.is_empty() {
        Array2::zeros((0, dim))
    } else {
        ndarray::stack(ndarray::Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?
    };
    let visual_ids = batch.clips.iter().map(|c| c.video_id.clone()).collect();
    Ok((
        LabeledSet::new(visual_ids, emb.video, visual_labels)?,
        LabeledSet::new(audio_ids, audio_values, audio_labels)?,
    ))
}

/// A transcript word with its time span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedToken {
    pub start_s: f64,
    pub end_s: f64,
    pub token: String,
}

/// Splits each segment's caption into lowercase words spread evenly over
/// the segment.
pub fn tokens_from_segments(segments: &[AsrSegment]) -> Vec<TimedToken> {
    let mut out = Vec::new();
    for seg in segments {
        let words: Vec<&str> = seg.caption.split_whitespace().collect();
        let step = (seg.end_s - seg.start_s) / words.len().max(1) as f64;
        for (i, w) in words.iter().enumerate() {
            out.push(TimedToken {
                start_s: seg.start_s + i as f64 * step,
                end_s: seg.start_s + (i + 1) as f64 * step,
                token: w.to_lowercase(),
            });
        }
    }
    out
}

/// Tokens overlapping the window `[t - half_window_s, t + half_window_s]`.
pub fn window_labels(tokens: &[TimedToken], t_s: f64, half_window_s: f64) -> BTreeSet<String> {
    let (lo, hi) = (t_s - half_window_s, t_s + half_window_s);
    tokens
        .iter()
        .filter(|w| w.start_s <= hi && w.end_s >= lo)
        .map(|w| w.token.clone())
        .collect()
}
