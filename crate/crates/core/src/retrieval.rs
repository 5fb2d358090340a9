//! Cross-modal similarity matrices and recall@K / median-rank reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Embeddings, ModelConfig, ModelParams};
use crate::sampler::{evaluation_clips, Dataset, SamplerConfig};

/// Dot-product scores of every query (rows) against every gallery item.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Array2<f64>,
    pub query: String,
    pub gallery: String,
}

impl SimilarityMatrix {
    pub fn num_queries(&self) -> usize {
        self.scores.nrows()
    }

    pub fn gallery_size(&self) -> usize {
        self.scores.ncols()
    }
}

/// `scores[i][j] = dot(queries[i], gallery[j])`.
pub fn similarity_matrix(queries: ArrayView2<f64>, gallery: ArrayView2<f64>) -> Result<Array2<f64>> {
    similarity_matrix_threaded(queries, gallery, 1)
}

/// Row-parallel [`similarity_matrix`]. Rows are computed independently.
pub fn similarity_matrix_threaded(queries: ArrayView2<f64>, gallery: ArrayView2<f64>, threads: usize) -> Result<Array2<f64>> {
    if queries.ncols() != gallery.ncols() {
        return Err(Error::DimMismatch {
            left: queries.ncols(),
            right: gallery.ncols(),
        });
    }
    let mut out = Array2::zeros((queries.nrows(), gallery.nrows()));
    let fill = |mut rows: ndarray::ArrayViewMut2<f64>, q: ArrayView2<f64>| {
        ndarray::linalg::general_mat_mul(1.0, &q, &gallery.t(), 0.0, &mut rows);
    };
    let threads = threads.max(1);
    if threads == 1 || queries.nrows() < 2 * threads {
        fill(out.view_mut(), queries);
    } else {
        let chunk = queries.nrows().div_ceil(threads);
        std::thread::scope(|scope| {
            for (out_rows, q_rows) in out
                .axis_chunks_iter_mut(Axis(0), chunk)
                .zip(queries.axis_chunks_iter(Axis(0), chunk))
            {
                scope.spawn(move || fill(out_rows, q_rows));
            }
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RetrievalMode {
    /// Audio queries, video gallery.
    AtoV,
    VtoA,
    /// Text queries scored by the sum of text-video and text-audio similarity.
    #[serde(rename = "T_to_AplusV")]
    TtoAplusV,
    /// Fused text+audio queries, video gallery.
    #[serde(rename = "TplusA_to_V")]
    TplusAtoV,
    TtoV,
    VtoT,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 6] = [
        RetrievalMode::AtoV,
        RetrievalMode::VtoA,
        RetrievalMode::TtoAplusV,
        RetrievalMode::TplusAtoV,
        RetrievalMode::TtoV,
        RetrievalMode::VtoT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RetrievalMode::AtoV => "AtoV",
            RetrievalMode::VtoA => "VtoA",
            RetrievalMode::TtoAplusV => "T_to_AplusV",
            RetrievalMode::TplusAtoV => "TplusA_to_V",
            RetrievalMode::TtoV => "TtoV",
            RetrievalMode::VtoT => "VtoT",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RetrievalMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown retrieval mode {s:?}")))
    }
}

fn need<'a>(x: Option<&'a Array2<f64>>, what: &str) -> Result<&'a Array2<f64>> {
    x.ok_or_else(|| Error::MissingModality {
        video_id: String::from("<embeddings>"),
        modality: what.to_string(),
    })
}

/// Similarity matrix for a retrieval mode.
pub fn retrieve_multimodal(mode: RetrievalMode, emb: &Embeddings) -> Result<SimilarityMatrix> {
    retrieve_multimodal_threaded(mode, emb, 1)
}

pub fn retrieve_multimodal_threaded(mode: RetrievalMode, emb: &Embeddings, threads: usize) -> Result<SimilarityMatrix> {
    let similarity_matrix = |q: ArrayView2<f64>, g: ArrayView2<f64>| similarity_matrix_threaded(q, g, threads);
    let v = &emb.video;
    let (scores, query, gallery) = match mode {
        RetrievalMode::AtoV => (similarity_matrix(need(emb.audio.as_ref(), "audio")?.view(), v.view())?, "audio", "video"),
        RetrievalMode::VtoA => (similarity_matrix(v.view(), need(emb.audio.as_ref(), "audio")?.view())?, "video", "audio"),
        RetrievalMode::TtoV => (similarity_matrix(need(emb.text.as_ref(), "text")?.view(), v.view())?, "text", "video"),
        RetrievalMode::VtoT => (similarity_matrix(v.view(), need(emb.text.as_ref(), "text")?.view())?, "video", "text"),
        RetrievalMode::TtoAplusV => {
            let t = need(emb.text.as_ref(), "text")?;
            let a = need(emb.audio.as_ref(), "audio")?;
            let tv = similarity_matrix(t.view(), v.view())?;
            let ta = similarity_matrix(t.view(), a.view())?;
            (tv + ta, "text", "audio+video")
        }
        RetrievalMode::TplusAtoV => {
            let l = need(emb.language.as_ref(), "fused text+audio")?;
            (similarity_matrix(l.view(), v.view())?, "text+audio", "video")
        }
    };
    Ok(SimilarityMatrix {
        scores,
        query: query.into(),
        gallery: gallery.into(),
    })
}

/// Row-major JSON form of [`Embeddings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsFile {
    pub video: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<Vec<Vec<f64>>>,
}

fn to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch("ragged embedding rows".into()));
    }
    Array2::from_shape_vec((rows.len(), dim), rows.concat()).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl EmbeddingsFile {
    pub fn from_embeddings(emb: &Embeddings) -> Self {
        EmbeddingsFile {
            video: to_rows(&emb.video),
            audio: emb.audio.as_ref().map(to_rows),
            text: emb.text.as_ref().map(to_rows),
            language: emb.language.as_ref().map(to_rows),
        }
    }

    pub fn into_embeddings(self) -> Result<Embeddings> {
        let opt = |x: Option<Vec<Vec<f64>>>| x.map(|r| to_array(&r)).transpose();
        Ok(Embeddings {
            video: to_array(&self.video)?,
            audio: opt(self.audio)?,
            text: opt(self.text)?,
            language: opt(self.language)?,
        })
    }
}

/// Queries or gallery items missing from the evaluation (e.g. clips with no
/// audio). Any query that is absent, or whose truth is absent, ranks `G + 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Absences {
    pub queries: BTreeSet<usize>,
    pub gallery: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mode: Option<RetrievalMode>,
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub num_queries: usize,
    pub gallery_size: usize,
    #[serde(skip)]
    pub ranks: Vec<usize>,
}

impl RetrievalReport {
    /// Harness JSON: `{mode, K, recall, median_rank, num_queries}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode.map(|m| m.name()),
            "K": self.recall_at.keys().collect::<Vec<_>>(),
            "recall": self.recall_at.values().collect::<Vec<_>>(),
            "median_rank": self.median_rank,
            "num_queries": self.num_queries,
        })
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

/// 1-based rank of `truth` in a score row: items scoring strictly higher,
/// plus equal-scoring items with a smaller index, plus one.
pub fn rank_of(row: ndarray::ArrayView1<f64>, truth: usize) -> usize {
    let s = row[truth];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth))
        .count()
}

/// Recall@K for each `k` and the lower median rank.
pub fn score_report(sim: &SimilarityMatrix, truth: &[usize], ks: &[usize], absent: &Absences) -> Result<RetrievalReport> {
    let (q, g) = sim.scores.dim();
    if q == 0 || g == 0 {
        return Err(Error::ShapeMismatch("similarity matrix is empty".into()));
    }
    if let Some(i) = (0..q).find(|&i| truth.get(i).map_or(true, |&t| t >= g)) {
        return Err(Error::MissingTruth(i));
    }
    let ranks: Vec<usize> = (0..q)
        .map(|i| {
            if absent.queries.contains(&i) || absent.gallery.contains(&truth[i]) {
                g + 1
            } else {
                rank_of(sim.scores.row(i), truth[i])
            }
        })
        .collect();
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / q as f64))
        .collect();
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let median_rank = sorted[(q - 1) / 2] as f64;
    Ok(RetrievalReport {
        mode: None,
        recall_at,
        median_rank,
        num_queries: q,
        gallery_size: g,
        ranks,
    })
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Reports for every mode the embeddings support, with the identity
/// ground truth (query `i` belongs with gallery item `i`).
pub fn evaluate_all_modes(emb: &Embeddings, ks: &[usize], threads: usize) -> Result<Vec<RetrievalReport>> {
    let mut out = Vec::new();
    for mode in RetrievalMode::ALL {
        let sim = match retrieve_multimodal_threaded(mode, emb, threads) {
            Ok(sim) => sim,
            Err(Error::MissingModality { .. }) => continue,
            Err(e) => return Err(e),
        };
        let truth: Vec<usize> = (0..sim.num_queries()).collect();
        let mut report = score_report(&sim, &truth, ks, &Absences::default())?;
        report.mode = Some(mode);
        out.push(report);
    }
    Ok(out)
}

/// Embeds one evaluation clip per video of `dataset` and reports every
/// retrieval mode the model supports.
pub fn evaluate_dataset(
    params: &ModelParams,
    model: &ModelConfig,
    dataset: &Dataset,
    sampler: &SamplerConfig,
    ks: &[usize],
    threads: usize,
) -> Result<Vec<RetrievalReport>> {
    let batch = evaluation_clips(dataset, sampler, &model.required_modalities())?;
    let emb = crate::train::embed_batch(params, model, &batch)?;
    evaluate_all_modes(&emb, ks, threads)
}

/// Plain-text table, one row per report.
pub fn format_table(reports: &[RetrievalReport]) -> String {
    let ks: BTreeSet<usize> = reports.iter().flat_map(|r| r.recall_at.keys().copied()).collect();
    let mut out = format!("{:<12}", "mode");
    for k in &ks {
        out.push_str(&format!("{:>8}", format!("R@{k}")));
    }
    out.push_str(&format!("{:>8}{:>8}\n", "Md.R", "N"));
    for r in reports {
        out.push_str(&format!("{:<12}", r.mode.map_or("-", |m| m.name())));
        for k in &ks {
            match r.recall(*k) {
                Some(v) => out.push_str(&format!("{:>8.1}", 100.0 * v)),
                None => out.push_str(&format!("{:>8}", "-")),
            }
        }
        out.push_str(&format!("{:>8}{:>8}\n", r.median_rank, r.num_queries));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sim(scores: Array2<f64>) -> SimilarityMatrix {
        SimilarityMatrix {
            scores,
            query: "q".into(),
            gallery: "g".into(),
        }
    }

    #[test]
    fn similarity_examples() {
        let e = Array2::<f64>::eye(3);
        assert_eq!(similarity_matrix(e.view(), e.view()).unwrap(), e);
        let q = array![[1.0, 1.0]];
        let g = array![[2.0, 0.0], [0.0, 3.0]];
        assert_eq!(similarity_matrix(q.view(), g.view()).unwrap(), array![[2.0, 3.0]]);
        let bad = array![[1.0]];
        assert!(matches!(similarity_matrix(bad.view(), g.view()), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn identity_scores_are_perfect() {
        let r = score_report(&sim(Array2::eye(3)), &[0, 1, 2], &DEFAULT_KS, &Absences::default()).unwrap();
        assert_eq!(r.recall(1), Some(1.0));
        assert_eq!(r.median_rank, 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let r = score_report(&sim(Array2::zeros((4, 4))), &[0, 1, 2, 3], &[1], &Absences::default()).unwrap();
        assert_eq!(r.ranks, vec![1, 2, 3, 4]);
        // lower median of 1,2,3,4
        assert_eq!(r.median_rank, 2.0);
        let r = score_report(&sim(Array2::zeros((2, 5))), &[3, 0], &[1], &Absences::default()).unwrap();
        assert_eq!(r.ranks, vec![4, 1]);
    }

    #[test]
    fn missing_truth() {
        let s = sim(Array2::zeros((2, 2)));
        assert!(matches!(score_report(&s, &[0], &[1], &Absences::default()), Err(Error::MissingTruth(1))));
        assert!(matches!(score_report(&s, &[0, 2], &[1], &Absences::default()), Err(Error::MissingTruth(1))));
    }

    #[test]
    fn absent_items_count_as_misses() {
        let absent = Absences {
            queries: [1].into(),
            gallery: [2].into(),
        };
        let r = score_report(&sim(Array2::eye(3)), &[0, 1, 2], &[1, 3], &absent).unwrap();
        assert_eq!(r.ranks, vec![1, 4, 4]);
        assert_eq!(r.recall(3), Some(1.0 / 3.0));
    }

    #[test]
    fn text_to_audio_plus_video_sums_scores() {
        let emb = Embeddings {
            video: array![[1.0]],
            audio: Some(array![[2.0]]),
            text: Some(array![[1.0]]),
            language: None,
        };
        let s = retrieve_multimodal(RetrievalMode::TtoAplusV, &emb).unwrap();
        assert_eq!(s.scores, array![[3.0]]);
        assert!(matches!(
            retrieve_multimodal(RetrievalMode::TplusAtoV, &emb),
            Err(Error::MissingModality { .. })
        ));
    }

    #[test]
    fn threaded_matches_single() {
        let q = Array2::from_shape_fn((37, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let g = Array2::from_shape_fn((23, 5), |(i, j)| ((i * 5 + j) % 7) as f64 * 0.5);
        let one = similarity_matrix(q.view(), g.view()).unwrap();
        for t in [2, 3, 8] {
            assert_eq!(similarity_matrix_threaded(q.view(), g.view(), t).unwrap(), one);
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in RetrievalMode::ALL {
            assert_eq!(m.name().parse::<RetrievalMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }
}
