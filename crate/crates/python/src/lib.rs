//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use mmembed::concepts::concept_report;
use mmembed::features::{Modality, PooledFeature};
use mmembed::frontend::{self, AudioWaveform, SpectrogramConfig};
use mmembed::losses::{ablation_loss, mms_loss, LossConfig, LossKind};
use mmembed::model::{GatingParams, Variant};
use mmembed::retrieval::{self, Absences, SimilarityMatrix};
use mmembed::sampler::{self, Dataset, Manifest};
use mmembed::synthetic::{self, PlantedConceptSpec, SyntheticSpec};
use mmembed::train::{self, Checkpoint, TrainConfig};

fn py_err(e: mmembed::Error) -> PyErr {
    match e {
        mmembed::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((rows.len(), dim), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_name<T: serde::de::DeserializeOwned>(s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown name {s:?}")))
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<PyObject> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_py(py),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_py(py),
            (None, Some(f)) => f.into_py(py),
            _ => py.None(),
        },
        Value::String(s) => s.into_py(py),
        Value::Array(items) => {
            let list = PyList::empty_bound(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_py(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new_bound(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_py(py)
        }
    })
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: Option<&str>) -> PyResult<Option<T>> {
    text.map(|t| toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())))
        .transpose()
}

/// Log-mel spectrogram of mono samples in [-1, 1]; returns `[frames][bands]`.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate_hz=16000, num_mel_bands=40, window_ms=25.0, hop_ms=10.0))]
fn log_mel_spectrogram(
    samples: Vec<f64>,
    sample_rate_hz: u32,
    num_mel_bands: usize,
    window_ms: f64,
    hop_ms: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let config = SpectrogramConfig {
        sample_rate_hz,
        num_mel_bands,
        window_ms,
        hop_ms,
        ..SpectrogramConfig::default()
    };
    let wave = AudioWaveform::new(samples, sample_rate_hz).map_err(py_err)?;
    let spec = frontend::log_mel_spectrogram(&wave, &config).map_err(py_err)?;
    Ok(rows(&spec.frames))
}

/// `(samples, sample_rate_hz)` of a 16-bit PCM mono WAV file's bytes.
#[pyfunction]
fn decode_wav(data: &[u8]) -> PyResult<(Vec<f64>, u32)> {
    let w = frontend::decode_wav(data).map_err(py_err)?;
    Ok((w.samples, w.sample_rate_hz))
}

#[pyfunction]
fn frame_count(length: usize, window: usize, hop: usize) -> Option<usize> {
    frontend::frame_count(length, window, hop)
}

#[pyfunction]
fn mel_filterbank(num_bands: usize, fft_len: usize, sample_rate_hz: u32) -> Vec<Vec<f64>> {
    rows(&frontend::mel_filterbank(num_bands, fft_len, sample_rate_hz))
}

/// Contrastive loss of paired embedding rows `x[i] <-> y[i]`.
#[pyfunction]
#[pyo3(signature = (x, y, kind="mms", margin=0.001, ranking_margin=0.1, neighbors=None, symmetric=false))]
fn contrastive_loss(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    kind: &str,
    margin: f64,
    ranking_margin: f64,
    neighbors: Option<Vec<Vec<usize>>>,
    symmetric: bool,
) -> PyResult<f64> {
    let (x, y) = (matrix(x)?, matrix(y)?);
    let kind: LossKind = parse_name(kind)?;
    if kind == LossKind::Mms {
        return Ok(mms_loss(x.view(), y.view(), margin).map_err(py_err)?.value);
    }
    let config = LossConfig {
        kind,
        margin,
        ranking_margin,
        symmetric,
        ..LossConfig::default()
    };
    Ok(ablation_loss(&config, x.view(), y.view(), neighbors.as_deref()).map_err(py_err)?.value)
}

#[pyfunction]
fn similarity_matrix(queries: Vec<Vec<f64>>, gallery: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let s = retrieval::similarity_matrix(matrix(queries)?.view(), matrix(gallery)?.view()).map_err(py_err)?;
    Ok(rows(&s))
}

/// Recall@K and median rank of a score matrix; `truth[i]` is query i's gallery index.
#[pyfunction]
#[pyo3(signature = (scores, truth=None, ks=vec![1, 5, 10]))]
fn score_report(py: Python<'_>, scores: Vec<Vec<f64>>, truth: Option<Vec<usize>>, ks: Vec<usize>) -> PyResult<PyObject> {
    let scores = matrix(scores)?;
    let truth = truth.unwrap_or_else(|| (0..scores.nrows()).collect());
    let sim = SimilarityMatrix {
        scores,
        query: "query".into(),
        gallery: "gallery".into(),
    };
    let report = retrieval::score_report(&sim, &truth, &ks, &Absences::default()).map_err(py_err)?;
    to_py(py, &report.to_json())
}

/// `h * sigmoid(w2 h + b2)` with `h = w1 x + b1`.
#[pyfunction]
fn gated_projection(x: Vec<f64>, w1: Vec<Vec<f64>>, b1: Vec<f64>, w2: Vec<Vec<f64>>, b2: Vec<f64>) -> PyResult<Vec<f64>> {
    let params = GatingParams {
        w1: matrix(w1)?,
        b1: Array1::from(b1),
        w2: matrix(w2)?,
        b2: Array1::from(b2),
    };
    let x = PooledFeature::new(Modality::Visual2D, Array1::from(x));
    Ok(mmembed::model::gated_projection(&x, &params).map_err(py_err)?.to_vec())
}

/// `count` random `(start_s, end_s)` spans of a video.
#[pyfunction]
#[pyo3(signature = (duration_s, count, clip_length_s=10.0, seed=0))]
fn sample_random_clips(duration_s: f64, count: usize, clip_length_s: f64, seed: u64) -> PyResult<Vec<(f64, f64)>> {
    let spans = sampler::sample_random_clips("video", duration_s, count, clip_length_s, seed).map_err(py_err)?;
    Ok(spans.into_iter().map(|s| (s.start_s, s.end_s)).collect())
}

/// Generated paired dataset.
#[pyclass]
struct SyntheticData {
    inner: synthetic::SyntheticDataset,
}

#[pymethods]
impl SyntheticData {
    /// Generates from a TOML spec (defaults when omitted). `benchmark`
    /// starts from the retrieval benchmark preset instead of the plain one.
    #[new]
    #[pyo3(signature = (spec_toml=None, seed=None, benchmark=false))]
    fn new(spec_toml: Option<&str>, seed: Option<u64>, benchmark: bool) -> PyResult<Self> {
        let mut spec = match parse_toml::<SyntheticSpec>(spec_toml)? {
            Some(spec) => spec,
            None if benchmark => SyntheticSpec::retrieval_benchmark(),
            None => SyntheticSpec::default(),
        };
        if let Some(seed) = seed {
            spec.seed = seed;
        }
        let inner = synthetic::generate_paired_dataset(&spec).map_err(py_err)?;
        Ok(SyntheticData { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.dataset.len()
    }

    fn video_ids(&self) -> Vec<String> {
        self.inner.dataset.videos.iter().map(|v| v.record.video_id.clone()).collect()
    }

    fn concepts(&self) -> Vec<usize> {
        self.inner.concepts.clone()
    }

    /// Writes feature files and `manifest.jsonl`; returns the manifest path.
    fn write(&self, directory: PathBuf) -> PyResult<String> {
        let path = self.inner.write_to(&directory).map_err(py_err)?;
        Ok(path.display().to_string())
    }

    #[pyo3(signature = (modality="visual_2d"))]
    fn pairing_margin(&self, modality: &str) -> PyResult<f64> {
        synthetic::oracle_pairing_check(&self.inner.dataset, parse_name(modality)?).map_err(py_err)
    }

    /// TOML train config sized for this dataset.
    fn train_config(&self) -> PyResult<String> {
        synthetic::benchmark_train_config(&self.inner.spec).to_toml().map_err(py_err)
    }
}

/// Trained parameters with the config that produced them.
#[pyclass]
struct Model {
    checkpoint: Checkpoint,
    #[pyo3(get)]
    epoch_losses: Vec<f64>,
}

fn load_dataset(manifest: &str) -> PyResult<Dataset> {
    let manifest = Manifest::load(manifest.as_ref()).map_err(py_err)?;
    Dataset::load(&manifest).map_err(py_err)
}

#[pymethods]
impl Model {
    /// Trains on a manifest with a TOML config.
    #[staticmethod]
    #[pyo3(signature = (manifest, config_toml=None))]
    fn train(py: Python<'_>, manifest: &str, config_toml: Option<&str>) -> PyResult<Self> {
        let config = match config_toml {
            Some(text) => TrainConfig::from_toml(text).map_err(py_err)?,
            None => TrainConfig::default(),
        };
        let dataset = load_dataset(manifest)?;
        let outcome = py.allow_threads(|| train::train(&config, &dataset)).map_err(py_err)?;
        Ok(Model {
            checkpoint: outcome.checkpoint,
            epoch_losses: outcome.epoch_losses,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            checkpoint: Checkpoint::load(&path).map_err(py_err)?,
            epoch_losses: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(&path).map_err(py_err)
    }

    fn config(&self) -> PyResult<String> {
        self.checkpoint.config.to_toml().map_err(py_err)
    }

    /// Retrieval reports for one evaluation clip per video of `split`.
    #[pyo3(signature = (manifest, split=Some("test".to_string()), ks=vec![1, 5, 10]))]
    fn evaluate(&self, py: Python<'_>, manifest: &str, split: Option<String>, ks: Vec<usize>) -> PyResult<PyObject> {
        let dataset = load_dataset(manifest)?.split(split.as_deref());
        let c = &self.checkpoint;
        let reports = retrieval::evaluate_dataset(&c.params, &c.config.model, &dataset, &c.config.sampler, &ks, 1)
            .map_err(py_err)?;
        let json: Vec<_> = reports.iter().map(|r| r.to_json()).collect();
        to_py(py, &serde_json::Value::Array(json))
    }
}

/// Max relative error of the analytic gradient on the tiny check model.
#[pyfunction]
#[pyo3(signature = (variant="av", loss="mms", seed=0, step=1e-5))]
fn gradcheck(variant: &str, loss: &str, seed: u64, step: f64) -> PyResult<f64> {
    let variant: Variant = parse_name(variant)?;
    let (config, params, batch) = synthetic::gradcheck_fixture(variant, parse_name(loss)?, seed).map_err(py_err)?;
    Ok(train::gradcheck_batch(&params, &batch, &config, step).map_err(py_err)?.max_relative_error)
}

/// Concept report of planted-concept embeddings, as a dict.
#[pyfunction]
#[pyo3(signature = (seed=0, k=50))]
fn planted_concept_report(py: Python<'_>, seed: u64, k: usize) -> PyResult<PyObject> {
    let spec = PlantedConceptSpec {
        seed,
        ..PlantedConceptSpec::default()
    };
    let (visual, audio) = synthetic::planted_concept_sets(&spec).map_err(py_err)?;
    let report = concept_report(&visual, &audio, k).map_err(py_err)?;
    to_py(py, &serde_json::to_value(&report).map_err(|e| PyValueError::new_err(e.to_string()))?)
}

#[pymodule]
fn mmembed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(log_mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(decode_wav, m)?)?;
    m.add_function(wrap_pyfunction!(frame_count, m)?)?;
    m.add_function(wrap_pyfunction!(mel_filterbank, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(score_report, m)?)?;
    m.add_function(wrap_pyfunction!(gated_projection, m)?)?;
    m.add_function(wrap_pyfunction!(sample_random_clips, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(planted_concept_report, m)?)?;
    m.add_class::<SyntheticData>()?;
    m.add_class::<Model>()?;
    Ok(())
}
