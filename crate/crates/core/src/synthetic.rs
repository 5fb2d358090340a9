//! Paired multi-modal feature sets with planted concepts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::concepts::LabeledSet;
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Modality};
use crate::losses::LossKind;
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::sampler::{assemble_batch, ClipBatch, Dataset, Manifest, ManifestRecord, SamplerConfig, VideoEntry};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    /// Videos generated per concept.
    pub clips_per_concept: usize,
    /// Feature dimension per modality; the keys are the modality set.
    pub dims: BTreeMap<Modality, usize>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub duration_s: f64,
    pub visual_step_ms: u64,
    pub audio_hop_ms: u64,
    pub word_step_ms: u64,
    /// Norm of a per-video latent shared by all modalities of that video.
    /// Zero gives pure prototype-plus-noise features.
    pub instance_scale: f64,
    pub instance_dim: usize,
    /// Fraction of each concept's videos marked `split = "test"`.
    pub held_out_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let dims = [Modality::Visual2D, Modality::Visual3D, Modality::Audio, Modality::Text]
            .into_iter()
            .map(|m| (m, 64))
            .collect();
        SyntheticSpec {
            num_concepts: 16,
            clips_per_concept: 32,
            dims,
            noise_sigma: 0.1,
            seed: 0,
            duration_s: 15.0,
            visual_step_ms: 1000,
            audio_hop_ms: 200,
            word_step_ms: 1000,
            instance_scale: 0.0,
            instance_dim: 8,
            held_out_fraction: 0.25,
        }
    }
}

impl SyntheticSpec {
    /// Default spec plus a per-video latent, so individual videos (not just
    /// concepts) can be matched across modalities.
    pub fn retrieval_benchmark() -> Self {
        SyntheticSpec {
            instance_scale: 1.0,
            ..SyntheticSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_concepts < 2 {
            return Err(Error::InvalidConfig("num_concepts must be >= 2".into()));
        }
        if self.clips_per_concept == 0 {
            return Err(Error::InvalidConfig("clips_per_concept must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.instance_scale >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma and instance_scale must be >= 0".into()));
        }
        if self.dims.is_empty() || self.dims.values().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("every modality needs a positive dimension".into()));
        }
        if self.dims.contains_key(&Modality::VisualConcat) {
            return Err(Error::InvalidConfig("visual_concat is derived, not generated".into()));
        }
        if !(self.duration_s > 0.0) || self.visual_step_ms == 0 || self.audio_hop_ms == 0 || self.word_step_ms == 0 {
            return Err(Error::InvalidConfig("duration and step sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::InvalidConfig("held_out_fraction must be in [0, 1)".into()));
        }
        if self.instance_scale > 0.0 && self.instance_dim == 0 {
            return Err(Error::InvalidConfig("instance_dim must be >= 1".into()));
        }
        Ok(())
    }

    fn step_ms(&self, m: Modality) -> u64 {
        match m {
            Modality::Audio => self.audio_hop_ms,
            Modality::Text => self.word_step_ms,
            _ => self.visual_step_ms,
        }
    }
}

/// Train config whose model dimensions fit `spec`: AV variant, MMS loss,
/// 8 videos x 4 clips per batch, small hidden widths.
pub fn benchmark_train_config(spec: &SyntheticSpec) -> TrainConfig {
    let dim = |m: Modality| spec.dims.get(&m).copied().unwrap_or(0);
    let audio = dim(Modality::Audio);
    let mut config = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    config.model = ModelConfig {
        variant: Variant::Av,
        visual_2d_dim: dim(Modality::Visual2D),
        visual_3d_dim: dim(Modality::Visual3D),
        visual_2d_only: dim(Modality::Visual3D) == 0,
        audio_bands: audio,
        encoder_hidden: vec![audio],
        encoder_output_dim: audio,
        text_dim: dim(Modality::Text).max(1),
        embed_dim: 64,
        normalize: false,
    };
    config.sampler = SamplerConfig {
        videos_per_batch: 8,
        clips_per_video: 4,
        clip_length_s: 10.0f64.min(spec.duration_s),
        seed: spec.seed,
        audio_target_frames: None,
    };
    config
}

/// A tiny model (every width at most 8) with one 4-clip batch (2 videos x 2
/// clips) for finite-difference checks.
pub fn gradcheck_fixture(variant: Variant, loss: LossKind, seed: u64) -> Result<(TrainConfig, ModelParams, ClipBatch)> {
    let spec = SyntheticSpec {
        num_concepts: 2,
        clips_per_concept: 2,
        dims: [(Modality::Visual2D, 4), (Modality::Visual3D, 4), (Modality::Audio, 6), (Modality::Text, 5)]
            .into_iter()
            .collect(),
        noise_sigma: 1.0,
        seed,
        duration_s: 20.0,
        audio_hop_ms: 500,
        instance_scale: 2.0,
        instance_dim: 3,
        held_out_fraction: 0.0,
        ..SyntheticSpec::default()
    };
    let data = generate_paired_dataset(&spec)?;
    let mut config = benchmark_train_config(&spec);
    config.train_split = None;
    config.init_seed = seed;
    config.model.variant = variant;
    config.model.encoder_hidden = vec![5];
    config.model.encoder_output_dim = 6;
    config.model.embed_dim = 7;
    config.loss.kind = loss;
    config.sampler = SamplerConfig {
        videos_per_batch: 2,
        clips_per_video: 2,
        clip_length_s: 2.0,
        seed,
        audio_target_frames: None,
    };
    let params = ModelParams::init(&config.model, seed)?;
    let batch = assemble_batch(&data.dataset, &config.sampler, &config.model.required_modalities(), seed)?;
    Ok((config, params, batch))
}

pub fn concept_name(c: usize) -> String {
    format!("concept_{c:02}")
}

/// A generated dataset held in memory, with its manifest and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub dataset: Dataset,
    /// Concept index of every video, in dataset order.
    pub concepts: Vec<usize>,
    /// Unit-norm prototype per modality, one row per concept.
    pub prototypes: BTreeMap<Modality, Array2<f64>>,
}

impl SyntheticDataset {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            records: self.dataset.videos.iter().map(|v| v.record.clone()).collect(),
            base_dir: PathBuf::new(),
        }
    }

    /// Writes `manifest.jsonl` and one feature file per stream under `dir`.
    /// Returns the manifest path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        for v in &self.dataset.videos {
            for (m, rel) in &v.record.features {
                let path = dir.join(rel);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                v.streams[m].write(&path)?;
            }
        }
        let path = dir.join("manifest.jsonl");
        crate::binio::write_atomic(&path, self.manifest().to_jsonl()?.as_bytes())?;
        Ok(path)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::from_shape_simple_fn((rows, dim), || normal(rng));
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Generates the dataset. Video `i` of concept `c` is `c{c}_v{i}`; per-step
/// values are rounded to `f32` so the in-memory copy equals what the feature
/// files store.
pub fn generate_paired_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: BTreeMap<Modality, Array2<f64>> = spec
        .dims
        .iter()
        .map(|(&m, &d)| (m, unit_rows(&mut rng, spec.num_concepts, d)))
        .collect();
    // Random maps from the shared latent into each modality, columns ~ unit norm.
    let projections: BTreeMap<Modality, Array2<f64>> = spec
        .dims
        .iter()
        .map(|(&m, &d)| {
            let k = spec.instance_dim.max(1);
            let p = Array2::from_shape_simple_fn((d, k), || normal(&mut rng) / (d as f64).sqrt());
            (m, p)
        })
        .collect();

    let held_out = (spec.clips_per_concept as f64 * spec.held_out_fraction).round() as usize;
    let mut videos = Vec::with_capacity(spec.num_concepts * spec.clips_per_concept);
    let mut concepts = Vec::with_capacity(videos.capacity());
    for i in 0..spec.clips_per_concept {
        for c in 0..spec.num_concepts {
            let video_id = format!("c{c:02}_v{i:03}");
            let k = spec.instance_dim.max(1);
            let z = Array1::from_shape_simple_fn(k, || normal(&mut rng) / (k as f64).sqrt());
            let mut streams = BTreeMap::new();
            let mut features = BTreeMap::new();
            for (&m, &d) in &spec.dims {
                let step = spec.step_ms(m);
                let steps = ((spec.duration_s * 1000.0) / step as f64).floor().max(1.0) as usize;
                let mut center = prototypes[&m].row(c).to_owned();
                if spec.instance_scale > 0.0 {
                    center.scaled_add(spec.instance_scale, &projections[&m].dot(&z));
                }
                let values = Array2::from_shape_fn((steps, d), |(_, j)| {
                    let v = center[j] + spec.noise_sigma * normal(&mut rng);
                    v as f32 as f64
                });
                let seq = if m == Modality::Text {
                    // Words sit mid-way through their step.
                    let ts = (0..steps as u64).map(|t| t * step + step / 2).collect();
                    FeatureSequence::new(m, values, ts)?
                } else {
                    FeatureSequence::uniform(m, values, step)
                };
                streams.insert(m, seq);
                features.insert(m, PathBuf::from(format!("features/{video_id}.{}.mmft", m.key())));
            }
            let record = ManifestRecord {
                video_id,
                duration_s: spec.duration_s,
                features,
                audio_hop_ms: spec.audio_hop_ms as f64,
                asr: None,
                labels: Some(vec![concept_name(c)]),
                split: Some(if i < held_out { "test" } else { "train" }.to_string()),
            };
            videos.push(VideoEntry { record, streams });
            concepts.push(c);
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        dataset: Dataset { videos },
        concepts,
        prototypes,
    })
}

/// Mean within-concept minus mean cross-concept dot product of per-video
/// time-averaged features of `modality`. Within-concept pairs are distinct
/// videos; when no concept has two videos, each video's self-similarity is
/// used instead. Concepts come from the first manifest label.
pub fn oracle_pairing_check(dataset: &Dataset, modality: Modality) -> Result<f64> {
    let mut means = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for v in &dataset.videos {
        let seq = v.streams.get(&modality).ok_or_else(|| Error::MissingModality {
            video_id: v.record.video_id.clone(),
            modality: modality.to_string(),
        })?;
        let label = v
            .record
            .labels
            .as_ref()
            .and_then(|l| l.first())
            .ok_or_else(|| Error::EmptyLabelSpace(v.record.video_id.clone()))?;
        means.push(seq.values.mean_axis(Axis(0)).ok_or(Error::EmptySequence)?);
        labels.push(label.as_str());
    }
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    let mut self_sim = 0.0;
    for i in 0..means.len() {
        self_sim += means[i].dot(&means[i]);
        for j in 0..means.len() {
            if i == j {
                continue;
            }
            let s = means[i].dot(&means[j]);
            if labels[i] == labels[j] {
                within += s;
                nw += 1;
            } else {
                cross += s;
                nc += 1;
            }
        }
    }
    if nc == 0 {
        return Err(Error::InvalidConfig("pairing check needs at least two concepts".into()));
    }
    let within = if nw == 0 {
        self_sim / means.len() as f64
    } else {
        within / nw as f64
    };
    Ok(within - cross / nc as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConceptSpec {
    pub num_concepts: usize,
    /// Dimensions carrying no concept.
    pub extra_dims: usize,
    pub items_per_concept: usize,
    pub signal: f64,
    pub noise_sigma: f64,
    /// Probability an item's label is swapped for another concept's.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for PlantedConceptSpec {
    fn default() -> Self {
        PlantedConceptSpec {
            num_concepts: 8,
            extra_dims: 8,
            items_per_concept: 60,
            signal: 1.0,
            noise_sigma: 0.1,
            label_noise: 0.02,
            seed: 0,
        }
    }
}

/// Visual and audio embedding sets where concept `c` owns coordinate `c`;
/// coordinates `num_concepts..` are noise only.
pub fn planted_concept_sets(spec: &PlantedConceptSpec) -> Result<(LabeledSet, LabeledSet)> {
    if spec.num_concepts < 2 {
        return Err(Error::InvalidConfig("num_concepts must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.num_concepts + spec.extra_dims;
    let make = |prefix: &str, rng: &mut ChaCha8Rng| {
        let n = spec.num_concepts * spec.items_per_concept;
        let mut values = Array2::zeros((n, dim));
        let mut ids = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for row in 0..n {
            let c = row % spec.num_concepts;
            for j in 0..dim {
                values[[row, j]] = spec.noise_sigma * normal(rng);
            }
            values[[row, c]] += spec.signal;
            let mut label = c;
            if rng.gen::<f64>() < spec.label_noise {
                label = (c + rng.gen_range(1..spec.num_concepts)) % spec.num_concepts;
            }
            ids.push(format!("{prefix}{row:05}"));
            labels.push(BTreeSet::from([concept_name(label)]));
        }
        LabeledSet::new(ids, values, labels)
    };
    let visual = make("v", &mut rng)?;
    let audio = make("a", &mut rng)?;
    Ok((visual, audio))
}
