//! Clip segmentation, spectrogram crop/pad, manifests, and N x M batch assembly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Modality};
use crate::frontend::{Spectrogram, SpectrogramConfig};

/// A time span `[start_s, end_s]` of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpan {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl ClipSpan {
    pub fn new(video_id: impl Into<String>, start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s >= 0.0 && end_s > start_s && end_s.is_finite()) {
            return Err(Error::InvalidSpan { start_s, end_s });
        }
        Ok(ClipSpan {
            video_id: video_id.into(),
            start_s,
            end_s,
        })
    }

    pub fn length_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn overlaps(&self, other: &ClipSpan) -> bool {
        self.start_s < other.end_s && other.start_s < self.end_s
    }

    pub fn center_s(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }
}

/// Batch shape and clip length. The default batch is 8 videos (scaled down
/// for desk-scale runs) with 32 clips of 10 s each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub videos_per_batch: usize,
    pub clips_per_video: usize,
    pub clip_length_s: f64,
    pub seed: u64,
    /// Spectrogram frames per clip after crop/pad. Defaults to the clip
    /// length divided by the audio hop.
    pub audio_target_frames: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            videos_per_batch: 8,
            clips_per_video: 32,
            clip_length_s: 10.0,
            seed: 0,
            audio_target_frames: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.videos_per_batch == 0 || self.clips_per_video == 0 {
            return Err(Error::InvalidConfig("videos_per_batch and clips_per_video must be >= 1".into()));
        }
        if !(self.clip_length_s > 0.0) {
            return Err(Error::InvalidConfig("clip_length_s must be positive".into()));
        }
        if self.audio_target_frames == Some(0) {
            return Err(Error::InvalidConfig("audio_target_frames must be >= 1".into()));
        }
        Ok(())
    }

    /// Effective contrastive batch size `N * M`.
    pub fn batch_size(&self) -> usize {
        self.videos_per_batch * self.clips_per_video
    }

    pub fn target_frames(&self, hop_ms: f64) -> usize {
        self.audio_target_frames
            .unwrap_or_else(|| ((self.clip_length_s * 1000.0 / hop_ms).round() as usize).max(1))
    }
}

/// `count` spans of exactly `clip_length_s`, starts uniform on
/// `[0, duration_s - clip_length_s]`. Spans may overlap.
pub fn sample_random_clips(
    video_id: &str,
    duration_s: f64,
    count: usize,
    clip_length_s: f64,
    seed: u64,
) -> Result<Vec<ClipSpan>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_random_clips_with(&mut rng, video_id, duration_s, count, clip_length_s)
}

fn sample_random_clips_with(
    rng: &mut impl Rng,
    video_id: &str,
    duration_s: f64,
    count: usize,
    clip_length_s: f64,
) -> Result<Vec<ClipSpan>> {
    if !(clip_length_s > 0.0) {
        return Err(Error::InvalidConfig("clip length must be positive".into()));
    }
    if !(duration_s >= clip_length_s) {
        return Err(Error::VideoTooShort {
            duration_s,
            clip_length_s,
        });
    }
    let slack = duration_s - clip_length_s;
    Ok((0..count)
        .map(|_| {
            let start = rng.gen::<f64>() * slack;
            ClipSpan {
                video_id: video_id.to_string(),
                start_s: start,
                end_s: start + clip_length_s,
            }
        })
        .collect())
}

/// One transcript segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub caption: String,
}

/// One clip per transcript segment, caption attached.
pub fn clips_from_asr(video_id: &str, segments: &[AsrSegment]) -> Result<Vec<(ClipSpan, String)>> {
    if segments.is_empty() {
        return Err(Error::EmptyTranscript);
    }
    segments
        .iter()
        .map(|seg| Ok((ClipSpan::new(video_id, seg.start_s, seg.end_s)?, seg.caption.clone())))
        .collect()
}

/// Keeps the first `target_frames` frames, or pads with the log floor.
pub fn crop_or_pad(spec: &Spectrogram, target_frames: usize) -> Spectrogram {
    let (frames, bands) = spec.frames.dim();
    let out = if frames >= target_frames {
        spec.frames.slice(s![..target_frames, ..]).to_owned()
    } else {
        let mut out = Array2::from_elem((target_frames, bands), spec.config.floor_value());
        out.slice_mut(s![..frames, ..]).assign(&spec.frames);
        out
    };
    Spectrogram {
        frames: out,
        config: spec.config.clone(),
    }
}

/// One line of a JSON Lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub video_id: String,
    pub duration_s: f64,
    /// Feature file per modality key (`visual_2d`, `visual_3d`, `audio`, `text`),
    /// relative to the manifest directory unless absolute.
    #[serde(default)]
    pub features: BTreeMap<Modality, PathBuf>,
    /// Spectrogram stride of the audio stream.
    #[serde(default = "default_audio_hop_ms")]
    pub audio_hop_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr: Option<Vec<AsrSegment>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

fn default_audio_hop_ms() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative feature paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        Ok(Manifest {
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Manifest {
            records,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// A manifest video with its feature streams loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub record: ManifestRecord,
    pub streams: BTreeMap<Modality, FeatureSequence>,
}

/// All videos of a manifest held in memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub videos: Vec<VideoEntry>,
}

impl Dataset {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let videos = manifest
            .records
            .iter()
            .map(|record| {
                let streams = record
                    .features
                    .iter()
                    .map(|(&m, p)| Ok((m, FeatureSequence::read(&manifest.resolve(p))?)))
                    .collect::<Result<_>>()?;
                Ok(VideoEntry {
                    record: record.clone(),
                    streams,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { videos })
    }

    /// Videos whose `split` equals `split`; all videos when `split` is `None`.
    pub fn split(&self, split: Option<&str>) -> Dataset {
        Dataset {
            videos: self
                .videos
                .iter()
                .filter(|v| split.is_none() || v.record.split.as_deref() == split)
                .cloned()
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// Per-modality inputs for one clip. All present streams cover the same span.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub video_id: String,
    /// Position of the source video in its dataset.
    pub video_index: usize,
    pub span: ClipSpan,
    pub visual_2d: Option<FeatureSequence>,
    pub visual_3d: Option<FeatureSequence>,
    pub audio: Option<Spectrogram>,
    pub text: Option<FeatureSequence>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClipBatch {
    pub clips: Vec<ClipRecord>,
}

impl ClipBatch {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// For each clip, the `radius` nearest clips of the same video whose
    /// spans do not overlap it (by center distance, ties by batch index).
    pub fn neighbor_map(&self, radius: usize) -> Vec<Vec<usize>> {
        self.clips
            .iter()
            .enumerate()
            .map(|(i, ci)| {
                let mut cands: Vec<(f64, usize)> = self
                    .clips
                    .iter()
                    .enumerate()
                    .filter(|&(j, cj)| {
                        j != i && cj.video_index == ci.video_index && !cj.span.overlaps(&ci.span)
                    })
                    .map(|(j, cj)| ((cj.span.center_s() - ci.span.center_s()).abs(), j))
                    .collect();
                cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cands.into_iter().take(radius).map(|(_, j)| j).collect()
            })
            .collect()
    }
}

fn ms(seconds: f64) -> u64 {
    (seconds * 1000.0).round().max(0.0) as u64
}

/// Slices every required stream of `video` to `span`.
pub fn load_clip(
    video: &VideoEntry,
    video_index: usize,
    span: ClipSpan,
    config: &SamplerConfig,
    required: &[Modality],
) -> Result<ClipRecord> {
    let stream = |m: Modality| -> Result<Option<&FeatureSequence>> {
        match video.streams.get(&m) {
            Some(s) => Ok(Some(s)),
            None if required.contains(&m) => Err(Error::MissingModality {
                video_id: video.record.video_id.clone(),
                modality: m.to_string(),
            }),
            None => Ok(None),
        }
    };
    let (start_ms, end_ms) = (ms(span.start_s), ms(span.end_s));
    let visual_2d = stream(Modality::Visual2D)?.map(|s| s.slice_time(start_ms, end_ms));
    let visual_3d = stream(Modality::Visual3D)?.map(|s| s.slice_time(start_ms, end_ms));
    let text = stream(Modality::Text)?.map(|s| s.slice_time(start_ms, end_ms));
    let audio = match stream(Modality::Audio)? {
        Some(seq) => {
            let hop = video.record.audio_hop_ms;
            let n = seq.num_steps();
            let first = ((span.start_s * 1000.0 / hop).floor() as usize).min(n);
            let last = ((span.end_s * 1000.0 / hop).floor() as usize).clamp(first, n);
            let config_spec = SpectrogramConfig {
                window_ms: hop,
                hop_ms: hop,
                num_mel_bands: seq.dim(),
                ..SpectrogramConfig::default()
            };
            let raw = Spectrogram {
                frames: seq.values.slice(s![first..last, ..]).to_owned(),
                config: config_spec,
            };
            Some(crop_or_pad(&raw, config.target_frames(hop)))
        }
        None => None,
    };
    Ok(ClipRecord {
        video_id: video.record.video_id.clone(),
        video_index,
        span,
        visual_2d,
        visual_3d,
        audio,
        text,
    })
}

/// Picks `N` videos without replacement and `M` random clips from each.
/// Deterministic in `(dataset, config, epoch_seed)`.
pub fn assemble_batch(
    dataset: &Dataset,
    config: &SamplerConfig,
    required: &[Modality],
    epoch_seed: u64,
) -> Result<ClipBatch> {
    config.validate()?;
    let eligible: Vec<usize> = dataset
        .videos
        .iter()
        .enumerate()
        .filter(|(_, v)| v.record.duration_s >= config.clip_length_s)
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < config.videos_per_batch {
        return Err(Error::InsufficientVideos {
            available: eligible.len(),
            required: config.videos_per_batch,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let chosen: Vec<usize> = sample(&mut rng, eligible.len(), config.videos_per_batch)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    assemble_batch_for_videos(dataset, &chosen, config, required, rng.gen())
}

/// `M` random clips from each of the given videos, in order.
pub fn assemble_batch_for_videos(
    dataset: &Dataset,
    videos: &[usize],
    config: &SamplerConfig,
    required: &[Modality],
    seed: u64,
) -> Result<ClipBatch> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(videos.len() * config.clips_per_video);
    for &vi in videos {
        let video = dataset.videos.get(vi).ok_or(Error::InsufficientVideos {
            available: dataset.len(),
            required: vi + 1,
        })?;
        let spans = sample_random_clips_with(
            &mut rng,
            &video.record.video_id,
            video.record.duration_s,
            config.clips_per_video,
            config.clip_length_s,
        )?;
        for span in spans {
            clips.push(load_clip(video, vi, span, config, required)?);
        }
    }
    Ok(ClipBatch { clips })
}

/// One deterministic clip per video covering its first `clip_length_s`
/// seconds (or the whole video when shorter), for held-out evaluation.
pub fn evaluation_clips(dataset: &Dataset, config: &SamplerConfig, required: &[Modality]) -> Result<ClipBatch> {
    let clips = dataset
        .videos
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let end = config.clip_length_s.min(v.record.duration_s);
            let span = ClipSpan::new(&v.record.video_id, 0.0, end)?;
            load_clip(v, vi, span, config, required)
        })
        .collect::<Result<_>>()?;
    Ok(ClipBatch { clips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn video(id: &str, duration_s: f64, with_audio: bool) -> VideoEntry {
        let steps = duration_s as usize;
        let mut streams = BTreeMap::new();
        streams.insert(
            Modality::Visual2D,
            FeatureSequence::uniform(
                Modality::Visual2D,
                Array2::from_shape_fn((steps, 2), |(t, d)| (t * 2 + d) as f64),
                1000,
            ),
        );
        if with_audio {
            let frames = (duration_s * 10.0) as usize;
            streams.insert(
                Modality::Audio,
                FeatureSequence::uniform(Modality::Audio, Array2::from_shape_fn((frames, 3), |(t, _)| t as f64), 100),
            );
        }
        VideoEntry {
            record: ManifestRecord {
                video_id: id.into(),
                duration_s,
                features: BTreeMap::new(),
                audio_hop_ms: 100.0,
                asr: None,
                labels: None,
                split: None,
            },
            streams,
        }
    }

    #[test]
    fn zero_slack_gives_identical_spans() {
        let spans = sample_random_clips("v", 10.0, 3, 10.0, 1).unwrap();
        assert_eq!(spans.len(), 3);
        for s in spans {
            assert_eq!((s.start_s, s.end_s), (0.0, 10.0));
        }
    }

    #[test]
    fn too_short_video() {
        assert!(matches!(
            sample_random_clips("v", 9.9, 1, 10.0, 0),
            Err(Error::VideoTooShort { .. })
        ));
    }

    #[test]
    fn seeded_sampling_repeats() {
        let a = sample_random_clips("v", 60.0, 32, 10.0, 7).unwrap();
        let b = sample_random_clips("v", 60.0, 32, 10.0, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_random_clips("v", 60.0, 32, 10.0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn asr_segments() {
        let segs = vec![
            AsrSegment { start_s: 0.0, end_s: 4.2, caption: "add flour".into() },
            AsrSegment { start_s: 4.2, end_s: 9.0, caption: "mix well".into() },
        ];
        let clips = clips_from_asr("v", &segs).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].1, "add flour");
        assert_eq!((clips[1].0.start_s, clips[1].0.end_s), (4.2, 9.0));
        assert!(matches!(clips_from_asr("v", &[]), Err(Error::EmptyTranscript)));
        let bad = [AsrSegment { start_s: 5.0, end_s: 5.0, caption: String::new() }];
        assert!(matches!(clips_from_asr("v", &bad), Err(Error::InvalidSpan { .. })));
    }

    fn spec(frames: usize) -> Spectrogram {
        Spectrogram {
            frames: Array2::from_shape_fn((frames, 4), |(t, b)| (t * 4 + b) as f64),
            config: SpectrogramConfig::default(),
        }
    }

    #[test]
    fn crop_and_pad() {
        let x = spec(98);
        assert_eq!(crop_or_pad(&x, 98), x);
        let padded = crop_or_pad(&spec(50), 98);
        assert_eq!(padded.num_frames(), 98);
        assert_eq!(padded.frames.slice(s![..50, ..]), spec(50).frames);
        let floor = 1e-10f64.ln();
        assert!(padded.frames.slice(s![50.., ..]).iter().all(|&v| v == floor));
        let cropped = crop_or_pad(&spec(200), 98);
        assert_eq!(cropped.frames, spec(200).frames.slice(s![..98, ..]));
    }

    #[test]
    fn batch_cardinality() {
        let ds = Dataset {
            videos: (0..5).map(|i| video(&format!("v{i}"), 20.0, true)).collect(),
        };
        let cfg = SamplerConfig {
            videos_per_batch: 2,
            clips_per_video: 3,
            ..SamplerConfig::default()
        };
        let batch = assemble_batch(&ds, &cfg, &[Modality::Visual2D, Modality::Audio], 3).unwrap();
        assert_eq!(batch.len(), 6);
        let mut per_video = BTreeMap::new();
        for c in &batch.clips {
            *per_video.entry(c.video_index).or_insert(0) += 1;
            assert_eq!(c.audio.as_ref().unwrap().num_frames(), 100);
            let v = c.visual_2d.as_ref().unwrap();
            assert!(v.timestamps_ms.iter().all(|&t| t >= ms(c.span.start_s) && t < ms(c.span.end_s)));
        }
        assert_eq!(per_video.len(), 2);
        assert!(per_video.values().all(|&n| n == 3));
        assert_eq!(batch, assemble_batch(&ds, &cfg, &[Modality::Visual2D, Modality::Audio], 3).unwrap());
    }

    #[test]
    fn batch_errors() {
        let ds = Dataset { videos: vec![video("a", 20.0, false)] };
        let cfg = SamplerConfig { videos_per_batch: 2, ..SamplerConfig::default() };
        assert!(matches!(
            assemble_batch(&ds, &cfg, &[], 0),
            Err(Error::InsufficientVideos { available: 1, required: 2 })
        ));
        let cfg = SamplerConfig { videos_per_batch: 1, ..SamplerConfig::default() };
        assert!(matches!(
            assemble_batch(&ds, &cfg, &[Modality::Audio], 0),
            Err(Error::MissingModality { .. })
        ));
    }

    #[test]
    fn audio_frames_follow_span() {
        let v = video("a", 30.0, true);
        let span = ClipSpan::new("a", 2.55, 12.55).unwrap();
        let cfg = SamplerConfig::default();
        let clip = load_clip(&v, 0, span, &cfg, &[]).unwrap();
        let audio = clip.audio.unwrap();
        // frames floor(2550/100) = 25 .. floor(12550/100) = 125
        assert_eq!(audio.frames[[0, 0]], 25.0);
        assert_eq!(audio.frames[[99, 0]], 124.0);
    }

    #[test]
    fn neighbors_are_nearest_non_overlapping() {
        let clip = |vi: usize, s: f64| ClipRecord {
            video_id: String::new(),
            video_index: vi,
            span: ClipSpan::new("x", s, s + 10.0).unwrap(),
            visual_2d: None,
            visual_3d: None,
            audio: None,
            text: None,
        };
        let batch = ClipBatch {
            clips: vec![clip(0, 0.0), clip(0, 5.0), clip(0, 10.0), clip(0, 30.0), clip(1, 10.0)],
        };
        let map = batch.neighbor_map(1);
        assert_eq!(map[0], vec![2]);
        assert_eq!(map[1], vec![3]);
        assert_eq!(map[3], vec![2]);
        assert_eq!(map[4], Vec::<usize>::new());
        assert_eq!(batch.neighbor_map(2)[0], vec![2, 3]);
    }
}
