//! Pooling, gated projection heads, the framewise audio encoder, and the
//! batched forward/backward passes of the three architecture variants.

mod encoder;
mod gating;
mod pooling;

pub use encoder::{audio_encoder_forward, Activation, AudioEncoderParams, EncoderCache, EncoderLayer};
pub use gating::{fused_gated_projection, gated_projection, sigmoid, FusedGatingParams, GateCache, GatingParams};
pub use pooling::{
    argmax_steps, concat_visual, temporal_max_pool, temporal_max_pool_backward, temporal_mean_pool,
    temporal_mean_pool_backward, text_pool, VisualMode,
};

use ndarray::{s, Array2, ArrayView2, Axis, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Modality;
use crate::params::Parameters;
use crate::sampler::ClipBatch;

/// Uniform in `[-1/sqrt(d_in), 1/sqrt(d_in)]` for a `[d_out, d_in]` matrix.
pub(crate) fn init_uniform(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (shape.1.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..=bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Video and audio heads.
    Av,
    /// Separate video, audio and text heads.
    TriModal,
    /// Video head plus one audio+text head with a shared gate.
    Fused,
}

impl Variant {
    pub fn uses_text(self) -> bool {
        matches!(self, Variant::TriModal | Variant::Fused)
    }

    pub fn required_modalities(self, visual: VisualMode) -> Vec<Modality> {
        let mut m = vec![Modality::Visual2D];
        if visual == VisualMode::Concat {
            m.push(Modality::Visual3D);
        }
        m.push(Modality::Audio);
        if self.uses_text() {
            m.push(Modality::Text);
        }
        m
    }
}

/// Model topology. Defaults follow the full-size configuration: 2048-d 2D and
/// 3D visual features, 40 mel bands, a 1024-d audio vector and 4096-d
/// embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub visual_2d_dim: usize,
    pub visual_3d_dim: usize,
    /// Feed only the 2D visual features to the video head.
    pub visual_2d_only: bool,
    pub audio_bands: usize,
    /// Widths of the ReLU hidden layers of the audio encoder.
    pub encoder_hidden: Vec<usize>,
    pub encoder_output_dim: usize,
    pub text_dim: usize,
    pub embed_dim: usize,
    /// L2-normalize embeddings before scoring.
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Av,
            visual_2d_dim: 2048,
            visual_3d_dim: 2048,
            visual_2d_only: false,
            audio_bands: 40,
            encoder_hidden: vec![512],
            encoder_output_dim: 1024,
            text_dim: 300,
            embed_dim: 4096,
            normalize: false,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration of a variant; the tri-modal model uses a
    /// wider 6144-d shared space.
    pub fn full_size(variant: Variant) -> Self {
        ModelConfig {
            variant,
            embed_dim: if variant == Variant::TriModal { 6144 } else { 4096 },
            ..ModelConfig::default()
        }
    }

    pub fn visual_mode(&self) -> VisualMode {
        if self.visual_2d_only {
            VisualMode::Only2D
        } else {
            VisualMode::Concat
        }
    }

    pub fn visual_input_dim(&self) -> usize {
        match self.visual_mode() {
            VisualMode::Only2D => self.visual_2d_dim,
            VisualMode::Concat => self.visual_2d_dim + self.visual_3d_dim,
        }
    }

    pub fn required_modalities(&self) -> Vec<Modality> {
        self.variant.required_modalities(self.visual_mode())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.visual_2d_dim,
            self.audio_bands,
            self.encoder_output_dim,
            self.text_dim,
            self.embed_dim,
        ];
        if dims.contains(&0) || self.encoder_hidden.contains(&0) {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !self.visual_2d_only && self.visual_3d_dim == 0 {
            return Err(Error::InvalidConfig("visual_3d_dim must be positive unless visual_2d_only".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub visual: GatingParams,
    pub audio_encoder: AudioEncoderParams,
    /// Audio head (AV and tri-modal variants).
    pub audio: Option<GatingParams>,
    /// Text head (tri-modal variant).
    pub text: Option<GatingParams>,
    /// Audio+text head (fused variant).
    pub fused: Option<FusedGatingParams>,
}

impl ModelParams {
    /// Seeded initialization: fan-in uniform weights, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let visual = GatingParams::random(c.visual_input_dim(), c.embed_dim, &mut rng);
        let audio_encoder =
            AudioEncoderParams::random(c.audio_bands, &c.encoder_hidden, c.encoder_output_dim, &mut rng);
        let (audio, text, fused) = match c.variant {
            Variant::Av => (Some(GatingParams::random(c.encoder_output_dim, c.embed_dim, &mut rng)), None, None),
            Variant::TriModal => (
                Some(GatingParams::random(c.encoder_output_dim, c.embed_dim, &mut rng)),
                Some(GatingParams::random(c.text_dim, c.embed_dim, &mut rng)),
                None,
            ),
            Variant::Fused => (
                None,
                None,
                Some(FusedGatingParams::random(c.encoder_output_dim, c.text_dim, c.embed_dim, &mut rng)),
            ),
        };
        Ok(ModelParams {
            visual,
            audio_encoder,
            audio,
            text,
            fused,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let gating = |d_in| GatingParams::zeros(d_in, c.embed_dim);
        Ok(ModelParams {
            visual: gating(c.visual_input_dim()),
            audio_encoder: AudioEncoderParams::zeros(c.audio_bands, &c.encoder_hidden, c.encoder_output_dim),
            audio: (c.variant != Variant::Fused).then(|| gating(c.encoder_output_dim)),
            text: (c.variant == Variant::TriModal).then(|| gating(c.text_dim)),
            fused: (c.variant == Variant::Fused)
                .then(|| FusedGatingParams::zeros(c.encoder_output_dim, c.text_dim, c.embed_dim)),
        })
    }

    /// Zero tensors with this parameter set's shapes.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, data| data.fill(0.0));
        z
    }

    /// The head that maps a pooled (or single-frame) audio vector into the
    /// shared space. For the fused variant this is the audio branch with a
    /// zero text input.
    pub fn audio_head(&self) -> Result<GatingParams> {
        match (&self.audio, &self.fused) {
            (Some(a), _) => Ok(a.clone()),
            (None, Some(f)) => Ok(f.audio_head()),
            _ => Err(Error::ShapeMismatch("model has no audio head".into())),
        }
    }
}

fn visit_array<D: Dimension>(
    prefix: &str,
    name: &str,
    a: &ndarray::Array<f64, D>,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    let data = a.as_slice().expect("parameter arrays are contiguous");
    f(&format!("{prefix}.{name}"), a.shape(), data);
}

fn visit_array_mut<D: Dimension>(
    prefix: &str,
    name: &str,
    a: &mut ndarray::Array<f64, D>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = a.shape().to_vec();
    let data = a.as_slice_mut().expect("parameter arrays are contiguous");
    f(&format!("{prefix}.{name}"), &shape, data);
}

macro_rules! visit_fields {
    ($visit:ident, $self:ident, $prefix:expr, $f:ident, [$($field:ident),*]) => {
        $( $visit($prefix, stringify!($field), & $self.$field, $f); )*
    };
    (mut $visit:ident, $self:ident, $prefix:expr, $f:ident, [$($field:ident),*]) => {
        $( $visit($prefix, stringify!($field), &mut $self.$field, $f); )*
    };
}

impl GatingParams {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_fields!(visit_array, self, prefix, f, [w1, b1, w2, b2]);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_fields!(mut visit_array_mut, self, prefix, f, [w1, b1, w2, b2]);
    }
}

impl FusedGatingParams {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_fields!(visit_array, self, prefix, f, [wa1, wt1, b1, wg, bg]);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_fields!(mut visit_array_mut, self, prefix, f, [wa1, wt1, b1, wg, bg]);
    }
}

impl Parameters for GatingParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.visit_named("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.visit_named_mut("head", f);
    }
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.visual.visit_named("visual", f);
        for (i, layer) in self.audio_encoder.layers.iter().enumerate() {
            let prefix = format!("audio_encoder.layer{i}");
            visit_array(&prefix, "weight", &layer.weight, f);
            visit_array(&prefix, "bias", &layer.bias, f);
        }
        if let Some(h) = &self.audio {
            h.visit_named("audio", f);
        }
        if let Some(h) = &self.text {
            h.visit_named("text", f);
        }
        if let Some(h) = &self.fused {
            h.visit_named("fused", f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.visual.visit_named_mut("visual", f);
        for (i, layer) in self.audio_encoder.layers.iter_mut().enumerate() {
            let prefix = format!("audio_encoder.layer{i}");
            visit_array_mut(&prefix, "weight", &mut layer.weight, f);
            visit_array_mut(&prefix, "bias", &mut layer.bias, f);
        }
        if let Some(h) = &mut self.audio {
            h.visit_named_mut("audio", f);
        }
        if let Some(h) = &mut self.text {
            h.visit_named_mut("text", f);
        }
        if let Some(h) = &mut self.fused {
            h.visit_named_mut("fused", f);
        }
    }
}

/// Constant model inputs for one batch: pooled visual and text vectors and
/// the stacked spectrogram frames of every clip.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs {
    /// `[B, visual_input_dim]`
    pub visual: Array2<f64>,
    /// All clips' frames stacked; clip `i` owns rows `offsets[i]..offsets[i+1]`.
    pub audio_frames: Array2<f64>,
    pub audio_offsets: Vec<usize>,
    /// `[B, text_dim]` when the variant uses text.
    pub text: Option<Array2<f64>>,
}

impl BatchInputs {
    pub fn len(&self) -> usize {
        self.visual.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_batch(batch: &ClipBatch, config: &ModelConfig) -> Result<Self> {
        let missing = |clip: &crate::sampler::ClipRecord, m: Modality| Error::MissingModality {
            video_id: clip.video_id.clone(),
            modality: m.to_string(),
        };
        let b = batch.len();
        let mode = config.visual_mode();
        let mut visual = Array2::zeros((b, config.visual_input_dim()));
        let mut text = config.variant.uses_text().then(|| Array2::zeros((b, config.text_dim)));
        let mut frames = Vec::with_capacity(b);
        for (i, clip) in batch.clips.iter().enumerate() {
            let v2d = temporal_max_pool(clip.visual_2d.as_ref().ok_or_else(|| missing(clip, Modality::Visual2D))?)?;
            let v3d = match mode {
                VisualMode::Concat => Some(temporal_max_pool(
                    clip.visual_3d.as_ref().ok_or_else(|| missing(clip, Modality::Visual3D))?,
                )?),
                VisualMode::Only2D => None,
            };
            let v = concat_visual(&v2d, v3d.as_ref(), mode)?;
            if v.dim() != visual.ncols() {
                return Err(Error::ShapeMismatch(format!(
                    "clip {i}: visual vector has {} dims, model expects {}",
                    v.dim(),
                    visual.ncols()
                )));
            }
            visual.row_mut(i).assign(&v.values);
            if let Some(text) = text.as_mut() {
                let words = clip.text.as_ref().ok_or_else(|| missing(clip, Modality::Text))?;
                let t = text_pool(words)?;
                if t.dim() != config.text_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "clip {i}: text vector has {} dims, model expects {}",
                        t.dim(),
                        config.text_dim
                    )));
                }
                text.row_mut(i).assign(&t.values);
            }
            let audio = clip.audio.as_ref().ok_or_else(|| missing(clip, Modality::Audio))?;
            frames.push(audio.frames.view());
        }
        let (audio_frames, audio_offsets) = stack_frames(&frames, config.audio_bands)?;
        Ok(BatchInputs {
            visual,
            audio_frames,
            audio_offsets,
            text,
        })
    }
}

/// Stacks per-clip frame matrices, returning the row offsets of each clip.
pub fn stack_frames(frames: &[ArrayView2<f64>], bands: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut offsets = vec![0];
    for (i, f) in frames.iter().enumerate() {
        if f.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        if f.ncols() != bands {
            return Err(Error::ShapeMismatch(format!(
                "clip {i}: spectrogram has {} bands, model expects {bands}",
                f.ncols()
            )));
        }
        offsets.push(offsets[i] + f.nrows());
    }
    let stacked = if frames.is_empty() {
        Array2::zeros((0, bands))
    } else {
        ndarray::concatenate(Axis(0), frames).unwrap()
    };
    Ok((stacked, offsets))
}

/// Shared-space embeddings for one batch, one row per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub video: Array2<f64>,
    pub audio: Option<Array2<f64>>,
    pub text: Option<Array2<f64>>,
    /// Fused audio+text embeddings.
    pub language: Option<Array2<f64>>,
}

/// Gradients of a loss with respect to each embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub video: Array2<f64>,
    pub audio: Option<Array2<f64>>,
    pub text: Option<Array2<f64>>,
    pub language: Option<Array2<f64>>,
}

/// Forward intermediates for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    visual: GateCache,
    encoder: EncoderCache,
    pooled_audio: Array2<f64>,
    audio: Option<GateCache>,
    text: Option<GateCache>,
    fused: Option<GateCache>,
    /// Un-normalized head outputs, kept only when normalization is on.
    raw: Option<Embeddings>,
}

fn mean_pool_segments(x: &Array2<f64>, offsets: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((offsets.len() - 1, x.ncols()));
    for (i, w) in offsets.windows(2).enumerate() {
        let seg = x.slice(s![w[0]..w[1], ..]);
        out.row_mut(i).assign(&seg.mean_axis(Axis(0)).unwrap());
    }
    out
}

fn mean_pool_segments_backward(d_pooled: &Array2<f64>, offsets: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((offsets[offsets.len() - 1], d_pooled.ncols()));
    for (i, w) in offsets.windows(2).enumerate() {
        let scaled = &d_pooled.row(i) / (w[1] - w[0]) as f64;
        out.slice_mut(s![w[0]..w[1], ..]).assign(&scaled.broadcast((w[1] - w[0], scaled.len())).unwrap());
    }
    out
}

fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

fn l2_normalize_rows_backward(raw: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
    let mut dx = d_out.clone();
    for ((mut dx, x), dy) in dx.rows_mut().into_iter().zip(raw.rows()).zip(d_out.rows()) {
        let n = x.dot(&x).sqrt();
        if n > 0.0 {
            let y = &x / n;
            let proj = y.dot(&dy);
            dx.assign(&((&dy - &(&y * proj)) / n));
        }
    }
    dx
}

fn require<'a, T>(x: Option<&'a T>, what: &str) -> Result<&'a T> {
    x.ok_or_else(|| Error::ShapeMismatch(format!("model has no {what} parameters")))
}

/// Embeds one batch with every head the variant defines.
pub fn forward(params: &ModelParams, config: &ModelConfig, inputs: &BatchInputs) -> Result<(Embeddings, ForwardCache)> {
    if inputs.audio_offsets.len() != inputs.len() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} audio segments for {} clips",
            inputs.audio_offsets.len().saturating_sub(1),
            inputs.len()
        )));
    }
    let (video, visual_cache) = params.visual.forward_batch(inputs.visual.view())?;
    let (framewise, encoder) = params.audio_encoder.forward_frames(inputs.audio_frames.view())?;
    let pooled_audio = mean_pool_segments(&framewise, &inputs.audio_offsets);

    let mut emb = Embeddings {
        video,
        audio: None,
        text: None,
        language: None,
    };
    let mut cache = ForwardCache {
        visual: visual_cache,
        encoder,
        pooled_audio,
        audio: None,
        text: None,
        fused: None,
        raw: None,
    };
    match config.variant {
        Variant::Av | Variant::TriModal => {
            let head = require(params.audio.as_ref(), "audio head")?;
            let (a, c) = head.forward_batch(cache.pooled_audio.view())?;
            emb.audio = Some(a);
            cache.audio = Some(c);
            if config.variant == Variant::TriModal {
                let head = require(params.text.as_ref(), "text head")?;
                let text = require(inputs.text.as_ref(), "text input")?;
                let (t, c) = head.forward_batch(text.view())?;
                emb.text = Some(t);
                cache.text = Some(c);
            }
        }
        Variant::Fused => {
            let head = require(params.fused.as_ref(), "fused head")?;
            let text = require(inputs.text.as_ref(), "text input")?;
            let (l, c) = head.forward_batch(cache.pooled_audio.view(), text.view())?;
            emb.language = Some(l);
            cache.fused = Some(c);
        }
    }
    if config.normalize {
        let normalized = Embeddings {
            video: l2_normalize_rows(&emb.video),
            audio: emb.audio.as_ref().map(l2_normalize_rows),
            text: emb.text.as_ref().map(l2_normalize_rows),
            language: emb.language.as_ref().map(l2_normalize_rows),
        };
        cache.raw = Some(emb);
        emb = normalized;
    }
    Ok((emb, cache))
}

/// Reverse pass: parameter gradients of a loss given its gradients with
/// respect to the embeddings. Visual and text inputs are constants.
pub fn backward(
    params: &ModelParams,
    inputs: &BatchInputs,
    cache: &ForwardCache,
    grads: &EmbeddingGrads,
) -> Result<ModelParams> {
    let mut out = params.zeros_like();
    let unnormalize = |raw: Option<&Array2<f64>>, d: &Array2<f64>| match raw {
        Some(raw) => l2_normalize_rows_backward(raw, d),
        None => d.clone(),
    };
    let raw = cache.raw.as_ref();

    let d_video = unnormalize(raw.map(|r| &r.video), &grads.video);
    params
        .visual
        .backward_batch(inputs.visual.view(), &cache.visual, &d_video, &mut out.visual);

    let mut d_pooled_audio = Array2::zeros(cache.pooled_audio.dim());
    if let (Some(head), Some(c), Some(d)) = (&params.audio, &cache.audio, &grads.audio) {
        let d = unnormalize(raw.and_then(|r| r.audio.as_ref()), d);
        d_pooled_audio += &head.backward_batch(cache.pooled_audio.view(), c, &d, out.audio.as_mut().unwrap());
    }
    if let (Some(head), Some(c), Some(d)) = (&params.text, &cache.text, &grads.text) {
        let d = unnormalize(raw.and_then(|r| r.text.as_ref()), d);
        let text = require(inputs.text.as_ref(), "text input")?;
        head.backward_batch(text.view(), c, &d, out.text.as_mut().unwrap());
    }
    if let (Some(head), Some(c), Some(d)) = (&params.fused, &cache.fused, &grads.language) {
        let d = unnormalize(raw.and_then(|r| r.language.as_ref()), d);
        let text = require(inputs.text.as_ref(), "text input")?;
        let (da, _) = head.backward_batch(cache.pooled_audio.view(), text.view(), c, &d, out.fused.as_mut().unwrap());
        d_pooled_audio += &da;
    }
    let d_frames = mean_pool_segments_backward(&d_pooled_audio, &inputs.audio_offsets);
    params
        .audio_encoder
        .backward_frames(&cache.encoder, d_frames, &mut out.audio_encoder);
    Ok(out)
}

/// Shared-space embedding of every spectrogram frame: the encoder output of
/// each frame passed through the audio head, with no temporal pooling.
pub fn framewise_audio_embeddings(frames: ArrayView2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    let (framewise, _) = params.audio_encoder.forward_frames(frames)?;
    let (out, _) = params.audio_head()?.forward_batch(framewise.view())?;
    Ok(out)
}
