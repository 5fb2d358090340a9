use mmembed::concepts::framewise_audio_embeddings;
use mmembed::features::{FeatureSequence, Modality, PooledFeature};
use mmembed::frontend::{Spectrogram, SpectrogramConfig};
use mmembed::model::{
    audio_encoder_forward, concat_visual, forward, fused_gated_projection, gated_projection, temporal_max_pool,
    temporal_mean_pool, text_pool, AudioEncoderParams, BatchInputs, FusedGatingParams, GatingParams, ModelConfig,
    ModelParams, Variant, VisualMode,
};
use mmembed::retrieval::{retrieve_multimodal, RetrievalMode};
use ndarray::{s, Array1, Array2};

mod common;
use common::*;

/// σ(1) to 20 digits (mpmath).
const SIGMOID_ONE: f64 = 0.731_058_578_630_004_879_25;

fn seq(m: Modality, values: Array2<f64>) -> FeatureSequence {
    FeatureSequence::uniform(m, values, 1000)
}

fn spectrogram(frames: Array2<f64>) -> Spectrogram {
    Spectrogram {
        frames,
        config: SpectrogramConfig::default(),
    }
}

fn naive_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn naive_affine(w: &Array2<f64>, b: &Array1<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|i| b[i] + (0..w.ncols()).map(|j| w[[i, j]] * x[j]).sum::<f64>())
        .collect()
}

fn naive_gate(h: &[f64], w: &Array2<f64>, b: &Array1<f64>) -> Vec<f64> {
    let z = naive_affine(w, b, h);
    h.iter().zip(z).map(|(h, z)| h * naive_sigmoid(z)).collect()
}

#[test]
fn max_pool_is_columnwise_scan() {
    let mut r = rng(1);
    let x = random_matrix(&mut r, 10, 4, 5.0);
    let got = temporal_max_pool(&seq(Modality::Visual2D, x.clone())).unwrap();
    for c in 0..4 {
        let mut m = f64::NEG_INFINITY;
        for t in 0..10 {
            if x[[t, c]] > m {
                m = x[[t, c]];
            }
        }
        assert_eq!(got.values[c], m);
    }
}

#[test]
fn mean_pool_matches_compensated_sum() {
    let mut r = rng(2);
    let x = random_matrix(&mut r, 7, 3, 100.0);
    let got = temporal_mean_pool(&seq(Modality::Audio, x.clone())).unwrap();
    for c in 0..3 {
        // Neumaier summation as the extended-precision reference.
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for t in 0..7 {
            let v = x[[t, c]];
            let next = sum + v;
            comp += if sum.abs() >= v.abs() { (sum - next) + v } else { (v - next) + sum };
            sum = next;
        }
        let want = (sum + comp) / 7.0;
        assert!((got.values[c] - want).abs() < 1e-12);
    }
}

#[test]
fn text_pool_is_word_max() {
    let mut r = rng(3);
    let words = random_matrix(&mut r, 12, 5, 1.0);
    let got = text_pool(&seq(Modality::Text, words.clone())).unwrap();
    for c in 0..5 {
        let m = words.column(c).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        assert_eq!(got.values[c], m);
    }
}

#[test]
fn visual_concat_dims() {
    let a = PooledFeature::new(Modality::Visual2D, Array1::zeros(2048));
    let b = PooledFeature::new(Modality::Visual3D, Array1::zeros(2048));
    assert_eq!(concat_visual(&a, Some(&b), VisualMode::Concat).unwrap().dim(), 4096);
    let a = PooledFeature::new(Modality::Visual2D, Array1::from(vec![1.0, 2.0]));
    let only = concat_visual(&a, None, VisualMode::Only2D).unwrap();
    assert_eq!(only.values.to_vec(), vec![1.0, 2.0]);
}

#[test]
fn encoder_matches_per_frame_loop() {
    let mut r = rng(4);
    let params = AudioEncoderParams::random(6, &[5], 4, &mut r);
    let frames = random_matrix(&mut r, 5, 6, 1.0);
    let pooled = audio_encoder_forward(&spectrogram(frames.clone()), &params).unwrap();
    let mut want = vec![0.0; 4];
    for t in 0..5 {
        let mut h: Vec<f64> = frames.row(t).to_vec();
        for (li, layer) in params.layers.iter().enumerate() {
            h = naive_affine(&layer.weight, &layer.bias, &h);
            if li + 1 < params.layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        for (w, v) in want.iter_mut().zip(h) {
            *w += v / 5.0;
        }
    }
    for (g, w) in pooled.values.iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn identity_gate_value() {
    let p = GatingParams {
        w1: Array2::eye(2),
        b1: Array1::zeros(2),
        w2: Array2::eye(2),
        b2: Array1::zeros(2),
    };
    let x = PooledFeature::new(Modality::Visual2D, Array1::from(vec![1.0, 0.0]));
    let out = gated_projection(&x, &p).unwrap();
    assert!((out[0] - SIGMOID_ONE).abs() < 1e-15);
    assert_eq!(out[1], 0.0);
}

#[test]
fn gated_heads_match_direct_formula() {
    let mut r = rng(5);
    let p = GatingParams::random(6, 4, &mut r);
    let x: Vec<f64> = random_matrix(&mut r, 1, 6, 1.0).row(0).to_vec();
    let got = gated_projection(&PooledFeature::new(Modality::Audio, Array1::from(x.clone())), &p).unwrap();
    let want = naive_gate(&naive_affine(&p.w1, &p.b1, &x), &p.w2, &p.b2);
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-14);
    }

    let f = FusedGatingParams::random(5, 3, 4, &mut r);
    let a: Vec<f64> = random_matrix(&mut r, 1, 5, 1.0).row(0).to_vec();
    let t: Vec<f64> = random_matrix(&mut r, 1, 3, 1.0).row(0).to_vec();
    let got = fused_gated_projection(
        &PooledFeature::new(Modality::Audio, Array1::from(a.clone())),
        &PooledFeature::new(Modality::Text, Array1::from(t.clone())),
        &f,
    )
    .unwrap();
    let ha = naive_affine(&f.wa1, &f.b1, &a);
    let ht = naive_affine(&f.wt1, &Array1::zeros(4), &t);
    let h: Vec<f64> = ha.iter().zip(&ht).map(|(a, t)| a + t).collect();
    let want = naive_gate(&h, &f.wg, &f.bg);
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-14);
    }
}

#[test]
fn full_size_embedding_widths() {
    assert_eq!(ModelConfig::full_size(Variant::Av).embed_dim, 4096);
    assert_eq!(ModelConfig::full_size(Variant::Fused).embed_dim, 4096);
    assert_eq!(ModelConfig::full_size(Variant::TriModal).embed_dim, 6144);
    assert_eq!(ModelConfig::default().visual_input_dim(), 4096);
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        visual_2d_dim: 3,
        visual_3d_dim: 2,
        visual_2d_only: false,
        audio_bands: 4,
        encoder_hidden: vec![6],
        encoder_output_dim: 5,
        text_dim: 3,
        embed_dim: 4,
        normalize: false,
    }
}

#[test]
fn framewise_frames_equal_single_frame_pipeline() {
    let cfg = tiny(Variant::Av);
    let params = ModelParams::init(&cfg, 8).unwrap();
    let mut r = rng(6);
    let frames = random_matrix(&mut r, 5, 4, 2.0);
    let all = framewise_audio_embeddings(&spectrogram(frames.clone()), &params).unwrap();
    assert_eq!(all.num_steps(), 5);
    let head = params.audio.as_ref().unwrap();
    for i in 0..5 {
        let one = spectrogram(frames.slice(s![i..i + 1, ..]).to_owned());
        let pooled = audio_encoder_forward(&one, &params.audio_encoder).unwrap();
        let want = gated_projection(&pooled, head).unwrap();
        assert_eq!(all.values.row(i), want);
    }
    let constant = Array2::from_shape_fn((3, 4), |(_, j)| j as f64);
    let c = framewise_audio_embeddings(&spectrogram(constant), &params).unwrap();
    assert_eq!(c.values.row(0), c.values.row(2));
}

#[test]
fn fused_with_zero_text_reduces_to_audio_retrieval() {
    let cfg = tiny(Variant::Fused);
    let params = ModelParams::init(&cfg, 3).unwrap();
    let mut r = rng(7);
    let b = 4;
    let frames = random_matrix(&mut r, 3 * b, 4, 1.0);
    let inputs = BatchInputs {
        visual: random_matrix(&mut r, b, 5, 1.0),
        audio_frames: frames.clone(),
        audio_offsets: (0..=b).map(|i| 3 * i).collect(),
        text: Some(Array2::zeros((b, 3))),
    };
    let (mut emb, _) = forward(&params, &cfg, &inputs).unwrap();
    let head = params.audio_head().unwrap();
    let mut audio = Array2::zeros((b, 4));
    for i in 0..b {
        let clip = spectrogram(frames.slice(s![3 * i..3 * i + 3, ..]).to_owned());
        let pooled = audio_encoder_forward(&clip, &params.audio_encoder).unwrap();
        audio.row_mut(i).assign(&gated_projection(&pooled, &head).unwrap());
    }
    emb.audio = Some(audio);
    let fused = retrieve_multimodal(RetrievalMode::TplusAtoV, &emb).unwrap();
    let av = retrieve_multimodal(RetrievalMode::AtoV, &emb).unwrap();
    for (f, a) in fused.scores.iter().zip(av.scores.iter()) {
        assert!((f - a).abs() < 1e-12);
    }
}

#[test]
fn audio_to_video_is_transpose_of_video_to_audio() {
    let mut r = rng(9);
    let emb = mmembed::model::Embeddings {
        video: random_matrix(&mut r, 5, 3, 1.0),
        audio: Some(random_matrix(&mut r, 5, 3, 1.0)),
        text: None,
        language: None,
    };
    let av = retrieve_multimodal(RetrievalMode::AtoV, &emb).unwrap();
    let va = retrieve_multimodal(RetrievalMode::VtoA, &emb).unwrap();
    assert_eq!(av.scores, va.scores.t());
}
