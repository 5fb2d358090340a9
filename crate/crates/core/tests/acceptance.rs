//! One test per acceptance criterion. Each prints a single
//! `criterion N ... PASS|FAIL` line straight to stderr (bypassing the test
//! harness capture) before asserting.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use mmembed::concepts::{concept_report, purity, LabeledSet, DEFAULT_TOP_K};
use mmembed::error::Error;
use mmembed::features::{FeatureSequence, Modality};
use mmembed::frontend::{frame_count, log_mel_spectrogram, AudioWaveform, SpectrogramConfig, WindowKind};
use mmembed::losses::{fused_loss, mms_loss, tri_modal_loss, LossKind};
use mmembed::model::Variant;
use mmembed::retrieval::{evaluate_dataset, score_report, similarity_matrix_threaded, Absences, RetrievalMode, SimilarityMatrix};
use mmembed::synthetic::{
    benchmark_train_config, concept_name, generate_paired_dataset, gradcheck_fixture, planted_concept_sets,
    PlantedConceptSpec, SyntheticSpec,
};
use mmembed::train::{gradcheck_batch, train, Checkpoint, TrainConfig, CHECKPOINT_VERSION};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(n: usize, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "criterion {n} {name:<28} {}  ({:.1}s) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// Criterion 1

#[test]
fn criterion_1_gradient_correctness() {
    let t = Instant::now();
    let mut worst = (0.0f64, String::new());
    for variant in [Variant::Av, Variant::TriModal, Variant::Fused] {
        for kind in LossKind::ALL {
            for seed in 0..3 {
                let (cfg, params, batch) = gradcheck_fixture(variant, kind, seed).unwrap();
                assert_eq!(batch.len(), 4);
                let r = gradcheck_batch(&params, &batch, &cfg, 1e-5).unwrap();
                if r.max_relative_error > worst.0 {
                    worst = (r.max_relative_error, format!("{variant:?}/{kind:?}/seed {seed}"));
                }
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = worst.0 < 1e-4 && elapsed < Duration::from_secs(60);
    report(1, "gradient correctness", pass, elapsed, &format!("max rel err {:.2e} ({})", worst.0, worst.1));
    assert!(pass);
}

// Criterion 2

#[test]
fn criterion_2_mms_identities() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    for trial in 0..50 {
        let d = rng.gen_range(1..=8);
        let b = rng.gen_range(2..=8);
        let one_x = Array2::from_shape_simple_fn((1, d), || rng.gen_range(-2.0..2.0));
        let one_y = Array2::from_shape_simple_fn((1, d), || rng.gen_range(-2.0..2.0));
        let single = mms_loss(one_x.view(), one_y.view(), 0.001).unwrap().value;
        if single.abs() >= 1e-12 {
            failures.push(format!("B=1 loss {single:e} (trial {trial})"));
        }
        let x = Array2::from_shape_simple_fn((b, d), || rng.gen_range(-2.0..2.0));
        let y = Array2::from_shape_simple_fn((b, d), || rng.gen_range(-2.0..2.0));
        let xy = mms_loss(x.view(), y.view(), 0.001).unwrap().value;
        let yx = mms_loss(y.view(), x.view(), 0.001).unwrap().value;
        if xy != yx {
            failures.push(format!("asymmetric {xy} vs {yx}"));
        }
        let tri = tri_modal_loss(x.view(), x.view(), x.view(), 0.001).unwrap().value;
        let pair = mms_loss(x.view(), x.view(), 0.001).unwrap().value;
        if (tri - 3.0 * pair).abs() >= 1e-12 {
            failures.push(format!("tri-modal {tri} vs 3x{pair}"));
        }
        let fused = fused_loss(x.view(), y.view(), 0.001).unwrap().value;
        if fused.to_bits() != xy.to_bits() {
            failures.push(format!("fused {fused} vs {xy}"));
        }
    }
    let pass = failures.is_empty();
    report(2, "MMS identities", pass, t.elapsed(), &failures.join("; "));
    assert!(pass);
}

// Criterion 3

fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    for mut row in a.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    a
}

/// Mean and standard error over seeds of R@K for random unit embeddings.
fn random_recall(gallery: usize, ks: &[usize], seeds: u64) -> Vec<(f64, f64)> {
    let truth: Vec<usize> = (0..gallery).collect();
    let mut per_seed = vec![Vec::new(); ks.len()];
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let q = random_unit(&mut rng, gallery, 32);
        let g = random_unit(&mut rng, gallery, 32);
        let sim = SimilarityMatrix {
            scores: similarity_matrix_threaded(q.view(), g.view(), 4).unwrap(),
            query: "random".into(),
            gallery: "random".into(),
        };
        let r = score_report(&sim, &truth, ks, &Absences::default()).unwrap();
        for (i, &k) in ks.iter().enumerate() {
            per_seed[i].push(r.recall(k).unwrap());
        }
    }
    per_seed
        .iter()
        .map(|v| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, (var / n).sqrt())
        })
        .collect()
}

#[test]
fn criterion_3_random_baseline() {
    let t = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    let small = random_recall(1000, &[1, 5, 10], 100);
    for ((mean, se), (k, want)) in small.iter().zip([(1, 0.001), (5, 0.005), (10, 0.01)]) {
        pass &= (mean - want).abs() <= 3.0 * se;
        detail.push(format!("G=1000 R@{k} {:.3}%±{:.3}", mean * 100.0, se * 100.0));
    }
    let (mean, se) = random_recall(3350, &[1], 100)[0];
    pass &= (mean - 0.0003).abs() <= 3.0 * se;
    detail.push(format!("G=3350 R@1 {:.4}%±{:.4}", mean * 100.0, se * 100.0));
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    report(3, "random baseline", pass, elapsed, &detail.join(", "));
    assert!(pass);
}

// Criteria 4 and 5

struct HeldOut {
    a_to_v: (f64, f64),
    v_to_a: (f64, f64),
    gallery: usize,
}

fn train_benchmark(kind: LossKind) -> HeldOut {
    let spec = SyntheticSpec::retrieval_benchmark();
    let data = generate_paired_dataset(&spec).unwrap();
    let mut cfg: TrainConfig = benchmark_train_config(&spec);
    cfg.loss.kind = kind;
    let outcome = train(&cfg, &data.dataset).unwrap();
    let test = data.dataset.split(Some("test"));
    let reports =
        evaluate_dataset(&outcome.checkpoint.params, &cfg.model, &test, &cfg.sampler, &[1, 10], 1).unwrap();
    let get = |mode| {
        let r = reports.iter().find(|r| r.mode == Some(mode)).unwrap();
        (r.recall(1).unwrap(), r.recall(10).unwrap())
    };
    HeldOut {
        a_to_v: get(RetrievalMode::AtoV),
        v_to_a: get(RetrievalMode::VtoA),
        gallery: test.len(),
    }
}

#[test]
fn criterion_4_end_to_end_learning() {
    let t = Instant::now();
    let r = train_benchmark(LossKind::Mms);
    let elapsed = t.elapsed();
    let pass = r.a_to_v.0 >= 0.90
        && r.v_to_a.0 >= 0.90
        && r.a_to_v.1 == 1.0
        && r.v_to_a.1 == 1.0
        && elapsed < Duration::from_secs(300);
    let detail = format!(
        "A->V R@1 {:.3} R@10 {:.3}, V->A R@1 {:.3} R@10 {:.3}, G={}",
        r.a_to_v.0, r.a_to_v.1, r.v_to_a.0, r.v_to_a.1, r.gallery
    );
    report(4, "end-to-end learning", pass, elapsed, &detail);
    assert!(pass);
}

#[test]
fn criterion_5_loss_ablation() {
    let t = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for kind in LossKind::ALL {
        let r = train_benchmark(kind);
        let threshold = 10.0 * 10.0 / r.gallery as f64;
        let ok = r.a_to_v.1 > threshold && r.v_to_a.1 > threshold;
        pass &= ok;
        detail.push(format!("{kind:?} R@10 {:.3}/{:.3} (>{threshold:.3})", r.a_to_v.1, r.v_to_a.1));
    }
    report(5, "loss ablation", pass, t.elapsed(), &detail.join(", "));
    assert!(pass);
}

// Criterion 6

fn brute_force_purity(set: &LabeledSet, dim: usize, k: usize, label: &str) -> f64 {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.values[[b, dim]].total_cmp(&set.values[[a, dim]]).then(a.cmp(&b)));
    let hits = order[..k].iter().filter(|&&i| set.labels[i].contains(label)).count();
    hits as f64 / k as f64
}

#[test]
fn criterion_6_concept_discovery() {
    let t = Instant::now();
    let spec = PlantedConceptSpec::default();
    let (visual, audio) = planted_concept_sets(&spec).unwrap();
    let rep = concept_report(&visual, &audio, DEFAULT_TOP_K).unwrap();
    let planted = spec.num_concepts;
    let mut failures = Vec::new();

    let leading: BTreeSet<usize> = rep.dimensions[..planted].iter().map(|e| e.index).collect();
    if leading != (0..planted).collect() {
        failures.push(format!("top {planted} dims are {leading:?}"));
    }
    let mut min_purity = f64::INFINITY;
    for e in &rep.dimensions {
        let (Some(al), Some(vl)) = (&e.label.audio_label, &e.label.visual_label) else {
            failures.push(format!("dim {} unlabeled", e.index));
            continue;
        };
        if e.index < planted {
            let want = concept_name(e.index);
            if *al != want || *vl != want {
                failures.push(format!("dim {} labeled {al}/{vl}", e.index));
            }
            min_purity = min_purity.min(e.label.audio_purity).min(e.label.visual_purity);
        }
        let ap = brute_force_purity(&audio, e.index, rep.k, al);
        let vp = brute_force_purity(&visual, e.index, rep.k, vl);
        if ap != e.label.audio_purity || vp != e.label.visual_purity || (ap * vp).sqrt() != e.label.combined {
            failures.push(format!("dim {} purity arithmetic", e.index));
        }
    }
    // The library's own purity on an arbitrary subset, against a count.
    let top: Vec<usize> = (0..audio.len()).step_by(7).collect();
    let label = concept_name(3);
    let count = top.iter().filter(|&&i| audio.labels[i].contains(&label)).count();
    if purity(&top, &audio.labels, &label) != count as f64 / top.len() as f64 {
        failures.push("purity on subset".into());
    }
    if min_purity < 0.9 {
        failures.push(format!("min planted purity {min_purity}"));
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("min planted purity {min_purity:.3}, next best combined {:.3}", rep.dimensions[planted].label.combined)
    } else {
        failures.join("; ")
    };
    report(6, "concept discovery", pass, t.elapsed(), &detail);
    assert!(pass);
}

// Criterion 7

/// Centers (Hz) of the 40-band filterbank over 0..8 kHz from the independent
/// fixture generator.
const BAND_CENTERS_HZ: [f64; 40] = [
    44.374077, 91.561095, 141.739371, 195.098525, 251.840197, 312.178812, 376.342384, 444.573384, 517.129652,
    594.285373, 676.332114, 763.579924, 856.358508, 955.018468, 1059.932635, 1171.497473, 1290.134577, 1416.29227,
    1550.447293, 1693.106609, 1844.809319, 2006.128697, 2177.674359, 2360.094564, 2554.078667, 2760.35972,
    2979.717247, 3212.980185, 3461.030019, 3724.804114, 4005.299255, 4303.575414, 4620.759758, 4958.050905,
    5316.723458, 5698.132815, 6103.720298, 6535.018596, 6993.657556, 7481.370346,
];

#[test]
fn criterion_7_signal_frontend() {
    let t = Instant::now();
    let mut failures = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let len = rng.gen_range(0..20000);
        let window = rng.gen_range(1..1000);
        let hop = rng.gen_range(1..500);
        let brute = (0..).take_while(|f| f * hop + window <= len).count();
        if frame_count(len, window, hop) != (brute > 0).then_some(brute) {
            failures.push(format!("frame_count({len}, {window}, {hop})"));
        }
    }

    let config = SpectrogramConfig::default();
    let silence = log_mel_spectrogram(&AudioWaveform::new(vec![0.0; 8000], 16000).unwrap(), &config).unwrap();
    let floor = config.log_floor.ln();
    if !silence.frames.iter().all(|&v| v == floor) {
        failures.push("silence is not the uniform log floor".into());
    }

    let expected = (0..40)
        .min_by(|&a, &b| (BAND_CENTERS_HZ[a] - 1000.0).abs().total_cmp(&(BAND_CENTERS_HZ[b] - 1000.0).abs()))
        .unwrap();
    let tone: Vec<f64> = (0..16000)
        .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
        .collect();
    let spec = log_mel_spectrogram(&AudioWaveform::new(tone, 16000).unwrap(), &config).unwrap();
    for row in spec.frames.rows() {
        let peak = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        if peak != expected {
            failures.push(format!("1 kHz peak in band {peak}, expected {expected}"));
            break;
        }
    }

    if !(config.sample_rate_hz == 16000
        && config.window_ms == 25.0
        && config.hop_ms == 10.0
        && config.num_mel_bands == 40
        && config.window_kind == WindowKind::Hamming)
    {
        failures.push(format!("defaults {config:?}"));
    }
    let pass = failures.is_empty();
    let detail = if pass { format!("1 kHz -> band {expected}") } else { failures.join("; ") };
    report(7, "signal frontend", pass, t.elapsed(), &detail);
    assert!(pass);
}

// Criterion 8

#[test]
fn criterion_8_determinism_and_persistence() {
    let t = Instant::now();
    let mut failures: Vec<String> = Vec::new();
    let mut spec = SyntheticSpec::retrieval_benchmark();
    spec.num_concepts = 4;
    spec.clips_per_concept = 8;
    for d in spec.dims.values_mut() {
        *d = 8;
    }
    let data = generate_paired_dataset(&spec).unwrap();
    let mut cfg = benchmark_train_config(&spec);
    cfg.epochs = 3;
    cfg.sampler.videos_per_batch = 4;

    let first = train(&cfg, &data.dataset).unwrap().checkpoint;
    let second = train(&cfg, &data.dataset).unwrap().checkpoint;
    let bytes = first.to_bytes().unwrap();
    if bytes != second.to_bytes().unwrap() {
        failures.push("identical seeds gave different checkpoints".into());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.mmck");
    first.save(&path).unwrap();
    match Checkpoint::load(&path) {
        Ok(back) if back == first && back.to_bytes().unwrap() == bytes => {}
        _ => failures.push("checkpoint round trip is lossy".into()),
    }

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"JUNK");
    if !matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })) {
        failures.push("bad magic not detected".into());
    }
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 7).to_le_bytes());
    if !matches!(Checkpoint::from_bytes(&bad), Err(Error::VersionMismatch { .. })) {
        failures.push("version mismatch not detected".into());
    }
    if !matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::TruncatedFile(_))) {
        failures.push("truncation not detected".into());
    }

    let seq = FeatureSequence::uniform(Modality::Audio, Array2::ones((3, 2)), 10);
    let fbytes = seq.to_bytes();
    if FeatureSequence::from_bytes(&fbytes).unwrap() != seq {
        failures.push("feature file round trip".into());
    }
    if !matches!(FeatureSequence::from_bytes(&fbytes[..fbytes.len() - 1]), Err(Error::TruncatedFile(_))) {
        failures.push("truncated feature file not detected".into());
    }

    let pass = failures.is_empty();
    let detail = if pass { format!("{} checkpoint bytes", bytes.len()) } else { failures.join("; ") };
    report(8, "determinism & persistence", pass, t.elapsed(), &detail);
    assert!(pass);
}
