use mmembed::features::Modality;
use mmembed::sampler::{Dataset, Manifest};
use mmembed::synthetic::{generate_paired_dataset, oracle_pairing_check, SyntheticSpec};

fn spec(sigma: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        noise_sigma: sigma,
        seed,
        ..SyntheticSpec::default()
    }
}

fn read_tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_writes_identical_files() {
    let mut s = spec(0.1, 9);
    s.num_concepts = 3;
    s.clips_per_concept = 4;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_paired_dataset(&s).unwrap().write_to(a.path()).unwrap();
    generate_paired_dataset(&s).unwrap().write_to(b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 3 * 4 * 4 + 1);
    assert_eq!(ta, tb);
}

#[test]
fn written_dataset_loads_back_equal() {
    let mut s = spec(0.1, 2);
    s.num_concepts = 2;
    s.clips_per_concept = 3;
    let data = generate_paired_dataset(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = data.write_to(dir.path()).unwrap();
    let loaded = Dataset::load(&Manifest::load(&path).unwrap()).unwrap();
    assert_eq!(loaded.len(), data.dataset.len());
    for (x, y) in loaded.videos.iter().zip(&data.dataset.videos) {
        assert_eq!(x.streams, y.streams);
    }
}

#[test]
fn zero_noise_clips_share_features() {
    let mut s = spec(0.0, 1);
    s.num_concepts = 4;
    s.clips_per_concept = 3;
    let data = generate_paired_dataset(&s).unwrap();
    for (i, v) in data.dataset.videos.iter().enumerate() {
        for (j, w) in data.dataset.videos.iter().enumerate() {
            if data.concepts[i] == data.concepts[j] {
                assert_eq!(v.streams, w.streams);
            }
        }
    }
    // Margin reduces to prototype self-similarity minus cross-prototype similarity.
    let p = &data.prototypes[&Modality::Audio];
    let c = p.nrows();
    let g = p.dot(&p.t());
    let self_sim = (0..c).map(|k| g[[k, k]]).sum::<f64>() / c as f64;
    let mut cross = 0.0;
    for a in 0..c {
        for b in 0..c {
            if a != b {
                cross += g[[a, b]];
            }
        }
    }
    let want = self_sim - cross / (c * (c - 1)) as f64;
    let got = oracle_pairing_check(&data.dataset, Modality::Audio).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn sixteen_concept_margin_is_positive() {
    let data = generate_paired_dataset(&spec(0.1, 0)).unwrap();
    for &m in data.spec.dims.keys() {
        assert!(oracle_pairing_check(&data.dataset, m).unwrap() > 0.0);
    }
}

#[test]
fn single_clip_concepts_use_self_similarity() {
    let mut s = spec(0.0, 4);
    s.clips_per_concept = 1;
    s.held_out_fraction = 0.0;
    let data = generate_paired_dataset(&s).unwrap();
    assert!(oracle_pairing_check(&data.dataset, Modality::Text).unwrap() > 0.5);
}

#[test]
fn margin_shrinks_with_noise_on_average() {
    let sigmas = [0.0, 0.5, 1.0, 2.0];
    let mut mean = vec![0.0; sigmas.len()];
    for seed in 0..8 {
        for (k, &sigma) in sigmas.iter().enumerate() {
            let mut s = spec(sigma, seed);
            s.num_concepts = 4;
            s.clips_per_concept = 4;
            s.duration_s = 2.0;
            let data = generate_paired_dataset(&s).unwrap();
            mean[k] += oracle_pairing_check(&data.dataset, Modality::Visual2D).unwrap() / 8.0;
        }
    }
    assert!(mean.windows(2).all(|w| w[1] <= w[0] + 1e-3), "{mean:?}");
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(generate_paired_dataset(&SyntheticSpec { num_concepts: 1, ..SyntheticSpec::default() }).is_err());
    assert!(generate_paired_dataset(&SyntheticSpec { noise_sigma: -1.0, ..SyntheticSpec::default() }).is_err());
}
