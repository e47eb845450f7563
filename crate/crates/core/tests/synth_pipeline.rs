mod common;

use proptest::prelude::*;
use rand::Rng;
use sintermon::pipeline::*;
use sintermon::synth::*;
use sintermon::Error;

fn small_params(seed: u64) -> ProcessParams {
    ProcessParams {
        lines_per_layer: 24,
        frames_per_line: 3,
        frame_height: 16,
        frame_width: 16,
        seed,
        ..ProcessParams::default()
    }
}

fn request(overwrite: bool) -> DatasetRequest {
    let params = small_params(1);
    DatasetRequest {
        pattern: FaultPattern::evenly_spaced(params.lines_per_layer, 3),
        params,
        train_layers: 5,
        deviations: vec![13.0, 11.0, 9.0, 5.0, 3.0],
        overwrite,
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(dir.path(), &request(false)).unwrap();
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 11);
    assert_eq!(manifest.layers_with_role(LayerRole::Train).count(), 5);
    let deviations: Vec<f64> = manifest
        .layers_with_role(LayerRole::Test)
        .map(|l| l.power_deviation.unwrap())
        .collect();
    assert_eq!(deviations, vec![13.0, 11.0, 9.0, 5.0, 3.0]);
    assert_eq!(load_manifest(dir.path()).unwrap(), manifest);

    let p = small_params(1);
    for entry in &manifest.layers {
        let loaded = load_layer(dir.path(), entry.id).unwrap();
        let power = entry.power_deviation.map(|d| (p.nominal_power as f64 - d / 100.0) as f32);
        let schedule = FaultSchedule {
            entries: power.map(|pw| request(false).pattern.schedule(entry.id, pw)).unwrap_or_default(),
        };
        let direct = generate_layer(&p, &schedule, entry.id).unwrap();
        assert_eq!(loaded.frames, direct.frames);
        assert_eq!(loaded.labels, direct.labels);
        assert_eq!(entry.fault_lines.is_empty(), entry.role == LayerRole::Train);
    }
}

#[test]
fn existing_output_needs_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &request(false)).unwrap();
    assert!(matches!(generate_dataset(dir.path(), &request(false)), Err(Error::OutputExists(_))));
    generate_dataset(dir.path(), &request(true)).unwrap();
}

#[test]
fn damaged_layers_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &request(false)).unwrap();
    let path = dir.path().join(layer_file_name(2));
    let good = std::fs::read(&path).unwrap();

    std::fs::write(&path, &good[..good.len() - 4]).unwrap();
    assert!(matches!(load_layer(dir.path(), 2), Err(Error::Shape(_))));

    let mut flipped = good.clone();
    flipped[17] ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_layer(dir.path(), 2), Err(Error::Checksum(_))));

    std::fs::write(&path, &good).unwrap();
    assert!(load_layer(dir.path(), 2).is_ok());
    assert!(matches!(load_layer(dir.path(), 99), Err(Error::NotFound(_))));
}

#[test]
fn manifest_validation() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &request(false)).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(DatasetManifest::from_json_slice(text.as_bytes()).is_ok());
    let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
    assert!(matches!(DatasetManifest::from_json_slice(bumped.as_bytes()), Err(Error::Version { .. })));
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["layers"][1]["id"] = serde_json::json!(0);
    assert!(matches!(
        DatasetManifest::from_json_slice(v.to_string().as_bytes()),
        Err(Error::Format(_))
    ));
    assert!(DatasetManifest::from_json_slice(b"{").is_err());
}

#[test]
fn fault_lines_are_colder_than_nominal_across_seeds() {
    // lower laser power on a line lowers its mean frame temperature
    for seed in 0..10 {
        let p = small_params(seed);
        let nominal = generate_layer(&p, &FaultSchedule::default(), 7).unwrap();
        let schedule = FaultSchedule {
            entries: vec![FaultEntry {
                layer_id: 7,
                start_line: 10,
                duration_lines: 2,
                off_nominal_power: p.nominal_power - 0.13,
            }],
        };
        let faulty = generate_layer(&p, &schedule, 7).unwrap();
        let line_mean = |l: &LayerSequence, i: usize| -> f64 {
            let f = l.frame_len() * l.frames_per_line;
            l.frames[i * f..(i + 1) * f].iter().map(|&v| v as f64).sum::<f64>() / f as f64
        };
        for i in 10..12 {
            assert!(line_mean(&faulty, i) < line_mean(&nominal, i) - 1.0, "seed {seed} line {i}");
        }
        for i in 0..10 {
            assert_eq!(line_mean(&faulty, i), line_mean(&nominal, i));
        }
    }
}

#[test]
fn downsample_matches_nested_loops() {
    let mut rng = common::rng(1);
    let (h, w) = (10, 6);
    let frame: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let got = downsample(&frame, h, w).unwrap();
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let mut s = 0.0f32;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += frame[(2 * y + dy) * w + 2 * x + dx];
                }
            }
            assert!((got[y * w / 2 + x] - s / 4.0).abs() < 1e-6);
        }
    }
    assert!(matches!(downsample(&frame, 5, 12), Err(Error::Shape(_))));
}

#[test]
fn augmentation_noise_has_requested_spread() {
    let spec = NormalizationSpec {
        data_min: 170.0,
        data_max: 270.0,
    };
    let layer = LayerSequence {
        layer_id: 0,
        column_id: 0,
        lines: 2,
        frames_per_line: 1,
        height: 250,
        width: 200,
        frames: vec![0.5; 2 * 250 * 200],
        labels: Default::default(),
    };
    let snippets = make_snippets(&layer, 1, 1).unwrap();
    let config = AugmentConfig {
        noise_sigma_c: 1.0,
        bias_range_c: 0.0,
        copies: 1,
    };
    let out = augment(&snippets, &config, &spec, &mut common::rng(9));
    assert_eq!(out.len(), 2);
    assert_eq!(out[0], snippets[0]);
    let d: Vec<f64> = out[1].target().iter().map(|&v| v as f64 - 0.5).collect();
    assert_eq!(d.len(), 100_000);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    let want = spec.delta(1.0) as f64;
    assert!((sd - want).abs() < 0.05 * want, "{sd} vs {want}");
}

#[test]
fn bias_shifts_whole_snippet() {
    let spec = NormalizationSpec {
        data_min: 0.0,
        data_max: 10.0,
    };
    let layer = LayerSequence {
        layer_id: 0,
        column_id: 0,
        lines: 3,
        frames_per_line: 2,
        height: 2,
        width: 2,
        frames: (0..24).map(|i| i as f32 / 24.0).collect(),
        labels: Default::default(),
    };
    let snippets = make_snippets(&layer, 2, 1).unwrap();
    let config = AugmentConfig {
        noise_sigma_c: 0.0,
        bias_range_c: 1.8,
        copies: 3,
    };
    let out = augment(&snippets, &config, &spec, &mut common::rng(2));
    assert_eq!(out.len(), 4 * snippets.len());
    for (k, copy) in out[snippets.len()..].iter().enumerate() {
        let orig = &snippets[k % snippets.len()];
        let shifts: Vec<f32> = copy.target().iter().zip(orig.target()).map(|(a, b)| a - b).collect();
        assert!(shifts.iter().all(|s| (s - shifts[0]).abs() < 1e-6));
        assert!(shifts[0].abs() <= 0.18 + 1e-6);
    }
}

proptest! {
    #[test]
    fn snippets_cover_every_window_once(lines in 2usize..30, fpl in 1usize..5, p in 1usize..4, q in 0usize..4) {
        prop_assume!(lines >= p + q);
        let origins = snippet_origins(3, lines, fpl, p, q).unwrap();
        prop_assert_eq!(origins.len(), fpl * (lines - p - q + 1));
        let unique: std::collections::BTreeSet<_> = origins.iter().map(|o| (o.start_line, o.frame_index)).collect();
        prop_assert_eq!(unique.len(), origins.len());
        prop_assert!(origins.iter().all(|o| o.start_line + p + q <= lines && o.frame_index < fpl));
    }

    #[test]
    fn normalize_and_downsample_commute(vals in prop::collection::vec(150.0f32..400.0, 16), lo in 100.0f32..150.0, span in 10.0f32..500.0) {
        let spec = NormalizationSpec { data_min: lo, data_max: lo + span };
        let a = downsample(&vals.iter().map(|&v| spec.apply(v)).collect::<Vec<_>>(), 4, 4).unwrap();
        let b: Vec<f32> = downsample(&vals, 4, 4).unwrap().into_iter().map(|v| spec.apply(v)).collect();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }
}
