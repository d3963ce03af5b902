mod common;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dahar::blocks::{Model, ModelConfig};
use dahar::data::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, load_dataset, save_dataset, SceneSpec};
use dahar::harness::{report_text, AblationCell, AblationTable, EvalMode, TrainConfig};
use dahar::losses::AttributeLabels;
use dahar::metrics::{metrics_report, Protocol, ScoreMatrix};
use dahar::tensor::Tensor;

fn golden(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Four samples, two attributes; hand-computed values are in the goldens.
fn golden_matrix() -> ScoreMatrix {
    let labels: Vec<AttributeLabels> = ["10", "01", "1u", "00"].iter().map(|s| s.parse().unwrap()).collect();
    ScoreMatrix::new(vec![0.9, 0.2, 0.8, 0.7, 0.3, 0.6, 0.1, 0.4], labels).unwrap()
}

#[test]
fn wider_report_matches_golden() {
    let r = metrics_report(&golden_matrix(), Protocol::Wider).unwrap();
    assert!((r.map - 11.0 / 12.0).abs() < 1e-12);
    assert_eq!(report_text(&r, EvalMode::Crops), golden("report_wider.txt"));
}

#[test]
fn rap_report_matches_golden() {
    let r = metrics_report(&golden_matrix(), Protocol::Rap).unwrap();
    assert_eq!(r.mean_accuracy.as_ref().unwrap().ma, 0.75);
    let inst = r.instance.unwrap();
    assert_eq!((inst.accuracy, inst.precision, inst.recall), (0.625, 0.625, 0.75));
    assert_eq!(report_text(&r, EvalMode::Full), golden("report_rap.txt"));
}

#[test]
fn ablation_csv_matches_golden() {
    let mut t = AblationTable {
        seeds: vec![1, 2, 3],
        rows: vec![0, 4],
        cells: Vec::new(),
    };
    for (row, base) in [(0, 0.60), (4, 0.65)] {
        for (k, seed) in [1u64, 2, 3].into_iter().enumerate() {
            for (mode, shift) in [(EvalMode::Crops, 0.0), (EvalMode::Full, -0.01)] {
                t.cells.push(AblationCell {
                    row,
                    seed,
                    mode,
                    map: base + shift + 0.01 * k as f64,
                    checkpoint_sha256: String::new(),
                });
            }
        }
    }
    assert_eq!(t.to_csv(), golden("ablation.csv"));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut model = Model::<f32>::build_seeded(&ModelConfig::toy(8), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in model.store_mut().params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-1.0f32..1.0);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = Model::<f32>::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.store(), model.store());
    assert_eq!(back.to_checkpoint_bytes(), fs::read(&path).unwrap());
}

#[test]
fn checkpoint_loads_into_other_precision() {
    let model = Model::<f32>::build_seeded(&common::small_model_config(3), 2).unwrap();
    let wide = Model::<f64>::from_checkpoint_bytes(Path::new("mem"), &model.to_checkpoint_bytes()).unwrap();
    for (a, b) in model.store().params().iter().zip(wide.store().params()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(&x, &y)| x as f64 == y));
    }
}

#[test]
fn corrupt_checkpoints_report_offsets() {
    let bytes = Model::<f32>::build_seeded(&common::small_model_config(3), 2).unwrap().to_checkpoint_bytes();
    let cut = Model::<f32>::from_checkpoint_bytes(Path::new("cut.ckpt"), &bytes[..bytes.len() - 3]).unwrap_err();
    assert!(cut.to_string().contains("cut.ckpt"), "{cut}");
    assert!(cut.to_string().contains("byte"), "{cut}");
    let mut extra = bytes.clone();
    extra.push(0);
    let err = Model::<f32>::from_checkpoint_bytes(Path::new("x.ckpt"), &extra).unwrap_err();
    assert!(err.to_string().contains("trailing"), "{err}");
    let err = Model::<f32>::from_checkpoint_bytes(Path::new("x.ckpt"), b"NOTADAHARFILE").unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
}

#[test]
fn dataset_round_trip_is_bitwise() {
    let ds = common::tiny_dataset(6, 3);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.attributes, ds.attributes);
    assert_eq!((back.height, back.width), (ds.height, ds.width));
    assert_eq!(back.spec, ds.spec);
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.seed, b.seed);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.image), bits(&b.image));
        assert_eq!(bits(&a.mask), bits(&b.mask));
    }
    // Saving what was loaded reproduces every file byte for byte.
    let again = tempfile::tempdir().unwrap();
    save_dataset(&back, again.path()).unwrap();
    for name in ["meta.txt", "index.csv", "images/000003.ppm", "masks/000005.pgm"] {
        assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(again.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn pnm_codecs_round_trip_and_reject_damage() {
    let img = Tensor::from_fn(&[3, 4, 5], |i| (i * 37 % 256) as f32 / 255.0);
    let bytes = encode_ppm(&img);
    assert_eq!(decode_ppm(Path::new("a.ppm"), &bytes).unwrap(), img);
    let err = decode_ppm(Path::new("a.ppm"), &bytes[..bytes.len() - 1]).unwrap_err().to_string();
    assert!(err.contains("a.ppm"), "{err}");
    let mask = Tensor::from_fn(&[1, 3, 2], |i| (i % 2) as f32);
    assert_eq!(decode_pgm(Path::new("m.pgm"), &encode_pgm(&mask)).unwrap(), mask);
    let err = decode_pgm(Path::new("m.pgm"), b"P5\n2 1\n65535\n\0\0\0\0").unwrap_err().to_string();
    assert!(err.contains("maxval"), "{err}");
}

#[test]
fn config_texts_round_trip() {
    let mut cfg = TrainConfig::toy(8);
    cfg.lr = 0.02;
    cfg.lr_milestones = Some(vec![3, 7]);
    cfg.loss.ignore_unknown = false;
    cfg.model.self_mask_stages = [0, 2].into_iter().collect();
    assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    let spec = SceneSpec::tall(5);
    assert_eq!(SceneSpec::from_text(&spec.to_text()).unwrap(), spec);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = TrainConfig::from_text("learning_rate=0.1\n").unwrap_err().to_string();
    assert!(err.contains("learning_rate"), "{err}");
}
