mod common;

use common::fixtures::tiny_config;
use fec::backbone::{build_model, patchify, ModelConfig};
use fec::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint_for, save_checkpoint};
use fec::cluster::{DispatchVariant, SimilarityKind};
use fec::error::FecError;
use fec::hierarchy::LayerRole;
use fec::tensor::Tensor;

fn image(seed: usize) -> Vec<f32> {
    (0..3 * 16 * 16).map(|i| (((i * 7919 + seed * 104729) % 1000) as f32 / 500.0) - 1.0).collect()
}

#[test]
fn records_cover_every_layer() {
    let cfg = tiny_config();
    let model = build_model::<f32>(&cfg).unwrap();
    let images = Tensor::new(vec![1, 3, 16, 16], image(0)).unwrap();
    let (_, records) = model.predict(&images, true).unwrap();
    let records = records.unwrap().remove(0);
    let depths: usize = cfg.stage_depths.iter().sum();
    assert_eq!(records.len(), depths + 3);
    assert_eq!(records.iter().filter(|r| r.role == LayerRole::Pool).count(), 3);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.layer_id, i);
        r.validate().unwrap();
    }
}

#[test]
fn batch_members_do_not_interact() {
    let model = build_model::<f32>(&tiny_config()).unwrap();
    let (a, b) = (image(1), image(2));
    let both = Tensor::new(vec![2, 3, 16, 16], [a.clone(), b].concat()).unwrap();
    let alone = Tensor::new(vec![1, 3, 16, 16], a).unwrap();
    let (logits2, rec2) = model.predict(&both, true).unwrap();
    let (logits1, rec1) = model.predict(&alone, true).unwrap();
    for (x, y) in logits1.data().iter().zip(&logits2.data()[..2]) {
        assert!((x - y).abs() < 1e-5);
    }
    let (r1, r2) = (&rec1.unwrap()[0], &rec2.unwrap()[0]);
    for (x, y) in r1.iter().zip(r2) {
        assert_eq!(x.assignment, y.assignment);
    }
}

#[test]
fn identical_images_give_identical_outputs() {
    let model = build_model::<f64>(&tiny_config()).unwrap();
    let img: Vec<f64> = image(3).into_iter().map(f64::from).collect();
    let images = Tensor::new(vec![2, 3, 16, 16], [img.clone(), img].concat()).unwrap();
    let (logits, records) = model.predict(&images, true).unwrap();
    assert_eq!(logits.row(0), logits.row(1));
    let records = records.unwrap();
    assert_eq!(records[0], records[1]);
}

#[test]
fn zero_head_gives_equal_logits_across_images() {
    let mut model = build_model::<f32>(&tiny_config()).unwrap();
    for v in model.params.value_mut(model.head_weight).data_mut() {
        *v = 0.0;
    }
    let images = Tensor::new(vec![2, 3, 16, 16], [image(4), image(5)].concat()).unwrap();
    let (logits, _) = model.predict(&images, false).unwrap();
    assert_eq!(logits.row(0), logits.row(1));
}

#[test]
fn every_variant_builds_and_runs() {
    for similarity in [SimilarityKind::Cosine, SimilarityKind::DotProduct, SimilarityKind::Euclidean] {
        for dispatch_variant in [DispatchVariant::Eq7, DispatchVariant::S1Dense] {
            for mlp_depth in [1, 2] {
                let cfg = ModelConfig { similarity, dispatch_variant, mlp_depth, ffn_ratio: 2, ..tiny_config() };
                let model = build_model::<f32>(&cfg).unwrap();
                let (logits, _) = model.predict(&Tensor::new(vec![1, 3, 16, 16], image(6)).unwrap(), false).unwrap();
                assert_eq!(logits.shape(), &[1, 2]);
                assert!(!logits.has_nan());
            }
        }
    }
}

#[test]
fn patchify_matches_direct_indexing() {
    let (b, c, h, w, s) = (2, 3, 4, 6, 2);
    let data: Vec<f64> = (0..b * c * h * w).map(|i| i as f64).collect();
    let images = Tensor::new(vec![b, c, h, w], data).unwrap();
    let p = patchify(&images, s).unwrap();
    assert_eq!(p.shape(), &[b * (h / s) * (w / s), c * s * s]);
    let (gh, gw) = (h / s, w / s);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = p.row(bi * gh * gw + gy * gw + gx);
                let mut expected = Vec::new();
                for ci in 0..c {
                    for dy in 0..s {
                        for dx in 0..s {
                            expected.push(images.at(&[bi, ci, gy * s + dy, gx * s + dx]));
                        }
                    }
                }
                assert_eq!(row, expected.as_slice());
            }
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = ModelConfig { input_size: [15, 16], ..tiny_config() };
    assert!(matches!(build_model::<f32>(&bad), Err(FecError::Config(_))));
    let zero = ModelConfig { num_classes: 0, ..tiny_config() };
    assert!(build_model::<f32>(&zero).is_err());
}

#[test]
fn same_seed_same_weights() {
    let a = build_model::<f32>(&tiny_config()).unwrap();
    let b = build_model::<f32>(&tiny_config()).unwrap();
    let c = build_model::<f32>(&ModelConfig { seed: 9, ..tiny_config() }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params, c.params);
}

/// CRC-32 of the FEC-Micro checkpoint with seed 0. Changes to initialization,
/// parameter order or the file layout move this value.
const MICRO_CHECKPOINT_CRC: u32 = 0x2144DF1C;

#[test]
fn micro_checkpoint_is_stable() {
    let bytes = encode_checkpoint(&build_model::<f32>(&ModelConfig::micro()).unwrap()).unwrap();
    assert_eq!(&bytes[..4], b"FECW");
    assert_eq!(crc32fast::hash(&bytes), MICRO_CHECKPOINT_CRC);
}

#[test]
fn checkpoint_damage_is_reported() {
    let model = build_model::<f32>(&tiny_config()).unwrap();
    let bytes = encode_checkpoint(&model).unwrap();
    for pos in [0, 5, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(FecError::CorruptCheckpoint(_))), "byte {pos}");
    }
    assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 9]), Err(FecError::CorruptCheckpoint(_))));
}

#[test]
fn checkpoint_config_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fecw");
    let model = build_model::<f32>(&tiny_config()).unwrap();
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(load_checkpoint_for::<f32>(&path, &tiny_config()).unwrap(), model);
    let other = ModelConfig { num_classes: 3, ..tiny_config() };
    assert!(matches!(load_checkpoint_for::<f32>(&path, &other), Err(FecError::Config(_))));
}
