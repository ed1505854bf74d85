use super::*;
use crate::augment::texture::WeaveTexture;
use crate::rng::substream;

fn textures(n: usize, size: usize, seed: u64) -> Vec<ImageBuffer> {
    let mut rng = substream(seed, "model-test");
    (0..n)
        .map(|_| WeaveTexture::default().render(size, &mut rng))
        .collect()
}

fn refs(images: &[ImageBuffer]) -> Vec<&ImageBuffer> {
    images.iter().collect()
}

#[test]
fn tiny_forward_shape() {
    let model = Model::<f32>::build(BackboneConfig::tiny_cnn(64, 128), 3, 0).unwrap();
    let images = textures(4, 64, 1);
    let logits = model.forward(&refs(&images)).unwrap();
    assert_eq!((logits.rows, logits.cols), (4, 3));
    assert!(logits.data.iter().all(|v| v.is_finite()));
    let emb = model.embed(&refs(&images)).unwrap();
    assert_eq!((emb.rows, emb.cols), (4, 128));
}

#[test]
fn same_seed_same_parameters() {
    let cfg = BackboneConfig::tiny_cnn(32, 16);
    let a = Model::<f32>::build(cfg.clone(), 2, 9).unwrap();
    let b = Model::<f32>::build(cfg.clone(), 2, 9).unwrap();
    let c = Model::<f32>::build(cfg, 2, 10).unwrap();
    assert_eq!(a.param_hash(), b.param_hash());
    assert_ne!(a.param_hash(), c.param_hash());
}

#[test]
fn resnet_embedding_is_512_wide() {
    let model = Model::<f32>::build(BackboneConfig::resnet18_like(256), 2, 0).unwrap();
    let images = textures(1, 256, 2);
    let emb = model.embed(&refs(&images)).unwrap();
    assert_eq!(emb.cols, 512);
    assert!(emb.data.iter().all(|v| v.is_finite()));
}

#[test]
fn config_validation() {
    assert!(BackboneConfig::tiny_cnn(64, 4).validate().is_err());
    assert!(BackboneConfig::resnet18_like(100).validate().is_err());
    assert!(BackboneConfig::resnet18_like(1024).validate().is_err());
    assert!(Model::<f32>::build(BackboneConfig::tiny_cnn(64, 16), 1, 0).is_err());
}

#[test]
fn embedding_ignores_batch_composition() {
    let mut model = Model::<f32>::build(BackboneConfig::tiny_cnn(32, 32), 2, 3).unwrap();
    let images = textures(6, 32, 4);
    // move running statistics away from their initial values
    for _ in 0..3 {
        model.loss(&refs(&images), &[0, 1, 0, 1, 0, 1]).unwrap();
    }
    let all = model.embed(&refs(&images)).unwrap();
    for (i, img) in images.iter().enumerate() {
        let alone = model.embed(&[img]).unwrap();
        for (a, b) in alone.data.iter().zip(all.row(i)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
    let again = model.embed(&refs(&images)).unwrap();
    assert_eq!(all, again);
}

#[test]
fn mismatched_batch_is_rejected() {
    let model = Model::<f32>::build(BackboneConfig::tiny_cnn(32, 16), 2, 0).unwrap();
    let a = textures(1, 32, 5);
    let b = textures(1, 16, 5);
    assert!(matches!(
        model.embed(&[&a[0], &b[0]]),
        Err(Error::Argument(_))
    ));
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut model = Model::<f64>::build(BackboneConfig::tiny_cnn(16, 8), 2, 5).unwrap();
    let images = textures(4, 16, 6);
    let labels = [0, 1, 0, 1];
    let mut rng = substream(0, "gradcheck");
    let report = check_gradients(&mut model, &refs(&images), &labels, 1e-6, 24, &mut rng).unwrap();
    assert_eq!(report.len(), model.params().len());
    for t in report {
        assert!(t.relative_error < 1e-4, "{t:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = Model::<f32>::build(BackboneConfig::tiny_cnn(32, 16), 3, 1).unwrap();
    let images = textures(3, 32, 7);
    model.loss(&refs(&images), &[0, 1, 2]).unwrap();
    let rng = substream(1, "x");
    let state = crate::rng::RngState::capture(&rng);
    save_checkpoint(
        &path,
        &model,
        42,
        Some(state.clone()),
        serde_json::json!({"k": 1}),
    )
    .unwrap();
    let (loaded, header) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(header.step, 42);
    assert_eq!(header.rng, Some(state));
    assert_eq!(loaded.param_hash(), model.param_hash());
    assert_eq!(
        loaded.forward(&refs(&images)).unwrap(),
        model.forward(&refs(&images)).unwrap()
    );
}

#[test]
fn pretrained_backbone_is_loaded_and_shape_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    let source = Model::<f32>::build(BackboneConfig::tiny_cnn(32, 16), 2, 11).unwrap();
    save_checkpoint(&path, &source, 0, None, serde_json::Value::Null).unwrap();

    let mut cfg = BackboneConfig::tiny_cnn(32, 16);
    cfg.pretrained_weights = Some(path.clone());
    let target = Model::<f32>::build(cfg, 3, 99).unwrap();
    assert_eq!(target.backbone_hash(), source.backbone_hash());
    assert_eq!(target.norm_stats_hash(), source.norm_stats_hash());

    let mut wrong = BackboneConfig::tiny_cnn(32, 24);
    wrong.pretrained_weights = Some(path);
    assert!(matches!(
        Model::<f32>::build(wrong, 2, 0),
        Err(Error::Load(_))
    ));
}

#[test]
fn corrupt_checkpoint_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"nonsense").unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Load(_))));
}

#[test]
fn frozen_backbone_gets_no_gradient() {
    let mut model = Model::<f32>::build(BackboneConfig::tiny_cnn(16, 8), 2, 2).unwrap();
    model.freeze_backbone(true);
    let images = textures(2, 16, 8);
    model.compute_gradients(&refs(&images), &[0, 1]).unwrap();
    assert!(model
        .backbone_params()
        .iter()
        .all(|p| p.frozen && p.grad.iter().all(|&g| g == 0.0)));
    let before = model.norm_stats_hash();
    model.loss(&refs(&images), &[0, 1]).unwrap();
    assert_eq!(before, model.norm_stats_hash());
}
