use candle_core::{DType, Device};
use partdiscover_core::encoder::BackboneRegistry;
use partdiscover_core::pipeline::infer::{discover_parts, reconstruct, swap_reconstruct};
use partdiscover_core::pipeline::{load_checkpoint, load_model, save_checkpoint, Trainer};
use partdiscover_core::types::Image;
use partdiscover_core::{Error, RunConfig};

fn tiny(extra: &[&str]) -> RunConfig {
    let mut o = vec![
        "model.image_size=[16,16]",
        "model.k_parts=3",
        "model.precision=f64",
        "model.encoder.out_channels=6",
        "model.encoder.stage_channels=[4,4,6,6]",
        r#"model.partformer={"layers":1,"heads":2,"hidden":8,"mlp_dim":8,"patch":4}"#,
        "model.decoder.widths=[6,4,4,4,4]",
        "train.batch_size=2",
        "data.synthetic=null",
    ];
    o.extend_from_slice(extra);
    RunConfig::desk().with_overrides(&o).unwrap()
}

fn registry() -> BackboneRegistry {
    BackboneRegistry::with_builtins(DType::F64, Device::Cpu).unwrap()
}

/// Blob images whose center and tint depend on `i`.
fn images(n: usize) -> Vec<Image> {
    (0..n)
        .map(|i| {
            let (cy, cx) = (5.0 + (i % 3) as f32 * 2.0, 6.0 + (i % 4) as f32);
            Image::from_fn(16, 16, |r, c| {
                let d = ((r as f32 - cy).powi(2) + (c as f32 - cx).powi(2)).sqrt();
                if d < 3.0 {
                    [0.9, 0.2 + 0.1 * (i % 3) as f32, 0.1]
                } else if c as f32 > cx + 3.0 && (r as f32 - cy).abs() < 1.5 {
                    [0.1, 0.3, 0.9]
                } else {
                    [0.4, 0.45 + 0.02 * (r % 3) as f32, 0.4]
                }
            })
        })
        .collect()
}

fn trace(tr: &mut Trainer, imgs: &[Image], until: u64) -> Vec<f64> {
    let mut out = Vec::new();
    let classes = vec![0; imgs.len()];
    tr.fit(imgs, &classes, until, |_, r| {
        out.push(r.loss.total);
        Ok(true)
    })
    .unwrap();
    out
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let imgs = images(6);
    let mut reg = registry();
    let mut straight = Trainer::new(tiny(&[]), &mut reg).unwrap();
    let full = trace(&mut straight, &imgs, 4);

    let mut first = Trainer::new(tiny(&[]), &mut reg).unwrap();
    let mut resumed = trace(&mut first, &imgs, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.pdck");
    save_checkpoint(&first, &path).unwrap();
    let mut second = load_checkpoint(&path, &mut reg).unwrap();
    assert_eq!(second.step(), 2);
    resumed.extend(trace(&mut second, &imgs, 4));

    assert_eq!(full, resumed);
    assert_eq!(straight.model().checksums().unwrap(), second.model().checksums().unwrap());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let imgs = images(4);
    let mut reg = registry();
    let mut tr = Trainer::new(tiny(&[]), &mut reg).unwrap();
    trace(&mut tr, &imgs, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.pdck");
    save_checkpoint(&tr, &path).unwrap();
    let (cfg, model) = load_model(&path, &mut reg).unwrap();
    assert_eq!(&cfg, tr.config());
    for img in &imgs {
        let a = discover_parts(tr.model(), img, 0, 0.8, true).unwrap();
        let b = discover_parts(&model, img, 0, 0.8, true).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.soft(), b.soft());
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let mut reg = registry();
    let tr = Trainer::new(tiny(&[]), &mut reg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.pdck");
    save_checkpoint(&tr, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path, &mut reg), Err(Error::CorruptArchive { .. })));
}

#[test]
fn one_step_moves_every_trainable_tensor() {
    let imgs = images(2);
    let mut reg = registry();
    let mut tr = Trainer::new(tiny(&["train.optimizer.weight_decay=0"]), &mut reg).unwrap();
    let before = tr.model().checksums().unwrap();
    trace(&mut tr, &imgs, 1);
    let after = tr.model().checksums().unwrap();
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        assert_ne!(a, b, "{name} did not move");
    }
}

#[test]
fn training_one_class_leaves_other_class_rows_alone() {
    let imgs = images(2);
    let mut reg = registry();
    let mut tr = Trainer::new(tiny(&["model.n_classes=3"]), &mut reg).unwrap();
    let rows = |t: &Trainer, c: usize| t.model().bank().select(c).unwrap().to_vec2::<f64>().unwrap();
    let (c0, c1, c2) = (rows(&tr, 0), rows(&tr, 1), rows(&tr, 2));
    tr.train_step(&imgs, 1).unwrap();
    assert_eq!(rows(&tr, 0)[..3], c0[..3]);
    assert_eq!(rows(&tr, 2)[..3], c2[..3]);
    assert_ne!(rows(&tr, 1)[..3], c1[..3]);
    // the shared background row trains with every class
    assert_ne!(rows(&tr, 0)[3], c0[3]);
}

#[test]
fn frozen_backbone_stays_frozen() {
    let cfg = tiny(&[
        "model.encoder.mode=frozen_backbone",
        "model.encoder.total_stride=8",
        "model.encoder.backbone=toy_frozen",
        "model.encoder.reduction_blocks=1",
    ]);
    let imgs = images(2);
    let mut reg = registry();
    let mut tr = Trainer::new(cfg, &mut reg).unwrap();
    let backbone = tr.model().encoder().backbone().unwrap().clone();
    let probe = imgs[0].to_tensor(DType::F64, &Device::Cpu).unwrap();
    let before = backbone.forward(&probe).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(tr.model().store().trainable().iter().all(|(n, _)| !n.contains("backbone")));
    trace(&mut tr, &imgs, 2);
    let after = backbone.forward(&probe).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert_eq!(before, after);
}

#[test]
fn swapping_an_image_with_itself_is_plain_reconstruction() {
    let imgs = images(1);
    let mut reg = registry();
    let tr = Trainer::new(tiny(&[]), &mut reg).unwrap();
    let plain = reconstruct(tr.model(), &imgs[0], 0, 0.8).unwrap();
    let (a, b) = swap_reconstruct(tr.model(), &imgs[0], &imgs[0], 0, 0.8).unwrap();
    assert_eq!(a.data(), plain.data());
    assert_eq!(b.data(), plain.data());
}

#[test]
fn reconstruction_loss_falls_when_overfitting() {
    let imgs = images(2);
    let mut reg = registry();
    let mut tr = Trainer::new(
        tiny(&["train.augment.scale=0", "train.augment.rotate_deg=0", "train.augment.translate_px=0", "train.optimizer.lr=0.005"]),
        &mut reg,
    )
    .unwrap();
    let mut rec = Vec::new();
    let classes = [0, 0];
    tr.fit(&imgs, &classes, 50, |_, r| {
        rec.push(r.loss.rec);
        Ok(true)
    })
    .unwrap();
    let head: f64 = rec[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = rec[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "rec went from {head} to {tail}");
}

#[test]
fn wrong_image_size_is_an_argument_error() {
    let mut reg = registry();
    let mut tr = Trainer::new(tiny(&[]), &mut reg).unwrap();
    let odd = vec![Image::constant(8, 8, [0.5; 3])];
    assert!(matches!(tr.train_step(&odd, 0), Err(Error::InvalidArgument(_))));
    assert!(matches!(tr.train_step(&[], 0), Err(Error::InvalidArgument(_))));
}
