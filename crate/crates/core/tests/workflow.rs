use advnorm_core::inference::{normalize_volume, segment_volume};
use advnorm_core::phantom::{generate_domain_dataset, generate_samples};
use advnorm_core::trainer::{Mode, ModelCheckpoint, Trainer};
use advnorm_core::{DatasetManifest, ExperimentConfig, Partition, PatchSet};

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.phantom.shape = [20, 20, 20];
    c.phantom.volumes_per_domain = 2;
    c.networks.generator.unet.channels = vec![2, 4];
    c.networks.segmenter.unet.channels = vec![2, 4];
    c.networks.discriminator.channels = vec![2, 4];
    c.train.pretrain_epochs = 1;
    c.train.total_epochs = 2;
    c
}

#[test]
fn dataset_on_disk_matches_the_in_memory_phantoms() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    let manifest = generate_domain_dataset(&c.phantom, dir.path()).unwrap();
    assert_eq!(manifest.samples.len(), 4);
    let reloaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    let from_disk = reloaded.load_samples(dir.path()).unwrap();
    let in_memory = generate_samples(&c.phantom).unwrap();
    assert_eq!(from_disk.len(), in_memory.len());
    for (a, b) in from_disk.iter().zip(&in_memory) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.domain, b.domain);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    let mut via_manifest = c.clone();
    via_manifest.manifest = Some(dir.path().join("manifest.json"));
    assert_eq!(via_manifest.load_samples().unwrap().len(), 4);
}

#[test]
fn trained_checkpoint_survives_disk_and_drives_inference() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    let samples = c.load_samples().unwrap();
    let set = PatchSet::build(&samples, &c.pipeline).unwrap();
    let train = set.select(Partition::Train, &[]);
    let val = set.select(Partition::Validation, &[]);
    let mut counts = vec![0; 4];
    for p in &train {
        for &l in &p.mask {
            counts[l as usize] += 1;
        }
    }
    let loss = c.loss.resolve(&counts).unwrap();
    let mut t = Trainer::new(Mode::Adversarial, c.train.clone(), c.networks.clone(), loss).unwrap();
    t.fit(&train, &val).unwrap();
    assert_eq!(t.log().len(), 2);

    let path = dir.path().join("model.mvol");
    t.checkpoint().save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(back.epoch(), 2);
    assert!(back.has_generator() && back.has_discriminator());
    let g = back.generator().unwrap();
    let s = back.segmenter().unwrap();
    assert_eq!(g.params().fingerprint(), t.generator().unwrap().params().fingerprint());
    assert_eq!(s.params().fingerprint(), t.segmenter().params().fingerprint());

    let volume = &samples[0].image;
    let out = normalize_volume(&g, volume, c.pipeline.patch_size, c.pipeline.stride).unwrap();
    assert_eq!(out.shape(), volume.shape());
    assert!(out.data().iter().all(|v| v.is_finite()));
    let seg = segment_volume(Some(&g), &s, volume, c.pipeline.patch_size, c.pipeline.stride).unwrap();
    assert_eq!(seg.dims(), volume.shape());
    let n = seg.tensor().voxels();
    for v in 0..n {
        let total: f64 = (0..seg.classes()).map(|k| seg.tensor().data()[k * n + v]).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let c = small_config();
    let set = PatchSet::build(&c.load_samples().unwrap(), &c.pipeline).unwrap();
    let train = set.select(Partition::Train, &[]);
    let val = set.select(Partition::Validation, &[]);
    let loss = c.loss.resolve(&[10, 10, 10, 10]).unwrap();
    let mut tc = c.train.clone();
    tc.total_epochs = 3;

    let mut full = Trainer::new(Mode::NoDiscriminator, tc.clone(), c.networks.clone(), loss.clone()).unwrap();
    full.fit(&train, &val).unwrap();

    let mut first = Trainer::new(Mode::NoDiscriminator, tc, c.networks.clone(), loss).unwrap();
    first.set_total_epochs(2);
    first.fit(&train, &val).unwrap();
    let bytes = first.checkpoint().encode().unwrap();
    let mut resumed = Trainer::from_checkpoint(&ModelCheckpoint::decode(&bytes).unwrap()).unwrap();
    resumed.set_total_epochs(3);
    resumed.fit(&train, &val).unwrap();

    assert_eq!(resumed.log().len(), 3);
    for (a, b) in resumed.log().iter().zip(full.log()) {
        assert_eq!(a.batch_losses, b.batch_losses);
    }
}
