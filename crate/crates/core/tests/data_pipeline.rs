use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nap_core::synth::{generate, generate_data, SynthConfig};
use nap_core::tensor_io::{
    load_manifest, read_tensor, write_tensor, Label, Manifest, ManifestEntry, Tensor, DEFAULT_LAYER,
};
use nap_core::Error;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

fn small_config(seed: u64) -> SynthConfig {
    SynthConfig {
        n_id: 20,
        n_ood: 30,
        channels: 8,
        height: 4,
        width: 4,
        seed,
        ..SynthConfig::default()
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn random_tensors_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SplitMix64::seed_from_u64(7);
    for i in 0..1000 {
        let ndim = rng.random_range(1..=4);
        let dims: Vec<usize> = (0..ndim).map(|_| rng.random_range(1..=6)).collect();
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>() * 200.0 - 100.0).collect();
        let t = Tensor::new(dims, data).unwrap();

        let a = dir.path().join(format!("t{i}.napd"));
        write_tensor(&a, &t).unwrap();
        let back = read_tensor(&a).unwrap();
        assert_eq!(back.dims(), t.dims());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));

        let b = dir.path().join(format!("t{i}.again.napd"));
        write_tensor(&b, &back).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let good = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap().to_bytes().unwrap();

    let mut truncated = good.clone();
    truncated.pop();
    let mut extra = good.clone();
    extra.push(0);
    let mut magic = good.clone();
    magic[0] = b'X';
    let mut nan = good.clone();
    let end = nan.len();
    nan[end - 4..].copy_from_slice(&f32::NAN.to_le_bytes());

    for (name, bytes) in [("trunc", truncated), ("extra", extra), ("magic", magic), ("nan", nan)] {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        assert!(read_tensor(&p).is_err(), "{name} accepted");
    }
    assert!(matches!(read_tensor(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn synth_manifest_loads_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(3);
    let path = generate(&cfg, dir.path()).unwrap();
    let ds = load_manifest(&path).unwrap();
    assert_eq!(ds.len(), 50);
    assert_eq!(ds.with_label(Label::Id).count(), 20);
    assert_eq!(ds.with_label(Label::Ood).count(), 30);
    let head = ds.head.as_ref().unwrap();
    assert_eq!((head.num_classes(), head.num_features()), (10, 8));
    for r in &ds.records {
        assert_eq!(r.activations[DEFAULT_LAYER].dims(), &[8, 4, 4]);
        assert_eq!(r.logits.len(), 10);
        assert_eq!(r.feature.as_ref().unwrap().len(), 8);
    }
}

#[test]
fn synth_is_deterministic_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&small_config(11), a.path()).unwrap();
    generate(&small_config(11), b.path()).unwrap();
    generate(&small_config(12), c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn default_fixture_matches_channel_means() {
    let cfg = SynthConfig::default();
    let data = generate_data(&cfg).unwrap();
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for s in &data.samples {
        let k = usize::from(s.label != Label::Id);
        sums[k] += s.feature.iter().map(|&v| v as f64).sum::<f64>();
        counts[k] += s.feature.len();
    }
    let id_mean = sums[0] / counts[0] as f64;
    let ood_mean = sums[1] / counts[1] as f64;
    assert!((id_mean - ood_mean).abs() <= 0.02, "id {id_mean} vs ood {ood_mean}");
    assert!((id_mean - cfg.expected_id_channel_mean()).abs() <= 0.01);
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tensor(d.join("a.napd"), &Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap()).unwrap();
    write_tensor(d.join("neg.napd"), &Tensor::new(vec![1, 2, 2], vec![0.0, -1.0, 2.0, 3.0]).unwrap()).unwrap();
    write_tensor(d.join("l.napd"), &Tensor::vector(vec![0.0, 1.0]).unwrap()).unwrap();

    let entry = |id: &str, act: &str| ManifestEntry {
        sample_id: id.into(),
        label: Label::Id,
        tensors: BTreeMap::from([(DEFAULT_LAYER.to_string(), act.to_string())]),
        logits: "l.napd".into(),
        feature: None,
    };
    let write = |name: &str, entries: Vec<ManifestEntry>| {
        let p = d.join(name);
        Manifest { entries, ..Manifest::default() }.write(&p).unwrap();
        p
    };

    let ok = write("ok.manifest.json", vec![entry("s0", "a.napd")]);
    assert_eq!(load_manifest(ok).unwrap().len(), 1);

    let dup = write("dup.manifest.json", vec![entry("s0", "a.napd"), entry("s0", "a.napd")]);
    assert!(load_manifest(dup).is_err());

    let neg = write("neg.manifest.json", vec![entry("s0", "neg.napd")]);
    assert!(matches!(load_manifest(neg), Err(Error::NegativeActivation { .. })));

    let missing = write("miss.manifest.json", vec![entry("s0", "nope.napd")]);
    assert!(matches!(load_manifest(missing), Err(Error::Io { .. })));

    let unknown = d.join("unknown.manifest.json");
    fs::write(&unknown, r#"{"entries": [], "extra": 1}"#).unwrap();
    assert!(load_manifest(unknown).is_err());
}
