use std::collections::BTreeSet;

use msn_core::data::*;
use msn_core::nn::ParamStore;
use msn_core::tensor::Tensor;
use msn_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(seed: u64) -> SyntheticLatentSpec {
    SyntheticLatentSpec {
        seq_len: 12,
        dim: 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn noiseless_samples_of_a_class_coincide() {
    let s = SyntheticLatentSpec {
        noise_std: 0.0,
        ..spec(1)
    };
    let data = gen_latent_dataset(&s, 3, 0).unwrap();
    assert_eq!(data.len(), 12);
    // Classes are interleaved: indices 0, 4, 8 are class 0.
    assert_eq!(data.labels()[4], 0);
    assert_eq!(data.sample(0), data.sample(4));
    assert_eq!(data.sample(4), data.sample(8));
    assert_ne!(data.sample(0), data.sample(1));
}

#[test]
fn generation_is_a_pure_function_of_the_seed() {
    let a = gen_latent_dataset(&spec(7), 5, 0).unwrap();
    let b = gen_latent_dataset(&spec(7), 5, 0).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = gen_latent_dataset(&spec(8), 5, 0).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
    let d = gen_latent_dataset(&spec(7), 5, 1000).unwrap();
    assert_ne!(a.to_bytes(), d.to_bytes());
}

#[test]
fn bimodal_signs_split_evenly() {
    let s = spec(3);
    let pattern = s.patterns()[3].render(s.seq_len);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let neg = (0..n)
        .filter(|_| s.sample(&pattern, 3, &mut rng).unwrap().1 < 0.0)
        .count();
    let frac = neg as f64 / n as f64;
    assert!((0.47..=0.53).contains(&frac), "{frac}");
    let (_, sign) = s.sample(&pattern, 0, &mut rng).unwrap();
    assert_eq!(sign, 1.0);
}

#[test]
fn values_stay_within_amplitude_plus_six_sigma() {
    let s = SyntheticLatentSpec {
        noise_std: 0.1,
        ..spec(4)
    };
    let data = gen_latent_dataset(&s, 50, 0).unwrap();
    let bound = (s.max_amplitude + 6.0 * s.noise_std) as f32;
    let outside = data.values().iter().filter(|v| v.abs() > bound).count();
    assert!(
        (outside as f64) <= 1e-4 * data.values().len() as f64,
        "{outside}"
    );
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(gen_latent_dataset(
        &SyntheticLatentSpec {
            n_classes: 1,
            ..spec(0)
        },
        1,
        0
    )
    .is_err());
    assert!(gen_latent_dataset(
        &SyntheticLatentSpec {
            noise_std: -1.0,
            ..spec(0)
        },
        1,
        0
    )
    .is_err());
    assert!(gen_latent_dataset(
        &SyntheticLatentSpec {
            bimodal_class: Some(9),
            ..spec(0)
        },
        1,
        0
    )
    .is_err());
    assert!(gen_latent_dataset(&spec(0), 0, 0).is_err());
}

#[test]
fn latent_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.msnl");
    let data = gen_latent_dataset(&spec(5), 2, 0).unwrap();
    data.save(&path).unwrap();
    let back = LatentDataset::load(&path).unwrap();
    assert_eq!(back, data);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], LATENT_MAGIC);
    // header + values + u16 labels
    assert_eq!(bytes.len(), 20 + 8 * 12 * 4 * 4 + 8 * 2);
    assert!(LatentDataset::from_bytes(&bytes[..bytes.len() - 3], &path).is_err());
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        LatentDataset::from_bytes(&bad, &path),
        Err(Error::UnsupportedVersion { .. })
    ));
}

#[test]
fn dataset_views() {
    let data = gen_latent_dataset(&spec(6), 2, 0).unwrap();
    let class1 = data.filter_class(1).unwrap();
    assert_eq!(class1.len(), 2);
    assert!(class1.labels().iter().all(|&l| l == 1));
    assert_eq!(data.batch(&[0, 2]).unwrap().shape(), &[2, 12, 4]);
    assert!(data.batch(&[99]).is_err());
    assert!(data.variance() > 0.0);
}

#[test]
fn captions_follow_the_template() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for label in 0..EVENTS.len() {
        let noun = event_noun(label).unwrap();
        let forms: BTreeSet<String> = (0..100)
            .map(|_| gen_caption(label, &mut rng).unwrap())
            .collect();
        assert!(forms.len() >= 3);
        for c in &forms {
            assert!(
                c.starts_with("A ") && c.contains(noun) && c.contains(" is ") && c.is_ascii(),
                "{c}"
            );
        }
    }
    let a = gen_caption(2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = gen_caption(2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert!(gen_caption(8, &mut rng).is_err());
}

fn sample_checkpoint() -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.push(
        "a.weight",
        Tensor::new([2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap(),
    );
    ck.push("b", Tensor::scalar(7.25));
    ck.push(
        "ü.bias",
        Tensor::new([4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
    );
    ck
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.msnc"), dir.path().join("b.msnc"));
    let ck = sample_checkpoint();
    ck.save(&p1).unwrap();
    let back = Checkpoint::load(&p1).unwrap();
    for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        assert!(t1
            .data()
            .iter()
            .zip(t2.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    back.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn damaged_checkpoints_are_refused() {
    let path = std::path::Path::new("mem.msnc");
    let bytes = sample_checkpoint().to_bytes().unwrap();
    for cut in [3, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(
                Checkpoint::from_bytes(&bytes[..cut], path),
                Err(Error::Corrupt { .. })
            ),
            "cut {cut}"
        );
    }
    let mut flipped = bytes.clone();
    flipped[20] ^= 0x40;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped, path),
        Err(Error::Corrupt { .. })
    ));
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&version, path),
        Err(Error::UnsupportedVersion {
            found: 2,
            expected: 1,
            ..
        })
    ));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&magic, path),
        Err(Error::Corrupt { .. })
    ));
}

#[test]
fn loading_reports_unknown_and_missing_names() {
    let mut ps = ParamStore::<f32>::new();
    let id = ps.add("a.weight", Tensor::zeros([2, 3])).unwrap();
    ps.add("b", Tensor::scalar(0.0)).unwrap();
    let ck = sample_checkpoint();
    match ck.load_into(&mut ps, &[]) {
        Err(Error::UnknownTensors(names)) => assert_eq!(names, vec!["ü.bias".to_string()]),
        other => panic!("{other:?}"),
    }
    assert_eq!(ps.value(id), &Tensor::zeros([2, 3]));
    ck.load_into(&mut ps, &["ü.bias"]).unwrap();
    assert_eq!(ps.value(id).data()[2], 3.5);

    let mut bigger = ParamStore::<f32>::new();
    bigger.add("a.weight", Tensor::zeros([2, 3])).unwrap();
    bigger.add("b", Tensor::scalar(0.0)).unwrap();
    bigger.add("c", Tensor::scalar(0.0)).unwrap();
    assert!(ck.load_into(&mut bigger, &["ü.bias"]).is_err());

    let mut shaped = ParamStore::<f32>::new();
    shaped.add("a.weight", Tensor::zeros([3, 2])).unwrap();
    shaped.add("b", Tensor::scalar(0.0)).unwrap();
    assert!(matches!(
        ck.load_into(&mut shaped, &["ü.bias"]),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn pairs_round_trip_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let mut pairs = gen_token_pairs(&TokenPairSpec {
        n_pairs: 5,
        ..Default::default()
    })
    .unwrap();
    pairs[1].instruction = Some("Describe the sound.".into());
    pairs[1].answer = Some("A \"quoted\" answer".into());
    write_pairs(&path, &pairs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(!text.lines().next().unwrap().contains("instruction"));
    assert_eq!(read_pairs(&path).unwrap(), pairs);
    std::fs::write(&path, "{\"caption\": 3}\n").unwrap();
    assert!(read_pairs(&path).is_err());
}

#[test]
fn token_pairs_share_class_prototypes() {
    let spec = TokenPairSpec {
        n_pairs: 16,
        n_classes: 4,
        codebook_size: 64,
        n_tokens: 8,
        n_substitutions: 1,
        seed: 2,
    };
    let pairs = gen_token_pairs(&spec).unwrap();
    assert_eq!(pairs, gen_token_pairs(&spec).unwrap());
    for p in &pairs {
        assert_eq!(p.audio_tokens.len(), 8);
        assert!(p.audio_tokens.iter().all(|&t| t < 64));
        assert!(p.caption.contains(p.label.as_deref().unwrap()));
    }
    // Two pairs of one class differ in at most two positions.
    let diff = pairs[0]
        .audio_tokens
        .iter()
        .zip(&pairs[4].audio_tokens)
        .filter(|(a, b)| a != b)
        .count();
    assert!(diff <= 2);
    assert!(gen_token_pairs(&TokenPairSpec {
        n_classes: 9,
        ..spec
    })
    .is_err());
}

#[test]
fn metrics_csv_layout() {
    let mut log = MetricsLog::new();
    log.record(0, "train", "loss", 1.5);
    log.record(1, "train", "loss", 0.75);
    log.record(1, "val", "recon", 0.25);
    assert_eq!(
        log.to_csv(),
        "step,split,metric,value\n0,train,loss,1.5\n1,train,loss,0.75\n1,val,recon,0.25\n"
    );
    assert_eq!(log.series("train", "loss"), vec![(0, 1.5), (1, 0.75)]);
    assert_eq!(log.last("val", "recon"), Some(0.25));
    assert_eq!(log.summary()["train/loss"], 0.75);
}
