mod common;

use cmd_autograd::{cosine_lr, Graph, ParamStore, Tensor};
use cmd_core::backbone::{InitSink, ModelConfig, DEFAULT_TAPS};
use cmd_core::data::{make_synthetic_corpus, LabelMap};
use cmd_core::features::{extract_all, ExtractionConfig, FeatureExtractor, FeaturePyramid};
use cmd_core::heads::*;
use cmd_core::metrics::{dice, BinaryMask};
use common::{fd_check, fd_check_sampled, project, rand_tensor};

fn pyramid(spec: &[(usize, usize, usize)], seed: u64) -> FeaturePyramid {
    let mut rng = common::rng(seed);
    FeaturePyramid { entries: spec.iter().map(|&(b, s, c)| (b, rand_tensor(&[s, s, c], &mut rng, -1.0, 1.0).cast())).collect(), t_fix: 50 }
}

/// CE plus soft Dice written out directly from the definition.
fn ce_dice_oracle(logits: &[f64], labels: &[u32], k: usize, weights: Option<&[f64]>) -> f64 {
    let probs: Vec<Vec<f64>> = logits
        .chunks(k)
        .map(|row| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(|v| v.exp() / z).collect()
        })
        .collect();
    let w = |c: u32| weights.map_or(1.0, |w| w[c as usize]);
    let ce = probs.iter().zip(labels).map(|(p, &l)| -w(l) * p[l as usize].ln()).sum::<f64>() / labels.iter().map(|&l| w(l)).sum::<f64>();
    let mut mean_dice = 0.0;
    for c in 0..k {
        let inter: f64 = probs.iter().zip(labels).filter(|(_, &l)| l as usize == c).map(|(p, _)| p[c]).sum();
        let psum: f64 = probs.iter().map(|p| p[c]).sum();
        let gsum = labels.iter().filter(|&&l| l as usize == c).count() as f64;
        mean_dice += (2.0 * inter + 1.0) / (psum + gsum + 1.0) / k as f64;
    }
    ce + 1.0 - mean_dice
}

#[test]
fn parameter_counts() {
    let widths = ModelConfig::cmd_l().tap_widths(&DEFAULT_TAPS).unwrap();
    assert_eq!(widths.iter().sum::<usize>(), 4096);
    let light = head_parameter_count(&HeadConfig { kind: HeadKind::Light, ..Default::default() }, &widths) as f64;
    assert!((light / 7.15e6 - 1.0).abs() <= 0.10, "light head {light}");
    let sota = head_parameter_count(&HeadConfig { kind: HeadKind::Sota, ..Default::default() }, &widths) as f64;
    assert!((sota / 21.21e6 - 1.0).abs() <= 0.10, "sota head {sota}");
    assert_eq!(head_parameter_count(&HeadConfig::default(), &[64, 128]), 192 * 2 + 2);
}

#[test]
fn output_matches_label_size() {
    let pyr = pyramid(&[(1, 2, 3), (3, 4, 2), (8, 8, 2)], 1);
    for kind in [HeadKind::LinearProbe, HeadKind::Light, HeadKind::Sota] {
        let head = Head::for_pyramid(&HeadConfig { kind, unified_dim: 4, num_classes: 3, ..Default::default() }, &pyr).unwrap();
        let logits = head.logits(&[pyr.clone(), pyr.clone()], 16).unwrap();
        assert_eq!(logits.shape(), &[2, 16, 16, 3], "{kind:?}");
        let maps = head.predict(std::slice::from_ref(&pyr), 16).unwrap();
        assert_eq!((maps[0].height, maps[0].width), (16, 16));
    }
    let head = Head::for_pyramid(&HeadConfig::default(), &pyr).unwrap();
    assert!(head.logits(&[pyramid(&[(1, 2, 3), (3, 4, 5), (8, 8, 2)], 1)], 16).is_err());
}

#[test]
fn zero_input_gives_the_bias_field() {
    // fresh heads have zero hidden biases and batch-norm shifts, so a zero
    // pyramid reaches the output layer as zeros and only its bias survives
    let zero = FeaturePyramid { entries: vec![(2, Tensor::zeros(&[2, 2, 3])), (5, Tensor::zeros(&[4, 4, 2]))], t_fix: 50 };
    for kind in [HeadKind::LinearProbe, HeadKind::Light] {
        let mut head = Head::for_pyramid(&HeadConfig { kind, unified_dim: 4, ..Default::default() }, &zero).unwrap();
        let bias = match &head.layout {
            HeadLayout::Linear { bias, .. } => *bias,
            HeadLayout::Light { out, .. } => out.b,
            HeadLayout::Sota { .. } => unreachable!(),
        };
        head.params.get_mut(bias).data_mut().copy_from_slice(&[0.25, -1.5]);
        let logits = head.logits(std::slice::from_ref(&zero), 8).unwrap();
        assert!(logits.data().chunks(2).all(|px| px == [0.25, -1.5]), "{kind:?}");
    }
}

#[test]
fn probe_is_invariant_to_channel_permutation() {
    let pyr = pyramid(&[(4, 4, 5)], 3);
    let head = Head::for_pyramid(&HeadConfig::default(), &pyr).unwrap();
    let perm = [3usize, 0, 4, 1, 2];
    let t = &pyr.entries[0].1;
    let permuted = FeaturePyramid { entries: vec![(4, Tensor::from_fn(&[4, 4, 5], |i| t.data()[i / 5 * 5 + perm[i % 5]]))], t_fix: 50 };
    let mut other = head.clone();
    let HeadLayout::Linear { weights, .. } = head.layout.clone() else { unreachable!() };
    let w = head.params.get(weights[0]).clone();
    *other.params.get_mut(weights[0]) = Tensor::from_fn(&[5, 2], |i| w.data()[perm[i / 2] * 2 + i % 2]);
    let a = head.logits(std::slice::from_ref(&pyr), 4).unwrap();
    let b = other.logits(&[permuted], 4).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn ce_dice_examples_and_gradient() {
    let labels: Vec<u32> = (0..16).map(|i| (i % 3 == 0) as u32).collect();
    let uniform = Tensor::<f64>::zeros(&[1, 4, 4, 2]);
    let mut g = Graph::<f64>::new();
    let x = g.input(uniform.clone());
    let ce = g.cross_entropy(x, &labels, None).unwrap();
    assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-12);
    let sharp = Tensor::from_fn(&[1, 4, 4, 2], |i| if (i % 2) as u32 == labels[i / 2] { 40.0 } else { -40.0 });
    assert!(ce_dice_value(&sharp, &labels, None).unwrap() < 1e-6);

    let mut rng = common::rng(4);
    let store = ParamStore::<f64>::new();
    for weights in [None, Some(vec![0.3, 2.0])] {
        let logits = rand_tensor(&[1, 4, 4, 2], &mut rng, -2.0, 2.0);
        let got = ce_dice_value(&logits, &labels, weights.as_deref()).unwrap();
        assert!((got - ce_dice_oracle(logits.data(), &labels, 2, weights.as_deref())).abs() < 1e-12);
        let err = fd_check(&store, Some(&logits), |g, v| ce_dice_loss(g, v.unwrap(), &labels, weights.as_deref()).unwrap());
        assert!(err < 1e-4, "{err:e}");
    }
    assert!(ce_dice_value(&uniform, &[2; 16], None).is_err());
}

#[test]
fn light_head_gradient() {
    let cfg = HeadConfig { kind: HeadKind::Light, unified_dim: 3, ..Default::default() };
    let widths = [2, 3];
    let mut store = ParamStore::<f64>::new();
    let mut rng = common::rng(0);
    let (layout, n) = HeadLayout::register(&cfg, &widths, &mut InitSink { store: &mut store, rng: &mut rng });
    common::randomize(&mut store, 1, 0.5);
    let mut r = common::rng(2);
    let inputs = HeadInputs::Pyramid(vec![rand_tensor(&[2, 2, 2, 2], &mut r, -1.0, 1.0), rand_tensor(&[2, 4, 4, 3], &mut r, -1.0, 1.0)]);
    let labels: Vec<u32> = (0..2 * 8 * 8).map(|i| (i % 5 < 2) as u32).collect();
    let err = fd_check(&store, None, |g, _| {
        let (y, _) = head_forward(g, &layout, n, &inputs, 8, &BnMode::Train).unwrap();
        ce_dice_loss(g, y, &labels, None).unwrap()
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn sota_head_gradient() {
    let cfg = HeadConfig { kind: HeadKind::Sota, ..Default::default() };
    let widths = [3, 2];
    let mut store = ParamStore::<f64>::new();
    let mut rng = common::rng(0);
    let (layout, n) = HeadLayout::register(&cfg, &widths, &mut InitSink { store: &mut store, rng: &mut rng });
    let mut r = common::rng(5);
    let inputs = HeadInputs::Dense(rand_tensor(&[2, 8, 8, 5], &mut r, -1.0, 1.0));
    let err = fd_check_sampled(&store, 80, 1e-6, 6, |g| {
        let (y, _) = head_forward(g, &layout, n, &inputs, 8, &BnMode::Train).unwrap();
        project(g, y, 7)
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn cosine_schedule() {
    let cfg = HeadConfig::default();
    assert_eq!(cfg.lr_at(0), 1e-3);
    assert!((cfg.lr_at(cfg.epochs - 1) - cfg.lr_floor).abs() < 1e-18);
    assert!(cfg.lr_floor <= 1e-5);
    let lrs: Vec<f64> = (0..cfg.epochs).map(|e| cfg.lr_at(e)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    let mid = cosine_lr(1.0, 0.0, 50, 101);
    assert!((mid - 0.5).abs() < 1e-12);
}

fn synthetic_pyramids(n: usize, seed: u64) -> (Vec<FeaturePyramid>, Vec<LabelMap>) {
    let ds = make_synthetic_corpus(n, 64, seed).unwrap();
    let model = cmd_core::backbone::build_model(&ModelConfig::tiny(), 0).unwrap();
    let ex = FeatureExtractor::new(model, &Default::default(), ExtractionConfig { use_condition: false, ..Default::default() }, "rand0").unwrap();
    let imgs: Vec<_> = ds.images().cloned().collect();
    let labels = ds.labeled().unwrap().iter().map(|s| s.mask.clone()).collect();
    (extract_all(&ex, &imgs, 8).unwrap(), labels)
}

#[test]
fn probe_learns_synthetic_blobs() {
    let (pyrs, labels) = synthetic_pyramids(100, 3);
    let cfg = HeadConfig::default();
    let (head, log) = train_head(&pyrs, &labels, &cfg).unwrap();
    assert_eq!(log.len(), 150);
    assert!(log.last().unwrap().loss < log[0].loss);
    let pred = head.predict(&pyrs, 64).unwrap();
    let mean = pred.iter().zip(&labels).map(|(p, g)| dice(&BinaryMask::foreground(p), &BinaryMask::foreground(g)).unwrap()).sum::<f64>() / pred.len() as f64;
    assert!(mean > 0.8, "train dice {mean}");
    assert_eq!(train_head(&pyrs, &labels, &cfg).unwrap().0, head);
}

#[test]
fn one_shot_and_invalid_training_sets() {
    let (pyrs, labels) = synthetic_pyramids(2, 5);
    let cfg = HeadConfig { epochs: 3, kind: HeadKind::Light, unified_dim: 8, ..Default::default() };
    let (head, log) = train_head(&pyrs[..1], &labels[..1], &cfg).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|e| e.loss.is_finite()));
    assert_eq!(head.predict(&pyrs[..1], 64).unwrap().len(), 1);
    assert!(train_head(&[], &[], &cfg).is_err());
    assert!(train_head(&pyrs, &labels[..1], &cfg).is_err());
    let bad = LabelMap::new(64, 64, vec![2; 64 * 64]).unwrap();
    assert!(train_head(&pyrs[..1], &[bad], &cfg).is_err());
    assert!(train_head(&pyrs, &labels, &HeadConfig { num_classes: 1, ..cfg }).is_err());
}

#[test]
fn only_head_parameters_change() {
    use cmd_core::pretrain::{Checkpoint, PretrainConfig, Trainer};
    let dir = tempfile::tempdir().unwrap();
    let cfg = PretrainConfig { steps: 1, ..PretrainConfig::tiny() };
    let ckpt = Trainer::new(&cfg).unwrap().checkpoint();
    ckpt.save(&dir.path().join("final")).unwrap();
    let read = |p: &str| std::fs::read(dir.path().join("final").join(p)).unwrap();
    let before = (read("weights.bin"), read("ema.bin"), read("checkpoint.json"));
    let loaded = Checkpoint::load(dir.path()).unwrap();
    let train = make_synthetic_corpus(3, 64, 1).unwrap();
    let hcfg = HeadConfig { epochs: 2, ..Default::default() };
    let ex = ExtractionConfig { use_condition: false, ..Default::default() };
    let init = Head::for_pyramid(&hcfg, &cmd_core::features::extract_pyramid(&loaded, train.items[0].image(), 50, &DEFAULT_TAPS, false).unwrap()).unwrap();
    let (head, _) = train_head_from_checkpoint(&loaded, &train, &hcfg, ex, None).unwrap();
    assert_eq!((read("weights.bin"), read("ema.bin"), read("checkpoint.json")), before);
    assert_eq!(loaded, Checkpoint::load(dir.path()).unwrap());
    // every head tensor moved and nothing else is trainable
    assert_eq!(head.params.len(), init.params.len());
    for id in 0..head.params.len() {
        assert_ne!(head.params.get(id), init.params.get(id), "{}", head.params.name(id));
    }
    assert!(!head.use_condition);
}

#[test]
fn head_file_round_trip() {
    let (pyrs, labels) = synthetic_pyramids(2, 9);
    for kind in [HeadKind::LinearProbe, HeadKind::Light] {
        let (head, _) = train_head(&pyrs, &labels, &HeadConfig { kind, epochs: 2, unified_dim: 8, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.bin");
        head.save(&path).unwrap();
        let back = Head::load(&path).unwrap();
        assert_eq!(back, head);
        assert_eq!(back.logits(&pyrs, 64).unwrap(), head.logits(&pyrs, 64).unwrap());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        assert!(Head::load(&path).is_err());
    }
}

#[test]
fn head_config_parsing() {
    let cfg: HeadConfig = toml::from_str("kind = \"sota\"\nepochs = 5").unwrap();
    assert_eq!((cfg.kind, cfg.epochs, cfg.lr), (HeadKind::Sota, 5, 1e-3));
    assert!(toml::from_str::<HeadConfig>("knd = \"sota\"").is_err());
    assert_eq!("linear-probe".parse::<HeadKind>().unwrap(), HeadKind::LinearProbe);
    assert!("mlp".parse::<HeadKind>().is_err());
}
