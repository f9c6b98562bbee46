mod common;

use cmd_autograd::{ParamStore, Tensor};
use cmd_core::data::{make_synthetic_corpus, mixed_resize, ImagePatch, PatchDataset};
use cmd_core::pretrain::*;
use cmd_core::CmdError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(steps: u64, batch: usize) -> PretrainConfig {
    PretrainConfig { steps, batch_size: batch, lr: 1e-3, ema_decay: 0.995, checkpoint_every: steps.max(1), ..PretrainConfig::tiny() }
}

fn corpus(n: usize) -> PatchDataset {
    make_synthetic_corpus(n, 64, 11).unwrap()
}

#[test]
fn ema_closed_form() {
    let (d, k) = (0.9, 10);
    let mut w = ParamStore::<f64>::new();
    w.add("p", Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()));
    let mut e = ParamStore::<f64>::new();
    e.add("p", Tensor::from_fn(&[3, 4], |i| 2.0 - i as f64));
    let e0 = e.clone();
    for _ in 0..k {
        ema_update(&mut e, &w, d).unwrap();
    }
    let dk = d.powi(k);
    for i in 0..12 {
        let expect = e0.get(0).data()[i] * dk + w.get(0).data()[i] * (1.0 - dk);
        assert!((e.get(0).data()[i] - expect).abs() <= 1e-12);
    }
    assert_eq!(PretrainConfig::default().ema_decay, 0.9999);
}

#[test]
fn ema_rejects_mismatched_layouts() {
    let mut a = ParamStore::<f64>::new();
    a.add("p", Tensor::zeros(&[2]));
    let mut b = ParamStore::<f64>::new();
    b.add("p", Tensor::zeros(&[3]));
    assert!(ema_update(&mut a, &b, 0.5).is_err());
}

#[test]
fn timesteps_are_uniform() {
    let total = 1000u32;
    let draws = 100_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = vec![0usize; total as usize];
    for _ in 0..draws {
        let t = sample_timestep(&mut rng, total);
        assert!((1..=total).contains(&t));
        counts[t as usize - 1] += 1;
    }
    let expect = draws as f64 / total as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // 0.999 quantile of chi-square with 999 degrees of freedom (Wilson-Hilferty)
    let df = (total - 1) as f64;
    let z = 3.090_232;
    let crit = df * (1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt()).powi(3);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
}

#[test]
fn defaults_and_config_parsing() {
    let d = PretrainConfig::default();
    assert_eq!((d.timesteps, d.patch_size, d.lr, d.weight_decay), (1000, 8, 3e-5, 0.0));
    assert_eq!(PretrainConfig::tiny().patch_size, 4);
    let cfg = PretrainConfig::from_toml("model = \"tiny\"\npatch_size = 4\nsteps = 7\nbatch_size = 2\n").unwrap();
    assert_eq!((cfg.steps, cfg.batch_size, cfg.timesteps, cfg.lr), (7, 2, 1000, 3e-5));
    for bad in ["steps = 0", "lr = 0.0", "lr = -1.0", "steps = [", "model = \"huge\"", "patch_size = 7"] {
        assert!(matches!(PretrainConfig::from_toml(bad), Err(CmdError::Config(_))), "{bad}");
    }
}

fn batch(ds: &PatchDataset, seed: u64, n: usize) -> Vec<ImagePatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ds.images().take(n).map(|i| mixed_resize(i, 64, &mut rng).unwrap()).collect()
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let mut trainer = Trainer::new(&tiny(1, 2)).unwrap();
    trainer.config.lr = 0.0;
    let before = trainer.model.params.clone();
    let loss = trainer.train_step(&batch(&corpus(2), 0, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(trainer.model.params, before);
    assert_eq!(trainer.ema, before);
    assert_eq!(trainer.step(), 1);
}

#[test]
fn train_step_rejects_bad_batches() {
    let mut trainer = Trainer::new(&tiny(1, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(trainer.train_step(&[], &mut rng).is_err());
    let small = ImagePatch::filled(32, 32, 3, 0.5, "s");
    assert!(matches!(trainer.train_step(&[small], &mut rng), Err(CmdError::Size { .. })));
}

#[test]
fn training_descends() {
    let ds = corpus(40);
    let dir = tempfile::tempdir().unwrap();
    run_pretraining(&tiny(200, 4), &ds, dir.path(), RunOptions::default()).unwrap();
    let log = read_loss_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.len(), 200);
    let mean = |s: &[(u64, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&log[..20]), mean(&log[180..]));
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let ds = corpus(6);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(4, 2);
    let ca = run_pretraining(&cfg, &ds, a.path(), RunOptions::default()).unwrap();
    let cb = run_pretraining(&cfg, &ds, b.path(), RunOptions::default()).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(std::fs::read(a.path().join(LOG_FILE)).unwrap(), std::fs::read(b.path().join(LOG_FILE)).unwrap());
    assert_eq!(checkpoint_digest(a.path()).unwrap(), checkpoint_digest(b.path()).unwrap());
    let other = run_pretraining(&PretrainConfig { seed: 1, ..cfg }, &ds, tempfile::tempdir().unwrap().path(), RunOptions::default()).unwrap();
    assert_ne!(other.weights, ca.weights);
}

#[test]
fn checkpoints_and_resume() {
    let ds = corpus(6);
    let cfg = PretrainConfig { checkpoint_every: 25, ..tiny(50, 1) };
    let full = tempfile::tempdir().unwrap();
    let mut seen = 0;
    let mut count = |_: u64, _: f64| seen += 1;
    let done = run_pretraining(&cfg, &ds, full.path(), RunOptions { resume: None, on_step: Some(&mut count) }).unwrap();
    assert_eq!(seen, 50);
    let mut entries: Vec<String> = std::fs::read_dir(full.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    entries.sort();
    assert_eq!(entries, ["ckpt_25", "ckpt_50", "final", "train.log"]);
    assert_eq!(done.step, 50);
    assert!(done.ema.is_some() && done.optimizer.is_some());
    assert_eq!(Checkpoint::load(full.path()).unwrap(), done);

    let resumed = tempfile::tempdir().unwrap();
    std::fs::copy(full.path().join(LOG_FILE), resumed.path().join(LOG_FILE)).unwrap();
    let from = full.path().join("ckpt_25");
    let again = run_pretraining(&cfg, &ds, resumed.path(), RunOptions { resume: Some(from), on_step: None }).unwrap();
    assert_eq!(again, done);
    assert_eq!(std::fs::read(resumed.path().join(LOG_FILE)).unwrap(), std::fs::read(full.path().join(LOG_FILE)).unwrap());
}

#[test]
fn checkpoint_loading_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(CmdError::Config(_))));
    let ckpt = Trainer::new(&tiny(1, 1)).unwrap().checkpoint();
    ckpt.save(&dir.path().join("c")).unwrap();
    std::fs::write(dir.path().join("c/weights.bin"), [0u8; 12]).unwrap();
    assert!(Checkpoint::load(&dir.path().join("c")).is_err());
}
