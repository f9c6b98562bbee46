mod common;

use cmd_autograd::{Graph, ParamStore, Tensor};
use cmd_core::backbone::{build_model, InitSink, ModelConfig};
use cmd_core::conditioning::*;
use cmd_core::data::make_synthetic_corpus;
use cmd_core::CmdError;
use common::rand_tensor;

#[test]
fn timestep_embedding_examples() {
    let model = build_model(&ModelConfig::tiny(), 1).unwrap();
    let a = model.timestep_embedding(1).unwrap();
    assert_eq!(a, model.timestep_embedding(1).unwrap());
    let b = model.timestep_embedding(1000).unwrap();
    let dist: f32 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
    assert!(dist > 0.0);
    assert_eq!(sinusoidal_embedding(5.0, 64).unwrap().len(), 64);
    assert!(sinusoidal_embedding(5.0, 63).is_err());
    let mut store = ParamStore::<f64>::new();
    let mut rng = common::rng(0);
    let p = ConditionParams::register(&mut InitSink { store: &mut store, rng: &mut rng }, 16, 64, 8);
    let mut g = Graph::inference(&store);
    let e = timestep_embedding(&mut g, &p, &[7]).unwrap();
    assert_eq!(g.shape(e), &[1, 64]);
}

#[test]
fn providers() {
    let img = make_synthetic_corpus(1, 64, 0).unwrap().items[0].image().clone();
    assert_eq!(ConditionProvider::new(&ConditionSource::none()).unwrap().encode(&img).unwrap(), None);
    let stub = ConditionProvider::new(&ConditionSource::stub(1024)).unwrap();
    let a = stub.encode(&img).unwrap().unwrap();
    assert_eq!(a.len(), 1024);
    assert_eq!(a, ConditionProvider::new(&ConditionSource::stub(1024)).unwrap().encode(&img).unwrap().unwrap());
    let dir = tempfile::tempdir().unwrap();
    let ext = ConditionProvider::new(&ConditionSource::external(dir.path(), 4)).unwrap();
    assert!(matches!(ext.encode(&img), Err(CmdError::Provider(_))));
    let feat: Vec<u8> = [1.0f32, -2.0, 0.5, 3.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(dir.path().join(format!("{}.feat", img.source_id)), feat).unwrap();
    assert_eq!(ext.encode(&img).unwrap().unwrap(), vec![1.0, -2.0, 0.5, 3.0]);
}

fn cond_store(seed: u64, randomize_z: bool) -> (ParamStore<f64>, ConditionParams) {
    let mut store = ParamStore::new();
    let mut rng = common::rng(seed);
    let p = ConditionParams::register(&mut InitSink { store: &mut store, rng: &mut rng }, 8, 6, 5);
    if randomize_z {
        let mut r = common::rng(seed + 100);
        for id in [p.z_w, p.z_b] {
            for v in store.get_mut(id).data_mut() {
                *v = rand::Rng::random_range(&mut r, -1.0..1.0);
            }
        }
    }
    (store, p)
}

#[test]
fn fusion_is_additive() {
    let mut rng = common::rng(3);
    let z = rand_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    // absent z: c is exactly the timestep embedding
    let (store, p) = cond_store(1, true);
    let mut g = Graph::inference(&store);
    let t = timestep_embedding(&mut g, &p, &[4, 40]).unwrap();
    let v = fuse_condition(&mut g, &p, t, None).unwrap();
    assert_eq!(g.value(v.c), g.value(t));
    // zero-initialised phi_z: c does not depend on z
    let (store0, p0) = cond_store(1, false);
    let mut g0 = Graph::inference(&store0);
    let t0 = timestep_embedding(&mut g0, &p0, &[4, 40]).unwrap();
    let with = fuse_condition(&mut g0, &p0, t0, Some(&z)).unwrap();
    assert_eq!(g0.value(with.c), g0.value(t0));
    // general case: c = phi_t(t) + (z W + b), with the affine map evaluated by hand
    let with = fuse_condition(&mut g, &p, t, Some(&z)).unwrap();
    let (w, b) = (store.get(p.z_w), store.get(p.z_b));
    for n in 0..2 {
        for j in 0..6 {
            let zj: f64 = (0..5).map(|k| z.data()[n * 5 + k] * w.data()[k * 6 + j]).sum::<f64>() + b.data()[j];
            let expect = g.value(t).data()[n * 6 + j] + zj;
            assert!((g.value(with.c).data()[n * 6 + j] - expect).abs() < 1e-12);
        }
    }
    let bad = Tensor::zeros(&[2, 4]);
    assert!(fuse_condition(&mut g, &p, t, Some(&bad)).is_err());
}

fn ada_store(width: usize, cond: usize) -> (ParamStore<f64>, AdaLnParams) {
    let mut store = ParamStore::new();
    let mut rng = common::rng(0);
    let p = AdaLnParams::register(&mut InitSink { store: &mut store, rng: &mut rng }, "b", cond, width);
    (store, p)
}

/// Per-position layer normalisation computed directly.
fn layer_norm_oracle(u: &Tensor<f64>, c: usize) -> Vec<f64> {
    u.data()
        .chunks_exact(c)
        .flat_map(|px| {
            let m = px.iter().sum::<f64>() / c as f64;
            let v = px.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c as f64;
            px.iter().map(move |x| (x - m) / (v + LN_EPS).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn adaln_examples() {
    let mut rng = common::rng(5);
    let u = rand_tensor(&[1, 4, 4, 6], &mut rng, -2.0, 2.0);
    let c = rand_tensor(&[1, 3], &mut rng, -1.0, 1.0);
    let (mut store, p) = ada_store(6, 3);
    {
        let mut g = Graph::inference(&store);
        let (uv, cv) = (g.input(u.clone()), g.constant(c.clone()));
        let y = adaln_modulate(&mut g, uv, cv, &p).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
    // gate bias 1 and zero scale and shift: the plain normalisation
    store.get_mut(p.b).data_mut()[12..18].fill(1.0);
    let mut g = Graph::inference(&store);
    let (uv, cv) = (g.input(u.clone()), g.constant(c.clone()));
    let y = adaln_modulate(&mut g, uv, cv, &p).unwrap();
    let ln = layer_norm_oracle(&u, 6);
    for (a, b) in g.value(y).data().iter().zip(&ln) {
        assert!((a - b).abs() < 1e-12);
    }
    for px in g.value(y).data().chunks_exact(6) {
        let m = px.iter().sum::<f64>() / 6.0;
        let v = px.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-5);
    }
    let narrow = g.input(Tensor::zeros(&[1, 4, 4, 5]));
    assert!(adaln_modulate(&mut g, narrow, cv, &p).is_err());
}

#[test]
fn provider_is_frozen_across_training() {
    let ds = make_synthetic_corpus(2, 64, 4).unwrap();
    let img = ds.items[0].image().clone();
    let mut cfg = cmd_core::pretrain::PretrainConfig::tiny();
    cfg.condition = ConditionSource::stub(16);
    cfg.model.feature_dim = 16;
    cfg.batch_size = 1;
    cfg.lr = 1e-3;
    let mut trainer = cmd_core::pretrain::Trainer::new(&cfg).unwrap();
    let before = trainer.provider().encode(&img).unwrap();
    let mut rng = common::rng(0);
    for _ in 0..2 {
        trainer.train_step(std::slice::from_ref(&img), &mut rng).unwrap();
    }
    assert_eq!(trainer.provider().encode(&img).unwrap(), before);
}
