use std::collections::BTreeMap;

use numkernel::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stereopose::geometry::DisparityMap;
use stereopose::stereo::toy::{load_checkpoint, save_checkpoint};
use stereopose::stereo::{sequence_loss, toy_dataset, train_toy, TrainOptions, Tsca, TscaConfig};

fn tiny_pair(seed: u64) -> stereopose::stereo::ToyPair {
    toy_dataset(1, &TscaConfig::tiny(), (3.0, 20.0), seed).unwrap().remove(0)
}

#[test]
fn every_parameter_group_gets_gradient() {
    for (name, cfg) in TscaConfig::default().ablations() {
        let mut store = ParamStore::new();
        let net = Tsca::new(&mut store, &mut ChaCha8Rng::seed_from_u64(4), cfg.clone()).unwrap();
        let pair = toy_dataset(1, &cfg, (4.0, 40.0), 4).unwrap().remove(0);
        let g = Graph::new();
        let out = net.forward(&g, &store, g.constant(pair.left.clone()), g.constant(pair.right.clone()), None).unwrap();
        let loss = sequence_loss(&g, &out.iterates, &pair.gt, None, cfg.gamma).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads(&store);
        let mut groups: BTreeMap<String, f64> = BTreeMap::new();
        for id in store.ids().collect::<Vec<_>>() {
            let norm = grads[id.index()].as_ref().map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>());
            let group = store.name(id).split('.').take(2).collect::<Vec<_>>().join(".");
            *groups.entry(group).or_default() += norm;
        }
        for (group, norm) in &groups {
            assert!(*norm > 0.0, "{name}: no gradient reaches {group}");
        }
        assert!(groups.keys().any(|k| k.starts_with("feature")));
        assert!(groups.keys().any(|k| k.starts_with("regularizer")));
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = TscaConfig::tiny();
    let pair = tiny_pair(9);
    let run = || {
        let mut store = ParamStore::new();
        let net = Tsca::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), cfg.clone()).unwrap();
        net.predict(&store, &pair.left, &pair.right).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let cfg = TscaConfig::tiny();
    let pairs = toy_dataset(3, &cfg, (3.0, 20.0), 1).unwrap();
    let a = train_toy(&pairs, &cfg, &TrainOptions::desk(6, 5)).unwrap();
    let b = train_toy(&pairs, &cfg, &TrainOptions::desk(6, 5)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.rows.len(), 6);
    assert!(a.log.to_csv().starts_with("step,loss,epe\n"));

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &cfg, &a.store).unwrap();
    let (net, store) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(net.config, cfg);
    let before = a.net.predict(&a.store, &pairs[0].left, &pairs[0].right).unwrap();
    let after = net.predict(&store, &pairs[0].left, &pairs[0].right).unwrap();
    assert_eq!(before.values, after.values);

    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn sequence_loss_matches_weighted_sum() {
    let (w, h) = (4, 3);
    let gamma = 0.8;
    let gt_values: Vec<f64> = (0..w * h).map(|i| 1.0 + 0.5 * i as f64).collect();
    let valid: Vec<bool> = (0..w * h).map(|i| i % 5 != 0).collect();
    let gt = DisparityMap::new(w, h, gt_values.clone(), valid.clone()).unwrap();
    let mask: Vec<bool> = (0..w * h).map(|i| i != 7).collect();
    let iterates: Vec<Vec<f64>> = (0..3).map(|k| (0..w * h).map(|i| (i as f64 * 0.7 + k as f64).sin() * 3.0 + 2.0).collect()).collect();

    let g = Graph::new();
    let vars: Vec<_> = iterates.iter().map(|d| g.constant(Tensor::new(&[h, w], d.clone()).unwrap())).collect();
    let got = g.scalar_value(sequence_loss(&g, &vars, &gt, Some(&mask), gamma).unwrap()).unwrap();

    let sel: Vec<usize> = (0..w * h).filter(|&i| valid[i] && mask[i]).collect();
    let mut expect = 0.0;
    for (k, d) in iterates.iter().enumerate() {
        let mae = sel.iter().map(|&i| (d[i] - gt_values[i]).abs()).sum::<f64>() / sel.len() as f64;
        expect += gamma.powi(2 - k as i32) * mae;
    }
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");

    assert!(sequence_loss(&g, &vars, &gt, None, 0.0).is_err());
    assert!(sequence_loss(&g, &[], &gt, None, 0.9).is_err());
}
