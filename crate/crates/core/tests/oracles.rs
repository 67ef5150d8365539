//! Layer outputs against hand-written reference loops, plus structural
//! properties of the data pipeline and the device/cloud split.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slowfast::checkpoint::{read_checkpoint, write_checkpoint};
use slowfast::data::{
    phase_split, sample_negatives, simulate_exposures, synthetic_clusters, ExposureParams, NegativeSampler, PHASE_LEN,
};
use slowfast::fast::{EmbeddingSlice, FastConfig, FastModel, FastState, NegativeMemory};
use slowfast::layers::{target_aware_fusion, AttentionUnit, GruCell, Mlp};
use slowfast::optim::{Adam, AdamConfig};
use slowfast::slow::{Mode, SlowConfig, SlowModel};
use slowfast::{Graph, ParamId, ParamStore, Tensor};

const TOL: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x W` for a row vector and a row-major `[rows, cols]` parameter.
fn vecmat(x: &[f64], store: &ParamStore<f64>, w: ParamId) -> Vec<f64> {
    let w = store.get(w);
    let cols = w.cols();
    (0..cols)
        .map(|c| x.iter().enumerate().map(|(r, xr)| xr * w.data()[r * cols + c]).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn mlp_ref(mlp: &Mlp, store: &ParamStore<f64>, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = add(&vecmat(&h, store, layer.weight), store.get(layer.bias).data());
        if i + 1 < mlp.layers.len() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

fn gru_ref(cell: &GruCell, store: &ParamStore<f64>, seq: &[Vec<f64>], init: &[f64]) -> Vec<f64> {
    let mut h = init.to_vec();
    for x in seq {
        let pre = |w, u, b: ParamId, h: &[f64]| {
            add(&add(&vecmat(x, store, w), &vecmat(h, store, u)), store.get(b).data())
        };
        let z: Vec<f64> = pre(cell.w_z, cell.u_z, cell.b_z, &h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = pre(cell.w_r, cell.u_r, cell.b_r, &h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = pre(cell.w_h, cell.u_h, cell.b_h, &rh).into_iter().map(f64::tanh).collect();
        h = (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect();
    }
    h
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn gru_matches_reference_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..50 {
        let (input, hidden) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", input, hidden, &mut rng);
        for id in [cell.b_z, cell.b_r, cell.b_h] {
            let b = random_vec(&mut rng, hidden);
            store.assign(id, &Tensor::row(b)).unwrap();
        }
        let seq: Vec<Vec<f64>> = (0..rng.gen_range(0..9)).map(|_| random_vec(&mut rng, input)).collect();
        let init = random_vec(&mut rng, hidden);

        let mut g = Graph::new(&store);
        let s = g.input(Tensor::matrix(seq.len(), input, seq.concat()).unwrap());
        let h0 = g.row(init.clone());
        let out = cell.encode(&mut g, s, h0).unwrap();
        let expect = gru_ref(&cell, &store, &seq, &init);
        assert!(max_diff(g.value(out).data(), &expect) < TOL, "trial {trial}");
    }
}

#[test]
fn din_attention_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..50 {
        let d = rng.gen_range(1..6);
        let mut store = ParamStore::<f64>::new();
        let unit = AttentionUnit::new(&mut store, "att", d, 16, &mut rng);
        let history: Vec<Vec<f64>> = (0..rng.gen_range(1..10)).map(|_| random_vec(&mut rng, d)).collect();
        let target = random_vec(&mut rng, d);

        let mut expect = vec![0.0; d];
        for e in &history {
            let mut feat = e.clone();
            feat.extend(&target);
            feat.extend(e.iter().zip(&target).map(|(a, b)| a - b));
            feat.extend(e.iter().zip(&target).map(|(a, b)| a * b));
            let a = mlp_ref(&unit.mlp, &store, &feat)[0];
            for (o, v) in expect.iter_mut().zip(e) {
                *o += a * v;
            }
        }

        let mut g = Graph::new(&store);
        let h = g.input(Tensor::matrix(history.len(), d, history.concat()).unwrap());
        let t = g.row(target);
        let out = unit.forward(&mut g, h, t).unwrap();
        assert!(max_diff(g.value(out).data(), &expect) < TOL, "trial {trial}");
    }
}

#[test]
fn fusion_matches_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let d = rng.gen_range(1..6);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "fusion", &[2 * d, 16, 1], &mut rng);
        let (r1, r2, t) = (random_vec(&mut rng, d), random_vec(&mut rng, d), random_vec(&mut rng, d));
        let logit = |r: &[f64]| mlp_ref(&mlp, &store, &[r, &t[..]].concat())[0];
        let (l1, l2) = (logit(&r1), logit(&r2));
        let w1 = 1.0 / (1.0 + (l2 - l1).exp());
        let expect: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| w1 * a + (1.0 - w1) * b).collect();

        let mut g = Graph::new(&store);
        let (a, b, c) = (g.row(r1), g.row(r2), g.row(t.clone()));
        let out = target_aware_fusion(&mut g, &mlp, a, b, c).unwrap();
        assert!(max_diff(g.value(out).data(), &expect) < TOL);
    }
}

#[test]
fn slow_prediction_composes_attention_and_head() {
    let d = 4;
    let model = SlowModel::<f64>::new(SlowConfig::new(20, d), Mode::Independent, 9);
    let store = &model.store;
    let emb = |i: u32| model.embedding.row(store, i).unwrap().to_vec();
    let history = [3u32, 7, 7, 1];
    let candidate = 12;
    let t = emb(candidate);
    let mut r_t = vec![0.0; d];
    for &h in &history {
        let e = emb(h);
        let mut feat = e.clone();
        feat.extend(&t);
        feat.extend(e.iter().zip(&t).map(|(a, b)| a - b));
        feat.extend(e.iter().zip(&t).map(|(a, b)| a * b));
        let a = mlp_ref(&model.attention.mlp, store, &feat)[0];
        r_t.iter_mut().zip(&e).for_each(|(o, v)| *o += a * v);
    }
    let logit = mlp_ref(&model.head.mlp, store, &[r_t, t].concat())[0];
    let got = model.predict(&history, candidate, None).unwrap();
    assert!((got - sigmoid(logit)).abs() < TOL);
}

#[test]
fn negative_memory_fold_is_associative() {
    let d = 6;
    let cloud = SlowModel::<f64>::new(SlowConfig::new(40, d), Mode::Interactive, 1);
    let mut slice = EmbeddingSlice::new(d);
    slice.request(&cloud.store, &cloud.embedding, &(0..40).collect::<Vec<_>>()).unwrap();
    let model = FastModel::<f64>::new(FastConfig::new(d), Mode::Interactive, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let exposures: Vec<u32> = (0..rng.gen_range(1..25)).map(|_| rng.gen_range(0..40)).collect();
        let mut whole = NegativeMemory::new(d);
        whole.accumulate(&exposures);
        let once = model.export_negative_memory(&slice, 0, &mut whole).unwrap();

        let mut cuts: Vec<usize> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(1..=exposures.len())).collect();
        cuts.push(exposures.len());
        cuts.sort_unstable();
        cuts.dedup();
        let mut chunked = NegativeMemory::new(d);
        let (mut start, mut last) = (0, None);
        for end in cuts {
            chunked.accumulate(&exposures[start..end]);
            last = Some(model.export_negative_memory(&slice, 0, &mut chunked).unwrap());
            start = end;
        }
        assert_eq!(last.unwrap().r_hat2, once.r_hat2);
        assert!(chunked.pending.is_empty());
    }
}

#[test]
fn device_holds_far_fewer_parameters_than_cloud() {
    let d = 32;
    let vocab = 3706;
    let cloud = SlowModel::<f32>::new(SlowConfig::new(vocab, d), Mode::Interactive, 1);
    // A device mirrors its own sequence plus its negatives: a few hundred rows.
    let mut slice = EmbeddingSlice::new(d);
    slice.request(&cloud.store, &cloud.embedding, &(0..300).collect::<Vec<_>>()).unwrap();
    let device = FastState {
        model: FastModel::<f32>::new(FastConfig::new(d), Mode::Interactive, 2),
        slice,
    };
    assert!(device.num_scalars() * 4 < cloud.num_scalars());
    assert!(device.model.num_scalars() < cloud.num_scalars());
}

#[test]
fn one_adam_step_lowers_the_loss() {
    let d = 8;
    for seed in 0..20 {
        let mut model = SlowModel::<f64>::new(SlowConfig::new(30, d), Mode::Independent, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let history: Vec<u32> = (0..6).map(|_| rng.gen_range(0..30)).collect();
        let (pos, neg) = (rng.gen_range(0..30), rng.gen_range(0..30));
        let loss_of = |m: &SlowModel<f64>| -> (f64, slowfast::graph::Gradients<f64>) {
            let mut g = Graph::new(&m.store);
            let a = m.forward_independent(&mut g, &history, pos).unwrap();
            let b = m.forward_independent(&mut g, &history, neg).unwrap();
            let la = g.bce(a.prob, 1.0).unwrap();
            let lb = g.bce(b.prob, 0.0).unwrap();
            let both = g.concat_cols(&[la, lb]).unwrap();
            let total = g.sum(both);
            (g.scalar(total), g.backward(total).unwrap())
        };
        let (before, grads) = loss_of(&model);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 1e-4,
                l2: 0.0,
                ..AdamConfig::default()
            },
            &model.store,
        );
        adam.step(&mut model.store, &grads).unwrap();
        let (after, _) = loss_of(&model);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn negatives_and_exposures_avoid_history() {
    let ds = synthetic_clusters(60, 60, 3, 25, 5);
    let split = phase_split(&ds, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..10_000u64 {
        let u = &split.users[rng.gen_range(0..split.users.len())];
        let seen: HashSet<u32> = u.items.iter().copied().collect();
        let mut sampler = NegativeSampler::new(&split.items, &u.items, u.user, trial);
        if trial % 2 == 0 {
            let n = rng.gen_range(1..=sampler.available().min(30));
            let negs = sampler.sample(n, &[]).unwrap();
            assert_eq!(negs.len(), n);
            assert_eq!(negs.iter().collect::<HashSet<_>>().len(), n);
            assert!(negs.iter().all(|i| !seen.contains(i) && split.items.contains(i)));
        } else {
            let next = u.fast()[rng.gen_range(0..PHASE_LEN)];
            let params = ExposureParams::default();
            let shown = simulate_exposures(params, &mut sampler, u.user, 0, Some(next), |pool| {
                Ok(pool.iter().map(|&i| (i % 7) as f64).collect())
            })
            .unwrap();
            assert_eq!(shown.len(), params.expose_k);
            assert!(shown.iter().all(|e| !seen.contains(&e.item) && e.item != next));
        }
    }
}

#[test]
fn phases_partition_each_sequence() {
    let ds = synthetic_clusters(100, 80, 4, 30, 7);
    let split = phase_split(&ds, 20);
    assert_eq!(split.users.len(), 100);
    let negatives = sample_negatives(&split, 1, 20, 3).unwrap();
    for (u, negs) in split.users.iter().zip(&negatives) {
        assert_eq!([u.slow(), u.fast(), u.test()].concat(), u.items);
        assert_eq!(u.fast().len(), PHASE_LEN);
        assert_eq!(u.test().len(), PHASE_LEN);
        assert!(u.slow().len() >= 10);
        assert!(u.is_temporally_sound());
        assert_eq!(negs.slow.len(), u.slow().len());
        assert_eq!(negs.fast.len(), PHASE_LEN);
        assert_eq!(negs.eval.len(), PHASE_LEN);
    }
}

#[test]
fn checkpoint_round_trips_a_model() {
    let model = FastModel::<f32>::new(FastConfig::new(16), Mode::Interactive, 3);
    let tensors = model.store.export_named("fast/");
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &tensors).unwrap();
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back, tensors);

    let mut fresh = FastModel::<f32>::new(FastConfig::new(16), Mode::Interactive, 99);
    fresh.store.import_named("fast/", &back).unwrap();
    for id in model.store.ids() {
        assert_eq!(model.store.get(id), fresh.store.get(id));
    }
}
