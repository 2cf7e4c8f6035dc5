use rand::Rng as _;

use super::*;
use crate::dtqn::{q_window, QLearnConfig, SequenceQNet};
use crate::envs::{EnvConfig, EnvKind, HallwayConfig};
use crate::rng::rng_from_seed;
use crate::tensorcore::{Graph, ParamStore, Tensor};
use crate::testutil::{check_inputs, check_params, randn};
use crate::transformer::SeqLayout;
use crate::trajstore::collect;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-loop LSTM step for one row.
fn lstm_oracle(x: &[f64], h: &[f64], c: &[f64], wx: &Tensor, wh: &Tensor, b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let z: Vec<f64> = (0..4 * n)
        .map(|j| {
            b[j] + (0..x.len()).map(|k| x[k] * wx.get(&[k, j])).sum::<f64>()
                + (0..n).map(|k| h[k] * wh.get(&[k, j])).sum::<f64>()
        })
        .collect();
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for k in 0..n {
        let (i, f, o, g) = (sig(z[k]), sig(z[n + k]), sig(z[2 * n + k]), z[3 * n + k].tanh());
        c2[k] = f * c[k] + i * g;
        h2[k] = o * c2[k].tanh();
    }
    (h2, c2)
}

fn cell_values(store: &ParamStore, p: &LstmParams, x: &Tensor, h: &Tensor, c: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new(true);
    let (xv, hv, cv) = (g.constant(x.clone()), g.constant(h.clone()), g.constant(c.clone()));
    let (h2, c2) = lstm_cell(&mut g, store, xv, hv, cv, p).unwrap();
    (g.value(h2).clone(), g.value(c2).clone())
}

#[test]
fn lstm_init_sets_forget_bias() {
    let mut store = ParamStore::new();
    let p = LstmParams::init(&mut store, "l", 3, 4, &mut rng_from_seed(0)).unwrap();
    let b = store.get(p.b).data();
    assert!(b[..4].iter().all(|&v| v == 0.0));
    assert!(b[4..8].iter().all(|&v| v == 1.0));
    assert!(b[8..].iter().all(|&v| v == 0.0));
    assert!(LstmParams::init(&mut store, "z", 3, 0, &mut rng_from_seed(0)).is_err());
}

#[test]
fn lstm_zero_weights_zero_state() {
    let mut store = ParamStore::new();
    let p = LstmParams::init(&mut store, "l", 3, 4, &mut rng_from_seed(0)).unwrap();
    store.get_mut(p.w_x).data_mut().fill(0.0);
    store.get_mut(p.w_h).data_mut().fill(0.0);
    let x = randn(&[2, 3], &mut rng_from_seed(1));
    let (h, c) = cell_values(&store, &p, &x, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 4]));
    assert!(h.data().iter().all(|&v| v == 0.0));
    assert!(c.data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_saturated_gates_keep_memory() {
    let mut store = ParamStore::new();
    let p = LstmParams::init(&mut store, "l", 3, 4, &mut rng_from_seed(0)).unwrap();
    store.get_mut(p.w_x).data_mut().fill(0.0);
    store.get_mut(p.w_h).data_mut().fill(0.0);
    let b = store.get_mut(p.b).data_mut();
    b[..4].fill(-60.0);
    b[4..8].fill(60.0);
    let mut rng = rng_from_seed(2);
    let (x, h, c) = (randn(&[3, 3], &mut rng), randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng));
    let (_, c2) = cell_values(&store, &p, &x, &h, &c);
    for (a, b) in c2.data().iter().zip(c.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn lstm_matches_loop_oracle() {
    let mut rng = rng_from_seed(3);
    for seed in 0..20 {
        let mut store = ParamStore::new();
        let p = LstmParams::init(&mut store, "l", 3, 5, &mut rng_from_seed(seed)).unwrap();
        let bias = randn(&[20], &mut rng);
        store.get_mut(p.b).data_mut().copy_from_slice(bias.data());
        let (x, h, c) = (randn(&[2, 3], &mut rng), randn(&[2, 5], &mut rng), randn(&[2, 5], &mut rng));
        let (h2, c2) = cell_values(&store, &p, &x, &h, &c);
        for r in 0..2 {
            let (oh, oc) = lstm_oracle(
                &x.data()[r * 3..r * 3 + 3],
                &h.data()[r * 5..r * 5 + 5],
                &c.data()[r * 5..r * 5 + 5],
                store.get(p.w_x),
                store.get(p.w_h),
                store.get(p.b).data(),
            );
            for k in 0..5 {
                assert!((oh[k] - h2.data()[r * 5 + k]).abs() < 1e-12);
                assert!((oc[k] - c2.data()[r * 5 + k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn lstm_three_step_unroll_gradients() {
    for seed in 0..10 {
        let mut store = ParamStore::new();
        let p = LstmParams::init(&mut store, "l", 2, 3, &mut rng_from_seed(seed)).unwrap();
        let mut rng = rng_from_seed(100 + seed);
        let xs: Vec<Tensor> = (0..3).map(|_| randn(&[2, 2], &mut rng)).collect();
        let weights = randn(&[2, 3], &mut rng);
        let unroll = |g: &mut Graph, s: &ParamStore, xs: &[crate::tensorcore::Var]| {
            let mut h = g.constant(Tensor::zeros(&[2, 3]));
            let mut c = g.constant(Tensor::zeros(&[2, 3]));
            for &x in xs {
                (h, c) = lstm_cell(g, s, x, h, c, &p)?;
            }
            let w = g.constant(weights.clone());
            let y = g.mul(h, w)?;
            let y = g.add(y, c)?;
            g.sum(y)
        };
        let e = check_params(&store, |g, s| {
            let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
            unroll(g, s, &vars)
        });
        assert!(e < 1e-4, "params seed {seed}: {e}");
        let e = check_inputs(&xs, |g, vars| unroll(g, &store, vars));
        assert!(e < 1e-4, "inputs seed {seed}: {e}");
    }
}

const SHAPE: [usize; 3] = [2, 3, 4];

fn drqn_cfg(context: usize) -> DrqnConfig {
    DrqnConfig { embed: 6, hidden: 5, filters1: 2, filters2: 3, context_len: context }
}

fn drqn(seed: u64, context: usize) -> (DrqnModel, ParamStore) {
    let mut store = ParamStore::new();
    let m = DrqnModel::init(&mut store, SHAPE, 3, drqn_cfg(context), &mut rng_from_seed(seed)).unwrap();
    (m, store)
}

fn frames(t: usize, rng: &mut crate::rng::Rng) -> Tensor {
    let mut shape = vec![t];
    shape.extend_from_slice(&SHAPE);
    let n = t * 24;
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn drqn_single_step_is_encoder_cell_head() {
    let (m, store) = drqn(0, 4);
    let mut rng = rng_from_seed(1);
    let f = frames(1, &mut rng);
    let q = q_window(&m, &store, &f).unwrap();
    let mut g = Graph::new(true);
    let x = g.constant(f);
    let e = crate::transformer::encode_observations(&mut g, &store, x, &m.encoder).unwrap();
    let z = g.constant(Tensor::zeros(&[1, 5]));
    let (h, _) = lstm_cell(&mut g, &store, e, z, z, &m.lstm).unwrap();
    let manual = m.q_head.forward(&mut g, &store, h).unwrap();
    assert_eq!(g.value(manual).data(), q.data());
}

#[test]
fn drqn_is_causal_and_deterministic() {
    let (m, store) = drqn(2, 6);
    let mut rng = rng_from_seed(3);
    for _ in 0..30 {
        let t = rng.gen_range(2..=6);
        let f = frames(t, &mut rng);
        let q = q_window(&m, &store, &f).unwrap();
        assert_eq!(q, q_window(&m, &store, &f).unwrap());
        let k = rng.gen_range(1..t);
        let mut g2 = f.clone();
        g2.data_mut()[k * 24..].iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let q2 = q_window(&m, &store, &g2).unwrap();
        assert_eq!(q.data()[..k * 3], q2.data()[..k * 3]);
    }
}

#[test]
fn drqn_padded_batch_matches_unpadded() {
    let (m, store) = drqn(4, 6);
    let mut rng = rng_from_seed(5);
    let (n, len) = (4, 6);
    let starts: Vec<usize> = vec![0, 2, 5, 3];
    let mut data = Vec::new();
    for _ in 0..n {
        data.extend_from_slice(frames(len, &mut rng).data());
    }
    let mut g = Graph::new(true);
    let fr = g.constant(Tensor::new(vec![n * len, 2, 3, 4], data.clone()).unwrap());
    let out = m.forward(&mut g, &store, fr, &SeqLayout::causal(n, len, starts.clone())).unwrap();
    let q = g.value(out.q);
    for (b, &s) in starts.iter().enumerate() {
        let w = data[(b * len + s) * 24..(b + 1) * len * 24].to_vec();
        let qw = q_window(&m, &store, &Tensor::new(vec![len - s, 2, 3, 4], w).unwrap()).unwrap();
        for (x, y) in qw.data().iter().zip(&q.data()[(b * len + s) * 3..(b + 1) * len * 3]) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn drqn_gradients_match_finite_differences() {
    let (m, store) = drqn(6, 3);
    let mut rng = rng_from_seed(7);
    let f = frames(3, &mut rng);
    let w = randn(&[3, 3], &mut rng);
    let e = check_params(&store, |g, s| {
        let x = g.constant(f.clone());
        let out = m.forward(g, s, x, &SeqLayout::single(3))?;
        let wv = g.constant(w.clone());
        let y = g.mul(out.q, wv)?;
        g.sum(y)
    });
    assert!(e < 1e-4, "{e}");
}

fn hallway() -> EnvConfig {
    EnvConfig {
        kind: EnvKind::Hallway,
        frame_skip: 0,
        hallway: HallwayConfig { length: 4, ..HallwayConfig::default() },
        ..EnvConfig::default()
    }
}

#[test]
fn drqn_training_is_deterministic() {
    let cfg = QLearnConfig {
        total_steps: 200,
        batch_size: 4,
        learning_starts: 40,
        target_sync: 20,
        seed: 3,
        ..QLearnConfig::default()
    };
    let run = || train_drqn(&hallway(), DrqnConfig { context_len: 5, ..drqn_cfg(5) }, &cfg, &mut |_| Ok(())).unwrap();
    let (m, a, la) = run();
    let (_, b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.grad_steps > 0);
    assert_eq!(m.obs_shape(), [3, 3, 4]);
}

/// Non-recursive GAE: A_t = sum_k (γλ)^k δ_{t+k}, stopping after a terminal.
fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let t = r.len();
    let value_at = |i: usize| if i < t { v[i] } else { last };
    let delta: Vec<f64> = (0..t)
        .map(|i| r[i] + if d[i] { 0.0 } else { gamma * value_at(i + 1) } - v[i])
        .collect();
    (0..t)
        .map(|i| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for k in i..t {
                acc += w * delta[k];
                if d[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}

#[test]
fn gae_examples() {
    let (a, tg) = ppo_gae(&[1.0], &[0.0], &[true], 5.0, 0.99, 0.95).unwrap();
    assert_eq!((a[0], tg[0]), (1.0, 1.0));

    let r = [1.0, -2.0, 3.0, 0.5];
    let (a, _) = ppo_gae(&r, &[0.0; 4], &[false; 4], 0.0, 1.0, 1.0).unwrap();
    assert_eq!(a, vec![2.5, 1.5, 3.5, 0.5]);

    let v = [0.3, -0.2, 0.7];
    let (a, tg) = ppo_gae(&[1.0, 2.0, 3.0], &v, &[true; 3], 9.0, 0.9, 0.8).unwrap();
    for i in 0..3 {
        assert!((a[i] - ([1.0, 2.0, 3.0][i] - v[i])).abs() < 1e-15);
        assert!((tg[i] - [1.0, 2.0, 3.0][i]).abs() < 1e-15);
    }
    assert!(ppo_gae(&[1.0], &[0.0, 1.0], &[false], 0.0, 1.0, 1.0).is_err());
}

#[test]
fn gae_matches_direct_sum() {
    let mut rng = rng_from_seed(8);
    for _ in 0..500 {
        let t = rng.gen_range(1..30);
        let r: Vec<f64> = (0..t).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..t).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let d: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.15)).collect();
        let (gamma, lambda, last) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0));
        let (a, tg) = ppo_gae(&r, &v, &d, last, gamma, lambda).unwrap();
        let o = gae_oracle(&r, &v, &d, last, gamma, lambda);
        for i in 0..t {
            assert!((a[i] - o[i]).abs() < 1e-10);
            assert!((tg[i] - (o[i] + v[i])).abs() < 1e-10);
        }
    }
}

fn log_softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    logits
        .data()
        .chunks(logits.shape()[1])
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            row.iter().map(|x| x - z).collect()
        })
        .collect()
}

const NO_EXTRAS: ClipCoeffs = ClipCoeffs { clip: 0.2, vf_coef: 0.0, ent_coef: 0.0 };

fn policy_loss(logits: &Tensor, actions: &[usize], old: &[f64], adv: &[f64], c: ClipCoeffs) -> (f64, f64, f64, Tensor) {
    let n = actions.len();
    let mut g = Graph::new(true);
    let l = g.leaf(logits.clone());
    let v = g.constant(Tensor::zeros(&[n]));
    let loss = ppo_clip_loss(&mut g, l, v, actions, old, adv, &vec![0.0; n], c).unwrap();
    let out = (g.value(loss.policy).item(), g.value(loss.entropy).item(), g.value(loss.total).item());
    g.backward(loss.total).unwrap();
    (out.0, out.1, out.2, g.grad(l).unwrap().clone())
}

#[test]
fn clip_loss_examples() {
    let mut rng = rng_from_seed(9);
    let logits = randn(&[4, 3], &mut rng);
    let lp = log_softmax_rows(&logits);
    let actions = [0, 2, 1, 1];
    let logp: Vec<f64> = actions.iter().enumerate().map(|(i, &a)| lp[i][a]).collect();
    let adv = [0.5, -1.0, 2.0, 0.25];

    // ratio 1 everywhere
    let (p, ent, _, _) = policy_loss(&logits, &actions, &logp, &adv, NO_EXTRAS);
    assert!((p + adv.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    let ent_oracle = -lp.iter().map(|r| r.iter().map(|l| l.exp() * l).sum::<f64>()).sum::<f64>() / 4.0;
    assert!((ent - ent_oracle).abs() < 1e-12);

    // ratio 2 with positive advantages: clip binds at 1.2 and gradients vanish
    let pos = [0.5, 1.0, 2.0, 0.25];
    let old: Vec<f64> = logp.iter().map(|l| l - 2f64.ln()).collect();
    let (p, _, _, grad) = policy_loss(&logits, &actions, &old, &pos, NO_EXTRAS);
    assert!((p + 1.2 * pos.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    assert!(grad.data().iter().all(|&g| g == 0.0), "{grad:?}");

    // uniform logits: entropy is ln |A|
    let (_, ent, _, _) = policy_loss(&Tensor::zeros(&[2, 4]), &[0, 3], &[0.0, 0.0], &[1.0, 1.0], NO_EXTRAS);
    assert!((ent - 4f64.ln()).abs() < 1e-12);

    let mut g = Graph::new(true);
    let l = g.leaf(logits.clone());
    let v = g.constant(Tensor::zeros(&[4]));
    assert!(ppo_clip_loss(&mut g, l, v, &actions, &[f64::NAN; 4], &adv, &[0.0; 4], NO_EXTRAS).is_err());
    assert!(ppo_clip_loss(&mut g, l, v, &actions[..3], &logp, &adv, &[0.0; 4], NO_EXTRAS).is_err());
}

#[test]
fn clip_loss_gradients_match_finite_differences() {
    let mut rng = rng_from_seed(10);
    let c = ClipCoeffs { clip: 0.2, vf_coef: 0.5, ent_coef: 0.01 };
    for _ in 0..10 {
        let logits = randn(&[5, 3], &mut rng);
        let values = randn(&[5], &mut rng);
        let actions: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        // old log-probs spread so some ratios sit inside and some outside the clip band
        let old: Vec<f64> = (0..5).map(|_| -rng.gen_range(0.3..2.5)).collect();
        let adv: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tg: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = check_inputs(&[logits, values], |g, v| {
            Ok(ppo_clip_loss(g, v[0], v[1], &actions, &old, &adv, &tg, c)?.total)
        });
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn normalized_advantages_have_unit_spread() {
    let mut a = vec![1.0, 2.0, 3.0, 10.0];
    normalize_advantages(&mut a);
    let m = a.iter().sum::<f64>() / 4.0;
    let v = a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
    assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-6);
}

fn gridbasic() -> EnvConfig {
    EnvConfig { kind: EnvKind::GridBasic, ..EnvConfig::default() }
}

#[test]
fn ppo_is_deterministic_and_drives_collection() {
    let cfg = PpoConfig {
        total_steps: 512,
        n_envs: 2,
        horizon: 256,
        minibatch: 64,
        epochs: 2,
        hidden: 16,
        seed: 4,
        ..PpoConfig::default()
    };
    let (m, sa, la) = train_ppo(&gridbasic(), &cfg, &mut |_| Ok(())).unwrap();
    let (_, sb, lb) = train_ppo(&gridbasic(), &cfg, &mut |_| Ok(())).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(la, lb);
    assert_eq!(la.updates.len(), 2);
    assert!(la.updates.iter().all(|u| u.entropy > 0.0 && u.entropy <= 3f64.ln() + 1e-12));
    assert!(!la.rows.is_empty());

    let mut policy = PpoPolicy { model: &m, store: &sa, greedy: false };
    let ds = collect(&mut policy, &gridbasic(), 3, 1).unwrap();
    assert_eq!(ds.trajectories.len(), 3);
    let hall = EnvConfig { kind: EnvKind::Hallway, ..EnvConfig::default() };
    assert!(collect(&mut policy, &hall, 1, 1).is_err());
}

#[test]
fn ppo_config_validation() {
    let bad = [
        PpoConfig { horizon: 2047, ..PpoConfig::default() },
        PpoConfig { minibatch: 4096, ..PpoConfig::default() },
        PpoConfig { n_envs: 0, ..PpoConfig::default() },
        PpoConfig { gamma: 1.5, ..PpoConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    PpoConfig::default().validate().unwrap();
}
