use super::*;
use crate::error::Error;
use crate::rng::rng_from_seed;
use crate::testutil::{check_params, randn};
use rand::Rng as _;

fn cfg(d: usize, heads: usize, layers: usize, gating: Gating) -> TransformerConfig {
    TransformerConfig {
        d_model: d,
        n_heads: heads,
        n_layers: layers,
        d_ff: 2 * d,
        context_len: 16,
        gating,
    }
}

#[test]
fn positional_encoding_examples() {
    let pe = positional_encoding(3, 4).unwrap();
    assert_eq!(pe.data()[0..4], [0.0, 1.0, 0.0, 1.0]);
    assert!((pe.get(&[1, 0]) - 0.841471).abs() < 1e-6);
    assert!(matches!(positional_encoding(3, 5), Err(Error::Dimension(_))));
    let mut rng = rng_from_seed(0);
    for _ in 0..20 {
        let t = rng.gen_range(1..40);
        let d = 2 * rng.gen_range(1..20);
        let pe = positional_encoding(t, d).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pe, positional_encoding(t, d).unwrap());
    }
}

#[test]
fn causal_mask_counts() {
    assert!(causal_mask(1).allowed(0, 0));
    let m3 = causal_mask(3);
    assert_eq!(m3.count_allowed(), 6);
    assert!(m3.allowed(2, 0) && !m3.allowed(0, 2));
    let mut rng = rng_from_seed(1);
    for _ in 0..50 {
        let t = rng.gen_range(1..=64);
        // counting oracle: row i has i+1 allowed keys
        let expect: usize = (0..t).map(|i| i + 1).sum();
        assert_eq!(causal_mask(t).count_allowed(), expect);
        assert_eq!(expect, t * (t + 1) / 2);
    }
}

#[test]
fn config_validation() {
    assert!(cfg(8, 3, 1, Gating::GruGate).validate().is_err());
    assert!(cfg(8, 2, 1, Gating::GruGate).validate().is_ok());
    assert_eq!("gru".parse::<Gating>().unwrap(), Gating::GruGate);
    assert!("nope".parse::<Gating>().is_err());
}

fn identity_attention(store: &mut ParamStore, d: usize) -> AttentionParams {
    let mut rng = rng_from_seed(0);
    let p = AttentionParams::init(store, "a", d, &mut rng);
    for lin in [p.q, p.k, p.v, p.out] {
        let w = store.get_mut(lin.w);
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
    }
    p
}

#[test]
fn attention_single_token_returns_projected_value() {
    let mut rng = rng_from_seed(2);
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, "a", 4, &mut rng);
    let x = randn(&[1, 4], &mut rng);
    let mut g = Graph::new(true);
    let xv = g.constant(x);
    let out = multi_head_attention(&mut g, &store, xv, &p, 2, &SeqLayout::single(1)).unwrap();
    let v = p.v.forward(&mut g, &store, xv).unwrap();
    let expect = p.out.forward(&mut g, &store, v).unwrap();
    assert_eq!(g.value(out), g.value(expect));
}

#[test]
fn attention_two_token_hand_oracle() {
    let mut store = ParamStore::new();
    let p = identity_attention(&mut store, 2);
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let mut g = Graph::new(true);
    let xv = g.constant(x);
    let out = multi_head_attention(&mut g, &store, xv, &p, 1, &SeqLayout::single(2)).unwrap();
    let o = g.value(out).data();
    // token 0 attends only itself
    assert!((o[0] - 1.0).abs() < 1e-9 && o[1].abs() < 1e-9);
    // token 1: scores (x1·x0, x1·x1)/sqrt(2) = (0, 1/sqrt2)
    let e = (1.0 / 2f64.sqrt()).exp();
    let (p0, p1) = (1.0 / (1.0 + e), e / (1.0 + e));
    assert!((o[2] - p0).abs() < 1e-9);
    assert!((o[3] - p1).abs() < 1e-9);
}

#[test]
fn attention_rows_sum_to_one_over_unmasked() {
    let mut rng = rng_from_seed(3);
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, "a", 8, &mut rng);
    let layout = SeqLayout::causal(3, 5, vec![0, 2, 4]);
    let x = randn(&[15, 8], &mut rng);
    let mut g = Graph::new(true);
    let xv = g.constant(x);
    let q = p.q.forward(&mut g, &store, xv).unwrap();
    let k = p.k.forward(&mut g, &store, xv).unwrap();
    let v = p.v.forward(&mut g, &store, xv).unwrap();
    let a = g.attention(q, k, v, &layout.attention(4)).unwrap();
    let probs = g.attention_probs(a).unwrap();
    for row in probs.chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    // padded keys never receive weight from real queries
    for s in 0..3 {
        for h in 0..4 {
            for i in layout.key_start[s]..5 {
                for j in 0..layout.key_start[s] {
                    assert_eq!(probs[((s * 4 + h) * 5 + i) * 5 + j], 0.0);
                }
            }
        }
    }
}

fn gate_store(d: usize, seed: u64) -> (ParamStore, GateParams) {
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::new();
    let p = GateParams::init(&mut store, "g", d, &mut rng);
    (store, p)
}

#[test]
fn gru_gate_limits() {
    let mut rng = rng_from_seed(4);
    let (mut store, p) = gate_store(6, 5);
    let x = randn(&[3, 6], &mut rng);
    let y = randn(&[3, 6], &mut rng);

    store.get_mut(p.bg).data_mut().iter_mut().for_each(|v| *v = 60.0);
    let mut g = Graph::new(true);
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = gru_gate(&mut g, &store, xv, yv, &p).unwrap();
    for (a, b) in g.value(out).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    store.get_mut(p.bg).data_mut().iter_mut().for_each(|v| *v = -100.0);
    let mut g = Graph::new(true);
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = gru_gate(&mut g, &store, xv, yv, &p).unwrap();
    // h computed independently
    let hw = |g: &mut Graph, a, id| {
        let w = g.param(&store, id);
        g.matmul(a, w).unwrap()
    };
    let (yr, xr) = (hw(&mut g, yv, p.wr), hw(&mut g, xv, p.ur));
    let rs = g.add(yr, xr).unwrap();
    let r = g.sigmoid(rs).unwrap();
    let rx = g.mul(r, xv).unwrap();
    let (yg, rxu) = (hw(&mut g, yv, p.wg), hw(&mut g, rx, p.ug));
    let hs = g.add(yg, rxu).unwrap();
    let h = g.tanh(hs).unwrap();
    for (a, b) in g.value(out).data().iter().zip(g.value(h).data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut g = Graph::new(true);
    let xv = g.constant(Tensor::zeros(&[2, 6]));
    let yv = g.constant(Tensor::zeros(&[3, 6]));
    assert!(matches!(gru_gate(&mut g, &store, xv, yv, &p), Err(Error::Dimension(_))));
}

#[test]
fn gru_gate_gradients_match_finite_differences() {
    for seed in 0..10 {
        let (mut store, p) = gate_store(4, 10 + seed);
        let mut rng = rng_from_seed(20 + seed);
        store.get_mut(p.bg).data_mut().copy_from_slice(randn(&[4], &mut rng).data());
        let x = randn(&[3, 4], &mut rng);
        let y = randn(&[3, 4], &mut rng);
        let w = randn(&[3, 4], &mut rng);
        let e = check_params(&store, |g, s| {
            let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
            let o = gru_gate(g, s, xv, yv, &p)?;
            let wv = g.constant(w.clone());
            let m = g.mul(o, wv)?;
            g.sum(m)
        });
        assert!(e < 1e-4, "{e}");
    }
}

fn block_store(c: &TransformerConfig, seed: u64) -> (ParamStore, TransformerStack) {
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::new();
    let stack = TransformerStack::init(&mut store, "t", *c, &mut rng).unwrap();
    (store, stack)
}

#[test]
fn residual_block_with_zero_sublayer_outputs_is_identity() {
    let c = cfg(8, 2, 1, Gating::ResidualAdd);
    let (mut store, stack) = block_store(&c, 1);
    let b = &stack.blocks[0];
    for id in [b.attn.out.w, b.attn.out.b, b.ff2.w, b.ff2.b] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = rng_from_seed(2);
    let x = randn(&[5, 8], &mut rng);
    let mut g = Graph::new(true);
    let xv = g.constant(x.clone());
    let y = transformer_block(&mut g, &store, xv, b, &c, &SeqLayout::single(5)).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn fresh_gated_block_stays_near_identity() {
    let c = cfg(16, 4, 1, Gating::GruGate);
    let mut rng = rng_from_seed(5);
    for seed in 0..10 {
        let (store, stack) = block_store(&c, seed);
        let mut x = randn(&[6, 16], &mut rng);
        for row in x.data_mut().chunks_mut(16) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let mut g = Graph::new(true);
        let xv = g.constant(x.clone());
        let y = transformer_block(&mut g, &store, xv, &stack.blocks[0], &c, &SeqLayout::single(6)).unwrap();
        let y = g.value(y);
        for (yr, xr) in y.data().chunks(16).zip(x.data().chunks(16)) {
            let dev = yr.iter().zip(xr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(dev < 0.5, "relative deviation {dev}");
        }
    }
}

fn stack_output(store: &ParamStore, stack: &TransformerStack, x: &Tensor) -> Tensor {
    let t = x.shape()[0];
    let mut g = Graph::new(true);
    let xv = g.constant(x.clone());
    let y = stack.forward(&mut g, store, xv, &SeqLayout::single(t)).unwrap();
    g.value(y).clone()
}

#[test]
fn five_layer_stack_is_causal() {
    for gating in [Gating::GruGate, Gating::ResidualAdd] {
        let c = cfg(8, 2, 5, gating);
        let (store, stack) = block_store(&c, 7);
        let mut rng = rng_from_seed(8);
        for _ in 0..20 {
            let t = rng.gen_range(2..9);
            let cut = rng.gen_range(0..t - 1);
            let x = randn(&[t, 8], &mut rng);
            let mut x2 = x.clone();
            for v in &mut x2.data_mut()[(cut + 1) * 8..] {
                *v += rng.gen_range(-3.0..3.0);
            }
            let (a, b) = (stack_output(&store, &stack, &x), stack_output(&store, &stack, &x2));
            assert_eq!(a.data()[..(cut + 1) * 8], b.data()[..(cut + 1) * 8]);
        }
    }
}

fn enc(seed: u64) -> (ParamStore, EncoderParams) {
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::new();
    let e = EncoderParams::init(
        &mut store,
        "enc",
        EncoderConfig {
            obs_shape: [3, 4, 5],
            filters1: 4,
            filters2: 6,
            d_model: 8,
        },
        &mut rng,
    )
    .unwrap();
    (store, e)
}

#[test]
fn encoder_shares_weights_and_shapes() {
    let (store, e) = enc(1);
    let mut rng = rng_from_seed(2);
    let f = randn(&[3, 4, 5], &mut rng);
    let other = randn(&[3, 4, 5], &mut rng);
    let mut data = f.data().to_vec();
    data.extend_from_slice(other.data());
    data.extend_from_slice(f.data());
    let frames = Tensor::new(vec![3, 3, 4, 5], data).unwrap();
    let mut g = Graph::new(true);
    let fv = g.constant(frames);
    let y = encode_observations(&mut g, &store, fv, &e).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[3, 8]);
    assert_eq!(y.data()[0..8], y.data()[16..24]);

    let bad = g.constant(Tensor::zeros(&[1, 2, 4, 5]));
    assert!(matches!(encode_observations(&mut g, &store, bad, &e), Err(Error::Dimension(_))));
}

#[test]
fn encoder_gradients_reach_conv_kernels() {
    let (store, e) = enc(3);
    let mut rng = rng_from_seed(4);
    let frames = randn(&[2, 3, 4, 5], &mut rng);
    let mut g = Graph::new(true);
    let fv = g.constant(frames);
    let y = encode_observations(&mut g, &store, fv, &e).unwrap();
    let y2 = g.mul(y, y).unwrap();
    let l = g.sum(y2).unwrap();
    g.backward(l).unwrap();
    let grads = g.param_grads(&store);
    for id in [e.conv1_k, e.conv2_k] {
        assert!(grads.get(id).unwrap().max_abs() > 0.0);
    }
}

#[test]
fn positions_count_from_first_real_slot() {
    let layout = SeqLayout::causal(2, 4, vec![0, 2]);
    let pos = layout.positions(4).unwrap();
    let pe = positional_encoding(4, 4).unwrap();
    // sequence 1, slot 2 is its first real slot -> position 0
    assert_eq!(pos.data()[(4 + 2) * 4..(4 + 3) * 4], pe.data()[0..4]);
    assert_eq!(pos.data()[(4 + 3) * 4..(4 + 4) * 4], pe.data()[4..8]);
}
