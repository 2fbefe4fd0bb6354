use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stcat_tensor::nn::{AttnInput, MultiHeadAttention};
use stcat_tensor::{grad_check, AttnShape, Graph, ParamStore, Tape, Tensor, TensorError, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Attention written with primitive ops only, one (batch, head) at a time.
fn composed_attention(tape: &mut Tape<f64>, q: Var, k: Var, v: Var, s: AttnShape) -> stcat_tensor::Result<Var> {
    let c = tape.shape(q)[1];
    let d = c / s.heads;
    let mut rows = Vec::new();
    for b in 0..s.batches {
        let qb = tape.slice(q, 0, b * s.q_len, s.q_len)?;
        let kb = tape.slice(k, 0, b * s.k_len, s.k_len)?;
        let vb = tape.slice(v, 0, b * s.k_len, s.k_len)?;
        let mut heads = Vec::new();
        for h in 0..s.heads {
            let qh = tape.slice(qb, 1, h * d, d)?;
            let kh = tape.slice(kb, 1, h * d, d)?;
            let vh = tape.slice(vb, 1, h * d, d)?;
            let kt = tape.transpose(kh)?;
            let sc = tape.matmul(qh, kt)?;
            let sc = tape.scale(sc, 1.0 / (d as f64).sqrt())?;
            let p = tape.softmax(sc, 1)?;
            heads.push(tape.matmul(p, vh)?);
        }
        rows.push(tape.concat(&heads, 1)?);
    }
    tape.concat(&rows, 0)
}

#[test]
fn fused_attention_matches_composed_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = AttnShape {
        batches: 3,
        heads: 2,
        q_len: 2,
        k_len: 5,
    };
    let q = random(&[6, 8], &mut rng);
    let k = random(&[15, 8], &mut rng);
    let v = random(&[15, 8], &mut rng);
    let w = random(&[6, 8], &mut rng);

    let run = |fused: bool| {
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (
            tape.leaf(q.clone(), true),
            tape.leaf(k.clone(), true),
            tape.leaf(v.clone(), true),
        );
        let out = if fused {
            tape.attention(qv, kv, vv, s).unwrap()
        } else {
            composed_attention(&mut tape, qv, kv, vv, s).unwrap()
        };
        let wv = tape.constant(w.clone());
        let l = tape.mul(out, wv).unwrap();
        let l = tape.sum(l).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(out).clone(), g.wrt(qv), g.wrt(kv), g.wrt(vv))
    };
    let a = run(true);
    let b = run(false);
    for (x, y) in [(a.0, b.0), (a.1, b.1), (a.2, b.2), (a.3, b.3)] {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-12, "{p} vs {q}");
        }
    }
}

#[test]
fn fused_attention_gradients_match_finite_differences() {
    let s = AttnShape {
        batches: 2,
        heads: 2,
        q_len: 3,
        k_len: 4,
    };
    for trial in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + trial);
        let q = random(&[6, 4], &mut rng);
        let k = random(&[8, 4], &mut rng);
        let v = random(&[8, 4], &mut rng);
        let w = random(&[6, 4], &mut rng);
        let loss = |tape: &mut Tape<f64>, out: Var| {
            let wv = tape.constant(w.clone());
            let p = tape.mul(out, wv)?;
            tape.sum(p)
        };
        let (kc, vc, qc) = (k.clone(), v.clone(), q.clone());
        let rq = grad_check(
            |t, x| {
                let (a, b) = (t.constant(kc.clone()), t.constant(vc.clone()));
                let o = t.attention(x, a, b, s)?;
                loss(t, o)
            },
            &q,
            1e-6,
        )
        .unwrap();
        let rk = grad_check(
            |t, x| {
                let (a, b) = (t.constant(qc.clone()), t.constant(vc.clone()));
                let o = t.attention(a, x, b, s)?;
                loss(t, o)
            },
            &k,
            1e-6,
        )
        .unwrap();
        let rv = grad_check(
            |t, x| {
                let (a, b) = (t.constant(qc.clone()), t.constant(kc.clone()));
                let o = t.attention(a, b, x, s)?;
                loss(t, o)
            },
            &v,
            1e-6,
        )
        .unwrap();
        for r in [rq, rk, rv] {
            assert!(r.max_rel_error < 1e-6, "{r:?}");
        }
    }
}

fn identity(dim: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 })
}

fn mha(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = MultiHeadAttention::new(&mut store, "attn", dim, heads, &mut rng).unwrap();
    (store, m)
}

#[test]
fn single_distinct_key_returns_projected_value() {
    let (store, m) = mha(8, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let key_row = random(&[1, 8], &mut rng);
    let keys = Tensor::from_fn(vec![4, 8], |i| key_row.data()[i % 8]);
    let mut expected: Option<Vec<f64>> = None;
    for trial in 0..3 {
        let mut g = Graph::new(&store, false);
        let q = g.constant(random(&[3, 8], &mut rng));
        let k = g.constant(keys.clone());
        let out = m
            .forward(
                &mut g,
                &AttnInput {
                    queries: q,
                    keys: k,
                    values: k,
                    query_pos: None,
                    key_pos: None,
                    batches: 1,
                },
            )
            .unwrap();
        // Projected value: (key W_v + b_v) W_o + b_o
        let kv = g.constant(key_row.clone());
        let pv = m.v.forward(&mut g, kv).unwrap();
        let pv = m.out.forward(&mut g, pv).unwrap();
        let target = g.value(pv).data().to_vec();
        for r in 0..3 {
            for (a, b) in g.value(out.output).row(r).iter().zip(&target) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        if let Some(e) = &expected {
            assert_eq!(e, &target, "trial {trial}");
        }
        expected = Some(target);
    }
}

#[test]
fn extreme_key_scaling_selects_one_value_row() {
    let (mut store, m) = mha(4, 1, 7);
    for lin in [&m.q, &m.k, &m.v, &m.out] {
        store.set(lin.weight, identity(4)).unwrap();
    }
    // keys are one-hot scaled by a large factor; the query aligns with key 2
    let big = 200.0;
    let keys = Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { big } else { 0.0 });
    let values = Tensor::from_f64(
        vec![4, 4],
        &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12., 13., 14., 15., 16.],
    )
    .unwrap();
    let query = Tensor::from_f64(vec![1, 4], &[0.0, 0.0, 1.0, 0.0]).unwrap();
    let mut g = Graph::new(&store, false);
    let (q, k, v) = (g.constant(query), g.constant(keys), g.constant(values.clone()));
    let out = m
        .forward(
            &mut g,
            &AttnInput {
                queries: q,
                keys: k,
                values: v,
                query_pos: None,
                key_pos: None,
                batches: 1,
            },
        )
        .unwrap();
    // explicit softmax over logits big/2 * one-hot(2)
    let logits = [0.0, 0.0, big / 2.0, 0.0];
    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let expect: Vec<f64> = (0..4)
        .map(|c| (0..4).map(|j| e[j] / z * values.data()[j * 4 + c]).sum())
        .collect();
    let got = g.value(out.output).data();
    for c in 0..4 {
        assert!((got[c] - expect[c]).abs() < 1e-9);
        assert!((got[c] - values.data()[8 + c]).abs() < 1e-6);
    }
}

#[test]
fn heads_must_divide_channels() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = MultiHeadAttention::new(&mut store, "a", 10, 4, &mut rng).unwrap_err();
    assert!(matches!(err, TensorError::Config(_)));
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, m) = mha(8, 4, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let mut g = Graph::new(&store, false);
        let q = g.constant(random(&[6, 8], &mut rng));
        let k = g.constant(random(&[10, 8], &mut rng));
        let out = m
            .forward(
                &mut g,
                &AttnInput {
                    queries: q,
                    keys: k,
                    values: k,
                    query_pos: None,
                    key_pos: None,
                    batches: 2,
                },
            )
            .unwrap();
        let (s, probs) = g.attention_probs(out.weights).unwrap();
        assert_eq!(
            s,
            AttnShape {
                batches: 2,
                heads: 4,
                q_len: 3,
                k_len: 5
            }
        );
        for row in probs.chunks(s.k_len) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn positional_terms_reach_queries_and_keys_only() {
    let (store, m) = mha(4, 2, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let q = random(&[2, 4], &mut rng);
    let k = random(&[3, 4], &mut rng);
    let pos = random(&[3, 4], &mut rng);
    let mut g = Graph::new(&store, false);
    let (qv, kv, pv) = (g.constant(q), g.constant(k.clone()), g.constant(pos.clone()));
    let with_pos = m
        .forward(
            &mut g,
            &AttnInput {
                queries: qv,
                keys: kv,
                values: kv,
                query_pos: None,
                key_pos: Some(pv),
                batches: 1,
            },
        )
        .unwrap();
    // equivalent: keys + pos as keys, raw keys as values
    let shifted = Tensor::from_fn(vec![3, 4], |i| k.data()[i] + pos.data()[i]);
    let sv = g.constant(shifted);
    let manual = m
        .forward(
            &mut g,
            &AttnInput {
                queries: qv,
                keys: sv,
                values: kv,
                query_pos: None,
                key_pos: None,
                batches: 1,
            },
        )
        .unwrap();
    assert_eq!(g.value(with_pos.output), g.value(manual.output));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn output_invariant_to_key_value_permutation(seed in 0u64..10_000, rot in 1usize..5) {
        let (store, m) = mha(8, 2, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(&[3, 8], &mut rng);
        let kv = random(&[5, 8], &mut rng);
        let perm: Vec<usize> = (0..5).map(|i| (i + rot) % 5).collect();
        let kv_perm = Tensor::from_fn(vec![5, 8], |i| kv.data()[perm[i / 8] * 8 + i % 8]);
        let run = |keys: &Tensor<f64>| {
            let mut g = Graph::new(&store, false);
            let (qv, kv) = (g.constant(q.clone()), g.constant(keys.clone()));
            let o = m.forward(&mut g, &AttnInput { queries: qv, keys: kv, values: kv, query_pos: None, key_pos: None, batches: 1 }).unwrap();
            g.value(o.output).clone()
        };
        let a = run(&kv);
        let b = run(&kv_perm);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
