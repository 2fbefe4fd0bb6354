mod common;

use common::*;
use rand::Rng;
use stcat::config::AnchorSpace;
use stcat::decoder::{apply_offset, attention_map, BranchKind, Decoder};
use stcat::encoder::EncodedContext;
use stcat::layers::Dropout;
use stcat::objectives::Heads;
use stcat::template::Template;
use stcat::ModelConfig;
use stcat_tensor::{Graph, ParamStore, Tensor};

struct Fixture {
    decoder: Decoder,
    heads: Heads,
    store: ParamStore<f64>,
}

fn fixture(cfg: &ModelConfig) -> Fixture {
    let mut store = ParamStore::new();
    let mut r = rng(21);
    let decoder = Decoder::new(&mut store, cfg, &mut r).unwrap();
    let heads = Heads::new(&mut store, cfg, &mut r).unwrap();
    Fixture { decoder, heads, store }
}

fn template(g: &mut Graph<f64>, seed: u64) -> Template {
    let mut r = rng(seed);
    let content = g.constant(Tensor::from_fn(vec![1, 16], |_| r.gen_range(-1.0..1.0)));
    let position = g.constant(Tensor::from_fn(vec![4, 4], |_| r.gen_range(0.1..0.9)));
    Template { content, position }
}

fn rows(g: &Graph<f64>, v: stcat_tensor::Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn queries_share_content_and_differ_in_position() {
    let cfg = ModelConfig::micro();
    let f = fixture(&cfg);
    let mut g = Graph::new(&f.store, false);
    let tpl = template(&mut g, 1);
    for kind in [BranchKind::Box, BranchKind::Time] {
        let q = f.decoder.init_queries(&mut g, &tpl, kind).unwrap();
        assert_eq!(g.shape(q.content), [4, 16]);
        assert_eq!(g.shape(q.position), [4, 16]);
        assert_eq!(g.shape(q.anchors), [4, 4]);
        let c = rows(&g, q.content);
        let tc = g.value(tpl.content).data().to_vec();
        for row in &c {
            assert_eq!(
                row.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                tc.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
        let p = rows(&g, q.position);
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(p[a], p[b]);
            }
        }
        assert_eq!(g.value(q.anchors).data(), g.value(tpl.position).data());
    }
}

#[test]
fn cross_attention_stays_within_each_frame() {
    let cfg = ModelConfig {
        decoder_self_attention: false,
        ..ModelConfig::micro()
    };
    let f = fixture(&cfg);
    let run = |bump: f64| {
        let mut g = Graph::new(&f.store, false);
        let mut ctx = random_context(&mut g, &cfg, 3);
        // Perturb only the tokens of frame 2.
        let mut feats = g.value(ctx.features).clone();
        let k = ctx.tokens_per_frame();
        feats.data_mut()[2 * k * 16..3 * k * 16]
            .iter_mut()
            .for_each(|v| *v += bump);
        ctx.features = g.constant(feats);
        let tpl = template(&mut g, 1);
        let out = f
            .decoder
            .decode(&mut g, &tpl, &ctx, &f.heads.bbox, &mut Dropout::off())
            .unwrap();
        let maps: Vec<_> = out
            .box_attention
            .iter()
            .map(|&a| attention_map(&g, a).unwrap())
            .collect();
        (rows(&g, out.bbox_feats), rows(&g, out.time_feats), maps)
    };
    let (b0, t0, maps) = run(0.0);
    let (b1, t1, _) = run(0.7);
    for t in 0..4 {
        if t == 2 {
            assert_ne!(b0[t], b1[t]);
            assert_ne!(t0[t], t1[t]);
        } else {
            assert_eq!(b0[t], b1[t], "box frame {t}");
            assert_eq!(t0[t], t1[t], "time frame {t}");
        }
    }
    for map in maps {
        assert_eq!(map.len(), 4);
        assert!(map.iter().all(|r| r.len() == 21));
    }
}

#[test]
fn self_attention_couples_frames() {
    let cfg = ModelConfig::micro();
    let f = fixture(&cfg);
    let run = |bump: f64| {
        let mut g = Graph::new(&f.store, false);
        let mut ctx = random_context(&mut g, &cfg, 3);
        let mut feats = g.value(ctx.features).clone();
        feats.data_mut()[..21 * 16].iter_mut().for_each(|v| *v += bump);
        ctx.features = g.constant(feats);
        let tpl = template(&mut g, 1);
        let out = f
            .decoder
            .decode(&mut g, &tpl, &ctx, &f.heads.bbox, &mut Dropout::off())
            .unwrap();
        rows(&g, out.time_feats)
    };
    assert_ne!(run(0.0)[3], run(0.7)[3]);
}

#[test]
fn zero_head_keeps_anchors() {
    for depth in [1, 2, 3] {
        let cfg = ModelConfig {
            depth,
            ..ModelConfig::micro()
        };
        let f = fixture(&cfg);
        let mut g = Graph::new(&f.store, false);
        let ctx = random_context(&mut g, &cfg, 4);
        let tpl = template(&mut g, 2);
        let q = f.decoder.init_queries(&mut g, &tpl, BranchKind::Box).unwrap();
        let (next, _) = f
            .decoder
            .decoder_block(
                &mut g,
                BranchKind::Box,
                0,
                &q,
                &ctx,
                Some(&f.heads.bbox),
                &mut Dropout::off(),
            )
            .unwrap();
        assert_eq!(g.value(next.anchors).data(), g.value(tpl.position).data());
        let out = f
            .decoder
            .decode(&mut g, &tpl, &ctx, &f.heads.bbox, &mut Dropout::off())
            .unwrap();
        assert_eq!(
            g.value(out.anchors).data(),
            g.value(tpl.position).data(),
            "depth {depth}"
        );
        assert_eq!(out.aux_boxes.len(), depth - 1);
        assert_eq!(out.box_attention.len(), depth);
        assert_eq!(out.time_attention.len(), depth);
    }
}

#[test]
fn time_branch_never_moves_anchors() {
    let cfg = ModelConfig::micro();
    let f = fixture(&cfg);
    let mut store = f.store.clone();
    set(&mut store, f.heads.bbox.last().weight, |i| {
        ((i * 7 % 11) as f64 - 5.0) * 0.3
    });
    let mut g = Graph::new(&store, false);
    let ctx = random_context(&mut g, &cfg, 4);
    let tpl = template(&mut g, 2);
    let q = f.decoder.init_queries(&mut g, &tpl, BranchKind::Time).unwrap();
    let (next, _) = f
        .decoder
        .decoder_block(
            &mut g,
            BranchKind::Time,
            0,
            &q,
            &ctx,
            Some(&f.heads.bbox),
            &mut Dropout::off(),
        )
        .unwrap();
    assert_eq!(next.anchors, q.anchors);
    assert_eq!(next.position, q.position);

    let qb = f.decoder.init_queries(&mut g, &tpl, BranchKind::Box).unwrap();
    let (moved, _) = f
        .decoder
        .decoder_block(
            &mut g,
            BranchKind::Box,
            0,
            &qb,
            &ctx,
            Some(&f.heads.bbox),
            &mut Dropout::off(),
        )
        .unwrap();
    assert_ne!(g.value(moved.anchors).data(), g.value(tpl.position).data());
}

#[test]
fn refined_anchors_stay_in_the_unit_square() {
    for space in [AnchorSpace::Plain, AnchorSpace::Logit] {
        let cfg = ModelConfig {
            depth: 3,
            anchor_space: space,
            ..ModelConfig::micro()
        };
        let f = fixture(&cfg);
        let mut store = f.store.clone();
        let mut r = rng(5);
        let big: Vec<f64> = (0..16 * 4).map(|_| r.gen_range(-20.0..20.0)).collect();
        set(&mut store, f.heads.bbox.last().weight, |i| big[i]);
        let mut g = Graph::new(&store, false);
        let ctx = random_context(&mut g, &cfg, 6);
        let tpl = template(&mut g, 3);
        let out = f
            .decoder
            .decode(&mut g, &tpl, &ctx, &f.heads.bbox, &mut Dropout::off())
            .unwrap();
        let boxes = f.heads.box_head(&mut g, out.bbox_feats, out.anchors).unwrap();
        for v in out.aux_boxes.iter().chain([&out.anchors, &boxes]) {
            assert!(
                g.value(*v).data().iter().all(|&x| (0.0..=1.0).contains(&x)),
                "{space:?}"
            );
        }
    }
}

#[test]
fn zero_offset_is_identity_in_both_spaces() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, false);
    let a = g.constant(Tensor::from_f64(vec![2, 4], &[0.1, 0.5, 0.9, 0.3, 0.25, 0.75, 0.05, 0.6]).unwrap());
    let zero = g.constant(Tensor::zeros(vec![2, 4]));
    let plain = apply_offset(&mut g, a, zero, AnchorSpace::Plain).unwrap();
    assert_eq!(g.value(plain).data(), g.value(a).data());
    let logit = apply_offset(&mut g, a, zero, AnchorSpace::Logit).unwrap();
    assert!(max_abs_diff(g.value(logit).data(), g.value(a).data()) < 1e-12);
    let d = g.constant(Tensor::full(vec![2, 4], 0.2));
    let plain = apply_offset(&mut g, a, d, AnchorSpace::Plain).unwrap();
    let expect = [0.3, 0.7, 1.0, 0.5, 0.45, 0.95, 0.25, 0.8];
    assert!(max_abs_diff(g.value(plain).data(), &expect) < 1e-12);
}

#[test]
fn cross_attention_rows_sum_to_one() {
    let cfg = ModelConfig::micro();
    let f = fixture(&cfg);
    let mut g = Graph::new(&f.store, false);
    let ctx: EncodedContext = random_context(&mut g, &cfg, 8);
    let tpl = template(&mut g, 4);
    let out = f
        .decoder
        .decode(&mut g, &tpl, &ctx, &f.heads.bbox, &mut Dropout::off())
        .unwrap();
    for &a in out.box_attention.iter().chain(&out.time_attention) {
        let (shape, probs) = g.attention_probs(a).unwrap();
        assert_eq!((shape.batches, shape.q_len, shape.k_len), (4, 1, 21));
        for row in probs.chunks(shape.k_len) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        for row in attention_map(&g, a).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_gradients_match_finite_differences() {
    let cfg = ModelConfig::micro();
    let f = fixture(&cfg);
    let mut store = f.store.clone();
    // Nonzero head so the refinement path carries gradient.
    set(&mut store, f.heads.bbox.last().weight, |i| {
        ((i * 5 % 13) as f64 - 6.0) * 0.01
    });
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, n, _)| n.starts_with("decoder.") || n.starts_with("head.bbox"))
        .map(|(id, _, _)| id)
        .collect();
    let err = fd_param_check(&store, &ids, |g| {
        let ctx = random_context(g, &cfg, 9);
        let tpl = template(g, 5);
        let out = f
            .decoder
            .decode(g, &tpl, &ctx, &f.heads.bbox, &mut Dropout::off())
            .unwrap();
        let boxes = f.heads.box_head(g, out.bbox_feats, out.anchors).unwrap();
        let a = probe(g, boxes, 1);
        let b = probe(g, out.time_feats, 2);
        g.add(a, b).unwrap()
    });
    assert!(err < 1e-5, "{err}");
}
