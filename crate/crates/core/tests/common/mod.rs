#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stcat::embedder::{QueryTokens, VideoClip};
use stcat::ModelConfig;
use stcat_tensor::{ParamId, ParamStore, Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_clip(cfg: &ModelConfig, seed: u64) -> VideoClip {
    let mut r = rng(seed);
    let n = cfg.frames * cfg.height * cfg.width * 3;
    VideoClip::new(cfg.frames, cfg.height, cfg.width, (0..n).map(|_| r.gen()).collect()).unwrap()
}

pub fn tokens(cfg: &ModelConfig, ids: &[usize]) -> QueryTokens {
    QueryTokens::new(ids.to_vec(), cfg.vocab_size).unwrap()
}

pub fn set<F: Real>(store: &mut ParamStore<F>, id: ParamId, f: impl Fn(usize) -> f64) {
    let shape = store.get(id).shape().to_vec();
    store.set(id, Tensor::from_fn(shape, |i| F::lit(f(i)))).unwrap();
}

pub fn set_named<F: Real>(store: &mut ParamStore<F>, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    set(store, id, f);
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central-difference check of `loss` with respect to every scalar of the
/// listed parameters; returns the largest relative error.
pub fn fd_param_check(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    loss: impl Fn(&mut stcat_tensor::Graph<f64>) -> stcat_tensor::Var,
) -> f64 {
    let eps = 1e-6;
    let mut g = stcat_tensor::Graph::new(store, true);
    let l = loss(&mut g);
    let grads = g.backward(l).unwrap();
    let all = g.param_grads(&grads);
    let value = |s: &ParamStore<f64>| {
        let mut g = stcat_tensor::Graph::new(s, false);
        let l = loss(&mut g);
        g.value(l).item()
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let plus = value(&work);
            work.get_mut(id).data_mut()[i] = orig - eps;
            let minus = value(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(stcat_tensor::rel_error(all[id.0].data()[i], numeric));
        }
    }
    worst
}

/// Sum of squares of a variable, as a scalar loss.
pub fn sum_sq(g: &mut stcat_tensor::Graph<f64>, v: stcat_tensor::Var) -> stcat_tensor::Var {
    let s = g.mul(v, v).unwrap();
    g.sum(s).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, as a scalar loss.
pub fn probe(g: &mut stcat_tensor::Graph<f64>, v: stcat_tensor::Var, seed: u64) -> stcat_tensor::Var {
    let shape = g.shape(v).to_vec();
    let mut r = rng(seed);
    let w = Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0));
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}

/// Central-difference check of `loss` with respect to an input tensor fed as
/// a leaf; returns the largest relative error.
pub fn fd_input_check(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    loss: impl Fn(&mut stcat_tensor::Graph<f64>, stcat_tensor::Var) -> stcat_tensor::Var,
) -> f64 {
    let eps = 1e-6;
    let mut g = stcat_tensor::Graph::new(store, true);
    let v = g.leaf(x.clone(), true);
    let l = loss(&mut g, v);
    let analytic = g.backward(l).unwrap().wrt(v);
    let value = |t: Tensor<f64>| {
        let mut g = stcat_tensor::Graph::new(store, false);
        let v = g.leaf(t, false);
        let l = loss(&mut g, v);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (value(plus) - value(minus)) / (2.0 * eps);
        worst = worst.max(stcat_tensor::rel_error(analytic.data()[i], numeric));
    }
    worst
}

/// A context with random features for `cfg`, built without the encoder.
pub fn random_context(
    g: &mut stcat_tensor::Graph<f64>,
    cfg: &ModelConfig,
    seed: u64,
) -> stcat::encoder::EncodedContext {
    let mut r = rng(seed);
    let (t, c) = (cfg.frames, cfg.channels);
    let nv = (cfg.height / cfg.patch) * (cfg.width / cfg.patch);
    let ns = 5;
    let k = nv + ns;
    let mut rand = |shape: Vec<usize>| Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0));
    let features = g.constant(rand(vec![t * k, c]));
    let feature_pos = g.constant(rand(vec![t * k, c]));
    let global = g.constant(rand(vec![1, c]));
    let local = g.constant(rand(vec![t, c]));
    stcat::encoder::EncodedContext {
        features,
        feature_pos,
        global,
        local,
        frames: t,
        visual_tokens: nv,
        text_tokens: ns,
    }
}
