//! Single-sample AdamW training loop with periodic checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stcat_tensor::{AdamState, AdamW, Graph, ParamStore, Tensor, TensorError};

use crate::config::ModelConfig;
use crate::embedder::{QueryTokens, VideoClip};
use crate::error::{Result, StcatError};
use crate::layers::Dropout;
use crate::model::Stcat;
use crate::objectives::{LossBreakdown, Target};
use crate::workbench::checkpoint::Checkpoint;
use crate::workbench::dataset::{Dataset, Sample};

pub const LOG_FILE: &str = "train_log.jsonl";

/// A sample prepared for the model.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub clip: VideoClip,
    pub tokens: QueryTokens,
    pub target: Target,
}

/// Checks that a sample's dimensions fit the model and names every mismatch.
pub fn check_compatible(cfg: &ModelConfig, sample: &Sample) -> Result<()> {
    let mut bad = Vec::new();
    if sample.sampling_map.len() != cfg.frames {
        bad.push(format!(
            "frames: sample has {} sampled frames, model expects {}",
            sample.sampling_map.len(),
            cfg.frames
        ));
    }
    if sample.height != cfg.height {
        bad.push(format!("height: sample {} vs model {}", sample.height, cfg.height));
    }
    if sample.width != cfg.width {
        bad.push(format!("width: sample {} vs model {}", sample.width, cfg.width));
    }
    if let Some(&id) = sample.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        bad.push(format!(
            "vocab_size: token {id} exceeds model vocabulary {}",
            cfg.vocab_size
        ));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(StcatError::InvalidSample(format!(
            "sample {} incompatible with model: {}",
            sample.id,
            bad.join("; ")
        )))
    }
}

pub fn prepare(cfg: &ModelConfig, data: &Dataset, sample: &Sample) -> Result<Example> {
    check_compatible(cfg, sample)?;
    Ok(Example {
        id: sample.id.clone(),
        clip: data.sampled_clip(sample)?,
        tokens: QueryTokens::new(sample.tokens.clone(), cfg.vocab_size)?,
        target: sample.target(cfg.sigma_for(cfg.frames))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub sample: String,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Loss and parameter gradients for one example.
pub fn loss_and_grads(
    model: &Stcat,
    params: &ParamStore<f32>,
    ex: &Example,
    drop: &mut Dropout,
) -> Result<(LossBreakdown, Vec<Tensor<f32>>)> {
    let mut g = Graph::new(params, true);
    let out = model.forward(&mut g, &ex.clip, &ex.tokens, drop)?;
    let (loss, breakdown) = model.loss(&mut g, &out, &ex.target)?;
    if !breakdown.total.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((breakdown, g.param_grads(&grads)))
}

/// Loss without gradients.
pub fn evaluate_loss(model: &Stcat, params: &ParamStore<f32>, ex: &Example) -> Result<LossBreakdown> {
    let mut g = Graph::new(params, false);
    let out = model.forward(&mut g, &ex.clip, &ex.tokens, &mut Dropout::off())?;
    Ok(model.loss(&mut g, &out, &ex.target)?.1)
}

pub fn learning_rate(cfg: &ModelConfig, step: usize) -> f64 {
    match cfg.lr_drop_step {
        Some(s) if step >= s => cfg.lr * cfg.lr_drop_factor,
        _ => cfg.lr,
    }
}

fn clip_gradients(grads: &mut [Tensor<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Training order: every epoch is a fresh seeded permutation of the dataset.
pub struct SampleOrder {
    rng: ChaCha8Rng,
    queue: Vec<usize>,
    len: usize,
}

impl SampleOrder {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0bde),
            queue: Vec::new(),
            len,
        }
    }
}

impl Iterator for SampleOrder {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        if self.queue.is_empty() {
            self.queue = (0..self.len).rev().collect();
            self.queue.shuffle(&mut self.rng);
        }
        self.queue.pop()
    }
}

/// Trains from scratch and writes checkpoints plus a per-step loss log to `out`.
pub fn train(cfg: &ModelConfig, data: &Dataset, out: &Path, mut progress: impl FnMut(&LogEntry)) -> Result<Checkpoint> {
    cfg.validate()?;
    let examples = data
        .samples
        .iter()
        .map(|s| prepare(cfg, data, s))
        .collect::<Result<Vec<_>>>()?;
    if examples.is_empty() {
        return Err(StcatError::InvalidSample("empty training set".into()));
    }
    let (model, mut params) = Stcat::new::<f32>(cfg)?;
    let mut state = AdamState::zeros_like(&params.values());
    let mut order = SampleOrder::new(examples.len(), cfg.seed);
    let mut drop = Dropout::new(cfg.dropout, ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)));

    std::fs::create_dir_all(out).map_err(|e| StcatError::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| StcatError::io(&log_path, e))?);

    let snapshot = |params: &ParamStore<f32>, state: &AdamState<f32>, step: usize| Checkpoint {
        step,
        config: cfg.clone(),
        params: params.clone(),
        optimizer: state.clone(),
    };

    let mut last = String::from("none");
    for step in 0..cfg.steps {
        let lr = learning_rate(cfg, step);
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        let mut first: Option<(String, LossBreakdown)> = None;
        for _ in 0..cfg.grad_accum {
            let ex = &examples[order.next().expect("endless order")];
            let (breakdown, grads) = match loss_and_grads(&model, &params, ex, &mut drop) {
                Ok(r) => r,
                Err(StcatError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(StcatError::Diverged { step, last });
                }
                Err(e) => return Err(e),
            };
            if !breakdown.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(StcatError::Diverged {
                    step,
                    last: breakdown.to_string(),
                });
            }
            if first.is_none() {
                first = Some((ex.id.clone(), breakdown));
            }
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (x, y) in a.iter_mut().zip(&grads) {
                        x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
                    }
                    a
                }
            });
        }
        let mut grads = acc.expect("grad_accum >= 1");
        if cfg.grad_accum > 1 {
            let s = 1.0 / cfg.grad_accum as f32;
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        if let Some(max) = cfg.grad_clip {
            clip_gradients(&mut grads, max);
        }
        let opt = AdamW {
            lr,
            weight_decay: cfg.weight_decay,
            ..AdamW::default()
        };
        opt.step(&mut params.values_mut(), &grads, &mut state)?;

        let (sample, loss) = first.expect("at least one sample");
        last = loss.to_string();
        let entry = LogEntry { step, sample, lr, loss };
        serde_json::to_writer(&mut log, &entry).map_err(|e| StcatError::format(&log_path, e.to_string()))?;
        log.write_all(b"\n").map_err(|e| StcatError::io(&log_path, e))?;
        progress(&entry);

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            log.flush().map_err(|e| StcatError::io(&log_path, e))?;
            snapshot(&params, &state, step + 1).save(out)?;
        }
    }
    log.flush().map_err(|e| StcatError::io(&log_path, e))?;
    let ckpt = snapshot(&params, &state, cfg.steps);
    ckpt.save(out)?;
    Ok(ckpt)
}

/// Reads a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| StcatError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| StcatError::format(path, e.to_string())))
        .collect()
}

/// A deterministic random clip, a five-token query and a two-frame target
/// sized for `cfg`; used by gradient checks.
pub fn synthetic_example(cfg: &ModelConfig, seed: u64) -> Result<Example> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.frames * cfg.height * cfg.width * 3;
    let pixels = (0..n).map(|_| rng.gen::<f32>()).collect();
    let clip = VideoClip::new(cfg.frames, cfg.height, cfg.width, pixels)?;
    let tokens = QueryTokens::new(
        crate::workbench::vocab::encode("the red circle that appears"),
        cfg.vocab_size,
    )?;
    let start = cfg.frames / 4;
    let end = (start + 1).min(cfg.frames - 1);
    let boxes = (start..=end)
        .map(|_| {
            crate::objectives::Bbox::new(
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.1..0.4),
                rng.gen_range(0.1..0.4),
            )
        })
        .collect();
    let target = Target {
        start,
        end,
        boxes,
        frames: cfg.frames,
        sigma: cfg.sigma_for(cfg.frames),
    };
    target.validate()?;
    Ok(Example {
        id: format!("synthetic-{seed}"),
        clip,
        tokens,
        target,
    })
}
