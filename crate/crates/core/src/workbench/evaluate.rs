//! Inference over a dataset, metric aggregation and single-sample grounding.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use stcat_tensor::ParamStore;

use crate::error::{Result, StcatError};
use crate::grounding::{aggregate, assemble_tube, tiou, viou, write_tube_line, MetricsReport, Tube, THRESHOLDS};
use crate::model::{Prediction, Stcat};
use crate::workbench::dataset::{Dataset, Sample};
use crate::workbench::train::prepare;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub viou: f64,
    pub tiou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub per_sample: Vec<SampleScore>,
}

/// Predicted tube for one sample in original frame indices.
pub fn predict_tube(
    model: &Stcat,
    params: &ParamStore<f32>,
    data: &Dataset,
    sample: &Sample,
) -> Result<(Tube, Prediction)> {
    let ex = prepare(&model.config, data, sample)?;
    let pred = model.predict(params, &ex.clip, &ex.tokens)?;
    let tube = assemble_tube(&pred.boxes, pred.span, &sample.sampling_map, sample.frames)?;
    Ok((tube, pred))
}

/// Evaluates every sample. With `oracle` set, the ground truth is used as
/// the prediction and the model is not run.
pub fn evaluate(
    model: &Stcat,
    params: &ParamStore<f32>,
    data: &Dataset,
    oracle: bool,
) -> Result<(EvalReport, Vec<(String, Tube)>)> {
    let mut tubes = Vec::with_capacity(data.samples.len());
    let mut scores = Vec::with_capacity(data.samples.len());
    for sample in &data.samples {
        let tube = if oracle {
            sample.gt.clone()
        } else {
            predict_tube(model, params, data, sample)?.0
        };
        scores.push(SampleScore {
            id: sample.id.clone(),
            viou: viou(&tube, &sample.gt),
            tiou: tiou(&tube, &sample.gt),
        });
        tubes.push((sample.id.clone(), tube));
    }
    let v: Vec<f64> = scores.iter().map(|s| s.viou).collect();
    let t: Vec<f64> = scores.iter().map(|s| s.tiou).collect();
    let metrics = aggregate(&v, &t, &THRESHOLDS)?;
    Ok((
        EvalReport {
            metrics,
            per_sample: scores,
        },
        tubes,
    ))
}

pub fn write_tubes(path: &Path, tubes: &[(String, Tube)]) -> Result<()> {
    let file = File::create(path).map_err(|e| StcatError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (id, tube) in tubes {
        write_tube_line(&mut out, id, tube).map_err(|e| StcatError::io(path, e))?;
    }
    out.flush().map_err(|e| StcatError::io(path, e))
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| StcatError::format(path, e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(|e| StcatError::io(path, e))
}

/// Box-branch cross-attention as `layer,frame,token,weight` rows.
pub fn write_attention_csv(path: &Path, pred: &Prediction) -> Result<()> {
    let file = File::create(path).map_err(|e| StcatError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| StcatError::io(path, e);
    writeln!(out, "layer,frame,token,weight").map_err(io)?;
    for (l, layer) in pred.attention.iter().enumerate() {
        for (t, row) in layer.iter().enumerate() {
            for (k, w) in row.iter().enumerate() {
                writeln!(out, "{l},{t},{k},{w:.9}").map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}
