//! On-disk dataset: a JSONL manifest plus one binary clip per sample.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{QueryTokens, VideoClip};
use crate::error::{Result, StcatError};
use crate::grounding::{sampling_map, Tube};
use crate::objectives::{Bbox, Target};
use crate::workbench::generator::{generate_sample, GenConfig};
use crate::workbench::vocab::VOCAB;

pub const MANIFEST: &str = "manifest.jsonl";
const MAGIC: &[u8; 4] = b"STCV";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    /// Clip path relative to the dataset directory.
    pub blob: String,
    pub tokens: Vec<usize>,
    pub query: String,
    /// Ground truth in original frame indices.
    pub gt: Tube,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Original frame index of each sampled model frame.
    pub sampling_map: Vec<usize>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        self.gt.validate(self.frames)?;
        QueryTokens::new(self.tokens.clone(), VOCAB.len())?;
        if self.sampling_map.is_empty() || self.sampling_map.iter().any(|&f| f >= self.frames) {
            return Err(StcatError::InvalidSample(format!(
                "sample {}: sampling map outside {} frames",
                self.id, self.frames
            )));
        }
        if self.gt.boxes.iter().any(|b| !b.is_valid()) {
            return Err(StcatError::InvalidSample(format!(
                "sample {}: box outside [0, 1]",
                self.id
            )));
        }
        Ok(())
    }

    pub fn query_tokens(&self) -> Result<QueryTokens> {
        QueryTokens::new(self.tokens.clone(), VOCAB.len())
    }

    /// Supervision in sampled-frame coordinates: the sampled frames that fall
    /// inside the ground-truth segment, or the nearest one if none does.
    pub fn target(&self, sigma: f64) -> Result<Target> {
        let map = &self.sampling_map;
        let inside: Vec<usize> = (0..map.len())
            .filter(|&i| (self.gt.t_start..=self.gt.t_end).contains(&map[i]))
            .collect();
        let (start, end) = match (inside.first(), inside.last()) {
            (Some(&s), Some(&e)) => (s, e),
            _ => {
                let mid = (self.gt.t_start + self.gt.t_end) as f64 / 2.0;
                let i = (0..map.len())
                    .min_by(|&a, &b| (map[a] as f64 - mid).abs().total_cmp(&(map[b] as f64 - mid).abs()))
                    .expect("non-empty sampling map");
                (i, i)
            }
        };
        let boxes = (start..=end)
            .map(|i| {
                let f = map[i].clamp(self.gt.t_start, self.gt.t_end);
                self.gt.boxes[f - self.gt.t_start]
            })
            .collect::<Vec<Bbox>>();
        let target = Target {
            start,
            end,
            boxes,
            frames: map.len(),
            sigma,
        };
        target.validate()?;
        Ok(target)
    }
}

pub fn write_blob(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + clip.pixels.len() * 4);
    bytes.extend_from_slice(MAGIC);
    for extent in [clip.frames, clip.height, clip.width, 3] {
        let v = u32::try_from(extent).map_err(|_| StcatError::format(path, "extent exceeds u32"))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for p in &clip.pixels {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| StcatError::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<VideoClip> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| StcatError::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(StcatError::format(path, "bad magic, expected STCV"));
    }
    let ext: Vec<usize> = bytes[4..20]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if ext[3] != 3 {
        return Err(StcatError::format(
            path,
            format!("expected 3 channels, found {}", ext[3]),
        ));
    }
    let count = ext[0]
        .checked_mul(ext[1])
        .and_then(|n| n.checked_mul(ext[2]))
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| StcatError::format(path, "extents overflow"))?;
    let payload = &bytes[20..];
    if payload.len() != count * 4 {
        return Err(StcatError::format(
            path,
            format!(
                "expected {} payload bytes for {}x{}x{}x3, found {}",
                count * 4,
                ext[0],
                ext[1],
                ext[2],
                payload.len()
            ),
        ));
    }
    let pixels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    VideoClip::new(ext[0], ext[1], ext[2], pixels).map_err(|e| StcatError::format(path, e.to_string()))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let file = File::open(&path).map_err(|e| StcatError::io(&path, e))?;
        let mut samples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| StcatError::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: Sample =
                serde_json::from_str(&line).map_err(|e| StcatError::format(&path, format!("line {}: {e}", n + 1)))?;
            sample
                .validate()
                .map_err(|e| StcatError::format(&path, format!("line {}: {e}", n + 1)))?;
            samples.push(sample);
        }
        if samples.is_empty() {
            return Err(StcatError::format(&path, "manifest has no samples"));
        }
        Ok(Self { root, samples })
    }

    pub fn write(root: impl AsRef<Path>, items: &[(Sample, VideoClip)]) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("blobs")).map_err(|e| StcatError::io(&root, e))?;
        let path = root.join(MANIFEST);
        let file = File::create(&path).map_err(|e| StcatError::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for (sample, clip) in items {
            sample.validate()?;
            write_blob(&root.join(&sample.blob), clip)?;
            serde_json::to_writer(&mut out, sample).map_err(|e| StcatError::format(&path, e.to_string()))?;
            out.write_all(b"\n").map_err(|e| StcatError::io(&path, e))?;
        }
        out.flush().map_err(|e| StcatError::io(&path, e))?;
        Ok(Self {
            root,
            samples: items.iter().map(|(s, _)| s.clone()).collect(),
        })
    }

    pub fn get(&self, id: &str) -> Result<&Sample> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| StcatError::InvalidSample(format!("no sample with id {id}")))
    }

    pub fn clip(&self, sample: &Sample) -> Result<VideoClip> {
        let path = self.root.join(&sample.blob);
        let clip = read_blob(&path)?;
        if (clip.frames, clip.height, clip.width) != (sample.frames, sample.height, sample.width) {
            return Err(StcatError::format(
                &path,
                format!(
                    "blob is {}x{}x{} but manifest says {}x{}x{}",
                    clip.frames, clip.height, clip.width, sample.frames, sample.height, sample.width
                ),
            ));
        }
        Ok(clip)
    }

    /// The clip reduced to the model's sampled frames.
    pub fn sampled_clip(&self, sample: &Sample) -> Result<VideoClip> {
        Ok(self.clip(sample)?.select(&sample.sampling_map))
    }
}

/// Generates `count` samples; per-sample seeds derive from `seed`.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    cfg: &GenConfig,
    sampled_frames: usize,
) -> Result<Vec<(Sample, VideoClip)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let s = rng.next_u64();
            let g = generate_sample(s, cfg)?;
            let id = format!("s{i:05}");
            let sample = Sample {
                blob: format!("blobs/{id}.stcv"),
                id,
                tokens: g.tokens,
                query: g.query,
                gt: g.gt,
                seed: s,
                frames: cfg.frames,
                height: cfg.height,
                width: cfg.width,
                sampling_map: sampling_map(cfg.frames, sampled_frames),
            };
            Ok((sample, g.clip))
        })
        .collect()
}
