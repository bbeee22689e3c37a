//! Run configuration: one JSON document drives every command.
//!
//! Unknown keys are rejected. Parse errors carry the line and column of the
//! offending token; semantic errors name the field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelQuantizer;
use crate::metrics::EmbedMode;
use crate::sampler::SchedulerKind;
use crate::schedule::ScheduleSpec;
use crate::world::GaussianWorld;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Patch-level data distribution; its extent is the patch size.
    pub world: GaussianWorld,
    pub schedule: ScheduleSpec,
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default)]
    pub decode: DecodeSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default)]
    pub train: Option<TrainSpec>,
    #[serde(default)]
    pub bench: Option<BenchSpec>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub scheduler_kind: SchedulerKind,
    /// `[height, width]` of the latent canvas.
    pub canvas: [usize; 2],
    #[serde(default)]
    pub omega: f64,
    #[serde(default = "one_usize")]
    pub channels: usize,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    /// Number of canvases; sample `i` uses seed `seed + i`.
    #[serde(default = "one_usize")]
    pub samples: usize,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// Exact denoiser of the world; accepts any input size.
    #[default]
    Analytic,
    /// Trained affine denoiser from a weights tensor; patch size only.
    Linear { weights: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub source: MaskSource,
    /// Min-pool window of the cleaning pass; 1 only removes seams.
    #[serde(default = "default_minpool")]
    pub minpool_k: usize,
}

fn default_minpool() -> usize {
    3
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            source: MaskSource::Uniform { label: 1 },
            minpool_k: default_minpool(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskSource {
    Uniform {
        label: u32,
    },
    /// An i32 label tensor of the canvas size.
    File {
        path: PathBuf,
    },
    /// Low-resolution mask sampled with random patches from `world`, whose
    /// classes are the context prompts.
    Generate {
        context: u32,
        low: [usize; 2],
        world: GaussianWorld,
        quantizer: LabelQuantizer,
        #[serde(default)]
        omega: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSpec {
    #[serde(default)]
    pub codec: CodecSpec,
    /// Even `[height, width]` of decode tiles; defaults to the patch size.
    #[serde(default)]
    pub tile: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CodecSpec {
    #[default]
    Identity,
    Scale {
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_cells")]
    pub cells: usize,
    /// Defaults to `20 / |gen|`.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub embed: EmbedMode,
}

fn default_k() -> usize {
    3
}

fn default_cells() -> usize {
    10
}

impl Default for MetricsSpec {
    fn default() -> Self {
        MetricsSpec {
            k: default_k(),
            cells: default_cells(),
            tau: None,
            embed: EmbedMode::Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub p_unc: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    /// Canvas sizes `[height, width]`; defaults to 1, 2, 4 and 8 patches per side.
    #[serde(default)]
    pub sizes: Vec<[usize; 2]>,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn patch(&self) -> (usize, usize) {
        (self.world.height, self.world.width)
    }

    pub fn canvas(&self) -> (usize, usize) {
        (self.sampler.canvas[0], self.sampler.canvas[1])
    }

    pub fn tile(&self) -> (usize, usize) {
        self.decode.tile.map(|[h, w]| (h, w)).unwrap_or_else(|| self.patch())
    }

    /// Bench sizes, falling back to 1, 2, 4 and 8 patches per side.
    pub fn bench_sizes(&self) -> Vec<(usize, usize)> {
        let (ph, pw) = self.patch();
        match &self.bench {
            Some(b) if !b.sizes.is_empty() => b.sizes.iter().map(|&[h, w]| (h, w)).collect(),
            _ => [1, 2, 4, 8].iter().map(|&m| (m * ph, m * pw)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate().map_err(|e| invalid("world", e))?;
        self.schedule.build().map_err(|e| invalid("schedule", e))?;
        let (ph, pw) = self.patch();
        let (h, w) = self.canvas();
        if h < ph || w < pw {
            return Err(invalid(
                "sampler.canvas",
                format!("{h}x{w} is smaller than the {ph}x{pw} patch"),
            ));
        }
        if self.sampler.scheduler_kind == SchedulerKind::IndependentTiles && (h % ph != 0 || w % pw != 0) {
            return Err(invalid(
                "sampler.canvas",
                format!("independent tiles need a multiple of the {ph}x{pw} patch"),
            ));
        }
        if !(self.sampler.omega.is_finite() && self.sampler.omega >= 0.0) {
            return Err(invalid("sampler.omega", "must be finite and >= 0"));
        }
        if self.sampler.channels == 0 {
            return Err(invalid("sampler.channels", "must be positive"));
        }
        if self.sampler.samples == 0 {
            return Err(invalid("sampler.samples", "must be positive"));
        }
        let n = self.world.num_classes() as u32;
        if self.mask.minpool_k.is_multiple_of(2) {
            return Err(invalid("mask.minpool_k", "must be odd"));
        }
        match &self.mask.source {
            MaskSource::Uniform { label } if *label > n => {
                return Err(invalid("mask.source.label", format!("{label} exceeds the {n} classes")));
            }
            MaskSource::Generate {
                context,
                low,
                world,
                quantizer,
                omega,
            } => {
                world.validate().map_err(|e| invalid("mask.source.world", e))?;
                if *context == 0 || *context as usize > world.num_classes() {
                    return Err(invalid(
                        "mask.source.context",
                        format!("must be in 1..={}", world.num_classes()),
                    ));
                }
                if low[0] < world.height || low[1] < world.width {
                    return Err(invalid("mask.source.low", "smaller than the mask world patch"));
                }
                if low[0] > h || low[1] > w {
                    return Err(invalid("mask.source.low", "larger than the canvas"));
                }
                if quantizer.max_label > n {
                    return Err(invalid(
                        "mask.source.quantizer.max_label",
                        format!("exceeds the {n} classes"),
                    ));
                }
                if !(omega.is_finite() && *omega >= 0.0) {
                    return Err(invalid("mask.source.omega", "must be finite and >= 0"));
                }
            }
            _ => {}
        }
        let (th, tw) = self.tile();
        if th == 0 || tw == 0 || th % 2 != 0 || tw % 2 != 0 || th > h || tw > w {
            return Err(invalid(
                "decode.tile",
                format!("{th}x{tw} must be even, non-empty and fit the canvas"),
            ));
        }
        if let CodecSpec::Scale { scale } = self.decode.codec {
            if !scale.is_finite() || scale == 0.0 {
                return Err(invalid("decode.codec.scale", "must be finite and non-zero"));
            }
        }
        if self.metrics.k == 0 {
            return Err(invalid("metrics.k", "must be positive"));
        }
        if self.metrics.cells == 0 {
            return Err(invalid("metrics.cells", "must be positive"));
        }
        if let Some(tau) = self.metrics.tau {
            if !(0.0..=1.0).contains(&tau) {
                return Err(invalid("metrics.tau", "must lie in [0, 1]"));
            }
        }
        if let EmbedMode::RandomProjection { dim: 0, .. } = self.metrics.embed {
            return Err(invalid("metrics.embed.dim", "must be positive"));
        }
        if let Some(t) = &self.train {
            if !(0.0..=1.0).contains(&t.p_unc) {
                return Err(invalid("train.p_unc", "must lie in [0, 1]"));
            }
            if t.steps == 0 {
                return Err(invalid("train.steps", "must be positive"));
            }
        }
        for (bh, bw) in self.bench_sizes() {
            if bh < ph || bw < pw {
                return Err(invalid("bench.sizes", format!("{bh}x{bw} is smaller than the patch")));
            }
        }
        Ok(())
    }
}
