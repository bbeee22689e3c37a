//! Segmentation masks: generation from a low-resolution field, cleaning and
//! upsampling to canvas size.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::SamplerRun;

/// Per-pixel labels in `0..=N` (0 = unknown) plus the global context prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub labels: Array2<u32>,
    pub context: u32,
}

impl SegmentationMask {
    pub fn uniform(height: usize, width: usize, label: u32) -> Self {
        SegmentationMask {
            labels: Array2::from_elem((height, width), label),
            context: 0,
        }
    }

    pub fn new(labels: Array2<u32>, context: u32) -> Self {
        SegmentationMask { labels, context }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Distinct non-zero labels.
    pub fn label_set(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Count of each label `0..=max`.
    pub fn histogram(&self, max: u32) -> Vec<u64> {
        let mut h = vec![0; max as usize + 1];
        for &l in &self.labels {
            if l <= max {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// Affine map from continuous field values to labels:
/// `clamp(round(offset + scale * v), 0, max_label)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelQuantizer {
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "one")]
    pub scale: f64,
    pub max_label: u32,
}

fn one() -> f64 {
    1.0
}

impl LabelQuantizer {
    pub fn quantize(&self, v: f64) -> u32 {
        let x = (self.offset + self.scale * v).round();
        if x.is_nan() || x <= 0.0 {
            0
        } else {
            x.min(self.max_label as f64) as u32
        }
    }
}

/// Sample a low-resolution mask field with the random-patch sampler,
/// conditioned only on `context`, and quantize it to labels.
///
/// `run.denoiser` models the mask field; its classes are the context prompts.
/// The returned mask is uncleaned.
pub fn generate_mask(
    context: u32,
    low_h: usize,
    low_w: usize,
    quantizer: &LabelQuantizer,
    run: &SamplerRun<'_>,
) -> Result<SegmentationMask> {
    if low_h < run.patch_h || low_w < run.patch_w {
        return Err(Error::InvalidArgument(format!(
            "{low_h}x{low_w} mask is smaller than the {}x{} sampler patch",
            run.patch_h, run.patch_w
        )));
    }
    let prompt = SegmentationMask::uniform(low_h, low_w, context);
    let ctx_run = SamplerRun { mask: &prompt, ..*run };
    let out = ctx_run.sample_diffinfinite(low_h, low_w)?;
    let labels = Array2::from_shape_fn((low_h, low_w), |(r, c)| {
        let ch = out.canvas.dim().0;
        let v = (0..ch).map(|k| out.canvas[[k, r, c]]).sum::<f64>() / ch as f64;
        quantizer.quantize(v)
    });
    Ok(SegmentationMask::new(labels, context))
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbours(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBOURS.iter().filter_map(move |&(dr, dc)| {
        let rr = r.checked_add_signed(dr)?;
        let cc = c.checked_add_signed(dc)?;
        (rr < h && cc < w).then_some((rr, cc))
    })
}

/// Remove inter-region seams and small regions.
///
/// 1. Every labelled pixel with a 4-neighbour carrying a different non-zero
///    label becomes unknown (both sides of the seam).
/// 2. Every 4-connected labelled component that contains no fully labelled
///    `k x k` window (its min-pool is zero everywhere) becomes unknown; larger
///    components are kept whole.
pub fn clean_mask(m: &SegmentationMask, minpool_k: usize) -> Result<SegmentationMask> {
    if minpool_k == 0 || minpool_k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "min-pool size must be a positive odd integer, got {minpool_k}"
        )));
    }
    let (h, w) = m.dim();
    let src = &m.labels;
    let mut out = src.clone();
    for r in 0..h {
        for c in 0..w {
            let a = src[[r, c]];
            if a != 0 && neighbours(r, c, h, w).any(|(rr, cc)| src[[rr, cc]] != 0 && src[[rr, cc]] != a) {
                out[[r, c]] = 0;
            }
        }
    }

    // A k x k window centred at (r, c) lies inside the canvas and inside one label.
    let half = minpool_k / 2;
    let eroded = Array2::from_shape_fn((h, w), |(r, c)| {
        let a = out[[r, c]];
        if a == 0 || r < half || c < half || r + half >= h || c + half >= w {
            return false;
        }
        (r - half..=r + half).all(|rr| (c - half..=c + half).all(|cc| out[[rr, cc]] == a))
    });

    let mut seen = Array2::from_elem((h, w), false);
    let mut component = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if seen[[r, c]] || out[[r, c]] == 0 {
                continue;
            }
            let a = out[[r, c]];
            component.clear();
            let mut stack = vec![(r, c)];
            seen[[r, c]] = true;
            let mut keep = false;
            while let Some((pr, pc)) = stack.pop() {
                component.push((pr, pc));
                keep |= eroded[[pr, pc]];
                for (nr, nc) in neighbours(pr, pc, h, w) {
                    if !seen[[nr, nc]] && out[[nr, nc]] == a {
                        seen[[nr, nc]] = true;
                        stack.push((nr, nc));
                    }
                }
            }
            if !keep {
                for &(pr, pc) in &component {
                    out[[pr, pc]] = 0;
                }
            }
        }
    }
    Ok(SegmentationMask::new(out, m.context))
}

/// Bilinear interpolation of per-label indicators (half-pixel centres,
/// edge-clamped) followed by argmax; ties go to the lower label.
pub fn upsample_mask(m: &SegmentationMask, target_h: usize, target_w: usize) -> Result<SegmentationMask> {
    let (h, w) = m.dim();
    if target_h < h || target_w < w {
        return Err(Error::InvalidArgument(format!(
            "cannot downscale a {h}x{w} mask to {target_h}x{target_w}"
        )));
    }
    let labels: Vec<u32> = {
        let mut v: Vec<u32> = m.labels.iter().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let axis = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Array2::zeros((target_h, target_w));
    let mut weights = vec![0.0; labels.len()];
    for r in 0..target_h {
        let (r0, r1, fr) = axis(r, h, target_h);
        for c in 0..target_w {
            let (c0, c1, fc) = axis(c, w, target_w);
            weights.iter_mut().for_each(|x| *x = 0.0);
            for (rr, wr) in [(r0, 1.0 - fr), (r1, fr)] {
                for (cc, wc) in [(c0, 1.0 - fc), (c1, fc)] {
                    let k = labels.binary_search(&m.labels[[rr, cc]]).unwrap();
                    weights[k] += wr * wc;
                }
            }
            let mut best = 0;
            for k in 1..labels.len() {
                if weights[k] > weights[best] {
                    best = k;
                }
            }
            out[[r, c]] = labels[best];
        }
    }
    Ok(SegmentationMask::new(out, m.context))
}
