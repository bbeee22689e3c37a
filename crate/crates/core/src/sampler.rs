//! Reverse-time schedulers over a large canvas.
//!
//! All patch schedulers share one engine: each outer step freezes a replica of
//! `y_{t+1}`, denoises every crop of the step's plan from that replica (crops
//! run in parallel), and merges the results in ordinal order with
//! first-write-wins. Noise draws are keyed by `(seed, t, ordinal)`, so the
//! output depends only on the seed and the configuration.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canvas::{
    crop, plan_coverage, write_first_wins_with, CoveragePlan, LatentCanvas, PatchProjection, TimeStateGrid,
};
use crate::error::{Error, Result};
use crate::mask::SegmentationMask;
use crate::rng::{normals, stream, Domain};
use crate::schedule::{ddim_step, NoiseSchedule, Patch};
use crate::world::{Denoiser, Label};

/// Classifier-free guidance settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega: f64,
    /// Unconditional probability used during training; kept for provenance.
    #[serde(default)]
    pub p_unc: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { omega: 0.0, p_unc: 0.0 }
    }
}

/// `(1 + omega) * eps_cond - omega * eps_uncond`.
pub fn cfg_mix(eps_cond: &Patch, eps_uncond: &Patch, omega: f64) -> Result<Patch> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::shape(eps_cond.shape(), eps_uncond.shape()));
    }
    if omega == 0.0 {
        return Ok(eps_cond.clone());
    }
    let mut out = eps_cond.clone();
    out.zip_mut_with(eps_uncond, |c, u| *c = (1.0 + omega) * *c - omega * u);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    RandomPatch,
    SlidingWindow,
    IndependentTiles,
    FullCanvas,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::RandomPatch,
        SchedulerKind::SlidingWindow,
        SchedulerKind::IndependentTiles,
        SchedulerKind::FullCanvas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::RandomPatch => "random-patch",
            SchedulerKind::SlidingWindow => "sliding-window",
            SchedulerKind::IndependentTiles => "independent-tiles",
            SchedulerKind::FullCanvas => "full-canvas",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scheduler {s:?}")))
    }
}

/// Denoiser-call and critical-path bookkeeping.
///
/// `calls_literal` counts every condition plus the null branch per crop, as a
/// literal reading of the algorithm would; `calls_effective` counts the
/// branches actually evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub calls_literal: u64,
    pub calls_effective: u64,
    pub depth: u64,
}

/// Output of one sampler run.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub canvas: LatentCanvas,
    pub counters: Counters,
}

/// Hooks into the patch engine, for instrumentation.
pub trait StepObserver {
    /// Before any crop of outer step `t` is denoised. `replica` is `y_{t+1}`.
    fn on_step_start(&mut self, _t: usize, _replica: &LatentCanvas, _plan: &CoveragePlan) {}

    /// After the merge of step `t`; `owner[r, c]` is the ordinal that wrote the pixel.
    fn on_step_end(&mut self, _t: usize, _canvas: &LatentCanvas, _grid: &TimeStateGrid, _owner: &Array2<usize>) {}
}

struct NoObserver;

impl StepObserver for NoObserver {}

/// One configured sampling run.
#[derive(Clone, Copy)]
pub struct SamplerRun<'a> {
    pub schedule: &'a NoiseSchedule,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub kind: SchedulerKind,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    pub denoiser: &'a dyn Denoiser,
    pub mask: &'a SegmentationMask,
}

impl fmt::Debug for SamplerRun<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SamplerRun")
            .field("steps", &self.schedule.steps())
            .field("guidance", &self.guidance)
            .field("seed", &self.seed)
            .field("kind", &self.kind)
            .field("patch", &(self.patch_h, self.patch_w))
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

/// Branches needed for a crop whose mask region is `region`: every class
/// present, plus the null branch when unknown pixels are present or guidance
/// mixes it in. Null first, classes ascending.
pub fn branches(region: ArrayView2<'_, u32>, omega: f64) -> Vec<Label> {
    let mut present: Vec<u32> = region.iter().copied().collect();
    present.sort_unstable();
    present.dedup();
    let has_unknown = present.first() == Some(&0);
    let classes: Vec<Label> = present
        .into_iter()
        .filter(|&l| l != 0)
        .map(Label::from_mask_value)
        .collect();
    let mut out = Vec::with_capacity(classes.len() + 1);
    if has_unknown || (omega != 0.0 && !classes.is_empty()) {
        out.push(Label::Null);
    }
    out.extend(classes);
    out
}

/// Fixed raster of window origins along one axis with a half-window stride.
pub fn raster_origins(len: usize, patch: usize) -> Vec<usize> {
    let stride = (patch / 2).max(1);
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + patch < len).collect();
    v.push(len - patch);
    v.dedup();
    v
}

/// How many sliding-window patches can run concurrently: 2 per axis that
/// actually slides.
fn sliding_parallelism(rows: usize, cols: usize) -> u64 {
    (if rows > 1 { 2 } else { 1 }) * (if cols > 1 { 2 } else { 1 })
}

impl<'a> SamplerRun<'a> {
    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.mask.dim() != (height, width) {
            return Err(Error::shape(&[height, width], &[self.mask.dim().0, self.mask.dim().1]));
        }
        if self.channels == 0 {
            return Err(Error::InvalidArgument("channels must be positive".into()));
        }
        let n = self.denoiser.num_classes() as u32;
        if self.mask.max_label() > n {
            return Err(Error::InvalidArgument(format!(
                "mask label {} exceeds the {n} classes of the denoiser",
                self.mask.max_label()
            )));
        }
        if !self.guidance.omega.is_finite() || self.guidance.omega < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "omega must be finite and >= 0, got {}",
                self.guidance.omega
            )));
        }
        Ok(())
    }

    fn check_patch(&self, height: usize, width: usize) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 || self.patch_h > height || self.patch_w > width {
            return Err(Error::InvalidArgument(format!(
                "{}x{} patch does not fit a {height}x{width} canvas",
                self.patch_h, self.patch_w
            )));
        }
        if !self.denoiser.supports(self.patch_h, self.patch_w) {
            return Err(Error::UnsupportedShape {
                height: self.patch_h,
                width: self.patch_w,
            });
        }
        Ok(())
    }

    /// `y_T ~ N(0, I)` from the run's init stream.
    pub fn initial_canvas(&self, height: usize, width: usize) -> LatentCanvas {
        let mut rng = stream(self.seed, Domain::Init, 0, 0);
        let n = self.channels * height * width;
        LatentCanvas::from_shape_vec((self.channels, height, width), normals(&mut rng, n))
            .expect("length matches shape")
    }

    /// Plan of outer step `t` for the random-patch scheduler.
    pub fn random_plan(&self, height: usize, width: usize, t: usize) -> Result<CoveragePlan> {
        let mut rng = stream(self.seed, Domain::Plan, t as u64, 0);
        plan_coverage(height, width, self.patch_h, self.patch_w, &mut rng)
    }

    fn sliding_plan(&self, height: usize, width: usize) -> (CoveragePlan, u64) {
        let rows = raster_origins(height, self.patch_h);
        let cols = raster_origins(width, self.patch_w);
        let projections = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .map(|(r, c)| PatchProjection::new(r, c, self.patch_h, self.patch_w))
            .collect::<Vec<_>>();
        let depth = (projections.len() as u64).div_ceil(sliding_parallelism(rows.len(), cols.len()));
        (CoveragePlan { projections }, depth)
    }

    fn tile_plan(&self, height: usize, width: usize) -> Result<CoveragePlan> {
        if !height.is_multiple_of(self.patch_h) || !width.is_multiple_of(self.patch_w) {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} canvas is not a multiple of the {}x{} tile",
                self.patch_h, self.patch_w
            )));
        }
        let projections = (0..height / self.patch_h)
            .flat_map(|i| (0..width / self.patch_w).map(move |j| (i, j)))
            .map(|(i, j)| PatchProjection::new(i * self.patch_h, j * self.patch_w, self.patch_h, self.patch_w))
            .collect();
        Ok(CoveragePlan { projections })
    }

    /// Guided noise estimate for `z` with per-pixel labels `region`.
    fn guided_epsilon(&self, z: &Patch, region: ArrayView2<'_, u32>, t: usize) -> Result<(Patch, u64)> {
        let labels = branches(region, self.guidance.omega);
        let mut evaluated: Vec<(Label, Patch)> = Vec::with_capacity(labels.len());
        for &label in &labels {
            evaluated.push((label, self.denoiser.epsilon(z, t, label)?));
        }
        let null = evaluated.iter().find(|(l, _)| *l == Label::Null).map(|(_, e)| e);
        let mut guided: Vec<(Label, Patch)> = Vec::with_capacity(evaluated.len());
        for (label, eps) in &evaluated {
            let g = match (label, null) {
                (Label::Class(_), Some(u)) => cfg_mix(eps, u, self.guidance.omega)?,
                _ => eps.clone(),
            };
            guided.push((*label, g));
        }
        let pick = |v: u32| -> &Patch {
            let l = Label::from_mask_value(v);
            &guided.iter().find(|(g, _)| *g == l).expect("branch evaluated").1
        };
        let out = if guided.len() == 1 {
            guided.pop().unwrap().1
        } else {
            let (ch, h, w) = z.dim();
            Patch::from_shape_fn((ch, h, w), |(k, r, c)| pick(region[[r, c]])[[k, r, c]])
        };
        Ok((out, evaluated.len() as u64))
    }

    /// One reverse step of a crop at DDIM time `t` (`t -> t-1`).
    fn denoise_crop(
        &self,
        replica: &LatentCanvas,
        p: &PatchProjection,
        t: usize,
        ordinal: usize,
    ) -> Result<(Patch, u64)> {
        let z = crop(replica, p)?;
        let region = self
            .mask
            .labels
            .slice(s![p.row0..p.row0 + p.patch_h, p.col0..p.col0 + p.patch_w]);
        let (eps, calls) = self.guided_epsilon(&z, region, t)?;
        let noise = self.step_noise(z.dim(), t, ordinal);
        Ok((ddim_step(&z, &eps, t, self.schedule, noise.as_ref())?, calls))
    }

    fn step_noise(&self, dim: (usize, usize, usize), t: usize, ordinal: usize) -> Option<Patch> {
        if self.schedule.ddim_sigma(t) == 0.0 {
            return None;
        }
        let mut rng = stream(self.seed, Domain::StepNoise, t as u64, ordinal as u64);
        let n = dim.0 * dim.1 * dim.2;
        Some(Patch::from_shape_vec(dim, normals(&mut rng, n)).expect("length matches shape"))
    }

    fn literal_per_crop(&self) -> u64 {
        self.denoiser.num_classes() as u64 + 1
    }

    fn run_engine<P>(
        &self,
        height: usize,
        width: usize,
        mut planner: P,
        observer: &mut dyn StepObserver,
    ) -> Result<SampleOutcome>
    where
        P: FnMut(usize) -> Result<(CoveragePlan, u64)>,
    {
        let steps = self.schedule.steps();
        let mut y = self.initial_canvas(height, width);
        let mut grid = TimeStateGrid::new(height, width, steps);
        let mut owner = Array2::zeros((height, width));
        let mut counters = Counters::default();
        for t in (0..steps).rev() {
            let replica = y.clone();
            let (plan, depth) = planner(t)?;
            observer.on_step_start(t, &replica, &plan);
            let results = plan
                .projections
                .par_iter()
                .enumerate()
                .map(|(j, p)| self.denoise_crop(&replica, p, t + 1, j))
                .collect::<Result<Vec<_>>>()?;
            for (j, (p, (values, calls))) in plan.projections.iter().zip(results).enumerate() {
                write_first_wins_with(&mut y, &mut grid, p, &values, t, |r, c| owner[[r, c]] = j)?;
                counters.calls_effective += calls;
                counters.calls_literal += self.literal_per_crop();
            }
            counters.depth += depth;
            if !grid.all_equal(t) {
                return Err(Error::InvariantBreach(format!("step {t} left pixels behind")));
            }
            observer.on_step_end(t, &y, &grid, &owner);
        }
        Ok(SampleOutcome { canvas: y, counters })
    }

    /// Random-patch diffusion over a `height x width` canvas.
    pub fn sample_diffinfinite(&self, height: usize, width: usize) -> Result<SampleOutcome> {
        self.sample_diffinfinite_observed(height, width, &mut NoObserver)
    }

    pub fn sample_diffinfinite_observed(
        &self,
        height: usize,
        width: usize,
        observer: &mut dyn StepObserver,
    ) -> Result<SampleOutcome> {
        self.check(height, width)?;
        self.check_patch(height, width)?;
        self.run_engine(
            height,
            width,
            |t| Ok((self.random_plan(height, width, t)?, 1)),
            observer,
        )
    }

    /// Half-overlapping fixed raster per step.
    pub fn sample_sliding_window(&self, height: usize, width: usize) -> Result<SampleOutcome> {
        self.sample_sliding_window_observed(height, width, &mut NoObserver)
    }

    pub fn sample_sliding_window_observed(
        &self,
        height: usize,
        width: usize,
        observer: &mut dyn StepObserver,
    ) -> Result<SampleOutcome> {
        self.check(height, width)?;
        self.check_patch(height, width)?;
        let plan = self.sliding_plan(height, width);
        self.run_engine(height, width, |_| Ok(plan.clone()), observer)
    }

    /// Disjoint tiles; nothing flows across tile borders.
    pub fn sample_independent_tiles(&self, height: usize, width: usize) -> Result<SampleOutcome> {
        self.check(height, width)?;
        self.check_patch(height, width)?;
        let plan = self.tile_plan(height, width)?;
        self.run_engine(height, width, |_| Ok((plan.clone(), 1)), &mut NoObserver)
    }

    /// Plain DDIM over the whole canvas. Needs a denoiser that accepts the
    /// canvas size.
    pub fn sample_full_reference(&self, height: usize, width: usize) -> Result<SampleOutcome> {
        self.check(height, width)?;
        if !self.denoiser.supports(height, width) {
            return Err(Error::UnsupportedShape { height, width });
        }
        let mut y = self.initial_canvas(height, width);
        let mut counters = Counters::default();
        for t in (1..=self.schedule.steps()).rev() {
            let (eps, calls) = self.guided_epsilon(&y, self.mask.labels.view(), t)?;
            let noise = self.step_noise(y.dim(), t, 0);
            y = ddim_step(&y, &eps, t, self.schedule, noise.as_ref())?;
            counters.calls_effective += calls;
            counters.calls_literal += self.literal_per_crop();
            counters.depth += 1;
        }
        Ok(SampleOutcome { canvas: y, counters })
    }

    /// Dispatch on `self.kind`.
    pub fn sample(&self, height: usize, width: usize) -> Result<SampleOutcome> {
        match self.kind {
            SchedulerKind::RandomPatch => self.sample_diffinfinite(height, width),
            SchedulerKind::SlidingWindow => self.sample_sliding_window(height, width),
            SchedulerKind::IndependentTiles => self.sample_independent_tiles(height, width),
            SchedulerKind::FullCanvas => self.sample_full_reference(height, width),
        }
    }

    /// Counters `self.sample(height, width)` would report, without denoising.
    pub fn cost(&self, height: usize, width: usize) -> Result<Counters> {
        self.check(height, width)?;
        let steps = self.schedule.steps();
        let per_crop = self.literal_per_crop();
        let omega = self.guidance.omega;
        let region_calls = |plan: &CoveragePlan| -> u64 {
            plan.projections
                .iter()
                .map(|p| {
                    let region = self
                        .mask
                        .labels
                        .slice(s![p.row0..p.row0 + p.patch_h, p.col0..p.col0 + p.patch_w]);
                    branches(region, omega).len() as u64
                })
                .sum()
        };
        let mut c = Counters::default();
        match self.kind {
            SchedulerKind::FullCanvas => {
                let calls = branches(self.mask.labels.view(), omega).len() as u64;
                c.calls_effective = calls * steps as u64;
                c.calls_literal = per_crop * steps as u64;
                c.depth = steps as u64;
            }
            SchedulerKind::RandomPatch => {
                if self.patch_h > height || self.patch_w > width {
                    return Err(Error::InvalidArgument("patch does not fit the canvas".into()));
                }
                for t in 0..steps {
                    let plan = self.random_plan(height, width, t)?;
                    c.calls_effective += region_calls(&plan);
                    c.calls_literal += per_crop * plan.len() as u64;
                    c.depth += 1;
                }
            }
            SchedulerKind::SlidingWindow | SchedulerKind::IndependentTiles => {
                if self.patch_h > height || self.patch_w > width {
                    return Err(Error::InvalidArgument("patch does not fit the canvas".into()));
                }
                let (plan, depth) = if self.kind == SchedulerKind::SlidingWindow {
                    self.sliding_plan(height, width)
                } else {
                    (self.tile_plan(height, width)?, 1)
                };
                let calls = region_calls(&plan);
                c.calls_effective = calls * steps as u64;
                c.calls_literal = per_crop * plan.len() as u64 * steps as u64;
                c.depth = depth * steps as u64;
            }
        }
        Ok(c)
    }
}

/// One row of a cost comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub height: usize,
    pub width: usize,
    pub scheduler: SchedulerKind,
    pub counters: Counters,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
}

pub const COST_HEADER: &str = "size,scheduler,calls_literal,calls_effective,depth";

impl CostTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{COST_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}x{},{},{},{},{}\n",
                r.height, r.width, r.scheduler, r.counters.calls_literal, r.counters.calls_effective, r.counters.depth
            ));
        }
        out
    }

    pub fn get(&self, height: usize, width: usize, kind: SchedulerKind) -> Option<&Counters> {
        self.rows
            .iter()
            .find(|r| (r.height, r.width, r.scheduler) == (height, width, kind))
            .map(|r| &r.counters)
    }
}

/// Cost of every scheduler at every size, using a uniform mask of
/// `template.mask`'s first label. Schedulers that cannot run at a size
/// (tiles on a non-multiple canvas) are omitted.
pub fn compare_cost(sizes: &[(usize, usize)], template: &SamplerRun<'_>) -> Result<CostTable> {
    let label = template.mask.labels.iter().next().copied().unwrap_or(0);
    let mut table = CostTable::default();
    for &(h, w) in sizes {
        if h < template.patch_h || w < template.patch_w {
            return Err(Error::InvalidArgument(format!(
                "size {h}x{w} is smaller than the {}x{} patch",
                template.patch_h, template.patch_w
            )));
        }
        let mask = SegmentationMask::uniform(h, w, label);
        for kind in SchedulerKind::ALL {
            let run = SamplerRun {
                kind,
                mask: &mask,
                ..*template
            };
            if kind == SchedulerKind::IndependentTiles && (h % run.patch_h != 0 || w % run.patch_w != 0) {
                continue;
            }
            table.rows.push(CostRow {
                height: h,
                width: w,
                scheduler: kind,
                counters: run.cost(h, w)?,
            });
        }
    }
    Ok(table)
}
