//! Shared fixtures for the criterion benches.

use patchcanvas_core::metrics::FeatureSet;
use patchcanvas_core::rng::{normals, stream, Domain};
use patchcanvas_core::sampler::{GuidanceConfig, SamplerRun, SchedulerKind};
use patchcanvas_core::{AnalyticDenoiser, GaussianWorld, NoiseSchedule, Result, SegmentationMask};

pub const PATCH: usize = 8;
pub const STEPS: usize = 10;

/// Owned pieces a `SamplerRun` borrows from.
pub struct Fixture {
    pub schedule: NoiseSchedule,
    pub denoiser: AnalyticDenoiser,
    pub mask: SegmentationMask,
}

impl Fixture {
    /// Two-class world on an `h x w` canvas split into left and right halves.
    pub fn new(h: usize, w: usize) -> Result<Self> {
        let schedule = NoiseSchedule::linear(STEPS, 0.0)?;
        let world = GaussianWorld::new(PATCH, PATCH, 2.0, vec![-0.5, 0.5])?;
        let denoiser = AnalyticDenoiser::new(world, schedule.clone())?;
        let mut mask = SegmentationMask::uniform(h, w, 1);
        for ((_, c), l) in mask.labels.indexed_iter_mut() {
            if c >= w / 2 {
                *l = 2;
            }
        }
        Ok(Self {
            schedule,
            denoiser,
            mask,
        })
    }

    pub fn run(&self, kind: SchedulerKind, seed: u64) -> SamplerRun<'_> {
        SamplerRun {
            schedule: &self.schedule,
            guidance: GuidanceConfig { omega: 1.0, p_unc: 0.0 },
            seed,
            kind,
            patch_h: PATCH,
            patch_w: PATCH,
            channels: 1,
            denoiser: &self.denoiser,
            mask: &self.mask,
        }
    }
}

/// `n` standard normal points in `dim` dimensions.
pub fn gaussian_points(n: usize, dim: usize, seed: u64) -> Result<FeatureSet> {
    let mut rng = stream(seed, Domain::Aux, n as u64, dim as u64);
    FeatureSet::new((0..n).map(|_| normals(&mut rng, dim)).collect())
}
