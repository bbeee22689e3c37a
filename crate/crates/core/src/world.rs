//! Stationary multi-class Gaussian fields and their exact denoiser.
//!
//! Class `c` is a Gaussian field with constant mean `class_means[c-1]` and a
//! squared-exponential covariance over pixel coordinates. Because the kernel is
//! stationary, every equally-shaped crop of a larger field has the same law, so
//! a patch-trained denoiser is exact on every crop of the canvas.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, Patch};

const JITTER: f64 = 1e-10;

/// Conditioning label. `Class` is 1-based; mask value 0 maps to `Null`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Null,
    Class(usize),
}

impl Label {
    pub fn from_mask_value(v: u32) -> Self {
        if v == 0 {
            Label::Null
        } else {
            Label::Class(v as usize)
        }
    }

    /// Dense index: `Null -> 0`, `Class(c) -> c`.
    pub fn index(self) -> usize {
        match self {
            Label::Null => 0,
            Label::Class(c) => c,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Null => f.write_str("null"),
            Label::Class(c) => write!(f, "c{c}"),
        }
    }
}

/// Noise predictor `eps_hat(z, t, label)`.
pub trait Denoiser: Send + Sync {
    /// Predicted noise for a `(channels, h, w)` input at time index `t`.
    fn epsilon(&self, z: &Patch, t: usize, label: Label) -> Result<Patch>;

    /// Whether an `h x w` input is accepted.
    fn supports(&self, height: usize, width: usize) -> bool;

    /// Number of conditional classes `N`.
    fn num_classes(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianWorld {
    /// Extent of the canonical training patch.
    pub height: usize,
    pub width: usize,
    /// Kernel length scale; `0` means independent pixels.
    pub corr_length: f64,
    pub class_means: Vec<f64>,
    /// Mean of the unconditional branch; defaults to the average class mean.
    #[serde(default)]
    pub null_mean: Option<f64>,
}

impl GaussianWorld {
    pub fn new(height: usize, width: usize, corr_length: f64, class_means: Vec<f64>) -> Result<Self> {
        let world = GaussianWorld {
            height,
            width,
            corr_length,
            class_means,
            null_mean: None,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn with_null_mean(mut self, null_mean: f64) -> Self {
        self.null_mean = Some(null_mean);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("world extent must be positive".into()));
        }
        if !(self.corr_length >= 0.0 && self.corr_length.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "corr_length must be finite and >= 0, got {}",
                self.corr_length
            )));
        }
        if self.class_means.is_empty() {
            return Err(Error::InvalidArgument("world needs at least one class".into()));
        }
        if self
            .class_means
            .iter()
            .chain(self.null_mean.iter())
            .any(|m| !m.is_finite())
        {
            return Err(Error::InvalidArgument("class means must be finite".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn null_mean(&self) -> f64 {
        self.null_mean
            .unwrap_or_else(|| self.class_means.iter().sum::<f64>() / self.class_means.len() as f64)
    }

    pub fn mean(&self, label: Label) -> Result<f64> {
        match label {
            Label::Null => Ok(self.null_mean()),
            Label::Class(c) if (1..=self.num_classes()).contains(&c) => Ok(self.class_means[c - 1]),
            Label::Class(c) => Err(Error::InvalidArgument(format!(
                "label {c} outside 1..={}",
                self.num_classes()
            ))),
        }
    }

    /// Kernel value between pixels `(r1, c1)` and `(r2, c2)`.
    pub fn kernel(&self, r1: usize, c1: usize, r2: usize, c2: usize) -> f64 {
        let dr = r1 as f64 - r2 as f64;
        let dc = c1 as f64 - c2 as f64;
        let d2 = dr * dr + dc * dc;
        if self.corr_length == 0.0 {
            return if d2 == 0.0 { 1.0 } else { 0.0 };
        }
        (-d2 / (2.0 * self.corr_length * self.corr_length)).exp()
    }

    /// Row-major pixel covariance of an `h x w` field (without jitter).
    pub fn covariance(&self, height: usize, width: usize) -> DMatrix<f64> {
        let d = height * width;
        DMatrix::from_fn(d, d, |i, j| self.kernel(i / width, i % width, j / width, j % width))
    }

    /// Lower Cholesky factor of the jittered covariance.
    pub fn cholesky_factor(&self, height: usize, width: usize) -> DMatrix<f64> {
        let d = height * width;
        let sigma = self.covariance(height, width) + DMatrix::identity(d, d) * JITTER;
        sigma
            .cholesky()
            .expect("squared-exponential kernel with jitter is positive definite")
            .l()
    }

    /// `mu_label + L xi` on an `h x w` grid, one channel.
    pub fn sample_field<R: Rng + ?Sized>(
        &self,
        height: usize,
        width: usize,
        label: Label,
        rng: &mut R,
    ) -> Result<Patch> {
        let factor = self.cholesky_factor(height, width);
        self.sample_with_factor(&factor, height, width, label, rng)
    }

    pub(crate) fn sample_with_factor<R: Rng + ?Sized>(
        &self,
        factor: &DMatrix<f64>,
        height: usize,
        width: usize,
        label: Label,
        rng: &mut R,
    ) -> Result<Patch> {
        let mu = self.mean(label)?;
        let xi = nalgebra::DVector::from_vec(crate::rng::normals(rng, height * width));
        let x = factor * xi;
        Ok(Patch::from_shape_fn((1, height, width), |(_, r, c)| {
            mu + x[r * width + c]
        }))
    }

    /// One draw from the canonical patch distribution of `label`.
    pub fn sample_patch<R: Rng + ?Sized>(&self, label: Label, rng: &mut R) -> Result<Patch> {
        self.sample_field(self.height, self.width, label, rng)
    }

    /// Exact `E[eps | z]` for a `(channels, h, w)` input; channels are independent.
    ///
    /// Builds the time-`t` operator from scratch; [`AnalyticDenoiser`] caches it.
    pub fn analytic_epsilon(&self, z: &Patch, t: usize, label: Label, s: &NoiseSchedule) -> Result<Patch> {
        let (_, h, w) = z.dim();
        if t > s.steps() {
            return Err(Error::TimeOutOfRange { t, max: s.steps() });
        }
        let op = EpsilonOperator::build(self, h, w, t, s);
        op.apply(z, s.gamma(t) * self.mean(label)?)
    }
}

/// Dense `sigma_t (gamma_t^2 Sigma + sigma_t^2 I)^-1`, stored row-major.
#[derive(Debug, Clone)]
struct EpsilonOperator {
    dim: usize,
    rows: Vec<f64>,
}

impl EpsilonOperator {
    fn build(world: &GaussianWorld, h: usize, w: usize, t: usize, s: &NoiseSchedule) -> Self {
        let d = h * w;
        let (g, sg) = (s.gamma(t), s.sigma(t));
        let system = world.covariance(h, w) * (g * g) + DMatrix::identity(d, d) * (sg * sg + g * g * JITTER);
        let inv = system
            .cholesky()
            .expect("posterior system is positive definite")
            .inverse();
        let mut rows = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                rows[i * d + j] = sg * inv[(i, j)];
            }
        }
        EpsilonOperator { dim: d, rows }
    }

    fn apply(&self, z: &Patch, shift: f64) -> Result<Patch> {
        let (ch, h, w) = z.dim();
        if h * w != self.dim {
            return Err(Error::shape(&[ch, self.dim], &[ch, h * w]));
        }
        let mut out = Patch::zeros((ch, h, w));
        let mut centred = vec![0.0; self.dim];
        for c in 0..ch {
            for (k, v) in z.index_axis(ndarray::Axis(0), c).iter().enumerate() {
                centred[k] = v - shift;
            }
            let mut plane = out.index_axis_mut(ndarray::Axis(0), c);
            for (i, o) in plane.iter_mut().enumerate() {
                let row = &self.rows[i * self.dim..(i + 1) * self.dim];
                *o = row.iter().zip(&centred).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }
}

/// Operators for every time index, keyed by crop shape.
type OperatorCache = RwLock<HashMap<(usize, usize), Arc<Vec<EpsilonOperator>>>>;

/// The exact denoiser, with per-shape operators cached for every time index.
pub struct AnalyticDenoiser {
    world: GaussianWorld,
    schedule: NoiseSchedule,
    cache: OperatorCache,
}

impl AnalyticDenoiser {
    pub fn new(world: GaussianWorld, schedule: NoiseSchedule) -> Result<Self> {
        world.validate()?;
        Ok(AnalyticDenoiser {
            world,
            schedule,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn world(&self) -> &GaussianWorld {
        &self.world
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn operators(&self, h: usize, w: usize) -> Arc<Vec<EpsilonOperator>> {
        if let Some(ops) = self.cache.read().unwrap().get(&(h, w)) {
            return ops.clone();
        }
        let ops: Vec<_> = (0..=self.schedule.steps())
            .map(|t| EpsilonOperator::build(&self.world, h, w, t, &self.schedule))
            .collect();
        let ops = Arc::new(ops);
        self.cache.write().unwrap().entry((h, w)).or_insert(ops).clone()
    }
}

impl fmt::Debug for AnalyticDenoiser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticDenoiser")
            .field("world", &self.world)
            .field("steps", &self.schedule.steps())
            .finish_non_exhaustive()
    }
}

impl Denoiser for AnalyticDenoiser {
    fn epsilon(&self, z: &Patch, t: usize, label: Label) -> Result<Patch> {
        if t > self.schedule.steps() {
            return Err(Error::TimeOutOfRange {
                t,
                max: self.schedule.steps(),
            });
        }
        let (_, h, w) = z.dim();
        let shift = self.schedule.gamma(t) * self.world.mean(label)?;
        self.operators(h, w)[t].apply(z, shift)
    }

    fn supports(&self, _height: usize, _width: usize) -> bool {
        true
    }

    fn num_classes(&self) -> usize {
        self.world.num_classes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use approx::assert_abs_diff_eq;
    use ndarray::arr3;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(20, 0.0).unwrap()
    }

    #[test]
    fn prior_mean_gives_zero_noise() {
        let world = GaussianWorld::new(3, 4, 1.5, vec![0.7, -1.0]).unwrap();
        let s = schedule();
        for t in [1, 10, 20] {
            let z = Patch::from_elem((1, 3, 4), -s.gamma(t));
            let eps = world.analytic_epsilon(&z, t, Label::Class(2), &s).unwrap();
            assert!(eps.iter().all(|e| *e == 0.0));
        }
    }

    #[test]
    fn single_pixel_closed_form() {
        let world = GaussianWorld::new(1, 1, 2.0, vec![0.0]).unwrap();
        let s = schedule();
        for t in 1..=20 {
            let z = arr3(&[[[1.3]]]);
            let eps = world.analytic_epsilon(&z, t, Label::Class(1), &s).unwrap();
            let expected = s.sigma(t) * 1.3 / (s.gamma(t).powi(2) * (1.0 + JITTER) + s.sigma(t).powi(2));
            assert_abs_diff_eq!(eps[[0, 0, 0]], expected, epsilon = 1e-12);
            assert_abs_diff_eq!(eps[[0, 0, 0]], s.sigma(t) * 1.3, epsilon = 1e-9);
        }
    }

    #[test]
    fn two_pixel_matches_direct_inverse() {
        let ell = 1.3;
        let world = GaussianWorld::new(1, 2, ell, vec![0.4]).unwrap();
        let rho = (-1.0 / (2.0 * ell * ell)).exp();
        let s = schedule();
        let t = 7;
        let (g, sg) = (s.gamma(t), s.sigma(t));
        let z = arr3(&[[[0.9, -0.2]]]);
        let (r0, r1) = (0.9 - g * 0.4, -0.2 - g * 0.4);
        // [[a, b], [b, a]]^-1 = [[a, -b], [-b, a]] / (a^2 - b^2)
        let a = g * g * (1.0 + JITTER) + sg * sg;
        let b = g * g * rho;
        let det = a * a - b * b;
        let e0 = sg * (a * r0 - b * r1) / det;
        let e1 = sg * (-b * r0 + a * r1) / det;
        let eps = world.analytic_epsilon(&z, t, Label::Class(1), &s).unwrap();
        assert_abs_diff_eq!(eps[[0, 0, 0]], e0, epsilon = 1e-12);
        assert_abs_diff_eq!(eps[[0, 0, 1]], e1, epsilon = 1e-12);
    }

    #[test]
    fn epsilon_is_affine() {
        let world = GaussianWorld::new(3, 3, 1.0, vec![0.5, -0.5]).unwrap();
        let s = schedule();
        let mut rng = stream(1, Domain::Aux, 0, 0);
        let z1 = Patch::from_shape_vec((1, 3, 3), crate::rng::normals(&mut rng, 9)).unwrap();
        let z2 = Patch::from_shape_vec((1, 3, 3), crate::rng::normals(&mut rng, 9)).unwrap();
        let a = 0.3;
        for label in [Label::Null, Label::Class(1), Label::Class(2)] {
            for t in [1, 8, 20] {
                let mix = &z1 * a + &z2 * (1.0 - a);
                let lhs = world.analytic_epsilon(&mix, t, label, &s).unwrap();
                let rhs = world.analytic_epsilon(&z1, t, label, &s).unwrap() * a
                    + world.analytic_epsilon(&z2, t, label, &s).unwrap() * (1.0 - a);
                for (l, r) in lhs.iter().zip(rhs.iter()) {
                    assert_abs_diff_eq!(*l, *r, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn cached_denoiser_agrees_with_direct() {
        let world = GaussianWorld::new(4, 4, 2.0, vec![1.0]).unwrap();
        let s = schedule();
        let den = AnalyticDenoiser::new(world.clone(), s.clone()).unwrap();
        let mut rng = stream(2, Domain::Aux, 0, 0);
        let z = Patch::from_shape_vec((2, 4, 4), crate::rng::normals(&mut rng, 32)).unwrap();
        for t in [1, 11, 20] {
            let a = den.epsilon(&z, t, Label::Null).unwrap();
            let b = world.analytic_epsilon(&z, t, Label::Null, &s).unwrap();
            assert_eq!(a, b);
        }
        assert!(den.epsilon(&z, 21, Label::Null).is_err());
        assert!(den.epsilon(&z, 3, Label::Class(2)).is_err());
    }

    #[test]
    fn covariance_is_positive_definite() {
        for ell in [0.0, 0.5, 3.0, 30.0] {
            let world = GaussianWorld::new(6, 6, ell, vec![0.0]).unwrap();
            let sigma = world.covariance(6, 6);
            assert_eq!(sigma, sigma.transpose());
            let _ = world.cholesky_factor(6, 6);
        }
    }

    #[test]
    fn equal_crops_have_equal_moments() {
        let world = GaussianWorld::new(3, 3, 2.5, vec![0.2]).unwrap();
        let (big_h, big_w) = (7, 9);
        let big = world.covariance(big_h, big_w);
        let crop = |r0: usize, c0: usize| {
            let idx: Vec<usize> = (0..3)
                .flat_map(|r| (0..3).map(move |c| (r0 + r) * big_w + c0 + c))
                .collect();
            DMatrix::from_fn(9, 9, |i, j| big[(idx[i], idx[j])])
        };
        let reference = crop(0, 0);
        assert_eq!(reference, world.covariance(3, 3));
        for (r0, c0) in [(1, 2), (4, 6), (2, 0), (4, 1)] {
            assert_eq!(crop(r0, c0), reference);
        }
    }

    #[test]
    fn independent_pixels_have_unit_variance() {
        let world = GaussianWorld::new(2, 2, 0.0, vec![0.0]).unwrap();
        let mut rng = stream(5, Domain::Aux, 0, 0);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let x = world.sample_patch(Label::Class(1), &mut rng).unwrap();
            sum += x[[0, 0, 0]];
            sq += x[[0, 0, 0]] * x[[0, 0, 0]];
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn class_mean_monte_carlo() {
        let world = GaussianWorld::new(2, 3, 1.0, vec![-2.0, 1.5]).unwrap();
        let mut rng = stream(6, Domain::Aux, 0, 0);
        let n = 10_000;
        let factor = world.cholesky_factor(2, 3);
        let mean = (0..n)
            .map(|_| {
                world
                    .sample_with_factor(&factor, 2, 3, Label::Class(2), &mut rng)
                    .unwrap()[[0, 1, 2]]
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.5).abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn pixel_correlation_follows_kernel() {
        let ell = 2.0;
        let world = GaussianWorld::new(1, 5, ell, vec![0.0]).unwrap();
        let factor = world.cholesky_factor(1, 5);
        let mut rng = stream(7, Domain::Aux, 0, 0);
        let n = 10_000;
        let draws: Vec<_> = (0..n)
            .map(|_| {
                world
                    .sample_with_factor(&factor, 1, 5, Label::Class(1), &mut rng)
                    .unwrap()
            })
            .collect();
        for r in [1usize, 2, 3] {
            let a: Vec<f64> = draws.iter().map(|x| x[[0, 0, 0]]).collect();
            let b: Vec<f64> = draws.iter().map(|x| x[[0, 0, r]]).collect();
            let corr = crate::metrics::pearson(&a, &b).unwrap();
            let expected = (-((r * r) as f64) / (2.0 * ell * ell)).exp();
            assert!((corr - expected).abs() < 0.05, "r={r} corr={corr} expected={expected}");
        }
    }
}
