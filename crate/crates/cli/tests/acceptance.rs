//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion even when an earlier one fails and exits non-zero if
//! any failed. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p patchcanvas-cli --test acceptance -- 4 6`.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use patchcanvas_core::canvas::{crop, CoveragePlan, LatentCanvas, TimeStateGrid};
use patchcanvas_core::codec::{hann_decode, hann_decode_ordered, hann_tiles, IdentityCodec};
use patchcanvas_core::mask::{clean_mask, generate_mask, LabelQuantizer, SegmentationMask};
use patchcanvas_core::metrics::{authenticity, ct_score, improved_precision_recall, mann_whitney_z, FeatureSet};
use patchcanvas_core::rng::{normals, stream, Domain};
use patchcanvas_core::sampler::{
    branches, cfg_mix, compare_cost, GuidanceConfig, SamplerRun, SchedulerKind, StepObserver,
};
use patchcanvas_core::schedule::{corrupt, ddim_step};
use patchcanvas_core::train::{train_toy, LinearDenoiser};
use patchcanvas_core::world::{AnalyticDenoiser, Denoiser, GaussianWorld, Label};
use patchcanvas_core::{NoiseSchedule, Patch};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_for<'a>(
    schedule: &'a NoiseSchedule,
    den: &'a dyn Denoiser,
    mask: &'a SegmentationMask,
    kind: SchedulerKind,
    patch: (usize, usize),
    omega: f64,
    seed: u64,
) -> SamplerRun<'a> {
    SamplerRun {
        schedule,
        guidance: GuidanceConfig { omega, p_unc: 0.0 },
        seed,
        kind,
        patch_h: patch.0,
        patch_w: patch.1,
        channels: 1,
        denoiser: den,
        mask,
    }
}

// ---------------------------------------------------------------------------
// Closed-form oracle for the full-canvas deterministic sampler.
//
// With eta = 0 and the exact Gaussian denoiser every reverse step is affine,
// y <- M_t y + c_t, so the output is P y_T + m with y_T ~ N(0, I): mean m and
// covariance P P^T. Everything here is rebuilt from the defining formulas.

fn oracle_alpha_bar(steps: usize) -> Vec<f64> {
    let scale = 1000.0 / steps as f64;
    let (lo, hi) = (1e-4 * scale, 0.02 * scale);
    let mut ab = vec![1.0];
    for k in 0..steps {
        let beta = (lo + (hi - lo) * k as f64 / (steps - 1) as f64).min(0.999);
        ab.push(ab[k] * (1.0 - beta));
    }
    ab
}

fn oracle_reference(h: usize, w: usize, ell: f64, mu: f64, steps: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = h * w;
    let cov = DMatrix::from_fn(d, d, |i, j| {
        let (dr, dc) = ((i / w) as f64 - (j / w) as f64, (i % w) as f64 - (j % w) as f64);
        (-(dr * dr + dc * dc) / (2.0 * ell * ell)).exp() + if i == j { 1e-10 } else { 0.0 }
    });
    let ab = oracle_alpha_bar(steps);
    let mut p = DMatrix::<f64>::identity(d, d);
    let mut m = DVector::<f64>::zeros(d);
    for t in (1..=steps).rev() {
        let (g, sg) = (ab[t].sqrt(), (1.0 - ab[t]).sqrt());
        let a = (ab[t - 1] / ab[t]).sqrt();
        let b = (1.0 - ab[t - 1]).sqrt() - ab[t - 1].sqrt() * sg / g;
        let system = &cov * (g * g) + DMatrix::identity(d, d) * (sg * sg);
        let k = system.try_inverse().expect("positive definite") * sg;
        let step = DMatrix::identity(d, d) * a + &k * b;
        let shift = -(&k * DVector::from_element(d, g * mu)) * b;
        p = &step * p;
        m = &step * m + shift;
    }
    (m, &p * p.transpose())
}

// ---------------------------------------------------------------------------
// Shared draws for criteria 2 and 3.

const FIDELITY_N: usize = 2000;
const FIDELITY_T: usize = 50;
const FIDELITY_ELL: f64 = 6.0;
const FIDELITY_MU: f64 = 0.5;

struct FidelityDraws {
    patched: Vec<LatentCanvas>,
    tiles: Vec<LatentCanvas>,
    reference_mean: DVector<f64>,
    reference_cov: DMatrix<f64>,
    elapsed: Duration,
}

fn fidelity_draws() -> &'static FidelityDraws {
    static DRAWS: OnceLock<FidelityDraws> = OnceLock::new();
    DRAWS.get_or_init(|| {
        let start = Instant::now();
        let schedule = NoiseSchedule::linear(FIDELITY_T, 0.0).unwrap();
        let world = GaussianWorld::new(8, 8, FIDELITY_ELL, vec![FIDELITY_MU]).unwrap();
        let den = AnalyticDenoiser::new(world, schedule.clone()).unwrap();
        let mask = SegmentationMask::uniform(16, 16, 1);
        let draw = |kind| -> Vec<LatentCanvas> {
            (0..FIDELITY_N as u64)
                .into_par_iter()
                .map(|seed| {
                    run_for(&schedule, &den, &mask, kind, (8, 8), 0.0, seed)
                        .sample(16, 16)
                        .unwrap()
                        .canvas
                })
                .collect()
        };
        let patched = draw(SchedulerKind::RandomPatch);
        let tiles = draw(SchedulerKind::IndependentTiles);
        let (reference_mean, reference_cov) = oracle_reference(16, 16, FIDELITY_ELL, FIDELITY_MU, FIDELITY_T);
        FidelityDraws {
            patched,
            tiles,
            reference_mean,
            reference_cov,
            elapsed: start.elapsed(),
        }
    })
}

fn pixel_series(samples: &[LatentCanvas], r: usize, c: usize) -> Vec<f64> {
    samples.iter().map(|s| s[[0, r, c]]).collect()
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let schedule = NoiseSchedule::linear(50, 0.0).unwrap();
    let den = AnalyticDenoiser::new(GaussianWorld::new(8, 8, 3.0, vec![0.7]).unwrap(), schedule.clone()).unwrap();
    let mask = SegmentationMask::uniform(8, 8, 1);
    let mut equal = 0;
    for seed in 0..20 {
        let a = run_for(&schedule, &den, &mask, SchedulerKind::RandomPatch, (8, 8), 0.0, seed)
            .sample(8, 8)
            .unwrap();
        let b = run_for(&schedule, &den, &mask, SchedulerKind::FullCanvas, (8, 8), 0.0, seed)
            .sample(8, 8)
            .unwrap();
        if a.canvas
            .iter()
            .zip(b.canvas.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
        {
            equal += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        equal == 20 && secs < 10.0,
        format!("{equal}/20 seeds bitwise equal to the full-canvas reference in {secs:.2} s"),
    )
}

fn criterion_2() -> Outcome {
    let draws = fidelity_draws();
    let n = draws.patched.len();
    let d = 256;
    let x = DMatrix::from_fn(n, d, |i, j| draws.patched[i][[0, j / 16, j % 16]]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centred = x.clone();
    for j in 0..d {
        centred.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let mean_err = (&mean - &draws.reference_mean).amax();
    let r = &draws.reference_cov;
    let (mut worst, mut worst_at, mut violations) = (0.0f64, (0, 0), 0);
    for i in 0..d {
        for j in 0..d {
            let se = ((r[(i, i)] * r[(j, j)] + r[(i, j)].powi(2)) / n as f64).sqrt();
            let tol = f64::max(0.08, 4.0 * se);
            let err = (cov[(i, j)] - r[(i, j)]).abs();
            if err > tol {
                violations += 1;
            }
            if err - tol > worst {
                worst = err - tol;
                worst_at = (i, j);
            }
        }
    }
    let (wi, wj) = worst_at;
    let secs = draws.elapsed.as_secs_f64();
    check(
        mean_err <= 0.05 && violations == 0 && secs < 600.0,
        format!(
            "max |mean err| {mean_err:.4} (tol 0.05); {violations}/{} covariance entries out of tolerance, worst ({wi},{wj}): empirical {:.3} vs reference {:.3}; sampling {secs:.1} s",
            d * d,
            cov[(wi, wj)],
            r[(wi, wj)]
        ),
    )
}

fn criterion_3() -> Outcome {
    let draws = fidelity_draws();
    let n = draws.patched.len();
    let se = 1.0 / (n as f64).sqrt();
    let (p1, p2) = ((4, 4), (4, 12));
    let r_di = corr(
        &pixel_series(&draws.patched, p1.0, p1.1),
        &pixel_series(&draws.patched, p2.0, p2.1),
    );
    let r_tiles = corr(
        &pixel_series(&draws.tiles, p1.0, p1.1),
        &pixel_series(&draws.tiles, p2.0, p2.1),
    );
    let cov = &draws.reference_cov;
    let (i, j) = (p1.0 * 16 + p1.1, p2.0 * 16 + p2.1);
    let r_ref = cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt();
    let matches = (r_di - r_ref).abs() <= 3.0 * se;
    let tiles_zero = r_tiles.abs() <= 3.0 * se;
    let exceeds = r_di - r_tiles >= 5.0 * se;
    check(
        matches && tiles_zero && exceeds,
        format!(
            "corr (4,4)-(4,12): random-patch {r_di:.3}, reference {r_ref:.3} (match within 3 SE: {matches}), independent tiles {r_tiles:.3} (zero within 3 SE: {tiles_zero}), gap {:.1} SE (>= 5: {exceeds})",
            (r_di - r_tiles) / se
        ),
    )
}

/// Recomputes every crop of every step from the replica and checks the
/// time-state grid, first-write attribution and the written values.
struct Auditor<'a> {
    run: SamplerRun<'a>,
    previous: LatentCanvas,
    plan: Option<CoveragePlan>,
    expected: Vec<Patch>,
    steps_seen: usize,
    violations: Vec<String>,
}

impl Auditor<'_> {
    fn expected_crop(
        &self,
        replica: &LatentCanvas,
        p: &patchcanvas_core::PatchProjection,
        t: usize,
        ordinal: usize,
    ) -> Patch {
        let z = crop(replica, p).unwrap();
        let region = self
            .run
            .mask
            .labels
            .slice(s![p.row0..p.row0 + p.patch_h, p.col0..p.col0 + p.patch_w]);
        let omega = self.run.guidance.omega;
        let eps_of = |l: Label| self.run.denoiser.epsilon(&z, t, l).unwrap();
        let null = eps_of(Label::Null);
        let mut eps = Patch::zeros(z.raw_dim());
        for label in branches(region, omega) {
            let Label::Class(c) = label else { continue };
            let guided = cfg_mix(&eps_of(label), &null, omega).unwrap();
            for ((k, r, q), v) in eps.indexed_iter_mut() {
                if region[[r, q]] == c as u32 {
                    *v = guided[[k, r, q]];
                }
            }
        }
        for ((k, r, q), v) in eps.indexed_iter_mut() {
            if region[[r, q]] == 0 {
                *v = null[[k, r, q]];
            }
        }
        let noise = (self.run.schedule.ddim_sigma(t) > 0.0).then(|| {
            let mut rng = stream(self.run.seed, Domain::StepNoise, t as u64, ordinal as u64);
            Patch::from_shape_vec(z.raw_dim(), normals(&mut rng, z.len())).unwrap()
        });
        ddim_step(&z, &eps, t, self.run.schedule, noise.as_ref()).unwrap()
    }
}

impl StepObserver for Auditor<'_> {
    fn on_step_start(&mut self, t: usize, replica: &LatentCanvas, plan: &CoveragePlan) {
        if replica != self.previous {
            self.violations
                .push(format!("step {t}: replica differs from the previous step's canvas"));
        }
        let (h, w) = (replica.dim().1, replica.dim().2);
        if let Err(e) = plan.validate(h, w) {
            self.violations.push(format!("step {t}: {e}"));
        }
        self.expected = plan
            .projections
            .iter()
            .enumerate()
            .map(|(j, p)| self.expected_crop(replica, p, t + 1, j))
            .collect();
        self.plan = Some(plan.clone());
    }

    fn on_step_end(&mut self, t: usize, canvas: &LatentCanvas, grid: &TimeStateGrid, owner: &Array2<usize>) {
        self.steps_seen += 1;
        if !grid.all_equal(t) {
            self.violations
                .push(format!("step {t}: time states {:?}", grid.distinct()));
        }
        let plan = self.plan.take().expect("start precedes end");
        for ((r, c), &o) in owner.indexed_iter() {
            let first = plan.projections.iter().position(|p| p.contains(r, c));
            if first != Some(o) {
                self.violations
                    .push(format!("step {t}: pixel ({r},{c}) owned by {o}, first cover {first:?}"));
                continue;
            }
            let p = &plan.projections[o];
            for k in 0..canvas.dim().0 {
                let want = self.expected[o][[k, r - p.row0, c - p.col0]];
                if canvas[[k, r, c]].to_bits() != want.to_bits() {
                    self.violations
                        .push(format!("step {t}: pixel ({r},{c}) value not from crop {o}"));
                }
            }
        }
        self.previous = canvas.clone();
    }
}

fn criterion_4() -> Outcome {
    let mut violations = Vec::new();
    let mut steps = 0;
    for cfg in 0..100u64 {
        let mut rng = stream(cfg, Domain::Aux, 4, 0);
        let (h, w) = (rng.random_range(4..=20), rng.random_range(4..=20));
        let (ph, pw) = (rng.random_range(1..=h.min(8)), rng.random_range(1..=w.min(8)));
        let n = rng.random_range(1..=3);
        let schedule = NoiseSchedule::linear(rng.random_range(2..=6), [0.0, 0.5, 1.0][rng.random_range(0..3)]).unwrap();
        let means: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let world = GaussianWorld::new(ph, pw, rng.random_range(0.0..3.0), means).unwrap();
        let den = AnalyticDenoiser::new(world, schedule.clone()).unwrap();
        let labels = Array2::from_shape_fn((h, w), |_| rng.random_range(0..=n as u32));
        let mask = SegmentationMask::new(labels, 0);
        let kind = if rng.random_bool(0.7) {
            SchedulerKind::RandomPatch
        } else {
            SchedulerKind::SlidingWindow
        };
        let mut run = run_for(
            &schedule,
            &den,
            &mask,
            kind,
            (ph, pw),
            [0.0, 1.5][rng.random_range(0..2)],
            cfg,
        );
        run.channels = rng.random_range(1..=2);
        let mut auditor = Auditor {
            run,
            previous: run.initial_canvas(h, w),
            plan: None,
            expected: Vec::new(),
            steps_seen: 0,
            violations: Vec::new(),
        };
        let result = match kind {
            SchedulerKind::RandomPatch => run.sample_diffinfinite_observed(h, w, &mut auditor),
            _ => run.sample_sliding_window_observed(h, w, &mut auditor),
        };
        let out = result.map_err(|e| format!("config {cfg}: {e}"))?;
        if out.canvas != auditor.previous {
            auditor
                .violations
                .push(format!("config {cfg}: returned canvas differs from the last step"));
        }
        if auditor.steps_seen != schedule.steps() {
            auditor
                .violations
                .push(format!("config {cfg}: {} steps observed", auditor.steps_seen));
        }
        steps += auditor.steps_seen;
        violations.extend(auditor.violations.into_iter().map(|v| format!("config {cfg}: {v}")));
    }
    check(
        violations.is_empty(),
        format!(
            "100 configurations, {steps} outer steps: {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let steps = 50;
    let (ph, pw) = (8, 8);
    let schedule = NoiseSchedule::linear(steps, 0.0).unwrap();
    let den = AnalyticDenoiser::new(GaussianWorld::new(ph, pw, 6.0, vec![0.0]).unwrap(), schedule.clone()).unwrap();
    let mask = SegmentationMask::uniform(ph, pw, 1);
    let template = run_for(&schedule, &den, &mask, SchedulerKind::RandomPatch, (ph, pw), 0.0, 0);
    let sizes: Vec<(usize, usize)> = [1, 2, 4, 8].iter().map(|&m| (m * ph, m * pw)).collect();
    let csv = compare_cost(&sizes, &template).map_err(|e| e.to_string())?.to_csv();
    let mut lines = csv.lines();
    let mut problems = Vec::new();
    if lines.next() != Some("size,scheduler,calls_literal,calls_effective,depth") {
        problems.push("bad header".to_string());
    }
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let row = |size: (usize, usize), kind: &str| -> Option<(u64, u64, u64)> {
        let key = format!("{}x{}", size.0, size.1);
        rows.iter()
            .find(|r| r[0] == key && r[1] == kind)
            .map(|r| (r[2].parse().unwrap(), r[3].parse().unwrap(), r[4].parse().unwrap()))
    };
    let mut sliding_depths = Vec::new();
    for &(h, w) in &sizes {
        match row((h, w), "random-patch") {
            Some((_, _, depth)) if depth == steps as u64 => {}
            other => problems.push(format!("random-patch {h}x{w}: {other:?}")),
        }
        let origins = ((2 * h / ph - 1) * (2 * w / pw - 1)) as u64;
        match row((h, w), "sliding-window") {
            Some((lit, eff, depth)) => {
                if eff != origins * steps as u64 || lit != 2 * origins * steps as u64 {
                    problems.push(format!(
                        "sliding-window {h}x{w}: calls {eff}/{lit}, expected {} per step",
                        origins
                    ));
                }
                sliding_depths.push(depth);
            }
            None => problems.push(format!("sliding-window {h}x{w}: missing")),
        }
    }
    if !sliding_depths.windows(2).all(|p| p[0] < p[1]) {
        problems.push(format!("sliding-window depth not increasing: {sliding_depths:?}"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        problems.push(format!("took {secs:.1} s"));
    }
    check(
        problems.is_empty(),
        format!(
            "random-patch depth {steps} at all sizes, sliding-window depth {sliding_depths:?}; {}",
            if problems.is_empty() {
                "origin counts match (2H/h-1)(2W/w-1)".to_string()
            } else {
                problems.join("; ")
            }
        ),
    )
}

fn criterion_6() -> Outcome {
    let (mut worst, mut order_changes) = (0.0f64, 0);
    for i in 0..50u64 {
        let mut rng = stream(i, Domain::Aux, 6, 0);
        let (c, h, w) = (
            rng.random_range(1..=3),
            rng.random_range(4..=40),
            rng.random_range(4..=40),
        );
        let th = 2 * rng.random_range(1..=h / 2);
        let tw = 2 * rng.random_range(1..=w / 2);
        let latent = Patch::from_shape_vec((c, h, w), normals(&mut rng, c * h * w)).unwrap();
        let out = hann_decode(&latent, &IdentityCodec, th, tw).map_err(|e| e.to_string())?;
        worst = (&out - &latent).iter().fold(worst, |m, v| m.max(v.abs()));
        let mut order: Vec<usize> = (0..hann_tiles(h, w, th, tw).unwrap().len()).collect();
        order.shuffle(&mut rng);
        let shuffled = hann_decode_ordered(&latent, &IdentityCodec, th, tw, &order).map_err(|e| e.to_string())?;
        if shuffled.iter().zip(out.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            order_changes += 1;
        }
    }
    check(
        worst < 1e-12 && order_changes == 0,
        format!(
            "50 latents: max reconstruction error {worst:.2e} (< 1e-12), {order_changes} outputs changed by tile order"
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let schedule = NoiseSchedule::linear(20, 0.0).unwrap();
    let world = GaussianWorld::new(4, 4, 1.0, vec![-0.5, 0.5]).unwrap();
    let init = LinearDenoiser::zeros(4, 4, 20, 2);
    let mut rng = stream(7, Domain::Train, 0, 0);
    let (learned, report) = train_toy(&world, init, &schedule, 0.5, 200_000, &mut rng).map_err(|e| e.to_string())?;
    let oracle = AnalyticDenoiser::new(world.clone(), schedule.clone()).unwrap();
    let mut held = stream(7, Domain::Aux, 7, 0);
    let (mut err, mut norm) = (0.0, 0.0);
    for _ in 0..1000 {
        let label = Label::Class(held.random_range(1..=2));
        let t = held.random_range(1..=20);
        let x0 = world.sample_patch(label, &mut held).unwrap();
        let eps = Patch::from_shape_vec((1, 4, 4), normals(&mut held, 16)).unwrap();
        let z = corrupt(&x0, t, &eps, &schedule).unwrap();
        let a = oracle.epsilon(&z, t, label).unwrap();
        let b = learned.epsilon(&z, t, label).unwrap();
        err += (&a - &b).mapv(|v| v * v).sum();
        norm += a.mapv(|v| v * v).sum();
    }
    let rel = err / norm;
    let secs = start.elapsed().as_secs_f64();
    check(
        rel < 0.05 && secs < 300.0,
        format!(
            "relative MSE {:.2}% over 1000 held-out triples (< 5%), {} unconditional draws, {secs:.1} s",
            rel * 100.0,
            report.unconditional_draws
        ),
    )
}

/// Plain re-derivation of improved precision/recall.
fn brute_ip_ir(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> (f64, f64) {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let radii = |set: &[Vec<f64>]| -> Vec<f64> {
        set.iter()
            .enumerate()
            .map(|(i, p)| {
                let mut d: Vec<f64> = set
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| dist(p, q))
                    .collect();
                d.sort_by(f64::total_cmp);
                d[k - 1]
            })
            .collect()
    };
    let frac = |queries: &[Vec<f64>], manifold: &[Vec<f64>]| {
        let r = radii(manifold);
        queries
            .iter()
            .filter(|q| manifold.iter().zip(&r).any(|(m, &rad)| dist(q, m) <= rad))
            .count() as f64
            / queries.len() as f64
    };
    (frac(gen, real), frac(real, gen))
}

fn multisets(max_len: usize) -> Vec<Vec<f64>> {
    fn extend(prefix: &mut Vec<f64>, lo: u32, left: usize, out: &mut Vec<Vec<f64>>) {
        if !prefix.is_empty() {
            out.push(prefix.clone());
        }
        if left == 0 {
            return;
        }
        for v in lo..=6 {
            prefix.push(v as f64);
            extend(prefix, v, left - 1, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), 1, max_len, &mut out);
    out
}

fn criterion_8() -> Outcome {
    // (a) precision/recall against the brute-force definition
    let mut ip_mismatch = 0;
    for i in 0..50u64 {
        let mut rng = stream(i, Domain::Aux, 8, 0);
        let dim = rng.random_range(1..=4);
        let (nr, ng) = (rng.random_range(2..=100), rng.random_range(2..=100));
        let k = rng.random_range(1..nr.min(ng).min(6));
        let mut draw = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| normals(&mut rng, dim)).collect() };
        let (real, gen) = (draw(nr), draw(ng));
        let got = improved_precision_recall(
            &FeatureSet::new(real.clone()).unwrap(),
            &FeatureSet::new(gen.clone()).unwrap(),
            k,
        )
        .unwrap();
        if got != brute_ip_ir(&real, &gen, k) {
            ip_mismatch += 1;
        }
    }
    // (b) Mann-Whitney against direct rank enumeration, exhaustively
    let sets = multisets(6);
    let worst_mw = sets
        .par_iter()
        .map(|a| {
            sets.iter()
                .map(|b| {
                    let mut u = 0.0;
                    for x in b {
                        for y in a {
                            u += if x > y {
                                1.0
                            } else if x == y {
                                0.5
                            } else {
                                0.0
                            };
                        }
                    }
                    let (na, nb) = (a.len() as f64, b.len() as f64);
                    let z = (u - na * nb / 2.0) / (na * nb * (na + nb + 1.0) / 12.0).sqrt();
                    (mann_whitney_z(a, b).unwrap() - z).abs()
                })
                .fold(0.0f64, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    // (c) data copying and authenticity on 1-D Gaussians
    let gaussian = |seed: u64, stream_id: u64| {
        FeatureSet::from_scalars(&normals(&mut stream(seed, Domain::Aux, 80, stream_id), 500)).unwrap()
    };
    let (train, test) = (gaussian(0, 0), gaussian(0, 1));
    let copy_ct = ct_score(&train, &test, &train, 5, None, 0).unwrap().ct;
    let copy_a = authenticity(&train, &train).unwrap().authenticity;
    let mut null_ok = 0;
    let mut auth = Vec::new();
    for seed in 1..=20 {
        let (train, test, gen) = (gaussian(seed, 0), gaussian(seed, 1), gaussian(seed, 2));
        if ct_score(&train, &test, &gen, 5, None, seed).unwrap().ct.abs() < 3.0 {
            null_ok += 1;
        }
        auth.push(authenticity(&train, &gen).unwrap().authenticity);
    }
    let min_auth = auth.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_auth = auth.iter().sum::<f64>() / auth.len() as f64;
    let a_ok = ip_mismatch == 0;
    let b_ok = worst_mw < 1e-12;
    let c_ok = copy_ct < -3.0 && copy_a == 0.0 && null_ok >= 18 && min_auth > 0.9;
    check(
        a_ok && b_ok && c_ok,
        format!(
            "(a) {ip_mismatch}/50 IP/IR mismatches; (b) {} multiset pairs, max |dz| {worst_mw:.1e}; (c) copies: C_T {copy_ct:.1}, A {copy_a}; same law: |C_T| < 3 in {null_ok}/20, authenticity min {min_auth:.3} mean {mean_auth:.3} (need > 0.9)",
            sets.len() * sets.len()
        ),
    )
}

fn random_mask(rng: &mut impl Rng) -> SegmentationMask {
    let (h, w) = (rng.random_range(3..=20), rng.random_range(3..=20));
    let mut labels = Array2::from_elem((h, w), rng.random_range(0..=4u32));
    for _ in 0..rng.random_range(0..8) {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (rng.random_range(r0..h) + 1, rng.random_range(c0..w) + 1);
        labels.slice_mut(s![r0..r1, c0..c1]).fill(rng.random_range(0..=4));
    }
    for _ in 0..rng.random_range(0..6) {
        let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
        labels[[r, c]] = rng.random_range(0..=4);
    }
    SegmentationMask::new(labels, 0)
}

fn criterion_9() -> Outcome {
    let mut failures = 0;
    for i in 0..1000u64 {
        let mut rng = stream(i, Domain::Aux, 9, 0);
        let m = random_mask(&mut rng);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let once = clean_mask(&m, k).unwrap();
        let twice = clean_mask(&once, k).unwrap();
        let mut allowed: BTreeSet<u32> = m.label_set();
        allowed.insert(0);
        if once.labels != twice.labels || !once.label_set().is_subset(&allowed) {
            failures += 1;
        }
    }
    let mut isolated = Array2::zeros((7, 7));
    isolated[[3, 3]] = 2;
    let isolated_ok =
        clean_mask(&SegmentationMask::new(isolated, 0), 3).unwrap().labels == Array2::<u32>::zeros((7, 7));

    // Context separation: two contexts with well-separated field means.
    let schedule = NoiseSchedule::linear(20, 0.0).unwrap();
    let world = GaussianWorld::new(8, 8, 3.0, vec![1.0, 3.0]).unwrap();
    let den = AnalyticDenoiser::new(world, schedule.clone()).unwrap();
    let quantizer = LabelQuantizer {
        offset: 0.0,
        scale: 1.0,
        max_label: 4,
    };
    let majority = |context: u32| -> Vec<u64> {
        let mut counts = vec![0u64; 5];
        for seed in 0..100u64 {
            let prompt = SegmentationMask::uniform(16, 16, context);
            let run = run_for(
                &schedule,
                &den,
                &prompt,
                SchedulerKind::RandomPatch,
                (8, 8),
                0.0,
                1000 * context as u64 + seed,
            );
            let m = generate_mask(context, 16, 16, &quantizer, &run).unwrap();
            let hist = m.histogram(4);
            let top = (0..5).max_by_key(|&l| (hist[l], std::cmp::Reverse(l))).unwrap();
            counts[top] += 1;
        }
        counts
    };
    let (a, b) = (majority(1), majority(2));
    let cols: Vec<usize> = (0..5).filter(|&l| a[l] + b[l] > 0).collect();
    let total = (a.iter().sum::<u64>() + b.iter().sum::<u64>()) as f64;
    let mut stat = 0.0;
    for row in [&a, &b] {
        let row_total = row.iter().sum::<u64>() as f64;
        for &l in &cols {
            let expected = row_total * (a[l] + b[l]) as f64 / total;
            stat += (row[l] as f64 - expected).powi(2) / expected;
        }
    }
    let dof = (cols.len() as f64 - 1.0).max(1.0);
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    check(
        failures == 0 && isolated_ok && p < 0.01,
        format!(
            "{failures}/1000 masks broke idempotence or added labels; isolated pixel removed: {isolated_ok}; majority labels by context {a:?} vs {b:?}, chi-square p = {p:.2e}"
        ),
    )
}

fn determinism_configs() -> Vec<String> {
    let mut out = Vec::new();
    let kinds = ["random-patch", "sliding-window", "independent-tiles", "full-canvas"];
    for i in 0..10usize {
        let kind = kinds[i % 4];
        let eta = [0.0, 0.5][i % 2];
        let omega = [0.0, 1.0, 2.5][i % 3];
        let canvas = if kind == "independent-tiles" {
            "[16, 24]"
        } else {
            "[18, 21]"
        };
        let mask = if i % 3 == 0 {
            r#"{"source": {"kind": "generate", "context": 1, "low": [10, 12],
                "world": {"height": 6, "width": 6, "corr_length": 2.0, "class_means": [1.5, 0.5]},
                "quantizer": {"max_label": 2}}, "minpool_k": 3}"#
                .to_string()
        } else {
            format!(
                r#"{{"source": {{"kind": "uniform", "label": {}}}, "minpool_k": 1}}"#,
                i % 3
            )
        };
        out.push(format!(
            r#"{{"seed": {seed}, "world": {{"height": 8, "width": 8, "corr_length": 2.5, "class_means": [-1.0, 1.0]}},
                "schedule": {{"T": 12, "eta": {eta}}},
                "sampler": {{"scheduler_kind": "{kind}", "canvas": {canvas}, "omega": {omega}, "samples": 2, "channels": {ch}}},
                "mask": {mask},
                "decode": {{"tile": [4, 6]}}}}"#,
            seed = 100 + i,
            ch = 1 + i % 2,
        ));
    }
    out
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((
                    path.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

fn criterion_10() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_patchcanvas");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut identical = 0;
    let mut notes = Vec::new();
    for (i, text) in determinism_configs().into_iter().enumerate() {
        let cfg = dir.path().join(format!("c{i}.json"));
        fs::write(&cfg, text).unwrap();
        let mut trees = Vec::new();
        for threads in [1, 8] {
            let out = dir.path().join(format!("c{i}-t{threads}"));
            let status = Command::new(bin)
                .args(["sample", "--config"])
                .arg(&cfg)
                .arg("--out")
                .arg(&out)
                .args(["--threads", &threads.to_string()])
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                notes.push(format!(
                    "config {i}: {}",
                    String::from_utf8_lossy(&status.stderr).trim()
                ));
            }
            trees.push(read_tree(&out));
        }
        if trees[0] == trees[1] && !trees[0].is_empty() {
            identical += 1;
        }
    }
    check(
        identical == 10,
        format!(
            "{identical}/10 configs byte-identical between --threads 1 and --threads 8{}",
            if notes.is_empty() {
                String::new()
            } else {
                format!(" ({})", notes.join("; "))
            }
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "degenerate equivalence", criterion_1),
        (2, "distributional fidelity", criterion_2),
        (3, "long-range correlation", criterion_3),
        (4, "time-state invariant", criterion_4),
        (5, "cost model", criterion_5),
        (6, "Hann decode partition", criterion_6),
        (7, "training oracle", criterion_7),
        (8, "metric oracles", criterion_8),
        (9, "mask pipeline", criterion_9),
        (10, "determinism under parallelism", criterion_10),
    ];
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL  {name}: {detail}");
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
