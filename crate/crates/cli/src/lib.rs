//! Commands behind the `patchcanvas` binary.
//!
//! Every command reads a [`RunConfig`], writes its outputs into one
//! directory and finishes with a `manifest.json` that echoes the effective
//! config (after overrides), so a run can be repeated bit for bit. Worker
//! count is deliberately absent from every output.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::RngCore;
use serde::Serialize;
use serde_json::json;

use patchcanvas_core::codec::{hann_decode, Codec, IdentityCodec, ScaleCodec};
use patchcanvas_core::config::{CodecSpec, DenoiserSpec, MaskSource, RunConfig};
use patchcanvas_core::io::{
    read_tensor, write_json, write_label_pgm, write_label_ppm, write_pgm, write_tensor, Tensor, TensorData,
};
use patchcanvas_core::mask::{clean_mask, generate_mask, upsample_mask, SegmentationMask};
use patchcanvas_core::metrics::{
    authenticity, ct_score, default_tau, embed_features, improved_precision_recall, FeatureSet,
};
use patchcanvas_core::rng::{normals, stream, Domain};
use patchcanvas_core::sampler::{compare_cost, Counters, GuidanceConfig, SamplerRun, SchedulerKind};
use patchcanvas_core::train::{train_toy, LinearDenoiser};
use patchcanvas_core::world::{AnalyticDenoiser, Denoiser, Label};
use patchcanvas_core::{Error, NoiseSchedule, Patch, Result};

/// Seed of the `i`-th draw of a run. Hashed rather than `seed + i` so that
/// runs with nearby seeds share no draws.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    stream(seed, Domain::Aux, 3, i as u64).next_u64()
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::ShapeMismatch { .. }
        | Error::UnsupportedShape { .. }
        | Error::OutOfBounds { .. }
        | Error::TimeOutOfRange { .. }
        | Error::NegativeRadicand { .. } => 2,
        Error::InsufficientSamples(_) => 3,
        Error::Diverged { .. } => 4,
        _ => 1,
    }
}

/// Seed offset separating the mask sampler from the image sampler.
const MASK_SEED_OFFSET: u64 = 0x6d61_736b;

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Denoiser named by the config. Relative weight paths resolve against `base`.
pub fn build_denoiser(cfg: &RunConfig, schedule: &NoiseSchedule, base: &Path) -> Result<Box<dyn Denoiser>> {
    Ok(match &cfg.sampler.denoiser {
        DenoiserSpec::Analytic => Box::new(AnalyticDenoiser::new(cfg.world.clone(), schedule.clone())?),
        DenoiserSpec::Linear { weights } => {
            let path = resolve(base, weights);
            let t = read_tensor(&path)?;
            let TensorData::F64(data) = &t.data else {
                return Err(Error::Config(format!(
                    "{}: weights must be an f64 tensor",
                    path.display()
                )));
            };
            let den = LinearDenoiser::from_table(
                cfg.world.height,
                cfg.world.width,
                cfg.world.num_classes(),
                &t.dims,
                data,
            )
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if den.steps() != schedule.steps() {
                return Err(Error::Config(format!(
                    "{}: weights cover {} steps, schedule has {}",
                    path.display(),
                    den.steps(),
                    schedule.steps()
                )));
            }
            Box::new(den)
        }
    })
}

/// Conditioning mask at canvas size: loaded or generated, cleaned, upsampled.
pub fn build_mask(cfg: &RunConfig, schedule: &NoiseSchedule, base: &Path) -> Result<SegmentationMask> {
    let (h, w) = cfg.canvas();
    let raw = match &cfg.mask.source {
        MaskSource::Uniform { label } => SegmentationMask::uniform(h, w, *label),
        MaskSource::File { path } => {
            let path = resolve(base, path);
            let labels = read_tensor(&path)?.to_labels()?;
            if labels.dim() != (h, w) {
                return Err(Error::Config(format!(
                    "{}: mask is {:?}, canvas is {h}x{w}",
                    path.display(),
                    labels.dim()
                )));
            }
            let m = SegmentationMask::new(labels, 0);
            if m.max_label() as usize > cfg.world.num_classes() {
                return Err(Error::Config(format!(
                    "{}: label {} exceeds the classes",
                    path.display(),
                    m.max_label()
                )));
            }
            m
        }
        MaskSource::Generate {
            context,
            low,
            world,
            quantizer,
            omega,
        } => {
            let den = AnalyticDenoiser::new(world.clone(), schedule.clone())?;
            let prompt = SegmentationMask::uniform(low[0], low[1], *context);
            let run = SamplerRun {
                schedule,
                guidance: GuidanceConfig {
                    omega: *omega,
                    p_unc: 0.0,
                },
                seed: cfg.seed.wrapping_add(MASK_SEED_OFFSET),
                kind: SchedulerKind::RandomPatch,
                patch_h: world.height,
                patch_w: world.width,
                channels: 1,
                denoiser: &den,
                mask: &prompt,
            };
            generate_mask(*context, low[0], low[1], quantizer, &run)?
        }
    };
    let cleaned = clean_mask(&raw, cfg.mask.minpool_k)?;
    upsample_mask(&cleaned, h, w)
}

fn codec(spec: CodecSpec) -> Box<dyn Codec> {
    match spec {
        CodecSpec::Identity => Box::new(IdentityCodec),
        CodecSpec::Scale { scale } => Box::new(ScaleCodec { scale }),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub counters: Vec<Counters>,
    pub files: Vec<String>,
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

/// Sample `cfg.sampler.samples` canvases. `base` resolves relative paths in
/// the config.
pub fn cmd_sample(cfg: &RunConfig, out: &Path, base: &Path) -> Result<SampleSummary> {
    let schedule = cfg.schedule.build().map_err(config_error)?;
    let (h, w) = cfg.canvas();
    let (ph, pw) = cfg.patch();
    let denoiser = build_denoiser(cfg, &schedule, base)?;
    if !denoiser.supports(ph, pw) {
        return Err(Error::Config(format!("denoiser does not accept {ph}x{pw} patches")));
    }
    if cfg.sampler.scheduler_kind == SchedulerKind::FullCanvas && !denoiser.supports(h, w) {
        return Err(Error::Config(format!(
            "full-canvas sampling needs a denoiser for {h}x{w} inputs; this one only accepts {ph}x{pw}"
        )));
    }
    let mask = build_mask(cfg, &schedule, base)?;
    let codec = codec(cfg.decode.codec);
    let (th, tw) = cfg.tile();

    fs::create_dir_all(out.join("latents"))?;
    fs::create_dir_all(out.join("images"))?;
    let mut files = Vec::new();
    let mut counters = Vec::new();
    for i in 0..cfg.sampler.samples {
        let run = SamplerRun {
            schedule: &schedule,
            guidance: GuidanceConfig {
                omega: cfg.sampler.omega,
                p_unc: cfg.train.map_or(0.0, |t| t.p_unc),
            },
            seed: sample_seed(cfg.seed, i),
            kind: cfg.sampler.scheduler_kind,
            patch_h: ph,
            patch_w: pw,
            channels: cfg.sampler.channels,
            denoiser: denoiser.as_ref(),
            mask: &mask,
        };
        let outcome = run.sample(h, w)?;
        log::info!("sample {i}: {:?}", outcome.counters);
        let image = hann_decode(&outcome.canvas, codec.as_ref(), th, tw)?;
        let latent_path = out.join("latents").join(format!("{i:05}.dinf"));
        let image_path = out.join("images").join(format!("{i:05}.dinf"));
        let pgm_path = out.join("images").join(format!("{i:05}.pgm"));
        write_tensor(&latent_path, &Tensor::from_canvas(&outcome.canvas))?;
        write_tensor(&image_path, &Tensor::from_canvas(&image))?;
        let scale = write_pgm(&pgm_path, image.index_axis(Axis(0), 0))?;
        let sidecar = pgm_path.with_extension("pgm.json");
        write_json(
            &sidecar,
            &json!({ "channel": 0, "min": scale.min, "max": scale.max, "black": scale.min, "white": scale.max }),
        )?;
        for p in [&latent_path, &image_path, &pgm_path, &sidecar] {
            files.push(rel(out, p));
        }
        counters.push(outcome.counters);
    }
    let mask_tensor = out.join("mask.dinf");
    write_tensor(&mask_tensor, &Tensor::from_labels(&mask.labels))?;
    write_label_pgm(&out.join("mask.pgm"), &mask.labels, cfg.world.num_classes() as u32)?;
    write_label_ppm(&out.join("mask.ppm"), &mask.labels)?;
    files.extend(["mask.dinf", "mask.pgm", "mask.ppm"].map(String::from));
    let summary = SampleSummary { counters, files };
    write_manifest(
        out,
        "sample",
        cfg,
        json!({ "counters": summary.counters, "files": summary.files }),
    )?;
    Ok(summary)
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, results: serde_json::Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg,
        "results": results,
    });
    write_json(&out.join("manifest.json"), &manifest)
}

/// Cost table of every scheduler over the configured sizes.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<String> {
    let schedule = cfg.schedule.build().map_err(config_error)?;
    let den = AnalyticDenoiser::new(cfg.world.clone(), schedule.clone())?;
    let label = match cfg.mask.source {
        MaskSource::Uniform { label } => label,
        _ => 1,
    };
    let (ph, pw) = cfg.patch();
    let mask = SegmentationMask::uniform(ph, pw, label);
    let template = SamplerRun {
        schedule: &schedule,
        guidance: GuidanceConfig {
            omega: cfg.sampler.omega,
            p_unc: 0.0,
        },
        seed: cfg.seed,
        kind: cfg.sampler.scheduler_kind,
        patch_h: ph,
        patch_w: pw,
        channels: cfg.sampler.channels,
        denoiser: &den,
        mask: &mask,
    };
    let table = compare_cost(&cfg.bench_sizes(), &template)?;
    let csv = table.to_csv();
    fs::create_dir_all(out)?;
    fs::write(out.join("cost.csv"), &csv)?;
    write_manifest(out, "bench", cfg, json!({ "rows": table.rows, "files": ["cost.csv"] }))?;
    Ok(csv)
}

/// Held-out mean-square error of `den` against the analytic denoiser,
/// relative to the analytic output's mean square. Conditional labels only.
pub fn relative_oracle_error(
    cfg: &RunConfig,
    den: &LinearDenoiser,
    schedule: &NoiseSchedule,
    triples: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    let oracle = AnalyticDenoiser::new(cfg.world.clone(), schedule.clone())?;
    let (h, w) = cfg.patch();
    let mut rng = stream(seed, Domain::Aux, 1, 0);
    let (mut err, mut norm) = (0.0, 0.0);
    for _ in 0..triples {
        let label = Label::Class(rng.random_range(1..=cfg.world.num_classes()));
        let t = rng.random_range(1..=schedule.steps());
        let x0 = cfg.world.sample_patch(label, &mut rng)?;
        let eps = Patch::from_shape_vec((1, h, w), normals(&mut rng, h * w)).expect("shape");
        let z = patchcanvas_core::schedule::corrupt(&x0, t, &eps, schedule)?;
        let a = oracle.epsilon(&z, t, label)?;
        let b = den.epsilon(&z, t, label)?;
        err += (&a - &b).mapv(|v| v * v).sum();
        norm += a.mapv(|v| v * v).sum();
    }
    Ok(err / norm)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub unconditional_draws: usize,
    pub relative_oracle_mse: f64,
}

/// Train the affine denoiser; writes `weights.dinf` and `loss.csv`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let spec = cfg
        .train
        .ok_or_else(|| Error::Config("train: section required for the train command".into()))?;
    let schedule = cfg.schedule.build().map_err(config_error)?;
    let (h, w) = cfg.patch();
    let init = LinearDenoiser::zeros(h, w, schedule.steps(), cfg.world.num_classes());
    let mut rng = stream(cfg.seed, Domain::Train, 0, 0);
    let (den, report) = train_toy(&cfg.world, init, &schedule, spec.p_unc, spec.steps, &mut rng)?;
    fs::create_dir_all(out)?;
    let (dims, data) = den.to_table();
    write_tensor(&out.join("weights.dinf"), &Tensor::new(dims, TensorData::F64(data))?)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, l));
    }
    fs::write(out.join("loss.csv"), csv)?;
    let tail = &report.losses[report.losses.len() - (report.losses.len() / 10).max(1)..];
    let summary = TrainSummary {
        final_loss: tail.iter().sum::<f64>() / tail.len() as f64,
        unconditional_draws: report.unconditional_draws,
        relative_oracle_mse: relative_oracle_error(cfg, &den, &schedule, 1000, cfg.seed)?,
    };
    write_manifest(
        out,
        "train",
        cfg,
        json!({ "summary": summary, "files": ["weights.dinf", "loss.csv"] }),
    )?;
    Ok(summary)
}

/// Canvases from every `*.dinf` file in `dir`, in file-name order.
pub fn load_canvases(dir: &Path) -> Result<Vec<Patch>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "dinf"));
    paths.sort();
    paths.iter().map(|p| read_tensor(p)?.to_canvas()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ip: f64,
    pub ir: f64,
    pub authenticity: f64,
    pub authenticity_degenerate: bool,
    pub ct: f64,
    pub parameters: serde_json::Value,
    pub seeds: serde_json::Value,
}

/// All metrics of `gen` against `real`. Authenticity uses the whole real set
/// as training data; the data-copying score splits it alternately into
/// training (even positions) and test (odd positions).
pub fn cmd_eval(cfg: &RunConfig, real_dir: &Path, gen_dir: &Path, out: &Path) -> Result<EvalReport> {
    let real = load_canvases(real_dir)?;
    let gen = load_canvases(gen_dir)?;
    let m = &cfg.metrics;
    let n_train = real.len().div_ceil(2);
    let n_test = real.len() / 2;
    let mut missing = Vec::new();
    if m.k >= real.len().min(gen.len()) {
        missing.push(format!(
            "improved precision/recall needs more than k = {} samples per set (real {}, gen {})",
            m.k,
            real.len(),
            gen.len()
        ));
    }
    if real.len() < 2 || gen.is_empty() {
        missing.push(format!(
            "authenticity needs >= 2 real and >= 1 generated samples (real {}, gen {})",
            real.len(),
            gen.len()
        ));
    }
    if n_train < m.cells || n_test == 0 || gen.is_empty() {
        missing.push(format!(
            "C_T needs >= {} training and >= 1 test real samples (even/odd split: {n_train}/{n_test}) and >= 1 generated",
            m.cells
        ));
    }
    if !missing.is_empty() {
        return Err(Error::InsufficientSamples(missing.join("; ")));
    }
    let real_f = embed_features(&real, m.embed)?;
    let gen_f = embed_features(&gen, m.embed)?;
    let (ip, ir) = improved_precision_recall(&real_f, &gen_f, m.k)?;
    let auth = authenticity(&real_f, &gen_f)?;
    let pick = |parity: usize| FeatureSet::new(real_f.vectors().iter().skip(parity).step_by(2).cloned().collect());
    let ct = ct_score(&pick(0)?, &pick(1)?, &gen_f, m.cells, m.tau, cfg.seed)?;
    let report = EvalReport {
        ip,
        ir,
        authenticity: auth.authenticity,
        authenticity_degenerate: auth.degenerate,
        ct: ct.ct,
        parameters: json!({
            "k": m.k,
            "cells": m.cells,
            "tau": m.tau.unwrap_or_else(|| default_tau(gen.len())),
            "embed": m.embed,
            "n_real": real.len(),
            "n_gen": gen.len(),
            "real_dir": real_dir.display().to_string(),
            "gen_dir": gen_dir.display().to_string(),
        }),
        seeds: json!({ "kmeans": cfg.seed }),
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("ct_cells.csv"), ct.to_csv())?;
    write_manifest(out, "eval", cfg, json!({ "files": ["report.json", "ct_cells.csv"] }))?;
    Ok(report)
}
