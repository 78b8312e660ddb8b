//! Command implementations.
//!
//! Shared conventions: validate and compute before the first write so a
//! failing run leaves no partial output tree (single-file writers still
//! write atomically per file); print results to stdout and diagnostics to
//! stderr; derive every random draw from the --seed flags so reruns are
//! byte-identical.

use crate::manifest::{self, Manifest, SceneEntry};
use crate::{
    AblateArgs, BenchArgs, DecodeCloudArgs, DecodeDepthArgs, EncodeArgs, EvalArgs, MakeLrArgs,
    SynthArgs, TrainArgs,
};
use pnsr_core::geometry::backproject;
use pnsr_core::metrics::{self, EvalReport, FrameReport};
use pnsr_core::net::{self, HeadMode, InputMode, SrModel, TrainConfig};
use pnsr_core::synth::{self, DatasetConfig, ScenePair};
use pnsr_core::{io, pncc, resample, Error, Result};
use std::fs;
use std::path::Path;
use std::time::Instant;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = DatasetConfig {
        n_scenes: a.scenes,
        scale: a.scale,
        seed: a.seed,
        width: a.width,
        height: a.height,
        dropout_rate: a.dropout,
        s: a.s,
    };
    // Realize everything in memory first: either the whole dataset is
    // writable or nothing is touched.
    let pairs = synth::build_dataset(&cfg)?;

    let mut scenes = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let name = format!("scene_{i:04}");
        let dir = a.out.join(&name);
        fs::create_dir_all(&dir)?;

        // The images mirror the realized pair exactly: same renders, same
        // degradation, written through the frozen formats.
        let hr_depth = synth::render(&pair.spec, &pair.hr_intr)?;
        let (lr_depth, _) = resample::make_lr_pair(&hr_depth, &pair.hr_intr, cfg.scale)?;
        io::write_depth16(&dir.join("hr_depth.pgm"), &hr_depth, io::DEFAULT_DEPTH_UNIT_SCALE)?;
        io::write_intrinsics(&dir.join("hr_intrinsics.json"), &pair.hr_intr)?;
        io::write_depth16(&dir.join("lr_depth.pgm"), &lr_depth, io::DEFAULT_DEPTH_UNIT_SCALE)?;
        io::write_intrinsics(&dir.join("lr_intrinsics.json"), &pair.lr_intr)?;
        io::write_pncc48(&dir.join("lr_pncc.ppm"), &pair.lr)?;

        scenes.push(SceneEntry {
            index: i,
            spec: pair.spec,
            hr_depth: format!("{name}/hr_depth.pgm"),
            hr_intrinsics: format!("{name}/hr_intrinsics.json"),
            lr_depth: format!("{name}/lr_depth.pgm"),
            lr_intrinsics: format!("{name}/lr_intrinsics.json"),
            lr_pncc: format!("{name}/lr_pncc.ppm"),
        });
    }
    let m = Manifest { config: cfg, scenes };
    m.write(&a.out)?;
    println!("wrote {} scenes and manifest.json to {}", pairs.len(), a.out.display());
    Ok(())
}

pub fn make_lr(a: MakeLrArgs) -> Result<()> {
    let depth = io::read_depth16(&a.depth, a.unit_scale)?;
    let intr = io::read_intrinsics(&a.intrinsics)?;
    if !intr.matches_resolution(depth.width(), depth.height()) {
        return Err(Error::InvalidArgument(format!(
            "intrinsics are for {}x{} but the depth map is {}x{}",
            intr.width,
            intr.height,
            depth.width(),
            depth.height()
        )));
    }
    let (lr, lr_intr) = resample::make_lr_pair(&depth, &intr, a.scale)?;
    fs::create_dir_all(&a.out)?;
    io::write_depth16(&a.out.join("lr_depth.pgm"), &lr, a.unit_scale)?;
    io::write_intrinsics(&a.out.join("lr_intrinsics.json"), &lr_intr)?;
    println!(
        "degraded {}x{} -> {}x{} ({} of {} pixels valid)",
        depth.width(),
        depth.height(),
        lr.width(),
        lr.height(),
        lr.valid_count(),
        lr.width() * lr.height()
    );
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let depth = io::read_depth16(&a.depth, a.unit_scale)?;
    let intr = io::read_intrinsics(&a.intrinsics)?;
    if !intr.matches_resolution(depth.width(), depth.height()) {
        return Err(Error::InvalidArgument(format!(
            "intrinsics are for {}x{} but the depth map is {}x{}",
            intr.width,
            intr.height,
            depth.width(),
            depth.height()
        )));
    }
    let img = pncc::encode(&depth, &intr, a.s)?;
    ensure_parent(&a.out)?;
    io::write_pncc48(&a.out, &img)?;
    println!(
        "encoded {}x{} ({} valid pixels) to {}",
        img.width(),
        img.height(),
        img.valid_count(),
        a.out.display()
    );
    Ok(())
}

pub fn decode_depth(a: DecodeDepthArgs) -> Result<()> {
    let img = io::read_pncc48(&a.input)?;
    let depth = img.decode_depth()?;
    ensure_parent(&a.out)?;
    io::write_depth16(&a.out, &depth, a.unit_scale)?;
    println!(
        "decoded {}x{} depth ({} valid pixels) to {}",
        depth.width(),
        depth.height(),
        depth.valid_count(),
        a.out.display()
    );
    Ok(())
}

pub fn decode_cloud(a: DecodeCloudArgs) -> Result<()> {
    let img = io::read_pncc48(&a.input)?;
    let cloud = img.decode_pointcloud()?;
    ensure_parent(&a.out)?;
    io::write_ply(&a.out, &cloud)?;
    println!("decoded {} points to {}", cloud.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let m = Manifest::read(&a.data)?;
    let pairs = manifest::load_pairs(&a.data, &m)?;

    // The upscale factor is a property of the data, not a flag.
    let mut cfg = TrainConfig::new(m.config.scale, a.head.into(), a.input.into());
    cfg.lr = a.lr;
    cfg.epochs = a.epochs;
    cfg.batch = a.batch;
    cfg.patch = a.patch;
    cfg.seed = a.seed;
    cfg.charbonnier_eps = a.eps;
    cfg.channels = a.channels;
    cfg.depth = a.layers;

    let mut model = SrModel::new(cfg)?;
    log::info!(
        "training {} params on {} scenes at x{}",
        model.param_count(),
        pairs.len(),
        m.config.scale
    );
    let curve = model.train(&pairs)?;

    fs::create_dir_all(&a.out)?;
    io::write_checkpoint(&a.out.join("model.pnsr"), &model)?;
    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        csv.push_str(&format!("{epoch},{loss}\n"));
    }
    fs::write(a.out.join("loss.csv"), csv)?;
    println!(
        "trained {} epochs: loss {} -> {}; wrote model.pnsr and loss.csv to {}",
        cfg.epochs,
        curve.first().expect("curve has the pre-training entry"),
        curve.last().expect("curve is never empty"),
        a.out.display()
    );
    Ok(())
}

/// Run inference on one scene. With `timing` the clock covers the full
/// chain a consumer would run (encode, inference, decode); rendering the
/// scene and all file I/O stay outside it.
fn predict_frame(
    pair: &ScenePair,
    model: Option<&SrModel>,
    scale: usize,
    s: f64,
    timing: bool,
) -> Result<(pnsr_core::PnccImage, f64)> {
    let infer = |lr: &pnsr_core::PnccImage| match model {
        Some(m) => m.predict(lr, &pair.hr_intr),
        None => net::bicubic_baseline(lr, scale),
    };
    if !timing {
        return Ok((infer(&pair.lr)?, 0.0));
    }
    let hr_depth = synth::render(&pair.spec, &pair.hr_intr)?;
    let (lr_depth, lr_intr) = resample::make_lr_pair(&hr_depth, &pair.hr_intr, scale)?;
    let t0 = Instant::now();
    // This re-encode is bit-identical to pair.lr, so timing does not
    // change any metric downstream.
    let lr = pncc::encode(&lr_depth, &lr_intr, s)?;
    let pred = infer(&lr)?;
    let _ = pred.decode_depth()?;
    let _ = pred.decode_pointcloud()?;
    let time_s = t0.elapsed().as_secs_f64();
    Ok((pred, time_s))
}

fn run_eval(
    pairs: &[ScenePair],
    model: Option<&SrModel>,
    scale: usize,
    s: f64,
    params: usize,
    timing: bool,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (frame, pair) in pairs.iter().enumerate() {
        // Ground truth is the rendered scene, so the comparison exercises
        // the full decode path rather than target-vs-target agreement.
        let gt_depth = synth::render(&pair.spec, &pair.hr_intr)?;
        let gt_cloud = backproject(&gt_depth, &pair.hr_intr)?;

        let (pred, time_s) = predict_frame(pair, model, scale, s, timing)?;
        let pred_depth = pred.decode_depth()?;
        let pred_cloud = pred.decode_pointcloud()?;

        rows.push(FrameReport {
            frame,
            rmse_cm: metrics::rmse_masked(&pred_depth, &gt_depth)?,
            chamfer: metrics::chamfer(&pred_cloud, &gt_cloud)?,
            time_s,
        });
    }
    EvalReport::new(rows, params)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let m = Manifest::read(&a.data)?;
    let pairs = manifest::load_pairs(&a.data, &m)?;

    let model = match (&a.source.checkpoint, &a.source.baseline) {
        (Some(path), None) => {
            let model = io::read_checkpoint(path)?;
            if model.config().r != m.config.scale {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint upscales x{} but the dataset is x{}",
                    model.config().r,
                    m.config.scale
                )));
            }
            Some(model)
        }
        (None, Some(_)) => None,
        _ => unreachable!("the argument group admits exactly one source"),
    };
    let params = model.as_ref().map_or(0, SrModel::param_count);

    let report = run_eval(&pairs, model.as_ref(), m.config.scale, m.config.s, params, a.timing)?;
    let text = report.to_json_lines();
    print!("{text}");
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        fs::write(out, &text)?;
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let m = Manifest::read(&a.data)?;
    let pairs = manifest::load_pairs(&a.data, &m)?;
    let model = a.checkpoint.as_ref().map(|p| io::read_checkpoint(p)).transpose()?;
    if let Some(model) = &model {
        if model.config().r != m.config.scale {
            return Err(Error::InvalidArgument(format!(
                "checkpoint upscales x{} but the dataset is x{}",
                model.config().r,
                m.config.scale
            )));
        }
    }

    let n = a.frames.min(pairs.len());
    if n == 0 {
        return Err(Error::EmptyInput("no frames to benchmark".into()));
    }
    let mut slower = 0usize;
    for (frame, pair) in pairs.iter().take(n).enumerate() {
        // Validate each path once before timing so errors surface as
        // errors, not as timings of failures.
        net::bicubic_baseline(&pair.lr, m.config.scale)?;
        let stats = metrics::bench(
            || {
                let _ = net::bicubic_baseline(&pair.lr, m.config.scale);
            },
            a.warmup,
            a.reps,
        )?;
        println!(
            "{}",
            serde_json::json!({
                "frame": frame,
                "path": "bicubic",
                "median_s": stats.median_s,
                "mean_s": stats.mean_s,
                "cov": stats.cov,
                "params": 0,
            })
        );
        let bicubic_median = stats.median_s;

        if let Some(model) = &model {
            model.predict(&pair.lr, &pair.hr_intr)?;
            let stats = metrics::bench(
                || {
                    let _ = model.predict(&pair.lr, &pair.hr_intr);
                },
                a.warmup,
                a.reps,
            )?;
            println!(
                "{}",
                serde_json::json!({
                    "frame": frame,
                    "path": "net",
                    "median_s": stats.median_s,
                    "mean_s": stats.mean_s,
                    "cov": stats.cov,
                    "params": model.param_count(),
                })
            );
            if stats.median_s < bicubic_median {
                slower += 1;
            }
        }
    }
    if slower > 0 {
        log::warn!(
            "the network beat plain bicubic on {slower} of {n} frames; \
             timings this close usually mean the frames are too small to measure"
        );
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let m = Manifest::read(&a.data)?;
    let pairs = manifest::load_pairs(&a.data, &m)?;

    // Fixed grid, fixed order: the four head/input combinations.
    let grid = [
        (HeadMode::Xyz, InputMode::Pncc),
        (HeadMode::Xyz, InputMode::Depth),
        (HeadMode::Z, InputMode::Pncc),
        (HeadMode::Z, InputMode::Depth),
    ];
    let mut csv = String::from("head,input,rmse_cm,chamfer,params\n");
    println!("head,input,rmse_cm,chamfer,params");
    for (head, input) in grid {
        let mut cfg = TrainConfig::new(m.config.scale, head, input);
        cfg.epochs = a.epochs;
        cfg.seed = a.seed;
        cfg.channels = a.channels;
        cfg.depth = a.layers;

        let mut model = SrModel::new(cfg)?;
        model.train(&pairs)?;
        let report = run_eval(&pairs, Some(&model), m.config.scale, m.config.s, model.param_count(), false)?;

        let head_name = match head {
            HeadMode::Xyz => "xyz",
            HeadMode::Z => "z",
        };
        let input_name = match input {
            InputMode::Pncc => "pncc",
            InputMode::Depth => "depth",
        };
        let row = format!(
            "{head_name},{input_name},{},{},{}",
            report.mean_rmse_cm(),
            report.mean_chamfer(),
            model.param_count()
        );
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("ablate.csv"), csv)?;
    Ok(())
}
