use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use hkp_core::dataset::{
    augment, crop_hand, load_annotations, load_image, make_training_pair, mirror_left, sample_rng, Annotation,
    Sample,
};
use hkp_core::heatmap::{decode_keypoints, DecodeParams, Frame, Keypoint, KeypointSet, Source};
use hkp_core::metrics::{align_root, epe, keypoints_from_coords, threshold_grid, Accumulator, Protocol, Summary, ROOT_INDEX};
use hkp_core::netgraph::{budget, describe};
use hkp_core::weights::{random_archive, ArchiveEntry};
use hkp_core::{bind_weights, build_network, Exec as Mode, Network, NetworkConfig, Shape, Tensor, WeightArchive};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{overlay, strategy, BenchArgs, EvaluateArgs, Exec, InferArgs, InspectArgs, MakeTargetsArgs, UsageError};

impl Exec {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        let n = match (self.strict, self.threads) {
            (true, _) => 1,
            (false, Some(0)) => return Err(UsageError("--threads must be at least 1".into()).into()),
            (false, Some(n)) => n,
            (false, None) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)
    }

    fn mode(&self) -> Mode {
        if self.strict {
            Mode::Serial
        } else {
            Mode::Parallel
        }
    }
}

fn load_model(path: &Path, size: usize) -> Result<Network> {
    let net = build_network(&NetworkConfig::with_input_size(size))?;
    let archive = WeightArchive::load(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(bind_weights(&net, &archive).with_context(|| format!("binding model {}", path.display()))?)
}

fn resolve(base: &Path, ann: &Annotation) -> PathBuf {
    if ann.image_ref.is_absolute() {
        ann.image_ref.clone()
    } else {
        base.parent().unwrap_or(Path::new("")).join(&ann.image_ref)
    }
}

/// Cropped, right-hand-oriented network input for one annotation.
fn prepare(path: &Path, ann: &Annotation, size: usize, kind: hkp_core::dataset::CropKind) -> Result<Sample> {
    let image = load_image(path).with_context(|| format!("reading image {}", path.display()))?;
    let sample = crop_hand(&image, ann, &strategy(kind, size))
        .with_context(|| format!("cropping {}", ann.image_ref.display()))?;
    Ok(if ann.needs_mirroring() {
        mirror_left(&sample)
    } else {
        sample
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    image: String,
    kp: Vec<(f64, f64, f64, Source)>,
}

fn predict(net: &Network, sample: &Sample, params: &DecodeParams, mode: Mode) -> Result<KeypointSet> {
    let raw = net.forward(&sample.image, mode)?;
    let grid = decode_keypoints(&raw, params)?;
    let (sx, sy) = (
        sample.size() as f64 / raw.width as f64,
        sample.size() as f64 / raw.height as f64,
    );
    Ok(grid.map_positions(Frame::Image, |x, y| sample.to_source(x * sx, y * sy)))
}

pub fn infer(args: InferArgs) -> Result<ExitCode> {
    let net = load_model(&args.model, args.size)?;
    let annotations = load_annotations(&args.input)?;
    let mut params = DecodeParams::for_grid(net.output_grid.0, net.output_grid.1);
    if let Some(tau) = args.decode.tau {
        params.confidence_threshold = tau;
    }
    params.sigma = args.decode.sigma;
    params.max_fallback_peaks = args.decode.peaks;
    params.validate().map_err(|e| UsageError(e.to_string()))?;
    if let Some(dir) = &args.overlay {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let mode = args.exec.mode();
    let results: Vec<Result<PredictionLine>> = args.exec.pool()?.install(|| {
        annotations
            .par_iter()
            .enumerate()
            .map(|(i, ann)| {
                let path = resolve(&args.input, ann);
                let sample = prepare(&path, ann, args.size, args.crop)?;
                let kps = predict(&net, &sample, &params, mode)?;
                if let Some(dir) = &args.overlay {
                    let stem = ann.image_ref.file_stem().map_or("image".into(), |s| s.to_string_lossy());
                    let out = dir.join(format!("{i:06}_{stem}.png"));
                    overlay::draw(&path, &kps, &out)?;
                }
                Ok(PredictionLine {
                    image: ann.image_ref.to_string_lossy().into_owned(),
                    kp: kps.points.iter().map(|k| (k.x, k.y, k.confidence, k.source)).collect(),
                })
            })
            .collect()
    });

    let mut out = std::io::BufWriter::new(
        fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    );
    let mut failed = 0;
    for r in results {
        match r {
            Ok(line) => writeln!(out, "{}", serde_json::to_string(&line)?)?,
            Err(e) => {
                eprintln!("warning: skipped: {e:#}");
                failed += 1;
            }
        }
    }
    out.flush()?;
    Ok(if failed > 0 {
        eprintln!("{failed} image(s) skipped");
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

pub fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let preds = read_predictions(&args.input)?;
    let gts = load_annotations(&args.gt)?;
    for (i, (p, g)) in preds.iter().zip(&gts).enumerate() {
        if Path::new(&p.image) != g.image_ref {
            bail!(
                "record {}: prediction is for {} but annotation is for {}",
                i + 1,
                p.image,
                g.image_ref.display()
            );
        }
    }
    if preds.len() != gts.len() {
        let name = match gts.get(preds.len()) {
            Some(g) => format!("no prediction for {}", g.image_ref.display()),
            None => format!("no annotation for {}", preds[gts.len()].image),
        };
        bail!("{} predictions for {} annotations: {name}", preds.len(), gts.len());
    }

    let thresholds = if args.normalize_head {
        Protocol::HeadNormalized.thresholds()
    } else {
        if !(args.max_threshold > 0.0) {
            return Err(UsageError("--max-threshold must be positive".into()).into());
        }
        threshold_grid(0.0, args.max_threshold, 0.5)
    };
    let mut acc = Accumulator::default();
    for (p, g) in preds.iter().zip(&gts) {
        let coords: Vec<_> = g.keypoints.iter().map(|k| (k.x, k.y, k.visible)).collect();
        let gt = keypoints_from_coords(&coords, Frame::Image);
        let mut pred = KeypointSet {
            frame: Frame::Image,
            points: p
                .kp
                .iter()
                .enumerate()
                .map(|(index, &(x, y, confidence, source))| Keypoint {
                    index,
                    x,
                    y,
                    confidence,
                    source,
                    visible: true,
                })
                .collect(),
        };
        if args.align_root {
            pred = align_root(&pred, &gt, ROOT_INDEX).with_context(|| format!("aligning {}", p.image))?;
        }
        let report = epe(&pred, &gt).with_context(|| format!("scoring {}", p.image))?;
        let normalizer = if args.normalize_head {
            g.head_size
                .ok_or_else(|| anyhow!("{} has no head size; required by --normalize-head", p.image))?
        } else {
            1.0
        };
        acc.push(&report, normalizer);
    }
    let (summary, curve) = acc.finish(&thresholds)?;
    fs::write(&args.out, summary.to_json() + "\n").with_context(|| format!("writing {}", args.out.display()))?;
    let csv = args.out.with_extension("csv");
    fs::write(&csv, curve.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    println!("{}", Summary::table_header());
    println!("{}", summary.table_row(&args.label));
    Ok(ExitCode::SUCCESS)
}

fn audit_text() -> Result<String> {
    let net = build_network(&NetworkConfig::default())?;
    Ok(budget(&net)?.to_text())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    size: usize,
    mode: &'static str,
    threads: usize,
    mean_ms: f64,
    std_ms: f64,
    fps: f64,
}

fn time_runs(warmup: usize, runs: usize, mut f: impl FnMut() -> Result<Tensor>) -> Result<(Vec<f64>, Tensor)> {
    let mut last = f()?;
    for _ in 1..warmup {
        last = f()?;
    }
    let mut ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        last = f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok((ms, last))
}

fn row(size: usize, mode: &'static str, threads: usize, ms: &[f64]) -> BenchRow {
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    BenchRow {
        size,
        mode,
        threads,
        mean_ms: mean,
        std_ms: var.sqrt(),
        fps: 1e3 / mean,
    }
}

pub fn bench(args: BenchArgs) -> Result<ExitCode> {
    if args.runs == 0 {
        return Err(UsageError("--runs must be at least 1".into()).into());
    }
    let pool = args.exec.pool()?;
    let archive = match &args.model {
        Some(p) => Some(WeightArchive::load(p).with_context(|| format!("loading model {}", p.display()))?),
        None => None,
    };
    let mut rows = Vec::new();
    let mut identical = true;
    for size in [112, 224] {
        let net = build_network(&NetworkConfig::with_input_size(size))?;
        let weights = archive.clone().unwrap_or_else(|| random_archive(&net, args.exec.seed));
        let net = bind_weights(&net, &weights)?;
        let mut rng = sample_rng(args.exec.seed, size as u64);
        let data = (0..size * size * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let input = Tensor::new(Shape::new(1, size, size, 3), data)?;

        let (ms, serial) = time_runs(args.warmup, args.runs, || Ok(net.forward_tensor(&input, Mode::Serial)?))?;
        rows.push(row(size, "serial", 1, &ms));
        if !args.exec.strict {
            let (ms, parallel) = pool.install(|| {
                time_runs(args.warmup, args.runs, || Ok(net.forward_tensor(&input, Mode::Parallel)?))
            })?;
            rows.push(row(size, "parallel", pool.current_num_threads(), &ms));
            identical &= serial.data().iter().map(|v| v.to_bits()).eq(parallel.data().iter().map(|v| v.to_bits()));
        }
    }

    println!("{:<6}{:<10}{:>8}{:>22}{:>10}", "size", "mode", "threads", "ms/frame", "fps");
    for r in &rows {
        println!(
            "{:<6}{:<10}{:>8}{:>22}{:>10.1}",
            r.size,
            r.mode,
            r.threads,
            format!("{:.2} ± {:.2}", r.mean_ms, r.std_ms),
            r.fps
        );
    }
    if !args.exec.strict {
        println!("serial and parallel outputs bitwise identical: {}", if identical { "yes" } else { "no" });
    }
    println!();
    print!("{}", audit_text()?);
    if let Some(out) = &args.out {
        let json = serde_json::json!({ "rows": rows, "identical": identical });
        fs::write(out, serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn inspect(args: InspectArgs) -> Result<ExitCode> {
    let net = build_network(&NetworkConfig::with_input_size(args.size))?;
    let d = describe(&net);
    let text = if args.json {
        d.to_json() + "\n"
    } else {
        format!("{}\n{}", d.to_text(), audit_text()?)
    };
    match &args.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn make_targets(args: MakeTargetsArgs) -> Result<ExitCode> {
    if !(args.sigma > 0.0) {
        return Err(UsageError("--sigma must be positive".into()).into());
    }
    let net = build_network(&NetworkConfig::with_input_size(args.size))?;
    let grid = net.output_grid;
    let annotations = load_annotations(&args.input)?;
    let results: Vec<Result<(Tensor, Tensor)>> = args.exec.pool()?.install(|| {
        annotations
            .par_iter()
            .enumerate()
            .map(|(i, ann)| {
                let path = resolve(&args.input, ann);
                let mut sample = prepare(&path, ann, args.size, args.crop)?;
                if args.augment {
                    sample = augment(&sample, &mut sample_rng(args.exec.seed, i as u64))?.0;
                }
                let (image, target) = make_training_pair(&sample, args.sigma, grid)?;
                Ok((image, target.to_tensor()))
            })
            .collect()
    });

    let mut archive = WeightArchive::new();
    let mut failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((image, target)) => {
                for (suffix, t) in [("image", image), ("target", target)] {
                    let s = t.shape();
                    let dims = vec![s.height as u32, s.width as u32, s.channels as u32];
                    archive.insert(format!("{i:06}.{suffix}"), ArchiveEntry::new(dims, t.into_data()))?;
                }
            }
            Err(e) => {
                eprintln!("warning: skipped record {}: {e:#}", i + 1);
                failed += 1;
            }
        }
    }
    archive.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(if failed > 0 {
        eprintln!("{failed} record(s) skipped");
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}
