use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sga_core::data::{self, derive_seed, TripleConfig, XDoGParams};
use sga_core::diagnostics::{self, SpectrumStage};
use sga_core::metrics::{self, SsimParams};
use sga_core::model::{Dataset, FeatureExtractor, LossTerm, TrainState, Trainer};
use sga_core::{Error, Graph, Tensor, TrainingConfig};

use crate::manifest::RunManifest;
use crate::{DiagnoseArgs, EvalArgs, SketchArgs, SpectrumArgs, TrainArgs, TripleArgs, XdogFlags};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn fail(e: &Error) -> u8 {
    eprintln!("error: {e}");
    exit_code(e)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> sga_core::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Runs `body`, then writes the manifest with the resulting exit code.
fn with_manifest(
    command: &str,
    manifest_path: &Path,
    body: impl FnOnce(&mut RunManifest) -> sga_core::Result<u8>,
) -> u8 {
    let mut m = RunManifest::start(command);
    let code = match body(&mut m) {
        Ok(c) => c,
        Err(e) => fail(&e),
    };
    if let Err(e) = m.write(manifest_path, code as i32) {
        eprintln!("error: cannot write {}: {e}", manifest_path.display());
        return code.max(EXIT_DATA);
    }
    code
}

fn xdog_params(f: &XdogFlags) -> XDoGParams {
    XDoGParams {
        phi: f.phi,
        sigma: f.sigma.unwrap_or(0.5),
        p: f.p,
        k: f.k,
        epsilon: f.epsilon,
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn report_failures(failures: &[(PathBuf, Error)]) -> u8 {
    for (p, e) in failures {
        eprintln!("{}: {e}", p.display());
    }
    if failures.is_empty() {
        EXIT_OK
    } else {
        eprintln!("{} file(s) failed", failures.len());
        EXIT_DATA
    }
}

pub fn sketch(a: SketchArgs) -> u8 {
    let out = a.output.clone();
    with_manifest("sketch", &out.join("run_manifest.json"), |m| {
        m.seeds.push(a.seed);
        m.inputs.push(a.input.clone());
        let base = xdog_params(&a.xdog);
        base.validate()?;
        std::fs::create_dir_all(&out).map_err(io_err(&out))?;
        let files = data::list_pngs(&a.input)?;
        let results: Vec<_> = files
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let seed = derive_seed(a.seed, i as u64);
                let sigma = a.xdog.sigma.unwrap_or_else(|| data::pick_sigma(seed));
                let target = out.join(format!("{}_sketch.png", stem(p)));
                let r = data::load_png(p)
                    .and_then(|img| data::xdog_extract(&img, &base.with_sigma(sigma)))
                    .and_then(|s| data::save_png(&target, &s));
                (p.clone(), seed, sigma, target, r)
            })
            .collect();
        let csv_path = out.join("sketches.csv");
        let mut csv = create(&csv_path)?;
        writeln!(csv, "source,seed,sigma,sketch").map_err(io_err(&csv_path))?;
        let mut failures = Vec::new();
        for (src, seed, sigma, target, r) in results {
            match r {
                Ok(()) => {
                    writeln!(csv, "{},{seed},{sigma},{}", src.display(), target.display()).map_err(io_err(&csv_path))?;
                    m.outputs.push(target);
                }
                Err(e) => failures.push((src, e)),
            }
        }
        csv.flush().map_err(io_err(&csv_path))?;
        m.outputs.push(csv_path);
        Ok(report_failures(&failures))
    })
}

pub fn triple(a: TripleArgs) -> u8 {
    let out = a.output.clone();
    with_manifest("triple", &out.join("run_manifest.json"), |m| {
        m.seeds.push(a.seed);
        m.inputs.push(a.input.clone());
        let cfg = TripleConfig {
            xdog: xdog_params(&a.xdog),
            fixed_sigma: a.xdog.sigma,
            self_reference: a.self_reference,
            ..Default::default()
        };
        cfg.xdog.validate()?;
        std::fs::create_dir_all(&out).map_err(io_err(&out))?;
        let files = data::list_pngs(&a.input)?;
        let results: Vec<_> = files
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let seed = derive_seed(a.seed, i as u64);
                let r = data::load_png(p)
                    .and_then(|img| match a.resolution {
                        Some(r) => data::resize(&img, r, r),
                        None => Ok(img),
                    })
                    .and_then(|img| data::write_triple(p, &img, seed, &cfg, &out));
                (p.clone(), r)
            })
            .collect();
        let csv_path = out.join("triples.csv");
        let mut csv = create(&csv_path)?;
        writeln!(csv, "{}", data::MANIFEST_HEADER).map_err(io_err(&csv_path))?;
        let mut failures = Vec::new();
        for (src, r) in results {
            match r {
                Ok(rec) => {
                    writeln!(csv, "{}", rec.to_csv_row()).map_err(io_err(&csv_path))?;
                    m.outputs.extend([rec.sketch, rec.reference, rec.ground_truth]);
                }
                Err(e) => failures.push((src, e)),
            }
        }
        csv.flush().map_err(io_err(&csv_path))?;
        m.outputs.push(csv_path);
        Ok(report_failures(&failures))
    })
}

fn training_config(a: &TrainArgs) -> sga_core::Result<TrainingConfig> {
    let mut cfg = TrainingConfig::default();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        cfg.apply_text(&text, p.parent())?;
    }
    if let Some(v) = &a.variant {
        cfg.set("variant", v)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.max_steps {
        cfg.max_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> u8 {
    if a.print_config {
        return match training_config(&a) {
            Ok(cfg) => {
                print!("{}", cfg.render());
                println!("# hash = {}", cfg.hash());
                EXIT_OK
            }
            Err(e) => fail(&e),
        };
    }
    let (Some(data_dir), Some(out)) = (a.data.clone(), a.output.clone()) else {
        eprintln!("error: train needs --data and --output (or --print-config)");
        return EXIT_USAGE;
    };
    with_manifest("train", &out.join("run_manifest.json"), |m| {
        let cfg = training_config(&a)?;
        m.config_hash = Some(cfg.hash());
        m.seeds.push(cfg.seed);
        m.inputs.push(data_dir.clone());
        std::fs::create_dir_all(&out).map_err(io_err(&out))?;
        let cfg_path = out.join("config.cfg");
        std::fs::write(&cfg_path, cfg.render()).map_err(io_err(&cfg_path))?;
        let dataset = Dataset::from_dir(&data_dir, cfg.resolution)?;
        let log_path = out.join(format!("train_log_{}.csv", cfg.variant));
        let ckpt = out.join("checkpoint");
        let every = cfg.checkpoint_every;
        let mut log = create(&log_path)?;
        let mut trainer = Trainer::new(TrainState::new(cfg)?, &dataset);
        let total = trainer.total_steps();
        eprintln!(
            "training {} for {total} steps on {} images",
            trainer.state.config.variant,
            dataset.images.len()
        );
        let result = trainer.run(&mut log, |state, rep| {
            if every > 0 && rep.step % every == 0 {
                state.save_checkpoint(&ckpt)?;
            }
            Ok(())
        });
        log.flush().map_err(io_err(&log_path))?;
        m.outputs.push(log_path);
        m.outputs.push(cfg_path);
        let reports = result?;
        trainer.state.save_checkpoint(&ckpt)?;
        m.outputs.push(ckpt);
        if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
            eprintln!("l_rec {} -> {}", first.l_rec, last.l_rec);
        }
        Ok(EXIT_OK)
    })
}

fn parse_losses(s: &str) -> sga_core::Result<Vec<LossTerm>> {
    s.split(',').map(|t| t.trim().parse()).collect()
}

pub fn diagnose(a: DiagnoseArgs) -> u8 {
    let out = a.output.clone();
    with_manifest("diagnose", &out.join("run_manifest.json"), |m| {
        m.seeds.push(a.seed);
        m.inputs.extend([a.checkpoint.clone(), a.data.clone()]);
        let terms = parse_losses(&a.losses)?;
        let mut state = TrainState::load_checkpoint(&a.checkpoint)?;
        state.config.seed = a.seed;
        m.config_hash = Some(state.config.hash());
        let dataset = Dataset::from_dir(&a.data, state.config.resolution)?;
        let trainer = Trainer::new(state, &dataset);
        let mut reports = Vec::new();
        let mut residual = 0.0f32;
        for i in 0..a.batches.max(1) {
            let batch = trainer.batch_for(i)?;
            let pass = diagnostics::diagnostics_run(&trainer.state, &batch, &terms, a.epoch, a.bins)?;
            residual = residual.max(pass.max_residual);
            reports.extend(pass.reports.into_iter().map(|(_, r)| r));
        }
        // Pool all sampled batches into one report per label.
        let mut pooled: Vec<diagnostics::BranchGradientReport> = Vec::new();
        for r in reports {
            match pooled.iter_mut().find(|p| p.branch == r.branch) {
                Some(p) => p.cosines.extend(r.cosines),
                None => pooled.push(r),
            }
        }
        let pooled = pooled
            .into_iter()
            .map(|r| diagnostics::BranchGradientReport::new(r.epoch, r.branch, r.cosines, a.bins))
            .collect::<sga_core::Result<Vec<_>>>()?;
        std::fs::create_dir_all(&out).map_err(io_err(&out))?;
        let (hp, sp) = (out.join("histograms.csv"), out.join("summary.csv"));
        diagnostics::write_histogram_csv(&pooled, create(&hp)?).map_err(io_err(&hp))?;
        diagnostics::write_summary_csv(&pooled, create(&sp)?).map_err(io_err(&sp))?;
        for r in &pooled {
            println!(
                "{:<24} conflict {:>6.2}%  dominant {:>6.2}%  excluded {}",
                r.branch,
                100.0 * r.conflict_ratio(),
                100.0 * r.dominant_ratio(),
                r.histogram.excluded
            );
        }
        println!("decomposition residual {residual:e}");
        m.outputs.extend([hp, sp]);
        Ok(EXIT_OK)
    })
}

/// Token features of image 0 as a `d x h x w` map.
fn token_map(t: &Tensor, grid: (usize, usize)) -> sga_core::Result<Tensor> {
    let (n, d) = (t.shape()[1], t.shape()[2]);
    diagnostics::tokens_to_field(&t.data()[..n * d], grid.0, grid.1, d)
}

pub fn spectrum(a: SpectrumArgs) -> u8 {
    let manifest = a.output.with_extension("manifest.json");
    with_manifest("spectrum", &manifest, |m| {
        m.seeds.push(a.seed);
        m.inputs.extend([a.checkpoint.clone(), a.image.clone()]);
        let state = TrainState::load_checkpoint(&a.checkpoint)?;
        m.config_hash = Some(state.config.hash());
        let r = state.config.resolution;
        let img = data::resize(&data::load_png(&a.image)?, r, r)?;
        let reference = match &a.reference {
            Some(p) => data::resize(&data::load_png(p)?, r, r)?,
            None => img.clone(),
        };
        let sketch = data::xdog_extract(&img, &XDoGParams::default().with_sigma(a.sigma))?;
        let mut g = Graph::inference();
        let s = g.constant(sketch.reshape(&[1, 1, r, r])?);
        let rf = g.constant(reference.reshape(&[1, 3, r, r])?);
        let (out, _) = state.generator.forward(&mut g, s, rf, false)?;
        let before = diagnostics::spectrum_concentration(&token_map(g.value(out.f_s), out.grid)?)?;
        let after = diagnostics::spectrum_concentration(&token_map(g.value(out.f_gen), out.grid)?)?;
        let stages = [(SpectrumStage::BeforeAttention, &before), (SpectrumStage::AfterAttention, &after)];
        diagnostics::write_spectrum_csv(&stages, create(&a.output)?).map_err(io_err(&a.output))?;
        for (stage, rep) in stages {
            println!(
                "{:<17} rank for 90%: {:>3} of {}",
                stage.label(),
                rep.rank_for(0.9),
                rep.ratios.len()
            );
        }
        m.outputs.push(a.output.clone());
        Ok(EXIT_OK)
    })
}

fn load_dir(dir: &Path) -> sga_core::Result<Vec<(PathBuf, Tensor)>> {
    data::list_pngs(dir)?
        .into_par_iter()
        .map(|p| data::load_png(&p).map(|t| (p, t)))
        .collect()
}

fn score_dirs(a_dir: &Path, gt: &[(PathBuf, Tensor)], fx: &FeatureExtractor, out: &Path) -> sga_core::Result<(f64, f64)> {
    let a = load_dir(a_dir)?;
    if a.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} has {} images but the ground truth has {}",
            a_dir.display(),
            a.len(),
            gt.len()
        )));
    }
    let pairs = a
        .par_iter()
        .zip(gt.par_iter())
        .map(|((pa, ta), (_, tb))| metrics::ssim(ta, tb, &SsimParams::default()).map(|s| (stem(pa), s)))
        .collect::<sga_core::Result<Vec<_>>>()?;
    let set_a: Vec<Tensor> = a.into_iter().map(|(_, t)| t).collect();
    let set_b: Vec<Tensor> = gt.iter().map(|(_, t)| t.clone()).collect();
    let ffd = metrics::frechet_feature_distance(&set_a, &set_b, fx)?;
    metrics::write_metrics_csv(&pairs, ffd, create(out)?).map_err(io_err(out))?;
    let mean = pairs.iter().map(|(_, s)| s).sum::<f64>() / pairs.len().max(1) as f64;
    Ok((mean, ffd))
}

pub fn eval(a: EvalArgs) -> u8 {
    let manifest = a.output.with_extension("manifest.json");
    with_manifest("eval", &manifest, |m| {
        m.seeds.push(a.seed);
        m.inputs.extend([a.generated.clone(), a.ground_truth.clone()]);
        let fx = FeatureExtractor::pinned()?;
        let gt = load_dir(&a.ground_truth)?;
        let (ssim, ffd) = score_dirs(&a.generated, &gt, &fx, &a.output)?;
        println!("generated vs ground truth: ssim {ssim:.6}  ffd {ffd:.6}");
        m.outputs.push(a.output.clone());
        if let Some(r) = &a.reference {
            let stem = a.output.file_stem().map_or_else(|| "metrics".into(), |s| s.to_string_lossy().into_owned());
            let path = a.output.with_file_name(format!("{stem}_reference.csv"));
            m.inputs.push(r.clone());
            let (ssim, ffd) = score_dirs(r, &gt, &fx, &path)?;
            println!("reference vs ground truth: ssim {ssim:.6}  ffd {ffd:.6}");
            m.outputs.push(path);
        }
        Ok(EXIT_OK)
    })
}
