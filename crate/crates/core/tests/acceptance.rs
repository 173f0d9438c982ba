//! One pass/fail line per acceptance criterion. The lines go straight to
//! stderr so they show up even when test output is captured.

mod common;

use std::io::Write;
use std::time::Instant;

use common::checks::{self, batch_for, small_config, Check};
use common::gradcheck::check;
use common::{data_checks, metric_checks, op_cases, randn_like, rng, synthetic_image};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use sga_core::diagnostics::{cosine_field, histogram, spectrum_concentration, DOMINANT_THRESHOLD};
use sga_core::metrics::{ssim, SsimParams};
use sga_core::model::{Dataset, StepReport, TrainState, Trainer};
use sga_core::{Tensor, TrainingConfig, Variant};

fn fail<T>(msg: impl Into<String>) -> std::result::Result<T, String> {
    Err(msg.into())
}

fn all_of(parts: Vec<Check>) -> Check {
    let mut notes = Vec::new();
    for p in parts {
        notes.push(p?);
    }
    Ok(notes.join("; "))
}

fn autodiff_soundness() -> Check {
    let t = Instant::now();
    let (mut count, mut worst) = (0, 0f64);
    for case in op_cases::all() {
        for seed in 1..=5u64 {
            let r = check(&(case.make)(seed), seed, |g, v| (case.f)(g, v));
            if r.max_rel_err >= case.tol {
                return fail(format!("{} seed {seed}: rel err {:.2e}", case.name, r.max_rel_err));
            }
            worst = worst.max(r.max_rel_err);
            count += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return fail(format!("suite took {secs:.1} s"));
    }
    Ok(format!("{count} op/seed checks, worst rel err {worst:.1e}, {secs:.2} s"))
}

fn stop_gradient_exactness() -> Check {
    all_of(vec![
        checks::stop_grad_exactness(Variant::Sga, 101),
        checks::stop_grad_exactness(Variant::BaselineStopGrad, 102),
    ])
}

fn branch_decomposition() -> Check {
    let cfg = TrainingConfig {
        max_steps: 12,
        ..small_config(Variant::Baseline, 7)
    };
    let data = Dataset::new((0..4).map(|s| synthetic_image(s, 32, 32)).collect()).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(TrainState::new(cfg).map_err(|e| e.to_string())?, &data);
    let mut r = rng(99);
    let mut picks: Vec<usize> = Vec::new();
    while picks.len() < 3 {
        let s = r.random_range(0..12);
        if !picks.contains(&s) {
            picks.push(s);
        }
    }
    picks.sort();
    let mut worst = 0f32;
    while trainer.state.step < 12 {
        let step = trainer.state.step;
        let batch = trainer.batch_for(step).map_err(|e| e.to_string())?;
        if picks.contains(&step) {
            let res = checks::decomposition_residual(&trainer.state, &batch)?;
            if res >= 1e-6 {
                return fail(format!("residual {res:.2e} at step {step}"));
            }
            worst = worst.max(res);
        }
        trainer.state.train_step(&batch).map_err(|e| e.to_string())?;
    }
    Ok(format!("steps {picks:?}, max residual {worst:.1e}"))
}

fn double_normalization() -> Check {
    all_of(vec![checks::double_norm_properties(100, 2024), checks::double_norm_hand_case()])
}

fn diagnostics_instrument() -> Check {
    // Cosines against a direct dot/norm.
    let (c, h, w) = (7, 5, 6);
    let a = randn_like(&[c, h, w], 1);
    let b = randn_like(&[c, h, w], 2);
    let cos = cosine_field(&a, &b).map_err(|e| e.to_string())?;
    let mut worst_cos = 0f64;
    for p in 0..h * w {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for k in 0..c {
            let (x, y) = (a.data()[k * h * w + p] as f64, b.data()[k * h * w + p] as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        worst_cos = worst_cos.max((cos.data()[p] as f64 - dot / (na.sqrt() * nb.sqrt())).abs());
    }
    if worst_cos > 1e-6 {
        return fail(format!("cosine off by {worst_cos:.2e}"));
    }

    // Ratios recounted from the raw values.
    let mut r = rng(3);
    let raw: Vec<f32> = (0..5000).map(|_| r.random_range(-1.0f32..=1.0)).collect();
    let hist = histogram(&raw, 80).map_err(|e| e.to_string())?;
    let n = raw.len() as f64;
    let conflict = raw.iter().filter(|&&v| v < 0.0).count() as f64 / n;
    let dominant = raw.iter().filter(|&&v| v as f64 > DOMINANT_THRESHOLD).count() as f64 / n;
    if hist.conflict_ratio != conflict || hist.dominant_ratio != dominant {
        return fail("histogram ratios differ from the raw counts");
    }

    // Spectrum against eigenvalues of the Gram matrix.
    let f = randn_like(&[8, 6, 6], 4);
    let rep = spectrum_concentration(&f).map_err(|e| e.to_string())?;
    let m = DMatrix::from_row_iterator(8, 36, f.data().iter().map(|&v| v as f64));
    let mut eig: Vec<f64> = SymmetricEigen::new(&m * m.transpose()).eigenvalues.iter().copied().collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let total: f64 = eig.iter().sum();
    let mut acc = 0.0;
    let mut worst_spec = 0f64;
    for (got, e) in rep.ratios.iter().zip(&eig) {
        acc += e;
        worst_spec = worst_spec.max((got - acc / total).abs());
    }
    if worst_spec > 1e-5 {
        return fail(format!("spectrum off by {worst_spec:.2e}"));
    }
    if rep.ratios.windows(2).any(|w| w[1] < w[0]) || rep.ratios.last() != Some(&1.0) {
        return fail("spectrum ratios not nondecreasing to 1");
    }
    Ok(format!(
        "cosine within {worst_cos:.1e}, ratios exact, spectrum within {worst_spec:.1e}"
    ))
}

fn data_pipeline() -> Check {
    let ms = data_checks::triple_timing_ms(256);
    let timing = if ms < 250.0 {
        Ok(format!("256x256 triple {ms:.1} ms"))
    } else {
        fail(format!("256x256 triple took {ms:.1} ms"))
    };
    all_of(vec![
        data_checks::xdog_output_range(0),
        data_checks::xdog_step_edge(),
        data_checks::tps_translation(),
        data_checks::triple_determinism(),
        timing,
    ])
}

fn smoke_run(variant: Variant) -> std::result::Result<(Vec<StepReport>, f64), String> {
    let cfg = TrainingConfig {
        variant,
        max_steps: 200,
        resolution: 64,
        batch_size: 4,
        self_reference: true,
        ..TrainingConfig::default()
    };
    let data = Dataset::new((0..8).map(|s| synthetic_image(500 + s, 64, 64)).collect()).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(TrainState::new(cfg).map_err(|e| e.to_string())?, &data);
    let t = Instant::now();
    let reports = trainer.run(&mut std::io::sink(), |_, _| Ok(())).map_err(|e| e.to_string())?;
    Ok((reports, t.elapsed().as_secs_f64()))
}

fn training_smoke() -> Check {
    let mut notes = Vec::new();
    for variant in [Variant::Sga, Variant::Baseline] {
        let (reports, secs) = smoke_run(variant)?;
        if reports.len() != 200 {
            return fail(format!("{variant}: {} steps", reports.len()));
        }
        let finite = reports
            .iter()
            .all(|r| [r.d_loss, r.g_adv, r.l_rec, r.l_perc, r.l_style, r.total].iter().all(|v| v.is_finite()));
        if !finite {
            return fail(format!("{variant}: non-finite loss"));
        }
        let (first, last) = (reports[0].l_rec, reports[199].l_rec);
        if last >= first {
            return fail(format!("{variant}: L_rec {first:.4} -> {last:.4}"));
        }
        if secs >= 600.0 {
            return fail(format!("{variant}: {secs:.0} s"));
        }
        notes.push(format!("{variant} L_rec {first:.4} -> {last:.4} in {secs:.0} s"));
    }
    Ok(notes.join("; "))
}

fn metrics() -> Check {
    let p = SsimParams::default();
    let img = synthetic_image(5, 32, 32);
    if ssim(&img, &img, &p).map_err(|e| e.to_string())? != 1.0 {
        return fail("ssim(a, a) != 1");
    }
    // Constant images: the structure term is C2/C2, leaving the luminance term.
    let (u, v) = (0.3f64, 0.7f64);
    let a = Tensor::full(&[3, 16, 16], u as f32);
    let b = Tensor::full(&[3, 16, 16], v as f32);
    let c1 = 0.01f64.powi(2);
    let (u, v) = (u as f32 as f64, v as f32 as f64);
    let want = (2.0 * u * v + c1) / (u * u + v * v + c1);
    let got = ssim(&a, &b, &p).map_err(|e| e.to_string())?;
    if (got - want).abs() > 1e-6 {
        return fail(format!("constant ssim {got} vs {want}"));
    }
    all_of(vec![
        Ok(format!("ssim self 1, constant closed form within {:.1e}", (got - want).abs())),
        metric_checks::feature_distance_identity(),
        metric_checks::frechet_closed_forms(),
    ])
}

fn ablation_plumbing() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = Dataset::new((0..4).map(|s| synthetic_image(900 + s, 32, 32)).collect()).map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    for variant in Variant::ALL {
        let cfg = TrainingConfig {
            max_steps: 50,
            ..small_config(variant, 11)
        };
        let path = dir.path().join(format!("train_log_{}.csv", variant.label()));
        let mut file = std::fs::File::create(&path).map_err(|e| e.to_string())?;
        let mut trainer = Trainer::new(TrainState::new(cfg).map_err(|e| e.to_string())?, &data);
        trainer.run(&mut file, |_, _| Ok(())).map_err(|e| format!("{variant}: {e}"))?;
        let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let rows: Vec<&str> = text.lines().skip(1).collect();
        let steps_ok = rows.len() == 50
            && rows.iter().enumerate().all(|(i, r)| r.split(',').next() == Some(&(i + 1).to_string()));
        if !steps_ok {
            return fail(format!("{variant}: log has {} rows", rows.len()));
        }
        logs.push((path, text));
    }
    for i in 0..logs.len() {
        for j in i + 1..logs.len() {
            if logs[i].0 == logs[j].0 || logs[i].1 == logs[j].1 {
                return fail(format!("logs {:?} and {:?} coincide", logs[i].0, logs[j].0));
            }
        }
    }
    // The SGA map has no incoming gradient edges at all.
    let cfg = small_config(Variant::Sga, 12);
    let state = TrainState::new(cfg.clone()).map_err(|e| e.to_string())?;
    let pass = state.generator_pass(&batch_for(&cfg, 12), true).map_err(|e| e.to_string())?;
    let g = &pass.graph;
    let edges = g.gradient_edges();
    for t in &pass.output.taps {
        let into_map = edges.iter().any(|&(_, c)| c == t.attention_map);
        if g.requires_grad(t.attention_map) || into_map || g.has_gradient_path(t.x, t.attention_map) {
            return fail("sga attention map is on the gradient tape");
        }
    }
    Ok(format!(
        "6 variants x 50 steps, distinct labeled logs; {} sga maps off the tape",
        pass.output.taps.len()
    ))
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 9] = [
        ("autodiff soundness", autodiff_soundness),
        ("stop-gradient exactness", stop_gradient_exactness),
        ("branch decomposition", branch_decomposition),
        ("double normalization", double_normalization),
        ("diagnostics instrument", diagnostics_instrument),
        ("data pipeline", data_pipeline),
        ("training smoke", training_smoke),
        ("metrics", metrics),
        ("ablation plumbing", ablation_plumbing),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let line = match run() {
            Ok(note) => format!("PASS  {name}: {note}"),
            Err(why) => {
                failed.push(name);
                format!("FAIL  {name}: {why}")
            }
        };
        let _ = writeln!(std::io::stderr(), "{line}");
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
