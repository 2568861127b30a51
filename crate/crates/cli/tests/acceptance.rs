//! End-to-end acceptance run. Every criterion is evaluated independently and
//! reported on its own PASS/FAIL line; the test fails if any of them fails.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use armorbench_cli::steps::Layout;
use armorbench_cli::{run, Command, RunConfig};
use armorbench_core::attacks::{self, ApgdStart, AttackConfig, AttackVariant};
use armorbench_core::data::{self, ImageSample, ImageShape, Normalization, TaggedDataset};
use armorbench_core::detectors::{Detector, Matrix, MlpModel, MlpParams};
use armorbench_core::metrics::{self, Report};
use armorbench_core::model::{self, loss_ce, Arch, Classifier, DualEncoderModel, LinearClassifier, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn fd_f32(v: f32, h: f32, mut f: impl FnMut(f32) -> f64) -> f64 {
    let (hi, lo) = (v + h, v - h);
    (f(hi) - f(lo)) / (hi as f64 - lo as f64)
}

fn small_model(seed: u64, side: usize, hidden: usize, embed: usize, k: usize) -> DualEncoderModel {
    let arch = Arch {
        input: ImageShape::rgb(side, side),
        hidden_dim: hidden,
        embed_dim: embed,
        num_classes: k,
    };
    let names = (0..k).map(|c| format!("c{c}")).collect();
    DualEncoderModel::init(arch, Normalization::default(), names, seed).unwrap()
}

fn flat(pixels: Vec<f32>, label: usize) -> ImageSample {
    let n = pixels.len();
    ImageSample {
        id: 0,
        label,
        shape: ImageShape {
            channels: 1,
            height: 1,
            width: n,
        },
        pixels,
    }
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let m = small_model(seed, 4, 12, 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x: Vec<f32> = (0..m.input_dim()).map(|_| rng.gen_range(0.05..0.95)).collect();
        let y = (seed % 5) as usize;
        let g = model::grad_input(&m, &x, y, LossKind::Ce).map_err(err)?;
        for i in 0..x.len() {
            let fd = fd_f32(x[i], 1e-4, |v| {
                let mut xp = x.clone();
                xp[i] = v;
                loss_ce(&m.logits(&xp).unwrap(), y).unwrap()
            });
            worst = worst.max(rel_err(g[i], fd));
        }
        let batch: Vec<(&[f32], usize)> = vec![(x.as_slice(), y)];
        let (_, pg) = m.grad_params(&batch).map_err(err)?;
        for i in 0..m.params.len() {
            let fd = fd_f32(m.params[i], 1e-5, |v| {
                let mut mm = m.clone();
                mm.params[i] = v;
                loss_ce(&mm.logits(&x).unwrap(), y).unwrap()
            });
            worst = worst.max(rel_err(pg.params[i], fd));
        }

        let (n, d, k) = (6, 5, 3);
        let xm = Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).map_err(err)?;
        let ym: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mlp = MlpModel::init(
            d,
            k,
            &MlpParams {
                hidden: 7,
                seed,
                ..Default::default()
            },
        );
        let rows: Vec<usize> = (0..n).collect();
        let (_, g) = mlp.loss_and_grad(&xm, &ym, &rows);
        for i in 0..mlp.params_flat.len() {
            let mut p = mlp.clone();
            p.params_flat[i] += 1e-6;
            let up = p.loss_and_grad(&xm, &ym, &rows).0;
            p.params_flat[i] -= 2e-6;
            let down = p.loss_and_grad(&xm, &ym, &rows).0;
            worst = worst.max(rel_err(g[i], (up - down) / 2e-6));
        }
    }
    let t = start.elapsed();
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    ensure(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!(
        "max rel err {worst:.2e} over 10 seeds, {:.2}s",
        t.as_secs_f64()
    ))
}

fn attack_exactness() -> Check {
    let m = small_model(9, 8, 16, 8, 4);
    let ds = data::gen_synthetic(9, 200, 4, 8, 8).map_err(err)?;
    let cfg = AttackConfig {
        apgd_iters: 10,
        ..Default::default()
    };
    let eps = cfg.epsilon;
    let mut exact = 0usize;
    for s in &ds.samples {
        let g = model::grad_input(&m, &s.pixels, s.label, LossKind::Ce).map_err(err)?;
        let ex = attacks::fgsm(&m, s, eps).map_err(err)?;
        for i in 0..s.pixels.len() {
            let x = s.pixels[i] as f64;
            if g[i] == 0.0 || x - eps < 0.0 || x + eps > 1.0 {
                continue;
            }
            let moved = ex.adv_pixels[i] as f64 - x;
            ensure((moved.abs() - eps).abs() < 1.2e-7, || format!("fgsm moved {moved}"))?;
            exact += 1;
        }
    }
    let sets = attacks::attack_dataset(&m, &ds, &cfg, true).map_err(err)?;
    for (s, v) in ds.samples.iter().zip(&sets) {
        for variant in AttackVariant::ALL {
            let ex = v.get(variant).ok_or("missing variant")?;
            ensure(ex.adv_pixels.iter().all(|p| (0.0..=1.0).contains(p)), || {
                format!("{} left [0,1]", variant.name())
            })?;
            if !matches!(variant, AttackVariant::Deepfool | AttackVariant::Fused) {
                let (linf, _) = attacks::perturbation_norms(&s.pixels, &ex.adv_pixels);
                ensure(linf <= eps + 1e-6, || format!("{} linf {linf}", variant.name()))?;
            }
        }
    }
    let w = [0.3, -0.2, 0.5, 0.1];
    let b = -0.15;
    let lin = LinearClassifier::binary(w.to_vec(), b);
    let x = vec![0.5f32, 0.4, 0.45, 0.6];
    let margin: f64 = b + w.iter().zip(&x).map(|(a, &v)| a * v as f64).sum::<f64>();
    let norm2: f64 = w.iter().map(|v| v * v).sum();
    let df = attacks::deepfool(&lin, &flat(x.clone(), (margin > 0.0) as usize), 50, 0.02).map_err(err)?;
    let mut df_err = 0.0f64;
    for i in 0..4 {
        let want = x[i] as f64 - 1.02 * margin / norm2 * w[i];
        df_err = df_err.max((df.adv_pixels[i] as f64 - want).abs());
    }
    ensure(df_err < 1e-6, || format!("deepfool closed-form error {df_err:.3e}"))?;
    Ok(format!(
        "{exact} exact FGSM coords, 200 samples in bounds, deepfool err {df_err:.1e}"
    ))
}

fn linear_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let d = rng.gen_range(2..=10);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = LinearClassifier::binary(w, rng.gen_range(-0.5..0.5));
        let x: Vec<f32> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y = case % 2;
        let eps = 0.1;
        let best = (0u32..1 << d)
            .map(|mask| {
                let v: Vec<f32> = (0..d)
                    .map(|i| {
                        let s = if mask >> i & 1 == 1 { eps } else { -eps };
                        (x[i] as f64 + s).clamp(0.0, 1.0) as f32
                    })
                    .collect();
                loss_ce(&m.logits(&v).unwrap(), y).unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let s = flat(x, y);
        let f = attacks::fgsm(&m, &s, eps).map_err(err)?;
        let a = attacks::apgd(&m, &s, eps, 20, LossKind::Ce, &ApgdStart::Random { seed: case as u64 }).map_err(err)?;
        for adv in [&f.adv_pixels, &a.adv_pixels] {
            worst = worst.max((best - loss_ce(&m.logits(adv).map_err(err)?, y).map_err(err)?).abs());
        }
    }
    let t = start.elapsed();
    ensure(worst < 1e-6, || format!("gap to vertex optimum {worst:.3e}"))?;
    ensure(t < Duration::from_secs(30), || format!("took {t:?}"))?;
    Ok(format!("20 models, max gap {worst:.1e}, {:.2}s", t.as_secs_f64()))
}

fn load_model(path: &Path) -> Result<DualEncoderModel, String> {
    DualEncoderModel::load_checkpoint(path).map_err(err)
}

fn misclassified(m: &DualEncoderModel, ds: &TaggedDataset) -> Result<Vec<bool>, String> {
    let pred = m.predict_all(&ds.dataset).map_err(err)?;
    Ok(pred.iter().zip(ds.dataset.labels()).map(|(p, y)| *p != y).collect())
}

fn dominance(dir: &Path) -> Check {
    let out = Layout::new(dir);
    let base = load_model(&out.baseline())?;
    let load = |v| TaggedDataset::load(&out.attack_set(v)).map_err(err);
    let fgsm = misclassified(&base, &load(AttackVariant::Fgsm)?)?;
    let aa = misclassified(&base, &load(AttackVariant::Autoattack)?)?;
    let seq = misclassified(&base, &load(AttackVariant::Sequential)?)?;
    for i in 0..fgsm.len() {
        ensure(!fgsm[i] || (aa[i] && seq[i]), || {
            format!("seed 7, sample {i}: fgsm succeeds alone")
        })?;
    }
    // Other attack seeds against the same baseline.
    let val = TaggedDataset::load(&out.val_set()).map_err(err)?.dataset;
    let sub = val.select(&(0..100.min(val.len())).collect::<Vec<_>>());
    for seed in 1..=3u64 {
        let cfg = AttackConfig {
            seed,
            ..Default::default()
        };
        for (i, v) in attacks::attack_dataset(&base, &sub, &cfg, true)
            .map_err(err)?
            .iter()
            .enumerate()
        {
            let seq = v.sequential.as_ref().ok_or("missing sequential")?;
            ensure(!v.fgsm.success || (v.autoattack.success && seq.success), || {
                format!("attack seed {seed}, sample {i}: fgsm succeeds alone")
            })?;
        }
    }
    let rate = |s: &[bool]| s.iter().filter(|&&b| b).count() as f64 / s.len() as f64;
    Ok(format!(
        "pointwise over {} samples; success fgsm {:.3} autoattack {:.3} sequential {:.3}; 3 extra attack seeds",
        fgsm.len(),
        rate(&fgsm),
        rate(&aa),
        rate(&seq)
    ))
}

fn robustness(report: &Report, runtime: Duration) -> Check {
    let acc = |b: &Option<armorbench_core::MetricsBundle>, what: &str| {
        b.as_ref()
            .map(|m| m.accuracy)
            .ok_or_else(|| format!("report lacks {what}"))
    };
    let b_adv = acc(&report.baseline, "baseline")?;
    let f_adv = acc(&report.finetuned, "finetuned")?;
    let b_clean = acc(&report.baseline_clean, "baseline_clean")?;
    let f_clean = acc(&report.finetuned_clean, "finetuned_clean")?;
    let summary = format!(
        "adv {b_adv:.3} -> {f_adv:.3}, clean {b_clean:.3} -> {f_clean:.3}, runtime {:.0}s",
        runtime.as_secs_f64()
    );
    ensure(f_adv - b_adv >= 0.15, || {
        format!("adversarial gain too small: {summary}")
    })?;
    ensure((f_clean - b_clean).abs() <= 0.20, || {
        format!("clean accuracy drifted: {summary}")
    })?;
    ensure(runtime < Duration::from_secs(600), || format!("too slow: {summary}"))?;
    Ok(summary)
}

fn detector_order(report: &Report) -> Check {
    let acc = |k: &str| {
        report
            .detectors
            .iter()
            .find(|d| d.kind == k)
            .map(|d| d.metrics.accuracy)
            .ok_or_else(|| format!("no {k} bundle"))
    };
    let (ada, lvl, leaf, mlp) = (acc("adaboost")?, acc("gbdt_level")?, acc("gbdt_leaf")?, acc("mlp")?);
    let summary = format!("mlp {mlp:.4} gbdt_leaf {leaf:.4} gbdt_level {lvl:.4} adaboost {ada:.4}");
    ensure(report.detectors.len() == 4, || "expected four bundles".into())?;
    ensure(mlp >= leaf && leaf >= ada, || format!("ordering violated: {summary}"))?;
    ensure(lvl - ada >= 0.05 && leaf - ada >= 0.05, || {
        format!("margin over adaboost < 5 points: {summary}")
    })?;
    Ok(summary)
}

fn metric_oracles() -> Check {
    let m = metrics::metrics(&metrics::confusion_matrix(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).map_err(err)?).map_err(err)?;
    ensure(m.accuracy == 0.75, || format!("accuracy {}", m.accuracy))?;
    ensure((m.macro_precision - 0.8333).abs() <= 1e-4, || {
        format!("precision {}", m.macro_precision)
    })?;
    ensure(m.macro_recall == 0.75, || format!("recall {}", m.macro_recall))?;
    ensure((m.macro_f1 - 0.7333).abs() <= 1e-4, || format!("f1 {}", m.macro_f1))?;
    let f = attacks::fuse(&[0.0], &[0.3], &[0.6], [1.0 / 3.0; 3]).map_err(err)?;
    ensure(f[0] == 0.3f32, || format!("fuse gave {}", f[0]))?;
    let ce = loss_ce(&[0.7; 10], 3).map_err(err)?;
    ensure((ce - 10f64.ln()).abs() < 1e-9, || format!("uniform CE {ce}"))?;
    Ok(format!(
        "P {:.4} R {:.2} F1 {:.4}, fuse 0.3, CE ln10",
        m.macro_precision, m.macro_recall, m.macro_f1
    ))
}

fn formats(a: &Path, b: &Path) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut raw = Vec::new();
    for _ in 0..10 {
        raw.push(rng.gen_range(0..10u8));
        raw.extend((0..3072).map(|_| rng.gen::<u8>()));
    }
    let back = data::to_cifar10_bytes(&data::parse_cifar10_batch(&raw).map_err(err)?).map_err(err)?;
    ensure(back == raw, || "CIFAR-10 round trip differs".into())?;

    let out = Layout::new(a);
    let ckpt = std::fs::read(out.finetuned()).map_err(err)?;
    let again = DualEncoderModel::from_checkpoint_bytes(&ckpt)
        .map_err(err)?
        .to_checkpoint_bytes()
        .map_err(err)?;
    ensure(again == ckpt, || "checkpoint round trip differs".into())?;
    let adv = std::fs::read(out.adv_train()).map_err(err)?;
    ensure(
        TaggedDataset::from_bytes(&adv).map_err(err)?.to_bytes().map_err(err)? == adv,
        || "adversarial dataset round trip differs".into(),
    )?;
    for kind in armorbench_core::detectors::DetectorKind::ALL {
        let det = std::fs::read(out.detector(kind)).map_err(err)?;
        ensure(
            Detector::from_bytes(&det).map_err(err)?.to_bytes().map_err(err)? == det,
            || format!("{} detector round trip differs", kind.name()),
        )?;
    }
    let r1 = std::fs::read(out.report()).map_err(err)?;
    let r2 = std::fs::read(Layout::new(b).report()).map_err(err)?;
    ensure(r1 == r2, || "report.json differs between identical runs".into())?;
    Ok(format!(
        "cifar, checkpoint, aadv, 4 adet bit-exact; report.json identical ({} bytes)",
        r1.len()
    ))
}

fn sweep(a: &RunConfig, b: &RunConfig) -> Check {
    run(&Command::Sweep, a).map_err(err)?;
    run(&Command::Sweep, b).map_err(err)?;
    let s1 = std::fs::read_to_string(Layout::new(&a.output_dir).sweep()).map_err(err)?;
    let s2 = std::fs::read_to_string(Layout::new(&b.output_dir).sweep()).map_err(err)?;
    ensure(s1 == s2, || "sweep differs between runs".into())?;
    let mut lines = s1.lines();
    let header = lines.next().unwrap_or_default();
    ensure(header.split(',').any(|c| c == "accuracy_range"), || {
        format!("header {header}")
    })?;
    let rows: Vec<&str> = lines.collect();
    ensure(rows.len() == 64, || format!("{} rows", rows.len()))?;
    let mut ranges = Vec::new();
    for r in &rows {
        let cols: Vec<&str> = r.split(',').collect();
        let range: f64 = cols[5].parse().map_err(err)?;
        let entry = format!("{} {range:.3}", cols[0]);
        if !ranges.contains(&entry) {
            ranges.push(entry);
        }
    }
    Ok(format!("64 rows, deterministic; accuracy range {}", ranges.join(", ")))
}

fn report_line(out: &mut Vec<bool>, n: usize, name: &str, result: Check) {
    let line = match &result {
        Ok(d) => format!("criterion {n} {name}: PASS ({d})"),
        Err(d) => format!("criterion {n} {name}: FAIL ({d})"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    out.push(result.is_ok());
}

#[test]
fn acceptance() {
    let mut passed = Vec::new();
    report_line(&mut passed, 1, "gradient correctness", gradients());
    report_line(&mut passed, 2, "attack exactness", attack_exactness());
    report_line(&mut passed, 3, "linear optimality oracle", linear_oracle());

    let root = tempfile::tempdir().unwrap();
    let cfg_a = RunConfig::minimal(7, root.path().join("a"));
    let cfg_b = RunConfig::minimal(7, root.path().join("b"));
    let start = Instant::now();
    let first = run(&Command::Pipeline, &cfg_a);
    let runtime = start.elapsed();
    let second = run(&Command::Pipeline, &cfg_b);
    let report = first
        .map_err(err)
        .and_then(|_| second.map_err(err))
        .and_then(|_| metrics::read_report(&Layout::new(&cfg_a.output_dir).report()).map_err(err));

    report_line(
        &mut passed,
        4,
        "construction dominance",
        report.clone().and_then(|_| dominance(&cfg_a.output_dir)),
    );
    report_line(
        &mut passed,
        5,
        "directional robustness",
        report.clone().and_then(|r| robustness(&r, runtime)),
    );
    report_line(
        &mut passed,
        6,
        "detector ordering",
        report.clone().and_then(|r| detector_order(&r)),
    );
    report_line(&mut passed, 7, "metric oracles", metric_oracles());
    report_line(
        &mut passed,
        8,
        "format fidelity",
        report
            .clone()
            .and_then(|_| formats(&cfg_a.output_dir, &cfg_b.output_dir)),
    );
    report_line(
        &mut passed,
        9,
        "sensitivity sweep",
        report.and_then(|_| sweep(&cfg_a, &cfg_b)),
    );

    let failed: Vec<usize> = (1..=9).filter(|&i| !passed[i - 1]).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
