//! Pipeline stages. Each stage reads its inputs from the output directory,
//! fails with a dependency error naming the first missing file, and writes
//! its documented outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use armorbench_core::advtrain::{self, EvalReport};
use armorbench_core::attacks::{self, AttackVariant, SuccessSummary};
use armorbench_core::container;
use armorbench_core::data::{self, LabeledDataset, TaggedDataset};
use armorbench_core::detectors::{self, DetectorKind, DetectorParams, FeatureSet};
use armorbench_core::metrics::{self, DetectorEntry, Report};
use armorbench_core::model::{self, Arch, DualEncoderModel, TrainConfig};
use armorbench_core::seed;
use armorbench_core::ImageSample;

use crate::config::{DataKind, Encoder, RunConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// File layout under the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn train_set(&self) -> PathBuf {
        self.at("data/train.aadv")
    }
    pub fn val_set(&self) -> PathBuf {
        self.at("data/val.aadv")
    }
    pub fn annotations(&self) -> PathBuf {
        self.at("data/annotations.csv")
    }
    pub fn baseline(&self) -> PathBuf {
        self.at("models/baseline.ckpt")
    }
    pub fn baseline_log(&self) -> PathBuf {
        self.at("models/baseline_log.csv")
    }
    pub fn attack_set(&self, v: AttackVariant) -> PathBuf {
        self.at(&format!("attacks/val_{}.aadv", v.name()))
    }
    pub fn attack_success(&self) -> PathBuf {
        self.at("attacks/success.json")
    }
    pub fn adv_train(&self) -> PathBuf {
        self.at("advtrain/train.aadv")
    }
    pub fn adv_val(&self) -> PathBuf {
        self.at("advtrain/val.aadv")
    }
    pub fn finetuned(&self) -> PathBuf {
        self.at("models/finetuned.ckpt")
    }
    pub fn retrain_log(&self) -> PathBuf {
        self.at("models/retrain_log.csv")
    }
    pub fn eval(&self, model: &str, set: &str, ext: &str) -> PathBuf {
        self.at(&format!("eval/{model}_{set}.{ext}"))
    }
    pub fn features(&self) -> PathBuf {
        self.at("detectors/features.json")
    }
    pub fn detector(&self, k: DetectorKind) -> PathBuf {
        self.at(&format!("detectors/{}.adet", k.name()))
    }
    pub fn detector_metrics(&self) -> PathBuf {
        self.at("detectors/metrics.json")
    }
    pub fn detection_metrics(&self) -> PathBuf {
        self.at("detectors/detection_metrics.json")
    }
    pub fn sweep(&self) -> PathBuf {
        self.at("sweep/sweep.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.at("report.json")
    }
}

fn need(path: PathBuf, step: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Dependency { path, step })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(container::write_file(path, text.as_bytes())?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    // Through `Value` so map keys come out sorted.
    let mut s = serde_json::to_string_pretty(&serde_json::to_value(value)?)?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&container::read_file(path)?)?)
}

fn load_set(path: PathBuf, step: &'static str) -> Result<TaggedDataset> {
    Ok(TaggedDataset::load(&need(path, step)?)?)
}

fn load_model(path: PathBuf, step: &'static str) -> Result<DualEncoderModel> {
    Ok(DualEncoderModel::load_checkpoint(&need(path, step)?)?)
}

/// Stage seeds: the global seed mixed with a stage tag and the section's own seed.
fn stage_seed(cfg: &RunConfig, tag: u64, local: u64) -> u64 {
    seed::derive(cfg.seed, &[tag, local])
}

fn train_config(cfg: &RunConfig, base: &TrainConfig, tag: u64) -> TrainConfig {
    TrainConfig {
        seed: stage_seed(cfg, tag, base.seed),
        ..base.clone()
    }
}

fn attack_config(cfg: &RunConfig) -> armorbench_core::AttackConfig {
    armorbench_core::AttackConfig {
        seed: stage_seed(cfg, 5, cfg.attack.seed),
        ..cfg.attack.clone()
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let out = Layout::new(&cfg.output_dir);
    let d = &cfg.data;
    let full = match d.source {
        DataKind::Synthetic => {
            data::gen_synthetic_with(stage_seed(cfg, 1, 0), d.n, d.num_classes, d.height, d.width, &d.style)?
        }
        DataKind::Cifar10 => {
            let path = d.path.as_ref().expect("validated");
            let ds = data::load_cifar10(path)?;
            match d.limit {
                Some(n) if n < ds.len() => ds.select(&(0..n).collect::<Vec<_>>()),
                _ => ds,
            }
        }
    };
    let (train, val) = data::split(&full, d.train_fraction, stage_seed(cfg, 2, 0))?;
    log::info!(
        "gen-data: {} train / {} val samples, {} classes",
        train.len(),
        val.len(),
        full.num_classes()
    );
    data::write_annotations(&full, &out.annotations())?;
    TaggedDataset::clean(train).save(&out.train_set())?;
    TaggedDataset::clean(val).save(&out.val_set())?;
    Ok(())
}

pub fn train_base(cfg: &RunConfig) -> Result<()> {
    let out = Layout::new(&cfg.output_dir);
    let train = load_set(out.train_set(), "gen-data")?.dataset;
    let val = load_set(out.val_set(), "gen-data")?.dataset;
    let arch = Arch {
        input: train.shape,
        hidden_dim: cfg.model.hidden_dim,
        embed_dim: cfg.model.embed_dim,
        num_classes: train.num_classes(),
    };
    let init = DualEncoderModel::init(
        arch,
        cfg.model.normalization.clone(),
        train.class_names.clone(),
        stage_seed(cfg, 3, 0),
    )?;
    let tc = train_config(cfg, &cfg.train, 4);
    let (trained, log) = model::train(init, &train, Some(&val), None, &tc)?;
    log::info!("train-base: clean val accuracy {:.4}", trained.accuracy(&val)?);
    trained.save_checkpoint(&out.baseline())?;
    write_text(&out.baseline_log(), &advtrain::monitor_csv(&log))?;
    Ok(())
}

pub fn attack(cfg: &RunConfig) -> Result<BTreeMap<String, SuccessSummary>> {
    let out = Layout::new(&cfg.output_dir);
    let base = load_model(out.baseline(), "train-base")?;
    let val = load_set(out.val_set(), "gen-data")?.dataset;
    let ac = attack_config(cfg);
    let sets = attacks::attack_dataset(&base, &val, &ac, true)?;
    let mut success = BTreeMap::new();
    for v in AttackVariant::ALL {
        let examples: Vec<_> = sets
            .iter()
            .map(|s| s.get(v).expect("sequential requested").clone())
            .collect();
        let summary = attacks::attack_success_rate(&base, &examples)?;
        log::info!("attack {}: success rate {:.4}", v.name(), summary.rate);
        let meta = serde_json::json!({ "variant": v.name(), "attack": ac });
        attacks::examples_to_dataset(&examples, val.class_names.clone(), val.shape, val.source, meta)?
            .save(&out.attack_set(v))?;
        success.insert(v.name().to_string(), summary);
    }
    write_json(&out.attack_success(), &success)?;
    Ok(success)
}

pub fn build_advset(cfg: &RunConfig) -> Result<()> {
    let out = Layout::new(&cfg.output_dir);
    let base = load_model(out.baseline(), "train-base")?;
    let train = load_set(out.train_set(), "gen-data")?.dataset;
    let val = load_set(out.val_set(), "gen-data")?.dataset;
    let ac = attack_config(cfg);
    let adv_train = advtrain::build_adversarial_dataset(&base, &train, &ac, &cfg.advtrain.mix, stage_seed(cfg, 6, 0))?;
    let adv_val = advtrain::build_adversarial_dataset(&base, &val, &ac, &cfg.advtrain.val_mix, stage_seed(cfg, 7, 0))?;
    log::info!(
        "build-advset: {} training and {} validation examples",
        adv_train.dataset.len(),
        adv_val.dataset.len()
    );
    adv_train.save(&out.adv_train())?;
    adv_val.save(&out.adv_val())?;
    Ok(())
}

pub fn retrain(cfg: &RunConfig) -> Result<()> {
    let out = Layout::new(&cfg.output_dir);
    let base = load_model(out.baseline(), "train-base")?;
    let adv_train = load_set(out.adv_train(), "build-advset")?.dataset;
    let adv_val = load_set(out.adv_val(), "build-advset")?.dataset;
    let val = load_set(out.val_set(), "gen-data")?.dataset;
    let tc = train_config(cfg, &cfg.advtrain.train, 8);
    let outcome = advtrain::retrain(&base, &adv_train, &val, &adv_val, &tc)?;
    log::info!("retrain: kept epoch {:?}", outcome.best_epoch);
    outcome.model.save_checkpoint(&out.finetuned())?;
    write_text(&out.retrain_log(), &advtrain::monitor_csv(&outcome.log))?;
    Ok(())
}

/// Evaluations keyed by `<model>_<set>` (model: baseline / finetuned, set: adv / clean).
pub fn eval(cfg: &RunConfig) -> Result<BTreeMap<String, EvalReport>> {
    let out = Layout::new(&cfg.output_dir);
    let base = load_model(out.baseline(), "train-base")?;
    let tuned = load_model(out.finetuned(), "retrain")?;
    let val = load_set(out.val_set(), "gen-data")?.dataset;
    let adv_val = load_set(out.adv_val(), "build-advset")?.dataset;
    let mut reports = BTreeMap::new();
    let mut bars = Vec::new();
    for (name, m) in [("baseline", &base), ("finetuned", &tuned)] {
        for (set, ds) in [("adv", &adv_val), ("clean", &val)] {
            let r = advtrain::evaluate_model(m, ds)?;
            log::info!(
                "eval {name} on {set}: accuracy {:.4} macro F1 {:.4}",
                r.accuracy,
                r.macro_f1
            );
            write_json(&out.eval(name, set, "json"), &r)?;
            write_text(&out.eval(name, set, "confusion.csv"), &r.confusion.to_csv())?;
            metrics::render_confusion_heatmap(
                &format!("{name} / {set}"),
                &r.confusion,
                &out.eval(name, set, "confusion.svg"),
            )?;
            bars.push((format!("{name}_{set}"), r.accuracy));
            reports.insert(format!("{name}_{set}"), r);
        }
    }
    metrics::render_bar_chart("accuracy", &bars, &out.root.join("eval/accuracy.svg"))?;
    Ok(reports)
}

/// Clean image followed by its FGSM, DeepFool and AutoAttack versions.
fn detector_rows(
    clean: &LabeledDataset,
    attacked: [&LabeledDataset; 3],
    images: &mut Vec<ImageSample>,
    flags: &mut Vec<bool>,
) {
    for (i, s) in clean.samples.iter().enumerate() {
        images.push(s.clone());
        flags.push(false);
        for a in attacked {
            images.push(a.samples[i].clone());
            flags.push(true);
        }
    }
}

/// Train detectors on the class-label task (the reported bundles) and on the
/// clean-vs-adversarial task.
pub fn train_detectors(cfg: &RunConfig) -> Result<Vec<DetectorEntry>> {
    let out = Layout::new(&cfg.output_dir);
    let base = load_model(out.baseline(), "train-base")?;
    let encoder = match cfg.detectors.encoder {
        Encoder::Baseline => base.clone(),
        Encoder::Finetuned => load_model(out.finetuned(), "retrain")?,
    };
    let train = load_set(out.train_set(), "gen-data")?.dataset;
    let val = load_set(out.val_set(), "gen-data")?.dataset;
    let base_kinds = [AttackVariant::Fgsm, AttackVariant::Deepfool, AttackVariant::Autoattack];
    let val_attacked = base_kinds
        .iter()
        .map(|&v| Ok(load_set(out.attack_set(v), "attack")?.dataset))
        .collect::<Result<Vec<_>>>()?;

    let n = cfg.detectors.train_samples.min(train.len());
    let subset = train.select(&(0..n).collect::<Vec<_>>());
    let sets = attacks::attack_dataset(&base, &subset, &attack_config(cfg), false)?;
    let pick = |f: fn(&attacks::VariantSet) -> &armorbench_core::AdvExample| -> Result<LabeledDataset> {
        let samples = sets.iter().map(|s| f(s).to_sample(subset.shape)).collect();
        Ok(LabeledDataset::new(
            samples,
            subset.class_names.clone(),
            subset.shape,
            subset.source,
        )?)
    };
    let train_attacked = [pick(|s| &s.fgsm)?, pick(|s| &s.deepfool)?, pick(|s| &s.autoattack)?];

    let mut images = Vec::new();
    let mut flags = Vec::new();
    detector_rows(
        &subset,
        [&train_attacked[0], &train_attacked[1], &train_attacked[2]],
        &mut images,
        &mut flags,
    );
    let n_train = images.len();
    detector_rows(
        &val,
        [&val_attacked[0], &val_attacked[1], &val_attacked[2]],
        &mut images,
        &mut flags,
    );
    let features = detectors::extract_features(&encoder, &images, &flags, n_train)?;
    write_json(&out.features(), &features)?;

    let params = detector_params(cfg, &cfg.detectors.params);
    let entries = fit_and_score(&features, &params, Some(&out))?;
    write_json(&out.detector_metrics(), &entries)?;
    let bars: Vec<(String, f64)> = entries.iter().map(|e| (e.kind.clone(), e.metrics.accuracy)).collect();
    metrics::render_bar_chart("detector accuracy", &bars, &out.root.join("detectors/accuracy.svg"))?;

    let detection = fit_and_score(&detectors::detection_task(&features), &params, None)?;
    write_json(&out.detection_metrics(), &detection)?;
    Ok(entries)
}

fn detector_params(cfg: &RunConfig, p: &DetectorParams) -> DetectorParams {
    let mut p = p.clone();
    p.mlp.seed = stage_seed(cfg, 9, p.mlp.seed);
    p
}

fn fit_and_score(fs: &FeatureSet, params: &DetectorParams, save: Option<&Layout>) -> Result<Vec<DetectorEntry>> {
    let (xtr, ytr) = fs.train();
    let (xte, yte) = fs.test();
    let mut entries = Vec::new();
    for kind in DetectorKind::ALL {
        let det = detectors::train_detector(kind, &xtr, ytr, fs.num_classes, params)?;
        let pred = det.predict(&xte)?;
        let m = metrics::metrics(&metrics::confusion_matrix(yte, &pred, fs.num_classes)?)?;
        log::info!(
            "{} ({} classes): accuracy {:.4} macro F1 {:.4}",
            kind.name(),
            fs.num_classes,
            m.accuracy,
            m.macro_f1
        );
        if let Some(out) = save {
            det.save(&out.detector(kind))?;
        }
        entries.push(DetectorEntry {
            kind: kind.name().to_string(),
            metrics: m,
        });
    }
    Ok(entries)
}

pub fn sweep(cfg: &RunConfig) -> Result<String> {
    let out = Layout::new(&cfg.output_dir);
    let features: FeatureSet = read_json(&need(out.features(), "train-detectors")?)?;
    let s = &cfg.sweep;
    let mut base = detector_params(cfg, &cfg.detectors.params);
    base.adaboost.rounds = s.rounds;
    base.gbdt_level.trees = s.rounds;
    base.gbdt_leaf.trees = s.rounds;
    base.mlp.epochs = s.mlp_epochs;
    let (xtr, ytr) = features.train();
    let (xte, yte) = features.test();
    let mut rows = Vec::new();
    for &kind in &s.kinds {
        rows.extend(detectors::sensitivity_sweep(
            kind,
            &s.grid,
            &base,
            (&xtr, ytr),
            (&xte, yte),
            features.num_classes,
        )?);
        log::info!("sweep {}: done", kind.name());
    }
    let csv = detectors::sweep_csv(&rows);
    write_text(&out.sweep(), &csv)?;
    Ok(csv)
}

pub fn report(cfg: &RunConfig) -> Result<Report> {
    let out = Layout::new(&cfg.output_dir);
    let mut r = Report::default();
    let bundle = |model: &str, set: &str| -> Result<Option<armorbench_core::MetricsBundle>> {
        let p = out.eval(model, set, "json");
        Ok(if p.is_file() {
            Some(read_json::<EvalReport>(&p)?.metrics)
        } else {
            None
        })
    };
    r.baseline = bundle("baseline", "adv")?;
    r.finetuned = bundle("finetuned", "adv")?;
    r.baseline_clean = bundle("baseline", "clean")?;
    r.finetuned_clean = bundle("finetuned", "clean")?;
    if out.attack_success().is_file() {
        let s: BTreeMap<String, SuccessSummary> = read_json(&out.attack_success())?;
        r.attack_success = s.into_iter().map(|(k, v)| (k, v.rate)).collect();
    }
    if out.detector_metrics().is_file() {
        r.detectors = read_json(&out.detector_metrics())?;
    }
    if r.is_empty() {
        return Err(CliError::Dependency {
            path: out.eval("baseline", "adv", "json"),
            step: "eval",
        });
    }
    metrics::write_report(&r, &out.report())?;
    Ok(r)
}

/// The full chain, ending with the report.
pub fn pipeline(cfg: &RunConfig) -> Result<Report> {
    gen_data(cfg)?;
    train_base(cfg)?;
    attack(cfg)?;
    build_advset(cfg)?;
    retrain(cfg)?;
    eval(cfg)?;
    train_detectors(cfg)?;
    report(cfg)
}
