//! White-box attacks in pixel space.
//!
//! All attacks take images in `[0, 1]` and return images in `[0, 1]`. The
//! budgeted ones (FGSM, APGD, the AutoAttack ensemble and the sequential
//! chain) stay inside the L-infinity ball of radius `epsilon` around the
//! original image. DeepFool is unbudgeted when run on its own.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataSource, ImageSample, LabeledDataset, TaggedDataset};
use crate::error::{Error, Result};
use crate::model::{argmax, logit_jacobian, loss_and_logit_grad, loss_ce, Classifier, LossKind};
use crate::seed;

pub const FGSM: &str = "fgsm";
pub const DEEPFOOL: &str = "deepfool";
pub const AUTOATTACK: &str = "autoattack";
pub const FUSED: &str = "fused";

/// APGD momentum weight.
const APGD_ALPHA: f64 = 0.75;
/// Fraction of improving steps below which the step size is halved.
const APGD_RHO: f64 = 0.75;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L-infinity budget in pixel units.
    pub epsilon: f64,
    pub apgd_iters: usize,
    /// Extra random-start APGD-CE runs after the FGSM-seeded one.
    pub apgd_restarts: usize,
    pub deepfool_max_iter: usize,
    pub deepfool_overshoot: f64,
    /// Run the APGD-DLR stage of the ensemble (needs at least 3 classes).
    pub use_dlr: bool,
    /// Fusion weights for (fgsm, deepfool, autoattack).
    pub fuse_weights: [f64; 3],
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            apgd_iters: 50,
            apgd_restarts: 2,
            deepfool_max_iter: 50,
            deepfool_overshoot: 0.02,
            use_dlr: true,
            fuse_weights: [1.0 / 3.0; 3],
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.deepfool_overshoot >= 0.0 && self.deepfool_overshoot.is_finite()) {
            return Err(Error::config("deepfool overshoot must be >= 0"));
        }
        if self.apgd_iters == 0 {
            return Err(Error::config("apgd_iters must be >= 1"));
        }
        check_weights(&self.fuse_weights)
    }
}

fn check_weights(w: &[f64; 3]) -> Result<()> {
    if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "fusion weights must be nonnegative and sum to 1, got {w:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvExample {
    pub original_id: u64,
    pub label: usize,
    pub adv_pixels: Vec<f32>,
    pub chain: Vec<String>,
    /// Winning stage inside an ensemble attack (`"fgsm"`, `"apgd-ce"`, ...).
    pub stage: Option<String>,
    pub linf_norm: f64,
    pub l2_norm: f64,
    pub success: bool,
    pub predicted_label: usize,
    pub iterations: usize,
    /// Best-loss-so-far trace for iterative ascent attacks.
    pub loss_trace: Vec<f64>,
}

impl AdvExample {
    fn new<C: Classifier + ?Sized>(model: &C, sample: &ImageSample, adv: Vec<f32>, chain: &[&str]) -> Result<Self> {
        let predicted = model.predict(&adv)?;
        let (linf, l2) = perturbation_norms(&sample.pixels, &adv);
        Ok(AdvExample {
            original_id: sample.id,
            label: sample.label,
            adv_pixels: adv,
            chain: chain.iter().map(|s| s.to_string()).collect(),
            stage: None,
            linf_norm: linf,
            l2_norm: l2,
            success: predicted != sample.label,
            predicted_label: predicted,
            iterations: 0,
            loss_trace: Vec::new(),
        })
    }

    pub fn chain_name(&self) -> String {
        self.chain.join("+")
    }

    pub fn to_sample(&self, shape: crate::data::ImageShape) -> ImageSample {
        ImageSample {
            id: self.original_id,
            label: self.label,
            shape,
            pixels: self.adv_pixels.clone(),
        }
    }
}

/// `(max |a - x|, ||a - x||_2)` computed in `f64`.
pub fn perturbation_norms(x: &[f32], adv: &[f32]) -> (f64, f64) {
    let mut linf = 0.0f64;
    let mut l2 = 0.0f64;
    for (&a, &b) in x.iter().zip(adv) {
        let d = b as f64 - a as f64;
        linf = linf.max(d.abs());
        l2 += d * d;
    }
    (linf, l2.sqrt())
}

fn check_shape(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: b.len(),
            got: a.len(),
        });
    }
    Ok(())
}

fn project_coord(v: f64, x0: f32, eps: f64) -> f32 {
    let x0 = x0 as f64;
    (v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0)) as f32
}

/// Clamp `x` into `[x0 - eps, x0 + eps]`, then into `[0, 1]`.
pub fn project_linf(x: &[f32], x0: &[f32], epsilon: f64) -> Result<Vec<f32>> {
    check_shape(x, x0)?;
    Ok(x.iter()
        .zip(x0)
        .map(|(&v, &o)| project_coord(v as f64, o, epsilon))
        .collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One forward/backward: loss, input gradient and predicted label.
fn evaluate<C: Classifier + ?Sized>(
    model: &C,
    x: &[f32],
    label: usize,
    kind: LossKind,
    sample_id: u64,
) -> Result<(f64, Vec<f64>, usize)> {
    let mut loss = 0.0;
    let (z, mut grads) = model.forward_vjp(x, &mut |z| {
        let (l, dz) = loss_and_logit_grad(kind, z, label)?;
        loss = l;
        Ok(vec![dz])
    })?;
    let g = grads.pop().unwrap();
    if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::AttackFailure {
            sample_id,
            reason: "non-finite loss or gradient".into(),
        });
    }
    Ok((loss, g, argmax(&z)))
}

fn fgsm_point<C: Classifier + ?Sized>(model: &C, sample: &ImageSample, epsilon: f64) -> Result<Vec<f32>> {
    let (_, g, _) = evaluate(model, &sample.pixels, sample.label, LossKind::Ce, sample.id)?;
    Ok(sample
        .pixels
        .iter()
        .zip(&g)
        .map(|(&x, &gi)| (x as f64 + epsilon * sign(gi)).clamp(0.0, 1.0) as f32)
        .collect())
}

/// `clip(x + epsilon * sign(grad_x CE))` with `sign(0) = 0`.
pub fn fgsm<C: Classifier + ?Sized>(model: &C, sample: &ImageSample, epsilon: f64) -> Result<AdvExample> {
    if !(epsilon >= 0.0) {
        return Err(Error::config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let adv = fgsm_point(model, sample, epsilon)?;
    AdvExample::new(model, sample, adv, &[FGSM])
}

/// Whether some other class has caught up with the label's logit. The
/// relative slack absorbs round-off when an iterate lands exactly on a
/// linear boundary.
fn crossed(z: &[f64], label: usize) -> bool {
    let zy = z[label];
    let slack = 1e-9 * zy.abs().max(1.0);
    z.iter().enumerate().any(|(k, &zk)| k != label && zk >= zy - slack)
}

struct DeepFoolRun {
    adv: Vec<f32>,
    iterations: usize,
}

fn deepfool_from<C: Classifier + ?Sized>(
    model: &C,
    start: &[f32],
    label: usize,
    max_iter: usize,
    overshoot: f64,
) -> Result<DeepFoolRun> {
    let k = model.num_classes();
    if k < 2 {
        return Err(Error::config("deepfool needs at least 2 classes"));
    }
    let scale = 1.0 + overshoot;
    let apply = |r: &[f64]| -> Vec<f32> {
        start
            .iter()
            .zip(r)
            .map(|(&x, &ri)| (x as f64 + scale * ri).clamp(0.0, 1.0) as f32)
            .collect()
    };
    let mut r_tot = vec![0.0f64; start.len()];
    let mut current = start.to_vec();
    let mut iterations = 0;
    loop {
        let (z, jac) = logit_jacobian(model, &current)?;
        if crossed(&z, label) || iterations == max_iter {
            break;
        }
        let wy = &jac[label];
        let mut best: Option<(f64, usize, f64)> = None;
        for c in (0..k).filter(|&c| c != label) {
            let norm = jac[c]
                .iter()
                .zip(wy)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if norm < DEGENERATE_NORM {
                continue;
            }
            let ratio = (z[c] - z[label]).abs() / norm;
            if best.is_none_or(|(r, _, _)| ratio < r) {
                best = Some((ratio, c, norm));
            }
        }
        let Some((_, l, norm)) = best else {
            let norm = (0..k)
                .filter(|&c| c != label)
                .map(|c| {
                    jac[c]
                        .iter()
                        .zip(wy)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max);
            return Err(Error::DegenerateGeometry(norm));
        };
        let coef = (z[l] - z[label]).abs() / (norm * norm);
        for ((r, wl), wy) in r_tot.iter_mut().zip(&jac[l]).zip(wy) {
            *r += coef * (wl - wy);
        }
        iterations += 1;
        current = apply(&r_tot);
    }
    Ok(DeepFoolRun {
        adv: apply(&r_tot),
        iterations,
    })
}

/// Multiclass DeepFool with overshoot applied to the accumulated perturbation.
pub fn deepfool<C: Classifier + ?Sized>(
    model: &C,
    sample: &ImageSample,
    max_iter: usize,
    overshoot: f64,
) -> Result<AdvExample> {
    if !(overshoot >= 0.0) {
        return Err(Error::config("deepfool overshoot must be >= 0"));
    }
    let run = deepfool_from(model, &sample.pixels, sample.label, max_iter, overshoot)?;
    let mut ex = AdvExample::new(model, sample, run.adv, &[DEEPFOOL])?;
    ex.iterations = run.iterations;
    Ok(ex)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ApgdStart {
    /// The FGSM (cross-entropy) point.
    Fgsm,
    /// Uniform in the epsilon ball, seeded.
    Random { seed: u64 },
    /// An explicit starting image (projected into the ball first).
    Warm(Vec<f32>),
}

#[derive(Debug, Clone)]
pub struct ApgdRun {
    pub best: Vec<f32>,
    pub best_loss: f64,
    /// Best loss after each iterate; nondecreasing.
    pub trace: Vec<f64>,
    /// Highest-loss iterate that the model misclassifies, if any.
    pub best_success: Option<(f64, Vec<f32>)>,
    pub iterations: usize,
    pub halvings: usize,
}

/// Checkpoint iterations `ceil(p_j * iters)` for
/// `p_0 = 0, p_1 = 0.22, p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06)`.
pub fn apgd_checkpoints(iters: usize) -> Vec<usize> {
    let mut p = vec![0.0f64, 0.22];
    while *p.last().unwrap() < 1.0 {
        let j = p.len() - 1;
        let next = p[j] + (p[j] - p[j - 1] - 0.03).max(0.06);
        p.push(next);
    }
    let mut w: Vec<usize> = p
        .iter()
        .map(|&pj| (pj * iters as f64 - 1e-9).ceil() as usize)
        .filter(|&w| w > 0 && w < iters)
        .collect();
    w.dedup();
    w
}

pub fn run_apgd<C: Classifier + ?Sized>(
    model: &C,
    sample: &ImageSample,
    epsilon: f64,
    iters: usize,
    kind: LossKind,
    start: &ApgdStart,
) -> Result<ApgdRun> {
    if iters == 0 {
        return Err(Error::config("apgd needs at least 1 iteration"));
    }
    let x0 = &sample.pixels;
    let (y, id) = (sample.label, sample.id);
    let start_point = match start {
        ApgdStart::Fgsm => fgsm_point(model, sample, epsilon)?,
        ApgdStart::Random { seed } => {
            let mut rng = seed::rng(*seed, &[id]);
            x0.iter()
                .map(|&v| project_coord(v as f64 + epsilon * rng.gen_range(-1.0..=1.0), v, epsilon))
                .collect()
        }
        ApgdStart::Warm(x) => project_linf(x, x0, epsilon)?,
    };
    let project = |v: &[f64]| -> Vec<f32> {
        v.iter()
            .zip(x0)
            .map(|(&vi, &o)| project_coord(vi, o, epsilon))
            .collect()
    };

    let mut best_success: Option<(f64, Vec<f32>)> = None;
    let mut note_success = |loss: f64, pred: usize, x: &[f32]| {
        if pred != y && best_success.as_ref().is_none_or(|(l, _)| loss > *l) {
            best_success = Some((loss, x.to_vec()));
        }
    };

    let (f0, g0, pred0) = evaluate(model, &start_point, y, kind, id)?;
    note_success(f0, pred0, &start_point);
    let mut best = start_point.clone();
    let mut best_loss = f0;
    let mut best_grad = g0.clone();
    let mut trace = vec![f0];

    let mut eta = 2.0 * epsilon;
    let mut x_prev = start_point.clone();
    let mut x_cur = start_point;
    let mut f_cur = f0;
    let mut g_cur = g0;

    let checkpoints = apgd_checkpoints(iters);
    let mut next_ckpt = 0usize;
    let mut last_ckpt_iter = 0usize;
    let mut increases = 0usize;
    let mut reduced_last = false;
    let mut best_at_last = best_loss;
    let mut halvings = 0;

    for step in 1..iters {
        let z: Vec<f64> = x_cur
            .iter()
            .zip(&g_cur)
            .map(|(&x, &g)| x as f64 + eta * sign(g))
            .collect();
        let z = project(&z);
        let x_next = if step == 1 {
            z
        } else {
            let v: Vec<f64> = (0..x_cur.len())
                .map(|i| {
                    let xc = x_cur[i] as f64;
                    xc + APGD_ALPHA * (z[i] as f64 - xc) + (1.0 - APGD_ALPHA) * (xc - x_prev[i] as f64)
                })
                .collect();
            project(&v)
        };
        let (f_next, g_next, pred) = evaluate(model, &x_next, y, kind, id)?;
        note_success(f_next, pred, &x_next);
        if f_next > f_cur {
            increases += 1;
        }
        if f_next > best_loss {
            best_loss = f_next;
            best = x_next.clone();
            best_grad = g_next.clone();
        }
        trace.push(best_loss);
        x_prev = std::mem::replace(&mut x_cur, x_next);
        f_cur = f_next;
        g_cur = g_next;

        if checkpoints.get(next_ckpt) == Some(&step) {
            let span = (step - last_ckpt_iter) as f64;
            let stalled = (increases as f64) < APGD_RHO * span;
            let flat = !reduced_last && best_loss <= best_at_last;
            reduced_last = stalled || flat;
            if reduced_last {
                eta /= 2.0;
                halvings += 1;
                x_cur = best.clone();
                x_prev = best.clone();
                f_cur = best_loss;
                g_cur = best_grad.clone();
            }
            increases = 0;
            best_at_last = best_loss;
            last_ckpt_iter = step;
            next_ckpt += 1;
        }
    }
    Ok(ApgdRun {
        best,
        best_loss,
        trace,
        best_success,
        iterations: iters,
        halvings,
    })
}

/// Momentum projected gradient ascent with step-size halving; returns the
/// best-loss iterate.
pub fn apgd<C: Classifier + ?Sized>(
    model: &C,
    sample: &ImageSample,
    epsilon: f64,
    iters: usize,
    kind: LossKind,
    start: &ApgdStart,
) -> Result<AdvExample> {
    if !(epsilon >= 0.0) {
        return Err(Error::config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let run = run_apgd(model, sample, epsilon, iters, kind, start)?;
    let mut ex = AdvExample::new(model, sample, run.best, &["apgd"])?;
    ex.stage = Some(stage_name(kind, 0).to_string());
    ex.iterations = run.iterations;
    ex.loss_trace = run.trace;
    Ok(ex)
}

fn stage_name(kind: LossKind, restart: usize) -> String {
    match (kind, restart) {
        (LossKind::Ce, 0) => "apgd-ce".into(),
        (LossKind::Ce, r) => format!("apgd-ce-restart{r}"),
        (LossKind::Dlr, _) => "apgd-dlr".into(),
    }
}

/// Reduced AutoAttack: the FGSM point, APGD-CE (FGSM-seeded, then seeded
/// random restarts), then APGD-DLR. Returns the first successful candidate,
/// otherwise the candidate with the highest cross-entropy.
pub fn autoattack_lite<C: Classifier + ?Sized>(
    model: &C,
    sample: &ImageSample,
    config: &AttackConfig,
) -> Result<AdvExample> {
    config.validate()?;
    if config.use_dlr && model.num_classes() < 3 {
        return Err(Error::config("the APGD-DLR stage needs at least 3 classes"));
    }
    let eps = config.epsilon;
    let (x, y) = (&sample.pixels, sample.label);
    let finish = |adv: Vec<f32>, stage: String, iterations: usize| -> Result<AdvExample> {
        let mut ex = AdvExample::new(model, sample, adv, &[AUTOATTACK])?;
        ex.stage = Some(stage);
        ex.iterations = iterations;
        Ok(ex)
    };

    let first = fgsm_point(model, sample, eps)?;
    if model.predict(&first)? != y {
        return finish(first, FGSM.into(), 0);
    }
    let mut candidates = vec![(loss_ce(&model.logits(&first)?, y)?, first, FGSM.to_string())];
    let mut iterations = 0;

    let mut stages: Vec<(LossKind, ApgdStart, String)> =
        vec![(LossKind::Ce, ApgdStart::Fgsm, stage_name(LossKind::Ce, 0))];
    for r in 1..=config.apgd_restarts {
        let seed = seed::derive(config.seed, &[r as u64]);
        stages.push((LossKind::Ce, ApgdStart::Random { seed }, stage_name(LossKind::Ce, r)));
    }
    if config.use_dlr {
        stages.push((LossKind::Dlr, ApgdStart::Fgsm, stage_name(LossKind::Dlr, 0)));
    }
    for (kind, start, name) in stages {
        let run = run_apgd(model, sample, eps, config.apgd_iters, kind, &start)?;
        iterations += run.iterations;
        if let Some((_, adv)) = run.best_success {
            return finish(adv, name, iterations);
        }
        let ce = loss_ce(&model.logits(&run.best)?, y)?;
        candidates.push((ce, run.best, name));
    }
    debug_assert!(candidates.iter().all(|(_, c, _)| c.len() == x.len()));
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.0 > candidates[best].0 {
            best = i;
        }
    }
    let (_, adv, name) = candidates.swap_remove(best);
    finish(adv, name, iterations)
}

/// FGSM, then DeepFool refinement projected back into the epsilon ball, then
/// APGD-CE warm-started from the refined point.
pub fn sequential_attack<C: Classifier + ?Sized>(
    model: &C,
    sample: &ImageSample,
    config: &AttackConfig,
) -> Result<AdvExample> {
    config.validate()?;
    let eps = config.epsilon;
    let x1 = fgsm_point(model, sample, eps)?;
    let refined = deepfool_from(
        model,
        &x1,
        sample.label,
        config.deepfool_max_iter,
        config.deepfool_overshoot,
    )?;
    let x2 = project_linf(&refined.adv, &sample.pixels, eps)?;
    let run = run_apgd(
        model,
        sample,
        eps,
        config.apgd_iters,
        LossKind::Ce,
        &ApgdStart::Warm(x2),
    )?;
    let adv = match run.best_success {
        Some((_, adv)) => adv,
        None => run.best,
    };
    let mut ex = AdvExample::new(model, sample, adv, &[FGSM, DEEPFOOL, AUTOATTACK])?;
    ex.iterations = refined.iterations + run.iterations;
    ex.loss_trace = run.trace;
    Ok(ex)
}

/// Pixel-wise weighted average of three adversarial images, clipped to `[0, 1]`.
pub fn fuse(a: &[f32], b: &[f32], c: &[f32], weights: [f64; 3]) -> Result<Vec<f32>> {
    check_weights(&weights)?;
    check_shape(b, a)?;
    check_shape(c, a)?;
    Ok((0..a.len())
        .map(|i| {
            let v = weights[0] * a[i] as f64 + weights[1] * b[i] as f64 + weights[2] * c[i] as f64;
            v.clamp(0.0, 1.0) as f32
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackVariant {
    Fgsm,
    Deepfool,
    Autoattack,
    Sequential,
    Fused,
}

impl AttackVariant {
    pub const ALL: [AttackVariant; 5] = [
        AttackVariant::Fgsm,
        AttackVariant::Deepfool,
        AttackVariant::Autoattack,
        AttackVariant::Sequential,
        AttackVariant::Fused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackVariant::Fgsm => "fgsm",
            AttackVariant::Deepfool => "deepfool",
            AttackVariant::Autoattack => "autoattack",
            AttackVariant::Sequential => "sequential",
            AttackVariant::Fused => "fused",
        }
    }
}

/// Every variant for one sample; the fused image reuses the three base attacks.
#[derive(Debug, Clone)]
pub struct VariantSet {
    pub fgsm: AdvExample,
    pub deepfool: AdvExample,
    pub autoattack: AdvExample,
    pub sequential: Option<AdvExample>,
    pub fused: AdvExample,
}

impl VariantSet {
    pub fn get(&self, v: AttackVariant) -> Option<&AdvExample> {
        match v {
            AttackVariant::Fgsm => Some(&self.fgsm),
            AttackVariant::Deepfool => Some(&self.deepfool),
            AttackVariant::Autoattack => Some(&self.autoattack),
            AttackVariant::Sequential => self.sequential.as_ref(),
            AttackVariant::Fused => Some(&self.fused),
        }
    }
}

pub fn fused_attack<C: Classifier + ?Sized>(
    model: &C,
    sample: &ImageSample,
    config: &AttackConfig,
) -> Result<AdvExample> {
    Ok(base_variants(model, sample, config, false)?.fused)
}

/// Run the base attacks and their fusion (plus the sequential chain when
/// `with_sequential`). A failing base attack falls back to the clean image so
/// the sample is never dropped.
pub fn base_variants<C: Classifier + ?Sized>(
    model: &C,
    sample: &ImageSample,
    config: &AttackConfig,
    with_sequential: bool,
) -> Result<VariantSet> {
    let or_clean = |r: Result<AdvExample>, name: &str| -> Result<AdvExample> {
        r.or_else(|e| {
            log::warn!("{name} failed on sample {}: {e}; using the clean image", sample.id);
            AdvExample::new(model, sample, sample.pixels.clone(), &[name])
        })
    };
    let f = or_clean(fgsm(model, sample, config.epsilon), FGSM)?;
    let d = or_clean(
        deepfool(model, sample, config.deepfool_max_iter, config.deepfool_overshoot),
        DEEPFOOL,
    )?;
    let a = or_clean(autoattack_lite(model, sample, config), AUTOATTACK)?;
    let fused = fuse(&f.adv_pixels, &d.adv_pixels, &a.adv_pixels, config.fuse_weights)?;
    let fused = AdvExample::new(model, sample, fused, &[FUSED])?;
    let sequential = if with_sequential {
        Some(or_clean(sequential_attack(model, sample, config), "sequential")?)
    } else {
        None
    };
    Ok(VariantSet {
        fgsm: f,
        deepfool: d,
        autoattack: a,
        sequential,
        fused,
    })
}

/// Attack every sample (in parallel), returning results in dataset order.
pub fn attack_dataset<C: Classifier + ?Sized>(
    model: &C,
    dataset: &LabeledDataset,
    config: &AttackConfig,
    with_sequential: bool,
) -> Result<Vec<VariantSet>> {
    config.validate()?;
    dataset
        .samples
        .par_iter()
        .map(|s| base_variants(model, s, config, with_sequential))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub count: usize,
    pub successes: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessSummary {
    pub rate: f64,
    pub total: usize,
    pub successes: usize,
    pub by_chain: BTreeMap<String, ChainStats>,
}

/// Fraction of examples the model misclassifies, re-evaluated with `model`,
/// broken down by attack chain.
pub fn attack_success_rate<C: Classifier + ?Sized>(model: &C, adv_set: &[AdvExample]) -> Result<SuccessSummary> {
    if adv_set.is_empty() {
        return Err(Error::input("attack success rate of an empty set"));
    }
    let hits: Vec<bool> = adv_set
        .par_iter()
        .map(|ex| Ok(model.predict(&ex.adv_pixels)? != ex.label))
        .collect::<Result<_>>()?;
    let mut by_chain: BTreeMap<String, ChainStats> = BTreeMap::new();
    for (ex, &hit) in adv_set.iter().zip(&hits) {
        let e = by_chain.entry(ex.chain_name()).or_insert(ChainStats {
            count: 0,
            successes: 0,
            rate: 0.0,
        });
        e.count += 1;
        e.successes += hit as usize;
    }
    for s in by_chain.values_mut() {
        s.rate = s.successes as f64 / s.count as f64;
    }
    let successes = hits.iter().filter(|h| **h).count();
    Ok(SuccessSummary {
        rate: successes as f64 / adv_set.len() as f64,
        total: adv_set.len(),
        successes,
        by_chain,
    })
}

/// Store adversarial examples as a tagged dataset (one record per example).
pub fn examples_to_dataset(
    examples: &[AdvExample],
    class_names: Vec<String>,
    shape: crate::data::ImageShape,
    source: DataSource,
    meta: serde_json::Value,
) -> Result<TaggedDataset> {
    let parts = examples
        .iter()
        .map(|ex| (ex.to_sample(shape), ex.chain.clone()))
        .collect();
    TaggedDataset::from_parts(parts, class_names, shape, source, meta)
}
