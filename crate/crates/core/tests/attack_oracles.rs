use armorbench_core::attacks::{self, ApgdStart, AttackConfig, AttackVariant};
use armorbench_core::data::{gen_synthetic, ImageSample, ImageShape, Normalization};
use armorbench_core::model::{self, loss_ce, Arch, Classifier, DualEncoderModel, LinearClassifier, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

/// Max CE over every vertex of the box `[x - eps, x + eps] ∩ [0, 1]`.
fn vertex_max(m: &LinearClassifier, x: &[f32], y: usize, eps: f64) -> f64 {
    let d = x.len();
    (0u32..1 << d)
        .map(|mask| {
            let v: Vec<f32> = (0..d)
                .map(|i| {
                    let s = if mask >> i & 1 == 1 { eps } else { -eps };
                    (x[i] as f64 + s).clamp(0.0, 1.0) as f32
                })
                .collect();
            loss_ce(&m.logits(&v).unwrap(), y).unwrap()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn linear_optimality_vertex_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let d = rng.gen_range(2..=10);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = LinearClassifier::binary(w, rng.gen_range(-0.5..0.5));
        let x: Vec<f32> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y = case % 2;
        let eps = 0.1;
        let s = flat(x.clone(), y);
        let best = vertex_max(&m, &x, y, eps);
        let f = attacks::fgsm(&m, &s, eps).unwrap();
        let lf = loss_ce(&m.logits(&f.adv_pixels).unwrap(), y).unwrap();
        assert!((best - lf).abs() < 1e-6, "fgsm case {case}: {lf} vs {best}");
        let a = attacks::apgd(&m, &s, eps, 20, LossKind::Ce, &ApgdStart::Random { seed: case as u64 }).unwrap();
        let la = loss_ce(&m.logits(&a.adv_pixels).unwrap(), y).unwrap();
        assert!((best - la).abs() < 1e-6, "apgd case {case}: {la} vs {best}");
    }
}

#[test]
fn deepfool_linear_closed_form() {
    let w = vec![0.3, -0.2, 0.5, 0.1];
    let b = -0.15;
    let m = LinearClassifier::binary(w.clone(), b);
    let x = vec![0.5f32, 0.4, 0.45, 0.6];
    let margin: f64 = b + w.iter().zip(&x).map(|(a, &v)| a * v as f64).sum::<f64>();
    let y = if margin > 0.0 { 1 } else { 0 };
    let norm2: f64 = w.iter().map(|v| v * v).sum();
    let eta = 0.02;
    let ex = attacks::deepfool(&m, &flat(x.clone(), y), 50, eta).unwrap();
    assert_eq!(ex.iterations, 1);
    for i in 0..4 {
        // Move along -sign(margin) * w by |margin| / ||w||^2, scaled by 1 + eta.
        let r = -margin / norm2 * w[i];
        let want = x[i] as f64 + (1.0 + eta) * r;
        assert!((ex.adv_pixels[i] as f64 - want).abs() < 1e-6, "coord {i}");
    }
    assert!(ex.success);
}

#[test]
fn deepfool_linear_multiclass_one_iteration() {
    let m = LinearClassifier::new(
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        vec![0.2, 0.0, 0.0],
        3,
    )
    .unwrap();
    let ex = attacks::deepfool(&m, &flat(vec![0.5, 0.45, 0.3], 0), 50, 0.02).unwrap();
    assert_eq!(ex.iterations, 1);
    assert!(ex.success);
}

fn tiny_model(seed: u64) -> DualEncoderModel {
    let arch = Arch {
        input: ImageShape::rgb(8, 8),
        hidden_dim: 16,
        embed_dim: 8,
        num_classes: 4,
    };
    let names = (0..4).map(|c| format!("c{c}")).collect();
    DualEncoderModel::init(arch, Normalization::default(), names, seed).unwrap()
}

#[test]
fn fgsm_moves_unclipped_coordinates_by_epsilon() {
    let m = tiny_model(5);
    let ds = gen_synthetic(5, 20, 4, 8, 8).unwrap();
    let eps = 8.0 / 255.0;
    let mut checked = 0;
    for s in &ds.samples {
        let g = model::grad_input(&m, &s.pixels, s.label, LossKind::Ce).unwrap();
        let ex = attacks::fgsm(&m, s, eps).unwrap();
        for i in 0..s.pixels.len() {
            let x = s.pixels[i] as f64;
            if g[i] == 0.0 || x - eps < 0.0 || x + eps > 1.0 {
                continue;
            }
            let moved = ex.adv_pixels[i] as f64 - x;
            // f32 storage of the result: one ulp near 1 is 6e-8.
            assert!((moved.abs() - eps).abs() < 1.2e-7, "{moved}");
            assert_eq!(moved.signum(), g[i].signum());
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn attack_invariants_over_200_samples() {
    let m = tiny_model(9);
    let ds = gen_synthetic(9, 200, 4, 8, 8).unwrap();
    let cfg = AttackConfig {
        apgd_iters: 10,
        ..Default::default()
    };
    let sets = attacks::attack_dataset(&m, &ds, &cfg, true).unwrap();
    for (s, v) in ds.samples.iter().zip(&sets) {
        for variant in AttackVariant::ALL {
            let ex = v.get(variant).unwrap();
            assert!(ex.adv_pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            let bounded = !matches!(variant, AttackVariant::Deepfool | AttackVariant::Fused);
            let (linf, _) = attacks::perturbation_norms(&s.pixels, &ex.adv_pixels);
            assert_eq!(linf, ex.linf_norm);
            if bounded {
                assert!(linf <= cfg.epsilon + 1e-6, "{}: {linf}", variant.name());
            }
        }
        // Dominance over FGSM, sample by sample.
        if v.fgsm.success {
            assert!(v.autoattack.success);
            assert!(v.sequential.as_ref().unwrap().success);
        }
    }
}

#[test]
fn apgd_trace_nondecreasing_and_deterministic() {
    let m = tiny_model(3);
    let ds = gen_synthetic(3, 8, 4, 8, 8).unwrap();
    for s in &ds.samples {
        let start = ApgdStart::Random { seed: 4 };
        let a = attacks::apgd(&m, s, 0.03, 25, LossKind::Dlr, &start).unwrap();
        assert!(a.loss_trace.windows(2).all(|w| w[1] >= w[0]));
        let b = attacks::apgd(&m, s, 0.03, 25, LossKind::Dlr, &start).unwrap();
        assert_eq!(a.adv_pixels, b.adv_pixels);
    }
}

#[test]
fn zero_epsilon_leaves_image() {
    let m = tiny_model(1);
    let s = &gen_synthetic(1, 4, 4, 8, 8).unwrap().samples[0];
    assert_eq!(attacks::fgsm(&m, s, 0.0).unwrap().adv_pixels, s.pixels);
    let cfg = AttackConfig {
        epsilon: 0.0,
        apgd_iters: 5,
        ..Default::default()
    };
    assert_eq!(attacks::autoattack_lite(&m, s, &cfg).unwrap().adv_pixels, s.pixels);
}
