use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::scalar;

fn small() -> DanConfig {
    DanConfig { base_channels: 4, num_resblocks: 2, disc_channels: 4, init_std: 0.02 }
}

fn random(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn zero_param(dan: &Dan, name: &str) {
    let v = dan.store.get(name).unwrap();
    v.set(&v.zeros_like().unwrap()).unwrap();
}

#[test]
fn reference_geometry_at_256() {
    let dan = Dan::new(&DanConfig::default(), DType::F32, 0).unwrap();
    let x = random(&[1, 3, 256, 256], 1, DType::F32);
    let stem = dan.g.stem().forward(&x).unwrap();
    assert_eq!(stem.f_e2.dims(), &[1, 128, 128, 128]);
    assert_eq!(stem.f_share.dims(), &[1, 256, 64, 64]);
    assert_eq!(fused_channels(&dan.config), 2304);
    assert_eq!(dan.d_t.forward(&x).unwrap().dims(), &[1, 1, 16, 16]);
}

#[test]
fn zero_attention_weights_give_half_mask() {
    let dan = Dan::new(&small(), DType::F32, 0).unwrap();
    zero_param(&dan, "gen_g.content.attention_fc.weight");
    zero_param(&dan, "gen_g.content.attention_fc.bias");
    let out = dan.g.content_encode(&random(&[2, 3, 16, 16], 3, DType::F32)).unwrap();
    assert_eq!(out.mask.dims(), &[2, 1, 4, 4]);
    assert!(values(&out.mask).iter().all(|&m| (m - 0.5).abs() < 1e-7));
}

#[test]
fn mask_matches_per_location_linear_oracle() {
    let dan = Dan::new(&small(), DType::F64, 4).unwrap();
    let out = dan.g.content_encode(&random(&[1, 3, 8, 8], 5, DType::F64)).unwrap();
    let w = values(&dan.store.get("gen_g.content.attention_fc.weight").unwrap().as_tensor().clone());
    let b = values(&dan.store.get("gen_g.content.attention_fc.bias").unwrap().as_tensor().clone())[0];
    let fused = values(&out.f_fused);
    let mask = values(&out.mask);
    let (c, hw) = (fused_channels(&dan.config), 4);
    for loc in 0..hw {
        let z: f64 = b + (0..c).map(|k| w[k] * fused[k * hw + loc]).sum::<f64>();
        let expected = 1.0 / (1.0 + (-z).exp());
        assert!((mask[loc] - expected).abs() < 1e-6, "location {loc}");
    }
}

#[test]
fn masks_lie_strictly_inside_unit_interval() {
    let dan = Dan::new(&small(), DType::F32, 6).unwrap();
    for seed in 0..4 {
        let x = (random(&[2, 3, 8, 8], seed, DType::F32) * 10.0).unwrap();
        let out = dan.f.content_encode(&x).unwrap();
        assert!(values(&out.mask).iter().all(|&m| m > 0.0 && m < 1.0));
    }
}

#[test]
fn generators_share_the_stem() {
    let dan = Dan::new(&small(), DType::F32, 0).unwrap();
    let x = random(&[1, 3, 8, 8], 7, DType::F32);
    let a = dan.g.stem().forward(&x).unwrap().f_share;
    let b = dan.f.stem().forward(&x).unwrap().f_share;
    assert_eq!(values(&a), values(&b));
    assert!(dan.store.names().iter().all(|n| !n.contains("gen_g.stem") && !n.contains("gen_f.stem")));
    // an in-place update is seen by both
    let w = dan.store.get("stem.block1.weight").unwrap();
    w.set(&(w.as_tensor() * 2.0).unwrap()).unwrap();
    let a2 = dan.g.stem().forward(&x).unwrap().f_share;
    let b2 = dan.f.stem().forward(&x).unwrap().f_share;
    assert_eq!(values(&a2), values(&b2));
    assert_ne!(values(&a), values(&a2));
}

#[test]
fn zeroed_residual_branch_is_identity() {
    let dan = Dan::new(&small(), DType::F32, 0).unwrap();
    for name in ["gen_g.content.res0.conv2.weight", "gen_g.content.res0.conv2.bias"] {
        zero_param(&dan, name);
    }
    let x = random(&[1, 3, 8, 8], 2, DType::F32);
    let stem = dan.g.stem().forward(&x).unwrap();
    let out = dan.g.content_encode(&x).unwrap();
    let first = out.f_fused.narrow(1, 0, 16).unwrap();
    assert_eq!(values(&first), values(&stem.f_share));
}

#[test]
fn translations_stay_in_tanh_range() {
    let dan = Dan::new(&DanConfig { init_std: 1.0, ..small() }, DType::F32, 1).unwrap();
    let y = dan.g.translate(&random(&[2, 3, 16, 16], 9, DType::F32)).unwrap();
    assert_eq!(y.dims(), &[2, 3, 16, 16]);
    assert!(values(&y).iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn decoder_uses_the_stem_skip() {
    let dan = Dan::new(&DanConfig { init_std: 0.3, ..small() }, DType::F64, 2).unwrap();
    let x = random(&[1, 3, 8, 8], 4, DType::F64);
    let (content, style) = dan.g.encode(&x).unwrap();
    let with = dan.g.decode(&content, &style).unwrap();
    let without = ContentOutput { f_e2: content.f_e2.zeros_like().unwrap(), ..content.clone() };
    let ablated = dan.g.decode(&without, &style).unwrap();
    let diff: f64 = values(&with).iter().zip(values(&ablated)).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn batching_matches_per_image_translation() {
    let dan = Dan::new(&small(), DType::F64, 3).unwrap();
    let x = random(&[3, 3, 8, 8], 8, DType::F64);
    let batched = values(&dan.g.translate(&x).unwrap());
    let looped: Vec<f64> = (0..3).flat_map(|i| values(&dan.g.translate(&x.narrow(0, i, 1).unwrap()).unwrap())).collect();
    for (a, b) in batched.iter().zip(&looped) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn rejects_bad_image_geometry() {
    let dan = Dan::new(&small(), DType::F32, 0).unwrap();
    assert!(dan.g.translate(&random(&[1, 3, 10, 8], 0, DType::F32)).is_err());
    assert!(dan.g.translate(&random(&[1, 1, 8, 8], 0, DType::F32)).is_err());
}

fn t(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

#[test]
fn gram_fixtures() {
    let g = gram(&t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2])).unwrap();
    assert_eq!(values(&g), vec![5.0, 11.0, 11.0, 25.0]);
    assert_eq!(values(&gram(&t(&[2.0], &[1, 1, 1, 1])).unwrap()), vec![4.0]);
}

#[test]
fn style_loss_fixtures() {
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2]);
    assert_eq!(scalar(&style_loss(&a, &a, &a, &a).unwrap()).unwrap(), 0.0);
    let z = a.zeros_like().unwrap();
    // ||[[5,11],[11,25]]||^2 / (1 * 2 * 1 * 2) = 892 / 4
    let l = scalar(&style_loss(&a, &z, &z, &z).unwrap()).unwrap();
    assert!((l - 223.0).abs() < 1e-9);
    assert!(style_loss(&a, &t(&[1.0], &[1, 1, 1, 1]), &a, &a).is_err());
}

#[test]
fn lsgan_fixtures() {
    let ones = t(&[1.0; 4], &[1, 1, 2, 2]);
    let zeros = ones.zeros_like().unwrap();
    let (g, d) = lsgan_from_scores(&ones, &ones).unwrap();
    assert_eq!((scalar(&g).unwrap(), scalar(&d).unwrap()), (0.0, 1.0));
    let (g, d) = lsgan_from_scores(&ones, &zeros).unwrap();
    assert_eq!((scalar(&g).unwrap(), scalar(&d).unwrap()), (1.0, 0.0));
    let half = t(&[0.5; 4], &[1, 1, 2, 2]);
    let (g, d) = lsgan_from_scores(&half, &half).unwrap();
    assert_eq!((scalar(&g).unwrap(), scalar(&d).unwrap()), (0.25, 0.5));
}

#[test]
fn adversarial_disc_term_does_not_reach_generator_output() {
    let dan = Dan::new(&small(), DType::F32, 0).unwrap();
    let real = random(&[1, 3, 16, 16], 1, DType::F32);
    let fake_var = candle_core::Var::from_tensor(&random(&[1, 3, 16, 16], 2, DType::F32)).unwrap();
    let losses = adversarial_losses(&dan.d_t, &real, fake_var.as_tensor()).unwrap();
    assert!(losses.disc.backward().unwrap().get(fake_var.as_tensor()).is_none());
    assert!(losses.gen.backward().unwrap().get(fake_var.as_tensor()).is_some());
}

#[test]
fn l1_fixtures() {
    let x = t(&[0.0, 1.0], &[1, 1, 1, 2]);
    let x_rec = t(&[0.5, 0.0], &[1, 1, 1, 2]);
    assert!((scalar(&cycle_loss(&x, &x_rec, &x, &x).unwrap()).unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(scalar(&cycle_loss(&x, &x, &x, &x).unwrap()).unwrap(), 0.0);
    assert!((scalar(&identity_loss_from(&x, &x, &x, &x_rec).unwrap()).unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn identity_loss_matches_explicit_translations() {
    let dan = Dan::new(&small(), DType::F64, 5).unwrap();
    let x = random(&[1, 3, 8, 8], 1, DType::F64);
    let y = random(&[1, 3, 8, 8], 2, DType::F64);
    let direct = scalar(&identity_loss(&dan.g, &dan.f, &x, &y).unwrap()).unwrap();
    let gy = values(&dan.g.translate(&y).unwrap());
    let fx = values(&dan.f.translate(&x).unwrap());
    let (xv, yv) = (values(&x), values(&y));
    let mean_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
    assert!((direct - (mean_abs(&gy, &yv) + mean_abs(&fx, &xv))).abs() < 1e-12);
}

#[test]
fn total_loss_fixtures() {
    let parts = DanLossParts { l_adv_g: 1.0, l_adv_f: 1.0, l_cyc: 1.0, l_id: 1.0, l_style: 1.0, ..Default::default() };
    let weights = LossWeights::default();
    assert_eq!(dan_total_loss(&parts, &weights).unwrap().total, 18.0);
    let unit = LossWeights { lambda_cyc: 1.0, lambda_id: 1.0, lambda_style: 1.0 };
    let parts = DanLossParts { l_adv_g: 2.0, l_adv_f: 3.0, l_cyc: 4.0, l_id: 5.0, l_style: 7.0, ..Default::default() };
    assert_eq!(dan_total_loss(&parts, &unit).unwrap().total, 21.0);
    let zero = dan_total_loss(&DanLossParts::default(), &weights).unwrap();
    assert_eq!(zero.total, 0.0);
    let bad = DanLossParts { l_cyc: f64::NAN, ..Default::default() };
    assert!(matches!(dan_total_loss(&bad, &weights), Err(crate::Error::NonFinite { term }) if term == "l_cyc"));
}

#[test]
fn generator_terms_decompose() {
    let dan = Dan::new(&small(), DType::F64, 9).unwrap();
    let x = random(&[2, 3, 16, 16], 1, DType::F64);
    let y = random(&[2, 3, 16, 16], 2, DType::F64);
    let w = LossWeights::default();
    let terms = dan.generator_terms(&x, &y, &w).unwrap();
    let report = dan_total_loss(&terms.parts().unwrap(), &w).unwrap();
    assert!((report.total - scalar(&terms.total).unwrap()).abs() < 1e-9);
    let grads = terms.total.backward().unwrap();
    for (name, var) in dan.store.trainable_with_prefix(&GENERATOR_PREFIXES) {
        assert!(grads.get(var.as_tensor()).is_some(), "{name} has no gradient");
    }
    let (ds, dt) = dan.discriminator_losses(&x, &y, &terms.fake_x, &terms.fake_y).unwrap();
    let dgrads = (ds + dt).unwrap().backward().unwrap();
    for (_, var) in dan.store.trainable_with_prefix(&GENERATOR_PREFIXES) {
        assert!(dgrads.get(var.as_tensor()).is_none());
    }
}

#[test]
fn gram_is_symmetric_psd() {
    let f = random(&[2, 5, 3, 3], 11, DType::F64);
    let g = gram(&f).unwrap();
    let gt = g.transpose(1, 2).unwrap();
    assert_eq!(values(&g), values(&gt));
    // v^T G v = ||F^T v||^2 >= 0 for random probes
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vt = Tensor::from_vec(v.clone(), (1, 5, 1), &Device::Cpu).unwrap().repeat((2, 1, 1)).unwrap();
        let q = vt.transpose(1, 2).unwrap().matmul(&g.matmul(&vt).unwrap()).unwrap();
        assert!(values(&q).iter().all(|&s| s >= -1e-9));
    }
    let _ = g.sum(D::Minus1);
}
