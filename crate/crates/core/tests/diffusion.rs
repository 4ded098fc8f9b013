use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stllm_df::diffusion::train::{train_denoiser, DenoiserTrainOptions};
use stllm_df::diffusion::*;
use stllm_df::optim::AdamConfig;
use stllm_df::params::ParamStore;
use stllm_df::rng::{derive_seed, rng_for, standard_normal};
use stllm_df::{Result, Tensor};

fn standard_schedule() -> DiffusionSchedule {
    DiffusionSchedule::linear(1e-4, 0.02, 1000).unwrap()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[test]
fn closed_form_and_iterated_marginals_match_theory() {
    let sched = standard_schedule();
    let s = sched.steps();
    let ab = sched.alpha_bar(s);
    let (want_m, want_v) = (ab.sqrt(), 1.0 - ab);
    let n = 100_000;
    let x0 = Tensor::<f64>::ones(&[n]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = standard_normal(&mut rng, &[n]);
    let closed = forward_noise(&x0, s, &sched, &eps).unwrap();
    let (m, v) = mean_var(closed.data());
    // √ᾱ_S is small, so compare the mean on the scale of the spread
    assert!((m - want_m).abs() < 0.01 * want_m.max(want_v.sqrt()), "{m} vs {want_m}");
    assert!((v - want_v).abs() < 0.01 * want_v, "{v} vs {want_v}");

    let noises: Vec<Tensor<f64>> = (0..s).map(|_| standard_normal(&mut rng, &[n])).collect();
    let iter = forward_noise_iterated(&x0, &sched, &noises).unwrap();
    let (m, v) = mean_var(iter.data());
    assert!((m - want_m).abs() < 0.01 * want_m.max(want_v.sqrt()), "{m} vs {want_m}");
    assert!((v - want_v).abs() < 0.01 * want_v, "{v} vs {want_v}");
}

#[test]
fn forward_noise_degenerate_schedules() {
    let x0 = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
    let eps = Tensor::from_f64(&[3], &[0.3, 0.1, -0.7]).unwrap();
    let still = DiffusionSchedule::from_betas(vec![0.0; 5]).unwrap();
    assert!(forward_noise(&x0, 5, &still, &eps).unwrap().bit_eq(&x0));
    let heavy = DiffusionSchedule::from_betas(vec![0.999_999; 8]).unwrap();
    assert!(forward_noise(&x0, 8, &heavy, &eps).unwrap().max_abs_diff(&eps) < 1e-12);
    assert!(forward_noise(&x0, 0, &heavy, &eps).is_err());
    assert!(forward_noise(&x0, 9, &heavy, &eps).is_err());
}

#[test]
fn loss_is_zero_for_oracle_and_about_one_for_zero_predictor() {
    let sched = standard_schedule();
    let batch: Vec<(Tensor<f64>, u64)> = (0..64)
        .map(|i| {
            let mut rng = rng_for(7, i);
            (standard_normal(&mut rng, &[6, 2, 1]), derive_seed(9, i))
        })
        .collect();

    // An oracle that inverts the closed-form noising using the known x0.
    let oracle = |x_s: &Tensor<f64>, step: usize| -> Result<Tensor<f64>> {
        let (x0, _) = batch
            .iter()
            .find(|(x0, seed)| draw_noised(x0, &sched, *seed).unwrap().noised.bit_eq(x_s))
            .expect("known sample");
        let ab = sched.alpha_bar(step);
        Ok(Tensor::from_fn(x_s.shape(), |i| {
            (x_s.data()[i] - ab.sqrt() * x0.data()[i]) / (1.0 - ab).sqrt()
        }))
    };
    let l = ddpm_loss_seeded(&batch, &oracle, &sched).unwrap();
    assert!(l < 1e-20, "{l}");

    let zero = |x: &Tensor<f64>, _: usize| -> Result<Tensor<f64>> { Ok(Tensor::zeros(x.shape())) };
    let l0 = ddpm_loss_seeded(&batch, &zero, &sched).unwrap();
    // mean of 768 squared standard normals: sd ≈ √(2/768) ≈ 0.05
    assert!((l0 - 1.0).abs() < 0.2, "{l0}");

    let mut doubled = batch.clone();
    doubled.extend(batch.iter().cloned());
    let l2 = ddpm_loss_seeded(&doubled, &zero, &sched).unwrap();
    assert!((l2 - l0).abs() < 1e-12);
    assert!(l0 >= 0.0);
}

#[test]
fn single_step_ddim_inverts_exactly() {
    let sched = DiffusionSchedule::linear(1e-4, 0.02, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = standard_normal::<f64>(&mut rng, &[4, 3, 2]);
    let eps = standard_normal::<f64>(&mut rng, &[4, 3, 2]);
    let x1 = forward_noise(&x0, 1, &sched, &eps).unwrap();
    let oracle = |_: &Tensor<f64>, _: usize| -> Result<Tensor<f64>> { Ok(eps.clone()) };
    let cfg = ReverseSamplerConfig {
        mode: SamplerMode::Ddim,
        ..Default::default()
    };
    let out = reverse_step(&x1, 1, 0, &oracle, &sched, &cfg, &mut rng).unwrap();
    assert!(out.max_abs_diff(&x0) < 1e-10, "{}", out.max_abs_diff(&x0));
}

#[test]
fn zero_noise_standard_step_divides_by_sqrt_alpha() {
    // σ_1 = 0 because ᾱ_0 = 1
    let sched = standard_schedule();
    assert_eq!(sched.posterior_std(1), 0.0);
    let x = Tensor::<f64>::from_f64(&[3], &[1.0, -0.5, 2.0]).unwrap();
    let zero = |x: &Tensor<f64>, _: usize| -> Result<Tensor<f64>> { Ok(Tensor::zeros(x.shape())) };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = reverse_step(&x, 1, 0, &zero, &sched, &ReverseSamplerConfig::default(), &mut rng).unwrap();
    let a = sched.alpha(1).sqrt();
    for (o, v) in out.data().iter().zip(x.data()) {
        assert!((o - v / a).abs() < 1e-15);
    }
}

#[test]
fn literal_mode_uses_squared_alpha_denominator() {
    let sched = standard_schedule();
    let s = 10;
    let x = Tensor::<f64>::from_f64(&[2], &[0.4, -1.2]).unwrap();
    let e = Tensor::<f64>::from_f64(&[2], &[0.5, 0.25]).unwrap();
    let model = |_: &Tensor<f64>, _: usize| -> Result<Tensor<f64>> { Ok(e.clone()) };
    let cfg = ReverseSamplerConfig {
        mode: SamplerMode::Literal,
        delta: Some(0.0),
        ..Default::default()
    };
    let out = reverse_step(&x, s, s - 1, &model, &sched, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let a = sched.alpha(s);
    for i in 0..2 {
        let want = (x.data()[i] - (1.0 - a) / (1.0 - a * a).sqrt() * e.data()[i]) / a.sqrt();
        assert!((out.data()[i] - want).abs() < 1e-14);
    }
    assert!("bogus".parse::<SamplerMode>().is_err());
}

#[test]
fn ddim_without_noise_is_bit_deterministic() {
    let sched = standard_schedule();
    let mut store = ParamStore::<f64>::new();
    let net = NoisePredictor::new(NoisePredictorConfig::new(1), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let model = BoundPredictor { net: &net, store: &store };
    let cfg = ReverseSamplerConfig {
        mode: SamplerMode::Ddim,
        ddim_steps: Some(20),
        seed: 4,
        ..Default::default()
    };
    let x = standard_normal::<f64>(&mut ChaCha8Rng::seed_from_u64(5), &[6, 2, 1]);
    let a = sample_chain(&x, &model, &sched, &cfg, 0).unwrap();
    let b = sample_chain(&x, &model, &sched, &cfg, 0).unwrap();
    assert!(a.bit_eq(&b));
    assert_eq!(cfg.timesteps(&sched).unwrap().len(), 20);
}

#[test]
fn recovery_keeps_observed_entries_exactly() {
    let sched = standard_schedule();
    let mut store = ParamStore::<f64>::new();
    let net = NoisePredictor::new(NoisePredictorConfig::new(2), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let model = BoundPredictor { net: &net, store: &store };
    let cfg = ReverseSamplerConfig {
        mode: SamplerMode::Ddim,
        ddim_steps: Some(10),
        ..Default::default()
    };
    let x = standard_normal::<f64>(&mut ChaCha8Rng::seed_from_u64(2), &[5, 3, 2]);
    let all = vec![true; x.len()];
    let r = recover_missing(&x, &all, &model, &sched, &cfg, 0).unwrap();
    assert!(r.values.bit_eq(&x) && !r.unconditional);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask: Vec<bool> = (0..x.len()).map(|_| rng.random::<f64>() > 0.3).collect();
    let r = recover_missing(&x, &mask, &model, &sched, &cfg, 1).unwrap();
    for i in 0..x.len() {
        if mask[i] {
            assert_eq!(r.values.data()[i].to_bits(), x.data()[i].to_bits());
        }
    }
    assert!(r.values.is_finite());

    let none = vec![false; x.len()];
    let r = recover_missing(&x, &none, &model, &sched, &cfg, 2).unwrap();
    assert!(r.unconditional);
}

fn bimodal_batch(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[1, n, 1], |_| {
        let centre = if rng.random::<bool>() { 1.0 } else { -1.0 };
        centre + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal)
    })
}

#[test]
fn denoiser_learns_a_bimodal_toy_distribution() {
    let sched = standard_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<Tensor<f64>> = (0..256).map(|_| bimodal_batch(&mut rng, 16)).collect();
    let mut store = ParamStore::<f64>::new();
    let cfg = NoisePredictorConfig {
        hidden: 64,
        ..NoisePredictorConfig::new(1)
    };
    let net = NoisePredictor::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let opts = DenoiserTrainOptions {
        steps: 2000,
        batch_size: 8,
        adam: AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        seed: 12,
    };
    train_denoiser(&net, &mut store, &data, &sched, &opts).unwrap();

    let eval: Vec<(Tensor<f64>, u64)> = (0..64)
        .map(|i| (bimodal_batch(&mut rng, 16), derive_seed(99, i)))
        .collect();
    let zero = |x: &Tensor<f64>, _: usize| -> Result<Tensor<f64>> { Ok(Tensor::zeros(x.shape())) };
    let model = BoundPredictor { net: &net, store: &store };
    let trained = ddpm_loss_seeded(&eval, &model, &sched).unwrap();
    let baseline = ddpm_loss_seeded(&eval, &zero, &sched).unwrap();
    assert!(trained <= 0.5 * baseline, "trained {trained} vs zero {baseline}");

    let cfg = ReverseSamplerConfig {
        mode: SamplerMode::Ddim,
        ..Default::default()
    };
    let samples = sample_unconditional::<f64, _>(&[1, 2000, 1], &model, &sched, &cfg, 0).unwrap();
    let (pos, neg): (Vec<f64>, Vec<f64>) = samples.data().iter().partition(|&&v| v > 0.0);
    let frac = pos.len() as f64 / samples.len() as f64;
    assert!((0.3..0.7).contains(&frac), "positive fraction {frac}");
    let mp = pos.iter().sum::<f64>() / pos.len() as f64;
    let mn = neg.iter().sum::<f64>() / neg.len() as f64;
    assert!((mp - 1.0).abs() < 0.1 && (mn + 1.0).abs() < 0.1, "means {mp} {mn}");
}

#[test]
fn denoiser_training_is_reproducible() {
    let sched = standard_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data: Vec<Tensor<f32>> = (0..16).map(|_| standard_normal(&mut rng, &[4, 2, 1])).collect();
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let net = NoisePredictor::new(NoisePredictorConfig::new(1), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let opts = DenoiserTrainOptions {
            steps: 20,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 2,
        };
        let curve = train_denoiser(&net, &mut store, &data, &sched, &opts).unwrap();
        (store, curve)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert!(a.bit_eq(&b));
    assert_eq!(ca, cb);

    let mut store = ParamStore::<f32>::new();
    let net = NoisePredictor::new(NoisePredictorConfig::new(1), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = store.clone();
    let opts = DenoiserTrainOptions {
        steps: 0,
        batch_size: 4,
        adam: AdamConfig::default(),
        seed: 2,
    };
    assert!(train_denoiser(&net, &mut store, &data, &sched, &opts).unwrap().is_empty());
    assert!(store.bit_eq(&before));
}
