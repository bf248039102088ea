use place_autograd::Tensor;
use place_core::diffusion::{
    plms_loop, plms_sample, plms_timesteps, Conditioning, LossWeights, ModelConfig, NoiseSchedule, PlaceModel, SampleRequest, TrainConfig, Trainer,
    UNetConfig,
};
use place_core::synth_data::{gen_scene, SceneOptions};
use place_core::text_semantics::unconditional_prompt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny() -> ModelConfig {
    ModelConfig {
        unet: UNetConfig {
            image_size: 16,
            base_width: 8,
            channel_mult: vec![1, 2],
            attention_resolutions: vec![8],
            d_text: 8,
            time_dim: 16,
            alpha_embed_dim: 8,
            ..UNetConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn scenes(n: u64) -> Vec<(Tensor<f32>, place_core::semantic_map::SemanticMap)> {
    let opts = SceneOptions { size: 16, ..SceneOptions::default() };
    (0..n).map(|s| gen_scene(s, &opts).unwrap()).map(|s| (s.image.to_signed_tensor(), s.map)).collect()
}

#[test]
fn overfits_a_fixed_batch() {
    let data = scenes(16);
    let model = PlaceModel::<f32>::new(tiny(), 5).unwrap();
    let cfg = TrainConfig { batch_size: 16, lr: 3e-3, caption_dropout: 0.0, weights: LossWeights::new(0.0, 0.0), seed: 2, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, cfg, &data, &[]).unwrap();
    let (batch, free) = trainer.sample_batch();
    let first = trainer.train_step(&batch, &free).unwrap().losses.ldm;
    let mut last = first;
    for _ in 1..200 {
        last = trainer.train_step(&batch, &free).unwrap().losses.ldm;
    }
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

/// Textbook PLMS over plain vectors, written out step by step.
fn reference_plms(x: &[f64], steps: usize, eps: impl Fn(&[f64], usize) -> Vec<f64>) -> Vec<f64> {
    let betas: Vec<f64> = (0..1000).map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0).collect();
    let abar: Vec<f64> = betas
        .iter()
        .scan(1.0, |a, b| {
            *a *= 1.0 - b;
            Some(*a)
        })
        .collect();
    let c = 1000 / steps;
    let ts: Vec<usize> = (0..steps).map(|i| i * c + 1).collect();
    let step = |x: &[f64], e: &[f64], i: usize| -> Vec<f64> {
        let a_t = abar[ts[i]];
        let a_prev = if i == 0 { abar[0] } else { abar[ts[i - 1]] };
        x.iter()
            .zip(e)
            .map(|(&x, &e)| {
                let x0 = (x - (1.0 - a_t).sqrt() * e) / a_t.sqrt();
                a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * e
            })
            .collect()
    };
    let mut x = x.to_vec();
    let mut old: Vec<Vec<f64>> = Vec::new();
    for i in (0..steps).rev() {
        let e = eps(&x, ts[i]);
        let e_prime: Vec<f64> = match old.len() {
            0 => {
                let tmp = step(&x, &e, i);
                let e2 = eps(&tmp, ts[i.saturating_sub(1)]);
                e.iter().zip(&e2).map(|(a, b)| (a + b) / 2.0).collect()
            }
            1 => (0..x.len()).map(|k| (3.0 * e[k] - old[0][k]) / 2.0).collect(),
            2 => (0..x.len()).map(|k| (23.0 * e[k] - 16.0 * old[1][k] + 5.0 * old[0][k]) / 12.0).collect(),
            _ => (0..x.len()).map(|k| (55.0 * e[k] - 59.0 * old[2][k] + 37.0 * old[1][k] - 9.0 * old[0][k]) / 24.0).collect(),
        };
        x = step(&x, &e_prime, i);
        old.push(e);
        if old.len() > 3 {
            old.remove(0);
        }
    }
    x
}

#[test]
fn plms_matches_hand_rolled_reference() {
    let eps = |x: &[f64], t: usize| x.iter().enumerate().map(|(k, v)| 0.3 * v + (t as f64 / 1000.0) * (k as f64 + 1.0).sin()).collect::<Vec<_>>();
    let x0 = vec![0.7, -1.2, 0.1, 2.0];
    for steps in [1, 2, 3, 4, 5, 10] {
        let want = reference_plms(&x0, steps, eps);
        let got = plms_loop(
            &NoiseSchedule::default(),
            steps,
            false,
            Tensor::<f64>::from_f64(&[4], &x0).unwrap(),
            |x, t| Ok(Tensor::from_f64(&[4], &eps(x.data(), t)).unwrap()),
            |_| {},
        )
        .unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "steps {steps}: {g} vs {w}");
        }
    }
    assert_eq!(plms_timesteps(1000, 4).unwrap(), vec![1, 251, 501, 751]);
}

#[test]
fn unit_guidance_is_the_conditional_prediction() {
    let model = PlaceModel::<f64>::new(tiny(), 9).unwrap();
    let (_, map) = &scenes(3)[2];
    let req = SampleRequest { map: Some(map), steps: 4, guidance: 1.0, seed: 17, ..SampleRequest::default() };
    let guided = plms_sample(&model, &req).unwrap();

    let (prompt, lcms) = model.layout_for(map, &[]).unwrap();
    let cond = model.conditioning(Some(&lcms));
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let init: Vec<f64> = (0..3 * 16 * 16).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x =
        plms_loop(model.schedule(), 4, true, Tensor::from_f64(&[3, 16, 16], &init).unwrap(), |x, t| model.predict_eps(x, t, &prompt, &cond), |_| {})
            .unwrap();
    let unit: Vec<f64> = x.data().iter().map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0).collect();
    assert_eq!(guided.image.data(), &unit[..]);
}

#[test]
fn zero_guidance_ignores_the_layout() {
    let model = PlaceModel::<f64>::new(tiny(), 9).unwrap();
    let data = scenes(2);
    let sample = |map| plms_sample(&model, &SampleRequest { map: Some(map), steps: 3, guidance: 0.0, seed: 4, ..SampleRequest::default() }).unwrap();
    assert_eq!(sample(&data[0].1).image, sample(&data[1].1).image);
    let null = unconditional_prompt().0;
    let z = Tensor::zeros(&[3, 16, 16]);
    assert!(model.predict_eps(&z, 5, &null, &Conditioning::Free).unwrap().data().iter().all(|v| v.is_finite()));
}

#[test]
fn training_and_sampling_are_reproducible() {
    let data = scenes(8);
    let run = || {
        let model = PlaceModel::<f32>::new(tiny(), 1).unwrap();
        let cfg = TrainConfig { steps: 5, batch_size: 2, lr: 1e-3, weights: LossWeights::new(1.0, 0.0), seed: 3, ..TrainConfig::default() };
        let mut t = Trainer::new(model, cfg, &data, &[]).unwrap();
        t.run(|_| {}).unwrap();
        let m = t.into_model();
        let s = plms_sample(&m, &SampleRequest { map: Some(&data[0].1), steps: 3, seed: 8, ..SampleRequest::default() }).unwrap();
        (m.params().iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(), s.image)
    };
    assert_eq!(run(), run());
}
