// Scratch timing probe; not part of the library surface.
use std::time::Instant;

use ssda_core::data::{generate_domains, split_target, BatchCounts, BatchSampler, GapParams};
use ssda_core::losses::batch_to_tensor;
use ssda_core::losses::{total_loss, LossConfig, Setting};
use ssda_core::model::{forward_parts, Mode, ModelPair, TinySegConfig};
use ssda_core::rng::derive_rng;
use ssda_core::tensor::{clip_grad_total_norm, sgd_nesterov_step};

fn main() {
    let mcfg = TinySegConfig::default();
    let gap = GapParams::default();
    let (source, pool) = generate_domains(7, 40, 40, 32, 5, &gap).unwrap();
    let (labeled, unlabeled) = split_target(&pool, 8, 7).unwrap();
    let mut pair = ModelPair::<f32>::new(mcfg.clone(), 7).unwrap();
    let counts = BatchCounts::default();
    let mut sampler = BatchSampler::new(7, source.len(), labeled.len(), unlabeled.len());
    let mut rng = derive_rng(7, "probe");
    let lcfg = LossConfig::for_classes(5);
    let acfg = ssda_core::augment::AugConfig::default();

    // forward only, batch of 4
    let imgs: Vec<&[f32]> = source.items[..4]
        .iter()
        .map(|s| s.image.as_slice())
        .collect();
    let x = batch_to_tensor::<f32>(&imgs, 32).unwrap();
    let t0 = Instant::now();
    for _ in 0..5 {
        let p = forward_parts(&pair.student, &mcfg, &x, Mode::Train, false).unwrap();
        std::hint::black_box(p.logits.shape().len());
    }
    println!(
        "fwd(train,b4)      {:>7.2} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / 5.0
    );

    let t0 = Instant::now();
    for _ in 0..5 {
        let p = forward_parts(&pair.student, &mcfg, &x, Mode::Eval, false).unwrap();
        std::hint::black_box(p.logits.shape().len());
    }
    println!(
        "fwd(eval,b4)       {:>7.2} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / 5.0
    );

    // forward + backward through mean of logits
    let t0 = Instant::now();
    for _ in 0..5 {
        let p = forward_parts(&pair.student, &mcfg, &x, Mode::Train, false).unwrap();
        let l = ssda_core::tensor::mean(&p.logits);
        l.backward().unwrap();
        pair.student.zero_grads();
    }
    println!(
        "fwd+bwd(b4)        {:>7.2} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / 5.0
    );

    // one full training step, all terms on
    let t0 = Instant::now();
    for step in 0..5 {
        let batch = sampler
            .next_batch(Some(&source), Some(&labeled), Some(&unlabeled), &counts)
            .unwrap();
        let (total, _parts) = total_loss(
            step + 2000,
            Setting::Ssda,
            &batch,
            &pair,
            &lcfg,
            &acfg,
            true,
            &mut rng,
        )
        .unwrap();
        pair.student.zero_grads();
        total.backward().unwrap();
        clip_grad_total_norm(&mut pair.student, 10.0);
        sgd_nesterov_step(&mut pair.student, 1e-3, 0.9, 5e-4);
        pair.ema_update().unwrap();
    }
    println!(
        "full step          {:>7.2} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / 5.0
    );
}
