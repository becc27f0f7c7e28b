//! Manual overfit probe for sizing the desk config (run with --ignored).

use fargan_core::config::TrainConfig;
use fargan_core::dataset::DatasetManifest;
use fargan_core::trainer::Trainer;

#[test]
#[ignore]
fn overfit_probe() {
    let cfg = TrainConfig {
        image_size: 64,
        base_channels: 8,
        batch_size: 4,
        seed: 17,
        lr0: 1e-3,
        total_epochs: 100,
        train_steps: 200,
        ..TrainConfig::default()
    };
    let manifest = DatasetManifest::synthetic(17, 4, 8).unwrap();
    let mut t = Trainer::for_dataset(cfg, &manifest).unwrap();
    let start = std::time::Instant::now();
    let mut l1 = Vec::new();
    for step in 0..200u64 {
        let batch = t.sample_step_batch(&manifest, step).unwrap();
        let r = t.train_step(&batch).unwrap();
        l1.push(r.l1);
        if (step + 1) % 20 == 0 {
            println!(
                "step {:3}: l1 {:.4} adv_g {:.4} total_d {:.4} ({:.1}s)",
                step + 1,
                r.l1,
                r.adv_g,
                r.total_d,
                start.elapsed().as_secs_f64()
            );
        }
    }
    let head: f64 = l1[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = l1[190..].iter().sum::<f64>() / 10.0;
    println!(
        "mean L1 steps 1-10: {head:.4}; steps 191-200: {tail:.4}; ratio {:.3}",
        tail / head
    );
}
