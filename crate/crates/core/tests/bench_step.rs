//! Manual timing probe for the desk-scale training step (run with --ignored).

use fargan_core::config::TrainConfig;
use fargan_core::dataset::DatasetManifest;
use fargan_core::trainer::Trainer;

#[test]
#[ignore]
fn time_desk_step() {
    for base in [8usize, 16, 32] {
        let cfg = TrainConfig {
            image_size: 64,
            base_channels: base,
            batch_size: 4,
            seed: 17,
            lr0: 1e-3,
            ..TrainConfig::default()
        };
        let manifest = DatasetManifest::synthetic(17, 4, 8).unwrap();
        let mut t = Trainer::for_dataset(cfg, &manifest).unwrap();
        let batch = t.sample_step_batch(&manifest, 0).unwrap();
        t.train_step(&batch).unwrap(); // warm-up
        let start = std::time::Instant::now();
        let n = 3;
        for step in 1..=n {
            let batch = t.sample_step_batch(&manifest, step).unwrap();
            t.train_step(&batch).unwrap();
        }
        println!(
            "base {base}: {:.2} s/step",
            start.elapsed().as_secs_f64() / n as f64
        );
    }
}
