use std::time::Instant;
use ccella::adapters::Mode;
use ccella::dataset::{write_dataset, DatasetConfig};
use ccella::model::{GeneratorModel, ModelConfig};
use ccella::phantom::PhantomConfig;
use ccella::train::{train, TrainConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let ds_cfg = DatasetConfig { count: 64, seed: 7, ..DatasetConfig::default() };
    let ds = write_dataset(dir.path(), &ds_cfg).unwrap();

    for mode in [Mode::Ccella, Mode::Maisi] {
        let cfg = ModelConfig::new(mode, 7);
        let mut model = GeneratorModel::build(cfg, PhantomConfig::default()).unwrap();
        let tcfg = TrainConfig { steps: 10, batch_size: 16, seed: 7, ..TrainConfig::default() };
        let t0 = Instant::now();
        train(&mut model, &ds, &tcfg, None, false).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("{mode}: {:.3}s/train-step  (3000 steps ≈ {:.1} min)", dt / 10.0, dt / 10.0 * 3000.0 / 60.0);

        // sampling benchmark: 8 images, full 1000-step trajectory
        let s = ccella::phantom::generate_phantom(&PhantomConfig::default(), 1, 1.0);
        let src = model.cond_source(s.report.as_deref(), Some(s.label), s.spacing).unwrap();
        let sources: Vec<_> = (0..8).map(|_| src.clone()).collect();
        let t0 = Instant::now();
        let _ = model.generate(&sources, 3, 64).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("{mode}: {:.2}s per 8 samples  (256 ≈ {:.1} min)", dt, dt * 32.0 / 60.0);
    }
}
