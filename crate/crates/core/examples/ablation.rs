//! Compare fusion variants over a few seeds and print the ablation CSV.

use mmtm::experiment::{ablate, write_ablation_csv, ExperimentConfig};
use mmtm::FusionKind;

fn main() -> mmtm::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.task.train_size = 1000;
    cfg.training.max_epochs = 8;
    let data = cfg.dataset()?;
    let variants = [FusionKind::LateFusion, FusionKind::Mmtm, FusionKind::SeLateFusion];
    let rows = ablate(&cfg, &data, &variants, &[0, 1, 2], |kind, seed, record| {
        eprintln!("{kind} seed {seed}: {:.4}", record.test_accuracy);
    })?;
    write_ablation_csv(&rows, std::io::stdout())
}
