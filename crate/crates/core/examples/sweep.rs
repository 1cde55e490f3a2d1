//! Accuracy as MMTM modules are added, deepest layers first.

use mmtm::experiment::{sweep, write_sweep_csv, ExperimentConfig};

fn main() -> mmtm::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.task.train_size = 1000;
    cfg.training.max_epochs = 8;
    let data = cfg.dataset()?;
    let rows = sweep(&cfg, &data, 2, &[0, 1], |j, seed, record| {
        eprintln!("j={j} seed {seed}: {:.4}", record.test_accuracy);
    })?;
    write_sweep_csv(&rows, std::io::stdout())
}
