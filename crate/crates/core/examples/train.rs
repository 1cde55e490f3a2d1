//! Train an MMTM network on a small version of the default task and
//! evaluate a reloaded checkpoint.

use mmtm::experiment::{run, ExperimentConfig};
use mmtm::train::{evaluate, load_checkpoint, save_checkpoint};
use mmtm::FusionKind;

fn main() -> mmtm::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.task.train_size = 1000;
    cfg.training.max_epochs = 10;
    let data = cfg.dataset()?;

    let out = run(&cfg, &data, FusionKind::Mmtm, 0)?;
    for e in &out.record.epochs {
        println!(
            "epoch {:>2} lr {:.0e} train {:.4}/{:.3} val {:.4}/{:.3}",
            e.epoch, e.lr, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        );
    }
    println!(
        "best epoch {}, test accuracy {:.4}",
        out.record.best_epoch, out.record.test_accuracy
    );

    let path = std::env::temp_dir().join("mmtm-example.mmck");
    save_checkpoint(&out.net.store, &out.record.config, &path)?;
    let mut fresh = cfg.build(&cfg.plan(FusionKind::Mmtm)?, 123)?;
    load_checkpoint(&path, &mut fresh.store)?;
    let m = evaluate(&fresh, &data.test)?;
    println!("reloaded checkpoint test accuracy {:.4}", m.accuracy);
    Ok(())
}
