//! Generate a synthetic multimodal task and round-trip it through a file.

use mmtm::synth::{generate, CrossModalMode, Dataset, SyntheticTaskSpec};

fn main() -> mmtm::Result<()> {
    for mode in [CrossModalMode::Independent, CrossModalMode::Complementary, CrossModalMode::Xor] {
        let spec = SyntheticTaskSpec {
            mode,
            num_classes: if mode == CrossModalMode::Xor { 2 } else { 4 },
            train_size: 500,
            val_size: 100,
            test_size: 100,
            ..SyntheticTaskSpec::default()
        };
        let data = generate(&spec)?;
        let corrupted: Vec<usize> = (0..data.num_modalities())
            .map(|m| data.train.iter().filter(|s| s.corrupted[m]).count())
            .collect();
        let none = data.train.iter().filter(|s| s.corrupted.iter().all(|&c| c)).count();
        println!(
            "{mode:?}: corrupted per modality {corrupted:?} of {}, all corrupted {none}",
            data.train.len()
        );
    }

    let data = generate(&SyntheticTaskSpec::default())?;
    let path = std::env::temp_dir().join("mmtm-example.mmfz");
    data.save(&path)?;
    let back = Dataset::load(&path)?;
    println!(
        "{} bytes written to {}, reload identical: {}",
        std::fs::metadata(&path)?.len(),
        path.display(),
        back == data
    );
    Ok(())
}
