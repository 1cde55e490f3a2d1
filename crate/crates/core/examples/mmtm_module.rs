//! A standalone MMTM over an image-like feature map and a vector feature.

use mmtm::params::seeded_rng;
use mmtm::{Mmtm, MmtmConfig, MmtmInit, Tensor};

fn main() -> mmtm::Result<()> {
    let mut rng = seeded_rng(0);
    let image = Tensor::randn(vec![7, 7, 16], 1.0, &mut rng)?;
    let vector = Tensor::randn(vec![8], 1.0, &mut rng)?;
    let inputs = vec![image, vector];

    let config = MmtmConfig::new(vec![16, 8])?;
    println!("bottleneck C_Z = {}", config.bottleneck);

    let identity = Mmtm::new(config.clone(), MmtmInit::ZeroHeads, 0)?;
    let out = identity.forward(&inputs)?;
    println!("zero-head module is the identity: {}", out == inputs);

    let m = Mmtm::new(config, MmtmInit::FullyRandom, 1)?;
    println!("parameters: {}", m.param_count());
    let out = m.forward(&inputs)?;
    for (name, (x, y)) in ["image", "vector"].iter().zip(inputs.iter().zip(&out)) {
        let c = x.channels();
        let gates: Vec<String> = (0..c.min(4))
            .map(|ch| format!("{:.3}", y.data()[ch] / x.data()[ch]))
            .collect();
        println!("{name} {:?}: first gates {}", y.shape(), gates.join(" "));
    }
    Ok(())
}
