//! Finite-difference check of every fusion variant on small two-stream networks.

use mmtm::gradcheck::{check_network, DEFAULT_EPS, DEFAULT_TOLERANCE};
use mmtm::params::seeded_rng;
use mmtm::streams::{build, FusionPlan, StreamSpec};
use mmtm::{Error, FusionKind, Tensor};

fn main() -> mmtm::Result<()> {
    let specs = vec![
        StreamSpec::with_widths("image", &[6, 6, 1], &[4, 8], &[]),
        StreamSpec::with_widths("depth", &[6, 6, 1], &[4, 8], &[]),
    ];
    let mut rng = seeded_rng(3);
    let x: Vec<Tensor> = specs
        .iter()
        .map(|s| Tensor::randn(s.input_shape.clone(), 1.0, &mut rng))
        .collect::<mmtm::Result<_>>()?;
    for kind in FusionKind::ALL {
        let net = match build(&specs, 3, &FusionPlan::suffix(kind, &specs, 2)?, 0) {
            Err(Error::UnalignedSpatial(e)) => {
                println!("{kind:>14}: skipped ({e})");
                continue;
            }
            other => other?,
        };
        let r = check_network(&net, &x, 1, 0.05, DEFAULT_EPS)?;
        println!(
            "{kind:>14}: {} params, max rel error {:.2e} at {} ({})",
            net.num_params(),
            r.max_rel_error,
            r.worst,
            if r.passes(DEFAULT_TOLERANCE) { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
