//! Parameter and multiply-accumulate counts per component.

use mmtm::costs;
use mmtm::streams::{build, FusionPlan, StreamSpec};
use mmtm::FusionKind;

fn main() -> mmtm::Result<()> {
    let specs = vec![
        StreamSpec::default_for("rgb", &[12, 12, 1]),
        StreamSpec::default_for("depth", &[12, 12, 1]),
    ];
    for kind in [FusionKind::LateFusion, FusionKind::Mmtm, FusionKind::ConvMmtm] {
        let net = build(&specs, 4, &FusionPlan::suffix(kind, &specs, 2)?, 0)?;
        let report = costs::report(&net)?;
        println!("== {kind}");
        print!("{}", report.filtered("fuse").to_csv());
        println!("network: {} params, {} MACs\n", report.params(), report.macs());
    }
    Ok(())
}
