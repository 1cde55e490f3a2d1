//! Exact parameter and multiply-accumulate counts.
//!
//! A MAC is one multiply-add. Convolutions count every kernel tap at every
//! output position, padded taps included. A fully connected layer counts
//! `in * out`. Gating counts one multiply per gated element, and a squeeze
//! one accumulate per input element. Biases, ReLUs, pooling and the softmax
//! are free.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::mmtm::MmtmConfig;
use crate::params::Linear;
use crate::streams::{BlockSpec, FusionModule, FusionNetwork};
use crate::zoo::SeState;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

impl CostRow {
    pub fn new(name: impl Into<String>, params: u64, macs: u64) -> Self {
        Self {
            name: name.into(),
            params,
            macs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// Rows whose name starts with `prefix`.
    pub fn filtered(&self, prefix: &str) -> CostReport {
        CostReport {
            rows: self
                .rows
                .iter()
                .filter(|r| r.name.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    /// `component,params,macs` with a final `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,params,macs\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.params, r.macs);
        }
        let _ = writeln!(s, "total,{},{}", self.params(), self.macs());
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["component", "params", "macs"])?;
        for r in &self.rows {
            w.write_record([r.name.clone(), r.params.to_string(), r.macs.to_string()])?;
        }
        w.write_record(["total".to_string(), self.params().to_string(), self.macs().to_string()])?;
        w.flush()?;
        Ok(())
    }
}

pub fn linear_params(in_dim: usize, out_dim: usize) -> u64 {
    (in_dim * out_dim + out_dim) as u64
}

pub fn linear_macs(in_dim: usize, out_dim: usize) -> u64 {
    (in_dim * out_dim) as u64
}

pub fn conv_params(kernel: usize, cin: usize, cout: usize) -> u64 {
    (kernel * kernel * cin * cout + cout) as u64
}

/// Same-padded stride-1 conv producing an `out_h x out_w` map.
pub fn conv_macs(out_h: usize, out_w: usize, kernel: usize, cin: usize, cout: usize) -> u64 {
    (out_h * out_w * kernel * kernel * cin * cout) as u64
}

/// One multiply per element of the gated activation.
pub fn gating_macs(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64
}

/// One accumulate per element of the squeezed activation.
pub fn squeeze_macs(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64
}

fn spatial(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

/// Joint FC plus excitation heads, applied once.
pub fn mmtm_transform(config: &MmtmConfig) -> (u64, u64) {
    let total = config.total_channels();
    let cz = config.bottleneck;
    let mut params = linear_params(total, cz);
    let mut macs = linear_macs(total, cz);
    for &c in &config.channel_counts {
        params += linear_params(cz, c);
        macs += linear_macs(cz, c);
    }
    (params, macs)
}

/// Rows of one MMTM applied to activations of the given shapes.
pub fn mmtm_rows(name: &str, config: &MmtmConfig, shapes: &[Vec<usize>]) -> Vec<CostRow> {
    let (params, macs) = mmtm_transform(config);
    let squeeze: u64 = shapes.iter().map(|s| squeeze_macs(s)).sum();
    let gated: u64 = shapes
        .iter()
        .zip(&config.gate_mask)
        .filter(|(_, &on)| on)
        .map(|(s, _)| gating_macs(s))
        .sum();
    vec![
        CostRow::new(format!("{name}.squeeze"), 0, squeeze),
        CostRow::new(format!("{name}.transform"), params, macs),
        CostRow::new(format!("{name}.gate"), 0, gated),
    ]
}

/// Rows of the convolutional MMTM: the same transform, run at every one of
/// the shared spatial positions. The sum variant adds instead of gating and
/// so has no multiplies.
pub fn conv_mmtm_rows(
    name: &str,
    config: &MmtmConfig,
    shapes: &[Vec<usize>],
    use_sum: bool,
) -> Vec<CostRow> {
    let (params, macs) = mmtm_transform(config);
    let positions = spatial(&shapes[0]) as u64;
    let gated: u64 = if use_sum {
        0
    } else {
        shapes
            .iter()
            .zip(&config.gate_mask)
            .filter(|(_, &on)| on)
            .map(|(s, _)| gating_macs(s))
            .sum()
    };
    vec![
        CostRow::new(format!("{name}.transform"), params, positions * macs),
        CostRow::new(format!("{name}.gate"), 0, gated),
    ]
}

pub fn se_rows(name: &str, se: &SeState, shape: &[usize]) -> Vec<CostRow> {
    let (r, e) = (&se.reduce, &se.expand);
    vec![
        CostRow::new(format!("{name}.squeeze"), 0, squeeze_macs(shape)),
        CostRow::new(
            format!("{name}.transform"),
            (r.param_count() + e.param_count()) as u64,
            r.macs() + e.macs(),
        ),
        CostRow::new(format!("{name}.gate"), 0, gating_macs(shape)),
    ]
}

fn linear_row(name: String, l: &Linear) -> CostRow {
    CostRow::new(name, l.param_count() as u64, l.macs())
}

/// Costs of one block mapping `in_shape` to `out_shape`.
pub fn block_row(name: String, spec: &BlockSpec, in_shape: &[usize], out_shape: &[usize]) -> CostRow {
    match *spec {
        BlockSpec::Conv {
            out_channels,
            kernel,
            ..
        } => CostRow::new(
            name,
            conv_params(kernel, in_shape[2], out_channels),
            conv_macs(in_shape[0], in_shape[1], kernel, in_shape[2], out_channels),
        ),
        BlockSpec::Dense { out } => {
            let fan_in = in_shape.iter().product();
            debug_assert_eq!(out_shape, [out]);
            CostRow::new(name, linear_params(fan_in, out), linear_macs(fan_in, out))
        }
    }
}

/// Per-component costs of one forward pass of `net` on a single sample.
pub fn report(net: &FusionNetwork) -> Result<CostReport> {
    let mut rows = Vec::new();
    let mut shapes: Vec<Vec<Vec<usize>>> = Vec::with_capacity(net.streams.len());
    for stream in &net.streams {
        let outs = stream.spec.block_output_shapes()?;
        let mut in_shape = stream.spec.input_shape.clone();
        for (b, (spec, out)) in stream.spec.blocks.iter().zip(&outs).enumerate() {
            rows.push(block_row(
                format!("{}.block{}", stream.spec.name, b + 1),
                spec,
                &in_shape,
                out,
            ));
            in_shape = out.clone();
        }
        if let Some(head) = &stream.head {
            rows.push(linear_row(format!("{}.head", stream.spec.name), head));
        }
        shapes.push(outs);
    }
    if let Some(head) = &net.joint_head {
        rows.push(linear_row("head".into(), head));
    }
    for (p, point) in net.points.iter().enumerate() {
        let at: Vec<Vec<usize>> = point
            .after_block
            .iter()
            .zip(&shapes)
            .map(|(&b, sh)| sh[b - 1].clone())
            .collect();
        let name = format!("fuse{p}");
        match &point.module {
            FusionModule::Mmtm { config, .. } => rows.extend(mmtm_rows(&name, config, &at)),
            FusionModule::ConvMmtm {
                config, use_sum, ..
            } => rows.extend(conv_mmtm_rows(&name, config, &at, *use_sum)),
            FusionModule::SelfExcite(ses) => {
                for (s, (se, shape)) in ses.iter().zip(&at).enumerate() {
                    rows.extend(se_rows(&format!("{name}.se{s}"), se, shape));
                }
            }
        }
    }
    Ok(CostReport { rows })
}

/// Number of learnable scalars `net` actually holds.
pub fn count_params(net: &FusionNetwork) -> u64 {
    net.num_params() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmtm::{mmtm_param_count, Mmtm, MmtmInit};
    use crate::streams::{build, FusionPlan, StreamSpec};
    use crate::zoo::FusionKind;

    fn specs() -> Vec<StreamSpec> {
        vec![
            StreamSpec::default_for("image", &[12, 12, 1]),
            StreamSpec::default_for("vector", &[16]),
        ]
    }

    #[test]
    fn hand_counted_cases() {
        let config = MmtmConfig::new(vec![4, 4]).unwrap();
        assert_eq!(mmtm_transform(&config).0, 42);
        assert_eq!(linear_params(5, 3), 18);
        assert_eq!(linear_macs(5, 3), 15);
        assert_eq!(gating_macs(&[2, 2, 8]), 32);
        let m = Mmtm::new(config, MmtmInit::Standard, 0).unwrap();
        assert_eq!(m.param_count(), 42);
    }

    #[test]
    fn closed_form_matches_store() {
        for cs in [vec![3, 9], vec![8, 16, 5], vec![1, 1], vec![32, 32]] {
            let config = MmtmConfig::new(cs.clone()).unwrap();
            let m = Mmtm::new(config.clone(), MmtmInit::Standard, 1).unwrap();
            assert_eq!(mmtm_transform(&config).0 as usize, m.store.num_scalars());
            assert_eq!(mmtm_param_count(&cs, config.bottleneck), m.store.num_scalars());
        }
    }

    #[test]
    fn report_matches_store_and_is_additive() {
        let plan = FusionPlan::suffix(FusionKind::Mmtm, &specs(), 2).unwrap();
        let net = build(&specs(), 4, &plan, 0).unwrap();
        let r = report(&net).unwrap();
        assert_eq!(r.params(), count_params(&net));
        let blocks = r.filtered("image.block").macs() + r.filtered("vector.block").macs();
        let heads = r.filtered("image.head").macs() + r.filtered("vector.head").macs();
        assert_eq!(r.macs(), blocks + heads + r.filtered("fuse").macs());
        assert!(r.to_csv().ends_with(&format!("total,{},{}\n", r.params(), r.macs())));

        let late = report(&build(&specs(), 4, &FusionPlan::late(), 0).unwrap()).unwrap();
        assert!(late.filtered("fuse").rows.is_empty());
        assert!(r.params() > late.params() && r.macs() > late.macs());
    }

    #[test]
    fn conv_transform_scales_with_positions() {
        let config = MmtmConfig::new(vec![8, 8]).unwrap();
        for side in [2usize, 4, 8] {
            let shapes = vec![vec![side, side, 8], vec![side, side, 8]];
            let m = mmtm_rows("m", &config, &shapes);
            let c = conv_mmtm_rows("c", &config, &shapes, false);
            assert_eq!(c[0].macs, (side * side) as u64 * m[1].macs);
            assert_eq!(c[0].params, m[1].params);
        }
    }
}
