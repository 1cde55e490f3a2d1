//! Config-driven experiments: single runs, variant ablations and the
//! fusion-point sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costs::{self, CostReport};
use crate::error::{Error, Result};
use crate::streams::{
    build, count_fusion_sweep_configs, FusionNetwork, FusionPlan, HeadPolicy, MmtmInitSpec,
    StreamSpec, DEFAULT_CONV_CHANNELS, DEFAULT_DENSE_WIDTHS,
};
use crate::synth::{generate, Dataset, SyntheticTaskSpec};
use crate::train::{train_with_echo, RunRecord, TrainConfig};
use crate::zoo::{FusionKind, LateMode};

pub const EXAMPLE_CONFIG: &str = r#"seeds = [0, 1, 2, 3, 4]

[task]
num_classes = 4
shapes = [[12, 12, 1], [16]]
mode = "complementary"    # independent | complementary | xor
corruption_prob = 0.3
noise_sigma = 1.0
cue_snr = 4.0
train_size = 4000
val_size = 1000
test_size = 1000
seed = 0

[streams]
names = ["image", "vector"]
conv_channels = [8, 16, 32]
dense_widths = [32, 32]

[fusion]
kind = "mmtm"             # mmtm | early | late | se_late | conv_mmtm | conv_mmtm_sum
num_points = 2            # fuse after the last N blocks of every stream
head = "late"             # late | late_prob | joint
init = "standard"         # standard | zero_heads | fully_random
variants = ["late", "mmtm", "se_late"]
sweep_max = 2

[training]
base_lr = 0.01
momentum = 0.9
batch_size = 16
max_epochs = 30
patience = 5
weight_decay = 0.0001
excitation_decay = 0.0001
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamsConfig {
    /// One name per modality; defaults to `s0`, `s1`, ...
    pub names: Vec<String>,
    pub conv_channels: Vec<usize>,
    pub dense_widths: Vec<usize>,
}

impl Default for StreamsConfig {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            conv_channels: DEFAULT_CONV_CHANNELS.to_vec(),
            dense_widths: DEFAULT_DENSE_WIDTHS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    #[default]
    Late,
    LateProb,
    Joint,
}

impl From<HeadChoice> for HeadPolicy {
    fn from(h: HeadChoice) -> Self {
        match h {
            HeadChoice::Late => HeadPolicy::Late(LateMode::Logits),
            HeadChoice::LateProb => HeadPolicy::Late(LateMode::Probabilities),
            HeadChoice::Joint => HeadPolicy::Joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub kind: FusionKind,
    /// Fusion after the last `num_points` blocks of every stream.
    pub num_points: usize,
    /// Explicit 1-based block indices per point, overriding `num_points`.
    pub points: Option<Vec<Vec<usize>>>,
    pub bottleneck: Option<usize>,
    pub gate_mask: Option<Vec<bool>>,
    pub joint_relu: bool,
    pub init: MmtmInitSpec,
    pub head: HeadChoice,
    /// Variants compared by `ablate`.
    pub variants: Vec<FusionKind>,
    /// Largest number of points tried by `sweep`.
    pub sweep_max: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kind: FusionKind::Mmtm,
            num_points: 2,
            points: None,
            bottleneck: None,
            gate_mask: None,
            joint_relu: false,
            init: MmtmInitSpec::Standard,
            head: HeadChoice::Late,
            variants: vec![FusionKind::LateFusion, FusionKind::Mmtm, FusionKind::SeLateFusion],
            sweep_max: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub task: SyntheticTaskSpec,
    #[serde(default)]
    pub streams: StreamsConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub training: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            task: SyntheticTaskSpec::default(),
            streams: StreamsConfig::default(),
            fusion: FusionConfig::default(),
            training: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.training.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !self.streams.names.is_empty() && self.streams.names.len() != self.task.shapes.len() {
            return Err(Error::Config(format!(
                "{} stream names for {} modalities",
                self.streams.names.len(),
                self.task.shapes.len()
            )));
        }
        Ok(())
    }

    /// Sets the network and data-order seed of a single run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self.training.seed = seed;
        self
    }

    pub fn stream_specs(&self) -> Vec<StreamSpec> {
        self.task
            .shapes
            .iter()
            .enumerate()
            .map(|(m, shape)| {
                let name = self
                    .streams
                    .names
                    .get(m)
                    .cloned()
                    .unwrap_or_else(|| format!("s{m}"));
                StreamSpec::with_widths(
                    &name,
                    shape,
                    &self.streams.conv_channels,
                    &self.streams.dense_widths,
                )
            })
            .collect()
    }

    /// The plan for `kind` with the configured placement and options.
    pub fn plan(&self, kind: FusionKind) -> Result<FusionPlan> {
        let specs = self.stream_specs();
        let mut plan = match (&self.fusion.points, kind.is_intermediate()) {
            (Some(points), true) => FusionPlan::new(kind, points.clone()),
            _ => FusionPlan::suffix(kind, &specs, self.fusion.num_points)?,
        };
        plan.gate_mask = self.fusion.gate_mask.clone();
        plan.bottleneck = self.fusion.bottleneck;
        plan.joint_relu = self.fusion.joint_relu;
        plan.mmtm_init = self.fusion.init;
        plan.head = self.fusion.head.into();
        Ok(plan)
    }

    pub fn build(&self, plan: &FusionPlan, seed: u64) -> Result<FusionNetwork> {
        build(&self.stream_specs(), self.task.num_classes, plan, seed)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        generate(&self.task)
    }
}

/// A trained network together with its record.
pub struct RunOutcome {
    pub record: RunRecord,
    pub net: FusionNetwork,
}

/// Builds and trains one network; `seed` fixes both initialization and data
/// order.
pub fn run_plan(
    cfg: &ExperimentConfig,
    data: &Dataset,
    plan: &FusionPlan,
    seed: u64,
) -> Result<RunOutcome> {
    let mut net = cfg.build(plan, seed)?;
    let training = TrainConfig {
        seed,
        ..cfg.training.clone()
    };
    let echo = serde_json::json!({
        "experiment": cfg.clone().with_seed(seed),
        "plan": plan,
    });
    let record = train_with_echo(&mut net, data, &training, echo)?;
    Ok(RunOutcome { record, net })
}

pub fn run(cfg: &ExperimentConfig, data: &Dataset, kind: FusionKind, seed: u64) -> Result<RunOutcome> {
    run_plan(cfg, data, &cfg.plan(kind)?, seed)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub params: u64,
    pub macs: u64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub j: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub accuracies: Vec<f64>,
}

/// Parses variant names, rejecting unknown ones with the list of valid names.
pub fn parse_variants(names: &[String]) -> Result<Vec<FusionKind>> {
    names.iter().map(|n| n.parse()).collect()
}

/// Trains every variant under every seed; rows sorted by variant name.
/// `on_run` sees each finished run.
pub fn ablate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variants: &[FusionKind],
    seeds: &[u64],
    mut on_run: impl FnMut(FusionKind, u64, &RunRecord),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablate needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &kind in variants {
        let plan = cfg.plan(kind)?;
        let cost = costs::report(&cfg.build(&plan, seeds[0])?)?;
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let out = run_plan(cfg, data, &plan, seed)?;
            on_run(kind, seed, &out.record);
            accs.push(out.record.test_accuracy);
        }
        let (mean, std) = mean_std(&accs);
        rows.push(AblationRow {
            variant: kind.name().to_string(),
            mean_accuracy: mean,
            std_accuracy: std,
            params: cost.params(),
            macs: cost.macs(),
            accuracies: accs,
        });
    }
    rows.sort_by(|a, b| a.variant.cmp(&b.variant));
    Ok(rows)
}

/// MMTM at the last `j` block boundaries for `j = 0..=max_points`; `j = 0`
/// is the late-fusion baseline.
pub fn sweep(
    cfg: &ExperimentConfig,
    data: &Dataset,
    max_points: usize,
    seeds: &[u64],
    mut on_run: impl FnMut(usize, u64, &RunRecord),
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::Usage("sweep needs at least one seed".into()));
    }
    let plans = count_fusion_sweep_configs(&cfg.stream_specs(), max_points)?;
    let mut rows = Vec::with_capacity(plans.len());
    for (j, points) in plans.into_iter().enumerate() {
        let mut plan = cfg.plan(FusionKind::Mmtm)?;
        plan.points = points;
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let out = run_plan(cfg, data, &plan, seed)?;
            on_run(j, seed, &out.record);
            accs.push(out.record.test_accuracy);
        }
        let (mean, std) = mean_std(&accs);
        rows.push(SweepRow {
            j,
            mean_accuracy: mean,
            std_accuracy: std,
            accuracies: accs,
        });
    }
    Ok(rows)
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

pub fn write_ablation_csv<W: std::io::Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "mean_accuracy", "std_accuracy", "params", "macs", "accuracies"])?;
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(|&a| fmt(a)).collect();
        w.write_record([
            r.variant.clone(),
            fmt(r.mean_accuracy),
            fmt(r.std_accuracy),
            r.params.to_string(),
            r.macs.to_string(),
            accs.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["j", "mean_accuracy", "std_accuracy", "accuracies"])?;
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(|&a| fmt(a)).collect();
        w.write_record([
            r.j.to_string(),
            fmt(r.mean_accuracy),
            fmt(r.std_accuracy),
            accs.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Cost report of the network a config describes.
pub fn cost_report(cfg: &ExperimentConfig, seed: u64) -> Result<CostReport> {
    costs::report(&cfg.build(&cfg.plan(cfg.fusion.kind)?, seed)?)
}
