//! Parallel per-modality towers with fusion modules at block boundaries.
//!
//! A stream is a short stack of blocks (3x3 conv + ReLU + optional 2x mean
//! pool for image-like inputs, FC + ReLU for vectors) followed by a linear
//! classifier. Fusion points sit *after* a block, identified per stream by a
//! 1-based block index, and rewrite the participating activations before the
//! next block runs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::mmtm::{mmtm_forward, MmtmConfig, MmtmInit, MmtmState};
use crate::params::{seeded_rng, Bound, Init, Linear, ParamId, ParamStore, SeededRng};
use crate::tensor::Tensor;
use crate::zoo::{conv_mmtm_forward, early_fuse, late_fuse, se_forward, FusionKind, LateMode, SeState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockSpec {
    /// Same-padded square conv, bias, ReLU, then optional 2x2 mean pool.
    Conv {
        out_channels: usize,
        kernel: usize,
        pool: bool,
    },
    /// Fully connected + ReLU. Flattens a higher-rank input first.
    Dense { out: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub blocks: Vec<BlockSpec>,
}

pub const DEFAULT_CONV_CHANNELS: [usize; 3] = [8, 16, 32];
pub const DEFAULT_DENSE_WIDTHS: [usize; 2] = [32, 32];

impl StreamSpec {
    /// Desk-scale default tower for an input shape: conv blocks for
    /// `[H, W, C]`, dense blocks for everything else.
    pub fn default_for(name: &str, input_shape: &[usize]) -> Self {
        Self::with_widths(name, input_shape, &DEFAULT_CONV_CHANNELS, &DEFAULT_DENSE_WIDTHS)
    }

    pub fn with_widths(
        name: &str,
        input_shape: &[usize],
        conv_channels: &[usize],
        dense_widths: &[usize],
    ) -> Self {
        let blocks = if input_shape.len() == 3 {
            conv_channels
                .iter()
                .map(|&c| BlockSpec::Conv {
                    out_channels: c,
                    kernel: 3,
                    pool: true,
                })
                .collect()
        } else {
            dense_widths
                .iter()
                .map(|&w| BlockSpec::Dense { out: w })
                .collect()
        };
        Self {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            blocks,
        }
    }

    /// Activation shape after each block (index 0 = after block 1).
    pub fn block_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "stream {}: invalid input shape {:?}",
                self.name, self.input_shape
            )));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            shape = match *block {
                BlockSpec::Conv {
                    out_channels,
                    kernel,
                    pool,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::Config(format!(
                            "stream {} block {}: conv needs a [H, W, C] input, got {shape:?}",
                            self.name,
                            b + 1
                        )));
                    }
                    if out_channels == 0 || kernel == 0 {
                        return Err(Error::Config(format!(
                            "stream {} block {}: zero-sized conv",
                            self.name,
                            b + 1
                        )));
                    }
                    if pool {
                        vec![shape[0].div_ceil(2), shape[1].div_ceil(2), out_channels]
                    } else {
                        vec![shape[0], shape[1], out_channels]
                    }
                }
                BlockSpec::Dense { out } => {
                    if out == 0 {
                        return Err(Error::Config(format!(
                            "stream {} block {}: zero-width dense layer",
                            self.name,
                            b + 1
                        )));
                    }
                    vec![out]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .block_output_shapes()?
            .pop()
            .unwrap_or_else(|| self.input_shape.clone()))
    }
}

/// Where and how streams are fused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub kind: FusionKind,
    /// One entry per fusion point: the 1-based block index, per stream,
    /// after which the point sits.
    pub points: Vec<Vec<usize>>,
    pub gate_mask: Option<Vec<bool>>,
    pub bottleneck: Option<usize>,
    pub joint_relu: bool,
    pub mmtm_init: MmtmInitSpec,
    pub head: HeadPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmtmInitSpec {
    #[default]
    Standard,
    ZeroHeads,
    FullyRandom,
}

impl From<MmtmInitSpec> for MmtmInit {
    fn from(s: MmtmInitSpec) -> Self {
        match s {
            MmtmInitSpec::Standard => MmtmInit::Standard,
            MmtmInitSpec::ZeroHeads => MmtmInit::ZeroHeads,
            MmtmInitSpec::FullyRandom => MmtmInit::FullyRandom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "mode", rename_all = "snake_case")]
pub enum HeadPolicy {
    /// Each stream keeps its own classifier; scores are late-fused.
    Late(LateMode),
    /// One classifier over the concatenated final features.
    Joint,
}

impl Default for HeadPolicy {
    fn default() -> Self {
        HeadPolicy::Late(LateMode::Logits)
    }
}

impl FusionPlan {
    pub fn new(kind: FusionKind, points: Vec<Vec<usize>>) -> Self {
        Self {
            kind,
            points,
            gate_mask: None,
            bottleneck: None,
            joint_relu: false,
            mmtm_init: MmtmInitSpec::Standard,
            head: HeadPolicy::default(),
        }
    }

    /// Plain late fusion: no fusion points.
    pub fn late() -> Self {
        Self::new(FusionKind::LateFusion, Vec::new())
    }

    /// `kind` placed after the last `j` blocks of every stream.
    pub fn suffix(kind: FusionKind, specs: &[StreamSpec], j: usize) -> Result<Self> {
        let points = match kind {
            FusionKind::LateFusion | FusionKind::EarlyFusion => Vec::new(),
            _ => suffix_points(specs, j)?,
        };
        Ok(Self::new(kind, points))
    }

    pub fn with_init(mut self, init: MmtmInitSpec) -> Self {
        self.mmtm_init = init;
        self
    }

    pub fn with_gate_mask(mut self, mask: Vec<bool>) -> Self {
        self.gate_mask = Some(mask);
        self
    }

    pub fn with_head(mut self, head: HeadPolicy) -> Self {
        self.head = head;
        self
    }
}

fn suffix_points(specs: &[StreamSpec], j: usize) -> Result<Vec<Vec<usize>>> {
    let min_blocks = specs.iter().map(|s| s.blocks.len()).min().unwrap_or(0);
    if j > min_blocks {
        return Err(Error::Config(format!(
            "cannot place {j} fusion points: the shortest stream has {min_blocks} block boundaries"
        )));
    }
    Ok((0..j)
        .rev()
        .map(|back| specs.iter().map(|s| s.blocks.len() - back).collect())
        .collect())
}

/// Fusion plans with `j = 0..=max_points` points on the last `j` block
/// boundaries of every stream.
pub fn count_fusion_sweep_configs(
    specs: &[StreamSpec],
    max_points: usize,
) -> Result<Vec<Vec<Vec<usize>>>> {
    (0..=max_points).map(|j| suffix_points(specs, j)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Conv {
        kernel: ParamId,
        bias: ParamId,
        spec: BlockSpec,
    },
    Dense(Linear),
}

impl Block {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Block::Conv { kernel, bias, .. } => vec![*kernel, *bias],
            Block::Dense(l) => l.ids().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub spec: StreamSpec,
    pub blocks: Vec<Block>,
    /// Per-stream classifier; absent under a joint head.
    pub head: Option<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionModule {
    Mmtm {
        config: MmtmConfig,
        state: MmtmState,
    },
    ConvMmtm {
        config: MmtmConfig,
        state: MmtmState,
        use_sum: bool,
    },
    /// Independent SE blocks, one per stream; no information crosses streams.
    SelfExcite(Vec<SeState>),
}

impl FusionModule {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            FusionModule::Mmtm { state, .. } | FusionModule::ConvMmtm { state, .. } => state.ids(),
            FusionModule::SelfExcite(ses) => ses.iter().flat_map(SeState::ids).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionPoint {
    pub after_block: Vec<usize>,
    pub module: FusionModule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionNetwork {
    /// The per-modality input specs the network was built from.
    pub input_specs: Vec<StreamSpec>,
    pub streams: Vec<Stream>,
    pub points: Vec<FusionPoint>,
    pub plan: FusionPlan,
    pub joint_head: Option<Linear>,
    pub num_classes: usize,
    pub store: ParamStore,
    pub seed: u64,
}

/// Everything a forward pass produces on the tape.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Excitation signals of every MMTM-type fusion point, for the penalty.
    pub excitations: Vec<Var>,
    /// Per stream, the activation at each block boundary after any fusion
    /// applied there.
    pub boundaries: Vec<Vec<Var>>,
}

const FUSION_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn build(
    specs: &[StreamSpec],
    num_classes: usize,
    plan: &FusionPlan,
    seed: u64,
) -> Result<FusionNetwork> {
    if specs.is_empty() {
        return Err(Error::Config("a network needs at least one stream".into()));
    }
    if num_classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();

    let stream_specs: Vec<StreamSpec> = if plan.kind == FusionKind::EarlyFusion {
        vec![early_spec(specs)?]
    } else {
        specs.to_vec()
    };
    let late = matches!(plan.head, HeadPolicy::Late(_));

    let mut streams = Vec::with_capacity(stream_specs.len());
    for (s, spec) in stream_specs.iter().enumerate() {
        streams.push(build_stream(&mut store, s, spec, num_classes, late, &mut rng)?);
    }

    let shapes: Vec<Vec<Vec<usize>>> = stream_specs
        .iter()
        .map(StreamSpec::block_output_shapes)
        .collect::<Result<_>>()?;
    validate_points(plan, &stream_specs)?;
    let joint_head = if late {
        None
    } else {
        let width: usize = shapes
            .iter()
            .zip(&stream_specs)
            .map(|(sh, spec)| {
                sh.last()
                    .unwrap_or(&spec.input_shape)
                    .iter()
                    .product::<usize>()
            })
            .sum();
        Some(Linear::new(
            &mut store,
            "head",
            width,
            num_classes,
            Init::FanInUniform,
            Init::Zeros,
            &mut rng,
        )?)
    };

    // Fusion modules draw from their own stream so that towers and heads are
    // initialized identically whatever fusion is attached.
    let mut rng = seeded_rng(seed ^ FUSION_SEED_SALT);

    let mut points = Vec::with_capacity(plan.points.len());
    for (p, after) in plan.points.iter().enumerate() {
        let at: Vec<&Vec<usize>> = after
            .iter()
            .zip(&shapes)
            .map(|(&b, sh)| &sh[b - 1])
            .collect();
        let channels: Vec<usize> = at.iter().map(|s| *s.last().unwrap()).collect();
        let name = format!("fuse{p}");
        let module = match plan.kind {
            FusionKind::Mmtm | FusionKind::ConvMmtm | FusionKind::ConvMmtmSum => {
                let mut config = MmtmConfig::new(channels)?.with_joint_relu(plan.joint_relu);
                if let Some(b) = plan.bottleneck {
                    config = config.with_bottleneck(b)?;
                }
                if let Some(mask) = &plan.gate_mask {
                    config = config.with_gate_mask(mask.clone())?;
                }
                if plan.kind != FusionKind::Mmtm {
                    let first = &at[0][..at[0].len() - 1];
                    if let Some(s) = at.iter().position(|sh| &sh[..sh.len() - 1] != first) {
                        return Err(Error::UnalignedSpatial(format!(
                            "fusion point {p}: stream 0 activation {:?} vs stream {s} activation {:?}",
                            at[0], at[s]
                        )));
                    }
                }
                let state =
                    MmtmState::new(&mut store, &name, &config, plan.mmtm_init.into(), &mut rng)?;
                match plan.kind {
                    FusionKind::Mmtm => FusionModule::Mmtm { config, state },
                    k => FusionModule::ConvMmtm {
                        config,
                        state,
                        use_sum: k == FusionKind::ConvMmtmSum,
                    },
                }
            }
            FusionKind::SeLateFusion => FusionModule::SelfExcite(
                channels
                    .iter()
                    .enumerate()
                    .map(|(s, &c)| SeState::new(&mut store, &format!("{name}.se{s}"), c, &mut rng))
                    .collect::<Result<_>>()?,
            ),
            FusionKind::LateFusion | FusionKind::EarlyFusion => unreachable!("validated"),
        };
        points.push(FusionPoint {
            after_block: after.clone(),
            module,
        });
    }

    Ok(FusionNetwork {
        input_specs: specs.to_vec(),
        streams,
        points,
        plan: plan.clone(),
        joint_head,
        num_classes,
        store,
        seed,
    })
}

/// Single stream over the channel-concatenation of all inputs, using the
/// first stream's block layout.
fn early_spec(specs: &[StreamSpec]) -> Result<StreamSpec> {
    let first = &specs[0];
    let spatial = &first.input_shape[..first.input_shape.len() - 1];
    let mut channels = 0;
    for (s, spec) in specs.iter().enumerate() {
        let (sp, c) = spec.input_shape.split_at(spec.input_shape.len() - 1);
        if sp != spatial {
            return Err(Error::UnalignedSpatial(format!(
                "early fusion needs aligned inputs: stream 0 {:?} vs stream {s} {:?}",
                first.input_shape, spec.input_shape
            )));
        }
        channels += c[0];
    }
    let mut input_shape = spatial.to_vec();
    input_shape.push(channels);
    Ok(StreamSpec {
        name: "early".into(),
        input_shape,
        blocks: first.blocks.clone(),
    })
}

fn build_stream(
    store: &mut ParamStore,
    s: usize,
    spec: &StreamSpec,
    num_classes: usize,
    with_head: bool,
    rng: &mut SeededRng,
) -> Result<Stream> {
    let shapes = spec.block_output_shapes()?;
    let mut in_shape = spec.input_shape.clone();
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for (b, (block, out_shape)) in spec.blocks.iter().zip(&shapes).enumerate() {
        let name = format!("s{s}.b{}", b + 1);
        blocks.push(match *block {
            BlockSpec::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let cin = in_shape[2];
                let fan_in = kernel * kernel * cin;
                let k = Init::HeUniform.tensor(vec![kernel, kernel, cin, out_channels], fan_in, rng)?;
                Block::Conv {
                    kernel: store.add(format!("{name}.conv.kernel"), k),
                    bias: store.add(format!("{name}.conv.bias"), Tensor::zeros(vec![out_channels])?),
                    spec: block.clone(),
                }
            }
            BlockSpec::Dense { out } => {
                let fan_in: usize = in_shape.iter().product();
                Block::Dense(Linear::new(
                    store,
                    &format!("{name}.fc"),
                    fan_in,
                    out,
                    Init::HeUniform,
                    Init::Zeros,
                    rng,
                )?)
            }
        });
        in_shape = out_shape.clone();
    }
    let head = if with_head {
        Some(Linear::new(
            store,
            &format!("s{s}.head"),
            in_shape.iter().product(),
            num_classes,
            Init::FanInUniform,
            Init::Zeros,
            rng,
        )?)
    } else {
        None
    };
    Ok(Stream {
        spec: spec.clone(),
        blocks,
        head,
    })
}

fn validate_points(plan: &FusionPlan, specs: &[StreamSpec]) -> Result<()> {
    match plan.kind {
        FusionKind::LateFusion | FusionKind::EarlyFusion if !plan.points.is_empty() => {
            return Err(Error::Config(format!(
                "{} takes no fusion points, got {}",
                plan.kind,
                plan.points.len()
            )));
        }
        k if k.is_intermediate() && specs.len() < 2 && !plan.points.is_empty() => {
            return Err(Error::Config(format!("{k} needs at least 2 streams")));
        }
        _ => {}
    }
    for (p, after) in plan.points.iter().enumerate() {
        if after.len() != specs.len() {
            return Err(Error::Config(format!(
                "fusion point {p} names {} block indices for {} streams",
                after.len(),
                specs.len()
            )));
        }
        for (s, (&b, spec)) in after.iter().zip(specs).enumerate() {
            if b == 0 || b > spec.blocks.len() {
                return Err(Error::Config(format!(
                    "fusion point {p}: stream {s} has no block {b} (valid 1..={})",
                    spec.blocks.len()
                )));
            }
            if p > 0 && b <= plan.points[p - 1][s] {
                return Err(Error::Config(format!(
                    "fusion points must be strictly increasing per stream (point {p}, stream {s})"
                )));
            }
        }
    }
    Ok(())
}

fn in_stream<T>(s: usize, b: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Dimension(m) => Error::Dimension(format!("stream {s}, block {b}: {m}")),
        other => other,
    })
}

impl FusionNetwork {
    pub fn num_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn run_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        s: usize,
        b: usize,
        x: Var,
    ) -> Result<Var> {
        let block = &self.streams[s].blocks[b];
        in_stream(s, b + 1, match block {
            Block::Conv { kernel, bias, spec } => {
                let BlockSpec::Conv { pool, .. } = spec else { unreachable!() };
                let y = tape.conv2d(x, p[*kernel], 1, Padding::Same)?;
                let y = tape.add_channel_bias(y, p[*bias])?;
                let y = tape.relu(y);
                if *pool {
                    tape.avg_pool2(y)
                } else {
                    Ok(y)
                }
            }
            Block::Dense(fc) => {
                let x = if tape.shape(x).len() == 1 { x } else { tape.flatten(x) };
                let y = fc.forward(tape, p, x)?;
                Ok(tape.relu(y))
            }
        })
    }

    /// Full forward pass on `tape` with parameters bound as `p`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &[Var],
    ) -> Result<ForwardOutput> {
        if inputs.len() != self.input_specs.len() {
            return Err(dim_err(format!(
                "network expects {} modalities, got {}",
                self.input_specs.len(),
                inputs.len()
            )));
        }
        for (s, (&x, spec)) in inputs.iter().zip(&self.input_specs).enumerate() {
            if tape.shape(x) != spec.input_shape.as_slice() {
                return Err(dim_err(format!(
                    "stream {s} ({}): expected input {:?}, got {:?}",
                    spec.name,
                    spec.input_shape,
                    tape.shape(x)
                )));
            }
        }
        let mut acts: Vec<Var> = if self.plan.kind == FusionKind::EarlyFusion {
            vec![early_fuse(tape, inputs)?]
        } else {
            inputs.to_vec()
        };
        let mut done = vec![0usize; self.streams.len()];
        let mut boundaries: Vec<Vec<Var>> = vec![Vec::new(); self.streams.len()];
        let mut excitations = Vec::new();

        for point in &self.points {
            for s in 0..self.streams.len() {
                while done[s] < point.after_block[s] {
                    acts[s] = self.run_block(tape, p, s, done[s], acts[s])?;
                    boundaries[s].push(acts[s]);
                    done[s] += 1;
                }
            }
            match &point.module {
                FusionModule::Mmtm { config, state } => {
                    let out = mmtm_forward(tape, p, &acts, config, state)?;
                    acts = out.outputs;
                    excitations.extend(out.excitations);
                }
                FusionModule::ConvMmtm {
                    config,
                    state,
                    use_sum,
                } => {
                    let out = conv_mmtm_forward(tape, p, &acts, config, state, *use_sum)?;
                    acts = out.outputs;
                    excitations.extend(out.excitations);
                }
                FusionModule::SelfExcite(ses) => {
                    for (a, se) in acts.iter_mut().zip(ses) {
                        *a = se_forward(tape, p, *a, se)?;
                    }
                }
            }
            for s in 0..self.streams.len() {
                *boundaries[s].last_mut().expect("fused after a block") = acts[s];
            }
        }
        for s in 0..self.streams.len() {
            while done[s] < self.streams[s].blocks.len() {
                acts[s] = self.run_block(tape, p, s, done[s], acts[s])?;
                boundaries[s].push(acts[s]);
                done[s] += 1;
            }
        }

        let logits = match (self.plan.head, &self.joint_head) {
            (HeadPolicy::Late(mode), _) => {
                let mut scores = Vec::with_capacity(self.streams.len());
                for (stream, &a) in self.streams.iter().zip(&acts) {
                    let head = stream.head.as_ref().expect("late head");
                    let flat = tape.flatten(a);
                    scores.push(head.forward(tape, p, flat)?);
                }
                late_fuse(tape, &scores, mode)?
            }
            (HeadPolicy::Joint, Some(head)) => {
                let flats: Vec<Var> = acts.iter().map(|&a| tape.flatten(a)).collect();
                let cat = tape.concat_channels(&flats)?;
                head.forward(tape, p, cat)?
            }
            (HeadPolicy::Joint, None) => unreachable!("joint head built with network"),
        };
        Ok(ForwardOutput {
            logits,
            excitations,
            boundaries,
        })
    }

    /// Training loss for one sample: cross-entropy plus the excitation penalty.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &[Tensor],
        label: usize,
        excitation_decay: f64,
    ) -> Result<(Var, ForwardOutput)> {
        let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.forward_on_tape(tape, p, &xs)?;
        let mut loss = tape.cross_entropy(out.logits, label)?;
        if excitation_decay > 0.0 && !out.excitations.is_empty() {
            let pen = crate::mmtm::excitation_penalty(tape, &out.excitations, excitation_decay)?;
            loss = tape.add(loss, pen)?;
        }
        Ok((loss, out))
    }

    /// Class scores for one sample.
    pub fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.forward_on_tape(&mut tape, &p, &xs)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Post-fusion activations at every block boundary, per stream.
    pub fn trace(&self, inputs: &[Tensor]) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.forward_on_tape(&mut tape, &p, &xs)?;
        Ok(out
            .boundaries
            .iter()
            .map(|bs| bs.iter().map(|&v| tape.value(v).clone()).collect())
            .collect())
    }

    pub fn predict(&self, inputs: &[Tensor]) -> Result<usize> {
        let logits = self.forward(inputs)?;
        Ok(argmax(logits.data()))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
