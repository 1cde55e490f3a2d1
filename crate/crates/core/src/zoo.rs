//! Fusion variants compared against the MMTM: early fusion, late fusion,
//! unimodal squeeze-and-excitation with late fusion, and the two
//! convolutional MMTMs that skip the squeeze.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::mmtm::{gate_coefficients, MmtmConfig, MmtmOutput, MmtmState};
use crate::params::{Bound, Init, Linear, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Mmtm,
    #[serde(rename = "early")]
    EarlyFusion,
    #[serde(rename = "late")]
    LateFusion,
    #[serde(rename = "se_late")]
    SeLateFusion,
    ConvMmtm,
    ConvMmtmSum,
}

impl FusionKind {
    pub const ALL: [FusionKind; 6] = [
        FusionKind::Mmtm,
        FusionKind::EarlyFusion,
        FusionKind::LateFusion,
        FusionKind::SeLateFusion,
        FusionKind::ConvMmtm,
        FusionKind::ConvMmtmSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Mmtm => "mmtm",
            FusionKind::EarlyFusion => "early",
            FusionKind::LateFusion => "late",
            FusionKind::SeLateFusion => "se_late",
            FusionKind::ConvMmtm => "conv_mmtm",
            FusionKind::ConvMmtmSum => "conv_mmtm_sum",
        }
    }

    /// Variants that exchange information between streams mid-network.
    pub fn is_intermediate(self) -> bool {
        matches!(
            self,
            FusionKind::Mmtm | FusionKind::ConvMmtm | FusionKind::ConvMmtmSum
        )
    }

    /// Variants that only work when all modalities share spatial extents.
    pub fn needs_aligned_inputs(self) -> bool {
        matches!(
            self,
            FusionKind::EarlyFusion | FusionKind::ConvMmtm | FusionKind::ConvMmtmSum
        )
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = FusionKind::ALL.iter().map(|k| k.name()).collect();
                Error::Usage(format!(
                    "unknown fusion variant {s:?}; valid names: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Unimodal squeeze-and-excitation: squeeze, `C -> C/4` with ReLU, back to
/// `C`, sigmoid gate in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeState {
    pub reduce: Linear,
    pub expand: Linear,
}

pub fn se_bottleneck(channels: usize) -> usize {
    (channels / 4).max(1)
}

impl SeState {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let r = se_bottleneck(channels);
        Ok(Self {
            reduce: Linear::new(
                store,
                &format!("{name}.reduce"),
                channels,
                r,
                Init::HeUniform,
                Init::Zeros,
                rng,
            )?,
            expand: Linear::new(
                store,
                &format!("{name}.expand"),
                r,
                channels,
                Init::FanInUniform,
                Init::Zeros,
                rng,
            )?,
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_dim
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.reduce.ids().to_vec();
        ids.extend(self.expand.ids());
        ids
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }
}

pub fn se_forward(tape: &mut Tape, params: &Bound, feature: Var, state: &SeState) -> Result<Var> {
    let c = tape.value(feature).channels();
    if c != state.channels() {
        return Err(dim_err(format!(
            "SE block expects {} channels, got shape {:?}",
            state.channels(),
            tape.shape(feature)
        )));
    }
    let s = tape.mean_over_non_channel(feature);
    let h = state.reduce.forward(tape, params, s)?;
    let h = tape.relu(h);
    let e = state.expand.forward(tape, params, h)?;
    let g = tape.sigmoid(e);
    tape.channelwise_mul(g, feature)
}

fn check_aligned(tape: &Tape, features: &[Var]) -> Result<()> {
    let first = *features
        .first()
        .ok_or_else(|| Error::Usage("no modalities given".into()))?;
    let spatial = tape.value(first).spatial_shape();
    for (m, &f) in features.iter().enumerate().skip(1) {
        if tape.value(f).spatial_shape() != spatial {
            return Err(Error::UnalignedSpatial(format!(
                "modality 0 has shape {:?} but modality {m} has {:?}",
                tape.shape(first),
                tape.shape(f)
            )));
        }
    }
    Ok(())
}

/// MMTM without the squeeze: every fully connected layer becomes a 1x1
/// convolution applied at each position, so inputs must be spatially aligned.
/// Uses the same weights as [`MmtmState`], hence the same parameter count.
///
/// With `use_sum` the recalibration is `A + E` instead of `2 sigmoid(E) A`.
pub fn conv_mmtm_forward(
    tape: &mut Tape,
    params: &Bound,
    features: &[Var],
    config: &MmtmConfig,
    state: &MmtmState,
    use_sum: bool,
) -> Result<MmtmOutput> {
    check_aligned(tape, features)?;
    if features.len() != config.num_modalities() {
        return Err(dim_err(format!(
            "expected {} modalities, got {}",
            config.num_modalities(),
            features.len()
        )));
    }
    for (m, (&f, &c)) in features.iter().zip(&config.channel_counts).enumerate() {
        if tape.value(f).channels() != c {
            return Err(dim_err(format!(
                "modality {m}: expected {c} channels, got shape {:?}",
                tape.shape(f)
            )));
        }
    }
    let cat = tape.concat_channels(features)?;
    let z = state.joint.forward_pointwise(tape, params, cat)?;
    let z = if config.joint_relu { tape.relu(z) } else { z };
    let mut outputs = Vec::with_capacity(features.len());
    let mut excitations = Vec::with_capacity(features.len());
    for ((head, &f), &on) in state.heads.iter().zip(features).zip(&config.gate_mask) {
        let e = head.forward_pointwise(tape, params, z)?;
        excitations.push(e);
        outputs.push(match (on, use_sum) {
            (false, _) => f,
            (true, true) => tape.add(f, e)?,
            (true, false) => {
                let g = gate_coefficients(tape, e);
                tape.mul(g, f)?
            }
        });
    }
    Ok(MmtmOutput {
        outputs,
        excitations,
    })
}

/// How per-stream scores are combined at the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateMode {
    /// Arithmetic mean of pre-softmax scores.
    #[default]
    Logits,
    /// Mean of softmax probabilities, returned as log-probabilities so that
    /// a softmax cross-entropy on the result is the NLL of the mixture.
    Probabilities,
}

pub fn late_fuse(tape: &mut Tape, logits: &[Var], mode: LateMode) -> Result<Var> {
    if let Some(&first) = logits.first() {
        for &l in &logits[1..] {
            if tape.shape(l) != tape.shape(first) {
                return Err(dim_err(format!(
                    "late fusion of scores with shapes {:?} and {:?}",
                    tape.shape(first),
                    tape.shape(l)
                )));
            }
        }
    }
    match mode {
        LateMode::Logits => tape.mean_of(logits),
        LateMode::Probabilities => {
            let probs = logits
                .iter()
                .map(|&l| tape.softmax(l))
                .collect::<Result<Vec<_>>>()?;
            let mean = tape.mean_of(&probs)?;
            Ok(tape.ln(mean))
        }
    }
}

/// Concatenates raw inputs along channels so that one stream sees them all.
pub fn early_fuse(tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
    check_aligned(tape, inputs)?;
    tape.concat_channels(inputs)
}
