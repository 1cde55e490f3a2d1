//! The multimodal transfer module.
//!
//! For `K >= 2` feature tensors `A_m` of arbitrary (and mutually different)
//! rank, all channel-last:
//!
//! ```text
//! S_m = mean of A_m over every non-channel axis        [C_m]
//! Z   = W [S_1, ..., S_K] + b                          [C_Z]
//! E_m = W_m Z + b_m                                    [C_m]
//! A~_m = 2 * sigmoid(E_m) (.) A_m                       broadcast over positions
//! ```
//!
//! With the excitation heads at zero every gate is exactly 1, so a module
//! can be dropped between pretrained streams without changing them.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{seeded_rng, Bound, Init, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MmtmConfig {
    pub channel_counts: Vec<usize>,
    /// Width `C_Z` of the joint representation.
    pub bottleneck: usize,
    /// `false` leaves that modality ungated (its excitation is still computed).
    pub gate_mask: Vec<bool>,
    /// Weight of the L2 penalty on the excitation signals.
    pub excitation_decay: f64,
    /// Apply a ReLU to `Z`. Off by default: the joint map is linear.
    pub joint_relu: bool,
}

/// `max(1, floor(sum C_m / 4))`.
pub fn default_bottleneck(channel_counts: &[usize]) -> usize {
    (channel_counts.iter().sum::<usize>() / 4).max(1)
}

/// Learnable scalars in an MMTM: `C_Z * sum C + C_Z + sum_m (C_m * C_Z + C_m)`.
pub fn mmtm_param_count(channel_counts: &[usize], bottleneck: usize) -> usize {
    let total: usize = channel_counts.iter().sum();
    bottleneck * total
        + bottleneck
        + channel_counts
            .iter()
            .map(|c| c * bottleneck + c)
            .sum::<usize>()
}

impl MmtmConfig {
    pub fn new(channel_counts: Vec<usize>) -> Result<Self> {
        let k = channel_counts.len();
        let config = Self {
            bottleneck: default_bottleneck(&channel_counts),
            gate_mask: vec![true; k],
            channel_counts,
            excitation_decay: 0.0,
            joint_relu: false,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_bottleneck(mut self, bottleneck: usize) -> Result<Self> {
        self.bottleneck = bottleneck;
        self.validate()?;
        Ok(self)
    }

    pub fn with_gate_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.gate_mask = mask;
        self.validate()?;
        Ok(self)
    }

    pub fn with_excitation_decay(mut self, decay: f64) -> Result<Self> {
        self.excitation_decay = decay;
        self.validate()?;
        Ok(self)
    }

    pub fn with_joint_relu(mut self, on: bool) -> Self {
        self.joint_relu = on;
        self
    }

    pub fn num_modalities(&self) -> usize {
        self.channel_counts.len()
    }

    pub fn total_channels(&self) -> usize {
        self.channel_counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_counts.len() < 2 {
            return Err(Error::Config(format!(
                "an MMTM fuses at least 2 modalities, got {}",
                self.channel_counts.len()
            )));
        }
        if let Some(m) = self.channel_counts.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("modality {m} has zero channels")));
        }
        if self.bottleneck == 0 {
            return Err(Error::Config("bottleneck must be at least 1".into()));
        }
        if self.gate_mask.len() != self.channel_counts.len() {
            return Err(Error::Config(format!(
                "gate mask has {} entries for {} modalities",
                self.gate_mask.len(),
                self.channel_counts.len()
            )));
        }
        if !(self.excitation_decay >= 0.0 && self.excitation_decay.is_finite()) {
            return Err(Error::Config(format!(
                "excitation decay must be a finite non-negative number, got {}",
                self.excitation_decay
            )));
        }
        Ok(())
    }
}

/// How [`MmtmState::new`] fills the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MmtmInit {
    /// Fan-in uniform weights, zero biases. Gates start near (not at) 1.
    #[default]
    Standard,
    /// Standard joint layer, all-zero excitation heads: identity at init.
    ZeroHeads,
    /// Every weight and bias random, for ablations.
    FullyRandom,
}

/// Weights `W, b` of the joint layer and `W_m, b_m` of each excitation head.
#[derive(Debug, Clone, PartialEq)]
pub struct MmtmState {
    pub joint: Linear,
    pub heads: Vec<Linear>,
}

impl MmtmState {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &MmtmConfig,
        init: MmtmInit,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let bias_init = match init {
            MmtmInit::FullyRandom => Init::FanInUniform,
            _ => Init::Zeros,
        };
        let head_init = match init {
            MmtmInit::ZeroHeads => Init::Zeros,
            _ => Init::FanInUniform,
        };
        let joint = Linear::new(
            store,
            &format!("{name}.joint"),
            config.total_channels(),
            config.bottleneck,
            Init::FanInUniform,
            bias_init,
            rng,
        )?;
        let heads = config
            .channel_counts
            .iter()
            .enumerate()
            .map(|(m, &c)| {
                let head_bias = if init == MmtmInit::ZeroHeads {
                    Init::Zeros
                } else {
                    bias_init
                };
                Linear::new(
                    store,
                    &format!("{name}.excite{m}"),
                    config.bottleneck,
                    c,
                    head_init,
                    head_bias,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { joint, heads })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.joint.ids().to_vec();
        for h in &self.heads {
            ids.extend(h.ids());
        }
        ids
    }

    pub fn param_count(&self) -> usize {
        self.joint.param_count() + self.heads.iter().map(Linear::param_count).sum::<usize>()
    }

    fn check(&self, config: &MmtmConfig) -> Result<()> {
        let consistent = self.joint.in_dim == config.total_channels()
            && self.joint.out_dim == config.bottleneck
            && self.heads.len() == config.num_modalities()
            && self
                .heads
                .iter()
                .zip(&config.channel_counts)
                .all(|(h, &c)| h.in_dim == config.bottleneck && h.out_dim == c);
        if consistent {
            Ok(())
        } else {
            Err(Error::Config(
                "MMTM state does not match its configuration".into(),
            ))
        }
    }
}

fn check_channels(tape: &Tape, features: &[Var], config: &MmtmConfig) -> Result<()> {
    if features.len() != config.num_modalities() {
        return Err(dim_err(format!(
            "expected {} modalities, got {}",
            config.num_modalities(),
            features.len()
        )));
    }
    for (m, (&f, &c)) in features.iter().zip(&config.channel_counts).enumerate() {
        let got = tape.value(f).channels();
        if got != c {
            return Err(dim_err(format!(
                "modality {m}: expected {c} channels, got shape {:?}",
                tape.shape(f)
            )));
        }
    }
    Ok(())
}

/// Global average over all non-channel axes of every modality.
pub fn squeeze(tape: &mut Tape, features: &[Var], config: &MmtmConfig) -> Result<Vec<Var>> {
    check_channels(tape, features, config)?;
    Ok(features
        .iter()
        .map(|&f| tape.mean_over_non_channel(f))
        .collect())
}

/// `Z = W [S_1, ..., S_K] + b`.
pub fn joint(
    tape: &mut Tape,
    params: &Bound,
    squeezed: &[Var],
    state: &MmtmState,
    config: &MmtmConfig,
) -> Result<Var> {
    state.check(config)?;
    let s = tape.concat_channels(squeezed)?;
    if tape.shape(s) != [config.total_channels()] {
        return Err(Error::Config(format!(
            "squeezed descriptors have shape {:?}, joint layer expects [{}]",
            tape.shape(s),
            config.total_channels()
        )));
    }
    let z = state.joint.forward(tape, params, s)?;
    Ok(if config.joint_relu { tape.relu(z) } else { z })
}

/// `E_m = W_m Z + b_m` for every modality.
pub fn excite(tape: &mut Tape, params: &Bound, z: Var, state: &MmtmState) -> Result<Vec<Var>> {
    let cz = state.joint.out_dim;
    if tape.shape(z) != [cz] {
        return Err(Error::Config(format!(
            "joint representation has shape {:?}, heads expect [{cz}]",
            tape.shape(z)
        )));
    }
    state
        .heads
        .iter()
        .map(|h| h.forward(tape, params, z))
        .collect()
}

/// `2 * sigmoid(E)`.
pub fn gate_coefficients(tape: &mut Tape, excitation: Var) -> Var {
    let s = tape.sigmoid(excitation);
    tape.scale(s, 2.0)
}

/// Recalibrates each gated modality by `2 * sigmoid(E_m)` broadcast over its
/// non-channel positions. Masked-off modalities pass through untouched.
pub fn gate(
    tape: &mut Tape,
    features: &[Var],
    excitations: &[Var],
    gate_mask: &[bool],
) -> Result<Vec<Var>> {
    if features.len() != excitations.len() || features.len() != gate_mask.len() {
        return Err(dim_err(format!(
            "gate: {} features, {} excitations, {} mask entries",
            features.len(),
            excitations.len(),
            gate_mask.len()
        )));
    }
    features
        .iter()
        .zip(excitations)
        .zip(gate_mask)
        .map(|((&f, &e), &on)| {
            if on {
                let g = gate_coefficients(tape, e);
                tape.channelwise_mul(g, f)
            } else {
                Ok(f)
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MmtmOutput {
    pub outputs: Vec<Var>,
    pub excitations: Vec<Var>,
}

/// Squeeze, joint, excite, gate.
pub fn mmtm_forward(
    tape: &mut Tape,
    params: &Bound,
    features: &[Var],
    config: &MmtmConfig,
    state: &MmtmState,
) -> Result<MmtmOutput> {
    let squeezed = squeeze(tape, features, config)?;
    let z = joint(tape, params, &squeezed, state, config)?;
    let excitations = excite(tape, params, z, state)?;
    let outputs = gate(tape, features, &excitations, &config.gate_mask)?;
    Ok(MmtmOutput {
        outputs,
        excitations,
    })
}

/// `decay * sum_m ||E_m||^2` as a `[1]` node.
pub fn excitation_penalty(tape: &mut Tape, excitations: &[Var], decay: f64) -> Result<Var> {
    if decay.is_nan() || decay < 0.0 {
        return Err(Error::Config(format!(
            "excitation decay must be non-negative, got {decay}"
        )));
    }
    let mut total: Option<Var> = None;
    for &e in excitations {
        let sq = tape.sum_squares(e);
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("no excitations to penalize".into()))?;
    Ok(tape.scale(total, decay))
}

/// Eager evaluation of the penalty on plain tensors.
pub fn excitation_penalty_value(excitations: &[Tensor], decay: f64) -> f64 {
    decay
        * excitations
            .iter()
            .flat_map(|e| e.data())
            .map(|v| v * v)
            .sum::<f64>()
}

/// A self-contained module that owns its parameters, for use outside a
/// larger network.
#[derive(Debug, Clone)]
pub struct Mmtm {
    pub config: MmtmConfig,
    pub state: MmtmState,
    pub store: ParamStore,
}

impl Mmtm {
    pub fn new(config: MmtmConfig, init: MmtmInit, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let state = MmtmState::new(&mut store, "mmtm", &config, init, &mut rng)?;
        Ok(Self {
            config,
            state,
            store,
        })
    }

    pub fn param_count(&self) -> usize {
        self.state.param_count()
    }

    /// Recalibrated features, same shapes as the inputs.
    pub fn forward(&self, features: &[Tensor]) -> Result<Vec<Tensor>> {
        let (tape, out) = self.run(features)?;
        Ok(out.outputs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Excitation signals `E_m`.
    pub fn excitations(&self, features: &[Tensor]) -> Result<Vec<Tensor>> {
        let (tape, out) = self.run(features)?;
        Ok(out
            .excitations
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect())
    }

    fn run(&self, features: &[Tensor]) -> Result<(Tape, MmtmOutput)> {
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let inputs: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let out = mmtm_forward(&mut tape, &params, &inputs, &self.config, &self.state)?;
        Ok((tape, out))
    }

    pub fn weight(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }

    pub fn weight_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.store.get_mut(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(tape: &mut Tape, ts: &[Tensor]) -> Vec<Var> {
        ts.iter().map(|t| tape.constant(t.clone())).collect()
    }

    #[test]
    fn bottleneck_defaults() {
        assert_eq!(MmtmConfig::new(vec![4, 4]).unwrap().bottleneck, 2);
        assert_eq!(MmtmConfig::new(vec![8, 16]).unwrap().bottleneck, 6);
        assert_eq!(MmtmConfig::new(vec![1, 1]).unwrap().bottleneck, 1);
        assert_eq!(MmtmConfig::new(vec![3, 2, 2]).unwrap().bottleneck, 1);
    }

    #[test]
    fn config_rejects_invalid() {
        assert!(matches!(MmtmConfig::new(vec![4]), Err(Error::Config(_))));
        assert!(MmtmConfig::new(vec![4, 0]).is_err());
        let c = MmtmConfig::new(vec![4, 4]).unwrap();
        assert!(c.clone().with_bottleneck(0).is_err());
        assert!(c.clone().with_gate_mask(vec![true]).is_err());
        assert!(c.with_excitation_decay(-1.0).is_err());
    }

    #[test]
    fn squeeze_constants() {
        let config = MmtmConfig::new(vec![2, 4]).unwrap();
        let mut tape = Tape::new();
        let f = consts(
            &mut tape,
            &[
                Tensor::full(vec![2, 2, 2], 3.0).unwrap(),
                Tensor::full(vec![5, 4], -1.0).unwrap(),
            ],
        );
        let s = squeeze(&mut tape, &f, &config).unwrap();
        assert_eq!(tape.value(s[0]).data(), &[3.0, 3.0]);
        assert_eq!(tape.value(s[1]).data(), &[-1.0; 4]);
    }

    #[test]
    fn squeeze_three_spatial_dims() {
        let config = MmtmConfig::new(vec![8, 2]).unwrap();
        let mut tape = Tape::new();
        let f = consts(
            &mut tape,
            &[
                Tensor::ones(vec![2, 3, 4, 8]).unwrap(),
                Tensor::ones(vec![2]).unwrap(),
            ],
        );
        let s = squeeze(&mut tape, &f, &config).unwrap();
        assert_eq!(tape.shape(s[0]), &[8]);
    }

    #[test]
    fn squeeze_channel_mismatch_names_modality() {
        let config = MmtmConfig::new(vec![2, 3]).unwrap();
        let mut tape = Tape::new();
        let f = consts(
            &mut tape,
            &[
                Tensor::ones(vec![4, 2]).unwrap(),
                Tensor::ones(vec![4, 4]).unwrap(),
            ],
        );
        let err = squeeze(&mut tape, &f, &config).unwrap_err().to_string();
        assert!(err.contains("modality 1"), "{err}");
    }

    #[test]
    fn joint_with_zero_weights_is_bias() {
        let config = MmtmConfig::new(vec![4, 4]).unwrap();
        let mut m = Mmtm::new(config.clone(), MmtmInit::Standard, 1).unwrap();
        m.weight_mut(m.state.joint.weight).data_mut().fill(0.0);
        m.weight_mut(m.state.joint.bias).data_mut().fill(1.0);
        let mut tape = Tape::new();
        let p = m.store.bind_frozen(&mut tape);
        let s = consts(
            &mut tape,
            &[
                Tensor::vector(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
                Tensor::vector(&[5.0, 6.0, 7.0, 8.0]).unwrap(),
            ],
        );
        let z = joint(&mut tape, &p, &s, &m.state, &config).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, 1.0]);
    }

    #[test]
    fn joint_detects_state_mismatch() {
        let m = Mmtm::new(MmtmConfig::new(vec![4, 4]).unwrap(), MmtmInit::Standard, 1).unwrap();
        let other = MmtmConfig::new(vec![4, 8]).unwrap();
        let mut tape = Tape::new();
        let p = m.store.bind_frozen(&mut tape);
        let s = consts(&mut tape, &[Tensor::ones(vec![4]).unwrap(), Tensor::ones(vec![8]).unwrap()]);
        assert!(matches!(
            joint(&mut tape, &p, &s, &m.state, &other),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn excite_hand_matvec() {
        let config = MmtmConfig::new(vec![2, 6]).unwrap();
        assert_eq!(config.bottleneck, 2);
        let mut m = Mmtm::new(config, MmtmInit::Standard, 2).unwrap();
        let head = m.state.heads[0];
        m.weight_mut(head.weight)
            .data_mut()
            .copy_from_slice(&[2.0, 9.0, 0.0, 9.0]);
        m.weight_mut(head.bias).data_mut().copy_from_slice(&[0.0, 1.0]);
        let mut tape = Tape::new();
        let p = m.store.bind_frozen(&mut tape);
        let z = tape.constant(Tensor::vector(&[1.0, 0.0]).unwrap());
        let e = excite(&mut tape, &p, z, &m.state).unwrap();
        assert_eq!(tape.value(e[0]).data(), &[2.0, 1.0]);
    }

    #[test]
    fn excitation_heads_are_independent() {
        let config = MmtmConfig::new(vec![3, 5]).unwrap();
        let features = vec![
            Tensor::randn(vec![2, 2, 3], 1.0, &mut seeded_rng(4)).unwrap(),
            Tensor::randn(vec![5], 1.0, &mut seeded_rng(5)).unwrap(),
        ];
        let mut m = Mmtm::new(config, MmtmInit::FullyRandom, 3).unwrap();
        let before = m.excitations(&features).unwrap();
        let wa = m.state.heads[0].weight;
        m.weight_mut(wa).data_mut().iter_mut().for_each(|v| *v += 0.3);
        let after = m.excitations(&features).unwrap();
        assert_ne!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
    }

    #[test]
    fn zero_excitation_is_identity_gate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(vec![3, 2], 1.0, &mut seeded_rng(9)).unwrap());
        let e = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let out = gate(&mut tape, &[x], &[e], &[true]).unwrap();
        assert_eq!(tape.value(out[0]), tape.value(x));
    }

    #[test]
    fn gate_saturates_at_zero_and_two() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[1.5, -2.0]).unwrap());
        let e = tape.constant(Tensor::vector(&[50.0, -50.0]).unwrap());
        let out = gate(&mut tape, &[x], &[e], &[true]).unwrap();
        let y = tape.value(out[0]).data();
        assert!((y[0] - 3.0).abs() < 1e-12);
        assert!(y[1].abs() < 1e-12);
    }

    #[test]
    fn masked_modality_passes_through() {
        let features = vec![
            Tensor::randn(vec![3, 3, 4], 1.0, &mut seeded_rng(1)).unwrap(),
            Tensor::randn(vec![4], 1.0, &mut seeded_rng(2)).unwrap(),
        ];
        let config = MmtmConfig::new(vec![4, 4])
            .unwrap()
            .with_gate_mask(vec![true, false])
            .unwrap();
        let m = Mmtm::new(config, MmtmInit::FullyRandom, 7).unwrap();
        let out = m.forward(&features).unwrap();
        assert_ne!(out[0], features[0]);
        assert_eq!(out[1], features[1]);
        assert_eq!(m.excitations(&features).unwrap().len(), 2);
    }

    #[test]
    fn penalty_examples() {
        let e = [
            Tensor::vector(&[1.0, 1.0]).unwrap(),
            Tensor::vector(&[2.0]).unwrap(),
        ];
        assert_eq!(excitation_penalty_value(&e, 0.0), 0.0);
        assert_eq!(excitation_penalty_value(&e, 0.5), 3.0);
        let mut tape = Tape::new();
        let vars = consts(&mut tape, &e);
        let p = excitation_penalty(&mut tape, &vars, 0.5).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0]);
        assert!(excitation_penalty(&mut tape, &vars, -0.1).is_err());
    }

    #[test]
    fn closed_form_param_count() {
        assert_eq!(mmtm_param_count(&[4, 4], 2), 42);
        let m = Mmtm::new(MmtmConfig::new(vec![4, 4]).unwrap(), MmtmInit::Standard, 0).unwrap();
        assert_eq!(m.param_count(), 42);
        assert_eq!(m.store.num_scalars(), 42);
    }
}
