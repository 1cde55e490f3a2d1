//! Synthetic multimodal classification tasks.
//!
//! Every (modality, code) pair owns a fixed random prototype with unit RMS:
//! a smoothed random field for `[H, W, C]` modalities, a plain Gaussian
//! vector otherwise. A modality with `n` elements carrying code `c` is
//! `cue_snr / sqrt(n) * prototype[c] + noise_sigma * N(0, 1)`, so a matched
//! filter sees the same signal-to-noise ratio `cue_snr / noise_sigma` in every
//! modality whatever its size. A corrupted modality is pure `noise_sigma * N(0, 1)`
//! and has its flag set.
//!
//! * `independent`: every modality carries the label as its code, and each is
//!   corrupted independently with probability `corruption_prob`.
//! * `complementary`: one uniformly chosen modality always carries the label;
//!   each other modality is corrupted with probability `corruption_prob`.
//!   At `corruption_prob = 1` the cue lives in exactly one modality.
//! * `xor`: modality codes are uniform and their XOR is the label, so no
//!   modality alone says anything about it. Corruption as in complementary.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::params::{seeded_rng, SeededRng};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 5] = b"MMFZ1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossModalMode {
    Independent,
    Complementary,
    Xor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub shapes: Vec<Vec<usize>>,
    pub mode: CrossModalMode,
    pub corruption_prob: f64,
    pub noise_sigma: f64,
    /// Matched-filter signal-to-noise ratio of a cue at unit noise.
    pub cue_snr: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            shapes: vec![vec![12, 12, 1], vec![16]],
            mode: CrossModalMode::Complementary,
            corruption_prob: 0.3,
            noise_sigma: 1.0,
            cue_snr: 4.0,
            train_size: 4000,
            val_size: 1000,
            test_size: 1000,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    /// Two spatially aligned `[12, 12, 1]` modalities, otherwise the default.
    pub fn aligned() -> Self {
        Self {
            shapes: vec![vec![12, 12, 1], vec![12, 12, 1]],
            ..Self::default()
        }
    }

    pub fn xor() -> Self {
        Self {
            num_classes: 2,
            mode: CrossModalMode::Xor,
            corruption_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.shapes.is_empty() {
            return fail("at least one modality shape is required".into());
        }
        for (m, s) in self.shapes.iter().enumerate() {
            if s.is_empty() || s.contains(&0) {
                return fail(format!("modality {m}: invalid shape {s:?}"));
            }
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return fail(format!(
                "corruption_prob must lie in [0, 1], got {}",
                self.corruption_prob
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.cue_snr >= 0.0 && self.cue_snr.is_finite()) {
            return fail(format!("cue_snr must be >= 0, got {}", self.cue_snr));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return fail("train, val and test sizes must all be >= 1".into());
        }
        if self.mode == CrossModalMode::Xor {
            if self.shapes.len() < 2 {
                return fail("xor mode needs at least 2 modalities".into());
            }
            if !self.num_classes.is_power_of_two() {
                return fail(format!(
                    "xor mode needs a power-of-two class count, got {}",
                    self.num_classes
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: Vec<Tensor>,
    pub label: usize,
    pub corrupted: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.spec.shapes.len()
    }

    /// The same samples restricted to one modality, for unimodal baselines.
    pub fn single_modality(&self, m: usize) -> Result<Dataset> {
        if m >= self.num_modalities() {
            return Err(Error::Config(format!(
                "modality {m} out of range for {} modalities",
                self.num_modalities()
            )));
        }
        let pick = |s: &[Sample]| -> Vec<Sample> {
            s.iter()
                .map(|x| Sample {
                    inputs: vec![x.inputs[m].clone()],
                    label: x.label,
                    corrupted: vec![x.corrupted[m]],
                })
                .collect()
        };
        Ok(Dataset {
            spec: SyntheticTaskSpec {
                shapes: vec![self.spec.shapes[m].clone()],
                ..self.spec.clone()
            },
            train: pick(&self.train),
            val: pick(&self.val),
            test: pick(&self.test),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(DATASET_MAGIC, &serde_json::to_value(&self.spec)?)?;
        for split in [&self.train, &self.val, &self.test] {
            w.u64(split.len() as u64);
            for s in split {
                w.u32(s.label as u32);
                for (t, &c) in s.inputs.iter().zip(&s.corrupted) {
                    w.u8(c as u8);
                    w.tensor(t);
                }
            }
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, header) = Reader::open(bytes, DATASET_MAGIC)?;
        let spec: SyntheticTaskSpec = serde_json::from_value(header).map_err(|e| Error::Parse {
            offset: 17,
            message: format!("invalid dataset header: {e}"),
        })?;
        let k = spec.shapes.len();
        let mut splits = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.u64()? as usize;
            let mut samples = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let at = r.offset();
                let label = r.u32()? as usize;
                if label >= spec.num_classes {
                    return Err(Error::Parse {
                        offset: at,
                        message: format!("label {label} out of range"),
                    });
                }
                let mut inputs = Vec::with_capacity(k);
                let mut corrupted = Vec::with_capacity(k);
                for m in 0..k {
                    let flag = r.u8()?;
                    if flag > 1 {
                        return Err(r.error(format!("invalid corruption flag {flag}")));
                    }
                    let at = r.offset();
                    let t = r.tensor()?;
                    if t.shape() != spec.shapes[m].as_slice() {
                        return Err(Error::Parse {
                            offset: at,
                            message: format!(
                                "modality {m} tensor {:?} does not match header shape {:?}",
                                t.shape(),
                                spec.shapes[m]
                            ),
                        });
                    }
                    corrupted.push(flag == 1);
                    inputs.push(t);
                }
                samples.push(Sample {
                    inputs,
                    label,
                    corrupted,
                });
            }
            splits.push(samples);
        }
        r.finish()?;
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Dataset {
            spec,
            train,
            val,
            test,
        })
    }
}

fn normalize_rms(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

/// 3x3 box blur per channel with edge clamping.
fn blur(shape: &[usize], v: &[f64]) -> Vec<f64> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; v.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                        let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        acc += v[(ii * w + jj) * c + ch];
                    }
                }
                out[(i * w + j) * c + ch] = acc / 9.0;
            }
        }
    }
    out
}

fn prototype(shape: &[usize], rng: &mut SeededRng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    if shape.len() == 3 {
        v = blur(shape, &blur(shape, &v));
    }
    normalize_rms(&mut v);
    Tensor::new(shape.to_vec(), v)
}

fn noise(shape: &[usize], sigma: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), v)
}

/// Prototypes indexed `[modality][code]`.
pub fn prototypes(spec: &SyntheticTaskSpec) -> Result<Vec<Vec<Tensor>>> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    spec.shapes
        .iter()
        .map(|shape| {
            (0..spec.num_classes)
                .map(|_| prototype(shape, &mut rng))
                .collect()
        })
        .collect()
}

fn draw_sample(
    spec: &SyntheticTaskSpec,
    protos: &[Vec<Tensor>],
    rng: &mut SeededRng,
) -> Result<Sample> {
    let k = spec.shapes.len();
    let label = rng.gen_range(0..spec.num_classes);
    let codes: Vec<usize> = match spec.mode {
        CrossModalMode::Independent | CrossModalMode::Complementary => vec![label; k],
        CrossModalMode::Xor => {
            let mut codes: Vec<usize> = (0..k - 1)
                .map(|_| rng.gen_range(0..spec.num_classes))
                .collect();
            codes.push(codes.iter().fold(label, |acc, &c| acc ^ c));
            codes
        }
    };
    let anchor = match spec.mode {
        CrossModalMode::Independent => None,
        _ => Some(rng.gen_range(0..k)),
    };
    let corrupted: Vec<bool> = (0..k)
        .map(|m| Some(m) != anchor && rng.gen_bool(spec.corruption_prob))
        .collect();
    let mut inputs = Vec::with_capacity(k);
    for m in 0..k {
        let mut t = noise(&spec.shapes[m], spec.noise_sigma, rng)?;
        if !corrupted[m] {
            let p = protos[m][codes[m]].data();
            let amplitude = spec.cue_snr / (p.len() as f64).sqrt();
            for (x, &q) in t.data_mut().iter_mut().zip(p) {
                *x += amplitude * q;
            }
        }
        inputs.push(t);
    }
    Ok(Sample {
        inputs,
        label,
        corrupted,
    })
}

/// Generates train, val and test splits; a pure function of `spec`.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    let protos = prototypes(spec)?;
    let mut rng = seeded_rng(spec.seed.wrapping_add(1));
    let mut draw = |n: usize| -> Result<Vec<Sample>> {
        (0..n).map(|_| draw_sample(spec, &protos, &mut rng)).collect()
    };
    let train = draw(spec.train_size)?;
    let val = draw(spec.val_size)?;
    let test = draw(spec.test_size)?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: CrossModalMode, p: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            mode,
            corruption_prob: p,
            train_size: 50,
            val_size: 20,
            test_size: 20,
            num_classes: if mode == CrossModalMode::Xor { 2 } else { 4 },
            ..SyntheticTaskSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let spec = small(CrossModalMode::Complementary, 0.3);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticTaskSpec { seed: 1, ..spec };
        assert_ne!(generate(&other).unwrap().train, generate(&small(CrossModalMode::Complementary, 0.3)).unwrap().train);
    }

    fn p_len(spec: &SyntheticTaskSpec, m: usize) -> usize {
        spec.shapes[m].iter().product()
    }

    #[test]
    fn flags_match_blanked_tensors() {
        let spec = SyntheticTaskSpec {
            noise_sigma: 0.0,
            ..small(CrossModalMode::Complementary, 0.6)
        };
        let protos = prototypes(&spec).unwrap();
        let ds = generate(&spec).unwrap();
        let mut blanked = 0;
        for s in &ds.train {
            assert!(s.corrupted.contains(&false));
            for m in 0..2 {
                if s.corrupted[m] {
                    blanked += 1;
                    assert!(s.inputs[m].data().iter().all(|&x| x == 0.0));
                } else {
                    let a = spec.cue_snr / (p_len(&spec, m) as f64).sqrt();
                    let cue = protos[m][s.label].map(|x| a * x);
                    assert_eq!(s.inputs[m], cue);
                }
            }
        }
        assert!(blanked > 0);
    }

    #[test]
    fn full_corruption_leaves_one_cue() {
        let ds = generate(&small(CrossModalMode::Complementary, 1.0)).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            assert_eq!(s.corrupted.iter().filter(|&&c| c).count(), 1);
        }
    }

    #[test]
    fn impossible_specs_are_rejected() {
        let mut spec = small(CrossModalMode::Xor, 0.0);
        spec.shapes.truncate(1);
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let spec = SyntheticTaskSpec {
            num_classes: 3,
            ..small(CrossModalMode::Xor, 0.0)
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let spec = SyntheticTaskSpec {
            corruption_prob: 1.5,
            ..SyntheticTaskSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn round_trip_and_truncation() {
        let ds = generate(&small(CrossModalMode::Independent, 0.2)).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        let cut = &bytes[..bytes.len() - 11];
        assert!(matches!(Dataset::from_bytes(cut), Err(Error::Parse { .. })));
        let mut v = bytes.clone();
        v[5..9].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Dataset::from_bytes(&v), Err(Error::Version { found: 2, expected: 1 })));
    }
}
