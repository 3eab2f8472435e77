//! Age binning, label encoding, pixel normalization, the synthetic
//! factor-controlled dataset and its on-disk cache.

mod store;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use store::{read_dataset, read_ppm, sha256_hex, write_dataset, write_ppm, DatasetManifest, IndexRow, INDEX_FILE, MANIFEST_FILE};
pub use synth::{generate_synthetic, render, IdentityFactors, SynthConfig};

use crate::error::{Error, Result};
use crate::nn::{ConditionVector, AGE_GROUPS};
use crate::tensor::Tensor;

/// Inclusive upper age bound of groups 0..=8; group 9 is everything above 70.
pub const GROUP_UPPER_BOUNDS: [f64; AGE_GROUPS - 1] = [5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0];

/// Maps an age in years onto one of the ten groups
/// `0-5, 6-10, 11-15, 16-20, 21-30, 31-40, 41-50, 51-60, 61-70, >70`.
/// Upper endpoints are inclusive: 20 is group 3, 20.5 is group 4.
pub fn age_to_group(age_years: f64) -> Result<usize> {
    if age_years.is_nan() || age_years < 0.0 {
        return Err(Error::arg(format!("age {age_years} must be a non-negative number")));
    }
    Ok(GROUP_UPPER_BOUNDS
        .iter()
        .position(|&ub| age_years <= ub)
        .unwrap_or(AGE_GROUPS - 1))
}

/// Half-open age interval `(lo, hi]` covered by `group` (group 0 includes 0).
/// The open-ended last group is capped at 85 for sampling purposes.
pub fn group_age_range(group: usize) -> Result<(f64, f64)> {
    if group >= AGE_GROUPS {
        return Err(Error::arg(format!("age group {group} outside 0..{AGE_GROUPS}")));
    }
    let lo = if group == 0 { 0.0 } else { GROUP_UPPER_BOUNDS[group - 1] };
    let hi = GROUP_UPPER_BOUNDS.get(group).copied().unwrap_or(85.0);
    Ok((lo, hi))
}

pub fn encode_condition(group: usize, gender: usize) -> Result<ConditionVector> {
    ConditionVector::new(group, gender)
}

/// `x / 127.5 - 1`. Values outside [0, 255] are clamped and logged.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let mut clamped = 0usize;
    let out = raw
        .iter()
        .map(|&r| {
            let c = if r.is_nan() { 0.0 } else { r.clamp(0.0, 255.0) };
            if c != r {
                clamped += 1;
            }
            c / 127.5 - 1.0
        })
        .collect();
    if clamped > 0 {
        log::warn!("normalize: clamped {clamped} raw values into [0, 255]");
    }
    out
}

/// Inverse of [`normalize`]: `(x + 1) * 127.5`, clamped to [0, 255].
pub fn denormalize(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| ((v + 1.0) * 127.5).clamp(0.0, 255.0)).collect()
}

/// Denormalizes and rounds to bytes.
pub fn to_bytes(x: &[f64]) -> Vec<u8> {
    denormalize(x).into_iter().map(|v| v.round() as u8).collect()
}

/// One sample: `3 × S × S` pixels in [-1, 1] plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub identity: usize,
    pub age: f64,
    pub gender: usize,
}

impl LabeledImage {
    pub fn group(&self) -> usize {
        age_to_group(self.age).expect("dataset ages are validated on construction")
    }

    pub fn condition(&self) -> ConditionVector {
        ConditionVector::new(self.group(), self.gender).expect("labels validated")
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Stacks the selected samples into an `N × 3 × S × S` batch.
pub fn stack(samples: &[LabeledImage], idx: &[usize]) -> Result<Tensor> {
    let first = idx
        .first()
        .map(|&i| &samples[i])
        .ok_or_else(|| Error::arg("cannot stack an empty selection"))?;
    let shape = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * first.pixels.numel());
    for &i in idx {
        let p = &samples[i].pixels;
        if p.shape() != shape.as_slice() {
            return Err(Error::dim("stack", "sample shape", shape.iter().product(), p.numel()));
        }
        data.extend_from_slice(p.data());
    }
    let mut full = vec![idx.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Shuffled mini-batches of sample indices for one epoch. The order is a
/// pure function of `seed`; the trailing partial batch is dropped.
pub fn batch_iterator(len: usize, batch_size: usize, seed: u64) -> Result<impl Iterator<Item = Vec<usize>>> {
    if len == 0 {
        return Err(Error::arg("batch_iterator: empty dataset"));
    }
    if batch_size == 0 || batch_size > len {
        return Err(Error::arg(format!(
            "batch_iterator: batch size {batch_size} must be in 1..={len}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let batches = len / batch_size;
    Ok((0..batches).map(move |b| order[b * batch_size..(b + 1) * batch_size].to_vec()))
}

/// Identities whose id is congruent to 4 mod 5 are held out, giving a
/// disjoint 80/20 split by identity.
pub fn is_eval_identity(identity: usize) -> bool {
    identity % 5 == 4
}

pub fn split_by_identity(samples: Vec<LabeledImage>) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    samples.into_iter().partition(|s| !is_eval_identity(s.identity))
}

/// Distinct identity ids in first-appearance order.
pub fn identities(samples: &[LabeledImage]) -> Vec<usize> {
    let mut seen = std::collections::BTreeSet::new();
    samples.iter().map(|s| s.identity).filter(|i| seen.insert(*i)).collect()
}

/// Warns about age groups that have no samples.
pub fn missing_groups(samples: &[LabeledImage]) -> Vec<usize> {
    let mut present = [false; AGE_GROUPS];
    samples.iter().for_each(|s| present[s.group()] = true);
    (0..AGE_GROUPS).filter(|&g| !present[g]).collect()
}
