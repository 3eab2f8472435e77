//! Procedural stand-in for a face-aging database.
//!
//! Each identity owns a fixed rounded-rectangle glyph (color, position,
//! size, a contrasting marker dot, a background tone). Age acts through
//! deterministic transforms that are monotone in the age coordinate
//! `s = group + 0.3 * position_within_group`:
//!
//! * horizontal stripes across the glyph get denser (2 → ~7 cycles),
//! * a vertical brightness gradient over the whole image steepens,
//! * the glyph's corners sharpen (radius shrinks to zero),
//! * the glyph grows slightly and its color drifts toward grey.
//!
//! Gender shifts red against blue by ±20 levels. Pixels are rendered on
//! the 0..=255 integer grid and then normalized, so a P6 round trip is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{age_to_group, group_age_range, normalize, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{AGE_GROUPS, IMAGE_CHANNELS};
use crate::tensor::Tensor;

const S_MAX: f64 = AGE_GROUPS as f64 - 0.7;
const GENDER_SHIFT: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub identities: usize,
    pub per_identity: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 200,
            per_identity: 10,
            size: 32,
            seed: 0,
        }
    }
}

/// The fixed, age-independent appearance of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityFactors {
    pub color: [f64; 3],
    pub background: f64,
    pub center: (f64, f64),
    pub half: (f64, f64),
    pub marker: (f64, f64),
    pub gender: usize,
}

impl IdentityFactors {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        IdentityFactors {
            color: [
                rng.random_range(70.0..230.0),
                rng.random_range(70.0..230.0),
                rng.random_range(70.0..230.0),
            ],
            background: rng.random_range(15.0..60.0),
            center: (rng.random_range(0.4..0.6), rng.random_range(0.4..0.6)),
            half: (rng.random_range(0.2..0.3), rng.random_range(0.2..0.3)),
            marker: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            gender: rng.random_range(0..2),
        }
    }
}

/// Continuous, strictly group-separated age coordinate in `[0, 9.3]`.
fn age_coordinate(age: f64) -> Result<f64> {
    let g = age_to_group(age)?;
    let (lo, hi) = group_age_range(g)?;
    let frac = ((age - lo) / (hi - lo)).clamp(0.0, 1.0);
    Ok(g as f64 + 0.3 * frac)
}

fn rounded_rect_sd(px: f64, py: f64, half: (f64, f64), r: f64) -> f64 {
    let qx = px.abs() - (half.0 - r);
    let qy = py.abs() - (half.1 - r);
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0) - r
}

/// Renders one image in raw 0..=255 integer levels, channel-major.
pub fn render(f: &IdentityFactors, age: f64, gender: usize, size: usize) -> Result<Vec<f64>> {
    if size < 8 {
        return Err(Error::arg(format!("synthetic image size {size} must be >= 8")));
    }
    let s = age_coordinate(age)?;
    let t = s / S_MAX;
    let grow = 1.0 + 0.12 * t;
    let half = (f.half.0 * grow, f.half.1 * grow);
    let radius = half.0.min(half.1) * 0.95 * (1.0 - t);
    let freq = 2.0 + 0.55 * s;
    let slope = 14.0 * s;
    let grey = f.color.iter().sum::<f64>() / 3.0;
    let shift = if gender == 1 { GENDER_SHIFT } else { -GENDER_SHIFT };
    let mut glyph = [0.0; 3];
    for (c, g) in glyph.iter_mut().enumerate() {
        *g = f.color[c] + (grey - f.color[c]) * 0.45 * t;
    }
    glyph[0] += shift;
    glyph[2] -= shift;
    let marker = [255.0 - f.color[0], 255.0 - f.color[1], 255.0 - f.color[2]];
    let (mx, my) = (f.center.0 + f.marker.0 * half.0, f.center.1 + f.marker.1 * half.1);
    let px = size as f64;

    let mut out = vec![0.0; IMAGE_CHANNELS * size * size];
    for y in 0..size {
        let v = (y as f64 + 0.5) / px;
        let gradient = slope * (v - 0.5);
        let stripe = 1.0 - 0.3 * (0.5 + 0.5 * (std::f64::consts::TAU * freq * v).sin());
        for x in 0..size {
            let u = (x as f64 + 0.5) / px;
            let sd = rounded_rect_sd(u - f.center.0, v - f.center.1, half, radius) * px;
            let alpha = (0.5 - sd).clamp(0.0, 1.0);
            let md = (((u - mx).powi(2) + (v - my).powi(2)).sqrt() - 0.08) * px;
            let beta = (0.5 - md).clamp(0.0, 1.0) * alpha;
            for c in 0..IMAGE_CHANNELS {
                let fg = glyph[c] * stripe * (1.0 - beta) + marker[c] * beta;
                let val = alpha * fg + (1.0 - alpha) * f.background + gradient;
                out[(c * size + y) * size + x] = val.clamp(0.0, 255.0).round();
            }
        }
    }
    Ok(out)
}

/// Samples are ordered identity-major. Each identity's ages are stratified
/// across the ten groups (with a per-identity random offset), so ten
/// samples per identity cover every group exactly once.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<LabeledImage>> {
    if cfg.identities == 0 || cfg.per_identity == 0 {
        return Err(Error::arg("identity and per-identity counts must be >= 1"));
    }
    let mut out = Vec::with_capacity(cfg.identities * cfg.per_identity);
    for id in 0..cfg.identities {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(id as u64);
        let factors = IdentityFactors::sample(&mut rng);
        let offset: f64 = rng.random();
        for k in 0..cfg.per_identity {
            let g = (((k as f64 + offset) * AGE_GROUPS as f64 / cfg.per_identity as f64) as usize) % AGE_GROUPS;
            let (lo, hi) = group_age_range(g)?;
            let r = 1.0 - rng.random::<f64>();
            let age = if g == 0 { hi * r } else { lo + (hi - lo) * r };
            let raw = render(&factors, age, factors.gender, cfg.size)?;
            out.push(LabeledImage {
                pixels: Tensor::new(&[IMAGE_CHANNELS, cfg.size, cfg.size], normalize(&raw))?,
                identity: id,
                age,
                gender: factors.gender,
            });
        }
    }
    Ok(out)
}
