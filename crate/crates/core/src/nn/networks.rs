//! Representor R, generator G, face discriminator D_face, latent
//! discriminator D_enc, the age-group estimator, and the identity
//! embedding network used for the frozen feature map and the verifier.

use std::cell::RefCell;

use rand::Rng;

use super::condition::{condition_planes, ConditionVector, AGE_GROUPS, COND_DIM};
use super::layers::{prefixed, Conv2d, ConvTranspose2d, Linear, Mode, Module};
use super::profile::ScaleProfile;
use crate::error::{Error, Result};
use crate::tensor::{deconv_output_padding, Param, SpectralNormState, Tape, Var};

pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 2;
pub const IMAGE_CHANNELS: usize = 3;
/// Hidden width of the latent discriminator.
pub const DENC_HIDDEN: usize = 64;
pub const DENC_LAYERS: usize = 3;
pub const ESTIMATOR_BLOCKS: usize = 4;
pub const EMBED_BLOCKS: usize = 3;
pub const EMBED_DIM: usize = 64;

fn check_image(op: &'static str, shape: &[usize], size: Option<usize>) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::Shape {
            op,
            shape: shape.to_vec(),
            reason: "expected N×3×H×W".into(),
        });
    }
    if shape[1] != IMAGE_CHANNELS {
        return Err(Error::dim(op, "channels (axis 1)", IMAGE_CHANNELS, shape[1]));
    }
    if let Some(s) = size {
        if shape[2] != s {
            return Err(Error::dim(op, "height (axis 2)", s, shape[2]));
        }
        if shape[3] != s {
            return Err(Error::dim(op, "width (axis 3)", s, shape[3]));
        }
    }
    Ok(())
}

fn conv_stack<R: Rng + ?Sized>(in_c: usize, widths: &[usize], spectral: bool, rng: &mut R) -> Vec<Conv2d> {
    let mut c = in_c;
    widths
        .iter()
        .map(|&w| {
            let conv = Conv2d::new(c, w, KERNEL, STRIDE, PADDING, spectral, rng);
            c = w;
            conv
        })
        .collect()
}

fn stack_params(name: &str, blocks: &[Conv2d]) -> Vec<(String, Param)> {
    blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| prefixed(&format!("{name}{i}"), b.params()))
        .collect()
}

fn stack_spectral<'a>(name: &str, blocks: &'a [Conv2d]) -> Vec<(String, &'a RefCell<SpectralNormState>)> {
    blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| {
            b.spectral_states()
                .into_iter()
                .map(move |(n, s)| (format!("{name}{i}.{n}"), s))
        })
        .collect()
}

/// Encoder from an image to the latent code `enc ∈ (-1, 1)^enc_dim`.
#[derive(Debug)]
pub struct Representor {
    image_size: usize,
    pub blocks: Vec<Conv2d>,
    pub fc: Linear,
}

impl Representor {
    pub fn new<R: Rng + ?Sized>(profile: &ScaleProfile, rng: &mut R) -> Self {
        let widths: Vec<usize> = (0..profile.repr_blocks).map(|i| profile.channels(i)).collect();
        let blocks = conv_stack(IMAGE_CHANNELS, &widths, true, rng);
        let s = profile.repr_spatial();
        let fc = Linear::new(widths[widths.len() - 1] * s * s, profile.enc_dim, rng);
        Representor {
            image_size: profile.image_size,
            blocks,
            fc,
        }
    }

    /// Spatial size of every feature map on the way down, including the input.
    pub fn feature_sizes(&self) -> Vec<usize> {
        (0..=self.blocks.len()).map(|i| self.image_size >> i).collect()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        check_image("representor", &x.shape(), Some(self.image_size))?;
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h, mode)?.elu();
        }
        Ok(self.fc.forward(tape, h.flatten())?.tanh())
    }
}

impl Module for Representor {
    fn params(&self) -> Vec<(String, Param)> {
        let mut p = stack_params("conv", &self.blocks);
        p.extend(prefixed("fc", self.fc.params()));
        p
    }

    fn spectral_states(&self) -> Vec<(String, &RefCell<SpectralNormState>)> {
        stack_spectral("conv", &self.blocks)
    }
}

/// Decoder from `[enc ⧺ age one-hot ⧺ gender one-hot]` to an image in (-1, 1).
#[derive(Debug)]
pub struct Generator {
    enc_dim: usize,
    seed_channels: usize,
    seed_spatial: usize,
    pub fc: Linear,
    pub blocks: Vec<ConvTranspose2d>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(profile: &ScaleProfile, rng: &mut R) -> Self {
        let n = profile.gen_blocks;
        let seed_channels = profile.channels(n - 1);
        let seed_spatial = profile.seed_spatial();
        let fc = Linear::new(
            profile.enc_dim + COND_DIM,
            seed_channels * seed_spatial * seed_spatial,
            rng,
        );
        let mut blocks = Vec::with_capacity(n);
        let mut c = seed_channels;
        let mut s = seed_spatial;
        for i in 0..n {
            let out_c = if i + 1 == n {
                IMAGE_CHANNELS
            } else {
                profile.channels(n - 2 - i)
            };
            let op = deconv_output_padding(s, KERNEL, STRIDE, PADDING, 2 * s).expect("doubling is reachable");
            blocks.push(ConvTranspose2d::new(c, out_c, KERNEL, STRIDE, PADDING, op, rng));
            c = out_c;
            s *= 2;
        }
        Generator {
            enc_dim: profile.enc_dim,
            seed_channels,
            seed_spatial,
            fc,
            blocks,
        }
    }

    /// `cond` is the `N × 12` one-hot matrix.
    pub fn forward<'t>(&self, tape: &'t Tape, enc: Var<'t>, cond: Var<'t>) -> Result<Var<'t>> {
        let es = enc.shape();
        if es.len() != 2 || es[1] != self.enc_dim {
            return Err(Error::dim("generator", "enc width (axis 1)", self.enc_dim, *es.last().unwrap_or(&0)));
        }
        let cs = cond.shape();
        if cs.len() != 2 || cs[1] != COND_DIM {
            return Err(Error::dim("generator", "condition width (axis 1)", COND_DIM, *cs.last().unwrap_or(&0)));
        }
        let z = Var::concat(&[enc, cond])?;
        let h = self.fc.forward(tape, z)?.elu();
        let mut h = h.reshape(&[es[0], self.seed_channels, self.seed_spatial, self.seed_spatial])?;
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(tape, h)?;
            h = if i == last { h.tanh() } else { h.elu() };
        }
        Ok(h)
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<(String, Param)> {
        let mut p = prefixed("fc", self.fc.params());
        for (i, b) in self.blocks.iter().enumerate() {
            p.extend(prefixed(&format!("deconv{i}"), b.params()));
        }
        p
    }
}

/// Conditional image discriminator. The condition enters as twelve
/// constant planes concatenated to the RGB channels.
#[derive(Debug)]
pub struct FaceDiscriminator {
    image_size: usize,
    pub blocks: Vec<Conv2d>,
    pub fc: Linear,
}

impl FaceDiscriminator {
    pub fn new<R: Rng + ?Sized>(profile: &ScaleProfile, rng: &mut R) -> Self {
        let widths: Vec<usize> = (0..profile.dface_blocks).map(|i| profile.channels(i)).collect();
        let blocks = conv_stack(IMAGE_CHANNELS + COND_DIM, &widths, true, rng);
        let s = profile.dface_spatial();
        let fc = Linear::new(widths[widths.len() - 1] * s * s, 1, rng);
        FaceDiscriminator {
            image_size: profile.image_size,
            blocks,
            fc,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.blocks[0].weight.borrow().shape()[1]
    }

    /// Realness in (0, 1), shape `N × 1`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        conds: &[ConditionVector],
        mode: Mode,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        check_image("dface", &shape, Some(self.image_size))?;
        if conds.len() != shape[0] {
            return Err(Error::dim("dface", "condition count (axis 0)", shape[0], conds.len()));
        }
        let planes = tape.constant(condition_planes(conds, shape[2], shape[3]));
        let mut h = Var::concat(&[x, planes])?;
        for b in &self.blocks {
            h = b.forward(tape, h, mode)?.elu();
        }
        Ok(self.fc.forward(tape, h.flatten())?.sigmoid())
    }
}

impl Module for FaceDiscriminator {
    fn params(&self) -> Vec<(String, Param)> {
        let mut p = stack_params("conv", &self.blocks);
        p.extend(prefixed("fc", self.fc.params()));
        p
    }

    fn spectral_states(&self) -> Vec<(String, &RefCell<SpectralNormState>)> {
        stack_spectral("conv", &self.blocks)
    }
}

/// Scores whether a latent code looks like a draw from Uniform[-1, 1]^d.
#[derive(Debug)]
pub struct LatentDiscriminator {
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

impl LatentDiscriminator {
    pub fn new<R: Rng + ?Sized>(profile: &ScaleProfile, rng: &mut R) -> Self {
        let mut inp = profile.enc_dim;
        let hidden = (0..DENC_LAYERS)
            .map(|_| {
                let l = Linear::new(inp, DENC_HIDDEN, rng);
                inp = DENC_HIDDEN;
                l
            })
            .collect();
        LatentDiscriminator {
            hidden,
            out: Linear::new(DENC_HIDDEN, 1, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, code: Var<'t>) -> Result<Var<'t>> {
        let want = self.hidden[0].in_features();
        let s = code.shape();
        if s.len() != 2 || s[1] != want {
            return Err(Error::dim("denc", "code width (axis 1)", want, *s.last().unwrap_or(&0)));
        }
        let mut h = code;
        for l in &self.hidden {
            h = l.forward(tape, h)?.elu();
        }
        Ok(self.out.forward(tape, h)?.sigmoid())
    }
}

impl Module for LatentDiscriminator {
    fn params(&self) -> Vec<(String, Param)> {
        let mut p = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            p.extend(prefixed(&format!("fc{i}"), l.params()));
        }
        p.extend(prefixed("out", self.out.params()));
        p
    }
}

/// Conv trunk → adaptive average pool to 1×1 → 10 age-group logits.
/// Accepts any input of at least 8×8.
#[derive(Debug)]
pub struct AgeEstimator {
    pub blocks: Vec<Conv2d>,
    pub fc: Linear,
}

impl AgeEstimator {
    pub fn new<R: Rng + ?Sized>(profile: &ScaleProfile, rng: &mut R) -> Self {
        let widths: Vec<usize> = (0..ESTIMATOR_BLOCKS).map(|i| profile.channels(i)).collect();
        let blocks = conv_stack(IMAGE_CHANNELS, &widths, false, rng);
        let fc = Linear::new(widths[ESTIMATOR_BLOCKS - 1], AGE_GROUPS, rng);
        AgeEstimator { blocks, fc }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        check_image("age_estimator", &shape, None)?;
        if shape[2] < 8 || shape[3] < 8 {
            return Err(Error::dim("age_estimator", "spatial (minimum)", 8, shape[2].min(shape[3])));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h, Mode::Eval)?.elu();
        }
        self.fc.forward(tape, h.adaptive_avg_pool2d(1, 1)?.flatten())
    }
}

impl Module for AgeEstimator {
    fn params(&self) -> Vec<(String, Param)> {
        let mut p = stack_params("conv", &self.blocks);
        p.extend(prefixed("fc", self.fc.params()));
        p
    }
}

/// Identity embedding network: conv trunk → pool to 4×4 → linear
/// embedding. A classification head over training identities is attached
/// only for pretraining.
#[derive(Debug)]
pub struct EmbeddingNet {
    pub blocks: Vec<Conv2d>,
    pub embed: Linear,
    pub head: Linear,
}

impl EmbeddingNet {
    pub fn new<R: Rng + ?Sized>(profile: &ScaleProfile, classes: usize, rng: &mut R) -> Self {
        let widths: Vec<usize> = (0..EMBED_BLOCKS).map(|i| profile.channels(i)).collect();
        let blocks = conv_stack(IMAGE_CHANNELS, &widths, false, rng);
        let embed = Linear::new(widths[EMBED_BLOCKS - 1] * 16, EMBED_DIM, rng);
        let head = Linear::new(EMBED_DIM, classes.max(1), rng);
        EmbeddingNet { blocks, embed, head }
    }

    pub fn classes(&self) -> usize {
        self.head.weight.borrow().rows()
    }

    pub fn embed<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        check_image("embedding", &x.shape(), None)?;
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h, Mode::Eval)?.elu();
        }
        let s = h.shape();
        if s[2] < 4 || s[3] < 4 {
            return Err(Error::dim("embedding", "spatial after trunk (minimum)", 4, s[2].min(s[3])));
        }
        self.embed.forward(tape, h.adaptive_avg_pool2d(4, 4)?.flatten())
    }

    pub fn classify<'t>(&self, tape: &'t Tape, emb: Var<'t>) -> Result<Var<'t>> {
        self.head.forward(tape, emb.elu())
    }
}

impl Module for EmbeddingNet {
    fn params(&self) -> Vec<(String, Param)> {
        let mut p = stack_params("conv", &self.blocks);
        p.extend(prefixed("embed", self.embed.params()));
        p.extend(prefixed("head", self.head.params()));
        p
    }
}
