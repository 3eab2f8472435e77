//! The five networks, their layer building blocks, conditioning, and the
//! checkpoint format.

pub mod checkpoint;
mod condition;
mod layers;
mod networks;
mod profile;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use condition::{condition_matrix, condition_planes, ConditionVector, AGE_GROUPS, COND_DIM, GENDERS};
pub use layers::{Conv2d, ConvTranspose2d, Linear, Mode, Module};
pub use networks::{
    AgeEstimator, EmbeddingNet, FaceDiscriminator, Generator, LatentDiscriminator, Representor, EMBED_DIM,
    IMAGE_CHANNELS,
};
pub use profile::ScaleProfile;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Images are pushed through networks in chunks of this many at inference.
pub const INFERENCE_CHUNK: usize = 64;

/// Parameters and spectral-norm buffers of `m`, names prefixed with `prefix`.
pub fn module_state(prefix: &str, m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = m
        .params()
        .into_iter()
        .map(|(n, p)| (format!("{prefix}.{n}"), p.snapshot()))
        .collect();
    for (n, st) in m.spectral_states() {
        let st = st.borrow();
        out.push((format!("{prefix}.{n}.u"), Tensor::new(&[st.u.len()], st.u.clone()).unwrap()));
        out.push((format!("{prefix}.{n}.v"), Tensor::new(&[st.v.len()], st.v.clone()).unwrap()));
        out.push((format!("{prefix}.{n}.sigma"), Tensor::scalar(st.sigma)));
    }
    out
}

fn load_module_from(prefix: &str, m: &dyn Module, map: &BTreeMap<String, Tensor>) -> Result<()> {
    let get = |name: String| {
        map.get(&name).ok_or(Error::CheckpointTensor {
            name,
            reason: "missing".into(),
        })
    };
    for (n, p) in m.params() {
        let name = format!("{prefix}.{n}");
        p.assign(get(name.clone())?).map_err(|e| Error::CheckpointTensor {
            name,
            reason: e.to_string(),
        })?;
    }
    for (n, st) in m.spectral_states() {
        let mut st = st.borrow_mut();
        st.u = get(format!("{prefix}.{n}.u"))?.data().to_vec();
        st.v = get(format!("{prefix}.{n}.v"))?.data().to_vec();
        st.sigma = get(format!("{prefix}.{n}.sigma"))?.data()[0];
    }
    Ok(())
}

fn expected_shapes(state: &[(String, Tensor)]) -> Vec<(String, Vec<usize>)> {
    state.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
}

/// Restores a single module from a tensor table written by [`module_state`].
pub fn load_module_state(prefix: &str, m: &dyn Module, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let map = checkpoint::match_table(&expected_shapes(&module_state(prefix, m)), tensors)?;
    load_module_from(prefix, m, &map)
}

fn profile_tensor(p: &ScaleProfile) -> Tensor {
    let v = [
        p.image_size,
        p.enc_dim,
        p.repr_blocks,
        p.gen_blocks,
        p.dface_blocks,
        p.base_channels,
    ];
    Tensor::new(&[6], v.iter().map(|&x| x as f64).collect()).unwrap()
}

/// The five cooperating networks of one model.
#[derive(Debug)]
pub struct AgrGan {
    pub profile: ScaleProfile,
    pub representor: Representor,
    pub generator: Generator,
    pub dface: FaceDiscriminator,
    pub denc: LatentDiscriminator,
    pub estimator: AgeEstimator,
}

impl AgrGan {
    pub fn new(profile: ScaleProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(AgrGan {
            profile,
            representor: Representor::new(&profile, &mut rng),
            generator: Generator::new(&profile, &mut rng),
            dface: FaceDiscriminator::new(&profile, &mut rng),
            denc: LatentDiscriminator::new(&profile, &mut rng),
            estimator: AgeEstimator::new(&profile, &mut rng),
        })
    }

    pub fn modules(&self) -> [(&'static str, &dyn Module); 5] {
        [
            ("representor", &self.representor),
            ("generator", &self.generator),
            ("dface", &self.dface),
            ("denc", &self.denc),
            ("estimator", &self.estimator),
        ]
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, m) in self.modules() {
            out.extend(module_state(name, m));
        }
        out.push(("meta.profile".into(), profile_tensor(&self.profile)));
        out
    }

    pub fn load_state(&self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let map = checkpoint::match_table(&expected_shapes(&self.state()), tensors)?;
        if map["meta.profile"] != profile_tensor(&self.profile) {
            return Err(Error::CheckpointTensor {
                name: "meta.profile".into(),
                reason: format!("checkpoint profile {:?} differs from {:?}", map["meta.profile"].data(), self.profile),
            });
        }
        for (name, m) in self.modules() {
            load_module_from(name, m, &map)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.state())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.state())
    }

    /// Loads a checkpoint written for `profile`.
    pub fn load(path: &Path, profile: ScaleProfile) -> Result<Self> {
        let model = AgrGan::new(profile, 0)?;
        model.load_state(checkpoint::load(path)?)?;
        Ok(model)
    }

    /// `R(x)` in eval mode.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        map_chunks(images, |chunk| {
            let tape = Tape::new();
            let x = tape.constant(chunk);
            let enc = self.representor.forward(&tape, x, Mode::Eval)?;
            let v = enc.value().clone();
            Ok(v)
        })
    }

    /// `G(R(x), a, g)` in eval mode: one output per input image.
    pub fn transform(&self, images: &Tensor, conds: &[ConditionVector]) -> Result<Tensor> {
        if conds.len() != images.rows() {
            return Err(Error::dim("transform", "condition count (axis 0)", images.rows(), conds.len()));
        }
        let mut offset = 0;
        map_chunks(images, |chunk| {
            let n = chunk.rows();
            let tape = Tape::new();
            let x = tape.constant(chunk);
            let enc = self.representor.forward(&tape, x, Mode::Eval)?;
            let c = tape.constant(condition_matrix(&conds[offset..offset + n]));
            offset += n;
            let out = self.generator.forward(&tape, enc, c)?;
            let v = out.value().clone();
            Ok(v)
        })
    }

    /// Generates from precomputed latent codes.
    pub fn generate(&self, codes: &Tensor, conds: &[ConditionVector]) -> Result<Tensor> {
        if conds.len() != codes.rows() {
            return Err(Error::dim("generate", "condition count (axis 0)", codes.rows(), conds.len()));
        }
        let mut offset = 0;
        map_chunks(codes, |chunk| {
            let n = chunk.rows();
            let tape = Tape::new();
            let enc = tape.constant(chunk);
            let c = tape.constant(condition_matrix(&conds[offset..offset + n]));
            offset += n;
            let out = self.generator.forward(&tape, enc, c)?;
            let v = out.value().clone();
            Ok(v)
        })
    }
}

/// Splits `input` along axis 0 into chunks, applies `f`, and stacks the results.
pub fn map_chunks(input: &Tensor, mut f: impl FnMut(Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = input.rows();
    let per = input.cols();
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut start = 0;
    while start < n {
        let end = (start + INFERENCE_CHUNK).min(n);
        let mut s = input.shape().to_vec();
        s[0] = end - start;
        let chunk = Tensor::new(&s, input.data()[start * per..end * per].to_vec())?;
        let out = f(chunk)?;
        if shape.is_none() {
            shape = Some(out.shape().to_vec());
        }
        data.extend_from_slice(out.data());
        start = end;
    }
    let mut s = shape.ok_or_else(|| Error::arg("empty batch"))?;
    s[0] = n;
    Tensor::new(&s, data)
}

/// Runs `f` per chunk and concatenates row-major outputs, for networks
/// that are not part of [`AgrGan`].
pub fn infer(input: &Tensor, f: impl Fn(&Tape, crate::tensor::Var<'_>) -> Result<Tensor>) -> Result<Tensor> {
    map_chunks(input, |chunk| {
        let tape = Tape::new();
        let x = tape.constant(chunk);
        f(&tape, x)
    })
}
