use std::cell::RefCell;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{init, Param, SpectralNormState, Tape, Tensor, Var};

/// Whether a forward pass re-aligns spectral-norm vectors with the current
/// weight (training) or reuses the stored ones (evaluation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named view of a network's trainable tensors and spectral-norm buffers.
pub trait Module {
    fn params(&self) -> Vec<(String, Param)>;

    fn spectral_states(&self) -> Vec<(String, &RefCell<SpectralNormState>)> {
        Vec::new()
    }

    fn set_trainable(&self, flag: bool) {
        self.params().iter().for_each(|(_, p)| p.set_requires_grad(flag));
    }

    fn zero_grad(&self) {
        self.params().iter().for_each(|(_, p)| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.borrow().numel()).sum()
    }
}

pub(crate) fn prefixed(prefix: &str, items: Vec<(String, Param)>) -> Vec<(String, Param)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

#[derive(Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(init::uniform_fan_in(&[out, inp], inp, rng)),
            bias: Param::new(init::uniform_fan_in(&[out], inp, rng)),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(tape.param(&self.weight), Some(tape.param(&self.bias)))
    }

    pub fn in_features(&self) -> usize {
        self.weight.borrow().cols()
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<(String, Param)> {
        vec![("weight".into(), self.weight.clone()), ("bias".into(), self.bias.clone())]
    }
}

/// Convolution with optional spectral normalization of the weight.
#[derive(Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    pub spectral: Option<RefCell<SpectralNormState>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = init::uniform_fan_in(&[out_c, in_c, kernel, kernel], fan_in, rng);
        let bias = init::uniform_fan_in(&[out_c], fan_in, rng);
        let spectral = spectral.then(|| {
            let mut st = SpectralNormState::new(out_c, fan_in, rng);
            st.align(weight.data());
            RefCell::new(st)
        });
        Conv2d {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            padding,
            spectral,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let mut w = tape.param(&self.weight);
        if let Some(st) = &self.spectral {
            let mut st = st.borrow_mut();
            if mode == Mode::Train {
                let aligned = st.align(w.value().data());
                if !aligned {
                    log::warn!("conv weight is numerically zero; spectral norm left unscaled");
                }
            }
            w = w.spectral_normalize(&mut st, 0)?;
        }
        x.conv2d(w, self.stride, self.padding)?
            .add_channel_bias(tape.param(&self.bias))
    }

    /// The weight the next training forward pass would use, computed on a
    /// copy of the spectral-norm state.
    pub fn effective_weight(&self) -> Tensor {
        let w = self.weight.snapshot();
        match &self.spectral {
            None => w,
            Some(st) => {
                let mut st = st.borrow().clone();
                if st.align(w.data()) {
                    let s = st.sigma;
                    Tensor::new(w.shape(), w.data().iter().map(|x| x / s).collect()).unwrap()
                } else {
                    w
                }
            }
        }
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<(String, Param)> {
        vec![("weight".into(), self.weight.clone()), ("bias".into(), self.bias.clone())]
    }

    fn spectral_states(&self) -> Vec<(String, &RefCell<SpectralNormState>)> {
        self.spectral.iter().map(|s| ("sn".to_string(), s)).collect()
    }
}

#[derive(Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        ConvTranspose2d {
            weight: Param::new(init::uniform_fan_in(&[in_c, out_c, kernel, kernel], fan_in, rng)),
            bias: Param::new(init::uniform_fan_in(&[out_c], fan_in, rng)),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.conv_transpose2d(tape.param(&self.weight), self.stride, self.padding, self.output_padding)?
            .add_channel_bias(tape.param(&self.bias))
    }
}

impl Module for ConvTranspose2d {
    fn params(&self) -> Vec<(String, Param)> {
        vec![("weight".into(), self.weight.clone()), ("bias".into(), self.bias.clone())]
    }
}
