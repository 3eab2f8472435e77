//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Param, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is (numerically) zero are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per parameter (all of them if it is smaller).
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            coords: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn eval(f: &impl for<'t> Fn(&'t Tape) -> Result<Var<'t>>) -> Result<f64> {
    let tape = Tape::new();
    let out = f(&tape)?;
    if out.value().numel() != 1 {
        return Err(Error::arg("gradient check needs a scalar function"));
    }
    Ok(out.item())
}

/// Compares the gradient `f` back-propagates into each parameter with the
/// central difference `(f(p + h) - f(p - h)) / 2h` at randomly sampled
/// coordinates. `f` must record every parameter with [`Tape::param`] and
/// be a pure function of their values.
pub fn check_gradients(
    params: &[(String, Param)],
    f: impl for<'t> Fn(&'t Tape) -> Result<Var<'t>>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    for (_, p) in params {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    {
        let tape = Tape::new();
        let out = f(&tape)?;
        tape.backward(out)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for (name, p) in params {
        let n = p.borrow().numel();
        let analytic = p
            .borrow()
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for i in sample(&mut rng, n, cfg.coords.min(n)) {
            let x0 = p.borrow().data()[i];
            p.borrow_mut().data_mut()[i] = x0 + cfg.step;
            let plus = eval(&f);
            p.borrow_mut().data_mut()[i] = x0 - cfg.step;
            let minus = eval(&f);
            p.borrow_mut().data_mut()[i] = x0;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            report.checks.push(CoordCheck {
                param: name.clone(),
                index: i,
                analytic: analytic[i],
                numeric,
                rel_err: rel_err(analytic[i], numeric),
            });
        }
    }
    Ok(report)
}
