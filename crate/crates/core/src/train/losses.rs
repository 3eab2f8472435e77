//! The loss terms of the combined objective, expressed over tape variables.

use crate::error::{Error, Result};
use crate::nn::{EmbeddingNet, AGE_GROUPS};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// `Σᵢ i · softmax(logits)ᵢ` per row, shape `N`.
pub fn expected_group<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] != AGE_GROUPS {
        return Err(Error::dim("expected_group", "logit width (axis 1)", AGE_GROUPS, *s.last().unwrap_or(&0)));
    }
    let idx = logits
        .tape()
        .constant(Tensor::from_fn(&[1, AGE_GROUPS], |i| i as f64));
    logits.softmax().linear(idx, None)?.reshape(&[s[0]])
}

fn group_targets<'t>(tape: &'t Tape, groups: &[usize], op: &str) -> Result<Var<'t>> {
    if let Some(g) = groups.iter().find(|&&g| g >= AGE_GROUPS) {
        return Err(Error::arg(format!("{op}: target group {g} outside 0..{AGE_GROUPS}")));
    }
    Ok(tape.constant(Tensor::new(&[groups.len()], groups.iter().map(|&g| g as f64).collect())?))
}

/// Batch mean of `|target − expected_group(logits)|`.
pub fn age_gap_loss<'t>(targets: &[usize], logits: Var<'t>) -> Result<Var<'t>> {
    let t = group_targets(logits.tape(), targets, "age_gap_loss")?;
    Ok(t.sub(expected_group(logits)?)?.abs().mean())
}

/// Batch mean of cross-entropy plus absolute expected-group error.
pub fn estimator_supervised_loss<'t>(logits: Var<'t>, groups: &[usize]) -> Result<Var<'t>> {
    let ce = logits.log_softmax().pick(groups)?.mean().scale(-1.0);
    let t = group_targets(logits.tape(), groups, "estimator_supervised_loss")?;
    let mae = t.sub(expected_group(logits)?)?.abs().mean();
    ce.add(mae)
}

/// Batch mean of `1 − cos(a, b)` between embeddings.
pub fn cosine_distance<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(a.cosine_similarity(b)?.affine(-1.0, 1.0).mean())
}

/// Cosine distance between `φ(x_gen)` and `φ(x)`. `phi` should be frozen;
/// gradients flow only into `x_gen`.
pub fn identity_loss<'t>(phi: &EmbeddingNet, x: Var<'t>, x_gen: Var<'t>) -> Result<Var<'t>> {
    let tape = x.tape();
    let ex = phi.embed(tape, x)?;
    let eg = phi.embed(tape, x_gen)?;
    cosine_distance(eg, ex)
}

pub fn tv_loss<'t>(x_gen: Var<'t>) -> Result<Var<'t>> {
    x_gen.total_variation()
}

/// `−mean log p`
pub fn bce_real<'t>(p: Var<'t>) -> Var<'t> {
    p.log_clamped(LOG_EPS).mean().scale(-1.0)
}

/// `−mean log(1 − p)`
pub fn bce_fake<'t>(p: Var<'t>) -> Var<'t> {
    p.affine(-1.0, 1.0).log_clamped(LOG_EPS).mean().scale(-1.0)
}

fn check_probs(what: &str, p: &Var<'_>) -> Result<()> {
    if p.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: format!("{what} discriminator output"),
        })
    }
}

/// Discriminator and non-saturating generator losses from the
/// discriminator's outputs on real and fake inputs:
/// `d = −mean log D(real) − mean log(1 − D(fake))`, `g = −mean log D(fake)`.
/// The two losses are built on separate graph nodes so either can be
/// differentiated alone.
pub fn adversarial_losses<'t>(real: Var<'t>, fake: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    check_probs("real", &real)?;
    check_probs("fake", &fake)?;
    Ok((bce_real(real).add(bce_fake(fake))?, bce_real(fake)))
}

/// Face-discriminator pair; see [`adversarial_losses`].
pub fn adv_face_losses<'t>(real: Var<'t>, fake: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    adversarial_losses(real, fake)
}

/// Latent-discriminator pair with prior draws as "real" and encoder
/// outputs as "fake"; the second value is the representor's loss.
pub fn adv_enc_losses<'t>(prior: Var<'t>, enc: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    adversarial_losses(prior, enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits<'t>(tape: &'t Tape, rows: &[[f64; 10]]) -> Var<'t> {
        tape.leaf(
            Tensor::new(&[rows.len(), 10], rows.iter().flatten().copied().collect()).unwrap(),
            true,
        )
    }

    #[test]
    fn expected_group_cases() {
        let tape = Tape::new();
        let mut peaked = [0.0; 10];
        peaked[6] = 50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let random: [f64; 10] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let e = expected_group(logits(&tape, &[[0.0; 10], peaked, random])).unwrap();
        let v = e.value();
        assert!((v.data()[0] - 4.5).abs() < 1e-12);
        assert!((v.data()[1] - 6.0).abs() < 1e-6);
        let m = random.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = random.iter().map(|l| (l - m).exp()).sum();
        let oracle: f64 = random.iter().enumerate().map(|(i, l)| i as f64 * (l - m).exp() / z).sum();
        assert!((v.data()[2] - oracle).abs() < 1e-12);
    }

    #[test]
    fn age_gap_cases() {
        let tape = Tape::new();
        let l = logits(&tape, &[[0.0; 10]]);
        assert!((age_gap_loss(&[0], l).unwrap().item() - 4.5).abs() < 1e-12);
        assert!((age_gap_loss(&[9], l).unwrap().item() - 4.5).abs() < 1e-12);
        let mut peaked = [0.0; 10];
        peaked[2] = 60.0;
        assert!(age_gap_loss(&[2], logits(&tape, &[peaked])).unwrap().item() < 1e-12);
        assert!(age_gap_loss(&[10], l).is_err());
    }

    #[test]
    fn estimator_loss_cases() {
        let tape = Tape::new();
        let u = estimator_supervised_loss(logits(&tape, &[[0.0; 10]]), &[0]).unwrap().item();
        assert!((u - (10f64.ln() + 4.5)).abs() < 1e-12);
        assert!((u - 6.8026).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<[f64; 10]> = (0..3).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
        let groups = [1usize, 5, 9];
        let got = estimator_supervised_loss(logits(&tape, &rows), &groups).unwrap().item();
        let mut oracle = 0.0;
        for (r, &g) in rows.iter().zip(&groups) {
            let z: f64 = r.iter().map(|l| l.exp()).sum();
            let p: Vec<f64> = r.iter().map(|l| l.exp() / z).collect();
            let e: f64 = p.iter().enumerate().map(|(i, q)| i as f64 * q).sum();
            oracle += -p[g].ln() + (e - g as f64).abs();
        }
        assert!((got - oracle / 3.0).abs() < 1e-10);
    }

    #[test]
    fn hot_logits_loss_is_tiny() {
        let tape = Tape::new();
        let mut hot = [0.0; 10];
        hot[0] = 20.0;
        let v = estimator_supervised_loss(logits(&tape, &[hot]), &[0]).unwrap().item();
        assert!(v <= 1e-6, "{v}");
    }

    #[test]
    fn tv_cases() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.3));
        assert_eq!(tv_loss(c).unwrap().item(), 0.0);
        let two = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        assert!((tv_loss(two).unwrap().item() - 0.5).abs() < 1e-15);
        let checker = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 }));
        assert!(tv_loss(checker).unwrap().item() > 0.0);
    }

    #[test]
    fn cosine_distance_cases() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 1.0, 0.0, 1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 0.0, 1.0, -1.0, -1.0]).unwrap());
        let d = a.cosine_similarity(b).unwrap().affine(-1.0, 1.0);
        let v = d.value();
        assert!(v.data()[0].abs() < 1e-12);
        assert!((v.data()[1] - 1.0).abs() < 1e-12);
        assert!((v.data()[2] - 2.0).abs() < 1e-12);
    }

    fn probs<'t>(tape: &'t Tape, p: &[f64]) -> Var<'t> {
        tape.leaf(Tensor::new(&[p.len(), 1], p.to_vec()).unwrap(), true)
    }

    #[test]
    fn adversarial_cases() {
        let tape = Tape::new();
        let (d, g) = adv_face_losses(probs(&tape, &[0.5; 4]), probs(&tape, &[0.5; 4])).unwrap();
        assert!((d.item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g.item() - 2f64.ln()).abs() < 1e-12);
        let eps = 1e-9;
        let (d, _) = adv_face_losses(probs(&tape, &[1.0 - eps]), probs(&tape, &[eps])).unwrap();
        assert!(d.item() < 1e-8);
        let (d, _) = adv_enc_losses(probs(&tape, &[0.5; 3]), probs(&tape, &[0.5; 3])).unwrap();
        assert!((d.item() - 2.0 * 2f64.ln()).abs() < 1e-12);

        let real = [0.9, 0.7, 0.55, 0.99];
        let fake = [0.1, 0.4, 0.35, 0.02];
        let (d, g) = adv_enc_losses(probs(&tape, &real), probs(&tape, &fake)).unwrap();
        let mut od = 0.0;
        let mut og = 0.0;
        for i in 0..4 {
            od += -real[i].ln() - (1.0 - fake[i]).ln();
            og += -fake[i].ln();
        }
        assert!((d.item() - od / 4.0).abs() < 1e-12);
        assert!((g.item() - og / 4.0).abs() < 1e-12);
    }

    #[test]
    fn logs_are_clamped() {
        let tape = Tape::new();
        let (d, g) = adv_face_losses(probs(&tape, &[0.0]), probs(&tape, &[1.0])).unwrap();
        assert!((d.item() + 2.0 * LOG_EPS.ln()).abs() < 1e-9);
        assert!(g.item().abs() < 1e-12);
        let nan = probs(&tape, &[f64::NAN]);
        assert!(adv_face_losses(nan, probs(&tape, &[0.5])).is_err());
    }

    #[test]
    fn generator_loss_decreases_in_fake_score() {
        let tape = Tape::new();
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let (_, g) = adv_face_losses(probs(&tape, &[0.5]), probs(&tape, &[i as f64 / 100.0])).unwrap();
            assert!(g.item() < last);
            last = g.item();
        }
    }
}
