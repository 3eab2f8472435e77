//! Loss terms, the four-phase alternating update, and checkpointed training.

pub mod losses;
mod pretrain;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{
    adv_enc_losses, adv_face_losses, age_gap_loss, estimator_supervised_loss, expected_group, identity_loss,
    tv_loss,
};
pub use pretrain::{pretrain_age_estimator, pretrain_embedding, PretrainConfig};

use crate::data::{batch_iterator, missing_groups, stack, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{condition_matrix, AgrGan, ConditionVector, EmbeddingNet, Mode, Module, ScaleProfile, AGE_GROUPS};
use crate::tensor::{Adam, Tape, Tensor, Var};

pub const LOSS_CSV_HEADER: &str = "step,d_face,d_enc,est,g_adv_face,g_adv_enc,id,agegap,tv,total";
pub const LOSS_CSV: &str = "losses.csv";
pub const TRAIN_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Weights of the five generator-side terms. All default to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_id: f64,
    pub w_agegap: f64,
    pub w_tv: f64,
    pub w_adv_face: f64,
    pub w_adv_enc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_id: 1.0,
            w_agegap: 1.0,
            w_tv: 1.0,
            w_adv_face: 1.0,
            w_adv_enc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            w_id: 0.0,
            w_agegap: 0.0,
            w_tv: 0.0,
            w_adv_face: 0.0,
            w_adv_enc: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::arg(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("w_id", self.w_id),
            ("w_agegap", self.w_agegap),
            ("w_tv", self.w_tv),
            ("w_adv_face", self.w_adv_face),
            ("w_adv_enc", self.w_adv_enc),
        ]
    }

    /// Sets one weight by name.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "w_id" | "id" => &mut self.w_id,
            "w_agegap" | "agegap" => &mut self.w_agegap,
            "w_tv" | "tv" => &mut self.w_tv,
            "w_adv_face" | "adv_face" => &mut self.w_adv_face,
            "w_adv_enc" | "adv_enc" => &mut self.w_adv_enc,
            other => return Err(Error::arg(format!("unknown loss weight `{other}`"))),
        };
        *slot = value;
        self.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub epochs: usize,
    pub seed: u64,
    pub profile: ScaleProfile,
    pub weights: LossWeights,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
}

impl TrainConfig {
    /// Batch 128, lr 2e-4, beta1 0.5 at the full-size profile.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 2e-4,
            beta1: 0.5,
            epochs: 30,
            seed: 0,
            profile: ScaleProfile::paper(),
            weights: LossWeights::default(),
            d_steps: 1,
        }
    }

    /// Same optimizer settings with batch 64 at the desk profile.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 64,
            profile: ScaleProfile::desk(),
            ..Self::paper()
        }
    }

    pub fn for_profile(profile: ScaleProfile) -> Self {
        let mut c = if profile == ScaleProfile::paper() {
            Self::paper()
        } else {
            Self::desk()
        };
        c.profile = profile;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.d_steps == 0 {
            return Err(Error::arg("batch_size and d_steps must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::arg(format!("invalid optimizer settings lr={} beta1={}", self.lr, self.beta1)));
        }
        Ok(())
    }
}

/// Every loss value of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub d_face: f64,
    pub d_enc: f64,
    pub est: f64,
    pub g_adv_face: f64,
    pub g_adv_enc: f64,
    pub id: f64,
    pub agegap: f64,
    pub tv: f64,
    pub total: f64,
}

impl StepReport {
    /// `Σ w · term` recomputed from the components.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.w_adv_face * self.g_adv_face
            + w.w_adv_enc * self.g_adv_enc
            + w.w_id * self.id
            + w.w_agegap * self.agegap
            + w.w_tv * self.tv
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.d_face,
            self.d_enc,
            self.est,
            self.g_adv_face,
            self.g_adv_enc,
            self.id,
            self.agegap,
            self.tv,
            self.total
        )
    }

    fn all_finite(&self) -> Option<&'static str> {
        [
            ("d_face", self.d_face),
            ("d_enc", self.d_enc),
            ("est", self.est),
            ("g_adv_face", self.g_adv_face),
            ("g_adv_enc", self.g_adv_enc),
            ("id", self.id),
            ("agegap", self.agegap),
            ("tv", self.tv),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn finite(what: &str, v: &Var<'_>) -> Result<f64> {
    let x = v.item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { what: what.to_string() })
    }
}

/// Owns the model, its four optimizers and the run RNG.
pub struct Trainer<'p> {
    pub model: AgrGan,
    pub phi: &'p EmbeddingNet,
    pub config: TrainConfig,
    opt_rg: Adam,
    opt_dface: Adam,
    opt_denc: Adam,
    opt_est: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

fn prefixed_params(prefix: &str, m: &dyn Module) -> Vec<(String, crate::tensor::Param)> {
    m.params().into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

impl<'p> Trainer<'p> {
    /// Builds a freshly initialized model. `phi` is frozen for the lifetime
    /// of the trainer.
    pub fn new(config: TrainConfig, phi: &'p EmbeddingNet) -> Result<Self> {
        config.validate()?;
        let model = AgrGan::new(config.profile, config.seed)?;
        Ok(Self::with_model(config, model, phi))
    }

    pub fn with_model(config: TrainConfig, model: AgrGan, phi: &'p EmbeddingNet) -> Self {
        phi.set_trainable(false);
        let mut rg = prefixed_params("representor", &model.representor);
        rg.extend(prefixed_params("generator", &model.generator));
        let opt = |p| Adam::new(p, config.lr, config.beta1);
        Trainer {
            opt_rg: opt(rg),
            opt_dface: opt(prefixed_params("dface", &model.dface)),
            opt_denc: opt(prefixed_params("denc", &model.denc)),
            opt_est: opt(prefixed_params("estimator", &model.estimator)),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a91),
            model,
            phi,
            config,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn freeze_discriminators(&self, frozen: bool) {
        self.model.dface.set_trainable(!frozen);
        self.model.denc.set_trainable(!frozen);
        self.model.estimator.set_trainable(!frozen);
    }

    /// One alternating update on a batch: face discriminator, latent
    /// discriminator, supervised estimator, then the joint
    /// representor+generator step. Target groups are drawn uniformly; the
    /// gender condition is the sample's own.
    pub fn train_step(&mut self, images: &Tensor, conds: &[ConditionVector]) -> Result<StepReport> {
        let n = images.rows();
        if conds.len() != n {
            return Err(Error::dim("train_step", "condition count (axis 0)", n, conds.len()));
        }
        let targets: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..AGE_GROUPS)).collect();
        let target_conds: Vec<ConditionVector> = targets
            .iter()
            .zip(conds)
            .map(|(&t, c)| ConditionVector::new(t, c.gender()))
            .collect::<Result<_>>()?;
        let enc_dim = self.config.profile.enc_dim;
        let prior = Tensor::from_fn(&[n, enc_dim], |_| self.rng.random_range(-1.0..=1.0));
        let w = self.config.weights;
        let m = &self.model;

        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let enc = m.representor.forward(&tape, x, Mode::Train)?;
        let cond = tape.constant(condition_matrix(&target_conds));
        let x_gen = m.generator.forward(&tape, enc, cond)?;
        let fake = x_gen.value().clone();
        let enc_value = enc.value().clone();

        let mut report = StepReport {
            step: self.step,
            ..StepReport::default()
        };

        for _ in 0..self.config.d_steps {
            self.opt_dface.zero_grad();
            let t = Tape::new();
            let both = {
                let mut d = images.data().to_vec();
                d.extend_from_slice(fake.data());
                let mut s = images.shape().to_vec();
                s[0] = 2 * n;
                t.constant(Tensor::new(&s, d)?)
            };
            let mut all_conds = conds.to_vec();
            all_conds.extend_from_slice(&target_conds);
            let p = m.dface.forward(&t, both, &all_conds, Mode::Train)?;
            let (d_loss, _) = adv_face_losses(p.slice_rows(0, n)?, p.slice_rows(n, 2 * n)?)?;
            report.d_face = finite("face discriminator loss", &d_loss)?;
            t.backward(d_loss)?;
            self.opt_dface.step()?;

            self.opt_denc.zero_grad();
            let t = Tape::new();
            let p_prior = m.denc.forward(&t, t.constant(prior.clone()))?;
            let p_enc = m.denc.forward(&t, t.constant(enc_value.clone()))?;
            let (d_loss, _) = adv_enc_losses(p_prior, p_enc)?;
            report.d_enc = finite("latent discriminator loss", &d_loss)?;
            t.backward(d_loss)?;
            self.opt_denc.step()?;
        }

        self.opt_est.zero_grad();
        {
            let t = Tape::new();
            let logits = m.estimator.forward(&t, t.constant(images.clone()))?;
            let groups: Vec<usize> = conds.iter().map(|c| c.age_group()).collect();
            let loss = estimator_supervised_loss(logits, &groups)?;
            report.est = finite("age estimator loss", &loss)?;
            t.backward(loss)?;
            self.opt_est.step()?;
        }

        self.freeze_discriminators(true);
        let result = self.generator_phase(&tape, x, enc, x_gen, &target_conds, &targets, &w, &mut report);
        self.freeze_discriminators(false);
        result?;
        if let Some(bad) = report.all_finite() {
            return Err(Error::NonFinite {
                what: format!("step {} loss `{bad}`", self.step),
            });
        }
        self.step += 1;
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn generator_phase<'t>(
        &mut self,
        tape: &'t Tape,
        x: Var<'t>,
        enc: Var<'t>,
        x_gen: Var<'t>,
        target_conds: &[ConditionVector],
        targets: &[usize],
        w: &LossWeights,
        report: &mut StepReport,
    ) -> Result<()> {
        let m = &self.model;
        self.opt_rg.zero_grad();
        let p_fake = m.dface.forward(tape, x_gen, target_conds, Mode::Eval)?;
        let g_face = losses::bce_real(p_fake);
        let p_enc = m.denc.forward(tape, enc)?;
        let g_enc = losses::bce_real(p_enc);
        let id = identity_loss(self.phi, x, x_gen)?;
        let agegap = age_gap_loss(targets, m.estimator.forward(tape, x_gen)?)?;
        let tv = tv_loss(x_gen)?;

        report.g_adv_face = finite("generator adversarial loss", &g_face)?;
        report.g_adv_enc = finite("representor adversarial loss", &g_enc)?;
        report.id = finite("identity loss", &id)?;
        report.agegap = finite("age gap loss", &agegap)?;
        report.tv = finite("total variation loss", &tv)?;

        let mut total: Option<Var<'t>> = None;
        for (weight, term) in [
            (w.w_adv_face, g_face),
            (w.w_adv_enc, g_enc),
            (w.w_id, id),
            (w.w_agegap, agegap),
            (w.w_tv, tv),
        ] {
            if weight == 0.0 {
                continue;
            }
            let t = term.scale(weight);
            total = Some(match total {
                Some(acc) => acc.add(t)?,
                None => t,
            });
        }
        match total {
            Some(total) => {
                report.total = finite("combined objective", &total)?;
                tape.backward(total)?;
                self.opt_rg.step()?;
            }
            None => report.total = 0.0,
        }
        Ok(())
    }
}

/// What [`train`] produced.
pub struct TrainOutcome {
    pub model: AgrGan,
    pub reports: Vec<StepReport>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub samples: usize,
    pub steps_per_epoch: usize,
    pub steps: usize,
    pub loss_csv: Option<String>,
    pub checkpoints: Vec<String>,
    pub status: String,
}

fn checkpoint_name(epoch: usize) -> String {
    format!("{CHECKPOINT_DIR}/epoch_{epoch:03}.agr")
}

/// Trains for `config.epochs` epochs on `data`. With `out` set, writes the
/// initial and per-epoch checkpoints, the loss CSV and a manifest there. On
/// a numerical failure the current state is written to
/// `checkpoints/abort.agr` before the error is returned.
pub fn train(
    config: TrainConfig,
    data: &[LabeledImage],
    phi: &EmbeddingNet,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::arg("train: empty dataset"));
    }
    let missing = missing_groups(data);
    if !missing.is_empty() {
        log::warn!("train: age groups {missing:?} have no training samples");
    }
    let size = config.profile.image_size;
    if data[0].size() != size {
        return Err(Error::dim("train", "image size", size, data[0].size()));
    }
    let batch = config.batch_size.min(data.len());
    if batch != config.batch_size {
        log::warn!("train: batch size reduced to dataset size {batch}");
    }
    let steps_per_epoch = data.len() / batch;
    let mut trainer = Trainer::new(config, phi)?;

    let mut csv = None;
    let mut checkpoints = Vec::new();
    if let Some(dir) = out {
        let ck = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        let p = dir.join(LOSS_CSV);
        let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        writeln!(f, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&p, e))?;
        csv = Some((p, f));
        let c0 = dir.join(checkpoint_name(0));
        trainer.model.save(&c0)?;
        checkpoints.push(c0);
    }
    let write_manifest = |status: &str, steps: usize, checkpoints: &[PathBuf]| -> Result<()> {
        let Some(dir) = out else { return Ok(()) };
        let rel = |p: &PathBuf| p.strip_prefix(dir).unwrap_or(p).display().to_string();
        let m = TrainManifest {
            config,
            seed: config.seed,
            samples: data.len(),
            steps_per_epoch,
            steps,
            loss_csv: Some(LOSS_CSV.into()),
            checkpoints: checkpoints.iter().map(rel).collect(),
            status: status.into(),
        };
        let p = dir.join(TRAIN_MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&p, e))
    };

    let mut reports = Vec::with_capacity(steps_per_epoch * config.epochs);
    for epoch in 0..config.epochs {
        let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        for idx in batch_iterator(data.len(), batch, seed)? {
            let images = stack(data, &idx)?;
            let conds: Vec<ConditionVector> = idx.iter().map(|&i| data[i].condition()).collect();
            match trainer.train_step(&images, &conds) {
                Ok(r) => {
                    if let Some((p, f)) = csv.as_mut() {
                        writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io(p.as_path(), e))?;
                    }
                    reports.push(r);
                }
                Err(e) => {
                    if let Some(dir) = out {
                        let p = dir.join(CHECKPOINT_DIR).join("abort.agr");
                        trainer.model.save(&p)?;
                        checkpoints.push(p);
                        write_manifest(&format!("aborted: {e}"), reports.len(), &checkpoints)?;
                    }
                    return Err(e);
                }
            }
        }
        let last = &reports[reports.len().saturating_sub(steps_per_epoch)..];
        let mean = |f: fn(&StepReport) -> f64| last.iter().map(f).sum::<f64>() / last.len().max(1) as f64;
        log::info!(
            "epoch {}: total {:.4} d_face {:.4} d_enc {:.4} est {:.4} agegap {:.4} id {:.4}",
            epoch + 1,
            mean(|r| r.total),
            mean(|r| r.d_face),
            mean(|r| r.d_enc),
            mean(|r| r.est),
            mean(|r| r.agegap),
            mean(|r| r.id)
        );
        if let Some(dir) = out {
            let p = dir.join(checkpoint_name(epoch + 1));
            trainer.model.save(&p)?;
            checkpoints.push(p);
        }
    }
    write_manifest("complete", reports.len(), &checkpoints)?;
    Ok(TrainOutcome {
        model: trainer.model,
        reports,
        checkpoints,
    })
}
