//! Harness-trained stand-ins for the pretrained networks: an age-group
//! oracle, the frozen identity feature map φ, and a verification embedding
//! trained on young faces only.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, cosine, roc_curve, ScoreSet};
use crate::data::{identities, stack, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, infer, load_module_state, module_state, AgeEstimator, EmbeddingNet, Module, ScaleProfile};
use crate::tensor::Tensor;
use crate::train::{pretrain_age_estimator, pretrain_embedding, PretrainConfig};

type NamedTensors = Vec<(String, Tensor)>;

pub const AGE_WITHIN_ONE_MIN: f64 = 0.8;
pub const IDENTITY_AUC_MIN: f64 = 0.9;
pub const ORACLE_REPORT: &str = "oracles.json";
/// The verifier only sees age groups `0..=VERIFIER_MAX_GROUP` during
/// training, so it is not age-invariant across the full range.
pub const VERIFIER_MAX_GROUP: usize = 4;
const AGE_FILE: &str = "age_oracle.agr";
const PHI_FILE: &str = "phi.agr";
const VERIFIER_FILE: &str = "verifier.agr";

/// Held-out quality of freshly trained oracles. The verifier AUC is
/// measured within its training age band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub profile: ScaleProfile,
    pub classes: usize,
    pub verifier_classes: usize,
    pub age_exact: f64,
    pub age_within_one: f64,
    pub phi_auc: f64,
    pub verifier_auc: f64,
    pub heldout_samples: usize,
}

#[derive(Debug)]
pub struct OracleModels {
    pub age: AgeEstimator,
    pub phi: EmbeddingNet,
    pub verifier: EmbeddingNet,
    pub report: OracleReport,
}

/// Argmax of each logit row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Predicted age group per image.
pub fn predict_groups(est: &AgeEstimator, images: &Tensor) -> Result<Vec<usize>> {
    let logits = infer(images, |tape, x| Ok(est.forward(tape, x)?.value().clone()))?;
    Ok(argmax_rows(&logits))
}

/// One embedding row per image.
pub fn embed_all(net: &EmbeddingNet, images: &Tensor) -> Result<Tensor> {
    infer(images, |tape, x| Ok(net.embed(tape, x)?.value().clone()))
}

/// Same-identity vs cross-identity cosine scores over all unordered pairs.
pub fn pairwise_identity_scores(emb: &Tensor, ids: &[usize]) -> ScoreSet {
    let mut s = ScoreSet::default();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let c = cosine(emb.row(i), emb.row(j));
            if ids[i] == ids[j] {
                s.genuine.push(c);
            } else {
                s.impostor.push(c);
            }
        }
    }
    s
}

fn identity_auc(net: &EmbeddingNet, data: &[LabeledImage]) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let emb = embed_all(net, &stack(data, &all)?)?;
    let ids: Vec<usize> = data.iter().map(|s| s.identity).collect();
    Ok(auc(&roc_curve(&pairwise_identity_scores(&emb, &ids))?))
}

fn young(data: &[LabeledImage]) -> Vec<LabeledImage> {
    data.iter().filter(|s| s.group() <= VERIFIER_MAX_GROUP).cloned().collect()
}

fn class_labels(data: &[LabeledImage]) -> (usize, Vec<usize>) {
    let ids = identities(data);
    let labels = data
        .iter()
        .map(|s| ids.iter().position(|&i| i == s.identity).expect("listed"))
        .collect();
    (ids.len(), labels)
}

impl OracleModels {
    /// Trains all three oracles on `train` and checks them on the
    /// identity-disjoint `heldout` split. Missing a threshold is an error.
    pub fn pretrain(train: &[LabeledImage], heldout: &[LabeledImage], profile: ScaleProfile, seed: u64) -> Result<Self> {
        let train_ids = identities(train);
        if heldout.iter().any(|s| train_ids.contains(&s.identity)) {
            return Err(Error::arg("oracle held-out split shares identities with the training split"));
        }
        if heldout.is_empty() {
            return Err(Error::arg("oracle held-out split is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PretrainConfig {
            seed,
            ..PretrainConfig::default()
        };

        let age = AgeEstimator::new(&profile, &mut rng);
        pretrain_age_estimator(&age, train, &cfg)?;

        let (classes, labels) = class_labels(train);
        let phi = EmbeddingNet::new(&profile, classes, &mut rng);
        pretrain_embedding(&phi, train, &labels, &cfg)?;

        let young_train = young(train);
        let young_heldout = young(heldout);
        if young_train.is_empty() || young_heldout.is_empty() {
            return Err(Error::arg(format!(
                "verifier needs samples in age groups 0..={VERIFIER_MAX_GROUP} in both splits"
            )));
        }
        let (verifier_classes, young_labels) = class_labels(&young_train);
        let verifier = EmbeddingNet::new(&profile, verifier_classes, &mut rng);
        let vcfg = PretrainConfig {
            seed: seed.wrapping_add(1),
            ..cfg
        };
        pretrain_embedding(&verifier, &young_train, &young_labels, &vcfg)?;

        let all: Vec<usize> = (0..heldout.len()).collect();
        let pred = predict_groups(&age, &stack(heldout, &all)?)?;
        let n = heldout.len() as f64;
        let exact = pred.iter().zip(heldout).filter(|(p, s)| **p == s.group()).count() as f64 / n;
        let within = pred
            .iter()
            .zip(heldout)
            .filter(|(p, s)| p.abs_diff(s.group()) <= 1)
            .count() as f64
            / n;
        let report = OracleReport {
            profile,
            classes,
            verifier_classes,
            age_exact: exact,
            age_within_one: within,
            phi_auc: identity_auc(&phi, heldout)?,
            verifier_auc: identity_auc(&verifier, &young_heldout)?,
            heldout_samples: heldout.len(),
        };
        log::info!("oracles: {report:?}");
        let models = OracleModels {
            age,
            phi,
            verifier,
            report,
        };
        models.check_thresholds()?;
        Ok(models)
    }

    pub fn check_thresholds(&self) -> Result<()> {
        let r = &self.report;
        if r.age_within_one < AGE_WITHIN_ONE_MIN {
            return Err(Error::Threshold {
                what: "age oracle within-one-group accuracy".into(),
                value: r.age_within_one,
                required: format!(">= {AGE_WITHIN_ONE_MIN}"),
            });
        }
        for (what, v) in [("identity embedding AUC", r.phi_auc), ("verifier AUC", r.verifier_auc)] {
            if v <= IDENTITY_AUC_MIN {
                return Err(Error::Threshold {
                    what: what.into(),
                    value: v,
                    required: format!("> {IDENTITY_AUC_MIN}"),
                });
            }
        }
        Ok(())
    }

    fn tables(&self) -> [(&'static str, &'static str, NamedTensors); 3] {
        [
            (AGE_FILE, "age", module_state("age", &self.age)),
            (PHI_FILE, "phi", module_state("phi", &self.phi)),
            (VERIFIER_FILE, "verifier", module_state("verifier", &self.verifier)),
        ]
    }

    /// Hex SHA-256 over the serialized parameters of all three oracles.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for (_, _, t) in self.tables() {
            bytes.extend(checkpoint::encode(&t));
        }
        crate::data::sha256_hex(&bytes)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, _, t) in self.tables() {
            checkpoint::save(&dir.join(file), &t)?;
        }
        let p = dir.join(ORACLE_REPORT);
        fs::write(&p, serde_json::to_string_pretty(&self.report)?).map_err(|e| Error::io(&p, e))
    }

    /// Loads oracles written by [`OracleModels::save`]; they come back frozen.
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(ORACLE_REPORT);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let report: OracleReport = serde_json::from_str(&text)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let models = OracleModels {
            age: AgeEstimator::new(&report.profile, &mut rng),
            phi: EmbeddingNet::new(&report.profile, report.classes, &mut rng),
            verifier: EmbeddingNet::new(&report.profile, report.verifier_classes, &mut rng),
            report,
        };
        load_module_state("age", &models.age, checkpoint::load(&dir.join(AGE_FILE))?)?;
        load_module_state("phi", &models.phi, checkpoint::load(&dir.join(PHI_FILE))?)?;
        load_module_state("verifier", &models.verifier, checkpoint::load(&dir.join(VERIFIER_FILE))?)?;
        models.age.set_trainable(false);
        models.phi.set_trainable(false);
        models.verifier.set_trainable(false);
        Ok(models)
    }
}

/// Function-style entry point for [`OracleModels::pretrain`].
pub fn pretrain_oracles(
    train: &[LabeledImage],
    heldout: &[LabeledImage],
    profile: ScaleProfile,
    seed: u64,
) -> Result<OracleModels> {
    OracleModels::pretrain(train, heldout, profile, seed)
}
