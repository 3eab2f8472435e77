//! Aging accuracy, identity preservation, verification gain and the
//! loss ablation, each run over frozen models on the held-out split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{auc, compute_eer, cosine, mean, rank1, roc_curve, spearman, std_dev, tar_at_far, ScoreSet};
use super::oracles::{embed_all, predict_groups, OracleModels};
use crate::data::{identities, stack, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{AgrGan, ConditionVector, AGE_GROUPS};
use crate::tensor::Tensor;
use crate::train::{train, LossWeights, TrainConfig};

/// Operating point for the accuracy column of the verification report.
pub const VERIFICATION_FAR: f64 = 0.001;

fn all_images(data: &[LabeledImage]) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::arg("evaluation split is empty"));
    }
    stack(data, &(0..data.len()).collect::<Vec<_>>())
}

/// Every image of `data` transformed to `target`, keeping its gender.
pub fn project_all(model: &AgrGan, images: &Tensor, data: &[LabeledImage], target: usize) -> Result<Tensor> {
    let conds: Vec<ConditionVector> = data
        .iter()
        .map(|s| ConditionVector::new(target, s.gender))
        .collect::<Result<_>>()?;
    model.transform(images, &conds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgingRow {
    pub target_group: usize,
    pub mean_predicted_group: f64,
    pub std_predicted_group: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgingReport {
    pub rows: Vec<AgingRow>,
    pub spearman: f64,
    /// Adjacent target pairs `(t, t+1)` whose means strictly increase.
    pub increasing_pairs: usize,
    /// Standard deviation over targets of the per-target means.
    pub spread: f64,
}

impl AgingReport {
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_predicted_group).collect()
    }

    fn from_predictions(preds: &[Vec<usize>]) -> Self {
        let rows: Vec<AgingRow> = preds
            .iter()
            .enumerate()
            .map(|(t, p)| {
                let v: Vec<f64> = p.iter().map(|&g| g as f64).collect();
                AgingRow {
                    target_group: t,
                    mean_predicted_group: mean(&v),
                    std_predicted_group: std_dev(&v),
                    samples: v.len(),
                }
            })
            .collect();
        let means: Vec<f64> = rows.iter().map(|r| r.mean_predicted_group).collect();
        let targets: Vec<f64> = (0..rows.len()).map(|t| t as f64).collect();
        AgingReport {
            spearman: spearman(&targets, &means),
            increasing_pairs: means.windows(2).filter(|w| w[1] > w[0]).count(),
            spread: std_dev(&means),
            rows,
        }
    }
}

/// For each target group, transforms every held-out image to it and
/// reports the mean group the age oracle assigns to the results.
pub fn aging_model_eval(model: &AgrGan, data: &[LabeledImage], oracles: &OracleModels) -> Result<AgingReport> {
    let images = all_images(data)?;
    let preds = (0..AGE_GROUPS)
        .map(|t| predict_groups(&oracles.age, &project_all(model, &images, data, t)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(AgingReport::from_predictions(&preds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub target_group: usize,
    pub eer: f64,
    pub auc: f64,
    pub genuine: usize,
    pub impostor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub rows: Vec<IdentityRow>,
    pub mean_eer: f64,
}

impl IdentityReport {
    pub fn eers(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.eer).collect()
    }
}

/// Scores for one target group: genuine pairs match each input with its
/// own transformation; impostor pairs match it with the transformation of
/// every image of a different identity.
pub fn identity_scores(input_emb: &Tensor, gen_emb: &Tensor, ids: &[usize]) -> ScoreSet {
    let mut s = ScoreSet::default();
    for i in 0..ids.len() {
        for j in 0..ids.len() {
            if i == j {
                s.genuine.push(cosine(input_emb.row(i), gen_emb.row(j)));
            } else if ids[i] != ids[j] {
                s.impostor.push(cosine(input_emb.row(i), gen_emb.row(j)));
            }
        }
    }
    s
}

/// Per-target-group EER of φ-embedding cosine scores between inputs and
/// their transformations.
pub fn identity_preservation_eval(
    model: &AgrGan,
    data: &[LabeledImage],
    oracles: &OracleModels,
) -> Result<IdentityReport> {
    if identities(data).len() < 2 {
        return Err(Error::arg("identity evaluation needs at least two identities"));
    }
    let images = all_images(data)?;
    let ids: Vec<usize> = data.iter().map(|s| s.identity).collect();
    let input_emb = embed_all(&oracles.phi, &images)?;
    let mut rows = Vec::with_capacity(AGE_GROUPS);
    for t in 0..AGE_GROUPS {
        let gen_emb = embed_all(&oracles.phi, &project_all(model, &images, data, t)?)?;
        let scores = identity_scores(&input_emb, &gen_emb, &ids);
        rows.push(IdentityRow {
            target_group: t,
            eer: compute_eer(&scores)?,
            auc: auc(&roc_curve(&scores)?),
            genuine: scores.genuine.len(),
            impostor: scores.impostor.len(),
        });
    }
    let mean_eer = mean(&rows.iter().map(|r| r.eer).collect::<Vec<_>>());
    Ok(IdentityReport { rows, mean_eer })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationRow {
    pub method: String,
    pub eer: f64,
    pub tar_at_far: f64,
    pub auc: f64,
    pub rank1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub baseline: VerificationRow,
    pub agr: VerificationRow,
    pub far_operating_point: f64,
    pub pairs_genuine: usize,
    pub pairs_impostor: usize,
    pub skipped_identities: usize,
    #[serde(skip)]
    pub roc_baseline: Vec<(f64, f64)>,
    #[serde(skip)]
    pub roc_agr: Vec<(f64, f64)>,
}

/// Youngest (gallery) and oldest (probe) sample per identity; ties go to
/// the lower sample index. Identities with one sample are counted and skipped.
pub fn max_gap_pairs(data: &[LabeledImage]) -> (Vec<(usize, usize)>, usize) {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by_id.entry(s.identity).or_default().push(i);
    }
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for idx in by_id.values() {
        if idx.len() < 2 {
            skipped += 1;
            continue;
        }
        let mut young = idx[0];
        let mut old = idx[0];
        for &i in &idx[1..] {
            if data[i].age < data[young].age {
                young = i;
            }
            if data[i].age > data[old].age {
                old = i;
            }
        }
        if young == old {
            skipped += 1;
            continue;
        }
        pairs.push((young, old));
    }
    (pairs, skipped)
}

fn verification_row(method: &str, scores: &[Vec<f64>], ids: &[usize]) -> Result<(VerificationRow, Vec<(f64, f64)>)> {
    let mut set = ScoreSet::default();
    for (p, row) in scores.iter().enumerate() {
        for (g, &s) in row.iter().enumerate() {
            if p == g {
                set.genuine.push(s);
            } else {
                set.impostor.push(s);
            }
        }
    }
    let roc = roc_curve(&set)?;
    Ok((
        VerificationRow {
            method: method.into(),
            eer: compute_eer(&set)?,
            tar_at_far: tar_at_far(&set, VERIFICATION_FAR)?,
            auc: auc(&roc),
            rank1: rank1(scores, ids, ids)?,
        },
        roc,
    ))
}

/// Cross-age verification with the verifier embedding, before and after
/// passing each pair through the model: the probe is projected to the age
/// group of the gallery image it is compared against, and the gallery image
/// is regenerated at its own group, so both sides of a pair are outputs.
pub fn verification_gain_eval(
    model: &AgrGan,
    data: &[LabeledImage],
    oracles: &OracleModels,
) -> Result<VerificationReport> {
    let (pairs, skipped) = max_gap_pairs(data);
    if pairs.len() < 2 {
        return Err(Error::arg(format!(
            "verification needs at least two identities with two or more samples ({} usable)",
            pairs.len()
        )));
    }
    let gallery: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let probes: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ids: Vec<usize> = pairs.iter().map(|&(g, _)| data[g].identity).collect();
    let gallery_images = stack(data, &gallery)?;
    let g_emb = embed_all(&oracles.verifier, &gallery_images)?;
    let gallery_conds: Vec<ConditionVector> = gallery.iter().map(|&i| data[i].condition()).collect();
    let g_agr_emb = embed_all(&oracles.verifier, &model.transform(&gallery_images, &gallery_conds)?)?;
    let probe_images = stack(data, &probes)?;
    let p_emb = embed_all(&oracles.verifier, &probe_images)?;
    let n = pairs.len();

    let baseline: Vec<Vec<f64>> = (0..n)
        .map(|p| (0..n).map(|g| cosine(p_emb.row(p), g_emb.row(g))).collect())
        .collect();

    let probe_samples: Vec<LabeledImage> = probes.iter().map(|&i| data[i].clone()).collect();
    let mut projected: BTreeMap<usize, Tensor> = BTreeMap::new();
    for &g in &gallery {
        let t = data[g].group();
        if let std::collections::btree_map::Entry::Vacant(e) = projected.entry(t) {
            let imgs = project_all(model, &probe_images, &probe_samples, t)?;
            e.insert(embed_all(&oracles.verifier, &imgs)?);
        }
    }
    let agr: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            (0..n)
                .map(|g| cosine(projected[&data[gallery[g]].group()].row(p), g_agr_emb.row(g)))
                .collect()
        })
        .collect();

    let (b, roc_b) = verification_row("baseline", &baseline, &ids)?;
    let (a, roc_a) = verification_row("agr", &agr, &ids)?;
    Ok(VerificationReport {
        baseline: b,
        agr: a,
        far_operating_point: VERIFICATION_FAR,
        pairs_genuine: n,
        pairs_impostor: n * (n - 1),
        skipped_identities: skipped,
        roc_baseline: roc_b,
        roc_agr: roc_a,
    })
}

/// Mean over inputs of the mean pairwise L2 distance between the ten
/// age-group transformations of that input.
pub fn output_diversity(model: &AgrGan, data: &[LabeledImage]) -> Result<f64> {
    let images = all_images(data)?;
    let outs = (0..AGE_GROUPS)
        .map(|t| project_all(model, &images, data, t))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let mut acc = 0.0;
        let mut pairs = 0;
        for a in 0..AGE_GROUPS {
            for b in a + 1..AGE_GROUPS {
                let d: f64 = outs[a]
                    .row(i)
                    .iter()
                    .zip(outs[b].row(i))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                acc += d.sqrt();
                pairs += 1;
            }
        }
        total += acc / pairs as f64;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoDenc,
    NoIdentity,
    NoAgegap,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [Self::Full, Self::NoDenc, Self::NoIdentity, Self::NoAgegap];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoDenc => "no_denc",
            Self::NoIdentity => "no_identity",
            Self::NoAgegap => "no_agegap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown ablation variant `{s}`")))
    }

    /// `base` with this variant's term removed.
    pub fn weights(&self, base: LossWeights) -> LossWeights {
        let mut w = base;
        match self {
            Self::Full => {}
            Self::NoDenc => w.w_adv_enc = 0.0,
            Self::NoIdentity => w.w_id = 0.0,
            Self::NoAgegap => w.w_agegap = 0.0,
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: AblationVariant,
    pub aging: AgingReport,
    pub identity: IdentityReport,
    pub diversity: f64,
}

/// Evaluates one trained model under every ablation metric.
pub fn evaluate_variant(
    variant: AblationVariant,
    model: &AgrGan,
    data: &[LabeledImage],
    oracles: &OracleModels,
) -> Result<VariantResult> {
    Ok(VariantResult {
        variant,
        aging: aging_model_eval(model, data, oracles)?,
        identity: identity_preservation_eval(model, data, oracles)?,
        diversity: output_diversity(model, data)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub results: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, v: AblationVariant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == v)
    }
}

/// Trains one model per variant from the same seed and configuration,
/// differing only in the removed loss weight, and evaluates each.
pub fn ablation_run(
    config: TrainConfig,
    train_set: &[LabeledImage],
    eval_set: &[LabeledImage],
    oracles: &OracleModels,
    variants: &[AblationVariant],
) -> Result<AblationReport> {
    let mut results = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = TrainConfig {
            weights: v.weights(config.weights),
            ..config
        };
        log::info!("ablation: training variant {}", v.name());
        let out = train(cfg, train_set, &oracles.phi, None)?;
        results.push(evaluate_variant(v, &out.model, eval_set, oracles)?);
    }
    Ok(AblationReport { results })
}

fn write_rows<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON summary.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// ROC points as `fpr,tpr` rows.
pub fn write_roc_csv(path: &Path, roc: &[(f64, f64)]) -> Result<()> {
    #[derive(Serialize)]
    struct Point {
        fpr: f64,
        tpr: f64,
    }
    write_rows(path, roc.iter().map(|&(fpr, tpr)| Point { fpr, tpr }))
}

impl AgingReport {
    /// One row per target group.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

impl IdentityReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

impl VerificationReport {
    /// Baseline and projected rows, plus one ROC file per method.
    pub fn write_csv(&self, path: &Path, roc_baseline: &Path, roc_agr: &Path) -> Result<()> {
        write_rows(path, [&self.baseline, &self.agr])?;
        write_roc_csv(roc_baseline, &self.roc_baseline)?;
        write_roc_csv(roc_agr, &self.roc_agr)
    }
}

impl AblationReport {
    fn write_side_by_side(&self, path: &Path, value: impl Fn(&VariantResult, usize) -> f64) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header = std::iter::once("target_group").chain(self.results.iter().map(|r| r.variant.name()));
        w.write_record(header)?;
        for t in 0..AGE_GROUPS {
            let row = std::iter::once(t.to_string()).chain(self.results.iter().map(|r| value(r, t).to_string()));
            w.write_record(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Side-by-side tables: mean predicted group per target group and
    /// variant, and EER per target group and variant.
    pub fn write_csv(&self, aging: &Path, identity: &Path) -> Result<()> {
        self.write_side_by_side(aging, |r, t| r.aging.rows[t].mean_predicted_group)?;
        self.write_side_by_side(identity, |r, t| r.identity.rows[t].eer)
    }
}
