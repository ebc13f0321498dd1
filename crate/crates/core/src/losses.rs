//! Training objectives as pure functions of features and logits.
//!
//! Every loss returns its value together with closed-form gradients w.r.t.
//! each floating-point input, so the functions can be checked in isolation
//! and attached to an autodiff tape as fused nodes. Reductions over the batch
//! are arithmetic means throughout.
//!
//! Similarities between image and text features are `scale · (x · y)` where
//! `scale` is the inverse temperature.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{what}: length {found} does not match batch size {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("class index {index} out of range for {classes} classes")]
    InvalidClass { index: usize, classes: usize },
    #[error("pid {0} has an empty positive set")]
    EmptyPositives(usize),
    #[error("batch contains a single identity; triplet mining needs negatives")]
    SingleIdentity,
    #[error("anchor {0} has no positive in the batch")]
    NoPositive(usize),
    #[error("negative prompt set is empty")]
    NoNegatives,
    #[error("positive/negative prompt tables are misaligned: {0}")]
    Misaligned(String),
    #[error("invalid loss weight: {0}")]
    InvalidWeight(String),
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// How the anchor/positive/negative guiding term is realized in the final stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ApnVariant {
    /// Hinge on Euclidean distances.
    #[default]
    #[serde(rename = "ED")]
    Euclidean,
    /// Hinge on cosine similarities.
    #[serde(rename = "CS")]
    Cosine,
    /// Softmax contrast of each anchor against its positive and all negatives.
    #[serde(rename = "CONTRASTIVE")]
    Contrastive,
    /// Identity cross-entropy whose denominator also spans the negative prompts;
    /// replaces both the image-to-text CE term and the guiding term.
    #[serde(rename = "APNCE")]
    Apnce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the domain classification term during id-token learning.
    pub alpha: f64,
    /// Mix between image-to-text CE and the guiding term in the final stage.
    pub beta: f64,
    pub margin: f64,
    /// Label smoothing of the identity classification loss.
    pub smoothing_eps: f64,
    /// Label smoothing inside the image-to-text CE (and APNCE) targets.
    #[serde(default)]
    pub i2tce_smoothing_eps: f64,
    pub apn_variant: ApnVariant,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.3,
            margin: 0.3,
            smoothing_eps: 0.1,
            i2tce_smoothing_eps: 0.0,
            apn_variant: ApnVariant::Euclidean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LossError::InvalidWeight(msg));
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.margin >= 0.0) {
            return bad(format!("margin must be >= 0, got {}", self.margin));
        }
        for (name, eps) in [
            ("smoothing_eps", self.smoothing_eps),
            ("i2tce_smoothing_eps", self.i2tce_smoothing_eps),
        ] {
            if !(0.0..1.0).contains(&eps) {
                return bad(format!("{name} must lie in [0, 1), got {eps}"));
            }
        }
        Ok(())
    }
}

/// Identity bookkeeping for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    pids: Vec<usize>,
    domains: Vec<usize>,
    unique: Vec<usize>,
    row_of: Vec<usize>,
    positives: Vec<Vec<usize>>,
}

impl BatchLabels {
    /// `pids[i]` and `domains[i]` describe sample `i`. Unique pids are kept in
    /// order of first appearance.
    pub fn new(pids: Vec<usize>, domains: Vec<usize>) -> Result<Self> {
        if pids.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        if domains.len() != pids.len() {
            return Err(LossError::Length {
                what: "domain labels",
                expected: pids.len(),
                found: domains.len(),
            });
        }
        let mut index: BTreeMap<usize, usize> = BTreeMap::new();
        let mut unique = Vec::new();
        let mut positives: Vec<Vec<usize>> = Vec::new();
        let mut row_of = Vec::with_capacity(pids.len());
        for (i, &pid) in pids.iter().enumerate() {
            let row = *index.entry(pid).or_insert_with(|| {
                unique.push(pid);
                positives.push(Vec::new());
                unique.len() - 1
            });
            positives[row].push(i);
            row_of.push(row);
        }
        Ok(Self {
            pids,
            domains,
            unique,
            row_of,
            positives,
        })
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn pids(&self) -> &[usize] {
        &self.pids
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    /// Distinct pids in first-appearance order.
    pub fn unique_pids(&self) -> &[usize] {
        &self.unique
    }

    /// Row of `unique_pids()` holding the pid of sample `i`.
    pub fn row_of(&self) -> &[usize] {
        &self.row_of
    }

    /// Sample indices sharing the pid of unique row `r`.
    pub fn positives(&self, row: usize) -> &[usize] {
        &self.positives[row]
    }

    /// Domain of each unique pid (taken from its first sample).
    pub fn unique_domains(&self) -> Vec<usize> {
        self.positives
            .iter()
            .map(|members| self.domains[members[0]])
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

/// Image-text contrastive loss and its gradients.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub value: f64,
    pub d_image: Array2<f64>,
    pub d_text: Array2<f64>,
    pub d_scale: f64,
}

#[derive(Debug, Clone)]
pub struct LogitLoss {
    pub value: f64,
    pub d_logits: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct FeatureLoss {
    pub value: f64,
    pub d_features: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TripletApnLoss {
    pub value: f64,
    pub d_anchor: Array2<f64>,
    pub d_positive: Array2<f64>,
    pub d_negative: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ContrastApnLoss {
    pub value: f64,
    pub d_anchor: Array2<f64>,
    pub d_positive: Array2<f64>,
    pub d_negative: Array2<f64>,
    pub d_scale: f64,
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn check_cols(what: &'static str, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(LossError::Shape {
            what,
            expected: (b.nrows(), a.ncols()),
            found: b.dim(),
        });
    }
    Ok(())
}

fn check_same(what: &'static str, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(LossError::Shape {
            what,
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(LossError::Length {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

fn check_classes(targets: &[usize], classes: usize) -> Result<()> {
    match targets.iter().find(|&&t| t >= classes) {
        Some(&index) => Err(LossError::InvalidClass { index, classes }),
        None => Ok(()),
    }
}

/// Softmax of one row and its log-sum-exp.
fn softmax_row(z: ArrayView1<f64>) -> (Array1<f64>, f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.mapv(|v| (v - max).exp());
    let total = e.sum();
    (e / total, max + total.ln())
}

/// Mean soft-target cross-entropy over rows; each target row sums to one.
/// Returns the value and `d/dlogits`.
fn soft_cross_entropy(logits: &Array2<f64>, targets: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for ((z, q), mut g) in logits
        .rows()
        .into_iter()
        .zip(targets.rows())
        .zip(grad.rows_mut())
    {
        let (p, lse) = softmax_row(z);
        value += q
            .iter()
            .zip(z.iter())
            .filter(|(qk, _)| **qk != 0.0)
            .map(|(qk, zk)| -qk * (zk - lse))
            .sum::<f64>();
        let mass = q.sum();
        g.assign(&((&p * mass - &q) / n));
    }
    (value / n, grad)
}

/// Target rows with `1 - eps` on the true column and `eps` spread uniformly
/// over the remaining `classes - 1` columns of the first `classes` columns.
fn smoothed_targets(targets: &[usize], classes: usize, width: usize, eps: f64) -> Array2<f64> {
    let mut q = Array2::zeros((targets.len(), width));
    let off = if classes > 1 { eps / (classes - 1) as f64 } else { 0.0 };
    let on = if classes > 1 { 1.0 - eps } else { 1.0 };
    for (i, &t) in targets.iter().enumerate() {
        for k in 0..classes {
            q[[i, k]] = if k == t { on } else { off };
        }
    }
    q
}

fn one_hot_diagonal(rows: usize, width: usize) -> Array2<f64> {
    let mut q = Array2::zeros((rows, width));
    for i in 0..rows {
        q[[i, i]] = 1.0;
    }
    q
}

/// Gradients of `scale · A·Bᵀ`-logits given `d/dlogits`.
fn bilinear_grads(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    dz: &Array2<f64>,
    scale: f64,
) -> (Array2<f64>, Array2<f64>, f64) {
    let da = dz.dot(b) * scale;
    let db = dz.t().dot(a) * scale;
    let ds = (dz * &a.dot(&b.t())).sum();
    (da, db, ds)
}

fn scatter_rows(
    src: &Array2<f64>,
    rows: &[usize],
    target_rows: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((target_rows, src.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        let mut dst = out.row_mut(r);
        dst += &src.row(i);
    }
    out
}

fn gather_rows(src: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    src.select(Axis(0), rows)
}

// ---------------------------------------------------------------------------
// Contrastive prompt-learning losses
// ---------------------------------------------------------------------------

/// Image-to-text contrastive loss: row `i` of `text` is the positive for
/// image `i`; every row of `text` appears in every denominator.
pub fn i2t(image: ArrayView2<f64>, text: ArrayView2<f64>, scale: f64) -> Result<PairLoss> {
    check_same("text batch", &image, &text)?;
    if image.nrows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    let logits = image.dot(&text.t()) * scale;
    let q = one_hot_diagonal(image.nrows(), image.nrows());
    let (value, dz) = soft_cross_entropy(&logits, &q);
    let (d_image, d_text, d_scale) = bilinear_grads(&image, &text, &dz, scale);
    Ok(PairLoss {
        value,
        d_image,
        d_text,
        d_scale,
    })
}

/// Text-to-image contrastive loss with every in-batch image of the pid as a
/// positive. Row `r` of `text_ids` belongs to `labels.unique_pids()[r]`.
pub fn t2i(
    image: ArrayView2<f64>,
    text_ids: ArrayView2<f64>,
    labels: &BatchLabels,
    scale: f64,
) -> Result<PairLoss> {
    check_cols("text features", &image, &text_ids)?;
    check_len("image rows", labels.len(), image.nrows())?;
    check_len("text rows", labels.unique_pids().len(), text_ids.nrows())?;
    let batch = image.nrows();
    let mut q = Array2::zeros((text_ids.nrows(), batch));
    for r in 0..text_ids.nrows() {
        let members = labels.positives(r);
        if members.is_empty() {
            return Err(LossError::EmptyPositives(labels.unique_pids()[r]));
        }
        let w = 1.0 / members.len() as f64;
        for &p in members {
            q[[r, p]] = w;
        }
    }
    let logits = text_ids.dot(&image.t()) * scale;
    let (value, dz) = soft_cross_entropy(&logits, &q);
    let (d_text, d_image, d_scale) = bilinear_grads(&text_ids, &image, &dz, scale);
    Ok(PairLoss {
        value,
        d_image,
        d_text,
        d_scale,
    })
}

/// Softmax cross-entropy of domain logits against domain class indices.
pub fn domain(logits: ArrayView2<f64>, targets: &[usize]) -> Result<LogitLoss> {
    check_len("domain targets", logits.nrows(), targets.len())?;
    if targets.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    check_classes(targets, logits.ncols())?;
    let q = smoothed_targets(targets, logits.ncols(), logits.ncols(), 0.0);
    let (value, d_logits) = soft_cross_entropy(&logits.to_owned(), &q);
    Ok(LogitLoss { value, d_logits })
}

#[derive(Debug, Clone)]
pub struct PromptStageLoss {
    pub value: f64,
    pub i2t: f64,
    pub t2i: f64,
    pub domain: f64,
    pub d_image: Array2<f64>,
    pub d_text_ids: Array2<f64>,
    pub d_domain_logits: Array2<f64>,
    pub d_scale: f64,
}

/// `i2t + t2i + alpha · domain` for prompt learning. `text_ids` holds one row
/// per unique pid; `domain_logits` holds one row per unique pid, classified
/// against `domain_targets`.
pub fn prompt_stage(
    image: ArrayView2<f64>,
    text_ids: ArrayView2<f64>,
    labels: &BatchLabels,
    domain_logits: ArrayView2<f64>,
    domain_targets: &[usize],
    alpha: f64,
    scale: f64,
) -> Result<PromptStageLoss> {
    check_len("text rows", labels.unique_pids().len(), text_ids.nrows())?;
    let text_batch = gather_rows(&text_ids, labels.row_of());
    let l_i2t = i2t(image, text_batch.view(), scale)?;
    let l_t2i = t2i(image, text_ids, labels, scale)?;
    let l_dom = domain(domain_logits, domain_targets)?;
    let d_text_ids =
        scatter_rows(&l_i2t.d_text, labels.row_of(), text_ids.nrows()) + &l_t2i.d_text;
    Ok(PromptStageLoss {
        value: l_i2t.value + l_t2i.value + alpha * l_dom.value,
        i2t: l_i2t.value,
        t2i: l_t2i.value,
        domain: l_dom.value,
        d_image: l_i2t.d_image + &l_t2i.d_image,
        d_text_ids,
        d_domain_logits: l_dom.d_logits * alpha,
        d_scale: l_i2t.d_scale + l_t2i.d_scale,
    })
}

// ---------------------------------------------------------------------------
// Image-encoder losses
// ---------------------------------------------------------------------------

/// Identity classification cross-entropy with label smoothing.
pub fn id_loss(logits: ArrayView2<f64>, targets: &[usize], eps: f64) -> Result<LogitLoss> {
    check_len("identity targets", logits.nrows(), targets.len())?;
    if targets.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    check_classes(targets, logits.ncols())?;
    let q = smoothed_targets(targets, logits.ncols(), logits.ncols(), eps);
    let (value, d_logits) = soft_cross_entropy(&logits.to_owned(), &q);
    Ok(LogitLoss { value, d_logits })
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `d/da ‖a - b‖` (and the negation for `b`); zero at coincident points.
fn euclidean_grad(a: ArrayView1<f64>, b: ArrayView1<f64>, dist: f64) -> Array1<f64> {
    if dist > 0.0 {
        (&a - &b) / dist
    } else {
        Array1::zeros(a.len())
    }
}

/// Batch-hard triplet loss on Euclidean distances.
pub fn triplet(features: ArrayView2<f64>, pids: &[usize], margin: f64) -> Result<FeatureLoss> {
    let batch = features.nrows();
    check_len("triplet labels", batch, pids.len())?;
    if batch == 0 {
        return Err(LossError::EmptyBatch);
    }
    if pids.iter().all(|&p| p == pids[0]) {
        return Err(LossError::SingleIdentity);
    }
    let mut dist = Array2::zeros((batch, batch));
    for i in 0..batch {
        for j in (i + 1)..batch {
            let d = euclidean(features.row(i), features.row(j));
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let mut value = 0.0;
    let mut d_features = Array2::zeros(features.dim());
    let w = 1.0 / batch as f64;
    for i in 0..batch {
        let mut hardest_pos: Option<usize> = None;
        let mut hardest_neg: Option<usize> = None;
        for j in 0..batch {
            if j == i {
                continue;
            }
            if pids[j] == pids[i] {
                if hardest_pos.is_none_or(|p| dist[[i, j]] > dist[[i, p]]) {
                    hardest_pos = Some(j);
                }
            } else if hardest_neg.is_none_or(|n| dist[[i, j]] < dist[[i, n]]) {
                hardest_neg = Some(j);
            }
        }
        let p = hardest_pos.ok_or(LossError::NoPositive(i))?;
        let n = hardest_neg.expect("at least two identities present");
        let arg = dist[[i, p]] - dist[[i, n]] + margin;
        if arg > 0.0 {
            value += arg;
            let gp = euclidean_grad(features.row(i), features.row(p), dist[[i, p]]) * w;
            let gn = euclidean_grad(features.row(i), features.row(n), dist[[i, n]]) * w;
            {
                let mut row = d_features.row_mut(i);
                row += &gp;
                row -= &gn;
            }
            {
                let mut row = d_features.row_mut(p);
                row -= &gp;
            }
            let mut row = d_features.row_mut(n);
            row += &gn;
        }
    }
    Ok(FeatureLoss {
        value: value * w,
        d_features,
    })
}

/// Image-to-text cross-entropy against one text feature per training pid.
pub fn i2tce(
    image: ArrayView2<f64>,
    text_all: ArrayView2<f64>,
    targets: &[usize],
    scale: f64,
    eps: f64,
) -> Result<PairLoss> {
    check_cols("text table", &image, &text_all)?;
    check_len("i2tce targets", image.nrows(), targets.len())?;
    if targets.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    check_classes(targets, text_all.nrows())?;
    let logits = image.dot(&text_all.t()) * scale;
    let q = smoothed_targets(targets, text_all.nrows(), text_all.nrows(), eps);
    let (value, dz) = soft_cross_entropy(&logits, &q);
    let (d_image, d_text, d_scale) = bilinear_grads(&image, &text_all, &dz, scale);
    Ok(PairLoss {
        value,
        d_image,
        d_text,
        d_scale,
    })
}

// ---------------------------------------------------------------------------
// Bidirectional guiding losses
// ---------------------------------------------------------------------------

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

/// `d/da cos(a, b)`.
fn cosine_grad(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    let c = a.dot(&b) / (na * nb);
    &b / (na * nb) - &a * (c / (na * na))
}

/// Hinge between anchor-positive and anchor-negative measures. For the
/// Euclidean variant the measure is a distance, for the cosine variant a
/// similarity, and the hinge is oriented so the loss always shrinks as anchors
/// approach positives and recede from negatives.
pub fn apn_triplet(
    anchor: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negative: ArrayView2<f64>,
    margin: f64,
    variant: ApnVariant,
) -> Result<TripletApnLoss> {
    check_same("positive features", &anchor, &positive)?;
    check_same("negative features", &anchor, &negative)?;
    let batch = anchor.nrows();
    if batch == 0 {
        return Err(LossError::EmptyBatch);
    }
    let w = 1.0 / batch as f64;
    let mut value = 0.0;
    let mut d_anchor = Array2::zeros(anchor.dim());
    let mut d_positive = Array2::zeros(anchor.dim());
    let mut d_negative = Array2::zeros(anchor.dim());
    for i in 0..batch {
        let (a, p, n) = (anchor.row(i), positive.row(i), negative.row(i));
        match variant {
            ApnVariant::Euclidean => {
                let dp = euclidean(a, p);
                let dn = euclidean(a, n);
                let arg = dp - dn + margin;
                if arg > 0.0 {
                    value += arg;
                    let gp = euclidean_grad(a, p, dp) * w;
                    let gn = euclidean_grad(a, n, dn) * w;
                    d_anchor.row_mut(i).assign(&(&gp - &gn));
                    d_positive.row_mut(i).assign(&(-&gp));
                    d_negative.row_mut(i).assign(&gn);
                }
            }
            ApnVariant::Cosine => {
                let arg = cosine(a, n) - cosine(a, p) + margin;
                if arg > 0.0 {
                    value += arg;
                    let ga = (cosine_grad(a, n) - cosine_grad(a, p)) * w;
                    d_anchor.row_mut(i).assign(&ga);
                    d_positive.row_mut(i).assign(&(cosine_grad(p, a) * -w));
                    d_negative.row_mut(i).assign(&(cosine_grad(n, a) * w));
                }
            }
            other => {
                return Err(LossError::InvalidWeight(format!(
                    "{other:?} is not a triplet-style guiding variant"
                )))
            }
        }
    }
    Ok(TripletApnLoss {
        value: value * w,
        d_anchor,
        d_positive,
        d_negative,
    })
}

/// Contrastive guiding loss: row `i` of `positive` is the target for anchor
/// `i`; the candidates are all `B` positives followed by all negatives.
pub fn apn_contrastive(
    anchor: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    scale: f64,
) -> Result<ContrastApnLoss> {
    check_same("positive features", &anchor, &positive)?;
    check_cols("negative features", &anchor, &negatives)?;
    if negatives.nrows() == 0 {
        return Err(LossError::NoNegatives);
    }
    let batch = anchor.nrows();
    if batch == 0 {
        return Err(LossError::EmptyBatch);
    }
    let candidates = ndarray::concatenate(Axis(0), &[positive, negatives])
        .expect("column counts checked");
    let logits = anchor.dot(&candidates.t()) * scale;
    let q = one_hot_diagonal(batch, candidates.nrows());
    let (value, dz) = soft_cross_entropy(&logits, &q);
    let (d_anchor, d_cand, d_scale) = bilinear_grads(&anchor, &candidates.view(), &dz, scale);
    let d_positive = d_cand.slice(ndarray::s![..batch, ..]).to_owned();
    let d_negative = d_cand.slice(ndarray::s![batch.., ..]).to_owned();
    Ok(ContrastApnLoss {
        value,
        d_anchor,
        d_positive,
        d_negative,
        d_scale,
    })
}

/// Identity cross-entropy over positive prompts whose softmax denominator also
/// contains every negative prompt. `pid_rows[i]` is the row of `pos_star` for
/// anchor `i`; positive and negative tables are aligned row by row.
pub fn apnce(
    anchor: ArrayView2<f64>,
    pos_star: ArrayView2<f64>,
    neg_star: ArrayView2<f64>,
    pid_rows: &[usize],
    scale: f64,
    eps: f64,
) -> Result<ContrastApnLoss> {
    if pos_star.dim() != neg_star.dim() {
        return Err(LossError::Misaligned(format!(
            "{} positive rows vs {} negative rows",
            pos_star.nrows(),
            neg_star.nrows()
        )));
    }
    check_cols("prompt tables", &anchor, &pos_star)?;
    check_len("anchor pid rows", anchor.nrows(), pid_rows.len())?;
    if anchor.nrows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if pos_star.nrows() == 0 {
        return Err(LossError::NoNegatives);
    }
    if let Some(&bad) = pid_rows.iter().find(|&&r| r >= pos_star.nrows()) {
        return Err(LossError::Misaligned(format!(
            "anchor maps to row {bad} but only {} prompt rows exist",
            pos_star.nrows()
        )));
    }
    let m = pos_star.nrows();
    let candidates =
        ndarray::concatenate(Axis(0), &[pos_star, neg_star]).expect("column counts checked");
    let logits = anchor.dot(&candidates.t()) * scale;
    let q = smoothed_targets(pid_rows, m, 2 * m, eps);
    let (value, dz) = soft_cross_entropy(&logits, &q);
    let (d_anchor, d_cand, d_scale) = bilinear_grads(&anchor, &candidates.view(), &dz, scale);
    Ok(ContrastApnLoss {
        value,
        d_anchor,
        d_positive: d_cand.slice(ndarray::s![..m, ..]).to_owned(),
        d_negative: d_cand.slice(ndarray::s![m.., ..]).to_owned(),
        d_scale,
    })
}

// ---------------------------------------------------------------------------
// Stage assemblies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InitialStageLoss {
    pub value: f64,
    pub id: f64,
    pub triplet: f64,
    pub d_class_logits: Array2<f64>,
    pub d_image: Array2<f64>,
}

/// Identity CE plus batch-hard triplet, used before any text supervision.
pub fn initial_stage(
    class_logits: ArrayView2<f64>,
    image: ArrayView2<f64>,
    pids: &[usize],
    weights: &LossWeights,
) -> Result<InitialStageLoss> {
    let id = id_loss(class_logits, pids, weights.smoothing_eps)?;
    let tri = triplet(image, pids, weights.margin)?;
    Ok(InitialStageLoss {
        value: id.value + tri.value,
        id: id.value,
        triplet: tri.value,
        d_class_logits: id.d_logits,
        d_image: tri.d_features,
    })
}

/// Inputs of the final-stage objective. `text_pos[k]` / `text_neg[k]` are the
/// domain-invariant and domain-relevant prompt features of training pid `k`.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneInputs<'a> {
    pub class_logits: ArrayView2<'a, f64>,
    pub image: ArrayView2<'a, f64>,
    pub text_pos: ArrayView2<'a, f64>,
    pub text_neg: ArrayView2<'a, f64>,
    pub pids: &'a [usize],
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneLoss {
    pub value: f64,
    pub id: f64,
    pub triplet: f64,
    /// Zero when the APNCE variant replaces it.
    pub i2tce: f64,
    /// Guiding term (ED/CS/contrastive) or the fused APNCE value.
    pub apn: f64,
    pub d_class_logits: Array2<f64>,
    pub d_image: Array2<f64>,
    pub d_text_pos: Array2<f64>,
    pub d_text_neg: Array2<f64>,
    pub d_scale: f64,
}

/// `id + triplet + (1 - beta)·i2tce + beta·apn`, or `id + triplet + apnce`.
pub fn finetune_stage(inputs: FinetuneInputs<'_>, weights: &LossWeights) -> Result<FinetuneLoss> {
    let FinetuneInputs {
        class_logits,
        image,
        text_pos,
        text_neg,
        pids,
        scale,
    } = inputs;
    if text_pos.dim() != text_neg.dim() {
        return Err(LossError::Misaligned(format!(
            "{:?} positive table vs {:?} negative table",
            text_pos.dim(),
            text_neg.dim()
        )));
    }
    check_classes(pids, text_pos.nrows())?;
    let id = id_loss(class_logits, pids, weights.smoothing_eps)?;
    let tri = triplet(image, pids, weights.margin)?;
    let classes = text_pos.nrows();
    let mut d_image = tri.d_features;
    let mut d_text_pos = Array2::zeros(text_pos.dim());
    let mut d_text_neg = Array2::zeros(text_neg.dim());
    let mut d_scale = 0.0;

    if weights.apn_variant == ApnVariant::Apnce {
        let l = apnce(
            image,
            text_pos,
            text_neg,
            pids,
            scale,
            weights.i2tce_smoothing_eps,
        )?;
        d_image += &l.d_anchor;
        d_text_pos += &l.d_positive;
        d_text_neg += &l.d_negative;
        return Ok(FinetuneLoss {
            value: id.value + tri.value + l.value,
            id: id.value,
            triplet: tri.value,
            i2tce: 0.0,
            apn: l.value,
            d_class_logits: id.d_logits,
            d_image,
            d_text_pos,
            d_text_neg,
            d_scale: l.d_scale,
        });
    }

    let beta = weights.beta;
    let ce = i2tce(image, text_pos, pids, scale, weights.i2tce_smoothing_eps)?;
    d_image.scaled_add(1.0 - beta, &ce.d_image);
    d_text_pos.scaled_add(1.0 - beta, &ce.d_text);
    d_scale += (1.0 - beta) * ce.d_scale;

    let tf_p = gather_rows(&text_pos, pids);
    let apn = match weights.apn_variant {
        ApnVariant::Euclidean | ApnVariant::Cosine => {
            let tf_n = gather_rows(&text_neg, pids);
            let l = apn_triplet(
                image,
                tf_p.view(),
                tf_n.view(),
                weights.margin,
                weights.apn_variant,
            )?;
            d_image.scaled_add(beta, &l.d_anchor);
            d_text_pos.scaled_add(beta, &scatter_rows(&l.d_positive, pids, classes));
            d_text_neg.scaled_add(beta, &scatter_rows(&l.d_negative, pids, classes));
            l.value
        }
        ApnVariant::Contrastive => {
            let l = apn_contrastive(image, tf_p.view(), text_neg, scale)?;
            d_image.scaled_add(beta, &l.d_anchor);
            d_text_pos.scaled_add(beta, &scatter_rows(&l.d_positive, pids, classes));
            d_text_neg.scaled_add(beta, &l.d_negative);
            d_scale += beta * l.d_scale;
            l.value
        }
        ApnVariant::Apnce => unreachable!("handled above"),
    };
    Ok(FinetuneLoss {
        value: id.value + tri.value + (1.0 - beta) * ce.value + beta * apn,
        id: id.value,
        triplet: tri.value,
        i2tce: ce.value,
        apn,
        d_class_logits: id.d_logits,
        d_image,
        d_text_pos,
        d_text_neg,
        d_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const LN2: f64 = std::f64::consts::LN_2;

    fn labels(pids: &[usize]) -> BatchLabels {
        BatchLabels::new(pids.to_vec(), vec![0; pids.len()]).unwrap()
    }

    #[test]
    fn i2t_equal_similarities_gives_ln_batch() {
        let v = Array2::from_elem((3, 2), 0.5);
        let l = i2t(v.view(), v.view(), 14.0).unwrap();
        assert!((l.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn i2t_two_by_two_hand_value() {
        // s = [[2, 0], [0, 2]] with unit scale.
        let v = array![[2.0_f64.sqrt(), 0.0], [0.0, 2.0_f64.sqrt()]];
        let l = i2t(v.view(), v.view(), 1.0).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 0.126_928_011_042_972_6).abs() < 1e-12);
    }

    #[test]
    fn i2t_rejects_dim_mismatch() {
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((2, 4));
        assert!(matches!(i2t(a.view(), b.view(), 1.0), Err(LossError::Shape { .. })));
    }

    #[test]
    fn t2i_equal_similarities_gives_ln_batch() {
        let v = Array2::from_elem((4, 2), 0.3);
        let lab = labels(&[7, 7, 9, 9]);
        let t = Array2::from_elem((2, 2), 0.3);
        let l = t2i(v.view(), t.view(), &lab, 5.0).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn domain_uniform_logits() {
        let z = Array2::zeros((3, 4));
        let l = domain(z.view(), &[0, 1, 3]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            domain(z.view(), &[0, 4, 1]),
            Err(LossError::InvalidClass { index: 4, classes: 4 })
        ));
    }

    #[test]
    fn domain_confident_true_class_tends_to_zero() {
        let z = array![[60.0, 0.0, 0.0]];
        assert!(domain(z.view(), &[0]).unwrap().value < 1e-20);
    }

    #[test]
    fn id_loss_smoothing_is_invariant_under_uniform_logits() {
        let z = Array2::zeros((1, 2));
        assert!((id_loss(z.view(), &[1], 0.1).unwrap().value - LN2).abs() < 1e-12);
        let z = Array2::zeros((2, 5));
        assert!((id_loss(z.view(), &[0, 4], 0.0).unwrap().value - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn triplet_identical_features_give_margin() {
        let v = Array2::from_elem((4, 3), 0.5);
        let l = triplet(v.view(), &[0, 0, 1, 1], 0.3).unwrap();
        assert!((l.value - 0.3).abs() < 1e-15);
        assert!(l.d_features.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn triplet_inactive_when_separated() {
        let v = array![[1.0, 0.0], [0.99, 0.01], [-1.0, 0.0], [-0.99, 0.01]];
        let l = triplet(v.view(), &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn triplet_errors() {
        let v = Array2::from_elem((3, 2), 0.1);
        assert_eq!(
            triplet(v.view(), &[2, 2, 2], 0.3).unwrap_err(),
            LossError::SingleIdentity
        );
        assert_eq!(
            triplet(v.view(), &[1, 2, 2], 0.3).unwrap_err(),
            LossError::NoPositive(0)
        );
    }

    #[test]
    fn apn_unit_vector_case_is_zero_for_both_variants() {
        let a = array![[1.0, 0.0]];
        let p = array![[1.0, 0.0]];
        let n = array![[0.0, 1.0]];
        for variant in [ApnVariant::Euclidean, ApnVariant::Cosine] {
            let l = apn_triplet(a.view(), p.view(), n.view(), 0.3, variant).unwrap();
            assert_eq!(l.value, 0.0);
        }
    }

    #[test]
    fn apn_ed_hinge_boundary() {
        let a = array![[1.0, 0.0]];
        let n = array![[0.99, (1.0f64 - 0.9801).sqrt()]];
        let dn = euclidean(a.row(0), n.row(0));
        let l = apn_triplet(a.view(), a.view(), n.view(), 0.3, ApnVariant::Euclidean).unwrap();
        assert!((l.value - (0.3 - dn).max(0.0)).abs() < 1e-15);
        assert!(dn < 0.3 && l.value > 0.0);
    }

    #[test]
    fn apn_contrastive_requires_negatives() {
        let a = Array2::from_elem((2, 2), 0.1);
        let empty = Array2::zeros((0, 2));
        assert_eq!(
            apn_contrastive(a.view(), a.view(), empty.view(), 1.0).unwrap_err(),
            LossError::NoNegatives
        );
    }

    #[test]
    fn apn_contrastive_equal_similarities() {
        let a = Array2::from_elem((2, 3), 0.2);
        let l = apn_contrastive(a.view(), a.view(), a.view(), 3.0).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn apnce_rejects_misaligned_tables() {
        let a = Array2::from_elem((2, 3), 0.2);
        let p = Array2::from_elem((3, 3), 0.2);
        let n = Array2::from_elem((2, 3), 0.2);
        assert!(matches!(
            apnce(a.view(), p.view(), n.view(), &[0, 1], 1.0, 0.0),
            Err(LossError::Misaligned(_))
        ));
        assert!(matches!(
            apnce(a.view(), p.view(), p.view(), &[0, 3], 1.0, 0.0),
            Err(LossError::Misaligned(_))
        ));
    }

    #[test]
    fn apnce_dominates_positive_only_ce() {
        let a = array![[0.6, 0.8], [1.0, 0.0]];
        let p = array![[0.0, 1.0], [0.8, 0.6]];
        let n = array![[-0.6, 0.8], [0.3, -0.95]];
        let fused = apnce(a.view(), p.view(), n.view(), &[1, 1], 4.0, 0.0).unwrap();
        let plain = i2tce(a.view(), p.view(), &[1, 1], 4.0, 0.0).unwrap();
        assert!(fused.value >= plain.value);
    }

    #[test]
    fn finetune_apnce_replaces_both_terms() {
        let logits = Array2::zeros((4, 2));
        let img = array![[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-0.6, 0.8]];
        let tp = array![[1.0, 0.0], [0.0, 1.0]];
        let tn = array![[0.6, 0.8], [0.8, -0.6]];
        let pids = [0, 0, 1, 1];
        let w = LossWeights {
            apn_variant: ApnVariant::Apnce,
            ..Default::default()
        };
        let inputs = FinetuneInputs {
            class_logits: logits.view(),
            image: img.view(),
            text_pos: tp.view(),
            text_neg: tn.view(),
            pids: &pids,
            scale: 2.0,
        };
        let l = finetune_stage(inputs, &w).unwrap();
        let fused = apnce(img.view(), tp.view(), tn.view(), &pids, 2.0, 0.0).unwrap();
        assert_eq!(l.i2tce, 0.0);
        assert_eq!(l.value, l.id + l.triplet + fused.value);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            beta: 1.5,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        let w = LossWeights {
            smoothing_eps: 1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn batch_labels_structure() {
        let lab = BatchLabels::new(vec![5, 3, 5, 8], vec![1, 0, 1, 2]).unwrap();
        assert_eq!(lab.unique_pids(), &[5, 3, 8]);
        assert_eq!(lab.row_of(), &[0, 1, 0, 2]);
        assert_eq!(lab.positives(0), &[0, 2]);
        assert_eq!(lab.unique_domains(), vec![1, 0, 2]);
    }
}
