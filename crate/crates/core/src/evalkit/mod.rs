//! Retrieval evaluation: ranking with same-camera filtering, mAP and CMC, an
//! independent average-precision oracle and the cross-domain protocol runner.

mod protocol;

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Mat;
use crate::encoders::{encode_images, EncoderError};
use crate::pipeline::{PipelineError, TrainedModel};
use crate::synthdata::{DataError, ImageSample};

pub use protocol::{evaluate_targets, run_protocol, Protocol, ProtocolReport, ProtocolRun};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no query has a relevant gallery entry")]
    NoValidQueries,
    #[error("relevance list has no relevant item")]
    NoRelevant,
    #[error("{what}: {found} entries, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("feature dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("protocol needs at least two domains, got {0}")]
    TooFewDomains(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("feature dump: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub pid: usize,
    pub camera_id: usize,
    pub domain_id: usize,
}

impl From<&ImageSample> for SampleMeta {
    fn from(s: &ImageSample) -> Self {
        Self {
            pid: s.pid,
            camera_id: s.camera_id,
            domain_id: s.domain_id,
        }
    }
}

pub fn metas(samples: &[ImageSample]) -> Vec<SampleMeta> {
    samples.iter().map(SampleMeta::from).collect()
}

/// Unit-norm image features, one row per sample.
pub fn extract_features(model: &TrainedModel, samples: &[ImageSample]) -> Result<Mat> {
    let cfg = &model.model.config;
    let mut out = Mat::zeros((samples.len(), cfg.embed_dim));
    for (c, chunk) in samples.chunks(64).enumerate() {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let f = encode_images(&model.model.image, cfg, &refs)?;
        out.slice_mut(ndarray::s![c * 64..c * 64 + chunk.len(), ..])
            .assign(&f);
    }
    Ok(out)
}

/// Ranked gallery of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: usize,
    /// Valid gallery indices, most similar first.
    pub order: Vec<usize>,
    /// Whether `order[r]` shares the query's identity.
    pub relevant: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankingResult {
    pub queries: Vec<QueryRanking>,
    /// Queries without any relevant valid gallery entry.
    pub dropped: Vec<usize>,
}

/// Sorts `candidates` by descending score, ascending index on ties.
fn sort_desc(candidates: &mut [usize], scores: &[f64]) {
    candidates.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
}

/// Ranks the gallery for every query by dot-product similarity, excluding
/// gallery entries that share both identity and camera with the query.
pub fn rank(
    query_feats: &Mat,
    gallery_feats: &Mat,
    query_meta: &[SampleMeta],
    gallery_meta: &[SampleMeta],
) -> Result<RankingResult> {
    if query_meta.len() != query_feats.nrows() {
        return Err(EvalError::Length {
            what: "query metadata",
            expected: query_feats.nrows(),
            found: query_meta.len(),
        });
    }
    if gallery_meta.len() != gallery_feats.nrows() {
        return Err(EvalError::Length {
            what: "gallery metadata",
            expected: gallery_feats.nrows(),
            found: gallery_meta.len(),
        });
    }
    if query_feats.ncols() != gallery_feats.ncols() {
        return Err(EvalError::Dim(query_feats.ncols(), gallery_feats.ncols()));
    }
    let sims = query_feats.dot(&gallery_feats.t());
    let mut out = RankingResult::default();
    for (qi, q) in query_meta.iter().enumerate() {
        let row = sims.row(qi);
        let scores = row.as_slice().expect("contiguous row");
        let mut order: Vec<usize> = (0..gallery_meta.len())
            .filter(|&g| !(gallery_meta[g].pid == q.pid && gallery_meta[g].camera_id == q.camera_id))
            .collect();
        sort_desc(&mut order, scores);
        let relevant: Vec<bool> = order.iter().map(|&g| gallery_meta[g].pid == q.pid).collect();
        if relevant.iter().any(|&r| r) {
            out.queries.push(QueryRanking {
                query: qi,
                order,
                relevant,
            });
        } else {
            out.dropped.push(qi);
        }
    }
    Ok(out)
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> Result<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(EvalError::NoRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// Mean average precision over the valid queries.
pub fn compute_map(rankings: &RankingResult) -> Result<f64> {
    if rankings.queries.is_empty() {
        return Err(EvalError::NoValidQueries);
    }
    let mut sum = 0.0;
    for q in &rankings.queries {
        sum += average_precision(&q.relevant)?;
    }
    Ok(sum / rankings.queries.len() as f64)
}

/// Fraction of valid queries whose first relevant entry is within the top `k`,
/// for each `k` in `ks`.
pub fn compute_cmc(rankings: &RankingResult, ks: &[usize]) -> Result<Vec<f64>> {
    if rankings.queries.is_empty() {
        return Err(EvalError::NoValidQueries);
    }
    let firsts: Vec<usize> = rankings
        .queries
        .iter()
        .map(|q| q.relevant.iter().position(|&r| r).expect("valid query"))
        .collect();
    let n = firsts.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| firsts.iter().filter(|&&f| f < k).count() as f64 / n)
        .collect())
}

/// Average precision by brute force: orders items by score (index breaks
/// ties) with a selection loop, then recounts hits above every relevant item.
pub fn oracle_ap(scores: &[f64], relevance: &[bool]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(EvalError::Length {
            what: "relevance",
            expected: scores.len(),
            found: relevance.len(),
        });
    }
    let n = scores.len();
    let mut taken = vec![false; n];
    let mut ranked = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            best = match best {
                Some(b) if scores[b] >= scores[i] => Some(b),
                _ => Some(i),
            };
        }
        let b = best.expect("item left");
        taken[b] = true;
        ranked.push(relevance[b]);
    }
    let total = ranked.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(EvalError::NoRelevant);
    }
    let mut ap = 0.0;
    for k in 0..n {
        if ranked[k] {
            let mut above = 0;
            for r in &ranked[..=k] {
                if *r {
                    above += 1;
                }
            }
            ap += above as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / total as f64)
}

/// Retrieval metrics of one query/gallery evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub ks: Vec<usize>,
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub dropped_queries: usize,
    /// Expected Rank-1 of a uniformly random ordering.
    pub random_rank1: f64,
    pub stages: String,
}

/// Evaluates `model` on a query/gallery pair.
pub fn evaluate(model: &TrainedModel, query: &[ImageSample], gallery: &[ImageSample]) -> Result<EvalReport> {
    let qf = extract_features(model, query)?;
    let gf = extract_features(model, gallery)?;
    let r = rank(&qf, &gf, &metas(query), &metas(gallery))?;
    Ok(EvalReport {
        map: compute_map(&r)?,
        ks: DEFAULT_KS.to_vec(),
        cmc: compute_cmc(&r, &DEFAULT_KS)?,
        num_queries: r.queries.len(),
        dropped_queries: r.dropped.len(),
        random_rank1: random_rank1(&r),
        stages: model.stage_label(),
    })
}

/// Mean over valid queries of the fraction of relevant entries in the ranking.
pub fn random_rank1(r: &RankingResult) -> f64 {
    if r.queries.is_empty() {
        return 0.0;
    }
    r.queries
        .iter()
        .map(|q| q.relevant.iter().filter(|&&x| x).count() as f64 / q.relevant.len() as f64)
        .sum::<f64>()
        / r.queries.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSidecar {
    pub rows: usize,
    pub cols: usize,
    pub pids: Vec<usize>,
    pub camera_ids: Vec<usize>,
    pub domain_ids: Vec<usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `features` as row-major little-endian `f64` to `bin` and the
/// per-row metadata to `sidecar` (JSON).
pub fn write_feature_dump(features: &Mat, meta: &[SampleMeta], bin: &Path, sidecar: &Path) -> Result<()> {
    if meta.len() != features.nrows() {
        return Err(EvalError::Length {
            what: "feature metadata",
            expected: features.nrows(),
            found: meta.len(),
        });
    }
    let mut bytes = Vec::with_capacity(features.len() * 8);
    for v in features.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin, bytes).map_err(io_err(bin))?;
    let side = FeatureSidecar {
        rows: features.nrows(),
        cols: features.ncols(),
        pids: meta.iter().map(|m| m.pid).collect(),
        camera_ids: meta.iter().map(|m| m.camera_id).collect(),
        domain_ids: meta.iter().map(|m| m.domain_id).collect(),
    };
    let json = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
    fs::write(sidecar, json).map_err(io_err(sidecar))
}

pub fn read_feature_dump(bin: &Path, sidecar: &Path) -> Result<(Mat, Vec<SampleMeta>)> {
    let side: FeatureSidecar = serde_json::from_slice(&fs::read(sidecar).map_err(io_err(sidecar))?)
        .map_err(|e| EvalError::Format(e.to_string()))?;
    let bytes = fs::read(bin).map_err(io_err(bin))?;
    if bytes.len() != side.rows * side.cols * 8
        || side.pids.len() != side.rows
        || side.camera_ids.len() != side.rows
        || side.domain_ids.len() != side.rows
    {
        return Err(EvalError::Format("dump and sidecar disagree on size".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let mat = Mat::from_shape_vec((side.rows, side.cols), values)
        .map_err(|e| EvalError::Format(e.to_string()))?;
    let meta = (0..side.rows)
        .map(|i| SampleMeta {
            pid: side.pids[i],
            camera_id: side.camera_ids[i],
            domain_id: side.domain_ids[i],
        })
        .collect();
    Ok((mat, meta))
}

#[cfg(test)]
mod tests;
