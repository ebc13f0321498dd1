//! Reproducible multi-domain identity datasets and identity-balanced batches.
//!
//! A family of domains shares one root seed. Each domain owns a style
//! (per-channel affine transform, procedural background, sensor noise), a
//! pool of training identities and a disjoint pool of test identities. Any
//! leave-one-domain-out split of the family is therefore a pure function of
//! the configuration.

mod archive;
mod ingest;
mod render;
mod sampler;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{load_dataset, save_dataset, DatasetManifest, SampleRole};
pub use ingest::{load_image_directory, parse_market_name};
pub use render::{Geometry, ImageSample, Renderer, MIN_LATENT_DIM};
pub use sampler::{pk_epoch, pk_sample};

use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("identity latent has dimension {found}, renderer expects {expected}")]
    LatentDim { expected: usize, found: usize },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset archive: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Per-channel gain and bias applied to the rendered figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleAffine {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

impl StyleAffine {
    fn as_vector(&self) -> [f64; 6] {
        let [g0, g1, g2] = self.gain;
        let [b0, b1, b2] = self.bias;
        [g0, g1, g2, b0, b1, b2]
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.as_vector()
            .iter()
            .zip(other.as_vector())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub style: StyleAffine,
    pub background_seed: u64,
    pub noise_sigma: f64,
}

/// Minimum L2 distance between the style vectors of any two domains.
pub const MIN_STYLE_SEPARATION: f64 = 0.2;

/// Draws `num_domains` domain styles, rejecting any style closer than
/// [`MIN_STYLE_SEPARATION`] to one already accepted.
pub fn generate_domain_specs(seed: u64, num_domains: usize) -> Result<Vec<DomainSpec>> {
    if num_domains < 2 {
        return Err(DataError::Config(format!(
            "need at least 2 domains for a cross-domain split, got {num_domains}"
        )));
    }
    let mut r = rng::stream(seed, &[rng::tag("domains")]);
    let mut specs: Vec<DomainSpec> = Vec::with_capacity(num_domains);
    let mut attempts = 0usize;
    while specs.len() < num_domains {
        attempts += 1;
        if attempts > 10_000 {
            return Err(DataError::Config(
                "could not place separated domain styles".into(),
            ));
        }
        let style = StyleAffine {
            gain: [(); 3].map(|_| r.random_range(0.55..1.45)),
            bias: [(); 3].map(|_| r.random_range(-0.2..0.2)),
        };
        let background_seed: u64 = r.random();
        let noise_sigma = r.random_range(0.02..0.06);
        if specs
            .iter()
            .any(|s| s.style.distance(&style) < MIN_STYLE_SEPARATION)
        {
            continue;
        }
        specs.push(DomainSpec {
            domain_id: specs.len(),
            style,
            background_seed,
            noise_sigma,
        });
    }
    Ok(specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub pid: usize,
    pub latent: Vec<f64>,
    pub home_domain: usize,
}

/// Which identity pool of a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pool {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub num_domains: usize,
    pub source_domains: Vec<usize>,
    pub held_out_domain: usize,
    /// Training identities per source domain.
    pub pids_per_domain: usize,
    pub images_per_pid: usize,
    /// Identities in each domain's test pool.
    pub test_pids: usize,
    pub test_images_per_pid: usize,
    /// Cameras used in test pools.
    pub num_cameras: usize,
    /// Merge source test pools into training (the larger training protocol).
    #[serde(default)]
    pub include_source_test: bool,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
}

fn default_latent_dim() -> usize {
    MIN_LATENT_DIM
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_domains: 4,
            source_domains: vec![0, 1, 2],
            held_out_domain: 3,
            pids_per_domain: 20,
            images_per_pid: 8,
            test_pids: 20,
            test_images_per_pid: 8,
            num_cameras: 2,
            include_source_test: false,
            geometry: Geometry::default(),
            latent_dim: MIN_LATENT_DIM,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.num_domains < 2 {
            return bad(format!("num_domains must be >= 2, got {}", self.num_domains));
        }
        if self.source_domains.is_empty() {
            return bad("need at least one source domain".into());
        }
        if self.source_domains.contains(&self.held_out_domain) {
            return bad(format!(
                "held-out domain {} is also listed as a source",
                self.held_out_domain
            ));
        }
        let mut seen = self.source_domains.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.source_domains.len() {
            return bad("source domains contain duplicates".into());
        }
        if let Some(d) = self
            .source_domains
            .iter()
            .chain([&self.held_out_domain])
            .find(|&&d| d >= self.num_domains)
        {
            return bad(format!("domain {d} out of range for {} domains", self.num_domains));
        }
        if self.pids_per_domain == 0 || self.images_per_pid == 0 {
            return bad("training pools must be non-empty".into());
        }
        if self.num_cameras < 2 {
            return bad(format!(
                "held-out domain needs at least 2 cameras for query/gallery pairing, got {}",
                self.num_cameras
            ));
        }
        if self.test_pids == 0 || self.test_images_per_pid < 2 * self.num_cameras {
            return bad(format!(
                "test pool needs at least {} images per identity",
                2 * self.num_cameras
            ));
        }
        Renderer::new(self.geometry, self.latent_dim)?;
        Ok(())
    }
}

/// Generator of one domain family.
#[derive(Debug, Clone)]
pub struct SyntheticFamily {
    pub specs: Vec<DomainSpec>,
    renderer: Renderer,
    seed: u64,
    pids_per_domain: usize,
    test_pids: usize,
}

impl SyntheticFamily {
    pub fn new(cfg: &DataConfig) -> Result<Self> {
        Ok(Self {
            specs: generate_domain_specs(cfg.seed, cfg.num_domains)?,
            renderer: Renderer::new(cfg.geometry, cfg.latent_dim)?,
            seed: cfg.seed,
            pids_per_domain: cfg.pids_per_domain,
            test_pids: cfg.test_pids,
        })
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    /// Global pid layout: every domain owns a contiguous block with its
    /// training identities first and its test identities after.
    fn pid(&self, domain: usize, pool: Pool, index: usize) -> usize {
        let block = self.pids_per_domain + self.test_pids;
        let offset = match pool {
            Pool::Train => 0,
            Pool::Test => self.pids_per_domain,
        };
        domain * block + offset + index
    }

    fn identity(&self, domain: usize, pool: Pool, index: usize) -> Identity {
        let pid = self.pid(domain, pool, index);
        let mut r = rng::stream(self.seed, &[rng::tag("identity"), pid as u64]);
        let latent = (0..self.renderer.latent_dim)
            .map(|_| StandardNormal.sample(&mut r))
            .collect();
        Identity {
            pid,
            latent,
            home_domain: domain,
        }
    }

    fn render_pool(
        &self,
        domain: usize,
        pool: Pool,
        pids: usize,
        images: usize,
        cameras: usize,
    ) -> Result<Vec<ImageSample>> {
        let spec = &self.specs[domain];
        let mut out = Vec::with_capacity(pids * images);
        for index in 0..pids {
            let identity = self.identity(domain, pool, index);
            for shot in 0..images {
                let noise_seed = rng::derive_seed(self.seed, &[rng::tag("shot"), shot as u64]);
                out.push(
                    self.renderer
                        .render(&identity, spec, shot % cameras, noise_seed)?,
                );
            }
        }
        Ok(out)
    }
}

/// Training pools of the source domains plus query/gallery of the held-out one.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    /// All training samples, grouped by source domain in `source_domains` order.
    pub train: Vec<ImageSample>,
    pub query: Vec<ImageSample>,
    pub gallery: Vec<ImageSample>,
    pub source_domains: Vec<usize>,
    pub held_out_domain: usize,
    pub geometry: Geometry,
}

impl DatasetSplit {
    /// Training samples of one source domain.
    pub fn train_pool(&self, domain_id: usize) -> impl Iterator<Item = &ImageSample> {
        self.train.iter().filter(move |s| s.domain_id == domain_id)
    }

    /// Distinct training pids in ascending order; position = class index.
    pub fn train_pids(&self) -> Vec<usize> {
        let mut pids: Vec<usize> = self.train.iter().map(|s| s.pid).collect();
        pids.sort_unstable();
        pids.dedup();
        pids
    }

    /// Dense class labels for identities and source domains.
    pub fn label_space(&self) -> LabelSpace {
        let pids = self.train_pids();
        let class_of: BTreeMap<usize, usize> =
            pids.iter().enumerate().map(|(k, &p)| (p, k)).collect();
        let domain_class: BTreeMap<usize, usize> = self
            .source_domains
            .iter()
            .enumerate()
            .map(|(k, &d)| (d, k))
            .collect();
        let mut home = vec![0; pids.len()];
        for s in &self.train {
            home[class_of[&s.pid]] = domain_class[&s.domain_id];
        }
        LabelSpace {
            pids,
            class_of,
            domain_class,
            home_domain_class: home,
        }
    }

    /// Checks the split invariants.
    pub fn validate(&self) -> Result<()> {
        if self
            .train
            .iter()
            .any(|s| s.domain_id == self.held_out_domain)
        {
            return Err(DataError::Config(
                "held-out domain appears in the training pool".into(),
            ));
        }
        for q in &self.query {
            let ok = self
                .gallery
                .iter()
                .any(|g| g.pid == q.pid && g.camera_id != q.camera_id);
            if !ok {
                return Err(DataError::Config(format!(
                    "query pid {} has no gallery match under another camera",
                    q.pid
                )));
            }
        }
        let pixels_ok = self
            .train
            .iter()
            .chain(&self.query)
            .chain(&self.gallery)
            .all(|s| s.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        if !pixels_ok {
            return Err(DataError::Format("pixel outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Maps raw pids and domain ids to dense class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    pub pids: Vec<usize>,
    pub class_of: BTreeMap<usize, usize>,
    pub domain_class: BTreeMap<usize, usize>,
    /// Domain class of each identity class.
    pub home_domain_class: Vec<usize>,
}

impl LabelSpace {
    pub fn num_pids(&self) -> usize {
        self.pids.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_class.len()
    }
}

/// Splits a test pool into queries (the first shot of each camera per
/// identity) and gallery (everything else).
fn split_query_gallery(pool: Vec<ImageSample>) -> (Vec<ImageSample>, Vec<ImageSample>) {
    let mut seen: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for s in pool {
        if seen.insert((s.pid, s.camera_id), ()).is_none() {
            query.push(s);
        } else {
            gallery.push(s);
        }
    }
    (query, gallery)
}

/// Renders the split described by `cfg`.
pub fn build_dataset(cfg: &DataConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let family = SyntheticFamily::new(cfg)?;
    let mut train = Vec::new();
    for &d in &cfg.source_domains {
        train.extend(family.render_pool(
            d,
            Pool::Train,
            cfg.pids_per_domain,
            cfg.images_per_pid,
            cfg.num_cameras,
        )?);
        if cfg.include_source_test {
            train.extend(family.render_pool(
                d,
                Pool::Test,
                cfg.test_pids,
                cfg.test_images_per_pid,
                cfg.num_cameras,
            )?);
        }
    }
    let test = family.render_pool(
        cfg.held_out_domain,
        Pool::Test,
        cfg.test_pids,
        cfg.test_images_per_pid,
        cfg.num_cameras,
    )?;
    let (query, gallery) = split_query_gallery(test);
    let split = DatasetSplit {
        train,
        query,
        gallery,
        source_domains: cfg.source_domains.clone(),
        held_out_domain: cfg.held_out_domain,
        geometry: cfg.geometry,
    };
    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DataConfig {
        DataConfig {
            pids_per_domain: 4,
            images_per_pid: 4,
            test_pids: 3,
            test_images_per_pid: 4,
            ..Default::default()
        }
    }

    #[test]
    fn domain_specs_are_deterministic_and_seed_dependent() {
        let a = generate_domain_specs(0, 4).unwrap();
        let b = generate_domain_specs(0, 4).unwrap();
        let c = generate_domain_specs(1, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().zip(&c).any(|(x, y)| x.style != y.style));
    }

    #[test]
    fn domain_specs_invariants() {
        let specs = generate_domain_specs(3, 6).unwrap();
        for (i, s) in specs.iter().enumerate() {
            assert_eq!(s.domain_id, i);
            assert!(s.style.gain.iter().all(|g| *g > 0.0));
            assert!(s.noise_sigma >= 0.0);
            for t in &specs[..i] {
                assert!(s.style.distance(&t.style) >= MIN_STYLE_SEPARATION);
            }
        }
    }

    #[test]
    fn single_domain_is_rejected() {
        assert!(matches!(generate_domain_specs(7, 1), Err(DataError::Config(_))));
    }

    #[test]
    fn render_is_deterministic_without_noise() {
        let r = Renderer::new(Geometry::default(), 16).unwrap();
        let mut spec = generate_domain_specs(0, 2).unwrap().remove(0);
        spec.noise_sigma = 0.0;
        let id = Identity {
            pid: 3,
            latent: vec![0.4; 16],
            home_domain: 0,
        };
        let a = r.render(&id, &spec, 0, 11).unwrap();
        let b = r.render(&id, &spec, 0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels.dim(), (32, 16, 3));
    }

    #[test]
    fn same_identity_differs_across_domains() {
        let r = Renderer::new(Geometry::default(), 16).unwrap();
        let specs = generate_domain_specs(0, 2).unwrap();
        let id = Identity {
            pid: 1,
            latent: vec![-0.3; 16],
            home_domain: 0,
        };
        let a = r.render(&id, &specs[0], 0, 5).unwrap();
        let b = r.render(&id, &specs[1], 0, 5).unwrap();
        let mad = (&a.pixels - &b.pixels).mapv(f64::abs).mean().unwrap();
        assert!(mad > 0.0);
    }

    #[test]
    fn latent_mismatch_is_an_error() {
        let r = Renderer::new(Geometry::default(), 16).unwrap();
        let spec = generate_domain_specs(0, 2).unwrap().remove(0);
        let id = Identity {
            pid: 0,
            latent: vec![0.0; 8],
            home_domain: 0,
        };
        assert!(matches!(
            r.render(&id, &spec, 0, 0),
            Err(DataError::LatentDim { expected: 16, found: 8 })
        ));
    }

    #[test]
    fn default_split_sizes() {
        let split = build_dataset(&DataConfig::default()).unwrap();
        assert_eq!(split.train.len(), 480);
        assert_eq!(split.query.len() + split.gallery.len(), 160);
        assert_eq!(split.query.len(), 40);
        assert_eq!(split.train_pids().len(), 60);
        let cams: std::collections::BTreeSet<_> =
            split.query.iter().map(|s| s.camera_id).collect();
        assert_eq!(cams.len(), 2);
    }

    #[test]
    fn configuration_errors() {
        let mut cfg = small_cfg();
        cfg.source_domains = vec![0, 1, 3];
        assert!(matches!(build_dataset(&cfg), Err(DataError::Config(_))));
        let mut cfg = small_cfg();
        cfg.num_cameras = 1;
        assert!(matches!(build_dataset(&cfg), Err(DataError::Config(_))));
        let mut cfg = small_cfg();
        cfg.source_domains = vec![];
        assert!(build_dataset(&cfg).is_err());
    }

    #[test]
    fn merging_source_test_pools_grows_training() {
        let base = build_dataset(&small_cfg()).unwrap();
        let merged = build_dataset(&DataConfig {
            include_source_test: true,
            ..small_cfg()
        })
        .unwrap();
        assert!(merged.train.len() > base.train.len());
        assert_eq!(merged.query, base.query);
    }

    #[test]
    fn label_space_maps_home_domains() {
        let split = build_dataset(&small_cfg()).unwrap();
        let labels = split.label_space();
        assert_eq!(labels.num_pids(), 12);
        assert_eq!(labels.num_domains(), 3);
        assert_eq!(labels.home_domain_class[0], 0);
        assert_eq!(labels.home_domain_class[11], 2);
    }
}
