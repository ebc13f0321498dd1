//! Procedural rendering of identities under a domain style.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, DomainSpec, Identity};
use crate::rng;

/// Image dimensions (rows, columns, channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            height: 32,
            width: 16,
            channels: 3,
        }
    }
}

impl Geometry {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// One rendered observation of an identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `height × width × channels`, values in `[0, 1]`.
    pub pixels: Array3<f64>,
    pub pid: usize,
    pub domain_id: usize,
    pub camera_id: usize,
}

/// Renderer with a fixed latent width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Renderer {
    pub geometry: Geometry,
    pub latent_dim: usize,
}

/// Latent width consumed by the appearance decoder.
pub const MIN_LATENT_DIM: usize = 16;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Appearance decoded from an identity latent.
struct Appearance {
    shirt: [f64; 3],
    pants: [f64; 3],
    hair: [f64; 3],
    accent: [f64; 3],
    half_width: f64,
    waist_frac: f64,
    stripe_freq: f64,
    stripe_amp: f64,
    accent_left: bool,
}

impl Appearance {
    fn decode(z: &[f64]) -> Self {
        let color = |o: usize| [sigmoid(1.6 * z[o]), sigmoid(1.6 * z[o + 1]), sigmoid(1.6 * z[o + 2])];
        Self {
            shirt: color(0),
            pants: color(3),
            hair: color(6),
            accent: color(13),
            half_width: 0.18 + 0.10 * sigmoid(z[9]),
            waist_frac: 0.52 + 0.08 * z[10].tanh(),
            stripe_freq: 0.6 + 1.4 * sigmoid(z[11]),
            stripe_amp: 0.3 * sigmoid(z[12]),
            accent_left: z[13] + z[14] > 0.0,
        }
    }
}

/// Pose and photometric jitter of one capture.
struct Capture {
    shift_row: f64,
    shift_col: f64,
    brightness: f64,
    mirrored: bool,
}

impl Renderer {
    pub fn new(geometry: Geometry, latent_dim: usize) -> Result<Self, DataError> {
        if latent_dim < MIN_LATENT_DIM {
            return Err(DataError::Config(format!(
                "latent_dim must be at least {MIN_LATENT_DIM}, got {latent_dim}"
            )));
        }
        if geometry.channels != 3 || geometry.height < 8 || geometry.width < 4 {
            return Err(DataError::Config(format!(
                "unsupported geometry {geometry:?}; need 3 channels and at least 8x4 pixels"
            )));
        }
        Ok(Self {
            geometry,
            latent_dim,
        })
    }

    /// Procedural background of a domain, `[0, 1]` valued.
    pub fn background(&self, spec: &DomainSpec) -> Array3<f64> {
        let mut r = rng::stream(spec.background_seed, &[rng::tag("background")]);
        let g = self.geometry;
        let base: Vec<f64> = (0..3).map(|_| r.random_range(0.15..0.85)).collect();
        let fr: f64 = r.random_range(0.5..3.0);
        let fc: f64 = r.random_range(0.5..3.0);
        let phase: Vec<f64> = (0..3).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
        let amp: f64 = r.random_range(0.08..0.2);
        let floor_rows = r.random_range(2..(g.height / 5).max(3));
        let floor: Vec<f64> = (0..3).map(|_| r.random_range(0.1..0.9)).collect();
        Array3::from_shape_fn((g.height, g.width, 3), |(i, j, c)| {
            if i >= g.height - floor_rows {
                floor[c]
            } else {
                let t = std::f64::consts::TAU
                    * (fr * i as f64 / g.height as f64 + fc * j as f64 / g.width as f64);
                (base[c] + amp * (t + phase[c]).sin()).clamp(0.0, 1.0)
            }
        })
    }

    /// Renders `identity` as captured by `camera_id` in the domain `spec`.
    /// Deterministic in `(identity, spec, camera_id, noise_seed)`.
    pub fn render(
        &self,
        identity: &Identity,
        spec: &DomainSpec,
        camera_id: usize,
        noise_seed: u64,
    ) -> Result<ImageSample, DataError> {
        if identity.latent.len() != self.latent_dim {
            return Err(DataError::LatentDim {
                expected: self.latent_dim,
                found: identity.latent.len(),
            });
        }
        let g = self.geometry;
        let mut r = rng::stream(
            noise_seed,
            &[
                identity.pid as u64,
                spec.domain_id as u64,
                camera_id as u64,
                rng::tag("capture"),
            ],
        );
        let capture = Capture {
            shift_row: r.random_range(-1.5..1.5),
            shift_col: r.random_range(-1.0..1.0),
            brightness: r.random_range(0.85..1.15),
            mirrored: camera_id % 2 == 1,
        };
        let look = Appearance::decode(&identity.latent);
        let background = self.background(spec);
        let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");

        let (h, w) = (g.height as f64, g.width as f64);
        let mut pixels = Array3::zeros((g.height, g.width, 3));
        for i in 0..g.height {
            for j in 0..g.width {
                // Normalized person-centred coordinates.
                let y = (i as f64 + 0.5 - capture.shift_row) / h;
                let mut x = (j as f64 + 0.5 - capture.shift_col) / w - 0.5;
                if capture.mirrored {
                    x = -x;
                }
                let person = self.person_pixel(&look, x, y);
                for c in 0..3 {
                    let value = match person {
                        Some(p) => {
                            spec.style.gain[c] * (capture.brightness * p[c]) + spec.style.bias[c]
                        }
                        None => background[[i, j, c]] + spec.style.bias[c],
                    };
                    let n = if spec.noise_sigma > 0.0 {
                        noise.sample(&mut r)
                    } else {
                        0.0
                    };
                    pixels[[i, j, c]] = (value + n).clamp(0.0, 1.0);
                }
            }
        }
        Ok(ImageSample {
            pixels,
            pid: identity.pid,
            domain_id: spec.domain_id,
            camera_id,
        })
    }

    /// Colour of the figure at `(x, y)`, or `None` for background.
    fn person_pixel(&self, look: &Appearance, x: f64, y: f64) -> Option<[f64; 3]> {
        let head_c = 0.14;
        let head_ry = 0.09;
        let head_rx = 0.17;
        if ((y - head_c) / head_ry).powi(2) + (x / head_rx).powi(2) <= 1.0 {
            // Hair on top, skin below.
            return Some(if y < head_c - 0.02 {
                look.hair
            } else {
                [0.85, 0.68, 0.55]
            });
        }
        let torso_top = head_c + head_ry;
        let waist = look.waist_frac;
        let feet = 0.94;
        if y >= torso_top && y < waist && x.abs() <= look.half_width {
            let accent_side = if look.accent_left { -1.0 } else { 1.0 };
            if (x * accent_side) > look.half_width * 0.45 && y > torso_top + 0.08 && y < waist - 0.04 {
                return Some(look.accent);
            }
            let stripe = look.stripe_amp
                * (std::f64::consts::TAU * look.stripe_freq * (y - torso_top) * 6.0).sin();
            return Some(look.shirt.map(|v| (v + stripe).clamp(0.0, 1.0)));
        }
        if y >= waist && y < feet {
            let leg = look.half_width * 0.85;
            let gap = 0.03;
            if x.abs() <= leg && x.abs() >= gap {
                return Some(look.pants);
            }
        }
        None
    }
}
