//! Image tower: 4×4 patch embedding, two GELU layers, linear projection and
//! L2 normalization.

use ndarray::Array2;
use rand::Rng;

use super::{init_linear, EncoderConfig, EncoderError, ParamGroup, ParamList, ParamListMut};
use crate::autodiff::{Mat, Tape, Var};
use crate::synthdata::ImageSample;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams {
    pub patch_w: Mat,
    pub patch_b: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub proj: Mat,
    /// Log of the similarity inverse temperature.
    pub log_scale: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct ImageVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub proj: Var,
    pub log_scale: Var,
}

impl ImageEncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let flat = cfg.num_patches() * cfg.patch_dim;
        Self {
            patch_w: init_linear(cfg.patch_input(), cfg.patch_dim, rng),
            patch_b: Mat::zeros((1, cfg.patch_dim)),
            w1: init_linear(flat, cfg.hidden_dim, rng),
            b1: Mat::zeros((1, cfg.hidden_dim)),
            w2: init_linear(cfg.hidden_dim, cfg.hidden_dim, rng),
            b2: Mat::zeros((1, cfg.hidden_dim)),
            proj: init_linear(cfg.hidden_dim, cfg.embed_dim, rng),
            log_scale: Mat::from_elem((1, 1), cfg.init_inverse_temperature.ln()),
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale[[0, 0]].exp()
    }

    pub fn params(&self) -> ParamList<'_> {
        let g = ParamGroup::ImageEncoder;
        vec![
            ("image.patch_w", g, &self.patch_w),
            ("image.patch_b", g, &self.patch_b),
            ("image.w1", g, &self.w1),
            ("image.b1", g, &self.b1),
            ("image.w2", g, &self.w2),
            ("image.b2", g, &self.b2),
            ("image.proj", g, &self.proj),
            ("image.log_scale", g, &self.log_scale),
        ]
    }

    pub fn params_mut(&mut self) -> ParamListMut<'_> {
        let g = ParamGroup::ImageEncoder;
        vec![
            ("image.patch_w", g, &mut self.patch_w),
            ("image.patch_b", g, &mut self.patch_b),
            ("image.w1", g, &mut self.w1),
            ("image.b1", g, &mut self.b1),
            ("image.w2", g, &mut self.w2),
            ("image.b2", g, &mut self.b2),
            ("image.proj", g, &mut self.proj),
            ("image.log_scale", g, &mut self.log_scale),
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ImageVars {
        ImageVars {
            patch_w: tape.leaf(self.patch_w.clone(), trainable),
            patch_b: tape.leaf(self.patch_b.clone(), trainable),
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
            proj: tape.leaf(self.proj.clone(), trainable),
            log_scale: tape.leaf(self.log_scale.clone(), trainable),
        }
    }
}

impl ImageVars {
    /// Pairs each variable with its parameter name, in `params()` order.
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        vec![
            ("image.patch_w", self.patch_w),
            ("image.patch_b", self.patch_b),
            ("image.w1", self.w1),
            ("image.b1", self.b1),
            ("image.w2", self.w2),
            ("image.b2", self.b2),
            ("image.proj", self.proj),
            ("image.log_scale", self.log_scale),
        ]
    }
}

/// Rearranges images into one row per patch, centred at zero:
/// `(batch · patches) × (patch² · channels)`.
pub fn patchify(cfg: &EncoderConfig, images: &[&ImageSample]) -> Result<Mat, EncoderError> {
    let g = cfg.geometry;
    let p = cfg.patch;
    let (ph, pw) = (g.height / p, g.width / p);
    let mut out = Array2::zeros((images.len() * ph * pw, cfg.patch_input()));
    for (b, img) in images.iter().enumerate() {
        if img.pixels.dim() != (g.height, g.width, g.channels) {
            return Err(EncoderError::Shape(format!(
                "image of shape {:?}, encoder expects {:?}",
                img.pixels.dim(),
                (g.height, g.width, g.channels)
            )));
        }
        if img.pixels.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite("image batch"));
        }
        for pi in 0..ph {
            for pj in 0..pw {
                let row = b * ph * pw + pi * pw + pj;
                let mut col = 0;
                for di in 0..p {
                    for dj in 0..p {
                        for c in 0..g.channels {
                            out[[row, col]] = img.pixels[[pi * p + di, pj * p + dj, c]] - 0.5;
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Records the image tower on `tape` for a patchified batch of `batch` images.
pub fn forward(
    tape: &mut Tape,
    vars: &ImageVars,
    cfg: &EncoderConfig,
    patches: Var,
    batch: usize,
) -> Var {
    forward_parts(tape, vars, cfg, patches, batch).1
}

/// Like [`forward`], also returning the projection before normalization.
pub fn forward_parts(
    tape: &mut Tape,
    vars: &ImageVars,
    cfg: &EncoderConfig,
    patches: Var,
    batch: usize,
) -> (Var, Var) {
    let h = tape.matmul(patches, vars.patch_w);
    let h = tape.add_row(h, vars.patch_b);
    let h = tape.gelu(h);
    let h = tape.reshape(h, batch, cfg.num_patches() * cfg.patch_dim);
    let h = tape.matmul(h, vars.w1);
    let h = tape.add_row(h, vars.b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, vars.w2);
    let h = tape.add_row(h, vars.b2);
    let h = tape.gelu(h);
    let f = tape.matmul(h, vars.proj);
    (f, tape.row_normalize(f))
}

/// Inference: unit-norm features, one row per image.
pub fn encode_images(
    params: &ImageEncoderParams,
    cfg: &EncoderConfig,
    images: &[&ImageSample],
) -> Result<Mat, EncoderError> {
    if images.is_empty() {
        return Ok(Mat::zeros((0, cfg.embed_dim)));
    }
    let patches = patchify(cfg, images)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(patches);
    let out = forward(&mut tape, &vars, cfg, x, images.len());
    Ok(tape.value(out).clone())
}
