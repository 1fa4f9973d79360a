//! Latent-direction extrapolation across source/target generators: move a
//! fixed style code `w_s` along the direction toward an edited/optimized code
//! `w` with scalar strength alpha, then synthesize with any generator that
//! shares the latent dimension. Directions come from a file or are derived
//! from the toy domain by contrasting scored samples.
//!
//! Truncation at generation time is the special case of extrapolating from a
//! mean style toward a sampled one with strength psi.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generator::{Generator, NoiseMode, StyleCode, SynthesisTrace};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::io::{Read, Write};
use std::path::Path;

/// A base style, an edited style, and an extrapolation strength.
#[derive(Clone, Debug)]
pub struct EditSpec<T> {
    /// Fixed base code w_s.
    pub base: StyleCode<T>,
    /// Edited/optimized code w.
    pub edited: StyleCode<T>,
    /// Strength alpha.
    pub alpha: f64,
}

impl<T: Scalar> EditSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.base.w.shape() != self.edited.w.shape() {
            return Err(Error::InvalidArgument(format!(
                "style dimensions differ: {:?} vs {:?}",
                self.base.w.shape(),
                self.edited.w.shape()
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("alpha must be finite".into()));
        }
        Ok(())
    }
}

/// w' = w_s + alpha * (w - w_s), evaluated as the affine blend
/// (1 - alpha) * w_s + alpha * w so that alpha = 0 returns w_s and alpha = 1
/// returns w exactly.
pub fn extrapolate<T: Scalar>(spec: &EditSpec<T>) -> Result<StyleCode<T>> {
    spec.validate()?;
    let a = T::from_f64(spec.alpha);
    let one_minus = T::ONE - a;
    Ok(StyleCode {
        w: spec
            .base
            .w
            .zip_map(&spec.edited.w, |ws, w| one_minus * ws + a * w),
    })
}

/// Synthesize an edited style code on a checkpoint's generator.
pub fn cross_apply(
    w_prime: &StyleCode<f32>,
    target_ckpt: &Checkpoint,
    noise_mode: NoiseMode,
) -> Result<SynthesisTrace<f32>> {
    let gen = target_ckpt.to_generator()?;
    if w_prime.w.shape() != [gen.config().w_dim] {
        return Err(Error::InvalidArgument(format!(
            "style dim {:?} does not match generator w_dim {}",
            w_prime.w.shape(),
            gen.config().w_dim
        )));
    }
    gen.synthesize(w_prime, noise_mode)
}

/// Store a latent vector: one JSON header line `{"dim":N,"dtype":"f32"}`
/// followed by raw little-endian f32 data.
pub fn save_latent(path: &Path, w: &Tensor<f32>) -> Result<()> {
    if w.shape().len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "latent must be a vector, got {:?}",
            w.shape()
        )));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", serde_json::json!({"dim": w.numel(), "dtype": "f32"}))?;
    for v in w.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_latent(path: &Path) -> Result<Tensor<f32>> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Corruption("latent file has no header line".into()))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Corruption(format!("latent header unreadable: {e}")))?;
    let dim = header["dim"]
        .as_u64()
        .ok_or_else(|| Error::Corruption("latent header lacks dim".into()))? as usize;
    if header["dtype"] != "f32" {
        return Err(Error::UnsupportedVersion(format!(
            "latent dtype {} unsupported",
            header["dtype"]
        )));
    }
    let body = &bytes[newline + 1..];
    if body.len() != dim * 4 {
        return Err(Error::Corruption(format!(
            "latent body has {} bytes, expected {}",
            body.len(),
            dim * 4
        )));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(&[dim], data))
}

/// Mean darkness over the eye band of a `[3,R,R]` image in [-1,1]; larger
/// values mean darker (bigger/closer) eyes. The band covers the rows where
/// toy-face eyes live.
pub fn eye_darkness_score(image: &Tensor<f32>) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (y0, y1) = (h * 3 / 10, h * 11 / 20);
    let hw = h * w;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for y in y0..y1 {
        for x in 0..w {
            let p = y * w + x;
            let luma = 0.299 * image.data()[p] as f64
                + 0.587 * image.data()[hw + p] as f64
                + 0.114 * image.data()[2 * hw + p] as f64;
            acc -= luma;
            count += 1;
        }
    }
    acc / count as f64
}

/// Derive an edit direction from generated samples: score each image, then
/// contrast the mean style of the top quartile against the mean style of all
/// samples. Returns an [`EditSpec`] with alpha = 1.
pub fn derive_attribute_direction(
    gen: &Generator<f32>,
    n_samples: usize,
    seed: u64,
    scorer: &dyn Fn(&Tensor<f32>) -> f64,
) -> Result<EditSpec<f32>> {
    if n_samples < 8 {
        return Err(Error::InvalidArgument(
            "need at least 8 samples to derive a direction".into(),
        ));
    }
    let dim = gen.config().w_dim;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let z = Tensor::randn(&[n_samples, dim], &mut rng);
    let w = gen.map_latent_batch(&z)?;
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let wi = StyleCode {
            w: Tensor::new(&[dim], w.data()[i * dim..(i + 1) * dim].to_vec()),
        };
        let trace = gen.synthesize(&wi, NoiseMode::Deterministic)?;
        let img = Tensor::new(
            &[3, gen.config().resolution, gen.config().resolution],
            trace.image.data().to_vec(),
        );
        scored.push((scorer(&img), i));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mean_of = |indices: &[usize]| {
        let mut acc = vec![0.0f32; dim];
        for &i in indices {
            for (a, v) in acc.iter_mut().zip(&w.data()[i * dim..(i + 1) * dim]) {
                *a += v;
            }
        }
        let inv = 1.0 / indices.len() as f32;
        Tensor::new(&[dim], acc.into_iter().map(|v| v * inv).collect())
    };
    let all: Vec<usize> = (0..n_samples).collect();
    let top: Vec<usize> = scored[..n_samples / 4].iter().map(|&(_, i)| i).collect();
    Ok(EditSpec {
        base: StyleCode { w: mean_of(&all) },
        edited: StyleCode { w: mean_of(&top) },
        alpha: 1.0,
    })
}
