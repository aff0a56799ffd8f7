//! Image and latent I/O: PNG round-trips, raw float images with a JSON
//! sidecar, and the fixed (parameter-free) map between full-resolution
//! images and the 4-channel latent grid the diffusion model works on.

use std::path::{Path, PathBuf};

use crate::error::{invalid_input, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Save an (H, W, 3) image with values in [0, 1] as RGB PNG.
pub fn save_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(invalid_input(format!("expected (H, W, 3) image, got {shape:?}")));
    }
    let (h, w) = (shape[0] as u32, shape[1] as u32);
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(w, h, bytes).expect("buffer size checked above");
    buf.save(path).map_err(|e| Error::InvalidInput(format!("png save {path:?}: {e}")))?;
    Ok(())
}

/// Load an RGB PNG as an (H, W, 3) image with values in [0, 1].
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::InvalidInput(format!("png load {path:?}: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec(&[h as usize, w as usize, 3], data))
}

/// Save a binary (H, W) mask as a grayscale PNG.
pub fn save_mask_png(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(invalid_input(format!("expected (H, W) mask, got {shape:?}")));
    }
    let (h, w) = (shape[0] as u32, shape[1] as u32);
    let bytes: Vec<u8> = mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(w, h, bytes).expect("buffer size checked above");
    buf.save(path).map_err(|e| Error::InvalidInput(format!("png save {path:?}: {e}")))?;
    Ok(())
}

/// Load a grayscale PNG as a binary (H, W) mask (threshold at 0.5).
pub fn load_mask_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::InvalidInput(format!("png load {path:?}: {e}")))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(&[h as usize, w as usize], data))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RawSidecar {
    shape: Vec<usize>,
}

/// Load an image either from PNG or from a raw little-endian f32 binary
/// accompanied by `<file>.json` declaring its shape.
pub fn load_image_auto(path: &Path) -> Result<Tensor<f32>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_png(path),
        _ => {
            let sidecar: PathBuf = {
                let mut p = path.as_os_str().to_owned();
                p.push(".json");
                p.into()
            };
            let meta: RawSidecar = serde_json::from_slice(&std::fs::read(&sidecar)?)?;
            if meta.shape.len() != 3 {
                return Err(invalid_input(format!(
                    "sidecar {sidecar:?} must declare a rank-3 shape, got {:?}",
                    meta.shape
                )));
            }
            let bytes = std::fs::read(path)?;
            Tensor::from_f32_le_bytes(&meta.shape, &bytes)
        }
    }
}

/// Write a raw f32 image and its JSON sidecar.
pub fn save_raw(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let sidecar: PathBuf = {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        p.into()
    };
    std::fs::write(path, image.to_f32_le_bytes())?;
    std::fs::write(&sidecar, serde_json::to_vec(&RawSidecar { shape: image.shape().to_vec() })?)?;
    Ok(())
}

/// Fixed image -> latent map: area-average RGB plus luminance onto the
/// latent grid, rescaled from [0, 1] to [-1, 1]. No learned parameters.
pub fn latent_from_image<T: Scalar>(image: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(invalid_input(format!("expected (H, W, 3) image, got {shape:?}")));
    }
    let (hh, ww) = (shape[0], shape[1]);
    let (h, w) = grid;
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 {
        return Err(invalid_input(format!("latent grid {h}x{w} does not divide {hh}x{ww}")));
    }
    let (sy, sx) = (hh / h, ww / w);
    let inv = 1.0 / (sy * sx) as f64;
    let src = image.data();
    let mut out = Tensor::zeros(&[h, w, 4]);
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for dy in 0..sy {
                for dx in 0..sx {
                    let base = ((y * sy + dy) * ww + (x * sx + dx)) * 3;
                    for c in 0..3 {
                        acc[c] += src[base + c].as_f64();
                    }
                }
            }
            let o = (y * w + x) * 4;
            let lum = (acc[0] + acc[1] + acc[2]) / 3.0;
            for c in 0..3 {
                dst[o + c] = T::from_f64(2.0 * acc[c] * inv - 1.0);
            }
            dst[o + 3] = T::from_f64(2.0 * lum * inv - 1.0);
        }
    }
    Ok(out)
}

/// Decode a latent back to a full-resolution image: nearest upsampling of
/// the RGB channels, rescaled to [0, 1] and clamped.
pub fn image_from_latent<T: Scalar>(latent: &Tensor<T>, size: (usize, usize)) -> Result<Tensor<T>> {
    let shape = latent.shape();
    if shape.len() != 3 || shape[2] != 4 {
        return Err(invalid_input(format!("expected (h, w, 4) latent, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let (hh, ww) = size;
    if hh % h != 0 || ww % w != 0 {
        return Err(invalid_input(format!("target {hh}x{ww} not a multiple of {h}x{w}")));
    }
    let (sy, sx) = (hh / h, ww / w);
    let src = latent.data();
    let mut out = Tensor::zeros(&[hh, ww, 3]);
    let dst = out.data_mut();
    for y in 0..hh {
        for x in 0..ww {
            let i = ((y / sy) * w + x / sx) * 4;
            let o = (y * ww + x) * 3;
            for c in 0..3 {
                let v = (src[i + c].as_f64() + 1.0) / 2.0;
                dst[o + c] = T::from_f64(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}
