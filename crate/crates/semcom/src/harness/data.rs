//! Dataset ingestion and the synthetic desk-scale corpus.
//!
//! [`load_dataset`] reads a directory of images, center-crops to square,
//! resizes, scales to `[0, 1]` and splits into disjoint codec-train /
//! attack-train / eval collections with a seeded shuffle. [`generate_corpus`]
//! writes a reproducible synthetic corpus of layered soft shapes over
//! gradient backgrounds, enough structure for codecs and attacks to have
//! something to learn.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::HarnessError;
use crate::codec::shuffle;
use crate::seed::derive_seed;
use crate::types::ImageTensor;

/// The three disjoint image collections of one run.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub codec_train: Vec<ImageTensor>,
    pub attack_train: Vec<ImageTensor>,
    pub eval: Vec<ImageTensor>,
}

/// Loads every decodable image under `path`, center-crops to square,
/// resizes to `image_size`, scales to `[0, 1]`, shuffles with the seed and
/// splits by the given fractions. Unreadable files are skipped with a
/// warning on stderr.
pub fn load_dataset(
    path: &Path,
    image_size: usize,
    splits: (f64, f64, f64),
    rng_seed: u64,
) -> Result<DatasetSplits, HarnessError> {
    let (f0, f1, f2) = splits;
    if f0 <= 0.0 || f1 <= 0.0 || f2 <= 0.0 {
        return Err(HarnessError::BadConfig(
            "all three split fractions must be positive".into(),
        ));
    }
    if (f0 + f1 + f2 - 1.0).abs() > 1e-9 {
        return Err(HarnessError::BadConfig(format!(
            "split fractions must sum to 1, got {}",
            f0 + f1 + f2
        )));
    }
    let mut files: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| HarnessError::DatasetIo(path.to_path_buf(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref ext) if ext == "png" || ext == "jpg" || ext == "jpeg"
            )
        })
        .collect();
    files.sort();

    let mut images = Vec::with_capacity(files.len());
    for file in &files {
        match load_image(file, image_size) {
            Ok(img) => images.push(img),
            Err(err) => eprintln!("warning: skipping {}: {err}", file.display()),
        }
    }
    if images.is_empty() {
        return Err(HarnessError::EmptyDataset(path.to_path_buf()));
    }

    let mut order: Vec<usize> = (0..images.len()).collect();
    shuffle(&mut order, rng_seed);
    let n = images.len();
    let n0 = ((n as f64 * f0).round() as usize).clamp(1, n.saturating_sub(2).max(1));
    let n1 = ((n as f64 * f1).round() as usize).clamp(1, (n - n0).saturating_sub(1).max(1));
    if n0 + n1 >= n {
        return Err(HarnessError::BadConfig(format!(
            "splits leave no eval images for a corpus of {n}"
        )));
    }
    let mut slot = vec![2u8; n];
    for (rank, &idx) in order.iter().enumerate() {
        slot[idx] = if rank < n0 {
            0
        } else if rank < n0 + n1 {
            1
        } else {
            2
        };
    }
    let mut out = DatasetSplits {
        codec_train: Vec::with_capacity(n0),
        attack_train: Vec::with_capacity(n1),
        eval: Vec::with_capacity(n - n0 - n1),
    };
    // iterate in shuffled order so each split's internal order is seeded too
    for &idx in &order {
        let img = images[idx].clone();
        match slot[idx] {
            0 => out.codec_train.push(img),
            1 => out.attack_train.push(img),
            _ => out.eval.push(img),
        }
    }
    Ok(out)
}

fn load_image(path: &Path, image_size: usize) -> Result<ImageTensor, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let cropped = image::imageops::crop_imm(&rgb, x0, y0, side, side).to_image();
    let resized = image::imageops::resize(
        &cropped,
        image_size as u32,
        image_size as u32,
        FilterType::Triangle,
    );
    let mut arr = Array3::<f64>::zeros((image_size, image_size, 3));
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            arr[(y as usize, x as usize, c)] = px.0[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(arr).map_err(|e| e.to_string())
}

/// One synthetic image: a soft color gradient background with a few layered
/// soft-edged ellipses and bars.
pub fn synth_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut px = Array3::<f64>::zeros((size, size, 3));

    // gradient background between two random colors along a random direction
    let c0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let angle: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    for i in 0..size {
        for j in 0..size {
            let t = ((i as f64 * dy + j as f64 * dx) / size as f64 + 1.0) / 2.0;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                px[(i, j, c)] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // layered shapes with soft edges
    let shapes = rng.gen_range(2..=5);
    for _ in 0..shapes {
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let cx = rng.gen::<f64>() * size as f64;
        let cy = rng.gen::<f64>() * size as f64;
        let rx = size as f64 * (0.08 + 0.25 * rng.gen::<f64>());
        let ry = size as f64 * (0.08 + 0.25 * rng.gen::<f64>());
        let theta = rng.gen::<f64>() * std::f64::consts::PI;
        let (ct, st) = (theta.cos(), theta.sin());
        let soft = 0.08 + 0.25 * rng.gen::<f64>();
        for i in 0..size {
            for j in 0..size {
                let ux = j as f64 - cx;
                let uy = i as f64 - cy;
                let ex = (ux * ct + uy * st) / rx;
                let ey = (-ux * st + uy * ct) / ry;
                let d = (ex * ex + ey * ey).sqrt();
                if d < 1.0 + soft {
                    let alpha = ((1.0 + soft - d) / soft).clamp(0.0, 1.0);
                    for c in 0..3 {
                        px[(i, j, c)] = px[(i, j, c)] * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }

    for v in px.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    ImageTensor::new(px).expect("values clamped")
}

/// Writes `count` synthetic PNG images into `dir` (created if missing).
/// Returns the number written.
pub fn generate_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<usize, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::DatasetIo(dir.to_path_buf(), e))?;
    for idx in 0..count {
        let img = synth_image(size, derive_seed(seed, &[0x5015, idx as u64]));
        let path = dir.join(format!("img_{idx:05}.png"));
        save_png(&img, &path)?;
    }
    Ok(count)
}

/// Writes one image as an 8-bit PNG.
pub fn save_png(img: &ImageTensor, path: &Path) -> Result<(), HarnessError> {
    let (h, w, c) = img.shape();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let mut rgb = [0u8; 3];
            for k in 0..3 {
                let v = if c == 1 { img.pixels()[(i, j, 0)] } else { img.pixels()[(i, j, k.min(c - 1))] };
                rgb[k] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(j as u32, i as u32, image::Rgb(rgb));
        }
    }
    out.save(path)
        .map_err(|e| HarnessError::DatasetIo(path.to_path_buf(), std::io::Error::other(e)))?;
    Ok(())
}
