use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use latprobe_core::render::{encode_png, triple};
use latprobe_core::{AttackRecord, AttackSetup, AttackStatus, Tensor, Tuple};
use latprobe_labeling::ImageItem;
use rayon::prelude::*;

use crate::config::Prepared;
use crate::failure::Failure;

/// Unperturbed and perturbed generator images behind a success record.
pub struct ImagePair {
    pub record: AttackRecord,
    pub unperturbed: Tensor,
    pub perturbed: Tensor,
}

/// Re-runs the search behind every success record to recover its
/// perturbation. Records whose replay disagrees are an error.
pub fn rebuild_pairs(p: &Prepared, records: &[AttackRecord]) -> Result<Vec<ImagePair>, Failure> {
    let latent_dim: usize = p.generator.spec().input_shape.iter().product();
    records
        .par_iter()
        .filter(|r| r.status == AttackStatus::Success)
        .map(|r| {
            let classifier = p
                .classifiers
                .iter()
                .find(|(n, _)| n == &r.classifier)
                .map(|(_, c)| c)
                .ok_or_else(|| Failure::usage(format!("record uses unknown classifier `{}`", r.classifier)))?;
            let mask = p
                .masks
                .iter()
                .find(|(n, _)| n == &r.layer_subset)
                .map(|(_, m)| m)
                .ok_or_else(|| Failure::usage(format!("record uses unknown layer subset `{}`", r.layer_subset)))?;
            let out = AttackSetup {
                generator: &p.generator,
                classifier,
                sigma: &p.sigma,
                mask,
                config: &p.attack,
                classifier_name: &r.classifier,
                layer_subset: &r.layer_subset,
                config_hash: &r.config_hash,
            }
            .replay(r)?;
            if out.record.status != r.status || out.record.success_magnitude != r.success_magnitude {
                return Err(Failure::runtime(format!("replay of {} does not match the stored record", r.image_id())));
            }
            let z = Tuple::from_parts(r.tuple_id, r.seed, r.y, r.t, latent_dim).z;
            Ok(ImagePair {
                record: r.clone(),
                unperturbed: p.generator.forward_plain(&z)?,
                perturbed: p.generator.forward(&z, &out.perturbation, &p.sigma)?,
            })
        })
        .collect()
}

pub fn labeling_items(p: &Prepared, pairs: &[ImagePair]) -> Result<Vec<ImageItem>, Failure> {
    pairs
        .iter()
        .map(|pair| {
            Ok(ImageItem {
                image_id: pair.record.image_id(),
                label_name: p.label_name(pair.record.y),
                unperturbed_png: encode_png(&pair.unperturbed)?,
                perturbed_png: encode_png(&pair.perturbed)?,
            })
        })
        .collect()
}

/// Writes one triple strip per pair and a grid stacking the first `limit`.
pub fn render_pairs(pairs: &[ImagePair], scale: f32, limit: usize, dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut rows = Vec::new();
    for pair in pairs {
        let img = triple(&pair.unperturbed, &pair.perturbed, scale)?.to_rgb8();
        let path = dir.join(format!("{}.png", pair.record.image_id()));
        img.save(&path).map_err(|e| Failure::runtime(e.to_string()))?;
        written.push(path);
        if rows.len() < limit {
            rows.push(img);
        }
    }
    if !rows.is_empty() {
        let gap = 2;
        let width = rows.iter().map(|r| r.width()).max().unwrap_or(0);
        let height = rows.iter().map(|r| r.height()).sum::<u32>() + gap * (rows.len() as u32 - 1);
        let mut grid = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        let mut y = 0;
        for r in &rows {
            imageops::replace(&mut grid, r, 0, i64::from(y));
            y += r.height() + gap;
        }
        let path = dir.join("grid.png");
        grid.save(&path).map_err(|e| Failure::runtime(e.to_string()))?;
        written.push(path);
    }
    Ok(written)
}
