//! Data plumbing: images, synthesis, preprocessing, augmentation, manifests.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod preprocess;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentParams};
pub use image::Image;
pub use manifest::{group_by_eye, load_manifest, save_manifest, EyeGroup, ManifestEntry};
pub use preprocess::{preprocess, PreprocessConfig};
pub use synth::{synth_generate, SynthConfig, SynthSample, LESION_NAMES, LESION_TYPES};

/// Grade → per-label targets. Label `n` (0-based) means "at least grade
/// n+1", so grade g turns on the first g labels.
pub fn nested_delta(grade: usize) -> [f64; 4] {
    let mut d = [0.0; 4];
    for (n, v) in d.iter_mut().enumerate() {
        if grade > n {
            *v = 1.0;
        }
    }
    d
}

/// Same nesting for an arbitrary label count.
pub fn nested_delta_n(grade: usize, labels: usize) -> Vec<f64> {
    (0..labels).map(|n| if grade > n { 1.0 } else { 0.0 }).collect()
}

/// Where a sample's per-type masks live, given its image path.
pub fn mask_paths(image_path: &Path) -> Vec<PathBuf> {
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    (0..LESION_TYPES)
        .map(|t| image_path.with_file_name(format!("{stem}.mask{t}.pgm")))
        .collect()
}

/// Load a sample's masks if all of them exist on disk.
pub fn load_masks(image_path: &Path) -> Result<Option<Vec<Image>>> {
    let paths = mask_paths(image_path);
    if !paths.iter().all(|p| p.exists()) {
        return Ok(None);
    }
    paths.iter().map(|p| Image::load(p).map(Some)).collect()
}

/// Write a generated dataset: images, per-type masks, the manifest, and the
/// generator settings. Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[SynthSample], cfg: &SynthConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = if cfg.channels == 1 { "pgm" } else { "ppm" };
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("img{i:04}.{ext}");
        s.image.save(&dir.join(&name))?;
        for (t, mask) in s.masks.iter().enumerate() {
            mask.save(&dir.join(format!("img{i:04}.mask{t}.pgm")))?;
        }
        rows.push((name, s.eye_id.clone(), s.grade));
    }
    let manifest = dir.join("manifest.csv");
    save_manifest(&manifest, &rows)?;
    let settings = format!(
        "size={}\nchannels={}\neyes={}\nimages_per_eye={}\nnoise={}\nseed={}\n",
        cfg.size, cfg.channels, cfg.eyes, cfg.images_per_eye, cfg.noise, cfg.seed
    );
    let settings_path = dir.join("generator.txt");
    std::fs::write(&settings_path, settings).map_err(|e| Error::io(&settings_path, e))?;
    Ok(manifest)
}
