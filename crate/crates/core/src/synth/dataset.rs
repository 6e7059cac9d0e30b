use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pgm::{image_to_pgm, mask_to_pgm, pgm_to_image, pgm_to_mask, read_pgm, write_pgm};
use super::{generate_sample, GenParams, Sample};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub params: Option<GenParams>,
    pub seeds: Vec<u64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: Manifest,
}

pub fn make_dataset(seed: u64, n: usize, params: &GenParams) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("dataset needs at least one sample"));
    }
    params.validate()?;
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(seed, &[i])).collect();
    let samples = seeds
        .par_iter()
        .map(|&s| generate_sample(s, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        manifest: Manifest {
            seed: Some(seed),
            params: Some(*params),
            seeds,
            count: n,
        },
    })
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("img_{i:04}.pgm"))
}

fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("msk_{i:04}.pgm"))
}

pub fn save_sample(sample: &Sample, image: &Path, mask: &Path) -> Result<()> {
    write_pgm(image, &image_to_pgm(&sample.image)?)?;
    write_pgm(mask, &mask_to_pgm(&sample.mask))
}

pub fn load_sample(image: &Path, mask: &Path, seed: u64) -> Result<Sample> {
    let img = read_pgm(image)?;
    let msk = read_pgm(mask)?;
    if (img.height, img.width) != (msk.height, msk.width) {
        return Err(Error::shape(format!(
            "{} is {}×{} but {} is {}×{}",
            image.display(),
            img.height,
            img.width,
            mask.display(),
            msk.height,
            msk.width
        )));
    }
    Ok(Sample {
        image: pgm_to_image(&img),
        mask: pgm_to_mask(&msk)?,
        seed,
        meta: None,
    })
}

/// Writes `manifest.json` plus one image/mask PGM pair per sample,
/// creating `dir` if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in dataset.samples.iter().enumerate() {
        save_sample(s, &image_path(dir, i), &mask_path(dir, i))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a dataset directory. Without a manifest, consecutive
/// `img_####.pgm`/`msk_####.pgm` pairs from index 0 are loaded.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::config(format!("dataset directory {} does not exist", dir.display())));
    }
    let path = dir.join(MANIFEST_FILE);
    let manifest = if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str::<Manifest>(&text)
            .map_err(|e| Error::Parse(format!("{}: line {}: {e}", path.display(), e.line())))?
    } else {
        let count = (0..).take_while(|&i| image_path(dir, i).exists()).count();
        Manifest {
            seed: None,
            params: None,
            seeds: (0..count as u64).collect(),
            count,
        }
    };
    if manifest.count == 0 || manifest.seeds.len() != manifest.count {
        return Err(Error::Data(format!(
            "{}: manifest lists {} seeds for {} samples",
            dir.display(),
            manifest.seeds.len(),
            manifest.count
        )));
    }
    let samples = (0..manifest.count)
        .map(|i| {
            let mut s = load_sample(&image_path(dir, i), &mask_path(dir, i), manifest.seeds[i])?;
            s.meta = manifest.params;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, manifest })
}
