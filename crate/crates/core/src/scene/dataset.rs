use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::scene::{generate_scene, read_pgm, read_ppm, write_pgm, write_ppm, GeneratorConfig, Provenance, SceneSample};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub class_count: usize,
    /// `[height, width]`
    pub size: [usize; 2],
    pub seeds: Vec<u64>,
    pub generator: GeneratorConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    /// Samples for seeds `first_seed..first_seed + count`; sample `i` depends
    /// only on its own seed.
    pub fn generate(cfg: &GeneratorConfig, first_seed: u64, count: usize, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        let samples = exec
            .map_range(count, |i| generate_scene(first_seed + i as u64, cfg))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            classes: cfg.class_count,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn file_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(root: &Path, data: &Dataset, generator: &GeneratorConfig) -> Result<Manifest> {
    for dir in [root.to_path_buf(), root.join(IMAGES_DIR), root.join(MASKS_DIR)] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, s) in data.samples.iter().enumerate() {
        write(&root.join(IMAGES_DIR).join(file_name(i, "ppm")), &write_ppm(&s.image)?)?;
        write(&root.join(MASKS_DIR).join(file_name(i, "pgm")), &write_pgm(&s.mask))?;
    }
    let manifest = Manifest {
        class_count: data.classes,
        size: [generator.height, generator.width],
        seeds: data.samples.iter().map(|s| s.provenance.seed).collect(),
        generator: generator.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&root.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(root: &Path) -> Result<(Dataset, Manifest)> {
    let path = root.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read(&path)?).map_err(|e| Error::Parse {
        offset: 0,
        msg: format!("{}: {e}", path.display()),
    })?;
    let mut samples = Vec::with_capacity(manifest.seeds.len());
    for (i, &seed) in manifest.seeds.iter().enumerate() {
        let image = read_ppm(&read(&root.join(IMAGES_DIR).join(file_name(i, "ppm")))?)?;
        let mask = read_pgm(&read(&root.join(MASKS_DIR).join(file_name(i, "pgm")))?)?;
        mask.check_range(manifest.class_count)?;
        if image.shape()[1..] != [mask.height(), mask.width()] {
            return Err(Error::dim("load_dataset", format!("image {i} matching its mask"), format!("{:?}", image.shape())));
        }
        samples.push(SceneSample {
            image,
            mask,
            provenance: Provenance {
                seed,
                class_hues: vec![None; manifest.class_count],
                fallback: false,
            },
        });
    }
    Ok((
        Dataset {
            classes: manifest.class_count,
            samples,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::quantize;

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig::default();
        let data = Dataset::generate(&cfg, 100, 3, Execution::Sequential).unwrap();
        let manifest = write_dataset(dir.path(), &data, &cfg).unwrap();
        assert_eq!(manifest.seeds, vec![100, 101, 102]);
        assert!(dir.path().join("images/000002.ppm").exists());
        let (back, m2) = load_dataset(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        for (a, b) in data.samples.iter().zip(&back.samples) {
            assert_eq!(b.image, quantize(&a.image));
            assert_eq!(b.mask, a.mask);
        }
    }

    #[test]
    fn sample_depends_only_on_its_seed() {
        let cfg = GeneratorConfig::default();
        let a = Dataset::generate(&cfg, 10, 5, Execution::Parallel).unwrap();
        let b = Dataset::generate(&cfg, 13, 2, Execution::Sequential).unwrap();
        assert_eq!(a.samples[3..], b.samples[..]);
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = load_dataset(Path::new("/nonexistent/dataset")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
