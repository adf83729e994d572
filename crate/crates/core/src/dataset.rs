//! Synthetic "C" datasets on disk, described by a text manifest.
//!
//! Manifest schema (`key = value`, `#` comments, paths relative to the
//! manifest's directory):
//!
//! ```text
//! format = metamorph-dataset
//! version = 1
//! size = 200
//! config_hash = <sha256 of the generator settings>
//! c.outer_radius = 0.35          # CShape fields
//! elastic.spacing = 20           # ElasticDeformConfig fields (seed excluded)
//! target = target.png
//! image = <seed> <path>          # one line per image, in order
//! mask = <index> <path>          # optional, per image index
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_ops::ScalarField;
use crate::io::{load_gray, load_mask, save_gray};
use crate::kv::KvFile;
use crate::optim::{Sample, SourceSet};
use crate::scalar::Scalar;
use crate::synth::{elastic_deform, CShape, ElasticDeformConfig};

pub const MANIFEST_FORMAT: &str = "metamorph-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub path: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub size: usize,
    pub shape: CShape,
    /// Deformation settings shared by all entries; per-image seeds override `seed`.
    pub elastic: ElasticDeformConfig,
    pub target: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Seed of image `index` in a dataset built from `base`.
pub fn image_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

fn generator_kv(size: usize, shape: &CShape, elastic: &ElasticDeformConfig) -> KvFile {
    let mut kv = KvFile::new();
    kv.push("size", size);
    shape.to_kv(&mut kv);
    elastic.to_kv(&mut kv);
    kv
}

/// Hex SHA-256 of the generator settings (size, C geometry, deformation law).
pub fn config_hash(size: usize, shape: &CShape, elastic: &ElasticDeformConfig) -> String {
    let digest = Sha256::digest(generator_kv(size, shape, elastic).render("").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn render_image<S: Scalar>(size: usize, shape: &CShape, elastic: &ElasticDeformConfig, seed: u64) -> Result<ScalarField<S>> {
    let base = shape.render::<S>(size, false)?;
    elastic_deform(&base, &ElasticDeformConfig { seed, ..elastic.clone() })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `n` deformed C images, the cut-C target and a manifest into `out_dir`.
pub fn build_dataset(
    n: usize,
    size: usize,
    seed: u64,
    shape: &CShape,
    elastic: &ElasticDeformConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let entries = (0..n)
        .map(|i| ManifestEntry {
            seed: image_seed(seed, i),
            path: PathBuf::from(format!("images/c_{i:05}.png")),
            mask: None,
        })
        .collect();
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        size,
        shape: shape.clone(),
        elastic: elastic.clone(),
        target: PathBuf::from("target.png"),
        entries,
    };
    manifest.generate_files()?;
    manifest.write()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.root.join(path)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn config_hash(&self) -> String {
        config_hash(self.size, &self.shape, &self.elastic)
    }

    /// Regenerates image `index` from its seed.
    pub fn regenerate<S: Scalar>(&self, index: usize) -> Result<ScalarField<S>> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| Error::Contract(format!("image {index} out of range")))?;
        render_image(self.size, &self.shape, &self.elastic, entry.seed)
    }

    /// Writes every image and the target under `root` (images in parallel).
    pub fn generate_files(&self) -> Result<()> {
        self.elastic.validate()?;
        create_dir(&self.root)?;
        let target = self.shape.render::<f64>(self.size, true)?;
        save_gray(&target, &self.resolve(&self.target))?;
        for dir in self.entries.iter().filter_map(|e| self.resolve(&e.path).parent().map(Path::to_path_buf)) {
            if !dir.exists() {
                create_dir(&dir)?;
            }
        }
        (0..self.len()).into_par_iter().try_for_each(|i| {
            let img = self.regenerate::<f64>(i)?;
            save_gray(&img, &self.resolve(&self.entries[i].path))
        })
    }

    /// Same dataset description rooted at another directory.
    pub fn rebased(&self, root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            ..self.clone()
        }
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.push("format", MANIFEST_FORMAT)
            .push("version", MANIFEST_VERSION)
            .push("size", self.size)
            .push("config_hash", self.config_hash());
        self.shape.to_kv(&mut kv);
        self.elastic.to_kv(&mut kv);
        kv.push("target", self.target.display());
        for e in &self.entries {
            kv.push("image", format!("{} {}", e.seed, e.path.display()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(m) = &e.mask {
                kv.push("mask", format!("{i} {}", m.display()));
            }
        }
        kv
    }

    pub fn write(&self) -> Result<()> {
        self.to_kv().write(&self.manifest_path(), "synthetic C dataset manifest")
    }

    /// Reads a manifest; `path` may be the file or its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let kv = KvFile::read(&file)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_kv(&kv, &root, &file)
    }

    pub fn from_kv(kv: &KvFile, root: &Path, origin: &Path) -> Result<Self> {
        if kv.get("format") != Some(MANIFEST_FORMAT) {
            return Err(Error::malformed(origin, format!("not a {MANIFEST_FORMAT} manifest")));
        }
        let version: u32 = kv.parse_value("version", origin)?;
        if version != MANIFEST_VERSION {
            return Err(Error::malformed(origin, format!("unsupported manifest version {version}")));
        }
        let size = kv.parse_value("size", origin)?;
        let shape = CShape::from_kv(kv, origin)?;
        let elastic = ElasticDeformConfig {
            spacing: kv.parse_value("elastic.spacing", origin)?,
            max_displacement: kv.parse_value("elastic.max_displacement", origin)?,
            seed: 0,
        };
        let target = PathBuf::from(
            kv.get("target")
                .ok_or_else(|| Error::malformed(origin, "missing key `target`"))?,
        );
        let mut entries = Vec::new();
        for (_, v) in kv.entries().iter().filter(|(k, _)| k == "image") {
            let (seed, path) = v
                .split_once(' ')
                .ok_or_else(|| Error::malformed(origin, format!("bad image line `{v}`")))?;
            let seed = seed
                .parse()
                .map_err(|_| Error::malformed(origin, format!("bad seed in `{v}`")))?;
            entries.push(ManifestEntry {
                seed,
                path: PathBuf::from(path.trim()),
                mask: None,
            });
        }
        for (_, v) in kv.entries().iter().filter(|(k, _)| k == "mask") {
            let parsed = v
                .split_once(' ')
                .and_then(|(i, p)| i.parse::<usize>().ok().map(|i| (i, p.trim())));
            match parsed {
                Some((i, p)) if i < entries.len() => entries[i].mask = Some(PathBuf::from(p)),
                _ => return Err(Error::malformed(origin, format!("bad mask line `{v}`"))),
            }
        }
        let manifest = Self {
            root: root.to_path_buf(),
            size,
            shape,
            elastic,
            target,
            entries,
        };
        let recorded = kv.get("config_hash").unwrap_or_default();
        if recorded != manifest.config_hash() {
            return Err(Error::malformed(origin, "config_hash does not match the generator settings"));
        }
        Ok(manifest)
    }

    /// Checks that every referenced file exists and has the manifest resolution.
    pub fn validate(&self) -> Result<()> {
        let paths = std::iter::once(&self.target)
            .chain(self.entries.iter().map(|e| &e.path))
            .chain(self.entries.iter().filter_map(|e| e.mask.as_ref()));
        for p in paths {
            let field: ScalarField<f64> = load_gray(&self.resolve(p))?;
            if (field.height(), field.width()) != (self.size, self.size) {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, manifest says {}",
                    p.display(),
                    field.height(),
                    field.width(),
                    self.size
                )));
            }
        }
        Ok(())
    }

    pub fn load_target<S: Scalar>(&self) -> Result<ScalarField<S>> {
        load_gray(&self.resolve(&self.target))
    }

    /// Loads image `index` with its mask. A mask in `mask_dir` named like the
    /// image takes precedence over one listed in the manifest.
    pub fn load_sample<S: Scalar>(&self, index: usize, mask_dir: Option<&Path>) -> Result<Sample<S>> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| Error::Contract(format!("image {index} out of range")))?;
        let image = load_gray(&self.resolve(&entry.path))?;
        let mask_path = match (mask_dir, &entry.mask) {
            (Some(dir), _) => entry.path.file_name().map(|n| dir.join(n)),
            (None, Some(m)) => Some(self.resolve(m)),
            (None, None) => None,
        };
        let mask = mask_path.map(|p| load_mask(&p)).transpose()?;
        Ok(Sample { image, mask })
    }
}

/// Lazily loads manifest entries from disk as training samples.
pub struct ManifestSources<'a> {
    pub manifest: &'a DatasetManifest,
    pub indices: Vec<usize>,
    pub mask_dir: Option<PathBuf>,
}

impl<'a> ManifestSources<'a> {
    pub fn new(manifest: &'a DatasetManifest, mask_dir: Option<PathBuf>) -> Self {
        Self {
            manifest,
            indices: (0..manifest.len()).collect(),
            mask_dir,
        }
    }
}

impl<S: Scalar> SourceSet<S> for ManifestSources<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn sample(&self, index: usize) -> Result<Sample<S>> {
        let i = *self
            .indices
            .get(index)
            .ok_or_else(|| Error::Contract(format!("sample {index} out of range")))?;
        self.manifest.load_sample(i, self.mask_dir.as_deref())
    }
}
