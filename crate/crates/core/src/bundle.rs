//! Activation bundles: one directory per image holding `manifest.json` and
//! headerless little-endian `f32` tensor files whose shapes live only in the
//! manifest. See `docs/FORMAT.md` for the exact schema.

use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Allowed deviation of an attention row sum from one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("manifest schema: {0}")]
    ManifestSchema(String),
    #[error("shape mismatch in {entry}: {detail}")]
    ShapeMismatch { entry: String, detail: String },
    #[error("{entry}: row {row} sums to {sum} (expected 1 ± {ROW_SUM_TOLERANCE})")]
    NonStochasticRows { entry: String, row: usize, sum: f64 },
    #[error("{entry}: unknown class_id {class_id}")]
    UnknownClassId { entry: String, class_id: u32 },
    #[error("{entry}: {source}")]
    Tensor {
        entry: String,
        #[source]
        source: TensorError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BundleError {
    pub fn is_io(&self) -> bool {
        matches!(self, BundleError::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, BundleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCategory {
    /// Sentence-level token such as `<sos>` / `<eos>`.
    Special,
    /// Token naming an object of interest.
    Content,
    /// Articles, punctuation, padding.
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenEntry {
    pub index: usize,
    pub text: String,
    pub category: TokenCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub class_id: u32,
    pub name: String,
    #[serde(default)]
    pub is_background: bool,
}

/// One cross-attention layer: per-head maps `[heads × H·W × tokens]` and
/// per-head output summands `[heads × H·W × head_out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLayer {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub attn: Tensor,
    pub head_out: Tensor,
}

impl CrossLayer {
    pub fn heads(&self) -> usize {
        self.attn.shape()[0]
    }

    pub fn token_count(&self) -> usize {
        self.attn.shape()[2]
    }

    pub fn head_out_dim(&self) -> usize {
        self.head_out.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Head-averaged self-attention map `[H·W × H·W]`, row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfLayer {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub map: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeature {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// `[H·W × channels]`
    pub tensor: Tensor,
}

impl DenseFeature {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBundle {
    pub model_id: String,
    pub timestep: i64,
    pub image_size: (usize, usize),
    pub tokens: Vec<TokenEntry>,
    pub classes: Vec<ClassEntry>,
    pub cross_layers: Vec<CrossLayer>,
    pub self_layers: Vec<SelfLayer>,
    pub dense_feature: DenseFeature,
}

// ---------------------------------------------------------------------------
// Manifest schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub model_id: String,
    pub timestep: i64,
    pub image_size: [usize; 2],
    pub tokens: Vec<TokenEntry>,
    pub classes: Vec<ClassEntry>,
    pub cross_layers: Vec<CrossLayerEntry>,
    pub self_layers: Vec<SelfLayerEntry>,
    pub dense_feature: DenseFeatureEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossLayerEntry {
    pub name: String,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub token_count: usize,
    pub head_out_dim: usize,
    pub attn_file: String,
    pub head_out_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfLayerEntry {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Reserved for per-head self-attention; version 1 requires 1.
    #[serde(default = "one")]
    pub heads: usize,
    pub map_file: String,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseFeatureEntry {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub file: String,
}

fn schema(msg: impl Into<String>) -> BundleError {
    BundleError::ManifestSchema(msg.into())
}

fn check_positive(entry: &str, dims: &[(&str, usize)]) -> Result<()> {
    for &(field, v) in dims {
        if v == 0 {
            return Err(schema(format!("{entry}: {field} must be positive")));
        }
    }
    Ok(())
}

fn check_file_name(entry: &str, name: &str) -> Result<()> {
    let path = Path::new(name);
    let plain = !name.is_empty()
        && path.components().count() == 1
        && matches!(path.components().next(), Some(Component::Normal(_)));
    if !plain || name == MANIFEST_FILE {
        return Err(schema(format!("{entry}: file name {name:?} must be a plain file in the bundle directory")));
    }
    Ok(())
}

fn check_token_table(tokens: &[TokenEntry], classes: &[ClassEntry]) -> Result<()> {
    let mut ids = HashSet::new();
    for c in classes {
        if c.class_id == 0 {
            return Err(schema(format!("class {:?}: class_id 0 is reserved for background", c.name)));
        }
        if !ids.insert(c.class_id) {
            return Err(schema(format!("class {:?}: duplicate class_id {}", c.name, c.class_id)));
        }
    }
    for (pos, t) in tokens.iter().enumerate() {
        let entry = format!("tokens[{pos}] {:?}", t.text);
        if t.index != pos {
            return Err(schema(format!("{entry}: index {} does not match position", t.index)));
        }
        match (t.category, t.class_id) {
            (TokenCategory::Content, None) => {
                return Err(schema(format!("{entry}: content token requires class_id")))
            }
            (TokenCategory::Content, Some(id)) if !ids.contains(&id) => {
                return Err(BundleError::UnknownClassId { entry, class_id: id })
            }
            (TokenCategory::Special | TokenCategory::Stop, Some(_)) => {
                return Err(schema(format!("{entry}: only content tokens carry class_id")))
            }
            _ => {}
        }
    }
    Ok(())
}

impl Manifest {
    /// Checks every invariant that does not require tensor payloads.
    pub fn validate(&self) -> Result<()> {
        if self.manifest_version != MANIFEST_VERSION {
            return Err(schema(format!(
                "manifest_version {} is not supported (expected {MANIFEST_VERSION})",
                self.manifest_version
            )));
        }
        check_positive("image_size", &[("height", self.image_size[0]), ("width", self.image_size[1])])?;
        if self.tokens.is_empty() {
            return Err(schema("tokens must not be empty"));
        }
        check_token_table(&self.tokens, &self.classes)?;
        if self.cross_layers.is_empty() {
            return Err(schema("at least one cross layer is required"));
        }
        if self.self_layers.is_empty() {
            return Err(schema("at least one self layer is required"));
        }
        let mut files = HashSet::new();
        let mut claim = |entry: &str, name: &str| -> Result<()> {
            check_file_name(entry, name)?;
            if !files.insert(name.to_string()) {
                return Err(schema(format!("{entry}: file {name:?} is referenced twice")));
            }
            Ok(())
        };
        for (i, c) in self.cross_layers.iter().enumerate() {
            let entry = format!("cross_layers[{i}] {:?}", c.name);
            check_positive(
                &entry,
                &[("heads", c.heads), ("height", c.height), ("width", c.width), ("head_out_dim", c.head_out_dim)],
            )?;
            if c.token_count != self.tokens.len() {
                return Err(BundleError::ShapeMismatch {
                    entry,
                    detail: format!("token_count {} but {} tokens declared", c.token_count, self.tokens.len()),
                });
            }
            claim(&entry, &c.attn_file)?;
            claim(&entry, &c.head_out_file)?;
        }
        for (i, s) in self.self_layers.iter().enumerate() {
            let entry = format!("self_layers[{i}] {:?}", s.name);
            check_positive(&entry, &[("height", s.height), ("width", s.width)])?;
            if s.heads != 1 {
                return Err(schema(format!("{entry}: per-head self-attention (heads = {}) is not supported", s.heads)));
            }
            claim(&entry, &s.map_file)?;
        }
        let d = &self.dense_feature;
        let entry = format!("dense_feature {:?}", d.name);
        check_positive(&entry, &[("height", d.height), ("width", d.width), ("channels", d.channels)])?;
        claim(&entry, &d.file)?;
        Ok(())
    }
}

fn read_tensor(dir: &Path, file: &str, entry: &str, shape: Vec<usize>) -> Result<Tensor> {
    let path = dir.join(file);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(BundleError::MissingFile(path)),
        Err(source) => return Err(BundleError::Io { path, source }),
    };
    let expected = 4 * shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(BundleError::ShapeMismatch {
            entry: format!("{entry} ({file})"),
            detail: format!("{} bytes on disk, shape {shape:?} needs {expected}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|source| BundleError::Tensor { entry: format!("{entry} ({file})"), source })
}

fn check_stochastic(entry: &str, data: &[f32], cols: usize) -> Result<()> {
    for (row, values) in data.chunks_exact(cols).enumerate() {
        let sum: f64 = values.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || values.iter().any(|&v| v < 0.0) {
            return Err(BundleError::NonStochasticRows { entry: entry.to_string(), row, sum });
        }
    }
    Ok(())
}

impl ActivationBundle {
    /// Checks every bundle invariant, including row-stochasticity.
    pub fn validate(&self) -> Result<()> {
        self.manifest().validate()?;
        let n = self.tokens.len();
        for (i, c) in self.cross_layers.iter().enumerate() {
            let entry = format!("cross_layers[{i}] {:?}", c.name);
            let shape_ok = matches!(c.attn.shape(), &[h, p, t] if p == c.pixels() && t == n && h >= 1)
                && matches!(c.head_out.shape(), &[h, p, _] if h == c.heads() && p == c.pixels());
            if !shape_ok {
                return Err(BundleError::ShapeMismatch {
                    entry,
                    detail: format!("attn {:?} / head_out {:?}", c.attn.shape(), c.head_out.shape()),
                });
            }
            check_stochastic(&format!("{entry} attn"), c.attn.data(), n)?;
        }
        for (i, s) in self.self_layers.iter().enumerate() {
            let entry = format!("self_layers[{i}] {:?}", s.name);
            let p = s.height * s.width;
            if s.map.shape() != [p, p] {
                return Err(BundleError::ShapeMismatch { entry, detail: format!("map {:?}", s.map.shape()) });
            }
            check_stochastic(&entry, s.map.data(), p)?;
        }
        let d = &self.dense_feature;
        if d.tensor.dims2().map(|(p, _)| p) != Ok(d.height * d.width) {
            return Err(BundleError::ShapeMismatch {
                entry: format!("dense_feature {:?}", d.name),
                detail: format!("tensor {:?}", d.tensor.shape()),
            });
        }
        Ok(())
    }

    /// Manifest describing this bundle with canonical file names.
    pub fn manifest(&self) -> Manifest {
        Manifest {
            manifest_version: MANIFEST_VERSION,
            model_id: self.model_id.clone(),
            timestep: self.timestep,
            image_size: [self.image_size.0, self.image_size.1],
            tokens: self.tokens.clone(),
            classes: self.classes.clone(),
            cross_layers: self
                .cross_layers
                .iter()
                .enumerate()
                .map(|(i, c)| CrossLayerEntry {
                    name: c.name.clone(),
                    heads: c.heads(),
                    height: c.height,
                    width: c.width,
                    token_count: c.token_count(),
                    head_out_dim: c.head_out_dim(),
                    attn_file: format!("cross_{i:02}_attn.f32"),
                    head_out_file: format!("cross_{i:02}_head_out.f32"),
                })
                .collect(),
            self_layers: self
                .self_layers
                .iter()
                .enumerate()
                .map(|(i, s)| SelfLayerEntry {
                    name: s.name.clone(),
                    height: s.height,
                    width: s.width,
                    heads: 1,
                    map_file: format!("self_{i:02}.f32"),
                })
                .collect(),
            dense_feature: DenseFeatureEntry {
                name: self.dense_feature.name.clone(),
                height: self.dense_feature.height,
                width: self.dense_feature.width,
                channels: self.dense_feature.channels(),
                file: "dense_feature.f32".to_string(),
            },
        }
    }
}

pub fn load_bundle(dir: &Path) -> Result<ActivationBundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&manifest_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(BundleError::MissingFile(manifest_path))
        }
        Err(source) => return Err(BundleError::Io { path: manifest_path, source }),
    };
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| schema(format!("{MANIFEST_FILE}: {e}")))?;
    manifest.validate()?;

    let n = manifest.tokens.len();
    let mut cross_layers = Vec::with_capacity(manifest.cross_layers.len());
    for (i, c) in manifest.cross_layers.iter().enumerate() {
        let entry = format!("cross_layers[{i}] {:?}", c.name);
        let pixels = c.height * c.width;
        cross_layers.push(CrossLayer {
            name: c.name.clone(),
            height: c.height,
            width: c.width,
            attn: read_tensor(dir, &c.attn_file, &entry, vec![c.heads, pixels, n])?,
            head_out: read_tensor(dir, &c.head_out_file, &entry, vec![c.heads, pixels, c.head_out_dim])?,
        });
    }
    let mut self_layers = Vec::with_capacity(manifest.self_layers.len());
    for (i, s) in manifest.self_layers.iter().enumerate() {
        let entry = format!("self_layers[{i}] {:?}", s.name);
        let pixels = s.height * s.width;
        self_layers.push(SelfLayer {
            name: s.name.clone(),
            height: s.height,
            width: s.width,
            map: read_tensor(dir, &s.map_file, &entry, vec![pixels, pixels])?,
        });
    }
    let d = &manifest.dense_feature;
    let dense_feature = DenseFeature {
        name: d.name.clone(),
        height: d.height,
        width: d.width,
        tensor: read_tensor(dir, &d.file, &format!("dense_feature {:?}", d.name), vec![d.height * d.width, d.channels])?,
    };
    let bundle = ActivationBundle {
        model_id: manifest.model_id,
        timestep: manifest.timestep,
        image_size: (manifest.image_size[0], manifest.image_size[1]),
        tokens: manifest.tokens,
        classes: manifest.classes,
        cross_layers,
        self_layers,
        dense_feature,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|source| BundleError::Io { path, source })
}

/// Serialized `manifest.json` text for a bundle.
pub fn manifest_json(bundle: &ActivationBundle) -> String {
    serde_json::to_string_pretty(&bundle.manifest()).expect("manifest serializes") + "\n"
}

pub fn write_bundle(bundle: &ActivationBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|source| BundleError::Io { path: dir.to_path_buf(), source })?;
    let manifest = bundle.manifest();
    for (c, e) in bundle.cross_layers.iter().zip(&manifest.cross_layers) {
        write_file(dir.join(&e.attn_file), &c.attn.to_le_bytes())?;
        write_file(dir.join(&e.head_out_file), &c.head_out.to_le_bytes())?;
    }
    for (s, e) in bundle.self_layers.iter().zip(&manifest.self_layers) {
        write_file(dir.join(&e.map_file), &s.map.to_le_bytes())?;
    }
    write_file(dir.join(&manifest.dense_feature.file), &bundle.dense_feature.tensor.to_le_bytes())?;
    write_file(dir.join(MANIFEST_FILE), manifest_json(bundle).as_bytes())
}
