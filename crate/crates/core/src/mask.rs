//! Per-pixel class-index masks and their on-disk form: 8-bit binary PGM
//! (`P5`, maxval 255) plus a JSON sidecar mapping class index to name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask dimensions {height}x{width} do not match {len} labels")]
    Dimensions { height: usize, width: usize, len: usize },
    #[error("class index {0} does not fit an 8-bit PGM")]
    Unsupported(u32),
    #[error("malformed PGM {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Class label per pixel, row-major; label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 || height * width != labels.len() {
            return Err(MaskError::Dimensions { height, width, len: labels.len() });
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Result<Self, MaskError> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Nearest-neighbour resize; target pixel `o` reads source `o * in / out`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self, MaskError> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                labels.push(self.get(sy, x * self.width / width));
            }
        }
        Self::new(height, width, labels)
    }

    /// Sorted distinct labels present in the mask.
    pub fn used_labels(&self) -> Vec<u32> {
        let mut used = self.labels.clone();
        used.sort_unstable();
        used.dedup();
        used
    }
}

/// Path of the JSON sidecar that accompanies a mask file.
pub fn sidecar_path(mask_path: &Path) -> PathBuf {
    mask_path.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MaskError + '_ {
    move |source| MaskError::Io { path: path.to_path_buf(), source }
}

/// Encodes a mask as PGM `P5` bytes.
pub fn encode_pgm(mask: &SegmentationMask) -> Result<Vec<u8>, MaskError> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.reserve(mask.labels.len());
    for &label in &mask.labels {
        bytes.push(u8::try_from(label).map_err(|_| MaskError::Unsupported(label))?);
    }
    Ok(bytes)
}

/// Writes the PGM mask and a sidecar listing every label used in the mask
/// plus every entry of `names`. Labels without a name become `class_<id>`.
pub fn write_mask(
    mask: &SegmentationMask,
    path: &Path,
    names: &BTreeMap<u32, String>,
) -> Result<(), MaskError> {
    let bytes = encode_pgm(mask)?;
    let mut sidecar: BTreeMap<u32, String> = names.clone();
    sidecar.entry(0).or_insert_with(|| "background".to_string());
    for label in mask.used_labels() {
        sidecar.entry(label).or_insert_with(|| format!("class_{label}"));
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("string map serializes");
    fs::write(&side, json + "\n").map_err(io_err(&side))?;
    Ok(())
}

/// Reads a class-name map written by [`write_mask`].
pub fn read_class_names(path: &Path) -> Result<BTreeMap<u32, String>, MaskError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| MaskError::Malformed {
        path: path.to_path_buf(),
        reason: format!("class map: {e}"),
    })
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<SegmentationMask, MaskError> {
    let bad = |reason: &str| MaskError::Malformed { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number().ok_or_else(|| bad("bad width"))?;
    let height = cur.number().ok_or_else(|| bad("bad height"))?;
    let maxval = cur.number().ok_or_else(|| bad("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(bad("missing separator before raster"));
    }
    let raster = &bytes[cur.pos + 1..];
    if raster.len() != width * height {
        return Err(bad(&format!("raster has {} bytes, expected {}", raster.len(), width * height)));
    }
    SegmentationMask::new(height, width, raster.iter().map(|&b| b as u32).collect())
}

pub fn read_mask(path: &Path) -> Result<SegmentationMask, MaskError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes, path)
}
