//! Overhead micro-benchmark: the full pipeline with activation-derived
//! weights and per-pixel rescaling against plain head/layer averaging on
//! the same synthetic bundle.
//!
//! The workload follows a U-Net style schedule: 16 attention blocks whose
//! grids are the base grid divided by 1, 2, 4 or 8, 77 prompt tokens,
//! per-head output width growing with depth, and a 640-channel dense
//! feature at half the base grid.

use std::time::Instant;

use serde::Serialize;

use crate::bundle::{ActivationBundle, ClassEntry, CrossLayer, DenseFeature, SelfLayer, TokenCategory, TokenEntry};
use crate::config::EngineConfig;
use crate::correlation::{self, CorrelationError};
use crate::fixture::{FixtureError, SplitMix64};
use crate::tensor::Tensor;

/// Downsampling level of each of 16 blocks (down, mid, up).
const LEVELS: [u32; 16] = [0, 0, 1, 1, 2, 2, 3, 2, 2, 2, 1, 1, 1, 0, 0, 0];
const OUTPUT_WIDTH: [usize; 4] = [320, 640, 1280, 1280];
pub const TOKENS: usize = 77;
pub const DENSE_CHANNELS: usize = 640;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub grid: (usize, usize),
    pub layers: usize,
    pub heads: usize,
    pub repeat: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { grid: (64, 64), layers: 16, heads: 8, repeat: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub grid: [usize; 2],
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub repeat: usize,
    pub uniform_runs: usize,
    pub auto_runs: usize,
    pub uniform_median_s: f64,
    pub auto_median_s: f64,
    pub ratio: f64,
    /// Pixels labelled per run; identical across runs.
    pub mask_pixels: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid bench spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Segment(#[from] CorrelationError),
}

fn level_grid(grid: (usize, usize), level: u32) -> (usize, usize) {
    ((grid.0 >> level).max(1), (grid.1 >> level).max(1))
}

fn stochastic_rows(rng: &mut SplitMix64, rows: usize, cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * cols);
    let mut row = vec![0f64; cols];
    for _ in 0..rows {
        row.iter_mut().for_each(|v| *v = rng.next_f64() + 1e-3);
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| (v / s) as f32));
    }
    out
}

/// Synthetic bundle for timing; values are random but every invariant the
/// loader checks holds.
pub fn bench_workload(spec: &BenchSpec) -> Result<ActivationBundle, BenchError> {
    if spec.grid.0 == 0 || spec.grid.1 == 0 || spec.layers == 0 || spec.heads == 0 {
        return Err(BenchError::InvalidSpec(format!("{spec:?}")));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let level = |m: usize| LEVELS[m * LEVELS.len() / spec.layers];
    let mut cross_layers = Vec::with_capacity(spec.layers);
    let mut self_layers = Vec::with_capacity(spec.layers);
    for m in 0..spec.layers {
        let (h, w) = level_grid(spec.grid, level(m));
        let pixels = h * w;
        let d = OUTPUT_WIDTH[level(m) as usize];
        let attn = stochastic_rows(&mut rng, spec.heads * pixels, TOKENS);
        let head_out: Vec<f32> = (0..spec.heads * pixels * d).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        cross_layers.push(CrossLayer {
            name: format!("cross_{m}"),
            height: h,
            width: w,
            attn: Tensor::new(vec![spec.heads, pixels, TOKENS], attn).map_err(FixtureError::from)?,
            head_out: Tensor::new(vec![spec.heads, pixels, d], head_out).map_err(FixtureError::from)?,
        });
        let map = stochastic_rows(&mut rng, pixels, pixels);
        self_layers.push(SelfLayer {
            name: format!("self_{m}"),
            height: h,
            width: w,
            map: Tensor::new(vec![pixels, pixels], map).map_err(FixtureError::from)?,
        });
    }
    let (fh, fw) = level_grid(spec.grid, 1);
    let feat: Vec<f32> = (0..fh * fw * DENSE_CHANNELS).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    let tokens = (0..TOKENS)
        .map(|j| {
            let (category, class_id) = match j {
                0 => (TokenCategory::Special, None),
                1..=4 => (TokenCategory::Content, Some([1, 1, 2, 3][j - 1])),
                _ => (TokenCategory::Stop, None),
            };
            TokenEntry { index: j, text: format!("t{j}"), category, class_id }
        })
        .collect();
    let classes = vec![
        ClassEntry { class_id: 1, name: "cat".into(), is_background: false },
        ClassEntry { class_id: 2, name: "dog".into(), is_background: false },
        ClassEntry { class_id: 3, name: "grass".into(), is_background: true },
    ];
    Ok(ActivationBundle {
        model_id: "bench".into(),
        timestep: 100,
        image_size: (spec.grid.0 * 8, spec.grid.1 * 8),
        tokens,
        classes,
        cross_layers,
        self_layers,
        dense_feature: DenseFeature {
            name: "dense".into(),
            height: fh,
            width: fw,
            tensor: Tensor::new(vec![fh * fw, DENSE_CHANNELS], feat).map_err(FixtureError::from)?,
        },
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times `repeat` runs of each configuration on one workload, alternating
/// which goes first.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport, BenchError> {
    if spec.repeat == 0 {
        return Err(BenchError::InvalidSpec("repeat must be at least 1".into()));
    }
    let bundle = bench_workload(spec)?;
    let uniform = EngineConfig::uniform_reference();
    let auto = EngineConfig::default();
    let (mut t_uniform, mut t_auto) = (Vec::new(), Vec::new());
    let mut mask_pixels = 0;
    for r in 0..spec.repeat {
        let order: [(&EngineConfig, bool); 2] = if r % 2 == 0 { [(&uniform, false), (&auto, true)] } else { [(&auto, true), (&uniform, false)] };
        for (config, is_auto) in order {
            let start = Instant::now();
            let mask = correlation::segment(&bundle, config)?;
            let elapsed = start.elapsed().as_secs_f64();
            mask_pixels = mask.labels().len();
            if is_auto { t_auto.push(elapsed) } else { t_uniform.push(elapsed) }
        }
    }
    let (uniform_runs, auto_runs) = (t_uniform.len(), t_auto.len());
    let uniform_median_s = median(t_uniform);
    let auto_median_s = median(t_auto);
    Ok(BenchReport {
        grid: [spec.grid.0, spec.grid.1],
        layers: spec.layers,
        heads: spec.heads,
        tokens: TOKENS,
        repeat: spec.repeat,
        uniform_runs,
        auto_runs,
        uniform_median_s,
        auto_median_s,
        ratio: auto_median_s / uniform_median_s,
        mask_pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_workload_validates_and_runs_once() {
        let spec = BenchSpec { grid: (8, 8), layers: 4, heads: 2, repeat: 1, seed: 3 };
        bench_workload(&spec).unwrap().validate().unwrap();
        let report = run_bench(&spec).unwrap();
        assert_eq!((report.uniform_runs, report.auto_runs), (1, 1));
        assert!(report.ratio > 0.0);
        assert_eq!(report.mask_pixels, 64 * 64);
    }

    #[test]
    fn schedule_uses_every_level_for_sixteen_layers() {
        let spec = BenchSpec { grid: (16, 16), layers: 16, heads: 1, repeat: 1, seed: 0 };
        let b = bench_workload(&spec).unwrap();
        let sizes: Vec<usize> = b.cross_layers.iter().map(|c| c.height).collect();
        assert_eq!(sizes, [16, 16, 8, 8, 4, 4, 2, 4, 4, 4, 8, 8, 8, 16, 16, 16]);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
    }
}
