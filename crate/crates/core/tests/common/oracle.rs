//! Brute-force reference pipeline.
//!
//! Shares no arithmetic with the library: resizing uses explicit dense
//! interpolation matrices, pair maps are resized as `R · S · Rᵀ` by
//! matrix products, and refinement materializes the full weighted
//! self-attention matrix. Values are rounded to `f32` at the same stage
//! boundaries the library stores them, so both sides see the same inputs
//! at every step.

use std::collections::BTreeMap;

use attnseg::bundle::{ActivationBundle, TokenCategory};
use attnseg::config::{AggregationMode, EngineConfig, HeadMetric, LayerMetric, TargetResolution};
use attnseg::SegmentationMask;

pub struct OracleOutput {
    /// Per cross layer, `[pixel][head]`.
    pub head_weights: Vec<Vec<Vec<f64>>>,
    pub self_layer_weights: Vec<f64>,
    pub cross_layer_weights: Vec<f64>,
    pub columns: Vec<u32>,
    pub raw: Vec<f32>,
    pub merged: Vec<f32>,
    pub rescaled: Option<Vec<f32>>,
    pub renormalized: Vec<f32>,
    pub refined: Vec<f32>,
    pub mask: SegmentationMask,
}

type Matrix = Vec<Vec<f64>>;

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn transpose(a: &Matrix) -> Matrix {
    if a.is_empty() {
        return vec![];
    }
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Dense 1-D linear interpolation, half-pixel centres, edge clamped.
fn interp_1d(src: usize, dst: usize) -> Matrix {
    let mut m = vec![vec![0.0; src]; dst];
    for (o, row) in m.iter_mut().enumerate() {
        let centre = (o as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
        let pos = centre.clamp(0.0, (src - 1) as f64);
        let left = pos.floor() as usize;
        let t = pos - left as f64;
        row[left] += 1.0 - t;
        if t > 0.0 {
            row[left + 1] += t;
        }
    }
    m
}

/// Dense bilinear resampling matrix `[dst_h·dst_w × src_h·src_w]` as the
/// Kronecker product of the two axis matrices.
fn interp_2d(src: (usize, usize), dst: (usize, usize)) -> Matrix {
    let (ry, rx) = (interp_1d(src.0, dst.0), interp_1d(src.1, dst.1));
    let mut m = vec![vec![0.0; src.0 * src.1]; dst.0 * dst.1];
    for oy in 0..dst.0 {
        for ox in 0..dst.1 {
            for sy in 0..src.0 {
                for sx in 0..src.1 {
                    m[oy * dst.1 + ox][sy * src.1 + sx] = ry[oy][sy] * rx[ox][sx];
                }
            }
        }
    }
    m
}

fn to_matrix(data: &[f32], rows: usize, cols: usize) -> Matrix {
    (0..rows).map(|r| data[r * cols..(r + 1) * cols].iter().map(|&v| v as f64).collect()).collect()
}

fn row_normalize(m: &mut Matrix) {
    for row in m.iter_mut() {
        let s: f64 = row.iter().sum();
        let n = row.len() as f64;
        for v in row.iter_mut() {
            *v = if s > 0.0 { *v / s } else { 1.0 / n };
        }
    }
}

fn simplex(mut raw: Vec<f64>) -> Vec<f64> {
    let clamped: Vec<f64> = raw.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let total: f64 = clamped.iter().sum();
    if total > 0.0 {
        raw = clamped.iter().map(|v| v / total).collect();
    } else {
        let n = raw.len() as f64;
        raw = vec![1.0 / n; raw.len()];
    }
    raw
}

fn resized_pairs(map: &[f32], src: (usize, usize), dst: (usize, usize)) -> Matrix {
    let side = src.0 * src.1;
    let r = interp_2d(src, dst);
    let mut out = matmul(&matmul(&r, &to_matrix(map, side, side)), &transpose(&r));
    row_normalize(&mut out);
    out
}

pub fn oracle_segment(bundle: &ActivationBundle, config: &EngineConfig) -> OracleOutput {
    let auto = config.aggregation == AggregationMode::Auto;
    let n_tokens = bundle.tokens.len();

    // Head weights and per-layer maps.
    let mut head_weights = Vec::new();
    let mut layer_maps: Vec<Matrix> = Vec::new();
    for layer in &bundle.cross_layers {
        let shape = layer.head_out.shape();
        let (h, p, d) = (shape[0], shape[1], shape[2]);
        let summand = |n: usize, i: usize| -> Vec<f64> {
            layer.head_out.data()[(n * p + i) * d..(n * p + i + 1) * d].iter().map(|&v| v as f64).collect()
        };
        let mut per_pixel = Vec::with_capacity(p);
        for i in 0..p {
            let heads: Vec<Vec<f64>> = (0..h).map(|n| summand(n, i)).collect();
            let output: Vec<f64> = (0..d).map(|c| heads.iter().map(|v| v[c]).sum()).collect();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let raw: Vec<f64> = heads
                .iter()
                .map(|v| match config.head_metric {
                    HeadMetric::Dot => dotp(v, &output),
                    HeadMetric::L2 => norm(v),
                    HeadMetric::Cosine => {
                        let denom = norm(v) * norm(&output);
                        if denom > 0.0 {
                            dotp(v, &output) / denom
                        } else {
                            0.0
                        }
                    }
                })
                .collect();
            per_pixel.push(if auto { simplex(raw) } else { vec![1.0 / h as f64; h] });
        }
        let attn = layer.attn.data();
        let map: Matrix = (0..p)
            .map(|i| {
                let row: Vec<f64> = (0..n_tokens)
                    .map(|j| (0..h).map(|n| per_pixel[i][n] * attn[(n * p + i) * n_tokens + j] as f64).sum())
                    .collect();
                round(&row)
            })
            .collect();
        head_weights.push(per_pixel);
        layer_maps.push(map);
    }

    // Layer weights.
    let k_self = bundle.self_layers.len();
    let self_layer_weights = if auto {
        let feat = &bundle.dense_feature;
        let (fp, fd) = (feat.height * feat.width, feat.tensor.shape()[1]);
        let f = to_matrix(feat.tensor.data(), fp, fd);
        let scale = 1.0 / (fd as f64).sqrt();
        let pseudo: Matrix = (0..fp)
            .map(|i| {
                let logits: Vec<f64> = (0..fp)
                    .map(|j| (0..fd).map(|c| f[i][c] * f[j][c]).sum::<f64>() as f32 as f64)
                    .collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| ((l - top) * scale).exp()).collect();
                let s: f64 = e.iter().sum();
                round(&e.iter().map(|v| v / s).collect::<Vec<_>>())
            })
            .collect();
        let raw = bundle
            .self_layers
            .iter()
            .map(|layer| {
                let resized = resized_pairs(layer.map.data(), (layer.height, layer.width), (feat.height, feat.width));
                let pairs = pseudo.iter().flatten().zip(resized.iter().flatten());
                match config.layer_metric {
                    LayerMetric::Dot => pairs.map(|(a, b)| a * b).sum(),
                    LayerMetric::Mse => {
                        let count = (fp * fp) as f64;
                        1.0 / (pairs.map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / count + config.epsilon)
                    }
                    LayerMetric::Iou => {
                        let (lo, hi) = pairs.fold((0.0, 0.0), |(lo, hi), (a, b)| (lo + a.min(*b), hi + a.max(*b)));
                        if hi > 0.0 {
                            lo / hi
                        } else {
                            0.0
                        }
                    }
                }
            })
            .collect();
        simplex(raw)
    } else {
        vec![1.0 / k_self as f64; k_self]
    };
    let k_cross = bundle.cross_layers.len();
    let cross_layer_weights = if auto {
        let pairing: Vec<usize> = config.layer_pairing.clone().unwrap_or_else(|| (0..k_cross).collect());
        simplex(pairing.iter().map(|&s| self_layer_weights[s]).collect())
    } else {
        vec![1.0 / k_cross as f64; k_cross]
    };

    // Global map at the target grid.
    let target = match config.target_resolution {
        TargetResolution::Max => (
            bundle.cross_layers.iter().map(|c| c.height).max().unwrap(),
            bundle.cross_layers.iter().map(|c| c.width).max().unwrap(),
        ),
        TargetResolution::Fixed { height, width } => (height, width),
    };
    let pixels = target.0 * target.1;
    let mut raw = vec![vec![0.0; n_tokens]; pixels];
    for ((layer, map), w) in bundle.cross_layers.iter().zip(&layer_maps).zip(&cross_layer_weights) {
        let resized = matmul(&interp_2d((layer.height, layer.width), target), map);
        for (acc, row) in raw.iter_mut().zip(&resized) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += w * v;
            }
        }
    }
    let raw: Matrix = raw.iter().map(|r| round(r)).collect();

    // Merge content tokens by class.
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, t) in bundle.tokens.iter().enumerate() {
        if t.category == TokenCategory::Content {
            groups.entry(t.class_id.unwrap()).or_default().push(j);
        }
    }
    let columns: Vec<u32> = groups.keys().copied().collect();
    let merged: Matrix = raw
        .iter()
        .map(|row| round(&groups.values().map(|idx| idx.iter().map(|&j| row[j]).sum::<f64>() / idx.len() as f64).collect::<Vec<_>>()))
        .collect();
    let cols = columns.len();

    let rescaled: Option<Matrix> = config.per_pixel_rescale.then(|| {
        merged
            .iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                round(&row.iter().map(|v| if s > 0.0 { v / s } else { 1.0 / cols as f64 }).collect::<Vec<_>>())
            })
            .collect()
    });
    let base = rescaled.as_ref().unwrap_or(&merged);
    let mut renormalized = vec![vec![0.0; cols]; pixels];
    for j in 0..cols {
        let lo = base.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
        let hi = base.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for i in 0..pixels {
                renormalized[i][j] = (base[i][j] - lo) / (hi - lo);
            }
        }
    }
    let renormalized: Matrix = renormalized.iter().map(|r| round(r)).collect();

    // Materialized refinement matrix.
    let mut s = vec![vec![0.0; pixels]; pixels];
    for (layer, w) in bundle.self_layers.iter().zip(&self_layer_weights) {
        let resized = resized_pairs(layer.map.data(), (layer.height, layer.width), target);
        for (srow, rrow) in s.iter_mut().zip(&resized) {
            for (a, b) in srow.iter_mut().zip(rrow) {
                *a += w * b;
            }
        }
    }
    let mut refined = renormalized.clone();
    for _ in 0..config.refinement_steps {
        refined = matmul(&s, &refined);
    }
    let refined: Matrix = refined.iter().map(|r| round(r)).collect();

    // Labels.
    let is_bg: BTreeMap<u32, bool> = bundle.classes.iter().map(|c| (c.class_id, c.is_background)).collect();
    let grid_labels: Vec<u32> = refined
        .iter()
        .map(|row| {
            let mut bg = config.bg_threshold;
            let mut best: Option<(f64, u32)> = None;
            for (j, &id) in columns.iter().enumerate() {
                if is_bg[&id] {
                    bg = bg.max(row[j]);
                } else if best.map_or(true, |(b, _)| row[j] > b) {
                    best = Some((row[j], id));
                }
            }
            match best {
                Some((score, id)) if score >= bg => id,
                _ => 0,
            }
        })
        .collect();
    let (ih, iw) = bundle.image_size;
    let labels: Vec<u32> = (0..ih * iw)
        .map(|k| {
            let (y, x) = (k / iw, k % iw);
            grid_labels[(y * target.0 / ih) * target.1 + x * target.1 / iw]
        })
        .collect();

    let flat = |m: &Matrix| to_f32(&m.concat());
    OracleOutput {
        head_weights,
        self_layer_weights,
        cross_layer_weights,
        columns,
        raw: flat(&raw),
        merged: flat(&merged),
        rescaled: rescaled.as_ref().map(flat),
        renormalized: flat(&renormalized),
        refined: flat(&refined),
        mask: SegmentationMask::new(ih, iw, labels).unwrap(),
    }
}
