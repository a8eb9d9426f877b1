//! From a raw global attention map to a segmentation mask.
//!
//! Stages run in a fixed order: token columns are merged into class
//! columns (special and stop tokens dropped), each pixel's class scores are
//! rescaled to sum to one, each class column is min-max re-normalized, the
//! result is propagated through the weighted self-attention, and every
//! pixel takes the best class unless the background score beats it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::aggregation::{self, AggregationError, HeadWeights, LayerMap, LayerWeights};
use crate::bundle::{ActivationBundle, ClassEntry, SelfLayer, TokenCategory, TokenEntry};
use crate::config::{AggregationMode, ConfigError, EngineConfig, TargetResolution};
use crate::mask::{MaskError, SegmentationMask};
use crate::tensor::{self, ResamplePlan, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CorrelationError {
    #[error("no content tokens to segment with")]
    NoContentTokens,
    #[error("negative score {value} at pixel {pixel}, column {column}")]
    InvalidScores { pixel: usize, column: usize, value: f32 },
    #[error("stage {got} cannot feed this step (expected {expected})")]
    WrongStage { expected: &'static str, got: Stage },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T> = std::result::Result<T, CorrelationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Raw,
    Merged,
    Rescaled,
    Renormalized,
    Refined,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Raw, Stage::Merged, Stage::Rescaled, Stage::Renormalized, Stage::Refined];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Merged => "merged",
            Stage::Rescaled => "rescaled",
            Stage::Renormalized => "renormalized",
            Stage::Refined => "refined",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pixel × column scores on a `height × width` grid. Columns are token
/// indices at [`Stage::Raw`] and class ids (ascending) afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAttentionMap {
    pub scores: Tensor,
    pub stage: Stage,
    pub columns: Vec<u32>,
    pub height: usize,
    pub width: usize,
}

impl GlobalAttentionMap {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn with(&self, stage: Stage, data: &[f64]) -> Result<Self> {
        Ok(Self {
            scores: Tensor::from_f64(self.scores.shape().to_vec(), data)?,
            stage,
            columns: self.columns.clone(),
            height: self.height,
            width: self.width,
        })
    }

    fn values(&self) -> Vec<f64> {
        self.scores.data().iter().map(|&v| v as f64).collect()
    }
}

fn expect_stage(m: &GlobalAttentionMap, allowed: &[Stage], expected: &'static str) -> Result<()> {
    if allowed.contains(&m.stage) {
        Ok(())
    } else {
        Err(CorrelationError::WrongStage { expected, got: m.stage })
    }
}

/// One column per class holding the mean of its content-token columns.
/// Classes without content tokens get no column.
pub fn merge_token_columns(
    raw: &GlobalAttentionMap,
    tokens: &[TokenEntry],
    classes: &[ClassEntry],
) -> Result<GlobalAttentionMap> {
    expect_stage(raw, &[Stage::Raw], "raw")?;
    let (pixels, cols) = raw.scores.dims2()?;
    if cols != tokens.len() {
        return Err(CorrelationError::Shape(format!("{cols} score columns for {} tokens", tokens.len())));
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, t) in tokens.iter().enumerate() {
        if let (TokenCategory::Content, Some(id)) = (t.category, t.class_id) {
            members.entry(id).or_default().push(j);
        }
    }
    if members.is_empty() {
        return Err(CorrelationError::NoContentTokens);
    }
    if let Some(id) = members.keys().find(|id| !classes.iter().any(|c| c.class_id == **id)) {
        return Err(CorrelationError::Shape(format!("content tokens reference undeclared class {id}")));
    }
    let groups: Vec<(u32, Vec<usize>)> = members.into_iter().collect();
    let mut out = Vec::with_capacity(pixels * groups.len());
    for i in 0..pixels {
        let row = raw.scores.row(i);
        for (_, idx) in &groups {
            let sum: f64 = idx.iter().map(|&j| row[j] as f64).sum();
            out.push(sum / idx.len() as f64);
        }
    }
    Ok(GlobalAttentionMap {
        scores: Tensor::from_f64(vec![pixels, groups.len()], &out)?,
        stage: Stage::Merged,
        columns: groups.into_iter().map(|(id, _)| id).collect(),
        height: raw.height,
        width: raw.width,
    })
}

/// Divides each pixel's class scores by their sum; an all-zero row becomes
/// uniform.
pub fn per_pixel_rescale(m: &GlobalAttentionMap) -> Result<GlobalAttentionMap> {
    expect_stage(m, &[Stage::Merged], "merged")?;
    let (pixels, cols) = m.scores.dims2()?;
    let mut out = vec![0f64; pixels * cols];
    for i in 0..pixels {
        let row = m.scores.row(i);
        if let Some((column, &value)) = row.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(CorrelationError::InvalidScores { pixel: i, column, value });
        }
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
            *o = if sum > 0.0 { v as f64 / sum } else { 1.0 / cols as f64 };
        }
    }
    m.with(Stage::Rescaled, &out)
}

/// Min-max normalizes every class column over pixels; a constant column
/// becomes all zeros.
pub fn per_token_renormalize(m: &GlobalAttentionMap) -> Result<GlobalAttentionMap> {
    expect_stage(m, &[Stage::Rescaled, Stage::Merged], "rescaled or merged")?;
    let (pixels, cols) = m.scores.dims2()?;
    let data = m.scores.data();
    let mut out = vec![0f64; pixels * cols];
    for j in 0..cols {
        let column = (0..pixels).map(|i| data[i * cols + j] as f64);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if hi > lo {
            for i in 0..pixels {
                out[i * cols + j] = (data[i * cols + j] as f64 - lo) / (hi - lo);
            }
        }
    }
    m.with(Stage::Renormalized, &out)
}

struct RefineLayer<'a> {
    weight: f64,
    plan: ResamplePlan,
    map: &'a Tensor,
    row_sums: Vec<f64>,
}

/// Weighted sum of self-attention maps resized to a target grid, applied
/// without materializing the target-resolution matrices: each layer acts
/// as `D⁻¹ · R · S · Rᵀ`, with `R` the bilinear resampling and `D` the row
/// sums of `R · S · Rᵀ`.
pub struct RefinementOperator<'a> {
    target: (usize, usize),
    layers: Vec<RefineLayer<'a>>,
}

fn apply_map(map: &Tensor, u: &[f64], cols: usize) -> Vec<f64> {
    let side = map.shape()[0];
    let columns: Vec<Vec<f64>> = (0..cols).map(|c| u.iter().skip(c).step_by(cols).copied().collect()).collect();
    let mut v = vec![0f64; side * cols];
    for (a, out) in v.chunks_exact_mut(cols).enumerate() {
        let row = map.row(a);
        for (o, column) in out.iter_mut().zip(&columns) {
            *o = tensor::dot_f64(row, column);
        }
    }
    v
}

impl<'a> RefinementOperator<'a> {
    pub fn new(self_layers: &'a [SelfLayer], weights: &LayerWeights, target: (usize, usize)) -> Result<Self> {
        if self_layers.len() != weights.len() {
            return Err(CorrelationError::Shape(format!(
                "{} self layers, {} weights",
                self_layers.len(),
                weights.len()
            )));
        }
        let mut layers = Vec::new();
        for (layer, &weight) in self_layers.iter().zip(weights.as_slice()) {
            if weight == 0.0 {
                continue;
            }
            let plan = ResamplePlan::new((layer.height, layer.width), target)?;
            let ones = vec![1.0; target.0 * target.1];
            let row_sums = plan.gather_rows(&apply_map(&layer.map, &plan.scatter_rows(&ones, 1), 1), 1);
            layers.push(RefineLayer { weight, plan, map: &layer.map, row_sums });
        }
        Ok(Self { target, layers })
    }

    /// `S · x` for a pixel-major `[pixels × cols]` buffer.
    pub fn apply(&self, x: &[f64], cols: usize) -> Vec<f64> {
        let pixels = self.target.0 * self.target.1;
        let mut y = vec![0f64; pixels * cols];
        let mut column_mean: Option<Vec<f64>> = None;
        for layer in &self.layers {
            let z = layer.plan.gather_rows(&apply_map(layer.map, &layer.plan.scatter_rows(x, cols), cols), cols);
            for i in 0..pixels {
                let d = layer.row_sums[i];
                let yi = &mut y[i * cols..(i + 1) * cols];
                if d > 0.0 {
                    for (o, &v) in yi.iter_mut().zip(&z[i * cols..(i + 1) * cols]) {
                        *o += layer.weight * v / d;
                    }
                } else {
                    // Empty resized row: treated as uniform over the target grid.
                    let mean = column_mean.get_or_insert_with(|| {
                        let mut m = vec![0f64; cols];
                        for row in x.chunks_exact(cols) {
                            m.iter_mut().zip(row).for_each(|(a, b)| *a += b / pixels as f64);
                        }
                        m
                    });
                    for (o, &v) in yi.iter_mut().zip(mean.iter()) {
                        *o += layer.weight * v;
                    }
                }
            }
        }
        y
    }
}

/// Applies the weighted self-attention `steps` times.
pub fn self_attention_refine(
    m: &GlobalAttentionMap,
    self_layers: &[SelfLayer],
    weights: &LayerWeights,
    steps: u32,
) -> Result<GlobalAttentionMap> {
    expect_stage(m, &[Stage::Renormalized], "renormalized")?;
    let cols = m.scores.dims2()?.1;
    let mut x = m.values();
    if steps > 0 {
        let op = RefinementOperator::new(self_layers, weights, (m.height, m.width))?;
        for _ in 0..steps {
            x = op.apply(&x, cols);
        }
    }
    m.with(Stage::Refined, &x)
}

/// Per pixel: the best non-background class (ties go to the lower class
/// id) unless `max(bg_threshold, background-class scores)` is strictly
/// larger, in which case label 0. Upsampled to `image_size` by nearest
/// neighbour.
pub fn label_pixels(
    m: &GlobalAttentionMap,
    classes: &[ClassEntry],
    bg_threshold: f64,
    image_size: (usize, usize),
) -> Result<SegmentationMask> {
    let (pixels, cols) = m.scores.dims2()?;
    if cols != m.columns.len() {
        return Err(CorrelationError::Shape(format!("{cols} score columns, {} labels", m.columns.len())));
    }
    let background: HashMap<u32, bool> = classes.iter().map(|c| (c.class_id, c.is_background)).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by_key(|&j| m.columns[j]);
    let mut labels = Vec::with_capacity(pixels);
    for i in 0..pixels {
        let row = m.scores.row(i);
        let mut fg: Option<(f32, u32)> = None;
        let mut bg = bg_threshold;
        for &j in &order {
            let (score, id) = (row[j], m.columns[j]);
            if background.get(&id).copied().unwrap_or(false) {
                bg = bg.max(score as f64);
            } else if fg.is_none_or(|(best, _)| score > best) {
                fg = Some((score, id));
            }
        }
        labels.push(match fg {
            Some((score, id)) if score as f64 >= bg => id,
            _ => 0,
        });
    }
    Ok(SegmentationMask::new(m.height, m.width, labels)?.resize_nearest(image_size.0, image_size.1)?)
}

/// Everything the pipeline computed for one bundle.
#[derive(Debug, Clone)]
pub struct SegmentationTrace {
    pub head_weights: Vec<HeadWeights>,
    pub self_layer_weights: LayerWeights,
    pub cross_layer_weights: LayerWeights,
    pub raw: GlobalAttentionMap,
    pub merged: GlobalAttentionMap,
    pub rescaled: Option<GlobalAttentionMap>,
    pub renormalized: GlobalAttentionMap,
    pub refined: GlobalAttentionMap,
    pub mask: SegmentationMask,
}

impl SegmentationTrace {
    /// Stage maps in pipeline order; the rescaled stage is absent when
    /// rescaling is disabled.
    pub fn stages(&self) -> Vec<&GlobalAttentionMap> {
        let mut out = vec![&self.raw, &self.merged];
        out.extend(self.rescaled.as_ref());
        out.extend([&self.renormalized, &self.refined]);
        out
    }
}

pub fn target_resolution(bundle: &ActivationBundle, policy: TargetResolution) -> (usize, usize) {
    match policy {
        TargetResolution::Max => (
            bundle.cross_layers.iter().map(|c| c.height).max().unwrap_or(1),
            bundle.cross_layers.iter().map(|c| c.width).max().unwrap_or(1),
        ),
        TargetResolution::Fixed { height, width } => (height, width),
    }
}

pub fn segment_traced(bundle: &ActivationBundle, config: &EngineConfig) -> Result<SegmentationTrace> {
    config.validate()?;
    let auto = config.aggregation == AggregationMode::Auto;

    let mut head_weights = Vec::with_capacity(bundle.cross_layers.len());
    let mut layer_maps = Vec::with_capacity(bundle.cross_layers.len());
    for layer in &bundle.cross_layers {
        let w = if auto {
            aggregation::head_weights(&layer.head_out, config.head_metric)?
        } else {
            HeadWeights::uniform(layer.pixels(), layer.heads())
        };
        layer_maps.push(LayerMap {
            height: layer.height,
            width: layer.width,
            scores: aggregation::aggregate_heads(&layer.attn, &w)?,
        });
        head_weights.push(w);
    }

    let self_layer_weights = if auto {
        let feat = &bundle.dense_feature;
        let pseudo = aggregation::pseudo_self_attention(&feat.tensor, (feat.height, feat.width))?;
        aggregation::layer_weights(&bundle.self_layers, &pseudo, config.layer_metric, config.epsilon)?
    } else {
        LayerWeights::uniform(bundle.self_layers.len())
    };
    let cross_layer_weights = if auto {
        aggregation::cross_layer_weights(
            &self_layer_weights,
            bundle.cross_layers.len(),
            config.layer_pairing.as_deref(),
        )?
    } else {
        LayerWeights::uniform(bundle.cross_layers.len())
    };

    let target = target_resolution(bundle, config.target_resolution);
    let raw = aggregation::aggregate_layers(&layer_maps, &cross_layer_weights, target)?;
    let merged = merge_token_columns(&raw, &bundle.tokens, &bundle.classes)?;
    let rescaled = if config.per_pixel_rescale { Some(per_pixel_rescale(&merged)?) } else { None };
    let renormalized = per_token_renormalize(rescaled.as_ref().unwrap_or(&merged))?;
    let refined =
        self_attention_refine(&renormalized, &bundle.self_layers, &self_layer_weights, config.refinement_steps)?;
    let mask = label_pixels(&refined, &bundle.classes, config.bg_threshold, bundle.image_size)?;
    Ok(SegmentationTrace {
        head_weights,
        self_layer_weights,
        cross_layer_weights,
        raw,
        merged,
        rescaled,
        renormalized,
        refined,
        mask,
    })
}

pub fn segment(bundle: &ActivationBundle, config: &EngineConfig) -> Result<SegmentationMask> {
    Ok(segment_traced(bundle, config)?.mask)
}
