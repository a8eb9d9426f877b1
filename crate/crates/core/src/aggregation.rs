//! Automatic head-wise and layer-wise aggregation of cross-attention maps.
//!
//! A multi-head layer's output is the sum of its per-head summands
//! `A_n V_n W_n^O`; each head is weighted, per pixel, by how much its summand
//! agrees with that sum. Layers are weighted by how closely their
//! self-attention map matches a pseudo self-attention computed from a dense
//! feature, and each cross layer inherits the weight of its paired self
//! layer.
//!
//! Raw similarities are clamped at zero before normalization; when every
//! similarity clamps to zero the weights fall back to uniform.

use thiserror::Error;

use crate::bundle::SelfLayer;
use crate::config::{HeadMetric, LayerMetric};
use crate::correlation::{GlobalAttentionMap, Stage};
use crate::tensor::{self, ResamplePlan, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer pairing: {0}")]
    Pairing(String),
}

pub type Result<T> = std::result::Result<T, AggregationError>;

/// Clamps negatives (and NaN) to zero and scales to sum one; uniform when
/// nothing positive remains.
pub fn normalize_simplex(raw: &mut [f64]) {
    for v in raw.iter_mut() {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
    let sum: f64 = raw.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        raw.iter_mut().for_each(|v| *v /= sum);
    } else {
        let u = 1.0 / raw.len() as f64;
        raw.fill(u);
    }
}

/// Per-pixel head weights of one layer, `[pixels × heads]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pixels: usize,
    heads: usize,
    weights: Vec<f64>,
}

impl HeadWeights {
    pub fn uniform(pixels: usize, heads: usize) -> Self {
        Self { pixels, heads, weights: vec![1.0 / heads as f64; pixels * heads] }
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Weights of every head at pixel `i`.
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.weights[i * self.heads..(i + 1) * self.heads]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// Normalized weight per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights(Vec<f64>);

impl LayerWeights {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// Normalizes raw, possibly negative, scores onto the simplex.
    pub fn from_raw(mut raw: Vec<f64>) -> Self {
        normalize_simplex(&mut raw);
        Self(raw)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Layer output per pixel: the sum of the head summands, `[pixels × d]`.
pub fn sum_head_outputs(head_out: &Tensor) -> Result<Tensor> {
    let (heads, pixels, d) = head_out.dims3()?;
    let data = head_out.data();
    let mut out = vec![0f64; pixels * d];
    for n in 0..heads {
        let block = &data[n * pixels * d..(n + 1) * pixels * d];
        for (o, &v) in out.iter_mut().zip(block) {
            *o += v as f64;
        }
    }
    Ok(Tensor::from_f64(vec![pixels, d], &out)?)
}

/// Per-pixel contribution weights of each head to the layer output.
pub fn head_weights(head_out: &Tensor, metric: HeadMetric) -> Result<HeadWeights> {
    let (heads, pixels, d) = head_out.dims3()?;
    let data = head_out.data();
    let mut weights = vec![0f64; pixels * heads];
    let mut output = vec![0f64; d];
    for i in 0..pixels {
        let summand = |n: usize| &data[(n * pixels + i) * d..(n * pixels + i + 1) * d];
        output.fill(0.0);
        for n in 0..heads {
            for (o, &v) in output.iter_mut().zip(summand(n)) {
                *o += v as f64;
            }
        }
        let out_norm = tensor::dot_f64(&output, &output).sqrt();
        let row = &mut weights[i * heads..(i + 1) * heads];
        for (n, w) in row.iter_mut().enumerate() {
            let v = summand(n);
            *w = match metric {
                HeadMetric::Dot => tensor::dot_f64(v, &output),
                HeadMetric::L2 => tensor::dot_slices(v, v).sqrt(),
                HeadMetric::Cosine => {
                    let norm = tensor::dot_slices(v, v).sqrt();
                    if norm == 0.0 || out_norm == 0.0 {
                        0.0
                    } else {
                        tensor::dot_f64(v, &output) / (norm * out_norm)
                    }
                }
            };
        }
        normalize_simplex(row);
    }
    Ok(HeadWeights { pixels, heads, weights })
}

/// `A_m(i, j) = Σ_n w_n(i) · A_n(i, j)`.
pub fn aggregate_heads(attn: &Tensor, w: &HeadWeights) -> Result<Tensor> {
    let (heads, pixels, tokens) = attn.dims3()?;
    if heads != w.heads || pixels != w.pixels {
        return Err(AggregationError::Shape(format!(
            "attn [{heads} x {pixels} x {tokens}] vs head weights [{} x {}]",
            w.pixels, w.heads
        )));
    }
    let data = attn.data();
    let mut out = vec![0f64; pixels * tokens];
    for i in 0..pixels {
        let o = &mut out[i * tokens..(i + 1) * tokens];
        for (n, &wn) in w.pixel(i).iter().enumerate() {
            let row = &data[(n * pixels + i) * tokens..(n * pixels + i + 1) * tokens];
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst += wn * v as f64;
            }
        }
    }
    Ok(Tensor::from_f64(vec![pixels, tokens], &out)?)
}

/// Row-stochastic pixel affinity derived from a dense feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSelfAttention {
    pub height: usize,
    pub width: usize,
    pub map: Tensor,
}

/// `softmax(feat · featᵀ / sqrt(d))` over a `[pixels × d]` feature.
pub fn pseudo_self_attention(feat: &Tensor, grid: (usize, usize)) -> Result<PseudoSelfAttention> {
    let (pixels, d) = feat.dims2()?;
    if pixels != grid.0 * grid.1 {
        return Err(AggregationError::Shape(format!(
            "dense feature has {pixels} rows, grid is {}x{}",
            grid.0, grid.1
        )));
    }
    let mut gram = vec![0f32; pixels * pixels];
    for i in 0..pixels {
        let a = feat.row(i);
        for j in i..pixels {
            let v = tensor::dot_slices(a, feat.row(j)) as f32;
            gram[i * pixels + j] = v;
            gram[j * pixels + i] = v;
        }
    }
    let gram = Tensor::new(vec![pixels, pixels], gram)?;
    let map = tensor::softmax_rows(&gram, 1.0 / (d as f64).sqrt())?;
    Ok(PseudoSelfAttention { height: grid.0, width: grid.1, map })
}

/// Similarity between the pseudo map and a self map resized onto its grid,
/// accumulated row by row.
fn similarity(metric: LayerMetric, pseudo: &Tensor, layer: &Tensor, plan: &ResamplePlan, epsilon: f64) -> f64 {
    let (mut a, mut b) = (0.0, 0.0);
    tensor::for_each_pairwise_row(layer, plan, |i, row| {
        let p = pseudo.row(i);
        match metric {
            LayerMetric::Dot => a += tensor::dot_f64(p, row),
            LayerMetric::Mse => a += p.iter().zip(row).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>(),
            LayerMetric::Iou => {
                for (&x, &y) in p.iter().zip(row) {
                    let x = x as f64;
                    a += x.min(y);
                    b += x.max(y);
                }
            }
        }
    });
    match metric {
        LayerMetric::Dot => a,
        LayerMetric::Mse => 1.0 / (a / pseudo.len() as f64 + epsilon),
        LayerMetric::Iou => {
            if b > 0.0 {
                a / b
            } else {
                0.0
            }
        }
    }
}

/// Weight of each self layer from its similarity to the pseudo
/// self-attention, after resizing the map to the pseudo resolution.
pub fn layer_weights(
    self_layers: &[SelfLayer],
    pseudo: &PseudoSelfAttention,
    metric: LayerMetric,
    epsilon: f64,
) -> Result<LayerWeights> {
    if self_layers.is_empty() {
        return Err(AggregationError::Shape("no self layers".into()));
    }
    let target = (pseudo.height, pseudo.width);
    let raw = self_layers
        .iter()
        .map(|layer| {
            let plan = ResamplePlan::new((layer.height, layer.width), target)?;
            Ok(similarity(metric, &pseudo.map, &layer.map, &plan, epsilon))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerWeights::from_raw(raw))
}

/// Cross-layer weights inherited from self-layer weights through `pairing`
/// (cross layer `m` takes self layer `pairing[m]`; positional when `None`),
/// re-normalized over the cross layers.
pub fn cross_layer_weights(
    self_weights: &LayerWeights,
    cross_count: usize,
    pairing: Option<&[usize]>,
) -> Result<LayerWeights> {
    let positional: Vec<usize>;
    let pairing = match pairing {
        Some(p) => p,
        None => {
            positional = (0..cross_count).collect();
            &positional
        }
    };
    if pairing.len() != cross_count {
        return Err(AggregationError::Pairing(format!(
            "{} entries for {cross_count} cross layers",
            pairing.len()
        )));
    }
    let raw = pairing
        .iter()
        .enumerate()
        .map(|(m, &s)| {
            self_weights.as_slice().get(s).copied().ok_or_else(|| {
                AggregationError::Pairing(format!(
                    "cross layer {m} pairs with self layer {s}, but only {} exist",
                    self_weights.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerWeights::from_raw(raw))
}

/// One layer's head-aggregated map `[H·W × tokens]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMap {
    pub height: usize,
    pub width: usize,
    pub scores: Tensor,
}

/// `A = Σ_m w_m · resize(A_m, target)`; columns are token indices.
pub fn aggregate_layers(maps: &[LayerMap], w: &LayerWeights, target: (usize, usize)) -> Result<GlobalAttentionMap> {
    if maps.is_empty() || maps.len() != w.len() {
        return Err(AggregationError::Shape(format!("{} layer maps, {} weights", maps.len(), w.len())));
    }
    let cols = maps[0].scores.dims2()?.1;
    let mut acc = vec![0f64; target.0 * target.1 * cols];
    for (m, &wm) in maps.iter().zip(w.as_slice()) {
        let (pixels, c) = m.scores.dims2()?;
        if c != cols || pixels != m.height * m.width {
            return Err(AggregationError::Shape(format!(
                "layer map [{pixels} x {c}] on a {}x{} grid, expected {cols} columns",
                m.height, m.width
            )));
        }
        let plan = ResamplePlan::new((m.height, m.width), target)?;
        let input: Vec<f64> = m.scores.data().iter().map(|&v| v as f64).collect();
        let resized = if plan.is_identity() { input } else { plan.gather_rows(&input, cols) };
        for (a, r) in acc.iter_mut().zip(&resized) {
            *a += wm * r;
        }
    }
    Ok(GlobalAttentionMap {
        scores: Tensor::from_f64(vec![target.0 * target.1, cols], &acc)?,
        stage: Stage::Raw,
        columns: (0..cols as u32).collect(),
        height: target.0,
        width: target.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn simplex_normalization() {
        let mut v = vec![-1.0, 3.0, 1.0];
        normalize_simplex(&mut v);
        assert_eq!(v, vec![0.0, 0.75, 0.25]);
        let mut v = vec![-1.0, -2.0];
        normalize_simplex(&mut v);
        assert_eq!(v, vec![0.5, 0.5]);
        let mut v = vec![0.0, f64::NAN, 0.0, 0.0];
        normalize_simplex(&mut v);
        assert_eq!(v, vec![0.25; 4]);
    }

    #[test]
    fn sum_head_outputs_examples() {
        let single = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sum_head_outputs(&single).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let opposite = t(&[2, 1, 2], &[1.5, -2.0, -1.5, 2.0]);
        assert_eq!(sum_head_outputs(&opposite).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn head_weight_examples() {
        let w = head_weights(&t(&[1, 3, 2], &[1.0, 2.0, -3.0, 0.5, 0.0, 0.0]), HeadMetric::Dot).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 1.0, 1.0]);

        let w = head_weights(&t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]), HeadMetric::Dot).unwrap();
        assert_eq!(w.pixel(0), &[0.5, 0.5]);

        // Output = (2, 1); raw weights (2,0)·(2,1) = 4 and (0,1)·(2,1) = 1.
        let w = head_weights(&t(&[2, 1, 2], &[2.0, 0.0, 0.0, 1.0]), HeadMetric::Dot).unwrap();
        assert!((w.pixel(0)[0] - 0.8).abs() < 1e-12);
        assert!((w.pixel(0)[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn head_metric_variants() {
        let h = t(&[2, 1, 2], &[2.0, 0.0, 0.0, 1.0]);
        let l2 = head_weights(&h, HeadMetric::L2).unwrap();
        assert!((l2.pixel(0)[0] - 2.0 / 3.0).abs() < 1e-12);
        let cos = head_weights(&h, HeadMetric::Cosine).unwrap();
        // cos = 2/sqrt5 and 1/sqrt5.
        assert!((cos.pixel(0)[0] - 2.0 / 3.0).abs() < 1e-12);
        // Cancelling heads: Output = 0, every similarity is zero.
        let zero = t(&[2, 1, 2], &[1.0, 1.0, -1.0, -1.0]);
        for metric in [HeadMetric::Dot, HeadMetric::Cosine] {
            assert_eq!(head_weights(&zero, metric).unwrap().pixel(0), &[0.5, 0.5]);
        }
    }

    #[test]
    fn aggregate_heads_examples() {
        let attn = t(&[2, 1, 3], &[0.2, 0.3, 0.5, 0.6, 0.2, 0.2]);
        let first = HeadWeights { pixels: 1, heads: 2, weights: vec![1.0, 0.0] };
        assert_eq!(aggregate_heads(&attn, &first).unwrap().data(), &[0.2, 0.3, 0.5]);
        let same = t(&[2, 1, 2], &[0.25, 0.75, 0.25, 0.75]);
        assert_eq!(aggregate_heads(&same, &HeadWeights::uniform(1, 2)).unwrap().data(), &[0.25, 0.75]);
        assert!(aggregate_heads(&attn, &HeadWeights::uniform(2, 2)).is_err());
    }

    #[test]
    fn aggregate_heads_matches_triple_loop() {
        // 2 heads, 3 pixels, 4 tokens.
        let attn: Vec<f32> = (0..24).map(|v| ((v * 7 % 11) as f32 + 1.0) / 20.0).collect();
        let w = HeadWeights { pixels: 3, heads: 2, weights: vec![0.1, 0.9, 0.5, 0.5, 0.7, 0.3] };
        let got = aggregate_heads(&t(&[2, 3, 4], &attn), &w).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut want = 0.0f64;
                for n in 0..2 {
                    want += w.weights[i * 2 + n] * attn[(n * 3 + i) * 4 + j] as f64;
                }
                assert!((got.data()[i * 4 + j] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pseudo_examples() {
        let same = t(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let p = pseudo_self_attention(&same, (1, 3)).unwrap();
        assert!(p.map.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));

        let p = pseudo_self_attention(&t(&[1, 4], &[0.3, -1.0, 2.0, 0.0]), (1, 1)).unwrap();
        assert_eq!(p.map.data(), &[1.0]);

        // Orthogonal rows with |f|^2 = sqrt(d): logits (1, 0).
        let r = 2f32.powf(0.25);
        let p = pseudo_self_attention(&t(&[2, 2], &[r, 0.0, 0.0, r]), (1, 2)).unwrap();
        let e = std::f64::consts::E;
        assert!((p.map.data()[0] as f64 - e / (e + 1.0)).abs() < 1e-6);
        assert!((p.map.data()[3] as f64 - e / (e + 1.0)).abs() < 1e-6);
        // Norm sqrt(d) gives logits (sqrt(d), 0).
        let s2 = 2f32.sqrt();
        let p = pseudo_self_attention(&t(&[2, 2], &[s2, 0.0, 0.0, s2]), (1, 2)).unwrap();
        let es = std::f64::consts::SQRT_2.exp();
        assert!((p.map.data()[0] as f64 - es / (es + 1.0)).abs() < 1e-6);
    }

    fn self_layer(h: usize, w: usize, map: Vec<f32>) -> SelfLayer {
        SelfLayer { name: "s".into(), height: h, width: w, map: Tensor::new(vec![h * w, h * w], map).unwrap() }
    }

    #[test]
    fn layer_weight_examples() {
        let pseudo = PseudoSelfAttention { height: 1, width: 2, map: t(&[2, 2], &[0.9, 0.1, 0.2, 0.8]) };
        let one = [self_layer(1, 2, vec![0.5; 4])];
        assert_eq!(layer_weights(&one, &pseudo, LayerMetric::Dot, 1e-8).unwrap().as_slice(), &[1.0]);

        let pair = [self_layer(1, 2, vec![0.7, 0.3, 0.4, 0.6]), self_layer(1, 2, vec![0.7, 0.3, 0.4, 0.6])];
        for metric in [LayerMetric::Dot, LayerMetric::Mse, LayerMetric::Iou] {
            assert_eq!(layer_weights(&pair, &pseudo, metric, 1e-8).unwrap().as_slice(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn layer_weights_match_flat_dot_oracle() {
        // 2x2 pixels; layer 1 equals the pseudo map, layer 2 is uniform.
        let p: Vec<f32> = vec![
            0.4, 0.3, 0.2, 0.1, //
            0.1, 0.6, 0.1, 0.2, //
            0.25, 0.25, 0.25, 0.25, //
            0.05, 0.15, 0.3, 0.5,
        ];
        let pseudo = PseudoSelfAttention { height: 2, width: 2, map: t(&[4, 4], &p) };
        let layers = [self_layer(2, 2, p.clone()), self_layer(2, 2, vec![0.25; 16])];
        let w1: f64 = p.iter().map(|&v| v as f64 * v as f64).sum();
        let w2: f64 = p.iter().map(|&v| v as f64 * 0.25).sum();
        let got = layer_weights(&layers, &pseudo, LayerMetric::Dot, 1e-8).unwrap();
        assert!((got.as_slice()[0] - w1 / (w1 + w2)).abs() < 1e-7);
        assert!((got.as_slice()[1] - w2 / (w1 + w2)).abs() < 1e-7);
    }

    #[test]
    fn continuous_iou_and_mse() {
        let plan = ResamplePlan::new((1, 2), (1, 2)).unwrap();
        let pseudo = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        let peaked = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let sim = |metric, layer: &Tensor| similarity(metric, &pseudo, layer, &plan, 1e-8);
        assert!((sim(LayerMetric::Iou, &peaked) - 1.0 / 3.0).abs() < 1e-12);
        assert!((sim(LayerMetric::Mse, &peaked) - 1.0 / (0.25 + 1e-8)).abs() < 1e-6);
        assert!((sim(LayerMetric::Mse, &pseudo) - 1e8).abs() < 1e-3);
    }

    #[test]
    fn pairing_rules() {
        let sw = LayerWeights(vec![0.2, 0.8]);
        assert_eq!(cross_layer_weights(&sw, 2, None).unwrap().as_slice(), &[0.2, 0.8]);
        let w = cross_layer_weights(&sw, 3, Some(&[1, 1, 0])).unwrap();
        assert!((w.as_slice()[0] - 0.8 / 1.8).abs() < 1e-12);
        assert!(cross_layer_weights(&sw, 3, None).is_err());
        assert!(cross_layer_weights(&sw, 1, Some(&[4])).is_err());
    }

    #[test]
    fn aggregate_layer_examples() {
        let a = LayerMap { height: 1, width: 2, scores: t(&[2, 2], &[0.1, 0.9, 0.3, 0.7]) };
        let b = LayerMap { height: 2, width: 2, scores: t(&[4, 2], &[0.5; 8]) };
        let g = aggregate_layers(&[a.clone(), b.clone()], &LayerWeights(vec![1.0, 0.0]), (2, 2)).unwrap();
        let resized = tensor::resize_pixel_major(&a.scores, (1, 2), (2, 2)).unwrap();
        assert_eq!(g.scores, resized);
        assert_eq!(g.stage, Stage::Raw);

        let g = aggregate_layers(&[b.clone(), b.clone()], &LayerWeights(vec![0.3, 0.7]), (2, 2)).unwrap();
        assert!(g.scores.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(aggregate_layers(&[a], &LayerWeights(vec![0.5, 0.5]), (2, 2)).is_err());
    }
}
