//! Deterministic synthetic bundles.
//!
//! [`generate_fixture`] plants a region partition and builds genuine
//! multi-head attention layers whose content-token logits favour each
//! region's class, together with self-attention maps and a dense feature
//! that are block-diagonal on the regions. The planted partition is the
//! ground truth. [`random_bundle`] produces unstructured valid bundles for
//! equivalence sweeps.
//!
//! All randomness comes from [`SplitMix64`]; the draw order is documented in
//! `docs/FIXTURES.md` so other implementations can reproduce the bytes.

use thiserror::Error;

use crate::bundle::{
    ActivationBundle, BundleError, ClassEntry, CrossLayer, DenseFeature, SelfLayer, TokenCategory, TokenEntry,
};
use crate::mask::{MaskError, SegmentationMask};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T> = std::result::Result<T, FixtureError>;

/// SplitMix64 (Steele, Lea & Flood 2014).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// `next_u64() % n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

const CLASS_NAMES: [&str; 12] = [
    "potted plant", "cat", "grass", "dog", "sky", "tree", "road", "person", "car", "wall", "horse", "boat",
];
const STOP_WORDS: [&str; 5] = ["a", "photo", "of", ",", "and"];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    pub grid: (usize, usize),
    pub layers: usize,
    pub heads: usize,
    /// Value channels per head; the layer output has `heads · head_dim`.
    pub head_dim: usize,
    pub tokens: usize,
    pub classes: usize,
    /// The last `background_classes` classes are flagged background.
    pub background_classes: usize,
    /// Half-width of the uniform noise added to content-token logits.
    pub noise_amplitude: f64,
    /// Logit advantage of the planted class's tokens.
    pub margin: f64,
    /// Image size is `grid · image_scale`.
    pub image_scale: usize,
    /// Region index (`< classes`) per grid pixel; Voronoi from the seed
    /// when absent.
    pub planted: Option<Vec<usize>>,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: (8, 8),
            layers: 2,
            heads: 4,
            head_dim: 8,
            tokens: 8,
            classes: 3,
            background_classes: 1,
            noise_amplitude: 0.5,
            margin: 8.0,
            image_scale: 8,
            planted: None,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FixtureError::InvalidSpec(m));
        let pixels = self.grid.0 * self.grid.1;
        if pixels == 0 || self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.image_scale == 0 {
            return bad("grid, layers, heads, head_dim and image_scale must be positive".into());
        }
        if self.classes == 0 || self.classes > CLASS_NAMES.len() {
            return bad(format!("classes must be in 1..={}", CLASS_NAMES.len()));
        }
        if self.background_classes >= self.classes {
            return bad("at least one class must be foreground".into());
        }
        if self.tokens < self.classes + 1 {
            return bad(format!("{} tokens cannot hold a special token and {} classes", self.tokens, self.classes));
        }
        if pixels < self.classes {
            return bad(format!("{pixels} pixels cannot hold {} regions", self.classes));
        }
        if !(self.noise_amplitude >= 0.0) || !(self.margin > 3.0 * self.noise_amplitude) {
            return bad(format!(
                "margin {} must exceed 3 × noise amplitude {}",
                self.margin, self.noise_amplitude
            ));
        }
        if let Some(p) = &self.planted {
            if p.len() != pixels || p.iter().any(|&r| r >= self.classes) {
                return bad("planted layout must give a region below `classes` for every pixel".into());
            }
            for r in 0..self.classes {
                if !p.contains(&r) {
                    return bad(format!("planted region {r} is empty"));
                }
            }
        }
        Ok(())
    }
}

/// The recomposition check for one generated layer.
#[derive(Debug, Clone)]
pub struct Recomposition {
    pub layer: usize,
    /// `Concat(A_1 V_1, …, A_h V_h) · W^O`, `[pixels × heads·head_dim]`.
    pub concat_output: Tensor,
    /// `‖concat − Σ_n A_n V_n W_n^O‖ / ‖concat‖`, both in `f64`.
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub bundle: ActivationBundle,
    /// Planted labels at image resolution; background-flagged regions are 0.
    pub ground_truth: SegmentationMask,
    /// Region index per grid pixel.
    pub regions: Vec<usize>,
    pub recomposition: Vec<Recomposition>,
}

fn voronoi(rng: &mut SplitMix64, grid: (usize, usize), regions: usize) -> Vec<usize> {
    let pixels = grid.0 * grid.1;
    let mut centers: Vec<usize> = Vec::with_capacity(regions);
    while centers.len() < regions {
        let p = rng.below(pixels);
        if !centers.contains(&p) {
            centers.push(p);
        }
    }
    (0..pixels)
        .map(|p| {
            let (y, x) = ((p / grid.1) as i64, (p % grid.1) as i64);
            let dist = |c: usize| {
                let (cy, cx) = ((c / grid.1) as i64, (c % grid.1) as i64);
                (y - cy).pow(2) + (x - cx).pow(2)
            };
            (0..regions).min_by_key(|&r| (dist(centers[r]), r)).expect("at least one region")
        })
        .collect()
}

fn token_table(spec: &FixtureSpec) -> Vec<TokenEntry> {
    let mut tokens = vec![TokenEntry { index: 0, text: "<sos>".into(), category: TokenCategory::Special, class_id: None }];
    let split_first = spec.tokens >= spec.classes + 2;
    for c in 0..spec.classes {
        let name = CLASS_NAMES[c];
        let words: Vec<&str> = if c == 0 && split_first { name.split(' ').collect() } else { vec![name] };
        for w in words {
            tokens.push(TokenEntry {
                index: tokens.len(),
                text: w.to_string(),
                category: TokenCategory::Content,
                class_id: Some(c as u32 + 1),
            });
        }
    }
    let mut s = 0;
    while tokens.len() < spec.tokens {
        let text = STOP_WORDS.get(s).copied().unwrap_or("<pad>");
        tokens.push(TokenEntry { index: tokens.len(), text: text.into(), category: TokenCategory::Stop, class_id: None });
        s += 1;
    }
    tokens
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn frobenius(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// One cross layer built from explicit per-head `Q`, `K`, `V` and a `W^O`
/// split into per-head row blocks.
fn planted_cross_layer(
    rng: &mut SplitMix64,
    spec: &FixtureSpec,
    m: usize,
    tokens: &[TokenEntry],
    regions: &[usize],
) -> Result<(CrossLayer, Recomposition)> {
    let (pixels, n, h, dv) = (regions.len(), tokens.len(), spec.heads, spec.head_dim);
    let d_model = h * dv;
    let a = spec.noise_amplitude;
    let mut attn = vec![0f64; h * pixels * n];
    let mut weighted_values = vec![0f64; h * pixels * dv];
    for head in 0..h {
        // Queries carry the planted logits; keys are sqrt(n)·I so that
        // Q·Kᵀ/sqrt(n) reproduces them.
        let mut q = vec![0f64; pixels * n];
        for i in 0..pixels {
            for (j, t) in tokens.iter().enumerate() {
                q[i * n + j] = match (t.category, t.class_id) {
                    (TokenCategory::Special, _) => spec.margin + 2.0 + rng.uniform(0.0, 4.0),
                    (TokenCategory::Content, Some(id)) if id as usize == regions[i] + 1 => {
                        spec.margin + rng.uniform(-a, a)
                    }
                    (TokenCategory::Content, _) => rng.uniform(-a, a),
                    (TokenCategory::Stop, _) => rng.uniform(0.0, 2.0),
                };
            }
        }
        let key_scale = (n as f64).sqrt();
        let v: Vec<f64> = (0..n * dv).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for i in 0..pixels {
            let row = &mut attn[(head * pixels + i) * n..(head * pixels + i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                // Row j of K is key_scale · e_j.
                *r = q[i * n + j] * key_scale / key_scale;
            }
            softmax_in_place(row);
            let out = &mut weighted_values[(head * pixels + i) * dv..(head * pixels + i + 1) * dv];
            for (j, &p) in row.iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                    *o += p * vv;
                }
            }
        }
    }
    let w_scale = 1.0 / (d_model as f64).sqrt();
    let w_o: Vec<f64> = (0..d_model * d_model).map(|_| rng.uniform(-w_scale, w_scale)).collect();

    // Per-head summands A_n V_n W_n^O, W_n^O = rows [n·dv, (n+1)·dv) of W^O.
    let mut head_out = vec![0f64; h * pixels * d_model];
    for head in 0..h {
        for i in 0..pixels {
            let av = &weighted_values[(head * pixels + i) * dv..(head * pixels + i + 1) * dv];
            let out = &mut head_out[(head * pixels + i) * d_model..(head * pixels + i + 1) * d_model];
            for (r, &x) in av.iter().enumerate() {
                let w_row = &w_o[(head * dv + r) * d_model..(head * dv + r + 1) * d_model];
                for (o, &w) in out.iter_mut().zip(w_row) {
                    *o += x * w;
                }
            }
        }
    }
    // Concat(A_1 V_1, …, A_h V_h) · W^O.
    let mut concat = vec![0f64; pixels * d_model];
    for i in 0..pixels {
        let cat: Vec<f64> = (0..h)
            .flat_map(|head| weighted_values[(head * pixels + i) * dv..(head * pixels + i + 1) * dv].iter().copied())
            .collect();
        let out = &mut concat[i * d_model..(i + 1) * d_model];
        for (r, &x) in cat.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&w_o[r * d_model..(r + 1) * d_model]) {
                *o += x * w;
            }
        }
    }
    let diff = (0..pixels * d_model).map(|k| {
        let summed: f64 = (0..h).map(|head| head_out[head * pixels * d_model + k]).sum();
        concat[k] - summed
    });
    let relative_error = frobenius(diff) / frobenius(concat.iter().copied()).max(f64::MIN_POSITIVE);
    if relative_error > 1e-5 {
        return Err(FixtureError::InvalidSpec(format!(
            "layer {m}: concat and summed head outputs differ by {relative_error:e}"
        )));
    }
    let (gh, gw) = spec.grid;
    let layer = CrossLayer {
        name: format!("cross_{m}"),
        height: gh,
        width: gw,
        attn: Tensor::from_f64(vec![h, pixels, n], &attn)?,
        head_out: Tensor::from_f64(vec![h, pixels, d_model], &head_out)?,
    };
    let recomposition =
        Recomposition { layer: m, concat_output: Tensor::from_f64(vec![pixels, d_model], &concat)?, relative_error };
    Ok((layer, recomposition))
}

/// Self-attention mixing a uniform in-region average with a small uniform
/// floor: `(1 − ε)·[same region]/|region| + ε/pixels`.
fn planted_self_layer(rng: &mut SplitMix64, spec: &FixtureSpec, m: usize, regions: &[usize]) -> Result<SelfLayer> {
    let pixels = regions.len();
    let eps = rng.uniform(0.02, 0.2);
    let mut sizes = vec![0usize; spec.classes];
    regions.iter().for_each(|&r| sizes[r] += 1);
    let mut map = vec![0f64; pixels * pixels];
    for i in 0..pixels {
        for j in 0..pixels {
            let block = if regions[i] == regions[j] { (1.0 - eps) / sizes[regions[i]] as f64 } else { 0.0 };
            map[i * pixels + j] = block + eps / pixels as f64;
        }
    }
    Ok(SelfLayer {
        name: format!("self_{m}"),
        height: spec.grid.0,
        width: spec.grid.1,
        map: Tensor::from_f64(vec![pixels, pixels], &map)?,
    })
}

pub fn generate_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let regions = match &spec.planted {
        Some(p) => p.clone(),
        None => voronoi(&mut rng, spec.grid, spec.classes),
    };
    let classes: Vec<ClassEntry> = (0..spec.classes)
        .map(|c| ClassEntry {
            class_id: c as u32 + 1,
            name: CLASS_NAMES[c].to_string(),
            is_background: c >= spec.classes - spec.background_classes,
        })
        .collect();
    let tokens = token_table(spec);

    let mut cross_layers = Vec::with_capacity(spec.layers);
    let mut self_layers = Vec::with_capacity(spec.layers);
    let mut recomposition = Vec::with_capacity(spec.layers);
    for m in 0..spec.layers {
        let (layer, check) = planted_cross_layer(&mut rng, spec, m, &tokens, &regions)?;
        cross_layers.push(layer);
        recomposition.push(check);
        self_layers.push(planted_self_layer(&mut rng, spec, m, &regions)?);
    }

    // One-hot region embedding scaled so in-region logits are 10 after the
    // 1/sqrt(d) temperature, plus small noise.
    let d_f = spec.classes + 2;
    let alpha = (10.0 * (d_f as f64).sqrt()).sqrt();
    let mut feat = vec![0f64; regions.len() * d_f];
    for (i, &r) in regions.iter().enumerate() {
        for c in 0..d_f {
            feat[i * d_f + c] = if c == r { alpha } else { 0.0 } + rng.uniform(-0.05, 0.05);
        }
    }
    let (gh, gw) = spec.grid;
    let dense_feature = DenseFeature {
        name: "dense".into(),
        height: gh,
        width: gw,
        tensor: Tensor::from_f64(vec![regions.len(), d_f], &feat)?,
    };
    let image_size = (gh * spec.image_scale, gw * spec.image_scale);
    let bundle = ActivationBundle {
        model_id: "synthetic-planted".into(),
        timestep: 100,
        image_size,
        tokens,
        classes: classes.clone(),
        cross_layers,
        self_layers,
        dense_feature,
    };
    bundle.validate()?;
    let labels = regions
        .iter()
        .map(|&r| if classes[r].is_background { 0 } else { classes[r].class_id })
        .collect();
    let ground_truth = SegmentationMask::new(gh, gw, labels)?.resize_nearest(image_size.0, image_size.1)?;
    Ok(Fixture { bundle, ground_truth, regions, recomposition })
}

/// Unstructured random bundle parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomBundleSpec {
    pub seed: u64,
    pub min_grid: usize,
    pub max_grid: usize,
    pub max_layers: usize,
    pub max_heads: usize,
    /// Build head summands whose similarities cancel or go negative.
    pub adversarial_heads: bool,
}

impl RandomBundleSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed, min_grid: 4, max_grid: 8, max_layers: 3, max_heads: 4, adversarial_heads: false }
    }
}

fn random_rows(rng: &mut SplitMix64, rows: usize, cols: usize, spread: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..cols).map(|_| rng.uniform(-spread, spread)).collect();
        softmax_in_place(&mut row);
        out.extend(row);
    }
    out
}

fn maybe_halved(rng: &mut SplitMix64, grid: (usize, usize)) -> (usize, usize) {
    if rng.below(2) == 0 {
        grid
    } else {
        (grid.0.div_ceil(2), grid.1.div_ceil(2))
    }
}

/// Random valid bundle: mixed layer resolutions, random token categories,
/// softmax attention and self-attention, arbitrary image size.
pub fn random_bundle(spec: &RandomBundleSpec) -> Result<ActivationBundle> {
    if spec.min_grid == 0 || spec.max_grid < spec.min_grid || spec.max_layers == 0 || spec.max_heads == 0 {
        return Err(FixtureError::InvalidSpec(format!("{spec:?}")));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let span = spec.max_grid - spec.min_grid + 1;
    let grid = (spec.min_grid + rng.below(span), spec.min_grid + rng.below(span));
    let k = 1 + rng.below(spec.max_layers);

    let class_count = 1 + rng.below(3);
    let classes: Vec<ClassEntry> = (0..class_count)
        .map(|c| ClassEntry {
            class_id: c as u32 + 1,
            name: CLASS_NAMES[c + 1].to_string(),
            is_background: rng.below(3) == 0,
        })
        .collect();
    let n = 3 + rng.below(6);
    let tokens: Vec<TokenEntry> = (0..n)
        .map(|j| {
            let roll = rng.below(3);
            let (category, class_id) = match (j, roll) {
                (0, _) => (TokenCategory::Special, None),
                (1, _) | (_, 0) | (_, 1) => (TokenCategory::Content, Some(1 + rng.below(class_count) as u32)),
                _ => (TokenCategory::Stop, None),
            };
            TokenEntry { index: j, text: format!("tok{j}"), category, class_id }
        })
        .collect();

    let mut cross_layers = Vec::with_capacity(k);
    for m in 0..k {
        let (h, w) = maybe_halved(&mut rng, grid);
        let heads = 1 + rng.below(spec.max_heads);
        let d = 2 + rng.below(5);
        let pixels = h * w;
        let attn = random_rows(&mut rng, heads * pixels, n, 3.0);
        let mut head_out: Vec<f64> = (0..heads * pixels * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        if spec.adversarial_heads && heads > 1 {
            for i in 0..pixels {
                let mode = rng.below(3);
                let at = |head: usize, c: usize| (head * pixels + i) * d + c;
                for c in 0..d {
                    let base = head_out[at(0, c)];
                    match mode {
                        // Pairs cancel exactly: the layer output is zero.
                        0 => {
                            for head in 1..heads {
                                head_out[at(head, c)] = if head % 2 == 1 { -head_out[at(head - 1, c)] } else { head_out[at(head, c)] };
                            }
                            if heads % 2 == 1 {
                                head_out[at(heads - 1, c)] = 0.0;
                            }
                        }
                        // Head 1 opposes head 0 at half strength: negative similarity.
                        1 => head_out[at(1, c)] = -0.5 * base,
                        _ => {}
                    }
                }
            }
        }
        cross_layers.push(CrossLayer {
            name: format!("cross_{m}"),
            height: h,
            width: w,
            attn: Tensor::from_f64(vec![heads, pixels, n], &attn)?,
            head_out: Tensor::from_f64(vec![heads, pixels, d], &head_out)?,
        });
    }
    let mut self_layers = Vec::with_capacity(k);
    for m in 0..k {
        let (h, w) = maybe_halved(&mut rng, grid);
        let map = random_rows(&mut rng, h * w, h * w, 2.0);
        self_layers.push(SelfLayer {
            name: format!("self_{m}"),
            height: h,
            width: w,
            map: Tensor::from_f64(vec![h * w, h * w], &map)?,
        });
    }
    let (fh, fw) = maybe_halved(&mut rng, grid);
    let channels = 1 + rng.below(6);
    let feat: Vec<f64> = (0..fh * fw * channels).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let image_size = (grid.0 * (1 + rng.below(3)) + rng.below(3), grid.1 * (1 + rng.below(3)) + rng.below(3));
    let bundle = ActivationBundle {
        model_id: "synthetic-random".into(),
        timestep: 100,
        image_size,
        tokens,
        classes,
        cross_layers,
        self_layers,
        dense_feature: DenseFeature {
            name: "dense".into(),
            height: fh,
            width: fw,
            tensor: Tensor::from_f64(vec![fh * fw, channels], &feat)?,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}
