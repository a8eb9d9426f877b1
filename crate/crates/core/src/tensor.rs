//! Dense row-major `f32` tensors and the numeric kernels shared by the
//! aggregation and correlation stages.
//!
//! Storage is 32-bit to match activation dumps; every reduction accumulates
//! in 64-bit. Bilinear resampling follows the `align_corners = false`
//! convention: output sample `o` of an axis of length `out` reads the source
//! coordinate `max(0, (o + 0.5) * in / out - 0.5)`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Immutable dense tensor with positive dimensions and finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::InvalidShape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from `f64` values, rounding each to `f32`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::InvalidShape(format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            s => Err(TensorError::InvalidShape(format!("expected rank 3, got {s:?}"))),
        }
    }

    /// Row `i` of a rank-2 tensor. Panics when out of range.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("non-empty shape");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Numerically stable row softmax of `scale * m`.
pub fn softmax_rows(m: &Tensor, scale: f64) -> Result<Tensor> {
    let (rows, cols) = m.dims2()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(TensorError::InvalidShape(format!("softmax scale must be positive, got {scale}")));
    }
    let mut out = Vec::with_capacity(rows * cols);
    let mut buf = vec![0f64; cols];
    for r in 0..rows {
        let row = m.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let mut sum = 0.0;
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = ((v as f64 - max) * scale).exp();
            sum += *b;
        }
        out.extend(buf.iter().map(|&b| (b / sum) as f32));
    }
    Tensor::new(vec![rows, cols], out)
}

/// `Σ a_i·b_i` over the flattened tensors, accumulated in `f64`.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TensorError::InvalidShape(format!(
            "dot of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_slices(a.data(), b.data()))
}

pub(crate) fn dot_slices(a: &[f32], b: &[f32]) -> f64 {
    dot_f64(a, b)
}

/// `Σ a_i·b_i` in `f64` over equal-length slices, with eight independent
/// partial sums so the loop vectorizes.
pub(crate) fn dot_f64<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot of unequal lengths");
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports every feature `dot_avx2` is compiled for.
        return unsafe { dot_avx2(a, b) };
    }
    dot_lanes(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    dot_lanes(a, b)
}

#[inline(always)]
fn dot_lanes<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    let mut acc = [0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x.into() * y.into()).sum();
    for (x, y) in ca.zip(cb) {
        let x: &[A; 8] = x.try_into().expect("chunk of 8");
        let y: &[B; 8] = y.try_into().expect("chunk of 8");
        for k in 0..8 {
            acc[k] += x[k].into() * y[k].into();
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Source taps along one axis: `(lo, hi, frac)` per output sample.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Precomputed bilinear sampling weights from one 2-D grid to another.
///
/// Each target pixel reads four source pixels (duplicates allowed at the
/// border) with weights summing to one.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    src: (usize, usize),
    dst: (usize, usize),
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
    taps: Vec<[(usize, f64); 4]>,
}

impl ResamplePlan {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
            return Err(TensorError::InvalidShape(format!(
                "resample {src:?} -> {dst:?} has a zero dimension"
            )));
        }
        let ys = axis_taps(src.0, dst.0);
        let xs = axis_taps(src.1, dst.1);
        let w = src.1;
        let mut taps = Vec::with_capacity(dst.0 * dst.1);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                taps.push([
                    (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * w + x1, (1.0 - fy) * fx),
                    (y1 * w + x0, fy * (1.0 - fx)),
                    (y1 * w + x1, fy * fx),
                ]);
            }
        }
        Ok(Self { src, dst, ys, xs, taps })
    }

    pub fn src(&self) -> (usize, usize) {
        self.src
    }

    pub fn dst(&self) -> (usize, usize) {
        self.dst
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn taps(&self) -> &[[(usize, f64); 4]] {
        &self.taps
    }

    /// Resamples a pixel-major `[src_pixels × cols]` buffer into
    /// `[dst_pixels × cols]`.
    pub fn gather_rows(&self, input: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0f64; self.taps.len() * cols];
        for (t, taps) in self.taps.iter().enumerate() {
            let o = &mut out[t * cols..(t + 1) * cols];
            for &(s, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for (dst, &v) in o.iter_mut().zip(&input[s * cols..(s + 1) * cols]) {
                    *dst += w * v;
                }
            }
        }
        out
    }

    /// Resamples one row indexed by source pixels into `out`, indexed by
    /// target pixels, one axis at a time. `tmp` holds `src.0 × dst.1`.
    fn resample_row<T: Copy + Into<f64>>(&self, row: &[T], tmp: &mut [f64], out: &mut [f64]) {
        let (sw, dw) = (self.src.1, self.dst.1);
        for sy in 0..self.src.0 {
            let r = &row[sy * sw..(sy + 1) * sw];
            for (t, &(x0, x1, fx)) in tmp[sy * dw..(sy + 1) * dw].iter_mut().zip(&self.xs) {
                *t = (1.0 - fx) * r[x0].into() + fx * r[x1].into();
            }
        }
        for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
            let (a, b) = (&tmp[y0 * dw..(y0 + 1) * dw], &tmp[y1 * dw..(y1 + 1) * dw]);
            for (o, (&p, &q)) in out[oy * dw..(oy + 1) * dw].iter_mut().zip(a.iter().zip(b)) {
                *o = (1.0 - fy) * p + fy * q;
            }
        }
    }

    /// Transpose of [`gather_rows`](Self::gather_rows): spreads a
    /// `[dst_pixels × cols]` buffer back onto `[src_pixels × cols]`.
    pub fn scatter_rows(&self, input: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0f64; self.src.0 * self.src.1 * cols];
        for (t, taps) in self.taps.iter().enumerate() {
            let row = &input[t * cols..(t + 1) * cols];
            for &(s, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for (dst, &v) in out[s * cols..(s + 1) * cols].iter_mut().zip(row) {
                    *dst += w * v;
                }
            }
        }
        out
    }
}

/// Bilinear resize of a `[H, W]` map or a `[C, H, W]` stack of maps.
pub fn resize_bilinear(m: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (channels, h, w) = match m.shape() {
        &[h, w] => (1, h, w),
        &[c, h, w] => (c, h, w),
        s => {
            return Err(TensorError::InvalidShape(format!(
                "resize_bilinear expects rank 2 or 3, got {s:?}"
            )))
        }
    };
    let plan = ResamplePlan::new((h, w), target)?;
    if plan.is_identity() {
        return Ok(m.clone());
    }
    let mut out = Vec::with_capacity(channels * target.0 * target.1);
    for c in 0..channels {
        let plane = &m.data()[c * h * w..(c + 1) * h * w];
        out.extend(plan.taps().iter().map(|taps| {
            taps.iter().map(|&(s, wt)| wt * plane[s] as f64).sum::<f64>() as f32
        }));
    }
    let shape = if m.shape().len() == 2 {
        vec![target.0, target.1]
    } else {
        vec![channels, target.0, target.1]
    };
    Tensor::new(shape, out)
}

/// Bilinear resize of a pixel-major `[H·W × C]` matrix (one column per
/// channel) to `[H'·W' × C]`.
pub fn resize_pixel_major(m: &Tensor, src: (usize, usize), target: (usize, usize)) -> Result<Tensor> {
    let (pixels, cols) = m.dims2()?;
    if pixels != src.0 * src.1 {
        return Err(TensorError::InvalidShape(format!(
            "{pixels} rows do not match a {}x{} grid",
            src.0, src.1
        )));
    }
    let plan = ResamplePlan::new(src, target)?;
    if plan.is_identity() {
        return Ok(m.clone());
    }
    let input: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    Tensor::from_f64(vec![target.0 * target.1, cols], &plan.gather_rows(&input, cols))
}

/// Divides each row by its sum; an all-zero row becomes uniform.
pub(crate) fn normalize_rows_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        } else {
            row.fill(1.0 / cols as f64);
        }
    }
}

/// Calls `f(i, row)` for every row `i` of `R · S · Rᵀ` on the target grid,
/// each re-normalized to sum to one (an all-zero row becomes uniform).
/// Rows are produced one at a time: query side first, then the key side
/// axis by axis.
pub(crate) fn for_each_pairwise_row(s: &Tensor, plan: &ResamplePlan, mut f: impl FnMut(usize, &[f64])) {
    let src_pixels = plan.src.0 * plan.src.1;
    let dst_pixels = plan.dst.0 * plan.dst.1;
    let mut query = vec![0f64; src_pixels];
    let mut tmp = vec![0f64; plan.src.0 * plan.dst.1];
    let mut out = vec![0f64; dst_pixels];
    for (i, taps) in plan.taps().iter().enumerate() {
        if plan.is_identity() {
            out.iter_mut().zip(s.row(i)).for_each(|(o, &v)| *o = v as f64);
        } else {
            query.fill(0.0);
            for &(b, w) in taps {
                if w != 0.0 {
                    query.iter_mut().zip(s.row(b)).for_each(|(o, &v)| *o += w * v as f64);
                }
            }
            plan.resample_row(&query, &mut tmp, &mut out);
        }
        normalize_rows_in_place(&mut out, dst_pixels);
        f(i, &out);
    }
}

pub(crate) fn resize_pairwise_f64(s: &Tensor, plan: &ResamplePlan) -> Vec<f64> {
    let dst_pixels = plan.dst.0 * plan.dst.1;
    let mut all = Vec::with_capacity(dst_pixels * dst_pixels);
    for_each_pairwise_row(s, plan, |_, row| all.extend_from_slice(row));
    all
}

/// Resizes a `[(H·W) × (H·W)]` pixel-pair map (e.g. self-attention) to
/// `[(H'·W') × (H'·W')]`: bilinear along both the query and key grids,
/// then rows re-normalized to sum to one.
pub fn resize_pairwise(s: &Tensor, src: (usize, usize), target: (usize, usize)) -> Result<Tensor> {
    let (rows, cols) = s.dims2()?;
    if rows != cols {
        return Err(TensorError::InvalidShape(format!("pairwise map must be square, got {rows}x{cols}")));
    }
    if rows != src.0 * src.1 {
        return Err(TensorError::InvalidShape(format!(
            "pairwise map side {rows} does not match a {}x{} grid",
            src.0, src.1
        )));
    }
    let plan = ResamplePlan::new(src, target)?;
    let side = target.0 * target.1;
    Tensor::from_f64(vec![side, side], &resize_pairwise_f64(s, &plan))
}
