//! Dense linear-algebra and selection kernels.
//!
//! Every dot product accumulates in `f32` left to right over the reduction
//! index. Masked kernels run the exact same per-row loop as their dense
//! counterparts, so a masked result is bit-identical to the matching rows of
//! the dense one.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use crate::error::{Error, Result};

/// Work (rows × cols) below which kernels stay on the calling thread.
const PARALLEL_MIN_WORK: usize = 1 << 18;

static MAX_THREADS: AtomicUsize = AtomicUsize::new(0);

/// Upper bound on kernel threads. Read once from `COREINFER_THREADS`,
/// defaulting to the host's available parallelism.
pub fn max_threads() -> usize {
    let cached = MAX_THREADS.load(Ordering::Relaxed);
    if cached != 0 {
        return cached;
    }
    let resolved = std::env::var("COREINFER_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    MAX_THREADS.store(resolved, Ordering::Relaxed);
    resolved
}

/// Overrides the kernel thread cap for the rest of the process.
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n.max(1), Ordering::Relaxed);
}

fn threads_for(work: usize, units: usize) -> usize {
    if work < PARALLEL_MIN_WORK {
        1
    } else {
        max_threads().min(units).max(1)
    }
}

/// Counts scalar multiplies executed by instrumented kernels.
#[derive(Debug, Default)]
pub struct OpCounter {
    muls: AtomicU64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&self, n: u64) {
        self.muls.fetch_add(n, Ordering::Relaxed);
    }

    pub fn muls(&self) -> u64 {
        self.muls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.muls.store(0, Ordering::Relaxed);
    }
}

/// Row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values ({rows}x{cols})", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

/// Values for a subset of output rows, keyed by row index.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseVector {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, index: u32) -> Option<f32> {
        self.indices
            .binary_search(&index)
            .ok()
            .map(|pos| self.values[pos])
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn check_finite(values: &[f32], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `out[r] = Σ_c m[r,c]·v[c]`.
pub fn matvec(m: &Matrix, v: &[f32]) -> Result<Vec<f32>> {
    if m.cols != v.len() {
        return Err(Error::shape(
            "matvec",
            format!("vector of length {} for {}x{} matrix", m.cols, m.rows, m.cols),
            format!("length {}", v.len()),
        ));
    }
    let mut out = vec![0.0; m.rows];
    matvec_into(m, v, &mut out, None);
    Ok(out)
}

/// Dense matvec without shape checks; callers guarantee the shapes.
pub(crate) fn matvec_into(m: &Matrix, v: &[f32], out: &mut [f32], counter: Option<&OpCounter>) {
    debug_assert_eq!(m.cols, v.len());
    debug_assert_eq!(m.rows, out.len());
    let threads = threads_for(m.rows * m.cols, m.rows);
    if threads <= 1 {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(m.row(r), v);
        }
    } else {
        let chunk = m.rows.div_ceil(threads);
        std::thread::scope(|s| {
            for (ci, slab) in out.chunks_mut(chunk).enumerate() {
                s.spawn(move || {
                    let base = ci * chunk;
                    for (i, o) in slab.iter_mut().enumerate() {
                        *o = dot(m.row(base + i), v);
                    }
                });
            }
        });
    }
    if let Some(c) = counter {
        c.add((m.rows * m.cols) as u64);
    }
}

/// Computes only the rows listed in `rowmask` (which must be sorted and unique
/// for the result to be keyed in ascending order).
pub fn masked_matvec(m: &Matrix, v: &[f32], rowmask: &[u32]) -> Result<SparseVector> {
    if m.cols != v.len() {
        return Err(Error::shape(
            "masked_matvec",
            format!("vector of length {}", m.cols),
            format!("length {}", v.len()),
        ));
    }
    if let Some(&bad) = rowmask.iter().find(|&&r| r as usize >= m.rows) {
        return Err(Error::IndexOutOfRange {
            what: "matrix rows",
            index: bad as usize,
            bound: m.rows,
        });
    }
    let mut values = vec![0.0; rowmask.len()];
    masked_matvec_into(m, v, rowmask, &mut values, None);
    Ok(SparseVector {
        indices: rowmask.to_vec(),
        values,
    })
}

pub(crate) fn masked_matvec_into(
    m: &Matrix,
    v: &[f32],
    rowmask: &[u32],
    out: &mut [f32],
    counter: Option<&OpCounter>,
) {
    debug_assert_eq!(rowmask.len(), out.len());
    let threads = threads_for(rowmask.len() * m.cols, rowmask.len());
    if threads <= 1 {
        for (o, &r) in out.iter_mut().zip(rowmask) {
            *o = dot(m.row(r as usize), v);
        }
    } else {
        let chunk = rowmask.len().div_ceil(threads);
        std::thread::scope(|s| {
            for (slab, rows) in out.chunks_mut(chunk).zip(rowmask.chunks(chunk)) {
                s.spawn(move || {
                    for (o, &r) in slab.iter_mut().zip(rows) {
                        *o = dot(m.row(r as usize), v);
                    }
                });
            }
        });
    }
    if let Some(c) = counter {
        c.add((rowmask.len() * m.cols) as u64);
    }
}

/// `out[c] = Σ_{j} weights[j]·m[rows[j], c]`, accumulated in the order of
/// `rows`. With `rows = None` every row participates in ascending order.
///
/// This is the transposed product used for the FFN down projection, whose
/// weights are stored one neuron per row.
pub(crate) fn weighted_row_sum_into(
    m: &Matrix,
    weights: &[f32],
    rows: Option<&[u32]>,
    out: &mut [f32],
    counter: Option<&OpCounter>,
) {
    debug_assert_eq!(out.len(), m.cols);
    let n_rows = rows.map_or(m.rows, <[u32]>::len);
    debug_assert_eq!(weights.len(), n_rows);
    let threads = threads_for(n_rows * m.cols, m.cols / 64);
    let accumulate = |col_start: usize, slab: &mut [f32]| {
        slab.fill(0.0);
        let width = slab.len();
        for j in 0..n_rows {
            let r = rows.map_or(j, |rs| rs[j] as usize);
            let w = weights[j];
            let src = &m.data[r * m.cols + col_start..r * m.cols + col_start + width];
            for (o, x) in slab.iter_mut().zip(src) {
                *o += w * x;
            }
        }
    };
    if threads <= 1 {
        accumulate(0, out);
    } else {
        let chunk = m.cols.div_ceil(threads);
        std::thread::scope(|s| {
            for (ci, slab) in out.chunks_mut(chunk).enumerate() {
                let acc = &accumulate;
                s.spawn(move || acc(ci * chunk, slab));
            }
        });
    }
    if let Some(c) = counter {
        c.add((n_rows * m.cols) as u64);
    }
}

/// Checked front end for [`weighted_row_sum_into`].
pub fn weighted_row_sum(m: &Matrix, weights: &[f32], rows: Option<&[u32]>) -> Result<Vec<f32>> {
    let n_rows = rows.map_or(m.rows, <[u32]>::len);
    if weights.len() != n_rows {
        return Err(Error::shape(
            "weighted_row_sum",
            format!("{n_rows} weights"),
            format!("{} weights", weights.len()),
        ));
    }
    if let Some(rs) = rows {
        if let Some(&bad) = rs.iter().find(|&&r| r as usize >= m.rows) {
            return Err(Error::IndexOutOfRange {
                what: "matrix rows",
                index: bad as usize,
                bound: m.rows,
            });
        }
    }
    let mut out = vec![0.0; m.cols];
    weighted_row_sum_into(m, weights, rows, &mut out, None);
    Ok(out)
}

pub fn relu(v: &[f32]) -> Result<Vec<f32>> {
    check_finite(v, "relu input")?;
    Ok(v.iter().map(|&x| x.max(0.0)).collect())
}

#[inline]
pub(crate) fn silu_scalar(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn silu(v: &[f32]) -> Result<Vec<f32>> {
    check_finite(v, "silu input")?;
    Ok(v.iter().map(|&x| silu_scalar(x)).collect())
}

pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    check_finite(v, "softmax input")?;
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Natural-log softmax value at `index`, computed in `f64`.
pub fn log_softmax_at(logits: &[f32], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    logits[index] as f64 - max - sum.ln()
}

pub fn rmsnorm(v: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if gain.len() != v.len() {
        return Err(Error::shape("rmsnorm", v.len(), gain.len()));
    }
    check_finite(v, "rmsnorm input")?;
    let mut out = vec![0.0; v.len()];
    rmsnorm_into(v, gain, eps, &mut out);
    Ok(out)
}

pub(crate) fn rmsnorm_into(v: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let ms = v.iter().map(|x| x * x).sum::<f32>() / v.len() as f32;
    let scale = 1.0 / (ms + eps).sqrt();
    for ((o, x), g) in out.iter_mut().zip(v).zip(gain) {
        *o = x * scale * g;
    }
}

pub fn layernorm(v: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Result<Vec<f32>> {
    if gain.len() != v.len() || bias.len() != v.len() {
        return Err(Error::shape(
            "layernorm",
            format!("gain/bias of length {}", v.len()),
            format!("{}/{}", gain.len(), bias.len()),
        ));
    }
    check_finite(v, "layernorm input")?;
    let mut out = vec![0.0; v.len()];
    layernorm_into(v, gain, bias, eps, &mut out);
    Ok(out)
}

pub(crate) fn layernorm_into(v: &[f32], gain: &[f32], bias: &[f32], eps: f32, out: &mut [f32]) {
    let n = v.len() as f32;
    let mean = v.iter().sum::<f32>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
    let scale = 1.0 / (var + eps).sqrt();
    for (((o, x), g), b) in out.iter_mut().zip(v).zip(gain).zip(bias) {
        *o = (x - mean) * scale * g + b;
    }
}

/// Number of elements kept when selecting the top `frac` of `n` items:
/// `ceil(frac·n)`, clamped to `[1, n]` for nonempty input.
///
/// The product is rounded down by a small epsilon before taking the ceiling so
/// that decimal grid points such as `0.7·10` land on 7 rather than 8.
pub fn fraction_count(frac: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let exact = frac * n as f64;
    let k = (exact - 1e-9 * exact.max(1.0)).ceil();
    (k.max(1.0) as usize).min(n)
}

pub(crate) fn check_fraction(frac: f64, name: &str) -> Result<()> {
    if frac > 0.0 && frac <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must be in (0, 1], got {frac}"
        )))
    }
}

/// Nearest-rank threshold of the top `frac` of `values`: the k-th largest
/// value, `k = ceil(frac·len)`.
pub fn top_fraction_threshold(values: &[f32], frac: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "top_fraction_threshold of an empty vector".into(),
        ));
    }
    check_fraction(frac, "frac")?;
    check_finite(values, "top_fraction_threshold input")?;
    let k = fraction_count(frac, values.len());
    let mut sorted = values.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    Ok(*kth)
}
