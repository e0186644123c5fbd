//! Dense N-way tensors, row-major matrices and the index-mapping primitives
//! (reflection padding, trimming, mode products, grouped unfoldings,
//! valid correlation) that the embedding and degradation operators use.
//!
//! Layout is row-major everywhere: the last index varies fastest.

use crate::error::{Error, Result};

/// N-way real array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "tensor needs at least one mode".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every mode length must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for n in (0..shape.len().saturating_sub(1)).rev() {
        s[n] = s[n + 1] * shape[n + 1];
    }
    s
}

/// Flat offsets of the Cartesian product of per-mode contributions, in
/// row-major order of the product index.
pub(crate) fn cartesian_offsets(contribs: &[Vec<usize>]) -> Vec<usize> {
    let total: usize = contribs.iter().map(Vec::len).product();
    let mut offsets = Vec::with_capacity(total);
    offsets.push(0usize);
    for c in contribs {
        let prev = std::mem::take(&mut offsets);
        offsets.reserve(prev.len() * c.len());
        for o in prev {
            offsets.extend(c.iter().map(|&v| o + v));
        }
    }
    offsets
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if data.len() != len {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("data length {} does not match", data.len()),
            });
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    /// All-zero tensor. Panics if `shape` is empty or has a zero entry.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for n in (0..shape.len()).rev() {
                idx[n] += 1;
                if idx[n] < shape[n] {
                    break;
                }
                idx[n] = 0;
            }
        }
        Self::new(shape.to_vec(), data)
    }

    /// Constructor for buffers already known to match `shape`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum()
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != self.data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("cannot reshape {} elements", self.data.len()),
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self ← self + alpha·other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Slice `index` of the last mode, e.g. one channel of an `H×W×C` image.
    pub fn channel(&self, index: usize) -> Self {
        let c = *self.shape.last().unwrap();
        assert!(index < c);
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[..self.shape.len() - 1].to_vec()
        };
        let data = self.data.iter().skip(index).step_by(c).copied().collect();
        Self::from_parts(shape, data)
    }

    /// Inverse of [`DenseTensor::channel`]: stacks equally shaped tensors
    /// along a new trailing mode.
    pub fn stack_channels(channels: &[DenseTensor]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::mismatch("no channels to stack"))?;
        if channels.iter().any(|c| c.shape != first.shape) {
            return Err(Error::mismatch("channels differ in shape"));
        }
        let c = channels.len();
        let mut data = vec![0.0; first.len() * c];
        for (k, ch) in channels.iter().enumerate() {
            for (i, v) in ch.data.iter().enumerate() {
                data[i * c + k] = *v;
            }
        }
        let mut shape = first.shape.clone();
        shape.push(c);
        Ok(Self::from_parts(shape, data))
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::mismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data)?;
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::mismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c ← alpha·op(a)·op(b) + beta·c`, where `op` optionally transposes.
pub(crate) fn gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape differs");
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c.data {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the shape checks above guarantee every strided access of the
    // m×k, k×n and m×n operands stays inside the three buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Per-mode window sizes `τ_1..τ_N` for delay embedding.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EmbedShape(Vec<usize>);

impl EmbedShape {
    pub fn new(tau: Vec<usize>) -> Result<Self> {
        if tau.is_empty() || tau.contains(&0) {
            return Err(Error::param(format!("window sizes must be positive, got {tau:?}")));
        }
        Ok(Self(tau))
    }

    pub fn uniform(tau: usize, ndim: usize) -> Result<Self> {
        Self::new(vec![tau; ndim])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    /// `D = Π τ_n`
    pub fn window_volume(&self) -> usize {
        self.0.iter().product()
    }

    /// `T = Π (I_n + τ_n − 1)`
    pub fn num_windows(&self, shape: &[usize]) -> usize {
        shape.iter().zip(&self.0).map(|(i, t)| i + t - 1).product()
    }

    pub fn validate_for(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.0.len() {
            return Err(Error::mismatch(format!(
                "{}-mode window for a {}-mode tensor",
                self.0.len(),
                shape.len()
            )));
        }
        for (mode, (&len, &tau)) in shape.iter().zip(&self.0).enumerate() {
            if tau > len {
                return Err(Error::WindowTooLarge { mode, tau, len });
            }
        }
        Ok(())
    }
}

/// Source index for every position of a reflect-padded axis of length
/// `len + before + after`. Reflection is about the edge sample, which is not
/// repeated.
pub fn reflect_index_map(len: usize, before: usize, after: usize) -> Option<Vec<usize>> {
    if before > len - 1 || after > len - 1 {
        return None;
    }
    let last = len as isize - 1;
    Some(
        (0..len + before + after)
            .map(|j| {
                let i = j as isize - before as isize;
                let i = if i < 0 { -i } else { i };
                let i = if i > last { 2 * last - i } else { i };
                i as usize
            })
            .collect(),
    )
}

/// Output element `j` reads `x[maps_0[j_0], ..., maps_N[j_N]]`.
pub(crate) fn gather_modes(x: &DenseTensor, maps: &[Vec<usize>]) -> DenseTensor {
    let offsets = source_offsets(x.shape(), maps);
    let data = offsets.iter().map(|&o| x.data[o]).collect();
    DenseTensor::from_parts(maps.iter().map(Vec::len).collect(), data)
}

/// Adjoint of [`gather_modes`]: scatter-add `y` back into a tensor of shape `src_shape`.
pub(crate) fn scatter_add_modes(y: &DenseTensor, maps: &[Vec<usize>], src_shape: &[usize]) -> DenseTensor {
    let offsets = source_offsets(src_shape, maps);
    let mut out = DenseTensor::zeros(src_shape);
    for (&o, &v) in offsets.iter().zip(&y.data) {
        out.data[o] += v;
    }
    out
}

fn source_offsets(src_shape: &[usize], maps: &[Vec<usize>]) -> Vec<usize> {
    let st = strides(src_shape);
    let contribs: Vec<Vec<usize>> = maps
        .iter()
        .zip(&st)
        .map(|(m, &s)| m.iter().map(|&i| i * s).collect())
        .collect();
    cartesian_offsets(&contribs)
}

fn pad_maps(shape: &[usize], widths: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
    if widths.len() != shape.len() {
        return Err(Error::mismatch("one padding width pair per mode is required"));
    }
    shape
        .iter()
        .zip(widths)
        .enumerate()
        .map(|(mode, (&len, &(b, a)))| {
            reflect_index_map(len, b, a).ok_or(Error::WindowTooLarge {
                mode,
                tau: b.max(a) + 1,
                len,
            })
        })
        .collect()
}

/// Reflection padding with arbitrary `(before, after)` widths per mode.
pub fn pad_reflect(x: &DenseTensor, widths: &[(usize, usize)]) -> Result<DenseTensor> {
    let maps = pad_maps(x.shape(), widths)?;
    Ok(gather_modes(x, &maps))
}

/// Adjoint of [`pad_reflect`]: reflected contributions accumulate onto their source entries.
pub fn pad_reflect_adjoint(y: &DenseTensor, src_shape: &[usize], widths: &[(usize, usize)]) -> Result<DenseTensor> {
    let maps = pad_maps(src_shape, widths)?;
    let padded: Vec<usize> = maps.iter().map(Vec::len).collect();
    if y.shape() != padded.as_slice() {
        return Err(Error::mismatch(format!(
            "padded shape {padded:?} expected, got {:?}",
            y.shape()
        )));
    }
    Ok(scatter_add_modes(y, &maps, src_shape))
}

fn tau_widths(tau: &EmbedShape) -> Vec<(usize, usize)> {
    tau.as_slice().iter().map(|&t| (t - 1, t - 1)).collect()
}

/// `pad_τ`: reflects `τ_n − 1` samples onto both ends of every mode.
pub fn reflection_pad(x: &DenseTensor, tau: &EmbedShape) -> Result<DenseTensor> {
    tau.validate_for(x.shape())?;
    pad_reflect(x, &tau_widths(tau))
}

/// Adjoint of [`reflection_pad`].
pub fn reflection_pad_adjoint(y: &DenseTensor, src_shape: &[usize], tau: &EmbedShape) -> Result<DenseTensor> {
    tau.validate_for(src_shape)?;
    pad_reflect_adjoint(y, src_shape, &tau_widths(tau))
}

/// `trim_τ`: drops `τ_n − 1` leading and trailing slices of every mode.
pub fn trim(x: &DenseTensor, tau: &EmbedShape) -> Result<DenseTensor> {
    if tau.ndim() != x.ndim() {
        return Err(Error::mismatch("window rank differs from tensor rank"));
    }
    let maps = x
        .shape()
        .iter()
        .zip(tau.as_slice())
        .enumerate()
        .map(|(mode, (&len, &t))| {
            let w = t - 1;
            if len < 2 * w + 1 {
                return Err(Error::ShapeUnderflow { mode, len, width: w });
            }
            Ok((w..len - w).collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    Ok(gather_modes(x, &maps))
}

/// Mode-`mode` product `x ×_mode m` (0-based mode).
pub fn mode_n_product(x: &DenseTensor, m: &Matrix, mode: usize) -> Result<DenseTensor> {
    if mode >= x.ndim() {
        return Err(Error::mismatch(format!("mode {mode} out of range for {}-way tensor", x.ndim())));
    }
    let k = x.shape[mode];
    if m.cols != k {
        return Err(Error::mismatch(format!(
            "matrix has {} columns but mode {mode} has length {k}",
            m.cols
        )));
    }
    let outer: usize = x.shape[..mode].iter().product();
    let inner: usize = x.shape[mode + 1..].iter().product();
    let mut shape = x.shape.clone();
    shape[mode] = m.rows;
    let mut out = vec![0.0; outer * m.rows * inner];
    for o in 0..outer {
        let src = Matrix::from_parts(k, inner, x.data[o * k * inner..(o + 1) * k * inner].to_vec());
        let mut dst = Matrix::zeros(m.rows, inner);
        gemm(1.0, m, false, &src, false, 0.0, &mut dst);
        out[o * m.rows * inner..(o + 1) * m.rows * inner].copy_from_slice(&dst.data);
    }
    Ok(DenseTensor::from_parts(shape, out))
}

/// Permutes modes: output mode `k` is input mode `perm[k]`.
pub fn permute(x: &DenseTensor, perm: &[usize]) -> Result<DenseTensor> {
    let n = x.ndim();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidModePartition(format!("{perm:?} is not a permutation of {n} modes")));
    }
    let st = x.strides();
    let contribs: Vec<Vec<usize>> = perm
        .iter()
        .map(|&p| (0..x.shape[p]).map(|i| i * st[p]).collect())
        .collect();
    let data = cartesian_offsets(&contribs).iter().map(|&o| x.data[o]).collect();
    Ok(DenseTensor::from_parts(perm.iter().map(|&p| x.shape[p]).collect(), data))
}

fn group_perm(ndim: usize, row_modes: &[usize], col_modes: &[usize]) -> Result<Vec<usize>> {
    let perm: Vec<usize> = row_modes.iter().chain(col_modes).copied().collect();
    let mut seen = vec![false; ndim];
    if perm.len() != ndim || perm.iter().any(|&p| p >= ndim || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidModePartition(format!(
            "rows {row_modes:?} and columns {col_modes:?} do not partition {ndim} modes"
        )));
    }
    Ok(perm)
}

/// Matricization with grouped row and column modes (0-based). Within each
/// group the first listed mode varies slowest.
pub fn unfold_group(x: &DenseTensor, row_modes: &[usize], col_modes: &[usize]) -> Result<Matrix> {
    let perm = group_perm(x.ndim(), row_modes, col_modes)?;
    let rows: usize = row_modes.iter().map(|&m| x.shape[m]).product();
    let cols: usize = col_modes.iter().map(|&m| x.shape[m]).product();
    let p = permute(x, &perm)?;
    Ok(Matrix::from_parts(rows, cols, p.data))
}

/// Inverse of [`unfold_group`] for a tensor of shape `shape`.
pub fn fold_group(m: &Matrix, row_modes: &[usize], col_modes: &[usize], shape: &[usize]) -> Result<DenseTensor> {
    let perm = group_perm(shape.len(), row_modes, col_modes)?;
    let rows: usize = row_modes.iter().map(|&k| shape[k]).product();
    let cols: usize = col_modes.iter().map(|&k| shape[k]).product();
    if (rows, cols) != m.shape() {
        return Err(Error::mismatch(format!(
            "matrix is {:?} but the partition gives {rows}x{cols}",
            m.shape()
        )));
    }
    let permuted_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let permuted = DenseTensor::from_parts(permuted_shape, m.data.clone());
    let mut inverse = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inverse[p] = k;
    }
    permute(&permuted, &inverse)
}

/// Valid N-way cross-correlation: `out[p] = Σ_a k[a]·x[p + a]`.
pub fn correlate_valid(x: &DenseTensor, kernel: &DenseTensor) -> Result<DenseTensor> {
    let out_shape = valid_shape(x.shape(), kernel.shape())?;
    let xs = x.strides();
    let out_offsets = cartesian_offsets(
        &out_shape
            .iter()
            .zip(&xs)
            .map(|(&n, &s)| (0..n).map(|i| i * s).collect())
            .collect::<Vec<_>>(),
    );
    let tap_offsets = cartesian_offsets(
        &kernel
            .shape()
            .iter()
            .zip(&xs)
            .map(|(&n, &s)| (0..n).map(|i| i * s).collect())
            .collect::<Vec<_>>(),
    );
    let mut out = vec![0.0; out_offsets.len()];
    for (&w, &to) in kernel.data.iter().zip(&tap_offsets) {
        for (o, &base) in out.iter_mut().zip(&out_offsets) {
            *o += w * x.data[base + to];
        }
    }
    Ok(DenseTensor::from_parts(out_shape, out))
}

/// Adjoint of [`correlate_valid`] with respect to `x` (the "transposed"
/// correlation), producing a tensor of shape `x_shape`.
pub fn correlate_valid_adjoint(g: &DenseTensor, kernel: &DenseTensor, x_shape: &[usize]) -> Result<DenseTensor> {
    let out_shape = valid_shape(x_shape, kernel.shape())?;
    if g.shape() != out_shape.as_slice() {
        return Err(Error::mismatch(format!(
            "correlation output of shape {out_shape:?} expected, got {:?}",
            g.shape()
        )));
    }
    let xs = strides(x_shape);
    let out_offsets = cartesian_offsets(
        &out_shape
            .iter()
            .zip(&xs)
            .map(|(&n, &s)| (0..n).map(|i| i * s).collect())
            .collect::<Vec<_>>(),
    );
    let tap_offsets = cartesian_offsets(
        &kernel
            .shape()
            .iter()
            .zip(&xs)
            .map(|(&n, &s)| (0..n).map(|i| i * s).collect())
            .collect::<Vec<_>>(),
    );
    let mut x = DenseTensor::zeros(x_shape);
    for (&w, &to) in kernel.data.iter().zip(&tap_offsets) {
        for (&gv, &base) in g.data.iter().zip(&out_offsets) {
            x.data[base + to] += w * gv;
        }
    }
    Ok(x)
}

fn valid_shape(x_shape: &[usize], k_shape: &[usize]) -> Result<Vec<usize>> {
    if x_shape.len() != k_shape.len() {
        return Err(Error::mismatch("kernel rank differs from input rank"));
    }
    x_shape
        .iter()
        .zip(k_shape)
        .enumerate()
        .map(|(mode, (&n, &k))| {
            if k > n {
                Err(Error::WindowTooLarge { mode, tau: k, len: n })
            } else {
                Ok(n - k + 1)
            }
        })
        .collect()
}
