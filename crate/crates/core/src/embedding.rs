//! Multiway delay embedding (Hankelization with reflection padding).
//!
//! `H(X) = unfold_(D,T)(pad_τ(X) ×_1 S_1 ··· ×_N S_N)` maps an
//! `I_1×···×I_N` tensor to a `D×T` matrix whose columns are the vectorized
//! `τ_1×···×τ_N` patches of the padded tensor. Rows are indexed by the
//! in-patch offset and columns by the window start, both linearized with
//! mode 1 slowest.
//!
//! [`MdtOperator`] gathers windows directly instead of materializing the
//! duplication matrices; [`duplication_matrix`] and the convolution path
//! ([`mdt_forward_conv`], [`mdt_pinv_conv`]) are independent formulations
//! of the same maps.

use crate::error::{Error, Result};
use crate::tensor::{
    cartesian_offsets, correlate_valid, correlate_valid_adjoint, reflect_index_map, reflection_pad, strides, trim,
    DenseTensor, EmbedShape, Matrix,
};

/// `D×T` matrix of embedded patches together with the geometry it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct HankelMatrix {
    values: Matrix,
    source_shape: Vec<usize>,
    tau: EmbedShape,
}

impl HankelMatrix {
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn source_shape(&self) -> &[usize] {
        &self.source_shape
    }

    pub fn tau(&self) -> &EmbedShape {
        &self.tau
    }

    pub fn pinv(&self) -> Result<DenseTensor> {
        mdt_pinv(&self.values, &self.source_shape, &self.tau)
    }
}

/// Precomputed index tables for `H`, `Hᵀ`, `H†` and `(H†)ᵀ` on one geometry.
#[derive(Clone, Debug)]
pub struct MdtOperator {
    source_shape: Vec<usize>,
    tau: EmbedShape,
    padded_len: usize,
    /// padded flat index -> source flat index
    pad_src: Vec<usize>,
    /// in-patch offsets within the padded tensor, one per row
    row_offsets: Vec<usize>,
    /// window starts within the padded tensor, one per column
    col_bases: Vec<usize>,
    /// source flat index -> padded flat index (inverse of the trim)
    interior: Vec<usize>,
    /// reciprocal of the `SᵀS` diagonal product at each interior position
    inv_counts: Vec<f64>,
}

impl MdtOperator {
    pub fn new(source_shape: &[usize], tau: &EmbedShape) -> Result<Self> {
        if source_shape.is_empty() || source_shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape: source_shape.to_vec(),
                reason: "cannot embed an empty tensor".into(),
            });
        }
        tau.validate_for(source_shape)?;
        let taus = tau.as_slice();
        let padded_shape: Vec<usize> = source_shape.iter().zip(taus).map(|(i, t)| i + 2 * (t - 1)).collect();
        let src_st = strides(source_shape);
        let pad_st = strides(&padded_shape);

        let reflect: Vec<Vec<usize>> = source_shape
            .iter()
            .zip(taus)
            .zip(&src_st)
            .map(|((&len, &t), &s)| {
                reflect_index_map(len, t - 1, t - 1)
                    .expect("validated window")
                    .into_iter()
                    .map(|i| i * s)
                    .collect()
            })
            .collect();
        let pad_src = cartesian_offsets(&reflect);

        let row_offsets = cartesian_offsets(
            &taus
                .iter()
                .zip(&pad_st)
                .map(|(&t, &s)| (0..t).map(|a| a * s).collect())
                .collect::<Vec<_>>(),
        );
        let col_bases = cartesian_offsets(
            &source_shape
                .iter()
                .zip(taus)
                .zip(&pad_st)
                .map(|((&i, &t), &s)| (0..i + t - 1).map(|p| p * s).collect())
                .collect::<Vec<_>>(),
        );
        let interior = cartesian_offsets(
            &source_shape
                .iter()
                .zip(taus)
                .zip(&pad_st)
                .map(|((&i, &t), &s)| (t - 1..t - 1 + i).map(|p| p * s).collect())
                .collect::<Vec<_>>(),
        );

        // diag(SᵀS) per mode: how many windows cover each padded position
        let per_mode: Vec<Vec<f64>> = source_shape
            .iter()
            .zip(taus)
            .map(|(&i, &t)| {
                let mut c = vec![0.0; i + 2 * (t - 1)];
                for start in 0..i + t - 1 {
                    for a in 0..t {
                        c[start + a] += 1.0;
                    }
                }
                c[t - 1..t - 1 + i].to_vec()
            })
            .collect();
        let mut inv_counts = vec![1.0f64];
        for c in &per_mode {
            let prev = std::mem::take(&mut inv_counts);
            for p in prev {
                inv_counts.extend(c.iter().map(|&v| p / v));
            }
        }

        Ok(Self {
            source_shape: source_shape.to_vec(),
            tau: tau.clone(),
            padded_len: padded_shape.iter().product(),
            pad_src,
            row_offsets,
            col_bases,
            interior,
            inv_counts,
        })
    }

    pub fn source_shape(&self) -> &[usize] {
        &self.source_shape
    }

    pub fn tau(&self) -> &EmbedShape {
        &self.tau
    }

    /// Number of rows `D`.
    pub fn rows(&self) -> usize {
        self.row_offsets.len()
    }

    /// Number of columns `T`.
    pub fn cols(&self) -> usize {
        self.col_bases.len()
    }

    pub fn source_len(&self) -> usize {
        self.interior.len()
    }

    /// Writes `H(x)` into the `D×T` block starting at column `col0` of a
    /// row-major buffer with leading dimension `ld`.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64], ld: usize, col0: usize) {
        assert_eq!(x.len(), self.interior.len());
        for (d, &off) in self.row_offsets.iter().enumerate() {
            let row = &mut out[d * ld + col0..d * ld + col0 + self.col_bases.len()];
            for (o, &base) in row.iter_mut().zip(&self.col_bases) {
                *o = x[self.pad_src[base + off]];
            }
        }
    }

    /// Accumulates `Hᵀ(m)` for the block at column `col0` into `out`.
    pub fn adjoint_add(&self, m: &[f64], ld: usize, col0: usize, out: &mut [f64]) {
        assert_eq!(out.len(), self.interior.len());
        for (d, &off) in self.row_offsets.iter().enumerate() {
            let row = &m[d * ld + col0..d * ld + col0 + self.col_bases.len()];
            for (&v, &base) in row.iter().zip(&self.col_bases) {
                out[self.pad_src[base + off]] += v;
            }
        }
    }

    /// Writes `H†(m)` for the block at column `col0` into `out`.
    pub fn pinv_into(&self, m: &[f64], ld: usize, col0: usize, out: &mut [f64]) {
        assert_eq!(out.len(), self.interior.len());
        let mut buf = vec![0.0; self.padded_len];
        for (d, &off) in self.row_offsets.iter().enumerate() {
            let row = &m[d * ld + col0..d * ld + col0 + self.col_bases.len()];
            for (&v, &base) in row.iter().zip(&self.col_bases) {
                buf[base + off] += v;
            }
        }
        for ((o, &p), &w) in out.iter_mut().zip(&self.interior).zip(&self.inv_counts) {
            *o = buf[p] * w;
        }
    }

    /// Writes `(H†)ᵀ(g)` into the block at column `col0`.
    pub fn pinv_adjoint_into(&self, g: &[f64], out: &mut [f64], ld: usize, col0: usize) {
        assert_eq!(g.len(), self.interior.len());
        let mut buf = vec![0.0; self.padded_len];
        for ((&v, &p), &w) in g.iter().zip(&self.interior).zip(&self.inv_counts) {
            buf[p] = v * w;
        }
        for (d, &off) in self.row_offsets.iter().enumerate() {
            let row = &mut out[d * ld + col0..d * ld + col0 + self.col_bases.len()];
            for (o, &base) in row.iter_mut().zip(&self.col_bases) {
                *o = buf[base + off];
            }
        }
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<Matrix> {
        self.check_source(x.shape())?;
        let mut out = Matrix::zeros(self.rows(), self.cols());
        let t = self.cols();
        self.forward_into(x.data(), out.data_mut(), t, 0);
        Ok(out)
    }

    pub fn adjoint(&self, m: &Matrix) -> Result<DenseTensor> {
        self.check_matrix(m)?;
        let mut out = DenseTensor::zeros(&self.source_shape);
        self.adjoint_add(m.data(), m.cols(), 0, out.data_mut());
        Ok(out)
    }

    pub fn pinv(&self, m: &Matrix) -> Result<DenseTensor> {
        self.check_matrix(m)?;
        let mut out = DenseTensor::zeros(&self.source_shape);
        self.pinv_into(m.data(), m.cols(), 0, out.data_mut());
        Ok(out)
    }

    pub fn pinv_adjoint(&self, g: &DenseTensor) -> Result<Matrix> {
        self.check_source(g.shape())?;
        let mut out = Matrix::zeros(self.rows(), self.cols());
        let t = self.cols();
        self.pinv_adjoint_into(g.data(), out.data_mut(), t, 0);
        Ok(out)
    }

    fn check_source(&self, shape: &[usize]) -> Result<()> {
        if shape != self.source_shape.as_slice() {
            return Err(Error::mismatch(format!(
                "operator built for shape {:?}, got {shape:?}",
                self.source_shape
            )));
        }
        Ok(())
    }

    fn check_matrix(&self, m: &Matrix) -> Result<()> {
        if m.shape() != (self.rows(), self.cols()) {
            return Err(Error::mismatch(format!(
                "expected a {}x{} embedded matrix, got {:?}",
                self.rows(),
                self.cols(),
                m.shape()
            )));
        }
        Ok(())
    }
}

/// `S ∈ {0,1}^{τ(I+τ−1) × (I+2(τ−1))}`: row block `t` selects the length-`τ`
/// window starting at padded position `t`.
pub fn duplication_matrix(len: usize, tau: usize) -> Result<Matrix> {
    if tau == 0 || tau > len {
        return Err(Error::WindowTooLarge { mode: 0, tau, len });
    }
    let windows = len + tau - 1;
    let padded = len + 2 * (tau - 1);
    let mut s = Matrix::zeros(tau * windows, padded);
    for t in 0..windows {
        for a in 0..tau {
            s.set(t * tau + a, t + a, 1.0);
        }
    }
    Ok(s)
}

pub fn mdt_forward(x: &DenseTensor, tau: &EmbedShape) -> Result<HankelMatrix> {
    let op = MdtOperator::new(x.shape(), tau)?;
    Ok(HankelMatrix {
        values: op.forward(x)?,
        source_shape: x.shape().to_vec(),
        tau: tau.clone(),
    })
}

/// Exact adjoint `Hᵀ` of the embedding.
pub fn mdt_adjoint(m: &Matrix, source_shape: &[usize], tau: &EmbedShape) -> Result<DenseTensor> {
    MdtOperator::new(source_shape, tau)?.adjoint(m)
}

/// `H†(M) = trim_τ(fold_(D,T)(M) ×_1 S_1† ··· ×_N S_N†)`
pub fn mdt_pinv(m: &Matrix, source_shape: &[usize], tau: &EmbedShape) -> Result<DenseTensor> {
    MdtOperator::new(source_shape, tau)?.pinv(m)
}

/// Transpose of [`mdt_pinv`], used to back-propagate through `H†`.
pub fn mdt_pinv_adjoint(g: &DenseTensor, tau: &EmbedShape) -> Result<Matrix> {
    MdtOperator::new(g.shape(), tau)?.pinv_adjoint(g)
}

/// The `D` one-hot filters obtained by folding `I_D` into `τ_1×···×τ_N×D`.
#[derive(Clone, Debug)]
pub struct OneHotWindows {
    windows: Vec<DenseTensor>,
}

impl OneHotWindows {
    pub fn new(tau: &EmbedShape) -> Self {
        let d = tau.window_volume();
        let windows = (0..d)
            .map(|k| {
                let mut data = vec![0.0; d];
                data[k] = 1.0;
                DenseTensor::from_parts(tau.as_slice().to_vec(), data)
            })
            .collect();
        Self { windows }
    }

    pub fn windows(&self) -> &[DenseTensor] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Embedding by valid correlation of `pad_τ(x)` with every one-hot window;
/// filter `d` produces row `d`.
pub fn mdt_forward_conv(x: &DenseTensor, tau: &EmbedShape) -> Result<Matrix> {
    let padded = reflection_pad(x, tau)?;
    let filters = OneHotWindows::new(tau);
    let t = tau.num_windows(x.shape());
    let mut out = Vec::with_capacity(filters.len() * t);
    for w in filters.windows() {
        out.extend_from_slice(correlate_valid(&padded, w)?.data());
    }
    Ok(Matrix::from_parts(filters.len(), t, out))
}

/// Pseudo-inverse by transposed correlation, trimming and scaling by `1/D`.
pub fn mdt_pinv_conv(m: &Matrix, source_shape: &[usize], tau: &EmbedShape) -> Result<DenseTensor> {
    tau.validate_for(source_shape)?;
    let filters = OneHotWindows::new(tau);
    let t = tau.num_windows(source_shape);
    if m.shape() != (filters.len(), t) {
        return Err(Error::mismatch(format!(
            "expected a {}x{t} embedded matrix, got {:?}",
            filters.len(),
            m.shape()
        )));
    }
    let out_shape: Vec<usize> = source_shape.iter().zip(tau.as_slice()).map(|(i, t)| i + t - 1).collect();
    let padded_shape: Vec<usize> = source_shape
        .iter()
        .zip(tau.as_slice())
        .map(|(i, t)| i + 2 * (t - 1))
        .collect();
    let mut acc = DenseTensor::zeros(&padded_shape);
    for (d, w) in filters.windows().iter().enumerate() {
        let row = DenseTensor::from_parts(out_shape.clone(), m.row(d).to_vec());
        acc.axpy(1.0, &correlate_valid_adjoint(&row, w, &padded_shape)?);
    }
    let scale = 1.0 / filters.len() as f64;
    Ok(trim(&acc, tau)?.map(|v| v * scale))
}
