//! Dense row-major matrix in double precision, plus the value kernels used by
//! both the tape and the untaped forward paths.
//!
//! All reductions run in fixed sequential index order so that repeated
//! evaluations are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense rows x cols matrix, row-major `f64` storage.
///
/// Vectors are represented as 1 x n matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Identity-like matrix: ones on the main diagonal, zeros elsewhere.
    pub fn eye(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                op: "Matrix::from_vec",
                lhs: format!("{}x{}", rows, cols),
                rhs: format!("len {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "Matrix::from_vec data".into(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Row vector 1 x n.
    pub fn row_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Matrix::from_vec(1, n, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimMismatch {
                    op: "Matrix::from_rows",
                    lhs: format!("row len {}", c),
                    rhs: format!("row len {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius (flattened L2) norm.
    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    /// True iff the two matrices hold bit-identical values.
    ///
    /// Stricter than `==` (distinguishes `0.0` from `-0.0`); used by the
    /// vertex-equivalence and determinism checks.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.same_shape(other)
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.rows, m.cols)
}

// ---------------------------------------------------------------------------
// Conv1d parameters
// ---------------------------------------------------------------------------

/// Parameters of one 1-D convolution (cross-correlation convention).
///
/// The kernel is stored as an `out_channels x (in_channels * kernel_width)`
/// matrix; entry `(o, c * kernel_width + k)` is the weight connecting input
/// channel `c` at window offset `k` to output channel `o`. The bias is a
/// `1 x out_channels` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1dParams {
    pub kernel: Matrix,
    pub bias: Matrix,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Shape/stride metadata of a conv, detached from its tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvMeta {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dParams {
    pub fn new(
        kernel: Matrix,
        bias: Matrix,
        in_channels: usize,
        out_channels: usize,
        kernel_width: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel_width % 2 == 0 {
            return Err(Error::InvalidConv {
                reason: format!("kernel_width must be odd, got {}", kernel_width),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidConv {
                reason: "stride must be >= 1".into(),
            });
        }
        if kernel.shape() != (out_channels, in_channels * kernel_width) {
            return Err(Error::DimMismatch {
                op: "Conv1dParams kernel",
                lhs: format!("{}x{}", out_channels, in_channels * kernel_width),
                rhs: shape_str(&kernel),
            });
        }
        if bias.shape() != (1, out_channels) {
            return Err(Error::DimMismatch {
                op: "Conv1dParams bias",
                lhs: format!("1x{}", out_channels),
                rhs: shape_str(&bias),
            });
        }
        Ok(Conv1dParams {
            kernel,
            bias,
            in_channels,
            out_channels,
            kernel_width,
            stride,
            padding,
        })
    }

    pub fn meta(&self) -> ConvMeta {
        ConvMeta {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel_width: self.kernel_width,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl ConvMeta {
    /// Output length `T' = floor((T + 2p - w)/s) + 1`, or the
    /// sequence-too-short error when no window fits.
    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        let padded = input_len + 2 * self.padding;
        if padded < self.kernel_width {
            return Err(Error::SequenceTooShort {
                len: input_len,
                kernel_width: self.kernel_width,
                padding: self.padding,
            });
        }
        Ok((padded - self.kernel_width) / self.stride + 1)
    }
}

// ---------------------------------------------------------------------------
// Value kernels
// ---------------------------------------------------------------------------
// The tape calls exactly these functions for its forward values, so taped and
// untaped evaluation of the same expression are bitwise identical.

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimMismatch {
            op: "matmul",
            lhs: shape_str(a),
            rhs: shape_str(b),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for j in 0..b.cols {
            let mut acc = 0.0;
            for (k, &av) in a_row.iter().enumerate() {
                acc += av * b.data[k * b.cols + j];
            }
            out_row[j] = acc;
        }
    }
    Ok(out)
}

/// grad_a += up . b^T and grad_b += a^T . up
pub fn matmul_backward(a: &Matrix, b: &Matrix, up: &Matrix, grad_a: &mut Matrix, grad_b: &mut Matrix) {
    for i in 0..a.rows {
        let up_row = up.row(i);
        let ga_row = grad_a.row_mut(i);
        for k in 0..a.cols {
            let mut acc = 0.0;
            let b_row = b.row(k);
            for (j, &uv) in up_row.iter().enumerate() {
                acc += uv * b_row[j];
            }
            ga_row[k] += acc;
        }
    }
    for k in 0..b.rows {
        let gb_row = grad_b.row_mut(k);
        for i in 0..a.rows {
            let av = a.get(i, k);
            let up_row = up.row(i);
            for (j, &uv) in up_row.iter().enumerate() {
                gb_row[j] += av * uv;
            }
        }
    }
}

/// Cross-correlation over the time axis: input `T x C_in`, output `T' x C_out`.
/// Zero padding of `meta.padding` rows on each end.
pub fn conv1d(x: &Matrix, kernel: &Matrix, bias: &Matrix, meta: &ConvMeta) -> Result<Matrix> {
    if x.cols != meta.in_channels {
        return Err(Error::DimMismatch {
            op: "conv1d input channels",
            lhs: format!("{} channels", meta.in_channels),
            rhs: shape_str(x),
        });
    }
    let t_out = meta.output_len(x.rows)?;
    let kw = meta.kernel_width;
    let mut out = Matrix::zeros(t_out, meta.out_channels);
    for t_o in 0..t_out {
        let base = (t_o * meta.stride) as isize - meta.padding as isize;
        let out_row = out.row_mut(t_o);
        for o in 0..meta.out_channels {
            let k_row = kernel.row(o);
            let mut acc = bias.data[o];
            for c in 0..meta.in_channels {
                let w = &k_row[c * kw..(c + 1) * kw];
                for (k, &wv) in w.iter().enumerate() {
                    let t_in = base + k as isize;
                    if t_in >= 0 && (t_in as usize) < x.rows {
                        acc += wv * x.get(t_in as usize, c);
                    }
                }
            }
            out_row[o] = acc;
        }
    }
    Ok(out)
}

pub fn conv1d_backward(
    x: &Matrix,
    kernel: &Matrix,
    meta: &ConvMeta,
    up: &Matrix,
    grad_x: &mut Matrix,
    grad_kernel: &mut Matrix,
    grad_bias: &mut Matrix,
) {
    let kw = meta.kernel_width;
    for t_o in 0..up.rows() {
        let base = (t_o * meta.stride) as isize - meta.padding as isize;
        let up_row = up.row(t_o);
        for o in 0..meta.out_channels {
            let uv = up_row[o];
            grad_bias.data_mut()[o] += uv;
            let k_row = kernel.row(o);
            let gk_row = grad_kernel.row_mut(o);
            for c in 0..meta.in_channels {
                for k in 0..kw {
                    let t_in = base + k as isize;
                    if t_in >= 0 && (t_in as usize) < x.rows() {
                        let t_in = t_in as usize;
                        gk_row[c * kw + k] += uv * x.get(t_in, c);
                        grad_x.data_mut()[t_in * meta.in_channels + c] += uv * k_row[c * kw + k];
                    }
                }
            }
        }
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Subgradient 0 at exactly 0: grad passes only where x > 0.
pub fn relu_backward(x: &Matrix, up: &Matrix, grad_x: &mut Matrix) {
    for i in 0..x.len() {
        if x.data[i] > 0.0 {
            grad_x.data_mut()[i] += up.data[i];
        }
    }
}

/// Row-wise softmax, stabilized by per-row max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let out_row = out.row_mut(r);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out_row[j] = e;
            sum += e;
        }
        for v in out_row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// y is the softmax output; dL/dx_j = y_j * (up_j - sum_i up_i y_i) per row.
pub fn softmax_rows_backward(y: &Matrix, up: &Matrix, grad_x: &mut Matrix) {
    for r in 0..y.rows {
        let y_row = y.row(r);
        let up_row = up.row(r);
        let mut dot = 0.0;
        for (j, &yv) in y_row.iter().enumerate() {
            dot += up_row[j] * yv;
        }
        let g_row = grad_x.row_mut(r);
        for (j, &yv) in y_row.iter().enumerate() {
            g_row[j] += yv * (up_row[j] - dot);
        }
    }
}

/// Column means of a `T x M` matrix as a `1 x M` row.
pub fn mean_over_time(x: &Matrix) -> Result<Matrix> {
    if x.rows == 0 {
        return Err(Error::EmptySequence {
            op: "mean_over_time",
        });
    }
    let mut out = Matrix::zeros(1, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        for (j, &v) in row.iter().enumerate() {
            out.data_mut()[j] += v;
        }
    }
    let inv = 1.0 / x.rows as f64;
    for v in out.data_mut() {
        *v *= inv;
    }
    Ok(out)
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.same_shape(b) {
        return Err(Error::DimMismatch {
            op: "add",
            lhs: shape_str(a),
            rhs: shape_str(b),
        });
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(&b.data) {
        *o += bv;
    }
    Ok(out)
}

/// Adds a `1 x C` row to every row of a `T x C` matrix.
pub fn add_row_broadcast(x: &Matrix, row: &Matrix) -> Result<Matrix> {
    if row.rows != 1 || row.cols != x.cols {
        return Err(Error::DimMismatch {
            op: "add_row_broadcast",
            lhs: shape_str(x),
            rhs: shape_str(row),
        });
    }
    let mut out = x.clone();
    for r in 0..x.rows {
        let out_row = out.row_mut(r);
        for (j, &bv) in row.data.iter().enumerate() {
            out_row[j] += bv;
        }
    }
    Ok(out)
}

pub fn scale(x: &Matrix, c: f64) -> Matrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v *= c;
    }
    out
}

/// Linear combination `sum_t coeffs[indices[t]] * mats[t]`, with `coeffs` a
/// `1 x M` row. All `mats` must share a shape.
pub fn lincomb(mats: &[&Matrix], coeffs: &Matrix, indices: &[usize]) -> Result<Matrix> {
    let first = mats.first().ok_or(Error::EmptyBank)?;
    let mut out = Matrix::zeros(first.rows, first.cols);
    for (t, m) in mats.iter().enumerate() {
        if !m.same_shape(first) {
            return Err(Error::DimMismatch {
                op: "lincomb",
                lhs: shape_str(first),
                rhs: shape_str(m),
            });
        }
        let w = coeffs.data[indices[t]];
        for (o, &mv) in out.data_mut().iter_mut().zip(&m.data) {
            *o += w * mv;
        }
    }
    Ok(out)
}

/// Each selected row t of the output is `gate[t, col] * x[t, :]`; unselected
/// rows are exactly zero.
pub fn scale_rows_select(x: &Matrix, gate: &Matrix, col: usize, selected: &[bool]) -> Result<Matrix> {
    if gate.rows != x.rows || selected.len() != x.rows || col >= gate.cols {
        return Err(Error::DimMismatch {
            op: "scale_rows_select",
            lhs: shape_str(x),
            rhs: format!("{} (col {})", shape_str(gate), col),
        });
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        if selected[r] {
            let w = gate.get(r, col);
            let x_row = x.row(r);
            let out_row = out.row_mut(r);
            for (j, &xv) in x_row.iter().enumerate() {
                out_row[j] = w * xv;
            }
        }
    }
    Ok(out)
}

/// Mean squared error over all entries, as a scalar.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::DimMismatch {
            op: "mse",
            lhs: shape_str(pred),
            rhs: shape_str(target),
        });
    }
    let mut acc = 0.0;
    for (p, t) in pred.data.iter().zip(&target.data) {
        let d = p - t;
        acc += d * d;
    }
    Ok(acc / pred.len() as f64)
}

/// `scale * sum_i coeffs[i] * x[i]` over the flattened entries.
pub fn dot_const(x: &Matrix, coeffs: &Matrix, s: f64) -> Result<f64> {
    if !x.same_shape(coeffs) {
        return Err(Error::DimMismatch {
            op: "dot_const",
            lhs: shape_str(x),
            rhs: shape_str(coeffs),
        });
    }
    let mut acc = 0.0;
    for (a, b) in x.data.iter().zip(&coeffs.data) {
        acc += a * b;
    }
    Ok(s * acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Matrix::eye(2);
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = matmul(&i2, &a).unwrap();
        assert!(out.bits_eq(&a));
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), (1, 1));
        assert_eq!(out.get(0, 0), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn conv1d_box_filter_hand_case() {
        // x=[1,2,3,4], kernel=[1,1,1], stride 1, padding 1, bias 0 -> [3,6,9,7]
        let x = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = Conv1dParams::new(
            Matrix::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap(),
            Matrix::zeros(1, 1),
            1,
            1,
            3,
            1,
            1,
        )
        .unwrap();
        let out = conv1d(&x, &p.kernel, &p.bias, &p.meta()).unwrap();
        assert_eq!(out.data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv1d_width1_identity() {
        let x = Matrix::from_vec(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 4.0]).unwrap();
        let p = Conv1dParams::new(Matrix::eye(2), Matrix::zeros(1, 2), 2, 2, 1, 1, 0).unwrap();
        let out = conv1d(&x, &p.kernel, &p.bias, &p.meta()).unwrap();
        assert!(out.bits_eq(&x));
    }

    #[test]
    fn conv1d_too_short_errors() {
        let x = Matrix::zeros(2, 1);
        let meta = ConvMeta {
            in_channels: 1,
            out_channels: 1,
            kernel_width: 5,
            stride: 1,
            padding: 1,
        };
        assert!(matches!(
            meta.output_len(x.rows()),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn relu_hand_cases() {
        let x = Matrix::from_vec(2, 2, vec![-1.0, 2.0, 0.0, -3.0]).unwrap();
        let out = relu(&x);
        assert_eq!(out.data(), &[0.0, 2.0, 0.0, 0.0]);
        let pos = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(relu(&pos).bits_eq(&pos));
    }

    #[test]
    fn relu_subgradient_zero_at_zero() {
        let x = Matrix::from_vec(1, 2, vec![-1.0, 2.0]).unwrap();
        let up = Matrix::filled(1, 2, 1.0);
        let mut g = Matrix::zeros(1, 2);
        relu_backward(&x, &up, &mut g);
        assert_eq!(g.data(), &[0.0, 1.0]);
        // exactly-zero input gets no gradient
        let x0 = Matrix::zeros(1, 1);
        let mut g0 = Matrix::zeros(1, 1);
        relu_backward(&x0, &Matrix::filled(1, 1, 1.0), &mut g0);
        assert_eq!(g0.get(0, 0), 0.0);
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Matrix::zeros(1, 4);
        let y = softmax_rows(&x);
        for j in 0..4 {
            assert!((y.get(0, j) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_extreme_logits_no_overflow() {
        let x = Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let y = softmax_rows(&x);
        assert!(y.all_finite());
        assert!(y.get(0, 0) > 1.0 - 1e-12);
        assert!(y.get(0, 1) < 1e-12);
        let sum: f64 = y.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // Reference digits for softmax([1,2,3]) computed with a 50-digit
        // arbitrary-precision exp/sum evaluation.
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_7,
            0.665_240_955_774_821_9,
        ];
        let y = softmax_rows(&Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        for j in 0..3 {
            assert!((y.get(0, j) - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_over_time_cases() {
        let single = Matrix::from_vec(1, 3, vec![0.25, 0.5, 0.25]).unwrap();
        assert!(mean_over_time(&single).unwrap().bits_eq(&single));

        let two = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mean_over_time(&two).unwrap().data(), &[0.5, 0.5]);

        assert!(matches!(
            mean_over_time(&Matrix::zeros(0, 4)),
            Err(Error::EmptySequence { .. })
        ));
    }

    #[test]
    fn mse_hand_cases() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v += 1.0;
        }
        assert!((mse(&b, &a).unwrap() - 1.0).abs() < 1e-15);
    }
}
