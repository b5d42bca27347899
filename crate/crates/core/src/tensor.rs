//! Minimal dense linear algebra on f64: vectors, row-major matrices, the
//! affine map, a numerically stable softmax, and the two activations used
//! by the models. Nothing here allocates behind the caller's back except
//! the obvious result values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense f64 vector. Constructors reject non-finite entries so NaN can
/// never leak into a model through this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector entry".into()));
        }
        Ok(Vector { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// self += alpha * other. Dimensions must match.
    pub fn axpy(&mut self, alpha: f64, other: &Vector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "axpy: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "dot: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate().skip(1) {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// self * x.
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matvec: {}x{} matrix with {}-vector",
                self.rows,
                self.cols,
                x.dim()
            )));
        }
        let mut out = Vector::zeros(self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x.as_slice()) {
                acc += w * v;
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// self^T * x. Used by backward passes to push gradients through an
    /// affine map without materializing the transpose.
    pub fn matvec_t(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "matvec_t: {}x{} matrix with {}-vector",
                self.rows,
                self.cols,
                x.dim()
            )));
        }
        let mut out = Vector::zeros(self.cols);
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            let row = self.row(i);
            for (o, w) in out.as_mut_slice().iter_mut().zip(row) {
                *o += w * xi;
            }
        }
        Ok(out)
    }

    /// self += u * v^T. Gradient accumulation for affine weights.
    pub fn add_outer(&mut self, u: &Vector, v: &Vector) -> Result<()> {
        if u.dim() != self.rows || v.dim() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "add_outer: {}x{} matrix with {} and {} vectors",
                self.rows,
                self.cols,
                u.dim(),
                v.dim()
            )));
        }
        for i in 0..self.rows {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            let base = i * self.cols;
            for j in 0..self.cols {
                self.data[base + j] += ui * v[j];
            }
        }
        Ok(())
    }
}

/// w * x + b.
pub fn affine(w: &Mat, x: &Vector, b: &Vector) -> Result<Vector> {
    if b.dim() != w.rows() {
        return Err(Error::DimensionMismatch(format!(
            "affine: {}x{} matrix with {}-bias",
            w.rows(),
            w.cols(),
            b.dim()
        )));
    }
    let mut out = w.matvec(x)?;
    for (o, bv) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o += bv;
    }
    Ok(out)
}

/// Numerically stable softmax: subtracts the max before exponentiating, so
/// large logits cannot overflow. Rejects empty or non-finite input.
pub fn softmax(z: &[f64]) -> Result<Vector> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty slice".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(z.len());
    let mut sum = 0.0;
    for v in z {
        let e = (v - max).exp();
        sum += e;
        out.push(e);
    }
    for v in &mut out {
        *v /= sum;
    }
    Vector::new(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// sigmoid'(x) expressed through the already-computed output s = sigmoid(x).
pub fn sigmoid_deriv(s: f64) -> f64 {
    s * (1.0 - s)
}

/// tanh'(x) expressed through the already-computed output t = tanh(x).
pub fn tanh_deriv(t: f64) -> f64 {
    1.0 - t * t
}

/// Borrowed view of one named parameter tensor.
pub struct TensorView<'a> {
    pub name: &'static str,
    pub data: &'a [f64],
    /// Whether weight decay applies; biases opt out.
    pub decay: bool,
}

/// Mutable counterpart of [`TensorView`].
pub struct TensorViewMut<'a> {
    pub name: &'static str,
    pub data: &'a mut [f64],
    pub decay: bool,
}

/// A parameter container that can expose its tensors in a fixed order.
/// The optimizer and the gradient checker both walk this list, so the
/// order must be stable and identical between a model and its gradients.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}
