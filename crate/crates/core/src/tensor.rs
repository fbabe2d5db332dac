//! Dense N-way tensors stored row-major (last index fastest).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered list of tensor extents. Every extent is at least one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::ShapeMismatch("tensor order must be at least 1".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("extent {pos} is zero in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeMismatch(format!("element count of {dims:?} overflows")))?;
        Ok(Self(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for k in (0..self.0.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.0[k + 1];
        }
        strides
    }

    /// Flat offset of a multi-index. Panics if the index is out of range.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.0.len(), "index order mismatch");
        index.iter().zip(&self.0).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of range for extent {d}");
            acc * d + i
        })
    }

    /// Inverse of [`TensorShape::offset`].
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0; self.0.len()];
        for k in (0..self.0.len()).rev() {
            index[k] = offset % self.0[k];
            offset /= self.0[k];
        }
        index
    }
}

impl TryFrom<Vec<usize>> for TensorShape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<TensorShape> for Vec<usize> {
    fn from(shape: TensorShape) -> Self {
        shape.0
    }
}

/// Dense real tensor with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: TensorShape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let shape = TensorShape::new(dims)?;
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape.dims(),
                shape.numel()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {pos} is {}", data[pos])));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let shape = TensorShape::new(dims)?;
        let data = vec![0.0; shape.numel()];
        Ok(Self { shape, data })
    }

    /// Builds a tensor from already validated parts.
    pub(crate) fn from_parts(shape: TensorShape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn order(&self) -> usize {
        self.shape.order()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.shape.offset(index)]
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        frobenius_norm_sq(self)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm_sq(self).sqrt()
    }

    /// Frobenius inner product. Panics on shape mismatch.
    pub fn dot(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.dims(), other.dims(), "dot: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> DenseTensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|v| v * factor).collect())
    }

    fn zip_with(&self, other: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> Result<DenseTensor> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Same data, new extents.
    pub fn reshape(&self, dims: Vec<usize>) -> Result<DenseTensor> {
        DenseTensor::new(dims, self.data.clone())
    }

    /// Reorders axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<DenseTensor> {
        let n = self.order();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::ShapeMismatch(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        let in_strides = self.shape.strides();
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims()[p]).collect();
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let out_shape = TensorShape::new(out_dims)?;
        let mut data = Vec::with_capacity(self.numel());
        let mut index = vec![0usize; n];
        let mut src = 0usize;
        for _ in 0..self.numel() {
            data.push(self.data[src]);
            for k in (0..n).rev() {
                index[k] += 1;
                src += gather[k];
                if index[k] < out_shape.dims()[k] {
                    break;
                }
                src -= gather[k] * index[k];
                index[k] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, data))
    }
}

/// Sum of squared entries.
pub fn frobenius_norm_sq(t: &DenseTensor) -> f64 {
    t.data.iter().map(|v| v * v).sum()
}

/// Convolution kernel with axes (output channels, input channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel(DenseTensor);

impl ConvKernel {
    pub fn new(tensor: DenseTensor) -> Result<Self> {
        if tensor.order() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel must be 4-way (O, C, k1, k2), got {:?}",
                tensor.dims()
            )));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.0
    }

    pub fn into_tensor(self) -> DenseTensor {
        self.0
    }

    pub fn out_channels(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.0.dims()[2], self.0.dims()[3])
    }
}

/// Output extent of a strided, zero-padded window sweep (floor semantics).
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::ShapeMismatch("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::ShapeMismatch(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Direct sliding-window cross-correlation of a (C, H, W) input.
pub fn conv2d_dense(
    kernel: &ConvKernel,
    input: &DenseTensor,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor> {
    conv2d_raw(kernel.tensor(), input, stride, padding)
}

/// Same as [`conv2d_dense`] but accepts any (O, C, k1, k2) tensor.
pub(crate) fn conv2d_raw(
    kernel: &DenseTensor,
    input: &DenseTensor,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor> {
    let &[o_ch, c_ch, k1, k2] = kernel.dims() else {
        return Err(Error::ShapeMismatch("kernel must be 4-way".into()));
    };
    let &[c_in, h, w] = input.dims() else {
        return Err(Error::ShapeMismatch(format!(
            "input must be (C, H, W), got {:?}",
            input.dims()
        )));
    };
    if c_in != c_ch {
        return Err(Error::ShapeMismatch(format!(
            "input has {c_in} channels, kernel expects {c_ch}"
        )));
    }
    let ho = conv_output_size(h, k1, stride, padding)?;
    let wo = conv_output_size(w, k2, stride, padding)?;
    let kd = kernel.data();
    let xd = input.data();
    let mut out = vec![0.0; o_ch * ho * wo];
    for o in 0..o_ch {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..c_ch {
            let x_plane = &xd[c * h * w..(c + 1) * h * w];
            for a in 0..k1 {
                for b in 0..k2 {
                    let kv = kd[((o * c_ch + c) * k1 + a) * k2 + b];
                    if kv == 0.0 {
                        continue;
                    }
                    for y in 0..ho {
                        let iy = (y * stride + a) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut plane[y * wo..(y + 1) * wo];
                        for (x, acc) in out_row.iter_mut().enumerate() {
                            let ix = (x * stride + b) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *acc += kv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(DenseTensor::from_parts(TensorShape(vec![o_ch, ho, wo]), out))
}
