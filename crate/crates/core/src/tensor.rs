//! Dense row-major tensors with an optional gradient slot, plus the flat
//! tensor file format used for datasets and model snapshots.
//!
//! Layout is always row-major; feature maps are `[channels, height, width]`.
//! Batch is handled by the caller as an outer loop, never inside the engine.

use std::fmt::{Debug, Display};
use std::fs;
use std::io::{Read, Write};
use std::iter::Sum;
use std::path::Path;

use num_traits::Float;

use crate::error::{CoreError, Result};

/// Element type for all tensor math. Training runs in `f32`; gradient
/// verification runs in `f64`.
pub trait Scalar: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    /// Name used in run reports ("f32" / "f64").
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64_val(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn to_f64_val(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn to_f64_val(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array. `grad`, when present, always matches `data`
/// in length and logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    dims: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::invalid("Tensor::new", format!("zero-sized dim in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(CoreError::invalid(
                "Tensor::new",
                format!("dims {:?} need {} elements, got {}", dims, expected, data.len()),
            ));
        }
        Ok(Tensor { dims, data, requires_grad: false, grad: None })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor { dims, data: vec![T::zero(); n], requires_grad: false, grad: None }
    }

    pub fn filled(dims: Vec<usize>, value: T) -> Self {
        let n = dims.iter().product();
        Tensor { dims, data: vec![value; n], requires_grad: false, grad: None }
    }

    /// Build from a function of the flat (row-major) index.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = dims.iter().product();
        Tensor { dims, data: (0..n).map(&mut f).collect(), requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { dims: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the gradient slot, creating it zeroed on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn scale_grad(&mut self, factor: T) {
        if let Some(grad) = self.grad.as_mut() {
            for g in grad.iter_mut() {
                *g = *g * factor;
            }
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Remove and return the gradient, leaving the slot empty.
    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Flat offset of a `[C,H,W]` index. Used by oracles and tests.
    pub fn at3(&self, c: usize, h: usize, w: usize) -> T {
        debug_assert_eq!(self.rank(), 3);
        let (hh, ww) = (self.dims[1], self.dims[2]);
        self.data[(c * hh + h) * ww + w]
    }

    pub fn at2(&self, h: usize, w: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[h * self.dims[1] + w]
    }

    pub fn at3_mut(&mut self, c: usize, h: usize, w: usize) -> &mut T {
        debug_assert_eq!(self.rank(), 3);
        let (hh, ww) = (self.dims[1], self.dims[2]);
        &mut self.data[(c * hh + h) * ww + w]
    }

    pub fn at2_mut(&mut self, h: usize, w: usize) -> &mut T {
        debug_assert_eq!(self.rank(), 2);
        let ww = self.dims[1];
        &mut self.data[h * ww + w]
    }

    /// Copy of dims and data without the grad slot or the grad flag.
    pub(crate) fn clone_data_only(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Convert element type; used to lift f32 parameters into f64 for
    /// gradient checking.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64_val())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_val() - b.to_f64_val()).abs())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Flat tensor file format: magic "CFT1", u8 rank, rank x u32 LE dims, then
// f32 LE values in row-major order.
// ---------------------------------------------------------------------------

const CFT_MAGIC: &[u8; 4] = b"CFT1";

impl<T: Scalar> Tensor<T> {
    pub fn write_cft(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let mut buf = Vec::with_capacity(5 + 4 * self.dims.len() + 4 * self.data.len());
        buf.extend_from_slice(CFT_MAGIC);
        buf.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| CoreError::TensorFile {
                path: p.clone(),
                reason: format!("dim {d} exceeds u32"),
            })?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&(v.to_f64_val() as f32).to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(|e| CoreError::io(&p, e))?;
        file.write_all(&buf).map_err(|e| CoreError::io(&p, e))?;
        Ok(())
    }

    pub fn read_cft(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CoreError::io(&p, e))?;
        let fail =
            |reason: &str| CoreError::TensorFile { path: p.clone(), reason: reason.to_string() };
        if bytes.len() < 5 || &bytes[..4] != CFT_MAGIC {
            return Err(fail("bad magic, expected CFT1"));
        }
        let rank = bytes[4] as usize;
        let header = 5 + 4 * rank;
        if bytes.len() < header {
            return Err(fail("truncated dim header"));
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 5 + 4 * i;
            let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            if d == 0 {
                return Err(fail("zero-sized dim"));
            }
            dims.push(d);
        }
        let n: usize = dims.iter().product();
        if bytes.len() != header + 4 * n {
            return Err(fail(&format!(
                "payload length {} does not match dims {:?}",
                bytes.len() - header,
                dims
            )));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Tensor::new(dims, data)
    }
}
