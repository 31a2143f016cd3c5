//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major and strictly shaped: no broadcasting beyond bias
//! adds and scalar ops. Float tensors (f32/f64) may participate in the
//! gradient tape; u8 tensors never do. Reductions inside f32 ops accumulate
//! in f64.

mod autograd;
pub(crate) mod kernels;
pub mod conv;
pub mod flops;
pub mod ops;

pub use autograd::{autograd_enabled, no_grad};

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            _ => Err(Error::Format(format!("unknown dtype code {code}"))),
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Storage {
    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
            Storage::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
            Storage::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, n: usize) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(vec![0.0; n]),
            DType::F64 => Storage::F64(vec![0.0; n]),
            DType::U8 => Storage::U8(vec![0; n]),
        }
    }

    /// Elementwise accumulate; dtypes and lengths must match.
    pub(crate) fn add_assign(&mut self, other: &Storage) {
        match (self, other) {
            (Storage::F32(a), Storage::F32(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            (Storage::F64(a), Storage::F64(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            _ => panic!("grad accumulation dtype mismatch"),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
            Storage::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// Float element support: f32 and f64 share every kernel through this trait.
pub trait Float: Copy + PartialOrd + Send + Sync + 'static {
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn wrap(v: Vec<Self>) -> Storage;
    fn slice(s: &Storage) -> &[Self];
    fn slice_mut(s: &mut Storage) -> &mut [Self];
}

macro_rules! impl_float {
    ($t:ty, $dt:expr, $variant:ident) => {
        impl Float for $t {
            const DTYPE: DType = $dt;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn wrap(v: Vec<Self>) -> Storage {
                Storage::$variant(v)
            }
            fn slice(s: &Storage) -> &[Self] {
                match s {
                    Storage::$variant(v) => v,
                    other => panic!("expected {:?} storage, got {:?}", $dt, other.dtype()),
                }
            }
            fn slice_mut(s: &mut Storage) -> &mut [Self] {
                match s {
                    Storage::$variant(v) => v,
                    other => panic!("expected {:?} storage, got {:?}", $dt, other.dtype()),
                }
            }
        }
    };
}

impl_float!(f32, DType::F32, F32);
impl_float!(f64, DType::F64, F64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    pub parents: Vec<Tensor>,
    /// Maps the output gradient to per-parent gradient contributions
    /// (aligned with `parents`; `None` for non-differentiable inputs).
    pub backward: Box<dyn Fn(&Storage) -> Vec<Option<Storage>>>,
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Storage>,
    requires_grad: bool,
    grad: RefCell<Option<Storage>>,
    node: Option<Node>,
}

/// Cheap-to-clone tensor handle. Creation order doubles as topological
/// order on the tape: a node's parents always carry smaller ids.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Storage, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    pub fn new(shape: &[usize], data: Storage) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, data holds {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor::make(shape.to_vec(), data, false, None))
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Tensor::new(shape, Storage::F32(data))
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape, Storage::F64(data))
    }

    pub fn from_u8(shape: &[usize], data: Vec<u8>) -> Result<Tensor> {
        Tensor::new(shape, Storage::U8(data))
    }

    pub fn zeros(dtype: DType, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::make(shape.to_vec(), Storage::zeros(dtype, n), false, None)
    }

    pub fn full(dtype: DType, shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => Storage::F32(vec![value as f32; n]),
            DType::F64 => Storage::F64(vec![value; n]),
            DType::U8 => Storage::U8(vec![value as u8; n]),
        };
        Tensor::make(shape.to_vec(), data, false, None)
    }

    pub fn scalar(dtype: DType, value: f64) -> Tensor {
        Tensor::full(dtype, &[], value)
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: &[usize], data: Storage) -> Result<Tensor> {
        if data.dtype() == DType::U8 {
            return Err(Error::Config("u8 tensors never require grad".into()));
        }
        let t = Tensor::new(shape, data)?;
        // Rc not yet shared; safe to rebuild with the flag set.
        let inner = Rc::try_unwrap(t.inner).ok().expect("fresh tensor");
        Ok(Tensor {
            inner: Rc::new(Inner { requires_grad: true, ..inner }),
        })
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Storage, node: Option<Node>) -> Tensor {
        let on_tape = node.is_some();
        Tensor::make(shape, data, on_tape, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        self.inner.data.borrow().dtype()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn on_tape(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    pub fn data(&self) -> Ref<'_, Storage> {
        self.inner.data.borrow()
    }

    /// In-place mutation of the raw data (optimizer steps, test setup).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut Storage) -> R) -> R {
        f(&mut self.inner.data.borrow_mut())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().to_f64_vec()
    }

    pub fn grad(&self) -> Option<Storage> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_f64(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().as_ref().map(|g| g.to_f64_vec())
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_leaf_grad(&self, g: &Storage) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => existing.add_assign(g),
            None => *slot = Some(g.clone()),
        }
    }

    /// Detached copy of the data as a fresh leaf (no tape linkage).
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.inner.shape.clone(), self.inner.data.borrow().clone(), false, None)
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
    /// repeated calls until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        autograd::backward(self)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("dtype", &self.dtype())
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Shared check used by binary ops.
pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::shape(op, format!("dtypes {:?} vs {:?}", a.dtype(), b.dtype())));
    }
    Ok(())
}


/// Throughput probe hook for the inner dot kernel (used by examples).
#[doc(hidden)]
pub fn bench_dot(a: &[f32], b: &[f32]) -> f64 {
    kernels::dot_f64(a, b)
}

/// Second probe hook: identical loop, written inline (no trait calls).
#[doc(hidden)]
pub fn bench_dot_local(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    let main = n - n % 8;
    let mut acc = [0.0f64; 8];
    let mut i = 0;
    while i < main {
        let (xa, xb) = (&a[i..i + 8], &b[i..i + 8]);
        for j in 0..8 {
            acc[j] += xa[j] as f64 * xb[j] as f64;
        }
        i += 8;
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    while i < n {
        s += a[i] as f64 * b[i] as f64;
        i += 1;
    }
    s
}
