//! Dense row-major `f64` tensors with shape-checked, bit-reproducible ops.
//!
//! Two invariants hold for every `Tensor` ever constructed:
//!
//! * all elements are finite (no NaN or infinity); constructors and ops that
//!   can overflow return [`TensorError::NonFinite`] instead of letting bad
//!   values propagate, and
//! * every reduction (matmul accumulation, sums, norms) runs in one fixed,
//!   documented order, so results are identical across runs and platforms
//!   for the same inputs.
//!
//! Kernel blocking (cache panels in the matmul family) partitions output
//! elements, never the order of additions into a single element, so tuning
//! panel sizes cannot change results.  There is no implicit broadcasting:
//! binary elementwise ops require exactly equal shapes.

use std::fmt;

/// Dimensions of a tensor.  Every dimension is at least 1 and the element
/// count fits in `usize`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    /// Builds a shape, rejecting zero-sized dimensions and element-count
    /// overflow.
    pub fn new(dims: &[usize]) -> Result<Self, TensorError> {
        if dims.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        let mut count: usize = 1;
        for &d in dims {
            if d == 0 {
                return Err(TensorError::ZeroDim { dims: dims.to_vec() });
            }
            count = count
                .checked_mul(d)
                .ok_or(TensorError::ElemCountOverflow { dims: dims.to_vec() })?;
        }
        Ok(Shape { dims: dims.to_vec() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Total number of elements (product of dimensions).
    pub fn elem_count(&self) -> usize {
        self.dims.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Errors from tensor construction and arithmetic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// A shape must have at least one dimension.
    EmptyShape,
    /// All dimensions must be at least 1.
    ZeroDim { dims: Vec<usize> },
    /// The product of dimensions overflows `usize`.
    ElemCountOverflow { dims: Vec<usize> },
    /// Provided data length does not match the shape's element count.
    DataLength { expected: usize, got: usize },
    /// Input data or a supplied scalar is NaN or infinite, or an op
    /// overflowed to a non-finite value.
    NonFinite { op: &'static str },
    /// Binary elementwise op on tensors of different shapes.
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    /// Matrix op applied to a tensor that is not 2-D.
    NotMatrix { op: &'static str, shape: Shape },
    /// Matrix product inner dimensions disagree.
    InnerDim {
        left: Shape,
        right: Shape,
    },
    /// Reduction axis out of range for the tensor's rank.
    InvalidAxis { axis: usize, ndim: usize },
    /// Reshape target has a different element count.
    ReshapeCount {
        from: Shape,
        to: Vec<usize>,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::EmptyShape => write!(f, "shape must have at least one dimension"),
            TensorError::ZeroDim { dims } => {
                write!(f, "shape {dims:?} contains a zero dimension")
            }
            TensorError::ElemCountOverflow { dims } => {
                write!(f, "element count of shape {dims:?} overflows usize")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape element count {expected}")
            }
            TensorError::NonFinite { op } => {
                write!(f, "non-finite value in {op}")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shapes {left} and {right} differ")
            }
            TensorError::NotMatrix { op, shape } => {
                write!(f, "{op}: expected a 2-D tensor, got shape {shape}")
            }
            TensorError::InnerDim { left, right } => {
                write!(f, "matmul: inner dimensions of {left} and {right} disagree")
            }
            TensorError::InvalidAxis { axis, ndim } => {
                write!(f, "axis {axis} out of range for {ndim}-D tensor")
            }
            TensorError::ReshapeCount { from, to } => {
                write!(f, "cannot reshape {from} to {to:?}: element counts differ")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data, validating length and
    /// finiteness.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != shape.elem_count() {
            return Err(TensorError::DataLength {
                expected: shape.elem_count(),
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor construction" });
        }
        Ok(Tensor { shape, data })
    }

    /// Convenience constructor from a dimension list.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(Shape::new(dims)?, data)
    }

    /// All-zeros tensor.
    pub fn zeros(shape: Shape) -> Self {
        let n = shape.elem_count();
        Tensor { shape, data: vec![0.0; n] }
    }

    /// Constant-filled tensor; the fill value must be finite.
    pub fn filled(shape: Shape, value: f64) -> Result<Self, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "filled" });
        }
        let n = shape.elem_count();
        Ok(Tensor { shape, data: vec![value; n] })
    }

    /// Internal constructor for data already known to be finite and of the
    /// right length (e.g. copies out of an existing tensor).  Checked in
    /// debug builds only.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.elem_count());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn elem_count(&self) -> usize {
        self.shape.elem_count()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Element at a full multi-index (row-major).  Panics on out-of-range
    /// indices; intended for small-scale inspection and tests.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.ndim(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(self.shape.dims()).enumerate() {
            assert!(ix < d, "index {ix} out of range for axis {i} (size {d})");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(self, dims: &[usize]) -> Result<Self, TensorError> {
        let new_shape = Shape::new(dims)?;
        if new_shape.elem_count() != self.shape.elem_count() {
            return Err(TensorError::ReshapeCount {
                from: self.shape,
                to: dims.to_vec(),
            });
        }
        Ok(Tensor { shape: new_shape, data: self.data })
    }

    fn as_2d(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.dims() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::NotMatrix { op, shape: self.shape.clone() }),
        }
    }

    fn elementwise(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(rhs, "add", |a, b| a + b)
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(rhs, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(rhs, "mul", |a, b| a * b)
    }

    /// Multiplies every element by a finite scalar.
    pub fn scale(&self, s: f64) -> Result<Tensor, TensorError> {
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let data: Vec<f64> = self.data.iter().map(|&a| a * s).collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise `max(x, 0)`.  Cannot overflow, so it never fails.
    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// Elementwise indicator `1 if x > 0 else 0` (the subgradient of `relu`
    /// with value 0 taken at the kink).
    pub fn relu_grad(&self) -> Tensor {
        let data = self.data.iter().map(|&a| if a > 0.0 { 1.0 } else { 0.0 }).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// Sum of all elements, accumulated in ascending flat-index order.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Sum of squared elements, ascending flat-index order.
    pub fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v * v;
        }
        acc
    }

    fn reduce_axis_layout(&self, axis: usize) -> Result<(usize, usize, usize, Shape), TensorError> {
        let ndim = self.shape.ndim();
        if axis >= ndim {
            return Err(TensorError::InvalidAxis { axis, ndim });
        }
        let dims = self.shape.dims();
        let outer: usize = dims[..axis].iter().product();
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let reduced: Vec<usize> = dims[..axis]
            .iter()
            .chain(&dims[axis + 1..])
            .copied()
            .collect();
        // Reducing the only axis of a 1-D tensor leaves a scalar, kept as [1].
        let shape = if reduced.is_empty() { Shape::new(&[1])? } else { Shape::new(&reduced)? };
        Ok((outer, len, inner, shape))
    }

    /// Sums along `axis`, ascending index order along the reduced axis.
    /// Reducing a 1-D tensor yields shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        let (outer, len, inner, shape) = self.reduce_axis_layout(axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "sum_axis" });
        }
        Ok(Tensor { shape, data: out })
    }

    /// Maximum along `axis`.  Reducing a 1-D tensor yields shape `[1]`.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        let (outer, len, inner, shape) = self.reduce_axis_layout(axis)?;
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    if s > *d {
                        *d = s;
                    }
                }
            }
        }
        Ok(Tensor { shape, data: out })
    }

    /// Index of the maximum along `axis`; ties resolve to the lowest index.
    /// Returned indices are laid out row-major over the reduced shape.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>, TensorError> {
        let (outer, len, inner, _) = self.reduce_axis_layout(axis)?;
        let mut out = vec![0usize; outer * inner];
        let mut best = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for i in 0..inner {
                    let v = src[i];
                    // Strict > keeps the lowest index on ties.
                    if v > best[o * inner + i] {
                        best[o * inner + i] = v;
                        out[o * inner + i] = a;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Index of the maximum element over the flattened data; ties resolve to
    /// the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = f64::NEG_INFINITY;
        let mut at = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > best {
                best = v;
                at = i;
            }
        }
        at
    }

    /// Matrix product of two 2-D tensors.
    ///
    /// Accumulation order for each output element is ascending over the inner
    /// dimension, identical to the naive three-loop product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.matmul_bias(rhs, None)
    }

    /// `self · rhs` with an optional bias row added to every output row
    /// before accumulation (bias first, then ascending-k products).
    pub fn matmul_bias(&self, rhs: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, TensorError> {
        let (m, k) = self.as_2d("matmul")?;
        let (k2, n) = rhs.as_2d("matmul")?;
        if k != k2 {
            return Err(TensorError::InnerDim {
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        if let Some(b) = bias {
            if b.dims() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul bias",
                    left: Shape::new(&[n]).expect("n >= 1"),
                    right: b.shape.clone(),
                });
            }
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = bias {
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(&b.data);
            }
        }
        matmul_into(&self.data, m, k, &rhs.data, n, &mut out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "matmul" });
        }
        Ok(Tensor { shape: Shape::new(&[m, n]).expect("checked dims"), data: out })
    }

    /// `selfᵀ · rhs` for 2-D tensors sharing their first (row) dimension.
    /// Used for weight gradients; accumulation is ascending over rows.
    pub(crate) fn matmul_at_b(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (r, m) = self.as_2d("matmul_at_b")?;
        let (r2, n) = rhs.as_2d("matmul_at_b")?;
        if r != r2 {
            return Err(TensorError::InnerDim {
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_at_b_into(&self.data, r, m, &rhs.data, n, &mut out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "matmul_at_b" });
        }
        Ok(Tensor { shape: Shape::new(&[m, n]).expect("checked dims"), data: out })
    }

    /// `self · rhsᵀ` for 2-D tensors sharing their second (column) dimension.
    /// Used for input gradients; each output element is a lane-split dot
    /// product of two contiguous rows (fixed four-accumulator order).
    pub(crate) fn matmul_a_bt(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.as_2d("matmul_a_bt")?;
        let (n, k2) = rhs.as_2d("matmul_a_bt")?;
        if k != k2 {
            return Err(TensorError::InnerDim {
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_a_bt_into(&self.data, m, k, &rhs.data, n, &mut out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "matmul_a_bt" });
        }
        Ok(Tensor { shape: Shape::new(&[m, n]).expect("checked dims"), data: out })
    }
}

/// `out += a · b` over row-major slices, `a` is `m×k`, `b` is `k×n`.
///
/// The i-k-j loop order with k panels keeps a panel of `b` cache-resident;
/// per output element the adds still happen in ascending-k order, so panel
/// size never affects the result.  Exact-zero `a` entries are skipped: with
/// finite inputs their products are exact zeros, which cannot change a
/// finite accumulator, and dropout makes such zeros common.
fn matmul_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    const K_PANEL: usize = 128;
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + K_PANEL).min(k);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut out[i * n..(i + 1) * n];
            for kk in k0..k1 {
                let aik = arow[kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += aik * bv;
                }
            }
        }
        k0 = k1;
    }
}

/// `out += aᵀ · b` where `a` is `r×m`, `b` is `r×n`, out `m×n`.  Row-major
/// friendly: for each input row pair, scaled rows of `b` accumulate into the
/// output; per output element the order is ascending over `r`.
fn matmul_at_b_into(a: &[f64], r: usize, m: usize, b: &[f64], n: usize, out: &mut [f64]) {
    const P_PANEL: usize = 64;
    let mut p0 = 0;
    while p0 < m {
        let p1 = (p0 + P_PANEL).min(m);
        for rr in 0..r {
            let arow = &a[rr * m..(rr + 1) * m];
            let brow = &b[rr * n..(rr + 1) * n];
            for p in p0..p1 {
                let c = arow[p];
                if c == 0.0 {
                    continue;
                }
                let crow = &mut out[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += c * bv;
                }
            }
        }
        p0 = p1;
    }
}

/// `out = a · bᵀ` where `a` is `m×k`, `b` is `n×k`, out `m×n`.  Both row
/// operands are contiguous, so each element is a dot product; panels over
/// `b` rows keep them cache-resident.
fn matmul_a_bt_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    const P_PANEL: usize = 64;
    let mut p0 = 0;
    while p0 < n {
        let p1 = (p0 + P_PANEL).min(n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for p in p0..p1 {
                orow[p] = dot(arow, &b[p * k..(p + 1) * k]);
            }
        }
        p0 = p1;
    }
}

/// Dot product in a fixed lane-split order: four independent accumulators
/// over 4-element chunks (enabling SIMD), combined as `(l0+l1)+(l2+l3)`,
/// then the remainder tail in ascending order.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut lanes = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let xi = &x[c * 4..c * 4 + 4];
        let yi = &y[c * 4..c * 4 + 4];
        for l in 0..4 {
            lanes[l] += xi[l] * yi[l];
        }
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for i in chunks * 4..x.len() {
        acc += x[i] * y[i];
    }
    acc
}
