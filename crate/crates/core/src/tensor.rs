//! Dense row-major tensors with manual forward/backward kernels.
//!
//! Arithmetic is always carried out in `f64`. [`StorageWidth`] records the
//! width a real mixed-precision implementation would store the tensor at and
//! is used only for byte accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StorageWidth {
    /// 8 bytes.
    Wide,
    /// 4 bytes.
    Single,
    /// 2 bytes.
    Half,
}

impl StorageWidth {
    pub fn bytes(self) -> u64 {
        match self {
            StorageWidth::Wide => 8,
            StorageWidth::Single => 4,
            StorageWidth::Half => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    width: StorageWidth,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, width: StorageWidth) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, width })
    }

    pub fn zeros(shape: Vec<usize>, width: StorageWidth) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
            width,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>, width: StorageWidth) -> Result<Self> {
        Self::new(vec![rows, cols], data, width)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn width(&self) -> StorageWidth {
        self.width
    }

    pub fn with_width(mut self, width: StorageWidth) -> Self {
        self.width = width;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Accounted size in bytes.
    pub fn bytes(&self) -> u64 {
        self.data.len() as u64 * self.width.bytes()
    }

    /// Row count of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= factor);
        self
    }

    /// Contiguous block of rows `[start, end)`.
    pub fn row_range(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.rows() || self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "row range {start}..{end} of shape {:?}",
                self.shape
            )));
        }
        let c = self.cols();
        Tensor::matrix(end - start, c, self.data[start * c..end * c].to_vec(), self.width)
    }

    /// Gathers the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
            width: self.width,
        }
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(parts: &[Tensor], cols: usize, width: StorageWidth) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols && !p.is_empty() {
                return Err(Error::shape(format!("cannot stack {:?} into {cols} columns", p.shape)));
            }
            rows += p.len() / cols.max(1);
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, cols, data, width)
    }

    /// Columns `[start, end)` of a matrix, or elements of a vector.
    pub fn column_range(&self, start: usize, end: usize) -> Result<Tensor> {
        let c = self.cols();
        if start > end || end > c {
            return Err(Error::shape(format!(
                "column range {start}..{end} of shape {:?}",
                self.shape
            )));
        }
        let r = self.rows();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        let shape = if self.shape.len() == 2 {
            vec![r, end - start]
        } else {
            vec![end - start]
        };
        Tensor::new(shape, data, self.width)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        max_abs_diff(&self.data, &other.data)
    }

    /// Sum over rows, giving one value per column.
    pub fn column_sums(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for i in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![c],
            data: out,
            width: self.width,
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn expect_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(format!("{what} must be a matrix, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a · b`, accumulating each output over the inner dimension in order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_matrix(a, "lhs")?;
    let (k2, n) = expect_matrix(b, "rhs")?;
    if k != k2 {
        return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out, a.width)
}

/// `aᵀ · b`, accumulating over rows of `a` in order.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_matrix(a, "lhs")?;
    let (m2, n) = expect_matrix(b, "rhs")?;
    if m != m2 {
        return Err(Error::shape(format!("matmul_tn {m}x{k}ᵀ by {m2}x{n}")));
    }
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b.data[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(k, n, out, b.width)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_matrix(a, "lhs")?;
    let (n, k2) = expect_matrix(b, "rhs")?;
    if k != k2 {
        return Err(Error::shape(format!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::matrix(m, n, out, a.width)
}

fn add_bias(y: &mut Tensor, b: &Tensor) -> Result<()> {
    let n = y.cols();
    if b.len() != n {
        return Err(Error::shape(format!("bias of {} for {n} columns", b.len())));
    }
    for row in y.data.chunks_mut(n.max(1)) {
        for (v, bv) in row.iter_mut().zip(&b.data) {
            *v += bv;
        }
    }
    Ok(())
}

/// Which slice of a full parameter a rank holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Partition {
    Replicated,
    Column { shard: usize, of: usize },
    Row { shard: usize, of: usize },
}

impl Partition {
    /// Extracts this partition from the full tensor.
    pub fn slice(&self, full: &Tensor) -> Result<Tensor> {
        match *self {
            Partition::Replicated => Ok(full.clone()),
            Partition::Column { shard, of } => {
                let c = full.cols();
                check_split(c, shard, of)?;
                let w = c / of;
                full.column_range(shard * w, (shard + 1) * w)
            }
            Partition::Row { shard, of } => {
                if full.shape.len() != 2 {
                    return Err(Error::shape("row partition of a vector".to_string()));
                }
                let r = full.rows();
                check_split(r, shard, of)?;
                let h = r / of;
                full.row_range(shard * h, (shard + 1) * h)
            }
        }
    }
}

fn check_split(extent: usize, shard: usize, of: usize) -> Result<()> {
    if of == 0 || shard >= of || !extent.is_multiple_of(of) {
        return Err(Error::shape(format!(
            "cannot take shard {shard} of {of} from extent {extent}"
        )));
    }
    Ok(())
}

/// Generates the full tensor for `seed` with a portable generator, then
/// returns the requested partition. Values are uniform in `[-1, 1)`.
pub fn seeded_init(shape: &[usize], seed: u64, partition: Partition, width: StorageWidth) -> Result<Tensor> {
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let full = Tensor::new(shape.to_vec(), data, width)?;
    partition.slice(&full)
}

/// A trainable tensor, its gradient and the slice of the full tensor it holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub partition: Partition,
}

impl Parameter {
    pub fn new(value: Tensor, partition: Partition) -> Self {
        let grad = Tensor::zeros(value.shape.clone(), value.width);
        Self {
            value,
            grad,
            partition,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.add_assign(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

/// `y = x·W + b`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    if let Some(b) = b {
        add_bias(&mut y, b)?;
    }
    Ok(y)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<LinearGrads> {
    Ok(LinearGrads {
        dx: matmul_nt(dy, w)?,
        dw: matmul_tn(x, dy)?,
        db: dy.column_sums(),
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data.iter_mut() {
        let u = *v;
        *v = 0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh());
    }
    y
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape != dy.shape {
        return Err(Error::shape(format!("gelu grad {:?} vs {:?}", dy.shape, x.shape)));
    }
    let mut dx = dy.clone();
    for (g, &u) in dx.data.iter_mut().zip(&x.data) {
        let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
        let d = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u);
        *g *= d;
    }
    Ok(dx)
}

/// All-reduce over the tensor-parallel group of the calling rank.
pub trait TensorReduce {
    fn degree(&self) -> usize;
    fn all_reduce(&mut self, buf: Vec<f64>, width: StorageWidth) -> Result<Vec<f64>>;
}

/// Degree-one group: reductions are the identity and nothing is sent.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalReduce;

impl TensorReduce for LocalReduce {
    fn degree(&self) -> usize {
        1
    }

    fn all_reduce(&mut self, buf: Vec<f64>, _width: StorageWidth) -> Result<Vec<f64>> {
        Ok(buf)
    }
}

fn reduce_tensor(comm: &mut dyn TensorReduce, t: Tensor) -> Result<Tensor> {
    if comm.degree() == 1 {
        return Ok(t);
    }
    let shape = t.shape.clone();
    let width = t.width;
    let data = comm.all_reduce(t.data, width)?;
    Tensor::new(shape, data, width)
}

/// Forward of a column-parallel linear layer: each rank multiplies the full
/// input by its column shard. No communication.
pub fn column_parallel_forward(x_full: &Tensor, w_shard: &Tensor, b_shard: Option<&Tensor>) -> Result<Tensor> {
    linear_forward(x_full, w_shard, b_shard)
}

/// Backward of a column-parallel linear layer. The partial input gradients
/// are summed over the tensor group.
pub fn column_parallel_backward(
    comm: &mut dyn TensorReduce,
    x_full: &Tensor,
    w_shard: &Tensor,
    dy_shard: &Tensor,
) -> Result<LinearGrads> {
    let mut g = linear_backward(x_full, w_shard, dy_shard)?;
    g.dx = reduce_tensor(comm, g.dx)?;
    Ok(g)
}

/// Forward of a row-parallel linear layer. Partial products are summed over
/// the tensor group; the (replicated) bias is added after the reduction.
pub fn row_parallel_forward(
    comm: &mut dyn TensorReduce,
    x_shard: &Tensor,
    w_shard: &Tensor,
    b: Option<&Tensor>,
) -> Result<Tensor> {
    let partial = matmul(x_shard, w_shard)?;
    let mut y = reduce_tensor(comm, partial)?;
    if let Some(b) = b {
        add_bias(&mut y, b)?;
    }
    Ok(y)
}

/// Backward of a row-parallel linear layer; purely local.
pub fn row_parallel_backward(x_shard: &Tensor, w_shard: &Tensor, dy: &Tensor) -> Result<LinearGrads> {
    linear_backward(x_shard, w_shard, dy)
}
