use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Result, TapeError};

/// Sentinel index used by gather maps for "read a zero here" (padding).
pub const PAD: usize = usize::MAX;

/// Dense row-major `f64` array with an arbitrary shape.
///
/// The storage is reference counted, so cloning a tensor is cheap and two
/// clones always compare equal until one of them is rebuilt.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, &self.data[..])
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How a tensor of shape `source` maps onto the positions of `target`.
enum Layout {
    /// One element repeated everywhere.
    Scalar,
    /// `source` equals the trailing dims of `target`: offset `i % n`.
    Tile(usize),
    /// `source` equals the leading dims of `target`, padded with ones:
    /// offset `i / k`.
    Repeat(usize),
    General(Vec<usize>),
}

impl Layout {
    fn new(source: &[usize], target: &[usize]) -> Layout {
        let n = numel(source);
        let total = numel(target);
        if n == 1 {
            return Layout::Scalar;
        }
        let trimmed: &[usize] = {
            let lead = source.iter().take_while(|&&d| d == 1).count();
            &source[lead..]
        };
        if target.ends_with(trimmed) {
            return Layout::Tile(n);
        }
        let rank = target.len();
        if source.len() == rank {
            let keep = source.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
            if source[..keep] == target[..keep] {
                return Layout::Repeat(total / n);
            }
        }
        Layout::General(broadcast_offsets(source, target))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Layout::Scalar => 0,
            Layout::Tile(n) => i % n,
            Layout::Repeat(k) => i / k,
            Layout::General(o) => o[i],
        }
    }
}

/// For every position of `target`, the flat offset into a tensor of shape
/// `source` that broadcasts onto it.
fn broadcast_offsets(source: &[usize], target: &[usize]) -> Vec<usize> {
    let rank = target.len();
    let src_strides = strides(source);
    let mut eff = vec![0usize; rank];
    for i in 0..source.len() {
        let t = i + rank - source.len();
        eff[t] = if source[i] == 1 { 0 } else { src_strides[i] };
    }
    let n = numel(target);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < target[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TapeError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// A 1-D tensor.
    pub fn vector(values: &[f64]) -> Self {
        Self::from_parts(vec![values.len()], values.to_vec())
    }

    /// A 2-D tensor built from equally long rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TapeError::Shape("ragged matrix rows".into()));
        }
        Ok(Self::from_parts(vec![rows.len(), cols], rows.concat()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TapeError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self::from_parts(self.shape.clone(), data));
        }
        let out = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            TapeError::Shape(format!("cannot broadcast {:?} with {:?}", self.shape, other.shape))
        })?;
        let la = Layout::new(&self.shape, &out);
        let lb = Layout::new(&other.shape, &out);
        let data = (0..numel(&out)).map(|i| f(self.data[la.at(i)], other.data[lb.at(i)])).collect();
        Ok(Self::from_parts(out, data))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TapeError::Shape(format!(
                    "cannot broadcast {:?} to {:?}",
                    self.shape, shape
                )))
            }
        }
        let lay = Layout::new(&self.shape, shape);
        Ok(Self::from_parts(shape.to_vec(), (0..numel(shape)).map(|i| self.data[lay.at(i)]).collect()))
    }

    /// Sum over the axes that `shape` broadcasts along; inverse of `broadcast_to`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => {
                return Err(TapeError::Shape(format!(
                    "cannot sum {:?} down to {:?}",
                    self.shape, shape
                )))
            }
        }
        let lay = Layout::new(shape, &self.shape);
        let mut out = vec![0.0; numel(shape)];
        for (i, &v) in self.data.iter().enumerate() {
            out[lay.at(i)] += v;
        }
        Ok(Self::from_parts(shape.to_vec(), out))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => return Err(TapeError::Shape(format!("matmul lhs must be 2-D, got {:?}", self.shape))),
        };
        let n = match other.shape[..] {
            [k2, n] if k2 == k => n,
            _ => {
                return Err(TapeError::Shape(format!(
                    "matmul shapes {:?} x {:?} do not agree",
                    self.shape, other.shape
                )))
            }
        };
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `self * other^T` without materialising the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Self> {
        let (m, k, n) = match (&self.shape[..], &other.shape[..]) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TapeError::Shape(format!(
                    "matmul_t shapes {:?} x {:?}^T do not agree",
                    self.shape, other.shape
                )))
            }
        };
        let (a, b) = (&self.data, &other.data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `self^T * other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Self> {
        let (k, m, n) = match (&self.shape[..], &other.shape[..]) {
            ([k, m], [k2, n]) if k == k2 => (*k, *m, *n),
            _ => {
                return Err(TapeError::Shape(format!(
                    "t_matmul shapes {:?}^T x {:?} do not agree",
                    self.shape, other.shape
                )))
            }
        };
        let (a, b) = (&self.data, &other.data);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let av = a[p * m + i];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add_same(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TapeError::Shape(format!("cannot add {:?} and {:?}", self.shape, other.shape)));
        }
        Ok(Self::from_parts(self.shape.clone(), self.data.iter().zip(other.data.iter()).map(|(a, b)| a + b).collect()))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = match self.shape[..] {
            [m, n] => (m, n),
            _ => return Err(TapeError::Shape(format!("transpose needs 2-D, got {:?}", self.shape))),
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// `out[i] = self[index[i]]`, with [`PAD`] reading zero.
    pub fn gather(&self, index: &[usize], shape: &[usize]) -> Result<Self> {
        if numel(shape) != index.len() {
            return Err(TapeError::Shape(format!(
                "gather map of {} entries cannot fill {:?}",
                index.len(),
                shape
            )));
        }
        let n = self.data.len();
        let mut out = Vec::with_capacity(index.len());
        for &i in index {
            if i == PAD {
                out.push(0.0);
            } else if i < n {
                out.push(self.data[i]);
            } else {
                return Err(TapeError::Shape(format!("gather index {i} out of range {n}")));
            }
        }
        Ok(Self::from_parts(shape.to_vec(), out))
    }

    /// Adjoint of [`Tensor::gather`]: accumulates `self[i]` into `out[index[i]]`.
    pub fn scatter_add(&self, index: &[usize], shape: &[usize]) -> Result<Self> {
        if index.len() != self.data.len() {
            return Err(TapeError::Shape("scatter map length mismatch".into()));
        }
        let n = numel(shape);
        let mut out = vec![0.0; n];
        for (&i, &v) in index.iter().zip(self.data.iter()) {
            if i == PAD {
                continue;
            }
            if i >= n {
                return Err(TapeError::Shape(format!("scatter index {i} out of range {n}")));
            }
            out[i] += v;
        }
        Ok(Self::from_parts(shape.to_vec(), out))
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = *self.shape.first().ok_or_else(|| TapeError::Shape("slice of scalar".into()))?;
        if start > end || end > rows {
            return Err(TapeError::Shape(format!("row slice {start}..{end} of {rows}")));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_parts(shape, self.data[start * inner..end * inner].to_vec()))
    }

    /// Select rows (first-axis entries) by index, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| TapeError::Shape("select of scalar".into()))?;
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(TapeError::Shape(format!("row {r} out of range {n}")));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenate along the first axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TapeError::Shape("concat of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(TapeError::Shape(format!(
                    "concat shapes {:?} and {:?}",
                    first.shape, p.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self::from_parts(shape, data))
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bit patterns of the values, for exact comparisons and hashing.
    pub fn bits(&self) -> impl Iterator<Item = u64> + '_ {
        self.data.iter().map(|v| v.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[3, 1], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
    }

    #[test]
    fn sum_to_inverts_broadcast() {
        let row = Tensor::vector(&[1.0, 2.0, 3.0]);
        let big = row.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(big.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(big.sum_to(&[3]).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(big.sum_to(&[2, 1]).unwrap().data(), &[6.0, 6.0]);
        assert_eq!(big.sum_to(&[]).unwrap().item(), 12.0);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert_eq!(a.transpose().unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn gather_and_scatter_are_adjoint() {
        let x = Tensor::vector(&[1.0, 2.0, 3.0]);
        let idx = [2, PAD, 0, 2];
        let g = x.gather(&idx, &[4]).unwrap();
        assert_eq!(g.data(), &[3.0, 0.0, 1.0, 3.0]);
        let y = Tensor::vector(&[1.0, 1.0, 1.0, 1.0]);
        // <gather(x), y> == <x, scatter(y)>
        let lhs: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let s = y.scatter_add(&idx, &[3]).unwrap();
        let rhs: f64 = x.data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn bad_shape_is_an_error() {
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
        let a = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn serde_round_trip_is_bitwise() {
        let t = Tensor::vector(&[0.1, 1.0 / 3.0, -2.5e-300, f64::MIN_POSITIVE]);
        let s = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&s).unwrap();
        assert!(t.bits().eq(back.bits()));
    }
}
