//! Dense row-major `f64` tensors.
//!
//! Only what the normalization layers and the small MLP need: broadcasting
//! elementwise arithmetic, axis reductions (reduced axes are removed from the
//! result), 2D matrix products and a few constructors.

use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Dense tensor; `data.len() == shape.iter().product()` always holds.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Set of distinct dimension indices to reduce over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Axes(Vec<usize>);

impl Axes {
    pub fn new(axes: impl Into<Vec<usize>>) -> Self {
        Axes(axes.into())
    }

    /// Every axis except `keep`, for a tensor of the given rank.
    pub fn all_but(rank: usize, keep: usize) -> Self {
        Axes((0..rank).filter(|&a| a != keep).collect())
    }

    /// Per-feature reduction for `(batch, features)` or `(batch, channels, h, w)` inputs.
    pub fn per_feature(rank: usize) -> Self {
        Self::all_but(rank, 1)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, axis: usize) -> bool {
        self.0.contains(&axis)
    }

    /// Checks that the axes are distinct and each is `< rank`.
    pub fn validate(&self, rank: usize) -> Result<()> {
        for (i, &a) in self.0.iter().enumerate() {
            if a >= rank {
                return shape_err(format!("axis {a} out of range for rank {rank}"));
            }
            if self.0[..i].contains(&a) {
                return shape_err(format!("axis {a} repeated"));
            }
        }
        Ok(())
    }

    /// Shape left after removing these axes.
    pub fn reduced_shape(&self, shape: &[usize]) -> Vec<usize> {
        shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.contains(*i))
            .map(|(_, &d)| d)
            .collect()
    }

    /// Shape with these axes set to 1, for re-broadcasting a reduced result.
    pub fn kept_shape(&self, shape: &[usize]) -> Vec<usize> {
        shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if self.contains(i) { 1 } else { d })
            .collect()
    }

    /// Number of elements folded into each reduced entry.
    pub fn count(&self, shape: &[usize]) -> usize {
        self.0.iter().map(|&a| shape[a]).product()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes; size-1 extents stretch.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `target`, with 0 on stretched dims.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Walks a row-major multi-index over `shape`, yielding the offsets given by each stride set.
struct OffsetWalker<'a> {
    shape: &'a [usize],
    index: Vec<usize>,
}

impl<'a> OffsetWalker<'a> {
    fn new(shape: &'a [usize]) -> Self {
        OffsetWalker { shape, index: vec![0; shape.len()] }
    }

    /// Advance to the next index, updating each offset by its stride set.
    fn advance(&mut self, offsets: &mut [usize], stride_sets: &[&[usize]]) {
        for d in (0..self.shape.len()).rev() {
            self.index[d] += 1;
            for (o, s) in offsets.iter_mut().zip(stride_sets) {
                *o += s[d];
            }
            if self.index[d] < self.shape[d] {
                return;
            }
            for (o, s) in offsets.iter_mut().zip(stride_sets) {
                *o -= s[d] * self.shape[d];
            }
            self.index[d] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// 1D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len()], data: values.to_vec() }
    }

    /// 2D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return shape_err(format!("index rank {} for tensor of rank {}", index.len(), self.rank()));
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return shape_err(format!("index {index:?} out of bounds for {:?}", self.shape));
            }
            flat = flat * d + i;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let i = self.flat_index(index)?;
        self.data[i] = value;
        Ok(())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination with broadcasting.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        let shape = broadcast_shapes(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut offs = [0usize, 0usize];
        let mut walker = OffsetWalker::new(&shape);
        for _ in 0..n {
            data.push(f(self.data[offs[0]], other.data[offs[1]]));
            walker.advance(&mut offs, &[&sa, &sb]);
        }
        Ok(Tensor { shape, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map(f64::sqrt)
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clip bounds lo={lo} > hi={hi}")));
        }
        Ok(self.map(|v| v.clamp(lo, hi)))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if broadcast_shapes(&self.shape, shape)? != shape {
            return shape_err(format!("cannot broadcast {:?} to {shape:?}", self.shape));
        }
        Tensor::zeros(shape.to_vec()).zip_with(self, |_, b| b)
    }

    /// Sum over `axes`; reduced axes are removed.
    pub fn reduce_sum(&self, axes: &Axes) -> Result<Tensor> {
        axes.validate(self.rank())?;
        let out_shape = axes.reduced_shape(&self.shape);
        let kept = axes.kept_shape(&self.shape);
        let out_strides = broadcast_strides(&kept, &self.shape);
        let mut out = vec![0.0; kept.iter().product()];
        let mut offs = [0usize];
        let mut walker = OffsetWalker::new(&self.shape);
        for &v in &self.data {
            out[offs[0]] += v;
            walker.advance(&mut offs, &[&out_strides]);
        }
        Ok(Tensor { shape: out_shape, data: out })
    }

    /// Arithmetic mean over `axes`; reduced axes are removed.
    pub fn reduce_mean(&self, axes: &Axes) -> Result<Tensor> {
        axes.validate(self.rank())?;
        let m = axes.count(&self.shape) as f64;
        Ok(self.reduce_sum(axes)?.scale(1.0 / m))
    }

    /// Biased variance (divisor m) around a precomputed `mean` of the reduced shape.
    pub fn reduce_biased_var(&self, axes: &Axes, mean: &Tensor) -> Result<Tensor> {
        axes.validate(self.rank())?;
        let reduced = axes.reduced_shape(&self.shape);
        if mean.shape != reduced {
            return shape_err(format!("mean shape {:?}, expected {reduced:?}", mean.shape));
        }
        let mean = mean.reshape(axes.kept_shape(&self.shape))?;
        let sq = self.zip_with(&mean, |x, mu| (x - mu) * (x - mu))?;
        sq.reduce_mean(axes)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of `(m, k)` and `(k, n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return shape_err(format!("matmul {:?} x {:?}", self.shape, other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data })
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => shape_err(format!("expected rank 2, got {:?}", self.shape)),
        }
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let rows = *self.shape.first().ok_or_else(|| Error::Shape("rank-0 slice".into()))?;
        if start >= end || end > rows {
            return shape_err(format!("row range {start}..{end} of {rows}"));
        }
        let stride = self.data.len() / rows;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor { shape, data: self.data[start * stride..end * stride].to_vec() })
    }

    /// Gather rows of the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = *self.shape.first().ok_or_else(|| Error::Shape("rank-0 select".into()))?;
        if rows.is_empty() {
            return shape_err("empty row selection");
        }
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return shape_err(format!("row {r} out of bounds for {n}"));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return shape_err(format!("concat {:?} with {:?}", first.shape, p.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mean_examples() {
        let t = Tensor::vector(&[1.0, 2.0, 3.0]);
        let m = t.reduce_mean(&Axes::new([0])).unwrap();
        assert_eq!(m.shape(), &[] as &[usize]);
        assert_eq!(m.data(), &[2.0]);

        let c = Tensor::full([3, 2, 2], 1.5);
        for axes in [vec![0], vec![1, 2], vec![0, 1, 2]] {
            let m = c.reduce_mean(&Axes::new(axes)).unwrap();
            assert!(m.data().iter().all(|&v| v == 1.5));
        }

        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let m = t.reduce_mean(&Axes::new([0])).unwrap();
        // scalar loop oracle: column averages
        let mut oracle = [0.0; 2];
        for (j, o) in oracle.iter_mut().enumerate() {
            for i in 0..2 {
                *o += t.get(&[i, j]).unwrap() / 2.0;
            }
        }
        assert_eq!(m.data(), &oracle);
        assert_eq!(m.data(), &[2.0, 3.0]);
    }

    #[test]
    fn variance_examples() {
        let t = Tensor::vector(&[1.0, 2.0, 3.0]);
        let ax = Axes::new([0]);
        let mean = t.reduce_mean(&ax).unwrap();
        let v = t.reduce_biased_var(&ax, &mean).unwrap();
        assert!(close(v.data()[0], 2.0 / 3.0, 1e-15));

        let c = Tensor::full([4], -7.25);
        let v = c.reduce_biased_var(&ax, &c.reduce_mean(&ax).unwrap()).unwrap();
        assert_eq!(v.data(), &[0.0]);

        for a in [-3.0, 0.0, 11.5] {
            let t = Tensor::vector(&[a, a + 2.0]);
            let v = t.reduce_biased_var(&ax, &t.reduce_mean(&ax).unwrap()).unwrap();
            assert!(close(v.data()[0], 1.0, 1e-12));
        }
    }

    #[test]
    fn var_rejects_mismatched_mean() {
        let t = Tensor::zeros([3, 2]);
        let err = t.reduce_biased_var(&Axes::new([0]), &Tensor::zeros([3])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn invalid_axes_are_shape_errors() {
        let t = Tensor::zeros([2, 2]);
        assert!(matches!(t.reduce_mean(&Axes::new([2])), Err(Error::Shape(_))));
        assert!(matches!(t.reduce_mean(&Axes::new([0, 0])), Err(Error::Shape(_))));
    }

    #[test]
    fn clip_and_broadcast() {
        let lo = 1.0 / 3.0;
        assert_eq!(Tensor::scalar(5.0).clip(lo, 3.0).unwrap().data(), &[3.0]);
        assert_eq!(Tensor::scalar(0.9).clip(lo, 3.0).unwrap().data(), &[0.9]);
        assert!(Tensor::scalar(0.9).clip(2.0, 1.0).is_err());

        let row = Tensor::new([1, 2], vec![2.0, 3.0]).unwrap();
        let b = row.broadcast_to(&[4, 2]).unwrap();
        assert_eq!(b.shape(), &[4, 2]);
        assert_eq!(b.data(), &[2.0, 3.0, 2.0, 3.0, 2.0, 3.0, 2.0, 3.0]);
        assert!(row.broadcast_to(&[4, 3]).is_err());
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 2]);
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn bounds_checked_access() {
        let mut t = Tensor::zeros([2, 3]);
        t.set(&[1, 2], 4.0).unwrap();
        assert_eq!(t.get(&[1, 2]).unwrap(), 4.0);
        assert!(t.get(&[2, 0]).is_err());
        assert!(t.set(&[0, 3], 1.0).is_err());
        assert!(t.get(&[0]).is_err());
        assert!(Tensor::new([2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn matmul_matches_loops() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 3.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![0.0, -2.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[5.0, 2.0, 0.0, -5.5]);
        assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }

    #[test]
    fn rows_roundtrip() {
        let t = Tensor::new([4, 2], (0..8).map(f64::from).collect()).unwrap();
        let parts = [t.slice_rows(0, 1).unwrap(), t.slice_rows(1, 4).unwrap()];
        assert_eq!(Tensor::concat_rows(&parts).unwrap(), t);
        assert_eq!(t.select_rows(&[3, 0]).unwrap().data(), &[6.0, 7.0, 0.0, 1.0]);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (1usize..5, 1usize..4, 1usize..4, any::<u64>()).prop_map(|(a, b, c, seed)| {
            let mut rng = Rng::new(seed);
            rng.normal(&[a, b, c], 0.5, 2.0).unwrap()
        })
    }

    proptest! {
        #[test]
        fn var_equals_mean_sq_minus_sq_mean(t in arb_tensor(), which in 0usize..4) {
            let axes = [vec![0], vec![1], vec![0, 2], vec![0, 1, 2]][which].clone();
            let ax = Axes::new(axes);
            let mean = t.reduce_mean(&ax).unwrap();
            let var = t.reduce_biased_var(&ax, &mean).unwrap();
            let alt = t.map(|v| v * v).reduce_mean(&ax).unwrap().sub(&mean.map(|v| v * v)).unwrap();
            for (a, b) in var.data().iter().zip(alt.data()) {
                prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
                prop_assert!(*a >= 0.0);
            }
        }

        #[test]
        fn broadcast_then_mean_recovers(t in arb_tensor(), k in 1usize..6) {
            let mut shape = vec![k];
            shape.extend_from_slice(t.shape());
            let b = t.broadcast_to(&shape).unwrap();
            let back = b.reduce_mean(&Axes::new([0])).unwrap();
            prop_assert!(back.max_abs_diff(&t).unwrap() <= 1e-12);
        }

        #[test]
        fn ops_do_not_mutate_inputs(t in arb_tensor()) {
            let before = t.clone();
            let _ = t.add(&t).unwrap();
            let _ = t.reduce_mean(&Axes::new([1])).unwrap();
            let _ = t.clip(-1.0, 1.0).unwrap();
            prop_assert_eq!(before, t);
        }
    }
}
