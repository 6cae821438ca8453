//! Dense row-major f64 tensors and the `FFT1` binary container.
//!
//! Tensors are plain immutable values; every public operation either returns
//! a finite result or fails with a shape/domain error. Broadcasting is
//! deliberately restricted to scalar-vs-tensor and identical shapes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of the tensor container format.
pub const FFT1_MAGIC: &[u8; 4] = b"FFT1";

/// Dense multi-dimensional array of f64, row-major. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("new", format!("zero extent in shape {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {:?} needs {} elements, got {}", shape, numel_of(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel_of(shape)] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![1.0; numel_of(shape)] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel_of(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a one-element tensor (rank 0 or any shape with numel 1).
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("expected 1 element, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_all_finite() {
            Ok(self)
        } else {
            Err(Error::domain(op, "non-finite result"))
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }.check_finite(op)
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Tensor { shape: self.shape.clone(), data }.check_finite(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data.iter().any(|&b| b == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.zip(other, "div", |a, b| a / b)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.map("add", |a| a + s)
    }

    pub fn sub_scalar(&self, s: f64) -> Result<Tensor> {
        self.map("sub", |a| a - s)
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Tensor> {
        self.map("mul", |a| a * s)
    }

    pub fn div_scalar(&self, s: f64) -> Result<Tensor> {
        if s == 0.0 {
            return Err(Error::domain("div", "division by zero"));
        }
        self.map("div", |a| a / s)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.map("neg", |a| -a)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.map("exp", f64::exp)
    }

    pub fn ln(&self) -> Result<Tensor> {
        if self.data.iter().any(|&a| a <= 0.0) {
            return Err(Error::domain("log", "log of non-positive value"));
        }
        self.map("log", f64::ln)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.map("tanh", f64::tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map("sigmoid", |a| 1.0 / (1.0 + (-a).exp()))
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("requires rank-2 operands, got {:?} and {:?}", self.shape, other.shape),
            ));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Tensor { shape: vec![m, n], data: out }.check_finite("matmul")
    }

    /// Sums over the given axes, removing them from the shape. Summing over
    /// every axis yields a rank-0 scalar.
    pub fn reduce_sum(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut keep = vec![true; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidAxis { axis: a, rank });
            }
            keep[a] = false;
        }
        let out_shape: Vec<usize> =
            self.shape.iter().zip(&keep).filter(|(_, &k)| k).map(|(&e, _)| e).collect();
        let mut out = vec![0.0; numel_of(&out_shape)];
        let strides = strides_of(&self.shape);
        let out_strides = strides_of(&out_shape);
        for (flat, &v) in self.data.iter().enumerate() {
            let mut out_flat = 0;
            let mut oi = 0;
            for d in 0..rank {
                if keep[d] {
                    let coord = (flat / strides[d]) % self.shape[d];
                    out_flat += coord * out_strides[oi];
                    oi += 1;
                }
            }
            out[out_flat] += v;
        }
        Ok(Tensor { shape: out_shape, data: out })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("requires rank 2, got {:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank
                || p.shape.iter().enumerate().any(|(d, &e)| d != axis && e != first.shape[d])
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {:?} vs {:?}", first.shape, p.shape),
                ));
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for p in parts {
                let mid = p.shape[axis];
                let start = o * mid * inner;
                out.extend_from_slice(&p.data[start..start + mid * inner]);
            }
        }
        Ok(Tensor { shape: out_shape, data: out })
    }

    /// Contiguous sub-range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        if start >= end || end > self.shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} out of bounds for extent {}", self.shape[axis]),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = end - start;
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&self.data[base..base + (end - start) * inner]);
        }
        Ok(Tensor { shape: out_shape, data: out })
    }

    /// Index selection along `axis`; indices may repeat.
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        if indices.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        let mid = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= mid) {
            return Err(Error::shape("gather", format!("index {bad} out of bounds for extent {mid}")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = indices.len();
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for &idx in indices {
                let base = (o * mid + idx) * inner;
                out.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        Ok(Tensor { shape: out_shape, data: out })
    }

    /// Adjoint of `gather`: accumulates rows of `self` (the upstream gradient)
    /// back into a zero tensor whose `axis` extent is `src_extent`.
    pub(crate) fn scatter_add(&self, axis: usize, indices: &[usize], src_extent: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        if self.shape[axis] != indices.len() {
            return Err(Error::shape(
                "scatter_add",
                format!("axis extent {} vs {} indices", self.shape[axis], indices.len()),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = src_extent;
        let mut out = vec![0.0; numel_of(&out_shape)];
        for o in 0..outer {
            for (t, &idx) in indices.iter().enumerate() {
                let src = (o * mid + t) * inner;
                let dst = (o * src_extent + idx) * inner;
                for i in 0..inner {
                    out[dst + i] += self.data[src + i];
                }
            }
        }
        Ok(Tensor { shape: out_shape, data: out })
    }

    /// Inverse of `reduce_sum` shape-wise: replicates `self` over the removed
    /// `axes` so the result has shape `full_shape`.
    pub(crate) fn broadcast_over_axes(&self, full_shape: &[usize], axes: &[usize]) -> Result<Tensor> {
        let rank = full_shape.len();
        let mut removed = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidAxis { axis: a, rank });
            }
            removed[a] = true;
        }
        let kept: Vec<usize> =
            full_shape.iter().zip(&removed).filter(|(_, &r)| !r).map(|(&e, _)| e).collect();
        if kept != self.shape {
            return Err(Error::shape(
                "broadcast_over_axes",
                format!("{:?} does not match kept extents {:?}", self.shape, kept),
            ));
        }
        let strides = strides_of(full_shape);
        let src_strides = strides_of(&kept);
        let mut out = vec![0.0; numel_of(full_shape)];
        for (flat, o) in out.iter_mut().enumerate() {
            let mut src_flat = 0;
            let mut si = 0;
            for d in 0..rank {
                if !removed[d] {
                    let coord = (flat / strides[d]) % full_shape[d];
                    src_flat += coord * src_strides[si];
                    si += 1;
                }
            }
            *o = self.data[src_flat];
        }
        Ok(Tensor { shape: full_shape.to_vec(), data: out })
    }

    // ── FFT1 container ──────────────────────────────────────────────

    /// Writes the tensor in the FFT1 container format: magic "FFT1",
    /// u32 rank, rank×u64 extents, then row-major little-endian f64 payload.
    pub fn write_fft1<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FFT1_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one FFT1 tensor from the stream, consuming exactly its bytes.
    pub fn read_fft1<R: Read>(r: &mut R, path: &str) -> Result<Tensor> {
        let corrupt = |detail: &str| Error::format(path, detail);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != FFT1_MAGIC {
            return Err(corrupt("bad magic, expected FFT1"));
        }
        let mut rank_buf = [0u8; 4];
        r.read_exact(&mut rank_buf).map_err(|_| corrupt("truncated rank"))?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        if rank > 8 {
            return Err(corrupt("implausible rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let mut ext = [0u8; 8];
            r.read_exact(&mut ext).map_err(|_| corrupt("truncated extents"))?;
            let e = u64::from_le_bytes(ext);
            if e == 0 || e > u32::MAX as u64 {
                return Err(corrupt("invalid extent"));
            }
            numel = numel
                .checked_mul(e as usize)
                .filter(|&n| n <= (1 << 34))
                .ok_or_else(|| corrupt("tensor too large"))?;
            shape.push(e as usize);
        }
        let mut data = vec![0.0; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| corrupt("truncated payload"))?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Tensor { shape, data })
    }

    pub fn save_fft1(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref()).map_err(|e| Error::file(&path, e))?;
        let mut f = std::io::BufWriter::new(f);
        self.write_fft1(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Loads a standalone FFT1 file; trailing bytes are rejected as corruption.
    pub fn load_fft1(path: impl AsRef<Path>) -> Result<Tensor> {
        let display = path.as_ref().display().to_string();
        let f = std::fs::File::open(path.as_ref()).map_err(|e| Error::file(&path, e))?;
        let mut f = std::io::BufReader::new(f);
        let t = Tensor::read_fft1(&mut f, &display)?;
        let mut probe = [0u8; 1];
        if f.read(&mut probe)? != 0 {
            return Err(Error::format(display, "trailing bytes after payload"));
        }
        Ok(t)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn log_exp_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        let t = Tensor::new(vec![64], x.clone()).unwrap();
        let back = t.exp().unwrap().ln().unwrap();
        for (a, b) in x.iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut rand_mat = || {
            let data: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![4, 4], data).unwrap()
        };
        let (a, b, c) = (rand_mat(), rand_mat(), rand_mat());
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            let rel = (l - r).abs() / l.abs().max(r.abs()).max(1.0);
            assert!(rel < 1e-12);
        }
    }

    #[test]
    fn elementwise_basic() {
        let a = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2], vec![4.0, 5.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), &[8.0, 15.0]);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(zero.exp().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn log_domain_error() {
        let a = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        assert!(matches!(a.ln(), Err(Error::Domain { .. })));
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(matches!(a.div(&b), Err(Error::Domain { .. })));
    }

    #[test]
    fn exp_overflow_is_domain_error() {
        let a = Tensor::new(vec![1], vec![1e6]).unwrap();
        assert!(matches!(a.exp(), Err(Error::Domain { .. })));
    }

    #[test]
    fn matmul_identity_and_example() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap(), a);
        let r = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_dim_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reduce_sum_axes() {
        let ones = Tensor::ones(&[2, 3]);
        assert_eq!(ones.reduce_sum(&[0, 1]).unwrap().item().unwrap(), 6.0);
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.reduce_sum(&[0]).unwrap().data(), &[4.0, 6.0]);
        // summing axis by axis agrees with summing both at once
        let two_step = a.reduce_sum(&[0]).unwrap().reduce_sum(&[0]).unwrap();
        assert_eq!(two_step.item().unwrap(), a.reduce_sum(&[0, 1]).unwrap().item().unwrap());
        assert!(matches!(a.reduce_sum(&[2]), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn slice_gather_concat() {
        let a = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(a.slice(1, 1, 3).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(a.gather(1, &[2, 0]).unwrap().data(), &[2.0, 0.0, 5.0, 3.0]);
        let l = a.slice(1, 0, 1).unwrap();
        let r = a.slice(1, 1, 3).unwrap();
        assert_eq!(Tensor::concat(1, &[&l, &r]).unwrap(), a);
    }

    #[test]
    fn scatter_add_is_gather_adjoint() {
        let g = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = g.scatter_add(1, &[2, 0], 3).unwrap();
        assert_eq!(s.data(), &[2.0, 0.0, 1.0, 4.0, 0.0, 3.0]);
        // repeated indices accumulate
        let s2 = g.scatter_add(1, &[1, 1], 2).unwrap();
        assert_eq!(s2.data(), &[0.0, 3.0, 0.0, 7.0]);
    }

    #[test]
    fn fft1_roundtrip() {
        let t = Tensor::new(vec![2, 1, 3], vec![0.5, -1.25, f64::MIN_POSITIVE, 3e100, 0.0, 7.0]).unwrap();
        let mut buf = Vec::new();
        t.write_fft1(&mut buf).unwrap();
        assert_eq!(&buf[..4], FFT1_MAGIC);
        let back = Tensor::read_fft1(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn fft1_truncated_and_bad_magic() {
        let t = Tensor::ones(&[4]);
        let mut buf = Vec::new();
        t.write_fft1(&mut buf).unwrap();
        let short = &buf[..buf.len() - 3];
        assert!(matches!(Tensor::read_fft1(&mut &short[..], "mem"), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_fft1(&mut bad.as_slice(), "mem"), Err(Error::Format { .. })));
    }
}
