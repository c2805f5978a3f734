//! Dense row-major `f64` tensors and the handful of kernels the pruners need.
//!
//! Everything here is single-threaded and uses a fixed summation order, so two
//! calls with equal inputs produce bit-identical outputs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// A named dense tensor. `data.len()` always equals the product of `shape`.
/// Equality compares shape and values; the name is a label only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        check_shape(&name, shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "tensor `{name}`: shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Result<Self> {
        Self::full(name, shape, 0.0)
    }

    pub fn full(name: impl Into<String>, shape: &[usize], value: f64) -> Result<Self> {
        let name = name.into();
        check_shape(&name, shape)?;
        let numel = shape.iter().product();
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    pub fn eye(name: impl Into<String>, n: usize) -> Result<Self> {
        let mut t = Self::zeros(name, &[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn from_rows(name: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(name, &[rows.len(), cols], data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(&self.name, shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape `{}` from {:?} to {shape:?}",
                self.name, self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::dim(format!(
                "`{}` expected rank 2, got shape {:?}",
                self.name, self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::dim(format!(
                "`{}` expected rank 3, got shape {:?}",
                self.name, self.shape
            ))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::dim(format!(
                "`{}` expected rank 4, got shape {:?}",
                self.name, self.shape
            ))),
        }
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(format!(
                "`{}` expected shape {shape:?}, got {:?}",
                self.name, self.shape
            )));
        }
        Ok(())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise op on `{}` {:?} and `{}` {:?}",
                self.name, self.shape, other.name, other.shape
            )));
        }
        Ok(Self {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0.0).count()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        let d = self.zip_with(other, |a, b| (a - b).abs())?;
        Ok(d.data.iter().copied().fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(self.name.clone(), &[n, m], out)
    }
}

fn check_shape(name: &str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::dim(format!(
            "tensor `{name}`: rank must be 1..={MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!(
            "tensor `{name}`: zero-sized dimension in {shape:?}"
        )));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`, summing over k in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dims differ: `{}` {:?} x `{}` {:?}",
            a.name, a.shape, b.name, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(format!("{}@{}", a.name, b.name), &[m, n], out)
}

/// Applies a `[out×in]` weight to `rows` row vectors of width `in`:
/// returns `x · wᵀ` laid out row-major as `rows×out`.
pub fn linear_rows(x: &[f64], rows: usize, w: &Tensor) -> Result<Vec<f64>> {
    let (out, inp) = w.dims2()?;
    if x.len() != rows * inp {
        return Err(Error::dim(format!(
            "linear `{}` expects width {inp}, input has {} values for {rows} rows",
            w.name,
            x.len()
        )));
    }
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            y[r * out + o] = dot(xr, w.row(o));
        }
    }
    Ok(y)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular `l` with `l·lᵀ = h`. Only the lower triangle of `h` is read.
pub fn cholesky(h: &Tensor) -> Result<Tensor> {
    let (n, n2) = h.dims2()?;
    if n != n2 {
        return Err(Error::dim(format!("cholesky of non-square {:?}", h.shape)));
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = h.data[j * n + j];
        for p in 0..j {
            diag -= l[j * n + p] * l[j * n + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Numerical(format!(
                "matrix `{}` is not positive definite (pivot {j} = {diag:e}); increase damping",
                h.name
            )));
        }
        let djj = diag.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = h.data[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / djj;
        }
    }
    Tensor::new(format!("chol({})", h.name), &[n, n], l)
}

fn cholesky_solve_in_place(l: &Tensor, col: &mut [f64]) {
    let n = col.len();
    for i in 0..n {
        let mut s = col[i];
        for p in 0..i {
            s -= l.data[i * n + p] * col[p];
        }
        col[i] = s / l.data[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = col[i];
        for p in i + 1..n {
            s -= l.data[p * n + i] * col[p];
        }
        col[i] = s / l.data[i * n + i];
    }
}

/// Solves `h·x = rhs` for symmetric positive-definite `h` via Cholesky.
pub fn spd_factor_solve(h: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    let (n, _) = h.dims2()?;
    let (rn, m) = match rhs.shape[..] {
        [r] => (r, 1),
        [r, c] => (r, c),
        _ => return Err(Error::dim("rhs must be rank 1 or 2")),
    };
    if rn != n {
        return Err(Error::dim(format!(
            "spd solve: matrix is {n}x{n}, rhs has {rn} rows"
        )));
    }
    let l = cholesky(h)?;
    let mut out = rhs.data.clone();
    let mut col = vec![0.0; n];
    for c in 0..m {
        for i in 0..n {
            col[i] = rhs.data[i * m + c];
        }
        cholesky_solve_in_place(&l, &mut col);
        for i in 0..n {
            out[i * m + c] = col[i];
        }
    }
    Tensor::new(format!("solve({})", h.name), &rhs.shape, out)
}

/// Full inverse of an SPD matrix.
pub fn spd_inverse(h: &Tensor) -> Result<Tensor> {
    let (n, _) = h.dims2()?;
    spd_factor_solve(h, &Tensor::eye("I", n)?).map(|t| t.with_name(format!("inv({})", h.name)))
}

/// Diagonal of `h⁻¹` from one factorization and `n` unit-vector solves.
pub fn spd_inverse_diag(h: &Tensor) -> Result<Vec<f64>> {
    let (n, _) = h.dims2()?;
    let l = cholesky(h)?;
    let mut col = vec![0.0; n];
    Ok((0..n)
        .map(|j| {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            cholesky_solve_in_place(&l, &mut col);
            col[j]
        })
        .collect())
}

/// Total order used for all tie-breaking: by value, then by lower index.
fn cmp_value_index(values: &[f64], a: usize, b: usize) -> Ordering {
    values[a].total_cmp(&values[b]).then(a.cmp(&b))
}

/// Indices of the `k` smallest values, smallest first; ties go to the lower index.
pub fn arg_smallest_k(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::arg(format!(
            "arg_smallest_k: k = {k} exceeds length {}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| cmp_value_index(values, a, b));
    idx.truncate(k);
    Ok(idx)
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn arg_largest_k(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::arg(format!(
            "arg_largest_k: k = {k} exceeds length {}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        let data = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new("r", &[m, n], data).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let a = random(rng, n, n);
        let mut h = matmul(&a, &a.transpose().unwrap()).unwrap();
        for i in 0..n {
            h.data[i * n + i] += 0.5;
        }
        h
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new("x", &[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new("x", &[2, 0], vec![]).is_err());
        assert!(Tensor::new("x", &[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new("x", &[], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Tensor::from_rows("m", &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i2 = Tensor::eye("i", 2).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap().data(), m.data());
        let v = Tensor::from_rows("v", &[vec![0.0], vec![1.0]]).unwrap();
        let p = matmul(&m, &v).unwrap();
        assert_eq!(p.shape(), &[2, 1]);
        assert_eq!(p.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros("a", &[2, 3]).unwrap();
        let b = Tensor::zeros("b", &[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(3, 3, 3), (1, 7, 2), (64, 64, 64), (17, 5, 33)] {
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let fast = matmul(&a, &b).unwrap();
            for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn spd_solve_small_cases() {
        let i = Tensor::eye("i", 3).unwrap();
        let v = Tensor::new("v", &[3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(spd_factor_solve(&i, &v).unwrap().data(), v.data());

        let h = Tensor::from_rows("h", &[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let rhs = Tensor::new("r", &[2, 1], vec![2.0, 4.0]).unwrap();
        let x = spd_factor_solve(&h, &rhs).unwrap();
        assert!(x.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn spd_solve_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let h = random_spd(&mut rng, 4);
            let rhs = random(&mut rng, 4, 3);
            let x = spd_factor_solve(&h, &rhs).unwrap();
            let r = matmul(&h, &x).unwrap();
            let scale = rhs.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(r.max_abs_diff(&rhs).unwrap() < 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn spd_solve_poorly_conditioned() {
        // condition number 1e6
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let diag: Vec<f64> = (0..n).map(|i| 10f64.powf(6.0 * i as f64 / (n - 1) as f64)).collect();
        let mut h = Tensor::zeros("h", &[n, n]).unwrap();
        for i in 0..n {
            h.set2(i, i, diag[i]);
        }
        let rhs = random(&mut rng, n, 1);
        let x = spd_factor_solve(&h, &rhs).unwrap();
        let r = matmul(&h, &x).unwrap();
        let scale = rhs.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(r.max_abs_diff(&rhs).unwrap() <= 1e-9 * scale);
    }

    #[test]
    fn inverse_diag_matches_full_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_spd(&mut rng, 5);
        let inv = spd_inverse(&h).unwrap();
        let d = spd_inverse_diag(&h).unwrap();
        for i in 0..5 {
            assert!((inv.get2(i, i) - d[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_spd_is_numerical_error() {
        let h = Tensor::from_rows("h", &[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let err = cholesky(&h).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("damping")));
    }

    #[test]
    fn arg_smallest_examples() {
        assert_eq!(arg_smallest_k(&[3.0, 1.0, 2.0], 1).unwrap(), vec![1]);
        assert_eq!(arg_smallest_k(&[5.0; 4], 2).unwrap(), vec![0, 1]);
        assert!(matches!(
            arg_smallest_k(&[1.0], 2),
            Err(Error::Argument(_))
        ));
        assert!(arg_smallest_k(&[1.0, 2.0], 0).unwrap().is_empty());
    }

    #[test]
    fn arg_smallest_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let v: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let mut sorted: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let expect: Vec<usize> = sorted.iter().take(16).map(|p| p.1).collect();
        assert_eq!(arg_smallest_k(&v, 16).unwrap(), expect);
    }

    proptest! {
        #[test]
        fn smallest_and_largest_partition(
            v in proptest::collection::vec(-1e3f64..1e3, 1..80),
            kfrac in 0.0f64..=1.0,
        ) {
            let n = v.len();
            let k = ((n as f64) * kfrac).floor() as usize;
            let mut distinct = v.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            prop_assume!(distinct.len() == n);
            let small = arg_smallest_k(&v, k).unwrap();
            let large = arg_largest_k(&v, n - k).unwrap();
            let mut all: Vec<usize> = small.iter().chain(&large).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
