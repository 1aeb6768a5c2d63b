//! Dense row-major tensors, the handful of differentiable primitives the
//! segmentation model needs, and a central-difference gradient checker.
//!
//! The class (or feature) dimension is always the last axis.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: extents must match the payload and every value
    /// must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self::from_raw(shape, data)?;
        if let Some(pos) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {pos}")));
        }
        Ok(t)
    }

    /// Shape-checked constructor that skips the finiteness scan.
    pub fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = checked_len(&shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Extent of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.data.len() / d
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if checked_len(&shape)? != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} += {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_raw(vec![n, m], out)
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::ShapeMismatch(format!("expected a matrix, got shape {s:?}"))),
        }
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::DimensionOverflow(format!("{shape:?}")))
    })
}

/// A value paired with its accumulated cotangent.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor {
    pub value: Tensor,
    pub grad: Tensor,
}

impl DualTensor {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// `c += a · b` on raw row-major slices, `a` is m×k and `b` is k×n.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += aᵀ · b`, `a` is m×k, `b` is m×n, `c` is k×n.
pub(crate) fn gemm_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let cp = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in cp.iter_mut().zip(bi) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += a · bᵀ`, `a` is m×n, `b` is k×n, `c` is m×k.
pub(crate) fn gemm_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            c[i * k + p] += ai.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let mut c = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut c, m, k, n);
    Tensor::from_raw(vec![m, n], c)
}

/// Cotangents of `C = A·B`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    let (m2, n2) = dc.dims2()?;
    if k != k2 || m != m2 || n != n2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul backward {m}x{k}, {k2}x{n}, upstream {m2}x{n2}"
        )));
    }
    let mut da = vec![0.0; m * k];
    gemm_a_bt_acc(&dc.data, &b.data, &mut da, m, n, k);
    let mut db = vec![0.0; k * n];
    gemm_at_b_acc(&a.data, &dc.data, &mut db, m, k, n);
    Ok((Tensor::from_raw(vec![m, k], da)?, Tensor::from_raw(vec![k, n], db)?))
}

/// Max-subtracted softmax of one row, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.shape());
    let d = logits.last_dim();
    if d > 0 {
        for (src, dst) in logits.data.chunks(d).zip(out.data.chunks_mut(d)) {
            softmax_into(src, dst);
        }
    }
    out
}

/// Pull a cotangent on softmax outputs back to the logits of one row.
pub fn softmax_backward_row(probs: &[f64], dprobs: &[f64], dlogits: &mut [f64]) {
    let dot: f64 = probs.iter().zip(dprobs).map(|(p, g)| p * g).sum();
    for ((dz, &p), &g) in dlogits.iter_mut().zip(probs).zip(dprobs) {
        *dz = p * (g - dot);
    }
}

fn check_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, fin) = x.dims2()?;
    let (fin2, fout) = w.dims2()?;
    if fin != fin2 || b.shape() != [fout] {
        return Err(Error::ShapeMismatch(format!(
            "affine x {n}x{fin}, W {fin2}x{fout}, b {:?}",
            b.shape()
        )));
    }
    Ok((n, fin, fout))
}

/// `y = x·W + b`.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, fin, fout) = check_affine(x, w, b)?;
    let mut y = Vec::with_capacity(n * fout);
    for _ in 0..n {
        y.extend_from_slice(&b.data);
    }
    gemm_acc(&x.data, &w.data, &mut y, n, fin, fout);
    Tensor::from_raw(vec![n, fout], y)
}

/// `y = max(0, x·W + b)`.
pub fn relu_affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = affine_forward(x, w, b)?;
    for v in y.data.iter_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct AffineGrads {
    /// `None` when the caller did not ask for the input cotangent.
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

/// Backward of [`affine_forward`].
pub fn affine_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    want_dx: bool,
) -> Result<AffineGrads> {
    let (n, fin) = x.dims2()?;
    let (fin2, fout) = w.dims2()?;
    let (n2, fout2) = dy.dims2()?;
    if fin != fin2 || n != n2 || fout != fout2 {
        return Err(Error::ShapeMismatch(format!(
            "affine backward x {n}x{fin}, W {fin2}x{fout}, dy {n2}x{fout2}"
        )));
    }
    let mut dw = vec![0.0; fin * fout];
    gemm_at_b_acc(&x.data, &dy.data, &mut dw, n, fin, fout);
    let mut db = vec![0.0; fout];
    for row in dy.data.chunks(fout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let dx = if want_dx {
        let mut dx = vec![0.0; n * fin];
        gemm_a_bt_acc(&dy.data, &w.data, &mut dx, n, fout, fin);
        Some(Tensor::from_raw(vec![n, fin], dx)?)
    } else {
        None
    };
    Ok(AffineGrads {
        dx,
        dw: Tensor::from_raw(vec![fin, fout], dw)?,
        db: Tensor::from_raw(vec![fout], db)?,
    })
}

/// Backward of [`relu_affine_forward`] given its output `y`. The subgradient
/// at a zero pre-activation is zero, so `y == 0` masks the upstream signal.
pub fn relu_affine_backward(
    x: &Tensor,
    w: &Tensor,
    y: &Tensor,
    dy: &Tensor,
    want_dx: bool,
) -> Result<AffineGrads> {
    if y.shape() != dy.shape() {
        return Err(Error::ShapeMismatch(format!(
            "relu output {:?} vs upstream {:?}",
            y.shape(),
            dy.shape()
        )));
    }
    let mut masked = dy.clone();
    for (g, &a) in masked.data.iter_mut().zip(&y.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    affine_backward(x, w, &masked, want_dx)
}

#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Compare an analytic gradient against central differences of `loss`.
///
/// The error for coordinate `i` is `|g_a − g_fd| / max(1, |g_fd|)`.
pub fn fd_check<F>(mut loss: F, analytic: &[f64], theta: &[f64], h: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != theta.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries, parameters {}",
            analytic.len(),
            theta.len()
        )));
    }
    let mut probe = theta.to_vec();
    let mut report = FdReport { max_rel_err: 0.0, worst_index: 0 };
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = loss(&probe);
        probe[i] = theta[i] - h;
        let down = loss(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        if err > report.max_rel_err {
            report = FdReport { max_rel_err: err, worst_index: i };
        }
    }
    Ok(report)
}

/// Offset every coordinate by a uniform draw in `[-scale, scale]`, moving the
/// probe point off measure-zero kinks.
pub fn jitter<R: Rng>(theta: &mut [f64], rng: &mut R, scale: f64) {
    for t in theta.iter_mut() {
        *t += rng.gen_range(-scale..=scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![0.0; 3]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(Tensor::new(vec![1], vec![f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(
            Tensor::new(vec![usize::MAX, 4], vec![]),
            Err(Error::DimensionOverflow(_))
        ));
    }

    #[test]
    fn matmul_examples() {
        let b = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let c = matmul(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &t(&[2, 1], &[5.0, 6.0])).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
        let z = matmul(&Tensor::zeros(&[2, 2]), &b).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matmul(&b, &b).is_err());
    }

    #[test]
    fn matmul_associative_with_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = random(&mut rng, &[4, 4]);
            let b = random(&mut rng, &[4, 4]);
            let c = random(&mut rng, &[4, 4]);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-10);
            let ai = matmul(&a, &Tensor::identity(4)).unwrap();
            assert!(ai.max_abs_diff(&a) < 1e-10);
        }
    }

    #[test]
    fn matmul_backward_matches_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let dc = random(&mut rng, &[3, 2]);
        let (da, db) = matmul_backward(&a, &b, &dc).unwrap();
        let da_ref = matmul(&dc, &b.transpose().unwrap()).unwrap();
        let db_ref = matmul(&a.transpose().unwrap(), &dc).unwrap();
        assert!(da.max_abs_diff(&da_ref) < 1e-14);
        assert!(db.max_abs_diff(&db_ref) < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[3], &[0.0, 0.0, 0.0]));
        for v in s.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&t(&[2], &[0.0, -1.0]));
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert_abs_diff_eq!(s.data()[0], oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[0], 0.73106, epsilon = 1e-4);
        assert_abs_diff_eq!(s.data()[1], 0.26894, epsilon = 1e-4);
        let s = softmax(&t(&[2], &[1000.0, 0.0]));
        assert!(s.data().iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(s.data()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random(&mut rng, &[64, 7]);
        let scaled = Tensor::new(
            vec![64, 7],
            logits.data().iter().map(|v| v * 50.0).collect(),
        )
        .unwrap();
        let p = softmax(&scaled);
        for i in 0..p.rows() {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v >= 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn relu_affine_examples() {
        let w = Tensor::identity(2);
        let b = Tensor::zeros(&[2]);
        let y = relu_affine_forward(&Tensor::zeros(&[1, 2]), &w, &b).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = relu_affine_forward(&t(&[1, 2], &[-1.0, 2.0]), &w, &b).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
        // gradient is masked at exactly zero pre-activation
        let g = relu_affine_backward(&Tensor::zeros(&[1, 2]), &w, &Tensor::zeros(&[1, 2]), &t(&[1, 2], &[1.0, 1.0]), true)
            .unwrap();
        assert!(g.db.data().iter().all(|&v| v == 0.0));
        assert!(relu_affine_forward(&t(&[1, 3], &[0.0; 3]), &w, &b).is_err());
    }

    /// Random `(x, W, b)` with a fixed downstream projection; backward must
    /// agree with central differences over every input.
    #[test]
    fn relu_affine_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut trials = 0;
        while trials < 100 {
            let (n, fin, fout) = (3, 4, 5);
            let x = random(&mut rng, &[n, fin]);
            let w = random(&mut rng, &[fin, fout]);
            let b = random(&mut rng, &[fout]);
            let proj = random(&mut rng, &[n, fout]);
            let pre = affine_forward(&x, &w, &b).unwrap();
            if pre.data().iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
            trials += 1;
            let y = relu_affine_forward(&x, &w, &b).unwrap();
            let g = relu_affine_backward(&x, &w, &y, &proj, true).unwrap();
            let mut theta = x.data().to_vec();
            theta.extend_from_slice(w.data());
            theta.extend_from_slice(b.data());
            let mut analytic = g.dx.unwrap().into_data();
            analytic.extend_from_slice(g.dw.data());
            analytic.extend_from_slice(g.db.data());
            let loss = |th: &[f64]| {
                let x = Tensor::new(vec![n, fin], th[..n * fin].to_vec()).unwrap();
                let w = Tensor::new(vec![fin, fout], th[n * fin..n * fin + fin * fout].to_vec()).unwrap();
                let b = Tensor::new(vec![fout], th[n * fin + fin * fout..].to_vec()).unwrap();
                let y = relu_affine_forward(&x, &w, &b).unwrap();
                y.data().iter().zip(proj.data()).map(|(a, p)| a * p).sum()
            };
            let rep = fd_check(loss, &analytic, &theta, 1e-5).unwrap();
            assert!(rep.max_rel_err < 1e-6, "trial {trials}: {rep:?}");
        }
    }

    #[test]
    fn fd_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut theta: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        jitter(&mut theta, &mut rng, 1e-3);
        let quad = |th: &[f64]| 0.5 * th.iter().map(|v| v * v).sum::<f64>();
        let rep = fd_check(quad, &theta, &theta, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-9);

        let zeros = vec![0.0; theta.len()];
        let rep = fd_check(|_| 3.5, &zeros, &theta, 1e-5).unwrap();
        assert_eq!(rep.max_rel_err, 0.0);

        assert!(fd_check(|_| f64::NAN, &zeros, &theta, 1e-5).is_err());
    }

    #[test]
    fn fd_check_flags_wrong_gradient() {
        let theta = vec![1.0, -2.0, 0.5];
        let wrong = vec![1.0, -2.0, 0.6];
        let quad = |th: &[f64]| 0.5 * th.iter().map(|v| v * v).sum::<f64>();
        let rep = fd_check(quad, &wrong, &theta, 1e-5).unwrap();
        assert!(rep.max_rel_err > 0.09);
        assert_eq!(rep.worst_index, 2);
    }
}
