//! Dense linear algebra and statistics shared by the rest of the crate.
//!
//! Matrices are `nalgebra::DMatrix<f64>`; every routine here works on small
//! dense problems (dimension up to a few dozen) and favors exactness checks
//! over speed.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Eigenvalues above `-PSD_TOL` are treated as zero when a PSD input is expected.
pub const PSD_TOL: f64 = 1e-10;

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
const SYMMETRY_TOL: f64 = 1e-10;

/// Reproducible random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha12: the seed fixes the key and `stream_id` selects the
/// nonce, so streams with different ids never overlap and the output of one
/// replica does not depend on how other replicas are scheduled.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Derives an independent 64-bit seed from `(seed, index)` with the
/// SplitMix64 finalizer. Used to key nested families of streams, e.g. the
/// bootstrap weights of outer run `index`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Finite, non-empty sample of real scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalSample {
    values: Vec<f64>,
    sorted: bool,
}

impl EmpiricalSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("empirical sample is empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "empirical sample contains non-finite value {v}"
            )));
        }
        let sorted = values.windows(2).all(|w| w[0] <= w[1]);
        Ok(Self { values, sorted })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    pub fn into_sorted(mut self) -> Self {
        if !self.sorted {
            self.values.sort_by(f64::total_cmp);
            self.sorted = true;
        }
        self
    }

    fn sorted_values(&self) -> std::borrow::Cow<'_, [f64]> {
        if self.sorted {
            std::borrow::Cow::Borrowed(&self.values)
        } else {
            let mut v = self.values.clone();
            v.sort_by(f64::total_cmp);
            std::borrow::Cow::Owned(v)
        }
    }
}

pub fn identity(d: usize) -> DMatrix<f64> {
    DMatrix::identity(d, d)
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() <= rel_tol * scale
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_square(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::validation(format!(
            "{name} must be a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation(format!("{name} has non-finite entries")));
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn lambda_min_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

pub fn lambda_max_sym(m: &DMatrix<f64>) -> f64 {
    *sym_eigenvalues(m).last().expect("non-empty matrix")
}

/// Spectral norm (largest singular value).
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Solves the continuous Lyapunov equation `AᵀQ + QA = P` for `Q`.
///
/// `-A` must be Hurwitz. The equation is vectorized column-major as
/// `(I ⊗ Aᵀ + Aᵀ ⊗ I) vec(Q) = vec(P)` and solved by LU with partial
/// pivoting, which is exact enough for the dimensions used here (d ≤ 50).
pub fn solve_lyapunov(a_bar: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(a_bar, "A")?;
    check_square(p, "P")?;
    let d = a_bar.nrows();
    if p.nrows() != d {
        return Err(Error::validation(format!(
            "P is {}x{} but A is {d}x{d}",
            p.nrows(),
            p.ncols()
        )));
    }
    if !is_symmetric(p, SYMMETRY_TOL) {
        return Err(Error::validation("P must be symmetric"));
    }
    let p_min = lambda_min_sym(p);
    if p_min <= 0.0 {
        return Err(Error::validation(format!(
            "P must be positive definite, smallest eigenvalue {p_min:.6e}"
        )));
    }

    for ev in a_bar.complex_eigenvalues().iter() {
        if ev.re <= 0.0 {
            return Err(Error::Stability {
                reason: "-A is not Hurwitz".into(),
                re: ev.re,
                im: ev.im,
            });
        }
    }

    let at = a_bar.transpose();
    let eye = identity(d);
    let system = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice(p.as_slice());
    let vec_q = system.lu().solve(&rhs).ok_or_else(|| Error::Stability {
        reason: "Lyapunov operator is singular".into(),
        re: 0.0,
        im: 0.0,
    })?;
    let q = symmetrize(&DMatrix::from_column_slice(d, d, vec_q.as_slice()));

    let q_min = lambda_min_sym(&q);
    if q_min <= 0.0 {
        return Err(Error::Stability {
            reason: "Lyapunov solution is not positive definite".into(),
            re: q_min,
            im: 0.0,
        });
    }
    Ok(q)
}

/// Residual `‖AᵀQ + QA − P‖_F`.
pub fn lyapunov_residual(a_bar: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (a_bar.transpose() * q + q * a_bar - p).norm()
}

/// Symmetric PSD square root through the symmetric eigendecomposition.
/// Eigenvalues in `[-PSD_TOL, 0)` are clipped to zero.
pub fn sqrtm_psd(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(sigma, "sigma")?;
    if !is_symmetric(sigma, SYMMETRY_TOL) {
        return Err(Error::validation("sigma must be symmetric"));
    }
    let eig = symmetrize(sigma).symmetric_eigen();
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOL) {
        return Err(Error::NotPsd { eigenvalue: bad });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&roots) * v.transpose())))
}

/// Inverse square root of a symmetric positive-definite matrix.
pub fn inv_sqrtm_pd(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(sigma, "sigma")?;
    let eig = symmetrize(sigma).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l <= PSD_TOL * scale) {
        return Err(Error::validation(format!(
            "matrix is singular or indefinite: eigenvalue {bad:.6e}"
        )));
    }
    let inv_roots = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&inv_roots) * v.transpose())))
}

/// Two-sample Kolmogorov-Smirnov distance `sup_x |F_a(x) - F_b(x)|`, exact
/// over the merged support with right-continuous empirical CDFs.
pub fn ks_two_sample(a: &EmpiricalSample, b: &EmpiricalSample) -> f64 {
    let xs = a.sorted_values();
    let ys = b.sorted_values();
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup = 0.0f64;
    while i < xs.len() && j < ys.len() {
        let x = xs[i].min(ys[j]);
        // Step past every tie at x on both sides before comparing.
        while i < xs.len() && xs[i] <= x {
            i += 1;
        }
        while j < ys.len() && ys[j] <= x {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    sup.min(1.0)
}

/// `⌈level·B⌉`-th order statistic (1-based) of the sample.
pub fn empirical_quantile(s: &EmpiricalSample, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation(format!(
            "quantile level must lie in (0,1), got {level}"
        )));
    }
    let values = s.sorted_values();
    let b = values.len();
    Ok(values[quantile_rank(level, b) - 1])
}

/// 1-based rank `⌈level·B⌉`, clamped to `[1, B]`.
pub(crate) fn quantile_rank(level: f64, b: usize) -> usize {
    // The small offset absorbs representation error in products such as 0.9 * 200.
    let k = (level * b as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(b)
}

/// `count` i.i.d. draws of `S·η`, `η ~ N(0, I)`.
pub fn mvn_sample(
    sigma_sqrt: &DMatrix<f64>,
    rng: &mut RngStream,
    count: usize,
) -> Result<Vec<DVector<f64>>> {
    check_square(sigma_sqrt, "sigma_sqrt")?;
    if count == 0 {
        return Err(Error::validation("mvn_sample needs count >= 1"));
    }
    let d = sigma_sqrt.nrows();
    let mut eta = DVector::zeros(d);
    Ok((0..count)
        .map(|_| {
            for e in eta.iter_mut() {
                *e = rng.standard_normal();
            }
            sigma_sqrt * &eta
        })
        .collect())
}

/// Compensated (Kahan) running sum of vectors.
#[derive(Clone, Debug)]
pub struct KahanVec {
    sum: DVector<f64>,
    carry: DVector<f64>,
}

impl KahanVec {
    pub fn zeros(d: usize) -> Self {
        Self {
            sum: DVector::zeros(d),
            carry: DVector::zeros(d),
        }
    }

    pub fn add(&mut self, x: &DVector<f64>) {
        for ((s, c), &v) in self.sum.iter_mut().zip(self.carry.iter_mut()).zip(x.iter()) {
            let y = v - *c;
            let t = *s + y;
            *c = (t - *s) - y;
            *s = t;
        }
    }

    pub fn mean(&self, count: usize) -> DVector<f64> {
        &self.sum / count as f64
    }
}
