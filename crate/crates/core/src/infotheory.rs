//! Closed-form mutual information for jointly Gaussian `(x, Z)`.
//!
//! Used to check on concrete instances that invertible linear maps leave
//! `I(x; Z)` unchanged and that spectral selection `x' = W* M W x` never
//! increases it.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, Dyn};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SelectionMask;

const SYMMETRY_TOL: f64 = 1e-10;
/// Singular values below `RANK_TOL · σ_max` count as zero.
const RANK_TOL: f64 = 1e-10;

/// Joint covariance of `(x, Z)`, `x` first.
#[derive(Debug, Clone)]
pub struct GaussianPair {
    dim_x: usize,
    dim_z: usize,
    cov: DMatrix<f64>,
}

impl GaussianPair {
    pub fn new(dim_x: usize, dim_z: usize, cov: DMatrix<f64>) -> Result<Self> {
        let n = dim_x + dim_z;
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::invalid(format!(
                "covariance is {}x{}, expected {n}x{n}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::invalid(format!("covariance asymmetric by {asym:e}")));
        }
        if n > 0 && Cholesky::new(cov.clone()).is_none() {
            return Err(Error::DegenerateInput("joint covariance is not positive definite".into()));
        }
        Ok(Self { dim_x, dim_z, cov })
    }

    /// `A Aᵀ / k + jitter·I` with standard normal `A` of shape `n × k`, `k = n + 2`.
    pub fn random<R: Rng + ?Sized>(dim_x: usize, dim_z: usize, rng: &mut R) -> Self {
        let n = dim_x + dim_z;
        let k = n + 2;
        let a = DMatrix::<f64>::from_fn(n, k, |_, _| StandardNormal.sample(rng));
        let mut cov = &a * a.transpose() / k as f64 + DMatrix::identity(n, n) * 0.05;
        symmetrize(&mut cov);
        Self::new(dim_x, dim_z, cov).expect("jittered Gram matrix is positive definite")
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_z(&self) -> usize {
        self.dim_z
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sigma_xx(&self) -> DMatrix<f64> {
        self.cov.view((0, 0), (self.dim_x, self.dim_x)).into_owned()
    }

    pub fn sigma_xz(&self) -> DMatrix<f64> {
        self.cov.view((0, self.dim_x), (self.dim_x, self.dim_z)).into_owned()
    }

    pub fn sigma_zz(&self) -> DMatrix<f64> {
        self.cov.view((self.dim_x, self.dim_x), (self.dim_z, self.dim_z)).into_owned()
    }

    /// Covariance of `(A x, Z)` for a real map `A` with `dim_x` columns.
    /// Fails when `A x` is degenerate; use [`mi_after_map`] for rank-deficient maps.
    pub fn map_x(&self, map: &DMatrix<f64>) -> Result<GaussianPair> {
        if map.ncols() != self.dim_x {
            return Err(Error::invalid(format!(
                "map has {} columns, x has dimension {}",
                map.ncols(),
                self.dim_x
            )));
        }
        let m = map.nrows();
        let sxx = map * self.sigma_xx() * map.transpose();
        let sxz = map * self.sigma_xz();
        let mut cov = DMatrix::zeros(m + self.dim_z, m + self.dim_z);
        cov.view_mut((0, 0), (m, m)).copy_from(&sxx);
        cov.view_mut((0, m), (m, self.dim_z)).copy_from(&sxz);
        cov.view_mut((m, 0), (self.dim_z, m)).copy_from(&sxz.transpose());
        cov.view_mut((m, m), (self.dim_z, self.dim_z)).copy_from(&self.sigma_zz());
        symmetrize(&mut cov);
        GaussianPair::new(m, self.dim_z, cov)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

fn log_det_pd(m: DMatrix<f64>, what: &str) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let chol: Cholesky<f64, Dyn> = Cholesky::new(m)
        .ok_or_else(|| Error::DegenerateInput(format!("{what} is not positive definite")))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `I(x; Z) = ½ (ln det Σx + ln det Σz − ln det Σ)` in nats.
pub fn gaussian_mi(pair: &GaussianPair) -> Result<f64> {
    if pair.dim_x == 0 || pair.dim_z == 0 {
        return Ok(0.0);
    }
    let lx = log_det_pd(pair.sigma_xx(), "x covariance")?;
    let lz = log_det_pd(pair.sigma_zz(), "Z covariance")?;
    let lj = log_det_pd(pair.cov.clone(), "joint covariance")?;
    Ok(0.5 * (lx + lz - lj))
}

/// `I(A x; Z)` for any real map `A`, including rank-deficient ones.
///
/// With `A = U S Vᵀ` truncated to its `r` nonzero singular values, `A x` is an
/// invertible function of `V_rᵀ x`, so the MI is evaluated on those `r`
/// coordinates. Rank 0 gives a constant and therefore zero information.
pub fn mi_after_map(pair: &GaussianPair, map: &DMatrix<f64>) -> Result<f64> {
    let basis = row_space_basis(map)?;
    if basis.nrows() == 0 {
        return Ok(0.0);
    }
    gaussian_mi(&pair.map_x(&basis)?)
}

/// Orthonormal rows spanning the row space of `map` (i.e. `V_rᵀ`).
fn row_space_basis(map: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if map.nrows() == 0 || map.ncols() == 0 {
        return Ok(DMatrix::zeros(0, map.ncols()));
    }
    let svd = map.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateInput("SVD did not converge".into()))?;
    let sigma_max = svd.singular_values.max();
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|&(_, &s)| sigma_max > 0.0 && s > RANK_TOL * sigma_max)
        .map(|(i, _)| i)
        .collect();
    Ok(DMatrix::from_fn(keep.len(), map.ncols(), |i, j| v_t[(keep[i], j)]))
}

/// Unitary DFT matrix `W[k, n] = exp(-2πi·kn/C) / sqrt(C)`.
pub fn dft_matrix(c: usize) -> DMatrix<Complex64> {
    let scale = 1.0 / (c as f64).sqrt();
    DMatrix::from_fn(c, c, |k, n| {
        Complex64::from_polar(scale, -2.0 * PI * ((k * n) % c) as f64 / c as f64)
    })
}

/// `W* M W`.
pub fn selection_operator(mask: &SelectionMask) -> DMatrix<Complex64> {
    let c = mask.len();
    let w = dft_matrix(c);
    let m = DMatrix::from_fn(c, c, |i, j| {
        if i == j && mask.bits()[i] { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) }
    });
    w.adjoint() * m * w
}

/// Stacks `[Re P; Im P]`, the real map whose output determines `P x` for real `x`.
pub fn realify(p: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (m, n) = p.shape();
    DMatrix::from_fn(2 * m, n, |i, j| if i < m { p[(i, j)].re } else { p[(i - m, j)].im })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InformationLossReport {
    pub i_full: f64,
    pub i_masked: f64,
    pub slack: f64,
    pub rank: usize,
    pub holds: bool,
}

pub const INFORMATION_TOL: f64 = 1e-9;

/// Compares `I(x; Z)` with `I(W* M W x; Z)`.
pub fn verify_information_loss(pair: &GaussianPair, mask: &SelectionMask) -> Result<InformationLossReport> {
    if mask.len() != pair.dim_x {
        return Err(Error::invalid(format!(
            "mask length {} does not match dim_x {}",
            mask.len(),
            pair.dim_x
        )));
    }
    let i_full = gaussian_mi(pair)?;
    let i_masked = mi_after_map(pair, &realify(&selection_operator(mask)))?;
    Ok(InformationLossReport {
        i_full,
        i_masked,
        slack: i_full - i_masked,
        rank: mask.rank(),
        holds: i_masked <= i_full + INFORMATION_TOL,
    })
}

/// Real orthonormal Fourier basis as rows, each tagged with its frequency
/// `k ≤ C/2`: the constant row, cosine/sine rows per conjugate pair, and the
/// alternating row for even `C`.
pub fn real_fourier_basis(c: usize) -> (DMatrix<f64>, Vec<usize>) {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut freqs = Vec::with_capacity(c);
    let unit = 1.0 / (c as f64).sqrt();
    let pair = (2.0 / c as f64).sqrt();
    rows.push(vec![unit; c]);
    freqs.push(0);
    for k in 1..c.div_ceil(2) {
        let angle = |n: usize| 2.0 * PI * ((k * n) % c) as f64 / c as f64;
        rows.push((0..c).map(|n| pair * angle(n).cos()).collect());
        rows.push((0..c).map(|n| pair * angle(n).sin()).collect());
        freqs.extend([k, k]);
    }
    if c.is_multiple_of(2) && c > 1 {
        rows.push((0..c).map(|n| if n % 2 == 0 { unit } else { -unit }).collect());
        freqs.push(c / 2);
    }
    let basis = DMatrix::from_fn(c, c, |i, j| rows[i][j]);
    (basis, freqs)
}

/// `I(D; Z | R)` where `R`/`D` are the retained/discarded real spectral
/// coordinates of a conjugate-symmetric mask. Computed from the conditional
/// covariance of `(D, Z)` given `R`.
pub fn discarded_conditional_mi(pair: &GaussianPair, mask: &SelectionMask) -> Result<f64> {
    if !mask.is_symmetric() {
        return Err(Error::invalid("conditional MI needs a conjugate-symmetric mask"));
    }
    let c = pair.dim_x;
    if mask.len() != c {
        return Err(Error::invalid("mask length does not match dim_x"));
    }
    let (basis, freqs) = real_fourier_basis(c);
    let retained: Vec<usize> = (0..c).filter(|&i| mask.bits()[freqs[i]]).collect();
    let discarded: Vec<usize> = (0..c).filter(|&i| !mask.bits()[freqs[i]]).collect();
    if discarded.is_empty() || pair.dim_z == 0 {
        return Ok(0.0);
    }
    // Reorder coordinates as (R, D) and take the full joint covariance of (R, D, Z).
    let order: Vec<usize> = retained.iter().chain(&discarded).copied().collect();
    let rotated = DMatrix::from_fn(c, c, |i, j| basis[(order[i], j)]);
    let joint = pair.map_x(&rotated)?;
    let (r, d, z) = (retained.len(), discarded.len(), pair.dim_z);
    let cov = joint.covariance();
    let cond = if r == 0 {
        cov.view((r, r), (d + z, d + z)).into_owned()
    } else {
        let s_rr = cov.view((0, 0), (r, r)).into_owned();
        let s_ro = cov.view((0, r), (r, d + z)).into_owned();
        let s_oo = cov.view((r, r), (d + z, d + z)).into_owned();
        let solved = Cholesky::new(s_rr)
            .ok_or_else(|| Error::DegenerateInput("retained covariance is not positive definite".into()))?
            .solve(&s_ro);
        s_oo - s_ro.transpose() * solved
    };
    let mut cond = cond;
    symmetrize(&mut cond);
    let ld = log_det_pd(cond.view((0, 0), (d, d)).into_owned(), "conditional discarded covariance")?;
    let lz = log_det_pd(cond.view((d, d), (z, z)).into_owned(), "conditional Z covariance")?;
    let lj = log_det_pd(cond, "conditional joint covariance")?;
    Ok(0.5 * (ld + lz - lj))
}

/// Random real matrix shifted towards the identity so it stays well conditioned.
pub fn random_invertible<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let a: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    a / (n as f64).sqrt() + DMatrix::identity(n, n) * 1.5
}

/// Settings of a randomized theory run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryRun {
    pub dim_x: usize,
    pub dim_z: usize,
    pub trials: usize,
    /// Retained rank of the random conjugate-symmetric masks.
    pub rank: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryTrial {
    pub i_full: f64,
    pub i_masked: f64,
    pub slack: f64,
    pub rank: usize,
    /// `I(D; Z | R)` of the discarded spectral coordinates.
    pub discarded_conditional_mi: f64,
    /// Largest `|I(Px; Z) − I(x; Z)|` over a random invertible `P`, the DFT and a scalar.
    pub invariance_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub run: TheoryRun,
    pub information_tolerance: f64,
    pub invariance_tolerance: f64,
    /// Trials where the masked MI exceeded the full MI beyond tolerance.
    pub violations: usize,
    pub invariance_violations: usize,
    pub max_invariance_error: f64,
    /// Trials with slack > 1e-6.
    pub strict: usize,
    /// Trials whose discarded coordinates carry conditional information (> 1e-6) but whose slack did not.
    pub strictness_misses: usize,
    pub trials: Vec<TheoryTrial>,
}

pub const INVARIANCE_TOL: f64 = 1e-8;
const STRICT_TOL: f64 = 1e-6;

/// Runs `trials` random Gaussian instances through the information-loss and
/// invariance checks. Trial `i` draws from `seed::rng(seed, "theory", i)`.
pub fn verify_theory(run: TheoryRun) -> Result<TheoryReport> {
    if run.dim_x == 0 || run.dim_z == 0 || run.trials == 0 {
        return Err(Error::invalid("dim_x, dim_z and trials must be positive"));
    }
    if run.rank > run.dim_x {
        return Err(Error::invalid(format!("rank {} exceeds dim_x {}", run.rank, run.dim_x)));
    }
    let dft = realify(&dft_matrix(run.dim_x));
    let mut trials = Vec::with_capacity(run.trials);
    for t in 0..run.trials {
        let mut rng = crate::seed::rng(run.seed, crate::seed::streams::THEORY, t as u64);
        let pair = GaussianPair::random(run.dim_x, run.dim_z, &mut rng);
        let mask = SelectionMask::random_symmetric(run.dim_x, run.rank, &mut rng)?;
        let report = verify_information_loss(&pair, &mask)?;
        let cmi = discarded_conditional_mi(&pair, &mask)?;
        let p = random_invertible(run.dim_x, &mut rng);
        let scalar = DMatrix::<f64>::identity(run.dim_x, run.dim_x) * -3.7;
        let mut invariance_error: f64 = 0.0;
        for map in [&p, &dft, &scalar] {
            invariance_error = invariance_error.max((mi_after_map(&pair, map)? - report.i_full).abs());
        }
        trials.push(TheoryTrial {
            i_full: report.i_full,
            i_masked: report.i_masked,
            slack: report.slack,
            rank: report.rank,
            discarded_conditional_mi: cmi,
            invariance_error,
        });
    }
    Ok(TheoryReport {
        run,
        information_tolerance: INFORMATION_TOL,
        invariance_tolerance: INVARIANCE_TOL,
        violations: trials.iter().filter(|t| t.i_masked > t.i_full + INFORMATION_TOL).count(),
        invariance_violations: trials.iter().filter(|t| t.invariance_error > INVARIANCE_TOL).count(),
        max_invariance_error: trials.iter().map(|t| t.invariance_error).fold(0.0, f64::max),
        strict: trials.iter().filter(|t| t.slack > STRICT_TOL).count(),
        strictness_misses: trials
            .iter()
            .filter(|t| t.discarded_conditional_mi > STRICT_TOL && t.slack <= STRICT_TOL)
            .count(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn independent_blocks_have_zero_mi() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.0, 0.0, 0.0, 4.0]);
        let pair = GaussianPair::new(2, 1, cov).unwrap();
        assert!(gaussian_mi(&pair).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scalar_gaussian_channel() {
        // z = x + n with var(x) = var(n) = 1: I = ½ ln(1 + 1) = ½ ln 2.
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        let pair = GaussianPair::new(1, 1, cov).unwrap();
        assert!((gaussian_mi(&pair).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((0.5f64 * 2f64.ln() - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn invalid_covariances_are_rejected() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(GaussianPair::new(1, 1, asym), Err(Error::InvalidArgument(_))));
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(GaussianPair::new(1, 1, singular), Err(Error::DegenerateInput(_))));
        assert!(GaussianPair::new(2, 1, DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn invertible_maps_preserve_mi() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pair = GaussianPair::random(6, 3, &mut rng);
            let base = gaussian_mi(&pair).unwrap();
            let p = random_invertible(6, &mut rng);
            assert!((gaussian_mi(&pair.map_x(&p).unwrap()).unwrap() - base).abs() < 1e-8);
            let scaled = DMatrix::identity(6, 6) * -3.7;
            assert!((gaussian_mi(&pair.map_x(&scaled).unwrap()).unwrap() - base).abs() < 1e-8);
            let w = realify(&dft_matrix(6));
            assert!((mi_after_map(&pair, &w).unwrap() - base).abs() < 1e-8);
        }
    }

    #[test]
    fn full_and_empty_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pair = GaussianPair::random(8, 2, &mut rng);
        let full = verify_information_loss(&pair, &SelectionMask::all(8)).unwrap();
        assert!(full.slack.abs() <= 1e-9);
        let empty = verify_information_loss(&pair, &SelectionMask::none(8)).unwrap();
        assert_eq!(empty.i_masked, 0.0);
        assert!(verify_information_loss(&pair, &SelectionMask::all(7)).is_err());
    }

    #[test]
    fn real_fourier_basis_is_orthonormal() {
        for c in [1usize, 2, 5, 8, 16] {
            let (b, freqs) = real_fourier_basis(c);
            let gram = &b * b.transpose();
            assert!((gram - DMatrix::identity(c, c)).amax() < 1e-12);
            assert_eq!(freqs.len(), c);
        }
    }

    #[test]
    fn slack_equals_discarded_conditional_mi() {
        // Chain rule: I(x;Z) = I(R;Z) + I(D;Z|R), and x ↔ (R, D) is a rotation.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..25 {
            let pair = GaussianPair::random(16, 4, &mut rng);
            let mask = SelectionMask::random_symmetric(16, 4, &mut rng).unwrap();
            let report = verify_information_loss(&pair, &mask).unwrap();
            let cmi = discarded_conditional_mi(&pair, &mask).unwrap();
            assert!((report.slack - cmi).abs() < 1e-8, "{} vs {cmi}", report.slack);
            assert!(report.holds);
        }
    }

    #[test]
    fn no_loss_when_discarded_part_is_conditionally_independent() {
        // Z depends on x only through retained frequencies.
        let c = 8;
        let mask = SelectionMask::from_range(c, 0.0, 0.25, true).unwrap();
        let (basis, freqs) = real_fourier_basis(c);
        let mut cov = DMatrix::zeros(c + 1, c + 1);
        cov.view_mut((0, 0), (c, c)).copy_from(&DMatrix::identity(c, c));
        // Z = <u, x> + noise, u a retained basis row.
        let row = (0..c).find(|&i| freqs[i] == 1).unwrap();
        for j in 0..c {
            cov[(j, c)] = basis[(row, j)];
            cov[(c, j)] = basis[(row, j)];
        }
        cov[(c, c)] = 2.0;
        let pair = GaussianPair::new(c, 1, cov).unwrap();
        let report = verify_information_loss(&pair, &mask).unwrap();
        assert!(report.slack.abs() < 1e-10);
        assert!(report.i_full > 0.1);
    }

    #[test]
    fn nested_masks_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pair = GaussianPair::random(16, 3, &mut rng);
        let mut last = -1.0;
        for hi in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6] {
            let mask = SelectionMask::from_range(16, 0.0, hi, true).unwrap();
            let i = verify_information_loss(&pair, &mask).unwrap().i_masked;
            assert!(i >= last - 1e-12);
            assert!(i >= -1e-10);
            last = i;
        }
    }

    #[test]
    fn asymmetric_mask_still_loses_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pair = GaussianPair::random(12, 3, &mut rng);
        let mask = SelectionMask::from_range(12, 0.0, 0.25, false).unwrap();
        let report = verify_information_loss(&pair, &mask).unwrap();
        assert!(report.holds);
        assert!(report.i_masked > 0.0);
    }

    #[test]
    fn theory_run_has_no_violations() {
        let run = TheoryRun {
            dim_x: 16,
            dim_z: 4,
            trials: 20,
            rank: 4,
            seed: 3,
        };
        let report = verify_theory(run).unwrap();
        assert_eq!(report.trials.len(), 20);
        assert_eq!(report.violations, 0);
        assert_eq!(report.invariance_violations, 0);
        assert_eq!(report.strictness_misses, 0);
        assert_eq!(report, verify_theory(run).unwrap());
        assert!(verify_theory(TheoryRun { rank: 17, ..run }).is_err());
    }
}
