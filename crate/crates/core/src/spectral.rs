//! Channel-axis spectral weakening.
//!
//! A feature vector `x ∈ R^C` is mapped to its unitary DFT spectrum, a binary
//! selection mask keeps a subset of frequencies, and the inverse transform
//! returns to the channel domain where the real part is kept. An optional
//! renormalization step restores the original energy either before the inverse
//! transform (spectral) or after it (spatial).
//!
//! Both transform directions carry a `1/sqrt(C)` factor, so the forward matrix
//! `W[k, n] = exp(-2πi·kn/C) / sqrt(C)` is unitary and `W* W = I`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Complex = Complex64;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Real channel vector. Non-empty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("feature vector must have at least one channel"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("feature vector entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// Complex spectrum in natural DFT order `k = 0..C-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(Vec<Complex>);

impl Spectrum {
    pub fn new(values: Vec<Complex>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("spectrum must have at least one bin"));
        }
        if let Some(i) = values.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid(format!("spectrum bin {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Complex> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        cnorm(&self.0)
    }

    /// Largest deviation from `value[k] = conj(value[(C-k) mod C])`.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let n = self.0.len();
        (0..n)
            .map(|k| (self.0[k] - self.0[(n - k) % n].conj()).norm())
            .fold(0.0, f64::max)
    }
}

/// Which part of the spectrum a [`SelectionMask`] keeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    bits: Vec<bool>,
    range: Option<(f64, f64)>,
    symmetrize: bool,
}

impl SelectionMask {
    /// Keeps DFT indices `floor(lo·C) <= k < floor(hi·C)`; with `symmetrize`
    /// every kept `k` also keeps its conjugate partner `(C-k) mod C`.
    pub fn from_range(len: usize, lo: f64, hi: f64, symmetrize: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("mask length must be positive"));
        }
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::invalid(format!(
                "retention band {lo}:{hi} must satisfy 0 <= lo <= hi <= 1"
            )));
        }
        let start = band_edge(lo, len);
        let end = band_edge(hi, len);
        let mut bits = vec![false; len];
        for bit in &mut bits[start..end] {
            *bit = true;
        }
        if symmetrize {
            symmetrize_bits(&mut bits);
        }
        Ok(Self {
            bits,
            range: Some((lo, hi)),
            symmetrize,
        })
    }

    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("mask length must be positive"));
        }
        let symmetrize = is_symmetric(&bits);
        Ok(Self {
            bits,
            range: None,
            symmetrize,
        })
    }

    pub fn all(len: usize) -> Self {
        Self::from_range(len, 0.0, 1.0, true).expect("full band is valid")
    }

    pub fn none(len: usize) -> Self {
        Self::from_range(len, 0.0, 0.0, true).expect("empty band is valid")
    }

    /// Random conjugate-symmetric mask with exactly `rank` bits set.
    ///
    /// Frequencies are grouped into conjugate orbits (`{0}`, `{C/2}` for even C,
    /// and pairs `{k, C-k}`); orbits are drawn in random order and kept while
    /// they fit. Fails when no combination of orbits reaches `rank`.
    pub fn random_symmetric<R: Rng + ?Sized>(len: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if len == 0 || rank > len {
            return Err(Error::invalid(format!("cannot draw rank {rank} mask of length {len}")));
        }
        let mut orbits: Vec<Vec<usize>> = (0..len)
            .filter(|&k| k <= (len - k) % len)
            .map(|k| {
                let partner = (len - k) % len;
                if partner == k { vec![k] } else { vec![k, partner] }
            })
            .collect();
        let singles = orbits.iter().filter(|o| o.len() == 1).count();
        if rank % 2 == 1 && singles == 0 {
            return Err(Error::invalid(format!("no symmetric mask of rank {rank} for length {len}")));
        }
        for _attempt in 0..64 {
            orbits.shuffle(rng);
            let mut bits = vec![false; len];
            let mut remaining = rank;
            for orbit in &orbits {
                if orbit.len() <= remaining {
                    for &k in orbit {
                        bits[k] = true;
                    }
                    remaining -= orbit.len();
                }
                if remaining == 0 {
                    break;
                }
            }
            if remaining == 0 {
                return Self::from_bits(bits);
            }
        }
        Err(Error::invalid(format!("no symmetric mask of rank {rank} for length {len}")))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        self.range
    }

    pub fn symmetrize(&self) -> bool {
        self.symmetrize
    }

    pub fn rank(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_symmetric(&self) -> bool {
        is_symmetric(&self.bits)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }
}

fn band_edge(fraction: f64, len: usize) -> usize {
    // Absorbs representation error such as 0.29 * 100 = 28.999999999999996.
    ((fraction * len as f64 + 1e-9).floor() as usize).min(len)
}

fn symmetrize_bits(bits: &mut [bool]) {
    let n = bits.len();
    let kept: Vec<usize> = (0..n).filter(|&k| bits[k]).collect();
    for k in kept {
        bits[(n - k) % n] = true;
    }
}

fn is_symmetric(bits: &[bool]) -> bool {
    let n = bits.len();
    (0..n).all(|k| bits[k] == bits[(n - k) % n])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Renorm {
    None,
    Spectral,
    Spatial,
    UnitSpatial,
}

impl std::str::FromStr for Renorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Renorm::None),
            "spectral" | "f" => Ok(Renorm::Spectral),
            "spatial" | "s" => Ok(Renorm::Spatial),
            "unit" | "unit-spatial" => Ok(Renorm::UnitSpatial),
            other => Err(Error::invalid(format!(
                "unknown renormalization `{other}` (expected none, spectral, spatial, unit)"
            ))),
        }
    }
}

impl std::fmt::Display for Renorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Renorm::None => "none",
            Renorm::Spectral => "spectral",
            Renorm::Spatial => "spatial",
            Renorm::UnitSpatial => "unit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenormMode {
    pub variant: Renorm,
    pub epsilon: f64,
}

impl RenormMode {
    pub fn new(variant: Renorm, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("renorm epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { variant, epsilon })
    }
}

impl From<Renorm> for RenormMode {
    fn from(variant: Renorm) -> Self {
        Self {
            variant,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl Default for RenormMode {
    fn default() -> Self {
        Renorm::Spectral.into()
    }
}

/// Precomputed twiddles for one transform length.
///
/// Power-of-two lengths use an iterative radix-2 FFT; every other length uses
/// the direct sum with table lookups.
#[derive(Debug, Clone)]
pub struct SpectralPlan {
    len: usize,
    // twiddles[j] = exp(-2πi·j/len)
    twiddles: Vec<Complex>,
    scale: f64,
}

impl SpectralPlan {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("transform length must be positive"));
        }
        let twiddles = (0..len)
            .map(|j| Complex::from_polar(1.0, -2.0 * PI * j as f64 / len as f64))
            .collect();
        Ok(Self {
            len,
            twiddles,
            scale: 1.0 / (len as f64).sqrt(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward(&self, data: &mut [Complex]) {
        self.transform(data, false);
    }

    pub fn inverse(&self, data: &mut [Complex]) {
        self.transform(data, true);
    }

    fn twiddle(&self, j: usize, inverse: bool) -> Complex {
        let w = self.twiddles[j % self.len];
        if inverse { w.conj() } else { w }
    }

    fn transform(&self, data: &mut [Complex], inverse: bool) {
        assert_eq!(data.len(), self.len, "buffer length does not match plan");
        if self.len.is_power_of_two() {
            self.radix2(data, inverse);
        } else {
            self.direct(data, inverse);
        }
        for v in data.iter_mut() {
            *v *= self.scale;
        }
    }

    fn direct(&self, data: &mut [Complex], inverse: bool) {
        let n = self.len;
        let input = data.to_vec();
        for (k, out) in data.iter_mut().enumerate() {
            let mut acc = Complex::new(0.0, 0.0);
            for (j, &x) in input.iter().enumerate() {
                acc += x * self.twiddle((k * j) % n, inverse);
            }
            *out = acc;
        }
    }

    fn radix2(&self, data: &mut [Complex], inverse: bool) {
        let n = self.len;
        let bits = n.trailing_zeros();
        if bits > 0 {
            for i in 0..n {
                let j = i.reverse_bits() >> (usize::BITS - bits);
                if i < j {
                    data.swap(i, j);
                }
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for j in 0..half {
                    let w = self.twiddle(j * stride, inverse);
                    let a = data[start + j];
                    let b = data[start + j + half] * w;
                    data[start + j] = a + b;
                    data[start + j + half] = a - b;
                }
            }
            size *= 2;
        }
    }
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cnorm(values: &[Complex]) -> f64 {
    values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn dft(x: &FeatureVector) -> Spectrum {
    let plan = SpectralPlan::new(x.len()).expect("feature vectors are non-empty");
    let mut buf: Vec<Complex> = x.as_slice().iter().map(|&v| Complex::new(v, 0.0)).collect();
    plan.forward(&mut buf);
    Spectrum(buf)
}

/// Unitary inverse DFT. Accepts any non-empty complex sequence.
pub fn idft(s: &[Complex]) -> Result<Vec<Complex>> {
    let plan = SpectralPlan::new(s.len())?;
    let mut buf = s.to_vec();
    plan.inverse(&mut buf);
    Ok(buf)
}

pub fn apply_mask(s: &Spectrum, mask: &SelectionMask) -> Result<Spectrum> {
    if s.len() != mask.len() {
        return Err(Error::invalid(format!(
            "spectrum length {} does not match mask length {}",
            s.len(),
            mask.len()
        )));
    }
    let values = s
        .0
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &keep)| if keep { v } else { Complex::new(0.0, 0.0) })
        .collect();
    Ok(Spectrum(values))
}

pub fn take_real(v: &[Complex]) -> Vec<f64> {
    v.iter().map(|c| c.re).collect()
}

/// Rescales the masked spectrum to the energy of the original one.
pub fn renorm_spectral(masked: &Spectrum, original: &Spectrum, eps: f64) -> Result<Spectrum> {
    if masked.len() != original.len() {
        return Err(Error::invalid("masked and original spectra differ in length"));
    }
    check_eps(eps)?;
    let scale = original.norm() / (masked.norm() + eps);
    Ok(Spectrum(masked.0.iter().map(|&v| v * scale).collect()))
}

/// Rescales the reconstruction to the energy of the original signal.
pub fn renorm_spatial(reconstructed: &[f64], original: &[f64], eps: f64) -> Result<Vec<f64>> {
    if reconstructed.len() != original.len() {
        return Err(Error::invalid("reconstructed and original signals differ in length"));
    }
    check_eps(eps)?;
    let scale = l2(original) / (l2(reconstructed) + eps);
    Ok(reconstructed.iter().map(|v| v * scale).collect())
}

/// Rescales the reconstruction to unit length.
pub fn renorm_unit(reconstructed: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let scale = 1.0 / (l2(reconstructed) + eps);
    Ok(reconstructed.iter().map(|v| v * scale).collect())
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("epsilon must be positive, got {eps}")))
    }
}

/// The full pipeline on a single vector, built from the public operations.
pub fn weaken(x: &FeatureVector, mask: &SelectionMask, mode: RenormMode) -> Result<FeatureVector> {
    let spectrum = dft(x);
    let mut masked = apply_mask(&spectrum, mask)?;
    if mode.variant == Renorm::Spectral {
        masked = renorm_spectral(&masked, &spectrum, mode.epsilon)?;
    }
    let mut out = take_real(&idft(masked.as_slice())?);
    match mode.variant {
        Renorm::Spatial => out = renorm_spatial(&out, x.as_slice(), mode.epsilon)?,
        Renorm::UnitSpatial => out = renorm_unit(&out, mode.epsilon)?,
        Renorm::None | Renorm::Spectral => {}
    }
    FeatureVector::new(out)
}

/// Reusable weakening operator for hot loops: one plan, one mask, one mode.
///
/// Produces the same values as [`weaken`] but works in place on rows of
/// activations without re-planning.
#[derive(Debug, Clone)]
pub struct Weakener {
    plan: SpectralPlan,
    mask: SelectionMask,
    mode: RenormMode,
}

impl Weakener {
    pub fn new(mask: SelectionMask, mode: RenormMode) -> Result<Self> {
        check_eps(mode.epsilon)?;
        Ok(Self {
            plan: SpectralPlan::new(mask.len())?,
            mask,
            mode,
        })
    }

    pub fn mask(&self) -> &SelectionMask {
        &self.mask
    }

    pub fn mode(&self) -> RenormMode {
        self.mode
    }

    pub fn channels(&self) -> usize {
        self.mask.len()
    }

    pub fn apply(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.plan.len(), "row width does not match weakener");
        let eps = self.mode.epsilon;
        let mut buf: Vec<Complex> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.plan.forward(&mut buf);
        let full_norm = cnorm(&buf);
        for (v, &keep) in buf.iter_mut().zip(&self.mask.bits) {
            if !keep {
                *v = Complex::new(0.0, 0.0);
            }
        }
        if self.mode.variant == Renorm::Spectral {
            let scale = full_norm / (cnorm(&buf) + eps);
            for v in &mut buf {
                *v *= scale;
            }
        }
        self.plan.inverse(&mut buf);
        let spatial_norm = l2(x);
        for (out, v) in x.iter_mut().zip(&buf) {
            *out = v.re;
        }
        let scale = match self.mode.variant {
            Renorm::Spatial => spatial_norm / (l2(x) + eps),
            Renorm::UnitSpatial => 1.0 / (l2(x) + eps),
            Renorm::None | Renorm::Spectral => return,
        };
        for v in x.iter_mut() {
            *v *= scale;
        }
    }

    pub fn apply_f32(&self, x: &mut [f32]) {
        let mut wide: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        self.apply(&mut wide);
        for (dst, src) in x.iter_mut().zip(wide) {
            *dst = src as f32;
        }
    }

    /// Weakens every row of a row-major `[rows, channels]` buffer independently.
    pub fn apply_rows_f32(&self, data: &mut [f32]) {
        for row in data.chunks_exact_mut(self.channels()) {
            self.apply_f32(row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex {
        Complex::new(re, im)
    }

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_signal_has_all_energy_at_dc() {
        let s = dft(&fv(&[1.0, 1.0, 1.0, 1.0]));
        let expected = [c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        for (a, b) in s.as_slice().iter().zip(&expected) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let s = dft(&fv(&[1.0, 0.0, 0.0, 0.0]));
        for v in s.as_slice() {
            assert!((v - c(0.5, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn inverse_of_known_spectra() {
        let x = idft(&[c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert!(max_abs_diff(&take_real(&x), &[1.0; 4]) < 1e-12);
        let x = idft(&[c(0.5, 0.0); 4]).unwrap();
        assert!(max_abs_diff(&take_real(&x), &[1.0, 0.0, 0.0, 0.0]) < 1e-12);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(FeatureVector::new(vec![]), Err(Error::InvalidArgument(_))));
        assert!(matches!(idft(&[]), Err(Error::InvalidArgument(_))));
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn take_real_drops_imaginary_parts() {
        assert_eq!(take_real(&[c(1.0, 0.0), c(2.0, 3.0)]), vec![1.0, 2.0]);
    }

    #[test]
    fn range_mask_keeps_leading_band() {
        let m = SelectionMask::from_range(64, 0.0, 0.1, false).unwrap();
        let kept: Vec<usize> = (0..64).filter(|&k| m.bits()[k]).collect();
        assert_eq!(kept, (0..6).collect::<Vec<_>>());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Spectrum::new((0..64).map(|_| c(rng.random(), rng.random())).collect()).unwrap();
        let out = apply_mask(&s, &m).unwrap();
        for k in 0..64 {
            if k < 6 {
                assert_eq!(out.as_slice()[k], s.as_slice()[k]);
            } else {
                assert_eq!(out.as_slice()[k], c(0.0, 0.0));
            }
        }
    }

    #[test]
    fn symmetrized_range_adds_conjugate_partners() {
        let m = SelectionMask::from_range(64, 0.0, 0.1, true).unwrap();
        let kept: Vec<usize> = (0..64).filter(|&k| m.bits()[k]).collect();
        assert_eq!(kept, vec![0, 1, 2, 3, 4, 5, 59, 60, 61, 62, 63]);
        assert_eq!(m.rank(), 11);
        assert!(m.is_symmetric());
    }

    #[test]
    fn mask_identity_null_and_length_mismatch() {
        let s = dft(&fv(&[0.3, -1.2, 4.0, 2.5, 0.0]));
        assert_eq!(apply_mask(&s, &SelectionMask::all(5)).unwrap(), s);
        let zero = apply_mask(&s, &SelectionMask::none(5)).unwrap();
        assert!(zero.as_slice().iter().all(|v| *v == c(0.0, 0.0)));
        assert!(apply_mask(&s, &SelectionMask::all(4)).is_err());
        assert!(SelectionMask::from_range(8, 0.6, 0.2, true).is_err());
    }

    #[test]
    fn spectral_renorm_on_impulse() {
        // x = e0, keep k = 0 only: masked = (.5,0,0,0), scale = 1/(0.5+eps) ≈ 2.
        let x = fv(&[1.0, 0.0, 0.0, 0.0]);
        let s = dft(&x);
        let mask = SelectionMask::from_bits(vec![true, false, false, false]).unwrap();
        let masked = apply_mask(&s, &mask).unwrap();
        let scaled = renorm_spectral(&masked, &s, DEFAULT_EPSILON).unwrap();
        assert!((scaled.as_slice()[0] - c(1.0, 0.0)).norm() < 1e-7);
        let rec = take_real(&idft(scaled.as_slice()).unwrap());
        assert!(max_abs_diff(&rec, &[0.5; 4]) < 1e-7);
    }

    #[test]
    fn renorm_zero_inputs_stay_zero() {
        let s = dft(&fv(&[1.0, 2.0, 3.0]));
        let zero = Spectrum::new(vec![c(0.0, 0.0); 3]).unwrap();
        let out = renorm_spectral(&zero, &s, DEFAULT_EPSILON).unwrap();
        assert!(out.as_slice().iter().all(|v| v.norm() == 0.0));
        assert_eq!(renorm_spatial(&[0.0; 3], &[1.0, 2.0, 3.0], 1e-8).unwrap(), vec![0.0; 3]);
        assert_eq!(renorm_unit(&[0.0; 3], 1e-8).unwrap(), vec![0.0; 3]);
        assert!(renorm_spatial(&[0.0; 3], &[1.0; 3], 0.0).is_err());
    }

    #[test]
    fn spatial_renorm_inverts_pure_rescale() {
        let x = [3.0, -1.0, 2.0, 0.5];
        let half: Vec<f64> = x.iter().map(|v| v / 2.0).collect();
        assert!(max_abs_diff(&renorm_spatial(&half, &x, 1e-8).unwrap(), &x) < 1e-6);
        assert!(max_abs_diff(&renorm_spatial(&x, &x, 1e-8).unwrap(), &x) < 1e-6);
    }

    #[test]
    fn weaken_impulse_keep_dc_spatial() {
        let x = fv(&[1.0, 0.0, 0.0, 0.0]);
        let mask = SelectionMask::from_bits(vec![true, false, false, false]).unwrap();
        let out = weaken(&x, &mask, Renorm::Spatial.into()).unwrap();
        assert!(max_abs_diff(out.as_slice(), &[0.5; 4]) < 1e-7);
    }

    #[test]
    fn weakener_matches_reference_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &len in &[5usize, 16, 37, 64] {
            for variant in [Renorm::None, Renorm::Spectral, Renorm::Spatial, Renorm::UnitSpatial] {
                for symmetrize in [true, false] {
                    let x: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let mask = SelectionMask::from_range(len, 0.1, 0.4, symmetrize).unwrap();
                    let reference = weaken(&fv(&x), &mask, variant.into()).unwrap();
                    let mut fast = x.clone();
                    Weakener::new(mask, variant.into()).unwrap().apply(&mut fast);
                    assert!(max_abs_diff(&fast, reference.as_slice()) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn random_symmetric_mask_has_requested_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for rank in 0..=16 {
            let m = SelectionMask::random_symmetric(16, rank, &mut rng).unwrap();
            assert_eq!(m.rank(), rank);
            assert!(m.is_symmetric());
        }
        // Odd length: only k = 0 is self-conjugate, so every rank is still reachable.
        assert_eq!(SelectionMask::random_symmetric(7, 3, &mut rng).unwrap().rank(), 3);
        assert!(SelectionMask::random_symmetric(7, 8, &mut rng).is_err());
    }

    #[test]
    fn renorm_parsing() {
        assert_eq!("spectral".parse::<Renorm>().unwrap(), Renorm::Spectral);
        assert_eq!("unit".parse::<Renorm>().unwrap(), Renorm::UnitSpatial);
        assert!("bogus".parse::<Renorm>().is_err());
        assert!(RenormMode::new(Renorm::Spatial, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn parseval_and_round_trip(x in prop::collection::vec(-10.0f64..10.0, 1..80)) {
            let v = fv(&x);
            let s = dft(&v);
            let n = v.norm();
            prop_assert!((s.norm() - n).abs() <= 1e-9 * n.max(1.0));
            prop_assert!(s.conjugate_asymmetry() < 1e-9);
            let back = take_real(&idft(s.as_slice()).unwrap());
            prop_assert!(max_abs_diff(&back, &x) < 1e-9);
        }

        #[test]
        fn symmetric_mask_gives_real_output(x in prop::collection::vec(-5.0f64..5.0, 2..70), lo in 0.0f64..0.5, width in 0.0f64..0.5) {
            let mask = SelectionMask::from_range(x.len(), lo, lo + width, true).unwrap();
            let masked = apply_mask(&dft(&fv(&x)), &mask).unwrap();
            let rec = idft(masked.as_slice()).unwrap();
            let imag = rec.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
            prop_assert!(imag < 1e-9);
        }

        #[test]
        fn identity_mask_is_a_no_op(x in prop::collection::vec(-5.0f64..5.0, 1..70)) {
            let v = fv(&x);
            prop_assume!(v.norm() >= 1.0);
            let mask = SelectionMask::all(x.len());
            for variant in [Renorm::None, Renorm::Spectral, Renorm::Spatial] {
                let out = weaken(&v, &mask, variant.into()).unwrap();
                prop_assert!(max_abs_diff(out.as_slice(), &x) < 1e-5);
            }
        }
    }
}
