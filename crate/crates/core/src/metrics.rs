//! Scoring of precoder/combiner pairs: spectral efficiency, Monte Carlo
//! 16-QAM bit error rate, complex-multiplication counts and transmit beam
//! patterns.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::channel::{array_response, ArrayGeometry};
use crate::linalg::{
    adjoint_mul, inner, ldl_hermitian, matmul, svd, vec_norm, ComplexMatrix, LinalgError, Lu, C64, ZERO,
};
use crate::precoders::{counted_least_squares_cost, svd_cost};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("beam weights are all zero")]
    DegenerateWeights,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Received power `ρ`, noise variance `σ²` and stream count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub rho: f64,
    pub noise_var: f64,
    pub n_s: usize,
}

impl LinkBudget {
    pub fn new(rho: f64, noise_var: f64, n_s: usize) -> Result<Self> {
        if !(rho > 0.0) || !(noise_var > 0.0) || n_s == 0 {
            return Err(MetricsError::Invalid(format!(
                "need rho > 0, noise_var > 0, n_s > 0 (got {rho}, {noise_var}, {n_s})"
            )));
        }
        Ok(Self { rho, noise_var, n_s })
    }

    /// Unit noise variance, `ρ = 10^(snr_db/10)`.
    pub fn from_snr_db(snr_db: f64, n_s: usize) -> Result<Self> {
        Self::new(db_to_linear(snr_db), 1.0, n_s)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEfficiency {
    pub bits_per_hz: f64,
    /// Set when the noise covariance `σ²·WᴴW` needed diagonal loading.
    pub loaded: bool,
}

fn log2_det_with_loading(m: &ComplexMatrix, eps: f64) -> Result<(f64, bool)> {
    match ldl_hermitian(m) {
        Ok((_, d)) => Ok((d.iter().map(|x| x.log2()).sum(), false)),
        Err(LinalgError::Singular { .. }) => {
            let mut loaded = m.clone();
            for i in 0..m.rows() {
                loaded[(i, i)] += eps;
            }
            let (_, d) = ldl_hermitian(&loaded)?;
            Ok((d.iter().map(|x| x.log2()).sum(), true))
        }
        Err(e) => Err(e.into()),
    }
}

/// `log₂det(R_n + (ρ/N_s)·M·Mᴴ) − log₂det(R_n)` with `M = Wᴴ·H·F` and
/// `R_n = σ²·Wᴴ·W`, equal to `log₂det(I + (ρ/N_s)·R_n⁻¹·M·Mᴴ)`.
pub fn spectral_efficiency_detail(
    h: &ComplexMatrix,
    f: &ComplexMatrix,
    w: &ComplexMatrix,
    budget: &LinkBudget,
) -> Result<SpectralEfficiency> {
    let hf = matmul(h, f)?;
    let m = adjoint_mul(w, &hf)?;
    let r_n = adjoint_mul(w, w)?.scale_real(budget.noise_var);
    let signal = matmul(&m, &m.adjoint())?.scale_real(budget.rho / budget.n_s as f64);
    let n = r_n.rows();
    let eps = 1e-12 * r_n.trace().re.max(f64::MIN_POSITIVE) / n as f64;
    let (noise_ld, loaded_noise) = log2_det_with_loading(&r_n, eps)?;
    let total = &r_n + &signal;
    let total = if loaded_noise {
        let mut t = total;
        for i in 0..n {
            t[(i, i)] += eps;
        }
        t
    } else {
        total
    };
    let (total_ld, loaded_total) = log2_det_with_loading(&total, eps)?;
    Ok(SpectralEfficiency {
        bits_per_hz: (total_ld - noise_ld).max(0.0),
        loaded: loaded_noise || loaded_total,
    })
}

pub fn spectral_efficiency(
    h: &ComplexMatrix,
    f: &ComplexMatrix,
    w: &ComplexMatrix,
    budget: &LinkBudget,
) -> Result<f64> {
    Ok(spectral_efficiency_detail(h, f, w, budget)?.bits_per_hz)
}

/// Gray-coded 4-PAM levels indexed by the bit pair `(b1 b0)`:
/// `00 → −3, 01 → −1, 11 → +1, 10 → +3`.
const PAM_LEVELS: [f64; 4] = [-3.0, -1.0, 3.0, 1.0];

fn pam_bits(level_index: usize) -> u8 {
    // inverse of PAM_LEVELS ordered by amplitude: −3, −1, +1, +3
    [0b00, 0b01, 0b11, 0b10][level_index]
}

fn pam_decide(x: f64) -> usize {
    if x < -2.0 {
        0
    } else if x < 0.0 {
        1
    } else if x < 2.0 {
        2
    } else {
        3
    }
}

/// Average symbol energy normaliser for unit-energy 16-QAM.
pub const QAM16_SCALE: f64 = 0.316_227_766_016_837_94; // 1/√10

/// Maps four bits (`b3 b2` in-phase, `b1 b0` quadrature) to a unit-energy
/// 16-QAM point.
pub fn qam16_map(bits: u8) -> C64 {
    let i = PAM_LEVELS[((bits >> 2) & 3) as usize];
    let q = PAM_LEVELS[(bits & 3) as usize];
    C64::new(i, q) * QAM16_SCALE
}

/// Minimum-distance decision; returns the four bits.
pub fn qam16_demap(z: C64) -> u8 {
    let i = pam_bits(pam_decide(z.re / QAM16_SCALE));
    let q = pam_bits(pam_decide(z.im / QAM16_SCALE));
    (i << 2) | q
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerEstimate {
    pub ber: f64,
    pub bit_errors: u64,
    pub bits: u64,
    /// The effective `N_s × N_s` channel was singular; half the bits were
    /// charged as errors.
    pub singular: bool,
}

/// Monte Carlo 16-QAM BER. Each symbol vector `s` (entries `q/√N_s`, `q`
/// unit-energy 16-QAM) is sent as `y = √ρ·H·F·s + n` with `n ~ CN(0, I)`,
/// combined as `Wᴴ·y`, zero-forced by `(Wᴴ·H·F)⁻¹` and demapped per stream.
/// `snr_db` is `ρ`, the per-stream symbol-energy to noise ratio seen by a
/// bypass link (`H = F = W = I`, `N_s = 1`).
///
/// The random sequence does not depend on `snr_db`, so the same generator
/// seed gives common random numbers across an SNR sweep.
pub fn ber_16qam(
    h: &ComplexMatrix,
    f: &ComplexMatrix,
    w: &ComplexMatrix,
    snr_db: f64,
    n_bits: u64,
    rng: &mut impl Rng,
) -> Result<BerEstimate> {
    let n_s = f.cols();
    if n_s == 0 || w.cols() != n_s {
        return Err(MetricsError::Invalid(format!(
            "precoder has {n_s} streams, combiner {}",
            w.cols()
        )));
    }
    if n_bits < 10_000 || !n_bits.is_multiple_of(4 * n_s as u64) {
        return Err(MetricsError::Invalid(format!(
            "n_bits = {n_bits} must be >= 10^4 and a multiple of {}",
            4 * n_s
        )));
    }
    let g = adjoint_mul(w, &matmul(h, f)?)?;
    let singular = svd(&g)?.rank(1e-12) < n_s;
    if singular {
        return Ok(BerEstimate {
            ber: 0.5,
            bit_errors: n_bits / 2,
            bits: n_bits,
            singular: true,
        });
    }
    let rho = db_to_linear(snr_db);
    // q̂ = q + √N_s/√ρ · G⁻¹·Wᴴ·n
    let lu = Lu::new(&g)?;
    let noise_map = lu.solve(&w.adjoint())?.scale_real((n_s as f64 / rho).sqrt());
    let n_r = w.rows();
    let vectors = n_bits / (4 * n_s as u64);
    let mut noise = vec![ZERO; n_r];
    let mut bits = vec![0u8; n_s];
    let mut errors = 0u64;
    let half = std::f64::consts::FRAC_1_SQRT_2;
    for _ in 0..vectors {
        for b in bits.iter_mut() {
            *b = rng.random::<u8>() & 0x0f;
        }
        for z in noise.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *z = C64::new(re, im) * half;
        }
        for (k, &b) in bits.iter().enumerate() {
            let mut est = qam16_map(b);
            for (c, nz) in noise.iter().enumerate() {
                est += noise_map[(k, c)] * nz;
            }
            errors += (qam16_demap(est) ^ b).count_ones() as u64;
        }
    }
    Ok(BerEstimate {
        ber: errors as f64 / n_bits as f64,
        bit_errors: errors,
        bits: n_bits,
        singular: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Scheme {
    Omp,
    Zf,
    Dnn,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Omp => "omp",
            Scheme::Zf => "zf",
            Scheme::Dnn => "dnn",
        }
    }
}

/// Problem sizes for the multiplication-count model.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityDims {
    pub n_t: usize,
    pub n_r: usize,
    pub n_rf: usize,
    pub n_s: usize,
    /// OMP dictionary size.
    pub n_atoms: usize,
    /// Neural layer widths from input to output, noise layer excluded.
    pub layer_widths: Vec<usize>,
}

/// Real multiplications in one dense forward pass over `widths`.
pub fn dense_forward_real_mults(widths: &[usize]) -> u64 {
    widths.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

/// Complex multiplications charged to `scheme`, matching what the
/// instrumented implementation adds to its counter:
///
/// * OMP: per iteration `k`, the correlation `n_atoms·N_t·N_s`, the
///   normal-equation least squares over `k` columns and the residual
///   product `N_t·k·N_s`; then the final `N_t·N_RF·N_s` product.
/// * DNN: dense forward-pass real multiplications divided by 4 (rounded up),
///   plus one least-squares fit of `F_D` and the final product.
/// * ZF: `4·N_r·N_t·min(N_r, N_t)` for the channel SVD, the effective
///   channel products, a small SVD/pseudo-inverse and the final product.
pub fn complexity_count(scheme: Scheme, d: &ComplexityDims) -> u64 {
    let (n_t, n_r, n_rf, n_s) = (d.n_t as u64, d.n_r as u64, d.n_rf as u64, d.n_s as u64);
    let final_product = n_t * n_rf * n_s;
    match scheme {
        Scheme::Omp => {
            let per_iter: u64 = (1..=n_rf)
                .map(|k| d.n_atoms as u64 * n_t * n_s + counted_least_squares_cost(n_t, k, n_s) + n_t * k * n_s)
                .sum();
            per_iter + final_product
        }
        Scheme::Dnn => {
            dense_forward_real_mults(&d.layer_widths).div_ceil(4)
                + counted_least_squares_cost(n_t, n_rf, n_s)
                + final_product
        }
        Scheme::Zf => {
            svd_cost(n_r, n_t)
                + n_r * n_t * n_rf
                + n_s * n_r * n_rf
                + svd_cost(n_s, n_rf)
                + n_rf * n_s * n_s
                + final_product
        }
    }
}

/// Gain pattern on an azimuth × elevation grid, rows indexed by elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamGrid {
    pub azimuths: Vec<f64>,
    pub elevations: Vec<f64>,
    /// `gains_db[e][a]`, peak at 0 dB.
    pub gains_db: Vec<Vec<f64>>,
}

/// `count` evenly spaced angles from `start_deg` to `end_deg` inclusive, in radians.
pub fn angle_grid_deg(start_deg: f64, end_deg: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![start_deg.to_radians()];
    }
    (0..count)
        .map(|i| (start_deg + (end_deg - start_deg) * i as f64 / (count - 1) as f64).to_radians())
        .collect()
}

/// 181 azimuths over −90°..90° and 91 elevations over 0°..180°.
pub fn default_beam_axes() -> (Vec<f64>, Vec<f64>) {
    (angle_grid_deg(-90.0, 90.0, 181), angle_grid_deg(0.0, 180.0, 91))
}

/// Floor applied to gains so that exact nulls stay finite.
pub const GAIN_FLOOR_DB: f64 = -300.0;

pub fn beam_pattern(w: &[C64], geom: &ArrayGeometry, azimuths: &[f64], elevations: &[f64]) -> Result<BeamGrid> {
    if w.len() != geom.n_elems() {
        return Err(MetricsError::Invalid(format!(
            "{} weights for a {}-element array",
            w.len(),
            geom.n_elems()
        )));
    }
    if vec_norm(w) == 0.0 {
        return Err(MetricsError::DegenerateWeights);
    }
    let mut mags = vec![vec![0.0; azimuths.len()]; elevations.len()];
    let mut peak = 0.0f64;
    for (e, &el) in elevations.iter().enumerate() {
        for (a, &az) in azimuths.iter().enumerate() {
            let m = inner(&array_response(geom, az, el), w).norm();
            peak = peak.max(m);
            mags[e][a] = m;
        }
    }
    let gains_db = mags
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|m| {
                    if peak > 0.0 && m > 0.0 {
                        (20.0 * (m / peak).log10()).max(GAIN_FLOOR_DB)
                    } else {
                        GAIN_FLOOR_DB
                    }
                })
                .collect()
        })
        .collect();
    Ok(BeamGrid {
        azimuths: azimuths.to_vec(),
        elevations: elevations.to_vec(),
        gains_db,
    })
}

impl BeamGrid {
    /// `(elevation index, azimuth index)` of the largest gain, first in raster order.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut val = f64::NEG_INFINITY;
        for (e, row) in self.gains_db.iter().enumerate() {
            for (a, &g) in row.iter().enumerate() {
                if g > val {
                    val = g;
                    best = (e, a);
                }
            }
        }
        best
    }

    /// Grid local maxima (8-neighbourhood) at or above `threshold_db`.
    /// Plateaus count once: a cell must strictly beat neighbours that come
    /// earlier in raster order.
    pub fn lobes(&self, threshold_db: f64) -> Vec<(usize, usize)> {
        let rows = self.gains_db.len();
        let mut out = Vec::new();
        for e in 0..rows {
            let cols = self.gains_db[e].len();
            for a in 0..cols {
                let g = self.gains_db[e][a];
                if g < threshold_db {
                    continue;
                }
                let mut is_max = true;
                'nb: for de in -1i64..=1 {
                    for da in -1i64..=1 {
                        if de == 0 && da == 0 {
                            continue;
                        }
                        let (ne, na) = (e as i64 + de, a as i64 + da);
                        if ne < 0 || na < 0 || ne >= rows as i64 || na >= cols as i64 {
                            continue;
                        }
                        let n = self.gains_db[ne as usize][na as usize];
                        let earlier = (ne, na) < (e as i64, a as i64);
                        if n > g || (earlier && n == g) {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    out.push((e, a));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ONE;
    use crate::rng;

    #[test]
    fn scalar_se_is_exactly_one() {
        let one = ComplexMatrix::identity(1);
        let b = LinkBudget::new(1.0, 1.0, 1).unwrap();
        assert_eq!(spectral_efficiency(&one, &one, &one, &b).unwrap(), 1.0);
    }

    #[test]
    fn diagonal_se_matches_hand_value() {
        let h = ComplexMatrix::from_real_diag(&[2.0, 1.0]);
        let i2 = ComplexMatrix::identity(2);
        let b = LinkBudget::new(1.0, 1.0, 2).unwrap();
        let se = spectral_efficiency(&h, &i2, &i2, &b).unwrap();
        assert!((se - (3f64.log2() + 1.5f64.log2())).abs() < 1e-12);
    }

    #[test]
    fn se_vanishes_at_low_power_and_grows_with_snr() {
        let h = ComplexMatrix::from_real_diag(&[2.0, 1.0]);
        let i2 = ComplexMatrix::identity(2);
        let lo = spectral_efficiency(&h, &i2, &i2, &LinkBudget::new(1e-12, 1.0, 2).unwrap()).unwrap();
        assert!(lo < 1e-10);
        let mut prev = 0.0;
        for db in [-10.0, -5.0, 0.0, 5.0, 10.0] {
            let se = spectral_efficiency(&h, &i2, &i2, &LinkBudget::from_snr_db(db, 2).unwrap()).unwrap();
            assert!(se > prev);
            prev = se;
        }
    }

    #[test]
    fn singular_noise_covariance_is_loaded() {
        let h = ComplexMatrix::identity(2);
        let f = ComplexMatrix::identity(2);
        let w = ComplexMatrix::zeros(2, 2);
        let r = spectral_efficiency_detail(&h, &f, &w, &LinkBudget::new(1.0, 1.0, 2).unwrap()).unwrap();
        assert!(r.loaded);
        assert!(r.bits_per_hz.is_finite());
    }

    #[test]
    fn qam_gray_map_round_trip_and_unit_energy() {
        let mut energy = 0.0;
        for b in 0u8..16 {
            let p = qam16_map(b);
            energy += p.norm_sqr();
            assert_eq!(qam16_demap(p), b);
        }
        assert!((energy / 16.0 - 1.0).abs() < 1e-12);
        // neighbouring levels differ in exactly one bit
        for i in 0..3 {
            let a = pam_bits(i);
            let b = pam_bits(i + 1);
            assert_eq!((a ^ b).count_ones(), 1);
        }
    }

    #[test]
    fn ber_noise_free_limit() {
        let i2 = ComplexMatrix::identity(2);
        let mut r = rng::stream(0, "ber", 0);
        let est = ber_16qam(&i2, &i2, &i2, 60.0, 100_000, &mut r).unwrap();
        assert_eq!(est.bit_errors, 0);
    }

    #[test]
    fn ber_rejects_bad_bit_counts_and_flags_singular() {
        let i2 = ComplexMatrix::identity(2);
        let mut r = rng::stream(0, "ber", 1);
        assert!(ber_16qam(&i2, &i2, &i2, 10.0, 10_004, &mut r).is_err());
        assert!(ber_16qam(&i2, &i2, &i2, 10.0, 8_000, &mut r).is_err());
        let w = ComplexMatrix::from_rows(&[vec![ONE, ONE], vec![ZERO, ZERO]]);
        let est = ber_16qam(&i2, &i2, &w, 10.0, 10_000, &mut r).unwrap();
        assert!(est.singular);
        assert_eq!(est.ber, 0.5);
    }

    #[test]
    fn dnn_count_for_reference_widths() {
        let d = ComplexityDims {
            n_t: 64,
            n_r: 16,
            n_rf: 4,
            n_s: 4,
            n_atoms: 0,
            layer_widths: vec![2048, 300, 128, 100, 64, 256],
        };
        assert_eq!(dense_forward_real_mults(&d.layer_widths), 688_384);
        assert_eq!(dense_forward_real_mults(&d.layer_widths) / 4, 172_096);
    }

    #[test]
    fn omp_count_in_expected_band() {
        let d = ComplexityDims {
            n_t: 256,
            n_r: 16,
            n_rf: 4,
            n_s: 4,
            n_atoms: 1024,
            layer_widths: vec![],
        };
        let c = complexity_count(Scheme::Omp, &d);
        assert!((1_000_000..=6_000_000).contains(&c), "{c}");
    }

    #[test]
    fn beam_pattern_matched_peak() {
        let geom = ArrayGeometry::new(8, 8, 0.5, 1.0).unwrap();
        let (az, el) = default_beam_axes();
        let (a0, e0) = (az[145], el[30]);
        let w = array_response(&geom, a0, e0);
        let g = beam_pattern(&w, &geom, &az, &el).unwrap();
        assert_eq!(g.peak(), (30, 145));
        assert!(g.gains_db[30][145].abs() < 1e-12);
        assert!((inner(&array_response(&geom, a0, e0), &w).norm() - 1.0).abs() < 1e-12);

        let rotated: Vec<C64> = w.iter().map(|z| z * C64::from_polar(1.0, 0.7)).collect();
        let r = beam_pattern(&rotated, &geom, &az, &el).unwrap();
        for (x, y) in r.gains_db.iter().flatten().zip(g.gains_db.iter().flatten()) {
            // compare linear magnitudes so that deep nulls do not dominate
            assert!((db_to_linear(*x / 2.0) - db_to_linear(*y / 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_element_pattern_is_flat() {
        let geom = ArrayGeometry::new(1, 1, 0.5, 1.0).unwrap();
        let (az, el) = default_beam_axes();
        let g = beam_pattern(&[C64::new(0.3, 0.4)], &geom, &az, &el).unwrap();
        assert!(g.gains_db.iter().flatten().all(|x| x.abs() < 1e-12));
        assert_eq!(g.gains_db.len(), 91);
        assert_eq!(g.gains_db[0].len(), 181);
        assert!(matches!(
            beam_pattern(&[ZERO], &geom, &az, &el),
            Err(MetricsError::DegenerateWeights)
        ));
    }

    #[test]
    fn lobe_counter_finds_separate_peaks_once() {
        let g = BeamGrid {
            azimuths: vec![0.0; 5],
            elevations: vec![0.0; 3],
            gains_db: vec![
                vec![-20.0, -3.0, -20.0, -20.0, -20.0],
                vec![-20.0, -20.0, -20.0, 0.0, 0.0],
                vec![-20.0, -20.0, -20.0, -20.0, -20.0],
            ],
        };
        assert_eq!(g.lobes(-10.0), vec![(0, 1), (1, 3)]);
        assert_eq!(g.lobes(-1.0), vec![(1, 3)]);
    }
}
