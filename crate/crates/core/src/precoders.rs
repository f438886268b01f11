//! Fully-digital and hybrid precoders / combiners.
//!
//! The transmitted signal is `x = F_A·F_D·s` with `F_A` the `N_t × N_RF`
//! analog (phase-shifter) stage and `F_D` the `N_RF × N_s` digital stage.
//! Every hybrid output satisfies the constant-modulus constraint on `F_A`
//! and the power constraint `‖F_A·F_D‖_F² = N_s`.

use std::f64::consts::PI;

use thiserror::Error;

use crate::channel::{array_response, arrival_angles, departure_angles, ArrayGeometry, ChannelRealization};
use crate::linalg::{
    self, adjoint_mul_counted, frobenius_norm, matmul, matmul_counted, solve_hpd_counted, svd, ComplexMatrix,
    LinalgError, MultiplicationCounter, C64, ONE, ZERO,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrecoderError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("effective channel has rank {rank}, need {needed} streams")]
    RankDeficient { rank: usize, needed: usize },
    #[error("precoder product F_A·F_D is zero")]
    Degenerate,
    #[error("dictionary has {atoms} atoms, cannot pick {n_rf} distinct ones")]
    DictionaryExhausted { atoms: usize, n_rf: usize },
    #[error("constraint violated: {0}")]
    Constraint(String),
}

pub type Result<T> = std::result::Result<T, PrecoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AnalogStructure {
    FullyConnected,
    SubConnected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridPrecoder {
    /// `N_t × N_RF`.
    pub f_a: ComplexMatrix,
    /// `N_RF × N_s`.
    pub f_d: ComplexMatrix,
    pub structure: AnalogStructure,
}

impl HybridPrecoder {
    /// `F = F_A·F_D`, `N_t × N_s`.
    pub fn effective(&self) -> ComplexMatrix {
        self.f_a.dot(&self.f_d)
    }

    pub fn n_s(&self) -> usize {
        self.f_d.cols()
    }

    pub fn n_rf(&self) -> usize {
        self.f_a.cols()
    }

    /// Checks the modulus, block-structure and power constraints.
    pub fn check_constraints(&self, n_s: usize, tol: f64) -> Result<()> {
        let (n_t, n_rf) = self.f_a.shape();
        match self.structure {
            AnalogStructure::FullyConnected => check_unit_modulus(&self.f_a, tol, "F_A")?,
            AnalogStructure::SubConnected => {
                if n_rf == 0 || !n_t.is_multiple_of(n_rf) {
                    return Err(PrecoderError::Constraint(format!(
                        "sub-connected F_A is {n_t}x{n_rf}, rows not divisible by columns"
                    )));
                }
                let m = n_t / n_rf;
                for r in 0..n_t {
                    for c in 0..n_rf {
                        let z = self.f_a[(r, c)];
                        if r / m == c {
                            if (z.norm() - 1.0).abs() > tol {
                                return Err(PrecoderError::Constraint(format!(
                                    "|F_A({r},{c})| = {} on block",
                                    z.norm()
                                )));
                            }
                        } else if z != ZERO {
                            return Err(PrecoderError::Constraint(format!("F_A({r},{c}) = {z} off block")));
                        }
                    }
                }
            }
        }
        let power = self.effective().norm_sqr();
        if (power - n_s as f64).abs() > tol {
            return Err(PrecoderError::Constraint(format!(
                "‖F_A·F_D‖² = {power}, expected {n_s}"
            )));
        }
        Ok(())
    }
}

fn check_unit_modulus(m: &ComplexMatrix, tol: f64, name: &str) -> Result<()> {
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let a = m[(r, c)].norm();
            if (a - 1.0).abs() > tol {
                return Err(PrecoderError::Constraint(format!("|{name}({r},{c})| = {a}")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerPair {
    /// `N_r × N_RF`.
    pub w_a: ComplexMatrix,
    /// `N_RF × N_s`.
    pub w_d: ComplexMatrix,
}

impl CombinerPair {
    /// `W = W_A·W_D`, applied to the received vector as `Wᴴ·y`.
    pub fn effective(&self) -> ComplexMatrix {
        self.w_a.dot(&self.w_d)
    }

    pub fn check_unit_modulus(&self, tol: f64) -> Result<()> {
        check_unit_modulus(&self.w_a, tol, "W_A")
    }
}

/// Candidate analog beams for OMP; columns are unit-norm steering vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderDictionary {
    pub atoms: ComplexMatrix,
}

impl PrecoderDictionary {
    pub fn from_angles(geom: &ArrayGeometry, angles: &[(f64, f64)]) -> Self {
        let n = geom.n_elems();
        let mut atoms = ComplexMatrix::zeros(n, angles.len());
        for (c, &(az, el)) in angles.iter().enumerate() {
            atoms.set_column(c, &array_response(geom, az, el));
        }
        Self { atoms }
    }

    /// Transmit steering vectors at the true departure angles of `ch`.
    pub fn genie_tx(ch: &ChannelRealization) -> Self {
        Self::from_angles(&ch.tx_geometry, &departure_angles(&ch.clusters))
    }

    /// Receive steering vectors at the true arrival angles of `ch`.
    pub fn genie_rx(ch: &ChannelRealization) -> Self {
        Self::from_angles(&ch.rx_geometry, &arrival_angles(&ch.clusters))
    }

    /// Uniform grid: `n_az` azimuths over `[-π/2, π/2)` times `n_el`
    /// elevations over `(0, π)`, covering the front hemisphere.
    pub fn grid(geom: &ArrayGeometry, n_az: usize, n_el: usize) -> Self {
        let mut angles = Vec::with_capacity(n_az * n_el);
        for i in 0..n_az {
            let az = -PI / 2.0 + PI * i as f64 / n_az as f64;
            for j in 0..n_el {
                let el = PI * (j as f64 + 0.5) / n_el as f64;
                angles.push((az, el));
            }
        }
        Self::from_angles(geom, &angles)
    }

    /// Standard basis columns; handy for exact-reconstruction checks.
    pub fn identity(n: usize) -> Self {
        Self {
            atoms: ComplexMatrix::identity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.atoms.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.cols() == 0
    }
}

/// Unconstrained optimum: the leading `n_s` right singular vectors of `H`.
#[derive(Debug, Clone)]
pub struct OptimalPrecoder {
    /// `N_t × N_s`, `‖F_opt‖_F² = N_s`.
    pub f_opt: ComplexMatrix,
    /// Leading `n_s` left singular vectors, the matching fully-digital combiner.
    pub w_opt: ComplexMatrix,
    pub singular_values: Vec<f64>,
    /// Set when the channel rank is below `n_s`.
    pub rank_deficient: bool,
}

pub fn optimal_precoder(h: &ComplexMatrix, n_s: usize) -> Result<OptimalPrecoder> {
    let k = h.rows().min(h.cols());
    if n_s == 0 || n_s > k {
        return Err(PrecoderError::Config(format!(
            "n_s = {n_s} must be in 1..={k} for a {}x{} channel",
            h.rows(),
            h.cols()
        )));
    }
    let dec = svd(h)?;
    let mut f_opt = dec.v.leading_columns(n_s);
    let norm = f_opt.frobenius_norm();
    f_opt = f_opt.scale_real((n_s as f64).sqrt() / norm);
    Ok(OptimalPrecoder {
        f_opt,
        w_opt: dec.u.leading_columns(n_s),
        rank_deficient: dec.rank(1e-9) < n_s,
        singular_values: dec.sigma,
    })
}

/// Per-entry projection onto the unit circle; zero entries stay zero.
fn unit_modulus_keep_zero(z: C64) -> C64 {
    let a = z.norm();
    if a == 0.0 {
        ZERO
    } else {
        z / a
    }
}

/// Phase of `z` as a unit-modulus value (zero maps to 1).
pub fn phase_only(z: C64) -> C64 {
    let a = z.norm();
    if a == 0.0 {
        ONE
    } else {
        z / a
    }
}

/// Per-iteration record of the greedy loop.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OmpTrace {
    /// Dictionary index chosen at each iteration.
    pub selected: Vec<usize>,
    /// `‖T − A⁽ᵏ⁾·D⁽ᵏ⁾‖_F` with `D⁽ᵏ⁾` the least-squares fit.
    pub residual_norms: Vec<f64>,
    /// Same error after rescaling `A⁽ᵏ⁾·D⁽ᵏ⁾` to the target's Frobenius norm.
    pub power_normalized_errors: Vec<f64>,
    /// Set when a normal-equation solve fell back to the SVD path.
    pub fallback_solves: usize,
}

struct OmpOutput {
    analog: ComplexMatrix,
    digital: ComplexMatrix,
    trace: OmpTrace,
}

/// Least squares through the normal equations, with every complex
/// multiplication charged to `counter`. Falls back to the (uncounted) SVD
/// route when the Gram matrix is not positive definite.
pub fn counted_least_squares(
    a: &ComplexMatrix,
    b: &ComplexMatrix,
    counter: &mut MultiplicationCounter,
) -> Result<(ComplexMatrix, bool)> {
    let gram = adjoint_mul_counted(a, a, counter)?;
    let rhs = adjoint_mul_counted(a, b, counter)?;
    match solve_hpd_counted(&gram, &rhs, counter) {
        Ok(x) => Ok((x, false)),
        Err(LinalgError::Singular { .. }) => Ok((linalg::least_squares(a, b)?.x, true)),
        Err(e) => Err(e.into()),
    }
}

/// Multiplications charged by [`counted_least_squares`] for an `m × k`
/// system with `s` right-hand sides.
pub fn counted_least_squares_cost(m: u64, k: u64, s: u64) -> u64 {
    let gram = k * m * k;
    let rhs = k * m * s;
    // LDLᴴ: column j costs j (pivot) + (k-1-j)·j (sub-diagonal entries).
    let ldl: u64 = (0..k).map(|j| j + (k - 1 - j) * j).sum();
    let tri = k * k.saturating_sub(1) * s + k * s;
    gram + rhs + ldl + tri
}

fn omp_core(
    target: &ComplexMatrix,
    dict: &PrecoderDictionary,
    n_rf: usize,
    counter: &mut MultiplicationCounter,
) -> Result<OmpOutput> {
    if dict.is_empty() {
        return Err(PrecoderError::Config("empty dictionary".into()));
    }
    if dict.atoms.rows() != target.rows() {
        return Err(PrecoderError::Config(format!(
            "dictionary atoms have length {}, target has {} rows",
            dict.atoms.rows(),
            target.rows()
        )));
    }
    if n_rf == 0 {
        return Err(PrecoderError::Config("n_rf must be positive".into()));
    }
    if dict.len() < n_rf {
        return Err(PrecoderError::DictionaryExhausted {
            atoms: dict.len(),
            n_rf,
        });
    }
    let target_norm = target.frobenius_norm();
    let mut residual = target.clone();
    let mut analog = ComplexMatrix::zeros(target.rows(), 0);
    let mut digital = ComplexMatrix::zeros(0, target.cols());
    let mut used = vec![false; dict.len()];
    let mut trace = OmpTrace::default();

    for _ in 0..n_rf {
        let psi = adjoint_mul_counted(&dict.atoms, &residual, counter)?;
        let mut best: Option<(usize, f64)> = None;
        for l in 0..dict.len() {
            if used[l] {
                continue;
            }
            let energy: f64 = psi.row(l).iter().map(|z| z.norm_sqr()).sum();
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|(_, e)| energy > e) {
                best = Some((l, energy));
            }
        }
        let (idx, _) = best.expect("dictionary has unused atoms");
        used[idx] = true;
        trace.selected.push(idx);

        let atom: Vec<C64> = dict.atoms.column(idx).into_iter().map(unit_modulus_keep_zero).collect();
        analog = analog.push_column(&atom);
        let (fit, fell_back) = counted_least_squares(&analog, target, counter)?;
        if fell_back {
            trace.fallback_solves += 1;
        }
        digital = fit;
        let approx = matmul_counted(&analog, &digital, counter)?;
        let diff = target - &approx;
        let rnorm = diff.frobenius_norm();
        trace.residual_norms.push(rnorm);
        let anorm = approx.frobenius_norm();
        let perr = if anorm > 0.0 {
            (target - &approx.scale_real(target_norm / anorm)).frobenius_norm()
        } else {
            target_norm
        };
        trace.power_normalized_errors.push(perr);
        residual = if rnorm > 1e-14 * target_norm.max(f64::MIN_POSITIVE) {
            diff.scale_real(1.0 / rnorm)
        } else {
            ComplexMatrix::zeros(target.rows(), target.cols())
        };
    }
    Ok(OmpOutput { analog, digital, trace })
}

/// OMP sparse precoder: greedily picks `n_rf` dictionary beams whose span
/// best explains `f_opt`, then fits the digital stage by least squares and
/// scales it to meet the power constraint.
pub fn omp_hybrid_precoder(f_opt: &ComplexMatrix, dict: &PrecoderDictionary, n_rf: usize) -> Result<HybridPrecoder> {
    let mut counter = MultiplicationCounter::new();
    Ok(omp_hybrid_precoder_traced(f_opt, dict, n_rf, &mut counter)?.0)
}

pub fn omp_hybrid_precoder_traced(
    f_opt: &ComplexMatrix,
    dict: &PrecoderDictionary,
    n_rf: usize,
    counter: &mut MultiplicationCounter,
) -> Result<(HybridPrecoder, OmpTrace)> {
    let n_s = f_opt.cols();
    if n_rf < n_s {
        return Err(PrecoderError::Config(format!("n_rf = {n_rf} < n_s = {n_s}")));
    }
    let out = omp_core(f_opt, dict, n_rf, counter)?;
    let product = matmul_counted(&out.analog, &out.digital, counter)?;
    let pre = HybridPrecoder {
        f_a: out.analog,
        f_d: out.digital,
        structure: AnalogStructure::FullyConnected,
    };
    let pre = scale_to_power(pre, product.frobenius_norm(), n_s)?;
    Ok((pre, out.trace))
}

/// Linear MMSE combiner for the effective channel `H·F` at `snr = ρ/σ²`:
/// `W = (ρ/N_s·H·F·Fᴴ·Hᴴ + σ²·I)⁻¹ · (√ρ/N_s)·H·F`. `snr = ∞` drops the
/// noise term (diagonal loading keeps the solve well posed).
pub fn mmse_combiner(h: &ComplexMatrix, f: &ComplexMatrix, snr: f64) -> Result<(ComplexMatrix, bool)> {
    if !(snr > 0.0) {
        return Err(PrecoderError::Config(format!("snr must be positive, got {snr}")));
    }
    let n_s = f.cols() as f64;
    let hf = matmul(h, f)?;
    let (signal, noise) = if snr.is_infinite() { (1.0, 0.0) } else { (snr, 1.0) };
    let mut cov = matmul(&hf, &hf.adjoint())?.scale_real(signal / n_s);
    let n = cov.rows();
    for i in 0..n {
        cov[(i, i)] += noise;
    }
    let rhs = hf.scale_real(signal.sqrt() / n_s);
    let mut scratch = MultiplicationCounter::new();
    match solve_hpd_counted(&cov, &rhs, &mut scratch) {
        Ok(w) => Ok((w, false)),
        Err(LinalgError::Singular { .. }) => {
            let eps = 1e-9 * cov.trace().re / n as f64;
            if !(eps > 0.0) {
                return Err(PrecoderError::Degenerate);
            }
            for i in 0..n {
                cov[(i, i)] += eps;
            }
            Ok((solve_hpd_counted(&cov, &rhs, &mut scratch)?, true))
        }
        Err(e) => Err(e.into()),
    }
}

/// Hybrid combiner: OMP over receive-side beams against the MMSE target for
/// the given precoder.
pub fn omp_hybrid_combiner(
    h: &ComplexMatrix,
    precoder: &ComplexMatrix,
    dict_rx: &PrecoderDictionary,
    n_rf: usize,
    snr: f64,
) -> Result<CombinerPair> {
    let (target, _) = mmse_combiner(h, precoder, snr)?;
    let mut counter = MultiplicationCounter::new();
    let out = omp_core(&target, dict_rx, n_rf, &mut counter)?;
    Ok(CombinerPair {
        w_a: out.analog,
        w_d: out.digital,
    })
}

/// Zero-forcing hybrid precoder: analog phases taken from the leading `n_rf`
/// right singular vectors of `H`, digital stage the pseudo-inverse of the
/// `n_s`-stream effective channel `U_sᴴ·H·F_A`.
pub fn zf_hybrid_precoder(h: &ComplexMatrix, n_rf: usize, n_s: usize) -> Result<HybridPrecoder> {
    let mut counter = MultiplicationCounter::new();
    zf_hybrid_precoder_counted(h, n_rf, n_s, &mut counter)
}

/// Multiplications charged for one SVD of an `m × n` matrix in the
/// complexity model: `4·m·n·min(m, n)`.
pub fn svd_cost(m: u64, n: u64) -> u64 {
    4 * m * n * m.min(n)
}

pub fn zf_hybrid_precoder_counted(
    h: &ComplexMatrix,
    n_rf: usize,
    n_s: usize,
    counter: &mut MultiplicationCounter,
) -> Result<HybridPrecoder> {
    let k = h.rows().min(h.cols());
    if n_s == 0 || n_rf < n_s {
        return Err(PrecoderError::Config(format!(
            "need 1 <= n_s <= n_rf (n_s = {n_s}, n_rf = {n_rf})"
        )));
    }
    if n_rf > k {
        return Err(PrecoderError::Config(format!(
            "n_rf = {n_rf} exceeds the {k} singular directions of a {}x{} channel",
            h.rows(),
            h.cols()
        )));
    }
    let dec = svd(h)?;
    counter.add(svd_cost(h.rows() as u64, h.cols() as u64));
    let f_a = dec.v.leading_columns(n_rf).map(phase_only);
    let u_s = dec.u.leading_columns(n_s);
    let hfa = matmul_counted(h, &f_a, counter)?;
    let eff = adjoint_mul_counted(&u_s, &hfa, counter)?;
    let eff_dec = svd(&eff)?;
    counter.add(svd_cost(n_s as u64, n_rf as u64));
    let rank = eff_dec.rank(1e-10);
    if rank < n_s {
        return Err(PrecoderError::RankDeficient { rank, needed: n_s });
    }
    let f_d = linalg::pinv(&eff)?;
    counter.add((n_rf * n_s * n_s) as u64);
    let product = matmul_counted(&f_a, &f_d, counter)?;
    let pre = HybridPrecoder {
        f_a,
        f_d,
        structure: AnalogStructure::FullyConnected,
    };
    scale_to_power(pre, product.frobenius_norm(), n_s)
}

/// Block-diagonal analog matrix: RF chain `k` drives antennas
/// `k·m .. (k+1)·m` with phases `phases[k·m ..]`.
pub fn make_subconnected(phases: &[f64], n_rf: usize) -> Result<ComplexMatrix> {
    let n_t = phases.len();
    if n_rf == 0 || n_t == 0 || !n_t.is_multiple_of(n_rf) {
        return Err(PrecoderError::Config(format!(
            "N_t = {n_t} is not a positive multiple of N_RF = {n_rf}"
        )));
    }
    let m = n_t / n_rf;
    let mut f_a = ComplexMatrix::zeros(n_t, n_rf);
    for (i, &p) in phases.iter().enumerate() {
        f_a[(i, i / m)] = C64::from_polar(1.0, p);
    }
    Ok(f_a)
}

/// Sub-connected hybrid precoder: each subarray's phases follow the
/// dominant direction of the matching rows of `f_opt`; digital stage by
/// least squares.
pub fn subconnected_hybrid_precoder(f_opt: &ComplexMatrix, n_rf: usize) -> Result<HybridPrecoder> {
    let (n_t, n_s) = f_opt.shape();
    if n_rf == 0 || !n_t.is_multiple_of(n_rf) {
        return Err(PrecoderError::Config(format!(
            "N_t = {n_t} is not a positive multiple of N_RF = {n_rf}"
        )));
    }
    if n_rf < n_s {
        return Err(PrecoderError::Config(format!("n_rf = {n_rf} < n_s = {n_s}")));
    }
    let m = n_t / n_rf;
    let mut phases = Vec::with_capacity(n_t);
    for k in 0..n_rf {
        let block = f_opt.submatrix(k * m, 0, m, n_s);
        let dir = if block.norm_sqr() > 0.0 {
            svd(&block)?.u.column(0)
        } else {
            vec![ONE; m]
        };
        phases.extend(dir.iter().map(|z| phase_only(*z).arg()));
    }
    let f_a = make_subconnected(&phases, n_rf)?;
    let f_d = linalg::least_squares(&f_a, f_opt)?.x;
    enforce_power(
        &HybridPrecoder {
            f_a,
            f_d,
            structure: AnalogStructure::SubConnected,
        },
        n_s,
    )
}

fn scale_to_power(mut p: HybridPrecoder, norm: f64, n_s: usize) -> Result<HybridPrecoder> {
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(PrecoderError::Degenerate);
    }
    p.f_d = p.f_d.scale_real((n_s as f64).sqrt() / norm);
    Ok(p)
}

/// Rescales `F_D` so that `‖F_A·F_D‖_F² = n_s`; `F_A` is left untouched.
pub fn enforce_power(p: &HybridPrecoder, n_s: usize) -> Result<HybridPrecoder> {
    let norm = frobenius_norm(&matmul(&p.f_a, &p.f_d)?);
    scale_to_power(p.clone(), norm, n_s)
}

/// Least-squares digital stage for a given analog stage, power-normalised.
pub fn fit_digital(f_a: ComplexMatrix, target: &ComplexMatrix, structure: AnalogStructure) -> Result<HybridPrecoder> {
    let n_s = target.cols();
    let f_d = linalg::least_squares(&f_a, target)?.x;
    enforce_power(&HybridPrecoder { f_a, f_d, structure }, n_s)
}

/// Random unit-modulus combiner with identity digital stage.
pub fn random_analog(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| C64::from_polar(1.0, rng.random::<f64>() * 2.0 * PI))
}
