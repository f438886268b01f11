//! Randomised invariants across the numerical kernel, channel generator,
//! precoders and metrics.

use hbf_core::channel::{array_response, ArrayGeometry, ChannelModel};
use hbf_core::linalg::{self, adjoint_mul, least_squares, log2_det_hpd, matmul, svd, ComplexMatrix, C64};
use hbf_core::metrics::{qam16_demap, qam16_map, spectral_efficiency, LinkBudget};
use hbf_core::precoders::{
    omp_hybrid_precoder, optimal_precoder, subconnected_hybrid_precoder, zf_hybrid_precoder, PrecoderDictionary,
};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = ComplexMatrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), r * c)
            .prop_map(move |v| ComplexMatrix::from_vec(r, c, v.into_iter().map(|(a, b)| C64::new(a, b)).collect()))
    })
}

fn gram_error(q: &ComplexMatrix) -> f64 {
    let g = adjoint_mul(q, q).unwrap();
    g.max_abs_diff(&ComplexMatrix::identity(g.rows()))
}

fn model(n_t: usize, n_r: usize) -> ChannelModel {
    ChannelModel {
        tx: ArrayGeometry::for_count(n_t, 28e9).unwrap(),
        rx: ArrayGeometry::for_count(n_r, 28e9).unwrap(),
        n_cl: 3,
        n_ray: 4,
        spread: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(m in matrix(9, 9)) {
        let s = svd(&m).unwrap();
        let scale = m.frobenius_norm().max(1.0);
        prop_assert!(s.reconstruct().max_abs_diff(&m) <= 1e-10 * scale);
        prop_assert!(gram_error(&s.u) <= 1e-10);
        prop_assert!(gram_error(&s.v) <= 1e-10);
        prop_assert!(s.sigma.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
        // Frobenius norm is the root sum of squared singular values
        let ss: f64 = s.sigma.iter().map(|x| x * x).sum();
        prop_assert!((ss - m.norm_sqr()).abs() <= 1e-10 * scale * scale);
    }

    #[test]
    fn least_squares_residual_is_orthogonal_to_range(a in matrix(8, 4), seed in 0u64..1000) {
        let b = ComplexMatrix::from_fn(a.rows(), 2, |r, c| {
            let t = (seed as f64 + 1.0) * (r as f64 + 0.5) * (c as f64 + 1.3);
            C64::new(t.sin(), t.cos())
        });
        let ls = least_squares(&a, &b).unwrap();
        let resid = &b - &matmul(&a, &ls.x).unwrap();
        let normal = adjoint_mul(&a, &resid).unwrap();
        prop_assert!(normal.frobenius_norm() <= 1e-9 * (1.0 + a.frobenius_norm() * b.frobenius_norm()));
    }

    #[test]
    fn log_det_matches_singular_values(m in matrix(6, 6)) {
        // M·Mᴴ + I is Hermitian positive definite with eigenvalues 1 + σ²
        let g = &matmul(&m, &m.adjoint()).unwrap() + &ComplexMatrix::identity(m.rows());
        let s = svd(&m).unwrap();
        // rows beyond the thin SVD contribute log2(1) = 0
        let expected: f64 = s.sigma.iter().map(|x| (1.0 + x * x).log2()).sum();
        prop_assert!((log2_det_hpd(&g).unwrap() - expected).abs() <= 1e-9);
    }

    #[test]
    fn inverse_round_trips(m in matrix(5, 5)) {
        prop_assume!(m.rows() == m.cols());
        let s = svd(&m).unwrap();
        prop_assume!(s.sigma.last().copied().unwrap_or(0.0) > 1e-3 * s.sigma[0]);
        let inv = linalg::inverse(&m).unwrap();
        let id = matmul(&m, &inv).unwrap();
        prop_assert!(id.max_abs_diff(&ComplexMatrix::identity(m.rows())) <= 1e-8);
    }

    #[test]
    fn steering_vectors_have_equal_modulus_entries(n in 1usize..80, az in -3.2f64..3.2, el in 0.0f64..3.2) {
        let g = ArrayGeometry::for_count(n, 28e9).unwrap();
        let a = array_response(&g, az, el);
        prop_assert_eq!(a.len(), n);
        let expected = 1.0 / (n as f64).sqrt();
        // entries share one modulus, 1/√N for a unit-norm response
        prop_assert!(a.iter().all(|z| (z.norm() - expected).abs() <= 1e-12));
    }

    #[test]
    fn channels_are_normalised(seed in 0u64..10_000) {
        let ch = model(16, 4).realize_normalized(seed, "prop", 0).unwrap();
        prop_assert!((ch.h.norm_sqr() - 64.0).abs() <= 1e-9);
    }

    #[test]
    fn every_scheme_meets_hardware_constraints(seed in 0u64..10_000, n_s in 1usize..=2) {
        let ch = model(16, 4).realize_normalized(seed, "prop", 1).unwrap();
        let opt = optimal_precoder(&ch.h, n_s).unwrap();
        let n_rf = 4;
        for p in [
            omp_hybrid_precoder(&opt.f_opt, &PrecoderDictionary::genie_tx(&ch), n_rf).unwrap(),
            zf_hybrid_precoder(&ch.h, n_rf, n_s).unwrap(),
            subconnected_hybrid_precoder(&opt.f_opt, n_rf).unwrap(),
        ] {
            prop_assert!(p.check_constraints(n_s, 1e-9).is_ok());
        }
    }

    #[test]
    fn optimal_single_stream_se_dominates_hybrids(seed in 0u64..10_000, snr in -10.0f64..10.0) {
        let ch = model(16, 4).realize_normalized(seed, "prop", 2).unwrap();
        let opt = optimal_precoder(&ch.h, 1).unwrap();
        let b = LinkBudget::from_snr_db(snr, 1).unwrap();
        let best = spectral_efficiency(&ch.h, &opt.f_opt, &opt.w_opt, &b).unwrap();
        let omp = omp_hybrid_precoder(&opt.f_opt, &PrecoderDictionary::genie_tx(&ch), 4).unwrap().effective();
        let zf = zf_hybrid_precoder(&ch.h, 4, 1).unwrap().effective();
        // with one stream, any unit-power precoder and combiner is bounded by σ₁²
        for f in [omp, zf] {
            let w = opt.w_opt.clone();
            prop_assert!(spectral_efficiency(&ch.h, &f, &w, &b).unwrap() <= best + 1e-9);
        }
    }

    #[test]
    fn spectral_efficiency_grows_with_snr(seed in 0u64..10_000, lo in -20.0f64..10.0, step in 0.1f64..10.0) {
        let ch = model(16, 4).realize_normalized(seed, "prop", 3).unwrap();
        let opt = optimal_precoder(&ch.h, 2).unwrap();
        let se = |snr: f64| {
            spectral_efficiency(&ch.h, &opt.f_opt, &opt.w_opt, &LinkBudget::from_snr_db(snr, 2).unwrap()).unwrap()
        };
        prop_assert!(se(lo + step) > se(lo));
    }

    #[test]
    fn qam16_round_trips_under_small_noise(bits in 0u8..16, nr in -0.15f64..0.15, ni in -0.15f64..0.15) {
        let z = qam16_map(bits) + C64::new(nr, ni);
        prop_assert_eq!(qam16_demap(z), bits);
    }
}

#[test]
fn qam16_constellation_has_unit_energy_and_gray_neighbours() {
    let points: Vec<C64> = (0..16u8).map(qam16_map).collect();
    let energy: f64 = points.iter().map(|z| z.norm_sqr()).sum::<f64>() / 16.0;
    assert!((energy - 1.0).abs() < 1e-12);
    let d_min = 2.0 / 10f64.sqrt();
    for a in 0..16u8 {
        for b in 0..16u8 {
            let d = (points[a as usize] - points[b as usize]).norm();
            if (d - d_min).abs() < 1e-9 {
                assert_eq!((a ^ b).count_ones(), 1, "neighbours {a:04b} and {b:04b}");
            }
        }
    }
}
