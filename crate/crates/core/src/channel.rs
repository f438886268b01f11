//! Clustered Saleh-Valenzuela channels between two uniform planar arrays.
//!
//! `H` is always `N_r × N_t`: rows index receive antennas, columns transmit
//! antennas, so that `y = √ρ·H·x + n`.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{ComplexMatrix, C64};
use crate::rng::{self, SimRng};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("channel has zero Frobenius norm and cannot be normalised")]
    Degenerate,
    #[error("invalid array geometry: {0}")]
    Geometry(String),
    #[error("cluster set needs at least one cluster and one ray (got {n_cl}x{n_ray})")]
    EmptyClusters { n_cl: usize, n_ray: usize },
}

/// Uniform planar array in the y-z plane: `l_elems` along y, `b_elems` along z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub l_elems: usize,
    pub b_elems: usize,
    /// Element spacing in metres.
    pub spacing: f64,
    /// Carrier wavelength in metres.
    pub wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(l_elems: usize, b_elems: usize, spacing: f64, wavelength: f64) -> Result<Self, ChannelError> {
        if l_elems == 0 || b_elems == 0 {
            return Err(ChannelError::Geometry(format!(
                "element counts must be positive (got {l_elems}x{b_elems})"
            )));
        }
        if !(spacing > 0.0 && wavelength > 0.0 && spacing.is_finite() && wavelength.is_finite()) {
            return Err(ChannelError::Geometry(format!(
                "spacing and wavelength must be positive (got d={spacing}, lambda={wavelength})"
            )));
        }
        Ok(Self {
            l_elems,
            b_elems,
            spacing,
            wavelength,
        })
    }

    /// Half-wavelength spaced array at `carrier_hz`.
    pub fn half_wavelength(l_elems: usize, b_elems: usize, carrier_hz: f64) -> Result<Self, ChannelError> {
        let wavelength = SPEED_OF_LIGHT / carrier_hz;
        Self::new(l_elems, b_elems, wavelength / 2.0, wavelength)
    }

    /// Most nearly square half-wavelength array with `n` elements.
    pub fn for_count(n: usize, carrier_hz: f64) -> Result<Self, ChannelError> {
        let (l, b) = upa_layout(n);
        Self::half_wavelength(l, b, carrier_hz)
    }

    pub fn n_elems(&self) -> usize {
        self.l_elems * self.b_elems
    }
}

/// Factorises `n = L·B` with `L ≤ B` and `L` as large as possible.
pub fn upa_layout(n: usize) -> (usize, usize) {
    let mut l = (n as f64).sqrt().floor() as usize;
    while l > 1 && !n.is_multiple_of(l) {
        l -= 1;
    }
    let l = l.max(1);
    (l, n / l)
}

/// Unit-norm UPA steering vector. Element `(m, n)` sits at index `m·B + n`
/// and carries phase `(2π/λ)·d·(m·sinθ·sinφ + n·cosθ)`.
pub fn array_response(geom: &ArrayGeometry, azimuth: f64, elevation: f64) -> Vec<C64> {
    let (l, b) = (geom.l_elems, geom.b_elems);
    let k = TAU / geom.wavelength * geom.spacing;
    let uy = elevation.sin() * azimuth.sin();
    let uz = elevation.cos();
    let amp = 1.0 / ((l * b) as f64).sqrt();
    let mut out = Vec::with_capacity(l * b);
    for m in 0..l {
        for n in 0..b {
            let phase = k * (m as f64 * uy + n as f64 * uz);
            out.push(C64::from_polar(amp, phase));
        }
    }
    out
}

/// One propagation path. Angles are radians in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaySpec {
    pub gain: C64,
    pub aod_azimuth: f64,
    pub aod_elevation: f64,
    pub aoa_azimuth: f64,
    pub aoa_elevation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub n_cl: usize,
    pub n_ray: usize,
    /// Cluster-major: ray `k` of cluster `i` is `rays[i·n_ray + k]`.
    pub rays: Vec<RaySpec>,
}

impl ClusterSet {
    pub fn new(n_cl: usize, n_ray: usize, rays: Vec<RaySpec>) -> Result<Self, ChannelError> {
        if n_cl == 0 || n_ray == 0 {
            return Err(ChannelError::EmptyClusters { n_cl, n_ray });
        }
        assert_eq!(rays.len(), n_cl * n_ray, "ray count must equal n_cl * n_ray");
        Ok(Self { n_cl, n_ray, rays })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Intra-cluster angular spread: rays scatter around a uniformly drawn
/// cluster centre with a Laplacian of the given standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularSpread {
    pub std_deg: f64,
    /// Pins the first cluster's departure centre `(azimuth, elevation)`, radians.
    pub pinned_tx_center: Option<(f64, f64)>,
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Circularly-symmetric complex Gaussian with unit variance.
pub fn sample_cn01(rng: &mut SimRng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn uniform_angle(rng: &mut SimRng) -> f64 {
    wrap_angle(rng.random::<f64>() * TAU)
}

fn laplace(rng: &mut SimRng, std: f64) -> f64 {
    let b = std / std::f64::consts::SQRT_2;
    let u: f64 = rng.random::<f64>() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

/// Every angle independently uniform on `[0, 2π)`, gains CN(0, 1).
pub fn sample_cluster_set(rng: &mut SimRng, n_cl: usize, n_ray: usize) -> Result<ClusterSet, ChannelError> {
    sample_cluster_set_with_spread(rng, n_cl, n_ray, None)
}

pub fn sample_cluster_set_with_spread(
    rng: &mut SimRng,
    n_cl: usize,
    n_ray: usize,
    spread: Option<AngularSpread>,
) -> Result<ClusterSet, ChannelError> {
    if n_cl == 0 || n_ray == 0 {
        return Err(ChannelError::EmptyClusters { n_cl, n_ray });
    }
    let mut rays = Vec::with_capacity(n_cl * n_ray);
    for i in 0..n_cl {
        match spread {
            None => {
                for _ in 0..n_ray {
                    let gain = sample_cn01(rng);
                    rays.push(RaySpec {
                        gain,
                        aod_azimuth: uniform_angle(rng),
                        aod_elevation: uniform_angle(rng),
                        aoa_azimuth: uniform_angle(rng),
                        aoa_elevation: uniform_angle(rng),
                    });
                }
            }
            Some(sp) => {
                let mut center = [
                    uniform_angle(rng),
                    uniform_angle(rng),
                    uniform_angle(rng),
                    uniform_angle(rng),
                ];
                if i == 0 {
                    if let Some((az, el)) = sp.pinned_tx_center {
                        center[0] = wrap_angle(az);
                        center[1] = wrap_angle(el);
                    }
                }
                let s = sp.std_deg.to_radians();
                for _ in 0..n_ray {
                    let gain = sample_cn01(rng);
                    rays.push(RaySpec {
                        gain,
                        aod_azimuth: wrap_angle(center[0] + laplace(rng, s)),
                        aod_elevation: wrap_angle(center[1] + laplace(rng, s)),
                        aoa_azimuth: wrap_angle(center[2] + laplace(rng, s)),
                        aoa_elevation: wrap_angle(center[3] + laplace(rng, s)),
                    });
                }
            }
        }
    }
    ClusterSet::new(n_cl, n_ray, rays)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `N_r × N_t`.
    pub h: ComplexMatrix,
    pub clusters: ClusterSet,
    pub tx_geometry: ArrayGeometry,
    pub rx_geometry: ArrayGeometry,
    /// Master seed of the stream that produced the clusters (0 when built by hand).
    pub seed: u64,
    /// Stream index within the generating domain.
    pub index: u64,
}

impl ChannelRealization {
    pub fn n_t(&self) -> usize {
        self.h.cols()
    }

    pub fn n_r(&self) -> usize {
        self.h.rows()
    }
}

/// `H = √(N_t·N_r / (N_cl·N_ray)) · Σ α·a_r·a_tᴴ`.
pub fn build_channel(tx: &ArrayGeometry, rx: &ArrayGeometry, clusters: &ClusterSet) -> ChannelRealization {
    let n_t = tx.n_elems();
    let n_r = rx.n_elems();
    let scale = ((n_t * n_r) as f64 / clusters.rays.len() as f64).sqrt();
    let mut h = ComplexMatrix::zeros(n_r, n_t);
    for ray in &clusters.rays {
        let a_r = array_response(rx, ray.aoa_azimuth, ray.aoa_elevation);
        let a_t = array_response(tx, ray.aod_azimuth, ray.aod_elevation);
        let g = ray.gain * scale;
        for (r, ar) in a_r.iter().enumerate() {
            let coef = g * ar;
            let row = &mut h.as_mut_slice()[r * n_t..(r + 1) * n_t];
            for (hrc, at) in row.iter_mut().zip(&a_t) {
                *hrc += coef * at.conj();
            }
        }
    }
    ChannelRealization {
        h,
        clusters: clusters.clone(),
        tx_geometry: *tx,
        rx_geometry: *rx,
        seed: 0,
        index: 0,
    }
}

/// Rescales so that `‖H‖_F² = N_t·N_r`.
pub fn normalize_channel(ch: &ChannelRealization) -> Result<ChannelRealization, ChannelError> {
    let norm = ch.h.frobenius_norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ChannelError::Degenerate);
    }
    let target = ((ch.n_t() * ch.n_r()) as f64).sqrt();
    let mut out = ch.clone();
    out.h = ch.h.scale_real(target / norm);
    Ok(out)
}

/// Everything needed to draw channels reproducibly.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub tx: ArrayGeometry,
    pub rx: ArrayGeometry,
    pub n_cl: usize,
    pub n_ray: usize,
    pub spread: Option<AngularSpread>,
}

impl ChannelModel {
    /// Channel number `index` of `domain` under `master`, unnormalised.
    pub fn realize(&self, master: u64, domain: &str, index: u64) -> Result<ChannelRealization, ChannelError> {
        let mut rng = rng::stream(master, domain, index);
        let clusters = sample_cluster_set_with_spread(&mut rng, self.n_cl, self.n_ray, self.spread)?;
        let mut ch = build_channel(&self.tx, &self.rx, &clusters);
        ch.seed = master;
        ch.index = index;
        Ok(ch)
    }

    pub fn realize_normalized(
        &self,
        master: u64,
        domain: &str,
        index: u64,
    ) -> Result<ChannelRealization, ChannelError> {
        normalize_channel(&self.realize(master, domain, index)?)
    }

    pub fn batch(&self, master: u64, domain: &str, count: usize) -> Result<Vec<ChannelRealization>, ChannelError> {
        (0..count as u64)
            .map(|i| self.realize_normalized(master, domain, i))
            .collect()
    }
}

/// Azimuth/elevation pair of every ray's departure, for genie dictionaries.
pub fn departure_angles(clusters: &ClusterSet) -> Vec<(f64, f64)> {
    clusters.rays.iter().map(|r| (r.aod_azimuth, r.aod_elevation)).collect()
}

pub fn arrival_angles(clusters: &ClusterSet) -> Vec<(f64, f64)> {
    clusters.rays.iter().map(|r| (r.aoa_azimuth, r.aoa_elevation)).collect()
}
