//! Planar arrays, codebooks, expected beamforming gains and the sector map.
//!
//! Conventions: an array lies in its local y-z plane with broadside along
//! local +x. A direction `(az, el)` maps to the unit vector
//! `(cos el cos az, cos el sin az, sin el)`. Element `(r, c)` sits at
//! `(0, c*d, r*d)` wavelengths and is stored at index `r * cols + c`.
//! Noise power is normalized to 1, so transmit powers are SNR ratios.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform planar array dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub rows: usize,
    pub cols: usize,
    /// Element spacing in wavelengths.
    #[serde(default = "default_spacing")]
    pub element_spacing: f64,
}

fn default_spacing() -> f64 {
    0.5
}

impl ArrayGeometry {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        Self::with_spacing(rows, cols, 0.5)
    }

    pub fn with_spacing(rows: usize, cols: usize, element_spacing: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "array must have at least one row and column, got {rows}x{cols}"
            )));
        }
        if !(element_spacing > 0.0) {
            return Err(Error::InvalidArgument("element spacing must be positive".into()));
        }
        Ok(Self { rows, cols, element_spacing })
    }

    pub fn n_elements(&self) -> usize {
        self.rows * self.cols
    }
}

/// Azimuth/elevation pair in radians, expressed in an array's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Angle {
    pub az: f64,
    pub el: f64,
}

impl Angle {
    pub fn new(az: f64, el: f64) -> Self {
        Self { az, el }
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (se, ce) = self.el.sin_cos();
        let (sa, ca) = self.az.sin_cos();
        [ce * ca, ce * sa, se]
    }

    pub fn from_vector(v: [f64; 3]) -> Self {
        let horiz = v[0].hypot(v[1]);
        Self { az: v[1].atan2(v[0]), el: v[2].atan2(horiz) }
    }
}

/// UPA steering vector for `angle`, normalized to unit L2 norm.
pub fn array_response(geom: &ArrayGeometry, angle: Angle) -> Vec<Complex64> {
    let u = angle.unit_vector();
    let scale = 1.0 / (geom.n_elements() as f64).sqrt();
    let k = 2.0 * PI * geom.element_spacing;
    let mut out = Vec::with_capacity(geom.n_elements());
    for r in 0..geom.rows {
        for c in 0..geom.cols {
            let phase = k * (c as f64 * u[1] + r as f64 * u[2]);
            out.push(Complex64::from_polar(scale, phase));
        }
    }
    out
}

/// `a^H b`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// A list of unit-norm beamforming vectors with their pointing directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub vectors: Vec<Vec<Complex64>>,
    pub angles: Vec<Angle>,
}

impl Codebook {
    pub fn from_angles(geom: &ArrayGeometry, angles: Vec<Angle>) -> Self {
        let vectors = angles.iter().map(|&a| array_response(geom, a)).collect();
        Self { vectors, angles }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `|d(angle)^H v|^2` for every codebook vector `v`.
    pub fn beam_gains(&self, geom: &ArrayGeometry, angle: Angle) -> Vec<f64> {
        let d = array_response(geom, angle);
        self.vectors.iter().map(|v| inner(&d, v).norm_sqr()).collect()
    }
}

/// 1-based joint index of a (tx beam, rx beam) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BeamPairIndex(pub usize);

impl BeamPairIndex {
    /// `tx` and `rx` are 1-based beam numbers.
    pub fn from_pair(tx: usize, rx: usize, n_rx: usize) -> Self {
        debug_assert!(tx >= 1 && rx >= 1 && rx <= n_rx);
        Self((tx - 1) * n_rx + rx)
    }

    /// Inverse of [`from_pair`](Self::from_pair), 1-based.
    pub fn pair(self, n_rx: usize) -> (usize, usize) {
        let z = self.0 - 1;
        (z / n_rx + 1, z % n_rx + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosPath {
    pub aoa: Angle,
    pub aod: Angle,
    /// Linear power pathloss.
    pub pathloss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlosPath {
    pub aoa: Angle,
    pub aod: Angle,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub los: LosPath,
    pub nlos: Vec<NlosPath>,
}

impl PathSet {
    pub fn los_only(los: LosPath) -> Self {
        Self { los, nlos: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.los.pathloss > 0.0) {
            return Err(Error::NonPositivePathloss(self.los.pathloss));
        }
        if let Some(p) = self.nlos.iter().find(|p| !(p.variance >= 0.0)) {
            return Err(Error::InvalidArgument(format!("negative NLOS variance {}", p.variance)));
        }
        Ok(())
    }
}

/// Transmit and receive arrays with their codebooks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub tx_geom: ArrayGeometry,
    pub rx_geom: ArrayGeometry,
    pub tx: Codebook,
    pub rx: Codebook,
}

impl Codebooks {
    pub fn n_pairs(&self) -> usize {
        self.tx.len() * self.rx.len()
    }

    /// Beam vectors `(c, f)` of a BPI.
    pub fn pair_vectors(&self, bpi: BeamPairIndex) -> (&[Complex64], &[Complex64]) {
        let (t, r) = bpi.pair(self.rx.len());
        (&self.tx.vectors[t - 1], &self.rx.vectors[r - 1])
    }

    fn m_product(&self) -> f64 {
        (self.tx_geom.n_elements() * self.rx_geom.n_elements()) as f64
    }

    /// Expected gain `G_LOS + G_NLOS` of every BPI, in BPI order.
    pub fn all_pair_gains(&self, path: &PathSet) -> Vec<f64> {
        let m = self.m_product();
        let tx = self.tx.beam_gains(&self.tx_geom, path.los.aod);
        let rx = self.rx.beam_gains(&self.rx_geom, path.los.aoa);
        let scale = m / path.los.pathloss;
        let mut out: Vec<f64> =
            tx.iter().flat_map(|a| rx.iter().map(move |b| scale * a * b)).collect();
        for p in &path.nlos {
            let tx = self.tx.beam_gains(&self.tx_geom, p.aod);
            let rx = self.rx.beam_gains(&self.rx_geom, p.aoa);
            let s = m * p.variance;
            for (i, a) in tx.iter().enumerate() {
                for (j, b) in rx.iter().enumerate() {
                    out[i * rx.len() + j] += s * a * b;
                }
            }
        }
        out
    }

    /// Expected LOS gain of every BPI, in BPI order.
    pub fn all_los_gains(&self, los: &LosPath) -> Vec<f64> {
        self.all_pair_gains(&PathSet::los_only(*los))
    }
}

/// `(M_tx M_rx / PL) |d_tx(aod)^H c|^2 |d_rx(aoa)^H f|^2`.
pub fn expected_los_gain(
    tx_geom: &ArrayGeometry,
    rx_geom: &ArrayGeometry,
    c: &[Complex64],
    f: &[Complex64],
    path: &PathSet,
) -> Result<f64> {
    path.validate()?;
    let m = (tx_geom.n_elements() * rx_geom.n_elements()) as f64;
    let a = inner(&array_response(tx_geom, path.los.aod), c).norm_sqr();
    let b = inner(&array_response(rx_geom, path.los.aoa), f).norm_sqr();
    Ok(m / path.los.pathloss * a * b)
}

/// `M_tx M_rx sum_l var_l |d_tx(aod_l)^H c|^2 |d_rx(aoa_l)^H f|^2`.
pub fn expected_nlos_gain(
    tx_geom: &ArrayGeometry,
    rx_geom: &ArrayGeometry,
    c: &[Complex64],
    f: &[Complex64],
    path: &PathSet,
) -> Result<f64> {
    path.validate()?;
    let m = (tx_geom.n_elements() * rx_geom.n_elements()) as f64;
    Ok(path
        .nlos
        .iter()
        .map(|p| {
            let a = inner(&array_response(tx_geom, p.aod), c).norm_sqr();
            let b = inner(&array_response(rx_geom, p.aoa), f).norm_sqr();
            m * p.variance * a * b
        })
        .sum())
}

/// Partition of a position grid into SBPI sectors with per-sector power control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorMap {
    /// SBPI of each grid cell.
    pub sbpi_of_cell: Vec<BeamPairIndex>,
    /// Distinct SBPIs, ascending.
    pub active_sbpis: Vec<BeamPairIndex>,
    /// Index into `active_sbpis` for each cell.
    pub state_of_cell: Vec<usize>,
    /// Transmit power (relative to noise) per active SBPI.
    pub tx_power: Vec<f64>,
    /// Expected LOS gain of each cell on its own SBPI.
    pub aligned_gain: Vec<f64>,
    pub snr_ba: f64,
}

impl SectorMap {
    pub fn n_states(&self) -> usize {
        self.active_sbpis.len()
    }

    pub fn state_of(&self, bpi: BeamPairIndex) -> Option<usize> {
        self.active_sbpis.binary_search(&bpi).ok()
    }

    /// Cell count per active SBPI.
    pub fn sector_sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_states()];
        for &s in &self.state_of_cell {
            out[s] += 1;
        }
        out
    }

    /// `max_j P_j / min_j P_j`.
    pub fn power_ratio(&self) -> f64 {
        let max = self.tx_power.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.tx_power.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    }
}

/// Assigns each cell its strongest BPI by expected LOS gain and sets the
/// per-sector power `P_j = snr_ba / min_{x in X_j} G_LOS(j, x)`.
pub fn compute_sector_map(
    codebooks: &Codebooks,
    cell_paths: &[LosPath],
    snr_ba: f64,
) -> Result<SectorMap> {
    if cell_paths.is_empty() {
        return Err(Error::InvalidArgument("coverage grid is empty".into()));
    }
    let mut sbpi_of_cell = Vec::with_capacity(cell_paths.len());
    let mut aligned_gain = Vec::with_capacity(cell_paths.len());
    for (cell, los) in cell_paths.iter().enumerate() {
        if !(los.pathloss > 0.0) {
            return Err(Error::NonPositivePathloss(los.pathloss));
        }
        let gains = codebooks.all_los_gains(los);
        let mut best = 0;
        for (i, &g) in gains.iter().enumerate() {
            if g > gains[best] {
                best = i;
            }
        }
        if !(gains[best] > 0.0) {
            return Err(Error::ZeroGainCell { cell });
        }
        sbpi_of_cell.push(BeamPairIndex(best + 1));
        aligned_gain.push(gains[best]);
    }
    let mut active_sbpis = sbpi_of_cell.clone();
    active_sbpis.sort_unstable();
    active_sbpis.dedup();
    let state_of_cell: Vec<usize> = sbpi_of_cell
        .iter()
        .map(|b| active_sbpis.binary_search(b).expect("cell sbpi is active"))
        .collect();
    let mut min_gain = vec![f64::INFINITY; active_sbpis.len()];
    for (&s, &g) in state_of_cell.iter().zip(&aligned_gain) {
        min_gain[s] = min_gain[s].min(g);
    }
    let tx_power = min_gain.iter().map(|g| snr_ba / g).collect();
    Ok(SectorMap { sbpi_of_cell, active_sbpis, state_of_cell, tx_power, aligned_gain, snr_ba })
}

/// Misalignment-to-alignment statistics over all (cell, misaligned active BPI) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    /// `max P_j G(j, x) / SNR_BA` over misaligned pairs.
    pub worst_case: f64,
    /// Mean of the same ratio over misaligned pairs.
    pub mean: f64,
    /// Mean over cells of the strongest misaligned ratio.
    pub mean_strongest: f64,
}

/// Estimates the misalignment ratio. For each cell, `paths` is called
/// `n_draws` times and the expected gain is averaged over the draws, so
/// random NLOS directions enter through their mean. Returns zeros when
/// only one SBPI is active.
pub fn estimate_rho<F>(
    map: &SectorMap,
    codebooks: &Codebooks,
    n_cells: usize,
    mut paths: F,
    n_draws: usize,
) -> RhoEstimate
where
    F: FnMut(usize) -> PathSet,
{
    let n = map.n_states();
    if n < 2 {
        return RhoEstimate { worst_case: 0.0, mean: 0.0, mean_strongest: 0.0 };
    }
    let draws = n_draws.max(1);
    let (mut worst, mut sum, mut count, mut strongest_sum) = (0.0f64, 0.0, 0usize, 0.0);
    for cell in 0..n_cells {
        let mut avg = vec![0.0; n];
        for _ in 0..draws {
            let g = codebooks.all_pair_gains(&paths(cell));
            for (s, b) in map.active_sbpis.iter().enumerate() {
                avg[s] += g[b.0 - 1] / draws as f64;
            }
        }
        let own = map.state_of_cell[cell];
        let mut strongest = 0.0f64;
        for s in (0..n).filter(|&s| s != own) {
            let ratio = map.tx_power[s] * avg[s] / map.snr_ba;
            worst = worst.max(ratio);
            strongest = strongest.max(ratio);
            sum += ratio;
            count += 1;
        }
        strongest_sum += strongest;
    }
    RhoEstimate {
        worst_case: worst,
        mean: sum / count as f64,
        mean_strongest: strongest_sum / n_cells as f64,
    }
}

/// One small-scale fading draw of the path gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDraw {
    /// Gains `h_l`, LOS first.
    pub gains: Vec<Complex64>,
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Draws `h_0 ~ CN(0, 1/PL)` and `h_l ~ CN(0, var_l)`.
pub fn sample_path_gains<R: Rng + ?Sized>(path: &PathSet, rng: &mut R) -> ChannelDraw {
    let mut gains = Vec::with_capacity(1 + path.nlos.len());
    gains.push(complex_normal(rng, 1.0 / path.los.pathloss));
    for p in &path.nlos {
        gains.push(complex_normal(rng, p.variance));
    }
    ChannelDraw { gains }
}

/// Channel matrix `H = sqrt(M_tx M_rx) sum_l h_l d_rx(aoa_l) d_tx(aod_l)^H`,
/// row-major `M_rx x M_tx`.
pub fn channel_matrix(
    tx_geom: &ArrayGeometry,
    rx_geom: &ArrayGeometry,
    path: &PathSet,
    draw: &ChannelDraw,
) -> Vec<Complex64> {
    let (mt, mr) = (tx_geom.n_elements(), rx_geom.n_elements());
    let m = ((mt * mr) as f64).sqrt();
    let mut h = vec![Complex64::new(0.0, 0.0); mr * mt];
    let dirs = std::iter::once((path.los.aoa, path.los.aod))
        .chain(path.nlos.iter().map(|p| (p.aoa, p.aod)));
    for ((aoa, aod), g) in dirs.zip(&draw.gains) {
        let dr = array_response(rx_geom, aoa);
        let dt = array_response(tx_geom, aod);
        for (i, a) in dr.iter().enumerate() {
            let ai = a * g * m;
            for (j, b) in dt.iter().enumerate() {
                h[i * mt + j] += ai * b.conj();
            }
        }
    }
    h
}

/// Fresh channel matrix draw for one slot.
pub fn sample_channel<R: Rng + ?Sized>(
    tx_geom: &ArrayGeometry,
    rx_geom: &ArrayGeometry,
    path: &PathSet,
    rng: &mut R,
) -> Vec<Complex64> {
    let draw = sample_path_gains(path, rng);
    channel_matrix(tx_geom, rx_geom, path, &draw)
}

/// Per-path beamforming coefficients `sqrt(M_tx M_rx) (f^H d_rx)(d_tx^H c)`
/// for a fixed beam pair, so that `f^H H c = sum_l h_l a_l`.
pub fn effective_coefficients(codebooks: &Codebooks, bpi: BeamPairIndex, path: &PathSet) -> Vec<Complex64> {
    let (c, f) = codebooks.pair_vectors(bpi);
    let m = codebooks.m_product().sqrt();
    std::iter::once((path.los.aoa, path.los.aod))
        .chain(path.nlos.iter().map(|p| (p.aoa, p.aod)))
        .map(|(aoa, aod)| {
            let fr = inner(f, &array_response(&codebooks.rx_geom, aoa));
            let tc = inner(&array_response(&codebooks.tx_geom, aod), c);
            m * fr * tc
        })
        .collect()
}

/// Free-space pathloss `(4 pi d / lambda)^2`.
pub fn free_space_pathloss(distance: f64, wavelength: f64) -> f64 {
    (4.0 * PI * distance / wavelength).powi(2)
}

/// Rotates a global vector into a frame whose +x axis has heading `yaw`.
pub fn to_local(v: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]]
}

/// Direction (uniform on the sphere) with azimuth U[0, 2pi] and polar angle U[0, pi].
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Angle {
    let az = rng.random_range(0.0..2.0 * PI);
    let polar = rng.random_range(0.0..PI);
    Angle::new(az, PI / 2.0 - polar)
}
