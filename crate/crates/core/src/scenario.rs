//! Road layouts, codebook construction, and scenario configuration files.
//!
//! The BS sits at `(0, 0, h_bs)` facing +x. The main road runs along +y at
//! `x = D`. In the T-shaped layout a stem leaves the main road at the
//! junction and runs along +x, away from the BS.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    compute_sector_map, estimate_rho, free_space_pathloss, random_direction, to_local, Angle, ArrayGeometry,
    Codebook, Codebooks, LosPath, NlosPath, PathSet, RhoEstimate, SectorMap,
};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Highway,
    TShaped,
}

/// Road segment a UE is travelling on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Main,
    Stem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraysConfig {
    pub bs: ArrayGeometry,
    pub ue: ArrayGeometry,
}

impl Default for ArraysConfig {
    fn default() -> Self {
        Self {
            bs: ArrayGeometry { rows: 8, cols: 16, element_spacing: 0.5 },
            ue: ArrayGeometry { rows: 8, cols: 4, element_spacing: 0.5 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    /// BS beams per tier, spaced by the half-power width in `u_y`.
    pub bs_azimuth_beams: usize,
    /// Targeted ground line of each BS tier, as an x offset from the road centerline (m).
    pub bs_tier_offsets: Vec<f64>,
    pub ue_azimuth_beams: usize,
    pub ue_elevation_beams: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self { bs_azimuth_beams: 16, bs_tier_offsets: vec![0.0, 30.0], ue_azimuth_beams: 4, ue_elevation_beams: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadConfig {
    pub kind: ScenarioKind,
    /// BS to road centerline distance (m).
    pub road_distance: f64,
    pub bs_height: f64,
    pub ue_height: f64,
    pub lane_separation: f64,
    /// Coverage span along the main road, `y` in `[span_start, span_end]`.
    pub span_start: f64,
    pub span_end: f64,
    /// Junction position as a fraction of the span (T-shaped only).
    pub junction_fraction: f64,
    pub stem_length: f64,
    /// Along-road grid resolution (m).
    pub grid_resolution: f64,
}

impl RoadConfig {
    pub fn highway() -> Self {
        Self {
            kind: ScenarioKind::Highway,
            road_distance: 22.0,
            bs_height: 10.0,
            ue_height: 1.5,
            lane_separation: 3.7,
            span_start: -21.0,
            span_end: 18.0,
            junction_fraction: 2.0 / 3.0,
            stem_length: 0.0,
            grid_resolution: 0.25,
        }
    }

    pub fn t_shaped() -> Self {
        Self { kind: ScenarioKind::TShaped, stem_length: 15.0, ..Self::highway() }
    }

    pub fn span(&self) -> f64 {
        self.span_end - self.span_start
    }

    /// Along-road coordinate of the junction on the main segment.
    pub fn junction(&self) -> f64 {
        self.junction_fraction * self.span()
    }

    pub fn segment_length(&self, seg: Segment) -> f64 {
        match seg {
            Segment::Main => self.span(),
            Segment::Stem => self.stem_length,
        }
    }

    pub fn has_stem(&self) -> bool {
        self.kind == ScenarioKind::TShaped && self.stem_length > 0.0
    }

    /// Global position of a UE at along-segment coordinate `along`.
    pub fn position(&self, seg: Segment, lane: usize, along: f64) -> [f64; 3] {
        let off = (lane as f64 - 0.5) * self.lane_separation;
        match seg {
            Segment::Main => [self.road_distance + off, self.span_start + along, self.ue_height],
            Segment::Stem => [
                self.road_distance + self.lane_separation + along,
                self.span_start + self.junction() - off,
                self.ue_height,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub carrier_ghz: f64,
    pub nlos_paths: usize,
    /// Each NLOS path has variance `nlos_relative_power / PL`.
    pub nlos_relative_power: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { carrier_ghz: 30.0, nlos_paths: 0, nlos_relative_power: 0.1 }
    }
}

/// Complete scenario description; the TOML file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub arrays: ArraysConfig,
    #[serde(default)]
    pub codebooks: CodebookConfig,
    pub road: RoadConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    pub snr_ba_db: f64,
}

impl ScenarioConfig {
    pub fn highway() -> Self {
        Self {
            arrays: ArraysConfig::default(),
            codebooks: CodebookConfig::default(),
            road: RoadConfig::highway(),
            channel: ChannelConfig::default(),
            snr_ba_db: 20.0,
        }
    }

    pub fn t_shaped() -> Self {
        Self {
            road: RoadConfig::t_shaped(),
            channel: ChannelConfig { nlos_paths: 2, ..ChannelConfig::default() },
            ..Self::highway()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / (self.channel.carrier_ghz * 1e9)
    }
}

/// One coverage grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub segment: Segment,
    pub lane: usize,
    /// Cell center along its segment (m).
    pub along: f64,
    pub position: [f64; 3],
}

/// A built scenario: codebooks, grid and sector map.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub codebooks: Codebooks,
    pub cells: Vec<Cell>,
    pub sector_map: SectorMap,
    cells_per_lane: [usize; 2],
}

pub const N_LANES: usize = 2;

/// BS codebook: per tier, `n` beams whose `u_y` centers are spaced by the
/// half-power width, each pointed at its tier's ground line.
pub fn build_bs_codebook(cfg: &ScenarioConfig) -> Result<Codebook> {
    let geom = &cfg.arrays.bs;
    let cb = &cfg.codebooks;
    if cb.bs_azimuth_beams == 0 || cb.bs_tier_offsets.is_empty() {
        return Err(Error::Config("BS codebook needs at least one beam and one tier".into()));
    }
    let hpbw = 0.8859 / (geom.cols as f64 * geom.element_spacing);
    let n = cb.bs_azimuth_beams;
    let dz = cfg.road.ue_height - cfg.road.bs_height;
    let mut angles = Vec::with_capacity(n * cb.bs_tier_offsets.len());
    for &offset in &cb.bs_tier_offsets {
        let x = cfg.road.road_distance + offset;
        for p in 0..n {
            let u = (p as f64 - (n as f64 - 1.0) / 2.0) * hpbw;
            if u.abs() >= 1.0 {
                return Err(Error::Config("BS azimuth tiling exceeds visible region".into()));
            }
            let y = u * (x * x + dz * dz).sqrt() / (1.0 - u * u).sqrt();
            angles.push(Angle::from_vector(to_local([x, y, dz], 0.0)));
        }
    }
    Ok(Codebook::from_angles(geom, angles))
}

/// UE codebook: uniform azimuth/elevation grid over the front half-space,
/// elevation-major.
pub fn build_ue_codebook(cfg: &ScenarioConfig) -> Result<Codebook> {
    let (na, ne) = (cfg.codebooks.ue_azimuth_beams, cfg.codebooks.ue_elevation_beams);
    if na == 0 || ne == 0 {
        return Err(Error::Config("UE codebook needs at least one beam".into()));
    }
    let mut angles = Vec::with_capacity(na * ne);
    for j in 0..ne {
        let el = -PI / 2.0 + PI * (j as f64 + 0.5) / ne as f64;
        for i in 0..na {
            let az = -PI / 2.0 + PI * (i as f64 + 0.5) / na as f64;
            angles.push(Angle::new(az, el));
        }
    }
    Ok(Codebook::from_angles(&cfg.arrays.ue, angles))
}

/// BS yaw (faces +x) and UE yaw (faces -x, toward the BS).
const BS_YAW: f64 = 0.0;
const UE_YAW: f64 = PI;

impl Scenario {
    pub fn build(config: ScenarioConfig) -> Result<Self> {
        let road = &config.road;
        if !(road.grid_resolution > 0.0) || !(road.span() > 0.0) {
            return Err(Error::Config("road span and grid resolution must be positive".into()));
        }
        if road.has_stem() && !(0.0..=1.0).contains(&road.junction_fraction) {
            return Err(Error::Config("junction fraction must lie in [0, 1]".into()));
        }
        let codebooks = Codebooks {
            tx_geom: config.arrays.bs,
            rx_geom: config.arrays.ue,
            tx: build_bs_codebook(&config)?,
            rx: build_ue_codebook(&config)?,
        };
        let n_main = (road.span() / road.grid_resolution).round().max(1.0) as usize;
        let n_stem = if road.has_stem() {
            (road.stem_length / road.grid_resolution).round().max(1.0) as usize
        } else {
            0
        };
        let mut cells = Vec::with_capacity(N_LANES * (n_main + n_stem));
        for (seg, n) in [(Segment::Main, n_main), (Segment::Stem, n_stem)] {
            for lane in 0..N_LANES {
                for i in 0..n {
                    let along = (i as f64 + 0.5) * road.grid_resolution;
                    cells.push(Cell { segment: seg, lane, along, position: road.position(seg, lane, along) });
                }
            }
        }
        let mut s = Self {
            config,
            codebooks,
            cells,
            sector_map: SectorMap {
                sbpi_of_cell: vec![],
                active_sbpis: vec![],
                state_of_cell: vec![],
                tx_power: vec![],
                aligned_gain: vec![],
                snr_ba: 0.0,
            },
            cells_per_lane: [n_main, n_stem],
        };
        let paths: Vec<LosPath> = s.cells.iter().map(|c| s.los_path(c.position)).collect();
        s.sector_map = compute_sector_map(&s.codebooks, &paths, s.snr_ba())?;
        Ok(s)
    }

    pub fn snr_ba(&self) -> f64 {
        10f64.powf(self.config.snr_ba_db / 10.0)
    }

    pub fn n_states(&self) -> usize {
        self.sector_map.n_states()
    }

    pub fn bs_position(&self) -> [f64; 3] {
        [0.0, 0.0, self.config.road.bs_height]
    }

    /// LOS geometry from the BS to a UE at `pos`.
    pub fn los_path(&self, pos: [f64; 3]) -> LosPath {
        let bs = self.bs_position();
        let v = [pos[0] - bs[0], pos[1] - bs[1], pos[2] - bs[2]];
        let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        LosPath {
            aod: Angle::from_vector(to_local(v, BS_YAW)),
            aoa: Angle::from_vector(to_local([-v[0], -v[1], -v[2]], UE_YAW)),
            pathloss: free_space_pathloss(d, self.config.wavelength()),
        }
    }

    /// LOS path plus freshly drawn NLOS directions.
    pub fn sample_paths<R: Rng + ?Sized>(&self, pos: [f64; 3], rng: &mut R) -> PathSet {
        let los = self.los_path(pos);
        let var = self.config.channel.nlos_relative_power / los.pathloss;
        let nlos = (0..self.config.channel.nlos_paths)
            .map(|_| NlosPath { aoa: random_direction(rng), aod: random_direction(rng), variance: var })
            .collect();
        PathSet { los, nlos }
    }

    /// Grid cell containing a UE, or `None` outside the coverage area.
    pub fn cell_index(&self, seg: Segment, lane: usize, along: f64) -> Option<usize> {
        let n = match seg {
            Segment::Main => self.cells_per_lane[0],
            Segment::Stem => self.cells_per_lane[1],
        };
        if lane >= N_LANES || !(along >= 0.0) || along >= self.config.road.segment_length(seg) || n == 0 {
            return None;
        }
        let i = ((along / self.config.road.grid_resolution) as usize).min(n - 1);
        let base = match seg {
            Segment::Main => 0,
            Segment::Stem => N_LANES * self.cells_per_lane[0],
        };
        Some(base + lane * n + i)
    }

    /// Active-SBPI state index at a UE location, or `None` outside coverage.
    pub fn state_at(&self, seg: Segment, lane: usize, along: f64) -> Option<usize> {
        self.cell_index(seg, lane, along).map(|c| self.sector_map.state_of_cell[c])
    }

    /// Misalignment ratio statistics; NLOS directions averaged over `n_draws`.
    pub fn estimate_rho<R: Rng + ?Sized>(&self, n_draws: usize, rng: &mut R) -> RhoEstimate {
        let draws = if self.config.channel.nlos_paths == 0 { 1 } else { n_draws };
        estimate_rho(&self.sector_map, &self.codebooks, self.cells.len(), |i| self.sample_paths(self.cells[i].position, rng), draws)
    }

    /// Sector map as CSV with columns `x,y,lane,sbpi`.
    pub fn write_sector_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,lane,sbpi")?;
        for (c, b) in self.cells.iter().zip(&self.sector_map.sbpi_of_cell) {
            writeln!(w, "{:.3},{:.3},{},{}", c.position[0], c.position[1], c.lane, b.0)?;
        }
        Ok(())
    }
}
