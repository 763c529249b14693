//! Raster containers: multi-band reflectance cubes, canopy height maps, the
//! `.rcube` on-disk format and the synthetic scene generator.

mod format;
mod scene;

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use format::{
    encode_cube, encode_height_map, read_cube, read_height_map, sidecar_path, write_cube,
    write_height_map, CubeManifest, FORMAT_VERSION, MAGIC,
};
pub use scene::{generate_scene, BandResponse, Scene, SceneSpec, TextureRule};

/// Ground sampling distance of the 10 m bands.
pub const GSD_10M: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at offset 0: expected \"RCUB\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("truncated {section} at offset {offset}: expected file length {expected} bytes, actual {actual}")]
    Truncated {
        section: &'static str,
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("dimension overflow: {channels}x{height}x{width}")]
    DimensionOverflow {
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid raster: {0}")]
    Invariant(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("invalid scene spec: {0}")]
    Spec(String),
}

/// The thirteen Sentinel-2 MSI bands in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    B01,
    B02,
    B03,
    B04,
    B05,
    B06,
    B07,
    B08,
    B8A,
    B09,
    B10,
    B11,
    B12,
}

impl Band {
    pub const ALL: [Band; 13] = [
        Band::B01,
        Band::B02,
        Band::B03,
        Band::B04,
        Band::B05,
        Band::B06,
        Band::B07,
        Band::B08,
        Band::B8A,
        Band::B09,
        Band::B10,
        Band::B11,
        Band::B12,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Band::B01 => "B01",
            Band::B02 => "B02",
            Band::B03 => "B03",
            Band::B04 => "B04",
            Band::B05 => "B05",
            Band::B06 => "B06",
            Band::B07 => "B07",
            Band::B08 => "B08",
            Band::B8A => "B8A",
            Band::B09 => "B09",
            Band::B10 => "B10",
            Band::B11 => "B11",
            Band::B12 => "B12",
        }
    }

    /// Native ground sampling distance in meters.
    pub fn native_gsd_m(self) -> u32 {
        match self {
            Band::B02 | Band::B03 | Band::B04 | Band::B08 => 10,
            Band::B05 | Band::B06 | Band::B07 | Band::B8A | Band::B11 | Band::B12 => 20,
            Band::B01 | Band::B09 | Band::B10 => 60,
        }
    }

    pub fn index(self) -> usize {
        Band::ALL.iter().position(|&b| b == self).expect("listed band")
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Band {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_ascii_uppercase();
        // B8 and B8a are common spellings of B08 / B8A.
        let norm = match up.as_str() {
            "B8" => "B08",
            other => other,
        };
        Band::ALL
            .iter()
            .copied()
            .find(|b| b.label() == norm)
            .ok_or_else(|| format!("unknown band label {s:?}"))
    }
}

/// Level-2A style land-cover class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum LandCover {
    Vegetation = 0,
    Water = 1,
    Snow = 2,
    Other = 3,
}

impl LandCover {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LandCover::Vegetation),
            1 => Some(LandCover::Water),
            2 => Some(LandCover::Snow),
            3 => Some(LandCover::Other),
            _ => None,
        }
    }
}

/// One acquisition: reflectance bands plus cloud, land-cover and validity planes.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterCube {
    height: usize,
    width: usize,
    band_ids: Vec<Band>,
    bands: Vec<f32>,
    cloud_prob: Vec<f32>,
    landcover: Vec<LandCover>,
    valid: Vec<bool>,
    gsd_m: f64,
    acquisition_date: NaiveDate,
}

impl RasterCube {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        height: usize,
        width: usize,
        band_ids: Vec<Band>,
        bands: Vec<f32>,
        cloud_prob: Vec<f32>,
        landcover: Vec<LandCover>,
        valid: Vec<bool>,
        gsd_m: f64,
        acquisition_date: NaiveDate,
    ) -> Result<Self, RasterError> {
        let c = band_ids.len();
        if c == 0 || c > 13 {
            return Err(RasterError::Invariant(format!(
                "band count {c} outside 1..=13"
            )));
        }
        let mut seen = band_ids.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != c {
            return Err(RasterError::Invariant("duplicate band ids".into()));
        }
        let plane = height
            .checked_mul(width)
            .ok_or(RasterError::DimensionOverflow {
                channels: c,
                height,
                width,
            })?;
        if bands.len() != c * plane {
            return Err(RasterError::Invariant(format!(
                "band payload has {} values, expected {}",
                bands.len(),
                c * plane
            )));
        }
        for (name, len) in [
            ("cloud_prob", cloud_prob.len()),
            ("landcover", landcover.len()),
            ("valid", valid.len()),
        ] {
            if len != plane {
                return Err(RasterError::Invariant(format!(
                    "{name} plane has {len} values, expected {plane}"
                )));
            }
        }
        if let Some(i) = cloud_prob
            .iter()
            .position(|p| !(0.0..=100.0).contains(p))
        {
            return Err(RasterError::Invariant(format!(
                "cloud_prob {} at pixel {i} outside [0, 100]",
                cloud_prob[i]
            )));
        }
        if !(gsd_m.is_finite() && gsd_m > 0.0) {
            return Err(RasterError::Invariant(format!("gsd_m {gsd_m} not positive")));
        }
        Ok(Self {
            height,
            width,
            band_ids,
            bands,
            cloud_prob,
            landcover,
            valid,
            gsd_m,
            acquisition_date,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn band_ids(&self) -> &[Band] {
        &self.band_ids
    }

    pub fn n_bands(&self) -> usize {
        self.band_ids.len()
    }

    /// All band planes, concatenated in `band_ids` order.
    pub fn bands(&self) -> &[f32] {
        &self.bands
    }

    pub fn band_plane(&self, band: Band) -> Option<&[f32]> {
        let i = self.band_ids.iter().position(|&b| b == band)?;
        let plane = self.height * self.width;
        Some(&self.bands[i * plane..(i + 1) * plane])
    }

    pub fn cloud_prob(&self) -> &[f32] {
        &self.cloud_prob
    }

    pub fn landcover(&self) -> &[LandCover] {
        &self.landcover
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn gsd_m(&self) -> f64 {
        self.gsd_m
    }

    pub fn acquisition_date(&self) -> NaiveDate {
        self.acquisition_date
    }
}

/// Sentinel stored in invalid height pixels. Readers branch on `valid`, not on this.
pub const NO_HEIGHT: f32 = f32::NAN;

/// Per-pixel canopy height in meters with a validity mask.
#[derive(Debug, Clone)]
pub struct HeightMap {
    height: usize,
    width: usize,
    heights: Vec<f32>,
    valid: Vec<bool>,
}

impl HeightMap {
    /// Builds a map, writing [`NO_HEIGHT`] into every invalid pixel.
    pub fn new(
        height: usize,
        width: usize,
        mut heights: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self, RasterError> {
        let plane = height * width;
        if heights.len() != plane || valid.len() != plane {
            return Err(RasterError::Invariant(format!(
                "height map planes ({}, {}) do not match {height}x{width}",
                heights.len(),
                valid.len()
            )));
        }
        for (i, (h, &v)) in heights.iter_mut().zip(&valid).enumerate() {
            if v {
                if !h.is_finite() {
                    return Err(RasterError::Invariant(format!(
                        "non-finite height at valid pixel {i}"
                    )));
                }
            } else {
                *h = NO_HEIGHT;
            }
        }
        Ok(Self {
            height,
            width,
            heights,
            valid,
        })
    }

    /// Map with every pixel valid.
    pub fn dense(height: usize, width: usize, heights: Vec<f32>) -> Result<Self, RasterError> {
        let valid = vec![true; heights.len()];
        Self::new(height, width, heights, valid)
    }

    pub fn invalid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            heights: vec![NO_HEIGHT; height * width],
            valid: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn heights(&self) -> &[f32] {
        &self.heights
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, i: usize) -> Option<f32> {
        self.valid[i].then(|| self.heights[i])
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Marks pixel `i` invalid.
    pub fn invalidate(&mut self, i: usize) {
        self.valid[i] = false;
        self.heights[i] = NO_HEIGHT;
    }

    /// Keeps only pixels where `keep(i)` holds.
    pub fn retain(&mut self, mut keep: impl FnMut(usize) -> bool) {
        for i in 0..self.heights.len() {
            if self.valid[i] && !keep(i) {
                self.invalidate(i);
            }
        }
    }

    pub fn same_grid(&self, other: &HeightMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Copies the window `rows x cols` into a new map.
    pub fn window(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> HeightMap {
        let (h, w) = (rows.len(), cols.len());
        let mut heights = Vec::with_capacity(h * w);
        let mut valid = Vec::with_capacity(h * w);
        for r in rows {
            let base = r * self.width;
            heights.extend_from_slice(&self.heights[base + cols.start..base + cols.end]);
            valid.extend_from_slice(&self.valid[base + cols.start..base + cols.end]);
        }
        HeightMap {
            height: h,
            width: w,
            heights,
            valid,
        }
    }
}

impl PartialEq for HeightMap {
    /// Bitwise on valid pixels; invalid pixels compare equal regardless of payload.
    fn eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.valid == other.valid
            && self
                .heights
                .iter()
                .zip(&other.heights)
                .zip(&self.valid)
                .all(|((a, b), &v)| !v || a.to_bits() == b.to_bits())
    }
}
