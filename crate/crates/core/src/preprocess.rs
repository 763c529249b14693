//! Everything between a raw cube and network input: band selection,
//! low-resolution band resampling, cloud masking and channel normalization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::raster::{Band, RasterCube};
use crate::tensor::Tensor;

/// Pixels with cloud probability strictly above this percentage are cloudy.
pub const CLOUD_THRESHOLD_PCT: f32 = 10.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PreprocessError {
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: Band },
    #[error("channel {channel} has no usable pixels")]
    NoPixels { channel: Band },
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("band {0} missing from cube")]
    MissingBand(Band),
    #[error("upsampling factor must be >= 1, got {0}")]
    BadFactor(usize),
    #[error("cloud probability {value} at pixel {index} outside [0, 100]")]
    CloudRange { index: usize, value: f32 },
    #[error("unknown band subset {0:?}")]
    UnknownSubset(String),
    #[error("mask length {actual} does not match {expected} pixels")]
    MaskLength { expected: usize, actual: usize },
}

/// Named band combinations used for the spectral ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BandSubset {
    #[serde(rename = "ALL")]
    All,
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "N")]
    N,
    #[serde(rename = "RGBN")]
    Rgbn,
    /// The nine 20 m and 60 m bands.
    #[serde(rename = "woRGBN")]
    WoRgbn,
}

impl BandSubset {
    pub const VARIANTS: [BandSubset; 5] = [
        BandSubset::All,
        BandSubset::Rgb,
        BandSubset::N,
        BandSubset::Rgbn,
        BandSubset::WoRgbn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BandSubset::All => "ALL",
            BandSubset::Rgb => "RGB",
            BandSubset::N => "N",
            BandSubset::Rgbn => "RGBN",
            BandSubset::WoRgbn => "woRGBN",
        }
    }

    /// Bands in canonical order.
    pub fn bands(self) -> Vec<Band> {
        use Band::*;
        match self {
            BandSubset::All => Band::ALL.to_vec(),
            BandSubset::Rgb => vec![B02, B03, B04],
            BandSubset::N => vec![B08],
            BandSubset::Rgbn => vec![B02, B03, B04, B08],
            BandSubset::WoRgbn => Band::ALL
                .iter()
                .copied()
                .filter(|b| b.native_gsd_m() > 10)
                .collect(),
        }
    }
}

impl fmt::Display for BandSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BandSubset {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BandSubset::VARIANTS
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| PreprocessError::UnknownSubset(s.to_string()))
    }
}

/// Per-channel training-set statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub band_ids: Vec<Band>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn n_channels(&self) -> usize {
        self.band_ids.len()
    }

    /// Identity statistics (mean 0, std 1).
    pub fn identity(band_ids: Vec<Band>) -> Self {
        let c = band_ids.len();
        Self {
            band_ids,
            mean: vec![0.0; c],
            std: vec![1.0; c],
        }
    }
}

/// Which pixels contribute to [`compute_norm_stats`].
#[derive(Debug, Clone, Copy, Default)]
pub struct StatsOptions<'a> {
    /// Also use cloudy pixels (default: excluded).
    pub include_cloudy: bool,
    /// Optional extra per-pixel mask, e.g. the training split.
    pub mask: Option<&'a [bool]>,
}

/// Per-channel mean and population standard deviation over the usable
/// pixels (valid and, unless configured otherwise, clear) of all cubes.
pub fn compute_norm_stats(
    cubes: &[&RasterCube],
    subset: &[Band],
    opts: StatsOptions<'_>,
) -> Result<NormStats, PreprocessError> {
    let mut usable: Vec<Vec<bool>> = Vec::with_capacity(cubes.len());
    for cube in cubes {
        let n = cube.height() * cube.width();
        if let Some(m) = opts.mask {
            if m.len() != n {
                return Err(PreprocessError::MaskLength {
                    expected: n,
                    actual: m.len(),
                });
            }
        }
        usable.push(
            (0..n)
                .map(|i| {
                    cube.valid()[i]
                        && (opts.include_cloudy || cube.cloud_prob()[i] <= CLOUD_THRESHOLD_PCT)
                        && opts.mask.is_none_or(|m| m[i])
                })
                .collect(),
        );
    }

    let mut mean = Vec::with_capacity(subset.len());
    let mut std = Vec::with_capacity(subset.len());
    for &band in subset {
        let planes = cubes
            .iter()
            .map(|c| c.band_plane(band).ok_or(PreprocessError::MissingBand(band)))
            .collect::<Result<Vec<_>, _>>()?;
        let values = || {
            planes.iter().zip(&usable).flat_map(|(p, u)| {
                p.iter()
                    .zip(u)
                    .filter_map(|(&v, &ok)| ok.then_some(f64::from(v)))
            })
        };
        let (mut count, mut sum) = (0usize, 0.0f64);
        for v in values() {
            count += 1;
            sum += v;
        }
        if count == 0 {
            return Err(PreprocessError::NoPixels { channel: band });
        }
        let m = sum / count as f64;
        let var = values().map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
        if var <= 0.0 {
            return Err(PreprocessError::ZeroVariance { channel: band });
        }
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(NormStats {
        band_ids: subset.to_vec(),
        mean,
        std,
    })
}

/// `(x - mean) / std` per channel on a `1 x C x H x W` tensor.
pub fn normalize(x: &Tensor<f32>, stats: &NormStats) -> Result<Tensor<f32>, PreprocessError> {
    let (_, c, h, w) = x.dims4().map_err(|_| PreprocessError::ChannelMismatch {
        expected: stats.n_channels(),
        actual: 0,
    })?;
    if c != stats.n_channels() {
        return Err(PreprocessError::ChannelMismatch {
            expected: stats.n_channels(),
            actual: c,
        });
    }
    let plane = h * w;
    let mut out = x.clone();
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = p % c;
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        for v in chunk {
            *v = ((f64::from(*v) - m) / s) as f32;
        }
    }
    Ok(out)
}

/// Selects the stats' bands from a cube and normalizes them.
pub fn normalize_cube(cube: &RasterCube, stats: &NormStats) -> Result<Tensor<f32>, PreprocessError> {
    normalize(&select_band_list(cube, &stats.band_ids)?, stats)
}

/// Normalized network input for a cube; pixels flagged invalid in the cube
/// are set to 0 (the channel mean) in every channel.
pub fn prepare_input(cube: &RasterCube, stats: &NormStats) -> Result<Tensor<f32>, PreprocessError> {
    let mut x = normalize_cube(cube, stats)?;
    let plane = cube.height() * cube.width();
    for chunk in x.data_mut().chunks_mut(plane) {
        for (v, &ok) in chunk.iter_mut().zip(cube.valid()) {
            if !ok {
                *v = 0.0;
            }
        }
    }
    Ok(x)
}

/// Raw reflectance of `subset` as a `1 x |subset| x H x W` tensor.
pub fn select_bands(cube: &RasterCube, subset: BandSubset) -> Result<Tensor<f32>, PreprocessError> {
    select_band_list(cube, &subset.bands())
}

pub fn select_band_list(cube: &RasterCube, bands: &[Band]) -> Result<Tensor<f32>, PreprocessError> {
    let plane = cube.height() * cube.width();
    let mut data = Vec::with_capacity(bands.len() * plane);
    for &b in bands {
        data.extend_from_slice(cube.band_plane(b).ok_or(PreprocessError::MissingBand(b))?);
    }
    Ok(Tensor::from_vec(&[1, bands.len(), cube.height(), cube.width()], data)
        .expect("payload sized from cube"))
}

/// `true` where the pixel is cloudy (probability strictly above 10 %).
pub fn cloud_mask(cloud_prob: &[f32]) -> Result<Vec<bool>, PreprocessError> {
    cloud_prob
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if (0.0..=100.0).contains(&value) {
                Ok(value > CLOUD_THRESHOLD_PCT)
            } else {
                Err(PreprocessError::CloudRange { index, value })
            }
        })
        .collect()
}

/// Bilinear upsampling by an integer factor with pixel-center alignment and
/// edge clamping. Returns `(plane, factor*h, factor*w)`.
pub fn upsample_bilinear(
    plane: &[f64],
    h: usize,
    w: usize,
    factor: usize,
) -> Result<(Vec<f64>, usize, usize), PreprocessError> {
    if factor < 1 {
        return Err(PreprocessError::BadFactor(factor));
    }
    let (oh, ow) = (h * factor, w * factor);
    // Source coordinate and interpolation weight along one axis.
    let taps = |n: usize, out: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = taps(h, oh);
    let cols = taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
            let bot = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    Ok((out, oh, ow))
}

/// Block mean over `factor x factor` blocks; partial blocks at the far
/// edges average the pixels they contain. Returns `(plane, rows, cols)`.
pub fn downsample_mean(plane: &[f64], h: usize, w: usize, factor: usize) -> (Vec<f64>, usize, usize) {
    let f = factor.max(1);
    let (oh, ow) = (h.div_ceil(f), w.div_ceil(f));
    let mut out = vec![0.0; oh * ow];
    for br in 0..oh {
        for bc in 0..ow {
            let (mut s, mut n) = (0.0, 0usize);
            for r in br * f..((br + 1) * f).min(h) {
                for c in bc * f..((bc + 1) * f).min(w) {
                    s += plane[r * w + c];
                    n += 1;
                }
            }
            out[br * ow + bc] = s / n as f64;
        }
    }
    (out, oh, ow)
}
