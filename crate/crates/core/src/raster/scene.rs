//! Deterministic synthetic scenes.
//!
//! A latent canopy height field is drawn as Gaussian-smoothed white noise,
//! squashed to `[0, max_height_m]`. Every band's reflectance is an affine
//! function of the local 3x3 height mean and standard deviation plus i.i.d.
//! Gaussian noise that is redrawn for every date. The default response table
//! ties all bands to the same mean/std mixture, so a single pixel only sees a
//! blend of level and roughness; separating the two needs spatial context.
//! The reference heights add Gaussian measurement noise to the latent field.

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Band, HeightMap, LandCover, RasterCube, RasterError, GSD_10M};
use crate::preprocess::{downsample_mean, upsample_bilinear};

/// Linear response of one band to local height statistics (meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandResponse {
    pub band: Band,
    /// Bare-ground reflectance.
    pub intercept: f64,
    pub mean_slope: f64,
    pub std_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureRule {
    /// Per-date i.i.d. reflectance noise.
    pub noise_sigma: f64,
    pub responses: Vec<BandResponse>,
}

/// Weight of the local standard deviation relative to the local mean.
const ROUGHNESS_MIX: f64 = 2.5;

impl Default for TextureRule {
    fn default() -> Self {
        // (band, bare-ground reflectance, slope per meter of local mean height)
        let table: [(Band, f64, f64); 13] = [
            (Band::B01, 0.08, -0.0020),
            (Band::B02, 0.10, -0.0030),
            (Band::B03, 0.12, -0.0025),
            (Band::B04, 0.14, -0.0040),
            (Band::B05, 0.16, -0.0020),
            (Band::B06, 0.20, 0.0030),
            (Band::B07, 0.22, 0.0040),
            (Band::B08, 0.24, 0.0060),
            (Band::B8A, 0.25, 0.0050),
            (Band::B09, 0.10, 0.0020),
            (Band::B10, 0.02, 0.0005),
            (Band::B11, 0.26, -0.0035),
            (Band::B12, 0.20, -0.0040),
        ];
        Self {
            noise_sigma: 0.01,
            responses: table
                .iter()
                .map(|&(band, intercept, mean_slope)| BandResponse {
                    band,
                    intercept,
                    mean_slope,
                    std_slope: -ROUGHNESS_MIX * mean_slope,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Gaussian smoothing sigma of the latent height field, in pixels.
    pub correlation_length_px: f64,
    pub max_height_m: f64,
    /// Reference noise standard deviation as a fraction of `max_height_m`.
    pub reference_noise_frac: f64,
    pub texture: TextureRule,
    /// Target fraction of pixels with cloud probability above 10 %.
    pub cloud_coverage_fraction: f64,
    pub water_fraction: f64,
    pub n_dates: usize,
    pub start_date: String,
    pub date_step_days: i64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            height: 256,
            width: 256,
            correlation_length_px: 4.0,
            max_height_m: 40.0,
            reference_noise_frac: 0.05,
            texture: TextureRule::default(),
            cloud_coverage_fraction: 0.2,
            water_fraction: 0.0,
            n_dates: 3,
            start_date: "2016-05-01".into(),
            date_step_days: 15,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<NaiveDate, RasterError> {
        let bad = |m: String| Err(RasterError::Spec(m));
        if self.height == 0 || self.width == 0 {
            return bad(format!("size {}x{} is empty", self.height, self.width));
        }
        if self.n_dates == 0 {
            return bad("n_dates must be at least 1".into());
        }
        if !(self.correlation_length_px >= 0.0 && self.correlation_length_px.is_finite()) {
            return bad("correlation_length_px must be finite and >= 0".into());
        }
        if !(self.max_height_m >= 0.0 && self.max_height_m.is_finite()) {
            return bad("max_height_m must be finite and >= 0".into());
        }
        if !(self.reference_noise_frac >= 0.0) {
            return bad("reference_noise_frac must be >= 0".into());
        }
        for (name, f) in [
            ("cloud_coverage_fraction", self.cloud_coverage_fraction),
            ("water_fraction", self.water_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} outside [0, 1]"));
            }
        }
        if !(self.texture.noise_sigma >= 0.0) {
            return bad("texture.noise_sigma must be >= 0".into());
        }
        let rs = &self.texture.responses;
        if rs.is_empty() || rs.len() > 13 {
            return bad(format!("{} band responses, expected 1..=13", rs.len()));
        }
        let mut bands: Vec<Band> = rs.iter().map(|r| r.band).collect();
        bands.sort();
        bands.dedup();
        if bands.len() != rs.len() {
            return bad("duplicate band in texture.responses".into());
        }
        if self.date_step_days <= 0 {
            return bad("date_step_days must be positive".into());
        }
        NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| RasterError::Spec(format!("start_date {:?}: {e}", self.start_date)))
    }
}

/// Output of [`generate_scene`].
#[derive(Debug, Clone)]
pub struct Scene {
    pub cubes: Vec<RasterCube>,
    /// Noisy reference heights used for training and evaluation.
    pub reference: HeightMap,
    /// Noise-free latent heights the reflectance was rendered from.
    pub latent: HeightMap,
}

// Independent random streams per component, so changing one component's
// draws never shifts another's.
const STREAM_HEIGHT: u64 = 1;
const STREAM_REFERENCE: u64 = 2;
const STREAM_WATER: u64 = 3;
const STREAM_DATE_BASE: u64 = 100;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn white_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * field[r * w + clamp(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[clamp(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

/// Value below which a fraction `q` of `v` lies.
fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let i = ((q * s.len() as f64).floor() as usize).min(s.len() - 1);
    s[i]
}

/// Local 3x3 mean and population standard deviation with edge clamping.
pub(crate) fn local_stats(field: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; h * w];
    let mut sd = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut s, mut s2) = (0.0, 0.0);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                    let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                    let v = field[rr * w + cc];
                    s += v;
                    s2 += v * v;
                }
            }
            let m = s / 9.0;
            mean[r * w + c] = m;
            sd[r * w + c] = (s2 / 9.0 - m * m).max(0.0).sqrt();
        }
    }
    (mean, sd)
}

const WATER_REFLECTANCE: f64 = 0.02;
const CLOUD_REFLECTANCE: f64 = 0.5;
const VEGETATION_MIN_HEIGHT: f64 = 2.0;

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, RasterError> {
    let start = spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;

    let mut z = gaussian_blur(
        &white_noise(&mut rng_for(spec.seed, STREAM_HEIGHT), n),
        h,
        w,
        spec.correlation_length_px,
    );
    standardize(&mut z);
    let mut latent: Vec<f64> = z
        .iter()
        .map(|&v| spec.max_height_m * ((v + 1.0) / 3.0).clamp(0.0, 1.0))
        .collect();

    let mut water = vec![false; n];
    if spec.water_fraction > 0.0 {
        let mut wf = gaussian_blur(
            &white_noise(&mut rng_for(spec.seed, STREAM_WATER), n),
            h,
            w,
            8.0,
        );
        standardize(&mut wf);
        let thr = quantile(&wf, 1.0 - spec.water_fraction);
        for i in 0..n {
            if wf[i] > thr {
                water[i] = true;
                latent[i] = 0.0;
            }
        }
    }

    let ref_sigma = spec.reference_noise_frac * spec.max_height_m;
    let mut ref_rng = rng_for(spec.seed, STREAM_REFERENCE);
    let reference: Vec<f32> = latent
        .iter()
        .map(|&v| {
            let e: f64 = ref_rng.sample(StandardNormal);
            (v + ref_sigma * e).max(0.0) as f32
        })
        .collect();

    let (mean3, sd3) = local_stats(&latent, h, w);
    let landcover: Vec<LandCover> = (0..n)
        .map(|i| {
            if water[i] {
                LandCover::Water
            } else if latent[i] > VEGETATION_MIN_HEIGHT {
                LandCover::Vegetation
            } else {
                LandCover::Other
            }
        })
        .collect();

    let responses = &spec.texture.responses;
    let mut cubes = Vec::with_capacity(spec.n_dates);
    for d in 0..spec.n_dates {
        let mut rng = rng_for(spec.seed, STREAM_DATE_BASE + d as u64);
        let cloud = cloud_plane(&mut rng, h, w, spec.cloud_coverage_fraction);
        let mut bands = Vec::with_capacity(responses.len() * n);
        for resp in responses {
            let mut plane: Vec<f64> = (0..n)
                .map(|i| {
                    let base = if water[i] {
                        WATER_REFLECTANCE
                    } else {
                        resp.intercept + resp.mean_slope * mean3[i] + resp.std_slope * sd3[i]
                    };
                    let e: f64 = rng.sample(StandardNormal);
                    base + spec.texture.noise_sigma * e
                })
                .collect();
            let factor = (resp.band.native_gsd_m() / 10) as usize;
            if factor > 1 {
                let (coarse, ch, cw) = downsample_mean(&plane, h, w, factor);
                let (fine, fh, fw) = upsample_bilinear(&coarse, ch, cw, factor)
                    .expect("factor is positive");
                debug_assert!(fh >= h && fw >= w);
                plane = (0..h)
                    .flat_map(|r| fine[r * fw..r * fw + w].to_vec())
                    .collect();
            }
            for (v, &p) in plane.iter_mut().zip(&cloud) {
                let alpha = f64::from(p) / 100.0;
                *v = (1.0 - alpha) * *v + alpha * CLOUD_REFLECTANCE;
            }
            bands.extend(plane.iter().map(|&v| v as f32));
        }
        let date = start + Duration::days(spec.date_step_days * d as i64);
        cubes.push(RasterCube::new(
            h,
            w,
            responses.iter().map(|r| r.band).collect(),
            bands,
            cloud,
            landcover.clone(),
            vec![true; n],
            GSD_10M,
            date,
        )?);
    }

    Ok(Scene {
        cubes,
        reference: HeightMap::dense(h, w, reference)?,
        latent: HeightMap::dense(h, w, latent.iter().map(|&v| v as f32).collect())?,
    })
}

/// Smooth cloud blobs covering `coverage` of the pixels with probability in
/// (10, 100]; clear pixels get 0.
fn cloud_plane(rng: &mut ChaCha8Rng, h: usize, w: usize, coverage: f64) -> Vec<f32> {
    let n = h * w;
    let mut field = gaussian_blur(&white_noise(rng, n), h, w, 6.0);
    if coverage <= 0.0 {
        return vec![0.0; n];
    }
    standardize(&mut field);
    let thr = quantile(&field, 1.0 - coverage);
    let max = field.iter().copied().fold(f64::MIN, f64::max);
    let span = (max - thr).max(1e-9);
    field
        .iter()
        .map(|&v| {
            if coverage >= 1.0 || v > thr {
                let t = ((v - thr) / span).clamp(0.0, 1.0);
                (11.0 + 89.0 * t) as f32
            } else {
                0.0
            }
        })
        .collect()
}
