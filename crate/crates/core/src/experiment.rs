//! Train/validate/test pipeline over one region: row-band splits, per-variant
//! training, tiled prediction of every date, fusion and evaluation.

use serde::{Deserialize, Serialize};

use crate::eval::{self, AblationRow, EvalError, EvalReport, MAX_REFERENCE_HEIGHT_M};
use crate::infer::{
    self, DatePrediction, DateSpread, InferError, MaskOptions, PredictionStack, TileGrid,
};
use crate::model::{Checkpoint, KernelMode, ModelConfig, ModelError, ModelParams};
use crate::par::Exec;
use crate::preprocess::{compute_norm_stats, BandSubset, PreprocessError, StatsOptions};
use crate::raster::{Band, HeightMap, RasterCube};
use crate::train::{self, CurvePoint, PatchSource, TrainConfig, TrainError, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid split: {0}")]
    Split(String),
    #[error("band {band} required by variant {variant} is missing from the data")]
    MissingBand { variant: String, band: Band },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// Horizontal bands: training rows on top, then validation, then test, each
/// separated by `buffer_rows` unused rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub buffer_rows: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.625,
            val_frac: 0.125,
            buffer_rows: 8,
        }
    }
}

/// Per-pixel membership masks of the three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
    /// Row ranges `[start, end)` of train, validation and test.
    pub rows: [(usize, usize); 3],
}

pub fn row_splits(height: usize, width: usize, spec: &SplitSpec) -> Result<Splits, ExperimentError> {
    let (tf, vf) = (spec.train_frac, spec.val_frac);
    if !(tf > 0.0 && vf > 0.0 && tf + vf < 1.0) {
        return Err(ExperimentError::Split(format!(
            "fractions train {tf}, val {vf} must be positive with sum below 1"
        )));
    }
    let t_end = (tf * height as f64).round() as usize;
    let v_start = t_end + spec.buffer_rows;
    let v_end = v_start + (vf * height as f64).round() as usize;
    let s_start = v_end + spec.buffer_rows;
    if t_end == 0 || v_end <= v_start || s_start >= height {
        return Err(ExperimentError::Split(format!(
            "{height} rows leave an empty split (train 0..{t_end}, val {v_start}..{v_end}, test {s_start}..{height})"
        )));
    }
    let mask = |a: usize, b: usize| {
        (0..height * width)
            .map(|i| (a..b).contains(&(i / width)))
            .collect::<Vec<_>>()
    };
    Ok(Splits {
        train: mask(0, t_end),
        val: mask(v_start, v_end),
        test: mask(s_start, height),
        rows: [(0, t_end), (v_start, v_end), (s_start, height)],
    })
}

/// Restricts a map to the pixels of `region`.
pub fn restrict(map: &HeightMap, region: &[bool]) -> HeightMap {
    let mut out = map.clone();
    out.retain(|i| region[i]);
    out
}

/// A band subset and kernel size to train and evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub bands: BandSubset,
    pub kernel_mode: KernelMode,
}

impl Variant {
    pub fn new(bands: BandSubset, kernel_mode: KernelMode) -> Self {
        let name = match kernel_mode {
            KernelMode::K3x3 => bands.name().to_string(),
            KernelMode::K1x1 => format!("{}_1x1", bands.name()),
        };
        Self {
            name,
            bands,
            kernel_mode,
        }
    }

    /// Parses `ALL`, `RGBN`, `ALL_1x1`, ...
    pub fn parse(s: &str) -> Result<Self, PreprocessError> {
        let (base, mode) = match s.trim().strip_suffix("_1x1") {
            Some(b) => (b, KernelMode::K1x1),
            None => (s.trim(), KernelMode::K3x3),
        };
        Ok(Self::new(base.parse()?, mode))
    }

    /// The five band subsets with 3x3 kernels, then all bands with 1x1.
    pub fn standard_set() -> Vec<Variant> {
        let mut v: Vec<_> = [
            BandSubset::All,
            BandSubset::Rgb,
            BandSubset::N,
            BandSubset::Rgbn,
            BandSubset::WoRgbn,
        ]
        .into_iter()
        .map(|b| Variant::new(b, KernelMode::K3x3))
        .collect();
        v.push(Variant::new(BandSubset::All, KernelMode::K1x1));
        v
    }

    /// First required band not present in every cube.
    pub fn missing_band(&self, cubes: &[RasterCube]) -> Option<Band> {
        self.bands
            .bands()
            .into_iter()
            .find(|b| cubes.iter().any(|c| c.band_plane(*b).is_none()))
    }
}

/// Tiling and masking used when predicting full scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub tile_size: usize,
    pub overlap: usize,
    pub mask_snow: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            tile_size: infer::DEFAULT_TILE_SIZE,
            overlap: infer::DEFAULT_OVERLAP,
            mask_snow: false,
        }
    }
}

/// Predicts every date and fuses them.
#[derive(Debug, Clone)]
pub struct FusedPrediction {
    pub per_date: PredictionStack,
    pub median: HeightMap,
    pub min_cloud: HeightMap,
}

pub fn predict_and_fuse(
    params: &ModelParams<f32>,
    cubes: &[RasterCube],
    cfg: &PredictConfig,
    exec: Exec,
) -> Result<FusedPrediction, ExperimentError> {
    let first = cubes
        .first()
        .ok_or_else(|| InferError::Stack("no acquisitions".into()))?;
    let grid = TileGrid::new(first.height(), first.width(), cfg.tile_size, cfg.overlap)?;
    let mask = MaskOptions {
        mask_snow: cfg.mask_snow,
    };
    let entries = cubes
        .iter()
        .map(|c| {
            let h = infer::predict_scene(params, c, &grid, mask, exec)?;
            Ok(DatePrediction::from_cube(h, c))
        })
        .collect::<Result<Vec<_>, InferError>>()?;
    let per_date = PredictionStack::new(entries)?;
    Ok(FusedPrediction {
        median: infer::fuse_median(&per_date),
        min_cloud: infer::fuse_min_cloud(&per_date),
        per_date,
    })
}

/// Evaluation of a fused prediction on the test region.
#[derive(Debug, Clone)]
pub struct TestEvaluation {
    /// Test-region reference with heights >= 40 m removed.
    pub reference: HeightMap,
    pub removed_reference_pixels: usize,
    pub median: EvalReport,
    pub min_cloud: EvalReport,
    pub spread: Option<DateSpread>,
    pub row: AblationRow,
}

pub fn evaluate_test(
    fused: &FusedPrediction,
    reference: &HeightMap,
    test_region: &[bool],
    name: &str,
) -> Result<TestEvaluation, ExperimentError> {
    let (reference, removed) =
        eval::filter_reference(&restrict(reference, test_region), MAX_REFERENCE_HEIGHT_M);
    let spread = if fused.per_date.len() >= 2 {
        infer::per_date_spread(&fused.per_date, &reference).ok()
    } else {
        None
    };
    Ok(TestEvaluation {
        median: EvalReport::compute(&fused.median, &reference)?,
        min_cloud: EvalReport::compute(&fused.min_cloud, &reference)?,
        row: AblationRow::compute(name, &fused.median, &reference)?,
        removed_reference_pixels: removed,
        spread,
        reference,
    })
}

/// Everything produced by training and evaluating one variant.
#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub best: Checkpoint,
    pub curve: Vec<CurvePoint>,
    pub fused: FusedPrediction,
    pub evaluation: TestEvaluation,
}

/// Options shared by all variants of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Architecture template; `in_channels` and `kernel_mode` are set per variant.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub predict: PredictConfig,
    pub exec: Exec,
}

pub fn train_variant(
    cubes: &[RasterCube],
    reference: &HeightMap,
    splits: &Splits,
    variant: &Variant,
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(&CurvePoint),
) -> Result<(Checkpoint, Vec<CurvePoint>), ExperimentError> {
    if let Some(band) = variant.missing_band(cubes) {
        return Err(ExperimentError::MissingBand {
            variant: variant.name.clone(),
            band,
        });
    }
    let bands = variant.bands.bands();
    let refs: Vec<&RasterCube> = cubes.iter().collect();
    let stats = compute_norm_stats(
        &refs,
        &bands,
        StatsOptions {
            include_cloudy: false,
            mask: Some(&splits.train),
        },
    )?;
    let model_cfg = ModelConfig {
        in_channels: bands.len(),
        kernel_mode: variant.kernel_mode,
        ..cfg.model.clone()
    };
    let mut params = ModelParams::<f32>::build(&model_cfg)?;
    params.norm_stats = Some(stats.clone());
    let train_src = PatchSource::new(cubes, reference, &stats, &splits.train)?;
    let val_src = PatchSource::new(cubes, reference, &stats, &splits.val)?;
    let val = train::validation_batch(&val_src, cfg.train.val_patches, cfg.train.seed)?;
    let trainer = Trainer::new(params, cfg.train.clone())?;
    let out = train::train(trainer, &train_src, Some(&val), progress)?;
    Ok((out.best, out.curve))
}

/// Trains `variant` on the training rows, selects on the validation rows and
/// evaluates the fused prediction on the test rows.
pub fn run_variant(
    cubes: &[RasterCube],
    reference: &HeightMap,
    splits: &Splits,
    variant: &Variant,
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(&CurvePoint),
) -> Result<VariantOutcome, ExperimentError> {
    let (best, curve) = train_variant(cubes, reference, splits, variant, cfg, progress)?;
    let fused = predict_and_fuse(&best.params, cubes, &cfg.predict, cfg.exec)?;
    let evaluation = evaluate_test(&fused, reference, &splits.test, &variant.name)?;
    Ok(VariantOutcome {
        variant: variant.clone(),
        best,
        curve,
        fused,
        evaluation,
    })
}

/// MAE of the generator's noise-free heights against the reference on the
/// evaluated pixels: the error of an oracle that knows the latent field.
pub fn noise_floor(latent: &HeightMap, evaluated_reference: &HeightMap) -> Result<f64, EvalError> {
    eval::mae(latent, evaluated_reference)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_buffered() {
        let s = row_splits(256, 4, &SplitSpec::default()).unwrap();
        assert_eq!(s.rows, [(0, 160), (168, 200), (208, 256)]);
        for i in 0..256 * 4 {
            let n = [s.train[i], s.val[i], s.test[i]].iter().filter(|&&b| b).count();
            assert!(n <= 1);
        }
        assert!(row_splits(10, 4, &SplitSpec::default()).is_err());
        let bad = SplitSpec {
            train_frac: 0.9,
            val_frac: 0.2,
            buffer_rows: 0,
        };
        assert!(row_splits(100, 1, &bad).is_err());
    }

    #[test]
    fn variant_names() {
        let v = Variant::standard_set();
        let names: Vec<_> = v.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["ALL", "RGB", "N", "RGBN", "woRGBN", "ALL_1x1"]);
        assert_eq!(Variant::parse("ALL_1x1").unwrap(), v[5]);
        assert_eq!(Variant::parse("rgbn").unwrap().bands, BandSubset::Rgbn);
        assert!(Variant::parse("XYZ").is_err());
    }
}
