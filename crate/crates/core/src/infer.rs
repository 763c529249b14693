//! Whole-scene prediction by overlapping tiles, per-date masking, and fusion
//! of a multi-date stack into one map.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::eval::{self, EvalError};
use crate::model::{ModelError, ModelParams};
use crate::par::{self, Exec};
use crate::preprocess::{self, NormStats, PreprocessError, CLOUD_THRESHOLD_PCT};
use crate::raster::{HeightMap, LandCover, RasterCube};
use crate::tensor::Tensor;

pub const DEFAULT_TILE_SIZE: usize = 128;
pub const DEFAULT_OVERLAP: usize = 8;
/// Heights mapped to white in grayscale previews.
pub const PGM_MAX_HEIGHT_M: f32 = 60.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum InferError {
    #[error("invalid tiling: {0}")]
    Grid(String),
    #[error("tile at row {row}, col {col} ({height}x{width}) failed: {source}")]
    Tile {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
        #[source]
        source: ModelError,
    },
    #[error("model has no input normalization statistics")]
    NoNormStats,
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("prediction stack: {0}")]
    Stack(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One tile rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// Overlapping tiles covering an `H x W` image. Tiles start every
/// `tile_size - overlap` pixels; the last tile along an axis is clipped at the
/// image edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub overlap: usize,
    height: usize,
    width: usize,
    row_spans: Vec<(usize, usize)>,
    col_spans: Vec<(usize, usize)>,
}

fn spans(len: usize, tile: usize, step: usize) -> Vec<(usize, usize)> {
    let mut v = vec![(0, tile.min(len))];
    let mut start = 0;
    while start + tile < len {
        start += step;
        v.push((start, (start + tile).min(len)));
    }
    v
}

/// Distance from `p` to the nearer edge of `[s, e)`; image edges are
/// treated as infinitely far.
fn depth(p: usize, (s, e): (usize, usize), len: usize) -> usize {
    let left = if s == 0 { usize::MAX } else { p - s };
    let right = if e == len { usize::MAX } else { e - 1 - p };
    left.min(right)
}

/// For every pixel along one axis, the index of the span in which it is
/// deepest (ties to the lower index).
fn owners(spans: &[(usize, usize)], len: usize) -> Vec<usize> {
    (0..len)
        .map(|p| {
            let mut best = (0usize, None::<usize>);
            for (i, &sp) in spans.iter().enumerate() {
                if sp.0 <= p && p < sp.1 {
                    let d = depth(p, sp, len);
                    if best.1.is_none_or(|b| d > b) {
                        best = (i, Some(d));
                    }
                }
            }
            best.0
        })
        .collect()
}

impl TileGrid {
    pub fn new(height: usize, width: usize, tile_size: usize, overlap: usize) -> Result<Self, InferError> {
        if tile_size == 0 || overlap >= tile_size {
            return Err(InferError::Grid(format!(
                "need 0 <= overlap < tile_size, got overlap {overlap}, tile_size {tile_size}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(InferError::Grid("empty image".into()));
        }
        let step = tile_size - overlap;
        Ok(Self {
            tile_size,
            overlap,
            height,
            width,
            row_spans: spans(height, tile_size, step),
            col_spans: spans(width, tile_size, step),
        })
    }

    /// Tiles in row-major order.
    pub fn tiles(&self) -> Vec<Tile> {
        self.row_spans
            .iter()
            .flat_map(|&(r0, r1)| {
                self.col_spans.iter().map(move |&(c0, c1)| Tile {
                    row: r0,
                    col: c0,
                    height: r1 - r0,
                    width: c1 - c0,
                })
            })
            .collect()
    }

    /// Index into [`TileGrid::tiles`] of the tile each pixel is read from:
    /// the one in which the pixel lies deepest (greatest distance to a tile
    /// edge that is not an image edge), ties to the lower index.
    pub fn owner_map(&self) -> Vec<usize> {
        let nc = self.col_spans.len();
        let ro = owners(&self.row_spans, self.height);
        let co = owners(&self.col_spans, self.width);
        // Per pixel the depth is min(row depth, col depth); maximizing it
        // over the covering tiles, lowest index first, is done directly.
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let mut best: Option<(usize, usize)> = None;
                for (i, &rs) in self.row_spans.iter().enumerate() {
                    if !(rs.0 <= r && r < rs.1) {
                        continue;
                    }
                    for (j, &cs) in self.col_spans.iter().enumerate() {
                        if !(cs.0 <= c && c < cs.1) {
                            continue;
                        }
                        let d = depth(r, rs, self.height).min(depth(c, cs, self.width));
                        let idx = i * nc + j;
                        if best.is_none_or(|(_, bd)| d > bd) {
                            best = Some((idx, d));
                        }
                    }
                }
                out.push(best.map_or(ro[r] * nc + co[c], |(i, _)| i));
            }
        }
        out
    }

    /// Smallest distance from any pixel to a non-image edge of its owning
    /// tile; tiled prediction is exact when this is at least the model's
    /// receptive radius.
    pub fn min_owned_depth(&self) -> usize {
        let tiles = self.tiles();
        let owner = self.owner_map();
        let mut m = usize::MAX;
        for r in 0..self.height {
            for c in 0..self.width {
                let t = tiles[owner[r * self.width + c]];
                let rd = depth(r, (t.row, t.row + t.height), self.height);
                let cd = depth(c, (t.col, t.col + t.width), self.width);
                m = m.min(rd.min(cd));
            }
        }
        m
    }
}

/// Which land-cover classes are masked in addition to clouds and water.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskOptions {
    pub mask_snow: bool,
}

/// Pixels to drop from a prediction: invalid input, cloudy, water, and snow
/// when configured.
pub fn prediction_mask(cube: &RasterCube, opts: MaskOptions) -> Vec<bool> {
    (0..cube.height() * cube.width())
        .map(|i| {
            let lc = cube.landcover()[i];
            cube.valid()[i]
                && cube.cloud_prob()[i] <= CLOUD_THRESHOLD_PCT
                && lc != LandCover::Water
                && !(opts.mask_snow && lc == LandCover::Snow)
        })
        .collect()
}

/// Raw model output over the whole grid, tile by tile, without masking.
pub fn predict_tiled(
    params: &ModelParams<f32>,
    x: &Tensor<f32>,
    grid: &TileGrid,
    exec: Exec,
) -> Result<Vec<f32>, InferError> {
    let (_, c, h, w) = x.dims4().map_err(|e| InferError::Grid(e.to_string()))?;
    if (h, w) != (grid.height, grid.width) {
        return Err(InferError::Grid(format!(
            "grid is {}x{}, input is {h}x{w}",
            grid.height, grid.width
        )));
    }
    let tiles = grid.tiles();
    let outputs = par::map_range_with(exec, tiles.len(), |i| {
        let t = tiles[i];
        let mut data = Vec::with_capacity(c * t.height * t.width);
        for ch in 0..c {
            for r in t.row..t.row + t.height {
                let start = (ch * h + r) * w + t.col;
                data.extend_from_slice(&x.data()[start..start + t.width]);
            }
        }
        let xt = Tensor::from_vec(&[1, c, t.height, t.width], data).expect("sized");
        params.predict(&xt).map_err(|source| InferError::Tile {
            row: t.row,
            col: t.col,
            height: t.height,
            width: t.width,
            source,
        })
    });
    let outputs = outputs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let owner = grid.owner_map();
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for col in 0..w {
            let i = owner[r * w + col];
            let t = tiles[i];
            out[r * w + col] = outputs[i].data()[(r - t.row) * t.width + (col - t.col)];
        }
    }
    Ok(out)
}

/// Predicts one acquisition and masks unusable pixels.
pub fn predict_scene(
    params: &ModelParams<f32>,
    cube: &RasterCube,
    grid: &TileGrid,
    mask: MaskOptions,
    exec: Exec,
) -> Result<HeightMap, InferError> {
    let stats: &NormStats = params.norm_stats.as_ref().ok_or(InferError::NoNormStats)?;
    let x = preprocess::prepare_input(cube, stats)?;
    let keep = prediction_mask(cube, mask);
    let (h, w) = (cube.height(), cube.width());
    if !keep.iter().any(|&k| k) {
        return Ok(HeightMap::invalid(h, w));
    }
    let raw = predict_tiled(params, &x, grid, exec)?;
    Ok(HeightMap::new(h, w, raw, keep).expect("finite model output"))
}

/// One date of a prediction stack.
#[derive(Debug, Clone)]
pub struct DatePrediction {
    pub heights: HeightMap,
    pub cloud_prob: Vec<f32>,
    pub landcover: Vec<LandCover>,
    pub date: NaiveDate,
}

impl DatePrediction {
    pub fn from_cube(heights: HeightMap, cube: &RasterCube) -> Self {
        Self {
            heights,
            cloud_prob: cube.cloud_prob().to_vec(),
            landcover: cube.landcover().to_vec(),
            date: cube.acquisition_date(),
        }
    }
}

/// Per-date predictions over one grid, with unique dates.
#[derive(Debug, Clone)]
pub struct PredictionStack {
    entries: Vec<DatePrediction>,
}

impl PredictionStack {
    pub fn new(entries: Vec<DatePrediction>) -> Result<Self, InferError> {
        let first = entries
            .first()
            .ok_or_else(|| InferError::Stack("empty stack".into()))?;
        let (h, w) = (first.heights.height(), first.heights.width());
        for (i, e) in entries.iter().enumerate() {
            if !e.heights.same_grid(&first.heights)
                || e.cloud_prob.len() != h * w
                || e.landcover.len() != h * w
            {
                return Err(InferError::Stack(format!("date {i} is not on the {h}x{w} grid")));
            }
            if entries[..i].iter().any(|o| o.date == e.date) {
                return Err(InferError::Stack(format!("duplicate date {}", e.date)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[DatePrediction] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn grid(&self) -> (usize, usize) {
        let h = &self.entries[0].heights;
        (h.height(), h.width())
    }
}

/// Median of the valid values; the mean of the two central values for an
/// even count.
pub fn median(values: &mut [f32]) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f32::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        ((f64::from(values[n / 2 - 1]) + f64::from(values[n / 2])) / 2.0) as f32
    })
}

/// Per-pixel median over the dates where the pixel is valid.
pub fn fuse_median(stack: &PredictionStack) -> HeightMap {
    let (h, w) = stack.grid();
    let mut heights = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    let mut buf = Vec::with_capacity(stack.len());
    for i in 0..h * w {
        buf.clear();
        buf.extend(stack.entries.iter().filter_map(|e| e.heights.get(i)));
        if let Some(m) = median(&mut buf) {
            heights[i] = m;
            valid[i] = true;
        }
    }
    HeightMap::new(h, w, heights, valid).expect("values come from valid maps")
}

/// Per-pixel value from the valid date with the lowest cloud probability,
/// ties to the earliest acquisition date.
pub fn fuse_min_cloud(stack: &PredictionStack) -> HeightMap {
    let (h, w) = stack.grid();
    let mut heights = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for i in 0..h * w {
        let mut best: Option<(f32, NaiveDate, f32)> = None;
        for e in &stack.entries {
            if let Some(v) = e.heights.get(i) {
                let key = (e.cloud_prob[i], e.date);
                if best.is_none_or(|(p, d, _)| key.0 < p || (key.0 == p && key.1 < d)) {
                    best = Some((key.0, key.1, v));
                }
            }
        }
        if let Some((_, _, v)) = best {
            heights[i] = v;
            valid[i] = true;
        }
    }
    HeightMap::new(h, w, heights, valid).expect("values come from valid maps")
}

/// Per-date MAE against a reference and their spread.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DateSpread {
    pub per_date: Vec<(NaiveDate, f64)>,
    pub mean: f64,
    /// Sample standard deviation across dates.
    pub std: f64,
}

pub fn per_date_spread(stack: &PredictionStack, reference: &HeightMap) -> Result<DateSpread, InferError> {
    if stack.len() < 2 {
        return Err(InferError::Stack("spread needs at least two dates".into()));
    }
    let per_date = stack
        .entries
        .iter()
        .map(|e| Ok((e.date, eval::mae(&e.heights, reference)?)))
        .collect::<Result<Vec<_>, InferError>>()?;
    let n = per_date.len() as f64;
    let mean = per_date.iter().map(|(_, m)| m).sum::<f64>() / n;
    let var = per_date.iter().map(|(_, m)| (m - mean) * (m - mean)).sum::<f64>() / (n - 1.0);
    Ok(DateSpread {
        per_date,
        mean,
        std: var.sqrt(),
    })
}

/// Binary 8-bit PGM with heights scaled linearly from 0-60 m to 0-255;
/// invalid pixels are black.
pub fn write_pgm(out: &mut impl Write, map: &HeightMap) -> std::io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", map.width(), map.height())?;
    let bytes: Vec<u8> = (0..map.len())
        .map(|i| match map.get(i) {
            Some(v) => (v.clamp(0.0, PGM_MAX_HEIGHT_M) / PGM_MAX_HEIGHT_M * 255.0).round() as u8,
            None => 0,
        })
        .collect();
    out.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_overlaps_are_exact() {
        let g = TileGrid::new(300, 300, 128, 40).unwrap();
        assert_eq!(g.row_spans, vec![(0, 128), (88, 216), (176, 300)]);
        for w in g.row_spans.windows(2) {
            assert_eq!(w[0].1 - w[1].0, 40);
        }
        let tiles = g.tiles();
        assert_eq!(tiles.len(), 9);
        assert!(tiles.iter().all(|t| t.height <= 128 && t.width <= 128));
        assert_eq!(g.min_owned_depth(), 20);
        let small = TileGrid::new(50, 70, 128, 8).unwrap();
        assert_eq!(small.tiles().len(), 1);
        assert_eq!(small.min_owned_depth(), usize::MAX);
        assert!(TileGrid::new(10, 10, 8, 8).is_err());
    }

    #[test]
    fn deepest_tile_owns_pixel() {
        let g = TileGrid::new(1, 20, 10, 4).unwrap();
        // spans (0,10), (6,16), (12,20)
        let o = g.owner_map();
        assert_eq!(&o[..8], &[0; 8]);
        assert_eq!(o[8], 1);
        assert_eq!(o[13], 1);
        assert_eq!(o[14], 2);
    }

    fn entry(vals: &[Option<f32>], cloud: &[f32], day: u32) -> DatePrediction {
        let valid: Vec<bool> = vals.iter().map(Option::is_some).collect();
        let h: Vec<f32> = vals.iter().map(|v| v.unwrap_or(0.0)).collect();
        DatePrediction {
            heights: HeightMap::new(1, vals.len(), h, valid).unwrap(),
            cloud_prob: cloud.to_vec(),
            landcover: vec![LandCover::Vegetation; vals.len()],
            date: NaiveDate::from_ymd_opt(2020, 6, day).unwrap(),
        }
    }

    #[test]
    fn median_rules() {
        let s = PredictionStack::new(vec![
            entry(&[Some(3.0), Some(3.0), None], &[0.0; 3], 1),
            entry(&[Some(5.0), Some(5.0), None], &[0.0; 3], 2),
            entry(&[Some(4.0), None, Some(7.0)], &[0.0; 3], 3),
        ])
        .unwrap();
        let m = fuse_median(&s);
        assert_eq!(m.heights(), &[4.0, 4.0, 7.0]);
    }

    #[test]
    fn min_cloud_rules() {
        let s = PredictionStack::new(vec![
            entry(&[Some(1.0), Some(1.0), None], &[50.0, 5.0, 0.0], 3),
            entry(&[Some(2.0), Some(2.0), None], &[3.0, 5.0, 0.0], 1),
            entry(&[Some(3.0), Some(3.0), None], &[20.0, 5.0, 0.0], 2),
        ])
        .unwrap();
        let m = fuse_min_cloud(&s);
        assert_eq!(m.get(0), Some(2.0));
        // tie on cloud: earliest date is the second entry
        assert_eq!(m.get(1), Some(2.0));
        assert_eq!(m.get(2), None);
    }

    #[test]
    fn duplicate_dates_rejected() {
        let a = entry(&[Some(1.0)], &[0.0], 1);
        assert!(PredictionStack::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn spread_of_two() {
        let r = HeightMap::dense(1, 2, vec![0.0, 0.0]).unwrap();
        let s = PredictionStack::new(vec![
            entry(&[Some(2.0), Some(2.0)], &[0.0; 2], 1),
            entry(&[Some(4.0), Some(-4.0)], &[0.0; 2], 2),
        ])
        .unwrap();
        let d = per_date_spread(&s, &r).unwrap();
        assert_eq!(d.mean, 3.0);
        assert!((d.std - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pgm_scaling() {
        let mut m = HeightMap::dense(1, 3, vec![0.0, 30.0, 90.0]).unwrap();
        m.invalidate(0);
        let mut out = Vec::new();
        write_pgm(&mut out, &m).unwrap();
        assert!(out.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&out[out.len() - 3..], &[0, 128, 255]);
    }
}
