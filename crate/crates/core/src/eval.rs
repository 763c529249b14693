//! Error metrics between a predicted and a reference height map, plus the
//! report files and comparison tables built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::raster::HeightMap;

/// Default reference cut-off: pixels at or above this height are dropped.
pub const MAX_REFERENCE_HEIGHT_M: f32 = 40.0;
/// Height bins reported in the per-bin tables.
pub const TABLE_BINS: usize = 7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("maps differ in size: {0}x{1} vs {2}x{3}")]
    GridMismatch(usize, usize, usize, usize),
    #[error("no jointly valid pixels")]
    NoOverlap,
    #[error("no valid pixels")]
    Empty,
    #[error("bin width must be positive and finite, got {0}")]
    BadBinWidth(f64),
}

fn check_grid(pred: &HeightMap, reference: &HeightMap) -> Result<(), EvalError> {
    if !pred.same_grid(reference) {
        return Err(EvalError::GridMismatch(
            pred.height(),
            pred.width(),
            reference.height(),
            reference.width(),
        ));
    }
    Ok(())
}

/// `(prediction, reference)` pairs over jointly valid pixels.
pub fn joint_pairs<'a>(
    pred: &'a HeightMap,
    reference: &'a HeightMap,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a, EvalError> {
    check_grid(pred, reference)?;
    Ok((0..pred.len()).filter_map(move |i| {
        Some((f64::from(pred.get(i)?), f64::from(reference.get(i)?)))
    }))
}

fn mean_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut n, mut s) = (0usize, 0.0);
    for v in it {
        n += 1;
        s += v;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn mae(pred: &HeightMap, reference: &HeightMap) -> Result<f64, EvalError> {
    mean_of(joint_pairs(pred, reference)?.map(|(p, r)| (p - r).abs())).ok_or(EvalError::NoOverlap)
}

pub fn rmse(pred: &HeightMap, reference: &HeightMap) -> Result<f64, EvalError> {
    mean_of(joint_pairs(pred, reference)?.map(|(p, r)| (p - r) * (p - r)))
        .map(f64::sqrt)
        .ok_or(EvalError::NoOverlap)
}

fn check_width(w: f64) -> Result<(), EvalError> {
    if w > 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(EvalError::BadBinWidth(w))
    }
}

/// Mean absolute error of the pixels whose reference lies in
/// `[lower, upper)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinMae {
    pub lower: f64,
    pub upper: f64,
    pub mae: f64,
    pub count: usize,
}

/// Per-bin MAE by reference height, non-empty bins only, in increasing order.
pub fn binned_mae(pred: &HeightMap, reference: &HeightMap, width: f64) -> Result<Vec<BinMae>, EvalError> {
    check_width(width)?;
    let mut bins: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for (p, r) in joint_pairs(pred, reference)? {
        let e = bins.entry((r / width).floor() as i64).or_default();
        e.0 += (p - r).abs();
        e.1 += 1;
    }
    Ok(bins
        .into_iter()
        .map(|(k, (sum, count))| BinMae {
            lower: k as f64 * width,
            upper: (k + 1) as f64 * width,
            mae: sum / count as f64,
            count,
        })
        .collect())
}

/// Drops reference pixels at or above `max_height`; returns the filtered map
/// and the number of pixels removed.
pub fn filter_reference(reference: &HeightMap, max_height: f32) -> (HeightMap, usize) {
    let mut out = reference.clone();
    let before = out.n_valid();
    out.retain(|i| reference.get(i).is_some_and(|h| h < max_height));
    let removed = before - out.n_valid();
    (out, removed)
}

/// Sparse 2D histogram over (reference bin, prediction bin).
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub bin: f64,
    pub cells: BTreeMap<(u32, u32), u64>,
    pub n_pixels: u64,
}

impl Confusion {
    /// Counts per reference bin.
    pub fn reference_marginal(&self) -> BTreeMap<u32, u64> {
        let mut m = BTreeMap::new();
        for (&(r, _), &c) in &self.cells {
            *m.entry(r).or_insert(0) += c;
        }
        m
    }

    /// Counts per prediction bin.
    pub fn prediction_marginal(&self) -> BTreeMap<u32, u64> {
        let mut m = BTreeMap::new();
        for (&(_, p), &c) in &self.cells {
            *m.entry(p).or_insert(0) += c;
        }
        m
    }
}

/// Histogram bin of a height; negative values fall into bin 0.
pub fn hist_bin(v: f64, bin: f64) -> u32 {
    (v / bin).floor().max(0.0) as u32
}

pub fn confusion_hist(pred: &HeightMap, reference: &HeightMap, bin: f64) -> Result<Confusion, EvalError> {
    check_width(bin)?;
    let mut cells = BTreeMap::new();
    let mut n = 0u64;
    for (p, r) in joint_pairs(pred, reference)? {
        *cells.entry((hist_bin(r, bin), hist_bin(p, bin))).or_insert(0) += 1;
        n += 1;
    }
    Ok(Confusion {
        bin,
        cells,
        n_pixels: n,
    })
}

/// `(threshold, fraction of valid pixels strictly below it)` for thresholds
/// `step, 2*step, ...` up to the first one that exceeds every height.
pub fn cumulative_distribution(map: &HeightMap, step: f64) -> Result<Vec<(f64, f64)>, EvalError> {
    check_width(step)?;
    let mut values: Vec<f64> = (0..map.len()).filter_map(|i| map.get(i)).map(f64::from).collect();
    cumulative_of(&mut values, step)
}

fn cumulative_of(values: &mut [f64], step: f64) -> Result<Vec<(f64, f64)>, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let max = values[values.len() - 1];
    let k_max = ((max / step).floor() as i64 + 1).max(1);
    let mut curve = Vec::with_capacity(k_max as usize);
    let mut below = 0usize;
    for k in 1..=k_max {
        let t = k as f64 * step;
        while below < values.len() && values[below] < t {
            below += 1;
        }
        curve.push((t, below as f64 / n));
    }
    Ok(curve)
}

/// Everything computed for one prediction against one reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub n_pixels: usize,
    pub per_bin_mae: Vec<BinMae>,
    #[serde(skip)]
    pub confusion: Confusion,
    /// Cumulative distribution of the predicted heights over the evaluated pixels.
    #[serde(skip)]
    pub cumulative: Vec<(f64, f64)>,
}

impl EvalReport {
    /// Metrics with 10 m height bins, 1 m confusion cells and a 1 m step
    /// cumulative curve.
    pub fn compute(pred: &HeightMap, reference: &HeightMap) -> Result<Self, EvalError> {
        let mae = mae(pred, reference)?;
        let rmse = rmse(pred, reference)?;
        let per_bin_mae = binned_mae(pred, reference, 10.0)?;
        let confusion = confusion_hist(pred, reference, 1.0)?;
        let mut joint: Vec<f64> = joint_pairs(pred, reference)?.map(|(p, _)| p).collect();
        let cumulative = cumulative_of(&mut joint, 1.0)?;
        Ok(Self {
            mae,
            rmse,
            n_pixels: confusion.n_pixels as usize,
            per_bin_mae,
            confusion,
            cumulative,
        })
    }

    pub fn bins_csv(&self) -> String {
        let mut s = String::from("lower,upper,mae,count\n");
        for b in &self.per_bin_mae {
            let _ = writeln!(s, "{},{},{},{}", b.lower, b.upper, b.mae, b.count);
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("row,col,count\n");
        for (&(r, c), &n) in &self.confusion.cells {
            let _ = writeln!(s, "{r},{c},{n}");
        }
        s
    }

    pub fn cumulative_csv(&self) -> String {
        let mut s = String::from("height,fraction_below\n");
        for &(t, f) in &self.cumulative {
            let _ = writeln!(s, "{t},{f}");
        }
        s
    }

    /// Writes `report.json`, `bins.csv`, `confusion.csv` and `cumulative.csv`.
    pub fn write_dir(&self, dir: &Path, extra: serde_json::Value) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut summary = serde_json::to_value(self).expect("report serializes");
        if let (Some(obj), serde_json::Value::Object(more)) = (summary.as_object_mut(), extra) {
            obj.extend(more);
        }
        let json = serde_json::to_string_pretty(&summary).expect("json");
        fs::write(dir.join("report.json"), json + "\n")?;
        fs::write(dir.join("bins.csv"), self.bins_csv())?;
        fs::write(dir.join("confusion.csv"), self.confusion_csv())?;
        fs::write(dir.join("cumulative.csv"), self.cumulative_csv())
    }
}

/// One region's row of the fusion comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionRow {
    pub name: String,
    pub mincloud_mae: f64,
    pub mincloud_rmse: f64,
    pub median_mae: f64,
    pub median_rmse: f64,
}

/// A region's fused maps and reference for [`fusion_table`].
pub struct FusionInput<'a> {
    pub name: &'a str,
    pub min_cloud: &'a HeightMap,
    pub median: &'a HeightMap,
    pub reference: &'a HeightMap,
}

fn pooled(pairs: &[(f64, f64)]) -> Result<(f64, f64), EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(p, r)| (p - r).abs()).sum::<f64>() / n;
    let mse = pairs.iter().map(|(p, r)| (p - r) * (p - r)).sum::<f64>() / n;
    Ok((mae, mse.sqrt()))
}

/// Per-region rows plus an `all` row pooled over every region's pixels.
pub fn fusion_table(regions: &[FusionInput<'_>]) -> Result<Vec<FusionRow>, EvalError> {
    let mut rows = Vec::with_capacity(regions.len() + 1);
    let (mut all_min, mut all_med) = (Vec::new(), Vec::new());
    for r in regions {
        let pm: Vec<_> = joint_pairs(r.min_cloud, r.reference)?.collect();
        let pd: Vec<_> = joint_pairs(r.median, r.reference)?.collect();
        let (mincloud_mae, mincloud_rmse) = pooled(&pm)?;
        let (median_mae, median_rmse) = pooled(&pd)?;
        rows.push(FusionRow {
            name: r.name.to_string(),
            mincloud_mae,
            mincloud_rmse,
            median_mae,
            median_rmse,
        });
        all_min.extend(pm);
        all_med.extend(pd);
    }
    if regions.len() > 1 {
        let (mincloud_mae, mincloud_rmse) = pooled(&all_min)?;
        let (median_mae, median_rmse) = pooled(&all_med)?;
        rows.push(FusionRow {
            name: "all".to_string(),
            mincloud_mae,
            mincloud_rmse,
            median_mae,
            median_rmse,
        });
    }
    Ok(rows)
}

pub fn fusion_csv(rows: &[FusionRow]) -> String {
    let mut s = String::from("name,mincloud_mae,mincloud_rmse,median_mae,median_rmse\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.4}",
            r.name, r.mincloud_mae, r.mincloud_rmse, r.median_mae, r.median_rmse
        );
    }
    s
}

/// One row of the per-band-subset comparison: overall MAE and MAE per 10 m
/// reference bin (`None` for empty bins).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub overall: f64,
    pub bins: [Option<f64>; TABLE_BINS],
}

impl AblationRow {
    pub fn compute(name: &str, pred: &HeightMap, reference: &HeightMap) -> Result<Self, EvalError> {
        let overall = mae(pred, reference)?;
        let mut bins = [None; TABLE_BINS];
        for b in binned_mae(pred, reference, 10.0)? {
            let k = (b.lower / 10.0).round();
            if (0.0..TABLE_BINS as f64).contains(&k) {
                bins[k as usize] = Some(b.mae);
            }
        }
        Ok(Self {
            name: name.to_string(),
            overall,
            bins,
        })
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("name,overall");
    for k in 0..TABLE_BINS {
        let _ = write!(s, ",{}-{}", 10 * k, 10 * (k + 1));
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{:.4}", r.name, r.overall);
        for b in &r.bins {
            match b {
                Some(v) => {
                    let _ = write!(s, ",{v:.4}");
                }
                None => s.push_str(",-"),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f32]) -> HeightMap {
        HeightMap::dense(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn small_oracles() {
        assert_eq!(mae(&map(&[1.0, 2.0]), &map(&[3.0, 2.0])).unwrap(), 1.0);
        let r = rmse(&map(&[3.0, 4.0]), &map(&[0.0, 0.0])).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-12);
        let p = map(&[2.0, 5.0, -1.0]);
        let q = map(&[0.0, 3.0, 1.0]);
        assert_eq!(mae(&p, &q).unwrap(), 2.0);
        assert_eq!(rmse(&p, &q).unwrap(), 2.0);
        assert_eq!(mae(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn invalid_pixels_ignored() {
        let mut p = map(&[1.0, 2.0, 3.0]);
        let r = map(&[1.0, 2.0, 9.0]);
        p.invalidate(2);
        assert_eq!(mae(&p, &r).unwrap(), 0.0);
        let mut none = map(&[1.0]);
        none.invalidate(0);
        assert_eq!(mae(&none, &map(&[1.0])), Err(EvalError::NoOverlap));
    }

    #[test]
    fn bins_are_left_closed() {
        let b = binned_mae(&map(&[12.0, 5.0]), &map(&[10.0, 9.999]), 10.0).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!((b[1].lower, b[1].upper, b[1].count), (10.0, 20.0, 1));
        assert_eq!(b[1].mae, 2.0);
        assert!(binned_mae(&map(&[1.0]), &map(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn reference_filter_drops_forty() {
        let (f, removed) = filter_reference(&map(&[39.9, 40.0, 55.0, 3.0]), 40.0);
        assert_eq!(removed, 2);
        assert_eq!(f.valid(), &[true, false, false, true]);
        let (f, removed) = filter_reference(&map(&[1.0, 2.0]), 40.0);
        assert_eq!((f.n_valid(), removed), (2, 0));
    }

    #[test]
    fn confusion_cells_and_clamping() {
        let c = confusion_hist(&map(&[7.9, -0.5]), &map(&[3.2, 4.0]), 1.0).unwrap();
        assert_eq!(c.cells.get(&(3, 7)), Some(&1));
        assert_eq!(c.cells.get(&(4, 0)), Some(&1));
        assert_eq!(c.n_pixels, 2);
    }

    #[test]
    fn cumulative_examples() {
        let c = cumulative_distribution(&map(&[10.0, 20.0, 30.0, 50.0]), 5.0).unwrap();
        let at = |t: f64| c.iter().find(|(x, _)| *x == t).unwrap().1;
        assert_eq!(at(15.0), 0.25);
        assert_eq!(at(35.0), 0.75);
        assert_eq!(c.last().unwrap().1, 1.0);
        let z = cumulative_distribution(&map(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(z, vec![(1.0, 1.0)]);
    }

    #[test]
    fn table_shapes() {
        let p = map(&[1.0, 12.0, 25.0]);
        let r = map(&[2.0, 10.0, 20.0]);
        let rows = vec![
            AblationRow::compute("ALL", &p, &r).unwrap(),
            AblationRow::compute("ALL_1x1", &r, &r).unwrap(),
        ];
        let csv = ablation_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "name,overall,0-10,10-20,20-30,30-40,40-50,50-60,60-70"
        );
        assert_eq!(lines.next().unwrap(), "ALL,2.6667,1.0000,2.0000,5.0000,-,-,-,-");
        let f = fusion_table(&[
            FusionInput {
                name: "a",
                min_cloud: &p,
                median: &r,
                reference: &r,
            },
            FusionInput {
                name: "b",
                min_cloud: &r,
                median: &r,
                reference: &r,
            },
        ])
        .unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[2].name, "all");
        assert!((f[2].mincloud_mae - 8.0 / 6.0).abs() < 1e-12);
        assert!(fusion_csv(&f).starts_with("name,mincloud_mae,mincloud_rmse,median_mae,median_rmse\n"));
    }
}
