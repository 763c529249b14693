use std::collections::BTreeMap;

use canopy_core::eval::{
    binned_mae, confusion_hist, cumulative_distribution, filter_reference, mae, rmse, EvalReport,
};
use canopy_core::raster::HeightMap;
use proptest::prelude::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300)
}

fn maps(pixels: &[(f32, f32, bool, bool)]) -> (HeightMap, HeightMap) {
    let n = pixels.len();
    let pred = HeightMap::new(1, n, pixels.iter().map(|p| p.0).collect(), pixels.iter().map(|p| p.2).collect()).unwrap();
    let refm = HeightMap::new(1, n, pixels.iter().map(|p| p.1).collect(), pixels.iter().map(|p| p.3).collect()).unwrap();
    (pred, refm)
}

/// Jointly valid pairs in f64, kept as plain vectors.
fn joint(pixels: &[(f32, f32, bool, bool)]) -> Vec<(f64, f64)> {
    pixels.iter().filter(|p| p.2 && p.3).map(|p| (f64::from(p.0), f64::from(p.1))).collect()
}

fn pixel() -> impl Strategy<Value = (f32, f32, bool, bool)> {
    (-5.0f32..70.0, 0.0f32..70.0, prop::bool::weighted(0.85), prop::bool::weighted(0.85))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_match_brute_force(pixels in prop::collection::vec(pixel(), 1..300)) {
        let (pred, refm) = maps(&pixels);
        let pairs = joint(&pixels);
        if pairs.is_empty() {
            prop_assert!(mae(&pred, &refm).is_err());
            return Ok(());
        }
        let n = pairs.len() as f64;
        let want_mae = pairs.iter().map(|(p, r)| (p - r).abs()).sum::<f64>() / n;
        let want_rmse = (pairs.iter().map(|(p, r)| (p - r).powi(2)).sum::<f64>() / n).sqrt();
        let got_mae = mae(&pred, &refm).unwrap();
        let got_rmse = rmse(&pred, &refm).unwrap();
        prop_assert!(close(got_mae, want_mae), "{got_mae} vs {want_mae}");
        prop_assert!(close(got_rmse, want_rmse));
        prop_assert!(got_rmse >= got_mae * (1.0 - 1e-12));

        // per-bin oracle, reference bins of 10 m, left-closed
        let mut bins: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for (p, r) in &pairs {
            let mut k = 0i64;
            while (k + 1) as f64 * 10.0 <= *r {
                k += 1;
            }
            bins.entry(k).or_default().push((p - r).abs());
        }
        let got = binned_mae(&pred, &refm, 10.0).unwrap();
        prop_assert_eq!(got.len(), bins.len());
        let mut recombined = 0.0;
        for (b, (k, errs)) in got.iter().zip(&bins) {
            prop_assert!(close(b.lower, *k as f64 * 10.0));
            prop_assert_eq!(b.count, errs.len());
            prop_assert!(close(b.mae, errs.iter().sum::<f64>() / errs.len() as f64));
            recombined += b.mae * b.count as f64;
        }
        prop_assert!(close(recombined / n, got_mae));

        // confusion oracle with negative predictions clamped into bin 0
        let c = confusion_hist(&pred, &refm, 1.0).unwrap();
        let mut cells: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (p, r) in &pairs {
            let bin = |v: f64| if v < 0.0 { 0 } else { v.floor() as u32 };
            *cells.entry((bin(*r), bin(*p))).or_default() += 1;
        }
        prop_assert_eq!(&c.cells, &cells);
        prop_assert_eq!(c.n_pixels, pairs.len() as u64);
        prop_assert_eq!(c.reference_marginal().values().sum::<u64>(), c.n_pixels);
        prop_assert_eq!(c.prediction_marginal().values().sum::<u64>(), c.n_pixels);

        let report = EvalReport::compute(&pred, &refm).unwrap();
        prop_assert_eq!(report.per_bin_mae.iter().map(|b| b.count).sum::<usize>(), report.n_pixels);
    }

    #[test]
    fn cumulative_matches_counting(pixels in prop::collection::vec(pixel(), 1..200)) {
        let (pred, _) = maps(&pixels);
        let vals: Vec<f64> = pixels.iter().filter(|p| p.2).map(|p| f64::from(p.0)).collect();
        if vals.is_empty() {
            prop_assert!(cumulative_distribution(&pred, 1.0).is_err());
            return Ok(());
        }
        let curve = cumulative_distribution(&pred, 1.0).unwrap();
        let mut prev = 0.0;
        for (t, f) in &curve {
            let below = vals.iter().filter(|&&v| v < *t).count() as f64 / vals.len() as f64;
            prop_assert!(close(*f, below) || (*f == 0.0 && below == 0.0));
            prop_assert!(*f >= prev);
            prev = *f;
        }
        prop_assert_eq!(curve.last().unwrap().1, 1.0);
    }

    #[test]
    fn metrics_ignore_pixel_order(pixels in prop::collection::vec(pixel(), 2..200), shift in 1usize..199) {
        let (pred, refm) = maps(&pixels);
        let mut rotated = pixels.clone();
        rotated.rotate_left(shift % pixels.len());
        let (pred2, ref2) = maps(&rotated);
        if let (Ok(a), Ok(b)) = (mae(&pred, &refm), mae(&pred2, &ref2)) {
            prop_assert!(close(a, b));
            prop_assert!(close(rmse(&pred, &refm).unwrap(), rmse(&pred2, &ref2).unwrap()));
        }
    }

    #[test]
    fn invalid_pixels_do_not_matter(pixels in prop::collection::vec(pixel(), 1..100), junk in -100.0f32..100.0) {
        let mut changed = pixels.clone();
        for p in &mut changed {
            if !(p.2 && p.3) {
                p.0 = junk;
            }
        }
        let (a, ar) = maps(&pixels);
        let (b, br) = maps(&changed);
        prop_assert_eq!(mae(&a, &ar).ok().map(f64::to_bits), mae(&b, &br).ok().map(f64::to_bits));
    }

    #[test]
    fn filter_counts_removed(pixels in prop::collection::vec(pixel(), 1..200)) {
        let (_, refm) = maps(&pixels);
        let (kept, removed) = filter_reference(&refm, 40.0);
        let want = pixels.iter().filter(|p| p.3 && p.1 >= 40.0).count();
        prop_assert_eq!(removed, want);
        prop_assert!((0..kept.len()).all(|i| kept.get(i).is_none_or(|h| h < 40.0)));
    }
}

#[test]
fn constant_residual_gives_equal_metrics() {
    let pred = HeightMap::dense(1, 4, vec![3.0, 8.0, 13.0, 21.0]).unwrap();
    let refm = HeightMap::dense(1, 4, vec![5.0, 10.0, 15.0, 23.0]).unwrap();
    assert!(close(mae(&pred, &refm).unwrap(), 2.0));
    assert!(close(rmse(&pred, &refm).unwrap(), 2.0));
}
