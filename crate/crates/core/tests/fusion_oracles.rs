use canopy_core::infer::{
    fuse_median, fuse_min_cloud, per_date_spread, DatePrediction, PredictionStack,
};
use canopy_core::raster::{HeightMap, LandCover};
use chrono::{Days, NaiveDate};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 32;

fn random_stack(seed: u64, n_dates: usize) -> PredictionStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(2019, 3, 1).unwrap();
    let entries = (0..n_dates)
        .map(|d| {
            let n = SIDE * SIDE;
            let heights: Vec<f32> = (0..n).map(|_| rng.random_range(0.0f32..45.0)).collect();
            let valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            // few distinct cloud levels so ties actually occur
            let cloud: Vec<f32> = (0..n).map(|_| rng.random_range(0..4u8) as f32 * 3.0).collect();
            DatePrediction {
                heights: HeightMap::new(SIDE, SIDE, heights, valid).unwrap(),
                cloud_prob: cloud,
                landcover: vec![LandCover::Vegetation; n],
                date: start + Days::new(7 * d as u64),
            }
        })
        .collect();
    PredictionStack::new(entries).unwrap()
}

fn bits(m: &HeightMap) -> Vec<Option<u32>> {
    (0..m.len()).map(|i| m.get(i).map(f32::to_bits)).collect()
}

fn brute_median(values: &[f32]) -> Option<f32> {
    let mut v: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] as f32 } else { ((v[n / 2 - 1] + v[n / 2]) / 2.0) as f32 })
}

fn brute_min_cloud(stack: &PredictionStack, i: usize) -> Option<f32> {
    let mut order: Vec<&DatePrediction> = stack.entries().iter().collect();
    order.sort_by_key(|e| e.date);
    let mut best: Option<(f32, f32)> = None;
    for e in order {
        if let Some(v) = e.heights.get(i) {
            if best.is_none_or(|(p, _)| e.cloud_prob[i] < p) {
                best = Some((e.cloud_prob[i], v));
            }
        }
    }
    best.map(|(_, v)| v)
}

#[test]
fn fusion_matches_brute_force_on_ten_stacks() {
    for seed in 0..10 {
        let stack = random_stack(seed, 5);
        let med = fuse_median(&stack);
        let mc = fuse_min_cloud(&stack);
        for i in 0..SIDE * SIDE {
            let vals: Vec<f32> = stack.entries().iter().filter_map(|e| e.heights.get(i)).collect();
            assert_eq!(med.get(i).map(f32::to_bits), brute_median(&vals).map(f32::to_bits), "median seed {seed} px {i}");
            assert_eq!(mc.get(i).map(f32::to_bits), brute_min_cloud(&stack, i).map(f32::to_bits), "mincloud seed {seed} px {i}");
        }
    }
}

#[test]
fn min_cloud_tie_goes_to_earliest_date_regardless_of_order() {
    let stack = random_stack(3, 4);
    let mut reversed: Vec<DatePrediction> = stack.entries().to_vec();
    reversed.reverse();
    let rev = PredictionStack::new(reversed).unwrap();
    assert_eq!(bits(&fuse_min_cloud(&stack)), bits(&fuse_min_cloud(&rev)));
}

#[test]
fn spread_of_two_dates() {
    let date = |d| NaiveDate::from_ymd_opt(2020, 1, d).unwrap();
    let reference = HeightMap::dense(1, 2, vec![10.0, 10.0]).unwrap();
    let mk = |v: f32, d| DatePrediction {
        heights: HeightMap::dense(1, 2, vec![10.0 + v, 10.0 - v]).unwrap(),
        cloud_prob: vec![0.0; 2],
        landcover: vec![LandCover::Vegetation; 2],
        date: date(d),
    };
    let s = per_date_spread(&PredictionStack::new(vec![mk(2.0, 1), mk(4.0, 2)]).unwrap(), &reference).unwrap();
    assert!((s.mean - 3.0).abs() < 1e-12);
    assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn median_is_bounded_and_order_free(seed in 0u64..10_000, rot in 1usize..4) {
        let stack = random_stack(seed, 4);
        let med = fuse_median(&stack);
        let mut rotated = stack.entries().to_vec();
        rotated.rotate_left(rot);
        let med2 = fuse_median(&PredictionStack::new(rotated).unwrap());
        prop_assert_eq!(bits(&med), bits(&med2));
        for i in 0..SIDE * SIDE {
            let vals: Vec<f32> = stack.entries().iter().filter_map(|e| e.heights.get(i)).collect();
            if let Some(m) = med.get(i) {
                let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(lo <= m && m <= hi);
            } else {
                prop_assert!(vals.is_empty());
            }
        }
    }

    #[test]
    fn invalidating_a_date_leaves_its_invalid_pixels_alone(seed in 0u64..10_000, victim in 0usize..4, px in 0usize..SIDE * SIDE) {
        let stack = random_stack(seed, 4);
        let mut entries = stack.entries().to_vec();
        entries[victim].heights.invalidate(px);
        let after = PredictionStack::new(entries).unwrap();
        let (m0, m1) = (fuse_median(&stack), fuse_median(&after));
        let (c0, c1) = (fuse_min_cloud(&stack), fuse_min_cloud(&after));
        for i in 0..SIDE * SIDE {
            if i != px || stack.entries()[victim].heights.get(i).is_none() {
                prop_assert_eq!(m0.get(i).map(f32::to_bits), m1.get(i).map(f32::to_bits));
                prop_assert_eq!(c0.get(i).map(f32::to_bits), c1.get(i).map(f32::to_bits));
            }
        }
    }
}
