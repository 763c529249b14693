use canopy_core::model::{ModelConfig, ModelParams};
use canopy_core::preprocess::{compute_norm_stats, NormStats, StatsOptions};
use canopy_core::raster::{generate_scene, Band, HeightMap, LandCover, RasterCube, SceneSpec};
use canopy_core::tensor::Tensor;
use canopy_core::train::{
    loss_and_grad, masked_mse, patch_accepted, Center, PatchSource, TrainConfig, Trainer,
    PATCH_PIXELS,
};
use chrono::NaiveDate;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 31;

/// Clear cube whose first `cloudy` pixels (row-major) of the 15x15 window
/// centered at (15, 15) are cloudy.
fn cube_with_cloudy_window(cloudy: usize) -> RasterCube {
    let n = SIDE * SIDE;
    let mut cloud = vec![0.0f32; n];
    let mut k = 0;
    'outer: for r in 8..23 {
        for c in 8..23 {
            if k == cloudy {
                break 'outer;
            }
            cloud[r * SIDE + c] = 60.0;
            k += 1;
        }
    }
    let bands = (0..13 * n).map(|i| (i % 97) as f32 * 0.01).collect();
    RasterCube::new(
        SIDE,
        SIDE,
        Band::ALL.to_vec(),
        bands,
        cloud,
        vec![LandCover::Vegetation; n],
        vec![true; n],
        10.0,
        NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(),
    )
    .unwrap()
}

fn center_only() -> Vec<bool> {
    let mut m = vec![false; SIDE * SIDE];
    m[15 * SIDE + 15] = true;
    m
}

#[test]
fn acceptance_boundary_is_ten_percent() {
    assert_eq!(PATCH_PIXELS, 225);
    assert!(patch_accepted(22));
    assert!(!patch_accepted(23));
    let reference = HeightMap::dense(SIDE, SIDE, vec![12.0; SIDE * SIDE]).unwrap();
    let stats = NormStats::identity(Band::ALL.to_vec());
    for (cloudy, accepted) in [(0, true), (22, true), (23, false), (225, false)] {
        let src = PatchSource::new(&[cube_with_cloudy_window(cloudy)], &reference, &stats, &center_only()).unwrap();
        assert_eq!(!src.centers().is_empty(), accepted, "{cloudy} cloudy pixels");
    }
}

#[test]
fn sampler_is_uniform_over_eligible_centers() {
    let reference = HeightMap::dense(SIDE, SIDE, vec![12.0; SIDE * SIDE]).unwrap();
    let stats = NormStats::identity(Band::ALL.to_vec());
    let mut region = center_only();
    region[15 * SIDE + 16] = true;
    let src = PatchSource::new(&[cube_with_cloudy_window(0)], &reference, &stats, &region).unwrap();
    assert_eq!(src.centers().len(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 4000;
    let hits = src
        .sample_centers(n, &mut rng)
        .unwrap()
        .iter()
        .filter(|c| **c == Center { date: 0, row: 15, col: 15 })
        .count();
    // binomial(4000, 1/2): sd is about 31.6; allow 4 sd
    let dev = (hits as f64 - n as f64 / 2.0).abs();
    assert!(dev < 4.0 * (n as f64 * 0.25).sqrt(), "hits {hits}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_loss_ignores_invalid_targets(
        vals in prop::collection::vec((-20.0f32..20.0, 0.0f32..40.0, any::<bool>()), 2..64),
        junk in -1e3f32..1e3,
    ) {
        prop_assume!(vals.iter().any(|v| v.2));
        let n = vals.len();
        let pred = Tensor::from_vec(&[1, 1, 1, n], vals.iter().map(|v| v.0).collect()).unwrap();
        let t = Tensor::from_vec(&[1, 1, 1, n], vals.iter().map(|v| v.1).collect()).unwrap();
        let mask: Vec<bool> = vals.iter().map(|v| v.2).collect();
        let mut t2 = t.clone();
        let mut pred2 = pred.clone();
        for i in 0..n {
            if !mask[i] {
                t2.data_mut()[i] = junk;
                pred2.data_mut()[i] = -junk;
            }
        }
        let (l1, g1) = masked_mse(&pred, &t, &mask).unwrap();
        let (l2, g2) = masked_mse(&pred2, &t2, &mask).unwrap();
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert_eq!(g1, g2);
    }
}

#[test]
fn model_loss_ignores_invalid_targets() {
    let cfg = ModelConfig { in_channels: 3, trunk_width: 8, n_blocks: 1, entry_depths: [4, 6], ..ModelConfig::desk(3) };
    let p = ModelParams::<f32>::build(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.random_range(-1.0f32..1.0));
    let t = Tensor::from_fn(&[2, 1, 6, 6], |_| rng.random_range(0.0f32..30.0));
    let mask: Vec<bool> = (0..72).map(|i| i % 3 != 0).collect();
    let mut t2 = t.clone();
    for (v, &m) in t2.data_mut().iter_mut().zip(&mask) {
        if !m {
            *v = 1e4;
        }
    }
    let (l1, g1, _) = loss_and_grad(&p, &x, &t, &mask, 1e-3).unwrap();
    let (l2, g2, _) = loss_and_grad(&p, &x, &t2, &mask, 1e-3).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn small_model_overfits_a_hundred_patches() {
    let scene = generate_scene(&SceneSpec { height: 64, width: 64, n_dates: 1, ..SceneSpec::default() }).unwrap();
    let refs: Vec<&RasterCube> = scene.cubes.iter().collect();
    let stats = compute_norm_stats(&refs, &Band::ALL, StatsOptions::default()).unwrap();
    let src = PatchSource::new(&scene.cubes, &scene.reference, &stats, &vec![true; 64 * 64]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = src.sample(100, &mut rng).unwrap();

    let cfg = ModelConfig { in_channels: 13, trunk_width: 16, n_blocks: 2, entry_depths: [8, 12], ..ModelConfig::desk(13) };
    let train = TrainConfig { base_lr: 1e-3, ..TrainConfig::default() };
    let mut tr = Trainer::new(ModelParams::build(&cfg).unwrap(), train).unwrap();
    let first = tr.step(&batch).unwrap();
    let mut last = first;
    for _ in 1..5000 {
        last = tr.step(&batch).unwrap();
        if last < 0.01 * first {
            break;
        }
    }
    assert!(last < 0.01 * first, "loss {first} -> {last} after {} steps", tr.iteration);
}
