use std::fs;
use std::io::BufWriter;
use std::ops::Range;
use std::path::{Path, PathBuf};

use canopy_core::eval::{
    self, ablation_csv, fusion_csv, fusion_table, AblationRow, EvalReport, FusionInput,
};
use canopy_core::experiment::{self, row_splits, ExperimentConfig, Variant};
use canopy_core::infer::{
    fuse_median, fuse_min_cloud, predict_scene, write_pgm, DatePrediction, MaskOptions,
    PredictionStack, TileGrid,
};
use canopy_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelParams};
use canopy_core::par::Exec;
use canopy_core::preprocess::{compute_norm_stats, BandSubset, StatsOptions};
use canopy_core::raster::{
    generate_scene, read_height_map, write_cube, write_height_map, HeightMap, RasterCube,
};
use canopy_core::train::{self, write_loss_curve, CurvePoint, PatchSource, TrainError, Trainer};
use serde::Serialize;

use crate::config::{load_scene_spec, RunConfig};
use crate::data::{self, DataSet, LATENT_FILE, REFERENCE_FILE};
use crate::error::CliError;
use crate::manifest::ManifestBuilder;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_text(path, &(text + "\n"))
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_loss_curve(&mut w, curve).map_err(|e| CliError::io(path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| CliError::io(path, e))
}

fn write_pgm_file(path: &Path, map: &HeightMap) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_pgm(&mut w, map).map_err(|e| CliError::io(path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| CliError::io(path, e))
}

fn progress(quiet: bool, label: String) -> impl FnMut(&CurvePoint) {
    move |p: &CurvePoint| {
        if let (false, Some(v)) = (quiet, p.val_loss) {
            eprintln!(
                "{label}iteration {:>6}  train {:.4}  val {:.4}",
                p.iteration, p.train_loss, v
            );
        }
    }
}

/// Parses `START:END` into a row range.
pub fn parse_rows(s: &str) -> Result<Range<usize>, CliError> {
    let bad = || CliError::Config(format!("row range {s:?} is not START:END"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let (a, b) = (
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    );
    if a >= b {
        return Err(bad());
    }
    Ok(a..b)
}

fn row_mask(h: usize, w: usize, rows: &Range<usize>) -> Result<Vec<bool>, CliError> {
    if rows.end > h {
        return Err(CliError::Data(format!(
            "rows {}..{} outside a {h}-row image",
            rows.start, rows.end
        )));
    }
    Ok((0..h * w).map(|i| rows.contains(&(i / w))).collect())
}

// ---- synthesize -----------------------------------------------------------

pub fn synthesize(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = load_scene_spec(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let scene = generate_scene(&spec)?;
    create_dir(out)?;
    let mut m = ManifestBuilder::new("synthesize", out);
    m.seed(spec.seed).config(&spec);
    for (i, cube) in scene.cubes.iter().enumerate() {
        let p = out.join(data::date_file(i));
        write_cube(cube, &p)?;
        m.output(&p);
    }
    for (name, map) in [(REFERENCE_FILE, &scene.reference), (LATENT_FILE, &scene.latent)] {
        let p = out.join(name);
        write_height_map(map, &p)?;
        m.output(&p);
    }
    m.summary("n_dates", scene.cubes.len())
        .summary("height", spec.height)
        .summary("width", spec.width);
    m.write()?;
    Ok(())
}

// ---- stats ----------------------------------------------------------------

pub fn stats(data_dir: &Path, bands: &str, rows: Option<&str>, out: &Path) -> Result<(), CliError> {
    let subset: BandSubset = bands.parse()?;
    let paths = data::cube_paths(data_dir)?;
    let cubes = data::read_cubes(&paths)?;
    let (h, w) = (cubes[0].height(), cubes[0].width());
    let mask = rows.map(parse_rows).transpose()?.map(|r| row_mask(h, w, &r)).transpose()?;
    let refs: Vec<&RasterCube> = cubes.iter().collect();
    let stats = compute_norm_stats(
        &refs,
        &subset.bands(),
        StatsOptions {
            include_cloudy: false,
            mask: mask.as_deref(),
        },
    )?;
    create_dir(out)?;
    let mut m = ManifestBuilder::new("stats", out);
    m.config(&serde_json::json!({ "bands": subset.name(), "rows": rows }));
    for p in &paths {
        m.input(p)?;
    }
    let p = out.join("stats.json");
    write_json(&p, &stats)?;
    m.output(&p);
    m.write()?;
    Ok(())
}

// ---- train ----------------------------------------------------------------

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub resume: Option<&'a Path>,
    pub quiet: bool,
}

pub fn train(args: TrainArgs<'_>) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config)?.with_seed(args.seed);
    cfg.validate()?;
    let variant = cfg.variant()?;
    let ds = DataSet::load(args.data)?;
    if let Some(band) = variant.missing_band(&ds.cubes) {
        return Err(CliError::Data(format!(
            "variant {} needs band {band}, which the data lacks",
            variant.name
        )));
    }
    let (h, w) = (ds.reference.height(), ds.reference.width());
    let splits = row_splits(h, w, &cfg.split)?;
    let train_cfg = cfg.train_config();

    let mut m = ManifestBuilder::new("train", args.out);
    m.seed(cfg.seed).config(&cfg);
    for p in &ds.cube_paths {
        m.input(p)?;
    }
    m.input(&ds.reference_path)?;

    let trainer = match args.resume {
        Some(path) => {
            m.input(path)?;
            let ck = load_checkpoint(path)?;
            let stats = ck
                .params
                .norm_stats
                .as_ref()
                .ok_or_else(|| CliError::Data("checkpoint has no normalization statistics".into()))?;
            if stats.band_ids != variant.bands.bands() {
                return Err(CliError::Data(format!(
                    "checkpoint bands {:?} differ from variant {}",
                    stats.band_ids, variant.name
                )));
            }
            Trainer::resume(&ck, train_cfg.clone())?
        }
        None => {
            let refs: Vec<&RasterCube> = ds.cubes.iter().collect();
            let stats = compute_norm_stats(
                &refs,
                &variant.bands.bands(),
                StatsOptions {
                    include_cloudy: false,
                    mask: Some(&splits.train),
                },
            )?;
            let mut params = ModelParams::<f32>::build(&cfg.model_config(&variant))?;
            params.norm_stats = Some(stats);
            Trainer::new(params, train_cfg.clone())?
        }
    };
    let stats = trainer.params.norm_stats.clone().expect("set above");
    let start_iteration = trainer.iteration;
    let train_src = PatchSource::new(&ds.cubes, &ds.reference, &stats, &splits.train)?;
    let val_src = PatchSource::new(&ds.cubes, &ds.reference, &stats, &splits.val)?;
    let val = train::validation_batch(&val_src, train_cfg.val_patches, train_cfg.seed)?;

    create_dir(args.out)?;
    let mut report = progress(args.quiet, String::new());
    let outcome = match train::train(trainer, &train_src, Some(&val), &mut report) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            iteration,
            reason,
            dump,
        }) => {
            let p = args.out.join("diverged.ckpt");
            save_checkpoint(&p, &dump.params, &dump.meta, &dump.extra)?;
            return Err(CliError::Numeric {
                message: format!(
                    "training diverged at iteration {iteration}: {reason}; state saved to {}",
                    p.display()
                ),
                dump: Some(p),
            });
        }
        Err(e) => return Err(e.into()),
    };

    let best = args.out.join("best.ckpt");
    let last = args.out.join("last.ckpt");
    let curve = args.out.join("loss.csv");
    save_ck(&best, &outcome.best)?;
    save_ck(&last, &outcome.last)?;
    write_curve(&curve, &outcome.curve)?;
    m.output(&best).output(&last).output(&curve);
    let meta = &outcome.last.meta;
    m.summary("variant", &variant.name)
        .summary("model_seed", cfg.model_config(&variant).seed)
        .summary("sampling_seed", train_cfg.seed)
        .summary("start_iteration", start_iteration)
        .summary("final_iteration", meta.iteration)
        .summary("best_iteration", meta.best_iteration)
        .summary("best_val_loss", meta.best_val_loss)
        .summary("param_count", outcome.best.params.count_params())
        .summary("splits", splits.rows);
    m.write()?;
    Ok(())
}

fn save_ck(path: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    Ok(save_checkpoint(path, &ck.params, &ck.meta, &ck.extra)?)
}

// ---- predict --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
pub enum FuseMethod {
    Median,
    Mincloud,
}

impl FuseMethod {
    fn file(self) -> &'static str {
        match self {
            FuseMethod::Median => "fused_median.rcube",
            FuseMethod::Mincloud => "fused_mincloud.rcube",
        }
    }

    fn apply(self, stack: &PredictionStack) -> HeightMap {
        match self {
            FuseMethod::Median => fuse_median(stack),
            FuseMethod::Mincloud => fuse_min_cloud(stack),
        }
    }
}

pub struct PredictArgs<'a> {
    pub checkpoint: &'a Path,
    pub cubes: Vec<PathBuf>,
    pub out: &'a Path,
    pub fuse: Option<FuseMethod>,
    pub tile: usize,
    pub overlap: usize,
    pub bands: Option<&'a str>,
    pub mask_snow: bool,
    pub pgm: bool,
}

#[derive(Serialize)]
struct PredictSnapshot<'a> {
    checkpoint: &'a Path,
    tile_size: usize,
    overlap: usize,
    mask_snow: bool,
    fuse: Option<FuseMethod>,
    bands: Vec<String>,
}

fn pred_name(cube: &Path) -> String {
    let stem = cube.file_stem().and_then(|s| s.to_str()).unwrap_or("date");
    format!("pred_{stem}.rcube")
}

pub fn predict(args: PredictArgs<'_>) -> Result<(), CliError> {
    let ck = load_checkpoint(args.checkpoint)?;
    let stats = ck
        .params
        .norm_stats
        .clone()
        .ok_or_else(|| CliError::Data("checkpoint has no normalization statistics".into()))?;
    if let Some(b) = args.bands {
        let subset: BandSubset = b.parse()?;
        if subset.bands() != stats.band_ids {
            return Err(CliError::Data(format!(
                "--bands {} does not match the checkpoint's bands {:?}",
                subset.name(),
                stats.band_ids
            )));
        }
    }
    if args.cubes.is_empty() {
        return Err(CliError::Config("no input cubes".into()));
    }
    let cubes = data::read_cubes(&args.cubes)?;
    let (h, w) = (cubes[0].height(), cubes[0].width());
    let grid = TileGrid::new(h, w, args.tile, args.overlap)?;
    let mask = MaskOptions {
        mask_snow: args.mask_snow,
    };

    let mut m = ManifestBuilder::new("predict", args.out);
    m.config(&PredictSnapshot {
        checkpoint: args.checkpoint,
        tile_size: args.tile,
        overlap: args.overlap,
        mask_snow: args.mask_snow,
        fuse: args.fuse,
        bands: stats.band_ids.iter().map(|b| b.to_string()).collect(),
    });
    m.input(args.checkpoint)?;
    for p in &args.cubes {
        m.input(p)?;
    }
    create_dir(args.out)?;
    let mut entries = Vec::with_capacity(cubes.len());
    for (path, cube) in args.cubes.iter().zip(&cubes) {
        if (cube.height(), cube.width()) != (h, w) {
            return Err(CliError::Data(format!(
                "{} is {}x{}, first cube is {h}x{w}",
                path.display(),
                cube.height(),
                cube.width()
            )));
        }
        let map = predict_scene(&ck.params, cube, &grid, mask, Exec::Parallel)?;
        let p = args.out.join(pred_name(path));
        write_height_map(&map, &p)?;
        m.output(&p);
        if args.pgm {
            let q = p.with_extension("pgm");
            write_pgm_file(&q, &map)?;
            m.output(&q);
        }
        entries.push(DatePrediction::from_cube(map, cube));
    }
    if let Some(method) = args.fuse {
        let stack = PredictionStack::new(entries)?;
        let fused = method.apply(&stack);
        let p = args.out.join(method.file());
        write_height_map(&fused, &p)?;
        m.output(&p);
        if args.pgm {
            let q = p.with_extension("pgm");
            write_pgm_file(&q, &fused)?;
            m.output(&q);
        }
    }
    let radius = ck.params.config().receptive_radius();
    m.summary("n_dates", cubes.len())
        .summary("tiles", grid.tiles().len())
        .summary("receptive_radius", radius)
        .summary("min_owned_depth", grid.min_owned_depth())
        .summary("tiling_exact", grid.min_owned_depth() >= radius);
    m.write()?;
    Ok(())
}

// ---- fuse -----------------------------------------------------------------

pub fn fuse(preds: &[PathBuf], cubes: &[PathBuf], method: FuseMethod, out: &Path) -> Result<(), CliError> {
    if preds.len() != cubes.len() || preds.is_empty() {
        return Err(CliError::Config(format!(
            "need one cube per prediction, got {} predictions and {} cubes",
            preds.len(),
            cubes.len()
        )));
    }
    let mut m = ManifestBuilder::new("fuse", out);
    m.config(&serde_json::json!({ "method": method }));
    let mut entries = Vec::with_capacity(preds.len());
    for (p, c) in preds.iter().zip(cubes) {
        m.input(p)?.input(c)?;
        let map = read_height_map(p)?;
        let cube = canopy_core::raster::read_cube(c)?;
        if !(map.height() == cube.height() && map.width() == cube.width()) {
            return Err(CliError::Data(format!(
                "{} and {} are on different grids",
                p.display(),
                c.display()
            )));
        }
        entries.push(DatePrediction::from_cube(map, &cube));
    }
    let stack = PredictionStack::new(entries)?;
    let fused = method.apply(&stack);
    create_dir(out)?;
    let p = out.join(method.file());
    write_height_map(&fused, &p)?;
    m.output(&p).summary("n_dates", stack.len()).summary("valid_pixels", fused.n_valid());
    m.write()?;
    Ok(())
}

// ---- evaluate -------------------------------------------------------------

pub struct EvaluateArgs<'a> {
    pub pred: &'a Path,
    pub reference: &'a Path,
    pub min_cloud: Option<&'a Path>,
    pub out: &'a Path,
    pub max_ref: Option<f32>,
    pub rows: Option<&'a str>,
    pub name: &'a str,
}

pub fn evaluate(args: EvaluateArgs<'_>) -> Result<(), CliError> {
    let pred = read_height_map(args.pred)?;
    let reference = read_height_map(args.reference)?;
    let rows = args.rows.map(parse_rows).transpose()?;
    let mut m = ManifestBuilder::new("evaluate", args.out);
    m.config(&serde_json::json!({
        "max_ref": args.max_ref,
        "rows": args.rows,
        "name": args.name,
    }));
    m.input(args.pred)?.input(args.reference)?;
    let region = match &rows {
        Some(r) => Some(row_mask(reference.height(), reference.width(), r)?),
        None => None,
    };
    let reference = match &region {
        Some(mask) => experiment::restrict(&reference, mask),
        None => reference,
    };
    let (reference, removed) = match args.max_ref {
        Some(h) => eval::filter_reference(&reference, h),
        None => (reference, 0),
    };
    let report = EvalReport::compute(&pred, &reference)?;
    create_dir(args.out)?;
    let extra = serde_json::json!({
        "removed_reference_pixels": removed,
        "max_ref": args.max_ref,
    });
    report
        .write_dir(args.out, extra)
        .map_err(|e| CliError::io(args.out, e))?;
    for f in ["report.json", "bins.csv", "confusion.csv", "cumulative.csv"] {
        m.output(&args.out.join(f));
    }
    let table = args.out.join("table_bins.csv");
    write_text(&table, &ablation_csv(&[AblationRow::compute(args.name, &pred, &reference)?]))?;
    m.output(&table);
    if let Some(mc) = args.min_cloud {
        m.input(mc)?;
        let min_cloud = read_height_map(mc)?;
        let rows = fusion_table(&[FusionInput {
            name: args.name,
            min_cloud: &min_cloud,
            median: &pred,
            reference: &reference,
        }])?;
        let p = args.out.join("fusion.csv");
        write_text(&p, &fusion_csv(&rows))?;
        m.output(&p);
    }
    m.summary("mae", report.mae)
        .summary("rmse", report.rmse)
        .summary("n_pixels", report.n_pixels)
        .summary("removed_reference_pixels", removed);
    m.write()?;
    Ok(())
}

// ---- ablate ---------------------------------------------------------------

pub struct AblateArgs<'a> {
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub variants: Option<&'a str>,
    pub quiet: bool,
}

#[derive(Serialize)]
struct VariantSummary {
    name: String,
    median_mae: f64,
    median_rmse: f64,
    min_cloud_mae: f64,
    min_cloud_rmse: f64,
    best_iteration: Option<u64>,
    best_val_loss: Option<f64>,
}

pub fn ablate(args: AblateArgs<'_>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config)?.with_seed(args.seed);
    if let Some(v) = args.variants {
        cfg.ablate.variants = v.split(',').map(|s| s.trim().to_string()).collect();
    }
    cfg.validate()?;
    let variants = cfg
        .ablate
        .variants
        .iter()
        .map(|v| Ok(Variant::parse(v)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let ds = DataSet::load(args.data)?;
    let (h, w) = (ds.reference.height(), ds.reference.width());
    let splits = row_splits(h, w, &cfg.split)?;

    let mut m = ManifestBuilder::new("ablate", args.out);
    m.seed(cfg.seed).config(&cfg);
    for p in &ds.cube_paths {
        m.input(p)?;
    }
    m.input(&ds.reference_path)?;
    create_dir(args.out)?;

    let base = cfg.variant()?;
    let exp = ExperimentConfig {
        model: cfg.model_config(&base),
        train: cfg.train_config(),
        split: cfg.split.clone(),
        predict: cfg.predict,
        exec: Exec::Parallel,
    };
    let mut rows = Vec::new();
    let mut fusion_rows = Vec::new();
    let mut skipped = String::from("variant,reason\n");
    let mut summaries = Vec::new();
    let mut floor = None;
    for v in &variants {
        if let Some(band) = v.missing_band(&ds.cubes) {
            skipped.push_str(&format!("{},missing band {band}\n", v.name));
            if !args.quiet {
                eprintln!("skipping {}: missing band {band}", v.name);
            }
            continue;
        }
        let mut report = progress(args.quiet, format!("[{}] ", v.name));
        let out = experiment::run_variant(&ds.cubes, &ds.reference, &splits, v, &exp, &mut report)?;
        let dir = args.out.join("variants").join(&v.name);
        create_dir(&dir)?;
        let ck = dir.join("best.ckpt");
        save_ck(&ck, &out.best)?;
        let curve = dir.join("loss.csv");
        write_curve(&curve, &out.curve)?;
        let med = dir.join("fused_median.rcube");
        write_height_map(&out.fused.median, &med)?;
        let mc = dir.join("fused_mincloud.rcube");
        write_height_map(&out.fused.min_cloud, &mc)?;
        m.output(&ck).output(&curve).output(&med).output(&mc);
        let e = &out.evaluation;
        if floor.is_none() {
            if let Some(latent) = &ds.latent {
                floor = Some(experiment::noise_floor(latent, &e.reference)?);
            }
        }
        fusion_rows.extend(fusion_table(&[FusionInput {
            name: &v.name,
            min_cloud: &out.fused.min_cloud,
            median: &out.fused.median,
            reference: &e.reference,
        }])?);
        summaries.push(VariantSummary {
            name: v.name.clone(),
            median_mae: e.median.mae,
            median_rmse: e.median.rmse,
            min_cloud_mae: e.min_cloud.mae,
            min_cloud_rmse: e.min_cloud.rmse,
            best_iteration: out.best.meta.best_iteration,
            best_val_loss: out.best.meta.best_val_loss,
        });
        rows.push(e.row.clone());
    }
    let files = [
        ("ablation.csv", ablation_csv(&rows)),
        ("fusion.csv", fusion_csv(&fusion_rows)),
        ("skipped.csv", skipped),
    ];
    for (name, text) in files {
        let p = args.out.join(name);
        write_text(&p, &text)?;
        m.output(&p);
    }
    m.summary("variants", &summaries)
        .summary("noise_floor_mae", floor)
        .summary("splits", splits.rows);
    m.write()?;
    Ok(())
}
