//! Data directory layout written by `synthesize` and read by the other
//! commands: `date_NN.rcube` acquisitions, `reference.rcube` heights and an
//! optional noise-free `latent.rcube`.

use std::fs;
use std::path::{Path, PathBuf};

use canopy_core::raster::{read_cube, read_height_map, HeightMap, RasterCube};

use crate::error::CliError;

pub const REFERENCE_FILE: &str = "reference.rcube";
pub const LATENT_FILE: &str = "latent.rcube";

pub fn date_file(i: usize) -> String {
    format!("date_{i:02}.rcube")
}

pub struct DataSet {
    pub cube_paths: Vec<PathBuf>,
    pub cubes: Vec<RasterCube>,
    pub reference_path: PathBuf,
    pub reference: HeightMap,
    pub latent: Option<HeightMap>,
}

/// Acquisition files in `dir`, sorted by name.
pub fn cube_paths(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("date_") && name.ends_with(".rcube") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("no date_*.rcube files in {}", dir.display())));
    }
    Ok(paths)
}

pub fn read_cubes(paths: &[PathBuf]) -> Result<Vec<RasterCube>, CliError> {
    paths.iter().map(|p| Ok(read_cube(p)?)).collect()
}

impl DataSet {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let cube_paths = cube_paths(dir)?;
        let cubes = read_cubes(&cube_paths)?;
        let reference_path = dir.join(REFERENCE_FILE);
        let reference = read_height_map(&reference_path)?;
        let latent_path = dir.join(LATENT_FILE);
        let latent = if latent_path.exists() {
            Some(read_height_map(&latent_path)?)
        } else {
            None
        };
        for (p, c) in cube_paths.iter().zip(&cubes) {
            if (c.height(), c.width()) != (reference.height(), reference.width()) {
                return Err(CliError::Data(format!(
                    "{} is {}x{}, reference is {}x{}",
                    p.display(),
                    c.height(),
                    c.width(),
                    reference.height(),
                    reference.width()
                )));
            }
        }
        Ok(Self {
            cube_paths,
            cubes,
            reference_path,
            reference,
            latent,
        })
    }
}
