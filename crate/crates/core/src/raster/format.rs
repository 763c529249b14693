//! `.rcube` container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RCUB"
//! 4       2     version (u16)
//! 6       1     kind: 0 = reflectance cube, 1 = height map
//! 7       1     dtype: 1 = float32
//! 8       4     channels (u32)
//! 12      4     height (u32)
//! 16      4     width (u32)
//! 20      ...   channel planes, f32, in band_ids order
//! kind 0: cloud_prob plane (f32), landcover plane (u8), valid plane (u8)
//! kind 1: valid plane (u8)
//! ```
//!
//! Metadata lives in a JSON sidecar at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{Band, HeightMap, LandCover, RasterCube, RasterError, GSD_10M};

pub const MAGIC: &[u8; 4] = b"RCUB";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 20;
const KIND_CUBE: u8 = 0;
const KIND_HEIGHTS: u8 = 1;
const DTYPE_F32: u8 = 1;
const HEIGHT_BAND_LABEL: &str = "HEIGHT";

/// Sidecar metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeManifest {
    pub gsd_m: f64,
    pub acquisition_date: Option<String>,
    pub band_ids: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path, source: std::io::Error) -> RasterError {
    RasterError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn header(kind: u8, channels: usize, height: usize, width: usize) -> Result<Vec<u8>, RasterError> {
    let overflow = || RasterError::DimensionOverflow {
        channels,
        height,
        width,
    };
    let c = u32::try_from(channels).map_err(|_| overflow())?;
    let h = u32::try_from(height).map_err(|_| overflow())?;
    let w = u32::try_from(width).map_err(|_| overflow())?;
    channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(6))
        .ok_or_else(overflow)?;
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind);
    out.push(DTYPE_F32);
    out.extend_from_slice(&c.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    Ok(out)
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Binary payload of a cube (without sidecar).
pub fn encode_cube(cube: &RasterCube) -> Result<Vec<u8>, RasterError> {
    let mut out = header(KIND_CUBE, cube.n_bands(), cube.height(), cube.width())?;
    push_f32s(&mut out, cube.bands());
    push_f32s(&mut out, cube.cloud_prob());
    out.extend(cube.landcover().iter().map(|l| l.code()));
    out.extend(cube.valid().iter().map(|&v| u8::from(v)));
    Ok(out)
}

pub fn encode_height_map(map: &HeightMap) -> Result<Vec<u8>, RasterError> {
    let mut out = header(KIND_HEIGHTS, 1, map.height(), map.width())?;
    push_f32s(&mut out, map.heights());
    out.extend(map.valid().iter().map(|&v| u8::from(v)));
    Ok(out)
}

fn write_with_sidecar(path: &Path, bytes: &[u8], manifest: &CubeManifest) -> Result<(), RasterError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&side, json).map_err(|e| io_err(&side, e))
}

pub fn write_cube(cube: &RasterCube, path: &Path) -> Result<(), RasterError> {
    let bytes = encode_cube(cube)?;
    let manifest = CubeManifest {
        gsd_m: cube.gsd_m(),
        acquisition_date: Some(cube.acquisition_date().format("%Y-%m-%d").to_string()),
        band_ids: cube.band_ids().iter().map(|b| b.label().to_string()).collect(),
    };
    write_with_sidecar(path, &bytes, &manifest)
}

/// Heights are written as a one-channel variant of the cube format.
pub fn write_height_map(map: &HeightMap, path: &Path) -> Result<(), RasterError> {
    let bytes = encode_height_map(map)?;
    let manifest = CubeManifest {
        gsd_m: GSD_10M,
        acquisition_date: None,
        band_ids: vec![HEIGHT_BAND_LABEL.to_string()],
    };
    write_with_sidecar(path, &bytes, &manifest)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    expected_len: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], RasterError> {
        if self.pos + n > self.buf.len() {
            return Err(RasterError::Truncated {
                section,
                offset: self.pos,
                expected: self.expected_len.max(self.pos + n),
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, n: usize, section: &'static str) -> Result<Vec<f32>, RasterError> {
        let raw = self.take(n * 4, section)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn flags(&mut self, n: usize) -> Result<Vec<bool>, RasterError> {
        let start = self.pos;
        let raw = self.take(n, "valid plane")?;
        raw.iter()
            .enumerate()
            .map(|(i, &b)| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(RasterError::Parse {
                    offset: start + i,
                    message: format!("valid flag {other} is not 0 or 1"),
                }),
            })
            .collect()
    }
}

struct Header {
    kind: u8,
    channels: usize,
    height: usize,
    width: usize,
}

fn parse_header(buf: &[u8]) -> Result<Header, RasterError> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(RasterError::BadMagic {
            found: buf[..buf.len().min(4)].to_vec(),
        });
    }
    if buf.len() < HEADER_LEN {
        return Err(RasterError::Truncated {
            section: "header",
            offset: buf.len(),
            expected: HEADER_LEN,
            actual: buf.len(),
        });
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != FORMAT_VERSION {
        return Err(RasterError::Parse {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let kind = buf[6];
    if kind != KIND_CUBE && kind != KIND_HEIGHTS {
        return Err(RasterError::Parse {
            offset: 6,
            message: format!("unknown raster kind {kind}"),
        });
    }
    if buf[7] != DTYPE_F32 {
        return Err(RasterError::Parse {
            offset: 7,
            message: format!("unsupported dtype tag {}", buf[7]),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]) as usize;
    let (channels, height, width) = (u32_at(8), u32_at(12), u32_at(16));
    if channels == 0 || channels > 13 {
        return Err(RasterError::Parse {
            offset: 8,
            message: format!("channel count {channels} outside 1..=13"),
        });
    }
    if kind == KIND_HEIGHTS && channels != 1 {
        return Err(RasterError::Parse {
            offset: 8,
            message: format!("height raster must have 1 channel, found {channels}"),
        });
    }
    Ok(Header {
        kind,
        channels,
        height,
        width,
    })
}

fn expected_len(h: &Header) -> Result<usize, RasterError> {
    let plane = h.height.checked_mul(h.width);
    let per_plane_bytes = if h.kind == KIND_CUBE {
        // bands + cloud (f32) + landcover + valid (u8)
        h.channels * 4 + 4 + 2
    } else {
        4 + 1
    };
    plane
        .and_then(|p| p.checked_mul(per_plane_bytes))
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or(RasterError::DimensionOverflow {
            channels: h.channels,
            height: h.height,
            width: h.width,
        })
}

fn read_manifest(path: &Path) -> Result<CubeManifest, RasterError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| io_err(&side, e))?;
    serde_json::from_str(&text).map_err(|e| RasterError::Manifest {
        path: side.display().to_string(),
        message: e.to_string(),
    })
}

fn manifest_err(path: &Path, message: String) -> RasterError {
    RasterError::Manifest {
        path: sidecar_path(path).display().to_string(),
        message,
    }
}

/// Parses a cube from its binary payload and sidecar metadata.
pub fn decode_cube(buf: &[u8], manifest: &CubeManifest, path: &Path) -> Result<RasterCube, RasterError> {
    let h = parse_header(buf)?;
    if h.kind != KIND_CUBE {
        return Err(RasterError::Parse {
            offset: 6,
            message: "file holds a height map, not a reflectance cube".into(),
        });
    }
    let mut r = Reader {
        buf,
        pos: HEADER_LEN,
        expected_len: expected_len(&h)?,
    };
    let plane = h.height * h.width;
    let bands = r.f32s(h.channels * plane, "band payload")?;
    let cloud = r.f32s(plane, "cloud plane")?;
    let lc_start = r.pos;
    let landcover = r
        .take(plane, "landcover plane")?
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            LandCover::from_code(code).ok_or(RasterError::Parse {
                offset: lc_start + i,
                message: format!("unknown landcover code {code}"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let valid = r.flags(plane)?;
    if r.pos != buf.len() {
        return Err(RasterError::Parse {
            offset: r.pos,
            message: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }

    let band_ids = manifest
        .band_ids
        .iter()
        .map(|s| s.parse::<Band>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|m| manifest_err(path, m))?;
    if band_ids.len() != h.channels {
        return Err(manifest_err(
            path,
            format!("{} band ids for {} channels", band_ids.len(), h.channels),
        ));
    }
    let date = manifest
        .acquisition_date
        .as_deref()
        .ok_or_else(|| manifest_err(path, "missing acquisition_date".into()))?;
    let date = NaiveDate::parse_from_str(date, "%Y-%m-%d")
        .map_err(|e| manifest_err(path, format!("acquisition_date {date:?}: {e}")))?;
    RasterCube::new(
        h.height,
        h.width,
        band_ids,
        bands,
        cloud,
        landcover,
        valid,
        manifest.gsd_m,
        date,
    )
}

pub fn read_cube(path: &Path) -> Result<RasterCube, RasterError> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    // Check the binary first so a corrupt file reports its own offset.
    parse_header(&buf)?;
    let manifest = read_manifest(path)?;
    decode_cube(&buf, &manifest, path)
}

pub fn read_height_map(path: &Path) -> Result<HeightMap, RasterError> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let h = parse_header(&buf)?;
    if h.kind != KIND_HEIGHTS {
        return Err(RasterError::Parse {
            offset: 6,
            message: "file holds a reflectance cube, not a height map".into(),
        });
    }
    let mut r = Reader {
        buf: &buf,
        pos: HEADER_LEN,
        expected_len: expected_len(&h)?,
    };
    let plane = h.height * h.width;
    let heights = r.f32s(plane, "height payload")?;
    let valid = r.flags(plane)?;
    if r.pos != buf.len() {
        return Err(RasterError::Parse {
            offset: r.pos,
            message: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    HeightMap::new(h.height, h.width, heights, valid)
}
