//! Georeferenced raster container, file I/O and world/pixel conversion.
//!
//! File format: `<name>.rast` holds the samples as little-endian 32-bit
//! floats, row-major, top (northern) row first. A `<name>.rast.meta` text
//! sidecar carries `key = value` lines for width, height, origin_x, origin_y,
//! pixel_w, pixel_h and nodata. Rasters are north-up only; internal
//! computation uses f64, storage is f32.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Affine mapping between pixel indices and world coordinates (north-up,
/// no rotation terms). `origin_x`/`origin_y` are the outer corner of pixel
/// (0,0); `pixel_h` is applied southward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_w: f64,
    pub pixel_h: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_w: f64, pixel_h: f64) -> Result<Self> {
        if !(pixel_w > 0.0 && pixel_h > 0.0) {
            return Err(Error::InvalidGeoTransform(format!(
                "pixel size must be positive, got {pixel_w} x {pixel_h}"
            )));
        }
        if ![origin_x, origin_y, pixel_w, pixel_h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeoTransform("non-finite field".into()));
        }
        Ok(Self {
            origin_x,
            origin_y,
            pixel_w,
            pixel_h,
        })
    }

    /// Pixel indices containing the world point, or `None` when the point
    /// lies north or west of the origin. Upper bounds are checked by
    /// [`Raster::world_to_pixel`], which knows the extent.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> Option<(i64, i64)> {
        let col = ((x - self.origin_x) / self.pixel_w).floor();
        let row = ((self.origin_y - y) / self.pixel_h).floor();
        if col < 0.0 || row < 0.0 || !col.is_finite() || !row.is_finite() {
            return None;
        }
        Some((row as i64, col as i64))
    }

    /// World coordinates of the pixel center.
    pub fn pixel_to_world(&self, row: usize, col: usize) -> (f64, f64) {
        let x = self.origin_x + (col as f64 + 0.5) * self.pixel_w;
        let y = self.origin_y - (row as f64 + 0.5) * self.pixel_h;
        (x, y)
    }
}

/// Dense 2-D grid of f64 samples with a nodata sentinel (exact equality).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub geo: GeoTransform,
    pub nodata: f64,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, geo: GeoTransform, nodata: f64, data: Vec<f64>) -> Result<Self> {
        let r = Self {
            width,
            height,
            geo,
            nodata,
            data,
        };
        r.validate()?;
        Ok(r)
    }

    /// Raster filled with a constant value.
    pub fn filled(width: usize, height: usize, geo: GeoTransform, nodata: f64, value: f64) -> Result<Self> {
        Self::new(width, height, geo, nodata, vec![value; width * height])
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.width * self.height {
            return Err(Error::DimensionMismatch {
                expected: self.width * self.height,
                actual: self.data.len(),
            });
        }
        if !self.nodata.is_finite() {
            return Err(Error::InvalidRaster(format!("non-finite nodata {}", self.nodata)));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRaster(format!(
                "non-finite sample at index {i} (row {}, col {})",
                i / self.width,
                i % self.width
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn is_nodata(&self, row: usize, col: usize) -> bool {
        self.get(row, col) == self.nodata
    }

    /// Bounds-checked pixel lookup for a world point.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (row, col) = self.geo.world_to_pixel(x, y)?;
        if (row as usize) < self.height && (col as usize) < self.width {
            Some((row as usize, col as usize))
        } else {
            None
        }
    }

    /// True when both rasters share dimensions and geotransform.
    pub fn same_grid(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.geo == other.geo
    }
}

/// Landslide-head coordinates in world units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<(f64, f64)>,
}

impl PointSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if let Some((x, y)) = points.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::InvalidRaster(format!("non-finite point ({x}, {y})")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Write payload + sidecar. Bytes are identical across writes of the same
/// raster.
pub fn save_raster(raster: &Raster, path: &Path) -> Result<()> {
    raster.validate()?;
    let mut payload = Vec::with_capacity(raster.data.len() * 4);
    for &v in &raster.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &payload)?;
    let meta = format!(
        "width = {}\nheight = {}\norigin_x = {}\norigin_y = {}\npixel_w = {}\npixel_h = {}\nnodata = {}\n",
        raster.width,
        raster.height,
        raster.geo.origin_x,
        raster.geo.origin_y,
        raster.geo.pixel_w,
        raster.geo.pixel_h,
        raster.nodata
    );
    write_atomic(&meta_path(path), meta.as_bytes())?;
    Ok(())
}

pub fn load_raster(path: &Path) -> Result<Raster> {
    let mpath = meta_path(path);
    if !mpath.exists() {
        return Err(Error::MissingSidecar(mpath));
    }
    let meta = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let kv = parse_kv(&meta);
    let get = |key: &str| -> Result<f64> {
        kv.get(key)
            .ok_or_else(|| Error::Sidecar {
                path: mpath.clone(),
                msg: format!("missing key `{key}`"),
            })?
            .parse::<f64>()
            .map_err(|e| Error::Sidecar {
                path: mpath.clone(),
                msg: format!("key `{key}`: {e}"),
            })
    };
    let width = get("width")? as usize;
    let height = get("height")? as usize;
    let geo = GeoTransform::new(get("origin_x")?, get("origin_y")?, get("pixel_w")?, get("pixel_h")?)?;
    let nodata = get("nodata")?;
    if !nodata.is_finite() {
        return Err(Error::Sidecar {
            path: mpath,
            msg: format!("non-finite nodata {nodata}"),
        });
    }

    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    if payload.len() != width * height * 4 {
        return Err(Error::DimensionMismatch {
            expected: width * height,
            actual: payload.len() / 4,
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Raster::new(width, height, geo, nodata, data)
}

/// One `x y` pair per line; `#` starts a comment.
pub fn save_points(points: &PointSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (x, y) in &points.points {
        out.push_str(&format!("{x} {y}\n"));
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_points(path: &Path) -> Result<PointSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<f64> {
            tok.ok_or_else(|| Error::Sidecar {
                path: path.to_path_buf(),
                msg: format!("line {}: expected `x y`", lineno + 1),
            })?
            .parse::<f64>()
            .map_err(|e| Error::Sidecar {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", lineno + 1),
            })
        };
        let x = parse(it.next())?;
        let y = parse(it.next())?;
        points.push((x, y));
    }
    PointSet::new(points)
}

pub(crate) fn parse_kv(text: &str) -> HashMap<String, String> {
    let mut kv = HashMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    kv
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
