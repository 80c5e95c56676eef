//! Tiling into fixed-size windows, landslide-head rasterization, 17-channel
//! chip assembly, density classes and channel normalization.
//!
//! Chip channel order is fixed: elev, slope, curv, aspect, then VV/VH per
//! acquisition in chronological order (pre-event first), then the label
//! plane. With 3 pre + 3 post acquisitions that is 17 channels.
//!
//! Chip store format: `<chip_id>.chip` holds the C×S×S payload as
//! little-endian f32 plus a `<chip_id>.chip.meta` text sidecar.

use std::fs;
use std::path::Path;

use crate::convnet::{sar_channels, DEM_CHANNELS, PRE_EVENT_ACQUISITIONS};
use crate::error::{Error, Result};
use crate::raster::{parse_kv, write_atomic, GeoTransform, PointSet, Raster};
use crate::tensor::Tensor;
use crate::terrain::TerrainStack;

pub const DEFAULT_CHIP_SIZE: usize = 128;
/// dB floor applied before `10·log10` on SAR amplitudes.
pub const SAR_DB_EPS: f64 = 1e-6;

/// Density thresholds in heads/km²: class 1 is (0, 25], class 2 above.
pub const DENSITY_SPLIT: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChipWindow {
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
}

impl ChipWindow {
    pub fn chip_id(&self) -> String {
        format!("r{}_c{}", self.row0, self.col0)
    }
}

/// Three-way chip label: no landslides, 1–25 heads/km², >25 heads/km².
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DensityClass {
    Zero,
    Low,
    High,
}

impl DensityClass {
    pub const ALL: [DensityClass; 3] = [DensityClass::Zero, DensityClass::Low, DensityClass::High];

    pub fn index(self) -> usize {
        match self {
            DensityClass::Zero => 0,
            DensityClass::Low => 1,
            DensityClass::High => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(DensityClass::Zero),
            1 => Ok(DensityClass::Low),
            2 => Ok(DensityClass::High),
            other => Err(Error::InvalidConfig(format!("density class {other} out of range"))),
        }
    }
}

/// Density class from the raw head count and chip area in km².
pub fn density_class(head_count: usize, chip_area_km2: f64) -> DensityClass {
    if head_count == 0 {
        DensityClass::Zero
    } else if head_count as f64 / chip_area_km2 <= DENSITY_SPLIT {
        DensityClass::Low
    } else {
        DensityClass::High
    }
}

/// One multi-channel sample. `head_count` counts label pixels (multiple heads
/// in a pixel collapse to one); `raw_points` counts the heads themselves and
/// drives the density class.
#[derive(Debug, Clone, PartialEq)]
pub struct Chip {
    pub window: ChipWindow,
    pub channels: Tensor,
    pub channel_names: Vec<String>,
    pub head_count: usize,
    pub raw_points: usize,
    pub class: DensityClass,
}

impl Chip {
    pub fn chip_id(&self) -> String {
        self.window.chip_id()
    }

    /// Index of the label channel (always last).
    pub fn label_channel(&self) -> usize {
        self.channels.c - 1
    }

    /// The label plane as a 1×1×S×S tensor.
    pub fn label_plane(&self) -> Tensor {
        self.channels.select_channels(&[self.label_channel()])
    }

    /// All channels except the label, as the network input.
    pub fn input_channels(&self) -> Tensor {
        self.channels.select_channels(&(0..self.label_channel()).collect::<Vec<_>>())
    }
}

/// Channel names for a chip built with `revisits_post` post-event revisits.
pub fn channel_names(revisits_post: usize) -> Vec<String> {
    let mut names: Vec<String> = ["elev", "slope", "curv", "aspect"].iter().map(|s| s.to_string()).collect();
    for t in 0..PRE_EVENT_ACQUISITIONS + revisits_post {
        names.push(format!("VV_t{}", t + 1));
        names.push(format!("VH_t{}", t + 1));
    }
    names.push("label".into());
    names
}

fn is_sar_channel(name: &str) -> bool {
    name.starts_with("VV_") || name.starts_with("VH_")
}

/// Row-major grid of non-overlapping windows; partial edge windows dropped.
pub fn tile_extent(width: usize, height: usize, size: usize) -> Vec<ChipWindow> {
    assert!(size >= 1, "chip size must be at least 1");
    let mut windows = Vec::with_capacity((height / size) * (width / size));
    for br in 0..height / size {
        for bc in 0..width / size {
            windows.push(ChipWindow {
                row0: br * size,
                col0: bc * size,
                size,
            });
        }
    }
    windows
}

/// Binary label plane for one window: 1 where at least one head falls in the
/// pixel footprint. Returns the plane and the raw count of heads inside the
/// window.
pub fn rasterize_heads(points: &PointSet, window: &ChipWindow, geo: &GeoTransform) -> (Vec<f64>, usize) {
    let s = window.size;
    let mut plane = vec![0.0; s * s];
    let mut raw = 0usize;
    for &(x, y) in &points.points {
        if let Some((row, col)) = geo.world_to_pixel(x, y) {
            let (row, col) = (row as usize, col as usize);
            if row >= window.row0 && row < window.row0 + s && col >= window.col0 && col < window.col0 + s {
                plane[(row - window.row0) * s + (col - window.col0)] = 1.0;
                raw += 1;
            }
        }
    }
    (plane, raw)
}

/// Chip area in km² for a window on the given grid.
pub fn chip_area_km2(window: &ChipWindow, geo: &GeoTransform) -> f64 {
    let side_m = window.size as f64 * geo.pixel_w;
    side_m * side_m / 1e6
}

/// Assemble one chip. Returns `Ok(None)` when any selected channel contains
/// nodata inside the window (the chip is excluded). `sar` must hold the six
/// (VV, VH) acquisitions in chronological order.
pub fn assemble_chip(
    terrain: &TerrainStack,
    sar: &[(Raster, Raster)],
    heads: &PointSet,
    window: &ChipWindow,
    revisits_post: usize,
) -> Result<Option<Chip>> {
    if sar.len() != 6 {
        return Err(Error::GridMismatch(format!("expected 6 SAR acquisitions (3 pre + 3 post), got {}", sar.len())));
    }
    if !(1..=3).contains(&revisits_post) {
        return Err(Error::InvalidConfig(format!("revisits_post must be 1..=3, got {revisits_post}")));
    }
    let base = &terrain.elevation;
    for (name, r) in [
        ("slope", &terrain.slope),
        ("curvature", &terrain.curvature),
        ("aspect", &terrain.aspect),
    ] {
        if !base.same_grid(r) {
            return Err(Error::GridMismatch(format!("terrain channel {name} grid differs from elevation")));
        }
    }
    for (i, (vv, vh)) in sar.iter().enumerate() {
        if !base.same_grid(vv) || !base.same_grid(vh) {
            return Err(Error::GridMismatch(format!("SAR acquisition {} grid differs from DEM", i + 1)));
        }
    }
    let s = window.size;
    if window.row0 + s > base.height || window.col0 + s > base.width {
        return Err(Error::GridMismatch(format!(
            "window {} does not fit a {}x{} raster",
            window.chip_id(),
            base.width,
            base.height
        )));
    }

    let n_acq = PRE_EVENT_ACQUISITIONS + revisits_post;
    let mut selected: Vec<&Raster> = vec![&terrain.elevation, &terrain.slope, &terrain.curvature, &terrain.aspect];
    for (vv, vh) in sar.iter().take(n_acq) {
        selected.push(vv);
        selected.push(vh);
    }

    let c = DEM_CHANNELS + sar_channels(revisits_post) + 1;
    let mut data = Vec::with_capacity(c * s * s);
    for r in &selected {
        for row in window.row0..window.row0 + s {
            for col in window.col0..window.col0 + s {
                let v = r.get(row, col);
                if v == r.nodata {
                    return Ok(None);
                }
                data.push(v);
            }
        }
    }
    let (label, raw_points) = rasterize_heads(heads, window, &base.geo);
    let head_count = label.iter().filter(|&&v| v == 1.0).count();
    data.extend_from_slice(&label);

    let class = density_class(raw_points, chip_area_km2(window, &base.geo));
    Ok(Some(Chip {
        window: *window,
        channels: Tensor::from_data(1, c, s, s, data)?,
        channel_names: channel_names(revisits_post),
        head_count,
        raw_points,
        class,
    }))
}

/// Per-channel mean/std fitted on a training split. SAR channels are
/// converted to dB before the statistics; the label channel is skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[inline]
pub fn amplitude_to_db(x: f64) -> f64 {
    10.0 * x.max(SAR_DB_EPS).log10()
}

pub fn fit_channel_stats(chips: &[&Chip]) -> Result<ChannelStats> {
    let first = chips
        .first()
        .ok_or_else(|| Error::Training("cannot fit channel stats on an empty split".into()))?;
    let n_ch = first.channels.c - 1;
    let names: Vec<String> = first.channel_names[..n_ch].to_vec();
    let plane = first.channels.h * first.channels.w;

    let mut mean = Vec::with_capacity(n_ch);
    let mut std = Vec::with_capacity(n_ch);
    for ch in 0..n_ch {
        let sar = is_sar_channel(&names[ch]);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let count = (chips.len() * plane) as f64;
        for chip in chips {
            if chip.channels.c - 1 != n_ch || chip.channel_names[..n_ch] != names[..] {
                return Err(Error::ShapeMismatch("chips in split have differing channel layouts".into()));
            }
            let base = ch * plane;
            for &v in &chip.channels.data[base..base + plane] {
                let v = if sar { amplitude_to_db(v) } else { v };
                sum += v;
                sum2 += v * v;
            }
        }
        let m = sum / count;
        let var = (sum2 / count - m * m).max(0.0);
        let s = var.sqrt();
        if s <= 0.0 {
            return Err(Error::ZeroVariance { name: names[ch].clone() });
        }
        mean.push(m);
        std.push(s);
    }
    Ok(ChannelStats { names, mean, std })
}

/// Z-score the non-label channels (SAR in dB first); the label plane is
/// untouched.
pub fn normalize_chip(chip: &Chip, stats: &ChannelStats) -> Result<Chip> {
    let n_ch = chip.channels.c - 1;
    if stats.names.len() < n_ch || stats.names[..n_ch] != chip.channel_names[..n_ch] {
        return Err(Error::ShapeMismatch("channel stats do not cover this chip's channels".into()));
    }
    let plane = chip.channels.h * chip.channels.w;
    let mut out = chip.clone();
    for ch in 0..n_ch {
        let sar = is_sar_channel(&stats.names[ch]);
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        for v in &mut out.channels.data[ch * plane..(ch + 1) * plane] {
            let x = if sar { amplitude_to_db(*v) } else { *v };
            *v = (x - m) / s;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// chip store I/O

pub fn stats_to_string(stats: &ChannelStats) -> String {
    let mut out = String::new();
    for i in 0..stats.names.len() {
        out.push_str(&format!("{} {} {}\n", stats.names[i], stats.mean[i], stats.std[i]));
    }
    out
}

pub fn stats_from_string(text: &str) -> Result<ChannelStats> {
    let mut stats = ChannelStats {
        names: Vec::new(),
        mean: Vec::new(),
        std: Vec::new(),
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::InvalidConfig(format!("bad stats line `{line}`")));
        }
        stats.names.push(parts[0].to_string());
        stats.mean.push(parts[1].parse().map_err(|e| Error::InvalidConfig(format!("{e}")))?);
        stats.std.push(parts[2].parse().map_err(|e| Error::InvalidConfig(format!("{e}")))?);
    }
    Ok(stats)
}

pub fn save_stats(stats: &ChannelStats, path: &Path) -> Result<()> {
    write_atomic(path, stats_to_string(stats).as_bytes())
}

pub fn load_stats(path: &Path) -> Result<ChannelStats> {
    stats_from_string(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_chip(chip: &Chip, dir: &Path) -> Result<()> {
    let path = dir.join(format!("{}.chip", chip.chip_id()));
    let mut payload = Vec::with_capacity(chip.channels.data.len() * 4);
    for &v in &chip.channels.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(&path, &payload)?;
    let meta = format!(
        "chip_id = {}\nrow0 = {}\ncol0 = {}\nsize = {}\nchannels = {}\nchannel_names = {}\nhead_count = {}\nraw_points = {}\nclass = {}\n",
        chip.chip_id(),
        chip.window.row0,
        chip.window.col0,
        chip.window.size,
        chip.channels.c,
        chip.channel_names.join(","),
        chip.head_count,
        chip.raw_points,
        chip.class.index()
    );
    let mut mpath = path.into_os_string();
    mpath.push(".meta");
    write_atomic(Path::new(&mpath), meta.as_bytes())
}

pub fn load_chip(dir: &Path, chip_id: &str) -> Result<Chip> {
    let path = dir.join(format!("{chip_id}.chip"));
    let mpath = dir.join(format!("{chip_id}.chip.meta"));
    if !mpath.exists() {
        return Err(Error::MissingSidecar(mpath));
    }
    let meta = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let kv = parse_kv(&meta);
    let get = |key: &str| -> Result<String> {
        kv.get(key).cloned().ok_or_else(|| Error::Sidecar {
            path: mpath.clone(),
            msg: format!("missing key `{key}`"),
        })
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|e| Error::Sidecar {
            path: mpath.clone(),
            msg: format!("key `{key}`: {e}"),
        })
    };
    let window = ChipWindow {
        row0: num("row0")?,
        col0: num("col0")?,
        size: num("size")?,
    };
    let c = num("channels")?;
    let s = window.size;
    let payload = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if payload.len() != c * s * s * 4 {
        return Err(Error::DimensionMismatch {
            expected: c * s * s,
            actual: payload.len() / 4,
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Chip {
        window,
        channels: Tensor::from_data(1, c, s, s, data)?,
        channel_names: get("channel_names")?.split(',').map(String::from).collect(),
        head_count: num("head_count")?,
        raw_points: num("raw_points")?,
        class: DensityClass::from_index(num("class")?)?,
    })
}
