//! DEM derivatives: Horn (1981) slope and aspect, Zevenbergen–Thorne (1987)
//! general curvature. Border pixels and pixels whose 3×3 neighborhood touches
//! nodata are nodata in every derivative. Slope is degrees in [0,90], aspect
//! is degrees clockwise from north in [0,360) with −1 for flat, curvature is
//! 1/(100·m).

use crate::error::{Error, Result};
use crate::exec;
use crate::raster::Raster;

pub const ASPECT_FLAT: f64 = -1.0;
const FLAT_EPS: f64 = 1e-12;

/// The four DEM channels in the order they enter a chip.
#[derive(Debug, Clone)]
pub struct TerrainStack {
    pub elevation: Raster,
    pub slope: Raster,
    pub curvature: Raster,
    pub aspect: Raster,
}

/// 3×3 window [a b c; d e f; g h i], a = NW, rows southward. `None` when the
/// window leaves the raster or touches nodata.
fn window(dem: &Raster, row: usize, col: usize) -> Option<[f64; 9]> {
    if row == 0 || col == 0 || row + 1 >= dem.height || col + 1 >= dem.width {
        return None;
    }
    let mut w = [0.0; 9];
    for dr in 0..3 {
        for dc in 0..3 {
            let v = dem.get(row + dr - 1, col + dc - 1);
            if v == dem.nodata {
                return None;
            }
            w[dr * 3 + dc] = v;
        }
    }
    Some(w)
}

fn horn_gradient(w: &[f64; 9], pixel_w: f64, pixel_h: f64) -> (f64, f64) {
    let [a, b, c, d, _e, f, g, h, i] = *w;
    let dzdx = ((c + 2.0 * f + i) - (a + 2.0 * d + g)) / (8.0 * pixel_w);
    let dzdy = ((g + 2.0 * h + i) - (a + 2.0 * b + c)) / (8.0 * pixel_h);
    (dzdx, dzdy)
}

fn check_dem(dem: &Raster) -> Result<()> {
    if dem.geo.pixel_w != dem.geo.pixel_h {
        return Err(Error::Terrain(format!(
            "square pixels required, got {} x {}",
            dem.geo.pixel_w, dem.geo.pixel_h
        )));
    }
    if dem.width < 3 || dem.height < 3 {
        return Err(Error::Terrain(format!(
            "dem must be at least 3x3, got {}x{}",
            dem.width, dem.height
        )));
    }
    Ok(())
}

/// Apply a per-window derivative over all pixels, rows in parallel.
fn derive(dem: &Raster, f: impl Fn(&[f64; 9], f64, f64) -> f64 + Sync) -> Result<Raster> {
    check_dem(dem)?;
    let (pw, ph) = (dem.geo.pixel_w, dem.geo.pixel_h);
    let rows = exec::map_indexed(dem.height, |row| {
        (0..dem.width)
            .map(|col| match window(dem, row, col) {
                Some(w) => f(&w, pw, ph),
                None => dem.nodata,
            })
            .collect::<Vec<f64>>()
    });
    Raster::new(dem.width, dem.height, dem.geo, dem.nodata, rows.concat())
}

/// Horn slope in degrees.
pub fn slope_horn(dem: &Raster) -> Result<Raster> {
    derive(dem, |w, pw, ph| {
        let (dzdx, dzdy) = horn_gradient(w, pw, ph);
        (dzdx * dzdx + dzdy * dzdy).sqrt().atan().to_degrees()
    })
}

/// Horn aspect: downslope direction, degrees clockwise from north; −1 where
/// flat.
pub fn aspect_horn(dem: &Raster) -> Result<Raster> {
    derive(dem, |w, pw, ph| {
        let (dzdx, dzdy) = horn_gradient(w, pw, ph);
        if dzdx.abs() <= FLAT_EPS && dzdy.abs() <= FLAT_EPS {
            return ASPECT_FLAT;
        }
        // gradient east = dzdx, gradient north = -dzdy; downslope is the
        // negated gradient, angle measured clockwise from north
        let deg = f64::atan2(-dzdx, dzdy).to_degrees();
        let deg = if deg < 0.0 { deg + 360.0 } else { deg };
        if deg >= 360.0 {
            0.0
        } else {
            deg
        }
    })
}

/// Zevenbergen–Thorne general curvature, −2(D+E)·100.
pub fn curvature_zt(dem: &Raster) -> Result<Raster> {
    derive(dem, |w, pw, _ph| {
        let [_a, b, _c, d, e, f, _g, h, _i] = *w;
        let l2 = pw * pw;
        let dd = ((d + f) / 2.0 - e) / l2;
        let ee = ((b + h) / 2.0 - e) / l2;
        -2.0 * (dd + ee) * 100.0
    })
}

/// All four DEM channels; elevation is the input unmodified.
pub fn build_terrain_stack(dem: &Raster) -> Result<TerrainStack> {
    Ok(TerrainStack {
        elevation: dem.clone(),
        slope: slope_horn(dem)?,
        curvature: curvature_zt(dem)?,
        aspect: aspect_horn(dem)?,
    })
}
