//! Density-map rendering: a one-pixel-per-chip PNG with a fixed class
//! palette, and a GeoJSON polygon grid carrying per-chip class probabilities.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use serde_json::{json, Value};

use slidemap_core::pipeline::ChipEntry;
use slidemap_core::raster::GeoTransform;
use slidemap_core::training::ChipPrediction;
use slidemap_core::Error;

/// class 0 → light gray, 1 → orange, 2 → red; excluded chips transparent.
const PALETTE: [Rgba<u8>; 3] = [
    Rgba([200, 200, 200, 255]),
    Rgba([255, 165, 0, 255]),
    Rgba([220, 40, 40, 255]),
];
const TRANSPARENT: Rgba<u8> = Rgba([0, 0, 0, 0]);

/// World coordinates of the four corners of a chip window, closed ring,
/// counter-clockwise from the south-west corner.
fn window_ring(entry: &ChipEntry, geo: &GeoTransform) -> Vec<[f64; 2]> {
    let x0 = geo.origin_x + entry.col0 as f64 * geo.pixel_w;
    let x1 = geo.origin_x + (entry.col0 + entry.size) as f64 * geo.pixel_w;
    let y0 = geo.origin_y - (entry.row0 + entry.size) as f64 * geo.pixel_h;
    let y1 = geo.origin_y - entry.row0 as f64 * geo.pixel_h;
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]
}

pub fn render_map(
    out_dir: &Path,
    entries: &[ChipEntry],
    predictions: &[ChipPrediction],
    geo: &GeoTransform,
) -> Result<(PathBuf, PathBuf), Error> {
    let by_id: HashMap<&str, &ChipPrediction> = predictions.iter().map(|p| (p.chip_id.as_str(), p)).collect();
    let size = entries
        .first()
        .map(|e| e.size)
        .ok_or_else(|| Error::Eval("empty chip manifest".into()))?;
    let n_rows = entries.iter().map(|e| e.row0 / size).max().unwrap_or(0) + 1;
    let n_cols = entries.iter().map(|e| e.col0 / size).max().unwrap_or(0) + 1;

    let mut img = RgbaImage::from_pixel(n_cols as u32, n_rows as u32, TRANSPARENT);
    let mut features = Vec::with_capacity(entries.len());
    for entry in entries {
        if entry.class.is_none() {
            continue; // excluded chip stays transparent, no polygon
        }
        let pred = by_id.get(entry.chip_id.as_str()).ok_or_else(|| {
            Error::Eval(format!("chip {} has no out-of-split prediction", entry.chip_id))
        })?;
        img.put_pixel(
            (entry.col0 / size) as u32,
            (entry.row0 / size) as u32,
            PALETTE[pred.predicted.index()],
        );
        features.push(json!({
            "type": "Feature",
            "geometry": { "type": "Polygon", "coordinates": [window_ring(entry, geo)] },
            "properties": {
                "chip_id": entry.chip_id,
                "class": pred.predicted.index(),
                "p0": pred.proba[0],
                "p1": pred.proba[1],
                "p2": pred.proba[2],
            },
        }));
    }

    let dir = out_dir.join("render");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let png_path = dir.join("density_map.png");
    img.save(&png_path)
        .map_err(|e| Error::Eval(format!("writing {}: {e}", png_path.display())))?;

    let collection: Value = json!({ "type": "FeatureCollection", "features": features });
    let geojson_path = dir.join("density_map.geojson");
    let text = serde_json::to_string_pretty(&collection)
        .map_err(|e| Error::Eval(format!("encoding geojson: {e}")))?;
    std::fs::write(&geojson_path, text).map_err(|e| Error::io(&geojson_path, e))?;
    Ok((png_path, geojson_path))
}
