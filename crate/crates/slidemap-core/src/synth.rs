//! Deterministic synthetic scenes: a hilly DEM, slope-correlated landslide
//! heads, and six (VV, VH) SAR acquisitions (3 pre-event, 3 post-event) with
//! multiplicative gamma speckle. Post-event acquisitions brighten around each
//! head, ramping over the revisits (1/3, 2/3, full), so the revisit trend has
//! a synthetic analogue.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::raster::{GeoTransform, PointSet, Raster, DEFAULT_NODATA};
use crate::terrain::slope_horn;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub pixel_m: f64,
    pub n_hills: usize,
    /// Expected heads per km² on flat terrain.
    pub base_head_rate: f64,
    /// Head-probability multiplier per degree of slope.
    pub slope_gain: f64,
    pub sar_speckle_looks: u32,
    pub event_brightening_db: f64,
    pub event_radius_px: usize,
    /// Uniform value noise added on top of the hills, in meters.
    pub noise_amp: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 512,
            height: 512,
            pixel_m: 10.0,
            n_hills: 12,
            base_head_rate: 2.0,
            slope_gain: 0.3,
            sar_speckle_looks: 4,
            event_brightening_db: 3.0,
            event_radius_px: 2,
            noise_amp: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 3 || self.height < 3 {
            return Err(Error::InvalidConfig(format!("scene must be at least 3x3, got {}x{}", self.width, self.height)));
        }
        for (name, v) in [
            ("base_head_rate", self.base_head_rate),
            ("slope_gain", self.slope_gain),
            ("pixel_m", self.pixel_m),
            ("noise_amp", self.noise_amp),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.pixel_m <= 0.0 {
            return Err(Error::InvalidConfig("pixel_m must be positive".into()));
        }
        if self.sar_speckle_looks == 0 {
            return Err(Error::InvalidConfig("sar_speckle_looks must be at least 1".into()));
        }
        Ok(())
    }

    fn geo(&self) -> GeoTransform {
        GeoTransform::new(0.0, self.height as f64 * self.pixel_m, self.pixel_m, self.pixel_m)
            .expect("validated pixel size")
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const HILL_AMP_MIN: f64 = 40.0;
const HILL_AMP_MAX: f64 = 220.0;

/// Sum of randomized Gaussian bumps plus uniform value noise.
pub fn gen_dem(config: &SceneConfig) -> Result<Raster> {
    config.validate()?;
    let mut rng = config.rng(0);
    let (w, h) = (config.width, config.height);
    struct Hill {
        cx: f64,
        cy: f64,
        sigma: f64,
        amp: f64,
    }
    let hills: Vec<Hill> = (0..config.n_hills)
        .map(|_| Hill {
            cx: rng.gen_range(0.0..w as f64),
            cy: rng.gen_range(0.0..h as f64),
            sigma: rng.gen_range(0.04..0.20) * w.min(h) as f64,
            amp: rng.gen_range(HILL_AMP_MIN..HILL_AMP_MAX),
        })
        .collect();
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let mut z = 0.0;
            for hill in &hills {
                let dx = c as f64 - hill.cx;
                let dy = r as f64 - hill.cy;
                z += hill.amp * (-(dx * dx + dy * dy) / (2.0 * hill.sigma * hill.sigma)).exp();
            }
            if config.noise_amp > 0.0 {
                z += rng.gen_range(0.0..config.noise_amp);
            }
            data.push(z);
        }
    }
    Raster::new(w, h, config.geo(), DEFAULT_NODATA, data)
}

/// Per-pixel Bernoulli head placement with probability proportional to the
/// base rate and local slope; heads sit at pixel centers.
pub fn plant_heads(dem: &Raster, config: &SceneConfig) -> Result<PointSet> {
    config.validate()?;
    let slope = slope_horn(dem)?;
    let mut rng = config.rng(1);
    let area_px_km2 = (config.pixel_m * config.pixel_m) / 1e6;
    let mut points = Vec::new();
    for row in 0..dem.height {
        for col in 0..dem.width {
            let s = match slope.get(row, col) {
                v if v == slope.nodata => 0.0, // border: treat as flat
                v => v,
            };
            let p = (config.base_head_rate * area_px_km2 * (1.0 + config.slope_gain * s)).clamp(0.0, 1.0);
            if rng.gen_bool(p) {
                points.push(dem.geo.pixel_to_world(row, col));
            }
        }
    }
    PointSet::new(points)
}

fn mean_db(slope_deg: f64, vv: bool) -> f64 {
    let base = if vv { -12.0 } else { -18.0 };
    base + 0.08 * slope_deg
}

/// Six (VV, VH) acquisitions in chronological order: 3 pre-event, 3
/// post-event. Values are linear intensities.
pub fn sim_sar(dem: &Raster, heads: &PointSet, config: &SceneConfig) -> Result<Vec<(Raster, Raster)>> {
    config.validate()?;
    let slope = slope_horn(dem)?;
    let (w, h) = (dem.width, dem.height);

    // extra brightening factor applied within the event radius of any head
    let mut event = vec![false; w * h];
    let radius = config.event_radius_px as i64;
    for &(x, y) in &heads.points {
        if let Some((hr, hc)) = dem.world_to_pixel(x, y) {
            let (hr, hc) = (hr as i64, hc as i64);
            for dr in -radius..=radius {
                for dc in -radius..=radius {
                    if dr * dr + dc * dc > radius * radius {
                        continue;
                    }
                    let (r, c) = (hr + dr, hc + dc);
                    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                        event[r as usize * w + c as usize] = true;
                    }
                }
            }
        }
    }

    let looks = config.sar_speckle_looks as f64;
    let speckle = Gamma::new(looks, 1.0 / looks).expect("looks >= 1");
    let mut rng = config.rng(2);
    let mut acquisitions = Vec::with_capacity(6);
    for acq in 0..6 {
        // post-event revisits 1..3 ramp the brightening at 1/3, 2/3, 1
        let ramp = if acq < 3 { 0.0 } else { (acq - 2) as f64 / 3.0 };
        let event_gain = 10f64.powf(config.event_brightening_db * ramp / 10.0);
        let mut vv = Vec::with_capacity(w * h);
        let mut vh = Vec::with_capacity(w * h);
        for row in 0..h {
            for col in 0..w {
                let s = match slope.get(row, col) {
                    v if v == slope.nodata => 0.0,
                    v => v,
                };
                let gain = if event[row * w + col] { event_gain } else { 1.0 };
                let mvv = 10f64.powf(mean_db(s, true) / 10.0) * gain;
                let mvh = 10f64.powf(mean_db(s, false) / 10.0) * gain;
                vv.push(mvv * speckle.sample(&mut rng));
                vh.push(mvh * speckle.sample(&mut rng));
            }
        }
        acquisitions.push((
            Raster::new(w, h, dem.geo, dem.nodata, vv)?,
            Raster::new(w, h, dem.geo, dem.nodata, vh)?,
        ));
    }
    Ok(acquisitions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chipping::amplitude_to_db;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            width: 96,
            height: 96,
            n_hills: 4,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn no_hills_no_noise_is_flat() {
        let cfg = SceneConfig {
            n_hills: 0,
            noise_amp: 0.0,
            width: 16,
            height: 16,
            ..SceneConfig::default()
        };
        let dem = gen_dem(&cfg).unwrap();
        assert!(dem.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dem_is_seed_deterministic_and_bounded() {
        let cfg = small(9);
        let a = gen_dem(&cfg).unwrap();
        let b = gen_dem(&cfg).unwrap();
        assert_eq!(a, b);
        let c = gen_dem(&small(10)).unwrap();
        assert_ne!(a, c);
        // construction bound: hills are positive with bounded amplitude
        let bound = cfg.n_hills as f64 * HILL_AMP_MAX + cfg.noise_amp;
        assert!(a.data.iter().all(|&v| (0.0..=bound).contains(&v)));
    }

    #[test]
    fn zero_rate_plants_nothing() {
        let cfg = SceneConfig {
            base_head_rate: 0.0,
            ..small(1)
        };
        let dem = gen_dem(&cfg).unwrap();
        assert!(plant_heads(&dem, &cfg).unwrap().is_empty());
    }

    #[test]
    fn flat_scene_head_count_matches_binomial() {
        let cfg = SceneConfig {
            n_hills: 0,
            noise_amp: 0.0,
            width: 256,
            height: 256,
            base_head_rate: 50.0,
            slope_gain: 0.0,
            ..SceneConfig::default()
        };
        let dem = gen_dem(&cfg).unwrap();
        let heads = plant_heads(&dem, &cfg).unwrap();
        let n_px = (cfg.width * cfg.height) as f64;
        let p = cfg.base_head_rate * (cfg.pixel_m * cfg.pixel_m) / 1e6;
        let expect = n_px * p;
        let sigma = (n_px * p * (1.0 - p)).sqrt();
        let got = heads.len() as f64;
        assert!((got - expect).abs() < 4.0 * sigma, "got {got}, expect {expect} ± {sigma}");
    }

    #[test]
    fn heads_prefer_steep_slopes() {
        let cfg = SceneConfig {
            base_head_rate: 30.0,
            slope_gain: 1.0,
            width: 256,
            height: 256,
            n_hills: 10,
            ..SceneConfig::default()
        };
        let dem = gen_dem(&cfg).unwrap();
        let heads = plant_heads(&dem, &cfg).unwrap();
        let slope = slope_horn(&dem).unwrap();
        let all: Vec<f64> = slope.data.iter().copied().filter(|&v| v != slope.nodata).collect();
        let mean_all = all.iter().sum::<f64>() / all.len() as f64;
        let at_heads: Vec<f64> = heads
            .points
            .iter()
            .filter_map(|&(x, y)| dem.world_to_pixel(x, y))
            .map(|(r, c)| slope.get(r, c))
            .filter(|&v| v != slope.nodata)
            .collect();
        assert!(at_heads.len() > 100, "need heads for the test, got {}", at_heads.len());
        let mean_heads = at_heads.iter().sum::<f64>() / at_heads.len() as f64;
        let var = all.iter().map(|v| (v - mean_all).powi(2)).sum::<f64>() / all.len() as f64;
        let se = (var / at_heads.len() as f64).sqrt();
        assert!(mean_heads > mean_all + 4.0 * se, "{mean_heads} vs {mean_all} (se {se})");
    }

    // two-sample Kolmogorov–Smirnov test at alpha = 0.01
    fn ks_passes(a: &[f64], b: &[f64]) -> bool {
        let mut sa = a.to_vec();
        let mut sb = b.to_vec();
        sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (n, m) = (sa.len() as f64, sb.len() as f64);
        let mut d: f64 = 0.0;
        let (mut i, mut j) = (0usize, 0usize);
        while i < sa.len() && j < sb.len() {
            if sa[i] <= sb[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / n - j as f64 / m).abs());
        }
        let critical = 1.628 * ((n + m) / (n * m)).sqrt();
        d < critical
    }

    #[test]
    fn no_brightening_means_identical_distributions() {
        let cfg = SceneConfig {
            event_brightening_db: 0.0,
            base_head_rate: 0.0, // head-free
            width: 128,
            height: 128,
            n_hills: 3,
            ..SceneConfig::default()
        };
        let dem = gen_dem(&cfg).unwrap();
        let heads = plant_heads(&dem, &cfg).unwrap();
        let sar = sim_sar(&dem, &heads, &cfg).unwrap();
        // same-pixel populations: pre acquisition 1 vs post acquisition 6
        assert!(ks_passes(&sar[0].0.data, &sar[5].0.data));
        assert!(ks_passes(&sar[0].1.data, &sar[5].1.data));
    }

    #[test]
    fn third_revisit_brightening_matches_config() {
        let cfg = SceneConfig {
            event_brightening_db: 3.0,
            base_head_rate: 80.0,
            slope_gain: 0.0,
            width: 256,
            height: 256,
            n_hills: 0,
            noise_amp: 0.0,
            event_radius_px: 2,
            ..SceneConfig::default()
        };
        let dem = gen_dem(&cfg).unwrap();
        let heads = plant_heads(&dem, &cfg).unwrap();
        let sar = sim_sar(&dem, &heads, &cfg).unwrap();
        // pixels within the event radius of a head
        let mut idx = Vec::new();
        let r = cfg.event_radius_px as i64;
        for &(x, y) in &heads.points {
            let (hr, hc) = dem.world_to_pixel(x, y).unwrap();
            for dr in -r..=r {
                for dc in -r..=r {
                    if dr * dr + dc * dc > r * r {
                        continue;
                    }
                    let (rr, cc) = (hr as i64 + dr, hc as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < dem.height && (cc as usize) < dem.width {
                        idx.push(rr as usize * dem.width + cc as usize);
                    }
                }
            }
        }
        idx.sort_unstable();
        idx.dedup();
        assert!(idx.len() >= 1000, "need 1000+ event pixels, got {}", idx.len());
        let mean_db_at = |raster: &Raster| {
            idx.iter().map(|&i| amplitude_to_db(raster.data[i])).sum::<f64>() / idx.len() as f64
        };
        let pre = mean_db_at(&sar[0].0);
        let post3 = mean_db_at(&sar[5].0);
        assert!(((post3 - pre) - cfg.event_brightening_db).abs() < 0.5, "delta {}", post3 - pre);
        // the ramp is monotone across the post revisits
        let post1 = mean_db_at(&sar[3].0);
        let post2 = mean_db_at(&sar[4].0);
        assert!(post1 < post2 && post2 < post3);
    }

    #[test]
    fn full_stack_is_seed_deterministic() {
        let cfg = small(33);
        let stack = |cfg: &SceneConfig| {
            let dem = gen_dem(cfg).unwrap();
            let heads = plant_heads(&dem, cfg).unwrap();
            let sar = sim_sar(&dem, &heads, cfg).unwrap();
            (dem, heads, sar)
        };
        let (d1, h1, s1) = stack(&cfg);
        let (d2, h2, s2) = stack(&cfg);
        assert_eq!(d1, d2);
        assert_eq!(h1, h2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = SceneConfig {
            base_head_rate: -1.0,
            ..SceneConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SceneConfig {
            sar_speckle_looks: 0,
            ..SceneConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
