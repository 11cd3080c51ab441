//! Synthetic multiscale scene generator.
//!
//! Fields are simulated on a sub-pixel lattice (`subpixel_factor` sub-cells
//! per fine pixel side) and block-averaged to the fine grid, so pixels on
//! parcel edges mix land covers the same way coarse sensors mix them. TB is
//! then computed per fine pixel from the averaged SM, LST and LAI.

mod tau_omega;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, aggregate, Grid, LandCover, CROPFRAC, LAI, LST, PPT, SM, TB};

pub use tau_omega::{forward_model_grid, tau_omega_forward, TauOmegaParams};

pub const SM_MIN: f64 = 0.05;
pub const SM_MAX: f64 = 0.45;

/// One planting of one crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSeason {
    pub crop: LandCover,
    pub plant_day: usize,
    pub harvest_day: usize,
    pub peak_lai: f64,
}

impl CropSeason {
    /// Piecewise-linear phenology: linear growth to the peak at 50% of the
    /// season, plateau until 75%, senescence to 30% of peak at harvest.
    pub fn lai(&self, day: usize) -> f64 {
        if day < self.plant_day || day > self.harvest_day {
            return 0.0;
        }
        let span = (self.harvest_day - self.plant_day) as f64;
        let f = (day - self.plant_day) as f64 / span;
        let shape = if f < 0.5 {
            f / 0.5
        } else if f < 0.75 {
            1.0
        } else {
            1.0 - 0.7 * (f - 0.75) / 0.25
        };
        self.peak_lai * shape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainEvent {
    pub day: usize,
    pub mean_mm: f64,
    /// Spatial correlation length in fine-pixel units.
    pub correlation_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "SceneConfig::default_cell_size")]
    pub cell_size: f64,
    #[serde(default = "SceneConfig::default_subpixel_factor")]
    pub subpixel_factor: usize,
    #[serde(default = "SceneConfig::default_n_fields")]
    pub n_fields: usize,
    pub season_days: usize,
    #[serde(default)]
    pub crop_calendar: Vec<CropSeason>,
    #[serde(default)]
    pub rain_events: Vec<RainEvent>,
    #[serde(default = "SceneConfig::default_base_lst")]
    pub base_lst: f64,
    /// Seasonal LST swing, kelvin.
    #[serde(default = "SceneConfig::default_lst_amplitude")]
    pub lst_amplitude: f64,
    /// Sub-pixel LST noise, kelvin.
    #[serde(default = "SceneConfig::default_lst_noise")]
    pub lst_noise: f64,
    #[serde(default = "SceneConfig::default_initial_sm")]
    pub initial_sm: f64,
    #[serde(default)]
    pub forward: TauOmegaParams,
    #[serde(default)]
    pub seed: u64,
}

impl SceneConfig {
    fn default_cell_size() -> f64 {
        1.0
    }
    fn default_subpixel_factor() -> usize {
        5
    }
    fn default_n_fields() -> usize {
        10
    }
    fn default_base_lst() -> f64 {
        295.0
    }
    fn default_lst_amplitude() -> f64 {
        8.0
    }
    fn default_lst_noise() -> f64 {
        1.0
    }
    fn default_initial_sm() -> f64 {
        0.25
    }

    /// A three-crop season: two corn plantings and one cotton planting,
    /// bare periods at both ends, rain every few days.
    pub fn three_crop(rows: usize, cols: usize, season_days: usize, seed: u64) -> Self {
        let at = |f: f64| ((season_days as f64 * f).round() as usize).clamp(1, season_days);
        let crop_calendar = vec![
            CropSeason {
                crop: LandCover::Corn,
                plant_day: at(0.12),
                harvest_day: at(0.48),
                peak_lai: 4.0,
            },
            CropSeason {
                crop: LandCover::Cotton,
                plant_day: at(0.20),
                harvest_day: at(0.82),
                peak_lai: 3.5,
            },
            CropSeason {
                crop: LandCover::Corn,
                plant_day: at(0.52),
                harvest_day: at(0.86),
                peak_lai: 4.0,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RAIN_SCHEDULE_STREAM);
        let mut rain_events = Vec::new();
        let mut day = 2 + rng.random_range(0..4);
        while day <= season_days {
            rain_events.push(RainEvent {
                day,
                mean_mm: rng.random_range(5.0..25.0),
                correlation_length: rng.random_range(15.0..40.0),
            });
            day += rng.random_range(3..9);
        }
        Self {
            rows,
            cols,
            cell_size: 1.0,
            subpixel_factor: Self::default_subpixel_factor(),
            n_fields: 10,
            season_days,
            crop_calendar,
            rain_events,
            base_lst: Self::default_base_lst(),
            lst_amplitude: Self::default_lst_amplitude(),
            lst_noise: Self::default_lst_noise(),
            initial_sm: Self::default_initial_sm(),
            forward: TauOmegaParams::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        if self.rows == 0 || self.cols == 0 {
            return bad("scene rows and cols must be > 0".into());
        }
        if self.subpixel_factor == 0 {
            return bad("subpixel_factor must be >= 1".into());
        }
        if self.season_days == 0 {
            return bad("season_days must be >= 1".into());
        }
        for c in &self.crop_calendar {
            if !c.crop.is_crop() {
                return bad("crop calendar entries must be crops, not baresoil".into());
            }
            if !(c.plant_day >= 1 && c.plant_day < c.harvest_day && c.harvest_day <= self.season_days) {
                return bad(format!(
                    "invalid calendar for {}: plant {} harvest {} season {}",
                    c.crop.name(),
                    c.plant_day,
                    c.harvest_day,
                    self.season_days
                ));
            }
            if !(c.peak_lai > 0.0 && c.peak_lai <= 8.0) {
                return bad(format!("peak LAI {} outside (0, 8]", c.peak_lai));
            }
        }
        for e in &self.rain_events {
            if e.day == 0 || e.day > self.season_days || !(e.mean_mm >= 0.0) || !(e.correlation_length > 0.0) {
                return bad(format!("invalid rain event {e:?}"));
            }
        }
        if !(SM_MIN..=SM_MAX).contains(&self.initial_sm) {
            return bad(format!("initial_sm {} outside [{SM_MIN}, {SM_MAX}]", self.initial_sm));
        }
        if !(self.lst_noise >= 0.0) {
            return bad("lst_noise must be >= 0".into());
        }
        self.forward.validate()
    }

    fn crops(&self) -> Vec<LandCover> {
        let mut crops: Vec<LandCover> = self.crop_calendar.iter().map(|c| c.crop).collect();
        crops.sort();
        crops.dedup();
        crops
    }

    /// Last harvest in the calendar, or 0 without crops.
    pub fn last_harvest_day(&self) -> usize {
        self.crop_calendar.iter().map(|c| c.harvest_day).max().unwrap_or(0)
    }

    /// True when some crop is in the ground on `day`.
    pub fn is_vegetated_day(&self, day: usize) -> bool {
        self.crop_calendar
            .iter()
            .any(|c| day >= c.plant_day && day <= c.harvest_day)
    }
}

// keeps the rain schedule independent of the mosaic stream
const RAIN_SCHEDULE_STREAM: u64 = 0x7261_696e;
/// Spatial coefficient of variation of event rain depth.
const RAIN_SPATIAL_CV: f64 = 0.3;

/// Daily fine grids for one season; `days[0]` is day 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub days: Vec<Grid>,
}

impl Scene {
    pub fn day(&self, day: usize) -> Option<&Grid> {
        day.checked_sub(1).and_then(|i| self.days.get(i))
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::with_capacity(self.days.len());
        for (i, g) in self.days.iter().enumerate() {
            let path = dir.join(day_file_name(i + 1));
            grid::write_grid(g, &path)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Whether any pixel carries leaves, per day.
    pub fn vegetated_days(&self) -> Result<Vec<bool>> {
        self.days
            .iter()
            .map(|g| g.require(LAI).map(|l| l.iter().any(|&v| v > 0.0)))
            .collect()
    }

    /// Last day with leaves anywhere, or 0 for a season without crops.
    pub fn last_vegetated_day(&self) -> Result<usize> {
        Ok(self.vegetated_days()?.iter().rposition(|&v| v).map_or(0, |i| i + 1))
    }

    /// Reads `day_NNN.grid` files; days must be contiguous from 1.
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut days = Vec::new();
        loop {
            let path = dir.join(day_file_name(days.len() + 1));
            if !path.exists() {
                break;
            }
            days.push(grid::read_grid(&path)?);
        }
        if days.is_empty() {
            return Err(Error::Domain(format!("no day_001.grid in {}", dir.display())));
        }
        Ok(Self { days })
    }
}

pub fn day_file_name(day: usize) -> String {
    format!("day_{day:03}.grid")
}

pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let f = config.subpixel_factor;
    let (rows, cols) = (config.rows * f, config.cols * f);
    let n = rows * cols;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // parcel mosaic
    let crops = config.crops();
    let mut labels = vec![LandCover::Baresoil; n];
    let mut parcel = vec![usize::MAX; n];
    let mut vigor = Vec::new();
    if !crops.is_empty() {
        for p in 0..config.n_fields {
            let h = ((rows as f64) * rng.random_range(0.15..0.35)).round().max(1.0) as usize;
            let w = ((cols as f64) * rng.random_range(0.15..0.35)).round().max(1.0) as usize;
            let r0 = rng.random_range(0..=rows - h.min(rows));
            let c0 = rng.random_range(0..=cols - w.min(cols));
            let crop = crops[p % crops.len()];
            vigor.push(rng.random_range(0.8..1.2));
            for r in r0..(r0 + h).min(rows) {
                for c in c0..(c0 + w).min(cols) {
                    labels[r * cols + c] = crop;
                    parcel[r * cols + c] = p;
                }
            }
        }
    }
    let crop_frac: Vec<f64> = labels.iter().map(|l| f64::from(u8::from(l.is_crop()))).collect();

    // smooth initial moisture perturbation, ±0.03
    let sm_pattern = smooth_field(config.rows, config.cols, 10.0, &mut rng);
    let mut sm: Vec<f64> = upsample(&sm_pattern, config.rows, config.cols, f)
        .into_iter()
        .map(|z| (config.initial_sm + 0.03 * z).clamp(SM_MIN, SM_MAX))
        .collect();

    let mut rain_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut rain_history: Vec<Vec<f64>> = Vec::new();
    let mut days = Vec::with_capacity(config.season_days);
    for day in 1..=config.season_days {
        let mut rain = vec![0.0; n];
        for event in config.rain_events.iter().filter(|e| e.day == day) {
            let z = smooth_field(config.rows, config.cols, event.correlation_length, &mut rain_rng);
            for (acc, z) in rain.iter_mut().zip(upsample(&z, config.rows, config.cols, f)) {
                *acc += event.mean_mm * (1.0 + RAIN_SPATIAL_CV * z).max(0.0);
            }
        }
        rain_history.push(rain);
        if rain_history.len() > 3 {
            rain_history.remove(0);
        }

        let lai: Vec<f64> = (0..n)
            .map(|i| match parcel[i] {
                usize::MAX => 0.0,
                p => {
                    let crop = labels[i];
                    vigor[p]
                        * config
                            .crop_calendar
                            .iter()
                            .filter(|c| c.crop == crop)
                            .map(|c| c.lai(day))
                            .fold(0.0, f64::max)
                }
            })
            .collect();

        let today = rain_history.last().expect("pushed above");
        for i in 0..n {
            let rate = 0.08 + 0.03 * lai[i];
            let dried = SM_MIN + (sm[i] - SM_MIN) * (-rate).exp();
            sm[i] = (dried + 0.7 * today[i] / 50.0).clamp(SM_MIN, SM_MAX);
        }

        let phase = if config.season_days > 1 {
            std::f64::consts::PI * (day - 1) as f64 / (config.season_days - 1) as f64
        } else {
            0.0
        };
        let seasonal = config.base_lst + config.lst_amplitude * phase.sin();
        let lst: Vec<f64> = (0..n)
            .map(|i| {
                let noise: f64 = rng.sample(StandardNormal);
                seasonal - 40.0 * (sm[i] - 0.25) - 1.5 * lai[i] + config.lst_noise * noise
            })
            .collect();
        let ppt: Vec<f64> = (0..n)
            .map(|i| rain_history.iter().map(|r| r[i]).sum())
            .collect();

        let mut sub = Grid::new(rows, cols, config.cell_size / f as f64);
        sub.set_layer(LST, lst)?;
        sub.set_layer(LAI, lai)?;
        sub.set_layer(PPT, ppt)?;
        sub.set_layer(SM, sm.clone())?;
        sub.set_layer(CROPFRAC, crop_frac.clone())?;
        sub.set_landcover(labels.clone())?;
        // exact cell size, not the product of the rounded sub-cell size
        let fine = aggregate(&sub, f)?.grid;
        let fine = forward_model_grid(&with_cell_size(fine, config.cell_size)?, &config.forward)?;
        days.push(fine);
    }
    Ok(Scene { days })
}

fn with_cell_size(g: Grid, cell_size: f64) -> Result<Grid> {
    let mut out = Grid::new(g.rows(), g.cols(), cell_size);
    for name in g.layer_names() {
        out.set_layer(name, g.layer(name).expect("listed").to_vec())?;
    }
    if let Some(lc) = g.landcover() {
        out.set_landcover(lc.to_vec())?;
    }
    Ok(out)
}

/// Unit-variance Gaussian-blurred white noise on a `rows × cols` lattice.
fn smooth_field(rows: usize, cols: usize, length: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut field: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    let radius = (3.0 * length).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d as f64).powi(2) / (2.0 * length * length)).exp())
        .collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // repeat in case the kernel is wider than the lattice
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * field[r * cols + reflect(c as isize + k as isize - radius, cols)];
            }
            tmp[r * cols + c] = acc;
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * tmp[reflect(r as isize + k as isize - radius, rows) * cols + c];
            }
            field[r * cols + c] = acc;
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    field.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    field
}

/// Bilinear interpolation of a fine-pixel lattice onto the sub-pixel lattice.
fn upsample(field: &[f64], rows: usize, cols: usize, f: usize) -> Vec<f64> {
    if f == 1 {
        return field.to_vec();
    }
    let at = |r: usize, c: usize| field[r * cols + c];
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(rows * cols * f * f);
    for r in 0..rows * f {
        let (r0, r1, tr) = coord(r, rows);
        for c in 0..cols * f {
            let (c0, c1, tc) = coord(c, cols);
            let top = at(r0, c0) * (1.0 - tc) + at(r0, c1) * tc;
            let bottom = at(r1, c0) * (1.0 - tc) + at(r1, c1) * tc;
            out.push(top * (1.0 - tr) + bottom * tr);
        }
    }
    out
}

/// Index of the day (1-based) with the largest input heterogeneity: the sum
/// over LST, PPT and LAI of the day's spatial variance divided by that
/// layer's season-mean spatial variance.
pub fn most_heterogeneous_day(scene: &Scene) -> Result<usize> {
    if scene.is_empty() {
        return Err(Error::Domain("empty scene".into()));
    }
    let variance = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
    };
    let mut per_layer = Vec::new();
    for name in [LST, PPT, LAI] {
        let vars: Vec<f64> = scene
            .days
            .iter()
            .map(|g| g.require(name).map(variance))
            .collect::<Result<_>>()?;
        let mean = vars.iter().sum::<f64>() / vars.len() as f64;
        per_layer.push(vars.into_iter().map(|v| if mean > 0.0 { v / mean } else { 0.0 }).collect::<Vec<_>>());
    }
    let score = |d: usize| per_layer.iter().map(|l| l[d]).sum::<f64>();
    let best = (0..scene.len())
        .max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))
        .expect("non-empty");
    Ok(best + 1)
}

/// Removes TB and SM so a grid can be handed to the downscaler as pure
/// auxiliary data.
pub fn strip_truth(grid: &Grid) -> Grid {
    let mut g = grid.clone();
    g.remove_layer(TB);
    g.remove_layer(SM);
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig::three_crop(20, 20, 60, seed)
    }

    #[test]
    fn phenology_is_piecewise_linear() {
        let c = CropSeason {
            crop: LandCover::Corn,
            plant_day: 10,
            harvest_day: 50,
            peak_lai: 4.0,
        };
        assert_eq!(c.lai(9), 0.0);
        assert_eq!(c.lai(10), 0.0);
        assert!((c.lai(20) - 2.0).abs() < 1e-12);
        assert_eq!(c.lai(30), 4.0);
        assert_eq!(c.lai(35), 4.0);
        assert!((c.lai(50) - 1.2).abs() < 1e-12);
        assert_eq!(c.lai(51), 0.0);
    }

    #[test]
    fn no_rain_means_pure_drydown() {
        let mut cfg = small(1);
        cfg.rain_events.clear();
        let scene = generate_scene(&cfg).unwrap();
        for pair in scene.days.windows(2) {
            let (a, b) = (pair[0].layer(SM).unwrap(), pair[1].layer(SM).unwrap());
            assert!(a.iter().zip(b).all(|(x, y)| y <= x));
        }
    }

    #[test]
    fn baresoil_scene_has_no_leaves() {
        let mut cfg = small(2);
        cfg.crop_calendar.clear();
        let scene = generate_scene(&cfg).unwrap();
        for g in &scene.days {
            assert!(g.layer(LAI).unwrap().iter().all(|&v| v == 0.0));
            assert!(g.landcover().unwrap().iter().all(|&l| l == LandCover::Baresoil));
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate_scene(&small(5)).unwrap();
        assert_eq!(a, generate_scene(&small(5)).unwrap());
        let b = generate_scene(&small(6)).unwrap();
        assert_ne!(a.days[10].layer(PPT), b.days[10].layer(PPT));
    }

    #[test]
    fn generated_fields_respect_ranges() {
        let cfg = small(3);
        let scene = generate_scene(&cfg).unwrap();
        assert_eq!(scene.len(), cfg.season_days);
        for g in &scene.days {
            g.validate().unwrap();
            let tb = g.layer(TB).unwrap();
            assert!(tb.iter().all(|&v| (50.0..=350.0).contains(&v)));
            let sm = g.layer(SM).unwrap();
            assert!(sm.iter().all(|&v| (SM_MIN..=SM_MAX).contains(&v)));
        }
        // all three covers appear
        let lc = scene.days[0].landcover().unwrap();
        for cover in LandCover::ALL {
            assert!(lc.contains(&cover), "{cover:?} missing");
        }
    }

    #[test]
    fn invalid_calendar_is_rejected() {
        let mut cfg = small(1);
        cfg.crop_calendar[0].harvest_day = cfg.crop_calendar[0].plant_day;
        assert!(matches!(generate_scene(&cfg), Err(Error::Domain(_))));
        let mut cfg = small(1);
        cfg.crop_calendar[0].peak_lai = 9.0;
        assert!(generate_scene(&cfg).is_err());
        let mut cfg = small(1);
        cfg.crop_calendar[0].harvest_day = cfg.season_days + 1;
        assert!(generate_scene(&cfg).is_err());
    }

    #[test]
    fn smooth_field_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = smooth_field(30, 30, 4.0, &mut rng);
        let mean = f.iter().sum::<f64>() / 900.0;
        let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 900.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vegetation_calendar_follows_crops() {
        let cfg = small(5);
        let scene = generate_scene(&cfg).unwrap();
        let veg = scene.vegetated_days().unwrap();
        for day in 1..=cfg.season_days {
            let leafy = cfg.crop_calendar.iter().any(|c| day > c.plant_day && day <= c.harvest_day);
            assert_eq!(veg[day - 1], leafy, "day {day}");
        }
        assert!(scene.last_vegetated_day().unwrap() <= cfg.last_harvest_day());
    }

    #[test]
    fn scene_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(4);
        cfg.season_days = 5;
        cfg.crop_calendar.clear();
        cfg.rain_events.retain(|e| e.day <= 5);
        let scene = generate_scene(&cfg).unwrap();
        scene.write_dir(dir.path()).unwrap();
        assert_eq!(Scene::read_dir(dir.path()).unwrap(), scene);
    }
}
