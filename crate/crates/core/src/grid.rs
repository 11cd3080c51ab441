//! Multiscale raster data model.
//!
//! A [`Grid`] holds any number of named real-valued layers plus an optional
//! land-cover label per pixel, all in row-major order. Fine-resolution
//! rasters are plain grids; a [`CoarseGrid`] additionally records the integer
//! block size that relates it to the fine grid it was aggregated from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LST: &str = "LST";
pub const LAI: &str = "LAI";
pub const PPT: &str = "PPT";
pub const SM: &str = "SM";
pub const TB: &str = "TB";
/// Fraction of a pixel's sub-pixel area under crops, written by the scene
/// generator and consumed by stratified evaluation.
pub const CROPFRAC: &str = "CROPFRAC";

const LANDCOVER_NAME: &str = "landcover";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandCover {
    Baresoil = 0,
    Corn = 1,
    Cotton = 2,
}

impl LandCover {
    pub const ALL: [LandCover; 3] = [LandCover::Baresoil, LandCover::Corn, LandCover::Cotton];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LandCover::Baresoil),
            1 => Some(LandCover::Corn),
            2 => Some(LandCover::Cotton),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LandCover::Baresoil => "baresoil",
            LandCover::Corn => "corn",
            LandCover::Cotton => "cotton",
        }
    }

    pub fn is_crop(self) -> bool {
        self != LandCover::Baresoil
    }

    /// One-hot encoding in the fixed order baresoil, corn, cotton.
    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self as usize] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    cell_size: f64,
    layers: BTreeMap<String, Vec<f64>>,
    landcover: Option<Vec<LandCover>>,
}

/// Fine-resolution grid.
pub type FineGrid = Grid;

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseGrid {
    pub grid: Grid,
    pub scale_factor: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, cell_size: f64) -> Self {
        Self {
            rows,
            cols,
            cell_size,
            layers: BTreeMap::new(),
            landcover: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.layers.get(name).map(Vec::as_slice)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.layers.get_mut(name).map(Vec::as_mut_slice)
    }

    /// Like [`Grid::layer`] but missing layers are a domain error.
    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.layer(name)
            .ok_or_else(|| Error::Domain(format!("missing layer {name}")))
    }

    /// Inserts or replaces a layer.
    pub fn set_layer(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "layer {name} has {} values, grid has {}",
                values.len(),
                self.len()
            )));
        }
        if name == LANDCOVER_NAME {
            return Err(Error::Domain("landcover is not a real-valued layer".into()));
        }
        self.layers.insert(name, values);
        Ok(())
    }

    pub fn remove_layer(&mut self, name: &str) -> Option<Vec<f64>> {
        self.layers.remove(name)
    }

    pub fn landcover(&self) -> Option<&[LandCover]> {
        self.landcover.as_deref()
    }

    pub fn require_landcover(&self) -> Result<&[LandCover]> {
        self.landcover()
            .ok_or_else(|| Error::Domain("missing landcover labels".into()))
    }

    pub fn set_landcover(&mut self, labels: Vec<LandCover>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::Shape(format!(
                "landcover has {} labels, grid has {}",
                labels.len(),
                self.len()
            )));
        }
        self.landcover = Some(labels);
        Ok(())
    }

    /// Checks the physical ranges of the standard layers.
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, lo: f64, hi: f64| -> Result<()> {
            if let Some(values) = self.layer(name) {
                if let Some((i, v)) = values
                    .iter()
                    .enumerate()
                    .find(|(_, v)| !(**v >= lo && **v <= hi))
                {
                    return Err(Error::Domain(format!(
                        "{name}[{i}] = {v} outside [{lo}, {hi}]"
                    )));
                }
            }
            Ok(())
        };
        check(LAI, 0.0, f64::INFINITY)?;
        check(PPT, 0.0, f64::INFINITY)?;
        check(SM, 0.0, 0.6)?;
        check(TB, 50.0, 350.0)?;
        check(LST, f64::NEG_INFINITY, f64::INFINITY)?;
        Ok(())
    }
}

/// Block-averages every real-valued layer over `scale_factor × scale_factor`
/// blocks; land cover takes the modal label, ties going to the lowest code.
pub fn aggregate(fine: &Grid, scale_factor: usize) -> Result<CoarseGrid> {
    if fine.is_empty() {
        return Err(Error::Domain("cannot aggregate an empty grid".into()));
    }
    if scale_factor == 0 || !fine.rows.is_multiple_of(scale_factor) || !fine.cols.is_multiple_of(scale_factor) {
        return Err(Error::Shape(format!(
            "scale factor {scale_factor} does not divide {}x{}",
            fine.rows, fine.cols
        )));
    }
    let rows = fine.rows / scale_factor;
    let cols = fine.cols / scale_factor;
    let block = (scale_factor * scale_factor) as f64;
    let mut coarse = Grid::new(rows, cols, fine.cell_size * scale_factor as f64);

    for (name, values) in &fine.layers {
        let mut out = vec![0.0; rows * cols];
        for (ci, cell) in out.iter_mut().enumerate() {
            let (r0, c0) = ((ci / cols) * scale_factor, (ci % cols) * scale_factor);
            let mut sum = 0.0;
            for r in r0..r0 + scale_factor {
                let start = r * fine.cols + c0;
                sum += values[start..start + scale_factor].iter().sum::<f64>();
            }
            *cell = sum / block;
        }
        coarse.layers.insert(name.clone(), out);
    }

    if let Some(labels) = &fine.landcover {
        let mut out = Vec::with_capacity(rows * cols);
        for ci in 0..rows * cols {
            let (r0, c0) = ((ci / cols) * scale_factor, (ci % cols) * scale_factor);
            let mut counts = [0usize; 3];
            for r in r0..r0 + scale_factor {
                for c in c0..c0 + scale_factor {
                    counts[labels[r * fine.cols + c] as usize] += 1;
                }
            }
            // max_by_key keeps the last maximum; scan in reverse so ties go to the lowest code
            let best = (0..3).rev().max_by_key(|&k| counts[k]).unwrap_or(0);
            out.push(LandCover::ALL[best]);
        }
        coarse.landcover = Some(out);
    }

    Ok(CoarseGrid {
        grid: coarse,
        scale_factor,
    })
}

/// Observation-noise levels for the auxiliary fine-scale fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default = "NoiseSpec::default_sd_lst")]
    pub sd_lst: f64,
    #[serde(default = "NoiseSpec::default_sd_ppt")]
    pub sd_ppt: f64,
    #[serde(default = "NoiseSpec::default_sd_lai")]
    pub sd_lai: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    fn default_sd_lst() -> f64 {
        5.0
    }
    fn default_sd_ppt() -> f64 {
        1.0
    }
    fn default_sd_lai() -> f64 {
        0.1
    }

    pub fn zero() -> Self {
        Self {
            sd_lst: 0.0,
            sd_ppt: 0.0,
            sd_lai: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, sd) in [("sd_lst", self.sd_lst), ("sd_ppt", self.sd_ppt), ("sd_lai", self.sd_lai)] {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(Error::Domain(format!("{name} must be a finite value >= 0, got {sd}")));
            }
        }
        Ok(())
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sd_lst: Self::default_sd_lst(),
            sd_ppt: Self::default_sd_ppt(),
            sd_lai: Self::default_sd_lai(),
            seed: 0,
        }
    }
}

/// Adds independent zero-mean Gaussian noise to LST, PPT and LAI.
///
/// PPT and LAI are clamped at zero afterwards. Layers are drawn in the fixed
/// order LST, PPT, LAI from a single seeded stream.
pub fn add_observation_noise(grid: &Grid, spec: &NoiseSpec) -> Result<Grid> {
    spec.validate()?;
    for name in [LST, PPT, LAI] {
        grid.require(name)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = grid.clone();
    for (name, sd, clamp) in [(LST, spec.sd_lst, false), (PPT, spec.sd_ppt, true), (LAI, spec.sd_lai, true)] {
        if sd == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, sd).map_err(|e| Error::Domain(e.to_string()))?;
        let values = out.layers.get_mut(name).expect("checked above");
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
            if clamp && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Serializes a grid to the plain-text grid format.
pub fn format_grid(grid: &Grid) -> String {
    let n_layers = grid.layers.len() + usize::from(grid.landcover.is_some());
    let mut s = String::with_capacity(grid.len() * 12 * n_layers.max(1));
    let _ = writeln!(s, "{} {} {} {}", grid.rows, grid.cols, grid.cell_size, n_layers);
    let mut names: Vec<&str> = grid.layers.keys().map(String::as_str).collect();
    if grid.landcover.is_some() {
        names.push(LANDCOVER_NAME);
    }
    s.push_str(&names.join(" "));
    s.push('\n');
    let columns: Vec<&Vec<f64>> = grid.layers.values().collect();
    for i in 0..grid.len() {
        let mut first = true;
        for col in &columns {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{}", col[i]);
        }
        if let Some(labels) = &grid.landcover {
            if !first {
                s.push(' ');
            }
            let _ = write!(s, "{}", labels[i].code());
        }
        s.push('\n');
    }
    s
}

pub fn parse_grid(text: &str) -> Result<Grid> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let header_err = |message: String| Error::Parse { line: 1, message };
    if fields.len() != 4 {
        return Err(header_err(format!(
            "header must be `rows cols cell_size n_layers`, got {} fields",
            fields.len()
        )));
    }
    let rows: usize = parse_field(fields[0], 1, "rows")?;
    let cols: usize = parse_field(fields[1], 1, "cols")?;
    let cell_size: f64 = parse_field(fields[2], 1, "cell_size")?;
    let n_layers: usize = parse_field(fields[3], 1, "n_layers")?;

    let (names_line, names) = lines.next().ok_or(Error::Parse {
        line: 2,
        message: "missing layer names".into(),
    })?;
    let names: Vec<&str> = names.split_whitespace().collect();
    if names.len() != n_layers {
        return Err(Error::Parse {
            line: names_line,
            message: format!("header declares {n_layers} layers, found {} names", names.len()),
        });
    }
    let has_landcover = names.last() == Some(&LANDCOVER_NAME);
    if names[..names.len() - usize::from(has_landcover)].contains(&LANDCOVER_NAME) {
        return Err(Error::Parse {
            line: names_line,
            message: "landcover must be the last layer".into(),
        });
    }
    let n_real = n_layers - usize::from(has_landcover);

    let n = rows * cols;
    let mut columns = vec![Vec::with_capacity(n); n_real];
    let mut labels = Vec::with_capacity(if has_landcover { n } else { 0 });
    let mut count = 0;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if count == n {
            return Err(Error::Parse {
                line: line_no,
                message: format!("more than the declared {rows}x{cols} data rows"),
            });
        }
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != n_layers {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {n_layers} columns, found {}", values.len()),
            });
        }
        for (col, v) in columns.iter_mut().zip(&values) {
            col.push(parse_field::<f64>(v, line_no, "value")?);
        }
        if has_landcover {
            let code: u8 = parse_field(values[n_layers - 1], line_no, "landcover")?;
            labels.push(LandCover::from_code(code).ok_or(Error::Parse {
                line: line_no,
                message: format!("unknown landcover code {code}"),
            })?);
        }
        count += 1;
    }
    if count != n {
        return Err(Error::Parse {
            line: text.lines().count() + 1,
            message: format!("expected {n} data rows, found {count}"),
        });
    }

    let mut grid = Grid::new(rows, cols, cell_size);
    for (name, values) in names.iter().zip(columns) {
        grid.layers.insert((*name).to_string(), values);
    }
    if has_landcover {
        grid.landcover = Some(labels);
    }
    Ok(grid)
}

fn parse_field<T: FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} `{s}`"),
    })
}

pub fn write_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text)
}
