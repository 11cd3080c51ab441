//! Error statistics of downscaled fields against the true fine TB: RMSE,
//! error SD and bias, histogram KL divergence, the 10 K proportion test,
//! land-cover strata, and the CSV/grid products of a season report.

use std::fs;
use std::path::{Path, PathBuf};

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::{write_grid, Grid, LandCover, CROPFRAC, TB};

pub const KLD_BINS: usize = 50;
pub const KLD_SMOOTHING: f64 = 1e-10;
pub const ERROR_THRESHOLD_K: f64 = 10.0;
pub const NULL_PROPORTION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub n: usize,
    pub rmse: f64,
    /// Population standard deviation of the errors.
    pub sd: f64,
    pub bias: f64,
    pub mae: f64,
}

/// Error statistics of `estimate - truth` over the masked pixels.
pub fn rmse_sd(truth: &[f64], estimate: &[f64], mask: Option<&[bool]>) -> Result<ErrorStats> {
    if truth.len() != estimate.len() || mask.is_some_and(|m| m.len() != truth.len()) {
        return Err(Error::Shape("truth, estimate and mask differ in length".into()));
    }
    let errors: Vec<f64> = (0..truth.len())
        .filter(|&i| mask.is_none_or(|m| m[i]))
        .map(|i| estimate[i] - truth[i])
        .collect();
    stats_of(&errors)
}

fn stats_of(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(Error::Domain("no pixels selected".into()));
    }
    let n = errors.len() as f64;
    let bias = errors.iter().sum::<f64>() / n;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / n;
    Ok(ErrorStats {
        n: errors.len(),
        rmse: mse.sqrt(),
        sd: var.sqrt(),
        bias,
        mae: errors.iter().map(|e| e.abs()).sum::<f64>() / n,
    })
}

/// `Σ p log(p/q)` in nats after adding [`KLD_SMOOTHING`] to every bin of
/// both densities and renormalizing.
pub fn kld_densities(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape("densities must be non-empty and equally binned".into()));
    }
    let smooth = |d: &[f64]| {
        let s: f64 = d.iter().map(|v| v + KLD_SMOOTHING).sum();
        d.iter().map(|v| (v + KLD_SMOOTHING) / s).collect::<Vec<f64>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// Histogram KL divergence of the true density from the estimated one on
/// `bins` shared bins spanning both samples.
pub fn kld(truth: &[f64], estimate: &[f64], bins: usize) -> Result<f64> {
    if truth.is_empty() || estimate.is_empty() {
        return Err(Error::Domain("KL divergence needs non-empty samples".into()));
    }
    if bins == 0 {
        return Err(Error::Domain("KL divergence needs at least one bin".into()));
    }
    let all = truth.iter().chain(estimate);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Domain("non-finite sample value".into()));
    }
    if hi <= lo {
        return Ok(0.0);
    }
    let histogram = |sample: &[f64]| {
        let mut h = vec![0.0; bins];
        for v in sample {
            let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            h[b.min(bins - 1)] += 1.0;
        }
        let n = sample.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    kld_densities(&histogram(truth), &histogram(estimate))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdTest {
    pub n: usize,
    pub threshold: f64,
    /// Share of pixels with |error| strictly below the threshold.
    pub fraction: f64,
    pub z: f64,
    pub critical: f64,
    /// H₀ (share ≤ 0.95) rejected in favour of share > 0.95.
    pub reject: bool,
}

/// One-sided proportion Z-test of `P(|e| < threshold) > 0.95`.
pub fn threshold_test(abs_errors: &[f64], threshold: f64, confidence: f64) -> Result<ThresholdTest> {
    if abs_errors.is_empty() {
        return Err(Error::Domain("threshold test needs at least one error".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::Domain(format!("threshold must be > 0, got {threshold}")));
    }
    if !(confidence > 0.5 && confidence < 1.0) {
        return Err(Error::Domain(format!("confidence {confidence} outside (0.5, 1)")));
    }
    let n = abs_errors.len();
    let fraction = abs_errors.iter().filter(|e| e.abs() < threshold).count() as f64 / n as f64;
    let z = (fraction - NULL_PROPORTION) / (NULL_PROPORTION * (1.0 - NULL_PROPORTION) / n as f64).sqrt();
    let critical = Normal::standard().inverse_cdf(confidence);
    Ok(ThresholdTest {
        n,
        threshold,
        fraction,
        z,
        critical,
        reject: z > critical,
    })
}

/// Evaluation classes: the three land covers plus the baresoil sub-strata
/// (mixed: crop sub-pixels before the last harvest; post-harvest: any
/// baresoil pixel after it; pure: no crop sub-pixels before it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stratum {
    Class(LandCover),
    BaresoilMixed,
    BaresoilPostHarvest,
    BaresoilPure,
}

impl Stratum {
    pub const ALL: [Stratum; 6] = [
        Stratum::Class(LandCover::Baresoil),
        Stratum::Class(LandCover::Corn),
        Stratum::Class(LandCover::Cotton),
        Stratum::BaresoilMixed,
        Stratum::BaresoilPostHarvest,
        Stratum::BaresoilPure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Class(lc) => lc.name(),
            Stratum::BaresoilMixed => "baresoil_a",
            Stratum::BaresoilPostHarvest => "baresoil_b",
            Stratum::BaresoilPure => "baresoil_c",
        }
    }
}

/// Pixel masks of every stratum; sub-strata are present only when the
/// crop fraction is supplied.
pub fn stratum_masks(landcover: &[LandCover], crop_fraction: Option<&[f64]>, after_harvest: bool) -> Vec<(Stratum, Vec<bool>)> {
    let mut out: Vec<(Stratum, Vec<bool>)> = LandCover::ALL
        .iter()
        .map(|&lc| (Stratum::Class(lc), landcover.iter().map(|&l| l == lc).collect()))
        .collect();
    if let Some(frac) = crop_fraction {
        let bare = |i: usize| landcover[i] == LandCover::Baresoil;
        let n = landcover.len();
        out.push((Stratum::BaresoilMixed, (0..n).map(|i| bare(i) && !after_harvest && frac[i] > 0.0).collect()));
        out.push((Stratum::BaresoilPostHarvest, (0..n).map(|i| bare(i) && after_harvest).collect()));
        out.push((Stratum::BaresoilPure, (0..n).map(|i| bare(i) && !after_harvest && frac[i] <= 0.0).collect()));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub stratum: Stratum,
    /// `None` for a class without pixels.
    pub stats: Option<ErrorStats>,
    pub kld: Option<f64>,
}

pub fn stratify(truth: &[f64], estimate: &[f64], masks: &[(Stratum, Vec<bool>)]) -> Result<Vec<ClassRow>> {
    masks
        .iter()
        .map(|(stratum, mask)| {
            if !mask.iter().any(|&m| m) {
                return Ok(ClassRow {
                    stratum: *stratum,
                    stats: None,
                    kld: None,
                });
            }
            let (t, e) = select(truth, estimate, mask);
            Ok(ClassRow {
                stratum: *stratum,
                stats: Some(rmse_sd(truth, estimate, Some(mask))?),
                kld: Some(kld(&t, &e, KLD_BINS)?),
            })
        })
        .collect()
}

fn select(truth: &[f64], estimate: &[f64], mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
    (0..truth.len()).filter(|&i| mask[i]).map(|i| (truth[i], estimate[i])).unzip()
}

/// Pixels with at least two distinct land covers among their 8 neighbours.
pub fn boundary_mask(landcover: &[LandCover], rows: usize, cols: usize) -> Result<Vec<bool>> {
    if landcover.len() != rows * cols {
        return Err(Error::Shape(format!("{} labels for a {rows}x{cols} grid", landcover.len())));
    }
    let mut mask = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut seen = [false; 3];
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        continue;
                    }
                    seen[landcover[rr as usize * cols + cc as usize].code() as usize] = true;
                }
            }
            mask[r * cols + c] = seen.iter().filter(|&&s| s).count() >= 2;
        }
    }
    Ok(mask)
}

/// One processed day: the true grid (TB, land cover, optionally crop
/// fraction) and the downscaled estimate.
#[derive(Debug, Clone, Copy)]
pub struct DayComparison<'a> {
    pub day: usize,
    pub truth: &'a Grid,
    pub estimate: &'a [f64],
    pub vegetated: bool,
    pub after_harvest: bool,
}

#[derive(Debug, Clone)]
pub struct DayEvaluation {
    pub day: usize,
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub vegetated: bool,
    pub global: ErrorStats,
    pub classes: Vec<ClassRow>,
    pub threshold: ThresholdTest,
    pub boundary: Option<ErrorStats>,
    pub interior: Option<ErrorStats>,
    pub truth: Vec<f64>,
    pub estimate: Vec<f64>,
    pub landcover: Vec<LandCover>,
    pub masks: Vec<(Stratum, Vec<bool>)>,
    pub boundary_mask: Vec<bool>,
}

impl DayEvaluation {
    pub fn abs_error(&self) -> Vec<f64> {
        self.truth.iter().zip(&self.estimate).map(|(t, e)| (e - t).abs()).collect()
    }
}

fn optional_stats(truth: &[f64], estimate: &[f64], mask: &[bool]) -> Result<Option<ErrorStats>> {
    if mask.iter().any(|&m| m) {
        rmse_sd(truth, estimate, Some(mask)).map(Some)
    } else {
        Ok(None)
    }
}

pub fn evaluate_day(cmp: &DayComparison, confidence: f64) -> Result<DayEvaluation> {
    let truth = cmp.truth.require(TB)?;
    if truth.len() != cmp.estimate.len() {
        return Err(Error::Shape(format!(
            "day {}: estimate has {} pixels, truth {}",
            cmp.day,
            cmp.estimate.len(),
            truth.len()
        )));
    }
    let landcover = cmp.truth.require_landcover()?.to_vec();
    let masks = stratum_masks(&landcover, cmp.truth.layer(CROPFRAC), cmp.after_harvest);
    let boundary = boundary_mask(&landcover, cmp.truth.rows(), cmp.truth.cols())?;
    let interior: Vec<bool> = boundary.iter().map(|b| !b).collect();
    let abs: Vec<f64> = truth.iter().zip(cmp.estimate).map(|(t, e)| (e - t).abs()).collect();
    Ok(DayEvaluation {
        day: cmp.day,
        rows: cmp.truth.rows(),
        cols: cmp.truth.cols(),
        cell_size: cmp.truth.cell_size(),
        vegetated: cmp.vegetated,
        global: rmse_sd(truth, cmp.estimate, None)?,
        classes: stratify(truth, cmp.estimate, &masks)?,
        threshold: threshold_test(&abs, ERROR_THRESHOLD_K, confidence)?,
        boundary: optional_stats(truth, cmp.estimate, &boundary)?,
        interior: optional_stats(truth, cmp.estimate, &interior)?,
        truth: truth.to_vec(),
        estimate: cmp.estimate.to_vec(),
        landcover,
        masks,
        boundary_mask: boundary,
    })
}

#[derive(Debug, Clone)]
pub struct SeasonReport {
    pub days: Vec<DayEvaluation>,
    /// All processed pixels of the season pooled.
    pub pooled: ErrorStats,
    pub mean_daily_rmse: f64,
    pub mean_daily_sd: f64,
    /// Per-stratum statistics and KLD on the season-pooled samples.
    pub classes: Vec<ClassRow>,
    pub bare_period: Option<ErrorStats>,
    pub vegetated_period: Option<ErrorStats>,
    pub threshold: ThresholdTest,
    pub boundary: Option<ErrorStats>,
    pub interior: Option<ErrorStats>,
}

pub fn evaluate_season(days: &[DayComparison], confidence: f64) -> Result<SeasonReport> {
    if days.is_empty() {
        return Err(Error::Domain("no processed days to evaluate".into()));
    }
    let evals = days.iter().map(|d| evaluate_day(d, confidence)).collect::<Result<Vec<_>>>()?;

    let pooled_errors = |pick: &dyn Fn(&DayEvaluation, usize) -> bool| -> Vec<f64> {
        evals
            .iter()
            .flat_map(|d| (0..d.truth.len()).filter(|&i| pick(d, i)).map(|i| d.estimate[i] - d.truth[i]))
            .collect()
    };
    let maybe = |errors: Vec<f64>| if errors.is_empty() { Ok(None) } else { stats_of(&errors).map(Some) };

    let all = pooled_errors(&|_, _| true);
    let pooled = stats_of(&all)?;
    let abs: Vec<f64> = all.iter().map(|e| e.abs()).collect();

    let mut classes = Vec::new();
    for stratum in Stratum::ALL {
        let mut t = Vec::new();
        let mut e = Vec::new();
        for d in &evals {
            if let Some((_, mask)) = d.masks.iter().find(|(s, _)| *s == stratum) {
                let (dt, de) = select(&d.truth, &d.estimate, mask);
                t.extend(dt);
                e.extend(de);
            }
        }
        if t.is_empty() {
            if evals.iter().any(|d| d.masks.iter().any(|(s, _)| *s == stratum)) {
                classes.push(ClassRow {
                    stratum,
                    stats: None,
                    kld: None,
                });
            }
            continue;
        }
        let errors: Vec<f64> = t.iter().zip(&e).map(|(a, b)| b - a).collect();
        classes.push(ClassRow {
            stratum,
            stats: Some(stats_of(&errors)?),
            kld: Some(kld(&t, &e, KLD_BINS)?),
        });
    }

    let n_days = evals.len() as f64;
    Ok(SeasonReport {
        pooled,
        mean_daily_rmse: evals.iter().map(|d| d.global.rmse).sum::<f64>() / n_days,
        mean_daily_sd: evals.iter().map(|d| d.global.sd).sum::<f64>() / n_days,
        classes,
        bare_period: maybe(pooled_errors(&|d, _| !d.vegetated))?,
        vegetated_period: maybe(pooled_errors(&|d, _| d.vegetated))?,
        threshold: threshold_test(&abs, ERROR_THRESHOLD_K, confidence)?,
        boundary: maybe(pooled_errors(&|d, i| d.boundary_mask[i]))?,
        interior: maybe(pooled_errors(&|d, i| !d.boundary_mask[i]))?,
        days: evals,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Domain(format!("{}: {other:?}", path.display())),
    }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Header and rows of a CSV file.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .map_err(|e| csv_error(path, e))?;
    Ok((header, rows))
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn stats_cells(s: Option<&ErrorStats>) -> Vec<String> {
    match s {
        Some(s) => vec![s.n.to_string(), num(s.rmse), num(s.sd), num(s.bias), num(s.mae)],
        None => vec![String::new(); 5],
    }
}

/// Writes the season report below `dir`, returning every written path.
pub fn emit_report(report: &SeasonReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let diff_dir = dir.join("abs_diff");
    fs::create_dir_all(&diff_dir).map_err(|e| Error::io(&diff_dir, e))?;
    let mut written = Vec::new();
    let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<String>>();

    let mut header = strs(&["day", "vegetated", "n", "rmse", "sd", "bias", "mae", "within_10k", "z"]);
    for s in Stratum::ALL {
        for col in ["n", "rmse", "sd", "kld"] {
            header.push(format!("{}_{col}", s.name()));
        }
    }
    let rows: Vec<Vec<String>> = report
        .days
        .iter()
        .map(|d| {
            let mut row = vec![d.day.to_string(), d.vegetated.to_string()];
            row.extend(stats_cells(Some(&d.global)));
            row.extend([num(d.threshold.fraction), num(d.threshold.z)]);
            for s in Stratum::ALL {
                let c = d.classes.iter().find(|c| c.stratum == s);
                let st = c.and_then(|c| c.stats);
                row.extend([
                    st.map_or_else(|| "0".to_string(), |s| s.n.to_string()),
                    opt(st.map(|s| s.rmse)),
                    opt(st.map(|s| s.sd)),
                    opt(c.and_then(|c| c.kld)),
                ]);
            }
            row
        })
        .collect();
    let path = dir.join("season.csv");
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let header = strs(&["day", "class", "n", "rmse", "sd", "bias", "mae", "kld"]);
    let mut rows = Vec::new();
    for d in &report.days {
        for c in &d.classes {
            let mut row = vec![d.day.to_string(), c.stratum.name().to_string()];
            row.extend(stats_cells(c.stats.as_ref()));
            row.push(opt(c.kld));
            rows.push(row);
        }
    }
    let path = dir.join("classes.csv");
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let header = strs(&["scope", "n", "rmse", "sd", "bias", "mae", "kld"]);
    let mut rows = Vec::new();
    let mut scope = |name: String, s: Option<&ErrorStats>, k: Option<f64>| {
        let mut row = vec![name];
        row.extend(stats_cells(s));
        row.push(opt(k));
        rows.push(row);
    };
    scope("season".into(), Some(&report.pooled), None);
    scope("bare_period".into(), report.bare_period.as_ref(), None);
    scope("vegetated_period".into(), report.vegetated_period.as_ref(), None);
    scope("boundary".into(), report.boundary.as_ref(), None);
    scope("interior".into(), report.interior.as_ref(), None);
    for c in &report.classes {
        scope(format!("class_{}", c.stratum.name()), c.stats.as_ref(), c.kld);
    }
    let path = dir.join("summary.csv");
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let t = &report.threshold;
    let path = dir.join("threshold_test.csv");
    write_csv(
        &path,
        &strs(&["n", "threshold", "fraction", "z", "critical", "reject", "mean_daily_rmse", "mean_daily_sd"]),
        &[vec![
            t.n.to_string(),
            num(t.threshold),
            num(t.fraction),
            num(t.z),
            num(t.critical),
            t.reject.to_string(),
            num(report.mean_daily_rmse),
            num(report.mean_daily_sd),
        ]],
    )?;
    written.push(path);

    for lc in LandCover::ALL {
        let header = strs(&["day", "pixel", "true", "estimated", "lower_10k", "upper_10k"]);
        let mut rows = Vec::new();
        for d in &report.days {
            for i in (0..d.truth.len()).filter(|&i| d.landcover[i] == lc) {
                let t = d.truth[i];
                rows.push(vec![
                    d.day.to_string(),
                    i.to_string(),
                    num(t),
                    num(d.estimate[i]),
                    num(t - ERROR_THRESHOLD_K),
                    num(t + ERROR_THRESHOLD_K),
                ]);
            }
        }
        let path = dir.join(format!("scatter_{}.csv", lc.name()));
        write_csv(&path, &header, &rows)?;
        written.push(path);
    }

    for d in &report.days {
        let mut g = Grid::new(d.rows, d.cols, d.cell_size);
        g.set_layer("ABS_ERROR", d.abs_error())?;
        let path = diff_dir.join(format!("day_{:03}.grid", d.day));
        write_grid(&g, &path)?;
        written.push(path);
    }
    Ok(written)
}
