//! Per-day downscaling: feature assembly, clustering, cross-validated
//! parameter selection, per-cluster regression and fuzzy fusion, plus the
//! season loop over a scene.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    cluster_with_affinity, format_memberships, hard_assign, median_pairwise_distance, Affinity,
    ClusterConfig, ClusterResult, FeatureMatrix, MembershipMatrix, Normalization,
};
use crate::error::{Error, Result, StageExt};
use crate::grid::{add_observation_noise, aggregate, write_grid, CoarseGrid, Grid, NoiseSpec, LAI, LST, PPT, TB};
use crate::regression::{fit_ensemble, format_ensemble, Ensemble, RegressionParams, TrainingSet};
use crate::scene::{strip_truth, Scene};

pub const CLUSTER_FEATURES: [&str; 8] = ["LST", "PPT", "LAI", "lc_baresoil", "lc_corn", "lc_cotton", "x", "y"];
pub const REGRESSION_FEATURES: [&str; 7] = ["LST", "PPT", "LAI", "lc_baresoil", "lc_corn", "lc_cotton", "coarse_TB"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scale_factor: usize,
    pub training_fraction: f64,
    pub candidate_k: Vec<usize>,
    pub candidate_entropy_weight: Vec<f64>,
    pub candidate_ridge: Vec<f64>,
    pub folds: usize,
    /// Process every `cadence`-th day starting from day 1.
    pub cadence: usize,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub cluster: ClusterConfig,
    #[serde(skip)]
    pub regression: RegressionParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scale_factor: 10,
            training_fraction: 0.10,
            candidate_k: vec![1, 2, 3],
            candidate_entropy_weight: vec![0.0],
            candidate_ridge: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            folds: 5,
            cadence: 3,
            seed: 0,
            cluster: ClusterConfig::default(),
            regression: RegressionParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scale_factor == 0 {
            return bad("scale_factor must be >= 1".into());
        }
        if !(self.training_fraction > 0.0 && self.training_fraction <= 1.0) {
            return bad(format!("training_fraction {} outside (0, 1]", self.training_fraction));
        }
        if self.candidate_k.is_empty() || self.candidate_entropy_weight.is_empty() || self.candidate_ridge.is_empty() {
            return bad("candidate lists must be non-empty".into());
        }
        if self.candidate_k.contains(&0) {
            return bad("candidate K must be >= 1".into());
        }
        if self.candidate_entropy_weight.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("candidate entropy weights must be finite and >= 0".into());
        }
        if self.candidate_ridge.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("candidate ridge weights must be finite and >= 0".into());
        }
        if self.folds < 2 {
            return bad("folds must be >= 2".into());
        }
        if self.cadence == 0 {
            return bad("cadence must be >= 1".into());
        }
        let mut cluster = self.cluster.clone();
        cluster.k = cluster.k.max(2);
        cluster.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Independent seed for a numbered stream of a run.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Everything the method sees on one day: noisy fine auxiliary fields,
/// coarse TB, and fine TB observed at a sparse set of training pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DayInput {
    pub day: usize,
    pub fine: Grid,
    pub coarse: CoarseGrid,
    pub training_pixels: Vec<usize>,
    pub training_tb: Vec<f64>,
}

impl DayInput {
    /// Derives the inputs from a fully known scene day.
    pub fn from_truth(day: usize, truth: &Grid, config: &PipelineConfig, noise: &NoiseSpec) -> Result<Self> {
        let tb = truth.require(TB)?;
        let mut tb_only = Grid::new(truth.rows(), truth.cols(), truth.cell_size());
        tb_only.set_layer(TB, tb.to_vec())?;
        let coarse = aggregate(&tb_only, config.scale_factor)?;
        let noise = (*noise).with_seed(stream_seed(noise.seed, day as u64));
        let fine = add_observation_noise(&strip_truth(truth), &noise)?;
        let training_pixels = sample_training_pixels(truth.len(), config.training_fraction, config.seed)?;
        let training_tb = training_pixels.iter().map(|&i| tb[i]).collect();
        Ok(Self {
            day,
            fine,
            coarse,
            training_pixels,
            training_tb,
        })
    }
}

/// Sorted, seeded sample of `round(n · fraction)` pixels (at least one).
pub fn sample_training_pixels(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Domain("cannot sample pixels of an empty grid".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("training fraction {fraction} outside (0, 1]")));
    }
    let count = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = index::sample(&mut rng, n, count).into_vec();
    pixels.sort_unstable();
    Ok(pixels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayFeatures {
    pub clustering: FeatureMatrix,
    /// Raw regression features per fine pixel, in [`REGRESSION_FEATURES`] order.
    pub regression: Vec<Vec<f64>>,
}

pub fn assemble_features(fine: &Grid, coarse: &CoarseGrid) -> Result<DayFeatures> {
    let (rows, cols) = (fine.rows(), fine.cols());
    let f = coarse.scale_factor;
    if f == 0 || coarse.grid.rows() * f != rows || coarse.grid.cols() * f != cols {
        return Err(Error::Shape(format!(
            "coarse grid {}x{} at factor {f} does not cover fine grid {rows}x{cols}",
            coarse.grid.rows(),
            coarse.grid.cols()
        )));
    }
    let lst = fine.require(LST)?;
    let ppt = fine.require(PPT)?;
    let lai = fine.require(LAI)?;
    let lc = fine.require_landcover()?;
    let coarse_tb = coarse.grid.require(TB)?;

    let scaled = |v: usize, len: usize| if len > 1 { v as f64 / (len - 1) as f64 } else { 0.0 };
    let norms = [
        Normalization::standardize(lst.iter().copied()),
        Normalization::standardize(ppt.iter().copied()),
        Normalization::standardize(lai.iter().copied()),
    ];
    let n = fine.len();
    let mut values = Vec::with_capacity(n * CLUSTER_FEATURES.len());
    let mut regression = Vec::with_capacity(n);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let onehot = lc[i].one_hot();
            values.extend([norms[0].apply(lst[i]), norms[1].apply(ppt[i]), norms[2].apply(lai[i])]);
            values.extend(onehot);
            values.extend([scaled(c, cols), scaled(r, rows)]);
            let tb = coarse_tb[(r / f) * coarse.grid.cols() + c / f];
            regression.push(vec![lst[i], ppt[i], lai[i], onehot[0], onehot[1], onehot[2], tb]);
        }
    }
    let mut normalization = norms.to_vec();
    normalization.extend([Normalization::IDENTITY; 5]);
    let clustering = FeatureMatrix::new(
        CLUSTER_FEATURES.iter().map(|s| s.to_string()).collect(),
        values,
        normalization,
    )?;
    Ok(DayFeatures { clustering, regression })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub k: usize,
    pub entropy_weight: f64,
    pub ridge: f64,
    /// Cross-validated mean absolute error; `None` when infeasible.
    pub mae: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub k: usize,
    pub entropy_weight: f64,
    pub ridge: f64,
    pub mae: f64,
    pub candidates: Vec<CandidateScore>,
}

#[derive(Debug, Clone)]
pub struct DownscaleResult {
    pub day: usize,
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub estimate: Vec<f64>,
    pub k: usize,
    pub entropy_weight: f64,
    pub ridge: f64,
    pub cv_mae: Option<f64>,
    pub memberships: MembershipMatrix,
    pub training_pixels: Vec<usize>,
    pub cost_trace: Vec<f64>,
    pub cluster_sigma: f64,
    pub candidates: Vec<CandidateScore>,
    pub ensemble: Ensemble,
}

#[derive(Serialize)]
struct ParameterRecord<'a> {
    day: usize,
    k: usize,
    entropy_weight: f64,
    ridge: f64,
    cv_mae: Option<f64>,
    cluster_sigma: f64,
    iterations: usize,
    training_pixels: &'a [usize],
}

impl DownscaleResult {
    pub fn estimate_grid(&self) -> Result<Grid> {
        let mut g = Grid::new(self.rows, self.cols, self.cell_size);
        g.set_layer(TB, self.estimate.clone())?;
        Ok(g)
    }

    pub fn training_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.estimate.len()];
        for &p in &self.training_pixels {
            mask[p] = true;
        }
        mask
    }

    pub fn dir_name(day: usize) -> String {
        format!("day_{day:03}")
    }

    /// Writes the day's artifacts into `dir`, returning the written paths.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut put = |name: &str, text: String| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            written.push(path);
            Ok(())
        };
        let path = dir.join("tb_estimate.grid");
        write_grid(&self.estimate_grid()?, &path)?;
        put("membership.txt", format_memberships(&self.memberships))?;
        put("ensemble.txt", format_ensemble(&self.ensemble))?;
        let record = ParameterRecord {
            day: self.day,
            k: self.k,
            entropy_weight: self.entropy_weight,
            ridge: self.ridge,
            cv_mae: self.cv_mae,
            cluster_sigma: self.cluster_sigma,
            iterations: self.cost_trace.len().saturating_sub(1),
            training_pixels: &self.training_pixels,
        };
        let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Domain(e.to_string()))?;
        put("parameters.json", json + "\n")?;
        let mut trace = String::from("iteration,cost\n");
        for (t, c) in self.cost_trace.iter().enumerate() {
            let _ = writeln!(trace, "{t},{c}");
        }
        put("cost_trace.csv", trace)?;
        let mut cands = String::from("k,entropy_weight,ridge,mae,failure\n");
        for c in &self.candidates {
            let mae = c.mae.map(|v| v.to_string()).unwrap_or_default();
            let failure = c.failure.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(cands, "{},{},{},{mae},{failure}", c.k, c.entropy_weight, c.ridge);
        }
        put("candidates.csv", cands)?;
        written.insert(0, path);
        Ok(written)
    }
}

/// Day-level state shared by every candidate: features, training rows,
/// cross-validation folds, and the clustering affinity.
struct Problem<'a> {
    input: &'a DayInput,
    features: DayFeatures,
    affinity: Option<Affinity>,
    sigma: f64,
    seed: u64,
}

impl<'a> Problem<'a> {
    fn new(input: &'a DayInput, config: &PipelineConfig, needs_affinity: bool) -> Result<Self> {
        config.validate()?;
        if input.training_pixels.len() != input.training_tb.len() {
            return Err(Error::Shape("training pixels and values differ in length".into()));
        }
        if input.training_pixels.is_empty() {
            return Err(Error::EmptyTraining("no training pixels".into()));
        }
        let features = assemble_features(&input.fine, &input.coarse).stage("features")?;
        if let Some(&p) = input.training_pixels.iter().find(|&&p| p >= features.regression.len()) {
            return Err(Error::Domain(format!("training pixel {p} outside the grid")));
        }
        let sigma = config
            .cluster
            .kernel_width
            .unwrap_or_else(|| median_pairwise_distance(&features.clustering, 500));
        let affinity = if needs_affinity {
            Some(Affinity::new(&features.clustering, sigma).stage("clustering")?)
        } else {
            None
        };
        Ok(Self {
            input,
            features,
            affinity,
            sigma,
            seed: stream_seed(config.seed, input.day as u64),
        })
    }

    fn cluster(
        &self,
        config: &PipelineConfig,
        k: usize,
        entropy_weight: f64,
        checkpoint_every: Option<usize>,
        run_to_cap: bool,
    ) -> Result<ClusterResult> {
        let n = self.features.clustering.n();
        if k == 1 {
            let m = MembershipMatrix::single_cluster(n);
            let checkpoints = match checkpoint_every {
                Some(e) if e > 0 => (0..=config.cluster.max_iterations / e).map(|j| (j * e, m.clone())).collect(),
                _ => Vec::new(),
            };
            return Ok(ClusterResult {
                memberships: m,
                cost_trace: vec![0.0],
                iterations: 0,
                sigma: self.sigma,
                checkpoints,
            });
        }
        let mut cfg = config.cluster.clone();
        cfg.k = k;
        cfg.entropy_weight = entropy_weight;
        cfg.kernel_width = Some(self.sigma);
        cfg.seed = self.seed;
        if run_to_cap {
            cfg.tol = 0.0;
            cfg.patience = 0;
        }
        let affinity = self
            .affinity
            .as_ref()
            .ok_or_else(|| Error::Domain("affinity not prepared".into()))?;
        cluster_with_affinity(affinity, &cfg, checkpoint_every)
    }

    fn training_set(&self, positions: &[usize]) -> Result<TrainingSet> {
        let pixels: Vec<usize> = positions.iter().map(|&p| self.input.training_pixels[p]).collect();
        TrainingSet::new(
            pixels.iter().map(|&i| self.features.regression[i].clone()).collect(),
            positions.iter().map(|&p| self.input.training_tb[p]).collect(),
            pixels,
        )
    }

    /// Fold of every training row.
    fn folds(&self, folds: usize) -> Result<Vec<usize>> {
        let m = self.input.training_pixels.len();
        if m < 2 * folds {
            return Err(Error::Domain(format!(
                "{m} training pixels cannot fill {folds} folds of at least 2"
            )));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(self.seed, 0xf01d)));
        let mut fold = vec![0; m];
        for (rank, &row) in order.iter().enumerate() {
            fold[row] = rank % folds;
        }
        Ok(fold)
    }

    fn cross_validate(
        &self,
        memberships: &MembershipMatrix,
        labels: &[usize],
        fold_of: &[usize],
        folds: usize,
        params: &RegressionParams,
    ) -> Result<f64> {
        let mut abs_sum = 0.0;
        let mut count = 0usize;
        for f in 0..folds {
            let train: Vec<usize> = (0..fold_of.len()).filter(|&r| fold_of[r] != f).collect();
            let set = self.training_set(&train)?;
            let train_labels: Vec<usize> = set.pixels.iter().map(|&p| labels[p]).collect();
            let ensemble = fit_ensemble(&set, &train_labels, memberships.k(), params)?;
            for r in (0..fold_of.len()).filter(|&r| fold_of[r] == f) {
                let p = self.input.training_pixels[r];
                let pred = ensemble.predict_fused(memberships.row(p), &self.features.regression[p])?;
                abs_sum += (pred - self.input.training_tb[r]).abs();
                count += 1;
            }
        }
        Ok(abs_sum / count as f64)
    }

    /// Fits on every training pixel and predicts the whole field.
    fn finish(&self, memberships: &MembershipMatrix, params: &RegressionParams) -> Result<(Ensemble, Vec<f64>)> {
        let all: Vec<usize> = (0..self.input.training_pixels.len()).collect();
        let set = self.training_set(&all)?;
        let labels = hard_assign(memberships);
        let train_labels: Vec<usize> = set.pixels.iter().map(|&p| labels[p]).collect();
        let ensemble = fit_ensemble(&set, &train_labels, memberships.k(), params).stage("regression")?;
        let estimate = self
            .features
            .regression
            .par_iter()
            .enumerate()
            .map(|(i, x)| ensemble.predict_fused(memberships.row(i), x))
            .collect::<Result<Vec<f64>>>()
            .stage("fusion")?;
        Ok((ensemble, estimate))
    }

    fn result(
        &self,
        clustering: &ClusterResult,
        k: usize,
        entropy_weight: f64,
        ridge: f64,
        cv_mae: Option<f64>,
        candidates: Vec<CandidateScore>,
        config: &PipelineConfig,
    ) -> Result<DownscaleResult> {
        let params = config.regression.with_ridge(ridge);
        let (ensemble, estimate) = self.finish(&clustering.memberships, &params)?;
        Ok(DownscaleResult {
            day: self.input.day,
            rows: self.input.fine.rows(),
            cols: self.input.fine.cols(),
            cell_size: self.input.fine.cell_size(),
            estimate,
            k,
            entropy_weight,
            ridge,
            cv_mae,
            memberships: clustering.memberships.clone(),
            training_pixels: self.input.training_pixels.clone(),
            cost_trace: clustering.cost_trace.clone(),
            cluster_sigma: clustering.sigma,
            candidates,
            ensemble,
        })
    }
}

fn sorted_unique<T: Copy + PartialOrd>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite candidates"));
    v.dedup();
    v
}

type Clusterings = Vec<((usize, f64), Result<ClusterResult>)>;

fn select_on(problem: &Problem, config: &PipelineConfig) -> Result<(Selection, Clusterings)> {
    let ks = sorted_unique(&config.candidate_k);
    let mus = sorted_unique(&config.candidate_entropy_weight);
    let ridges = sorted_unique(&config.candidate_ridge);
    let mut clusterings: Clusterings = Vec::new();
    for &k in &ks {
        // the entropy weight is meaningless for a single cluster
        let mus_k = if k == 1 { &mus[..1] } else { &mus[..] };
        for &mu in mus_k {
            clusterings.push(((k, mu), problem.cluster(config, k, mu, None, false)));
        }
    }

    let single = clusterings.len() == 1 && ridges.len() == 1;
    let fold_of = if single { Vec::new() } else { problem.folds(config.folds)? };
    let mut candidates = Vec::new();
    for ((k, mu), clustering) in &clusterings {
        let labels = clustering.as_ref().ok().map(|c| hard_assign(&c.memberships));
        for &ridge in &ridges {
            let (mae, failure) = match (clustering, &labels) {
                (Err(e), _) => (None, Some(e.to_string())),
                (Ok(_), _) if single => (Some(f64::NAN), None),
                (Ok(c), Some(labels)) => {
                    let params = config.regression.with_ridge(ridge);
                    match problem.cross_validate(&c.memberships, labels, &fold_of, config.folds, &params) {
                        Ok(v) if v.is_finite() => (Some(v), None),
                        Ok(v) => (None, Some(format!("non-finite validation error {v}"))),
                        Err(e) => (None, Some(e.to_string())),
                    }
                }
                (Ok(_), None) => unreachable!("labels exist for successful clusterings"),
            };
            candidates.push(CandidateScore {
                k: *k,
                entropy_weight: *mu,
                ridge,
                mae,
                failure,
            });
        }
    }

    let best = best_candidate(candidates.iter());
    let Some((mae, best)) = best else {
        let listed: Vec<String> = candidates
            .iter()
            .map(|c| {
                format!(
                    "(K={}, mu_c={}, mu_r={}): {}",
                    c.k,
                    c.entropy_weight,
                    c.ridge,
                    c.failure.as_deref().unwrap_or("unknown")
                )
            })
            .collect();
        return Err(Error::Selection(format!("all candidates infeasible: {}", listed.join("; "))));
    };
    let selection = Selection {
        k: best.k,
        entropy_weight: best.entropy_weight,
        ridge: best.ridge,
        mae,
        candidates: candidates.clone(),
    };
    Ok((selection, clusterings))
}

/// Lowest cross-validated error; ties go to smaller K, then smaller
/// weights.
fn best_candidate<'a>(candidates: impl Iterator<Item = &'a CandidateScore>) -> Option<(f64, &'a CandidateScore)> {
    candidates.filter_map(|c| c.mae.map(|m| (m, c))).min_by(|(a, ca), (b, cb)| {
        a.total_cmp(b)
            .then(ca.k.cmp(&cb.k))
            .then(ca.entropy_weight.total_cmp(&cb.entropy_weight))
            .then(ca.ridge.total_cmp(&cb.ridge))
    })
}

/// Grid search over the candidate triples scored by k-fold mean absolute
/// error of fused predictions on held-out training pixels.
pub fn select_parameters(input: &DayInput, config: &PipelineConfig) -> Result<Selection> {
    let problem = Problem::new(input, config, config.candidate_k.iter().any(|&k| k > 1))?;
    select_on(&problem, config).map(|(s, _)| s).stage("selection")
}

pub fn downscale_day(input: &DayInput, config: &PipelineConfig) -> Result<DownscaleResult> {
    let problem = Problem::new(input, config, config.candidate_k.iter().any(|&k| k > 1))?;
    let (selection, clusterings) = select_on(&problem, config).stage("selection")?;
    let clustering = clusterings
        .into_iter()
        .find(|((k, mu), _)| *k == selection.k && (*k == 1 || *mu == selection.entropy_weight))
        .map(|(_, c)| c)
        .expect("selected clustering exists")?;
    problem.result(
        &clustering,
        selection.k,
        selection.entropy_weight,
        selection.ridge,
        Some(selection.mae).filter(|m| m.is_finite()),
        selection.candidates,
        config,
    )
}

/// Downscaling with fixed parameters and no selection step.
pub fn downscale_with_parameters(
    input: &DayInput,
    config: &PipelineConfig,
    k: usize,
    entropy_weight: f64,
    ridge: f64,
) -> Result<DownscaleResult> {
    let problem = Problem::new(input, config, k > 1)?;
    let entropy_weight = if k == 1 { sorted_unique(&config.candidate_entropy_weight)[0] } else { entropy_weight };
    let clustering = problem.cluster(config, k, entropy_weight, None, false).stage("clustering")?;
    problem.result(&clustering, k, entropy_weight, ridge, None, Vec::new(), config)
}

#[derive(Debug, Clone)]
pub struct IterationPoint {
    pub iteration: usize,
    pub cost: f64,
    pub estimate: Vec<f64>,
}

/// Selects parameters once, then reruns the clustering to the iteration cap
/// and rebuilds the fused field from every `every`-th iterate. When the
/// search picks K = 1 the best feasible K > 1 candidate is studied instead;
/// the returned selection names the parameters actually used.
pub fn iteration_study(input: &DayInput, config: &PipelineConfig, every: usize) -> Result<(Selection, Vec<IterationPoint>)> {
    if every == 0 {
        return Err(Error::Config("checkpoint interval must be >= 1".into()));
    }
    let mut selection = select_parameters(input, config)?;
    if selection.k == 1 {
        if let Some((mae, c)) = best_candidate(selection.candidates.iter().filter(|c| c.k > 1)) {
            let (k, entropy_weight, ridge) = (c.k, c.entropy_weight, c.ridge);
            selection = Selection {
                k,
                entropy_weight,
                ridge,
                mae,
                ..selection
            };
        }
    }
    let problem = Problem::new(input, config, selection.k > 1)?;
    let run = problem
        .cluster(config, selection.k, selection.entropy_weight, Some(every), true)
        .stage("clustering")?;
    let params = config.regression.with_ridge(selection.ridge);
    let mut points = Vec::with_capacity(run.checkpoints.len());
    for (iteration, m) in &run.checkpoints {
        let (_, estimate) = problem.finish(m, &params)?;
        let cost = run.cost_trace.get(*iteration).or(run.cost_trace.last()).copied().unwrap_or(0.0);
        points.push(IterationPoint {
            iteration: *iteration,
            cost,
            estimate,
        });
    }
    Ok((selection, points))
}

/// Days 1, 1 + cadence, 1 + 2·cadence, … up to `n_days`.
pub fn processed_days(n_days: usize, cadence: usize) -> Vec<usize> {
    (1..=n_days).step_by(cadence.max(1)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayFailure {
    pub day: usize,
    pub message: String,
    /// Process exit code class of the underlying error.
    pub exit_code: i32,
}

#[derive(Debug, Clone)]
pub struct SeasonRun {
    pub results: Vec<DownscaleResult>,
    pub failures: Vec<DayFailure>,
}

impl SeasonRun {
    pub fn result(&self, day: usize) -> Option<&DownscaleResult> {
        self.results.iter().find(|r| r.day == day)
    }
}

/// Exit code class: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(error: &Error) -> i32 {
    match error.root() {
        Error::Config(_) => 2,
        Error::Shape(_) | Error::Domain(_) | Error::Parse { .. } | Error::Io { .. } | Error::EmptyTraining(_) => 3,
        Error::DegenerateCluster { .. } | Error::Divergence { .. } | Error::IllConditioned(_) | Error::Selection(_) => 4,
        Error::Stage { .. } => unreachable!("root skips stage wrappers"),
    }
}

/// Downscales every processed day of a scene; failing days are recorded and
/// the run continues. Days run in parallel on the current rayon pool.
pub fn run_season(scene: &Scene, config: &PipelineConfig, noise: &NoiseSpec) -> Result<SeasonRun> {
    if scene.is_empty() {
        return Err(Error::Domain("empty scene series".into()));
    }
    config.validate()?;
    let days = processed_days(scene.len(), config.cadence);
    let outcomes: Vec<(usize, Result<DownscaleResult>)> = days
        .par_iter()
        .map(|&day| {
            let truth = scene.day(day).expect("processed days are within the scene");
            let outcome = DayInput::from_truth(day, truth, config, noise)
                .stage("inputs")
                .and_then(|input| downscale_day(&input, config));
            (day, outcome)
        })
        .collect();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (day, outcome) in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => failures.push(DayFailure {
                day,
                exit_code: exit_code(&e),
                message: e.to_string(),
            }),
        }
    }
    Ok(SeasonRun { results, failures })
}
