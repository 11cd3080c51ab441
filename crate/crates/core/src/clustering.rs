//! Entropy-regularized Cauchy–Schwarz fuzzy clustering.
//!
//! For memberships `M` (N×K, rows on the probability simplex) and Gaussian
//! affinities `G_ij = exp(-|x_i - x_j|² / (2 (σ√2)²))` the objective is
//!
//! ```text
//! J(M) = A / sqrt(Π_k B_k) - μ Σ_ik m_ik log m_ik
//! A    = ½ Σ_ij (1 - m_i·m_j) G_ij
//! B_k  = Σ_ij m_ik m_jk G_ij
//! ```
//!
//! and is minimized by projected stochastic gradient descent: each iteration
//! moves a random batch of rows along the negative gradient and projects the
//! rows back onto the simplex.
//!
//! All quantities are computed from `GM = G·M`, which the optimizer keeps up
//! to date incrementally: `B_k = Σ_i m_ik GM_ik` and
//! `A = ½ (Σ_ij G_ij - Σ_k B_k)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature affine normalization: `normalized = (raw - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        offset: 0.0,
        scale: 1.0,
    };

    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.scale
    }

    pub fn invert(&self, normalized: f64) -> f64 {
        normalized * self.scale + self.offset
    }

    /// Mean/population-sd standardization; constant columns map to identity.
    pub fn standardize(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let mean = values.clone().sum::<f64>() / n;
        let sd = (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            Self {
                offset: mean,
                scale: sd,
            }
        } else {
            Self::IDENTITY
        }
    }
}

/// Row-major N×D feature values with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
    names: Vec<String>,
    normalization: Vec<Normalization>,
}

impl FeatureMatrix {
    pub fn new(
        names: Vec<String>,
        values: Vec<f64>,
        normalization: Vec<Normalization>,
    ) -> Result<Self> {
        let d = names.len();
        if normalization.len() != d {
            return Err(Error::Shape(format!(
                "{} normalization records for {d} features",
                normalization.len()
            )));
        }
        if d == 0 || !values.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "{} values do not fill rows of {d} features",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite feature value at row {}, column {}",
                i / d,
                names[i % d]
            )));
        }
        Ok(Self {
            n: values.len() / d,
            d,
            values,
            names,
            normalization,
        })
    }

    /// Unnamed, unnormalized features; handy for tests and small problems.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        Self::new(
            (0..d).map(|j| format!("f{j}")).collect(),
            rows.concat(),
            vec![Normalization::IDENTITY; d],
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn normalization(&self) -> &[Normalization] {
        &self.normalization
    }

    /// Raw (pre-normalization) value of feature `j` at row `i`.
    pub fn raw(&self, i: usize, j: usize) -> f64 {
        self.normalization[j].invert(self.values[i * self.d + j])
    }
}

/// Soft memberships, N×K, rows on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl MembershipMatrix {
    /// Validates the simplex constraint to within `1e-12`.
    pub fn new(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * k || k == 0 {
            return Err(Error::Shape(format!("{} values for {n}x{k} memberships", values.len())));
        }
        for (i, row) in values.chunks(k).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&m| !(m >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("membership row {i} is off the simplex: {row:?}")));
            }
        }
        Ok(Self { n, k, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("ragged membership rows".into()));
        }
        Self::new(rows.len(), k, rows.concat())
    }

    /// Every pixel fully in cluster 0.
    pub fn single_cluster(n: usize) -> Self {
        Self {
            n,
            k: 1,
            values: vec![1.0; n],
        }
    }

    /// Hard memberships from labels.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        let mut values = vec![0.0; labels.len() * k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::Domain(format!("label {l} >= K = {k}")));
            }
            values[i * k + l] = 1.0;
        }
        Ok(Self {
            n: labels.len(),
            k,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mean Shannon entropy of the rows, nats.
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = self
            .values
            .iter()
            .filter(|&&m| m > 0.0)
            .map(|&m| -m * m.ln())
            .sum();
        total / self.n as f64
    }
}

pub fn format_memberships(m: &MembershipMatrix) -> String {
    let mut s = format!("{} {}\n", m.n, m.k);
    for row in m.values.chunks(m.k) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn parse_memberships(text: &str) -> Result<MembershipMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse {
            line: 1,
            message: format!("invalid header `{header}`"),
        })?;
    let [n, k] = dims[..] else {
        return Err(Error::Parse {
            line: 1,
            message: "header must be `N K`".into(),
        });
    };
    let mut values = Vec::with_capacity(n * k);
    let mut rows = 0;
    for (i, line) in lines {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: i + 1,
                message: "invalid membership value".into(),
            })?;
        if row.len() != k {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {k} values, found {}", row.len()),
            });
        }
        values.extend(row);
        rows += 1;
    }
    if rows != n {
        return Err(Error::Parse {
            line: text.lines().count(),
            message: format!("expected {n} rows, found {rows}"),
        });
    }
    MembershipMatrix::new(n, k, values)
}

pub fn write_memberships(m: &MembershipMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_memberships(m)).map_err(|e| Error::io(path, e))
}

pub fn read_memberships(path: impl AsRef<Path>) -> Result<MembershipMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_memberships(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Number of clusters.
    pub k: usize,
    /// Weight μ of the entropy term.
    pub entropy_weight: f64,
    /// Affinity width σ; `None` selects the median pairwise distance.
    pub kernel_width: Option<f64>,
    pub max_iterations: usize,
    /// Initial step η₀; the step at iteration t is η₀ / (1 + t·decay).
    pub step_size: f64,
    pub step_decay: f64,
    pub batch_size: usize,
    /// Relative cost change regarded as stalled.
    pub tol: f64,
    /// Consecutive stalled iterations before stopping.
    pub patience: usize,
    /// Floor applied to memberships inside the entropy gradient.
    pub membership_floor: f64,
    /// Concentration of the symmetric Dirichlet initialization.
    pub init_concentration: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 2,
            entropy_weight: 0.0,
            kernel_width: None,
            max_iterations: 200,
            step_size: 0.2,
            step_decay: 0.02,
            batch_size: 512,
            tol: 1e-7,
            patience: 10,
            membership_floor: 1e-8,
            init_concentration: 5.0,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Domain(msg.to_string()));
        if self.k < 2 {
            return bad("cluster count K must be >= 2");
        }
        if !(self.entropy_weight >= 0.0) {
            return bad("entropy weight must be >= 0");
        }
        if let Some(s) = self.kernel_width {
            if !(s > 0.0 && s.is_finite()) {
                return bad("kernel width must be > 0");
            }
        }
        if !(self.step_size > 0.0) || !(self.step_decay >= 0.0) {
            return bad("step size must be > 0 and decay >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(self.membership_floor > 0.0) || !(self.init_concentration > 0.0) {
            return bad("membership floor and init concentration must be > 0");
        }
        Ok(())
    }
}

/// `exp(-|a - b|² / (2 (σ√2)²))`.
pub fn gaussian_affinity(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!(
            "feature dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("kernel width must be > 0, got {sigma}")));
    }
    Ok(affinity_unchecked(a, b, sigma))
}

fn affinity_unchecked(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (4.0 * sigma * sigma)).exp()
}

/// Dense, cached N×N affinity matrix.
#[derive(Debug, Clone)]
pub struct Affinity {
    n: usize,
    sigma: f64,
    values: Vec<f64>,
    total: f64,
}

impl Affinity {
    pub fn new(features: &FeatureMatrix, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("kernel width must be > 0, got {sigma}")));
        }
        let n = features.n();
        let mut values = vec![0.0; n * n];
        values.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            let xi = features.row(i);
            for (j, g) in row.iter_mut().enumerate() {
                *g = affinity_unchecked(xi, features.row(j), sigma);
            }
        });
        // row sums in fixed order, then a fixed-order total
        let total = values.chunks(n.max(1)).map(|r| r.iter().sum::<f64>()).sum();
        Ok(Self {
            n,
            sigma,
            values,
            total,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// `G·M`, N×K row-major.
    fn times(&self, m: &MembershipMatrix) -> Vec<f64> {
        let k = m.k;
        let mut out = vec![0.0; self.n * k];
        out.par_chunks_mut(k).enumerate().for_each(|(i, acc)| {
            for (j, g) in self.row(i).iter().enumerate() {
                for (a, mj) in acc.iter_mut().zip(m.row(j)) {
                    *a += g * mj;
                }
            }
        });
        out
    }
}

/// Median pairwise Euclidean distance over an evenly strided subsample of
/// at most `max_points` rows.
pub fn median_pairwise_distance(features: &FeatureMatrix, max_points: usize) -> f64 {
    let n = features.n();
    let stride = (n / max_points.max(2)).max(1);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let mut d = Vec::with_capacity(idx.len() * idx.len() / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let d2: f64 = features
                .row(i)
                .iter()
                .zip(features.row(j))
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            d.push(d2.sqrt());
        }
    }
    median(&mut d).filter(|&m| m > 0.0).unwrap_or(1.0)
}

pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    })
}

fn resolve_sigma(features: &FeatureMatrix, config: &ClusterConfig) -> f64 {
    config
        .kernel_width
        .unwrap_or_else(|| median_pairwise_distance(features, 500))
}

fn check_inputs(m: &MembershipMatrix, features: &FeatureMatrix) -> Result<()> {
    if m.n != features.n() {
        return Err(Error::Shape(format!(
            "{} membership rows for {} feature rows",
            m.n,
            features.n()
        )));
    }
    if m.n < 2 {
        return Err(Error::Domain("need at least two points".into()));
    }
    Ok(())
}

/// Value of the regularized objective, evaluated pair by pair.
pub fn cs_cost(m: &MembershipMatrix, features: &FeatureMatrix, config: &ClusterConfig) -> Result<f64> {
    check_inputs(m, features)?;
    let sigma = resolve_sigma(features, config);
    let (n, k) = (m.n, m.k);
    let mut numerator = 0.0;
    let mut mass = vec![0.0; k];
    for i in 0..n {
        for j in 0..n {
            let g = affinity_unchecked(features.row(i), features.row(j), sigma);
            let (mi, mj) = (m.row(i), m.row(j));
            let dot: f64 = mi.iter().zip(mj).map(|(a, b)| a * b).sum();
            numerator += (1.0 - dot) * g;
            for c in 0..k {
                mass[c] += mi[c] * mj[c] * g;
            }
        }
    }
    if let Some(c) = mass.iter().position(|&b| !(b > 0.0)) {
        return Err(Error::DegenerateCluster { cluster: c });
    }
    let denominator = mass.iter().map(|b| b.ln()).sum::<f64>() * 0.5;
    let ratio = 0.5 * numerator / denominator.exp();
    Ok(ratio - config.entropy_weight * plogp_sum(&m.values))
}

/// Σ m log m with 0·log 0 = 0.
fn plogp_sum(values: &[f64]) -> f64 {
    values.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

/// Global quantities of the objective given `GM`.
struct CostParts {
    mass: Vec<f64>,
    sqrt_prod: f64,
    ratio: f64,
}

fn cost_parts(m: &MembershipMatrix, gm: &[f64], total: f64) -> Result<CostParts> {
    let k = m.k;
    let mut mass = vec![0.0; k];
    for (mi, gi) in m.values.chunks(k).zip(gm.chunks(k)) {
        for c in 0..k {
            mass[c] += mi[c] * gi[c];
        }
    }
    if let Some(c) = mass.iter().position(|&b| !(b > 0.0)) {
        return Err(Error::DegenerateCluster { cluster: c });
    }
    let numerator = 0.5 * (total - mass.iter().sum::<f64>()).max(0.0);
    let sqrt_prod = (0.5 * mass.iter().map(|b| b.ln()).sum::<f64>()).exp();
    Ok(CostParts {
        ratio: numerator / sqrt_prod,
        mass,
        sqrt_prod,
    })
}

fn gradient_row(
    parts: &CostParts,
    m_row: &[f64],
    gm_row: &[f64],
    entropy_weight: f64,
    floor: f64,
    out: &mut [f64],
) {
    for c in 0..m_row.len() {
        let cs = -gm_row[c] / parts.sqrt_prod - parts.ratio * gm_row[c] / parts.mass[c];
        let entropy = -entropy_weight * (m_row[c].max(floor).ln() + 1.0);
        out[c] = cs + entropy;
    }
}

/// Partial derivatives ∂J/∂m_ik, N×K row-major, ignoring the simplex constraint.
pub fn cs_gradient(m: &MembershipMatrix, features: &FeatureMatrix, config: &ClusterConfig) -> Result<Vec<f64>> {
    check_inputs(m, features)?;
    let affinity = Affinity::new(features, resolve_sigma(features, config))?;
    let gm = affinity.times(m);
    let parts = cost_parts(m, &gm, affinity.total)?;
    let mut grad = vec![0.0; m.n * m.k];
    for i in 0..m.n {
        gradient_row(
            &parts,
            m.row(i),
            &gm[i * m.k..(i + 1) * m.k],
            config.entropy_weight,
            config.membership_floor,
            &mut grad[i * m.k..(i + 1) * m.k],
        );
    }
    Ok(grad)
}

/// Gradient restricted to the constraint set `Σ_k m_ik = 1`: each row of
/// the partial derivatives minus its mean (the Lagrange-multiplier term).
pub fn constrained_gradient(m: &MembershipMatrix, features: &FeatureMatrix, config: &ClusterConfig) -> Result<Vec<f64>> {
    let mut g = cs_gradient(m, features, config)?;
    for row in g.chunks_mut(m.k) {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(g)
}

/// Euclidean projection onto the probability simplex. Feasible inputs are
/// returned unchanged.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    if v.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-12 {
        return v.to_vec();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumulative += uj;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // absorb rounding so the row sums to one to the last few ulps
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|x| *x /= s);
    }
    w
}

/// Argmax per row; ties go to the lowest cluster index.
pub fn hard_assign(m: &MembershipMatrix) -> Vec<usize> {
    m.values
        .chunks(m.k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub memberships: MembershipMatrix,
    /// Full objective at iterate 0 and after every iteration.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub sigma: f64,
    /// `(iteration, memberships)` at every requested checkpoint.
    pub checkpoints: Vec<(usize, MembershipMatrix)>,
}

pub fn cluster(features: &FeatureMatrix, config: &ClusterConfig) -> Result<ClusterResult> {
    config.validate()?;
    let affinity = Affinity::new(features, resolve_sigma(features, config))?;
    cluster_with_affinity(&affinity, config, None)
}

/// Symmetric Dirichlet rows drawn through normalized Gamma variates.
pub fn dirichlet_init(n: usize, k: usize, concentration: f64, rng: &mut impl Rng) -> Result<MembershipMatrix> {
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let mut values = Vec::with_capacity(n * k);
    for _ in 0..n {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        let row: Vec<f64> = draws.iter().map(|g| g / s).collect();
        values.extend(project_simplex(&row));
    }
    MembershipMatrix::new(n, k, values)
}

/// Projects a descent direction onto the tangent cone of the simplex at
/// `m`: components at zero that would be pushed further out are frozen and
/// the remaining ones are centred.
fn tangent_cone(m: &[f64], g: &mut [f64]) {
    let mut free: Vec<bool> = vec![true; g.len()];
    loop {
        let count = free.iter().filter(|&&f| f).count();
        let mean = g.iter().zip(&free).filter(|(_, &f)| f).map(|(v, _)| v).sum::<f64>() / count as f64;
        let mut changed = false;
        for c in 0..g.len() {
            if free[c] && m[c] <= 0.0 && g[c] - mean > 0.0 && count > 1 {
                free[c] = false;
                changed = true;
            }
        }
        if !changed {
            for (v, &f) in g.iter_mut().zip(&free) {
                *v = if f { *v - mean } else { 0.0 };
            }
            return;
        }
    }
}

/// Runs the optimizer on a precomputed affinity matrix, optionally keeping
/// a copy of the memberships every `checkpoint_every` iterations (and at
/// iteration 0 and the cap, repeating the final iterate after an early stop).
pub fn cluster_with_affinity(
    affinity: &Affinity,
    config: &ClusterConfig,
    checkpoint_every: Option<usize>,
) -> Result<ClusterResult> {
    config.validate()?;
    let (n, k) = (affinity.n, config.k);
    if n < k {
        return Err(Error::Domain(format!("{n} points cannot fill {k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut m = dirichlet_init(n, k, config.init_concentration, &mut rng)?;
    let mut gm = affinity.times(&m);

    let objective = |m: &MembershipMatrix, gm: &[f64]| -> Result<(CostParts, f64)> {
        let parts = cost_parts(m, gm, affinity.total)?;
        let cost = parts.ratio - config.entropy_weight * plogp_sum(&m.values);
        Ok((parts, cost))
    };

    let (mut parts, cost0) = objective(&m, &gm)?;
    if !cost0.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    let mut trace = vec![cost0];
    let mut checkpoints = Vec::new();
    let wants_checkpoint = |t: usize| checkpoint_every.is_some_and(|e| e > 0 && t.is_multiple_of(e));
    if wants_checkpoint(0) {
        checkpoints.push((0, m.clone()));
    }

    let batch = config.batch_size.min(n);
    let mut stalled = 0;
    let mut iterations = 0;
    let mut grad = vec![0.0; batch * k];
    let mut delta = vec![0.0; batch * k];
    for t in 0..config.max_iterations {
        let eta = config.step_size / (1.0 + t as f64 * config.step_decay);
        let mut rows: Vec<usize> = index::sample(&mut rng, n, batch).into_vec();
        rows.sort_unstable();

        let mut scale: f64 = 0.0;
        for (b, &i) in rows.iter().enumerate() {
            let g = &mut grad[b * k..(b + 1) * k];
            gradient_row(
                &parts,
                m.row(i),
                &gm[i * k..(i + 1) * k],
                config.entropy_weight,
                config.membership_floor,
                g,
            );
            tangent_cone(m.row(i), g);
            scale = g.iter().fold(scale, |s, v| s.max(v.abs()));
        }
        if !scale.is_finite() {
            return Err(Error::Divergence { iteration: t + 1 });
        }
        if scale > 0.0 {
            for (b, &i) in rows.iter().enumerate() {
                let old = m.row(i);
                let stepped: Vec<f64> = old
                    .iter()
                    .zip(&grad[b * k..(b + 1) * k])
                    .map(|(x, g)| x - eta * g / scale)
                    .collect();
                let new = project_simplex(&stepped);
                for c in 0..k {
                    delta[b * k + c] = new[c] - old[c];
                }
                m.values[i * k..(i + 1) * k].copy_from_slice(&new);
            }
            // GM += G[:, rows] · Δ over the rows that moved
            let moved: Vec<(usize, &[f64])> = rows
                .iter()
                .enumerate()
                .map(|(b, &i)| (i, &delta[b * k..(b + 1) * k]))
                .filter(|(_, d)| d.iter().any(|&v| v != 0.0))
                .collect();
            // G is symmetric, so column i is read as the contiguous row i
            const BLOCK: usize = 256;
            if !moved.is_empty() {
                gm.par_chunks_mut(BLOCK * k).enumerate().for_each(|(blk, acc)| {
                    let j0 = blk * BLOCK;
                    for &(i, d) in &moved {
                        let gi = &affinity.row(i)[j0..j0 + acc.len() / k];
                        for (a, g) in acc.chunks_mut(k).zip(gi) {
                            for c in 0..k {
                                a[c] += g * d[c];
                            }
                        }
                    }
                });
            }
        }

        let (new_parts, cost) = objective(&m, &gm)?;
        if !cost.is_finite() {
            return Err(Error::Divergence { iteration: t + 1 });
        }
        parts = new_parts;
        let prev = *trace.last().expect("non-empty");
        trace.push(cost);
        iterations = t + 1;
        if wants_checkpoint(iterations) {
            checkpoints.push((iterations, m.clone()));
        }

        let rel = (cost - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        stalled = if rel < config.tol { stalled + 1 } else { 0 };
        if config.patience > 0 && stalled >= config.patience {
            break;
        }
    }

    if let Some(every) = checkpoint_every.filter(|&e| e > 0) {
        let mut t = (iterations / every + 1) * every;
        while t <= config.max_iterations {
            checkpoints.push((t, m.clone()));
            t += every;
        }
    }

    Ok(ClusterResult {
        memberships: m,
        cost_trace: trace,
        iterations,
        sigma: affinity.sigma,
        checkpoints,
    })
}
