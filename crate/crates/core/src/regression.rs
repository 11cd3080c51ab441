//! Kernel ridge regression in dual form, per-cluster ensembles, and fuzzy
//! fusion of ensemble predictions.
//!
//! Inputs are standardized per feature on the training set, then augmented
//! with a constant 1 column. Targets are centred and scaled, so a query far
//! from every training point predicts the training mean.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::clustering::{median, Normalization};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// `exp(-|a - b|² / (2 width²))`
    Gaussian { width: f64 },
    /// `a · b`
    Linear,
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Gaussian { width } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                (-d2 / (2.0 * width * width)).exp()
            }
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionParams {
    /// Ridge weight μ.
    pub ridge: f64,
    pub kernel: KernelKind,
    /// Gaussian width; `None` uses the median pairwise training distance.
    pub kernel_width: Option<f64>,
    /// Standardize features and centre/scale targets.
    pub standardize: bool,
}

impl Default for RegressionParams {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            kernel: KernelKind::Gaussian,
            kernel_width: None,
            standardize: true,
        }
    }
}

impl RegressionParams {
    pub fn with_ridge(self, ridge: f64) -> Self {
        Self { ridge, ..self }
    }
}

/// Training rows with their targets and the pixels they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub pixels: Vec<usize>,
}

impl TrainingSet {
    pub fn new(features: Vec<Vec<f64>>, targets: Vec<f64>, pixels: Vec<usize>) -> Result<Self> {
        if features.len() != targets.len() || features.len() != pixels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows, {} targets, {} pixel indices",
                features.len(),
                targets.len(),
                pixels.len()
            )));
        }
        let d = features.first().map_or(0, Vec::len);
        if features.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged training features".into()));
        }
        if features.iter().flatten().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite training value".into()));
        }
        Ok(Self {
            features,
            targets,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Rows at the given positions.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: rows.iter().map(|&r| self.features[r].clone()).collect(),
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
            pixels: rows.iter().map(|&r| self.pixels[r]).collect(),
        }
    }
}

/// Appends a constant 1 column.
pub fn augment(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|row| {
            let mut r = Vec::with_capacity(row.len() + 1);
            r.extend_from_slice(row);
            r.push(1.0);
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel {
    kernel: Kernel,
    ridge: f64,
    dim: usize,
    feature_norm: Vec<Normalization>,
    target_norm: Normalization,
    /// Standardized, augmented training inputs.
    inputs: Vec<Vec<f64>>,
    dual: Vec<f64>,
}

impl KernelModel {
    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn dual_coefficients(&self) -> &[f64] {
        &self.dual
    }

    pub fn training_inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn training_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn target_normalization(&self) -> Normalization {
        self.target_norm
    }

    /// Standardized and augmented representation of a raw input.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Domain(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.dim
            )));
        }
        let mut t: Vec<f64> = x.iter().zip(&self.feature_norm).map(|(v, n)| n.apply(*v)).collect();
        t.push(1.0);
        Ok(t)
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let t = self.transform(x)?;
        let s: f64 = self
            .inputs
            .iter()
            .zip(&self.dual)
            .map(|(xa, a)| a * self.kernel.eval(xa, &t))
            .sum();
        Ok(self.target_norm.invert(s))
    }

    /// Gram matrix of the training inputs.
    pub fn gram(&self) -> DMatrix<f64> {
        gram_matrix(&self.kernel, &self.inputs)
    }

    /// Explicit weights `(μ I + Φ Φᵀ)⁻¹ Φ y` for a linear-kernel model, in the
    /// standardized, augmented input space (targets normalized).
    pub fn primal_weights(&self, train: &TrainingSet) -> Result<Vec<f64>> {
        if self.kernel != Kernel::Linear {
            return Err(Error::Domain("primal weights exist only for the linear kernel".into()));
        }
        let dims = self.dim + 1;
        let m = self.inputs.len();
        let phi = DMatrix::from_fn(dims, m, |r, c| self.inputs[c][r]);
        let y = DVector::from_iterator(m, train.targets.iter().map(|&v| self.target_norm.apply(v)));
        let system = DMatrix::identity(dims, dims) * self.ridge + &phi * phi.transpose();
        let rhs = &phi * y;
        let w = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::IllConditioned("singular primal system".into()))?;
        Ok(w.iter().copied().collect())
    }

    /// Prediction through explicit linear weights.
    pub fn predict_primal(&self, weights: &[f64], x: &[f64]) -> Result<f64> {
        let t = self.transform(x)?;
        Ok(self.target_norm.invert(t.iter().zip(weights).map(|(a, b)| a * b).sum()))
    }
}

fn gram_matrix(kernel: &Kernel, inputs: &[Vec<f64>]) -> DMatrix<f64> {
    let m = inputs.len();
    let mut g = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = kernel.eval(&inputs[a], &inputs[b]);
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    g
}

fn median_distance(inputs: &[Vec<f64>]) -> Option<f64> {
    let mut d = Vec::new();
    for (a, xa) in inputs.iter().enumerate() {
        for xb in &inputs[a + 1..] {
            d.push(xa.iter().zip(xb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
        }
    }
    median(&mut d).filter(|&m| m > 0.0)
}

/// Solves `(μ I + K) α = y` on the standardized training set.
pub fn fit(train: &TrainingSet, params: &RegressionParams) -> Result<KernelModel> {
    if train.is_empty() {
        return Err(Error::EmptyTraining("no training rows".into()));
    }
    if !(params.ridge >= 0.0 && params.ridge.is_finite()) {
        return Err(Error::Domain(format!("ridge weight must be >= 0, got {}", params.ridge)));
    }
    let dim = train.dim();
    let feature_norm: Vec<Normalization> = if params.standardize {
        (0..dim)
            .map(|j| Normalization::standardize(train.features.iter().map(move |r| r[j])))
            .collect()
    } else {
        vec![Normalization::IDENTITY; dim]
    };
    let target_norm = if params.standardize {
        let n = train.len() as f64;
        let mean = train.targets.iter().sum::<f64>() / n;
        let sd = (train.targets.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Normalization {
            offset: mean,
            scale: if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 },
        }
    } else {
        Normalization::IDENTITY
    };
    let standardized: Vec<Vec<f64>> = train
        .features
        .iter()
        .map(|r| r.iter().zip(&feature_norm).map(|(v, n)| n.apply(*v)).collect())
        .collect();
    let inputs = augment(&standardized);

    let kernel = match params.kernel {
        KernelKind::Linear => Kernel::Linear,
        KernelKind::Gaussian => {
            let width = match params.kernel_width {
                Some(w) if w > 0.0 && w.is_finite() => w,
                Some(w) => return Err(Error::Domain(format!("kernel width must be > 0, got {w}"))),
                None => median_distance(&inputs).unwrap_or(1.0),
            };
            Kernel::Gaussian { width }
        }
    };

    let m = inputs.len();
    let mut system = gram_matrix(&kernel, &inputs);
    for a in 0..m {
        system[(a, a)] += params.ridge;
    }
    let y = DVector::from_iterator(m, train.targets.iter().map(|&v| target_norm.apply(v)));
    let chol = system.cholesky().ok_or_else(|| {
        Error::IllConditioned(format!("kernel system with {m} rows is not positive definite"))
    })?;
    let dual = chol.solve(&y);
    if dual.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned("non-finite dual coefficients".into()));
    }

    Ok(KernelModel {
        kernel,
        ridge: params.ridge,
        dim,
        feature_norm,
        target_norm,
        inputs,
        dual: dual.iter().copied().collect(),
    })
}

/// One model slot per cluster; `None` marks a cluster without training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub models: Vec<Option<KernelModel>>,
}

impl Ensemble {
    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn vacancy(&self) -> Vec<bool> {
        self.models.iter().map(Option::is_none).collect()
    }

    /// Per-cluster predictions; vacant slots yield NaN.
    pub fn predict_all(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.models
            .iter()
            .map(|m| m.as_ref().map_or(Ok(f64::NAN), |m| m.predict(x)))
            .collect()
    }

    /// Membership-weighted prediction for one input.
    pub fn predict_fused(&self, memberships: &[f64], x: &[f64]) -> Result<f64> {
        fuse(memberships, &self.predict_all(x)?, &self.vacancy())
    }
}

/// Fits one model per cluster on the training rows hard-assigned to it.
pub fn fit_ensemble(
    train: &TrainingSet,
    labels: &[usize],
    k: usize,
    params: &RegressionParams,
) -> Result<Ensemble> {
    if labels.len() != train.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} training rows",
            labels.len(),
            train.len()
        )));
    }
    let mut models = Vec::with_capacity(k);
    for c in 0..k {
        let rows: Vec<usize> = (0..train.len()).filter(|&r| labels[r] == c).collect();
        if rows.is_empty() {
            models.push(None);
        } else {
            models.push(Some(fit(&train.subset(&rows), params)?));
        }
    }
    if models.iter().all(Option::is_none) {
        return Err(Error::EmptyTraining(format!("all {k} clusters are vacant")));
    }
    Ok(Ensemble { models })
}

/// `Σ_k m_k f_k` over non-vacant clusters, memberships renormalized over
/// that support. A pixel with no membership mass on any non-vacant cluster
/// gets equal weights across them.
pub fn fuse(memberships: &[f64], predictions: &[f64], vacancy: &[bool]) -> Result<f64> {
    if memberships.len() != predictions.len() || memberships.len() != vacancy.len() {
        return Err(Error::Shape("fusion inputs differ in length".into()));
    }
    let live: Vec<usize> = (0..vacancy.len()).filter(|&c| !vacancy[c]).collect();
    if live.is_empty() {
        return Err(Error::EmptyTraining("every cluster is vacant".into()));
    }
    let mass: f64 = live.iter().map(|&c| memberships[c]).sum();
    if mass > 0.0 {
        Ok(live.iter().map(|&c| memberships[c] * predictions[c]).sum::<f64>() / mass)
    } else {
        Ok(live.iter().map(|&c| predictions[c]).sum::<f64>() / live.len() as f64)
    }
}

pub fn format_ensemble(e: &Ensemble) -> String {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let mut s = format!("ensemble {}\n", e.models.len());
    for (c, slot) in e.models.iter().enumerate() {
        let Some(m) = slot else {
            let _ = writeln!(s, "cluster {c} vacant");
            continue;
        };
        let _ = writeln!(s, "cluster {c} model");
        match m.kernel {
            Kernel::Gaussian { width } => {
                let _ = writeln!(s, "kernel gaussian {width}");
            }
            Kernel::Linear => s.push_str("kernel linear\n"),
        }
        let _ = writeln!(s, "ridge {}", m.ridge);
        let _ = writeln!(s, "dims {} {}", m.inputs.len(), m.dim);
        let offsets: Vec<f64> = m.feature_norm.iter().map(|n| n.offset).collect();
        let scales: Vec<f64> = m.feature_norm.iter().map(|n| n.scale).collect();
        let _ = writeln!(s, "feature_offset {}", join(&offsets));
        let _ = writeln!(s, "feature_scale {}", join(&scales));
        let _ = writeln!(s, "target {} {}", m.target_norm.offset, m.target_norm.scale);
        for row in &m.inputs {
            let _ = writeln!(s, "{}", join(row));
        }
        let _ = writeln!(s, "dual {}", join(&m.dual));
    }
    s
}

pub fn parse_ensemble(text: &str) -> Result<Ensemble> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
        lines
            .next()
            .map(|(n, l)| (n, l.split_whitespace().collect()))
            .ok_or(Error::Parse {
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            })
    };
    let perr = |line: usize, message: String| Error::Parse { line, message };
    fn floats(line: usize, fields: &[&str]) -> Result<Vec<f64>> {
        fields
            .iter()
            .map(|f| {
                f.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("invalid number `{f}`"),
                })
            })
            .collect()
    }
    fn expect_tag<'a>(line: usize, fields: &'a [&'a str], tag: &str) -> Result<&'a [&'a str]> {
        match fields.split_first() {
            Some((t, rest)) if *t == tag => Ok(rest),
            _ => Err(Error::Parse {
                line,
                message: format!("expected `{tag}`"),
            }),
        }
    }

    let (n, header) = next("header")?;
    let k: usize = match header[..] {
        ["ensemble", k] => k.parse().map_err(|_| perr(n, "invalid cluster count".into()))?,
        _ => return Err(perr(n, "expected `ensemble K`".into())),
    };
    let mut models = Vec::with_capacity(k);
    for c in 0..k {
        let (n, fields) = next("cluster")?;
        match fields[..] {
            ["cluster", idx, "vacant"] if idx == c.to_string() => {
                models.push(None);
                continue;
            }
            ["cluster", idx, "model"] if idx == c.to_string() => {}
            _ => return Err(perr(n, format!("expected cluster {c} record"))),
        }
        let (n, fields) = next("kernel")?;
        let kernel = match fields[..] {
            ["kernel", "linear"] => Kernel::Linear,
            ["kernel", "gaussian", w] => Kernel::Gaussian {
                width: floats(n, &[w])?[0],
            },
            _ => return Err(perr(n, "invalid kernel record".into())),
        };
        let (n, fields) = next("ridge")?;
        let ridge = floats(n, expect_tag(n, &fields, "ridge")?)?
            .first()
            .copied()
            .ok_or_else(|| perr(n, "missing ridge".into()))?;
        let (n, fields) = next("dims")?;
        let dims = expect_tag(n, &fields, "dims")?;
        let (m, dim): (usize, usize) = match dims {
            [a, b] => (
                a.parse().map_err(|_| perr(n, "invalid row count".into()))?,
                b.parse().map_err(|_| perr(n, "invalid dimension".into()))?,
            ),
            _ => return Err(perr(n, "expected `dims M D`".into())),
        };
        let (n, fields) = next("feature_offset")?;
        let offsets = floats(n, expect_tag(n, &fields, "feature_offset")?)?;
        let (n2, fields) = next("feature_scale")?;
        let scales = floats(n2, expect_tag(n2, &fields, "feature_scale")?)?;
        if offsets.len() != dim || scales.len() != dim {
            return Err(perr(n, format!("expected {dim} normalization values")));
        }
        let (n, fields) = next("target")?;
        let target = floats(n, expect_tag(n, &fields, "target")?)?;
        let [offset, scale] = target[..] else {
            return Err(perr(n, "expected `target offset scale`".into()));
        };
        let mut inputs = Vec::with_capacity(m);
        for _ in 0..m {
            let (n, fields) = next("training input")?;
            let row = floats(n, &fields)?;
            if row.len() != dim + 1 {
                return Err(perr(n, format!("expected {} values, found {}", dim + 1, row.len())));
            }
            inputs.push(row);
        }
        let (n, fields) = next("dual")?;
        let dual = floats(n, expect_tag(n, &fields, "dual")?)?;
        if dual.len() != m {
            return Err(perr(n, format!("expected {m} dual coefficients")));
        }
        models.push(Some(KernelModel {
            kernel,
            ridge,
            dim,
            feature_norm: offsets
                .into_iter()
                .zip(scales)
                .map(|(offset, scale)| Normalization { offset, scale })
                .collect(),
            target_norm: Normalization { offset, scale },
            inputs,
            dual,
        }));
    }
    Ok(Ensemble { models })
}

pub fn write_ensemble(e: &Ensemble, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_ensemble(e)).map_err(|err| Error::io(path, err))
}

pub fn read_ensemble(path: impl AsRef<Path>) -> Result<Ensemble> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ensemble(&text)
}
