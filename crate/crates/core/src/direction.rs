//! Preference directions: a logistic-regression hyperplane over PCA
//! coefficients whose unit normal, mapped back through the basis, is the
//! edit direction `v` in `θ_edit = θ + α·v`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::save_adapter;
use crate::archive::{ArchiveBuilder, TensorArchive};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json_atomic};
use crate::linalg::{dot, norm, sym_eig_desc};
use crate::preference::{Label, LabelRule, PreferenceLabelSet};
use crate::reduction::{export_rank1, unflatten, LayoutDescriptor, WeightVector};
use crate::space::W2WSpace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionParams {
    /// L2 penalty on the hyperplane weights (the bias is not penalised).
    pub lambda: f64,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the full gradient norm falls to this value.
    pub grad_tol: f64,
    pub holdout_fraction: f64,
}

impl Default for DirectionParams {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            seed: 0,
            max_iter: 10_000,
            grad_tol: 1e-6,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub train_accuracy: f64,
    /// `None` when no held-out split was requested.
    pub heldout_accuracy: Option<f64>,
    /// Smallest signed distance `y·(v·c + b)` over the training split.
    pub margin: f64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Identifies the space a direction was learned in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceRef {
    pub layout_hash: String,
    pub space_digest: String,
}

impl SpaceRef {
    pub fn of(space: &W2WSpace) -> Self {
        Self {
            layout_hash: space.layout_hash().to_string(),
            space_digest: space.digest(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    /// Unit hyperplane normal in coefficient space.
    pub v_coeff: Vec<f64>,
    /// `Wᵀ · v_coeff`, length D.
    #[serde(skip)]
    pub v_full: Vec<f64>,
    pub bias: f64,
    pub metrics: TrainingMetrics,
    pub user_id: String,
    pub label_rule: LabelRule,
    pub space: SpaceRef,
}

struct Dataset {
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl Dataset {
    fn len(&self) -> usize {
        self.targets.len()
    }
}

fn logistic_loss(z: f64) -> f64 {
    // log(1 + e^{-z}) without overflow
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Objective and gradient; the last parameter is the bias.
fn objective(data: &Dataset, params: &[f64], lambda: f64, grad: &mut [f64]) -> f64 {
    let m = params.len() - 1;
    let n = data.len() as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for (x, &y) in data.features.iter().zip(&data.targets) {
        let z = y * (dot(&params[..m], x) + params[m]);
        loss += logistic_loss(z);
        // d/dz log(1+e^{-z}) = -σ(-z)
        let coef = -y * sigmoid(-z) / n;
        for (g, xi) in grad[..m].iter_mut().zip(x) {
            *g += coef * xi;
        }
        grad[m] += coef;
    }
    let w = &params[..m];
    for (g, wi) in grad[..m].iter_mut().zip(w) {
        *g += lambda * wi;
    }
    loss / n + 0.5 * lambda * dot(w, w)
}

/// Lipschitz constant of the gradient: ¼·λ_max(X̃ᵀX̃/n) + λ, X̃ = [X 1].
fn smoothness(data: &Dataset, lambda: f64) -> Result<f64> {
    let m = data.features[0].len();
    let mut gram = ndarray::Array2::<f64>::zeros((m + 1, m + 1));
    for x in &data.features {
        for i in 0..=m {
            let xi = if i < m { x[i] } else { 1.0 };
            for j in 0..=m {
                let xj = if j < m { x[j] } else { 1.0 };
                gram[[i, j]] += xi * xj;
            }
        }
    }
    gram /= data.len() as f64;
    let top = sym_eig_desc(gram.view())?.values[0];
    Ok(0.25 * top + lambda)
}

struct Fit {
    params: Vec<f64>,
    iterations: usize,
    grad_norm: f64,
    converged: bool,
}

/// Full-batch Nesterov-accelerated gradient descent with adaptive restart,
/// starting from zero. Returns the iterate with the smallest gradient.
fn fit_logistic(data: &Dataset, p: &DirectionParams) -> Result<Fit> {
    let dim = data.features[0].len() + 1;
    let step = 1.0 / smoothness(data, p.lambda)?;
    let mut x = vec![0.0; dim];
    let mut y = x.clone();
    let mut grad = vec![0.0; dim];
    let mut t = 1.0f64;
    let mut prev_loss = objective(data, &x, p.lambda, &mut grad);
    let mut best = Fit {
        params: x.clone(),
        iterations: 0,
        grad_norm: norm(&grad),
        converged: false,
    };
    if best.grad_norm <= p.grad_tol {
        best.converged = true;
        return Ok(best);
    }
    for iter in 1..=p.max_iter {
        objective(data, &y, p.lambda, &mut grad);
        let next: Vec<f64> = y.iter().zip(&grad).map(|(yi, g)| yi - step * g).collect();
        let loss = objective(data, &next, p.lambda, &mut grad);
        let gnorm = norm(&grad);
        if gnorm < best.grad_norm {
            best = Fit {
                params: next.clone(),
                iterations: iter,
                grad_norm: gnorm,
                converged: false,
            };
        }
        if gnorm <= p.grad_tol {
            best.converged = true;
            return Ok(best);
        }
        if loss > prev_loss {
            // restart momentum
            t = 1.0;
            y = next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = next.iter().zip(&x).map(|(n, o)| n + beta * (n - o)).collect();
            t = t_next;
        }
        x = next;
        prev_loss = loss;
    }
    log::warn!(
        "logistic regression stopped at gradient norm {:.3e} after {} iterations",
        best.grad_norm,
        p.max_iter
    );
    Ok(best)
}

fn accuracy(data: &Dataset, v: &[f64], b: f64) -> f64 {
    let correct = data
        .features
        .iter()
        .zip(&data.targets)
        .filter(|(x, &y)| (dot(v, x) + b) * y > 0.0)
        .count();
    correct as f64 / data.len() as f64
}

/// Stratified split. One seeded permutation of the id-sorted items decides
/// the order; within each class the first `round(fraction · n)` items in
/// that order are held out (at least one, never all). Swapping the classes
/// therefore selects the same held-out items.
fn stratified_split(items: &[(String, Vec<f64>, f64)], fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut order: Vec<&(String, Vec<f64>, f64)> = items.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let quota = |class: f64| {
        let n = items.iter().filter(|i| i.2 == class).count();
        if fraction > 0.0 {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        } else {
            0
        }
    };
    let (mut left_pos, mut left_neg) = (quota(1.0), quota(-1.0));
    let mut train = Dataset {
        features: Vec::new(),
        targets: Vec::new(),
    };
    let mut held = Dataset {
        features: Vec::new(),
        targets: Vec::new(),
    };
    for item in order {
        let left = if item.2 > 0.0 { &mut left_pos } else { &mut left_neg };
        let target = if *left > 0 {
            *left -= 1;
            &mut held
        } else {
            &mut train
        };
        target.features.push(item.1.clone());
        target.targets.push(item.2);
    }
    (train, held)
}

/// Learns the preference hyperplane for `labels` over `corpus` projected
/// into `space`.
pub fn train_direction(
    space: &W2WSpace,
    labels: &PreferenceLabelSet,
    corpus: &[WeightVector],
    params: &DirectionParams,
) -> Result<EditDirection> {
    let by_id: HashMap<&str, &WeightVector> = corpus.iter().map(|v| (v.adapter_id.as_str(), v)).collect();
    let mut items = Vec::new();
    for (id, label) in &labels.labels {
        let Some(y) = label.sign() else { continue };
        let theta = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownAdapter(id.clone()))?;
        items.push((id.clone(), space.project(theta)?, y));
    }
    let n_pos = labels.count(Label::Positive);
    let n_neg = labels.count(Label::Negative);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass {
            positives: n_pos,
            negatives: n_neg,
        });
    }
    if n_pos < 2 || n_neg < 2 {
        return Err(Error::TooFewItems {
            needed: 2,
            got: n_pos.min(n_neg),
        });
    }
    if !(0.0..1.0).contains(&params.holdout_fraction) {
        return Err(Error::InvalidInput(format!(
            "holdout fraction {} must lie in [0, 1)",
            params.holdout_fraction
        )));
    }

    let (train, held) = stratified_split(&items, params.holdout_fraction, params.seed);
    let fit = fit_logistic(&train, params)?;
    let m = space.m();
    let w = &fit.params[..m];
    let wn = norm(w);
    if wn == 0.0 {
        return Err(Error::InvalidInput("classifier weights collapsed to zero".into()));
    }
    let mut v_coeff: Vec<f64> = w.iter().map(|x| x / wn).collect();
    let mut bias = fit.params[m] / wn;

    // orientation: positives must score above negatives on average
    let mean_score = |sign: f64| {
        let (sum, count) = train
            .features
            .iter()
            .zip(&train.targets)
            .filter(|(_, &y)| y == sign)
            .fold((0.0, 0usize), |(s, c), (x, _)| (s + dot(&v_coeff, x) + bias, c + 1));
        sum / count as f64
    };
    if mean_score(1.0) <= mean_score(-1.0) {
        log::warn!("classifier normal points towards the negative class; flipping");
        v_coeff.iter_mut().for_each(|x| *x = -*x);
        bias = -bias;
    }

    let margin = train
        .features
        .iter()
        .zip(&train.targets)
        .map(|(x, y)| y * (dot(&v_coeff, x) + bias))
        .fold(f64::INFINITY, f64::min);
    let metrics = TrainingMetrics {
        train_accuracy: accuracy(&train, &v_coeff, bias),
        heldout_accuracy: (held.len() > 0).then(|| accuracy(&held, &v_coeff, bias)),
        margin,
        n_train: train.len(),
        n_heldout: held.len(),
        n_positive: n_pos,
        n_negative: n_neg,
        iterations: fit.iterations,
        grad_norm: fit.grad_norm,
        converged: fit.converged,
    };
    let v_full = space.basis.t().dot(&ndarray::ArrayView1::from(&v_coeff)).to_vec();
    Ok(EditDirection {
        v_coeff,
        v_full,
        bias,
        metrics,
        user_id: labels.user_id.clone(),
        label_rule: labels.rule,
        space: SpaceRef::of(space),
    })
}

impl EditDirection {
    /// Signed classifier score `v·project(θ) + b`.
    pub fn score(&self, space: &W2WSpace, theta: &WeightVector) -> Result<f64> {
        self.check_space(space)?;
        Ok(dot(&self.v_coeff, &space.project(theta)?) + self.bias)
    }

    pub fn check_space(&self, space: &W2WSpace) -> Result<()> {
        if self.space.layout_hash != space.layout_hash() || self.space.space_digest != space.digest() {
            return Err(Error::SpaceMismatch(format!(
                "direction was learned in space {}",
                self.space.space_digest
            )));
        }
        Ok(())
    }

    fn unit_full(&self) -> Vec<f64> {
        let n = norm(&self.v_full);
        self.v_full.iter().map(|x| x / n).collect()
    }

    /// Writes `<path>` (JSON) and the vectors to `<path>` with extension `st`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)?;
        let mut b = ArchiveBuilder::new();
        b.insert_metadata("layout_hash", self.space.layout_hash.clone());
        b.insert_metadata("space_digest", self.space.space_digest.clone());
        b.add_f64("v_coeff", vec![self.v_coeff.len()], &self.v_coeff)?;
        b.add_f64("v_full", vec![self.v_full.len()], &self.v_full)?;
        b.build().write(vectors_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut dir: EditDirection = read_json(path)?;
        let archive = TensorArchive::read(vectors_path(path))?;
        if archive.metadata().get("space_digest") != Some(&dir.space.space_digest) {
            return Err(Error::SpaceMismatch(
                "direction vectors belong to a different space".into(),
            ));
        }
        dir.v_full = archive.tensor_f64("v_full")?;
        dir.v_coeff = archive.tensor_f64("v_coeff")?;
        Ok(dir)
    }
}

pub fn vectors_path(path: &Path) -> PathBuf {
    path.with_extension("st")
}

/// `θ + α·v̂` with `v̂` the unit-normalised full-space direction.
pub fn edit_theta(theta: &WeightVector, dir: &EditDirection, alpha: f64) -> Result<WeightVector> {
    if theta.layout_hash != dir.space.layout_hash {
        return Err(Error::SpaceMismatch(format!(
            "weight vector layout {} differs from direction layout {}",
            theta.layout_hash, dir.space.layout_hash
        )));
    }
    if theta.theta.len() != dir.v_full.len() {
        return Err(Error::DimensionMismatch {
            expected: dir.v_full.len(),
            got: theta.theta.len(),
        });
    }
    let v = dir.unit_full();
    let edited = theta
        .theta
        .iter()
        .zip(&v)
        .map(|(&t, vi)| (t as f64 + alpha * vi) as f32)
        .collect();
    Ok(WeightVector {
        adapter_id: theta.adapter_id.clone(),
        theta: edited,
        layout_hash: theta.layout_hash.clone(),
    })
}

/// File name for an edited adapter, e.g. `foo_alpha_-2.5.safetensors`.
pub fn sweep_file_name(adapter_id: &str, alpha: f64) -> String {
    let safe: String = adapter_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}_alpha_{alpha}.safetensors")
}

/// Edits, re-expands and saves one rank-1 adapter per strength.
pub fn edit_sweep(
    theta: &WeightVector,
    dir: &EditDirection,
    alphas: &[f64],
    layout: &LayoutDescriptor,
    base_model: &str,
    out_dir: &Path,
) -> Result<Vec<(f64, PathBuf)>> {
    if let Some(bad) = alphas.iter().find(|a| !a.is_finite()) {
        return Err(Error::InvalidInput(format!("edit strength {bad} is not finite")));
    }
    let mut written = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let edited = edit_theta(theta, dir, alpha)?;
        let mut reduced = unflatten(&edited, layout)?;
        reduced.base_model = base_model.to_string();
        let mut bundle = export_rank1(&reduced)?;
        bundle.metadata.insert("w2w_edit_alpha".into(), alpha.to_string());
        bundle
            .metadata
            .insert("w2w_space_digest".into(), dir.space.space_digest.clone());
        let path = out_dir.join(sweep_file_name(&theta.adapter_id, alpha));
        save_adapter(&bundle, &path)?;
        written.push((alpha, path));
    }
    Ok(written)
}

/// One independent edit per (direction, strength) pair.
pub fn multi_direction_edit(theta: &WeightVector, dirs: &[EditDirection], alphas: &[f64]) -> Result<Vec<WeightVector>> {
    if dirs.len() != alphas.len() {
        return Err(Error::DimensionMismatch {
            expected: dirs.len(),
            got: alphas.len(),
        });
    }
    if let Some(first) = dirs.first() {
        if let Some(other) = dirs.iter().find(|d| d.space != first.space) {
            return Err(Error::SpaceMismatch(format!(
                "directions for `{}` and `{}` come from different spaces",
                first.user_id, other.user_id
            )));
        }
    }
    dirs.iter().zip(alphas).map(|(d, &a)| edit_theta(theta, d, a)).collect()
}
