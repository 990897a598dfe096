//! Training procedures: plain QR, trimmed QR (TQR), case-specific shifts
//! (RCP) and β-robust QR.
//!
//! Every requested quantile level gets its own independent model. All
//! randomness for a level is drawn from streams of `TrainConfig::seed`, so
//! fitting `{0.25, 0.5, 0.75}` together or one at a time gives the same
//! models, and two methods with the same seed see the same initial
//! parameters and the same mini-batch order.

use std::fmt;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::losses::{self, BetaConfig, QuantileLevel};
use crate::net::{AdamConfig, AdamState, Gradients, LayerSpec, Mlp, Workspace};
use crate::rng::{self, Stream};
use crate::scaler::Scaler;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Qr,
    Tqr,
    Rcp,
    BetaQr,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [
        MethodKind::Qr,
        MethodKind::Tqr,
        MethodKind::Rcp,
        MethodKind::BetaQr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Qr => "qr",
            MethodKind::Tqr => "tqr",
            MethodKind::Rcp => "rcp",
            MethodKind::BetaQr => "beta_qr",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qr" => Ok(MethodKind::Qr),
            "tqr" => Ok(MethodKind::Tqr),
            "rcp" => Ok(MethodKind::Rcp),
            "beta_qr" | "beta-qr" => Ok(MethodKind::BetaQr),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected qr, tqr, rcp or beta_qr)"
            ))),
        }
    }
}

/// How many samples TQR keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trim {
    /// Keep exactly `C` of the `N` training samples.
    Count(usize),
    /// Keep `⌊fraction · N⌋` samples.
    Fraction(f64),
}

impl Trim {
    pub fn resolve(self, n: usize) -> Result<usize> {
        let c = match self {
            Trim::Count(c) => c,
            Trim::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!(
                        "trim fraction must lie in (0, 1], got {f}"
                    )));
                }
                (f * n as f64 + 1e-9).floor() as usize
            }
        };
        if c == 0 {
            return Err(Error::Config("trimming keeps no samples".into()));
        }
        if c > n {
            return Err(Error::Config(format!(
                "trim count {c} exceeds the {n} training samples"
            )));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Qr,
    Tqr {
        trim: Trim,
    },
    /// Alternates `inner_steps` ADAM steps on θ with one proximal-gradient
    /// step on the shifts, `outer_iters` times. Full batch only.
    Rcp {
        lambda: f64,
        gamma_lr: f64,
        outer_iters: usize,
        inner_steps: usize,
    },
    BetaQr {
        beta: f64,
        #[serde(default = "one")]
        sigma: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Method {
    pub fn kind(&self) -> MethodKind {
        match self {
            Method::Qr => MethodKind::Qr,
            Method::Tqr { .. } => MethodKind::Tqr,
            Method::Rcp { .. } => MethodKind::Rcp,
            Method::BetaQr { .. } => MethodKind::BetaQr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alphas: Vec<QuantileLevel>,
    pub method: Method,
    /// Passes over the data (QR, TQR, β-QR). RCP counts outer rounds instead.
    pub epochs: usize,
    /// `None` trains full batch.
    pub batch_size: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop once the per-epoch objective changes by less than this; `0`
    /// disables the check.
    pub convergence_tol: f64,
    /// Z-score features and responses before training.
    pub standardize: bool,
    /// Independent seeded starts per level; the one with the lowest final
    /// training objective is kept.
    #[serde(default = "one_restart")]
    pub restarts: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

/// Learning-rate schedule over epochs (RCP: outer rounds).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · (1 - (e - 1) / E)` in epoch `e` of `E`.
    Linear,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (1.0 - (epoch - 1) as f64 / epochs as f64),
        }
    }
}

fn one_restart() -> usize {
    1
}

impl TrainConfig {
    pub fn new(alphas: &[f64], method: Method) -> Result<Self> {
        Ok(Self {
            alphas: alphas
                .iter()
                .map(|&a| QuantileLevel::new(a))
                .collect::<Result<_>>()?,
            method,
            epochs: 100,
            batch_size: None,
            adam: AdamConfig::default(),
            seed: 0,
            convergence_tol: 1e-8,
            standardize: true,
            restarts: 1,
            lr_schedule: LrSchedule::Constant,
        })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Config(
                "at least one quantile level is required".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config(
                "convergence tolerance must be non-negative".into(),
            ));
        }
        match &self.method {
            Method::Qr => {}
            Method::Tqr { trim } => {
                let c = trim.resolve(n)?;
                let b = self.effective_batch(n);
                if c * b / n == 0 {
                    return Err(Error::Config(format!(
                        "keeping {c} of {n} samples rounds to zero samples per batch of {b}"
                    )));
                }
            }
            Method::Rcp {
                lambda,
                gamma_lr,
                outer_iters,
                inner_steps,
            } => {
                if !(*lambda > 0.0) {
                    return Err(Error::Config(format!(
                        "lambda must be positive, got {lambda}"
                    )));
                }
                if !(*gamma_lr > 0.0 && gamma_lr.is_finite()) {
                    return Err(Error::Config("gamma learning rate must be positive".into()));
                }
                if *outer_iters == 0 || *inner_steps == 0 {
                    return Err(Error::Config(
                        "RCP needs positive outer and inner iteration counts".into(),
                    ));
                }
                if self.batch_size.is_some_and(|b| b < n) {
                    return Err(Error::Config(
                        "RCP trains full batch: case-specific shifts need stable observation indices"
                            .into(),
                    ));
                }
            }
            Method::BetaQr { beta, sigma } => {
                BetaConfig::new(*beta, *sigma)?;
            }
        }
        Ok(())
    }

    fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.map_or(n, |b| b.min(n))
    }
}

/// The `C` smallest errors; ties go to the lower index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimSelection {
    /// Ascending.
    pub indices: Vec<usize>,
    /// Largest kept error.
    pub threshold_error: f64,
}

pub fn select_smallest(errors: &[f64], keep: usize) -> TrimSelection {
    assert!(
        keep >= 1 && keep <= errors.len(),
        "keep must lie in 1..=len"
    );
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
    let mut indices = order[..keep].to_vec();
    let threshold_error = errors[order[keep - 1]];
    indices.sort_unstable();
    TrimSelection {
        indices,
        threshold_error,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Converged { epoch: usize },
}

/// One fitted quantile level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaFit {
    pub alpha: QuantileLevel,
    /// Operates on standardised inputs when `scaler` is not the identity.
    pub model: Mlp,
    pub scaler: Scaler,
    /// Objective before the first update.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Objective after every epoch (RCP: every outer round), in the
    /// training space.
    pub trajectory: Vec<f64>,
    pub stop: StopReason,
    /// TQR: the final `C` smallest-error training rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_indices: Option<Vec<usize>>,
    /// RCP: final shifts, in response units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
    /// RCP: outer rounds whose objective rose by more than 1e-8.
    #[serde(default)]
    pub objective_increases: usize,
    /// Which seeded start produced this model.
    #[serde(default)]
    pub restart: usize,
}

impl AlphaFit {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut buf = Vec::with_capacity(x.len());
        self.scaler.transform_features_into(x, &mut buf);
        Ok(self.scaler.inverse_response(self.model.forward(&buf)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: MethodKind,
    pub architecture: Vec<LayerSpec>,
    pub config: TrainConfig,
    pub fits: Vec<AlphaFit>,
}

impl FitResult {
    pub fn fit_for(&self, alpha: QuantileLevel) -> Option<&AlphaFit> {
        self.fits.iter().find(|f| f.alpha == alpha)
    }
}

/// Called with the model after every parameter update.
pub type StepObserver<'a> = &'a mut dyn FnMut(&Mlp);

/// Trains every level in `cfg.alphas` with `cfg.method`.
pub fn train(data: &Dataset, arch: &[LayerSpec], cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate(data.len())?;
    let fits = cfg
        .alphas
        .iter()
        .map(|&alpha| train_alpha(data, arch, cfg, alpha, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitResult {
        method: cfg.method.kind(),
        architecture: arch.to_vec(),
        config: cfg.clone(),
        fits,
    })
}

fn expect_method(cfg: &TrainConfig, kind: MethodKind) -> Result<()> {
    if cfg.method.kind() != kind {
        return Err(Error::Config(format!(
            "configuration selects {} but {kind} training was requested",
            cfg.method.kind()
        )));
    }
    Ok(())
}

pub fn train_qr(data: &Dataset, arch: &[LayerSpec], cfg: &TrainConfig) -> Result<FitResult> {
    expect_method(cfg, MethodKind::Qr)?;
    train(data, arch, cfg)
}

pub fn train_tqr(data: &Dataset, arch: &[LayerSpec], cfg: &TrainConfig) -> Result<FitResult> {
    expect_method(cfg, MethodKind::Tqr)?;
    train(data, arch, cfg)
}

pub fn train_rcp(data: &Dataset, arch: &[LayerSpec], cfg: &TrainConfig) -> Result<FitResult> {
    expect_method(cfg, MethodKind::Rcp)?;
    train(data, arch, cfg)
}

pub fn train_beta_qr(data: &Dataset, arch: &[LayerSpec], cfg: &TrainConfig) -> Result<FitResult> {
    expect_method(cfg, MethodKind::BetaQr)?;
    train(data, arch, cfg)
}

/// Plain QR on the inlier rows only: the outlier-free target that robust
/// fits are compared against.
pub fn fit_reference(data: &Dataset, arch: &[LayerSpec], cfg: &TrainConfig) -> Result<FitResult> {
    if data.inlier_mask().is_none() {
        return Err(Error::Data("reference fit needs an inlier mask".into()));
    }
    let clean = data.inliers()?;
    if clean.len() < 2 {
        return Err(Error::Data(format!(
            "inlier mask selects {} samples, need at least 2",
            clean.len()
        )));
    }
    let cfg = TrainConfig {
        method: Method::Qr,
        ..cfg.clone()
    };
    cfg.validate(clean.len())?;
    let mask = data.inlier_mask().expect("checked above");
    let fits = cfg
        .alphas
        .iter()
        .map(|&alpha| fit_alpha(data, arch, &cfg, alpha, None, Some(mask)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitResult {
        method: MethodKind::Qr,
        architecture: arch.to_vec(),
        config: cfg,
        fits,
    })
}

/// Trains a single level. `observer` sees the model after every update
/// (in the standardised space when standardisation is on).
pub fn train_alpha(
    data: &Dataset,
    arch: &[LayerSpec],
    cfg: &TrainConfig,
    alpha: QuantileLevel,
    observer: Option<StepObserver<'_>>,
) -> Result<AlphaFit> {
    cfg.validate(data.len())?;
    fit_alpha(data, arch, cfg, alpha, observer, None)
}

/// With `active`, rows flagged false are skipped everywhere while the row
/// order and batch boundaries stay those of the full data, so the run is
/// paired with an unmasked run on the same seed.
fn fit_alpha(
    data: &Dataset,
    arch: &[LayerSpec],
    cfg: &TrainConfig,
    alpha: QuantileLevel,
    observer: Option<StepObserver<'_>>,
    active: Option<&[bool]>,
) -> Result<AlphaFit> {
    if arch.first().map(|l| l.input_dim) != Some(data.n_features()) {
        return Err(Error::Dimension(format!(
            "architecture expects {:?} inputs, data has {} features",
            arch.first().map(|l| l.input_dim),
            data.n_features()
        )));
    }
    let scaler = if cfg.standardize {
        match active {
            Some(_) => Scaler::fit(&data.inliers()?),
            None => Scaler::fit(data),
        }
    } else {
        Scaler::identity(data.n_features())
    };
    let scaled = scaler.transform(data);
    let mut observer = observer;
    let mut best: Option<(usize, Mlp, Outcome)> = None;
    for k in 0..cfg.restarts {
        let seed = rng::restart_seed(cfg.seed, k);
        let obs = observer.as_mut().map(|o| &mut **o as &mut dyn FnMut(&Mlp));
        let mut run = Run::new(&scaled, arch, cfg, seed, alpha, obs)?;
        run.active = active;
        let outcome = match &cfg.method {
            Method::Qr => run.descend(Objective::Pinball)?,
            Method::BetaQr { beta, sigma } => {
                run.descend(Objective::Beta(BetaConfig::new(*beta, *sigma)?))?
            }
            Method::Tqr { trim } => run.trimmed(trim.resolve(data.len())?)?,
            Method::Rcp {
                lambda,
                gamma_lr,
                outer_iters,
                inner_steps,
            } => run.case_specific(*lambda, *gamma_lr, *outer_iters, *inner_steps)?,
        };
        let better = best
            .as_ref()
            .is_none_or(|(_, _, b)| outcome.final_loss() < b.final_loss());
        if better {
            best = Some((k, run.model, outcome));
        }
    }
    let (restart, model, outcome) = best.expect("at least one restart");
    Ok(AlphaFit {
        alpha,
        model,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss(),
        trajectory: outcome.trajectory,
        stop: outcome.stop,
        kept_indices: outcome.kept_indices,
        gammas: outcome
            .gammas
            .map(|g| g.into_iter().map(|v| v * scaler.response_std).collect()),
        objective_increases: outcome.objective_increases,
        restart,
        scaler,
    })
}

#[derive(Debug, Clone, Copy)]
enum Objective {
    Pinball,
    Beta(BetaConfig),
}

impl Objective {
    #[inline]
    fn loss(self, r: f64, alpha: QuantileLevel) -> f64 {
        match self {
            Objective::Pinball => losses::pinball(r, alpha),
            Objective::Beta(cfg) => losses::beta_pinball(r, alpha, cfg),
        }
    }

    #[inline]
    fn dr(self, r: f64, alpha: QuantileLevel) -> f64 {
        match self {
            Objective::Pinball => losses::pinball_dr(r, alpha),
            Objective::Beta(cfg) => losses::beta_pinball_dr(r, alpha, cfg),
        }
    }
}

struct Outcome {
    initial_loss: f64,
    trajectory: Vec<f64>,
    stop: StopReason,
    kept_indices: Option<Vec<usize>>,
    gammas: Option<Vec<f64>>,
    objective_increases: usize,
}

impl Outcome {
    fn final_loss(&self) -> f64 {
        *self.trajectory.last().unwrap_or(&self.initial_loss)
    }

    fn plain(initial_loss: f64, trajectory: Vec<f64>, stop: StopReason) -> Self {
        Self {
            initial_loss,
            trajectory,
            stop,
            kept_indices: None,
            gammas: None,
            objective_increases: 0,
        }
    }
}

struct Run<'a, 'o> {
    data: &'a Dataset,
    seed: u64,
    cfg: &'a TrainConfig,
    alpha: QuantileLevel,
    model: Mlp,
    adam: AdamState,
    grads: Gradients,
    ws: Workspace,
    order: Vec<usize>,
    shuffle: rand_chacha::ChaCha8Rng,
    observer: Option<StepObserver<'o>>,
    active: Option<&'a [bool]>,
}

impl<'a, 'o> Run<'a, 'o> {
    fn new(
        data: &'a Dataset,
        arch: &[LayerSpec],
        cfg: &'a TrainConfig,
        seed: u64,
        alpha: QuantileLevel,
        observer: Option<StepObserver<'o>>,
    ) -> Result<Self> {
        let model = Mlp::new(arch, seed)?;
        Ok(Self {
            data,
            seed,
            cfg,
            alpha,
            adam: AdamState::new(&model, cfg.adam),
            grads: Gradients::zeros_like(&model),
            model,
            ws: Workspace::default(),
            order: (0..data.len()).collect(),
            shuffle: rng::stream(seed, Stream::Shuffle),
            observer,
            active: None,
        })
    }

    fn residual(&self, i: usize) -> Result<f64> {
        Ok(self.data.responses()[i] - self.model.forward(self.data.row(i))?)
    }

    fn residuals(&self) -> Result<Vec<f64>> {
        (0..self.data.len()).map(|i| self.residual(i)).collect()
    }

    /// Mini-batches for the next epoch, as index ranges into `self.order`.
    fn next_epoch(&mut self) -> Vec<std::ops::Range<usize>> {
        let n = self.data.len();
        let b = self.cfg.effective_batch(n);
        if b < n {
            self.order.shuffle(&mut self.shuffle);
        }
        (0..n).step_by(b).map(|s| s..(s + b).min(n)).collect()
    }

    /// ADAM step on the mean of `loss_dr` over `rows`, where `loss_dr` maps
    /// (row, residual) to dℓ/dr.
    fn step_on(
        &mut self,
        rows: &[usize],
        loss_dr: impl Fn(usize, f64) -> f64,
        epoch: usize,
    ) -> Result<()> {
        self.grads.fill_zero();
        let scale = -1.0 / rows.len() as f64;
        for &i in rows {
            let pred = self.model.forward_train(self.data.row(i), &mut self.ws)?;
            let r = self.data.responses()[i] - pred;
            let upstream = scale * loss_dr(i, r);
            if upstream != 0.0 {
                self.model
                    .backward_into(&mut self.ws, upstream, &mut self.grads);
            }
        }
        self.adam
            .step(&mut self.model, &self.grads)
            .map_err(|e| match e {
                Error::NonFiniteGradient { index } => Error::Numerical {
                    epoch,
                    message: format!("non-finite gradient at parameter {index}"),
                },
                other => other,
            })?;
        if let Some(obs) = self.observer.as_mut() {
            obs(&self.model);
        }
        Ok(())
    }

    fn check(value: f64, epoch: usize) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Numerical {
                epoch,
                message: format!("objective became {value}"),
            })
        }
    }

    fn converged(&self, trajectory: &[f64]) -> bool {
        let tol = self.cfg.convergence_tol;
        match trajectory {
            [.., prev, last] => tol > 0.0 && (last - prev).abs() < tol,
            _ => false,
        }
    }

    fn schedule(&mut self, epoch: usize, epochs: usize) {
        self.adam.config.learning_rate =
            self.cfg
                .lr_schedule
                .rate(self.cfg.adam.learning_rate, epoch, epochs);
    }

    fn is_active(&self, i: usize) -> bool {
        self.active.is_none_or(|m| m[i])
    }

    fn mean_loss(&self, objective: Objective) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in (0..self.data.len()).filter(|&i| self.is_active(i)) {
            sum += objective.loss(self.residual(i)?, self.alpha);
            count += 1;
        }
        Ok(sum / count as f64)
    }

    fn descend(&mut self, objective: Objective) -> Result<Outcome> {
        let alpha = self.alpha;
        let initial = Self::check(self.mean_loss(objective)?, 0)?;
        let mut trajectory = Vec::with_capacity(self.cfg.epochs);
        for epoch in 1..=self.cfg.epochs {
            self.schedule(epoch, self.cfg.epochs);
            for range in self.next_epoch() {
                let rows: Vec<usize> = self.order[range]
                    .iter()
                    .copied()
                    .filter(|&i| self.is_active(i))
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                self.step_on(&rows, |_, r| objective.dr(r, alpha), epoch)?;
            }
            trajectory.push(Self::check(self.mean_loss(objective)?, epoch)?);
            if self.converged(&trajectory) {
                return Ok(Outcome::plain(
                    initial,
                    trajectory,
                    StopReason::Converged { epoch },
                ));
            }
        }
        Ok(Outcome::plain(initial, trajectory, StopReason::Budget))
    }

    /// Mean pinball error over the `keep` smallest-error rows of the full set.
    fn trimmed_loss(&self, keep: usize) -> Result<(f64, TrimSelection)> {
        let errors: Vec<f64> = self
            .residuals()?
            .into_iter()
            .map(|r| losses::pinball(r, self.alpha))
            .collect();
        let sel = select_smallest(&errors, keep);
        let loss = sel.indices.iter().map(|&i| errors[i]).sum::<f64>() / keep as f64;
        Ok((loss, sel))
    }

    fn trimmed(&mut self, keep: usize) -> Result<Outcome> {
        let n = self.data.len();
        let alpha = self.alpha;
        let mut trim_rng = rng::stream(self.seed, Stream::Trim);
        let (initial, _) = self.trimmed_loss(keep)?;
        let initial = Self::check(initial, 0)?;
        let mut trajectory = Vec::with_capacity(self.cfg.epochs);
        let mut first = true;
        let mut stop = StopReason::Budget;
        for epoch in 1..=self.cfg.epochs {
            self.schedule(epoch, self.cfg.epochs);
            for range in self.next_epoch() {
                let batch = self.order[range].to_vec();
                let k = (keep * batch.len() / n).max(1);
                let rows: Vec<usize> = if first {
                    // start from a random subset
                    first = false;
                    let mut picked: Vec<usize> = index::sample(&mut trim_rng, batch.len(), k)
                        .into_iter()
                        .map(|j| batch[j])
                        .collect();
                    picked.sort_unstable();
                    picked
                } else {
                    let errors = batch
                        .iter()
                        .map(|&i| Ok(losses::pinball(self.residual(i)?, alpha)))
                        .collect::<Result<Vec<_>>>()?;
                    select_smallest(&errors, k)
                        .indices
                        .into_iter()
                        .map(|j| batch[j])
                        .collect()
                };
                self.step_on(&rows, |_, r| losses::pinball_dr(r, alpha), epoch)?;
            }
            let (loss, _) = self.trimmed_loss(keep)?;
            trajectory.push(Self::check(loss, epoch)?);
            if self.converged(&trajectory) {
                stop = StopReason::Converged { epoch };
                break;
            }
        }
        let (_, selection) = self.trimmed_loss(keep)?;
        Ok(Outcome {
            kept_indices: Some(selection.indices),
            ..Outcome::plain(initial, trajectory, stop)
        })
    }

    fn case_specific(
        &mut self,
        lambda: f64,
        gamma_lr: f64,
        outer_iters: usize,
        inner_steps: usize,
    ) -> Result<Outcome> {
        let n = self.data.len();
        let alpha = self.alpha;
        let all: Vec<usize> = (0..n).collect();
        let mut gammas = vec![0.0; n];
        let objective = |run: &Self, gammas: &[f64]| -> Result<f64> {
            let r = run.residuals()?;
            let fit: f64 = r
                .iter()
                .zip(gammas)
                .map(|(&r, &g)| losses::pinball(r - g, alpha))
                .sum();
            let penalty: f64 = gammas.iter().map(|g| g.abs()).sum();
            Ok((fit + lambda * penalty) / n as f64)
        };
        let initial = Self::check(objective(self, &gammas)?, 0)?;
        let mut trajectory = Vec::with_capacity(outer_iters);
        let mut increases = 0;
        let mut stop = StopReason::Budget;
        let mut previous = initial;
        for round in 1..=outer_iters {
            self.schedule(round, outer_iters);
            for _ in 0..inner_steps {
                let g = &gammas;
                self.step_on(&all, |i, r| losses::pinball_dr(r - g[i], alpha), round)?;
            }
            for (i, gamma) in gammas.iter_mut().enumerate() {
                let r = self.data.responses()[i] - self.model.forward(self.data.row(i))?;
                // ∂/∂γ ρ(r - γ) = -ρ'(r - γ)
                let moved = *gamma + gamma_lr * losses::pinball_dr(r - *gamma, alpha);
                *gamma = losses::shrink(moved, lambda * gamma_lr);
            }
            let value = Self::check(objective(self, &gammas)?, round)?;
            if value > previous + 1e-8 {
                increases += 1;
            }
            previous = value;
            trajectory.push(value);
            if self.converged(&trajectory) {
                stop = StopReason::Converged { epoch: round };
                break;
            }
        }
        Ok(Outcome {
            gammas: Some(gammas),
            objective_increases: increases,
            ..Outcome::plain(initial, trajectory, stop)
        })
    }
}
