//! Training loops for the three regimes and the optimizer they share.
//!
//! * `simple`: every batch updates extractor and classifier on real clouds.
//! * `adversarial`: each real batch is followed by its own attacked copy,
//!   generated against the parameters as they are after the real update.
//! * `defense`: like `adversarial`, but each substep also trains the
//!   discriminator on detached latents and pushes the extractor to make every
//!   latent look real to it.

mod optim;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use optim::{lr_schedule, Adam};

use crate::attack::{fgsm, AttackConfig};
use crate::autodiff::{Tape, Tensor};
use crate::data::{stack_points, DatasetSplit, PointCloud};
use crate::error::{Error, Result};
use crate::fmt::fmt17;
use crate::model::{Group, ModelBundle};
use crate::rng::{self, Stream};

/// Discriminator label for latents of unattacked clouds.
pub const REAL: usize = 0;
/// Discriminator label for latents of attacked clouds.
pub const ADVERSARIAL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Simple,
    Adversarial,
    Defense,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Simple, Regime::Adversarial, Regime::Defense];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Simple => "simple",
            Regime::Adversarial => "adversarial",
            Regime::Defense => "defense",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown regime {s:?} (expected simple, adversarial or defense)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub decay_gamma: f64,
    pub decay_every: usize,
    pub attack: AttackConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Simple,
            epochs: 40,
            batch_size: 16,
            lr0: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            decay_gamma: 0.5,
            decay_every: 20,
            attack: AttackConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) {
            return Err(Error::config("adam betas must lie in (0, 1)"));
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::config("adam_eps must be > 0"));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(Error::config(format!(
                "decay_gamma must lie in (0, 1], got {}",
                self.decay_gamma
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every must be positive"));
        }
        self.attack.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.lr0, epoch, self.decay_gamma, self.decay_every)
    }

    /// One optimizer state shared by every loss of the run.
    pub fn optimizer(&self, bundle: &ModelBundle) -> Adam {
        Adam::new(bundle, self.adam_beta1, self.adam_beta2, self.adam_eps)
    }
}

/// Per-epoch averages. Fields that a regime does not produce are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_cls_real: f64,
    pub loss_cls_adv: Option<f64>,
    pub loss_dis: Option<f64>,
    pub loss_feat: Option<f64>,
    pub acc_real: f64,
    pub acc_adv: Option<f64>,
    /// Discriminator accuracy over real and attacked latents (defense only).
    pub dis_acc: Option<f64>,
    /// Mean discriminator probability of "real" on attacked latents.
    pub dis_real_prob_adv: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,loss_cls_real,loss_cls_adv,loss_dis,loss_feat,acc_real,acc_adv";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            fmt17(self.lr),
            fmt17(self.loss_cls_real),
            opt(self.loss_cls_adv),
            opt(self.loss_dis),
            opt(self.loss_feat),
            fmt17(self.acc_real),
            opt(self.acc_adv)
        )
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

/// Where in a run a step happens, for divergence reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepAt {
    pub epoch: usize,
    pub batch: usize,
}

impl StepAt {
    fn check(self, value: f64, what: &'static str) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged {
                epoch: self.epoch,
                batch: self.batch,
                what,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsStats {
    pub loss: f64,
    pub correct: usize,
}

fn count_correct(log_probs: &Tensor, labels: &[usize]) -> usize {
    let c = log_probs.shape()[1];
    log_probs
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| crate::model::top_k(row, 1)[0] == y)
        .count()
}

/// One `L_cls` step on extractor and classifier.
pub fn classification_step(
    bundle: &mut ModelBundle,
    opt: &mut Adam,
    batch: &Tensor,
    labels: &[usize],
    lr: f64,
    at: StepAt,
) -> Result<ClsStats> {
    const SCOPE: [Group; 2] = [Group::Extractor, Group::Classifier];
    bundle.zero_grad();
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, &SCOPE);
    let x = tape.constant(batch.clone());
    let z = bundle.extract(&mut tape, &bound, x)?;
    let lp = bundle.classify_on(&mut tape, &bound, z)?;
    let loss = tape.nll_loss(lp, labels)?;
    let value = tape.value(loss).data()[0];
    at.check(value, "loss_cls")?;
    let correct = count_correct(tape.value(lp), labels);
    tape.backward(loss)?;
    bundle.accumulate_grads(&tape, &bound, &SCOPE);
    for g in SCOPE {
        opt.step(bundle, g, lr);
    }
    Ok(ClsStats {
        loss: value,
        correct,
    })
}

/// Which of the three defense losses a substep applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossMask {
    pub cls: bool,
    pub dis: bool,
    pub feat: bool,
}

impl LossMask {
    pub const ALL: LossMask = LossMask {
        cls: true,
        dis: true,
        feat: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefenseStats {
    pub loss_cls: f64,
    pub loss_dis: f64,
    pub loss_feat: f64,
    pub correct: usize,
    /// Latents the discriminator assigned to their true origin.
    pub dis_correct: usize,
    /// Sum over the batch of the discriminator's "real" probability.
    pub real_prob_sum: f64,
}

/// One defense substep on `batch`, whose latents carry discriminator label
/// `origin`. A single forward pass feeds all three losses; `L_dis` sees a
/// detached copy of the latent. Steps run in the order cls, dis, feat.
#[allow(clippy::too_many_arguments)]
pub fn defense_step(
    bundle: &mut ModelBundle,
    opt: &mut Adam,
    batch: &Tensor,
    labels: &[usize],
    origin: usize,
    lr: f64,
    mask: LossMask,
    at: StepAt,
) -> Result<DefenseStats> {
    let b = labels.len();
    bundle.zero_grad();
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, &Group::ALL);
    let x = tape.constant(batch.clone());
    let z = bundle.extract(&mut tape, &bound, x)?;
    let lp = bundle.classify_on(&mut tape, &bound, z)?;
    let l_cls = tape.nll_loss(lp, labels)?;

    let z_detached = tape.detach(z);
    let d_detached = bundle.discriminator_logits(&mut tape, &bound, z_detached)?;
    let l_dis = tape.cross_entropy(d_detached, &vec![origin; b])?;

    let d_attached = bundle.discriminator_logits(&mut tape, &bound, z)?;
    let l_feat = tape.cross_entropy(d_attached, &vec![REAL; b])?;

    let scalar = |tape: &Tape, v| tape.value(v).data()[0];
    let stats = {
        let probs = tape.softmax(d_detached)?;
        let p = tape.value(probs).data();
        let dis_correct = p
            .chunks(2)
            .filter(|row| usize::from(row[1] > row[0]) == origin)
            .count();
        DefenseStats {
            loss_cls: scalar(&tape, l_cls),
            loss_dis: scalar(&tape, l_dis),
            loss_feat: scalar(&tape, l_feat),
            correct: count_correct(tape.value(lp), labels),
            dis_correct,
            real_prob_sum: p.chunks(2).map(|row| row[0]).sum(),
        }
    };
    at.check(stats.loss_cls, "loss_cls")?;
    at.check(stats.loss_dis, "loss_dis")?;
    at.check(stats.loss_feat, "loss_feat")?;

    if mask.cls {
        const SCOPE: [Group; 2] = [Group::Extractor, Group::Classifier];
        tape.backward(l_cls)?;
        bundle.accumulate_grads(&tape, &bound, &SCOPE);
        for g in SCOPE {
            opt.step(bundle, g, lr);
        }
    }
    if mask.dis {
        tape.zero_all_grads();
        bundle.zero_grad();
        tape.backward(l_dis)?;
        bundle.accumulate_grads(&tape, &bound, &[Group::Discriminator]);
        opt.step(bundle, Group::Discriminator, lr);
    }
    if mask.feat {
        tape.zero_all_grads();
        bundle.zero_grad();
        tape.backward(l_feat)?;
        bundle.accumulate_grads(&tape, &bound, &[Group::Extractor]);
        opt.step(bundle, Group::Extractor, lr);
    }
    bundle.zero_grad();
    Ok(stats)
}

#[derive(Default)]
struct Totals {
    seen: usize,
    cls_real: f64,
    cls_adv: f64,
    dis: f64,
    feat: f64,
    correct_real: usize,
    correct_adv: usize,
    dis_correct: usize,
    real_prob_adv: f64,
}

impl Totals {
    fn finish(self, epoch: usize, lr: f64, regime: Regime) -> EpochMetrics {
        let n = self.seen.max(1) as f64;
        let attacked = regime != Regime::Simple;
        let defense = regime == Regime::Defense;
        let when = |cond: bool, v: f64| cond.then_some(v);
        EpochMetrics {
            epoch,
            lr,
            loss_cls_real: self.cls_real / n,
            loss_cls_adv: when(attacked, self.cls_adv / n),
            loss_dis: when(defense, self.dis / (2.0 * n)),
            loss_feat: when(defense, self.feat / (2.0 * n)),
            acc_real: self.correct_real as f64 / n,
            acc_adv: when(attacked, self.correct_adv as f64 / n),
            dis_acc: when(defense, self.dis_correct as f64 / (2.0 * n)),
            dis_real_prob_adv: when(defense, self.real_prob_adv / n),
        }
    }
}

/// Trains `bundle` in place on `train` according to `cfg.regime`, calling
/// `on_epoch` after every epoch.
pub fn train_with(
    bundle: &mut ModelBundle,
    train: &[PointCloud],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &ModelBundle) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(c) = train.iter().find(|c| c.label >= bundle.class_count()) {
        return Err(Error::Index {
            index: c.label,
            len: bundle.class_count(),
        });
    }
    let mut opt = cfg.optimizer(bundle);
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = Vec::with_capacity(train.len());
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.clear();
        order.extend(0..train.len());
        order.shuffle(&mut shuffle);
        let mut totals = Totals::default();

        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let at = StepAt { epoch, batch };
            let members: Vec<&PointCloud> = idx.iter().map(|&i| &train[i]).collect();
            let x = stack_points(&members)?;
            let labels: Vec<usize> = members.iter().map(|c| c.label).collect();
            let b = labels.len() as f64;
            totals.seen += labels.len();

            match cfg.regime {
                Regime::Simple | Regime::Adversarial => {
                    let real = classification_step(bundle, &mut opt, &x, &labels, lr, at)?;
                    totals.cls_real += real.loss * b;
                    totals.correct_real += real.correct;
                    if cfg.regime == Regime::Adversarial {
                        let x_adv = fgsm(bundle, &x, &labels, &cfg.attack)?;
                        let adv = classification_step(bundle, &mut opt, &x_adv, &labels, lr, at)?;
                        totals.cls_adv += adv.loss * b;
                        totals.correct_adv += adv.correct;
                    }
                }
                Regime::Defense => {
                    let mask = LossMask::ALL;
                    let real =
                        defense_step(bundle, &mut opt, &x, &labels, REAL, lr, mask, at)?;
                    let x_adv = fgsm(bundle, &x, &labels, &cfg.attack)?;
                    let adv = defense_step(
                        bundle,
                        &mut opt,
                        &x_adv,
                        &labels,
                        ADVERSARIAL,
                        lr,
                        mask,
                        at,
                    )?;
                    totals.cls_real += real.loss_cls * b;
                    totals.cls_adv += adv.loss_cls * b;
                    totals.dis += (real.loss_dis + adv.loss_dis) * b;
                    totals.feat += (real.loss_feat + adv.loss_feat) * b;
                    totals.correct_real += real.correct;
                    totals.correct_adv += adv.correct;
                    totals.dis_correct += real.dis_correct + adv.dis_correct;
                    totals.real_prob_adv += adv.real_prob_sum;
                }
            }
        }
        let metrics = totals.finish(epoch, lr, cfg.regime);
        on_epoch(&metrics, bundle)?;
        history.push(metrics);
    }
    Ok(history)
}

/// Trains according to `cfg.regime` on the training half of `split`.
pub fn train(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if split.class_count > bundle.class_count() {
        return Err(Error::config(format!(
            "dataset has {} classes, model only {}",
            split.class_count,
            bundle.class_count()
        )));
    }
    train_with(bundle, &split.train, cfg, |_, _| Ok(()))
}

fn require(cfg: &TrainConfig, regime: Regime) -> Result<()> {
    if cfg.regime != regime {
        return Err(Error::config(format!(
            "config regime is {}, expected {regime}",
            cfg.regime
        )));
    }
    Ok(())
}

pub fn train_simple(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    require(cfg, Regime::Simple)?;
    train(bundle, split, cfg)
}

pub fn train_adversarial(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    require(cfg, Regime::Adversarial)?;
    train(bundle, split, cfg)
}

pub fn train_defense(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    require(cfg, Regime::Defense)?;
    train(bundle, split, cfg)
}

#[cfg(test)]
mod tests;
