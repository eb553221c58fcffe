//! End-to-end comparison of the three training regimes.
//!
//! For each seed: generate and split a dataset, train one model per regime
//! from the same initialization, evaluate each against its own adversarial
//! test sets at every budget, and embed the latents of the first budget's
//! adversarial test set. Independent (seed, regime) jobs run on the current
//! rayon pool; results do not depend on the pool size.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::AttackConfig;
use crate::autodiff::Tensor;
use crate::data::{gen_dataset, stack_points, split_dataset, DatasetConfig, DatasetSplit, PointCloud};
use crate::embed::{compactness, tsne, Embedding2D, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport, RegimeEval, EVAL_CHUNK};
use crate::model::{ModelBundle, ModelConfig};
use crate::train::{train, EpochMetrics, Regime, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub split_ratio: f64,
    /// Template for every regime; `regime` and `seed` are overridden.
    pub train: TrainConfig,
    /// Attack budgets to evaluate; the first one also feeds the embedding.
    pub epsilons: Vec<f64>,
    pub embed: EmbeddingConfig,
    /// Cap on the number of adversarial test latents embedded.
    pub embed_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            split_ratio: 0.8,
            train: TrainConfig::default(),
            epsilons: vec![0.1, 0.2],
            embed: EmbeddingConfig::default(),
            embed_samples: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetEval {
    pub epsilon: f64,
    pub eval: RegimeEval,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegimeRun {
    pub regime: Regime,
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
    pub budgets: Vec<BudgetEval>,
    pub embedding: Embedding2D,
    /// Compactness of the embedded adversarial latents.
    pub compactness: f64,
    #[serde(skip)]
    pub model: ModelBundle,
    pub seconds: f64,
}

impl RegimeRun {
    pub fn at(&self, epsilon: f64) -> Option<&RegimeEval> {
        self.budgets.iter().find(|b| b.epsilon == epsilon).map(|b| &b.eval)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub runs: Vec<RegimeRun>,
}

impl SeedRun {
    pub fn regime(&self, regime: Regime) -> Option<&RegimeRun> {
        self.runs.iter().find(|r| r.regime == regime)
    }

    /// Table of every regime at one budget.
    pub fn report(&self, epsilon: f64, attack: &AttackConfig) -> EvalReport {
        EvalReport {
            attack: AttackConfig {
                epsilon,
                mode: attack.mode,
            },
            class_count: self.runs.first().map_or(0, |r| r.model.class_count()),
            rows: self.runs.iter().filter_map(|r| r.at(epsilon).cloned()).collect(),
        }
    }
}

pub fn prepare_split(cfg: &ExperimentConfig, seed: u64) -> Result<DatasetSplit> {
    let clouds = gen_dataset(&cfg.dataset, seed)?;
    split_dataset(clouds, cfg.split_ratio, seed)
}

/// Latent vectors `[n, latent]` of `clouds`.
pub fn latents(bundle: &ModelBundle, clouds: &[PointCloud]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(clouds.len() * bundle.config().latent_dim());
    for chunk in clouds.chunks(EVAL_CHUNK) {
        let members: Vec<&PointCloud> = chunk.iter().collect();
        data.extend_from_slice(bundle.extract_features(&stack_points(&members)?)?.data());
    }
    Tensor::new([clouds.len(), bundle.config().latent_dim()], data)
}

/// Trains and evaluates one regime on an already prepared split.
pub fn run_regime(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    regime: Regime,
    seed: u64,
) -> Result<RegimeRun> {
    let started = Instant::now();
    let train_cfg = TrainConfig {
        regime,
        seed,
        ..cfg.train.clone()
    };
    let mut model = ModelBundle::new(ModelConfig::new(split.class_count), seed)?;
    let metrics = train(&mut model, split, &train_cfg)?;

    let mut budgets = Vec::with_capacity(cfg.epsilons.len());
    let mut embedded = None;
    for &epsilon in &cfg.epsilons {
        let attack = AttackConfig {
            epsilon,
            mode: cfg.train.attack.mode,
        };
        let (eval, adversarial) = evaluate_model(regime.name(), &model, &split.test, &attack)?;
        if embedded.is_none() {
            embedded = Some(adversarial);
        }
        budgets.push(BudgetEval { epsilon, eval });
    }
    let adversarial = embedded.ok_or_else(|| Error::config("no attack budgets configured"))?;
    let take = adversarial.len().min(cfg.embed_samples);
    let z = latents(&model, &adversarial[..take])?;
    let labels: Vec<usize> = adversarial[..take].iter().map(|c| c.label).collect();
    let embed_cfg = EmbeddingConfig {
        seed,
        ..cfg.embed.clone()
    };
    let embedding = tsne(&z, &labels, &embed_cfg)?;
    let compactness = compactness(&embedding.y, &labels)?;
    Ok(RegimeRun {
        regime,
        seed,
        metrics,
        budgets,
        embedding,
        compactness,
        model,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs every regime for every seed.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    regimes: &[Regime],
) -> Result<Vec<SeedRun>> {
    if cfg.epsilons.is_empty() {
        return Err(Error::config("no attack budgets configured"));
    }
    let splits = seeds
        .par_iter()
        .map(|&s| prepare_split(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Regime)> = (0..seeds.len())
        .flat_map(|i| regimes.iter().map(move |&r| (i, r)))
        .collect();
    // longest regimes first so the pool stays busy at the end
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by_key(|&j| std::cmp::Reverse(cost(jobs[j].1)));
    let mut done: Vec<(usize, RegimeRun)> = order
        .into_par_iter()
        .with_max_len(1)
        .map(|j| {
            let (i, regime) = jobs[j];
            run_regime(cfg, &splits[i], regime, seeds[i]).map(|r| (j, r))
        })
        .collect::<Result<_>>()?;
    done.sort_by_key(|(j, _)| *j);
    let mut runs = done.into_iter().map(|(_, r)| r);
    Ok(seeds
        .iter()
        .map(|&seed| SeedRun {
            seed,
            runs: runs.by_ref().take(regimes.len()).collect(),
        })
        .collect())
}

fn cost(regime: Regime) -> u8 {
    match regime {
        Regime::Simple => 1,
        Regime::Adversarial => 3,
        Regime::Defense => 4,
    }
}
