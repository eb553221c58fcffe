use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pointshield::attack::{attack_dataset, AttackConfig, AttackMode};
use pointshield::data::{
    load_dataset, save_dataset, split_dataset, DatasetConfig, DatasetSplit, PointCloud, ShapeSpec,
    DEFAULT_SHAPE_VARIATION,
};
use pointshield::embed::{compactness, tsne, EmbeddingConfig};
use pointshield::eval::{
    check_labels, evaluate_set, evaluate_table, EvalReport, RegimeEval, EVAL_CHUNK,
};
use pointshield::experiment::{latents, run_experiment, ExperimentConfig, SeedRun};
use pointshield::fmt::fmt17;
use pointshield::model::{encode, load_checkpoint, ModelBundle, ModelConfig};
use pointshield::train::{metrics_csv, train_with, Regime, TrainConfig};

use crate::args::{
    AttackFlags, DataFlags, EmbedFlags, EvalFlags, OptimFlags, ReportFlags,
    SplitFlags, TrainFlags,
};
use crate::config::Settings;
use crate::error::{CliError, CliResult};
use crate::manifest::RunDir;
use crate::svg;

/// Settings shared by every command.
pub struct Context {
    pub settings: Settings,
    pub seed: u64,
    pub out: PathBuf,
}

fn parse_flag<T>(raw: Option<String>) -> CliResult<Option<T>>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    raw.map(|s| s.parse().map_err(|e: T::Err| CliError::config(e.to_string())))
        .transpose()
}

fn parse_list<T>(raw: &str, what: &str) -> CliResult<Vec<T>>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    let items = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e: T::Err| CliError::config(format!("bad {what} {s:?}: {e}")))
        })
        .collect::<CliResult<Vec<T>>>()?;
    if items.is_empty() {
        return Err(CliError::config(format!("no {what} given")));
    }
    Ok(items)
}

pub fn class_name(label: usize) -> String {
    match ShapeSpec::for_class(label, 0.0, 1) {
        Ok(spec) if spec.variant == 0 => spec.kind.to_string(),
        Ok(spec) => format!("{}-alt", spec.kind),
        Err(_) => format!("class {label}"),
    }
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(class_name).collect()
}

fn dataset_config(s: &mut Settings, f: DataFlags) -> CliResult<DatasetConfig> {
    let d = DatasetConfig::default();
    Ok(DatasetConfig {
        classes: s.value("classes", f.classes, d.classes)?,
        per_class: s.value("per-class", f.per_class, d.per_class)?,
        points: s.value("points", f.points, d.points)?,
        jitter_sigma: s.value("jitter", f.jitter, d.jitter_sigma)?,
        shape_variation: s.value("variation", f.variation, DEFAULT_SHAPE_VARIATION)?,
    })
}

fn attack_config(s: &mut Settings, epsilon: Option<f64>, mode: Option<String>) -> CliResult<AttackConfig> {
    let d = AttackConfig::default();
    let cfg = AttackConfig {
        epsilon: s.value("epsilon", epsilon, d.epsilon)?,
        mode: s.value("attack-mode", parse_flag::<AttackMode>(mode)?, d.mode)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(s: &mut Settings, f: OptimFlags, seed: u64) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        epochs: s.value("epochs", f.epochs, d.epochs)?,
        batch_size: s.value("batch-size", f.batch_size, d.batch_size)?,
        lr0: s.value("lr", f.lr, d.lr0)?,
        adam_beta1: s.value("beta1", f.beta1, d.adam_beta1)?,
        adam_beta2: s.value("beta2", f.beta2, d.adam_beta2)?,
        adam_eps: s.value("adam-eps", f.adam_eps, d.adam_eps)?,
        decay_gamma: s.value("decay-gamma", f.decay_gamma, d.decay_gamma)?,
        decay_every: s.value("decay-every", f.decay_every, d.decay_every)?,
        seed,
        ..d
    })
}

struct LoadedSplit {
    dir: PathBuf,
    split: DatasetSplit,
}

fn load_split(s: &mut Settings, f: SplitFlags, seed: u64) -> CliResult<LoadedSplit> {
    let dir: PathBuf = s.required("data", f.data)?;
    let ratio = s.value("split-ratio", f.split_ratio, 0.8)?;
    let clouds = load_dataset(&dir)?;
    let split = split_dataset(clouds, ratio, seed)?;
    Ok(LoadedSplit { dir, split })
}

fn select(split: &DatasetSplit, which: &str) -> CliResult<Vec<PointCloud>> {
    match which {
        "test" => Ok(split.test.clone()),
        "train" => Ok(split.train.clone()),
        "all" => Ok(split.train.iter().chain(&split.test).cloned().collect()),
        other => Err(CliError::config(format!(
            "unknown set {other:?} (expected test, train or all)"
        ))),
    }
}

fn load_model(path: &Path, classes: usize) -> CliResult<ModelBundle> {
    let model = load_checkpoint(path)?;
    if model.class_count() < classes {
        return Err(pointshield::Error::Contract(format!(
            "checkpoint {} has {} classes, dataset has {classes}",
            path.display(),
            model.class_count()
        ))
        .into());
    }
    Ok(model)
}

pub fn gen_data(mut ctx: Context, f: DataFlags) -> CliResult<()> {
    let cfg = dataset_config(&mut ctx.settings, f)?;
    let mut run = RunDir::create(&ctx.out)?;
    let clouds = run.timed("generate", |_| Ok(pointshield::data::gen_dataset(&cfg, ctx.seed)?))?;
    let paths = run.timed("write", |r| Ok(save_dataset(&clouds, r.root())?))?;
    paths.into_iter().for_each(|p| run.adopt(p));
    eprintln!("wrote {} clouds to {}", clouds.len(), ctx.out.display());
    run.finish("gen-data", ctx.seed, &ctx.settings)?;
    Ok(())
}

pub fn train(mut ctx: Context, f: TrainFlags) -> CliResult<()> {
    let s = &mut ctx.settings;
    let data = load_split(s, f.split, ctx.seed)?;
    let regime: Regime = s.value("regime", parse_flag(f.regime)?, Regime::Simple)?;
    let mut cfg = train_config(s, f.optim, ctx.seed)?;
    cfg.regime = regime;
    cfg.attack = attack_config(s, f.attack.epsilon, f.attack.attack_mode)?;
    let every = s.value("checkpoint-every", f.checkpoint_every, 0usize)?;

    let mut run = RunDir::create(&ctx.out)?;
    run.input("data", &data.dir);
    let mut model = ModelBundle::new(ModelConfig::new(data.split.class_count), ctx.seed)?;
    let mut snapshots = Vec::new();
    let metrics = run.timed("train", |r| {
        let root = r.root().to_path_buf();
        let history = train_with(&mut model, &data.split.train, &cfg, |m, b| {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  acc {:.3}{}",
                m.epoch,
                m.lr,
                m.loss_cls_real,
                m.acc_real,
                m.acc_adv.map(|a| format!("  adv acc {a:.3}")).unwrap_or_default()
            );
            if every > 0 && (m.epoch + 1) % every == 0 {
                let path = root.join(format!("checkpoints/epoch_{:04}.ckpt", m.epoch + 1));
                std::fs::create_dir_all(path.parent().expect("has parent"))
                    .map_err(|e| pointshield::Error::Io { path: path.clone(), source: e })?;
                pointshield::model::save_checkpoint(b, &path)?;
                snapshots.push(path);
            }
            Ok(())
        })?;
        Ok(history)
    })?;
    snapshots.into_iter().for_each(|p| run.adopt(p));
    run.write("model.ckpt", encode(&model))?;
    run.write("metrics.csv", metrics_csv(&metrics))?;
    run.finish("train", ctx.seed, &ctx.settings)?;
    Ok(())
}

pub fn attack(mut ctx: Context, f: AttackFlags) -> CliResult<()> {
    let s = &mut ctx.settings;
    let data = load_split(s, f.split, ctx.seed)?;
    let model_path: PathBuf = s.required("model", f.model)?;
    let cfg = attack_config(s, f.attack.epsilon, f.attack.attack_mode)?;
    let which: String = s.value("set", f.set, "test".to_string())?;
    let clouds = select(&data.split, &which)?;
    let model = load_model(&model_path, data.split.class_count)?;
    check_labels(&clouds, model.class_count())?;

    let mut run = RunDir::create(&ctx.out)?;
    run.input("data", &data.dir);
    run.input("model", &model_path);
    let adversarial = run.timed("attack", |_| Ok(attack_dataset(&model, &clouds, &cfg, EVAL_CHUNK)?))?;
    let paths = run.timed("write", |r| Ok(save_dataset(&adversarial, r.root())?))?;
    paths.into_iter().for_each(|p| run.adopt(p));
    eprintln!("wrote {} adversarial clouds to {}", adversarial.len(), ctx.out.display());
    run.finish("attack", ctx.seed, &ctx.settings)?;
    Ok(())
}

fn write_report(run: &mut RunDir, prefix: &str, report: &EvalReport) -> CliResult<()> {
    run.write(&format!("{prefix}table.txt"), report.to_table())?;
    run.write(&format!("{prefix}eval.csv"), report.to_csv())?;
    run.write(&format!("{prefix}topk.csv"), report.top_k_csv())?;
    run.write(&format!("{prefix}confidence.csv"), report.confidence_csv())?;
    Ok(())
}

pub fn eval(mut ctx: Context, f: EvalFlags) -> CliResult<()> {
    let s = &mut ctx.settings;
    let data = load_split(s, f.split, ctx.seed)?;
    let cfg = attack_config(s, f.attack.epsilon, f.attack.attack_mode)?;
    let which: String = s.value("set", f.set, "test".to_string())?;
    let adversarial_dir: Option<PathBuf> = s.optional("adversarial", f.adversarial)?;
    let specs: Vec<String> = if f.models.is_empty() {
        s.optional::<String>("model", None)?
            .map(|m| parse_list(&m, "model"))
            .transpose()?
            .unwrap_or_default()
    } else {
        s.note("model", &f.models.join(","));
        f.models
    };
    if specs.is_empty() {
        return Err(CliError::config("--model is required"));
    }
    let clouds = select(&data.split, &which)?;

    let mut run = RunDir::create(&ctx.out)?;
    run.input("data", &data.dir);
    let mut models = Vec::new();
    for spec in &specs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned());
                (stem.unwrap_or_else(|| spec.clone()), p)
            }
        };
        let model = load_model(&path, data.split.class_count)?;
        run.input(&format!("model:{name}"), &path);
        models.push((name, model));
    }
    let report = run.timed("evaluate", |r| match &adversarial_dir {
        None => {
            let refs: Vec<(&str, &ModelBundle)> =
                models.iter().map(|(n, m)| (n.as_str(), m)).collect();
            Ok(evaluate_table(&refs, &clouds, &cfg)?)
        }
        Some(dir) => {
            r.input("adversarial", dir);
            let adversarial = load_dataset(dir)?;
            let mut rows = Vec::new();
            for (name, model) in &models {
                check_labels(&clouds, model.class_count())?;
                check_labels(&adversarial, model.class_count())?;
                rows.push(RegimeEval {
                    name: name.clone(),
                    real: evaluate_set(model, &clouds)?,
                    adversarial: evaluate_set(model, &adversarial)?,
                });
            }
            Ok(EvalReport {
                attack: cfg,
                class_count: models[0].1.class_count(),
                rows,
            })
        }
    })?;
    print!("{}", report.to_table());
    write_report(&mut run, "", &report)?;
    run.finish("eval", ctx.seed, &ctx.settings)?;
    Ok(())
}

pub fn embed(mut ctx: Context, f: EmbedFlags) -> CliResult<()> {
    let s = &mut ctx.settings;
    let data = load_split(s, f.split, ctx.seed)?;
    let model_path: PathBuf = s.required("model", f.model)?;
    let attack = AttackConfig {
        epsilon: s.value("epsilon", f.epsilon, 0.0)?,
        mode: s.value("attack-mode", parse_flag::<AttackMode>(f.attack_mode)?, AttackMode::Sign)?,
    };
    attack.validate()?;
    let which: String = s.value("set", f.set, "test".to_string())?;
    let samples = s.value("samples", f.samples, 300usize)?;
    let d = EmbeddingConfig::default();
    let cfg = EmbeddingConfig {
        perplexity: s.value("perplexity", f.perplexity, d.perplexity)?,
        iterations: s.value("iterations", f.iterations, d.iterations)?,
        seed: ctx.seed,
        ..d
    };
    let model = load_model(&model_path, data.split.class_count)?;
    let mut clouds = select(&data.split, &which)?;
    clouds.truncate(samples);
    check_labels(&clouds, model.class_count())?;

    let mut run = RunDir::create(&ctx.out)?;
    run.input("data", &data.dir);
    run.input("model", &model_path);
    if attack.epsilon > 0.0 {
        clouds = run.timed("attack", |_| Ok(attack_dataset(&model, &clouds, &attack, EVAL_CHUNK)?))?;
    }
    let labels: Vec<usize> = clouds.iter().map(|c| c.label).collect();
    let z = run.timed("latents", |_| Ok(latents(&model, &clouds)?))?;
    let embedding = run.timed("tsne", |_| Ok(tsne(&z, &labels, &cfg)?))?;
    let ratio = compactness(&embedding.y, &labels)?;
    let title = format!(
        "t-SNE of {} latents (eps={}), compactness {:.4}",
        clouds.len(),
        attack.epsilon,
        ratio
    );
    run.write("embedding.csv", embedding.to_csv())?;
    run.write("embedding.svg", svg::scatter(&embedding, &title, &class_names(model.class_count())))?;
    let mut kl = String::from("iteration,kl\n");
    for (i, v) in embedding.kl_trace.iter().enumerate() {
        let _ = writeln!(kl, "{i},{}", fmt17(*v));
    }
    run.write("kl.csv", kl)?;
    run.write("compactness.txt", format!("{}\n", fmt17(ratio)))?;
    println!("compactness {ratio:.6}");
    run.finish("embed", ctx.seed, &ctx.settings)?;
    Ok(())
}

/// Mean over seeds of one number per seed.
fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn summary_csv(seeds: &[SeedRun]) -> String {
    let mut out = String::from(
        "seed,regime,epsilon,real_accuracy,adversarial_accuracy,real_median_confidence,adversarial_median_confidence,compactness,seconds\n",
    );
    for s in seeds {
        for r in &s.runs {
            for b in &r.budgets {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{:.1}",
                    s.seed,
                    r.regime,
                    b.epsilon,
                    fmt17(b.eval.real.accuracy),
                    fmt17(b.eval.adversarial.accuracy),
                    fmt17(b.eval.real.confidence_all.median),
                    fmt17(b.eval.adversarial.confidence_all.median),
                    fmt17(r.compactness),
                    r.seconds
                );
            }
        }
    }
    out
}

pub fn summary_text(seeds: &[SeedRun], epsilons: &[f64], regimes: &[Regime]) -> String {
    let mut out = String::new();
    for &eps in epsilons {
        let _ = writeln!(out, "Mean over {} seeds, FGSM eps={eps}", seeds.len());
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>9} {:>11} {:>11} {:>12}",
            "Approach", "Real (%)", "Adv. (%)", "Conf. real", "Conf. adv.", "Compactness"
        );
        for &regime in regimes {
            let runs: Vec<_> = seeds.iter().filter_map(|s| s.regime(regime)).collect();
            let evals: Vec<_> = runs.iter().filter_map(|r| r.at(eps)).collect();
            let _ = writeln!(
                out,
                "{:<12} {:>9.2} {:>9.2} {:>11.4} {:>11.4} {:>12.4}",
                regime.name(),
                100.0 * mean(evals.iter().map(|e| e.real.accuracy)),
                100.0 * mean(evals.iter().map(|e| e.adversarial.accuracy)),
                mean(evals.iter().map(|e| e.real.confidence_all.median)),
                mean(evals.iter().map(|e| e.adversarial.confidence_all.median)),
                mean(runs.iter().map(|r| r.compactness)),
            );
        }
        out.push('\n');
    }
    out
}

pub fn report(mut ctx: Context, f: ReportFlags) -> CliResult<()> {
    let s = &mut ctx.settings;
    let dataset = dataset_config(s, f.data)?;
    let split_ratio = s.value("split-ratio", f.split_ratio, 0.8)?;
    let mut train = train_config(s, f.optim, ctx.seed)?;
    let seeds: Vec<u64> = parse_list(&s.value("seeds", f.seeds, "1,2,3".to_string())?, "seed")?;
    let epsilons: Vec<f64> =
        parse_list(&s.value("epsilons", f.epsilons, "0.1,0.2".to_string())?, "epsilon")?;
    let mode = s.value("attack-mode", parse_flag::<AttackMode>(f.attack_mode)?, AttackMode::Sign)?;
    train.attack = AttackConfig {
        epsilon: epsilons[0],
        mode,
    };
    train.attack.validate()?;
    let d = EmbeddingConfig::default();
    let cfg = ExperimentConfig {
        dataset,
        split_ratio,
        train,
        epsilons: epsilons.clone(),
        embed: EmbeddingConfig {
            perplexity: s.value("perplexity", f.perplexity, d.perplexity)?,
            iterations: s.value("iterations", f.iterations, d.iterations)?,
            ..d
        },
        embed_samples: s.value("samples", f.samples, 300usize)?,
    };

    let mut run = RunDir::create(&ctx.out)?;
    let regimes = Regime::ALL;
    let results = run.timed("experiment", |_| Ok(run_experiment(&cfg, &seeds, &regimes)?))?;
    let names = class_names(cfg.dataset.classes);
    for seed_run in &results {
        let dir = format!("seed_{}", seed_run.seed);
        for r in &seed_run.runs {
            let sub = format!("{dir}/{}", r.regime);
            run.write(&format!("{sub}/model.ckpt"), encode(&r.model))?;
            run.write(&format!("{sub}/metrics.csv"), metrics_csv(&r.metrics))?;
            run.write(&format!("{sub}/embedding.csv"), r.embedding.to_csv())?;
            let title = format!(
                "{} seed {}: adversarial test latents, compactness {:.4}",
                r.regime, seed_run.seed, r.compactness
            );
            run.write(&format!("{sub}/embedding.svg"), svg::scatter(&r.embedding, &title, &names))?;
        }
        for &eps in &epsilons {
            let report = seed_run.report(eps, &cfg.train.attack);
            write_report(&mut run, &format!("{dir}/eps{eps}_"), &report)?;
        }
    }
    let text = summary_text(&results, &epsilons, &regimes);
    print!("{text}");
    run.write("summary.txt", text)?;
    run.write("summary.csv", summary_csv(&results))?;
    run.finish("report", ctx.seed, &ctx.settings)?;
    Ok(())
}
