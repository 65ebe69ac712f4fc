use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use cmrl_core::diagnostics;
use cmrl_core::disentangle::format_importance;
use cmrl_core::graph::{self, load_dataset, save_dataset};
use cmrl_core::objectives::LossWeights;
use cmrl_core::train::{self, evaluate, CvReport, Metrics, SweepReport, SWEEP_LEVELS};
use cmrl_core::{checkpoint, bias_of, make_dataset, CmrlModel, PairDataset, PairSample, PredictHead, RunReport, SplitPlan, SyntheticConfig, Task, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CvArgs, EvalArgs, Failure, GenArgs, GradArgs, OodArgs, ReportArgs, SweepArgs, TrainArgs};

type Outcome = Result<(), Failure>;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Everything needed to rerun a command, written beside its outputs.
#[derive(Debug, Serialize, Deserialize)]
struct Resolved<T> {
    command: String,
    data: Option<PathBuf>,
    settings: T,
}

#[derive(Debug, Serialize)]
struct Timing {
    wall_seconds: f64,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(usage)
}

/// `d.json` → `d.config.json`
fn config_beside(file: &Path) -> PathBuf {
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    file.with_file_name(format!("{stem}.config.json"))
}

fn load_data(path: &Path) -> Result<PairDataset, Failure> {
    load_dataset(path).map_err(usage)
}

fn load_train_config(path: Option<&Path>, default: TrainConfig) -> Result<TrainConfig, Failure> {
    match path {
        Some(p) => read_json(p).map_err(usage),
        None => Ok(default),
    }
}

fn write_timing(dir: &Path, started: Instant) -> anyhow::Result<()> {
    write_json(
        &dir.join("timing.json"),
        &Timing {
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

pub fn gen_synthetic(a: GenArgs) -> Outcome {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => read_json(p).map_err(usage)?,
        None => SyntheticConfig::default(),
    };
    if let Some(b) = a.bias {
        cfg.bias = b;
    }
    cfg.validate().map_err(usage)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    let data = make_dataset(&cfg, a.seed).map_err(runtime)?;
    save_dataset(&data.dataset, &a.out).map_err(runtime)?;
    let resolved = Resolved {
        command: "gen-synthetic".into(),
        data: None,
        settings: serde_json::json!({ "seed": a.seed, "synthetic": cfg }),
    };
    write_json(&config_beside(&a.out), &resolved).map_err(runtime)?;
    let realized = bias_of(&data.dataset).map_err(runtime)?;
    println!(
        "wrote {} pairs over {} graphs to {} (bias {realized})",
        data.dataset.len(),
        data.dataset.unique_graphs().len(),
        a.out.display()
    );
    Ok(())
}

fn single_plan(dataset: &PairDataset, cfg: &TrainConfig) -> Result<SplitPlan, Failure> {
    if matches!(cfg.split, train::SplitConfig::Kfold { .. }) {
        return Err(usage(anyhow!("k-fold splits run through the cv command")));
    }
    let mut plans = cfg.split.plans(dataset, cfg.seed).map_err(usage)?;
    Ok(plans.remove(0))
}

pub fn train(a: TrainArgs) -> Outcome {
    let mut cfg = load_train_config(a.config.as_deref(), TrainConfig::default())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.task {
        cfg.task = Some(t);
    }
    if let Some(c) = a.scaffold_c {
        let valid_fraction = match cfg.split {
            train::SplitConfig::Scaffold { valid_fraction, .. } => valid_fraction,
            _ => 0.5,
        };
        cfg.split = train::SplitConfig::Scaffold { c, valid_fraction };
    }
    cfg.validate().map_err(usage)?;
    let dataset = load_data(&a.data)?;
    if let Some(t) = cfg.task.filter(|&t| t != dataset.task) {
        return Err(usage(anyhow!("--task {t} does not match dataset task {}", dataset.task)));
    }
    let plan = single_plan(&dataset, &cfg)?;
    out_dir(&a.out)?;
    let resolved = Resolved {
        command: "train".into(),
        data: Some(a.data.clone()),
        settings: cfg.clone(),
    };
    write_json(&a.out.join("config.json"), &resolved).map_err(runtime)?;
    write_json(&a.out.join("split.json"), &plan).map_err(runtime)?;
    let started = Instant::now();
    let outcome = cmrl_core::train(&dataset, &plan, &cfg).map_err(runtime)?;
    let r = &outcome.report;
    write_train_outputs(&a.out, r, &outcome.model, started).map_err(runtime)?;
    println!(
        "best epoch {} of {}: valid {} {:.5}; test {}",
        r.best_epoch,
        r.epochs.len(),
        Metrics::primary_name(r.task),
        r.valid_at_best.primary(),
        r.test.map_or("n/a".to_string(), |m| format!("{:.5}", m.primary()))
    );
    Ok(())
}

fn write_train_outputs(dir: &Path, r: &RunReport, model: &CmrlModel, started: Instant) -> anyhow::Result<()> {
    write_json(&dir.join("report.json"), r)?;
    let mut losses = create(&dir.join("losses.csv"))?;
    r.write_loss_log(&mut losses)?;
    losses.flush()?;
    let mut metrics = create(&dir.join("metrics.csv"))?;
    r.write_metrics_csv("train", &mut metrics, true)?;
    metrics.flush()?;
    checkpoint::save(&model.params, dir.join("checkpoint.bin"))?;
    write_timing(dir, started)
}

#[derive(Debug, Serialize)]
struct EvalReport {
    n: usize,
    causal: Metrics,
    sup: Metrics,
}

#[derive(Debug, Serialize)]
struct MapDump<'a> {
    pair: &'a str,
    g1: &'a str,
    g2: &'a str,
    rows: Vec<Vec<f64>>,
}

pub fn eval(a: EvalArgs) -> Outcome {
    let resolved: Resolved<TrainConfig> = read_json(&a.run.join("config.json")).map_err(usage)?;
    if resolved.command != "train" {
        return Err(usage(anyhow!("{} was written by {}, not train", a.run.display(), resolved.command)));
    }
    let cfg = resolved.settings;
    let params = checkpoint::load(a.run.join("checkpoint.bin")).map_err(usage)?;
    let dataset = load_data(&a.data)?;
    let mut model = CmrlModel::new(
        cfg.model.clone(),
        dataset.task,
        dataset.feature_width,
        dataset.edge_feature_width,
        cfg.gumbel,
        cfg.seed,
    )
    .map_err(usage)?;
    model
        .params
        .load_values(&params)
        .context("checkpoint does not fit the dataset's feature widths")
        .map_err(usage)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let report = EvalReport {
        n: dataset.len(),
        causal: evaluate(&model, &dataset, &all, PredictHead::Causal, cfg.eval_batch_size).map_err(runtime)?,
        sup: evaluate(&model, &dataset, &all, PredictHead::Sup, cfg.eval_batch_size).map_err(runtime)?,
    };
    println!("{}", serde_json::to_string(&report).map_err(runtime)?);
    let Some(out) = a.out else {
        return Ok(());
    };
    out_dir(&out)?;
    let resolved = Resolved {
        command: "eval".into(),
        data: Some(a.data.clone()),
        settings: serde_json::json!({ "run": a.run, "train": cfg, "dump": a.dump }),
    };
    write_json(&out.join("config.json"), &resolved).map_err(runtime)?;
    write_json(&out.join("eval.json"), &report).map_err(runtime)?;
    if a.dump {
        dump_interpretation(&out, &model, &dataset, cfg.eval_batch_size).map_err(runtime)?;
    }
    Ok(())
}

fn dump_interpretation(dir: &Path, model: &CmrlModel, dataset: &PairDataset, batch_size: usize) -> anyhow::Result<()> {
    let mut importance = create(&dir.join("importance.txt"))?;
    writeln!(importance, "# pair graph_id atom_index p lambda")?;
    let mut maps = Vec::with_capacity(dataset.len());
    for chunk in dataset.pairs.chunks(batch_size) {
        let refs: Vec<&PairSample> = chunk.iter().collect();
        let atoms = model.atom_importance(&refs)?;
        let inter = model.interaction_maps(&refs)?;
        for ((pair, (p, lambda)), m) in chunk.iter().zip(atoms).zip(inter) {
            for line in format_importance(&pair.g1.id, &p, &lambda).lines() {
                writeln!(importance, "{} {line}", pair.id)?;
            }
            let cols = m.shape()[1];
            maps.push(MapDump {
                pair: &pair.id,
                g1: &pair.g1.id,
                g2: &pair.g2.id,
                rows: m.data().chunks(cols.max(1)).map(<[f64]>::to_vec).collect(),
            });
        }
    }
    importance.flush()?;
    write_json(&dir.join("interaction_maps.json"), &maps)
}

pub fn cv(a: CvArgs) -> Outcome {
    let mut cfg = load_train_config(a.config.as_deref(), TrainConfig::default())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.task {
        cfg.task = Some(t);
    }
    let (mut k, mut repeats, valid_fraction) = match cfg.split {
        train::SplitConfig::Kfold { k, repeats, valid_fraction } => (k, repeats, valid_fraction),
        _ => (5, 5, 0.5),
    };
    k = a.k.unwrap_or(k);
    repeats = a.repeats.unwrap_or(repeats);
    cfg.split = train::SplitConfig::Kfold { k, repeats, valid_fraction };
    cfg.validate().map_err(usage)?;
    if k < 2 || repeats == 0 {
        return Err(usage(anyhow!("--k must be at least 2 and --repeats at least 1")));
    }
    let dataset = load_data(&a.data)?;
    if dataset.len() < k {
        return Err(usage(anyhow!("{} pairs cannot fill {k} folds", dataset.len())));
    }
    out_dir(&a.out)?;
    let resolved = Resolved {
        command: "cv".into(),
        data: Some(a.data.clone()),
        settings: cfg.clone(),
    };
    write_json(&a.out.join("config.json"), &resolved).map_err(runtime)?;
    let started = Instant::now();
    let rep = train::cross_validate(&dataset, &cfg, k, repeats, valid_fraction).map_err(runtime)?;
    write_json(&a.out.join("report.json"), &rep).map_err(runtime)?;
    write_cv_metrics(&a.out, &rep).map_err(runtime)?;
    write_timing(&a.out, started).map_err(runtime)?;
    println!("{} runs: {} {:.5} ± {:.5}", rep.runs.len(), rep.metric, rep.mean, rep.std);
    Ok(())
}

fn write_cv_metrics(dir: &Path, rep: &CvReport) -> anyhow::Result<()> {
    let mut w = create(&dir.join("metrics.csv"))?;
    writeln!(w, "run,epoch,split,metric,value")?;
    for r in &rep.runs {
        let m = r.test;
        for (name, v) in [("rmse", m.rmse), ("auroc", m.auroc), ("accuracy", m.accuracy)] {
            if let Some(v) = v {
                writeln!(w, "fold{}_repeat{},{},test,{name},{v}", r.fold, r.repeat, r.best_epoch)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn ood_split(a: OodArgs) -> Outcome {
    let dataset = load_data(&a.data)?;
    let valid_fraction = 0.5;
    let plan = graph::scaffold_ood_split(&dataset, a.scaffold_c, valid_fraction, a.seed).map_err(usage)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    write_json(&a.out, &plan).map_err(runtime)?;
    let resolved = Resolved {
        command: "ood-split".into(),
        data: Some(a.data.clone()),
        settings: serde_json::json!({ "scaffold_c": a.scaffold_c, "valid_fraction": valid_fraction, "seed": a.seed }),
    };
    write_json(&config_beside(&a.out), &resolved).map_err(runtime)?;
    println!("train {} valid {} test {}", plan.train.len(), plan.valid.len(), plan.test.len());
    Ok(())
}

pub fn bias_sweep(a: SweepArgs) -> Outcome {
    let cfg = load_train_config(a.config.as_deref(), train::sweep_config())?;
    cfg.validate().map_err(usage)?;
    let levels = a.levels.unwrap_or_else(|| SWEEP_LEVELS.to_vec());
    if levels.is_empty() || levels.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
        return Err(usage(anyhow!("--levels must be values in (0, 1)")));
    }
    if a.repeats == 0 {
        return Err(usage(anyhow!("--repeats must be at least 1")));
    }
    let seeds: Vec<u64> = (0..a.repeats as u64).map(|i| a.seed + i).collect();
    let data = SyntheticConfig::default();
    out_dir(&a.out)?;
    let resolved = Resolved {
        command: "bias-sweep".into(),
        data: None,
        settings: serde_json::json!({ "levels": levels, "seeds": seeds, "synthetic": data, "train": cfg }),
    };
    write_json(&a.out.join("config.json"), &resolved).map_err(runtime)?;
    let started = Instant::now();
    let rep = train::bias_sweep(&levels, &cfg, &data, &seeds).map_err(runtime)?;
    write_json(&a.out.join("report.json"), &rep).map_err(runtime)?;
    write_sweep_metrics(&a.out, &rep).map_err(runtime)?;
    write_timing(&a.out, started).map_err(runtime)?;
    print_sweep(&rep);
    Ok(())
}

fn write_sweep_metrics(dir: &Path, rep: &SweepReport) -> anyhow::Result<()> {
    let mut w = create(&dir.join("metrics.csv"))?;
    writeln!(w, "run,epoch,split,metric,value")?;
    for c in &rep.cells {
        let run = format!("b{}_seed{}_{:?}", c.bias, c.seed, c.ablation).to_lowercase();
        writeln!(w, "{run},{},test,accuracy,{}", c.best_epoch, c.test_accuracy)?;
        if let Some(auc) = c.test_auroc {
            writeln!(w, "{run},{},test,auroc,{auc}", c.best_epoch)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn print_sweep(rep: &SweepReport) {
    println!("bias  full            no_causal       gap");
    for s in &rep.summary {
        println!(
            "{:<5} {:.4} ± {:.4}  {:.4} ± {:.4}  {:+.4}",
            s.bias, s.full_mean, s.full_std, s.no_causal_mean, s.no_causal_std, s.gap
        );
    }
}

pub fn gradcheck(a: GradArgs) -> Outcome {
    let tasks = match a.task {
        Some(t) => vec![t],
        None => vec![Task::Classification, Task::Regression],
    };
    let weights = LossWeights { lambda1: 0.3, lambda2: 0.7 };
    let mut worst: f64 = 0.0;
    for task in tasks {
        let c = diagnostics::toy_gradcheck(task, weights, a.seed).map_err(runtime)?;
        println!(
            "task={task} max_rel_error={:.3e} worst={} live={}/{}",
            c.max_rel_error, c.worst, c.live, c.checked
        );
        worst = worst.max(c.max_rel_error);
    }
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(runtime(anyhow!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")))
    }
}

#[derive(Debug, Deserialize)]
struct CommandName {
    command: String,
}

pub fn report(a: ReportArgs) -> Outcome {
    let name: CommandName = read_json(&a.out.join("config.json")).map_err(usage)?;
    let path = a.out.join("report.json");
    match name.command.as_str() {
        "train" => {
            let r: RunReport = read_json(&path).map_err(usage)?;
            print_run(&r);
        }
        "cv" => {
            let r: CvReport = read_json(&path).map_err(usage)?;
            for run in &r.runs {
                println!("fold {} repeat {}: {} {:.5} (epoch {})", run.fold, run.repeat, r.metric, run.value, run.best_epoch);
            }
            println!("{} runs: {} {:.5} ± {:.5}", r.runs.len(), r.metric, r.mean, r.std);
        }
        "bias-sweep" => {
            let r: SweepReport = read_json(&path).map_err(usage)?;
            print_sweep(&r);
        }
        other => return Err(usage(anyhow!("{other} writes no report"))),
    }
    Ok(())
}

fn print_run(r: &RunReport) {
    let metric = Metrics::primary_name(r.task);
    let [tr, va, te] = r.split_sizes;
    println!("task {} split {tr}/{va}/{te}, {} epochs{}", r.task, r.epochs.len(), if r.stopped_early { " (stopped early)" } else { "" });
    println!("best epoch {}: valid {metric} {:.5}", r.best_epoch, r.valid_at_best.primary());
    if let (Some(t), Some(o)) = (r.test, r.test_other_head) {
        println!("test {metric}: {:.5} ({:?} head), {:.5} (other head)", t.primary(), r.config.predict_head, o.primary());
    }
    let exact = r.steps.iter().filter(|s| s.losses.l_final.to_bits() == s.losses.recombine().to_bits()).count();
    println!("loss recombination exact on {exact}/{} steps", r.steps.len());
}
