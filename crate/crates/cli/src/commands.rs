use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use topoimb::autodiff::Params;
use topoimb::checkpoint;
use topoimb::eval::{MetricsReport, Summary};
use topoimb::experiment::{Aggregate, ExperimentConfig, Metric, SplitSpec};
use topoimb::synth::{build_imbgraph, build_imbnode, ImbGraphConfig, ImbNodeConfig};
use topoimb::theory::{simulate_prop1, simulate_prop2, well_posed_game, RegionModel};
use topoimb::training::{self, Instances, Networks, RunOutput, Strategy};
use topoimb::Error;

use crate::output::{cell, config_hash, Outputs};
use crate::{Axis, Benchmark, Common};

pub const THREADS_ENV: &str = "TOPOIMB_THREADS";

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// 2 configuration, 3 data, 4 numerical, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Data(_) | Error::Index { .. } | Error::Json(_) | Error::Io(_)) => 3,
        Some(Error::Numerical(_)) => 4,
        _ => 1,
    }
}

/// Parses JSON, reporting schema violations with the offending field path.
fn parse_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        config_error(format!("{}: at `{field}`: {}", path.display(), e.inner()))
    })
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), None) => parse_json(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        _ => return Err(config_error("give exactly one of --config or --preset")),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig, fallback: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_error(format!("{THREADS_ENV}: expected a positive integer, got `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

/// Trains every configured seed, in parallel up to the worker cap.
fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<(u64, RunOutput)>> {
    let pool = thread_pool()?;
    pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let data = cfg.dataset(seed)?;
                Ok((seed, training::train(&data, &cfg.train_config(seed))?))
            })
            .collect::<Result<Vec<_>, Error>>()
    })
    .map_err(Into::into)
}

#[derive(Serialize)]
struct GenMeta<'a, C: Serialize> {
    benchmark: &'a str,
    seed: u64,
    config: &'a C,
}

pub fn gen_data(benchmark: Benchmark, seed: u64, config: Option<&Path>, out: &Path) -> Result<()> {
    let mut files = Outputs::new(out)?;
    let (name, hash) = match benchmark {
        Benchmark::Imbnode => {
            let mut cfg: ImbNodeConfig = config.map(parse_json).transpose()?.unwrap_or_default();
            cfg.seed = seed;
            let data = build_imbnode(&cfg)?;
            files.write("imbnode.json", data.graph.to_json()?.as_bytes())?;
            let meta = GenMeta { benchmark: "imbnode", seed, config: &cfg };
            files.write_json("imbnode.meta.json", &meta)?;
            println!("imbnode: {} nodes, {} edges", data.graph.num_nodes(), data.graph.num_edges());
            ("imbnode", config_hash(&cfg)?)
        }
        Benchmark::Imbgraph => {
            let mut cfg: ImbGraphConfig = config.map(parse_json).transpose()?.unwrap_or_default();
            cfg.seed = seed;
            let set = build_imbgraph(&cfg)?;
            files.write("imbgraph.json", set.to_json()?.as_bytes())?;
            let meta = GenMeta { benchmark: "imbgraph", seed, config: &cfg };
            files.write_json("imbgraph.meta.json", &meta)?;
            println!("imbgraph: {} graphs", set.len());
            ("imbgraph", config_hash(&cfg)?)
        }
    };
    files.finish(&format!("gen-data {name}"), hash, vec![seed])?;
    Ok(())
}

#[derive(Serialize)]
struct SeedReport<'a> {
    seed: u64,
    best_epoch: usize,
    epochs_run: usize,
    val_macro_f: f64,
    test: &'a MetricsReport,
}

fn metric_header(metrics: &[Metric]) -> Vec<String> {
    metrics.iter().map(|m| m.name().to_string()).collect()
}

fn summaries(metrics: &[Metric], reports: &[&MetricsReport]) -> Vec<Option<Summary>> {
    metrics
        .iter()
        .map(|m| {
            let values: Option<Vec<f64>> = reports.iter().map(|r| m.of(r)).collect();
            values.map(|v| Summary::of(&v))
        })
        .collect()
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let mut out = Outputs::new(&out_dir(common, &cfg, "runs"))?;
    let runs = run_seeds(&cfg)?;

    out.write_json("config.json", &cfg)?;
    let mut rows = Vec::new();
    for (seed, run) in &runs {
        let dir = format!("seed_{seed}");
        let report = SeedReport {
            seed: *seed,
            best_epoch: run.best_epoch,
            epochs_run: run.epochs_run,
            val_macro_f: run.val_macro_f,
            test: &run.test,
        };
        out.write_json(&format!("{dir}/metrics.json"), &report)?;
        out.write(&format!("{dir}/history.csv"), run.history.to_csv().as_bytes())?;
        let (mut manifest, blob) = checkpoint::encode(&run.params);
        manifest.blob = "checkpoint.bin".into();
        out.write(&format!("{dir}/checkpoint.bin"), &blob)?;
        out.write_json(&format!("{dir}/checkpoint.json"), &manifest)?;

        let mut row = vec![seed.to_string()];
        row.extend(cfg.metrics.iter().map(|m| cell(m.of(&run.test))));
        rows.push(row);
    }
    let reports: Vec<&MetricsReport> = runs.iter().map(|(_, r)| &r.test).collect();
    let stats = summaries(&cfg.metrics, &reports);
    rows.push(
        std::iter::once("mean".to_string())
            .chain(stats.iter().map(|s| cell(s.map(|s| s.mean))))
            .collect(),
    );
    rows.push(
        std::iter::once("std".to_string())
            .chain(stats.iter().map(|s| cell(s.map(|s| s.std))))
            .collect(),
    );
    rows.push(
        std::iter::once("stderr".to_string())
            .chain(stats.iter().map(|s| cell(s.map(|s| s.stderr))))
            .collect(),
    );
    let mut header = vec!["seed".to_string()];
    header.extend(metric_header(&cfg.metrics));
    out.write_csv("summary.csv", &header, &rows)?;
    out.write_json("aggregate.json", &Aggregate::of(&reports))?;

    for (name, s) in metric_header(&cfg.metrics).iter().zip(&stats) {
        if let Some(s) = s {
            println!("{name}: {:.4} ± {:.4} (n={})", s.mean, s.std, s.n);
        }
    }
    out.finish("train", config_hash(&cfg)?, cfg.seeds.clone())?;
    Ok(())
}

fn default_values(axis: Axis) -> Vec<String> {
    let list: &[&str] = match axis {
        Axis::K => &["2", "4", "6", "8", "10", "12", "14"],
        Axis::Alpha => &["0.2", "0.4", "0.5", "0.6", "0.8", "1"],
        Axis::R => &["0.1", "0.2", "0.5", "1"],
        Axis::Backbone => &["gcn", "sage", "gin"],
        Axis::Strategy => &[
            "vanilla",
            "topoimb",
            "class_reweight",
            "oversample",
            "focal",
            "gcn_reweight",
            "classwise",
        ],
    };
    list.iter().map(|s| s.to_string()).collect()
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::K => "k",
        Axis::Alpha => "alpha",
        Axis::R => "r",
        Axis::Backbone => "backbone",
        Axis::Strategy => "strategy",
    }
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: Axis, value: &str) -> Result<()> {
    let number = || {
        value
            .parse::<f64>()
            .map_err(|_| config_error(format!("{}: `{value}` is not a number", axis_name(axis))))
    };
    match axis {
        Axis::K => {
            cfg.train.templates = value
                .parse()
                .map_err(|_| config_error(format!("k: `{value}` is not a count")))?
        }
        Axis::Alpha => cfg.train.alpha = number()?,
        Axis::R => match &mut cfg.split {
            SplitSpec::Step { ratio, .. } => *ratio = number()?,
            SplitSpec::Stratified { .. } => return Err(config_error("r: sweeping R needs a step split")),
        },
        Axis::Backbone => cfg.train.backbone = value.parse()?,
        Axis::Strategy => cfg.train.strategy = value.parse()?,
    }
    cfg.validate()?;
    Ok(())
}

pub fn sweep(common: &Common, axis: Axis, values: Option<Vec<String>>) -> Result<()> {
    let base = load_config(common)?;
    let values = values.unwrap_or_else(|| default_values(axis));
    let name = axis_name(axis);
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            apply_axis(&mut cfg, axis, v)?;
            Ok((v.clone(), cfg))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Outputs::new(&out_dir(common, &base, "sweeps"))?;
    let mut header = vec![name.to_string()];
    for m in &base.metrics {
        header.push(format!("{}_mean", m.name()));
        header.push(format!("{}_std", m.name()));
    }
    let mut rows = Vec::new();
    for (value, cfg) in &configs {
        let runs = run_seeds(cfg)?;
        let reports: Vec<&MetricsReport> = runs.iter().map(|(_, r)| &r.test).collect();
        let mut row = vec![value.clone()];
        for s in summaries(&cfg.metrics, &reports) {
            row.push(cell(s.map(|s| s.mean)));
            row.push(cell(s.map(|s| s.std)));
        }
        println!("{name}={value}: {}", row[1..].join(","));
        rows.push(row);
    }
    out.write_csv(&format!("sweep_{name}.csv"), &header, &rows)?;
    out.write_json("config.json", &base)?;
    out.finish(&format!("sweep {name}"), config_hash(&base)?, base.seeds.clone())?;
    Ok(())
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

pub fn weight_trace(common: &Common, epochs: Option<Vec<usize>>) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.seeds.truncate(1);
    let seed = first_seed(&cfg);
    let data = cfg.dataset(seed)?;
    if data.groups.is_none() {
        return Err(Error::Data("weight trace needs topology labels".into()).into());
    }
    let run = training::train(&data, &cfg.train_config(seed))?;

    let header: Vec<String> = ["epoch", "group", "group_size", "mean_weight", "train_accuracy"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    for r in &run.history.records {
        if epochs.as_ref().is_some_and(|e| !e.contains(&r.epoch)) {
            continue;
        }
        for (g, &size) in run.history.group_sizes.iter().enumerate() {
            if size == 0 {
                continue;
            }
            rows.push(vec![
                r.epoch.to_string(),
                g.to_string(),
                size.to_string(),
                cell(r.group_weight[g]),
                cell(r.group_train_acc[g]),
            ]);
        }
    }
    let mut out = Outputs::new(&out_dir(common, &cfg, "traces"))?;
    out.write_csv("weight_trace.csv", &header, &rows)?;
    out.finish("weight-trace", config_hash(&cfg)?, cfg.seeds.clone())?;
    Ok(())
}

pub fn template_trace(common: &Common, stem: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.seeds.truncate(1);
    let seed = first_seed(&cfg);
    if cfg.train.strategy != Strategy::TopoImb {
        return Err(config_error("train.strategy: template trace needs the topoimb strategy"));
    }
    let data = cfg.dataset(seed)?;
    let Instances::Nodes(graph) = &data.instances else {
        return Err(config_error("template trace is defined for node tasks"));
    };
    let tcfg = cfg.train_config(seed);
    let (nets, params) = match stem {
        Some(stem) => {
            let mut params = Params::new();
            let nets = Networks::build(&mut params, &data, &tcfg)?;
            checkpoint::load_into(&mut params, stem)?;
            (nets, params)
        }
        None => {
            let run = training::train(&data, &tcfg)?;
            (run.networks, run.params)
        }
    };
    let selection = nets.template_selection(&params, graph)?;
    let groups = data.groups.as_deref().unwrap_or(&data.pseudo.labels);

    let cols = selection.ncols();
    let mut sums: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for (v, &g) in groups.iter().enumerate() {
        let entry = sums.entry(g).or_insert_with(|| (0, vec![0.0; cols]));
        entry.0 += 1;
        for (acc, x) in entry.1.iter_mut().zip(selection.row(v)) {
            *acc += x;
        }
    }
    let mut header: Vec<String> = vec!["group".into(), "nodes".into()];
    header.extend((0..cols - 1).map(|k| format!("t{k}")));
    header.push("default".into());
    let rows: Vec<Vec<String>> = sums
        .into_iter()
        .map(|(g, (n, s))| {
            let mut row = vec![g.to_string(), n.to_string()];
            row.extend(s.iter().map(|x| (x / n as f64).to_string()));
            row
        })
        .collect();
    let mut out = Outputs::new(&out_dir(common, &cfg, "traces"))?;
    out.write_csv("template_trace.csv", &header, &rows)?;
    out.finish("template-trace", config_hash(&cfg)?, cfg.seeds.clone())?;
    Ok(())
}

pub fn pseudo_labels(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.seeds.truncate(1);
    let seed = first_seed(&cfg);
    let data = cfg.dataset(seed)?;
    let unit = if data.is_graph_task() { "graph" } else { "node" };
    let header: Vec<String> = vec![unit.into(), "pseudo".into(), "topo".into()];
    let rows: Vec<Vec<String>> = data
        .pseudo
        .labels
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let topo = data.groups.as_ref().map(|g| g[i].to_string()).unwrap_or_default();
            vec![i.to_string(), p.to_string(), topo]
        })
        .collect();
    let sizes: Vec<Vec<String>> = data
        .pseudo
        .group_sizes()
        .iter()
        .enumerate()
        .map(|(g, n)| vec![g.to_string(), n.to_string()])
        .collect();
    let mut out = Outputs::new(&out_dir(common, &cfg, "pseudo"))?;
    out.write_csv("pseudo_labels.csv", &header, &rows)?;
    out.write_csv("pseudo_groups.csv", &["pseudo".into(), "size".into()], &sizes)?;
    println!("{} pseudo topology groups", sizes.len());
    out.finish("pseudo-labels", config_hash(&cfg)?, cfg.seeds.clone())?;
    Ok(())
}

pub const THEORY_REGIONS: [usize; 3] = [2, 3, 5];
pub const THEORY_RATIOS: [f64; 4] = [1.0, 0.5, 0.2, 0.1];

#[derive(Serialize)]
struct TheorySettings {
    seeds: u64,
    steps: usize,
    lr: f64,
}

pub fn theory_check(dir: &Path, seeds: u64, steps: usize, lr: f64) -> Result<()> {
    if seeds == 0 {
        return Err(config_error("seeds: at least one seed is required"));
    }
    let mut out = Outputs::new(dir)?;

    let mut game_rows = Vec::new();
    let mut game_ok = true;
    for k in THEORY_REGIONS {
        let (game, eq) = well_posed_game(k, k as u64, 0.05)?;
        let traj = simulate_prop2(&game, steps, lr)?;
        let distance = traj
            .model
            .iter()
            .zip(&eq.point)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        game_ok &= traj.final_gap() <= 1e-3 && distance <= 1e-3;
        game_rows.push(vec![
            k.to_string(),
            steps.to_string(),
            traj.final_gap().to_string(),
            distance.to_string(),
            eq.loss.to_string(),
        ]);
        println!("regions {k}: gap {:.2e}, distance to equalization {distance:.2e}", traj.final_gap());
    }
    let header: Vec<String> = ["regions", "steps", "final_gap", "distance", "equalized_loss"]
        .map(String::from)
        .to_vec();
    out.write_csv("region_game.csv", &header, &game_rows)?;

    let model = RegionModel::default();
    let mut bound_rows = Vec::new();
    let mut bound_ok = true;
    let mut mean_test = vec![0.0; THEORY_RATIOS.len()];
    for seed in 0..seeds {
        for (i, row) in simulate_prop1(&model, &THEORY_RATIOS, seed)?.into_iter().enumerate() {
            bound_ok &= row.holds();
            mean_test[i] += row.eps_test / seeds as f64;
            bound_rows.push(vec![
                seed.to_string(),
                row.r.to_string(),
                row.eps_train.to_string(),
                row.eps_test.to_string(),
                row.lambda_star.to_string(),
                row.bound.to_string(),
                row.holds().to_string(),
            ]);
        }
    }
    let header: Vec<String> = ["seed", "r", "eps_train", "eps_test", "lambda_star", "bound", "holds"]
        .map(String::from)
        .to_vec();
    out.write_csv("imbalance_bound.csv", &header, &bound_rows)?;
    for (r, e) in THEORY_RATIOS.iter().zip(&mean_test) {
        println!("r = {r}: mean test error {e:.4}");
    }
    let monotone = mean_test.windows(2).all(|w| w[1] >= w[0]);

    let settings = TheorySettings { seeds, steps, lr };
    out.finish("theory-check", config_hash(&settings)?, (0..seeds).collect())?;
    if !(game_ok && bound_ok && monotone) {
        anyhow::bail!(
            "theory check failed (game converged: {game_ok}, bound held: {bound_ok}, error monotone: {monotone})"
        );
    }
    println!("all theory checks passed");
    Ok(())
}
