//! Experiment descriptions: dataset source, split, pseudo labels and training
//! settings, plus the named presets and multi-seed aggregation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{MetricsReport, Summary};
use crate::graph::{step_imbalance_split, stratified_split, Graph, GraphSet, Split, SplitFractions};
use crate::synth::{build_imbgraph, build_imbnode, ImbGraphConfig, ImbNodeConfig};
use crate::training::{train, Dataset, RunOutput, TrainConfig};
use crate::wl::{pseudo_topo_labels, DEFAULT_CLUSTERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Node,
    Graph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// The first half of the classes get `train · N / C` labels, the rest `ratio` times that.
    Step {
        ratio: f64,
        #[serde(default)]
        fractions: SplitFractions,
    },
    Stratified {
        #[serde(default)]
        fractions: SplitFractions,
    },
}

impl SplitSpec {
    pub fn make(&self, labels: &[usize], seed: u64) -> Result<Split> {
        match self {
            SplitSpec::Step { ratio, fractions } => step_imbalance_split(labels, *ratio, *fractions, seed),
            SplitSpec::Stratified { fractions } => stratified_split(labels, *fractions, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Imbnode {
        #[serde(default)]
        config: ImbNodeConfig,
    },
    Imbgraph {
        #[serde(default)]
        config: ImbGraphConfig,
    },
    /// A graph (node task) or graph-set (graph task) JSON document.
    File { path: PathBuf, task: Task },
}

impl DataSpec {
    pub fn task(&self) -> Task {
        match self {
            DataSpec::Imbnode { .. } => Task::Node,
            DataSpec::Imbgraph { .. } => Task::Graph,
            DataSpec::File { task, .. } => *task,
        }
    }
}

/// Settings for node-task pseudo topology labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoSpec {
    pub clusters: usize,
    /// Groups smaller than this are pooled into one shared group.
    pub min_group: usize,
}

impl Default for PseudoSpec {
    fn default() -> Self {
        Self {
            clusters: DEFAULT_CLUSTERS,
            min_group: 1,
        }
    }
}

/// Reported metric columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MacroF,
    Auroc,
    TopoAcc,
    Accuracy,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::MacroF, Metric::Auroc, Metric::TopoAcc, Metric::Accuracy];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MacroF => "macro_f",
            Metric::Auroc => "auroc",
            Metric::TopoAcc => "topo_acc",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn of(self, report: &MetricsReport) -> Option<f64> {
        match self {
            Metric::MacroF => Some(report.macro_f),
            Metric::Auroc => Some(report.auroc),
            Metric::TopoAcc => report.topo_acc,
            Metric::Accuracy => Some(report.accuracy),
        }
    }
}

fn all_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub split: SplitSpec,
    #[serde(default)]
    pub pseudo: PseudoSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<Metric>,
    /// Default output directory; the command line may override it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

pub const PRESETS: [&str; 2] = ["imbnode-paper", "imbgraph-paper"];

/// Loaded instances before splitting.
#[derive(Debug, Clone)]
pub enum Source {
    Nodes(Graph),
    Graphs(GraphSet),
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "imbnode-paper" => Ok(Self {
                data: DataSpec::Imbnode {
                    config: ImbNodeConfig::default(),
                },
                split: SplitSpec::Step {
                    ratio: 1.0,
                    fractions: SplitFractions::default(),
                },
                pseudo: PseudoSpec {
                    clusters: 1,
                    min_group: 5,
                },
                train: TrainConfig::default(),
                seeds: vec![0, 1, 2, 3, 4],
                metrics: all_metrics(),
                output_dir: None,
            }),
            "imbgraph-paper" => Ok(Self {
                data: DataSpec::Imbgraph {
                    config: ImbGraphConfig::default(),
                },
                split: SplitSpec::Stratified {
                    fractions: SplitFractions {
                        train: 0.05,
                        val: 0.3,
                        test: 0.6,
                    },
                },
                pseudo: PseudoSpec::default(),
                train: TrainConfig {
                    hidden: 64,
                    ext_dims: vec![64, 64],
                    wt_hidden: 64,
                    ..TrainConfig::default()
                },
                seeds: vec![0, 1, 2, 3, 4],
                metrics: all_metrics(),
                output_dir: None,
            }),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds: at least one seed is required"));
        }
        if self.metrics.is_empty() {
            return Err(Error::config("metrics: at least one metric is required"));
        }
        if self.pseudo.clusters == 0 {
            return Err(Error::config("pseudo.clusters: must be at least 1"));
        }
        self.train.validate()
    }

    /// Generates or reads the instances for one run. Synthetic benchmarks are
    /// regenerated per run, their configured seed offset by the run seed.
    pub fn load_source(&self, seed: u64) -> Result<Source> {
        match &self.data {
            DataSpec::Imbnode { config } => {
                let config = ImbNodeConfig {
                    seed: config.seed.wrapping_add(seed),
                    ..config.clone()
                };
                Ok(Source::Nodes(build_imbnode(&config)?.graph))
            }
            DataSpec::Imbgraph { config } => {
                let config = ImbGraphConfig {
                    seed: config.seed.wrapping_add(seed),
                    ..config.clone()
                };
                Ok(Source::Graphs(build_imbgraph(&config)?))
            }
            DataSpec::File { path, task: Task::Node } => Ok(Source::Nodes(Graph::load(path)?)),
            DataSpec::File { path, task: Task::Graph } => Ok(Source::Graphs(GraphSet::load(path)?)),
        }
    }

    /// Instances, split and pseudo labels for one run seed.
    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        match self.load_source(seed)? {
            Source::Nodes(g) => {
                let labels = g
                    .class_labels()
                    .ok_or_else(|| Error::data("node dataset has no class labels"))?;
                let split = self.split.make(labels, seed)?;
                let pseudo = pseudo_topo_labels(&g, self.pseudo.clusters.min(g.num_nodes()), seed)?
                    .merge_rare(self.pseudo.min_group);
                Dataset::nodes(g, pseudo, split)
            }
            Source::Graphs(set) => {
                let split = self.split.make(set.class_labels(), seed)?;
                Dataset::graphs(set, split)
            }
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Trains once per seed.
    pub fn run(&self) -> Result<Vec<(u64, RunOutput)>> {
        self.validate()?;
        self.seeds
            .iter()
            .map(|&seed| {
                let data = self.dataset(seed)?;
                Ok((seed, train(&data, &self.train_config(seed))?))
            })
            .collect()
    }
}

/// Seed-wise mean and dispersion of the headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub macro_f: Summary,
    pub auroc: Summary,
    pub topo_acc: Option<Summary>,
    pub accuracy: Summary,
}

impl Aggregate {
    pub fn of(reports: &[&MetricsReport]) -> Self {
        let pick = |f: fn(&MetricsReport) -> f64| Summary::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
        let topo: Option<Vec<f64>> = reports.iter().map(|r| r.topo_acc).collect();
        Self {
            macro_f: pick(|r| r.macro_f),
            auroc: pick(|r| r.auroc),
            topo_acc: topo.map(|t| Summary::of(&t)),
            accuracy: pick(|r| r.accuracy),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let json = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
        }
        assert!(matches!(ExperimentConfig::preset("cora"), Err(Error::Config(_))));
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"data": {"kind": "imbnode"}, "split": {"kind": "step", "ratio": 0.2}, "seeds": [3]}"#,
        )
        .unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.data.task(), Task::Node);
        assert_eq!(cfg.metrics, Metric::ALL);
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let mut cfg = ExperimentConfig::preset("imbnode-paper").unwrap();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }
}
