//! Losses, the alternating min-max training loop and baseline strategies.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Optimizer, ParamId, Params, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::graph::{Graph, GraphSet, Split};
use crate::models::{
    AttentionPool, AuxHead, Backbone, ClassWeights, Extractor, GcnTower, Gnn, Propagation, WeightNet,
};
use crate::wl::{graph_pseudo_labels, PseudoLabels};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn picked_log_probs(tape: &mut Tape, probs: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::contract("loss over an empty mask"));
    }
    if tape.value(probs).nrows() != labels.len() {
        return Err(Error::contract(format!(
            "{} probability rows for {} labels",
            tape.value(probs).nrows(),
            labels.len()
        )));
    }
    let p = tape.pick_cols(probs, labels)?;
    let p = tape.clamp_min(p, PROB_FLOOR);
    Ok(tape.log(p))
}

/// Mean negative log-likelihood of the labelled classes.
pub fn loss_ce(tape: &mut Tape, probs: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
    let logp = picked_log_probs(tape, probs, labels)?;
    let m = tape.mean(logp)?;
    Ok(tape.scale(m, -1.0))
}

/// Instance-weighted negative log-likelihood, averaged over the mask.
pub fn loss_re(tape: &mut Tape, probs: Var, labels: Arc<Vec<usize>>, weights: Var) -> Result<Var> {
    let logp = picked_log_probs(tape, probs, labels)?;
    let weighted = tape.mul(logp, weights)?;
    let m = tape.mean(weighted)?;
    Ok(tape.scale(m, -1.0))
}

/// Cross-entropy of the auxiliary head against pseudo topology labels.
pub fn loss_aux(tape: &mut Tape, aux_probs: Var, pseudo: Arc<Vec<usize>>) -> Result<Var> {
    loss_ce(tape, aux_probs, pseudo)
}

/// `-(1-p)^γ log p` averaged over the mask.
pub fn loss_focal(tape: &mut Tape, probs: Var, labels: Arc<Vec<usize>>, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!("focal gamma must be finite and >= 0, got {gamma}")));
    }
    let p = tape.pick_cols(probs, labels.clone())?;
    let logp = picked_log_probs(tape, probs, labels)?;
    let one = tape.constant(Matrix::ones((1, 1)));
    let rest = tape.sub(one, p)?;
    let rest = tape.clamp_min(rest, PROB_FLOOR);
    let log_rest = tape.log(rest);
    let scaled = tape.scale(log_rest, gamma);
    let modulator = tape.exp(scaled);
    let term = tape.mul(modulator, logp)?;
    let m = tape.mean(term)?;
    Ok(tape.scale(m, -1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    TopoImb,
    ClassReweight,
    Oversample,
    Focal { gamma: f64 },
    GcnReweight,
    ClasswiseReweighter,
}

impl Strategy {
    fn is_adversarial(self) -> bool {
        matches!(
            self,
            Strategy::TopoImb | Strategy::GcnReweight | Strategy::ClasswiseReweighter
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Vanilla => write!(f, "vanilla"),
            Strategy::TopoImb => write!(f, "topoimb"),
            Strategy::ClassReweight => write!(f, "class_reweight"),
            Strategy::Oversample => write!(f, "oversample"),
            Strategy::Focal { gamma } => write!(f, "focal:{gamma}"),
            Strategy::GcnReweight => write!(f, "gcn_reweight"),
            Strategy::ClasswiseReweighter => write!(f, "classwise"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts the `Display` names; `focal` alone means γ = 2.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace('-', "_");
        if let Some(g) = lower.strip_prefix("focal:") {
            let gamma = g
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad focal gamma `{g}`")))?;
            return Ok(Strategy::Focal { gamma });
        }
        Ok(match lower.as_str() {
            "vanilla" => Strategy::Vanilla,
            "topoimb" => Strategy::TopoImb,
            "class_reweight" | "reweight" => Strategy::ClassReweight,
            "oversample" => Strategy::Oversample,
            "focal" => Strategy::Focal { gamma: 2.0 },
            "gcn_reweight" => Strategy::GcnReweight,
            "classwise" | "classwise_reweighter" => Strategy::ClasswiseReweighter,
            other => return Err(Error::config(format!("unknown strategy `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub backbone: Backbone,
    /// Blend between plain and re-weighted cross-entropy for the classifier.
    pub alpha: f64,
    pub max_epochs: usize,
    /// Epochs without a validation MacroF improvement before stopping.
    pub patience: usize,
    pub lr_theta: f64,
    pub lr_ext: f64,
    pub lr_templates: f64,
    /// L2 penalty on the classifier parameters.
    pub weight_decay: f64,
    /// Graphs per step; the node task is always full-batch.
    pub batch_size: usize,
    pub hidden: usize,
    pub ext_dims: Vec<usize>,
    pub wt_hidden: usize,
    /// Template count K (plus one default slot).
    pub templates: usize,
    pub delta: f64,
    pub aux_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TopoImb,
            backbone: Backbone::Gcn,
            alpha: 0.5,
            max_epochs: 1500,
            patience: 100,
            lr_theta: 0.01,
            lr_ext: 0.01,
            lr_templates: 0.01,
            weight_decay: 5e-4,
            batch_size: 32,
            hidden: 32,
            ext_dims: vec![16, 16],
            wt_hidden: 16,
            templates: 8,
            delta: 0.0,
            aux_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::config(format!("train.{field}: {why}")));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", "must lie in [0, 1]");
        }
        for (name, lr) in [
            ("lr_theta", self.lr_theta),
            ("lr_ext", self.lr_ext),
            ("lr_templates", self.lr_templates),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(name, "must be positive and finite");
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0");
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return bad("aux_weight", "must be >= 0");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.hidden == 0 || self.wt_hidden == 0 {
            return bad("hidden", "layer widths must be at least 1");
        }
        if self.ext_dims.is_empty() || self.ext_dims.contains(&0) {
            return bad("ext_dims", "needs at least one nonzero layer width");
        }
        if self.templates == 0 {
            return bad("templates", "K must be at least 1");
        }
        if !self.delta.is_finite() {
            return bad("delta", "must be finite");
        }
        if let Strategy::Focal { gamma } = self.strategy {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return bad("strategy.gamma", "must be finite and >= 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Instances {
    Nodes(Graph),
    Graphs(GraphSet),
}

/// A labelled classification problem with its split and pseudo topology labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub instances: Instances,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Ground-truth topology groups, when known.
    pub groups: Option<Vec<usize>>,
    pub pseudo: PseudoLabels,
    pub split: Split,
}

impl Dataset {
    pub fn nodes(graph: Graph, pseudo: PseudoLabels, split: Split) -> Result<Self> {
        let labels = graph
            .class_labels()
            .ok_or_else(|| Error::data("node task needs class labels"))?
            .to_vec();
        if pseudo.labels.len() != graph.num_nodes() {
            return Err(Error::contract("pseudo labels must cover every node"));
        }
        let groups = graph.topo_labels().map(<[usize]>::to_vec);
        Self::assemble(Instances::Nodes(graph), labels, groups, pseudo, split)
    }

    /// Graph task; the pseudo topology labels are the class labels.
    pub fn graphs(set: GraphSet, split: Split) -> Result<Self> {
        let labels = set.class_labels().to_vec();
        let groups = set.topo_labels().map(<[usize]>::to_vec);
        let pseudo = graph_pseudo_labels(&set);
        Self::assemble(Instances::Graphs(set), labels, groups, pseudo, split)
    }

    fn assemble(
        instances: Instances,
        labels: Vec<usize>,
        groups: Option<Vec<usize>>,
        pseudo: PseudoLabels,
        split: Split,
    ) -> Result<Self> {
        let n = labels.len();
        for part in [&split.train, &split.val, &split.test] {
            if let Some(&bad) = part.iter().find(|&&i| i >= n) {
                return Err(Error::Index { index: bad, len: n });
            }
        }
        if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
            return Err(Error::data("train, validation and test splits must be nonempty"));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        if num_classes < 2 {
            return Err(Error::data("need at least two classes"));
        }
        Ok(Self {
            instances,
            labels,
            num_classes,
            groups,
            pseudo,
            split,
        })
    }

    pub fn is_graph_task(&self) -> bool {
        matches!(self.instances, Instances::Graphs(_))
    }

    pub fn feature_dim(&self) -> usize {
        match &self.instances {
            Instances::Nodes(g) => g.feature_dim(),
            Instances::Graphs(s) => s.feature_dim(),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.groups
            .as_ref()
            .and_then(|g| g.iter().max())
            .map_or(0, |m| m + 1)
    }
}

/// Instance embedding tower feeding the weight assigner.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedder {
    Templates(Extractor),
    Gcn(GcnTower),
}

impl Embedder {
    fn output_dim(&self) -> usize {
        match self {
            Embedder::Templates(e) => e.output_dim(),
            Embedder::Gcn(t) => t.output_dim(),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        prop: &Propagation,
        x: Var,
        train_body: bool,
        train_templates: bool,
    ) -> Result<Var> {
        match self {
            Embedder::Templates(e) => Ok(e.forward(tape, params, prop, x, train_body, train_templates)?.embedding),
            Embedder::Gcn(t) => t.forward(tape, params, prop, x, train_body),
        }
    }

    fn body_ids(&self) -> Vec<ParamId> {
        match self {
            Embedder::Templates(e) => e.mlp_ids(),
            Embedder::Gcn(t) => t.ids(),
        }
    }

    fn template_ids(&self) -> Vec<ParamId> {
        match self {
            Embedder::Templates(e) => e.template_ids(),
            Embedder::Gcn(_) => Vec::new(),
        }
    }
}

/// Adversarial weight assigner with its auxiliary topology head.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralReweighter {
    pub embedder: Embedder,
    pub weight_net: WeightNet,
    pub aux: AuxHead,
    /// Graph task only: separate pools for weights and the aux head.
    pub pools: Option<(AttentionPool, AttentionPool)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reweighter {
    Structural(StructuralReweighter),
    Classwise(ClassWeights),
}

/// Every network of one training run; parameters live in a [`Params`] store.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub gnn: Gnn,
    pub reweighter: Option<Reweighter>,
}

impl Networks {
    pub fn build(params: &mut Params, data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let graph_level = data.is_graph_task();
        let input = data.feature_dim();
        let gnn = Gnn::new(
            params,
            cfg.backbone,
            input,
            cfg.hidden,
            data.num_classes,
            graph_level,
            &mut rng,
        );
        let embedder = match cfg.strategy {
            Strategy::TopoImb => Some(Embedder::Templates(Extractor::new(
                params,
                input,
                &cfg.ext_dims,
                cfg.templates,
                cfg.delta,
                &mut rng,
            )?)),
            Strategy::GcnReweight => Some(Embedder::Gcn(GcnTower::new(params, input, &cfg.ext_dims, &mut rng))),
            _ => None,
        };
        let reweighter = match (embedder, cfg.strategy) {
            (Some(embedder), _) => {
                let d = embedder.output_dim();
                let weight_net = WeightNet::new(params, d, cfg.wt_hidden, &mut rng);
                let aux = AuxHead::new(params, d, data.pseudo.num_groups, &mut rng);
                let pools = graph_level.then(|| {
                    (
                        AttentionPool::new(params, "wt_pool", d, &mut rng),
                        AttentionPool::new(params, "aux_pool", d, &mut rng),
                    )
                });
                Some(Reweighter::Structural(StructuralReweighter {
                    embedder,
                    weight_net,
                    aux,
                    pools,
                }))
            }
            (None, Strategy::ClasswiseReweighter) => {
                Some(Reweighter::Classwise(ClassWeights::new(params, data.num_classes)))
            }
            _ => None,
        };
        Ok(Self { gnn, reweighter })
    }

    pub fn theta_ids(&self) -> Vec<ParamId> {
        self.gnn.ids()
    }

    /// The adversary's parameters excluding templates: extractor body, weight
    /// net, aux head and pools.
    pub fn adversary_ids(&self) -> Vec<ParamId> {
        match &self.reweighter {
            None => Vec::new(),
            Some(Reweighter::Classwise(c)) => vec![c.logits],
            Some(Reweighter::Structural(r)) => {
                let mut ids = r.embedder.body_ids();
                ids.extend(r.weight_net.ids());
                ids.extend(r.aux.ids());
                if let Some((a, b)) = &r.pools {
                    ids.extend([a.query, b.query]);
                }
                ids
            }
        }
    }

    pub fn template_ids(&self) -> Vec<ParamId> {
        match &self.reweighter {
            Some(Reweighter::Structural(r)) => r.embedder.template_ids(),
            _ => Vec::new(),
        }
    }

    fn predict(&self, tape: &mut Tape, params: &Params, batch: &Batch, trainable: bool) -> Result<Var> {
        let x = tape.constant(batch.x.as_ref().clone());
        let probs = self.gnn.forward(tape, params, &batch.prop, x, trainable)?;
        match &batch.rows {
            Some(rows) => tape.gather_rows(probs, rows.clone()),
            None => Ok(probs),
        }
    }

    /// Instance weights and, for structural reweighters, the aux-head loss.
    fn adversary(
        &self,
        tape: &mut Tape,
        params: &Params,
        batch: &Batch,
        train_body: bool,
        train_templates: bool,
    ) -> Result<(Var, Option<Var>)> {
        match &self.reweighter {
            None => Err(Error::contract("strategy has no reweighter")),
            Some(Reweighter::Classwise(c)) => Ok((c.forward(tape, params, batch.labels.clone(), train_body)?, None)),
            Some(Reweighter::Structural(r)) => {
                let x = tape.constant(batch.x.as_ref().clone());
                let h = r
                    .embedder
                    .forward(tape, params, &batch.prop, x, train_body, train_templates)?;
                let (wt_rows, aux_rows) = match (&r.pools, &batch.rows) {
                    (Some((wt_pool, aux_pool)), _) => (
                        wt_pool.forward(tape, params, &batch.prop, h, train_body)?,
                        aux_pool.forward(tape, params, &batch.prop, h, train_body)?,
                    ),
                    (None, Some(rows)) => (tape.gather_rows(h, rows.clone())?, h),
                    (None, None) => return Err(Error::contract("node task batch without rows")),
                };
                let w = r.weight_net.forward(tape, params, wt_rows, train_body)?;
                let probs = r.aux.forward(tape, params, aux_rows, train_body)?;
                let aux = loss_aux(tape, probs, batch.aux_labels.clone())?;
                Ok((w, Some(aux)))
            }
        }
    }

    /// Class probabilities for dataset instances `indices`.
    pub fn predict_probs(&self, params: &Params, data: &Dataset, indices: &[usize]) -> Result<Matrix> {
        let batch = Batch::new(data, indices)?;
        let mut tape = Tape::new();
        let p = self.predict(&mut tape, params, &batch, false)?;
        Ok(tape.value(p).clone())
    }

    /// Final-layer template selection distributions per node (node task).
    pub fn template_selection(&self, params: &Params, graph: &Graph) -> Result<Matrix> {
        let Some(Reweighter::Structural(StructuralReweighter {
            embedder: Embedder::Templates(ext),
            ..
        })) = &self.reweighter
        else {
            return Err(Error::config("template selection needs a template extractor"));
        };
        let prop = Propagation::for_graph(graph);
        let mut tape = Tape::new();
        let x = tape.constant(graph.features().clone());
        let out = ext.forward(&mut tape, params, &prop, x, false, false)?;
        let last = *out.selection.last().expect("at least one layer");
        Ok(tape.value(last).clone())
    }

    /// Instance weights the adversary currently assigns to `indices`.
    pub fn assigned_weights(&self, params: &Params, data: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
        let batch = Batch::new(data, indices)?;
        let mut tape = Tape::new();
        let (w, _) = self.adversary(&mut tape, params, &batch, false, false)?;
        Ok(tape.value(w).iter().copied().collect())
    }
}

/// Inputs for one forward pass over a set of instances.
struct Batch {
    prop: Arc<Propagation>,
    x: Arc<Matrix>,
    /// Node task: rows of the supervised instances.
    rows: Option<Arc<Vec<usize>>>,
    instances: Vec<usize>,
    labels: Arc<Vec<usize>>,
    aux_labels: Arc<Vec<usize>>,
}

impl Batch {
    fn new(data: &Dataset, indices: &[usize]) -> Result<Self> {
        match &data.instances {
            Instances::Nodes(g) => Ok(Self::nodes(
                data,
                Arc::new(Propagation::for_graph(g)),
                Arc::new(g.features().clone()),
                indices,
            )),
            Instances::Graphs(set) => Self::graphs(data, set, indices),
        }
    }

    fn nodes(data: &Dataset, prop: Arc<Propagation>, x: Arc<Matrix>, indices: &[usize]) -> Self {
        Self {
            prop,
            x,
            rows: Some(Arc::new(indices.to_vec())),
            instances: indices.to_vec(),
            labels: Arc::new(indices.iter().map(|&i| data.labels[i]).collect()),
            aux_labels: Arc::new(data.pseudo.labels.clone()),
        }
    }

    fn graphs(data: &Dataset, set: &GraphSet, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::contract("empty graph batch"));
        }
        let graphs: Vec<&Graph> = indices.iter().map(|&i| &set.graphs()[i]).collect();
        let views: Vec<_> = graphs.iter().map(|g| g.features().view()).collect();
        let x = concatenate(Axis(0), &views).map_err(|e| Error::data(format!("feature widths differ: {e}")))?;
        Ok(Self {
            prop: Arc::new(Propagation::for_batch(&graphs)),
            x: Arc::new(x),
            rows: None,
            instances: indices.to_vec(),
            labels: Arc::new(indices.iter().map(|&i| data.labels[i]).collect()),
            aux_labels: Arc::new(indices.iter().map(|&i| data.pseudo.labels[i]).collect()),
        })
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_re: Option<f64>,
    pub loss_aux: Option<f64>,
    pub val_macro_f: f64,
    /// Mean weight of the training instances in each topology group.
    pub group_weight: Vec<Option<f64>>,
    /// Training accuracy per topology group, before this epoch's update.
    pub group_train_acc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Training instances per topology group.
    pub group_sizes: Vec<usize>,
    pub records: Vec<EpochRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl History {
    /// Wide CSV: one row per epoch.
    pub fn to_csv(&self) -> String {
        let groups = self.group_sizes.len();
        let mut out = String::from("epoch,loss_ce,loss_re,loss_aux,val_macro_f");
        for g in 0..groups {
            out.push_str(&format!(",w_g{g}"));
        }
        for g in 0..groups {
            out.push_str(&format!(",acc_g{g}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.epoch,
                r.loss_ce,
                fmt_opt(r.loss_re),
                fmt_opt(r.loss_aux),
                r.val_macro_f
            ));
            for g in 0..groups {
                out.push(',');
                out.push_str(&fmt_opt(r.group_weight.get(g).copied().flatten()));
            }
            for g in 0..groups {
                out.push(',');
                out.push_str(&fmt_opt(r.group_train_acc.get(g).copied().flatten()));
            }
            out.push('\n');
        }
        out
    }
}

pub struct RunOutput {
    pub networks: Networks,
    /// Parameters restored to the best validation epoch.
    pub params: Params,
    pub history: History,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_macro_f: f64,
    pub test: MetricsReport,
}

/// Per-class weights `N / (C · n_c)` from training label counts.
pub fn class_balance_weights(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) })
        .collect()
}

/// Appends duplicates of smaller classes' training instances until every
/// present class matches the largest one.
pub fn oversample(indices: &[usize], labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let num_classes = indices.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); num_classes];
    for &i in indices {
        by_class[labels[i]].push(i);
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = indices.to_vec();
    for members in by_class.iter_mut().filter(|m| !m.is_empty()) {
        members.shuffle(rng);
        out.extend(members.iter().cycle().take(target - members.len()));
    }
    out
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    nets: Networks,
    params: Params,
    opt_theta: Optimizer,
    opt_adv: Option<Optimizer>,
    opt_templates: Option<Optimizer>,
    class_weights: Vec<f64>,
    tape: Tape,
}

struct StepStats {
    loss_ce: f64,
    loss_re: Option<f64>,
    loss_aux: Option<f64>,
    weights: Vec<f64>,
    correct: Vec<bool>,
}

fn check_finite(value: f64, what: &str, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} became {value} at epoch {epoch}")))
    }
}

impl<'a> Trainer<'a> {
    fn new(data: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        let mut params = Params::new();
        let nets = Networks::build(&mut params, data, cfg)?;
        let opt_theta = Optimizer::adam(nets.theta_ids(), &params, cfg.lr_theta).with_weight_decay(cfg.weight_decay);
        let adv = nets.adversary_ids();
        let opt_adv = (!adv.is_empty()).then(|| Optimizer::adam(adv, &params, cfg.lr_ext));
        let templates = nets.template_ids();
        let opt_templates = (!templates.is_empty()).then(|| Optimizer::adam(templates, &params, cfg.lr_templates));
        let train_labels: Vec<usize> = data.split.train.iter().map(|&i| data.labels[i]).collect();
        Ok(Self {
            cfg,
            nets,
            params,
            opt_theta,
            opt_adv,
            opt_templates,
            class_weights: class_balance_weights(&train_labels, data.num_classes),
            tape: Tape::new(),
        })
    }

    fn step(&mut self, batch: &Batch, epoch: usize) -> Result<StepStats> {
        let mut stats = self.classifier_phase(batch, epoch)?;
        if !self.cfg.strategy.is_adversarial() {
            return Ok(stats);
        }
        let frozen = self.frozen_probs(batch)?;
        let (re, aux) = self.adversary_phase(batch, &frozen, Phase::Adversary, epoch)?;
        stats.loss_re = Some(re);
        stats.loss_aux = aux;
        self.adversary_phase(batch, &frozen, Phase::Templates, epoch)?;
        Ok(stats)
    }

    /// Phase 1: classifier update with the adversary's weights held fixed.
    fn classifier_phase(&mut self, batch: &Batch, epoch: usize) -> Result<StepStats> {
        let cfg = self.cfg;
        let tape = &mut self.tape;
        let b = batch.labels.len();
        tape.clear();
        let weights = if cfg.strategy.is_adversarial() {
            let (w, _) = self.nets.adversary(tape, &self.params, batch, false, false)?;
            tape.value(w).clone()
        } else if cfg.strategy == Strategy::ClassReweight {
            Matrix::from_shape_fn((b, 1), |(i, _)| self.class_weights[batch.labels[i]])
        } else {
            Matrix::ones((b, 1))
        };
        let probs = self.nets.predict(tape, &self.params, batch, true)?;
        let correct: Vec<bool> = eval::argmax_rows(tape.value(probs))
            .iter()
            .zip(batch.labels.iter())
            .map(|(p, y)| p == y)
            .collect();
        let ce = loss_ce(tape, probs, batch.labels.clone())?;
        let loss = match cfg.strategy {
            Strategy::Vanilla | Strategy::Oversample => ce,
            Strategy::Focal { gamma } => loss_focal(tape, probs, batch.labels.clone(), gamma)?,
            Strategy::ClassReweight => {
                let w = tape.constant(weights.clone());
                loss_re(tape, probs, batch.labels.clone(), w)?
            }
            _ => {
                let w = tape.constant(weights.clone());
                let re = loss_re(tape, probs, batch.labels.clone(), w)?;
                let a = tape.scale(ce, 1.0 - cfg.alpha);
                let r = tape.scale(re, cfg.alpha);
                tape.add(a, r)?
            }
        };
        let loss_ce_value = tape.scalar(ce);
        check_finite(tape.scalar(loss), "classifier loss", epoch)?;
        tape.backward(loss, &mut self.params)?;
        self.opt_theta.step(&mut self.params)?;
        Ok(StepStats {
            loss_ce: loss_ce_value,
            loss_re: None,
            loss_aux: None,
            weights: weights.iter().copied().collect(),
            correct,
        })
    }

    /// Classifier output shared by phases 2 and 3.
    fn frozen_probs(&mut self, batch: &Batch) -> Result<Matrix> {
        self.tape.clear();
        let p = self.nets.predict(&mut self.tape, &self.params, batch, false)?;
        Ok(self.tape.value(p).clone())
    }

    /// Phase 2 moves the adversary (ascending the weighted loss while the aux
    /// head descends); phase 3 moves the templates alone on the same
    /// objective. Returns the weighted loss and the aux loss.
    fn adversary_phase(&mut self, batch: &Batch, frozen: &Matrix, phase: Phase, epoch: usize) -> Result<(f64, Option<f64>)> {
        let cfg = self.cfg;
        let opt = match phase {
            Phase::Adversary => self.opt_adv.as_mut(),
            Phase::Templates => self.opt_templates.as_mut(),
        };
        let Some(opt) = opt else { return Ok((f64::NAN, None)) };
        let tape = &mut self.tape;
        tape.clear();
        let p = tape.constant(frozen.clone());
        let (w, aux) = self.nets.adversary(
            tape,
            &self.params,
            batch,
            phase == Phase::Adversary,
            phase == Phase::Templates,
        )?;
        let re = loss_re(tape, p, batch.labels.clone(), w)?;
        let mut objective = tape.scale(re, -1.0);
        if let Some(aux) = aux {
            let scaled = tape.scale(aux, cfg.aux_weight);
            objective = tape.add(objective, scaled)?;
        }
        check_finite(tape.scalar(objective), "adversary objective", epoch)?;
        let losses = (tape.scalar(re), aux.map(|a| tape.scalar(a)));
        tape.backward(objective, &mut self.params)?;
        opt.step(&mut self.params)?;
        Ok(losses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Adversary,
    Templates,
}

fn macro_f_on(nets: &Networks, params: &Params, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let p = nets.predict(&mut tape, params, batch, false)?;
    let preds = eval::argmax_rows(tape.value(p));
    eval::macro_f1(&preds, &batch.labels)
}

/// Trains one model with early stopping on validation MacroF and reports
/// test metrics of the best epoch.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<RunOutput> {
    let mut trainer = Trainer::new(data, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut train_idx = data.split.train.clone();
    if cfg.strategy == Strategy::Oversample {
        train_idx = oversample(&train_idx, &data.labels, &mut rng);
    }

    // The node task shares one propagation structure for every pass.
    let shared = match &data.instances {
        Instances::Nodes(g) => Some((Arc::new(Propagation::for_graph(g)), Arc::new(g.features().clone()))),
        Instances::Graphs(_) => None,
    };
    let make_batch = |indices: &[usize]| -> Result<Batch> {
        match (&shared, &data.instances) {
            (Some((prop, x)), _) => Ok(Batch::nodes(data, prop.clone(), x.clone(), indices)),
            (None, Instances::Graphs(set)) => Batch::graphs(data, set, indices),
            _ => unreachable!(),
        }
    };
    let val_batch = make_batch(&data.split.val)?;
    let node_batch = match shared {
        Some(_) => Some(make_batch(&train_idx)?),
        None => None,
    };

    let num_groups = data.num_groups();
    let mut history = History {
        group_sizes: vec![0; num_groups],
        records: Vec::new(),
    };
    if let Some(groups) = &data.groups {
        for &i in &train_idx {
            history.group_sizes[groups[i]] += 1;
        }
    }

    let mut best = (f64::NEG_INFINITY, 0usize, trainer.params.clone());
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut stats = Vec::new();
        match &node_batch {
            Some(batch) => stats.push((batch.instances.clone(), trainer.step(batch, epoch)?)),
            None => {
                let mut order = train_idx.clone();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch = make_batch(chunk)?;
                    stats.push((batch.instances.clone(), trainer.step(&batch, epoch)?));
                }
            }
        }

        let mut record = EpochRecord {
            epoch,
            loss_ce: 0.0,
            loss_re: None,
            loss_aux: None,
            val_macro_f: macro_f_on(&trainer.nets, &trainer.params, &val_batch)?,
            group_weight: vec![None; num_groups],
            group_train_acc: vec![None; num_groups],
        };
        let total: usize = stats.iter().map(|(i, _)| i.len()).sum();
        let avg = |f: &dyn Fn(&StepStats) -> Option<f64>| -> Option<f64> {
            let mut acc = 0.0;
            for (idx, s) in &stats {
                acc += f(s)? * idx.len() as f64;
            }
            Some(acc / total as f64)
        };
        record.loss_ce = avg(&|s| Some(s.loss_ce)).unwrap_or(f64::NAN);
        record.loss_re = avg(&|s| s.loss_re);
        record.loss_aux = avg(&|s| s.loss_aux);
        if let Some(groups) = &data.groups {
            let mut w_sum = vec![0.0; num_groups];
            let mut hits = vec![0usize; num_groups];
            let mut count = vec![0usize; num_groups];
            for (idx, s) in &stats {
                for (k, &i) in idx.iter().enumerate() {
                    let g = groups[i];
                    w_sum[g] += s.weights[k];
                    hits[g] += usize::from(s.correct[k]);
                    count[g] += 1;
                }
            }
            for g in 0..num_groups {
                if count[g] > 0 {
                    record.group_weight[g] = Some(w_sum[g] / count[g] as f64);
                    record.group_train_acc[g] = Some(hits[g] as f64 / count[g] as f64);
                }
            }
        }
        let val = record.val_macro_f;
        history.records.push(record);

        if val > best.0 {
            best = (val, epoch, trainer.params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }

    let (val_macro_f, best_epoch, params) = best;
    let test_batch = make_batch(&data.split.test)?;
    let mut tape = Tape::new();
    let p = trainer.nets.predict(&mut tape, &params, &test_batch, false)?;
    let groups: Option<Vec<usize>> = data
        .groups
        .as_ref()
        .map(|g| data.split.test.iter().map(|&i| g[i]).collect());
    let test = eval::evaluate(tape.value(p), &test_batch.labels, groups.as_deref())?;
    Ok(RunOutput {
        networks: trainer.nets,
        params,
        history,
        best_epoch,
        epochs_run,
        val_macro_f,
        test,
    })
}
