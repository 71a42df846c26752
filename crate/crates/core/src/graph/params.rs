use serde::{Deserialize, Serialize};

use super::spec::{GraphSpec, WeightSpec};

/// Which weights the optimizer may update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainablePolicy {
    /// Everything except batch-norm moving statistics.
    #[default]
    FullFinetune,
    /// Only the dense head; the backbone is a fixed feature extractor.
    HeadOnly,
}

impl TrainablePolicy {
    pub fn is_trainable(self, weight: &WeightSpec, in_head: bool) -> bool {
        if weight.role.is_statistic() {
            return false;
        }
        match self {
            TrainablePolicy::FullFinetune => true,
            TrainablePolicy::HeadOnly => in_head,
        }
    }
}

impl std::fmt::Display for TrainablePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainablePolicy::FullFinetune => "full_finetune",
            TrainablePolicy::HeadOnly => "head_only",
        })
    }
}

impl std::str::FromStr for TrainablePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full_finetune" => Ok(TrainablePolicy::FullFinetune),
            "head_only" => Ok(TrainablePolicy::HeadOnly),
            other => Err(format!("unknown trainable policy `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerParams {
    pub layer: String,
    pub total: u64,
    pub trainable: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total: u64,
    pub trainable: u64,
    pub non_trainable: u64,
    pub per_layer: Vec<LayerParams>,
}

/// Count every weight element the graph binds, split by trainability.
pub fn param_report(graph: &GraphSpec, policy: TrainablePolicy) -> ParamReport {
    let mut per_layer = Vec::new();
    let (mut total, mut trainable) = (0u64, 0u64);
    for layer in graph.layers() {
        if layer.weights.is_empty() {
            continue;
        }
        let mut lp = LayerParams {
            layer: layer.name.clone(),
            total: 0,
            trainable: 0,
        };
        for w in &layer.weights {
            let n = w.numel() as u64;
            lp.total += n;
            if policy.is_trainable(w, layer.in_head()) {
                lp.trainable += n;
            }
        }
        total += lp.total;
        trainable += lp.trainable;
        per_layer.push(lp);
    }
    ParamReport {
        total,
        trainable,
        non_trainable: total - trainable,
        per_layer,
    }
}

/// Layer census by kind, e.g. for reporting how many conv units the graph has.
pub fn layer_census(graph: &GraphSpec) -> Vec<(&'static str, usize)> {
    let mut counts: Vec<(&'static str, usize)> = Vec::new();
    for layer in graph.layers() {
        let kind = layer.kind.name();
        match counts.iter_mut().find(|(k, _)| *k == kind) {
            Some((_, n)) => *n += 1,
            None => counts.push((kind, 1)),
        }
    }
    counts
}
