use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops::{Padding, PoolMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Input,
    Conv {
        kh: usize,
        kw: usize,
        filters: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        eps: f64,
    },
    Activation {
        function: Activation,
    },
    Pool {
        window: usize,
        stride: usize,
        mode: PoolMode,
        padding: Padding,
    },
    Concat,
    Flatten,
    /// Fully connected layer with a fused activation.
    Dense {
        units: usize,
        activation: Activation,
    },
    Dropout {
        rate: f64,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Activation { .. } => "activation",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Concat => "concat",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRole {
    Kernel,
    Bias,
    Beta,
    MovingMean,
    MovingVar,
}

impl WeightRole {
    /// Moving statistics are never touched by the optimizer.
    pub fn is_statistic(self) -> bool {
        matches!(self, WeightRole::MovingMean | WeightRole::MovingVar)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: WeightRole,
}

impl WeightSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Indices of producer layers; always smaller than this layer's index.
    pub inputs: Vec<usize>,
    /// Per-sample output shape: `[H, W, C]` for feature maps, `[D]` after flatten.
    pub output_shape: Vec<usize>,
    pub weights: Vec<WeightSpec>,
    /// Block the layer belongs to (`stem`, `mixed0`, ..., `head`).
    pub block: String,
}

impl LayerSpec {
    pub fn in_head(&self) -> bool {
        self.block == "head"
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(WeightSpec::numel).sum()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HeadConfig {
    pub hidden_units: usize,
    pub dropout_rate: f64,
    pub classes: usize,
}

/// Immutable layer DAG in topological order.
#[derive(Clone, Debug, Serialize)]
pub struct GraphSpec {
    layers: Vec<LayerSpec>,
    endpoints: BTreeMap<String, usize>,
    input_size: [usize; 3],
    head: Option<HeadConfig>,
}

impl GraphSpec {
    pub(crate) fn from_parts(
        layers: Vec<LayerSpec>,
        endpoints: BTreeMap<String, usize>,
        input_size: [usize; 3],
        head: Option<HeadConfig>,
    ) -> Result<Self> {
        let graph = Self {
            layers,
            endpoints,
            input_size,
            head,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &LayerSpec {
        &self.layers[index]
    }

    pub fn endpoints(&self) -> &BTreeMap<String, usize> {
        &self.endpoints
    }

    pub fn endpoint(&self, name: &str) -> Result<usize> {
        self.endpoints
            .get(name)
            .copied()
            .ok_or_else(|| Error::Graph(format!("no endpoint named `{name}`")))
    }

    pub fn endpoint_shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.layers[self.endpoint(name)?].output_shape)
    }

    /// `[H, W, C]` of the expected input.
    pub fn input_size(&self) -> [usize; 3] {
        self.input_size
    }

    pub fn head(&self) -> Option<&HeadConfig> {
        self.head.as_ref()
    }

    pub fn output_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn weight_specs(&self) -> impl Iterator<Item = &WeightSpec> {
        self.layers.iter().flat_map(|l| l.weights.iter())
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.inputs.iter().any(|&p| p >= i) {
                return Err(Error::Graph(format!(
                    "layer `{}` consumes a later layer",
                    layer.name
                )));
            }
            for w in &layer.weights {
                if !seen.insert(w.name.as_str()) {
                    return Err(Error::Graph(format!("duplicate weight name `{}`", w.name)));
                }
            }
            if matches!(layer.kind, LayerKind::Conv { .. }) && !layer.in_head() {
                let bn = self.layers.get(i + 1).map(|l| &l.kind);
                let act = self.layers.get(i + 2).map(|l| &l.kind);
                let unit = matches!(bn, Some(LayerKind::BatchNorm { .. }))
                    && matches!(
                        act,
                        Some(LayerKind::Activation {
                            function: Activation::Relu
                        })
                    );
                if !unit {
                    return Err(Error::Graph(format!(
                        "conv `{}` is not followed by batchnorm and relu",
                        layer.name
                    )));
                }
            }
        }
        for (name, &idx) in &self.endpoints {
            if idx >= self.layers.len() {
                return Err(Error::Graph(format!("endpoint `{name}` out of range")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for GraphSpec {
    /// Layer table: index, name, kind, output shape, parameter count, inputs.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>4}  {:<14} {:<11} {:<18} {:>12}  inputs",
            "#", "layer", "kind", "output", "params"
        )?;
        for (i, l) in self.layers.iter().enumerate() {
            let inputs: Vec<String> = l
                .inputs
                .iter()
                .map(|&p| self.layers[p].name.clone())
                .collect();
            writeln!(
                f,
                "{:>4}  {:<14} {:<11} {:<18} {:>12}  {}",
                i,
                l.name,
                l.kind.name(),
                format!("{:?}", l.output_shape),
                group_thousands(l.param_count() as u64),
                inputs.join(",")
            )?;
        }
        Ok(())
    }
}

/// `22475427` -> `22,475,427`.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_grouping() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(1000), "1,000");
        assert_eq!(group_thousands(22_475_427), "22,475,427");
    }
}
