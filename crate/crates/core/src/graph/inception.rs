//! Inception-v3 up to the `mixed8` grid reduction, plus the dense head.
//!
//! Block catalog (NHWC, every conv is conv → batchnorm → relu):
//!
//! * stem: 3×3/2 32 valid, 3×3 32 valid, 3×3 64 same, maxpool 3×3/2,
//!   1×1 80 valid, 3×3 192 valid, maxpool 3×3/2
//! * mixed0–2 (inception-A): 1×1 64 | 1×1 48 → 5×5 64 | 1×1 64 → 3×3 96 → 3×3 96
//!   | avgpool 3×3 → 1×1 {32, 64, 64}
//! * mixed3 (reduction-A): 3×3/2 384 | 1×1 64 → 3×3 96 → 3×3/2 96 | maxpool 3×3/2
//! * mixed4–7 (inception-B, width w ∈ {128, 160, 160, 192}): 1×1 192
//!   | 1×1 w → 1×7 w → 7×1 192 | 1×1 w → 7×1 w → 1×7 w → 7×1 w → 1×7 192
//!   | avgpool 3×3 → 1×1 192
//! * mixed8 (reduction-B): 1×1 192 → 3×3/2 320 | 1×1 192 → 1×7 192 → 7×1 192
//!   → 3×3/2 192 | maxpool 3×3/2

use std::collections::BTreeMap;

use super::spec::{Activation, GraphSpec, HeadConfig, LayerKind, LayerSpec, WeightRole, WeightSpec};
use crate::error::{Error, Result};
use crate::ops::{output_extent, Padding, PoolMode, DEFAULT_BN_EPS};

pub const DEFAULT_INPUT_SIZE: usize = 150;
pub const DEFAULT_HIDDEN_UNITS: usize = 1024;
pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;
pub const NUM_CLASSES: usize = 3;

struct Builder {
    layers: Vec<LayerSpec>,
    endpoints: BTreeMap<String, usize>,
    input: [usize; 3],
    block: String,
    convs: usize,
    pools: usize,
    bn_eps: f64,
}

impl Builder {
    fn new(input: [usize; 3], bn_eps: f64) -> Self {
        let mut b = Self {
            layers: Vec::new(),
            endpoints: BTreeMap::new(),
            input,
            block: "input".into(),
            convs: 0,
            pools: 0,
            bn_eps,
        };
        let idx = b.push("input".into(), LayerKind::Input, vec![], input.to_vec(), vec![]);
        b.endpoints.insert("input".into(), idx);
        b
    }

    fn push(
        &mut self,
        name: String,
        kind: LayerKind,
        inputs: Vec<usize>,
        output_shape: Vec<usize>,
        weights: Vec<WeightSpec>,
    ) -> usize {
        self.layers.push(LayerSpec {
            name,
            kind,
            inputs,
            output_shape,
            weights,
            block: self.block.clone(),
        });
        self.layers.len() - 1
    }

    fn shape(&self, idx: usize) -> &[usize] {
        &self.layers[idx].output_shape
    }

    fn too_small(&self, layer: String) -> Error {
        Error::InputTooSmall {
            layer,
            height: self.input[0],
            width: self.input[1],
        }
    }

    fn spatial(
        &self,
        name: &str,
        from: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<(usize, usize)> {
        let s = self.shape(from);
        let h = output_extent(s[0], kh, stride, padding).ok_or_else(|| self.too_small(name.into()))?;
        let w = output_extent(s[1], kw, stride, padding).ok_or_else(|| self.too_small(name.into()))?;
        Ok((h.0, w.0))
    }

    /// conv → batchnorm → relu; returns the relu layer.
    fn conv(
        &mut self,
        from: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<usize> {
        let i = self.convs;
        self.convs += 1;
        let name = format!("conv_{i}");
        let (h, w) = self.spatial(&name, from, kernel, stride, padding)?;
        let in_c = self.shape(from)[2];
        let conv = self.push(
            name.clone(),
            LayerKind::Conv {
                kh: kernel.0,
                kw: kernel.1,
                filters,
                stride,
                padding,
            },
            vec![from],
            vec![h, w, filters],
            vec![WeightSpec {
                name: format!("{name}/kernel"),
                shape: vec![kernel.0, kernel.1, in_c, filters],
                role: WeightRole::Kernel,
            }],
        );
        let bn_weight = |suffix: &str, role| WeightSpec {
            name: format!("bn_{i}/{suffix}"),
            shape: vec![filters],
            role,
        };
        let bn = self.push(
            format!("bn_{i}"),
            LayerKind::BatchNorm { eps: self.bn_eps },
            vec![conv],
            vec![h, w, filters],
            vec![
                bn_weight("beta", WeightRole::Beta),
                bn_weight("moving_mean", WeightRole::MovingMean),
                bn_weight("moving_var", WeightRole::MovingVar),
            ],
        );
        Ok(self.push(
            format!("relu_{i}"),
            LayerKind::Activation {
                function: Activation::Relu,
            },
            vec![bn],
            vec![h, w, filters],
            vec![],
        ))
    }

    fn pool(
        &mut self,
        from: usize,
        window: usize,
        stride: usize,
        mode: PoolMode,
        padding: Padding,
    ) -> Result<usize> {
        let name = format!(
            "{}pool_{}",
            if mode == PoolMode::Max { "max" } else { "avg" },
            self.pools
        );
        self.pools += 1;
        let (h, w) = self.spatial(&name, from, (window, window), stride, padding)?;
        let c = self.shape(from)[2];
        Ok(self.push(
            name,
            LayerKind::Pool {
                window,
                stride,
                mode,
                padding,
            },
            vec![from],
            vec![h, w, c],
            vec![],
        ))
    }

    /// Concatenate branch outputs and register the result as a named endpoint.
    fn mixed(&mut self, branches: Vec<usize>) -> usize {
        let name = self.block.clone();
        let [h, w, _] = self.shape(branches[0]).try_into().expect("feature map");
        let c = branches.iter().map(|&b| self.shape(b)[2]).sum();
        let idx = self.push(name.clone(), LayerKind::Concat, branches, vec![h, w, c], vec![]);
        self.endpoints.insert(name, idx);
        idx
    }

    fn enter(&mut self, block: &str) {
        self.block = block.to_string();
    }

    fn inception_a(&mut self, x: usize, pool_width: usize) -> Result<usize> {
        use Padding::Same;
        let b1 = self.conv(x, 64, (1, 1), 1, Same)?;

        let b5 = self.conv(x, 48, (1, 1), 1, Same)?;
        let b5 = self.conv(b5, 64, (5, 5), 1, Same)?;

        let b3 = self.conv(x, 64, (1, 1), 1, Same)?;
        let b3 = self.conv(b3, 96, (3, 3), 1, Same)?;
        let b3 = self.conv(b3, 96, (3, 3), 1, Same)?;

        let bp = self.pool(x, 3, 1, PoolMode::Avg, Same)?;
        let bp = self.conv(bp, pool_width, (1, 1), 1, Same)?;
        Ok(self.mixed(vec![b1, b5, b3, bp]))
    }

    fn reduction_a(&mut self, x: usize) -> Result<usize> {
        use Padding::{Same, Valid};
        let b3 = self.conv(x, 384, (3, 3), 2, Valid)?;

        let bd = self.conv(x, 64, (1, 1), 1, Same)?;
        let bd = self.conv(bd, 96, (3, 3), 1, Same)?;
        let bd = self.conv(bd, 96, (3, 3), 2, Valid)?;

        let bp = self.pool(x, 3, 2, PoolMode::Max, Valid)?;
        Ok(self.mixed(vec![b3, bd, bp]))
    }

    /// Factorized 7×7 block: every 7×7 is a 1×7 followed by a 7×1 (or reverse).
    fn inception_b(&mut self, x: usize, width: usize) -> Result<usize> {
        use Padding::Same;
        let b1 = self.conv(x, 192, (1, 1), 1, Same)?;

        let b7 = self.conv(x, width, (1, 1), 1, Same)?;
        let b7 = self.conv(b7, width, (1, 7), 1, Same)?;
        let b7 = self.conv(b7, 192, (7, 1), 1, Same)?;

        let bd = self.conv(x, width, (1, 1), 1, Same)?;
        let bd = self.conv(bd, width, (7, 1), 1, Same)?;
        let bd = self.conv(bd, width, (1, 7), 1, Same)?;
        let bd = self.conv(bd, width, (7, 1), 1, Same)?;
        let bd = self.conv(bd, 192, (1, 7), 1, Same)?;

        let bp = self.pool(x, 3, 1, PoolMode::Avg, Same)?;
        let bp = self.conv(bp, 192, (1, 1), 1, Same)?;
        Ok(self.mixed(vec![b1, b7, bd, bp]))
    }

    fn reduction_b(&mut self, x: usize) -> Result<usize> {
        use Padding::{Same, Valid};
        let b3 = self.conv(x, 192, (1, 1), 1, Same)?;
        let b3 = self.conv(b3, 320, (3, 3), 2, Valid)?;

        let b7 = self.conv(x, 192, (1, 1), 1, Same)?;
        let b7 = self.conv(b7, 192, (1, 7), 1, Same)?;
        let b7 = self.conv(b7, 192, (7, 1), 1, Same)?;
        let b7 = self.conv(b7, 192, (3, 3), 2, Valid)?;

        let bp = self.pool(x, 3, 2, PoolMode::Max, Valid)?;
        Ok(self.mixed(vec![b3, b7, bp]))
    }
}

/// Inception-v3 backbone for `height × width × 3` input, ending at `mixed8`.
pub fn build_backbone(height: usize, width: usize) -> Result<GraphSpec> {
    build_backbone_with_eps(height, width, DEFAULT_BN_EPS)
}

pub fn build_backbone_with_eps(height: usize, width: usize, bn_eps: f64) -> Result<GraphSpec> {
    use Padding::{Same, Valid};
    if bn_eps.is_nan() || bn_eps <= 0.0 {
        return Err(Error::Config(format!("batchnorm eps must be positive, got {bn_eps}")));
    }
    let mut b = Builder::new([height, width, 3], bn_eps);

    b.enter("stem");
    let x = b.conv(0, 32, (3, 3), 2, Valid)?;
    let x = b.conv(x, 32, (3, 3), 1, Valid)?;
    let x = b.conv(x, 64, (3, 3), 1, Same)?;
    let x = b.pool(x, 3, 2, PoolMode::Max, Valid)?;
    let x = b.conv(x, 80, (1, 1), 1, Valid)?;
    let x = b.conv(x, 192, (3, 3), 1, Valid)?;
    let mut x = b.pool(x, 3, 2, PoolMode::Max, Valid)?;
    b.endpoints.insert("stem".into(), x);

    for (i, pool_width) in [32, 64, 64].into_iter().enumerate() {
        b.enter(&format!("mixed{i}"));
        x = b.inception_a(x, pool_width)?;
    }
    b.enter("mixed3");
    x = b.reduction_a(x)?;
    for (i, width) in [128, 160, 160, 192].into_iter().enumerate() {
        b.enter(&format!("mixed{}", i + 4));
        x = b.inception_b(x, width)?;
    }
    b.enter("mixed8");
    b.reduction_b(x)?;

    GraphSpec::from_parts(b.layers, b.endpoints, b.input, None)
}

/// Append flatten → dense(hidden, relu) → dropout → dense(classes, softmax)
/// after `mixed8`.
pub fn attach_head(
    graph: GraphSpec,
    hidden_units: usize,
    dropout_rate: f64,
    classes: usize,
) -> Result<GraphSpec> {
    if graph.head().is_some() {
        return Err(Error::Graph("head is already attached".into()));
    }
    if hidden_units == 0 || classes == 0 {
        return Err(Error::Config("head widths must be positive".into()));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {dropout_rate}")));
    }
    let mixed8 = graph.endpoint("mixed8")?;
    let flat: usize = graph.layer(mixed8).output_shape.iter().product();
    let input = graph.input_size();
    let mut endpoints = graph.endpoints().clone();
    let mut layers = graph.layers().to_vec();

    let mut push = |name: &str, kind, input: usize, shape: Vec<usize>, weights| {
        layers.push(LayerSpec {
            name: name.into(),
            kind,
            inputs: vec![input],
            output_shape: shape,
            weights,
            block: "head".into(),
        });
        layers.len() - 1
    };
    let dense_weights = |i: usize, fan_in: usize, units: usize| {
        vec![
            WeightSpec {
                name: format!("dense_{i}/kernel"),
                shape: vec![fan_in, units],
                role: WeightRole::Kernel,
            },
            WeightSpec {
                name: format!("dense_{i}/bias"),
                shape: vec![units],
                role: WeightRole::Bias,
            },
        ]
    };

    let f = push("flatten", LayerKind::Flatten, mixed8, vec![flat], vec![]);
    let d0 = push(
        "dense",
        LayerKind::Dense {
            units: hidden_units,
            activation: Activation::Relu,
        },
        f,
        vec![hidden_units],
        dense_weights(0, flat, hidden_units),
    );
    let dr = push(
        "dropout",
        LayerKind::Dropout { rate: dropout_rate },
        d0,
        vec![hidden_units],
        vec![],
    );
    let d1 = push(
        "dense_1",
        LayerKind::Dense {
            units: classes,
            activation: Activation::Softmax,
        },
        dr,
        vec![classes],
        dense_weights(1, hidden_units, classes),
    );
    for (name, idx) in [("flatten", f), ("dense_hidden", d0), ("dropout", dr), ("dense_out", d1)] {
        endpoints.insert(name.into(), idx);
    }

    GraphSpec::from_parts(
        layers,
        endpoints,
        input,
        Some(HeadConfig {
            hidden_units,
            dropout_rate,
            classes,
        }),
    )
}

/// Backbone plus head at the default widths.
pub fn build_classifier(input_size: usize, dropout_rate: f64) -> Result<GraphSpec> {
    attach_head(
        build_backbone(input_size, input_size)?,
        DEFAULT_HIDDEN_UNITS,
        dropout_rate,
        NUM_CLASSES,
    )
}
