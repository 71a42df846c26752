use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Activation, GraphSpec, LayerKind};
use super::weights::WeightStore;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Evaluate layers `from+1 ..= to` on `tape`, with `input` bound to the
/// output of layer `from`.
///
/// Parameters become tape leaves; they take part in differentiation only when
/// `grad` is set and the store tags them trainable. Intermediate values are
/// released after their last consumer runs.
#[allow(clippy::too_many_arguments)]
pub fn run_on_tape<R: Rng + ?Sized>(
    graph: &GraphSpec,
    weights: &WeightStore,
    tape: &mut Tape,
    from: usize,
    input: Var,
    to: usize,
    grad: bool,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let layers = graph.layers();
    if from >= to || to >= layers.len() {
        return Err(Error::Graph(format!("invalid layer range {from}..={to}")));
    }
    let expected = &layers[from].output_shape;
    if &tape.shape(input)[1..] != expected.as_slice() {
        return Err(Error::shape("forward", tape.shape(input), expected));
    }

    let mut last_use = vec![0usize; layers.len()];
    for (i, layer) in layers.iter().enumerate().take(to + 1).skip(from + 1) {
        for &p in &layer.inputs {
            if p < from {
                return Err(Error::Graph(format!(
                    "layer `{}` reads `{}`, which precedes the start layer",
                    layer.name, layers[p].name
                )));
            }
            last_use[p] = i;
        }
    }

    let mut values: Vec<Option<Var>> = vec![None; layers.len()];
    values[from] = Some(input);
    let param = |tape: &mut Tape, name: &str| -> Result<Var> {
        let t = weights.get(name)?.clone();
        Ok(tape.param(name, t, grad && weights.is_trainable(name)))
    };

    for i in from + 1..=to {
        let layer = &layers[i];
        let x = values[layer.inputs[0]]
            .ok_or_else(|| Error::Graph(format!("input of `{}` not computed", layer.name)))?;
        let w = |k: usize| layer.weights[k].name.as_str();
        let out = match &layer.kind {
            LayerKind::Input => return Err(Error::Graph("input layer inside range".into())),
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let k = param(tape, w(0))?;
                let y = tape.conv2d(x, k, *stride, *padding)?;
                tape.release(k);
                y
            }
            LayerKind::BatchNorm { eps } => {
                let beta = param(tape, w(0))?;
                let mean = param(tape, w(1))?;
                let var = param(tape, w(2))?;
                let y = tape.batchnorm(x, beta, mean, var, *eps as f32)?;
                for v in [beta, mean, var] {
                    tape.release(v);
                }
                y
            }
            LayerKind::Activation { function } => match function {
                Activation::Relu => tape.relu(x)?,
                Activation::Softmax => tape.softmax(x)?,
            },
            LayerKind::Pool {
                window,
                stride,
                mode,
                padding,
            } => tape.pool2d(x, *window, *stride, *mode, *padding)?,
            LayerKind::Concat => {
                let parts = layer
                    .inputs
                    .iter()
                    .map(|&p| values[p].ok_or_else(|| Error::Graph(format!("branch of `{}` missing", layer.name))))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_channels(&parts)?
            }
            LayerKind::Flatten => tape.flatten(x)?,
            LayerKind::Dense { activation, .. } => {
                let kernel = param(tape, w(0))?;
                let bias = param(tape, w(1))?;
                let z = tape.dense(x, kernel, bias)?;
                tape.release(kernel);
                tape.release(bias);
                let y = match activation {
                    Activation::Relu => tape.relu(z)?,
                    Activation::Softmax => tape.softmax(z)?,
                };
                tape.release(z);
                y
            }
            LayerKind::Dropout { rate } => tape.dropout(x, *rate, training, rng)?,
        };
        values[i] = Some(out);
        for &p in &layer.inputs {
            if last_use[p] == i && p != from {
                if let Some(v) = values[p].take() {
                    tape.release(v);
                }
            }
        }
    }
    values[to].ok_or_else(|| Error::Graph("output not computed".into()))
}

fn check_batch(graph: &GraphSpec, batch: &Tensor) -> Result<()> {
    let [h, w, c] = graph.input_size();
    let s = batch.shape();
    if s.len() != 4 || s[1..] != [h, w, c] || s[0] == 0 {
        return Err(Error::shape("forward", s, &[0, h, w, c]));
    }
    Ok(())
}

/// Run the whole graph (no gradients) and return the final layer's output:
/// class probabilities `[N, classes]` when the head is attached.
pub fn forward<R: Rng + ?Sized>(
    graph: &GraphSpec,
    weights: &WeightStore,
    batch: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    forward_range(graph, weights, batch, 0, graph.output_index(), training, rng)
}

/// Value of a named endpoint for an input batch, in inference mode.
pub fn forward_to_endpoint(
    graph: &GraphSpec,
    weights: &WeightStore,
    batch: &Tensor,
    endpoint: &str,
) -> Result<Tensor> {
    let to = graph.endpoint(endpoint)?;
    // dropout is inactive in inference mode, so the generator is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward_range(graph, weights, batch, 0, to, false, &mut rng)
}

/// Evaluate layers after `from` given that layer's output.
pub fn forward_range<R: Rng + ?Sized>(
    graph: &GraphSpec,
    weights: &WeightStore,
    value: &Tensor,
    from: usize,
    to: usize,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if from == 0 {
        check_batch(graph, value)?;
    }
    let mut tape = Tape::new();
    let input = tape.leaf(value.clone(), false);
    let out = run_on_tape(graph, weights, &mut tape, from, input, to, false, training, rng)?;
    Ok(tape.value(out)?.as_ref().clone())
}
