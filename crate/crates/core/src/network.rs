//! Forward pass of a pruned network given concrete per-layer weights.
//! Shared by the meta-network (generated weights), search-time evaluation
//! and from-scratch training.

use rand::Rng;

use crate::autodiff::{BnMode, BnState, RunningUpdate, Tape, Var};
use crate::data::{BatchStream, Augment, Dataset};
use crate::error::{Error, Result};
use crate::netdef::{LayerKind, NetworkTemplate, ResolvedLayer};
use crate::tensor::Tensor;

/// Weights of one layer at its pruned widths. Conv and depthwise layers
/// carry batch-norm affine parameters; linear layers carry a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTensors {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

impl LayerTensors {
    pub fn to_constants(&self, tape: &mut Tape) -> LayerVars {
        LayerVars {
            weight: tape.constant(self.weight.clone()),
            bias: self.bias.clone().map(|t| tape.constant(t)),
            gamma: self.gamma.clone().map(|t| tape.constant(t)),
            beta: self.beta.clone().map(|t| tape.constant(t)),
        }
    }
}

/// Weight shape of a layer with the given widths.
pub fn weight_shape(kind: LayerKind, kernel: [usize; 2], c_in: usize, c_out: usize) -> Vec<usize> {
    match kind {
        LayerKind::Conv => vec![c_out, c_in, kernel[0], kernel[1]],
        LayerKind::Depthwise => vec![c_out, 1, kernel[0], kernel[1]],
        LayerKind::Linear => vec![c_out, c_in],
    }
}

/// Fresh running statistics (mean 0, variance 1) for every normalized
/// layer; linear layers get an empty placeholder.
pub fn fresh_bn(template: &NetworkTemplate, dims: &[ResolvedLayer]) -> Vec<BnState> {
    template
        .layers
        .iter()
        .zip(dims)
        .map(|(l, d)| match l.kind {
            LayerKind::Linear => BnState::new(0),
            _ => BnState::new(d.c_out),
        })
        .collect()
}

/// Runs `x` through the template. `bn[l]` must match layer `l`'s output width.
pub fn forward(
    tape: &mut Tape,
    template: &NetworkTemplate,
    layers: &[LayerVars],
    bn: &mut [BnState],
    mode: BnMode,
    x: Var,
) -> Result<Var> {
    if layers.len() != template.layers.len() || bn.len() != template.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "template has {} layers, got {} weight sets and {} norm states",
            template.layers.len(),
            layers.len(),
            bn.len()
        )));
    }
    let mut x = x;
    let mut skip: Option<Var> = None;
    for (l, (spec, vars)) in template.layers.iter().zip(layers).enumerate() {
        let block = template.blocks.iter().find(|b| b.shortcut && (b.start..b.end).contains(&l));
        if block.is_some_and(|b| b.start == l) {
            skip = Some(x);
        }
        x = match spec.kind {
            LayerKind::Linear => {
                if tape.shape(x).len() == 4 {
                    x = tape.global_avg_pool(x)?;
                }
                tape.linear(x, vars.weight, vars.bias)?
            }
            kind => {
                let y = if kind == LayerKind::Conv {
                    tape.conv2d(x, vars.weight, spec.stride, spec.pad)?
                } else {
                    tape.depthwise_conv2d(x, vars.weight, spec.stride, spec.pad)?
                };
                let (g, b) = vars
                    .gamma
                    .zip(vars.beta)
                    .ok_or_else(|| Error::InvalidArgument(format!("layer {l} lacks batch-norm parameters")))?;
                let y = tape.batchnorm(y, g, b, &mut bn[l], mode)?;
                if spec.relu {
                    tape.relu(y)
                } else {
                    y
                }
            }
        };
        if let Some(b) = block.filter(|b| b.end == l + 1) {
            let s = skip.take().ok_or_else(|| Error::InvalidTemplate(format!("block ending at {} has no input", b.end)))?;
            x = tape.add(x, s)?;
        }
    }
    Ok(x)
}

/// Logits for `images` with fixed weights.
pub fn logits(
    template: &NetworkTemplate,
    weights: &[LayerTensors],
    bn: &mut [BnState],
    mode: BnMode,
    images: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<LayerVars> = weights.iter().map(|w| w.to_constants(&mut tape)).collect();
    let x = tape.constant(images.clone());
    let y = forward(&mut tape, template, &vars, bn, mode, x)?;
    Ok(tape.take(y))
}

pub const EVAL_BATCH: usize = 256;

/// Top-1 accuracy with batch norm in eval mode.
pub fn accuracy(template: &NetworkTemplate, weights: &[LayerTensors], bn: &[BnState], ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut bn = bn.to_vec();
    let [c, h, w] = ds.shape();
    let per = c * h * w;
    let mut correct = 0usize;
    for start in (0..ds.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(ds.len());
        let images = Tensor::new(&[end - start, c, h, w], ds.pixels()[start * per..end * per].to_vec())?;
        let out = logits(template, weights, &mut bn, BnMode::Eval, &images)?;
        correct += out
            .argmax_rows()
            .iter()
            .zip(&ds.labels()[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Re-estimates running statistics from scratch by equal-weight averaging
/// over the first `n_images` of a seeded shuffle of `calib`.
pub fn recalibrate(
    template: &NetworkTemplate,
    weights: &[LayerTensors],
    dims: &[ResolvedLayer],
    calib: &Dataset,
    n_images: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<BnState>> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("calibration needs at least one image".into()));
    }
    let mut bn = fresh_bn(template, dims);
    let stream = BatchStream::new(calib, batch_size, Augment::None, seed)?;
    let mut seen = 0;
    let mut epoch = 0;
    while seen < n_images {
        for batch in stream.epoch(epoch) {
            if seen >= n_images {
                break;
            }
            let take = batch.labels.len().min(n_images - seen);
            let images = if take < batch.labels.len() {
                let s = batch.images.shape().to_vec();
                let per: usize = s[1..].iter().product();
                Tensor::new(&[take, s[1], s[2], s[3]], batch.images.data()[..take * per].to_vec())?
            } else {
                batch.images
            };
            logits(template, weights, &mut bn, BnMode::Train(RunningUpdate::Cumulative), &images)?;
            seen += take;
        }
        epoch += 1;
    }
    Ok(bn)
}

/// Kaiming-normal std for a weight of the given shape (fan-in mode).
pub fn kaiming_std(shape: &[usize]) -> f64 {
    let fan_in: usize = shape[1..].iter().product();
    (2.0 / fan_in as f64).sqrt()
}

/// Freshly initialized weights at the widths `dims`.
pub fn init_layers<R: Rng + ?Sized>(template: &NetworkTemplate, dims: &[ResolvedLayer], rng: &mut R) -> Vec<LayerTensors> {
    template
        .layers
        .iter()
        .zip(dims)
        .map(|(spec, d)| {
            let shape = weight_shape(spec.kind, spec.kernel, d.c_in, d.c_out);
            match spec.kind {
                LayerKind::Linear => {
                    let bound = 1.0 / (d.c_in as f64).sqrt();
                    LayerTensors {
                        weight: Tensor::uniform(&shape, -bound, bound, rng),
                        bias: Some(Tensor::zeros(&[d.c_out])),
                        gamma: None,
                        beta: None,
                    }
                }
                _ => LayerTensors {
                    weight: Tensor::randn(&shape, kaiming_std(&shape), rng),
                    bias: None,
                    gamma: Some(Tensor::ones(&[d.c_out])),
                    beta: Some(Tensor::zeros(&[d.c_out])),
                },
            }
        })
        .collect()
}
