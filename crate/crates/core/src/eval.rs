//! Search-time scoring of a gene through a frozen meta-network, and
//! from-scratch training of the chosen structure.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, BnState, Tape};
use crate::checkpoint::Checkpoint;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::netdef::{Gene, LayerKind, NetworkTemplate, ResolvedLayer};
use crate::network::{accuracy, forward, fresh_bn, init_layers, recalibrate, LayerTensors, LayerVars};
use crate::pruningnet::PruningNet;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::train::{fit, EpochLog, TrainConfig, Trainable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Images per class held out of training for scoring.
    pub holdout_per_class: usize,
    /// Calibration images per evaluation; `None` means `min(20000, |sub-train|)`.
    pub calib_images: Option<usize>,
    pub calib_batch: usize,
    pub calib_seed: u64,
    /// Seed of the holdout selection; fixed so that meta-training and
    /// search agree on the split.
    pub split_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            holdout_per_class: 50,
            calib_images: None,
            calib_batch: 64,
            calib_seed: 0,
            split_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn calib_count(&self, sub_train: usize) -> usize {
        self.calib_images.unwrap_or(20_000).min(sub_train)
    }
}

/// Fresh running statistics for `widths`, estimated from `n_images`
/// calibration images. The meta-network is not modified.
pub fn recalibrate_bn(
    pnet: &PruningNet,
    widths: &[usize],
    calib: &Dataset,
    n_images: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<BnState>> {
    let weights = pnet.generate_widths(widths)?;
    let dims = pnet.template().resolve_widths(widths)?;
    recalibrate(pnet.template(), &weights, &dims, calib, n_images, batch_size, seed)
}

/// Top-1 accuracy on `subval` with the given statistics, or with the
/// statistics stored during meta-training when `stats` is `None`.
pub fn evaluate(pnet: &PruningNet, widths: &[usize], subval: &Dataset, stats: Option<&[BnState]>) -> Result<f64> {
    let weights = pnet.generate_widths(widths)?;
    let stale;
    let stats = match stats {
        Some(s) => s,
        None => {
            stale = pnet.stored_bn(&pnet.template().resolve_widths(widths)?);
            &stale
        }
    };
    accuracy(pnet.template(), &weights, stats, subval)
}

/// Recalibrate-then-evaluate with a fixed calibration seed; the fitness
/// function handed to the search.
pub struct Evaluator<'a> {
    pub pnet: &'a PruningNet,
    pub calib: &'a Dataset,
    pub subval: &'a Dataset,
    pub calib_images: usize,
    pub calib_batch: usize,
    pub calib_seed: u64,
}

impl<'a> Evaluator<'a> {
    pub fn new(pnet: &'a PruningNet, calib: &'a Dataset, subval: &'a Dataset, config: &EvalConfig) -> Self {
        Evaluator {
            pnet,
            calib,
            subval,
            calib_images: config.calib_count(calib.len()),
            calib_batch: config.calib_batch,
            calib_seed: config.calib_seed,
        }
    }

    pub fn widths(&self, widths: &[usize]) -> Result<f64> {
        let weights = self.pnet.generate_widths(widths)?;
        let template = self.pnet.template();
        let dims = template.resolve_widths(widths)?;
        let stats = recalibrate(
            template,
            &weights,
            &dims,
            self.calib,
            self.calib_images,
            self.calib_batch,
            self.calib_seed,
        )?;
        accuracy(template, &weights, &stats, self.subval)
    }

    pub fn gene(&self, gene: &Gene) -> Result<f64> {
        self.pnet.template().validate_gene(gene)?;
        self.widths(gene.as_slice())
    }
}

/// A plain network at fixed widths.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedNetwork {
    pub template: NetworkTemplate,
    pub widths: Vec<usize>,
    pub layers: Vec<LayerTensors>,
    pub bn: Vec<BnState>,
}

impl PrunedNetwork {
    pub fn new(template: &NetworkTemplate, widths: &[usize], seed: u64) -> Result<Self> {
        let dims = template.resolve_widths(widths)?;
        let mut rng = stream(seed, 0xf1a);
        Ok(PrunedNetwork {
            template: template.clone(),
            widths: widths.to_vec(),
            layers: init_layers(template, &dims, &mut rng),
            bn: fresh_bn(template, &dims),
        })
    }

    pub fn dims(&self) -> Result<Vec<ResolvedLayer>> {
        self.template.resolve_widths(&self.widths)
    }

    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        accuracy(&self.template, &self.layers, &self.bn, ds)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (l, (t, s)) in self.layers.iter().zip(&self.bn).enumerate() {
            ck.push(format!("layer{l}.weight"), t.weight.clone().with_requires_grad(false));
            for (name, v) in [("bias", &t.bias), ("bn.gamma", &t.gamma), ("bn.beta", &t.beta)] {
                if let Some(v) = v {
                    ck.push(format!("layer{l}.{name}"), v.clone().with_requires_grad(false));
                }
            }
            if self.template.layers[l].kind != LayerKind::Linear {
                let c = s.channels();
                ck.push(format!("layer{l}.bn.running_mean"), Tensor::from_parts(vec![c], s.mean.clone()));
                ck.push(format!("layer{l}.bn.running_var"), Tensor::from_parts(vec![c], s.var.clone()));
            }
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

impl Trainable for PrunedNetwork {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for t in &mut self.layers {
            out.push(&mut t.weight);
            out.extend(t.bias.as_mut());
            out.extend(t.gamma.as_mut());
            out.extend(t.beta.as_mut());
        }
        out
    }

    fn step_loss(&mut self, batch: &Batch, _rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let vars: Vec<LayerVars> = self
            .layers
            .iter()
            .map(|t| {
                let mut p = |t: &Tensor| {
                    let v = tape.param(t);
                    leaves.push(v);
                    v
                };
                LayerVars {
                    weight: p(&t.weight),
                    bias: t.bias.as_ref().map(&mut p),
                    gamma: t.gamma.as_ref().map(&mut p),
                    beta: t.beta.as_ref().map(&mut p),
                }
            })
            .collect();
        let x = tape.constant(batch.images.clone());
        let logits = forward(&mut tape, &self.template, &vars, &mut self.bn, BnMode::train(), x)?;
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        let grads: Vec<Option<Vec<f64>>> = leaves.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            p.grad = g;
        }
        Ok(value)
    }
}

/// Result of training a structure from scratch.
#[derive(Clone, Debug)]
pub struct FinalTraining {
    pub network: PrunedNetwork,
    pub log: Vec<EpochLog>,
    pub test_accuracy: f64,
}

/// Random init at `widths`, SGD on `train`, accuracy on `test`.
pub fn train_from_scratch(
    template: &NetworkTemplate,
    widths: &[usize],
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<FinalTraining> {
    if train.shape() != template.input || test.shape() != template.input {
        return Err(Error::InvalidArgument(format!(
            "template `{}` expects images of shape {:?}, data has {:?}",
            template.name,
            template.input,
            train.shape()
        )));
    }
    let mut network = PrunedNetwork::new(template, widths, seed)?;
    let log = fit(&mut network, train, config, seed)?;
    let test_accuracy = network.accuracy(test)?;
    Ok(FinalTraining {
        network,
        log,
        test_accuracy,
    })
}
