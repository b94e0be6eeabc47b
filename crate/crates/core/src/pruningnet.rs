//! The meta-network: one two-layer generator per conv layer mapping the
//! layer's compression ratios to a full-size weight, cropped to the sampled
//! widths. Batch-norm parameters, running statistics and the classifier
//! are stored at maximum width and cropped to their leading channels.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, BnState, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::netdef::{sample_gene, Gene, LayerKind, NetworkTemplate, ResolvedLayer};
use crate::network::{forward, init_layers, kaiming_std, weight_shape, LayerTensors, LayerVars};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::train::{fit, EpochLog, TrainConfig, Trainable};

/// Width of the generator's hidden layer.
pub const HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Weights generated from the encoding.
    Predict,
    /// One shared max-width weight per layer, cropped (no weight prediction).
    Direct,
}

/// Generator for one conv layer: `fc2(relu(fc1(ratios)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningBlock {
    pub layer: usize,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Generated(PruningBlock),
    Shared(Tensor),
    Classifier { weight: Tensor, bias: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStore {
    pub source: Source,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub bn: BnState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruningNet {
    template: NetworkTemplate,
    mode: Mode,
    full: Vec<ResolvedLayer>,
    layers: Vec<LayerStore>,
}

impl PruningNet {
    pub fn new(template: &NetworkTemplate, mode: Mode, seed: u64) -> Result<Self> {
        template.validate()?;
        let full = template.resolve(&template.full_gene())?;
        let mut rng = stream(seed, 0x9e7);
        let init = init_layers(template, &full, &mut rng);
        let mut layers = Vec::with_capacity(full.len());
        for (l, (spec, t)) in template.layers.iter().zip(init).enumerate() {
            let source = match (spec.kind, mode) {
                (LayerKind::Linear, _) => Source::Classifier {
                    weight: t.weight,
                    bias: t.bias.expect("linear layers have a bias"),
                },
                (_, Mode::Direct) => Source::Shared(t.weight),
                (_, Mode::Predict) => Source::Generated(init_block(template, l, t.weight.shape(), &mut rng)),
            };
            layers.push(LayerStore {
                source,
                gamma: t.gamma,
                beta: t.beta,
                bn: BnState::new(if spec.kind == LayerKind::Linear { 0 } else { full[l].c_out }),
            });
        }
        Ok(PruningNet {
            template: template.clone(),
            mode,
            full,
            layers,
        })
    }

    /// The ablation without weight prediction.
    pub fn make_direct_variant(template: &NetworkTemplate, seed: u64) -> Result<Self> {
        Self::new(template, Mode::Direct, seed)
    }

    pub fn template(&self) -> &NetworkTemplate {
        &self.template
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layers(&self) -> &[LayerStore] {
        &self.layers
    }

    /// Running statistics accumulated during meta-training, cropped to `dims`.
    pub fn stored_bn(&self, dims: &[ResolvedLayer]) -> Vec<BnState> {
        self.layers.iter().zip(dims).map(|(s, d)| crop_state(&s.bn, d.c_out)).collect()
    }

    /// Named trainable tensors in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, s) in self.layers.iter().enumerate() {
            match &s.source {
                Source::Generated(b) => {
                    out.push((format!("layer{l}.fc1.weight"), &b.fc1_w));
                    out.push((format!("layer{l}.fc1.bias"), &b.fc1_b));
                    out.push((format!("layer{l}.fc2.weight"), &b.fc2_w));
                    out.push((format!("layer{l}.fc2.bias"), &b.fc2_b));
                }
                Source::Shared(w) => out.push((format!("layer{l}.weight"), w)),
                Source::Classifier { weight, bias } => {
                    out.push((format!("layer{l}.weight"), weight));
                    out.push((format!("layer{l}.bias"), bias));
                }
            }
            if let (Some(g), Some(b)) = (&s.gamma, &s.beta) {
                out.push((format!("layer{l}.bn.gamma"), g));
                out.push((format!("layer{l}.bn.beta"), b));
            }
        }
        out
    }

    fn params_in_order(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.layers {
            match &mut s.source {
                Source::Generated(b) => out.extend([&mut b.fc1_w, &mut b.fc1_b, &mut b.fc2_w, &mut b.fc2_b]),
                Source::Shared(w) => out.push(w),
                Source::Classifier { weight, bias } => out.extend([weight, bias]),
            }
            if let (Some(g), Some(b)) = (&mut s.gamma, &mut s.beta) {
                out.extend([g, b]);
            }
        }
        out
    }

    fn dims_for(&self, widths: &[usize]) -> Result<Vec<ResolvedLayer>> {
        self.template.resolve_widths(widths)
    }

    /// Puts every layer's weights for `widths` on `tape`. Parameters enter
    /// as trainable leaves (returned in `named_params` order) when
    /// `trainable`, otherwise as constants.
    fn build(&self, tape: &mut Tape, widths: &[usize], trainable: bool) -> Result<(Vec<LayerVars>, Vec<Var>)> {
        let dims = self.dims_for(widths)?;
        let ratios = self.template.ratios_of_widths(widths)?;
        let mut params = Vec::new();
        let mut leaf = |tape: &mut Tape, t: &Tensor| {
            let v = if trainable { tape.param(t) } else { tape.constant(t.clone()) };
            params.push(v);
            v
        };
        let mut vars = Vec::with_capacity(dims.len());
        for (l, ((s, spec), d)) in self.layers.iter().zip(&self.template.layers).zip(&dims).enumerate() {
            let full = self.full[l];
            let (weight, bias) = match &s.source {
                Source::Generated(b) => {
                    let full_w = generate_on_tape(tape, b, &ratios[l], &mut leaf, weight_shape(spec.kind, spec.kernel, full.c_in, full.c_out))?;
                    (crop_weight(tape, full_w, spec.kind, d)?, None)
                }
                Source::Shared(w) => {
                    let w = leaf(tape, w);
                    (crop_weight(tape, w, spec.kind, d)?, None)
                }
                Source::Classifier { weight, bias } => {
                    let w = leaf(tape, weight);
                    let b = leaf(tape, bias);
                    (tape.crop(w, &[d.c_out, d.c_in])?, Some(tape.crop(b, &[d.c_out])?))
                }
            };
            let mut affine = |t: &Option<Tensor>, tape: &mut Tape| -> Result<Option<Var>> {
                t.as_ref().map(|t| {
                    let v = leaf(tape, t);
                    tape.crop(v, &[d.c_out])
                })
                .transpose()
            };
            let gamma = affine(&s.gamma, tape)?;
            let beta = affine(&s.beta, tape)?;
            vars.push(LayerVars { weight, bias, gamma, beta });
        }
        Ok((vars, params))
    }

    /// Cropped weights for a gene on the channel grid.
    pub fn generate_weights(&self, gene: &Gene) -> Result<Vec<LayerTensors>> {
        self.template.validate_gene(gene)?;
        self.generate_widths(gene.as_slice())
    }

    /// Cropped weights for arbitrary in-range widths.
    pub fn generate_widths(&self, widths: &[usize]) -> Result<Vec<LayerTensors>> {
        let mut tape = Tape::new();
        let (vars, _) = self.build(&mut tape, widths, false)?;
        let take = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        Ok(vars
            .iter()
            .map(|v| LayerTensors {
                weight: tape.value(v.weight).clone(),
                bias: take(v.bias),
                gamma: take(v.gamma),
                beta: take(v.beta),
            })
            .collect())
    }

    /// Uncropped max-width weight of every conv layer for `widths`
    /// (`None` for linear layers).
    pub fn generate_full(&self, widths: &[usize]) -> Result<Vec<Option<Tensor>>> {
        let ratios = self.template.ratios_of_widths(widths)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, (s, spec)) in self.layers.iter().zip(&self.template.layers).enumerate() {
            let full = self.full[l];
            out.push(match &s.source {
                Source::Generated(b) => {
                    let mut tape = Tape::new();
                    let mut leaf = |tape: &mut Tape, t: &Tensor| tape.constant(t.clone());
                    let shape = weight_shape(spec.kind, spec.kernel, full.c_in, full.c_out);
                    let v = generate_on_tape(&mut tape, b, &ratios[l], &mut leaf, shape)?;
                    Some(tape.take(v))
                }
                Source::Shared(w) => Some(w.clone()),
                Source::Classifier { .. } => None,
            });
        }
        Ok(out)
    }

    /// Cross-entropy of the pruned network for `widths` on `batch`, with
    /// batch norm in train mode. Gradients land on the meta-network's
    /// parameters and the max-width running statistics are updated in
    /// their leading channels.
    pub fn forward_loss_widths(&mut self, widths: &[usize], batch: &Batch) -> Result<f64> {
        let dims = self.dims_for(widths)?;
        let mut tape = Tape::new();
        let (vars, params) = self.build(&mut tape, widths, true)?;
        let mut bn = self.stored_bn(&dims);
        let x = tape.constant(batch.images.clone());
        let logits = forward(&mut tape, &self.template, &vars, &mut bn, BnMode::train(), x)?;
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec))
            .collect();
        for (p, g) in self.params_in_order().into_iter().zip(grads) {
            p.grad = Some(g);
        }
        for (s, sub) in self.layers.iter_mut().zip(&bn) {
            s.bn.store_leading(sub);
        }
        Ok(value)
    }

    pub fn forward_loss(&mut self, gene: &Gene, batch: &Batch) -> Result<f64> {
        self.template.validate_gene(gene)?;
        self.forward_loss_widths(gene.as_slice(), batch)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_in_order() {
            p.zero_grad();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.named_params() {
            ck.push(name, t.clone().with_requires_grad(false));
        }
        for (l, s) in self.layers.iter().enumerate() {
            if s.bn.channels() > 0 {
                let c = s.bn.channels();
                ck.push(format!("layer{l}.bn.running_mean"), Tensor::from_parts(vec![c], s.bn.mean.clone()));
                ck.push(format!("layer{l}.bn.running_var"), Tensor::from_parts(vec![c], s.bn.var.clone()));
            }
        }
        ck
    }

    /// Rebuilds a meta-network for `template` from a checkpoint; the mode
    /// follows from which tensors are present.
    pub fn from_checkpoint(template: &NetworkTemplate, ck: &Checkpoint) -> Result<Self> {
        let mode = if ck.tensors.iter().any(|(n, _)| n.contains(".fc1.")) {
            Mode::Predict
        } else {
            Mode::Direct
        };
        let mut net = Self::new(template, mode, 0)?;
        let names: Vec<(String, Vec<usize>)> = net
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let expected = names.len() + net.layers.iter().filter(|s| s.bn.channels() > 0).count() * 2;
        if ck.tensors.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, template `{}` needs {expected}",
                ck.tensors.len(),
                template.name
            )));
        }
        for ((name, shape), p) in names.iter().zip(net.params_in_order()) {
            *p = ck.expect(name, shape)?.clone().with_requires_grad(true);
        }
        for (l, s) in net.layers.iter_mut().enumerate() {
            let c = s.bn.channels();
            if c > 0 {
                s.bn.mean = ck.expect(&format!("layer{l}.bn.running_mean"), &[c])?.data().to_vec();
                s.bn.var = ck.expect(&format!("layer{l}.bn.running_var"), &[c])?.data().to_vec();
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(template: &NetworkTemplate, path: &Path) -> Result<Self> {
        Self::from_checkpoint(template, &Checkpoint::load(path)?)
    }
}

impl Trainable for PruningNet {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params_in_order()
    }

    /// Draws a fresh gene for every batch.
    fn step_loss(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<f64> {
        let gene = sample_gene(&self.template, rng);
        self.forward_loss_widths(gene.as_slice(), batch)
    }
}

/// Stochastic structure sampling: every step trains on a freshly sampled
/// gene. Returns the per-epoch log.
pub fn train_meta(pnet: &mut PruningNet, data: &Dataset, config: &TrainConfig, seed: u64) -> Result<Vec<EpochLog>> {
    fit(pnet, data, config, seed)
}

fn crop_state(s: &BnState, c: usize) -> BnState {
    if s.channels() == 0 {
        s.clone()
    } else {
        s.leading(c)
    }
}

fn crop_weight(tape: &mut Tape, w: Var, kind: LayerKind, d: &ResolvedLayer) -> Result<Var> {
    match kind {
        LayerKind::Depthwise => tape.crop_channels(w, d.c_out, 1),
        _ => tape.crop_channels(w, d.c_out, d.c_in),
    }
}

fn generate_on_tape(
    tape: &mut Tape,
    b: &PruningBlock,
    ratios: &[f64],
    leaf: &mut impl FnMut(&mut Tape, &Tensor) -> Var,
    shape: Vec<usize>,
) -> Result<Var> {
    let w1 = leaf(tape, &b.fc1_w);
    let b1 = leaf(tape, &b.fc1_b);
    let w2 = leaf(tape, &b.fc2_w);
    let b2 = leaf(tape, &b.fc2_b);
    let r = tape.constant(Tensor::new(&[1, ratios.len()], ratios.to_vec())?);
    let h = tape.linear(r, w1, Some(b1))?;
    let h = tape.relu(h);
    let out = tape.linear(h, w2, Some(b2))?;
    tape.reshape(out, &shape)
}

/// fc1 gets the usual `U(-1/sqrt(d), 1/sqrt(d))` init; fc2 is scaled so the
/// full-width generated weight has Kaiming std for its fan-in.
fn init_block<R: Rng + ?Sized>(template: &NetworkTemplate, layer: usize, shape: &[usize], rng: &mut R) -> PruningBlock {
    let d = template.ratio_dim(layer);
    let bound = 1.0 / (d as f64).sqrt();
    let fc1_w = Tensor::uniform(&[HIDDEN, d], -bound, bound, rng);
    let fc1_b = Tensor::uniform(&[HIDDEN], -bound, bound, rng);
    let h_norm = (0..HIDDEN)
        .map(|j| {
            let pre: f64 = fc1_b.data()[j] + (0..d).map(|i| fc1_w.data()[j * d + i]).sum::<f64>();
            pre.max(0.0).powi(2)
        })
        .sum::<f64>()
        .sqrt()
        .max(1e-3);
    let n: usize = shape.iter().product();
    PruningBlock {
        layer,
        fc1_w,
        fc1_b,
        fc2_w: Tensor::randn(&[n, HIDDEN], kaiming_std(shape) / h_norm, rng),
        fc2_b: Tensor::zeros(&[n]),
    }
}
