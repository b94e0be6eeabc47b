//! Target-network templates, their prunable channel axes and genes.
//!
//! A template is an ordered list of layers. Each layer's output width is
//! either a prunable axis, a fixed count, or (for depthwise layers) equal to
//! its input width. Residual blocks whose input and output must agree are
//! tied to one shared stage axis, so a single gene slot controls every
//! channel count on the shortcut path.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv_out_extent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Linear,
}

/// Where a layer's output width comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    /// Gene slot `i`.
    Axis(usize),
    /// Never pruned.
    Fixed(usize),
    /// Same as the layer's input (depthwise only).
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    /// Output width of a plain layer.
    Layer,
    /// Output width shared by every block of a stage.
    Stage,
    /// Inner width of one residual block.
    Middle,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub kind: AxisKind,
    /// Unpruned width `C_o`.
    pub max: usize,
}

fn one() -> usize {
    1
}

fn unit_kernel() -> [usize; 2] {
    [1, 1]
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default = "unit_kernel")]
    pub kernel: [usize; 2],
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    pub out: Channels,
    /// Apply ReLU after batch norm. Ignored for linear layers.
    #[serde(default = "yes")]
    pub relu: bool,
    #[serde(default)]
    pub downsampling: bool,
}

/// Layers `start..end` forming one residual block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub start: usize,
    pub end: usize,
    /// Add the block input to its output.
    pub shortcut: bool,
    pub middle_axis: usize,
}

/// Blocks whose outputs share one stage axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageGroup {
    pub axis: usize,
    pub blocks: Vec<usize>,
}

/// Static description of the network to be pruned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkTemplate {
    pub name: String,
    /// `(channels, height, width)` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    pub axes: Vec<AxisSpec>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub stages: Vec<StageGroup>,
}

/// Allowed widths `min, min + step, ...` of one axis, always ending at `max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelRange {
    pub min: usize,
    pub max: usize,
    pub step: usize,
}

impl ChannelRange {
    /// Grid for an axis of unpruned width `max`: min `floor(0.1 C)`, step
    /// `floor(0.03 C)`, both clamped to at least 1.
    pub fn for_width(max: usize) -> Self {
        ChannelRange {
            min: (max / 10).max(1),
            max,
            step: (max * 3 / 100).max(1),
        }
    }

    pub fn len(&self) -> usize {
        let span = self.max - self.min;
        span / self.step + 1 + usize::from(!span.is_multiple_of(self.step))
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The `i`-th allowed width; the last one is always `max`.
    pub fn value(&self, i: usize) -> usize {
        (self.min + i * self.step).min(self.max)
    }

    pub fn contains(&self, c: usize) -> bool {
        c >= self.min && c <= self.max && ((c - self.min).is_multiple_of(self.step) || c == self.max)
    }

    pub fn values(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).map(move |i| self.value(i))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.value(rng.random_range(0..self.len()))
    }
}

/// Per-axis channel counts; the search genotype. Serialized as `c1/c2/...`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Gene(pub Vec<usize>);

impl From<Gene> for String {
    fn from(g: Gene) -> String {
        g.to_string()
    }
}

impl TryFrom<String> for Gene {
    type Error = Error;

    fn try_from(s: String) -> Result<Gene> {
        s.parse()
    }
}

impl Gene {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl fmt::Display for Gene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for Gene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Gene(Vec::new()));
        }
        s.split('/')
            .map(|part| {
                part.parse::<usize>()
                    .map_err(|_| Error::InvalidGene(format!("`{part}` is not a channel count")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Gene)
    }
}

/// Concrete widths and spatial extents of one layer under some gene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolvedLayer {
    pub c_in: usize,
    pub c_out: usize,
    /// Spatial extent of the input (before pooling, for linear layers).
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Axis(usize),
    Fixed(usize),
}

impl NetworkTemplate {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: NetworkTemplate = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template serializes")
    }

    pub fn gene_len(&self) -> usize {
        self.axes.len()
    }

    /// Input and output width sources of every layer.
    fn sources(&self) -> Result<Vec<(Source, Source)>> {
        let mut prev = Source::Fixed(self.input[0]);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let o = match l.out {
                Channels::Axis(a) if a < self.axes.len() => Source::Axis(a),
                Channels::Axis(a) => {
                    return Err(Error::InvalidTemplate(format!("layer {i} refers to missing axis {a}")))
                }
                Channels::Fixed(n) if n >= 1 => Source::Fixed(n),
                Channels::Fixed(_) => {
                    return Err(Error::InvalidTemplate(format!("layer {i} has zero fixed width")))
                }
                Channels::Input => prev,
            };
            out.push((prev, o));
            prev = o;
        }
        Ok(out)
    }

    /// Checks structural consistency.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTemplate(m));
        if self.input.contains(&0) || self.classes == 0 {
            return bad("input extents and class count must be positive".into());
        }
        if let Some(i) = self.axes.iter().position(|a| a.max == 0) {
            return bad(format!("axis {i} has zero width"));
        }
        let sources = self.sources()?;
        let mut seen_linear = false;
        for (i, l) in self.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Depthwise if l.out != Channels::Input => {
                    return bad(format!("depthwise layer {i} must use `input` as its output width"));
                }
                LayerKind::Conv | LayerKind::Linear if l.out == Channels::Input => {
                    return bad(format!("layer {i}: only depthwise layers may inherit their width"));
                }
                LayerKind::Linear => seen_linear = true,
                _ if seen_linear => return bad(format!("convolution layer {i} follows a linear layer")),
                _ => {}
            }
            if l.kernel.contains(&0) || l.stride == 0 {
                return bad(format!("layer {i} has a zero kernel extent or stride"));
            }
        }
        if let Some(last) = self.layers.last() {
            if last.kind != LayerKind::Linear || last.out != Channels::Fixed(self.classes) {
                return bad("the last layer must be a linear classifier with `classes` outputs".into());
            }
        }
        for a in 0..self.axes.len() {
            if !sources.iter().any(|&(_, o)| o == Source::Axis(a)) {
                return bad(format!("axis {a} does not control any layer"));
            }
        }
        // spatial geometry at full width
        self.resolve_widths(&self.full_widths())?;

        let mut next_free = 0;
        for (b, blk) in self.blocks.iter().enumerate() {
            if blk.start >= blk.end || blk.end > self.layers.len() || blk.start < next_free {
                return bad(format!("block {b} has an invalid or overlapping layer range"));
            }
            next_free = blk.end;
            if self.layers[blk.start..blk.end].iter().any(|l| l.kind == LayerKind::Linear) {
                return bad(format!("block {b} contains a linear layer"));
            }
            match self.axes.get(blk.middle_axis) {
                Some(a) if a.kind == AxisKind::Middle => {}
                _ => return bad(format!("block {b}: middle_axis must name a `middle` axis")),
            }
            if blk.shortcut {
                let inp = sources[blk.start].0;
                let out = sources[blk.end - 1].1;
                if inp != out {
                    return bad(format!("shortcut block {b} has different input and output widths"));
                }
                if self.layers[blk.start..blk.end].iter().any(|l| l.stride != 1) {
                    return bad(format!("shortcut block {b} changes spatial resolution"));
                }
            }
        }
        for (s, st) in self.stages.iter().enumerate() {
            match self.axes.get(st.axis) {
                Some(a) if a.kind == AxisKind::Stage => {}
                _ => return bad(format!("stage {s}: axis must name a `stage` axis")),
            }
            for &b in &st.blocks {
                let Some(blk) = self.blocks.get(b) else {
                    return bad(format!("stage {s} refers to missing block {b}"));
                };
                if sources[blk.end - 1].1 != Source::Axis(st.axis) {
                    return bad(format!("block {b} of stage {s} does not output the stage axis"));
                }
            }
        }
        Ok(())
    }

    pub fn channel_space(&self) -> Vec<ChannelRange> {
        self.axes.iter().map(|a| ChannelRange::for_width(a.max)).collect()
    }

    pub fn full_widths(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.max).collect()
    }

    pub fn full_gene(&self) -> Gene {
        Gene(self.full_widths())
    }

    pub fn min_gene(&self) -> Gene {
        Gene(self.channel_space().iter().map(|r| r.min).collect())
    }

    /// `floor(ratio * C)` per axis, at least 1. Not necessarily on the grid.
    pub fn uniform_widths(&self, ratio: f64) -> Gene {
        Gene(
            self.axes
                .iter()
                .map(|a| ((ratio * a.max as f64 + 1e-9).floor() as usize).clamp(1, a.max))
                .collect(),
        )
    }

    /// Checks that every entry lies on its axis grid.
    pub fn validate_gene(&self, gene: &Gene) -> Result<()> {
        if gene.len() != self.axes.len() {
            return Err(Error::InvalidGene(format!(
                "expected {} entries, got {}",
                self.axes.len(),
                gene.len()
            )));
        }
        let bad: Vec<String> = self
            .channel_space()
            .iter()
            .zip(gene.as_slice())
            .enumerate()
            .filter(|(_, (r, &c))| !r.contains(c))
            .map(|(i, (r, c))| format!("axis {i}: {c} not in {}..={} step {}", r.min, r.max, r.step))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGene(bad.join("; ")))
        }
    }

    /// Layer dimensions for a gene on the channel grid.
    pub fn resolve(&self, gene: &Gene) -> Result<Vec<ResolvedLayer>> {
        self.validate_gene(gene)?;
        self.resolve_widths(gene.as_slice())
    }

    /// Layer dimensions for arbitrary widths `1 <= c_i <= C_i`.
    pub fn resolve_widths(&self, widths: &[usize]) -> Result<Vec<ResolvedLayer>> {
        if widths.len() != self.axes.len() {
            return Err(Error::InvalidGene(format!(
                "expected {} entries, got {}",
                self.axes.len(),
                widths.len()
            )));
        }
        for (i, (&c, a)) in widths.iter().zip(&self.axes).enumerate() {
            if c == 0 || c > a.max {
                return Err(Error::InvalidGene(format!("axis {i}: {c} outside 1..={}", a.max)));
            }
        }
        let width = |s: Source| match s {
            Source::Axis(a) => widths[a],
            Source::Fixed(n) => n,
        };
        let mut hw = (self.input[1], self.input[2]);
        let mut out = Vec::with_capacity(self.layers.len());
        for ((inp, o), l) in self.sources()?.into_iter().zip(&self.layers) {
            let out_hw = match l.kind {
                LayerKind::Linear => (1, 1),
                _ => (
                    conv_out_extent(hw.0, l.kernel[0], l.stride, l.pad)?,
                    conv_out_extent(hw.1, l.kernel[1], l.stride, l.pad)?,
                ),
            };
            out.push(ResolvedLayer {
                c_in: width(inp),
                c_out: width(o),
                in_hw: hw,
                out_hw,
            });
            hw = out_hw;
        }
        Ok(out)
    }

    /// Every `(c_in, c_out)` pair layer `l` can take over the gene grid.
    pub fn layer_channel_pairs(&self, l: usize) -> Result<Vec<(usize, usize)>> {
        let space = self.channel_space();
        let options = |s: Source| -> Vec<usize> {
            match s {
                Source::Axis(a) => space[a].values().collect(),
                Source::Fixed(n) => vec![n],
            }
        };
        let sources = self.sources()?;
        let &(inp, out) = sources
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {l}")))?;
        if inp == out {
            return Ok(options(inp).into_iter().map(|c| (c, c)).collect());
        }
        let outs = options(out);
        Ok(options(inp)
            .into_iter()
            .flat_map(|i| outs.iter().map(move |&o| (i, o)))
            .collect())
    }

    /// Block containing layer `l`, if any.
    pub fn block_of(&self, l: usize) -> Option<usize> {
        self.blocks.iter().position(|b| (b.start..b.end).contains(&l))
    }

    /// Per-layer compression-ratio vectors fed to the weight generators.
    ///
    /// Layers outside residual blocks get `[in, out]`; layers inside a
    /// block get `[block in, block out, block middle]`.
    pub fn decode_ratios(&self, gene: &Gene) -> Result<Vec<Vec<f64>>> {
        self.validate_gene(gene)?;
        self.ratios_of_widths(gene.as_slice())
    }

    /// Ratio vectors for arbitrary in-range widths (e.g. uniform baselines
    /// that fall between grid points).
    pub fn ratios_of_widths(&self, widths: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.resolve_widths(widths)?;
        let sources = self.sources()?;
        let ratio = |s: Source| match s {
            Source::Axis(a) => widths[a] as f64 / self.axes[a].max as f64,
            Source::Fixed(_) => 1.0,
        };
        Ok((0..self.layers.len())
            .map(|l| match self.block_of(l) {
                Some(b) => {
                    let blk = &self.blocks[b];
                    vec![
                        ratio(sources[blk.start].0),
                        ratio(sources[blk.end - 1].1),
                        ratio(Source::Axis(blk.middle_axis)),
                    ]
                }
                None => vec![ratio(sources[l].0), ratio(sources[l].1)],
            })
            .collect())
    }

    /// Length of [`decode_ratios`](Self::decode_ratios)' vector for layer `l`.
    pub fn ratio_dim(&self, l: usize) -> usize {
        if self.block_of(l).is_some() {
            3
        } else {
            2
        }
    }

    /// Replaces the input geometry and the classifier width, e.g. to fit a
    /// built-in template to a dataset.
    pub fn adapted(&self, input: [usize; 3], classes: usize) -> Result<Self> {
        let mut t = self.clone();
        t.input = input;
        t.classes = classes;
        if let Some(last) = t.layers.last_mut() {
            last.out = Channels::Fixed(classes);
        }
        t.validate()?;
        Ok(t)
    }
}

/// Draws each axis independently and uniformly from its grid.
pub fn sample_gene<R: Rng + ?Sized>(template: &NetworkTemplate, rng: &mut R) -> Gene {
    Gene(template.channel_space().iter().map(|r| r.sample(rng)).collect())
}

/// Parses `c1/c2/...` or the token `full`.
pub fn parse_gene(template: &NetworkTemplate, text: &str) -> Result<Gene> {
    if text == "full" {
        return Ok(template.full_gene());
    }
    text.parse()
}

pub const BUILTIN_TEMPLATES: &[&str] = &["chain-small", "stage-small", "mobilenet-v1-224", "mobilenet-v2-224"];

pub fn builtin_template(name: &str) -> Result<NetworkTemplate> {
    let t = match name {
        "chain-small" => chain_small(),
        "stage-small" => stage_small(),
        "mobilenet-v1-224" => mobilenet_v1(),
        "mobilenet-v2-224" => mobilenet_v2(),
        other => return Err(Error::UnknownTemplate(other.to_string())),
    };
    t.validate()?;
    Ok(t)
}

pub fn builtin_templates() -> Vec<NetworkTemplate> {
    BUILTIN_TEMPLATES
        .iter()
        .map(|n| builtin_template(n).expect("builtin templates are valid"))
        .collect()
}

fn conv(k: usize, stride: usize, out: Channels) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Conv,
        kernel: [k, k],
        stride,
        pad: k / 2,
        out,
        relu: true,
        downsampling: stride > 1,
    }
}

fn depthwise(stride: usize) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Depthwise,
        kernel: [3, 3],
        stride,
        pad: 1,
        out: Channels::Input,
        relu: true,
        downsampling: stride > 1,
    }
}

fn classifier(classes: usize) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Linear,
        kernel: [1, 1],
        stride: 1,
        pad: 0,
        out: Channels::Fixed(classes),
        relu: false,
        downsampling: false,
    }
}

/// Stem convolution followed by depthwise-separable blocks `(width, stride)`.
fn separable_chain(name: &str, input: [usize; 3], classes: usize, stem: (usize, usize), blocks: &[(usize, usize)]) -> NetworkTemplate {
    let mut axes = vec![AxisSpec {
        kind: AxisKind::Layer,
        max: stem.0,
    }];
    let mut layers = vec![conv(3, stem.1, Channels::Axis(0))];
    for &(width, stride) in blocks {
        axes.push(AxisSpec {
            kind: AxisKind::Layer,
            max: width,
        });
        layers.push(depthwise(stride));
        let mut pw = conv(1, 1, Channels::Axis(axes.len() - 1));
        pw.downsampling = stride > 1;
        layers.push(pw);
    }
    layers.push(classifier(classes));
    NetworkTemplate {
        name: name.into(),
        input,
        classes,
        axes,
        layers,
        blocks: vec![],
        stages: vec![],
    }
}

fn chain_small() -> NetworkTemplate {
    separable_chain(
        "chain-small",
        [3, 32, 32],
        10,
        (16, 1),
        &[(24, 1), (32, 2), (32, 1), (32, 2), (32, 1), (32, 1)],
    )
}

fn mobilenet_v1() -> NetworkTemplate {
    separable_chain(
        "mobilenet-v1-224",
        [3, 224, 224],
        1000,
        (32, 2),
        &[
            (64, 1),
            (128, 2),
            (128, 1),
            (256, 2),
            (256, 1),
            (512, 2),
            (512, 1),
            (512, 1),
            (512, 1),
            (512, 1),
            (512, 1),
            (1024, 2),
            (1024, 1),
        ],
    )
}

/// Builder for inverted-residual networks.
struct StageBuilder {
    t: NetworkTemplate,
    /// Width source of the current feature map.
    current: Channels,
}

impl StageBuilder {
    fn new(name: &str, input: [usize; 3], classes: usize) -> Self {
        StageBuilder {
            t: NetworkTemplate {
                name: name.into(),
                input,
                classes,
                axes: vec![],
                layers: vec![],
                blocks: vec![],
                stages: vec![],
            },
            current: Channels::Fixed(input[0]),
        }
    }

    fn axis(&mut self, kind: AxisKind, max: usize) -> usize {
        self.t.axes.push(AxisSpec { kind, max });
        self.t.axes.len() - 1
    }

    fn plain(&mut self, mut layer: LayerSpec) {
        if layer.out != Channels::Input {
            self.current = layer.out;
        }
        layer.relu = true;
        self.t.layers.push(layer);
    }

    /// Expand (1x1) -> depthwise (3x3) -> linear projection (1x1) onto `out`.
    fn bottleneck(&mut self, middle: usize, stride: usize, out: Channels, shortcut: bool) -> usize {
        let mid = self.axis(AxisKind::Middle, middle);
        let start = self.t.layers.len();
        let down = stride > 1;
        let mut expand = conv(1, 1, Channels::Axis(mid));
        expand.downsampling = down;
        let mut project = conv(1, 1, out);
        project.relu = false;
        project.downsampling = down;
        self.t.layers.extend([expand, depthwise(stride), project]);
        self.t.blocks.push(BlockSpec {
            start,
            end: start + 3,
            shortcut,
            middle_axis: mid,
        });
        self.current = out;
        self.t.blocks.len() - 1
    }

    /// One stage of `n` blocks; the first changes width/resolution unless the
    /// incoming feature map already carries the stage axis.
    fn stage(&mut self, axis: usize, expansion: usize, n: usize, stride: usize) {
        let out = Channels::Axis(axis);
        let mut blocks = Vec::new();
        for i in 0..n {
            let in_width = match self.current {
                Channels::Axis(a) => self.t.axes[a].max,
                Channels::Fixed(c) => c,
                Channels::Input => unreachable!(),
            };
            let s = if i == 0 { stride } else { 1 };
            let shortcut = self.current == out && s == 1;
            blocks.push(self.bottleneck(in_width * expansion, s, out, shortcut));
        }
        self.t.stages.push(StageGroup { axis, blocks });
    }

    fn finish(mut self) -> NetworkTemplate {
        let classes = self.t.classes;
        self.t.layers.push(classifier(classes));
        self.t
    }
}

fn stage_small() -> NetworkTemplate {
    let mut b = StageBuilder::new("stage-small", [3, 32, 32], 10);
    let s0 = b.axis(AxisKind::Stage, 16);
    b.plain(conv(3, 1, Channels::Axis(s0)));
    b.stage(s0, 2, 2, 1);
    let s1 = b.axis(AxisKind::Stage, 24);
    b.stage(s1, 2, 2, 2);
    let s2 = b.axis(AxisKind::Stage, 32);
    b.stage(s2, 2, 2, 2);
    b.finish()
}

fn mobilenet_v2() -> NetworkTemplate {
    let mut b = StageBuilder::new("mobilenet-v2-224", [3, 224, 224], 1000);
    let stem = b.axis(AxisKind::Layer, 32);
    b.plain(conv(3, 2, Channels::Axis(stem)));
    // expansion-1 block: depthwise on the stem width, then projection
    let s = b.axis(AxisKind::Stage, 16);
    b.plain(depthwise(1));
    let mut project = conv(1, 1, Channels::Axis(s));
    project.relu = false;
    b.t.layers.push(project);
    b.current = Channels::Axis(s);
    for &(c, n, stride) in &[(24, 2, 2), (32, 3, 2), (64, 4, 2), (96, 3, 1), (160, 3, 2), (320, 1, 1)] {
        let s = b.axis(AxisKind::Stage, c);
        b.stage(s, 6, n, stride);
    }
    let last = b.axis(AxisKind::Layer, 1280);
    b.plain(conv(1, 1, Channels::Axis(last)));
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn channel_grid_rule() {
        assert_eq!(ChannelRange::for_width(64), ChannelRange { min: 6, max: 64, step: 1 });
        assert_eq!(ChannelRange::for_width(512), ChannelRange { min: 51, max: 512, step: 15 });
        assert_eq!(ChannelRange::for_width(8), ChannelRange { min: 1, max: 8, step: 1 });
        let r = ChannelRange::for_width(512);
        assert_eq!(r.values().nth(30), Some(501));
        assert_eq!(r.values().last(), Some(512));
        assert_eq!(r.len(), 32);
        assert!(r.contains(51) && r.contains(66) && r.contains(512));
        assert!(!r.contains(52) && !r.contains(511));
        assert_eq!(ChannelRange::for_width(64).len(), 59);
    }

    #[test]
    fn builtins_validate() {
        for t in builtin_templates() {
            t.validate().unwrap();
        }
        assert!(matches!(builtin_template("nope"), Err(Error::UnknownTemplate(_))));
    }

    #[test]
    fn mobilenet_v1_geometry() {
        let t = builtin_template("mobilenet-v1-224").unwrap();
        assert_eq!(t.input, [3, 224, 224]);
        assert_eq!(t.classes, 1000);
        let dims = t.resolve_widths(&t.full_widths()).unwrap();
        assert_eq!(dims[0].out_hw, (112, 112));
        assert_eq!(dims[dims.len() - 2].out_hw, (7, 7));
        assert_eq!(dims.last().unwrap().c_in, 1024);
    }

    #[test]
    fn gene_lengths() {
        let chain = builtin_template("chain-small").unwrap();
        let conv_blocks = chain.layers.iter().filter(|l| l.kind == LayerKind::Conv).count();
        assert_eq!(chain.gene_len(), conv_blocks);
        let stage = builtin_template("stage-small").unwrap();
        assert_eq!(stage.gene_len(), stage.stages.len() + stage.blocks.len());
        assert_eq!(stage.gene_len(), 9);
    }

    #[test]
    fn full_gene_ratios_are_one() {
        for t in builtin_templates() {
            let r = t.decode_ratios(&t.full_gene()).unwrap();
            assert!(r.iter().flatten().all(|&x| x == 1.0), "{}", t.name);
        }
    }

    fn two_layer_chain() -> NetworkTemplate {
        NetworkTemplate {
            name: "pair".into(),
            input: [3, 8, 8],
            classes: 4,
            axes: vec![
                AxisSpec { kind: AxisKind::Layer, max: 32 },
                AxisSpec { kind: AxisKind::Layer, max: 64 },
            ],
            layers: vec![conv(3, 1, Channels::Axis(0)), conv(3, 1, Channels::Axis(1)), classifier(4)],
            blocks: vec![],
            stages: vec![],
        }
    }

    #[test]
    fn chain_ratios() {
        let t = two_layer_chain();
        t.validate().unwrap();
        let r = t.decode_ratios(&Gene(vec![16, 32])).unwrap();
        assert_eq!(r[0], vec![1.0, 0.5]);
        assert_eq!(r[1], vec![0.5, 0.5]);
        assert_eq!(r[2], vec![0.5, 1.0]);
    }

    #[test]
    fn stage_ratios_share_output() {
        let t = builtin_template("stage-small").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = sample_gene(&t, &mut rng);
        let r = t.decode_ratios(&g).unwrap();
        let st = &t.stages[0];
        let (b0, b1) = (&t.blocks[st.blocks[0]], &t.blocks[st.blocks[1]]);
        assert_eq!(r[b0.start][1], r[b1.start][1]);
        assert_eq!(r[b0.start][1], g.0[st.axis] as f64 / t.axes[st.axis].max as f64);
        assert_eq!(r[b0.start][2], g.0[b0.middle_axis] as f64 / t.axes[b0.middle_axis].max as f64);
        assert_eq!(r[b1.start][2], g.0[b1.middle_axis] as f64 / t.axes[b1.middle_axis].max as f64);
    }

    #[test]
    fn invalid_gene_lists_axes() {
        let t = builtin_template("mobilenet-v1-224").unwrap();
        let mut g = t.full_gene();
        g.0[3] = 2; // below min
        g.0[13] = 1023; // off grid
        let msg = t.decode_ratios(&g).unwrap_err().to_string();
        assert!(msg.contains("axis 3") && msg.contains("axis 13"), "{msg}");
        assert!(t.validate_gene(&Gene(vec![1, 2])).is_err());
    }

    #[test]
    fn degenerate_grid_is_constant() {
        let mut t = two_layer_chain();
        t.axes = vec![AxisSpec { kind: AxisKind::Layer, max: 1 }];
        t.layers = vec![conv(3, 1, Channels::Axis(0)), classifier(4)];
        t.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_gene(&t, &mut rng), Gene(vec![1]));
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let t = builtin_template("mobilenet-v2-224").unwrap();
        let a = sample_gene(&t, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_gene(&t, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_uniform_on_grid() {
        let r = ChannelRange::for_width(64);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = vec![0usize; r.len()];
        for _ in 0..n {
            let c = r.sample(&mut rng);
            counts[(c - r.min) / r.step] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
        let p = 1.0 / r.len() as f64;
        let expect = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!((c as f64 - expect).abs() < 5.0 * sigma, "bin {i}: {c}");
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 58 dof; the 0.999 quantile is about 98
        assert!(chi2 < 98.0, "chi2 = {chi2}");
    }

    #[test]
    fn template_json_rejects_unknown_fields() {
        let t = builtin_template("stage-small").unwrap();
        let json = t.to_json();
        assert_eq!(NetworkTemplate::from_json(&json).unwrap(), t);
        let extra = json.replacen("\"classes\"", "\"colour\": 1, \"classes\"", 1);
        assert!(NetworkTemplate::from_json(&extra).is_err());
    }

    #[test]
    fn template_rejects_broken_shortcut() {
        let mut t = builtin_template("stage-small").unwrap();
        let b = t.stages[0].blocks[1];
        let last = t.blocks[b].end - 1;
        t.layers[last].out = Channels::Axis(t.blocks[b].middle_axis);
        assert!(t.validate().is_err());
    }

    #[test]
    fn gene_string_roundtrip() {
        let g = Gene(vec![3, 17, 512]);
        assert_eq!(g.to_string(), "3/17/512");
        assert_eq!("3/17/512".parse::<Gene>().unwrap(), g);
        assert!("3//4".parse::<Gene>().is_err());
        assert!("a/4".parse::<Gene>().is_err());
        let t = builtin_template("chain-small").unwrap();
        assert_eq!(parse_gene(&t, "full").unwrap(), t.full_gene());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn sampled_genes_validate(seed in any::<u64>()) {
            let t = builtin_template("stage-small").unwrap();
            let g = sample_gene(&t, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(t.validate_gene(&g).is_ok());
        }
    }

    proptest! {
        #[test]
        fn ratios_recover_widths(seed in any::<u64>()) {
            let t = builtin_template("chain-small").unwrap();
            let g = sample_gene(&t, &mut ChaCha8Rng::seed_from_u64(seed));
            let r = t.decode_ratios(&g).unwrap();
            let dims = t.resolve(&g).unwrap();
            for (l, layer) in t.layers.iter().enumerate() {
                if let Channels::Axis(a) = layer.out {
                    let back = r[l][1] * t.axes[a].max as f64;
                    prop_assert_eq!(back.round() as usize, g.0[a]);
                    prop_assert_eq!(dims[l].c_out, g.0[a]);
                }
            }
        }

        #[test]
        fn stage_members_agree(seed in any::<u64>()) {
            let t = builtin_template("stage-small").unwrap();
            let g = sample_gene(&t, &mut ChaCha8Rng::seed_from_u64(seed));
            let dims = t.resolve(&g).unwrap();
            for st in &t.stages {
                let outs: Vec<usize> = st.blocks.iter().map(|&b| dims[t.blocks[b].end - 1].c_out).collect();
                prop_assert!(outs.iter().all(|&c| c == g.0[st.axis]));
            }
            for blk in t.blocks.iter().filter(|b| b.shortcut) {
                prop_assert_eq!(dims[blk.start].c_in, dims[blk.end - 1].c_out);
            }
        }

        #[test]
        fn gene_display_parse_roundtrip(v in prop::collection::vec(1usize..5000, 0..20)) {
            let g = Gene(v);
            prop_assert_eq!(g.to_string().parse::<Gene>().unwrap(), g);
        }
    }
}
