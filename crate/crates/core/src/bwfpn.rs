//! Feature-pyramid necks: FPN, PANet and the bi-directional weighted pyramid
//! (BWFPN) with fast normalised fusion.
//!
//! A neck is described by a [`FusionTopology`]: one layer's graph of fusion
//! nodes, repeated `num_layers` times with each layer's outputs feeding the
//! next layer's inputs. The BWFPN graph is derived from PANet by three rules:
//! nodes left with a single input are elided, every output node gains an edge
//! from its own input level, and whole layers stack.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dahead::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeckKind {
    Fpn,
    Panet,
    Bwfpn,
}

impl FromStr for NeckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fpn" => Ok(NeckKind::Fpn),
            "panet" => Ok(NeckKind::Panet),
            "bwfpn" => Ok(NeckKind::Bwfpn),
            other => Err(Error::invalid(format!("unknown neck `{other}` (expected fpn, panet or bwfpn)"))),
        }
    }
}

impl fmt::Display for NeckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeckKind::Fpn => "fpn",
            NeckKind::Panet => "panet",
            NeckKind::Bwfpn => "bwfpn",
        })
    }
}

/// Where a fusion node reads from: a level of the layer input, or an earlier node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Input(usize),
    Node(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    TopDown,
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSpec {
    pub role: Role,
    pub level: usize,
    pub inputs: Vec<Source>,
}

impl NodeSpec {
    pub fn label(&self) -> String {
        match self.role {
            Role::TopDown => format!("td{}", self.level),
            Role::Output => format!("out{}", self.level),
        }
    }
}

/// One layer's fusion graph plus stacking depth. Nodes are stored in
/// evaluation order; `outputs[i]` is the layer's result at level `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionTopology {
    pub kind: NeckKind,
    pub num_levels: usize,
    pub num_layers: usize,
    pub nodes: Vec<NodeSpec>,
    pub outputs: Vec<Source>,
}

impl FusionTopology {
    pub fn build(kind: NeckKind, num_levels: usize, num_layers: usize) -> Result<Self> {
        if num_levels < 2 {
            return Err(Error::invalid(format!("a feature pyramid neck needs at least 2 levels, got {num_levels}")));
        }
        if num_layers == 0 {
            return Err(Error::invalid("neck_layers must be at least 1"));
        }
        let mut t = match kind {
            NeckKind::Fpn => Self::fpn_layer(num_levels),
            NeckKind::Panet => Self::panet_layer(num_levels),
            NeckKind::Bwfpn => {
                let mut t = Self::panet_layer(num_levels);
                t.elide_single_inputs();
                t.add_input_skips();
                t
            }
        };
        t.kind = kind;
        t.num_layers = num_layers;
        if kind == NeckKind::Bwfpn {
            t.check_rules()?;
        }
        Ok(t)
    }

    /// Top-down pass only: `td_top = in_top`, `td_i = fuse(in_i, up(td_{i+1}))`.
    fn fpn_layer(levels: usize) -> Self {
        let mut nodes = Vec::new();
        for level in (0..levels).rev() {
            let mut inputs = vec![Source::Input(level)];
            if level + 1 < levels {
                inputs.push(Source::Node(nodes.len() - 1));
            }
            nodes.push(NodeSpec { role: Role::TopDown, level, inputs });
        }
        let outputs = (0..levels).map(|l| Source::Node(levels - 1 - l)).collect();
        FusionTopology { kind: NeckKind::Fpn, num_levels: levels, num_layers: 1, nodes, outputs }
    }

    /// FPN followed by a bottom-up pass: `out_0 = td_0`, `out_i = fuse(td_i, down(out_{i-1}))`.
    fn panet_layer(levels: usize) -> Self {
        let mut t = Self::fpn_layer(levels);
        for level in 0..levels {
            let td = Source::Node(levels - 1 - level);
            let mut inputs = vec![td];
            if level > 0 {
                inputs.push(Source::Node(t.nodes.len() - 1));
            }
            t.nodes.push(NodeSpec { role: Role::Output, level, inputs });
        }
        t.outputs = (0..levels).map(|l| Source::Node(levels + l)).collect();
        t.kind = NeckKind::Panet;
        t
    }

    fn consumers(&self, s: Source) -> usize {
        self.nodes.iter().map(|n| n.inputs.iter().filter(|&&i| i == s).count()).sum::<usize>()
            + self.outputs.iter().filter(|&&o| o == s).count()
    }

    /// Rule 1. A single-input node whose source feeds nothing else absorbs that
    /// source's inputs; otherwise the node is replaced by its source.
    pub(crate) fn elide_single_inputs(&mut self) {
        while let Some(idx) = self.nodes.iter().position(|n| n.inputs.len() == 1) {
            let src = self.nodes[idx].inputs[0];
            match src {
                Source::Node(j) if self.consumers(src) == 1 => {
                    self.nodes[idx].inputs = self.nodes[j].inputs.clone();
                    self.remove_node(j, None);
                }
                _ => self.remove_node(idx, Some(src)),
            }
        }
    }

    /// Removes node `idx`, pointing its consumers at `replacement` and
    /// renumbering later nodes.
    fn remove_node(&mut self, idx: usize, replacement: Option<Source>) {
        self.nodes.remove(idx);
        let remap = |s: &mut Source| {
            if let Source::Node(j) = *s {
                if j == idx {
                    *s = replacement.expect("removed node still referenced");
                } else if j > idx {
                    *s = Source::Node(j - 1);
                }
            }
        };
        for n in &mut self.nodes {
            n.inputs.iter_mut().for_each(remap);
        }
        self.outputs.iter_mut().for_each(remap);
    }

    /// Rule 2. Every output node takes its own input level as first edge.
    pub(crate) fn add_input_skips(&mut self) {
        for n in &mut self.nodes {
            if n.role == Role::Output && !n.inputs.contains(&Source::Input(n.level)) {
                n.inputs.insert(0, Source::Input(n.level));
            }
        }
    }

    fn check_rules(&self) -> Result<()> {
        for n in &self.nodes {
            if n.inputs.len() < 2 {
                return Err(Error::invalid(format!("node {} has a single input edge", n.label())));
            }
            if n.role == Role::Output && !n.inputs.contains(&Source::Input(n.level)) {
                return Err(Error::invalid(format!("node {} lacks an edge from its input level", n.label())));
            }
        }
        for (level, out) in self.outputs.iter().enumerate() {
            match *out {
                Source::Node(j) if self.nodes[j].role == Role::Output && self.nodes[j].level == level => {}
                _ => return Err(Error::invalid(format!("level {level} output is not an output node"))),
            }
        }
        Ok(())
    }

    pub fn source_label(&self, s: Source) -> String {
        match s {
            Source::Input(l) => format!("in{l}"),
            Source::Node(j) => self.nodes[j].label(),
        }
    }

    /// `(from, to)` label pairs of one layer's edges.
    pub fn edges(&self) -> BTreeSet<(String, String)> {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(move |&s| (self.source_label(s), n.label())))
            .collect()
    }

    pub fn fusion_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionMode {
    /// `sum relu(w_i) / (eps + sum relu(w_j)) * I_i`.
    Weighted { epsilon: f64 },
    /// Plain average of the inputs.
    Mean,
}

/// A fusion point followed by a linear 3x3 convolution.
#[derive(Clone, Debug)]
pub struct FusionNode {
    pub label: String,
    pub mode: FusionMode,
    pub arity: usize,
    /// Raw per-edge weights, present in weighted mode.
    pub weights: Option<ParamId>,
    pub post_conv: Conv2d,
}

impl FusionNode {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        label: String,
        arity: usize,
        mode: FusionMode,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weights = match mode {
            FusionMode::Weighted { .. } => Some(store.add(format!("{name}.w"), Tensor::full(vec![arity], 1.0))),
            FusionMode::Mean => None,
        };
        let post_conv = Conv2d::with_init(
            store,
            &format!("{name}.conv"),
            channels,
            channels,
            3,
            1,
            Init::Kaiming { fan_in: channels * 9, gain: 0.5_f64.sqrt() },
            rng,
        );
        FusionNode { label, mode, arity, weights, post_conv }
    }

    /// Effective per-edge weights after normalisation, shape `[arity]`.
    pub fn normalized_weights(&self, ctx: &mut Ctx) -> Result<Var> {
        match (self.mode, self.weights) {
            (FusionMode::Weighted { epsilon }, Some(w)) => {
                let w = ctx.param(w);
                let w = ctx.tape.relu(w);
                let total = ctx.tape.sum_all(w);
                let denom = ctx.tape.add_scalar(total, epsilon);
                ctx.tape.div(w, denom)
            }
            _ => Ok(ctx.tape.constant(Tensor::full(vec![self.arity], 1.0 / self.arity as f64))),
        }
    }

    /// Weighted combination of same-shape inputs, before the convolution.
    pub fn combine(&self, ctx: &mut Ctx, inputs: &[Var]) -> Result<Var> {
        if inputs.len() < 2 && matches!(self.mode, FusionMode::Weighted { .. }) {
            return Err(Error::invalid(format!("fusion node {} needs at least 2 inputs", self.label)));
        }
        if inputs.len() != self.arity {
            return Err(Error::invalid(format!(
                "fusion node {} expects {} inputs, got {}",
                self.label,
                self.arity,
                inputs.len()
            )));
        }
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let w = self.normalized_weights(ctx)?;
        let mut acc: Option<Var> = None;
        for (i, &x) in inputs.iter().enumerate() {
            let wi = ctx.tape.narrow(w, 0, i, 1)?;
            let term = ctx.tape.mul(x, wi)?;
            acc = Some(match acc {
                None => term,
                Some(a) => ctx
                    .tape
                    .add(a, term)
                    .map_err(|e| Error::shape(format!("fusion node {}: {e}", self.label)))?,
            });
        }
        Ok(acc.expect("at least one input"))
    }

    pub fn forward(&self, ctx: &mut Ctx, inputs: &[Var]) -> Result<Var> {
        let fused = self.combine(ctx, inputs)?;
        self.post_conv.forward(ctx, fused).map_err(|e| Error::shape(format!("fusion node {}: {e}", self.label)))
    }
}

/// Executable neck: a topology with parameters for every node of every layer.
#[derive(Clone, Debug)]
pub struct Neck {
    pub topology: FusionTopology,
    pub channels: usize,
    pub layers: Vec<Vec<FusionNode>>,
}

impl Neck {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        topology: FusionTopology,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mode = match topology.kind {
            NeckKind::Bwfpn => FusionMode::Weighted { epsilon: DEFAULT_EPSILON },
            NeckKind::Fpn | NeckKind::Panet => FusionMode::Mean,
        };
        let layers = (0..topology.num_layers)
            .map(|k| {
                topology
                    .nodes
                    .iter()
                    .map(|n| {
                        let label = n.label();
                        FusionNode::new(store, &format!("{name}.l{k}.{label}"), label, n.inputs.len(), mode, channels, rng)
                    })
                    .collect()
            })
            .collect();
        Neck { topology, channels, layers }
    }

    /// Runs every layer; the output pyramid keeps the input shapes and strides.
    pub fn forward(&self, ctx: &mut Ctx, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        let t = &self.topology;
        if pyramid.num_levels() != t.num_levels {
            return Err(Error::invalid(format!(
                "neck built for {} levels but the pyramid has {}",
                t.num_levels,
                pyramid.num_levels()
            )));
        }
        let sizes = pyramid.sizes(ctx.tape);
        let mut current = pyramid.levels.clone();
        for layer in &self.layers {
            let mut values: Vec<Var> = Vec::with_capacity(t.nodes.len());
            for (spec, node) in t.nodes.iter().zip(layer) {
                let (h, w) = sizes[spec.level];
                let mut inputs = Vec::with_capacity(spec.inputs.len());
                for &s in &spec.inputs {
                    let v = match s {
                        Source::Input(l) => current[l],
                        Source::Node(j) => values[j],
                    };
                    inputs.push(ctx.tape.resize_nearest(v, h, w)?);
                }
                values.push(node.forward(ctx, &inputs)?);
            }
            current = t
                .outputs
                .iter()
                .map(|&o| match o {
                    Source::Input(l) => current[l],
                    Source::Node(j) => values[j],
                })
                .collect();
        }
        FeaturePyramid::new(ctx.tape, current, pyramid.strides.clone())
    }

    /// Floating-point operations per image: the post convolutions at 2 per
    /// multiply-accumulate, plus one per fused input element.
    pub fn flops_by_node(&self, sizes: &[(usize, usize)]) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            for (spec, node) in self.topology.nodes.iter().zip(layer) {
                let (h, w) = sizes[spec.level];
                let fuse = if node.arity > 1 { (node.arity * self.channels * h * w) as u64 } else { 0 };
                out.push((format!("neck.l{k}.{}", node.label), 2 * node.post_conv.macs(h, w) + fuse));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
