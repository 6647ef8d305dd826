//! The heterogeneous interference graph network (HIGNN) policy.
//!
//! Every relation `(n, m)` between link types owns an edge MLP and a vertex
//! MLP. A layer computes, for each relation, messages from source states and
//! the fixed edge attributes, takes their elementwise maximum at each
//! destination, runs the vertex MLP on the destination's previous state, its
//! initial attributes and the aggregate, and finally averages the per-relation
//! results. Layers are stacked encoder, shared core (repeated `L − 2` times),
//! decoder; the decoder output is mapped onto the power ball of each link.
//!
//! Parameters live in one flat list of tensors. [`Layout`] assigns each MLP
//! its slots deterministically from the architecture, which is all a
//! checkpoint has to store besides the values.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{structural, validation, Result};
use crate::graph::{BeamformerSet, ChannelSet, GraphConfig, HeteroGraph, NetworkInstance};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// A full graph block whose vertex MLPs emit `2 N_m` values.
    #[default]
    Gn,
    /// A per-vertex MLP on `[v[L−1], v[0]]` without message passing.
    Readout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HignnArch {
    /// Transmit antennas of each link type.
    pub antennas: Vec<usize>,
    pub graph: GraphConfig,
    /// Number of graph layers `L` including encoder and decoder.
    pub layers: usize,
    /// Hidden widths of every MLP.
    pub hidden: Vec<usize>,
    /// Width of messages and intermediate vertex states.
    pub message_width: usize,
    pub decoder: DecoderKind,
}

impl Default for HignnArch {
    fn default() -> Self {
        HignnArch {
            antennas: vec![1, 2],
            graph: GraphConfig::default(),
            layers: 3,
            hidden: vec![16],
            message_width: 8,
            decoder: DecoderKind::Gn,
        }
    }
}

impl HignnArch {
    pub fn validate(&self) -> Result<()> {
        if self.antennas.is_empty() || self.antennas.contains(&0) {
            return Err(validation("every link type needs at least one antenna"));
        }
        if self.layers < 2 {
            return Err(validation(format!("need at least 2 layers, got {}", self.layers)));
        }
        if self.message_width == 0 || self.hidden.contains(&0) {
            return Err(validation("MLP widths must be at least 1"));
        }
        Ok(())
    }

    pub fn num_types(&self) -> usize {
        self.antennas.len()
    }

    /// Index of the parameter block used at layer `l` (1-based).
    pub fn block_of_layer(&self, l: usize) -> usize {
        if l == 1 {
            0
        } else if l == self.layers {
            if self.layers == 2 {
                1
            } else {
                2
            }
        } else {
            1
        }
    }

    pub fn num_blocks(&self) -> usize {
        if self.layers == 2 {
            2
        } else {
            3
        }
    }
}

/// Shape of one MLP. The first layer is split by input group so that each
/// group can be multiplied separately and partial products reused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub inputs: Vec<usize>,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpSpec {
    pub fn input_width(&self) -> usize {
        self.inputs.iter().sum()
    }
}

/// Parameter slots of one MLP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSlots {
    pub spec: MlpSpec,
    /// First-layer weight slot for each input group.
    pub first: Vec<usize>,
    pub first_bias: usize,
    /// `(weight, bias)` slots of the remaining layers.
    pub rest: Vec<(usize, usize)>,
}

/// Edge and vertex MLPs of relation `(src_type, dst_type)` in one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationParams {
    pub src_type: usize,
    pub dst_type: usize,
    pub edge: MlpSlots,
    pub vertex: MlpSlots,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockParams {
    /// Relations indexed `n * M + m`.
    Gn(Vec<RelationParams>),
    /// One MLP per vertex type.
    Readout(Vec<MlpSlots>),
}

/// Slot assignment and tensor shapes for an architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub blocks: Vec<BlockParams>,
    pub shapes: Vec<(usize, usize)>,
}

impl Layout {
    pub fn new(arch: &HignnArch) -> Result<Layout> {
        arch.validate()?;
        let mut shapes = Vec::new();
        let m_types = arch.num_types();
        let d = arch.message_width;
        let vw: Vec<usize> = arch.antennas.iter().map(|&n| arch.graph.vertex_width(n)).collect();
        let mut blocks = Vec::new();
        for b in 0..arch.num_blocks() {
            let encoder = b == 0;
            let decoder = b == arch.num_blocks() - 1;
            if decoder && arch.decoder == DecoderKind::Readout {
                let mlps = (0..m_types)
                    .map(|m| {
                        let spec = MlpSpec {
                            inputs: vec![d, vw[m]],
                            hidden: arch.hidden.clone(),
                            output: 2 * arch.antennas[m],
                        };
                        alloc_mlp(spec, &mut shapes)
                    })
                    .collect();
                blocks.push(BlockParams::Readout(mlps));
                continue;
            }
            let mut rels = Vec::with_capacity(m_types * m_types);
            for n in 0..m_types {
                for m in 0..m_types {
                    let ew = arch.graph.edge_width(arch.antennas[n], arch.antennas[m]);
                    let src_w = if encoder { vw[n] } else { d };
                    let edge = alloc_mlp(
                        MlpSpec {
                            inputs: vec![src_w, ew],
                            hidden: arch.hidden.clone(),
                            output: d,
                        },
                        &mut shapes,
                    );
                    let inputs = if encoder { vec![vw[m], d] } else { vec![d, vw[m], d] };
                    let output = if decoder { 2 * arch.antennas[m] } else { d };
                    let vertex = alloc_mlp(
                        MlpSpec {
                            inputs,
                            hidden: arch.hidden.clone(),
                            output,
                        },
                        &mut shapes,
                    );
                    rels.push(RelationParams {
                        src_type: n,
                        dst_type: m,
                        edge,
                        vertex,
                    });
                }
            }
            blocks.push(BlockParams::Gn(rels));
        }
        Ok(Layout { blocks, shapes })
    }

    pub fn num_params(&self) -> usize {
        self.shapes.iter().map(|(r, c)| r * c).sum()
    }
}

fn alloc_mlp(spec: MlpSpec, shapes: &mut Vec<(usize, usize)>) -> MlpSlots {
    let mut slot = |shape: (usize, usize)| {
        shapes.push(shape);
        shapes.len() - 1
    };
    let first_out = spec.hidden.first().copied().unwrap_or(spec.output);
    let first = spec.inputs.iter().map(|&w| slot((w, first_out))).collect();
    let first_bias = slot((1, first_out));
    let mut rest = Vec::new();
    let mut prev = first_out;
    for &w in spec.hidden.iter().skip(1).chain(std::iter::once(&spec.output)) {
        if spec.hidden.is_empty() {
            break;
        }
        rest.push((slot((prev, w)), slot((1, w))));
        prev = w;
    }
    MlpSlots {
        spec,
        first,
        first_bias,
        rest,
    }
}

/// Multiplicative feature scales per vertex type and per relation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub vertex: Vec<f64>,
    /// Indexed `n * M + m`.
    pub edge: Vec<f64>,
}

impl NormStats {
    pub fn identity(num_types: usize) -> Self {
        NormStats {
            vertex: vec![1.0; num_types],
            edge: vec![1.0; num_types * num_types],
        }
    }

    pub fn validate(&self, num_types: usize) -> Result<()> {
        if self.vertex.len() != num_types || self.edge.len() != num_types * num_types {
            return Err(structural("normalization stats do not match the type count"));
        }
        if self.vertex.iter().chain(&self.edge).any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(validation("normalization scales must be finite and positive"));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.vertex.iter().chain(&self.edge).copied().collect()
    }

    /// Scaled copy of `graph`.
    pub fn apply(&self, graph: &HeteroGraph) -> Result<HeteroGraph> {
        let m_types = graph.num_types();
        self.validate(m_types)?;
        let mut out = graph.clone();
        for (m, v) in out.vertices.iter_mut().enumerate() {
            v.scale_in_place(self.vertex[m]);
        }
        for r in &mut out.relations {
            r.features.scale_in_place(self.edge[r.src_type * m_types + r.dst_type]);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HignnParams {
    pub arch: HignnArch,
    pub norm: NormStats,
    pub layout: Layout,
    pub tensors: Vec<Tensor>,
}

/// Weights uniform in `±1/√fan_in` with `fan_in` the full first-layer input
/// width; biases zero.
pub fn init_params<R: Rng + ?Sized>(arch: &HignnArch, rng: &mut R) -> Result<HignnParams> {
    let layout = Layout::new(arch)?;
    let mut tensors: Vec<Tensor> = layout
        .shapes
        .iter()
        .map(|&(r, c)| Tensor::zeros(r, c))
        .collect();
    let mut fill = |slot: usize, fan_in: usize, tensors: &mut Vec<Tensor>| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in tensors[slot].data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    };
    for_each_mlp(&layout, |mlp| {
        let fan_in = mlp.spec.input_width();
        for &s in &mlp.first {
            fill(s, fan_in, &mut tensors);
        }
        for &(w, _) in &mlp.rest {
            let fan = layout.shapes[w].0;
            fill(w, fan, &mut tensors);
        }
    });
    Ok(HignnParams {
        arch: arch.clone(),
        norm: NormStats::identity(arch.num_types()),
        layout,
        tensors,
    })
}

fn for_each_mlp(layout: &Layout, mut f: impl FnMut(&MlpSlots)) {
    for block in &layout.blocks {
        match block {
            BlockParams::Gn(rels) => {
                for r in rels {
                    f(&r.edge);
                    f(&r.vertex);
                }
            }
            BlockParams::Readout(mlps) => mlps.iter().for_each(&mut f),
        }
    }
}

impl HignnParams {
    /// Rebuilds parameters from an architecture and a flat value vector in
    /// slot order.
    pub fn from_flat(arch: &HignnArch, norm: NormStats, flat: &[f64]) -> Result<HignnParams> {
        let layout = Layout::new(arch)?;
        norm.validate(arch.num_types())?;
        if flat.len() != layout.num_params() {
            return Err(structural(format!(
                "{} parameter values for an architecture with {}",
                flat.len(),
                layout.num_params()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.shapes.len());
        let mut at = 0;
        for &(r, c) in &layout.shapes {
            tensors.push(Tensor::from_vec(r, c, flat[at..at + r * c].to_vec())?);
            at += r * c;
        }
        Ok(HignnParams {
            arch: arch.clone(),
            norm,
            layout,
            tensors,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.num_params()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(structural(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Flattens tape gradients into slot order; unreached slots are zero.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (id, t) in self.tensors.iter().enumerate() {
            match grads.param(id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        out
    }

    fn check_graph(&self, graph: &HeteroGraph) -> Result<()> {
        if graph.antennas != self.arch.antennas {
            return Err(structural(format!(
                "graph link types {:?} do not match model types {:?}",
                graph.antennas, self.arch.antennas
            )));
        }
        if graph.config != self.arch.graph {
            return Err(structural("graph feature layout differs from the model's"));
        }
        Ok(())
    }

    /// Records every parameter on `tape`, as differentiable leaves when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(id, t)| {
                if trainable {
                    tape.param(id, t)
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Partial first-layer products reused across layers sharing a block.
#[derive(Default)]
struct Cache {
    edge_term: HashMap<(usize, usize), Var>,
    v0_term: HashMap<(usize, usize), Var>,
}

fn finish_mlp(tape: &mut Tape, pv: &[Var], mlp: &MlpSlots, pre: Var) -> Result<Var> {
    let mut z = tape.add_row(pre, pv[mlp.first_bias])?;
    for &(w, b) in &mlp.rest {
        z = tape.relu(z);
        z = tape.matmul(z, pv[w])?;
        z = tape.add_row(z, pv[b])?;
    }
    Ok(z)
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Messages of relation `r` at one layer: one row per edge.
#[allow(clippy::too_many_arguments)]
fn edge_messages(
    tape: &mut Tape,
    pv: &[Var],
    cache: &mut Cache,
    key: (usize, usize),
    rp: &RelationParams,
    src_state: Var,
    edge_attr: Var,
    src_idx: &Arc<[usize]>,
) -> Result<Var> {
    let per_src = tape.matmul(src_state, pv[rp.edge.first[0]])?;
    let gathered = tape.gather(per_src, src_idx.clone())?;
    let edge_term = match cache.edge_term.get(&key) {
        Some(&v) => v,
        None => {
            let v = tape.matmul(edge_attr, pv[rp.edge.first[1]])?;
            cache.edge_term.insert(key, v);
            v
        }
    };
    let pre = tape.add(gathered, edge_term)?;
    finish_mlp(tape, pv, &rp.edge, pre)
}

/// Vertex MLP of relation `r` on `[prev?, v0, agg]`; a missing `agg` means
/// the all-zero aggregate.
#[allow(clippy::too_many_arguments)]
fn partial_update(
    tape: &mut Tape,
    pv: &[Var],
    cache: &mut Cache,
    key: (usize, usize),
    rp: &RelationParams,
    prev: Option<Var>,
    v0: Var,
    agg: Option<Var>,
) -> Result<Var> {
    let slots = &rp.vertex.first;
    let (v0_slot, agg_slot) = match prev {
        Some(_) => (slots[1], slots[2]),
        None => (slots[0], slots[1]),
    };
    let mut terms = Vec::with_capacity(3);
    if let Some(p) = prev {
        terms.push(tape.matmul(p, pv[slots[0]])?);
    }
    let v0_term = match cache.v0_term.get(&key) {
        Some(&v) => v,
        None => {
            let v = tape.matmul(v0, pv[v0_slot])?;
            cache.v0_term.insert(key, v);
            v
        }
    };
    terms.push(v0_term);
    if let Some(a) = agg {
        terms.push(tape.matmul(a, pv[agg_slot])?);
    }
    let pre = sum_terms(tape, &terms)?;
    finish_mlp(tape, pv, &rp.vertex, pre)
}

/// Mean weights per relation into each type: `1/c` over relations with at
/// least one incoming edge at a vertex, or `1/M` over all relations when the
/// vertex has no neighbors at all.
pub(crate) fn merge_weights(graph: &HeteroGraph, m: usize) -> Vec<Vec<f64>> {
    let m_types = graph.num_types();
    let k = graph.counts[m];
    let degree = |n: usize, i: usize| {
        graph
            .relation(n, m)
            .map_or(0, |r| r.dst_offsets[i + 1] - r.dst_offsets[i])
    };
    let mut w = vec![vec![0.0; k]; m_types];
    for i in 0..k {
        let c = (0..m_types).filter(|&n| degree(n, i) > 0).count();
        for n in 0..m_types {
            w[n][i] = if c == 0 {
                1.0 / m_types as f64
            } else if degree(n, i) > 0 {
                1.0 / c as f64
            } else {
                0.0
            };
        }
    }
    w
}

/// Raw decoder outputs (before power activation), one `K_m × 2N_m` matrix
/// per type. `graph` must already be normalized.
pub fn network_outputs(
    tape: &mut Tape,
    pv: &[Var],
    params: &HignnParams,
    graph: &HeteroGraph,
) -> Result<Vec<Var>> {
    params.check_graph(graph)?;
    let arch = &params.arch;
    let m_types = arch.num_types();
    let v0: Vec<Var> = graph.vertices.iter().map(|v| tape.constant(v.clone())).collect();
    let edge_attr: Vec<Option<Var>> = (0..m_types * m_types)
        .map(|idx| {
            graph
                .relation(idx / m_types, idx % m_types)
                .map(|r| tape.constant(r.features.clone()))
        })
        .collect();
    let weights: Vec<Vec<Var>> = (0..m_types)
        .map(|m| {
            merge_weights(graph, m)
                .into_iter()
                .map(|w| tape.constant(Tensor::column(w)))
                .collect()
        })
        .collect();
    let weight_used: Vec<Vec<bool>> = (0..m_types)
        .map(|m| {
            let ws = merge_weights(graph, m);
            ws.iter().map(|w| w.iter().any(|&x| x != 0.0)).collect()
        })
        .collect();

    let mut cache = Cache::default();
    let mut state: Vec<Var> = v0.clone();
    for l in 1..=arch.layers {
        let b = arch.block_of_layer(l);
        let prev = if l == 1 { None } else { Some(state.clone()) };
        let next = match &params.layout.blocks[b] {
            BlockParams::Readout(mlps) => {
                let mut out = Vec::with_capacity(m_types);
                for (m, mlp) in mlps.iter().enumerate() {
                    let h = prev.as_ref().expect("readout is never the first layer")[m];
                    let a = tape.matmul(h, pv[mlp.first[0]])?;
                    let c = tape.matmul(v0[m], pv[mlp.first[1]])?;
                    let pre = tape.add(a, c)?;
                    out.push(finish_mlp(tape, pv, mlp, pre)?);
                }
                out
            }
            BlockParams::Gn(rels) => {
                let mut out = Vec::with_capacity(m_types);
                for m in 0..m_types {
                    let mut merged: Option<Var> = None;
                    for n in 0..m_types {
                        if !weight_used[m][n] {
                            continue;
                        }
                        let idx = n * m_types + m;
                        let rp = &rels[idx];
                        let agg = match graph.relation(n, m) {
                            Some(r) => {
                                let msgs = edge_messages(
                                    tape,
                                    pv,
                                    &mut cache,
                                    (b, idx),
                                    rp,
                                    state[n],
                                    edge_attr[idx].expect("relation has attributes"),
                                    &r.src,
                                )?;
                                Some(tape.segment_max(msgs, &r.dst_offsets)?)
                            }
                            None => None,
                        };
                        let part = partial_update(
                            tape,
                            pv,
                            &mut cache,
                            (b, idx),
                            rp,
                            prev.as_ref().map(|p| p[m]),
                            v0[m],
                            agg,
                        )?;
                        let scaled = tape.mul_col(part, weights[m][n])?;
                        merged = Some(match merged {
                            Some(acc) => tape.add(acc, scaled)?,
                            None => scaled,
                        });
                    }
                    let width = match l == arch.layers {
                        true => 2 * arch.antennas[m],
                        false => arch.message_width,
                    };
                    out.push(match merged {
                        Some(v) => v,
                        None => tape.constant(Tensor::zeros(0, width)),
                    });
                }
                out
            }
        };
        state = next;
    }
    Ok(state)
}

/// `γ(x) = √P · x / max(‖x‖, 1)` applied row-wise; `sqrt_p` is a column of
/// `√P_max` per vertex.
pub fn power_activation_tape(tape: &mut Tape, raw: Var, sqrt_p: Var) -> Result<Var> {
    let norm = tape.row_norm(raw);
    let denom = tape.clamp_min(norm, 1.0);
    let inv = tape.recip(denom);
    let scale = tape.mul(inv, sqrt_p)?;
    tape.mul_col(raw, scale)
}

/// Plain-value version of the power activation for one complex vector.
pub fn power_activation(x: &[Complex64], p_max: f64) -> Vec<Complex64> {
    let norm = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let s = p_max.sqrt() / norm.max(1.0);
    x.iter().map(|c| c * s).collect()
}

/// Activated outputs per type on an existing tape. `graph` is raw; the
/// stored normalization is applied here.
pub fn forward_tape(
    tape: &mut Tape,
    pv: &[Var],
    params: &HignnParams,
    graph: &HeteroGraph,
    sqrt_p: &[Tensor],
) -> Result<Vec<Var>> {
    let normalized = params.norm.apply(graph)?;
    let raw = network_outputs(tape, pv, params, &normalized)?;
    raw.into_iter()
        .zip(sqrt_p)
        .map(|(r, s)| {
            let s = tape.constant(s.clone());
            power_activation_tape(tape, r, s)
        })
        .collect()
}

fn outputs_to_beamformers(values: &[&Tensor], antennas: &[usize]) -> BeamformerSet {
    let mut vecs = Vec::new();
    for (m, v) in values.iter().enumerate() {
        let n = antennas[m];
        for i in 0..v.rows() {
            let row = v.row(i);
            vecs.push((0..n).map(|a| Complex64::new(row[a], row[n + a])).collect());
        }
    }
    BeamformerSet::from_vecs(vecs)
}

/// Beamformers for one network (or a batched graph with a common budget).
pub fn forward(params: &HignnParams, graph: &HeteroGraph, p_max: f64) -> Result<BeamformerSet> {
    params.check_graph(graph)?;
    let normalized = params.norm.apply(graph)?;
    let values = crate::inference::forward_values(params, &normalized, &sqrt_p_columns(graph, p_max))?;
    let refs: Vec<&Tensor> = values.iter().collect();
    Ok(outputs_to_beamformers(&refs, &params.arch.antennas))
}

/// Same as [`forward`] but evaluated on a tape.
pub fn forward_recorded(
    params: &HignnParams,
    graph: &HeteroGraph,
    p_max: f64,
) -> Result<BeamformerSet> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let out = forward_tape(&mut tape, &pv, params, graph, &sqrt_p_columns(graph, p_max))?;
    let values: Vec<&Tensor> = out.iter().map(|&v| tape.value(v)).collect();
    Ok(outputs_to_beamformers(&values, &params.arch.antennas))
}

fn sqrt_p_columns(graph: &HeteroGraph, p_max: f64) -> Vec<Tensor> {
    graph
        .counts
        .iter()
        .map(|&k| Tensor::full(k, 1, p_max.sqrt()))
        .collect()
}

/// Channel data of a batch of networks laid out to match
/// [`HeteroGraph::batch`] of their graphs.
#[derive(Clone, Debug)]
pub struct WsrBatch {
    pub num_instances: usize,
    antennas: Vec<usize>,
    /// Per type: rows `[Re h_ii, Im h_ii]` and `[−Im h_ii, Re h_ii]`.
    direct: Vec<(Tensor, Tensor)>,
    weights: Vec<Tensor>,
    noise: Vec<Tensor>,
    sqrt_p: Vec<Tensor>,
    cross: Vec<CrossTerms>,
}

#[derive(Clone, Debug)]
struct CrossTerms {
    src_type: usize,
    dst_type: usize,
    src: Arc<[usize]>,
    dst_offsets: Arc<[usize]>,
    h1: Tensor,
    h2: Tensor,
}

fn channel_rows(h: &[Complex64], r1: &mut Vec<f64>, r2: &mut Vec<f64>) {
    r1.extend(h.iter().map(|c| c.re));
    r1.extend(h.iter().map(|c| c.im));
    r2.extend(h.iter().map(|c| -c.im));
    r2.extend(h.iter().map(|c| c.re));
}

impl WsrBatch {
    pub fn new(samples: &[(&NetworkInstance, &ChannelSet)]) -> Result<WsrBatch> {
        let (first, _) = samples
            .first()
            .ok_or_else(|| structural("empty batch"))?;
        let antennas = first.type_antennas();
        let m_types = antennas.len();
        for (inst, h) in samples {
            inst.validate()?;
            if inst.type_antennas() != antennas {
                return Err(structural("all instances in a batch must share link types"));
            }
            if h.antennas() != inst.link_antennas().as_slice() {
                return Err(structural("channel set does not match its instance"));
            }
        }
        let mut direct = Vec::with_capacity(m_types);
        let (mut weights, mut noise, mut sqrt_p) = (Vec::new(), Vec::new(), Vec::new());
        for m in 0..m_types {
            let (mut r1, mut r2) = (Vec::new(), Vec::new());
            let (mut w, mut s, mut p) = (Vec::new(), Vec::new(), Vec::new());
            for (inst, h) in samples {
                let offs = inst.type_offsets();
                for g in offs[m]..offs[m + 1] {
                    channel_rows(h.get(g, g), &mut r1, &mut r2);
                    w.push(inst.weights[g]);
                    s.push(inst.noise_vars[g]);
                    p.push(inst.p_max.sqrt());
                }
            }
            let k = w.len();
            direct.push((
                Tensor::from_vec(k, 2 * antennas[m], r1)?,
                Tensor::from_vec(k, 2 * antennas[m], r2)?,
            ));
            weights.push(Tensor::column(w));
            noise.push(Tensor::column(s));
            sqrt_p.push(Tensor::column(p));
        }
        let mut cross = Vec::new();
        for n in 0..m_types {
            for m in 0..m_types {
                let (mut src, mut seg) = (Vec::new(), vec![0usize]);
                let (mut r1, mut r2) = (Vec::new(), Vec::new());
                let mut src_base = 0;
                for (inst, h) in samples {
                    let offs = inst.type_offsets();
                    for i in 0..inst.counts[m] {
                        for j in 0..inst.counts[n] {
                            if n == m && i == j {
                                continue;
                            }
                            src.push(src_base + j);
                            channel_rows(h.get(offs[m] + i, offs[n] + j), &mut r1, &mut r2);
                        }
                        seg.push(src.len());
                    }
                    src_base += inst.counts[n];
                }
                if src.is_empty() {
                    continue;
                }
                let rows = src.len();
                cross.push(CrossTerms {
                    src_type: n,
                    dst_type: m,
                    src: src.into(),
                    dst_offsets: seg.into(),
                    h1: Tensor::from_vec(rows, 2 * antennas[n], r1)?,
                    h2: Tensor::from_vec(rows, 2 * antennas[n], r2)?,
                });
            }
        }
        Ok(WsrBatch {
            num_instances: samples.len(),
            antennas,
            direct,
            weights,
            noise,
            sqrt_p,
            cross,
        })
    }

    /// `√P_max` per vertex of each type.
    pub fn sqrt_p(&self) -> &[Tensor] {
        &self.sqrt_p
    }

    /// Sum over instances of the weighted sum rate of beamformers `x`
    /// (per type, `K_m × 2N_m` with real parts first).
    pub fn total_wsr_tape(&self, tape: &mut Tape, x: &[Var]) -> Result<Var> {
        let m_types = self.antennas.len();
        if x.len() != m_types {
            return Err(structural("one beamformer matrix per type expected"));
        }
        let mut received = Vec::with_capacity(m_types);
        for m in 0..m_types {
            let p = link_power(tape, x[m], &self.direct[m].0, &self.direct[m].1)?;
            received.push(p);
        }
        let mut interference: Vec<Var> = self.noise.iter().map(|s| tape.constant(s.clone())).collect();
        for c in &self.cross {
            let xs = tape.gather(x[c.src_type], c.src.clone())?;
            let p = link_power(tape, xs, &c.h1, &c.h2)?;
            let per_dst = tape.segment_sum(p, c.dst_offsets.clone())?;
            interference[c.dst_type] = tape.add(interference[c.dst_type], per_dst)?;
        }
        let mut total: Option<Var> = None;
        for m in 0..m_types {
            if self.weights[m].rows() == 0 {
                continue;
            }
            let all = tape.add(received[m], interference[m])?;
            let num = tape.ln(all);
            let den = tape.ln(interference[m]);
            let rate = tape.sub(num, den)?;
            let w = tape.constant(self.weights[m].clone());
            let weighted = tape.mul(rate, w)?;
            let s = tape.sum(weighted);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
    }
}

/// `|h^H x|²` row by row, with `h1 = [Re h, Im h]`, `h2 = [−Im h, Re h]`.
fn link_power(tape: &mut Tape, x: Var, h1: &Tensor, h2: &Tensor) -> Result<Var> {
    let h1 = tape.constant(h1.clone());
    let h2 = tape.constant(h2.clone());
    let a = tape.mul(x, h1)?;
    let re = tape.sum_rows(a);
    let b = tape.mul(x, h2)?;
    let im = tape.sum_rows(b);
    let re2 = tape.square(re);
    let im2 = tape.square(im);
    tape.add(re2, im2)
}

/// Negative mean weighted sum rate over a batch, with the tape it lives on.
pub fn loss_tape(
    tape: &mut Tape,
    pv: &[Var],
    params: &HignnParams,
    graph: &HeteroGraph,
    batch: &WsrBatch,
) -> Result<Var> {
    let x = forward_tape(tape, pv, params, graph, batch.sqrt_p())?;
    let total = batch.total_wsr_tape(tape, &x)?;
    Ok(tape.scale(total, -1.0 / batch.num_instances as f64))
}

/// Loss value only.
pub fn loss(params: &HignnParams, graph: &HeteroGraph, batch: &WsrBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let l = loss_tape(&mut tape, &pv, params, graph, batch)?;
    Ok(tape.value(l).item())
}

/// Loss value and its gradient in flat slot order.
pub fn loss_and_grad(
    params: &HignnParams,
    graph: &HeteroGraph,
    batch: &WsrBatch,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, true);
    let l = loss_tape(&mut tape, &pv, params, graph, batch)?;
    let grads = tape.backward(l)?;
    Ok((tape.value(l).item(), params.flat_grad(&grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;
    use crate::graph::tests::{random_channels, toy_instance};
    use crate::graph::{build_graph, EdgeFeatures};
    use crate::metrics::weighted_sum_rate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(antennas: &[usize], counts: &[usize], seed: u64) -> (NetworkInstance, ChannelSet, HeteroGraph) {
        let inst = toy_instance(antennas, counts);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_channels(&inst, &mut rng);
        let g = build_graph(&inst, &h, GraphConfig::default()).unwrap();
        (inst, h, g)
    }

    fn arch(antennas: &[usize]) -> HignnArch {
        HignnArch {
            antennas: antennas.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn layout_widths() {
        let layout = Layout::new(&arch(&[1, 2])).unwrap();
        let BlockParams::Gn(enc) = &layout.blocks[0] else { panic!() };
        // relation (type 1 -> type 2): source vertex width 2 plus edge width 2
        let r = &enc[1];
        assert_eq!((r.src_type, r.dst_type), (0, 1));
        assert_eq!(r.edge.spec.input_width(), 4);
        assert_eq!(r.edge.spec.output, 8);
        let BlockParams::Gn(core) = &layout.blocks[1] else { panic!() };
        assert_eq!(core[3].vertex.spec.input_width(), 8 + 4 + 8);
        assert_eq!(core[3].vertex.spec.output, 8);
        let BlockParams::Gn(dec) = &layout.blocks[2] else { panic!() };
        assert_eq!(dec[3].vertex.spec.output, 4);
        assert_eq!(dec[0].vertex.spec.output, 2);
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let a = arch(&[1, 2]);
        let p1 = init_params(&a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p2 = init_params(&a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p3 = init_params(&a, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(p1, p2);
        assert_ne!(p1.to_flat(), p3.to_flat());

        let big = HignnArch {
            hidden: vec![200],
            ..a
        };
        let p = init_params(&big, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let BlockParams::Gn(core) = &p.layout.blocks[1] else { panic!() };
        let mlp = &core[0].vertex;
        let fan = mlp.spec.input_width() as f64;
        let w: Vec<f64> = mlp.first.iter().flat_map(|&s| p.tensors[s].data().to_vec()).collect();
        assert!(w.len() >= 3000);
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        let expect = 1.0 / (3f64.sqrt() * fan.sqrt());
        assert!((std / expect - 1.0).abs() < 0.2, "{std} vs {expect}");
        let bias = p.tensors[mlp.first_bias].data();
        assert!(bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn relations_have_separate_slots() {
        let layout = Layout::new(&arch(&[1, 2])).unwrap();
        let mut seen = std::collections::HashSet::new();
        for_each_mlp(&layout, |m| {
            for &s in m.first.iter().chain(std::iter::once(&m.first_bias)) {
                assert!(seen.insert(s));
            }
            for &(w, b) in &m.rest {
                assert!(seen.insert(w) && seen.insert(b));
            }
        });
        assert_eq!(seen.len(), layout.shapes.len());
    }

    #[test]
    fn power_activation_cases() {
        let x = [Complex64::new(2.0, 0.0)];
        let y = power_activation(&x, 1.0);
        assert_eq!(y[0], Complex64::new(1.0, 0.0));
        let x = [Complex64::new(0.3, 0.4)];
        assert_eq!(power_activation(&x, 1.0)[0], x[0]);
        let y = power_activation(&x, 4.0);
        assert!((y[0] - x[0] * 2.0).norm() < 1e-15);
    }

    #[test]
    fn forward_is_feasible_and_deterministic() {
        let a = arch(&[1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = init_params(&a, &mut rng).unwrap();
        // large weights push raw outputs outside the ball
        let flat: Vec<f64> = params.to_flat().iter().map(|v| v * 5.0).collect();
        params.set_flat(&flat).unwrap();
        let (_, _, g) = setup(&[1, 2], &[4, 3], 6);
        let x1 = forward(&params, &g, 2.0).unwrap();
        let x2 = forward(&params, &g, 2.0).unwrap();
        assert_eq!(x1, x2);
        assert!(x1.max_power() <= 2.0 + 1e-12);
        assert_eq!(x1.antennas(), &[1, 1, 1, 1, 2, 2, 2]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn forward_respects_any_power_budget(
            siso in 0usize..6,
            miso in 0usize..4,
            p_max in 1e-3f64..50.0,
            scale in 0.1f64..20.0,
            seed in proptest::prelude::any::<u64>(),
        ) {
            proptest::prop_assume!(siso + miso > 0);
            let a = arch(&[1, 2]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = init_params(&a, &mut rng).unwrap();
            let flat: Vec<f64> = params.to_flat().iter().map(|v| v * scale).collect();
            params.set_flat(&flat).unwrap();
            let (_, _, g) = setup(&[1, 2], &[siso, miso], seed ^ 1);
            let x = forward(&params, &g, p_max).unwrap();
            proptest::prop_assert!(x.max_power() <= p_max * (1.0 + 1e-12));
        }
    }

    #[test]
    fn streaming_forward_matches_tape_bitwise() {
        for (decoder, hidden, layers) in [
            (DecoderKind::Gn, vec![16], 3),
            (DecoderKind::Gn, vec![], 4),
            (DecoderKind::Readout, vec![12, 6], 2),
        ] {
            let a = HignnArch {
                decoder,
                hidden,
                layers,
                ..arch(&[1, 2])
            };
            let mut params = init_params(&a, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            params.norm = NormStats {
                vertex: vec![0.5, 2.0],
                edge: vec![3.0, 0.25, 1.5, 0.75],
            };
            for counts in [[4, 3], [1, 0], [0, 2], [1, 1]] {
                let (_, _, g) = setup(&[1, 2], &counts, 10);
                assert_eq!(
                    forward(&params, &g, 1.5).unwrap(),
                    forward_recorded(&params, &g, 1.5).unwrap()
                );
            }
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let a = arch(&[1, 2]);
        let mut params = init_params(&a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let zeros = vec![0.0; params.num_params()];
        params.set_flat(&zeros).unwrap();
        let (_, _, g) = setup(&[1, 2], &[2, 2], 1);
        let x = forward(&params, &g, 1.0).unwrap();
        assert_eq!(x.max_power(), 0.0);
    }

    #[test]
    fn single_link_depends_only_on_its_features() {
        let a = arch(&[2]);
        let params = init_params(&a, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (_, _, g) = setup(&[2], &[1], 3);
        assert!(g.relations.is_empty());
        let x = forward(&params, &g, 1.0).unwrap();
        assert!(x.power(0) > 0.0);
    }

    #[test]
    fn message_ignores_destination_features() {
        let a = arch(&[1, 2]);
        let params = init_params(&a, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (_, _, g) = setup(&[1, 2], &[2, 2], 4);
        let messages = |g: &HeteroGraph| {
            let mut tape = Tape::new();
            let pv = params.bind(&mut tape, false);
            let BlockParams::Gn(rels) = &params.layout.blocks[0] else { panic!() };
            let r = g.relation(0, 1).unwrap();
            let src = tape.constant(g.vertices[0].clone());
            let e = tape.constant(r.features.clone());
            let mut cache = Cache::default();
            let v = edge_messages(&mut tape, &pv, &mut cache, (0, 1), &rels[1], src, e, &r.src).unwrap();
            tape.value(v).clone()
        };
        let mut g2 = g.clone();
        g2.vertices[1].scale_in_place(3.0);
        let m = messages(&g);
        assert_eq!(m.shape(), (4, 8));
        assert_eq!(m, messages(&g2));
    }

    #[test]
    fn unrelated_relation_params_do_not_leak() {
        // Only type-1 links exist, so the relations into type 2 are unused.
        let a = arch(&[1, 2]);
        let params = init_params(&a, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (_, _, g) = setup(&[1, 2], &[3, 0], 8);
        let base = forward(&params, &g, 1.0).unwrap();
        let mut p2 = params.clone();
        for block in &params.layout.blocks {
            let BlockParams::Gn(rels) = block else { continue };
            for r in rels.iter().filter(|r| r.dst_type == 1 || r.src_type == 1) {
                for &s in r.vertex.first.iter().chain(&r.edge.first) {
                    p2.tensors[s].scale_in_place(-2.0);
                }
            }
        }
        assert_eq!(base, forward(&p2, &g, 1.0).unwrap());
    }

    #[test]
    fn batch_loss_matches_metrics() {
        let a = arch(&[1, 2]);
        let params = init_params(&a, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let items: Vec<_> = (0..3).map(|s| setup(&[1, 2], &[2 + s as usize, 1], 20 + s)).collect();
        let graphs: Vec<&HeteroGraph> = items.iter().map(|i| &i.2).collect();
        let big = HeteroGraph::batch(&graphs).unwrap();
        let pairs: Vec<_> = items.iter().map(|i| (&i.0, &i.1)).collect();
        let batch = WsrBatch::new(&pairs).unwrap();
        let l = loss(&params, &big, &batch).unwrap();
        let expect: f64 = items
            .iter()
            .map(|(inst, h, g)| {
                let x = forward(&params, g, inst.p_max).unwrap();
                weighted_sum_rate(&x, h, &inst.weights, &inst.noise_vars, 1.0)
            })
            .sum::<f64>()
            / 3.0;
        assert!((l + expect).abs() < 1e-12 * expect.abs().max(1.0), "{l} vs {expect}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (decoder, edges) in [
            (DecoderKind::Gn, EdgeFeatures::Incoming),
            (DecoderKind::Readout, EdgeFeatures::Bidirectional),
        ] {
            let a = HignnArch {
                antennas: vec![1, 2],
                decoder,
                graph: GraphConfig {
                    edge_features: edges,
                    vertex_extras: false,
                },
                ..Default::default()
            };
            let params = init_params(&a, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
            let inst = toy_instance(&[1, 2], &[2, 1]);
            let h = random_channels(&inst, &mut ChaCha8Rng::seed_from_u64(13));
            let g = build_graph(&inst, &h, a.graph).unwrap();
            let batch = WsrBatch::new(&[(&inst, &h)]).unwrap();
            let (_, grad) = loss_and_grad(&params, &g, &batch).unwrap();
            let theta = params.to_flat();
            let mut probe = params.clone();
            let fd = finite_diff_grad(
                |t| {
                    probe.set_flat(t).unwrap();
                    loss(&probe, &g, &batch).unwrap()
                },
                &theta,
                1e-6,
            );
            for (i, (a, b)) in grad.iter().zip(&fd).enumerate() {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
                assert!(rel <= 1e-4, "param {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn norm_stats_scale_features() {
        let (_, _, g) = setup(&[1, 2], &[2, 2], 2);
        let norm = NormStats {
            vertex: vec![2.0, 3.0],
            edge: vec![1.0, 4.0, 5.0, 6.0],
        };
        let s = norm.apply(&g).unwrap();
        assert_eq!(s.vertices[1].get(0, 0), 3.0 * g.vertices[1].get(0, 0));
        let r = s.relation(0, 1).unwrap();
        assert_eq!(r.features.get(0, 0), 4.0 * g.relation(0, 1).unwrap().features.get(0, 0));
        assert!(NormStats { vertex: vec![0.0, 1.0], edge: vec![1.0; 4] }.apply(&g).is_err());
    }

    #[test]
    fn mismatched_graph_is_rejected() {
        let params = init_params(&arch(&[1, 2]), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (_, _, g) = setup(&[1, 3], &[2, 2], 2);
        assert!(forward(&params, &g, 1.0).is_err());
    }
}
