//! Heterogeneous interference network model.
//!
//! Links are grouped into types by transmit-antenna count. Every link gets a
//! global index; links are laid out type-major (all type-0 links first), and
//! within a type by their local index. Type indices are 0-based internally;
//! [`LinkTypeSpec::type_id`] carries the 1-based label.
//!
//! The interference heterograph has one vertex per link and one directed
//! edge `j_n -> i_m` for every ordered pair of distinct links. Edges are
//! grouped by relation `(n, m)` = (source type, destination type) and sorted
//! by destination, then source, so each relation carries a CSR index over its
//! destination vertices.

use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{structural, validation, Result};

/// Power slack allowed on beamformer norms.
pub const POWER_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkTypeSpec {
    /// 1-based type label.
    pub type_id: usize,
    pub num_tx_antennas: usize,
}

/// Type specs `1..=M` for the given per-type antenna counts.
pub fn link_types(antennas: &[usize]) -> Vec<LinkTypeSpec> {
    antennas
        .iter()
        .enumerate()
        .map(|(m, &n)| LinkTypeSpec {
            type_id: m + 1,
            num_tx_antennas: n,
        })
        .collect()
}

/// One realization of a D2D network. Per-link arrays are indexed by global
/// link index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkInstance {
    pub types: Vec<LinkTypeSpec>,
    pub counts: Vec<usize>,
    pub tx_pos: Vec<[f64; 2]>,
    pub rx_pos: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub noise_vars: Vec<f64>,
    pub p_max: f64,
    pub area_length: f64,
}

impl NetworkInstance {
    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() || self.types.len() != self.counts.len() {
            return Err(structural(format!(
                "{} link types but {} counts",
                self.types.len(),
                self.counts.len()
            )));
        }
        for (m, t) in self.types.iter().enumerate() {
            if t.type_id != m + 1 {
                return Err(validation(format!(
                    "type ids must be contiguous from 1, found {} at position {m}",
                    t.type_id
                )));
            }
            if t.num_tx_antennas == 0 {
                return Err(validation(format!("type {} has no antennas", t.type_id)));
            }
        }
        let k = self.num_links();
        if k == 0 {
            return Err(validation("network has no links"));
        }
        for (name, len) in [
            ("tx_pos", self.tx_pos.len()),
            ("rx_pos", self.rx_pos.len()),
            ("weights", self.weights.len()),
            ("noise_vars", self.noise_vars.len()),
        ] {
            if len != k {
                return Err(structural(format!("{name} has {len} entries, expected {k}")));
            }
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(validation("weights must be finite and non-negative"));
        }
        if self.noise_vars.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(validation("noise variances must be finite and positive"));
        }
        if !(self.p_max > 0.0) || !self.p_max.is_finite() {
            return Err(validation("p_max must be positive"));
        }
        Ok(())
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn num_links(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn type_antennas(&self) -> Vec<usize> {
        self.types.iter().map(|t| t.num_tx_antennas).collect()
    }

    /// Global index of the first link of each type, plus the total.
    pub fn type_offsets(&self) -> Vec<usize> {
        offsets(&self.counts)
    }

    /// Transmit-antenna count of every link, by global index.
    pub fn link_antennas(&self) -> Vec<usize> {
        self.types
            .iter()
            .zip(&self.counts)
            .flat_map(|(t, &k)| std::iter::repeat_n(t.num_tx_antennas, k))
            .collect()
    }

    /// Type of every link, by global index.
    pub fn link_types(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(m, &k)| std::iter::repeat_n(m, k))
            .collect()
    }

    pub fn link_distance(&self, g: usize) -> f64 {
        distance(self.tx_pos[g], self.rx_pos[g])
    }
}

pub(crate) fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub(crate) fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sizes.len() + 1);
    let mut acc = 0;
    out.push(0);
    for &s in sizes {
        acc += s;
        out.push(acc);
    }
    out
}

/// Channel vectors `h_{i j}` from transmitter `j` to receiver `i` for every
/// ordered pair of links, including `i == j`. `h_{i j}` has one entry per
/// transmit antenna of link `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    antennas: Vec<usize>,
    col_offsets: Vec<usize>,
    data: Vec<Complex64>,
}

impl ChannelSet {
    /// `data` holds rows by receiver; each row is the concatenation of
    /// `h_{i j}` over transmitters `j`.
    pub fn new(antennas: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        let col_offsets = offsets(&antennas);
        let stride = *col_offsets.last().unwrap();
        if data.len() != antennas.len() * stride {
            return Err(structural(format!(
                "channel data has {} entries, expected {}",
                data.len(),
                antennas.len() * stride
            )));
        }
        Ok(ChannelSet {
            antennas,
            col_offsets,
            data,
        })
    }

    pub fn from_fn(antennas: Vec<usize>, mut f: impl FnMut(usize, usize, usize) -> Complex64) -> Self {
        let col_offsets = offsets(&antennas);
        let k = antennas.len();
        let mut data = Vec::with_capacity(k * col_offsets[k]);
        for i in 0..k {
            for (j, &n) in antennas.iter().enumerate() {
                for a in 0..n {
                    data.push(f(i, j, a));
                }
            }
        }
        ChannelSet {
            antennas,
            col_offsets,
            data,
        }
    }

    /// `entries[i][j]` is `h_{i j}`. Every pair must be present with the
    /// transmitter's antenna count.
    pub fn from_entries(antennas: Vec<usize>, entries: &[Vec<Vec<Complex64>>]) -> Result<Self> {
        let k = antennas.len();
        if entries.len() != k {
            return Err(structural(format!(
                "{} receiver rows for {k} links",
                entries.len()
            )));
        }
        let mut data = Vec::new();
        for (i, row) in entries.iter().enumerate() {
            if row.len() != k {
                return Err(structural(format!(
                    "receiver {i} has {} channel entries, expected {k}",
                    row.len()
                )));
            }
            for (j, h) in row.iter().enumerate() {
                if h.len() != antennas[j] {
                    return Err(structural(format!(
                        "channel ({i}, {j}) has length {}, expected {}",
                        h.len(),
                        antennas[j]
                    )));
                }
                data.extend_from_slice(h);
            }
        }
        ChannelSet::new(antennas, data)
    }

    pub fn num_links(&self) -> usize {
        self.antennas.len()
    }

    pub fn antennas(&self) -> &[usize] {
        &self.antennas
    }

    fn stride(&self) -> usize {
        *self.col_offsets.last().unwrap()
    }

    /// `h_{i j}`: transmitter `j` to receiver `i`.
    pub fn get(&self, i: usize, j: usize) -> &[Complex64] {
        let base = i * self.stride() + self.col_offsets[j];
        &self.data[base..base + self.antennas[j]]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut [Complex64] {
        let base = i * self.stride() + self.col_offsets[j];
        let n = self.antennas[j];
        &mut self.data[base..base + n]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Every entry multiplied by `s`.
    pub fn scaled(&self, s: f64) -> ChannelSet {
        ChannelSet {
            antennas: self.antennas.clone(),
            col_offsets: self.col_offsets.clone(),
            data: self.data.iter().map(|c| c * s).collect(),
        }
    }
}

/// One complex beamforming vector per link.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamformerSet {
    antennas: Vec<usize>,
    offsets: Vec<usize>,
    data: Vec<Complex64>,
}

impl BeamformerSet {
    pub fn zeros(antennas: Vec<usize>) -> Self {
        let offsets = offsets(&antennas);
        let n = *offsets.last().unwrap();
        BeamformerSet {
            antennas,
            offsets,
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_vecs(vecs: Vec<Vec<Complex64>>) -> Self {
        let antennas: Vec<usize> = vecs.iter().map(Vec::len).collect();
        let offsets = offsets(&antennas);
        BeamformerSet {
            antennas,
            offsets,
            data: vecs.into_iter().flatten().collect(),
        }
    }

    pub fn num_links(&self) -> usize {
        self.antennas.len()
    }

    pub fn antennas(&self) -> &[usize] {
        &self.antennas
    }

    pub fn link(&self, g: usize) -> &[Complex64] {
        &self.data[self.offsets[g]..self.offsets[g + 1]]
    }

    pub fn link_mut(&mut self, g: usize) -> &mut [Complex64] {
        &mut self.data[self.offsets[g]..self.offsets[g + 1]]
    }

    /// `‖x_g‖²`.
    pub fn power(&self, g: usize) -> f64 {
        self.link(g).iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn max_power(&self) -> f64 {
        (0..self.num_links()).map(|g| self.power(g)).fold(0.0, f64::max)
    }

    /// True when every link satisfies `‖x‖² <= p_max + POWER_EPS`.
    pub fn is_feasible(&self, p_max: f64) -> bool {
        (0..self.num_links()).all(|g| self.power(g) <= p_max + POWER_EPS)
    }
}

/// How interference edges are described to the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeFeatures {
    /// `[Re h_{i j}; Im h_{i j}]`, width `2 N_n`.
    #[default]
    Incoming,
    /// Both directions `[h_{i j}, h_{j i}]`, width `2 N_n + 2 N_m`.
    #[serde(rename = "bidir")]
    Bidirectional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub edge_features: EdgeFeatures,
    /// Append `[ω, σ²]` to every vertex feature.
    pub vertex_extras: bool,
}

impl GraphConfig {
    pub fn vertex_width(&self, antennas_m: usize) -> usize {
        2 * antennas_m + if self.vertex_extras { 2 } else { 0 }
    }

    pub fn edge_width(&self, antennas_src: usize, antennas_dst: usize) -> usize {
        match self.edge_features {
            EdgeFeatures::Incoming => 2 * antennas_src,
            EdgeFeatures::Bidirectional => 2 * antennas_src + 2 * antennas_dst,
        }
    }
}

/// Edges of one relation `(src_type, dst_type)`, sorted by destination then
/// source. Indices are local to their vertex type.
#[derive(Clone, Debug, PartialEq)]
pub struct Relation {
    pub src_type: usize,
    pub dst_type: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// CSR offsets over destination vertices, length `K_dst + 1`.
    pub dst_offsets: Arc<[usize]>,
    /// One feature row per edge.
    pub features: Tensor,
}

impl Relation {
    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Sources of edges into destination `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.src[self.dst_offsets[i]..self.dst_offsets[i + 1]]
    }

    /// Builds a relation from unsorted `(src, dst, feature row)` triples.
    fn from_edges(
        src_type: usize,
        dst_type: usize,
        num_dst: usize,
        feature_width: usize,
        mut edges: Vec<(usize, usize, &[f64])>,
    ) -> Relation {
        edges.sort_by_key(|&(s, d, _)| (d, s));
        let mut counts = vec![0; num_dst];
        let mut data = Vec::with_capacity(edges.len() * feature_width);
        for &(_, d, f) in &edges {
            counts[d] += 1;
            data.extend_from_slice(f);
        }
        Relation {
            src_type,
            dst_type,
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
            dst_offsets: offsets(&counts).into(),
            features: Tensor::from_vec(edges.len(), feature_width, data)
                .expect("feature rows have uniform width"),
        }
    }
}

/// Typed vertices (links) and typed directed interference edges with real
/// features. A graph may be the disjoint union of several networks (see
/// [`HeteroGraph::batch`]).
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub antennas: Vec<usize>,
    pub counts: Vec<usize>,
    pub config: GraphConfig,
    /// Per type, a `K_m × F_m` feature matrix.
    pub vertices: Vec<Tensor>,
    /// Relations with at least one edge, ordered by `(src_type, dst_type)`.
    pub relations: Vec<Relation>,
}

fn push_complex(out: &mut Vec<f64>, h: &[Complex64]) {
    out.extend(h.iter().map(|c| c.re));
    out.extend(h.iter().map(|c| c.im));
}

/// Builds the complete interference heterograph of one network.
pub fn build_graph(
    instance: &NetworkInstance,
    channels: &ChannelSet,
    config: GraphConfig,
) -> Result<HeteroGraph> {
    instance.validate()?;
    let link_ant = instance.link_antennas();
    if channels.antennas() != link_ant.as_slice() {
        return Err(structural(format!(
            "channel set covers links with antennas {:?}, instance has {:?}",
            channels.antennas(),
            link_ant
        )));
    }
    if !channels.is_finite() {
        return Err(validation("channel set contains non-finite entries"));
    }
    let antennas = instance.type_antennas();
    let offs = instance.type_offsets();
    let m_types = antennas.len();

    let vertices = (0..m_types)
        .map(|m| {
            let width = config.vertex_width(antennas[m]);
            let mut data = Vec::with_capacity(instance.counts[m] * width);
            for g in offs[m]..offs[m + 1] {
                push_complex(&mut data, channels.get(g, g));
                if config.vertex_extras {
                    data.push(instance.weights[g]);
                    data.push(instance.noise_vars[g]);
                }
            }
            Tensor::from_vec(instance.counts[m], width, data)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut relations = Vec::new();
    for n in 0..m_types {
        for m in 0..m_types {
            let width = config.edge_width(antennas[n], antennas[m]);
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut pairs = Vec::new();
            for i in 0..instance.counts[m] {
                for j in 0..instance.counts[n] {
                    if n == m && i == j {
                        continue;
                    }
                    let (gi, gj) = (offs[m] + i, offs[n] + j);
                    let mut f = Vec::with_capacity(width);
                    push_complex(&mut f, channels.get(gi, gj));
                    if config.edge_features == EdgeFeatures::Bidirectional {
                        push_complex(&mut f, channels.get(gj, gi));
                    }
                    rows.push(f);
                    pairs.push((j, i));
                }
            }
            if pairs.is_empty() {
                continue;
            }
            let edges = pairs
                .iter()
                .zip(&rows)
                .map(|(&(s, d), f)| (s, d, f.as_slice()))
                .collect();
            relations.push(Relation::from_edges(n, m, instance.counts[m], width, edges));
        }
    }

    Ok(HeteroGraph {
        antennas,
        counts: instance.counts.clone(),
        config,
        vertices,
        relations,
    })
}

impl HeteroGraph {
    pub fn num_types(&self) -> usize {
        self.antennas.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn num_edges(&self) -> usize {
        self.relations.iter().map(Relation::num_edges).sum()
    }

    pub fn relation(&self, src_type: usize, dst_type: usize) -> Option<&Relation> {
        self.relations
            .iter()
            .find(|r| r.src_type == src_type && r.dst_type == dst_type)
    }

    /// Disjoint union. Vertices of type `m` are laid out graph by graph.
    pub fn batch(graphs: &[&HeteroGraph]) -> Result<HeteroGraph> {
        let first = graphs
            .first()
            .ok_or_else(|| structural("cannot batch zero graphs"))?;
        let m_types = first.num_types();
        for g in graphs {
            if g.antennas != first.antennas || g.config != first.config {
                return Err(structural("batched graphs must share link types and features"));
            }
        }
        let counts: Vec<usize> = (0..m_types)
            .map(|m| graphs.iter().map(|g| g.counts[m]).sum())
            .collect();
        let vertices = (0..m_types)
            .map(|m| {
                let parts: Vec<&Tensor> = graphs.iter().map(|g| &g.vertices[m]).collect();
                Tensor::vstack(&parts, first.vertices[m].cols())
            })
            .collect::<Result<Vec<_>>>()?;

        let mut relations = Vec::new();
        for n in 0..m_types {
            for m in 0..m_types {
                if graphs.iter().all(|g| g.relation(n, m).is_none()) {
                    continue;
                }
                let width = first
                    .config
                    .edge_width(first.antennas[n], first.antennas[m]);
                let (mut src, mut dst, mut seg) = (Vec::new(), Vec::new(), vec![0usize]);
                let mut feats: Vec<&Tensor> = Vec::new();
                let (mut src_base, mut dst_base) = (0, 0);
                for g in graphs {
                    match g.relation(n, m) {
                        Some(r) => {
                            let base = *seg.last().unwrap();
                            src.extend(r.src.iter().map(|s| s + src_base));
                            dst.extend(r.dst.iter().map(|d| d + dst_base));
                            seg.extend(r.dst_offsets[1..].iter().map(|o| o + base));
                            feats.push(&r.features);
                        }
                        None => {
                            let last = *seg.last().unwrap();
                            seg.extend(std::iter::repeat_n(last, g.counts[m]));
                        }
                    }
                    src_base += g.counts[n];
                    dst_base += g.counts[m];
                }
                relations.push(Relation {
                    src_type: n,
                    dst_type: m,
                    src: src.into(),
                    dst: dst.into(),
                    dst_offsets: seg.into(),
                    features: Tensor::vstack(&feats, width)?,
                });
            }
        }
        Ok(HeteroGraph {
            antennas: first.antennas.clone(),
            counts,
            config: first.config,
            vertices,
            relations,
        })
    }
}

/// One bijection per link type. `perms[m][i]` is the new local index of the
/// vertex that was at local index `i` of type `m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationSpec {
    perms: Vec<Vec<usize>>,
}

impl PermutationSpec {
    pub fn new(perms: Vec<Vec<usize>>) -> Result<Self> {
        for (m, p) in perms.iter().enumerate() {
            let mut seen = vec![false; p.len()];
            for &v in p {
                if v >= p.len() || std::mem::replace(&mut seen[v], true) {
                    return Err(validation(format!("type {m}: not a permutation: {p:?}")));
                }
            }
        }
        Ok(PermutationSpec { perms })
    }

    pub fn identity(counts: &[usize]) -> Self {
        PermutationSpec {
            perms: counts.iter().map(|&k| (0..k).collect()).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(counts: &[usize], rng: &mut R) -> Self {
        PermutationSpec {
            perms: counts
                .iter()
                .map(|&k| {
                    let mut p: Vec<usize> = (0..k).collect();
                    p.shuffle(rng);
                    p
                })
                .collect(),
        }
    }

    pub fn per_type(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn counts(&self) -> Vec<usize> {
        self.perms.iter().map(Vec::len).collect()
    }

    pub fn inverse(&self) -> Self {
        PermutationSpec {
            perms: self
                .perms
                .iter()
                .map(|p| {
                    let mut inv = vec![0; p.len()];
                    for (i, &v) in p.iter().enumerate() {
                        inv[v] = i;
                    }
                    inv
                })
                .collect(),
        }
    }

    fn check_counts(&self, counts: &[usize]) -> Result<()> {
        if self.counts() != counts {
            return Err(validation(format!(
                "permutation sizes {:?} do not match type counts {:?}",
                self.counts(),
                counts
            )));
        }
        Ok(())
    }

    /// The same relabeling over type-major global link indices.
    pub fn global_map(&self) -> Vec<usize> {
        let offs = offsets(&self.counts());
        self.perms
            .iter()
            .enumerate()
            .flat_map(|(m, p)| {
                let base = offs[m];
                p.iter().map(move |&v| base + v)
            })
            .collect()
    }
}

/// Relabels vertices within each type; edge endpoints follow their vertices.
pub fn apply_permutation(graph: &HeteroGraph, perm: &PermutationSpec) -> Result<HeteroGraph> {
    perm.check_counts(&graph.counts)?;
    let p = perm.per_type();
    let vertices = graph
        .vertices
        .iter()
        .enumerate()
        .map(|(m, v)| {
            let mut out = Tensor::zeros(v.rows(), v.cols());
            for i in 0..v.rows() {
                out.row_mut(p[m][i]).copy_from_slice(v.row(i));
            }
            out
        })
        .collect();
    let relations = graph
        .relations
        .iter()
        .map(|r| {
            let edges = (0..r.num_edges())
                .map(|e| {
                    (
                        p[r.src_type][r.src[e]],
                        p[r.dst_type][r.dst[e]],
                        r.features.row(e),
                    )
                })
                .collect();
            Relation::from_edges(
                r.src_type,
                r.dst_type,
                graph.counts[r.dst_type],
                r.features.cols(),
                edges,
            )
        })
        .collect();
    Ok(HeteroGraph {
        antennas: graph.antennas.clone(),
        counts: graph.counts.clone(),
        config: graph.config,
        vertices,
        relations,
    })
}

/// Reorders beamformers within each type.
pub fn permute_beamformers(x: &BeamformerSet, perm: &PermutationSpec) -> Result<BeamformerSet> {
    let map = perm.global_map();
    if map.len() != x.num_links() {
        return Err(validation(format!(
            "permutation covers {} links, beamformer set has {}",
            map.len(),
            x.num_links()
        )));
    }
    let mut vecs = vec![Vec::new(); map.len()];
    for (g, &to) in map.iter().enumerate() {
        vecs[to] = x.link(g).to_vec();
    }
    Ok(BeamformerSet::from_vecs(vecs))
}

/// Relabels links of an instance and its channels consistently.
pub fn permute_network(
    instance: &NetworkInstance,
    channels: &ChannelSet,
    perm: &PermutationSpec,
) -> Result<(NetworkInstance, ChannelSet)> {
    perm.check_counts(&instance.counts)?;
    let map = perm.global_map();
    let k = map.len();
    let mut inv = vec![0; k];
    for (g, &to) in map.iter().enumerate() {
        inv[to] = g;
    }
    let pick = |v: &[f64]| inv.iter().map(|&g| v[g]).collect::<Vec<_>>();
    let pick2 = |v: &[[f64; 2]]| inv.iter().map(|&g| v[g]).collect::<Vec<_>>();
    let inst = NetworkInstance {
        types: instance.types.clone(),
        counts: instance.counts.clone(),
        tx_pos: pick2(&instance.tx_pos),
        rx_pos: pick2(&instance.rx_pos),
        weights: pick(&instance.weights),
        noise_vars: pick(&instance.noise_vars),
        p_max: instance.p_max,
        area_length: instance.area_length,
    };
    let ch = ChannelSet::from_fn(instance.link_antennas(), |i, j, a| {
        channels.get(inv[i], inv[j])[a]
    });
    Ok((inst, ch))
}
