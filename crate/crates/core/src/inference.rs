//! Tape-free forward pass.
//!
//! Evaluates exactly the same arithmetic as the recorded forward pass in
//! [`crate::model`], in the same order, but streams each edge through the
//! edge MLP and straight into the running maximum of its destination instead
//! of materializing every message. Outputs are bitwise equal to the tape.

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::graph::HeteroGraph;
use crate::model::{merge_weights, BlockParams, HignnParams, MlpSlots};

/// Remaining MLP layers after the first, as `(weight, bias)` pairs.
struct Tail<'a> {
    layers: Vec<(&'a Tensor, &'a Tensor)>,
    width: usize,
}

impl<'a> Tail<'a> {
    fn new(params: &'a HignnParams, mlp: &MlpSlots) -> Self {
        let layers: Vec<_> = mlp
            .rest
            .iter()
            .map(|&(w, b)| (&params.tensors[w], &params.tensors[b]))
            .collect();
        let width = layers
            .last()
            .map_or(params.tensors[mlp.first_bias].cols(), |(w, _)| w.cols());
        Tail { layers, width }
    }
}

/// Applies `relu` then each tail layer to `z` in place (no `relu` before a
/// missing tail). `buf` is scratch.
#[inline(always)]
fn run_tail(tail: &Tail, z: &mut Vec<f64>, buf: &mut Vec<f64>) {
    for (w, b) in &tail.layers {
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        let n = w.cols();
        buf.clear();
        buf.resize(n, 0.0);
        for (k, &zk) in z.iter().enumerate() {
            if zk == 0.0 {
                continue;
            }
            for (o, &wv) in buf.iter_mut().zip(w.row(k)) {
                *o += zk * wv;
            }
        }
        for (o, &bv) in buf.iter_mut().zip(b.data()) {
            *o += bv;
        }
        std::mem::swap(z, buf);
    }
}

struct EdgeArgs<'a> {
    per_src: &'a Tensor,
    /// Raw edge attributes and their first-layer weights.
    features: &'a Tensor,
    w_edge: &'a Tensor,
    bias: &'a [f64],
    src: &'a [usize],
    offsets: &'a [usize],
    tail: &'a Tail<'a>,
}

#[inline(always)]
fn aggregate_body(a: &EdgeArgs, out: &mut Tensor) {
    let h1 = a.bias.len();
    let mut z = Vec::with_capacity(h1.max(a.tail.width));
    let mut buf = Vec::with_capacity(h1.max(a.tail.width));
    let mut q = vec![0.0; h1];
    for i in 0..a.offsets.len() - 1 {
        let (lo, hi) = (a.offsets[i], a.offsets[i + 1]);
        let row = out.row_mut(i);
        for e in lo..hi {
            z.clear();
            let p = a.per_src.row(a.src[e]);
            q.iter_mut().for_each(|v| *v = 0.0);
            for (f, &ef) in a.features.row(e).iter().enumerate() {
                if ef == 0.0 {
                    continue;
                }
                for (o, &wv) in q.iter_mut().zip(a.w_edge.row(f)) {
                    *o += ef * wv;
                }
            }
            z.extend(p.iter().zip(&q).zip(a.bias).map(|((x, y), b)| (x + y) + b));
            run_tail(a.tail, &mut z, &mut buf);
            if e == lo {
                row.copy_from_slice(&z);
            } else {
                for (o, &v) in row.iter_mut().zip(z.iter()) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
}

/// [`aggregate_body`] for the common shape of one hidden layer of width `H`
/// and messages of width `D`, with every loop bound known at compile time.
#[inline(always)]
fn aggregate_fixed<const F: usize, const H: usize, const D: usize>(
    a: &EdgeArgs,
    out: &mut Tensor,
) {
    let (w, b2) = a.tail.layers[0];
    let we: &[f64] = a.w_edge.data();
    let w: &[f64] = w.data();
    let b2: &[f64; D] = b2.data().try_into().expect("bias width");
    let b1: &[f64; H] = a.bias.try_into().expect("bias width");
    for i in 0..a.offsets.len() - 1 {
        let (lo, hi) = (a.offsets[i], a.offsets[i + 1]);
        let row: &mut [f64; D] = out.row_mut(i).try_into().expect("row width");
        for e in lo..hi {
            let p: &[f64; H] = a.per_src.row(a.src[e]).try_into().expect("width");
            let ef: &[f64; F] = a.features.row(e).try_into().expect("width");
            // Skipping zero factors (as the tape's matmul does) cannot change
            // a sum that starts at +0, so the branch-free loops agree bitwise.
            let mut q = [0.0; H];
            for f in 0..F {
                let wr: &[f64; H] = we[f * H..(f + 1) * H].try_into().expect("width");
                for k in 0..H {
                    q[k] += ef[f] * wr[k];
                }
            }
            let mut z = [0.0; H];
            for k in 0..H {
                z[k] = ((p[k] + q[k]) + b1[k]).max(0.0);
            }
            let mut y = [0.0; D];
            for k in 0..H {
                let zk = z[k];
                let wr: &[f64; D] = w[k * D..(k + 1) * D].try_into().expect("width");
                for c in 0..D {
                    y[c] += zk * wr[c];
                }
            }
            for c in 0..D {
                y[c] += b2[c];
            }
            if e == lo {
                *row = y;
            } else {
                for c in 0..D {
                    if y[c] > row[c] {
                        row[c] = y[c];
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn aggregate_dispatch(a: &EdgeArgs, out: &mut Tensor) {
    let single = a.tail.layers.len() == 1;
    match (single, a.features.cols(), a.bias.len(), a.tail.width) {
        (true, 2, 16, 8) => aggregate_fixed::<2, 16, 8>(a, out),
        (true, 4, 16, 8) => aggregate_fixed::<4, 16, 8>(a, out),
        (true, 6, 16, 8) => aggregate_fixed::<6, 16, 8>(a, out),
        _ => aggregate_body(a, out),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn aggregate_avx2(a: &EdgeArgs, out: &mut Tensor) {
    aggregate_dispatch(a, out)
}

fn aggregate(a: &EdgeArgs, out: &mut Tensor) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        return unsafe { aggregate_avx2(a, out) };
    }
    aggregate_dispatch(a, out)
}

fn add_row(t: &mut Tensor, b: &Tensor) {
    let cols = t.cols();
    for i in 0..t.rows() {
        for (o, &v) in t.row_mut(i).iter_mut().zip(b.data()) {
            *o += v;
        }
    }
    debug_assert_eq!(cols, b.cols());
}

fn mlp_tail_rows(params: &HignnParams, mlp: &MlpSlots, mut pre: Tensor) -> Result<Tensor> {
    add_row(&mut pre, &params.tensors[mlp.first_bias]);
    let mut z = pre;
    for &(w, b) in &mlp.rest {
        z = z.map(|v| v.max(0.0)).matmul(&params.tensors[w])?;
        add_row(&mut z, &params.tensors[b]);
    }
    Ok(z)
}

/// Activated outputs per type, `K_m × 2N_m`. `graph` must be normalized.
pub(crate) fn forward_values(
    params: &HignnParams,
    graph: &HeteroGraph,
    sqrt_p: &[Tensor],
) -> Result<Vec<Tensor>> {
    let arch = &params.arch;
    let m_types = arch.num_types();
    let v0 = &graph.vertices;
    let weights: Vec<Vec<Vec<f64>>> = (0..m_types).map(|m| merge_weights(graph, m)).collect();

    let mut state: Vec<Tensor> = v0.clone();
    for l in 1..=arch.layers {
        let b = arch.block_of_layer(l);
        let first = l == 1;
        let mut next = Vec::with_capacity(m_types);
        match &params.layout.blocks[b] {
            BlockParams::Readout(mlps) => {
                for (m, mlp) in mlps.iter().enumerate() {
                    let mut pre = state[m].matmul(&params.tensors[mlp.first[0]])?;
                    pre.add_assign(&v0[m].matmul(&params.tensors[mlp.first[1]])?);
                    next.push(mlp_tail_rows(params, mlp, pre)?);
                }
            }
            BlockParams::Gn(rels) => {
                for m in 0..m_types {
                    let mut merged: Option<Tensor> = None;
                    for n in 0..m_types {
                        let w = &weights[m][n];
                        if w.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        let idx = n * m_types + m;
                        let rp = &rels[idx];
                        let agg = match graph.relation(n, m) {
                            Some(r) => {
                                let per_src = state[n].matmul(&params.tensors[rp.edge.first[0]])?;
                                let tail = Tail::new(params, &rp.edge);
                                let mut out = Tensor::zeros(graph.counts[m], tail.width);
                                aggregate(
                                    &EdgeArgs {
                                        per_src: &per_src,
                                        features: &r.features,
                                        w_edge: &params.tensors[rp.edge.first[1]],
                                        bias: params.tensors[rp.edge.first_bias].data(),
                                        src: &r.src,
                                        offsets: &r.dst_offsets,
                                        tail: &tail,
                                    },
                                    &mut out,
                                );
                                Some(out)
                            }
                            None => None,
                        };
                        let s = &rp.vertex.first;
                        let (v0_slot, agg_slot) = if first { (s[0], s[1]) } else { (s[1], s[2]) };
                        let mut pre = match first {
                            true => v0[m].matmul(&params.tensors[v0_slot])?,
                            false => {
                                let mut t = state[m].matmul(&params.tensors[s[0]])?;
                                t.add_assign(&v0[m].matmul(&params.tensors[v0_slot])?);
                                t
                            }
                        };
                        if let Some(a) = agg {
                            pre.add_assign(&a.matmul(&params.tensors[agg_slot])?);
                        }
                        let mut part = mlp_tail_rows(params, &rp.vertex, pre)?;
                        for (i, &wi) in w.iter().enumerate() {
                            part.row_mut(i).iter_mut().for_each(|v| *v *= wi);
                        }
                        merged = Some(match merged {
                            Some(mut acc) => {
                                acc.add_assign(&part);
                                acc
                            }
                            None => part,
                        });
                    }
                    let width = if l == arch.layers {
                        2 * arch.antennas[m]
                    } else {
                        arch.message_width
                    };
                    next.push(merged.unwrap_or_else(|| Tensor::zeros(0, width)));
                }
            }
        }
        state = next;
    }

    for (x, sp) in state.iter_mut().zip(sqrt_p) {
        for i in 0..x.rows() {
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = (1.0 / norm.max(1.0)) * sp.get(i, 0);
            x.row_mut(i).iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(state)
}
