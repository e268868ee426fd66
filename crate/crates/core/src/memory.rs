//! Analytic training-memory estimates.
//!
//! For an ordinary network the estimate is
//! `Σ (M_A + M_P) + max M_D` over layers: every layer output is kept for
//! backward, parameters carry value, gradient and optimizer state, and the
//! activation derivatives peak at some point of the backward pass. With
//! reversible sequences only non-reversible outputs (`M_N`) and sequence
//! outputs (`M_S`) stay resident, giving
//! `Σ M_N + Σ M_S + Σ M_P + max M_B`, where `M_B` is the working set of
//! the backward step at each layer — for a sequence, the reconstruction
//! buffers on top of the derivatives.
//!
//! Layers come from [`Network::trace`], so the activation sums equal what
//! the tape actually holds: an output counts only if some backward reads
//! it (plus the network output, which the loss reads). Derivative terms follow the real graph: the
//! working set at a layer is every gradient still pending for an
//! unprocessed layer plus the input gradients the layer produces, rather
//! than the layer's own output size alone (which is reported alongside as
//! `m_d_naive`).

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::engine::{NodeInfo, ParamStore, Shape};
use crate::error::Result;
use crate::unet::{Network, Trace};

pub use crate::engine::alloc::measure_peak;

/// Value, gradient and two Adam moments.
pub const ADAM_MULTIPLIER: u64 = 4;

/// Peak bytes a reversible sequence's backward holds on top of the pending
/// derivatives, in half-width tensors: while one sub-network is
/// differentiated its two recorded interiors, the seed copy and the
/// derivative it produces. Block inputs and their derivatives replace the
/// sequence output and its derivative one for one; the sequence's own
/// input derivative (two halves) only appears once the blocks are done.
pub const SEQUENCE_BACKWARD_HALVES: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    NonReversible,
    SequenceBoundary,
    ReversibleInterior,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::NonReversible => "non-reversible",
            LayerKind::SequenceBoundary => "sequence-boundary",
            LayerKind::ReversibleInterior => "reversible-interior",
        })
    }
}

/// Byte costs of one recorded layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub id: usize,
    pub op: &'static str,
    pub shape: String,
    pub kind: LayerKind,
    /// Output bytes held for backward when nothing is recomputed.
    pub m_a: u64,
    /// Output bytes a recomputing sequence holds; boundary layers only.
    pub m_s: u64,
    /// Parameter bytes times the optimizer multiplier.
    pub m_p: u64,
    /// Derivative working set while this layer is differentiated, all
    /// activations stored.
    pub m_d: u64,
    /// Size of this layer's own output derivative.
    pub m_d_naive: u64,
    /// Backward working set with reversible sequences recomputing;
    /// zero for reversible-interior layers.
    pub m_b: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Breakdown {
    pub sum_activations: u64,
    pub sum_nonreversible: u64,
    pub sum_sequence_boundary: u64,
    pub sum_parameters: u64,
    pub max_derivative: u64,
    pub max_derivative_naive: u64,
    pub max_backward: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MemoryReport {
    pub input_shape: String,
    pub optimizer_multiplier: u64,
    pub total_nonrev_bytes: u64,
    pub total_prev_bytes: u64,
    pub breakdown: Breakdown,
    pub terms: Vec<LayerCost>,
    pub measured_peak_bytes: Option<u64>,
    pub backward_model: String,
}

impl MemoryReport {
    /// Recomputes both totals from `terms`.
    pub fn recompute(terms: &[LayerCost]) -> (u64, u64, Breakdown) {
        let mut b = Breakdown::default();
        for t in terms {
            b.sum_activations += t.m_a;
            b.sum_parameters += t.m_p;
            b.max_derivative = b.max_derivative.max(t.m_d);
            b.max_derivative_naive = b.max_derivative_naive.max(t.m_d_naive);
            match t.kind {
                LayerKind::NonReversible => b.sum_nonreversible += t.m_a,
                LayerKind::SequenceBoundary => b.sum_sequence_boundary += t.m_s,
                LayerKind::ReversibleInterior => {}
            }
            if t.kind != LayerKind::ReversibleInterior {
                b.max_backward = b.max_backward.max(t.m_b);
            }
        }
        let nonrev = b.sum_activations + b.sum_parameters + b.max_derivative;
        let prev =
            b.sum_nonreversible + b.sum_sequence_boundary + b.sum_parameters + b.max_backward;
        (nonrev, prev, b)
    }

    /// True when the stored totals and breakdown follow from the terms.
    pub fn is_consistent(&self) -> bool {
        let (nonrev, prev, b) = Self::recompute(&self.terms);
        nonrev == self.total_nonrev_bytes && prev == self.total_prev_bytes && b == self.breakdown
    }

    /// Aligned plain-text table followed by the totals.
    pub fn table(&self) -> String {
        let mut rows = vec![[
            "id".to_string(),
            "op".into(),
            "kind".into(),
            "shape".into(),
            "M_A".into(),
            "M_S".into(),
            "M_P".into(),
            "M_D".into(),
            "M_B".into(),
        ]];
        for t in &self.terms {
            rows.push([
                t.id.to_string(),
                t.op.to_string(),
                t.kind.to_string(),
                t.shape.clone(),
                t.m_a.to_string(),
                t.m_s.to_string(),
                t.m_p.to_string(),
                t.m_d.to_string(),
                t.m_b.to_string(),
            ]);
        }
        let mut widths = [0usize; 9];
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i >= 4 {
                        format!("{c:>w$}")
                    } else {
                        format!("{c:<w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        let b = &self.breakdown;
        out.push_str(&format!(
            "non-reversible total: {} = sum M_A {} + sum M_P {} + max M_D {} (naive {})\n",
            self.total_nonrev_bytes,
            b.sum_activations,
            b.sum_parameters,
            b.max_derivative,
            b.max_derivative_naive
        ));
        out.push_str(&format!(
            "partially reversible total: {} = sum M_N {} + sum M_S {} + sum M_P {} + max M_B {}\n",
            self.total_prev_bytes,
            b.sum_nonreversible,
            b.sum_sequence_boundary,
            b.sum_parameters,
            b.max_backward
        ));
        if let Some(p) = self.measured_peak_bytes {
            out.push_str(&format!("measured peak: {p}\n"));
        }
        out
    }
}

fn bytes(shape: Shape, batch: usize) -> u64 {
    shape.with_batch(batch).bytes() as u64
}

/// Derivative working set at each node of a graph during reverse
/// traversal. `nodes[i]` lists `(inputs, output_bytes, requires_grad)`.
fn derivative_working_sets(nodes: &[(Vec<usize>, u64, bool)]) -> Vec<u64> {
    let mut out = vec![0u64; nodes.len()];
    let Some(root) = nodes.len().checked_sub(1) else {
        return out;
    };
    let mut pending: HashMap<usize, u64> = HashMap::new();
    pending.insert(root, nodes[root].1);
    let mut live = nodes[root].1;
    for i in (0..=root).rev() {
        let Some(own) = pending.remove(&i) else {
            continue;
        };
        let needs: Vec<usize> = nodes[i].0.iter().copied().filter(|&j| nodes[j].2).collect();
        let produced: u64 = needs.iter().map(|&j| nodes[j].1).sum();
        out[i] = live + produced;
        live -= own;
        for j in needs {
            if let std::collections::hash_map::Entry::Vacant(e) = pending.entry(j) {
                e.insert(nodes[j].1);
                live += nodes[j].1;
            }
        }
    }
    out
}

/// Report for an already recorded graph; `store` resolves parameter sizes.
pub fn estimate_trace(
    trace: &Trace,
    store: &ParamStore,
    input: Shape,
    multiplier: u64,
) -> MemoryReport {
    let batch = trace.batch;
    let nodes: &[NodeInfo] = &trace.nodes;

    let mut kind = vec![LayerKind::NonReversible; nodes.len()];
    for span in &trace.sequences {
        for k in &mut kind[span.first..span.end] {
            *k = LayerKind::ReversibleInterior;
        }
        kind[span.end - 1] = LayerKind::SequenceBoundary;
    }

    let leaf_grad = |n: &NodeInfo| !n.leaf && n.requires_grad;
    let stored: Vec<_> = nodes
        .iter()
        .map(|n| {
            (
                n.inputs.iter().map(|i| i.0).collect(),
                bytes(n.shape, batch),
                leaf_grad(n),
            )
        })
        .collect();
    let m_d = derivative_working_sets(&stored);

    // Collapse each sequence to its boundary node; interior nodes keep no
    // inputs and never receive gradients.
    let mut collapsed = stored.clone();
    for span in &trace.sequences {
        let inside = span.first..span.end;
        let mut ext: Vec<usize> = Vec::new();
        for i in inside.clone() {
            for &j in &stored[i].0 {
                if !inside.contains(&j) && !ext.contains(&j) {
                    ext.push(j);
                }
            }
        }
        for entry in &mut collapsed[span.first..span.end - 1] {
            entry.0.clear();
            entry.2 = false;
        }
        collapsed[span.end - 1].0 = ext;
    }
    let m_b_graph = derivative_working_sets(&collapsed);

    let terms: Vec<LayerCost> = nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| !n.leaf)
        .map(|(i, n)| {
            let out = bytes(n.shape, batch);
            // the network output is always read by the loss
            let m_a = if n.retained || i + 1 == nodes.len() {
                out
            } else {
                0
            };
            let m_s = if kind[i] == LayerKind::SequenceBoundary {
                out
            } else {
                0
            };
            let m_p = n
                .params
                .iter()
                .map(|&p| store.get(p).numel() as u64)
                .sum::<u64>()
                * 4
                * multiplier;
            let m_b = match kind[i] {
                LayerKind::ReversibleInterior => 0,
                LayerKind::NonReversible => m_b_graph[i],
                LayerKind::SequenceBoundary => {
                    let produced: u64 = collapsed[i]
                        .0
                        .iter()
                        .filter(|&&j| collapsed[j].2)
                        .map(|&j| collapsed[j].1)
                        .sum();
                    m_b_graph[i] - produced + produced.max(SEQUENCE_BACKWARD_HALVES * (out / 2))
                }
            };
            LayerCost {
                id: i,
                op: n.op,
                shape: n.shape.with_batch(batch).to_string(),
                kind: kind[i],
                m_a,
                m_s,
                m_p,
                m_d: m_d[i],
                m_d_naive: out,
                m_b,
            }
        })
        .collect();
    let (total_nonrev_bytes, total_prev_bytes, breakdown) = MemoryReport::recompute(&terms);
    MemoryReport {
        input_shape: input.to_string(),
        optimizer_multiplier: multiplier,
        total_nonrev_bytes,
        total_prev_bytes,
        breakdown,
        terms,
        measured_peak_bytes: None,
        backward_model: format!(
            "M_D: pending derivatives plus produced input derivatives along the recorded graph; \
             M_B at a sequence: the pending derivatives on the graph with sequences collapsed, plus \
             the larger of its input derivative and {SEQUENCE_BACKWARD_HALVES} half-width tensors \
             for block-wise re-recording"
        ),
    }
}

/// Report for `input` (batch folded in). Both totals are always filled;
/// this and [`estimate_partially_reversible`] differ only in which total
/// they headline.
pub fn estimate(net: &Network, input: Shape, optimizer_multiplier: u64) -> Result<MemoryReport> {
    let trace = net.trace(input)?;
    Ok(estimate_trace(
        &trace,
        net.params(),
        input,
        optimizer_multiplier,
    ))
}

/// Training memory with every activation stored.
pub fn estimate_nonreversible(
    net: &Network,
    input: Shape,
    optimizer_multiplier: u64,
) -> Result<u64> {
    Ok(estimate(net, input, optimizer_multiplier)?.total_nonrev_bytes)
}

/// Training memory with reversible sequences recomputing on backward.
pub fn estimate_partially_reversible(
    net: &Network,
    input: Shape,
    optimizer_multiplier: u64,
) -> Result<u64> {
    Ok(estimate(net, input, optimizer_multiplier)?.total_prev_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(sizes: &[u64]) -> Vec<(Vec<usize>, u64, bool)> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &b)| (if i == 0 { vec![] } else { vec![i - 1] }, b, i > 0))
            .collect()
    }

    #[test]
    fn chain_working_set_is_neighbouring_pair() {
        // input (no grad) -> a(10) -> b(20) -> c(5)
        let ws = derivative_working_sets(&chain(&[8, 10, 20, 5]));
        assert_eq!(ws, vec![0, 10, 30, 25]);
    }

    #[test]
    fn branch_keeps_skip_gradient_pending() {
        // 0 input; 1 = f(0); 2 = g(1); 3 = add(2, 1)
        let nodes = vec![
            (vec![], 4, false),
            (vec![0], 4, true),
            (vec![1], 4, true),
            (vec![2, 1], 4, true),
        ];
        let ws = derivative_working_sets(&nodes);
        // at the add: own 4 + produced 8; at g: own 4 + pending skip 4 + produced 4
        assert_eq!(ws, vec![0, 4, 12, 12]);
    }

    #[test]
    fn single_convolution_by_hand() {
        use crate::engine::ops::{conv3d, Padding};
        use crate::engine::{Tape, Tensor};
        use rand::SeedableRng;

        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let w = store.add_conv_kernel("w", Shape::new(1, 1, 3, 3, 3), &mut rng);
        let b = store.add_filled("b", 1, 0.0);
        let input = Shape::new(1, 1, 8, 8, 8);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(input));
        conv3d(
            &mut tape,
            &x,
            store.get(w),
            Some(store.get(b)),
            Padding::Same,
        )
        .unwrap();
        let trace = Trace {
            nodes: tape.nodes(),
            sequences: Vec::new(),
            batch: 1,
        };
        let r = estimate_trace(&trace, &store, input, ADAM_MULTIPLIER);
        assert_eq!(r.terms.len(), 1);
        assert_eq!(
            (r.terms[0].m_a, r.terms[0].m_p, r.terms[0].m_d),
            (2048, 448, 2048)
        );
        assert_eq!(r.total_nonrev_bytes, 4544);
        assert_eq!(r.total_prev_bytes, 4544);
        assert!(r.is_consistent());
    }

    #[test]
    fn empty_graph() {
        assert!(derivative_working_sets(&[]).is_empty());
        let (a, b, _) = MemoryReport::recompute(&[]);
        assert_eq!((a, b), (0, 0));
    }
}
