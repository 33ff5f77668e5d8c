//! Shared fixtures and brute-force reference implementations.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use botfuse::flow::{FlowRecord, Label, Proto, WindowSlice};
use botfuse::gcn::{GcnModel, ResidualMode};
use botfuse::graph::{propagation_matrix, CommGraph, PropagationMatrix};

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, density: f64) -> CommGraph {
    let mut edges = Vec::new();
    for s in 0..n {
        for d in 0..n {
            if s != d && rng.gen::<f64>() < density {
                edges.push((s, d));
            }
        }
    }
    CommGraph::from_edges(n, edges, None, None).unwrap()
}

/// Random graph containing a spanning path, so no node is isolated.
pub fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize) -> CommGraph {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    for _ in 0..n {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    CommGraph::from_edges(n, edges, None, None).unwrap()
}

/// `D^{-1/2} A D^{-1/2}` with dense matrices, `A` symmetrized.
pub fn dense_propagation(g: &CommGraph, self_loops: bool) -> Array2<f64> {
    let n = g.n();
    let mut a = Array2::<f64>::zeros((n, n));
    for &(s, d) in &g.edges {
        a[[s, d]] = 1.0;
        a[[d, s]] = 1.0;
    }
    if self_loops {
        for i in 0..n {
            a[[i, i]] = 1.0;
        }
    }
    let mut d_inv_sqrt = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let deg: f64 = a.row(i).sum();
        if deg > 0.0 {
            d_inv_sqrt[[i, i]] = 1.0 / deg.sqrt();
        }
    }
    d_inv_sqrt.dot(&a).dot(&d_inv_sqrt)
}

/// Layer-by-layer forward pass with a dense propagation matrix.
pub fn dense_forward(model: &GcnModel, p: &Array2<f64>, x0: &Array2<f64>) -> Array2<f64> {
    let mut x = x0.clone();
    for (k, w) in model.weights.iter().enumerate() {
        let mut z = p.dot(&x).dot(w);
        if let Some(b) = &model.layer_biases {
            for mut row in z.rows_mut() {
                row += &b[k];
            }
        }
        let relu = z.mapv(|v| v.max(0.0));
        x = match model.residual {
            ResidualMode::PreActivation => &z + &relu,
            ResidualMode::Input => {
                let mut out = relu;
                if x.ncols() <= out.ncols() {
                    for i in 0..x.nrows() {
                        for j in 0..x.ncols() {
                            out[[i, j]] += x[[i, j]];
                        }
                    }
                }
                out
            }
        };
    }
    x
}

pub fn masked_cross_entropy(
    model: &GcnModel,
    p: &PropagationMatrix,
    x0: &Array2<f64>,
    labels: &[bool],
    mask: &[bool],
) -> f64 {
    let hidden = dense_forward(model, &p.to_dense(), x0);
    let logits = hidden.dot(&model.head_weight) + &model.head_bias;
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..labels.len() {
        if !mask[i] {
            continue;
        }
        let (a, b) = (logits[[i, 0]], logits[[i, 1]]);
        let log_z = (a.exp() + b.exp()).ln();
        total -= if labels[i] { b } else { a } - log_z;
        count += 1;
    }
    total / count as f64
}

pub fn propagation(g: &CommGraph) -> PropagationMatrix {
    propagation_matrix(g, false)
}

/// Flows over `hosts` addresses with a mix of protocols, failures, self-flows
/// and labels.
pub fn random_flows(rng: &mut ChaCha8Rng, count: usize, hosts: usize) -> Vec<FlowRecord> {
    (0..count)
        .map(|i| {
            let src = rng.gen_range(0..hosts);
            let dst = if rng.gen::<f64>() < 0.02 { src } else { rng.gen_range(0..hosts) };
            let failed = rng.gen::<f64>() < 0.2;
            FlowRecord {
                ts_start: rng.gen_range(0.0..59.0),
                duration: rng.gen_range(0.0..30.0),
                proto: match rng.gen_range(0..10) {
                    0 => Proto::Other,
                    1..=3 => Proto::Udp,
                    _ => Proto::Tcp,
                },
                src_ip: format!("h{src}"),
                src_port: (1024 + i % 60000) as u16,
                dst_ip: format!("h{dst}"),
                dst_port: 80,
                src_bytes: if failed && rng.gen() { 0 } else { rng.gen_range(0..5000) },
                dst_bytes: if failed { 0 } else { rng.gen_range(1..90000) },
                label: match rng.gen_range(0..6) {
                    0 => Label::Bot,
                    1 => Label::Unknown,
                    _ => Label::Legit,
                },
            }
        })
        .collect()
}

/// Per-node features by scanning every flow once per node.
pub fn brute_force_features(flows: &[FlowRecord]) -> BTreeMap<String, [f64; 5]> {
    let mut ids: Vec<&String> = flows.iter().flat_map(|r| [&r.src_ip, &r.dst_ip]).collect();
    ids.sort();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let (mut ok, mut bad, mut dur, mut sent, mut recv) = (0u64, 0u64, 0.0, 0.0, 0.0);
            for r in flows {
                let success = r.src_bytes > 0 && r.dst_bytes > 0;
                for (end, out, inb) in [(&r.src_ip, r.src_bytes, r.dst_bytes), (&r.dst_ip, r.dst_bytes, r.src_bytes)] {
                    if end != id {
                        continue;
                    }
                    if success {
                        ok += 1;
                        dur += r.duration;
                    } else {
                        bad += 1;
                    }
                    sent += out as f64;
                    recv += inb as f64;
                }
            }
            let all = (ok + bad) as f64;
            let dur_avg = if ok == 0 { 0.0 } else { dur / ok as f64 };
            (id.clone(), [ok as f64, bad as f64, dur_avg, sent / all, recv / all])
        })
        .collect()
}

/// A TCP flow whose source port records its position in the input.
pub fn flow_at(ts: f64, i: usize) -> FlowRecord {
    FlowRecord {
        ts_start: ts,
        duration: 1.0,
        proto: Proto::Tcp,
        src_ip: "a".into(),
        src_port: i as u16,
        dst_ip: "b".into(),
        dst_port: 80,
        src_bytes: 10,
        dst_bytes: 10,
        label: Label::Legit,
    }
}

pub fn window_of(records: Vec<FlowRecord>) -> WindowSlice {
    WindowSlice {
        window_start: 0.0,
        window_len: 60.0,
        records,
    }
}

/// Two overlapping Gaussian-ish clouds in `d` dimensions.
pub fn noisy_blobs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Array2<f64>, Vec<bool>) {
    let y: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let x = Array2::from_shape_fn((n, d), |(i, _)| {
        let centre = if y[i] { 1.0 } else { -1.0 };
        centre + rng.gen_range(-2.0..2.0)
    });
    (x, y)
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counted half.
pub fn all_pairs_auc(y: &[bool], s: &[f64]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] && !y[j] {
                pairs += 1;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
