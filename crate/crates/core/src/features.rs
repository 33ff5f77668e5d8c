//! Per-node flow features for one window.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowRecord, Label, WindowSlice};

pub const FLOW_FEATURE_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFlowFeatures {
    pub node_id: String,
    /// Successful flows with this node at either end.
    pub conn: u64,
    pub fail_conn: u64,
    /// Mean duration of the successful flows, 0 when there are none.
    pub dur: f64,
    /// Mean bytes transmitted by the node, over all of its flows.
    pub src_bytes_avg: f64,
    /// Mean bytes received by the node, over all of its flows.
    pub dst_bytes_avg: f64,
}

impl NodeFlowFeatures {
    pub fn to_array(&self) -> [f64; FLOW_FEATURE_DIM] {
        [
            self.conn as f64,
            self.fail_conn as f64,
            self.dur,
            self.src_bytes_avg,
            self.dst_bytes_avg,
        ]
    }
}

/// A flow counts as an established connection when both directions carried payload.
pub fn classify_flow_success(record: &FlowRecord) -> bool {
    record.src_bytes > 0 && record.dst_bytes > 0
}

#[derive(Default)]
struct Accum {
    conn: u64,
    fail: u64,
    dur_sum: f64,
    sent_sum: f64,
    recv_sum: f64,
}

impl Accum {
    fn add(&mut self, success: bool, duration: f64, sent: u64, recv: u64) {
        if success {
            self.conn += 1;
            self.dur_sum += duration;
        } else {
            self.fail += 1;
        }
        self.sent_sum += sent as f64;
        self.recv_sum += recv as f64;
    }

    fn finish(self, node_id: String) -> NodeFlowFeatures {
        let total = self.conn + self.fail;
        let mean = |sum: f64, n: u64| if n == 0 { 0.0 } else { sum / n as f64 };
        NodeFlowFeatures {
            node_id,
            conn: self.conn,
            fail_conn: self.fail,
            dur: mean(self.dur_sum, self.conn),
            src_bytes_avg: mean(self.sent_sum, total),
            dst_bytes_avg: mean(self.recv_sum, total),
        }
    }
}

pub fn extract_node_features(window: &WindowSlice) -> Result<BTreeMap<String, NodeFlowFeatures>> {
    extract_from_records(&window.records)
}

pub fn extract_from_records(records: &[FlowRecord]) -> Result<BTreeMap<String, NodeFlowFeatures>> {
    if records.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut acc: BTreeMap<&str, Accum> = BTreeMap::new();
    for r in records {
        let ok = classify_flow_success(r);
        acc.entry(&r.src_ip)
            .or_default()
            .add(ok, r.duration, r.src_bytes, r.dst_bytes);
        acc.entry(&r.dst_ip)
            .or_default()
            .add(ok, r.duration, r.dst_bytes, r.src_bytes);
    }
    Ok(acc
        .into_iter()
        .map(|(id, a)| (id.to_string(), a.finish(id.to_string())))
        .collect())
}

/// Node labels implied by flow labels.
///
/// A node that sources a bot-labelled flow is a bot. A node that appears in any
/// labelled flow and never sources a bot flow is legitimate. Nodes seen only in
/// unlabelled flows stay unknown.
pub fn node_labels(records: &[FlowRecord]) -> BTreeMap<String, Label> {
    let mut labels: BTreeMap<String, Label> = BTreeMap::new();
    let mut raise = |id: &str, l: Label| {
        let slot = labels.entry(id.to_string()).or_insert(Label::Unknown);
        *slot = match (*slot, l) {
            (Label::Bot, _) | (_, Label::Bot) => Label::Bot,
            (Label::Legit, _) | (_, Label::Legit) => Label::Legit,
            _ => Label::Unknown,
        };
    };
    for r in records {
        match r.label {
            Label::Bot => {
                raise(&r.src_ip, Label::Bot);
                raise(&r.dst_ip, Label::Legit);
            }
            Label::Legit => {
                raise(&r.src_ip, Label::Legit);
                raise(&r.dst_ip, Label::Legit);
            }
            Label::Unknown => {
                raise(&r.src_ip, Label::Unknown);
                raise(&r.dst_ip, Label::Unknown);
            }
        }
    }
    labels
}

pub fn write_features_csv<W: Write>(
    mut out: W,
    features: &BTreeMap<String, NodeFlowFeatures>,
) -> std::io::Result<()> {
    writeln!(out, "node_id,conn,fail_conn,dur,src_bytes_avg,dst_bytes_avg")?;
    for f in features.values() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            f.node_id, f.conn, f.fail_conn, f.dur, f.src_bytes_avg, f.dst_bytes_avg
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Proto;

    fn flow(src: &str, dst: &str, dur: f64, sb: u64, db: u64) -> FlowRecord {
        FlowRecord {
            ts_start: 0.0,
            duration: dur,
            proto: Proto::Tcp,
            src_ip: src.into(),
            src_port: 1000,
            dst_ip: dst.into(),
            dst_port: 80,
            src_bytes: sb,
            dst_bytes: db,
            label: Label::Unknown,
        }
    }

    #[test]
    fn success_criterion() {
        assert!(classify_flow_success(&flow("a", "b", 1.0, 500, 300)));
        assert!(!classify_flow_success(&flow("a", "b", 1.0, 40, 0)));
        assert!(!classify_flow_success(&flow("a", "b", 1.0, 0, 0)));
    }

    #[test]
    fn single_flow_bookkeeping() {
        let f = extract_from_records(&[flow("A", "B", 2.0, 100, 50)]).unwrap();
        let a = &f["A"];
        assert_eq!((a.conn, a.fail_conn), (1, 0));
        assert_eq!((a.dur, a.src_bytes_avg, a.dst_bytes_avg), (2.0, 100.0, 50.0));
        let b = &f["B"];
        assert_eq!((b.conn, b.fail_conn), (1, 0));
        assert_eq!((b.dur, b.src_bytes_avg, b.dst_bytes_avg), (2.0, 50.0, 100.0));
    }

    #[test]
    fn scanning_node() {
        let flows: Vec<_> = (0..10)
            .map(|i| flow("A", &format!("t{i}"), 0.1, 40, 0))
            .collect();
        let f = extract_from_records(&flows).unwrap();
        let a = &f["A"];
        assert_eq!((a.conn, a.fail_conn), (0, 10));
        assert_eq!((a.dur, a.src_bytes_avg, a.dst_bytes_avg), (0.0, 40.0, 0.0));
        assert_eq!(f.len(), 11);
    }

    #[test]
    fn empty_window_errors() {
        assert!(matches!(extract_from_records(&[]), Err(Error::EmptyWindow)));
    }

    #[test]
    fn labels_from_flows() {
        let mut bot = flow("B", "C", 1.0, 1, 1);
        bot.label = Label::Bot;
        let mut legit = flow("L", "B", 1.0, 1, 1);
        legit.label = Label::Legit;
        let unk = flow("U", "V", 1.0, 1, 1);
        let labels = node_labels(&[legit, bot, unk]);
        assert_eq!(labels["B"], Label::Bot);
        assert_eq!(labels["C"], Label::Legit);
        assert_eq!(labels["L"], Label::Legit);
        assert_eq!(labels["U"], Label::Unknown);
    }
}
