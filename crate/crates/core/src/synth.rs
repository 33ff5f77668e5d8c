//! Synthetic labelled topologies and flow traces.
//!
//! A background graph (preferential attachment or Erdős–Rényi) gets a botnet
//! overlaid on it: controllers wired to their bots in stars for C2, a random
//! k-regular mesh among bots for P2P. Every bot also links to at least one
//! background node. Node indices are shuffled so position carries no signal.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowRecord, Label, Proto};
use crate::graph::{Architecture, CommGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackgroundModel {
    /// Barabási–Albert growth, `m` links per new node.
    PreferentialAttachment { m: usize },
    ErdosRenyi { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGraphSpec {
    pub architecture: Architecture,
    pub n_background: usize,
    pub background: BackgroundModel,
    /// Bots, not counting C2 controllers.
    pub n_bots: usize,
    /// C2 only; bots are dealt to controllers round-robin.
    pub controllers: usize,
    /// P2P only; degree of the bot mesh.
    pub mesh_degree: usize,
    /// Background nodes each bot (and controller) links to.
    pub bot_links: usize,
    pub seed: u64,
}

impl SyntheticGraphSpec {
    /// Benchmark preset: 96 bots under 4 controllers (C2) or 100 bots in a
    /// 16-regular mesh (P2P).
    pub fn preset(architecture: Architecture, n_background: usize, seed: u64) -> Self {
        match architecture {
            Architecture::C2 => Self::c2(n_background, 96, 4, seed),
            Architecture::P2P => Self::p2p(n_background, 100, 16, seed),
        }
    }

    pub fn c2(n_background: usize, n_bots: usize, controllers: usize, seed: u64) -> Self {
        SyntheticGraphSpec {
            architecture: Architecture::C2,
            n_background,
            background: BackgroundModel::PreferentialAttachment { m: 3 },
            n_bots,
            controllers,
            mesh_degree: 0,
            bot_links: 1,
            seed,
        }
    }

    pub fn p2p(n_background: usize, n_bots: usize, mesh_degree: usize, seed: u64) -> Self {
        SyntheticGraphSpec {
            architecture: Architecture::P2P,
            n_background,
            background: BackgroundModel::PreferentialAttachment { m: 3 },
            n_bots,
            controllers: 0,
            mesh_degree,
            bot_links: 1,
            seed,
        }
    }

    pub fn n_positive(&self) -> usize {
        match self.architecture {
            Architecture::C2 => self.n_bots + self.controllers,
            Architecture::P2P => self.n_bots,
        }
    }

    pub fn n_total(&self) -> usize {
        self.n_background + self.n_positive()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_background == 0 || self.n_bots == 0 || self.bot_links == 0 {
            return Err(Error::InvalidSpec(
                "node counts and bot_links must be positive".into(),
            ));
        }
        match self.background {
            BackgroundModel::PreferentialAttachment { m } => {
                if m == 0 || m >= self.n_background {
                    return Err(Error::InvalidSpec(format!(
                        "attachment m={m} needs 0 < m < n_background"
                    )));
                }
            }
            BackgroundModel::ErdosRenyi { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidSpec(format!("edge probability {p}")));
                }
            }
        }
        match self.architecture {
            Architecture::C2 => {
                if self.controllers == 0 {
                    return Err(Error::InvalidSpec("C2 needs at least one controller".into()));
                }
            }
            Architecture::P2P => {
                let k = self.mesh_degree;
                if k == 0 || k >= self.n_bots {
                    return Err(Error::InvalidSpec(format!(
                        "mesh degree {k} must satisfy 0 < k < n_bots={}",
                        self.n_bots
                    )));
                }
                if (k * self.n_bots) % 2 == 1 {
                    return Err(Error::InfeasibleMesh {
                        k,
                        n_bots: self.n_bots,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Undirected topology before relabelling, plus roles.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub n: usize,
    pub background_edges: Vec<(usize, usize)>,
    /// Controller-bot stars or bot mesh.
    pub botnet_edges: Vec<(usize, usize)>,
    /// Bot (or controller) to background links.
    pub bot_links: Vec<(usize, usize)>,
    pub is_bot: Vec<bool>,
    pub is_controller: Vec<bool>,
}

fn preferential_attachment(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    let mut targets: Vec<usize> = Vec::new();
    let seed_size = (m + 1).min(n);
    for i in 0..seed_size {
        for j in (i + 1)..seed_size {
            edges.push((i, j));
            targets.push(i);
            targets.push(j);
        }
    }
    for v in seed_size..n {
        let mut chosen = BTreeSet::new();
        while chosen.len() < m {
            chosen.insert(targets[rng.gen_range(0..targets.len())]);
        }
        for u in chosen {
            edges.push((u, v));
            targets.push(u);
            targets.push(v);
        }
    }
    edges
}

fn erdos_renyi(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Random simple k-regular graph on `n` vertices by incremental stub pairing
/// with restarts.
pub fn random_regular(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k >= n || (k * n) % 2 == 1 {
        return Err(Error::InfeasibleMesh { k, n_bots: n });
    }
    'restart: for _ in 0..1000 {
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, k)).collect();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        while !stubs.is_empty() {
            let mut paired = false;
            for _ in 0..64 {
                let a = rng.gen_range(0..stubs.len());
                let b = rng.gen_range(0..stubs.len());
                let (u, v) = (stubs[a], stubs[b]);
                if a != b && u != v && !adj[u].contains(&v) {
                    adj[u].insert(v);
                    adj[v].insert(u);
                    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
                    stubs.swap_remove(hi);
                    stubs.swap_remove(lo);
                    paired = true;
                    break;
                }
            }
            if !paired {
                continue 'restart;
            }
        }
        let mut edges = Vec::with_capacity(n * k / 2);
        for (u, set) in adj.iter().enumerate() {
            edges.extend(set.iter().filter(|&&v| v > u).map(|&v| (u, v)));
        }
        return Ok(edges);
    }
    Err(Error::InfeasibleMesh { k, n_bots: n })
}

/// Build the undirected topology with shuffled node indices.
pub fn generate_topology(spec: &SyntheticGraphSpec) -> Result<Topology> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nb = spec.n_background;
    let background = match spec.background {
        BackgroundModel::PreferentialAttachment { m } => preferential_attachment(&mut rng, nb, m),
        BackgroundModel::ErdosRenyi { p } => erdos_renyi(&mut rng, nb, p),
    };
    // Raw layout: background, then controllers, then bots.
    let n_ctrl = if spec.architecture == Architecture::C2 {
        spec.controllers
    } else {
        0
    };
    let first_bot = nb + n_ctrl;
    let n = first_bot + spec.n_bots;
    let mut botnet = Vec::new();
    match spec.architecture {
        Architecture::C2 => {
            for b in 0..spec.n_bots {
                botnet.push((nb + b % n_ctrl, first_bot + b));
            }
        }
        Architecture::P2P => {
            for (u, v) in random_regular(&mut rng, spec.n_bots, spec.mesh_degree)? {
                botnet.push((first_bot + u, first_bot + v));
            }
        }
    }
    let mut links = Vec::new();
    for b in nb..n {
        let want = spec.bot_links.min(nb);
        let mut chosen = BTreeSet::new();
        while chosen.len() < want {
            chosen.insert(rng.gen_range(0..nb));
        }
        links.extend(chosen.into_iter().map(|t| (b, t)));
    }

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let relabel = |edges: Vec<(usize, usize)>| -> Vec<(usize, usize)> {
        edges.into_iter().map(|(u, v)| (perm[u], perm[v])).collect()
    };
    let mut is_bot = vec![false; n];
    let mut is_controller = vec![false; n];
    for raw in nb..n {
        is_bot[perm[raw]] = true;
        if raw < first_bot {
            is_controller[perm[raw]] = true;
        }
    }
    Ok(Topology {
        n,
        background_edges: relabel(background),
        botnet_edges: relabel(botnet),
        bot_links: relabel(links),
        is_bot,
        is_controller,
    })
}

/// Labelled graph with all-ones features; every undirected edge is stored in
/// both directions.
pub fn generate_synthetic_graph(spec: &SyntheticGraphSpec) -> Result<CommGraph> {
    let t = generate_topology(spec)?;
    let edges = t
        .background_edges
        .iter()
        .chain(&t.botnet_edges)
        .chain(&t.bot_links)
        .flat_map(|&(u, v)| [(u, v), (v, u)]);
    let labels = t
        .is_bot
        .iter()
        .map(|&b| if b { Label::Bot } else { Label::Legit })
        .collect();
    let mut g = CommGraph::from_edges(t.n, edges, None, Some(labels))?;
    g.architecture = Some(spec.architecture);
    Ok(g)
}

/// `count` pretraining graphs of about 1,000 nodes, seeded `seed, seed + 1, ...`.
pub fn pretraining_set(architecture: Architecture, count: usize, seed: u64) -> Result<Vec<CommGraph>> {
    (0..count as u64)
        .map(|i| generate_synthetic_graph(&SyntheticGraphSpec::preset(architecture, 900, seed + i)))
        .collect()
}

/// Traffic model layered on a synthetic topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSpec {
    pub graph: SyntheticGraphSpec,
    /// Trace length in seconds, starting at `t = 0`.
    pub duration: f64,
    /// Mean flows per second on each background edge.
    pub background_rate: f64,
    /// Probability that a legitimate flow goes unanswered.
    pub background_fail: f64,
    /// Mean seconds between bot control messages on each botnet edge. The
    /// default is 6 s for C2 stars and 60 s for P2P meshes, where each bot
    /// has many more peers.
    pub heartbeat_period: f64,
    /// Fraction of bots that also port-scan random hosts.
    pub scan_fraction: f64,
    /// Probes per second from each scanning bot.
    pub scan_rate: f64,
}

impl TrafficSpec {
    pub fn new(graph: SyntheticGraphSpec) -> TrafficSpec {
        TrafficSpec {
            heartbeat_period: match graph.architecture {
                Architecture::C2 => 6.0,
                Architecture::P2P => 60.0,
            },
            graph,
            duration: 300.0,
            background_rate: 0.05,
            background_fail: 0.05,
            scan_fraction: 0.3,
            scan_rate: 0.2,
        }
    }
}

fn node_ip(i: usize) -> String {
    format!("10.{}.{}.{}", (i >> 16) & 0xff, (i >> 8) & 0xff, i & 0xff)
}

fn exp_sample(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    -mean * (1.0 - rng.gen::<f64>()).ln()
}

fn lognormal(rng: &mut ChaCha8Rng, median: f64, sigma: f64) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    median * (sigma * z).exp()
}

struct FlowSink<'a> {
    rng: ChaCha8Rng,
    out: Vec<FlowRecord>,
    ips: &'a [String],
}

impl FlowSink<'_> {
    fn legit(&mut self, src: usize, dst: usize, ts: f64, fail_p: f64) {
        let rng = &mut self.rng;
        let failed = rng.gen::<f64>() < fail_p;
        let (duration, sb, db) = if failed {
            (rng.gen_range(0.0..0.5), rng.gen_range(40..80), 0)
        } else {
            (
                exp_sample(rng, 8.0),
                lognormal(rng, 900.0, 1.0).max(1.0) as u64,
                lognormal(rng, 6000.0, 1.4).max(1.0) as u64,
            )
        };
        let proto = if rng.gen::<f64>() < 0.8 { Proto::Tcp } else { Proto::Udp };
        self.push(src, dst, ts, duration, proto, sb, db, Label::Legit);
    }

    fn control(&mut self, src: usize, dst: usize, ts: f64) {
        let rng = &mut self.rng;
        let duration = rng.gen_range(0.02..0.6);
        let sb = rng.gen_range(60..240);
        let db = rng.gen_range(40..180);
        self.push(src, dst, ts, duration, Proto::Tcp, sb, db, Label::Bot);
    }

    fn probe(&mut self, src: usize, dst: usize, ts: f64) {
        let rng = &mut self.rng;
        let duration = rng.gen_range(0.0..0.05);
        let sb = rng.gen_range(40..64);
        self.push(src, dst, ts, duration, Proto::Tcp, sb, 0, Label::Bot);
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        src: usize,
        dst: usize,
        ts: f64,
        duration: f64,
        proto: Proto,
        src_bytes: u64,
        dst_bytes: u64,
        label: Label,
    ) {
        let src_port = self.rng.gen_range(1024..65535);
        let dst_port = *[80u16, 443, 53, 22, 8080, 6667].choose(&mut self.rng).expect("nonempty");
        self.out.push(FlowRecord {
            ts_start: ts,
            duration,
            proto,
            src_ip: self.ips[src].clone(),
            src_port,
            dst_ip: self.ips[dst].clone(),
            dst_port,
            src_bytes,
            dst_bytes,
            label,
        });
    }
}

/// Labelled flow trace over a synthetic topology, sorted by start time.
///
/// Background edges and bot-to-background links carry legitimate traffic.
/// Botnet edges carry periodic small control flows from each bot (and, for
/// C2, occasional commands from controllers). A fraction of bots emits
/// unanswered probes to random background hosts.
pub fn generate_flows(spec: &TrafficSpec) -> Result<(Vec<FlowRecord>, Topology)> {
    let topo = generate_topology(&spec.graph)?;
    if !(spec.duration > 0.0 && spec.heartbeat_period > 0.0) {
        return Err(Error::InvalidSpec("duration and heartbeat period must be positive".into()));
    }
    let ips: Vec<String> = (0..topo.n).map(node_ip).collect();
    let mut sink = FlowSink {
        rng: ChaCha8Rng::seed_from_u64(spec.graph.seed ^ 0xf10f_f10f),
        out: Vec::new(),
        ips: &ips,
    };

    let poisson_times = |rng: &mut ChaCha8Rng, rate: f64| -> Vec<f64> {
        let mut ts = Vec::new();
        if rate <= 0.0 {
            return ts;
        }
        let mut t = exp_sample(rng, 1.0 / rate);
        while t < spec.duration {
            ts.push(t);
            t += exp_sample(rng, 1.0 / rate);
        }
        ts
    };

    for &(u, v) in topo.background_edges.iter().chain(&topo.bot_links) {
        for ts in poisson_times(&mut sink.rng, spec.background_rate) {
            let (s, d) = if sink.rng.gen::<bool>() { (u, v) } else { (v, u) };
            sink.legit(s, d, ts, spec.background_fail);
        }
    }

    for &(u, v) in &topo.botnet_edges {
        // Heartbeats go from the bot side; in C2 `u` is the controller.
        let (bot, peer) = if topo.is_controller[u] { (v, u) } else { (u, v) };
        let period = spec.heartbeat_period * sink.rng.gen_range(0.7..1.3);
        let mut t = sink.rng.gen_range(0.0..period);
        while t < spec.duration {
            sink.control(bot, peer, t);
            t += period * sink.rng.gen_range(0.9..1.1);
        }
        if topo.is_controller[peer] {
            for ts in poisson_times(&mut sink.rng, 1.0 / (4.0 * spec.heartbeat_period)) {
                sink.control(peer, bot, ts);
            }
        }
    }

    let background: Vec<usize> = (0..topo.n).filter(|&i| !topo.is_bot[i]).collect();
    for b in (0..topo.n).filter(|&i| topo.is_bot[i] && !topo.is_controller[i]) {
        if sink.rng.gen::<f64>() >= spec.scan_fraction {
            continue;
        }
        for ts in poisson_times(&mut sink.rng, spec.scan_rate) {
            let target = background[sink.rng.gen_range(0..background.len())];
            sink.probe(b, target, ts);
        }
    }

    let mut flows = sink.out;
    flows.sort_by(|a, b| a.ts_start.total_cmp(&b.ts_start));
    Ok((flows, topo))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c2_construction() {
        let spec = SyntheticGraphSpec::c2(100, 10, 1, 4);
        let g = generate_synthetic_graph(&spec).unwrap();
        assert_eq!(g.n(), 111);
        let labels = g.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == Label::Bot).count(), 11);
        let t = generate_topology(&spec).unwrap();
        let ctrl = t.is_controller.iter().position(|&c| c).unwrap();
        let adj = g.undirected_neighbors();
        assert!(adj[ctrl].len() >= 10);
    }

    #[test]
    fn p2p_mesh_degree() {
        let spec = SyntheticGraphSpec::p2p(100, 20, 4, 9);
        let t = generate_topology(&spec).unwrap();
        let mut deg = vec![0usize; t.n];
        for &(u, v) in &t.botnet_edges {
            assert!(t.is_bot[u] && t.is_bot[v]);
            deg[u] += 1;
            deg[v] += 1;
        }
        for i in (0..t.n).filter(|&i| t.is_bot[i]) {
            assert_eq!(deg[i], 4);
        }
    }

    #[test]
    fn regular_graph_is_simple() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let edges = random_regular(&mut rng, 50, 6).unwrap();
        assert_eq!(edges.len(), 150);
        let set: BTreeSet<_> = edges.iter().copied().collect();
        assert_eq!(set.len(), 150);
        assert!(edges.iter().all(|(u, v)| u != v));
    }

    #[test]
    fn infeasible_mesh() {
        let spec = SyntheticGraphSpec::p2p(100, 5, 3, 0);
        assert!(matches!(
            generate_synthetic_graph(&spec),
            Err(Error::InfeasibleMesh { k: 3, n_bots: 5 })
        ));
        let spec = SyntheticGraphSpec::p2p(100, 5, 5, 0);
        assert!(matches!(generate_synthetic_graph(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn seeded_generation_repeats() {
        let spec = SyntheticGraphSpec::c2(200, 30, 2, 77);
        assert_eq!(
            generate_synthetic_graph(&spec).unwrap(),
            generate_synthetic_graph(&spec).unwrap()
        );
        let t = TrafficSpec::new(spec);
        assert_eq!(generate_flows(&t).unwrap().0, generate_flows(&t).unwrap().0);
    }

    #[test]
    fn bots_are_attached_to_background() {
        let spec = SyntheticGraphSpec::c2(50, 8, 2, 3);
        let t = generate_topology(&spec).unwrap();
        for i in (0..t.n).filter(|&i| t.is_bot[i]) {
            assert!(t
                .bot_links
                .iter()
                .any(|&(b, bg)| b == i && !t.is_bot[bg]));
        }
    }

    #[test]
    fn flows_label_bot_sources() {
        let spec = TrafficSpec::new(SyntheticGraphSpec::c2(60, 10, 1, 5));
        let (flows, topo) = generate_flows(&spec).unwrap();
        assert!(flows.windows(2).all(|w| w[0].ts_start <= w[1].ts_start));
        for f in flows.iter().filter(|f| f.label == Label::Bot) {
            let src: usize = {
                let parts: Vec<usize> = f.src_ip.split('.').map(|p| p.parse().unwrap()).collect();
                (parts[1] << 16) | (parts[2] << 8) | parts[3]
            };
            assert!(topo.is_bot[src]);
        }
    }
}
