//! Session neighborhood graphs for the CAR prior.
//!
//! Nodes are clustering units (sessions, or modules of sessions). Weights are
//! symmetric and nonnegative with a zero diagonal; only positive weights are
//! stored. Islands are the connected components of the positive-weight graph.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterUnit {
    Session,
    Module,
}

/// Assignment of sessions to the units that carry session-level effects.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub unit: ClusterUnit,
    /// Session id, or `group:module` for module units.
    pub labels: Vec<String>,
    pub group_of: Vec<String>,
    /// Session order or module index within the group.
    pub order_of: Vec<u32>,
    /// Cluster index of each session in the dataset.
    pub session_cluster: Vec<usize>,
}

impl Clustering {
    pub fn new(dataset: &Dataset, unit: ClusterUnit) -> Result<Self> {
        match unit {
            ClusterUnit::Session => Ok(Self {
                unit,
                labels: dataset.sessions.iter().map(|s| s.id.clone()).collect(),
                group_of: dataset.sessions.iter().map(|s| s.group_id.clone()).collect(),
                order_of: dataset.sessions.iter().map(|s| s.order_index).collect(),
                session_cluster: (0..dataset.n_sessions()).collect(),
            }),
            ClusterUnit::Module => {
                let mut keys: BTreeMap<(String, u32), usize> = BTreeMap::new();
                let mut group_rank: BTreeMap<&str, usize> = BTreeMap::new();
                for s in &dataset.sessions {
                    let next = group_rank.len();
                    group_rank.entry(s.group_id.as_str()).or_insert(next);
                }
                for s in &dataset.sessions {
                    let m = s.module_index.ok_or_else(|| {
                        Error::Config(format!(
                            "module clustering requested but session {} has no module_index",
                            s.id
                        ))
                    })?;
                    keys.insert((s.group_id.clone(), m), 0);
                }
                // Group order follows session order, modules ascend within a group.
                let mut ordered: Vec<(String, u32)> = keys.keys().cloned().collect();
                ordered.sort_by_key(|(g, m)| (group_rank[g.as_str()], *m));
                for (i, key) in ordered.iter().enumerate() {
                    keys.insert(key.clone(), i);
                }
                let session_cluster = dataset
                    .sessions
                    .iter()
                    .map(|s| keys[&(s.group_id.clone(), s.module_index.unwrap())])
                    .collect();
                Ok(Self {
                    unit,
                    labels: ordered.iter().map(|(g, m)| format!("{g}:{m}")).collect(),
                    group_of: ordered.iter().map(|(g, _)| g.clone()).collect(),
                    order_of: ordered.iter().map(|(_, m)| *m).collect(),
                    session_cluster,
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Cluster index of every observation.
    pub fn observation_clusters(&self, dataset: &Dataset) -> Vec<usize> {
        dataset
            .observations
            .iter()
            .map(|o| self.session_cluster[o.session])
            .collect()
    }

    /// Sorted client indices attending each cluster.
    pub fn attendees(&self, dataset: &Dataset) -> Vec<BTreeSet<usize>> {
        let mut out = vec![BTreeSet::new(); self.len()];
        for o in &dataset.observations {
            out[self.session_cluster[o.session]].insert(o.client);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionGraph {
    pub unit: ClusterUnit,
    pub labels: Vec<String>,
    /// Positive-weight adjacency, each list sorted by neighbor index.
    neighbors: Vec<Vec<(usize, f64)>>,
    row_sums: Vec<f64>,
    /// Component id of every node, numbered by first appearance.
    islands: Vec<usize>,
    n_islands: usize,
}

impl SessionGraph {
    /// Builds a graph from undirected weighted edges. Zero weights are dropped;
    /// repeated pairs are an error.
    pub fn from_edges(
        labels: Vec<String>,
        unit: ClusterUnit,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let size = labels.len();
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (s, j, w) in edges {
            if s >= size || j >= size {
                return Err(Error::Validation(format!("edge ({s},{j}) out of range")));
            }
            if s == j {
                return Err(Error::Validation(format!("self-loop on node {s}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Validation(format!("invalid weight {w} on ({s},{j})")));
            }
            if w == 0.0 {
                continue;
            }
            if map.insert((s.min(j), s.max(j)), w).is_some() {
                return Err(Error::Validation(format!("duplicate edge ({s},{j})")));
            }
        }
        let mut neighbors = vec![Vec::new(); size];
        for (&(s, j), &w) in &map {
            neighbors[s].push((j, w));
            neighbors[j].push((s, w));
        }
        for list in &mut neighbors {
            list.sort_by_key(|&(j, _)| j);
        }
        let row_sums = neighbors
            .iter()
            .map(|list| list.iter().map(|&(_, w)| w).sum())
            .collect();
        let (islands, n_islands) = components(&neighbors);
        Ok(Self {
            unit,
            labels,
            neighbors,
            row_sums,
            islands,
            n_islands,
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn neighbors(&self, s: usize) -> &[(usize, f64)] {
        &self.neighbors[s]
    }

    pub fn row_sum(&self, s: usize) -> f64 {
        self.row_sums[s]
    }

    pub fn weight(&self, s: usize, j: usize) -> f64 {
        self.neighbors[s]
            .binary_search_by_key(&j, |&(k, _)| k)
            .map(|pos| self.neighbors[s][pos].1)
            .unwrap_or(0.0)
    }

    /// Undirected edges with s < j.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.neighbors.iter().enumerate().flat_map(|(s, list)| {
            list.iter()
                .filter(move |&&(j, _)| j > s)
                .map(move |&(j, w)| (s, j, w))
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edges().count()
    }

    pub fn island_of(&self, s: usize) -> usize {
        self.islands[s]
    }

    /// Number of connected components, G.
    pub fn n_islands(&self) -> usize {
        self.n_islands
    }

    /// Members of each island in node order.
    pub fn island_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_islands];
        for (s, &g) in self.islands.iter().enumerate() {
            out[g].push(s);
        }
        out
    }

    pub fn is_isolated(&self, s: usize) -> bool {
        self.row_sums[s] == 0.0
    }

    /// Σ_{s<j} w_sj (u_s − u_j)².
    pub fn pairwise_energy(&self, u: &[f64]) -> f64 {
        self.edges().map(|(s, j, w)| w * (u[s] - u[j]).powi(2)).sum()
    }

    /// Writes the stored entries of W as `s,j,w` triplets using node labels.
    pub fn write_triplets<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["s", "j", "w"])?;
        for (s, list) in self.neighbors.iter().enumerate() {
            for &(j, weight) in list {
                w.write_record([&self.labels[s], &self.labels[j], &weight.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<triplets>", e))?;
        Ok(())
    }
}

fn components(neighbors: &[Vec<(usize, f64)>]) -> (Vec<usize>, usize) {
    let mut label = vec![usize::MAX; neighbors.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..neighbors.len() {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        stack.push(start);
        while let Some(s) = stack.pop() {
            for &(j, _) in &neighbors[s] {
                if label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    (label, next)
}

/// Connected-component partition of the graph, as lists of node indices.
pub fn detect_islands(graph: &SessionGraph) -> Vec<Vec<usize>> {
    graph.island_members()
}

/// Closeness Type 1: units adjacent in time within the same rolling group.
pub fn build_type1_weights(dataset: &Dataset, unit: ClusterUnit) -> Result<SessionGraph> {
    let clustering = Clustering::new(dataset, unit)?;
    let mut by_key: BTreeMap<(&str, u32), usize> = BTreeMap::new();
    for (c, (g, o)) in clustering.group_of.iter().zip(&clustering.order_of).enumerate() {
        by_key.insert((g.as_str(), *o), c);
    }
    let edges: Vec<(usize, usize, f64)> = by_key
        .iter()
        .filter_map(|(&(g, o), &c)| by_key.get(&(g, o + 1)).map(|&next| (c, next, 1.0)))
        .collect();
    SessionGraph::from_edges(clustering.labels.clone(), unit, edges)
}

/// Closeness Type 2: Jaccard overlap of attendee sets within a rolling group.
pub fn build_type2_weights(dataset: &Dataset, unit: ClusterUnit) -> Result<SessionGraph> {
    let clustering = Clustering::new(dataset, unit)?;
    let attendees = clustering.attendees(dataset);
    if let Some(c) = attendees.iter().position(|a| a.is_empty()) {
        return Err(Error::Validation(format!(
            "unit {} has no attendees",
            clustering.labels[c]
        )));
    }
    let mut edges = Vec::new();
    for s in 0..clustering.len() {
        for j in (s + 1)..clustering.len() {
            if clustering.group_of[s] != clustering.group_of[j] {
                continue;
            }
            let w = jaccard(&attendees[s], &attendees[j]);
            if w > 0.0 {
                edges.push((s, j, w));
            }
        }
    }
    SessionGraph::from_edges(clustering.labels.clone(), unit, edges)
}

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    if inter == 0 {
        return 0.0;
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Full conditional of u_s given the other structured effects: mean is the
/// weighted neighbor average, variance is δ / w_s+. Returns `None` for an
/// isolated node (w_s+ = 0), which has no proper conditional.
pub fn car_conditional(s: usize, u: &[f64], graph: &SessionGraph, delta: f64) -> Option<(f64, f64)> {
    let total = graph.row_sum(s);
    if total == 0.0 {
        return None;
    }
    let weighted: f64 = graph.neighbors(s).iter().map(|&(j, w)| w * u[j]).sum();
    Some((weighted / total, delta / total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    fn rec(client: &str, session: &str, group: &str, order: u32) -> Record {
        Record {
            client_id: client.into(),
            session_id: session.into(),
            group_id: group.into(),
            session_order: order,
            module_index: Some((order - 1) / 4 + 1),
            time_weeks: 0.0,
            y: Some(0.0),
            covariates: vec![],
        }
    }

    #[test]
    fn type1_path_of_three() {
        let rows = (1..=3).map(|o| rec("a", &format!("s{o}"), "g", o)).collect();
        let ds = Dataset::from_records(rows, vec![]).unwrap();
        let g = build_type1_weights(&ds, ClusterUnit::Session).unwrap();
        assert_eq!(g.weight(0, 1), 1.0);
        assert_eq!(g.weight(1, 2), 1.0);
        assert_eq!(g.weight(0, 2), 0.0);
        assert_eq!(g.n_islands(), 1);
    }

    #[test]
    fn single_session_group_is_its_own_island() {
        let rows = vec![rec("a", "s1", "g1", 1), rec("b", "t1", "g2", 1), rec("b", "t2", "g2", 2)];
        let ds = Dataset::from_records(rows, vec![]).unwrap();
        let g = build_type1_weights(&ds, ClusterUnit::Session).unwrap();
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.n_islands(), 2);
        assert!(g.is_isolated(0));
    }

    #[test]
    fn module_unit_requires_module_index() {
        let mut r = rec("a", "s1", "g", 1);
        r.module_index = None;
        let ds = Dataset::from_records(vec![r], vec![]).unwrap();
        assert!(matches!(
            build_type1_weights(&ds, ClusterUnit::Module),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn module_unit_aggregates_sessions() {
        // Sessions 1..=8 form modules 1 and 2.
        let mut rows: Vec<Record> = (1..=8).map(|o| rec("a", &format!("s{o}"), "g", o)).collect();
        rows.push(rec("b", "s5", "g", 5));
        let ds = Dataset::from_records(rows, vec![]).unwrap();
        let g1 = build_type1_weights(&ds, ClusterUnit::Module).unwrap();
        assert_eq!(g1.size(), 2);
        assert_eq!(g1.weight(0, 1), 1.0);
        let g2 = build_type2_weights(&ds, ClusterUnit::Module).unwrap();
        // {a} vs {a, b}
        assert_eq!(g2.weight(0, 1), 0.5);
    }

    #[test]
    fn type2_jaccard_examples() {
        let mut rows = Vec::new();
        for c in ["A", "B", "C"] {
            rows.push(rec(c, "s1", "g", 1));
        }
        for c in ["B", "C", "D"] {
            rows.push(rec(c, "s2", "g", 2));
        }
        for c in ["B", "C", "D"] {
            rows.push(rec(c, "s3", "g", 3));
        }
        rows.push(rec("E", "s4", "g", 4));
        let ds = Dataset::from_records(rows, vec![]).unwrap();
        let g = build_type2_weights(&ds, ClusterUnit::Session).unwrap();
        assert_eq!(g.weight(0, 1), 0.5);
        assert_eq!(g.weight(1, 2), 1.0);
        assert_eq!(g.weight(0, 3), 0.0);
        assert_eq!(g.n_islands(), 2);
        assert!(g.is_isolated(3));
    }

    #[test]
    fn type2_zero_across_groups() {
        // Same client id in two groups must not connect them.
        let rows = vec![rec("a", "s1", "g1", 1), rec("a", "t1", "g2", 1)];
        let ds = Dataset::from_records(rows, vec![]).unwrap();
        let g = build_type2_weights(&ds, ClusterUnit::Session).unwrap();
        assert_eq!(g.n_edges(), 0);
        assert_eq!(g.n_islands(), 2);
    }

    #[test]
    fn all_zero_weights_give_singletons() {
        let g = SessionGraph::from_edges(labels(5), ClusterUnit::Session, vec![(0, 1, 0.0)]).unwrap();
        assert_eq!(g.n_islands(), 5);
        assert_eq!(detect_islands(&g).len(), 5);
    }

    #[test]
    fn car_conditional_examples() {
        let g = SessionGraph::from_edges(
            labels(3),
            ClusterUnit::Session,
            vec![(0, 1, 1.0), (0, 2, 1.0)],
        )
        .unwrap();
        let (m, v) = car_conditional(0, &[0.0, 2.0, 4.0], &g, 1.0).unwrap();
        assert_eq!((m, v), (3.0, 0.5));

        let g = SessionGraph::from_edges(labels(2), ClusterUnit::Session, vec![(0, 1, 0.5)]).unwrap();
        let (m, v) = car_conditional(0, &[0.0, 4.0], &g, 2.0).unwrap();
        assert_eq!((m, v), (4.0, 4.0));

        let g = SessionGraph::from_edges(labels(2), ClusterUnit::Session, vec![]).unwrap();
        assert!(car_conditional(0, &[0.0, 4.0], &g, 2.0).is_none());
    }

    #[test]
    fn invalid_edges_rejected() {
        assert!(SessionGraph::from_edges(labels(2), ClusterUnit::Session, vec![(0, 0, 1.0)]).is_err());
        assert!(SessionGraph::from_edges(labels(2), ClusterUnit::Session, vec![(0, 1, -1.0)]).is_err());
        assert!(
            SessionGraph::from_edges(labels(2), ClusterUnit::Session, vec![(0, 1, 1.0), (1, 0, 1.0)])
                .is_err()
        );
    }

    #[test]
    fn triplet_export_lists_both_directions() {
        let g = SessionGraph::from_edges(labels(2), ClusterUnit::Session, vec![(0, 1, 0.25)]).unwrap();
        let mut buf = Vec::new();
        g.write_triplets(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "s,j,w\nn0,n1,0.25\nn1,n0,0.25\n");
    }
}
