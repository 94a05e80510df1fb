//! Knowledge-graph triples and the item-only co-entity graph.
//!
//! Two items are linked when the sets of non-text entities attached to them
//! share strictly more than `threshold` members. Pair counts come from an
//! inverted index (entity to items), so the cost scales with co-occurrences
//! rather than with all item pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::Serialize;

use crate::data::MAX_MALFORMED_FRACTION;
use crate::error::{Error, Result};

/// Relation name that marks an item-to-text edge even without the flag column.
pub const TEXT_RELATION: &str = "has_text";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    /// The tail is a text entity and carries no shared structure.
    pub text: bool,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            text: relation == TEXT_RELATION,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedTriples {
    pub triples: Vec<Triple>,
    pub malformed: usize,
    pub malformed_lines: Vec<usize>,
    pub duplicates: usize,
}

pub fn parse_triples(path: &Path) -> Result<ParsedTriples> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples_str(&text, path)
}

/// Tab-separated `head relation tail [flag]` lines, where a flag of `text`,
/// `1` or `true` marks the tail as a text entity.
pub fn parse_triples_str(text: &str, origin: &Path) -> Result<ParsedTriples> {
    let mut out = ParsedTriples::default();
    let mut seen = std::collections::HashSet::new();
    let mut considered = 0;
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        considered += 1;
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let flag = match cols.get(3).copied() {
            None => Some(false),
            Some("text" | "1" | "true") => Some(true),
            Some("" | "0" | "false") => Some(false),
            Some(_) => None,
        };
        let ok = (3..=4).contains(&cols.len()) && cols[..3].iter().all(|c| !c.is_empty());
        match flag.filter(|_| ok) {
            Some(flag) => {
                let mut t = Triple::new(cols[0], cols[1], cols[2]);
                t.text |= flag;
                if seen.insert(t.clone()) {
                    out.triples.push(t);
                } else {
                    out.duplicates += 1;
                }
            }
            None => {
                out.malformed += 1;
                out.malformed_lines.push(no + 1);
            }
        }
    }
    if considered > 0 && out.malformed as f64 > MAX_MALFORMED_FRACTION * considered as f64 {
        return Err(Error::Ingestion {
            path: origin.to_path_buf(),
            malformed: out.malformed,
            total: considered,
            lines: out.malformed_lines.iter().take(20).copied().collect(),
        });
    }
    if out.duplicates > 0 {
        warn!(
            "{}: dropped {} duplicate triples",
            origin.display(),
            out.duplicates
        );
    }
    Ok(out)
}

/// Undirected, unweighted graph over items.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemGraph {
    items: Vec<String>,
    /// Sorted `(i, j)` pairs with `i < j`.
    edges: Vec<(usize, usize)>,
    /// Shared-entity count of each edge.
    shared: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    threshold: usize,
}

impl ItemGraph {
    /// A graph from an explicit edge list; pairs are canonicalised and
    /// deduplicated, self-loops rejected.
    pub fn from_edges(
        items: Vec<String>,
        edges: &[(usize, usize)],
        threshold: usize,
    ) -> Result<Self> {
        let n = items.len();
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Usage(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            if a == b {
                return Err(Error::Usage(format!("self-loop on node {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let shared = vec![0; edges.len()];
        Ok(Self::assemble(items, edges, shared, threshold))
    }

    fn assemble(
        items: Vec<String>,
        edges: Vec<(usize, usize)>,
        shared: Vec<usize>,
        threshold: usize,
    ) -> Self {
        let mut neighbors = vec![Vec::new(); items.len()];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        ItemGraph {
            items,
            edges,
            shared,
            neighbors,
            threshold,
        }
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn node_count(&self) -> usize {
        self.items.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn shared_counts(&self) -> &[usize] {
        &self.shared
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// Sorted neighbours of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    /// Neighbour lists used by attention: an isolated node attends to itself.
    pub fn attention_lists(&self) -> Vec<Vec<usize>> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(i, n)| if n.is_empty() { vec![i] } else { n.clone() })
            .collect()
    }

    /// The subgraph induced by the nodes for which `keep` holds, in their
    /// original relative order.
    pub fn induced(&self, keep: impl Fn(usize) -> bool) -> ItemGraph {
        let mut map = vec![usize::MAX; self.items.len()];
        let mut items = Vec::new();
        for i in 0..self.items.len() {
            if keep(i) {
                map[i] = items.len();
                items.push(self.items[i].clone());
            }
        }
        let mut edges = Vec::new();
        let mut shared = Vec::new();
        for (&(a, b), &s) in self.edges.iter().zip(&self.shared) {
            if map[a] != usize::MAX && map[b] != usize::MAX {
                edges.push((map[a], map[b]));
                shared.push(s);
            }
        }
        Self::assemble(items, edges, shared, self.threshold)
    }

    /// Comment lines `#node<TAB>index<TAB>id` and `#threshold<TAB>S`, then one
    /// `i<TAB>j` line per edge with `i < j`.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "#threshold\t{}", self.threshold).map_err(io)?;
        for (i, id) in self.items.iter().enumerate() {
            writeln!(w, "#node\t{i}\t{id}").map_err(io)?;
        }
        for &(a, b) in &self.edges {
            writeln!(w, "{a}\t{b}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_edge_list(path: &Path) -> Result<ItemGraph> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut items = Vec::new();
        let mut edges = Vec::new();
        let mut threshold = 0;
        for (no, line) in text.lines().enumerate() {
            let bad = || {
                Error::format(
                    "edge list",
                    format!("{}:{}: {line}", path.display(), no + 1),
                )
            };
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                [] | [""] => {}
                ["#threshold", s] => threshold = s.parse().map_err(|_| bad())?,
                ["#node", i, id] => {
                    if i.parse::<usize>().ok() != Some(items.len()) {
                        return Err(bad());
                    }
                    items.push(id.to_string());
                }
                [a, b] if !a.starts_with('#') => {
                    edges.push((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?));
                }
                _ if line.starts_with('#') => {}
                _ => return Err(bad()),
            }
        }
        ItemGraph::from_edges(items, &edges, threshold)
    }

    /// Node rows of an `M × M` 0/1 adjacency matrix.
    pub fn adjacency_rows(&self) -> Vec<Vec<f64>> {
        let n = self.items.len();
        self.neighbors
            .iter()
            .map(|nb| {
                let mut row = vec![0.0; n];
                for &j in nb {
                    row[j] = 1.0;
                }
                row
            })
            .collect()
    }
}

/// Non-text entities attached to each item, in either direction.
pub fn neighbor_entities(triples: &[Triple], item_ids: &[String]) -> Vec<BTreeSet<String>> {
    let index: HashMap<&str, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut sets = vec![BTreeSet::new(); item_ids.len()];
    for t in triples.iter().filter(|t| !t.text) {
        if let Some(&i) = index.get(t.head.as_str()) {
            sets[i].insert(t.tail.clone());
        }
        if let Some(&i) = index.get(t.tail.as_str()) {
            sets[i].insert(t.head.clone());
        }
    }
    sets
}

/// Links items whose non-text entity sets share more than `threshold`
/// members.
pub fn build_item_graph(triples: &[Triple], item_ids: &[String], threshold: usize) -> ItemGraph {
    let sets = neighbor_entities(triples, item_ids);
    let mut inverted: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, set) in sets.iter().enumerate() {
        for e in set {
            inverted.entry(e.as_str()).or_default().push(i);
        }
    }
    let entity_lists: Vec<Vec<usize>> = inverted.into_values().collect();
    let mut item_entities: Vec<Vec<usize>> = vec![Vec::new(); item_ids.len()];
    for (e, items) in entity_lists.iter().enumerate() {
        for &i in items {
            item_entities[i].push(e);
        }
    }

    let mut counts = vec![0usize; item_ids.len()];
    let mut touched = Vec::new();
    let mut edges = Vec::new();
    let mut shared = Vec::new();
    for i in 0..item_ids.len() {
        for &e in &item_entities[i] {
            // entity lists are ascending, so only the tail after i matters
            let list = &entity_lists[e];
            let start = list.partition_point(|&j| j <= i);
            for &j in &list[start..] {
                if counts[j] == 0 {
                    touched.push(j);
                }
                counts[j] += 1;
            }
        }
        touched.sort_unstable();
        for &j in &touched {
            if counts[j] > threshold {
                edges.push((i, j));
                shared.push(counts[j]);
            }
            counts[j] = 0;
        }
        touched.clear();
    }
    let missing: Vec<&String> = item_ids
        .iter()
        .zip(&sets)
        .filter(|(_, s)| s.is_empty())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        warn!(
            "{} items have no knowledge-graph entity and stay isolated (first: {})",
            missing.len(),
            missing[0]
        );
    }
    ItemGraph::assemble(item_ids.to_vec(), edges, shared, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub threshold: usize,
    /// Degree to number of nodes with that degree.
    pub degree_histogram: BTreeMap<usize, usize>,
    pub isolated: Vec<String>,
}

pub fn graph_stats(graph: &ItemGraph) -> GraphStats {
    let mut degree_histogram = BTreeMap::new();
    let mut isolated = Vec::new();
    for i in 0..graph.node_count() {
        let d = graph.neighbors(i).len();
        *degree_histogram.entry(d).or_insert(0) += 1;
        if d == 0 {
            isolated.push(graph.items()[i].clone());
        }
    }
    GraphStats {
        nodes: graph.node_count(),
        edges: graph.edges().len(),
        threshold: graph.threshold(),
        degree_histogram,
        isolated,
    }
}

impl GraphStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph stats serialise")
    }
}
