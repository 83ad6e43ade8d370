//! Index ontology: major headings and supplementary concepts in a DAG.
//!
//! Hierarchy edges connect major nodes child-to-parent; mapping edges attach
//! supplementary concepts to major headings. For ancestor computations the
//! two edge kinds are treated alike.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Major,
    Supplementary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Hierarchy,
    Mapping,
}

#[derive(Debug, Clone)]
pub struct OntologyNode {
    pub kind: NodeKind,
    pub name: String,
}

#[derive(Debug, Clone)]
pub struct MeshOntology {
    nodes: BTreeMap<String, OntologyNode>,
    edges: Vec<(String, String, EdgeKind)>,
    /// child id -> parent ids, both edge kinds, parents sorted.
    parents: BTreeMap<String, Vec<String>>,
}

impl MeshOntology {
    pub fn new(
        nodes: BTreeMap<String, OntologyNode>,
        edges: Vec<(String, String, EdgeKind)>,
    ) -> Result<Self> {
        let mut parents: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (child, parent, kind) in &edges {
            let child_kind = nodes
                .get(child)
                .ok_or_else(|| Error::InvalidEdge {
                    child: child.clone(),
                    parent: parent.clone(),
                    msg: format!("undeclared node {child:?}"),
                })?
                .kind;
            let parent_kind = nodes
                .get(parent)
                .ok_or_else(|| Error::InvalidEdge {
                    child: child.clone(),
                    parent: parent.clone(),
                    msg: format!("undeclared node {parent:?}"),
                })?
                .kind;
            match kind {
                EdgeKind::Hierarchy => {
                    if child_kind != NodeKind::Major || parent_kind != NodeKind::Major {
                        return Err(Error::InvalidEdge {
                            child: child.clone(),
                            parent: parent.clone(),
                            msg: "hierarchy edges must connect major to major".into(),
                        });
                    }
                }
                EdgeKind::Mapping => {
                    if child_kind != NodeKind::Supplementary || parent_kind != NodeKind::Major {
                        return Err(Error::InvalidEdge {
                            child: child.clone(),
                            parent: parent.clone(),
                            msg: "mapping edges must connect supplementary to major".into(),
                        });
                    }
                }
            }
            parents.entry(child.clone()).or_default().push(parent.clone());
        }
        for ps in parents.values_mut() {
            ps.sort();
            ps.dedup();
        }
        let onto = Self {
            nodes,
            edges,
            parents,
        };
        if let Some(cycle) = onto.find_cycle() {
            return Err(Error::OntologyCycle(cycle.join(" -> ")));
        }
        Ok(onto)
    }

    /// Load from the edge-list format: a `#nodes` section of
    /// `id<TAB>kind<TAB>name` lines followed by a `#edges` section of
    /// `child<TAB>parent<TAB>kind` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut nodes = BTreeMap::new();
        let mut edges = Vec::new();
        let mut section = None;
        let parse_err = |lineno: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg,
        };
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            match line {
                "#nodes" => {
                    section = Some("nodes");
                    continue;
                }
                "#edges" => {
                    section = Some("edges");
                    continue;
                }
                _ => {}
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match section {
                Some("nodes") => {
                    if fields.len() != 3 {
                        return Err(parse_err(lineno, "expected id<TAB>kind<TAB>name".into()));
                    }
                    let kind = match fields[1] {
                        "major" => NodeKind::Major,
                        "supplementary" => NodeKind::Supplementary,
                        other => return Err(parse_err(lineno, format!("unknown kind {other:?}"))),
                    };
                    if nodes
                        .insert(
                            fields[0].to_string(),
                            OntologyNode {
                                kind,
                                name: fields[2].to_string(),
                            },
                        )
                        .is_some()
                    {
                        return Err(parse_err(lineno, format!("duplicate node {:?}", fields[0])));
                    }
                }
                Some("edges") => {
                    if fields.len() != 3 {
                        return Err(parse_err(lineno, "expected child<TAB>parent<TAB>kind".into()));
                    }
                    let kind = match fields[2] {
                        "hierarchy" => EdgeKind::Hierarchy,
                        "mapping" => EdgeKind::Mapping,
                        other => {
                            return Err(parse_err(lineno, format!("unknown edge kind {other:?}")))
                        }
                    };
                    edges.push((fields[0].to_string(), fields[1].to_string(), kind));
                }
                _ => return Err(parse_err(lineno, "content before #nodes header".into())),
            }
        }
        Self::new(nodes, edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("#nodes\n");
        for (id, node) in &self.nodes {
            let kind = match node.kind {
                NodeKind::Major => "major",
                NodeKind::Supplementary => "supplementary",
            };
            out.push_str(&format!("{id}\t{kind}\t{}\n", node.name));
        }
        out.push_str("#edges\n");
        for (child, parent, kind) in &self.edges {
            let kind = match kind {
                EdgeKind::Hierarchy => "hierarchy",
                EdgeKind::Mapping => "mapping",
            };
            out.push_str(&format!("{child}\t{parent}\t{kind}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn kind(&self, id: &str) -> Option<NodeKind> {
        self.nodes.get(id).map(|n| n.kind)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn major_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.kind == NodeKind::Major)
            .map(|(id, _)| id.as_str())
    }

    pub fn supplementary_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.kind == NodeKind::Supplementary)
            .map(|(id, _)| id.as_str())
    }

    pub fn parents(&self, id: &str) -> &[String] {
        self.parents.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Nodes with no outgoing parent edge.
    pub fn roots(&self) -> Vec<&str> {
        self.nodes
            .keys()
            .filter(|id| self.parents(id).is_empty())
            .map(String::as_str)
            .collect()
    }

    /// Upward BFS distances from `id` to each of its ancestors (a node is
    /// its own ancestor at distance 0).
    pub fn ancestor_distances(&self, id: &str) -> BTreeMap<String, usize> {
        let mut dist = BTreeMap::new();
        if !self.contains(id) {
            return dist;
        }
        let mut frontier = vec![id.to_string()];
        dist.insert(id.to_string(), 0);
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for node in frontier {
                let d = dist[&node];
                for parent in self.parents(&node) {
                    if !dist.contains_key(parent) {
                        dist.insert(parent.clone(), d + 1);
                        next.push(parent.clone());
                    }
                }
            }
            frontier = next;
        }
        dist
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        // Iterative DFS over parent edges; a back edge closes a cycle.
        let mut state: BTreeMap<&str, u8> = BTreeMap::new(); // 1 on stack, 2 done
        for start in self.nodes.keys() {
            if state.contains_key(start.as_str()) {
                continue;
            }
            let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
            let mut path: Vec<&str> = Vec::new();
            while let Some((node, child_idx)) = stack.pop() {
                if child_idx == 0 {
                    state.insert(node, 1);
                    path.push(node);
                }
                let parents = self.parents(node);
                if child_idx < parents.len() {
                    stack.push((node, child_idx + 1));
                    let parent = parents[child_idx].as_str();
                    match state.get(parent) {
                        Some(1) => {
                            let from = path.iter().position(|&n| n == parent).unwrap_or(0);
                            let mut cycle: Vec<String> =
                                path[from..].iter().map(|s| s.to_string()).collect();
                            cycle.push(parent.to_string());
                            return Some(cycle);
                        }
                        Some(_) => {}
                        None => stack.push((parent, 0)),
                    }
                } else {
                    state.insert(node, 2);
                    path.pop();
                }
            }
        }
        None
    }

    /// Topological order over all nodes, parents before children.
    /// Always succeeds on a validated ontology.
    pub fn topological_order(&self) -> Option<Vec<String>> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut done: BTreeSet<&str> = BTreeSet::new();
        let mut pending = self.nodes.keys().map(String::as_str).collect::<Vec<_>>();
        let mut guard = 0usize;
        while !pending.is_empty() {
            guard += 1;
            if guard > self.nodes.len() + 1 {
                return None;
            }
            pending.retain(|id| {
                if self.parents(id).iter().all(|p| done.contains(p.as_str())) {
                    order.push(id.to_string());
                    done.insert(id);
                    false
                } else {
                    true
                }
            });
        }
        Some(order)
    }
}
