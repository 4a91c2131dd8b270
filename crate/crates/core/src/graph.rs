//! Graphs, random generation, components, aggregation operators, Laplacians.
//!
//! Orientation convention: an edge (src, dst, w) contributes the adjacency
//! entry A[dst, src] = w, so row i of an aggregation matrix mixes the states
//! of i's in-neighbors. Undirected graphs store each edge once and expand to
//! the symmetric pair on demand.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    edges: Vec<Edge>,
    directed: bool,
}

/// One position in the aggregation sparsity pattern: row = receiving node,
/// col = sending node. Undirected edges produce two entries, (dst, src)
/// first, in edge order; directed edges produce one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectedEntry {
    pub row: usize,
    pub col: usize,
    pub edge_index: usize,
}

impl Graph {
    pub fn new(n: usize, edges: Vec<Edge>, directed: bool) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &edges {
            for &ix in &[e.src, e.dst] {
                if ix >= n {
                    return Err(Error::InvalidIndex { index: ix, nodes: n });
                }
            }
            if e.src == e.dst {
                return Err(Error::InvalidEdge { src: e.src, dst: e.dst, reason: "self-loop" });
            }
            let key = if directed || e.src <= e.dst { (e.src, e.dst) } else { (e.dst, e.src) };
            if !seen.insert(key) {
                return Err(Error::InvalidEdge { src: e.src, dst: e.dst, reason: "duplicate" });
            }
        }
        Ok(Self { n, edges, directed })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// Sparsity pattern of the aggregation matrix, in canonical order. This
    /// order defines the layout of per-entry parameter vectors (logits, raw
    /// weights) everywhere in the crate.
    pub fn directed_entries(&self) -> Vec<DirectedEntry> {
        let mut out = Vec::with_capacity(if self.directed {
            self.edges.len()
        } else {
            2 * self.edges.len()
        });
        for (edge_index, e) in self.edges.iter().enumerate() {
            out.push(DirectedEntry { row: e.dst, col: e.src, edge_index });
            if !self.directed {
                out.push(DirectedEntry { row: e.src, col: e.dst, edge_index });
            }
        }
        out
    }

    pub fn adjacency(&self) -> DenseMatrix {
        let mut a = DenseMatrix::zeros(self.n, self.n);
        for e in &self.edges {
            a[(e.dst, e.src)] = e.weight;
            if !self.directed {
                a[(e.src, e.dst)] = e.weight;
            }
        }
        a
    }

    /// Weighted in-degrees: row sums of the adjacency matrix.
    pub fn in_degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for e in &self.edges {
            d[e.dst] += e.weight;
            if !self.directed {
                d[e.src] += e.weight;
            }
        }
        d
    }

    /// Number of in-neighbors per node (sparsity row counts).
    pub fn in_neighbor_counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; self.n];
        for entry in self.directed_entries() {
            c[entry.row] += 1;
        }
        c
    }

    /// Connectivity of the underlying undirected graph (weak connectivity
    /// for directed graphs). The empty graph counts as connected.
    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let adj = self.undirected_neighbors();
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.n
    }

    /// Two-colorability of the underlying undirected graph.
    pub fn is_bipartite(&self) -> bool {
        let adj = self.undirected_neighbors();
        let mut color = vec![-1i8; self.n];
        for start in 0..self.n {
            if color[start] != -1 {
                continue;
            }
            color[start] = 0;
            let mut stack = vec![start];
            while let Some(u) = stack.pop() {
                for &v in &adj[u] {
                    if color[v] == -1 {
                        color[v] = 1 - color[u];
                        stack.push(v);
                    } else if color[v] == color[u] {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn undirected_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for e in &self.edges {
            adj[e.src].push(e.dst);
            adj[e.dst].push(e.src);
        }
        adj
    }

    /// Each unordered pair {i, j} becomes an edge independently with
    /// probability p; pair order (i ascending, then j) fixes the stream.
    pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Graph {
        assert!((0.0..=1.0).contains(&p), "edge probability must lie in [0, 1]");
        let mut rng = Rng::new(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.uniform() < p {
                    edges.push(Edge { src: i, dst: j, weight: 1.0 });
                }
            }
        }
        Graph::new(n, edges, false).expect("generated pairs are valid")
    }

    /// Original node indices (ascending) of the largest strongly connected
    /// component; undirected graphs use connected components. Size ties go
    /// to the component whose sorted index set is lexicographically least.
    pub fn largest_scc_nodes(&self) -> Vec<usize> {
        let mut components = if self.directed {
            tarjan_components(self.n, &self.edges)
        } else {
            undirected_components(self.n, &self.edges)
        };
        for c in &mut components {
            c.sort_unstable();
        }
        components
            .into_iter()
            .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.cmp(a)))
            .unwrap_or_default()
    }

    /// Induced subgraph on `largest_scc_nodes`, indices remapped densely in
    /// ascending original order; edge order and weights preserved.
    pub fn largest_scc(&self) -> Graph {
        let nodes = self.largest_scc_nodes();
        let mut remap = vec![usize::MAX; self.n];
        for (new, &old) in nodes.iter().enumerate() {
            remap[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| remap[e.src] != usize::MAX && remap[e.dst] != usize::MAX)
            .map(|e| Edge { src: remap[e.src], dst: remap[e.dst], weight: e.weight })
            .collect();
        Graph::new(nodes.len(), edges, self.directed).expect("induced subgraph is valid")
    }

    /// Edge-list format: header `n m [directed|undirected]`, then m lines
    /// `src dst [weight]` (default weight 1.0); '#' starts a comment.
    pub fn load_edge_list(r: &mut impl BufRead) -> Result<Graph> {
        let mut lines = r.lines().enumerate();
        let (n, m, directed) = loop {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| parse_err(0, "missing header line"))?;
            let line = line?;
            let body = strip_comment(&line);
            if body.is_empty() {
                continue;
            }
            let mut parts = body.split_whitespace();
            let n: usize = parse_tok(parts.next(), idx + 1, "node count")?;
            let m: usize = parse_tok(parts.next(), idx + 1, "edge count")?;
            let directed = match parts.next() {
                None => false,
                Some("undirected") => false,
                Some("directed") => true,
                Some(other) => {
                    return Err(parse_err(idx + 1, &format!("bad direction flag '{other}'")))
                }
            };
            if parts.next().is_some() {
                return Err(parse_err(idx + 1, "header has trailing fields"));
            }
            break (n, m, directed);
        };
        let mut edges = Vec::with_capacity(m);
        for (idx, line) in &mut lines {
            let line = line?;
            let body = strip_comment(&line);
            if body.is_empty() {
                continue;
            }
            if edges.len() == m {
                return Err(parse_err(idx + 1, "more edges than the header declares"));
            }
            let mut parts = body.split_whitespace();
            let src: usize = parse_tok(parts.next(), idx + 1, "src")?;
            let dst: usize = parse_tok(parts.next(), idx + 1, "dst")?;
            let weight: f64 = match parts.next() {
                None => 1.0,
                Some(tok) => tok
                    .parse()
                    .map_err(|_| parse_err(idx + 1, &format!("bad weight '{tok}'")))?,
            };
            if parts.next().is_some() {
                return Err(parse_err(idx + 1, "edge line has trailing fields"));
            }
            edges.push(Edge { src, dst, weight });
        }
        if edges.len() != m {
            return Err(parse_err(0, &format!("expected {m} edges, got {}", edges.len())));
        }
        Graph::new(n, edges, directed)
    }

    pub fn from_edge_list_str(s: &str) -> Result<Graph> {
        Self::load_edge_list(&mut s.as_bytes())
    }

    pub fn save_edge_list(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "{} {} {}",
            self.n,
            self.edges.len(),
            if self.directed { "directed" } else { "undirected" }
        )?;
        for e in &self.edges {
            writeln!(w, "{} {} {}", e.src, e.dst, e.weight)?;
        }
        Ok(())
    }

    pub fn to_edge_list_string(&self) -> String {
        let mut buf = Vec::new();
        self.save_edge_list(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("edge list is ascii")
    }
}

#[derive(Debug, Clone)]
pub enum AggregationKind {
    /// D^{-1/2} A D^{-1/2}; undirected graphs without isolated nodes only.
    SymNormalized,
    /// Row-softmax of per-entry logits with an optional minimum-weight floor
    /// (clamp then renormalize, iterated so the floor holds exactly).
    RowStochastic { logits: Vec<f64>, min_weight: f64 },
    /// Per-entry weights placed verbatim on the sparsity pattern.
    RawWeights(Vec<f64>),
}

pub fn aggregation_matrix(g: &Graph, kind: &AggregationKind) -> Result<DenseMatrix> {
    match kind {
        AggregationKind::SymNormalized => sym_normalized(g),
        AggregationKind::RowStochastic { logits, min_weight } => {
            row_stochastic(g, logits, *min_weight)
        }
        AggregationKind::RawWeights(weights) => raw_weights(g, weights),
    }
}

fn sym_normalized(g: &Graph) -> Result<DenseMatrix> {
    if g.is_directed() {
        return Err(Error::NotSymmetric { asymmetry: f64::NAN, tolerance: 0.0 });
    }
    let a = g.adjacency();
    let degrees = g.in_degrees();
    let mut inv_sqrt = vec![0.0; g.node_count()];
    for (i, &d) in degrees.iter().enumerate() {
        if d <= 0.0 {
            return Err(Error::IsolatedNode(i));
        }
        inv_sqrt[i] = 1.0 / d.sqrt();
    }
    let n = g.node_count();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if a[(i, j)] != 0.0 {
                // Single product of a precombined factor keeps the result
                // bitwise symmetric.
                out[(i, j)] = a[(i, j)] * (inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    Ok(out)
}

fn row_stochastic(g: &Graph, logits: &[f64], min_weight: f64) -> Result<DenseMatrix> {
    assert!(min_weight >= 0.0, "minimum weight must be non-negative");
    let entries = g.directed_entries();
    if logits.len() != entries.len() {
        return Err(Error::DimensionMismatch(format!(
            "expected {} logits (one per directed entry), got {}",
            entries.len(),
            logits.len()
        )));
    }
    let n = g.node_count();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (k, entry) in entries.iter().enumerate() {
        rows[entry.row].push((entry.col, logits[k]));
    }
    let mut out = DenseMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::IsolatedNode(i));
        }
        let mut weights = softmax(row.iter().map(|&(_, l)| l));
        if min_weight > 0.0 {
            apply_floor(&mut weights, min_weight, i, row.len())?;
        }
        for (&(col, _), &w) in row.iter().zip(&weights) {
            out[(i, col)] = w;
        }
    }
    Ok(out)
}

fn softmax(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Clamp entries below the floor and renormalize the rest, repeating until
/// no entry sits under the floor. A single clamp-renormalize pass can push
/// borderline entries back below the floor, so iterate; floored entries only
/// accumulate, which bounds the loop by the row length.
fn apply_floor(weights: &mut [f64], floor: f64, row: usize, entries: usize) -> Result<()> {
    if entries as f64 * floor >= 1.0 {
        return Err(Error::FloorInfeasible { row, entries, floor });
    }
    loop {
        let mut floored_mass = 0.0;
        let mut free_mass = 0.0;
        let mut any_below = false;
        for &w in weights.iter() {
            if w <= floor {
                floored_mass += floor;
            } else {
                free_mass += w;
            }
        }
        let scale = (1.0 - floored_mass) / free_mass;
        for w in weights.iter_mut() {
            if *w <= floor {
                *w = floor;
            } else {
                *w *= scale;
                if *w < floor {
                    any_below = true;
                }
            }
        }
        if !any_below {
            return Ok(());
        }
    }
}

fn raw_weights(g: &Graph, weights: &[f64]) -> Result<DenseMatrix> {
    let entries = g.directed_entries();
    if weights.len() != entries.len() {
        return Err(Error::DimensionMismatch(format!(
            "expected {} weights (one per directed entry), got {}",
            entries.len(),
            weights.len()
        )));
    }
    let n = g.node_count();
    let mut out = DenseMatrix::zeros(n, n);
    for (k, entry) in entries.iter().enumerate() {
        out[(entry.row, entry.col)] = weights[k];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaplacianKind {
    SymNormalized,
    RandomWalk,
}

pub fn laplacian(g: &Graph, kind: LaplacianKind) -> Result<DenseMatrix> {
    let n = g.node_count();
    match kind {
        LaplacianKind::SymNormalized => {
            let agg = sym_normalized(g)?;
            let mut out = agg.scaled(-1.0);
            for i in 0..n {
                out[(i, i)] += 1.0;
            }
            Ok(out)
        }
        LaplacianKind::RandomWalk => {
            let a = g.adjacency();
            let degrees = g.in_degrees();
            let mut out = DenseMatrix::zeros(n, n);
            for i in 0..n {
                if degrees[i] <= 0.0 {
                    return Err(Error::IsolatedNode(i));
                }
                for j in 0..n {
                    out[(i, j)] = -a[(i, j)] / degrees[i];
                }
                out[(i, i)] += 1.0;
            }
            Ok(out)
        }
    }
}

fn undirected_components(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.src].push(e.dst);
        adj[e.dst].push(e.src);
    }
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                    stack.push(v);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Tarjan's strongly connected components, iterative to keep stack use flat.
fn tarjan_components(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.src].push(e.dst);
    }
    const UNSET: usize = usize::MAX;
    let mut index = vec![UNSET; n];
    let mut lowlink = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut next_index = 0usize;
    let mut components = Vec::new();

    for root in 0..n {
        if index[root] != UNSET {
            continue;
        }
        // Explicit DFS frames: (node, next child position).
        let mut frames: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next_index;
        lowlink[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(frame) = frames.last_mut() {
            let v = frame.0;
            if frame.1 < adj[v].len() {
                let w = adj[v][frame.1];
                frame.1 += 1;
                if index[w] == UNSET {
                    index[w] = next_index;
                    lowlink[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    frames.push((w, 0));
                } else if on_stack[w] {
                    lowlink[v] = lowlink[v].min(index[w]);
                }
            } else {
                frames.pop();
                if let Some(&(parent, _)) = frames.last() {
                    lowlink[parent] = lowlink[parent].min(lowlink[v]);
                }
                if lowlink[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack underflow");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    components.push(comp);
                }
            }
        }
    }
    components
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => line[..pos].trim(),
        None => line.trim(),
    }
}

fn parse_err(line: usize, message: &str) -> Error {
    Error::Parse { line, message: message.to_string() }
}

fn parse_tok<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| parse_err(line, &format!("missing {what}")))?;
    tok.parse().map_err(|_| parse_err(line, &format!("bad {what} '{tok}'")))
}
