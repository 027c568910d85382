//! Directed road networks and the discrete calculus on them.
//!
//! Sign conventions: for an edge `e = (i → j)` the gradient is
//! `(∇z)_e = z_i − z_j`, the divergence is net outflow
//! `(div q)_i = Σ_{e leaving i} q_e − Σ_{e entering i} q_e`, and the
//! Laplacian is their composition `Δ = div ∘ ∇ = B·Bᵀ`, which is positive
//! semidefinite. The two operators are adjoint: `⟨∇z, q⟩ = ⟨z, div q⟩`.
//!
//! All operators accept fields laid out as `[.., rows, channels]`; any
//! leading dimensions are treated as independent batch entries.

use std::io::{BufRead, Write};

use crate::diffengine::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// How edge weights enter the operators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Weighting {
    /// Weights are carried but ignored.
    #[default]
    Unweighted,
    /// Gradient rows are scaled by `√w_e`, so `Δ_w = B·diag(w)·Bᵀ`.
    Weighted,
}

/// A validated, connected directed graph with dense edge ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    node_count: usize,
    edges: Vec<Edge>,
    weighting: Weighting,
    edge_scale: Vec<f64>,
}

impl RoadNetwork {
    /// Builds a network, rejecting self-loops, bad indices, non-positive
    /// weights and graphs whose undirected skeleton is disconnected.
    pub fn new(node_count: usize, edges: Vec<Edge>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::Validation("node count must be positive".into()));
        }
        for (id, e) in edges.iter().enumerate() {
            if e.src >= node_count || e.dst >= node_count {
                return Err(Error::Validation(format!(
                    "edge {id} ({} -> {}) references a node outside 0..{node_count}",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(Error::Validation(format!("edge {id} is a self-loop at node {}", e.src)));
            }
            if !(e.weight.is_finite() && e.weight > 0.0) {
                return Err(Error::Validation(format!("edge {id} has non-positive weight {}", e.weight)));
            }
        }
        if let Some(node) = first_unreachable(node_count, &edges) {
            return Err(Error::Validation(format!("node {node} is disconnected from node 0")));
        }
        let edge_scale = vec![1.0; edges.len()];
        Ok(Self {
            node_count,
            edges,
            weighting: Weighting::Unweighted,
            edge_scale,
        })
    }

    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self.edge_scale = match weighting {
            Weighting::Unweighted => vec![1.0; self.edges.len()],
            Weighting::Weighted => self.edges.iter().map(|e| e.weight.sqrt()).collect(),
        };
        self
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Reads the text graph format: first line `n`, then `src dst weight`
    /// per edge. Blank lines and lines starting with `#` are skipped; a
    /// missing weight defaults to 1.
    pub fn load(reader: impl BufRead) -> Result<Self> {
        let mut node_count = None;
        let mut edges = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let text = line.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: lineno, msg };
            if node_count.is_none() {
                let n: usize = text
                    .parse()
                    .map_err(|_| parse_err(format!("expected node count, found `{text}`")))?;
                node_count = Some(n);
                continue;
            }
            let fields: Vec<&str> = text.split_whitespace().collect();
            if !(fields.len() == 2 || fields.len() == 3) {
                return Err(parse_err(format!("expected `src dst weight`, found `{text}`")));
            }
            let src = fields[0]
                .parse()
                .map_err(|_| parse_err(format!("bad source index `{}`", fields[0])))?;
            let dst = fields[1]
                .parse()
                .map_err(|_| parse_err(format!("bad destination index `{}`", fields[1])))?;
            let weight = match fields.get(2) {
                Some(w) => w.parse().map_err(|_| parse_err(format!("bad weight `{w}`")))?,
                None => 1.0,
            };
            edges.push(Edge { src, dst, weight });
        }
        let n = node_count.ok_or(Error::Parse {
            line: 1,
            msg: "empty graph file".into(),
        })?;
        Self::new(n, edges)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::load(text.as_bytes())
    }

    pub fn save(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", self.node_count)?;
        for e in &self.edges {
            writeln!(w, "{} {} {}", e.src, e.dst, e.weight)?;
        }
        Ok(())
    }

    /// Raw gradient kernel over `[batch.., n, d]` → `[batch.., |E|, d]`.
    pub(crate) fn gradient_raw(&self, z: &[f64], channels: usize, out: &mut [f64]) {
        let (n, m, d) = (self.node_count, self.edges.len(), channels);
        let batches = z.len() / (n * d);
        for b in 0..batches {
            let zb = &z[b * n * d..(b + 1) * n * d];
            let ob = &mut out[b * m * d..(b + 1) * m * d];
            if d == 1 {
                for ((o, edge), s) in ob.iter_mut().zip(&self.edges).zip(&self.edge_scale) {
                    *o = s * (zb[edge.src] - zb[edge.dst]);
                }
                continue;
            }
            for (e, edge) in self.edges.iter().enumerate() {
                let s = self.edge_scale[e];
                let (zi, zj) = (&zb[edge.src * d..edge.src * d + d], &zb[edge.dst * d..edge.dst * d + d]);
                for c in 0..d {
                    ob[e * d + c] = s * (zi[c] - zj[c]);
                }
            }
        }
    }

    /// Raw divergence kernel over `[batch.., |E|, d]` → `[batch.., n, d]`.
    pub(crate) fn divergence_raw(&self, q: &[f64], channels: usize, out: &mut [f64]) {
        let (n, m, d) = (self.node_count, self.edges.len(), channels);
        let batches = q.len() / (m * d);
        out.iter_mut().for_each(|x| *x = 0.0);
        for b in 0..batches {
            let qb = &q[b * m * d..(b + 1) * m * d];
            let ob = &mut out[b * n * d..(b + 1) * n * d];
            if d == 1 {
                for ((q, edge), s) in qb.iter().zip(&self.edges).zip(&self.edge_scale) {
                    let v = s * q;
                    ob[edge.src] += v;
                    ob[edge.dst] -= v;
                }
                continue;
            }
            for (e, edge) in self.edges.iter().enumerate() {
                let s = self.edge_scale[e];
                for c in 0..d {
                    let v = s * qb[e * d + c];
                    ob[edge.src * d + c] += v;
                    ob[edge.dst * d + c] -= v;
                }
            }
        }
    }

    /// Checks a `[batch.., rows, d]` tensor against `rows` and returns the
    /// new shape with `rows` swapped for `new_rows`.
    pub(crate) fn field_shape(&self, op: &'static str, shape: &[usize], rows: usize, new_rows: usize) -> Result<Vec<usize>> {
        if shape.len() < 2 || shape[shape.len() - 2] != rows {
            return Err(shape_err(op, format!("[.., {rows}, d]"), shape));
        }
        let mut out = shape.to_vec();
        let k = out.len() - 2;
        out[k] = new_rows;
        Ok(out)
    }

    pub fn gradient_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let shape = self.field_shape("gradient", z.shape(), self.node_count, self.edges.len())?;
        let d = *shape.last().unwrap();
        let mut out = Tensor::zeros(&shape);
        self.gradient_raw(z.data(), d, out.data_mut());
        Ok(out)
    }

    pub fn divergence_tensor(&self, q: &Tensor) -> Result<Tensor> {
        let shape = self.field_shape("divergence", q.shape(), self.edges.len(), self.node_count)?;
        let d = *shape.last().unwrap();
        let mut out = Tensor::zeros(&shape);
        self.divergence_raw(q.data(), d, out.data_mut());
        Ok(out)
    }

    /// Edge gradient `(∇z)_e = z_src − z_dst` per channel.
    pub fn gradient(&self, z: &NodeField) -> Result<EdgeField> {
        Ok(EdgeField(self.gradient_tensor(&z.0)?))
    }

    /// Net outflow per node.
    pub fn divergence(&self, q: &EdgeField) -> Result<NodeField> {
        Ok(NodeField(self.divergence_tensor(&q.0)?))
    }

    /// `Δz = div(∇z)`.
    pub fn laplacian_apply(&self, z: &NodeField) -> Result<NodeField> {
        self.divergence(&self.gradient(z)?)
    }

    pub fn laplacian_tensor(&self, z: &Tensor) -> Result<Tensor> {
        self.divergence_tensor(&self.gradient_tensor(z)?)
    }

    /// Dense signed incidence matrix `B` (`n × |E|`, +1 at source, −1 at
    /// destination), scaled by `√w` in weighted mode.
    pub fn incidence_matrix(&self) -> Vec<Vec<f64>> {
        let mut b = vec![vec![0.0; self.edges.len()]; self.node_count];
        for (e, edge) in self.edges.iter().enumerate() {
            b[edge.src][e] = self.edge_scale[e];
            b[edge.dst][e] = -self.edge_scale[e];
        }
        b
    }

    /// Undirected neighbour lists (one entry per incident edge).
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for e in &self.edges {
            adj[e.src].push(e.dst);
            adj[e.dst].push(e.src);
        }
        adj
    }

    /// Returns a copy with the direction of edge `id` reversed.
    pub fn with_reversed_edge(&self, id: usize) -> Result<Self> {
        let mut edges = self.edges.clone();
        let e = edges
            .get_mut(id)
            .ok_or_else(|| Error::Validation(format!("no edge {id}")))?;
        std::mem::swap(&mut e.src, &mut e.dst);
        Ok(Self::new(self.node_count, edges)?.with_weighting(self.weighting))
    }
}

fn first_unreachable(n: usize, edges: &[Edge]) -> Option<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in edges {
        let (a, b) = (find(&mut parent, e.src), find(&mut parent, e.dst));
        if a != b {
            parent[a] = b;
        }
    }
    let root = find(&mut parent, 0);
    (1..n).find(|&i| find(&mut parent, i) != root)
}

/// Real field over nodes, shape `n × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeField(pub Tensor);

/// Real field over edges, shape `|E| × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeField(pub Tensor);

impl NodeField {
    pub fn new(net: &RoadNetwork, channels: usize, values: Vec<f64>) -> Result<Self> {
        let t = Tensor::new(vec![net.node_count(), channels], values)?;
        Self::from_tensor(t)
    }

    /// Single-channel field.
    pub fn scalar_field(values: Vec<f64>) -> Self {
        let n = values.len();
        NodeField(Tensor::new(vec![n, 1], values).expect("n x 1"))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(shape_err("NodeField", "[n, d]", t.shape()));
        }
        Ok(NodeField(t.check_finite("NodeField")?))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}

impl EdgeField {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(shape_err("EdgeField", "[|E|, d]", t.shape()));
        }
        Ok(EdgeField(t.check_finite("EdgeField")?))
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}
