//! Combinatorics of orthants, layers and boundary strata.
//!
//! An orthant is identified by its sign vector `σ ∈ {-1,+1}ⁿ`. Relative to the
//! null-space generator `b`, index `i` is an *entry* index when `σ_i b_i > 0`
//! and an *exit* index otherwise. The layer of an orthant is the number of
//! entry indices, so layer `0` is the negative extremal orthant and layer `n`
//! the positive one. Signatures are stored as bitmasks; the layer is a
//! population count.

use std::fmt;

use nalgebra::DVector;
use num_integer::binomial;
use petgraph::algo::connected_components;
use petgraph::dot::{Config, Dot};
use petgraph::graph::{NodeIndex, UnGraph};
use serde::Serialize;
use thiserror::Error;

/// Widest signature a `u64` mask can hold.
pub const MAX_DIM: usize = 64;
/// Widest space for which whole layers are enumerated.
pub const MAX_ENUMERATION_DIM: usize = 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StrataError {
    #[error("dimension {n} exceeds the enumeration limit {max}")]
    TooLarge { n: usize, max: usize },
    #[error("layer {layer} is outside 0..={n}")]
    LayerOutOfRange { layer: usize, n: usize },
    #[error("signature has length {found}, expected {expected}")]
    WrongLength { found: usize, expected: usize },
    #[error("signature entry {index} is {value}; expected +1 or -1")]
    InvalidSign { index: usize, value: i8 },
    #[error("cannot parse signature {0:?}; use a string of '+' and '-'")]
    Parse(String),
}

#[inline]
fn full_mask(n: usize) -> u64 {
    if n == 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

fn bits(mask: u64) -> impl Iterator<Item = usize> {
    let mut rest = mask;
    std::iter::from_fn(move || {
        if rest == 0 {
            None
        } else {
            let i = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            Some(i)
        }
    })
}

/// All `k`-subsets of `n` bits in increasing numeric order (Gosper's hack).
pub(crate) fn subsets(n: usize, k: usize) -> impl Iterator<Item = u64> {
    let limit = if n >= 64 { None } else { Some(1u64 << n) };
    let mut next = if k == 0 {
        Some(0u64)
    } else if k > n {
        None
    } else {
        Some(full_mask(k))
    };
    std::iter::from_fn(move || {
        let current = next?;
        next = if current == 0 {
            None
        } else {
            let c = current & current.wrapping_neg();
            let r = current.wrapping_add(c);
            if r == 0 {
                None
            } else {
                let candidate = (((r ^ current) >> 2) / c) | r;
                match limit {
                    Some(l) if candidate >= l => None,
                    _ => Some(candidate),
                }
            }
        };
        Some(current)
    })
}

/// Sign pattern of the null-space generator, `bit i ⇔ b_i > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SignPattern {
    n: usize,
    positive: u64,
}

impl SignPattern {
    /// `signs[i]` is the sign of `b_i`; zeros are rejected.
    pub fn new(signs: &[i8]) -> Result<Self, StrataError> {
        if signs.len() > MAX_DIM {
            return Err(StrataError::TooLarge {
                n: signs.len(),
                max: MAX_DIM,
            });
        }
        let mut positive = 0u64;
        for (i, &s) in signs.iter().enumerate() {
            match s {
                1 => positive |= 1 << i,
                -1 => {}
                value => return Err(StrataError::InvalidSign { index: i, value }),
            }
        }
        Ok(Self {
            n: signs.len(),
            positive,
        })
    }

    pub(crate) fn from_null_vector(b: &DVector<f64>) -> Self {
        let positive = b
            .iter()
            .enumerate()
            .filter(|(_, bi)| **bi > 0.0)
            .fold(0u64, |acc, (i, _)| acc | (1 << i));
        Self {
            n: b.len(),
            positive,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Orthant whose entry set is `entry` (bit `i` set ⇔ `σ_i b_i > 0`).
    pub fn from_entry_mask(&self, entry: u64) -> OrthantSignature {
        let full = full_mask(self.n);
        let entry = entry & full;
        OrthantSignature {
            n: self.n,
            positive: !(entry ^ self.positive) & full,
            entry,
        }
    }

    /// Orthant with `bit i ⇔ σ_i = +1`.
    pub fn from_positive_mask(&self, positive: u64) -> OrthantSignature {
        let full = full_mask(self.n);
        let positive = positive & full;
        OrthantSignature {
            n: self.n,
            positive,
            entry: !(positive ^ self.positive) & full,
        }
    }

    pub fn classify(&self, sigma: &[i8]) -> Result<OrthantSignature, StrataError> {
        if sigma.len() != self.n {
            return Err(StrataError::WrongLength {
                found: sigma.len(),
                expected: self.n,
            });
        }
        let mut positive = 0u64;
        for (i, &s) in sigma.iter().enumerate() {
            match s {
                1 => positive |= 1 << i,
                -1 => {}
                value => return Err(StrataError::InvalidSign { index: i, value }),
            }
        }
        Ok(self.from_positive_mask(positive))
    }

    /// Parses `"+-+"`-style strings.
    pub fn parse(&self, text: &str) -> Result<OrthantSignature, StrataError> {
        let sigma: Option<Vec<i8>> = text
            .trim()
            .chars()
            .map(|ch| match ch {
                '+' => Some(1),
                '-' => Some(-1),
                _ => None,
            })
            .collect();
        let sigma = sigma.ok_or_else(|| StrataError::Parse(text.to_string()))?;
        self.classify(&sigma)
    }

    /// Orthant containing `v`, or `None` if some coordinate is exactly zero.
    pub fn orthant_of(&self, v: &DVector<f64>) -> Option<OrthantSignature> {
        if v.iter().any(|x| *x == 0.0 || !x.is_finite()) {
            return None;
        }
        let positive = v
            .iter()
            .enumerate()
            .filter(|(_, x)| **x > 0.0)
            .fold(0u64, |acc, (i, _)| acc | (1 << i));
        Some(self.from_positive_mask(positive))
    }

    pub fn extremal_positive(&self) -> OrthantSignature {
        self.from_entry_mask(full_mask(self.n))
    }

    pub fn extremal_negative(&self) -> OrthantSignature {
        self.from_entry_mask(0)
    }

    fn check_enumerable(&self, layer: usize) -> Result<(), StrataError> {
        if self.n > MAX_ENUMERATION_DIM {
            return Err(StrataError::TooLarge {
                n: self.n,
                max: MAX_ENUMERATION_DIM,
            });
        }
        if layer > self.n {
            return Err(StrataError::LayerOutOfRange { layer, n: self.n });
        }
        Ok(())
    }

    /// All orthants with exactly `layer` entry indices, in increasing entry-mask order.
    pub fn enumerate_layer(&self, layer: usize) -> Result<Vec<OrthantSignature>, StrataError> {
        self.check_enumerable(layer)?;
        Ok(subsets(self.n, layer)
            .map(|mask| self.from_entry_mask(mask))
            .collect())
    }

    /// Every reciprocal hinge of a layer: unordered pairs of same-layer orthants
    /// that differ in exactly one entry and one exit index.
    pub fn reciprocal_hinges(&self, layer: usize) -> Result<Vec<StratumDescriptor>, StrataError> {
        let orthants = self.enumerate_layer(layer)?;
        let mut hinges = Vec::new();
        for sig in &orthants {
            for i in bits(sig.entry) {
                for j in bits(sig.exit_mask()) {
                    let other = sig.entry ^ (1 << i) ^ (1 << j);
                    if other > sig.entry {
                        let mut indices = vec![i, j];
                        indices.sort_unstable();
                        hinges.push(StratumDescriptor {
                            orthants: vec![*sig, self.from_entry_mask(other)],
                            indices,
                            kind: StratumKind::ReciprocalHinge,
                            dimension: self.n - 2,
                        });
                    }
                }
            }
        }
        Ok(hinges)
    }

    /// Orthants of a layer as nodes, reciprocal hinges as edges.
    pub fn layer_adjacency_graph(&self, layer: usize) -> Result<LayerGraph, StrataError> {
        let orthants = self.enumerate_layer(layer)?;
        let mut graph = UnGraph::with_capacity(orthants.len(), 0);
        let nodes: Vec<NodeIndex> = orthants.iter().map(|s| graph.add_node(*s)).collect();
        let position = |mask: u64| orthants.binary_search_by_key(&mask, |s| s.entry).ok();
        for hinge in self.reciprocal_hinges(layer)? {
            let a = position(hinge.orthants[0].entry).expect("same layer");
            let b = position(hinge.orthants[1].entry).expect("same layer");
            graph.add_edge(nodes[a], nodes[b], (hinge.indices[0], hinge.indices[1]));
        }
        Ok(LayerGraph { layer, graph })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrthantKind {
    ExtremalPositive,
    ExtremalNegative,
    Transitional,
}

/// A classified orthant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrthantSignature {
    n: usize,
    positive: u64,
    entry: u64,
}

impl OrthantSignature {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn sign(&self, i: usize) -> i8 {
        if self.positive >> i & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn sigma(&self) -> Vec<i8> {
        (0..self.n).map(|i| self.sign(i)).collect()
    }

    pub fn entry_mask(&self) -> u64 {
        self.entry
    }

    pub fn exit_mask(&self) -> u64 {
        !self.entry & full_mask(self.n)
    }

    pub fn positive_mask(&self) -> u64 {
        self.positive
    }

    pub fn is_entry(&self, i: usize) -> bool {
        self.entry >> i & 1 == 1
    }

    pub fn entry_set(&self) -> Vec<usize> {
        bits(self.entry).collect()
    }

    pub fn exit_set(&self) -> Vec<usize> {
        bits(self.exit_mask()).collect()
    }

    pub fn layer(&self) -> usize {
        self.entry.count_ones() as usize
    }

    pub fn kind(&self) -> OrthantKind {
        match self.layer() {
            l if l == self.n => OrthantKind::ExtremalPositive,
            0 => OrthantKind::ExtremalNegative,
            _ => OrthantKind::Transitional,
        }
    }

    pub fn is_extremal(&self) -> bool {
        self.kind() != OrthantKind::Transitional
    }

    /// Faces and intersections of faces up to codimension `max_codim`
    /// (clamped to `n`), classified by which portals they belong to.
    pub fn boundary_strata(&self, max_codim: usize) -> Vec<StratumDescriptor> {
        let mut out = Vec::new();
        for codim in 1..=max_codim.min(self.n) {
            for mask in subsets(self.n, codim) {
                let entries = (mask & self.entry).count_ones() as usize;
                let kind = match (codim, entries) {
                    (1, 1) => StratumKind::EntryFace,
                    (1, _) => StratumKind::ExitFace,
                    (_, e) if e == codim => StratumKind::EntryFold,
                    (_, 0) => StratumKind::ExitFold,
                    _ => StratumKind::Hinge,
                };
                out.push(StratumDescriptor {
                    orthants: vec![*self],
                    indices: bits(mask).collect(),
                    kind,
                    dimension: self.n - codim,
                });
            }
        }
        out
    }
}

impl fmt::Display for OrthantSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n {
            f.write_str(if self.sign(i) > 0 { "+" } else { "-" })?;
        }
        Ok(())
    }
}

impl Serialize for OrthantSignature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StratumKind {
    EntryFace,
    ExitFace,
    EntryFold,
    ExitFold,
    Hinge,
    ReciprocalHinge,
}

impl StratumKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StratumKind::EntryFace => "entry-portal-face",
            StratumKind::ExitFace => "exit-portal-face",
            StratumKind::EntryFold => "entry-fold",
            StratumKind::ExitFold => "exit-fold",
            StratumKind::Hinge => "hinge",
            StratumKind::ReciprocalHinge => "reciprocal-hinge",
        }
    }
}

/// A boundary stratum given by its vanishing coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StratumDescriptor {
    pub orthants: Vec<OrthantSignature>,
    pub indices: Vec<usize>,
    pub kind: StratumKind,
    pub dimension: usize,
}

/// `½ C(n,l) l (n−l)`.
pub fn reciprocal_hinge_count(n: usize, layer: usize) -> u64 {
    if layer > n {
        return 0;
    }
    let (n64, l64) = (n as u64, layer as u64);
    binomial(n64, l64) * l64 * (n64 - l64) / 2
}

/// `C(n,2) C(n−2, l−1)`, the second closed form of the same count.
pub fn reciprocal_hinge_count_pairs(n: usize, layer: usize) -> u64 {
    if n < 2 || layer == 0 || layer >= n {
        return 0;
    }
    binomial(n as u64, 2) * binomial(n as u64 - 2, layer as u64 - 1)
}

pub struct LayerGraph {
    pub layer: usize,
    pub graph: UnGraph<OrthantSignature, (usize, usize)>,
}

#[derive(Serialize)]
struct GraphJson {
    layer: usize,
    nodes: Vec<String>,
    edges: Vec<EdgeJson>,
    connected: bool,
}

#[derive(Serialize)]
struct EdgeJson {
    source: usize,
    target: usize,
    hinge: [usize; 2],
}

impl LayerGraph {
    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn edge_count(&self) -> usize {
        self.graph.edge_count()
    }

    pub fn is_connected(&self) -> bool {
        connected_components(&self.graph) <= 1
    }

    pub fn to_dot(&self) -> String {
        let labelled = self
            .graph
            .map(|_, s| s.to_string(), |_, (i, j)| format!("{i},{j}"));
        format!(
            "{}",
            Dot::with_config(&labelled, &[Config::GraphContentOnly])
        )
        .lines()
        .fold(
            format!("graph layer_{} {{\n", self.layer),
            |mut acc, line| {
                acc.push_str(line);
                acc.push('\n');
                acc
            },
        ) + "}\n"
    }

    pub fn to_json(&self) -> serde_json::Value {
        let doc = GraphJson {
            layer: self.layer,
            nodes: self.graph.node_weights().map(|s| s.to_string()).collect(),
            edges: self
                .graph
                .edge_indices()
                .map(|e| {
                    let (a, b) = self.graph.edge_endpoints(e).expect("edge exists");
                    let (i, j) = self.graph[e];
                    EdgeJson {
                        source: a.index(),
                        target: b.index(),
                        hinge: [i, j],
                    }
                })
                .collect(),
            connected: self.is_connected(),
        };
        serde_json::to_value(doc).expect("plain data")
    }
}
