//! Layered dialog-act graph.
//!
//! A dialog act is a root-to-leaf path such as `hotel-inform-name`. Nodes
//! that share a label across branches are merged, so the graph has one node
//! per (layer, label) and an act set is described by a binary
//! [`SwitchVector`] of length `sum(H_i)` instead of one bit per full path.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

/// Labels of the canonical three-layer ontology, in their fixed index order.
pub const CANONICAL_DOMAINS: [&str; 10] = [
    "restaurant",
    "hotel",
    "attraction",
    "train",
    "taxi",
    "hospital",
    "police",
    "bus",
    "booking",
    "general",
];
pub const CANONICAL_ACTIONS: [&str; 7] = ["inform", "request", "recommend", "book", "select", "sorry", "none"];
pub const CANONICAL_SLOTS: [&str; 27] = [
    "pricerange",
    "id",
    "address",
    "postcode",
    "type",
    "food",
    "phone",
    "name",
    "area",
    "choice",
    "price",
    "time",
    "reference",
    "none",
    "parking",
    "stars",
    "internet",
    "day",
    "arriveby",
    "departure",
    "destination",
    "leaveat",
    "duration",
    "trainid",
    "people",
    "department",
    "stay",
];

/// Label used to pad acts that stop above the leaf layer.
pub const NONE_LABEL: &str = "none";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ActGraphError {
    #[error("unknown {layer} label {label:?}")]
    UnknownLabel { layer: String, label: String },
    #[error("act {act:?} has {got} parts, ontology has {layers} layers")]
    ActArity { act: String, got: usize, layers: usize },
    #[error("switch length mismatch: expected segments {expected:?}, got {got:?}")]
    LengthMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("duplicate label {label:?} in {layer}")]
    DuplicateLabel { layer: String, label: String },
    #[error("ontology layer {0} is empty")]
    EmptyLayer(usize),
    #[error("ontology needs at least one layer")]
    NoLayers,
    #[error("switch bits must be 0 or 1, got {0}")]
    NotBinary(u8),
}

/// A dialog act as one label per ontology layer, e.g. `hotel-inform-name`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DialogAct {
    labels: Vec<String>,
}

/// Three-layer acts are the common case; the type is the same.
pub type ActTriplet = DialogAct;

impl DialogAct {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        Self {
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn triplet(domain: &str, action: &str, slot: &str) -> Self {
        Self::new([domain, action, slot])
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn domain(&self) -> &str {
        &self.labels[0]
    }

    pub fn action(&self) -> &str {
        self.labels.get(1).map_or(NONE_LABEL, String::as_str)
    }

    pub fn slot(&self) -> &str {
        self.labels.get(2).map_or(NONE_LABEL, String::as_str)
    }
}

impl fmt::Display for DialogAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.labels.join("-"))
    }
}

impl FromStr for DialogAct {
    type Err = ActGraphError;

    /// Parses `a-b-c`. Validation against an ontology happens in
    /// [`Ontology::parse_act`], which also pads short acts with `none`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let labels: Vec<String> = s.trim().split('-').map(|p| p.trim().to_lowercase()).collect();
        if labels.iter().any(String::is_empty) {
            return Err(ActGraphError::ActArity {
                act: s.to_string(),
                got: 0,
                layers: 0,
            });
        }
        Ok(Self { labels })
    }
}

/// Ordered node lists, one per graph layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ontology {
    layers: Vec<Vec<String>>,
    index: Vec<HashMap<String, usize>>,
}

impl Ontology {
    pub fn new(layers: Vec<Vec<String>>) -> Result<Self, ActGraphError> {
        if layers.is_empty() {
            return Err(ActGraphError::NoLayers);
        }
        let mut index = Vec::with_capacity(layers.len());
        for (l, labels) in layers.iter().enumerate() {
            if labels.is_empty() {
                return Err(ActGraphError::EmptyLayer(l));
            }
            let mut map = HashMap::with_capacity(labels.len());
            for (i, label) in labels.iter().enumerate() {
                if map.insert(label.clone(), i).is_some() {
                    return Err(ActGraphError::DuplicateLabel {
                        layer: layer_name(l, layers.len()),
                        label: label.clone(),
                    });
                }
            }
            index.push(map);
        }
        Ok(Self { layers, index })
    }

    /// The 10-domain / 7-action / 27-slot ontology (44 nodes).
    pub fn canonical() -> Self {
        let layers = vec![
            CANONICAL_DOMAINS.iter().map(|s| s.to_string()).collect(),
            CANONICAL_ACTIONS.iter().map(|s| s.to_string()).collect(),
            CANONICAL_SLOTS.iter().map(|s| s.to_string()).collect(),
        ];
        Self::new(layers).expect("canonical ontology is well formed")
    }

    /// Reads the text format: one layer per line, comma-separated labels.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, ActGraphError> {
        let layers = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .collect();
        Self::new(layers)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for layer in &self.layers {
            out.push_str(&layer.join(","));
            out.push('\n');
        }
        out
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[String] {
        &self.layers[l]
    }

    /// `(H_1, .., H_L)`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// `H_0 = sum(H_i)`.
    pub fn total_nodes(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Number of distinct full paths, `prod(H_i)`.
    pub fn tree_size(&self) -> usize {
        self.layers.iter().map(Vec::len).product()
    }

    pub fn layer_name(&self, l: usize) -> String {
        layer_name(l, self.layers.len())
    }

    pub fn index_of(&self, layer: usize, label: &str) -> Result<usize, ActGraphError> {
        self.index[layer]
            .get(label)
            .copied()
            .ok_or_else(|| ActGraphError::UnknownLabel {
                layer: self.layer_name(layer),
                label: label.to_string(),
            })
    }

    /// Start of each layer's segment within the flat switch vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.len();
                Some(start)
            })
            .collect()
    }

    /// `(layer, index)` of a position in the flat switch vector.
    pub fn locate(&self, global: usize) -> Option<(usize, usize)> {
        let mut rest = global;
        for (l, layer) in self.layers.iter().enumerate() {
            if rest < layer.len() {
                return Some((l, rest));
            }
            rest -= layer.len();
        }
        None
    }

    /// Checks every label and pads acts shorter than the ontology with `none`.
    pub fn validate(&self, act: &DialogAct) -> Result<DialogAct, ActGraphError> {
        let depth = self.layers.len();
        if act.labels.len() > depth || act.labels.is_empty() {
            return Err(ActGraphError::ActArity {
                act: act.to_string(),
                got: act.labels.len(),
                layers: depth,
            });
        }
        let mut labels = act.labels.clone();
        labels.resize(depth, NONE_LABEL.to_string());
        for (l, label) in labels.iter().enumerate() {
            self.index_of(l, label)?;
        }
        Ok(DialogAct { labels })
    }

    pub fn parse_act(&self, s: &str) -> Result<DialogAct, ActGraphError> {
        let act: DialogAct = s.parse().map_err(|_| ActGraphError::ActArity {
            act: s.to_string(),
            got: 0,
            layers: self.layers.len(),
        })?;
        self.validate(&act)
    }

    /// The graph form `H(a)`: one set bit per layer.
    pub fn encode_act(&self, act: &DialogAct) -> Result<SwitchVector, ActGraphError> {
        let act = self.validate(act)?;
        let mut sv = SwitchVector::zeros(&self.layer_sizes());
        for (l, label) in act.labels.iter().enumerate() {
            let i = self.index_of(l, label)?;
            sv.set(l, i, true);
        }
        Ok(sv)
    }

    /// BitOR of the encodings of every act.
    pub fn encode_acts(&self, acts: &[DialogAct]) -> Result<SwitchVector, ActGraphError> {
        let encoded = acts.iter().map(|a| self.encode_act(a)).collect::<Result<Vec<_>, _>>()?;
        SwitchVector::aggregate(&self.layer_sizes(), &encoded)
    }

    /// All acts in the cross product of active nodes, layer by layer, in
    /// index order. Aggregated switches can decode to acts that were never
    /// encoded; no encoded act is ever lost.
    pub fn decode_switch(&self, sv: &SwitchVector) -> Result<Vec<DialogAct>, ActGraphError> {
        self.check_sizes(sv)?;
        let mut paths: Vec<Vec<String>> = vec![Vec::new()];
        for l in 0..self.layers.len() {
            let active: Vec<&String> = sv
                .segment(l)
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| &self.layers[l][i])
                .collect();
            if active.is_empty() {
                return Ok(Vec::new());
            }
            paths = paths
                .into_iter()
                .flat_map(|p| {
                    active.iter().map(move |label| {
                        let mut q = p.clone();
                        q.push((*label).clone());
                        q
                    })
                })
                .collect();
        }
        Ok(paths.into_iter().map(|labels| DialogAct { labels }).collect())
    }

    pub fn check_sizes(&self, sv: &SwitchVector) -> Result<(), ActGraphError> {
        let expected = self.layer_sizes();
        if sv.sizes != expected {
            return Err(ActGraphError::LengthMismatch {
                expected,
                got: sv.sizes.clone(),
            });
        }
        Ok(())
    }

    /// Human-readable label of a flat switch position, e.g. `slot:name`.
    pub fn node_label(&self, global: usize) -> Option<String> {
        self.locate(global)
            .map(|(l, i)| format!("{}:{}", self.layer_name(l), self.layers[l][i]))
    }
}

fn layer_name(l: usize, depth: usize) -> String {
    match (depth, l) {
        (3, 0) => "domain".into(),
        (3, 1) => "action".into(),
        (3, 2) => "slot".into(),
        _ => format!("layer {}", l + 1),
    }
}

/// Binary hierarchical act representation split into per-layer segments.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SwitchVector {
    bits: Vec<bool>,
    sizes: Vec<usize>,
}

impl SwitchVector {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            bits: vec![false; sizes.iter().sum()],
            sizes: sizes.to_vec(),
        }
    }

    pub fn ones(sizes: &[usize]) -> Self {
        Self {
            bits: vec![true; sizes.iter().sum()],
            sizes: sizes.to_vec(),
        }
    }

    pub fn from_bits(sizes: &[usize], bits: Vec<bool>) -> Result<Self, ActGraphError> {
        if bits.len() != sizes.iter().sum::<usize>() {
            return Err(ActGraphError::LengthMismatch {
                expected: sizes.to_vec(),
                got: vec![bits.len()],
            });
        }
        Ok(Self {
            bits,
            sizes: sizes.to_vec(),
        })
    }

    /// Builds from per-layer 0/1 segments, e.g. `[[1,0,0],[1,1]]`.
    pub fn from_segments(segments: &[Vec<u8>]) -> Result<Self, ActGraphError> {
        let sizes: Vec<usize> = segments.iter().map(Vec::len).collect();
        let mut bits = Vec::with_capacity(sizes.iter().sum());
        for &b in segments.iter().flatten() {
            match b {
                0 => bits.push(false),
                1 => bits.push(true),
                other => return Err(ActGraphError::NotBinary(other)),
            }
        }
        Ok(Self { bits, sizes })
    }

    pub fn to_segments(&self) -> Vec<Vec<u8>> {
        (0..self.sizes.len())
            .map(|l| self.segment(l).iter().map(|&b| u8::from(b)).collect())
            .collect()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..layer].iter().sum()
    }

    pub fn segment(&self, layer: usize) -> &[bool] {
        let start = self.offset(layer);
        &self.bits[start..start + self.sizes[layer]]
    }

    pub fn set(&mut self, layer: usize, index: usize, on: bool) {
        let start = self.offset(layer);
        self.bits[start + index] = on;
    }

    pub fn get(&self, global: usize) -> bool {
        self.bits[global]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// 0.0 / 1.0 values, for use as training targets or model input.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn bitor(&self, other: &SwitchVector) -> Result<SwitchVector, ActGraphError> {
        if self.sizes != other.sizes {
            return Err(ActGraphError::LengthMismatch {
                expected: self.sizes.clone(),
                got: other.sizes.clone(),
            });
        }
        Ok(SwitchVector {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
            sizes: self.sizes.clone(),
        })
    }

    /// Elementwise OR of all vectors; the empty list gives all zeros.
    pub fn aggregate(sizes: &[usize], acts: &[SwitchVector]) -> Result<SwitchVector, ActGraphError> {
        acts.iter()
            .try_fold(SwitchVector::zeros(sizes), |acc, sv| acc.bitor(sv))
    }

    /// True when every bit set here is also set in `other`.
    pub fn is_subset_of(&self, other: &SwitchVector) -> bool {
        self.sizes == other.sizes && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Compact `0/1` rendering with `|` between segments.
    pub fn render(&self) -> String {
        (0..self.sizes.len())
            .map(|l| self.segment(l).iter().map(|&b| if b { '1' } else { '0' }).collect::<String>())
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Flat baseline encoding: one position per full act observed in training,
/// plus a final UNK position for anything else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatInventory {
    acts: Vec<DialogAct>,
    index: HashMap<DialogAct, usize>,
}

impl FlatInventory {
    /// Builds the inventory in first-observation order.
    pub fn from_observed<'a>(acts: impl IntoIterator<Item = &'a DialogAct>) -> Self {
        let mut inv = Self {
            acts: Vec::new(),
            index: HashMap::new(),
        };
        for act in acts {
            if !inv.index.contains_key(act) {
                inv.index.insert(act.clone(), inv.acts.len());
                inv.acts.push(act.clone());
            }
        }
        inv
    }

    pub fn acts(&self) -> &[DialogAct] {
        &self.acts
    }

    /// Vector length, including the UNK position.
    pub fn len(&self) -> usize {
        self.acts.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unk_index(&self) -> usize {
        self.acts.len()
    }

    pub fn position(&self, act: &DialogAct) -> usize {
        self.index.get(act).copied().unwrap_or(self.acts.len())
    }

    pub fn contains(&self, act: &DialogAct) -> bool {
        self.index.contains_key(act)
    }

    /// Binary vector with the positions of `acts` set.
    pub fn encode(&self, acts: &[DialogAct]) -> Vec<bool> {
        let mut bits = vec![false; self.len()];
        for act in acts {
            bits[self.position(act)] = true;
        }
        bits
    }

    pub fn to_text(&self) -> String {
        self.acts.iter().map(|a| format!("{a}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, ActGraphError> {
        let acts = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<DialogAct>, _>>()?;
        Ok(Self::from_observed(acts.iter()))
    }
}
