//! Multi-label act prediction.
//!
//! `P(A) = sigmoid(V_a^T tanh(W_u u + W_b [v_kb; v_bf] + b))`, one probability
//! per act-graph node, decoded with a strict threshold.

use serde::{Deserialize, Serialize};

use crate::act_graph::{Ontology, SwitchVector};
use crate::encoder::{Encoder, EncoderConfig};
use crate::nn::Builder;
use crate::numerics::{Init, ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

/// Match-count buckets per domain: `0`, `1`, `2-3`, `4+`.
pub const KB_BUCKETS: usize = 4;

pub fn kb_bucket(matches: usize) -> usize {
    match matches {
        0 => 0,
        1 => 1,
        2 | 3 => 2,
        _ => 3,
    }
}

/// Lengths of the side-condition vectors for an ontology: a KB block of
/// [`KB_BUCKETS`] per first-layer node, and one belief bit per
/// (first-layer, last-layer) node pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideSchema {
    pub domains: usize,
    pub slots: usize,
}

impl SideSchema {
    pub fn for_ontology(ont: &Ontology) -> Self {
        let sizes = ont.layer_sizes();
        Self {
            domains: sizes[0],
            slots: *sizes.last().expect("ontology has layers"),
        }
    }

    pub fn kb_len(&self) -> usize {
        self.domains * KB_BUCKETS
    }

    pub fn belief_len(&self) -> usize {
        self.domains * self.slots
    }

    pub fn len(&self) -> usize {
        self.kb_len() + self.belief_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// DB-match one-hots and belief-state bits for one turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideConditions {
    pub kb: Vec<bool>,
    pub belief: Vec<bool>,
}

impl SideConditions {
    /// Builds both vectors from per-domain match counts and constrained
    /// `(domain index, slot index)` pairs.
    pub fn from_parts(schema: SideSchema, matches: &[usize], constrained: &[(usize, usize)]) -> Result<Self> {
        if matches.len() != schema.domains {
            return Err(Error::Data(format!(
                "expected {} match counts, got {}",
                schema.domains,
                matches.len()
            )));
        }
        let mut kb = vec![false; schema.kb_len()];
        for (d, &m) in matches.iter().enumerate() {
            kb[d * KB_BUCKETS + kb_bucket(m)] = true;
        }
        let mut belief = vec![false; schema.belief_len()];
        for &(d, s) in constrained {
            if d >= schema.domains || s >= schema.slots {
                return Err(Error::Data(format!("belief pair ({d}, {s}) outside schema")));
            }
            belief[d * schema.slots + s] = true;
        }
        Ok(Self { kb, belief })
    }

    /// All-zero belief and "0 matches" for every domain.
    pub fn empty(schema: SideSchema) -> Self {
        Self::from_parts(schema, &vec![0; schema.domains], &[]).expect("schema-sized input")
    }

    pub fn validate(&self, schema: SideSchema) -> Result<()> {
        if self.kb.len() != schema.kb_len() || self.belief.len() != schema.belief_len() {
            return Err(Error::Data(format!(
                "side conditions have lengths ({}, {}), schema expects ({}, {})",
                self.kb.len(),
                self.belief.len(),
                schema.kb_len(),
                schema.belief_len()
            )));
        }
        for block in self.kb.chunks(KB_BUCKETS) {
            if block.iter().filter(|&&b| b).count() != 1 {
                return Err(Error::Data("each KB block needs exactly one set bit".into()));
            }
        }
        Ok(())
    }

    /// `[v_kb; v_bf]` as a `0/1` row.
    pub fn to_f64(&self) -> Vec<f64> {
        self.kb
            .iter()
            .chain(&self.belief)
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Per-node activation probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ActDistribution {
    pub probs: Vec<f64>,
}

/// `I(p_i > T)`; ties at the threshold stay off.
pub fn threshold_decode(dist: &ActDistribution, sizes: &[usize], threshold: f64) -> Result<SwitchVector> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(SwitchVector::from_bits(
        sizes,
        dist.probs.iter().map(|&p| p > threshold).collect(),
    )?)
}

/// `-sum_i [A_i ln p_i + (1 - A_i) ln(1 - p_i)]`.
pub fn bce_loss(dist: &ActDistribution, gold: &SwitchVector) -> Result<f64> {
    if dist.probs.len() != gold.len() {
        return Err(Error::Config(format!(
            "distribution has {} nodes, gold switch {}",
            dist.probs.len(),
            gold.len()
        )));
    }
    Ok(dist
        .probs
        .iter()
        .zip(gold.bits())
        .map(|(&p, &a)| if a { -p.ln() } else { -(1.0 - p).ln() })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub encoder: EncoderConfig,
    pub side: SideSchema,
    pub nodes: usize,
}

#[derive(Clone, Debug)]
pub struct ActPredictor {
    cfg: PredictorConfig,
    encoder: Encoder,
    w_u: ParamId,
    w_b: ParamId,
    bias: ParamId,
    v_a: ParamId,
}

impl ActPredictor {
    pub fn build(cfg: &PredictorConfig, b: &mut Builder) -> Result<Self> {
        let d = cfg.encoder.model_dim;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::build(&cfg.encoder, "predictor.encoder", b)?,
            w_u: b.param("predictor.w_u", &[d, d], Init::Uniform)?,
            w_b: b.param("predictor.w_b", &[cfg.side.len(), d], Init::Uniform)?,
            bias: b.param("predictor.b", &[1, d], Init::Zeros)?,
            v_a: b.param("predictor.v_a", &[d, cfg.nodes], Init::Uniform)?,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Scores a pooled history row (`1 x D`) against every node.
    pub fn predict_probs(&self, tape: &mut Tape, pooled: Var, side: &SideConditions) -> Result<Var> {
        side.validate(self.cfg.side)?;
        let d = self.cfg.encoder.model_dim;
        if tape.shape(pooled) != (1, d) {
            return Err(Error::Config(format!("pooled vector shape {:?}, expected (1, {d})", tape.shape(pooled))));
        }
        let sv = tape.constant_from(1, self.cfg.side.len(), side.to_f64())?;
        let (w_u, w_b, bias, v_a) = (
            tape.param(self.w_u),
            tape.param(self.w_b),
            tape.param(self.bias),
            tape.param(self.v_a),
        );
        let hu = tape.matmul(pooled, w_u)?;
        let hb = tape.matmul(sv, w_b)?;
        let h = tape.add(hu, hb)?;
        let h = tape.add(h, bias)?;
        let h = tape.tanh(h);
        let logits = tape.matmul(h, v_a)?;
        Ok(tape.sigmoid(logits))
    }

    /// Encodes the history and returns node probabilities on the tape.
    pub fn forward(&self, tape: &mut Tape, history: &[usize], side: &SideConditions) -> Result<Var> {
        let (pooled, _) = self.encoder.forward(tape, history)?;
        self.predict_probs(tape, pooled, side)
    }

    /// Summed binary cross-entropy against a gold switch.
    pub fn loss(&self, tape: &mut Tape, history: &[usize], side: &SideConditions, gold: &SwitchVector) -> Result<Var> {
        let probs = self.forward(tape, history, side)?;
        if gold.len() != self.cfg.nodes {
            return Err(Error::Config(format!("gold switch has {} bits, predictor {}", gold.len(), self.cfg.nodes)));
        }
        Ok(tape.binary_cross_entropy(probs, &gold.to_f64())?)
    }

    pub fn distribution(&self, store: &ParamStore, history: &[usize], side: &SideConditions) -> Result<ActDistribution> {
        let mut tape = Tape::inference(store);
        let probs = self.forward(&mut tape, history, side)?;
        Ok(ActDistribution {
            probs: tape.value(probs).to_vec(),
        })
    }
}
