//! Autoregressive response generation on top of the HDSA stack.
//!
//! The generator owns its own history encoder, a token embedding, the HDSA
//! layers and an output projection `softmax(O W_v + b_v)`. Training uses
//! teacher forcing: inputs are `[BOS] y_1 .. y_{n-1}`, targets `y_1 .. y_n`
//! where `y_n` is `[EOS]`, with a causal mask so row `l` only sees `y_{0:l}`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::act_graph::{DialogAct, Ontology, SwitchVector};
use crate::act_predictor::{threshold_decode, ActPredictor, SideConditions};
use crate::dsa::{Hdsa, HdsaConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::nn::{embed_with_positions, Builder, Linear};
use crate::numerics::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vocab::{BOS, EOS, PAD, POOL, SYS, USR};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { beam_size: 2, max_len: 60 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::Config("beam size and max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// A partial or finished output sequence. `tokens` excludes `[BOS]` and
/// includes the closing `[EOS]` once finished.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Output ranking: finished before unfinished, higher score, then
    /// lexicographically smaller ids, then shorter.
    pub fn rank(&self, other: &Self) -> Ordering {
        other
            .finished
            .cmp(&self.finished)
            .then_with(|| other.score.total_cmp(&self.score))
            .then_with(|| self.tokens.cmp(&other.tokens))
            .then_with(|| self.tokens.len().cmp(&other.tokens.len()))
    }

    /// Tokens without the closing `[EOS]`.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.tokens,
        }
    }
}

fn prune_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
}

/// Numerically stable `log softmax` of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

/// Picks the highest log-prob token, lowest id on ties.
fn argmax(logp: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in logp.iter().enumerate() {
        if v == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|b| v > logp[b]) {
            best = Some(i);
        }
    }
    best
}

/// Greedy decoding. `step(prefix)` returns next-token log-probabilities
/// given the generated prefix (without `[BOS]`).
pub fn greedy_decode<F>(mut step: F, eos: usize, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let logp = step(&hyp.tokens)?;
        let Some(tok) = argmax(&logp) else { break };
        hyp.score += logp[tok];
        hyp.tokens.push(tok);
        if tok == eos {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Beam search without length normalization. Each step expands every live
/// hypothesis over the whole vocabulary and keeps the `beam_size` best
/// expansions; those ending in `eos` move to the finished pool. The greedy
/// sequence is also scored, so the result never ranks below it.
pub fn beam_search<F>(mut step: F, eos: usize, cfg: &GenerationConfig) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        // Scores only fall as tokens are added.
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if finished.len() >= cfg.beam_size && finished.iter().all(|f| f.score >= best_live) {
            break;
        }
        let mut expansions = Vec::with_capacity(live.len() * 8);
        for hyp in &live {
            let logp = step(&hyp.tokens)?;
            for (tok, &lp) in logp.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                expansions.push(Hypothesis {
                    tokens,
                    score: hyp.score + lp,
                    finished: tok == eos,
                });
            }
        }
        expansions.sort_by(prune_order);
        expansions.truncate(cfg.beam_size);
        live.clear();
        for h in expansions {
            if h.finished {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
    }
    let mut pool = finished;
    pool.extend(live);
    pool.push(greedy_decode(&mut step, eos, cfg.max_len)?);
    pool.sort_by(Hypothesis::rank);
    Ok(pool.swap_remove(0))
}

/// How the generator is told which acts to realize.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    /// Act switch vector gates the HDSA heads.
    Graph,
    /// Baseline: a flat triplet vector of `inventory` entries is projected
    /// to the model width and added to every input row; the heads run under
    /// a fixed switch with the first head of each layer on.
    Flat { inventory: usize },
}

/// The act input for one turn, matching the generator's [`Conditioning`].
#[derive(Clone, Debug, PartialEq)]
pub enum Control {
    Graph(SwitchVector),
    Flat(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub encoder: EncoderConfig,
    pub hdsa: HdsaConfig,
    pub conditioning: Conditioning,
}

impl GeneratorConfig {
    pub fn vocab_size(&self) -> usize {
        self.encoder.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.hdsa.validate()?;
        if self.encoder.model_dim != self.hdsa.model_dim() {
            return Err(Error::Config(format!(
                "encoder width {} differs from decoder width {}",
                self.encoder.model_dim,
                self.hdsa.model_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    encoder: Encoder,
    embed: ParamId,
    hdsa: Hdsa,
    output: Linear,
    flat: Option<ParamId>,
}

impl Generator {
    pub fn build(cfg: &GeneratorConfig, b: &mut Builder) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hdsa.model_dim();
        let v = cfg.vocab_size();
        let flat = match cfg.conditioning {
            Conditioning::Graph => None,
            Conditioning::Flat { inventory } => Some(b.param("generator.flat", &[inventory, d], Init::Uniform)?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::build(&cfg.encoder, "generator.encoder", b)?,
            embed: b.param("generator.embed", &[v, d], Init::Normal(0.02))?,
            hdsa: Hdsa::build(&cfg.hdsa, "generator.hdsa", b)?,
            output: b.linear("generator.output", d, v, true)?,
            flat,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn hdsa(&self) -> &Hdsa {
        &self.hdsa
    }

    /// Encoded history rows, `m x D`.
    pub fn encode(&self, store: &ParamStore, history: &[usize]) -> Result<Tensor> {
        Ok(self.encoder.encode_history(store, history)?.tokens)
    }

    /// `O W_v + b_v` for decoder outputs `O` (`n x D`).
    pub fn token_logits(&self, tape: &mut Tape, o: Var) -> Result<Var> {
        self.output.forward(tape, o)
    }

    fn switch_for(&self, control: &Control) -> Result<SwitchVector> {
        let sizes = self.cfg.hdsa.head_counts();
        match (&self.cfg.conditioning, control) {
            (Conditioning::Graph, Control::Graph(a)) => Ok(a.clone()),
            (Conditioning::Flat { inventory }, Control::Flat(bits)) => {
                if bits.len() != *inventory {
                    return Err(Error::Config(format!(
                        "flat act vector has {} entries, generator expects {inventory}",
                        bits.len()
                    )));
                }
                let mut s = SwitchVector::zeros(&sizes);
                (0..sizes.len()).for_each(|l| s.set(l, 0, true));
                Ok(s)
            }
            _ => Err(Error::Config("act control does not match the generator's conditioning".into())),
        }
    }

    /// Decoder logits (`n x V`) for input ids `inputs` given encoded history.
    pub fn forward(&self, tape: &mut Tape, history: Var, control: &Control, inputs: &[usize]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Config("decoder input is empty".into()));
        }
        let switch = self.switch_for(control)?;
        let d = self.cfg.hdsa.model_dim();
        let mut x = embed_with_positions(tape, self.embed, inputs, d)?;
        if let (Some(flat), Control::Flat(bits)) = (self.flat, control) {
            let v = tape.constant_from(1, bits.len(), bits.iter().map(|&b| f64::from(u8::from(b))).collect())?;
            let w = tape.param(flat);
            let bias = tape.matmul(v, w)?;
            x = tape.add_row(x, bias)?;
        }
        let o = self.hdsa.forward(tape, x, history, &switch, true)?;
        self.token_logits(tape, o)
    }

    /// Per-token mean negative log-likelihood of `y` (which must end with
    /// `[EOS]`), encoding the history on the same tape.
    pub fn sequence_nll(&self, tape: &mut Tape, history: &[usize], control: &Control, y: &[usize]) -> Result<Var> {
        if y.is_empty() {
            return Err(Error::Data("target sequence is empty".into()));
        }
        let (_, rows) = self.encoder.forward(tape, history)?;
        let inputs = teacher_inputs(y);
        let logits = self.forward(tape, rows, control, &inputs)?;
        Ok(tape.cross_entropy(logits, y)?)
    }

    /// Next-token log-probabilities after `prefix`; reserved non-output ids
    /// are excluded.
    pub fn next_log_probs(&self, store: &ParamStore, history: &Tensor, control: &Control, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference(store);
        let h = tape.constant(history);
        let inputs: Vec<usize> = std::iter::once(BOS).chain(prefix.iter().copied()).collect();
        let logits = self.forward(&mut tape, h, control, &inputs)?;
        let v = self.cfg.vocab_size();
        let last = &tape.value(logits)[(inputs.len() - 1) * v..];
        let mut row = last.to_vec();
        for id in [PAD, BOS, POOL, USR, SYS] {
            if id < v {
                row[id] = f64::NEG_INFINITY;
            }
        }
        Ok(log_softmax(&row))
    }

    /// Beam-decodes a response; returns token ids without `[EOS]`.
    pub fn decode(&self, store: &ParamStore, history: &[usize], control: &Control, cfg: &GenerationConfig) -> Result<Vec<usize>> {
        let h = self.encode(store, history)?;
        let best = beam_search(|p| self.next_log_probs(store, &h, control, p), EOS, cfg)?;
        Ok(best.content(EOS).to_vec())
    }
}

/// `[BOS] y_1 .. y_{n-1}`.
pub fn teacher_inputs(y: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(y[..y.len().saturating_sub(1)].iter().copied()).collect()
}

/// Output of [`generate_response`].
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub tokens: Vec<usize>,
    pub switch: SwitchVector,
    pub acts: Vec<DialogAct>,
}

/// Predicts acts for the history, thresholds them and decodes a response
/// under the predicted switch. Needs a graph-conditioned generator.
#[allow(clippy::too_many_arguments)]
pub fn generate_response(
    history: &[usize],
    side: &SideConditions,
    predictor: (&ActPredictor, &ParamStore),
    generator: (&Generator, &ParamStore),
    ont: &Ontology,
    threshold: f64,
    cfg: &GenerationConfig,
) -> Result<Generated> {
    let dist = predictor.0.distribution(predictor.1, history, side)?;
    let switch = threshold_decode(&dist, &ont.layer_sizes(), threshold)?;
    let acts = ont.decode_switch(&switch)?;
    let control = Control::Graph(switch.clone());
    let tokens = generator.0.decode(generator.1, history, &control, cfg)?;
    Ok(Generated { tokens, switch, acts })
}
