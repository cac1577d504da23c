//! Dialog turns, delexicalization and the synthetic corpus generator.
//!
//! Corpora are JSON lines, one [`DialogTurn`] per line. Placeholders are
//! written `<domain.slot>`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::act_graph::{DialogAct, Ontology, SwitchVector, NONE_LABEL};
use crate::act_predictor::{SideConditions, SideSchema, KB_BUCKETS};
use crate::encoder::history_ids;
use crate::vocab::{tokenize, Vocabulary, EOS};

mod multiwoz;
pub use multiwoz::{from_multiwoz, read_multiwoz, ImportStats};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    #[serde(default)]
    pub dialog: String,
    pub history: Vec<(Speaker, String)>,
    pub belief: Vec<u8>,
    pub kb: Vec<u8>,
    pub acts: Vec<String>,
    pub delex: Vec<String>,
    pub lex: String,
    pub values: BTreeMap<String, String>,
}

pub fn placeholder(domain: &str, slot: &str) -> String {
    format!("<{domain}.{slot}>")
}

/// Splits `<domain.slot>` into its parts.
pub fn placeholder_parts(token: &str) -> Option<(&str, &str)> {
    token.strip_prefix('<')?.strip_suffix('>')?.split_once('.')
}

pub fn is_placeholder(token: &str) -> bool {
    placeholder_parts(token).is_some()
}

/// Replaces surface values by their placeholders, longest match first and
/// scanning left to right, then returns the tokens.
pub fn delexicalize(text: &str, values: &BTreeMap<String, String>) -> Vec<String> {
    let tokens = tokenize(text);
    let mut surfaces: Vec<(Vec<String>, &str)> = values
        .iter()
        .map(|(ph, v)| (tokenize(v), ph.as_str()))
        .filter(|(v, _)| !v.is_empty())
        .collect();
    surfaces.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(b.1)));
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        match surfaces.iter().find(|(v, _)| tokens[i..].starts_with(v)) {
            Some((v, ph)) => {
                out.push(ph.to_string());
                i += v.len();
            }
            None => {
                out.push(tokens[i].clone());
                i += 1;
            }
        }
    }
    out
}

/// Substitutes mapped placeholders; unmapped ones are kept verbatim.
pub fn restore(tokens: &[String], values: &BTreeMap<String, String>) -> String {
    tokens
        .iter()
        .map(|t| values.get(t).map_or(t.as_str(), String::as_str))
        .collect::<Vec<_>>()
        .join(" ")
}

impl DialogTurn {
    pub fn parse_acts(&self, ont: &Ontology) -> Result<Vec<DialogAct>> {
        Ok(self.acts.iter().map(|a| ont.parse_act(a)).collect::<Result<Vec<_>, _>>()?)
    }

    pub fn switch(&self, ont: &Ontology) -> Result<SwitchVector> {
        Ok(ont.encode_acts(&self.parse_acts(ont)?)?)
    }

    pub fn side(&self) -> SideConditions {
        SideConditions {
            kb: self.kb.iter().map(|&b| b == 1).collect(),
            belief: self.belief.iter().map(|&b| b == 1).collect(),
        }
    }

    pub fn history_ids(&self, vocab: &Vocabulary) -> Vec<usize> {
        let encoded: Vec<(bool, Vec<usize>)> = self
            .history
            .iter()
            .map(|(s, text)| (*s == Speaker::User, vocab.encode(text)))
            .collect();
        history_ids(encoded.iter().map(|(u, ids)| (*u, ids.as_slice())))
    }

    /// Response ids followed by `[EOS]`.
    pub fn target_ids(&self, vocab: &Vocabulary) -> Vec<usize> {
        let mut ids = vocab.encode_tokens(&self.delex);
        ids.push(EOS);
        ids
    }

    /// Checks acts against the ontology, side-vector shapes and that every
    /// placeholder has a value.
    pub fn validate(&self, ont: &Ontology, schema: SideSchema) -> Result<()> {
        self.parse_acts(ont)?;
        if self.belief.iter().chain(&self.kb).any(|&b| b > 1) {
            return Err(Error::Data(format!("dialog {}: side bits must be 0 or 1", self.dialog)));
        }
        self.side().validate(schema)?;
        if let Some(ph) = self.delex.iter().find(|t| is_placeholder(t) && !self.values.contains_key(*t)) {
            return Err(Error::Data(format!("dialog {}: placeholder {ph} has no value", self.dialog)));
        }
        Ok(())
    }
}

pub fn write_jsonl(path: &Path, turns: &[DialogTurn]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in turns {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DialogTurn>> {
    let reader = BufReader::new(File::open(path)?);
    let mut turns = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let turn = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        turns.push(turn);
    }
    Ok(turns)
}

/// Reads a corpus and validates every turn.
pub fn load_corpus(path: &Path, ont: &Ontology) -> Result<Vec<DialogTurn>> {
    let schema = SideSchema::for_ontology(ont);
    let turns = read_jsonl(path)?;
    for (i, t) in turns.iter().enumerate() {
        t.validate(ont, schema)
            .map_err(|e| Error::Data(format!("{} turn {}: {e}", path.display(), i + 1)))?;
    }
    Ok(turns)
}

/// Training-split occurrence count of every act.
pub fn act_frequencies(turns: &[DialogTurn]) -> HashMap<String, usize> {
    let mut freq = HashMap::new();
    for t in turns {
        for a in &t.acts {
            *freq.entry(a.clone()).or_default() += 1;
        }
    }
    freq
}

/// Default response frames. `{d}`, `{s}` and `{P}` stand for the domain
/// label, the slot label and the placeholder; frame `i` serves action `i`.
pub const DEFAULT_FRAMES: [&str; 6] = [
    "the {d} {s} is {P} .",
    "what {s} would you like for the {d} ?",
    "i recommend {P} as the {d} {s} .",
    "i booked the {d} and the {s} is {P} .",
    "do you prefer {P} or another {d} {s} ?",
    "sorry there is no {d} with {s} {P} .",
];

/// Per action (indexed like [`DEFAULT_FRAMES`]): the user's intent word and
/// the KB match bucket of the acted-on domain. Neither alone identifies the
/// action; together they do. Later actions use their label and bucket 1.
const ACTION_SIGNALS: [(&str, usize); 6] = [("find", 1), ("book", 3), ("find", 2), ("book", 1), ("find", 3), ("find", 0)];
const TAILS: [&str; 4] = ["street", "house", "centre", "square"];

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    /// Must have three layers: domain, action, slot.
    pub ontology: Ontology,
    pub slots_per_domain: usize,
    pub frames: Vec<String>,
    /// Non-holdout turns across all splits.
    pub turns: usize,
    pub max_turns_per_dialog: usize,
    pub max_acts_per_turn: usize,
    /// Act `k` in the (shuffled) inventory is drawn with weight `(k+1)^-zipf`.
    pub zipf: f64,
    pub holdout: usize,
    pub holdout_turns_per_act: usize,
    /// Each component of a held-out act must occur this often in training.
    pub min_component_count: usize,
    pub values_per_slot: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(turns: usize, seed: u64) -> Self {
        Self {
            ontology: Ontology::canonical(),
            slots_per_domain: 6,
            frames: DEFAULT_FRAMES.iter().map(|s| s.to_string()).collect(),
            turns,
            max_turns_per_dialog: 3,
            max_acts_per_turn: 2,
            zipf: 1.0,
            holdout: 0,
            holdout_turns_per_act: 5,
            min_component_count: 100,
            values_per_slot: 5,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.ontology.num_layers() != 3 {
            return fail("the ontology needs exactly three layers");
        }
        if self.frames.is_empty() || self.slots_per_domain == 0 || self.values_per_slot == 0 {
            return fail("frames, slots per domain and values per slot must be non-empty");
        }
        if self.max_turns_per_dialog == 0 || self.max_acts_per_turn == 0 {
            return fail("dialogs need at least one turn and turns at least one act");
        }
        if !(0.0..1.0).contains(&(self.dev_fraction + self.test_fraction)) || self.dev_fraction < 0.0 || self.test_fraction < 0.0 {
            return fail("dev and test fractions must be non-negative and sum below 1");
        }
        if self.zipf < 0.0 || !self.zipf.is_finite() {
            return fail("zipf exponent must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub ontology: Ontology,
    pub inventory: Vec<DialogAct>,
    pub holdout: Vec<DialogAct>,
    pub train: Vec<DialogTurn>,
    pub dev: Vec<DialogTurn>,
    pub test: Vec<DialogTurn>,
}

struct Grammar<'a> {
    spec: &'a SyntheticSpec,
    ont: &'a Ontology,
}

impl Grammar<'_> {
    fn frame(&self, action: usize) -> String {
        let f = &self.spec.frames[action % self.spec.frames.len()];
        if action < self.spec.frames.len() {
            f.clone()
        } else {
            format!("{} : {f}", self.ont.layer(1)[action])
        }
    }

    fn sentence(&self, act: &DialogAct) -> String {
        let a = self.ont.index_of(1, act.action()).expect("inventory acts are valid");
        self.frame(a)
            .replace("{d}", act.domain())
            .replace("{s}", act.slot())
            .replace("{P}", &placeholder(act.domain(), act.slot()))
    }

    fn signal(&self, act: &DialogAct) -> (String, usize) {
        let a = self.ont.index_of(1, act.action()).expect("inventory acts are valid");
        match ACTION_SIGNALS.get(a) {
            Some(&(cue, bucket)) => (cue.to_string(), bucket),
            None => (self.ont.layer(1)[a].clone(), 1),
        }
    }

    fn user_phrase(&self, act: &DialogAct) -> String {
        format!("{} {} {}", self.signal(act).0, act.domain(), act.slot())
    }

    fn value(&self, domain: &str, slot: &str, k: usize) -> String {
        format!("{domain}{k} {slot} {}", TAILS[k % TAILS.len()])
    }
}

/// Generates the splits. Held-out acts never occur in train or dev; the test
/// split gets `holdout_turns_per_act` single-act turns for each of them.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let ont = &spec.ontology;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grammar = Grammar { spec, ont };

    let real = |l: usize| -> Vec<String> { ont.layer(l).iter().filter(|x| *x != NONE_LABEL).cloned().collect() };
    let (domains, actions, slots) = (real(0), real(1), real(2));
    if domains.is_empty() || actions.is_empty() || slots.is_empty() {
        return Err(Error::Config("synthetic spec: every layer needs a label other than none".into()));
    }
    let mut inventory = Vec::new();
    for d in &domains {
        let mut own = slots.clone();
        own.shuffle(&mut rng);
        own.truncate(spec.slots_per_domain);
        own.sort_by_key(|s| ont.index_of(2, s).expect("label from ontology"));
        for a in &actions {
            for s in &own {
                inventory.push(DialogAct::triplet(d, a, s));
            }
        }
    }
    let mut order: Vec<usize> = (0..inventory.len()).collect();
    order.shuffle(&mut rng);
    let mut weights = vec![0.0; inventory.len()];
    for (rank, &i) in order.iter().enumerate() {
        weights[i] = (rank as f64 + 1.0).powf(-spec.zipf);
    }

    let holdout = pick_holdout(spec, &inventory, &weights)?;
    let holdout_set: BTreeSet<&DialogAct> = holdout.iter().collect();
    let mut train_weights = weights.clone();
    for (i, a) in inventory.iter().enumerate() {
        if holdout_set.contains(a) {
            train_weights[i] = 0.0;
        }
    }
    let sampler = WeightedIndex::new(&train_weights).map_err(|e| Error::Config(format!("act weights: {e}")))?;
    // Every act of a turn shares the first act's action.
    let by_action: HashMap<&str, (Vec<usize>, WeightedIndex<f64>)> = actions
        .iter()
        .filter_map(|a| {
            let idx: Vec<usize> = (0..inventory.len()).filter(|&i| inventory[i].action() == a.as_str()).collect();
            let w = WeightedIndex::new(idx.iter().map(|&i| train_weights[i])).ok()?;
            Some((a.as_str(), (idx, w)))
        })
        .collect();

    let schema = SideSchema::for_ontology(ont);
    let mut dialogs: Vec<Vec<DialogTurn>> = Vec::new();
    let mut produced = 0;
    while produced < spec.turns {
        let len = rng.random_range(1..=spec.max_turns_per_dialog).min(spec.turns - produced);
        let plans: Vec<Vec<DialogAct>> = (0..len)
            .map(|_| {
                let k = rng.random_range(1..=spec.max_acts_per_turn);
                let first = sampler.sample(&mut rng);
                let (idx, w) = &by_action[inventory[first].action()];
                let mut acts = BTreeSet::from([first]);
                for _ in 1..k {
                    acts.insert(idx[w.sample(&mut rng)]);
                }
                acts.into_iter().map(|i| inventory[i].clone()).collect()
            })
            .collect();
        dialogs.push(realize_dialog(&grammar, schema, &format!("d{:05}", dialogs.len()), &plans, &mut rng)?);
        produced += len;
    }

    dialogs.shuffle(&mut rng);
    let n = dialogs.len();
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_dev = (n as f64 * spec.dev_fraction).round() as usize;
    let test: Vec<DialogTurn> = dialogs[..n_test].iter().flatten().cloned().collect();
    let dev: Vec<DialogTurn> = dialogs[n_test..n_test + n_dev].iter().flatten().cloned().collect();
    let train: Vec<DialogTurn> = dialogs[n_test + n_dev..].iter().flatten().cloned().collect();
    let mut test = test;

    if !holdout.is_empty() {
        let counts = component_counts(&train, ont)?;
        for act in &holdout {
            for (l, label) in act.labels().iter().enumerate() {
                let c = counts[l].get(label).copied().unwrap_or(0);
                if c < spec.min_component_count {
                    return Err(Error::Config(format!(
                        "synthetic spec: held-out act {act} has {} {label:?} only {c} times in training (need {})",
                        ont.layer_name(l),
                        spec.min_component_count
                    )));
                }
            }
        }
        for (h, act) in holdout.iter().enumerate() {
            for j in 0..spec.holdout_turns_per_act {
                let plans = vec![vec![act.clone()]];
                test.extend(realize_dialog(&grammar, schema, &format!("h{h:02}.{j}"), &plans, &mut rng)?);
            }
        }
    }

    Ok(SyntheticCorpus {
        ontology: ont.clone(),
        inventory,
        holdout,
        train,
        dev,
        test,
    })
}

/// Held-out acts, chosen greedily: each pick maximizes the smallest
/// remaining training mass among its components once it is removed, and its
/// (domain, slot) pair must keep another action in training.
fn pick_holdout(spec: &SyntheticSpec, inventory: &[DialogAct], weights: &[f64]) -> Result<Vec<DialogAct>> {
    let mut mass: [HashMap<&str, f64>; 3] = Default::default();
    for (a, &w) in inventory.iter().zip(weights) {
        for (l, label) in a.labels().iter().enumerate() {
            *mass[l].entry(label.as_str()).or_default() += w;
        }
    }
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < spec.holdout {
        let mut best: Option<(f64, usize)> = None;
        for (i, a) in inventory.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let has_sibling = inventory.iter().enumerate().any(|(j, b)| {
                j != i && !chosen.contains(&j) && b.domain() == a.domain() && b.slot() == a.slot()
            });
            if !has_sibling {
                continue;
            }
            let score = (0..3)
                .map(|l| mass[l][a.labels()[l].as_str()] - weights[i])
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, i));
            }
        }
        let Some((_, i)) = best else {
            return Err(Error::Config(format!(
                "synthetic spec: only {} acts qualify for holdout, {} requested",
                chosen.len(),
                spec.holdout
            )));
        };
        for (l, label) in inventory[i].labels().iter().enumerate() {
            *mass[l].get_mut(label.as_str()).expect("label counted") -= weights[i];
        }
        chosen.push(i);
    }
    let mut acts: Vec<DialogAct> = chosen.into_iter().map(|i| inventory[i].clone()).collect();
    acts.sort();
    Ok(acts)
}

fn component_counts(turns: &[DialogTurn], ont: &Ontology) -> Result<[HashMap<String, usize>; 3]> {
    let mut counts: [HashMap<String, usize>; 3] = Default::default();
    for t in turns {
        for a in t.parse_acts(ont)? {
            for (l, label) in a.labels().iter().enumerate() {
                *counts[l].entry(label.clone()).or_default() += 1;
            }
        }
    }
    Ok(counts)
}

fn realize_dialog(
    grammar: &Grammar,
    schema: SideSchema,
    id: &str,
    plans: &[Vec<DialogAct>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DialogTurn>> {
    let ont = grammar.ont;
    let mut history: Vec<(Speaker, String)> = Vec::new();
    let mut constrained: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut turns = Vec::with_capacity(plans.len());
    for acts in plans {
        let mut acts = acts.clone();
        acts.sort_by_key(|a| {
            (0..3)
                .map(|l| ont.index_of(l, &a.labels()[l]).expect("valid act"))
                .collect::<Vec<_>>()
        });
        let user = acts.iter().map(|a| grammar.user_phrase(a)).collect::<Vec<_>>().join(" and ");
        history.push((Speaker::User, user));

        let mut matches = vec![0usize; schema.domains];
        for a in &acts {
            let d = ont.index_of(0, a.domain())?;
            let s = ont.index_of(2, a.slot())?;
            constrained.insert((d, s));
            matches[d] = match grammar.signal(a).1 {
                0 => 0,
                1 => 1,
                2 => rng.random_range(2..=3),
                _ => rng.random_range(4..=6),
            };
        }
        let side = SideConditions::from_parts(schema, &matches, &constrained.iter().copied().collect::<Vec<_>>())?;

        let delex_text = acts.iter().map(|a| grammar.sentence(a)).collect::<Vec<_>>().join(" ");
        let delex = tokenize(&delex_text);
        let mut values = BTreeMap::new();
        for tok in &delex {
            if let Some((d, s)) = placeholder_parts(tok) {
                if !values.contains_key(tok) {
                    let k = rng.random_range(0..grammar.spec.values_per_slot);
                    values.insert(tok.clone(), grammar.value(d, s, k));
                }
            }
        }
        let lex = restore(&delex, &values);
        turns.push(DialogTurn {
            dialog: id.to_string(),
            history: history.clone(),
            belief: side.belief.iter().map(|&b| u8::from(b)).collect(),
            kb: side.kb.iter().map(|&b| u8::from(b)).collect(),
            acts: acts.iter().map(ToString::to_string).collect(),
            delex: delex.clone(),
            lex,
            values,
        });
        history.push((Speaker::System, delex_text));
    }
    debug_assert!(turns.iter().all(|t| t.kb.len() == schema.domains * KB_BUCKETS));
    Ok(turns)
}

/// Placeholders of `tokens` whose slot is not active in `switch` (last layer).
pub fn unlicensed_placeholders<'a>(tokens: &'a [String], switch: &SwitchVector, ont: &Ontology) -> Vec<&'a str> {
    let last = ont.num_layers() - 1;
    tokens
        .iter()
        .filter_map(|t| placeholder_parts(t).map(|(_, s)| (t.as_str(), s)))
        .filter(|(_, s)| ont.index_of(last, s).map_or(true, |i| !switch.segment(last)[i]))
        .map(|(t, _)| t)
        .collect()
}
