//! Mini-batch Adam training loops and the evaluation helpers they use.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::act_graph::{FlatInventory, Ontology, SwitchVector};
use crate::act_predictor::{threshold_decode, ActPredictor, SideConditions};
use crate::corpus::DialogTurn;
use crate::decoder::{teacher_inputs, Control, Generator};
use crate::numerics::{Adam, NumericsError, ParamStore, Tape, Var};
use crate::vocab::Vocabulary;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorExample {
    pub history: Vec<usize>,
    pub side: SideConditions,
    pub gold: SwitchVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorExample {
    pub history: Vec<usize>,
    pub control: Control,
    /// Response ids ending in `[EOS]`.
    pub target: Vec<usize>,
}

pub fn predictor_examples(turns: &[DialogTurn], vocab: &Vocabulary, ont: &Ontology) -> Result<Vec<PredictorExample>> {
    turns
        .iter()
        .map(|t| {
            Ok(PredictorExample {
                history: t.history_ids(vocab),
                side: t.side(),
                gold: t.switch(ont)?,
            })
        })
        .collect()
}

/// Examples conditioned on gold acts, as switch vectors or, with an
/// inventory, as flat vectors.
pub fn generator_examples(
    turns: &[DialogTurn],
    vocab: &Vocabulary,
    ont: &Ontology,
    flat: Option<&FlatInventory>,
) -> Result<Vec<GeneratorExample>> {
    turns
        .iter()
        .map(|t| {
            let control = match flat {
                None => Control::Graph(t.switch(ont)?),
                Some(inv) => Control::Flat(inv.encode(&t.parse_acts(ont)?)),
            };
            Ok(GeneratorExample {
                history: t.history_ids(vocab),
                control,
                target: t.target_ids(vocab),
            })
        })
        .collect()
}

/// Runs `steps` Adam updates on mean mini-batch losses. `loss` builds one
/// example's scalar loss on a tape; `on_step(step, mean_loss)` returning
/// `false` stops early. Returns the per-step mean losses.
pub fn train<T, L, C>(store: &mut ParamStore, examples: &[T], cfg: &TrainConfig, loss: L, mut on_step: C) -> Result<Vec<f64>>
where
    L: Fn(&mut Tape, &T) -> Result<Var>,
    C: FnMut(usize, f64, &ParamStore) -> Result<bool>,
{
    if examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let b = cfg.batch_size.min(examples.len());
        let mut total = 0.0;
        for _ in 0..b {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            let grads = {
                let mut tape = Tape::new(store);
                let l = loss(&mut tape, ex)?;
                total += tape.scalar(l);
                tape.backward(l)?
            };
            store.accumulate(&grads);
        }
        let mean = total / b as f64;
        if !mean.is_finite() {
            return Err(NumericsError::NonFiniteLoss(mean, step).into());
        }
        store.scale_grads(1.0 / b as f64);
        adam.step(store)?;
        history.push(mean);
        if !on_step(step, mean, store)? {
            break;
        }
    }
    Ok(history)
}

pub fn train_predictor<C>(
    model: &ActPredictor,
    store: &mut ParamStore,
    examples: &[PredictorExample],
    cfg: &TrainConfig,
    on_step: C,
) -> Result<Vec<f64>>
where
    C: FnMut(usize, f64, &ParamStore) -> Result<bool>,
{
    train(store, examples, cfg, |t, ex| model.loss(t, &ex.history, &ex.side, &ex.gold), on_step)
}

pub fn train_generator<C>(
    model: &Generator,
    store: &mut ParamStore,
    examples: &[GeneratorExample],
    cfg: &TrainConfig,
    on_step: C,
) -> Result<Vec<f64>>
where
    C: FnMut(usize, f64, &ParamStore) -> Result<bool>,
{
    train(store, examples, cfg, |t, ex| model.sequence_nll(t, &ex.history, &ex.control, &ex.target), on_step)
}

/// Teacher-forced next-token accuracy over all target positions.
pub fn token_accuracy(model: &Generator, store: &ParamStore, examples: &[GeneratorExample]) -> Result<f64> {
    let v = model.config().vocab_size();
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        let h = model.encode(store, &ex.history)?;
        let mut tape = Tape::inference(store);
        let rows = tape.constant(&h);
        let logits = model.forward(&mut tape, rows, &ex.control, &teacher_inputs(&ex.target))?;
        let vals = tape.value(logits);
        for (l, &y) in ex.target.iter().enumerate() {
            let row = &vals[l * v..(l + 1) * v];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &x)| if x > row[b] { i } else { b });
            hit += usize::from(best == y);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Micro-averaged F1 over switch bits.
pub fn switch_f1(predicted: &[SwitchVector], gold: &[SwitchVector]) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        for (&a, &b) in p.bits().iter().zip(g.bits()) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
    }
    if tp + fp + fnn == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
}

/// Thresholded predictions for every example.
pub fn predict_switches(
    model: &ActPredictor,
    store: &ParamStore,
    examples: &[PredictorExample],
    threshold: f64,
) -> Result<Vec<SwitchVector>> {
    examples
        .iter()
        .map(|ex| {
            let dist = model.distribution(store, &ex.history, &ex.side)?;
            threshold_decode(&dist, ex.gold.sizes(), threshold)
        })
        .collect()
}
