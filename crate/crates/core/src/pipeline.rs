//! Trained-model bundles: parameters plus everything needed to use them
//! (ontology, vocabulary, decoding defaults), stored as one checkpoint.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::act_graph::{DialogAct, FlatInventory, Ontology};
use crate::act_predictor::{ActPredictor, PredictorConfig, SideConditions, SideSchema};
use crate::corpus::DialogTurn;
use crate::decoder::{Conditioning, Control, GenerationConfig, Generator, GeneratorConfig};
use crate::dsa::HdsaConfig;
use crate::encoder::EncoderConfig;
use crate::nn::Builder;
use crate::numerics::{check_gradients, load_checkpoint, save_checkpoint, GradCheckReport, ParamStore, Tape};
use crate::vocab::{Vocabulary, EOS};
use crate::{Error, Result};

/// Default decision threshold for act prediction.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Vocabulary over history texts and delexicalized responses.
pub fn corpus_vocabulary(turns: &[DialogTurn], max_size: usize) -> Vocabulary {
    let texts: Vec<String> = turns
        .iter()
        .flat_map(|t| t.history.iter().map(|(_, s)| s.clone()).chain([t.delex.join(" ")]))
        .collect();
    Vocabulary::build(texts.iter().map(String::as_str), max_size)
}

fn vocab_tokens(v: &Vocabulary) -> Vec<String> {
    (0..v.len()).map(|i| v.token(i).to_string()).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PredictorManifest {
    kind: String,
    layers: usize,
    heads: Vec<usize>,
    config: PredictorConfig,
    ontology: String,
    vocab: Vec<String>,
    threshold: f64,
    step: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GeneratorManifest {
    kind: String,
    layers: usize,
    heads: Vec<usize>,
    config: GeneratorConfig,
    ontology: String,
    vocab: Vec<String>,
    inventory: Option<String>,
    beam: usize,
    max_len: usize,
    step: usize,
}

pub struct PredictorModel {
    pub model: ActPredictor,
    pub store: ParamStore,
    pub ontology: Ontology,
    pub vocab: Vocabulary,
    pub threshold: f64,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl PredictorModel {
    pub fn new(encoder: EncoderConfig, ontology: Ontology, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let cfg = PredictorConfig {
            encoder,
            side: SideSchema::for_ontology(&ontology),
            nodes: ontology.total_nodes(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = ActPredictor::build(&cfg, &mut Builder::init(&mut store, &mut rng))?;
        Ok(Self {
            model,
            store,
            ontology,
            vocab,
            threshold: DEFAULT_THRESHOLD,
            step: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = PredictorManifest {
            kind: "predictor".into(),
            layers: self.ontology.num_layers(),
            heads: self.ontology.layer_sizes(),
            config: self.model.config().clone(),
            ontology: self.ontology.to_text(),
            vocab: vocab_tokens(&self.vocab),
            threshold: self.threshold,
            step: self.step,
        };
        save_checkpoint(path, &serde_json::to_value(m)?, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let m: PredictorManifest = serde_json::from_value(ck.manifest)?;
        if m.kind != "predictor" {
            return Err(Error::Data(format!("{} holds a {} checkpoint, not a predictor", path.display(), m.kind)));
        }
        let mut store = ck.params;
        let model = ActPredictor::build(&m.config, &mut Builder::bind(&mut store))?;
        Ok(Self {
            model,
            store,
            ontology: Ontology::parse(&m.ontology)?,
            vocab: Vocabulary::from_tokens(m.vocab)?,
            threshold: m.threshold,
            step: m.step,
        })
    }
}

pub struct GeneratorModel {
    pub model: Generator,
    pub store: ParamStore,
    pub ontology: Ontology,
    pub vocab: Vocabulary,
    /// Present for flat-conditioned baselines.
    pub inventory: Option<FlatInventory>,
    pub generation: GenerationConfig,
    pub step: usize,
}

impl GeneratorModel {
    /// Generator whose DSA layers follow the ontology's layer sizes, one head
    /// per node, sharing the encoder's width and feed-forward size.
    pub fn new(
        encoder: EncoderConfig,
        ontology: Ontology,
        vocab: Vocabulary,
        inventory: Option<FlatInventory>,
        residual: bool,
        seed: u64,
    ) -> Result<Self> {
        let hdsa = HdsaConfig::from_heads(&ontology.layer_sizes(), encoder.model_dim)
            .with_ffn_dim(encoder.ffn_dim)
            .with_residual(residual);
        let conditioning = match &inventory {
            None => Conditioning::Graph,
            Some(inv) => Conditioning::Flat { inventory: inv.len() },
        };
        let cfg = GeneratorConfig {
            encoder,
            hdsa,
            conditioning,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Generator::build(&cfg, &mut Builder::init(&mut store, &mut rng))?;
        Ok(Self {
            model,
            store,
            ontology,
            vocab,
            inventory,
            generation: GenerationConfig::default(),
            step: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = self.model.config();
        let m = GeneratorManifest {
            kind: "generator".into(),
            layers: cfg.hdsa.layers.len(),
            heads: cfg.hdsa.head_counts(),
            config: cfg.clone(),
            ontology: self.ontology.to_text(),
            vocab: vocab_tokens(&self.vocab),
            inventory: self.inventory.as_ref().map(FlatInventory::to_text),
            beam: self.generation.beam_size,
            max_len: self.generation.max_len,
            step: self.step,
        };
        save_checkpoint(path, &serde_json::to_value(m)?, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let m: GeneratorManifest = serde_json::from_value(ck.manifest)?;
        if m.kind != "generator" {
            return Err(Error::Data(format!("{} holds a {} checkpoint, not a generator", path.display(), m.kind)));
        }
        let mut store = ck.params;
        let model = Generator::build(&m.config, &mut Builder::bind(&mut store))?;
        Ok(Self {
            model,
            store,
            ontology: Ontology::parse(&m.ontology)?,
            vocab: Vocabulary::from_tokens(m.vocab)?,
            inventory: m.inventory.as_deref().map(FlatInventory::parse).transpose()?,
            generation: GenerationConfig {
                beam_size: m.beam,
                max_len: m.max_len,
            },
            step: m.step,
        })
    }

    /// Act input for a turn's gold acts.
    pub fn control_for(&self, turn: &DialogTurn) -> Result<Control> {
        self.control_from_acts(&turn.parse_acts(&self.ontology)?)
    }

    pub fn control_from_acts(&self, acts: &[DialogAct]) -> Result<Control> {
        Ok(match &self.inventory {
            None => Control::Graph(self.ontology.encode_acts(acts)?),
            Some(inv) => Control::Flat(inv.encode(acts)),
        })
    }

    /// Decoded response tokens (placeholders kept).
    pub fn respond(&self, history: &[usize], control: &Control) -> Result<Vec<String>> {
        let ids = self.model.decode(&self.store, history, control, &self.generation)?;
        Ok(ids.iter().map(|&i| self.vocab.token(i).to_string()).collect())
    }
}

/// Gradient check of a small end-to-end model: a one-layer history encoder
/// feeding the act predictor, and a one-layer encoder plus one DSA layer
/// generator. The loss is the predictor's cross-entropy plus the
/// generator's sequence NLL.
pub fn end_to_end_gradient_check(seed: u64, residual: bool, h: f64, tol: f64) -> Result<GradCheckReport> {
    let ont = Ontology::new(vec![vec!["a".into(), "b".into(), "c".into()]])?;
    let encoder = EncoderConfig {
        layers: 1,
        model_dim: 8,
        heads: 2,
        head_dim: 4,
        ffn_dim: 12,
        max_len: 32,
        vocab_size: 12,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let pcfg = PredictorConfig {
        encoder: encoder.clone(),
        side: SideSchema::for_ontology(&ont),
        nodes: ont.total_nodes(),
    };
    let gcfg = GeneratorConfig {
        encoder: encoder.clone(),
        hdsa: HdsaConfig::from_heads(&[3], 8)
            .with_ffn_dim(12)
            .with_value_dim(4)
            .with_residual(residual),
        conditioning: Conditioning::Graph,
    };
    let mut b = Builder::init(&mut store, &mut rng);
    let predictor = ActPredictor::build(&pcfg, &mut b)?;
    let generator = Generator::build(&gcfg, &mut b)?;
    let side = SideConditions::from_parts(pcfg.side, &[2, 0, 5], &[(0, 0), (2, 0)])?;
    let gold = ont.encode_acts(&[ont.parse_act("a")?, ont.parse_act("c")?])?;
    let control = Control::Graph(gold.clone());
    let history = [5, 7, 8, 9, 6, 10];
    let target = [11, 7, EOS];
    check_gradients(
        &mut store,
        |t: &mut Tape| {
            let p = predictor.loss(t, &history, &side, &gold)?;
            let g = generator.sequence_nll(t, &history, &control, &target)?;
            Ok::<_, Error>(t.add(p, g)?)
        },
        h,
        tol,
    )
}
