use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdsa::act_graph::{FlatInventory, Ontology, SwitchVector};
use hdsa::act_predictor::threshold_decode;
use hdsa::corpus::{
    act_frequencies, generate_synthetic, load_corpus, read_multiwoz, write_jsonl, DialogTurn, SyntheticSpec,
};
use hdsa::decoder::GenerationConfig;
use hdsa::encoder::EncoderConfig;
use hdsa::metrics::{bucket_bleu, EvalReport};
use hdsa::pipeline::{corpus_vocabulary, end_to_end_gradient_check, GeneratorModel, PredictorModel, DEFAULT_THRESHOLD};
use hdsa::training::{generator_examples, predictor_examples, switch_f1, train_generator, train_predictor, TrainConfig};
use hdsa::vocab::tokenize;
use hdsa::Error;

/// Act-conditioned response generation: data synthesis, training,
/// decoding and evaluation.
#[derive(Parser)]
#[command(name = "hdsa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (train/dev/test JSONL plus the ontology).
    SynthData(SynthArgs),
    /// Train the multi-label act predictor.
    TrainPredictor(TrainPredictorArgs),
    /// Train the act-conditioned response generator.
    TrainGenerator(TrainGeneratorArgs),
    /// Print predicted acts for every turn of a corpus.
    PredictActs(PredictArgs),
    /// Decode one delexicalized response per corpus turn.
    Generate(GenerateArgs),
    /// Score candidate responses against a corpus.
    Evaluate(EvaluateArgs),
    /// BLEU per act-frequency bucket.
    BucketAnalysis(BucketArgs),
    /// Generate from hand-picked acts and echo the decoded act list.
    DemoControl(DemoArgs),
    /// Finite-difference gradient check of a small end-to-end model.
    CheckGrads(CheckGradsArgs),
    /// Convert a MultiWOZ-style data.json into corpus JSONL (best effort).
    ImportMultiwoz(ImportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    turns: usize,
    /// Number of act triplets withheld from training.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Encoder layers.
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Encoder attention heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 256)]
    ffn: usize,
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    #[arg(long, default_value_t = 5000)]
    max_vocab: usize,
}

impl ModelArgs {
    fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            model_dim: self.dim,
            heads: self.heads,
            head_dim: self.head_dim,
            ffn_dim: self.ffn,
            max_len: self.max_len,
            vocab_size,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    ontology: PathBuf,
    /// Checkpoint written at the end (and every `--save-every` steps).
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    save_every: usize,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct TrainPredictorArgs {
    #[command(flatten)]
    common: TrainArgs,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct TrainGeneratorArgs {
    #[command(flatten)]
    common: TrainArgs,
    /// Condition on a flat one-hot act vector instead of the act graph.
    #[arg(long)]
    flat: bool,
    /// Residual paths around each DSA layer's shared stack.
    #[arg(long)]
    residual: bool,
    #[arg(long, default_value_t = 2)]
    beam: usize,
    #[arg(long, default_value_t = 60)]
    max_decode: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Overrides the threshold stored in the checkpoint.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Condition on predicted acts from this model instead of gold acts.
    #[arg(long)]
    predictor: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_decode: Option<usize>,
    /// Candidate file, one response per line; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ontology: PathBuf,
    /// One delexicalized response per line, aligned with `--data`.
    #[arg(long)]
    candidates: PathBuf,
    /// Training corpus for act frequencies; without it every act is unseen.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    tsv: bool,
    /// Report file; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BucketArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ontology: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    train: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    generator: PathBuf,
    /// Act triplet such as `hotel-inform-name`; repeat for several.
    #[arg(long = "act", required = true)]
    acts: Vec<String>,
    /// Dialog history text.
    #[arg(long, default_value = "")]
    history: String,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct CheckGradsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long)]
    residual: bool,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    input: PathBuf,
    /// Ontology file; the canonical ontology when absent.
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Lib(Error),
    GradCheck(String),
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Lib(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(Error::Config(_)) => 1,
            Failure::Lib(Error::Numerics(_)) | Failure::GradCheck(_) => 3,
            Failure::Lib(_) => 2,
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::TrainPredictor(a) => train_predictor_cmd(a),
        Command::TrainGenerator(a) => train_generator_cmd(a),
        Command::PredictActs(a) => predict_acts(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::BucketAnalysis(a) => bucket_analysis(a),
        Command::DemoControl(a) => demo_control(a),
        Command::CheckGrads(a) => check_grads(a),
        Command::ImportMultiwoz(a) => import_multiwoz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::GradCheck(m) => eprintln!("gradient check failed: {m}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn read_ontology(path: &Path) -> Result<Ontology, Error> {
    Ok(Ontology::parse(&fs::read_to_string(path)?)?)
}

fn write_output(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn read_candidates(path: &Path, turns: usize) -> Result<Vec<Vec<String>>, Error> {
    let text = fs::read_to_string(path)?;
    let c: Vec<Vec<String>> = text.lines().map(tokenize).collect();
    if c.len() != turns {
        return Err(Error::Data(format!("{} has {} lines for {turns} turns", path.display(), c.len())));
    }
    Ok(c)
}

fn synth_data(a: SynthArgs) -> Outcome {
    let mut spec = SyntheticSpec::new(a.turns, a.seed);
    spec.holdout = a.holdout;
    let c = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("ontology.txt"), c.ontology.to_text())?;
    write_jsonl(&a.out.join("train.jsonl"), &c.train)?;
    write_jsonl(&a.out.join("dev.jsonl"), &c.dev)?;
    write_jsonl(&a.out.join("test.jsonl"), &c.test)?;
    let held: String = c.holdout.iter().map(|x| format!("{x}\n")).collect();
    fs::write(a.out.join("holdout.txt"), held)?;
    println!(
        "train {} dev {} test {} inventory {} holdout {}",
        c.train.len(),
        c.dev.len(),
        c.test.len(),
        c.inventory.len(),
        c.holdout.len()
    );
    Ok(())
}

fn train_config(a: &TrainArgs, done: usize) -> TrainConfig {
    TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        // A resumed run draws a fresh batch order rather than replaying the first one.
        seed: a.seed.wrapping_add(done as u64),
    }
}

fn train_predictor_cmd(a: TrainPredictorArgs) -> Outcome {
    let c = &a.common;
    let ont = read_ontology(&c.ontology)?;
    let turns = load_corpus(&c.train, &ont)?;
    let mut m = match &c.resume {
        Some(p) => PredictorModel::load(p)?,
        None => {
            let vocab = corpus_vocabulary(&turns, c.model.max_vocab);
            PredictorModel::new(c.model.encoder(vocab.len()), ont, vocab, c.seed)?
        }
    };
    if !(0.0..1.0).contains(&a.threshold) || a.threshold == 0.0 {
        return Err(Error::Config(format!("threshold {} outside (0, 1)", a.threshold)).into());
    }
    m.threshold = a.threshold;
    let ex = predictor_examples(&turns, &m.vocab, &m.ontology)?;
    let start = m.step;
    let tc = train_config(c, start);
    let mut store = std::mem::take(&mut m.store);
    let res = train_predictor(&m.model, &mut store, &ex, &tc, |s, loss, st| {
        log_and_save(c, s, loss, || {
            let snapshot = PredictorModel {
                model: m.model.clone(),
                store: st.clone(),
                ontology: m.ontology.clone(),
                vocab: m.vocab.clone(),
                threshold: m.threshold,
                step: start + s,
            };
            snapshot.save(&c.out)
        })
    });
    m.store = store;
    let steps = res?.len();
    m.step = start + steps;
    m.save(&c.out)?;
    println!("saved {} after {} steps", c.out.display(), m.step);
    Ok(())
}

fn train_generator_cmd(a: TrainGeneratorArgs) -> Outcome {
    let c = &a.common;
    let ont = read_ontology(&c.ontology)?;
    let turns = load_corpus(&c.train, &ont)?;
    let mut m = match &c.resume {
        Some(p) => GeneratorModel::load(p)?,
        None => {
            let vocab = corpus_vocabulary(&turns, c.model.max_vocab);
            let inventory = if a.flat {
                let acts = turns
                    .iter()
                    .map(|t| t.parse_acts(&ont))
                    .collect::<Result<Vec<_>, _>>()?
                    .concat();
                Some(FlatInventory::from_observed(acts.iter()))
            } else {
                None
            };
            GeneratorModel::new(c.model.encoder(vocab.len()), ont, vocab, inventory, a.residual, c.seed)?
        }
    };
    m.generation = GenerationConfig {
        beam_size: a.beam,
        max_len: a.max_decode,
    };
    m.generation.validate()?;
    let ex = generator_examples(&turns, &m.vocab, &m.ontology, m.inventory.as_ref())?;
    let start = m.step;
    let tc = train_config(c, start);
    let mut store = std::mem::take(&mut m.store);
    let res = train_generator(&m.model, &mut store, &ex, &tc, |s, loss, st| {
        log_and_save(c, s, loss, || {
            let snapshot = GeneratorModel {
                model: m.model.clone(),
                store: st.clone(),
                ontology: m.ontology.clone(),
                vocab: m.vocab.clone(),
                inventory: m.inventory.clone(),
                generation: m.generation,
                step: start + s,
            };
            snapshot.save(&c.out)
        })
    });
    m.store = store;
    let steps = res?.len();
    m.step = start + steps;
    m.save(&c.out)?;
    println!("saved {} after {} steps", c.out.display(), m.step);
    Ok(())
}

fn log_and_save(c: &TrainArgs, step: usize, loss: f64, save: impl FnOnce() -> Result<(), Error>) -> Result<bool, Error> {
    if c.log_every > 0 && step.is_multiple_of(c.log_every) {
        eprintln!("step {step} loss {loss:.5}");
    }
    if c.save_every > 0 && step.is_multiple_of(c.save_every) && step < c.steps {
        save()?;
    }
    Ok(true)
}

fn predict_acts(a: PredictArgs) -> Outcome {
    let m = PredictorModel::load(&a.model)?;
    let threshold = a.threshold.unwrap_or(m.threshold);
    let turns = load_corpus(&a.data, &m.ontology)?;
    let sizes = m.ontology.layer_sizes();
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    let mut out = String::new();
    for t in &turns {
        let dist = m.model.distribution(&m.store, &t.history_ids(&m.vocab), &t.side())?;
        let sv = threshold_decode(&dist, &sizes, threshold)?;
        let acts: Vec<String> = m.ontology.decode_switch(&sv)?.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "{}\t{}\t{}", t.dialog, sv.render(), acts.join(" "));
        pred.push(sv);
        gold.push(t.switch(&m.ontology)?);
    }
    print!("{out}");
    eprintln!("switch F1 {:.4} at threshold {threshold}", switch_f1(&pred, &gold));
    Ok(())
}

fn generate(a: GenerateArgs) -> Outcome {
    let mut g = GeneratorModel::load(&a.generator)?;
    if let Some(b) = a.beam {
        g.generation.beam_size = b;
    }
    if let Some(l) = a.max_decode {
        g.generation.max_len = l;
    }
    g.generation.validate()?;
    let turns = load_corpus(&a.data, &g.ontology)?;
    let predictor = a.predictor.as_deref().map(PredictorModel::load).transpose()?;
    if let Some(p) = &predictor {
        if p.ontology != g.ontology {
            return Err(Error::Data("predictor and generator ontologies differ".into()).into());
        }
    }
    let mut out = String::new();
    for t in &turns {
        let control = match &predictor {
            None => g.control_for(t)?,
            Some(p) => {
                let dist = p.model.distribution(&p.store, &t.history_ids(&p.vocab), &t.side())?;
                let sv = threshold_decode(&dist, &p.ontology.layer_sizes(), a.threshold.unwrap_or(p.threshold))?;
                g.control_from_acts(&p.ontology.decode_switch(&sv)?)?
            }
        };
        let _ = writeln!(out, "{}", g.respond(&t.history_ids(&g.vocab), &control)?.join(" "));
    }
    write_output(a.out.as_deref(), &out)
}

fn train_frequencies(path: Option<&Path>, ont: &Ontology) -> Result<HashMap<String, usize>, Error> {
    Ok(match path {
        Some(p) => act_frequencies(&load_corpus(p, ont)?),
        None => HashMap::new(),
    })
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let ont = read_ontology(&a.ontology)?;
    let turns = load_corpus(&a.data, &ont)?;
    let cands = read_candidates(&a.candidates, turns.len())?;
    let freq = train_frequencies(a.train.as_deref(), &ont)?;
    let report = EvalReport::compute(&turns, &cands, &freq)?;
    let text = if a.tsv { report.to_tsv() } else { report.to_text() };
    write_output(a.report.as_deref(), &text)
}

fn bucket_analysis(a: BucketArgs) -> Outcome {
    let ont = read_ontology(&a.ontology)?;
    let turns: Vec<DialogTurn> = load_corpus(&a.data, &ont)?;
    let cands = read_candidates(&a.candidates, turns.len())?;
    let freq = train_frequencies(Some(&a.train), &ont)?;
    let refs: Vec<Vec<String>> = turns.iter().map(|t| t.delex.clone()).collect();
    let acts: Vec<Vec<String>> = turns.iter().map(|t| t.acts.clone()).collect();
    let mut out = String::from("bucket\tturns\tbleu\n");
    for b in bucket_bleu(&cands, &refs, &acts, &freq)? {
        let _ = writeln!(out, "{}\t{}\t{:.4}", b.bucket.label(), b.turns, b.bleu);
    }
    print!("{out}");
    Ok(())
}

fn demo_control(a: DemoArgs) -> Outcome {
    let mut g = GeneratorModel::load(&a.generator)?;
    if let Some(b) = a.beam {
        g.generation.beam_size = b;
    }
    let ont = &g.ontology;
    let acts = a.acts.iter().map(|s| ont.parse_act(s)).collect::<Result<Vec<_>, _>>()?;
    let singles = acts.iter().map(|x| ont.encode_act(x)).collect::<Result<Vec<_>, _>>()?;
    let switch = SwitchVector::aggregate(&ont.layer_sizes(), &singles)?;
    let decoded: Vec<String> = ont.decode_switch(&switch)?.iter().map(ToString::to_string).collect();
    let history = g.vocab.encode(&a.history);
    let control = g.control_from_acts(&acts)?;
    let response = g.respond(&history, &control)?;
    println!("switch {}", switch.render());
    println!("acts {}", decoded.join(" "));
    println!("response {}", response.join(" "));
    Ok(())
}

fn check_grads(a: CheckGradsArgs) -> Outcome {
    let r = end_to_end_gradient_check(a.seed, a.residual, a.step, a.tolerance)?;
    for p in &r.params {
        println!("{}\t{}\t{:.3e}", p.name, p.checked, p.max_rel_error);
    }
    println!("max relative error {:.3e} (tolerance {:.1e})", r.max_rel_error(), r.tolerance);
    if r.passed() {
        Ok(())
    } else {
        let w = r.worst().map(|w| w.name.clone()).unwrap_or_default();
        Err(Failure::GradCheck(format!("worst parameter {w}")))
    }
}

fn import_multiwoz(a: ImportArgs) -> Outcome {
    let ont = match &a.ontology {
        Some(p) => read_ontology(p)?,
        None => Ontology::canonical(),
    };
    let (turns, stats) = read_multiwoz(&a.input, &ont)?;
    write_jsonl(&a.out, &turns)?;
    println!("dialogs {} turns {} dropped acts {}", stats.dialogs, stats.turns, stats.dropped_acts);
    Ok(())
}
