//! End-to-end acceptance checks. Criteria run one after another in a single
//! test so their runtimes are measured without interference; run with
//! `--nocapture` to see the per-criterion lines. `ACCEPTANCE_ONLY=3,5`
//! restricts the run to the listed criteria.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use hdsa::act_graph::{FlatInventory, Ontology, SwitchVector};
use hdsa::act_predictor::{threshold_decode, ActDistribution, ActPredictor, PredictorConfig, SideSchema};
use hdsa::corpus::{
    act_frequencies, delexicalize, generate_synthetic, restore, unlicensed_placeholders, DialogTurn, SyntheticCorpus,
    SyntheticSpec,
};
use hdsa::decoder::{
    beam_search, greedy_decode, log_softmax, Conditioning, Control, GenerationConfig, Generator, GeneratorConfig,
};
use hdsa::dsa::{DsaLayer, DsaLayerConfig, HdsaConfig, LayerSwitch};
use hdsa::encoder::EncoderConfig;
use hdsa::metrics::{bleu, BleuStats, EvalReport};
use hdsa::nn::Builder;
use hdsa::numerics::{ParamStore, Tape, Tensor};
use hdsa::pipeline::{corpus_vocabulary, end_to_end_gradient_check};
use hdsa::training::{
    generator_examples, predict_switches, predictor_examples, switch_f1, token_accuracy, train_generator,
    train_predictor, GeneratorExample, TrainConfig,
};
use hdsa::vocab::{tokenize, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(t: &Instant, budget: Duration) -> Result<(), String> {
    ensure(t.elapsed() <= budget, || format!("took {:.0?}, budget {budget:?}", t.elapsed()))
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tokens_of(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| vocab.token(i).to_string()).collect()
}

fn decode_all(g: &Generator, store: &ParamStore, vocab: &Vocabulary, ex: &[GeneratorExample]) -> Result<Vec<Vec<String>>, String> {
    let cfg = GenerationConfig::default();
    ex.iter()
        .map(|e| Ok(tokens_of(vocab, &g.decode(store, &e.history, &e.control, &cfg).map_err(err)?)))
        .collect()
}

fn canonical_generator(vocab: usize, residual: bool, conditioning: Conditioning, seed: u64) -> Result<(Generator, ParamStore), String> {
    let cfg = GeneratorConfig {
        encoder: EncoderConfig::standard(vocab),
        hdsa: HdsaConfig::canonical().with_residual(residual),
        conditioning,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let g = Generator::build(&cfg, &mut Builder::init(&mut store, &mut rng)).map_err(err)?;
    Ok((g, store))
}

fn tiny_generator(seed: u64) -> (Generator, ParamStore) {
    let cfg = GeneratorConfig {
        encoder: EncoderConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            head_dim: 4,
            ffn_dim: 16,
            max_len: 32,
            vocab_size: 15,
        },
        hdsa: HdsaConfig::from_heads(&[3, 2, 4], 8).with_ffn_dim(16).with_value_dim(4),
        conditioning: Conditioning::Graph,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let g = Generator::build(&cfg, &mut Builder::init(&mut store, &mut rng)).unwrap();
    (g, store)
}

// 1 -------------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for residual in [false, true] {
        let r = end_to_end_gradient_check(1, residual, 1e-5, 1e-3).map_err(err)?;
        let w = r.worst().cloned();
        ensure(r.passed(), || format!("residual={residual}: {w:?}"))?;
        worst = worst.max(r.max_rel_error());
    }
    within(&t, Duration::from_secs(120))?;
    Ok(format!("max relative error {worst:.2e} over every parameter, {:.1?}", t.elapsed()))
}

// 2 -------------------------------------------------------------------------

fn run_layer(store: &ParamStore, layer: &DsaLayer, x: &Tensor, hist: &Tensor, on: &[usize]) -> Tensor {
    let mut tape = Tape::inference(store);
    let xv = tape.constant(x);
    let hv = tape.constant(hist);
    let h = layer.config().heads;
    let out = layer.forward(&mut tape, xv, hv, &LayerSwitch::from_indices(h, on), true).unwrap();
    tape.tensor(out)
}

fn gating_exactness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut pairs, mut splits, mut general_worst) = (0, 0, 0.0f64);
    for residual in [false, true] {
        let mut cfg = DsaLayerConfig::with_heads(10, 64);
        cfg.residual = residual;
        let mut store = ParamStore::new();
        let layer = DsaLayer::build(&cfg, "dsa", &mut Builder::init(&mut store, &mut rng)).map_err(err)?;
        let x = random_tensor(&mut rng, 5, 64);
        let hist = random_tensor(&mut rng, 7, 64);

        // (a)
        let zero = run_layer(&store, &layer, &x, &hist, &[]);
        ensure(zero.data().iter().all(|&v| v.to_bits() == 0), || "zero switch gave a non-zero entry".into())?;

        // (b) every pair of single heads, and every set extended by a later head.
        let singles: Vec<Tensor> = (0..10).map(|i| run_layer(&store, &layer, &x, &hist, &[i])).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                let both = run_layer(&store, &layer, &x, &hist, &[i, j]);
                let sum: Vec<f64> = singles[i].data().iter().zip(singles[j].data()).map(|(a, b)| a + b).collect();
                ensure(both.data() == sum.as_slice(), || format!("heads {i} + {j} not bitwise additive"))?;
                pairs += 1;
            }
        }
        for _ in 0..30 {
            let mut heads: Vec<usize> = (0..10).collect();
            heads.shuffle(&mut rng);
            let k = rng.random_range(1..9);
            let mut s1 = heads[..k].to_vec();
            s1.sort();
            let next = (s1[s1.len() - 1] + 1..10).collect::<Vec<_>>();
            let Some(&j) = next.first() else { continue };
            let g1 = run_layer(&store, &layer, &x, &hist, &s1);
            let mut union = s1.clone();
            union.push(j);
            let gu = run_layer(&store, &layer, &x, &hist, &union);
            let sum: Vec<f64> = g1.data().iter().zip(singles[j].data()).map(|(a, b)| a + b).collect();
            ensure(gu.data() == sum.as_slice(), || format!("{s1:?} + [{j}] not bitwise additive"))?;
            splits += 1;
        }
        // Arbitrary disjoint splits regroup a floating-point sum, so only
        // agreement to rounding is possible there.
        for _ in 0..30 {
            let mut heads: Vec<usize> = (0..10).collect();
            heads.shuffle(&mut rng);
            let k = rng.random_range(1..9);
            let m = rng.random_range(k + 1..=10);
            let (s1, s2) = (&heads[..k], &heads[k..m]);
            let mut u = heads[..m].to_vec();
            u.sort();
            let g1 = run_layer(&store, &layer, &x, &hist, s1);
            let g2 = run_layer(&store, &layer, &x, &hist, s2);
            let gu = run_layer(&store, &layer, &x, &hist, &u);
            for ((a, b), c) in g1.data().iter().zip(g2.data()).zip(gu.data()) {
                general_worst = general_worst.max((a + b - c).abs() / c.abs().max(1.0));
            }
        }
        ensure(general_worst <= 1e-12, || format!("general disjoint split error {general_worst:e}"))?;
    }

    // (c) on the full canonical decoder: heads switched off in every layer.
    let ont = Ontology::canonical();
    let (g, mut store) = canonical_generator(40, false, Conditioning::Graph, 5)?;
    let acts = [ont.parse_act("hotel-inform-name").map_err(err)?, ont.parse_act("train-request-leaveat").map_err(err)?];
    let a = ont.encode_acts(&acts).map_err(err)?;
    let hist = g.encode(&store, &[7, 9, 11, 13]).map_err(err)?;
    let logits = |store: &ParamStore| {
        let mut tape = Tape::inference(store);
        let h = tape.constant(&hist);
        let out = g.forward(&mut tape, h, &Control::Graph(a.clone()), &[1, 20, 21, 22]).unwrap();
        tape.tensor(out)
    };
    let before = logits(&store);
    let mut perturbed = 0;
    for (l, layer) in g.hdsa().layers().iter().enumerate() {
        for (i, &on) in a.segment(l).iter().enumerate() {
            if on {
                continue;
            }
            for id in layer.head_param_ids(i) {
                store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
            }
            perturbed += 1;
        }
    }
    ensure(logits(&store) == before, || "inactive-head perturbation changed the output".into())?;
    Ok(format!(
        "zero switch exact; {pairs} head pairs and {splits} ordered splits bitwise additive, arbitrary splits within {general_worst:.1e}; {perturbed} inactive heads perturbed, output bitwise unchanged; {:.1?}",
        t.elapsed()
    ))
}

// 3 -------------------------------------------------------------------------

fn causal_mask() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let sizes = [3, 2, 4];
    for case in 0..50 {
        let (g, store) = tiny_generator(case);
        let hlen = rng.random_range(1..8);
        let history: Vec<usize> = (0..hlen).map(|_| rng.random_range(5..15)).collect();
        let hist = g.encode(&store, &history).map_err(err)?;
        let bits: Vec<bool> = (0..9).map(|_| rng.random_bool(0.6)).collect();
        let sv = SwitchVector::from_bits(&sizes, bits).map_err(err)?;
        let control = Control::Graph(sv);
        let n = rng.random_range(2..10);
        let l = rng.random_range(1..n);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..15)).collect();
        let mut z = y.clone();
        for tok in &mut z[l..] {
            *tok = (*tok + rng.random_range(1..15)) % 15;
        }
        let run = |inputs: &[usize]| {
            let mut tape = Tape::inference(&store);
            let h = tape.constant(&hist);
            let out = g.forward(&mut tape, h, &control, inputs).unwrap();
            tape.value(out).to_vec()
        };
        let (a, b) = (run(&y), run(&z));
        let width = a.len() / n;
        ensure(a[..l * width] == b[..l * width], || format!("case {case}: rows before {l} changed"))?;
    }
    Ok("50 random cases: rows before the altered suffix bitwise equal".into())
}

// 4 -------------------------------------------------------------------------

/// Seeded next-token model over {0, 1, 2} (2 = end): one random distribution
/// per prefix.
fn table_model(seed: u64) -> HashMap<Vec<usize>, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prefixes = vec![vec![]];
    for len in 0..2 {
        let ext: Vec<Vec<usize>> = prefixes
            .iter()
            .filter(|p: &&Vec<usize>| p.len() == len)
            .flat_map(|p| (0..3).map(move |t| [p.clone(), vec![t]].concat()))
            .collect();
        prefixes.extend(ext);
    }
    prefixes
        .into_iter()
        .map(|p| (p, log_softmax(&(0..3).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>())))
        .collect()
}

/// Best complete sequence by brute force: all sequences of length <= 3 that
/// end at the end token, ranked by total log-probability. Sequences that
/// never end only count when nothing ends.
fn exhaustive_best(model: &HashMap<Vec<usize>, Vec<f64>>, eos: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(bool, f64, Vec<usize>)> = None;
    let mut consider = |finished: bool, score: f64, seq: Vec<usize>| {
        let better = match &best {
            None => true,
            Some((bf, bs, bq)) => (finished, score) > (*bf, *bs) || (finished == *bf && score == *bs && seq < *bq),
        };
        if better {
            best = Some((finished, score, seq));
        }
    };
    for len in 1..=3u32 {
        for code in 0..3usize.pow(len) {
            let seq: Vec<usize> = (0..len).map(|i| code / 3usize.pow(len - 1 - i) % 3).collect();
            if seq[..seq.len() - 1].contains(&eos) {
                continue;
            }
            let finished = seq[seq.len() - 1] == eos;
            if !finished && len < 3 {
                continue;
            }
            let score: f64 = (0..seq.len()).map(|i| model[&seq[..i].to_vec()][seq[i]]).sum();
            consider(finished, score, seq);
        }
    }
    let (_, s, q) = best.unwrap();
    (q, s)
}

fn beam_oracle() -> Outcome {
    let eos = 2;
    for seed in 0..20 {
        let model = table_model(seed);
        let step = |p: &[usize]| Ok(model[&p.to_vec()].clone());
        let b = beam_search(step, eos, &GenerationConfig { beam_size: 27, max_len: 3 }).map_err(err)?;
        let (seq, score) = exhaustive_best(&model, eos);
        ensure(b.tokens == seq && (b.score - score).abs() < 1e-12, || {
            format!("seed {seed}: beam {:?} {} vs exhaustive {seq:?} {score}", b.tokens, b.score)
        })?;
    }
    let mut greedy_cases = 0;
    for seed in 0..200 {
        let model = table_model(1000 + seed);
        let step = |p: &[usize]| Ok(model[&p.to_vec()].clone());
        let g = greedy_decode(step, eos, 3).map_err(err)?;
        let b = beam_search(step, eos, &GenerationConfig { beam_size: 1, max_len: 3 }).map_err(err)?;
        ensure(g == b, || format!("seed {seed}: beam 1 {b:?} vs greedy {g:?}"))?;
        greedy_cases += 1;
    }
    // Beam 1 against greedy on real decoder networks as well.
    for seed in 0..10 {
        let (g, store) = tiny_generator(500 + seed);
        let hist = g.encode(&store, &[6, 7, 8]).map_err(err)?;
        let control = Control::Graph(SwitchVector::ones(&[3, 2, 4]));
        let step = |p: &[usize]| g.next_log_probs(&store, &hist, &control, p);
        let gr = greedy_decode(step, hdsa::vocab::EOS, 8).map_err(err)?;
        let b = beam_search(step, hdsa::vocab::EOS, &GenerationConfig { beam_size: 1, max_len: 8 }).map_err(err)?;
        ensure(gr == b, || format!("network {seed}: beam 1 differs from greedy"))?;
        greedy_cases += 1;
    }
    Ok(format!("beam 27 equals exhaustive search on 20 seeded models; beam 1 equals greedy on {greedy_cases} models"))
}

// 5 -------------------------------------------------------------------------

fn act_graph_algebra() -> Outcome {
    let ont = Ontology::canonical();
    ensure(ont.layer_sizes() == vec![10, 7, 27] && ont.total_nodes() == 44, || {
        format!("canonical sizes {:?}", ont.layer_sizes())
    })?;

    let a = SwitchVector::from_segments(&[vec![1, 0, 0], vec![1, 0]]).map_err(err)?;
    let b = SwitchVector::from_segments(&[vec![1, 0, 0], vec![0, 1]]).map_err(err)?;
    let want = SwitchVector::from_segments(&[vec![1, 0, 0], vec![1, 1]]).map_err(err)?;
    let got = a.bitor(&b).map_err(err)?;
    ensure(got == want, || format!("worked OR example gave {}", got.render()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let sizes = ont.layer_sizes();
    let random_sv = |rng: &mut ChaCha8Rng| SwitchVector::from_bits(&sizes, (0..44).map(|_| rng.random_bool(0.3)).collect()).unwrap();
    for _ in 0..500 {
        let (x, y, z) = (random_sv(&mut rng), random_sv(&mut rng), random_sv(&mut rng));
        let or = |p: &SwitchVector, q: &SwitchVector| p.bitor(q).unwrap();
        ensure(or(&x, &x) == x, || "idempotence".into())?;
        ensure(or(&x, &y) == or(&y, &x), || "commutativity".into())?;
        ensure(or(&or(&x, &y), &z) == or(&x, &or(&y, &z)), || "associativity".into())?;
    }
    let mut round_trips = 0;
    for d in ont.layer(0) {
        for act in ont.layer(1) {
            for s in ont.layer(2) {
                let parsed = ont.parse_act(&format!("{d}-{act}-{s}")).map_err(err)?;
                let sv = ont.encode_act(&parsed).map_err(err)?;
                let back = ont.decode_switch(&sv).map_err(err)?;
                ensure(back == vec![parsed.clone()], || format!("{parsed} decoded to {back:?}"))?;
                round_trips += 1;
            }
        }
    }
    Ok(format!(
        "worked OR example [[1,0,0],[1,0]] | [[1,0,0],[0,1]] = [[1,0,0],[1,1]]; OR laws on 500 random triples; encode/decode identity on all {round_trips} triplets; canonical size 44 = 10+7+27"
    ))
}

// 6 -------------------------------------------------------------------------

fn overfit() -> Outcome {
    let t = Instant::now();
    let mut spec = SyntheticSpec::new(50, 1);
    spec.dev_fraction = 0.0;
    spec.test_fraction = 0.0;
    let c = generate_synthetic(&spec).map_err(err)?;
    let vocab = corpus_vocabulary(&c.train, 5000);
    let ex = generator_examples(&c.train, &vocab, &c.ontology, None).map_err(err)?;
    let refs: Vec<Vec<String>> = c.train.iter().map(|t| t.delex.clone()).collect();
    let mut notes = Vec::new();
    for residual in [false, true] {
        let mode = if residual { "residual" } else { "literal" };
        let (g, mut store) = canonical_generator(vocab.len(), residual, Conditioning::Graph, 0)?;
        let tc = TrainConfig {
            steps: 2000,
            batch_size: 10,
            lr: 1e-3,
            seed: 0,
        };
        let mut reached = None;
        let (mut acc, mut score) = (0.0, 0.0);
        train_generator(&g, &mut store, &ex, &tc, |step, _, st| {
            if step % 100 != 0 {
                return Ok(true);
            }
            acc = token_accuracy(&g, st, &ex)?;
            if acc >= 0.99 {
                let cands = decode_all(&g, st, &vocab, &ex).map_err(hdsa::Error::Data)?;
                score = bleu(&cands, &refs)?;
                if score >= 95.0 {
                    reached = Some(step);
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .map_err(err)?;
        match reached {
            Some(step) => {
                notes.push(format!("{mode} mode reached accuracy {acc:.4}, BLEU {score:.2} at step {step}"));
                within(&t, Duration::from_secs(600)).map_err(|e| format!("{}; {e}", notes.join("; ")))?;
                return Ok(format!("mode={mode}; {}; {:.0?}", notes.join("; "), t.elapsed()));
            }
            None => notes.push(format!("{mode} mode stopped at accuracy {acc:.4} after 2000 steps")),
        }
    }
    Err(notes.join("; "))
}

// 7 -------------------------------------------------------------------------

fn controllability() -> Outcome {
    let t = Instant::now();
    let c = generate_synthetic(&SyntheticSpec::new(2000, 7)).map_err(err)?;
    let ont = &c.ontology;
    let vocab = corpus_vocabulary(&c.train, 5000);
    let ex = generator_examples(&c.train, &vocab, ont, None).map_err(err)?;
    let test = generator_examples(&c.test, &vocab, ont, None).map_err(err)?;
    let (g, mut store) = canonical_generator(vocab.len(), true, Conditioning::Graph, 1)?;
    let tc = TrainConfig {
        steps: 800,
        batch_size: 16,
        lr: 1e-3,
        seed: 1,
    };
    train_generator(&g, &mut store, &ex, &tc, |_, _, _| Ok(true)).map_err(err)?;
    let cands = decode_all(&g, &store, &vocab, &test)?;
    let (mut clean, mut with_slots) = (0, 0);
    for (cand, turn) in cands.iter().zip(&c.test) {
        let sw = turn.switch(ont).map_err(err)?;
        clean += usize::from(unlicensed_placeholders(cand, &sw, ont).is_empty());
        with_slots += usize::from(cand.iter().any(|w| hdsa::corpus::is_placeholder(w)));
    }
    let rate = clean as f64 / cands.len() as f64;
    let line = format!(
        "{clean}/{} test turns ({:.1}%) emit only licensed placeholders; {with_slots} contain at least one; mode=residual; {:.0?}",
        cands.len(),
        100.0 * rate,
        t.elapsed()
    );
    ensure(rate >= 0.9, || line.clone())?;
    Ok(line)
}

// 8 -------------------------------------------------------------------------

fn held_out_components_ok(c: &SyntheticCorpus) -> Result<(), String> {
    let mut counts: [HashMap<&str, usize>; 3] = Default::default();
    let mut seen = std::collections::HashSet::new();
    for t in &c.train {
        for a in &t.acts {
            seen.insert(a.clone());
            for (k, part) in a.splitn(3, '-').enumerate() {
                *counts[k].entry(part).or_default() += 1;
            }
        }
    }
    ensure(c.holdout.len() == 10, || format!("{} held-out acts", c.holdout.len()))?;
    for h in &c.holdout {
        let name = h.to_string();
        ensure(!seen.contains(&name), || format!("{name} occurs in training"))?;
        for (k, part) in name.splitn(3, '-').enumerate() {
            let n = counts[k].get(part).copied().unwrap_or(0);
            ensure(n >= 100, || format!("{part} of {name} occurs {n} times"))?;
        }
    }
    Ok(())
}

fn generalization() -> Outcome {
    let t = Instant::now();
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for seed in 1..=3u64 {
        let mut spec = SyntheticSpec::new(3000, seed);
        spec.holdout = 10;
        let c = generate_synthetic(&spec).map_err(err)?;
        held_out_components_ok(&c)?;
        let held: Vec<DialogTurn> = c.test.iter().filter(|t| t.dialog.starts_with('h')).cloned().collect();
        let refs: Vec<Vec<String>> = held.iter().map(|t| t.delex.clone()).collect();
        let vocab = corpus_vocabulary(&c.train, 5000);
        let acts: Vec<_> = c.train.iter().map(|t| t.parse_acts(&c.ontology)).collect::<Result<Vec<_>, _>>().map_err(err)?;
        let inv = FlatInventory::from_observed(acts.iter().flatten());
        let mut scores = [0.0; 2];
        for (k, flat) in [false, true].into_iter().enumerate() {
            let inv = flat.then_some(&inv);
            let ex = generator_examples(&c.train, &vocab, &c.ontology, inv).map_err(err)?;
            let hex = generator_examples(&held, &vocab, &c.ontology, inv).map_err(err)?;
            let cond = match inv {
                None => Conditioning::Graph,
                Some(i) => Conditioning::Flat { inventory: i.len() },
            };
            let (g, mut store) = canonical_generator(vocab.len(), true, cond, seed)?;
            let tc = TrainConfig {
                steps: 1500,
                batch_size: 16,
                lr: 1e-3,
                seed,
            };
            train_generator(&g, &mut store, &ex, &tc, |_, _, _| Ok(true)).map_err(err)?;
            scores[k] = bleu(&decode_all(&g, &store, &vocab, &hex)?, &refs).map_err(err)?;
        }
        detail.push(format!("seed {seed}: graph {:.2} flat {:.2}", scores[0], scores[1]));
        gaps.push(scores[0] - scores[1]);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let line = format!("held-out BLEU gap {mean:.2} (need >= 5); {}; mode=residual; {:.0?}", detail.join(", "), t.elapsed());
    ensure(mean >= 5.0, || line.clone())?;
    within(&t, Duration::from_secs(1800)).map_err(|e| format!("{line}; {e}"))?;
    Ok(line)
}

// 9 -------------------------------------------------------------------------

fn predictor_sanity() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sizes = [10, 7, 27];
    for _ in 0..2000 {
        let dist = ActDistribution {
            probs: (0..44).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let lo = rng.random_range(0.01..0.99);
        let hi = rng.random_range(lo..0.99);
        let a = threshold_decode(&dist, &sizes, lo).map_err(err)?;
        let b = threshold_decode(&dist, &sizes, hi).map_err(err)?;
        ensure(b.is_subset_of(&a), || format!("threshold {hi} kept a bit that {lo} dropped"))?;
    }

    let c = generate_synthetic(&SyntheticSpec::new(2000, 7)).map_err(err)?;
    let ont = &c.ontology;
    let vocab = corpus_vocabulary(&c.train, 5000);
    let train = predictor_examples(&c.train, &vocab, ont).map_err(err)?;
    let test = predictor_examples(&c.test, &vocab, ont).map_err(err)?;
    let cfg = PredictorConfig {
        encoder: EncoderConfig::standard(vocab.len()),
        side: SideSchema::for_ontology(ont),
        nodes: ont.total_nodes(),
    };
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(0);
    let p = ActPredictor::build(&cfg, &mut Builder::init(&mut store, &mut init)).map_err(err)?;
    let tc = TrainConfig {
        steps: 4000,
        batch_size: 16,
        lr: 1e-3,
        seed: 0,
    };
    train_predictor(&p, &mut store, &train, &tc, |_, _, _| Ok(true)).map_err(err)?;
    let pred = predict_switches(&p, &store, &test, 0.4).map_err(err)?;
    let gold: Vec<SwitchVector> = test.iter().map(|e| e.gold.clone()).collect();
    let f1 = switch_f1(&pred, &gold);
    let line = format!("test F1 {f1:.4} at T=0.4 on {} turns; monotone over 2000 random vectors; {:.0?}", test.len(), t.elapsed());
    ensure(f1 >= 0.95, || line.clone())?;
    Ok(line)
}

// 10 ------------------------------------------------------------------------

/// Clipped n-gram matches and candidate n-gram totals, counted directly.
fn ngram_table(cands: &[Vec<String>], refs: &[Vec<String>]) -> ([usize; 4], [usize; 4]) {
    let (mut m, mut tot) = ([0; 4], [0; 4]);
    for (c, r) in cands.iter().zip(refs) {
        for n in 1..=4 {
            let count = |s: &[String]| {
                let mut h: BTreeMap<Vec<String>, usize> = BTreeMap::new();
                for w in s.windows(n) {
                    *h.entry(w.to_vec()).or_default() += 1;
                }
                h
            };
            let (hc, hr) = (count(c), count(r));
            tot[n - 1] += hc.values().sum::<usize>();
            m[n - 1] += hc.iter().map(|(g, &k)| k.min(hr.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    (m, tot)
}

fn metric_oracles() -> Outcome {
    let toks = |s: &str| tokenize(s);
    let cands = vec![toks("the cat sat on the mat"), toks("a dog barks")];
    let refs = vec![toks("the cat is on the mat"), toks("a dog barks loudly")];
    let (m, tot) = ngram_table(&cands, &refs);
    ensure(m == [8, 5, 2, 0] && tot == [9, 7, 5, 3], || format!("oracle table {m:?} {tot:?}"))?;
    let stats = BleuStats::collect(&cands, &refs).map_err(err)?;
    ensure(stats.matches == m && stats.totals == tot, || format!("library table {:?} {:?}", stats.matches, stats.totals))?;
    // Zero 4-gram matches are smoothed to 0.1; lengths 9 against 10.
    let p = [8.0 / 9.0, 5.0 / 7.0, 2.0 / 5.0, 0.1 / 3.0];
    let expected = 100.0 * (1.0f64 - 10.0 / 9.0).exp() * (p.iter().map(|x: &f64| x.ln()).sum::<f64>() / 4.0).exp();
    let got = bleu(&cands, &refs).map_err(err)?;
    ensure((got - expected).abs() <= 1e-6, || format!("BLEU {got} vs hand count {expected}"))?;

    let c = generate_synthetic(&SyntheticSpec::new(1250, 10)).map_err(err)?;
    let refs_as_cands: Vec<Vec<String>> = c.test.iter().map(|t| t.delex.clone()).collect();
    let r = EvalReport::compute(&c.test, &refs_as_cands, &act_frequencies(&c.train)).map_err(err)?;
    let perfect = |x: f64| (x - 100.0).abs() < 1e-9;
    ensure(
        perfect(r.bleu_delex)
            && perfect(r.bleu_restored)
            && perfect(r.entity_f1)
            && r.inform.is_some_and(perfect)
            && r.request.is_some_and(perfect)
            && r.buckets.iter().all(|b| perfect(b.bleu)),
        || format!("references as candidates: {r:?}"),
    )?;

    let turns: Vec<&DialogTurn> = c.train.iter().chain(&c.dev).chain(&c.test).take(1000).collect();
    ensure(turns.len() == 1000, || format!("only {} turns generated", turns.len()))?;
    for t in &turns {
        ensure(restore(&t.delex, &t.values) == t.lex, || format!("restore failed on {:?}", t.delex))?;
        ensure(delexicalize(&t.lex, &t.values) == t.delex, || format!("delexicalize failed on {:?}", t.lex))?;
    }
    Ok(format!("BLEU {got:.6} matches hand count {expected:.6}; references score 100 on every metric; round trip exact on 1000 turns"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient oracle", gradient_oracle),
        ("gating exactness", gating_exactness),
        ("causal mask", causal_mask),
        ("beam oracle", beam_oracle),
        ("act-graph algebra", act_graph_algebra),
        ("tiny overfit", overfit),
        ("controllability", controllability),
        ("generalization direction", generalization),
        ("predictor sanity", predictor_sanity),
        ("metric oracles", metric_oracles),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        match f() {
            Ok(msg) => println!("[PASS] criterion {n} {name}: {msg}"),
            Err(msg) => {
                println!("[FAIL] criterion {n} {name}: {msg}");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
