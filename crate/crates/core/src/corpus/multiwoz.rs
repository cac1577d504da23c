//! Best-effort import of MultiWOZ-style `data.json` dialogs.
//!
//! Each dialog is `{"log": [turn, ...]}` with user and system turns
//! alternating. System turns carry `dialog_act` (`{"Hotel-Inform": [["Area",
//! "north"], ...]}`) and `metadata` (per-domain `semi` and `book` slots),
//! which become acts, placeholder values and belief bits. Acts whose
//! labels have no counterpart in the ontology are dropped and counted.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use super::{delexicalize, placeholder, DialogTurn, Speaker};
use crate::act_graph::{Ontology, NONE_LABEL};
use crate::act_predictor::{SideConditions, SideSchema};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportStats {
    pub dialogs: usize,
    pub turns: usize,
    pub dropped_acts: usize,
}

fn action_label(raw: &str) -> &str {
    match raw.to_lowercase().as_str() {
        "inform" => "inform",
        "request" => "request",
        "recommend" => "recommend",
        "book" | "offerbook" | "offerbooked" => "book",
        "select" => "select",
        "nooffer" | "nobook" => "sorry",
        _ => NONE_LABEL,
    }
}

fn slot_label(domain: &str, raw: &str) -> String {
    let s = raw.to_lowercase();
    let mapped = match s.as_str() {
        "addr" => "address",
        "post" => "postcode",
        "ref" => "reference",
        "price" if domain != "train" => "pricerange",
        "ticket" | "fee" => "price",
        "id" if domain == "train" => "trainid",
        "time" if domain == "train" => "duration",
        "depart" => "departure",
        "dest" => "destination",
        "arrive" => "arriveby",
        "leave" => "leaveat",
        other => other,
    };
    mapped.to_string()
}

/// Lowercases and splits trailing punctuation off words, so values at the
/// end of a sentence still match whole tokens.
fn normalize(text: &str) -> String {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let core = word.trim_end_matches(['.', ',', '?', '!', ';', ':']);
        if !core.is_empty() {
            out.push(core.to_string());
        }
        out.extend(word[core.len()..].chars().map(String::from));
    }
    out.join(" ")
}

fn usable_value(v: &str) -> bool {
    let v = v.trim().to_lowercase();
    !(v.is_empty() || v == "?" || v == "none" || v == "not mentioned" || v == "dontcare" || v == "dont care")
}

/// Converts parsed `data.json` content into corpus turns, one per system
/// turn, ordered by dialog name.
pub fn from_multiwoz(data: &Value, ont: &Ontology) -> Result<(Vec<DialogTurn>, ImportStats)> {
    if ont.num_layers() != 3 {
        return Err(Error::Config("MultiWOZ import needs a domain/action/slot ontology".into()));
    }
    let dialogs = data
        .as_object()
        .ok_or_else(|| Error::Data("MultiWOZ data must be an object keyed by dialog name".into()))?;
    let schema = SideSchema::for_ontology(ont);
    let mut stats = ImportStats::default();
    let mut out = Vec::new();
    let mut names: Vec<&String> = dialogs.keys().collect();
    names.sort();
    for name in names {
        let log = dialogs[name]["log"]
            .as_array()
            .ok_or_else(|| Error::Data(format!("dialog {name}: missing log")))?;
        let id = name.trim_end_matches(".json").to_string();
        let mut history: Vec<(Speaker, String)> = Vec::new();
        for (i, turn) in log.iter().enumerate() {
            let text = normalize(turn["text"].as_str().unwrap_or_default());
            if i % 2 == 0 {
                history.push((Speaker::User, text));
                continue;
            }
            let mut acts = Vec::new();
            let mut values = BTreeMap::new();
            let mut matches = vec![0usize; schema.domains];
            if let Some(map) = turn["dialog_act"].as_object() {
                for (key, pairs) in map {
                    let Some((d, a)) = key.split_once('-') else {
                        stats.dropped_acts += 1;
                        continue;
                    };
                    let domain = d.to_lowercase();
                    let action = action_label(a);
                    let pairs: Vec<(String, String)> = pairs
                        .as_array()
                        .map(|ps| {
                            ps.iter()
                                .filter_map(|p| Some((p.get(0)?.as_str()?.to_string(), p.get(1)?.as_str()?.to_string())))
                                .collect()
                        })
                        .unwrap_or_default();
                    for (raw_slot, value) in pairs {
                        let slot = slot_label(&domain, &raw_slot);
                        let act = format!("{domain}-{action}-{slot}");
                        let Ok(parsed) = ont.parse_act(&act) else {
                            stats.dropped_acts += 1;
                            continue;
                        };
                        let name = parsed.to_string();
                        if !acts.contains(&name) {
                            acts.push(name);
                        }
                        let d_idx = ont.index_of(0, &domain).expect("parsed act has a known domain");
                        if slot == "choice" {
                            if let Ok(n) = value.trim().parse::<usize>() {
                                matches[d_idx] = matches[d_idx].max(n);
                            }
                        } else if action != "request" && usable_value(&value) {
                            values.entry(placeholder(&domain, &slot)).or_insert(normalize(&value));
                        }
                        if matches!(action, "inform" | "recommend" | "select" | "book") && matches[d_idx] == 0 {
                            matches[d_idx] = 1;
                        }
                    }
                }
            }
            let constrained = belief_pairs(&turn["metadata"], ont);
            let side = SideConditions::from_parts(schema, &matches, &constrained)?;
            let delex = delexicalize(&text, &values);
            // Keep only values the response actually uses.
            values.retain(|ph, _| delex.contains(ph));
            out.push(DialogTurn {
                dialog: id.clone(),
                history: history.clone(),
                belief: side.belief.iter().map(|&b| u8::from(b)).collect(),
                kb: side.kb.iter().map(|&b| u8::from(b)).collect(),
                acts,
                delex: delex.clone(),
                lex: text,
                values,
            });
            stats.turns += 1;
            history.push((Speaker::System, delex.join(" ")));
        }
        stats.dialogs += 1;
    }
    Ok((out, stats))
}

/// `(domain, slot)` index pairs with a usable value in `semi` or `book`.
fn belief_pairs(metadata: &Value, ont: &Ontology) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let Some(domains) = metadata.as_object() else { return pairs };
    for (domain, parts) in domains {
        let Ok(d) = ont.index_of(0, domain) else { continue };
        for part in ["semi", "book"] {
            let Some(slots) = parts[part].as_object() else { continue };
            for (slot, value) in slots {
                let Some(v) = value.as_str() else { continue };
                if !usable_value(v) {
                    continue;
                }
                if let Ok(s) = ont.index_of(2, &slot_label(domain, slot)) {
                    if !pairs.contains(&(d, s)) {
                        pairs.push((d, s));
                    }
                }
            }
        }
    }
    pairs.sort();
    pairs
}

pub fn read_multiwoz(path: &Path, ont: &Ontology) -> Result<(Vec<DialogTurn>, ImportStats)> {
    let text = std::fs::read_to_string(path)?;
    from_multiwoz(&serde_json::from_str(&text)?, ont)
}
