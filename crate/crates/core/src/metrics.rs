//! Corpus BLEU, entity F1, inform/request rates and frequency-bucket BLEU.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::corpus::{is_placeholder, placeholder_parts, restore, DialogTurn};
use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;
/// Matched count used for an n-gram order with no matches (orders >= 2).
pub const SMOOTHING_EPSILON: f64 = 0.1;
pub const SMOOTHING_NOTE: &str =
    "corpus BLEU-4, brevity penalty; zero n-gram matches (n >= 2) counted as 0.1; orders with no candidate n-grams skipped";

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Clipped matches and candidate totals per order, plus the two lengths.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn collect(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<Self> {
        if candidates.len() != references.len() {
            return Err(Error::Data(format!(
                "{} candidates for {} references",
                candidates.len(),
                references.len()
            )));
        }
        if candidates.is_empty() {
            return Err(Error::Data("BLEU of an empty corpus".into()));
        }
        let mut s = Self::default();
        for (c, r) in candidates.iter().zip(references) {
            s.cand_len += c.len();
            s.ref_len += r.len();
            for n in 1..=MAX_ORDER {
                let rc = ngrams(r, n);
                for (g, k) in ngrams(c, n) {
                    s.totals[n - 1] += k;
                    s.matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                }
            }
        }
        Ok(s)
    }

    /// BLEU in `[0, 100]`.
    pub fn score(&self) -> f64 {
        if self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            let m = if self.matches[n] == 0 {
                SMOOTHING_EPSILON
            } else {
                self.matches[n] as f64
            };
            log_sum += (m / self.totals[n] as f64).ln();
            orders += 1;
        }
        let bp = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        100.0 * bp * (log_sum / orders as f64).exp()
    }
}

/// Corpus-level BLEU-4 with one reference per candidate, scaled to 100.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    Ok(BleuStats::collect(candidates, references)?.score())
}

/// Entity mentions of a turn: its placeholders plus any lexicon value
/// (matched longest first as a token sequence).
#[derive(Clone, Debug, Default)]
pub struct EntityExtractor {
    lexicon: Vec<Vec<String>>,
}

impl EntityExtractor {
    pub fn new(values: impl IntoIterator<Item = String>) -> Self {
        let mut lexicon: Vec<Vec<String>> = values
            .into_iter()
            .map(|v| crate::vocab::tokenize(&v))
            .filter(|v| !v.is_empty())
            .collect();
        lexicon.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        lexicon.dedup();
        Self { lexicon }
    }

    pub fn extract(&self, tokens: &[String]) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        let mut i = 0;
        while i < tokens.len() {
            if is_placeholder(&tokens[i]) {
                *out.entry(tokens[i].clone()).or_default() += 1;
                i += 1;
                continue;
            }
            match self.lexicon.iter().find(|v| tokens[i..].starts_with(v)) {
                Some(v) => {
                    *out.entry(v.join(" ")).or_default() += 1;
                    i += v.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Micro-averaged entity F1 in `[0, 100]`. With no entities on either side
/// the score is 100.
pub fn entity_f1(candidates: &[Vec<String>], references: &[Vec<String>], extractor: &EntityExtractor) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Data("entity F1 needs one candidate per reference".into()));
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let ce = extractor.extract(c);
        let re = extractor.extract(r);
        for (e, &k) in &ce {
            let hit = k.min(re.get(e).copied().unwrap_or(0));
            tp += hit;
            fp += k - hit;
        }
        for (e, &k) in &re {
            fnn += k - k.min(ce.get(e).copied().unwrap_or(0));
        }
    }
    if tp + fp + fnn == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64)
}

/// Slots whose placeholders identify an entity rather than answer a request.
pub const ENTITY_SLOTS: [&str; 3] = ["name", "trainid", "id"];

/// Placeholder-level dialog goal.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Goal {
    pub inform: BTreeSet<String>,
    pub request: BTreeSet<String>,
}

impl Goal {
    /// Entity placeholders of the reference turns go to `inform`, all other
    /// placeholders to `request`.
    pub fn from_references<'a>(turns: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut g = Self::default();
        for t in turns {
            for tok in t {
                if let Some((_, slot)) = placeholder_parts(tok) {
                    if ENTITY_SLOTS.contains(&slot) {
                        g.inform.insert(tok.clone());
                    } else {
                        g.request.insert(tok.clone());
                    }
                }
            }
        }
        g
    }
}

/// `(inform %, request %)` over dialogs, each given as its generated turns
/// and goal; `None` when there are no dialogs.
pub fn inform_request(dialogs: &[(Vec<Vec<String>>, Goal)]) -> Option<(f64, f64)> {
    if dialogs.is_empty() {
        return None;
    }
    let (mut inf, mut req) = (0usize, 0usize);
    for (gen, goal) in dialogs {
        let said: BTreeSet<&str> = gen.iter().flatten().map(String::as_str).filter(|t| is_placeholder(t)).collect();
        inf += usize::from(goal.inform.iter().all(|e| said.contains(e.as_str())));
        req += usize::from(goal.request.iter().all(|e| said.contains(e.as_str())));
    }
    let n = dialogs.len() as f64;
    Some((100.0 * inf as f64 / n, 100.0 * req as f64 / n))
}

/// Training-frequency ranges of acts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bucket {
    /// 1-100 occurrences (unseen acts land here too).
    VeryFew,
    /// 101-500.
    Few,
    /// 501-2000.
    Medium,
    /// 2001-5000.
    Many,
    /// Over 5000.
    VeryMany,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [Bucket::VeryFew, Bucket::Few, Bucket::Medium, Bucket::Many, Bucket::VeryMany];

    pub fn of(count: usize) -> Self {
        match count {
            0..=100 => Bucket::VeryFew,
            101..=500 => Bucket::Few,
            501..=2000 => Bucket::Medium,
            2001..=5000 => Bucket::Many,
            _ => Bucket::VeryMany,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::VeryFew => "1-100",
            Bucket::Few => "100-500",
            Bucket::Medium => "500-2k",
            Bucket::Many => "2k-5k",
            Bucket::VeryMany => "5k+",
        }
    }
}

/// A turn's bucket is that of its rarest act; turns without acts have none.
pub fn turn_bucket(acts: &[String], freq: &HashMap<String, usize>) -> Option<Bucket> {
    acts.iter().map(|a| freq.get(a).copied().unwrap_or(0)).min().map(Bucket::of)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketScore {
    pub bucket: Bucket,
    pub turns: usize,
    pub bleu: f64,
}

/// BLEU per bucket; empty buckets are omitted.
pub fn bucket_bleu(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    acts: &[Vec<String>],
    freq: &HashMap<String, usize>,
) -> Result<Vec<BucketScore>> {
    if candidates.len() != references.len() || acts.len() != references.len() {
        return Err(Error::Data("bucket BLEU inputs differ in length".into()));
    }
    let mut groups: BTreeMap<Bucket, (Vec<Vec<String>>, Vec<Vec<String>>)> = BTreeMap::new();
    for ((c, r), a) in candidates.iter().zip(references).zip(acts) {
        if let Some(b) = turn_bucket(a, freq) {
            let g = groups.entry(b).or_default();
            g.0.push(c.clone());
            g.1.push(r.clone());
        }
    }
    groups
        .into_iter()
        .map(|(bucket, (c, r))| {
            Ok(BucketScore {
                bucket,
                turns: c.len(),
                bleu: bleu(&c, &r)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub turns: usize,
    pub bleu_delex: f64,
    pub bleu_restored: f64,
    pub entity_f1: f64,
    pub inform: Option<f64>,
    pub request: Option<f64>,
    pub buckets: Vec<BucketScore>,
}

impl EvalReport {
    /// Scores delexicalized candidates against the corpus turns.
    pub fn compute(turns: &[DialogTurn], candidates: &[Vec<String>], train_freq: &HashMap<String, usize>) -> Result<Self> {
        if turns.len() != candidates.len() {
            return Err(Error::Data(format!("{} candidates for {} turns", candidates.len(), turns.len())));
        }
        let refs: Vec<Vec<String>> = turns.iter().map(|t| t.delex.clone()).collect();
        let tok = |s: &str| crate::vocab::tokenize(s);
        let restored_c: Vec<Vec<String>> = turns.iter().zip(candidates).map(|(t, c)| tok(&restore(c, &t.values))).collect();
        let restored_r: Vec<Vec<String>> = turns.iter().map(|t| tok(&t.lex)).collect();
        let extractor = EntityExtractor::default();

        let mut by_dialog: BTreeMap<&str, (Vec<Vec<String>>, Vec<&[String]>)> = BTreeMap::new();
        for (t, c) in turns.iter().zip(candidates) {
            let e = by_dialog.entry(t.dialog.as_str()).or_default();
            e.0.push(c.clone());
            e.1.push(&t.delex);
        }
        let dialogs: Vec<(Vec<Vec<String>>, Goal)> = by_dialog
            .into_values()
            .map(|(g, r)| (g, Goal::from_references(r)))
            .collect();
        let ir = inform_request(&dialogs);
        let acts: Vec<Vec<String>> = turns.iter().map(|t| t.acts.clone()).collect();
        Ok(Self {
            turns: turns.len(),
            bleu_delex: bleu(candidates, &refs)?,
            bleu_restored: bleu(&restored_c, &restored_r)?,
            entity_f1: entity_f1(candidates, &refs, &extractor)?,
            inform: ir.map(|x| x.0),
            request: ir.map(|x| x.1),
            buckets: bucket_bleu(candidates, &refs, &acts, train_freq)?,
        })
    }

    /// `key value` lines, headed by the BLEU smoothing method.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {SMOOTHING_NOTE}");
        let _ = writeln!(s, "turns {}", self.turns);
        let _ = writeln!(s, "bleu_delex {:.4}", self.bleu_delex);
        let _ = writeln!(s, "bleu_restored {:.4}", self.bleu_restored);
        let _ = writeln!(s, "entity_f1 {:.4}", self.entity_f1);
        match (self.inform, self.request) {
            (Some(i), Some(r)) => {
                let _ = writeln!(s, "inform {i:.4}");
                let _ = writeln!(s, "request {r:.4}");
            }
            _ => {
                let _ = writeln!(s, "# inform/request skipped: no dialog goals");
            }
        }
        for b in &self.buckets {
            let _ = writeln!(s, "bucket {} turns {} bleu {:.4}", b.bucket.label(), b.turns, b.bleu);
        }
        s
    }

    /// Tab-separated `metric value` table.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        let _ = writeln!(s, "bleu_delex\t{:.4}", self.bleu_delex);
        let _ = writeln!(s, "bleu_restored\t{:.4}", self.bleu_restored);
        let _ = writeln!(s, "entity_f1\t{:.4}", self.entity_f1);
        if let (Some(i), Some(r)) = (self.inform, self.request) {
            let _ = writeln!(s, "inform\t{i:.4}");
            let _ = writeln!(s, "request\t{r:.4}");
        }
        for b in &self.buckets {
            let _ = writeln!(s, "bleu_bucket_{}\t{:.4}", b.bucket.label(), b.bleu);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let c = vec![toks("the hotel is nice ."), toks("ok")];
        assert!((bleu(&c, &c).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn no_unigram_overlap_scores_zero() {
        assert_eq!(bleu(&[toks("a b c d")], &[toks("e f g h")]).unwrap(), 0.0);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(bleu(&[], &[]).is_err());
        assert!(bleu(&[toks("a")], &[]).is_err());
    }

    #[test]
    fn two_sentence_hand_count() {
        // cand 1: "the cat sat on the mat"  ref 1: "the cat is on the mat"
        //   1-grams: 6 total; the x2 (ref the x2) cat on mat match -> 5
        //   2-grams: 5 total; "the cat", "on the", "the mat" -> 3
        //   3-grams: 4 total; "on the mat" -> 1
        //   4-grams: 3 total; none -> 0
        // cand 2: "a dog barks"  ref 2: "a dog barks loudly"
        //   1: 3/3, 2: 2/2, 3: 1/1, 4: 0 total
        // totals: p1 = 8/9, p2 = 5/7, p3 = 2/5, p4 = 0.1/3 (smoothed)
        // lengths c = 9, r = 10 -> BP = exp(1 - 10/9)
        let c = vec![toks("the cat sat on the mat"), toks("a dog barks")];
        let r = vec![toks("the cat is on the mat"), toks("a dog barks loudly")];
        let stats = BleuStats::collect(&c, &r).unwrap();
        assert_eq!(stats.matches, [8, 5, 2, 0]);
        assert_eq!(stats.totals, [9, 7, 5, 3]);
        // = 100 * exp(-1/9) * (8/9 * 5/7 * 2/5 * 0.1/3)^(1/4)
        let expected = 27.143109716958396;
        assert!((bleu(&c, &r).unwrap() - expected).abs() < 1e-6, "{}", bleu(&c, &r).unwrap());
    }

    #[test]
    fn clipping_limits_repeats() {
        let s = BleuStats::collect(&[toks("the the the")], &[toks("the cat")]).unwrap();
        assert_eq!(s.matches[0], 1);
        assert_eq!(s.totals[0], 3);
    }

    #[test]
    fn entity_f1_cases() {
        let ex = EntityExtractor::default();
        let r = vec![toks("<hotel.name> is in <hotel.area>"), toks("<train.id> leaves at <train.leaveat>")];
        assert_eq!(entity_f1(&r, &r, &ex).unwrap(), 100.0);
        assert_eq!(entity_f1(&[toks("hello")], &[toks("bye")], &ex).unwrap(), 100.0);
        // turn 1: cand {name, name}, ref {name, area} -> tp 1, fp 1, fn 1
        // turn 2: cand {train.id}, ref {train.id, leaveat} -> tp 1, fp 0, fn 1
        // F1 = 2*2 / (2*2 + 1 + 2) = 4/7
        let c = vec![toks("<hotel.name> <hotel.name>"), toks("<train.id> soon")];
        assert!((entity_f1(&c, &r, &ex).unwrap() - 400.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn lexicon_entities() {
        let ex = EntityExtractor::new(["acorn house".to_string(), "acorn".to_string()]);
        let got = ex.extract(&toks("the acorn house and acorn"));
        assert_eq!(got.get("acorn house"), Some(&1));
        assert_eq!(got.get("acorn"), Some(&1));
    }

    #[test]
    fn goals_and_rates() {
        let refs = [toks("<hotel.name> has <hotel.phone>"), toks("<hotel.postcode> .")];
        let goal = Goal::from_references(refs.iter().map(Vec::as_slice));
        assert_eq!(goal.inform, ["<hotel.name>".to_string()].into_iter().collect());
        assert_eq!(goal.request.len(), 2);
        let same = vec![(refs.to_vec(), goal.clone())];
        assert_eq!(inform_request(&same), Some((100.0, 100.0)));
        // Second dialog names the hotel but misses the postcode.
        let partial = (vec![toks("<hotel.name> <hotel.phone>")], goal.clone());
        let empty = (vec![], goal.clone());
        let vacuous = (vec![], Goal::default());
        let (i, r) = inform_request(&[partial, empty, vacuous]).unwrap();
        assert!((i - 200.0 / 3.0).abs() < 1e-9);
        assert!((r - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(inform_request(&[]), None);
    }

    #[test]
    fn bucket_boundaries() {
        let b: Vec<Bucket> = [0, 1, 100, 101, 500, 501, 2000, 2001, 5000, 5001].into_iter().map(Bucket::of).collect();
        use Bucket::*;
        assert_eq!(b, vec![VeryFew, VeryFew, VeryFew, Few, Few, Medium, Medium, Many, Many, VeryMany]);
    }

    #[test]
    fn rarest_act_decides_bucket() {
        let freq: HashMap<String, usize> = [("a".to_string(), 3000), ("b".to_string(), 50)].into_iter().collect();
        assert_eq!(turn_bucket(&["a".into(), "b".into()], &freq), Some(Bucket::VeryFew));
        assert_eq!(turn_bucket(&["a".into()], &freq), Some(Bucket::Many));
        assert_eq!(turn_bucket(&[], &freq), None);
    }

    #[test]
    fn single_bucket_equals_corpus_bleu() {
        let c = vec![toks("a b c d e"), toks("x y z")];
        let r = vec![toks("a b c d f"), toks("x y w")];
        let acts = vec![vec!["k".to_string()], vec!["k".to_string()]];
        let freq: HashMap<String, usize> = [("k".to_string(), 700)].into_iter().collect();
        let b = bucket_bleu(&c, &r, &acts, &freq).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].bucket, Bucket::Medium);
        assert_eq!(b[0].bleu, bleu(&c, &r).unwrap());
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(prop_oneof![Just("a"), Just("b"), Just("c"), Just("<x.name>"), Just("<x.area>")], 0..8)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn bleu_ignores_corpus_order(pairs in proptest::collection::vec((sentence(), sentence()), 1..6), rot in 0usize..6) {
            let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let mut p2 = pairs; let k = rot % p2.len(); p2.rotate_left(k);
            let (c2, r2): (Vec<_>, Vec<_>) = p2.into_iter().unzip();
            prop_assert_eq!(bleu(&c, &r).unwrap(), bleu(&c2, &r2).unwrap());
        }

        #[test]
        fn entity_f1_ignores_token_order(c in sentence(), r in sentence(), rot in 0usize..8) {
            let ex = EntityExtractor::default();
            let mut c2 = c.clone();
            if !c2.is_empty() { let k = rot % c2.len(); c2.rotate_left(k); }
            prop_assert_eq!(entity_f1(&[c], std::slice::from_ref(&r), &ex).unwrap(), entity_f1(&[c2], &[r], &ex).unwrap());
        }

        #[test]
        fn bleu_in_range(pairs in proptest::collection::vec((sentence(), sentence()), 1..6)) {
            let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let b = bleu(&c, &r).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        }
    }
}
