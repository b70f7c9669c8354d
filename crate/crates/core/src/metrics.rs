//! Entity-level precision, recall and F1 over BIO tag sequences with strict
//! span matching.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub kind: String,
    /// Inclusive word index.
    pub start: usize,
    /// Exclusive word index.
    pub end: usize,
    pub sentence: usize,
}

/// A parsed BIO tag. Anything other than `O`, `B-X` or `I-X` reads as outside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Tag<'a> {
    pub fn parse(tag: &'a str) -> Self {
        match tag.split_once('-') {
            Some(("B", kind)) if !kind.is_empty() => Tag::Begin(kind),
            Some(("I", kind)) if !kind.is_empty() => Tag::Inside(kind),
            _ => Tag::Outside,
        }
    }

    pub fn kind(self) -> Option<&'a str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(k) | Tag::Inside(k) => Some(k),
        }
    }
}

/// True for `O`, `B-X` and `I-X` with a non-empty type.
pub fn is_valid_tag(tag: &str) -> bool {
    tag == "O" || Tag::parse(tag) != Tag::Outside
}

/// Spans of one sentence. In the default lenient mode an `I-X` that does not
/// continue an `X` entity opens a new one; `strict` drops such fragments.
pub fn extract_entities<S: AsRef<str>>(tags: &[S], strict: bool) -> Vec<EntitySpan> {
    extract_in_sentence(tags, strict, 0)
}

fn extract_in_sentence<S: AsRef<str>>(tags: &[S], strict: bool, sentence: usize) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    let mut close = |open: &mut Option<(&str, usize)>, end: usize| {
        if let Some((kind, start)) = open.take() {
            spans.push(EntitySpan { kind: kind.to_string(), start, end, sentence });
        }
    };
    for (i, tag) in tags.iter().enumerate() {
        match Tag::parse(tag.as_ref()) {
            Tag::Outside => close(&mut open, i),
            Tag::Begin(kind) => {
                close(&mut open, i);
                open = Some((kind, i));
            }
            Tag::Inside(kind) => match open {
                Some((k, _)) if k == kind => {}
                _ if strict => close(&mut open, i),
                _ => {
                    close(&mut open, i);
                    open = Some((kind, i));
                }
            },
        }
    }
    close(&mut open, tags.len());
    spans
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn scores(&self) -> Scores {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Scores { p, r, f1, support: self.support() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-type and averaged scores. `types` covers every type seen in gold or
/// predictions; the macro average runs over gold types only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub counts: BTreeMap<String, Counts>,
    pub types: BTreeMap<String, Scores>,
    pub micro: Scores,
    pub macro_avg: Scores,
}

impl MetricReport {
    /// `{types:{T:{p,r,f1,support}}, micro:{..}, macro:{..}}`, 4 decimals.
    pub fn to_json(&self) -> Value {
        let round = |x: f64| (x * 1e4).round() / 1e4;
        let score = |s: &Scores| json!({"p": round(s.p), "r": round(s.r), "f1": round(s.f1), "support": s.support});
        let types: serde_json::Map<String, Value> = self.types.iter().map(|(k, s)| (k.clone(), score(s))).collect();
        json!({"types": types, "micro": score(&self.micro), "macro": score(&self.macro_avg)})
    }
}

pub fn entity_prf<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<MetricReport> {
    entity_prf_with(gold, pred, false)
}

pub fn entity_prf_with<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>], strict: bool) -> Result<MetricReport> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!("{} gold sentences vs {} predicted", gold.len(), pred.len())));
    }
    let mut gold_spans = BTreeSet::new();
    let mut pred_spans = BTreeSet::new();
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Shape(format!("sentence {i}: {} gold tags vs {} predicted", g.len(), p.len())));
        }
        gold_spans.extend(extract_in_sentence(g, strict, i));
        pred_spans.extend(extract_in_sentence(p, strict, i));
    }

    let mut counts: BTreeMap<String, Counts> = BTreeMap::new();
    for span in &pred_spans {
        let c = counts.entry(span.kind.clone()).or_default();
        if gold_spans.contains(span) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for span in gold_spans.difference(&pred_spans) {
        counts.entry(span.kind.clone()).or_default().fn_ += 1;
    }

    let total = counts.values().fold(Counts::default(), |acc, c| Counts {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fn_: acc.fn_ + c.fn_,
    });
    let types: BTreeMap<String, Scores> = counts.iter().map(|(k, c)| (k.clone(), c.scores())).collect();
    let gold_types: Vec<&Scores> = types.values().filter(|s| s.support > 0).collect();
    let mean = |f: fn(&Scores) -> f64| {
        if gold_types.is_empty() {
            0.0
        } else {
            gold_types.iter().map(|s| f(s)).sum::<f64>() / gold_types.len() as f64
        }
    };
    let macro_avg = Scores {
        p: mean(|s| s.p),
        r: mean(|s| s.r),
        f1: mean(|s| s.f1),
        support: total.support(),
    };
    Ok(MetricReport {
        counts,
        types,
        micro: total.scores(),
        macro_avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tags(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn span(kind: &str, start: usize, end: usize) -> EntitySpan {
        EntitySpan { kind: kind.into(), start, end, sentence: 0 }
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(
            extract_entities(&tags("B-DIS I-DIS O B-CHEM"), false),
            vec![span("DIS", 0, 2), span("CHEM", 3, 4)]
        );
        assert!(extract_entities(&tags("O O O"), false).is_empty());
        assert_eq!(
            extract_entities(&tags("I-DIS I-DIS B-DIS"), false),
            vec![span("DIS", 0, 2), span("DIS", 2, 3)]
        );
        assert_eq!(
            extract_entities(&tags("B-A I-B I-B O I-A"), false),
            vec![span("A", 0, 1), span("B", 1, 3), span("A", 4, 5)]
        );
        assert_eq!(extract_entities(&tags("I-DIS I-DIS B-DIS"), true), vec![span("DIS", 2, 3)]);
        assert_eq!(extract_entities(&tags("B-A I-B I-B O"), true), vec![span("A", 0, 1)]);
    }

    #[test]
    fn tag_validation() {
        assert!(is_valid_tag("O") && is_valid_tag("B-X") && is_valid_tag("I-DRUG_NAME"));
        assert!(!is_valid_tag("B-") && !is_valid_tag("E-X") && !is_valid_tag("X"));
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = vec![tags("B-DIS I-DIS O B-CHEM"), tags("O B-CHEM")];
        let r = entity_prf(&gold, &gold).unwrap();
        for s in r.types.values().chain([&r.micro, &r.macro_avg]) {
            assert_eq!((s.p, s.r, s.f1), (1.0, 1.0, 1.0));
        }
        let r = entity_prf(&[tags("B-DIS O")], &[tags("O O")]).unwrap();
        assert_eq!((r.micro.p, r.micro.r, r.micro.f1), (0.0, 0.0, 0.0));
        assert!(entity_prf(&[tags("O O")], &[tags("O")]).is_err());
        assert!(entity_prf(&[tags("O")], &[]).is_err());
    }

    #[test]
    fn macro_ignores_prediction_only_types() {
        let r = entity_prf(&[tags("B-A O")], &[tags("B-A B-Z")]).unwrap();
        assert_eq!(r.types["Z"].support, 0);
        assert_eq!(r.macro_avg.f1, 1.0);
        assert!((r.micro.p - 0.5).abs() < 1e-15);
    }

    #[test]
    fn json_shape() {
        let r = entity_prf(&[tags("B-A O B-A")], &[tags("B-A O O")]).unwrap();
        let v = r.to_json();
        assert_eq!(v["types"]["A"]["r"], json!(0.5));
        assert_eq!(v["micro"]["f1"], json!(0.6667));
        assert_eq!(v["macro"]["support"], json!(2));
    }

    /// Span `[s, e)` of type X is an entity iff it opens X at `s`, continues
    /// with `I-X` only, and is not continued by an `I-X` at `e`.
    fn brute_force_spans(t: &[String], sentence: usize) -> BTreeSet<EntitySpan> {
        let n = t.len();
        let mut out = BTreeSet::new();
        for s in 0..n {
            for e in s + 1..=n {
                let Some(kind) = Tag::parse(&t[s]).kind() else { continue };
                let bx = format!("B-{kind}");
                let ix = format!("I-{kind}");
                let opens = t[s] == bx || (t[s] == ix && (s == 0 || (t[s - 1] != bx && t[s - 1] != ix)));
                let body = (s + 1..e).all(|k| t[k] == ix);
                let ends = e == n || t[e] != ix;
                if opens && body && ends {
                    out.insert(EntitySpan { kind: kind.to_string(), start: s, end: e, sentence });
                }
            }
        }
        out
    }

    fn brute_force_counts(gold: &[Vec<String>], pred: &[Vec<String>]) -> BTreeMap<String, Counts> {
        let g: BTreeSet<_> = gold.iter().enumerate().flat_map(|(i, t)| brute_force_spans(t, i)).collect();
        let p: BTreeSet<_> = pred.iter().enumerate().flat_map(|(i, t)| brute_force_spans(t, i)).collect();
        let mut counts: BTreeMap<String, Counts> = BTreeMap::new();
        for kind in g.iter().chain(&p).map(|s| s.kind.clone()) {
            counts.entry(kind).or_default();
        }
        for (kind, c) in counts.iter_mut() {
            c.tp = p.iter().filter(|s| &s.kind == kind && g.contains(s)).count();
            c.fp = p.iter().filter(|s| &s.kind == kind && !g.contains(s)).count();
            c.fn_ = g.iter().filter(|s| &s.kind == kind && !p.contains(s)).count();
        }
        counts
    }

    fn random_tags(rng: &mut impl Rng, n: usize) -> Vec<String> {
        const KINDS: [&str; 4] = ["DIS", "CHEM", "PROC", "ANAT"];
        (0..n)
            .map(|_| match rng.gen_range(0..3) {
                0 => "O".to_string(),
                1 => format!("B-{}", KINDS[rng.gen_range(0..4)]),
                _ => format!("I-{}", KINDS[rng.gen_range(0..4)]),
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let sentences = rng.gen_range(1..4);
            let (mut gold, mut pred) = (Vec::new(), Vec::new());
            for _ in 0..sentences {
                let n = rng.gen_range(0..12);
                gold.push(random_tags(&mut rng, n));
                let mut p = gold.last().unwrap().clone();
                for t in p.iter_mut() {
                    if rng.gen_bool(0.3) {
                        *t = random_tags(&mut rng, 1).remove(0);
                    }
                }
                pred.push(p);
            }
            let report = entity_prf(&gold, &pred).unwrap();
            assert_eq!(report.counts, brute_force_counts(&gold, &pred), "{gold:?} {pred:?}");
        }
    }

    #[test]
    fn swapping_gold_and_pred_swaps_p_and_r() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let g = vec![random_tags(&mut rng, 10)];
            let p = vec![random_tags(&mut rng, 10)];
            let a = entity_prf(&g, &p).unwrap().micro;
            let b = entity_prf(&p, &g).unwrap().micro;
            assert_eq!((a.p, a.r), (b.r, b.p));
            assert!((0.0..=1.0).contains(&a.f1));
        }
    }
}
