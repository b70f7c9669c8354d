//! Corpus manifests and language balancing.
//!
//! A manifest lists every source corpus with its language, category and word
//! count. Balancing follows exponent-smoothed multinomial sampling:
//!
//! ```text
//! p_i = n_i / sum_j n_j
//! q_i = p_i^alpha / sum_j p_j^alpha
//! ```
//!
//! and is realised by duplicating the documents of under-represented
//! languages until their raw word share matches `q`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Document type of a source corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Medical,
    Clinical,
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "medical" => Ok(Category::Medical),
            "clinical" => Ok(Category::Clinical),
            other => Err(Error::invalid(format!("unknown category `{other}`"))),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Category::Medical => f.write_str("medical"),
            Category::Clinical => f.write_str("clinical"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub source_name: String,
    pub language: String,
    pub category: Category,
    pub word_count: u64,
    pub path: PathBuf,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    source: String,
    language: String,
    category: String,
    word_count: String,
    path: String,
}

/// Reads a manifest CSV. Relative document paths resolve against the
/// manifest's directory. Word counts are taken as written.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<CorpusEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, path, base)
}

pub(crate) fn parse_manifest(text: &str, origin: &Path, base: &Path) -> Result<Vec<CorpusEntry>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if !headers.is_empty() {
        let expected = ["source", "language", "category", "word_count", "path"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(parse_err(
                1,
                format!("expected header `{}`", expected.join(",")),
            ));
        }
    }

    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row: ManifestRow = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;

        let count: i128 = row
            .word_count
            .replace('_', "")
            .parse()
            .map_err(|_| parse_err(line, format!("bad word count `{}`", row.word_count)))?;
        if count < 0 {
            return Err(parse_err(line, format!("negative word count {count}")));
        }
        let word_count =
            u64::try_from(count).map_err(|_| parse_err(line, "word count overflows".into()))?;
        let category = row
            .category
            .parse::<Category>()
            .map_err(|e| parse_err(line, e.to_string()))?;
        if row.language.is_empty() {
            return Err(parse_err(line, "empty language code".into()));
        }
        if !seen.insert(row.source.clone()) {
            return Err(parse_err(line, format!("duplicate source `{}`", row.source)));
        }
        entries.push(CorpusEntry {
            source_name: row.source,
            language: row.language,
            category,
            word_count,
            path: base.join(row.path),
        });
    }
    Ok(entries)
}

/// Per-language row of a [`SamplingPlan`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanguageShare {
    pub n: u64,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub alpha: f64,
    pub languages: BTreeMap<String, LanguageShare>,
    pub excluded_categories: BTreeSet<Category>,
}

impl SamplingPlan {
    /// Serialises the plan (with per-language factors) as the export JSON
    /// object, rounding every real to 12 significant digits.
    pub fn to_export_json(&self) -> Result<String> {
        let factors = if self.languages.len() >= 2 {
            oversample_factors(self)?
        } else {
            self.languages.keys().map(|k| (k.clone(), 1.0)).collect()
        };
        let languages: serde_json::Map<String, serde_json::Value> = self
            .languages
            .iter()
            .map(|(lang, share)| {
                let row = serde_json::json!({
                    "n": share.n,
                    "p": sig12(share.p),
                    "q": sig12(share.q),
                    "factor": sig12(factors[lang]),
                });
                (lang.clone(), row)
            })
            .collect();
        let doc = serde_json::json!({
            "alpha": sig12(self.alpha),
            "languages": languages,
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Rounds to 12 significant decimal digits.
pub(crate) fn sig12(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// Computes the balancing plan over every entry whose category is not in
/// `exclude`, aggregating word counts by language.
pub fn compute_sampling(
    entries: &[CorpusEntry],
    alpha: f64,
    exclude: &BTreeSet<Category>,
) -> Result<SamplingPlan> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for entry in entries.iter().filter(|e| !exclude.contains(&e.category)) {
        *counts.entry(entry.language.clone()).or_default() += entry.word_count;
    }
    if counts.is_empty() {
        return Err(Error::invalid("every manifest entry was excluded"));
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(Error::invalid("included entries have zero words"));
    }

    let p: BTreeMap<&str, f64> = counts
        .iter()
        .map(|(lang, &n)| (lang.as_str(), n as f64 / total as f64))
        .collect();
    let z: f64 = p.values().map(|pi| pi.powf(alpha)).sum();

    let languages = counts
        .iter()
        .map(|(lang, &n)| {
            let pi = p[lang.as_str()];
            (
                lang.clone(),
                LanguageShare {
                    n,
                    p: pi,
                    q: pi.powf(alpha) / z,
                },
            )
        })
        .collect();

    Ok(SamplingPlan {
        alpha,
        languages,
        excluded_categories: exclude.clone(),
    })
}

/// Duplication factor per language that turns raw word shares into the
/// plan's target `q` shares. The largest language keeps factor 1.
pub fn oversample_factors(plan: &SamplingPlan) -> Result<BTreeMap<String, f64>> {
    if plan.languages.len() < 2 {
        return Err(Error::invalid("oversampling needs at least two languages"));
    }
    // First language wins ties on the largest count.
    let (_, largest) = plan
        .languages
        .iter()
        .fold(None::<(&String, &LanguageShare)>, |best, (k, v)| match best {
            Some((_, b)) if b.n >= v.n => best,
            _ => Some((k, v)),
        })
        .expect("non-empty");
    let largest = *largest;

    plan.languages
        .iter()
        .map(|(lang, share)| {
            if share.n == 0 {
                return Err(Error::invalid(format!("language `{lang}` has zero words")));
            }
            let f = (share.q / largest.q) * (largest.n as f64 / share.n as f64);
            Ok((lang.clone(), f))
        })
        .collect()
}

/// One blank-line-separated block of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Document {
    pub language: String,
    pub source: String,
    pub text: String,
}

impl Document {
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

/// Splits a text into documents on blank lines.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line.trim_end());
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    docs
}

pub fn read_documents(entry: &CorpusEntry) -> Result<Vec<Document>> {
    let text = fs::read_to_string(&entry.path).map_err(|e| Error::io(&entry.path, e))?;
    Ok(split_documents(&text)
        .into_iter()
        .map(|text| Document {
            language: entry.language.clone(),
            source: entry.source_name.clone(),
            text,
        })
        .collect())
}

/// Result of recounting one entry's words on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct WordCountCheck {
    pub source_name: String,
    pub declared: u64,
    pub counted: u64,
}

impl WordCountCheck {
    pub fn relative_deviation(&self) -> f64 {
        if self.declared == 0 {
            return if self.counted == 0 { 0.0 } else { f64::INFINITY };
        }
        (self.counted as f64 - self.declared as f64).abs() / self.declared as f64
    }

    pub fn is_suspicious(&self) -> bool {
        self.relative_deviation() > 0.05
    }
}

/// Recounts whitespace-separated words of each entry and logs a warning for
/// deviations above 5%.
pub fn verify_word_counts(entries: &[CorpusEntry]) -> Result<Vec<WordCountCheck>> {
    entries
        .iter()
        .map(|entry| {
            let text = fs::read_to_string(&entry.path).map_err(|e| Error::io(&entry.path, e))?;
            let check = WordCountCheck {
                source_name: entry.source_name.clone(),
                declared: entry.word_count,
                counted: text.split_whitespace().count() as u64,
            };
            if check.is_suspicious() {
                log::warn!(
                    "{}: manifest declares {} words, file has {}",
                    check.source_name,
                    check.declared,
                    check.counted
                );
            }
            Ok(check)
        })
        .collect()
}

/// Builds the oversampled, shuffled document stream.
///
/// Entries of an excluded category pass through once. Every other language
/// is repeated `floor(f)` times, plus one extra pass over a seeded subset of
/// `ceil(frac(f) * n_docs)` documents.
pub fn emit_balanced_stream(
    entries: &[CorpusEntry],
    plan: &SamplingPlan,
    factors: &BTreeMap<String, f64>,
    seed: u64,
) -> Result<Vec<Document>> {
    let mut by_language: BTreeMap<&str, Vec<Document>> = BTreeMap::new();
    let mut passthrough = Vec::new();
    for entry in entries {
        let docs = read_documents(entry)?;
        if plan.excluded_categories.contains(&entry.category) {
            passthrough.extend(docs);
        } else {
            by_language.entry(entry.language.as_str()).or_default().extend(docs);
        }
    }

    let mut stream = passthrough;
    for (lang_index, (lang, docs)) in by_language.into_iter().enumerate() {
        let factor = factors.get(lang).copied().unwrap_or(1.0);
        if !(factor.is_finite() && factor >= 0.0) {
            return Err(Error::invalid(format!("bad factor {factor} for `{lang}`")));
        }
        let whole = factor.floor() as usize;
        let extra = ((factor - factor.floor()) * docs.len() as f64).ceil() as usize;
        for _ in 0..whole {
            stream.extend(docs.iter().cloned());
        }
        if extra > 0 {
            let mut rng = seed::rng(seed, &[seed::STREAM, lang_index as u64]);
            let mut picked = rand::seq::index::sample(&mut rng, docs.len(), extra.min(docs.len()))
                .into_vec();
            picked.sort_unstable();
            stream.extend(picked.into_iter().map(|i| docs[i].clone()));
        }
    }

    if stream.is_empty() {
        return Err(Error::Empty("balanced stream has no documents".into()));
    }
    let mut rng = seed::rng(seed, &[seed::STREAM, u64::MAX]);
    stream.shuffle(&mut rng);
    Ok(stream)
}
