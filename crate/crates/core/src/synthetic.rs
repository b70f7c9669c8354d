//! Synthetic parallel English/Spanish NER data. Entity mentions come from a
//! lexicon shared by both languages; the surrounding words are
//! language-specific and never overlap with entity words, so tags are
//! determined by the words themselves.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::heads::LabeledExample;
use crate::seed;

pub const ENTITY_TYPES: [&str; 4] = ["ANATOMY", "DISEASE", "DRUG", "PROCEDURE"];

const DISEASE: &[&str] = &[
    "diabetes mellitus", "sarcoidosis", "psoriasis", "lupus", "tuberculosis", "melanoma", "glaucoma",
    "anemia", "hepatitis", "bronchiectasis", "fibromyalgia", "endometriosis", "acromegaly",
    "myasthenia gravis", "amyloidosis", "pancreatitis",
];
const DRUG: &[&str] = &[
    "metformin", "ibuprofen", "amoxicillin", "omeprazole", "atorvastatin", "warfarin", "levothyroxine",
    "prednisone", "insulin glargine", "salbutamol", "furosemide", "lisinopril", "clopidogrel",
    "tamoxifen", "methotrexate", "rituximab",
];
const PROCEDURE: &[&str] = &[
    "angioplasty", "appendectomy", "laparoscopy", "endoscopy", "mastectomy", "hemodialysis",
    "thoracentesis", "arthroscopy", "bronchoscopy", "cholecystectomy", "craniotomy", "lumbar puncture",
    "bone marrow biopsy", "cardiac catheterization", "spirometry", "echocardiography",
];
const ANATOMY: &[&str] = &[
    "femur", "pancreas", "aorta", "tibia", "retina", "duodenum", "thyroid gland", "left ventricle",
    "spleen", "cerebellum", "sternum", "bladder", "trachea", "liver", "esophagus", "cornea",
];

fn lexicon(kind: &str) -> &'static [&'static str] {
    match kind {
        "DISEASE" => DISEASE,
        "DRUG" => DRUG,
        "PROCEDURE" => PROCEDURE,
        "ANATOMY" => ANATOMY,
        _ => unreachable!("unknown entity type {kind}"),
    }
}

/// Parallel templates. `{TYPE}` marks a slot; slots appear in the same order
/// in both languages.
const TEMPLATES: &[(&str, &str)] = &[
    (
        "The patient was diagnosed with {DISEASE} and treated with {DRUG} .",
        "El paciente fue diagnosticado de {DISEASE} y tratado con {DRUG} .",
    ),
    (
        "A {PROCEDURE} of the {ANATOMY} was performed without complications .",
        "Se realizó una {PROCEDURE} del {ANATOMY} sin complicaciones .",
    ),
    (
        "She reports pain in the {ANATOMY} since last week .",
        "Refiere dolor en el {ANATOMY} desde la semana pasada .",
    ),
    (
        "History of {DISEASE} , currently on {DRUG} .",
        "Antecedentes de {DISEASE} , actualmente en tratamiento con {DRUG} .",
    ),
    (
        "We recommend {PROCEDURE} to rule out {DISEASE} .",
        "Se recomienda {PROCEDURE} para descartar {DISEASE} .",
    ),
    ("{DRUG} was suspended due to adverse effects .", "Se suspendió {DRUG} por efectos adversos ."),
    (
        "Imaging shows a lesion in the {ANATOMY} compatible with {DISEASE} .",
        "La imagen muestra una lesión en el {ANATOMY} compatible con {DISEASE} .",
    ),
    ("No relevant findings at this visit .", "Sin hallazgos relevantes en esta visita ."),
    (
        "The dose of {DRUG} was increased after the {PROCEDURE} .",
        "Se aumentó la dosis de {DRUG} tras la {PROCEDURE} .",
    ),
    (
        "Follow-up of {DISEASE} affecting the {ANATOMY} .",
        "Seguimiento de {DISEASE} que afecta al {ANATOMY} .",
    ),
    (
        "He denies allergies and takes {DRUG} and {DRUG} daily .",
        "Niega alergias y toma {DRUG} y {DRUG} a diario .",
    ),
    ("Family history of {DISEASE} .", "Antecedentes familiares de {DISEASE} ."),
    (
        "Scheduled for {PROCEDURE} next month because of worsening {DISEASE} .",
        "Programado para {PROCEDURE} el próximo mes por empeoramiento de {DISEASE} .",
    ),
    (
        "Physical examination of the {ANATOMY} was normal .",
        "La exploración física del {ANATOMY} fue normal .",
    ),
];

/// Fills a template, returning words and BIO tags.
fn realise(template: &str, fillers: &[&str], language: &str, doc_id: &str) -> LabeledExample {
    let mut words = Vec::new();
    let mut tags = Vec::new();
    let mut slot = 0;
    for token in template.split_whitespace() {
        match token.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
            Some(kind) => {
                for (i, w) in fillers[slot].split_whitespace().enumerate() {
                    words.push(w.to_string());
                    tags.push(format!("{}-{kind}", if i == 0 { "B" } else { "I" }));
                }
                slot += 1;
            }
            None => {
                words.push(token.to_string());
                tags.push("O".to_string());
            }
        }
    }
    LabeledExample { words, tags, language: language.into(), doc_id: doc_id.into() }
}

fn slots(template: &str) -> Vec<&str> {
    template
        .split_whitespace()
        .filter_map(|t| t.strip_prefix('{').and_then(|t| t.strip_suffix('}')))
        .collect()
}

/// Parallel corpora: `en[i]` and `es[i]` mention the same entities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelNer {
    pub en: Vec<LabeledExample>,
    pub es: Vec<LabeledExample>,
}

/// `n` parallel sentences, grouped into documents of `doc_len` sentences.
pub fn parallel_ner(n: usize, doc_len: usize, seed: u64) -> ParallelNer {
    let mut rng = seed::rng(seed, &[seed::STREAM, 0x4e45_52]);
    let mut en = Vec::with_capacity(n);
    let mut es = Vec::with_capacity(n);
    for i in 0..n {
        let (t_en, t_es) = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let fillers: Vec<&str> = slots(t_en)
            .iter()
            .map(|kind| *lexicon(kind).choose(&mut rng).expect("non-empty lexicon"))
            .collect();
        let doc = i / doc_len.max(1);
        en.push(realise(t_en, &fillers, "en", &format!("en-{doc}")));
        es.push(realise(t_es, &fillers, "es", &format!("es-{doc}")));
    }
    ParallelNer { en, es }
}

/// Running text for tokenizer training and pretraining: one sentence per
/// line, a blank line between documents.
pub fn plain_text(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        if i > 0 && examples[i - 1].doc_id != ex.doc_id {
            out.push('\n');
        }
        out.push_str(&ex.words.join(" "));
        out.push('\n');
    }
    out
}

/// Splits into consecutive train/dev/test parts of the given sizes.
pub fn split3<T: Clone>(items: &[T], train: usize, dev: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dev_end = (train + dev).min(items.len());
    let train = train.min(items.len());
    (items[..train].to_vec(), items[train..dev_end].to_vec(), items[dev_end..].to_vec())
}
