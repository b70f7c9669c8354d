//! Entity-level precision, recall and F1 for BIO tag sequences.

use bilmforge::metrics::{entity_prf, entity_prf_with, extract_entities};

fn tags(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn main() -> bilmforge::Result<()> {
    let gold = vec![tags("B-DRUG O O B-DISEASE I-DISEASE O"), tags("O B-ANATOMY O")];
    let pred = vec![tags("B-DRUG O O B-DISEASE O O"), tags("O I-ANATOMY O")];

    for (i, t) in pred.iter().enumerate() {
        println!("pred {i}: lenient {:?}", extract_entities(t, false));
        println!("pred {i}: strict  {:?}", extract_entities(t, true));
    }
    let lenient = entity_prf(&gold, &pred)?;
    let strict = entity_prf_with(&gold, &pred, true)?;
    println!("lenient: {}", serde_json::to_string_pretty(&lenient.to_json())?);
    println!("strict micro F1 {:.4}", strict.micro.f1);
    Ok(())
}
