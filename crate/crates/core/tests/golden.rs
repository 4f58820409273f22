//! Pseudo-description expansions checked byte for byte against fixtures.

use clear_core::error::ClearError;
use clear_core::query::{build_pseudo_description, tokenize, DEFAULT_N_WORDS, PAD_WORD};
use clear_core::schema::AttributeSchema;
use serde::{Deserialize, Serialize};

const SCHEMA: &str = include_str!("data/pedestrian_schema.json");
const GOLDEN: &str = include_str!("data/golden_descriptions.jsonl");

#[derive(Serialize, Deserialize)]
struct Golden {
    attributes: Vec<String>,
    text: String,
}

fn schema() -> AttributeSchema {
    AttributeSchema::from_json(SCHEMA).unwrap()
}

#[test]
fn ten_fixed_queries_expand_byte_exact() {
    let schema = schema();
    let cases: Vec<Golden> = GOLDEN.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(cases.len(), 10);
    let mut regenerated = String::new();
    for case in &cases {
        let names: Vec<&str> = case.attributes.iter().map(String::as_str).collect();
        let query = schema.query_from_names(&names).unwrap();
        let desc = build_pseudo_description(&schema, &query, DEFAULT_N_WORDS).unwrap();
        assert_eq!(desc.text, case.text, "query {names:?}");
        let line = Golden { attributes: case.attributes.clone(), text: desc.text };
        regenerated.push_str(&serde_json::to_string(&line).unwrap());
        regenerated.push('\n');
    }
    assert_eq!(regenerated.as_bytes(), GOLDEN.as_bytes());
}

#[test]
fn reference_example_prefix() {
    let schema = schema();
    let q = schema
        .query_from_names(&[
            "young", "female", "long_hair", "lower_blue", "jeans", "upper_white", "tshirt", "short_sleeve", "hat",
            "handbag",
        ])
        .unwrap();
    let desc = build_pseudo_description(&schema, &q, DEFAULT_N_WORDS).unwrap();
    assert!(desc.text.starts_with(
        "this is a photo of young woman with long hair, is dressed in a blue jeans and a white t-shirt \
         with short sleeves, is wearing a hat, carrying handbag"
    ));
}

#[test]
fn words_are_tokenized_text_padded_to_length() {
    let schema = schema();
    for line in GOLDEN.lines() {
        let case: Golden = serde_json::from_str(line).unwrap();
        let names: Vec<&str> = case.attributes.iter().map(String::as_str).collect();
        let query = schema.query_from_names(&names).unwrap();
        for n in [8, DEFAULT_N_WORDS] {
            let desc = build_pseudo_description(&schema, &query, n).unwrap();
            let tokens = tokenize(&case.text);
            assert_eq!(desc.words.len(), n);
            let kept = tokens.len().min(n);
            assert_eq!(&desc.words[..kept], &tokens[..kept]);
            assert!(desc.words[kept..].iter().all(|w| w == PAD_WORD));
        }
    }
    assert_eq!(tokenize("a white t-shirt, carrying handbag."), ["a", "white", "t-shirt", "carrying", "handbag"]);
}

#[test]
fn two_values_in_a_single_valued_slot_are_rejected() {
    let schema = schema();
    let q = schema.query_from_names(&["female", "male"]).unwrap();
    assert!(matches!(
        build_pseudo_description(&schema, &q, DEFAULT_N_WORDS),
        Err(ClearError::AmbiguousQuery { .. })
    ));
}
