//! Byte corpora: loading from disk and a seeded synthetic text generator
//! used for the bundled toy corpus and in tests.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn load(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    Ok(bytes)
}

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "this", "that"];
const ADJECTIVES: &[&str] = &[
    "small", "quiet", "bright", "old", "quick", "heavy", "narrow", "warm", "pale", "distant", "careful", "broken",
];
const NOUNS: &[&str] = &[
    "river", "engine", "garden", "teacher", "signal", "window", "market", "letter", "bridge", "forest", "harbor",
    "lamp", "machine", "village", "record", "station",
];
const VERBS: &[&str] = &[
    "follows", "carries", "watches", "repairs", "finds", "crosses", "builds", "reads", "moves", "holds", "opens",
    "measures",
];
const ADVERBS: &[&str] = &["slowly", "again", "today", "quietly", "often", "later"];
const CONNECTIVES: &[&str] = &["and then", "while", "because", "so", "but"];

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push_str(DETERMINERS.choose(rng).expect("nonempty"));
    out.push(' ');
    if rng.gen_bool(0.5) {
        out.push_str(ADJECTIVES.choose(rng).expect("nonempty"));
        out.push(' ');
    }
    out.push_str(NOUNS.choose(rng).expect("nonempty"));
}

fn clause(rng: &mut ChaCha8Rng, out: &mut String) {
    noun_phrase(rng, out);
    out.push(' ');
    out.push_str(VERBS.choose(rng).expect("nonempty"));
    out.push(' ');
    noun_phrase(rng, out);
    if rng.gen_bool(0.3) {
        out.push(' ');
        out.push_str(ADVERBS.choose(rng).expect("nonempty"));
    }
}

/// Deterministic English-like text of exactly `len` bytes.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(len + 128);
    while text.len() < len {
        let start = text.len();
        clause(&mut rng, &mut text);
        if rng.gen_bool(0.4) {
            text.push(' ');
            text.push_str(CONNECTIVES.choose(&mut rng).expect("nonempty"));
            text.push(' ');
            clause(&mut rng, &mut text);
        }
        // Capitalize the sentence.
        text[start..start + 1].make_ascii_uppercase();
        text.push_str(if rng.gen_bool(0.15) { ".\n" } else { ". " });
    }
    text.truncate(len);
    text.into_bytes()
}
