//! Synthetic needle-in-a-haystack data.
//!
//! A document is a shuffled list of short filler sentences with one needle,
//! `The code for <KEY> is <VALUE>.`, inserted at a random sentence position.
//! Optionally some fillers are decoys: facts of the same shape about keys
//! that no document in the same group asks for. Samples come in groups whose needle keys are distinct,
//! and each sample's negatives are the other documents of its group.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{CandidateSet, QaPair};

/// Letters used for keys. `T` and `W` are left out because the needle and
/// the instruction begin with them.
pub const KEY_LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSUVXYZ";
pub const KEY_LEN: usize = 3;
pub const VALUE_LEN: usize = 3;

const NOUNS: &[&str] = &["fox", "dog", "cat", "owl", "elm", "bay", "hill", "rain", "sea", "sky", "bee", "oak"];
const VERBS: &[&str] = &["ran", "fell", "sat", "grew", "hid", "slept", "rose", "sang", "swam", "dug"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticOptions {
    /// Documents per group; every sample gets `group - 1` negatives.
    pub group: usize,
    /// Filler sentences per document that are decoy facts.
    pub decoys: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self { group: 20, decoys: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSet {
    pub candidates: Vec<CandidateSet>,
    pub qa: Vec<QaPair>,
}

pub fn key_for(letter: u8) -> String {
    String::from_utf8(vec![letter; KEY_LEN]).expect("ascii")
}

pub fn needle_sentence(key: &str, value: &str) -> String {
    format!("The code for {key} is {value}.")
}

pub fn instruction_for(key: &str) -> String {
    format!("What is the code for {key}?")
}

fn value(rng: &mut ChaCha8Rng) -> String {
    let d = b'0' + rng.gen_range(0..10u8);
    String::from_utf8(vec![d; VALUE_LEN]).expect("ascii")
}

fn filler(rng: &mut ChaCha8Rng) -> String {
    format!("{}s {}.", NOUNS.choose(rng).expect("nouns"), VERBS.choose(rng).expect("verbs"))
}

/// A document with `fillers` filler sentences and the needle at a random
/// sentence position. Returns the text and the needle's sentence index.
fn document(rng: &mut ChaCha8Rng, key: &str, value_text: &str, fillers: usize, decoy_keys: &[u8], decoys: usize) -> (String, usize) {
    let decoys = decoys.min(fillers);
    let mut sentences = Vec::with_capacity(fillers + 1);
    for _ in 0..decoys {
        let letter = *decoy_keys.choose(rng).expect("decoy keys");
        sentences.push(needle_sentence(&key_for(letter), &value(rng)));
    }
    for _ in decoys..fillers {
        sentences.push(filler(rng));
    }
    sentences.shuffle(rng);
    let pos = rng.gen_range(0..=fillers);
    sentences.insert(pos, needle_sentence(key, value_text));
    (sentences.join(" "), pos)
}

/// `n` samples with `fillers_per_doc` filler sentences each.
pub fn gen_synthetic(n: usize, fillers_per_doc: usize, seed: u64) -> SyntheticSet {
    gen_synthetic_with(n, fillers_per_doc, seed, &SyntheticOptions::default())
}

pub fn gen_synthetic_with(n: usize, fillers_per_doc: usize, seed: u64, opts: &SyntheticOptions) -> SyntheticSet {
    let group = opts.group.clamp(2, KEY_LETTERS.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SyntheticSet { candidates: Vec::with_capacity(n), qa: Vec::with_capacity(n) };
    while out.qa.len() < n {
        let mut letters = KEY_LETTERS.to_vec();
        letters.shuffle(&mut rng);
        let (keys, spare) = letters.split_at(group);
        let docs: Vec<(String, String, String, usize)> = keys
            .iter()
            .map(|&k| {
                let key = key_for(k);
                let v = value(&mut rng);
                let (doc, pos) = document(&mut rng, &key, &v, fillers_per_doc, spare, opts.decoys);
                (key, v, doc, pos)
            })
            .collect();
        for (i, (key, v, doc, pos)) in docs.iter().enumerate() {
            if out.qa.len() == n {
                break;
            }
            let id = format!("syn-{:05}", out.qa.len());
            let instruction = instruction_for(key);
            let mut candidates = vec![doc.clone()];
            candidates.extend(docs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, d)| d.2.clone()));
            out.candidates.push(CandidateSet { id: id.clone(), instruction: instruction.clone(), candidates });
            out.qa.push(QaPair {
                id,
                instruction,
                document: doc.clone(),
                reference: v.clone(),
                needle_chunk_index: Some(*pos),
            });
        }
    }
    out
}

/// A document holding two needles for different keys, for checking that a
/// compressor's choice follows the instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TwoNeedleSample {
    pub document: String,
    pub instructions: [String; 2],
    pub references: [String; 2],
    pub needle_chunks: [usize; 2],
}

/// `n` documents of `fillers + 2` sentences: plain fillers plus two needles
/// at distinct random positions.
pub fn gen_two_needle(n: usize, fillers: usize, seed: u64) -> Vec<TwoNeedleSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let letters: Vec<u8> = KEY_LETTERS.choose_multiple(&mut rng, 2).copied().collect();
            let keys = [key_for(letters[0]), key_for(letters[1])];
            let values = [value(&mut rng), value(&mut rng)];
            let mut sentences: Vec<String> = (0..fillers).map(|_| filler(&mut rng)).collect();
            let mut positions: Vec<usize> = (0..fillers + 2).collect();
            positions.shuffle(&mut rng);
            let (mut a, mut b) = (positions[0], positions[1]);
            let first_is_a = a < b;
            if !first_is_a {
                std::mem::swap(&mut a, &mut b);
            }
            let (ka, kb) = if first_is_a { (0, 1) } else { (1, 0) };
            sentences.insert(a, needle_sentence(&keys[ka], &values[ka]));
            sentences.insert(b, needle_sentence(&keys[kb], &values[kb]));
            let mut needle_chunks = [0; 2];
            needle_chunks[ka] = a;
            needle_chunks[kb] = b;
            TwoNeedleSample {
                document: sentences.join(" "),
                instructions: [instruction_for(&keys[0]), instruction_for(&keys[1])],
                references: values,
                needle_chunks,
            }
        })
        .collect()
}
