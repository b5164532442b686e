//! Procedural character-level corpora.
//!
//! Sequences have the shape `source MARKER answer .`. The base corpus teaches
//! two instructions over a shared alphabet: `>` copies the source and `<`
//! reverses it. The shifted corpus introduces a third marker `=` whose answer
//! is the source reversed, a behavior the base corpus never pairs with that
//! marker. Scoring looks only at answer positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Display strings for token ids `0..64`.
pub const VOCAB_STRINGS: [&str; 64] = [
    ".", ">", "<", "=", "|", "#", "?", "!", "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k",
    "l", "m", "n", "o", "p", "q", "r", "s", "t", "u", "v", "w", "x", "y", "z", "0", "1", "2", "3",
    "4", "5", "6", "7", "8", "9", "[44]", "[45]", "[46]", "[47]", "[48]", "[49]", "[50]", "[51]",
    "[52]", "[53]", "[54]", "[55]", "[56]", "[57]", "[58]", "[59]", "[60]", "[61]", "[62]", "[63]",
];

const END: usize = 0;
const COPY: usize = 1;
const REVERSE: usize = 2;
const SHIFTED: usize = 3;
const FIRST_LETTER: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sequences: Vec<Vec<usize>>,
    pub token_strings: Vec<String>,
    /// Number of leading prompt tokens per sequence; later positions are answers.
    pub prompt_lens: Vec<usize>,
}

impl Corpus {
    pub fn new(sequences: Vec<Vec<usize>>, token_strings: Vec<String>) -> Self {
        let prompt_lens = vec![0; sequences.len()];
        Corpus {
            sequences,
            token_strings,
            prompt_lens,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (i, seq) in self.sequences.iter().enumerate() {
            if let Some(&bad) = seq.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::contract(format!(
                    "sequence {i} holds token {bad} outside vocab of {vocab_size}"
                )));
            }
        }
        if self.token_strings.len() < vocab_size {
            return Err(Error::contract(format!(
                "{} token strings for vocab of {vocab_size}",
                self.token_strings.len()
            )));
        }
        Ok(())
    }

    pub fn token_str(&self, id: usize) -> &str {
        self.token_strings.get(id).map_or("?", String::as_str)
    }

    /// Concatenated display text of a token slice.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&t| self.token_str(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of letters drawn from, starting at `a`.
    pub alphabet: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sequences: 2000,
            min_len: 3,
            max_len: 8,
            alphabet: 12,
        }
    }
}

/// `(base, shifted)` corpora with default sizes.
pub fn synth_tasks(seed: u64) -> (Corpus, Corpus) {
    synth_tasks_with(&SynthConfig::default(), seed)
}

pub fn synth_tasks_with(config: &SynthConfig, seed: u64) -> (Corpus, Corpus) {
    assert!(config.min_len >= 1 && config.min_len <= config.max_len);
    assert!(config.alphabet >= 2 && FIRST_LETTER + config.alphabet <= 34);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strings: Vec<String> = VOCAB_STRINGS.iter().map(|s| s.to_string()).collect();

    let mut base = Vec::with_capacity(config.n_sequences);
    for i in 0..config.n_sequences {
        let marker = if i % 2 == 0 { COPY } else { REVERSE };
        base.push(make_sequence(&mut rng, config, marker));
    }
    let mut shifted = Vec::with_capacity(config.n_sequences);
    for _ in 0..config.n_sequences {
        shifted.push(make_sequence(&mut rng, config, SHIFTED));
    }
    (to_corpus(base, &strings), to_corpus(shifted, &strings))
}

fn make_sequence(rng: &mut ChaCha8Rng, config: &SynthConfig, marker: usize) -> (Vec<usize>, usize) {
    let len = rng.random_range(config.min_len..=config.max_len);
    let source: Vec<usize> = (0..len)
        .map(|_| FIRST_LETTER + rng.random_range(0..config.alphabet))
        .collect();
    let mut seq = source.clone();
    seq.push(marker);
    let prompt_len = seq.len();
    match marker {
        COPY => seq.extend(&source),
        _ => seq.extend(source.iter().rev()),
    }
    seq.push(END);
    (seq, prompt_len)
}

fn to_corpus(rows: Vec<(Vec<usize>, usize)>, strings: &[String]) -> Corpus {
    let (sequences, prompt_lens) = rows.into_iter().unzip();
    Corpus {
        sequences,
        token_strings: strings.to_vec(),
        prompt_lens,
    }
}
