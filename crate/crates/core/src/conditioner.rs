//! Toy text conditioning: a closed vocabulary with a seeded embedding table,
//! bag-of-tokens prompt encoding, the null embedding, and condition scaling.
//!
//! The encoder is a deterministic stand-in for a learned text encoder. A
//! prompt embeds as the mean of its tokens' rows, so token order does not
//! matter; the empty prompt maps to a dedicated null row (row 0 of the
//! table), distinct from the zero vector.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Embedding width of the toy conditioner.
pub const COND_DIM: usize = 32;

/// Closed vocabulary with a seeded embedding table.
///
/// The table has `words.len() + 1` rows of width `d_c`; row 0 is the null
/// embedding, row `i + 1` belongs to `words[i]`. Rows are filled in order
/// with N(0, 1/sqrt(d_c)) draws from a single stream seeded by `embed_seed`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    table: Tensor<f32>,
    d_c: usize,
    embed_seed: u64,
}

impl Vocabulary {
    pub fn new(words: Vec<String>, d_c: usize, embed_seed: u64) -> Result<Self> {
        if d_c == 0 {
            return Err(Error::Config("vocabulary: embedding width must be positive".into()));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(|c| c.is_whitespace()) {
                return Err(Error::Config(format!("vocabulary: bad token {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("vocabulary: duplicate token {w:?}")));
            }
        }
        let mut rng = Rng::new(embed_seed);
        let rows = words.len() + 1;
        let scale = 1.0 / (d_c as f64).sqrt();
        let data: Vec<f32> =
            (0..rows * d_c).map(|_| (rng.next_normal() * scale) as f32).collect();
        let table = Tensor::new(vec![rows, d_c], data)?;
        Ok(Vocabulary { words, index, table, d_c, embed_seed })
    }

    /// The vocabulary every shipped model uses: shape, color, style, count,
    /// and filler words, 48 in total.
    pub fn standard(embed_seed: u64) -> Self {
        let words = STANDARD_WORDS.iter().map(|w| w.to_string()).collect();
        Vocabulary::new(words, COND_DIM, embed_seed).expect("standard vocabulary is valid")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn embed_seed(&self) -> u64 {
        self.embed_seed
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// The token's embedding row (not the null row).
    pub fn row(&self, word: &str) -> Result<Tensor<f32>> {
        let i = *self.index.get(word).ok_or_else(|| Error::UnknownToken(word.to_string()))?;
        self.table_row(i + 1)
    }

    pub fn null_embedding(&self) -> Tensor<f32> {
        self.table_row(0).expect("row 0 exists")
    }

    fn table_row(&self, r: usize) -> Result<Tensor<f32>> {
        let d = self.d_c;
        Tensor::new(vec![d], self.table.data()[r * d..(r + 1) * d].to_vec())
    }

    /// Splits on whitespace and lowercases ASCII; unknown words are errors.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let w = raw.to_ascii_lowercase();
            match self.index.get(&w) {
                Some(&i) => out.push(i),
                None => return Err(Error::UnknownToken(w)),
            }
        }
        Ok(out)
    }
}

const STANDARD_WORDS: [&str; 48] = [
    // shapes
    "circle", "square", "triangle",
    // colors
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", "white", "black",
    // styles
    "filled", "outline", "stripes", "checker",
    // counts
    "one", "two", "three",
    // size and tone
    "small", "large", "tiny", "huge", "bright", "dark", "pale", "deep",
    // filler
    "a", "an", "the", "of", "on", "in", "with", "and", "is", "are", "this", "that",
    "image", "picture", "shape", "pattern", "background", "plain", "color", "style",
];

/// Mean of the prompt tokens' embedding rows; the empty prompt returns the
/// dedicated null row exactly.
pub fn encode_prompt(text: &str, vocab: &Vocabulary) -> Result<Tensor<f32>> {
    let tokens = vocab.tokenize(text)?;
    if tokens.is_empty() {
        return Ok(vocab.null_embedding());
    }
    let d = vocab.d_c();
    let mut acc = vec![0.0f32; d];
    for &tok in &tokens {
        let row = &vocab.table.data()[(tok + 1) * d..(tok + 2) * d];
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let inv = 1.0 / tokens.len() as f32;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Tensor::new(vec![d], acc)
}

/// alpha * e_pos - beta * e_neg.
pub fn scale_condition<T: Scalar>(
    e_pos: &Tensor<T>,
    e_neg: &Tensor<T>,
    alpha: f64,
    beta: f64,
) -> Result<Tensor<T>> {
    if e_pos.shape() != e_neg.shape() {
        return Err(Error::Dimension("scale_condition: shape mismatch".into()));
    }
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Config(format!(
            "scale_condition: factors must be nonnegative, got ({alpha}, {beta})"
        )));
    }
    let a = T::from_f64(alpha);
    let b = T::from_f64(beta);
    let data = e_pos.data().iter().zip(e_neg.data()).map(|(&p, &n)| a * p - b * n).collect();
    let out = Tensor::new(e_pos.shape().to_vec(), data)?;
    out.ensure_finite("scale_condition")?;
    Ok(out)
}

/// The three-way condition set plus the scaled inversion condition.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub e_pos: Tensor<f32>,
    pub e_neg: Tensor<f32>,
    /// Null embedding, from the empty prompt.
    pub n: Tensor<f32>,
    /// alpha * e_pos - beta * e_neg.
    pub c_scaled: Tensor<f32>,
    pub alpha: f64,
    pub beta: f64,
}

impl ConditionBundle {
    /// Conditions in chunk order (src, pos, neg) = (null, positive, negative).
    pub fn c_tilde(&self) -> [&Tensor<f32>; 3] {
        [&self.n, &self.e_pos, &self.e_neg]
    }
}

/// Encodes both prompts and assembles the full bundle.
pub fn bundle(
    p_pos: &str,
    p_neg: &str,
    alpha: f64,
    beta: f64,
    vocab: &Vocabulary,
) -> Result<ConditionBundle> {
    let e_pos = encode_prompt(p_pos, vocab)?;
    let e_neg = encode_prompt(p_neg, vocab)?;
    let n = vocab.null_embedding();
    let c_scaled = scale_condition(&e_pos, &e_neg, alpha, beta)?;
    Ok(ConditionBundle { e_pos, e_neg, n, c_scaled, alpha, beta })
}
