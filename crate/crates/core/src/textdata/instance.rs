use serde::{Deserialize, Serialize};

use crate::error::{Result, WrdError};
use crate::numerics::Rng;

const MAX_RESAMPLES: usize = 100;

/// One reordered sentence with its gold labels, 0-based.
///
/// `insert_idx` is where the moved word now sits ("I"); `orig_idx` is the
/// position it was popped from, read in the reordered sentence ("O").
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrdInstance {
    pub tokens: Vec<String>,
    #[serde(rename = "insert")]
    pub insert_idx: usize,
    #[serde(rename = "orig")]
    pub orig_idx: usize,
    #[serde(rename = "src")]
    pub source: String,
}

impl WrdInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Absolute distance between the gold positions.
    pub fn distance(&self) -> usize {
        self.insert_idx.abs_diff(self.orig_idx)
    }

    pub fn check_labels(&self) -> Result<()> {
        let n = self.tokens.len();
        if n < 2 || self.insert_idx >= n || self.orig_idx >= n || self.insert_idx == self.orig_idx {
            return Err(WrdError::Instance(format!(
                "labels (insert {}, orig {}) invalid for length {n}",
                self.insert_idx, self.orig_idx
            )));
        }
        Ok(())
    }
}

/// Pops `seq[from]` and re-inserts it so it lands at index `to` of the
/// result.
pub fn apply_move<T: Clone>(seq: &[T], from: usize, to: usize) -> Vec<T> {
    let mut out = seq.to_vec();
    let item = out.remove(from);
    out.insert(to, item);
    out
}

/// Builds the instance for a specific move `from → to`.
pub fn move_instance<S: AsRef<str>>(sentence: &[S], from: usize, to: usize) -> Result<WrdInstance> {
    let n = sentence.len();
    if n < 2 {
        return Err(WrdError::Instance(format!(
            "sentence of length {n} cannot be reordered"
        )));
    }
    if from >= n || to >= n || from == to {
        return Err(WrdError::Instance(format!(
            "invalid move {from} -> {to} for length {n}"
        )));
    }
    let tokens: Vec<String> = sentence.iter().map(|t| t.as_ref().to_string()).collect();
    let source = tokens.join(" ");
    Ok(WrdInstance {
        tokens: apply_move(&tokens, from, to),
        insert_idx: to,
        orig_idx: from,
        source,
    })
}

/// Moves one uniformly chosen word to a uniformly chosen different position.
/// Moves that leave the token sequence unchanged (possible with repeated
/// tokens) are redrawn.
pub fn generate_instance<S: AsRef<str>>(sentence: &[S], rng: &mut Rng) -> Result<WrdInstance> {
    let n = sentence.len();
    if n < 2 {
        return Err(WrdError::Instance(format!(
            "sentence of length {n} cannot be reordered"
        )));
    }
    if sentence.iter().all(|t| t.as_ref() == sentence[0].as_ref()) {
        return Err(WrdError::Degenerate(format!(
            "every move of `{}` leaves it unchanged",
            join(sentence)
        )));
    }
    for _ in 0..MAX_RESAMPLES {
        let (from, to) = sample_pair(n, rng);
        let inst = move_instance(sentence, from, to)?;
        if inst.tokens.iter().zip(sentence).any(|(a, b)| a != b.as_ref()) {
            return Ok(inst);
        }
    }
    Err(WrdError::Degenerate(format!(
        "no order-changing move found for `{}` after {MAX_RESAMPLES} draws",
        join(sentence)
    )))
}

/// Uniform ordered pair `(i, j)` with `i != j`.
pub fn sample_pair(n: usize, rng: &mut Rng) -> (usize, usize) {
    let i = rng.below(n);
    let mut j = rng.below(n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// True iff undoing the recorded move reproduces `original`.
pub fn verify_instance<S: AsRef<str>>(inst: &WrdInstance, original: &[S]) -> bool {
    if inst.check_labels().is_err() || inst.tokens.len() != original.len() {
        return false;
    }
    let restored = apply_move(&inst.tokens, inst.insert_idx, inst.orig_idx);
    restored.iter().zip(original).all(|(a, b)| a == b.as_ref())
}

fn join<S: AsRef<str>>(s: &[S]) -> String {
    s.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}
