//! Bag-of-words count vectors.

use crate::corpus::{Vocabulary, EOS_TOKEN};

/// Dense counts over the vocabulary. Unknown tokens count under `<unk>`; the
/// end-of-sequence marker is a sequence artifact and is not counted.
pub fn bow_vectorize<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Vec<f64> {
    let mut counts = vec![0.0; vocab.len()];
    for t in tokens {
        let t = t.as_ref();
        if t == EOS_TOKEN {
            continue;
        }
        counts[vocab.id(t).unwrap_or(Vocabulary::UNK_ID)] += 1.0;
    }
    counts
}
