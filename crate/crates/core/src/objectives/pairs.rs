use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::models::PairObjective;
use crate::tokenizer::{encode_pair_ids, TokenizedSequence, Vocab};

/// Documents, each an ordered list of segments of token ids.
pub type Corpus = Vec<Vec<Vec<u32>>>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub segment_a: Vec<u32>,
    pub segment_b: Vec<u32>,
    pub is_positive: bool,
    pub objective: PairObjective,
    /// `(document, segment)` each side was taken from.
    pub source_a: (usize, usize),
    pub source_b: (usize, usize),
}

impl SentencePair {
    pub fn label(&self) -> f64 {
        if self.is_positive {
            1.0
        } else {
            0.0
        }
    }
}

fn check_segments(corpus: &Corpus) -> Result<()> {
    for (d, doc) in corpus.iter().enumerate() {
        if let Some(s) = doc.iter().position(|seg| seg.is_empty()) {
            return Err(Error::Dataset(format!("document {d} segment {s} is empty")));
        }
    }
    Ok(())
}

fn multi_segment_docs(corpus: &Corpus) -> Vec<usize> {
    (0..corpus.len()).filter(|&d| corpus[d].len() >= 2).collect()
}

/// Half the pairs (in expectation) are consecutive segments of one document;
/// the rest pair a segment with a random segment of a different document.
/// Documents with a single segment only ever supply negative second halves.
pub fn sample_nsp_pairs(corpus: &Corpus, n: usize, rng: &mut impl Rng) -> Result<Vec<SentencePair>> {
    check_segments(corpus)?;
    let nonempty: Vec<usize> = (0..corpus.len()).filter(|&d| !corpus[d].is_empty()).collect();
    if nonempty.len() < 2 {
        return Err(Error::Dataset(
            "next-sentence sampling needs at least 2 non-empty documents".into(),
        ));
    }
    let firsts = multi_segment_docs(corpus);
    if firsts.is_empty() {
        return Err(Error::Dataset(
            "next-sentence sampling needs a document with at least 2 segments".into(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let d = firsts[rng.gen_range(0..firsts.len())];
        let i = rng.gen_range(0..corpus[d].len() - 1);
        let (source_b, is_positive) = if rng.gen_bool(0.5) {
            ((d, i + 1), true)
        } else {
            let other = loop {
                let o = nonempty[rng.gen_range(0..nonempty.len())];
                if o != d {
                    break o;
                }
            };
            ((other, rng.gen_range(0..corpus[other].len())), false)
        };
        out.push(SentencePair {
            segment_a: corpus[d][i].clone(),
            segment_b: corpus[source_b.0][source_b.1].clone(),
            is_positive,
            objective: PairObjective::Nsp,
            source_a: (d, i),
            source_b,
        });
    }
    Ok(out)
}

/// Consecutive segments in order are positives; the same two segments
/// swapped are negatives.
pub fn sample_sop_pairs(corpus: &Corpus, n: usize, rng: &mut impl Rng) -> Result<Vec<SentencePair>> {
    check_segments(corpus)?;
    let docs = multi_segment_docs(corpus);
    if docs.is_empty() {
        return Err(Error::Dataset(
            "sentence-order sampling needs a document with at least 2 segments".into(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let d = docs[rng.gen_range(0..docs.len())];
        let i = rng.gen_range(0..corpus[d].len() - 1);
        let (first, second) = if rng.gen_bool(0.5) {
            ((d, i), (d, i + 1))
        } else {
            ((d, i + 1), (d, i))
        };
        out.push(SentencePair {
            segment_a: corpus[first.0][first.1].clone(),
            segment_b: corpus[second.0][second.1].clone(),
            is_positive: first.1 < second.1,
            objective: PairObjective::Sop,
            source_a: first,
            source_b: second,
        });
    }
    Ok(out)
}

/// Encodes pairs for the pair head; returns sequences and 0/1 labels.
pub fn encode_pairs(
    pairs: &[SentencePair],
    vocab: &Vocab,
    max_len: usize,
) -> Result<(Vec<TokenizedSequence>, Vec<f64>)> {
    if max_len < 5 {
        return Err(invalid("pair encoding needs max_len of at least 5"));
    }
    let mut seqs = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for p in pairs {
        seqs.push(encode_pair_ids(&p.segment_a, &p.segment_b, vocab, max_len)?);
        labels.push(p.label());
    }
    Ok((seqs, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus() -> Corpus {
        (0..5u32)
            .map(|d| (0..4u32).map(|s| vec![100 * d + s + 5]).collect())
            .collect()
    }

    #[test]
    fn nsp_balance_and_consecutive_positives() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pairs = sample_nsp_pairs(&c, 10_000, &mut rng).unwrap();
        let pos = pairs.iter().filter(|p| p.is_positive).count() as f64 / 1e4;
        assert!((pos - 0.5).abs() <= 0.02, "{pos}");
        for p in &pairs {
            if p.is_positive {
                assert_eq!(p.source_a.0, p.source_b.0);
                assert_eq!(p.source_a.1 + 1, p.source_b.1);
            } else {
                assert_ne!(p.source_a.0, p.source_b.0);
            }
            assert_eq!(p.segment_a, c[p.source_a.0][p.source_a.1]);
            assert_eq!(p.segment_b, c[p.source_b.0][p.source_b.1]);
        }
    }

    #[test]
    fn nsp_rejects_small_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = vec![vec![vec![5], vec![6]]];
        assert!(sample_nsp_pairs(&one, 3, &mut rng).is_err());
        let singles = vec![vec![vec![5]], vec![vec![6]]];
        assert!(sample_nsp_pairs(&singles, 3, &mut rng).is_err());
        let empty_seg = vec![vec![vec![5], vec![]], vec![vec![6]]];
        assert!(sample_nsp_pairs(&empty_seg, 3, &mut rng).is_err());
    }

    #[test]
    fn sop_negatives_are_swaps() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pairs = sample_sop_pairs(&c, 10_000, &mut rng).unwrap();
        let pos = pairs.iter().filter(|p| p.is_positive).count() as f64 / 1e4;
        assert!((pos - 0.5).abs() <= 0.02, "{pos}");
        for p in &pairs {
            assert_eq!(p.source_a.0, p.source_b.0);
            let (lo, hi) = if p.is_positive {
                (p.source_a.1, p.source_b.1)
            } else {
                (p.source_b.1, p.source_a.1)
            };
            assert_eq!(lo + 1, hi);
        }
        assert!(sample_sop_pairs(&vec![vec![vec![5]]], 1, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let c = corpus();
        let a = sample_nsp_pairs(&c, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_nsp_pairs(&c, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }
}
