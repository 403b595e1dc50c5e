use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::tokenizer::LineTokenizer;
use crate::error::{HlsError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const MASK: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;
pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]", "[BOS]", "[EOS]"];
pub const NUM_RESERVED: usize = RESERVED.len();

/// Token ↔ id map. Reserved tokens occupy ids `0..NUM_RESERVED` in the order
/// of [`RESERVED`]; ordinary tokens follow by descending corpus frequency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Counts tokens over `texts`; keeps at most `max_size` entries
    /// (reserved included), dropping tokens seen fewer than `min_freq` times.
    /// Frequency ties break lexicographically.
    pub fn build<'a, I, T>(texts: I, tokenizer: &T, max_size: usize, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
        T: LineTokenizer + ?Sized,
    {
        if max_size <= NUM_RESERVED {
            return Err(HlsError::Config(format!(
                "vocabulary size {max_size} leaves no room beyond {NUM_RESERVED} reserved tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0;
        for text in texts {
            docs += 1;
            for line in text.lines() {
                for tok in tokenizer.tokenize_line(line) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if docs == 0 {
            return Err(HlsError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_RESERVED);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens(ordinary: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(ordinary).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < NUM_RESERVED
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED {
            return Err(HlsError::Parse {
                line: 1,
                msg: format!("{} does not start with the reserved token block", path.display()),
            });
        }
        let vocab = Self::from_tokens(tokens[NUM_RESERVED..].iter().map(|s| s.to_string()));
        if vocab.index.len() != vocab.tokens.len() {
            return Err(HlsError::Parse {
                line: 0,
                msg: format!("{} contains duplicate tokens", path.display()),
            });
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::segmenter::tokenizer::CTokenizer;

    #[test]
    fn reserved_tokens_come_first() {
        let v = Vocab::build(["a a b"], &CTokenizer, 8, 1).unwrap();
        assert_eq!(v.len(), 8);
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i);
        }
        assert_eq!(v.id("a"), NUM_RESERVED);
        assert_eq!(v.id("b"), NUM_RESERVED + 1);
    }

    #[test]
    fn min_freq_excludes_rare_tokens() {
        let v = Vocab::build(["a a b"], &CTokenizer, 8, 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn empty_corpus_and_tiny_size_are_errors() {
        assert!(matches!(Vocab::build(std::iter::empty(), &CTokenizer, 8, 1), Err(HlsError::EmptyCorpus)));
        assert!(Vocab::build(["a"], &CTokenizer, NUM_RESERVED, 1).is_err());
    }

    #[test]
    fn ordering_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let alphabet = ["x", "y", "z", "w", "q", "r", "s", "t"];
        let docs: Vec<String> = (0..30)
            .map(|_| {
                (0..rng.random_range(1..12))
                    .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let v = Vocab::build(docs.iter().map(String::as_str), &CTokenizer, 6 + 5, 1).unwrap();

        let mut counts: Vec<(usize, &str)> = alphabet
            .iter()
            .map(|a| (docs.iter().map(|d| d.split(' ').filter(|t| t == a).count()).sum(), *a))
            .filter(|(c, _)| *c > 0)
            .collect();
        counts.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
        let expected: Vec<&str> = counts.iter().take(5).map(|(_, t)| *t).collect();
        let got: Vec<&str> = (NUM_RESERVED..v.len()).map(|i| v.token(i).unwrap()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::build(["int f ( ) { return \"a b\" ; }"], &CTokenizer, 100, 1).unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        std::fs::write(&p, "a\nb\n").unwrap();
        assert!(Vocab::load(&p).is_err());
    }
}
