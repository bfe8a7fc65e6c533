use crate::error::{Error, Result};

/// Codebook of `V` content tokens plus End (`V`) and Pad (`V + 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    codebook_size: usize,
}

impl Vocabulary {
    pub fn new(codebook_size: usize) -> Result<Self> {
        if codebook_size == 0 {
            return Err(Error::InvalidArgument("codebook must be non-empty".into()));
        }
        Ok(Self { codebook_size })
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn end_id(&self) -> usize {
        self.codebook_size
    }

    pub fn pad_id(&self) -> usize {
        self.codebook_size + 1
    }

    pub fn total(&self) -> usize {
        self.codebook_size + 2
    }

    pub fn is_content(&self, id: usize) -> bool {
        id < self.codebook_size
    }
}

/// Codebook tokens terminated by exactly one End token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<usize>,
}

impl TokenSequence {
    /// Validates `tokens` (End included) against the vocabulary and `max_len`.
    pub fn new(tokens: Vec<usize>, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let len = tokens.len();
        if len == 0 || len > max_len {
            return Err(Error::InvalidSequence(format!(
                "length {len} outside 1..={max_len}"
            )));
        }
        if tokens[len - 1] != vocab.end_id() {
            return Err(Error::InvalidSequence("last token is not End".into()));
        }
        if let Some(pos) = tokens[..len - 1].iter().position(|&t| !vocab.is_content(t)) {
            return Err(Error::InvalidSequence(format!(
                "token {} at position {pos} is not a codebook id",
                tokens[pos]
            )));
        }
        Ok(Self { tokens })
    }

    /// Builds a sequence from content tokens, appending End.
    pub fn from_content(content: &[usize], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let mut tokens = content.to_vec();
        tokens.push(vocab.end_id());
        Self::new(tokens, vocab, max_len)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Tokens before End.
    pub fn content(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_ids_sit_outside_the_codebook() {
        let v = Vocabulary::new(32).unwrap();
        assert_eq!((v.end_id(), v.pad_id(), v.total()), (32, 33, 34));
        assert!(!v.is_content(v.end_id()) && !v.is_content(v.pad_id()));
    }

    #[test]
    fn sequence_validation() {
        let v = Vocabulary::new(4).unwrap();
        assert!(TokenSequence::new(vec![1, 2, 4], &v, 8).is_ok());
        assert!(TokenSequence::new(vec![4], &v, 8).is_ok());
        assert!(TokenSequence::new(vec![], &v, 8).is_err());
        assert!(TokenSequence::new(vec![1, 2], &v, 8).is_err());
        assert!(TokenSequence::new(vec![1, 4, 4], &v, 8).is_err());
        assert!(TokenSequence::new(vec![1, 5, 4], &v, 8).is_err());
        assert!(TokenSequence::new(vec![0, 0, 0, 4], &v, 3).is_err());
    }
}
