//! Character vocabulary and grapheme sequences.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: usize = 3;

/// Lower-case letters, digits, space and apostrophe.
pub const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 '";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new(CHARSET)
    }
}

impl Vocab {
    pub fn new(charset: &str) -> Self {
        Vocab {
            chars: charset.chars().collect(),
        }
    }

    /// Total token count including `<pad>`, `<sos>` and `<eos>`.
    pub fn size(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + SPECIALS)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(SPECIALS).and_then(|i| self.chars.get(i).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Input(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Text of `ids` up to the first `<eos>`, with special tokens removed.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter_map(|&id| self.char_of(id))
            .collect()
    }
}

/// Token sequence ending in exactly one `<eos>`, optionally followed by `<pad>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphemeSequence {
    tokens: Vec<usize>,
}

impl GraphemeSequence {
    pub fn from_tokens(tokens: Vec<usize>) -> Result<Self> {
        let eos: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == EOS)
            .map(|(i, _)| i)
            .collect();
        if eos.len() != 1 {
            return Err(Error::Input(format!(
                "grapheme sequence needs exactly one <eos>, found {}",
                eos.len()
            )));
        }
        let end = eos[0];
        if tokens[..end].iter().any(|&t| t == PAD || t == SOS) {
            return Err(Error::Input("special token inside grapheme sequence".into()));
        }
        if tokens[end + 1..].iter().any(|&t| t != PAD) {
            return Err(Error::Input("only <pad> may follow <eos>".into()));
        }
        Ok(GraphemeSequence { tokens })
    }

    pub fn from_text(vocab: &Vocab, text: &str) -> Result<Self> {
        let mut tokens = vocab.encode(text)?;
        tokens.push(EOS);
        Ok(GraphemeSequence { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Character tokens without `<eos>` or padding.
    pub fn chars(&self) -> &[usize] {
        let end = self.tokens.iter().position(|&t| t == EOS).unwrap_or(0);
        &self.tokens[..end]
    }

    /// Teacher-forcing decoder input: `<sos>` followed by the characters.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(SOS).chain(self.chars().iter().copied()).collect()
    }

    /// Prediction targets aligned with [`Self::decoder_input`]: characters then `<eos>`.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.chars()
            .iter()
            .copied()
            .chain(std::iter::once(EOS))
            .map(Some)
            .collect()
    }

    pub fn text(&self, vocab: &Vocab) -> String {
        vocab.decode(&self.tokens)
    }
}
