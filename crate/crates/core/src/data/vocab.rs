use std::collections::HashMap;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Whitespace tokenizer over a closed word list. Ids 0-3 are reserved for
/// padding, unknown words, and sentence begin/end.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary over the distinct words of `words`, sorted for determinism.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut list: Vec<&str> = words
            .into_iter()
            .filter(|w| !RESERVED.contains(w))
            .collect();
        list.sort_unstable();
        list.dedup();
        let tokens = RESERVED
            .iter()
            .copied()
            .chain(list)
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Words of `ids`, skipping reserved tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > EOS_ID || i == UNK_ID)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err("vocabulary must start with <pad> <unk> <s> </s>".into());
        }
        Ok(Self::from_tokens(tokens))
    }
}
