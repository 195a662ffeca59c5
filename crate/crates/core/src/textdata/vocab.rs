use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WrdError};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Frequency-capped token vocabulary with `PAD = 0` and `UNK = 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `max_size - 2` most frequent tokens, ties broken by first
    /// occurrence.
    pub fn build<'a, I, S>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        if max_size < 2 {
            return Err(WrdError::Config(format!(
                "vocabulary max_size {max_size} leaves no room for PAD and UNK"
            )));
        }
        // token -> (count, first occurrence)
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        for sentence in corpus {
            for tok in sentence {
                let tok = tok.as_ref();
                if tok == PAD_TOKEN || tok == UNK_TOKEN {
                    continue;
                }
                let order = stats.len();
                stats.entry(tok).or_insert((0, order)).0 += 1;
                seen += 1;
            }
        }
        if seen == 0 {
            return Err(WrdError::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize, usize)> = stats.into_iter().map(|(t, (c, f))| (t, c, f)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let kept = ranked.into_iter().take(max_size - 2).map(|(t, _, _)| t.to_string());
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(kept)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(WrdError::Input("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(WrdError::Input(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = WrdError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Builds a [`Vocabulary`]; see [`Vocabulary::build`].
pub fn build_vocab<'a, I, S>(corpus: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    Vocabulary::build(corpus, max_size)
}
