//! Caption tokenization, stemming, vocabulary and embeddings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MAX_VOCAB: usize = 235;
pub const MAX_CAPTION_LEN: usize = 43;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

const SUFFIX_RULES: [(&str, &str); 5] = [("ies", "y"), ("es", ""), ("s", ""), ("ing", ""), ("ed", "")];
const MIN_STEM: usize = 3;

/// Strips the first applicable inflection suffix. A rule only fires when at
/// least three characters remain.
pub fn stem(token: &str) -> String {
    for (suffix, repl) in SUFFIX_RULES {
        if let Some(base) = token.strip_suffix(suffix) {
            if base.chars().count() + repl.len() >= MIN_STEM {
                return format!("{base}{repl}");
            }
        }
    }
    token.to_string()
}

pub fn stems(text: &str) -> Vec<String> {
    tokenize(text).iter().map(|t| stem(t)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    words: Vec<String>,
}

/// Token ids of one caption, possibly padded with [`PAD`] after `true_length`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionIds {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

impl CaptionIds {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() > MAX_CAPTION_LEN {
            return Err(Error::Contract(format!(
                "caption has {} tokens, the limit is {MAX_CAPTION_LEN}",
                ids.len()
            )));
        }
        let true_length = ids.len();
        Ok(CaptionIds { ids, true_length })
    }

    pub fn real(&self) -> &[usize] {
        &self.ids[..self.true_length]
    }

    pub fn padded_to(&self, n: usize) -> Result<Self> {
        if n < self.ids.len() || n > MAX_CAPTION_LEN {
            return Err(Error::Contract(format!(
                "cannot pad a caption of {} tokens to {n}",
                self.ids.len()
            )));
        }
        let mut ids = self.ids.clone();
        ids.resize(n, PAD);
        Ok(CaptionIds {
            ids,
            true_length: self.true_length,
        })
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i >= self.true_length).collect()
    }
}

impl Vocab {
    /// Ranks stems by corpus frequency (ties lexicographic) and keeps the top
    /// `max_size - 2` after the reserved PAD and UNK ids.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Contract("vocabulary corpus is empty".into()));
        }
        if max_size < 2 {
            return Err(Error::Config("vocabulary needs room for PAD and UNK".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for caption in corpus {
            for s in stems(caption.as_ref()) {
                *counts.entry(s).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 2);
        Self::from_words(ranked.into_iter().map(|(w, _)| w))
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut v = Vocab {
            index: HashMap::new(),
            words: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
        };
        for w in words {
            if v.index.contains_key(&w) || w == PAD_TOKEN || w == UNK_TOKEN {
                return Err(Error::Contract(format!("duplicate vocabulary entry {w:?}")));
            }
            v.index.insert(w.clone(), v.words.len());
            v.words.push(w);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, stem: &str) -> usize {
        self.index.get(stem).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Tokenizes, stems and maps a caption. Returns the ids and the words that
    /// fell back to UNK.
    pub fn encode(&self, text: &str) -> Result<(CaptionIds, Vec<String>)> {
        let mut unknown = Vec::new();
        let ids = tokenize(text)
            .into_iter()
            .map(|tok| {
                let id = self.id(&stem(&tok));
                if id == UNK {
                    unknown.push(tok);
                }
                id
            })
            .collect();
        Ok((CaptionIds::new(ids)?, unknown))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, w) in self.words.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{w}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (id, word) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: "expected <id>\\t<stem>".into(),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Parse {
                line: n + 1,
                msg: format!("bad id {id:?}"),
            })?;
            if id != n {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("ids must ascend from 0, found {id}"),
                });
            }
            words.push(word.to_string());
        }
        if words.len() < 2 || words[PAD] != PAD_TOKEN || words[UNK] != UNK_TOKEN {
            return Err(Error::Parse {
                line: 1,
                msg: "vocabulary must start with the reserved PAD and UNK entries".into(),
            });
        }
        Self::from_words(words.into_iter().skip(2))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Sinusoidal position table: `p[pos, 2j] = sin(pos / 10000^(2j/d))` and
/// `p[pos, 2j+1] = cos(...)` of the same angle.
pub fn positional_encoding(max_len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) || max_len == 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even positive width and length, got {max_len}×{d}"
        )));
    }
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for j in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
            data[pos * d + 2 * j] = angle.sin();
            data[pos * d + 2 * j + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d], data)
}

/// Row `i` is `E[ids[i]] + P[i]`. Returns the rows and the PAD mask.
pub fn embed(ids: &CaptionIds, table: &Tensor, positions: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    let d = table.cols();
    if positions.cols() != d {
        return Err(Error::shape("embed", table.shape(), positions.shape()));
    }
    if ids.ids.len() > positions.rows() {
        return Err(Error::Index {
            index: ids.ids.len() - 1,
            bound: positions.rows(),
        });
    }
    let mut rows = Vec::with_capacity(ids.ids.len());
    for (i, &id) in ids.ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::Index {
                index: id,
                bound: table.rows(),
            });
        }
        rows.push(table.row(id).iter().zip(positions.row(i)).map(|(e, p)| e + p).collect());
    }
    Ok((Tensor::from_rows(&rows)?, ids.pad_mask()))
}
