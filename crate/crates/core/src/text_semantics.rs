//! Prompts built from semantic classes, the token→class mapping S(j), and a
//! learned embedding table standing in for a frozen text encoder.

use std::collections::HashMap;

use place_autograd::{Graph, Real, Var};
use serde::{Deserialize, Serialize};

use crate::semantic_map::{present_classes, SemanticMap};

pub const NULL_TOKEN: &str = "<null>";
pub const DEFAULT_TEXT_DIM: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("word {0:?} is not in the vocabulary")]
    WordNotInVocabulary(String),
    #[error("token index {index} out of range for vocabulary of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("duplicate word {0:?} in vocabulary")]
    DuplicateWord(String),
    #[error(transparent)]
    Graph(#[from] place_autograd::Error),
}

/// Word list with stable indices; index 0 is the null token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = TextError;

    fn try_from(words: Vec<String>) -> Result<Self, TextError> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(TextError::DuplicateWord(w.clone()));
            }
        }
        if words.first().map(String::as_str) != Some(NULL_TOKEN) {
            let mut with_null = vec![NULL_TOKEN.to_string()];
            with_null.extend(words);
            return Self::try_from(with_null);
        }
        Ok(Self { words, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Null token followed by every distinct word of the class names, then
    /// any extra words.
    pub fn from_classes<S: AsRef<str>>(classes: &[S], extra: &[&str]) -> Self {
        let mut words = vec![NULL_TOKEN.to_string()];
        let all = classes.iter().flat_map(|c| c.as_ref().split_whitespace().map(str::to_string).collect::<Vec<_>>());
        for w in all.chain(extra.iter().map(|s| s.to_string())) {
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Self::try_from(words).expect("deduplicated")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn lookup(&self, word: &str) -> Result<usize, TextError> {
        self.index.get(word).copied().ok_or_else(|| TextError::WordNotInVocabulary(word.to_string()))
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    tokens: Vec<usize>,
}

impl Prompt {
    pub fn new(tokens: Vec<usize>) -> Option<Self> {
        (!tokens.is_empty()).then_some(Self { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self, vocab: &Vocabulary) -> String {
        self.tokens.iter().map(|&t| vocab.word(t).unwrap_or("?")).collect::<Vec<_>>().join(" ")
    }
}

/// Semantic channel of each prompt token; `None` for tokens with no region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenClassMap(Vec<Option<usize>>);

impl TokenClassMap {
    pub fn new(entries: Vec<Option<usize>>) -> Self {
        Self(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, token: usize) -> Option<usize> {
        self.0[token]
    }

    pub fn entries(&self) -> &[Option<usize>] {
        &self.0
    }

    pub fn covers(&self, class: usize) -> bool {
        self.0.contains(&Some(class))
    }
}

/// Space-joined names of the present classes in ascending index order.
pub fn build_prompt(map: &SemanticMap, vocab: &Vocabulary) -> Result<(Prompt, TokenClassMap), TextError> {
    build_prompt_with_extras(map, vocab, &[])
}

/// As [`build_prompt`], with extra region-free words appended after the
/// class words.
pub fn build_prompt_with_extras(map: &SemanticMap, vocab: &Vocabulary, extra: &[&str]) -> Result<(Prompt, TokenClassMap), TextError> {
    let mut tokens = Vec::new();
    let mut tcm = Vec::new();
    for class in present_classes(map) {
        for word in map.classes()[class].split_whitespace() {
            tokens.push(vocab.lookup(word)?);
            tcm.push(Some(class));
        }
    }
    for word in extra.iter().flat_map(|e| e.split_whitespace()) {
        tokens.push(vocab.lookup(word)?);
        tcm.push(None);
    }
    let prompt = Prompt::new(tokens).expect("a valid map has at least one present class");
    Ok((prompt, TokenClassMap(tcm)))
}

/// Prompt from a caption with no layout; every token is region-free.
pub fn caption_prompt(caption: &str, vocab: &Vocabulary) -> Result<Prompt, TextError> {
    let tokens = caption.split_whitespace().map(|w| vocab.lookup(w)).collect::<Result<Vec<_>, _>>()?;
    Ok(Prompt::new(tokens).unwrap_or_else(|| unconditional_prompt().0))
}

pub fn unconditional_prompt() -> (Prompt, TokenClassMap) {
    (Prompt { tokens: vec![0] }, TokenClassMap(vec![None]))
}

/// Looks up rows of the embedding table; differentiable w.r.t. the table.
pub fn embed_prompt<T: Real>(g: &mut Graph<T>, prompt: &Prompt, table: Var) -> Result<Var, TextError> {
    let rows = g.shape(table)[0];
    if let Some(&bad) = prompt.tokens.iter().find(|&&t| t >= rows) {
        return Err(TextError::IndexOutOfRange { index: bad, len: rows });
    }
    Ok(g.gather_rows(table, &prompt.tokens)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use place_autograd::Tensor;

    fn vocab() -> Vocabulary {
        Vocabulary::from_classes(&["sky", "street light", "tree"], &["watercolor"])
    }

    #[test]
    fn single_class_prompt() {
        let m = SemanticMap::uniform(2, 2, vec!["sky".into()], 0).unwrap();
        let (p, tcm) = build_prompt(&m, &vocab()).unwrap();
        assert_eq!(p.text(&vocab()), "sky");
        assert_eq!(tcm.entries(), &[Some(0)]);
    }

    #[test]
    fn multi_word_class_maps_every_word() {
        let classes: Vec<String> = vec!["sky".into(), "street light".into()];
        let m = SemanticMap::new(1, 2, classes, vec![0, 1]).unwrap();
        let (p, tcm) = build_prompt(&m, &vocab()).unwrap();
        assert_eq!(p.text(&vocab()), "sky street light");
        assert_eq!(tcm.entries(), &[Some(0), Some(1), Some(1)]);
    }

    #[test]
    fn extras_are_appended_unmapped() {
        let m = SemanticMap::uniform(1, 1, vec!["tree".into()], 0).unwrap();
        let (p, tcm) = build_prompt_with_extras(&m, &vocab(), &["watercolor"]).unwrap();
        assert_eq!(p.text(&vocab()), "tree watercolor");
        assert_eq!(tcm.entries(), &[Some(0), None]);
    }

    #[test]
    fn unknown_word_is_an_error() {
        let m = SemanticMap::uniform(1, 1, vec!["cat".into()], 0).unwrap();
        assert!(matches!(build_prompt(&m, &vocab()), Err(TextError::WordNotInVocabulary(w)) if w == "cat"));
    }

    #[test]
    fn prompt_depends_only_on_present_set() {
        let classes: Vec<String> = vec!["sky".into(), "tree".into()];
        let a = SemanticMap::new(2, 2, classes.clone(), vec![0, 1, 1, 1]).unwrap();
        let b = SemanticMap::new(2, 2, classes, vec![1, 1, 0, 1]).unwrap();
        assert_eq!(build_prompt(&a, &vocab()).unwrap(), build_prompt(&b, &vocab()).unwrap());
    }

    #[test]
    fn unconditional_is_single_null_token() {
        let (p, tcm) = unconditional_prompt();
        assert_eq!(p.len(), 1);
        assert_eq!(tcm.get(0), None);
        let mut g = Graph::<f64>::new();
        let table = g.param(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let e = embed_prompt(&mut g, &p, table).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, 2.0]);
    }

    #[test]
    fn repeated_tokens_embed_identically_and_gradient_counts_multiplicity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let table = g.param(Tensor::from_f64(&[4, 3], &data).unwrap());
        let p = Prompt::new(vec![2, 1, 2, 2]).unwrap();
        let e = embed_prompt(&mut g, &p, table).unwrap();
        let rows = g.value(e).data().to_vec();
        assert_eq!(rows[0..3], rows[6..9]);
        let s = g.sum(e);
        let grads = g.backward(s).unwrap();
        let gt = grads.get(table).unwrap();
        // finite differences of Σ output w.r.t. each table entry
        let h = 1e-6;
        for idx in 0..12 {
            let mut plus = data.clone();
            plus[idx] += h;
            let mut minus = data.clone();
            minus[idx] -= h;
            let eval = |d: &[f64]| {
                let mut g = Graph::<f64>::new();
                let t = g.param(Tensor::from_f64(&[4, 3], d).unwrap());
                let e = embed_prompt(&mut g, &p, t).unwrap();
                g.value(e).sum()
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!((fd - gt.data()[idx]).abs() < 1e-6);
        }
        assert_eq!(gt.data()[6], 3.0);
        assert_eq!(gt.data()[3], 1.0);
        assert_eq!(gt.data()[0], 0.0);
    }

    #[test]
    fn out_of_range_token() {
        let mut g = Graph::<f64>::new();
        let table = g.param(Tensor::zeros(&[2, 2]));
        let p = Prompt::new(vec![5]).unwrap();
        assert!(matches!(embed_prompt(&mut g, &p, table), Err(TextError::IndexOutOfRange { index: 5, len: 2 })));
    }

    #[test]
    fn vocabulary_serializes_as_word_list() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.starts_with("[\"<null>\""));
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.lookup("light").unwrap(), v.lookup("light").unwrap());
    }
}
