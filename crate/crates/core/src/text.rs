//! Toy tokenizer and deterministic embedder, plus prompt concatenation with
//! exact span bookkeeping.
//!
//! Embedding layout: coordinates `0..3` hold a concept's palette color as a
//! signed code `2c - 1`, coordinate `3` is a concept indicator, and the rest
//! is a seeded unit-variance vector keyed on the token id. Non-concept tokens
//! carry zeros in the reserved block, and PAD embeds to an all-zero row.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::Matrix;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

/// Number of leading embedding coordinates reserved for the palette code.
pub const RESERVED_DIMS: usize = 4;
pub const INDICATOR_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// RGB color, components in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rgb(pub [f64; 3]);

impl Rgb {
    pub fn dist(&self, other: &Rgb) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Latent color code, the inverse of the decoder's `0.5 + 0.5 * z`.
    pub fn code(&self) -> [f64; 3] {
        self.0.map(|c| 2.0 * c - 1.0)
    }
}

/// On-disk vocabulary schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub concepts: BTreeMap<String, [f64; 3]>,
    pub embed_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    embed_dim: usize,
    seed: u64,
    palette: BTreeMap<String, Rgb>,
}

const TOY_COLORS: &[(&str, [f64; 3])] = &[
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.15]),
    ("blue", [0.10, 0.20, 0.90]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("magenta", [0.85, 0.10, 0.85]),
    ("cyan", [0.10, 0.85, 0.90]),
    ("white", [0.97, 0.97, 0.97]),
    ("black", [0.03, 0.03, 0.03]),
];

/// Concept nouns of the box benchmark, each painted with one palette color.
pub const TOY_OBJECT_CONCEPTS: &[(&str, &str)] = &[
    ("apple", "red"),
    ("grass", "green"),
    ("boat", "blue"),
    ("banana", "yellow"),
    ("flower", "magenta"),
    ("sky", "cyan"),
    ("sheep", "white"),
    ("road", "black"),
];

/// Plain nouns for compositional prompts; only their color words paint.
pub const TOY_PLAIN_OBJECTS: &[&str] = &[
    "backpack", "chair", "bench", "bowl", "vase", "clock", "suitcase", "bicycle", "car", "cup",
    "book", "umbrella",
];

const TOY_FILLER: &[&str] = &[
    "a",
    "an",
    "the",
    "photo",
    "picture",
    "of",
    "with",
    "and",
    "in",
    "on",
    "at",
    "room",
    "street",
    "scene",
    "view",
    "dining",
    "table",
    "cups",
    "kitchen",
    "garden",
    "day",
    "sunny",
    "quiet",
    "big",
    "small",
    "landscape",
    "unicorn",
    "near",
    "next",
    "to",
    "dog",
    "cat",
];

/// Colors usable as compositional attributes.
pub fn toy_color_words() -> impl Iterator<Item = &'static str> {
    TOY_COLORS.iter().map(|(w, _)| *w)
}

impl Vocabulary {
    pub fn from_file_spec(spec: VocabularyFile) -> Result<Self> {
        contract!(
            spec.embed_dim > RESERVED_DIMS,
            "embed_dim must exceed {} (reserved palette coordinates), got {}",
            RESERVED_DIMS,
            spec.embed_dim
        );
        let mut words = vec![BOS.to_string(), EOS.to_string(), PAD.to_string()];
        let mut index: HashMap<String, TokenId> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), TokenId(i as u32)))
            .collect();
        for t in &spec.tokens {
            let t = t.to_lowercase();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::schema("tokens", format!("invalid token {t:?}")));
            }
            if !index.contains_key(&t) {
                index.insert(t.clone(), TokenId(words.len() as u32));
                words.push(t);
            }
        }
        let mut palette = BTreeMap::new();
        for (name, rgb) in spec.concepts {
            let name = name.to_lowercase();
            if !index.contains_key(&name) {
                return Err(Error::schema(
                    "concepts",
                    format!("concept {name:?} is not listed in tokens"),
                ));
            }
            if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::schema(
                    "concepts",
                    format!("color of {name:?} outside [0,1]"),
                ));
            }
            palette.insert(name, Rgb(rgb));
        }
        Ok(Self {
            words,
            index,
            embed_dim: spec.embed_dim,
            seed: spec.seed,
            palette,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: VocabularyFile = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            cause: e,
        })?;
        Self::from_file_spec(spec)
    }

    /// Built-in vocabulary used by the benchmark and the CLI default.
    pub fn toy() -> Self {
        Self::from_file_spec(Self::toy_file_spec()).expect("built-in vocabulary is valid")
    }

    pub fn toy_file_spec() -> VocabularyFile {
        let mut tokens: Vec<String> = TOY_FILLER.iter().map(|s| s.to_string()).collect();
        tokens.extend(TOY_PLAIN_OBJECTS.iter().map(|s| s.to_string()));
        let mut concepts = BTreeMap::new();
        for (w, c) in TOY_COLORS {
            tokens.push(w.to_string());
            concepts.insert(w.to_string(), *c);
        }
        for (obj, color) in TOY_OBJECT_CONCEPTS {
            tokens.push(obj.to_string());
            let c = TOY_COLORS.iter().find(|(w, _)| w == color).unwrap().1;
            concepts.insert(obj.to_string(), c);
        }
        VocabularyFile {
            tokens,
            concepts,
            embed_dim: 16,
            seed: 0x5eed_cac0,
        }
    }

    pub fn to_file_spec(&self) -> VocabularyFile {
        VocabularyFile {
            tokens: self.words[3..].to_vec(),
            concepts: self.palette.iter().map(|(k, v)| (k.clone(), v.0)).collect(),
            embed_dim: self.embed_dim,
            seed: self.seed,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn bos(&self) -> TokenId {
        TokenId(0)
    }

    pub fn eos(&self) -> TokenId {
        TokenId(1)
    }

    pub fn pad(&self) -> TokenId {
        TokenId(2)
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        t.0 < 3
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, t: TokenId) -> &str {
        &self.words[t.index()]
    }

    pub fn palette(&self) -> &BTreeMap<String, Rgb> {
        &self.palette
    }

    pub fn concept_color(&self, t: TokenId) -> Option<Rgb> {
        self.palette.get(self.word(t)).copied()
    }

    /// Sub-palette restricted to the given concept names.
    pub fn sub_palette<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Palette> {
        let mut out = Palette::new();
        for n in names {
            let c = self
                .palette
                .get(n)
                .ok_or_else(|| Error::Eval(format!("{n:?} is not a palette concept")))?;
            out.insert(n.to_string(), *c);
        }
        Ok(out)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Concept name to color.
pub type Palette = BTreeMap<String, Rgb>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    tokens: Vec<TokenId>,
}

impl TokenizedPrompt {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens between BOS and EOS.
    pub fn content(&self) -> &[TokenId] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    pub fn text(&self, vocab: &Vocabulary) -> String {
        self.content()
            .iter()
            .map(|t| vocab.word(*t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercases, splits on whitespace, trims ASCII punctuation and wraps the
/// result in BOS/EOS.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenizedPrompt> {
    let mut tokens = vec![vocab.bos()];
    for raw in text.split_whitespace() {
        let word = raw
            .trim_matches(|c: char| c.is_ascii_punctuation())
            .to_lowercase();
        if word.is_empty() {
            continue;
        }
        let id = vocab
            .id(&word)
            .filter(|id| !vocab.is_special(*id))
            .ok_or(Error::UnknownWord { word })?;
        tokens.push(id);
    }
    if tokens.len() == 1 {
        return Err(Error::EmptyPrompt);
    }
    tokens.push(vocab.eos());
    Ok(TokenizedPrompt { tokens })
}

fn token_rng(seed: u64, id: TokenId) -> ChaCha8Rng {
    // splitmix64 finalizer over (seed, id)
    let mut x = seed ^ (u64::from(id.0)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

/// Embedding row of a single token.
pub fn embed_token(id: TokenId, vocab: &Vocabulary) -> Vec<f64> {
    let d = vocab.embed_dim;
    let mut row = vec![0.0; d];
    if id == vocab.pad() {
        return row;
    }
    if let Some(c) = vocab.concept_color(id) {
        row[..3].copy_from_slice(&c.code());
        row[INDICATOR_DIM] = 1.0;
    }
    let mut rng = token_rng(vocab.seed, id);
    for v in row.iter_mut().skip(RESERVED_DIMS) {
        *v = StandardNormal.sample(&mut rng);
    }
    row
}

pub fn embed_tokens(tokens: &[TokenId], vocab: &Vocabulary) -> Matrix {
    let d = vocab.embed_dim;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for t in tokens {
        data.extend(embed_token(*t, vocab));
    }
    Matrix::from_vec(tokens.len(), d, data).expect("embedding shape")
}

/// `n x d_e` embedding matrix of a prompt.
pub fn embed(p: &TokenizedPrompt, vocab: &Vocabulary) -> Matrix {
    embed_tokens(&p.tokens, vocab)
}

/// Half-open token span of one input prompt inside the concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Columns of the segment's content tokens (BOS/EOS excluded).
    pub fn content(&self) -> std::ops::Range<usize> {
        self.start + 1..self.end - 1
    }
}

/// Which weight a region prompt's BOS/EOS receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialTokenLambda {
    /// Special tokens act as global context and share the caption weight.
    #[default]
    Caption,
    /// Every token of a region prompt gets the region weight.
    Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatenatedPrompt {
    tokens: Vec<TokenId>,
    segments: Vec<Segment>,
    lambdas: Vec<f64>,
}

impl ConcatenatedPrompt {
    /// Padded token sequence.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Token sequence without padding; this is what attention sees.
    pub fn unpadded(&self) -> &[TokenId] {
        &self.tokens[..self.total_len()]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Sum of prompt lengths before padding.
    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn region_count(&self) -> usize {
        self.segments.len() - 1
    }

    /// Copy with every weight set to one.
    pub fn with_unit_lambdas(&self) -> ConcatenatedPrompt {
        ConcatenatedPrompt {
            lambdas: vec![1.0; self.lambdas.len()],
            ..self.clone()
        }
    }

    pub fn with_lambdas(&self, lambdas: Vec<f64>) -> Result<ConcatenatedPrompt> {
        contract!(
            lambdas.len() == self.lambdas.len(),
            "lambda length {} != {}",
            lambdas.len(),
            self.lambdas.len()
        );
        contract!(lambdas.iter().all(|l| *l > 0.0), "lambda must be positive");
        Ok(ConcatenatedPrompt {
            lambdas,
            ..self.clone()
        })
    }
}

/// `caption ⊕ regions...` with special tokens kept and PAD appended up to
/// `pad_to`.
pub fn concat_prompts(
    caption: &TokenizedPrompt,
    regions: &[TokenizedPrompt],
    pad_to: usize,
    lambda_caption: f64,
    lambda_region: f64,
    vocab: &Vocabulary,
) -> Result<ConcatenatedPrompt> {
    concat_prompts_with(
        caption,
        regions,
        pad_to,
        lambda_caption,
        lambda_region,
        SpecialTokenLambda::default(),
        vocab,
    )
}

pub fn concat_prompts_with(
    caption: &TokenizedPrompt,
    regions: &[TokenizedPrompt],
    pad_to: usize,
    lambda_caption: f64,
    lambda_region: f64,
    specials: SpecialTokenLambda,
    vocab: &Vocabulary,
) -> Result<ConcatenatedPrompt> {
    contract!(
        lambda_caption > 0.0 && lambda_region > 0.0,
        "lambda must be positive (caption {lambda_caption}, region {lambda_region})"
    );
    let total: usize = caption.len() + regions.iter().map(|r| r.len()).sum::<usize>();
    contract!(
        pad_to >= total,
        "pad_to {} is smaller than the concatenated length {}",
        pad_to,
        total
    );
    let mut tokens = Vec::with_capacity(pad_to);
    let mut segments = Vec::with_capacity(regions.len() + 1);
    let mut lambdas = Vec::with_capacity(total);

    tokens.extend_from_slice(&caption.tokens);
    segments.push(Segment {
        start: 0,
        end: caption.len(),
    });
    lambdas.extend(std::iter::repeat_n(lambda_caption, caption.len()));

    for r in regions {
        let start = tokens.len();
        tokens.extend_from_slice(&r.tokens);
        segments.push(Segment {
            start,
            end: tokens.len(),
        });
        let special = match specials {
            SpecialTokenLambda::Caption => lambda_caption,
            SpecialTokenLambda::Region => lambda_region,
        };
        lambdas.push(special);
        lambdas.extend(std::iter::repeat_n(lambda_region, r.len() - 2));
        lambdas.push(special);
    }
    tokens.resize(pad_to, vocab.pad());
    Ok(ConcatenatedPrompt {
        tokens,
        segments,
        lambdas,
    })
}

/// First occurrence of the region's content tokens inside the caption, as
/// `(start, len)` in caption token indices (BOS at index 0).
pub fn find_substring_span(
    caption: &TokenizedPrompt,
    region: &TokenizedPrompt,
) -> Option<(usize, usize)> {
    let needle = region.content();
    let hay = caption.content();
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len())
        .position(|w| w == needle)
        .map(|p| (p + 1, needle.len()))
}
