//! Tokenization, vocabulary, bidirectional LSTM text encoder and
//! Conditioning Augmentation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{config_err, precondition_err, Error, Result};
use crate::nn::{select_rows, Embedding, Linear, LstmCell};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Bound on the CA log-variance.
pub const LOG_VAR_LIMIT: f64 = 10.0;

/// Lowercases and splits on whitespace and ASCII punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Bijective token/id map with `pad = 0`, `unk = 1`; remaining ids are
/// ordered by descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;

    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(config_err!("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for caption in corpus {
            for tok in caption {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { token_to_id, id_to_token }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// `token<TAB>id` per line in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("{t}\t{i}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Decode(format!("vocabulary line {}: missing tab", line_no + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Decode(format!("vocabulary line {}: bad id", line_no + 1)))?;
            if id != tokens.len() {
                return Err(Error::Decode(format!("vocabulary ids must be contiguous, got {id} at line {}", line_no + 1)));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Decode("vocabulary must start with <pad> and <unk>".into()));
        }
        let v = Self::from_tokens(tokens);
        if v.token_to_id.len() != v.id_to_token.len() {
            return Err(Error::Decode("duplicate token in vocabulary".into()));
        }
        Ok(v)
    }
}

/// Fixed-length padded token ids with a prefix validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub length: usize,
}

impl Caption {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Maps tokens to ids, truncating at `max_len` and padding with `pad`.
pub fn encode_caption<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> Result<Caption> {
    if tokens.is_empty() {
        return Err(precondition_err!("caption has no tokens"));
    }
    if max_len == 0 {
        return Err(config_err!("maximum caption length must be positive"));
    }
    let length = tokens.len().min(max_len);
    let mut ids = vec![Vocabulary::PAD_ID; max_len];
    for (slot, tok) in ids.iter_mut().zip(tokens) {
        *slot = vocab.id(tok.as_ref());
    }
    let mask = (0..max_len).map(|i| i < length).collect();
    Ok(Caption { ids, mask, length })
}

/// Per-word features, one row of width `D_w` per caption position; rows at
/// masked positions are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct WordFeatures<T> {
    pub values: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> WordFeatures<T> {
    pub fn dim(&self) -> usize {
        self.values.dim(1)
    }

    pub fn max_len(&self) -> usize {
        self.values.dim(0)
    }

    pub fn word(&self, t: usize) -> &[T] {
        let d = self.dim();
        &self.values.data()[t * d..(t + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceFeature<T>(pub Tensor<T>);

/// Mean and (clamped) log-variance of the conditioning Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct CaParams<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSentence<T>(pub Tensor<T>);

/// Noise for the reparameterized CA sample.
#[derive(Clone, Debug, PartialEq)]
pub enum CaNoise<T> {
    /// Deterministic: the sample is exactly `mu`.
    Zero,
    Sample(Tensor<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Word/sentence feature width; each LSTM direction has `word_dim / 2` units.
    pub word_dim: usize,
    pub max_len: usize,
}

/// Embedding followed by a bidirectional LSTM.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    embed: Embedding,
    forward_cell: LstmCell,
    backward_cell: LstmCell,
}

/// Graph outputs of [`TextEncoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct TextVars {
    /// `[B, L, D_w]`
    pub words: Var,
    /// `[B, D_w]`
    pub sentence: Var,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        config: TextEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.word_dim == 0 || config.word_dim % 2 != 0 {
            return Err(config_err!("word feature width {} must be even and positive", config.word_dim));
        }
        let hidden = config.word_dim / 2;
        let embed = Embedding::new(ps, &format!("{name}.embed"), config.vocab_size, config.embed_dim, rng);
        let forward_cell = LstmCell::new(ps, &format!("{name}.fwd"), config.embed_dim, hidden, rng);
        let backward_cell = LstmCell::new(ps, &format!("{name}.bwd"), config.embed_dim, hidden, rng);
        Ok(Self { config, embed, forward_cell, backward_cell })
    }

    fn check_params<T: Scalar>(&self, ps: &ParamStore<T>) -> Result<()> {
        let hidden = self.config.word_dim / 2;
        let w = ps.get(self.forward_cell.hidden.weight).shape();
        if w != [4 * hidden, hidden] {
            return Err(config_err!("encoder parameters {:?} do not match word width {}", w, self.config.word_dim));
        }
        let t = ps.get(self.embed.table).shape();
        if t[0] != self.config.vocab_size {
            return Err(config_err!("embedding has {} rows, vocabulary has {}", t[0], self.config.vocab_size));
        }
        Ok(())
    }

    /// Encodes a batch of equally padded captions.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, captions: &[Caption]) -> TextVars {
        let b = captions.len();
        let l = captions[0].max_len();
        let hs = self.config.word_dim / 2;
        let zeros = || Tensor::<T>::zeros(&[b, hs]);
        let steps: Vec<Var> = (0..l)
            .map(|t| {
                let ids: Vec<usize> = captions.iter().map(|c| c.ids[t]).collect();
                self.embed.forward(g, ps, &ids)
            })
            .collect();
        let valid = |t: usize| -> Vec<bool> { captions.iter().map(|c| c.mask[t]).collect() };

        let run = |g: &mut Graph<T>, cell: &LstmCell, order: &mut dyn Iterator<Item = usize>| {
            let mut h = g.constant(zeros());
            let mut c = g.constant(zeros());
            let mut outs: Vec<Option<Var>> = vec![None; l];
            for t in order {
                let (h2, c2) = cell.step(g, ps, steps[t], h, c);
                let m = valid(t);
                h = select_rows(g, h2, h, &m);
                c = select_rows(g, c2, c, &m);
                outs[t] = Some(h);
            }
            (h, outs)
        };
        let (hf, out_f) = run(g, &self.forward_cell, &mut (0..l));
        let (hb, out_b) = run(g, &self.backward_cell, &mut (0..l).rev());

        let mut rows = Vec::with_capacity(l);
        for t in 0..l {
            let both = g.concat(&[out_f[t].expect("step"), out_b[t].expect("step")], 1);
            let m: Vec<T> = captions
                .iter()
                .flat_map(|c| core::iter::repeat_n(if c.mask[t] { T::one() } else { T::zero() }, 2 * hs))
                .collect();
            let masked = g.mul_const(both, Tensor::from_vec(&[b, 2 * hs], m).expect("shape"));
            rows.push(g.reshape(masked, &[b, 1, 2 * hs]));
        }
        let words = g.concat(&rows, 1);
        let sentence = g.concat(&[hf, hb], 1);
        TextVars { words, sentence }
    }

    /// Word and sentence features of one caption.
    pub fn encode<T: Scalar>(&self, ps: &ParamStore<T>, caption: &Caption) -> Result<(WordFeatures<T>, SentenceFeature<T>)> {
        self.check_params(ps)?;
        if caption.length == 0 || caption.length > caption.max_len() {
            return Err(precondition_err!("caption length {} invalid", caption.length));
        }
        if caption.ids.iter().any(|&id| id >= self.config.vocab_size) {
            return Err(config_err!("token id outside the vocabulary of size {}", self.config.vocab_size));
        }
        let mut g = Graph::new();
        let vars = self.forward(&mut g, ps, core::slice::from_ref(caption));
        let l = caption.max_len();
        let words = g.value(vars.words).clone().reshape(&[l, self.config.word_dim])?;
        let sentence = g.value(vars.sentence).clone().reshape(&[self.config.word_dim])?;
        Ok((WordFeatures { values: words, mask: caption.mask.clone() }, SentenceFeature(sentence)))
    }
}

/// `mu + exp(log_var / 2) * noise`; with no noise the result is `mu` itself.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, mu: Var, log_var: Var, noise: Option<Var>) -> Var {
    match noise {
        None => mu,
        Some(eps) => {
            let half = g.scale(log_var, 0.5);
            let std = g.exp(half);
            let spread = g.mul(std, eps);
            g.add(mu, spread)
        }
    }
}

/// Conditioning Augmentation: a linear map from the sentence feature to
/// `2 * D_ca` values split into mean and log-variance.
#[derive(Clone, Debug)]
pub struct CondAugment {
    fc: Linear,
    pub dim: usize,
}

/// Graph outputs of [`CondAugment::forward`].
#[derive(Clone, Copy, Debug)]
pub struct CaVars {
    pub sample: Var,
    pub mu: Var,
    pub log_var: Var,
}

impl CondAugment {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        sentence_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self { fc: Linear::new(ps, &format!("{name}.fc"), sentence_dim, 2 * dim, true, rng), dim }
    }

    pub fn sentence_dim(&self) -> usize {
        self.fc.in_features
    }

    pub fn fc_weight(&self) -> crate::params::ParamId {
        self.fc.weight
    }

    /// `sentence: [B, D_w]`, `noise: [B, D_ca]` or `None` for the zero flag.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, sentence: Var, noise: Option<Var>) -> CaVars {
        let out = self.fc.forward(g, ps, sentence);
        let mu = g.narrow(out, 1, 0, self.dim);
        let raw = g.narrow(out, 1, self.dim, self.dim);
        let log_var = g.clamp(raw, -LOG_VAR_LIMIT, LOG_VAR_LIMIT);
        let sample = reparameterize(g, mu, log_var, noise);
        CaVars { sample, mu, log_var }
    }

    pub fn condition_augment<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        sentence: &SentenceFeature<T>,
        noise: &CaNoise<T>,
    ) -> Result<(AugmentedSentence<T>, CaParams<T>)> {
        if !sentence.0.is_finite() {
            return Err(Error::Numerical("sentence feature has non-finite entries".into()));
        }
        if sentence.0.numel() != self.fc.in_features {
            return Err(config_err!("sentence width {} != {}", sentence.0.numel(), self.fc.in_features));
        }
        let mut g = Graph::new();
        let s = g.constant(sentence.0.clone().reshape(&[1, self.fc.in_features])?);
        let noise = match noise {
            CaNoise::Zero => None,
            CaNoise::Sample(t) => {
                if t.numel() != self.dim {
                    return Err(config_err!("noise width {} != {}", t.numel(), self.dim));
                }
                Some(g.constant(t.clone().reshape(&[1, self.dim])?))
            }
        };
        let vars = self.forward(&mut g, ps, s, noise);
        let flat = |t: &Tensor<T>| t.clone().reshape(&[self.dim]);
        Ok((
            AugmentedSentence(flat(g.value(vars.sample))?),
            CaParams { mu: flat(g.value(vars.mu))?, log_var: flat(g.value(vars.log_var))? },
        ))
    }
}
