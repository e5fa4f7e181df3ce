//! Vocabulary and skip-gram word embeddings with negative sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, log_sigmoid, sigmoid, Matrix};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

/// Token/index bijection. Indices 0..3 are PAD, UNK and CLS; the remaining
/// tokens follow in descending frequency, ties lexicographic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index_to_token: Vec<String>,
    counts: Vec<u64>,
    token_to_index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a [String]>, min_count: u64) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        let mut any = false;
        for seq in corpus {
            for t in seq {
                any = true;
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::InvalidArgument("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = kept.iter().map(|(t, c)| (t.to_string(), *c));
        Ok(Self::from_entries(tokens))
    }

    /// Builds from non-reserved `(token, count)` pairs in index order.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut index_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![1; RESERVED.len()];
        for (t, c) in entries {
            index_to_token.push(t);
            counts.push(c.max(1));
        }
        let mut v = Vocabulary {
            index_to_token,
            counts,
            token_to_index: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.token_to_index = self
            .index_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_token.len() <= RESERVED.len()
    }

    /// Number of non-reserved tokens.
    pub fn word_count(&self) -> usize {
        self.len() - RESERVED.len()
    }

    /// Index of `token`, UNK when absent.
    pub fn lookup(&self, token: &str) -> usize {
        self.token_to_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.index_to_token[index]
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.index_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }
}

pub fn build_vocab(corpus: &[crate::TokenSeq], min_count: u64) -> Result<Vocabulary> {
    Vocabulary::build(corpus.iter().map(|s| s.tokens.as_slice()), min_count)
}

/// One row per vocabulary entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub vectors: Matrix,
}

impl EmbeddingMatrix {
    pub fn d_emb(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        self.vectors.row(index)
    }

    /// Mean of the known-token vectors; zero when no token is known.
    pub fn mean_pool(&self, vocab: &Vocabulary, tokens: &[String]) -> Vec<f64> {
        let mut acc = vec![0.0; self.d_emb()];
        let mut n = 0usize;
        for t in tokens {
            let i = vocab.lookup(t);
            if i == UNK {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(self.vector(i)) {
                *a += v;
            }
            n += 1;
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        acc
    }

    /// Text table: a JSON header line, then `token<TAB>v1 v2 ...` per row.
    pub fn save(&self, vocab: &Vocabulary, seed: u64, path: &Path) -> Result<()> {
        if vocab.len() != self.len() {
            return Err(Error::Shape(format!(
                "vocabulary has {} entries, embedding matrix {} rows",
                vocab.len(),
                self.len()
            )));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = EmbeddingHeader {
            d_emb: self.d_emb(),
            vocab_size: vocab.len(),
            seed,
            counts: vocab.counts.clone(),
        };
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", serde_json::to_string(&header).expect("header")).map_err(io)?;
        for i in 0..self.len() {
            let row: Vec<String> = self.vector(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}\t{}", vocab.token(i), row.join(" ")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<(Vocabulary, EmbeddingMatrix, u64)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let name = path.display().to_string();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::malformed(&name, "empty embedding file"))?
            .map_err(|e| Error::io(path, e))?;
        let header: EmbeddingHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::malformed(format!("{name}:1"), e.to_string()))?;
        let mut tokens = Vec::with_capacity(header.vocab_size);
        let mut data = Vec::with_capacity(header.vocab_size * header.d_emb);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let loc = format!("{name}:{}", i + 2);
            let (tok, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed(&loc, "expected token<TAB>values"))?;
            let vals: Vec<f64> = rest
                .split(' ')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::malformed(&loc, e.to_string()))?;
            if vals.len() != header.d_emb || vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::malformed(&loc, "wrong dimension or non-finite value"));
            }
            tokens.push(tok.to_string());
            data.extend(vals);
        }
        if tokens.len() != header.vocab_size || header.counts.len() != header.vocab_size {
            return Err(Error::malformed(&name, "row count does not match header"));
        }
        if tokens.iter().take(RESERVED.len()).ne(RESERVED.iter()) {
            return Err(Error::malformed(&name, "reserved rows missing"));
        }
        let vocab = Vocabulary::from_entries(
            tokens
                .into_iter()
                .zip(header.counts.iter().copied())
                .skip(RESERVED.len()),
        );
        let emb = EmbeddingMatrix {
            vectors: Matrix::from_vec(header.vocab_size, header.d_emb, data),
        };
        Ok((vocab, emb, header.seed))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    d_emb: usize,
    vocab_size: usize,
    seed: u64,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipGramConfig {
    pub d_emb: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly to `lr * 1e-4`.
    pub lr: f64,
    pub seed: u64,
    pub min_count: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            d_emb: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 42,
            min_count: 1,
        }
    }
}

/// Negative-sampling loss of one (center, context) pair:
/// `-log σ(u_o·v_c) - Σ_k log σ(-u_k·v_c)`.
pub fn sgns_loss(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> f64 {
    let mut loss = -log_sigmoid(dot(context, center));
    for u in negatives {
        loss -= log_sigmoid(-dot(u, center));
    }
    loss
}

/// Gradients of [`sgns_loss`] with respect to the center vector, the context
/// vector and each negative vector.
pub fn sgns_grad(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let d = center.len();
    let mut g_center = vec![0.0; d];
    let coef = sigmoid(dot(context, center)) - 1.0;
    for j in 0..d {
        g_center[j] += coef * context[j];
    }
    let g_context: Vec<f64> = center.iter().map(|c| coef * c).collect();
    let mut g_negs = Vec::with_capacity(negatives.len());
    for u in negatives {
        let s = sigmoid(dot(u, center));
        for j in 0..d {
            g_center[j] += s * u[j];
        }
        g_negs.push(center.iter().map(|c| s * c).collect());
    }
    (g_center, g_context, g_negs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkipGramTrace {
    /// Mean pair loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains skip-gram vectors and returns the center-vector table.
///
/// `init` seeds the table from existing vectors (rows matched by token) so a
/// previous model can be fine-tuned. The PAD row is zero; UNK and CLS are not
/// touched by training.
pub fn train_skipgram(
    corpus: &[Vec<String>],
    vocab: &Vocabulary,
    cfg: &SkipGramConfig,
    init: Option<(&Vocabulary, &EmbeddingMatrix)>,
) -> Result<(EmbeddingMatrix, SkipGramTrace)> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::InvalidArgument("skip-gram corpus is empty".into()));
    }
    if cfg.d_emb < 2 {
        return Err(Error::InvalidArgument("d_emb must be at least 2".into()));
    }
    if vocab.word_count() < cfg.negatives + 1 {
        return Err(Error::InvalidArgument(format!(
            "vocabulary of {} words is smaller than negatives + 1 = {}",
            vocab.word_count(),
            cfg.negatives + 1
        )));
    }
    let d = cfg.d_emb;
    let v = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = 0.5 / d as f64;
    let mut centers = Matrix::from_fn(v, d, |_, _| rng.random_range(-half..half));
    centers.row_mut(PAD).fill(0.0);
    if let Some((init_vocab, init_emb)) = init {
        if init_emb.d_emb() != d {
            return Err(Error::Shape(format!(
                "initial vectors have dimension {}, expected {d}",
                init_emb.d_emb()
            )));
        }
        for i in 0..v {
            if let Some(j) = init_vocab.get(vocab.token(i)) {
                centers.row_mut(i).copy_from_slice(init_emb.vector(j));
            }
        }
    }
    let mut contexts = Matrix::zeros(v, d);

    let weights: Vec<f64> = (0..v)
        .map(|i| if i < RESERVED.len() { 0.0 } else { (vocab.count(i) as f64).powf(0.75) })
        .collect();
    let noise = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let encoded: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| s.iter().map(|t| vocab.lookup(t)).filter(|&i| i >= RESERVED.len()).collect())
        .collect();
    let words_per_epoch: usize = encoded.iter().map(Vec::len).sum();
    let total = (words_per_epoch * cfg.epochs).max(1) as f64;
    let min_lr = cfg.lr * 1e-4;

    let mut trace = SkipGramTrace { epoch_loss: Vec::with_capacity(cfg.epochs) };
    let mut processed = 0usize;
    let mut neg_idx = vec![0usize; cfg.negatives];
    let mut g_center = vec![0.0; d];
    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        for sent in &encoded {
            for (pos, &c) in sent.iter().enumerate() {
                let lr = (cfg.lr * (1.0 - processed as f64 / total)).max(min_lr);
                processed += 1;
                let b = rng.random_range(1..=cfg.window.max(1));
                let lo = pos.saturating_sub(b);
                let hi = (pos + b).min(sent.len() - 1);
                for (cpos, &o) in sent.iter().enumerate().take(hi + 1).skip(lo) {
                    if cpos == pos {
                        continue;
                    }
                    for slot in neg_idx.iter_mut() {
                        let mut k = noise.sample(&mut rng);
                        // avoid drawing the true context as a negative
                        for _ in 0..8 {
                            if k != o {
                                break;
                            }
                            k = noise.sample(&mut rng);
                        }
                        *slot = k;
                    }
                    g_center.iter_mut().for_each(|g| *g = 0.0);
                    let vc = centers.row(c).to_vec();
                    let s = dot(contexts.row(o), &vc);
                    loss_sum -= log_sigmoid(s);
                    let coef = sigmoid(s) - 1.0;
                    for j in 0..d {
                        g_center[j] += coef * contexts[(o, j)];
                    }
                    let ro = contexts.row_mut(o);
                    for j in 0..d {
                        ro[j] -= lr * coef * vc[j];
                    }
                    for &k in &neg_idx {
                        let s = dot(contexts.row(k), &vc);
                        loss_sum -= log_sigmoid(-s);
                        let sk = sigmoid(s);
                        for j in 0..d {
                            g_center[j] += sk * contexts[(k, j)];
                        }
                        let rk = contexts.row_mut(k);
                        for j in 0..d {
                            rk[j] -= lr * sk * vc[j];
                        }
                    }
                    let rc = centers.row_mut(c);
                    for j in 0..d {
                        rc[j] -= lr * g_center[j];
                    }
                    pairs += 1;
                }
            }
        }
        trace.epoch_loss.push(if pairs > 0 { loss_sum / pairs as f64 } else { 0.0 });
    }
    if !centers.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: cfg.epochs,
            batch: 0,
            value: f64::NAN,
        });
    }
    Ok((EmbeddingMatrix { vectors: centers }, trace))
}

/// `max_len × d_emb` input: the CLS vector, then token vectors, truncated or
/// zero-padded to `max_len` rows.
pub fn embed_sequence(tokens: &[String], vocab: &Vocabulary, emb: &EmbeddingMatrix, max_len: usize) -> Matrix {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut m = Matrix::zeros(max_len, emb.d_emb());
    m.row_mut(0).copy_from_slice(emb.vector(CLS));
    for (row, t) in tokens.iter().take(max_len - 1).enumerate() {
        let i = vocab.lookup(t);
        if i != PAD {
            m.row_mut(row + 1).copy_from_slice(emb.vector(i));
        }
    }
    m
}

/// Number of real (non-PAD) rows produced by [`embed_sequence`].
pub fn sequence_len(n_tokens: usize, max_len: usize) -> usize {
    (n_tokens + 1).min(max_len)
}

/// `true` marks PAD positions.
pub fn padding_mask(n_tokens: usize, max_len: usize) -> Vec<bool> {
    let real = sequence_len(n_tokens, max_len);
    (0..max_len).map(|i| i >= real).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(v: &[&[&str]]) -> Vec<Vec<String>> {
        v.iter().map(|s| s.iter().map(|t| t.to_string()).collect()).collect()
    }

    #[test]
    fn vocab_ordering_and_threshold() {
        let c = corpus(&[&["a", "b", "a"]]);
        let v = Vocabulary::build(c.iter().map(Vec::as_slice), 1).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "<cls>", "a", "b"]);
        assert!(v.lookup("a") < v.lookup("b"));
        let v2 = Vocabulary::build(c.iter().map(Vec::as_slice), 2).unwrap();
        assert_eq!(v2.len(), 4);
        assert_eq!(v2.lookup("b"), UNK);
        assert!(Vocabulary::build(std::iter::empty::<&[String]>(), 1).is_err());
        assert!(Vocabulary::build(c.iter().map(Vec::as_slice), 0).is_err());
    }

    #[test]
    fn vocab_is_a_bijection() {
        let c = corpus(&[&["x", "y", "z", "y"], &["z", "w"]]);
        let v = Vocabulary::build(c.iter().map(Vec::as_slice), 1).unwrap();
        for i in 0..v.len() {
            assert_eq!(v.lookup(v.token(i)), i);
        }
    }

    #[test]
    fn embed_sequence_padding_and_truncation() {
        let v = Vocabulary::from_entries([("a".to_string(), 3), ("b".to_string(), 1)]);
        let emb = EmbeddingMatrix {
            vectors: Matrix::from_fn(v.len(), 3, |i, j| (i * 3 + j) as f64 + 1.0),
        };
        let m = embed_sequence(&[], &v, &emb, 4);
        assert_eq!(m.shape(), (4, 3));
        assert_eq!(m.row(0), emb.vector(CLS));
        for i in 1..4 {
            assert!(m.row(i).iter().all(|&x| x == 0.0));
        }
        let long: Vec<String> = ["a", "b", "a", "zzz", "b"].iter().map(|s| s.to_string()).collect();
        let m = embed_sequence(&long, &v, &emb, 3);
        assert_eq!(m.rows(), 3);
        assert_eq!(m.row(1), emb.vector(v.lookup("a")));
        assert!(m.is_finite());
        assert_eq!(padding_mask(1, 4), vec![false, false, true, true]);
        assert_eq!(padding_mask(9, 4), vec![false; 4]);
    }

    #[test]
    fn skipgram_shape_determinism_and_errors() {
        let c = corpus(&[&["a", "b", "c", "d", "e", "f", "g"], &["g", "f", "e", "d"]]);
        let v = Vocabulary::build(c.iter().map(Vec::as_slice), 1).unwrap();
        let cfg = SkipGramConfig { d_emb: 8, epochs: 2, negatives: 3, ..Default::default() };
        let (e1, _) = train_skipgram(&c, &v, &cfg, None).unwrap();
        let (e2, _) = train_skipgram(&c, &v, &cfg, None).unwrap();
        assert_eq!(e1.vectors.shape(), (v.len(), 8));
        assert_eq!(e1, e2);
        assert!(e1.vector(PAD).iter().all(|&x| x == 0.0));

        let too_many = SkipGramConfig { negatives: 7, ..cfg.clone() };
        assert!(train_skipgram(&c, &v, &too_many, None).is_err());
        let thin = SkipGramConfig { d_emb: 1, ..cfg };
        assert!(train_skipgram(&c, &v, &thin, None).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let c = corpus(&[&["a", "b", "c", "d", "e", "f", "g"]]);
        let v = Vocabulary::build(c.iter().map(Vec::as_slice), 1).unwrap();
        let cfg = SkipGramConfig { d_emb: 4, epochs: 1, negatives: 2, ..Default::default() };
        let (e, _) = train_skipgram(&c, &v, &cfg, None).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        e.save(&v, 9, f.path()).unwrap();
        let (v2, e2, seed) = EmbeddingMatrix::load(f.path()).unwrap();
        assert_eq!(seed, 9);
        assert_eq!(v2, v);
        assert_eq!(e2, e);
    }
}
