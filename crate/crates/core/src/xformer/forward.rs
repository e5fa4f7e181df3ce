use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    adapter_backward, adapter_forward, attention_weights, layer_norm, layer_norm_backward, softmax_rows_backward,
    AdapterCache, LayerNormCache,
};
use super::{AttentionMap, EncoderLayer, TransformerModel};
use crate::corpus::Domain;
use crate::embed::{EmbeddingMatrix, Vocabulary, CLS};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax, Matrix};

/// Output of [`TransformerModel::forward_classify`].
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// `[non_suggestion, suggestion]`.
    pub suggestion_logits: [f64; 2],
    /// Indexed by [`Domain::index`].
    pub domain_logits: [f64; 4],
    pub attention: AttentionMap,
}

impl Classification {
    pub fn suggestion_prob(&self) -> f64 {
        softmax(&self.suggestion_logits)[1]
    }

    pub fn is_suggestion(&self) -> bool {
        self.suggestion_logits[1] > self.suggestion_logits[0]
    }

    pub fn domain(&self) -> Domain {
        let mut best = 0;
        for (i, v) in self.domain_logits.iter().enumerate() {
            if *v > self.domain_logits[best] {
                best = i;
            }
        }
        Domain::from_index(best).expect("four domain logits")
    }
}

pub(crate) struct LayerCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Vec<Matrix>,
    concat: Matrix,
    drop_attn: Option<Vec<f64>>,
    ad_attn: Option<AdapterCache>,
    ln1: LayerNormCache,
    h1: Matrix,
    ff_hidden: Matrix,
    drop_ff: Option<Vec<f64>>,
    ad_ff: Option<AdapterCache>,
    ln2: LayerNormCache,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace {
    input: Matrix,
    layers: Vec<LayerCache>,
    /// Final hidden states, one row per position.
    pub output: Matrix,
}

impl ForwardTrace {
    pub fn attention(&self) -> AttentionMap {
        AttentionMap {
            tokens: Vec::new(),
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
        }
    }
}

fn dropout_scales(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

fn apply_scales(m: &mut Matrix, scales: &[f64]) {
    for (v, s) in m.data_mut().iter_mut().zip(scales) {
        *v *= s;
    }
}

/// Multi-head self-attention of `x` followed by the output projection.
/// Returns the projected output and one weight matrix per head.
pub fn multi_head_attention(x: &Matrix, layer: &EncoderLayer, n_heads: usize, mask: &[bool]) -> Result<(Matrix, Vec<Matrix>)> {
    let d = x.cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) || layer.wq.shape() != (d, d) || mask.len() != x.rows() {
        return Err(Error::Shape(format!(
            "multi-head attention: input {:?}, wq {:?}, {} heads, mask {}",
            x.shape(),
            layer.wq.shape(),
            n_heads,
            mask.len()
        )));
    }
    if mask.iter().all(|&m| m) {
        return Err(Error::InvalidArgument("degenerate mask: every key position is masked".into()));
    }
    let (q, k, v) = (x.matmul(&layer.wq), x.matmul(&layer.wk), x.matmul(&layer.wv));
    let (concat, weights) = attend(&q, &k, &v, n_heads, mask);
    Ok((concat.matmul(&layer.wo), weights))
}

fn attend(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize, mask: &[bool]) -> (Matrix, Vec<Matrix>) {
    let dk = q.cols() / n_heads;
    let mut concat = Matrix::zeros(q.rows(), q.cols());
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.col_block(h * dk, dk);
        let kh = k.col_block(h * dk, dk);
        let w = attention_weights(&qh, &kh, mask);
        concat.set_col_block(h * dk, &w.matmul(&v.col_block(h * dk, dk)));
        weights.push(w);
    }
    (concat, weights)
}

impl TransformerModel {
    /// Runs the encoder over `x` (one row per position, `d_emb` columns)
    /// and returns the position-0 vector plus all attention weights.
    /// `mask[i]` marks position `i` as padding.
    pub fn encode(&self, x: &Matrix, mask: &[bool]) -> Result<(Vec<f64>, AttentionMap)> {
        let trace = self.forward(x, mask, None)?;
        Ok((trace.output.row(0).to_vec(), trace.attention()))
    }

    /// Full forward pass keeping intermediates. Dropout is applied only
    /// when an RNG is supplied and the configured rate is positive.
    pub fn forward(&self, x: &Matrix, mask: &[bool], mut rng: Option<&mut ChaCha8Rng>) -> Result<ForwardTrace> {
        let n = x.rows();
        if x.cols() != self.d_emb {
            return Err(Error::Shape(format!("input has {} columns, model expects {}", x.cols(), self.d_emb)));
        }
        if n == 0 || n > self.config.max_len {
            return Err(Error::Shape(format!("sequence length {n} outside 1..={}", self.config.max_len)));
        }
        if mask.len() != n {
            return Err(Error::Shape(format!("mask length {} for {n} positions", mask.len())));
        }
        if mask.iter().all(|&m| m) {
            return Err(Error::InvalidArgument("degenerate mask: every position is padding".into()));
        }
        let p = self.config.dropout;
        let mut h = x.matmul(&self.input.w);
        h.add_row_vector(self.input.b.data());
        h.add_assign(&self.positions().top_rows(n));
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let rng = if p > 0.0 { rng.as_deref_mut() } else { None };
            let (out, cache) = self.layer_forward(layer, h, mask, rng);
            caches.push(cache);
            h = out;
        }
        Ok(ForwardTrace {
            input: x.clone(),
            layers: caches,
            output: h,
        })
    }

    fn layer_forward(
        &self,
        l: &EncoderLayer,
        x: Matrix,
        mask: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Matrix, LayerCache) {
        let p = self.config.dropout;
        let (q, k, v) = (x.matmul(&l.wq), x.matmul(&l.wk), x.matmul(&l.wv));
        let (concat, weights) = attend(&q, &k, &v, self.config.n_heads, mask);
        let mut att = concat.matmul(&l.wo);
        let drop_attn = rng.as_deref_mut().map(|r| dropout_scales(r, att.len(), p));
        if let Some(s) = &drop_attn {
            apply_scales(&mut att, s);
        }
        let (att, ad_attn) = match &l.adapter_attn {
            Some(a) => {
                let (y, c) = adapter_forward(&att, a);
                (y, Some(c))
            }
            None => (att, None),
        };
        let mut z1 = x.clone();
        z1.add_assign(&att);
        let (h1, ln1) = layer_norm(&z1, l.ln1_gamma.data(), l.ln1_beta.data());

        let mut ff_hidden = h1.matmul(&l.ff1.w);
        ff_hidden.add_row_vector(l.ff1.b.data());
        ff_hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut f = ff_hidden.matmul(&l.ff2.w);
        f.add_row_vector(l.ff2.b.data());
        let drop_ff = rng.map(|r| dropout_scales(r, f.len(), p));
        if let Some(s) = &drop_ff {
            apply_scales(&mut f, s);
        }
        let (f, ad_ff) = match &l.adapter_ff {
            Some(a) => {
                let (y, c) = adapter_forward(&f, a);
                (y, Some(c))
            }
            None => (f, None),
        };
        let mut z2 = h1.clone();
        z2.add_assign(&f);
        let (out, ln2) = layer_norm(&z2, l.ln2_gamma.data(), l.ln2_beta.data());
        let cache = LayerCache {
            x,
            q,
            k,
            v,
            weights,
            concat,
            drop_attn,
            ad_attn,
            ln1,
            h1,
            ff_hidden,
            drop_ff,
            ad_ff,
            ln2,
        };
        (out, cache)
    }

    /// Backpropagates `d_out` (gradient w.r.t. the final hidden states)
    /// through the encoder, accumulating into `grad`. Returns the gradient
    /// w.r.t. the input rows.
    pub fn backward(&self, trace: &ForwardTrace, d_out: &Matrix, grad: &mut TransformerModel) -> Matrix {
        let heads = self.config.n_heads;
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dh = d_out.clone();
        for ((l, c), g) in self.layers.iter().zip(&trace.layers).zip(grad.layers.iter_mut()).rev() {
            let dz2 = layer_norm_backward(&dh, &c.ln2, l.ln2_gamma.data(), g.ln2_gamma.data_mut(), g.ln2_beta.data_mut());
            let mut dh1 = dz2.clone();
            let mut df = match (&l.adapter_ff, &c.ad_ff, g.adapter_ff.as_mut()) {
                (Some(a), Some(ac), Some(ga)) => adapter_backward(&dz2, ac, a, ga),
                _ => dz2,
            };
            if let Some(s) = &c.drop_ff {
                apply_scales(&mut df, s);
            }
            c.ff_hidden.t_matmul_acc(&df, &mut g.ff2.w);
            df.col_sums_acc(g.ff2.b.data_mut());
            let mut dhid = df.matmul_t(&l.ff2.w);
            for (d, hv) in dhid.data_mut().iter_mut().zip(c.ff_hidden.data()) {
                if *hv <= 0.0 {
                    *d = 0.0;
                }
            }
            c.h1.t_matmul_acc(&dhid, &mut g.ff1.w);
            dhid.col_sums_acc(g.ff1.b.data_mut());
            dh1.add_assign(&dhid.matmul_t(&l.ff1.w));

            let dz1 = layer_norm_backward(&dh1, &c.ln1, l.ln1_gamma.data(), g.ln1_gamma.data_mut(), g.ln1_beta.data_mut());
            let mut dx = dz1.clone();
            let mut datt = match (&l.adapter_attn, &c.ad_attn, g.adapter_attn.as_mut()) {
                (Some(a), Some(ac), Some(ga)) => adapter_backward(&dz1, ac, a, ga),
                _ => dz1,
            };
            if let Some(s) = &c.drop_attn {
                apply_scales(&mut datt, s);
            }
            c.concat.t_matmul_acc(&datt, &mut g.wo);
            let dconcat = datt.matmul_t(&l.wo);

            let n = dconcat.rows();
            let d = dconcat.cols();
            let mut dq = Matrix::zeros(n, d);
            let mut dkm = Matrix::zeros(n, d);
            let mut dv = Matrix::zeros(n, d);
            for h in 0..heads {
                let off = h * dk;
                let w = &c.weights[h];
                let d_o = dconcat.col_block(off, dk);
                dv.set_col_block(off, &w.t_matmul(&d_o));
                let da = d_o.matmul_t(&c.v.col_block(off, dk));
                let mut ds = softmax_rows_backward(w, &da);
                ds.scale(scale);
                dq.set_col_block(off, &ds.matmul(&c.k.col_block(off, dk)));
                dkm.set_col_block(off, &ds.t_matmul(&c.q.col_block(off, dk)));
            }
            c.x.t_matmul_acc(&dq, &mut g.wq);
            c.x.t_matmul_acc(&dkm, &mut g.wk);
            c.x.t_matmul_acc(&dv, &mut g.wv);
            dx.add_assign(&dq.matmul_t(&l.wq));
            dx.add_assign(&dkm.matmul_t(&l.wk));
            dx.add_assign(&dv.matmul_t(&l.wv));
            dh = dx;
        }
        trace.input.t_matmul_acc(&dh, &mut grad.input.w);
        dh.col_sums_acc(grad.input.b.data_mut());
        dh.matmul_t(&self.input.w)
    }

    /// Stacks the CLS vector on top of `rows`, truncated to `max_len`.
    pub fn assemble_input(&self, rows: &Matrix) -> Matrix {
        let n = (rows.rows() + 1).min(self.config.max_len);
        let mut x = Matrix::zeros(n, self.d_emb);
        x.row_mut(0).copy_from_slice(self.cls.data());
        for i in 1..n {
            x.row_mut(i).copy_from_slice(rows.row(i - 1));
        }
        x
    }

    /// Embedding rows for `tokens`, without the CLS position.
    pub fn token_rows(&self, tokens: &[String], vocab: &Vocabulary, emb: &EmbeddingMatrix) -> Result<Matrix> {
        if vocab.is_empty() {
            return Err(Error::InvalidArgument("empty vocabulary".into()));
        }
        if emb.d_emb() != self.d_emb {
            return Err(Error::Shape(format!("embedding width {} but model expects {}", emb.d_emb(), self.d_emb)));
        }
        let n = tokens.len().min(self.config.max_len - 1);
        let mut rows = Matrix::zeros(n, self.d_emb);
        for (i, t) in tokens.iter().take(n).enumerate() {
            rows.row_mut(i).copy_from_slice(emb.vector(vocab.lookup(t)));
        }
        Ok(rows)
    }

    /// Both heads on the CLS encoding of `tokens`. Inference mode: no dropout.
    pub fn forward_classify(&self, tokens: &[String], vocab: &Vocabulary, emb: &EmbeddingMatrix) -> Result<Classification> {
        let rows = self.token_rows(tokens, vocab, emb)?;
        let mut c = self.classify_rows(&rows)?;
        c.attention.tokens = std::iter::once(vocab.token(CLS).to_string())
            .chain(tokens.iter().take(rows.rows()).cloned())
            .collect();
        Ok(c)
    }

    /// Classifies pre-embedded token rows.
    pub fn classify_rows(&self, rows: &Matrix) -> Result<Classification> {
        let x = self.assemble_input(rows);
        let mask = vec![false; x.rows()];
        let trace = self.forward(&x, &mask, None)?;
        let cls = trace.output.row(0);
        let s = self.suggestion_head.apply(cls);
        let d = self.domain_head.apply(cls);
        Ok(Classification {
            suggestion_logits: [s[0], s[1]],
            domain_logits: [d[0], d[1], d[2], d[3]],
            attention: trace.attention(),
        })
    }

    /// Joint loss of one example: cross-entropy of the suggestion head, plus
    /// cross-entropy of the domain head when the gold label is suggestion and
    /// `with_domain` is set. When `grad` is given, adds `scale · ∇loss` to it.
    pub(crate) fn example_loss(
        &self,
        rows: &Matrix,
        suggestion: bool,
        domain: Domain,
        with_domain: bool,
        grad: Option<(&mut TransformerModel, f64)>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64> {
        let x = self.assemble_input(rows);
        let mask = vec![false; x.rows()];
        let trace = self.forward(&x, &mask, rng)?;
        let cls = trace.output.row(0);
        let ls = self.suggestion_head.apply(cls);
        let ts = usize::from(suggestion);
        let mut loss = log_sum_exp(&ls) - ls[ts];
        let use_domain = with_domain && suggestion;
        let ld = self.domain_head.apply(cls);
        let td = domain.index();
        if use_domain {
            loss += log_sum_exp(&ld) - ld[td];
        }
        let Some((g, scale)) = grad else {
            return Ok(loss);
        };
        let d = self.config.d_model;
        let mut dcls = vec![0.0; d];
        let mut head_grad = |head: &super::Linear, gh: &mut super::Linear, logits: &[f64], target: usize| {
            let mut dl = softmax(logits);
            dl[target] -= 1.0;
            dl.iter_mut().for_each(|v| *v *= scale);
            for (j, c) in cls.iter().enumerate() {
                for (k, dv) in dl.iter().enumerate() {
                    gh.w[(j, k)] += c * dv;
                }
                dcls[j] += head.w.row(j).iter().zip(&dl).map(|(w, v)| w * v).sum::<f64>();
            }
            for (b, dv) in gh.b.data_mut().iter_mut().zip(&dl) {
                *b += dv;
            }
        };
        head_grad(&self.suggestion_head, &mut g.suggestion_head, &ls, ts);
        if use_domain {
            head_grad(&self.domain_head, &mut g.domain_head, &ld, td);
        }
        let mut d_out = Matrix::zeros(x.rows(), d);
        d_out.row_mut(0).copy_from_slice(&dcls);
        let dx = self.backward(&trace, &d_out, g);
        for (gc, v) in g.cls.data_mut().iter_mut().zip(dx.row(0)) {
            *gc += v;
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::super::TransformerConfig;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(adapters: bool) -> TransformerModel {
        let cfg = TransformerConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            adapter_dim: 3,
            max_len: 12,
            use_adapters: adapters,
            ..Default::default()
        };
        TransformerModel::new(cfg, 6).unwrap()
    }

    fn input(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, 6, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn encode_shapes_and_rows() {
        let m = model(true);
        let (v, att) = m.encode(&input(5, 1), &[false; 5]).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(att.n_layers(), 2);
        assert_eq!(att.n_heads(), 2);
        assert!(att.max_row_sum_error() < 1e-12);
        assert!(m.encode(&input(13, 1), &[false; 13]).is_err());
        assert!(m.encode(&input(3, 1), &[true; 3]).is_err());
    }

    #[test]
    fn single_head_matches_plain_attention() {
        let mut m = model(false);
        m.config.n_heads = 1;
        let l = &mut m.layers[0];
        l.wq = Matrix::identity(8);
        l.wk = Matrix::identity(8);
        l.wv = Matrix::identity(8);
        l.wo = Matrix::identity(8);
        let x = Matrix::from_fn(4, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
        let (out, w) = multi_head_attention(&x, &m.layers[0], 1, &[false; 4]).unwrap();
        let (o2, w2) = super::super::scaled_dot_attention(&x, &x, &x, &[false; 4]).unwrap();
        assert!(out.max_abs_diff(&o2) < 1e-15);
        assert!(w[0].max_abs_diff(&w2) < 1e-15);
    }

    #[test]
    fn zero_up_adapters_are_exact_identity() {
        let m = model(true);
        let plain = m.without_adapters();
        for seed in 0..5 {
            let x = input(7, seed);
            let a = m.encode(&x, &[false; 7]).unwrap();
            let b = plain.encode(&x, &[false; 7]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn padding_content_is_ignored() {
        let m = model(true);
        let mut x = input(9, 3);
        let mask: Vec<bool> = (0..9).map(|i| i >= 5).collect();
        let (a, _) = m.encode(&x, &mask).unwrap();
        for i in 5..9 {
            x.row_mut(i).iter_mut().for_each(|v| *v = 1e3 * (*v + 0.5));
        }
        let (b, _) = m.encode(&x, &mask).unwrap();
        assert_eq!(a, b);
        let (c, _) = m.encode(&x.top_rows(5), &[false; 5]).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn position_sensitivity() {
        let m = model(true);
        let x = input(4, 9);
        let mut y = x.clone();
        y.row_mut(1).copy_from_slice(x.row(2));
        y.row_mut(2).copy_from_slice(x.row(1));
        let (a, _) = m.encode(&x, &[false; 4]).unwrap();
        let (b, _) = m.encode(&y, &[false; 4]).unwrap();
        assert!(a.iter().zip(&b).any(|(p, q)| (p - q).abs() > 1e-9));
    }

    #[test]
    fn loss_gradient_matches_finite_difference_on_head_bias() {
        let m = model(true);
        let rows = input(4, 5);
        let mut g = m.zeros_like();
        m.example_loss(&rows, true, Domain::Travel, true, Some((&mut g, 1.0)), None).unwrap();
        let eps = 1e-5;
        for k in 0..4 {
            let mut p = m.clone();
            p.domain_head.b.data_mut()[k] += eps;
            let mut q = m.clone();
            q.domain_head.b.data_mut()[k] -= eps;
            let lp = p.example_loss(&rows, true, Domain::Travel, true, None, None).unwrap();
            let lq = q.example_loss(&rows, true, Domain::Travel, true, None, None).unwrap();
            assert!(((lp - lq) / (2.0 * eps) - g.domain_head.b.data()[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn domain_loss_only_for_suggestions() {
        let m = model(true);
        let rows = input(3, 2);
        let mut g = m.zeros_like();
        m.example_loss(&rows, false, Domain::Hotel, true, Some((&mut g, 1.0)), None).unwrap();
        assert!(g.domain_head.w.data().iter().all(|&v| v == 0.0));
        assert!(g.suggestion_head.w.data().iter().any(|&v| v != 0.0));
    }
}
