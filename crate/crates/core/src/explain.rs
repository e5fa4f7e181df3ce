//! Attention saliency, heatmap export and SAGE discriminating tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Domain, Label, Review};
use crate::error::{Error, Result};
use crate::pipeline::Artifacts;
use crate::tensor::log_sum_exp;
use crate::textprep::tokenize;
use crate::xformer::AttentionMap;

/// Per-token attention weights of one review, scaled so the largest is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSaliency {
    pub review_id: String,
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
}

/// Mean over layers and heads of the CLS row, with CLS and padding
/// positions dropped and the rest scaled to a maximum of 1. Positions are
/// returned in order, padding excluded.
pub fn cls_row_saliency(att: &AttentionMap, mask: &[bool]) -> Vec<f64> {
    let row = att.mean_row(0);
    let mut w: Vec<f64> = row
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(i, _)| !mask.get(*i).copied().unwrap_or(false))
        .map(|(_, v)| *v)
        .collect();
    let max = w.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        w.iter_mut().for_each(|v| *v /= max);
    }
    w
}

/// Saliency of `review` under the trained model.
pub fn attention_saliency(review: &Review, artifacts: &Artifacts) -> Result<TokenSaliency> {
    let tokens = artifacts.preprocess(&review.text);
    saliency_of_tokens(&review.id, &tokens, artifacts)
}

pub fn saliency_of_tokens(id: &str, tokens: &[String], artifacts: &Artifacts) -> Result<TokenSaliency> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!("review `{id}` has no tokens")));
    }
    let c = artifacts
        .model
        .forward_classify(tokens, &artifacts.vocab, &artifacts.embeddings)?;
    let mask = vec![false; c.attention.tokens.len()];
    let weights = cls_row_saliency(&c.attention, &mask);
    Ok(TokenSaliency {
        review_id: id.to_string(),
        tokens: c.attention.tokens[1..].to_vec(),
        weights,
    })
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// SVG with one text cell per token; cell background opacity equals the weight.
pub fn heatmap_svg(s: &TokenSaliency) -> Result<String> {
    if s.tokens.len() != s.weights.len() {
        return Err(Error::Shape(format!("{} tokens but {} weights", s.tokens.len(), s.weights.len())));
    }
    let widths: Vec<usize> = s.tokens.iter().map(|t| 12 + 9 * t.chars().count()).collect();
    let total: usize = widths.iter().sum::<usize>() + 8;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="40" font-family="monospace" font-size="14">"#
    );
    let _ = writeln!(svg, "<title>{}</title>", xml_escape(&s.review_id));
    let mut x = 4;
    for ((tok, w), width) in s.tokens.iter().zip(&s.weights).zip(&widths) {
        let opacity = w.clamp(0.0, 1.0);
        let _ = writeln!(
            svg,
            r##"<g class="token"><rect x="{x}" y="6" width="{width}" height="28" fill="#d62728" fill-opacity="{opacity:.4}"/><text x="{tx}" y="25">{}</text></g>"##,
            xml_escape(tok),
            tx = x + 6,
        );
        x += width;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn export_heatmap(s: &TokenSaliency, path: &Path) -> Result<()> {
    let svg = heatmap_svg(s)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// One token's SAGE deviation from the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SageEntry {
    pub token: String,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SageConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub step: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SageConfig {
    fn default() -> Self {
        SageConfig {
            alpha: 0.5,
            lambda: 5.0,
            step: 0.1,
            tol: 1e-6,
            max_iters: 20_000,
        }
    }
}

impl From<&crate::config::ExplainConfig> for SageConfig {
    fn from(c: &crate::config::ExplainConfig) -> Self {
        SageConfig {
            alpha: c.sage_alpha,
            lambda: c.sage_lambda,
            step: c.sage_step,
            tol: c.sage_tol,
            max_iters: c.sage_max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SageOutcome {
    /// Sorted by η descending, ties by token.
    pub entries: Vec<SageEntry>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted iteration, starting from η = 0.
    pub objective: Vec<f64>,
}

/// The SAGE problem over a fixed vocabulary.
pub struct SageProblem {
    pub vocab: Vec<String>,
    pub counts: Vec<f64>,
    /// Smoothed background log-probabilities.
    pub background: Vec<f64>,
    pub total: f64,
}

impl SageProblem {
    pub fn new(target: &BTreeMap<String, u64>, background: &BTreeMap<String, u64>, alpha: f64) -> Result<Self> {
        if background.values().sum::<u64>() == 0 {
            return Err(Error::InvalidArgument("background counts are empty".into()));
        }
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::InvalidArgument(format!("smoothing alpha must be positive, got {alpha}")));
        }
        let vocab: Vec<String> = target.keys().chain(background.keys()).cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let bg: Vec<f64> = vocab.iter().map(|w| background.get(w).copied().unwrap_or(0) as f64 + alpha).collect();
        let z: f64 = bg.iter().sum();
        let counts: Vec<f64> = vocab.iter().map(|w| target.get(w).copied().unwrap_or(0) as f64).collect();
        Ok(SageProblem {
            total: counts.iter().sum(),
            background: bg.iter().map(|v| (v / z).ln()).collect(),
            counts,
            vocab,
        })
    }

    fn logits(&self, eta: &[f64]) -> Vec<f64> {
        self.background.iter().zip(eta).map(|(b, e)| b + e).collect()
    }

    /// Log-likelihood part: `Σ c_w (b_w + η_w) − C · logΣ exp(b_w + η_w)`.
    pub fn smooth(&self, eta: &[f64]) -> f64 {
        let l = self.logits(eta);
        self.counts.iter().zip(&l).map(|(c, v)| c * v).sum::<f64>() - self.total * log_sum_exp(&l)
    }

    pub fn objective(&self, eta: &[f64], lambda: f64) -> f64 {
        self.smooth(eta) - lambda * eta.iter().map(|e| e.abs()).sum::<f64>()
    }

    /// `c_w − C · softmax(b + η)_w`.
    pub fn gradient(&self, eta: &[f64]) -> Vec<f64> {
        let l = self.logits(eta);
        let lse = log_sum_exp(&l);
        self.counts.iter().zip(&l).map(|(c, v)| c - self.total * (v - lse).exp()).collect()
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Maximizes the penalized SAGE objective by proximal gradient ascent with
/// backtracking, so the objective never decreases. With `lambda = 0` the
/// optimum is only defined up to a constant; it is shifted so that
/// `logΣ exp(b + η) = 0`, which makes `η_w = log(c_w / C) − b_w`.
pub fn sage_scores(
    target: &BTreeMap<String, u64>,
    background: &BTreeMap<String, u64>,
    cfg: &SageConfig,
) -> Result<SageOutcome> {
    if cfg.lambda.is_nan() || cfg.lambda < 0.0 || cfg.step.is_nan() || cfg.step <= 0.0 || cfg.tol.is_nan() || cfg.tol <= 0.0 {
        return Err(Error::InvalidArgument("SAGE needs lambda >= 0, step > 0 and tol > 0".into()));
    }
    let p = SageProblem::new(target, background, cfg.alpha)?;
    let n = p.vocab.len();
    let mut eta = vec![0.0; n];
    let mut step = cfg.step;
    let mut f = p.smooth(&eta);
    let mut objective = vec![p.objective(&eta, cfg.lambda)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let g = p.gradient(&eta);
        let (next, f_next) = loop {
            let cand: Vec<f64> = eta
                .iter()
                .zip(&g)
                .map(|(e, gi)| soft_threshold(e + step * gi, cfg.lambda * step))
                .collect();
            let f_cand = p.smooth(&cand);
            let lin: f64 = cand.iter().zip(&eta).zip(&g).map(|((c, e), gi)| gi * (c - e)).sum();
            let dist: f64 = cand.iter().zip(&eta).map(|(c, e)| (c - e) * (c - e)).sum();
            if f_cand >= f + lin - dist / (2.0 * step) - 1e-12 * f.abs().max(1.0) || step < 1e-300 {
                break (cand, f_cand);
            }
            step *= 0.5;
        };
        let delta = next.iter().zip(&eta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        eta = next;
        f = f_next;
        objective.push(p.objective(&eta, cfg.lambda));
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }
    if cfg.lambda == 0.0 {
        let shift = log_sum_exp(&p.logits(&eta));
        eta.iter_mut().for_each(|e| *e -= shift);
    }
    if !converged {
        log::warn!("SAGE stopped after {iterations} iterations without converging");
    }
    let entries = rank_entries(
        p.vocab.into_iter().zip(eta).map(|(token, eta)| SageEntry { token, eta }).collect(),
        false,
    );
    Ok(SageOutcome {
        entries,
        iterations,
        converged,
        objective,
    })
}

/// Sorts by η (or |η|) descending, ties by token.
pub fn rank_entries(mut entries: Vec<SageEntry>, by_magnitude: bool) -> Vec<SageEntry> {
    let key = |e: &SageEntry| if by_magnitude { e.eta.abs() } else { e.eta };
    entries.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.token.cmp(&b.token)));
    entries
}

/// The `k` highest-η entries.
pub fn top_k_sage(entries: &[SageEntry], k: usize) -> Vec<SageEntry> {
    let mut ranked = rank_entries(entries.to_vec(), false);
    ranked.truncate(k.max(1));
    ranked
}

fn is_punct(t: &str) -> bool {
    t.chars().all(|c| !c.is_alphanumeric())
}

/// Token counts over suggestion reviews, optionally restricted to one
/// domain. Texts are tokenized as stored; punctuation is skipped.
pub fn suggestion_counts(d: &Dataset, domain: Option<Domain>) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for r in d.iter().filter(|r| r.label == Label::Suggestion && domain.is_none_or(|x| r.domain == x)) {
        for t in tokenize(&r.text) {
            if !is_punct(&t) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// SAGE of one domain's suggestions against all suggestions.
pub fn domain_sage(d: &Dataset, domain: Domain, cfg: &SageConfig) -> Result<SageOutcome> {
    let target = suggestion_counts(d, Some(domain));
    if target.is_empty() {
        return Err(Error::InvalidArgument(format!("no suggestion reviews for domain {}", domain.as_str())));
    }
    sage_scores(&target, &suggestion_counts(d, None), cfg)
}

/// Words left out of attention word clouds.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "but", "because", "or", "of", "to", "in", "on", "for", "with", "at", "by", "it", "is",
    "be", "was", "were", "we", "i", "you", "they", "our", "this", "that", "as", "very", "really", "have", "do",
];

/// Sum of saliency weights per token across reviews.
pub fn aggregate_saliency(items: &[TokenSaliency], exclude: &[&str]) -> BTreeMap<String, f64> {
    let mut sums = BTreeMap::new();
    for s in items {
        for (t, w) in s.tokens.iter().zip(&s.weights) {
            if !exclude.contains(&t.as_str()) && !is_punct(t) {
                *sums.entry(t.clone()).or_insert(0.0) += w;
            }
        }
    }
    sums
}

/// Input to a word cloud.
pub enum WordCloudSource<'a> {
    Attention(&'a BTreeMap<String, f64>),
    /// Only positive η enter the cloud.
    Sage(&'a [SageEntry]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordWeight {
    pub token: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCloud {
    pub domain: Domain,
    pub source: String,
    pub entries: Vec<WordWeight>,
}

/// Weights scaled to a maximum of 1, sorted descending with ties by token.
pub fn wordcloud(domain: Domain, source: WordCloudSource<'_>) -> Result<WordCloud> {
    let (name, raw): (&str, Vec<(String, f64)>) = match source {
        WordCloudSource::Attention(m) => ("attention", m.iter().map(|(t, w)| (t.clone(), *w)).collect()),
        WordCloudSource::Sage(es) => ("sage", es.iter().filter(|e| e.eta > 0.0).map(|e| (e.token.clone(), e.eta)).collect()),
    };
    let max = raw.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    if raw.is_empty() || max <= 0.0 {
        return Err(Error::InvalidArgument("word cloud source has no positive weights".into()));
    }
    let mut entries: Vec<WordWeight> = raw
        .into_iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(token, w)| WordWeight { token, weight: w / max })
        .collect();
    entries.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.token.cmp(&b.token)));
    Ok(WordCloud {
        domain,
        source: name.to_string(),
        entries,
    })
}

pub fn export_wordcloud_data(domain: Domain, source: WordCloudSource<'_>, path: &Path) -> Result<()> {
    let cloud = wordcloud(domain, source)?;
    let json = serde_json::to_string_pretty(&cloud).expect("word cloud serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(w, c)| (w.to_string(), *c)).collect()
    }

    #[test]
    fn saliency_drops_cls_and_padding() {
        let w = Matrix::from_rows(&[vec![0.5, 0.3, 0.2, 0.0], vec![0.25; 4], vec![0.25; 4], vec![0.25; 4]]);
        let att = AttentionMap {
            tokens: vec![],
            weights: vec![vec![w.clone(), w]],
        };
        let s = cls_row_saliency(&att, &[false, false, false, true]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], 1.0);
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn heatmap_is_deterministic_and_escaped() {
        let s = TokenSaliency {
            review_id: "r<1>".into(),
            tokens: vec!["a&b".into(), "zero".into(), "one".into()],
            weights: vec![0.5, 0.0, 1.0],
        };
        let a = heatmap_svg(&s).unwrap();
        assert_eq!(a, heatmap_svg(&s).unwrap());
        assert_eq!(a.matches("<g class=\"token\">").count(), 3);
        assert!(a.contains("a&amp;b"));
        assert!(a.contains("fill-opacity=\"0.0000\""));
        assert!(a.contains("fill-opacity=\"1.0000\""));
    }

    #[test]
    fn identical_distributions_give_zero() {
        let c = counts(&[("a", 10), ("b", 20), ("c", 30)]);
        let out = sage_scores(&c, &c, &SageConfig::default()).unwrap();
        assert!(out.converged);
        for e in &out.entries {
            assert!(e.eta.abs() < 1e-6, "{e:?}");
        }
    }

    #[test]
    fn lambda_zero_is_log_ratio() {
        let t = counts(&[("a", 5), ("b", 1), ("c", 4)]);
        let bg = counts(&[("a", 10), ("b", 10), ("c", 10)]);
        let cfg = SageConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let out = sage_scores(&t, &bg, &cfg).unwrap();
        assert!(out.converged);
        for e in &out.entries {
            let c = t[&e.token] as f64 / 10.0;
            let b = (10.5f64 / 31.5).ln();
            assert!((e.eta - (c.ln() - b)).abs() < 1e-4, "{e:?}");
        }
    }

    #[test]
    fn objective_is_monotone() {
        let t = counts(&[("a", 50), ("b", 3), ("c", 1), ("d", 9)]);
        let bg = counts(&[("a", 1), ("b", 100), ("c", 100), ("d", 100), ("e", 40)]);
        for lambda in [0.0, 1.0, 5.0] {
            let out = sage_scores(&t, &bg, &SageConfig { lambda, ..Default::default() }).unwrap();
            for w in out.objective.windows(2) {
                assert!(w[1] >= w[0] - 1e-10, "{lambda}: {} < {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let t = counts(&[("a", 50), ("b", 3)]);
        let bg = counts(&[("a", 1), ("b", 100)]);
        let out = sage_scores(&t, &bg, &SageConfig { max_iters: 2, ..Default::default() }).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
        assert_eq!(out.entries.len(), 2);
    }

    #[test]
    fn top_k_and_ties() {
        let es = vec![
            SageEntry { token: "b".into(), eta: 1.0 },
            SageEntry { token: "a".into(), eta: 1.0 },
            SageEntry { token: "c".into(), eta: 2.0 },
            SageEntry { token: "d".into(), eta: -3.0 },
        ];
        assert_eq!(top_k_sage(&es, 1)[0].token, "c");
        let all: Vec<String> = top_k_sage(&es, 10).into_iter().map(|e| e.token).collect();
        assert_eq!(all, ["c", "a", "b", "d"]);
        assert_eq!(rank_entries(es, true)[0].token, "d");
    }

    #[test]
    fn wordcloud_scaling() {
        let one: BTreeMap<String, f64> = [("pool".to_string(), 3.5)].into();
        let c = wordcloud(Domain::Hotel, WordCloudSource::Attention(&one)).unwrap();
        assert_eq!(c.entries, vec![WordWeight { token: "pool".into(), weight: 1.0 }]);
        let many: BTreeMap<String, f64> = [("a".to_string(), 1.0), ("b".to_string(), 4.0), ("c".to_string(), 2.0)].into();
        let c = wordcloud(Domain::Hotel, WordCloudSource::Attention(&many)).unwrap();
        let w: Vec<f64> = c.entries.iter().map(|e| e.weight).collect();
        assert_eq!(w, [1.0, 0.5, 0.25]);
        let empty = BTreeMap::new();
        assert!(wordcloud(Domain::Hotel, WordCloudSource::Attention(&empty)).is_err());
    }
}
