//! End-to-end orchestration, two-tier inference and F1 evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{oversample_discourse, oversample_smote, train_baseline, BaselineClassifier, DiscourseReport, FeatureExample};
use crate::config::{AugmentMethod, RunConfig};
use crate::corpus::{Dataset, Domain, Label, Review, Split};
use crate::embed::{build_vocab, train_skipgram, EmbeddingMatrix, SkipGramTrace, Vocabulary, CLS};
use crate::error::{Error, Result};
use crate::hashing::{json_hash, sha256_hex};
use crate::tensor::Matrix;
use crate::textprep::{build_lexicon, preprocess_dataset, preprocess_text, tokenize, Lexicon, TokenSeq};
use crate::xformer::{self, TrainExample, TrainTrace, TransformerModel};

/// Suggestion decision plus, for suggestions only, the predicted domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoTierPrediction {
    pub is_suggestion: bool,
    pub domain: Option<Domain>,
    pub suggestion_prob: f64,
}

/// Binary F1 of the positive class, `2TP / (2TP + FP + FN)`. A split with
/// no positive gold and no positive prediction scores 1; zero precision
/// plus recall otherwise scores 0.
pub fn f1_binary(preds: &[bool], golds: &[bool]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("f1 of an empty label vector".into()));
    }
    Ok(BinaryConfusion::tally(preds, golds).f1())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryConfusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl BinaryConfusion {
    pub fn tally(preds: &[bool], golds: &[bool]) -> Self {
        let mut c = BinaryConfusion::default();
        for (&p, &g) in preds.iter().zip(golds) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn f1(&self) -> f64 {
        f1_from_counts(self.tp, self.fp, self.fn_)
    }
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Joint label: 0 is non-suggestion, `1 + domain index` a suggestion of that domain.
fn joint_index(is_suggestion: bool, domain: Option<Domain>) -> usize {
    match (is_suggestion, domain) {
        (true, Some(d)) => 1 + d.index(),
        _ => 0,
    }
}

pub const JOINT_LABELS: [&str; 5] = ["non_suggestion", "hotel", "electronics", "travel", "software"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// Suggestion-vs-not per domain, restricted to that domain's reviews.
    pub suggestion: BTreeMap<Domain, BinaryConfusion>,
    /// Rows gold, columns predicted, both ordered as [`JOINT_LABELS`].
    pub joint: [[usize; 5]; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_domain: BTreeMap<Domain, f64>,
    pub pooled_fine_grain: f64,
    /// F1 of each suggestion-and-domain class; their mean is `pooled_fine_grain`.
    pub per_class: BTreeMap<Domain, f64>,
    pub confusion: Confusion,
    pub n_examples: usize,
    pub seeds: BTreeMap<String, u64>,
    pub config_hash: String,
}

impl F1Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Counts predictions against gold labels. Pure counting: the result does
/// not depend on the order of the pairs.
pub fn score(golds: &[(bool, Domain)], preds: &[TwoTierPrediction]) -> Result<F1Report> {
    if golds.is_empty() {
        return Err(Error::InvalidArgument("empty test split".into()));
    }
    if golds.len() != preds.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} reviews", preds.len(), golds.len())));
    }
    let mut suggestion = BTreeMap::new();
    let mut per_domain = BTreeMap::new();
    for d in Domain::ALL {
        let (p, g): (Vec<bool>, Vec<bool>) = golds
            .iter()
            .zip(preds)
            .filter(|((_, gd), _)| *gd == d)
            .map(|((gs, _), p)| (p.is_suggestion, *gs))
            .unzip();
        if g.is_empty() {
            continue;
        }
        let c = BinaryConfusion::tally(&p, &g);
        per_domain.insert(d, c.f1());
        suggestion.insert(d, c);
    }
    let mut joint = [[0usize; 5]; 5];
    for ((gs, gd), p) in golds.iter().zip(preds) {
        joint[joint_index(*gs, Some(*gd))][joint_index(p.is_suggestion, p.domain)] += 1;
    }
    let mut per_class = BTreeMap::new();
    for d in Domain::ALL {
        let c = 1 + d.index();
        let tp = joint[c][c];
        let fp = (0..5).map(|r| joint[r][c]).sum::<usize>() - tp;
        let fn_ = joint[c].iter().sum::<usize>() - tp;
        per_class.insert(d, f1_from_counts(tp, fp, fn_));
    }
    let pooled = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(F1Report {
        per_domain,
        pooled_fine_grain: pooled,
        per_class,
        confusion: Confusion { suggestion, joint },
        n_examples: golds.len(),
        seeds: BTreeMap::new(),
        config_hash: String::new(),
    })
}

/// Everything needed to classify raw reviews.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub config: RunConfig,
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingMatrix,
    pub model: TransformerModel,
    pub baseline: Option<BaselineClassifier>,
}

const MODEL_FILE: &str = "model.ckpt";
const EMBEDDINGS_FILE: &str = "embeddings.txt";
const LEXICON_FILE: &str = "lexicon.json";
const CONFIG_FILE: &str = "config.toml";
const BASELINE_FILE: &str = "baseline.json";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Artifacts {
    /// Raw text to model tokens, using the stored lexicon.
    pub fn preprocess(&self, text: &str) -> Vec<String> {
        let p = &self.config.preprocess;
        preprocess_text(text, &self.lexicon, p.spell_threshold)
    }

    /// Token sequence of an already preprocessed text.
    pub fn tokens(&self, r: &Review) -> TokenSeq {
        TokenSeq::new(r.id.clone(), self.preprocess(&r.text))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join(MODEL_FILE))?;
        self.embeddings.save(&self.vocab, self.config.embed.seed, &dir.join(EMBEDDINGS_FILE))?;
        let lex: BTreeMap<&str, u64> = self.lexicon.words().map(|w| (w, self.lexicon.frequency(w))).collect();
        write(&dir.join(LEXICON_FILE), serde_json::to_string(&lex).expect("lexicon").as_bytes())?;
        write(&dir.join(CONFIG_FILE), self.config.to_toml().as_bytes())?;
        if let Some(b) = &self.baseline {
            write(&dir.join(BASELINE_FILE), serde_json::to_string(b).expect("baseline").as_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = TransformerModel::load(&dir.join(MODEL_FILE))?;
        let (vocab, embeddings, _) = EmbeddingMatrix::load(&dir.join(EMBEDDINGS_FILE))?;
        let lex_path = dir.join(LEXICON_FILE);
        let lex: BTreeMap<String, u64> = serde_json::from_str(&read_string(&lex_path)?)
            .map_err(|e| Error::malformed(lex_path.display().to_string(), e.to_string()))?;
        let config = crate::config::parse_config_str(&read_string(&dir.join(CONFIG_FILE))?)?;
        let baseline_path = dir.join(BASELINE_FILE);
        let baseline = if baseline_path.exists() {
            Some(
                serde_json::from_str(&read_string(&baseline_path)?)
                    .map_err(|e| Error::malformed(baseline_path.display().to_string(), e.to_string()))?,
            )
        } else {
            None
        };
        if embeddings.d_emb() != model.d_emb {
            return Err(Error::Shape(format!(
                "embeddings are {}-dimensional, model expects {}",
                embeddings.d_emb(),
                model.d_emb
            )));
        }
        Ok(Artifacts {
            config,
            lexicon: Lexicon::from_counts(lex),
            vocab,
            embeddings,
            model,
            baseline,
        })
    }
}

/// Classifies one raw review: the suggestion head decides tier one; the
/// domain head is consulted only for predicted suggestions.
pub fn predict_two_tier(review: &Review, artifacts: &Artifacts) -> Result<TwoTierPrediction> {
    predict_tokens(&artifacts.preprocess(&review.text), artifacts)
}

pub fn predict_tokens(tokens: &[String], a: &Artifacts) -> Result<TwoTierPrediction> {
    let c = a.model.forward_classify(tokens, &a.vocab, &a.embeddings)?;
    let is_suggestion = c.is_suggestion();
    Ok(TwoTierPrediction {
        is_suggestion,
        domain: is_suggestion.then(|| c.domain()),
        suggestion_prob: c.suggestion_prob(),
    })
}

/// Scores every review of `test` (whatever its split column says).
pub fn evaluate(test: &Dataset, artifacts: &Artifacts) -> Result<F1Report> {
    let preds: Vec<TwoTierPrediction> = test
        .reviews()
        .par_iter()
        .map(|r| predict_two_tier(r, artifacts))
        .collect::<Result<_>>()?;
    let golds: Vec<(bool, Domain)> = test.iter().map(|r| (r.label.is_suggestion(), r.domain)).collect();
    let mut report = score(&golds, &preds)?;
    report.seeds = artifacts.config.seeds();
    report.config_hash = json_hash(&artifacts.config);
    Ok(report)
}

/// Provenance of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub name: String,
    pub input_hash: String,
    pub output_hash: String,
    pub seed: Option<u64>,
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub train_hash: String,
    pub test_hash_before: String,
    pub test_hash_after: String,
    pub stages: Vec<StageManifest>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageManifest> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct AugmentSummary {
    pub method: String,
    pub discourse: Option<DiscourseReport>,
    pub smote_added: BTreeMap<Domain, usize>,
    pub suggestions_before: usize,
    pub suggestions_after: usize,
}

/// Everything a full run produces.
pub struct PipelineOutput {
    pub artifacts: Artifacts,
    pub report: F1Report,
    pub manifest: RunManifest,
    pub augmented_train: Dataset,
    pub augment: AugmentSummary,
    pub train_trace: TrainTrace,
    pub embedding_trace: SkipGramTrace,
}

impl PipelineOutput {
    /// Writes artifacts plus `report.json`, `manifest.json` and
    /// `augmented_train.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.artifacts.save(dir)?;
        write(&dir.join("report.json"), self.report.to_json().as_bytes())?;
        write(&dir.join("manifest.json"), self.manifest.to_json().as_bytes())?;
        write(&dir.join("augmented_train.jsonl"), self.augmented_train.to_jsonl().as_bytes())
    }
}

fn stage(name: &str, input: String, output: String, seed: Option<u64>, config: impl Serialize) -> StageManifest {
    StageManifest {
        name: name.to_string(),
        input_hash: input,
        output_hash: output,
        seed,
        config: serde_json::to_value(config).expect("stage config serializes"),
    }
}

fn token_lists(d: &Dataset) -> Vec<Vec<String>> {
    d.iter().map(|r| tokenize(&r.text)).collect()
}

fn embeddings_hash(vocab: &Vocabulary, emb: &EmbeddingMatrix) -> String {
    let mut bytes = Vec::new();
    for (i, t) in vocab.tokens().iter().enumerate() {
        bytes.extend_from_slice(t.as_bytes());
        bytes.push(0);
        for v in emb.vector(i) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

fn suggestion_count(d: &Dataset) -> usize {
    d.iter().filter(|r| r.label == Label::Suggestion).count()
}

/// Runs preprocessing, vocabulary, preliminary embeddings, baseline
/// classifier, augmentation, embedding fine-tuning, transformer training
/// and evaluation.
///
/// Only the train-split rows of `train` are used for fitting; every row of
/// `test` is evaluated. The test set is hashed before and after the run and
/// the run fails if the hashes differ.
pub fn run_pipeline(train: &Dataset, test: &Dataset, cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let test_hash_before = test.content_hash();
    let train = train.split(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidArgument("training data has no train-split rows".into()));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    let train_hash = train.content_hash();
    let mut stages = Vec::new();

    let p = &cfg.preprocess;
    let lexicon = if p.spell_correct {
        build_lexicon(&train, p.lexicon_min_count, cfg.paths.wordlist.as_deref())?
    } else {
        Lexicon::default()
    };
    let train_pp = preprocess_dataset(&train, &lexicon, p.spell_threshold)?;
    stages.push(stage("preprocess", train_hash.clone(), train_pp.content_hash(), None, p));
    log::info!("preprocessed {} train reviews, lexicon of {} words", train_pp.len(), lexicon.len());

    let seqs: Vec<TokenSeq> = train_pp.iter().map(|r| TokenSeq::new(r.id.clone(), tokenize(&r.text))).collect();
    let vocab = build_vocab(&seqs, cfg.embed.min_count)?;
    let vocab_hash = json_hash(&vocab.tokens());
    stages.push(stage("vocab", train_pp.content_hash(), vocab_hash.clone(), None, cfg.embed.min_count));

    let init = match &cfg.paths.embeddings_init {
        Some(path) => Some(EmbeddingMatrix::load(path)?),
        None => None,
    };
    let (emb0, _) = train_skipgram(
        &token_lists(&train_pp),
        &vocab,
        &cfg.embed,
        init.as_ref().map(|(v, e, _)| (v, e)),
    )?;
    stages.push(stage(
        "embed_initial",
        train_pp.content_hash(),
        embeddings_hash(&vocab, &emb0),
        Some(cfg.embed.seed),
        &cfg.embed,
    ));

    let baseline = train_baseline(&train_pp, &emb0, &vocab, &cfg.baseline)?;
    stages.push(stage(
        "baseline",
        embeddings_hash(&vocab, &emb0),
        json_hash(&baseline),
        Some(cfg.baseline.seed),
        &cfg.baseline,
    ));

    let a = &cfg.augment;
    let mut summary = AugmentSummary {
        method: a.method.as_str().to_string(),
        suggestions_before: suggestion_count(&train_pp),
        ..Default::default()
    };
    let balanced = match a.method {
        AugmentMethod::Discourse => {
            let (d, report) = oversample_discourse(&train_pp, &baseline, &a.markers, &emb0, &vocab)?;
            summary.discourse = Some(report);
            d
        }
        AugmentMethod::None | AugmentMethod::Smote => train_pp.clone(),
    };

    let (emb, embedding_trace) = train_skipgram(&token_lists(&balanced), &vocab, &cfg.embed, Some((&vocab, &emb0)))?;

    let mut model = TransformerModel::new(cfg.transformer.clone(), emb.d_emb())?;
    model.set_cls(emb.vector(CLS))?;
    let mut examples: Vec<TrainExample> = balanced
        .iter()
        .map(|r| {
            Ok(TrainExample {
                rows: model.token_rows(&tokenize(&r.text), &vocab, &emb)?,
                suggestion: r.label.is_suggestion(),
                domain: r.domain,
            })
        })
        .collect::<Result<_>>()?;
    if a.method == AugmentMethod::Smote {
        for (d, points) in smote_examples(&balanced, &vocab, &emb, a.smote_k, a.smote_ratio, a.seed)? {
            summary.smote_added.insert(d, points.len());
            examples.extend(points.into_iter().map(|v| TrainExample {
                rows: Matrix::from_vec(1, v.len(), v),
                suggestion: true,
                domain: d,
            }));
        }
    }
    summary.suggestions_after = examples.iter().filter(|e| e.suggestion).count();
    stages.push(stage(
        "augment",
        train_pp.content_hash(),
        balanced.content_hash(),
        Some(a.seed),
        serde_json::json!({ "config": a, "summary": &summary }),
    ));
    stages.push(stage(
        "embed_finetune",
        balanced.content_hash(),
        embeddings_hash(&vocab, &emb),
        Some(cfg.embed.seed),
        &cfg.embed,
    ));
    log::info!(
        "training transformer on {} examples ({} suggestions)",
        examples.len(),
        summary.suggestions_after
    );

    let train_trace = xformer::train(&mut model, &examples)?;
    stages.push(stage(
        "train",
        embeddings_hash(&vocab, &emb),
        sha256_hex(&model.to_bytes()),
        Some(cfg.transformer.seed),
        &cfg.transformer,
    ));

    let artifacts = Artifacts {
        config: cfg.clone(),
        lexicon,
        vocab,
        embeddings: emb,
        model,
        baseline: Some(baseline),
    };
    let report = evaluate(test, &artifacts)?;
    stages.push(stage(
        "evaluate",
        test_hash_before.clone(),
        json_hash(&report),
        None,
        Value::Null,
    ));
    let test_hash_after = test.content_hash();
    if test_hash_after != test_hash_before {
        return Err(Error::InvalidArgument("test split changed during the run".into()));
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        config_hash: json_hash(cfg),
        seeds: cfg.seeds(),
        train_hash,
        test_hash_before,
        test_hash_after,
        stages,
    };
    Ok(PipelineOutput {
        artifacts,
        report,
        manifest,
        augmented_train: balanced,
        augment: summary,
        train_trace,
        embedding_trace,
    })
}

/// Per-domain SMOTE over mean-pooled suggestion vectors. Domains with fewer
/// than two suggestions get nothing; smaller ones use `k = n - 1`.
pub fn smote_examples(
    train: &Dataset,
    vocab: &Vocabulary,
    emb: &EmbeddingMatrix,
    k: usize,
    ratio: f64,
    seed: u64,
) -> Result<Vec<(Domain, Vec<Vec<f64>>)>> {
    let mut out = Vec::new();
    for d in Domain::ALL {
        let minority: Vec<FeatureExample> = train
            .iter()
            .filter(|r| r.domain == d && r.label == Label::Suggestion)
            .map(|r| FeatureExample {
                vector: emb.mean_pool(vocab, &tokenize(&r.text)),
                label: Label::Suggestion,
            })
            .collect();
        let n_new = (minority.len() as f64 * ratio).round() as usize;
        if minority.len() < 2 || n_new == 0 {
            out.push((d, Vec::new()));
            continue;
        }
        let k = k.min(minority.len() - 1);
        let points = oversample_smote(&minority, k, n_new, seed.wrapping_add(d.index() as u64))?
            .into_iter()
            .map(|s| s.example.vector)
            .collect();
        out.push((d, points));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(s: bool, d: Option<Domain>) -> TwoTierPrediction {
        TwoTierPrediction {
            is_suggestion: s,
            domain: d,
            suggestion_prob: if s { 0.9 } else { 0.1 },
        }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_binary(&[true, false, true], &[true, false, true]).unwrap(), 1.0);
        let p = [true, true, false, false];
        let g = [true, false, true, false];
        assert_eq!(f1_binary(&p, &g).unwrap(), 0.5);
        assert_eq!(f1_binary(&[false, false], &[true, false]).unwrap(), 0.0);
        assert_eq!(f1_binary(&[false, false], &[false, false]).unwrap(), 1.0);
        assert!(f1_binary(&[true], &[true, false]).is_err());
        assert!(f1_binary(&[], &[]).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let golds = vec![
            (true, Domain::Hotel),
            (false, Domain::Hotel),
            (true, Domain::Software),
            (false, Domain::Travel),
        ];
        let preds: Vec<_> = golds.iter().map(|(s, d)| pred(*s, s.then_some(*d))).collect();
        let r = score(&golds, &preds).unwrap();
        assert!(r.per_domain.values().all(|&f| f == 1.0));
        assert_eq!(r.pooled_fine_grain, 1.0);
        assert_eq!(r.confusion.joint.iter().flatten().sum::<usize>(), 4);
    }

    #[test]
    fn wrong_domain_hurts_pooled_only() {
        let golds = vec![(true, Domain::Hotel), (true, Domain::Travel), (false, Domain::Hotel)];
        let preds = vec![
            pred(true, Some(Domain::Travel)),
            pred(true, Some(Domain::Travel)),
            pred(false, None),
        ];
        let r = score(&golds, &preds).unwrap();
        assert_eq!(r.per_domain[&Domain::Hotel], 1.0);
        assert_eq!(r.per_class[&Domain::Hotel], 0.0);
        assert!((r.per_class[&Domain::Travel] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.pooled_fine_grain - (0.0 + 1.0 + 2.0 / 3.0 + 1.0) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn score_rejects_bad_input() {
        assert!(score(&[], &[]).is_err());
        assert!(score(&[(true, Domain::Hotel)], &[]).is_err());
    }
}
