//! Minority oversampling.
//!
//! [`oversample_discourse`] splits reviews at discourse markers and adds the
//! swapped sequence of every review the baseline classifier calls a
//! suggestion, plus each cropped clause the classifier still calls a
//! suggestion. [`oversample_smote`] is the feature-space comparator.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Domain, Label, Provenance, Review, Split};
use crate::embed::{EmbeddingMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{dot, sigmoid};
use crate::textprep::tokenize;

pub const DEFAULT_MARKERS: [&str; 3] = ["and", "but", "because"];

pub fn default_markers() -> Vec<String> {
    DEFAULT_MARKERS.iter().map(|s| s.to_string()).collect()
}

/// Logistic regression over mean-pooled token embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Zero for a classifier that was never fitted.
    pub trained_examples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeight {
    Uniform,
    /// Each class contributes equally to the loss.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub class_weight: ClassWeight,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 30,
            lr: 0.5,
            l2: 1e-4,
            class_weight: ClassWeight::Balanced,
            seed: 42,
        }
    }
}

impl BaselineClassifier {
    pub fn untrained(dim: usize) -> Self {
        BaselineClassifier {
            weights: vec![0.0; dim],
            bias: 0.0,
            trained_examples: 0,
        }
    }

    pub fn probability(&self, features: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, features) + self.bias)
    }

    pub fn predict_features(&self, features: &[f64]) -> bool {
        self.probability(features) >= 0.5
    }

    /// `C(tokens)`.
    pub fn predict(&self, tokens: &[String], vocab: &Vocabulary, emb: &EmbeddingMatrix) -> bool {
        self.predict_features(&emb.mean_pool(vocab, tokens))
    }

    pub fn is_trained(&self) -> bool {
        self.trained_examples > 0
    }
}

/// Fits the pruning classifier on the train split of `train`.
pub fn train_baseline(
    train: &Dataset,
    emb: &EmbeddingMatrix,
    vocab: &Vocabulary,
    cfg: &BaselineConfig,
) -> Result<BaselineClassifier> {
    let examples: Vec<(Vec<f64>, bool)> = train
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| (emb.mean_pool(vocab, &tokenize(&r.text)), r.label.is_suggestion()))
        .collect();
    let features: Vec<FeatureExample> = examples
        .into_iter()
        .map(|(vector, pos)| FeatureExample {
            vector,
            label: if pos { Label::Suggestion } else { Label::NonSuggestion },
        })
        .collect();
    train_baseline_features(&features, cfg)
}

pub fn train_baseline_features(examples: &[FeatureExample], cfg: &BaselineConfig) -> Result<BaselineClassifier> {
    let n_pos = examples.iter().filter(|e| e.label.is_suggestion()).count();
    let n_neg = examples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "baseline classifier needs both classes ({n_pos} suggestions, {n_neg} non-suggestions)"
        )));
    }
    let dim = examples[0].vector.len();
    let (w_pos, w_neg) = match cfg.class_weight {
        ClassWeight::Uniform => (1.0, 1.0),
        ClassWeight::Balanced => {
            let n = examples.len() as f64;
            (n / (2.0 * n_pos as f64), n / (2.0 * n_neg as f64))
        }
    };
    let mut clf = BaselineClassifier::untrained(dim);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        // linear decay keeps the final iterate from bouncing on the heavily
        // weighted minority examples
        let lr = cfg.lr * (1.0 - epoch as f64 / cfg.epochs as f64);
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &examples[i];
            let y = if ex.label.is_suggestion() { 1.0 } else { 0.0 };
            let weight = if ex.label.is_suggestion() { w_pos } else { w_neg };
            let err = weight * (clf.probability(&ex.vector) - y);
            for (w, x) in clf.weights.iter_mut().zip(&ex.vector) {
                *w -= lr * (err * x + cfg.l2 * *w);
            }
            clf.bias -= lr * err;
        }
    }
    if !clf.bias.is_finite() || clf.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFiniteLoss {
            epoch: cfg.epochs,
            batch: 0,
            value: f64::NAN,
        });
    }
    clf.trained_examples = examples.len();
    Ok(clf)
}

/// `head ++ [marker] ++ tail` with both sides non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscourseSplit {
    pub head: Vec<String>,
    pub marker: String,
    pub tail: Vec<String>,
}

impl DiscourseSplit {
    pub fn rejoin(&self) -> Vec<String> {
        let mut out = self.head.clone();
        out.push(self.marker.clone());
        out.extend(self.tail.iter().cloned());
        out
    }
}

/// Splits at the first occurrence of `marker`; `None` if it is absent or
/// either side would be empty.
pub fn split_at_marker(tokens: &[String], marker: &str) -> Option<DiscourseSplit> {
    let pos = tokens.iter().position(|t| t == marker)?;
    if pos == 0 || pos + 1 == tokens.len() {
        return None;
    }
    Some(DiscourseSplit {
        head: tokens[..pos].to_vec(),
        marker: marker.to_string(),
        tail: tokens[pos + 1..].to_vec(),
    })
}

/// `tail ++ [marker] ++ head`
pub fn swap(s: &DiscourseSplit) -> Vec<String> {
    let mut out = s.tail.clone();
    out.push(s.marker.clone());
    out.extend(s.head.iter().cloned());
    out
}

/// The split with head and tail exchanged.
pub fn swapped(s: &DiscourseSplit) -> DiscourseSplit {
    DiscourseSplit {
        head: s.tail.clone(),
        marker: s.marker.clone(),
        tail: s.head.clone(),
    }
}

/// `(head, tail)` as standalone candidates.
pub fn crop(s: &DiscourseSplit) -> (Vec<String>, Vec<String>) {
    (s.head.clone(), s.tail.clone())
}

/// Inverts [`swap`]: the original head never contains the marker, so the
/// swapped sequence splits at the marker's last occurrence.
pub fn unswap(swapped_tokens: &[String], marker: &str) -> Option<Vec<String>> {
    let pos = swapped_tokens.iter().rposition(|t| t == marker)?;
    if pos == 0 || pos + 1 == swapped_tokens.len() {
        return None;
    }
    let s = DiscourseSplit {
        head: swapped_tokens[..pos].to_vec(),
        marker: marker.to_string(),
        tail: swapped_tokens[pos + 1..].to_vec(),
    };
    Some(swap(&s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugKind {
    Swap,
    CropHead,
    CropTail,
}

impl AugKind {
    fn tag(self) -> &'static str {
        match self {
            AugKind::Swap => "swap",
            AugKind::CropHead => "crop-head",
            AugKind::CropTail => "crop-tail",
        }
    }

    fn provenance(self) -> Provenance {
        match self {
            AugKind::Swap => Provenance::SwapAug,
            AugKind::CropHead | AugKind::CropTail => Provenance::CropAug,
        }
    }
}

/// Id of a generated review: `<parent>#<kind>:<marker>`.
pub fn augmented_id(parent: &str, kind: AugKind, marker: &str) -> String {
    format!("{parent}#{}:{marker}", kind.tag())
}

/// Parses an id produced by [`augmented_id`].
pub fn parse_augmented_id(id: &str) -> Option<(&str, AugKind, &str)> {
    let (parent, rest) = id.rsplit_once('#')?;
    let (tag, marker) = rest.split_once(':')?;
    let kind = match tag {
        "swap" => AugKind::Swap,
        "crop-head" => AugKind::CropHead,
        "crop-tail" => AugKind::CropTail,
        _ => return None,
    };
    Some((parent, kind, marker))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiscourseReport {
    pub candidates_expanded: usize,
    pub swaps_added: usize,
    pub crops_added: usize,
    pub crops_pruned: usize,
    pub duplicates_dropped: usize,
}

/// Discourse-marker oversampling of the train split.
///
/// Loops domain by domain, review by review and marker by marker. A review
/// with `C(r) = 1` contributes its swap unconditionally and each cropped side
/// for which `C(side) = 1`. Generated reviews are labelled suggestion and
/// appended after the originals; sequences already present in the domain are
/// dropped.
pub fn oversample_discourse(
    train: &Dataset,
    c: &BaselineClassifier,
    markers: &[String],
    emb: &EmbeddingMatrix,
    vocab: &Vocabulary,
) -> Result<(Dataset, DiscourseReport)> {
    if !c.is_trained() {
        return Err(Error::InvalidArgument("baseline classifier is untrained".into()));
    }
    // (review index, generated candidates) computed independently per review
    let expansions: Vec<Vec<(AugKind, String, Vec<String>)>> = train
        .reviews()
        .par_iter()
        .map(|r| {
            if r.split != Split::Train || r.provenance != Provenance::Original {
                return Vec::new();
            }
            let tokens = tokenize(&r.text);
            if !c.predict(&tokens, vocab, emb) {
                return Vec::new();
            }
            let mut out = Vec::new();
            for m in markers {
                let Some(s) = split_at_marker(&tokens, m) else { continue };
                out.push((AugKind::Swap, m.clone(), swap(&s)));
                let (head, tail) = crop(&s);
                let keep_head = c.predict(&head, vocab, emb);
                let keep_tail = c.predict(&tail, vocab, emb);
                if keep_head {
                    out.push((AugKind::CropHead, m.clone(), head));
                }
                if keep_tail {
                    out.push((AugKind::CropTail, m.clone(), tail));
                }
                // pruned crops are recorded as an empty token list
                if !keep_head {
                    out.push((AugKind::CropHead, m.clone(), Vec::new()));
                }
                if !keep_tail {
                    out.push((AugKind::CropTail, m.clone(), Vec::new()));
                }
            }
            out
        })
        .collect();

    let mut report = DiscourseReport::default();
    let mut added: Vec<Review> = Vec::new();
    let domains: Vec<Domain> = Domain::ALL.iter().copied().filter(|d| train.domains().contains(d)).collect();
    for d in domains {
        let mut seen: HashSet<Vec<String>> = train
            .iter()
            .filter(|r| r.domain == d && r.split == Split::Train)
            .map(|r| tokenize(&r.text))
            .collect();
        for (r, cands) in train.iter().zip(&expansions) {
            if r.domain != d || cands.is_empty() {
                continue;
            }
            report.candidates_expanded += 1;
            for (kind, marker, tokens) in cands {
                if tokens.is_empty() {
                    report.crops_pruned += 1;
                    continue;
                }
                if !seen.insert(tokens.clone()) {
                    report.duplicates_dropped += 1;
                    continue;
                }
                match kind {
                    AugKind::Swap => report.swaps_added += 1,
                    _ => report.crops_added += 1,
                }
                added.push(Review {
                    id: augmented_id(&r.id, *kind, marker),
                    text: tokens.join(" "),
                    domain: d,
                    label: Label::Suggestion,
                    split: Split::Train,
                    provenance: kind.provenance(),
                });
            }
        }
    }
    let mut all = train.reviews().to_vec();
    all.extend(added);
    Ok((Dataset::new(all)?, report))
}

/// A point in embedding space with its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExample {
    pub vector: Vec<f64>,
    pub label: Label,
}

/// A SMOTE point together with how it was made.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticExample {
    pub example: FeatureExample,
    /// Index of the seed point in the minority list.
    pub seed_index: usize,
    /// Index of the chosen neighbor in the minority list.
    pub neighbor_index: usize,
    pub lambda: f64,
}

/// `x_i + λ (x_z − x_i)`
pub fn interpolate(xi: &[f64], xz: &[f64], lambda: f64) -> Vec<f64> {
    xi.iter().zip(xz).map(|(a, b)| a + lambda * (b - a)).collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest other points to `points[i]`, ties by index.
pub fn nearest_neighbors(points: &[&[f64]], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, p)| (squared_distance(points[i], p), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Generates `n_new` synthetic minority points. Seeds cycle through the
/// minority list in order; each picks one of its `k` Euclidean nearest
/// minority neighbors uniformly and interpolates with `λ ~ U(0, 1)`.
pub fn oversample_smote(minority: &[FeatureExample], k: usize, n_new: usize, seed: u64) -> Result<Vec<SyntheticExample>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if minority.len() < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "minority class of {} points is too small for k = {k}",
            minority.len()
        )));
    }
    let points: Vec<&[f64]> = minority.iter().map(|e| e.vector.as_slice()).collect();
    let neighbors: Vec<Vec<usize>> = (0..points.len())
        .into_par_iter()
        .map(|i| nearest_neighbors(&points, i, k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_new);
    for t in 0..n_new {
        let i = t % minority.len();
        let z = neighbors[i][rng.random_range(0..k)];
        let lambda: f64 = rng.random();
        out.push(SyntheticExample {
            example: FeatureExample {
                vector: interpolate(points[i], points[z], lambda),
                label: minority[i].label,
            },
            seed_index: i,
            neighbor_index: z,
            lambda,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn t(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn split_examples() {
        let s = split_at_marker(&t(&["great", "location", "but", "needs", "better", "wifi"]), "but").unwrap();
        assert_eq!(s.head, t(&["great", "location"]));
        assert_eq!(s.tail, t(&["needs", "better", "wifi"]));
        assert!(split_at_marker(&t(&["but", "ok"]), "but").is_none());
        assert!(split_at_marker(&t(&["ok", "but"]), "but").is_none());
        assert!(split_at_marker(&t(&["no", "marker", "here"]), "but").is_none());
    }

    #[test]
    fn swap_and_crop_examples() {
        let s = split_at_marker(&t(&["great", "location", "but", "needs", "better", "wifi"]), "but").unwrap();
        assert_eq!(swap(&s), t(&["needs", "better", "wifi", "but", "great", "location"]));
        assert_eq!(swap(&swapped(&s)), s.rejoin());
        let (h, tl) = crop(&s);
        assert_eq!(h, t(&["great", "location"]));
        assert_eq!(tl, t(&["needs", "better", "wifi"]));
        assert!(!h.contains(&"but".to_string()) && !tl.contains(&"but".to_string()));

        let pal = DiscourseSplit { head: t(&["ok"]), marker: "but".into(), tail: t(&["ok"]) };
        assert_eq!(swap(&pal), t(&["ok", "but", "ok"]));
        let one = split_at_marker(&t(&["fine", "and", "you", "should", "fix", "it"]), "and").unwrap();
        assert_eq!(crop(&one).0, t(&["fine"]));
    }

    #[test]
    fn unswap_handles_marker_in_tail() {
        let orig = t(&["a", "b", "and", "c", "and", "d"]);
        let s = split_at_marker(&orig, "and").unwrap();
        assert_eq!(unswap(&swap(&s), "and").unwrap(), orig);
    }

    #[test]
    fn augmented_id_round_trip() {
        let id = augmented_id("h#12", AugKind::CropTail, "because");
        assert_eq!(parse_augmented_id(&id), Some(("h#12", AugKind::CropTail, "because")));
        assert_eq!(parse_augmented_id("plain"), None);
    }

    #[test]
    fn smote_endpoints_and_midpoint() {
        assert_eq!(interpolate(&[0.0, 0.0], &[2.0, 2.0], 0.5), vec![1.0, 1.0]);
        assert_eq!(interpolate(&[0.3, -1.0], &[2.0, 2.0], 0.0), vec![0.3, -1.0]);
        assert_eq!(interpolate(&[0.0, 0.0], &[2.0, 2.0], 1.0), vec![2.0, 2.0]);
    }

    #[test]
    fn smote_errors_and_determinism() {
        let pts: Vec<FeatureExample> = (0..4)
            .map(|i| FeatureExample { vector: vec![i as f64, 0.0], label: Label::Suggestion })
            .collect();
        assert!(oversample_smote(&pts, 4, 3, 1).is_err());
        assert!(oversample_smote(&pts, 0, 3, 1).is_err());
        let a = oversample_smote(&pts, 2, 10, 5).unwrap();
        let b = oversample_smote(&pts, 2, 10, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
    }

    fn toy_embeddings() -> (Vocabulary, EmbeddingMatrix) {
        // "should" points one way, everything else the other
        let words = ["should", "add", "pool", "great", "room", "and", "but", "nice", "view"];
        let vocab = Vocabulary::from_entries(words.iter().map(|w| (w.to_string(), 1)));
        let emb = EmbeddingMatrix {
            vectors: Matrix::from_fn(vocab.len(), 2, |i, j| {
                if vocab.token(i) == "should" {
                    [3.0, 0.0][j]
                } else {
                    [0.0, 0.2 + 0.01 * i as f64][j]
                }
            }),
        };
        (vocab, emb)
    }

    fn review(id: &str, text: &str, label: Label) -> Review {
        Review::new(id, text, Domain::Hotel, label, Split::Train)
    }

    #[test]
    fn baseline_separates_should() {
        let (vocab, emb) = toy_embeddings();
        let mut rs = Vec::new();
        for i in 0..20 {
            rs.push(review(&format!("s{i}"), "you should add pool", Label::Suggestion));
            rs.push(review(&format!("n{i}"), "great room nice view", Label::NonSuggestion));
        }
        let d = Dataset::new(rs).unwrap();
        let cfg = BaselineConfig::default();
        let c = train_baseline(&d, &emb, &vocab, &cfg).unwrap();
        assert_eq!(c, train_baseline(&d, &emb, &vocab, &cfg).unwrap());
        let acc = d
            .iter()
            .filter(|r| c.predict(&tokenize(&r.text), &vocab, &emb) == r.label.is_suggestion())
            .count() as f64
            / d.len() as f64;
        assert!(acc >= 0.95, "{acc}");

        let one_class = d.filter(|r| r.label == Label::NonSuggestion);
        assert!(train_baseline(&one_class, &emb, &vocab, &cfg).is_err());
    }

    #[test]
    fn discourse_oversampling_rules() {
        let (vocab, emb) = toy_embeddings();
        // C(x) = 1 iff the mean vector leans toward "should"
        let c = BaselineClassifier { weights: vec![1.0, -1.0], bias: 0.0, trained_examples: 1 };
        let d = Dataset::new(vec![
            review("a", "great room but should add pool", Label::Suggestion),
            review("b", "should add pool", Label::Suggestion),
            // gold negative but C says suggestion: still expanded
            review("c", "nice view and should add room", Label::NonSuggestion),
            review("d", "great room and nice view", Label::NonSuggestion),
            Review::new("t", "great room but should add pool", Domain::Hotel, Label::Suggestion, Split::Test),
        ])
        .unwrap();
        let (out, report) = oversample_discourse(&d, &c, &default_markers(), &emb, &vocab).unwrap();
        assert_eq!(&out.reviews()[..d.len()], d.reviews());
        let new: Vec<&Review> = out.reviews()[d.len()..].iter().collect();
        let ids: Vec<&str> = new.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(
            ids,
            vec!["a#swap:but", "c#swap:and", "c#crop-tail:and"],
            "crop-tail of `a` duplicates review `b`"
        );
        assert_eq!(new[0].text, "should add pool but great room");
        assert!(new.iter().all(|r| r.label == Label::Suggestion && r.split == Split::Train));
        assert_eq!(report.duplicates_dropped, 1);
        assert_eq!(out.split(Split::Test), d.split(Split::Test));

        let untrained = BaselineClassifier::untrained(2);
        assert!(oversample_discourse(&d, &untrained, &default_markers(), &emb, &vocab).is_err());
    }

    proptest! {
        #[test]
        fn swap_is_invertible(head in proptest::collection::vec("[a-c]", 1..5),
                              tail in proptest::collection::vec("[a-c]|and", 1..5)) {
            let mut toks = head.clone();
            toks.push("and".into());
            toks.extend(tail.clone());
            // head must not contain the marker for the first split to land here
            let s = split_at_marker(&toks, "and").unwrap();
            prop_assert_eq!(unswap(&swap(&s), "and").unwrap(), toks.clone());
            prop_assert_eq!(swap(&swapped(&s)), toks);
        }

        #[test]
        fn smote_points_on_segment(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<FeatureExample> = (0..12)
                .map(|_| FeatureExample { vector: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(), label: Label::Suggestion })
                .collect();
            for s in oversample_smote(&pts, 3, 20, seed).unwrap() {
                let xi = &pts[s.seed_index].vector;
                let xz = &pts[s.neighbor_index].vector;
                prop_assert!((0.0..1.0).contains(&s.lambda));
                let want = interpolate(xi, xz, s.lambda);
                for (a, b) in want.iter().zip(&s.example.vector) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
