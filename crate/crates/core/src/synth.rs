//! Synthetic review corpus with planted suggestion cues.
//!
//! Suggestions are built from modal-cue templates ("you should add a pool")
//! and usually come wrapped in a descriptive clause joined by a discourse
//! marker. Each domain has its own nouns plus one planted keyword that
//! appears in about half of its noun slots. Non-suggestions reuse the same
//! nouns, adjectives and markers, and a few contain cue words in a
//! non-suggestive sense.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Domain, Label, Review, Split};
use crate::error::{Error, Result};

/// Mix of suggestion shapes, as weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeMix {
    /// "you should add a pool"
    pub standalone: f64,
    /// "the room was clean but you should add a pool"
    pub context_first: f64,
    /// "you should add a pool because the room was hot"
    pub suggestion_first: f64,
}

impl Default for ShapeMix {
    fn default() -> Self {
        ShapeMix {
            standalone: 1.0,
            context_first: 1.0,
            suggestion_first: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_reviews: usize,
    /// Non-suggestions per suggestion.
    pub imbalance: f64,
    pub test_fraction: f64,
    /// Chance that a word of five or more letters gets one letter replaced.
    pub typo_rate: f64,
    /// Chance that a non-suggestion uses a cue word non-suggestively.
    pub hard_negative_rate: f64,
    pub train_shapes: ShapeMix,
    pub test_shapes: ShapeMix,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_reviews: 4000,
            imbalance: 10.0,
            test_fraction: 0.25,
            typo_rate: 0.02,
            hard_negative_rate: 0.05,
            train_shapes: ShapeMix {
                standalone: 0.15,
                context_first: 0.8,
                suggestion_first: 0.05,
            },
            test_shapes: ShapeMix::default(),
            seed: 42,
        }
    }
}

/// The keyword planted in each domain.
pub fn planted_keyword(d: Domain) -> &'static str {
    match d {
        Domain::Hotel => "room",
        Domain::Electronics => "battery",
        Domain::Travel => "tour",
        Domain::Software => "app",
    }
}

struct Lexis {
    nouns: &'static [&'static str],
    good: &'static [&'static str],
    bad: &'static [&'static str],
    /// Descriptive clauses; `{n}` is a noun, `{a}` an adjective.
    scenes: &'static [&'static str],
    /// Domain-specific suggestion verbs with their -ing forms.
    verbs: &'static [(&'static str, &'static str)],
}

fn lexis(d: Domain) -> &'static Lexis {
    match d {
        Domain::Hotel => &Lexis {
            nouns: &["pool", "lobby", "breakfast", "bed", "towel", "balcony", "shower", "gym", "minibar", "reception"],
            good: &["spacious", "cozy", "luxurious", "spotless", "clean"],
            bad: &["musty", "noisy", "dirty", "cramped", "shabby"],
            scenes: &[
                "we stayed two nights and the {n} was {a}",
                "the {n} near our suite was {a}",
                "after check in the {n} seemed {a}",
                "the {n} overlooking the beach was {a}",
                "housekeeping left the {n} {a}",
            ],
            verbs: &[("renovate", "renovating"), ("refurbish", "refurbishing")],
        },
        Domain::Electronics => &Lexis {
            nouns: &["screen", "charger", "speaker", "keyboard", "camera", "cable", "headphone", "remote", "button", "case"],
            good: &["durable", "sleek", "crisp", "sturdy", "responsive"],
            bad: &["flimsy", "glitchy", "fragile", "dim", "overheating"],
            scenes: &[
                "out of the box the {n} felt {a}",
                "after a week of charging the {n} was {a}",
                "the {n} on this gadget is {a}",
                "compared to my old phone the {n} is {a}",
                "the {n} of the device seemed {a}",
            ],
            verbs: &[("redesign", "redesigning"), ("waterproof", "waterproofing")],
        },
        Domain::Travel => &Lexis {
            nouns: &["guide", "flight", "itinerary", "bus", "ticket", "cruise", "museum", "excursion", "luggage", "airport"],
            good: &["scenic", "punctual", "memorable", "relaxing", "breathtaking"],
            bad: &["delayed", "crowded", "rushed", "overpriced", "exhausting"],
            scenes: &[
                "on our trip to the island the {n} was {a}",
                "the {n} during the journey felt {a}",
                "our {n} to the mountains was {a}",
                "the sightseeing {n} was {a}",
                "during the vacation the {n} seemed {a}",
            ],
            verbs: &[("reschedule", "rescheduling"), ("shorten", "shortening")],
        },
        Domain::Software => &Lexis {
            nouns: &["interface", "menu", "login", "dashboard", "plugin", "update", "editor", "sync", "setting", "installer"],
            good: &["intuitive", "snappy", "stable", "lightweight", "seamless"],
            bad: &["buggy", "laggy", "bloated", "unstable", "clunky"],
            scenes: &[
                "since the last release the {n} is {a}",
                "after installing it the {n} was {a}",
                "on my laptop the {n} runs {a}",
                "the {n} in version two feels {a}",
                "when i logged in the {n} looked {a}",
            ],
            verbs: &[("patch", "patching"), ("streamline", "streamlining")],
        },
    }
}

#[cfg(test)]
fn nouns(d: Domain) -> &'static [&'static str] {
    lexis(d).nouns
}

const GOOD: &[&str] = &["great", "lovely", "friendly", "reliable", "nice"];
const BAD: &[&str] = &["slow", "broken", "awful", "outdated", "expensive"];
const VERBS: &[(&str, &str)] = &[
    ("add", "adding"),
    ("improve", "improving"),
    ("fix", "fixing"),
    ("upgrade", "upgrading"),
    ("replace", "replacing"),
    ("offer", "offering"),
    ("extend", "extending"),
    ("provide", "providing"),
];
const MARKERS: &[&str] = &["and", "but", "because"];

struct Gen<'a> {
    rng: ChaCha8Rng,
    cfg: &'a SynthConfig,
}

impl Gen<'_> {
    fn pick<'s>(&mut self, xs: &[&'s str]) -> &'s str {
        xs.choose(&mut self.rng).copied().expect("non-empty word list")
    }

    fn noun(&mut self, d: Domain) -> &'static str {
        if self.rng.random_bool(0.5) {
            planted_keyword(d)
        } else {
            self.pick(lexis(d).nouns)
        }
    }

    /// Domain adjectives two times in three, shared ones otherwise.
    fn adjective(&mut self, d: Domain) -> &'static str {
        let l = lexis(d);
        let good = self.rng.random_bool(0.5);
        match (self.rng.random_range(0..3), good) {
            (0, true) => self.pick(GOOD),
            (0, false) => self.pick(BAD),
            (_, true) => self.pick(l.good),
            (_, false) => self.pick(l.bad),
        }
    }

    fn context(&mut self, d: Domain) -> String {
        let n = self.noun(d);
        let a = self.adjective(d);
        if self.rng.random_bool(0.5) {
            let scene = self.pick(lexis(d).scenes);
            return scene.replace("{n}", n).replace("{a}", a);
        }
        match self.rng.random_range(0..4) {
            0 => format!("the {n} was {a}"),
            1 => format!("we found the {n} {a}"),
            2 => format!("our {n} was really {a}"),
            _ => format!("the {n} felt {a}"),
        }
    }

    fn hard_negative(&mut self, d: Domain) -> String {
        let n = self.noun(d);
        match self.rng.random_range(0..3) {
            0 => format!("the {n} works exactly as it should"),
            1 => format!("i would recommend the {n} to friends"),
            _ => format!("the {n} could not have been better"),
        }
    }

    fn suggestion(&mut self, d: Domain) -> String {
        let n = self.noun(d);
        let verbs = if self.rng.random_bool(0.25) { lexis(d).verbs } else { VERBS };
        let &(v, ving) = verbs.choose(&mut self.rng).expect("verbs");
        match self.rng.random_range(0..8) {
            0 => format!("you should {v} the {n}"),
            1 => format!("they should {v} a better {n}"),
            2 => format!("please {v} the {n}"),
            3 => format!("it would be great to {v} the {n}"),
            4 => format!("i suggest {ving} the {n}"),
            5 => format!("consider {ving} a new {n}"),
            6 => format!("management needs to {v} the {n}"),
            _ => format!("i would recommend {ving} the {n}"),
        }
    }

    fn non_suggestion(&mut self, d: Domain) -> String {
        let first = if self.rng.random_bool(self.cfg.hard_negative_rate) {
            self.hard_negative(d)
        } else {
            self.context(d)
        };
        if self.rng.random_bool(0.5) {
            let m = self.pick(MARKERS);
            let second = self.context(d);
            format!("{first} {m} {second}")
        } else {
            first
        }
    }

    fn suggestion_review(&mut self, d: Domain, mix: &ShapeMix) -> String {
        let total = mix.standalone + mix.context_first + mix.suggestion_first;
        let u = self.rng.random::<f64>() * total;
        let s = self.suggestion(d);
        if u < mix.standalone {
            s
        } else if u < mix.standalone + mix.context_first {
            let c = self.context(d);
            let m = self.pick(MARKERS);
            format!("{c} {m} {s}")
        } else {
            let c = self.context(d);
            let m = self.pick(MARKERS);
            format!("{s} {m} {c}")
        }
    }

    fn typos(&mut self, text: &str) -> String {
        let words: Vec<String> = text
            .split(' ')
            .map(|w| {
                if w.len() >= 5 && self.rng.random_bool(self.cfg.typo_rate) {
                    let mut chars: Vec<char> = w.chars().collect();
                    let i = self.rng.random_range(1..chars.len());
                    chars[i] = (b'a' + self.rng.random_range(0..26u8)) as char;
                    chars.into_iter().collect()
                } else {
                    w.to_string()
                }
            })
            .collect();
        let mut out = words.join(" ");
        if let Some(first) = out.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        out.push('.');
        out
    }
}

fn rounded(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Generates a corpus split into train and test. Counts are exact per
/// domain: `n_reviews / 4` reviews each, `1 / (1 + imbalance)` of them
/// suggestions, and `test_fraction` of every (domain, label) cell in test.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_reviews < 8 || cfg.imbalance.is_nan() || cfg.imbalance < 0.0 || !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs n_reviews >= 8, imbalance >= 0 and test_fraction in [0, 1); got {}, {}, {}",
            cfg.n_reviews, cfg.imbalance, cfg.test_fraction
        )));
    }
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        cfg,
    };
    let per_domain = cfg.n_reviews / Domain::ALL.len();
    let n_sugg = rounded(per_domain as f64 / (1.0 + cfg.imbalance)).max(1);
    let mut reviews = Vec::with_capacity(cfg.n_reviews);
    for d in Domain::ALL {
        let mut cells = Vec::new();
        for (label, count) in [(Label::Suggestion, n_sugg), (Label::NonSuggestion, per_domain - n_sugg)] {
            let n_test = rounded(count as f64 * cfg.test_fraction);
            let mut splits: Vec<Split> = (0..count).map(|i| if i < n_test { Split::Test } else { Split::Train }).collect();
            splits.shuffle(&mut g.rng);
            for split in splits {
                cells.push((label, split));
            }
        }
        cells.shuffle(&mut g.rng);
        for (i, (label, split)) in cells.into_iter().enumerate() {
            let body = match label {
                Label::Suggestion => {
                    let mix = if split == Split::Test { &cfg.test_shapes } else { &cfg.train_shapes };
                    g.suggestion_review(d, mix)
                }
                Label::NonSuggestion => g.non_suggestion(d),
            };
            let text = g.typos(&body);
            reviews.push(Review::new(format!("{}-{i:05}", d.as_str()), text, d, label, split));
        }
    }
    Dataset::new(reviews)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::balance_stats;

    #[test]
    fn counts_and_determinism() {
        let cfg = SynthConfig {
            n_reviews: 400,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.len(), 400);
        let stats = balance_stats(&a).unwrap();
        for d in Domain::ALL {
            let train = stats.get(d, Split::Train).unwrap();
            let test = stats.get(d, Split::Test).unwrap();
            assert_eq!(train.suggestion_count + test.suggestion_count, 9);
            assert_eq!(train.total() + test.total(), 100);
            assert_eq!(test.suggestion_count, 2);
        }
    }

    #[test]
    fn suggestions_carry_cues_and_keywords() {
        let d = generate(&SynthConfig {
            n_reviews: 400,
            typo_rate: 0.0,
            ..Default::default()
        })
        .unwrap();
        let cues = ["should", "please", "would be great", "suggest", "consider", "needs to", "recommend"];
        for r in d.iter().filter(|r| r.label == Label::Suggestion) {
            let lower = r.text.to_lowercase();
            assert!(cues.iter().any(|c| lower.contains(c)), "{}", r.text);
            assert!(
                lower.contains(planted_keyword(r.domain)) || nouns(r.domain).iter().any(|n| lower.contains(n)),
                "{}",
                r.text
            );
        }
    }
}
