//! Review records, dataset ingestion and class-balance statistics.
//!
//! The interchange format is JSONL with the fields `id`, `text`, `domain`,
//! `label`, `split` and `provenance`. CSV files with the same header names are
//! accepted. `split` defaults to `train` and `provenance` to `original`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Hotel,
    Electronics,
    Travel,
    Software,
}

impl Domain {
    pub const ALL: [Domain; 4] = [
        Domain::Hotel,
        Domain::Electronics,
        Domain::Travel,
        Domain::Software,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Domain> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Hotel => "hotel",
            Domain::Electronics => "electronics",
            Domain::Travel => "travel",
            Domain::Software => "software",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hotel" => Ok(Domain::Hotel),
            "electronics" => Ok(Domain::Electronics),
            "travel" => Ok(Domain::Travel),
            "software" => Ok(Domain::Software),
            _ => Err(Error::UnknownDomain(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Suggestion,
    NonSuggestion,
}

impl Label {
    pub fn is_suggestion(self) -> bool {
        self == Label::Suggestion
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Suggestion => "suggestion",
            Label::NonSuggestion => "non_suggestion",
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    /// Also accepts the `1`/`0` encoding used by the original dataset files.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "suggestion" | "1" => Ok(Label::Suggestion),
            "non_suggestion" | "non-suggestion" | "0" => Ok(Label::NonSuggestion),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Original,
    SwapAug,
    CropAug,
    /// SMOTE points never become reviews; this tags the feature rows built from them.
    SmoteAug,
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "original" => Ok(Provenance::Original),
            "swap_aug" => Ok(Provenance::SwapAug),
            "crop_aug" => Ok(Provenance::CropAug),
            "smote_aug" => Ok(Provenance::SmoteAug),
            _ => Err(Error::InvalidArgument(format!("unknown provenance `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub id: String,
    pub text: String,
    pub domain: Domain,
    pub label: Label,
    pub split: Split,
    pub provenance: Provenance,
}

impl Review {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        domain: Domain,
        label: Label,
        split: Split,
    ) -> Self {
        Review {
            id: id.into(),
            text: text.into(),
            domain,
            label,
            split,
            provenance: Provenance::Original,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::malformed(format!("review `{}`", self.id), "empty text"));
        }
        if self.provenance != Provenance::Original && self.split != Split::Train {
            return Err(Error::malformed(
                format!("review `{}`", self.id),
                "augmented review outside the train split",
            ));
        }
        Ok(())
    }
}

/// An ordered, validated collection of reviews.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Dataset {
    reviews: Vec<Review>,
    domains: BTreeSet<Domain>,
}

impl Dataset {
    pub fn new(reviews: Vec<Review>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(reviews.len());
        for r in &reviews {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        let domains = reviews.iter().map(|r| r.domain).collect();
        Ok(Dataset { reviews, domains })
    }

    pub fn reviews(&self) -> &[Review] {
        &self.reviews
    }

    pub fn into_reviews(self) -> Vec<Review> {
        self.reviews
    }

    pub fn domains(&self) -> &BTreeSet<Domain> {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Review> {
        self.reviews.iter()
    }

    /// Reviews of one split, order preserved.
    pub fn split(&self, split: Split) -> Dataset {
        self.filter(|r| r.split == split)
    }

    pub fn filter(&self, keep: impl Fn(&Review) -> bool) -> Dataset {
        let reviews: Vec<Review> = self.reviews.iter().filter(|r| keep(r)).cloned().collect();
        let domains = reviews.iter().map(|r| r.domain).collect();
        Dataset { reviews, domains }
    }

    /// Concatenates two datasets, re-checking id uniqueness.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut all = self.reviews.clone();
        all.extend(other.reviews.iter().cloned());
        Dataset::new(all)
    }

    /// Canonical JSONL bytes; used for hashing and saving.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.reviews {
            out.push_str(&serde_json::to_string(r).expect("review serializes"));
            out.push('\n');
        }
        out
    }

    pub fn content_hash(&self) -> String {
        crate::hashing::sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn save(&self, path: &Path, format: Format) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        match format {
            Format::Jsonl => w
                .write_all(self.to_jsonl().as_bytes())
                .map_err(|e| Error::io(path, e))?,
            Format::Csv => {
                let mut cw = csv::Writer::from_writer(&mut w);
                for r in &self.reviews {
                    cw.serialize(r)
                        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
                }
                cw.flush().map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Review;
    type IntoIter = std::slice::Iter<'a, Review>;

    fn into_iter(self) -> Self::IntoIter {
        self.reviews.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json" => Ok(Format::Jsonl),
            _ => Err(Error::InvalidArgument(format!("unknown format `{s}`"))),
        }
    }
}

/// Loosely typed record as found on disk.
#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: Option<String>,
    domain: Option<String>,
    label: Option<String>,
    split: Option<String>,
    provenance: Option<String>,
}

fn json_scalar_to_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

impl RawRecord {
    fn from_json(line: &str, location: &str) -> Result<RawRecord> {
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::malformed(location, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::malformed(location, "record is not a JSON object"))?;
        let get = |k: &str| obj.get(k).and_then(json_scalar_to_string);
        Ok(RawRecord {
            id: get("id"),
            text: get("text"),
            domain: get("domain"),
            label: get("label"),
            split: get("split"),
            provenance: get("provenance"),
        })
    }

    fn into_review(self, location: &str, row: usize) -> Result<Review> {
        let at = |e: Error| match e {
            Error::UnknownDomain(_) | Error::UnknownLabel(_) => e,
            other => Error::malformed(location, other.to_string()),
        };
        let text = self
            .text
            .ok_or_else(|| Error::malformed(location, "missing field `text`"))?;
        if text.trim().is_empty() {
            return Err(Error::malformed(location, "empty text field"));
        }
        let domain = self
            .domain
            .ok_or_else(|| Error::malformed(location, "missing field `domain`"))?
            .parse::<Domain>()
            .map_err(at)?;
        let label = self
            .label
            .ok_or_else(|| Error::malformed(location, "missing field `label`"))?
            .parse::<Label>()
            .map_err(at)?;
        let split = self.split.as_deref().unwrap_or("").parse::<Split>().map_err(at)?;
        let provenance = self
            .provenance
            .as_deref()
            .unwrap_or("")
            .parse::<Provenance>()
            .map_err(at)?;
        let id = match self.id {
            Some(id) if !id.trim().is_empty() => id,
            _ => format!("row{row}"),
        };
        Ok(Review {
            id,
            text,
            domain,
            label,
            split,
            provenance,
        })
    }
}

/// Reads a dataset; any malformed row fails the whole load.
pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut reviews = Vec::new();
    match format {
        Format::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let location = format!("{name}:{}", i + 1);
                let raw = RawRecord::from_json(&line, &location)?;
                reviews.push(raw.into_review(&location, i + 1)?);
            }
        }
        Format::Csv => {
            let mut rdr = csv::Reader::from_reader(file);
            for (i, rec) in rdr.deserialize::<RawRecord>().enumerate() {
                // header is line 1
                let location = format!("{name}:{}", i + 2);
                let raw = rec.map_err(|e| Error::malformed(&location, e.to_string()))?;
                reviews.push(raw.into_review(&location, i + 1)?);
            }
        }
    }
    Dataset::new(reviews)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub suggestion_count: usize,
    pub non_suggestion_count: usize,
    /// suggestion / non-suggestion, unrounded.
    pub ratio: f64,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.suggestion_count + self.non_suggestion_count
    }
}

/// Per (domain, split) class counts.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BalanceStats {
    pub cells: BTreeMap<(Domain, Split), ClassCounts>,
}

impl BalanceStats {
    pub fn get(&self, domain: Domain, split: Split) -> Option<&ClassCounts> {
        self.cells.get(&(domain, split))
    }

    /// Ratio for a domain, or 0 when the cell is absent.
    pub fn ratio(&self, domain: Domain, split: Split) -> f64 {
        self.get(domain, split).map_or(0.0, |c| c.ratio)
    }
}

/// Counts suggestions and non-suggestions per (domain, split).
///
/// Fails when a cell has suggestions but no non-suggestions, since the ratio
/// is then undefined.
pub fn balance_stats(d: &Dataset) -> Result<BalanceStats> {
    let mut raw: BTreeMap<(Domain, Split), (usize, usize)> = BTreeMap::new();
    for r in d {
        let cell = raw.entry((r.domain, r.split)).or_default();
        match r.label {
            Label::Suggestion => cell.0 += 1,
            Label::NonSuggestion => cell.1 += 1,
        }
    }
    let mut cells = BTreeMap::new();
    for (key, (s, n)) in raw {
        let ratio = match (s, n) {
            (0, 0) => 0.0,
            (_, 0) => {
                return Err(Error::InvalidArgument(format!(
                    "{} {:?}: {s} suggestions and no non-suggestions, ratio undefined",
                    key.0, key.1
                )))
            }
            _ => s as f64 / n as f64,
        };
        cells.insert(
            key,
            ClassCounts {
                suggestion_count: s,
                non_suggestion_count: n,
                ratio,
            },
        );
    }
    Ok(BalanceStats { cells })
}

/// Keeps `round_half_up(n * fraction)` reviews of every (domain, split, label)
/// cell, never fewer than one from a non-empty cell. Output preserves input order.
pub fn stratified_subsample(d: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut cells: BTreeMap<(Domain, Split, Label), Vec<usize>> = BTreeMap::new();
    for (i, r) in d.iter().enumerate() {
        cells.entry((r.domain, r.split, r.label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; d.len()];
    for idx in cells.values_mut() {
        let target = subsample_count(idx.len(), fraction);
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(target) {
            keep[i] = true;
        }
    }
    let reviews = d
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    Dataset::new(reviews)
}

pub(crate) fn subsample_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let scaled = (n as f64 * fraction + 0.5).floor() as usize;
    scaled.clamp(1, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn mk(id: &str, domain: Domain, label: Label, split: Split) -> Review {
        Review::new(id, format!("text of {id}"), domain, label, split)
    }

    #[test]
    fn loads_single_jsonl_row() {
        let f = write_tmp(
            r#"{"id":"h1","text":"The wifi should be faster","domain":"hotel","label":"suggestion"}"#,
            ".jsonl",
        );
        let d = load_dataset(f.path(), Format::Jsonl).unwrap();
        assert_eq!(d.len(), 1);
        let r = &d.reviews()[0];
        assert_eq!(r.id, "h1");
        assert_eq!(r.text, "The wifi should be faster");
        assert_eq!(r.domain, Domain::Hotel);
        assert_eq!(r.label, Label::Suggestion);
        assert_eq!(r.split, Split::Train);
        assert_eq!(r.provenance, Provenance::Original);
    }

    #[test]
    fn rejects_unknown_domain() {
        let f = write_tmp(
            r#"{"id":"x","text":"nice","domain":"restaurant","label":"suggestion"}"#,
            ".jsonl",
        );
        let err = load_dataset(f.path(), Format::Jsonl).unwrap_err();
        assert!(matches!(err, Error::UnknownDomain(ref d) if d == "restaurant"), "{err}");
    }

    #[test]
    fn rejects_unknown_label_empty_text_and_duplicates() {
        let f = write_tmp(r#"{"id":"x","text":"nice","domain":"hotel","label":"maybe"}"#, ".jsonl");
        assert!(matches!(
            load_dataset(f.path(), Format::Jsonl),
            Err(Error::UnknownLabel(_))
        ));
        let f = write_tmp(r#"{"id":"x","text":"   ","domain":"hotel","label":"0"}"#, ".jsonl");
        assert!(matches!(
            load_dataset(f.path(), Format::Jsonl),
            Err(Error::Malformed { .. })
        ));
        let f = write_tmp(
            "{\"id\":\"x\",\"text\":\"a\",\"domain\":\"hotel\",\"label\":\"0\"}\n{\"id\":\"x\",\"text\":\"b\",\"domain\":\"hotel\",\"label\":\"1\"}\n",
            ".jsonl",
        );
        assert!(matches!(
            load_dataset(f.path(), Format::Jsonl),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/reviews.jsonl"), Format::Jsonl).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn csv_with_quotes_and_optional_columns() {
        let f = write_tmp(
            "id,text,domain,label\nt1,\"Nice, but \"\"slow\"\" app\",software,non_suggestion\nt2,Add dark mode,software,1\n",
            ".csv",
        );
        let d = load_dataset(f.path(), Format::Csv).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.reviews()[0].text, "Nice, but \"slow\" app");
        assert_eq!(d.reviews()[1].label, Label::Suggestion);
    }

    #[test]
    fn augmented_test_review_is_rejected() {
        let mut r = mk("a", Domain::Hotel, Label::Suggestion, Split::Test);
        r.provenance = Provenance::SwapAug;
        assert!(Dataset::new(vec![r]).is_err());
    }

    #[test]
    fn jsonl_and_csv_round_trip() {
        let mut aug = mk("b#swap", Domain::Travel, Label::Suggestion, Split::Train);
        aug.provenance = Provenance::SwapAug;
        let d = Dataset::new(vec![
            mk("a", Domain::Hotel, Label::Suggestion, Split::Train),
            aug,
            Review::new("c", "quote \" comma , tab\t", Domain::Software, Label::NonSuggestion, Split::Test),
        ])
        .unwrap();
        for format in [Format::Jsonl, Format::Csv] {
            let f = tempfile::NamedTempFile::new().unwrap();
            d.save(f.path(), format).unwrap();
            let back = load_dataset(f.path(), format).unwrap();
            assert_eq!(back, d, "{format:?}");
        }
    }

    #[test]
    fn balance_ratio_cases() {
        let mut reviews = Vec::new();
        for i in 0..5 {
            reviews.push(mk(&format!("s{i}"), Domain::Hotel, Label::Suggestion, Split::Train));
            reviews.push(mk(&format!("n{i}"), Domain::Hotel, Label::NonSuggestion, Split::Train));
        }
        let stats = balance_stats(&Dataset::new(reviews).unwrap()).unwrap();
        let c = stats.get(Domain::Hotel, Split::Train).unwrap();
        assert_eq!((c.suggestion_count, c.non_suggestion_count), (5, 5));
        assert_eq!(c.ratio, 1.0);

        assert!(balance_stats(&Dataset::default()).unwrap().cells.is_empty());

        let only_pos = Dataset::new(vec![mk("s", Domain::Hotel, Label::Suggestion, Split::Train)]).unwrap();
        assert!(balance_stats(&only_pos).is_err());
    }

    fn table_iii_cell(domain: Domain, split: Split, s: usize, n: usize) -> Vec<Review> {
        let mut out = Vec::with_capacity(s + n);
        for i in 0..s {
            out.push(mk(&format!("{domain}-{split:?}-s{i}"), domain, Label::Suggestion, split));
        }
        for i in 0..n {
            out.push(mk(&format!("{domain}-{split:?}-n{i}"), domain, Label::NonSuggestion, split));
        }
        out
    }

    #[test]
    fn reproduces_dataset_table_ratios() {
        let mut reviews = table_iii_cell(Domain::Travel, Split::Train, 1314, 3869);
        reviews.extend(table_iii_cell(Domain::Software, Split::Test, 296, 742));
        reviews.extend(table_iii_cell(Domain::Hotel, Split::Train, 448, 7086));
        let stats = balance_stats(&Dataset::new(reviews).unwrap()).unwrap();
        let travel = stats.get(Domain::Travel, Split::Train).unwrap();
        assert_eq!((travel.suggestion_count, travel.non_suggestion_count), (1314, 3869));
        assert_eq!((travel.ratio * 100.0).round() / 100.0, 0.34);
        let sw = stats.get(Domain::Software, Split::Test).unwrap();
        // 296/742 = 0.3989; the published two-decimal figure is 0.39
        assert!((sw.ratio - 296.0 / 742.0).abs() < 1e-15);
        assert!((sw.ratio - 0.39).abs() < 0.01);
        let hotel = stats.get(Domain::Hotel, Split::Train).unwrap();
        assert_eq!(hotel.total(), 7534);
    }

    #[test]
    fn subsample_identity_rounding_and_determinism() {
        let mut reviews = table_iii_cell(Domain::Hotel, Split::Train, 448, 60);
        reviews.extend(table_iii_cell(Domain::Travel, Split::Train, 1, 3));
        let d = Dataset::new(reviews).unwrap();

        assert_eq!(stratified_subsample(&d, 1.0, 3).unwrap(), d);

        let tenth = stratified_subsample(&d, 0.1, 3).unwrap();
        let stats = balance_stats(&tenth).unwrap();
        let hotel = stats.get(Domain::Hotel, Split::Train).unwrap();
        assert_eq!(hotel.suggestion_count, 45);
        assert_eq!(hotel.non_suggestion_count, 6);
        // singleton cell survives
        assert_eq!(stats.get(Domain::Travel, Split::Train).unwrap().suggestion_count, 1);

        let a = stratified_subsample(&d, 0.5, 7).unwrap().to_jsonl();
        let b = stratified_subsample(&d, 0.5, 7).unwrap().to_jsonl();
        assert_eq!(a, b);

        assert!(stratified_subsample(&d, 0.0, 1).is_err());
        assert!(stratified_subsample(&d, 1.5, 1).is_err());
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(subsample_count(448, 0.1), 45);
        assert_eq!(subsample_count(5, 0.5), 3);
        assert_eq!(subsample_count(3, 0.01), 1);
        assert_eq!(subsample_count(0, 0.5), 0);
    }
}
