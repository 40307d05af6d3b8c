//! Domain data model: pages, candidates, the four-level functional taxonomy,
//! the annotation decision tree, and the on-disk JSONL formats.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::DomainError;

/// Four-tier ordinal label: Optimal(3) > Suboptimal(2) > SemanticDistractor(1)
/// > UnrelatedError(0). Serialized as the integer ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FunctionalLevel {
    UnrelatedError = 0,
    SemanticDistractor = 1,
    Suboptimal = 2,
    Optimal = 3,
}

impl FunctionalLevel {
    /// All levels in descending order of quality.
    pub const ALL_DESC: [FunctionalLevel; 4] = [
        FunctionalLevel::Optimal,
        FunctionalLevel::Suboptimal,
        FunctionalLevel::SemanticDistractor,
        FunctionalLevel::UnrelatedError,
    ];

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(ord: u8) -> Option<FunctionalLevel> {
        match ord {
            0 => Some(FunctionalLevel::UnrelatedError),
            1 => Some(FunctionalLevel::SemanticDistractor),
            2 => Some(FunctionalLevel::Suboptimal),
            3 => Some(FunctionalLevel::Optimal),
            _ => None,
        }
    }

    /// Exponential relevance gain 2^l - 1, yielding {7, 3, 1, 0}.
    pub fn gain(self) -> f64 {
        (1u64 << self.ordinal()) as f64 - 1.0
    }

    pub fn name(self) -> &'static str {
        match self {
            FunctionalLevel::Optimal => "optimal",
            FunctionalLevel::Suboptimal => "suboptimal",
            FunctionalLevel::SemanticDistractor => "distractor",
            FunctionalLevel::UnrelatedError => "unrelated",
        }
    }
}

impl fmt::Display for FunctionalLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for FunctionalLevel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.ordinal())
    }
}

impl<'de> Deserialize<'de> for FunctionalLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let ord = u8::deserialize(d)?;
        FunctionalLevel::from_ordinal(ord)
            .ok_or_else(|| serde::de::Error::custom(format!("level ordinal out of range: {ord}")))
    }
}

/// Annotation decision tree. `efficient` is consulted only when the action
/// advances the task; `related` only when it does not.
pub fn classify_level(advances_task: bool, efficient: bool, related: bool) -> FunctionalLevel {
    match (advances_task, efficient, related) {
        (true, true, _) => FunctionalLevel::Optimal,
        (true, false, _) => FunctionalLevel::Suboptimal,
        (false, _, true) => FunctionalLevel::SemanticDistractor,
        (false, _, false) => FunctionalLevel::UnrelatedError,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub action_id: String,
    pub features: Vec<f64>,
    pub level: FunctionalLevel,
    pub is_ground_truth: bool,
    /// Binary supervision label; may be corrupted by noise injection.
    pub train_label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub page_id: String,
    /// Instruction fused with the page observation into one feature vector.
    pub instruction_features: Vec<f64>,
    pub candidates: Vec<Candidate>,
}

impl Page {
    pub fn feature_dim(&self) -> usize {
        self.instruction_features.len()
    }

    /// Checks the structural invariants common to all pages.
    pub fn validate(&self) -> Result<(), DomainError> {
        let fail = |rule: &str| {
            Err(DomainError::Invariant {
                page_id: self.page_id.clone(),
                rule: rule.to_string(),
            })
        };
        if self.candidates.is_empty() {
            return fail("page must have at least one candidate");
        }
        if !self.instruction_features.iter().all(|v| v.is_finite()) {
            return fail("instruction_features must be finite");
        }
        let dim = self.feature_dim();
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.candidates {
            if !seen.insert(c.action_id.as_str()) {
                return fail(&format!("duplicate action_id {:?}", c.action_id));
            }
            if c.features.len() != dim {
                return fail(&format!(
                    "candidate {:?} has {} features, expected {}",
                    c.action_id,
                    c.features.len(),
                    dim
                ));
            }
            if !c.features.iter().all(|v| v.is_finite()) {
                return fail(&format!("candidate {:?} has non-finite features", c.action_id));
            }
        }
        Ok(())
    }

    /// Training pages additionally need at least one positive anchor.
    pub fn validate_for_training(&self) -> Result<(), DomainError> {
        self.validate()?;
        if !self.candidates.iter().any(|c| c.train_label) {
            return Err(DomainError::Invariant {
                page_id: self.page_id.clone(),
                rule: "training page must have at least one train_label=true candidate".into(),
            });
        }
        Ok(())
    }

    pub fn candidates_at(&self, level: FunctionalLevel) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(move |c| c.level == level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub pages: Vec<Page>,
    /// Generation config echo (seed, world parameters) for provenance.
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Dataset {
    pub fn new(pages: Vec<Page>, meta: serde_json::Value) -> Dataset {
        Dataset { pages, meta }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.pages {
            if !seen.insert(p.page_id.as_str()) {
                return Err(DomainError::Invariant {
                    page_id: p.page_id.clone(),
                    rule: "duplicate page_id".into(),
                });
            }
            p.validate()?;
        }
        Ok(())
    }

    pub fn candidate_count(&self) -> usize {
        self.pages.iter().map(|p| p.candidates.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub page_id: String,
    pub action_id: String,
    pub score: f64,
}

/// Per-page score lookup keyed by page_id then action_id.
pub type ScoreMap = BTreeMap<String, BTreeMap<String, f64>>;

// The meta header line is the one record without a page_id.
#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: serde_json::Value,
}

/// Loads a line-delimited page file. The first line may be a `{"meta": ...}`
/// header echoing the generation config.
pub fn load_dataset(path: &Path) -> Result<Dataset, DomainError> {
    let file = File::open(path).map_err(|e| DomainError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pages = Vec::new();
    let mut meta = serde_json::Value::Null;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DomainError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            if let Ok(m) = serde_json::from_str::<MetaLine>(&line) {
                meta = m.meta;
                continue;
            }
        }
        let page: Page = serde_json::from_str(&line).map_err(|e| DomainError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        pages.push(page);
    }
    let dataset = Dataset { pages, meta };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes one page per line; load_dataset(save_dataset(d)) == d.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DomainError> {
    dataset.validate()?;
    let file = File::create(path).map_err(|e| DomainError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| DomainError::io(path, e);
    if !dataset.meta.is_null() {
        let header = serde_json::to_string(&MetaLine {
            meta: dataset.meta.clone(),
        })
        .expect("meta serialization");
        writeln!(w, "{header}").map_err(io_err)?;
    }
    for page in &dataset.pages {
        let line = serde_json::to_string(page).expect("page serialization");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>, DomainError> {
    let file = File::open(path).map_err(|e| DomainError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DomainError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line).map_err(|e| DomainError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !rec.score.is_finite() {
            return Err(DomainError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: format!("non-finite score for ({}, {})", rec.page_id, rec.action_id),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn save_scores(records: &[ScoreRecord], path: &Path) -> Result<(), DomainError> {
    let file = File::create(path).map_err(|e| DomainError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("score serialization");
        writeln!(w, "{line}").map_err(|e| DomainError::io(path, e))?;
    }
    w.flush().map_err(|e| DomainError::io(path, e))
}

/// Cross-validates score records against a dataset and builds the lookup map.
/// Every record must resolve to an existing candidate.
pub fn score_map(dataset: &Dataset, records: &[ScoreRecord]) -> Result<ScoreMap, DomainError> {
    let mut known: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
    for page in &dataset.pages {
        let entry = known.entry(page.page_id.as_str()).or_default();
        for c in &page.candidates {
            entry.insert(c.action_id.as_str());
        }
    }
    let mut map = ScoreMap::new();
    for rec in records {
        let ok = known
            .get(rec.page_id.as_str())
            .is_some_and(|ids| ids.contains(rec.action_id.as_str()));
        if !ok {
            return Err(DomainError::UnknownAction {
                page_id: rec.page_id.clone(),
                action_id: rec.action_id.clone(),
            });
        }
        map.entry(rec.page_id.clone())
            .or_default()
            .insert(rec.action_id.clone(), rec.score);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn level(ord: u8) -> FunctionalLevel {
        FunctionalLevel::from_ordinal(ord).unwrap()
    }

    pub(crate) fn toy_page(page_id: &str, n: usize) -> Page {
        let candidates = (0..n)
            .map(|i| Candidate {
                action_id: format!("a{i:02}"),
                features: vec![i as f64, 0.5 - i as f64 * 0.125],
                level: level((i % 4) as u8),
                is_ground_truth: i % 4 == 3,
                train_label: i % 4 == 3,
            })
            .collect();
        Page {
            page_id: page_id.to_string(),
            instruction_features: vec![0.25, -1.5],
            candidates,
        }
    }

    #[test]
    fn gain_values() {
        assert_eq!(FunctionalLevel::Optimal.gain(), 7.0);
        assert_eq!(FunctionalLevel::Suboptimal.gain(), 3.0);
        assert_eq!(FunctionalLevel::SemanticDistractor.gain(), 1.0);
        assert_eq!(FunctionalLevel::UnrelatedError.gain(), 0.0);
    }

    #[test]
    fn level_total_order() {
        assert!(FunctionalLevel::Optimal > FunctionalLevel::Suboptimal);
        assert!(FunctionalLevel::Suboptimal > FunctionalLevel::SemanticDistractor);
        assert!(FunctionalLevel::SemanticDistractor > FunctionalLevel::UnrelatedError);
    }

    #[test]
    fn classify_level_truth_table() {
        // Exhaustive over all 2^3 input combinations.
        for &eff in &[true, false] {
            for &rel in &[true, false] {
                assert_eq!(classify_level(true, true, rel), FunctionalLevel::Optimal);
                assert_eq!(classify_level(true, false, rel), FunctionalLevel::Suboptimal);
                assert_eq!(
                    classify_level(false, eff, true),
                    FunctionalLevel::SemanticDistractor
                );
                assert_eq!(
                    classify_level(false, eff, false),
                    FunctionalLevel::UnrelatedError
                );
            }
        }
    }

    #[test]
    fn dataset_round_trip_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("pages.jsonl");
        let ds = Dataset::new(
            vec![toy_page("p0", 5), toy_page("p1", 30)],
            serde_json::json!({"seed": 7, "note": "round-trip"}),
        );
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn save_writes_one_line_per_page() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("pages.jsonl");
        let ds = Dataset::new(vec![toy_page("p0", 30), toy_page("p1", 30)], serde_json::Value::Null);
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn empty_file_loads_zero_pages() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = load_dataset(&path).unwrap();
        assert!(ds.pages.is_empty());
    }

    #[test]
    fn duplicate_action_id_names_page() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut page = toy_page("dup-page", 3);
        page.candidates[1].action_id = page.candidates[0].action_id.clone();
        let ds = Dataset::new(vec![page], serde_json::Value::Null);
        // save validates too, so serialize by hand
        let line = serde_json::to_string(&ds.pages[0]).unwrap();
        std::fs::write(&path, line).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("dup-page"), "{err}");
    }

    #[test]
    fn parse_error_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&toy_page("p0", 2)).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let ds = Dataset::new(vec![toy_page("p0", 2)], serde_json::Value::Null);
        let err = save_dataset(&ds, Path::new("/nonexistent-dir/out.jsonl")).unwrap_err();
        assert!(matches!(err, DomainError::Io { .. }));
    }

    #[test]
    fn scores_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        let ds = Dataset::new(
            (0..3).map(|i| toy_page(&format!("p{i}"), 4)).collect(),
            serde_json::Value::Null,
        );
        let records: Vec<ScoreRecord> = ds
            .pages
            .iter()
            .flat_map(|p| {
                p.candidates.iter().map(|c| ScoreRecord {
                    page_id: p.page_id.clone(),
                    action_id: c.action_id.clone(),
                    score: 0.1 * c.features[0],
                })
            })
            .collect();
        assert_eq!(records.len(), 12);
        save_scores(&records, &path).unwrap();
        let loaded = load_scores(&path).unwrap();
        assert_eq!(records, loaded);
        assert!(score_map(&ds, &loaded).is_ok());

        let mut bogus = loaded;
        bogus[0].action_id = "zz".into();
        let err = score_map(&ds, &bogus).unwrap_err();
        assert!(matches!(err, DomainError::UnknownAction { .. }));
    }

    #[test]
    fn training_page_requires_positive() {
        let mut page = toy_page("p0", 4);
        assert!(page.validate_for_training().is_ok());
        for c in &mut page.candidates {
            c.train_label = false;
        }
        assert!(page.validate_for_training().is_err());
    }
}
