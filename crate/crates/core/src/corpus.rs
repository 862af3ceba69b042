//! Two-stage art filtering of an image-caption corpus: whole-token caption
//! keyword exclusion, then per-concept image-text score thresholds.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Caption-level exclusion terms.
pub const CAPTION_EXCLUSION_TERMS: &[&str] = &[
    "painting", "paintings", "art", "artwork", "drawings", "sketch", "sketches",
    "illustration", "illustrations", "sculpture", "sculptures", "stamp", "stamps",
    "advertisement", "advertisements", "logo", "logos", "installation", "printmaking",
    "digital art", "conceptual art", "mosaic", "tapestry", "abstract", "realism",
    "surrealism", "impressionism", "expressionism", "cubism", "minimalism", "baroque",
    "rococo", "pop art", "art nouveau", "art deco", "futurism", "dadaism",
];

/// Image-level concepts scored against every image.
pub const IMAGE_CONCEPTS: &[&str] = &[
    "painting", "art", "artwork", "drawing", "sketch", "illustration", "sculpture",
    "stamp", "advertisement", "logo", "installation art", "printmaking art", "digital art",
    "conceptual art", "mosaic art", "tapestry", "abstract art", "realism art",
    "surrealism art", "impressionism art", "expressionism art", "cubism art",
    "minimalism art", "baroque art", "rococo art", "pop art", "art nouveau", "art deco",
    "futurism art", "dadaism art",
];

/// Threshold the reference scorer used for "painting", in its native logit units.
pub const REFERENCE_PAINTING_THRESHOLD: f64 = 17.0;

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub caption: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum KeywordVerdict {
    Accept,
    Reject { term: String },
}

impl KeywordVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, KeywordVerdict::Accept)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum EmbeddingVerdict {
    Accept,
    Reject { concept: String, score: f64 },
    Quarantine { reason: String },
}

impl EmbeddingVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, EmbeddingVerdict::Accept)
    }
}

/// A manifest record with both filter verdicts attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub image_path: String,
    pub caption: String,
    pub split: String,
    pub keyword_verdict: KeywordVerdict,
    /// `None` when the caption stage already rejected the record.
    pub embedding_verdict: Option<EmbeddingVerdict>,
}

impl CorpusRecord {
    pub fn retained(&self) -> bool {
        self.keyword_verdict.is_accept()
            && self.embedding_verdict.as_ref().is_some_and(|v| v.is_accept())
    }

    pub fn manifest_record(&self) -> ManifestRecord {
        ManifestRecord {
            id: self.id.clone(),
            image_path: self.image_path.clone(),
            caption: self.caption.clone(),
            split: self.split.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub caption_exclusion_terms: Vec<String>,
    pub image_concepts: Vec<String>,
    pub per_concept_threshold: BTreeMap<String, f64>,
}

impl FilterConfig {
    /// Full term and concept lists with every threshold set to `threshold`.
    pub fn with_uniform_threshold(threshold: f64) -> Self {
        Self {
            caption_exclusion_terms: CAPTION_EXCLUSION_TERMS.iter().map(|s| s.to_string()).collect(),
            image_concepts: IMAGE_CONCEPTS.iter().map(|s| s.to_string()).collect(),
            per_concept_threshold: IMAGE_CONCEPTS
                .iter()
                .map(|c| (c.to_string(), threshold))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.caption_exclusion_terms.is_empty() {
            return Err(Error::Config("caption_exclusion_terms is empty".into()));
        }
        if self.image_concepts.is_empty() {
            return Err(Error::Config("image_concepts is empty".into()));
        }
        for t in &self.caption_exclusion_terms {
            if t.trim().is_empty() || *t != t.to_lowercase() {
                return Err(Error::Config(format!("exclusion term `{t}` must be non-empty lowercase")));
            }
        }
        for c in &self.image_concepts {
            match self.per_concept_threshold.get(c) {
                Some(v) if v.is_finite() => {}
                Some(v) => return Err(Error::Config(format!("threshold for `{c}` is {v}"))),
                None => return Err(Error::Config(format!("no threshold for concept `{c}`"))),
            }
        }
        Ok(())
    }

    pub fn threshold(&self, concept: &str) -> f64 {
        self.per_concept_threshold
            .get(concept)
            .copied()
            .unwrap_or(f64::INFINITY)
    }
}

/// Counts for one pipeline run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub rejected_by_caption: usize,
    /// Includes quarantined records (unreadable images never reach the output).
    pub rejected_by_embedding: usize,
    pub quarantined: usize,
    pub retained: usize,
    pub per_concept_rejections: BTreeMap<String, usize>,
}

impl FilterStats {
    pub fn is_consistent(&self) -> bool {
        self.total == self.rejected_by_caption + self.rejected_by_embedding + self.retained
            && self.quarantined <= self.rejected_by_embedding
    }

    pub fn render_table(&self) -> String {
        let pct = |n: usize| {
            if self.total == 0 {
                0.0
            } else {
                100.0 * n as f64 / self.total as f64
            }
        };
        let mut s = String::new();
        s.push_str(&format!("{:<24}{:>10}{:>10}\n", "stage", "records", "percent"));
        s.push_str(&format!("{:<24}{:>10}{:>9.2}%\n", "total", self.total, 100.0));
        s.push_str(&format!(
            "{:<24}{:>10}{:>9.2}%\n",
            "rejected by caption",
            self.rejected_by_caption,
            pct(self.rejected_by_caption)
        ));
        s.push_str(&format!(
            "{:<24}{:>10}{:>9.2}%\n",
            "rejected by image",
            self.rejected_by_embedding,
            pct(self.rejected_by_embedding)
        ));
        s.push_str(&format!(
            "{:<24}{:>10}{:>9.2}%\n",
            "  (quarantined)",
            self.quarantined,
            pct(self.quarantined)
        ));
        s.push_str(&format!(
            "{:<24}{:>10}{:>9.2}%\n",
            "retained",
            self.retained,
            pct(self.retained)
        ));
        for (c, n) in &self.per_concept_rejections {
            s.push_str(&format!("  concept {:<16}{:>10}\n", c, n));
        }
        s
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize_caption(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Whole-token (or whole-phrase) match of `term` in an already tokenized caption.
pub fn phrase_matches(tokens: &[String], term: &str) -> bool {
    let parts: Vec<&str> = term.split_whitespace().collect();
    if parts.is_empty() || parts.len() > tokens.len() {
        return false;
    }
    tokens
        .windows(parts.len())
        .any(|w| w.iter().zip(&parts).all(|(a, b)| a == b))
}

/// Rejects a caption containing any exclusion term as a whole token or phrase.
/// The first matching term in list order is reported.
pub fn keyword_filter<S: AsRef<str>>(caption: &str, terms: &[S]) -> KeywordVerdict {
    let tokens = tokenize_caption(caption);
    for term in terms {
        if phrase_matches(&tokens, term.as_ref()) {
            return KeywordVerdict::Reject {
                term: term.as_ref().to_string(),
            };
        }
    }
    KeywordVerdict::Accept
}

/// Scores images against text concepts, in the scorer's native units.
pub trait ImageTextScorer: Sync {
    fn score_concepts(&self, image: &Image, concepts: &[String]) -> Result<Vec<f64>>;

    /// Identifies the scorer weights; recorded in run reports.
    fn fingerprint(&self) -> String;
}

/// Rejects when any concept's score reaches its threshold; reports the concept
/// with the largest score among the offending ones.
pub fn embedding_filter(
    image: &Image,
    config: &FilterConfig,
    scorer: &dyn ImageTextScorer,
) -> Result<EmbeddingVerdict> {
    let scores = scorer.score_concepts(image, &config.image_concepts)?;
    let mut worst: Option<(String, f64)> = None;
    for (concept, &score) in config.image_concepts.iter().zip(&scores) {
        if score >= config.threshold(concept) && worst.as_ref().is_none_or(|(_, s)| score > *s) {
            worst = Some((concept.clone(), score));
        }
    }
    Ok(match worst {
        Some((concept, score)) => EmbeddingVerdict::Reject { concept, score },
        None => EmbeddingVerdict::Accept,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::Config(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_manifest(path: &Path, rows: &[ManifestRecord]) -> Result<()> {
    write_jsonl(path, rows)
}

/// Resolves a manifest's `image_path` against the manifest's directory.
pub fn resolve_image_path(manifest: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}

/// Loads every image of a manifest in order.
pub fn load_manifest_images(manifest: &Path) -> Result<Vec<(ManifestRecord, Image)>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let img = Image::load(&resolve_image_path(manifest, &r.image_path))?;
            Ok((r, img))
        })
        .collect()
}

fn rebase_image_path(manifest_in: &Path, manifest_out: &Path, image_path: &str) -> String {
    let same_dir = manifest_in.parent().map(|p| p.canonicalize().ok())
        == manifest_out.parent().map(|p| p.canonicalize().ok());
    if Path::new(image_path).is_absolute() || same_dir {
        return image_path.to_string();
    }
    let resolved = resolve_image_path(manifest_in, image_path);
    resolved
        .canonicalize()
        .unwrap_or(resolved)
        .to_string_lossy()
        .into_owned()
}

/// Result of [`run_filter_pipeline`].
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub records: Vec<CorpusRecord>,
    pub stats: FilterStats,
    pub manifest_out: PathBuf,
}

fn classify(
    manifest_in: &Path,
    rec: &ManifestRecord,
    config: &FilterConfig,
    scorer: &dyn ImageTextScorer,
) -> Result<CorpusRecord> {
    let keyword_verdict = keyword_filter(&rec.caption, &config.caption_exclusion_terms);
    let embedding_verdict = if keyword_verdict.is_accept() {
        let path = resolve_image_path(manifest_in, &rec.image_path);
        Some(match Image::load(&path) {
            Ok(img) => embedding_filter(&img, config, scorer)?,
            Err(e) => EmbeddingVerdict::Quarantine {
                reason: e.to_string(),
            },
        })
    } else {
        None
    };
    Ok(CorpusRecord {
        id: rec.id.clone(),
        image_path: rec.image_path.clone(),
        caption: rec.caption.clone(),
        split: rec.split.clone(),
        keyword_verdict,
        embedding_verdict,
    })
}

pub fn compute_stats(records: &[CorpusRecord]) -> FilterStats {
    let mut stats = FilterStats {
        total: records.len(),
        ..Default::default()
    };
    for r in records {
        match (&r.keyword_verdict, &r.embedding_verdict) {
            (KeywordVerdict::Reject { .. }, _) => stats.rejected_by_caption += 1,
            (KeywordVerdict::Accept, Some(EmbeddingVerdict::Accept)) => stats.retained += 1,
            (KeywordVerdict::Accept, Some(EmbeddingVerdict::Reject { concept, .. })) => {
                stats.rejected_by_embedding += 1;
                *stats.per_concept_rejections.entry(concept.clone()).or_default() += 1;
            }
            (KeywordVerdict::Accept, Some(EmbeddingVerdict::Quarantine { .. }) | None) => {
                stats.rejected_by_embedding += 1;
                stats.quarantined += 1;
            }
        }
    }
    stats
}

/// Runs both stages over `manifest_in` and writes the doubly accepted records
/// (input order) to `manifest_out`. Side files next to the output:
/// `<stem>.verdicts.jsonl` with every record's verdicts and
/// `<stem>.quarantine.jsonl` with unreadable images.
///
/// `shards` splits the work across threads; results do not depend on it.
pub fn run_filter_pipeline(
    manifest_in: &Path,
    manifest_out: &Path,
    config: &FilterConfig,
    scorer: &dyn ImageTextScorer,
    shards: usize,
) -> Result<FilterOutcome> {
    config.validate()?;
    if !manifest_in.exists() {
        return Err(Error::Config(format!(
            "manifest {} does not exist",
            manifest_in.display()
        )));
    }
    let input = read_manifest(manifest_in)?;
    let shards = shards.max(1);
    let chunk = input.len().div_ceil(shards).max(1);
    let mut records: Vec<CorpusRecord> = Vec::with_capacity(input.len());
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = input
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|r| classify(manifest_in, r, config, scorer))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        for h in handles {
            let part = h
                .join()
                .map_err(|_| Error::Invariant("filter shard panicked".into()))??;
            records.extend(part);
        }
        Ok(())
    })?;

    let stats = compute_stats(&records);
    debug_assert!(stats.is_consistent());
    let retained: Vec<ManifestRecord> = records
        .iter()
        .filter(|r| r.retained())
        .map(|r| {
            let mut m = r.manifest_record();
            m.image_path = rebase_image_path(manifest_in, manifest_out, &m.image_path);
            m
        })
        .collect();
    write_manifest(manifest_out, &retained)?;
    let stem = manifest_out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    let dir = manifest_out.parent().unwrap_or_else(|| Path::new("."));
    write_jsonl(&dir.join(format!("{stem}.verdicts.jsonl")), &records)?;
    let quarantine: Vec<&CorpusRecord> = records
        .iter()
        .filter(|r| matches!(r.embedding_verdict, Some(EmbeddingVerdict::Quarantine { .. })))
        .collect();
    write_jsonl(&dir.join(format!("{stem}.quarantine.jsonl")), &quarantine)?;
    Ok(FilterOutcome {
        records,
        stats,
        manifest_out: manifest_out.to_path_buf(),
    })
}

/// Per-concept thresholds from a labeled development set. `scores[i][j]` is
/// image `i` scored against `base.image_concepts[j]`.
///
/// Each concept's threshold sits at a shared quantile of that concept's
/// scores on the natural images; the quantile is chosen to maximize TPR − FPR
/// of the any-concept rule while keeping art recall ≥ `min_recall`.
pub fn calibrate_config(
    base: &FilterConfig,
    scores: &[Vec<f64>],
    is_art: &[bool],
    min_recall: f64,
) -> FilterConfig {
    assert_eq!(scores.len(), is_art.len());
    let k = base.image_concepts.len();
    let mut natural: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            scores
                .iter()
                .zip(is_art)
                .filter(|(_, a)| !**a)
                .map(|(row, _)| row[j])
                .collect()
        })
        .collect();
    for col in &mut natural {
        col.sort_by(|a, b| a.total_cmp(b));
    }
    let n_nat = natural.first().map_or(0, Vec::len);
    let n_art = is_art.iter().filter(|a| **a).count();
    let thresholds_at = |q: usize| -> Vec<f64> {
        natural
            .iter()
            .map(|col| match col.get(q) {
                Some(v) => *v + 1e-9,
                None => col.last().map_or(0.0, |v| v + 1.0),
            })
            .collect()
    };
    let mut best: Option<(f64, usize)> = None;
    for q in 0..=n_nat {
        let th = thresholds_at(q);
        let flagged = |row: &Vec<f64>| row.iter().zip(&th).any(|(s, t)| s >= t);
        let tp = scores.iter().zip(is_art).filter(|(r, a)| **a && flagged(r)).count();
        let fp = scores.iter().zip(is_art).filter(|(r, a)| !**a && flagged(r)).count();
        let tpr = if n_art == 0 { 1.0 } else { tp as f64 / n_art as f64 };
        let fpr = if n_nat == 0 { 0.0 } else { fp as f64 / n_nat as f64 };
        if tpr + 1e-12 < min_recall {
            continue;
        }
        let j = tpr - fpr;
        if best.is_none_or(|(bj, _)| j > bj + 1e-12) {
            best = Some((j, q));
        }
    }
    let q = best.map(|(_, q)| q).unwrap_or(0);
    let mut out = base.clone();
    for (concept, t) in base.image_concepts.iter().zip(thresholds_at(q)) {
        out.per_concept_threshold.insert(concept.clone(), t);
    }
    out
}

/// Picks a per-concept threshold from labeled development scores: the
/// threshold maximizing TPR − FPR among those that keep art recall at or above
/// `min_recall`. Falls back to just above the largest score when no art is
/// present.
pub fn calibrate_threshold(scores: &[f64], is_art: &[bool], min_recall: f64) -> f64 {
    assert_eq!(scores.len(), is_art.len());
    let n_art = is_art.iter().filter(|a| **a).count();
    let n_nat = is_art.len() - n_art;
    let max_score = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if n_art == 0 || !max_score.is_finite() {
        return if max_score.is_finite() { max_score + 1.0 } else { 0.0 };
    }
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup();
    let mut best: Option<(f64, f64)> = None;
    for &t in &candidates {
        let tp = scores.iter().zip(is_art).filter(|(s, a)| **a && **s >= t).count();
        let fp = scores.iter().zip(is_art).filter(|(s, a)| !**a && **s >= t).count();
        let tpr = tp as f64 / n_art as f64;
        let fpr = if n_nat == 0 { 0.0 } else { fp as f64 / n_nat as f64 };
        if tpr + 1e-12 < min_recall {
            continue;
        }
        let j = tpr - fpr;
        if best.is_none_or(|(bj, _)| j > bj + 1e-12) {
            best = Some((j, t));
        }
    }
    best.map(|(_, t)| t).unwrap_or(candidates[0])
}
