//! Desk-scale world: a synthetic corpus filtered to be art-free, a latent
//! codec and a base text-to-image model trained on what remains.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::StyleExemplarSet;
use crate::codec::{train_codec, CodecConfig, CodecReport, CodecTrainConfig, LatentCodec};
use crate::corpus::{
    calibrate_config, embedding_filter, keyword_filter, FilterConfig, ImageTextScorer, REFERENCE_PAINTING_THRESHOLD,
};
use crate::diffusion::{train_base, BaseModel, BaseModelConfig, TrainBaseConfig, TrainReport, TrainingExample};
use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::image::Image;
use crate::manifest::TOOL_VERSION;
use crate::scorer::{JointScorer, ScorerConfig};
use crate::synth::{generate_corpus, generate_exemplars, CorpusSpec, PaletteStyle, SynthRecord};
use crate::text::{TextEncoder, TextEncoderConfig, Vocab};
use crate::unet::DenoiserConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Raw training corpus before filtering (art included).
    pub corpus: CorpusSpec,
    /// Labeled development corpus used to calibrate filter thresholds.
    pub calibration: CorpusSpec,
    pub min_recall: f64,
    /// Natural images never seen in training.
    pub held_out: CorpusSpec,
    pub scorer: ScorerConfig,
    pub feature_seed: u64,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub base: BaseModelConfig,
    pub base_train: TrainBaseConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec {
                records: 1800,
                art_records: 200,
                seed: 42,
                id_prefix: "nat".into(),
                ..Default::default()
            },
            calibration: CorpusSpec {
                records: 300,
                art_records: 60,
                seed: 100,
                id_prefix: "dev".into(),
                ..Default::default()
            },
            min_recall: 0.95,
            held_out: CorpusSpec {
                records: 60,
                art_records: 0,
                seed: 7,
                id_prefix: "held".into(),
                ..Default::default()
            },
            scorer: ScorerConfig::default(),
            feature_seed: 3,
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig {
                steps: 1200,
                ..Default::default()
            },
            base: BaseModelConfig {
                denoiser: DenoiserConfig {
                    channels: 16,
                    mid_channels: 32,
                    ..Default::default()
                },
                ..Default::default()
            },
            base_train: TrainBaseConfig {
                steps: 3000,
                epoch_steps: Some(500),
                checkpoint_every: 0,
                ..Default::default()
            },
        }
    }
}

impl WorldConfig {
    /// A much smaller world for quick smoke runs.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.corpus.records = 120;
        c.corpus.art_records = 20;
        c.held_out.records = 20;
        c.scorer.steps = 100;
        c.scorer.pretraining_pairs = 300;
        c.codec_train.steps = 30;
        c.base_train.steps = 30;
        c.base_train.epoch_steps = None;
        c
    }

    pub fn fingerprint(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        Ok(crate::checkpoint::fingerprint_parts([json.as_str(), TOOL_VERSION]))
    }
}

/// Per-record outcome of the in-memory filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTally {
    pub total: usize,
    pub art_total: usize,
    pub retained: usize,
    pub art_retained: usize,
    pub natural_lost: usize,
}

impl FilterTally {
    pub fn contamination(&self) -> f64 {
        if self.retained == 0 {
            0.0
        } else {
            self.art_retained as f64 / self.retained as f64
        }
    }

    pub fn raw_art_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.art_total as f64 / self.total as f64
        }
    }
}

/// Keyword stage then embedding stage; returns which records survive.
pub fn filter_records(records: &[SynthRecord], config: &FilterConfig, scorer: &dyn ImageTextScorer) -> Result<(Vec<bool>, FilterTally)> {
    let mut keep = Vec::with_capacity(records.len());
    for r in records {
        let ok = keyword_filter(&r.caption, &config.caption_exclusion_terms).is_accept()
            && embedding_filter(&r.image, config, scorer)?.is_accept();
        keep.push(ok);
    }
    let tally = FilterTally {
        total: records.len(),
        art_total: records.iter().filter(|r| r.label.is_art).count(),
        retained: keep.iter().filter(|k| **k).count(),
        art_retained: records.iter().zip(&keep).filter(|(r, k)| **k && r.label.is_art).count(),
        natural_lost: records.iter().zip(&keep).filter(|(r, k)| !**k && !r.label.is_art).count(),
    };
    Ok((keep, tally))
}

/// Thresholds calibrated on a labeled development corpus.
pub fn calibrated_filter(scorer: &JointScorer, dev: &[SynthRecord], min_recall: f64) -> Result<FilterConfig> {
    let base = FilterConfig::with_uniform_threshold(REFERENCE_PAINTING_THRESHOLD);
    let imgs: Vec<Image> = dev.iter().map(|r| r.image.clone()).collect();
    let scores = scorer.score_matrix(&imgs, &base.image_concepts)?;
    let is_art: Vec<bool> = dev.iter().map(|r| r.label.is_art).collect();
    Ok(calibrate_config(&base, &scores, &is_art, min_recall))
}

pub struct ToyWorld {
    pub config: WorldConfig,
    pub scorer: JointScorer,
    pub filter: FilterConfig,
    pub tally: FilterTally,
    /// Records that passed both filter stages.
    pub training: Vec<SynthRecord>,
    pub held_out: Vec<SynthRecord>,
    pub codec_report: Option<CodecReport>,
    pub train_report: Option<TrainReport>,
    pub model: BaseModel,
    pub features: FeatureStack,
}

impl ToyWorld {
    pub fn codec(&self) -> &LatentCodec {
        &self.model.codec
    }

    pub fn training_images(&self) -> Vec<Image> {
        self.training.iter().map(|r| r.image.clone()).collect()
    }

    pub fn held_out_images(&self) -> Vec<Image> {
        self.held_out.iter().map(|r| r.image.clone()).collect()
    }
}

/// Palette-restyled natural scenes with content captions.
pub fn toy_exemplars(style: &PaletteStyle, n: usize, size: usize, seed: u64) -> Result<StyleExemplarSet> {
    StyleExemplarSet::new(&style.name, generate_exemplars(style, n, size, seed))
}

fn examples(model: &LatentCodec, records: &[SynthRecord]) -> Result<Vec<TrainingExample>> {
    let imgs: Vec<&Image> = records.iter().map(|r| &r.image).collect();
    let lat = model.encode_images(&imgs)?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(TrainingExample {
                id: r.id.clone(),
                latent: lat.get(i)?,
                caption: r.caption.clone(),
            })
        })
        .collect()
}

fn cache_paths(dir: &Path, fp: &str) -> (PathBuf, PathBuf, PathBuf) {
    let d = dir.join(format!("world-{}", &fp[..16]));
    (d.join("base.safetensors"), d.join("scorer.safetensors"), d.join("features.safetensors"))
}

/// Builds the world. With `cache` set, trained weights are stored there under
/// the config fingerprint and reused by later calls with the same config.
pub fn build_world(config: &WorldConfig, cache: Option<&Path>) -> Result<ToyWorld> {
    let fp = config.fingerprint()?;
    let cached = cache.map(|d| cache_paths(d, &fp));
    let scorer = match &cached {
        Some((_, s, _)) if s.exists() => JointScorer::load(s)?,
        _ => JointScorer::pretrain(config.scorer.clone())?,
    };
    let dev = generate_corpus(&config.calibration);
    let filter = calibrated_filter(&scorer, &dev, config.min_recall)?;
    let raw = generate_corpus(&config.corpus);
    let (keep, tally) = filter_records(&raw, &filter, &scorer)?;
    log::info!(
        "world filter kept {} of {} ({} art left)",
        tally.retained,
        tally.total,
        tally.art_retained
    );
    let training: Vec<SynthRecord> = raw.into_iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r).collect();
    if training.len() < 8 {
        return Err(Error::Config("filtered corpus too small to train on".into()));
    }
    let held_out = generate_corpus(&config.held_out);
    let train_imgs: Vec<Image> = training.iter().map(|r| r.image.clone()).collect();
    let held_imgs: Vec<Image> = held_out.iter().map(|r| r.image.clone()).collect();

    if let Some((b, _, f)) = &cached {
        if b.exists() && f.exists() {
            return Ok(ToyWorld {
                config: config.clone(),
                scorer,
                filter,
                tally,
                training,
                held_out,
                codec_report: None,
                train_report: None,
                model: BaseModel::load(b)?,
                features: FeatureStack::load(f)?,
            });
        }
    }

    let mut features = FeatureStack::new(config.feature_seed)?;
    features.fit(&train_imgs)?;
    let corpus_fp = crate::checkpoint::fingerprint_parts(training.iter().map(|r| r.id.as_str()));
    let (codec, codec_report) = train_codec(
        config.codec.clone(),
        &train_imgs,
        &held_imgs,
        &config.codec_train,
        &corpus_fp,
        None,
    )?;
    let text = TextEncoder::new(TextEncoderConfig::default(), Vocab::standard())?;
    let model = BaseModel::init(config.base.clone(), codec, text)?;
    let train_ex = examples(&model.codec, &training)?;
    let val_n = held_out.len().min(20);
    let val_ex = examples(&model.codec, &held_out[..val_n])?;
    let (mut model, train_report) = train_base(model, &train_ex, &val_ex, &config.base_train, None)?;
    model.corpus_fingerprint = corpus_fp;
    if let Some((b, s, f)) = &cached {
        model.save(b)?;
        scorer.save(s)?;
        features.save(f)?;
    }
    Ok(ToyWorld {
        config: config.clone(),
        scorer,
        filter,
        tally,
        training,
        held_out,
        codec_report: Some(codec_report),
        train_report: Some(train_report),
        model,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_world_builds_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = WorldConfig::tiny();
        let w = build_world(&cfg, Some(dir.path())).unwrap();
        assert!(w.train_report.is_some());
        assert_eq!(w.tally.retained, w.training.len());
        assert!(w.training.iter().all(|r| keyword_filter(&r.caption, &w.filter.caption_exclusion_terms).is_accept()));
        let again = build_world(&cfg, Some(dir.path())).unwrap();
        assert!(again.train_report.is_none());
        assert_eq!(again.model.weights_fingerprint().unwrap(), w.model.weights_fingerprint().unwrap());
        assert_eq!(again.features.fingerprint(), w.features.fingerprint());
    }
}
