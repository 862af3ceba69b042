use std::path::{Path, PathBuf};

use artlab::adapter::{textual_inversion_probe, train_adapter, AdapterBundle, AdapterTrainConfig, Placement, ProbeConfig, StyleExemplarSet};
use artlab::attribution::{
    attribute_by_features, attribute_by_gradient, attribution_panel, build_index, cached_index_path, manifest_items,
    render_result, AttributionMethod, FeatureIndex, IndexItem, InfluenceConfig, InfluenceExample, Source,
};
use artlab::codec::{train_codec, CodecConfig, CodecTrainConfig, LatentCodec};
use artlab::corpus::{
    load_manifest_images, read_manifest, run_filter_pipeline, FilterConfig, ManifestRecord, REFERENCE_PAINTING_THRESHOLD,
};
use artlab::diffusion::{train_base, BaseModel, BaseModelConfig, SampleOptions, TrainBaseConfig, TrainingExample};
use artlab::eval::{render_reports, run_benchmark, style_scores, BenchmarkConfig, BenchmarkEntry};
use artlab::features::FeatureStack;
use artlab::grid::render_grid;
use artlab::image::Image;
use artlab::inference::{generate, generate_with_probe, injection_sweep, stylize, InactiveConditioning, InjectionPolicy};
use artlab::manifest::{ManifestBuilder, RunManifest};
use artlab::scorer::{JointScorer, ScorerConfig};
use artlab::synth::{generate_corpus, read_labels, write_corpus, CorpusSpec, PaletteStyle};
use artlab::toy::toy_exemplars;
use artlab::{Error, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::resolve;
use crate::{Command, Global};

fn need<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| Error::MissingField(field.to_string()))?;
    if !p.exists() {
        return Err(Error::MissingField(format!("{field} ({} does not exist)", p.display())));
    }
    Ok(p)
}

fn need_each<'a>(ps: &'a [PathBuf], field: &str) -> Result<()> {
    for p in ps {
        if !p.exists() {
            return Err(Error::MissingField(format!("{field} ({} does not exist)", p.display())));
        }
    }
    Ok(())
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("ARTLAB_CACHE").map(PathBuf::from)
}

fn out_dir(g: &Global) -> Result<&Path> {
    std::fs::create_dir_all(&g.out_dir).map_err(|e| Error::io(&g.out_dir, e))?;
    Ok(&g.out_dir)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn manifest_path(g: &Global, command: &str) -> PathBuf {
    g.out_dir.join(RunManifest::file_name(command))
}

/// Feature stack fit on a manifest's images; cached under `ARTLAB_CACHE`.
fn feature_stack_for(manifest: &Path, seed: u64) -> Result<FeatureStack> {
    let key = artlab::checkpoint::fingerprint_parts([
        artlab::checkpoint::file_sha256(manifest)?.as_str(),
        seed.to_string().as_str(),
    ]);
    let cached = cache_dir().map(|d| d.join(format!("features-{}.safetensors", &key[..16])));
    if let Some(p) = &cached {
        if p.exists() {
            return FeatureStack::load(p);
        }
    }
    let imgs: Vec<Image> = load_manifest_images(manifest)?.into_iter().map(|(_, i)| i).collect();
    let mut fs = FeatureStack::new(seed)?;
    fs.fit(&imgs)?;
    if let Some(p) = &cached {
        std::fs::create_dir_all(p.parent().unwrap()).map_err(|e| Error::io(p, e))?;
        fs.save(p)?;
    }
    Ok(fs)
}

fn load_scorer(path: &Option<PathBuf>, seed: Option<u64>) -> Result<JointScorer> {
    match path {
        Some(p) => JointScorer::load(need(&Some(p.clone()), "scorer")?),
        None => {
            let mut cfg = ScorerConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            JointScorer::pretrain(cfg)
        }
    }
}

pub fn run(g: &Global, cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(g, a),
        Command::TrainScorer(a) => train_scorer(g, a),
        Command::Filter(a) => filter(g, a),
        Command::TrainCodec(a) => train_codec_cmd(g, a),
        Command::TrainBase(a) => train_base_cmd(g, a),
        Command::TrainAdapter(a) => train_adapter_cmd(g, a),
        Command::Generate(a) => generate_cmd(g, a),
        Command::Stylize(a) => stylize_cmd(g, a),
        Command::Evaluate(a) => evaluate_cmd(g, a),
        Command::Attribute(a) => attribute_cmd(g, a),
        Command::ProbeInversion(a) => probe_cmd(g, a),
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// `corpus` or `exemplars`.
    #[arg(long, default_value = "corpus")]
    pub kind: String,
    #[arg(long)]
    pub records: Option<usize>,
    #[arg(long)]
    pub art: Option<usize>,
    /// Exemplar palette: posterized or duotone.
    #[arg(long)]
    pub style: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExemplarSynth {
    style: String,
    count: usize,
    size: usize,
    seed: u64,
}

fn palette(name: &str) -> Result<PaletteStyle> {
    match name {
        "posterized" => Ok(PaletteStyle::posterized()),
        "duotone" => Ok(PaletteStyle::duotone()),
        other => Err(Error::Config(format!("unknown palette style `{other}`"))),
    }
}

fn synth(g: &Global, a: SynthArgs) -> Result<()> {
    match a.kind.as_str() {
        "corpus" => {
            let mut spec = resolve(&CorpusSpec::default(), g.config.as_deref(), "synth")?;
            if let Some(n) = a.records {
                spec.records = n;
            }
            if let Some(n) = a.art {
                spec.art_records = n;
            }
            if let Some(s) = g.seed {
                spec.seed = s;
            }
            if spec.art_records > spec.records {
                return Err(Error::Config("more art records than records".into()));
            }
            if g.dry_run {
                return Ok(());
            }
            let dir = out_dir(g)?;
            let recs = generate_corpus(&spec);
            let w = write_corpus(dir, &recs)?;
            ManifestBuilder::new("synth", &spec, vec![spec.seed])?
                .finish(&[w.manifest, w.labels, dir.join("images")], &manifest_path(g, "synth"))?;
        }
        "exemplars" => {
            let mut cfg = resolve(
                &ExemplarSynth {
                    style: "posterized".into(),
                    count: 15,
                    size: 32,
                    seed: 1,
                },
                g.config.as_deref(),
                "synth_exemplars",
            )?;
            if let Some(s) = a.style {
                cfg.style = s;
            }
            if let Some(n) = a.count {
                cfg.count = n;
            }
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let style = palette(&cfg.style)?;
            if cfg.count == 0 {
                return Err(Error::Config("exemplar count must be >= 1".into()));
            }
            if g.dry_run {
                return Ok(());
            }
            let dir = out_dir(g)?;
            let set = toy_exemplars(&style, cfg.count, cfg.size, cfg.seed)?;
            let ex_dir = dir.join("exemplars");
            set.save_dir(&ex_dir)?;
            ManifestBuilder::new("synth", &cfg, vec![cfg.seed])?.finish(&[ex_dir], &manifest_path(g, "synth"))?;
        }
        other => return Err(Error::Config(format!("unknown synth kind `{other}`"))),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainScorerArgs {
    #[arg(long)]
    pub steps: Option<usize>,
}

fn train_scorer(g: &Global, a: TrainScorerArgs) -> Result<()> {
    let mut cfg = resolve(&ScorerConfig::default(), g.config.as_deref(), "train_scorer")?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("scorer steps and batch must be >= 1".into()));
    }
    if g.dry_run {
        return Ok(());
    }
    let dir = out_dir(g)?;
    let b = ManifestBuilder::new("train-scorer", &cfg, vec![cfg.seed])?;
    let scorer = JointScorer::pretrain(cfg)?;
    let p = dir.join("scorer.safetensors");
    scorer.save(&p)?;
    b.finish(&[p], &manifest_path(g, "train-scorer"))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    /// Labeled development manifest used to calibrate thresholds.
    #[arg(long)]
    pub calibration_manifest: Option<PathBuf>,
    #[arg(long)]
    pub calibration_labels: Option<PathBuf>,
    /// Uniform threshold (scorer units) when no calibration set is given.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FilterCmdConfig {
    threshold: f64,
    min_recall: f64,
    shards: usize,
}

fn filter(g: &Global, a: FilterArgs) -> Result<()> {
    let mut cfg = resolve(
        &FilterCmdConfig {
            threshold: REFERENCE_PAINTING_THRESHOLD,
            min_recall: 0.95,
            shards: 1,
        },
        g.config.as_deref(),
        "filter",
    )?;
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    let manifest = need(&a.manifest, "manifest")?;
    let calibration = match (&a.calibration_manifest, &a.calibration_labels) {
        (Some(_), Some(_)) => Some((
            need(&a.calibration_manifest, "calibration-manifest")?,
            need(&a.calibration_labels, "calibration-labels")?,
        )),
        (None, None) => None,
        _ => return Err(Error::MissingField("calibration-manifest and calibration-labels go together".into())),
    };
    if !(0.0..=1.0).contains(&cfg.min_recall) {
        return Err(Error::Config("min_recall must be in [0, 1]".into()));
    }
    FilterConfig::with_uniform_threshold(cfg.threshold).validate()?;
    if g.dry_run {
        if let Some(p) = &a.scorer {
            need(&Some(p.clone()), "scorer")?;
        }
        return Ok(());
    }
    let dir = out_dir(g)?;
    let mut b = ManifestBuilder::new("filter", &cfg, g.seed.into_iter().collect())?;
    b.input(manifest)?;
    let scorer = load_scorer(&a.scorer, g.seed)?;
    if let Some(p) = &a.scorer {
        b.input(p)?;
    }
    let fcfg = match calibration {
        Some((m, l)) => {
            b.input(m)?;
            b.input(l)?;
            let labels = read_labels(l)?;
            let recs = load_manifest_images(m)?;
            let mut imgs = Vec::new();
            let mut is_art = Vec::new();
            for (r, img) in recs {
                let lab = labels
                    .iter()
                    .find(|x| x.id == r.id)
                    .ok_or_else(|| Error::MissingField(format!("label for {}", r.id)))?;
                imgs.push(img);
                is_art.push(lab.is_art);
            }
            let base = FilterConfig::with_uniform_threshold(cfg.threshold);
            let scores = scorer.score_matrix(&imgs, &base.image_concepts)?;
            artlab::corpus::calibrate_config(&base, &scores, &is_art, cfg.min_recall)
        }
        None => {
            log::warn!("no calibration set; using a uniform threshold of {}", cfg.threshold);
            FilterConfig::with_uniform_threshold(cfg.threshold)
        }
    };
    let out = dir.join("filtered.jsonl");
    let outcome = run_filter_pipeline(manifest, &out, &fcfg, &scorer, cfg.shards)?;
    let stats_json = dir.join("filter_stats.json");
    write_json(&stats_json, &outcome.stats)?;
    let table = dir.join("filter_stats.txt");
    std::fs::write(&table, outcome.stats.render_table()).map_err(|e| Error::io(&table, e))?;
    let fc = dir.join("filter_config.json");
    write_json(&fc, &fcfg)?;
    print!("{}", outcome.stats.render_table());
    b.finish(
        &[out, dir.join("filtered.verdicts.jsonl"), dir.join("filtered.quarantine.jsonl"), stats_json, table, fc],
        &manifest_path(g, "filter"),
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainCodecArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// `autoencoder` or `passthrough`.
    #[arg(long)]
    pub kind: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodecCmdConfig {
    codec: CodecConfig,
    train: CodecTrainConfig,
    held_out_fraction: f64,
}

fn split_held_out<T: Clone>(v: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n = ((v.len() as f64 * fraction).round() as usize).clamp(1.min(v.len()), v.len().saturating_sub(1).max(1));
    let cut = v.len() - n.min(v.len());
    (v[..cut].to_vec(), v[cut..].to_vec())
}

fn train_codec_cmd(g: &Global, a: TrainCodecArgs) -> Result<()> {
    let mut cfg = resolve(
        &CodecCmdConfig {
            codec: CodecConfig::default(),
            train: CodecTrainConfig::default(),
            held_out_fraction: 0.05,
        },
        g.config.as_deref(),
        "train_codec",
    )?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = g.seed {
        cfg.train.seed = s;
        cfg.codec.seed = s;
    }
    match a.kind.as_deref() {
        Some("passthrough") => cfg.codec = CodecConfig::passthrough(cfg.codec.image_size),
        Some("autoencoder") | None => {}
        Some(other) => return Err(Error::Config(format!("unknown codec kind `{other}`"))),
    }
    cfg.codec.validate()?;
    let manifest = need(&a.manifest, "manifest")?;
    if g.dry_run {
        return Ok(());
    }
    let dir = out_dir(g)?;
    let mut b = ManifestBuilder::new("train-codec", &cfg, vec![cfg.train.seed])?;
    b.input(manifest)?;
    let imgs: Vec<Image> = load_manifest_images(manifest)?.into_iter().map(|(_, i)| i).collect();
    if imgs.len() < 2 {
        return Err(Error::Config("need at least 2 images to train a codec".into()));
    }
    let (train, held) = split_held_out(&imgs, cfg.held_out_fraction);
    let p = dir.join("codec.safetensors");
    let corpus_fp = artlab::checkpoint::file_sha256(manifest)?;
    let (_, report) = train_codec(cfg.codec.clone(), &train, &held, &cfg.train, &corpus_fp, Some(&p))?;
    let rp = dir.join("codec_report.json");
    write_json(&rp, &report)?;
    println!("held-out PSNR {:.2} dB, latent std {:.3}", report.heldout_psnr, report.latent_std);
    b.finish(&[p, rp], &manifest_path(g, "train-codec"))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainBaseArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BaseCmdConfig {
    model: BaseModelConfig,
    train: TrainBaseConfig,
    val_fraction: f64,
}

fn examples_for(codec: &LatentCodec, recs: &[(ManifestRecord, Image)]) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::with_capacity(recs.len());
    for chunk in recs.chunks(256) {
        let imgs: Vec<&Image> = chunk.iter().map(|(_, i)| i).collect();
        let lat = codec.encode_images(&imgs)?;
        for (i, (r, _)) in chunk.iter().enumerate() {
            out.push(TrainingExample {
                id: r.id.clone(),
                latent: lat.get(i)?,
                caption: r.caption.clone(),
            });
        }
    }
    Ok(out)
}

fn train_base_cmd(g: &Global, a: TrainBaseArgs) -> Result<()> {
    let mut cfg = resolve(
        &BaseCmdConfig {
            model: BaseModelConfig::default(),
            train: TrainBaseConfig::default(),
            val_fraction: 0.05,
        },
        g.config.as_deref(),
        "train_base",
    )?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(b) = a.batch {
        cfg.train.batch_size = b;
    }
    if let Some(s) = g.seed {
        cfg.train.seed = s;
        cfg.model.denoiser.seed = s;
    }
    if cfg.train.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let manifest = need(&a.manifest, "manifest")?;
    let codec_path = need(&a.codec, "codec")?;
    if g.dry_run {
        return Ok(());
    }
    let dir = out_dir(g)?;
    let mut b = ManifestBuilder::new("train-base", &cfg, vec![cfg.train.seed])?;
    b.input(manifest)?;
    b.input(codec_path)?;
    let codec = LatentCodec::load(codec_path)?;
    let text = artlab::text::TextEncoder::new(artlab::text::TextEncoderConfig::default(), artlab::text::Vocab::standard())?;
    let model = BaseModel::init(cfg.model.clone(), codec, text)?;
    let recs = load_manifest_images(manifest)?;
    let all = examples_for(&model.codec, &recs)?;
    let (train, val) = split_held_out(&all, cfg.val_fraction);
    if cfg.train.grid_every_epochs > 0 && cfg.train.grid_prompts.is_empty() {
        cfg.train.grid_prompts = recs.iter().take(4).map(|(r, _)| r.caption.clone()).collect();
    }
    let (mut model, report) = train_base(model, &train, &val, &cfg.train, Some(dir))?;
    model.corpus_fingerprint = artlab::checkpoint::file_sha256(manifest)?;
    let p = dir.join("base.safetensors");
    model.save(&p)?;
    let rp = dir.join("train_report.json");
    write_json(&rp, &report)?;
    let mut outs = vec![p, rp];
    if let Some(l) = report.log_path.clone() {
        outs.push(l);
    }
    outs.extend(report.grids.iter().cloned());
    b.finish(&outs, &manifest_path(g, "train-base"))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainAdapterArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Directory with images and captions.jsonl.
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// `up`, `all`, or a comma-separated list of layer names.
    #[arg(long)]
    pub placement: Option<String>,
    /// Content-loss weight.
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub token: Option<String>,
}

fn train_adapter_cmd(g: &Global, a: TrainAdapterArgs) -> Result<()> {
    let mut cfg = resolve(&AdapterTrainConfig::default(), g.config.as_deref(), "train_adapter")?;
    if let Some(v) = a.rank {
        cfg.rank = v;
    }
    if let Some(p) = &a.placement {
        cfg.placement = p.parse::<Placement>()?;
    }
    if let Some(v) = a.w {
        cfg.content_weight = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.scale {
        cfg.scale = v;
    }
    if let Some(v) = a.token {
        cfg.token = v;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if cfg.rank == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("rank and batch must be >= 1".into()));
    }
    if cfg.content_weight < 0.0 || !cfg.content_weight.is_finite() {
        return Err(Error::Config("content weight must be a finite value >= 0".into()));
    }
    let base = need(&a.base, "base")?;
    let ex_dir = need(&a.exemplars, "exemplars")?;
    if g.dry_run {
        return Ok(());
    }
    let dir = out_dir(g)?;
    let mut b = ManifestBuilder::new("train-adapter", &cfg, vec![cfg.seed])?;
    b.input(base)?;
    b.input(ex_dir)?;
    let model = BaseModel::load(base)?;
    let set = StyleExemplarSet::load_dir(ex_dir)?;
    let p = dir.join("adapter.safetensors");
    let (_, report) = train_adapter(&model, &set, &cfg, Some(&p))?;
    let rp = dir.join("adapter_losses.json");
    write_json(&rp, &report)?;
    if let Some(last) = report.losses.last() {
        println!(
            "final L_S {:.4} L_C {:.6} total {:.4}",
            last.style_loss, last.content_loss, last.total
        );
    }
    b.finish(&[p.clone(), p.with_extension("json"), rp], &manifest_path(g, "train-adapter"))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleCmdConfig {
    /// Defaults to T (adapter on at every step).
    t_start: Option<usize>,
    scale: f64,
    guidance: f64,
    steps: usize,
    samples: usize,
    inactive: InactiveConditioning,
    /// Stylize only: inversion depth, defaults to 0.8·T.
    invert_to: Option<usize>,
    seed: u64,
}

impl Default for SampleCmdConfig {
    fn default() -> Self {
        Self {
            t_start: None,
            scale: 1.0,
            guidance: artlab::diffusion::DEFAULT_GUIDANCE,
            steps: 50,
            samples: 1,
            inactive: InactiveConditioning::Plain,
            invert_to: None,
            seed: 0,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SampleFlags {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Sample from the base model alone.
    #[arg(long)]
    pub no_adapter: bool,
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    #[arg(long)]
    pub t_start: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

fn sample_config(g: &Global, f: &SampleFlags, section: &str) -> Result<SampleCmdConfig> {
    let mut cfg = resolve(&SampleCmdConfig::default(), g.config.as_deref(), section)?;
    if let Some(v) = f.t_start {
        cfg.t_start = Some(v);
    }
    if let Some(v) = f.scale {
        cfg.scale = v;
    }
    if let Some(v) = f.guidance {
        cfg.guidance = v;
    }
    if let Some(v) = f.steps {
        cfg.steps = v;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if cfg.steps == 0 || cfg.samples == 0 {
        return Err(Error::Config("steps and samples must be >= 1".into()));
    }
    if cfg.guidance < 0.0 {
        return Err(Error::Config("guidance must be >= 0".into()));
    }
    if f.prompts.is_empty() || f.prompts.iter().any(|p| p.trim().is_empty()) {
        return Err(Error::MissingField("prompt".into()));
    }
    Ok(cfg)
}

/// Loads the base model and, unless `--no-adapter`, the adapter.
fn load_pair(f: &SampleFlags, b: &mut ManifestBuilder) -> Result<(BaseModel, Option<AdapterBundle>)> {
    let base = need(&f.base, "base")?;
    b.input(base)?;
    let model = BaseModel::load(base)?;
    let adapter = if f.no_adapter {
        None
    } else {
        let p = need(&f.adapter, "adapter")?;
        b.input(p)?;
        let ad = AdapterBundle::load(p)?;
        ad.check_compatible(&model)?;
        Some(ad)
    };
    Ok((model, adapter))
}

fn check_pair_paths(f: &SampleFlags) -> Result<()> {
    need(&f.base, "base")?;
    if !f.no_adapter {
        need(&f.adapter, "adapter")?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub sample: SampleFlags,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Also render the no-adapter / late / mid / full injection grid.
    #[arg(long)]
    pub sweep: bool,
}

fn save_images(dir: &Path, prefix: &str, images: &[Image]) -> Result<Vec<PathBuf>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.join(format!("{prefix}_{i:03}.png"));
            img.save(&p)?;
            Ok(p)
        })
        .collect()
}

fn generate_cmd(g: &Global, a: GenerateArgs) -> Result<()> {
    let mut cfg = sample_config(g, &a.sample, "generate")?;
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    check_pair_paths(&a.sample)?;
    if g.dry_run {
        return Ok(());
    }
    let dir = out_dir(g)?;
    let mut b = ManifestBuilder::new("generate", &cfg, vec![cfg.seed])?;
    let (model, adapter) = load_pair(&a.sample, &mut b)?;
    let big_t = model.schedule.steps();
    let policy = InjectionPolicy {
        t_start: cfg.t_start.unwrap_or(big_t),
        scale: cfg.scale,
        inactive: cfg.inactive,
    };
    let mut prompts = Vec::new();
    let mut seeds = Vec::new();
    for p in &a.sample.prompts {
        for k in 0..cfg.samples {
            prompts.push(p.as_str());
            seeds.push(cfg.seed + seeds.len() as u64 + k as u64 * 0);
        }
    }
    let opts = SampleOptions {
        guidance_scale: cfg.guidance,
        steps: cfg.steps,
    };
    let out = generate(&model, adapter.as_ref(), &prompts, &policy, &opts, &seeds)?;
    let mut outs = save_images(dir, "gen", &out.images)?;
    let labels: Vec<String> = prompts.iter().zip(&seeds).map(|(p, s)| format!("{p} {s}")).collect();
    let grid = dir.join("grid.png");
    render_grid(&out.images, &labels)?.save(&grid)?;
    outs.push(grid);
    if a.sweep && adapter.is_some() {
        let mut imgs = Vec::new();
        let mut labels = Vec::new();
        for (p, s) in prompts.iter().zip(&seeds) {
            for (label, t) in injection_sweep(big_t) {
                let pol = InjectionPolicy {
                    t_start: t,
                    scale: if label == "no adapter" { 0.0 } else { cfg.scale },
                    inactive: cfg.inactive,
                };
                let o = generate(&model, adapter.as_ref(), &[p], &pol, &opts, &[*s])?;
                imgs.extend(o.images);
                labels.push(label.to_string());
            }
        }
        let sweep = dir.join("sweep.png");
        render_grid(&imgs, &labels)?.save(&sweep)?;
        outs.push(sweep);
    }
    let trace = dir.join("trace.json");
    write_json(&trace, &out.trace)?;
    outs.push(trace);
    b.finish(&outs, &manifest_path(g, "generate"))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct StylizeArgs {
    #[command(flatten)]
    pub sample: SampleFlags,
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub invert_to: Option<usize>,
}

fn stylize_cmd(g: &Global, a: StylizeArgs) -> Result<()> {
    let mut cfg = sample_config(g, &a.sample, "stylize")?;
    if let Some(v) = a.invert_to {
        cfg.invert_to = Some(v);
    }
    if a.images.is_empty() {
        return Err(Error::MissingField("image".into()));
    }
    need_each(&a.images, "image")?;
    let n = a.images.len();
    let prompts: Vec<&str> = match a.sample.prompts.len() {
        1 => vec![a.sample.prompts[0].as_str(); n],
        k if k == n => a.sample.prompts.iter().map(String::as_str).collect(),
        k => return Err(Error::Config(format!("{k} prompts for {n} images"))),
    };
    check_pair_paths(&a.sample)?;
    if g.dry_run {
        return Ok(());
    }
    let dir = out_dir(g)?;
    let mut b = ManifestBuilder::new("stylize", &cfg, vec![cfg.seed])?;
    let (model, adapter) = load_pair(&a.sample, &mut b)?;
    let mut images = Vec::new();
    for p in &a.images {
        b.input(p)?;
        images.push(Image::load(p)?);
    }
    let big_t = model.schedule.steps();
    let policy = InjectionPolicy {
        t_start: cfg.t_start.unwrap_or(big_t),
        scale: cfg.scale,
        inactive: cfg.inactive,
    };
    let invert_to = cfg.invert_to.unwrap_or(big_t * 8 / 10);
    let opts = SampleOptions {
        guidance_scale: cfg.guidance,
        steps: cfg.steps,
    };
    let out = stylize(&model, adapter.as_ref(), &images, &prompts, invert_to, &policy, &opts)?;
    let mut outs = save_images(dir, "stylized", &out.images)?;
    let mut pair = Vec::new();
    let mut labels = Vec::new();
    for (i, o) in images.iter().zip(&out.images) {
        pair.push(i.resize(o.width, o.height));
        pair.push(o.clone());
        labels.push("input".to_string());
        labels.push("stylized".to_string());
    }
    let grid = dir.join("grid.png");
    render_grid(&pair, &labels)?.save(&grid)?;
    outs.push(grid);
    b.finish(&outs, &manifest_path(g, "stylize"))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Repeatable; pairs with `--exemplars` in order.
    #[arg(long = "adapter")]
    pub adapters: Vec<PathBuf>,
    #[arg(long = "exemplars")]
    pub exemplars: Vec<PathBuf>,
    /// Row label per adapter (defaults to the file stem).
    #[arg(long = "label")]
    pub labels: Vec<String>,
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    /// Natural reference manifest for FID and feature standardization.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub scorer: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvalCmdConfig {
    benchmark: BenchmarkConfig,
    feature_seed: u64,
    max_reference: usize,
}

fn evaluate_cmd(g: &Global, a: EvaluateArgs) -> Result<()> {
    let mut cfg = resolve(
        &EvalCmdConfig {
            benchmark: BenchmarkConfig::default(),
            feature_seed: 3,
            max_reference: 200,
        },
        g.config.as_deref(),
        "evaluate",
    )?;
    if let Some(s) = g.seed {
        cfg.benchmark.seed = s;
    }
    let base = need(&a.base, "base")?;
    let reference = need(&a.reference, "reference")?;
    if a.adapters.len() != a.exemplars.len() {
        return Err(Error::Config("each --adapter needs a matching --exemplars".into()));
    }
    if !a.labels.is_empty() && a.labels.len() != a.adapters.len() {
        return Err(Error::Config("label count must match adapter count".into()));
    }
    need_each(&a.adapters, "adapter")?;
    need_each(&a.exemplars, "exemplars")?;
    if a.prompts.is_empty() {
        return Err(Error::MissingField("prompt".into()));
    }
    if g.dry_run {
        return Ok(());
    }
    let dir = out_dir(g)?;
    let mut b = ManifestBuilder::new("evaluate", &cfg, vec![cfg.benchmark.seed])?;
    b.input(base)?;
    b.input(reference)?;
    let model = BaseModel::load(base)?;
    cfg.benchmark.policy.t_start = cfg.benchmark.policy.t_start.min(model.schedule.steps());
    let fs = feature_stack_for(reference, cfg.feature_seed)?;
    let scorer = load_scorer(&a.scorer, None)?;
    let mut adapters = Vec::new();
    let mut sets = Vec::new();
    for (p, e) in a.adapters.iter().zip(&a.exemplars) {
        b.input(p)?;
        b.input(e)?;
        adapters.push(AdapterBundle::load(p)?);
        sets.push(StyleExemplarSet::load_dir(e)?);
    }
    let entries: Vec<BenchmarkEntry> = adapters
        .iter()
        .zip(&sets)
        .enumerate()
        .map(|(i, (ad, set))| BenchmarkEntry {
            label: a.labels.get(i).cloned().unwrap_or_else(|| {
                a.adapters[i].file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            }),
            styles: vec![(ad, set)],
        })
        .collect();
    let refs: Vec<Image> = load_manifest_images(reference)?
        .into_iter()
        .take(cfg.max_reference)
        .map(|(_, i)| i)
        .collect();
    let rows = run_benchmark(&model, &entries, &a.prompts, &refs, &fs, &scorer, &cfg.benchmark)?;
    let rp = dir.join("report.json");
    write_json(&rp, &rows)?;
    let table = dir.join("report.txt");
    let text = render_reports(&rows);
    std::fs::write(&table, &text).map_err(|e| Error::io(&table, e))?;
    print!("{text}");
    b.finish(&[rp, table], &manifest_path(g, "evaluate"))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    #[arg(long)]
    pub query: Option<PathBuf>,
    #[arg(long)]
    pub query_prompt: Option<String>,
    /// Natural training corpus manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    /// Prebuilt natural-corpus index; must exist when given.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// `feature-similarity` or `gradient-influence`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(short, long)]
    pub k: Option<usize>,
    /// Base model (gradient-influence only).
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AttributeCmdConfig {
    method: AttributionMethod,
    k: usize,
    feature_seed: u64,
    influence: InfluenceConfig,
}

fn exemplar_items(dir: &Path) -> Result<(StyleExemplarSet, Vec<IndexItem>)> {
    let set = StyleExemplarSet::load_dir(dir)?;
    let items = set
        .items
        .iter()
        .enumerate()
        .map(|(i, (img, _))| IndexItem {
            id: format!("{i:03}"),
            source: Source::ExemplarSet,
            image: Some(img.clone()),
        })
        .collect();
    Ok((set, items))
}

fn attribute_cmd(g: &Global, a: AttributeArgs) -> Result<()> {
    let mut cfg = resolve(
        &AttributeCmdConfig {
            method: AttributionMethod::FeatureSimilarity,
            k: 5,
            feature_seed: 3,
            influence: InfluenceConfig::default(),
        },
        g.config.as_deref(),
        "attribute",
    )?;
    if let Some(m) = &a.method {
        cfg.method = m.parse()?;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(s) = g.seed {
        cfg.influence.seed = s;
    }
    if cfg.k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let query = need(&a.query, "query")?;
    let manifest = need(&a.manifest, "manifest")?;
    if let Some(e) = &a.exemplars {
        need(&Some(e.clone()), "exemplars")?;
    }
    if let Some(ix) = &a.index {
        if !ix.exists() {
            return Err(Error::Unindexed(ix.display().to_string()));
        }
    }
    if cfg.method == AttributionMethod::GradientInfluence {
        need(&a.base, "base")?;
        if a.query_prompt.as_deref().is_none_or(|p| p.trim().is_empty()) {
            return Err(Error::MissingField("query-prompt".into()));
        }
    }
    if g.dry_run {
        return Ok(());
    }
    let dir = out_dir(g)?;
    let mut b = ManifestBuilder::new("attribute", &cfg, vec![cfg.influence.seed])?;
    b.input(query)?;
    b.input(manifest)?;
    let q = Image::load(query)?;
    let query_id = query.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let fs = feature_stack_for(manifest, cfg.feature_seed)?;
    let natural = match &a.index {
        Some(p) => {
            b.input(p)?;
            FeatureIndex::load(p)?
        }
        None => {
            let cached = cache_dir().map(|d| cached_index_path(&d, manifest, &fs)).transpose()?;
            let prev = cached.as_ref().filter(|p| p.exists()).map(|p| FeatureIndex::load(p)).transpose()?;
            let (ix, stats) = build_index(&manifest_items(manifest, Source::NaturalCorpus)?, &fs, prev.as_ref())?;
            if !stats.quarantined.is_empty() {
                log::warn!("{} records quarantined while indexing", stats.quarantined.len());
            }
            if let Some(p) = &cached {
                ix.save(p)?;
            }
            ix
        }
    };
    let (set, ex_items) = match &a.exemplars {
        Some(d) => {
            b.input(d)?;
            let (s, i) = exemplar_items(d)?;
            (Some(s), i)
        }
        None => (None, vec![]),
    };
    let (ex_index, _) = build_index(&ex_items, &fs, None)?;
    let records = read_manifest(manifest)?;
    let result = match cfg.method {
        AttributionMethod::FeatureSimilarity => {
            attribute_by_features(&query_id, &q, &[&natural, &ex_index], &fs, cfg.k)?
        }
        AttributionMethod::GradientInfluence => {
            let base = need(&a.base, "base")?;
            b.input(base)?;
            let model = BaseModel::load(base)?;
            let mut examples = Vec::new();
            for (r, img) in load_manifest_images(manifest)? {
                examples.push(InfluenceExample {
                    id: r.id,
                    source: Source::NaturalCorpus,
                    image: img,
                    caption: r.caption,
                });
            }
            if let Some(s) = &set {
                let token = model.text.style_token(artlab::text::DEFAULT_STYLE_TOKEN)?;
                for (i, (img, cap)) in s.items.iter().enumerate() {
                    examples.push(InfluenceExample {
                        id: format!("{i:03}"),
                        source: Source::ExemplarSet,
                        image: img.clone(),
                        caption: artlab::text::compose_style_prompt(cap, &token)?,
                    });
                }
            }
            let prompt = a.query_prompt.clone().unwrap_or_default();
            attribute_by_gradient(&model, &query_id, &q, &prompt, &examples, &cfg.influence, cfg.k)?
        }
    };
    let rp = dir.join("attribution.json");
    write_json(&rp, &result)?;
    print!("{}", render_result(&result));
    let panel_path = dir.join("attribution_panel.png");
    let panel = attribution_panel(&q, &result, |src, id| match src {
        Source::NaturalCorpus => records
            .iter()
            .find(|r| r.id == id)
            .and_then(|r| Image::load(&artlab::corpus::resolve_image_path(manifest, &r.image_path)).ok()),
        Source::ExemplarSet => set
            .as_ref()
            .and_then(|s| id.parse::<usize>().ok().and_then(|i| s.items.get(i)).map(|(img, _)| img.clone())),
    })?;
    panel.save(&panel_path)?;
    b.finish(&[rp, panel_path], &manifest_path(g, "attribute"))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Natural reference manifest; enables the style score.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProbeCmdConfig {
    probe: ProbeConfig,
    guidance: f64,
    sample_steps: usize,
    samples: usize,
    feature_seed: u64,
}

#[derive(Debug, Serialize)]
struct ProbeReport {
    token: artlab::text::StyleToken,
    final_loss: Option<f64>,
    style_score: Option<f64>,
    /// Relative to the output directory.
    images: Vec<String>,
}

fn probe_cmd(g: &Global, a: ProbeArgs) -> Result<()> {
    let mut cfg = resolve(
        &ProbeCmdConfig {
            probe: ProbeConfig::default(),
            guidance: artlab::diffusion::DEFAULT_GUIDANCE,
            sample_steps: 50,
            samples: 4,
            feature_seed: 3,
        },
        g.config.as_deref(),
        "probe_inversion",
    )?;
    if let Some(v) = a.steps {
        cfg.probe.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.probe.lr = v;
    }
    if let Some(s) = g.seed {
        cfg.probe.seed = s;
    }
    let base = need(&a.base, "base")?;
    let ex = need(&a.exemplars, "exemplars")?;
    if let Some(r) = &a.reference {
        need(&Some(r.clone()), "reference")?;
    }
    if cfg.samples == 0 {
        return Err(Error::Config("samples must be >= 1".into()));
    }
    if g.dry_run {
        return Ok(());
    }
    let dir = out_dir(g)?;
    let mut b = ManifestBuilder::new("probe-inversion", &cfg, vec![cfg.probe.seed])?;
    b.input(base)?;
    b.input(ex)?;
    let model = BaseModel::load(base)?;
    let set = StyleExemplarSet::load_dir(ex)?;
    let probe = textual_inversion_probe(&model, &set, &cfg.probe)?;
    let prompts: Vec<String> = if a.prompts.is_empty() {
        set.items.iter().take(cfg.samples).map(|(_, c)| c.clone()).collect()
    } else {
        a.prompts.clone()
    };
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let seeds: Vec<u64> = (0..refs.len() as u64).map(|i| cfg.probe.seed + i).collect();
    let opts = SampleOptions {
        guidance_scale: cfg.guidance,
        steps: cfg.sample_steps,
    };
    let out = generate_with_probe(&model, &probe, &refs, &opts, &seeds)?;
    let mut outs = save_images(dir, "probe", &out.images)?;
    let style_score = match &a.reference {
        Some(r) => {
            b.input(r)?;
            let fs = feature_stack_for(r, cfg.feature_seed)?;
            Some(artlab::eval::mean(&style_scores(&out.images, &set.images(), &fs)?))
        }
        None => None,
    };
    let report = ProbeReport {
        token: probe.token.clone(),
        final_loss: probe.losses.last().copied(),
        style_score,
        images: outs
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    let rp = dir.join("probe.json");
    write_json(&rp, &report)?;
    if let Some(s) = style_score {
        println!("probe style score {s:.4}");
    }
    outs.push(rp);
    b.finish(&outs, &manifest_path(g, "probe-inversion"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn held_out_split_keeps_both_sides_nonempty() {
        for n in 2..40 {
            let v: Vec<usize> = (0..n).collect();
            for f in [0.0, 0.05, 0.5, 1.0] {
                let (a, b) = split_held_out(&v, f);
                assert!(!a.is_empty() && !b.is_empty(), "{n} {f}");
                assert_eq!(a.len() + b.len(), n);
            }
        }
    }

    #[test]
    fn palettes_resolve() {
        assert!(palette("posterized").is_ok());
        assert!(palette("cubist").unwrap_err().is_validation());
    }
}
