//! Style, content and alignment scores, FID, benchmark reports and the
//! paired sign test used for direction-of-effect checks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::adapter::{AdapterBundle, StyleExemplarSet};
use crate::checkpoint;
use crate::corpus::{keyword_filter, ImageTextScorer, CAPTION_EXCLUSION_TERMS};
use crate::diffusion::{BaseModel, SampleOptions};
use crate::error::{Error, Result};
use crate::features::{cosine, FeatureStack};
use crate::image::Image;
use crate::inference::{generate, InjectionPolicy};
use crate::scorer::JointScorer;

/// Added to covariance diagonals when symmetrization leaves them indefinite.
pub const FID_EPSILON: f64 = 1e-6;

fn nonempty(name: &str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config(format!("{name} is empty")));
    }
    Ok(())
}

fn finite_rows(rows: &[Vec<f32>]) -> Result<()> {
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Embedder("non-finite embedding".into()));
    }
    Ok(())
}

/// Per generated image: mean style cosine against every exemplar.
pub fn style_scores(generated: &[Image], exemplars: &[Image], fs: &FeatureStack) -> Result<Vec<f64>> {
    nonempty("generated set", generated.len())?;
    nonempty("exemplar set", exemplars.len())?;
    let g = fs.style_embeddings(generated)?;
    let e = fs.style_embeddings(exemplars)?;
    finite_rows(&g)?;
    finite_rows(&e)?;
    Ok(g.iter()
        .map(|gi| e.iter().map(|ej| cosine(gi, ej)).sum::<f64>() / e.len() as f64)
        .collect())
}

/// Mean style cosine over all generated × exemplar pairs.
pub fn style_score(generated: &[Image], exemplars: &StyleExemplarSet, fs: &FeatureStack) -> Result<f64> {
    Ok(mean(&style_scores(generated, &exemplars.images(), fs)?))
}

/// Content cosine of each generated image with its paired reference.
pub fn content_scores(generated: &[Image], reference: &[Image], fs: &FeatureStack) -> Result<Vec<f64>> {
    nonempty("generated set", generated.len())?;
    if generated.len() != reference.len() {
        return Err(Error::Config(format!(
            "{} generated images but {} references",
            generated.len(),
            reference.len()
        )));
    }
    let g = fs.content_embeddings(generated)?;
    let r = fs.content_embeddings(reference)?;
    finite_rows(&g)?;
    finite_rows(&r)?;
    Ok(g.iter().zip(&r).map(|(a, b)| cosine(a, b)).collect())
}

pub fn content_score(generated: &[Image], reference: &[Image], fs: &FeatureStack) -> Result<f64> {
    Ok(mean(&content_scores(generated, reference, fs)?))
}

/// Mean joint-embedding cosine between each image and its prompt.
pub fn alignment_score(generated: &[Image], prompts: &[String], scorer: &JointScorer) -> Result<f64> {
    nonempty("generated set", generated.len())?;
    if generated.len() != prompts.len() {
        return Err(Error::Config("one prompt per image required".into()));
    }
    Ok(mean(&scorer.pair_cosines(generated, prompts)?))
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample mean and unbiased covariance of row vectors.
pub fn gaussian_fit(rows: &[Vec<f32>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if rows.len() < 2 {
        return Err(Error::Config("need at least 2 samples for a covariance".into()));
    }
    let d = rows[0].len();
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] as f64);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut c = x.clone();
    for j in 0..d {
        let m = mu[j];
        c.column_mut(j).add_scalar_mut(-m);
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric PSD matrix; negative eigenvalues are clipped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(symmetrize(m));
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

fn regularize(cov: DMatrix<f64>, which: &str) -> DMatrix<f64> {
    let s = symmetrize(&cov);
    let min = SymmetricEigen::new(s.clone()).eigenvalues.min();
    if min < -FID_EPSILON {
        log::warn!("{which} covariance not PSD (min eigenvalue {min:.3e}); adding {FID_EPSILON:e}·I");
        let d = s.nrows();
        return s + DMatrix::identity(d, d) * FID_EPSILON;
    }
    s
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() || cov_a.nrows() != mu_a.len() {
        return Err(Error::Shape {
            expected: format!("dim {}", mu_a.len()),
            got: format!("dim {}", mu_b.len()),
        });
    }
    let a = regularize(cov_a.clone(), "first");
    let b = regularize(cov_b.clone(), "second");
    // tr((AB)^½) = tr((A^½ B A^½)^½), which stays symmetric
    let ra = psd_sqrt(&a);
    let inner = &ra * &b * &ra;
    let cross: f64 = SymmetricEigen::new(symmetrize(&inner))
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let dm = (mu_a - mu_b).norm_squared();
    Ok((dm + a.trace() + b.trace() - 2.0 * cross).max(0.0))
}

/// FID on precomputed feature rows.
pub fn fid_features(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    frechet_distance(&ma, &ca, &mb, &cb)
}

/// FID between two image sets using the stack's pooled features.
pub fn fid(set_a: &[Image], set_b: &[Image], fs: &FeatureStack) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Config("FID needs at least 2 images per set".into()));
    }
    let a = fs.pooled_features(set_a)?;
    let b = fs.pooled_features(set_b)?;
    finite_rows(&a)?;
    finite_rows(&b)?;
    fid_features(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub style_score: f64,
    pub content_score: f64,
    pub alignment_score: f64,
    pub fid: f64,
    pub n_samples: usize,
    pub embedder_fingerprint: String,
    pub config_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalReport {
    pub fn is_valid(&self) -> bool {
        if self.error.is_some() {
            return true;
        }
        let unit = |v: f64| (-1.0..=1.0).contains(&v);
        unit(self.style_score)
            && unit(self.content_score)
            && unit(self.alignment_score)
            && self.fid >= 0.0
            && self.n_samples > 0
    }
}

/// Fixed-width text table of report rows.
pub fn render_reports(rows: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<16} {:>7} {:>8} {:>7} {:>9} {:>5}\n",
        "row", "style", "content", "align", "fid", "n"
    );
    for r in rows {
        match &r.error {
            Some(e) => out.push_str(&format!("{:<16} failed: {e}\n", r.label)),
            None => out.push_str(&format!(
                "{:<16} {:>7.4} {:>8.4} {:>7.4} {:>9.4} {:>5}\n",
                r.label, r.style_score, r.content_score, r.alignment_score, r.fid, r.n_samples
            )),
        }
    }
    out
}

/// One benchmark row: adapters for several styles, metrics averaged over them.
pub struct BenchmarkEntry<'a> {
    pub label: String,
    pub styles: Vec<(&'a AdapterBundle, &'a StyleExemplarSet)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seeds_per_prompt: usize,
    pub seed: u64,
    pub sample: SampleOptions,
    pub policy: InjectionPolicy,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seeds_per_prompt: 2,
            seed: 0,
            sample: SampleOptions::default(),
            policy: InjectionPolicy::full(1000),
        }
    }
}

/// Drops prompts containing caption exclusion terms.
pub fn filter_prompts(prompts: &[String]) -> Vec<String> {
    prompts
        .iter()
        .filter(|p| keyword_filter(p, CAPTION_EXCLUSION_TERMS).is_accept())
        .cloned()
        .collect()
}

struct Draw {
    prompts: Vec<String>,
    seeds: Vec<u64>,
}

fn draw(prompts: &[String], cfg: &BenchmarkConfig) -> Draw {
    let mut p = Vec::new();
    let mut s = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        for k in 0..cfg.seeds_per_prompt {
            p.push(prompt.clone());
            s.push(cfg.seed.wrapping_add((i * cfg.seeds_per_prompt + k) as u64));
        }
    }
    Draw { prompts: p, seeds: s }
}

/// Base-model row first, then one row per entry. The base row's style score
/// is measured against the union of all entries' exemplars; content is
/// measured against base generations for the same prompt and seed; FID
/// against `reference` images.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    model: &BaseModel,
    entries: &[BenchmarkEntry<'_>],
    prompts: &[String],
    reference: &[Image],
    fs: &FeatureStack,
    scorer: &JointScorer,
    cfg: &BenchmarkConfig,
) -> Result<Vec<EvalReport>> {
    let kept = filter_prompts(prompts);
    if kept.is_empty() {
        return Err(Error::Config("every benchmark prompt was filtered".into()));
    }
    if kept.len() < prompts.len() {
        log::info!("benchmark dropped {} art prompts", prompts.len() - kept.len());
    }
    let d = draw(&kept, cfg);
    let refs: Vec<&str> = d.prompts.iter().map(String::as_str).collect();
    let config_fingerprint = checkpoint::sha256_hex(serde_json::to_string(&(cfg, &kept))?.as_bytes());
    let embedder_fingerprint = checkpoint::fingerprint_parts([fs.fingerprint().as_str(), ImageTextScorer::fingerprint(scorer).as_str()]);
    let base = generate(model, None, &refs, &InjectionPolicy::off(), &cfg.sample, &d.seeds)?;
    let all_exemplars: Vec<Image> = entries
        .iter()
        .flat_map(|e| e.styles.iter().flat_map(|(_, s)| s.images()))
        .collect();
    let row = |label: &str, images: &[Image], exemplars: &[Image]| -> Result<EvalReport> {
        Ok(EvalReport {
            label: label.to_string(),
            style_score: if exemplars.is_empty() { 0.0 } else { mean(&style_scores(images, exemplars, fs)?) },
            content_score: content_score(images, &base.images, fs)?,
            alignment_score: alignment_score(images, &d.prompts, scorer)?,
            fid: if reference.len() >= 2 && images.len() >= 2 { fid(images, reference, fs)? } else { 0.0 },
            n_samples: images.len(),
            embedder_fingerprint: embedder_fingerprint.clone(),
            config_fingerprint: config_fingerprint.clone(),
            error: None,
        })
    };
    let mut rows = vec![row("base", &base.images, &all_exemplars)?];
    for e in entries {
        let result = (|| -> Result<EvalReport> {
            if e.styles.is_empty() {
                return Err(Error::Config("entry has no styles".into()));
            }
            let mut per_style = Vec::new();
            for (adapter, set) in &e.styles {
                let out = generate(model, Some(adapter), &refs, &cfg.policy, &cfg.sample, &d.seeds)?;
                per_style.push(row(&e.label, &out.images, &set.images())?);
            }
            let k = per_style.len() as f64;
            let avg = |f: fn(&EvalReport) -> f64| per_style.iter().map(f).sum::<f64>() / k;
            Ok(EvalReport {
                style_score: avg(|r| r.style_score),
                content_score: avg(|r| r.content_score),
                alignment_score: avg(|r| r.alignment_score),
                fid: avg(|r| r.fid),
                n_samples: per_style.iter().map(|r| r.n_samples).sum(),
                ..per_style[0].clone()
            })
        })();
        rows.push(result.unwrap_or_else(|err| {
            log::error!("benchmark row {} failed: {err}", e.label);
            EvalReport {
                label: e.label.clone(),
                style_score: f64::NAN,
                content_score: f64::NAN,
                alignment_score: f64::NAN,
                fid: f64::NAN,
                n_samples: 0,
                embedder_fingerprint: embedder_fingerprint.clone(),
                config_fingerprint: config_fingerprint.clone(),
                error: Some(err.to_string()),
            }
        }));
    }
    Ok(rows)
}

/// One-sided paired sign test of `a > b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test_greater(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::Config("sign test needs paired samples".into()));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let ties = a.len() - wins - losses;
    let n = (wins + losses) as u64;
    let p_value = if n == 0 {
        1.0
    } else if wins == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n).map_err(|e| Error::Config(e.to_string()))?;
        1.0 - bin.cdf(wins as u64 - 1)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{normal_vec, rng_from_seed};
    use crate::synth::{generate_corpus, generate_exemplars, CorpusSpec, PaletteStyle};
    use nalgebra::Complex;
    use proptest::prelude::*;

    fn random_rows(seed: u64, n: usize, d: usize, shift: f32) -> Vec<Vec<f32>> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| normal_vec(&mut rng, d).into_iter().map(|v| v + shift).collect())
            .collect()
    }

    /// tr((AB)^½) from the eigenvalues of the non-symmetric product.
    fn oracle_fid(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
        let (ma, ca) = gaussian_fit(a).unwrap();
        let (mb, cb) = gaussian_fit(b).unwrap();
        let prod = &ca * &cb;
        let eig = prod.complex_eigenvalues();
        let cross: f64 = eig.iter().map(|z: &Complex<f64>| z.sqrt().re).sum();
        (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross
    }

    #[test]
    fn identical_sets_have_zero_fid() {
        let a = random_rows(1, 40, 8, 0.0);
        assert!(fid_features(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn offset_gaussian_fid_is_squared_offset() {
        // same covariance, mean shifted by d along every axis
        let a = random_rows(2, 50, 4, 0.0);
        let d = 0.7f32;
        let b: Vec<Vec<f32>> = a.iter().map(|r| r.iter().map(|v| v + d).collect()).collect();
        let f = fid_features(&a, &b).unwrap();
        let expect = 4.0 * (d as f64).powi(2);
        assert!((f - expect).abs() < 1e-6, "{f} vs {expect}");
    }

    #[test]
    fn matches_eigenvalue_oracle_on_8d_gaussians() {
        for seed in 0..10 {
            let a = random_rows(10 + seed, 60, 8, 0.0);
            let b = random_rows(100 + seed, 45, 8, 0.3);
            let ours = fid_features(&a, &b).unwrap();
            let oracle = oracle_fid(&a, &b);
            assert!((ours - oracle).abs() < 1e-8, "{ours} vs {oracle}");
        }
    }

    #[test]
    fn sign_test_matches_binomial_tail() {
        let a = vec![1.0; 15].into_iter().chain(vec![0.0; 5]).collect::<Vec<_>>();
        let b = vec![0.5; 20];
        let t = sign_test_greater(&a, &b).unwrap();
        assert_eq!((t.wins, t.losses, t.ties), (15, 5, 0));
        // P(X >= 15), X ~ Bin(20, 1/2), summed directly
        let choose = |n: u64, k: u64| (0..k).fold(1f64, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
        let p: f64 = (15..=20).map(|k| choose(20, k)).sum::<f64>() / 2f64.powi(20);
        assert!((t.p_value - p).abs() < 1e-12);
        assert_eq!(sign_test_greater(&[1.0], &[1.0]).unwrap().p_value, 1.0);
    }

    fn stack(images: &[Image]) -> FeatureStack {
        let mut fs = FeatureStack::new(3).unwrap();
        fs.fit(images).unwrap();
        fs
    }

    #[test]
    fn self_scores_are_one() {
        let ex = generate_exemplars(&PaletteStyle::posterized(), 4, 32, 1);
        let imgs: Vec<Image> = ex.iter().map(|(i, _)| i.clone()).collect();
        let fs = stack(&imgs);
        let set = StyleExemplarSet::new("p", vec![ex[0].clone()]).unwrap();
        assert!((style_score(&imgs[..1], &set, &fs).unwrap() - 1.0).abs() < 1e-9);
        assert!((content_score(&imgs, &imgs, &fs).unwrap() - 1.0).abs() < 1e-9);
        assert!(style_score(&[], &set, &fs).is_err());
    }

    #[test]
    fn same_style_outscores_noise() {
        let ex = generate_exemplars(&PaletteStyle::posterized(), 8, 32, 1);
        let more = generate_exemplars(&PaletteStyle::posterized(), 6, 32, 2);
        let natural: Vec<Image> = generate_corpus(&CorpusSpec {
            records: 40,
            art_records: 0,
            seed: 9,
            ..Default::default()
        })
        .into_iter()
        .map(|r| r.image)
        .collect();
        let fs = stack(&natural);
        let set = StyleExemplarSet::new("p", ex).unwrap();
        let mut rng = rng_from_seed(5);
        let noise: Vec<Image> = (0..6)
            .map(|_| {
                let v = normal_vec(&mut rng, 3 * 32 * 32).into_iter().map(|x| (0.5 + 0.25 * x).clamp(0.0, 1.0)).collect();
                Image::from_planar(32, 32, v).unwrap()
            })
            .collect();
        let same: Vec<Image> = more.iter().map(|(i, _)| i.clone()).collect();
        let s_same = style_score(&same, &set, &fs).unwrap();
        let s_noise = style_score(&noise, &set, &fs).unwrap();
        let s_nat = style_score(&natural[..6], &set, &fs).unwrap();
        assert!(s_same > s_noise + 0.05, "{s_same} vs {s_noise}");
        assert!(s_same > s_nat + 0.05, "{s_same} vs {s_nat}");
    }

    #[test]
    fn prompts_with_art_terms_are_dropped() {
        let p = vec!["a red ball".to_string(), "an oil painting of a box".to_string()];
        assert_eq!(filter_prompts(&p), vec!["a red ball".to_string()]);
    }

    proptest! {
        #[test]
        fn fid_is_symmetric_and_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000, shift in -1f32..1.0) {
            let a = random_rows(s1, 20, 5, 0.0);
            let b = random_rows(s2 + 5000, 25, 5, shift);
            let ab = fid_features(&a, &b).unwrap();
            let ba = fid_features(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn sign_test_p_is_probability(w in 0usize..30, l in 0usize..30) {
            let a: Vec<f64> = (0..w).map(|_| 1.0).chain((0..l).map(|_| 0.0)).collect();
            let b = vec![0.5; w + l];
            let t = sign_test_greater(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&t.p_value));
        }
    }
}
