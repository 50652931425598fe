//! Synthetic domain-shift data and the adaptation timing study.
//!
//! Generated data: prototypes uniform on the unit sphere; every image
//! embedding is `normalize(p_y + g + g_y + ε)` with a dataset-wide shift
//! `g`, a per-class shift `g_y` and `ε ~ N(0, σ²I)`. View 0 is the image
//! itself, views `1..n` add independent `N(0, σ²I)` noise before
//! re-normalizing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{adapt_one, sample_seed, BongardLabel, EngineConfig, SupportSet, ViewBatch};
use crate::error::{Result, TpsError};
use crate::io::manifest::{Manifest, PromptGroupEntry, SampleEntry};
use crate::io::tpse::write_tpse;
use crate::numkernel::{normalize_in_place, Mat};
use crate::prototypes::{save_prototypes, Pooling, Provenance, PrototypeSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub prototype_seed: u64,
    pub global_shift_norm: f64,
    pub class_shift_norm: f64,
    pub view_noise_sigma: f64,
    pub n_views: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 20,
            dim: 64,
            samples_per_class: 25,
            prototype_seed: 0,
            global_shift_norm: 0.5,
            class_shift_norm: 0.0,
            view_noise_sigma: 0.1,
            n_views: 64,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(TpsError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim == 0 || self.n_views == 0 {
            return Err(TpsError::Config("dimension and view count must be positive".into()));
        }
        for (name, v) in [
            ("global shift norm", self.global_shift_norm),
            ("class shift norm", self.class_shift_norm),
            ("noise sigma", self.view_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TpsError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.classes * self.samples_per_class
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub prototypes: PrototypeSet,
    pub batches: Vec<ViewBatch>,
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random direction scaled to `length`; the zero vector when `length` is 0.
fn random_direction(rng: &mut impl Rng, dim: usize, length: f64) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(rng, dim, 1.0);
        if normalize_in_place(&mut v).is_ok() {
            v.iter_mut().for_each(|x| *x *= length);
            return v;
        }
    }
}

/// Unit prototypes drawn uniformly on the sphere.
pub fn random_prototypes(classes: usize, dim: usize, seed: u64) -> Result<PrototypeSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..classes).map(|_| random_direction(&mut rng, dim, 1.0)).collect();
    PrototypeSet::new(
        (0..classes).map(class_name).collect(),
        Mat::from_rows(&rows)?,
        Provenance {
            pooling: Pooling::External,
            groups: vec![],
        },
    )
}

pub fn class_name(i: usize) -> String {
    format!("class_{i:04}")
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:06}")
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    prototypes: PrototypeSet,
    global: Vec<f64>,
    per_class: Vec<Vec<f64>>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SynthSpec) -> Result<Self> {
        spec.validate()?;
        let (c, d) = (spec.classes, spec.dim);
        let prototypes = random_prototypes(c, d, spec.prototype_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed ^ 0x9e37_79b9_7f4a_7c15);
        let global = random_direction(&mut rng, d, spec.global_shift_norm);
        let per_class = (0..c).map(|_| random_direction(&mut rng, d, spec.class_shift_norm)).collect();
        Ok(Generator {
            spec,
            prototypes,
            global,
            per_class,
        })
    }

    /// Sample `i`, labelled `i % C`, from its own RNG stream.
    fn sample(&self, i: usize) -> Result<ViewBatch> {
        let (d, sigma) = (self.spec.dim, self.spec.view_noise_sigma);
        let label = i % self.spec.classes;
        let id = sample_id(i);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.spec.prototype_seed, &id));
        let noise = gaussian_vec(&mut rng, d, sigma);
        let p = self.prototypes.matrix().row(label);
        let shift = &self.per_class[label];
        let mut image: Vec<f64> = (0..d).map(|j| p[j] + self.global[j] + shift[j] + noise[j]).collect();
        normalize_in_place(&mut image)?;
        let mut views = Mat::zeros(self.spec.n_views, d);
        views.row_mut(0).copy_from_slice(&image);
        for v in 1..self.spec.n_views {
            let nu = gaussian_vec(&mut rng, d, sigma);
            let row = views.row_mut(v);
            for j in 0..d {
                row[j] = image[j] + nu[j];
            }
            normalize_in_place(row)?;
        }
        ViewBatch::new(id, views, Some(label))
    }
}

/// Builds the synthetic dataset in memory. Sample `i` has label `i % C`.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    let gen = Generator::new(spec)?;
    let batches = (0..spec.total_samples()).map(|i| gen.sample(i)).collect::<Result<Vec<_>>>()?;
    Ok(SynthData {
        prototypes: gen.prototypes,
        batches,
    })
}

/// Noisy per-class prompt embeddings around the prototypes, so the pooling
/// path has something to work on: a "templates" group with 3 prompts per
/// class and a "descriptors" group with 2.
fn prompt_groups(prototypes: &PrototypeSet, seed: u64) -> Vec<(String, Vec<Mat>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151_5151);
    let d = prototypes.dim();
    [("templates", 3usize), ("descriptors", 2)]
        .into_iter()
        .map(|(name, per_class)| {
            let mats = prototypes
                .matrix()
                .iter_rows()
                .map(|p| {
                    let rows: Vec<Vec<f64>> = (0..per_class)
                        .map(|_| {
                            let n = gaussian_vec(&mut rng, d, 0.05);
                            p.iter().zip(&n).map(|(a, b)| a + b).collect()
                        })
                        .collect();
                    Mat::from_rows(&rows).expect("equal-length rows")
                })
                .collect();
            (name.to_string(), mats)
        })
        .collect()
}

/// Writes prototypes, prompt groups, per-sample view files and
/// `manifest.json` under `dir`. Returns the manifest path.
pub fn write_synth(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    let data = generate(spec)?;
    fs::create_dir_all(dir.join("views")).map_err(|e| TpsError::io(dir, e))?;
    fs::create_dir_all(dir.join("prompts")).map_err(|e| TpsError::io(dir, e))?;
    save_prototypes(&data.prototypes, &dir.join("prototypes.tpse"))?;

    let mut groups = Vec::new();
    for (name, mats) in prompt_groups(&data.prototypes, spec.prototype_seed) {
        let mut class_files = Vec::new();
        for (c, m) in mats.iter().enumerate() {
            let rel = format!("prompts/{name}_{c:04}.tpse");
            write_tpse(m, &dir.join(&rel))?;
            class_files.push(rel);
        }
        groups.push(PromptGroupEntry { name, class_files });
    }

    let mut samples = Vec::with_capacity(data.batches.len());
    for b in &data.batches {
        let rel = format!("views/{}.tpse", b.sample_id);
        write_tpse(&b.views, &dir.join(&rel))?;
        samples.push(SampleEntry {
            sample_id: b.sample_id.clone(),
            views_file: rel,
            label: b.label,
        });
    }

    let manifest = Manifest {
        class_names: data.prototypes.class_names().to_vec(),
        prototype_file: "prototypes.tpse".into(),
        prompt_groups: groups,
        samples,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// One synthetic binary support-set problem: six positives around
/// `base + concept`, six negatives around `base - concept` (concept norm
/// 0.5), isotropic noise of total norm about `noise`, and a query drawn
/// from either side with equal probability. Returns the support set and
/// the query's true side.
pub fn bongard_trial(dim: usize, noise: f64, seed: u64) -> Result<(SupportSet, BongardLabel)> {
    if dim < 2 {
        return Err(TpsError::Config(format!("bongard dimension must be >= 2, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = random_direction(&mut rng, dim, 1.0);
    let concept = random_direction(&mut rng, dim, 0.5);
    let sigma = noise / (dim as f64).sqrt();
    let truth = if rng.random_bool(0.5) {
        BongardLabel::Positive
    } else {
        BongardLabel::Negative
    };
    let mut draw = |sign: f64| -> Vec<f64> {
        let n = gaussian_vec(&mut rng, dim, sigma);
        (0..dim).map(|j| base[j] + sign * concept[j] + n[j]).collect()
    };
    let pos: Vec<Vec<f64>> = (0..6).map(|_| draw(1.0)).collect();
    let neg: Vec<Vec<f64>> = (0..6).map(|_| draw(-1.0)).collect();
    let query = draw(if truth == BongardLabel::Positive { 1.0 } else { -1.0 });
    Ok((SupportSet::new(Mat::from_rows(&pos)?, Mat::from_rows(&neg)?, query)?, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub classes: usize,
    pub dim: usize,
    pub n_views: usize,
    pub repeats: usize,
    pub mean_ms_per_sample: f64,
    pub std_ms: f64,
    pub peak_resident_bytes: Option<u64>,
}

pub const MIN_REPEATS: usize = 3;

/// Peak resident set size of this process, where the platform reports it.
pub fn peak_resident_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Times [`adapt_one`] on in-memory synthetic data for each label-set size.
/// One warm-up run per size is discarded; runs are single-threaded.
pub fn time_adapt(class_counts: &[usize], dim: usize, n_views: usize, repeats: usize, cfg: &EngineConfig) -> Result<Vec<BenchResult>> {
    if repeats < MIN_REPEATS {
        return Err(TpsError::Config(format!("need at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    let mut out = Vec::with_capacity(class_counts.len());
    for &classes in class_counts {
        let spec = SynthSpec {
            classes,
            dim,
            samples_per_class: 1,
            prototype_seed: cfg.seed,
            n_views,
            ..SynthSpec::default()
        };
        let gen = Generator::new(&spec)?;
        let batch = gen.sample(0)?;
        let cfg = EngineConfig { n_views, ..*cfg };
        adapt_one(&gen.prototypes, &batch, &cfg)?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            let p = adapt_one(&gen.prototypes, &batch, &cfg)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(p);
        }
        let mean = times.iter().sum::<f64>() / repeats as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
        out.push(BenchResult {
            classes,
            dim,
            n_views,
            repeats,
            mean_ms_per_sample: mean,
            std_ms: var.sqrt(),
            peak_resident_bytes: peak_resident_bytes(),
        });
    }
    Ok(out)
}

/// Least-squares slope of `ln(mean time)` against `ln(classes)`; 1.0 means
/// linear growth.
pub fn loglog_slope(results: &[BenchResult]) -> Option<f64> {
    if results.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = results
        .iter()
        .map(|r| ((r.classes as f64).ln(), r.mean_ms_per_sample.max(1e-9).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Aligned-column rendering of timing results.
pub fn render_table(results: &[BenchResult]) -> String {
    let mut s = String::new();
    s.push_str("# adaptation math only: no image or text encoder is timed, so these\n");
    s.push_str("# numbers are not comparable to encoder-inclusive per-batch latencies\n");
    s.push_str("# (about 65 ms per batch for the full pipeline on a workstation GPU).\n");
    s.push_str(&format!(
        "{:>8} {:>6} {:>6} {:>8} {:>12} {:>10} {:>14}\n",
        "classes", "dim", "views", "repeats", "mean_ms", "std_ms", "peak_rss_mib"
    ));
    for r in results {
        let rss = r
            .peak_resident_bytes
            .map(|b| format!("{:.1}", b as f64 / (1024.0 * 1024.0)))
            .unwrap_or_else(|| "n/a".into());
        s.push_str(&format!(
            "{:>8} {:>6} {:>6} {:>8} {:>12.3} {:>10.3} {:>14}\n",
            r.classes, r.dim, r.n_views, r.repeats, r.mean_ms_per_sample, r.std_ms, rss
        ));
    }
    if let Some(slope) = loglog_slope(results) {
        s.push_str(&format!("# log-log slope of time vs classes: {slope:.3}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::adapt_all;
    use crate::numkernel::norm;

    #[test]
    fn noiseless_unshifted_data_is_perfectly_separable() {
        let spec = SynthSpec {
            classes: 8,
            dim: 16,
            samples_per_class: 3,
            global_shift_norm: 0.0,
            class_shift_norm: 0.0,
            view_noise_sigma: 0.0,
            n_views: 4,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        let cfg = EngineConfig { steps: 0, ..EngineConfig::default() };
        let (_, summary) = adapt_all(&data.prototypes, &data.batches, &cfg, 1).unwrap();
        assert_eq!(summary.zero_shot_accuracy, Some(1.0));
        for b in &data.batches {
            for row in b.views.iter_rows() {
                assert!((norm(row) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec { samples_per_class: 2, n_views: 3, ..SynthSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.prototypes.matrix(), b.prototypes.matrix());
        for (x, y) in a.batches.iter().zip(&b.batches) {
            assert_eq!(x.views, y.views);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SynthSpec { classes: 1, ..SynthSpec::default() }).is_err());
        assert!(generate(&SynthSpec { view_noise_sigma: -1.0, ..SynthSpec::default() }).is_err());
    }

    #[test]
    fn repeats_minimum_is_enforced() {
        assert!(matches!(
            time_adapt(&[4], 8, 4, 2, &EngineConfig::default()),
            Err(TpsError::Config(_))
        ));
        let r = time_adapt(&[4], 8, 4, 3, &EngineConfig::default()).unwrap();
        assert_eq!(r[0].repeats, 3);
    }

    #[test]
    fn slope_of_linear_series() {
        let mk = |c: usize, t: f64| BenchResult {
            classes: c,
            dim: 1,
            n_views: 1,
            repeats: 3,
            mean_ms_per_sample: t,
            std_ms: 0.0,
            peak_resident_bytes: None,
        };
        let s = loglog_slope(&[mk(10, 1.0), mk(100, 10.0), mk(1000, 100.0)]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(loglog_slope(&[mk(10, 1.0)]).is_none());
    }
}
