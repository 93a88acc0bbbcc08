//! Multimodal sample pools: synthetic generation, JSON-lines ingestion of
//! pre-extracted embeddings, and the random set-composition protocol that
//! builds training and test sets from per-subject sample pools.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, subject_tag, tags};

/// One composed multimodal example: one vector per modality, ordered by
/// sorted modality name.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub subject_id: i64,
    pub modality_vectors: Vec<Vec<f64>>,
}

/// Modality name to feature dimension, iterated in sorted name order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub modalities: BTreeMap<String, usize>,
}

impl DatasetSchema {
    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.keys().cloned().collect()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.values().copied().collect()
    }
}

/// Per-(subject, modality) sample lists. The schema is inferred from the
/// first sample of each modality and enforced afterwards.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModalityPool {
    schema: DatasetSchema,
    entries: BTreeMap<i64, BTreeMap<String, Vec<Vec<f64>>>>,
}

impl ModalityPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one sample. The first sample of a modality fixes its
    /// dimension; later samples must match it.
    pub fn insert(&mut self, subject: i64, modality: &str, features: Vec<f64>) -> Result<()> {
        if modality.is_empty() {
            return Err(Error::Schema("modality name is empty".into()));
        }
        if features.is_empty() {
            return Err(Error::Value(format!(
                "empty feature vector for subject {subject}, modality {modality:?}"
            )));
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite feature {bad} for subject {subject}, modality {modality:?}"
            )));
        }
        match self.schema.modalities.get(modality) {
            Some(&dim) if dim != features.len() => {
                return Err(Error::Schema(format!(
                    "modality {modality:?} has dimension {dim}, got a vector of length {} for subject {subject}",
                    features.len()
                )));
            }
            Some(_) => {}
            None => {
                self.schema
                    .modalities
                    .insert(modality.to_string(), features.len());
            }
        }
        self.entries
            .entry(subject)
            .or_default()
            .entry(modality.to_string())
            .or_default()
            .push(features);
        Ok(())
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.schema.modality_names()
    }

    pub fn subjects(&self) -> Vec<i64> {
        self.entries.keys().copied().collect()
    }

    pub fn num_subjects(&self) -> usize {
        self.entries.len()
    }

    pub fn samples(&self, subject: i64, modality: &str) -> Option<&[Vec<f64>]> {
        self.entries
            .get(&subject)?
            .get(modality)
            .map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_samples(&self) -> usize {
        self.entries
            .values()
            .flat_map(|m| m.values())
            .map(|v| v.len())
            .sum()
    }

    /// Errors unless every subject has at least one sample for every
    /// modality in the schema.
    pub fn validate_complete(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Data("pool contains no subjects".into()));
        }
        for (&subject, per_modality) in &self.entries {
            for name in self.schema.modalities.keys() {
                let present = per_modality.get(name).map_or(false, |v| !v.is_empty());
                if !present {
                    return Err(Error::Data(format!(
                        "subject {subject} has no samples for modality {name:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One modality of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub dim: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub distortion_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_subjects: usize,
    pub modalities: Vec<ModalitySpec>,
    pub samples_per_subject_modality: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// 1 means all modalities see the same subject latent, 0 means each
    /// modality has its own independent subject signature.
    #[serde(default = "default_correlation")]
    pub cross_modality_correlation: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_latent_dim() -> usize {
    16
}

fn default_correlation() -> f64 {
    0.8
}

impl Default for SynthSpec {
    /// Three mildly noisy dim-32 modalities over 20 subjects; a small task
    /// that a default model solves comfortably within a laptop minute.
    fn default() -> Self {
        SynthSpec {
            num_subjects: 20,
            modalities: vec![
                ModalitySpec { dim: 32, noise_std: 0.2, distortion_rate: 0.0 };
                3
            ],
            samples_per_subject_modality: 8,
            latent_dim: default_latent_dim(),
            cross_modality_correlation: default_correlation(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_subjects == 0 {
            return Err(Error::Config("num_subjects must be >= 1".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if self.samples_per_subject_modality == 0 {
            return Err(Error::Config(
                "samples_per_subject_modality must be >= 1".into(),
            ));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.dim == 0 {
                return Err(Error::Config(format!("modality {i}: dim must be >= 1")));
            }
            if !(m.noise_std.is_finite() && m.noise_std >= 0.0) {
                return Err(Error::Config(format!(
                    "modality {i}: noise_std must be finite and >= 0, got {}",
                    m.noise_std
                )));
            }
            if !(0.0..=1.0).contains(&m.distortion_rate) {
                return Err(Error::Config(format!(
                    "modality {i}: distortion_rate must be in [0, 1], got {}",
                    m.distortion_rate
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.cross_modality_correlation) {
            return Err(Error::Config(format!(
                "cross_modality_correlation must be in [0, 1], got {}",
                self.cross_modality_correlation
            )));
        }
        Ok(())
    }

    /// Synthetic modality names: "m00", "m01", ... Zero-padded so sorted
    /// name order equals index order.
    pub fn modality_name(index: usize) -> String {
        format!("m{index:02}")
    }
}

fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generates independent train and test pools.
///
/// Per subject there is a latent identity vector; each modality observes a
/// fixed random linear map of a correlation-interpolated copy of it plus
/// per-sample Gaussian noise. A distorted sample is replaced by pure
/// standard normal noise carrying no identity information. When the
/// distortion rates sum to at most 1, the distorted sample subsets are
/// disjoint across modalities (each modality claims its own slice of one
/// shared uniform draw); the marginal rate is exact either way.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(ModalityPool, ModalityPool)> {
    spec.validate()?;
    let latent = spec.latent_dim;
    // Fixed per-modality observation maps, row-major dim x latent, shared
    // by both pools.
    let maps: Vec<Vec<f64>> = spec
        .modalities
        .iter()
        .enumerate()
        .map(|(m, ms)| {
            let mut rng = rng_from(spec.seed, &[tags::SYNTH_MAP, m as u64]);
            let scale = 1.0 / (latent as f64).sqrt();
            (0..ms.dim * latent)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let rho = spec.cross_modality_correlation;
    let total_rate: f64 = spec.modalities.iter().map(|m| m.distortion_rate).sum();
    let disjoint = total_rate <= 1.0;
    let rate_prefix: Vec<f64> = spec
        .modalities
        .iter()
        .scan(0.0, |acc, m| {
            let start = *acc;
            *acc += m.distortion_rate;
            Some(start)
        })
        .collect();

    let build_pool = |pool_tag: u64| -> Result<ModalityPool> {
        let mut pool = ModalityPool::new();
        for subject in 0..spec.num_subjects as i64 {
            let stag = subject_tag(subject);
            let z: Vec<f64> = standard_normal_vec(
                &mut rng_from(spec.seed, &[tags::SYNTH_LATENT, stag]),
                latent,
            );
            // Shared uniforms that slice distortion disjointly across
            // modalities. Only consumed in the disjoint regime.
            let mut u_rng = rng_from(spec.seed, &[tags::SYNTH_DISTORT, pool_tag, stag]);
            let shared_u: Vec<f64> = (0..spec.samples_per_subject_modality)
                .map(|_| u_rng.random::<f64>())
                .collect();

            for (m, ms) in spec.modalities.iter().enumerate() {
                let w: Vec<f64> = standard_normal_vec(
                    &mut rng_from(spec.seed, &[tags::SYNTH_PRIVATE_LATENT, stag, m as u64]),
                    latent,
                );
                let zm: Vec<f64> = z
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b)
                    .collect();
                let map = &maps[m];
                let mean: Vec<f64> = (0..ms.dim)
                    .map(|r| {
                        map[r * latent..(r + 1) * latent]
                            .iter()
                            .zip(&zm)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();

                let mut srng =
                    rng_from(spec.seed, &[tags::SYNTH_SAMPLE, pool_tag, stag, m as u64]);
                let name = SynthSpec::modality_name(m);
                for i in 0..spec.samples_per_subject_modality {
                    let distorted = if ms.distortion_rate == 0.0 {
                        false
                    } else if disjoint {
                        let u = shared_u[i];
                        u >= rate_prefix[m] && u < rate_prefix[m] + ms.distortion_rate
                    } else {
                        srng.random::<f64>() < ms.distortion_rate
                    };
                    let eps = standard_normal_vec(&mut srng, ms.dim);
                    let features: Vec<f64> = if distorted {
                        eps
                    } else {
                        mean.iter()
                            .zip(&eps)
                            .map(|(mu, e)| mu + ms.noise_std * e)
                            .collect()
                    };
                    pool.insert(subject, &name, features)?;
                }
            }
        }
        Ok(pool)
    };

    Ok((build_pool(tags::TRAIN_POOL)?, build_pool(tags::TEST_POOL)?))
}

/// Composes `sets_per_subject` multimodal samples per subject by drawing
/// one vector per modality uniformly, with replacement, from that
/// subject's pool. Output is ordered by subject, then set index; vectors
/// within a sample follow sorted modality-name order.
pub fn compose_sets(
    pool: &ModalityPool,
    sets_per_subject: usize,
    seed: u64,
) -> Result<Vec<MultimodalSample>> {
    if sets_per_subject == 0 {
        return Err(Error::invalid("sets_per_subject must be >= 1"));
    }
    pool.validate_complete()?;
    let modalities = pool.modality_names();
    let mut out = Vec::with_capacity(pool.num_subjects() * sets_per_subject);
    for subject in pool.subjects() {
        let mut rng = rng_from(seed, &[tags::COMPOSE, subject_tag(subject)]);
        for _ in 0..sets_per_subject {
            let modality_vectors = modalities
                .iter()
                .map(|name| {
                    let samples = pool.samples(subject, name).ok_or_else(|| {
                        Error::Data(format!(
                            "subject {subject} has no samples for modality {name:?}"
                        ))
                    })?;
                    let idx = rng.random_range(0..samples.len());
                    Ok(samples[idx].clone())
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(MultimodalSample {
                subject_id: subject,
                modality_vectors,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    subject: i64,
    modality: String,
    features: Vec<f64>,
}

/// Reads a pool from JSON-lines: one {"subject", "modality", "features"}
/// object per line. Blank lines are skipped; an empty pool is an error.
pub fn load_embeddings(path: &Path) -> Result<ModalityPool> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut pool = ModalityPool::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EmbeddingRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        pool.insert(record.subject, &record.modality, record.features)
            .map_err(|e| match e {
                // Keep schema/value categories but point at the line.
                Error::Schema(m) => Error::Schema(format!("line {line_no}: {m}")),
                Error::Value(m) => Error::Value(format!("line {line_no}: {m}")),
                other => other,
            })?;
    }
    if pool.is_empty() {
        return Err(Error::Data(format!(
            "embedding file {} contains no entries",
            path.display()
        )));
    }
    Ok(pool)
}

/// Writes a pool as JSON-lines, subjects and modalities in sorted order,
/// samples in insertion order. `load_embeddings` inverts this exactly.
pub fn save_embeddings(pool: &ModalityPool, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    for subject in pool.subjects() {
        for modality in pool.modality_names() {
            for features in pool.samples(subject, &modality).unwrap_or(&[]) {
                let record = EmbeddingRecord {
                    subject,
                    modality: modality.clone(),
                    features: features.clone(),
                };
                let mut line = serde_json::to_string(&record)
                    .map_err(|e| Error::Data(format!("serializing embedding: {e}")))?;
                line.push('\n');
                writer.write_all(line.as_bytes())?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// Renders the pool to the JSON-lines text without touching the
/// filesystem. Used by determinism checks.
pub fn embeddings_to_string(pool: &ModalityPool) -> Result<String> {
    let mut out = String::new();
    for subject in pool.subjects() {
        for modality in pool.modality_names() {
            for features in pool.samples(subject, &modality).unwrap_or(&[]) {
                let record = EmbeddingRecord {
                    subject,
                    modality: modality.clone(),
                    features: features.clone(),
                };
                let line = serde_json::to_string(&record)
                    .map_err(|e| Error::Data(format!("serializing embedding: {e}")))?;
                let _ = writeln!(out, "{line}");
            }
        }
    }
    Ok(out)
}
