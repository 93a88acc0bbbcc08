//! Rank-one evaluation, score-level fusion baselines, and the experiment
//! runner that trains every (method, modality subset) cell over seeded
//! repetitions and reports an accuracy table.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::{
    DataSource, ExperimentConfig, METHOD_CNN_MAJOR, METHOD_CNN_SUM, METHOD_UNIMODAL,
};
use crate::data::{compose_sets, generate_synthetic, load_embeddings, ModalityPool};
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::nn::{argmax, train_two_step, ModalityNetwork, Model, TrainSample};
use crate::rng::{derive_seed, tags};

/// Probability outputs of one model over a shared test-sample list.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    /// probs[sample][class]
    pub probs: Vec<Vec<f64>>,
    pub truth: Vec<usize>,
}

impl ScoreMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.truth.len() {
            return Err(Error::dim("score rows", self.truth.len(), self.probs.len()));
        }
        for row in &self.probs {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Numerical(format!(
                    "probability row sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn accuracy(&self) -> Result<f64> {
        let predictions: Vec<usize> = self.probs.iter().map(|p| argmax(p)).collect();
        rank_one_accuracy(&predictions, &self.truth)
    }
}

/// Fraction of samples whose predicted label equals the truth.
pub fn rank_one_accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("rank-one accuracy over an empty list"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::dim("predictions", truth.len(), predictions.len()));
    }
    let correct = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

fn check_aligned(per_modality_probs: &[&[f64]]) -> Result<usize> {
    let first = per_modality_probs
        .first()
        .ok_or_else(|| Error::invalid("score fusion needs at least one modality"))?;
    for probs in per_modality_probs {
        if probs.len() != first.len() {
            return Err(Error::dim("class dims", first.len(), probs.len()));
        }
    }
    if first.is_empty() {
        return Err(Error::invalid("score fusion over zero classes"));
    }
    Ok(first.len())
}

/// Sum rule: argmax of the element-wise sum of probability vectors.
pub fn fuse_scores_sum(per_modality_probs: &[&[f64]]) -> Result<usize> {
    let classes = check_aligned(per_modality_probs)?;
    let mut sums = vec![0.0; classes];
    for probs in per_modality_probs {
        for (s, &p) in sums.iter_mut().zip(*probs) {
            *s += p;
        }
    }
    Ok(argmax(&sums))
}

/// Majority rule: plurality vote over per-modality argmax labels. Ties
/// break by the highest summed probability among tied labels, then by the
/// lowest class index.
pub fn fuse_scores_majority(per_modality_probs: &[&[f64]]) -> Result<usize> {
    let classes = check_aligned(per_modality_probs)?;
    let mut counts = vec![0usize; classes];
    for probs in per_modality_probs {
        counts[argmax(probs)] += 1;
    }
    let top = *counts.iter().max().unwrap();
    let mut winner = None;
    let mut winner_score = f64::NEG_INFINITY;
    for (label, &count) in counts.iter().enumerate() {
        if count != top {
            continue;
        }
        let score: f64 = per_modality_probs.iter().map(|p| p[label]).sum();
        // Strict comparison keeps the lowest index on exact score ties.
        if score > winner_score {
            winner = Some(label);
            winner_score = score;
        }
    }
    Ok(winner.unwrap())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub subset: Vec<usize>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub n_test: usize,
    pub repetitions: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

/// Modality subset label: indices joined with '+', e.g. "0+1+2".
pub fn subset_label(subset: &[usize]) -> String {
    subset
        .iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,subset,accuracy_mean,accuracy_std,n_test,repetitions\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.method,
                subset_label(&row.subset),
                row.accuracy_mean,
                row.accuracy_std,
                row.n_test,
                row.repetitions
            ));
        }
        out
    }

    /// Plain-text rendering for terminals.
    pub fn render(&self) -> String {
        let headers = ["method", "subset", "acc_mean", "acc_std", "n_test", "reps"];
        let rows: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    subset_label(&r.subset),
                    format!("{:.4}", r.accuracy_mean),
                    format!("{:.4}", r.accuracy_std),
                    r.n_test.to_string(),
                    r.repetitions.to_string(),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let format_line = |cells: &[String], widths: &[usize]| -> String {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let header_cells: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
        out.push_str(&format_line(&header_cells, &widths));
        out.push('\n');
        for row in &rows {
            out.push_str(&format_line(row, &widths));
            out.push('\n');
        }
        out
    }
}

/// One repetition's composed data: class-indexed train and test samples
/// with full modality vectors; cells select their subset's columns.
struct RepBundle {
    dims: Vec<usize>,
    num_classes: usize,
    train: Vec<(usize, Vec<Vec<f64>>)>,
    test: Vec<(usize, Vec<Vec<f64>>)>,
}

impl RepBundle {
    fn truth(&self) -> Vec<usize> {
        self.test.iter().map(|(label, _)| *label).collect()
    }
}

fn class_index(subjects: &[i64], subject: i64) -> Result<usize> {
    subjects
        .binary_search(&subject)
        .map_err(|_| Error::Data(format!("subject {subject} missing from the training pool")))
}

fn build_bundle(config: &ExperimentConfig, base: Option<&(ModalityPool, ModalityPool)>, rep: usize) -> Result<RepBundle> {
    let rep_seed = derive_seed(config.seed, &[tags::EXPERIMENT_REP, rep as u64]);
    let generated;
    let (train_pool, test_pool) = match (&config.data, base) {
        (DataSource::Synthetic { spec }, _) => {
            let mut spec = spec.clone();
            spec.seed = derive_seed(rep_seed, &[tags::EXPERIMENT_DATA]);
            generated = generate_synthetic(&spec)?;
            (&generated.0, &generated.1)
        }
        (DataSource::Embeddings { .. }, Some((train, test))) => (train, test),
        (DataSource::Embeddings { .. }, None) => {
            return Err(Error::Data("embedding pools were not loaded".into()));
        }
    };
    if train_pool.schema() != test_pool.schema() {
        return Err(Error::Schema(
            "train and test pools disagree on modalities or dims".into(),
        ));
    }
    let subjects = train_pool.subjects();
    if test_pool.subjects() != subjects {
        return Err(Error::Schema(
            "train and test pools cover different subjects".into(),
        ));
    }
    let train_sets = compose_sets(
        train_pool,
        config.sets_per_subject,
        derive_seed(rep_seed, &[tags::EXPERIMENT_COMPOSE_TRAIN]),
    )?;
    let test_sets = compose_sets(
        test_pool,
        config.sets_per_subject_test,
        derive_seed(rep_seed, &[tags::EXPERIMENT_COMPOSE_TEST]),
    )?;
    let to_labeled = |sets: Vec<crate::data::MultimodalSample>| -> Result<Vec<(usize, Vec<Vec<f64>>)>> {
        sets.into_iter()
            .map(|s| Ok((class_index(&subjects, s.subject_id)?, s.modality_vectors)))
            .collect()
    };
    Ok(RepBundle {
        dims: train_pool.schema().dims(),
        num_classes: subjects.len(),
        train: to_labeled(train_sets)?,
        test: to_labeled(test_sets)?,
    })
}

/// Trains one model over the given modality subset and returns it with
/// its test probabilities. The cell seed drives sketch params, weight
/// init, and shuffling through disjoint derivation paths. `pretrained`
/// supplies per-modality networks to start from; the two-step schedule
/// then freezes those networks while the head learns, mirroring the
/// unimodal-pretrain-then-fuse protocol.
fn train_cell(
    config: &ExperimentConfig,
    bundle: &RepBundle,
    subset: &[usize],
    fusion_spec: &FusionSpec,
    cell_seed: u64,
    pretrained: Option<&BTreeMap<usize, ModalityNetwork>>,
) -> Result<(Model, ScoreMatrix)> {
    let input_dims: Vec<usize> = subset.iter().map(|&m| bundle.dims[m]).collect();
    let mut spec = fusion_spec.clone();
    spec.seed = cell_seed;
    let mut model = Model::init(
        &input_dims,
        &config.model.hidden_dims,
        config.model.embedding_dim,
        config.model.joint_dim,
        bundle.num_classes,
        spec,
        cell_seed,
    )?;
    if let Some(nets) = pretrained {
        for (i, &m) in subset.iter().enumerate() {
            let net = nets.get(&m).ok_or_else(|| {
                Error::Data(format!("no pretrained network for modality {m}"))
            })?;
            model.networks[i] = net.clone();
        }
    }
    let pick = |vectors: &[Vec<f64>]| -> Vec<Vec<f64>> {
        subset.iter().map(|&m| vectors[m].clone()).collect()
    };
    let samples: Vec<TrainSample> = bundle
        .train
        .iter()
        .map(|(label, vectors)| TrainSample {
            inputs: pick(vectors),
            label: *label,
        })
        .collect();
    let train_config = config.train.clone().with_seed(cell_seed);
    train_two_step(&mut model, &samples, &train_config)?;
    let probs = bundle
        .test
        .iter()
        .map(|(_, vectors)| model.predict_proba(&pick(vectors)))
        .collect::<Result<Vec<_>>>()?;
    let matrix = ScoreMatrix {
        probs,
        truth: bundle.truth(),
    };
    Ok((model, matrix))
}

/// Sample standard deviation; zero for a single repetition.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the full comparison grid. `threads` caps the worker pool; 0 means
/// the library default. Results are keyed by (repetition, cell) with all
/// seeds derived per cell, so the table is identical for any thread count.
pub fn run_experiment(config: &ExperimentConfig, threads: usize) -> Result<ResultTable> {
    config.validate()?;
    let grid = config.grid_or_default();
    grid.validate()?;

    let base_pools = match &config.data {
        DataSource::Embeddings {
            train_path,
            test_path,
        } => Some((load_embeddings(train_path)?, load_embeddings(test_path)?)),
        DataSource::Synthetic { .. } => None,
    };
    let num_modalities = match &config.data {
        DataSource::Synthetic { spec } => spec.modalities.len(),
        DataSource::Embeddings { .. } => {
            base_pools.as_ref().unwrap().0.schema().modalities.len()
        }
    };

    // Canonical subset order: size, then lexicographic.
    let mut subsets: Vec<Vec<usize>> = match &grid.subsets {
        None => vec![(0..num_modalities).collect()],
        Some(list) => list
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.sort_unstable();
                if let Some(&max) = s.last() {
                    if max >= num_modalities {
                        return Err(Error::Config(format!(
                            "subset {s:?} references modality {max}, but the data has {num_modalities} modalities"
                        )));
                    }
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets.dedup();

    // Unimodal models serve three roles: the unimodal rows, the inputs
    // to the score-fusion baselines, and the pretrained modality
    // networks every fused model starts from.
    let union_modalities: Vec<usize> = {
        let mut all: Vec<usize> = subsets.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    };

    let mut fused_jobs: Vec<(usize, usize, usize)> = Vec::new();
    for rep in 0..grid.repetitions {
        for (mi, method) in grid.methods.iter().enumerate() {
            if method.fusion.is_some() {
                for si in 0..subsets.len() {
                    fused_jobs.push((rep, mi, si));
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Data(format!("building worker pool: {e}")))?;

    let unimodal_spec = FusionSpec::concat();
    let (unimodal, fused): (
        BTreeMap<(usize, usize), (ModalityNetwork, ScoreMatrix)>,
        BTreeMap<(usize, usize, usize), ScoreMatrix>,
    ) = pool.install(|| {
        let bundles = (0..grid.repetitions)
            .into_par_iter()
            .map(|rep| {
                build_bundle(config, base_pools.as_ref(), rep).map_err(|e| Error::Cell {
                    cell: format!("repetition {rep} data"),
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let unimodal_jobs: Vec<(usize, usize)> = (0..grid.repetitions)
            .flat_map(|rep| union_modalities.iter().map(move |&m| (rep, m)))
            .collect();
        let unimodal: BTreeMap<(usize, usize), (ModalityNetwork, ScoreMatrix)> = unimodal_jobs
            .into_par_iter()
            .map(|(rep, m)| {
                let rep_seed = derive_seed(config.seed, &[tags::EXPERIMENT_REP, rep as u64]);
                train_cell(
                    config,
                    &bundles[rep],
                    &[m],
                    &unimodal_spec,
                    derive_seed(rep_seed, &[tags::EXPERIMENT_UNIMODAL, m as u64]),
                    None,
                )
                .map(|(model, matrix)| {
                    let net = model.networks.into_iter().next().expect("one modality");
                    ((rep, m), (net, matrix))
                })
                .map_err(|e| Error::Cell {
                    cell: format!("repetition {rep}, unimodal modality {m}"),
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;

        let per_rep_nets: Vec<BTreeMap<usize, ModalityNetwork>> = (0..grid.repetitions)
            .map(|rep| {
                union_modalities
                    .iter()
                    .map(|&m| (m, unimodal[&(rep, m)].0.clone()))
                    .collect()
            })
            .collect();

        let fused: BTreeMap<(usize, usize, usize), ScoreMatrix> = fused_jobs
            .into_par_iter()
            .map(|(rep, mi, si)| {
                let rep_seed = derive_seed(config.seed, &[tags::EXPERIMENT_REP, rep as u64]);
                let spec = grid.methods[mi].fusion.as_ref().unwrap();
                train_cell(
                    config,
                    &bundles[rep],
                    &subsets[si],
                    spec,
                    derive_seed(rep_seed, &[tags::EXPERIMENT_METHOD, mi as u64, si as u64]),
                    Some(&per_rep_nets[rep]),
                )
                .map(|(_, matrix)| ((rep, mi, si), matrix))
                .map_err(|e| Error::Cell {
                    cell: format!(
                        "repetition {rep}, method {:?}, subset {}",
                        grid.methods[mi].name,
                        subset_label(&subsets[si])
                    ),
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;

        Ok::<_, Error>((unimodal, fused))
    })?;

    let n_test = config.sets_per_subject_test
        * match &config.data {
            DataSource::Synthetic { spec } => spec.num_subjects,
            DataSource::Embeddings { .. } => base_pools.as_ref().unwrap().0.num_subjects(),
        };

    let mut rows = Vec::new();
    for (mi, method) in grid.methods.iter().enumerate() {
        match method.name.as_str() {
            METHOD_UNIMODAL => {
                for &m in &union_modalities {
                    let accs = (0..grid.repetitions)
                        .map(|rep| unimodal[&(rep, m)].1.accuracy())
                        .collect::<Result<Vec<_>>>()?;
                    let (mean, std) = mean_std(&accs);
                    rows.push(ResultRow {
                        method: method.name.clone(),
                        subset: vec![m],
                        accuracy_mean: mean,
                        accuracy_std: std,
                        n_test,
                        repetitions: grid.repetitions,
                    });
                }
            }
            METHOD_CNN_SUM | METHOD_CNN_MAJOR => {
                for subset in &subsets {
                    let accs = (0..grid.repetitions)
                        .map(|rep| {
                            let matrices: Vec<&ScoreMatrix> = subset
                                .iter()
                                .map(|&m| &unimodal[&(rep, m)].1)
                                .collect();
                            let truth = &matrices[0].truth;
                            let predictions = (0..truth.len())
                                .map(|i| {
                                    let per_modality: Vec<&[f64]> = matrices
                                        .iter()
                                        .map(|mat| mat.probs[i].as_slice())
                                        .collect();
                                    if method.name == METHOD_CNN_SUM {
                                        fuse_scores_sum(&per_modality)
                                    } else {
                                        fuse_scores_majority(&per_modality)
                                    }
                                })
                                .collect::<Result<Vec<_>>>()?;
                            rank_one_accuracy(&predictions, truth)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let (mean, std) = mean_std(&accs);
                    rows.push(ResultRow {
                        method: method.name.clone(),
                        subset: subset.clone(),
                        accuracy_mean: mean,
                        accuracy_std: std,
                        n_test,
                        repetitions: grid.repetitions,
                    });
                }
            }
            _ => {
                for (si, subset) in subsets.iter().enumerate() {
                    let accs = (0..grid.repetitions)
                        .map(|rep| fused[&(rep, mi, si)].accuracy())
                        .collect::<Result<Vec<_>>>()?;
                    let (mean, std) = mean_std(&accs);
                    rows.push(ResultRow {
                        method: method.name.clone(),
                        subset: subset.clone(),
                        accuracy_mean: mean,
                        accuracy_std: std,
                        n_test,
                        repetitions: grid.repetitions,
                    });
                }
            }
        }
    }
    Ok(ResultTable { rows })
}
