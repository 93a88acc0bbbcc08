//! Python bindings for the fusionsketch core: sketch primitives, fusion
//! operators, and the training/experiment entry points. Thin wrappers only;
//! all math lives in the core crate.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fusionsketch::checkpoint::Checkpoint;
use fusionsketch::config::{DataSource, ExperimentConfig};
use fusionsketch::data::{compose_sets, generate_synthetic, load_embeddings};
use fusionsketch::eval;
use fusionsketch::fusion;
use fusionsketch::nn::{train_two_step, Model, TrainSample};
use fusionsketch::rng::{derive_seed, tags};
use fusionsketch::sketch;
use fusionsketch::Error;

/// Usage errors (bad arguments, dimension mismatches, malformed configs)
/// become ValueError; everything else is a RuntimeError.
fn py_err(e: Error) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Hashed projection shared by one (subset, modality) slot: bucket indices
/// and signs drawn deterministically from the seed.
#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct CountSketchParams {
    inner: sketch::CountSketchParams,
}

#[pymethods]
impl CountSketchParams {
    #[new]
    fn new(input_dim: usize, sketch_dim: usize, seed: u64) -> PyResult<Self> {
        Ok(CountSketchParams {
            inner: sketch::CountSketchParams::new(input_dim, sketch_dim, seed)
                .map_err(py_err)?,
        })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn sketch_dim(&self) -> usize {
        self.inner.sketch_dim()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    fn buckets(&self) -> Vec<usize> {
        self.inner.buckets().to_vec()
    }

    fn signs(&self) -> Vec<i8> {
        self.inner.signs().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "CountSketchParams(input_dim={}, sketch_dim={}, seed={})",
            self.inner.input_dim(),
            self.inner.sketch_dim(),
            self.inner.seed()
        )
    }
}

/// Declarative fusion description; bind to input dimensions with
/// FusionOperator to actually fuse.
#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct FusionSpec {
    inner: fusion::FusionSpec,
}

#[pymethods]
impl FusionSpec {
    #[staticmethod]
    fn concat() -> Self {
        FusionSpec {
            inner: fusion::FusionSpec::concat(),
        }
    }

    #[staticmethod]
    fn bilinear() -> Self {
        FusionSpec {
            inner: fusion::FusionSpec::bilinear(),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (sketch_dim, seed = 0))]
    fn tensor_sketch(sketch_dim: usize, seed: u64) -> Self {
        FusionSpec {
            inner: fusion::FusionSpec::tensor_sketch(sketch_dim, seed),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (sketch_dim, seed = 0))]
    fn generalized(sketch_dim: usize, seed: u64) -> Self {
        FusionSpec {
            inner: fusion::FusionSpec::generalized(sketch_dim, seed),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (sketch_dim, subsets, seed = 0))]
    fn generalized_with_subsets(sketch_dim: usize, subsets: Vec<Vec<usize>>, seed: u64) -> Self {
        FusionSpec {
            inner: fusion::FusionSpec::generalized_with_subsets(sketch_dim, subsets, seed),
        }
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.name()
    }

    #[getter]
    fn sketch_dim(&self) -> usize {
        self.inner.sketch_dim
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn subsets(&self) -> Option<Vec<Vec<usize>>> {
        self.inner.subsets.clone()
    }

    fn __repr__(&self) -> String {
        format!("FusionSpec(kind={})", self.inner.kind.name())
    }
}

/// One contiguous block of a fused vector: what produced it and where it
/// sits. kind is "single", "subset_sketch", or "bilinear_product"; indices
/// lists the modalities involved.
#[pyclass(frozen)]
struct Segment {
    #[pyo3(get)]
    kind: String,
    #[pyo3(get)]
    indices: Vec<usize>,
    #[pyo3(get)]
    offset: usize,
    #[pyo3(get)]
    len: usize,
}

#[pymethods]
impl Segment {
    fn __repr__(&self) -> String {
        format!(
            "Segment(kind={}, indices={:?}, offset={}, len={})",
            self.kind, self.indices, self.offset, self.len
        )
    }
}

fn segment_of(s: &fusion::Segment) -> Segment {
    let (kind, indices) = match &s.kind {
        fusion::SegmentKind::Single { modality } => ("single", vec![*modality]),
        fusion::SegmentKind::SubsetSketch { subset } => ("subset_sketch", subset.clone()),
        fusion::SegmentKind::BilinearProduct { sources } => {
            ("bilinear_product", sources.clone())
        }
    };
    Segment {
        kind: kind.to_string(),
        indices,
        offset: s.offset,
        len: s.len,
    }
}

/// Fused feature vector with its layout descriptors.
#[pyclass(frozen)]
struct FusedVector {
    #[pyo3(get)]
    values: Vec<f64>,
    inner_layout: Vec<fusion::Segment>,
}

#[pymethods]
impl FusedVector {
    #[getter]
    fn layout(&self) -> Vec<Segment> {
        self.inner_layout.iter().map(segment_of).collect()
    }

    fn __len__(&self) -> usize {
        self.values.len()
    }
}

/// A FusionSpec bound to concrete input dimensions. fuse and backward are
/// pure and deterministic for a given construction.
#[pyclass(frozen)]
struct FusionOperator {
    inner: fusion::FusionOperator,
}

#[pymethods]
impl FusionOperator {
    #[new]
    fn new(spec: FusionSpec, input_dims: Vec<usize>) -> PyResult<Self> {
        Ok(FusionOperator {
            inner: fusion::FusionOperator::new(spec.inner, &input_dims).map_err(py_err)?,
        })
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn input_dims(&self) -> Vec<usize> {
        self.inner.input_dims().to_vec()
    }

    #[getter]
    fn subsets(&self) -> Vec<Vec<usize>> {
        self.inner.subsets().to_vec()
    }

    fn fuse(&self, xs: Vec<Vec<f64>>) -> PyResult<FusedVector> {
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let fused = self.inner.fuse(&refs).map_err(py_err)?;
        Ok(FusedVector {
            values: fused.values,
            inner_layout: fused.layout,
        })
    }

    /// Gradients of a scalar loss w.r.t. every input, given the gradient
    /// w.r.t. the fused output.
    fn backward(&self, grad_out: Vec<f64>, xs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        self.inner.backward(&grad_out, &refs).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "FusionOperator(kind={}, input_dims={:?}, output_dim={})",
            self.inner.spec().kind.name(),
            self.inner.input_dims(),
            self.inner.output_dim()
        )
    }
}

#[pyfunction]
fn count_sketch(x: Vec<f64>, params: &CountSketchParams) -> PyResult<Vec<f64>> {
    sketch::count_sketch(&x, &params.inner).map_err(py_err)
}

#[pyfunction]
fn count_sketch_backward(grad_y: Vec<f64>, params: &CountSketchParams) -> PyResult<Vec<f64>> {
    sketch::count_sketch_backward(&grad_y, &params.inner).map_err(py_err)
}

#[pyfunction]
fn circular_convolve(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    sketch::circular_convolve(&a, &b).map_err(py_err)
}

fn unwrap_params(params: Vec<CountSketchParams>) -> Vec<sketch::CountSketchParams> {
    params.into_iter().map(|p| p.inner).collect()
}

#[pyfunction]
fn tensor_sketch(xs: Vec<Vec<f64>>, params: Vec<CountSketchParams>) -> PyResult<Vec<f64>> {
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    sketch::tensor_sketch(&refs, &unwrap_params(params)).map_err(py_err)
}

#[pyfunction]
fn tensor_sketch_backward(
    grad_y: Vec<f64>,
    xs: Vec<Vec<f64>>,
    params: Vec<CountSketchParams>,
    modality_index: usize,
) -> PyResult<Vec<f64>> {
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    sketch::tensor_sketch_backward(&grad_y, &refs, &unwrap_params(params), modality_index)
        .map_err(py_err)
}

#[pyfunction]
fn tensor_sketch_backward_all(
    grad_y: Vec<f64>,
    xs: Vec<Vec<f64>>,
    params: Vec<CountSketchParams>,
) -> PyResult<Vec<Vec<f64>>> {
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    sketch::tensor_sketch_backward_all(&grad_y, &refs, &unwrap_params(params)).map_err(py_err)
}

fn parse_config(config_json: &str) -> PyResult<ExperimentConfig> {
    let config: ExperimentConfig = serde_json::from_str(config_json)
        .map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    config.validate().map_err(py_err)?;
    Ok(config)
}

/// Runs the full method-comparison experiment described by the JSON config
/// and returns the results table as CSV. threads=0 picks a default.
#[pyfunction]
#[pyo3(signature = (config_json, threads = 0))]
fn run_experiment(config_json: &str, threads: usize) -> PyResult<String> {
    let config = parse_config(config_json)?;
    let table = eval::run_experiment(&config, threads).map_err(py_err)?;
    Ok(table.to_csv())
}

/// Trains one model on the config's data source and returns
/// (checkpoint_json, metrics_json). Mirrors the CLI train command without
/// touching the filesystem for outputs.
#[pyfunction]
fn train(config_json: &str) -> PyResult<(String, String)> {
    let config = parse_config(config_json)?;

    let train_pool = match &config.data {
        DataSource::Synthetic { spec } => generate_synthetic(spec).map_err(py_err)?.0,
        DataSource::Embeddings { train_path, .. } => {
            load_embeddings(train_path).map_err(py_err)?
        }
    };
    train_pool.validate_complete().map_err(py_err)?;
    let subjects = train_pool.subjects();
    let sets = compose_sets(
        &train_pool,
        config.sets_per_subject,
        derive_seed(config.seed, &[tags::EXPERIMENT_COMPOSE_TRAIN]),
    )
    .map_err(py_err)?;
    let samples: Vec<TrainSample> = sets
        .into_iter()
        .map(|s| {
            let label = subjects
                .binary_search(&s.subject_id)
                .expect("composed subject comes from the pool");
            TrainSample {
                inputs: s.modality_vectors,
                label,
            }
        })
        .collect();

    let dims = train_pool.schema().dims();
    let mut model = Model::init(
        &dims,
        &config.model.hidden_dims,
        config.model.embedding_dim,
        config.model.joint_dim,
        subjects.len(),
        config.fusion.clone(),
        config.seed,
    )
    .map_err(py_err)?;
    let train_config = config.train.clone().with_seed(config.seed);
    let metrics = train_two_step(&mut model, &samples, &train_config).map_err(py_err)?;

    let checkpoint = Checkpoint::from_model(&model, train_pool.schema(), &subjects)
        .to_json()
        .map_err(py_err)?;
    let metrics_json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| PyRuntimeError::new_err(format!("serializing metrics: {e}")))?;
    Ok((checkpoint, metrics_json))
}

#[pymodule]
fn fusionsketch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<CountSketchParams>()?;
    m.add_class::<FusionSpec>()?;
    m.add_class::<FusionOperator>()?;
    m.add_class::<FusedVector>()?;
    m.add_class::<Segment>()?;
    m.add_function(wrap_pyfunction!(count_sketch, m)?)?;
    m.add_function(wrap_pyfunction!(count_sketch_backward, m)?)?;
    m.add_function(wrap_pyfunction!(circular_convolve, m)?)?;
    m.add_function(wrap_pyfunction!(tensor_sketch, m)?)?;
    m.add_function(wrap_pyfunction!(tensor_sketch_backward, m)?)?;
    m.add_function(wrap_pyfunction!(tensor_sketch_backward_all, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
