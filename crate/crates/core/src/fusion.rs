//! Fusion operators over modality embedding vectors.
//!
//! Four kinds are supported: plain concatenation, explicit bilinear
//! (vectorized outer product, folded left to right for more than two
//! modalities), tensor sketch over all modalities, and the generalized
//! compact bilinear composition that concatenates every single modality
//! with tensor sketches of configured modality subsets.
//!
//! A [`FusionSpec`] is the declarative description that lives in configs
//! and checkpoints; a [`FusionOperator`] is the spec bound to concrete
//! input dimensions, holding the materialized sketch parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tags};
use crate::sketch::{tensor_sketch, tensor_sketch_backward_all, CountSketchParams};

/// Hard ceiling on the explicit bilinear output size. The whole point of
/// the compact operators is avoiding this blowup; past the cap we fail
/// loudly instead of exhausting memory.
pub const BILINEAR_CAP: usize = 1 << 26;

pub const DEFAULT_SKETCH_DIM: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Concat,
    Bilinear,
    TensorSketch,
    GeneralizedCompactBilinear,
}

impl FusionKind {
    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::Bilinear => "bilinear",
            FusionKind::TensorSketch => "tensor_sketch",
            FusionKind::GeneralizedCompactBilinear => "generalized_compact_bilinear",
        }
    }
}

/// Declarative description of a fusion operator.
///
/// `subsets` is only consulted by the generalized kind: `None` means
/// "all subsets of size 2..=n", an explicit list is validated and brought
/// to canonical order, and an explicit empty list degenerates to plain
/// concatenation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    pub kind: FusionKind,
    #[serde(default = "default_sketch_dim")]
    pub sketch_dim: usize,
    #[serde(default)]
    pub subsets: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_sketch_dim() -> usize {
    DEFAULT_SKETCH_DIM
}

impl FusionSpec {
    pub fn concat() -> Self {
        FusionSpec {
            kind: FusionKind::Concat,
            sketch_dim: DEFAULT_SKETCH_DIM,
            subsets: None,
            seed: 0,
        }
    }

    pub fn bilinear() -> Self {
        FusionSpec {
            kind: FusionKind::Bilinear,
            sketch_dim: DEFAULT_SKETCH_DIM,
            subsets: None,
            seed: 0,
        }
    }

    pub fn tensor_sketch(sketch_dim: usize, seed: u64) -> Self {
        FusionSpec {
            kind: FusionKind::TensorSketch,
            sketch_dim,
            subsets: None,
            seed,
        }
    }

    /// Generalized composition over all subsets of size 2..=n.
    pub fn generalized(sketch_dim: usize, seed: u64) -> Self {
        FusionSpec {
            kind: FusionKind::GeneralizedCompactBilinear,
            sketch_dim,
            subsets: None,
            seed,
        }
    }

    /// Generalized composition restricted to the given subsets.
    pub fn generalized_with_subsets(
        sketch_dim: usize,
        subsets: Vec<Vec<usize>>,
        seed: u64,
    ) -> Self {
        FusionSpec {
            kind: FusionKind::GeneralizedCompactBilinear,
            sketch_dim,
            subsets: Some(subsets),
            seed,
        }
    }

    /// Sketch-bearing subsets in canonical order (size, then lexicographic)
    /// for `n` modalities. Empty for concat and bilinear.
    pub fn resolve_subsets(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        match self.kind {
            FusionKind::Concat | FusionKind::Bilinear => Ok(Vec::new()),
            FusionKind::TensorSketch => {
                if n < 2 {
                    return Err(Error::invalid(
                        "tensor sketch fusion needs at least two modalities",
                    ));
                }
                Ok(vec![(0..n).collect()])
            }
            FusionKind::GeneralizedCompactBilinear => match &self.subsets {
                None => Ok(all_subsets(n)),
                Some(list) => canonicalize_subsets(list, n),
            },
        }
    }

    /// Total fused length for the given input dimensions.
    pub fn output_dim(&self, input_dims: &[usize]) -> Result<usize> {
        if input_dims.is_empty() {
            return Err(Error::invalid("fusion needs at least one input"));
        }
        if input_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("input dimensions must be >= 1"));
        }
        match self.kind {
            FusionKind::Concat => Ok(input_dims.iter().sum()),
            FusionKind::Bilinear => {
                let mut total: usize = 1;
                for &d in input_dims {
                    total = total.checked_mul(d).ok_or_else(|| {
                        Error::Capacity("bilinear output size overflows usize".into())
                    })?;
                }
                Ok(total)
            }
            FusionKind::TensorSketch => {
                self.check_sketch_dim()?;
                Ok(self.sketch_dim)
            }
            FusionKind::GeneralizedCompactBilinear => {
                self.check_sketch_dim()?;
                let singles: usize = input_dims.iter().sum();
                let subsets = self.resolve_subsets(input_dims.len())?;
                Ok(singles + subsets.len() * self.sketch_dim)
            }
        }
    }

    fn check_sketch_dim(&self) -> Result<()> {
        if self.sketch_dim == 0 {
            return Err(Error::Config("sketch_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// All index subsets of size 2..=n, in size-then-lexicographic order.
fn all_subsets(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for size in 2..=n {
        let mut current: Vec<usize> = (0..size).collect();
        'combos: loop {
            out.push(current.clone());
            // Advance to the next combination: bump the rightmost index
            // that still has room, and reset everything after it.
            let mut i = size;
            while i > 0 {
                i -= 1;
                if current[i] < i + n - size {
                    current[i] += 1;
                    for j in i + 1..size {
                        current[j] = current[j - 1] + 1;
                    }
                    continue 'combos;
                }
            }
            break;
        }
    }
    out
}

fn canonicalize_subsets(list: &[Vec<usize>], n: usize) -> Result<Vec<Vec<usize>>> {
    let mut canonical = Vec::with_capacity(list.len());
    for subset in list {
        if subset.len() < 2 {
            return Err(Error::Config(format!(
                "fusion subset {subset:?} has size {}, need >= 2",
                subset.len()
            )));
        }
        let mut s = subset.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != subset.len() {
            return Err(Error::Config(format!(
                "fusion subset {subset:?} repeats a modality index"
            )));
        }
        if let Some(&max) = s.last() {
            if max >= n {
                return Err(Error::Config(format!(
                    "fusion subset {subset:?} references modality {max}, but only {n} modalities exist"
                )));
            }
        }
        canonical.push(s);
    }
    canonical.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    for pair in canonical.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::Config(format!(
                "duplicate fusion subset {:?}",
                pair[0]
            )));
        }
    }
    Ok(canonical)
}

/// Provenance of one contiguous run of fused coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    /// Identity copy of one modality's embedding.
    Single { modality: usize },
    /// Tensor sketch over a modality subset.
    SubsetSketch { subset: Vec<usize> },
    /// Vectorized outer product over the listed modalities.
    BilinearProduct { sources: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

/// A fused feature vector together with its layout descriptors. Segments
/// are contiguous, non-overlapping, and cover the whole vector in canonical
/// order (singles in modality order, then subsets by size then
/// lexicographic).
#[derive(Clone, Debug, PartialEq)]
pub struct FusedVector {
    pub values: Vec<f64>,
    pub layout: Vec<Segment>,
}

impl FusedVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_values(&self, segment: &Segment) -> &[f64] {
        &self.values[segment.offset..segment.offset + segment.len]
    }
}

/// A [`FusionSpec`] bound to concrete input dimensions, with sketch
/// parameters materialized. Immutable once built; fuse and backward are
/// pure functions safe to call concurrently.
#[derive(Clone, Debug)]
pub struct FusionOperator {
    spec: FusionSpec,
    input_dims: Vec<usize>,
    subsets: Vec<Vec<usize>>,
    subset_params: Vec<Vec<CountSketchParams>>,
    output_dim: usize,
}

impl FusionOperator {
    /// Instantiates the operator, deriving per-(subset, modality) sketch
    /// parameters deterministically from the spec seed.
    pub fn new(spec: FusionSpec, input_dims: &[usize]) -> Result<Self> {
        let n = input_dims.len();
        if n > 64 {
            return Err(Error::Config(format!(
                "at most 64 modalities are supported, got {n}"
            )));
        }
        let output_dim = spec.output_dim(input_dims)?;
        if spec.kind == FusionKind::Bilinear && output_dim > BILINEAR_CAP {
            return Err(Error::Capacity(format!(
                "explicit bilinear output has {output_dim} elements, cap is {BILINEAR_CAP}"
            )));
        }
        if spec.kind == FusionKind::Concat && n == 0 {
            return Err(Error::invalid("concat fusion needs at least one input"));
        }
        if spec.kind == FusionKind::Bilinear && n < 2 {
            return Err(Error::invalid("bilinear fusion needs at least two inputs"));
        }
        let subsets = spec.resolve_subsets(n)?;
        let subset_params = subsets
            .iter()
            .map(|subset| derive_subset_params(&spec, subset, input_dims))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionOperator {
            spec,
            input_dims: input_dims.to_vec(),
            subsets,
            subset_params,
            output_dim,
        })
    }

    /// Rebuilds an operator from explicit sketch parameters (checkpoint
    /// restore). Parameters are validated against the spec's subsets but
    /// never re-derived from seeds.
    pub fn from_parts(
        spec: FusionSpec,
        input_dims: &[usize],
        subset_params: Vec<Vec<CountSketchParams>>,
    ) -> Result<Self> {
        let output_dim = spec.output_dim(input_dims)?;
        let subsets = spec.resolve_subsets(input_dims.len())?;
        if subset_params.len() != subsets.len() {
            return Err(Error::dim(
                "fusion subset params",
                subsets.len(),
                subset_params.len(),
            ));
        }
        for (subset, params) in subsets.iter().zip(&subset_params) {
            if params.len() != subset.len() {
                return Err(Error::dim(
                    format!("params for subset {subset:?}"),
                    subset.len(),
                    params.len(),
                ));
            }
            for (&m, p) in subset.iter().zip(params) {
                if p.input_dim() != input_dims[m] {
                    return Err(Error::dim(
                        format!("sketch input_dim for modality {m}"),
                        input_dims[m],
                        p.input_dim(),
                    ));
                }
                if p.sketch_dim() != spec.sketch_dim {
                    return Err(Error::dim(
                        format!("sketch_dim for modality {m}"),
                        spec.sketch_dim,
                        p.sketch_dim(),
                    ));
                }
            }
        }
        Ok(FusionOperator {
            spec,
            input_dims: input_dims.to_vec(),
            subsets,
            subset_params,
            output_dim,
        })
    }

    pub fn spec(&self) -> &FusionSpec {
        &self.spec
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn subset_params(&self) -> &[Vec<CountSketchParams>] {
        &self.subset_params
    }

    fn check_inputs(&self, xs: &[&[f64]]) -> Result<()> {
        if xs.len() != self.input_dims.len() {
            return Err(Error::dim("fusion inputs", self.input_dims.len(), xs.len()));
        }
        for (i, (x, &dim)) in xs.iter().zip(&self.input_dims).enumerate() {
            if x.len() != dim {
                return Err(Error::dim(format!("fusion input {i}"), dim, x.len()));
            }
        }
        Ok(())
    }

    /// Fuses one embedding vector per modality into a single feature vector.
    pub fn fuse(&self, xs: &[&[f64]]) -> Result<FusedVector> {
        self.check_inputs(xs)?;
        match self.spec.kind {
            FusionKind::Concat => Ok(fuse_concat(xs)),
            FusionKind::Bilinear => self.fuse_bilinear(xs),
            FusionKind::TensorSketch => {
                let values = tensor_sketch(xs, &self.subset_params[0])?;
                let len = values.len();
                Ok(FusedVector {
                    values,
                    layout: vec![Segment {
                        kind: SegmentKind::SubsetSketch {
                            subset: self.subsets[0].clone(),
                        },
                        offset: 0,
                        len,
                    }],
                })
            }
            FusionKind::GeneralizedCompactBilinear => self.fuse_generalized(xs),
        }
    }

    fn fuse_bilinear(&self, xs: &[&[f64]]) -> Result<FusedVector> {
        let values = bilinear_fold(xs)?;
        let len = values.len();
        Ok(FusedVector {
            values,
            layout: vec![Segment {
                kind: SegmentKind::BilinearProduct {
                    sources: (0..xs.len()).collect(),
                },
                offset: 0,
                len,
            }],
        })
    }

    fn fuse_generalized(&self, xs: &[&[f64]]) -> Result<FusedVector> {
        let d = self.spec.sketch_dim;
        let mut values = Vec::with_capacity(self.output_dim);
        let mut layout = Vec::with_capacity(xs.len() + self.subsets.len());
        for (m, x) in xs.iter().enumerate() {
            layout.push(Segment {
                kind: SegmentKind::Single { modality: m },
                offset: values.len(),
                len: x.len(),
            });
            values.extend_from_slice(x);
        }
        for (subset, params) in self.subsets.iter().zip(&self.subset_params) {
            let gathered: Vec<&[f64]> = subset.iter().map(|&m| xs[m]).collect();
            let sketch = tensor_sketch(&gathered, params)?;
            layout.push(Segment {
                kind: SegmentKind::SubsetSketch {
                    subset: subset.clone(),
                },
                offset: values.len(),
                len: d,
            });
            values.extend_from_slice(&sketch);
        }
        debug_assert_eq!(values.len(), self.output_dim);
        Ok(FusedVector { values, layout })
    }

    /// Gradient of a scalar loss w.r.t. every modality input, given the
    /// gradient w.r.t. the fused vector. A modality feeding several
    /// segments receives the sum of the segment gradients.
    pub fn backward(&self, grad_out: &[f64], xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(xs)?;
        if grad_out.len() != self.output_dim {
            return Err(Error::dim(
                "fusion backward gradient",
                self.output_dim,
                grad_out.len(),
            ));
        }
        match self.spec.kind {
            FusionKind::Concat => {
                let mut grads = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for x in xs {
                    grads.push(grad_out[offset..offset + x.len()].to_vec());
                    offset += x.len();
                }
                Ok(grads)
            }
            FusionKind::Bilinear => bilinear_fold_backward(grad_out, xs),
            FusionKind::TensorSketch => {
                tensor_sketch_backward_all(grad_out, xs, &self.subset_params[0])
            }
            FusionKind::GeneralizedCompactBilinear => {
                let d = self.spec.sketch_dim;
                let mut grads: Vec<Vec<f64>> =
                    xs.iter().map(|x| vec![0.0; x.len()]).collect();
                let mut offset = 0;
                for (m, x) in xs.iter().enumerate() {
                    for (g, &v) in grads[m]
                        .iter_mut()
                        .zip(&grad_out[offset..offset + x.len()])
                    {
                        *g += v;
                    }
                    offset += x.len();
                }
                for (subset, params) in self.subsets.iter().zip(&self.subset_params) {
                    let gathered: Vec<&[f64]> = subset.iter().map(|&m| xs[m]).collect();
                    let seg_grads = tensor_sketch_backward_all(
                        &grad_out[offset..offset + d],
                        &gathered,
                        params,
                    )?;
                    for (&m, seg) in subset.iter().zip(seg_grads) {
                        for (g, v) in grads[m].iter_mut().zip(seg) {
                            *g += v;
                        }
                    }
                    offset += d;
                }
                Ok(grads)
            }
        }
    }
}

/// Derives the per-modality sketch parameters for one subset. Each
/// (seed, subset, modality) triple gets an independent stream so sketches
/// sharing a modality across subsets use independent hashes.
pub fn derive_subset_params(
    spec: &FusionSpec,
    subset: &[usize],
    input_dims: &[usize],
) -> Result<Vec<CountSketchParams>> {
    let mask: u64 = subset.iter().fold(0, |acc, &m| acc | (1u64 << m));
    subset
        .iter()
        .map(|&m| {
            let seed = derive_seed(spec.seed, &[tags::SKETCH_PARAMS, mask, m as u64]);
            CountSketchParams::new(input_dims[m], spec.sketch_dim, seed)
        })
        .collect()
}

/// Concatenation fusion: segments are the inputs in order.
pub fn fuse_concat(xs: &[&[f64]]) -> FusedVector {
    let mut values = Vec::with_capacity(xs.iter().map(|x| x.len()).sum());
    let mut layout = Vec::with_capacity(xs.len());
    for (m, x) in xs.iter().enumerate() {
        layout.push(Segment {
            kind: SegmentKind::Single { modality: m },
            offset: values.len(),
            len: x.len(),
        });
        values.extend_from_slice(x);
    }
    FusedVector { values, layout }
}

/// Left fold of vectorized outer products, row-major: starting from x_1,
/// each step replaces v by vec(v (x) x_next) with index (i, j) -> i*D + j.
fn bilinear_fold(xs: &[&[f64]]) -> Result<Vec<f64>> {
    if xs.len() < 2 {
        return Err(Error::invalid("bilinear fusion needs at least two inputs"));
    }
    let mut total: usize = 1;
    for x in xs {
        total = total
            .checked_mul(x.len())
            .filter(|&t| t <= BILINEAR_CAP)
            .ok_or_else(|| {
                Error::Capacity(format!(
                    "explicit bilinear output exceeds the {BILINEAR_CAP}-element cap"
                ))
            })?;
    }
    let mut v = xs[0].to_vec();
    for x in &xs[1..] {
        let mut next = Vec::with_capacity(v.len() * x.len());
        for &a in &v {
            for &b in x.iter() {
                next.push(a * b);
            }
        }
        v = next;
    }
    Ok(v)
}

/// Adjoint of [`bilinear_fold`]. Intermediates are recomputed forward,
/// then gradients are peeled off right to left.
fn bilinear_fold_backward(grad_out: &[f64], xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    if xs.len() < 2 {
        return Err(Error::invalid("bilinear fusion needs at least two inputs"));
    }
    let mut intermediates: Vec<Vec<f64>> = vec![xs[0].to_vec()];
    for x in &xs[1..] {
        let v = intermediates.last().unwrap();
        let mut next = Vec::with_capacity(v.len() * x.len());
        for &a in v {
            for &b in x.iter() {
                next.push(a * b);
            }
        }
        intermediates.push(next);
    }

    let n = xs.len();
    let mut grads: Vec<Vec<f64>> = xs.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut grad_v = grad_out.to_vec();
    for k in (1..n).rev() {
        let prev = &intermediates[k - 1];
        let xk = xs[k];
        let dk = xk.len();
        let mut grad_prev = vec![0.0; prev.len()];
        for (i, gp) in grad_prev.iter_mut().enumerate() {
            let row = &grad_v[i * dk..(i + 1) * dk];
            let mut acc = 0.0;
            for (j, &g) in row.iter().enumerate() {
                acc += g * xk[j];
                grads[k][j] += g * prev[i];
            }
            *gp = acc;
        }
        grad_v = grad_prev;
    }
    grads[0] = grad_v;
    Ok(grads)
}
