//! Model persistence. Checkpoints are versioned JSON holding every dense
//! layer, the fusion spec, and the sketch parameters written out as
//! explicit bucket and sign tables, so a stored model keeps predicting
//! identically even if seed derivation ever changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSchema;
use crate::error::{Error, Result};
use crate::fusion::{FusionOperator, FusionSpec};
use crate::nn::{DenseLayer, ModalityNetwork, Model};
use crate::sketch::CountSketchParams;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Explicit count-sketch parameter tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchParamsRecord {
    pub input_dim: usize,
    pub sketch_dim: usize,
    pub seed: u64,
    pub buckets: Vec<usize>,
    pub signs: Vec<i8>,
}

impl SketchParamsRecord {
    pub fn from_params(p: &CountSketchParams) -> Self {
        SketchParamsRecord {
            input_dim: p.input_dim(),
            sketch_dim: p.sketch_dim(),
            seed: p.seed(),
            buckets: p.buckets().to_vec(),
            signs: p.signs().to_vec(),
        }
    }

    pub fn into_params(self) -> Result<CountSketchParams> {
        CountSketchParams::from_parts(
            self.input_dim,
            self.sketch_dim,
            self.buckets,
            self.signs,
            self.seed,
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub schema: DatasetSchema,
    /// Sorted subject ids; position in this list is the class index.
    pub class_subjects: Vec<i64>,
    pub fusion_spec: FusionSpec,
    /// Fusion input dims, one per modality (the embedding dims).
    pub embedding_dims: Vec<usize>,
    /// Sketch tables per fusion subset, inner vector per subset member.
    pub sketch_params: Vec<Vec<SketchParamsRecord>>,
    pub networks: Vec<ModalityNetwork>,
    pub joint: DenseLayer,
    pub classifier: DenseLayer,
}

impl Checkpoint {
    pub fn from_model(model: &Model, schema: &DatasetSchema, class_subjects: &[i64]) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            schema: schema.clone(),
            class_subjects: class_subjects.to_vec(),
            fusion_spec: model.fusion.spec().clone(),
            embedding_dims: model.fusion.input_dims().to_vec(),
            sketch_params: model
                .fusion
                .subset_params()
                .iter()
                .map(|subset| subset.iter().map(SketchParamsRecord::from_params).collect())
                .collect(),
            networks: model.networks.clone(),
            joint: model.joint.clone(),
            classifier: model.classifier.clone(),
        }
    }

    /// Validates and reassembles the model. Sketch parameters are taken
    /// from the stored tables, never re-derived.
    pub fn into_model(self) -> Result<(Model, DatasetSchema, Vec<i64>)> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint format version {} unsupported, expected {CHECKPOINT_VERSION}",
                self.format_version
            )));
        }
        if self.class_subjects.is_empty() {
            return Err(Error::Schema("checkpoint lists no classes".into()));
        }
        if self.class_subjects.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema(
                "checkpoint class subjects must be strictly increasing".into(),
            ));
        }
        if self.schema.modalities.len() != self.networks.len() {
            return Err(Error::dim(
                "checkpoint networks",
                self.schema.modalities.len(),
                self.networks.len(),
            ));
        }
        for net in &self.networks {
            net.validate()?;
        }
        self.joint.validate()?;
        self.classifier.validate()?;
        if self.classifier.out_dim != self.class_subjects.len() {
            return Err(Error::dim(
                "classifier classes",
                self.class_subjects.len(),
                self.classifier.out_dim,
            ));
        }
        for ((name, &dim), net) in self.schema.modalities.iter().zip(&self.networks) {
            if net.input_dim() != dim {
                return Err(Error::dim(
                    format!("network input for modality {name:?}"),
                    dim,
                    net.input_dim(),
                ));
            }
        }
        let params = self
            .sketch_params
            .into_iter()
            .map(|subset| subset.into_iter().map(SketchParamsRecord::into_params).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        let fusion = FusionOperator::from_parts(self.fusion_spec, &self.embedding_dims, params)?;
        let model = Model::from_parts(self.networks, fusion, self.joint, self.classifier)?;
        Ok((model, self.schema, self.class_subjects))
    }

    /// Stable, human-readable rendering; the on-disk bytes are exactly
    /// this string, making byte-level determinism checks meaningful.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("serializing checkpoint: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TrainSample;
    use crate::rng::rng_from;
    use rand::Rng;

    fn schema_for(dims: &[usize]) -> DatasetSchema {
        let mut schema = DatasetSchema::default();
        for (i, &d) in dims.iter().enumerate() {
            schema.modalities.insert(format!("m{i:02}"), d);
        }
        schema
    }

    fn tiny_trained_model(seed: u64) -> Model {
        let mut model = Model::init(
            &[3, 4],
            &[5],
            4,
            4,
            3,
            FusionSpec::generalized(8, seed),
            seed,
        )
        .unwrap();
        let mut rng = rng_from(seed, &[0x99]);
        let samples: Vec<TrainSample> = (0..12)
            .map(|i| TrainSample {
                inputs: vec![
                    (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                ],
                label: i % 3,
            })
            .collect();
        let config = crate::nn::TrainConfig {
            epochs_stage1: 1,
            epochs_stage2: 1,
            batch_size: 4,
            ..Default::default()
        }
        .with_seed(seed);
        crate::nn::train_two_step(&mut model, &samples, &config).unwrap();
        model
    }

    #[test]
    fn round_trip_preserves_predictions_bitwise() {
        let model = tiny_trained_model(5);
        let schema = schema_for(&[3, 4]);
        let checkpoint = Checkpoint::from_model(&model, &schema, &[10, 20, 30]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        checkpoint.save(&path).unwrap();
        let (restored, schema2, classes) = Checkpoint::load(&path).unwrap().into_model().unwrap();

        assert_eq!(schema, schema2);
        assert_eq!(classes, vec![10, 20, 30]);
        let mut rng = rng_from(6, &[]);
        for _ in 0..10 {
            let inputs: Vec<Vec<f64>> = vec![
                (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ];
            let a = model.predict_proba(&inputs).unwrap();
            let b = restored.predict_proba(&inputs).unwrap();
            assert_eq!(a, b, "round-trip changed a prediction");
        }
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let model = tiny_trained_model(7);
        let schema = schema_for(&[3, 4]);
        let a = Checkpoint::from_model(&model, &schema, &[0, 1, 2])
            .to_json()
            .unwrap();
        let b = Checkpoint::from_model(&model, &schema, &[0, 1, 2])
            .to_json()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn version_and_shape_mismatches_are_rejected() {
        let model = tiny_trained_model(8);
        let schema = schema_for(&[3, 4]);
        let good = Checkpoint::from_model(&model, &schema, &[0, 1, 2]);

        let mut bad = good.clone();
        bad.format_version = 99;
        assert!(bad.into_model().is_err());

        let mut bad = good.clone();
        bad.class_subjects = vec![2, 1, 0];
        assert!(bad.into_model().is_err());

        let mut bad = good.clone();
        bad.classifier.out_dim = 5;
        assert!(bad.into_model().is_err());

        let mut bad = good.clone();
        bad.networks.pop();
        assert!(bad.into_model().is_err());

        let mut bad = good.clone();
        bad.joint.weights[0] = f64::NAN;
        assert!(bad.into_model().is_err());

        let mut bad = good.clone();
        bad.sketch_params[0][0].buckets[0] = 10_000;
        assert!(bad.into_model().is_err(), "bucket out of range must fail");

        let mut bad = good;
        bad.sketch_params[0][0].signs[0] = 3;
        assert!(bad.into_model().is_err(), "sign outside {{-1,1}} must fail");
    }

    #[test]
    fn unknown_fields_fail_loudly() {
        let model = tiny_trained_model(9);
        let schema = schema_for(&[3, 4]);
        let mut text = Checkpoint::from_model(&model, &schema, &[0, 1, 2])
            .to_json()
            .unwrap();
        text = text.replacen("\"format_version\"", "\"bogus\": 1, \"format_version\"", 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(&path, text).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
