//! JSON checkpoints: a header naming the producing configuration, then
//! every tensor by name.

use crate::aggregator::{AggregatorParameters, TaskEmbeddingTable};
use crate::error::{Error, Result};
use crate::meta::MetaState;
use crate::model::{Model, ModelConfig};
use crate::params::ParamVec;
use crate::social::SpeakerId;
use crate::tensor::Mat;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const FORMAT: &str = "fewshot-persona-checkpoint/1";

const AGG_NAMES: [&str; 4] = ["agg.w1", "agg.b1", "agg.w2", "agg.b2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn new(name: impl Into<String>, m: &Mat) -> Self {
        Self {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    /// The run configuration as written by the producer.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub step: u64,
    pub model_config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub table_speakers: Vec<SpeakerId>,
    pub table: NamedTensor,
}

/// Identity of the run that produced a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_state(state: &MetaState, prov: Provenance) -> Self {
        let cfg = state.model.config().clone();
        let mut tensors: Vec<NamedTensor> = cfg
            .param_shapes()
            .into_iter()
            .zip(&state.model.params().0)
            .map(|((name, _), m)| NamedTensor::new(name, m))
            .collect();
        tensors.extend(AGG_NAMES.iter().zip(&state.aggregator.0 .0).map(|(n, m)| NamedTensor::new(*n, m)));
        let (ids, m) = state.table.to_parts();
        Self {
            format: FORMAT.into(),
            config: prov.config,
            config_hash: prov.config_hash,
            dataset_hash: prov.dataset_hash,
            seed: prov.seed,
            step: state.step,
            model_config: cfg,
            tensors,
            table_speakers: ids,
            table: NamedTensor::new("table", &m),
        }
    }

    /// Rebuilds the state; optimizer moments start fresh.
    pub fn to_state(&self) -> Result<MetaState> {
        if self.format != FORMAT {
            return Err(Error::Incompatible {
                field: "checkpoint format".into(),
                expected: FORMAT.into(),
                found: self.format.clone(),
            });
        }
        self.model_config.validate()?;
        let shapes = self.model_config.param_shapes();
        let d = self.model_config.d_model;
        if self.tensors.len() != shapes.len() + AGG_NAMES.len() {
            return Err(Error::Incompatible {
                field: "tensor count".into(),
                expected: (shapes.len() + AGG_NAMES.len()).to_string(),
                found: self.tensors.len().to_string(),
            });
        }
        let expected = shapes
            .into_iter()
            .chain(AGG_NAMES.iter().enumerate().map(|(i, n)| {
                let rows = if i % 2 == 0 { d } else { 1 };
                (n.to_string(), (rows, d))
            }));
        let mut mats = Vec::with_capacity(self.tensors.len());
        for ((name, shape), t) in expected.zip(&self.tensors) {
            if t.name != name {
                return Err(Error::Incompatible {
                    field: "tensor name".into(),
                    expected: name,
                    found: t.name.clone(),
                });
            }
            mats.push(to_mat(t, shape)?);
        }
        let agg = mats.split_off(mats.len() - AGG_NAMES.len());
        let model = Model::from_parts(self.model_config.clone(), ParamVec(mats))?;
        let aggregator = AggregatorParameters(ParamVec(agg));
        aggregator.validate()?;
        let tm = to_mat(&self.table, (self.table_speakers.len(), d))?;
        let table = TaskEmbeddingTable::from_parts(&self.table_speakers, &tm)?;
        let mut st = MetaState::from_parts(model, aggregator, table);
        st.step = self.step;
        Ok(st)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(fs::File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}

fn to_mat(t: &NamedTensor, shape: (usize, usize)) -> Result<Mat> {
    if (t.rows, t.cols) != shape || t.data.len() != t.rows * t.cols {
        return Err(Error::Incompatible {
            field: format!("shape of {}", t.name),
            expected: format!("{shape:?}"),
            found: format!("({}, {}) with {} values", t.rows, t.cols, t.data.len()),
        });
    }
    let m = Mat::from_vec(t.rows, t.cols, t.data.clone());
    if !m.all_finite() {
        return Err(Error::Numeric(format!("non-finite values in {}", t.name)));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskSlot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> MetaState {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 4,
            n_heads: 2,
            d_ff: 6,
            enc_layers: 1,
            dec_layers: 2,
            task_slot: TaskSlot::Decoder,
        };
        let ids: Vec<SpeakerId> = (0..5).map(SpeakerId).collect();
        MetaState::new(cfg, &ids, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn prov() -> Provenance {
        Provenance {
            config: serde_json::json!({"steps": 3}),
            config_hash: "abc".into(),
            dataset_hash: "def".into(),
            seed: 9,
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let st = state();
        let ck = Checkpoint::from_state(&st, prov());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/ck.json");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let st2 = back.to_state().unwrap();
        assert_eq!(st2.checksum(), st.checksum());
        assert_eq!(st2.model.config(), st.model.config());
    }

    #[test]
    fn mismatches_name_the_field() {
        let mut ck = Checkpoint::from_state(&state(), prov());
        ck.tensors[3].name = "bogus".into();
        let e = ck.to_state().unwrap_err().to_string();
        assert!(e.contains("tensor name") && e.contains("bogus"), "{e}");

        let mut ck = Checkpoint::from_state(&state(), prov());
        ck.tensors[0].rows += 1;
        let e = ck.to_state().unwrap_err().to_string();
        assert!(e.contains("shape of tok_emb"), "{e}");

        let mut ck = Checkpoint::from_state(&state(), prov());
        ck.model_config.d_ff = 7;
        assert!(matches!(ck.to_state(), Err(Error::Incompatible { .. })));

        let mut ck = Checkpoint::from_state(&state(), prov());
        ck.format = "other".into();
        assert!(ck.to_state().unwrap_err().to_string().contains("checkpoint format"));
    }
}
