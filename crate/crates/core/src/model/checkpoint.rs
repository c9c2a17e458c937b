use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::linalg::Scalar;
use super::transformer::Model;
use super::ModelError;
use crate::conditions::ConditionKind;
use crate::toycodec::ToyCodecSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Adam moments over the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    #[serde(default)]
    pub ablation: Vec<ConditionKind>,
    pub step: u64,
    pub params: Vec<CheckpointTensor>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    /// `(step, loss)` pairs.
    #[serde(default)]
    pub loss_curve: Vec<(u64, f64)>,
    /// Codec of the training data, used to decode samples.
    #[serde(default)]
    pub codec: Option<ToyCodecSpec>,
}

impl Checkpoint {
    pub fn from_model<F: Scalar>(model: &Model<F>, step: u64) -> Self {
        let params = model
            .layout()
            .specs()
            .iter()
            .map(|s| CheckpointTensor {
                name: s.name.clone(),
                shape: s.shape.clone(),
                data: model.params()[s.range.clone()].iter().map(|v| v.f64() as f32).collect(),
            })
            .collect();
        Checkpoint {
            config: model.config().clone(),
            ablation: Vec::new(),
            step,
            params,
            optimizer: None,
            loss_curve: Vec::new(),
            codec: None,
        }
    }

    pub fn to_model<F: Scalar>(&self) -> Result<Model<F>, ModelError> {
        let mut model = Model::<F>::new(self.config.clone(), 0)?;
        let specs = model.layout().specs().to_vec();
        if specs.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors stored, {} expected",
                self.params.len(),
                specs.len()
            )));
        }
        for (spec, tensor) in specs.iter().zip(&self.params) {
            if spec.name != tensor.name || spec.shape != tensor.shape || tensor.data.len() != spec.range.len() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    tensor.name, tensor.shape, spec.name, spec.shape
                )));
            }
            for (o, &v) in model.params_mut()[spec.range.clone()].iter_mut().zip(&tensor.data) {
                *o = F::of(v as f64);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        write_atomic(path, text.as_bytes()).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut file = fs::File::create(tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(tmp, path)
}
