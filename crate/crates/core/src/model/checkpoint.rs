use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, Tensor};

pub const CHECKPOINT_FORMAT: &str = "detr3d-checkpoint";
/// Readers accept any `1.x`; the minor number marks additive changes.
pub const CHECKPOINT_VERSION: &str = "1.0";
const MAJOR: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn new(name: &str, t: &Tensor) -> Self {
        NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone()).map_err(|_| {
            Error::Checkpoint(format!(
                "tensor {} has {} values for shape {:?}",
                self.name,
                self.data.len(),
                self.shape
            ))
        })
    }
}

/// On-disk model state. JSON with shortest round-trip floats, so saving
/// and loading is bit-exact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: String,
    pub config: ModelConfig,
    pub fourier_frequencies: NamedTensor,
    pub params: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamW>,
    /// Free-form run information (training config, epoch, metrics).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_detector(det: &Detector) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION.to_string(),
            config: det.config.clone(),
            fourier_frequencies: NamedTensor::new(
                "pos_embed.frequencies",
                &det.pos_embed.frequencies,
            ),
            params: det
                .params
                .iter()
                .map(|(n, t)| NamedTensor::new(n, t))
                .collect(),
            optimizer: None,
            metadata: serde_json::Value::Null,
        }
    }

    /// Rebuilds the network; every parameter must be present with the
    /// shape the config implies.
    pub fn to_detector(&self) -> Result<Detector> {
        let mut det = Detector::new(self.config.clone(), 0)?;
        if self.params.len() != det.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, config implies {}",
                self.params.len(),
                det.params.len()
            )));
        }
        for p in &self.params {
            det.params
                .set(&p.name, p.tensor()?)
                .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", p.name)))?;
        }
        let freq = self.fourier_frequencies.tensor()?;
        if freq.shape() != det.pos_embed.frequencies.shape() {
            return Err(Error::Checkpoint(format!(
                "fourier frequencies have shape {:?}, config implies {:?}",
                freq.shape(),
                det.pos_embed.frequencies.shape()
            )));
        }
        det.pos_embed.frequencies = freq;
        Ok(det)
    }

    pub fn check_version(&self) -> Result<()> {
        check_header(&self.format, &self.version)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Check the header before the body so old or foreign files report a
        // version error rather than a missing-field error.
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: String,
        }
        let header: Header = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("missing format header: {e}")))?;
        check_header(&header.format, &header.version)?;
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn check_header(format: &str, version: &str) -> Result<()> {
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format tag {format:?}")));
    }
    let major = version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok());
    if major != Some(MAJOR) {
        return Err(Error::CheckpointVersion {
            found: version.to_string(),
            expected: MAJOR,
        });
    }
    Ok(())
}
