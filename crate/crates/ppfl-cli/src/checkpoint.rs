//! Checkpoint container: the server's shared block (when present) plus
//! every client's full parameter vector, each encoded with the versioned
//! flat layout from the core crate.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use ppfl_core::federation::{ClientModel, RunResult};
use ppfl_core::model::{decode_params, encode_params, ModelSpec};

const MAGIC: [u8; 4] = *b"PPCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub server_phi: Vec<f64>,
    pub models: Vec<ClientModel>,
    pub spec: ModelSpec,
}

pub fn write_checkpoint(path: &Path, run: &RunResult) -> Result<()> {
    write_models(path, &run.spec(), &run.server_phi, &run.models)
}

pub fn write_models(
    path: &Path,
    spec: &ModelSpec,
    server_phi: &[f64],
    models: &[ClientModel],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(server_phi.len() as u64).to_le_bytes());
    for v in server_phi {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(models.len() as u32).to_le_bytes());
    for model in models {
        let blob = encode_params(spec, &model.theta)
            .map_err(|e| anyhow::anyhow!("encoding client {}: {e}", model.client_id))?;
        out.extend_from_slice(&model.client_id.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            bail!("truncated checkpoint: wanted {} bytes at offset {}, file has {}", n, at, bytes.len());
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != MAGIC {
        bail!("not a checkpoint file (bad magic)");
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        bail!("unsupported checkpoint version {version} (this build reads {VERSION})");
    }
    let phi_len = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
    let mut server_phi = Vec::with_capacity(phi_len);
    for chunk in take(&mut at, phi_len * 8)?.chunks_exact(8) {
        server_phi.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut models = Vec::with_capacity(count);
    let mut spec: Option<ModelSpec> = None;
    for _ in 0..count {
        let client_id = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        let blob_len = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let blob = take(&mut at, blob_len)?;
        let (model_spec, theta) =
            decode_params(blob).map_err(|e| anyhow::anyhow!("client {client_id}: {e}"))?;
        if let Some(existing) = &spec {
            if existing.dims != model_spec.dims || existing.scheme != model_spec.scheme {
                bail!("checkpoint mixes incompatible model layouts");
            }
        } else {
            spec = Some(model_spec);
        }
        models.push(ClientModel { client_id, theta });
    }
    if at != bytes.len() {
        bail!("trailing bytes after checkpoint payload");
    }
    let spec = spec.context("checkpoint contains no client models")?;
    if !server_phi.is_empty() && server_phi.len() != spec.shared_len() {
        bail!(
            "server block has {} values, layout expects {}",
            server_phi.len(),
            spec.shared_len()
        );
    }
    Ok(Checkpoint { server_phi, models, spec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ppfl_core::model::{ModelDims, PartitionScheme};

    fn sample_models(spec: &ModelSpec) -> Vec<ClientModel> {
        (1..=2u32)
            .map(|id| ClientModel {
                client_id: id,
                theta: (0..spec.total_len()).map(|i| id as f64 + i as f64 * 0.5).collect(),
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(
            ModelDims { features: 2, window: 3, horizon: 1, hidden: 2, stack: 2, fc_hidden: 2 },
            PartitionScheme::EncoderShared,
        );
        let models = sample_models(&spec);
        let phi = vec![0.25; spec.shared_len()];
        let path = dir.path().join("ck.bin");
        write_models(&path, &spec, &phi, &models).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.server_phi, phi);
        assert_eq!(back.models.len(), 2);
        for (a, b) in back.models.iter().zip(&models) {
            assert_eq!(a.client_id, b.client_id);
            assert!(a.theta.iter().zip(&b.theta).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.spec.dims, spec.dims);
    }

    #[test]
    fn truncated_and_versioned_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(
            ModelDims { features: 2, window: 3, horizon: 1, hidden: 2, stack: 2, fc_hidden: 2 },
            PartitionScheme::EncoderShared,
        );
        let path = dir.path().join("ck.bin");
        write_models(&path, &spec, &[], &sample_models(&spec)).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = format!("{:#}", read_checkpoint(&path).unwrap_err());
        assert!(err.contains("truncated"), "{err}");

        let mut wrong = bytes.clone();
        wrong[4] = 99;
        fs::write(&path, &wrong).unwrap();
        let err = format!("{:#}", read_checkpoint(&path).unwrap_err());
        assert!(err.contains("version"), "{err}");
    }
}
