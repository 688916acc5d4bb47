//! Binary parameter checkpoints: `SPCK`, a `u32` version, a `u64` header
//! length, a JSON header, then little-endian `f64` parameters (policy first,
//! then the critic when present).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CriticArch, CriticNet, PolicyArch, PolicyNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub algorithm: String,
    pub seed: u64,
    pub step: u64,
    pub policy: PolicyArch,
    pub critic: Option<CriticArch>,
    pub policy_params: usize,
    pub critic_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub policy: PolicyNet,
    pub critic: Option<CriticNet>,
}

impl Checkpoint {
    pub fn new(
        algorithm: &str,
        seed: u64,
        step: u64,
        policy: PolicyNet,
        critic: Option<CriticNet>,
    ) -> Checkpoint {
        let header = CheckpointHeader {
            algorithm: algorithm.to_string(),
            seed,
            step,
            policy: policy.arch().clone(),
            critic: critic.as_ref().map(|c| c.arch().clone()),
            policy_params: policy.param_count(),
            critic_params: critic.as_ref().map_or(0, CriticNet::param_count),
        };
        Checkpoint {
            header,
            policy,
            critic,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n = self.header.policy_params + self.header.critic_params;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let critic = self.critic.as_ref().map_or(&[][..], CriticNet::params);
        for p in self.policy.params().iter().chain(critic) {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |reason: &str| Error::Format {
            path: "<checkpoint>".into(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..)
            .filter(|b| b.len() >= hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let data = &body[hlen..];
        let n = header.policy_params + header.critic_params;
        if data.len() != 8 * n {
            return Err(bad(&format!(
                "expected {} parameter bytes, found {}",
                8 * n,
                data.len()
            )));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (pp, cp) = values.split_at(header.policy_params);
        let policy = PolicyNet::with_params(header.policy.clone(), pp.to_vec())?;
        let critic = match &header.critic {
            Some(arch) => Some(CriticNet::with_params(arch.clone(), cp.to_vec())?),
            None if cp.is_empty() => None,
            None => return Err(bad("critic parameters without a critic architecture")),
        };
        Ok(Checkpoint {
            header,
            policy,
            critic,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::Init;
    use super::*;

    #[test]
    fn round_trip_preserves_every_bit() {
        let policy = PolicyNet::new(PolicyArch::default(), Init::Uniform { seed: 5 });
        let critic = CriticNet::new(CriticArch::default(), Init::Uniform { seed: 6 });
        let ck = Checkpoint::new("DRAG", 42, 17, policy, Some(critic));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn policy_only_and_corruption() {
        let policy = PolicyNet::new(PolicyArch::default(), Init::Zero);
        let ck = Checkpoint::new("BC", 1, 0, policy, None);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }
}
