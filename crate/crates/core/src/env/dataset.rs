//! Binary trajectory files.
//!
//! Layout: `u32` LE header length, JSON header, then one record per step,
//! each a `u32` LE payload length followed by the observation as row-major
//! LE `f32`, an optional `(u, v)` pair of LE `u16`, and a terminal flag byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EnvError, Observation, Pixel, Result, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub config: SceneConfig,
    pub n_episodes: usize,
    pub include_actions: bool,
    pub seed: u64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStep {
    pub observation: Observation,
    /// Action taken from this observation; absent in observation-only data
    /// and on the final state of an episode.
    pub action: Option<Pixel>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub steps: Vec<DatasetStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl ExpertDataset {
    pub fn has_actions(&self) -> bool {
        self.episodes.iter().flat_map(|e| &e.steps).any(|s| s.action.is_some())
    }

    /// All `(observation, action)` pairs in file order.
    pub fn state_action_pairs(&self) -> impl Iterator<Item = (&Observation, Pixel)> {
        self.episodes.iter().flat_map(|e| &e.steps).filter_map(|s| s.action.map(|a| (&s.observation, a)))
    }

    pub fn n_states(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }
}

fn bad(msg: impl Into<String>) -> EnvError {
    EnvError::Dataset(msg.into())
}

pub fn write_dataset(path: &Path, data: &ExpertDataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = serde_json::to_vec(&data.header).map_err(|e| bad(e.to_string()))?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let (h, w) = (data.header.config.height(), data.header.config.width());
    let mut payload = Vec::new();
    for step in data.episodes.iter().flat_map(|e| &e.steps) {
        let obs = &step.observation;
        if (obs.height, obs.width) != (h, w) || obs.data.len() != h * w * Observation::CHANNELS {
            return Err(bad("observation shape does not match the header config"));
        }
        payload.clear();
        payload.extend(obs.data.iter().flat_map(|x| x.to_le_bytes()));
        if let Some(a) = step.action {
            payload.extend((a.u as u16).to_le_bytes());
            payload.extend((a.v as u16).to_le_bytes());
        }
        payload.push(step.terminal as u8);
        out.write_all(&(payload.len() as u32).to_le_bytes())?;
        out.write_all(&payload)?;
    }
    out.flush()?;
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = input.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 { Ok(None) } else { Err(bad("truncated length prefix")) };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

pub fn read_dataset(path: &Path) -> Result<ExpertDataset> {
    let mut input = BufReader::new(File::open(path)?);
    let header_len = read_u32(&mut input)?.ok_or_else(|| bad("empty file"))? as usize;
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let header: DatasetHeader = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;
    header.config.validate()?;
    let (h, w) = (header.config.height(), header.config.width());
    let obs_bytes = h * w * Observation::CHANNELS * 4;
    let mut episodes = Vec::new();
    let mut current = Episode::default();
    let mut payload = Vec::new();
    while let Some(len) = read_u32(&mut input)? {
        let len = len as usize;
        if len != obs_bytes + 1 && len != obs_bytes + 5 {
            return Err(bad(format!("record of {len} bytes does not match a {h}x{w} observation")));
        }
        payload.resize(len, 0);
        input.read_exact(&mut payload).map_err(|_| bad("truncated record"))?;
        let data = payload[..obs_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let action = (len == obs_bytes + 5).then(|| {
            let at = |i: usize| u16::from_le_bytes([payload[i], payload[i + 1]]) as usize;
            Pixel::new(at(obs_bytes), at(obs_bytes + 2))
        });
        let terminal = match payload[len - 1] {
            0 => false,
            1 => true,
            other => return Err(bad(format!("terminal flag byte {other}"))),
        };
        current.steps.push(DatasetStep { observation: Observation { height: h, width: w, data }, action, terminal });
        if terminal {
            episodes.push(std::mem::take(&mut current));
        }
    }
    if !current.steps.is_empty() {
        episodes.push(current);
    }
    if episodes.len() != header.n_episodes {
        return Err(bad(format!("header declares {} episodes, file holds {}", header.n_episodes, episodes.len())));
    }
    Ok(ExpertDataset { header, episodes })
}

#[cfg(test)]
mod tests {
    use super::super::collect_expert;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for include_actions in [false, true] {
            let (data, _) = collect_expert(&SceneConfig { seed: 11, ..Default::default() }, 2, 0.5, include_actions).unwrap();
            let path = dir.path().join("d.bin");
            write_dataset(&path, &data).unwrap();
            let back = read_dataset(&path).unwrap();
            assert_eq!(back, data);
            let bytes = std::fs::read(&path).unwrap();
            write_dataset(&path, &back).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (data, _) = collect_expert(&SceneConfig::default(), 1, 0.0, true).unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_dataset(&path).is_err());
        std::fs::write(&path, &bytes[..2]).unwrap();
        assert!(read_dataset(&path).is_err());
    }
}
