//! Offline transition datasets and their JSONL wire format.
//!
//! A dataset file is one header line followed by one line per transition,
//! rows grouped by episode with `t` counting from 0 inside each episode.
//! Floats are written in shortest-round-trip decimal form, so a file written
//! by [`save_dataset`] re-saves byte-identically after a load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub env: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub gamma: f64,
    /// Hash of the run configuration that wrote the file; empty for
    /// datasets assembled in memory.
    #[serde(default)]
    pub config_hash: String,
}

pub const DATASET_VERSION: u32 = 1;

/// One environment step. `done` marks true termination; an episode cut off
/// by the horizon ends with `done = false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub eps: u64,
    pub t: u64,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s2: Vec<f64>,
    pub done: bool,
}

/// Ordered transitions sharing one `eps` id.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl OfflineDataset {
    pub fn n_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn iter_transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    /// Checks the structural invariants the loader promises: dims match the
    /// header, all floats finite, `t` contiguous from 0 within each episode.
    pub fn validate(&self) -> Result<()> {
        for ep in &self.episodes {
            if ep.is_empty() {
                return Err(Error::Schema(format!("episode {} is empty", ep.id)));
            }
            for (i, tr) in ep.transitions.iter().enumerate() {
                if tr.eps != ep.id {
                    return Err(Error::Schema(format!(
                        "episode {} contains row with eps {}",
                        ep.id, tr.eps
                    )));
                }
                if tr.t != i as u64 {
                    return Err(Error::Schema(format!(
                        "episode {}: expected t {} got {}",
                        ep.id, i, tr.t
                    )));
                }
                if tr.s.len() != self.header.obs_dim || tr.s2.len() != self.header.obs_dim {
                    return Err(Error::Dim(format!(
                        "episode {} t {}: obs dim {} expected {}",
                        ep.id,
                        tr.t,
                        tr.s.len().max(tr.s2.len()),
                        self.header.obs_dim
                    )));
                }
                if tr.a.len() != self.header.action_dim {
                    return Err(Error::Dim(format!(
                        "episode {} t {}: action dim {} expected {}",
                        ep.id,
                        tr.t,
                        tr.a.len(),
                        self.header.action_dim
                    )));
                }
                let finite = tr.r.is_finite()
                    && tr.s.iter().chain(&tr.s2).chain(&tr.a).all(|x| x.is_finite());
                if !finite {
                    return Err(Error::NonFinite(format!(
                        "episode {} t {}",
                        ep.id, tr.t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Groups a flat row stream into episodes, enforcing grouping order.
fn group_rows(rows: Vec<Transition>) -> Result<Vec<Episode>> {
    let mut episodes: Vec<Episode> = Vec::new();
    for tr in rows {
        match episodes.last_mut() {
            Some(ep) if ep.id == tr.eps => ep.transitions.push(tr),
            Some(ep) if tr.eps < ep.id => {
                return Err(Error::Schema(format!(
                    "episode ids out of order: {} after {}",
                    tr.eps, ep.id
                )))
            }
            _ => episodes.push(Episode {
                id: tr.eps,
                transitions: vec![tr],
            }),
        }
    }
    Ok(episodes)
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header: DatasetHeader = match lines.next() {
        Some((_, Ok(line))) => serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            msg: e.to_string(),
        })?,
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: "missing header line".into(),
            })
        }
    };
    if header.version != DATASET_VERSION {
        return Err(Error::Schema(format!(
            "unsupported dataset version {}",
            header.version
        )));
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let tr: Transition = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        rows.push(tr);
    }

    let dataset = OfflineDataset {
        header,
        episodes: group_rows(rows)?,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_dataset(dataset: &OfflineDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<File>, s: String| -> Result<()> {
        w.write_all(s.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    emit(&mut w, serde_json::to_string(&dataset.header).expect("header serializes"))?;
    for tr in dataset.iter_transitions() {
        emit(&mut w, serde_json::to_string(tr).expect("row serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_episodes: usize,
    pub n_transitions: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// Undiscounted return per episode, in episode order.
    pub episode_returns: Vec<f64>,
    pub mean_return: f64,
}

pub fn compute_stats(dataset: &OfflineDataset) -> Result<DatasetStats> {
    if dataset.episodes.is_empty() {
        return Err(Error::Schema("empty dataset".into()));
    }
    let mut r_min = f64::INFINITY;
    let mut r_max = f64::NEG_INFINITY;
    let mut episode_returns = Vec::with_capacity(dataset.episodes.len());
    let mut n_transitions = 0usize;
    for ep in &dataset.episodes {
        let mut ret = 0.0;
        for tr in &ep.transitions {
            ret += tr.r;
            r_min = r_min.min(tr.r);
            r_max = r_max.max(tr.r);
        }
        episode_returns.push(ret);
        n_transitions += ep.len();
    }
    let mean_return = episode_returns.iter().sum::<f64>() / episode_returns.len() as f64;
    Ok(DatasetStats {
        n_episodes: dataset.episodes.len(),
        n_transitions,
        r_min,
        r_max,
        episode_returns,
        mean_return,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_dataset() -> OfflineDataset {
        // Two episodes, rewards 1,2,3 and -1,0.5: r_min=-1, r_max=3,
        // returns [6.0, -0.5], mean 2.75.
        let header = DatasetHeader {
            version: 1,
            env: "toy".into(),
            obs_dim: 2,
            action_dim: 1,
            gamma: 0.9,
            config_hash: String::new(),
        };
        let mk = |eps, t, r, done| Transition {
            eps,
            t,
            s: vec![0.1 * t as f64, -0.2],
            a: vec![0.3],
            r,
            s2: vec![0.1 * (t + 1) as f64, -0.2],
            done,
        };
        OfflineDataset {
            header,
            episodes: vec![
                Episode {
                    id: 0,
                    transitions: vec![mk(0, 0, 1.0, false), mk(0, 1, 2.0, false), mk(0, 2, 3.0, true)],
                },
                Episode {
                    id: 1,
                    transitions: vec![mk(1, 0, -1.0, false), mk(1, 1, 0.5, false)],
                },
            ],
        }
    }

    #[test]
    fn stats_hand_computed() {
        let stats = compute_stats(&toy_dataset()).unwrap();
        assert_eq!(stats.n_episodes, 2);
        assert_eq!(stats.n_transitions, 5);
        assert_eq!(stats.r_min, -1.0);
        assert_eq!(stats.r_max, 3.0);
        assert_eq!(stats.episode_returns, vec![6.0, -0.5]);
        assert_eq!(stats.mean_return, 2.75);
    }

    #[test]
    fn round_trip_is_byte_identical_and_stats_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("d1.jsonl");
        let p2 = dir.path().join("d2.jsonl");
        let data = toy_dataset();
        let stats0 = compute_stats(&data).unwrap();
        save_dataset(&data, &p1).unwrap();
        let loaded = load_dataset(&p1).unwrap();
        assert_eq!(loaded, data);
        save_dataset(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        let stats1 = compute_stats(&loaded).unwrap();
        for (a, b) in stats0.episode_returns.iter().zip(&stats1.episode_returns) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(stats0.mean_return.to_bits(), stats1.mean_return.to_bits());
    }

    #[test]
    fn loader_rejects_nan_and_bad_dims() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");

        let mut data = toy_dataset();
        data.episodes[0].transitions[1].r = f64::NAN;
        assert!(matches!(save_dataset(&data, &p), Err(Error::NonFinite(_))));

        let mut data = toy_dataset();
        data.episodes[0].transitions[0].a = vec![0.3, 0.4];
        assert!(matches!(data.validate(), Err(Error::Dim(_))));
    }

    #[test]
    fn loader_rejects_missing_fields_and_bad_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let header = r#"{"version":1,"env":"toy","obs_dim":1,"action_dim":1,"gamma":0.9}"#;

        std::fs::write(&p, format!("{header}\n{{\"eps\":0,\"t\":0}}\n")).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Parse { .. })));

        let row0 = r#"{"eps":1,"t":0,"s":[0.0],"a":[0.0],"r":0.0,"s2":[0.0],"done":false}"#;
        let row1 = r#"{"eps":0,"t":0,"s":[0.0],"a":[0.0],"r":0.0,"s2":[0.0],"done":false}"#;
        std::fs::write(&p, format!("{header}\n{row0}\n{row1}\n")).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Schema(_))));

        // t must restart at 0 per episode.
        let row = r#"{"eps":0,"t":1,"s":[0.0],"a":[0.0],"r":0.0,"s2":[0.0],"done":false}"#;
        std::fs::write(&p, format!("{header}\n{row}\n")).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Schema(_))));
    }

    #[test]
    fn stats_error_on_empty() {
        let data = OfflineDataset {
            header: toy_dataset().header,
            episodes: vec![],
        };
        assert!(compute_stats(&data).is_err());
    }
}
