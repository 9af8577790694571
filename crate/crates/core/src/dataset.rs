//! Labeled datasets: optimal-scheduler decisions on simulated episodes, stored
//! as JSON lines with one record per slot.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::policy::train::{LabeledEpisode, LabeledSplits};
use crate::policy::MdpState;
use crate::rng::derive_seed;
use crate::scheduler::Association;
use crate::sim::{run_with, OptimalScheduler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateRecord {
    /// LoS indicators per RIS row.
    pub s_links: Vec<Vec<u8>>,
    pub q: Vec<f64>,
    pub z1: f64,
    pub z2: f64,
    /// Image rates per RIS row.
    pub rates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub episode: usize,
    pub slot: usize,
    pub split: Split,
    pub state: StateRecord,
    pub optimal_action: Vec<Vec<u8>>,
}

impl Record {
    fn new(episode: usize, slot: usize, split: Split, state: &MdpState, action: &Association) -> Self {
        let nu = state.num_users;
        let bits = |row: &[bool]| row.iter().map(|&v| u8::from(v)).collect::<Vec<u8>>();
        Record {
            episode,
            slot,
            split,
            state: StateRecord {
                s_links: state.s_links.chunks(nu).map(bits).collect(),
                q: state.q.clone(),
                z1: state.z1,
                z2: state.z2,
                rates: state.rates.chunks(nu).map(|r| r.to_vec()).collect(),
            },
            optimal_action: action.as_flat().chunks(nu).map(bits).collect(),
        }
    }

    pub fn to_state(&self) -> Result<MdpState> {
        let s = &self.state;
        let num_ris = s.s_links.len();
        let num_users = s.q.len();
        let rows_ok = |rows: usize, width: &dyn Fn(usize) -> usize| rows == num_ris && (0..rows).all(|b| width(b) == num_users);
        if num_ris == 0
            || !rows_ok(s.s_links.len(), &|b| s.s_links[b].len())
            || !rows_ok(s.rates.len(), &|b| s.rates[b].len())
            || !rows_ok(self.optimal_action.len(), &|b| self.optimal_action[b].len())
        {
            return Err(Error::dims(format!(
                "record (episode {}, slot {}) has inconsistent shapes",
                self.episode, self.slot
            )));
        }
        Ok(MdpState {
            num_ris,
            num_users,
            s_links: s.s_links.iter().flatten().map(|&v| v != 0).collect(),
            q: s.q.clone(),
            z1: s.z1,
            z2: s.z2,
            rates: s.rates.iter().flatten().copied().collect(),
        })
    }

    pub fn to_action(&self) -> Result<Association> {
        let nb = self.optimal_action.len();
        let nu = self.state.q.len();
        Association::from_matrix(nb, nu, self.optimal_action.iter().flatten().map(|&v| v != 0).collect())
    }
}

/// Episode counts of the train, validation and test splits.
pub fn split_sizes(episodes: usize) -> (usize, usize, usize) {
    let train = (0.8 * episodes as f64).round() as usize;
    let val = ((0.1 * episodes as f64).round() as usize).min(episodes - train);
    (train, val, episodes - train - val)
}

fn split_of(episode: usize, sizes: (usize, usize, usize)) -> Split {
    if episode < sizes.0 {
        Split::Train
    } else if episode < sizes.0 + sizes.1 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Runs the optimal scheduler for `episodes` episodes of `config.horizon`
/// slots; episode `e` is seeded with `derive_seed(config.seed, e)`.
pub fn generate(config: &SimConfig, episodes: usize) -> Result<Vec<Record>> {
    config.validate()?;
    if episodes == 0 {
        return Err(Error::invalid("need at least one episode"));
    }
    let sizes = split_sizes(episodes);
    let per_episode: Vec<Vec<Record>> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let split = split_of(e, sizes);
            let mut records = Vec::with_capacity(config.horizon);
            let mut sched = OptimalScheduler::default();
            run_with(config, derive_seed(config.seed, e as u64), &mut sched, |view, out| {
                records.push(Record::new(e, view.t, split, &view.state, &out.assoc));
            })?;
            Ok(records)
        })
        .collect::<Result<_>>()?;
    Ok(per_episode.into_iter().flatten().collect())
}

pub fn write_jsonl(records: &[Record], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::invalid(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text).map_err(|e| match e {
        Error::InvalidParameter(message) => Error::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Groups records into episodes, ordered by episode and slot, per split.
pub fn to_splits(records: &[Record]) -> Result<LabeledSplits> {
    let mut sorted: Vec<&Record> = records.iter().collect();
    sorted.sort_by_key(|r| (r.episode, r.slot));
    let mut splits = LabeledSplits::default();
    let mut i = 0;
    while i < sorted.len() {
        let ep = sorted[i].episode;
        let split = sorted[i].split;
        let mut e = LabeledEpisode {
            states: Vec::new(),
            actions: Vec::new(),
        };
        while i < sorted.len() && sorted[i].episode == ep {
            let r = sorted[i];
            if r.split != split {
                return Err(Error::invalid(format!("episode {ep} spans several splits")));
            }
            if r.slot != e.states.len() {
                return Err(Error::invalid(format!("episode {ep} is missing slot {}", e.states.len())));
            }
            e.states.push(r.to_state()?);
            e.actions.push(r.to_action()?);
            i += 1;
        }
        match split {
            Split::Train => splits.train.push(e),
            Split::Val => splits.val.push(e),
            Split::Test => splits.test.push(e),
        }
    }
    Ok(splits)
}

pub fn load(path: &Path) -> Result<LabeledSplits> {
    to_splits(&read_jsonl(path)?)
}
