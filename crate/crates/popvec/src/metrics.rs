//! Append-only comma-separated run log.
//!
//! Columns: `wall_clock_s, env_steps, update_steps, member_id, episode_return, event`.
//! `member_id` and `episode_return` are empty on rows that do not concern
//! one member.

use std::fs::{File, OpenOptions};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub wall_clock_s: f64,
    pub env_steps: u64,
    pub update_steps: u64,
    pub member_id: Option<usize>,
    pub episode_return: Option<f64>,
    pub event: String,
}

pub struct MetricsLog {
    writer: Option<csv::Writer<File>>,
    start: Instant,
}

impl MetricsLog {
    /// Appends to `path`, writing the header only when the file is new or
    /// empty. `None` discards rows.
    pub fn open(path: Option<&Path>) -> Result<Self> {
        let writer = match path {
            None => None,
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)
                        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(format!("opening metrics log {}", p.display()), e))?;
                let fresh = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
                Some(
                    csv::WriterBuilder::new()
                        .has_headers(fresh)
                        .from_writer(file),
                )
            }
        };
        Ok(Self {
            writer,
            start: Instant::now(),
        })
    }

    pub fn elapsed_s(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn row(
        &mut self,
        env_steps: u64,
        update_steps: u64,
        member_id: Option<usize>,
        episode_return: Option<f64>,
        event: &str,
    ) -> Result<()> {
        let row = MetricsRow {
            wall_clock_s: self.elapsed_s(),
            env_steps,
            update_steps,
            member_id,
            episode_return,
            event: event.to_string(),
        };
        if let Some(w) = &mut self.writer {
            w.serialize(row)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()
                .map_err(|e| Error::io("flushing metrics log", e))?;
        }
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
