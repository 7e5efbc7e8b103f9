//! Structured event log: JSON Lines of `{"t", "ch", "data"}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub ch: String,
    pub data: Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub events: Vec<Event>,
}

impl RunLog {
    pub fn new() -> Self {
        RunLog::default()
    }

    /// Appends an event. Time never runs backwards: an earlier stamp is
    /// raised to the last one.
    pub fn push(&mut self, t: f64, ch: &str, data: Value) {
        let t = self.events.last().map_or(t, |e| t.max(e.t));
        self.events.push(Event { t, ch: ch.to_string(), data });
    }

    pub fn channel<'a>(&'a self, ch: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| e.ch == ch)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    /// Blank lines are skipped; anything else must be an event, in
    /// non-decreasing time.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<RunLog> {
        let mut log = RunLog::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Event =
                serde_json::from_str(&line).map_err(|err| HarnessError::Log { line: i + 1, reason: err.to_string() })?;
            if log.events.last().is_some_and(|p| e.t < p.t) {
                return Err(HarnessError::Log { line: i + 1, reason: "time runs backwards".into() });
            }
            log.events.push(e);
        }
        Ok(log)
    }
}

/// Reads a float, treating JSON null (how NaN serializes) as NaN.
pub(crate) fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

/// Reads `[x, y]` pairs.
pub(crate) fn points(v: &Value) -> Vec<(f64, f64)> {
    v.as_array()
        .map(|a| {
            a.iter()
                .filter_map(|p| {
                    let p = p.as_array()?;
                    Some((p.first()?.as_f64()?, p.get(1)?.as_f64()?))
                })
                .collect()
        })
        .unwrap_or_default()
}
