use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const RUNLOG_HEADER: &str = "step,split,mlm,itm,visual,total,itm_acc";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Input(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub split: Split,
    pub mlm: f64,
    pub itm: f64,
    pub visual: f64,
    pub total: f64,
    pub itm_acc: f64,
}

impl LogRow {
    /// Language-side loss, comparable across visual loss modes.
    pub fn matching_total(&self) -> f64 {
        self.mlm + self.itm
    }
}

/// Evaluation history. Values are written in shortest round-trip form so a
/// parsed log reproduces the in-memory one exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    rows: Vec<LogRow>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(prev) = self.rows.iter().rev().find(|r| r.split == row.split) {
            if row.step <= prev.step {
                return Err(Error::Contract(format!(
                    "{} log steps must increase: {} after {}",
                    row.split, row.step, prev.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Validation row with the lowest total; the earliest wins ties.
    pub fn best(&self) -> Option<&LogRow> {
        self.split(Split::Val).fold(None, |best: Option<&LogRow>, r| match best {
            Some(b) if b.total <= r.total => Some(b),
            _ => Some(r),
        })
    }

    pub fn last(&self, split: Split) -> Option<&LogRow> {
        self.split(split).last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUNLOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:?},{:?},{:?},{:?},{:?}\n",
                r.step, r.split, r.mlm, r.itm, r.visual, r.total, r.itm_acc
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RUNLOG_HEADER) {
            return Err(Error::Input(format!("run log must start with {RUNLOG_HEADER:?}")));
        }
        let mut log = Self::new();
        for (no, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Input(format!("run log line {}: {line:?}", no + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            log.push(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                split: f[1].parse()?,
                mlm: num(f[2])?,
                itm: num(f[3])?,
                visual: num(f[4])?,
                total: num(f[5])?,
                itm_acc: num(f[6])?,
            })?;
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}
