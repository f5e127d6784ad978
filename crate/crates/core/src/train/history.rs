use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Everything except the wall-clock column.
    pub fn metrics(&self) -> (u64, f64, f64, f64, f64) {
        (self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }

    /// Row with the lowest validation loss; earliest wins ties.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.rows
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_loss <= r.val_loss => Some(b),
                _ => Some(r),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.seconds
            );
        }
        s
    }

    pub fn from_csv(src: &str) -> Result<Self> {
        let mut lines = src.lines();
        if lines.next().map(str::trim) != Some(HISTORY_HEADER) {
            return Err(TrainError::History("missing or unexpected header".into()));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                let bad = || TrainError::History(format!("row {}: `{l}`", i + 1));
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 6 {
                    return Err(bad());
                }
                let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad());
                Ok(EpochRecord {
                    epoch: f[0].trim().parse().map_err(|_| bad())?,
                    train_loss: num(1)?,
                    train_acc: num(2)?,
                    val_loss: num(3)?,
                    val_acc: num(4)?,
                    seconds: num(5)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }
}

/// Writes the metrics CSV.
pub fn emit_history(history: &TrainHistory, path: &Path) -> Result<()> {
    if history.is_empty() {
        return Err(TrainError::History("no completed epochs to write".into()));
    }
    fs::write(path, history.to_csv()).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}
