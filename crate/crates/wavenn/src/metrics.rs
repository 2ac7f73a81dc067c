//! The per-epoch metrics record and its CSV encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "run,epoch,train_loss,train_acc,test_acc,lr,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: u32,
    pub epoch: u32,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train_acc", self.train_acc), ("test_acc", self.test_acc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::State(format!("{name} {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// One CSV line. Floats use Rust's shortest round-trip formatting, so
    /// identical values always produce identical text.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.run, self.epoch, self.train_loss, self.train_acc, self.test_acc, self.lr, self.seconds
        )
    }
}
