use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, Result, TrainError};

pub const LOG_CSV: &str = "train_log.csv";
pub const LOG_JSON: &str = "train_log.json";
/// Wall-clock times live apart from the log so that the log itself is
/// byte-reproducible.
pub const TIMING_CSV: &str = "timing.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss; absent for the initial evaluation (epoch 0).
    pub loss: Option<f64>,
    pub val_acc: f64,
    /// Checkpoint path relative to the run directory.
    pub ckpt_path: String,
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainLog {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            seed,
            epochs: Vec::new(),
            best_epoch: 0,
            best_val_acc: 0.0,
        }
    }

    pub fn push(&mut self, rec: EpochRecord) {
        if let Some(last) = self.epochs.last() {
            assert!(rec.epoch > last.epoch, "epochs must increase");
        }
        self.epochs.push(rec);
    }

    /// Writes the CSV and JSON logs, plus the timing file when `timing` is set.
    pub fn write(&self, run_dir: &Path, timing: bool) -> Result<()> {
        let path = run_dir.join(LOG_CSV);
        let mut w = csv::Writer::from_path(&path).map_err(|e| TrainError::Format(e.to_string()))?;
        let csv_err = |e: csv::Error| TrainError::Format(e.to_string());
        w.write_record(["epoch", "loss", "val_acc", "ckpt_path", "config_hash", "seed"])
            .map_err(csv_err)?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.loss.map(|l| l.to_string()).unwrap_or_default(),
                r.val_acc.to_string(),
                r.ckpt_path.clone(),
                self.config_hash.clone(),
                self.seed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&path))?;

        let path = run_dir.join(LOG_JSON);
        let mut text = serde_json::to_string_pretty(self).expect("log serialises");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        if !timing {
            return Ok(());
        }

        let path = run_dir.join(TIMING_CSV);
        let mut t = String::from("epoch,wall_secs\n");
        for r in &self.epochs {
            t.push_str(&format!("{},{:.3}\n", r.epoch, r.wall_secs));
        }
        fs::write(&path, t).map_err(io_err(&path))
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LOG_JSON);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Format(format!("{}: {e}", path.display())))
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = TrainLog::new("h", 3);
        log.push(EpochRecord {
            epoch: 0,
            loss: None,
            val_acc: 0.5,
            ckpt_path: "checkpoints/epoch-000.ckpt".into(),
            wall_secs: 1.0,
        });
        log.push(EpochRecord {
            epoch: 1,
            loss: Some(12.5),
            val_acc: 0.75,
            ckpt_path: "checkpoints/epoch-001.ckpt".into(),
            wall_secs: 2.0,
        });
        log.write(dir.path(), true).unwrap();
        let csv = fs::read_to_string(dir.path().join(LOG_CSV)).unwrap();
        assert!(csv.starts_with("epoch,loss,val_acc,ckpt_path"));
        assert!(csv.contains("1,12.5,0.75,checkpoints/epoch-001.ckpt,h,3"));
        let back = TrainLog::load(dir.path()).unwrap();
        assert_eq!(back.epochs.len(), 2);
        assert_eq!(back.epochs[1].loss, Some(12.5));
    }

    #[test]
    #[should_panic]
    fn epochs_must_increase() {
        let mut log = TrainLog::new("h", 0);
        let r = EpochRecord {
            epoch: 2,
            loss: None,
            val_acc: 0.0,
            ckpt_path: String::new(),
            wall_secs: 0.0,
        };
        log.push(r.clone());
        log.push(r);
    }
}
