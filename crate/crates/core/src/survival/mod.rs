//! Multi-modal survival encoders and fusion, the Cox partial-likelihood loss
//! and the concordance index.

pub mod cindex;
pub mod cox;
pub mod head;

pub use cindex::concordance_index;
pub use cox::{coxph_loss, coxph_loss_tensor};
pub use head::{SurvivalFeatures, SurvivalHead};

use std::path::Path;

use crate::error::{Error, Result};

/// Parallel arrays of predicted risks, observed times and event flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RiskBatch {
    pub risks: Vec<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl RiskBatch {
    pub fn new(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        let b = RiskBatch { risks, times, events };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.risks.len() != self.times.len() || self.risks.len() != self.events.len() {
            return Err(Error::shape(format!(
                "risk batch arrays differ in length ({}, {}, {})",
                self.risks.len(),
                self.times.len(),
                self.events.len()
            )));
        }
        if let Some(t) = self.times.iter().find(|t| !(**t >= 0.0)) {
            return Err(Error::Data(format!("survival time {t} is not a non-negative number")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.risks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risks.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.events.iter().filter(|e| **e).count()
    }
}

/// Writes `sample_id,risk,time_days,event` rows.
pub fn write_risk_csv(path: &Path, ids: &[String], batch: &RiskBatch) -> Result<()> {
    batch.validate()?;
    if ids.len() != batch.len() {
        return Err(Error::shape(format!("{} ids for {} risks", ids.len(), batch.len())));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["sample_id", "risk", "time_days", "event"]).map_err(|e| Error::Io(e.into()))?;
    for i in 0..batch.len() {
        let row = [
            ids[i].clone(),
            batch.risks[i].to_string(),
            batch.times[i].to_string(),
            u8::from(batch.events[i]).to_string(),
        ];
        w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(RiskBatch::new(vec![0.0], vec![1.0, 2.0], vec![true]).is_err());
        assert!(RiskBatch::new(vec![0.0], vec![-1.0], vec![true]).is_err());
    }

    #[test]
    fn csv_export() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("risk.csv");
        let b = RiskBatch::new(vec![0.5, -1.0], vec![3.0, 10.5], vec![true, false]).unwrap();
        write_risk_csv(&p, &["a".into(), "b".into()], &b).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "sample_id,risk,time_days,event\na,0.5,3,1\nb,-1,10.5,0\n");
    }
}
