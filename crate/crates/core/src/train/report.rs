use serde::{Deserialize, Serialize};

use crate::rvq::LossTerms;

/// Loss curve and codebook health of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<LossTerms>,
    /// Fraction of codes used on the training frames, per stage.
    pub utilization: Vec<f64>,
    pub reseeded: usize,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub(crate) fn push(&mut self, t: LossTerms) {
        self.steps.push(t);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss_code,loss_comm,loss_recon,loss_total\n");
        for (i, t) in self.steps.iter().enumerate() {
            s.push_str(&format!("{i},{},{},{},{}\n", t.code, t.comm, t.recon, t.total));
        }
        s
    }

    /// Compact summary: first and last losses, utilization, timing.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "steps": self.steps.len(),
            "initial": self.steps.first(),
            "final": self.steps.last(),
            "utilization": self.utilization,
            "reseeded": self.reseeded,
            "wall_clock_s": self.wall_clock_s,
        })
    }
}
