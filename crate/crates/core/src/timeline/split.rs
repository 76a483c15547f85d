use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use std::collections::HashMap;

use super::{Timeline, TimelineError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Timelines of one split, in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partition {
    pub train: Vec<Timeline>,
    pub validation: Vec<Timeline>,
    pub test: Vec<Timeline>,
}

impl CohortSplit {
    /// Assigns each timeline to its split; unlisted patients are dropped.
    pub fn partition(&self, timelines: &[Timeline]) -> Partition {
        let role: HashMap<&str, usize> = [&self.train, &self.validation, &self.test]
            .iter()
            .enumerate()
            .flat_map(|(r, ids)| ids.iter().map(move |id| (id.as_str(), r)))
            .collect();
        let mut out = Partition::default();
        for t in timelines {
            match role.get(t.patient_id.as_str()) {
                Some(0) => out.train.push(t.clone()),
                Some(1) => out.validation.push(t.clone()),
                Some(2) => out.test.push(t.clone()),
                _ => {}
            }
        }
        out
    }

    /// SHA-256 hex of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("split serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `round(num / den)` with halves rounded up, in exact integer arithmetic.
fn round_half_up(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// Seeded shuffle, then 20% test, then 10% of the remainder as validation.
pub fn split_cohort(patient_ids: &[String], seed: u64) -> Result<CohortSplit, TimelineError> {
    let n = patient_ids.len();
    if n < 3 {
        return Err(TimelineError::CohortTooSmall { n });
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = patient_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(TimelineError::DuplicatePatient(dup.clone()));
    }
    let mut ids = patient_ids.to_vec();
    ids.shuffle(&mut crate::rng::seeded(seed));
    let n_test = round_half_up(n, 5);
    let n_val = round_half_up(n - n_test, 10);
    let test = ids.split_off(n - n_test);
    let validation = ids.split_off(ids.len() - n_val);
    Ok(CohortSplit { seed, train: ids, validation, test })
}
