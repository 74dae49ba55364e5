use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which online learner produced a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Offline-informed Thompson sampling.
    Tsod,
    /// Thompson sampling from a `λ₀I` prior, ignoring the offline data.
    TsNoOffline,
    /// Warm start at the offline estimate with a `λ₀I` precision.
    OfflineEstimateOnly,
    /// Always plays the true optimal gain. Used to sanity-check regret.
    Oracle,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Tsod,
        Variant::TsNoOffline,
        Variant::OfflineEstimateOnly,
        Variant::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tsod => "tsod",
            Variant::TsNoOffline => "ts_no_offline",
            Variant::OfflineEstimateOnly => "offline_estimate_only",
            Variant::Oracle => "oracle",
        }
    }

    pub fn id(self) -> u64 {
        match self {
            Variant::Tsod => 0,
            Variant::TsNoOffline => 1,
            Variant::OfflineEstimateOnly => 2,
            Variant::Oracle => 3,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub cost: f64,
    pub instant_regret: f64,
    pub cum_regret: f64,
    pub beta: f64,
    pub rejections: usize,
    /// `‖x_t‖` at the state where the cost was charged.
    pub state_norm: f64,
}

/// Per-step regret of one episode against `J(θ_*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub records: Vec<TraceRecord>,
    pub j_star: f64,
    pub run_id: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl RegretTrace {
    pub fn new(j_star: f64, run_id: usize, variant: Variant, seed: u64) -> Self {
        Self {
            records: Vec::new(),
            j_star,
            run_id,
            variant,
            seed,
        }
    }

    pub fn push(&mut self, cost: f64, beta: f64, rejections: usize, state_norm: f64) {
        let instant_regret = cost - self.j_star;
        let cum_regret = self.final_regret() + instant_regret;
        self.records.push(TraceRecord {
            t: self.records.len() + 1,
            cost,
            instant_regret,
            cum_regret,
            beta,
            rejections,
            state_norm,
        });
    }

    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub const CSV_HEADER: &'static str = "t,cost,instant_regret,cum_regret,beta,rejections,state_norm";

    /// The per-run CSV: header plus one LF-terminated row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e}\n",
                r.t, r.cost, r.instant_regret, r.cum_regret, r.beta, r.rejections, r.state_norm
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_regret_accumulates() {
        let mut trace = RegretTrace::new(2.0, 0, Variant::Tsod, 1);
        for c in [1.0, 3.0, 2.5] {
            trace.push(c, 0.0, 0, 0.0);
        }
        let cum: Vec<f64> = trace.records.iter().map(|r| r.cum_regret).collect();
        assert_eq!(cum, vec![-1.0, 0.0, 0.5]);
        assert_eq!(trace.records[1].instant_regret, 1.0);
        assert_eq!(trace.records[2].t, 3);
    }

    #[test]
    fn csv_layout() {
        let mut trace = RegretTrace::new(0.0, 0, Variant::Tsod, 1);
        trace.push(0.1, 2.0, 3, 0.5);
        let csv = trace.to_csv();
        let mut lines = csv.split('\n');
        assert_eq!(lines.next().unwrap(), RegretTrace::CSV_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 7);
        assert_eq!(row[0], "1");
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.1);
        assert_eq!(row[5], "3");
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("ts".parse::<Variant>().is_err());
    }
}
