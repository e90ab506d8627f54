//! Hardware mapping, event accounting and cost estimation.

pub mod config;
pub mod cost;
pub mod mapping;
pub mod tally;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{AreaCosts, CostCoefficients, EventCost, HardwareConfig};
pub use cost::{
    compare_modes, critical_path, estimate, estimate_area, estimate_energy, estimate_latency,
    AreaBreakdown, CostReport, EnergyBreakdown, LatencyBreakdown, ModeComparison, Workload,
};
pub use mapping::{map_network, FeedbackMapping, LayerMapping, MappingPlan, SliceAssignment};
pub use tally::{EventKind, EventTally, Phase, Site, Unit};

/// Training rule, which also fixes the hardware variant: BP needs transposable
/// crossbars, DFA needs the feedback tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bp,
    Dfa,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Bp => "BP",
            Mode::Dfa => "DFA",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bp" => Ok(Mode::Bp),
            "dfa" => Ok(Mode::Dfa),
            _ => Err(Error::Config(format!("unknown mode `{s}`; expected bp or dfa"))),
        }
    }
}
