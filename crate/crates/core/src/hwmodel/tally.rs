//! Hardware event counters accumulated while the simulator runs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Countable hardware events. Names double as cost-coefficient keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// One analog activation of one physical crossbar (one bit-plane).
    CrossbarRead,
    /// One programming pulse sequence on one RRAM cell.
    CrossbarWrite,
    AdcConversion,
    /// One driven row (or column, for transposed reads).
    DacToggle,
    ShiftAdd,
    BufferByte,
    HtreeGlobalByte,
    HtreeTileByte,
    HtreePeByte,
    WguMac,
    GradlifOp,
    AccumulatorOp,
    DramAccess,
}

impl EventKind {
    pub const ALL: [EventKind; 13] = [
        EventKind::CrossbarRead,
        EventKind::CrossbarWrite,
        EventKind::AdcConversion,
        EventKind::DacToggle,
        EventKind::ShiftAdd,
        EventKind::BufferByte,
        EventKind::HtreeGlobalByte,
        EventKind::HtreeTileByte,
        EventKind::HtreePeByte,
        EventKind::WguMac,
        EventKind::GradlifOp,
        EventKind::AccumulatorOp,
        EventKind::DramAccess,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::CrossbarRead => "crossbar_read",
            EventKind::CrossbarWrite => "crossbar_write",
            EventKind::AdcConversion => "adc_conversion",
            EventKind::DacToggle => "dac_toggle",
            EventKind::ShiftAdd => "shift_add",
            EventKind::BufferByte => "buffer_byte",
            EventKind::HtreeGlobalByte => "htree_global_byte",
            EventKind::HtreeTileByte => "htree_tile_byte",
            EventKind::HtreePeByte => "htree_pe_byte",
            EventKind::WguMac => "wgu_mac",
            EventKind::GradlifOp => "gradlif_op",
            EventKind::AccumulatorOp => "accumulator_op",
            EventKind::DramAccess => "dram_access",
        }
    }

    pub fn is_communication(self) -> bool {
        matches!(
            self,
            EventKind::HtreeGlobalByte | EventKind::HtreeTileByte | EventKind::HtreePeByte
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown hardware event `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
    Update,
}

/// Component instance an event is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    /// Hardware serving weight layer `l` (0-based, input→first hidden is 0).
    Layer(usize),
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Site {
    pub phase: Phase,
    pub unit: Unit,
}

impl Site {
    pub fn new(phase: Phase, unit: Unit) -> Self {
        Self { phase, unit }
    }

    pub fn layer(phase: Phase, layer: usize) -> Self {
        Self::new(phase, Unit::Layer(layer))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTally {
    counts: BTreeMap<(EventKind, Phase, Unit), u64>,
}

impl EventTally {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn record(&mut self, kind: EventKind, count: u64, site: Site) {
        if count == 0 {
            return;
        }
        *self.counts.entry((kind, site.phase, site.unit)).or_insert(0) += count;
    }

    /// Records an event given by name, rejecting names that are not hardware events.
    pub fn record_named(&mut self, kind: &str, count: u64, site: Site) -> Result<()> {
        let kind = kind.parse()?;
        self.record(kind, count, site);
        Ok(())
    }

    pub fn get(&self, kind: EventKind, site: Site) -> u64 {
        self.counts
            .get(&(kind, site.phase, site.unit))
            .copied()
            .unwrap_or(0)
    }

    /// Sum of one event kind over all phases and units.
    pub fn total(&self, kind: EventKind) -> u64 {
        self.counts
            .iter()
            .filter(|((k, _, _), _)| *k == kind)
            .map(|(_, c)| *c)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn merge(&mut self, other: &EventTally) {
        for (key, count) in &other.counts {
            *self.counts.entry(*key).or_insert(0) += count;
        }
    }

    /// Every count multiplied by `k`.
    pub fn scaled(&self, k: u64) -> EventTally {
        EventTally {
            counts: self
                .counts
                .iter()
                .filter(|_| k > 0)
                .map(|(key, c)| (*key, c * k))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (EventKind, Site, u64)> + '_ {
        self.counts
            .iter()
            .map(|((k, p, u), c)| (*k, Site::new(*p, *u), *c))
    }

    /// Layers that carry at least one event in `phase`.
    pub fn layers_in(&self, phase: Phase) -> Vec<usize> {
        let mut layers: Vec<usize> = self
            .counts
            .keys()
            .filter_map(|(_, p, u)| match (p, u) {
                (p, Unit::Layer(l)) if *p == phase => Some(*l),
                _ => None,
            })
            .collect();
        layers.dedup();
        layers.sort_unstable();
        layers.dedup();
        layers
    }
}
