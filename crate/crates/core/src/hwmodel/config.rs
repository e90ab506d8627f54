//! Architecture parameters and the per-event cost table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tally::EventKind;
use crate::error::{Error, Result};

/// Built-in coefficient table, also shipped as `config/coefficients.toml`.
pub const DEFAULT_COEFFICIENTS: &str = include_str!("../../config/coefficients.toml");

/// Tiled IMC architecture. Defaults follow the reference 32 nm design point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareConfig {
    pub technology: String,
    pub clock_hz: f64,
    pub global_buffer_bytes: u64,
    pub tile_buffer_bytes: u64,
    pub pe_buffer_bytes: u64,
    pub pes_per_tile: usize,
    pub crossbars_per_pe: usize,
    pub crossbar_rows: usize,
    pub crossbar_cols: usize,
    pub device_bits: u32,
    pub adc_bits: u32,
    pub decoder_bits: u32,
    /// Physical columns multiplexed onto one ADC.
    pub cols_per_adc: usize,
    /// Extra row-side peripheral area per crossbar in transposable (BP) mode, as a
    /// fraction of the column-side peripherals.
    pub transposable_duplication: f64,
    /// WGU area multiplier in DFA mode, where all layers update at once.
    pub dfa_wgu_scale: f64,
    /// Fixed off-chip traffic energy charged once per epoch.
    pub dram_mj_per_epoch: f64,
    /// Tiles available on the chip.
    pub max_tiles: usize,
    /// MAC lanes per WGU (one WGU per weight tile).
    pub wgu_lanes: usize,
    /// Lanes in the global GradLIF unit.
    pub gradlif_lanes: usize,
    /// Cells written concurrently per crossbar.
    pub write_drivers: usize,
    pub buffer_bytes_per_cycle: usize,
    pub htree_global_bytes_per_cycle: usize,
    pub htree_tile_bytes_per_cycle: usize,
    pub htree_pe_bytes_per_cycle: usize,
    /// Bits per error or gradient element on the interconnect.
    pub error_bits: u32,
    pub coefficients: CostCoefficients,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            technology: "32nm".into(),
            clock_hz: 1e9,
            global_buffer_bytes: 16 * 1024,
            tile_buffer_bytes: 4 * 1024,
            pe_buffer_bytes: 1024,
            pes_per_tile: 4,
            crossbars_per_pe: 4,
            crossbar_rows: 256,
            crossbar_cols: 256,
            device_bits: 4,
            adc_bits: 4,
            decoder_bits: 1,
            cols_per_adc: 8,
            transposable_duplication: 1.0,
            dfa_wgu_scale: 1.25,
            dram_mj_per_epoch: 17.7,
            max_tiles: 64,
            wgu_lanes: 64,
            gradlif_lanes: 64,
            write_drivers: 32,
            buffer_bytes_per_cycle: 32,
            htree_global_bytes_per_cycle: 32,
            htree_tile_bytes_per_cycle: 32,
            htree_pe_bytes_per_cycle: 32,
            error_bits: 8,
            coefficients: CostCoefficients::default(),
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("pes_per_tile", self.pes_per_tile),
            ("crossbars_per_pe", self.crossbars_per_pe),
            ("crossbar_rows", self.crossbar_rows),
            ("crossbar_cols", self.crossbar_cols),
            ("cols_per_adc", self.cols_per_adc),
            ("max_tiles", self.max_tiles),
            ("wgu_lanes", self.wgu_lanes),
            ("gradlif_lanes", self.gradlif_lanes),
            ("write_drivers", self.write_drivers),
            ("buffer_bytes_per_cycle", self.buffer_bytes_per_cycle),
            ("htree_global_bytes_per_cycle", self.htree_global_bytes_per_cycle),
            ("htree_tile_bytes_per_cycle", self.htree_tile_bytes_per_cycle),
            ("htree_pe_bytes_per_cycle", self.htree_pe_bytes_per_cycle),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.crossbar_cols % 2 != 0 {
            return Err(Error::Config("crossbar_cols must be even for differential pairs".into()));
        }
        if !(self.clock_hz > 0.0) {
            return Err(Error::Config("clock_hz must be positive".into()));
        }
        for (name, v) in [
            ("transposable_duplication", self.transposable_duplication),
            ("dfa_wgu_scale", self.dfa_wgu_scale),
            ("dram_mj_per_epoch", self.dram_mj_per_epoch),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number")));
            }
        }
        if self.device_bits == 0 || self.adc_bits == 0 || self.decoder_bits == 0 || self.error_bits == 0 {
            return Err(Error::Config("bit widths must be positive".into()));
        }
        self.coefficients.validate()
    }

    pub fn crossbars_per_tile(&self) -> usize {
        self.pes_per_tile * self.crossbars_per_pe
    }

    /// Logical (signed) weight columns per crossbar.
    pub fn logical_cols(&self) -> usize {
        self.crossbar_cols / 2
    }

    pub fn adcs_per_crossbar(&self) -> usize {
        self.crossbar_cols.div_ceil(self.cols_per_adc)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let hw: Self = toml::from_str(text).map_err(|e| Error::Parse {
            offset: e.span().map_or(0, |s| s.start as u64),
            detail: e.message().to_string(),
        })?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Cost of one occurrence of an event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventCost {
    pub energy_pj: f64,
    pub latency_cycles: f64,
    #[serde(default)]
    pub note: String,
}

/// Per-instance silicon area in mm².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaCosts {
    /// One 256×256 RRAM array.
    pub crossbar_mm2: f64,
    /// Column-side peripherals of one crossbar (ADCs, muxes, decoders, shift-add).
    pub peripherals_mm2: f64,
    pub pe_buffer_mm2: f64,
    pub tile_buffer_mm2: f64,
    pub global_buffer_mm2: f64,
    /// H-tree routing and switches per tile.
    pub htree_tile_mm2: f64,
    /// One WGU serving one weight tile.
    pub wgu_mm2: f64,
    /// GradLIF, loss unit and control.
    pub global_units_mm2: f64,
    #[serde(default)]
    pub note: String,
}

/// Cost table keyed by event name. Missing entries are allowed as long as the
/// corresponding event never occurs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostCoefficients {
    pub crossbar_read: Option<EventCost>,
    pub crossbar_write: Option<EventCost>,
    pub adc_conversion: Option<EventCost>,
    pub dac_toggle: Option<EventCost>,
    pub shift_add: Option<EventCost>,
    pub buffer_byte: Option<EventCost>,
    pub htree_global_byte: Option<EventCost>,
    pub htree_tile_byte: Option<EventCost>,
    pub htree_pe_byte: Option<EventCost>,
    pub wgu_mac: Option<EventCost>,
    pub gradlif_op: Option<EventCost>,
    pub accumulator_op: Option<EventCost>,
    pub dram_access: Option<EventCost>,
    pub area: AreaCosts,
}

impl Default for CostCoefficients {
    fn default() -> Self {
        Self::from_toml(DEFAULT_COEFFICIENTS).expect("built-in coefficient table parses")
    }
}

impl CostCoefficients {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Parse {
            offset: e.span().map_or(0, |s| s.start as u64),
            detail: e.message().to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn event(&self, kind: EventKind) -> Option<&EventCost> {
        match kind {
            EventKind::CrossbarRead => self.crossbar_read.as_ref(),
            EventKind::CrossbarWrite => self.crossbar_write.as_ref(),
            EventKind::AdcConversion => self.adc_conversion.as_ref(),
            EventKind::DacToggle => self.dac_toggle.as_ref(),
            EventKind::ShiftAdd => self.shift_add.as_ref(),
            EventKind::BufferByte => self.buffer_byte.as_ref(),
            EventKind::HtreeGlobalByte => self.htree_global_byte.as_ref(),
            EventKind::HtreeTileByte => self.htree_tile_byte.as_ref(),
            EventKind::HtreePeByte => self.htree_pe_byte.as_ref(),
            EventKind::WguMac => self.wgu_mac.as_ref(),
            EventKind::GradlifOp => self.gradlif_op.as_ref(),
            EventKind::AccumulatorOp => self.accumulator_op.as_ref(),
            EventKind::DramAccess => self.dram_access.as_ref(),
        }
    }

    pub fn event_mut(&mut self, kind: EventKind) -> &mut Option<EventCost> {
        match kind {
            EventKind::CrossbarRead => &mut self.crossbar_read,
            EventKind::CrossbarWrite => &mut self.crossbar_write,
            EventKind::AdcConversion => &mut self.adc_conversion,
            EventKind::DacToggle => &mut self.dac_toggle,
            EventKind::ShiftAdd => &mut self.shift_add,
            EventKind::BufferByte => &mut self.buffer_byte,
            EventKind::HtreeGlobalByte => &mut self.htree_global_byte,
            EventKind::HtreeTileByte => &mut self.htree_tile_byte,
            EventKind::HtreePeByte => &mut self.htree_pe_byte,
            EventKind::WguMac => &mut self.wgu_mac,
            EventKind::GradlifOp => &mut self.gradlif_op,
            EventKind::AccumulatorOp => &mut self.accumulator_op,
            EventKind::DramAccess => &mut self.dram_access,
        }
    }

    /// Cost of `kind`, or a config error naming the missing key.
    pub fn require(&self, kind: EventKind) -> Result<&EventCost> {
        self.event(kind)
            .ok_or_else(|| Error::Config(format!("no cost coefficient for `{kind}`")))
    }

    pub fn validate(&self) -> Result<()> {
        for kind in EventKind::ALL {
            if let Some(c) = self.event(kind) {
                if !(c.energy_pj >= 0.0 && c.latency_cycles >= 0.0)
                    || !c.energy_pj.is_finite()
                    || !c.latency_cycles.is_finite()
                {
                    return Err(Error::Config(format!("coefficients for `{kind}` must be finite and ≥ 0")));
                }
            }
        }
        let a = &self.area;
        for v in [
            a.crossbar_mm2,
            a.peripherals_mm2,
            a.pe_buffer_mm2,
            a.tile_buffer_mm2,
            a.global_buffer_mm2,
            a.htree_tile_mm2,
            a.wgu_mm2,
            a.global_units_mm2,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config("area coefficients must be finite and ≥ 0".into()));
            }
        }
        Ok(())
    }

    /// Every energy coefficient multiplied by `k`.
    pub fn with_energy_scaled(&self, k: f64) -> Self {
        let mut c = self.clone();
        for kind in EventKind::ALL {
            if let Some(e) = c.event_mut(kind) {
                e.energy_pj *= k;
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_design_point() {
        let hw = HardwareConfig::default();
        assert_eq!(hw.clock_hz, 1e9);
        assert_eq!(
            (hw.global_buffer_bytes, hw.tile_buffer_bytes, hw.pe_buffer_bytes),
            (16384, 4096, 1024)
        );
        assert_eq!((hw.pes_per_tile, hw.crossbars_per_pe), (4, 4));
        assert_eq!((hw.crossbar_rows, hw.crossbar_cols), (256, 256));
        assert_eq!((hw.device_bits, hw.adc_bits, hw.decoder_bits), (4, 4, 1));
        assert_eq!(hw.dram_mj_per_epoch, 17.7);
        hw.validate().unwrap();
    }

    #[test]
    fn default_table_covers_every_event() {
        let c = CostCoefficients::default();
        for kind in EventKind::ALL {
            assert!(c.event(kind).is_some(), "{kind}");
        }
    }

    #[test]
    fn unknown_coefficient_key_rejected() {
        let text = format!("{DEFAULT_COEFFICIENTS}\n[bogus_event]\nenergy_pj = 1.0\nlatency_cycles = 1.0\n");
        assert!(matches!(CostCoefficients::from_toml(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn negative_coefficient_rejected() {
        let text = DEFAULT_COEFFICIENTS.replacen("energy_pj = ", "energy_pj = -", 1);
        assert!(matches!(CostCoefficients::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn hardware_toml_round_trip() {
        let hw = HardwareConfig::default();
        let text = toml::to_string(&hw).unwrap();
        assert_eq!(HardwareConfig::from_toml(&text).unwrap(), hw);
    }
}
