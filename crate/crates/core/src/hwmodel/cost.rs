//! Converts event tallies and mappings into energy, latency and area.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::HardwareConfig;
use super::mapping::MappingPlan;
use super::tally::{EventKind, EventTally, Phase, Site, Unit};
use super::Mode;
use crate::error::{Error, Result};

const PJ_TO_MJ: f64 = 1e-9;

/// Per-epoch energy in mJ, ordered as tile compute, H-tree, WGU, global units, buffers, DRAM.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub tile_compute: f64,
    pub htree: f64,
    pub wgu: f64,
    pub global_units: f64,
    pub buffers: f64,
    pub dram: f64,
}

impl EnergyBreakdown {
    pub const LABELS: [&'static str; 6] = ["tile_compute", "htree", "wgu", "global_units", "buffers", "dram"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.tile_compute,
            self.htree,
            self.wgu,
            self.global_units,
            self.buffers,
            self.dram,
        ]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    /// Everything except the DRAM constant.
    pub fn on_chip(&self) -> f64 {
        self.values()[..5].iter().sum()
    }
}

/// Per-epoch latency in ms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub forward: f64,
    pub backward: f64,
    pub wgu_update: f64,
    pub communication: f64,
}

impl LatencyBreakdown {
    pub const LABELS: [&'static str; 4] = ["forward", "backward", "wgu_update", "communication"];

    pub fn values(&self) -> [f64; 4] {
        [self.forward, self.backward, self.wgu_update, self.communication]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

/// Chip area in mm².
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaBreakdown {
    pub crossbars: f64,
    pub peripherals: f64,
    pub transposable_duplicates: f64,
    pub b_tile: f64,
    pub wgu: f64,
    pub buffers: f64,
    pub htree: f64,
    pub global_units: f64,
}

impl AreaBreakdown {
    pub const LABELS: [&'static str; 8] = [
        "crossbars",
        "peripherals",
        "transposable_duplicates",
        "b_tile",
        "wgu",
        "buffers",
        "htree",
        "global_units",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.crossbars,
            self.peripherals,
            self.transposable_duplicates,
            self.b_tile,
            self.wgu,
            self.buffers,
            self.htree,
            self.global_units,
        ]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

/// What was simulated; reports are only comparable across equal workloads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub architecture: String,
    pub timesteps: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: Mode,
    pub workload: Workload,
    pub energy: EnergyBreakdown,
    pub latency: LatencyBreakdown,
    pub area: AreaBreakdown,
    /// Test accuracy (percent) reached under this mode, when known.
    pub accuracy: Option<f64>,
}

impl CostReport {
    pub fn energy_mj(&self) -> f64 {
        self.energy.total()
    }

    pub fn latency_ms(&self) -> f64 {
        self.latency.total()
    }

    pub fn area_mm2(&self) -> f64 {
        self.area.total()
    }

    /// Entry-wise mean of several per-epoch reports over the same workload.
    pub fn mean(reports: &[CostReport]) -> Result<CostReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Input("no reports to average".into()))?;
        if reports
            .iter()
            .any(|r| r.workload != first.workload || r.mode != first.mode)
        {
            return Err(Error::Input("cannot average reports of different workloads".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&CostReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(CostReport {
            mode: first.mode,
            workload: first.workload.clone(),
            energy: EnergyBreakdown {
                tile_compute: avg(&|r| r.energy.tile_compute),
                htree: avg(&|r| r.energy.htree),
                wgu: avg(&|r| r.energy.wgu),
                global_units: avg(&|r| r.energy.global_units),
                buffers: avg(&|r| r.energy.buffers),
                dram: avg(&|r| r.energy.dram),
            },
            latency: LatencyBreakdown {
                forward: avg(&|r| r.latency.forward),
                backward: avg(&|r| r.latency.backward),
                wgu_update: avg(&|r| r.latency.wgu_update),
                communication: avg(&|r| r.latency.communication),
            },
            area: first.area.clone(),
            accuracy: first.accuracy,
        })
    }

    /// Structured export with breakdown arrays in plotting order.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Section<'a> {
            labels: &'a [&'static str],
            values: Vec<f64>,
            total: f64,
        }
        #[derive(Serialize)]
        struct Export<'a> {
            schema_version: u32,
            mode: Mode,
            workload: &'a Workload,
            accuracy: Option<f64>,
            energy_mj: Section<'a>,
            latency_ms: Section<'a>,
            area_mm2: Section<'a>,
        }
        let e = Export {
            schema_version: 1,
            mode: self.mode,
            workload: &self.workload,
            accuracy: self.accuracy,
            energy_mj: Section {
                labels: &EnergyBreakdown::LABELS,
                values: self.energy.values().to_vec(),
                total: self.energy.total(),
            },
            latency_ms: Section {
                labels: &LatencyBreakdown::LABELS,
                values: self.latency.values().to_vec(),
                total: self.latency.total(),
            },
            area_mm2: Section {
                labels: &AreaBreakdown::LABELS,
                values: self.area.values().to_vec(),
                total: self.area.total(),
            },
        };
        serde_json::to_string_pretty(&e).map_err(|e| Error::Internal(e.to_string()))
    }
}

fn energy_group(kind: EventKind) -> usize {
    match kind {
        EventKind::CrossbarRead
        | EventKind::CrossbarWrite
        | EventKind::AdcConversion
        | EventKind::DacToggle
        | EventKind::ShiftAdd
        | EventKind::AccumulatorOp => 0,
        EventKind::HtreeGlobalByte | EventKind::HtreeTileByte | EventKind::HtreePeByte => 1,
        EventKind::WguMac => 2,
        EventKind::GradlifOp => 3,
        EventKind::BufferByte => 4,
        EventKind::DramAccess => 5,
    }
}

/// Energy of one epoch's tally; the DRAM constant is its own entry.
pub fn estimate_energy(tally: &EventTally, hw: &HardwareConfig) -> Result<EnergyBreakdown> {
    let mut pj = [0.0; 6];
    for (kind, _, count) in tally.iter() {
        let c = hw.coefficients.require(kind)?;
        pj[energy_group(kind)] += count as f64 * c.energy_pj;
    }
    Ok(EnergyBreakdown {
        tile_compute: pj[0] * PJ_TO_MJ,
        htree: pj[1] * PJ_TO_MJ,
        wgu: pj[2] * PJ_TO_MJ,
        global_units: pj[3] * PJ_TO_MJ,
        buffers: pj[4] * PJ_TO_MJ,
        dram: pj[5] * PJ_TO_MJ + hw.dram_mj_per_epoch,
    })
}

/// Longest path through a DAG with node costs. Cycles are an internal error.
pub fn critical_path(costs: &[f64], edges: &[(usize, usize)]) -> Result<f64> {
    let n = costs.len();
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::Internal(format!("edge {a}->{b} outside {n} stages")));
        }
        succ[a].push(b);
        indegree[b] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut finish = vec![0.0f64; n];
    let mut start = vec![0.0f64; n];
    let mut visited = 0;
    while let Some(v) = ready.pop() {
        visited += 1;
        finish[v] = start[v] + costs[v];
        for &w in &succ[v] {
            start[w] = start[w].max(finish[v]);
            indegree[w] -= 1;
            if indegree[w] == 0 {
                ready.push(w);
            }
        }
    }
    if visited != n {
        return Err(Error::Internal("stage dependency graph has a cycle".into()));
    }
    Ok(finish.into_iter().fold(0.0, f64::max))
}

/// Hardware lanes that process `kind` events concurrently at `site`.
fn parallel_units(kind: EventKind, site: Site, plan: &MappingPlan, hw: &HardwareConfig, mode: Mode) -> Result<f64> {
    let crossbars = || -> Result<usize> {
        let Unit::Layer(l) = site.unit else {
            return Ok(1);
        };
        let c = if site.phase == Phase::Backward && mode == Mode::Dfa {
            plan.feedback_crossbars(l)
        } else {
            plan.layers.get(l).map_or(0, |m| m.crossbars())
        };
        if c == 0 {
            return Err(Error::Internal(format!(
                "{kind} events at {site:?} but no crossbars mapped there"
            )));
        }
        Ok(c)
    };
    let tiles = || match site.unit {
        Unit::Layer(l) => plan.layers.get(l).map_or(1, |m| m.tiles().len().max(1)),
        Unit::Global => 1,
    };
    let n = match kind {
        EventKind::CrossbarRead => crossbars()?,
        EventKind::DacToggle => crossbars()? * hw.crossbar_rows,
        EventKind::AdcConversion | EventKind::ShiftAdd | EventKind::AccumulatorOp => {
            crossbars()? * hw.adcs_per_crossbar()
        }
        EventKind::CrossbarWrite => crossbars()? * hw.write_drivers,
        EventKind::WguMac => hw.wgu_lanes * tiles(),
        EventKind::GradlifOp => hw.gradlif_lanes,
        EventKind::BufferByte => hw.buffer_bytes_per_cycle,
        EventKind::HtreeGlobalByte => hw.htree_global_bytes_per_cycle,
        EventKind::HtreeTileByte => hw.htree_tile_bytes_per_cycle,
        EventKind::HtreePeByte => hw.htree_pe_bytes_per_cycle,
        EventKind::DramAccess => 1,
    };
    Ok(n as f64)
}

/// Per-epoch latency: per-phase critical paths over the layer stage graph plus
/// serialized interconnect time.
///
/// Forward is a layer chain. Backward starts from the output-error stage; BP then
/// walks the layers in sequence while DFA fans out to all layers at once. Weight
/// updates chain in BP and run concurrently in DFA.
pub fn estimate_latency(
    tally: &EventTally,
    plan: &MappingPlan,
    hw: &HardwareConfig,
    mode: Mode,
) -> Result<LatencyBreakdown> {
    let mut stage: BTreeMap<(Phase, Unit), f64> = BTreeMap::new();
    let mut comm = 0.0;
    for (kind, site, count) in tally.iter() {
        let c = hw.coefficients.require(kind)?;
        if c.latency_cycles == 0.0 {
            continue;
        }
        let cycles = count as f64 * c.latency_cycles / parallel_units(kind, site, plan, hw, mode)?;
        if kind.is_communication() {
            comm += cycles;
        } else {
            *stage.entry((site.phase, site.unit)).or_insert(0.0) += cycles;
        }
    }
    let layers = plan.layers.len().max(
        tally
            .iter()
            .filter_map(|(_, s, _)| match s.unit {
                Unit::Layer(l) => Some(l + 1),
                Unit::Global => None,
            })
            .max()
            .unwrap_or(0),
    );
    let cost = |phase, unit| stage.get(&(phase, unit)).copied().unwrap_or(0.0);

    // Node 0 is the global stage; node 1 + l is layer l.
    let phase_path = |phase: Phase, parallel: bool, global_first: bool| -> Result<f64> {
        let mut costs = vec![cost(phase, Unit::Global)];
        costs.extend((0..layers).map(|l| cost(phase, Unit::Layer(l))));
        let mut edges = Vec::new();
        if parallel {
            edges.extend((0..layers).map(|l| (0, 1 + l)));
        } else if global_first {
            // Error enters at the top layer and walks down.
            if layers > 0 {
                edges.push((0, layers));
            }
            edges.extend((1..layers).rev().map(|l| (1 + l, l)));
        } else {
            edges.extend((0..layers.saturating_sub(1)).map(|l| (1 + l, 2 + l)));
            if layers > 0 {
                edges.push((layers, 0));
            }
        }
        critical_path(&costs, &edges)
    };
    let dfa = mode == Mode::Dfa;
    let to_ms = 1e3 / hw.clock_hz;
    Ok(LatencyBreakdown {
        forward: phase_path(Phase::Forward, false, false)? * to_ms,
        backward: phase_path(Phase::Backward, dfa, true)? * to_ms,
        wgu_update: phase_path(Phase::Update, dfa, true)? * to_ms,
        communication: comm * to_ms,
    })
}

/// Area of the tiles allocated by `plan`, plus global units and the global buffer.
pub fn estimate_area(plan: &MappingPlan, hw: &HardwareConfig, mode: Mode) -> AreaBreakdown {
    let a = &hw.coefficients.area;
    let tiles = plan.weight_tiles as f64;
    let per_tile = hw.crossbars_per_tile() as f64;
    let tile_buffers = a.tile_buffer_mm2 + hw.pes_per_tile as f64 * a.pe_buffer_mm2;
    let crossbars = tiles * per_tile * a.crossbar_mm2;
    let peripherals = tiles * per_tile * a.peripherals_mm2;
    let (transposable_duplicates, b_tile, wgu_scale) = match mode {
        Mode::Bp => (hw.transposable_duplication * peripherals, 0.0, 1.0),
        Mode::Dfa => (
            0.0,
            per_tile * (a.crossbar_mm2 + a.peripherals_mm2) + tile_buffers + a.htree_tile_mm2,
            hw.dfa_wgu_scale,
        ),
    };
    AreaBreakdown {
        crossbars,
        peripherals,
        transposable_duplicates,
        b_tile,
        wgu: tiles * a.wgu_mm2 * wgu_scale,
        buffers: tiles * tile_buffers + a.global_buffer_mm2,
        htree: tiles * a.htree_tile_mm2,
        global_units: a.global_units_mm2,
    }
}

/// Full report for one epoch's tally.
pub fn estimate(
    tally: &EventTally,
    plan: &MappingPlan,
    hw: &HardwareConfig,
    workload: Workload,
) -> Result<CostReport> {
    let mode = plan.mode;
    Ok(CostReport {
        mode,
        workload,
        energy: estimate_energy(tally, hw)?,
        latency: estimate_latency(tally, plan, hw, mode)?,
        area: estimate_area(plan, hw, mode),
        accuracy: None,
    })
}

/// DFA-versus-BP savings in the layout of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub workload: Workload,
    /// On-chip energy saving, `(1 − dfa/bp)·100`.
    pub energy_saving_pct: f64,
    pub area_saving_pct: f64,
    /// `bp / dfa` end-to-end latency.
    pub latency_speedup: f64,
    /// `dfa − bp` accuracy in points, when both are known.
    pub accuracy_delta: Option<f64>,
}

/// Compares a BP and a DFA report of the same workload. Energy excludes the
/// fixed DRAM constant, which is identical in both modes.
pub fn compare_modes(bp: &CostReport, dfa: &CostReport) -> Result<ModeComparison> {
    if bp.workload != dfa.workload {
        return Err(Error::Input(format!(
            "reports cover different workloads: {:?} vs {:?}",
            bp.workload, dfa.workload
        )));
    }
    let saving = |b: f64, d: f64| if b == 0.0 { 0.0 } else { (1.0 - d / b) * 100.0 };
    let dl = dfa.latency_ms();
    Ok(ModeComparison {
        workload: bp.workload.clone(),
        energy_saving_pct: saving(bp.energy.on_chip(), dfa.energy.on_chip()),
        area_saving_pct: saving(bp.area_mm2(), dfa.area_mm2()),
        latency_speedup: if dl == 0.0 { 1.0 } else { bp.latency_ms() / dl },
        accuracy_delta: match (bp.accuracy, dfa.accuracy) {
            (Some(b), Some(d)) => Some(d - b),
            _ => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwmodel::mapping::map_network;
    use crate::snn::{LifParams, NetworkSpec};

    fn workload() -> Workload {
        Workload {
            architecture: "6-256-128-64-6".into(),
            timesteps: 100,
            batch_size: 50,
            batches_per_epoch: 1,
        }
    }

    fn report(mode: Mode, energy: f64, latency: f64, area: f64) -> CostReport {
        CostReport {
            mode,
            workload: workload(),
            energy: EnergyBreakdown {
                tile_compute: energy,
                ..Default::default()
            },
            latency: LatencyBreakdown {
                forward: latency,
                ..Default::default()
            },
            area: AreaBreakdown {
                crossbars: area,
                ..Default::default()
            },
            accuracy: None,
        }
    }

    #[test]
    fn empty_tally_costs_only_dram() {
        let hw = HardwareConfig::default();
        let e = estimate_energy(&EventTally::new(), &hw).unwrap();
        assert_eq!(e.on_chip(), 0.0);
        assert_eq!(e.dram, 17.7);
    }

    #[test]
    fn adc_energy_is_count_times_coefficient() {
        let mut hw = HardwareConfig::default();
        hw.coefficients.adc_conversion.as_mut().unwrap().energy_pj = 2.0;
        let mut t = EventTally::new();
        t.record(EventKind::AdcConversion, 1_000_000, Site::layer(Phase::Forward, 0));
        let e = estimate_energy(&t, &hw).unwrap();
        assert!((e.tile_compute - 2e-3).abs() < 1e-15);
    }

    #[test]
    fn missing_coefficient_for_nonzero_count_is_config_error() {
        let mut hw = HardwareConfig::default();
        hw.coefficients.wgu_mac = None;
        let mut t = EventTally::new();
        assert!(estimate_energy(&t, &hw).is_ok());
        t.record(EventKind::WguMac, 1, Site::layer(Phase::Update, 0));
        assert!(matches!(estimate_energy(&t, &hw), Err(Error::Config(_))));
    }

    #[test]
    fn cyclic_stage_graph_is_internal_error() {
        assert!(matches!(
            critical_path(&[1.0, 1.0], &[(0, 1), (1, 0)]),
            Err(Error::Internal(_))
        ));
        assert_eq!(critical_path(&[1.0, 2.0, 3.0], &[(0, 1), (0, 2)]).unwrap(), 4.0);
        assert_eq!(critical_path(&[1.0, 2.0, 3.0], &[(0, 1), (1, 2)]).unwrap(), 6.0);
    }

    #[test]
    fn backward_sums_in_bp_and_maxes_in_dfa() {
        let hw = HardwareConfig::default();
        let net = NetworkSpec::from_architecture("8-8-8-8-8-2", 1, LifParams::default()).unwrap();
        let bp_plan = map_network(&net, &hw, Mode::Bp).unwrap();
        let dfa_plan = map_network(&net, &hw, Mode::Dfa).unwrap();
        let mut t = EventTally::new();
        for l in 0..4 {
            t.record(EventKind::GradlifOp, 640, Site::layer(Phase::Backward, l));
        }
        let c = 640.0 / 64.0 * 1e-6;
        let bp = estimate_latency(&t, &bp_plan, &hw, Mode::Bp).unwrap();
        let dfa = estimate_latency(&t, &dfa_plan, &hw, Mode::Dfa).unwrap();
        assert!((bp.backward - 4.0 * c).abs() < 1e-15);
        assert!((dfa.backward - c).abs() < 1e-15);
    }

    #[test]
    fn zero_tiles_leave_global_units_and_buffer() {
        let hw = HardwareConfig::default();
        let a = estimate_area(&MappingPlan::empty(Mode::Bp), &hw, Mode::Bp);
        let c = &hw.coefficients.area;
        assert!((a.total() - (c.global_units_mm2 + c.global_buffer_mm2)).abs() < 1e-12);
    }

    #[test]
    fn identical_reports_compare_neutral() {
        let r = report(Mode::Bp, 1.0, 2.0, 3.0);
        let c = compare_modes(&r, &r).unwrap();
        assert_eq!(c.energy_saving_pct, 0.0);
        assert_eq!(c.area_saving_pct, 0.0);
        assert_eq!(c.latency_speedup, 1.0);
    }

    #[test]
    fn reference_ratios() {
        let bp = report(Mode::Bp, 0.132, 18.1, 21.7);
        let dfa = report(Mode::Dfa, 0.0474, 8.67, 19.5);
        let c = compare_modes(&bp, &dfa).unwrap();
        assert!((c.energy_saving_pct - 64.09).abs() < 0.01);
        assert!((c.latency_speedup - 2.0877).abs() < 1e-3);
        assert!((c.area_saving_pct - 10.14).abs() < 0.01);
    }

    #[test]
    fn mismatched_workloads_rejected() {
        let bp = report(Mode::Bp, 1.0, 1.0, 1.0);
        let mut dfa = report(Mode::Dfa, 1.0, 1.0, 1.0);
        dfa.workload.batches_per_epoch = 2;
        assert!(matches!(compare_modes(&bp, &dfa), Err(Error::Input(_))));
    }

    #[test]
    fn json_export_lists_breakdowns_in_plot_order() {
        let r = report(Mode::Dfa, 1.0, 2.0, 3.0);
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["energy_mj"]["labels"][0], "tile_compute");
        assert_eq!(v["energy_mj"]["labels"][5], "dram");
        assert_eq!(v["area_mm2"]["total"], 3.0);
    }
}
