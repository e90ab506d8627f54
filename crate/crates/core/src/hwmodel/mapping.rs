//! Placement of weight slices onto tiles, PEs and crossbars.
//!
//! Layers are sliced into `rows × logical_cols` blocks in row-major order and
//! packed greedily, crossbar by crossbar, PE by PE. Each layer starts on a fresh
//! tile; a tile never hosts two layers. In DFA mode all feedback matrices share
//! one extra tile and are duplicated to fill it.

use serde::{Deserialize, Serialize};

use super::config::HardwareConfig;
use super::Mode;
use crate::error::{Error, Result};
use crate::snn::NetworkSpec;

/// One weight block held by one crossbar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceAssignment {
    pub tile: usize,
    pub pe: usize,
    /// Crossbar index within its PE.
    pub crossbar: usize,
    pub row0: usize,
    pub rows: usize,
    pub col0: usize,
    /// Logical (signed) columns; physical demand is twice this.
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMapping {
    pub in_dim: usize,
    pub out_dim: usize,
    pub slices: Vec<SliceAssignment>,
}

impl LayerMapping {
    pub fn crossbars(&self) -> usize {
        self.slices.len()
    }

    /// Distinct tiles, ascending.
    pub fn tiles(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.slices.iter().map(|s| s.tile).collect();
        t.dedup();
        t
    }

    /// Distinct `(tile, pe)` pairs.
    pub fn pes(&self) -> usize {
        let mut p: Vec<(usize, usize)> = self.slices.iter().map(|s| (s.tile, s.pe)).collect();
        p.dedup();
        p.len()
    }
}

/// The feedback tile: every `B_l` (`classes × width_l`) sliced like a weight layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMapping {
    pub tile: usize,
    /// One entry per hidden layer, first copy only.
    pub layers: Vec<LayerMapping>,
    /// Crossbars needed by one copy of all feedback matrices.
    pub crossbars_per_copy: usize,
    /// Copies of the full feedback set stored in the tile.
    pub duplication: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub mode: Mode,
    pub layers: Vec<LayerMapping>,
    pub feedback: Option<FeedbackMapping>,
    pub weight_tiles: usize,
    pub tiles_used: usize,
}

impl MappingPlan {
    /// Plan with no tiles at all (nothing deployed).
    pub fn empty(mode: Mode) -> Self {
        Self {
            mode,
            layers: Vec::new(),
            feedback: None,
            weight_tiles: 0,
            tiles_used: 0,
        }
    }

    /// Parallel B-projection crossbars available to hidden layer `l`.
    pub fn feedback_crossbars(&self, l: usize) -> usize {
        self.feedback
            .as_ref()
            .and_then(|f| f.layers.get(l).map(|m| m.crossbars() * f.duplication))
            .unwrap_or(0)
    }
}

fn slice_layer(
    in_dim: usize,
    out_dim: usize,
    hw: &HardwareConfig,
    first_tile: usize,
) -> LayerMapping {
    let lc = hw.logical_cols();
    let rows = in_dim.div_ceil(hw.crossbar_rows);
    let cols = out_dim.div_ceil(lc);
    let mut slices = Vec::with_capacity(rows * cols);
    let mut k = 0;
    for rs in 0..rows {
        for cs in 0..cols {
            let row0 = rs * hw.crossbar_rows;
            let col0 = cs * lc;
            slices.push(SliceAssignment {
                tile: first_tile + k / hw.crossbars_per_tile(),
                pe: (k / hw.crossbars_per_pe) % hw.pes_per_tile,
                crossbar: k % hw.crossbars_per_pe,
                row0,
                rows: (in_dim - row0).min(hw.crossbar_rows),
                col0,
                cols: (out_dim - col0).min(lc),
            });
            k += 1;
        }
    }
    LayerMapping {
        in_dim,
        out_dim,
        slices,
    }
}

/// Deterministic greedy placement of `net` (plus feedback matrices in DFA mode).
pub fn map_network(net: &NetworkSpec, hw: &HardwareConfig, mode: Mode) -> Result<MappingPlan> {
    net.validate()?;
    hw.validate()?;
    let mut layers = Vec::with_capacity(net.weight_layers());
    let mut next_tile = 0;
    for l in 0..net.weight_layers() {
        let (in_dim, out_dim) = net.layer_shape(l);
        let m = slice_layer(in_dim, out_dim, hw, next_tile);
        let tiles = m.crossbars().div_ceil(hw.crossbars_per_tile());
        if next_tile + tiles > hw.max_tiles {
            return Err(Error::Capacity {
                layer: l,
                detail: format!(
                    "{in_dim}×{out_dim} needs {tiles} tiles but only {} of {} remain",
                    hw.max_tiles.saturating_sub(next_tile),
                    hw.max_tiles
                ),
            });
        }
        next_tile += tiles;
        layers.push(m);
    }
    let weight_tiles = next_tile;

    let feedback = match mode {
        Mode::Bp => None,
        Mode::Dfa => {
            if next_tile + 1 > hw.max_tiles {
                return Err(Error::Capacity {
                    layer: net.weight_layers(),
                    detail: "no tile left for the feedback matrices".into(),
                });
            }
            let classes = net.classes();
            let fb: Vec<LayerMapping> = (0..net.hidden_layers())
                .map(|l| slice_layer(classes, net.widths[l + 1], hw, next_tile))
                .collect();
            let needed: usize = fb.iter().map(LayerMapping::crossbars).sum();
            if needed > hw.crossbars_per_tile() {
                return Err(Error::Capacity {
                    layer: net.weight_layers(),
                    detail: format!(
                        "feedback matrices need {needed} crossbars, one tile holds {}",
                        hw.crossbars_per_tile()
                    ),
                });
            }
            // Re-pack the copies contiguously inside the single feedback tile.
            let mut k = 0;
            let layers = fb
                .into_iter()
                .map(|mut m| {
                    for s in &mut m.slices {
                        s.tile = next_tile;
                        s.pe = (k / hw.crossbars_per_pe) % hw.pes_per_tile;
                        s.crossbar = k % hw.crossbars_per_pe;
                        k += 1;
                    }
                    m
                })
                .collect();
            let fm = FeedbackMapping {
                tile: next_tile,
                layers,
                crossbars_per_copy: needed,
                duplication: if needed == 0 { 0 } else { hw.crossbars_per_tile() / needed },
            };
            next_tile += 1;
            Some(fm)
        }
    };

    Ok(MappingPlan {
        mode,
        layers,
        feedback,
        weight_tiles,
        tiles_used: next_tile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::LifParams;

    fn net(arch: &str) -> NetworkSpec {
        NetworkSpec::from_architecture(arch, 4, LifParams::default()).unwrap()
    }

    #[test]
    fn har_net_uses_one_tile_per_layer_plus_feedback() {
        let hw = HardwareConfig::default();
        let bp = map_network(&net("9-128-64-32-6"), &hw, Mode::Bp).unwrap();
        assert_eq!(bp.tiles_used, 4);
        assert!(bp.feedback.is_none());
        assert!(bp.layers.iter().all(|l| l.crossbars() == 1));
        let dfa = map_network(&net("9-128-64-32-6"), &hw, Mode::Dfa).unwrap();
        assert_eq!(dfa.tiles_used, 5);
        let fb = dfa.feedback.unwrap();
        assert_eq!(fb.tile, 4);
        assert_eq!((fb.crossbars_per_copy, fb.duplication), (3, 5));
    }

    #[test]
    fn fmnist_first_layer_fills_exactly_one_tile() {
        let hw = HardwareConfig::default();
        let plan = map_network(&net("784-512-256-128-64-10"), &hw, Mode::Dfa).unwrap();
        let l0 = &plan.layers[0];
        assert_eq!(l0.crossbars(), 16);
        assert_eq!(l0.tiles(), vec![0]);
        assert_eq!(l0.pes(), 4);
        assert_eq!(plan.weight_tiles, 5);
        let fb = plan.feedback.unwrap();
        assert_eq!((fb.crossbars_per_copy, fb.duplication), (8, 2));
    }

    #[test]
    fn slices_tile_the_weight_matrix_exactly_once() {
        let hw = HardwareConfig::default();
        let plan = map_network(&net("784-512-256-128-64-10"), &hw, Mode::Bp).unwrap();
        for m in &plan.layers {
            let mut seen = vec![0u8; m.in_dim * m.out_dim];
            for s in &m.slices {
                assert!(s.rows <= hw.crossbar_rows && 2 * s.cols <= hw.crossbar_cols);
                for r in s.row0..s.row0 + s.rows {
                    for c in s.col0..s.col0 + s.cols {
                        seen[r * m.out_dim + c] += 1;
                    }
                }
            }
            assert!(seen.iter().all(|&n| n == 1));
        }
    }

    #[test]
    fn oversized_layer_is_capacity_error() {
        let hw = HardwareConfig {
            max_tiles: 2,
            ..HardwareConfig::default()
        };
        let err = map_network(&net("4096-1024-10"), &hw, Mode::Bp).unwrap_err();
        assert!(matches!(err, Error::Capacity { layer: 0, .. }));
    }
}
