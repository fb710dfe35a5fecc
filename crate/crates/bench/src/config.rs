use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mpm_core::domain::SimParams;
use mpm_core::pipeline::{FusionPolicy, PipelineConfig, RebuildPolicy, SortPolicy, TransferMode};
use serde::{Deserialize, Serialize};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Scene {
    SandBlocks,
    FountainLite,
    FreeFall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum RebuildArg {
    #[default]
    Amortized,
    EveryStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SortArg {
    #[default]
    Amortized,
    #[serde(alias = "full_every_step")]
    #[value(alias = "full_every_step")]
    Full,
    #[serde(alias = "none_between")]
    #[value(alias = "none_between")]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FusionArg {
    #[default]
    Merged,
    SplitStress,
    SplitBc,
    SplitClear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TransferArg {
    #[default]
    Split,
    G2p2g,
}

/// Flat benchmark configuration; lengths in cells unless noted (cm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: Scene,
    /// Sand Blocks box edge.
    pub l: u32,
    pub boxes: u32,
    pub ppc: u32,
    /// Cell size in cm.
    pub dx: f64,
    pub frames: u32,
    pub steps_per_frame: u32,
    /// CFL-limited dt; defaults to on for fountain_lite only.
    pub cfl_auto: Option<bool>,
    pub workers: usize,
    pub threads_per_worker: usize,
    pub lane_width: usize,
    pub rebuild: RebuildArg,
    pub sort: SortArg,
    pub fusion: FusionArg,
    pub transfer: TransferArg,
    pub deterministic: bool,
    pub fused_threshold: usize,
    pub remap_each_frame: bool,
    pub seed: u64,
    /// Horizontal gap between boxes; defaults to one box edge.
    pub gap: Option<u32>,
    /// Height of the box bottoms above the floor.
    pub drop_height: u32,
    /// Initial downward speed of the boxes (cm/s).
    pub drop_speed: f64,
    /// Edge of the bounded cubic domain; computed from the layout when absent.
    pub domain_cells: Option<u32>,
    pub density: f64,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub bulk_modulus: f64,
    pub gamma: f64,
    pub source_radius: f64,
    /// Fountain emission velocity (cm/s).
    pub emit_velocity: [f64; 3],
    pub out_csv: Option<PathBuf>,
    pub out_snap: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: Scene::SandBlocks,
            l: 12,
            boxes: 4,
            ppc: 8,
            dx: 25.0 / 64.0,
            frames: 60,
            steps_per_frame: 36,
            cfl_auto: None,
            workers: 1,
            threads_per_worker: 1,
            lane_width: 32,
            rebuild: RebuildArg::Amortized,
            sort: SortArg::Amortized,
            fusion: FusionArg::Merged,
            transfer: TransferArg::Split,
            deterministic: false,
            fused_threshold: mpm_core::pipeline::DEFAULT_FUSED_THRESHOLD,
            remap_each_frame: true,
            seed: 0x5eed,
            gap: None,
            drop_height: 40,
            drop_speed: 100.0,
            domain_cells: None,
            density: 1.5,
            youngs_modulus: 5e4,
            poisson_ratio: 0.3,
            bulk_modulus: 1e5,
            gamma: 7.0,
            source_radius: 2.5,
            emit_velocity: [40.0, -60.0, 0.0],
            out_csv: None,
            out_snap: None,
        }
    }
}

impl RunConfig {
    /// The desk-scale Sand Blocks case (l=12, four boxes).
    pub fn mini() -> Self {
        RunConfig::default()
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io { path: path.to_owned(), source: e })?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn cfl_auto(&self) -> bool {
        self.cfl_auto.unwrap_or(self.scene == Scene::FountainLite)
    }

    pub fn gap(&self) -> u32 {
        self.gap.unwrap_or(self.l)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let positive = [
            ("l", self.l as usize),
            ("boxes", self.boxes as usize),
            ("ppc", self.ppc as usize),
            ("steps_per_frame", self.steps_per_frame as usize),
            ("workers", self.workers),
            ("threads_per_worker", self.threads_per_worker),
            ("lane_width", self.lane_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(BenchError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(BenchError::Config(format!("dx must be positive, got {}", self.dx)));
        }
        if self.scene == Scene::SandBlocks && ![1, 4, 16].contains(&self.boxes) {
            return Err(BenchError::Config(format!("boxes must be 1, 4 or 16, got {}", self.boxes)));
        }
        Ok(())
    }

    pub fn sim_params(&self) -> SimParams {
        let frame_dt = 1.0 / 48.0;
        SimParams {
            dx: self.dx,
            dt: frame_dt / self.steps_per_frame as f64,
            frame_dt,
            steps_per_frame: self.steps_per_frame,
            lane_width: self.lane_width,
            ..SimParams::default()
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            rebuild: match self.rebuild {
                RebuildArg::Amortized => RebuildPolicy::Amortized,
                RebuildArg::EveryStep => RebuildPolicy::EveryStep,
            },
            sort: match self.sort {
                SortArg::Amortized => SortPolicy::Amortized,
                SortArg::Full => SortPolicy::FullEveryStep,
                SortArg::None => SortPolicy::NoneBetween,
            },
            fusion: match self.fusion {
                FusionArg::Merged => FusionPolicy::Merged,
                FusionArg::SplitStress => FusionPolicy::SplitStress,
                FusionArg::SplitBc => FusionPolicy::SplitBc,
                FusionArg::SplitClear => FusionPolicy::SplitClear,
            },
            transfer: match self.transfer {
                TransferArg::Split => TransferMode::Split,
                TransferArg::G2p2g => TransferMode::G2p2g,
            },
            deterministic: self.deterministic,
            fused_threshold: self.fused_threshold,
            workers: self.workers,
            threads_per_worker: self.threads_per_worker,
            cfl_auto: self.cfl_auto(),
            remap_each_frame: self.remap_each_frame,
            ..PipelineConfig::default()
        }
    }
}
