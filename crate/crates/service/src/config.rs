use std::path::{Path, PathBuf};

use chrono::TimeDelta;
use maqi_core::{BoundingBox, BreakpointTable, FusionWeights, GridConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "MAQI_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// An edge cloud and the part of the area it owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub id: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub bbox: BoundingBox,
    pub slot_duration_s: i64,
    pub weights: FusionWeights,
    pub grid: GridConfig,
    /// Breakpoint table file; the built-in HJ 633 table when absent.
    pub breakpoint_table: Option<PathBuf>,
    /// Where edge batches are persisted; nothing is persisted when absent.
    pub spool_dir: Option<PathBuf>,
    /// Edges in routing order. A sample goes to the first edge containing it.
    /// Empty means one edge covering the whole box.
    pub edges: Vec<EdgeConfig>,
    /// Lattice depth used for route planning.
    pub route_depth: u8,
    /// Seconds between automatic flushes of closed slots while serving.
    pub auto_fuse_interval_s: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            bbox: BoundingBox::WUHAN,
            slot_duration_s: 3600,
            weights: FusionWeights::default(),
            grid: GridConfig::default(),
            breakpoint_table: None,
            spool_dir: None,
            edges: Vec::new(),
            route_depth: maqi_core::guidance::ROUTE_DEPTH,
            auto_fuse_interval_s: 60,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let config: ServiceConfig =
            toml::from_str(text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`, or the file named by `MAQI_CONFIG`, or falls back to defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(env_path) {
            Some(p) => {
                let text =
                    std::fs::read_to_string(&p).map_err(|source| ConfigError::Read { path: p.clone(), source })?;
                ServiceConfig::from_toml(&text, &p)
            }
            None => Ok(ServiceConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let b = &self.bbox;
        if BoundingBox::new(b.min_lon, b.min_lat, b.max_lon, b.max_lat).is_err() {
            return invalid(format!("bounding box {b:?} is empty or not finite"));
        }
        if self.slot_duration_s <= 0 {
            return invalid(format!("slot_duration_s must be positive, got {}", self.slot_duration_s));
        }
        if self.grid.max_depth > 30 || self.route_depth > 16 {
            return invalid("grid.max_depth must be <= 30 and route_depth <= 16".into());
        }
        for e in &self.edges {
            if !self.bbox.intersects(&e.bbox) {
                return invalid(format!("edge {} lies outside the bounding box", e.id));
            }
        }
        let mut ids: Vec<&str> = self.edges.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("edge ids must be unique".into());
        }
        Ok(())
    }

    pub fn slot_duration(&self) -> TimeDelta {
        TimeDelta::seconds(self.slot_duration_s)
    }

    pub fn edge_configs(&self) -> Vec<EdgeConfig> {
        if self.edges.is_empty() {
            vec![EdgeConfig { id: "edge-0".into(), bbox: self.bbox }]
        } else {
            self.edges.clone()
        }
    }

    pub fn load_table(&self) -> anyhow::Result<BreakpointTable> {
        Ok(match &self.breakpoint_table {
            Some(p) => BreakpointTable::load(p)?,
            None => BreakpointTable::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_file_over_defaults() {
        let text = r#"
            listen = "0.0.0.0:9000"
            slot_duration_s = 1800
            [grid]
            split_threshold = 8
            [weights]
            crowd = 0.0
            met = 1.0
            iot = 0.0
            [[edges]]
            id = "west"
            bbox = { min_lon = 113.7, min_lat = 29.9, max_lon = 114.4, max_lat = 31.4 }
        "#;
        let c = ServiceConfig::from_toml(text, Path::new("t.toml")).unwrap();
        assert_eq!(c.listen, "0.0.0.0:9000");
        assert_eq!(c.grid.split_threshold, 8);
        assert_eq!(c.grid.max_depth, GridConfig::default().max_depth);
        assert_eq!(c.weights, FusionWeights::meteorological_only());
        assert_eq!(c.edge_configs()[0].id, "west");
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "slot_duration_s = 0",
            "[weights]\ncrowd = 0.5\nmet = 0.5\niot = 0.5",
            "unknown_key = 1",
            "bbox = { min_lon = 1.0, min_lat = 1.0, max_lon = 0.0, max_lat = 2.0 }",
        ] {
            assert!(ServiceConfig::from_toml(text, Path::new("t.toml")).is_err(), "{text}");
        }
    }

    #[test]
    fn default_has_one_edge() {
        let c = ServiceConfig::default();
        assert_eq!(c.edge_configs(), vec![EdgeConfig { id: "edge-0".into(), bbox: BoundingBox::WUHAN }]);
    }
}
