//! Named environments.

use std::path::Path;

use serde::{Deserialize, Serialize};
use steer_core::maze::{MazeMap, MultiGoalTask};

use crate::error::{BenchError, Result};

/// `large` (the benchmark maze), `fork` (the three-goal maze) or a path
/// to a maze asset; optionally rescaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_size: Option<f64>,
}

impl EnvSpec {
    pub fn large() -> Self {
        Self { name: "large".into(), cell_size: None }
    }

    pub fn fork() -> Self {
        Self { name: "fork".into(), cell_size: None }
    }

    pub fn with_cell_size(mut self, cs: f64) -> Self {
        self.cell_size = Some(cs);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    pub map: MazeMap,
    /// Present for multi-goal environments.
    pub task: Option<MultiGoalTask>,
}

impl Env {
    pub fn resolve(spec: &EnvSpec) -> Result<Self> {
        let (map, task) = match spec.name.as_str() {
            "large" | "maze-large" => (MazeMap::benchmark(), None),
            "fork" | "maze-fork" => {
                let t = MultiGoalTask::fork();
                (t.map.clone(), Some(t))
            }
            path => {
                let p = Path::new(path);
                if !p.exists() {
                    return Err(BenchError::Config(format!("unknown environment {path:?}")));
                }
                let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("maze");
                (MazeMap::parse(id, &std::fs::read_to_string(p)?)?, None)
            }
        };
        match spec.cell_size {
            None => Ok(Self { map, task }),
            Some(cs) => Ok(Self {
                map: map.with_cell_size(cs)?,
                task: task.map(|t| t.with_cell_size(cs)).transpose()?,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_named_environments() {
        let e = Env::resolve(&EnvSpec::large()).unwrap();
        assert_eq!(e.map.width, 12);
        assert!(e.task.is_none());
        let f = Env::resolve(&EnvSpec::fork().with_cell_size(0.5)).unwrap();
        let t = f.task.unwrap();
        assert_eq!(t.map.cell_size, 0.5);
        assert!(!t.map.is_wall_at(t.start));
        assert!(Env::resolve(&EnvSpec { name: "/nonexistent".into(), cell_size: None }).is_err());
    }
}
