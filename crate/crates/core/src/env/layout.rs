//! Obstacle layouts, defined in a versioned TOML file and registered by
//! name. The built-in set ships embedded; `env.layout_file` adds more.

use crate::error::{ReplanError, Result};
use crate::geom::Rect;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub const LAYOUT_FORMAT_VERSION: i64 = 1;

/// What counts as task completion in a layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Push the puck to the goal puck position.
    Push,
    /// Drive the effector to the goal effector position (no-obstacle sanity task).
    Reach,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub name: String,
    pub task: Task,
    pub walls: Vec<Rect>,
    pub start_region: Rect,
    pub goal_region: Rect,
}

/// Built-in layouts. `pusher1` mirrors a single U-obstacle, `pusher2` a
/// two-wall maze; `reach` and `open` are obstacle-free; `sealed` splits the
/// workspace in two and exists for oracle tests only.
const BUILTIN_LAYOUTS: &str = r#"
version = 1

[pusher1]
task = "push"
walls = [
    [0.46, 0.25, 0.52, 0.75],
    [0.30, 0.25, 0.46, 0.31],
    [0.30, 0.69, 0.46, 0.75],
]
start_region = [0.08, 0.15, 0.40, 0.85]
goal_region = [0.62, 0.15, 0.92, 0.85]

[pusher2]
task = "push"
walls = [
    [0.33, 0.00, 0.39, 0.62],
    [0.61, 0.38, 0.67, 1.00],
]
start_region = [0.08, 0.12, 0.26, 0.88]
goal_region = [0.74, 0.12, 0.92, 0.88]

[reach]
task = "reach"
walls = []
start_region = [0.12, 0.12, 0.88, 0.88]
goal_region = [0.12, 0.12, 0.88, 0.88]

[open]
task = "push"
walls = []
start_region = [0.15, 0.15, 0.85, 0.85]
goal_region = [0.15, 0.15, 0.85, 0.85]

[sealed]
task = "push"
walls = [[0.46, -0.10, 0.54, 1.10]]
start_region = [0.10, 0.10, 0.35, 0.90]
goal_region = [0.65, 0.10, 0.90, 0.90]
"#;

/// Name-indexed layout registry.
#[derive(Debug, Clone)]
pub struct LayoutRegistry {
    layouts: BTreeMap<String, Arc<Layout>>,
}

impl LayoutRegistry {
    /// Registry with the built-in layouts.
    pub fn builtin() -> Self {
        let mut reg = Self {
            layouts: BTreeMap::new(),
        };
        reg.load_str(BUILTIN_LAYOUTS, "<builtin>")
            .expect("builtin layout table must parse");
        reg
    }

    /// Registry with built-ins plus an optional extra layout file.
    pub fn from_config(layout_file: &str) -> Result<Self> {
        let mut reg = Self::builtin();
        if !layout_file.is_empty() {
            let text = std::fs::read_to_string(Path::new(layout_file)).map_err(|e| {
                ReplanError::Config(format!("cannot read layout file {layout_file}: {e}"))
            })?;
            reg.load_str(&text, layout_file)?;
        }
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Result<Arc<Layout>> {
        self.layouts.get(name).cloned().ok_or_else(|| {
            let known: Vec<&str> = self.layouts.keys().map(String::as_str).collect();
            ReplanError::Config(format!(
                "unknown layout `{name}` (known: {})",
                known.join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.layouts.keys().cloned().collect()
    }

    fn load_str(&mut self, text: &str, origin: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| ReplanError::Config(format!("layout file {origin}: {e}")))?;
        let version = table
            .get("version")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| {
                ReplanError::Config(format!("layout file {origin}: missing integer `version`"))
            })?;
        if version != LAYOUT_FORMAT_VERSION {
            return Err(ReplanError::Config(format!(
                "layout file {origin}: version {version} unsupported (expected {LAYOUT_FORMAT_VERSION})"
            )));
        }
        for (name, val) in &table {
            if name == "version" {
                continue;
            }
            let t = val.as_table().ok_or_else(|| {
                ReplanError::Config(format!("layout `{name}`: expected a table"))
            })?;
            let layout = parse_layout(name, t)?;
            self.layouts.insert(name.clone(), Arc::new(layout));
        }
        Ok(())
    }
}

fn parse_rect(name: &str, v: &toml::Value) -> Result<Rect> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| ReplanError::Config(format!("{name}: expected [x0, y0, x1, y1]")))?;
    let mut c = [0.0; 4];
    for (i, x) in arr.iter().enumerate() {
        c[i] = x
            .as_float()
            .or_else(|| x.as_integer().map(|i| i as f64))
            .ok_or_else(|| ReplanError::Config(format!("{name}: non-numeric coordinate")))?;
    }
    if c[0] >= c[2] || c[1] >= c[3] {
        return Err(ReplanError::Config(format!(
            "{name}: rectangle corners must satisfy x0 < x1 and y0 < y1"
        )));
    }
    Ok(Rect::new(c[0], c[1], c[2], c[3]))
}

fn parse_layout(name: &str, t: &toml::Table) -> Result<Layout> {
    let task = match t.get("task").and_then(|v| v.as_str()).unwrap_or("push") {
        "push" => Task::Push,
        "reach" => Task::Reach,
        other => {
            return Err(ReplanError::Config(format!(
                "layout `{name}`: unknown task `{other}`"
            )))
        }
    };
    let walls = match t.get("walls") {
        Some(v) => v
            .as_array()
            .ok_or_else(|| ReplanError::Config(format!("layout `{name}`: walls must be an array")))?
            .iter()
            .map(|w| parse_rect(&format!("layout `{name}` wall"), w))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let start_region = parse_rect(
        &format!("layout `{name}` start_region"),
        t.get("start_region").ok_or_else(|| {
            ReplanError::Config(format!("layout `{name}`: missing start_region"))
        })?,
    )?;
    let goal_region = parse_rect(
        &format!("layout `{name}` goal_region"),
        t.get("goal_region").ok_or_else(|| {
            ReplanError::Config(format!("layout `{name}`: missing goal_region"))
        })?,
    )?;
    Ok(Layout {
        name: name.to_string(),
        task,
        walls,
        start_region,
        goal_region,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry_has_shipped_layouts() {
        let reg = LayoutRegistry::builtin();
        for name in ["pusher1", "pusher2", "reach", "open", "sealed"] {
            assert!(reg.get(name).is_ok(), "missing {name}");
        }
        assert_eq!(reg.get("pusher1").unwrap().walls.len(), 3);
        assert_eq!(reg.get("pusher2").unwrap().walls.len(), 2);
    }

    #[test]
    fn unknown_layout_is_config_error() {
        let reg = LayoutRegistry::builtin();
        let err = reg.get("pusher3").unwrap_err();
        assert!(err.is_config());
    }
}
