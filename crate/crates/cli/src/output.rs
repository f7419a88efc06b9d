use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;

use crate::config::{runtime_err, CliError, Section};

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

/// Files of one invocation: `<dir>/<subcommand>-<unix millis>.csv` and friends.
pub struct Output {
    dir: PathBuf,
    stem: String,
}

impl Output {
    pub fn new(dir: &Path, subcommand: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| runtime_err(format!("{}: {e}", dir.display())))?;
        let millis = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        Ok(Self { dir: dir.to_path_buf(), stem: format!("{subcommand}-{millis}") })
    }

    /// `<dir>/<stem><suffix>`.
    pub fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.stem))
    }

    pub fn csv_path(&self) -> PathBuf {
        self.path(".csv")
    }

    pub fn write(&self, path: &Path, body: &[u8]) -> Result<(), CliError> {
        std::fs::write(path, body).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
    }

    /// Records the binary version and every resolved parameter.
    pub fn write_resolved(&self, section: &Section) -> Result<PathBuf, CliError> {
        let file_name = |p: PathBuf| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let doc = json!({
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": section.name(),
            "csv": file_name(self.csv_path()),
            section.name(): section.resolved(),
        });
        let path = self.dir.join(RESOLVED_CONFIG);
        let text = serde_json::to_string_pretty(&doc).map_err(runtime_err)? + "\n";
        self.write(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Exponential smoothing s_t = w·s_{t−1} + (1 − w)·x_t of every numeric column
/// except `keep`; the state restarts whenever the `group` column changes.
/// Empty and non-numeric fields pass through.
pub fn smooth_csv(body: &str, weight: f64, keep: &[&str], group: Option<&str>) -> Result<String, CliError> {
    let mut lines = body.lines();
    let header = lines.next().ok_or_else(|| runtime_err("empty csv"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let group_col = group.and_then(|g| cols.iter().position(|c| *c == g));
    let mut out = String::with_capacity(body.len());
    out.push_str(header);
    out.push('\n');
    let mut state: Vec<Option<f64>> = vec![None; cols.len()];
    let mut current_group: Option<String> = None;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if let Some(g) = group_col {
            let key = fields.get(g).map(|s| s.to_string());
            if key != current_group {
                state.iter_mut().for_each(|s| *s = None);
                current_group = key;
            }
        }
        let smoothed: Vec<String> = fields
            .iter()
            .enumerate()
            .map(|(i, f)| {
                if keep.contains(&cols.get(i).copied().unwrap_or("")) || Some(i) == group_col {
                    return f.to_string();
                }
                match f.parse::<f64>() {
                    Ok(x) if x.is_finite() => {
                        let s = match state[i] {
                            Some(prev) => weight * prev + (1.0 - weight) * x,
                            None => x,
                        };
                        state[i] = Some(s);
                        s.to_string()
                    }
                    _ => f.to_string(),
                }
            })
            .collect();
        out.push_str(&smoothed.join(","));
        out.push('\n');
    }
    Ok(out)
}
