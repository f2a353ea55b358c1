//! Deterministic artifact writing: CSV tables with shortest-roundtrip float
//! formatting, a long-format plot table, and a manifest with content hashes.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};

/// Shortest-roundtrip decimal rendering; identical bytes across runs.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn new_owned(header: Vec<String>) -> Self {
        Csv { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "csv row arity");
        self.rows.push(row);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// One observation per row; unused keys stay empty. The stable column set
/// keeps downstream plotting scripts independent of the experiment kind.
pub struct PlotData {
    csv: Csv,
}

pub const PLOT_COLUMNS: [&str; 7] = ["experiment", "series", "xi", "t", "eps", "seed", "value"];

impl Default for PlotData {
    fn default() -> Self {
        PlotData { csv: Csv::new(&PLOT_COLUMNS) }
    }
}

impl PlotData {
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        experiment: &str,
        series: &str,
        xi: Option<&str>,
        t: Option<f64>,
        eps: Option<f64>,
        seed: Option<u64>,
        value: f64,
    ) {
        self.csv.push(vec![
            experiment.to_string(),
            series.to_string(),
            xi.unwrap_or("").to_string(),
            t.map(fmt_f64).unwrap_or_default(),
            eps.map(fmt_f64).unwrap_or_default(),
            seed.map(|s| s.to_string()).unwrap_or_default(),
            fmt_f64(value),
        ]);
    }

    pub fn render(&self) -> String {
        self.csv.render()
    }
}

/// Compact key for a gradient in plot tables: entries joined by ';'.
pub fn xi_key(xi: &[f64]) -> String {
    xi.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Files produced by one experiment run, written together with the manifest.
#[derive(Default)]
pub struct ArtifactSet {
    files: Vec<(String, Vec<u8>)>,
}

impl ArtifactSet {
    pub fn add_text(&mut self, name: &str, content: String) {
        self.files.push((name.to_string(), content.into_bytes()));
    }

    pub fn add_bytes(&mut self, name: &str, content: Vec<u8>) {
        self.files.push((name.to_string(), content));
    }

    /// Write every artifact under `dir` and return the manifest entries.
    pub fn write(&self, dir: &Path) -> std::io::Result<Vec<serde_json::Value>> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Vec::new();
        for (name, bytes) in &self.files {
            let path: PathBuf = dir.join(name);
            let mut file = std::fs::File::create(&path)?;
            file.write_all(bytes)?;
            manifest.push(json!({
                "name": name,
                "bytes": bytes.len(),
                "sha256": sha256_hex(bytes),
            }));
        }
        Ok(manifest)
    }
}
