use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nvhf::io::{write_numeric_table, RunConfig};
use nvhf::Result;
use serde::Serialize;
use serde_json::{json, Value};

/// Collects files written by one subcommand and renders the report envelope.
pub struct Output {
    dir: PathBuf,
    command: &'static str,
    config: RunConfig,
    inputs: Vec<(String, PathBuf)>,
    pub files: Vec<PathBuf>,
    pub report: String,
}

pub fn constants_json(cfg: &RunConfig) -> Value {
    let sys = cfg.sys();
    json!({
        "d_zfs_MHz": sys.d_zfs,
        "gamma_e_MHz_per_mT": sys.gamma_e,
        "gamma_n_MHz_per_mT": sys.gamma_n,
        "nvhf_version": env!("CARGO_PKG_VERSION"),
    })
}

impl Output {
    pub fn new(dir: PathBuf, command: &'static str, config: RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            command,
            config,
            inputs: Vec::new(),
            files: Vec::new(),
            report: String::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push((role.to_owned(), path.to_owned()));
    }

    pub fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let path = self.dir.join(name);
        write_numeric_table(&path, header, rows, &[])?;
        self.files.push(path);
        Ok(())
    }

    pub fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    /// Writes report.txt and result.json; `body` is the human-readable part.
    pub fn finish<T: Serialize>(mut self, body: &str, result: &T) -> Result<Self> {
        let constants = constants_json(&self.config);
        let config = serde_json::to_string_pretty(&self.config).expect("config serializes");
        let mut text = String::new();
        let _ = writeln!(text, "nvhf {} {}", env!("CARGO_PKG_VERSION"), self.command);
        let _ = writeln!(
            text,
            "constants: D = {} MHz, gamma_e = {} MHz/mT, gamma_n = {} MHz/mT",
            constants["d_zfs_MHz"], constants["gamma_e_MHz_per_mT"], constants["gamma_n_MHz_per_mT"]
        );
        for (role, p) in &self.inputs {
            let _ = writeln!(text, "input {role}: {}", p.display());
        }
        let _ = writeln!(text, "config:\n{config}\n");
        text.push_str(body);
        if !body.ends_with('\n') {
            text.push('\n');
        }

        let envelope = json!({
            "tool": "nvhf",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "constants": constants,
            "config": self.config,
            "result": result,
        });
        let report_path = self.dir.join("report.txt");
        std::fs::write(&report_path, &text)?;
        let json_path = self.dir.join("result.json");
        let mut json_text = serde_json::to_string_pretty(&envelope).expect("result serializes");
        json_text.push('\n');
        std::fs::write(&json_path, json_text)?;
        self.files.push(report_path);
        self.files.push(json_path);
        self.report = text;
        Ok(self)
    }
}
