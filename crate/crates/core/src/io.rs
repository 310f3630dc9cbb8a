//! File boundary: the JSON run configuration and the three CSV dataset tables.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{
    DetSignConstraint, FitConstraints, Frame, FullFitOptions, LineRecord, LmOptions, MeasuredDataset,
    OrientationRecord, RatioRecord, RABI_XZ_BOUND,
};
use crate::spectra::{LineKind, MicrowaveField};
use crate::spin::{SpinSystemParams, D_ZFS_MHZ, GAMMA_E_MHZ_PER_MT, GAMMA_N_13C_MHZ_PER_MT};

pub const ORIENTATIONS_HEADER: [&str; 5] = ["orient_id", "frame", "angle1_deg", "angle2_deg", "b_mT"];
pub const LINES_HEADER: [&str; 4] = ["orient_id", "kind", "freq_MHz", "sigma_MHz"];
pub const RATIOS_HEADER: [&str; 4] = ["orient_id", "phi_deg", "ratio", "sigma"];

pub const ORIENTATIONS_FILE: &str = "orientations.csv";
pub const LINES_FILE: &str = "lines.csv";
pub const RATIOS_FILE: &str = "ratios.csv";

/// Synthetic dataset generated from reference solution 1 that ships with the crate.
pub fn bundled_dataset_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("sol1_synthetic")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Constants {
    pub d_zfs_mhz: f64,
    pub gamma_e_mhz_per_mt: f64,
    pub gamma_n_mhz_per_mt: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            d_zfs_mhz: D_ZFS_MHZ,
            gamma_e_mhz_per_mt: GAMMA_E_MHZ_PER_MT,
            gamma_n_mhz_per_mt: GAMMA_N_13C_MHZ_PER_MT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub max_iter: usize,
    pub xtol: f64,
    pub ftol: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub refine_d: bool,
    pub refine_gamma_b: bool,
    pub refine_frame: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        let lm = LmOptions::default();
        Self {
            max_iter: lm.max_iter,
            xtol: lm.xtol,
            ftol: lm.ftol,
            n_starts: 16,
            seed: 0,
            refine_d: true,
            refine_gamma_b: true,
            refine_frame: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSettings {
    pub det_sign: DetSignConstraint,
    /// `null` disables the |A_xz/A_zz| filter.
    pub rabi_bound: Option<f64>,
}

impl Default for ConstraintSettings {
    fn default() -> Self {
        Self {
            det_sign: DetSignConstraint::Any,
            rabi_bound: Some(RABI_XZ_BOUND),
        }
    }
}

/// Every field is optional in the JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub constants: Constants,
    /// Drops the nuclear Zeeman term (and the nuclear drive).
    pub gamma_n_zero: bool,
    /// Field magnitude for simulations, mT.
    pub b_mt: f64,
    /// Microwave direction in the NV frame.
    pub mw_direction: [f64; 3],
    pub fit: FitSettings,
    pub constraints: ConstraintSettings,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            constants: Constants::default(),
            gamma_n_zero: false,
            b_mt: 63.3 / GAMMA_E_MHZ_PER_MT,
            mw_direction: [1.0, 0.0, 0.0],
            fit: FitSettings::default(),
            constraints: ConstraintSettings::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sys().validate()?;
        let f = &self.fit;
        if !(f.xtol > 0.0 && f.xtol.is_finite() && f.ftol > 0.0 && f.ftol.is_finite()) {
            return Err(Error::InvalidParameter("fit tolerances must be > 0".into()));
        }
        if f.max_iter == 0 || f.n_starts == 0 {
            return Err(Error::InvalidParameter("max_iter and n_starts must be >= 1".into()));
        }
        if !(self.b_mt.is_finite() && self.b_mt >= 0.0) {
            return Err(Error::InvalidParameter("b_mt must be >= 0".into()));
        }
        if let Some(b) = self.constraints.rabi_bound {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidParameter("rabi_bound must be > 0".into()));
            }
        }
        self.mw()?;
        Ok(())
    }

    pub fn sys(&self) -> SpinSystemParams {
        let c = &self.constants;
        let sys = SpinSystemParams {
            d_zfs: c.d_zfs_mhz,
            gamma_e: c.gamma_e_mhz_per_mt,
            gamma_n: c.gamma_n_mhz_per_mt,
        };
        if self.gamma_n_zero {
            sys.without_nuclear_zeeman()
        } else {
            sys
        }
    }

    pub fn mw(&self) -> Result<MicrowaveField> {
        MicrowaveField::new(Vector3::from(self.mw_direction), &self.sys())
    }

    pub fn lm(&self) -> LmOptions {
        LmOptions {
            max_iter: self.fit.max_iter,
            xtol: self.fit.xtol,
            ftol: self.fit.ftol,
            ..LmOptions::default()
        }
    }

    pub fn fit_constraints(&self) -> FitConstraints {
        FitConstraints {
            det_sign: self.constraints.det_sign,
            rabi_bound: self.constraints.rabi_bound,
        }
    }

    pub fn full_fit_options(&self) -> FullFitOptions {
        FullFitOptions {
            sys: self.sys(),
            refine_d: self.fit.refine_d,
            refine_gamma_b: self.fit.refine_gamma_b,
            refine_frame: self.fit.refine_frame,
            n_starts: self.fit.n_starts,
            seed: self.fit.seed,
            lm: self.lm(),
            ..FullFitOptions::default()
        }
    }
}

/// One table row with the physical line it came from.
struct Row {
    line: u64,
    cells: Vec<String>,
}

struct Table {
    path: String,
    rows: Vec<Row>,
    columns: Vec<usize>,
}

impl Table {
    fn cell<'a>(&self, row: &'a Row, col: usize) -> &'a str {
        row.cells.get(self.columns[col]).map(String::as_str).unwrap_or("")
    }

    fn err(&self, line: u64, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn number(&self, row: &Row, col: usize, name: &str) -> Result<f64> {
        let raw = self.cell(row, col);
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(row.line, format!("column '{name}': non-numeric value '{raw}'"))),
        }
    }
}

/// Reads a table whose first non-comment row is the header. Lines starting
/// with `#` and blank lines are skipped; each remaining line is one record.
fn read_table(path: &Path, header: &[&str]) -> Result<Table> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{shown}: {e}")))?;
    let mut rows = Vec::new();
    let mut head: Option<(u64, Vec<String>)> = None;
    for (k, raw) in text.lines().enumerate() {
        let line = k as u64 + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(trimmed.as_bytes());
        let rec = reader
            .records()
            .next()
            .transpose()
            .map_err(|e| Error::Parse {
                path: shown.clone(),
                line,
                message: e.to_string(),
            })?
            .unwrap_or_default();
        let cells: Vec<String> = rec.iter().map(str::to_owned).collect();
        if head.is_none() {
            head = Some((line, cells));
        } else {
            rows.push(Row { line, cells });
        }
    }
    let (head_line, names) = head.ok_or_else(|| Error::Parse {
        path: shown.clone(),
        line: 1,
        message: "missing header row".into(),
    })?;
    let columns = header
        .iter()
        .map(|want| {
            names.iter().position(|n| n == want).ok_or_else(|| Error::Parse {
                path: shown.clone(),
                line: head_line,
                message: format!("missing column '{want}'"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table {
        path: shown,
        rows,
        columns,
    })
}

pub fn load_orientations(path: &Path) -> Result<Vec<OrientationRecord>> {
    let t = read_table(path, &ORIENTATIONS_HEADER)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for row in &t.rows {
        let id = t.cell(row, 0).to_owned();
        if id.is_empty() {
            return Err(t.err(row.line, "empty orient_id"));
        }
        if !seen.insert(id.clone()) {
            return Err(t.err(row.line, format!("duplicate orient_id '{id}'")));
        }
        let frame: Frame = t.cell(row, 1).parse().map_err(|m: String| t.err(row.line, m))?;
        let b_mt = t.number(row, 4, "b_mT")?;
        if b_mt < 0.0 {
            return Err(t.err(row.line, "b_mT must be >= 0"));
        }
        out.push(OrientationRecord {
            id,
            frame,
            angle1_deg: t.number(row, 2, "angle1_deg")?,
            angle2_deg: t.number(row, 3, "angle2_deg")?,
            b_mt,
        });
    }
    Ok(out)
}

fn known_id(t: &Table, row: &Row, ids: &HashSet<&str>) -> Result<String> {
    let id = t.cell(row, 0);
    if ids.contains(id) {
        Ok(id.to_owned())
    } else {
        Err(t.err(row.line, format!("unknown orientation id '{id}'")))
    }
}

fn positive(t: &Table, row: &Row, col: usize, name: &str) -> Result<f64> {
    let v = t.number(row, col, name)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(t.err(row.line, format!("column '{name}': uncertainty must be > 0, got {v}")))
    }
}

pub fn load_lines(path: &Path, orientations: &[OrientationRecord]) -> Result<Vec<LineRecord>> {
    let t = read_table(path, &LINES_HEADER)?;
    let ids: HashSet<&str> = orientations.iter().map(|o| o.id.as_str()).collect();
    t.rows
        .iter()
        .map(|row| {
            let orient_id = known_id(&t, row, &ids)?;
            let kind: LineKind = t.cell(row, 1).parse().map_err(|m: String| t.err(row.line, m))?;
            Ok(LineRecord {
                orient_id,
                kind,
                freq_mhz: t.number(row, 2, "freq_MHz")?,
                sigma_mhz: positive(&t, row, 3, "sigma_MHz")?,
            })
        })
        .collect()
}

pub fn load_ratios(path: &Path, orientations: &[OrientationRecord]) -> Result<Vec<RatioRecord>> {
    let t = read_table(path, &RATIOS_HEADER)?;
    let ids: HashSet<&str> = orientations.iter().map(|o| o.id.as_str()).collect();
    t.rows
        .iter()
        .map(|row| {
            Ok(RatioRecord {
                orient_id: known_id(&t, row, &ids)?,
                phi_deg: t.number(row, 1, "phi_deg")?,
                ratio: t.number(row, 2, "ratio")?,
                sigma: positive(&t, row, 3, "sigma")?,
            })
        })
        .collect()
}

/// Loads and validates a dataset. `lines` and `ratios` are both optional.
pub fn load_dataset(orientations: &Path, lines: Option<&Path>, ratios: Option<&Path>) -> Result<MeasuredDataset> {
    let o = load_orientations(orientations)?;
    let l = lines.map(|p| load_lines(p, &o)).transpose()?.unwrap_or_default();
    let r = ratios.map(|p| load_ratios(p, &o)).transpose()?.unwrap_or_default();
    let ds = MeasuredDataset {
        orientations: o,
        lines: l,
        ratios: r,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads `orientations.csv`, `lines.csv` and (if present) `ratios.csv` from a directory.
pub fn load_dataset_dir(dir: &Path) -> Result<MeasuredDataset> {
    let ratios = dir.join(RATIOS_FILE);
    load_dataset(
        &dir.join(ORIENTATIONS_FILE),
        Some(&dir.join(LINES_FILE)),
        ratios.exists().then_some(ratios.as_path()),
    )
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

/// Writes `# `-prefixed comment lines, then the table.
fn write_table(path: &Path, comments: &[String], header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut out = create(path)?;
    for c in comments {
        writeln!(out, "# {c}").map_err(io_err(path))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(&r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_orientations(path: &Path, records: &[OrientationRecord], comments: &[String]) -> Result<()> {
    let rows = records
        .iter()
        .map(|o| {
            vec![
                o.id.clone(),
                o.frame.to_string(),
                o.angle1_deg.to_string(),
                o.angle2_deg.to_string(),
                o.b_mt.to_string(),
            ]
        })
        .collect();
    write_table(path, comments, &ORIENTATIONS_HEADER, rows)
}

pub fn write_lines(path: &Path, records: &[LineRecord], comments: &[String]) -> Result<()> {
    let rows = records
        .iter()
        .map(|l| vec![l.orient_id.clone(), l.kind.to_string(), l.freq_mhz.to_string(), l.sigma_mhz.to_string()])
        .collect();
    write_table(path, comments, &LINES_HEADER, rows)
}

pub fn write_ratios(path: &Path, records: &[RatioRecord], comments: &[String]) -> Result<()> {
    let rows = records
        .iter()
        .map(|r| vec![r.orient_id.clone(), r.phi_deg.to_string(), r.ratio.to_string(), r.sigma.to_string()])
        .collect();
    write_table(path, comments, &RATIOS_HEADER, rows)
}

/// Writes the three tables into `dir`; `ratios.csv` only when there are ratios.
pub fn write_dataset(dir: &Path, ds: &MeasuredDataset, comments: &[String]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = vec![dir.join(ORIENTATIONS_FILE), dir.join(LINES_FILE)];
    write_orientations(&written[0], &ds.orientations, comments)?;
    write_lines(&written[1], &ds.lines, comments)?;
    if !ds.ratios.is_empty() {
        let p = dir.join(RATIOS_FILE);
        write_ratios(&p, &ds.ratios, comments)?;
        written.push(p);
    }
    Ok(written)
}

/// Generic numeric table, used for plot-ready sweeps.
pub fn write_numeric_table(path: &Path, header: &[&str], rows: &[Vec<f64>], comments: &[String]) -> Result<()> {
    let rows = rows.iter().map(|r| r.iter().map(f64::to_string).collect()).collect();
    write_table(path, comments, header, rows)
}
