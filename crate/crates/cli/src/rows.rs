//! Per-seed metric rows, their CSV store and the derived summary tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hallucidet_core::metrics::aggregate_seeds;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const METRICS_FILE: &str = "metrics.csv";

/// One AP@50 measurement: a method evaluated with one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub detector: String,
    pub method: String,
    /// Sweep coordinate such as `fraction=0.1`, or `-`.
    pub setting: String,
    pub seed: u64,
    pub ap50: f64,
    pub spec_hash: String,
}

impl MetricRow {
    /// Rows with equal keys replace each other on upsert.
    pub fn key(&self) -> (&str, &str, &str, &str, u64, &str) {
        (&self.experiment, &self.detector, &self.method, &self.setting, self.seed, &self.spec_hash)
    }

    pub fn group(&self) -> GroupKey {
        GroupKey {
            experiment: self.experiment.clone(),
            detector: self.detector.clone(),
            method: self.method.clone(),
            setting: self.setting.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub experiment: String,
    pub detector: String,
    pub method: String,
    pub setting: String,
}

/// Mean and sample std of one group's per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub detector: String,
    pub method: String,
    pub setting: String,
    pub n_seeds: usize,
    pub mean_ap50: f64,
    pub std_ap50: f64,
    pub seeds: String,
}

pub fn read_rows(path: &Path) -> CliResult<Vec<MetricRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(CliError::from)).collect()
}

/// Writes `rows` to a sibling temp file and renames it over `path`.
pub fn write_csv_atomic<S: Serialize>(path: &Path, rows: &[S]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = tmp_path(path);
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_text_atomic(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = tmp_path(path);
    fs::File::create(&tmp)?.write_all(text.as_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".{}.tmp", std::process::id()));
    path.with_file_name(name)
}

/// Exclusive lock held as a `create_new` marker file.
struct FileLock(PathBuf);

impl FileLock {
    const TIMEOUT: Duration = Duration::from_secs(120);

    fn acquire(target: &Path) -> CliResult<Self> {
        let mut name = target.file_name().unwrap_or_default().to_os_string();
        name.push(".lock");
        let lock = target.with_file_name(name);
        let start = Instant::now();
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
                Ok(_) => return Ok(Self(lock)),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > Self::TIMEOUT {
                        return Err(CliError::Io(std::io::Error::new(
                            std::io::ErrorKind::TimedOut,
                            format!("lock {} held too long", lock.display()),
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Merges `new` into the CSV at `path`: rows with a matching key are
/// replaced in place, others are appended. Safe against concurrent callers.
pub fn upsert_rows(path: &Path, new: &[MetricRow]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let _lock = FileLock::acquire(path)?;
    let mut rows = read_rows(path)?;
    for n in new {
        match rows.iter_mut().find(|r| r.key() == n.key()) {
            Some(slot) => *slot = n.clone(),
            None => rows.push(n.clone()),
        }
    }
    write_csv_atomic(path, &rows)
}

/// Groups rows by (experiment, detector, method, setting). When the same
/// group and seed appear under several spec hashes the last row wins.
pub fn summarize(rows: &[MetricRow]) -> CliResult<Vec<SummaryRow>> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.group()).or_default().insert(r.seed, r.ap50);
    }
    groups
        .into_iter()
        .map(|(k, by_seed)| {
            let vals: Vec<f64> = by_seed.values().copied().collect();
            let (mean, std) = aggregate_seeds(&vals)?;
            Ok(SummaryRow {
                experiment: k.experiment,
                detector: k.detector,
                method: k.method,
                setting: k.setting,
                n_seeds: vals.len(),
                mean_ap50: mean,
                std_ap50: std,
                seeds: by_seed.keys().map(|s| s.to_string()).collect::<Vec<_>>().join(" "),
            })
        })
        .collect()
}

/// Mean AP of the group matching `method` and `setting`, if any.
pub fn mean_of(summary: &[SummaryRow], method: &str, setting: &str) -> Option<f64> {
    summary
        .iter()
        .find(|s| s.method == method && s.setting == setting)
        .map(|s| s.mean_ap50)
}

pub fn setting_value<'a>(setting: &'a str, name: &str) -> Option<&'a str> {
    setting.strip_prefix(name)?.strip_prefix('=')
}

/// `(x, mean, std)` series of one experiment's sweep, sorted by `x`.
pub fn sweep_points(summary: &[SummaryRow], experiment: &str, name: &str) -> Vec<(f64, f64, f64)> {
    let mut pts: Vec<_> = summary
        .iter()
        .filter(|s| s.experiment == experiment)
        .filter_map(|s| {
            let x: f64 = setting_value(&s.setting, name)?.parse().ok()?;
            Some((x, s.mean_ap50, s.std_ap50))
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

/// Line plot of `(x, mean, std)` as SVG. Every point carries its exact
/// values in `data-x`, `data-mean` and `data-std` attributes.
pub fn line_plot_svg(points: &[(f64, f64, f64)], x_label: &str, y_label: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    let (x_min, x_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let px = |x: f64| M + (x - x_min) / span * (W - 2.0 * M);
    let py = |y: f64| H - M - y.clamp(0.0, 1.0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    s.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    s.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = H - M,
        r = W - M
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{y_label}</text>\n",
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0
    ));
    if !points.is_empty() {
        let path: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
    }
    for &(x, m, sd) in points {
        s.push_str(&format!(
            "<circle class=\"point\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"steelblue\" data-x=\"{x}\" data-mean=\"{m}\" data-std=\"{sd}\"/>\n",
            px(x),
            py(m)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Recovers the `(x, mean, std)` triples written by [`line_plot_svg`].
pub fn parse_plot_points(svg: &str) -> Vec<(f64, f64, f64)> {
    fn attr(line: &str, name: &str) -> Option<f64> {
        let start = line.find(&format!("{name}=\""))? + name.len() + 2;
        let end = start + line[start..].find('"')?;
        line[start..end].parse().ok()
    }
    svg.lines()
        .filter(|l| l.contains("class=\"point\""))
        .filter_map(|l| Some((attr(l, "data-x")?, attr(l, "data-mean")?, attr(l, "data-std")?)))
        .collect()
}
