use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faultlab::{instance_seed, realize_faulty_model, FaultConfig, FaultKind};
use crate::netgraph::{load_model, ModelSpec, ParameterStore};
use crate::oneshot::{load_test_vector, measure, Baseline, TestVector};

pub const DEFAULT_INSTANCES: usize = 1000;

fn default_instances() -> usize {
    DEFAULT_INSTANCES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub kind: FaultKind,
    pub severities: Vec<f64>,
}

/// Grid, instance count, thresholds and base seed of a campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSettings {
    pub grid: Vec<GridEntry>,
    #[serde(rename = "M", alias = "m", default = "default_instances")]
    pub instances: usize,
    pub thresholds: Vec<f64>,
    pub base_seed: u64,
}

impl CampaignSettings {
    /// Checks the settings and returns the thresholds sorted descending with
    /// duplicates removed.
    pub fn normalized_thresholds(&self) -> Result<Vec<f64>> {
        if self.instances == 0 {
            return Err(Error::InvalidArgument("M must be at least 1".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("campaign grid is empty".into()));
        }
        for entry in &self.grid {
            for &s in &entry.severities {
                entry.kind.check_severity(s)?;
            }
        }
        if self.thresholds.is_empty() {
            return Err(Error::InvalidArgument(
                "campaign lists no thresholds".into(),
            ));
        }
        if let Some(t) = self
            .thresholds
            .iter()
            .find(|t| !(**t > 0.0) || !t.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "threshold must be positive, got {t}"
            )));
        }
        let mut ts = self.thresholds.clone();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        Ok(ts)
    }
}

/// On-disk campaign description; relative paths resolve against the
/// campaign file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignFile {
    pub model: PathBuf,
    pub weights: PathBuf,
    pub tv: PathBuf,
    #[serde(flatten)]
    pub settings: CampaignSettings,
}

impl CampaignFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub detected: usize,
    pub coverage_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub kind: FaultKind,
    pub severity: f64,
    #[serde(rename = "M")]
    pub instances: usize,
    /// Forward passes issued for this cell; one per instance.
    pub forward_passes: usize,
    pub rows: Vec<ThresholdRow>,
    /// Divergence of every instance, in instance order.
    pub d_kl: Vec<f64>,
}

impl CellReport {
    pub fn coverage_at(&self, threshold: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.threshold == threshold)
            .map(|r| r.coverage_percent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub model: String,
    pub weights: String,
    pub tv: String,
    pub settings: CampaignSettings,
    pub baseline: Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub header: ReportHeader,
    pub cells: Vec<CellReport>,
}

pub fn coverage_percent(detected: usize, instances: usize) -> f64 {
    detected as f64 * 100.0 / instances as f64
}

fn run_cell(
    spec: &ModelSpec,
    params: &ParameterStore,
    tv: &TestVector,
    kind: FaultKind,
    severity: f64,
    instances: usize,
    base_seed: u64,
    thresholds: &[f64],
) -> Result<CellReport> {
    let d_kl = (0..instances as u64)
        .into_par_iter()
        .map(|i| {
            let fault = FaultConfig {
                kind,
                severity,
                seed: instance_seed(base_seed, i),
            };
            let faulty = realize_faulty_model(params, &fault)?;
            measure(spec, &faulty, tv).map(|(_, d)| d)
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows = thresholds
        .iter()
        .map(|&t| {
            let detected = d_kl.iter().filter(|&&d| d >= t).count();
            ThresholdRow {
                threshold: t,
                detected,
                coverage_percent: coverage_percent(detected, instances),
            }
        })
        .collect();
    Ok(CellReport {
        kind,
        severity,
        instances,
        forward_passes: d_kl.len(),
        rows,
        d_kl,
    })
}

/// Runs every grid cell with `M` seeded fault instances. Each instance costs
/// exactly one forward pass of the test vector; its divergence is compared
/// against every threshold.
///
/// `params` are the full-precision parameters; fault realization quantizes
/// them the same way the reference used for generation was.
pub fn run_campaign(
    spec: &ModelSpec,
    params: &ParameterStore,
    tv: &TestVector,
    settings: &CampaignSettings,
    labels: (&str, &str, &str),
) -> Result<CoverageReport> {
    let thresholds = settings.normalized_thresholds()?;
    let mut cells = Vec::new();
    for entry in &settings.grid {
        for &severity in &entry.severities {
            cells.push(run_cell(
                spec,
                params,
                tv,
                entry.kind,
                severity,
                settings.instances,
                settings.base_seed,
                &thresholds,
            )?);
        }
    }
    Ok(CoverageReport {
        header: ReportHeader {
            model: labels.0.to_string(),
            weights: labels.1.to_string(),
            tv: labels.2.to_string(),
            settings: CampaignSettings {
                thresholds,
                ..settings.clone()
            },
            baseline: tv.baseline,
        },
        cells,
    })
}

/// Loads the campaign file and everything it references, then runs it.
pub fn run_coverage(campaign_path: impl AsRef<Path>) -> Result<CoverageReport> {
    let campaign_path = campaign_path.as_ref();
    let campaign = CampaignFile::load(campaign_path)?;
    let dir = campaign_path.parent().unwrap_or(Path::new("."));
    let (spec, params) = load_model(dir.join(&campaign.model), dir.join(&campaign.weights))?;
    let tv = load_test_vector(dir.join(&campaign.tv))?;
    run_campaign(
        &spec,
        &params,
        &tv,
        &campaign.settings,
        (
            &campaign.model.to_string_lossy(),
            &campaign.weights.to_string_lossy(),
            &campaign.tv.to_string_lossy(),
        ),
    )
}

impl CoverageReport {
    /// Canonical CSV: `#` provenance lines, then one row per cell and
    /// threshold.
    pub fn to_csv(&self) -> String {
        let h = &self.header;
        let mut out = String::new();
        let _ = writeln!(out, "# oneshot coverage report");
        let _ = writeln!(out, "# model={} weights={} tv={}", h.model, h.weights, h.tv);
        let _ = writeln!(
            out,
            "# M={} base_seed={} thresholds={}",
            h.settings.instances,
            h.settings.base_seed,
            h.settings
                .thresholds
                .iter()
                .map(|t| format!("{t:e}"))
                .collect::<Vec<_>>()
                .join(";")
        );
        let _ = writeln!(
            out,
            "# baseline mu0={:e} sigma0={:e} dkl0={:e}",
            h.baseline.mu0, h.baseline.sigma0, h.baseline.dkl0
        );
        let _ = writeln!(out, "kind,severity,threshold,detected,M,coverage_percent");
        for cell in &self.cells {
            for row in &cell.rows {
                let _ = writeln!(
                    out,
                    "{},{},{:e},{},{},{:.3}",
                    cell.kind,
                    cell.severity,
                    row.threshold,
                    row.detected,
                    cell.instances,
                    row.coverage_percent
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the CSV to `path` and the JSON mirror next to it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let json_path = path.with_extension("json");
        let mut json = self.to_json()?;
        json.push('\n');
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        Ok(json_path)
    }
}

/// Coverage matrix: rows are thresholds (loosest first), columns are grid
/// cells.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub thresholds: Vec<f64>,
    pub columns: Vec<(FaultKind, f64)>,
    pub coverage: Vec<Vec<f64>>,
    /// Coverage never drops as the threshold tightens, in every column.
    pub monotone: bool,
}

pub fn threshold_sweep(report: &CoverageReport) -> SweepTable {
    let thresholds = report.header.settings.thresholds.clone();
    let columns = report.cells.iter().map(|c| (c.kind, c.severity)).collect();
    let coverage: Vec<Vec<f64>> = thresholds
        .iter()
        .map(|&t| {
            report
                .cells
                .iter()
                .map(|c| c.coverage_at(t).unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    let monotone = coverage
        .windows(2)
        .all(|w| w[0].iter().zip(&w[1]).all(|(loose, tight)| tight >= loose));
    SweepTable {
        thresholds,
        columns,
        coverage,
        monotone,
    }
}

impl std::fmt::Display for SweepTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:>10}", "threshold")?;
        for (kind, sev) in &self.columns {
            write!(f, " {:>30}", format!("{kind}@{sev}"))?;
        }
        writeln!(f)?;
        for (t, row) in self.thresholds.iter().zip(&self.coverage) {
            write!(f, "{:>10}", format!("{t:e}"))?;
            for c in row {
                write!(f, " {:>30}", format!("{c:.3}"))?;
            }
            writeln!(f)?;
        }
        writeln!(
            f,
            "coverage monotone in threshold: {}",
            if self.monotone { "yes" } else { "NO" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(d_kl: Vec<f64>, thresholds: &[f64]) -> CellReport {
        let m = d_kl.len();
        CellReport {
            kind: FaultKind::BitFlip,
            severity: 0.1,
            instances: m,
            forward_passes: m,
            rows: thresholds
                .iter()
                .map(|&t| {
                    let detected = d_kl.iter().filter(|&&d| d >= t).count();
                    ThresholdRow {
                        threshold: t,
                        detected,
                        coverage_percent: coverage_percent(detected, m),
                    }
                })
                .collect(),
            d_kl,
        }
    }

    fn report(cells: Vec<CellReport>, thresholds: Vec<f64>) -> CoverageReport {
        CoverageReport {
            header: ReportHeader {
                model: "m.json".into(),
                weights: "w.bin".into(),
                tv: "tv.json".into(),
                settings: CampaignSettings {
                    grid: vec![],
                    instances: 0,
                    thresholds,
                    base_seed: 1,
                },
                baseline: Baseline {
                    mu0: 0.0,
                    sigma0: 1.0,
                    dkl0: 0.0,
                },
            },
            cells,
        }
    }

    #[test]
    fn coverage_arithmetic() {
        assert_eq!(coverage_percent(997, 1000), 99.7);
        assert_eq!(coverage_percent(0, 5), 0.0);
        assert_eq!(coverage_percent(5, 5), 100.0);
    }

    #[test]
    fn sweep_is_monotone_on_shared_samples() {
        let ts = vec![1e-4, 1e-5, 1e-6, 1e-7];
        let c = cell(vec![5e-4, 5e-5, 5e-6, 5e-8, 1e-4], &ts);
        let table = threshold_sweep(&report(vec![c], ts));
        assert!(table.monotone);
        let col: Vec<f64> = table.coverage.iter().map(|r| r[0]).collect();
        assert_eq!(col, vec![40.0, 60.0, 80.0, 80.0]);
        assert!(table.to_string().contains("monotone in threshold: yes"));
    }

    #[test]
    fn single_threshold_passthrough() {
        let c = cell(vec![1.0, 0.0], &[0.5]);
        let table = threshold_sweep(&report(vec![c], vec![0.5]));
        assert_eq!(table.coverage, vec![vec![50.0]]);
        assert!(table.monotone);
    }

    #[test]
    fn settings_validation() {
        let ok = CampaignSettings {
            grid: vec![GridEntry {
                kind: FaultKind::LevelFlip,
                severities: vec![0.1],
            }],
            instances: 3,
            thresholds: vec![1e-7, 1e-4, 1e-5, 1e-4],
            base_seed: 0,
        };
        assert_eq!(ok.normalized_thresholds().unwrap(), vec![1e-4, 1e-5, 1e-7]);
        for bad in [
            CampaignSettings {
                instances: 0,
                ..ok.clone()
            },
            CampaignSettings {
                thresholds: vec![],
                ..ok.clone()
            },
            CampaignSettings {
                thresholds: vec![-1.0],
                ..ok.clone()
            },
            CampaignSettings {
                grid: vec![GridEntry {
                    kind: FaultKind::BitFlip,
                    severities: vec![150.0],
                }],
                ..ok.clone()
            },
        ] {
            assert!(bad.normalized_thresholds().is_err());
        }
    }

    #[test]
    fn campaign_json_shape() {
        let text = r#"{"model":"m.json","weights":"w.bin","tv":"tv.json",
            "grid":[{"kind":"multiplicative-variation","severities":[0.04,0.1]}],
            "M":20,"thresholds":[1e-4],"base_seed":7}"#;
        let c: CampaignFile = serde_json::from_str(text).unwrap();
        assert_eq!(c.settings.instances, 20);
        assert_eq!(c.settings.grid[0].kind, FaultKind::MultiplicativeVariation);
        let defaulted: CampaignFile = serde_json::from_str(
            r#"{"model":"m","weights":"w","tv":"t","grid":[],"thresholds":[1e-4],"base_seed":0}"#,
        )
        .unwrap();
        assert_eq!(defaulted.settings.instances, DEFAULT_INSTANCES);
    }

    #[test]
    fn csv_layout() {
        let c = cell(vec![1.0, 0.0, 2.0], &[0.5]);
        let csv = report(vec![c], vec![0.5]).to_csv();
        let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(
            lines[0],
            "kind,severity,threshold,detected,M,coverage_percent"
        );
        assert_eq!(lines[1], "bit-flip,0.1,5e-1,2,3,66.667");
    }
}
