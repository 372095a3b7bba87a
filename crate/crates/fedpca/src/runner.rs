//! Experiment-matrix runner: executes every (method, seed) cell and writes
//! CSV/JSON artifacts.
//!
//! Artifacts are byte-deterministic: numbers are written with Rust's
//! shortest round-trip formatting, lines end with LF, nothing carries a
//! timestamp, and filenames are pure functions of (method, seed, scenario
//! hash). Cells share nothing, so they may run in parallel; `deterministic`
//! forces serial execution. Either schedule produces identical bytes — the
//! flag exists so reproducibility never depends on the thread pool.
//!
//! Each seed is an independent replicate: the cell's scenario is built from
//! a seed derived from (scenario seed, run seed), and the same scenario is
//! shared by all methods at that run seed so method comparisons stay paired.

use crate::config::{scenario_hash, ExperimentConfig};
use crate::data::build_scenario;
use crate::error::{Error, Result};
use crate::fed::{run_experiment, Method, RunReport};
use crate::rng::{derive_seed, stream};
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

/// One (method, seed) cell's outcome in the index file.
#[derive(Debug, Clone, Serialize)]
pub struct CellRecord {
    pub method: String,
    pub seed: u64,
    /// "ok" or "failed".
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds_csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analysis_csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary_json: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Top-level artifact listing, written as `index.json`.
#[derive(Debug, Clone, Serialize)]
pub struct MatrixIndex {
    pub scenario_hash: String,
    pub cells: Vec<CellRecord>,
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    method: &'a str,
    scenario_hash: &'a str,
    seed: u64,
    worst_acc: f64,
    avg_acc: f64,
    worst_auc: f64,
    avg_auc: f64,
    std_acc: f64,
    std_auc: f64,
    weight_diagnostic: f64,
}

/// Runs the full methods × seeds matrix and writes all artifacts into the
/// config's output directory. Cell failures are recorded in the index
/// without aborting the rest of the matrix; only setup failures (for
/// example an unwritable output directory) abort the whole run.
pub fn run_matrix(config: &ExperimentConfig, deterministic: bool) -> Result<MatrixIndex> {
    let out_dir = &config.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot create output dir {}: {e}", out_dir.display()),
        ))
    })?;
    let hash = scenario_hash(&config.scenario)?;
    let short = &hash[..8];

    let cells: Vec<(Method, u64)> = config
        .methods()
        .into_iter()
        .flat_map(|m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();

    let run_cell = |&(method, seed): &(Method, u64)| -> CellRecord {
        match execute_cell(config, method, seed, &hash, short, out_dir) {
            Ok(record) => record,
            Err(e) => CellRecord {
                method: method.token(),
                seed,
                status: "failed".into(),
                rounds_csv: None,
                analysis_csv: None,
                summary_json: None,
                warnings: Vec::new(),
                error: Some(e.to_string()),
            },
        }
    };

    let records: Vec<CellRecord> = if deterministic {
        cells.iter().map(run_cell).collect()
    } else {
        cells.par_iter().map(run_cell).collect()
    };

    let index = MatrixIndex { scenario_hash: hash.clone(), cells: records };
    let mut text = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Parse(format!("index serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(out_dir.join("index.json"), text)?;
    Ok(index)
}

/// The scenario configuration a given run seed actually uses: the same
/// shape as the config's scenario, with a seed derived from (scenario seed,
/// run seed) so every seed is an independent replicate.
pub fn cell_scenario_config(
    config: &ExperimentConfig,
    run_seed: u64,
) -> crate::data::ScenarioConfig {
    let mut scenario_config = config.scenario.clone();
    scenario_config.seed = derive_seed(config.scenario.seed, &[stream::SCENARIO, run_seed]);
    scenario_config
}

/// Executes one cell and writes its artifacts.
fn execute_cell(
    config: &ExperimentConfig,
    method: Method,
    seed: u64,
    hash: &str,
    short: &str,
    out_dir: &Path,
) -> Result<CellRecord> {
    let scenario = build_scenario(&cell_scenario_config(config, seed))?;
    let report = run_experiment(&scenario, &config.rounds, &config.training, method, seed)?;

    let token = method.token();
    let stem = format!("{token}_s{seed}_{short}");
    let rounds_name = format!("rounds_{stem}.csv");
    let summary_name = format!("summary_{stem}.json");
    std::fs::write(out_dir.join(&rounds_name), rounds_csv(&report, &token))?;

    let analysis_name = if matches!(method, Method::FedPca(_)) {
        let name = format!("analysis_{stem}.csv");
        std::fs::write(out_dir.join(&name), analysis_csv(&report))?;
        Some(name)
    } else {
        None
    };

    let summary = SummaryJson {
        method: &token,
        scenario_hash: hash,
        seed,
        worst_acc: report.final_summary.worst_acc,
        avg_acc: report.final_summary.avg_acc,
        worst_auc: report.final_summary.worst_auc,
        avg_auc: report.final_summary.avg_auc,
        std_acc: report.final_summary.std_acc,
        std_auc: report.final_summary.std_auc,
        weight_diagnostic: report.weight_diagnostic,
    };
    let mut text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Parse(format!("summary serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(out_dir.join(&summary_name), text)?;

    let warnings: Vec<String> =
        report.rounds.iter().filter_map(|r| r.warning.clone()).collect();
    Ok(CellRecord {
        method: token,
        seed,
        status: "ok".into(),
        rounds_csv: Some(rounds_name),
        analysis_csv: analysis_name,
        summary_json: Some(summary_name),
        warnings,
        error: None,
    })
}

/// Per-round CSV: metrics, τ, the weight vector, and set assignments.
fn rounds_csv(report: &RunReport, method: &str) -> String {
    let k = report.rounds.first().map_or(0, |r| r.weights.len());
    let mut out = String::new();
    out.push_str("round,method,worst_acc,avg_acc,worst_auc,avg_auc,std_acc,std_auc,tau");
    for i in 0..k {
        let _ = write!(out, ",w_{i}");
    }
    for i in 0..k {
        let _ = write!(out, ",set_{i}");
    }
    out.push('\n');
    for record in &report.rounds {
        let s = &record.summary;
        let _ = write!(
            out,
            "{},{method},{},{},{},{},{},{},",
            record.round, s.worst_acc, s.avg_acc, s.worst_auc, s.avg_auc, s.std_acc, s.std_auc
        );
        if let Some(tau) = record.tau {
            let _ = write!(out, "{tau}");
        }
        for w in &record.weights {
            let _ = write!(out, ",{w}");
        }
        match &record.partition {
            Some(partition) => {
                for i in 0..k {
                    let _ = write!(out, ",{}", partition.label_of(i).token());
                }
            }
            None => {
                for _ in 0..k {
                    out.push_str(",-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Per-client diagnostics CSV for identification rounds.
fn analysis_csv(report: &RunReport) -> String {
    let mut out = String::from(
        "round,client,loss,dispersion,resp_0,resp_1,resp_2,assigned,effective\n",
    );
    for record in &report.rounds {
        for row in &record.analysis {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                record.round,
                row.client,
                row.loss,
                row.dispersion,
                row.responsibilities[0],
                row.responsibilities[1],
                row.responsibilities[2],
                row.assigned.token(),
                row.effective.token()
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;
    use crate::config::MethodSpec;
    use std::fs;

    fn small_config(out: &Path) -> ExperimentConfig {
        let text = format!(
            r#"
            seeds = [1, 2]
            output_dir = "{}"

            [scenario]
            num_clients = 5
            num_classes = 3
            input_dim = 4
            samples_per_client = 24
            rare_client_fraction = 0.2
            corruption_sigma = 2.0
            rho = 0.25
            eta = 1.0
            partition = {{ kind = "iid" }}
            noise_placement = "common_only"
            seed = 11
            test_samples = 60

            [rounds]
            total_rounds = 4
            warmup_rounds = 1
            final_window = 2

            [[methods]]
            kind = "fedpca"
            strategy = "drop"

            [[methods]]
            kind = "fedavg"
            "#,
            out.display()
        );
        parse_config_str(&text).unwrap()
    }

    #[test]
    fn matrix_writes_expected_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let index = run_matrix(&config, true).unwrap();
        assert_eq!(index.cells.len(), 4);
        assert!(index.cells.iter().all(|c| c.status == "ok"));

        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("rounds_")).count(), 4);
        assert_eq!(names.iter().filter(|n| n.starts_with("summary_")).count(), 4);
        // Only the analysis method emits per-client diagnostics.
        assert_eq!(names.iter().filter(|n| n.starts_with("analysis_")).count(), 2);
        assert!(names.contains(&"index.json".to_string()));

        for cell in &index.cells {
            let rounds = cell.rounds_csv.as_ref().unwrap();
            let text = fs::read_to_string(dir.path().join(rounds)).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines.len(), 1 + 4, "header plus one row per round");
            assert!(lines[0].starts_with("round,method,worst_acc"));
            assert!(lines[0].contains("w_4"));
            assert!(lines[0].contains("set_4"));
            assert!(!text.contains('\r'));
            let summary = cell.summary_json.as_ref().unwrap();
            let parsed: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(dir.path().join(summary)).unwrap())
                    .unwrap();
            assert_eq!(parsed["scenario_hash"].as_str().unwrap(), index.scenario_hash);
            assert_eq!(parsed["method"].as_str().unwrap(), cell.method);
            assert!(parsed["weight_diagnostic"].is_number());
        }
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config = small_config(dir_a.path());
        run_matrix(&config, true).unwrap();
        config.output_dir = dir_b.path().to_path_buf();
        run_matrix(&config, true).unwrap();

        let mut names: Vec<String> = fs::read_dir(dir_a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            let a = fs::read(dir_a.path().join(&name)).unwrap();
            let b = fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }
    }

    #[test]
    fn parallel_and_serial_schedules_agree() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config = small_config(dir_a.path());
        run_matrix(&config, true).unwrap();
        config.output_dir = dir_b.path().to_path_buf();
        run_matrix(&config, false).unwrap();
        for entry in fs::read_dir(dir_a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(dir_a.path().join(&name)).unwrap();
            let b = fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs between schedules");
        }
    }

    #[test]
    fn failed_cells_do_not_abort_the_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config(dir.path());
        // An invalid exponent fails inside the cell, after parse-time
        // validation would normally have caught it.
        config.methods.push(MethodSpec::LossWeighted { q: -1.0 });
        let index = run_matrix(&config, true).unwrap();
        assert_eq!(index.cells.len(), 6);
        let failed: Vec<_> =
            index.cells.iter().filter(|c| c.status == "failed").collect();
        assert_eq!(failed.len(), 2);
        for cell in &failed {
            assert!(cell.error.as_ref().unwrap().contains("q"));
            assert!(cell.rounds_csv.is_none());
        }
        assert_eq!(index.cells.iter().filter(|c| c.status == "ok").count(), 4);
    }

    #[test]
    fn unwritable_output_dir_fails_immediately() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("blocker");
        fs::write(&blocker, "file, not a directory").unwrap();
        let mut config = small_config(dir.path());
        config.output_dir = blocker.join("nested");
        assert!(run_matrix(&config, true).is_err());
    }
}
