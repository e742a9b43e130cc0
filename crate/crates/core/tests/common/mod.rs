//! Golden-table checks shared by the golden and acceptance test targets.

use std::path::PathBuf;

use demian_core::aggregation::{format_sr, macro_avg, oracle_row, summarize_families, FamilySpec, ResultsMatrix};

pub const FIXED_ASPECTS: [&str; 5] = [
    "baseline",
    "physical_motion",
    "scene_composition",
    "arm_pose",
    "reasoning",
];
pub const WITH_INSTRUCTOR: [&str; 6] = [
    "baseline",
    "physical_motion",
    "scene_composition",
    "arm_pose",
    "reasoning",
    "instructor",
];
pub const DETAIL_SPLITS: [&str; 9] = [
    "Pick Std",
    "Pick Hard",
    "Pick OOD",
    "P+P Std",
    "P+P Hard",
    "P+P OOD",
    "NextTo ID",
    "NextTo OOD",
    "Color",
];

pub fn golden(name: &str) -> ResultsMatrix {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    ResultsMatrix::read_csv(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn check_cell(expected: &ResultsMatrix, row: &str, column: &str, got: f64) -> Result<(), String> {
    let want = expected.value(row, column).map_err(|e| e.to_string())?;
    if format_sr(got) == format_sr(want) {
        Ok(())
    } else {
        Err(format!(
            "{row} / {column}: computed {got} displays {}, table has {}",
            format_sr(got),
            format_sr(want)
        ))
    }
}

fn task_columns(m: &ResultsMatrix) -> Vec<&str> {
    m.columns().iter().map(String::as_str).filter(|c| *c != "Avg").collect()
}

/// Oracle cells and every Avg cell of a 17-task table. Returns cells checked.
pub fn check_robocasa(name: &str) -> Result<usize, String> {
    let m = golden(name);
    let tasks = task_columns(&m);
    let tasks_only = m.select_columns(&tasks).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let oracle = oracle_row(&tasks_only, &FIXED_ASPECTS).map_err(|e| e.to_string())?;
    for (task, v) in tasks.iter().zip(&oracle) {
        check_cell(&m, "oracle", task, *v)?;
        checked += 1;
    }
    for row in m.rows() {
        let avg = macro_avg(&tasks_only.dense_row(row).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        check_cell(&m, row, "Avg", avg)?;
        checked += 1;
    }
    Ok(checked)
}

/// Mean of the VLA oracle row over the 17 tasks.
pub fn robocasa_vla_oracle_avg() -> f64 {
    let m = golden("robocasa_vla.csv");
    let tasks = task_columns(&m);
    let oracle = oracle_row(&m.select_columns(&tasks).unwrap(), &FIXED_ASPECTS).unwrap();
    macro_avg(&oracle).unwrap()
}

/// Family summaries, detail-table averages and both oracle rows.
pub fn check_molmospaces(policy: &str, detail_oracle_over: &[&str]) -> Result<usize, String> {
    let err = |e: demian_core::aggregation::AggregationError| e.to_string();
    let detail = golden(&format!("molmospaces_detail_{policy}.csv"));
    let summary = golden(&format!("molmospaces_{policy}.csv"));
    let splits = detail.select_columns(&DETAIL_SPLITS).map_err(err)?;
    let mut checked = 0;

    let fams = summarize_families(&splits, &FamilySpec::molmospaces_summary()).map_err(err)?;
    for row in summary.rows().iter().filter(|r| *r != "oracle") {
        for col in summary.columns() {
            check_cell(&summary, row, col, fams.value(row, col).map_err(err)?)?;
            checked += 1;
        }
    }

    let avgs = summarize_families(&splits, &FamilySpec::molmospaces_detail_averages()).map_err(err)?;
    for row in detail.rows().iter().filter(|r| *r != "oracle") {
        for col in avgs.columns() {
            check_cell(&detail, row, col, avgs.value(row, col).map_err(err)?)?;
            checked += 1;
        }
    }

    let oracle = oracle_row(&splits, detail_oracle_over).map_err(err)?;
    for (col, v) in DETAIL_SPLITS.iter().zip(&oracle) {
        check_cell(&detail, "oracle", col, *v)?;
        checked += 1;
    }
    let mut oracle_m = ResultsMatrix::new(DETAIL_SPLITS.iter().map(|s| s.to_string()).collect()).map_err(err)?;
    oracle_m.push_dense_row("oracle", &oracle).map_err(err)?;
    let oracle_avgs = summarize_families(&oracle_m, &FamilySpec::molmospaces_detail_averages()).map_err(err)?;
    for col in oracle_avgs.columns() {
        check_cell(&detail, "oracle", col, oracle_avgs.value("oracle", col).map_err(err)?)?;
        checked += 1;
    }

    let fam_cols = ["Pick", "P+P", "NextTo", "Color"];
    let fam_only = summary.select_columns(&fam_cols).map_err(err)?;
    let summary_oracle = oracle_row(&fam_only, &FIXED_ASPECTS).map_err(err)?;
    for (col, v) in fam_cols.iter().zip(&summary_oracle) {
        check_cell(&summary, "oracle", col, *v)?;
        checked += 1;
    }
    check_cell(&summary, "oracle", "Avg", macro_avg(&summary_oracle).map_err(err)?)?;
    Ok(checked + 1)
}
