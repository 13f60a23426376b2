//! Subcommand implementations. Result files are written to a temporary
//! sibling and renamed into place, so a nonzero exit never leaves a
//! partial file behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svydid_core::{
    estimate_overall, make_jkn_replicates, render_report, replicate_estimate, report_from_records,
    run_cell_records, AttEstimate, CellReport, Estimator, HarnessEstimator, InferenceMode,
    PanelDataset, PanelKind, RepRecord, ReplicateMethod, ReplicateWeights, ScenarioConfig,
};

use crate::dataset::{self, LoadedData};
use crate::errors::{classify, CliError};
use crate::{EstimateArgs, ReportArgs, SimulateArgs};

pub const SCHEMA_VERSION: u32 = 1;

fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let tmp = match path.file_name() {
        Some(name) => {
            let mut n = name.to_os_string();
            n.push(".tmp");
            path.with_file_name(n)
        }
        None => return Err(CliError::Usage(format!("not a file path: {}", path.display()))),
    };
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// First line of a record file: everything needed to recompute the cell
/// report from the replication records that follow.
#[derive(Serialize, Deserialize)]
struct RecordMeta {
    schema_version: u32,
    config: ScenarioConfig,
    estimator: HarnessEstimator,
    reps: usize,
    failures: usize,
    seed: u64,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

fn scenario_config(name: &str, n: usize) -> Result<ScenarioConfig, CliError> {
    match name {
        "s1" => Ok(ScenarioConfig::s1(n)),
        "s2" => Ok(ScenarioConfig::s2(n)),
        "s3" => Ok(ScenarioConfig::s3(n)),
        "s4" => Ok(ScenarioConfig::s4(n)),
        other => Err(CliError::Usage(format!("unknown scenario '{other}'"))),
    }
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let seed = args.seed.ok_or_else(|| {
        CliError::Usage("--seed is required: all randomness must be reproducible".to_string())
    })?;
    let scenarios = split_list(&args.scenario);
    let estimators: Vec<HarnessEstimator> = split_list(&args.estimator)
        .iter()
        .map(|s| s.parse().map_err(|_| CliError::Usage(format!("unknown estimator '{s}'"))))
        .collect::<Result<_, _>>()?;
    let sizes: Vec<usize> = split_list(&args.n)
        .iter()
        .map(|s| s.parse().map_err(|_| CliError::Usage(format!("bad sample size '{s}'"))))
        .collect::<Result<_, _>>()?;
    if scenarios.is_empty() || estimators.is_empty() || sizes.is_empty() {
        return Err(CliError::Usage("empty simulation grid".to_string()));
    }
    fs::create_dir_all(&args.out)?;

    let mut cells: Vec<CellReport> = Vec::new();
    for sc in &scenarios {
        for &est in &estimators {
            for &n in &sizes {
                let cfg = scenario_config(sc, n)?;
                let (records, failures) =
                    run_cell_records(&cfg, est, args.reps, seed).map_err(classify)?;
                let report = report_from_records(&cfg, est, args.reps, failures, &records);
                let meta = RecordMeta {
                    schema_version: SCHEMA_VERSION,
                    config: cfg.clone(),
                    estimator: est,
                    reps: args.reps,
                    failures,
                    seed,
                };
                let mut out = String::new();
                out.push_str(&serde_json::to_string(&meta).expect("serializable"));
                out.push('\n');
                for r in &records {
                    out.push_str(&serde_json::to_string(r).expect("serializable"));
                    out.push('\n');
                }
                let path = args.out.join(format!("{sc}_{est}_{n}.jsonl"));
                write_atomic(&path, &out)?;
                if let Some(dir) = &args.dump_data {
                    fs::create_dir_all(dir)?;
                    let data = svydid_core::generate(&cfg, records.first().map(|r| r.seed).unwrap_or(seed))
                        .map_err(classify)?;
                    let csv_path = dir.join(format!("{sc}_{est}_{n}_data.csv"));
                    write_atomic(&csv_path, &dataset_csv(&data))?;
                }
                cells.push(report);
            }
        }
    }
    print!("{}", render_report(&cells));
    Ok(())
}

fn dataset_csv(data: &PanelDataset) -> String {
    let design = data.design();
    let mut out = String::from("unit,period,y,first_treat,weight,stratum,psu");
    let k = data.x().map(|x| x.ncols()).unwrap_or(0);
    for j in 0..k {
        out.push_str(&format!(",x{}", j + 1));
    }
    out.push('\n');
    for i in 0..data.n_obs() {
        let g = data.first_treat()[i].unwrap_or(0);
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            data.unit_label(data.unit_of_obs()[i]),
            data.period()[i],
            data.y()[i],
            g,
            design.raw_weights()[i],
            design.stratum_of_obs()[i],
            design.psu_of_obs()[i],
        ));
        if let Some(x) = data.x() {
            for j in 0..k {
                out.push_str(&format!(",{}", x[(i, j)]));
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct FitRow {
    spec: String,
    estimator: String,
    mode: String,
    att: f64,
    se: f64,
    df: usize,
    lo: f64,
    hi: f64,
    level: f64,
    /// Design effect vs the HC1 variance of the same fit, when defined.
    #[serde(skip_serializing_if = "Option::is_none")]
    deff: Option<f64>,
}

#[derive(Serialize)]
struct EstimateOutput {
    schema_version: u32,
    command: &'static str,
    input: String,
    results: Vec<FitRow>,
}

fn parse_mode(s: &str) -> Result<InferenceMode, CliError> {
    match s {
        "hc1" => Ok(InferenceMode::Hc1),
        "cluster" => Ok(InferenceMode::Cluster),
        "design" => Ok(InferenceMode::Design),
        "replicate" => Ok(InferenceMode::Replicate),
        other => Err(CliError::Usage(format!("unknown inference mode '{other}'"))),
    }
}

fn parse_method(s: &str) -> Result<Estimator, CliError> {
    match s {
        "reg" => Ok(Estimator::CsReg),
        "dr" => Ok(Estimator::CsDr),
        other => Err(CliError::Usage(format!("unknown method '{other}' (use reg or dr)"))),
    }
}

fn parse_rep_method(s: &str) -> Result<ReplicateMethod, CliError> {
    if let Some(rho) = s.strip_prefix("fay=") {
        let rho: f64 = rho
            .parse()
            .map_err(|_| CliError::Usage(format!("bad Fay factor '{rho}'")))?;
        return Ok(ReplicateMethod::Fay(rho));
    }
    match s {
        "brr" => Ok(ReplicateMethod::Brr),
        "jk1" => Ok(ReplicateMethod::Jk1),
        "sdr" => Ok(ReplicateMethod::Sdr),
        other => Err(CliError::Usage(format!(
            "unknown replicate method '{other}' (brr | fay=RHO | jk1 | sdr; use --jkn for the stratified jackknife)"
        ))),
    }
}

fn fit_row(
    data: &PanelDataset,
    est: Estimator,
    mode: InferenceMode,
    level: f64,
    spec: &str,
) -> Result<FitRow, CliError> {
    let (fit, _, _) = estimate_overall(data, est, mode, level).map_err(classify)?;
    let deff = if mode == InferenceMode::Hc1 {
        None
    } else {
        estimate_overall(data, est, InferenceMode::Hc1, level)
            .ok()
            .map(|(h, _, _)| (fit.se * fit.se) / (h.se * h.se))
    };
    Ok(row_from(fit, est, spec, level, deff))
}

fn row_from(fit: AttEstimate, est: Estimator, spec: &str, level: f64, deff: Option<f64>) -> FitRow {
    FitRow {
        spec: spec.to_string(),
        estimator: match est {
            Estimator::CsReg => "cs_reg".to_string(),
            Estimator::CsDr => "cs_dr".to_string(),
        },
        mode: format!("{:?}", fit.mode).to_lowercase(),
        att: fit.att,
        se: fit.se,
        df: fit.df,
        lo: fit.ci.0,
        hi: fit.ci.1,
        level,
        deff,
    }
}

/// Collapse observation-level replicate columns to the working rows of the
/// estimator (units for panels, rows for repeated cross sections).
fn working_replicates(
    data: &PanelDataset,
    columns: &[Vec<f64>],
    method: ReplicateMethod,
) -> Result<ReplicateWeights, CliError> {
    let n_work = match data.kind() {
        PanelKind::Panel => data.n_units(),
        PanelKind::RepeatedCrossSection => data.n_obs(),
    };
    let mut m = nalgebra::DMatrix::<f64>::zeros(n_work, columns.len());
    for (r, col) in columns.iter().enumerate() {
        match data.kind() {
            PanelKind::RepeatedCrossSection => {
                for i in 0..n_work {
                    m[(i, r)] = col[i];
                }
            }
            PanelKind::Panel => {
                let mut seen = vec![None::<f64>; n_work];
                for (i, &u) in data.unit_of_obs().iter().enumerate() {
                    match seen[u] {
                        None => {
                            seen[u] = Some(col[i]);
                            m[(u, r)] = col[i];
                        }
                        Some(v) if (v - col[i]).abs() <= 1e-9 * v.abs().max(1.0) => {}
                        Some(v) => {
                            return Err(CliError::Parse(format!(
                                "replicate column {} varies within unit '{}' ({v} vs {})",
                                r + 1,
                                data.unit_label(u),
                                col[i]
                            )))
                        }
                    }
                }
            }
        }
    }
    ReplicateWeights::new(method, m, None).map_err(classify)
}

pub fn estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let LoadedData {
        data,
        replicate_columns,
    } = dataset::load(args)?;
    let level = args.level;
    let method = parse_method(&args.method)?;

    let mut results = Vec::new();
    if args.ladder {
        let unweighted = data.unweighted_copy();
        results.push(fit_row(&unweighted, Estimator::CsReg, InferenceMode::Hc1, level, "naive")?);
        results.push(fit_row(&data, Estimator::CsReg, InferenceMode::Hc1, level, "weights_only")?);
        results.push(fit_row(&data, Estimator::CsReg, InferenceMode::Design, level, "full_design")?);
        let cov_est = if data.x().is_some() && data.kind() == PanelKind::Panel {
            Estimator::CsDr
        } else {
            Estimator::CsReg
        };
        results.push(fit_row(
            &data,
            cov_est,
            InferenceMode::Design,
            level,
            "full_design_covariates",
        )?);
    } else {
        let mode = parse_mode(&args.mode)?;
        if mode == InferenceMode::Replicate {
            let (_, set, agg) =
                estimate_overall(&data, method, InferenceMode::Design, level).map_err(classify)?;
            let replicates = if args.jkn {
                make_jkn_replicates(&set.sample.design).map_err(classify)?
            } else if !replicate_columns.is_empty() {
                working_replicates(&data, &replicate_columns, parse_rep_method(&args.rep_method)?)?
            } else {
                return Err(CliError::Usage(
                    "mode=replicate requires --rep-prefix columns or --jkn".to_string(),
                ));
            };
            let fit = replicate_estimate(
                agg.att,
                &agg.if_values,
                set.sample.design.raw_weights(),
                &replicates,
                level,
            )
            .map_err(classify)?;
            results.push(row_from(fit, method, "replicate", level, None));
        } else {
            results.push(fit_row(&data, method, mode, level, "single")?);
        }
    }

    // Human-readable echo alongside the structured file.
    for r in &results {
        println!(
            "{:<24} {:<7} {:<9} att {:>10.4}  se {:>9.4}  df {:>3}  ci [{:.4}, {:.4}]{}",
            r.spec,
            r.estimator,
            r.mode,
            r.att,
            r.se,
            r.df,
            r.lo,
            r.hi,
            match r.deff {
                Some(d) => format!("  deff {d:.2}"),
                None => String::new(),
            }
        );
    }

    let out = EstimateOutput {
        schema_version: SCHEMA_VERSION,
        command: "estimate",
        input: args.input.display().to_string(),
        results,
    };
    let mut body = serde_json::to_string_pretty(&out).expect("serializable");
    body.push('\n');
    write_atomic(&args.out, &body)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn read_cell(path: &PathBuf) -> Result<CellReport, CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| CliError::Parse(format!("{}: empty record file", path.display())))?;
    let meta: RecordMeta = serde_json::from_str(meta_line)
        .map_err(|e| CliError::Parse(format!("{}: bad meta line: {e}", path.display())))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(CliError::Parse(format!(
            "{}: schema_version {} (this build reads {})",
            path.display(),
            meta.schema_version,
            SCHEMA_VERSION
        )));
    }
    let mut records: Vec<RepRecord> = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| {
            CliError::Parse(format!("{}: record line {}: {e}", path.display(), k + 2))
        })?);
    }
    Ok(report_from_records(
        &meta.config,
        meta.estimator,
        meta.reps,
        meta.failures,
        &records,
    ))
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let mut cells = Vec::new();
    for path in &args.records {
        let cell = read_cell(path)?;
        if let Some(dup) = cells.iter().find(|c: &&CellReport| {
            c.scenario == cell.scenario && c.estimator == cell.estimator && c.n == cell.n
        }) {
            return Err(CliError::Parse(format!(
                "duplicate cell {}/{}/n={} (second copy in {})",
                dup.scenario,
                dup.estimator,
                dup.n,
                path.display()
            )));
        }
        cells.push(cell);
    }
    cells.sort_by(|a, b| {
        (a.scenario.as_str(), a.estimator.as_str(), a.n)
            .cmp(&(b.scenario.as_str(), b.estimator.as_str(), b.n))
    });
    let table = render_report(&cells);
    print!("{table}");
    if let Some(out) = &args.out {
        write_atomic(out, &table)?;
    }
    Ok(())
}
