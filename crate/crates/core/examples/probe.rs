//! Quick Monte Carlo probe used while calibrating scenario presets.

use svydid_core::{render_report, run_cell, run_rep, HarnessEstimator, ScenarioConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenario = args.get(1).map(String::as_str).unwrap_or("s1");
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let reps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(100);
    let est: HarnessEstimator = args
        .get(4)
        .map(|s| s.parse().unwrap())
        .unwrap_or(HarnessEstimator::CsReg);
    let cfg = match scenario {
        "s1" => ScenarioConfig::s1(n),
        "s2" => ScenarioConfig::s2(n),
        "s3" => ScenarioConfig::s3(n),
        "s4" => ScenarioConfig::s4(n),
        other => panic!("unknown scenario {other}"),
    };
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(20260824);
    let t0 = std::time::Instant::now();
    let cell = run_cell(&cfg, est, reps, seed).unwrap();
    println!("{}", render_report(&[cell.clone()]));
    println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
    println!(
        "rmse_w {:.4} rmse_u {:.4} deff {:.2} truth {:.4}",
        cell.rmse_weighted, cell.rmse_unweighted, cell.deff_median, cell.truth
    );
    // Variance-estimator calibration: mean estimated design variance vs the
    // empirical Monte Carlo variance of the weighted estimate.
    let records: Vec<_> = (0..reps)
        .map(|r| run_rep(&cfg, est, r, seed, 0.95).unwrap())
        .collect();
    let m = records.len() as f64;
    let mean_att = records.iter().map(|r| r.design.att).sum::<f64>() / m;
    let emp_var = records
        .iter()
        .map(|r| (r.design.att - mean_att).powi(2))
        .sum::<f64>()
        / (m - 1.0);
    let mean_vd = records.iter().map(|r| r.design.se * r.design.se).sum::<f64>() / m;
    let mean_vc = records.iter().map(|r| r.cluster.se * r.cluster.se).sum::<f64>() / m;
    println!(
        "empirical var {:.6}  mean V_design {:.6} (ratio {:.3})  mean V_cluster {:.6} (ratio {:.3})",
        emp_var,
        mean_vd,
        mean_vd / emp_var,
        mean_vc,
        mean_vc / emp_var
    );
}
