use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use memr::trainer::TrainerConfig;
use serde::Serialize;

use crate::config::{out_root, BaseArgs};
use crate::run::{execute, now, run_id};
use crate::CliError;

#[derive(Args, Clone, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    /// Prioritization exponents to sweep.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    /// Model dataset capacities to sweep.
    #[arg(long, value_delimiter = ',')]
    pub model_size: Vec<usize>,
    /// SAC update rounds per environment step to sweep.
    #[arg(long, value_delimiter = ',')]
    pub policy_updates: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub alpha: f64,
    pub model_size: usize,
    pub policy_updates: usize,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Cross product of the axes; an empty axis keeps the base value.
pub fn grid(base: &TrainerConfig, args: &AblateArgs) -> Vec<Setting> {
    let alphas = axis(&args.alpha, base.alpha);
    let sizes = axis(&args.model_size, base.model_dataset_size);
    let updates = axis(&args.policy_updates, base.policy_updates_per_step);
    let mut out = Vec::new();
    for &alpha in &alphas {
        for &model_size in &sizes {
            for &policy_updates in &updates {
                out.push(Setting {
                    alpha,
                    model_size,
                    policy_updates,
                });
            }
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct AggregateRow {
    alpha: f64,
    model_dataset_size: usize,
    policy_updates_per_step: usize,
    seed: u64,
    status: &'static str,
    final_step: Option<u64>,
    final_return: Option<f64>,
    policy_updates: Option<u64>,
    model_rollouts: Option<u64>,
    run_dir: String,
    error: String,
}

fn summary_table(rows: &[AggregateRow], settings: &[Setting]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>6} {:>10} {:>8} {:>5} {:>12} {:>10}", "alpha", "model_size", "updates", "ok", "mean_return", "std");
    for st in settings {
        let finals: Vec<f64> = rows
            .iter()
            .filter(|r| r.alpha == st.alpha && r.model_dataset_size == st.model_size && r.policy_updates_per_step == st.policy_updates)
            .filter_map(|r| r.final_return)
            .collect();
        let n = finals.len() as f64;
        let (mean, std) = if finals.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = finals.iter().sum::<f64>() / n;
            (m, (finals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
        };
        let _ = writeln!(
            s,
            "{:>6} {:>10} {:>8} {:>5} {:>12.2} {:>10.2}",
            st.alpha,
            st.model_size,
            st.policy_updates,
            finals.len(),
            mean,
            std
        );
    }
    s
}

/// Runs every (setting, seed) pair in turn. Returns `Ok(false)` when at
/// least one run failed; the grid always runs to the end.
pub fn cmd_ablate(args: &AblateArgs) -> Result<bool, CliError> {
    let (base, settings) = args.base.resolve()?;
    let grid = grid(&base, args);
    let stamp = now();
    let root = out_root().join(format!("ablate-{}", run_id(&base, &stamp)));
    std::fs::create_dir_all(&root).map_err(CliError::runtime)?;
    println!("ablation grid: {} settings x {} seeds -> {}", grid.len(), args.seeds.len(), root.display());

    let mut rows = Vec::new();
    for st in &grid {
        for &seed in &args.seeds {
            let cfg = TrainerConfig {
                seed,
                alpha: st.alpha,
                model_dataset_size: st.model_size,
                policy_updates_per_step: st.policy_updates,
                ..base.clone()
            };
            let dir = root.join(format!("a{}_m{}_g{}_s{}", st.alpha, st.model_size, st.policy_updates, seed));
            let row = run_one(&cfg, &settings, &dir, st, seed);
            match &row.final_return {
                Some(r) => println!("  {} -> final return {r:.2}", dir.display()),
                None => println!("  {} -> {}: {}", dir.display(), row.status, row.error),
            }
            rows.push(row);
        }
    }

    let agg = root.join("aggregate.csv");
    write_aggregate(&agg, &rows)?;
    print!("{}", summary_table(&rows, &grid));
    println!("aggregate: {}", agg.display());
    Ok(rows.iter().all(|r| r.status == "completed"))
}

fn run_one(cfg: &TrainerConfig, settings: &crate::config::RunSettings, dir: &Path, st: &Setting, seed: u64) -> AggregateRow {
    let mut row = AggregateRow {
        alpha: st.alpha,
        model_dataset_size: st.model_size,
        policy_updates_per_step: st.policy_updates,
        seed,
        status: "failed",
        final_step: None,
        final_return: None,
        policy_updates: None,
        model_rollouts: None,
        run_dir: dir.display().to_string(),
        error: String::new(),
    };
    if let Err(e) = cfg.validate() {
        row.status = "invalid";
        row.error = e.to_string();
        return row;
    }
    match execute(cfg, settings, dir, now(), |_| {}) {
        Ok(outcome) => {
            if let Some(last) = outcome.rows.last() {
                row.final_step = Some(last.step);
                row.final_return = Some(last.eval_return);
                row.policy_updates = Some(last.policy_updates);
                row.model_rollouts = Some(last.model_rollouts);
            }
            match outcome.error {
                Some(e) => row.error = e,
                None => row.status = "completed",
            }
        }
        Err(e) => row.error = e.to_string(),
    }
    row
}

fn write_aggregate(path: &PathBuf, rows: &[AggregateRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(CliError::runtime)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(alpha: Vec<f64>, seeds: Vec<u64>) -> AblateArgs {
        AblateArgs {
            base: BaseArgs::default(),
            alpha,
            model_size: vec![],
            policy_updates: vec![1, 5, 10],
            seeds,
        }
    }

    #[test]
    fn grid_is_the_cross_product() {
        let base = TrainerConfig::default();
        let g = grid(&base, &args(vec![0.0, 0.3, 0.6, 1.0], vec![0]));
        assert_eq!(g.len(), 12);
        assert!(g.iter().all(|s| s.model_size == base.model_dataset_size));
        let g = grid(&base, &args(vec![], vec![0]));
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|s| s.alpha == base.alpha));
    }
}
