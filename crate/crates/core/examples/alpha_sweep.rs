//! α sweep through the library runner on a reduced synthetic task: one
//! aggregate row per α, written to a temporary directory as `sweep.csv`.
//!
//! `cargo run --release --example alpha_sweep -- [epochs]`

use near_ortho::cli::{sweep_alpha, ExperimentConfig, Method, TaskSpec};
use near_ortho::data::TaskConfig;

fn main() -> near_ortho::Result<()> {
    let epochs = std::env::args().nth(1).map_or(3, |a| a.parse().expect("epochs"));
    let task = TaskConfig { image_size: 16, n_train: 100, n_val: 40, n_test: 100, ..TaskConfig::default() };
    let out = std::env::temp_dir().join("near-ortho-alpha-sweep");
    let mut cfg = ExperimentConfig::new(Method::AlmostRight, TaskSpec::Synthetic(task), &out);
    cfg.seeds = vec![0, 1];
    cfg.sgd.epochs = epochs;

    let ds = cfg.dataset()?;
    let rows = sweep_alpha(&cfg, &ds, &[0.1, 0.5, 0.9])?;
    println!("{:>5} {:>14} {:>10}", "alpha", "test auroc", "mean|cos|");
    for r in &rows {
        let m = &r.aggregate.metrics;
        println!(
            "{:>5} {:>7.4}±{:.4} {:>10.4}",
            r.alpha, m["test_metric"].mean, m["test_metric"].std, m["mean_abs_cos"].mean
        );
    }
    println!("{}", std::fs::read_to_string(out.join("sweep.csv")).expect("sweep.csv"));
    Ok(())
}
