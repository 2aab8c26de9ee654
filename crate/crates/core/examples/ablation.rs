//! Runs the initialization ablation on the standard synthetic task and prints
//! the final eval loss of each method per seed.
//!
//! Usage: cargo run --release --example ablation -- [lr] [steps] [r_delta] [aligned|random]

use dota::harness::{ablate, ExperimentConfig, Method};

fn main() -> dota::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lr: f64 = args.first().map_or(Ok(0.5), |s| s.parse()).expect("lr");
    let steps: usize = args.get(1).map_or(Ok(500), |s| s.parse()).expect("steps");
    let r_delta: usize = args.get(2).map_or(Ok(8), |s| s.parse()).expect("r_delta");
    let kind = args.get(3).cloned().unwrap_or_else(|| "aligned".into());
    let config = ExperimentConfig::from_json(&format!(
        r#"{{"dims": [64, 64], "shapes": {{"in": [4,4,4], "out": [4,4,4]}},
            "R": 8, "N": 3, "steps": {steps}, "lr": {lr}, "seeds": [1, 2, 3],
            "methods": ["dota", "dota-random", "lora", "full-ft"],
            "r_delta": {r_delta}, "delta_scale": 0.05, "delta_kind": "{kind}"}}"#
    ))?;
    let result = ablate(&config)?;
    for log in &result.logs {
        println!(
            "{:>12} seed {} params {:>5} init {:.6e} final {:.6e} diverged {:?}",
            log.method.label(),
            log.seed,
            log.trainable_params,
            log.initial_eval_loss().unwrap_or(f64::NAN),
            log.final_eval_loss().unwrap_or(f64::NAN),
            log.diverged_at
        );
    }
    for method in Method::ALL {
        if let Some(last) = result.summary.iter().rfind(|r| r.method == method) {
            println!("{:>12} mean final {:.6e} (std {:.2e})", method.label(), last.mean_eval_loss, last.std_eval_loss);
        }
    }
    Ok(())
}
