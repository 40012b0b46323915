//! Runs the entity-corpus ablation for a few seeds and prints the tables.
//!
//! Usage: cargo run --release -p fwl --example entity_experiment -- [config.json] [seeds]

use fwl::harness::experiment::{run_entity_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let cfg: ExperimentConfig = match args.get(1) {
        Some(p) if p != "-" => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        _ => ExperimentConfig::default(),
    };
    let seeds: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1);
    for seed in 0..seeds {
        let run = run_entity_experiment(&cfg, seed)?;
        println!(
            "seed {seed}: {} params, trained in {:.1}s, tto alpha {}, dyneval step {}",
            run.parameters, run.train_seconds, run.test_time_alpha, run.dyneval_step
        );
        println!("  alphas {:?}", run.fwl_alphas.map(|a| (a * 1e4).round() / 1e4));
        println!("  gammas {:?}", run.fwl_gammas.map(|a| (a * 1e3).round() / 1e3));
        print!("{}", run.table.to_text());
        for b in run.analysis.buckets.iter().filter(|b| b.group == "repeat" || b.group == "position") {
            println!("  {:<10} {:<12} n={:<6} {:+.4}", b.group, b.label, b.count, b.mean_improvement);
        }
    }
    Ok(())
}
