//! Convergence probe for the motion VAE at desk scale.
//! Run: cargo run -p bimot-core --example vae_bench [steps] [lr] [batch] [n_records] [mem_tokens]

use bimot_core::config::VaeConfig;
use bimot_core::corpus;
use bimot_core::vae::train_vae;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-4);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let n_records: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let memory_tokens: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(4);

    let dir = std::env::temp_dir().join(format!("vae_bench_corpus_{n_records}"));
    if !dir.join("train.jsonl").exists() {
        corpus::generate_corpus(&dir, n_records, 42).unwrap();
        eprintln!("corpus generated at {}", dir.display());
    }
    let cfg = VaeConfig { steps, lr, batch, memory_tokens, ..Default::default() };
    let t0 = std::time::Instant::now();
    let report = train_vae::<f32>(&dir, &dir.join("vae.bin"), &cfg, 7, true).unwrap();
    eprintln!(
        "steps {} lr {} batch {} -> val_mse {:.5} in {:.1}s",
        steps,
        lr,
        batch,
        report.val_mse,
        t0.elapsed().as_secs_f64()
    );
}
