//! Wall-clock breakdown of one VAE training step at desk scale.

use std::time::Instant;

use bimot_core::config::VaeConfig;
use bimot_core::corpus::{self, CorpusStats};
use bimot_core::rng::rng_for;
use bimot_core::tensor::Tensor;
use bimot_core::vae::{kl_divergence, mse, motion_tensor, MotionVae};

fn main() {
    let dir = std::env::temp_dir().join("vae_bench_corpus");
    if !dir.join("train.jsonl").exists() {
        corpus::generate_corpus(&dir, 400, 42).unwrap();
    }
    let train = corpus::load_split(&dir, "train").unwrap();
    let stats = CorpusStats::load(&dir.join("stats.json")).unwrap();
    let cfg = VaeConfig::default();
    let vae = MotionVae::<f32>::new(&cfg, &mut rng_for(1, "p"));

    let items: Vec<Tensor<f32>> =
        train.iter().take(32).map(|r| motion_tensor::<f32>(r, &stats)).collect();

    // Warm up allocator.
    for x in items.iter().take(4) {
        let (mu, lv) = vae.encode(x).unwrap();
        let z = vae.reparameterize(&mu, &lv, &mut rng_for(2, "p"));
        let recon = vae.decode(&z, x.rows()).unwrap();
        let loss = mse(&recon, x).add(&kl_divergence(&mu, &lv).affine(1e-4, 0.0));
        loss.backward();
    }
    vae.params().zero_grads();

    let mut t_enc = 0.0;
    let mut t_dec = 0.0;
    let mut t_loss = 0.0;
    let mut t_back = 0.0;
    let reps = 3;
    for _ in 0..reps {
        for x in &items {
            let t0 = Instant::now();
            let (mu, lv) = vae.encode(x).unwrap();
            let t1 = Instant::now();
            let z = vae.reparameterize(&mu, &lv, &mut rng_for(3, "p"));
            let recon = vae.decode(&z, x.rows()).unwrap();
            let t2 = Instant::now();
            let loss = mse(&recon, x).add(&kl_divergence(&mu, &lv).affine(1e-4, 0.0));
            let t3 = Instant::now();
            loss.backward();
            let t4 = Instant::now();
            t_enc += (t1 - t0).as_secs_f64();
            t_dec += (t2 - t1).as_secs_f64();
            t_loss += (t3 - t2).as_secs_f64();
            t_back += (t4 - t3).as_secs_f64();
        }
        vae.params().zero_grads();
    }
    let n = (reps * items.len()) as f64;
    eprintln!(
        "per item: encode {:.3}ms decode {:.3}ms loss {:.3}ms backward {:.3}ms total {:.3}ms",
        1e3 * t_enc / n,
        1e3 * t_dec / n,
        1e3 * t_loss / n,
        1e3 * t_back / n,
        1e3 * (t_enc + t_dec + t_loss + t_back) / n
    );
    eprintln!(
        "projected batch-32 step: {:.1}ms",
        32.0 * 1e3 * (t_enc + t_dec + t_loss + t_back) / n
    );
}
