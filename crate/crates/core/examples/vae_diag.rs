//! Reconstruction error breakdown for a trained VAE checkpoint.
//!
//! Usage: vae_diag <corpus_dir> — loads <corpus_dir>/vae.bin and prints the
//! posterior scale per latent dim, μ spread, and val MSE sliced by frame
//! index, motion channel, and clip speed.

use bimot_core::corpus::{self, DIMS};
use bimot_core::tensor::no_grad;
use bimot_core::vae::{motion_tensor, MotionVae};

fn main() {
    let dir = std::env::args().nth(1).expect("usage: vae_diag <corpus_dir>");
    let dir = std::path::Path::new(&dir);
    let (vae, stats) = MotionVae::<f32>::load(&dir.join("vae.bin")).unwrap();
    let val = corpus::load_split(dir, "val").unwrap();

    let latent = vae.cfg.latent_dim;
    let mut sigma_sum = vec![0.0f64; latent];
    let mut mu_sum = vec![0.0f64; latent];
    let mut mu_sq = vec![0.0f64; latent];
    let mut frame_err = vec![0.0f64; 64];
    let mut frame_n = vec![0usize; 64];
    let mut dim_err = vec![0.0f64; DIMS];
    let mut dim_n = vec![0usize; DIMS];
    let mut speed_err = [0.0f64; 3];
    let mut speed_n = [0usize; 3];

    no_grad(|| {
        for r in &val {
            let x = motion_tensor::<f32>(r, &stats);
            let (mu, logvar) = vae.encode(&x).unwrap();
            for (d, v) in logvar.to_vec().iter().enumerate() {
                sigma_sum[d] += (0.5 * *v as f64).exp();
            }
            for (d, v) in mu.to_vec().iter().enumerate() {
                mu_sum[d] += *v as f64;
                mu_sq[d] += (*v as f64) * (*v as f64);
            }
            let recon = vae.decode(&mu, r.frames()).unwrap();
            let rv = recon.to_vec();
            let xv = x.to_vec();
            let mut clip = 0.0;
            for i in 0..rv.len() {
                let e = (rv[i] as f64 - xv[i] as f64).powi(2);
                clip += e;
                frame_err[i / DIMS] += e;
                frame_n[i / DIMS] += 1;
                dim_err[i % DIMS] += e;
                dim_n[i % DIMS] += 1;
            }
            clip /= rv.len() as f64;
            let bucket = if r.params.speed < 1.0 {
                0
            } else if r.params.speed < 1.4 {
                1
            } else {
                2
            };
            speed_err[bucket] += clip;
            speed_n[bucket] += 1;
        }
    });

    let n = val.len() as f64;
    println!("val clips: {}", val.len());
    print!("sigma per dim:");
    for s in &sigma_sum {
        print!(" {:.3}", s / n);
    }
    println!();
    print!("mu std per dim:");
    for d in 0..latent {
        let m = mu_sum[d] / n;
        print!(" {:.3}", (mu_sq[d] / n - m * m).max(0.0).sqrt());
    }
    println!();
    print!("mse by frame idx (every 4th):");
    for f in (0..64).step_by(4) {
        if frame_n[f] > 0 {
            print!(" {}:{:.4}", f, frame_err[f] / frame_n[f] as f64);
        }
    }
    println!();
    print!("mse by channel:");
    for d in 0..DIMS {
        print!(" {:.4}", dim_err[d] / dim_n[d].max(1) as f64);
    }
    println!();
    println!(
        "mse by speed bucket (<1.0, 1.0-1.4, >=1.4): {:.4} {:.4} {:.4}",
        speed_err[0] / speed_n[0].max(1) as f64,
        speed_err[1] / speed_n[1].max(1) as f64,
        speed_err[2] / speed_n[2].max(1) as f64
    );
}
