//! Trains projection heads on synthetic aligned pairs for several seeds and
//! prints recall@1 at population 100 for the identity, untrained, trained and
//! analytic projectors.
//!
//! cargo run --release -p dcg-core --example gap_closure_pilot -- [seeds] [d_out]

use std::time::Instant;

use dcg_core::contrastive::init_projector;
use dcg_core::dataset::split;
use dcg_core::eval::{run_trials, Direction, DirectionChoice, EvalConfig};
use dcg_core::synthgen::{generate_with_maps, SynthSpec};
use dcg_core::trainer::{train, TrainConfig};

fn main() -> dcg_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(10, |s| s.parse().unwrap());
    let d_out: usize = args.next().map_or(512, |s| s.parse().unwrap());
    println!("seed  identity  untrained  trained  analytic  epochs  secs");
    for seed in 0..seeds {
        let t0 = Instant::now();
        let data = generate_with_maps(&SynthSpec {
            n_pairs: 3000,
            latent_dim: 16,
            backbone_dim: 64,
            noise_sigma: 0.1,
            seed,
            map_seed: seed,
            ..Default::default()
        })?;
        let (tr, va, te) = split(&data.set, 2000, 500, 500, seed)?;
        let cfg = TrainConfig { seed, d_out, ..Default::default() };
        let (ckpt, log) = train(&tr, &va, &cfg)?;
        let eval = EvalConfig {
            population_sizes: vec![100],
            trials: 10,
            ks: vec![1],
            direction: DirectionChoice::TextToImage,
            seed,
        };
        let r1 = |p: &dcg_core::DualProjector| -> dcg_core::Result<f64> {
            Ok(run_trials(&te, p, &eval)?.cell(Direction::TextToImage, 100, 1).unwrap().mean)
        };
        let identity = r1(&dcg_core::DualProjector::identity(64))?;
        let untrained = r1(&init_projector(64, d_out, seed)?)?;
        let trained = r1(&ckpt.projector)?;
        let analytic = r1(&data.maps.analytic_projector())?;
        println!(
            "{seed:>4}  {identity:>8.3}  {untrained:>9.3}  {trained:>7.3}  {analytic:>8.3}  {:>6}  {:.1}",
            log.epochs_run(),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
