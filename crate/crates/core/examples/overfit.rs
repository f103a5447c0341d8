//! Trains the small configuration on eight synthetic samples and reports
//! train and validation scores.
//!
//! `cargo run --release --example overfit -- [steps] [patch] [augment 0|1] [seed]`

use std::time::Instant;

use smaformer::data::Dataset;
use smaformer::model::{ModelConfig, SmaFormer};
use smaformer::train::{evaluate, train_until, CheckpointPolicy, TrainConfig, TrainState};

fn main() -> smaformer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: u64| args.get(i).map_or(d, |a| a.parse().unwrap());
    let steps = arg(0, 300) as usize;
    let seed = arg(3, 0);
    let data = Dataset::generate(16, 64, 64, 1000 + seed, [0.5, 0.5, 0.0])?;
    let mcfg = ModelConfig {
        blocks_per_stage: vec![1; 4],
        patch_size: arg(1, 4) as usize,
        init_seed: seed,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        total_steps: steps,
        augment: arg(2, 1) == 1,
        seed,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut model = SmaFormer::<f32>::new(mcfg)?;
    let mut state = TrainState::new(&model, &tcfg);
    let start = Instant::now();
    while state.step < steps {
        let next = (state.step + 25).min(steps);
        train_until(&mut model, &mut state, &data, &tcfg, next, &CheckpointPolicy::default())?;
        let recent = &state.history[state.history.len().saturating_sub(25)..];
        let mean = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len() as f64;
        println!("step {next:5} loss {mean:.4} lr {:.2e} {:.0?}", recent.last().unwrap().lr, start.elapsed());
    }
    let train = evaluate(&model, &data.split("train")?)?;
    let val = evaluate(&model, &data.split("val")?)?;
    println!("initial loss {:.4} final loss {:.4}", state.history[0].loss, state.history.last().unwrap().loss);
    println!("train\n{}val\n{}", train.table(), val.table());
    Ok(())
}
