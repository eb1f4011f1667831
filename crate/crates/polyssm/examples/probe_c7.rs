// scratch probe for the synthetic benchmark budget (deleted before ship)
use polyssm::data::{make_splits, synth_cdt, Regime, SplitStrategy, SynthConfig};
use polyssm::model::{ModelConfig, PatchConfig};
use polyssm::pipeline::{ablate, TrainConfig};
use polyssm::polyops::PolyVariant;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let (table, _) = synth_cdt(&SynthConfig {
        t: 20000,
        c: 8,
        seed: 33,
        regime: Regime::Switching,
        ..Default::default()
    })
    .unwrap();
    let task = make_splits(table, SplitStrategy::default(), 96, 96, false).unwrap();
    let cfg = ModelConfig {
        channels: 8,
        d_model: 8,
        d_state: 4,
        layers: 1,
        d_inner: 12,
        horizon: 96,
        dropout: 0.0,
        patch: PatchConfig { patch_len: 16, stride: 8, lookback: 96 },
        variant: PolyVariant::Full,
        instance_norm: false,
    };
    let tc = TrainConfig {
        lr: 3e-3,
        epochs: 4,
        batch_size: 32,
        patience: 3,
        seed: 0,
        max_steps_per_epoch: Some(200),
        ..Default::default()
    };
    let rows = ablate::<f32>(&task, &cfg, &tc, &[0, 1, 2], &PolyVariant::ALL).unwrap();
    println!("variant,horizon,seed,mse,mae");
    for r in &rows {
        println!("{},{},{},{:.5},{:.5}", r.variant, r.horizon, r.seed, r.mse, r.mae);
    }
    let mean = |v: &str| {
        let xs: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.mse).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    for v in ["full", "gate_only", "no_lcm", "no_mopa", "vanilla"] {
        println!("mean {v}: {:.5}", mean(v));
    }
    println!("ratio full/vanilla = {:.4}", mean("full") / mean("vanilla"));
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
