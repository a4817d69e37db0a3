//! Overfits a small synthetic set and reports loss and masked-region PSNR.
//!
//! Usage: `cargo run --release --example tiny_overfit -- [steps] [config.toml]`

use std::time::Instant;

use dear::dataset::SyntheticSet;
use dear::evaluation::{psnr, psnr_in, EvalCase};
use dear::model::DEFAULT_CHUNK;
use dear::trainer::{TrainConfig, Trainer};

fn main() -> dear::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let mut cfg = match args.get(2) {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.epochs = steps;
    let set = SyntheticSet::new(8, 32, (0.1, 0.3), 7)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    println!("parameters: {}", trainer.model.num_parameters());
    let start = Instant::now();
    let records = set.records.clone();
    while trainer.epoch < cfg.epochs {
        let m = trainer.run_epoch(&records, None)?;
        if m.epoch % 50 == 0 || m.epoch + 1 == cfg.epochs {
            let mut psnrs = Vec::new();
            let mut full = Vec::new();
            if m.epoch % 250 == 0 || m.epoch + 1 == cfg.epochs {
                for r in &records {
                    let case = EvalCase::new(r.id.clone(), r.lr_masked.clone(), &r.hr, 4.0)?;
                    let out = trainer.model.render(&r.lr_masked, 4.0, DEFAULT_CHUNK)?;
                    psnrs.push(psnr_in(&out, &case.target, &case.target_mask())?);
                    full.push(psnr(&out, &case.target)?);
                }
            }
            let avg = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
            println!(
                "epoch {:5} total {:.5} l1_hr {:.5} l1_lr {:.5} masked_psnr {:.2} psnr {:.2} elapsed {:.1}s",
                m.epoch,
                m.losses.total,
                m.losses.l1_hr,
                m.losses.l1_lr,
                avg(&psnrs),
                avg(&full),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
