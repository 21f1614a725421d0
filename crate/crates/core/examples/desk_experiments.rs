//! Runs the desk-scale experiment arms and prints per-seed values.
//!
//! Environment: `SEEDS=1,2,3`, `ONLY=single|adapter|multi`, and overrides
//! `BOTTLENECK`, `ADAPTER_EPOCHS`, `ADAPTER_LR`, `FINETUNE_ADAPTERS=1`.

use std::time::Instant;

use todspec::desk::{adapter_runs, multi_domain_runs, single_domain_runs, Desk, DeskConfig};
use todspec::eval::DownstreamTask;

fn var<T: std::str::FromStr>(name: &str) -> Option<T> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn main() -> todspec::Result<()> {
    let mut cfg = DeskConfig::default();
    if let Ok(s) = std::env::var("SEEDS") {
        cfg.seeds = s.split(',').filter_map(|x| x.parse().ok()).collect();
    }
    if let Some(m) = var("BOTTLENECK") {
        cfg.adapter.bottleneck = m;
    }
    if let Some(e) = var("ADAPTER_EPOCHS") {
        cfg.adapter_specialize.epochs = e;
    }
    if let Some(lr) = var("ADAPTER_LR") {
        cfg.adapter_specialize.lrs = vec![lr];
    }
    if let Some(f) = var::<u8>("FINETUNE_ADAPTERS") {
        cfg.finetune_adapters = f == 1;
    }
    let only = std::env::var("ONLY").unwrap_or_default();
    let run = |part: &str| only.is_empty() || only.split(',').any(|o| o == part);
    let t = Instant::now();
    let desk = Desk::prepare(cfg)?;
    println!("prepared in {:.0}s", t.elapsed().as_secs_f64());
    if run("single") {
        let t = Instant::now();
        let res = single_domain_runs(&desk, "taxi", &[DownstreamTask::Rr, DownstreamTask::Dst])?;
        for (task, arms) in &res {
            for (arm, v) in &arms.arms {
                println!("{task} {arm} {v:.3?} mean {:.3}", arms.mean(arm)?);
            }
        }
        println!("single-domain in {:.0}s", t.elapsed().as_secs_f64());
    }
    if run("adapter") {
        let t = Instant::now();
        let v = adapter_runs(&desk, "taxi", DownstreamTask::Rr)?;
        println!(
            "rr adapter {v:.3?} mean {:.3}",
            v.iter().sum::<f64>() / v.len() as f64
        );
        println!("adapter in {:.0}s", t.elapsed().as_secs_f64());
    }
    if run("multi") {
        let t = Instant::now();
        let arms = multi_domain_runs(&desk, DownstreamTask::Rr)?;
        for (arm, v) in &arms.arms {
            println!("multi {arm} {v:.3?} mean {:.3}", arms.mean(arm)?);
        }
        println!("multi-domain in {:.0}s", t.elapsed().as_secs_f64());
    }
    Ok(())
}
