// Scratch probe: run the component ablation end to end and print the
// aggregate table, to check the generalization trend and the runtime.

use disa::config::{ExperimentConfig, Protocol};
use disa::harness::run_protocol;
use std::time::Instant;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.protocol = Protocol::Ablation;
    cfg.seeds = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1, 2]);
    for arg in std::env::args().skip(2) {
        let (k, v) = arg.split_once('=').expect("key=value");
        cfg.set(k, v).unwrap();
    }
    let t = Instant::now();
    match run_protocol(&cfg, None) {
        Ok(report) => {
            println!("pretrain acc: {:?}", report.pretrain_accuracy);
            println!(
                "{:<34} {:>7} {:>7} {:>7} (+/- hm std)",
                "switches", "base", "novel", "hm"
            );
            for a in &report.aggregates {
                let comps: Vec<&disa::harness::ReportRow> = report
                    .rows
                    .iter()
                    .filter(|r| r.switches == a.switches)
                    .collect();
                let mean = |f: fn(&disa::harness::ReportRow) -> f64| {
                    comps.iter().map(|r| f(r)).sum::<f64>() / comps.len() as f64
                };
                println!(
                    "{:<34} {:>7.2} {:>7.2} {:>7.2} +/- {:.2}  [ce {:.3} sr {:.3} cir {:.3} dir {:.3}]",
                    a.switches,
                    a.base_acc_mean.unwrap_or(f64::NAN),
                    a.novel_acc_mean.unwrap_or(f64::NAN),
                    a.hm_mean.unwrap_or(f64::NAN),
                    a.hm_std.unwrap_or(f64::NAN),
                    mean(|r| r.ce),
                    mean(|r| r.sr),
                    mean(|r| r.cir),
                    mean(|r| r.dir),
                );
            }
            println!("wall clock: {:.1}s", t.elapsed().as_secs_f64());
        }
        Err(e) => println!("FAILED: {e}"),
    }
}
