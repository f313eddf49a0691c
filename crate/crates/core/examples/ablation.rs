//! Trains every network variant on synthetic benchmarks and prints rank-1 per
//! seed, plus KISSME retrieval for the full model.
//!
//! `cargo run --release -p pie-core --example ablation -- 0,1,2`

use pie_core::net::Variant;
use pie_core::pipeline::{evaluate_split, fit_metric, prepare_inputs, run_variant, Dataset, MetricChoice, PipelineOptions};
use pie_core::posebox::BoxType;
use pie_core::synth::{generate, SynthConfig};

fn main() -> pie_core::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|x| x.parse().expect("seed list")).collect())
        .unwrap_or_else(|| vec![0]);
    let opts = PipelineOptions::default();
    for seed in seeds {
        let d = generate(&SynthConfig { seed, ..SynthConfig::default() })?;
        let ds = Dataset::from_synth(&d);
        let inputs = prepare_inputs(&ds, &opts.net, Some(BoxType::Two), seed);
        let mut line = format!("seed {seed}:");
        for v in Variant::ALL {
            let out = run_variant(&ds, &inputs, v, MetricChoice::Euclid, seed, &opts)?;
            line += &format!(" {v}={:.3}", out.report.rank1());
            if v == Variant::Full {
                let m = fit_metric(&ds, &out.train_feats, MetricChoice::Kissme, opts.ridge, seed)?;
                let k = evaluate_split(&ds, &out.query_feats, &out.gallery_feats, &m)?;
                line += &format!(" (mAP {:.3}, kissme mAP {:.3})", out.report.map, k.map);
            }
        }
        println!("{line}");
    }
    Ok(())
}
