//! Runs the pipeline on a synthetic ring-pattern dataset and prints top-k accuracy.
//!
//! `cargo run --release -p norppa-core --example synthetic_eval [configs/synthetic.json]`

use std::time::Instant;

use norppa_core::harness::{run_eval, Manifest, ManifestEntry, PipelineConfig, Split};
use norppa_core::synthetic::{synthetic_dataset, DatasetSpec};

fn main() {
    let config = match std::env::args().nth(1) {
        Some(p) => PipelineConfig::load(p).expect("config"),
        None => PipelineConfig::default(),
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let t = Instant::now();
    let images = synthetic_dataset(&DatasetSpec::default());
    let entries = images
        .iter()
        .map(|im| {
            let name = format!("{}.pgm", im.image_id);
            im.image.save_pgm(dir.path().join(&name)).expect("write");
            ManifestEntry {
                image_id: im.image_id.clone(),
                individual_id: im.individual_id.clone(),
                split: if im.is_query { Split::Query } else { Split::Database },
                pattern_path: Some(name),
                descriptor_path: None,
            }
        })
        .collect();
    let manifest = Manifest::new(entries, dir.path());
    let out = run_eval::<f64>(&config, &manifest).expect("eval");
    println!("skipped: {}", out.skipped.len());
    for (k, a) in out.report.accuracy.iter().enumerate() {
        println!("top-{}: {:.4}", k + 1, a);
    }
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
}
