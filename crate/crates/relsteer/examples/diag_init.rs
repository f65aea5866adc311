use relsteer::classifier::ArchConfig;
use relsteer::dataset::{build_dataset, DataConfig};
use relsteer::training::{evaluate_classifier, train, TrainConfig};
use std::time::Instant;

fn main() {
    let arch = ArchConfig::desk();
    let t0 = Instant::now();
    let mut dc = DataConfig::new(2000, 0.3, 1);
    dc.timesteps = vec![0];
    let ds = build_dataset(&dc).unwrap();
    println!("dataset: {} records in {:.1}s", ds.records.len(), t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        max_epochs: 6,
        clip_norm: Some(1.0),
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(&ds, &cfg, &arch).unwrap();
    println!("train: {:.1}s", t0.elapsed().as_secs_f64());
    for h in &out.history {
        println!(
            "epoch {} train_loss {:.4} val_loss {:.4} val_acc {:.4} lr {}",
            h.epoch, h.train_loss, h.val_loss, h.val_acc, h.lr
        );
    }

    // Matched-prompt held-out test records (prompt agrees with geometry).
    let matched: Vec<usize> = out
        .splits
        .test
        .iter()
        .copied()
        .filter(|&i| ds.records[i].prompt_relation == ds.records[i].label)
        .collect();
    println!("matched test records: {}", matched.len());
    let ev = evaluate_classifier(&out.checkpoint, &ds, Some(&matched)).unwrap();
    println!("matched test acc: {:.4} over {}", ev.accuracy, ev.total);
    out.checkpoint.save(std::path::Path::new("/tmp/a2.ckpt")).unwrap();
}
