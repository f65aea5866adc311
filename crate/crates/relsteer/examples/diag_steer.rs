use relsteer::classifier::Checkpoint;
use relsteer::eval::detect_oracle;
use relsteer::parser::RelationTriplet;
use relsteer::steering::{steer, template_from_triplets, SteerConfig};
use relsteer::synth::{derive_seed, Latent, Relation, DIRECTIONAL};
use std::time::Instant;

const NOUNS: &[&str] = &["frog", "teapot", "sneakers", "dog", "clock", "vase"];

fn case(ckpt: &Checkpoint, n_objects: usize, case_seed: u64, cfg: &SteerConfig) -> (bool, bool) {
    let mut idx: Vec<usize> = (0..NOUNS.len()).collect();
    let mut s = derive_seed(case_seed, &[1]);
    for i in (1..idx.len()).rev() {
        s = derive_seed(s, &[i as u64]);
        idx.swap(i, (s as usize) % (i + 1));
    }
    let triplets: Vec<RelationTriplet> = (0..n_objects - 1)
        .map(|i| RelationTriplet {
            subject: NOUNS[idx[i]].to_string(),
            relation: DIRECTIONAL[(derive_seed(case_seed, &[7, i as u64]) as usize) % 4],
            object: NOUNS[idx[i + 1]].to_string(),
        })
        .collect();
    let template = template_from_triplets(&triplets, case_seed).unwrap();
    let z0 = Latent::random(n_objects, derive_seed(case_seed, &[11]));

    let holds = |z: &Latent| -> bool {
        let centers = z.decoded_centers();
        let dets = detect_oracle(&template, &centers).unwrap();
        triplets.iter().all(|t| {
            let bi = dets.iter().find(|d| d.name == t.subject).unwrap();
            let bj = dets.iter().find(|d| d.name == t.object).unwrap();
            let (c1x, c1y) = bi.bbox.as_ref().unwrap().center();
            let (c2x, c2y) = bj.bbox.as_ref().unwrap().center();
            let (dx, dy) = (c1x - c2x, c1y - c2y);
            match t.relation {
                Relation::Above => -dy > 0.0 && dy.abs() > dx.abs(),
                Relation::Below => dy > 0.0 && dy.abs() > dx.abs(),
                Relation::LeftOf => -dx > 0.0 && dx.abs() > dy.abs(),
                Relation::RightOf => dx > 0.0 && dx.abs() > dy.abs(),
                Relation::Neutral => false,
            }
        })
    };
    let before = holds(&z0);
    let outcome = steer(
        &z0,
        &template,
        &triplets,
        ckpt,
        derive_seed(case_seed, &[12]),
        cfg,
    )
    .unwrap();
    if let Some(m) = &outcome.aborted {
        eprintln!("case {case_seed} aborted: {m}");
        return (before, false);
    }
    (before, holds(&outcome.latent))
}

fn main() {
    let ckpt = Checkpoint::load(std::path::Path::new("/tmp/a2.ckpt")).unwrap();
    for &(alpha, iters, ts) in &[
        (5.0, 15, 0u16),
        (2.0, 15, 0),
        (10.0, 15, 0),
        (5.0, 30, 0),
    ] {
        let cfg = SteerConfig {
            alpha,
            iterations: iters,
            timesteps: vec![ts],
            initial_noise_only: false,
            max_relations: 3,
        };
        let t0 = Instant::now();
        let mut nb = 0;
        let mut na = 0;
        let n = 20;
        for i in 0..n {
            let (b, a) = case(&ckpt, 2, 1000 + i, &cfg);
            nb += b as u32;
            na += a as u32;
        }
        println!(
            "alpha {alpha} iters {iters} t {ts}: before {}/{n} after {}/{n} in {:.1}s",
            nb,
            na,
            t0.elapsed().as_secs_f64()
        );
    }
}
