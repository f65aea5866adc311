use relsteer::classifier::{bind, forward_logits, init_params, ArchConfig, ClassifierContext};
use relsteer::dataset::{build_dataset, DataConfig};
use relsteer::tape::Tape;

fn main() {
    let arch = ArchConfig::desk();
    let ctx = ClassifierContext::<f32>::new(arch).unwrap();
    let params = init_params::<f32>(&arch, 1).unwrap();
    let mut dc = DataConfig::new(3, 0.3, 1);
    dc.timesteps = vec![5];
    let ds = build_dataset(&dc).unwrap();
    let t0 = std::time::Instant::now();
    let n = 10;
    for i in 0..n {
        let r = &ds.records[i % ds.records.len()];
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let s = tape.leaf2(r.subject.clone());
        let o = tape.leaf2(r.object.clone());
        let logits = forward_logits(&mut tape, &ctx, &bound, s, o, r.t).unwrap();
        let loss = tape.cross_entropy(logits, r.label as usize).unwrap();
        let (g, _) = tape.backward_wrt(loss, &bound.vars()).unwrap();
        std::hint::black_box(g);
    }
    println!("{:.2} ms/record", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
