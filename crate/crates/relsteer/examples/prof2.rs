use ndarray::Array2;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = Array2::<f32>::from_elem((m, k), 0.5);
    let b = Array2::<f32>::from_elem((k, n), 0.25);
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..reps {
        let c = a.dot(&b);
        acc += c[[0, 0]];
    }
    let secs = t0.elapsed().as_secs_f64();
    let gflops = 2.0 * (m * k * n * reps) as f64 / secs / 1e9;
    println!("[{m}x{k}]x[{k}x{n}] reps {reps}: {:.1} GFLOP/s (acc {acc})", gflops);
}

fn main() {
    bench(256, 64, 64, 2000);
    bench(256, 64, 256, 1000);
    bench(256, 256, 64, 1000);
    bench(4096, 64, 64, 200);
    bench(4096, 64, 256, 100);
    bench(16, 256, 64, 5000);
    bench(512, 512, 512, 50);
}
