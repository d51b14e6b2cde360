use ndarray::Array2;
use std::time::Instant;

fn main() {
    // typical conv gemm shapes from the UNet at 32x32
    for &(m, k, n) in &[(32usize, 288usize, 1024usize), (64, 288, 256), (128, 1152, 64), (256, 2304, 4096)] {
        let a = Array2::<f32>::from_elem((m, k), 0.5);
        let b = Array2::<f32>::from_elem((k, n), 0.25);
        let mut c = a.dot(&b);
        let t0 = Instant::now();
        let mut reps = 0u64;
        while t0.elapsed().as_secs_f64() < 0.6 {
            c = a.dot(&b);
            reps += 1;
        }
        let secs = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / secs / 1e9;
        println!("{}x{}x{}: {:.1} GFLOPS ({} reps) sink={}", m, k, n, gflops, reps, c[[0, 0]]);
    }
}
