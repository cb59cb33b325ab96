// Throughput probe for the GEMM kernel at the shapes the second convolution
// layer produces. Run with: cargo test --test gemm_bench -- --ignored --nocapture

use gazenet::tensor::matmul::{matmul, matmul_a_bt, matmul_at_b};
use std::time::Instant;

#[test]
#[ignore]
fn gemm_throughput() {
    let (m, k, n) = (220, 20736, 256); // im2col patches x kernel matrix
    let a: Vec<f64> = (0..m * k).map(|i| (i % 97) as f64 * 1e-3).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i % 89) as f64 * 1e-3).collect();
    let bt: Vec<f64> = (0..n * k).map(|i| (i % 89) as f64 * 1e-3).collect();
    let at: Vec<f64> = (0..k * m).map(|i| (i % 97) as f64 * 1e-3).collect();
    let mut c = vec![0.0; m * n];
    let mut c2 = vec![0.0; m * n];
    let mut c3 = vec![0.0; k * n];

    let flops = 2.0 * m as f64 * k as f64 * n as f64;
    for _ in 0..2 {
        let t = Instant::now();
        matmul(&mut c, &a, &b, m, k, n);
        let dt = t.elapsed().as_secs_f64();
        println!("matmul      {:>8.1} ms  {:>6.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);

        let t = Instant::now();
        matmul_a_bt(&mut c2, &a, &bt, m, k, n);
        let dt = t.elapsed().as_secs_f64();
        println!("matmul_a_bt {:>8.1} ms  {:>6.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);

        // d_kernels shape: [k? no] — A^T(220xK)  x  B(220x256) -> [K,256]
        let t = Instant::now();
        matmul_at_b(&mut c3, &a, &bt[..m * n], k, m, n);
        let dt = t.elapsed().as_secs_f64();
        println!(
            "matmul_at_b {:>8.1} ms  {:>6.2} GFLOP/s",
            dt * 1e3,
            flops / dt / 1e9
        );
    }
    assert!(c[0].is_finite() && c2[0].is_finite() && c3[0].is_finite());
}
