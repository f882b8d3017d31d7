//! Scratch matmul throughput check (not part of the test suite).

use greybox::tensor::{matmul_acc, Tensor};
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, iters: usize) {
    let a = Tensor::full(vec![m, k], 0.5);
    let b = Tensor::full(vec![k, n], 0.25);
    let mut c = Tensor::zeros(vec![m, n]);
    // Warmup.
    matmul_acc(c.data_mut(), a.data(), b.data(), m, k, n);
    let t0 = Instant::now();
    for _ in 0..iters {
        matmul_acc(c.data_mut(), a.data(), b.data(), m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = (2 * m * k * n * iters) as f64;
    println!(
        "[{m}x{k}]x[{k}x{n}]: {:.2} GFLOP/s ({:.1} us/op)",
        flops / dt / 1e9,
        dt / iters as f64 * 1e6
    );
    assert!(c.data()[0].is_finite());
}

fn main() {
    bench(8, 64, 64, 20000);
    bench(8, 128, 128, 8000);
    bench(64, 64, 64, 5000);
    bench(64, 128, 128, 2000);
    bench(200, 128, 128, 1000);
    bench(500, 64, 64, 1000);
    bench_blocked(8, 64, 64, 20000);
    bench_blocked(64, 64, 64, 5000);
    bench_blocked(64, 128, 128, 2000);
    bench_blocked(500, 64, 64, 1000);
}

// Experimental 4-row blocked variant for comparison.
#[allow(dead_code)]
fn matmul_acc_blocked(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        for kk in 0..k {
            let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            let b_row = &b[kk * n..(kk + 1) * n];
            let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
            let (c0, c1) = c01.split_at_mut(n);
            let (c2, c3) = c23.split_at_mut(n);
            for j in 0..n {
                let bv = b_row[j];
                c0[j] += v0 * bv;
                c1[j] += v1 * bv;
                c2[j] += v2 * bv;
                c3[j] += v3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += aik * bv;
            }
        }
        i += 1;
    }
}

#[allow(dead_code)]
fn bench_blocked(m: usize, k: usize, n: usize, iters: usize) {
    let a = Tensor::full(vec![m, k], 0.5);
    let b = Tensor::full(vec![k, n], 0.25);
    let mut c = Tensor::zeros(vec![m, n]);
    matmul_acc_blocked(c.data_mut(), a.data(), b.data(), m, k, n);
    let t0 = Instant::now();
    for _ in 0..iters {
        matmul_acc_blocked(c.data_mut(), a.data(), b.data(), m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = (2 * m * k * n * iters) as f64;
    println!(
        "blocked [{m}x{k}]x[{k}x{n}]: {:.2} GFLOP/s",
        flops / dt / 1e9
    );
    assert!(c.data()[0].is_finite());
}
