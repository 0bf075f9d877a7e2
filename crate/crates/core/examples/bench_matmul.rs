use cmlmcse::tensor::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use std::time::Instant;

fn main() {
    let (m, k, n) = (256usize, 64usize, 256usize);
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut out = vec![0.0f32; m * n];
    let reps = 2000;
    let t = Instant::now();
    for _ in 0..reps {
        out.iter_mut().for_each(|v| *v = 0.0);
        matmul_acc(&mut out, &a, &b, m, k, n);
    }
    let el = t.elapsed().as_secs_f64();
    let gflops = (2.0 * (m * k * n * reps) as f64) / el / 1e9;
    println!("matmul_acc    [{m}x{k}]@[{k}x{n}]: {gflops:.2} GFLOP/s");

    let bt = vec![0.25f32; n * k];
    let t = Instant::now();
    for _ in 0..reps {
        out.iter_mut().for_each(|v| *v = 0.0);
        matmul_nt_acc(&mut out, &a, &bt, m, k, n);
    }
    let el = t.elapsed().as_secs_f64();
    let gflops = (2.0 * (m * k * n * reps) as f64) / el / 1e9;
    println!("matmul_nt_acc [{m}x{k}]@[{n}x{k}]T: {gflops:.2} GFLOP/s");

    let bb = vec![0.25f32; m * n];
    let mut out2 = vec![0.0f32; k * n];
    let t = Instant::now();
    for _ in 0..reps {
        out2.iter_mut().for_each(|v| *v = 0.0);
        matmul_tn_acc(&mut out2, &a, &bb, m, k, n);
    }
    let el = t.elapsed().as_secs_f64();
    let gflops = (2.0 * (m * k * n * reps) as f64) / el / 1e9;
    println!("matmul_tn_acc: {gflops:.2} GFLOP/s");
}
