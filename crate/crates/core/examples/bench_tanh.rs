use cmlmcse::tensor::kernels::{fast_tanh, gelu_forward};
use std::time::Instant;

fn main() {
    let n = 65536;
    let x: Vec<f32> = (0..n).map(|i| (i as f32 / n as f32) * 4.0 - 2.0).collect();
    let mut out = vec![0.0f32; n];

    let t = Instant::now();
    let reps = 500;
    for _ in 0..reps {
        for i in 0..n {
            out[i] = fast_tanh(x[i]);
        }
        std::hint::black_box(&out);
    }
    println!("raw fast_tanh loop: {:.3} ms per {} elems", t.elapsed().as_secs_f64()*1000.0/reps as f64, n);

    let mut tanh_u = vec![0.0f32; n];
    let t = Instant::now();
    for _ in 0..reps {
        gelu_forward(&x, &mut out, &mut tanh_u);
        std::hint::black_box(&out);
    }
    println!("gelu_forward (preallocated): {:.3} ms", t.elapsed().as_secs_f64()*1000.0/reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let o2 = vec![0.0f32; n];
        let t2 = vec![0.0f32; n];
        std::hint::black_box((&o2, &t2));
    }
    println!("two 256KB allocs: {:.3} ms", t.elapsed().as_secs_f64()*1000.0/reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let ok = x.iter().all(|v| v.is_finite());
        std::hint::black_box(ok);
    }
    println!("finite check: {:.3} ms", t.elapsed().as_secs_f64()*1000.0/reps as f64);
}
