use cmlmcse::tensor::{Graph, Tensor};
use cmlmcse::tensor::kernels::gelu_forward;
use std::time::Instant;

fn main() {
    // force mallopt
    let _ = Graph::new();
    let n = 65536;
    let x: Vec<f32> = (0..n).map(|i| (i as f32 / n as f32) * 4.0 - 2.0).collect();
    let xt = Tensor::matrix(256, 256, x.clone()).unwrap();
    let reps = 300;

    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let a = g.var(xt.clone());
        std::hint::black_box(g.value(a).len());
    }
    println!("graph+var only:        {:.3} ms", t.elapsed().as_secs_f64()*1000.0/reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let a = g.var(xt.clone());
        let b = g.gelu(a).unwrap();
        std::hint::black_box(g.value(b).len());
    }
    println!("graph+var+gelu:        {:.3} ms", t.elapsed().as_secs_f64()*1000.0/reps as f64);

    // replicate gelu op body manually
    let t = Instant::now();
    for _ in 0..reps {
        let mut out = vec![0.0f32; n];
        let mut tanh_u = vec![0.0f32; n];
        gelu_forward(&x, &mut out, &mut tanh_u);
        let ok = out.iter().all(|v| v.is_finite());
        let tt = Tensor::matrix(256, 256, out).unwrap();
        std::hint::black_box((ok, tt.len(), tanh_u.len()));
    }
    println!("manual op body:        {:.3} ms", t.elapsed().as_secs_f64()*1000.0/reps as f64);
}
