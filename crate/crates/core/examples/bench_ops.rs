use cmlmcse::rng::stream_rng;
use cmlmcse::encoder::DropoutDraw;
use cmlmcse::tensor::{Graph, ParamStore, Tensor};
use std::time::Instant;
use rand::Rng;

fn t_ms(f: impl FnMut() -> ()) -> f64 {
    let mut f = f;
    let reps = 200;
    let t = Instant::now();
    for _ in 0..reps { f(); }
    t.elapsed().as_secs_f64() * 1000.0 / reps as f64
}

fn main() {
    let mut rng = stream_rng(1, "x", 0);
    let rows = 256; let d = 64; let dff = 256;
    let x = Tensor::matrix(rows, d, (0..rows*d).map(|_| rng.gen_range(-1.0..1.0f32)).collect()).unwrap();
    let xff = Tensor::matrix(rows, dff, (0..rows*dff).map(|_| rng.gen_range(-1.0..1.0f32)).collect()).unwrap();
    let w = Tensor::matrix(d, d, (0..d*d).map(|_| rng.gen_range(-0.1..0.1f32)).collect()).unwrap();
    let wff = Tensor::matrix(d, dff, (0..d*dff).map(|_| rng.gen_range(-0.1..0.1f32)).collect()).unwrap();
    let gain = Tensor::vector(vec![1.0; d]);
    let bias = Tensor::vector(vec![0.0; d]);
    let valid: Vec<bool> = (0..rows).map(|i| i % 16 < 12).collect();
    let mut store = ParamStore::new();

    println!("matmul [256,64]x[64,64] fwd+node: {:.3} ms", t_ms(|| {
        let mut g = Graph::new();
        let a = g.var(x.clone()); let b = g.constant(w.clone());
        let _ = g.matmul(a, b).unwrap();
    }));
    println!("matmul ffn [256,64]x[64,256]:     {:.3} ms", t_ms(|| {
        let mut g = Graph::new();
        let a = g.var(x.clone()); let b = g.constant(wff.clone());
        let _ = g.matmul(a, b).unwrap();
    }));
    println!("attention fwd:                    {:.3} ms", t_ms(|| {
        let mut g = Graph::new();
        let q = g.var(x.clone()); let k = g.var(x.clone()); let v = g.var(x.clone());
        let _ = g.attention(q, k, v, 4, 16, &valid, None).unwrap();
    }));
    println!("attention fwd+bwd:                {:.3} ms", t_ms(|| {
        let mut g = Graph::new();
        let q = g.var(x.clone()); let k = g.var(x.clone()); let v = g.var(x.clone());
        let a = g.attention(q, k, v, 4, 16, &valid, None).unwrap();
        let l = g.mean_all(a).unwrap();
        g.backward(l, &mut store).unwrap();
    }));
    println!("layer_norm fwd:                   {:.3} ms", t_ms(|| {
        let mut g = Graph::new();
        let a = g.var(x.clone()); let gn = g.constant(gain.clone()); let bn = g.constant(bias.clone());
        let _ = g.layer_norm(a, gn, bn, 1e-9).unwrap();
    }));
    println!("gelu ffn fwd:                     {:.3} ms", t_ms(|| {
        let mut g = Graph::new();
        let a = g.var(xff.clone());
        let _ = g.gelu(a).unwrap();
    }));
    println!("dropout mask gen 16k+apply:       {:.3} ms", t_ms(|| {
        let mut draw = DropoutDraw::train(stream_rng(3, "d", 1));
        let mut g = Graph::new();
        let a = g.var(x.clone());
        let m = draw.sample_mask(rows*d, 0.1).unwrap();
        let _ = g.dropout(a, m).unwrap();
    }));
    println!("mask gen 16k alone:               {:.3} ms", t_ms(|| {
        let mut draw = DropoutDraw::train(stream_rng(3, "d", 1));
        let _ = draw.sample_mask(rows*d, 0.1).unwrap();
    }));
    println!("var clone x (66KB):               {:.3} ms", t_ms(|| {
        let mut g = Graph::new();
        let _ = g.var(x.clone());
    }));
}
