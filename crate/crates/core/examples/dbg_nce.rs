use cmlmcse::contrastive::{info_nce_loss, EmbeddingPairBatch};
use cmlmcse::rng::stream_rng;
use cmlmcse::tensor::{gradcheck, Tensor};
use rand::Rng;

fn main() {
    for point in 0..10u64 {
        let mut rng = stream_rng(0xC0FFEE, "info_nce_loss", point);
        let h = Tensor::matrix(3, 8, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let hp = Tensor::matrix(3, 8, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let report = gradcheck(
            |g, v| {
                let pairs = EmbeddingPairBatch { h: v[0], h_plus: v[1], n: 3 };
                info_nce_loss(g, &pairs, 0.05)
            },
            &[h, hp],
        )
        .unwrap();
        println!(
            "point {point}: rel {:.3e} at {:?}, analytic {:.6e}, numeric {:.6e}",
            report.max_rel_err, report.worst, report.analytic_at_worst, report.numeric_at_worst
        );
    }
}
