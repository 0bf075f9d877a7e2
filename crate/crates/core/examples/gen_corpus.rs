use cmlmcse::eval::synthetic_corpus;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    for line in synthetic_corpus(n, seed) {
        println!("{line}");
    }
}
