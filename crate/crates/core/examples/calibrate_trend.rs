//! Pilot run for the labeled-corpus trend checks. Prints the quantities the
//! acceptance target thresholds, plus the sampling-noise floor of the k-mer
//! divergence.

#[path = "../tests/common/trend.rs"]
mod trend;

use trend::*;
use udlm::metrics::{kmer_js, sweep_tsv};
use udlm::Token;

fn main() {
    let data = corpus(0);
    let fresh = corpus(1);
    let a: Vec<&[Token]> = data.sequences.iter().map(|s| s.tokens()).collect();
    let b: Vec<&[Token]> = fresh.sequences.iter().map(|s| s.tokens()).collect();
    println!("noise floor js(data, fresh corpus) = {:.6}", kmer_js(&b, &a, 2).unwrap());

    let uniform = timed("train uniform", || train_uniform(&data, 0));
    println!("uniform loss trace {:?}", uniform.loss_trace);
    let absorbing = timed("train absorbing", || train_absorbing(&data, 0));
    println!("absorbing loss trace {:?}", absorbing.loss_trace);

    let rows = timed("cfg sweep", || cfg_sweep(&uniform, &data, 100));
    print!("{}", sweep_tsv(&rows));
    let js = timed("unguided js", || unguided_js(&uniform, &data, JS_SAMPLES, JS_STEPS, 200));
    println!("uniform unguided js (T={JS_STEPS}, {JS_SAMPLES} samples) = {js:.6}");

    let gu = timed("uniform gaps", || fast_sampling_gaps(&uniform, &data));
    let ga = timed("absorbing gaps", || fast_sampling_gaps(&absorbing, &data));
    for ((s, u), a) in GAP_SEEDS.iter().zip(&gu).zip(&ga) {
        println!("seed {s}: gap uniform {u:.6}, gap absorbing {a:.6}");
    }
}
