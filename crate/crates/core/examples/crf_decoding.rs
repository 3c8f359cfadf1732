//! The linear-chain CRF on its own: partition function, negative
//! log-likelihood and Viterbi decoding, checked against enumeration.
//!
//! `cargo run --release --example crf_decoding`

use bga_mner::crf::{
    brute_force_best, brute_force_log_partition, crf_log_partition, crf_nll, viterbi_decode,
    CrfWeights, LabelSet,
};
use bga_mner::tensor::Tensor;

fn main() -> bga_mner::Result<()> {
    let labels = LabelSet::bio(&["PER"])?;
    // Labels: O, B-PER, I-PER. Forbid O -> I-PER with a large penalty.
    let mut transitions = Tensor::zeros(&[3, 3]);
    transitions.data_mut()[2] = -10.0;
    let start = Tensor::vector(vec![0.0, 0.0, -10.0]);
    let w = CrfWeights::new(transitions, start)?;
    #[rustfmt::skip]
    let emissions = Tensor::matrix(4, 3, vec![
        2.0, 0.5, 0.1,
        0.2, 1.5, 0.3,
        0.1, 0.2, 1.9,
        1.0, 0.1, 0.4,
    ])?;

    let (path, score) = viterbi_decode(&emissions, &w)?;
    println!("best path {:?} score {score:.4}", labels.decode(&path));
    println!(
        "enumeration agrees: {:?}",
        brute_force_best(&emissions, &w)?.0 == path
    );
    println!(
        "log partition {:.6} (enumeration {:.6})",
        crf_log_partition(&emissions, &w)?,
        brute_force_log_partition(&emissions, &w)?
    );
    println!(
        "nll of the best path {:.6}",
        crf_nll(&emissions, &w, &path)?
    );
    Ok(())
}
