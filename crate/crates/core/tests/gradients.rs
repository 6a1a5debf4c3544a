use mima_core::gradcheck::{check_denoiser, check_immunize, check_merge};

#[test]
fn merge_backward_matches_finite_differences() {
    let r = check_merge(11, 30).unwrap();
    eprintln!("{r:?}"); assert!(r.passed(), "{r:?}");
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let r = check_denoiser(5, 5).unwrap();
    eprintln!("{r:?}"); assert!(r.passed(), "{r:?}");
}

#[test]
fn bilevel_gradient_matches_composite_finite_differences() {
    for seed in 0..4 {
        let r = check_immunize(seed).unwrap();
        eprintln!("{r:?}"); assert!(r.passed(), "seed {seed}: {r:?}");
    }
}
