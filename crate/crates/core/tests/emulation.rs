use cua_core::cayley::{assemble_bdu, SkewBlockParams};
use cua_core::qemu::{
    amplitude_encode, apply_depolarizing, density_matrix_reference, emulate_slice, reconstruct_from_freqs, ChannelParams,
    EmulationMode,
};
use cua_core::rng::{derive_seed, rng_from};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_slice(b: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = rng_from(seed);
    let p = SkewBlockParams::random(b, 1, 1.0, &mut rng).unwrap();
    let q = assemble_bdu(&p).unwrap().blocks()[0].clone();
    (q, (0..b).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

#[test]
fn probability_channel_matches_density_matrix_evolution() {
    for seed in 0..50u64 {
        let b = [2, 4, 8][seed as usize % 3];
        let (q, x) = random_slice(b, seed);
        let gates: Vec<f64> = (0..5).map(|i| 0.01 * (1 + i + seed as usize % 7) as f64).collect();
        let p_ro = 0.02;
        let lambda = 1.0 - gates.iter().map(|l| 1.0 - l).product::<f64>();
        let channel = ChannelParams { lambda, p_readout: p_ro, n_shots: 1 };
        let fast = emulate_slice(&q, &x, &channel, EmulationMode::ExactProb, 0).unwrap();
        let slice = amplitude_encode(&x).unwrap();
        let reference = reconstruct_from_freqs(&density_matrix_reference(&q, &slice, &gates, p_ro).unwrap(), &slice);
        for (a, r) in fast.iter().zip(&reference) {
            assert!((a - r).abs() < 1e-12, "seed {seed}: {a} vs {r}");
        }
    }
}

#[test]
fn shot_error_shrinks_like_inverse_square_root() {
    let slices: Vec<_> = (0..300).map(|i| random_slice(4, 1000 + i)).collect();
    let rmse = |n: u64| -> f64 {
        let channel = ChannelParams { n_shots: n, ..ChannelParams::depolarizing(0.05) };
        let mut sq = 0.0;
        for (i, (q, x)) in slices.iter().enumerate() {
            let exact = emulate_slice(q, x, &channel, EmulationMode::ExactProb, 0).unwrap();
            let shot = emulate_slice(q, x, &channel, EmulationMode::Sampled, derive_seed(n, &[i as u64])).unwrap();
            sq += exact.iter().zip(&shot).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        (sq / (4 * slices.len()) as f64).sqrt()
    };
    let errs: Vec<f64> = [256, 1024, 4096, 16384].into_iter().map(rmse).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..2.7).contains(&ratio), "4x shots should halve the error: {errs:?}");
    }
}

#[test]
fn sampled_mode_is_reproducible_per_seed() {
    let (q, x) = random_slice(8, 3);
    let ch = ChannelParams { n_shots: 512, ..ChannelParams::noiseless() };
    let a = emulate_slice(&q, &x, &ch, EmulationMode::Sampled, 9).unwrap();
    assert_eq!(a, emulate_slice(&q, &x, &ch, EmulationMode::Sampled, 9).unwrap());
    assert_ne!(a, emulate_slice(&q, &x, &ch, EmulationMode::Sampled, 10).unwrap());
}

proptest! {
    #[test]
    fn depolarizing_keeps_a_distribution(raw in prop::collection::vec(0.0f64..1.0, 2..16), lambda in 0.0f64..=1.0) {
        let s: f64 = raw.iter().sum::<f64>().max(1e-9);
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let out = apply_depolarizing(&p, lambda).unwrap();
        prop_assert!((out.iter().sum::<f64>() - p.iter().sum::<f64>()).abs() < 1e-12);
        prop_assert!(out.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn noiseless_exact_emulation_is_the_sign_corrected_map(seed in any::<u64>(), bi in 0usize..3) {
        let b = [2, 4, 8][bi];
        let (q, x) = random_slice(b, seed);
        let got = emulate_slice(&q, &x, &ChannelParams::noiseless(), EmulationMode::ExactProb, 0).unwrap();
        let qx = &q * nalgebra::DVector::from_column_slice(&x);
        for i in 0..b {
            let want = qx[i].abs() * x[i].signum();
            prop_assert!((got[i] - want).abs() < 1e-10 * want.abs().max(1.0));
        }
    }
}
