//! Acceptance suite. Runs every criterion in turn, prints one PASS/FAIL line
//! each, and exits non-zero if any failed.

use std::process::ExitCode;
use std::time::Instant;

use cua_core::adapter::{make_ablation, AblationKind, AdapterMode, CuaLayer};
use cua_core::cayley::{assemble_bdu, cayley_gradient, cayley_transform, orthogonality_defect, skew_from_params, SkewBlockParams};
use cua_core::circuit_plan::{greedy_max_matching, heavy_hex_map, lane_subgraph, noise_table, packing_schedule, CouplingMap};
use cua_core::distill::pipeline::{ablation_study, distill, planted_rotation, prepare, PipelineConfig, PlantedConfig, Prepared};
use cua_core::distill::{noise_phase_sweep, Corpus};
use cua_core::entanglement::{
    brickwork_unitary, cnot, effective_bond_dim, entangling_power, haar_bdu, operator_schmidt, operator_schmidt_bdu,
    stress_scale, swap, Bipartition, BOND_THRESHOLD,
};
use cua_core::qemu::{emulate_slice, emulated_forward, ChannelParams, EmulationMode, NoiseModel};
use cua_core::rng::{derive_seed, rng_from};
use nalgebra::{DMatrix, Matrix4};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn infidelity_table() -> Outcome {
    // (n, λ_1Q, λ_2Q, λ, ε_ro); "≈1" entries are read as 1.0
    const TABLE: [(usize, f64, f64, f64, f64); 7] = [
        (2, 0.005, 0.007, 0.012, 0.014),
        (3, 0.045, 0.077, 0.119, 0.020),
        (4, 0.216, 0.385, 0.518, 0.027),
        (5, 0.671, 0.907, 0.969, 0.034),
        (6, 0.990, 1.0, 1.0, 0.040),
        (7, 1.0, 1.0, 1.0, 0.047),
        (8, 1.0, 1.0, 1.0, 0.053),
    ];
    let t = Instant::now();
    let rows = noise_table(&NoiseModel::default());
    let mut worst = 0.0f64;
    for (row, want) in rows.iter().zip(TABLE) {
        check(row.n_qubits == want.0, format!("row order {} vs {}", row.n_qubits, want.0))?;
        let got = [row.report.lambda_1q, row.report.lambda_2q, row.report.lambda_total, row.report.epsilon_readout];
        for (g, w) in got.iter().zip([want.1, want.2, want.3, want.4]) {
            worst = worst.max((g - w).abs());
            check((g - w).abs() <= 0.001, format!("n={}: {g:.5} vs {w}", row.n_qubits))?;
        }
    }
    let el = t.elapsed().as_secs_f64();
    check(rows.len() == 7 && el < 1.0, format!("{} rows in {el:.3}s", rows.len()))?;
    Ok(format!("7 rows, max |error| {worst:.5}, {el:.4}s"))
}

fn brickwork_chi() -> Outcome {
    let t = Instant::now();
    let cut = Bipartition::qubits(10, 12).map_err(|e| e.to_string())?;
    for seed in 0..5u64 {
        let mut chis = Vec::new();
        for depth in 1..=6 {
            let u = brickwork_unitary(12, depth, seed).map_err(|e| e.to_string())?;
            let spec = operator_schmidt(&u, cut).map_err(|e| e.to_string())?;
            chis.push(effective_bond_dim(&spec, BOND_THRESHOLD));
        }
        check(chis == [1, 4, 4, 16, 16, 16], format!("seed {seed}: chi {chis:?}"))?;
    }
    let el = t.elapsed().as_secs_f64();
    check(el < 120.0, format!("took {el:.1}s"))?;
    Ok(format!("chi = [1, 4, 4, 16, 16, 16] for 5 seeds, {el:.1}s"))
}

fn bdu_rank_structure() -> Outcome {
    let natural = Bipartition::qubits(10, 12).map_err(|e| e.to_string())?;
    let equal = Bipartition::qubits(6, 12).map_err(|e| e.to_string())?;
    let haar = haar_bdu(1024, 4, 7).map_err(|e| e.to_string())?;
    let nat = operator_schmidt_bdu(&haar, natural).map_err(|e| e.to_string())?;
    let eq = operator_schmidt_bdu(&haar, equal).map_err(|e| e.to_string())?;
    check(nat.rank == 16, format!("Haar natural-cut rank {}", nat.rank))?;
    check(eq.rank <= 64, format!("Haar equal-cut rank {}", eq.rank))?;
    let ident = assemble_bdu(&SkewBlockParams::zeros(4, 1024).unwrap()).unwrap();
    let id = operator_schmidt_bdu(&ident, natural).map_err(|e| e.to_string())?;
    check(id.rank == 1 && id.purity_deficit().abs() < 1e-12, format!("identity rank {} deficit {}", id.rank, id.purity_deficit()))?;
    let mut rng = rng_from(11);
    let k = SkewBlockParams::random(4, 1024, 1.0, &mut rng).map_err(|e| e.to_string())?;
    let mut stress = Vec::new();
    for s in [0.0, 1.0, 2.0, 4.0] {
        let u = stress_scale(&k, s).map_err(|e| e.to_string())?;
        let r = operator_schmidt_bdu(&u, natural).map_err(|e| e.to_string())?.rank;
        check(if s == 0.0 { r == 1 } else { r == 16 }, format!("stress s={s}: rank {r}"))?;
        stress.push(r);
    }
    Ok(format!("Haar natural rank {}, equal-cut rank {}, identity rank 1, stress ranks {stress:?}", nat.rank, eq.rank))
}

fn cayley_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = rng_from(2024);
    let (mut worst_orth, mut worst_det) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let b = [2, 4, 8, 16, 64][i % 5];
        let p = SkewBlockParams::random(b, 1, 1.0, &mut rng).map_err(|e| e.to_string())?;
        let q = cayley_transform(&skew_from_params(&p, 0).unwrap()).map_err(|e| e.to_string())?;
        worst_orth = worst_orth.max(orthogonality_defect(&q));
        worst_det = worst_det.max((q.determinant() - 1.0).abs());
    }
    check(worst_orth <= 1e-12, format!("orthogonality defect {worst_orth:e}"))?;
    check(worst_det <= 1e-12, format!("determinant error {worst_det:e}"))?;
    let mut worst_grad = 0.0f64;
    let h = 1e-6;
    for i in 0..100 {
        let b = [2, 4, 8, 16][i % 4];
        let k = 1 + i % 3;
        let p = SkewBlockParams::random(b, k, 0.8, &mut rng).map_err(|e| e.to_string())?;
        let g: Vec<DMatrix<f64>> =
            (0..k).map(|_| DMatrix::from_fn(b, b, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let loss = |p: &SkewBlockParams| -> f64 {
            let u = assemble_bdu(p).unwrap();
            u.blocks().iter().zip(&g).map(|(q, gi)| q.dot(gi)).sum()
        };
        let analytic = cayley_gradient(&p, &g).map_err(|e| e.to_string())?;
        let mut fd = vec![0.0; p.len()];
        for j in 0..p.len() {
            let mut pp = p.clone();
            pp.values_mut()[j] += h;
            let mut pm = p.clone();
            pm.values_mut()[j] -= h;
            fd[j] = (loss(&pp) - loss(&pm)) / (2.0 * h);
        }
        let num: f64 = fd.iter().zip(&analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst_grad = worst_grad.max(num / den);
    }
    check(worst_grad <= 1e-6, format!("gradient relative error {worst_grad:e}"))?;
    let el = t.elapsed().as_secs_f64();
    check(el < 30.0, format!("took {el:.1}s"))?;
    Ok(format!("defect {worst_orth:.1e}, det error {worst_det:.1e}, gradient rel. error {worst_grad:.1e}, {el:.2}s"))
}

fn quantum_path_consistency() -> Outcome {
    let mut rng = rng_from(5);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let b = [2, 4, 8][(i % 3) as usize];
        let k = 1 + (i % 4) as usize;
        let d = b * k;
        let d_out = 3 + (i % 5) as usize;
        let p = SkewBlockParams::random(b, k, 1.0, &mut rng).unwrap();
        let w = DMatrix::from_fn(d_out, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let layer = CuaLayer::new(AdapterMode::SignConstrained, cua_core::Transform::cayley(p).unwrap(), w).unwrap();
        let mut x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if i % 7 == 0 {
            x[0] = 0.0;
        }
        let classical = layer.forward(&x).unwrap();
        let emulated =
            emulated_forward(&layer, &x, &NoiseModel::noiseless(1024), EmulationMode::ExactProb, i).map_err(|e| e.to_string())?;
        for (a, e) in classical.iter().zip(&emulated) {
            worst = worst.max((a - e).abs() / a.abs().max(1.0));
        }
    }
    check(worst <= 1e-10, format!("emulated vs classical {worst:e}"))?;
    // a signed diagonal in front of Q is invisible to the sign-corrected map
    let mut exact = true;
    for i in 0..20u64 {
        let d = 8;
        let q = make_ablation(AblationKind::RandomUnitary, d, i).unwrap();
        let s = make_ablation(AblationKind::SignedDiagonal, d, 100 + i).unwrap();
        let w = DMatrix::from_fn(4, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = CuaLayer::ablation(q.clone(), w.clone()).unwrap();
        let b = CuaLayer::ablation(&s * &q, w.clone()).unwrap();
        let plain = CuaLayer::ablation(s, w).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut pa = vec![0.0; d];
        let mut pb = vec![0.0; d];
        let mut pc = vec![0.0; d];
        a.pre_weight_into(&x, &mut pa);
        b.pre_weight_into(&x, &mut pb);
        plain.pre_weight_into(&x, &mut pc);
        exact &= pa == pb && pc == x;
    }
    check(exact, "signed-diagonal absorption is not exact")?;
    Ok(format!("100 pairs, max relative deviation {worst:.1e}; absorption exact"))
}

fn shot_noise_scaling() -> Outcome {
    const SHOTS: [u64; 5] = [1024, 2048, 4096, 8192, 16384];
    let mut rng = rng_from(77);
    let slices: Vec<(DMatrix<f64>, Vec<f64>)> = (0..1000)
        .map(|_| {
            let p = SkewBlockParams::random(4, 1, 1.0, &mut rng).unwrap();
            let q = assemble_bdu(&p).unwrap().blocks()[0].clone();
            let x = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            (q, x)
        })
        .collect();
    let mut rmse = Vec::new();
    for (si, &n) in SHOTS.iter().enumerate() {
        let channel = ChannelParams { n_shots: n, ..ChannelParams::noiseless() };
        let mut sq = 0.0;
        let mut count = 0;
        for (i, (q, x)) in slices.iter().enumerate() {
            let exact = emulate_slice(q, x, &channel, EmulationMode::ExactProb, 0).unwrap();
            let seed = derive_seed(9, &[si as u64, i as u64]);
            let shot = emulate_slice(q, x, &channel, EmulationMode::Sampled, seed).unwrap();
            for (a, b) in exact.iter().zip(&shot) {
                sq += (a - b).powi(2);
                count += 1;
            }
        }
        rmse.push((sq / count as f64).sqrt());
    }
    let ratio = rmse[0] / rmse[4];
    check((2.7..=6.0).contains(&ratio), format!("RMSE ratio {ratio:.3}"))?;
    check(rmse.windows(2).all(|w| w[1] <= w[0]), format!("sweep not monotone: {rmse:?}"))?;
    Ok(format!("RMSE(1024)/RMSE(16384) = {ratio:.3}, sweep {:?}", rmse.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()))
}

fn planted_recovery(prep: &Prepared, eval: usize) -> Outcome {
    let t = Instant::now();
    let (s, _, _) = planted_rotation(&prep.teacher, &prep.corpus, &PlantedConfig::default(), eval).map_err(|e| e.to_string())?;
    let el = t.elapsed().as_secs_f64();
    check(s.recovery_ratio <= 1.01, format!("teacher {:.4}, recovered {:.4}", s.teacher_ppl, s.recovered_ppl))?;
    check(el < 600.0, format!("took {el:.0}s"))?;
    Ok(format!(
        "teacher {:.4}, rotated {:.2}, recovered {:.4} (ratio {:.4}), {el:.0}s",
        s.teacher_ppl, s.rotated_ppl, s.recovered_ppl, s.recovery_ratio
    ))
}

fn ablation_ordering(cfg: &PipelineConfig, prep: &Prepared, adapted_ppl: f64) -> Outcome {
    let data = &prep.corpus.heldout;
    let rows = ablation_study(&prep.compressed, &prep.sites, &AblationKind::ALL, &[0, 1, 2], data, cfg.eval_windows)
        .map_err(|e| e.to_string())?;
    let baseline = cua_core::distill::perplexity(&prep.compressed, data, cfg.eval_windows).map_err(|e| e.to_string())?;
    check(adapted_ppl < baseline, format!("adapted {adapted_ppl:.4} vs baseline {baseline:.4}"))?;
    let mut parts = vec![format!("adapted {adapted_ppl:.3} < baseline {baseline:.3}")];
    for kind in AblationKind::ALL {
        let ppls: Vec<f64> = rows.iter().filter(|r| r.kind == kind).map(|r| r.ppl).collect();
        let mean = ppls.iter().sum::<f64>() / ppls.len() as f64;
        if kind.is_stochastic_scrambler() {
            check(mean > baseline, format!("{} mean {mean:.4} vs baseline {baseline:.4}", kind.name()))?;
            parts.push(format!("{} {mean:.2}", kind.name()));
        } else {
            let dev = ppls.iter().map(|p| (p - baseline).abs()).fold(0.0, f64::max);
            check(dev <= 1e-6, format!("{} deviates by {dev:e}", kind.name()))?;
        }
    }
    parts.push("identity/signed_diagonal equal baseline".into());
    Ok(parts.join(", "))
}

fn noise_transition(cfg: &PipelineConfig, student: &cua_core::distill::ToyLm) -> Outcome {
    let grid = [0.0, 0.012, 0.1, 0.5, 0.75, 1.0];
    let pts = noise_phase_sweep(student, &Corpus::bundled().heldout, &grid, EmulationMode::ExactProb, 8192, 1, cfg.eval_windows)
        .map_err(|e| e.to_string())?;
    let base = pts[0].ppl;
    let rel: Vec<f64> = pts.iter().map(|p| p.ppl / base - 1.0).collect();
    check(rel[1] < 0.05, format!("λ=0.012 degradation {:.2}%", 100.0 * rel[1]))?;
    for (p, r) in pts.iter().zip(&rel) {
        if p.lambda >= 0.5 {
            check(*r >= 1.0, format!("λ={} degradation {:.0}%", p.lambda, 100.0 * r))?;
        }
    }
    check(pts.windows(2).all(|w| w[1].ppl >= w[0].ppl), "PPL not monotone in λ")?;
    Ok(format!(
        "noiseless {base:.3}; λ=0.012 {:+.2}%, λ=0.5 {:+.0}%, λ=1 {:+.0}%",
        100.0 * rel[1],
        100.0 * rel[3],
        100.0 * rel[5]
    ))
}

fn brute_force_max_matching(n: usize, edges: &[(usize, usize)]) -> usize {
    fn go(i: usize, used: u32, edges: &[(usize, usize)]) -> usize {
        if i == edges.len() {
            return 0;
        }
        let skip = go(i + 1, used, edges);
        let (u, v) = edges[i];
        if used & (1 << u) == 0 && used & (1 << v) == 0 {
            skip.max(1 + go(i + 1, used | (1 << u) | (1 << v), edges))
        } else {
            skip
        }
    }
    let _ = n;
    go(0, 0, edges)
}

fn packing_arithmetic() -> Outcome {
    let device = heavy_hex_map(4, 6);
    let (sub, _) = lane_subgraph(&device, 64).map_err(|e| e.to_string())?;
    check(sub.num_qubits() == 128 && sub.max_degree() <= 3, format!("subgraph {} qubits", sub.num_qubits()))?;
    let lanes = greedy_max_matching(&sub, usize::MAX);
    check(lanes.len() == 64, format!("{} lanes", lanes.len()))?;
    let circuits = packing_schedule(1024, lanes.len()).unwrap().num_circuits;
    check(circuits == 16, format!("{circuits} circuits for 1024 blocks"))?;
    let fig2 = packing_schedule(144, 72).unwrap().num_circuits;
    check(fig2 == 2, format!("{fig2} circuits for 144 blocks"))?;
    let mut rng = rng_from(31);
    let mut brute_checked = 0;
    for g in 0..100 {
        let n = if g < 60 { rng.random_range(2..=10) } else { rng.random_range(11..=60) };
        let prob = rng.random_range(0.1..0.6);
        let edges: Vec<(usize, usize)> =
            (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).filter(|_| rng.random_bool(prob)).collect();
        let map = CouplingMap::new(n, edges).unwrap();
        let m = greedy_max_matching(&map, usize::MAX);
        let mut used = vec![false; n];
        for &(u, v) in &m {
            check(map.edges().contains(&(u, v)), format!("graph {g}: ({u},{v}) not an edge"))?;
            check(!used[u] && !used[v], format!("graph {g}: lanes overlap"))?;
            used[u] = true;
            used[v] = true;
        }
        check(map.edges().iter().all(|&(u, v)| used[u] || used[v]), format!("graph {g}: matching not maximal"))?;
        if n <= 10 {
            let best = brute_force_max_matching(n, map.edges());
            check(m.len() <= best && 2 * m.len() >= best, format!("graph {g}: greedy {} vs max {best}", m.len()))?;
            brute_checked += 1;
        }
    }
    Ok(format!("128-qubit subgraph: 64 lanes, 16 circuits; 144/72 -> 2; 100 random graphs ({brute_checked} brute-forced)"))
}

fn entangling_calibration() -> Outcome {
    let n = 100_000;
    let id = entangling_power(&Matrix4::<Complex64>::identity(), n, 1);
    let cx = entangling_power(&cnot(), n, 2);
    let sw = entangling_power(&swap(), n, 3);
    check(id.value.abs() <= 0.005, format!("identity {}", id.value))?;
    check((cx.value - 1.0).abs() <= 1e-12, format!("CNOT {}", cx.value))?;
    check(sw.value.abs() <= 0.005, format!("SWAP {}", sw.value))?;
    Ok(format!("identity {:.4}, CNOT {:.4}, SWAP {:.4} ({n} samples)", id.value, cx.value, sw.value))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, out: Outcome| {
        match out {
            Ok(detail) => println!("criterion {n:>2} [PASS] {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {n:>2} [FAIL] {name}: {why}");
            }
        }
    };
    report(1, "infidelity table", infidelity_table());
    report(2, "brickwork chi sequence", brickwork_chi());
    report(3, "BDU rank structure", bdu_rank_structure());
    report(4, "Cayley correctness", cayley_correctness());
    report(5, "quantum-path consistency", quantum_path_consistency());
    report(6, "shot-noise scaling", shot_noise_scaling());

    let cfg = PipelineConfig::default();
    let pipeline = prepare(&cfg, Corpus::bundled()).and_then(|prep| {
        let (summary, student, _) = distill(&cfg, &prep)?;
        Ok((prep, summary, student))
    });
    match pipeline {
        Ok((prep, summary, student)) => {
            report(7, "planted-rotation recovery", planted_recovery(&prep, cfg.eval_windows));
            report(8, "ablation ordering", ablation_ordering(&cfg, &prep, summary.adapted_ppl));
            report(9, "noise phase transition", noise_transition(&cfg, &student));
        }
        Err(e) => {
            for (n, name) in [(7, "planted-rotation recovery"), (8, "ablation ordering"), (9, "noise phase transition")] {
                report(n, name, Err(format!("pipeline failed: {e}")));
            }
        }
    }
    report(10, "packing arithmetic", packing_arithmetic());
    report(11, "entangling power calibration", entangling_calibration());
    if failures == 0 {
        println!("acceptance: 11/11 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 11 criteria failed");
        ExitCode::FAILURE
    }
}
