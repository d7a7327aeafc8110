//! Skip-step inference: walk a 16-step subsequence of a 1024-step chain
//! and compare it with the full-length walk. With the same clean-target
//! oracle both visit identical states, but the short chain makes 64x
//! fewer denoiser calls — the entire speedup story in one page.

use std::time::Instant;

use dcpr::diffusion::{accelerated_reverse_step, NoiseSchedule, ReverseSubsequence};
use dcpr::{Matrix, Rng};

/// Stand-in denoiser: always report the same clean target. A trained
/// model varies with (x_t, t); the chain mechanics do not care.
fn oracle(x0: &Matrix<f64>) -> Matrix<f64> {
    x0.clone()
}

/// Walk the chain, returning the final state, the state observed at
/// `probe` (a step both chains visit), and the number of oracle calls.
fn walk(
    sub: &ReverseSubsequence,
    sched: &NoiseSchedule,
    x_start: &Matrix<f64>,
    x0: &Matrix<f64>,
    probe: usize,
) -> Result<(Matrix<f64>, Matrix<f64>, usize), Box<dyn std::error::Error>> {
    let mut x = x_start.clone();
    let mut at_probe = x_start.clone();
    let mut calls = 0;
    for (from, to) in sub.pairs() {
        let x0_hat = oracle(x0);
        calls += 1;
        if to > 0 {
            x = accelerated_reverse_step(&x, from, to, &x0_hat, sched)?;
        } else {
            x = x0_hat;
        }
        if to == probe {
            at_probe = x.clone();
        }
    }
    Ok((x, at_probe, calls))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sched = NoiseSchedule::build(1024, 1e-4)?;
    let mut rng = Rng::new(7);
    let x0: Matrix<f64> = rng.gaussian_matrix(1, 16);
    let x_start: Matrix<f64> = rng.gaussian_matrix(1, 16);

    let short = ReverseSubsequence::build(1024, 16)?;
    let head: Vec<usize> = short.steps().iter().take(5).copied().collect();
    println!("subsequence T_R=16 over T=1024: starts {head:?} ... ends at 0");
    println!("  transitions = {}", short.transitions());

    // Both chains visit step 64 (the short chain's steps are multiples
    // of 64), so the states there are directly comparable.
    let probe = 64;
    let full = ReverseSubsequence::build(1024, 1024)?;
    let t = Instant::now();
    let (x_full, full_probe, calls_full) = walk(&full, &sched, &x_start, &x0, probe)?;
    let full_time = t.elapsed();
    let t = Instant::now();
    let (x_short, short_probe, calls_short) = walk(&short, &sched, &x_start, &x0, probe)?;
    let short_time = t.elapsed();

    println!("\nfull chain:  {calls_full} denoiser calls in {full_time:?}");
    println!("short chain: {calls_short} denoiser calls in {short_time:?}");
    let probe_gap = full_probe.max_abs_diff(&short_probe);
    let end_gap = x_full.max_abs_diff(&x_short);
    println!("max state gap at step {probe}: {probe_gap:.3e}");
    println!("max state gap at step 0:  {end_gap:.3e}");
    assert_eq!(calls_full / calls_short, 64);
    assert!(probe_gap < 1e-9, "fixed-oracle chains should agree mid-walk");
    assert!(end_gap < 1e-12);

    // The agreement is no accident: with a fixed clean estimate the skip
    // step is transitive — jumping 512 -> 128 equals 512 -> 256 -> 128.
    let x512: Matrix<f64> = rng.gaussian_matrix(1, 16);
    let direct = accelerated_reverse_step(&x512, 512, 128, &x0, &sched)?;
    let mid = accelerated_reverse_step(&x512, 512, 256, &x0, &sched)?;
    let two_hop = accelerated_reverse_step(&mid, 256, 128, &x0, &sched)?;
    let hop_gap = direct.max_abs_diff(&two_hop);
    println!("one jump vs. two jumps to the same step: max gap {hop_gap:.3e}");
    assert!(hop_gap < 1e-12);
    Ok(())
}
