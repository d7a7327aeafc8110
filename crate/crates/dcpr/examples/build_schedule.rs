//! Construct noise schedules and inspect their shape: the square-root
//! decay of the signal fraction, the strict-monotonicity guards at both
//! ends, and the product identity tying per-step alphas to the
//! cumulative table.

use dcpr::diffusion::NoiseSchedule;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for t_max in [16usize, 1024] {
        let sched = NoiseSchedule::build(t_max, 1e-4)?;
        println!("schedule T={t_max}, w={}", sched.noise_offset());
        println!("  {:>6}  {:>12}  {:>12}  {:>12}", "t", "beta_t", "alpha_t", "alpha_bar_t");
        let probe: Vec<usize> = match t_max {
            16 => vec![1, 2, 4, 8, 15, 16],
            _ => vec![1, 2, 256, 512, 1023, 1024],
        };
        for t in probe {
            println!(
                "  {:>6}  {:>12.6}  {:>12.6}  {:>12.3e}",
                t,
                sched.beta(t),
                sched.alpha(t),
                sched.alpha_bar(t)
            );
        }

        // The cumulative table must be the running product of the
        // per-step alphas off alpha_bar(0), strictly decreasing, inside
        // [1e-5, 1-1e-5] bounds, and pinned to 1e-5 at the end.
        let mut product = sched.alpha_bar(0);
        let mut max_gap = 0.0f64;
        for t in 1..=t_max {
            product *= sched.alpha(t);
            max_gap = max_gap.max((product - sched.alpha_bar(t)).abs());
            assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
        }
        assert!(max_gap < 1e-12, "cumulative/per-step tables must agree");
        println!("  max |alpha_bar(0) * prod(alpha) - alpha_bar| = {max_gap:.3e}");
        println!("  alpha_bar(T) = {:.1e} (fully noised endpoint)\n", sched.alpha_bar(t_max));
    }

    // The offset has hard validity bounds: at w = 1 the signal fraction
    // would start at zero and no usable schedule exists.
    match NoiseSchedule::build(64, 1.0) {
        Err(e) => println!("rejected offset 1.0: {e}"),
        Ok(_) => unreachable!("an offset this large cannot produce a valid schedule"),
    }
    Ok(())
}
