//! Generate planted-pattern check-in corpora and verify the plants are
//! really there: a fixed-start category cycle, a 1-or-2 step transition
//! kernel on the POI ring, geographic clusters the partitioner recovers,
//! and per-user preference sets that visibly warp the visit counts.

use std::collections::BTreeMap;

use dcpr::data::{partition_regions, synth_generate, SynthConfig, SynthPattern};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // --- Plant 1: the category stream is a pure cycle (noise off). ---
    let cfg = SynthConfig { noise: 0.0, ..SynthConfig::default() };
    let synth = synth_generate(&cfg, 11)?;
    let ds = &synth.dataset;
    println!(
        "cyclic corpus: {} users, {} pois, {} categories, {} check-ins",
        ds.n_users(),
        ds.n_pois(),
        ds.n_categories(),
        ds.n_checkins()
    );

    let c = ds.n_categories();
    let (mut cyclic_hits, mut total) = (0usize, 0usize);
    for u in 0..ds.n_users() {
        let cats = ds.category_sequence(u);
        for w in cats.windows(2) {
            total += 1;
            if w[1] == (w[0] + 1) % c {
                cyclic_hits += 1;
            }
        }
    }
    println!("  category transitions following the cycle: {cyclic_hits}/{total}");
    assert_eq!(cyclic_hits, total, "noise-free cyclic walks never break the cycle");

    // --- Plant 2: geographic regions. The generator builds one POI ring
    // per region ~111 km apart; k-means on coordinates must split them
    // exactly as planted. ---
    let map = partition_regions(ds, cfg.regions, 99)?;
    let p = cfg.pois_per_region as u32;
    let mut purity = BTreeMap::new();
    for (row, poi) in ds.pois.iter().enumerate() {
        let planted = poi.external_id / p;
        *purity.entry((map.region_of(row), planted)).or_insert(0usize) += 1;
    }
    println!("  learned-region x planted-region counts: {purity:?}");
    let mut seen = BTreeMap::new();
    for (&(learned, planted), &n) in &purity {
        assert!(n > 0);
        assert_eq!(
            *seen.entry(learned).or_insert(planted),
            planted,
            "a learned region mixed two planted rings"
        );
    }

    // --- Plant 3: the markov walk advances +1 (70%) or +2 (30%) on the
    // ring. Decode the ring position from the external POI id and count. ---
    let cfg = SynthConfig { pattern: SynthPattern::Markov, noise: 0.0, ..SynthConfig::default() };
    let synth = synth_generate(&cfg, 12)?;
    let ds = &synth.dataset;
    let p = cfg.pois_per_region;
    let mut steps = BTreeMap::new();
    let mut total = 0usize;
    for seq in &ds.sequences {
        for w in seq.windows(2) {
            let a = ds.pois[w[0].poi].external_id as usize % p;
            let b = ds.pois[w[1].poi].external_id as usize % p;
            *steps.entry((b + p - a) % p).or_insert(0usize) += 1;
            total += 1;
        }
    }
    let frac = |k: usize| *steps.get(&k).unwrap_or(&0) as f64 / total as f64;
    let other: usize = steps.iter().filter(|(&k, _)| k != 1 && k != 2).map(|(_, &n)| n).sum();
    println!("\nmarkov corpus ring-step distribution over {total} transitions:");
    println!(
        "  +1: {:.3}   +2: {:.3}   other: {:.3}",
        frac(1),
        frac(2),
        other as f64 / total as f64
    );
    assert!((frac(1) - 0.7).abs() < 0.05, "+1 step rate should sit near 0.7");
    assert!((frac(2) - 0.3).abs() < 0.05, "+2 step rate should sit near 0.3");

    // --- Plant 4: preference sets. With bias on, a user's visits pile up
    // on their personal POI set far beyond the uniform share. ---
    let cfg = SynthConfig {
        pattern: SynthPattern::Markov,
        bias_strength: 0.5,
        bias_size: 5,
        ..SynthConfig::default()
    };
    let synth = synth_generate(&cfg, 13)?;
    let ds = &synth.dataset;
    let mut in_set = 0usize;
    let mut total = 0usize;
    for (dense, &ext_user) in ds.users.iter().enumerate() {
        let set = &synth.bias_sets[ext_user as usize];
        for c in &ds.sequences[dense] {
            total += 1;
            if set.contains(&ds.pois[c.poi].external_id) {
                in_set += 1;
            }
        }
    }
    let share = in_set as f64 / total as f64;
    let uniform = cfg.bias_size as f64 / cfg.pois_per_region as f64;
    println!("\nbiased corpus: {share:.3} of visits in the preference set (uniform share {uniform:.3})");
    assert!(share > 2.0 * uniform, "the planted preference must dominate the uniform share");
    Ok(())
}
