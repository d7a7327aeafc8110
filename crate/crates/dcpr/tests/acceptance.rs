//! Acceptance suite: one test per guaranteed property, each printing a
//! single `[PASS]`/`[FAIL]` line with the measured numbers (visible with
//! `cargo test --test acceptance -- --nocapture`).
//!
//! The checks are ordered from the numeric core outward: noise schedule,
//! forward/reverse process, gradients, the three-tier training pipeline
//! with its freeze guarantees, planted-pattern learning power, and the
//! serialization/determinism contract.

use std::time::Instant;

use dcpr::cli::next_category_examples;
use dcpr::data::{synth_generate, SynthConfig, SynthPattern};
use dcpr::denoisers::{
    ce_loss, global_forward, patch_forward, region_forward, GlobalModel, PatchModel, RegionModel,
    RegionPoi,
};
use dcpr::diffusion::{
    accelerated_reverse_step, forward_diffuse, reverse_step_with_eps, NoiseSchedule,
    ReverseSubsequence,
};
use dcpr::evaluation::{
    evaluate_devices, evaluate_global, hr_at_k, ndcg_at_k, recommend,
};
use dcpr::numerics::{central_difference, derive_seed, max_rel_error};
use dcpr::orchestration::{
    decode_checkpoint, device_split, device_stage, encode_checkpoint, global_stage,
    prepare_context, region_from_checkpoint, region_stage, run_pipeline, tensor_digest, Checkpoint,
    DevicePatch, PipelineConfig, TrainConfig, TrainMode,
};
use dcpr::{Matrix, Rng, Tape};

fn verdict(pass: bool, line: String) {
    println!("[{}] {line}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{line}");
}

fn hr10(tier: &dcpr::evaluation::TierMetrics) -> f64 {
    tier.hr.iter().find(|(k, _)| *k == 10).expect("k=10 was requested").1
}

// ---------------------------------------------------------------------------
// 1. Noise schedule shape: strict decrease, clamped range, product identity.
// ---------------------------------------------------------------------------

#[test]
fn a01_schedule_validity() {
    let start = Instant::now();
    let mut worst_gap = 0.0f64;
    for t_max in [16usize, 1024] {
        let sched = NoiseSchedule::build(t_max, 1e-4).unwrap();
        let mut prev = sched.alpha_bar(0);
        let mut prod = sched.alpha_bar(0);
        for t in 1..=t_max {
            let ab = sched.alpha_bar(t);
            assert!(ab < prev, "T={t_max}: alpha-bar must strictly decrease at t={t}");
            assert!((1e-5..=1.0 - 1e-5).contains(&ab), "T={t_max}: alpha-bar out of range at t={t}");
            prod *= sched.alpha(t);
            worst_gap = worst_gap.max((prod - ab).abs());
            prev = ab;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        worst_gap <= 1e-12 && elapsed < 1.0,
        format!(
            "schedule validity: T in {{16, 1024}}, w=1e-4: alpha-bar strictly decreasing in \
             [1e-5, 1-1e-5]; worst product-identity gap {worst_gap:.2e} (<= 1e-12); {elapsed:.3}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Forward corruption moments: mean sqrt(abar)*x0, variance 1-abar.
// ---------------------------------------------------------------------------

#[test]
fn a02_forward_noise_moments() {
    let start = Instant::now();
    let t_max = 1024;
    let sched = NoiseSchedule::build(t_max, 1e-4).unwrap();
    let x0: Matrix<f64> = Matrix::from_rows(&[vec![0.6, -1.2, 0.45, 2.0]]);
    let n = 100_000usize;
    let (mut worst_mean_z, mut worst_var_rel) = (0.0f64, 0.0f64);
    for (i, t) in [t_max / 4, t_max / 2, t_max].into_iter().enumerate() {
        let mut rng = Rng::new(1000 + i as u64);
        let dim = x0.cols();
        let (mut sum, mut sumsq) = (vec![0.0f64; dim], vec![0.0f64; dim]);
        for _ in 0..n {
            let (x_t, _) = forward_diffuse(&x0, t, &sched, &mut rng).unwrap();
            for j in 0..dim {
                let v = x_t.get(0, j);
                sum[j] += v;
                sumsq[j] += v * v;
            }
        }
        let ab = sched.alpha_bar(t);
        let se = ((1.0 - ab) / n as f64).sqrt();
        for j in 0..dim {
            let mean = sum[j] / n as f64;
            let var = sumsq[j] / n as f64 - mean * mean;
            let z = (mean - ab.sqrt() * x0.get(0, j)).abs() / se;
            let var_rel = (var - (1.0 - ab)).abs() / (1.0 - ab);
            worst_mean_z = worst_mean_z.max(z);
            worst_var_rel = worst_var_rel.max(var_rel);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        worst_mean_z <= 3.0 && worst_var_rel <= 0.02 && elapsed < 10.0,
        format!(
            "forward-noise moments: 1e5 draws at t in {{256, 512, 1024}}: worst per-coordinate \
             mean offset {worst_mean_z:.2} standard errors (<= 3), worst variance deviation \
             {:.2}% (<= 2%); {elapsed:.2}s",
            worst_var_rel * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Noiseless reverse identities at every step, 64-bit.
// ---------------------------------------------------------------------------

#[test]
fn a03_noiseless_reverse_identities() {
    let start = Instant::now();
    let t_max = 1024;
    let sched = NoiseSchedule::build(t_max, 1e-4).unwrap();
    let mut rng = Rng::new(7);
    let x0: Matrix<f64> = rng.gaussian_matrix(1, 8);
    let zeros = Matrix::zeros(1, 8);
    let (mut worst_step, mut worst_jump) = (0.0f64, 0.0f64);
    for t in 1..=t_max {
        let x_t = x0.scale(sched.alpha_bar(t).sqrt());
        let want = x0.scale(sched.alpha_bar(t - 1).sqrt());
        // Single stochastic-form step with the noise turned off.
        let stepped = reverse_step_with_eps(&x_t, t, &x0, &sched, &zeros).unwrap();
        worst_step = worst_step.max(stepped.max_abs_diff(&want));
        // Deterministic skip step over the same (t, t-1) transition.
        let skipped = accelerated_reverse_step(&x_t, t, t - 1, &x0, &sched).unwrap();
        worst_jump = worst_jump.max(skipped.max_abs_diff(&want));
        // Long jump straight from T.
        if t < t_max {
            let x_top = x0.scale(sched.alpha_bar(t_max).sqrt());
            let long = accelerated_reverse_step(&x_top, t_max, t, &x0, &sched).unwrap();
            worst_jump = worst_jump.max(long.max_abs_diff(&x_t));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        worst_step <= 1e-10 && worst_jump <= 1e-10 && elapsed < 1.0,
        format!(
            "noiseless reverse identities: all t in 1..=1024 on random x0 (f64): single-step \
             deviation {worst_step:.2e}, skip-step deviation {worst_jump:.2e} (<= 1e-10); \
             {elapsed:.3}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Gradient checks: every parameter group of all three tiers at d=8,
//    history length 5, against central finite differences.
// ---------------------------------------------------------------------------

fn gc_global() -> GlobalModel<f64> {
    let mut rng = Rng::new(41);
    GlobalModel::init(7, 8, 0.3, &mut rng)
}

fn gc_region() -> RegionModel<f64> {
    let mut rng = Rng::new(42);
    let base = GlobalModel::init(7, 8, 0.3, &mut rng);
    let pois: Vec<RegionPoi> = (0..10)
        .map(|i| RegionPoi {
            external_id: 100 + i as u32,
            category_row: i % 7,
            lat: (i as f64) * 0.01,
            lon: -(i as f64) * 0.02,
        })
        .collect();
    let mut r = RegionModel::specialize(base, 3, pois, 0.7, 100.0, 168.0);
    r.unit_spatial = Matrix::from_rows(&[vec![0.002f64; 8]]);
    r.unit_temporal = Matrix::from_rows(&[vec![-0.003f64; 8]]);
    r
}

#[test]
fn a04_gradient_checks_cover_every_group() {
    let start = Instant::now();
    let tol = 1e-4;
    let mut groups = 0usize;
    let mut worst = 0.0f64;

    // Category-level model: embedding table plus the three attention maps.
    {
        let history = [0usize, 2, 4, 6, 1];
        let (target, negs) = (3usize, [5usize, 6, 0]);
        let x_t = Matrix::from_rows(&[vec![0.3f64, -0.1, 0.2, 0.05, -0.25, 0.15, 0.0, 0.1]]);
        let template = gc_global();
        let run = |m: &GlobalModel<f64>| {
            let mut tape = Tape::new();
            let g = m.register(&mut tape, true);
            let x = tape.leaf(x_t.clone());
            let out = global_forward(&mut tape, &g, m.lambda, x, &history, 11, None).unwrap();
            let x0 = tape.gather(g.category_emb, &[target]);
            let neg = tape.gather(g.category_emb, &negs);
            let loss = ce_loss(&mut tape, out, x0, neg).unwrap();
            (tape, g, loss)
        };
        let params =
            vec![template.category_emb.clone(), template.w_q.clone(), template.w_k.clone(), template.w_v.clone()];
        let loss_of = |ps: &[Matrix<f64>]| {
            let m = GlobalModel {
                category_emb: ps[0].clone(),
                w_q: ps[1].clone(),
                w_k: ps[2].clone(),
                w_v: ps[3].clone(),
                lambda: template.lambda,
            };
            let (tape, _, loss) = run(&m);
            tape.value(loss).scalar()
        };
        let (tape, g, loss) = run(&template);
        let grads = tape.backward(loss).unwrap();
        let numeric = central_difference(loss_of, &params, 1e-5);
        for (i, (name, id)) in g.nodes().into_iter().enumerate() {
            let err = max_rel_error(grads.get(id).unwrap(), &numeric[i]);
            assert!(err < tol, "category tier {name}: rel error {err}");
            worst = worst.max(err);
            groups += 1;
        }
    }

    // Region model with every group trainable, including the frozen-capable
    // base and the spatiotemporal unit embeddings.
    {
        let history = [0usize, 3, 7, 9, 5];
        let timestamps = [0i64, 3_600, 10_800, 90_000, 200_000];
        let (target, negs) = (2usize, [4usize, 8, 1]);
        let x_t = Matrix::from_rows(&[vec![0.1f64, 0.2, -0.1, 0.0, 0.3, -0.2, 0.05, -0.05]]);
        let template = gc_region();
        let rebuild = |ps: &[Matrix<f64>]| {
            let mut r = template.clone();
            r.base.category_emb = ps[0].clone();
            r.base.w_q = ps[1].clone();
            r.base.w_k = ps[2].clone();
            r.base.w_v = ps[3].clone();
            r.poi_emb = ps[4].clone();
            r.unit_spatial = ps[5].clone();
            r.unit_temporal = ps[6].clone();
            r
        };
        let run = |m: &RegionModel<f64>| {
            let mut tape = Tape::new();
            let g = m.register(&mut tape, true, true);
            let x = tape.leaf(x_t.clone());
            let out = region_forward(&mut tape, m, &g, x, &history, &timestamps, 7, None).unwrap();
            let x0 = tape.gather(g.poi_emb, &[target]);
            let neg = tape.gather(g.poi_emb, &negs);
            let loss = ce_loss(&mut tape, out, x0, neg).unwrap();
            (tape, g, loss)
        };
        let params = vec![
            template.base.category_emb.clone(),
            template.base.w_q.clone(),
            template.base.w_k.clone(),
            template.base.w_v.clone(),
            template.poi_emb.clone(),
            template.unit_spatial.clone(),
            template.unit_temporal.clone(),
        ];
        let loss_of = |ps: &[Matrix<f64>]| {
            let m = rebuild(ps);
            let (tape, _, loss) = run(&m);
            tape.value(loss).scalar()
        };
        let (tape, g, loss) = run(&template);
        let grads = tape.backward(loss).unwrap();
        let numeric = central_difference(loss_of, &params, 1e-5);
        for (i, (name, id)) in g.all_nodes().into_iter().enumerate() {
            let err = max_rel_error(grads.get(id).unwrap(), &numeric[i]);
            assert!(err < tol, "region tier {name}: rel error {err}");
            worst = worst.max(err);
            groups += 1;
        }
    }

    // Patch MLP through the whole device graph (frozen region below it).
    {
        let region = gc_region();
        let history = [1usize, 4, 6, 0, 2];
        let timestamps = [0i64, 3_600, 7_200, 14_400, 21_600];
        let (target, negs) = (0usize, [2usize, 9]);
        let x_t = Matrix::from_rows(&[vec![0.05f64, -0.1, 0.2, 0.15, -0.2, 0.0, 0.1, -0.05]]);
        let template = {
            let mut rng = Rng::new(9);
            let mut p: PatchModel<f64> = PatchModel::near_identity(8, 0.02);
            for t in [&mut p.w1, &mut p.w2, &mut p.w3, &mut p.w4] {
                let noise: Matrix<f64> = rng.gaussian_matrix_scaled(8, 8, 0.05);
                *t = t.add(&noise);
            }
            for b in [&mut p.b1, &mut p.b2, &mut p.b3, &mut p.b4] {
                let noise: Matrix<f64> = rng.gaussian_matrix_scaled(1, 8, 0.05);
                *b = b.add(&noise);
            }
            p
        };
        let names = ["w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"];
        let rebuild = |ps: &[Matrix<f64>]| {
            let mut p = template.clone();
            for (name, val) in names.iter().zip(ps) {
                *p.tensor_mut(name).unwrap() = val.clone();
            }
            p
        };
        let run = |patch: &PatchModel<f64>| {
            let mut tape = Tape::new();
            let rg = region.register(&mut tape, false, false);
            let pg = patch.register(&mut tape, true);
            let x = tape.leaf(x_t.clone());
            let mid =
                region_forward(&mut tape, &region, &rg, x, &history, &timestamps, 3, None).unwrap();
            let out = patch_forward(&mut tape, &pg, mid);
            let x0 = tape.gather(rg.poi_emb, &[target]);
            let neg = tape.gather(rg.poi_emb, &negs);
            let loss = ce_loss(&mut tape, out, x0, neg).unwrap();
            (tape, pg, loss)
        };
        let params: Vec<Matrix<f64>> =
            names.iter().map(|n| template.clone().tensor_mut(n).unwrap().clone()).collect();
        let loss_of = |ps: &[Matrix<f64>]| {
            let p = rebuild(ps);
            let (tape, _, loss) = run(&p);
            tape.value(loss).scalar()
        };
        let (tape, pg, loss) = run(&template);
        let grads = tape.backward(loss).unwrap();
        let numeric = central_difference(loss_of, &params, 1e-5);
        for (i, (name, id)) in pg.nodes().into_iter().enumerate() {
            let err = max_rel_error(grads.get(id).unwrap(), &numeric[i]);
            assert!(err < tol, "device tier {name}: rel error {err}");
            worst = worst.max(err);
            groups += 1;
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        groups == 19 && worst < tol && elapsed < 30.0,
        format!(
            "gradient checks: {groups} parameter groups across the three tiers at width 8, \
             history 5: worst relative error {worst:.2e} (< 1e-4); {elapsed:.2}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Freeze audits: shared tensors stay bitwise identical through the run.
// ---------------------------------------------------------------------------

#[test]
fn a05_freeze_audits_hold_bitwise() {
    let synth = synth_generate(
        &SynthConfig {
            users: 24,
            regions: 2,
            pois_per_region: 25,
            categories: 5,
            checkins_per_user: 30,
            pattern: SynthPattern::Markov,
            noise: 0.05,
            ..SynthConfig::default()
        },
        33,
    )
    .unwrap();
    let cfg = PipelineConfig {
        train: TrainConfig {
            t_max: 64,
            t_r: 8,
            dim: 16,
            eta: 0.01,
            max_epochs: 8,
            patience: 3,
            negatives: 8,
            seed: 5,
            ..TrainConfig::default()
        },
        regions: 2,
        ..PipelineConfig::default()
    };
    let outcome = run_pipeline(&synth.dataset, &cfg, vec![]).unwrap();
    let audits = &outcome.report.freeze_audits;
    let base_audits = audits.iter().filter(|a| a.tier == "base").count();
    let region_audits = audits.iter().filter(|a| a.tier == "region").count();
    let all_intact = audits.iter().all(|a| a.intact && a.digest_before == a.digest_after);
    verdict(
        !audits.is_empty()
            && all_intact
            && base_audits == outcome.regions.len()
            && region_audits == outcome.devices.len(),
        format!(
            "freeze audits: {} audits all bitwise intact ({base_audits} edge jobs left the \
             category tier untouched, {region_audits} device jobs left the region tier untouched)",
            audits.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Planted patterns are actually learned by the cloud and edge tiers.
// ---------------------------------------------------------------------------

#[test]
fn a06_planted_patterns_are_learned() {
    let start = Instant::now();

    // Cloud tier: a deterministic category cycle must be essentially solved.
    let synth = synth_generate(
        &SynthConfig {
            users: 48,
            regions: 1,
            pois_per_region: 25,
            categories: 5,
            checkins_per_user: 40,
            noise: 0.0,
            ..SynthConfig::default()
        },
        21,
    )
    .unwrap();
    let cfg = PipelineConfig {
        train: TrainConfig {
            t_max: 64,
            t_r: 8,
            dim: 16,
            eta: 0.01,
            max_epochs: 100,
            patience: 15,
            negatives: 8,
            seed: 7,
            ..TrainConfig::default()
        },
        regions: 1,
        ..PipelineConfig::default()
    };
    let ctx = prepare_context(&synth.dataset, &cfg).unwrap();
    let (global, _) = global_stage(&synth.dataset, &ctx, &cfg).unwrap();
    let eval_examples = next_category_examples(&ctx.splits);
    let acc = evaluate_global(&global, &eval_examples, &ctx.schedule, cfg.train.t_r, 1234)
        .unwrap()
        .accuracy;

    // Edge tier: a 50-item region with a planted position walk; rank the
    // held-out visit of every unseen (device) user among ~30 candidates.
    let synth = synth_generate(
        &SynthConfig {
            users: 60,
            regions: 1,
            pois_per_region: 50,
            categories: 5,
            checkins_per_user: 20,
            pattern: SynthPattern::Markov,
            noise: 0.05,
            ..SynthConfig::default()
        },
        51,
    )
    .unwrap();
    let cfg = PipelineConfig {
        train: TrainConfig {
            t_max: 64,
            t_r: 8,
            dim: 16,
            eta: 0.02,
            max_epochs: 60,
            patience: 10,
            negatives: 8,
            seed: 9,
            ..TrainConfig::default()
        },
        regions: 1,
        ..PipelineConfig::default()
    };
    let ctx = prepare_context(&synth.dataset, &cfg).unwrap();
    let (global2, _) = global_stage(&synth.dataset, &ctx, &cfg).unwrap();
    let split = &ctx.splits.regions[0];
    let edge = region_stage(&synth.dataset, &ctx, &cfg, Some(&global2), split).unwrap();
    let devices: Vec<DevicePatch> = split
        .device_sequences
        .iter()
        .map(|seq| {
            let (rows, ts) = edge.vocab.localize(&seq.checkins);
            let split = device_split(&rows, &ts).expect("device sequences have >= 3 events");
            DevicePatch { user: seq.user, region: seq.region, patch: None, test: split.test }
        })
        .collect();
    let report = evaluate_devices(
        &[(edge.vocab, edge.model)],
        &devices,
        &ctx.schedule,
        cfg.train.t_r,
        &[10],
        30,
        77,
    )
    .unwrap();
    let hr = hr10(&report.region_only);
    let random = 10.0 / (report.candidates as f64 + 1.0);

    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        acc >= 0.95 && hr >= 0.8 && elapsed < 300.0,
        format!(
            "planted patterns: cyclic next-category accuracy {acc:.3} (>= 0.95) over {} streams; \
             50-item region walk HR@10 {hr:.3} (>= 0.8, random ~{random:.2}) over {} unseen \
             devices with ~{} candidates; {elapsed:.0}s (< 300s)",
            eval_examples.len(),
            report.n_devices,
            report.candidates,
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. The on-device patch lifts users with planted personal preferences.
// ---------------------------------------------------------------------------

#[test]
fn a07_patch_lifts_biased_users() {
    let synth = synth_generate(
        &SynthConfig {
            users: 40,
            regions: 1,
            pois_per_region: 50,
            categories: 5,
            checkins_per_user: 80,
            pattern: SynthPattern::Markov,
            noise: 0.05,
            bias_strength: 0.7,
            bias_size: 5,
            ..SynthConfig::default()
        },
        41,
    )
    .unwrap();
    let cfg = PipelineConfig {
        train: TrainConfig {
            t_max: 64,
            t_r: 8,
            dim: 16,
            eta: 0.02,
            max_epochs: 40,
            patience: 8,
            negatives: 8,
            seed: 17,
            ..TrainConfig::default()
        },
        regions: 1,
        ..PipelineConfig::default()
    };
    let ctx = prepare_context(&synth.dataset, &cfg).unwrap();
    let (global, _) = global_stage(&synth.dataset, &ctx, &cfg).unwrap();
    let split = &ctx.splits.regions[0];
    let edge = region_stage(&synth.dataset, &ctx, &cfg, Some(&global), split).unwrap();

    // Short on-device budget: the patch must nudge, not rewrite.
    let device_cfg = PipelineConfig {
        train: TrainConfig { max_epochs: 12, patience: 4, ..cfg.train },
        ..cfg.clone()
    };
    let devices: Vec<DevicePatch> = split
        .device_sequences
        .iter()
        .map(|seq| device_stage(&edge.vocab, &edge.model, seq, &device_cfg, &ctx.schedule).unwrap().device)
        .collect();
    let n_patched = devices.iter().filter(|d| d.patch.is_some()).count();
    let report = evaluate_devices(
        &[(edge.vocab, edge.model)],
        &devices,
        &ctx.schedule,
        cfg.train.t_r,
        &[10],
        20,
        99,
    )
    .unwrap();
    let (patched, bare) = (hr10(&report.device), hr10(&report.region_only));
    verdict(
        patched >= bare + 0.05,
        format!(
            "patch benefit: HR@10 {patched:.3} with per-user patches vs {bare:.3} region-only \
             (lift {:+.1} points >= +5) across {n_patched} patched devices, paired noise",
            (patched - bare) * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Warm-starting a region from the pretrained base converges faster and
//    ranks no worse than training from scratch, on paired seeds.
// ---------------------------------------------------------------------------

#[test]
fn a08_warm_start_transfers() {
    let mut lines = Vec::new();
    let mut all_pass = true;
    for (rep, synth_seed) in [61u64, 62, 63].into_iter().enumerate() {
        let synth = synth_generate(
            &SynthConfig {
                users: 36,
                regions: 2,
                pois_per_region: 50,
                categories: 5,
                checkins_per_user: 25,
                pattern: SynthPattern::Markov,
                noise: 0.05,
                ..SynthConfig::default()
            },
            synth_seed,
        )
        .unwrap();
        let warm_cfg = PipelineConfig {
            train: TrainConfig {
                t_max: 64,
                t_r: 8,
                dim: 16,
                eta: 0.02,
                max_epochs: 60,
                patience: 10,
                negatives: 8,
                seed: 9 + rep as u64,
                ..TrainConfig::default()
            },
            regions: 2,
            edge_fraction: 0.2,
            mode: TrainMode::Pretrained,
        };
        let scratch_cfg = PipelineConfig { mode: TrainMode::Scratch, ..warm_cfg.clone() };

        let ctx = prepare_context(&synth.dataset, &warm_cfg).unwrap();
        let (global, _) = global_stage(&synth.dataset, &ctx, &warm_cfg).unwrap();
        let split = &ctx.splits.regions[0];
        let warm = region_stage(&synth.dataset, &ctx, &warm_cfg, Some(&global), split).unwrap();
        let scratch = region_stage(&synth.dataset, &ctx, &scratch_cfg, None, split).unwrap();
        let (wr, sr) = (
            warm.outcome.report.as_ref().expect("edge data exists"),
            scratch.outcome.report.as_ref().expect("edge data exists"),
        );

        // Convergence: epochs until the warm run first dips to the scratch
        // run's best validation loss, vs the epoch where scratch got there.
        let reach = wr.history.iter().find(|e| e.val_loss <= sr.best_val_loss).map(|e| e.epoch);
        let fast_enough =
            reach.is_some_and(|e| e as f64 <= 0.7 * sr.best_epoch as f64);

        // Quality: held-out HR@10 of both region models on the same unseen
        // devices and noise draws.
        let devices: Vec<DevicePatch> = split
            .device_sequences
            .iter()
            .map(|seq| {
                let (rows, ts) = warm.vocab.localize(&seq.checkins);
                let ds = device_split(&rows, &ts).expect("device sequences have >= 3 events");
                DevicePatch { user: seq.user, region: seq.region, patch: None, test: ds.test }
            })
            .collect();
        let eval = |vocab: dcpr::orchestration::RegionVocab, model: RegionModel<f32>| -> f64 {
            let report = evaluate_devices(
                &[(vocab, model)],
                &devices,
                &ctx.schedule,
                warm_cfg.train.t_r,
                &[10],
                20,
                202 + rep as u64,
            )
            .unwrap();
            hr10(&report.region_only)
        };
        let hr_warm = eval(warm.vocab, warm.model);
        let hr_scratch = eval(scratch.vocab, scratch.model);

        let pass = fast_enough && hr_warm >= hr_scratch;
        all_pass &= pass;
        lines.push(format!(
            "rep {rep}: scratch best val {:.4} at epoch {}, warm reaches it at {:?} \
             (<= {:.1}); HR@10 warm {hr_warm:.3} vs scratch {hr_scratch:.3}",
            sr.best_val_loss,
            sr.best_epoch,
            reach,
            0.7 * sr.best_epoch as f64,
        ));
    }
    verdict(
        all_pass,
        format!("warm-start transfer on 3 paired seeds: {}", lines.join(" | ")),
    );
}

// ---------------------------------------------------------------------------
// 9. Skip-step inference: ~64x fewer denoiser calls, >= 20x faster, ranking
//    quality within one point of the full-length chain.
// ---------------------------------------------------------------------------

#[test]
fn a09_skip_step_inference_is_fast_and_faithful() {
    let synth = synth_generate(
        &SynthConfig {
            users: 60,
            regions: 1,
            pois_per_region: 50,
            categories: 5,
            checkins_per_user: 20,
            pattern: SynthPattern::Markov,
            noise: 0.05,
            ..SynthConfig::default()
        },
        71,
    )
    .unwrap();
    let cfg = PipelineConfig {
        train: TrainConfig {
            t_max: 1024,
            t_r: 16,
            dim: 16,
            eta: 0.02,
            max_epochs: 40,
            patience: 8,
            negatives: 8,
            seed: 13,
            ..TrainConfig::default()
        },
        regions: 1,
        ..PipelineConfig::default()
    };
    let ctx = prepare_context(&synth.dataset, &cfg).unwrap();
    let (global, _) = global_stage(&synth.dataset, &ctx, &cfg).unwrap();
    let split = &ctx.splits.regions[0];
    let edge = region_stage(&synth.dataset, &ctx, &cfg, Some(&global), split).unwrap();

    let short = ReverseSubsequence::build(cfg.train.t_max, 16).unwrap();
    let long = ReverseSubsequence::build(cfg.train.t_max, 1024).unwrap();
    let draws = 8u64;
    let (mut hits_short, mut hits_long, mut n) = (0usize, 0usize, 0usize);
    let (mut time_short, mut time_long) = (0.0f64, 0.0f64);
    let (mut calls_short, mut calls_long) = (0usize, 0usize);
    for seq in &split.device_sequences {
        let (rows, ts) = edge.vocab.localize(&seq.checkins);
        let ds = device_split(&rows, &ts).expect("device sequences have >= 3 events");
        let candidates =
            dcpr::evaluation::select_candidates(&edge.vocab, &ds.test.history, ds.test.target, 20)
                .unwrap();
        for draw in 0..draws {
            let noise_seed = derive_seed(404, "skip-vs-full", (seq.user as u64) << 8 | draw);
            // Interleave the arms so background load hits both equally.
            let t0 = Instant::now();
            let rec_long = recommend(
                &edge.model, None, &edge.vocab, &ds.test, &ctx.schedule, &long, &candidates,
                &mut Rng::new(noise_seed),
            )
            .unwrap();
            time_long += t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let rec_short = recommend(
                &edge.model, None, &edge.vocab, &ds.test, &ctx.schedule, &short, &candidates,
                &mut Rng::new(noise_seed),
            )
            .unwrap();
            time_short += t1.elapsed().as_secs_f64();
            calls_long = rec_long.denoiser_calls;
            calls_short = rec_short.denoiser_calls;
            assert_eq!(calls_long, 1024, "full chain must invoke the denoiser once per step");
            assert_eq!(calls_short, 16, "short chain must invoke the denoiser once per step");
            hits_long += (rec_long.rank_of(ds.test.target).unwrap() <= 10) as usize;
            hits_short += (rec_short.rank_of(ds.test.target).unwrap() <= 10) as usize;
            n += 1;
        }
    }
    let (hr_short, hr_long) = (hits_short as f64 / n as f64, hits_long as f64 / n as f64);
    let ratio = time_long / time_short;
    verdict(
        ratio >= 20.0 && (hr_short - hr_long).abs() <= 0.01 + 1e-12,
        format!(
            "skip-step inference: 16 vs 1024 denoiser calls per pass (exact), wall-time ratio \
             {ratio:.1}x (>= 20x), HR@10 {hr_short:.4} vs {hr_long:.4} (gap {:.2} points <= 1) \
             over {n} paired passes",
            (hr_short - hr_long).abs() * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Ranking metrics equal a brute-force oracle; a random scorer lands at
//     the analytic hit rate.
// ---------------------------------------------------------------------------

#[test]
fn a10_ranking_metrics_match_oracles() {
    // Exact agreement on 1000 random rank assignments.
    let mut rng = Rng::new(404);
    let ranks: Vec<usize> = (0..1000).map(|_| rng.below(200) + 1).collect();
    let mut exact = true;
    for k in [1usize, 5, 10, 50] {
        let lib_hr: f64 = ranks.iter().map(|&r| hr_at_k(r, k)).sum::<f64>() / 1000.0;
        let lib_ndcg: f64 = ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / 1000.0;
        let oracle_hr = ranks.iter().filter(|&&r| r <= k).count() as f64 / 1000.0;
        let oracle_ndcg: f64 = ranks
            .iter()
            .map(|&r| if r <= k { 1.0 / ((r as f64) + 1.0).log2() } else { 0.0 })
            .sum::<f64>()
            / 1000.0;
        exact &= lib_hr == oracle_hr && lib_ndcg == oracle_ndcg;
    }

    // A scorer with no signal: rank the truth among 201 candidates by
    // random scores; HR@10 must be the analytic 10/201 up to Monte-Carlo
    // noise.
    let trials = 50_000usize;
    let mut hits = 0usize;
    for _ in 0..trials {
        let truth_score = rng.uniform();
        let better = (0..200).filter(|_| rng.uniform() > truth_score).count();
        hits += (hr_at_k(better + 1, 10) == 1.0) as usize;
    }
    let emp = hits as f64 / trials as f64;
    let p = 10.0 / 201.0;
    let tol = 4.0 * (p * (1.0 - p) / trials as f64).sqrt();
    verdict(
        exact && (emp - p).abs() <= tol,
        format!(
            "metric oracles: HR@k/NDCG@k equal brute force exactly on 1000 random ranks \
             (k in {{1, 5, 10, 50}}); random scorer HR@10 {emp:.4} vs analytic {p:.4} \
             (within {tol:.4})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. Determinism and serialization: byte-identical reports, bit-exact
//     checkpoints, job order does not matter.
// ---------------------------------------------------------------------------

#[test]
fn a11_determinism_and_serialization() {
    let synth = synth_generate(
        &SynthConfig {
            users: 24,
            regions: 2,
            pois_per_region: 25,
            categories: 5,
            checkins_per_user: 30,
            pattern: SynthPattern::Markov,
            noise: 0.05,
            ..SynthConfig::default()
        },
        83,
    )
    .unwrap();
    let cfg = PipelineConfig {
        train: TrainConfig {
            t_max: 64,
            t_r: 8,
            dim: 16,
            eta: 0.01,
            max_epochs: 6,
            patience: 3,
            negatives: 8,
            seed: 5,
            ..TrainConfig::default()
        },
        regions: 2,
        ..PipelineConfig::default()
    };
    let resolved = vec![("run.profile".to_string(), "acceptance".to_string())];

    // Same seed, same bytes.
    let one = run_pipeline(&synth.dataset, &cfg, resolved.clone()).unwrap();
    let two = run_pipeline(&synth.dataset, &cfg, resolved.clone()).unwrap();
    let json_one = serde_json::to_vec(&one.report).unwrap();
    let json_two = serde_json::to_vec(&two.report).unwrap();
    let reports_identical = json_one == json_two && one.report.to_text() == two.report.to_text();

    // Checkpoint round trip is bit-exact and canonical.
    let ck = Checkpoint::for_region(&one.regions[0].1, resolved.clone());
    let bytes = encode_checkpoint(&ck);
    let back = decode_checkpoint(&bytes).unwrap();
    let restored = region_from_checkpoint(&back).unwrap();
    let roundtrip_exact = encode_checkpoint(&back) == bytes
        && tensor_digest(&restored.tensors()) == tensor_digest(&one.regions[0].1.tensors());

    // Region jobs rerun one by one in reverse order produce bitwise the
    // same models as the batched pipeline.
    let ctx = prepare_context(&synth.dataset, &cfg).unwrap();
    let (global, _) = global_stage(&synth.dataset, &ctx, &cfg).unwrap();
    let mut order_free = true;
    for split in ctx.splits.regions.iter().rev() {
        let res = region_stage(&synth.dataset, &ctx, &cfg, Some(&global), split).unwrap();
        let from_pipeline = one
            .regions
            .iter()
            .find(|(v, _)| v.region == split.region)
            .expect("pipeline trained this region");
        order_free &=
            tensor_digest(&res.model.tensors()) == tensor_digest(&from_pipeline.1.tensors());
        order_free &= encode_checkpoint(&Checkpoint::for_region(&res.model, resolved.clone()))
            == encode_checkpoint(&Checkpoint::for_region(&from_pipeline.1, resolved.clone()));
    }
    // Device jobs likewise, reversed.
    for seq in ctx.splits.regions.iter().flat_map(|r| r.device_sequences.iter()).rev() {
        let (vocab, model) = one
            .regions
            .iter()
            .find(|(v, _)| v.region == seq.region)
            .expect("pipeline trained this region");
        let redone = device_stage(vocab, model, seq, &cfg, &ctx.schedule).unwrap();
        let from_pipeline = one
            .devices
            .iter()
            .find(|d| d.user == seq.user && d.region == seq.region)
            .expect("pipeline trained this device");
        order_free &= match (&redone.device.patch, &from_pipeline.patch) {
            (Some(a), Some(b)) => tensor_digest(&a.tensors()) == tensor_digest(&b.tensors()),
            (None, None) => true,
            _ => false,
        };
    }

    verdict(
        reports_identical && roundtrip_exact && order_free,
        format!(
            "determinism & serialization: repeat run byte-identical ({} bytes of JSON); \
             checkpoint re-encode bit-exact ({} bytes) with digest-equal restore; {} region and \
             {} device jobs rerun in reverse order match the pipeline bitwise",
            json_one.len(),
            bytes.len(),
            one.regions.len(),
            one.devices.len()
        ),
    );
}
