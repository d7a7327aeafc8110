//! Tier 2 (edge): specialize the cloud model to one geographic region.
//! The edge job copies the trained category table, seeds each POI's
//! embedding from its category row, then trains only the region-local
//! tensors — an audit digest proves the cloud weights never moved.

use dcpr::data::{synth_generate, SynthConfig, SynthPattern};
use dcpr::orchestration::{
    global_stage, prepare_context, region_stage, tensor_digest, PipelineConfig, TrainConfig,
    TrainMode,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth_cfg = SynthConfig {
        users: 16,
        regions: 2,
        pois_per_region: 25,
        categories: 5,
        checkins_per_user: 40,
        pattern: SynthPattern::Markov,
        noise: 0.05,
        ..SynthConfig::default()
    };
    let synth = synth_generate(&synth_cfg, 31)?;
    let ds = &synth.dataset;

    let cfg = PipelineConfig {
        train: TrainConfig {
            t_max: 64,
            t_r: 8,
            dim: 16,
            eta: 0.02,
            max_epochs: 60,
            patience: 10,
            batch_size: 16,
            negatives: 8,
            seed: 9,
            ..TrainConfig::default()
        },
        regions: 2,
        edge_fraction: 0.7,
        mode: TrainMode::Pretrained,
    };

    let ctx = prepare_context(ds, &cfg)?;
    let (global, _) = global_stage(ds, &ctx, &cfg)?;
    let cloud_digest = tensor_digest(&global.tensors());

    let split = &ctx.splits.regions[0];
    println!(
        "edge job for region {}: {} POIs, {} edge sequences",
        split.region,
        ctx.region_map.members(split.region).len(),
        split.edge_sequences.len()
    );

    let result = region_stage(ds, &ctx, &cfg, Some(&global), split)?;
    let report = result.outcome.report.as_ref().expect("edge sequences exist, so the stage trains");
    println!("\nregion-local training curve:");
    for e in report.history.iter().step_by(5) {
        println!("  epoch {:>2}  train {:.4}  val {:.4}", e.epoch, e.train_loss, e.val_loss);
    }
    println!("kept epoch {} (val {:.4})", report.best_epoch, report.best_val_loss);

    // The warm start: every POI embedding began as a copy of its category
    // row, and training moved it. Both facts are visible in the tensors.
    let m = &result.model;
    let mut moved = 0usize;
    for (row, poi) in m.pois.iter().enumerate() {
        let cat_row = global.category_emb.row(poi.category_row);
        if m.poi_emb.row(row) != cat_row {
            moved += 1;
        }
    }
    println!("\nPOI embeddings that moved off their category seed: {moved}/{}", m.n_pois());
    assert!(moved > 0, "training must move the local tensors");

    // The freeze contract: the cloud tensors inside the region model are
    // bit-identical to the cloud model we passed in.
    for audit in &result.audits {
        println!(
            "freeze audit [{}] tier={}: intact={}",
            audit.stage, audit.tier, audit.intact
        );
        assert!(audit.intact, "the edge stage must not touch the cloud tier");
    }
    assert_eq!(tensor_digest(&m.base.tensors()), cloud_digest);
    assert_eq!(tensor_digest(&global.tensors()), cloud_digest);

    // Contrast: the same job in from-scratch mode gets no cloud model at
    // all (and therefore no freeze guarantee to audit).
    let scratch_cfg = PipelineConfig { mode: TrainMode::Scratch, ..cfg.clone() };
    let scratch = region_stage(ds, &ctx, &scratch_cfg, None, split)?;
    let s_report = scratch.outcome.report.as_ref().unwrap();
    println!(
        "\nwarm start best val {:.4} at epoch {} | scratch best val {:.4} at epoch {}",
        report.best_val_loss, report.best_epoch, s_report.best_val_loss, s_report.best_epoch
    );
    Ok(())
}
