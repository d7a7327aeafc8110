//! Tier 1 (cloud): train the category-level model on anonymized category
//! streams and watch it learn a planted category cycle. The cloud tier
//! never sees POIs or coordinates — its training stream is category ids
//! only — yet next-category accuracy climbs far above chance.

use dcpr::cli::next_category_examples;
use dcpr::data::{synth_generate, SynthConfig};
use dcpr::evaluation::evaluate_global;
use dcpr::orchestration::{global_stage, prepare_context, PipelineConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth_cfg = SynthConfig {
        users: 48,
        regions: 1,
        pois_per_region: 25,
        categories: 5,
        checkins_per_user: 40,
        noise: 0.0,
        ..SynthConfig::default()
    };
    let synth = synth_generate(&synth_cfg, 21)?;
    let ds = &synth.dataset;

    let cfg = PipelineConfig {
        train: TrainConfig {
            t_max: 64,
            t_r: 8,
            dim: 16,
            eta: 0.01,
            max_epochs: 100,
            patience: 15,
            batch_size: 16,
            negatives: 8,
            seed: 7,
            ..TrainConfig::default()
        },
        regions: 1,
        edge_fraction: 0.7,
        ..PipelineConfig::default()
    };

    let ctx = prepare_context(ds, &cfg)?;
    println!(
        "cloud tier input: {} category sequences over {} categories",
        ctx.splits.global.len(),
        ds.n_categories()
    );

    let (model, report) = global_stage(ds, &ctx, &cfg)?;
    println!("\ntraining curve ({} train / {} val examples):", report.n_train_examples, report.n_val_examples);
    for e in report.history.iter().step_by(8) {
        println!("  epoch {:>2}  train {:.4}  val {:.4}", e.epoch, e.train_loss, e.val_loss);
    }
    println!(
        "stopped after {} epochs; kept epoch {} (val {:.4})",
        report.epochs_run, report.best_epoch, report.best_val_loss
    );
    let first = &report.history[0];
    assert!(
        report.best_val_loss < first.val_loss,
        "validation loss must improve over the initial epoch"
    );

    // Score the model as a next-category predictor on held-back streams.
    let eval_examples = next_category_examples(&ctx.splits);
    let eval = evaluate_global(&model, &eval_examples, &ctx.schedule, cfg.train.t_r, 1234)?;
    let chance = 1.0 / ds.n_categories() as f64;
    println!(
        "\nnext-category accuracy: {:.3} over {} examples (chance {chance:.3})",
        eval.accuracy, eval.n_examples
    );
    assert!(eval.accuracy >= 0.9, "the planted cycle should be easy for the cloud tier");
    Ok(())
}
