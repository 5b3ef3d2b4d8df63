use std::fs;
use std::path::Path;

use lorafuse::config::RunConfig;
use lorafuse::model::ToyModel;
use lorafuse::pipeline::{
    prepare_data, run_ablation, target_examples, train_all, train_base, train_unified_adapter, AblationVariant, Layout,
};

fn small(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk_scale();
    cfg.synth_docs_per_domain = 40;
    cfg.model_dim = 12;
    cfg.lora_epochs = 4;
    cfg.encoder_epochs = 4;
    cfg.clusters = 3;
    cfg.model_dir = root.join("model");
    cfg.data_dir = root.join("data");
    cfg
}

#[test]
fn desk_config_file_matches_built_in_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    assert_eq!(RunConfig::from_file(&path).unwrap(), RunConfig::desk_scale());
}

#[test]
fn saved_artifacts_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let data = prepare_data(&cfg).unwrap();
    let (artifacts, losses) = train_all(&cfg, &data).unwrap();
    assert!(losses.iter().all(|l| l.final_loss < l.initial));
    let layout = Layout::new(&cfg);
    layout.save_all(&data.domains, &artifacts).unwrap();
    assert_eq!(
        fs::read_dir(layout.adapters_dir()).unwrap().count(),
        2 * data.domains.len()
    );
    let loaded = layout.load_all().unwrap();
    assert_eq!(loaded.registry, artifacts.registry);
    assert_eq!(loaded.signatures, artifacts.signatures);
    assert_eq!(loaded.encoder.projection(), artifacts.encoder.projection());
    assert_eq!(loaded.model.embed(), artifacts.model.embed());

    let table = run_ablation(&cfg, &data, &loaded).unwrap();
    assert_eq!(table.to_csv(), run_ablation(&cfg, &data, &artifacts).unwrap().to_csv());
    let pre = table.row(AblationVariant::Pretrained).unwrap();
    assert!(pre.routing_accuracy.is_none());
    assert_eq!(table.rows.len(), AblationVariant::ALL.len());
}

#[test]
fn unified_adapter_beats_the_base_model_on_held_out_targets() {
    let cfg = RunConfig::desk_scale();
    let data = prepare_data(&cfg).unwrap();
    let (model, _): (ToyModel, _) = train_base(&cfg, &data).unwrap();
    let (unified, _) = train_unified_adapter(&cfg, &model, &data).unwrap();
    let held_out = target_examples(
        model.vocab(),
        data.splits.test.records(),
        cfg.context_window,
        cfg.doc_max_len,
    );
    let base = model.evaluate(None, &held_out).unwrap().cross_entropy;
    let tuned = model
        .evaluate(Some(&unified.dense_delta()), &held_out)
        .unwrap()
        .cross_entropy;
    assert!(tuned < base, "{tuned} vs {base}");
}
