use pmam::config::RunConfig;
use pmam::pipeline::{self, conditions, Grid, Paths};
use pmam::proto::PrototypeKind;

fn tiny(out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig {
        iterations: 2,
        seeds: vec![2, 3],
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.data.strong_clips = 3;
    cfg.data.weak_clips = 3;
    cfg.data.unlabeled_clips = 4;
    cfg.data.validation_clips = 3;
    cfg.data.frames = 40;
    cfg.data.min_duration = 5;
    cfg.data.max_duration = 15;
    cfg.encoder.max_frames = 40;
    cfg.pretrain.epochs = 1;
    cfg.finetune.epochs = 2;
    cfg.finetune.freeze_epochs = 1;
    cfg
}

#[test]
fn table_grid_has_iteration_rows_and_ablations() {
    let labels: Vec<String> = conditions(Grid::Tables, 2).iter().map(|c| c.label()).collect();
    assert_eq!(
        labels,
        ["iter0", "pmam_iter1", "pmam_iter2", "no_mask_iter2", "kmeans_iter2", "infonce_iter2"]
    );
    assert_eq!(conditions(Grid::Tables, 0).len(), 1);
}

#[test]
fn pretraining_writes_every_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let paths = Paths::new(dir.path());
    let ds = pipeline::gen_data(&cfg, &paths.data()).unwrap();
    let run = pipeline::run_pretrain(&cfg, &ds, 1, Some(&paths)).unwrap();
    assert_eq!(run.iterations.len(), 3);
    assert!(run.iterations[0].logs.is_empty());
    for i in 0..=2 {
        assert!(paths.checkpoint(i).exists());
        assert!(paths.pseudo_labels(i).is_dir());
    }
    assert_ne!(run.iterations[1].store.value_hash(), run.iterations[2].store.value_hash());
    let reopened = pipeline::open_dataset(&cfg, &paths.data()).unwrap();
    assert_eq!(reopened.clips.len(), ds.clips.len());
}

#[test]
fn kmeans_pretraining_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.prototypes.kind = PrototypeKind::Kmeans;
    cfg.iterations = 1;
    let ds = pipeline::gen_data(&cfg, &dir.path().join("data")).unwrap();
    let run = pipeline::run_pretrain(&cfg, &ds, 0, None).unwrap();
    let hard = &run.iterations[1].estep.train_labels[0].gamma;
    assert!(hard.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn experiment_fills_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ds = pipeline::gen_data(&cfg, &dir.path().join("data")).unwrap();
    let grid = conditions(Grid::Tables, 2);
    let mut lines = 0;
    let out = dir.path().join("experiment");
    let table = pipeline::run_experiment(&cfg, &ds, &grid, &cfg.seeds, Some(&out), |_| lines += 1).unwrap();
    assert_eq!(lines, grid.len() * cfg.seeds.len());
    assert!(table.cells.iter().flatten().all(|c| c.is_ok()));
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), grid.len() + 1);
    for c in &grid {
        let m = table.median_of(&c.label()).unwrap();
        assert!((0.0..=1.0).contains(&m.frame_macro_f1));
    }
}
