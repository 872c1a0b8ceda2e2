use std::fs;

use normfill::trainer::{run_training, DataSource, CSV_FILE};
use normfill::TrainConfig;

fn run_with_threads(threads: usize) -> (String, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        image_size: 32,
        base_width: 8,
        depth: 3,
        rng_seed: 21,
        eval_count: 4,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| run_training(&config, &DataSource::Synthetic { count: 6 }, dir.path(), None))
        .unwrap();
    (
        fs::read_to_string(dir.path().join(CSV_FILE)).unwrap(),
        fs::read(dir.path().join("checkpoints/final.ckpt")).unwrap(),
    )
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (csv1, ck1) = run_with_threads(1);
    let (csv3, ck3) = run_with_threads(3);
    assert_eq!(csv1, csv3);
    assert!(ck1 == ck3, "checkpoints differ");
}
