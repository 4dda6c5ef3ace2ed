use std::path::PathBuf;
use xpln::data::load_manifest;
use xpln::model::ModelConfig;
use xpln::train::{build_cache, eval_eye_level, fit, mean_label_auc, split_by_eye, TrainConfig};

fn main() {
    let data_dir = PathBuf::from(std::env::args().nth(1).unwrap());
    let out_dir = PathBuf::from(std::env::args().nth(2).unwrap());
    let epochs: usize = std::env::args().nth(3).unwrap_or("30".into()).parse().unwrap();
    let gamma: f64 = std::env::args().nth(4).unwrap_or("0.1".into()).parse().unwrap();
    std::fs::create_dir_all(&out_dir).unwrap();
    let (entries, groups) = load_manifest(&data_dir.join("manifest.csv")).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        maps: 6,
        labels: 4,
        input: (64, 64),
        in_channels: 1,
        encoder_widths: vec![8, 16, 32, 64],
        decoder_width: 8,
        seed: 1,
    };
    cfg.epochs = epochs;
    cfg.batch = 16;
    cfg.seed = 11;
    cfg.val_fraction = 0.2;
    cfg.augment = None;
    cfg.cosine_decay = true;
    cfg.weights.gamma = gamma;
    let (train_groups, val_groups) = split_by_eye(&groups, cfg.val_fraction, cfg.seed);
    let out = fit::<f32>(&cfg, &entries, &train_groups, &val_groups, Some(&out_dir), None).unwrap();
    for row in &out.history {
        println!("{row:?}");
    }
    let cache = build_cache(&entries, &cfg.preprocess).unwrap();
    let probs = eval_eye_level(&out.state.best, &val_groups, &cache).unwrap();
    let (per_label, mean) = mean_label_auc(&probs, &val_groups, cfg.model.labels);
    println!("val per-label {per_label:?} mean {mean:.4}");
}
