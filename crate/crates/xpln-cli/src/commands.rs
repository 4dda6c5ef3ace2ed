//! The four subcommands. Each returns the library error type; `main` maps
//! the variant onto the documented exit code.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use xpln::data::{
    load_manifest, load_masks, preprocess, save_manifest, synth_generate, write_dataset,
    AugmentParams, Image, PreprocessConfig, SynthConfig, LESION_NAMES,
};
use xpln::error::{Error, Result};
use xpln::metrics::{
    pr_map, quadratic_weighted_kappa, roc_auc, severity_from_probs, lesion_map_assignment,
    ConfusionMatrix, ScoredSet,
};
use xpln::model::ModelParams;
use xpln::report::{
    extract_rule_table, generate_explanation, ColorizeConfig, emit_heatmaps,
};
use xpln::train::{build_cache, eval_eye_level, fit, split_by_eye, TrainConfig};

use crate::config::{load_keywords, FileConfig};

pub struct SynthArgs {
    pub out: PathBuf,
    pub count: usize,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    if let Some(path) = &args.config {
        let mut file = FileConfig::load(path)?;
        file.take("size", &mut cfg.size)?;
        file.take("channels", &mut cfg.channels)?;
        file.take("images_per_eye", &mut cfg.images_per_eye)?;
        file.take("noise", &mut cfg.noise)?;
        file.take("seed", &mut cfg.seed)?;
        file.finish()?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if cfg.images_per_eye == 0 || args.count % cfg.images_per_eye != 0 {
        return Err(Error::Config(format!(
            "count {} is not a multiple of images_per_eye {}",
            args.count, cfg.images_per_eye
        )));
    }
    cfg.eyes = args.count / cfg.images_per_eye;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    if cfg.eyes == 0 {
        save_manifest(&args.out.join("manifest.csv"), &[])?;
        println!("wrote 0 images to {}", args.out.display());
        return Ok(());
    }
    cfg.validate()?;
    let samples = synth_generate(&cfg)?;
    write_dataset(&args.out, &samples, &cfg)?;
    let mut per_grade = [0usize; 5];
    for sample in &samples {
        per_grade[sample.grade] += 1;
    }
    println!(
        "wrote {} images ({} eyes) to {}; per-grade counts {:?}",
        samples.len(),
        cfg.eyes,
        args.out.display(),
        per_grade
    );
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub gamma: Option<f64>,
    pub threads: Option<usize>,
    pub deterministic: bool,
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut size = cfg.model.input.0;
    let mut augment = true;
    if let Some(path) = &args.config {
        let mut file = FileConfig::load(path)?;
        file.take("epochs", &mut cfg.epochs)?;
        file.take("batch", &mut cfg.batch)?;
        file.take("lr", &mut cfg.adam.lr)?;
        file.take("beta1", &mut cfg.adam.beta1)?;
        file.take("beta2", &mut cfg.adam.beta2)?;
        file.take("eps", &mut cfg.adam.eps)?;
        file.take("alpha", &mut cfg.weights.alpha)?;
        file.take("beta", &mut cfg.weights.beta)?;
        file.take("gamma", &mut cfg.weights.gamma)?;
        file.take("seed", &mut cfg.seed)?;
        file.take("val_fraction", &mut cfg.val_fraction)?;
        file.take("checkpoint_every", &mut cfg.checkpoint_every)?;
        file.take("cosine_decay", &mut cfg.cosine_decay)?;
        file.take("threads", &mut cfg.threads)?;
        file.take("augment", &mut augment)?;
        file.take("maps", &mut cfg.model.maps)?;
        file.take("labels", &mut cfg.model.labels)?;
        file.take("size", &mut size)?;
        file.take_list("widths", &mut cfg.model.encoder_widths)?;
        file.take("decoder_width", &mut cfg.model.decoder_width)?;
        file.take("model_seed", &mut cfg.model.seed)?;
        file.finish()?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        cfg.adam.lr = lr;
    }
    if let Some(gamma) = args.gamma {
        cfg.weights.gamma = gamma;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    cfg.deterministic |= args.deterministic;
    cfg.model.input = (size, size);
    cfg.preprocess.target = size;
    cfg.augment = if augment { Some(AugmentParams::default()) } else { None };
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let manifest = args.data.join("manifest.csv");
    if !manifest.exists() {
        return Err(Error::Config(format!("{}: manifest not found", manifest.display())));
    }
    let cfg = train_config(args)?;
    cfg.validate()?;
    let (entries, groups) = load_manifest(&manifest)?;
    let (train_groups, val_groups) = split_by_eye(&groups, cfg.val_fraction, cfg.seed);
    let out_dir = match args.out.parent() {
        Some(p) if p.as_os_str().is_empty() => Path::new("."),
        Some(p) => p,
        None => Path::new("."),
    };
    let out = fit::<f32>(&cfg, &entries, &train_groups, &val_groups, Some(out_dir), None)?;
    if args.out.file_name().map(|n| n != "best.xpln").unwrap_or(true) {
        out.state.best.save(&args.out)?;
    }
    println!(
        "trained {} epochs on {} eyes ({} validation); best mean validation AUC {:.4} at epoch {}",
        cfg.epochs,
        train_groups.len(),
        val_groups.len(),
        out.state.best_auc,
        out.state.best_epoch
    );
    Ok(())
}

pub struct EvalArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub report: PathBuf,
    pub pixel_masks: bool,
}

fn curve_csv(path: &Path, header: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for (x, y) in points {
        text.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let params = ModelParams::<f32>::load(&args.model)?;
    let cfg = params.config().clone();
    let manifest = args.data.join("manifest.csv");
    if !manifest.exists() {
        return Err(Error::Config(format!("{}: manifest not found", manifest.display())));
    }
    let (entries, groups) = load_manifest(&manifest)?;
    let pre = PreprocessConfig { target: cfg.input.0, ..PreprocessConfig::default() };
    let cache = build_cache(&entries, &pre)?;
    let eye_probs = eval_eye_level(&params, &groups, &cache)?;

    let report_dir = args.report.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = report_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let side = |name: String| match report_dir {
        Some(dir) => dir.join(name),
        None => PathBuf::from(name),
    };

    let mut per_label = Vec::new();
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    for n in 0..cfg.labels {
        let scores: Vec<f64> = eye_probs.iter().map(|p| p[n]).collect();
        let truth: Vec<bool> = groups.iter().map(|g| g.grade > n).collect();
        let set = ScoredSet::new(scores, truth)?;
        let (auc, ap) = match (roc_auc(&set), pr_map(&set)) {
            (Ok((roc, auc)), Ok((pr, ap))) => {
                curve_csv(&side(format!("roc_label{}.csv", n + 1)), "fpr,tpr", &roc)?;
                curve_csv(&side(format!("pr_label{}.csv", n + 1)), "recall,precision", &pr)?;
                auc_sum += auc;
                auc_count += 1;
                (Some(auc), Some(ap))
            }
            _ => {
                eprintln!("warning: label {} has one class only; AUC undefined", n + 1);
                (None, None)
            }
        };
        per_label.push(json!({ "label": n + 1, "auc": auc, "map": ap }));
    }
    let mean_auc = (auc_count > 0).then(|| auc_sum / auc_count as f64);

    let cutoffs = params.cutoffs.clone().unwrap_or_else(|| vec![0.5; cfg.labels]);
    let pred: Vec<usize> =
        eye_probs.iter().map(|p| severity_from_probs(p, &cutoffs)).collect();
    let truth: Vec<usize> = groups.iter().map(|g| g.grade).collect();
    let cm = ConfusionMatrix::from_pairs(&pred, &truth, cfg.labels + 1)?;
    let kappa = match quadratic_weighted_kappa(&cm) {
        Ok(k) => Some(k),
        Err(e) => {
            eprintln!("warning: {e}");
            None
        }
    };

    let mut doc = json!({
        "labels": cfg.labels,
        "eyes": groups.len(),
        "per_label": per_label,
        "mean_auc": mean_auc,
        "accuracy": cm.accuracy(),
        "kappa": kappa,
        "cutoffs": cutoffs,
    });

    if args.pixel_masks {
        match pixel_metrics(&params, &entries, &cache)? {
            Some(pixel) => {
                doc["pixel"] = pixel;
            }
            None => eprintln!(
                "warning: no mask files found beside the images; image-level metrics only"
            ),
        }
    }

    std::fs::write(&args.report, serde_json::to_string_pretty(&doc).unwrap())
        .map_err(|e| Error::io(&args.report, e))?;
    let rules = extract_rule_table(&params);
    let rules_path = side("rules.csv".into());
    std::fs::write(&rules_path, rules.to_csv()).map_err(|e| Error::io(&rules_path, e))?;
    match mean_auc {
        Some(auc) => println!(
            "evaluated {} eyes: mean label AUC {auc:.4}, accuracy {:.4}",
            groups.len(),
            cm.accuracy()
        ),
        None => println!("evaluated {} eyes: AUC undefined on this split", groups.len()),
    }
    Ok(())
}

/// Pool every masked image's maps and run the channel-assignment analysis;
/// `None` when no image has a full mask set.
fn pixel_metrics(
    params: &ModelParams<f32>,
    entries: &[xpln::data::ManifestEntry],
    cache: &[Image],
) -> Result<Option<serde_json::Value>> {
    let cfg = params.config();
    let (h, w) = cfg.input;
    let mut stacks: Vec<Vec<f64>> = Vec::new();
    let mut masks: Vec<Vec<Vec<bool>>> = vec![Vec::new(); LESION_NAMES.len()];
    let mut skipped = 0usize;
    for (i, entry) in entries.iter().enumerate() {
        let Some(mask_images) = load_masks(&entry.path)? else {
            continue;
        };
        if mask_images.iter().any(|m| m.height != h || m.width != w) {
            skipped += 1;
            continue;
        }
        let maps = params.forward_segment(&cache[i].to_tensor())?;
        stacks.push(maps.data().iter().map(|&v| f64::from(v)).collect());
        for (t, mask) in mask_images.iter().enumerate() {
            masks[t].push(mask.data.iter().map(|&v| v > 0.5).collect());
        }
    }
    if stacks.is_empty() {
        return Ok(None);
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} images whose masks mismatch the model size");
    }
    let stack_refs: Vec<&[f64]> = stacks.iter().map(Vec::as_slice).collect();
    let mask_refs: Vec<Vec<&[bool]>> = masks
        .iter()
        .map(|per_type| per_type.iter().map(Vec::as_slice).collect())
        .collect();
    let assignment =
        lesion_map_assignment(&stack_refs, (cfg.maps, h, w), &mask_refs)?;

    // pooled foreground scores against the union mask, for the PR view
    let plane = h * w;
    let mut scores = Vec::with_capacity(stacks.len() * plane);
    let mut union = Vec::with_capacity(stacks.len() * plane);
    for (s, stack) in stacks.iter().enumerate() {
        for i in 0..plane {
            scores.push(1.0 - stack[i]);
            union.push((0..masks.len()).any(|t| masks[t][s][i]));
        }
    }
    let combined_map = match ScoredSet::new(scores, union).and_then(|set| pr_map(&set)) {
        Ok((_, ap)) => Some(ap),
        Err(e) => {
            eprintln!("warning: combined precision-recall undefined: {e}");
            None
        }
    };

    let per_type: Vec<serde_json::Value> = assignment
        .per_type
        .iter()
        .enumerate()
        .map(|(t, slot)| match slot {
            Some((channel, auc)) => json!({
                "lesion": LESION_NAMES[t],
                "channel": channel + 1,
                "auc": auc,
            }),
            None => json!({ "lesion": LESION_NAMES[t], "channel": null, "auc": null }),
        })
        .collect();
    Ok(Some(json!({
        "images": stacks.len(),
        "per_type": per_type,
        "combined_auc": assignment.combined_auc,
        "combined_map": combined_map,
    })))
}

pub struct ReportArgs {
    pub model: PathBuf,
    pub image: PathBuf,
    pub out: PathBuf,
    pub keywords: Option<PathBuf>,
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let params = ModelParams::<f32>::load(&args.model)?;
    let image = Image::load(&args.image)?;
    let pre = PreprocessConfig {
        target: params.config().input.0,
        ..PreprocessConfig::default()
    };
    let processed = preprocess(&image, &pre)?;
    let outputs = params.forward_full(&processed.to_tensor())?;
    let keywords: Option<BTreeMap<usize, String>> =
        args.keywords.as_deref().map(load_keywords).transpose()?;
    let report = generate_explanation(&outputs, &params, keywords.as_ref());
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    emit_heatmaps(&outputs.maps, &args.out, &ColorizeConfig::default())?;
    let json_path = args.out.join("report.json");
    std::fs::write(&json_path, report.to_json()).map_err(|e| Error::io(&json_path, e))?;
    let text_path = args.out.join("sentences.txt");
    let mut text = report.sentences.join("\n");
    text.push('\n');
    std::fs::write(&text_path, &text).map_err(|e| Error::io(&text_path, e))?;
    print!("{text}");
    Ok(())
}
