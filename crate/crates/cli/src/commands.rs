use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::{json, Value};

use mp3d::config::{sha256_hex, ExperimentConfig};
use mp3d::data::{generate_rgb, generate_synthetic, read_dataset, read_gt_csv, write_dataset};
use mp3d::eval::{evaluate, read_predictions_csv, write_predictions_csv, GroundTruth};
use mp3d::experiment::{build_model, predict_key_slices, standardize, training_samples};
use mp3d::pretrain::{load_weights, simulate_pretraining, transfer_depth, TransferMode, WeightStore};
use mp3d::profiler::report_table;
use mp3d::train::{read_loss_csv, smoothed, steps_to_reach, train as run_train, write_loss_csv, LossRecord};

/// Honours `MP3D_NUM_THREADS` by sizing the global pool.
pub fn configure_threads() -> Option<usize> {
    let n = std::env::var("MP3D_NUM_THREADS").ok()?.trim().parse::<usize>().ok().filter(|&n| n > 0)?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    Some(n)
}

struct Loaded {
    cfg: ExperimentConfig,
    raw: Vec<u8>,
}

fn load_config(path: &Path) -> Result<Loaded> {
    let raw = fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let text = std::str::from_utf8(&raw).with_context(|| format!("{} is not UTF-8", path.display()))?;
    let cfg = ExperimentConfig::from_json(text).with_context(|| format!("invalid config {}", path.display()))?;
    Ok(Loaded { cfg, raw })
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

/// Writes the config verbatim and a manifest recording its hash plus the
/// hashes of `files` (relative to `out`).
fn write_manifest(out: &Path, raw_config: &[u8], files: &[&str], mut fields: Value) -> Result<()> {
    fs::write(out.join("config.json"), raw_config)?;
    let hashes: BTreeMap<&str, String> = files.iter().map(|f| Ok((*f, digest(&out.join(f))?))).collect::<Result<_>>()?;
    let obj = fields.as_object_mut().expect("manifest fields are an object");
    obj.insert("config_sha256".into(), json!(sha256_hex(raw_config)));
    obj.insert("files".into(), json!(hashes));
    fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&fields)?)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Value> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn synth_gen(config: &Path, out: &Path) -> Result<()> {
    let Loaded { cfg, raw } = load_config(config)?;
    create_dir(out)?;
    let ds = generate_synthetic(&cfg.data)?;
    write_dataset(out, &ds.volumes)?;
    let mut files: Vec<String> = ds.volumes.iter().flat_map(|v| [format!("{}.f32", v.id), format!("{}.json", v.id)]).collect();
    files.push("gt.csv".into());
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    let fields = json!({
        "command": "synth-gen",
        "generator_seed": cfg.data.seed,
        "volumes": ds.volumes.len(),
        "key_slices": ds.volumes.iter().map(|v| v.key_slices.len()).sum::<usize>(),
        "separability": ds.stats,
    });
    write_manifest(out, &raw, &names, fields)?;
    info!("wrote {} volumes to {}", ds.volumes.len(), out.display());
    Ok(())
}

/// Trains with `cfg` and writes weights, losses and provenance into `out`.
fn train_into(
    cfg: &ExperimentConfig,
    raw: &[u8],
    data: &Path,
    init: Option<&Path>,
    mode: TransferMode,
    out: &Path,
    threads: Option<usize>,
) -> Result<()> {
    create_dir(out)?;
    let volumes = standardize(read_dataset(data).with_context(|| format!("reading dataset {}", data.display()))?);
    let samples = training_samples(cfg, &volumes)?;
    let mut model = build_model(cfg)?;
    if let Some(path) = init {
        let store = WeightStore::load(path)?;
        let (loaded, report) = transfer_depth(&store, model, mode).with_context(|| format!("initialising from {}", path.display()))?;
        info!("initialised from {}: {} matched, {} missing", path.display(), report.matched.len(), report.missing.len());
        model = loaded;
    }
    let mut train_cfg = cfg.train.clone();
    if let Some(n) = threads {
        train_cfg.loader_workers = train_cfg.loader_workers.min(n);
    }
    let steps_per_epoch = samples.len().div_ceil(train_cfg.batch_size);
    info!("training on {} windows, {} steps per epoch", samples.len(), steps_per_epoch);
    let outcome = run_train(model, &samples, &train_cfg, |r| {
        if r.step % steps_per_epoch.max(1) == 0 {
            info!("step {} loss {:.4} (cls {:.4}, reg {:.4})", r.step, r.loss_total, r.loss_cls, r.loss_reg);
        }
    })?;
    WeightStore::from_model(&outcome.model).save(&out.join("final.mp3dw"))?;
    WeightStore::from_model(&outcome.best).save(&out.join("best.mp3dw"))?;
    write_loss_csv(&out.join("loss.csv"), &outcome.losses)?;
    let data_manifest = data.join("manifest.json");
    let fields = json!({
        "command": "train",
        "seed": cfg.train.seed,
        "data_manifest_sha256": if data_manifest.is_file() { Some(digest(&data_manifest)?) } else { None },
        "init_sha256": init.map(digest).transpose()?,
        "init_mode": init.map(|_| match mode { TransferMode::Full => "full", TransferMode::Backbone => "backbone" }),
        "samples": samples.len(),
        "epochs": cfg.train.epochs,
        "steps": outcome.losses.len(),
        "steps_per_epoch": steps_per_epoch,
        "best_epoch": outcome.best_epoch,
        "epoch_losses": outcome.epoch_losses,
    });
    write_manifest(out, raw, &["final.mp3dw", "best.mp3dw", "loss.csv"], fields)
}

pub fn train(config: &Path, data: &Path, init: Option<&Path>, mode: TransferMode, out: &Path, threads: Option<usize>) -> Result<()> {
    let Loaded { cfg, raw } = load_config(config)?;
    train_into(&cfg, &raw, data, init, mode, out, threads)
}

pub fn sweep(config: &Path, data: &Path, fractions: &[f64], init: Option<&Path>, out: &Path, threads: Option<usize>) -> Result<()> {
    let Loaded { cfg, raw } = load_config(config)?;
    create_dir(out)?;
    fs::write(out.join("config.json"), &raw)?;
    for &f in fractions {
        let mut run = cfg.clone();
        run.train.dataset_fraction = f;
        run.validate()?;
        let dir = out.join(format!("frac_{:03}", (f * 100.0).round() as usize));
        let run_raw = serde_json::to_vec_pretty(&run)?;
        info!("fraction {f}: {}", dir.display());
        train_into(&run, &run_raw, data, init, TransferMode::Full, &dir, threads)?;
    }
    Ok(())
}

pub fn eval(weights: &Path, data: &Path, config: Option<&Path>, predictions: Option<&Path>, out: &Path) -> Result<()> {
    let config_path: PathBuf = match config {
        Some(p) => p.to_path_buf(),
        None => weights.parent().unwrap_or(Path::new(".")).join("config.json"),
    };
    let Loaded { cfg, .. } = load_config(&config_path)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let pred_path = match predictions {
        Some(p) => p.to_path_buf(),
        None => {
            let mut model = build_model(&cfg)?;
            let store = WeightStore::load(weights)?;
            load_weights(&mut model, &store, true).with_context(|| format!("loading {}", weights.display()))?;
            let volumes = standardize(read_dataset(data)?);
            let preds = predict_key_slices(&model, &volumes)?;
            let path = out.with_file_name("predictions.csv");
            write_predictions_csv(&path, &preds)?;
            path
        }
    };
    let preds = read_predictions_csv(&pred_path)?;
    let gts: Vec<GroundTruth> = read_gt_csv(&data.join("gt.csv"))?.iter().map(GroundTruth::from).collect();
    let report = evaluate(&preds, &gts, &cfg.eval)?;
    report.write_json(out)?;
    fs::write(out.with_extension("csv"), report.summary_csv())?;
    info!("AP@0.5 {:.4}, sensitivities {:?}", report.ap_at_05, report.sensitivity_at_fps);
    Ok(())
}

pub fn profile(config: &Path, slices: Option<Vec<usize>>, out: &Path) -> Result<()> {
    let Loaded { mut cfg, .. } = load_config(config)?;
    if let Some(s) = slices {
        cfg.profile.slices = s;
        cfg.validate()?;
    }
    let archs = cfg.profile_architectures()?;
    let r = cfg.profile.resolution;
    let table = report_table(&archs, &cfg.profile.slices, (r, r), cfg.profile.convention)?;
    fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    print!("{table}");
    Ok(())
}

pub fn pretrain_sim(config: &Path, out: &Path, threads: Option<usize>) -> Result<()> {
    let Loaded { cfg, raw } = load_config(config)?;
    create_dir(out)?;
    let mut three = cfg.clone();
    three.backbone.input_slices = 3;
    three.validate()?;
    let images = generate_rgb(&cfg.data)?;
    let mut train_cfg = cfg.train.clone();
    if let Some(n) = threads {
        train_cfg.loader_workers = train_cfg.loader_workers.min(n);
    }
    let (store, outcome) = simulate_pretraining(&images, build_model(&three)?, &train_cfg, |_| {})?;
    store.save(&out.join("pretrained.mp3dw"))?;
    write_loss_csv(&out.join("loss.csv"), &outcome.losses)?;
    let fields = json!({
        "command": "pretrain-sim",
        "seed": cfg.train.seed,
        "images": images.len(),
        "epochs": cfg.train.epochs,
        "steps": outcome.losses.len(),
        "epoch_losses": outcome.epoch_losses,
    });
    write_manifest(out, &raw, &["pretrained.mp3dw", "loss.csv"], fields)?;
    info!("pre-trained weights in {}", out.join("pretrained.mp3dw").display());
    Ok(())
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn compare(a: &Path, b: &Path, out: &Path) -> Result<()> {
    let (ma, mb) = (read_manifest(a)?, read_manifest(b)?);
    for key in ["command", "data_manifest_sha256", "steps", "steps_per_epoch"] {
        if ma.get(key) != mb.get(key) {
            bail!("runs disagree on `{key}`: {} vs {}", ma.get(key).unwrap_or(&Value::Null), mb.get(key).unwrap_or(&Value::Null));
        }
    }
    let (la, lb) = (read_loss_csv(&a.join("loss.csv"))?, read_loss_csv(&b.join("loss.csv"))?);
    let window = ma["steps_per_epoch"].as_u64().unwrap_or(1) as usize;
    let (sa, sb) = (smoothed(&la, window), smoothed(&lb, window));
    let (na, nb) = (run_name(a), run_name(b));
    let mut csv = format!("step,{na}_loss_total,{na}_smoothed,{nb}_loss_total,{nb}_smoothed\n");
    for (i, (ra, rb)) in la.iter().zip(&lb).enumerate() {
        csv.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6}\n", ra.step, ra.loss_total, sa[i], rb.loss_total, sb[i]));
    }
    fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    let reach = |l: &[LossRecord], target: Option<&f64>| target.and_then(|&t| steps_to_reach(l, window, t));
    let summary = json!({
        "window": window,
        "steps": la.len(),
        "final_smoothed": { &na: sa.last(), &nb: sb.last() },
        format!("{na}_steps_to_{nb}_final"): reach(&la, sb.last()),
        format!("{nb}_steps_to_{na}_final"): reach(&lb, sa.last()),
    });
    fs::write(out.with_extension("json"), serde_json::to_vec_pretty(&summary)?)?;
    info!("{summary}");
    Ok(())
}
