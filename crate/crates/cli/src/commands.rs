//! Subcommand bodies. Each returns `Err(Failure::Usage)` for a missing input
//! artifact and `Err(Failure::Run)` for anything the library rejects.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use hdvnet::density::{
    calibrate_states, density_histogram, density_profile, inherent_state, DensityOptions, StateThresholds,
};
use hdvnet::eval::{class_names, generate_scene, mine_spec, per_density_report, MetricsTable, SceneSpec};
use hdvnet::infer::{infer_scene, InferenceMode};
use hdvnet::model::{HdvConfig, HdvNet, Scene};
use hdvnet::nn::ParamStore;
use hdvnet::pcio::{default_palette, export_colored, load_cloud, save_cloud, Format, PointCloud};
use hdvnet::subsample::{build_pyramid, default_counts, PyramidSummary};
use hdvnet::train::{finetune_final, train_backbone, TrainSummary};
use serde::{Deserialize, Serialize};

use crate::config::{write_artifact, write_text, PipelineConfig, Stamp, TableFormat};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

pub type Outcome = Result<(), Failure>;

/// Fails with a usage error naming `what` when `path` does not exist.
fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("missing {what}: {}", path.display())))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "cloud".into(), |s| s.to_string_lossy().into_owned())
}

fn density_options(k: usize, delta_max: usize) -> DensityOptions {
    DensityOptions {
        k,
        delta_max,
        jitter_duplicates: true,
    }
}

fn load_clouds(cfg: &PipelineConfig, names: &[String], what: &str) -> Result<Vec<(PathBuf, PointCloud)>, Failure> {
    if names.is_empty() {
        return Err(Failure::Usage(format!("config lists no {what} scenes")));
    }
    let dir = cfg.data_dir();
    let mut out = Vec::new();
    for n in names {
        let p = dir.join(n);
        require(&p, &format!("{what} cloud"))?;
        let cloud = load_cloud(&p, Format::from_path(&p))?;
        out.push((p, cloud));
    }
    Ok(out)
}

fn load_thresholds(cfg: &PipelineConfig) -> Result<StateThresholds, Failure> {
    let p = cfg.thresholds();
    require(&p, "thresholds (run `hdvnet calibrate` first)")?;
    Ok(StateThresholds::load(&p)?)
}

fn prepare(clouds: Vec<(PathBuf, PointCloud)>, th: &StateThresholds) -> Result<Vec<Scene>, Failure> {
    clouds
        .into_iter()
        .map(|(p, c)| Scene::prepare(c, th).with_context(|| format!("preparing {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(Failure::Run)
}

pub fn gen_scene(cfg: &PipelineConfig) -> Outcome {
    let stamp = Stamp::new("gen-scene", cfg);
    let s = &cfg.scenes;
    let custom = match &s.spec {
        Some(p) => {
            require(p, "scene spec")?;
            Some(SceneSpec::load(p)?)
        }
        None => None,
    };
    let dir = cfg.data_dir();
    for (i, name) in s.train.iter().chain(&s.test).enumerate() {
        let spec = custom
            .clone()
            .unwrap_or_else(|| mine_spec(i as u64, s.rows, s.cols, s.min_points));
        let cloud = generate_scene(&spec, cfg.seed.wrapping_add(i as u64))?;
        let path = dir.join(name);
        write_artifact(&path, Some(&stamp), |tmp| Ok(save_cloud(&cloud, tmp, Format::from_path(&path))?))?;
        eprintln!("{}: {} points", path.display(), cloud.n());
    }
    Ok(())
}

pub fn calibrate(cfg: &PipelineConfig) -> Outcome {
    let clouds = load_clouds(cfg, &cfg.scenes.train, "training")?;
    let opts = DensityOptions {
        jitter_duplicates: true,
        ..DensityOptions::default()
    };
    let profiles = clouds
        .iter()
        .map(|(_, c)| density_profile(c, &opts))
        .collect::<hdvnet::Result<Vec<_>>>()?;
    let n1 = cfg.model.counts[0] as f64;
    let fractions = cfg.model.counts.map(|c| c as f64 / n1);
    let th = calibrate_states(&profiles, &fractions)?;
    let path = cfg.thresholds();
    write_artifact(&path, Some(&Stamp::new("calibrate", cfg)), |tmp| Ok(th.save(tmp)?))?;
    println!("{}", serde_json::to_string(&th.t)?);
    Ok(())
}

#[derive(Serialize)]
struct PyramidFile {
    stamp: Stamp,
    cloud: String,
    summary: PyramidSummary,
    levels: Vec<Vec<usize>>,
}

pub fn subsample(cfg: &PipelineConfig, cloud: Option<&Path>, n1: Option<usize>) -> Outcome {
    let path = match cloud {
        Some(p) => p.to_path_buf(),
        None => cfg
            .scenes
            .train
            .first()
            .map(|n| cfg.data_dir().join(n))
            .ok_or_else(|| Failure::Usage("no --cloud given and no training scenes configured".into()))?,
    };
    require(&path, "cloud")?;
    let pc = load_cloud(&path, Format::from_path(&path))?;
    let th = load_thresholds(cfg)?;
    let profile = density_profile(&pc, &density_options(th.k_used, th.delta_max))?;
    let counts = n1.map_or(cfg.model.counts, default_counts);
    let p = build_pyramid(&pc, &profile.group, &counts, cfg.model.k_neighbors, cfg.seed)?;
    let stamp = Stamp::new("subsample", cfg);
    let file = PyramidFile {
        stamp: stamp.clone(),
        cloud: path.display().to_string(),
        summary: PyramidSummary::from(&p),
        levels: p.levels.iter().map(|l| l.indices.clone()).collect(),
    };
    let out = cfg.out_dir.join(format!("{}.pyramid.json", stem(&path)));
    write_text(&out, Some(&stamp), &serde_json::to_string(&file)?)?;
    println!("{}", serde_json::to_string(&file.summary)?);
    Ok(())
}

/// What a checkpoint carries besides its tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stamp: Stamp,
    pub stage: String,
    pub model: HdvConfig,
    pub thresholds: StateThresholds,
    pub summary: TrainSummary,
}

fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> anyhow::Result<()> {
    let value = serde_json::to_value(meta)?;
    write_artifact(path, None, |tmp| Ok(store.save(tmp, &value)?))
}

fn load_checkpoint(path: &Path, what: &str) -> Result<(ParamStore, CheckpointMeta), Failure> {
    require(path, what)?;
    let (store, meta) = ParamStore::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).with_context(|| format!("checkpoint metadata in {}", path.display()))?;
    Ok((store, meta))
}

pub fn train(cfg: &PipelineConfig) -> Outcome {
    let th = load_thresholds(cfg)?;
    let scenes = prepare(load_clouds(cfg, &cfg.scenes.train, "training")?, &th)?;
    let (net, mut store) = HdvNet::new(&cfg.model, cfg.seed)?;
    let mut log = Vec::new();
    let summary = train_backbone(&net, &mut store, &scenes, &cfg.train, cfg.seed, &mut log)?;
    let stamp = Stamp::new("train", cfg);
    write_artifact(&cfg.out_dir.join("train_log.jsonl"), Some(&stamp), |tmp| Ok(fs::write(tmp, &log)?))?;
    let meta = CheckpointMeta {
        stamp,
        stage: "backbone".into(),
        model: cfg.model.clone(),
        thresholds: th,
        summary: summary.clone(),
    };
    save_checkpoint(&cfg.checkpoint(), &store, &meta)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn finetune(cfg: &PipelineConfig) -> Outcome {
    let (ckpt, meta) = load_checkpoint(&cfg.checkpoint(), "backbone checkpoint (run `hdvnet train` first)")?;
    let scenes = prepare(load_clouds(cfg, &cfg.scenes.train, "training")?, &meta.thresholds)?;
    let (net, mut store) = HdvNet::new(&meta.model, cfg.seed)?;
    store.load_from(&ckpt, true)?;
    let mut log = Vec::new();
    let summary = finetune_final(&net, Some(&mut store), &scenes, &cfg.finetune, cfg.seed, &mut log)?;
    let stamp = Stamp::new("finetune", cfg);
    write_artifact(&cfg.out_dir.join("finetune_log.jsonl"), Some(&stamp), |tmp| Ok(fs::write(tmp, &log)?))?;
    let meta = CheckpointMeta {
        stamp,
        stage: "final".into(),
        summary: summary.clone(),
        ..meta
    };
    save_checkpoint(&cfg.final_checkpoint(), &store, &meta)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// Flat label file next to the coloured cloud: one class id per line.
pub fn labels_path(cfg: &PipelineConfig, cloud: &Path) -> PathBuf {
    cfg.out_dir.join(format!("{}.labels", stem(cloud)))
}

pub fn infer(cfg: &PipelineConfig, clouds: &[PathBuf], mode: InferenceMode) -> Outcome {
    let (ckpt, meta) = load_checkpoint(&cfg.final_checkpoint(), "final checkpoint (run `hdvnet finetune` first)")?;
    let (net, mut store) = HdvNet::new(&meta.model, cfg.seed)?;
    store.load_from(&ckpt, true)?;
    let paths: Vec<PathBuf> = if clouds.is_empty() {
        cfg.scenes.test.iter().map(|n| cfg.data_dir().join(n)).collect()
    } else {
        clouds.to_vec()
    };
    if paths.is_empty() {
        return Err(Failure::Usage("no clouds to infer: pass --cloud or list test scenes".into()));
    }
    let stamp = Stamp::new("infer", cfg);
    for p in &paths {
        require(p, "cloud")?;
        let cloud = load_cloud(p, Format::from_path(p))?;
        let scene = Scene::prepare(cloud, &meta.thresholds)?;
        let out = infer_scene(&net, &store, &scene, mode, cfg.seed)?;
        let ply = cfg.out_dir.join(format!("{}.pred.ply", stem(p)));
        let palette = default_palette(meta.model.class_count);
        write_artifact(&ply, Some(&stamp), |tmp| {
            export_colored(&scene.cloud, &out.predictions, &palette, tmp)?;
            Ok(())
        })?;
        let mut text = String::with_capacity(out.predictions.len() * 2);
        for c in &out.predictions {
            text.push_str(&c.to_string());
            text.push('\n');
        }
        write_text(&labels_path(cfg, p), Some(&stamp), &text)?;
        eprintln!("{}: {} points, {} spheres", p.display(), scene.n(), out.jobs);
    }
    Ok(())
}

fn read_labels(path: &Path) -> anyhow::Result<Vec<usize>> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|e| anyhow!("{} line {}: {e}", path.display(), i + 1))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    stamp: Stamp,
    table: MetricsTable,
}

fn render(table: &MetricsTable, format: TableFormat) -> anyhow::Result<String> {
    Ok(match format {
        TableFormat::Markdown => table.to_markdown(),
        TableFormat::Csv => table.to_csv(),
        TableFormat::Json => serde_json::to_string_pretty(table)? + "\n",
    })
}

pub fn eval(cfg: &PipelineConfig) -> Outcome {
    let th = load_thresholds(cfg)?;
    let clouds = load_clouds(cfg, &cfg.scenes.test, "test")?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut states = Vec::new();
    let mut k = 0;
    for (p, cloud) in &clouds {
        let lp = labels_path(cfg, p);
        require(&lp, "predictions artifact (run `hdvnet infer` first)")?;
        let pr = read_labels(&lp)?;
        if pr.len() != cloud.n() {
            return Err(Failure::Run(anyhow!(
                "{} holds {} predictions for {} points",
                lp.display(),
                pr.len(),
                cloud.n()
            )));
        }
        let gt = cloud
            .labels()
            .ok_or_else(|| anyhow!("{} has no ground-truth labels", p.display()))?;
        let profile = density_profile(cloud, &density_options(th.k_used, th.delta_max))?;
        states.extend(inherent_state(&profile, &th));
        preds.extend(pr);
        labels.extend(gt);
        k = k.max(cloud.class_count);
    }
    let table = per_density_report(&preds, &labels, &states, &class_names(k))?;
    let stamp = Stamp::new("eval", cfg);
    write_text(
        &cfg.out_dir.join("metrics.json"),
        Some(&stamp),
        &serde_json::to_string_pretty(&MetricsFile {
            stamp: stamp.clone(),
            table: table.clone(),
        })?,
    )?;
    write_text(&cfg.out_dir.join("metrics.csv"), Some(&stamp), &table.to_csv())?;
    write_text(&cfg.out_dir.join("metrics.md"), Some(&stamp), &table.to_markdown())?;
    print!("{}", render(&table, cfg.format)?);
    Ok(())
}

pub fn report(cfg: &PipelineConfig) -> Outcome {
    let mp = cfg.out_dir.join("metrics.json");
    require(&mp, "metrics artifact (run `hdvnet eval` first)")?;
    let metrics: MetricsFile = serde_json::from_str(&fs::read_to_string(&mp)?).context("parsing metrics.json")?;
    let th = load_thresholds(cfg)?;
    let clouds = load_clouds(cfg, &cfg.scenes.test, "test")?;
    let mut hist_rows = Vec::new();
    for (p, cloud) in &clouds {
        let profile = density_profile(cloud, &density_options(th.k_used, th.delta_max))?;
        hist_rows.push((stem(p), density_histogram(&profile)));
    }
    let groups = th.delta_max + 2;
    let mut csv = String::from("scene");
    for g in 0..groups {
        csv.push_str(&format!(",group{g}"));
    }
    csv.push('\n');
    for (name, h) in &hist_rows {
        csv.push_str(name);
        for v in h {
            csv.push_str(&format!(",{v:.4}"));
        }
        csv.push('\n');
    }
    let stamp = Stamp::new("report", cfg);
    write_text(&cfg.out_dir.join("density_histogram.csv"), Some(&stamp), &csv)?;

    let mut md = String::from("# Per-density results\n\n");
    md.push_str(&metrics.table.to_markdown());
    md.push_str("\n## Density histogram (% of points per group)\n\n| scene |");
    for g in 0..groups {
        md.push_str(&format!(" δ{g} |"));
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(groups));
    for (name, h) in &hist_rows {
        md.push_str(&format!("\n| {name} |"));
        for v in h {
            md.push_str(&format!(" {v:.1} |"));
        }
    }
    md.push_str(&format!(
        "\n\nState thresholds t_0..t_5: {:?}\n\nconfig {} seed {}\n",
        th.t, stamp.config_hash, stamp.seed
    ));
    write_text(&cfg.out_dir.join("report.md"), Some(&stamp), &md)?;
    print!("{}", render(&metrics.table, cfg.format)?);
    Ok(())
}
