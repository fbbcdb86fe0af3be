//! Command implementations. Each writes its artifacts plus a `run.json`
//! provenance record and returns the primary output paths.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};

use usvid_core::dataio::{
    load_split, subsample_train_groups, Manifest, ManifestRow, Split, TaskKind, TrainSubset,
};
use usvid_core::inspect::{export_prototypes, prototype_report};
use usvid_core::metrics::evaluate_predictions;
use usvid_core::model::{
    load_checkpoint, usvn_forward, HeadKind, Mode, ModelSpec, PoolKind,
};
use usvid_core::rng::{self, stream_rng};
use usvid_core::synthdata::{generate, GenConfig};
use usvid_core::train::{evaluate_model, fit, FitData, TrainConfig};

use crate::config::RunConfig;
use crate::provenance::{hash_file, hash_files, write_run_record, RunRecord};

/// Options for dataset generation.
#[derive(Clone, Debug)]
pub struct GenOptions {
    pub task: TaskKind,
    pub clips: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub force: bool,
    pub gen: GenConfig,
}

fn ensure_fresh_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let non_empty = fs::read_dir(path)?.next().is_some();
        if non_empty && !force {
            bail!(
                "output directory {} exists and is not empty (use --force to overwrite)",
                path.display()
            );
        }
        if non_empty {
            fs::remove_dir_all(path)?;
        }
    }
    fs::create_dir_all(path)?;
    Ok(())
}

/// Generate a dataset: clip files under `clips/`, a manifest with a
/// group-level 70/15/15 split, and the provenance record.
pub fn run_gen(opts: &GenOptions) -> Result<PathBuf> {
    ensure_fresh_dir(&opts.out, opts.force)?;
    let mut gen_cfg = opts.gen.clone();
    gen_cfg.n_clips = opts.clips;
    let clips = generate(opts.task, &gen_cfg, opts.seed)?;

    // group-level split: 70/15/15 over distinct groups
    let mut groups: Vec<String> = {
        let set: BTreeSet<String> = clips.iter().map(|c| c.group.clone()).collect();
        set.into_iter().collect()
    };
    if groups.len() < 3 {
        bail!("need at least 3 groups to split train/val/test, got {}", groups.len());
    }
    let mut split_rng = stream_rng(opts.seed, 0x59117, 0);
    rng::shuffle(&mut split_rng, &mut groups);
    let n = groups.len();
    let n_train = ((n as f64 * 0.7).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * 0.15).round() as usize).clamp(1, n - n_train - 1);
    let split_of = |g: &str| -> Split {
        let idx = groups.iter().position(|x| x == g).unwrap();
        if idx < n_train {
            Split::Train
        } else if idx < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };

    let clip_dir = opts.out.join("clips");
    fs::create_dir_all(&clip_dir)?;
    let mut rows = Vec::with_capacity(clips.len());
    for labeled in &clips {
        let rel = format!("clips/{}.usvc", labeled.clip.id);
        usvid_core::dataio::write_clip(&labeled.clip, &opts.out.join(&rel))?;
        rows.push(ManifestRow {
            clip_id: labeled.clip.id.clone(),
            path: rel,
            task: opts.task,
            label: labeled.label,
            group_id: labeled.group.clone(),
            split: split_of(&labeled.group),
            num_frames: labeled.clip.num_frames(),
        });
    }
    let manifest = Manifest::new(rows, opts.out.clone())?;
    let manifest_path = opts.out.join("manifest.csv");
    manifest.save(&manifest_path)?;

    let payload: Vec<PathBuf> =
        manifest.rows.iter().map(|r| opts.out.join(&r.path)).collect();
    write_run_record(
        &opts.out,
        &RunRecord {
            command: format!("gen --task {} --clips {} --seed {}", opts.task, opts.clips, opts.seed),
            seed: opts.seed,
            config: serde_json::to_value(&gen_cfg)?,
            inputs: vec![],
            outputs: vec![
                "manifest.csv".to_string(),
                format!("clips/ ({} files, hash {})", payload.len(), hash_files(payload.iter().map(|p| p.as_path()))?),
            ],
            threads: rayon_threads(),
        },
    )?;
    Ok(manifest_path)
}

fn rayon_threads() -> usize {
    usvid_core::train::init_thread_pool_from_env()
}

/// Uniform task of a manifest.
fn manifest_task(manifest: &Manifest) -> Result<TaskKind> {
    let task = manifest.rows.first().ok_or_else(|| anyhow!("manifest is empty"))?.task;
    if manifest.rows.iter().any(|r| r.task != task) {
        bail!("manifest mixes tasks");
    }
    Ok(task)
}

fn load_fit_data(manifest: &Manifest) -> Result<(TaskKind, FitData)> {
    let task = manifest_task(manifest)?;
    let data = FitData {
        task,
        train: load_split(manifest, Split::Train)?,
        val: load_split(manifest, Split::Val)?,
    };
    Ok((task, data))
}

fn check_head_task(spec: &ModelSpec, task: TaskKind) -> Result<()> {
    if spec.head() == HeadKind::BinaryLogit && !task.is_binary() {
        bail!("binary_logit head cannot train on the continuous `{task}` labels");
    }
    Ok(())
}

/// Train a model per the run config. Writes checkpoint.bin, history.csv and
/// run.json into the output directory.
pub fn run_train(config_path: &Path) -> Result<PathBuf> {
    let cfg = RunConfig::load(config_path)?;
    let manifest = Manifest::load(&cfg.data.manifest)?;
    manifest.validate_files()?;
    let (task, data) = load_fit_data(&manifest)?;
    check_head_task(&cfg.model, task)?;

    fs::create_dir_all(&cfg.output_dir)?;
    let outcome = fit(&cfg.model, &cfg.train, &data, Some(&cfg.output_dir))?;

    let input_files: Vec<PathBuf> = std::iter::once(cfg.data.manifest.clone())
        .chain(manifest.rows.iter().map(|r| manifest.dir.join(&r.path)))
        .collect();
    write_run_record(
        &cfg.output_dir,
        &RunRecord {
            command: "train".to_string(),
            seed: cfg.seed,
            config: serde_json::to_value(&cfg)?,
            inputs: vec![("data".to_string(), hash_files(input_files.iter().map(|p| p.as_path()))?)],
            outputs: vec!["checkpoint.bin".into(), "history.csv".into()],
            threads: rayon_threads(),
        },
    )?;
    println!(
        "trained {} epochs; best val loss {:.6} at epoch {}{}{}",
        outcome.history.len(),
        outcome.best_val_loss,
        outcome.best_epoch,
        if outcome.stopped_early { " (early stop)" } else { "" },
        if outcome.diverged { " (DIVERGED; last good checkpoint retained)" } else { "" },
    );
    Ok(cfg.output_dir.join("checkpoint.bin"))
}

/// Evaluate a checkpoint over one split of a manifest, writing an
/// EvalReport JSON.
pub fn run_eval(
    checkpoint: &Path,
    manifest_path: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<PathBuf> {
    let (spec, params) = load_checkpoint(checkpoint)?;
    let manifest = Manifest::load(manifest_path)?;
    let task = manifest_task(&manifest)?;
    let clips = load_split(&manifest, split)?;
    if clips.is_empty() {
        bail!("split {split} of {} is empty", manifest_path.display());
    }
    let (scores, records, _) = evaluate_model(&spec, &params, &clips, 20)?;
    let labels: Vec<f32> = clips.iter().map(|c| c.label).collect();
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    let report = evaluate_predictions(
        &task.to_string(),
        &split.to_string(),
        spec.head() == HeadKind::BinaryLogit,
        &ids,
        &labels,
        &scores,
        &records,
    )?;
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| {
            let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
            dir.join(format!("eval_{split}.json"))
        });
    fs::write(&out_path, serde_json::to_string_pretty(&report)?)?;
    if let Some(dir) = out_path.parent() {
        write_run_record(
            dir,
            &RunRecord {
                command: format!("eval --split {split}"),
                seed: 0,
                config: serde_json::Value::Null,
                inputs: vec![
                    ("checkpoint".to_string(), hash_file(checkpoint)?),
                    ("manifest".to_string(), hash_file(manifest_path)?),
                ],
                outputs: vec![out_path.display().to_string()],
                threads: rayon_threads(),
            },
        )?;
    }
    println!("{} {} on {}: {:.4}", report.metric_name, split, task, report.metric_value);
    Ok(out_path)
}

/// Validation metric at the best (checkpointed) epoch.
fn best_epoch_metric(outcome: &usvid_core::train::FitOutcome) -> f64 {
    outcome
        .history
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map(|r| r.metric)
        .unwrap_or(f64::NAN)
}

/// Head-count sweep: trains one model per head count (seeds averaged) and
/// writes `sweep_heads.csv` with columns `n_heads,val_metric`.
pub fn run_sweep_heads(config_path: &Path, heads: &[usize], seeds: &[u64]) -> Result<PathBuf> {
    let cfg = RunConfig::load(config_path)?;
    let ModelSpec::Usvn(base) = &cfg.model else {
        bail!("sweep-heads needs a usvn model config");
    };
    // reject bad head counts before any training
    for &h in heads {
        if h == 0 || base.encoder.embed_dim % h != 0 {
            bail!("head count {h} does not divide embed_dim {}", base.encoder.embed_dim);
        }
    }
    let manifest = Manifest::load(&cfg.data.manifest)?;
    let (task, data) = load_fit_data(&manifest)?;
    check_head_task(&cfg.model, task)?;
    fs::create_dir_all(&cfg.output_dir)?;

    let mut rows = Vec::new();
    for &n_heads in heads {
        let mut metrics = Vec::new();
        for &seed in seeds {
            let mut model = base.clone();
            model.n_heads = n_heads;
            let spec = ModelSpec::Usvn(model);
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let cell_dir = cfg.output_dir.join(format!("heads{n_heads}_seed{seed}"));
            let outcome = fit(&spec, &train_cfg, &data, Some(&cell_dir))?;
            metrics.push(best_epoch_metric(&outcome));
        }
        let mean = metrics.iter().sum::<f64>() / metrics.len() as f64;
        rows.push((n_heads, mean));
    }
    let csv_path = cfg.output_dir.join("sweep_heads.csv");
    let mut csv = String::from("n_heads,val_metric\n");
    for (h, m) in &rows {
        csv.push_str(&format!("{h},{m}\n"));
    }
    fs::write(&csv_path, csv)?;
    write_run_record(
        &cfg.output_dir,
        &RunRecord {
            command: format!("sweep-heads --heads {heads:?} (seeds {seeds:?})"),
            seed: cfg.seed,
            config: serde_json::to_value(&cfg)?,
            inputs: vec![("manifest".to_string(), hash_file(&cfg.data.manifest)?)],
            outputs: vec!["sweep_heads.csv".into()],
            threads: rayon_threads(),
        },
    )?;
    Ok(csv_path)
}

fn model_variant(cfg: &RunConfig, name: &str) -> Result<ModelSpec> {
    match name {
        "usvn" | "avg" | "max" => {
            let ModelSpec::Usvn(base) = &cfg.model else {
                bail!("model `{name}` needs a usvn model config");
            };
            let mut m = base.clone();
            m.pool = match name {
                "usvn" => PoolKind::Attention,
                "avg" => PoolKind::Average,
                _ => PoolKind::Max,
            };
            Ok(ModelSpec::Usvn(m))
        }
        "temporal" => {
            let mut t = cfg
                .temporal_model
                .clone()
                .ok_or_else(|| anyhow!("config has no `temporal_model` section"))?;
            t.head = cfg.model.head();
            Ok(ModelSpec::Temporal(t))
        }
        other => bail!("unknown model `{other}` (expected usvn, avg, max or temporal)"),
    }
}

/// Sample-efficiency sweep: for each (model, group count, seed) trains on a
/// group-subsampled train split and evaluates on the full test split.
/// Writes `sweep_samples.csv` with columns `model,n_groups,test_metric,seed`.
pub fn run_sweep_samples(
    config_path: &Path,
    group_counts: &[String],
    models: &[String],
    seeds: &[u64],
) -> Result<PathBuf> {
    let cfg = RunConfig::load(config_path)?;
    let manifest = Manifest::load(&cfg.data.manifest)?;
    let task = manifest_task(&manifest)?;
    let total_groups = manifest.groups_in(Split::Train).len();
    let counts: Vec<usize> = group_counts
        .iter()
        .map(|c| {
            if c == "full" {
                Ok(total_groups)
            } else {
                c.parse::<usize>().map_err(|e| anyhow!("bad group count `{c}`: {e}"))
            }
        })
        .collect::<Result<_>>()?;
    for &c in &counts {
        if c == 0 || c > total_groups {
            bail!("group count {c} outside 1..={total_groups}");
        }
    }
    // resolve model specs up front so unknown names fail before training
    let specs: Vec<(String, ModelSpec)> = models
        .iter()
        .map(|m| Ok((m.clone(), model_variant(&cfg, m)?)))
        .collect::<Result<_>>()?;
    for (_, spec) in &specs {
        check_head_task(spec, task)?;
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let test = load_split(&manifest, Split::Test)?;
    if test.is_empty() {
        bail!("test split is empty");
    }
    let test_labels: Vec<f32> = test.iter().map(|c| c.label).collect();

    let mut csv = String::from("model,n_groups,test_metric,seed\n");
    for (name, spec) in &specs {
        for &count in &counts {
            for &seed in seeds {
                let sub = subsample_train_groups(&manifest, TrainSubset::Count(count), seed)?;
                let data = FitData {
                    task,
                    train: load_split(&sub, Split::Train)?,
                    val: load_split(&sub, Split::Val)?,
                };
                let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
                let cell_dir = cfg.output_dir.join(format!("{name}_g{count}_s{seed}"));
                let outcome = fit(spec, &train_cfg, &data, Some(&cell_dir))?;
                let (scores, _, _) = evaluate_model(spec, &outcome.best_params, &test, 20)?;
                let metric = if spec.head() == HeadKind::BinaryLogit {
                    usvid_core::metrics::roc_auc(&scores, &test_labels)?
                } else {
                    usvid_core::metrics::r_squared(&scores, &test_labels)?
                };
                csv.push_str(&format!("{name},{count},{metric},{seed}\n"));
            }
        }
    }
    let csv_path = cfg.output_dir.join("sweep_samples.csv");
    fs::write(&csv_path, csv)?;
    write_run_record(
        &cfg.output_dir,
        &RunRecord {
            command: format!(
                "sweep-samples --group-counts {group_counts:?} --models {models:?} (seeds {seeds:?})"
            ),
            seed: cfg.seed,
            config: serde_json::to_value(&cfg)?,
            inputs: vec![("manifest".to_string(), hash_file(&cfg.data.manifest)?)],
            outputs: vec!["sweep_samples.csv".into()],
            threads: rayon_threads(),
        },
    )?;
    Ok(csv_path)
}

/// Options for the attention-inspection command.
#[derive(Clone, Debug)]
pub struct InspectOptions {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub split: Split,
    pub batch: usize,
    pub heads: usize,
    pub top_k: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// Rank attention heads by mean temporal entropy over a seeded batch of
/// clips and export each selected head's top-k frames.
pub fn run_inspect(opts: &InspectOptions) -> Result<PathBuf> {
    let (spec, params) = load_checkpoint(&opts.checkpoint)?;
    let ModelSpec::Usvn(model) = &spec else {
        bail!("checkpoint holds no attention records (not an attention-pooled model)");
    };
    if model.pool != PoolKind::Attention {
        bail!("checkpoint holds no attention records ({:?} pooling)", model.pool);
    }
    let manifest = Manifest::load(&opts.manifest)?;
    let mut clips = load_split(&manifest, opts.split)?;
    if clips.is_empty() {
        bail!("split {} is empty", opts.split);
    }
    let mut r = stream_rng(opts.seed, 0x1a5bec7, 0);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    rng::shuffle(&mut r, &mut order);
    order.truncate(opts.batch);
    order.sort_unstable();
    clips = order.into_iter().map(|i| clips[i].clone()).collect();

    let items: Vec<usvid_core::dataio::BatchItem> = clips
        .iter()
        .map(|c| usvid_core::dataio::BatchItem::full(c.id.clone(), c.frames.clone(), c.label))
        .collect();
    let mut records = Vec::new();
    let mut ids = Vec::new();
    for chunk in items.chunks(20) {
        let batch = usvid_core::dataio::collate(chunk)?;
        let (_, recs) = usvn_forward(&batch, &params, model, Mode::Eval)?;
        for (rec, id) in recs.into_iter().zip(batch.clip_ids) {
            records.push(rec.ok_or_else(|| anyhow!("attention model returned no record"))?);
            ids.push(id);
        }
    }
    let total_frames: usize = records.iter().map(|r| r.num_frames()).sum();
    if opts.top_k > total_frames {
        eprintln!(
            "warning: requested top {} frames but the batch has only {total_frames}; returning all",
            opts.top_k
        );
    }
    let report = prototype_report(&records, &ids, opts.heads, opts.top_k)?;
    let out_dir = opts
        .out
        .clone()
        .unwrap_or_else(|| {
            opts.checkpoint.parent().unwrap_or_else(|| Path::new(".")).join("prototypes")
        });
    export_prototypes(&report, &clips, &out_dir)?;
    write_run_record(
        &out_dir,
        &RunRecord {
            command: format!(
                "inspect --batch {} --heads {} --topk {} --split {}",
                opts.batch, opts.heads, opts.top_k, opts.split
            ),
            seed: opts.seed,
            config: serde_json::Value::Null,
            inputs: vec![
                ("checkpoint".to_string(), hash_file(&opts.checkpoint)?),
                ("manifest".to_string(), hash_file(&opts.manifest)?),
            ],
            outputs: vec!["prototypes.csv".into()],
            threads: rayon_threads(),
        },
    )?;
    Ok(out_dir.join("prototypes.csv"))
}
