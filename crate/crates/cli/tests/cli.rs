//! Command-level behavior: generation determinism, train/eval cycles,
//! config validation, sweeps, and inspection, all on miniature datasets.

use std::fs;
use std::path::{Path, PathBuf};

use usvid_cli::{
    run_eval, run_gen, run_inspect, run_sweep_heads, run_sweep_samples, run_train, GenOptions,
    InspectOptions,
};
use usvid_core::dataio::{Manifest, Split, TaskKind};
use usvid_core::synthdata::GenConfig;

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("usvid_cli_{tag}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_gen(task: TaskKind, out: &Path, clips: usize, seed: u64) -> GenOptions {
    GenOptions {
        task,
        clips,
        out: out.to_path_buf(),
        seed,
        force: true,
        gen: GenConfig { n_clips: clips, t_min: 6, t_max: 10, ..Default::default() },
    }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_manifest_rows_for_every_clip_and_is_deterministic() {
    let dir = temp_dir("gen_det");
    let opts = small_gen(TaskKind::Keyframe, &dir.join("d1"), 25, 7);
    let manifest_path = run_gen(&opts).unwrap();
    let manifest = Manifest::load(&manifest_path).unwrap();
    assert_eq!(manifest.rows.len(), 25);
    // every split is populated at the group level
    for split in [Split::Train, Split::Val, Split::Test] {
        assert!(manifest.split_rows(split).count() > 0, "{split} empty");
    }
    manifest.validate_files().unwrap();

    // rerunning the same command produces identical bytes
    let opts2 = small_gen(TaskKind::Keyframe, &dir.join("d2"), 25, 7);
    run_gen(&opts2).unwrap();
    assert_eq!(tree_bytes(&dir.join("d1")), tree_bytes(&dir.join("d2")));

    // a different seed produces different data
    let opts3 = small_gen(TaskKind::Keyframe, &dir.join("d3"), 25, 8);
    run_gen(&opts3).unwrap();
    assert_ne!(tree_bytes(&dir.join("d1")), tree_bytes(&dir.join("d3")));
}

#[test]
fn gen_refuses_non_empty_dir_without_force() {
    let dir = temp_dir("gen_force");
    fs::write(dir.join("existing.txt"), "x").unwrap();
    let mut opts = small_gen(TaskKind::Keyframe, &dir, 16, 0);
    opts.force = false;
    let err = run_gen(&opts).unwrap_err().to_string();
    assert!(err.contains("--force"), "{err}");
    opts.force = true;
    run_gen(&opts).unwrap();
}

#[test]
fn motion_manifests_carry_binary_labels() {
    let dir = temp_dir("gen_motion");
    let manifest_path = run_gen(&small_gen(TaskKind::Motion, &dir, 20, 1)).unwrap();
    let manifest = Manifest::load(&manifest_path).unwrap();
    assert!(manifest.rows.iter().all(|r| r.label == 0.0 || r.label == 1.0));
    let positives = manifest.rows.iter().filter(|r| r.label == 1.0).count();
    assert!(positives > 0 && positives < manifest.rows.len());
}

fn write_config(dir: &Path, manifest: &Path, out: &Path, extra: &str) -> PathBuf {
    let cfg = format!(
        r#"{{
  "model": {{
    "kind": "usvn",
    "encoder": {{ "in_channels": 3, "image_size": 32, "embed_dim": 16, "block_widths": [4, 8] }},
    "n_heads": 2,
    "pool": "attention",
    "head": "binary_logit",
    "dropout": 0.5
  }},
  "temporal_model": {{
    "in_channels": 3, "image_size": 32, "spatial_widths": [4, 8],
    "temporal_kernel": 3, "t_fix": 8, "head": "binary_logit", "dropout": 0.5
  }},
  "train": {{ "lr": 0.003, "batch_size": 10, "frames_per_clip": 4, "max_epochs": 2 }},
  "data": {{ "manifest": {manifest:?} }},
  "output_dir": {out:?},
  "seed": 0{extra}
}}"#,
        manifest = manifest.display().to_string(),
        out = out.display().to_string(),
    );
    let path = dir.join("config.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn train_eval_cycle_and_reeval_determinism() {
    let dir = temp_dir("train_eval");
    let manifest_path = run_gen(&small_gen(TaskKind::Keyframe, &dir.join("data"), 30, 2)).unwrap();
    let cfg_path = write_config(&dir, &manifest_path, &dir.join("run"), "");
    let ckpt = run_train(&cfg_path).unwrap();
    assert!(ckpt.exists());
    assert!(dir.join("run/history.csv").exists());
    assert!(dir.join("run/run.json").exists());

    let r1 = run_eval(&ckpt, &manifest_path, Split::Test, None).unwrap();
    let bytes1 = fs::read(&r1).unwrap();
    let r2 = run_eval(&ckpt, &manifest_path, Split::Test, None).unwrap();
    assert_eq!(bytes1, fs::read(&r2).unwrap(), "re-evaluation differs");

    // eval on the train split is permitted and labeled in the report
    let r3 = run_eval(&ckpt, &manifest_path, Split::Train, None).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&r3).unwrap()).unwrap();
    assert_eq!(report["split"], "train");

    // missing checkpoint errors
    assert!(run_eval(Path::new("/nonexistent.ckpt"), &manifest_path, Split::Test, None).is_err());
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let dir = temp_dir("bad_config");
    let manifest_path = run_gen(&small_gen(TaskKind::Keyframe, &dir.join("data"), 15, 3)).unwrap();
    let cfg_path = write_config(&dir, &manifest_path, &dir.join("run"), ",\n  \"mystery_knob\": 3");
    let err = run_train(&cfg_path).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("mystery_knob"), "error does not name the key: {msg}");
}

#[test]
fn sweep_heads_validates_divisibility_before_training() {
    let dir = temp_dir("sweep_heads_bad");
    let manifest_path = run_gen(&small_gen(TaskKind::Keyframe, &dir.join("data"), 15, 4)).unwrap();
    let cfg_path = write_config(&dir, &manifest_path, &dir.join("run"), "");
    // 3 does not divide embed_dim 16; must fail before any training happens
    let err = run_sweep_heads(&cfg_path, &[2, 3], &[0]).unwrap_err().to_string();
    assert!(err.contains('3'), "{err}");
    assert!(!dir.join("run/heads2_seed0").exists(), "training ran before validation");
}

#[test]
fn sweep_heads_emits_one_row_per_head_count() {
    let dir = temp_dir("sweep_heads");
    let manifest_path = run_gen(&small_gen(TaskKind::Keyframe, &dir.join("data"), 25, 5)).unwrap();
    let cfg_path = write_config(&dir, &manifest_path, &dir.join("run"), "");
    let csv_path = run_sweep_heads(&cfg_path, &[1, 16], &[0]).unwrap();
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n_heads,val_metric");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("16,"));
}

#[test]
fn sweep_samples_full_keyword_and_row_count() {
    let dir = temp_dir("sweep_samples");
    let manifest_path = run_gen(&small_gen(TaskKind::Keyframe, &dir.join("data"), 30, 6)).unwrap();
    let cfg_path = write_config(&dir, &manifest_path, &dir.join("run"), "");
    let csv_path = run_sweep_samples(
        &cfg_path,
        &["1".to_string(), "full".to_string()],
        &["usvn".to_string(), "avg".to_string()],
        &[0],
    )
    .unwrap();
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,n_groups,test_metric,seed");
    // |models| * |counts| * |seeds| data rows
    assert_eq!(lines.len(), 1 + 2 * 2);

    let err = run_sweep_samples(&cfg_path, &["1".to_string()], &["warp".to_string()], &[0])
        .unwrap_err()
        .to_string();
    assert!(err.contains("warp"), "{err}");
}

#[test]
fn inspect_exports_prototypes_and_rejects_fixed_pooling() {
    let dir = temp_dir("inspect");
    let manifest_path = run_gen(&small_gen(TaskKind::Keyframe, &dir.join("data"), 30, 7)).unwrap();
    let cfg_path = write_config(&dir, &manifest_path, &dir.join("run"), "");
    let ckpt = run_train(&cfg_path).unwrap();

    let csv_path = run_inspect(&InspectOptions {
        checkpoint: ckpt.clone(),
        manifest: manifest_path.clone(),
        split: Split::Val,
        batch: 4,
        heads: 2,
        top_k: 3,
        seed: 0,
        out: Some(dir.join("protos")),
    })
    .unwrap();
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "head,rank,clip_id,frame_index,score,weight,entropy");
    assert_eq!(lines.len(), 1 + 2 * 3, "2 heads x top-3");
    // one exported frame file per row
    let frames = fs::read_dir(dir.join("protos"))
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().map(|x| x == "usvc").unwrap_or(false)
        })
        .count();
    assert_eq!(frames, 6);

    // determinism given the seed
    let csv2 = run_inspect(&InspectOptions {
        checkpoint: ckpt.clone(),
        manifest: manifest_path.clone(),
        split: Split::Val,
        batch: 4,
        heads: 2,
        top_k: 3,
        seed: 0,
        out: Some(dir.join("protos2")),
    })
    .unwrap();
    assert_eq!(fs::read_to_string(&csv_path).unwrap(), fs::read_to_string(&csv2).unwrap());

    // an average-pool checkpoint has no attention records
    let avg_cfg = write_config(&dir.join("data"), &manifest_path, &dir.join("run_avg"), "");
    let text = fs::read_to_string(&avg_cfg).unwrap().replace("\"attention\"", "\"average\"");
    fs::write(&avg_cfg, text).unwrap();
    let avg_ckpt = run_train(&avg_cfg).unwrap();
    let err = run_inspect(&InspectOptions {
        checkpoint: avg_ckpt,
        manifest: manifest_path,
        split: Split::Val,
        batch: 4,
        heads: 2,
        top_k: 3,
        seed: 0,
        out: Some(dir.join("protos3")),
    })
    .unwrap_err()
    .to_string();
    assert!(err.contains("no attention records"), "{err}");
}

#[test]
fn topk_beyond_available_frames_returns_all() {
    let dir = temp_dir("inspect_topk");
    let manifest_path = run_gen(&small_gen(TaskKind::Keyframe, &dir.join("data"), 20, 8)).unwrap();
    let cfg_path = write_config(&dir, &manifest_path, &dir.join("run"), "");
    let ckpt = run_train(&cfg_path).unwrap();
    let csv_path = run_inspect(&InspectOptions {
        checkpoint: ckpt,
        manifest: manifest_path,
        split: Split::Val,
        batch: 1,
        heads: 1,
        top_k: 10_000,
        seed: 0,
        out: Some(dir.join("protos")),
    })
    .unwrap();
    let rows = fs::read_to_string(&csv_path).unwrap().lines().count() - 1;
    assert!(rows <= 10, "clip has at most 10 frames, got {rows} rows");
    assert!(rows >= 6, "expected all frames of the clip, got {rows}");
}
