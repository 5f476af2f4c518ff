//! End-to-end runner: MAE pretraining, alignment with each decoder,
//! merging, and head finetuning (on fused features when a generalist is
//! configured). Writes checkpoints, loss traces, metrics and a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
use super::config::{ExperimentConfig, Stage};
use super::seed::{seed_everything, SeedTree};
use crate::align::{glyph_ocr_samples, init_decoder, init_projector, train_align};
use crate::error::{Error, Result};
use crate::fusion::{fuse_train, init_generalist, FusedEncoder};
use crate::heads::{evaluate, finetune_head, init_head, Evaluation};
use crate::mae::{init_mae, train_mae};
use crate::merge::{merge_pipeline, probe_distill_loss, MergeMethod, TeacherSet};
use crate::numkernel::{ParamStore, Tensor, RNG_ALGORITHM};
use crate::synth;
use crate::trace::{write_loss_csv, write_metrics_csv, LossRecord};
use crate::vit::{Encoder, ViTConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    /// Relative to the output directory for produced files; as given for
    /// resumed inputs.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// `ran` or `resumed`.
    pub status: String,
    pub seed: u64,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub rng: String,
    pub checkpoint_format_version: u16,
    pub config_sha256: String,
    pub stage_order: Vec<String>,
    pub stages: Vec<StageRecord>,
    /// Merge method used, or `single_decoder_baseline` for method `none`.
    pub merge_path: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

pub struct PipelineReport {
    pub manifest: Manifest,
    pub evaluation: Option<Evaluation>,
    pub checkpoints: Vec<PathBuf>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Run<'a> {
    config: &'a ExperimentConfig,
    seeds: SeedTree,
    out: &'a Path,
    stores: BTreeMap<String, (ParamStore, FileRecord)>,
    manifest: Manifest,
    checkpoints: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    fn selected(&self, stage: Stage) -> bool {
        self.config.stages.contains(&stage)
    }

    fn resumed(&mut self, name: &str) -> Result<Option<FileRecord>> {
        let Some(path) = self.config.resume.get(name) else {
            return Ok(None);
        };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let store = super::checkpoint::decode(&bytes)?;
        let rec = FileRecord {
            name: name.into(),
            path: path.clone(),
            sha256: sha256_hex(&bytes),
        };
        self.stores.insert(name.into(), (store, rec.clone()));
        Ok(Some(rec))
    }

    fn input(&self, stage: &str, name: &str) -> Result<(&ParamStore, FileRecord)> {
        self.stores.get(name).map(|(s, r)| (s, r.clone())).ok_or_else(|| {
            Error::Usage(format!(
                "needs checkpoint `{name}`, which no earlier stage produced and `resume` does not provide"
            ))
            .in_stage(stage)
        })
    }

    fn save(&mut self, name: &str, store: ParamStore) -> Result<FileRecord> {
        let rel = PathBuf::from("checkpoints").join(format!("{name}.ckpt"));
        let path = self.out.join(&rel);
        save_checkpoint(&store, &path)?;
        // the hash of what is on disk, so the manifest matches the file
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rec = FileRecord {
            name: name.into(),
            path: rel,
            sha256: sha256_hex(&bytes),
        };
        self.checkpoints.push(path);
        self.stores.insert(name.into(), (store, rec.clone()));
        Ok(rec)
    }

    fn save_trace(&self, name: &str, trace: &[LossRecord]) -> Result<FileRecord> {
        let rel = PathBuf::from("traces").join(format!("{name}_loss.csv"));
        let path = self.out.join(&rel);
        write_loss_csv(&path, trace)?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(FileRecord {
            name: format!("{name}_loss"),
            path: rel,
            sha256: sha256_hex(&bytes),
        })
    }

    fn record(
        &mut self,
        name: &str,
        status: &str,
        inputs: Vec<FileRecord>,
        outputs: Vec<FileRecord>,
    ) {
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status: status.into(),
            seed: self.seeds.seed(name),
            inputs,
            outputs,
        });
    }

    fn metric(&mut self, key: &str, value: f64) {
        self.manifest.metrics.insert(key.into(), value);
    }
}

fn endpoint_metrics(run: &mut Run, name: &str, trace: &[LossRecord]) {
    if let Some((first, last)) = crate::trace::smoothed_endpoints(trace, 10) {
        run.metric(&format!("{name}.loss_initial"), first as f64);
        run.metric(&format!("{name}.loss_final"), last as f64);
    }
}

fn unlabeled_documents(size: usize, n: usize, seeds: &SeedTree, label: &str) -> Vec<Tensor> {
    let mut rng = seeds.subtree("data").rng(label);
    (0..n)
        .map(|_| synth::document_image(size, &mut rng))
        .collect()
}

fn stage_mae(run: &mut Run) -> Result<()> {
    if let Some(rec) = run.resumed("mae")? {
        run.record("mae", "resumed", vec![rec], vec![]);
        return Ok(());
    }
    if !run.selected(Stage::Mae) {
        return Ok(());
    }
    let cfg = run.config;
    let images = unlabeled_documents(cfg.encoder.image_size, cfg.mae.images, &run.seeds, "mae");
    let mut rng = run.seeds.rng("mae");
    let params = init_mae(&cfg.encoder, &cfg.mae.decoder, &mut rng)?;
    let out = train_mae(
        params,
        &images,
        &cfg.encoder,
        &cfg.mae.decoder,
        &cfg.mae.train,
        &mut rng,
    )?;
    endpoint_metrics(run, "mae", &out.trace);
    let trace = run.save_trace("mae", &out.trace)?;
    let ckpt = run.save("mae", out.encoder)?;
    run.record("mae", "ran", vec![], vec![ckpt, trace]);
    Ok(())
}

fn stage_align(run: &mut Run) -> Result<()> {
    let cfg = run.config;
    let n = cfg.align.decoders.len();
    let mut pending = Vec::new();
    let mut resumed = Vec::new();
    for i in 0..n {
        match run.resumed(&format!("align_{i}"))? {
            Some(rec) => resumed.push(rec),
            None => pending.push(i),
        }
    }
    if !resumed.is_empty() {
        run.record("align", "resumed", resumed, vec![]);
    }
    if pending.is_empty() || !run.selected(Stage::Align) {
        return Ok(());
    }
    let (base, input) = run.input("align", "mae")?;
    let base = base.clone();
    let data = {
        let mut rng = run.seeds.subtree("data").rng("align");
        glyph_ocr_samples(cfg.align.samples, cfg.encoder.image_size, &mut rng)
    };
    let tree = run.seeds.subtree("align");
    let mut outputs = Vec::new();
    for i in pending {
        let dcfg = &cfg.align.decoders[i];
        let mut rng = tree.rng(&format!("decoder_{i}"));
        let decoder = init_decoder(dcfg, &mut rng)?;
        let projector = init_projector(cfg.encoder.dim, dcfg.dim, &mut rng)?;
        let out = train_align(
            base.clone(),
            &cfg.encoder,
            decoder,
            dcfg,
            projector,
            &data,
            &cfg.align.train,
            &mut rng,
        )
        .map_err(|e| e.in_stage("align"))?;
        let name = format!("align_{i}");
        endpoint_metrics(run, &name, &out.trace);
        outputs.push(run.save_trace(&name, &out.trace)?);
        outputs.push(run.save(&name, out.encoder)?);
    }
    run.record("align", "ran", vec![input], outputs);
    Ok(())
}

fn stage_merge(run: &mut Run) -> Result<()> {
    if let Some(rec) = run.resumed("merged")? {
        run.record("merge", "resumed", vec![rec], vec![]);
        return Ok(());
    }
    if !run.selected(Stage::Merge) {
        return Ok(());
    }
    let cfg = run.config;
    let mut teachers = Vec::new();
    let mut inputs = Vec::new();
    for i in 0..cfg.align.decoders.len() {
        let (s, r) = run.input("merge", &format!("align_{i}"))?;
        teachers.push(s.clone());
        inputs.push(r);
    }
    let teachers = TeacherSet::new(teachers).map_err(|e| e.in_stage("merge"))?;
    let images = unlabeled_documents(
        cfg.encoder.image_size,
        cfg.merge.probe_images,
        &run.seeds,
        "merge",
    );
    let mut rng = run.seeds.rng("merge");
    let out = merge_pipeline(
        &teachers,
        &cfg.encoder,
        &images,
        cfg.merge.method,
        &cfg.merge.train,
        &mut rng,
    )
    .map_err(|e| e.in_stage("merge"))?;
    let path = match cfg.merge.method {
        MergeMethod::None => "single_decoder_baseline".to_string(),
        m => m.as_str().to_string(),
    };
    run.manifest.merge_path = Some(path);
    let probe = probe_distill_loss(&cfg.encoder, &out.store, &teachers, &images)?;
    run.metric("merge.probe_distill_loss", probe as f64);
    let mut outputs = Vec::new();
    if let Some(c) = &out.coefficients {
        let rel = PathBuf::from("merge_coefficients.json");
        let text = c.to_json()?;
        fs::write(run.out.join(&rel), &text).map_err(|e| Error::io(run.out.join(&rel), e))?;
        outputs.push(FileRecord {
            name: "merge_coefficients".into(),
            path: rel,
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    if !out.trace.is_empty() {
        endpoint_metrics(run, "merge", &out.trace);
        outputs.push(run.save_trace("merge", &out.trace)?);
    }
    outputs.push(run.save("merged", out.store)?);
    run.record("merge", "ran", inputs, outputs);
    Ok(())
}

/// Splits a saved head checkpoint back into its parts.
pub fn split_head_checkpoint(store: &ParamStore) -> (ParamStore, ParamStore, Option<ParamStore>) {
    let generalist = store
        .names()
        .any(|n| n.starts_with("generalist."))
        .then(|| store.with_prefix("generalist."));
    (
        store.with_prefix("specialist."),
        store.with_prefix("head."),
        generalist,
    )
}

fn stage_head(run: &mut Run) -> Result<Option<Evaluation>> {
    let cfg = run.config;
    let resumed = run.resumed("head")?;
    if resumed.is_none() && !run.selected(Stage::Head) {
        return Ok(None);
    }
    let hs = &cfg.head;
    let size = cfg.encoder.image_size;
    let grid = cfg
        .generalist
        .as_ref()
        .map_or(cfg.encoder.grid(), ViTConfig::grid);
    let data_tree = run.seeds.subtree("data");
    let eval_data = synth::head_samples(
        hs.task,
        hs.eval_samples,
        size,
        grid,
        &mut data_tree.rng("head-eval"),
    )?;

    let (specialist, head, generalist, status, inputs, outputs) = if let Some(rec) = resumed {
        let (spec, head, gen) = split_head_checkpoint(&run.stores["head"].0);
        (spec, head, gen, "resumed", vec![rec], vec![])
    } else {
        let (merged, input) = run.input("head", "merged")?;
        let merged = merged.clone();
        let train_data = synth::head_samples(
            hs.task,
            hs.train_samples,
            size,
            grid,
            &mut data_tree.rng("head-train"),
        )?;
        let mut rng = run.seeds.rng("head");
        let (spec, head, gen, trace) = match &cfg.generalist {
            Some(gcfg) => {
                let gen = init_generalist(gcfg, &mut run.seeds.rng("fusion"))?;
                let fused = FusedEncoder::new(gcfg.clone(), gen, cfg.encoder.clone())?;
                let head = init_head(hs.task, fused.dim(), hs.train.hidden, &mut rng)?;
                let out = fuse_train(
                    &fused,
                    merged,
                    head,
                    hs.task,
                    &train_data,
                    &hs.train,
                    &mut rng,
                )
                .map_err(|e| e.in_stage("head"))?;
                (
                    out.encoder,
                    out.head,
                    Some(fused.generalist().clone()),
                    out.trace,
                )
            }
            None => {
                let head = init_head(hs.task, cfg.encoder.dim, hs.train.hidden, &mut rng)?;
                let out = finetune_head(
                    &cfg.encoder,
                    merged,
                    head,
                    hs.task,
                    &train_data,
                    &hs.train,
                    &mut rng,
                )
                .map_err(|e| e.in_stage("head"))?;
                (out.encoder, out.head, None, out.trace)
            }
        };
        endpoint_metrics(run, "head", &trace);
        let trace_rec = run.save_trace("head", &trace)?;
        let mut bundle = ParamStore::new();
        bundle.extend_prefixed("specialist.", &spec)?;
        bundle.extend_prefixed("head.", &head)?;
        if let Some(g) = &gen {
            bundle.extend_prefixed("generalist.", g)?;
        }
        for (k, v) in spec.metadata() {
            bundle.set_meta(k.clone(), v.clone());
        }
        bundle.set_meta(
            "role",
            if gen.is_some() {
                "fused_model"
            } else {
                "finetuned_model"
            },
        );
        bundle.set_meta("stage", "head");
        bundle.set_meta("head_task", serde_json::to_string(&hs.task)?);
        if let Some(g) = &cfg.generalist {
            bundle.set_meta("generalist_config", serde_json::to_string(g)?);
        }
        let ckpt = run.save("head", bundle)?;
        (spec, head, gen, "ran", vec![input], vec![trace_rec, ckpt])
    };

    let evaluation = match (&cfg.generalist, generalist) {
        (Some(gcfg), Some(gen)) => {
            let fused = FusedEncoder::new(gcfg.clone(), gen, cfg.encoder.clone())?;
            evaluate(&fused, &specialist, &head, hs.task, &eval_data)?
        }
        (None, None) => evaluate(
            &cfg.encoder as &dyn Encoder,
            &specialist,
            &head,
            hs.task,
            &eval_data,
        )?,
        _ => {
            return Err(Error::Incompatible(
                "head checkpoint and config disagree on the generalist".into(),
            )
            .in_stage("head"))
        }
    };
    let records = evaluation.records(hs.task, hs.train.steps);
    for r in &records {
        run.metric(&format!("{}.{}", r.task, r.metric), r.value);
    }
    let rel = PathBuf::from("metrics.csv");
    write_metrics_csv(&run.out.join(&rel), &records)?;
    let mut outputs = outputs;
    outputs.push(FileRecord {
        name: "metrics".into(),
        sha256: sha256_hex(
            &fs::read(run.out.join(&rel)).map_err(|e| Error::io(run.out.join(&rel), e))?,
        ),
        path: rel,
    });
    run.record("head", status, inputs, outputs);
    run.manifest
        .metrics
        .insert("eval.samples".into(), eval_data.len() as f64);
    Ok(Some(evaluation))
}

/// Runs the configured stages in order and writes `manifest.json`.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineReport> {
    config.validate()?;
    let out = config.output_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut run = Run {
        config,
        seeds: seed_everything(config.seed),
        out,
        stores: BTreeMap::new(),
        manifest: Manifest {
            seed: config.seed,
            rng: RNG_ALGORITHM.into(),
            checkpoint_format_version: FORMAT_VERSION,
            config_sha256: sha256_hex(&config.canonical_bytes()?),
            stage_order: config
                .stages
                .iter()
                .map(|s| s.as_str().to_string())
                .collect(),
            stages: Vec::new(),
            merge_path: None,
            metrics: BTreeMap::new(),
        },
        checkpoints: Vec::new(),
    };
    stage_mae(&mut run).map_err(|e| wrap(e, "mae"))?;
    stage_align(&mut run).map_err(|e| wrap(e, "align"))?;
    stage_merge(&mut run).map_err(|e| wrap(e, "merge"))?;
    let evaluation = stage_head(&mut run).map_err(|e| wrap(e, "head"))?;
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&run.manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(PipelineReport {
        manifest: run.manifest,
        evaluation,
        checkpoints: run.checkpoints,
    })
}

fn wrap(e: Error, stage: &str) -> Error {
    match e {
        Error::Stage { .. } => e,
        other => other.in_stage(stage),
    }
}

/// Reloads every checkpoint listed in a manifest and checks its hash.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    for stage in &manifest.stages {
        for rec in stage.inputs.iter().chain(&stage.outputs) {
            let p = if rec.path.is_absolute() {
                rec.path.clone()
            } else {
                dir.join(&rec.path)
            };
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != rec.sha256 {
                return Err(Error::Evaluation(format!(
                    "{} does not match its manifest hash",
                    p.display()
                )));
            }
            if p.extension().is_some_and(|e| e == "ckpt") {
                load_checkpoint(&p)?;
            }
        }
    }
    Ok(manifest)
}
