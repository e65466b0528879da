use std::path::{Path, PathBuf};

use melrvq_core::contrastive::{selftest, SelftestReport};
use melrvq_core::dsp::{load_wav, mel_spectrogram, resample, BinStats};
use melrvq_core::formats::{save_mels, save_tokens};
use melrvq_core::par;
use melrvq_core::rvq::{load_checkpoint, save_checkpoint, MelRvq, Source};
use melrvq_core::ssl::{
    iterate, layer_table, layer_table_csv, load_model, pretrain, save_model, split_corpus, IterateConfig, LayerRow, PretrainReport, SslToyModel, Tokenizer,
};
use melrvq_core::train::{freeze_random, stack_frames, train, TrainReport};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{PipelineConfig, VqType};
use crate::io::{ensure_dir, list_files, load_corpus, stem, write, Manifest};
use crate::CliError;

fn at(path: &Path) -> impl Fn(melrvq_core::Error) -> CliError + '_ {
    move |e| match e {
        melrvq_core::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
        melrvq_core::Error::Config(_) => CliError::Usage(e.to_string()),
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}

pub fn featurize(cfg: &PipelineConfig, audio_dir: &Path, out: &Path) -> Result<serde_json::Value, CliError> {
    let files = list_files(audio_dir, "wav")?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no inputs: no .wav files in {}", audio_dir.display())));
    }
    ensure_dir(out)?;
    let dsp = &cfg.dsp;
    let results = par::map(&files, |f| -> Result<(PathBuf, usize), String> {
        let clip = load_wav(f).map_err(|e| e.to_string())?;
        let clip = if clip.sample_rate_hz() == dsp.sample_rate_hz {
            clip
        } else {
            resample(&clip, dsp.sample_rate_hz).map_err(|e| e.to_string())?
        };
        let spec = mel_spectrogram(&clip, dsp).map_err(|e| e.to_string())?;
        let dst = out.join(format!("{}.mels", stem(f)));
        save_mels(&dst, &spec).map_err(|e| e.to_string())?;
        Ok((dst, spec.num_frames()))
    });
    let mut manifest = Manifest::new("featurize", cfg);
    let mut written = Vec::new();
    let mut warnings = 0;
    for (f, r) in files.iter().zip(results) {
        match r {
            Ok((dst, frames)) => {
                manifest.input(f)?;
                manifest.artifact(&dst, true)?;
                written.push(json!({ "input": f.display().to_string(), "output": dst.display().to_string(), "frames": frames }));
            }
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", f.display());
                warnings += 1;
            }
        }
    }
    if written.is_empty() {
        return Err(CliError::Data(format!("all {} inputs failed", files.len())));
    }
    manifest.save(out)?;
    Ok(json!({ "written": written.len(), "warnings": warnings, "files": written }))
}

fn add_inputs(manifest: &mut Manifest, files: &[PathBuf]) -> Result<(), CliError> {
    files.iter().try_for_each(|f| manifest.input(f))
}

/// Quantizer training uses the same leading clips as pretraining, so the
/// held-out clips stay unseen by every trained component.
pub fn train_rvq(cfg: &PipelineConfig, mels_dir: &Path, out: &Path) -> Result<serde_json::Value, CliError> {
    let (files, specs) = load_corpus(mels_dir)?;
    let bins = specs[0].mel_bins();
    if bins != cfg.dsp.mel_bins {
        return Err(CliError::Data(format!("corpus has {bins} bins, config expects {}", cfg.dsp.mel_bins)));
    }
    let (train_idx, _) = split_corpus(specs.len(), cfg.pretrain.holdout_fraction);
    let frames = stack_frames(specs[train_idx].iter().map(|s| s.frames())).map_err(at(mels_dir))?;
    let dims = cfg.rvq.dims(bins);
    ensure_dir(out)?;
    let (rvq, report) = match cfg.vq_type {
        VqType::Trained => train(frames.view(), &cfg.train, dims, Source::Mel).map_err(at(mels_dir))?,
        VqType::Random => {
            let stats = BinStats::from_frames(frames.view()).map_err(at(mels_dir))?;
            let rvq = freeze_random(dims, cfg.frozen_seed()).and_then(|r| r.with_input_stats(stats)).map_err(at(mels_dir))?;
            let toks = rvq.encode_standardized(rvq.standardize(frames.view()).map_err(at(mels_dir))?.view(), melrvq_core::rvq::QuantizeMode::Training).map_err(at(mels_dir))?;
            let report = TrainReport {
                utilization: rvq.utilization(toks.view()),
                ..Default::default()
            };
            (rvq, report)
        }
    };
    let ckpt = out.join("rvq.mrvq");
    save_checkpoint(&rvq, &ckpt).map_err(at(&ckpt))?;
    let csv = out.join("rvq_report.csv");
    write(&csv, report.to_csv())?;
    let summary = json!({
        "vq_type": cfg.vq_type,
        "dims": dims,
        "report": report.summary_json(),
    });
    let js = out.join("rvq_report.json");
    write(&js, serde_json::to_string_pretty(&summary).expect("json"))?;
    let mut manifest = Manifest::new("train-rvq", cfg);
    add_inputs(&mut manifest, &files)?;
    manifest.artifact(&ckpt, true)?;
    manifest.artifact(&csv, true)?;
    manifest.artifact(&js, false)?;
    manifest.save(out)?;
    Ok(summary)
}

pub fn tokenize(rvq_path: &Path, mels_dir: &Path, out: &Path, csv: bool) -> Result<serde_json::Value, CliError> {
    let rvq = load_checkpoint(rvq_path).map_err(at(rvq_path))?;
    if rvq.source() != Source::Mel {
        return Err(CliError::Data(format!("{} quantizes latents, not mel frames", rvq_path.display())));
    }
    let (files, specs) = load_corpus(mels_dir)?;
    ensure_dir(out)?;
    let encoded = par::map(&specs, |s| rvq.encode(s));
    let mut manifest = Manifest::new("tokenize", &json!({ "rvq": rvq_path.display().to_string(), "csv": csv }));
    manifest.input(rvq_path)?;
    add_inputs(&mut manifest, &files)?;
    let mut entries = Vec::new();
    for (f, toks) in files.iter().zip(encoded) {
        let toks = toks.map_err(at(f))?;
        let dst = out.join(format!("{}.mtok", stem(f)));
        save_tokens(&dst, &toks).map_err(at(&dst))?;
        manifest.artifact(&dst, true)?;
        if csv {
            let c = out.join(format!("{}.csv", stem(f)));
            write(&c, toks.to_csv())?;
            manifest.artifact(&c, true)?;
        }
        entries.push(json!({
            "input": f.display().to_string(),
            "output": dst.display().to_string(),
            "frames": toks.num_frames(),
            "histogram": toks.histogram(),
        }));
    }
    let summary = out.join("tokenize_summary.json");
    write(&summary, serde_json::to_string_pretty(&entries).expect("json"))?;
    manifest.artifact(&summary, true)?;
    manifest.save(out)?;
    Ok(json!({ "written": entries.len() }))
}

/// What `report` reads back from a pretraining run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub stage: String,
    pub vq_type: VqType,
    pub source: Source,
    pub stages: usize,
    pub codebook_size: usize,
    pub report: PretrainReport,
    pub layers: Vec<LayerRow>,
    #[serde(default)]
    pub heldout_utilization: Vec<f64>,
}

fn write_run(out: &Path, prefix: &str, summary: &RunSummary, manifest: &mut Manifest) -> Result<(), CliError> {
    let js = out.join(format!("{prefix}_report.json"));
    write(&js, serde_json::to_string_pretty(summary).expect("json"))?;
    let loss = out.join(format!("{prefix}_loss.csv"));
    write(&loss, summary.report.to_csv())?;
    let layers = out.join(format!("{prefix}_layers.csv"));
    write(&layers, layer_table_csv(&summary.layers))?;
    manifest.artifact(&js, false)?;
    manifest.artifact(&loss, true)?;
    manifest.artifact(&layers, true)?;
    Ok(())
}

fn vq_type_of(rvq: &MelRvq) -> VqType {
    if rvq.is_frozen() {
        VqType::Random
    } else {
        VqType::Trained
    }
}

pub fn cmd_pretrain(cfg: &PipelineConfig, mels_dir: &Path, rvq_path: &Path, out: &Path) -> Result<serde_json::Value, CliError> {
    let rvq = load_checkpoint(rvq_path).map_err(at(rvq_path))?;
    let (files, specs) = load_corpus(mels_dir)?;
    ensure_dir(out)?;
    let tok = Tokenizer::Mel(&rvq);
    let (model, report) = pretrain(&specs, &tok, &cfg.model, &cfg.mask, &cfg.pretrain).map_err(at(mels_dir))?;
    let layers = layer_table(&model, &specs, &tok, cfg.pretrain.holdout_fraction).unwrap_or_default();
    let dims = rvq.dims();
    let summary = RunSummary {
        stage: "pretrain".into(),
        vq_type: vq_type_of(&rvq),
        source: rvq.source(),
        stages: dims.stages,
        codebook_size: dims.codebook_size,
        report,
        layers,
        heldout_utilization: Vec::new(),
    };
    let mut manifest = Manifest::new("pretrain", cfg);
    manifest.input(rvq_path)?;
    add_inputs(&mut manifest, &files)?;
    let ckpt = out.join("model.mtoy");
    save_model(&model, &ckpt).map_err(at(&ckpt))?;
    manifest.artifact(&ckpt, true)?;
    write_run(out, "pretrain", &summary, &mut manifest)?;
    manifest.save(out)?;
    Ok(json!({ "stage": "pretrain", "vq_type": summary.vq_type, "heldout": summary.report.heldout, "chance": summary.report.chance }))
}

pub fn cmd_iterate(cfg: &PipelineConfig, mels_dir: &Path, model_path: &Path, out: &Path) -> Result<serde_json::Value, CliError> {
    let teacher: SslToyModel = load_model(model_path).map_err(at(model_path))?;
    let (files, specs) = load_corpus(mels_dir)?;
    ensure_dir(out)?;
    let icfg = IterateConfig {
        layer: cfg.iterate.layer,
        rvq_dims: cfg.iterate.rvq.dims(teacher.config().d_model),
        rvq_train: cfg.iterate.train.clone(),
        model: cfg.model,
        mask: cfg.mask,
        pretrain: cfg.pretrain,
    };
    let res = iterate(&specs, &teacher, &icfg).map_err(at(mels_dir))?;
    let tok = Tokenizer::Latent {
        rvq: &res.rvq,
        teacher: &teacher,
        layer: res.layer,
    };
    let layers = layer_table(&res.model, &specs, &tok, cfg.pretrain.holdout_fraction).unwrap_or_default();
    let dims = res.rvq.dims();
    let summary = RunSummary {
        stage: "iterate".into(),
        vq_type: VqType::Trained,
        source: res.rvq.source(),
        stages: dims.stages,
        codebook_size: dims.codebook_size,
        report: res.report,
        layers,
        heldout_utilization: res.heldout_utilization,
    };
    let mut manifest = Manifest::new("iterate", cfg);
    manifest.input(model_path)?;
    add_inputs(&mut manifest, &files)?;
    let rvq_ckpt = out.join("rvq_iter.mrvq");
    save_checkpoint(&res.rvq, &rvq_ckpt).map_err(at(&rvq_ckpt))?;
    manifest.artifact(&rvq_ckpt, true)?;
    let rvq_csv = out.join("rvq_iter_report.csv");
    write(&rvq_csv, res.rvq_report.to_csv())?;
    manifest.artifact(&rvq_csv, true)?;
    let ckpt = out.join("model_iter.mtoy");
    save_model(&res.model, &ckpt).map_err(at(&ckpt))?;
    manifest.artifact(&ckpt, true)?;
    write_run(out, "iterate", &summary, &mut manifest)?;
    manifest.save(out)?;
    Ok(json!({
        "stage": "iterate",
        "layer": res.layer,
        "source": summary.source,
        "heldout": summary.report.heldout,
        "heldout_utilization": summary.heldout_utilization,
        "chance": summary.report.chance,
    }))
}

fn find_runs(run_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs = vec![run_dir.to_path_buf()];
    let rd = std::fs::read_dir(run_dir).map_err(|e| CliError::Data(format!("{}: {e}", run_dir.display())))?;
    let mut subs: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subs.sort();
    dirs.extend(subs);
    let mut found = Vec::new();
    for d in dirs {
        for name in ["pretrain_report.json", "iterate_report.json"] {
            let p = d.join(name);
            if p.is_file() {
                found.push(p);
            }
        }
    }
    Ok(found)
}

/// Merge run reports into an ablation table and a per-layer table.
pub fn report(run_dir: &Path, out: &Path) -> Result<serde_json::Value, CliError> {
    let files = find_runs(run_dir)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no run reports under {}", run_dir.display())));
    }
    ensure_dir(out)?;
    let mut ablation = String::from("run,stage,vq_type,source,stages,codebook_size,chance,head1_accuracy,head1_majority,mean_accuracy\n");
    let mut layers = String::from("run,stage,layer,mean_norm,adjacent_cosine,centroid_acc_head1\n");
    let mut rows = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
        let s: RunSummary = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
        let run = f.parent().and_then(|p| p.strip_prefix(run_dir).ok()).map(|p| p.display().to_string()).filter(|p| !p.is_empty()).unwrap_or_else(|| ".".into());
        let (acc1, maj1, mean) = match &s.report.heldout {
            Some(h) => (h.accuracy[0], h.majority_accuracy[0], h.accuracy.iter().sum::<f64>() / h.accuracy.len() as f64),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let vq = serde_json::to_value(s.vq_type).expect("json");
        let src = serde_json::to_value(s.source).expect("json");
        ablation.push_str(&format!(
            "{run},{},{},{},{},{},{},{acc1},{maj1},{mean}\n",
            s.stage,
            vq.as_str().unwrap_or(""),
            src.as_str().unwrap_or(""),
            s.stages,
            s.codebook_size,
            s.report.chance
        ));
        for l in &s.layers {
            layers.push_str(&format!("{run},{},{},{},{},{}\n", s.stage, l.layer, l.mean_norm, l.adjacent_cosine, l.centroid_acc_head1));
        }
        rows.push(json!({
            "run": run,
            "stage": s.stage,
            "vq_type": s.vq_type,
            "source": s.source,
            "stages": s.stages,
            "codebook_size": s.codebook_size,
            "chance": s.report.chance,
            "heldout": s.report.heldout,
        }));
    }
    write(&out.join("ablation.csv"), ablation)?;
    write(&out.join("layers.csv"), layers)?;
    let js = json!({ "runs": rows });
    write(&out.join("ablation.json"), serde_json::to_string_pretty(&js).expect("json"))?;
    Ok(json!({ "runs": files.len() }))
}

pub fn dcl_selftest(seed: u64) -> SelftestReport {
    selftest(seed)
}
