use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use raft_core::eval::{
    diagnostics, evaluate as eval_all, grid_search, run_single, score_model, similarity_study, stride_study,
    synthetic_study, training_length_study, write_diagnostics_csv, Dataset, MetricReport, MetricRow, RunConfig,
    TestWindows, Variant,
};
use raft_core::model::Checkpoint;
use raft_core::retrieval::{hash_values, MetricKind};
use raft_core::synthetic::{assemble, PatternKind, SyntheticSpec};
use rayon::prelude::*;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::manifest::Manifest;
use crate::Common;

/// Resolved config, output directory and a manifest already listing the inputs.
struct Session {
    cfg: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Session {
    fn start(command: &str, common: &Common, uses_dataset: bool) -> Result<Self> {
        let cfg = common.resolve()?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.jobs)
            .build_global()
            .context("configuring the worker pool")?;
        let out = cfg.run.out.clone();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let mut manifest = Manifest::new(command, &cfg.run.seeds, serde_json::to_value(&cfg)?);
        if let Some(p) = &common.config {
            manifest.input(p)?;
        }
        if uses_dataset {
            manifest.input(cfg.dataset_path()?)?;
        }
        Ok(Self { cfg, out, manifest })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.output(name);
        self.out.join(name)
    }

    fn write_text(&mut self, name: &str, text: String) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn write_report(&mut self, stem: &str, report: &MetricReport) -> Result<()> {
        report.write_csv(&self.path(&format!("{stem}.csv")))?;
        report.write_json(&self.path(&format!("{stem}.json")))?;
        if !report.timings.is_empty() {
            report.write_timings_csv(&self.path(&format!("{stem}_timings.csv")))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        self.manifest.write(&self.out)?;
        println!("wrote {}", self.out.display());
        Ok(())
    }
}

fn checkpoint_name(horizon: usize, seed: u64) -> String {
    format!("model_h{horizon}_s{seed}.raftm")
}

fn jobs_for(cfg: &ExperimentConfig) -> Vec<(usize, u64)> {
    cfg.model
        .horizons
        .iter()
        .flat_map(|&h| cfg.run.seeds.iter().map(move |&s| (h, s)))
        .collect()
}

pub fn train(common: &Common) -> Result<()> {
    let mut s = Session::start("train", common, true)?;
    let (_, _, ds) = s.cfg.dataset()?;
    let data_hash = hash_values(&ds.series.values());
    let jobs = jobs_for(&s.cfg);
    let outcomes = jobs
        .par_iter()
        .map(|&(h, seed)| run_single(&ds, &s.cfg.run_config(h), seed, &TestWindows::Skip))
        .collect::<raft_core::Result<Vec<_>>>()?;
    let mut fingerprints = Vec::new();
    for (&(h, seed), out) in jobs.iter().zip(outcomes) {
        let run = s.cfg.run_config(h);
        let meta = json!({ "run_config": run, "seed": seed, "dataset": ds.name, "dataset_hash": data_hash });
        fingerprints.push(meta.clone());
        let ckpt = s.path(&checkpoint_name(h, seed));
        Checkpoint::new(out.model, meta).save(&ckpt)?;
        out.history.write_csv(&s.path(&format!("history_h{h}_s{seed}.csv")))?;
        println!("h={h} seed={seed}: best epoch {} val mse {:.6}", out.history.best_epoch, out.val_mse);
    }
    s.write_text("fingerprint.json", serde_json::to_string_pretty(&fingerprints)? + "\n")?;
    s.finish()
}

/// Reject a checkpoint trained under a different config or dataset.
fn check_fingerprint(meta: &serde_json::Value, run: &RunConfig, data_hash: &str, path: &Path) -> Result<u64> {
    let stored: RunConfig = serde_json::from_value(meta["run_config"].clone())
        .with_context(|| format!("{} carries no run configuration", path.display()))?;
    if &stored != run {
        return Err(raft_core::RaftError::FingerprintMismatch {
            expected: serde_json::to_string(run)?,
            found: serde_json::to_string(&stored)?,
        })
        .with_context(|| format!("checkpoint {} was trained with a different configuration", path.display()));
    }
    if meta["dataset_hash"].as_str() != Some(data_hash) {
        return Err(raft_core::RaftError::FingerprintMismatch {
            expected: data_hash.to_string(),
            found: meta["dataset_hash"].to_string(),
        })
        .with_context(|| format!("checkpoint {} was trained on different data", path.display()));
    }
    meta["seed"].as_u64().with_context(|| format!("{} carries no seed", path.display()))
}

pub fn evaluate(common: &Common, checkpoints: &[PathBuf]) -> Result<()> {
    let mut s = Session::start("evaluate", common, true)?;
    let (_, _, ds) = s.cfg.dataset()?;
    let report = if checkpoints.is_empty() {
        let base = s.cfg.run_config(s.cfg.model.horizons[0]);
        eval_all(&ds, &base, &s.cfg.model.horizons, &s.cfg.run.seeds)?
    } else {
        let data_hash = hash_values(&ds.series.values());
        let mut report = MetricReport::default();
        for path in checkpoints {
            s.manifest.input(path)?;
            let ckpt = Checkpoint::load(path)?;
            let run = s.cfg.run_config(ckpt.model.horizon());
            let seed = check_fingerprint(&ckpt.meta, &run, &data_hash, path)?;
            let score = score_model(&ds, &run, &ckpt.model, seed)?;
            report.push(MetricRow {
                dataset: ds.name.clone(),
                horizon: Some(run.horizon),
                variant: run.variant.to_string(),
                setting: String::new(),
                seed: Some(seed),
                mse: score.mse,
                mae: score.mae,
            });
        }
        report
    };
    print_means(&report);
    s.write_report("metrics", &report)?;
    s.finish()
}

fn print_means(report: &MetricReport) {
    for r in report.means() {
        let h = r.horizon.map_or("avg".into(), |h| h.to_string());
        let setting = if r.setting.is_empty() { String::new() } else { format!(" [{}]", r.setting) };
        println!("{} h={h} {}{setting}: mse {:.4} mae {:.4}", r.dataset, r.variant, r.mse, r.mae);
    }
}

pub fn gridsearch(common: &Common) -> Result<()> {
    let mut s = Session::start("gridsearch", common, true)?;
    let (_, _, ds) = s.cfg.dataset()?;
    let space = s.cfg.grid_space();
    let mut tests = MetricReport::default();
    let mut selected = Vec::new();
    for &h in &s.cfg.model.horizons.clone() {
        let r = grid_search(&space, &ds, &s.cfg.run_config(h), h, &s.cfg.run.seeds)?;
        s.write_text(&format!("grid_h{h}.csv"), r.table_csv())?;
        println!(
            "h={h}: selected lookback {} lr {} m {}",
            r.best.lookback, r.best.learning_rate, r.best.m
        );
        selected.push(json!({ "horizon": h, "selected": r.best }));
        tests.extend(r.test);
    }
    s.write_text("selected.json", serde_json::to_string_pretty(&selected)? + "\n")?;
    s.write_report("metrics", &tests)?;
    s.finish()
}

pub fn ablate(common: &Common) -> Result<()> {
    let mut s = Session::start("ablate", common, true)?;
    let (_, _, ds) = s.cfg.dataset()?;
    let variants = if common.variant.is_some() || common.no_retrieval {
        let v = s.cfg.model.variant;
        if v == Variant::Full { vec![v] } else { vec![Variant::Full, v] }
    } else {
        s.cfg.study.variants.clone()
    };
    let base = s.cfg.run_config(s.cfg.model.horizons[0]);
    let mut report = MetricReport::default();
    for v in variants {
        report.extend(raft_core::eval::run_ablation(&ds, &base, v, &s.cfg.model.horizons, &s.cfg.run.seeds)?);
    }
    print_means(&report);
    s.write_report("ablation", &report)?;
    s.finish()
}

pub fn stride(common: &Common, strides: &[usize]) -> Result<()> {
    let mut s = Session::start("stride", common, true)?;
    let (_, _, ds) = s.cfg.dataset()?;
    let strides = if strides.is_empty() { s.cfg.study.strides.clone() } else { strides.to_vec() };
    let mut text = String::from("horizon,stride,candidates,precompute_seconds,mse,mae\n");
    let mut report = MetricReport::default();
    for &h in &s.cfg.model.horizons.clone() {
        let (rows, r) = stride_study(&ds, &s.cfg.run_config(h), &strides, &s.cfg.run.seeds)?;
        for row in rows {
            println!("h={h} stride {}: {} candidates, precompute {:.3}s, mse {:.4}", row.stride, row.candidates, row.precompute_seconds, row.mse);
            text.push_str(&format!("{h},{},{},{:.6},{},{}\n", row.stride, row.candidates, row.precompute_seconds, row.mse, row.mae));
        }
        report.extend(r);
    }
    s.write_text("stride.csv", text)?;
    s.write_report("metrics", &report)?;
    s.finish()
}

pub fn diagnose(common: &Common) -> Result<()> {
    let mut s = Session::start("diagnose", common, true)?;
    let (_, _, ds) = s.cfg.dataset()?;
    let h = s.cfg.model.horizons[0];
    let seed = s.cfg.run.seeds[0];
    let mut run = s.cfg.run_config(h);
    if run.variant == Variant::NoRetrieval {
        bail!("invalid parameter `variant`: diagnostics compare a retrieval variant against no_retrieval");
    }
    if run.retrieval.metric == MetricKind::CosineProjected {
        bail!("invalid parameter `metric`: diagnostics read cached retrievals, which projected similarity does not produce");
    }
    run.train.seed = seed;
    let (with, without) = rayon::join(
        || run_single(&ds, &run, seed, &TestWindows::All),
        || run_single(&ds, &RunConfig { variant: Variant::NoRetrieval, ..run.clone() }, seed, &TestWindows::All),
    );
    let (with, without) = (with?, without?);
    let (records, summary) = diagnostics(&ds, &run, &with, &without)?;
    write_diagnostics_csv(&records, &s.path("diagnostics.csv"))?;
    let doc = json!({
        "horizon": h,
        "seed": seed,
        "records": summary.records,
        "spearman_key_value": summary.spearman_key_value,
        "spearman_value_change": summary.spearman_value_change,
        "mse_with": with.test_mse,
        "mse_without": without.test_mse,
    });
    println!(
        "{} windows: spearman(key, value) {:.3}, spearman(value, change) {:.3}",
        summary.records, summary.spearman_key_value, summary.spearman_value_change
    );
    s.write_text("diagnostics_summary.json", serde_json::to_string_pretty(&doc)? + "\n")?;
    s.finish()
}

pub fn synth(common: &Common, kind: Option<PatternKind>, occurrences: &[usize], study: bool, n_series: Option<usize>) -> Result<()> {
    let mut s = Session::start("synth", common, false)?;
    let kind = kind.unwrap_or(s.cfg.synth.kind);
    let occurrences = if occurrences.is_empty() { s.cfg.synth.occurrences.clone() } else { occurrences.to_vec() };
    if occurrences.is_empty() {
        bail!("invalid parameter `occurrences`: at least one level is required");
    }
    let root = s.cfg.run.seeds[0];
    let base = SyntheticSpec { pattern_kind: kind, seed: root, ..s.cfg.synth.generator.clone() };
    if !study {
        for &occ in &occurrences {
            let spec = SyntheticSpec { occurrences_per_pattern: occ, ..base.clone() };
            let synth = assemble(&spec)?;
            let stem = format!("{}_occ{occ}_seed{root}", kind.as_str());
            let (series, notes) = (format!("{stem}.csv"), format!("{stem}_annotations.csv"));
            let (sp, np) = (s.path(&series), s.path(&notes));
            synth.write(&sp, &np)?;
            println!("{series}: {} steps, {} annotated spans", synth.series.len(), synth.annotations.len());
        }
        return s.finish();
    }
    let n = n_series.unwrap_or(s.cfg.synth.n_series);
    let h = s.cfg.model.horizons[0];
    let run = s.cfg.run_config(h);
    let (rows, summaries) = synthetic_study(&base, kind, &occurrences, n, &run)?;
    let mut text = String::from("occurrences,series_seed,mse_with,mse_without\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{}\n", r.occurrences, r.series_seed, r.mse_with, r.mse_without));
    }
    s.write_text("synthetic_rows.csv", text)?;
    let mut text = String::from("kind,occurrences,series,mse_with,mse_without,change_percent\n");
    for m in &summaries {
        println!("{} occurrences {}: with {:.4} without {:.4} change {:+.2}%", kind.as_str(), m.occurrences, m.mse_with, m.mse_without, m.change_percent);
        text.push_str(&format!("{},{},{},{},{},{}\n", kind.as_str(), m.occurrences, m.series, m.mse_with, m.mse_without, m.change_percent));
    }
    s.write_text("synthetic_summary.csv", text)?;
    s.finish()
}

fn require_univariate(ds: &Dataset) -> Result<()> {
    if ds.series.n_channels() != 1 {
        bail!(
            "invalid parameter `target`: this study runs on one channel, the dataset has {}; set data.target or pass --target",
            ds.series.n_channels()
        );
    }
    Ok(())
}

pub fn similarity(common: &Common, metrics: &[MetricKind]) -> Result<()> {
    let mut s = Session::start("similarity-study", common, true)?;
    let (_, _, ds) = s.cfg.dataset()?;
    require_univariate(&ds)?;
    let metrics = if metrics.is_empty() { s.cfg.study.metrics.clone() } else { metrics.to_vec() };
    let mut report = MetricReport::default();
    for &h in &s.cfg.model.horizons.clone() {
        report.extend(similarity_study(&ds, &s.cfg.run_config(h), &metrics, &s.cfg.run.seeds)?);
    }
    print_means(&report);
    s.write_report("similarity", &report)?;
    s.finish()
}

pub fn training_length(common: &Common, fractions: &[f64]) -> Result<()> {
    let mut s = Session::start("training-length-study", common, true)?;
    let (raw, split, ds) = s.cfg.dataset()?;
    let fractions = if fractions.is_empty() { s.cfg.study.fractions.clone() } else { fractions.to_vec() };
    let mut report = MetricReport::default();
    for &h in &s.cfg.model.horizons.clone() {
        report.extend(training_length_study(&raw, &ds.name, split, &s.cfg.run_config(h), &fractions, &s.cfg.run.seeds)?);
    }
    print_means(&report);
    s.write_report("training_length", &report)?;
    s.finish()
}
