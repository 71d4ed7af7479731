//! Experiment drivers: strategy comparison, pace and noise sweeps, biomarker
//! extraction, preprocessing and synthetic export. Every output file is a
//! pure function of the configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataKind, ExperimentConfig};
use super::stats::{mean, sample_std, welch_t};
use crate::adaptation::gate_histogram;
use crate::data::io::{export_synthetic, load_atlas_labels, load_dataset};
use crate::data::{subject_kfold, synth_generate, FeatureDataset, FoldSplit, SynthConfig};
use crate::federation::{run_strategy_fold, FoldRun, LabeledWindows, StrategyConfig, StrategyKind};
use crate::interpret::{top_k, write_biomarker_csv, BiomarkerReport, SaliencyAccumulator};
use crate::nn::Mlp;
use crate::privacy::{budget_for, population_std, Mechanism, NoiseSpec};
use crate::{Error, Result};

/// One (strategy, site, fold, seed, condition) accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub strategy: String,
    pub site: String,
    pub fold: usize,
    pub seed: u64,
    pub tau: usize,
    pub mechanism: Mechanism,
    pub alpha: f64,
    pub subject_accuracy: f64,
    pub window_accuracy: f64,
    pub n_subjects: usize,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetryRow {
    pub strategy: String,
    pub seed: u64,
    pub fold: usize,
    pub tau: usize,
    pub mechanism: Mechanism,
    pub alpha: f64,
    pub epoch: usize,
    pub step: usize,
    pub site: String,
    pub loss: f64,
    pub comm_event: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommRow {
    pub strategy: String,
    pub seed: u64,
    pub fold: usize,
    pub tau: usize,
    pub epoch: usize,
    pub step: usize,
    pub round: u64,
    pub kind: String,
    /// Shared tensor ids, `;`-separated.
    pub shared: String,
}

/// Nominal budget of one shared tensor of the final global model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub strategy: String,
    pub seed: u64,
    pub fold: usize,
    pub tensor: String,
    pub mechanism: Mechanism,
    pub alpha: f64,
    pub weight_std: f64,
    /// Noise standard deviation over sensitivity.
    pub sigma_prime: f64,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub in_regime: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateRow {
    pub seed: u64,
    pub fold: usize,
    pub site: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub seed: u64,
    pub fold: usize,
    pub pre_alignment: f64,
    pub post_alignment: f64,
}

/// Mean and spread over seeds of per-seed mean accuracies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub tau: usize,
    pub mechanism: Mechanism,
    pub alpha: f64,
    /// A site id, or `ALL` for the mean over sites.
    pub site: String,
    pub n_seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub site: String,
    pub condition_a: String,
    pub condition_b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiomarkerSummaryRow {
    pub strategy: String,
    pub seed: u64,
    pub class: String,
    pub consistency: f64,
    /// Planted ROIs among the top-k of the scores pooled over sites and
    /// classes (synthetic data only).
    pub planted_recovered: Option<usize>,
    pub k: usize,
}

/// Training variant of one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub tau: usize,
    pub noise: NoiseSpec,
}

/// Everything produced by one (variant, seed, strategy, fold) cell.
#[derive(Debug, Clone, Default)]
pub struct CellOutput {
    pub records: Vec<ResultRecord>,
    pub telemetry: Vec<TelemetryRow>,
    pub comms: Vec<CommRow>,
    pub budget: Vec<BudgetRow>,
    pub gates: Vec<GateRow>,
    pub probe: Vec<ProbeRow>,
}

impl CellOutput {
    fn extend(&mut self, other: CellOutput) {
        self.records.extend(other.records);
        self.telemetry.extend(other.telemetry);
        self.comms.extend(other.comms);
        self.budget.extend(other.budget);
        self.gates.extend(other.gates);
        self.probe.extend(other.probe);
    }
}

/// A featurized dataset for one seed; `planted` lists the ground-truth
/// informative ROIs of synthetic data.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub dataset: FeatureDataset,
    pub split: FoldSplit,
    pub planted: Option<Vec<usize>>,
}

/// The synthetic configuration used for `seed`.
pub fn synth_for_seed(base: &SynthConfig, seed: u64) -> SynthConfig {
    SynthConfig {
        seed: base.seed.wrapping_add(seed),
        ..base.clone()
    }
}

/// Builds the dataset and folds of every seed. CSV data is loaded once and
/// only the folds vary with the seed.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Vec<SeedData>> {
    match cfg.data.source {
        DataKind::Synth => cfg
            .seeds
            .par_iter()
            .map(|&seed| {
                let synth = synth_for_seed(&cfg.data.synth, seed);
                let raw = synth_generate(&synth)?;
                let dataset = FeatureDataset::from_series(&raw.series, synth.window, synth.stride)?;
                let split = subject_kfold(&dataset.keys(), cfg.k, seed)?;
                Ok(SeedData {
                    seed,
                    dataset,
                    split,
                    planted: Some(raw.informative_rois),
                })
            })
            .collect(),
        DataKind::Csv => {
            let (dir, pheno) = (
                cfg.data.roi_dir.as_ref().expect("validated"),
                cfg.data.phenotype.as_ref().expect("validated"),
            );
            let loaded = load_dataset(dir, pheno)?;
            let dataset = FeatureDataset::from_series(&loaded.series, cfg.data.window, cfg.data.stride)?;
            cfg.seeds
                .iter()
                .map(|&seed| {
                    Ok(SeedData {
                        seed,
                        split: subject_kfold(&dataset.keys(), cfg.k, seed)?,
                        dataset: dataset.clone(),
                        planted: None,
                    })
                })
                .collect()
        }
    }
}

/// Strategy configuration of one cell.
pub fn cell_config(base: &StrategyConfig, variant: Variant, seed: u64) -> StrategyConfig {
    let mut cfg = base.clone();
    cfg.fed.tau = variant.tau;
    cfg.fed.noise = variant.noise;
    cfg.fed.seed = seed;
    cfg
}

fn budget_rows(
    strategy: &str,
    seed: u64,
    fold: usize,
    global: &Mlp,
    noise: &NoiseSpec,
    delta: f64,
    sensitivity: f64,
) -> Result<Vec<BudgetRow>> {
    let mut rows = Vec::new();
    for (name, tensor) in global.param_names().into_iter().zip(global.params()) {
        let weight_std = population_std(tensor);
        let budget = budget_for(noise, weight_std, delta, sensitivity)?;
        rows.push(BudgetRow {
            strategy: strategy.to_string(),
            seed,
            fold,
            tensor: name,
            mechanism: noise.mechanism,
            alpha: noise.alpha,
            weight_std,
            sigma_prime: if noise.is_active() { noise.alpha * weight_std / sensitivity } else { 0.0 },
            epsilon: budget.map(|b| b.epsilon),
            delta: budget.map(|b| b.delta),
            in_regime: budget.map(|b| b.in_regime),
        });
    }
    Ok(rows)
}

/// Runs one cell and flattens its artifacts into output rows.
pub fn run_cell(
    cfg: &ExperimentConfig,
    data: &SeedData,
    kind: &StrategyKind,
    variant: Variant,
    fold: usize,
) -> Result<(CellOutput, FoldRun)> {
    let scfg = cell_config(&cfg.train, variant, data.seed);
    let run = run_strategy_fold(kind, &data.dataset, &data.split, fold, &scfg)?;
    let strategy = kind.to_string();
    let seed = data.seed;
    let (mechanism, alpha) = (variant.noise.mechanism, variant.noise.alpha);
    let mut out = CellOutput::default();
    for s in &run.scores {
        out.records.push(ResultRecord {
            strategy: strategy.clone(),
            site: s.site.clone(),
            fold,
            seed,
            tau: variant.tau,
            mechanism,
            alpha,
            subject_accuracy: s.score.subject_accuracy,
            window_accuracy: s.score.window_accuracy,
            n_subjects: s.score.n_subjects,
            n_windows: s.score.n_windows,
        });
    }
    if let Some(tel) = &run.artifacts.telemetry {
        if cfg.telemetry {
            out.telemetry = tel
                .steps
                .iter()
                .map(|r| TelemetryRow {
                    strategy: strategy.clone(),
                    seed,
                    fold,
                    tau: variant.tau,
                    mechanism,
                    alpha,
                    epoch: r.epoch,
                    step: r.step,
                    site: r.site.clone(),
                    loss: r.loss,
                    comm_event: r.comm_event,
                })
                .collect();
        }
        out.comms = tel
            .comms
            .iter()
            .map(|c| CommRow {
                strategy: strategy.clone(),
                seed,
                fold,
                tau: variant.tau,
                epoch: c.epoch,
                step: c.step,
                round: c.round,
                kind: format!("{:?}", c.kind).to_lowercase(),
                shared: c.shared.join(";"),
            })
            .collect();
        if let Some((_, global)) = run.artifacts.models.iter().find(|(n, _)| n == "global") {
            out.budget = budget_rows(&strategy, seed, fold, global, &variant.noise, cfg.delta, cfg.sensitivity)?;
        }
    }
    let bins = cfg.gate_bins;
    for (site, values) in &run.artifacts.gate_values {
        for (b, count) in gate_histogram(values, bins).into_iter().enumerate() {
            out.gates.push(GateRow {
                seed,
                fold,
                site: site.clone(),
                bin_lo: b as f64 / bins as f64,
                bin_hi: (b + 1) as f64 / bins as f64,
                count,
            });
        }
    }
    if let Some((pre, post)) = run.artifacts.probe_accuracy {
        out.probe.push(ProbeRow {
            seed,
            fold,
            pre_alignment: pre,
            post_alignment: post,
        });
    }
    Ok((out, run))
}

/// Runs every (variant, seed, strategy, fold) cell in parallel and merges
/// the outputs in that nesting order.
pub fn run_grid(cfg: &ExperimentConfig, data: &[SeedData], kinds: &[StrategyKind], variants: &[Variant]) -> Result<CellOutput> {
    let mut cells = Vec::new();
    for v in variants {
        for d in data {
            for kind in kinds {
                for fold in 0..cfg.k {
                    cells.push((*v, d, kind, fold));
                }
            }
        }
    }
    info!("running {} cells", cells.len());
    let outputs = cells
        .par_iter()
        .map(|(v, d, kind, fold)| run_cell(cfg, d, kind, *v, *fold).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let mut merged = CellOutput::default();
    for o in outputs {
        merged.extend(o);
    }
    Ok(merged)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a CSV with only a header line when `rows` is empty.
fn write_csv_or_header<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        w.flush()?;
        Ok(())
    } else {
        write_csv(path, rows)
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn condition(r: &ResultRecord) -> (String, usize, Mechanism, u64) {
    (r.strategy.clone(), r.tau, r.mechanism, r.alpha.to_bits())
}

fn condition_label(c: &(String, usize, Mechanism, u64)) -> String {
    format!("{} tau={} {}:{}", c.0, c.1, c.2, f64::from_bits(c.3))
}

/// Per-seed mean subject accuracy of each condition at `site` (`None`:
/// mean over all sites and folds).
fn seed_means(records: &[ResultRecord], site: Option<&str>) -> BTreeMap<(String, usize, Mechanism, u64), Vec<f64>> {
    let mut acc: BTreeMap<_, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| site.is_none_or(|s| r.site == s)) {
        acc.entry(condition(r)).or_default().entry(r.seed).or_default().push(r.subject_accuracy);
    }
    acc.into_iter()
        .map(|(c, by_seed)| (c, by_seed.values().map(|v| mean(v)).collect()))
        .collect()
}

/// Condition order of first appearance, so reports follow the configuration.
fn condition_order(records: &[ResultRecord]) -> Vec<(String, usize, Mechanism, u64)> {
    let mut order = Vec::new();
    for r in records {
        let c = condition(r);
        if !order.contains(&c) {
            order.push(c);
        }
    }
    order
}

fn site_order(records: &[ResultRecord]) -> Vec<String> {
    let mut sites: Vec<String> = Vec::new();
    for r in records {
        if !sites.contains(&r.site) {
            sites.push(r.site.clone());
        }
    }
    sites
}

/// Seed-level summaries and pairwise Welch comparisons between conditions,
/// per site and over all sites.
pub fn summarize(records: &[ResultRecord]) -> Result<(Vec<SummaryRow>, Vec<ComparisonRow>)> {
    let order = condition_order(records);
    let mut summary = Vec::new();
    let mut comparisons = Vec::new();
    let mut scopes: Vec<Option<String>> = site_order(records).into_iter().map(Some).collect();
    scopes.push(None);
    for scope in &scopes {
        let means = seed_means(records, scope.as_deref());
        let site = scope.clone().unwrap_or_else(|| "ALL".into());
        for c in &order {
            let Some(v) = means.get(c) else { continue };
            summary.push(SummaryRow {
                strategy: c.0.clone(),
                tau: c.1,
                mechanism: c.2,
                alpha: f64::from_bits(c.3),
                site: site.clone(),
                n_seeds: v.len(),
                mean_accuracy: mean(v),
                std_accuracy: sample_std(v),
            });
        }
        for (i, a) in order.iter().enumerate() {
            for b in &order[i + 1..] {
                let (Some(va), Some(vb)) = (means.get(a), means.get(b)) else { continue };
                if va.len() < 2 || vb.len() < 2 {
                    continue;
                }
                let w = welch_t(va, vb)?;
                comparisons.push(ComparisonRow {
                    site: site.clone(),
                    condition_a: condition_label(a),
                    condition_b: condition_label(b),
                    mean_a: mean(va),
                    mean_b: mean(vb),
                    t: w.t,
                    df: w.df,
                    p: w.p,
                });
            }
        }
    }
    Ok((summary, comparisons))
}

fn write_report(out: &Path, records: &[ResultRecord]) -> Result<()> {
    let (summary, comparisons) = summarize(records)?;
    write_csv(&out.join("summary.csv"), &summary)?;
    write_csv_or_header(
        &out.join("comparisons.csv"),
        &comparisons,
        &["site", "condition_a", "condition_b", "mean_a", "mean_b", "t", "df", "p"],
    )
}

fn write_outputs(out: &Path, prefix: &str, o: &CellOutput, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    write_csv(&out.join(format!("{prefix}results.csv")), &o.records)?;
    if !o.telemetry.is_empty() {
        write_csv(&out.join(format!("{prefix}telemetry.csv")), &o.telemetry)?;
    }
    if !o.comms.is_empty() {
        write_csv(&out.join(format!("{prefix}comms.csv")), &o.comms)?;
    }
    if !o.budget.is_empty() {
        write_csv(&out.join(format!("{prefix}budget.csv")), &o.budget)?;
    }
    if !o.gates.is_empty() {
        write_csv(&out.join(format!("{prefix}gates.csv")), &o.gates)?;
    }
    if !o.probe.is_empty() {
        write_csv(&out.join(format!("{prefix}probe.csv")), &o.probe)?;
    }
    write_report(out, &o.records)
}

fn base_variant(cfg: &ExperimentConfig) -> Variant {
    Variant {
        tau: cfg.train.fed.tau,
        noise: cfg.train.fed.noise,
    }
}

/// Strategy comparison: every configured strategy on every seed and fold.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<CellOutput> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let out = run_grid(cfg, &data, &cfg.strategies, &[base_variant(cfg)])?;
    write_outputs(&cfg.out_dir, "", &out, cfg)?;
    Ok(out)
}

/// Fed accuracy for every τ of `tau_grid`.
pub fn cmd_sweep_pace(cfg: &ExperimentConfig) -> Result<CellOutput> {
    cfg.validate()?;
    cfg.require_tau_grid()?;
    let data = prepare_data(cfg)?;
    let variants: Vec<Variant> = cfg
        .tau_grid
        .iter()
        .map(|&tau| Variant {
            tau,
            ..base_variant(cfg)
        })
        .collect();
    let out = run_grid(cfg, &data, &[StrategyKind::Fed], &variants)?;
    write_outputs(&cfg.out_dir, "sweep_pace_", &out, cfg)?;
    Ok(out)
}

/// Fed accuracy for every mechanism and level of `noise_grid`.
pub fn cmd_sweep_noise(cfg: &ExperimentConfig) -> Result<CellOutput> {
    cfg.validate()?;
    cfg.require_noise_grid()?;
    let data = prepare_data(cfg)?;
    let variants: Vec<Variant> = cfg
        .noise_grid
        .iter()
        .map(|&noise| Variant {
            noise,
            ..base_variant(cfg)
        })
        .collect();
    let out = run_grid(cfg, &data, &[StrategyKind::Fed], &variants)?;
    write_outputs(&cfg.out_dir, "sweep_noise_", &out, cfg)?;
    Ok(out)
}

/// Biomarker report of one strategy on one seed, with saliency averaged over
/// the test points of all folds (each fold scored by its own model).
pub fn strategy_biomarkers(cfg: &ExperimentConfig, data: &SeedData, kind: &StrategyKind) -> Result<BiomarkerReport> {
    let runs = (0..cfg.k)
        .into_par_iter()
        .map(|fold| run_cell(cfg, data, kind, base_variant(cfg), fold).map(|(_, r)| r))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = SaliencyAccumulator::new(data.dataset.n_rois, cfg.interpret.mode);
    for run in &runs {
        let models = &run.artifacts.models;
        for site in &run.sites {
            let model = models
                .iter()
                .find(|(n, _)| n == &site.site_id)
                .or_else(|| models.iter().find(|(n, _)| n == "global"))
                .map(|(_, m)| m)
                .ok_or_else(|| Error::InvalidArgument(format!("strategy `{kind}` exposes no model for interpretation")))?;
            let test = LabeledWindows::from_subjects(&site.test)?;
            acc.add(&site.site_id, model, &test.inputs, &test.labels)?;
        }
    }
    acc.finish(cfg.interpret.k)
}

/// Planted ROIs among the pooled top-k.
pub fn planted_recovered(report: &BiomarkerReport, planted: &[usize]) -> usize {
    report.pooled_top_k().iter().filter(|r| planted.contains(r)).count()
}

/// Biomarker reports of each interpretation strategy for every seed.
pub fn cmd_interpret(cfg: &ExperimentConfig) -> Result<Vec<(StrategyKind, u64, BiomarkerReport)>> {
    cfg.validate()?;
    if cfg.interpret.strategies.is_empty() || cfg.interpret.k == 0 {
        return Err(Error::Config("interpret needs strategies and k >= 1".into()));
    }
    let labels = cfg.interpret.atlas_labels.as_deref().map(load_atlas_labels).transpose()?;
    let data = prepare_data(cfg)?;
    let out = cfg.out_dir.join("biomarkers");
    fs::create_dir_all(&out)?;
    let mut reports = Vec::new();
    let mut summary = Vec::new();
    for kind in &cfg.interpret.strategies {
        for d in &data {
            let report = strategy_biomarkers(cfg, d, kind)?;
            let file = format!("{}_seed{}.csv", kind.to_string().replace(':', "-"), d.seed);
            write_biomarker_csv(&report, labels.as_ref(), &out.join(file))?;
            let recovered = d.planted.as_ref().map(|p| planted_recovered(&report, p));
            for (c, v) in &report.consistency {
                summary.push(BiomarkerSummaryRow {
                    strategy: kind.to_string(),
                    seed: d.seed,
                    class: crate::data::io::label_name(*c).to_string(),
                    consistency: *v,
                    planted_recovered: recovered,
                    k: report.k,
                });
            }
            reports.push((kind.clone(), d.seed, report));
        }
    }
    write_csv(&cfg.out_dir.join("biomarker_summary.csv"), &summary)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowCountRow {
    pub subject_id: String,
    pub site_id: String,
    pub label: String,
    pub frames: usize,
    pub windows: usize,
}

/// Featurizes ROI CSVs: one `features.csv` row per window and a per-subject
/// window count table.
pub fn cmd_preprocess(roi_dir: &Path, phenotype: &Path, window: usize, stride: usize, out: &Path) -> Result<FeatureDataset> {
    let loaded = load_dataset(roi_dir, phenotype)?;
    let dataset = FeatureDataset::from_series(&loaded.series, window, stride)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("features.csv"))?;
    let mut header = vec!["subject_id".to_string(), "site_id".into(), "label".into(), "window".into()];
    header.extend((0..dataset.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in &dataset.subjects {
        for (i, row) in s.windows.rows().into_iter().enumerate() {
            let mut rec = vec![
                s.subject_id.clone(),
                s.site_id.clone(),
                crate::data::io::label_name(s.label).to_string(),
                i.to_string(),
            ];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let counts: Vec<WindowCountRow> = loaded
        .series
        .iter()
        .zip(&dataset.subjects)
        .map(|(raw, s)| WindowCountRow {
            subject_id: s.subject_id.clone(),
            site_id: s.site_id.clone(),
            label: crate::data::io::label_name(s.label).to_string(),
            frames: raw.frames(),
            windows: s.windows.nrows(),
        })
        .collect();
    write_csv(&out.join("window_counts.csv"), &counts)?;
    info!("{} subjects featurized, {} dropped", dataset.subjects.len(), loaded.dropped);
    Ok(dataset)
}

/// Writes a synthetic dataset in the ROI/phenotype CSV layout.
pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let data = synth_generate(cfg)?;
    export_synthetic(&data, out)
}

/// Recomputes `summary.csv` and `comparisons.csv` from a results file.
pub fn cmd_report(results: &Path, out: &Path) -> Result<(Vec<SummaryRow>, Vec<ComparisonRow>)> {
    let records = read_results(results)?;
    if records.is_empty() {
        return Err(Error::Empty(format!("{} has no records", results.display())));
    }
    fs::create_dir_all(out)?;
    write_report(out, &records)?;
    summarize(&records)
}

/// Output directory precedence: explicit flag, then `FEDCONN_OUT`, then the
/// configuration file.
pub fn resolve_out_dir(flag: Option<PathBuf>, env: Option<String>, config: &Path) -> PathBuf {
    flag.or_else(|| env.filter(|e| !e.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| config.to_path_buf())
}

/// Top-k ROI names or indices for display.
pub fn describe_top(scores: &[f64], k: usize, labels: Option<&BTreeMap<usize, String>>) -> Vec<String> {
    top_k(scores, k)
        .into_iter()
        .map(|i| labels.and_then(|l| l.get(&i)).cloned().unwrap_or_else(|| format!("roi{i}")))
        .collect()
}
