//! Training strategies compared on shared folds: site-local, cross-site,
//! pooled, ensembled, federated, and the two federated adaptation variants.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{prepare_fold, prepare_full_site, run_fed, train_local, FedConfig, FedTelemetry, LabeledWindows, SiteFold, SiteNode};
use crate::adaptation::{run_fed_align, site_probe_accuracy, train_fed_moe, AlignConfig, MoeConfig, ProbeSite};
use crate::data::{FeatureDataset, FoldSplit};
use crate::harness::eval::{evaluate_fold, FoldScore};
use crate::nn::{init_model, Arch, Mlp};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    /// One model per site, trained and tested within the site.
    Single,
    /// Trained on all of `train_site`'s subjects, tested on every other site.
    Cross { train_site: String },
    /// One model on the pooled training data of all sites.
    Mix,
    /// Averaged probabilities of the site's Single model and the Cross model
    /// of the next site (in site order).
    Ensemble,
    Fed,
    FedMoE,
    FedAlign,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyKind::Single => f.write_str("single"),
            StrategyKind::Cross { train_site } => write!(f, "cross:{train_site}"),
            StrategyKind::Mix => f.write_str("mix"),
            StrategyKind::Ensemble => f.write_str("ensemble"),
            StrategyKind::Fed => f.write_str("fed"),
            StrategyKind::FedMoE => f.write_str("fed-moe"),
            StrategyKind::FedAlign => f.write_str("fed-align"),
        }
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(site) = s.trim().strip_prefix("cross:").or_else(|| s.trim().strip_prefix("Cross:")) {
            if site.is_empty() {
                return Err(Error::InvalidArgument("cross strategy needs a training site".into()));
            }
            return Ok(StrategyKind::Cross {
                train_site: site.to_string(),
            });
        }
        match lower.as_str() {
            "single" => Ok(StrategyKind::Single),
            "mix" => Ok(StrategyKind::Mix),
            "ensemble" => Ok(StrategyKind::Ensemble),
            "fed" => Ok(StrategyKind::Fed),
            "fed-moe" | "fedmoe" => Ok(StrategyKind::FedMoE),
            "fed-align" | "fedalign" => Ok(StrategyKind::FedAlign),
            _ => Err(Error::InvalidArgument(format!("unknown strategy `{s}`"))),
        }
    }
}

impl Serialize for StrategyKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StrategyKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    /// Schedule shared by every strategy; only the federated ones communicate.
    pub fed: FedConfig,
    /// Architecture of Single and Cross models.
    pub single_arch: String,
    /// Architecture of the pooled Mix model.
    pub mix_arch: String,
    pub moe: MoeConfig,
    pub align: AlignConfig,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            fed: FedConfig::default(),
            single_arch: "single-mlp".into(),
            mix_arch: "fed-mlp".into(),
            moe: MoeConfig::default(),
            align: AlignConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteFoldScore {
    pub strategy: String,
    pub site: String,
    pub fold: usize,
    pub score: FoldScore,
}

/// Side products of one strategy run on one fold.
#[derive(Debug, Clone, Default)]
pub struct FoldArtifacts {
    /// Models by role: site id for Single, `global` for federated strategies.
    pub models: Vec<(String, Mlp)>,
    pub telemetry: Option<FedTelemetry>,
    /// MoE gate values on each site's test windows.
    pub gate_values: Vec<(String, Vec<f64>)>,
    /// Fed-Align discriminator probe accuracy (end of warmup, end of training).
    pub probe_accuracy: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub scores: Vec<SiteFoldScore>,
    pub sites: Vec<SiteFold>,
    pub artifacts: FoldArtifacts,
}

fn train_model(id: &str, arch_id: &str, data: LabeledWindows, cfg: &FedConfig) -> Result<Mlp> {
    let arch = Arch::resolve(arch_id, data.feature_dim())?;
    // independent trainers do not share an initialization
    let seed = cfg.seed ^ rng::stable_hash(id);
    let model = init_model(&arch, seed)?;
    let mut node = SiteNode::new(id, model, cfg.adam, data, cfg.steps_per_epoch, cfg.seed)?;
    train_local(&mut node, cfg.epochs, cfg.steps_per_epoch, &cfg.lr)?;
    Ok(node.model)
}

fn score(strategy: &StrategyKind, site: &SiteFold, fold: usize, predict: impl Fn(&Array2<f64>) -> Result<Array2<f64>>) -> Result<SiteFoldScore> {
    Ok(SiteFoldScore {
        strategy: strategy.to_string(),
        site: site.site_id.clone(),
        fold,
        score: evaluate_fold(predict, &site.test)?,
    })
}

fn train_singles(sites: &[SiteFold], cfg: &StrategyConfig) -> Result<Vec<Mlp>> {
    sites
        .par_iter()
        .map(|s| train_model(&s.site_id, &cfg.single_arch, s.train.clone(), &cfg.fed))
        .collect()
}

fn train_cross(dataset: &FeatureDataset, train_site: &str, cfg: &StrategyConfig) -> Result<Mlp> {
    if !dataset.sites().iter().any(|s| s == train_site) {
        return Err(Error::InvalidArgument(format!("cross strategy names unknown site `{train_site}`")));
    }
    let data = prepare_full_site(dataset, train_site)?;
    train_model(&format!("cross:{train_site}"), &cfg.single_arch, data, &cfg.fed)
}

fn fed_sites(sites: &[SiteFold]) -> Vec<(String, LabeledWindows)> {
    sites.iter().map(|s| (s.site_id.clone(), s.train.clone())).collect()
}

/// Site-probe accuracy on generator features at the end of warm-up and at
/// the end of training.
fn align_probe(sites: &[SiteFold], out: &crate::adaptation::AlignOutcome, cfg: &StrategyConfig) -> Result<(f64, f64)> {
    let probe_sites = sites
        .iter()
        .map(|s| {
            Ok(ProbeSite {
                site_id: s.site_id.clone(),
                train: s.train.inputs.clone(),
                test: LabeledWindows::from_subjects(&s.test)?.inputs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let split = cfg.align.split_index;
    let pre = out.warmup_global.split_at(split)?.0;
    let post = out.global.split_at(split)?.0;
    Ok((
        site_probe_accuracy(&pre, &probe_sites, &cfg.align.probe, cfg.fed.seed)?,
        site_probe_accuracy(&post, &probe_sites, &cfg.align.probe, cfg.fed.seed)?,
    ))
}

/// Trains and evaluates `kind` on one fold of `split`.
pub fn run_strategy_fold(
    kind: &StrategyKind,
    dataset: &FeatureDataset,
    split: &FoldSplit,
    fold: usize,
    cfg: &StrategyConfig,
) -> Result<FoldRun> {
    cfg.fed.validate()?;
    let sites = prepare_fold(dataset, split, fold)?;
    let mut artifacts = FoldArtifacts::default();
    let mut scores = Vec::new();
    match kind {
        StrategyKind::Single => {
            let models = train_singles(&sites, cfg)?;
            for (site, model) in sites.iter().zip(&models) {
                scores.push(score(kind, site, fold, |x| model.forward_eval(x))?);
            }
            artifacts.models = sites.iter().map(|s| s.site_id.clone()).zip(models).collect();
        }
        StrategyKind::Cross { train_site } => {
            let model = train_cross(dataset, train_site, cfg)?;
            for site in sites.iter().filter(|s| &s.site_id != train_site) {
                scores.push(score(kind, site, fold, |x| model.forward_eval(x))?);
            }
            artifacts.models.push((train_site.clone(), model));
        }
        StrategyKind::Mix => {
            let parts: Vec<&LabeledWindows> = sites.iter().map(|s| &s.train).collect();
            let model = train_model("mix", &cfg.mix_arch, LabeledWindows::concat(&parts)?, &cfg.fed)?;
            for site in &sites {
                scores.push(score(kind, site, fold, |x| model.forward_eval(x))?);
            }
            artifacts.models.push(("global".into(), model));
        }
        StrategyKind::Ensemble => {
            if sites.len() < 2 {
                return Err(Error::InvalidArgument("ensemble needs at least two sites".into()));
            }
            let singles = train_singles(&sites, cfg)?;
            let crosses = sites
                .par_iter()
                .map(|s| train_cross(dataset, &s.site_id, cfg))
                .collect::<Result<Vec<_>>>()?;
            for (i, site) in sites.iter().enumerate() {
                let (a, b) = (&singles[i], &crosses[(i + 1) % sites.len()]);
                scores.push(score(kind, site, fold, |x| Ok((a.forward_eval(x)? + b.forward_eval(x)?) * 0.5))?);
            }
        }
        StrategyKind::Fed => {
            let out = run_fed(&cfg.fed, &fed_sites(&sites))?;
            for site in &sites {
                scores.push(score(kind, site, fold, |x| out.global.forward_eval(x))?);
            }
            artifacts.models.push(("global".into(), out.global));
            artifacts.telemetry = Some(out.telemetry);
        }
        StrategyKind::FedMoE => {
            let out = train_fed_moe(&cfg.fed, &cfg.moe, &fed_sites(&sites))?;
            for (site, (_, head)) in sites.iter().zip(&out.heads) {
                scores.push(score(kind, site, fold, |x| head.forward(&out.global, x))?);
                let mut gates = Vec::new();
                for s in &site.test {
                    gates.extend(head.gate_values(&out.global, &s.windows)?);
                }
                artifacts.gate_values.push((site.site_id.clone(), gates));
            }
            artifacts.models.push(("global".into(), out.global));
            artifacts.telemetry = Some(out.telemetry);
        }
        StrategyKind::FedAlign => {
            let out = run_fed_align(&cfg.fed, &cfg.align, &fed_sites(&sites))?;
            for site in &sites {
                scores.push(score(kind, site, fold, |x| out.global.forward_eval(x))?);
            }
            artifacts.probe_accuracy = Some(align_probe(&sites, &out, cfg)?);
            artifacts.models.push(("global".into(), out.global));
            artifacts.telemetry = Some(out.telemetry);
        }
    }
    Ok(FoldRun {
        scores,
        sites,
        artifacts,
    })
}

/// All folds of `split`, in fold order.
pub fn run_strategy(kind: &StrategyKind, dataset: &FeatureDataset, split: &FoldSplit, cfg: &StrategyConfig) -> Result<Vec<SiteFoldScore>> {
    let runs = (0..split.k)
        .into_par_iter()
        .map(|fold| run_strategy_fold(kind, dataset, split, fold, cfg).map(|r| r.scores))
        .collect::<Result<Vec<_>>>()?;
    Ok(runs.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_ids_round_trip() {
        for id in ["single", "cross:NYU", "mix", "ensemble", "fed", "fed-moe", "fed-align"] {
            assert_eq!(id.parse::<StrategyKind>().unwrap().to_string(), id);
        }
        assert!("cross:".parse::<StrategyKind>().is_err());
        assert!("solo".parse::<StrategyKind>().is_err());
    }
}
