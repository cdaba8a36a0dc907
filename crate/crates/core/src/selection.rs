//! Training-data selection: ranking candidate training subsets by held-out
//! DSC, and suggesting which unlabeled volumes to annotate by how low the
//! probe DSC stays once their pseudo-labels join the training set.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::hard_dsc;
use crate::predict::{predict_volume, Preprocess};
use crate::train::{fit_volumes, TrainConfig, TrainHistory};
use crate::unet::{UNet, UNetConfig};
use crate::volume::{LabelVolume, LabeledVolume, Tissue, Volume};

pub const DEFAULT_FIXED_EPOCHS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSubset {
    pub id: String,
    pub volume_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidates {
    Explicit(Vec<CandidateSubset>),
    /// `count` subsets of `size` ids drawn with replacement from the pool.
    Sampled { count: usize, size: usize, seed: u64 },
}

impl Candidates {
    pub fn mode(&self) -> &'static str {
        match self {
            Candidates::Explicit(_) => "explicit",
            Candidates::Sampled { .. } => "sampled",
        }
    }

    pub fn resolve(&self, pool_ids: &[String]) -> Result<Vec<CandidateSubset>> {
        match self {
            Candidates::Explicit(c) => Ok(c.clone()),
            &Candidates::Sampled { count, size, seed } => {
                if pool_ids.is_empty() || size == 0 || count == 0 {
                    return Err(Error::Selection("sampling needs a nonempty pool, size and count".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let width = count.to_string().len().max(2);
                Ok((1..=count)
                    .map(|i| CandidateSubset {
                        id: format!("sample{i:0width$}"),
                        volume_ids: (0..size)
                            .map(|_| pool_ids[rng.random_range(0..pool_ids.len())].clone())
                            .collect(),
                    })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Bootstrap,
    Suggest,
    Verify,
}

impl SelectionMode {
    fn name(self) -> &'static str {
        match self {
            SelectionMode::Bootstrap => "bootstrap",
            SelectionMode::Suggest => "suggest",
            SelectionMode::Verify => "verify",
        }
    }
}

/// Per-class DSC averaged over evaluation volumes, then over tissues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueScore {
    pub dsc: [f64; 3],
    pub mean_dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub dsc_csf: f64,
    pub dsc_gm: f64,
    pub dsc_wm: f64,
    pub mean_dsc: f64,
    pub rank: usize,
    pub suggested: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub mode: SelectionMode,
    /// `explicit`, `sampled` or `unlabeled`.
    pub candidate_mode: String,
    pub fixed_epochs: Option<usize>,
    pub seed: u64,
    pub config_hash: Option<String>,
    /// Rows in rank order.
    pub rows: Vec<ReportRow>,
}

pub const REPORT_CSV_HEADER: &str = "candidate_or_volume_id,dsc_csf,dsc_gm,dsc_wm,mean_dsc,rank,suggested";

impl SelectionReport {
    fn build(mode: SelectionMode, candidate_mode: &str, fixed_epochs: Option<usize>, seed: u64, scores: Vec<(String, TissueScore)>, suggest: usize) -> Self {
        let mut scores = scores;
        scores.sort_by(|a, b| {
            let ord = a.1.mean_dsc.total_cmp(&b.1.mean_dsc);
            let ord = if mode == SelectionMode::Suggest { ord } else { ord.reverse() };
            ord.then_with(|| a.0.cmp(&b.0))
        });
        let rows = scores
            .into_iter()
            .enumerate()
            .map(|(i, (id, s))| ReportRow {
                id,
                dsc_csf: s.dsc[0],
                dsc_gm: s.dsc[1],
                dsc_wm: s.dsc[2],
                mean_dsc: s.mean_dsc,
                rank: i + 1,
                suggested: i < suggest,
            })
            .collect();
        SelectionReport {
            mode,
            candidate_mode: candidate_mode.into(),
            fixed_epochs,
            seed,
            config_hash: None,
            rows,
        }
    }

    /// Ids flagged as the outcome: the winner, or the suggested volumes.
    pub fn selected(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| r.suggested).map(|r| r.id.as_str()).collect()
    }

    pub fn winner(&self) -> Option<&ReportRow> {
        self.rows.first()
    }

    pub fn to_csv(&self) -> String {
        let fixed = self.fixed_epochs.map_or("NA".to_string(), |e| e.to_string());
        let mut s = format!(
            "# mode={} candidates={} fixed_epochs={} seed={} config_hash={}\n{REPORT_CSV_HEADER}\n",
            self.mode.name(),
            self.candidate_mode,
            fixed,
            self.seed,
            self.config_hash.as_deref().unwrap_or("NA"),
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.id, r.dsc_csf, r.dsc_gm, r.dsc_wm, r.mean_dsc, r.rank, r.suggested
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean hard DSC per tissue over `eval_set`, then over the three tissues.
pub fn score_model(model: &UNet<f32>, eval_set: &[&LabeledVolume], pre: &Preprocess) -> Result<TissueScore> {
    if eval_set.is_empty() {
        return Err(Error::Selection("evaluation set is empty".into()));
    }
    let mut dsc = [0.0; 3];
    for v in eval_set {
        let pred = predict_volume(model, &v.image, pre)?;
        for (i, t) in Tissue::FOREGROUND.iter().enumerate() {
            dsc[i] += hard_dsc(&v.labels, &pred, t.id())?;
        }
    }
    let n = eval_set.len() as f64;
    let dsc = dsc.map(|d| d / n);
    Ok(TissueScore {
        dsc,
        mean_dsc: dsc.iter().sum::<f64>() / 3.0,
    })
}

fn ids(vols: &[&LabeledVolume]) -> BTreeSet<String> {
    vols.iter().map(|v| v.id.clone()).collect()
}

fn lookup<'a>(pool: &[&'a LabeledVolume], id: &str) -> Result<&'a LabeledVolume> {
    pool.iter()
        .copied()
        .find(|v| v.id == id)
        .ok_or_else(|| Error::UnknownId(id.to_owned()))
}

fn check_candidates(pool: &[&LabeledVolume], candidates: &[CandidateSubset], eval_set: &[&LabeledVolume]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Selection("no candidate subsets".into()));
    }
    let eval_ids = ids(eval_set);
    let mut seen = BTreeSet::new();
    for c in candidates {
        if c.volume_ids.is_empty() {
            return Err(Error::Selection(format!("candidate {:?} is empty", c.id)));
        }
        if !seen.insert(c.id.as_str()) {
            return Err(Error::Selection(format!("duplicate candidate id {:?}", c.id)));
        }
        let mut overlap: Vec<String> = c.volume_ids.iter().filter(|id| eval_ids.contains(*id)).cloned().collect();
        if !overlap.is_empty() {
            overlap.dedup();
            return Err(Error::EvalOverlap {
                candidate: c.id.clone(),
                ids: overlap,
            });
        }
        for id in &c.volume_ids {
            lookup(pool, id)?;
        }
    }
    Ok(())
}

fn score_candidates(
    pool: &[&LabeledVolume],
    candidates: &[CandidateSubset],
    eval_set: &[&LabeledVolume],
    model_cfg: &UNetConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<(String, TissueScore)>> {
    check_candidates(pool, candidates, eval_set)?;
    candidates
        .iter()
        .map(|c| {
            let vols = c.volume_ids.iter().map(|id| lookup(pool, id)).collect::<Result<Vec<_>>>()?;
            let (model, _) = fit_volumes(model_cfg, train_cfg, &vols)?;
            let score = score_model(&model, eval_set, &train_cfg.preprocess)?;
            log::info!("candidate {}: mean DSC {:.4}", c.id, score.mean_dsc);
            Ok((c.id.clone(), score))
        })
        .collect()
}

/// Train a fresh model per candidate subset (same configuration and seed
/// for each) and rank candidates by mean tissue DSC on `eval_set`,
/// highest first.
pub fn bootstrap_select(
    pool: &[&LabeledVolume],
    candidates: &Candidates,
    eval_set: &[&LabeledVolume],
    model_cfg: &UNetConfig,
    train_cfg: &TrainConfig,
) -> Result<SelectionReport> {
    let pool_ids: Vec<String> = ids(pool).into_iter().collect();
    let resolved = candidates.resolve(&pool_ids)?;
    let scores = score_candidates(pool, &resolved, eval_set, model_cfg, train_cfg)?;
    let fixed = train_cfg.fixed_epochs.then_some(train_cfg.max_epochs);
    Ok(SelectionReport::build(SelectionMode::Bootstrap, candidates.mode(), fixed, train_cfg.seed, scores, 1))
}

/// Compare a selected subset against alternatives; rows rank highest
/// mean DSC first and the selected subset is flagged.
pub fn verify_selection(
    pool: &[&LabeledVolume],
    selected: &CandidateSubset,
    alternatives: &[CandidateSubset],
    eval_set: &[&LabeledVolume],
    model_cfg: &UNetConfig,
    train_cfg: &TrainConfig,
) -> Result<SelectionReport> {
    let mut all = vec![selected.clone()];
    all.extend_from_slice(alternatives);
    let scores = score_candidates(pool, &all, eval_set, model_cfg, train_cfg)?;
    let fixed = train_cfg.fixed_epochs.then_some(train_cfg.max_epochs);
    let mut report = SelectionReport::build(SelectionMode::Verify, "explicit", fixed, train_cfg.seed, scores, 0);
    for r in &mut report.rows {
        r.suggested = r.id == selected.id;
    }
    Ok(report)
}

/// Tile, forward, untile and take the argmax.
pub fn pseudo_label(model: &UNet<f32>, unlabeled: &Volume, pre: &Preprocess) -> Result<LabelVolume> {
    predict_volume(model, unlabeled, pre)
}

#[derive(Debug, Clone)]
pub struct UnlabeledVolume {
    pub id: String,
    pub image: Volume,
}

#[derive(Debug, Clone)]
pub struct SuggestOutcome {
    pub report: SelectionReport,
    pub base_history: TrainHistory,
}

/// Train a base model on `base_train`, then for each unlabeled volume
/// retrain from scratch on `base_train` plus that volume's pseudo-label for
/// exactly `fixed_epochs` and score on `probe_set`. Volumes are ranked by
/// ascending probe DSC and the `k` lowest are suggested for annotation.
pub fn suggest_annotations(
    base_train: &[&LabeledVolume],
    unlabeled: &[UnlabeledVolume],
    probe_set: &[&LabeledVolume],
    model_cfg: &UNetConfig,
    train_cfg: &TrainConfig,
    fixed_epochs: usize,
    k: usize,
) -> Result<SuggestOutcome> {
    if k > unlabeled.len() {
        return Err(Error::Selection(format!(
            "k = {k} exceeds the {} unlabeled volumes",
            unlabeled.len()
        )));
    }
    if fixed_epochs == 0 {
        return Err(Error::Selection("fixed_epochs must be >= 1".into()));
    }
    let probe_ids = ids(probe_set);
    let mut clash: Vec<String> = base_train
        .iter()
        .map(|v| &v.id)
        .chain(unlabeled.iter().map(|u| &u.id))
        .filter(|id| probe_ids.contains(*id))
        .cloned()
        .collect();
    if !clash.is_empty() {
        clash.sort();
        clash.dedup();
        return Err(Error::OverlappingRoles(clash));
    }
    let base_ids = ids(base_train);
    let mut unl_ids = BTreeSet::new();
    for u in unlabeled {
        if base_ids.contains(&u.id) || !unl_ids.insert(u.id.as_str()) {
            return Err(Error::OverlappingRoles(vec![u.id.clone()]));
        }
    }

    let (base_model, base_history) = fit_volumes(model_cfg, train_cfg, base_train)?;
    let fixed_cfg = TrainConfig {
        fixed_epochs: true,
        max_epochs: fixed_epochs,
        ..train_cfg.clone()
    };
    let mut scores = Vec::with_capacity(unlabeled.len());
    for u in unlabeled {
        let pseudo = pseudo_label(&base_model, &u.image, &train_cfg.preprocess)?;
        let augmented = LabeledVolume::new(u.id.clone(), u.image.clone(), pseudo)?;
        let mut set: Vec<&LabeledVolume> = base_train.to_vec();
        set.push(&augmented);
        let (model, _) = fit_volumes(model_cfg, &fixed_cfg, &set)?;
        let score = score_model(&model, probe_set, &train_cfg.preprocess)?;
        log::info!("unlabeled {}: probe mean DSC {:.4}", u.id, score.mean_dsc);
        scores.push((u.id.clone(), score));
    }
    let report = SelectionReport::build(SelectionMode::Suggest, "unlabeled", Some(fixed_epochs), train_cfg.seed, scores, k);
    Ok(SuggestOutcome { report, base_history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(m: f64) -> TissueScore {
        TissueScore { dsc: [m; 3], mean_dsc: m }
    }

    #[test]
    fn ranking_directions_and_ties() {
        let scores = vec![
            ("b".to_string(), score(0.5)),
            ("a".to_string(), score(0.5)),
            ("c".to_string(), score(0.9)),
        ];
        let r = SelectionReport::build(SelectionMode::Bootstrap, "explicit", None, 0, scores.clone(), 1);
        let order: Vec<&str> = r.rows.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
        assert_eq!(r.selected(), ["c"]);
        let r = SelectionReport::build(SelectionMode::Suggest, "unlabeled", Some(50), 0, scores, 2);
        let order: Vec<&str> = r.rows.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(order, ["a", "b", "c"]);
        assert_eq!(r.selected(), ["a", "b"]);
        assert_eq!(r.rows.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3]);
        let csv = r.to_csv();
        assert!(csv.starts_with("# mode=suggest candidates=unlabeled fixed_epochs=50 seed=0"));
        assert!(csv.contains(REPORT_CSV_HEADER));
    }

    #[test]
    fn sampled_candidates_are_deterministic() {
        let pool: Vec<String> = (0..6).map(|i| format!("v{i}")).collect();
        let c = Candidates::Sampled { count: 3, size: 4, seed: 9 };
        let a = c.resolve(&pool).unwrap();
        assert_eq!(a, c.resolve(&pool).unwrap());
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|s| s.volume_ids.len() == 4 && s.volume_ids.iter().all(|id| pool.contains(id))));
    }
}
