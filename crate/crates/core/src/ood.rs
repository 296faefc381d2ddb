//! Out-of-distribution scoring from per-level likelihoods, threshold
//! selection, and adapting a trained model to a new specimen.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cwfa::{train, CWFAModel, Prior, TrainReport};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::numerics::Tensor;
use crate::optics::{richardson_lucy, PSFStack};

/// Default level scored for decisions: index 0, the finest flow level.
pub const DEFAULT_LEVEL: usize = 0;
pub const DEFAULT_THRESHOLDS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    In,
    Out,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OODScore {
    pub sample_id: String,
    /// Per-dimension NLL of each flow level (finest first) and then of the
    /// low-resolution stage.
    pub per_level_nll: Vec<f64>,
    pub label: Label,
    /// The volume was estimated from the image by Richardson-Lucy.
    pub deconvolved: bool,
}

/// Where the volume scored for a sample comes from.
#[derive(Debug, Clone, Copy)]
pub enum VolumeInput<'a> {
    Given(&'a Tensor),
    /// Deconvolve the image with this PSF and iteration count.
    Deconvolve { psf: &'a PSFStack, iterations: usize },
}

pub fn score_sample(
    model: &CWFAModel,
    image: &Tensor,
    volume: VolumeInput<'_>,
    sample_id: impl Into<String>,
    label: Label,
) -> Result<OODScore> {
    let [_, h, w] = model.volume_shape();
    let (v, deconvolved) = match volume {
        VolumeInput::Given(v) => (v.clone(), false),
        VolumeInput::Deconvolve { psf, iterations } => (richardson_lucy(image, psf, (h, w), iterations, None)?, true),
    };
    let per_level_nll = model.total_loglik(&v, &model.conditions(image)?)?;
    Ok(OODScore {
        sample_id: sample_id.into(),
        per_level_nll,
        label,
        deconvolved,
    })
}

/// Score many samples in parallel; `volumes` may be empty to deconvolve all.
pub fn score_all(
    model: &CWFAModel,
    images: &[Tensor],
    volumes: &[Tensor],
    psf: Option<(&PSFStack, usize)>,
    prefix: &str,
    label: Label,
) -> Result<Vec<OODScore>> {
    if !volumes.is_empty() && volumes.len() != images.len() {
        return Err(Error::invalid(format!("{} images vs {} volumes", images.len(), volumes.len())));
    }
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let input = match (volumes.get(i), psf) {
                (Some(v), _) => VolumeInput::Given(v),
                (None, Some((psf, iterations))) => VolumeInput::Deconvolve { psf, iterations },
                (None, None) => return Err(Error::invalid("no volume and no PSF to deconvolve with")),
            };
            score_sample(model, img, input, format!("{prefix}{i}"), label)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC of the rule "score >= cut means out", over every distinct score, and
/// its trapezoidal area.
pub fn roc_auc(scores_in: &[f64], scores_out: &[f64]) -> Result<(f64, Vec<RocPoint>)> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::SingleClass(
            if scores_in.is_empty() { "out" } else { "in" }.into(),
        ));
    }
    if scores_in.iter().chain(scores_out).any(|s| !s.is_finite()) {
        return Err(Error::non_finite("roc_auc scores"));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, false))
        .chain(scores_out.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (scores_out.len() as f64, scores_in.len() as f64);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let cut = all[i].0;
        while i < all.len() && all[i].0 == cut {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok((auc, points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    /// Index into `per_level_nll` (0 is the finest flow level).
    pub level: usize,
    pub threshold: f64,
    pub f1: f64,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

fn f1_at(scores: &[f64], is_out: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &o) in scores.iter().zip(is_out) {
        match (s > threshold, o) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}

/// F1-maximizing threshold among `n_thresholds` cuts evenly spaced strictly
/// inside `[min, max]` of the scores ("out" is the positive class and a
/// sample is out when its score is strictly above the cut). Ties go to the
/// lowest cut.
pub fn select_threshold(scores: &[f64], is_out: &[bool], n_thresholds: usize, level: usize) -> Result<ThresholdReport> {
    if scores.len() != is_out.len() {
        return Err(Error::invalid(format!("{} scores vs {} labels", scores.len(), is_out.len())));
    }
    if n_thresholds == 0 {
        return Err(Error::invalid("need at least one threshold"));
    }
    let (sin, sout): (Vec<_>, Vec<_>) = scores.iter().copied().zip(is_out.iter().copied()).partition(|p| !p.1);
    if sin.is_empty() || sout.is_empty() {
        return Err(Error::SingleClass(if sin.is_empty() { "out" } else { "in" }.into()));
    }
    let strip = |v: Vec<(f64, bool)>| v.into_iter().map(|p| p.0).collect::<Vec<_>>();
    let (auc, roc) = roc_auc(&strip(sin), &strip(sout))?;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / (n_thresholds + 1) as f64;
    let mut best = (f64::NEG_INFINITY, lo);
    for k in 1..=n_thresholds {
        let t = lo + step * k as f64;
        let f = f1_at(scores, is_out, t);
        if f > best.0 {
            best = (f, t);
        }
    }
    Ok(ThresholdReport {
        level,
        threshold: best.1,
        f1: best.0,
        auc,
        roc,
    })
}

/// Threshold selection over labeled scores at one level; `Unknown` labels
/// are ignored.
pub fn select_threshold_for(scores: &[OODScore], level: usize, n_thresholds: usize) -> Result<ThresholdReport> {
    let mut s = Vec::new();
    let mut o = Vec::new();
    for sc in scores {
        let nll = *sc
            .per_level_nll
            .get(level)
            .ok_or_else(|| Error::invalid(format!("level {level} not scored for {}", sc.sample_id)))?;
        match sc.label {
            Label::In => o.push(false),
            Label::Out => o.push(true),
            Label::Unknown => continue,
        }
        s.push(nll);
    }
    select_threshold(&s, &o, n_thresholds, level)
}

/// Strictly above the threshold means out.
pub fn classify(score: &OODScore, report: &ThresholdReport) -> Result<Label> {
    let nll = score
        .per_level_nll
        .get(report.level)
        .ok_or_else(|| Error::invalid(format!("level {} not scored", report.level)))?;
    Ok(if *nll > report.threshold { Label::Out } else { Label::In })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub sample_id: String,
    pub per_level_nll: Vec<f64>,
    pub threshold: Option<f64>,
    pub level: usize,
    pub decision: Label,
    pub deconvolved: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OODReport {
    pub samples: Vec<SampleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<ThresholdReport>,
}

/// Per-sample decisions (`Unknown` without a threshold) plus AUC/F1 when a
/// threshold report is given.
pub fn build_report(scores: &[OODScore], threshold: Option<&ThresholdReport>, level: usize, psnr: Option<&[f64]>) -> Result<OODReport> {
    let samples = scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(SampleReport {
                sample_id: s.sample_id.clone(),
                per_level_nll: s.per_level_nll.clone(),
                threshold: threshold.map(|t| t.threshold),
                level: threshold.map_or(level, |t| t.level),
                decision: match threshold {
                    Some(t) => classify(s, t)?,
                    None => Label::Unknown,
                },
                deconvolved: s.deconvolved,
                psnr: psnr.and_then(|p| p.get(i).copied()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OODReport {
        samples,
        auc: threshold.map(|t| t.auc),
        f1: threshold.map(|t| t.f1),
        threshold: threshold.cloned(),
    })
}

/// One row per sample: id, label, optional PSNR and each level's NLL.
pub fn scores_csv(scores: &[OODScore], psnr: Option<&[f64]>) -> String {
    let levels = scores.first().map_or(0, |s| s.per_level_nll.len());
    let mut out = String::from("sample_id,label,psnr");
    for l in 0..levels {
        let _ = write!(out, ",nll_level{l}");
    }
    out.push('\n');
    for (i, s) in scores.iter().enumerate() {
        let label = serde_json::to_value(s.label).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let p = psnr.and_then(|p| p.get(i)).map(|v| v.to_string()).unwrap_or_default();
        let _ = write!(out, "{},{label},{p}", s.sample_id);
        for v in &s.per_level_nll {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    OnlyNew,
    AppendAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub epochs_per_level: usize,
    /// Neurons used for the trace correlation.
    pub neurons: usize,
    pub neuron_sigma: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            epochs_per_level: 20,
            neurons: 10,
            neuron_sigma: 1.0,
        }
    }
}

/// Paired volumes and images.
#[derive(Debug, Clone, Copy)]
pub struct Pairs<'a> {
    pub volumes: &'a [Tensor],
    pub images: &'a [Tensor],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub psnr: f64,
    pub mape: f64,
    pub pcc: f64,
    /// Mean per-level NLL over the evaluation frames.
    pub nll: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub mode: FinetuneMode,
    pub before: MetricsSummary,
    pub after: MetricsSummary,
    /// Relative PSNR gain, percent.
    pub psnr_gain_pct: f64,
    /// Relative MAPE reduction, percent.
    pub mape_reduction_pct: f64,
    pub pcc_gain_pct: f64,
    pub train: TrainReport,
    pub seconds: f64,
}

pub fn summarize(model: &CWFAModel, eval: Pairs<'_>, cfg: &FinetuneConfig) -> Result<(MetricsSummary, MetricsReport)> {
    let t = model.config.temperature;
    let seed = model.config.seed;
    let recon = eval
        .images
        .par_iter()
        .map(|img| model.reconstruct(img, t, seed))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(eval.volumes, &recon, cfg.neurons, cfg.neuron_sigma)?;
    let lls = eval
        .volumes
        .par_iter()
        .zip(eval.images)
        .map(|(v, img)| model.total_loglik(v, &model.conditions(img)?))
        .collect::<Result<Vec<_>>>()?;
    let mut nll = vec![0.0; model.levels.len() + 1];
    for l in &lls {
        for (a, x) in nll.iter_mut().zip(l) {
            *a += x / lls.len() as f64;
        }
    }
    Ok((
        MetricsSummary {
            psnr: report.psnr,
            mape: report.mape,
            pcc: report.pcc_mean,
            nll,
        },
        report,
    ))
}

fn pct(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        100.0 * (after - before) / before.abs()
    }
}

/// Adapt `model` to a new specimen. The prior is recomputed from the
/// training pairs (new only, or existing plus new), then every stage is
/// retrained starting from the current weights.
pub fn finetune(
    model: &CWFAModel,
    new: Pairs<'_>,
    mode: FinetuneMode,
    existing: Option<Pairs<'_>>,
    eval: Pairs<'_>,
    cfg: &FinetuneConfig,
) -> Result<(CWFAModel, FinetuneReport)> {
    let start = std::time::Instant::now();
    let (volumes, images) = match (mode, existing) {
        (FinetuneMode::OnlyNew, _) => (new.volumes.to_vec(), new.images.to_vec()),
        (FinetuneMode::AppendAll, Some(old)) => (
            old.volumes.iter().chain(new.volumes).cloned().collect(),
            old.images.iter().chain(new.images).cloned().collect(),
        ),
        (FinetuneMode::AppendAll, None) => {
            return Err(Error::invalid("append_all fine-tuning needs the existing dataset"))
        }
    };
    let (before, _) = summarize(model, eval, cfg)?;
    let mut tuned = model.clone();
    tuned.prior = Prior::from_training(&volumes, &images, &tuned.layout)?;
    tuned.config.epochs = cfg.epochs;
    tuned.config.epochs_per_level = cfg.epochs_per_level;
    let train_report = train(&mut tuned, &volumes, &images)?;
    let (after, _) = summarize(&tuned, eval, cfg)?;
    let report = FinetuneReport {
        mode,
        psnr_gain_pct: pct(before.psnr, after.psnr),
        mape_reduction_pct: -pct(before.mape, after.mape),
        pcc_gain_pct: pct(before.pcc, after.pcc),
        before,
        after,
        train: train_report,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((tuned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cwfa::testutil::{perturb, tiny_data, tiny_model};
    use proptest::prelude::*;

    fn score(nll: f64) -> OODScore {
        OODScore {
            sample_id: "s".into(),
            per_level_nll: vec![nll, 0.0],
            label: Label::Unknown,
            deconvolved: false,
        }
    }

    #[test]
    fn separated_scores_have_unit_auc() {
        let (auc, roc) = roc_auc(&[0.0, 1.0, 2.0], &[5.0, 6.0]).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(roc.first(), Some(&RocPoint { fpr: 0.0, tpr: 0.0 }));
        assert_eq!(roc.last(), Some(&RocPoint { fpr: 1.0, tpr: 1.0 }));
        let (auc, _) = roc_auc(&[5.0, 6.0], &[0.0, 1.0]).unwrap();
        assert_eq!(auc, 0.0);
    }

    #[test]
    fn identical_lists_give_half() {
        let s = [0.3, -1.0, 2.5, 2.5, 7.0];
        assert!((roc_auc(&s, &s).unwrap().0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let r = select_threshold(&[0.0, 10.0], &[false, true], 1000, 0).unwrap();
        assert_eq!(r.f1, 1.0);
        assert!((r.threshold - 10.0 / 1001.0).abs() < 1e-12, "{}", r.threshold);
        assert!(matches!(
            select_threshold(&[0.0, 1.0], &[false, false], 10, 0),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn classify_is_strict() {
        let rep = ThresholdReport {
            level: 0,
            threshold: -1.33,
            f1: 1.0,
            auc: 1.0,
            roc: vec![],
        };
        assert_eq!(classify(&score(-1.34), &rep).unwrap(), Label::In);
        assert_eq!(classify(&score(-1.32), &rep).unwrap(), Label::Out);
        assert_eq!(classify(&score(-1.33), &rep).unwrap(), Label::In);
    }

    #[test]
    fn report_without_threshold_is_unknown() {
        let r = build_report(&[score(1.0)], None, 0, None).unwrap();
        assert_eq!(r.samples[0].decision, Label::Unknown);
        assert!(r.auc.is_none());
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["samples"][0]["per_level_nll"].is_array());
        let csv = scores_csv(&[score(1.0)], Some(&[30.0]));
        assert_eq!(csv, "sample_id,label,psnr,nll_level0,nll_level1\ns,unknown,30,1,0\n");
    }

    #[test]
    fn scoring_matches_total_loglik_and_deconvolves_on_demand() {
        let (m, vols, imgs) = tiny_model(20);
        let s = score_sample(&m, &imgs[0], VolumeInput::Given(&vols[0]), "a", Label::In).unwrap();
        assert_eq!(s.per_level_nll, m.total_loglik(&vols[0], &m.conditions(&imgs[0]).unwrap()).unwrap());
        assert!(!s.deconvolved);
        let all = score_all(&m, &imgs, &[], None, "x", Label::In);
        assert!(all.is_err());
    }

    #[test]
    fn append_all_needs_existing() {
        let (m, vols, imgs) = tiny_model(21);
        let p = Pairs { volumes: &vols, images: &imgs };
        let r = finetune(&m, p, FinetuneMode::AppendAll, None, p, &FinetuneConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn finetune_reduces_new_sample_nll() {
        let (mut m, _, _) = tiny_model(22);
        perturb(&mut m, 0.02, 1);
        let (vols, imgs) = tiny_data(4, 99);
        let p = Pairs { volumes: &vols, images: &imgs };
        let cfg = FinetuneConfig {
            epochs: 12,
            epochs_per_level: 4,
            neurons: 2,
            neuron_sigma: 1.0,
        };
        let (tuned, rep) = finetune(&m, p, FinetuneMode::OnlyNew, None, p, &cfg).unwrap();
        assert_eq!(tuned.config.epochs, 12);
        assert_eq!(rep.train.epochs.len(), 12);
        for (a, b) in rep.after.nll.iter().zip(&rep.before.nll) {
            assert!(*a <= b + 0.01 * b.abs(), "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn auc_is_invariant_to_monotone_maps(
            a in proptest::collection::vec(-5.0f64..5.0, 1..20),
            b in proptest::collection::vec(-5.0f64..5.0, 1..20),
        ) {
            let (auc, roc) = roc_auc(&a, &b).unwrap();
            let f = |v: &[f64]| v.iter().map(|x| (0.7 * x).exp() * 3.0 + 1.0).collect::<Vec<_>>();
            let (auc2, _) = roc_auc(&f(&a), &f(&b)).unwrap();
            prop_assert!((auc - auc2).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&auc));
            for w in roc.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }

        #[test]
        fn selected_threshold_is_f1_optimal(
            s in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..30),
        ) {
            let scores: Vec<f64> = s.iter().map(|p| p.0).collect();
            let labels: Vec<bool> = s.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let r = select_threshold(&scores, &labels, 50, 0).unwrap();
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for k in 1..=50 {
                let t = lo + (hi - lo) / 51.0 * k as f64;
                prop_assert!(f1_at(&scores, &labels, t) <= r.f1);
            }
            prop_assert!((0.0..=1.0).contains(&r.f1));
        }

        #[test]
        fn classify_is_monotone(a in -3.0f64..3.0, b in -3.0f64..3.0, t in -3.0f64..3.0) {
            let rep = ThresholdReport { level: 0, threshold: t, f1: 0.0, auc: 0.0, roc: vec![] };
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            if classify(&score(lo), &rep).unwrap() == Label::Out {
                prop_assert_eq!(classify(&score(hi), &rep).unwrap(), Label::Out);
            }
        }
    }
}
