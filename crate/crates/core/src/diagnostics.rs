// SPDX-License-Identifier: MIT OR Apache-2.0

//! Measurements over trained SAEs: localization ratio, score entropy,
//! Jensen-Shannon distance between score distributions, AUC and
//! free-token activation search. Logarithms are natural.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RegionMasks};
use crate::error::{shape_err, Error, Result};
use crate::model::TargetModel;
use crate::pipeline::{gather_rows, LayerSae};
use crate::tensor::Tensor;

/// Natural-log binary entropy with `0·ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * libm::log(x) };
    term(p) + term(1.0 - p)
}

/// Mean binary entropy over concepts.
pub fn score_entropy(scores: &[f32]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|&s| binary_entropy(s as f64)).sum::<f64>() / scores.len() as f64
}

/// Squared residual sums and cell counts split by region.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RegionResidual {
    pub fg_sum: f64,
    pub fg_cells: usize,
    pub bg_sum: f64,
    pub bg_cells: usize,
}

impl RegionResidual {
    /// Accumulate one `[P, C]` residual pair.
    pub fn add(&mut self, h: &Tensor<f32>, recon: &Tensor<f32>, regions: &RegionMasks) -> Result<()> {
        let s = h.shape();
        if s.len() != 2 || recon.shape() != s || regions.len() != s[0] {
            return Err(shape_err(
                "loc_ratio",
                format!("h {s:?}, recon {:?}, {} region cells", recon.shape(), regions.len()),
            ));
        }
        let c = s[1];
        for p in 0..s[0] {
            let sq: f64 = (0..c)
                .map(|j| {
                    let d = h.data()[p * c + j] as f64 - recon.data()[p * c + j] as f64;
                    d * d
                })
                .sum();
            if regions.foreground[p] {
                self.fg_sum += sq;
                self.fg_cells += c;
            } else {
                self.bg_sum += sq;
                self.bg_cells += c;
            }
        }
        Ok(())
    }

    pub fn fg_mse(&self) -> f64 {
        self.fg_sum / self.fg_cells as f64
    }

    pub fn bg_mse(&self) -> f64 {
        self.bg_sum / self.bg_cells as f64
    }

    /// Background MSE over foreground MSE.
    pub fn ratio(&self) -> Result<f64> {
        if self.fg_cells == 0 {
            return Err(Error::Empty("foreground region"));
        }
        if self.bg_cells == 0 {
            return Err(Error::Empty("background region"));
        }
        if self.fg_sum == 0.0 {
            return Err(Error::Degenerate("foreground reconstruction error is zero".into()));
        }
        Ok(self.bg_mse() / self.fg_mse())
    }

    /// Like [`ratio`](Self::ratio) but maps a zero foreground error to `∞`.
    pub fn ratio_or_infinite(&self) -> Result<f64> {
        match self.ratio() {
            Err(Error::Degenerate(_)) => Ok(f64::INFINITY),
            other => other,
        }
    }
}

/// LocR of a single `[P, C]` reconstruction.
pub fn loc_ratio(h: &Tensor<f32>, recon: &Tensor<f32>, regions: &RegionMasks) -> Result<f64> {
    let mut r = RegionResidual::default();
    r.add(h, recon, regions)?;
    r.ratio()
}

/// Pooled LocR over images `ids` for the concept-only (`free = false`) or
/// joint reconstruction.
pub fn dataset_loc_ratio(
    model: &TargetModel,
    sae: &LayerSae,
    data: &Dataset,
    ids: &[usize],
    include_free: bool,
) -> Result<RegionResidual> {
    let mut acc = RegionResidual::default();
    for chunk in ids.chunks(128) {
        let h = sae.features(model, &data.batch(chunk))?;
        let r = sae.readout(&h)?;
        let mut recon = sae.concept_recon(&r.s, &r.m)?;
        if include_free {
            recon = recon.zip_map(&sae.free_recon(&h)?, |a, b| a + b)?;
        }
        for (b, &id) in chunk.iter().enumerate() {
            let regions = data.samples[id].regions(sae.height)?;
            acc.add(&h.index0(b), &recon.index0(b), &regions)?;
        }
    }
    Ok(acc)
}

/// Concept scores per image (`[image][concept]`) at one layer.
pub fn layer_scores(model: &TargetModel, sae: &LayerSae, images: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
    let n = images.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for chunk in idx.chunks(128) {
        let h = sae.features(model, &gather_rows(images, chunk))?;
        let r = sae.readout(&h)?;
        out.extend((0..chunk.len()).map(|b| r.scores(b)));
    }
    Ok(out)
}

/// Free-token scores per image at one layer.
pub fn free_scores(model: &TargetModel, sae: &LayerSae, images: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
    let free = sae.free()?;
    let n = images.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for chunk in idx.chunks(128) {
        let h = sae.features(model, &gather_rows(images, chunk))?;
        let r = crate::tokenizer::tokenize_batch(&h, &free.tokenizer)?;
        out.extend((0..chunk.len()).map(|b| r.scores(b)));
    }
    Ok(out)
}

fn mean_entropy(scores: &[Vec<f32>]) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    Some(scores.iter().map(|s| score_entropy(s)).sum::<f64>() / scores.len() as f64)
}

/// Mean score entropy of each image group at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntropy {
    pub layer: usize,
    pub all: f64,
    pub correct: Option<f64>,
    pub incorrect: Option<f64>,
    pub adversarial: Option<f64>,
    pub counts: [usize; 3],
}

impl LayerEntropy {
    /// Signed difference of a group mean from the all-samples mean.
    pub fn delta(group: Option<f64>, all: f64) -> Option<f64> {
        group.map(|g| g - all)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EntropyReport {
    pub layers: Vec<LayerEntropy>,
    /// Groups left out because they were empty.
    pub notices: Vec<String>,
}

/// Split clean-image scores by prediction correctness and average the
/// entropy of each group; `adversarial` forms its own group.
pub fn group_entropy(
    layer: usize,
    scores: &[Vec<f32>],
    predictions: &[usize],
    labels: &[usize],
    adversarial: Option<&[Vec<f32>]>,
    notices: &mut Vec<String>,
) -> Result<LayerEntropy> {
    if scores.len() != predictions.len() || predictions.len() != labels.len() {
        return Err(shape_err(
            "group_entropy",
            format!("{} scores, {} predictions, {} labels", scores.len(), predictions.len(), labels.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::Empty("score set"));
    }
    let (mut correct, mut incorrect) = (Vec::new(), Vec::new());
    for ((s, p), l) in scores.iter().zip(predictions).zip(labels) {
        if p == l {
            correct.push(s.clone());
        } else {
            incorrect.push(s.clone());
        }
    }
    let adv = adversarial.and_then(mean_entropy);
    for (name, empty) in [
        ("correct", correct.is_empty()),
        ("incorrect", incorrect.is_empty()),
        ("adversarial", adv.is_none()),
    ] {
        if empty {
            notices.push(format!("layer {layer}: group `{name}` is empty and was omitted"));
        }
    }
    Ok(LayerEntropy {
        layer,
        all: mean_entropy(scores).unwrap_or(0.0),
        correct: mean_entropy(&correct),
        incorrect: mean_entropy(&incorrect),
        adversarial: adv,
        counts: [correct.len(), incorrect.len(), adversarial.map_or(0, |a| a.len())],
    })
}

fn fmt_cell(v: Option<f64>, all: f64) -> String {
    match v {
        Some(g) => format!("{g:.4} ({:+.4})", g - all),
        None => String::from("-"),
    }
}

impl EntropyReport {
    /// Layer rows, group columns, signed deltas against the all-samples mean.
    pub fn to_table(&self, groups: &[&str]) -> String {
        let mut out = String::from("layer | all");
        for g in groups {
            let _ = write!(out, " | {g}");
        }
        out.push('\n');
        for l in &self.layers {
            let _ = write!(out, "{} | {:.4}", l.layer, l.all);
            for g in groups {
                let v = match *g {
                    "correct" => l.correct,
                    "incorrect" => l.incorrect,
                    "adversarial" => l.adversarial,
                    _ => None,
                };
                let _ = write!(out, " | {}", fmt_cell(v, l.all));
            }
            out.push('\n');
        }
        for n in &self.notices {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

fn mean_scores(set: &[Vec<f32>]) -> Result<Vec<f64>> {
    let n = set.first().ok_or(Error::Empty("score set"))?.len();
    let mut mean = vec![0.0f64; n];
    for s in set {
        if s.len() != n {
            return Err(shape_err("js_distance", format!("score vectors of length {n} and {}", s.len())));
        }
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= set.len() as f64);
    Ok(mean)
}

/// Jensen-Shannon divergence between Bernoulli(p) and Bernoulli(q).
pub fn bernoulli_jsd(p: f64, q: f64) -> f64 {
    let m = 0.5 * (p + q);
    let kl = |a: f64, b: f64| {
        let t = |x: f64, y: f64| if x <= 0.0 { 0.0 } else { x * libm::log(x / y) };
        t(a, b) + t(1.0 - a, 1.0 - b)
    };
    (0.5 * kl(p, m) + 0.5 * kl(q, m)).max(0.0)
}

/// `sqrt(mean_i JSD(Bernoulli(p̄_i), Bernoulli(q̄_i)))` over mean scores.
pub fn js_distance(clean: &[Vec<f32>], other: &[Vec<f32>]) -> Result<f64> {
    let p = mean_scores(clean)?;
    let q = mean_scores(other)?;
    if p.len() != q.len() {
        return Err(shape_err("js_distance", format!("{} vs {} concepts", p.len(), q.len())));
    }
    let total: f64 = p.iter().zip(&q).map(|(&a, &b)| bernoulli_jsd(a, b)).sum();
    Ok(libm::sqrt(total / p.len() as f64))
}

pub const JS_CONSTRUCTION: &str = "per-concept Bernoulli on mean scores, sqrt of mean JSD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsReport {
    /// `(layer, distance)` by descending distance, ties by layer.
    pub ranking: Vec<(usize, f64)>,
    pub degenerate: bool,
    pub construction: String,
}

impl JsReport {
    pub fn from_distances(mut distances: Vec<(usize, f64)>, degenerate: bool) -> Self {
        distances.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self {
            ranking: distances,
            degenerate,
            construction: String::from(JS_CONSTRUCTION),
        }
    }

    pub fn distance(&self, layer: usize) -> Option<f64> {
        self.ranking.iter().find(|r| r.0 == layer).map(|r| r.1)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("rank | layer | js distance\n");
        for (i, (l, d)) in self.ranking.iter().enumerate() {
            let _ = writeln!(out, "{} | {l} | {d:.6}", i + 1);
        }
        if self.degenerate {
            out.push_str("note: degenerate ranking (no perturbation)\n");
        }
        let _ = writeln!(out, "construction: {}", self.construction);
        out
    }
}

/// Images ranked by one free token's score, descending; ties by id.
pub fn top_activated(scores: &[Vec<f32>], ids: &[usize], token: usize, k: usize) -> Result<Vec<(usize, f32)>> {
    if scores.len() != ids.len() {
        return Err(shape_err("top_activated", format!("{} score rows for {} ids", scores.len(), ids.len())));
    }
    if k > ids.len() {
        return Err(Error::Invalid(format!("k = {k} exceeds the {} available images", ids.len())));
    }
    let tokens = scores.first().map_or(0, |s| s.len());
    if token >= tokens {
        return Err(Error::Invalid(format!("unknown free token {token} (have {tokens})")));
    }
    let mut ranked: Vec<(usize, f32)> = ids.iter().zip(scores).map(|(&id, s)| (id, s[token])).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Mean entropy of the `subset` concepts' scores over all images.
pub fn irrelevant_audit(scores: &[Vec<f32>], subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Empty("concept subset"));
    }
    if scores.is_empty() {
        return Err(Error::Empty("score set"));
    }
    let n = scores[0].len();
    if let Some(&bad) = subset.iter().find(|&&i| i >= n) {
        return Err(Error::Invalid(format!("concept index {bad} out of range (n = {n})")));
    }
    let total: f64 = scores
        .iter()
        .map(|s| subset.iter().map(|&i| binary_entropy(s[i] as f64)).sum::<f64>() / subset.len() as f64)
        .sum();
    Ok(total / scores.len() as f64)
}

/// Area under the ROC curve with half credit for ties; `None` when one
/// class is absent.
pub fn auc(scores: &[f32], positive: &[bool]) -> Option<f64> {
    let mut pairs: Vec<(f32, bool)> = scores.iter().copied().zip(positive.iter().copied()).collect();
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U with midranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * pairs[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_values() {
        assert!((score_entropy(&[0.5, 0.5]) - core::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(score_entropy(&[0.0, 1.0, 1.0]), 0.0);
        let two = score_entropy(&[0.9, 0.1]);
        let oracle = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((two - oracle).abs() < 1e-7);
        assert!((two - 0.3251).abs() < 5e-5);
    }

    #[test]
    fn js_values() {
        let a = vec![vec![0.0f32; 4]; 3];
        let b = vec![vec![1.0f32; 4]; 2];
        assert_eq!(js_distance(&a, &a).unwrap(), 0.0);
        let max = js_distance(&a, &b).unwrap();
        assert!((max - libm::sqrt(core::f64::consts::LN_2)).abs() < 1e-12);
        let c = vec![vec![0.0f32], vec![1.0]];
        let d = vec![vec![0.5f32]];
        assert_eq!(js_distance(&c, &d).unwrap(), 0.0);
        assert!(js_distance(&[], &d).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(auc(&[0.5; 2], &[true, true]), None);
    }

    #[test]
    fn top_activated_ties_and_errors() {
        let s = vec![vec![0.5f32], vec![0.5], vec![0.9]];
        let r = top_activated(&s, &[7, 3, 5], 0, 3).unwrap();
        assert_eq!(r.iter().map(|r| r.0).collect::<Vec<_>>(), vec![5, 3, 7]);
        assert!(top_activated(&s, &[7, 3, 5], 1, 1).is_err());
        assert!(top_activated(&s, &[7, 3, 5], 0, 4).is_err());
    }

    #[test]
    fn uniform_residual_gives_unit_locr() {
        let h = Tensor::full(&[4, 2], 1.0f32);
        let r = Tensor::full(&[4, 2], 0.5f32);
        let regions = RegionMasks {
            foreground: vec![true, false, false, true],
            background: vec![false, true, true, false],
        };
        assert!((loc_ratio(&h, &r, &regions).unwrap() - 1.0).abs() < 1e-12);
        let mut only_bg = r.clone();
        only_bg.data_mut()[0] = 1.0;
        only_bg.data_mut()[1] = 1.0;
        only_bg.data_mut()[6] = 1.0;
        only_bg.data_mut()[7] = 1.0;
        assert!(matches!(loc_ratio(&h, &only_bg, &regions), Err(Error::Degenerate(_))));
        let mut acc = RegionResidual::default();
        acc.add(&h, &only_bg, &regions).unwrap();
        assert_eq!(acc.ratio_or_infinite().unwrap(), f64::INFINITY);
        only_bg.data_mut()[0] = 0.999;
        let big = loc_ratio(&h, &only_bg, &regions).unwrap();
        assert!(big.is_finite() && big > 1e4);
    }

    #[test]
    fn empty_groups_are_reported() {
        let s = vec![vec![0.5f32], vec![0.1]];
        let mut notes = Vec::new();
        let e = group_entropy(1, &s, &[0, 1], &[0, 1], None, &mut notes).unwrap();
        assert!(e.incorrect.is_none() && e.adversarial.is_none());
        assert_eq!(notes.len(), 2);
    }
}
