//! Retrieval metrics: image→text and text→image Recall@K, mA and F1, with
//! seen/unseen and per-group breakdowns.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AttrRef, AttributeCatalog};
use crate::image::Image;
use crate::model::PoarModel;
use crate::tensor::{Tensor, TensorError};
use crate::vision::VisionError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no catalog group of the data maps onto the model")]
    NothingToEvaluate,
    #[error("{images} images but {labels} label lists")]
    Mismatch { images: usize, labels: usize },
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Candidate order by descending score, ties kept in candidate order.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Zero-based rank of the best-placed relevant candidate, if any.
pub fn best_rank(scores: &[f64], relevant: &[bool]) -> Option<usize> {
    rank(scores).iter().position(|&c| relevant[c])
}

/// One (image, group) query of image→text retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct PairQuery {
    pub group: usize,
    /// Similarity of the group token to each candidate prompt.
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
    /// Whether a true attribute of the pair was held out of training.
    pub unseen: bool,
}

/// Hit counts for several K over a set of queries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallCounts {
    pub queries: usize,
    pub hits: Vec<usize>,
}

impl RecallCounts {
    fn new(ks: usize) -> Self {
        Self {
            queries: 0,
            hits: vec![0; ks],
        }
    }

    fn add(&mut self, best: Option<usize>, ks: &[usize]) {
        self.queries += 1;
        if let Some(r) = best {
            for (h, &k) in self.hits.iter_mut().zip(ks) {
                if r < k {
                    *h += 1;
                }
            }
        }
    }

    /// `100 · hits / queries` per K; `None` without queries.
    pub fn rates(&self) -> Option<Vec<f64>> {
        (self.queries > 0).then(|| {
            self.hits
                .iter()
                .map(|&h| 100.0 * h as f64 / self.queries as f64)
                .collect()
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct I2tRecall {
    pub overall: RecallCounts,
    pub per_group: BTreeMap<usize, RecallCounts>,
    pub seen: RecallCounts,
    pub unseen: RecallCounts,
    pub per_group_seen: BTreeMap<usize, RecallCounts>,
    pub per_group_unseen: BTreeMap<usize, RecallCounts>,
}

/// Image→text Recall@K: a pair is a hit when any relevant prompt is ranked
/// within the top K (K larger than the candidate count acts as the count).
pub fn recall_i2t(queries: &[PairQuery], ks: &[usize]) -> I2tRecall {
    let n = ks.len();
    let mut out = I2tRecall {
        overall: RecallCounts::new(n),
        seen: RecallCounts::new(n),
        unseen: RecallCounts::new(n),
        ..Default::default()
    };
    for q in queries {
        let best = best_rank(&q.scores, &q.relevant);
        out.overall.add(best, ks);
        out.per_group.entry(q.group).or_insert_with(|| RecallCounts::new(n)).add(best, ks);
        let (total, by_group) = if q.unseen {
            (&mut out.unseen, &mut out.per_group_unseen)
        } else {
            (&mut out.seen, &mut out.per_group_seen)
        };
        total.add(best, ks);
        by_group.entry(q.group).or_insert_with(|| RecallCounts::new(n)).add(best, ks);
    }
    out
}

/// One prompt of text→image retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptQuery {
    /// Similarity of the prompt to each image's same-group token.
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

/// Text→image Recall@K over prompts with at least one relevant image; the
/// second value counts the excluded prompts.
pub fn recall_t2i(queries: &[PromptQuery], ks: &[usize]) -> (RecallCounts, Vec<usize>) {
    let mut counts = RecallCounts::new(ks.len());
    let mut excluded = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        if !q.relevant.iter().any(|&r| r) {
            excluded.push(i);
            continue;
        }
        counts.add(best_rank(&q.scores, &q.relevant), ks);
    }
    (counts, excluded)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanAccuracy {
    pub value: Option<f64>,
    /// Attribute columns lacking positives or negatives.
    pub excluded: Vec<usize>,
}

/// Label-balanced mean accuracy over attribute columns:
/// `100/(2M') Σ (TP/P + TN/N)` over columns with both classes present.
pub fn compute_ma(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> MeanAccuracy {
    let m = truth.first().map_or(0, Vec::len);
    let mut sum = 0.0;
    let mut counted = 0;
    let mut excluded = Vec::new();
    for a in 0..m {
        let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
        for (pr, tr) in pred.iter().zip(truth) {
            if tr[a] {
                p += 1;
                tp += pr[a] as usize;
            } else {
                n += 1;
                tn += !pr[a] as usize;
            }
        }
        if p == 0 || n == 0 {
            excluded.push(a);
            continue;
        }
        sum += tp as f64 / p as f64 + tn as f64 / n as f64;
        counted += 1;
    }
    MeanAccuracy {
        value: (counted > 0).then(|| 100.0 * sum / (2.0 * counted as f64)),
        excluded,
    }
}

/// Instance-level F1: mean over images of `2PR/(P+R)`; an image with empty
/// prediction and empty truth scores 1.
pub fn compute_f1(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Option<f64> {
    if pred.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for (pr, tr) in pred.iter().zip(truth) {
        let np = pr.iter().filter(|&&b| b).count();
        let nt = tr.iter().filter(|&&b| b).count();
        let inter = pr.iter().zip(tr).filter(|(a, b)| **a && **b).count();
        total += if np == 0 && nt == 0 {
            1.0
        } else if inter == 0 {
            0.0
        } else {
            let precision = inter as f64 / np as f64;
            let recall = inter as f64 / nt as f64;
            2.0 * precision * recall / (precision + recall)
        };
    }
    Some(100.0 * total / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Closed set: seen prompts only.
    I2t,
    /// Closed set plus text→image retrieval.
    T2i,
    /// Seen and held-out prompts, reported separately.
    Open,
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "i2t" => Ok(Self::I2t),
            "t2i" => Ok(Self::T2i),
            "open" => Ok(Self::Open),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

/// Which prompts a group token is ranked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankScope {
    WithinGroup,
    AllPrompts,
}

/// How per-attribute predictions for mA and F1 are formed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    /// The best prompt of each group.
    Top1,
    /// Every prompt of the group with cosine similarity at least this.
    Threshold(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub scope: RankScope,
    pub prediction: Prediction,
    pub threads: usize,
}

impl EvalOptions {
    pub fn new(mode: EvalMode) -> Self {
        Self {
            mode,
            scope: RankScope::WithinGroup,
            prediction: Prediction::Top1,
            threads: 1,
        }
    }
}

pub const I2T_KS: [usize; 2] = [1, 2];
pub const T2I_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub r1: f64,
    pub r2: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct I2tSection {
    pub overall: Option<RecallAtK>,
    pub per_group: IndexMap<String, RecallAtK>,
    pub seen: Option<RecallAtK>,
    pub unseen: Option<RecallAtK>,
    pub per_group_seen: IndexMap<String, RecallAtK>,
    pub per_group_unseen: IndexMap<String, RecallAtK>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct T2iSection {
    pub r1: Option<f64>,
    pub r5: Option<f64>,
    pub r10: Option<f64>,
    pub prompts: usize,
    /// Prompts without any relevant test image.
    pub excluded: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub images: usize,
    /// Pairs whose true attributes are all outside the candidate set.
    pub skipped_pairs: usize,
    pub unmapped_groups: Vec<String>,
    pub i2t: I2tSection,
    pub t2i: Option<T2iSection>,
    pub m_a: Option<f64>,
    pub m_a_excluded: Vec<String>,
    pub f1: Option<f64>,
}

fn recall_at(c: &RecallCounts) -> Option<RecallAtK> {
    c.rates().map(|r| RecallAtK {
        r1: r[0],
        r2: r[1],
        pairs: c.queries,
    })
}

impl MetricsReport {
    /// Every reported number, flattened as (section, group, metric, value).
    pub fn rows(&self) -> Vec<(String, String, String, f64)> {
        let mut rows = Vec::new();
        let mut push_r = |section: &str, group: &str, r: &RecallAtK| {
            rows.push((section.into(), group.into(), "r1".into(), r.r1));
            rows.push((section.into(), group.into(), "r2".into(), r.r2));
        };
        for (section, total) in [("i2t", &self.i2t.overall), ("i2t_seen", &self.i2t.seen), ("i2t_unseen", &self.i2t.unseen)] {
            if let Some(r) = total {
                push_r(section, "all", r);
            }
        }
        for (section, map) in [
            ("i2t", &self.i2t.per_group),
            ("i2t_seen", &self.i2t.per_group_seen),
            ("i2t_unseen", &self.i2t.per_group_unseen),
        ] {
            for (g, r) in map {
                push_r(section, g, r);
            }
        }
        if let Some(t) = &self.t2i {
            for (m, v) in [("r1", t.r1), ("r5", t.r5), ("r10", t.r10)] {
                if let Some(v) = v {
                    rows.push(("t2i".into(), "all".into(), m.into(), v));
                }
            }
        }
        if let Some(v) = self.m_a {
            rows.push(("attr".into(), "all".into(), "mA".into(), v));
        }
        if let Some(v) = self.f1 {
            rows.push(("attr".into(), "all".into(), "F1".into(), v));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,group,metric,value\n");
        for (a, b, c, v) in self.rows() {
            let _ = writeln!(s, "{a},{b},{c},{v}");
        }
        s
    }

    pub fn has_nan(&self) -> bool {
        self.rows().iter().any(|r| r.3.is_nan())
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let fmt = |r: &Option<RecallAtK>| match r {
            Some(r) => format!("R@1 {:6.2}  R@2 {:6.2}  ({} pairs)", r.r1, r.r2, r.pairs),
            None => "-".to_string(),
        };
        let _ = writeln!(s, "mode {:?}, {} images", self.mode, self.images);
        let _ = writeln!(s, "image->text  {}", fmt(&self.i2t.overall));
        if self.mode == EvalMode::Open {
            let _ = writeln!(s, "  seen       {}", fmt(&self.i2t.seen));
            let _ = writeln!(s, "  unseen     {}", fmt(&self.i2t.unseen));
        }
        for (g, r) in &self.i2t.per_group {
            let _ = writeln!(s, "  {g:<12}{}", fmt(&Some(r.clone())));
        }
        if let Some(t) = &self.t2i {
            let f = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:6.2}"));
            let _ = writeln!(s, "text->image  R@1 {}  R@5 {}  R@10 {}", f(t.r1), f(t.r5), f(t.r10));
        }
        let f = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:6.2}"));
        let _ = writeln!(s, "mA {}  F1 {}", f(self.m_a), f(self.f1));
        s
    }
}

fn normalize_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Token embeddings of every image, spread over up to `threads` threads.
pub fn embed_images(model: &PoarModel, images: &[Image], threads: usize) -> Result<Vec<Tensor>, VisionError> {
    let threads = threads.max(1).min(images.len().max(1));
    if threads == 1 {
        return images.iter().map(|img| model.image_embedding(img)).collect();
    }
    let chunk = images.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Tensor>, VisionError>> = std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|img| model.image_embedding(img)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("embedding thread")).collect()
    });
    let mut out = Vec::with_capacity(images.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Evaluates `model` (trained on `model_catalog`) on images labelled against
/// `data_catalog`. Groups are matched by key; groups the model lacks are
/// skipped and listed.
pub fn evaluate(
    model: &PoarModel,
    model_catalog: &AttributeCatalog,
    data_catalog: &AttributeCatalog,
    images: &[Image],
    labels: &[Vec<AttrRef>],
    options: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    if images.len() != labels.len() {
        return Err(EvalError::Mismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let groups = data_catalog.num_groups();
    let mut token = vec![None; groups];
    let mut unmapped = Vec::new();
    for (g, grp) in data_catalog.groups().iter().enumerate() {
        match model_catalog.group_index(&grp.key) {
            Some(mg) => token[g] = Some(model.token_of_group[mg]),
            None => unmapped.push(grp.key.clone()),
        }
    }
    if token.iter().all(Option::is_none) {
        return Err(EvalError::NothingToEvaluate);
    }
    let seen = |a: AttrRef| {
        model_catalog
            .find(&data_catalog.group(a.group).key, data_catalog.value(a))
            .is_some_and(|m| model_catalog.is_seen(m))
    };
    // candidate prompts, grouped, in catalog order
    let open = options.mode == EvalMode::Open;
    let mut candidates: Vec<AttrRef> = Vec::new();
    let mut group_range = vec![0..0; groups];
    for g in 0..groups {
        let start = candidates.len();
        if token[g].is_some() {
            for index in 0..data_catalog.group(g).attributes.len() {
                let a = AttrRef { group: g, index };
                if open || seen(a) {
                    candidates.push(a);
                }
            }
        }
        group_range[g] = start..candidates.len();
    }
    let sentences: Vec<String> = candidates.iter().map(|&a| data_catalog.prompt(a).sentence).collect();
    let prompt_emb = normalize_rows(&model.sentence_embeddings(&sentences, model.config.text_len)?);
    let image_emb: Vec<Vec<Vec<f64>>> = embed_images(model, images, options.threads)?
        .iter()
        .map(normalize_rows)
        .collect();

    let mut queries = Vec::new();
    let mut skipped = 0;
    let mut pred_rows = Vec::with_capacity(images.len());
    let mut truth_rows = Vec::with_capacity(images.len());
    let mut annotated_rows = Vec::with_capacity(images.len());
    for (i, labs) in labels.iter().enumerate() {
        let mut pred = vec![false; candidates.len()];
        let mut truth = vec![false; candidates.len()];
        let mut annotated = vec![false; candidates.len()];
        for g in 0..groups {
            let Some(k) = token[g] else { continue };
            let true_attrs: Vec<AttrRef> = labs.iter().copied().filter(|a| a.group == g).collect();
            if true_attrs.is_empty() {
                continue;
            }
            let range = group_range[g].clone();
            let tok = &image_emb[i][k];
            let group_scores: Vec<f64> = range.clone().map(|c| dot(tok, &prompt_emb[c])).collect();
            for c in range.clone() {
                annotated[c] = true;
                truth[c] = true_attrs.contains(&candidates[c]);
            }
            match options.prediction {
                Prediction::Top1 => {
                    if let Some(&best) = rank(&group_scores).first() {
                        pred[range.start + best] = true;
                    }
                }
                Prediction::Threshold(t) => {
                    for (j, &s) in group_scores.iter().enumerate() {
                        pred[range.start + j] = s >= t;
                    }
                }
            }
            if !range.clone().any(|c| truth[c]) {
                skipped += 1;
                continue;
            }
            let (scores, relevant) = match options.scope {
                RankScope::WithinGroup => (group_scores, range.clone().map(|c| truth[c]).collect()),
                RankScope::AllPrompts => (
                    prompt_emb.iter().map(|p| dot(tok, p)).collect(),
                    (0..candidates.len()).map(|c| range.contains(&c) && truth[c]).collect(),
                ),
            };
            queries.push(PairQuery {
                group: g,
                scores,
                relevant,
                unseen: true_attrs.iter().any(|&a| !seen(a)),
            });
        }
        pred_rows.push(pred);
        truth_rows.push(truth);
        annotated_rows.push(annotated);
    }

    let rec = recall_i2t(&queries, &I2T_KS);
    let key = |g: usize| data_catalog.group(g).key.clone();
    let by_group = |m: &BTreeMap<usize, RecallCounts>| -> IndexMap<String, RecallAtK> {
        m.iter().filter_map(|(&g, c)| recall_at(c).map(|r| (key(g), r))).collect()
    };
    let i2t = I2tSection {
        overall: recall_at(&rec.overall),
        per_group: by_group(&rec.per_group),
        seen: recall_at(&rec.seen),
        unseen: recall_at(&rec.unseen),
        per_group_seen: by_group(&rec.per_group_seen),
        per_group_unseen: by_group(&rec.per_group_unseen),
    };

    // attribute columns only count images annotated in their group
    let mut ma_sum = 0.0;
    let mut ma_counted = 0;
    let mut ma_excluded = Vec::new();
    for c in 0..candidates.len() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| annotated_rows[i][c]).collect();
        let p: Vec<Vec<bool>> = rows.iter().map(|&i| vec![pred_rows[i][c]]).collect();
        let t: Vec<Vec<bool>> = rows.iter().map(|&i| vec![truth_rows[i][c]]).collect();
        let ma = compute_ma(&p, &t);
        match ma.value {
            Some(v) => {
                ma_sum += v;
                ma_counted += 1;
            }
            None => ma_excluded.push(data_catalog.label(candidates[c])),
        }
    }
    let f1 = compute_f1(&pred_rows, &truth_rows);

    let t2i = if options.mode == EvalMode::T2i {
        let mut pq = Vec::with_capacity(candidates.len());
        for (c, &a) in candidates.iter().enumerate() {
            let k = token[a.group].expect("candidates come from mapped groups");
            pq.push(PromptQuery {
                scores: image_emb.iter().map(|e| dot(&e[k], &prompt_emb[c])).collect(),
                relevant: labels.iter().map(|l| l.contains(&a)).collect(),
            });
        }
        let (counts, excluded) = recall_t2i(&pq, &T2I_KS);
        let rates = counts.rates();
        let r = |i: usize| rates.as_ref().map(|v| v[i]);
        Some(T2iSection {
            r1: r(0),
            r5: r(1),
            r10: r(2),
            prompts: counts.queries,
            excluded: excluded.iter().map(|&c| data_catalog.label(candidates[c])).collect(),
        })
    } else {
        None
    };

    Ok(MetricsReport {
        mode: options.mode,
        images: images.len(),
        skipped_pairs: skipped,
        unmapped_groups: unmapped,
        i2t,
        t2i,
        m_a: (ma_counted > 0).then(|| ma_sum / ma_counted as f64),
        m_a_excluded: ma_excluded,
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rank by counting candidates that beat each relevant one.
    fn oracle_best_rank(scores: &[f64], relevant: &[bool]) -> Option<usize> {
        (0..scores.len())
            .filter(|&c| relevant[c])
            .map(|c| {
                (0..scores.len())
                    .filter(|&o| scores[o] > scores[c] || (scores[o] == scores[c] && o < c))
                    .count()
            })
            .min()
    }

    #[test]
    fn i2t_examples() {
        let q = |truth: usize| PairQuery {
            group: 0,
            scores: vec![0.9, 0.2, 0.5],
            relevant: (0..3).map(|c| c == truth).collect(),
            unseen: false,
        };
        let r = recall_i2t(&[q(0)], &[1, 2]);
        assert_eq!(r.overall.rates().unwrap(), vec![100.0, 100.0]);
        let r = recall_i2t(&[q(2)], &[1, 2]);
        assert_eq!(r.overall.rates().unwrap(), vec![0.0, 100.0]);
        // K beyond the candidate count
        let r = recall_i2t(&[q(1)], &[10]);
        assert_eq!(r.overall.rates().unwrap(), vec![100.0]);
    }

    #[test]
    fn ties_follow_candidate_order() {
        assert_eq!(rank(&[0.5, 0.7, 0.5, 0.7]), vec![1, 3, 0, 2]);
        assert_eq!(best_rank(&[0.5, 0.5], &[false, true]), Some(1));
    }

    #[test]
    fn t2i_examples() {
        let q = PromptQuery {
            scores: vec![0.9, 0.1, 0.3],
            relevant: vec![true, false, false],
        };
        let none = PromptQuery {
            scores: vec![0.9, 0.1, 0.3],
            relevant: vec![false; 3],
        };
        let (c, excluded) = recall_t2i(&[q, none], &[1, 5, 10]);
        assert_eq!(c.rates().unwrap(), vec![100.0; 3]);
        assert_eq!(excluded, vec![1]);
    }

    #[test]
    fn ma_examples() {
        let truth = vec![vec![true], vec![false], vec![true], vec![false]];
        assert_eq!(compute_ma(&truth, &truth).value, Some(100.0));
        let all_pos = vec![vec![true]; 4];
        assert_eq!(compute_ma(&all_pos, &truth).value, Some(50.0));

        // 3 attributes × 4 images, hand-computed confusion tables:
        // a0: TP/P = 1/2, TN/N = 2/2; a1: 1/1, 2/3; a2: all negative, excluded
        let truth = vec![
            vec![true, false, false],
            vec![true, false, false],
            vec![false, true, false],
            vec![false, false, false],
        ];
        let pred = vec![
            vec![true, false, false],
            vec![false, true, false],
            vec![false, true, true],
            vec![false, false, false],
        ];
        let ma = compute_ma(&pred, &truth);
        let expected = 100.0 * ((0.5 + 1.0) + (1.0 + 2.0 / 3.0)) / 4.0;
        assert!((ma.value.unwrap() - expected).abs() < 1e-12);
        assert_eq!(ma.excluded, vec![2]);
    }

    #[test]
    fn f1_examples() {
        let truth = vec![vec![true, false, true], vec![false, true, false]];
        assert_eq!(compute_f1(&truth, &truth), Some(100.0));
        let disjoint = vec![vec![false, true, false], vec![true, false, true]];
        assert_eq!(compute_f1(&disjoint, &truth), Some(0.0));
        // image 0: P = 1/2, R = 1/2 → 0.5; image 1: both empty → 1
        let truth = vec![vec![true, true, false], vec![false, false, false]];
        let pred = vec![vec![true, false, true], vec![false, false, false]];
        assert!((compute_f1(&pred, &truth).unwrap() - 75.0).abs() < 1e-12);
    }

    fn random_queries(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<PairQuery> {
        (0..n)
            .map(|i| {
                // coarse scores so ties occur
                let scores = (0..m).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect();
                let mut relevant: Vec<bool> = (0..m).map(|_| rng.random_bool(0.25)).collect();
                if !relevant.iter().any(|&r| r) {
                    relevant[rng.random_range(0..m)] = true;
                }
                PairQuery {
                    group: i % 3,
                    scores,
                    relevant,
                    unseen: rng.random_bool(0.3),
                }
            })
            .collect()
    }

    #[test]
    fn fifty_image_run_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let qs = random_queries(&mut rng, 50 * 8, 5);
        let r = recall_i2t(&qs, &[1, 2]);
        for (ki, &k) in [1usize, 2].iter().enumerate() {
            let hits = qs
                .iter()
                .filter(|q| oracle_best_rank(&q.scores, &q.relevant).is_some_and(|b| b < k))
                .count();
            assert_eq!(r.overall.hits[ki], hits);
        }
    }

    proptest! {
        #[test]
        fn best_rank_matches_oracle(seed in any::<u64>(), m in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for q in random_queries(&mut rng, 20, m) {
                prop_assert_eq!(best_rank(&q.scores, &q.relevant), oracle_best_rank(&q.scores, &q.relevant));
            }
        }

        #[test]
        fn recall_laws(seed in any::<u64>(), m in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let qs = random_queries(&mut rng, 30, m);
            let r = recall_i2t(&qs, &[1, 2, 5]).overall.rates().unwrap();
            prop_assert!(r[0] <= r[1] && r[1] <= r[2]);
            // a distractor candidate never raises recall
            let with_distractor: Vec<PairQuery> = qs
                .iter()
                .map(|q| {
                    let mut q = q.clone();
                    q.scores.push((rng.random_range(0..5) as f64) / 4.0);
                    q.relevant.push(false);
                    q
                })
                .collect();
            let d = recall_i2t(&with_distractor, &[1, 2, 5]).overall.rates().unwrap();
            prop_assert!(d.iter().zip(&r).all(|(a, b)| a <= b));
        }

        #[test]
        fn ma_is_invariant_to_attribute_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<Vec<bool>> = (0..10).map(|_| (0..4).map(|_| rng.random_bool(0.5)).collect()).collect();
            let truth: Vec<Vec<bool>> = (0..10).map(|_| (0..4).map(|_| rng.random_bool(0.5)).collect()).collect();
            let perm = [2, 0, 3, 1];
            let p2: Vec<Vec<bool>> = pred.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
            let t2: Vec<Vec<bool>> = truth.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
            let a = compute_ma(&pred, &truth).value;
            let b = compute_ma(&p2, &t2).value;
            let same = match (a, b) {
                (Some(x), Some(y)) => (x - y).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            prop_assert!(same);
            let mut rp = pred.clone();
            let mut rt = truth.clone();
            rp.reverse();
            rt.reverse();
            let f = compute_f1(&pred, &truth).unwrap();
            let g = compute_f1(&rp, &rt).unwrap();
            prop_assert!((f - g).abs() < 1e-12);
        }
    }
}
