//! Inference and evaluation: argmax prediction over document embeddings,
//! per-class top-1 metrics, calibrated stacking for the generalized setting,
//! and embedding exports.
//!
//! Only the global head is used at prediction time; the attention head runs
//! in the explain paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{encode_all_documents, EncodedDocument, EncodedImage, ModelParams};
use crate::wordvec::WordVectors;

/// Harmonic mean of two accuracies (or percentages, consistently);
/// 0 when both are 0.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

/// Mean over the classes in `class_set` of within-class accuracy.
/// Every class in the set must have at least one labeled example.
pub fn per_class_top1(
    predictions: &[String],
    labels: &[String],
    class_set: &BTreeSet<String>,
) -> Result<f64> {
    assert_eq!(predictions.len(), labels.len());
    let mut correct: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (pred, label) in predictions.iter().zip(labels) {
        if !class_set.contains(label.as_str()) {
            continue;
        }
        let entry = correct.entry(label.as_str()).or_insert((0, 0));
        entry.1 += 1;
        if pred == label {
            entry.0 += 1;
        }
    }
    for class in class_set {
        if !correct.contains_key(class.as_str()) {
            return Err(Error::Protocol(format!(
                "class '{}' has no test images",
                class
            )));
        }
    }
    let sum: f64 = correct
        .values()
        .map(|&(c, n)| c as f64 / n as f64)
        .sum();
    Ok(sum / class_set.len() as f64)
}

/// Candidate documents for prediction: sorted class ids, their embeddings,
/// and which of them take the calibration penalty.
pub struct Candidates {
    pub ids: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    penalized: Vec<bool>,
}

impl Candidates {
    /// Build from encoded documents. `ids` fixes the candidate ordering and
    /// the tie-break (first maximum in this order wins).
    pub fn new(
        docs: &BTreeMap<String, EncodedDocument>,
        ids: &[String],
        penalized: &BTreeSet<String>,
    ) -> Self {
        let embeddings = ids.iter().map(|id| docs[id].g_cls.clone()).collect();
        let penalized = ids.iter().map(|id| penalized.contains(id)).collect();
        Candidates {
            ids: ids.to_vec(),
            embeddings,
            penalized,
        }
    }

    /// Global scores of an image against every candidate, before calibration.
    pub fn scores(&self, f_cls: &[f64]) -> Vec<f64> {
        self.embeddings
            .iter()
            .map(|e| e.iter().zip(f_cls).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Argmax class with `gamma` subtracted from penalized candidates.
    /// Deterministic: ties resolve to the first candidate in id order.
    pub fn predict_from_scores(&self, scores: &[f64], gamma: f64) -> &str {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (i, &raw) in scores.iter().enumerate() {
            let s = if self.penalized[i] { raw - gamma } else { raw };
            if s > best_score {
                best_score = s;
                best = i;
            }
        }
        &self.ids[best]
    }

    pub fn predict(&self, f_cls: &[f64], gamma: f64) -> &str {
        let scores = self.scores(f_cls);
        self.predict_from_scores(&scores, gamma)
    }
}

/// One-off prediction for a single image record.
pub fn predict(
    params: &ModelParams,
    rec: &crate::corpus::ImageFeatureRecord,
    docs: &BTreeMap<String, EncodedDocument>,
    candidate_ids: &[String],
    penalized: &BTreeSet<String>,
    gamma: f64,
) -> String {
    let cands = Candidates::new(docs, candidate_ids, penalized);
    let img = project_image(params, rec);
    cands.predict(&img.f_cls, gamma).to_string()
}

/// Image-side projection without a tape; the image path is a plain affine.
pub fn project_image(params: &ModelParams, rec: &crate::corpus::ImageFeatureRecord) -> EncodedImage {
    let (r0, r) = (params.config.input_dim, params.config.embed_dim);
    assert_eq!(
        rec.cls_feature.len(),
        r0,
        "image feature dim {} does not match model input dim {}",
        rec.cls_feature.len(),
        r0
    );
    let w = params.image_projection.weight.data();
    let b = params.image_projection.bias.data();
    let project_row = |row: &[f64], out: &mut [f64]| {
        out.copy_from_slice(b);
        for (i, &x) in row.iter().enumerate() {
            let wrow = &w[i * r..(i + 1) * r];
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += x * wv;
            }
        }
    };
    let mut f_cls = vec![0.0; r];
    project_row(&rec.cls_feature, &mut f_cls);
    let mut patches = vec![0.0; rec.n_patches * r];
    for p in 0..rec.n_patches {
        let (src, dst) = (rec.patch(p), &mut patches[p * r..(p + 1) * r]);
        project_row(src, dst);
    }
    EncodedImage {
        f_cls,
        f_patches: crate::tensor::Tensor::matrix(rec.n_patches, r, patches),
    }
}

/// The seen classes treated as unseen during calibration: the last
/// `ceil(frac * n_seen)` of the sorted seen list, clamped to leave at least
/// one class on each side.
pub fn proxy_unseen_classes(dataset: &Dataset, frac: f64) -> BTreeSet<String> {
    let seen = dataset.seen_classes();
    let n = seen.len();
    let k = ((n as f64 * frac).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    seen[n - k..].iter().cloned().collect()
}

/// One point of the calibration sweep.
#[derive(Debug, Clone)]
pub struct GammaSweepPoint {
    pub gamma: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
}

/// Scores and labels of the held-out images against the seen-class
/// candidates, reusable across the whole gamma sweep.
struct HeldoutScores {
    cands: Candidates,
    scored: Vec<(Vec<f64>, String)>,
    proxy: BTreeSet<String>,
    non_proxy: BTreeSet<String>,
}

fn heldout_scores(
    params: &ModelParams,
    dataset: &Dataset,
    proxy: &BTreeSet<String>,
) -> Result<HeldoutScores> {
    if dataset.split.heldout_images.is_empty() {
        return Err(Error::Protocol("held-out set is empty".into()));
    }
    let seen_ids = dataset.seen_classes();
    let non_proxy: BTreeSet<String> = seen_ids
        .iter()
        .filter(|c| !proxy.contains(*c))
        .cloned()
        .collect();
    if proxy.is_empty() || non_proxy.is_empty() {
        return Err(Error::Protocol(
            "calibration needs proxy-unseen and seen classes on the held-out set".into(),
        ));
    }
    let seen_docs: BTreeMap<String, crate::corpus::ClassDocument> = dataset
        .documents
        .iter()
        .filter(|(id, _)| dataset.split.seen_classes.contains(*id))
        .map(|(id, d)| (id.clone(), d.clone()))
        .collect();
    let encoded = encode_all_documents(params, &seen_docs);
    // during calibration the non-proxy (true seen) classes take the penalty
    let cands = Candidates::new(&encoded, &seen_ids, &non_proxy);
    let scored = dataset
        .split
        .heldout_images
        .iter()
        .map(|id| {
            let rec = dataset.feature(id).expect("validated image id");
            let img = project_image(params, rec);
            (cands.scores(&img.f_cls), rec.class_id.clone())
        })
        .collect();
    Ok(HeldoutScores {
        cands,
        scored,
        proxy: proxy.clone(),
        non_proxy,
    })
}

impl HeldoutScores {
    fn metrics_at(&self, gamma: f64) -> Result<(f64, f64, f64)> {
        let predictions: Vec<String> = self
            .scored
            .iter()
            .map(|(scores, _)| self.cands.predict_from_scores(scores, gamma).to_string())
            .collect();
        let labels: Vec<String> = self.scored.iter().map(|(_, l)| l.clone()).collect();
        let u = per_class_top1(&predictions, &labels, &self.proxy)?;
        let s = per_class_top1(&predictions, &labels, &self.non_proxy)?;
        Ok((u, s, harmonic_mean(u, s)))
    }
}

/// Held-out proxy metrics at one gamma; the trainer's model-selection signal.
pub fn heldout_metrics(
    params: &ModelParams,
    dataset: &Dataset,
    proxy: &BTreeSet<String>,
    gamma: f64,
) -> Result<(f64, f64, f64)> {
    heldout_scores(params, dataset, proxy)?.metrics_at(gamma)
}

/// Evenly spaced grid of 41 values over [0, max seen score − min proxy
/// score] observed on the held-out set; degenerates to {0} when the span
/// is not positive.
pub fn default_gamma_grid(
    params: &ModelParams,
    dataset: &Dataset,
    proxy: &BTreeSet<String>,
) -> Result<Vec<f64>> {
    let hs = heldoutscores_for_grid(params, dataset, proxy)?;
    let mut max_seen = f64::NEG_INFINITY;
    let mut min_proxy = f64::INFINITY;
    for (scores, _) in &hs.scored {
        for (i, &s) in scores.iter().enumerate() {
            if hs.non_proxy.contains(&hs.cands.ids[i]) {
                max_seen = max_seen.max(s);
            } else {
                min_proxy = min_proxy.min(s);
            }
        }
    }
    let span = max_seen - min_proxy;
    if !span.is_finite() || span <= 0.0 {
        return Ok(vec![0.0]);
    }
    Ok((0..41).map(|i| span * i as f64 / 40.0).collect())
}

fn heldoutscores_for_grid(
    params: &ModelParams,
    dataset: &Dataset,
    proxy: &BTreeSet<String>,
) -> Result<HeldoutScores> {
    heldout_scores(params, dataset, proxy)
}

/// Sweep the grid on the held-out set and return the gamma maximizing the
/// harmonic mean (first on ties), plus the full sweep curve.
pub fn calibrate_gamma(
    params: &ModelParams,
    dataset: &Dataset,
    proxy: &BTreeSet<String>,
    grid: &[f64],
) -> Result<(f64, Vec<GammaSweepPoint>)> {
    assert!(!grid.is_empty(), "gamma grid must be non-empty");
    let hs = heldout_scores(params, dataset, proxy)?;
    let mut sweep = Vec::with_capacity(grid.len());
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &gamma in grid {
        let (u, s, h) = hs.metrics_at(gamma)?;
        if h > best.1 {
            best = (gamma, h);
        }
        sweep.push(GammaSweepPoint { gamma, u, s, h });
    }
    Ok((best.0, sweep))
}

/// Full evaluation report under the per-class protocol.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub zsl_top1: f64,
    pub gzsl_u: f64,
    pub gzsl_s: f64,
    pub gzsl_h: f64,
    pub gamma: f64,
    pub per_class_accuracy: BTreeMap<String, f64>,
}

/// ZSL top-1 over unseen candidates (gamma ignored) and GZSL u/s/H over the
/// full candidate set with `gamma` subtracted from seen-class scores.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, gamma: f64) -> Result<EvalReport> {
    if dataset.split.test_images.is_empty() {
        return Err(Error::Protocol("test set is empty".into()));
    }
    let encoded = encode_all_documents(params, &dataset.documents);
    let unseen: BTreeSet<String> = dataset.split.unseen_classes.clone();
    let seen: BTreeSet<String> = dataset.split.seen_classes.clone();

    // images and their projections, reused by both protocols
    let test: Vec<(&crate::corpus::ImageFeatureRecord, EncodedImage)> = dataset
        .split
        .test_images
        .iter()
        .map(|id| {
            let rec = dataset.feature(id).expect("validated image id");
            let img = project_image(params, rec);
            (rec, img)
        })
        .collect();

    // pure ZSL: unseen candidates only, unseen-class test images
    let unseen_ids = dataset.unseen_classes();
    let zsl_cands = Candidates::new(&encoded, &unseen_ids, &BTreeSet::new());
    let mut zsl_preds = Vec::new();
    let mut zsl_labels = Vec::new();
    for (rec, img) in &test {
        if unseen.contains(&rec.class_id) {
            zsl_preds.push(zsl_cands.predict(&img.f_cls, 0.0).to_string());
            zsl_labels.push(rec.class_id.clone());
        }
    }
    let zsl_top1 = per_class_top1(&zsl_preds, &zsl_labels, &unseen)?;

    // GZSL: all candidates, seen scores penalized by gamma
    let all_ids = dataset.all_classes();
    let gzsl_cands = Candidates::new(&encoded, &all_ids, &seen);
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (rec, img) in &test {
        preds.push(gzsl_cands.predict(&img.f_cls, gamma).to_string());
        labels.push(rec.class_id.clone());
    }
    let gzsl_u = per_class_top1(&preds, &labels, &unseen)?;
    let gzsl_s = per_class_top1(&preds, &labels, &seen)?;
    let gzsl_h = harmonic_mean(gzsl_u, gzsl_s);

    let mut per_class_accuracy = BTreeMap::new();
    for class in all_ids {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (pred, label) in preds.iter().zip(&labels) {
            if label == &class {
                total += 1;
                if pred == label {
                    correct += 1;
                }
            }
        }
        if total > 0 {
            per_class_accuracy.insert(class, correct as f64 / total as f64);
        }
    }

    Ok(EvalReport {
        zsl_top1,
        gzsl_u,
        gzsl_s,
        gzsl_h,
        gamma,
        per_class_accuracy,
    })
}

impl EvalReport {
    /// Line-delimited record form.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "zsl_top1 {}", self.zsl_top1);
        let _ = writeln!(out, "gzsl_u {}", self.gzsl_u);
        let _ = writeln!(out, "gzsl_s {}", self.gzsl_s);
        let _ = writeln!(out, "gzsl_h {}", self.gzsl_h);
        let _ = writeln!(out, "gamma {}", self.gamma);
        for (class, acc) in &self.per_class_accuracy {
            let _ = writeln!(out, "class {} {}", class, acc);
        }
        out
    }

    /// Human-readable summary block.
    pub fn summary(&self) -> String {
        format!(
            "ZSL  top-1 (unseen):   {:.4}\nGZSL unseen (u):       {:.4}\nGZSL seen (s):         {:.4}\nGZSL harmonic mean:    {:.4}\ngamma:                 {:.6}\n",
            self.zsl_top1, self.gzsl_u, self.gzsl_s, self.gzsl_h, self.gamma
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }
}

/// Export the learned per-class document embeddings, one record per class,
/// sorted by class id.
pub fn export_embeddings(
    params: &ModelParams,
    documents: &BTreeMap<String, crate::corpus::ClassDocument>,
    path: &Path,
) -> Result<()> {
    let encoded = encode_all_documents(params, documents);
    write_embedding_file(
        &encoded
            .iter()
            .map(|(id, d)| (id.clone(), d.g_cls.clone()))
            .collect(),
        path,
    )
}

/// Write a class-embedding map as `class_id v1 v2 ...` lines.
pub fn write_embedding_file(embeddings: &BTreeMap<String, Vec<f64>>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (class, vec) in embeddings {
        out.push_str(class);
        for v in vec {
            let _ = write!(out, " {}", v);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The averaged-word-vector baseline embedding: per class, the mean of its
/// in-vocabulary word vectors.
pub fn baseline_avg_wordvec(
    documents: &BTreeMap<String, crate::corpus::ClassDocument>,
    wv: &WordVectors,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (class, doc) in documents {
        let mut sum = vec![0.0; wv.dim()];
        let mut count = 0usize;
        for token in &doc.tokens {
            if let Some(vec) = wv.get(token) {
                for (s, &v) in sum.iter_mut().zip(vec) {
                    *s += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Protocol(format!(
                "document for class '{}' has no in-vocabulary words",
                class
            )));
        }
        sum.iter_mut().for_each(|s| *s /= count as f64);
        out.insert(class.clone(), sum);
    }
    Ok(out)
}

/// Nearest-class classification by cosine similarity between per-image
/// vectors and per-class embeddings; per-class top-1 over `class_set`.
pub fn nearest_class_top1(
    class_embeddings: &BTreeMap<String, Vec<f64>>,
    images: &[(Vec<f64>, String)],
    class_set: &BTreeSet<String>,
) -> Result<f64> {
    let ids: Vec<&String> = class_embeddings.keys().collect();
    let norms: Vec<f64> = ids
        .iter()
        .map(|id| norm(&class_embeddings[*id]))
        .collect();
    let mut preds = Vec::with_capacity(images.len());
    let mut labels = Vec::with_capacity(images.len());
    for (vec, label) in images {
        let vn = norm(vec);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (i, id) in ids.iter().enumerate() {
            let e = &class_embeddings[*id];
            let dot: f64 = e.iter().zip(vec).map(|(a, b)| a * b).sum();
            let cos = dot / (norms[i] * vn).max(1e-12);
            if cos > best_score {
                best_score = cos;
                best = i;
            }
        }
        preds.push(ids[best].clone());
        labels.push(label.clone());
    }
    per_class_top1(&preds, &labels, class_set)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_reproduces_published_pairs() {
        assert!((harmonic_mean(66.8, 76.8) - 71.5).abs() < 0.05);
        assert!((harmonic_mean(35.8, 91.9) - 51.5).abs() < 0.05);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        let u = 0.42;
        assert!((harmonic_mean(u, u) - u).abs() < 1e-12);
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn per_class_top1_is_class_mean_not_micro() {
        // class A 2/2 correct, class B 0/2 -> 0.5
        let preds = strings(&["A", "A", "A", "A"]);
        let labels = strings(&["A", "A", "B", "B"]);
        let set: BTreeSet<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        assert_eq!(per_class_top1(&preds, &labels, &set).unwrap(), 0.5);

        // all correct -> 1.0
        let preds = strings(&["A", "B"]);
        let labels = strings(&["A", "B"]);
        assert_eq!(per_class_top1(&preds, &labels, &set).unwrap(), 1.0);

        // imbalanced: A 9/10, B 0/1 -> micro 0.818..., per-class 0.45
        let mut preds = vec!["A".to_string(); 10];
        preds[9] = "B".to_string(); // one A image misclassified
        preds.push("A".to_string()); // the single B image misclassified
        let mut labels = vec!["A".to_string(); 10];
        labels.push("B".to_string());
        let pc = per_class_top1(&preds, &labels, &set).unwrap();
        assert!((pc - 0.45).abs() < 1e-12);
        let micro = preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count() as f64
            / preds.len() as f64;
        assert!((micro - 9.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn per_class_top1_rejects_empty_class() {
        let preds = strings(&["A"]);
        let labels = strings(&["A"]);
        let set: BTreeSet<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        assert!(per_class_top1(&preds, &labels, &set).is_err());
    }

    fn toy_candidates() -> Candidates {
        let penalized: Vec<bool> = vec![true, false, false];
        Candidates {
            ids: strings(&["s1", "u1", "u2"]),
            embeddings: vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]],
            penalized,
        }
    }

    #[test]
    fn predict_single_candidate_and_gamma_limit() {
        let docs_single = Candidates {
            ids: strings(&["only"]),
            embeddings: vec![vec![1.0, 1.0]],
            penalized: vec![false],
        };
        assert_eq!(docs_single.predict(&[0.3, -2.0], 0.0), "only");

        // huge gamma forces the unpenalized candidates
        let cands = toy_candidates();
        let pred = cands.predict(&[10.0, 0.1], 1e9);
        assert_ne!(pred, "s1");
    }

    #[test]
    fn predict_is_argmax_and_shift_invariant() {
        let cands = toy_candidates();
        let f = vec![0.2, 0.9];
        let scores = cands.scores(&f);
        let base = cands.predict_from_scores(&scores, 0.0);
        // adding a constant to every score of this image changes nothing
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        assert_eq!(base, cands.predict_from_scores(&shifted, 0.0));
    }

    #[test]
    fn predict_breaks_ties_by_sorted_id() {
        let cands = Candidates {
            ids: strings(&["a", "b"]),
            embeddings: vec![vec![1.0], vec![1.0]],
            penalized: vec![false, false],
        };
        assert_eq!(cands.predict(&[2.0], 0.0), "a");
    }

    #[test]
    fn report_h_is_consistent() {
        let report = EvalReport {
            zsl_top1: 0.62,
            gzsl_u: 0.5,
            gzsl_s: 0.8,
            gzsl_h: harmonic_mean(0.5, 0.8),
            gamma: 0.1,
            per_class_accuracy: BTreeMap::new(),
        };
        assert!((report.gzsl_h - harmonic_mean(report.gzsl_u, report.gzsl_s)).abs() < 1e-9);
        let lines = report.to_lines();
        assert!(lines.contains("gzsl_h"));
    }

    #[test]
    fn baseline_avg_wordvec_means() {
        use crate::corpus::ClassDocument;
        use crate::tensor::Tensor;
        let wv = WordVectors::from_entries(vec![
            ("a".into(), vec![1.0, 2.0]),
            ("b".into(), vec![3.0, 4.0]),
        ])
        .unwrap();
        let mut documents = BTreeMap::new();
        documents.insert(
            "c1".to_string(),
            ClassDocument {
                class_id: "c1".into(),
                tokens: strings(&["a", "b"]),
                matrix: Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]),
                dropped_oov: 0,
            },
        );
        documents.insert(
            "c2".to_string(),
            ClassDocument {
                class_id: "c2".into(),
                tokens: strings(&["b"]),
                matrix: Tensor::matrix(1, 2, vec![3.0, 4.0]),
                dropped_oov: 0,
            },
        );
        let base = baseline_avg_wordvec(&documents, &wv).unwrap();
        assert_eq!(base["c1"], vec![2.0, 3.0]);
        assert_eq!(base["c2"], vec![3.0, 4.0]);
    }

    #[test]
    fn nearest_class_matches_obvious_geometry() {
        let mut emb = BTreeMap::new();
        emb.insert("x".to_string(), vec![1.0, 0.0]);
        emb.insert("y".to_string(), vec![0.0, 1.0]);
        let images = vec![
            (vec![0.9, 0.1], "x".to_string()),
            (vec![0.2, 0.8], "y".to_string()),
        ];
        let set: BTreeSet<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
        assert_eq!(nearest_class_top1(&emb, &images, &set).unwrap(), 1.0);
    }
}
