//! Seeded synthetic datasets with planted image-word alignments, plus the
//! brute-force oracle that bounds achievable accuracy.
//!
//! Every visual-vocabulary word gets a random unit prototype; its word-vector
//! entry is that prototype exactly, so the image-word alignment is learnable
//! in principle. Each class's document mixes its discriminative words with
//! noise words carrying unrelated random vectors, and each image patch is a
//! noisy copy of one discriminative word's prototype.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::ImageFeatureRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub train_per_class: usize,
    pub heldout_per_class: usize,
    pub test_per_class: usize,
    pub n_patches: usize,
    pub input_dim: usize,
    pub visual_vocab: usize,
    pub noise_vocab: usize,
    pub words_per_doc: usize,
    pub disc_words_per_class: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_seen: 20,
            n_unseen: 5,
            train_per_class: 20,
            heldout_per_class: 5,
            test_per_class: 10,
            n_patches: 16,
            input_dim: 32,
            visual_vocab: 40,
            noise_vocab: 200,
            words_per_doc: 50,
            disc_words_per_class: 5,
            sigma: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_seen", self.n_seen),
            ("n_unseen", self.n_unseen),
            ("train_per_class", self.train_per_class),
            ("heldout_per_class", self.heldout_per_class),
            ("test_per_class", self.test_per_class),
            ("n_patches", self.n_patches),
            ("input_dim", self.input_dim),
            ("visual_vocab", self.visual_vocab),
            ("noise_vocab", self.noise_vocab),
            ("words_per_doc", self.words_per_doc),
            ("disc_words_per_class", self.disc_words_per_class),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if self.disc_words_per_class > self.visual_vocab {
            return Err(Error::Config(format!(
                "disc_words_per_class {} exceeds visual_vocab {}",
                self.disc_words_per_class, self.visual_vocab
            )));
        }
        if self.words_per_doc < self.disc_words_per_class {
            return Err(Error::Config(format!(
                "words_per_doc {} is below disc_words_per_class {}",
                self.words_per_doc, self.disc_words_per_class
            )));
        }
        if self.noise_vocab < self.words_per_doc - self.disc_words_per_class {
            return Err(Error::Config(format!(
                "noise_vocab {} cannot fill {} noise slots without replacement",
                self.noise_vocab,
                self.words_per_doc - self.disc_words_per_class
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_seen + self.n_unseen
    }
}

/// The planted solution: which words discriminate each class, the prototype
/// behind each visual word, and which word generated each image patch.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub disc_words: BTreeMap<String, Vec<String>>,
    pub prototypes: BTreeMap<String, Vec<f64>>,
    pub patch_words: BTreeMap<String, Vec<String>>,
}

/// File paths written by [`generate`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub wordvec: PathBuf,
    pub documents: PathBuf,
    pub features: PathBuf,
    pub split: PathBuf,
    pub ground_truth: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> Self {
        SynthFiles {
            wordvec: dir.join("wordvec.txt"),
            documents: dir.join("documents.txt"),
            features: dir.join("features.txt"),
            split: dir.join("split.txt"),
            ground_truth: dir.join("ground_truth.txt"),
        }
    }

    pub fn all(&self) -> [&PathBuf; 5] {
        [
            &self.wordvec,
            &self.documents,
            &self.features,
            &self.split,
            &self.ground_truth,
        ]
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; uniform draws are in (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn class_id(i: usize) -> String {
    format!("c{:02}", i)
}

/// Generate the four dataset files plus the ground-truth file into `dir`.
/// Deterministic: the same config produces byte-identical files.
pub fn generate(config: &SynthConfig, dir: &Path) -> Result<(SynthFiles, GroundTruth)> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SynthFiles::in_dir(dir);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // vocabulary: visual words carry the prototypes, noise words carry
    // unrelated unit vectors
    let visual_words: Vec<String> = (0..config.visual_vocab)
        .map(|i| format!("vw{:03}", i))
        .collect();
    let noise_words: Vec<String> = (0..config.noise_vocab)
        .map(|i| format!("nw{:03}", i))
        .collect();
    let mut prototypes = BTreeMap::new();
    let mut wordvec_out = String::new();
    for w in &visual_words {
        let proto = unit_vector(&mut rng, config.input_dim);
        push_vector_line(&mut wordvec_out, w, &proto);
        prototypes.insert(w.clone(), proto);
    }
    for w in &noise_words {
        let v = unit_vector(&mut rng, config.input_dim);
        push_vector_line(&mut wordvec_out, w, &v);
    }

    // per-class discriminative word sets, all distinct
    let n_classes = config.n_classes();
    let mut disc_words: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut used_sets: BTreeSet<Vec<String>> = BTreeSet::new();
    for c in 0..n_classes {
        let set = loop {
            let mut pool = visual_words.clone();
            pool.shuffle(&mut rng);
            let mut set: Vec<String> = pool[..config.disc_words_per_class].to_vec();
            set.sort();
            if used_sets.insert(set.clone()) {
                break set;
            }
        };
        disc_words.insert(class_id(c), set);
    }

    // documents: discriminative words interleaved with sampled noise words,
    // order shuffled per seed
    let mut documents_out = String::new();
    for c in 0..n_classes {
        let id = class_id(c);
        let mut words = disc_words[&id].clone();
        let mut pool = noise_words.clone();
        pool.shuffle(&mut rng);
        words.extend(
            pool[..config.words_per_doc - config.disc_words_per_class]
                .iter()
                .cloned(),
        );
        words.shuffle(&mut rng);
        let _ = writeln!(documents_out, "{}\t{}", id, words.join(" "));
    }

    // images: every class gets train/heldout/test slots; the split lists
    // train and heldout only for seen classes
    let mut features_out = String::new();
    let mut split_out = String::new();
    let mut patch_words: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for c in 0..n_classes {
        let id = class_id(c);
        let seen = c < config.n_seen;
        let _ = writeln!(split_out, "{} {}", if seen { "seen" } else { "unseen" }, id);
    }
    for c in 0..n_classes {
        let id = class_id(c);
        let seen = c < config.n_seen;
        let roles: [(&str, usize, Option<&str>); 3] = [
            ("train", config.train_per_class, seen.then_some("train")),
            ("held", config.heldout_per_class, seen.then_some("heldout")),
            ("test", config.test_per_class, Some("test")),
        ];
        for (role, count, split_kind) in roles {
            for k in 0..count {
                let image_id = format!("{}_{}{:02}", id, role, k);
                let disc = &disc_words[&id];
                let mut words = Vec::with_capacity(config.n_patches);
                let mut patches = Vec::with_capacity(config.n_patches * config.input_dim);
                let mut cls = vec![0.0; config.input_dim];
                for _ in 0..config.n_patches {
                    let word = &disc[rng.gen_range(0..disc.len())];
                    words.push(word.clone());
                    let proto = &prototypes[word];
                    for (j, &p) in proto.iter().enumerate() {
                        let value = p + config.sigma * gaussian(&mut rng);
                        patches.push(value);
                        cls[j] += value;
                    }
                }
                cls.iter_mut()
                    .for_each(|v| *v /= config.n_patches as f64);
                push_feature_line(&mut features_out, &image_id, &id, &cls, &patches, config);
                patch_words.insert(image_id.clone(), words);
                if let Some(kind) = split_kind {
                    let _ = writeln!(split_out, "{} {}", kind, image_id);
                }
            }
        }
    }

    let gt = GroundTruth {
        disc_words,
        prototypes,
        patch_words,
    };

    fs::write(&files.wordvec, wordvec_out).map_err(|e| Error::io(&files.wordvec, e))?;
    fs::write(&files.documents, documents_out).map_err(|e| Error::io(&files.documents, e))?;
    fs::write(&files.features, features_out).map_err(|e| Error::io(&files.features, e))?;
    fs::write(&files.split, split_out).map_err(|e| Error::io(&files.split, e))?;
    fs::write(&files.ground_truth, gt.to_lines()).map_err(|e| Error::io(&files.ground_truth, e))?;
    Ok((files, gt))
}

fn push_vector_line(out: &mut String, token: &str, vec: &[f64]) {
    out.push_str(token);
    for v in vec {
        let _ = write!(out, " {}", v);
    }
    out.push('\n');
}

fn push_feature_line(
    out: &mut String,
    image_id: &str,
    class: &str,
    cls: &[f64],
    patches: &[f64],
    config: &SynthConfig,
) {
    let _ = write!(out, "{}\t{}", image_id, class);
    out.push('\t');
    push_floats(out, cls);
    for p in 0..config.n_patches {
        out.push('\t');
        push_floats(
            out,
            &patches[p * config.input_dim..(p + 1) * config.input_dim],
        );
    }
    out.push('\n');
}

fn push_floats(out: &mut String, vals: &[f64]) {
    let mut first = true;
    for v in vals {
        if !first {
            out.push(' ');
        }
        let _ = write!(out, "{}", v);
        first = false;
    }
}

impl GroundTruth {
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (class, words) in &self.disc_words {
            let _ = writeln!(out, "class {} {}", class, words.join(" "));
        }
        for (word, proto) in &self.prototypes {
            out.push_str("proto ");
            push_vector_line(&mut out, word, proto);
        }
        for (image, words) in &self.patch_words {
            let _ = writeln!(out, "patch {} {}", image, words.join(" "));
        }
        out
    }

    pub fn load(path: &Path) -> Result<GroundTruth> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut gt = GroundTruth::default();
        for (lineno, line) in content.lines().enumerate() {
            let lineno = lineno + 1;
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.first() {
                Some(&"class") if fields.len() >= 3 => {
                    gt.disc_words.insert(
                        fields[1].to_string(),
                        fields[2..].iter().map(|s| s.to_string()).collect(),
                    );
                }
                Some(&"proto") if fields.len() >= 3 => {
                    let vec: Vec<f64> = fields[2..]
                        .iter()
                        .map(|f| {
                            f.parse().map_err(|_| {
                                Error::format(path, lineno, format!("bad float '{}'", f))
                            })
                        })
                        .collect::<Result<_>>()?;
                    gt.prototypes.insert(fields[1].to_string(), vec);
                }
                Some(&"patch") if fields.len() >= 3 => {
                    gt.patch_words.insert(
                        fields[1].to_string(),
                        fields[2..].iter().map(|s| s.to_string()).collect(),
                    );
                }
                _ => return Err(Error::format(path, lineno, "unknown ground-truth record")),
            }
        }
        Ok(gt)
    }
}

/// Oracle predictions over a set of image records.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub predictions: Vec<(String, String)>,
    /// Per-class top-1 over the classes present in the input records.
    pub accuracy: f64,
}

/// Brute-force classifier from the planted solution: assign each patch to the
/// nearest prototype by cosine, then pick the class whose discriminative set
/// covers the most patches (ties to the first class in sorted order).
pub fn oracle_classify(records: &[&ImageFeatureRecord], gt: &GroundTruth) -> OracleResult {
    let proto_list: Vec<(&String, &Vec<f64>)> = gt.prototypes.iter().collect();
    let proto_norms: Vec<f64> = proto_list
        .iter()
        .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let classes: Vec<&String> = gt.disc_words.keys().collect();

    let mut predictions = Vec::with_capacity(records.len());
    let mut per_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for rec in records {
        let mut assigned: Vec<&str> = Vec::with_capacity(rec.n_patches);
        for p in 0..rec.n_patches {
            let patch = rec.patch(p);
            let pn = patch.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let mut best = 0usize;
            let mut best_cos = f64::NEG_INFINITY;
            for (i, (_, proto)) in proto_list.iter().enumerate() {
                let dot: f64 = proto.iter().zip(patch).map(|(a, b)| a * b).sum();
                let cos = dot / (proto_norms[i] * pn);
                if cos > best_cos {
                    best_cos = cos;
                    best = i;
                }
            }
            assigned.push(proto_list[best].0);
        }
        let mut best_class = classes[0].as_str();
        let mut best_cover = usize::MIN;
        for class in &classes {
            let set = &gt.disc_words[class.as_str()];
            let cover = assigned
                .iter()
                .filter(|w| set.iter().any(|d| d == **w))
                .count();
            if cover > best_cover {
                best_cover = cover;
                best_class = class;
            }
        }
        let entry = per_class.entry(rec.class_id.as_str()).or_insert((0, 0));
        entry.1 += 1;
        if best_class == rec.class_id {
            entry.0 += 1;
        }
        predictions.push((rec.image_id.clone(), best_class.to_string()));
    }
    let accuracy = per_class
        .values()
        .map(|&(c, n)| c as f64 / n as f64)
        .sum::<f64>()
        / per_class.len().max(1) as f64;
    OracleResult {
        predictions,
        accuracy,
    }
}

/// The unseen-class test records of a dataset, the oracle's usual target.
pub fn unseen_test_records<'a>(
    dataset: &'a crate::corpus::Dataset,
) -> Vec<&'a ImageFeatureRecord> {
    dataset
        .split
        .test_images
        .iter()
        .map(|id| dataset.feature(id).expect("validated image id"))
        .filter(|r| dataset.split.unseen_classes.contains(&r.class_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_dataset;
    use crate::wordvec::{parse_wordvec_file, OovPolicy};

    fn load_generated(files: &SynthFiles) -> crate::corpus::Dataset {
        let wv = parse_wordvec_file(&files.wordvec).unwrap();
        load_dataset(
            &files.documents,
            &files.features,
            &files.split,
            &wv,
            512,
            OovPolicy::Drop,
        )
        .unwrap()
    }

    #[test]
    fn default_config_counts() {
        let config = SynthConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let (files, gt) = generate(&config, dir.path()).unwrap();
        assert_eq!(gt.disc_words.len(), 25);

        let features = fs::read_to_string(&files.features).unwrap();
        let count_role = |role: &str| {
            features
                .lines()
                .filter(|l| l.split('\t').next().unwrap_or("").contains(role))
                .count()
        };
        assert_eq!(count_role("_train"), 500);
        assert_eq!(count_role("_held"), 125);
        assert_eq!(count_role("_test"), 250);

        let documents = fs::read_to_string(&files.documents).unwrap();
        assert_eq!(documents.lines().count(), 25);

        // the split keeps train/heldout on seen classes only
        let ds = load_generated(&files);
        assert_eq!(ds.split.train_images.len(), 400);
        assert_eq!(ds.split.heldout_images.len(), 100);
        assert_eq!(ds.split.test_images.len(), 250);
        assert_eq!(ds.split.seen_classes.len(), 20);
        assert_eq!(ds.split.unseen_classes.len(), 5);
    }

    #[test]
    fn generated_files_pass_corpus_validations() {
        let config = SynthConfig {
            n_seen: 4,
            n_unseen: 2,
            train_per_class: 3,
            heldout_per_class: 2,
            test_per_class: 2,
            n_patches: 4,
            input_dim: 8,
            visual_vocab: 12,
            noise_vocab: 30,
            words_per_doc: 10,
            disc_words_per_class: 3,
            sigma: 0.1,
            seed: 11,
        };
        let dir = tempfile::tempdir().unwrap();
        let (files, gt) = generate(&config, dir.path()).unwrap();
        let ds = load_generated(&files);
        assert_eq!(ds.n_patches, 4);
        assert_eq!(ds.input_dim, 8);
        // zero dropped tokens: every document word is in the vector file
        for doc in ds.documents.values() {
            assert_eq!(doc.dropped_oov, 0);
            assert_eq!(doc.tokens.len(), 10);
        }
        // every patch's generating word belongs to its class's set
        for rec in &ds.features {
            let words = &gt.patch_words[&rec.image_id];
            for w in words {
                assert!(gt.disc_words[&rec.class_id].contains(w));
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_files_different_seed_does_not() {
        let config = SynthConfig {
            n_seen: 3,
            n_unseen: 2,
            train_per_class: 2,
            heldout_per_class: 1,
            test_per_class: 1,
            n_patches: 3,
            input_dim: 6,
            visual_vocab: 10,
            noise_vocab: 20,
            words_per_doc: 8,
            disc_words_per_class: 2,
            sigma: 0.1,
            seed: 21,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (f1, _) = generate(&config, d1.path()).unwrap();
        let (f2, _) = generate(&config, d2.path()).unwrap();
        for (a, b) in f1.all().iter().zip(f2.all().iter()) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }

        let mut other = config.clone();
        other.seed = 22;
        let d3 = tempfile::tempdir().unwrap();
        let (f3, _) = generate(&other, d3.path()).unwrap();
        assert_ne!(
            fs::read(&f1.features).unwrap(),
            fs::read(&f3.features).unwrap()
        );
    }

    #[test]
    fn sigma_zero_patches_equal_prototypes_and_oracle_is_exact() {
        let config = SynthConfig {
            sigma: 0.0,
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (files, gt) = generate(&config, dir.path()).unwrap();
        let ds = load_generated(&files);
        for rec in ds.features.iter().take(20) {
            let words = &gt.patch_words[&rec.image_id];
            for (p, word) in words.iter().enumerate() {
                assert_eq!(rec.patch(p), gt.prototypes[word].as_slice());
            }
        }
        let records = unseen_test_records(&ds);
        let oracle = oracle_classify(&records, &gt);
        assert_eq!(oracle.accuracy, 1.0);
    }

    #[test]
    fn oracle_accuracy_is_high_at_default_sigma_and_falls_at_extreme_noise() {
        let config = SynthConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let (files, gt) = generate(&config, dir.path()).unwrap();
        let ds = load_generated(&files);
        let records = unseen_test_records(&ds);
        let oracle = oracle_classify(&records, &gt);
        assert!(
            oracle.accuracy >= 0.95,
            "oracle accuracy {} below the pinned reference",
            oracle.accuracy
        );

        let noisy = SynthConfig {
            sigma: 10.0,
            ..SynthConfig::default()
        };
        let dir2 = tempfile::tempdir().unwrap();
        let (files2, gt2) = generate(&noisy, dir2.path()).unwrap();
        let ds2 = load_generated(&files2);
        let records2 = unseen_test_records(&ds2);
        let oracle2 = oracle_classify(&records2, &gt2);
        assert!(
            oracle2.accuracy < 0.5,
            "oracle accuracy {} should collapse at sigma=10",
            oracle2.accuracy
        );
    }

    #[test]
    fn baseline_scores_below_oracle_at_default_sigma() {
        use crate::eval::{baseline_avg_wordvec, nearest_class_top1};
        let config = SynthConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let (files, gt) = generate(&config, dir.path()).unwrap();
        let ds = load_generated(&files);
        let wv = parse_wordvec_file(&files.wordvec).unwrap();

        let baseline = baseline_avg_wordvec(&ds.documents, &wv).unwrap();
        let images: Vec<(Vec<f64>, String)> = unseen_test_records(&ds)
            .iter()
            .map(|r| (r.cls_feature.clone(), r.class_id.clone()))
            .collect();
        let base_acc =
            nearest_class_top1(&baseline, &images, &ds.split.unseen_classes).unwrap();

        let oracle = oracle_classify(&unseen_test_records(&ds), &gt);
        assert!(
            base_acc < oracle.accuracy,
            "baseline {} should stay below the oracle {}",
            base_acc,
            oracle.accuracy
        );
    }

    #[test]
    fn ground_truth_round_trips_through_file() {
        let config = SynthConfig {
            n_seen: 3,
            n_unseen: 1,
            train_per_class: 2,
            heldout_per_class: 1,
            test_per_class: 1,
            n_patches: 2,
            input_dim: 4,
            visual_vocab: 8,
            noise_vocab: 12,
            words_per_doc: 6,
            disc_words_per_class: 2,
            sigma: 0.05,
            seed: 31,
        };
        let dir = tempfile::tempdir().unwrap();
        let (files, gt) = generate(&config, dir.path()).unwrap();
        let loaded = GroundTruth::load(&files.ground_truth).unwrap();
        assert_eq!(loaded.disc_words, gt.disc_words);
        assert_eq!(loaded.prototypes, gt.prototypes);
        assert_eq!(loaded.patch_words, gt.patch_words);
    }

    #[test]
    fn config_invariants_are_enforced() {
        let bad = SynthConfig {
            disc_words_per_class: 50,
            visual_vocab: 40,
            ..SynthConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));

        let bad = SynthConfig {
            n_patches: 0,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
