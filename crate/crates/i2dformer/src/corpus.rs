//! Dataset loading: class documents, precomputed image features, and the
//! seen/unseen split. Everything is validated eagerly so a bad file fails
//! before any training starts, and loaded state is independent of file
//! ordering (records are sorted by id internally).
//!
//! File formats (all line-delimited decimal text, tab-separated fields):
//!
//! * documents:  `class_id <TAB> free text`
//! * features:   `image_id <TAB> class_id <TAB> cls floats <TAB> patch0 floats <TAB> patch1 ...`
//!   (floats space-separated inside a field)
//! * split:      `seen|unseen <class_id>` and `train|heldout|test <image_id>`

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wordvec::{embed_tokens, tokenize, OovPolicy, WordVectors};

/// A class document after tokenization and embedding. `tokens` are the
/// retained tokens, so they index the rows of `matrix`.
#[derive(Debug, Clone)]
pub struct ClassDocument {
    pub class_id: String,
    pub tokens: Vec<String>,
    pub matrix: Tensor,
    pub dropped_oov: usize,
}

/// Precomputed frozen image features: one global vector plus N patch vectors.
#[derive(Debug, Clone)]
pub struct ImageFeatureRecord {
    pub image_id: String,
    pub class_id: String,
    pub cls_feature: Vec<f64>,
    /// Row-major N×dim.
    pub patch_features: Vec<f64>,
    pub n_patches: usize,
}

impl ImageFeatureRecord {
    pub fn patch(&self, i: usize) -> &[f64] {
        let dim = self.cls_feature.len();
        &self.patch_features[i * dim..(i + 1) * dim]
    }
}

/// Seen/unseen class sets and the image partition.
#[derive(Debug, Clone, Default)]
pub struct SplitSpec {
    pub seen_classes: BTreeSet<String>,
    pub unseen_classes: BTreeSet<String>,
    pub train_images: Vec<String>,
    pub heldout_images: Vec<String>,
    pub test_images: Vec<String>,
}

/// Immutable bundle of documents, features, and split.
pub struct Dataset {
    pub documents: BTreeMap<String, ClassDocument>,
    pub features: Vec<ImageFeatureRecord>,
    feature_index: HashMap<String, usize>,
    pub split: SplitSpec,
    /// Feature dimensionality shared by cls and patch vectors.
    pub input_dim: usize,
    /// Patch count shared by every record.
    pub n_patches: usize,
}

impl Dataset {
    pub fn feature(&self, image_id: &str) -> Option<&ImageFeatureRecord> {
        self.feature_index.get(image_id).map(|&i| &self.features[i])
    }

    /// Seen classes in sorted order; training label i is seen_classes()[i].
    pub fn seen_classes(&self) -> Vec<String> {
        self.split.seen_classes.iter().cloned().collect()
    }

    pub fn unseen_classes(&self) -> Vec<String> {
        self.split.unseen_classes.iter().cloned().collect()
    }

    /// All classes in sorted order, the GZSL candidate ordering.
    pub fn all_classes(&self) -> Vec<String> {
        self.split
            .seen_classes
            .iter()
            .chain(self.split.unseen_classes.iter())
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Load and embed one document per class. Duplicate class ids and documents
/// that tokenize to nothing are rejected.
pub fn load_documents(
    path: &Path,
    wv: &WordVectors,
    max_words: usize,
    oov_policy: OovPolicy,
) -> Result<BTreeMap<String, ClassDocument>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut documents = BTreeMap::new();
    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let (class_id, text) = line.split_once('\t').ok_or_else(|| {
            Error::format(path, lineno, "expected 'class_id<TAB>text'")
        })?;
        if documents.contains_key(class_id) {
            return Err(Error::format(
                path,
                lineno,
                format!("duplicate class '{}'", class_id),
            ));
        }
        let tokens = tokenize(text, max_words);
        if tokens.is_empty() {
            return Err(Error::format(
                path,
                lineno,
                format!("document for class '{}' is empty after tokenization", class_id),
            ));
        }
        let embedded = embed_tokens(class_id, &tokens, wv, oov_policy)?;
        documents.insert(
            class_id.to_string(),
            ClassDocument {
                class_id: class_id.to_string(),
                tokens: embedded.retained,
                matrix: embedded.matrix,
                dropped_oov: embedded.dropped,
            },
        );
    }
    if documents.is_empty() {
        return Err(Error::format(path, 0, "no documents"));
    }
    Ok(documents)
}

/// Load image feature records; returns the records sorted by image id plus
/// the shared (n_patches, dim) header.
pub fn load_features(path: &Path) -> Result<(Vec<ImageFeatureRecord>, usize, usize)> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<ImageFeatureRecord> = Vec::new();
    let mut header: Option<(usize, usize)> = None;
    let mut seen_ids = HashSet::new();
    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(Error::format(
                path,
                lineno,
                "expected image_id, class_id, cls floats, and at least one patch",
            ));
        }
        let image_id = fields[0].to_string();
        if !seen_ids.insert(image_id.clone()) {
            return Err(Error::format(
                path,
                lineno,
                format!("duplicate image id '{}'", image_id),
            ));
        }
        let class_id = fields[1].to_string();
        let cls_feature = parse_floats(fields[2], path, lineno)?;
        let dim = cls_feature.len();
        let n_patches = fields.len() - 3;
        let mut patch_features = Vec::with_capacity(n_patches * dim);
        for patch_field in &fields[3..] {
            let row = parse_floats(patch_field, path, lineno)?;
            if row.len() != dim {
                return Err(Error::format(
                    path,
                    lineno,
                    format!(
                        "ragged patch matrix for image '{}': patch width {} vs dim {}",
                        image_id,
                        row.len(),
                        dim
                    ),
                ));
            }
            patch_features.extend_from_slice(&row);
        }
        match header {
            None => header = Some((n_patches, dim)),
            Some((n, d)) => {
                if n_patches != n || dim != d {
                    return Err(Error::format(
                        path,
                        lineno,
                        format!(
                            "image '{}' has shape ({} patches, dim {}), expected ({}, {})",
                            image_id, n_patches, dim, n, d
                        ),
                    ));
                }
            }
        }
        if !cls_feature.iter().chain(&patch_features).all(|v| v.is_finite()) {
            return Err(Error::format(
                path,
                lineno,
                format!("non-finite component in image '{}'", image_id),
            ));
        }
        records.push(ImageFeatureRecord {
            image_id,
            class_id,
            cls_feature,
            patch_features,
            n_patches,
        });
    }
    let (n, d) = header.ok_or_else(|| Error::format(path, 0, "no feature records"))?;
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok((records, n, d))
}

fn parse_floats(field: &str, path: &Path, lineno: usize) -> Result<Vec<f64>> {
    field
        .split(' ')
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| Error::format(path, lineno, format!("non-numeric field '{}'", f)))
        })
        .collect()
}

/// Load and validate the split against the loaded documents and features.
pub fn load_split(
    path: &Path,
    documents: &BTreeMap<String, ClassDocument>,
    features: &[ImageFeatureRecord],
) -> Result<SplitSpec> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut split = SplitSpec::default();
    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let (kind, id) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::format(path, lineno, "expected '<kind> <id>'"))?;
        let id = id.trim().to_string();
        match kind {
            "seen" => {
                split.seen_classes.insert(id);
            }
            "unseen" => {
                split.unseen_classes.insert(id);
            }
            "train" => split.train_images.push(id),
            "heldout" => split.heldout_images.push(id),
            "test" => split.test_images.push(id),
            other => {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("unknown record kind '{}'", other),
                ));
            }
        }
    }
    split.train_images.sort();
    split.heldout_images.sort();
    split.test_images.sort();
    validate_split(&split, documents, features)?;
    Ok(split)
}

fn validate_split(
    split: &SplitSpec,
    documents: &BTreeMap<String, ClassDocument>,
    features: &[ImageFeatureRecord],
) -> Result<()> {
    if let Some(c) = split.seen_classes.intersection(&split.unseen_classes).next() {
        return Err(Error::Protocol(format!(
            "class '{}' is listed as both seen and unseen",
            c
        )));
    }
    for c in split.seen_classes.iter().chain(&split.unseen_classes) {
        if !documents.contains_key(c) {
            return Err(Error::Protocol(format!("class '{}' has no document", c)));
        }
    }
    let by_id: HashMap<&str, &ImageFeatureRecord> = features
        .iter()
        .map(|r| (r.image_id.as_str(), r))
        .collect();
    let mut assigned: HashSet<&str> = HashSet::new();
    for (group, ids, seen_only) in [
        ("train", &split.train_images, true),
        ("heldout", &split.heldout_images, true),
        ("test", &split.test_images, false),
    ] {
        for id in ids {
            let rec = by_id.get(id.as_str()).ok_or_else(|| {
                Error::Protocol(format!("{} image '{}' has no feature record", group, id))
            })?;
            if !assigned.insert(id.as_str()) {
                return Err(Error::Protocol(format!(
                    "image '{}' appears in more than one partition",
                    id
                )));
            }
            let in_seen = split.seen_classes.contains(&rec.class_id);
            let in_unseen = split.unseen_classes.contains(&rec.class_id);
            if !in_seen && !in_unseen {
                return Err(Error::Protocol(format!(
                    "{} image '{}' belongs to class '{}' outside the split",
                    group, id, rec.class_id
                )));
            }
            if seen_only && !in_seen {
                return Err(Error::Protocol(format!(
                    "{} image '{}' belongs to unseen class '{}'",
                    group, id, rec.class_id
                )));
            }
        }
    }
    // every feature class must resolve to a document
    for rec in features {
        if !documents.contains_key(&rec.class_id) {
            return Err(Error::Protocol(format!(
                "image '{}' references class '{}' with no document",
                rec.image_id, rec.class_id
            )));
        }
    }
    Ok(())
}

/// Load all three files into a validated dataset.
pub fn load_dataset(
    documents_path: &Path,
    features_path: &Path,
    split_path: &Path,
    wv: &WordVectors,
    max_words: usize,
    oov_policy: OovPolicy,
) -> Result<Dataset> {
    let documents = load_documents(documents_path, wv, max_words, oov_policy)?;
    let (features, n_patches, input_dim) = load_features(features_path)?;
    if input_dim != wv.dim() {
        return Err(Error::Protocol(format!(
            "feature dim {} does not match word-vector dim {}",
            input_dim,
            wv.dim()
        )));
    }
    let split = load_split(split_path, &documents, &features)?;
    let feature_index = features
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.clone(), i))
        .collect();
    Ok(Dataset {
        documents,
        features,
        feature_index,
        split,
        input_dim,
        n_patches,
    })
}

/// One epoch of train batches: a seeded permutation of the training images,
/// chunked by `batch_size`, with the last partial batch kept. Each element is
/// (feature index, label index into the sorted seen-class list).
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Vec<Vec<(usize, usize)>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let seen = dataset.seen_classes();
    let label_of: HashMap<&str, usize> = seen
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut order: Vec<(usize, usize)> = dataset
        .split
        .train_images
        .iter()
        .map(|id| {
            let fi = dataset.feature_index[id];
            let label = label_of[dataset.features[fi].class_id.as_str()];
            (fi, label)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn toy_wv() -> WordVectors {
        WordVectors::from_entries(vec![
            ("cat".into(), vec![1.0, 0.0]),
            ("dog".into(), vec![0.0, 1.0]),
            ("pet".into(), vec![0.5, 0.5]),
        ])
        .unwrap()
    }

    #[test]
    fn load_documents_two_classes() {
        let f = write_temp("c1\tA cat. A pet!\nc2\tdog dog pet\n");
        let docs = load_documents(f.path(), &toy_wv(), 512, OovPolicy::Drop).unwrap();
        assert_eq!(docs.len(), 2);
        // "a" is out of vocabulary and dropped
        assert_eq!(docs["c1"].tokens, vec!["cat", "pet"]);
        assert_eq!(docs["c1"].dropped_oov, 2);
        assert_eq!(docs["c2"].matrix.rows(), 3);
    }

    #[test]
    fn load_documents_rejects_duplicates() {
        let f = write_temp("c1\tcat\nc1\tdog\n");
        let err = load_documents(f.path(), &toy_wv(), 512, OovPolicy::Drop).unwrap_err();
        assert!(err.to_string().contains("c1"));
    }

    #[test]
    fn load_documents_rejects_empty_text() {
        let f = write_temp("c1\t...\n");
        assert!(load_documents(f.path(), &toy_wv(), 512, OovPolicy::Drop).is_err());
    }

    fn feature_line(image: &str, class: &str, dim: usize, patches: usize, base: f64) -> String {
        let cls: Vec<String> = (0..dim).map(|j| format!("{}", base + j as f64)).collect();
        let mut line = format!("{}\t{}\t{}", image, class, cls.join(" "));
        for p in 0..patches {
            let row: Vec<String> = (0..dim)
                .map(|j| format!("{}", base + (p * dim + j) as f64 * 0.1))
                .collect();
            line.push('\t');
            line.push_str(&row.join(" "));
        }
        line
    }

    #[test]
    fn load_features_header_and_mismatch() {
        let f = write_temp(&format!("{}\n", feature_line("i1", "c1", 8, 4, 0.5)));
        let (records, n, d) = load_features(f.path()).unwrap();
        assert_eq!((records.len(), n, d), (1, 4, 8));

        let two = format!(
            "{}\n{}\n",
            feature_line("i1", "c1", 8, 4, 0.5),
            feature_line("i2", "c1", 8, 5, 0.5)
        );
        let f = write_temp(&two);
        assert!(load_features(f.path()).is_err());
    }

    #[test]
    fn load_features_rejects_ragged_patches() {
        let line = "i1\tc1\t1.0 2.0\t1.0 2.0\t1.0\n";
        let f = write_temp(line);
        let err = load_features(f.path()).unwrap_err();
        assert!(err.to_string().contains("i1"));
    }

    fn split_file(
        seen: &[&str],
        unseen: &[&str],
        train: &[&str],
        heldout: &[&str],
        test: &[&str],
    ) -> String {
        let mut s = String::new();
        for c in seen {
            s.push_str(&format!("seen {}\n", c));
        }
        for c in unseen {
            s.push_str(&format!("unseen {}\n", c));
        }
        for i in train {
            s.push_str(&format!("train {}\n", i));
        }
        for i in heldout {
            s.push_str(&format!("heldout {}\n", i));
        }
        for i in test {
            s.push_str(&format!("test {}\n", i));
        }
        s
    }

    fn toy_docs() -> BTreeMap<String, ClassDocument> {
        ["c1", "c2", "c3"]
            .iter()
            .map(|c| {
                (
                    c.to_string(),
                    ClassDocument {
                        class_id: c.to_string(),
                        tokens: vec!["cat".into()],
                        matrix: Tensor::matrix(1, 2, vec![1.0, 0.0]),
                        dropped_oov: 0,
                    },
                )
            })
            .collect()
    }

    fn toy_features() -> Vec<ImageFeatureRecord> {
        [("i1", "c1"), ("i2", "c2"), ("i3", "c3")]
            .iter()
            .map(|(i, c)| ImageFeatureRecord {
                image_id: i.to_string(),
                class_id: c.to_string(),
                cls_feature: vec![0.0, 1.0],
                patch_features: vec![0.0, 1.0],
                n_patches: 1,
            })
            .collect()
    }

    #[test]
    fn load_split_valid_and_invalid() {
        let docs = toy_docs();
        let feats = toy_features();

        let f = write_temp(&split_file(
            &["c1", "c2"],
            &["c3"],
            &["i1"],
            &["i2"],
            &["i3"],
        ));
        let split = load_split(f.path(), &docs, &feats).unwrap();
        assert_eq!(split.seen_classes.len(), 2);
        assert_eq!(split.unseen_classes.len(), 1);

        // class in both sets
        let f = write_temp(&split_file(&["c1"], &["c1"], &[], &[], &[]));
        assert!(load_split(f.path(), &docs, &feats).is_err());

        // unseen-class image in train
        let f = write_temp(&split_file(&["c1", "c2"], &["c3"], &["i3"], &[], &[]));
        let err = load_split(f.path(), &docs, &feats).unwrap_err();
        assert!(err.to_string().contains("i3"));

        // unknown image id
        let f = write_temp(&split_file(&["c1", "c2"], &["c3"], &["nope"], &[], &[]));
        assert!(load_split(f.path(), &docs, &feats).is_err());
    }

    fn toy_dataset() -> Dataset {
        let docs = toy_docs();
        let mut feats: Vec<ImageFeatureRecord> = Vec::new();
        for k in 0..10 {
            feats.push(ImageFeatureRecord {
                image_id: format!("img{:02}", k),
                class_id: if k % 2 == 0 { "c1" } else { "c2" }.to_string(),
                cls_feature: vec![0.0, 1.0],
                patch_features: vec![0.0, 1.0],
                n_patches: 1,
            });
        }
        let split = SplitSpec {
            seen_classes: ["c1", "c2"].iter().map(|s| s.to_string()).collect(),
            unseen_classes: ["c3"].iter().map(|s| s.to_string()).collect(),
            train_images: (0..10).map(|k| format!("img{:02}", k)).collect(),
            heldout_images: vec![],
            test_images: vec![],
        };
        let feature_index = feats
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id.clone(), i))
            .collect();
        Dataset {
            documents: docs,
            features: feats,
            feature_index,
            split,
            input_dim: 2,
            n_patches: 1,
        }
    }

    #[test]
    fn batches_shapes_and_determinism() {
        let ds = toy_dataset();
        let b = batches(&ds, 3, 42);
        let sizes: Vec<usize> = b.iter().map(|x| x.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);

        let b2 = batches(&ds, 3, 42);
        assert_eq!(b, b2);

        let b3 = batches(&ds, 3, 43);
        assert_ne!(b, b3, "different seeds should give different orders");
    }

    #[test]
    fn batches_labels_index_sorted_seen_classes() {
        let ds = toy_dataset();
        for batch in batches(&ds, 4, 0) {
            for (fi, label) in batch {
                let expected = if ds.features[fi].class_id == "c1" { 0 } else { 1 };
                assert_eq!(label, expected);
            }
        }
    }
}
