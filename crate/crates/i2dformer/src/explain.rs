//! Read-only attribution exports over a frozen model: the most attended
//! document words behind each class embedding, per-patch top words from the
//! cross-modal attention rows, per-word patch heatmaps from its columns, and
//! a grayscale SVG rendering of patch grids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{ClassDocument, ImageFeatureRecord};
use crate::error::{Error, Result};
use crate::eval::project_image;
use crate::model::{attention_values, encode_document_values, ModelParams};

/// A ranked (token, weight) list.
pub type RankedTokens = Vec<(String, f64)>;

/// Top-k document words by head-averaged CLS attention in the final block.
/// The CLS self-weight is removed and each head's row renormalized over the
/// M words, so the full distribution sums to 1 before truncation.
pub fn top_attended_words(params: &ModelParams, doc: &ClassDocument, k: usize) -> RankedTokens {
    let enc = encode_document_values(params, &doc.class_id, &doc.tokens, &doc.matrix);
    let m = doc.tokens.len();
    let mut averaged = vec![0.0; m];
    let heads = enc.cls_attention.len() as f64;
    for row in &enc.cls_attention {
        // row has M+1 entries; the last is the CLS position itself
        let word_mass: f64 = row[..m].iter().sum();
        for (a, &w) in averaged.iter_mut().zip(&row[..m]) {
            *a += w / word_mass / heads;
        }
    }
    rank_tokens(&doc.tokens, &averaged, k)
}

/// Top-k words for one image patch: the patch's row of the cross-modal
/// attention map.
pub fn patch_to_word(
    params: &ModelParams,
    rec: &ImageFeatureRecord,
    doc: &ClassDocument,
    patch_index: usize,
    k: usize,
) -> Result<RankedTokens> {
    if patch_index >= rec.n_patches {
        return Err(Error::Protocol(format!(
            "patch index {} out of range for {} patches",
            patch_index, rec.n_patches
        )));
    }
    let enc_doc = encode_document_values(params, &doc.class_id, &doc.tokens, &doc.matrix);
    let img = project_image(params, rec);
    let out = attention_values(params, &img, &enc_doc);
    let m = doc.tokens.len();
    let row = &out.map.data()[patch_index * m..(patch_index + 1) * m];
    Ok(rank_tokens(&doc.tokens, row, k))
}

/// One word's attention over the image patches: the word's column of the
/// attention map, raw plus min-max normalized for display, with the grid
/// dimensions (√N×√N when N is a perfect square, else 1×N).
#[derive(Debug, Clone)]
pub struct WordHeatmap {
    pub token: String,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

pub fn word_to_image(
    params: &ModelParams,
    rec: &ImageFeatureRecord,
    doc: &ClassDocument,
    word_position: usize,
) -> Result<WordHeatmap> {
    let m = doc.tokens.len();
    if word_position >= m {
        return Err(Error::Protocol(format!(
            "word position {} out of range for {} words",
            word_position, m
        )));
    }
    let enc_doc = encode_document_values(params, &doc.class_id, &doc.tokens, &doc.matrix);
    let img = project_image(params, rec);
    let out = attention_values(params, &img, &enc_doc);
    let raw: Vec<f64> = (0..rec.n_patches)
        .map(|p| out.map.data()[p * m + word_position])
        .collect();
    let normalized = min_max_normalize(&raw);
    let (rows, cols) = grid_dims(rec.n_patches);
    Ok(WordHeatmap {
        token: doc.tokens[word_position].clone(),
        raw,
        normalized,
        rows,
        cols,
    })
}

/// Min-max to [0,1]; a constant column maps to all zeros.
fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / span).collect()
}

fn grid_dims(n: usize) -> (usize, usize) {
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n {
        (side, side)
    } else {
        (1, n)
    }
}

fn rank_tokens(tokens: &[String], weights: &[f64], k: usize) -> RankedTokens {
    let mut ranked: Vec<(String, f64)> = tokens
        .iter()
        .cloned()
        .zip(weights.iter().cloned())
        .collect();
    // descending by weight, ties by position (stable sort keeps input order)
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    ranked.truncate(k.min(tokens.len()));
    ranked
}

/// Serialize ranked tokens as `token weight` lines.
pub fn write_ranked_tokens(ranked: &RankedTokens, header: &str, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{}", header);
    for (token, weight) in ranked {
        let _ = writeln!(out, "{} {}", token, weight);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Render a patch-weight grid as a deterministic grayscale SVG: one shaded
/// square per patch plus a legend with the raw min/max.
pub fn render_heatmap_svg(
    grid: &[f64],
    rows: usize,
    cols: usize,
    raw_min: f64,
    raw_max: f64,
    path: &Path,
) -> Result<()> {
    assert_eq!(grid.len(), rows * cols, "grid is not rectangular");
    const CELL: usize = 24;
    const LEGEND: usize = 28;
    let width = cols * CELL;
    let height = rows * CELL + LEGEND;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">",
        width, height, width, height
    );
    for r in 0..rows {
        for c in 0..cols {
            let w = grid[r * cols + c].clamp(0.0, 1.0);
            let shade = (w * 255.0).round() as u8;
            let _ = writeln!(
                out,
                "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"rgb({},{},{})\"/>",
                c * CELL,
                r * CELL,
                CELL,
                CELL,
                shade,
                shade,
                shade
            );
        }
    }
    let _ = writeln!(
        out,
        "  <text x=\"2\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" fill=\"black\">min {} max {}</text>",
        rows * CELL + 18,
        raw_min,
        raw_max
    );
    out.push_str("</svg>\n");
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl WordHeatmap {
    pub fn write_svg(&self, path: &Path) -> Result<()> {
        let raw_min = self.raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let raw_max = self.raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        render_heatmap_svg(&self.normalized, self.rows, self.cols, raw_min, raw_max, path)
    }

    /// Record form: the raw and normalized columns with grid dimensions.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "word {}", self.token);
        let _ = writeln!(out, "grid {} {}", self.rows, self.cols);
        out.push_str("raw");
        for v in &self.raw {
            let _ = write!(out, " {}", v);
        }
        out.push('\n');
        out.push_str("normalized");
        for v in &self.normalized {
            let _ = write!(out, " {}", v);
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PoolKind};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> ModelParams {
        let config = ModelConfig {
            input_dim: 6,
            embed_dim: 8,
            heads: 2,
            blocks: 2,
            max_words: 32,
            positional: false,
            pool: PoolKind::Mean,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        ModelParams::init(config, &mut rng)
    }

    fn doc(words: usize) -> ClassDocument {
        let mut rng = ChaCha8Rng::seed_from_u64(words as u64);
        let tokens: Vec<String> = (0..words).map(|i| format!("w{}", i)).collect();
        let data = (0..words * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ClassDocument {
            class_id: "c".into(),
            tokens,
            matrix: Tensor::matrix(words, 6, data),
            dropped_oov: 0,
        }
    }

    fn image(patches: usize) -> ImageFeatureRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(patches as u64 + 100);
        ImageFeatureRecord {
            image_id: "i".into(),
            class_id: "c".into(),
            cls_feature: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            patch_features: (0..patches * 6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            n_patches: patches,
        }
    }

    #[test]
    fn single_word_document_gets_full_weight() {
        let p = params();
        let d = doc(1);
        let ranked = top_attended_words(&p, &d, 8);
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].0, "w0");
        assert!((ranked[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn top_words_distribution_sums_to_one_and_truncates() {
        let p = params();
        let d = doc(12);
        let full = top_attended_words(&p, &d, 12);
        let total: f64 = full.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(full.windows(2).all(|w| w[0].1 >= w[1].1), "not sorted");

        let k8 = top_attended_words(&p, &d, 8);
        assert_eq!(k8.len(), 8);
        // k beyond M truncates to M
        let k99 = top_attended_words(&p, &d, 99);
        assert_eq!(k99.len(), 12);
    }

    #[test]
    fn patch_row_sums_to_one_and_single_word_is_certain() {
        let p = params();
        let d = doc(7);
        let img = image(4);
        let full_row = patch_to_word(&p, &img, &d, 2, 7).unwrap();
        let total: f64 = full_row.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-6);

        let single = doc(1);
        let row = patch_to_word(&p, &img, &single, 0, 3).unwrap();
        assert_eq!(row.len(), 1);
        assert!((row[0].1 - 1.0).abs() < 1e-9);

        assert!(patch_to_word(&p, &img, &d, 4, 3).is_err());
    }

    #[test]
    fn word_column_is_softmax_entries_and_normalizes() {
        let p = params();
        let d = doc(5);
        let img = image(9);
        let hm = word_to_image(&p, &img, &d, 3).unwrap();
        assert_eq!((hm.rows, hm.cols), (3, 3));
        assert!(hm.raw.iter().all(|&v| v > 0.0 && v < 1.0));
        let max = hm.normalized.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = hm.normalized.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((max - 1.0).abs() < 1e-12 && min == 0.0);

        assert!(word_to_image(&p, &img, &d, 5).is_err());
    }

    #[test]
    fn degenerate_single_patch_normalizes_to_zero() {
        let p = params();
        let d = doc(4);
        let img = image(1);
        let hm = word_to_image(&p, &img, &d, 0).unwrap();
        assert_eq!((hm.rows, hm.cols), (1, 1));
        // a constant column maps to zeros by convention
        assert_eq!(hm.normalized, vec![0.0]);
    }

    #[test]
    fn svg_renders_grid_with_legend_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let grid: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let p1 = dir.path().join("a.svg");
        let p2 = dir.path().join("b.svg");
        render_heatmap_svg(&grid, 4, 4, 0.0, 1.0, &p1).unwrap();
        render_heatmap_svg(&grid, 4, 4, 0.0, 1.0, &p2).unwrap();
        let a = fs::read_to_string(&p1).unwrap();
        assert_eq!(a.matches("<rect").count(), 16);
        assert!(a.contains("min 0 max 1"));
        assert_eq!(a, fs::read_to_string(&p2).unwrap());
    }

    #[test]
    fn svg_renders_large_grid_quickly() {
        let dir = tempfile::tempdir().unwrap();
        let grid: Vec<f64> = (0..1024).map(|i| (i % 7) as f64 / 6.0).collect();
        let start = std::time::Instant::now();
        render_heatmap_svg(&grid, 32, 32, 0.0, 1.0, &dir.path().join("big.svg")).unwrap();
        assert!(start.elapsed().as_millis() < 100);
    }

    #[test]
    fn explain_operations_leave_parameters_unchanged() {
        let p = params();
        let before = p.checksum();
        let d = doc(6);
        let img = image(4);
        let _ = top_attended_words(&p, &d, 8);
        let _ = patch_to_word(&p, &img, &d, 0, 3).unwrap();
        let _ = word_to_image(&p, &img, &d, 2).unwrap();
        assert_eq!(p.checksum(), before);
    }
}
