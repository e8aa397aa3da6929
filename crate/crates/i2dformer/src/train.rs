//! Training: Adam over the joint objective on seen classes, with per-epoch
//! held-out model selection, early stopping, and bit-exact checkpoints.
//!
//! Every seen document is re-encoded each step because the document
//! transformer is learnable; the loss denominators run over the full seen
//! set. Given (dataset, config, seed), every logged number is deterministic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{batches, Dataset};
use crate::error::{Error, Result};
use crate::eval::{heldout_metrics, proxy_unseen_classes};
use crate::model::{
    encode_document, encode_image, global_loss, local_loss, prepare_doc_attention,
    DocAttentionVars, EncodedDocumentVars, ModelConfig, ModelParams, PoolKind,
};
use crate::tensor::{Tape, Tensor};

/// Training hyperparameters. The architecture fields mirror [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the local attention loss; 0 trains the global path only.
    pub lambda_local: f64,
    /// Per-step probability of dropping each document word during training;
    /// destabilizes document-identity shortcuts so word-level alignment wins.
    pub word_dropout: f64,
    pub pool: PoolKind,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_words: usize,
    pub positional: bool,
    pub seed: u64,
    /// Early-stop patience in epochs without held-out H improvement.
    pub patience: usize,
    /// Fraction of seen classes treated as proxy-unseen on the held-out set.
    pub proxy_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda_local: 1.0,
            word_dropout: 0.5,
            pool: PoolKind::Mean,
            embed_dim: 64,
            blocks: 2,
            heads: 4,
            max_words: 512,
            positional: false,
            seed: 7,
            patience: 10,
            proxy_frac: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            embed_dim: self.embed_dim,
            heads: self.heads,
            blocks: self.blocks,
            max_words: self.max_words,
            positional: self.positional,
            pool: self.pool,
        }
    }
}

/// Deterministic parameter initialization from the config seed.
pub fn init_params(cfg: &TrainConfig, input_dim: usize) -> Result<ModelParams> {
    if cfg.embed_dim % cfg.heads != 0 {
        return Err(Error::Config(format!(
            "embed_dim {} is not divisible by heads {}",
            cfg.embed_dim, cfg.heads
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(ModelParams::init(cfg.model_config(input_dim), &mut rng))
}

/// Adam optimizer state: bias-corrected first/second moments per parameter,
/// aligned with the model's named parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let shapes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            step: 0,
            lr,
            beta1,
            beta2,
            epsilon,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update: m ← β1·m + (1−β1)·g, v ← β2·v + (1−β2)·g², bias-corrected,
    /// θ ← θ − lr·m̂/(√v̂+ε). Rejects NaN gradients naming the parameter.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let named = params.named_mut();
        assert_eq!(named.len(), grads.len(), "gradient list shape mismatch");
        for (((name, tensor), grad), (m, v)) in named
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(tensor.numel(), grad.len(), "gradient size mismatch for {}", name);
            if grad.iter().any(|g| g.is_nan()) {
                return Err(Error::Divergence(format!(
                    "NaN gradient for parameter '{}' at step {}",
                    name, t
                )));
            }
            for (i, (theta, &g)) in tensor.data_mut().iter_mut().zip(grad).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// One optimizer step's logged losses (means over the batch).
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss_cls: f64,
    pub loss_local: f64,
    pub loss_total: f64,
}

/// Per-epoch held-out proxy metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub heldout_u: f64,
    pub heldout_s: f64,
    pub heldout_h: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Line-delimited form: step records interleaved with their epoch record.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let mut step_iter = self.steps.iter().peekable();
        for epoch_log in &self.epochs {
            while let Some(s) = step_iter.peek() {
                if s.epoch != epoch_log.epoch {
                    break;
                }
                let s = step_iter.next().unwrap();
                let _ = writeln!(
                    out,
                    "step {} {} {} {} {}",
                    s.epoch, s.step, s.loss_cls, s.loss_local, s.loss_total
                );
            }
            let _ = writeln!(
                out,
                "epoch {} {} {} {}",
                epoch_log.epoch, epoch_log.heldout_u, epoch_log.heldout_s, epoch_log.heldout_h
            );
        }
        for s in step_iter {
            let _ = writeln!(
                out,
                "step {} {} {} {} {}",
                s.epoch, s.step, s.loss_cls, s.loss_local, s.loss_total
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }
}

/// Result of a training run. `params` is the best checkpoint by held-out H;
/// on divergence it is the last good one and `diverged` carries the reason.
pub struct FitOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_h: f64,
    pub log: TrainLog,
    pub diverged: Option<String>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15)
}

/// Train on the seen classes of `dataset`.
pub fn fit(dataset: &Dataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    if dataset.split.train_images.is_empty() {
        return Err(Error::Protocol("training set is empty".into()));
    }
    if dataset.split.heldout_images.is_empty() {
        return Err(Error::Protocol(
            "held-out set is empty; model selection needs held-out images".into(),
        ));
    }
    let mut params = init_params(cfg, dataset.input_dim)?;
    let mut adam = AdamState::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    let proxy = proxy_unseen_classes(dataset, cfg.proxy_frac);

    let seen_ids = dataset.seen_classes();
    let seen_docs: Vec<&Tensor> = seen_ids
        .iter()
        .map(|id| &dataset.documents[id].matrix)
        .collect();

    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stall = 0usize;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    for epoch in 0..cfg.epochs {
        for (step_idx, batch) in batches(dataset, cfg.batch_size, epoch_seed(cfg.seed, epoch))
            .into_iter()
            .enumerate()
        {
            let outcome = train_step(&params, cfg, dataset, &seen_docs, &batch, &mut dropout_rng)?;
            if !outcome.loss_total.is_finite() {
                return Ok(abort_diverged(
                    format!(
                        "loss became non-finite at epoch {} step {}",
                        epoch, step_idx
                    ),
                    best,
                    params,
                    log,
                ));
            }
            if let Err(Error::Divergence(msg)) = adam.apply(&mut params, &outcome.grads) {
                return Ok(abort_diverged(msg, best, params, log));
            }
            log.steps.push(StepLog {
                epoch,
                step: step_idx,
                loss_cls: outcome.loss_cls,
                loss_local: outcome.loss_local,
                loss_total: outcome.loss_total,
            });
        }

        let (u, s, h) = heldout_metrics(&params, dataset, &proxy, 0.0)?;
        log.epochs.push(EpochLog {
            epoch,
            heldout_u: u,
            heldout_s: s,
            heldout_h: h,
        });
        let improved = best.as_ref().map(|(bh, _, _)| h > *bh).unwrap_or(true);
        if improved {
            best = Some((h, epoch, params.clone()));
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }

    let (best_h, best_epoch, best_params) =
        best.unwrap_or((f64::NEG_INFINITY, 0, params.clone()));
    Ok(FitOutcome {
        params: best_params,
        best_epoch,
        best_h,
        log,
        diverged: None,
    })
}

fn abort_diverged(
    msg: String,
    best: Option<(f64, usize, ModelParams)>,
    fallback: ModelParams,
    log: TrainLog,
) -> FitOutcome {
    let (best_h, best_epoch, params) = best.unwrap_or((f64::NEG_INFINITY, 0, fallback));
    FitOutcome {
        params,
        best_epoch,
        best_h,
        log,
        diverged: Some(msg),
    }
}

pub struct StepOutcome {
    pub loss_cls: f64,
    pub loss_local: f64,
    pub loss_total: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Keep each row with probability 1 - p; a draw that would drop every row
/// falls back to the full matrix.
fn subsample_rows(m: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if p <= 0.0 {
        return m.clone();
    }
    let rows = m.rows();
    let cols = m.cols();
    let kept: Vec<usize> = (0..rows).filter(|_| rng.gen::<f64>() >= p).collect();
    if kept.is_empty() {
        return m.clone();
    }
    let mut data = Vec::with_capacity(kept.len() * cols);
    for &r in &kept {
        data.extend_from_slice(&m.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::matrix(kept.len(), cols, data)
}

/// Forward/backward over one batch: encode every seen document once, then
/// accumulate the per-image joint losses into a batch mean.
pub fn train_step(
    params: &ModelParams,
    cfg: &TrainConfig,
    dataset: &Dataset,
    seen_docs: &[&Tensor],
    batch: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let pv = params.leaves(&mut tape, true);

    let docs: Vec<EncodedDocumentVars> = seen_docs
        .iter()
        .map(|m| {
            let kept = subsample_rows(m, cfg.word_dropout, rng);
            let dv = tape.leaf(&kept, false);
            encode_document(&mut tape, &pv, dv)
        })
        .collect();
    let doc_attns: Vec<DocAttentionVars> = if cfg.lambda_local > 0.0 {
        docs.iter()
            .map(|d| prepare_doc_attention(&mut tape, &pv, d))
            .collect()
    } else {
        Vec::new()
    };

    let mut global_nodes = Vec::with_capacity(batch.len());
    let mut local_nodes = Vec::with_capacity(batch.len());
    for &(feature_idx, label) in batch {
        let rec = &dataset.features[feature_idx];
        let cls = tape.leaf(
            &Tensor::matrix(1, dataset.input_dim, rec.cls_feature.clone()),
            false,
        );
        let patches = tape.leaf(
            &Tensor::matrix(rec.n_patches, dataset.input_dim, rec.patch_features.clone()),
            false,
        );
        let img = encode_image(&mut tape, &pv, cls, patches);
        global_nodes.push(global_loss(&mut tape, &img, &docs, label));
        if cfg.lambda_local > 0.0 {
            local_nodes.push(local_loss(&mut tape, &pv, &img, &doc_attns, label));
        }
    }

    let b = batch.len() as f64;
    let sum_global = global_nodes[1..]
        .iter()
        .fold(global_nodes[0], |acc, &g| tape.add(acc, g));
    let loss_cls = tape.scalar_value(sum_global) / b;
    let (total_node, loss_local) = if cfg.lambda_local > 0.0 {
        let sum_local = local_nodes[1..]
            .iter()
            .fold(local_nodes[0], |acc, &l| tape.add(acc, l));
        let loss_local = tape.scalar_value(sum_local) / b;
        let scaled = tape.scale(sum_local, cfg.lambda_local);
        let joint = tape.add(sum_global, scaled);
        (tape.scale(joint, 1.0 / b), loss_local)
    } else {
        (tape.scale(sum_global, 1.0 / b), 0.0)
    };
    let loss_total = tape.scalar_value(total_node);

    let grads = if loss_total.is_finite() {
        tape.backward(total_node);
        pv.ordered().iter().map(|&v| tape.grad(v).to_vec()).collect()
    } else {
        Vec::new()
    };
    Ok(StepOutcome {
        loss_cls,
        loss_local,
        loss_total,
        grads,
    })
}

// ── checkpoints ─────────────────────────────────────────────────────────

fn config_line(c: &ModelConfig) -> String {
    format!(
        "config input_dim={} embed_dim={} heads={} blocks={} max_words={} positional={} pool={}",
        c.input_dim, c.embed_dim, c.heads, c.blocks, c.max_words, c.positional,
        c.pool.name()
    )
}

fn parse_config_line(line: &str, path: &Path) -> Result<ModelConfig> {
    let mut fields = BTreeMap::new();
    for kv in line.split(' ').skip(1) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::format(path, 2, format!("bad config field '{}'", kv)))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<String> {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| Error::format(path, 2, format!("missing config key '{}'", k)))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(path, 2, format!("bad value for '{}'", k)))
    };
    Ok(ModelConfig {
        input_dim: parse_usize("input_dim")?,
        embed_dim: parse_usize("embed_dim")?,
        heads: parse_usize("heads")?,
        blocks: parse_usize("blocks")?,
        max_words: parse_usize("max_words")?,
        positional: get("positional")? == "true",
        pool: PoolKind::parse(&get("pool")?)
            .ok_or_else(|| Error::format(path, 2, "bad pool kind"))?,
    })
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn write_tensor_line(out: &mut String, kind: &str, name: &str, t: &Tensor) {
    let _ = write!(out, "{} {} {}", kind, name, shape_str(t.shape()));
    for v in t.data() {
        let _ = write!(out, " {}", v);
    }
    out.push('\n');
}

/// Save parameters (and optionally optimizer state) as decimal text with a
/// trailing integrity checksum. Identical state produces identical bytes.
pub fn save_checkpoint(
    params: &ModelParams,
    adam: Option<&AdamState>,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    out.push_str("i2dformer-checkpoint v1\n");
    out.push_str(&config_line(&params.config));
    out.push('\n');
    for (name, tensor) in params.named() {
        write_tensor_line(&mut out, "param", &name, tensor);
    }
    if let Some(state) = adam {
        let _ = writeln!(
            out,
            "adam step={} lr={} beta1={} beta2={} epsilon={}",
            state.step, state.lr, state.beta1, state.beta2, state.epsilon
        );
        for ((name, tensor), (m, v)) in params.named().iter().zip(state.m.iter().zip(&state.v)) {
            let mt = Tensor::new(tensor.shape().to_vec(), m.clone());
            write_tensor_line(&mut out, "adam_m", name, &mt);
            let vt = Tensor::new(tensor.shape().to_vec(), v.clone());
            write_tensor_line(&mut out, "adam_v", name, &vt);
        }
    }
    let digest = Sha256::digest(out.as_bytes());
    let _ = write!(out, "checksum ");
    for b in digest {
        let _ = write!(out, "{:02x}", b);
    }
    out.push('\n');
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_tensor_line(
    rest: &str,
    path: &Path,
    lineno: usize,
) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let mut fields = rest.split(' ');
    let name = fields
        .next()
        .ok_or_else(|| Error::format(path, lineno, "missing parameter name"))?;
    let shape_field = fields
        .next()
        .ok_or_else(|| Error::format(path, lineno, "missing shape"))?;
    let shape: Vec<usize> = shape_field
        .split('x')
        .map(|d| {
            d.parse()
                .map_err(|_| Error::format(path, lineno, format!("bad shape '{}'", shape_field)))
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = fields
        .map(|f| {
            f.parse()
                .map_err(|_| Error::format(path, lineno, format!("non-numeric value '{}'", f)))
        })
        .collect::<Result<_>>()?;
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(Error::format(
            path,
            lineno,
            format!(
                "parameter '{}' has {} values, shape {} implies {}",
                name,
                data.len(),
                shape_field,
                expected
            ),
        ));
    }
    Ok((name.to_string(), shape, data))
}

/// Load a checkpoint, verifying the integrity checksum and that every tensor
/// matches the shape implied by the config echo.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<AdamState>)> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = content.lines().collect();
    if lines.len() < 3 || lines[0] != "i2dformer-checkpoint v1" {
        return Err(Error::format(path, 1, "not a checkpoint file"));
    }
    let last = lines[lines.len() - 1];
    let stored = last
        .strip_prefix("checksum ")
        .ok_or_else(|| Error::format(path, lines.len(), "missing checksum line"))?;
    let body_len = content
        .rfind("checksum ")
        .expect("checksum line located above");
    let digest = Sha256::digest(content[..body_len].as_bytes());
    let mut computed = String::new();
    for b in digest {
        let _ = write!(computed, "{:02x}", b);
    }
    if stored != computed {
        return Err(Error::format(
            path,
            lines.len(),
            "checksum mismatch: checkpoint is corrupted",
        ));
    }

    let config = parse_config_line(lines[1], path)?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let mut adam_header: Option<(u64, f64, f64, f64, f64)> = None;
    let mut adam_m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut adam_v: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (idx, line) in lines.iter().enumerate().skip(2) {
        let lineno = idx + 1;
        if line.starts_with("checksum ") {
            break;
        }
        if let Some(rest) = line.strip_prefix("param ") {
            let (name, shape, data) = parse_tensor_line(rest, path, lineno)?;
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("duplicate parameter '{}'", name),
                ));
            }
        } else if let Some(rest) = line.strip_prefix("adam_m ") {
            let (name, _, data) = parse_tensor_line(rest, path, lineno)?;
            adam_m.insert(name, data);
        } else if let Some(rest) = line.strip_prefix("adam_v ") {
            let (name, _, data) = parse_tensor_line(rest, path, lineno)?;
            adam_v.insert(name, data);
        } else if let Some(rest) = line.strip_prefix("adam ") {
            let mut step = 0u64;
            let (mut lr, mut b1, mut b2, mut eps) = (0.0, 0.0, 0.0, 0.0);
            for kv in rest.split(' ') {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::format(path, lineno, "bad adam field"))?;
                match k {
                    "step" => {
                        step = v.parse().map_err(|_| {
                            Error::format(path, lineno, "bad adam step")
                        })?
                    }
                    "lr" => lr = parse_f64(v, path, lineno)?,
                    "beta1" => b1 = parse_f64(v, path, lineno)?,
                    "beta2" => b2 = parse_f64(v, path, lineno)?,
                    "epsilon" => eps = parse_f64(v, path, lineno)?,
                    _ => return Err(Error::format(path, lineno, format!("unknown adam field '{}'", k))),
                }
            }
            adam_header = Some((step, lr, b1, b2, eps));
        } else {
            return Err(Error::format(
                path,
                lineno,
                format!("unknown record '{}'", line.split(' ').next().unwrap_or("")),
            ));
        }
    }

    // materialize the parameter structure from the config, then fill by name
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(config, &mut rng);
    let mut used = 0usize;
    for (name, tensor) in params.named_mut() {
        let (shape, data) = tensors.get(&name).ok_or_else(|| {
            Error::format(path, 0, format!("missing parameter '{}'", name))
        })?;
        if shape != tensor.shape() {
            return Err(Error::format(
                path,
                0,
                format!(
                    "parameter '{}' has shape {} but the config implies {}",
                    name,
                    shape_str(shape),
                    shape_str(tensor.shape())
                ),
            ));
        }
        tensor.data_mut().copy_from_slice(data);
        used += 1;
    }
    if used != tensors.len() {
        let known: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
        let extra: Vec<&String> = tensors
            .keys()
            .filter(|k| !known.contains(k))
            .collect();
        return Err(Error::format(
            path,
            0,
            format!("unknown parameters in checkpoint: {:?}", extra),
        ));
    }

    let adam = match adam_header {
        None => None,
        Some((step, lr, b1, b2, eps)) => {
            let mut state = AdamState::new(&params, lr, b1, b2, eps);
            state.step = step;
            for (i, (name, tensor)) in params.named().iter().enumerate() {
                let m = adam_m.get(name).ok_or_else(|| {
                    Error::format(path, 0, format!("missing adam_m for '{}'", name))
                })?;
                let v = adam_v.get(name).ok_or_else(|| {
                    Error::format(path, 0, format!("missing adam_v for '{}'", name))
                })?;
                if m.len() != tensor.numel() || v.len() != tensor.numel() {
                    return Err(Error::format(
                        path,
                        0,
                        format!("adam moment size mismatch for '{}'", name),
                    ));
                }
                state.m[i] = m.clone();
                state.v[i] = v.clone();
            }
            Some(state)
        }
    };

    Ok((params, adam))
}

fn parse_f64(v: &str, path: &Path, lineno: usize) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::format(path, lineno, format!("non-numeric value '{}'", v)))
}
