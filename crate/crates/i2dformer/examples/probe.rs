// Diagnostic probe: per-epoch true-unseen transfer vs held-out proxy metric.
use std::collections::BTreeSet;

use i2dformer::corpus::{batches, load_dataset};
use i2dformer::eval::{evaluate, heldout_metrics, proxy_unseen_classes};
use i2dformer::explain::{patch_to_word, top_attended_words};
use i2dformer::synth::{generate, SynthConfig};
use i2dformer::train::{init_params, AdamState, TrainConfig};
use i2dformer::wordvec::{parse_wordvec_file, OovPolicy};

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let dir = std::env::temp_dir().join("i2d_probe");
    let mut config = SynthConfig::default();
    config.words_per_doc = env_usize("PROBE_WORDS_PER_DOC", config.words_per_doc);
    let (files, gt) = generate(&config, &dir).unwrap();
    let wv = parse_wordvec_file(&files.wordvec).unwrap();
    let ds = load_dataset(
        &files.documents,
        &files.features,
        &files.split,
        &wv,
        512,
        OovPolicy::Drop,
    )
    .unwrap();

    let mut cfg = TrainConfig::default();
    cfg.lambda_local = env_f64("PROBE_LAMBDA", cfg.lambda_local);
    cfg.batch_size = env_usize("PROBE_BATCH", cfg.batch_size);
    cfg.epsilon = env_f64("PROBE_EPS", cfg.epsilon);
    cfg.lr = env_f64("PROBE_LR", cfg.lr);
    cfg.word_dropout = env_f64("PROBE_WORD_DROPOUT", cfg.word_dropout);
    cfg.lr = env_f64("PROBE_LR", cfg.lr);
    cfg.embed_dim = env_usize("PROBE_R", cfg.embed_dim);
    cfg.blocks = env_usize("PROBE_BLOCKS", cfg.blocks);
    cfg.heads = env_usize("PROBE_HEADS", cfg.heads);
    let epochs = env_usize("PROBE_EPOCHS", 30);
    eprintln!(
        "lambda {} lr {} r {} blocks {} heads {} epochs {} shared_qk {}",
        cfg.lambda_local,
        cfg.lr,
        cfg.embed_dim,
        cfg.blocks,
        cfg.heads,
        epochs,
        std::env::var("PROBE_SHARED_QK").is_ok()
    );

    {
        use i2dformer::eval::{baseline_avg_wordvec, nearest_class_top1};
        let baseline = baseline_avg_wordvec(&ds.documents, &wv).unwrap();
        let images: Vec<(Vec<f64>, String)> = ds
            .split
            .test_images
            .iter()
            .map(|id| ds.feature(id).unwrap())
            .filter(|r| ds.split.unseen_classes.contains(&r.class_id))
            .map(|r| (r.cls_feature.clone(), r.class_id.clone()))
            .collect();
        let acc = nearest_class_top1(&baseline, &images, &ds.split.unseen_classes).unwrap();
        eprintln!("avg-wordvec baseline unseen T1: {:.3}", acc);
    }

    let mut params = init_params(&cfg, ds.input_dim).unwrap();
    if std::env::var("PROBE_SHARED_QK").is_ok() {
        params.cross_w_k = params.cross_w_q.clone();
    }
    if std::env::var("PROBE_ALIGNED_INIT").is_ok() {
        use i2dformer::tensor::Tensor;
        // token MLP initialized to compute exactly the image projection:
        // gelu(x) - gelu(-x) == x recovers the linear map through the GELU
        let r0 = ds.input_dim;
        let r = cfg.embed_dim;
        let hidden = 2 * r;
        assert!(hidden >= 2 * r0);
        let a = params.image_projection.weight.data().to_vec();
        let mut w1 = vec![0.0; r0 * hidden];
        for i in 0..r0 {
            w1[i * hidden + i] = 1.0;
            w1[i * hidden + r0 + i] = -1.0;
        }
        let mut w2 = vec![0.0; hidden * r];
        for i in 0..r0 {
            for j in 0..r {
                w2[i * r + j] = a[i * r + j];
                w2[(r0 + i) * r + j] = -a[i * r + j];
            }
        }
        params.token_projection.w1 = Tensor::matrix(r0, hidden, w1);
        params.token_projection.b1 = Tensor::zeros(vec![hidden]);
        params.token_projection.w2 = Tensor::matrix(hidden, r, w2);
        params.token_projection.b2 = Tensor::zeros(vec![r]);
        params.cross_w_k = params.cross_w_q.clone();
        let scale = env_f64("PROBE_QK_SCALE", 1.0);
        if scale != 1.0 {
            for v in params.cross_w_q.data_mut() {
                *v *= scale;
            }
            params.cross_w_k = params.cross_w_q.clone();
        }
    }
    if std::env::var("PROBE_ZERO_RESIDUAL").is_ok() {
        use i2dformer::tensor::Tensor;
        // residual branches start at identity
        for block in &mut params.doc_blocks {
            for head in &mut block.heads {
                head.w_o = Tensor::zeros(vec![head.w_o.rows(), head.w_o.cols()]);
            }
            block.ff.w2 = Tensor::zeros(vec![block.ff.w2.rows(), block.ff.w2.cols()]);
        }
    }
    if std::env::var("PROBE_ZERO_HEAD").is_ok() {
        use i2dformer::tensor::Tensor;
        let r = cfg.embed_dim;
        params.local_head.weight = Tensor::zeros(vec![r, 1]);
    }
    let mut adam = AdamState::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    let proxy = proxy_unseen_classes(&ds, cfg.proxy_frac);
    let seen_ids = ds.seen_classes();
    let seen_docs: Vec<&i2dformer::tensor::Tensor> =
        seen_ids.iter().map(|id| &ds.documents[id].matrix).collect();

    {
        let mut match_count = 0usize;
        let mut total = 0usize;
        let unseen_recs: Vec<_> = ds
            .split
            .test_images
            .iter()
            .map(|id| ds.feature(id).unwrap())
            .filter(|r| ds.split.unseen_classes.contains(&r.class_id))
            .take(30)
            .collect();
        for rec in unseen_recs {
            let doc = &ds.documents[&rec.class_id];
            let words = &gt.patch_words[&rec.image_id];
            for p in 0..rec.n_patches {
                let ranked = patch_to_word(&params, rec, doc, p, 1).unwrap();
                if ranked[0].0 == words[p] {
                    match_count += 1;
                }
                total += 1;
            }
        }
        eprintln!("align at init: {:.3}", match_count as f64 / total.max(1) as f64);
    }
    let mut dropout_rng = {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed))
    };
    for epoch in 0..epochs {
        let mut last_loss = 0.0;
        for batch in batches(&ds, cfg.batch_size, cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15)) {
            let out = i2dformer::train::train_step(&params, &cfg, &ds, &seen_docs, &batch, &mut dropout_rng).unwrap();
            adam.apply(&mut params, &out.grads).unwrap();
            last_loss = out.loss_total;
        }
        let (_, _, h) = heldout_metrics(&params, &ds, &proxy, 0.0).unwrap();
        let report = evaluate(&params, &ds, 0.0).unwrap();
        let align = if epoch % 5 == 4 {
            let mut match_count = 0usize;
            let mut total = 0usize;
            let unseen_recs: Vec<_> = ds
                .split
                .test_images
                .iter()
                .map(|id| ds.feature(id).unwrap())
                .filter(|r| ds.split.unseen_classes.contains(&r.class_id))
                .take(30)
                .collect();
            for rec in unseen_recs {
                let doc = &ds.documents[&rec.class_id];
                let words = &gt.patch_words[&rec.image_id];
                for p in 0..rec.n_patches {
                    let ranked = patch_to_word(&params, rec, doc, p, 1).unwrap();
                    if ranked[0].0 == words[p] {
                        match_count += 1;
                    }
                    total += 1;
                }
            }
            format!("  align {:.3}", match_count as f64 / total.max(1) as f64)
        } else {
            String::new()
        };
        println!(
            "epoch {:2}  loss {:8.4}  heldout_h {:.3}  TRUE zsl_t1 {:.3}{}",
            epoch, last_loss, h, report.zsl_top1, align
        );
    }

    {
        use i2dformer::model::encode_all_documents;
        let encoded = encode_all_documents(&params, &ds.documents);
        for class in &ds.split.unseen_classes {
            let g = &encoded[class].g_cls;
            let norm: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            eprintln!("unseen {} g_cls norm {:.3}", class, norm);
        }
        let report = evaluate(&params, &ds, 0.0).unwrap();
        let mut histogram: std::collections::BTreeMap<String, usize> = Default::default();
        let unseen_ids = ds.unseen_classes();
        let cands = i2dformer::eval::Candidates::new(&encoded, &unseen_ids, &BTreeSet::new());
        for id in &ds.split.test_images {
            let rec = ds.feature(id).unwrap();
            if !ds.split.unseen_classes.contains(&rec.class_id) {
                continue;
            }
            let img = i2dformer::eval::project_image(&params, rec);
            *histogram
                .entry(cands.predict(&img.f_cls, 0.0).to_string())
                .or_default() += 1;
        }
        eprintln!("zsl prediction histogram: {:?}  (t1 {:.3})", histogram, report.zsl_top1);
        // cosine comparison
        let emb: std::collections::BTreeMap<String, Vec<f64>> = unseen_ids
            .iter()
            .map(|c| (c.clone(), encoded[c].g_cls.clone()))
            .collect();
        let images: Vec<(Vec<f64>, String)> = ds
            .split
            .test_images
            .iter()
            .map(|id| ds.feature(id).unwrap())
            .filter(|r| ds.split.unseen_classes.contains(&r.class_id))
            .map(|r| {
                let img = i2dformer::eval::project_image(&params, r);
                (img.f_cls, r.class_id.clone())
            })
            .collect();
        let cos_t1 =
            i2dformer::eval::nearest_class_top1(&emb, &images, &ds.split.unseen_classes).unwrap();
        eprintln!("cosine zsl t1: {:.3}", cos_t1);
    }

    // attention alignment on unseen patches
    let mut match_count = 0usize;
    let mut total = 0usize;
    for id in &ds.split.test_images {
        let rec = ds.feature(id).unwrap();
        if !ds.split.unseen_classes.contains(&rec.class_id) {
            continue;
        }
        let doc = &ds.documents[&rec.class_id];
        let words = &gt.patch_words[&rec.image_id];
        for p in 0..rec.n_patches {
            let ranked = patch_to_word(&params, rec, doc, p, 1).unwrap();
            if ranked[0].0 == words[p] {
                match_count += 1;
            }
            total += 1;
        }
    }
    println!(
        "patch_to_word top-1 match on unseen: {:.3}",
        match_count as f64 / total as f64
    );

    for class in &ds.split.unseen_classes {
        let doc = &ds.documents[class];
        let ranked = top_attended_words(&params, doc, 8);
        let planted: BTreeSet<&String> = gt.disc_words[class].iter().collect();
        let hit = ranked
            .iter()
            .filter(|(t, _)| planted.contains(t))
            .count();
        println!("class {} planted-in-top8: {}/5", class, hit);
    }
}
