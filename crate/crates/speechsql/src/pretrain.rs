//! Pre-training objectives that close the speech/text modality gap before
//! fine-tuning.
//!
//! Speech-sentence pre-training pairs a speech autoencoder (the CNN encoder
//! mirrored by transposed convolutions) with a text autoencoder (the shared
//! token BiLSTM encoder and an LSTM token decoder); reconstruction losses are
//! KL divergences over frame-wise / token-wise distributions, and an
//! in-batch contrastive term pulls each pair's pooled embeddings together
//! while pushing non-pairs apart (the denominator sums over non-matching
//! pairs only). Speech-item pre-training predicts whether a schema column is
//! referenced by the spoken question from a pooled per-frame cosine vector.

use crate::dataset::Instance;
use crate::features::SpeechFeatures;
use crate::model::ModelConfig;
use crate::nn::token_ids;
use crate::params::{clip_global_norm, Adam, ParamStore, Session};
use crate::schema::Schema;
use crate::schema_encoder::{embed_token_seq, SchemaEncoderConfig};
use crate::semql::{Cond, QueryExpr, SelectCore};
use crate::speech_encoder::{encode_speech, update_running_stats, SpeechEncoderConfig};
use crate::tensor::{BatchStats, ConvGeom, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Width of the pooled cosine vector used by the item classifier.
pub const COSVEC_WIDTH: usize = 32;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("contrastive batch needs at least two pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("instance {0} has no transcript")]
    MissingTranscripts(String),
    #[error("no examples supplied")]
    EmptyExamples,
    #[error(transparent)]
    SchemaEncode(#[from] crate::schema_encoder::SchemaEncodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Param(#[from] crate::params::ParamError),
}

/// One speech/transcript pair of a contrastive minibatch.
#[derive(Debug, Clone)]
pub struct Pair {
    pub features: SpeechFeatures,
    pub tokens: Vec<String>,
}

pub fn init_sae_params(store: &mut ParamStore, cfg: &SpeechEncoderConfig, rng: &mut ChaCha8Rng) {
    // decoder block i mirrors encoder block n_blocks + 1 - i
    for i in 1..=cfg.n_blocks {
        let cout = if i == cfg.n_blocks { 1 } else { cfg.channels };
        store.init_conv(
            &format!("sae.d{i}.w"),
            [cfg.channels, cout, cfg.kernel.0, cfg.kernel.1],
            rng,
        );
        store.init_zeros(&format!("sae.d{i}.b"), 1, cout);
        if i < cfg.n_blocks {
            store.init_const(&format!("sae.d{i}.gamma"), 1, cout, 1.0);
            store.init_zeros(&format!("sae.d{i}.beta"), 1, cout);
            store.init_stat(&format!("sae.d{i}.run_mean"), cout, 0.0);
            store.init_stat(&format!("sae.d{i}.run_var"), cout, 1.0);
        }
    }
}

pub fn init_tae_params(store: &mut ParamStore, cfg: &SchemaEncoderConfig, rng: &mut ChaCha8Rng) {
    crate::nn::init_lstm(store, "tae.dec", cfg.d_token, cfg.d_model, rng);
    store.init_xavier("tae.out.w", cfg.d_model, cfg.vocab_buckets, rng);
    store.init_zeros("tae.out.b", 1, cfg.vocab_buckets);
}

pub fn init_sipt_params(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    store.init_xavier("sipt.wf", COSVEC_WIDTH, 1, rng);
    store.init_zeros("sipt.bf", 1, 1);
}

/// Full pre-training parameter set: the fine-tuning model's parameters plus
/// the autoencoder decoders and the item classifier head.
pub fn init_pretrain_params(cfg: &ModelConfig, grammar: &crate::semql::Grammar, seed: u64) -> ParamStore {
    let mut store = crate::model::init_params(cfg, grammar, seed);
    let mut rng = crate::params::seeded_rng(seed ^ 0x5eed);
    init_sae_params(&mut store, &cfg.speech, &mut rng);
    init_tae_params(&mut store, &cfg.schema_encoder(), &mut rng);
    init_sipt_params(&mut store, &mut rng);
    store
}

/// Transposed-convolution mirror of the speech encoder, reconstructing the
/// `(l, 96)` feature plane from the final trunk features.
fn sae_decode(
    sess: &mut Session,
    cfg: &SpeechEncoderConfig,
    trunk: Var,
    block_inputs: &[(usize, usize)],
    training: bool,
) -> (Var, Vec<(String, BatchStats)>) {
    let mut cur = trunk;
    let mut stats = Vec::new();
    for i in 1..=cfg.n_blocks {
        let enc_block = cfg.n_blocks + 1 - i;
        let (t_out, m_out) = block_inputs[enc_block - 1];
        let geom = ConvGeom {
            k: cfg.kernel,
            stride: (
                if cfg.time_stride_blocks.contains(&enc_block) { 2 } else { 1 },
                if cfg.mel_stride_blocks.contains(&enc_block) { 2 } else { 1 },
            ),
            pad: (cfg.kernel.0 / 2, cfg.kernel.1 / 2),
        };
        let w = sess.param(&format!("sae.d{i}.w"));
        let b = sess.param(&format!("sae.d{i}.b"));
        cur = sess.tape.conv2d_transpose(cur, w, b, geom, t_out, m_out);
        if i < cfg.n_blocks {
            let gamma = sess.param(&format!("sae.d{i}.gamma"));
            let beta = sess.param(&format!("sae.d{i}.beta"));
            let mode = if training {
                crate::tensor::BnMode::Training
            } else {
                let mean = crate::tensor::mat(sess.store().get(&format!("sae.d{i}.run_mean")))
                    .row(0)
                    .to_vec();
                let var = crate::tensor::mat(sess.store().get(&format!("sae.d{i}.run_var")))
                    .row(0)
                    .to_vec();
                crate::tensor::BnMode::Inference { mean, var }
            };
            let (bn, s) = sess.tape.batch_norm(cur, gamma, beta, 1e-5, mode);
            if let Some(s) = s {
                stats.push((format!("sae.d{i}"), s));
            }
            cur = sess.tape.relu(bn);
        }
    }
    (sess.tape.from_image(cur), stats)
}

/// KL divergence between row-wise softmax distributions of a constant target
/// and a reconstruction, averaged over rows and clamped at zero.
fn kl_rows(sess: &mut Session, target: Var, recon: Var) -> Var {
    let p = sess.tape.softmax_rows(target);
    let q = sess.tape.softmax_rows(recon);
    let ln_p = sess.tape.ln(p);
    let ln_q = sess.tape.ln(q);
    let diff = sess.tape.sub(ln_p, ln_q);
    let terms = sess.tape.mul(p, diff);
    let total = sess.tape.sum_all(terms);
    let rows = crate::tensor::mat(sess.tape.value(target)).nrows() as f64;
    let mean = sess.tape.scale(total, 1.0 / rows);
    // float cancellation can leave -1e-17 on identical distributions
    sess.tape.relu(mean)
}

pub struct SsptLoss {
    pub total: Var,
    pub l_a: Var,
    pub l_s: Var,
    pub l_p: Var,
    pub stats: Vec<(String, BatchStats)>,
}

/// Speech-sentence loss over a minibatch of pairs:
/// `L = L_a + L_s + L_p` (reconstruction + reconstruction + contrastive).
pub fn sspt_loss(
    sess: &mut Session,
    cfg: &ModelConfig,
    batch: &[Pair],
    training: bool,
) -> Result<SsptLoss, PretrainError> {
    if batch.len() < 2 {
        return Err(PretrainError::BatchTooSmall(batch.len()));
    }
    let enc_cfg = cfg.schema_encoder();
    let n = batch.len();
    let mut stats = Vec::new();
    let mut l_a_terms = Vec::with_capacity(n);
    let mut l_s_terms = Vec::with_capacity(n);
    let mut h_a_rows = Vec::with_capacity(n);
    let mut h_s_rows = Vec::with_capacity(n);

    for pair in batch {
        // speech autoencoder
        let out = encode_speech(sess, &cfg.speech, &pair.features.data, training);
        stats.extend(out.stats);
        let (recon, dec_stats) =
            sae_decode(sess, &cfg.speech, out.trunk, &out.block_inputs, training);
        stats.extend(dec_stats);
        let (l, m) = pair.features.data.dim();
        let target = sess
            .tape
            .leaf2(l, m, pair.features.data.iter().copied().collect());
        l_a_terms.push(kl_rows(sess, target, recon));
        h_a_rows.push(sess.tape.max_pool_rows(out.z));

        // text autoencoder
        if pair.tokens.is_empty() {
            return Err(PretrainError::MissingTranscripts(String::new()));
        }
        let (states, _) = embed_token_seq(sess, &enc_cfg, &pair.tokens)?;
        let mean_states = sess.tape.mean_rows(states);
        let w1 = sess.param("schema.head.w1");
        let b1 = sess.param("schema.head.b1");
        let w2 = sess.param("schema.head.w2");
        let b2 = sess.param("schema.head.b2");
        let h_s = crate::nn::ffn2(sess, mean_states, w1, b1, w2, b2);
        h_s_rows.push(h_s);
        l_s_terms.push(tae_reconstruction_nll(sess, &enc_cfg, h_s, &pair.tokens));
    }

    let l_a_sum = sess.tape.add_many(&l_a_terms);
    let l_a = sess.tape.scale(l_a_sum, 1.0 / n as f64);
    let l_s_sum = sess.tape.add_many(&l_s_terms);
    let l_s = sess.tape.scale(l_s_sum, 1.0 / n as f64);

    // contrastive alignment over pooled embeddings
    let h_a = sess.tape.concat_rows(&h_a_rows);
    let h_s = sess.tape.concat_rows(&h_s_rows);
    let an = sess.tape.normalize_rows(h_a);
    let sn = sess.tape.normalize_rows(h_s);
    let st = sess.tape.transpose(sn);
    let sims = sess.tape.matmul(an, st);
    let sims = sess.tape.clamp11(sims);
    let e = sess.tape.exp_of(sims);
    let ones = sess.tape.leaf2(n, 1, vec![1.0; n]);
    let row_sums = sess.tape.matmul(e, ones);
    let mut lp_terms = Vec::with_capacity(n);
    for b in 0..n {
        let pos = sess.tape.pick(sims, b, b);
        let e_pos = sess.tape.pick(e, b, b);
        let total = sess.tape.pick(row_sums, b, 0);
        let denom = sess.tape.sub(total, e_pos);
        let ln_denom = sess.tape.ln(denom);
        let term = sess.tape.sub(ln_denom, pos);
        lp_terms.push(term);
    }
    let lp_sum = sess.tape.add_many(&lp_terms);
    let l_p = sess.tape.scale(lp_sum, 1.0 / n as f64);

    let partial = sess.tape.add(l_a, l_s);
    let total = sess.tape.add(partial, l_p);
    Ok(SsptLoss {
        total,
        l_a,
        l_s,
        l_p,
        stats,
    })
}

/// Teacher-forced token reconstruction: LSTM decoder seeded with the pooled
/// sentence embedding, predicting each token's hash bucket.
fn tae_reconstruction_nll(
    sess: &mut Session,
    cfg: &SchemaEncoderConfig,
    h_s: Var,
    tokens: &[String],
) -> Var {
    let ids = token_ids(tokens, cfg.vocab_buckets);
    let emb = sess.param("schema.tok_emb");
    let w = crate::nn::LstmWeights::bind(sess, "tae.dec");
    let w_out = sess.param("tae.out.w");
    let b_out = sess.param("tae.out.b");
    let mut h = h_s;
    let mut c = sess.tape.leaf2(1, cfg.d_model, vec![0.0; cfg.d_model]);
    let mut terms = Vec::with_capacity(ids.len());
    let zero_in = sess.tape.leaf2(1, cfg.d_token, vec![0.0; cfg.d_token]);
    let mut x = zero_in;
    for &id in &ids {
        let (h2, c2) = crate::nn::lstm_step(sess, w, x, h, c, cfg.d_model);
        h = h2;
        c = c2;
        let l0 = sess.tape.matmul(h, w_out);
        let logits = sess.tape.add(l0, b_out);
        let probs = sess.tape.softmax_rows(logits);
        let p = sess.tape.pick(probs, 0, id);
        let lp = sess.tape.ln(p);
        terms.push(lp);
        x = sess.tape.gather_rows(emb, &[id]);
    }
    let total = sess.tape.add_many(&terms);
    sess.tape.scale(total, -1.0 / ids.len() as f64)
}

// ---------------------------------------------------------------------------
// Speech-item pre-training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SiptExample {
    pub features: SpeechFeatures,
    pub item_tokens: Vec<String>,
    pub label: bool,
}

fn columns_in_core(core: &SelectCore, out: &mut Vec<String>) {
    let mut push = |c: &str| {
        let c = c.to_ascii_lowercase();
        if !out.contains(&c) {
            out.push(c);
        }
    };
    for it in &core.items {
        push(&it.column);
    }
    fn walk(cond: &Cond, push: &mut dyn FnMut(&str)) {
        match cond {
            Cond::And(a, b) | Cond::Or(a, b) => {
                walk(a, push);
                walk(b, push);
            }
            Cond::Not(a) => walk(a, push),
            Cond::Cmp { item, .. } | Cond::Between { item, .. } => push(&item.column),
            Cond::Sub { item, sub, .. } => {
                push(&item.column);
                let mut inner = Vec::new();
                columns_in_core(sub, &mut inner);
                for c in inner {
                    push(&c);
                }
            }
        }
    }
    if let Some(f) = &core.filter {
        walk(f, &mut |c| push(c));
    }
    if let Some(o) = &core.order {
        push(&o.item.column);
    }
}

/// Distinct column names referenced anywhere in a query.
pub fn columns_in_sql(sql: &str, schema: &Schema) -> Vec<String> {
    let Ok(q) = crate::semql::parse_query(sql, schema) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    match &q {
        QueryExpr::Simple(a) => columns_in_core(a, &mut out),
        QueryExpr::Intersect(a, b) | QueryExpr::Union(a, b) | QueryExpr::Except(a, b) => {
            columns_in_core(a, &mut out);
            columns_in_core(b, &mut out);
        }
    }
    out
}

/// Compose item-presence examples from an instance: one positive per column
/// used in the gold SQL, plus seeded negatives drawn from unused columns.
pub fn sipt_examples(
    instance: &Instance,
    schema: &Schema,
    n_negatives: usize,
    seed: u64,
) -> Vec<SiptExample> {
    let used = columns_in_sql(&instance.gold_sql, schema);
    let inventory = crate::semql::ColumnInventory::build(schema);
    let mut out = Vec::new();
    for c in &used {
        out.push(SiptExample {
            features: instance.features.clone(),
            item_tokens: crate::schema_encoder::tokenize_name(c),
            label: true,
        });
    }
    let mut unused: Vec<&String> = inventory
        .names
        .iter()
        .filter(|n| !used.contains(n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ crate::features::token_hash(&instance.id),
    );
    unused.shuffle(&mut rng);
    for c in unused.into_iter().take(n_negatives) {
        out.push(SiptExample {
            features: instance.features.clone(),
            item_tokens: crate::schema_encoder::tokenize_name(c),
            label: false,
        });
    }
    out
}

/// Mean binary cross-entropy of the item-presence classifier:
/// `sigmoid(w_f . pooled_cosine(Z_a, h_item) + b_f)`.
pub fn sipt_loss(
    sess: &mut Session,
    cfg: &ModelConfig,
    examples: &[SiptExample],
    training: bool,
) -> Result<(Var, Vec<(String, BatchStats)>), PretrainError> {
    if examples.is_empty() {
        return Err(PretrainError::EmptyExamples);
    }
    let enc_cfg = cfg.schema_encoder();
    let mut stats = Vec::new();
    let mut terms = Vec::with_capacity(examples.len());
    for ex in examples {
        let out = encode_speech(sess, &cfg.speech, &ex.features.data, training);
        stats.extend(out.stats);
        let (_, h_item) = embed_token_seq(sess, &enc_cfg, &ex.item_tokens)?;
        let za_n = sess.tape.normalize_rows(out.z);
        let hi_n = sess.tape.normalize_rows(h_item);
        let hi_t = sess.tape.transpose(hi_n);
        let cos = sess.tape.matmul(za_n, hi_t);
        let cos = sess.tape.clamp11(cos);
        let cos_row = sess.tape.transpose(cos);
        let pooled = sess.tape.pool_cols_adaptive(cos_row, COSVEC_WIDTH);
        let wf = sess.param("sipt.wf");
        let bf = sess.param("sipt.bf");
        let l0 = sess.tape.matmul(pooled, wf);
        let logit = sess.tape.add(l0, bf);
        let y_hat = sess.tape.sigmoid(logit);
        // BCE with the probability clamped away from 0/1
        let term = if ex.label {
            let p = sess.tape.pick(y_hat, 0, 0);
            let lp = sess.tape.ln(p);
            sess.tape.scale(lp, -1.0)
        } else {
            let p = sess.tape.pick(y_hat, 0, 0);
            let one = sess.tape.scalar_leaf(1.0);
            let q = sess.tape.sub(one, p);
            let lq = sess.tape.ln(q);
            sess.tape.scale(lq, -1.0)
        };
        terms.push(term);
    }
    let total = sess.tape.add_many(&terms);
    let mean = sess.tape.scale(total, 1.0 / examples.len() as f64);
    Ok((mean, stats))
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub run_sspt: bool,
    pub run_sipt: bool,
    pub sipt_negatives: usize,
    pub grad_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            run_sspt: true,
            run_sipt: true,
            sipt_negatives: 3,
            grad_clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub sspt_total: f64,
    pub sspt_l_p: f64,
    pub sipt_bce: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PretrainMeta {
    pub epoch: usize,
    pub loss: f64,
    pub pretrained: bool,
    pub config: PretrainConfig,
}

/// Run both pre-training phases over a dataset with transcripts; returns the
/// updated parameters (loadable by fine-tuning) and the per-epoch history.
/// Checkpoints land in `out_dir/ckpt/` when a directory is given.
pub fn run_pretraining(
    instances: &[Instance],
    schemas: &crate::schema::SchemaStore,
    cfg: &ModelConfig,
    pcfg: &PretrainConfig,
    mut store: ParamStore,
    out_dir: Option<&Path>,
) -> Result<(ParamStore, Vec<PretrainEpoch>), PretrainError> {
    if !pcfg.run_sspt && !pcfg.run_sipt {
        if let Some(dir) = out_dir {
            write_checkpoint(dir, 0, f64::NAN, false, pcfg, &store)?;
        }
        return Ok((store, Vec::new()));
    }
    let mut pairs = Vec::with_capacity(instances.len());
    for inst in instances {
        let tokens = inst
            .transcript
            .clone()
            .ok_or_else(|| PretrainError::MissingTranscripts(inst.id.clone()))?;
        pairs.push(Pair {
            features: inst.features.clone(),
            tokens,
        });
    }
    let mut sipt_set: Vec<SiptExample> = Vec::new();
    if pcfg.run_sipt {
        for inst in instances {
            let schema = &schemas[&inst.db_id];
            sipt_set.extend(sipt_examples(inst, schema, pcfg.sipt_negatives, pcfg.seed));
        }
    }

    let mut opt = Adam::new(pcfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let mut history = Vec::new();
    for epoch in 1..=pcfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut sspt_total = 0.0;
        let mut sspt_lp = 0.0;
        let mut n_batches = 0usize;
        if pcfg.run_sspt {
            for chunk in order.chunks(pcfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let batch: Vec<Pair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
                let mut sess = Session::new(&store);
                let loss = sspt_loss(&mut sess, cfg, &batch, true)?;
                sspt_total += sess.tape.scalar(loss.total);
                sspt_lp += sess.tape.scalar(loss.l_p);
                n_batches += 1;
                let grads = sess.tape.backward(loss.total);
                let mut pg = sess.param_grads(&grads);
                clip_global_norm(&mut pg, pcfg.grad_clip);
                let stats = loss.stats;
                drop(sess);
                opt.step(&mut store, &pg);
                update_running_stats(&mut store, &stats, 0.1);
            }
        }
        let mut sipt_bce = 0.0;
        if pcfg.run_sipt && !sipt_set.is_empty() {
            let mut sorder: Vec<usize> = (0..sipt_set.len()).collect();
            sorder.shuffle(&mut rng);
            let mut nb = 0usize;
            for chunk in sorder.chunks(pcfg.batch_size.max(2)) {
                let batch: Vec<SiptExample> =
                    chunk.iter().map(|&i| sipt_set[i].clone()).collect();
                let mut sess = Session::new(&store);
                let (loss, stats) = sipt_loss(&mut sess, cfg, &batch, true)?;
                sipt_bce += sess.tape.scalar(loss);
                nb += 1;
                let grads = sess.tape.backward(loss);
                let mut pg = sess.param_grads(&grads);
                clip_global_norm(&mut pg, pcfg.grad_clip);
                drop(sess);
                opt.step(&mut store, &pg);
                update_running_stats(&mut store, &stats, 0.1);
            }
            if nb > 0 {
                sipt_bce /= nb as f64;
            }
        }
        let record = PretrainEpoch {
            epoch,
            sspt_total: if n_batches > 0 { sspt_total / n_batches as f64 } else { 0.0 },
            sspt_l_p: if n_batches > 0 { sspt_lp / n_batches as f64 } else { 0.0 },
            sipt_bce,
        };
        if let Some(dir) = out_dir {
            write_checkpoint(dir, epoch, record.sspt_total, true, pcfg, &store)?;
        }
        history.push(record);
    }
    Ok((store, history))
}

fn write_checkpoint(
    dir: &Path,
    epoch: usize,
    loss: f64,
    pretrained: bool,
    pcfg: &PretrainConfig,
    store: &ParamStore,
) -> Result<(), PretrainError> {
    let ckpt = dir.join("ckpt");
    std::fs::create_dir_all(&ckpt)?;
    store.save(&ckpt.join(format!("{epoch}.bin")))?;
    let meta = PretrainMeta {
        epoch,
        loss,
        pretrained,
        config: pcfg.clone(),
    };
    std::fs::write(
        ckpt.join(format!("{epoch}.json")),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_instance, BuildOptions, ManifestRecord};
    use crate::features::{synth_pseudo_speech, PseudoTtsConfig};
    use crate::semql::tests::wimmera_schema;
    use crate::semql::Grammar;

    fn toy_model() -> ModelConfig {
        let mut cfg = ModelConfig::desk(12);
        cfg.speech.channels = 4;
        cfg.speech.n_blocks = 3;
        cfg.speech.time_stride_blocks = vec![2];
        cfg.speech.mel_stride_blocks = vec![1, 2, 3];
        cfg.fusion.n_layers = 1;
        cfg.fusion.n_heads = 2;
        cfg.fusion.d_ff = 16;
        cfg.vocab_buckets = 64;
        cfg
    }

    fn toy_pairs(n: usize) -> Vec<Pair> {
        (0..n)
            .map(|i| {
                let tokens: Vec<String> =
                    vec![format!("word{i}"), "the".into(), format!("tail{i}")];
                Pair {
                    features: synth_pseudo_speech(&tokens, &PseudoTtsConfig::default()).unwrap(),
                    tokens,
                }
            })
            .collect()
    }

    #[test]
    fn sspt_loss_parts_behave() {
        let cfg = toy_model();
        let grammar = Grammar::builtin();
        let store = init_pretrain_params(&cfg, &grammar, 11);
        let mut sess = Session::new(&store);
        let batch = toy_pairs(4);
        let loss = sspt_loss(&mut sess, &cfg, &batch, false).unwrap();
        let (total, la, ls, lp) = (
            sess.tape.scalar(loss.total),
            sess.tape.scalar(loss.l_a),
            sess.tape.scalar(loss.l_s),
            sess.tape.scalar(loss.l_p),
        );
        assert!(total.is_finite());
        assert!(la >= 0.0);
        assert!(ls >= 0.0);
        assert!((total - (la + ls + lp)).abs() < 1e-9);
        assert!(matches!(
            sspt_loss(&mut Session::new(&store), &cfg, &batch[..1], false),
            Err(PretrainError::BatchTooSmall(1))
        ));
    }

    /// Identical pooled embeddings make every similarity equal, so the
    /// contrastive term is exactly log(N_b - 1).
    #[test]
    fn contrastive_closed_form_on_equal_pairs() {
        let cfg = toy_model();
        let grammar = Grammar::builtin();
        let store = init_pretrain_params(&cfg, &grammar, 12);
        for n in [2usize, 4, 8] {
            let one = toy_pairs(1).remove(0);
            let batch: Vec<Pair> = (0..n).map(|_| one.clone()).collect();
            let mut sess = Session::new(&store);
            let loss = sspt_loss(&mut sess, &cfg, &batch, false).unwrap();
            let lp = sess.tape.scalar(loss.l_p);
            let want = ((n - 1) as f64).ln();
            assert!(
                (lp - want).abs() < 1e-6,
                "N_b={n}: L_p={lp}, want {want}"
            );
        }
    }

    #[test]
    fn sae_reconstruction_shape_matches_input() {
        let cfg = toy_model();
        let grammar = Grammar::builtin();
        let store = init_pretrain_params(&cfg, &grammar, 13);
        let mut sess = Session::new(&store);
        let pair = &toy_pairs(1)[0];
        let out = encode_speech(&mut sess, &cfg.speech, &pair.features.data, false);
        let (recon, _) = sae_decode(&mut sess, &cfg.speech, out.trunk, &out.block_inputs, false);
        assert_eq!(
            crate::tensor::mat(sess.tape.value(recon)).dim(),
            pair.features.data.dim()
        );
    }

    #[test]
    fn kl_zero_for_identical_distributions() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let x = sess.tape.leaf2(3, 5, (0..15).map(|i| (i as f64 * 0.3).sin()).collect());
        let kl = kl_rows(&mut sess, x, x);
        assert_eq!(sess.tape.scalar(kl), 0.0);
    }

    fn wimmera_instance() -> Instance {
        let rec = ManifestRecord {
            id: "p1".into(),
            db_id: "wimmera_db".into(),
            audio: "pseudo:what is the lowest draws with more than 1 byes".into(),
            transcript: Some("what is the lowest draws with more than 1 byes".into()),
            sql: "SELECT MIN(draws) FROM wimmera WHERE byes > 1".into(),
        };
        build_instance(&rec, &wimmera_schema(), &Grammar::builtin(), &BuildOptions::default())
            .unwrap()
    }

    #[test]
    fn sipt_examples_label_columns() {
        let inst = wimmera_instance();
        let schema = wimmera_schema();
        let ex = sipt_examples(&inst, &schema, 3, 0);
        let positives: Vec<String> = ex
            .iter()
            .filter(|e| e.label)
            .map(|e| e.item_tokens.join("_"))
            .collect();
        assert_eq!(positives, vec!["draws".to_string(), "byes".to_string()]);
        let negatives: Vec<String> = ex
            .iter()
            .filter(|e| !e.label)
            .map(|e| e.item_tokens.join("_"))
            .collect();
        assert_eq!(negatives.len(), 3);
        assert!(negatives.iter().all(|n| n != "draws" && n != "byes"));
        assert!(negatives.contains(&"wins".to_string()) || !negatives.is_empty());
        // determinism
        let ex2 = sipt_examples(&inst, &schema, 3, 0);
        let neg2: Vec<String> = ex2
            .iter()
            .filter(|e| !e.label)
            .map(|e| e.item_tokens.join("_"))
            .collect();
        assert_eq!(negatives, neg2);
    }

    #[test]
    fn sipt_loss_values() {
        let cfg = toy_model();
        let grammar = Grammar::builtin();
        let store = init_pretrain_params(&cfg, &grammar, 14);
        let inst = wimmera_instance();
        let schema = wimmera_schema();
        let examples = sipt_examples(&inst, &schema, 2, 1);
        let mut sess = Session::new(&store);
        let (loss, _) = sipt_loss(&mut sess, &cfg, &examples, false).unwrap();
        let l = sess.tape.scalar(loss);
        assert!(l.is_finite() && l > 0.0);
        assert!(matches!(
            sipt_loss(&mut Session::new(&store), &cfg, &[], false),
            Err(PretrainError::EmptyExamples)
        ));
    }

    /// A classifier pinned at 0.5 scores ln 2 on a single example.
    #[test]
    fn sipt_half_probability_is_ln2() {
        let cfg = toy_model();
        let grammar = Grammar::builtin();
        let mut store = init_pretrain_params(&cfg, &grammar, 15);
        store.get_mut("sipt.wf").fill(0.0);
        store.get_mut("sipt.bf").fill(0.0);
        let inst = wimmera_instance();
        let schema = wimmera_schema();
        let examples = sipt_examples(&inst, &schema, 0, 1);
        let one = &examples[..1];
        let mut sess = Session::new(&store);
        let (loss, _) = sipt_loss(&mut sess, &cfg, one, false).unwrap();
        assert!((sess.tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
