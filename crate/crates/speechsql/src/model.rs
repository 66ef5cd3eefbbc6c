//! Full model assembly: speech encoder + schema graph encoder + linking +
//! cross-modal fusion + grammar-guided decoder, with one configuration
//! struct covering the paper-scale defaults, a desk-scale preset, and the
//! ablation switches.

use crate::dataset::Instance;
use crate::decoder::{self, DecodeInputs, DecoderConfig, DecoderError};
use crate::features::pad_or_resample;
use crate::fusion::{self, FusionConfig};
use crate::params::{ParamStore, Session};
use crate::schema::Schema;
use crate::schema_encoder::{
    self, build_schema_graph, GcnMode, SchemaEncoderConfig, SchemaGraph,
};
use crate::semql::{ActionSequence, ColumnInventory, Grammar};
use crate::speech_encoder::{self, SpeechEncoderConfig};
use crate::tensor::{BatchStats, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    SchemaEncode(#[from] crate::schema_encoder::SchemaEncodeError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub speech: SpeechEncoderConfig,
    pub fusion: FusionConfig,
    pub d_action: usize,
    pub d_type: usize,
    pub d_token: usize,
    pub vocab_buckets: usize,
    /// Features are padded / uniformly resampled to this many frames.
    pub input_frames: usize,
    pub max_decode_steps: usize,
    pub gcn_mode: GcnMode,
    pub no_linking: bool,
    pub no_fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            speech: SpeechEncoderConfig::default(),
            fusion: FusionConfig::default(),
            d_action: 12,
            d_type: 12,
            d_token: 512,
            vocab_buckets: 2048,
            input_frames: 256,
            max_decode_steps: crate::semql::MAX_STEPS_DEFAULT,
            gcn_mode: GcnMode::Gcn,
            no_linking: false,
            no_fusion: false,
        }
    }
}

impl ModelConfig {
    /// Laptop-scale preset: same architecture, small widths. Two time-strided
    /// blocks give one output frame per 4 input frames, matching the default
    /// pseudo-speech block so each output row lines up with one token.
    pub fn desk(d_model: usize) -> Self {
        Self {
            d_model,
            speech: SpeechEncoderConfig {
                n_blocks: 6,
                channels: 16,
                kernel: (3, 3),
                time_stride_blocks: vec![2, 4],
                mel_stride_blocks: vec![2, 3, 4],
                d_model,
            },
            fusion: FusionConfig {
                n_layers: 2,
                n_heads: 4,
                d_ff: 2 * d_model,
                d_model,
                dropout: 0.1,
                use_positional_encoding: true,
            },
            d_action: 12,
            d_type: 12,
            d_token: d_model,
            vocab_buckets: 2048,
            input_frames: 64,
            max_decode_steps: crate::semql::MAX_STEPS_DEFAULT,
            gcn_mode: GcnMode::Gcn,
            no_linking: false,
            no_fusion: false,
        }
    }

    pub fn schema_encoder(&self) -> SchemaEncoderConfig {
        SchemaEncoderConfig {
            d_token: self.d_token,
            hidden: self.d_model,
            d_model: self.d_model,
            vocab_buckets: self.vocab_buckets,
            gcn_mode: self.gcn_mode,
        }
    }

    pub fn decoder(&self, _grammar: &Grammar) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            d_action: self.d_action,
            d_type: self.d_type,
            max_steps: self.max_decode_steps,
        }
    }
}

/// Initialize every parameter of the full model.
pub fn init_params(cfg: &ModelConfig, grammar: &Grammar, seed: u64) -> ParamStore {
    let mut rng = crate::params::seeded_rng(seed);
    let mut store = ParamStore::new();
    speech_encoder::init_speech_params(&mut store, &cfg.speech, &mut rng);
    schema_encoder::init_schema_params(&mut store, &cfg.schema_encoder(), &mut rng);
    fusion::init_fusion_params(&mut store, &cfg.fusion, &mut rng);
    decoder::init_decoder_params(
        &mut store,
        &cfg.decoder(grammar),
        grammar.n_rules(),
        grammar.n_nonterminals(),
        &mut rng,
    );
    store
}

/// Everything the decoder needs for one instance, living on the session tape.
pub struct EncodedInstance {
    pub z_a: Var,
    pub z_s: Var,
    pub value_emb: Option<Var>,
    pub speech_mask: Vec<bool>,
    pub stats: Vec<(String, BatchStats)>,
}

/// Encode the schema side up to the graph encoder output; shareable between
/// instances of the same schema inside one session.
pub fn encode_schema(
    sess: &mut Session,
    cfg: &ModelConfig,
    graph: &SchemaGraph,
) -> Result<Var, ModelError> {
    let enc_cfg = cfg.schema_encoder();
    let h = schema_encoder::embed_nodes(sess, &enc_cfg, graph)?;
    Ok(schema_encoder::encode_graph(sess, &enc_cfg, h, graph))
}

/// Per-session memo for candidate-value embeddings; values repeat heavily
/// across instances of a batch and gradients accumulate through shared nodes.
pub type ValueEmbedCache = std::collections::HashMap<String, Var>;

/// Encode one instance: speech trunk, optional linking residual, optional
/// positional encoding, then cross-modal fusion against the schema stream.
pub fn encode_instance(
    sess: &mut Session,
    cfg: &ModelConfig,
    inst: &Instance,
    schema_z: Var,
    training: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodedInstance, ModelError> {
    let mut cache = ValueEmbedCache::new();
    encode_instance_cached(sess, cfg, inst, schema_z, training, rng.as_deref_mut(), &mut cache)
}

/// [`encode_instance`] with a shared value-embedding memo.
pub fn encode_instance_cached(
    sess: &mut Session,
    cfg: &ModelConfig,
    inst: &Instance,
    schema_z: Var,
    training: bool,
    mut rng: Option<&mut ChaCha8Rng>,
    value_cache: &mut ValueEmbedCache,
) -> Result<EncodedInstance, ModelError> {
    let valid_frames = inst.features.n_frames().min(cfg.input_frames);
    let padded = pad_or_resample(&inst.features, cfg.input_frames);
    let out = speech_encoder::encode_speech(sess, &cfg.speech, &padded.data, training);
    let l_out = crate::tensor::mat(sess.tape.value(out.z)).nrows();
    let valid_out = cfg.speech.out_len(valid_frames).min(l_out);
    let mut speech_mask = vec![false; l_out];
    for m in speech_mask.iter_mut().take(valid_out) {
        *m = true;
    }

    let mut z_a = out.z;
    if cfg.fusion.use_positional_encoding {
        let pe = crate::nn::positional_encoding(l_out, cfg.d_model);
        let pe = sess.tape.leaf(pe.into_dyn());
        z_a = sess.tape.add(z_a, pe);
    }
    let mut z_s = schema_z;
    if !cfg.no_linking {
        let g = fusion::link_scores(sess, z_a, z_s);
        z_a = fusion::apply_linking(sess, z_a, z_s, g);
    }
    if !cfg.no_fusion {
        let (fa, fs) = fusion::fuse(
            sess,
            &cfg.fusion,
            z_a,
            z_s,
            &speech_mask,
            rng.as_deref_mut(),
        );
        z_a = fa;
        z_s = fs;
    }

    // Candidate values share the schema token encoder.
    let value_emb = if inst.candidate_values.is_empty() {
        None
    } else {
        let enc_cfg = cfg.schema_encoder();
        let mut rows = Vec::with_capacity(inst.candidate_values.len());
        for v in &inst.candidate_values {
            if let Some(row) = value_cache.get(v) {
                rows.push(*row);
                continue;
            }
            let tokens: Vec<String> = v
                .split_whitespace()
                .map(|t| t.to_ascii_lowercase())
                .collect();
            let tokens = if tokens.is_empty() { vec![v.clone()] } else { tokens };
            let (_, pooled) = schema_encoder::embed_token_seq(sess, &enc_cfg, &tokens)?;
            value_cache.insert(v.clone(), pooled);
            rows.push(pooled);
        }
        Some(sess.tape.concat_rows(&rows))
    };

    Ok(EncodedInstance {
        z_a,
        z_s,
        value_emb,
        speech_mask,
        stats: out.stats,
    })
}

/// Teacher-forced negative log-likelihood of the instance's gold actions.
pub fn instance_nll(
    sess: &mut Session,
    cfg: &ModelConfig,
    grammar: &Grammar,
    inventory: &ColumnInventory,
    inst: &Instance,
    encoded: &EncodedInstance,
) -> Result<Var, ModelError> {
    let inputs = DecodeInputs {
        z_a: encoded.z_a,
        z_s: encoded.z_s,
        value_emb: encoded.value_emb,
        speech_mask: &encoded.speech_mask,
        grammar,
        inventory,
        n_candidates: inst.candidate_values.len(),
    };
    let nll = decoder::teacher_forced_nll(
        sess,
        &cfg.decoder(grammar),
        &inputs,
        &inst.gold_actions,
    )?;
    Ok(nll)
}

/// Greedy decode of one instance into an action sequence.
pub fn decode_instance(
    sess: &mut Session,
    cfg: &ModelConfig,
    grammar: &Grammar,
    inventory: &ColumnInventory,
    inst: &Instance,
    encoded: &EncodedInstance,
) -> Result<ActionSequence, ModelError> {
    let inputs = DecodeInputs {
        z_a: encoded.z_a,
        z_s: encoded.z_s,
        value_emb: encoded.value_emb,
        speech_mask: &encoded.speech_mask,
        grammar,
        inventory,
        n_candidates: inst.candidate_values.len(),
    };
    Ok(decoder::decode_greedy(sess, &cfg.decoder(grammar), &inputs)?)
}

/// Convenience bundle for one schema's derived structures.
pub struct SchemaBundle {
    pub graph: SchemaGraph,
    pub inventory: ColumnInventory,
}

impl SchemaBundle {
    pub fn build(schema: &Schema) -> Self {
        Self {
            graph: build_schema_graph(schema),
            inventory: ColumnInventory::build(schema),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_instance, BuildOptions, ManifestRecord};
    use crate::semql::tests::products_schema;

    fn toy_model() -> ModelConfig {
        let mut cfg = ModelConfig::desk(16);
        cfg.speech.channels = 4;
        cfg.fusion.n_layers = 1;
        cfg.fusion.n_heads = 2;
        cfg.fusion.d_ff = 24;
        cfg.input_frames = 16;
        cfg
    }

    fn toy_instance(schema: &Schema, grammar: &Grammar) -> Instance {
        let rec = ManifestRecord {
            id: "m1".into(),
            db_id: "products_db".into(),
            audio: "pseudo:show the product name with color description 1".into(),
            transcript: Some("show the product name with color description 1".into()),
            sql: "SELECT T1.product_name FROM Products AS T1 JOIN Ref_Colors AS T2 \
                  WHERE T2.color_description = 1"
                .into(),
        };
        build_instance(&rec, schema, grammar, &BuildOptions::default()).unwrap()
    }

    #[test]
    fn end_to_end_forward_and_decode() {
        let schema = products_schema();
        let grammar = Grammar::builtin();
        let cfg = toy_model();
        let store = init_params(&cfg, &grammar, 42);
        let bundle = SchemaBundle::build(&schema);
        let inst = toy_instance(&schema, &grammar);

        let mut sess = Session::new(&store);
        let z_s = encode_schema(&mut sess, &cfg, &bundle.graph).unwrap();
        let enc = encode_instance(&mut sess, &cfg, &inst, z_s, false, None).unwrap();
        let nll = instance_nll(&mut sess, &cfg, &grammar, &bundle.inventory, &inst, &enc).unwrap();
        let loss = sess.tape.scalar(nll);
        assert!(loss.is_finite() && loss > 0.0);

        let actions =
            decode_instance(&mut sess, &cfg, &grammar, &bundle.inventory, &inst, &enc).unwrap();
        // whatever the untrained model decodes must be grammatical
        let sql = crate::semql::actions_to_sql(
            &actions,
            &schema,
            &grammar,
            &inst.candidate_values,
        )
        .unwrap();
        assert!(sql.starts_with("SELECT"));
    }

    #[test]
    fn ablation_flags_change_only_their_path() {
        let schema = products_schema();
        let grammar = Grammar::builtin();
        let base = toy_model();
        let store = init_params(&base, &grammar, 43);
        let bundle = SchemaBundle::build(&schema);
        let inst = toy_instance(&schema, &grammar);

        let run = |cfg: &ModelConfig| {
            let mut sess = Session::new(&store);
            let z_s = encode_schema(&mut sess, cfg, &bundle.graph).unwrap();
            let enc = encode_instance(&mut sess, cfg, &inst, z_s, false, None).unwrap();
            let nll =
                instance_nll(&mut sess, cfg, &grammar, &bundle.inventory, &inst, &enc).unwrap();
            sess.tape.scalar(nll)
        };
        let full = run(&base);
        let mut no_link = base.clone();
        no_link.no_linking = true;
        let mut no_fuse = base.clone();
        no_fuse.no_fusion = true;
        let nl = run(&no_link);
        let nf = run(&no_fuse);
        assert_ne!(full, nl);
        assert_ne!(full, nf);
        // identity GCN shares all other weights: still runs, different value
        let mut no_gcn = base.clone();
        no_gcn.gcn_mode = GcnMode::Identity;
        let ng = run(&no_gcn);
        assert_ne!(full, ng);
    }

    #[test]
    fn batch_grad_flows_to_all_components() {
        let schema = products_schema();
        let grammar = Grammar::builtin();
        let cfg = toy_model();
        let store = init_params(&cfg, &grammar, 44);
        let bundle = SchemaBundle::build(&schema);
        let inst = toy_instance(&schema, &grammar);

        let mut sess = Session::new(&store);
        let z_s = encode_schema(&mut sess, &cfg, &bundle.graph).unwrap();
        let mut rng = crate::params::seeded_rng(9);
        let enc =
            encode_instance(&mut sess, &cfg, &inst, z_s, true, Some(&mut rng)).unwrap();
        let nll = instance_nll(&mut sess, &cfg, &grammar, &bundle.inventory, &inst, &enc).unwrap();
        let grads = sess.tape.backward(nll);
        let pg = sess.param_grads(&grads);
        for probe in [
            "speech.b1.w",
            "schema.tok_emb",
            "schema.gcn1.theta",
            "fusion.l0.a.wq",
            "dec.wp",
            "dec.ws",
        ] {
            let g = &pg[probe];
            let norm: f64 = g.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "no gradient reached {probe}");
        }
    }
}
