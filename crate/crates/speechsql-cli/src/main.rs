//! Command-line driver: synthetic data generation, pre-training,
//! fine-tuning, evaluation, single-utterance prediction and gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error.

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use speechsql::corpus;
use speechsql::dataset::{
    self, inject_asr_noise, load_dataset, BuildOptions, ManifestRecord, NoiseSpec,
};
use speechsql::eval;
use speechsql::features::{extract_logmel, synth_pseudo_speech, PseudoTtsConfig, Waveform};
use speechsql::model::{self, ModelConfig, SchemaBundle};
use speechsql::params::{ParamStore, Session};
use speechsql::pretrain::{self, PretrainConfig};
use speechsql::schema::load_schema_store;
use speechsql::semql::{actions_to_sql, load_grammar, Grammar};
use speechsql::train::{self, train_loop, Checkpoint, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "speechsql", about = "Speech-to-SQL experiments", version)]
struct Cli {
    /// Seed for all randomness (falls back to SPEECHSQL_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model width; the paper-scale value is 512.
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    /// Disable the graph encoder (identity over node embeddings).
    #[arg(long)]
    no_gcn: bool,
    /// Disable the cosine schema-linking residual.
    #[arg(long)]
    no_linking: bool,
    /// Disable the cross-modal fusion encoder.
    #[arg(long)]
    no_fusion: bool,
}

impl ModelArgs {
    fn build(&self) -> ModelConfig {
        let mut cfg = ModelConfig::desk(self.d_model);
        if self.no_gcn {
            cfg.gcn_mode = speechsql::schema_encoder::GcnMode::Identity;
        }
        cfg.no_linking = self.no_linking;
        cfg.no_fusion = self.no_fusion;
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: manifests plus feature files.
    SynthData {
        /// Schema store JSON.
        #[arg(long)]
        schemas: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Total number of instances across the train/val/test splits.
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
    /// Speech-sentence pre-training (autoencoders + contrastive alignment).
    PretrainSs(PretrainArgs),
    /// Speech-item pre-training (schema-item presence prediction).
    PretrainSi(PretrainArgs),
    /// Fine-tune the full model on speech-SQL pairs.
    Train {
        #[arg(long)]
        schemas: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Validation manifest; defaults to the training manifest.
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Grammar description file (defaults to the built-in grammar).
        #[arg(long)]
        grammar: Option<PathBuf>,
        /// Initial weights, e.g. from pre-training.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        schemas: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint directory produced by `train` (contains best.bin).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grammar: Option<PathBuf>,
        /// Corrupt transcripts to this WER, re-synthesize pseudo speech from
        /// the noisy transcript, then evaluate (cascade-degradation shape).
        #[arg(long)]
        inject_wer: Option<f64>,
    },
    /// Decode one utterance (WAV file or "pseudo:<tokens>") into SQL.
    Predict {
        #[arg(long)]
        schemas: PathBuf,
        /// WAV path or a "pseudo:" token string.
        #[arg(long)]
        audio: String,
        #[arg(long)]
        db_id: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        grammar: Option<PathBuf>,
        /// Comma-separated candidate literals for value slots.
        #[arg(long, default_value = "0,1,2,3,5,10,100")]
        values: String,
    },
    /// Finite-difference gradient checks for the model components.
    Gradcheck {
        /// Component name, or "all".
        #[arg(long, default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    schemas: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing parameter file.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[command(flatten)]
    model: ModelArgs,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version through the same error path
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let seed = cli.seed.or_else(|| {
        std::env::var("SPEECHSQL_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    match run(cli.command, seed.unwrap_or(0)) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn write_run_config(out: &Path, seed: u64, what: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let cfg = serde_json::json!({ "seed": seed, "command": what });
    std::fs::write(
        out.join("run_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    Ok(())
}

fn grammar_from(path: &Option<PathBuf>) -> Result<Grammar> {
    match path {
        None => Ok(Grammar::builtin()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading grammar {}", p.display()))?;
            load_grammar(&text).map_err(|e| anyhow!("grammar: {e}"))
        }
    }
}

fn build_opts(seed: u64) -> BuildOptions {
    BuildOptions {
        seed,
        ..Default::default()
    }
}

fn run_pretrain(args: PretrainArgs, sspt: bool, seed: u64) -> Result<()> {
    let store = load_schema_store(&args.schemas)?;
    let grammar = Grammar::builtin();
    let insts = load_dataset(&args.manifest, &store, &grammar, &build_opts(seed))?;
    let cfg = args.model.build();
    let pcfg = PretrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        seed,
        run_sspt: sspt,
        run_sipt: !sspt,
        ..Default::default()
    };
    write_run_config(
        &args.out,
        seed,
        &serde_json::json!({"pretrain": {"sspt": sspt, "epochs": args.epochs}}),
    )?;
    let init = match &args.resume {
        Some(p) => ParamStore::load(p)?,
        None => pretrain::init_pretrain_params(&cfg, &grammar, seed),
    };
    let (params, history) =
        pretrain::run_pretraining(&insts, &store, &cfg, &pcfg, init, Some(&args.out))?;
    params.save(&args.out.join("pretrained.bin"))?;
    for h in &history {
        println!(
            "epoch {:3} sspt {:.4} (L_p {:.4}) sipt {:.4}",
            h.epoch, h.sspt_total, h.sspt_l_p, h.sipt_bce
        );
    }
    println!("wrote {}", args.out.join("pretrained.bin").display());
    Ok(())
}

fn run(cmd: Command, seed: u64) -> Result<()> {
    match cmd {
        Command::SynthData { schemas, out, n } => {
            let store = load_schema_store(&schemas)?;
            write_run_config(
                &out,
                seed,
                &serde_json::json!({"synth_data": {"n": n, "schemas": schemas}}),
            )?;
            let examples = corpus::generate_balanced(&store, n, seed);
            if examples.len() < n {
                eprintln!(
                    "note: schema store supports {} distinct examples (requested {n})",
                    examples.len()
                );
            }
            let feat_dir = out.join("feats");
            std::fs::create_dir_all(&feat_dir)?;
            let tts = PseudoTtsConfig {
                seed,
                ..Default::default()
            };
            let mut records = Vec::new();
            for (i, ex) in examples.iter().enumerate() {
                let id = format!("syn{i:05}");
                let tokens = ex.question.clone();
                let feats = synth_pseudo_speech(&tokens, &tts)?;
                let rel = format!("feats/{id}.feat");
                feats.save(&out.join(&rel))?;
                records.push(ManifestRecord {
                    id,
                    db_id: ex.db_id.clone(),
                    audio: rel,
                    transcript: Some(ex.question.join(" ")),
                    sql: ex.sql.clone(),
                });
            }
            // disjoint (question, schema) combos across splits by construction:
            // every generated example is distinct and appears in exactly one split
            let n_train = records.len() * 7 / 10;
            let n_val = records.len() * 15 / 100;
            dataset::write_manifest(&records[..n_train], &out.join("train.jsonl"))?;
            dataset::write_manifest(
                &records[n_train..n_train + n_val],
                &out.join("val.jsonl"),
            )?;
            dataset::write_manifest(&records[n_train + n_val..], &out.join("test.jsonl"))?;
            println!(
                "wrote {} train / {} val / {} test instances under {}",
                n_train,
                n_val,
                records.len() - n_train - n_val,
                out.display()
            );
            Ok(())
        }
        Command::PretrainSs(args) => run_pretrain(args, true, seed),
        Command::PretrainSi(args) => run_pretrain(args, false, seed),
        Command::Train {
            schemas,
            manifest,
            val_manifest,
            out,
            grammar,
            init,
            epochs,
            batch_size,
            lr,
            model,
        } => {
            let store = load_schema_store(&schemas)?;
            let g = grammar_from(&grammar)?;
            let opts = build_opts(seed);
            let train_set = load_dataset(&manifest, &store, &g, &opts)?;
            let val_set = match &val_manifest {
                Some(p) => load_dataset(p, &store, &g, &opts)?,
                None => train_set.clone(),
            };
            let mut config = TrainConfig::desk(model.d_model);
            config.model = model.build();
            config.max_epochs = epochs;
            config.batch_size = batch_size;
            config.lr = lr;
            config.seed = seed;
            config.grammar_path = grammar.clone();
            write_run_config(
                &out,
                seed,
                &serde_json::to_value(&config).expect("config serializes"),
            )?;
            let init_params = match &init {
                Some(p) => Some(ParamStore::load(p)?),
                None => None,
            };
            let ckpt = train_loop(
                &train_set,
                &val_set,
                &config,
                &store,
                init_params.as_ref(),
                Some(&out),
            )?;
            println!(
                "best val acc {:.4} at epoch {}; checkpoint under {}",
                ckpt.best_val_acc,
                ckpt.epoch,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            schemas,
            manifest,
            ckpt,
            out,
            grammar,
            inject_wer,
        } => {
            let store = load_schema_store(&schemas)?;
            let g = grammar_from(&grammar)?;
            let opts = build_opts(seed);
            let mut insts = load_dataset(&manifest, &store, &g, &opts)?;
            if let Some(target) = inject_wer {
                let vocab = corpus::question_vocabulary(&store);
                let tts = PseudoTtsConfig {
                    seed,
                    ..Default::default()
                };
                for (i, inst) in insts.iter_mut().enumerate() {
                    let Some(t) = &inst.transcript else {
                        return Err(anyhow!("--inject-wer requires transcripts"));
                    };
                    let spec = NoiseSpec::new(target, seed.wrapping_add(i as u64), vocab.clone());
                    let noisy = inject_asr_noise(t, &spec)?;
                    inst.features = synth_pseudo_speech(&noisy, &tts)?;
                    inst.transcript = Some(noisy);
                }
            }
            let (params, meta) = Checkpoint::load(&ckpt)?;
            write_run_config(
                &out,
                seed,
                &serde_json::json!({"eval": {"manifest": manifest, "inject_wer": inject_wer}}),
            )?;
            let output = eval::evaluate(&params, &meta.config.model, &g, &store, &insts);
            output.write(&out)?;
            println!(
                "query_acc {:.4} (tpq {:.4}s over {} queries) -> {}",
                output.summary.query_acc,
                output.summary.tpq.mean_seconds,
                output.summary.tpq.n_queries,
                out.join("eval_report.json").display()
            );
            Ok(())
        }
        Command::Predict {
            schemas,
            audio,
            db_id,
            ckpt,
            grammar,
            values,
        } => {
            let store = load_schema_store(&schemas)?;
            let g = grammar_from(&grammar)?;
            let schema = store
                .get(&db_id)
                .ok_or_else(|| anyhow!("unknown db_id {db_id}"))?;
            let (params, meta) = Checkpoint::load(&ckpt)?;
            let tts = PseudoTtsConfig {
                seed,
                ..Default::default()
            };
            let features = if let Some(tokens) = audio.strip_prefix("pseudo:") {
                let tokens: Vec<String> =
                    tokens.split_whitespace().map(str::to_string).collect();
                synth_pseudo_speech(&tokens, &tts)?
            } else {
                let w = Waveform::read_wav(Path::new(&audio))?;
                extract_logmel(&w, false)?
            };
            let candidate_values: Vec<String> =
                values.split(',').map(|s| s.trim().to_string()).collect();
            let inst = speechsql::dataset::Instance {
                id: "predict".into(),
                features,
                db_id: db_id.clone(),
                transcript: None,
                gold_sql: String::new(),
                gold_actions: Vec::new(),
                candidate_values,
            };
            let bundle = SchemaBundle::build(schema);
            let mut sess = Session::new(&params);
            let z_s = model::encode_schema(&mut sess, &meta.config.model, &bundle.graph)
                .map_err(|e| anyhow!("{e}"))?;
            let enc = model::encode_instance(&mut sess, &meta.config.model, &inst, z_s, false, None)
                .map_err(|e| anyhow!("{e}"))?;
            let actions = model::decode_instance(
                &mut sess,
                &meta.config.model,
                &g,
                &bundle.inventory,
                &inst,
                &enc,
            )
            .map_err(|e| anyhow!("{e}"))?;
            let sql = actions_to_sql(&actions, schema, &g, &inst.candidate_values)
                .map_err(|e| anyhow!("{e}"))?;
            println!("{sql}");
            Ok(())
        }
        Command::Gradcheck { component, eps } => {
            let components: Vec<&str> = if component == "all" {
                train::GRAD_CHECK_COMPONENTS.to_vec()
            } else {
                vec![component.as_str()]
            };
            let mut worst = 0.0f64;
            for c in components {
                let err = train::grad_check(c, eps)?;
                worst = worst.max(err);
                println!(
                    "{c}: max rel err {err:.3e} {}",
                    if err < 1e-4 { "PASS" } else { "FAIL" }
                );
            }
            if worst >= 1e-4 {
                return Err(anyhow!("gradient check failed ({worst:.3e})"));
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
