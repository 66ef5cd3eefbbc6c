use speechsql::corpus;
use speechsql::dataset::{build_instance, BuildOptions, ManifestRecord};
use speechsql::model::{self, SchemaBundle};
use speechsql::params::Session;
use speechsql::semql::Grammar;
use speechsql::train::{train_loop, TrainConfig};
use speechsql::decoder::{self, DecodeInputs};

fn main() {
    let store = corpus::builtin_schema_store();
    let grammar = Grammar::builtin();
    let opts = BuildOptions::default();
    let examples = corpus::generate_balanced(&store, 4, 17);
    let insts: Vec<_> = examples.iter().enumerate().map(|(i, ex)| {
        let rec = ManifestRecord {
            id: format!("o{i}"),
            db_id: ex.db_id.clone(),
            audio: format!("pseudo:{}", ex.question.join(" ")),
            transcript: Some(ex.question.join(" ")),
            sql: ex.sql.clone(),
        };
        build_instance(&rec, &store[&ex.db_id], &grammar, &opts).unwrap()
    }).collect();
    let mut cfg = TrainConfig::desk(64);
    cfg.lr = 3e-3;
    cfg.max_epochs = 150;
    cfg.eval_every = 10;
    cfg.model.fusion.dropout = 0.0;
    cfg.seed = 1;
    let ckpt = train_loop(&insts, &insts, &cfg, &store, None, None).unwrap();

    for inst in &insts {
        println!("== {} gold: {}", inst.id, inst.gold_sql);
        let schema = &store[&inst.db_id];
        let bundle = SchemaBundle::build(schema);
        let mut sess = Session::new(&ckpt.params);
        let z_s = model::encode_schema(&mut sess, &cfg.model, &bundle.graph).unwrap();
        let enc = model::encode_instance(&mut sess, &cfg.model, inst, z_s, false, None).unwrap();
        // teacher-forced per-step gold probabilities
        let inputs = DecodeInputs {
            z_a: enc.z_a, z_s: enc.z_s, value_emb: enc.value_emb,
            speech_mask: &enc.speech_mask, grammar: &grammar,
            inventory: &bundle.inventory, n_candidates: inst.candidate_values.len(),
        };
        let dcfg = cfg.model.decoder(&grammar);
        let mut state = decoder::init_state(&mut sess, &dcfg, &inputs).unwrap();
        for (i, a) in inst.gold_actions.iter().enumerate() {
            let dist = decoder::step(&mut sess, &dcfg, &inputs, &mut state).unwrap();
            let col = dist.index_of(a, bundle.inventory.n_tables);
            let p = speechsql::tensor::mat(sess.tape.value(dist.probs))[[0, col]];
            let k = dist.mask.count();
            println!("  step {i:2} {a:?} gold_p={p:.3} k={k}");
            decoder::advance(&mut state, &grammar, *a);
        }
        let actions = model::decode_instance(&mut sess, &cfg.model, &grammar, &bundle.inventory, inst, &enc).unwrap();
        let same = actions == inst.gold_actions;
        println!("  greedy == gold: {same}");
        if !same {
            for (i, (g, p)) in inst.gold_actions.iter().zip(&actions).enumerate() {
                if g != p { println!("    step {i}: gold {g:?} pred {p:?}"); }
            }
        }
    }
}
