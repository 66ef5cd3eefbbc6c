use speechsql::corpus;
use speechsql::dataset::{build_instance, BuildOptions, ManifestRecord};
use speechsql::model::{self, SchemaBundle};
use speechsql::params::Session;
use speechsql::semql::{Action, Grammar};
use speechsql::decoder::{self, DecodeInputs};
use speechsql::train::{train_loop, TrainConfig};
use speechsql::tensor::mat;
use std::collections::HashMap;

fn main() {
    let store = corpus::builtin_schema_store();
    let grammar = Grammar::builtin();
    let opts = BuildOptions::default();
    let examples = corpus::generate_balanced(&store, 64, 17);
    let insts: Vec<_> = examples.iter().enumerate().map(|(i, ex)| {
        let rec = ManifestRecord {
            id: format!("o{i}"), db_id: ex.db_id.clone(),
            audio: format!("pseudo:{}", ex.question.join(" ")),
            transcript: Some(ex.question.join(" ")), sql: ex.sql.clone(),
        };
        build_instance(&rec, &store[&ex.db_id], &grammar, &opts).unwrap()
    }).collect();
    let mut cfg = TrainConfig::desk(128);
    cfg.lr = 3e-3; cfg.max_epochs = 80; cfg.eval_every = 20;
    cfg.model.fusion.dropout = 0.0; cfg.seed = 1;
    let ckpt = train_loop(&insts, &insts, &cfg, &store, None, None).unwrap();
    println!("last loss {:.4}", ckpt.history.last().unwrap().train_loss);

    // teacher-forced: per-family stats of gold probability and argmax hit
    let mut fam_p: HashMap<&str, (f64, usize)> = HashMap::new();
    let mut fam_hit: HashMap<&str, (usize, usize)> = HashMap::new();
    for inst in &insts {
        let schema = &store[&inst.db_id];
        let bundle = SchemaBundle::build(schema);
        let mut sess = Session::new(&ckpt.params);
        let z_s = model::encode_schema(&mut sess, &cfg.model, &bundle.graph).unwrap();
        let enc = model::encode_instance(&mut sess, &cfg.model, inst, z_s, false, None).unwrap();
        let inputs = DecodeInputs {
            z_a: enc.z_a, z_s: enc.z_s, value_emb: enc.value_emb,
            speech_mask: &enc.speech_mask, grammar: &grammar,
            inventory: &bundle.inventory, n_candidates: inst.candidate_values.len(),
        };
        let dcfg = cfg.model.decoder(&grammar);
        let mut state = decoder::init_state(&mut sess, &dcfg, &inputs).unwrap();
        for a in &inst.gold_actions {
            let dist = decoder::step(&mut sess, &dcfg, &inputs, &mut state).unwrap();
            let col = dist.index_of(a, bundle.inventory.n_tables);
            let row = mat(sess.tape.value(dist.probs));
            let p = row[[0, col]];
            let argmax = row.row(0).iter().enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap()).unwrap().0;
            let fam = match a {
                Action::ApplyRule(_) => "rule",
                Action::SelectColumn(_) => "column",
                Action::SelectTable(_) => "table",
                Action::SelectValue(_) => "value",
            };
            let e = fam_p.entry(fam).or_default();
            e.0 += p; e.1 += 1;
            let h = fam_hit.entry(fam).or_default();
            if argmax == col { h.0 += 1; }
            h.1 += 1;
            decoder::advance(&mut state, &grammar, *a);
        }
    }
    for fam in ["rule", "column", "table", "value"] {
        let (psum, n) = fam_p[fam];
        let (hits, total) = fam_hit[fam];
        println!("{fam:7} mean gold_p {:.3} argmax acc {}/{}", psum / n as f64, hits, total);
    }
}
