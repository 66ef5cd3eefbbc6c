use speechsql::corpus;
use speechsql::dataset::{build_instance, BuildOptions, ManifestRecord};
use speechsql::model::{self, SchemaBundle};
use speechsql::params::Session;
use speechsql::semql::{actions_to_sql, Grammar};
use speechsql::train::{train_loop, TrainConfig};
use speechsql::eval::query_match;

fn main() {
    let store = corpus::builtin_schema_store();
    let grammar = Grammar::builtin();
    let opts = BuildOptions::default();
    let examples = corpus::generate_balanced(&store, 64, 17);
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
    let mut cfg = TrainConfig::desk(128);
    cfg.lr = 3e-3; cfg.max_epochs = 80; cfg.eval_every = 10;
    cfg.model.fusion.dropout = 0.0; cfg.seed = 1;
    let ckpt = train_loop(&insts, &insts, &cfg, &store, None, None).unwrap();
    println!("best acc (inference bn): {:.3}", ckpt.best_val_acc);

    for training in [false, true] {
        let mut hits = 0;
        for inst in &insts {
            let schema = &store[&inst.db_id];
            let bundle = SchemaBundle::build(schema);
            let mut sess = Session::new(&ckpt.params);
            let z_s = model::encode_schema(&mut sess, &cfg.model, &bundle.graph).unwrap();
            let enc = model::encode_instance(&mut sess, &cfg.model, inst, z_s, training, None).unwrap();
            if let Ok(actions) = model::decode_instance(&mut sess, &cfg.model, &grammar, &bundle.inventory, inst, &enc) {
                if let Ok(sql) = actions_to_sql(&actions, schema, &grammar, &inst.candidate_values) {
                    if query_match(&sql, &inst.gold_sql, schema).exact { hits += 1; }
                }
            }
        }
        println!("greedy acc with training_bn={training}: {}/{}", hits, insts.len());
    }
}
