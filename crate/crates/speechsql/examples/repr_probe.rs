use speechsql::corpus;
use speechsql::dataset::{build_instance, BuildOptions, ManifestRecord};
use speechsql::model::{self, SchemaBundle};
use speechsql::params::Session;
use speechsql::semql::Grammar;
use speechsql::tensor::mat;
use speechsql::train::{train_loop, TrainConfig};

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
    cfg.lr = 3e-3; cfg.max_epochs = 100; cfg.eval_every = 10;
    cfg.model.fusion.dropout = 0.0; cfg.seed = 1;
    let ckpt = train_loop(&insts, &insts, &cfg, &store, None, None).unwrap();
    println!("using best params from epoch {}", ckpt.epoch);

    let inst = &insts[0];
    let schema = &store[&inst.db_id];
    let bundle = SchemaBundle::build(schema);
    let mut sess = Session::new(&ckpt.params);
    let z_s0 = model::encode_schema(&mut sess, &cfg.model, &bundle.graph).unwrap();
    let enc = model::encode_instance(&mut sess, &cfg.model, inst, z_s0, false, None).unwrap();
    let za = mat(sess.tape.value(enc.z_a)).to_owned();
    let zs = mat(sess.tape.value(enc.z_s)).to_owned();
    println!("db {}   Z_a {:?}  Z_s {:?}", inst.db_id, za.dim(), zs.dim());
    // row-to-row distances of Z_s
    for i in 0..zs.nrows() {
        let mut line = format!("zs row {i} [{}] norms:", bundle.graph.nodes[i].name);
        for j in 0..zs.nrows() {
            let d: f64 = (0..zs.ncols()).map(|k| (zs[[i,k]]-zs[[j,k]]).powi(2)).sum::<f64>().sqrt();
            line += &format!(" {d:.3}");
        }
        println!("{line}");
    }
    // Z_a first rows
    for i in 0..za.nrows().min(4) {
        let n: f64 = za.row(i).iter().map(|v| v*v).sum::<f64>().sqrt();
        println!("za row {i}: norm {n:.4} first4 {:?}", &za.row(i).to_vec()[..4]);
    }
    // value embeddings
    if let Some(ve) = enc.value_emb {
        let v = mat(sess.tape.value(ve)).to_owned();
        println!("values {:?}", inst.candidate_values);
        for i in 0..v.nrows() {
            let n: f64 = v.row(i).iter().map(|x| x*x).sum::<f64>().sqrt();
            println!("ve row {i} norm {n:.4} first3 {:?}", &v.row(i).to_vec()[..3]);
        }
    }
}
