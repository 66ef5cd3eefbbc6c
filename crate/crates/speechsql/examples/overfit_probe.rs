use speechsql::corpus;
use speechsql::dataset::{build_instance, BuildOptions, ManifestRecord};
use speechsql::semql::Grammar;
use speechsql::train::{train_loop, TrainConfig};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let d: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let epochs: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(60);
    let store = corpus::builtin_schema_store();
    let grammar = Grammar::builtin();
    let opts = BuildOptions::default();
    let examples = corpus::generate_balanced(&store, n, 17);
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
    println!("{} instances, d={d}, lr={lr}", insts.len());

    let mut cfg = TrainConfig::desk(d);
    cfg.lr = lr;
    cfg.max_epochs = epochs;
    cfg.eval_every = 5;
    cfg.model.fusion.dropout = 0.0;
    cfg.seed = 1;
    let t = std::time::Instant::now();
    let ckpt = train_loop(&insts, &insts, &cfg, &store, None, None).unwrap();
    for h in ckpt.history.iter().step_by(5) {
        println!("epoch {:3} loss {:8.4} acc {:.3}", h.epoch, h.train_loss, h.val_query_acc);
    }
    let last = ckpt.history.last().unwrap();
    println!("last epoch {} loss {:.4}; best acc {:.3} at {} | {:.0}s", last.epoch, last.train_loss, ckpt.best_val_acc, ckpt.epoch, t.elapsed().as_secs_f64());
}
