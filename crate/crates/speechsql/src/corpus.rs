//! Synthetic question/SQL corpus generation over the shipped schema store.
//!
//! Each example pairs a SQL query from a small template family with a
//! natural-language-style token sequence that mentions the referenced tables,
//! columns and literals, so pseudo-speech features carry enough signal to
//! learn schema linking and value pointing. Generation is exhaustive over
//! template slots, then seeded-shuffled, so corpora are reproducible and
//! train/held-out splits contain disjoint (question, schema) combinations.

use crate::schema::{ColumnType, Schema, SchemaStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BUILTIN_SCHEMAS: &str = include_str!("../assets/schemas.json");

/// The schema store shipped with the crate.
pub fn builtin_schema_store() -> SchemaStore {
    crate::schema::parse_schema_store(BUILTIN_SCHEMAS).expect("builtin schema store parses")
}

#[derive(Debug, Clone)]
pub struct GeneratedExample {
    pub db_id: String,
    pub sql: String,
    pub question: Vec<String>,
}

fn spoken_name(name: &str) -> Vec<String> {
    name.split('_')
        .filter(|p| !p.is_empty())
        .map(|p| p.to_ascii_lowercase())
        .collect()
}

fn agg_words(agg: &str) -> &'static [&'static str] {
    match agg {
        "min" => &["minimum"],
        "max" => &["maximum"],
        "avg" => &["average"],
        "sum" => &["total"],
        "count" => &["count", "of"],
        _ => &[],
    }
}

fn op_words(op: &str) -> &'static [&'static str] {
    match op {
        "=" => &["equal", "to"],
        "!=" => &["not", "equal", "to"],
        ">" => &["more", "than"],
        "<" => &["less", "than"],
        ">=" => &["at", "least"],
        "<=" => &["at", "most"],
        _ => &[],
    }
}

/// Deterministic per-column literal pool; values double as question tokens.
fn value_pool(schema: &Schema, table: &str, column: &str) -> Vec<String> {
    let ty = schema
        .table(table)
        .and_then(|t| t.columns.iter().find(|c| c.name == column))
        .map(|c| c.ty)
        .unwrap_or(ColumnType::Number);
    match ty {
        ColumnType::Number => {
            let h = crate::features::token_hash(&format!("{}.{}.{}", schema.db_id, table, column));
            let base = (h % 90) as i64 + 1;
            vec![
                "1".to_string(),
                base.to_string(),
                (base + 3).to_string(),
                (base * 2).to_string(),
            ]
        }
        ColumnType::Text => {
            let words = ["red", "blue", "green", "yellow", "north", "south"];
            let h = crate::features::token_hash(&format!("{}.{}", table, column)) as usize;
            vec![
                words[h % words.len()].to_string(),
                words[(h + 2) % words.len()].to_string(),
            ]
        }
    }
}

struct Sketch {
    sql: String,
    question: Vec<String>,
}

fn push_words(q: &mut Vec<String>, words: &[&str]) {
    q.extend(words.iter().map(|w| w.to_string()));
}

fn push_name(q: &mut Vec<String>, name: &str) {
    q.extend(spoken_name(name));
}

/// Enumerate every example a schema supports under the template family.
fn enumerate_schema(schema: &Schema) -> Vec<Sketch> {
    let mut out = Vec::new();
    for table in &schema.tables {
        let tname = &table.name;
        let num_cols: Vec<&str> = table
            .columns
            .iter()
            .filter(|c| c.ty == ColumnType::Number)
            .map(|c| c.name.as_str())
            .collect();
        let all_cols: Vec<&str> = table.columns.iter().map(|c| c.name.as_str()).collect();

        // plain projection: show the <col> of <table>
        for col in &all_cols {
            let mut q = vec!["show".to_string(), "the".to_string()];
            push_name(&mut q, col);
            q.push("of".into());
            push_name(&mut q, tname);
            out.push(Sketch {
                sql: format!("SELECT {col} FROM {tname}"),
                question: q,
            });
        }

        // aggregate projection: what is the <agg> <col> in <table>
        for col in &num_cols {
            for agg in ["min", "max", "avg", "sum"] {
                let mut q = vec!["what".into(), "is".into(), "the".into()];
                push_words(&mut q, agg_words(agg));
                push_name(&mut q, col);
                q.push("in".into());
                push_name(&mut q, tname);
                out.push(Sketch {
                    sql: format!("SELECT {}({col}) FROM {tname}", agg.to_uppercase()),
                    question: q,
                });
            }
        }

        // filtered: ... where <col2> <op> <value>
        for col in &all_cols {
            for col2 in &num_cols {
                if col2 == col {
                    continue;
                }
                for op in ["=", ">", "<"] {
                    for v in value_pool(schema, tname, col2).iter().take(2) {
                        let mut q = vec!["show".into(), "the".into()];
                        push_name(&mut q, col);
                        q.push("of".into());
                        push_name(&mut q, tname);
                        q.push("where".into());
                        push_name(&mut q, col2);
                        q.push("is".into());
                        push_words(&mut q, op_words(op));
                        q.push(v.clone());
                        out.push(Sketch {
                            sql: format!("SELECT {col} FROM {tname} WHERE {col2} {op} {v}"),
                            question: q,
                        });
                    }
                }
            }
        }

        // aggregate + filter: the two-clause shape of the running example
        for col in &num_cols {
            for col2 in &num_cols {
                if col2 == col {
                    continue;
                }
                for (agg, aggw) in [("min", "lowest"), ("max", "highest")] {
                    let v = value_pool(schema, tname, col2)[0].clone();
                    let mut q = vec!["what".into(), "is".into(), "the".into(), aggw.into()];
                    push_name(&mut q, col);
                    q.push("with".into());
                    push_words(&mut q, op_words(">"));
                    q.push(v.clone());
                    push_name(&mut q, col2);
                    out.push(Sketch {
                        sql: format!(
                            "SELECT {}({col}) FROM {tname} WHERE {col2} > {v}",
                            agg.to_uppercase()
                        ),
                        question: q,
                    });
                }
            }
        }

        // ordered: show the <col> of <table> ordered by <col2> <dir> [top k]
        for col in &all_cols {
            for col2 in &num_cols {
                if col2 == col {
                    continue;
                }
                for (dir, dirw) in [("ASC", "ascending"), ("DESC", "descending")] {
                    let mut q = vec!["show".into(), "the".into()];
                    push_name(&mut q, col);
                    q.push("of".into());
                    push_name(&mut q, tname);
                    q.push("ordered".into());
                    q.push("by".into());
                    push_name(&mut q, col2);
                    q.push(dirw.into());
                    let mut q2 = q.clone();
                    out.push(Sketch {
                        sql: format!("SELECT {col} FROM {tname} ORDER BY {col2} {dir}"),
                        question: q,
                    });
                    q2.push("top".into());
                    q2.push("3".into());
                    out.push(Sketch {
                        sql: format!("SELECT {col} FROM {tname} ORDER BY {col2} {dir} LIMIT 3"),
                        question: q2,
                    });
                }
            }
        }

        // conjunction: two numeric conditions
        if num_cols.len() >= 3 {
            let (c1, c2, c3) = (num_cols[0], num_cols[1], num_cols[2]);
            let v1 = value_pool(schema, tname, c2)[0].clone();
            let v2 = value_pool(schema, tname, c3)[1].clone();
            let mut q = vec!["show".into(), "the".into()];
            push_name(&mut q, c1);
            q.push("where".into());
            push_name(&mut q, c2);
            push_words(&mut q, op_words(">"));
            q.push(v1.clone());
            q.push("and".into());
            push_name(&mut q, c3);
            push_words(&mut q, op_words("<"));
            q.push(v2.clone());
            out.push(Sketch {
                sql: format!("SELECT {c1} FROM {tname} WHERE {c2} > {v1} AND {c3} < {v2}"),
                question: q,
            });
        }
    }

    // join templates over declared foreign keys
    for (st, _sc, dt, _dc) in &schema.foreign_keys {
        let (Some(src), Some(dst)) = (schema.table(st), schema.table(dt)) else {
            continue;
        };
        for col in src.columns.iter().take(3) {
            for col2 in dst.columns.iter().filter(|c| c.name != col.name).take(2) {
                let v = value_pool(schema, &dst.name, &col2.name)[0].clone();
                let mut q = vec!["show".into(), "the".into()];
                push_name(&mut q, &col.name);
                q.push("of".into());
                push_name(&mut q, &src.name);
                q.push("whose".into());
                push_name(&mut q, &col2.name);
                q.push("is".into());
                q.push(v.clone());
                out.push(Sketch {
                    sql: format!(
                        "SELECT T1.{} FROM {} AS T1 JOIN {} AS T2 WHERE T2.{} = {}",
                        col.name, src.name, dst.name, col2.name, v
                    ),
                    question: q,
                });
            }
        }
        // membership subquery over the shared key column
        let shared = schema
            .table(st)
            .and_then(|t| t.columns.iter().find(|c| schema.has_column(dt, &c.name)));
        if let Some(shared) = shared {
            for proj in src.columns.iter().filter(|c| c.name != shared.name).take(2) {
                let mut q = vec!["list".into(), "the".into()];
                push_name(&mut q, &proj.name);
                q.push("of".into());
                push_name(&mut q, &src.name);
                q.push("that".into());
                q.push("appear".into());
                q.push("in".into());
                push_name(&mut q, &dst.name);
                out.push(Sketch {
                    sql: format!(
                        "SELECT {} FROM {} WHERE {} IN (SELECT {} FROM {})",
                        proj.name, src.name, shared.name, shared.name, dst.name
                    ),
                    question: q,
                });
            }
        }
    }
    out
}

/// Generate `n` distinct examples across the store, seeded-shuffled.
pub fn generate(store: &SchemaStore, n: usize, seed: u64) -> Vec<GeneratedExample> {
    let mut all: Vec<GeneratedExample> = Vec::new();
    for (db_id, schema) in store {
        for sk in enumerate_schema(schema) {
            all.push(GeneratedExample {
                db_id: db_id.clone(),
                sql: sk.sql,
                question: sk.question,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(n);
    all
}

/// Sample `n` examples restricted to the most common question length band so
/// tiny corpora stay learnable; used by the overfit experiments.
pub fn generate_balanced(store: &SchemaStore, n: usize, seed: u64) -> Vec<GeneratedExample> {
    let mut all = generate(store, usize::MAX, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    // Prefer at least one example per schema before filling the rest.
    let mut picked: Vec<GeneratedExample> = Vec::new();
    let mut remaining: Vec<GeneratedExample> = Vec::new();
    let mut seen_db: std::collections::HashSet<String> = Default::default();
    for ex in all.drain(..) {
        if picked.len() < n && seen_db.insert(ex.db_id.clone()) {
            picked.push(ex);
        } else {
            remaining.push(ex);
        }
    }
    remaining.shuffle(&mut rng);
    while picked.len() < n {
        match remaining.pop() {
            Some(ex) => picked.push(ex),
            None => break,
        }
    }
    picked.shuffle(&mut rng);
    picked
}

/// Vocabulary of every question token the generator can emit; feeds the
/// noise injector.
pub fn question_vocabulary(store: &SchemaStore) -> Vec<String> {
    let mut vocab: std::collections::BTreeSet<String> = Default::default();
    for schema in store.values() {
        for sk in enumerate_schema(schema) {
            vocab.extend(sk.question);
        }
    }
    vocab.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_instance, BuildOptions, ManifestRecord};
    use crate::semql::{actions_to_sql, sql_to_actions_auto, Grammar};

    #[test]
    fn builtin_store_loads() {
        let store = builtin_schema_store();
        assert!(store.len() >= 10);
        assert!(store.contains_key("wimmera_db"));
        assert!(store.contains_key("products_db"));
    }

    #[test]
    fn generation_is_deterministic_and_distinct() {
        let store = builtin_schema_store();
        let a = generate(&store, 300, 1);
        let b = generate(&store, 300, 1);
        assert_eq!(a.len(), 300);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sql, y.sql);
            assert_eq!(x.question, y.question);
        }
        let distinct: std::collections::HashSet<(String, String)> = a
            .iter()
            .map(|e| (e.db_id.clone(), e.sql.clone()))
            .collect();
        assert!(distinct.len() > 250, "mostly distinct: {}", distinct.len());
    }

    /// Every generated query must be inside the supported subset and its
    /// gold actions must replay to an equivalent query.
    #[test]
    fn corpus_roundtrips_under_grammar() {
        let store = builtin_schema_store();
        let g = Grammar::builtin();
        let examples = generate(&store, 400, 3);
        assert!(examples.len() >= 350);
        for ex in &examples {
            let schema = &store[&ex.db_id];
            let (actions, values) = sql_to_actions_auto(&ex.sql, schema, &g)
                .unwrap_or_else(|e| panic!("{}: {e}", ex.sql));
            let printed = actions_to_sql(&actions, schema, &g, &values).unwrap();
            let m = crate::eval::query_match(&printed, &ex.sql, schema);
            assert!(m.exact, "{} vs {}", ex.sql, printed);
        }
    }

    /// Gold prefixes stay legal step by step on a full corpus (replay safety
    /// is exercised inside actions_to_sql, which checks every step).
    #[test]
    fn instances_build_from_generated_corpus() {
        let store = builtin_schema_store();
        let g = Grammar::builtin();
        let examples = generate(&store, 64, 5);
        for (i, ex) in examples.iter().enumerate() {
            let rec = ManifestRecord {
                id: format!("g{i}"),
                db_id: ex.db_id.clone(),
                audio: format!("pseudo:{}", ex.question.join(" ")),
                transcript: Some(ex.question.join(" ")),
                sql: ex.sql.clone(),
            };
            let inst = build_instance(&rec, &store[&ex.db_id], &g, &BuildOptions::default())
                .unwrap_or_else(|e| panic!("{}: {e}", ex.sql));
            assert!(inst.features.n_frames() >= 4);
        }
    }

    #[test]
    fn vocabulary_covers_values_and_names() {
        let store = builtin_schema_store();
        let v = question_vocabulary(&store);
        assert!(v.len() > 50);
        assert!(v.iter().any(|w| w == "draws"));
        assert!(v.iter().any(|w| w == "1"));
    }
}
