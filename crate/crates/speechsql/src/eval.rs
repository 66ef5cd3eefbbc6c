//! Evaluation: decomposed query-match accuracy, word error rate, and
//! per-query timing.

use crate::schema::Schema;
use crate::semql::{self, Cond, Dir, QueryExpr, SelectCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty reference transcript")]
    EmptyReference,
    #[error("checkpoint does not match the model configuration: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Query match
// ---------------------------------------------------------------------------

/// Decomposed comparison of a predicted query against the gold query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchReport {
    pub exact: bool,
    pub select_columns: bool,
    pub aggregators: bool,
    pub conditions: bool,
    pub structure: bool,
}

impl MatchReport {
    fn all(v: bool) -> Self {
        Self {
            exact: v,
            select_columns: v,
            aggregators: v,
            conditions: v,
            structure: v,
        }
    }
}

fn norm_value(v: &str) -> String {
    match v.parse::<f64>() {
        Ok(x) => format!("{x:?}"),
        Err(_) => v.to_string(),
    }
}

/// Stable serialization of a condition for multiset comparison. Identifiers
/// are lowercased, values numerically normalized, AND-chains sorted, and
/// subquery cores serialized recursively with the same rules.
fn cond_sig(c: &Cond) -> String {
    match c {
        Cond::And(..) => {
            let mut parts: Vec<String> = and_conjuncts(c).iter().map(|c| cond_sig(c)).collect();
            parts.sort();
            format!("and({})", parts.join(","))
        }
        Cond::Or(a, b) => format!("or({},{})", cond_sig(a), cond_sig(b)),
        Cond::Not(a) => format!("not({})", cond_sig(a)),
        Cond::Cmp { item, op, value } => format!(
            "cmp({},{},{},{})",
            item.column.to_ascii_lowercase(),
            item.table.to_ascii_lowercase(),
            op.terminal(),
            norm_value(value)
        ),
        Cond::Between { item, lo, hi } => format!(
            "between({},{},{},{})",
            item.column.to_ascii_lowercase(),
            item.table.to_ascii_lowercase(),
            norm_value(lo),
            norm_value(hi)
        ),
        Cond::Sub { item, op, sub } => format!(
            "sub({},{},{},{})",
            item.column.to_ascii_lowercase(),
            item.table.to_ascii_lowercase(),
            op.terminal(),
            core_sig(sub)
        ),
    }
}

fn and_conjuncts(c: &Cond) -> Vec<&Cond> {
    match c {
        Cond::And(a, b) => {
            let mut out = and_conjuncts(a);
            out.extend(and_conjuncts(b));
            out
        }
        other => vec![other],
    }
}

fn core_sig(core: &SelectCore) -> String {
    let items: Vec<String> = core
        .items
        .iter()
        .map(|it| {
            format!(
                "{}:{}.{}",
                it.agg.terminal(),
                it.table.to_ascii_lowercase(),
                it.column.to_ascii_lowercase()
            )
        })
        .collect();
    let filter = core.filter.as_ref().map(cond_sig).unwrap_or_default();
    let order = core
        .order
        .as_ref()
        .map(|o| {
            format!(
                "{}:{}:{}.{}:{}",
                match o.dir {
                    Dir::Asc => "asc",
                    Dir::Desc => "desc",
                },
                o.item.agg.terminal(),
                o.item.table.to_ascii_lowercase(),
                o.item.column.to_ascii_lowercase(),
                o.limit.as_deref().map(norm_value).unwrap_or_default()
            )
        })
        .unwrap_or_default();
    format!("core(sel=[{}];where={};order={})", items.join(","), filter, order)
}

fn match_cores(pred: &SelectCore, gold: &SelectCore) -> MatchReport {
    let select_columns = pred.items.len() == gold.items.len()
        && pred.items.iter().zip(&gold.items).all(|(p, g)| {
            p.column.eq_ignore_ascii_case(&g.column) && p.table.eq_ignore_ascii_case(&g.table)
        });
    let aggregators = pred.items.len() == gold.items.len()
        && pred
            .items
            .iter()
            .zip(&gold.items)
            .all(|(p, g)| p.agg == g.agg);
    let conditions = match (&pred.filter, &gold.filter) {
        (None, None) => true,
        (Some(p), Some(g)) => {
            // Multiset comparison of top-level AND conjuncts.
            let mut ps: Vec<String> = and_conjuncts(p).iter().map(|c| cond_sig(c)).collect();
            let mut gs: Vec<String> = and_conjuncts(g).iter().map(|c| cond_sig(c)).collect();
            ps.sort();
            gs.sort();
            ps == gs
        }
        _ => false,
    };
    let structure = pred.filter.is_some() == gold.filter.is_some()
        && match (&pred.order, &gold.order) {
            (None, None) => true,
            (Some(p), Some(g)) => {
                p.dir == g.dir
                    && p.item.agg == g.item.agg
                    && p.item.column.eq_ignore_ascii_case(&g.item.column)
                    && p.item.table.eq_ignore_ascii_case(&g.item.table)
                    && match (&p.limit, &g.limit) {
                        (None, None) => true,
                        (Some(a), Some(b)) => norm_value(a) == norm_value(b),
                        _ => false,
                    }
            }
            _ => false,
        };
    let exact = select_columns && aggregators && conditions && structure;
    MatchReport {
        exact,
        select_columns,
        aggregators,
        conditions,
        structure,
    }
}

fn merge(a: MatchReport, b: MatchReport) -> MatchReport {
    let select_columns = a.select_columns && b.select_columns;
    let aggregators = a.aggregators && b.aggregators;
    let conditions = a.conditions && b.conditions;
    let structure = a.structure && b.structure;
    MatchReport {
        exact: select_columns && aggregators && conditions && structure,
        select_columns,
        aggregators,
        conditions,
        structure,
    }
}

/// Compare two SQL strings. WHERE conjuncts are compared as a multiset,
/// identifiers case-insensitively, literals after numeric normalization.
/// A prediction that does not parse scores all-false rather than erroring.
pub fn query_match(pred_sql: &str, gold_sql: &str, schema: &Schema) -> MatchReport {
    let Ok(gold) = semql::parse_query(gold_sql, schema) else {
        return MatchReport::all(false);
    };
    let Ok(pred) = semql::parse_query(pred_sql, schema) else {
        return MatchReport::all(false);
    };
    match (&pred, &gold) {
        (QueryExpr::Simple(p), QueryExpr::Simple(g)) => match_cores(p, g),
        (QueryExpr::Intersect(p1, p2), QueryExpr::Intersect(g1, g2))
        | (QueryExpr::Union(p1, p2), QueryExpr::Union(g1, g2))
        | (QueryExpr::Except(p1, p2), QueryExpr::Except(g1, g2)) => {
            merge(match_cores(p1, g1), match_cores(p2, g2))
        }
        _ => {
            // Different set-op structure: nothing lines up.
            MatchReport::all(false)
        }
    }
}

// ---------------------------------------------------------------------------
// Word error rate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

/// Minimum-edit alignment with unit costs via dynamic programming; S/D/I are
/// read off one optimal alignment, breaking ties in favour of substitution,
/// then deletion, then insertion.
pub fn wer(reference: &[String], hypothesis: &[String]) -> Result<WerReport, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[i - 1][j] + 1;
            let ins = d[i][j - 1] + 1;
            d[i][j] = sub.min(del).min(ins);
        }
    }
    // Backtrace one optimal alignment.
    let (mut i, mut j) = (n, m);
    let (mut s, mut del, mut ins) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + sub_cost {
                s += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            del += 1;
            i -= 1;
            continue;
        }
        ins += 1;
        j -= 1;
    }
    debug_assert_eq!(s + del + ins, d[n][m]);
    Ok(WerReport {
        wer: (s + del + ins) as f64 / n as f64,
        substitutions: s,
        deletions: del,
        insertions: ins,
        ref_len: n,
    })
}

/// Split a transcript on whitespace, lowercased.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TpqReport {
    pub mean_seconds: f64,
    pub n_queries: usize,
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalDetail {
    pub id: String,
    pub pred_sql: String,
    pub gold_sql: String,
    pub exact: bool,
    pub select_columns: bool,
    pub aggregators: bool,
    pub conditions: bool,
    pub structure: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub query_acc: f64,
    pub select_columns_acc: f64,
    pub aggregators_acc: f64,
    pub conditions_acc: f64,
    pub structure_acc: f64,
    pub tpq: TpqReport,
}

pub struct EvalOutput {
    pub summary: EvalSummary,
    pub details: Vec<EvalDetail>,
}

/// Decode every instance greedily, score it with [`query_match`], and time
/// each decode with a monotonic clock. Undecodable or unparseable
/// predictions score as mismatches; evaluation is total.
pub fn evaluate(
    params: &crate::params::ParamStore,
    cfg: &crate::model::ModelConfig,
    grammar: &crate::semql::Grammar,
    schemas: &crate::schema::SchemaStore,
    instances: &[crate::dataset::Instance],
) -> EvalOutput {
    use crate::model::{self, SchemaBundle};
    let mut details = Vec::with_capacity(instances.len());
    let mut bundles: std::collections::HashMap<String, SchemaBundle> = Default::default();
    let mut total_seconds = 0.0;
    for inst in instances {
        let schema = &schemas[&inst.db_id];
        let bundle = bundles
            .entry(inst.db_id.clone())
            .or_insert_with(|| SchemaBundle::build(schema));
        let started = std::time::Instant::now();
        let pred_sql = (|| {
            let mut sess = crate::params::Session::new(params);
            let z_s = model::encode_schema(&mut sess, cfg, &bundle.graph).ok()?;
            let enc = model::encode_instance(&mut sess, cfg, inst, z_s, false, None).ok()?;
            let actions =
                model::decode_instance(&mut sess, cfg, grammar, &bundle.inventory, inst, &enc)
                    .ok()?;
            crate::semql::actions_to_sql(&actions, schema, grammar, &inst.candidate_values).ok()
        })()
        .unwrap_or_default();
        let seconds = started.elapsed().as_secs_f64();
        total_seconds += seconds;
        let m = query_match(&pred_sql, &inst.gold_sql, schema);
        details.push(EvalDetail {
            id: inst.id.clone(),
            pred_sql,
            gold_sql: inst.gold_sql.clone(),
            exact: m.exact,
            select_columns: m.select_columns,
            aggregators: m.aggregators,
            conditions: m.conditions,
            structure: m.structure,
            seconds,
        });
    }
    let n = instances.len().max(1) as f64;
    let frac = |f: fn(&EvalDetail) -> bool| details.iter().filter(|d| f(d)).count() as f64 / n;
    let summary = EvalSummary {
        query_acc: frac(|d| d.exact),
        select_columns_acc: frac(|d| d.select_columns),
        aggregators_acc: frac(|d| d.aggregators),
        conditions_acc: frac(|d| d.conditions),
        structure_acc: frac(|d| d.structure),
        tpq: TpqReport {
            mean_seconds: total_seconds / n,
            n_queries: instances.len(),
        },
    };
    EvalOutput { summary, details }
}

impl EvalOutput {
    /// Write `eval_report.json` and `eval_details.csv` under a directory.
    pub fn write(&self, dir: &std::path::Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("eval_report.json"),
            serde_json::to_string_pretty(&self.summary).expect("summary serializes"),
        )?;
        let mut w = csv::Writer::from_path(dir.join("eval_details.csv"))
            .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
        w.write_record([
            "id", "pred_sql", "gold_sql", "exact", "select_columns", "aggregators",
            "conditions", "structure", "seconds",
        ])
        .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
        for d in &self.details {
            w.write_record([
                d.id.clone(),
                d.pred_sql.clone(),
                d.gold_sql.clone(),
                d.exact.to_string(),
                d.select_columns.to_string(),
                d.aggregators.to_string(),
                d.conditions.to_string(),
                d.structure.to_string(),
                format!("{:.6}", d.seconds),
            ])
            .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accuracy of predicting, for every instance, the most frequent gold SQL of
/// its schema in the training set (global majority as fallback). The
/// reference baseline for generalization experiments.
pub fn majority_baseline_accuracy(
    train: &[crate::dataset::Instance],
    heldout: &[crate::dataset::Instance],
    schemas: &crate::schema::SchemaStore,
) -> f64 {
    use std::collections::HashMap;
    let mut per_db: HashMap<&str, HashMap<&str, usize>> = HashMap::new();
    let mut global: HashMap<&str, usize> = HashMap::new();
    for inst in train {
        *per_db
            .entry(inst.db_id.as_str())
            .or_default()
            .entry(inst.gold_sql.as_str())
            .or_default() += 1;
        *global.entry(inst.gold_sql.as_str()).or_default() += 1;
    }
    let pick = |m: &HashMap<&str, usize>| -> Option<String> {
        m.iter()
            .max_by_key(|(sql, count)| (**count, std::cmp::Reverse(**sql)))
            .map(|(sql, _)| sql.to_string())
    };
    let global_majority = pick(&global);
    if heldout.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for inst in heldout {
        let pred = per_db
            .get(inst.db_id.as_str())
            .and_then(|m| pick(m))
            .or_else(|| global_majority.clone());
        if let Some(pred) = pred {
            let schema = &schemas[&inst.db_id];
            if query_match(&pred, &inst.gold_sql, schema).exact {
                hits += 1;
            }
        }
    }
    hits as f64 / heldout.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semql::tests::wimmera_schema;

    fn w(s: &str) -> Vec<String> {
        words(s)
    }

    #[test]
    fn wer_identical_and_empty_hyp() {
        let r = wer(&w("a b c"), &w("a b c")).unwrap();
        assert_eq!(r.wer, 0.0);
        assert_eq!(
            (r.substitutions, r.deletions, r.insertions),
            (0, 0, 0)
        );
        let r = wer(&w("a b c"), &[]).unwrap();
        assert_eq!(r.wer, 1.0);
        assert_eq!(r.deletions, 3);
        assert!(matches!(wer(&[], &w("a")), Err(EvalError::EmptyReference)));
    }

    #[test]
    fn wer_single_deletion() {
        // Brute force over the 3x2 case confirms one deletion is optimal.
        let r = wer(&w("a b c"), &w("a c")).unwrap();
        assert_eq!(r.deletions, 1);
        assert_eq!(r.substitutions, 0);
        assert_eq!(r.insertions, 0);
        assert!((r.wer - 1.0 / 3.0).abs() < 1e-12);
    }

    /// Exhaustive-alignment oracle: minimum edits by full recursion, no DP.
    pub(crate) fn brute_force_edits(r: &[String], h: &[String]) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        let sub = brute_force_edits(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
        let del = brute_force_edits(&r[1..], h) + 1;
        let ins = brute_force_edits(r, &h[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn wer_matches_brute_force_short() {
        let alphabet = ["a", "b", "c"];
        let mut seqs: Vec<Vec<String>> = vec![vec![]];
        for len in 1..=3usize {
            let mut level: Vec<Vec<String>> = vec![vec![]];
            for _ in 0..len {
                level = level
                    .into_iter()
                    .flat_map(|s| {
                        alphabet.iter().map(move |a| {
                            let mut s = s.clone();
                            s.push(a.to_string());
                            s
                        })
                    })
                    .collect();
            }
            seqs.extend(level);
        }
        for r in seqs.iter().filter(|s| !s.is_empty()) {
            for h in &seqs {
                let got = wer(r, h).unwrap();
                let edits = got.substitutions + got.deletions + got.insertions;
                assert_eq!(edits, brute_force_edits(r, h), "{r:?} vs {h:?}");
            }
        }
    }

    #[test]
    fn wer_case_study_pair() {
        let reference = w("what is the lowest number of draws with more than 1 byes");
        let hypothesis = w("what is the lowest number of drawers with more than one bites");
        let r = wer(&reference, &hypothesis).unwrap();
        assert_eq!(r.ref_len, 12);
        assert_eq!(r.substitutions, 3);
        assert_eq!(r.deletions, 0);
        assert_eq!(r.insertions, 0);
        assert!((r.wer - 0.25).abs() < 1e-12);
    }

    #[test]
    fn match_identical_and_permuted_conditions() {
        let schema = wimmera_schema();
        let a = "SELECT wins FROM wimmera WHERE byes = 1 AND draws = 2";
        let b = "SELECT wins FROM wimmera WHERE draws = 2 AND byes = 1";
        assert!(query_match(a, a, &schema).exact);
        assert!(query_match(a, b, &schema).exact);
    }

    #[test]
    fn match_aggregator_mismatch() {
        let schema = wimmera_schema();
        let a = "SELECT MIN(draws) FROM wimmera WHERE byes > 1";
        let b = "SELECT MAX(draws) FROM wimmera WHERE byes > 1";
        let r = query_match(a, b, &schema);
        assert!(!r.exact);
        assert!(!r.aggregators);
        assert!(r.select_columns);
        assert!(r.conditions);
        assert!(r.structure);
    }

    #[test]
    fn match_numeric_normalization_and_case() {
        let schema = wimmera_schema();
        let a = "SELECT wins FROM WIMMERA WHERE byes = 1.0";
        let b = "SELECT wins FROM wimmera WHERE BYES = 1";
        assert!(query_match(a, b, &schema).exact);
    }

    #[test]
    fn unparseable_prediction_scores_false() {
        let schema = wimmera_schema();
        let r = query_match("SELEC nonsense", "SELECT wins FROM wimmera", &schema);
        assert_eq!(r, MatchReport::all(false));
    }
}
