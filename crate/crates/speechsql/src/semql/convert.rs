//! Bidirectional conversion between SQL text and action sequences.
//!
//! `sql_to_actions` parses SQL, canonically orders AND-conjuncts (by column,
//! operator, then value) so label extraction is deterministic, and emits the
//! pre-order action list. `actions_to_sql` replays an action list into a tree
//! and prints canonical SQL.

use super::sql::{self, Agg, CmpOp, Cond, Dir, OrderClause, QueryExpr, SelectCore, SelectItem, SubOp};
use super::{
    Action, ActionSequence, ColumnInventory, Grammar, SemqlError, SemqlTree, Symbol, TreeNode,
    MAX_STEPS_DEFAULT,
};
use crate::schema::Schema;

/// Distinct literals of a query in order of first appearance.
pub fn extract_literals(sql: &str, schema: &Schema) -> Result<Vec<String>, SemqlError> {
    let q = sql::parse_sql(sql, schema)?;
    let mut out: Vec<String> = Vec::new();
    let mut push = |v: &str| {
        if !out.iter().any(|x| x == v) {
            out.push(v.to_string());
        }
    };
    fn walk_cond(c: &Cond, push: &mut dyn FnMut(&str)) {
        match c {
            Cond::And(a, b) | Cond::Or(a, b) => {
                walk_cond(a, push);
                walk_cond(b, push);
            }
            Cond::Not(a) => walk_cond(a, push),
            Cond::Cmp { value, .. } => push(value),
            Cond::Between { lo, hi, .. } => {
                push(lo);
                push(hi);
            }
            Cond::Sub { sub, .. } => walk_core(sub, push),
        }
    }
    fn walk_core(core: &SelectCore, push: &mut dyn FnMut(&str)) {
        if let Some(f) = &core.filter {
            walk_cond(f, push);
        }
        if let Some(o) = &core.order {
            if let Some(l) = &o.limit {
                push(l);
            }
        }
    }
    for core in q.cores() {
        walk_core(core, &mut push);
    }
    Ok(out)
}

fn numeric_eq(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0),
        _ => false,
    }
}

fn value_index(value: &str, candidates: &[String]) -> Result<usize, SemqlError> {
    if let Some(i) = candidates.iter().position(|c| c == value) {
        return Ok(i);
    }
    candidates
        .iter()
        .position(|c| numeric_eq(c, value))
        .ok_or_else(|| SemqlError::UnknownValue(value.to_string()))
}

/// Sort key for canonical conjunct ordering.
fn cond_key(c: &Cond) -> (u8, String, String, String) {
    match c {
        Cond::Cmp { item, op, value } => (
            0,
            item.column.to_ascii_lowercase(),
            op.terminal().to_string(),
            value.clone(),
        ),
        Cond::Between { item, lo, hi } => (
            0,
            item.column.to_ascii_lowercase(),
            "between".to_string(),
            format!("{lo}\u{1}{hi}"),
        ),
        Cond::Sub { item, op, .. } => (
            1,
            item.column.to_ascii_lowercase(),
            op.terminal().to_string(),
            String::new(),
        ),
        Cond::Or(..) => (2, String::new(), String::new(), String::new()),
        Cond::Not(..) => (3, String::new(), String::new(), String::new()),
        Cond::And(..) => (4, String::new(), String::new(), String::new()),
    }
}

/// Canonicalize a condition tree: children first, then flatten AND chains and
/// re-nest them right-associatively in sorted order.
fn canonicalize(c: Cond) -> Cond {
    match c {
        Cond::And(a, b) => {
            let mut leaves = Vec::new();
            fn flatten(c: Cond, out: &mut Vec<Cond>) {
                match c {
                    Cond::And(a, b) => {
                        flatten(*a, out);
                        flatten(*b, out);
                    }
                    other => out.push(canonicalize(other)),
                }
            }
            flatten(Cond::And(a, b), &mut leaves);
            leaves.sort_by_key(cond_key);
            let mut it = leaves.into_iter().rev();
            let mut acc = it.next().unwrap();
            for c in it {
                acc = Cond::And(Box::new(c), Box::new(acc));
            }
            acc
        }
        Cond::Or(a, b) => Cond::Or(Box::new(canonicalize(*a)), Box::new(canonicalize(*b))),
        Cond::Not(a) => Cond::Not(Box::new(canonicalize(*a))),
        leaf => leaf,
    }
}

struct Emitter<'a> {
    grammar: &'a Grammar,
    inventory: ColumnInventory,
    schema: &'a Schema,
    candidates: &'a [String],
    out: ActionSequence,
}

impl<'a> Emitter<'a> {
    fn rule(&mut self, lhs: &str, rhs: &[&str]) -> Result<(), SemqlError> {
        let p = self.grammar.find_production(lhs, rhs).ok_or_else(|| {
            SemqlError::UnsupportedSQL(format!("grammar has no production {lhs} := {rhs:?}"))
        })?;
        self.out.push(Action::ApplyRule(p));
        Ok(())
    }

    fn item(&mut self, item: &SelectItem) -> Result<(), SemqlError> {
        self.rule("A", &[item.agg.terminal(), "C", "T"])?;
        let col = self
            .inventory
            .index_of(&item.column)
            .ok_or_else(|| SemqlError::UnknownColumn(item.column.clone()))?;
        self.out.push(Action::SelectColumn(col));
        let table = self
            .schema
            .table_index(&item.table)
            .ok_or_else(|| SemqlError::UnknownTable(item.table.clone()))?;
        self.out.push(Action::SelectTable(table));
        Ok(())
    }

    fn value(&mut self, v: &str) -> Result<(), SemqlError> {
        let i = value_index(v, self.candidates)?;
        self.out.push(Action::SelectValue(i));
        Ok(())
    }

    fn cond(&mut self, c: &Cond) -> Result<(), SemqlError> {
        match c {
            Cond::And(a, b) => {
                self.rule("Filter", &["and", "Filter", "Filter"])?;
                self.cond(a)?;
                self.cond(b)
            }
            Cond::Or(a, b) => {
                self.rule("Filter", &["or", "Filter", "Filter"])?;
                self.cond(a)?;
                self.cond(b)
            }
            Cond::Not(a) => {
                self.rule("Filter", &["not", "Filter"])?;
                self.cond(a)
            }
            Cond::Cmp { item, op, value } => {
                self.rule("Filter", &[op.terminal(), "A", "V"])?;
                self.item(item)?;
                self.value(value)
            }
            Cond::Between { item, lo, hi } => {
                self.rule("Filter", &["between", "A", "V", "V"])?;
                self.item(item)?;
                self.value(lo)?;
                self.value(hi)
            }
            Cond::Sub { item, op, sub } => {
                self.rule("Filter", &[op.terminal(), "A", "R"])?;
                self.item(item)?;
                self.core(sub)
            }
        }
    }

    fn core(&mut self, core: &SelectCore) -> Result<(), SemqlError> {
        let rhs: Vec<&str> = match (&core.filter, &core.order) {
            (None, None) => vec!["Select"],
            (Some(_), None) => vec!["Select", "Filter"],
            (None, Some(_)) => vec!["Select", "Order"],
            (Some(_), Some(_)) => vec!["Select", "Filter", "Order"],
        };
        self.rule("R", &rhs)?;
        let select_rhs: Vec<&str> = core.items.iter().map(|_| "A").collect();
        self.rule("Select", &select_rhs)?;
        for item in &core.items {
            self.item(item)?;
        }
        if let Some(f) = &core.filter {
            self.cond(f)?;
        }
        if let Some(o) = &core.order {
            let dir = match o.dir {
                Dir::Asc => "asc",
                Dir::Desc => "desc",
            };
            match &o.limit {
                None => {
                    self.rule("Order", &[dir, "A"])?;
                    self.item(&o.item)?;
                }
                Some(l) => {
                    self.rule("Order", &[dir, "A", "limit", "V"])?;
                    self.item(&o.item)?;
                    self.value(l)?;
                }
            }
            Ok(())
        } else {
            Ok(())
        }
    }
}

/// Convert SQL to its gold action sequence; literals are looked up in
/// `candidates` (exact match first, then numeric equality).
pub fn sql_to_actions(
    sql: &str,
    schema: &Schema,
    grammar: &Grammar,
    candidates: &[String],
) -> Result<ActionSequence, SemqlError> {
    let q = sql::parse_sql(sql, schema)?;
    let q = match q {
        QueryExpr::Simple(c) => QueryExpr::Simple(canon_core(c)),
        QueryExpr::Intersect(a, b) => QueryExpr::Intersect(canon_core(a), canon_core(b)),
        QueryExpr::Union(a, b) => QueryExpr::Union(canon_core(a), canon_core(b)),
        QueryExpr::Except(a, b) => QueryExpr::Except(canon_core(a), canon_core(b)),
    };
    let mut em = Emitter {
        grammar,
        inventory: ColumnInventory::build(schema),
        schema,
        candidates,
        out: Vec::new(),
    };
    match &q {
        QueryExpr::Simple(a) => {
            em.rule("Z", &["R"])?;
            em.core(a)?;
        }
        QueryExpr::Intersect(a, b) => {
            em.rule("Z", &["intersect", "R", "R"])?;
            em.core(a)?;
            em.core(b)?;
        }
        QueryExpr::Union(a, b) => {
            em.rule("Z", &["union", "R", "R"])?;
            em.core(a)?;
            em.core(b)?;
        }
        QueryExpr::Except(a, b) => {
            em.rule("Z", &["except", "R", "R"])?;
            em.core(a)?;
            em.core(b)?;
        }
    }
    Ok(em.out)
}

fn canon_core(mut c: SelectCore) -> SelectCore {
    fn canon_sub(c: &mut Cond) {
        if let Cond::Sub { sub, .. } = c {
            **sub = canon_core((**sub).clone());
        }
        match c {
            Cond::And(a, b) | Cond::Or(a, b) => {
                canon_sub(a);
                canon_sub(b);
            }
            Cond::Not(a) => canon_sub(a),
            _ => {}
        }
    }
    c.filter = c.filter.map(|f| {
        let mut f = canonicalize(f);
        canon_sub(&mut f);
        f
    });
    c
}

/// Convenience wrapper: candidates are the query's own literals.
pub fn sql_to_actions_auto(
    sql: &str,
    schema: &Schema,
    grammar: &Grammar,
) -> Result<(ActionSequence, Vec<String>), SemqlError> {
    let candidates = extract_literals(sql, schema)?;
    let actions = sql_to_actions(sql, schema, grammar, &candidates)?;
    Ok((actions, candidates))
}

// ---------------------------------------------------------------------------
// Tree -> AST -> SQL
// ---------------------------------------------------------------------------

struct Reader<'a> {
    grammar: &'a Grammar,
    inventory: &'a ColumnInventory,
    schema: &'a Schema,
    candidates: &'a [String],
}

impl<'a> Reader<'a> {
    fn prod_terminals(&self, p: usize) -> Vec<&str> {
        self.grammar.productions[p]
            .rhs
            .iter()
            .filter_map(|s| match s {
                Symbol::Terminal(t) => Some(t.as_str()),
                Symbol::NonTerminal(_) => None,
            })
            .collect()
    }

    fn bad(&self, what: &str) -> SemqlError {
        SemqlError::UnsupportedSQL(format!("derivation tree has unexpected {what}"))
    }

    fn read_item(&self, node: &TreeNode) -> Result<SelectItem, SemqlError> {
        let TreeNode::Rule { production, children } = node else {
            return Err(self.bad("item node"));
        };
        let terms = self.prod_terminals(*production);
        let agg = terms
            .first()
            .and_then(|t| Agg::from_terminal(t))
            .ok_or_else(|| self.bad("aggregator"))?;
        let (TreeNode::Column(col), TreeNode::Table(tab)) = (&children[0], &children[1]) else {
            return Err(self.bad("item children"));
        };
        let table = &self.schema.tables[*tab];
        let colname = &self.inventory.names[*col];
        let column = table
            .columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(colname))
            .ok_or_else(|| SemqlError::UnknownColumn(colname.clone()))?
            .name
            .clone();
        Ok(SelectItem {
            agg,
            column,
            table: table.name.clone(),
        })
    }

    fn read_value(&self, node: &TreeNode) -> Result<String, SemqlError> {
        let TreeNode::Value(i) = node else {
            return Err(self.bad("value node"));
        };
        self.candidates
            .get(*i)
            .cloned()
            .ok_or_else(|| SemqlError::UnknownValue(format!("candidate index {i}")))
    }

    fn read_cond(&self, node: &TreeNode) -> Result<Cond, SemqlError> {
        let TreeNode::Rule { production, children } = node else {
            return Err(self.bad("condition node"));
        };
        let terms = self.prod_terminals(*production);
        let head = *terms.first().ok_or_else(|| self.bad("condition head"))?;
        match head {
            "and" => Ok(Cond::And(
                Box::new(self.read_cond(&children[0])?),
                Box::new(self.read_cond(&children[1])?),
            )),
            "or" => Ok(Cond::Or(
                Box::new(self.read_cond(&children[0])?),
                Box::new(self.read_cond(&children[1])?),
            )),
            "not" => Ok(Cond::Not(Box::new(self.read_cond(&children[0])?))),
            "between" => Ok(Cond::Between {
                item: self.read_item(&children[0])?,
                lo: self.read_value(&children[1])?,
                hi: self.read_value(&children[2])?,
            }),
            op => {
                let item = self.read_item(&children[0])?;
                match &children[1] {
                    TreeNode::Value(_) => {
                        let value = self.read_value(&children[1])?;
                        let op = match op {
                            "=" => CmpOp::Eq,
                            "!=" => CmpOp::Ne,
                            "<" => CmpOp::Lt,
                            ">" => CmpOp::Gt,
                            "<=" => CmpOp::Le,
                            ">=" => CmpOp::Ge,
                            "like" => CmpOp::Like,
                            other => return Err(self.bad(&format!("operator {other}"))),
                        };
                        Ok(Cond::Cmp { item, op, value })
                    }
                    sub_node => {
                        let sub = self.read_core(sub_node)?;
                        let op = match op {
                            "in" => SubOp::In,
                            "not_in" => SubOp::NotIn,
                            "=" => SubOp::Eq,
                            ">" => SubOp::Gt,
                            "<" => SubOp::Lt,
                            other => return Err(self.bad(&format!("subquery operator {other}"))),
                        };
                        Ok(Cond::Sub {
                            item,
                            op,
                            sub: Box::new(sub),
                        })
                    }
                }
            }
        }
    }

    fn read_core(&self, node: &TreeNode) -> Result<SelectCore, SemqlError> {
        let TreeNode::Rule { production, children } = node else {
            return Err(self.bad("core node"));
        };
        let prod = &self.grammar.productions[*production];
        let shape: Vec<&str> = prod
            .rhs
            .iter()
            .map(|s| match s {
                Symbol::NonTerminal(id) => self.grammar.nonterminals[*id].as_str(),
                Symbol::Terminal(t) => t.as_str(),
            })
            .collect();
        let mut items = Vec::new();
        let mut filter = None;
        let mut order = None;
        for (child, name) in children.iter().zip(shape.iter().filter(|s| {
            // children align with nonterminal rhs entries
            self.grammar.nt_id(s).is_some()
        })) {
            match *name {
                "Select" => {
                    let TreeNode::Rule { children: sel, .. } = child else {
                        return Err(self.bad("select node"));
                    };
                    for a in sel {
                        items.push(self.read_item(a)?);
                    }
                }
                "Filter" => filter = Some(self.read_cond(child)?),
                "Order" => order = Some(self.read_order(child)?),
                other => return Err(self.bad(&format!("core child {other}"))),
            }
        }
        Ok(SelectCore {
            items,
            filter,
            order,
        })
    }

    fn read_order(&self, node: &TreeNode) -> Result<OrderClause, SemqlError> {
        let TreeNode::Rule { production, children } = node else {
            return Err(self.bad("order node"));
        };
        let terms = self.prod_terminals(*production);
        let dir = match terms.first() {
            Some(&"asc") => Dir::Asc,
            Some(&"desc") => Dir::Desc,
            _ => return Err(self.bad("order direction")),
        };
        let item = self.read_item(&children[0])?;
        let limit = if children.len() > 1 {
            Some(self.read_value(&children[1])?)
        } else {
            None
        };
        Ok(OrderClause { item, dir, limit })
    }

    fn read_query(&self, tree: &SemqlTree) -> Result<QueryExpr, SemqlError> {
        let TreeNode::Rule { production, children } = &tree.root else {
            return Err(self.bad("root"));
        };
        let terms = self.prod_terminals(*production);
        match terms.first() {
            None => Ok(QueryExpr::Simple(self.read_core(&children[0])?)),
            Some(&"intersect") => Ok(QueryExpr::Intersect(
                self.read_core(&children[0])?,
                self.read_core(&children[1])?,
            )),
            Some(&"union") => Ok(QueryExpr::Union(
                self.read_core(&children[0])?,
                self.read_core(&children[1])?,
            )),
            Some(&"except") => Ok(QueryExpr::Except(
                self.read_core(&children[0])?,
                self.read_core(&children[1])?,
            )),
            Some(other) => Err(self.bad(&format!("root terminal {other}"))),
        }
    }
}

/// Replay actions into a tree (checking legality) and print canonical SQL.
pub fn actions_to_sql(
    actions: &[Action],
    schema: &Schema,
    grammar: &Grammar,
    candidates: &[String],
) -> Result<String, SemqlError> {
    let tree = super::replay(actions, grammar, schema, candidates.len(), MAX_STEPS_DEFAULT)?;
    let inventory = ColumnInventory::build(schema);
    let reader = Reader {
        grammar,
        inventory: &inventory,
        schema,
        candidates,
    };
    let q = reader.read_query(&tree)?;
    Ok(sql::print_query(&q, schema))
}

/// Parse and reprint SQL in canonical form (no action round trip).
pub fn canonical_sql(sql: &str, schema: &Schema) -> Result<String, SemqlError> {
    let q = sql::parse_sql(sql, schema)?;
    Ok(sql::print_query(&q, schema))
}

/// Parse SQL into the resolved AST (shared with the evaluation module).
pub fn parse_query(sql: &str, schema: &Schema) -> Result<QueryExpr, SemqlError> {
    sql::parse_sql(sql, schema)
}
