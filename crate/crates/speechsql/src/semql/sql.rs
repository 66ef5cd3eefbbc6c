//! SQL subset: AST, tokenizer, recursive-descent parser with schema-based
//! name resolution, and the canonical printer.
//!
//! Supported shape: a single select core with up to three projection items,
//! optional WHERE / ORDER BY / LIMIT, joins resolved through foreign keys,
//! set operations between two cores, and one level of subquery inside
//! conditions.

use super::SemqlError;
use crate::schema::Schema;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agg {
    None_,
    Max,
    Min,
    Count,
    Sum,
    Avg,
}

impl Agg {
    pub fn terminal(self) -> &'static str {
        match self {
            Agg::None_ => "none",
            Agg::Max => "max",
            Agg::Min => "min",
            Agg::Count => "count",
            Agg::Sum => "sum",
            Agg::Avg => "avg",
        }
    }

    pub fn from_terminal(t: &str) -> Option<Self> {
        Some(match t {
            "none" => Agg::None_,
            "max" => Agg::Max,
            "min" => Agg::Min,
            "count" => Agg::Count,
            "sum" => Agg::Sum,
            "avg" => Agg::Avg,
            _ => return None,
        })
    }
}

/// A projection or condition operand: aggregator over a resolved column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectItem {
    pub agg: Agg,
    /// Column name as declared in the schema.
    pub column: String,
    /// Table name as declared in the schema.
    pub table: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderClause {
    pub item: SelectItem,
    pub dir: Dir,
    pub limit: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
    Like,
}

impl CmpOp {
    pub fn terminal(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
            CmpOp::Like => "like",
        }
    }

    pub fn sql(self) -> &'static str {
        match self {
            CmpOp::Like => "LIKE",
            other => other.terminal(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubOp {
    In,
    NotIn,
    Eq,
    Gt,
    Lt,
}

impl SubOp {
    pub fn terminal(self) -> &'static str {
        match self {
            SubOp::In => "in",
            SubOp::NotIn => "not_in",
            SubOp::Eq => "=",
            SubOp::Gt => ">",
            SubOp::Lt => "<",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cond {
    And(Box<Cond>, Box<Cond>),
    Or(Box<Cond>, Box<Cond>),
    Not(Box<Cond>),
    Cmp {
        item: SelectItem,
        op: CmpOp,
        value: String,
    },
    Between {
        item: SelectItem,
        lo: String,
        hi: String,
    },
    Sub {
        item: SelectItem,
        op: SubOp,
        sub: Box<SelectCore>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectCore {
    pub items: Vec<SelectItem>,
    pub filter: Option<Cond>,
    pub order: Option<OrderClause>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryExpr {
    Simple(SelectCore),
    Intersect(SelectCore, SelectCore),
    Union(SelectCore, SelectCore),
    Except(SelectCore, SelectCore),
}

impl QueryExpr {
    pub fn cores(&self) -> Vec<&SelectCore> {
        match self {
            QueryExpr::Simple(a) => vec![a],
            QueryExpr::Intersect(a, b) | QueryExpr::Union(a, b) | QueryExpr::Except(a, b) => {
                vec![a, b]
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Num(String),
    Str(String),
    Sym(&'static str),
}

fn tokenize(sql: &str) -> Result<Vec<Tok>, SemqlError> {
    let mut out = Vec::new();
    let chars: Vec<char> = sql.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Word(chars[start..i].iter().collect()));
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            out.push(Tok::Num(chars[start..i].iter().collect()));
        } else if c == '\'' {
            i += 1;
            let mut s = String::new();
            loop {
                if i >= chars.len() {
                    return Err(SemqlError::UnsupportedSQL("unterminated string".into()));
                }
                if chars[i] == '\'' {
                    if i + 1 < chars.len() && chars[i + 1] == '\'' {
                        s.push('\'');
                        i += 2;
                    } else {
                        i += 1;
                        break;
                    }
                } else {
                    s.push(chars[i]);
                    i += 1;
                }
            }
            out.push(Tok::Str(s));
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let sym = match two.as_str() {
                "<=" => Some("<="),
                ">=" => Some(">="),
                "!=" => Some("!="),
                "<>" => Some("!="),
                _ => None,
            };
            if let Some(s) = sym {
                out.push(Tok::Sym(s));
                i += 2;
            } else {
                let s = match c {
                    '=' => "=",
                    '<' => "<",
                    '>' => ">",
                    '(' => "(",
                    ')' => ")",
                    ',' => ",",
                    '.' => ".",
                    '*' => "*",
                    '-' => "-",
                    _ => {
                        return Err(SemqlError::UnsupportedSQL(format!(
                            "unexpected character {c:?}"
                        )))
                    }
                };
                out.push(Tok::Sym(s));
                i += 1;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    schema: &'a Schema,
}

/// FROM-clause environment: (alias lowercased, table name as in schema).
type Env = Vec<(String, String)>;

#[derive(Debug, Clone)]
struct RawItem {
    agg: Agg,
    qual: Option<String>,
    name: String,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn peek_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.peek_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), SemqlError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(SemqlError::UnsupportedSQL(format!(
                "expected {kw}, found {:?}",
                self.peek()
            )))
        }
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(s)) if *s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), SemqlError> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            Err(SemqlError::UnsupportedSQL(format!(
                "expected {sym:?}, found {:?}",
                self.peek()
            )))
        }
    }

    fn word(&mut self) -> Result<String, SemqlError> {
        match self.next() {
            Some(Tok::Word(w)) => Ok(w),
            other => Err(SemqlError::UnsupportedSQL(format!(
                "expected identifier, found {other:?}"
            ))),
        }
    }

    fn parse_query(&mut self) -> Result<QueryExpr, SemqlError> {
        let first = self.parse_core(0)?;
        let expr = if self.eat_kw("intersect") {
            QueryExpr::Intersect(first, self.parse_core(0)?)
        } else if self.eat_kw("union") {
            if self.eat_kw("all") {
                return Err(SemqlError::UnsupportedSQL("UNION ALL".into()));
            }
            QueryExpr::Union(first, self.parse_core(0)?)
        } else if self.eat_kw("except") {
            QueryExpr::Except(first, self.parse_core(0)?)
        } else {
            QueryExpr::Simple(first)
        };
        if self.pos != self.toks.len() {
            return Err(SemqlError::UnsupportedSQL(format!(
                "trailing tokens at {:?}",
                self.peek()
            )));
        }
        Ok(expr)
    }

    fn parse_core(&mut self, depth: usize) -> Result<SelectCore, SemqlError> {
        if depth > 1 {
            return Err(SemqlError::UnsupportedSQL(
                "subqueries nested deeper than one level".into(),
            ));
        }
        self.expect_kw("select")?;
        if self.eat_kw("distinct") {
            return Err(SemqlError::UnsupportedSQL("DISTINCT".into()));
        }
        let mut raw_items = vec![self.parse_raw_item()?];
        while self.eat_sym(",") {
            raw_items.push(self.parse_raw_item()?);
        }
        self.expect_kw("from")?;
        let env = self.parse_from()?;
        let items: Vec<SelectItem> = raw_items
            .into_iter()
            .map(|r| self.resolve(&r, &env))
            .collect::<Result<_, _>>()?;

        let filter = if self.eat_kw("where") {
            Some(self.parse_cond(&env, depth)?)
        } else {
            None
        };

        let order = if self.eat_kw("order") {
            self.expect_kw("by")?;
            let raw = self.parse_raw_item()?;
            let item = self.resolve(&raw, &env)?;
            let dir = if self.eat_kw("desc") {
                Dir::Desc
            } else {
                self.eat_kw("asc");
                Dir::Asc
            };
            let limit = if self.eat_kw("limit") {
                Some(self.parse_value()?)
            } else {
                None
            };
            Some(OrderClause { item, dir, limit })
        } else {
            if self.peek_kw("limit") {
                return Err(SemqlError::UnsupportedSQL("LIMIT without ORDER BY".into()));
            }
            None
        };

        if self.peek_kw("group") || self.peek_kw("having") {
            return Err(SemqlError::UnsupportedSQL("GROUP BY / HAVING".into()));
        }
        Ok(SelectCore {
            items,
            filter,
            order,
        })
    }

    fn parse_raw_item(&mut self) -> Result<RawItem, SemqlError> {
        let agg = match self.peek() {
            Some(Tok::Word(w)) => Agg::from_terminal(&w.to_ascii_lowercase()).filter(|a| {
                *a != Agg::None_
                    && matches!(self.toks.get(self.pos + 1), Some(Tok::Sym("(")))
            }),
            _ => None,
        };
        if let Some(agg) = agg {
            self.pos += 1;
            self.expect_sym("(")?;
            if self.eat_sym("*") {
                return Err(SemqlError::UnsupportedSQL("aggregate over *".into()));
            }
            let (qual, name) = self.parse_col_ref()?;
            self.expect_sym(")")?;
            Ok(RawItem { agg, qual, name })
        } else {
            if matches!(self.peek(), Some(Tok::Sym("*"))) {
                return Err(SemqlError::UnsupportedSQL("* projection".into()));
            }
            let (qual, name) = self.parse_col_ref()?;
            Ok(RawItem {
                agg: Agg::None_,
                qual,
                name,
            })
        }
    }

    fn parse_col_ref(&mut self) -> Result<(Option<String>, String), SemqlError> {
        let first = self.word()?;
        if self.eat_sym(".") {
            let name = self.word()?;
            Ok((Some(first), name))
        } else {
            Ok((None, first))
        }
    }

    fn parse_from(&mut self) -> Result<Env, SemqlError> {
        let mut env = Env::new();
        loop {
            let table = self.word()?;
            let schema_table = self
                .schema
                .table(&table)
                .ok_or_else(|| SemqlError::UnknownTable(table.clone()))?
                .name
                .clone();
            let alias = if self.eat_kw("as") {
                self.word()?
            } else if let Some(Tok::Word(w)) = self.peek() {
                // bare alias, but never a clause keyword
                let lw = w.to_ascii_lowercase();
                if [
                    "join", "where", "order", "limit", "on", "intersect", "union", "except",
                    "group", "having",
                ]
                .contains(&lw.as_str())
                {
                    schema_table.clone()
                } else {
                    self.word()?
                }
            } else {
                schema_table.clone()
            };
            env.push((alias.to_ascii_lowercase(), schema_table));
            if self.eat_kw("join") {
                continue;
            }
            if self.eat_kw("on") {
                // validate and discard: join path is re-derived from foreign keys
                let (q1, c1) = self.parse_col_ref()?;
                self.expect_sym("=")?;
                let (q2, c2) = self.parse_col_ref()?;
                for (q, c) in [(q1, c1), (q2, c2)] {
                    self.resolve(
                        &RawItem {
                            agg: Agg::None_,
                            qual: q,
                            name: c,
                        },
                        &env,
                    )?;
                }
                if self.eat_kw("join") {
                    continue;
                }
            }
            if matches!(self.peek(), Some(Tok::Sym(","))) {
                return Err(SemqlError::UnsupportedSQL("comma join".into()));
            }
            return Ok(env);
        }
    }

    fn resolve(&self, raw: &RawItem, env: &Env) -> Result<SelectItem, SemqlError> {
        let table = match &raw.qual {
            Some(q) => {
                let ql = q.to_ascii_lowercase();
                let hit = env
                    .iter()
                    .find(|(alias, table)| *alias == ql || table.eq_ignore_ascii_case(q));
                match hit {
                    Some((_, table)) => table.clone(),
                    None => return Err(SemqlError::UnknownTable(q.clone())),
                }
            }
            None => {
                let hit = env
                    .iter()
                    .find(|(_, table)| self.schema.has_column(table, &raw.name));
                match hit {
                    Some((_, table)) => table.clone(),
                    None => return Err(SemqlError::UnknownColumn(raw.name.clone())),
                }
            }
        };
        let t = self
            .schema
            .table(&table)
            .ok_or_else(|| SemqlError::UnknownTable(table.clone()))?;
        let column = t
            .columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(&raw.name))
            .ok_or_else(|| SemqlError::UnknownColumn(raw.name.clone()))?
            .name
            .clone();
        Ok(SelectItem {
            agg: raw.agg,
            column,
            table: t.name.clone(),
        })
    }

    fn parse_cond(&mut self, env: &Env, depth: usize) -> Result<Cond, SemqlError> {
        let mut left = self.parse_and(env, depth)?;
        while self.eat_kw("or") {
            let right = self.parse_and(env, depth)?;
            left = Cond::Or(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn parse_and(&mut self, env: &Env, depth: usize) -> Result<Cond, SemqlError> {
        let mut left = self.parse_unary(env, depth)?;
        while self.eat_kw("and") {
            let right = self.parse_unary(env, depth)?;
            left = Cond::And(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn parse_unary(&mut self, env: &Env, depth: usize) -> Result<Cond, SemqlError> {
        if self.eat_kw("not") {
            // NOT IN is handled inside the atom; here NOT negates a condition.
            let inner = self.parse_unary(env, depth)?;
            return Ok(Cond::Not(Box::new(inner)));
        }
        if self.eat_sym("(") {
            let inner = self.parse_cond(env, depth)?;
            self.expect_sym(")")?;
            return Ok(inner);
        }
        self.parse_atom(env, depth)
    }

    fn parse_atom(&mut self, env: &Env, depth: usize) -> Result<Cond, SemqlError> {
        let (qual, name) = self.parse_col_ref()?;
        let item = self.resolve(
            &RawItem {
                agg: Agg::None_,
                qual,
                name,
            },
            env,
        )?;

        if self.eat_kw("between") {
            let lo = self.parse_value()?;
            self.expect_kw("and")?;
            let hi = self.parse_value()?;
            return Ok(Cond::Between { item, lo, hi });
        }
        if self.eat_kw("like") {
            let value = self.parse_value()?;
            return Ok(Cond::Cmp {
                item,
                op: CmpOp::Like,
                value,
            });
        }
        if self.eat_kw("not") {
            self.expect_kw("in")?;
            let sub = self.parse_subquery(depth)?;
            return Ok(Cond::Sub {
                item,
                op: SubOp::NotIn,
                sub: Box::new(sub),
            });
        }
        if self.eat_kw("in") {
            let sub = self.parse_subquery(depth)?;
            return Ok(Cond::Sub {
                item,
                op: SubOp::In,
                sub: Box::new(sub),
            });
        }

        let op = match self.next() {
            Some(Tok::Sym("=")) => CmpOp::Eq,
            Some(Tok::Sym("!=")) => CmpOp::Ne,
            Some(Tok::Sym("<")) => CmpOp::Lt,
            Some(Tok::Sym(">")) => CmpOp::Gt,
            Some(Tok::Sym("<=")) => CmpOp::Le,
            Some(Tok::Sym(">=")) => CmpOp::Ge,
            other => {
                return Err(SemqlError::UnsupportedSQL(format!(
                    "expected comparison operator, found {other:?}"
                )))
            }
        };

        // Comparison against a subquery?
        if matches!(self.peek(), Some(Tok::Sym("(")))
            && matches!(self.toks.get(self.pos + 1), Some(Tok::Word(w)) if w.eq_ignore_ascii_case("select"))
        {
            let sub_op = match op {
                CmpOp::Eq => SubOp::Eq,
                CmpOp::Gt => SubOp::Gt,
                CmpOp::Lt => SubOp::Lt,
                other => {
                    return Err(SemqlError::UnsupportedSQL(format!(
                        "operator {} with subquery",
                        other.sql()
                    )))
                }
            };
            let sub = self.parse_subquery(depth)?;
            return Ok(Cond::Sub {
                item,
                op: sub_op,
                sub: Box::new(sub),
            });
        }

        let value = self.parse_value()?;
        Ok(Cond::Cmp { item, op, value })
    }

    fn parse_subquery(&mut self, depth: usize) -> Result<SelectCore, SemqlError> {
        self.expect_sym("(")?;
        let core = self.parse_core(depth + 1)?;
        self.expect_sym(")")?;
        Ok(core)
    }

    fn parse_value(&mut self) -> Result<String, SemqlError> {
        match self.next() {
            Some(Tok::Num(n)) => Ok(n),
            Some(Tok::Str(s)) => Ok(s),
            Some(Tok::Sym("-")) => match self.next() {
                Some(Tok::Num(n)) => Ok(format!("-{n}")),
                other => Err(SemqlError::UnsupportedSQL(format!(
                    "expected number after '-', found {other:?}"
                ))),
            },
            Some(Tok::Word(w)) => Ok(w),
            other => Err(SemqlError::UnsupportedSQL(format!(
                "expected literal, found {other:?}"
            ))),
        }
    }
}

/// Parse a SQL string against a schema.
pub fn parse_sql(sql: &str, schema: &Schema) -> Result<QueryExpr, SemqlError> {
    let toks = tokenize(sql)?;
    let mut p = Parser {
        toks,
        pos: 0,
        schema,
    };
    p.parse_query()
}

// ---------------------------------------------------------------------------
// Canonical printer
// ---------------------------------------------------------------------------

fn is_numeric(v: &str) -> bool {
    v.parse::<f64>().is_ok()
}

fn print_value(v: &str) -> String {
    if is_numeric(v) {
        v.to_string()
    } else {
        format!("'{}'", v.replace('\'', "''"))
    }
}

/// Alias scope for one select core.
struct Scope {
    /// (table name, alias) in first-reference order; empty alias = unqualified.
    tables: Vec<(String, String)>,
}

impl Scope {
    fn build(core: &SelectCore) -> Self {
        let mut order: Vec<String> = Vec::new();
        let push = |t: &str, order: &mut Vec<String>| {
            if !order.iter().any(|x| x.eq_ignore_ascii_case(t)) {
                order.push(t.to_string());
            }
        };
        for it in &core.items {
            push(&it.table, &mut order);
        }
        fn walk(c: &Cond, push: &mut dyn FnMut(&str)) {
            match c {
                Cond::And(a, b) | Cond::Or(a, b) => {
                    walk(a, push);
                    walk(b, push);
                }
                Cond::Not(a) => walk(a, push),
                Cond::Cmp { item, .. } | Cond::Between { item, .. } => push(&item.table),
                Cond::Sub { item, .. } => push(&item.table),
            }
        }
        if let Some(f) = &core.filter {
            walk(f, &mut |t| push(t, &mut order));
        }
        if let Some(o) = &core.order {
            push(&o.item.table, &mut order);
        }
        let multi = order.len() > 1;
        let tables = order
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let alias = if multi { format!("T{}", i + 1) } else { String::new() };
                (t, alias)
            })
            .collect();
        Self { tables }
    }

    fn col_ref(&self, item: &SelectItem) -> String {
        let alias = self
            .tables
            .iter()
            .find(|(t, _)| t.eq_ignore_ascii_case(&item.table))
            .map(|(_, a)| a.clone())
            .unwrap_or_default();
        if alias.is_empty() {
            item.column.clone()
        } else {
            format!("{alias}.{}", item.column)
        }
    }
}

fn print_item(item: &SelectItem, scope: &Scope) -> String {
    let r = scope.col_ref(item);
    match item.agg {
        Agg::None_ => r,
        agg => format!("{}({})", agg.terminal().to_ascii_uppercase(), r),
    }
}

fn print_cond(c: &Cond, scope: &Scope, schema: &Schema) -> String {
    match c {
        Cond::And(a, b) => {
            let pa = print_cond(a, scope, schema);
            let pb = print_cond(b, scope, schema);
            let pa = if matches!(**a, Cond::Or(..)) { format!("({pa})") } else { pa };
            let pb = if matches!(**b, Cond::Or(..)) { format!("({pb})") } else { pb };
            format!("{pa} AND {pb}")
        }
        Cond::Or(a, b) => {
            let pa = print_cond(a, scope, schema);
            let pb = print_cond(b, scope, schema);
            let pa = if matches!(**a, Cond::And(..)) { format!("({pa})") } else { pa };
            let pb = if matches!(**b, Cond::And(..)) { format!("({pb})") } else { pb };
            format!("{pa} OR {pb}")
        }
        Cond::Not(a) => format!("NOT ({})", print_cond(a, scope, schema)),
        Cond::Cmp { item, op, value } => {
            format!("{} {} {}", scope.col_ref(item), op.sql(), print_value(value))
        }
        Cond::Between { item, lo, hi } => format!(
            "{} BETWEEN {} AND {}",
            scope.col_ref(item),
            print_value(lo),
            print_value(hi)
        ),
        Cond::Sub { item, op, sub } => {
            let inner = print_core(sub, schema);
            let opstr = match op {
                SubOp::In => "IN",
                SubOp::NotIn => "NOT IN",
                SubOp::Eq => "=",
                SubOp::Gt => ">",
                SubOp::Lt => "<",
            };
            format!("{} {} ({})", scope.col_ref(item), opstr, inner)
        }
    }
}

/// Print one select core in canonical form: uppercase keywords, explicit
/// `AS Tn` aliases whenever more than one table is referenced, join
/// conditions recovered from the schema's foreign keys.
pub fn print_core(core: &SelectCore, schema: &Schema) -> String {
    let scope = Scope::build(core);
    let mut s = String::from("SELECT ");
    s.push_str(
        &core
            .items
            .iter()
            .map(|it| print_item(it, &scope))
            .collect::<Vec<_>>()
            .join(", "),
    );
    s.push_str(" FROM ");
    for (i, (table, alias)) in scope.tables.iter().enumerate() {
        if i == 0 {
            if alias.is_empty() {
                s.push_str(table);
            } else {
                s.push_str(&format!("{table} AS {alias}"));
            }
            continue;
        }
        s.push_str(&format!(" JOIN {table} AS {alias}"));
        // Join condition from the first foreign key against any earlier table.
        let mut on = None;
        for (pt, pa) in &scope.tables[..i] {
            if let Some((st, sc, dt, dc)) = schema.foreign_key_between(pt, table) {
                let (sa, da) = if st.eq_ignore_ascii_case(pt) {
                    (pa.clone(), alias.clone())
                } else {
                    (alias.clone(), pa.clone())
                };
                let _ = (st, dt);
                on = Some(format!("{sa}.{sc} = {da}.{dc}"));
                break;
            }
        }
        if let Some(on) = on {
            s.push_str(&format!(" ON {on}"));
        }
    }
    if let Some(f) = &core.filter {
        s.push_str(" WHERE ");
        s.push_str(&print_cond(f, &scope, schema));
    }
    if let Some(o) = &core.order {
        s.push_str(" ORDER BY ");
        s.push_str(&print_item(&o.item, &scope));
        s.push_str(match o.dir {
            Dir::Asc => " ASC",
            Dir::Desc => " DESC",
        });
        if let Some(l) = &o.limit {
            s.push_str(&format!(" LIMIT {}", print_value(l)));
        }
    }
    s
}

pub fn print_query(q: &QueryExpr, schema: &Schema) -> String {
    match q {
        QueryExpr::Simple(a) => print_core(a, schema),
        QueryExpr::Intersect(a, b) => {
            format!("{} INTERSECT {}", print_core(a, schema), print_core(b, schema))
        }
        QueryExpr::Union(a, b) => {
            format!("{} UNION {}", print_core(a, schema), print_core(b, schema))
        }
        QueryExpr::Except(a, b) => {
            format!("{} EXCEPT {}", print_core(a, schema), print_core(b, schema))
        }
    }
}
