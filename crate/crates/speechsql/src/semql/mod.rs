//! Tree-structured intermediate query language: grammar, typed decoder
//! actions, derivation bookkeeping with legality masking, and bidirectional
//! SQL conversion.
//!
//! A query is derived by expanding nonterminals in leftmost pre-order. Grammar
//! nonterminals expand through [`Action::ApplyRule`]; the three selection
//! leaves `C`, `T`, `V` are filled by pointer actions picking a column node,
//! a table, or a candidate literal. [`DerivationState`] tracks the frontier
//! and a step budget; [`legal_actions`] masks out productions whose minimal
//! completion cannot fit in the remaining budget, so any legal walk
//! terminates within the cap.

mod convert;
mod sql;

pub use convert::{
    actions_to_sql, canonical_sql, extract_literals, parse_query, sql_to_actions,
    sql_to_actions_auto,
};
pub use sql::{Agg, CmpOp, Cond, Dir, QueryExpr, SelectCore, SelectItem, SubOp};

use crate::schema::Schema;
use thiserror::Error;

/// Default cap on derivation length.
pub const MAX_STEPS_DEFAULT: usize = 40;

const DEFAULT_GRAMMAR: &str = include_str!("../../assets/grammar.txt");

#[derive(Debug, Error)]
pub enum SemqlError {
    #[error("unknown symbol {0:?} in grammar")]
    UnknownSymbol(String),
    #[error("no productions for nonterminal {0:?}")]
    EmptyGrammar(String),
    #[error("unsupported SQL: {0}")]
    UnsupportedSQL(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("literal {0:?} not in candidate list")]
    UnknownValue(String),
    #[error("derivation incomplete: frontier still has {0} entries")]
    IncompleteDerivation(usize),
    #[error("illegal action at step {step}: {reason}")]
    IllegalAction { step: usize, reason: String },
}

/// Right-hand-side symbol of a production.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Symbol {
    /// Index into [`Grammar::nonterminals`].
    NonTerminal(usize),
    /// Keyword terminal, stored verbatim.
    Terminal(String),
}

#[derive(Debug, Clone)]
pub struct Production {
    pub lhs: usize,
    pub rhs: Vec<Symbol>,
}

/// What fills a frontier entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontierKind {
    /// Expanded by `ApplyRule` of a production with this LHS.
    Rule(usize),
    Column,
    Table,
    Value,
}

#[derive(Debug, Clone)]
pub struct Grammar {
    /// Ordered nonterminal names; position is the nonterminal id.
    pub nonterminals: Vec<String>,
    pub productions: Vec<Production>,
    /// Production ids grouped by LHS, in file order.
    by_lhs: Vec<Vec<usize>>,
    /// Minimal number of actions to fully expand each nonterminal.
    min_cost: Vec<usize>,
    column_nt: usize,
    table_nt: usize,
    value_nt: usize,
    start_nt: usize,
}

impl Grammar {
    /// The grammar shipped with the crate.
    pub fn builtin() -> Self {
        load_grammar(DEFAULT_GRAMMAR).expect("builtin grammar parses")
    }

    pub fn n_rules(&self) -> usize {
        self.productions.len()
    }

    pub fn n_nonterminals(&self) -> usize {
        self.nonterminals.len()
    }

    pub fn start(&self) -> usize {
        self.start_nt
    }

    pub fn nt_id(&self, name: &str) -> Option<usize> {
        self.nonterminals.iter().position(|n| n == name)
    }

    pub fn kind_of(&self, nt: usize) -> FrontierKind {
        if nt == self.column_nt {
            FrontierKind::Column
        } else if nt == self.table_nt {
            FrontierKind::Table
        } else if nt == self.value_nt {
            FrontierKind::Value
        } else {
            FrontierKind::Rule(nt)
        }
    }

    pub fn productions_of(&self, nt: usize) -> &[usize] {
        &self.by_lhs[nt]
    }

    /// Find a production by LHS name and the shape of its right-hand side,
    /// where terminals match by text and nonterminals by name.
    pub fn find_production(&self, lhs: &str, rhs: &[&str]) -> Option<usize> {
        let lhs = self.nt_id(lhs)?;
        'prod: for &p in &self.by_lhs[lhs] {
            let prod = &self.productions[p];
            if prod.rhs.len() != rhs.len() {
                continue;
            }
            for (sym, want) in prod.rhs.iter().zip(rhs) {
                let ok = match sym {
                    Symbol::NonTerminal(id) => self.nonterminals[*id] == *want,
                    Symbol::Terminal(t) => t == want,
                };
                if !ok {
                    continue 'prod;
                }
            }
            return Some(p);
        }
        None
    }

    fn min_cost_of_symbols(&self, rhs: &[Symbol]) -> usize {
        rhs.iter()
            .map(|s| match s {
                Symbol::NonTerminal(id) => self.min_cost[*id],
                Symbol::Terminal(_) => 0,
            })
            .sum()
    }
}

/// Parse a grammar description: one `LHS := sym sym ...` per line, `#`
/// comments and blank lines ignored.
pub fn load_grammar(text: &str) -> Result<Grammar, SemqlError> {
    let mut nonterminals: Vec<String> = Vec::new();
    let mut raw: Vec<(String, Vec<String>)> = Vec::new();
    let nt_id = |name: &str, nts: &mut Vec<String>| -> usize {
        if let Some(i) = nts.iter().position(|n| n == name) {
            i
        } else {
            nts.push(name.to_string());
            nts.len() - 1
        }
    };

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (lhs, rhs) = line
            .split_once(":=")
            .ok_or_else(|| SemqlError::UnknownSymbol(line.to_string()))?;
        let lhs = lhs.trim().to_string();
        if !lhs.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
            return Err(SemqlError::UnknownSymbol(lhs));
        }
        nt_id(&lhs, &mut nonterminals);
        let rhs: Vec<String> = rhs.split_whitespace().map(str::to_string).collect();
        raw.push((lhs, rhs));
    }
    if raw.is_empty() {
        return Err(SemqlError::EmptyGrammar("Z".into()));
    }

    // Selection leaves are known by name even if never used as an LHS.
    for leaf in ["C", "T", "V"] {
        nt_id(leaf, &mut nonterminals);
    }
    // The standard nonterminal inventory; an RHS reference to one of these
    // without productions is an EmptyGrammar error rather than UnknownSymbol.
    const STANDARD_NTS: [&str; 9] = ["Z", "R", "Select", "Order", "A", "Filter", "C", "T", "V"];

    let mut productions = Vec::new();
    for (lhs, rhs) in &raw {
        let lhs_id = nonterminals.iter().position(|n| n == lhs).unwrap();
        let mut syms = Vec::new();
        for s in rhs {
            if s.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
                let id = match nonterminals.iter().position(|n| n == s) {
                    Some(id) => id,
                    None if STANDARD_NTS.contains(&s.as_str()) => nt_id(s, &mut nonterminals),
                    None => return Err(SemqlError::UnknownSymbol(s.clone())),
                };
                syms.push(Symbol::NonTerminal(id));
            } else {
                syms.push(Symbol::Terminal(s.clone()));
            }
        }
        productions.push(Production {
            lhs: lhs_id,
            rhs: syms,
        });
    }

    let n = nonterminals.len();
    let mut by_lhs = vec![Vec::new(); n];
    for (i, p) in productions.iter().enumerate() {
        by_lhs[p.lhs].push(i);
    }

    let column_nt = nonterminals.iter().position(|s| s == "C").unwrap();
    let table_nt = nonterminals.iter().position(|s| s == "T").unwrap();
    let value_nt = nonterminals.iter().position(|s| s == "V").unwrap();
    let start_nt = nonterminals
        .iter()
        .position(|s| s == "Z")
        .ok_or_else(|| SemqlError::EmptyGrammar("Z".into()))?;

    // Every grammar nonterminal reachable on an RHS must have productions.
    for p in &productions {
        for s in &p.rhs {
            if let Symbol::NonTerminal(id) = s {
                let leaf = *id == column_nt || *id == table_nt || *id == value_nt;
                if !leaf && by_lhs[*id].is_empty() {
                    return Err(SemqlError::EmptyGrammar(nonterminals[*id].clone()));
                }
            }
        }
    }
    if by_lhs[start_nt].is_empty() {
        return Err(SemqlError::EmptyGrammar("Z".into()));
    }

    // Fixed-point minimal completion cost per nonterminal.
    let inf = usize::MAX / 4;
    let mut min_cost = vec![inf; n];
    min_cost[column_nt] = 1;
    min_cost[table_nt] = 1;
    min_cost[value_nt] = 1;
    loop {
        let mut changed = false;
        for p in &productions {
            let cost: usize = 1 + p
                .rhs
                .iter()
                .map(|s| match s {
                    Symbol::NonTerminal(id) => min_cost[*id],
                    Symbol::Terminal(_) => 0,
                })
                .sum::<usize>();
            if cost < min_cost[p.lhs] {
                min_cost[p.lhs] = cost;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for (id, &c) in min_cost.iter().enumerate() {
        if c >= inf && !by_lhs[id].is_empty() {
            return Err(SemqlError::EmptyGrammar(nonterminals[id].clone()));
        }
    }

    Ok(Grammar {
        nonterminals,
        productions,
        by_lhs,
        min_cost,
        column_nt,
        table_nt,
        value_nt,
        start_nt,
    })
}

/// A typed decoder action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Action {
    ApplyRule(usize),
    /// Index into the schema's merged column inventory.
    SelectColumn(usize),
    /// Index into the schema's table list.
    SelectTable(usize),
    /// Index into the instance's candidate value list.
    SelectValue(usize),
}

pub type ActionSequence = Vec<Action>;

/// Merged column inventory of a schema: one entry per distinct column name
/// (case-insensitive, in first-appearance order) with the tables holding it.
#[derive(Debug, Clone)]
pub struct ColumnInventory {
    pub names: Vec<String>,
    pub tables: Vec<Vec<usize>>,
    pub n_tables: usize,
}

impl ColumnInventory {
    pub fn build(schema: &Schema) -> Self {
        let mut names: Vec<String> = Vec::new();
        let mut tables: Vec<Vec<usize>> = Vec::new();
        for (ti, t) in schema.tables.iter().enumerate() {
            for c in &t.columns {
                let key = c.name.to_ascii_lowercase();
                match names.iter().position(|n| *n == key) {
                    Some(i) => tables[i].push(ti),
                    None => {
                        names.push(key);
                        tables.push(vec![ti]);
                    }
                }
            }
        }
        Self {
            names,
            tables,
            n_tables: schema.tables.len(),
        }
    }

    pub fn index_of(&self, column: &str) -> Option<usize> {
        let key = column.to_ascii_lowercase();
        self.names.iter().position(|n| *n == key)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Legal-action mask for the current frontier entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionMask {
    /// Over all grammar productions.
    Rules(Vec<bool>),
    /// Over the merged column inventory.
    Columns(Vec<bool>),
    /// Over schema tables.
    Tables(Vec<bool>),
    /// Over the candidate value list.
    Values(Vec<bool>),
    /// Derivation complete; nothing is legal.
    Done,
}

impl ActionMask {
    pub fn allows(&self, action: &Action) -> bool {
        match (self, action) {
            (ActionMask::Rules(m), Action::ApplyRule(i)) => m.get(*i).copied().unwrap_or(false),
            (ActionMask::Columns(m), Action::SelectColumn(i)) => {
                m.get(*i).copied().unwrap_or(false)
            }
            (ActionMask::Tables(m), Action::SelectTable(i)) => m.get(*i).copied().unwrap_or(false),
            (ActionMask::Values(m), Action::SelectValue(i)) => m.get(*i).copied().unwrap_or(false),
            _ => false,
        }
    }

    pub fn count(&self) -> usize {
        match self {
            ActionMask::Rules(m)
            | ActionMask::Columns(m)
            | ActionMask::Tables(m)
            | ActionMask::Values(m) => m.iter().filter(|&&b| b).count(),
            ActionMask::Done => 0,
        }
    }
}

/// Partial derivation: pre-order frontier stack plus step budget.
#[derive(Debug, Clone)]
pub struct DerivationState {
    /// Unexpanded nonterminals; the top of the stack is expanded next.
    frontier: Vec<usize>,
    steps: usize,
    max_steps: usize,
    /// Column inventory index of the most recent column choice, used to
    /// restrict the sibling table choice.
    last_column: Option<usize>,
}

impl DerivationState {
    pub fn new(grammar: &Grammar, max_steps: usize) -> Self {
        Self {
            frontier: vec![grammar.start()],
            steps: 0,
            max_steps,
            last_column: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.frontier.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Kind of the frontier entry expanded next.
    pub fn frontier_kind(&self, grammar: &Grammar) -> Option<FrontierKind> {
        self.frontier.last().map(|&nt| grammar.kind_of(nt))
    }

    pub fn frontier_nt(&self) -> Option<usize> {
        self.frontier.last().copied()
    }

    /// Apply an action without legality checking; callers normally pair this
    /// with [`legal_actions`].
    pub fn apply(&mut self, grammar: &Grammar, action: &Action) {
        let nt = self.frontier.pop().expect("apply on complete derivation");
        match action {
            Action::ApplyRule(p) => {
                let prod = &grammar.productions[*p];
                debug_assert_eq!(prod.lhs, nt);
                for sym in prod.rhs.iter().rev() {
                    if let Symbol::NonTerminal(id) = sym {
                        self.frontier.push(*id);
                    }
                }
            }
            Action::SelectColumn(i) => self.last_column = Some(*i),
            Action::SelectTable(_) | Action::SelectValue(_) => {}
        }
        self.steps += 1;
    }
}

/// Mask of actions legal in `state`. Grammar frontier entries admit only
/// matching-LHS productions whose minimal completion fits the remaining step
/// budget; `T` is restricted to tables containing the last selected column.
pub fn legal_actions(
    state: &DerivationState,
    grammar: &Grammar,
    inventory: &ColumnInventory,
    n_candidates: usize,
) -> ActionMask {
    let Some(&top) = state.frontier.last() else {
        return ActionMask::Done;
    };
    // Budget already committed by the rest of the frontier.
    let rest_cost: usize = state.frontier[..state.frontier.len() - 1]
        .iter()
        .map(|&nt| grammar.min_cost[nt])
        .sum();
    match grammar.kind_of(top) {
        FrontierKind::Rule(nt) => {
            let mut mask = vec![false; grammar.n_rules()];
            for &p in grammar.productions_of(nt) {
                let cost = 1 + grammar.min_cost_of_symbols(&grammar.productions[p].rhs);
                if state.steps + cost + rest_cost <= state.max_steps {
                    mask[p] = true;
                }
            }
            ActionMask::Rules(mask)
        }
        FrontierKind::Column => ActionMask::Columns(vec![true; inventory.len()]),
        FrontierKind::Table => {
            let mut mask = vec![false; inventory.n_tables];
            if let Some(col) = state.last_column {
                for &ti in &inventory.tables[col] {
                    mask[ti] = true;
                }
            }
            ActionMask::Tables(mask)
        }
        FrontierKind::Value => ActionMask::Values(vec![true; n_candidates]),
    }
}

/// A completed derivation tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeNode {
    Rule { production: usize, children: Vec<TreeNode> },
    Column(usize),
    Table(usize),
    Value(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemqlTree {
    pub root: TreeNode,
}

/// Replay an action sequence, checking legality at every step, and build the
/// derivation tree.
pub fn replay(
    actions: &[Action],
    grammar: &Grammar,
    schema: &Schema,
    n_candidates: usize,
    max_steps: usize,
) -> Result<SemqlTree, SemqlError> {
    let inventory = ColumnInventory::build(schema);
    let mut state = DerivationState::new(grammar, max_steps);
    // Build stack: (production, collected children, expected child count).
    let mut stack: Vec<(usize, Vec<TreeNode>, usize)> = Vec::new();
    let mut root: Option<TreeNode> = None;

    let attach = |node: TreeNode,
                      stack: &mut Vec<(usize, Vec<TreeNode>, usize)>,
                      root: &mut Option<TreeNode>| {
        let mut node = node;
        loop {
            match stack.last_mut() {
                None => {
                    *root = Some(node);
                    return;
                }
                Some((_, children, want)) => {
                    children.push(node);
                    if children.len() < *want {
                        return;
                    }
                    let (p, children, _) = stack.pop().unwrap();
                    node = TreeNode::Rule {
                        production: p,
                        children,
                    };
                }
            }
        }
    };

    for (step, action) in actions.iter().enumerate() {
        let mask = legal_actions(&state, grammar, &inventory, n_candidates);
        if !mask.allows(action) {
            return Err(SemqlError::IllegalAction {
                step,
                reason: format!("{action:?} not allowed by {}", mask_name(&mask)),
            });
        }
        match action {
            Action::ApplyRule(p) => {
                let want = grammar.productions[*p]
                    .rhs
                    .iter()
                    .filter(|s| matches!(s, Symbol::NonTerminal(_)))
                    .count();
                if want == 0 {
                    attach(
                        TreeNode::Rule {
                            production: *p,
                            children: Vec::new(),
                        },
                        &mut stack,
                        &mut root,
                    );
                } else {
                    stack.push((*p, Vec::new(), want));
                }
            }
            Action::SelectColumn(i) => attach(TreeNode::Column(*i), &mut stack, &mut root),
            Action::SelectTable(i) => attach(TreeNode::Table(*i), &mut stack, &mut root),
            Action::SelectValue(i) => attach(TreeNode::Value(*i), &mut stack, &mut root),
        }
        state.apply(grammar, action);
    }
    if !state.is_complete() {
        return Err(SemqlError::IncompleteDerivation(state.frontier.len()));
    }
    Ok(SemqlTree {
        root: root.expect("complete derivation has a root"),
    })
}

fn mask_name(mask: &ActionMask) -> &'static str {
    match mask {
        ActionMask::Rules(_) => "rule mask",
        ActionMask::Columns(_) => "column mask",
        ActionMask::Tables(_) => "table mask",
        ActionMask::Values(_) => "value mask",
        ActionMask::Done => "completed derivation",
    }
}

#[cfg(test)]
pub(crate) mod tests;
