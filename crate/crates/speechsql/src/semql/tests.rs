use super::*;
use crate::schema::{parse_schema_store, Schema};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) fn wimmera_schema() -> Schema {
    let text = r#"{ "databases": [ {
        "db_id": "wimmera_db",
        "tables": [
            { "name": "wimmera", "columns": [
                { "name": "wins", "type": "number" },
                { "name": "byes", "type": "number" },
                { "name": "losses", "type": "number" },
                { "name": "draws", "type": "number" },
                { "name": "against", "type": "number" } ] }
        ]
    } ] }"#;
    parse_schema_store(text).unwrap().remove("wimmera_db").unwrap()
}

pub(crate) fn products_schema() -> Schema {
    let text = r#"{ "databases": [ {
        "db_id": "products_db",
        "tables": [
            { "name": "Products", "columns": [
                { "name": "product_id", "type": "number" },
                { "name": "color_code", "type": "number" },
                { "name": "product_name", "type": "text" } ] },
            { "name": "Ref_Colors", "columns": [
                { "name": "color_code", "type": "number" },
                { "name": "color_description", "type": "text" } ] }
        ],
        "foreign_keys": [["Products", "color_code", "Ref_Colors", "color_code"]]
    } ] }"#;
    parse_schema_store(text).unwrap().remove("products_db").unwrap()
}

pub(crate) fn student_pet_schema() -> Schema {
    let text = r#"{ "databases": [ {
        "db_id": "student_pet",
        "tables": [
            { "name": "student", "columns": [
                { "name": "sid", "type": "number" },
                { "name": "sname", "type": "text" },
                { "name": "age", "type": "number" } ] },
            { "name": "pet", "columns": [
                { "name": "pid", "type": "number" },
                { "name": "sid", "type": "number" },
                { "name": "pname", "type": "text" } ] }
        ],
        "foreign_keys": [["pet", "sid", "student", "sid"]]
    } ] }"#;
    parse_schema_store(text).unwrap().remove("student_pet").unwrap()
}

#[test]
fn builtin_grammar_has_37_rules() {
    let g = Grammar::builtin();
    assert_eq!(g.n_rules(), 37);
    // Independent count straight off the shipped file.
    let file_lines = DEFAULT_GRAMMAR
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .count();
    assert_eq!(file_lines, g.n_rules());
    // Productions per nonterminal match the documented inventory.
    for (nt, want) in [("Z", 4), ("R", 4), ("Select", 3), ("Order", 4), ("A", 6), ("Filter", 16)] {
        let id = g.nt_id(nt).unwrap();
        assert_eq!(g.productions_of(id).len(), want, "{nt}");
    }
}

#[test]
fn grammar_undefined_symbol() {
    let err = load_grammar("Z := Q\nQq := x").unwrap_err();
    assert!(matches!(err, SemqlError::UnknownSymbol(s) if s == "Q"));
}

#[test]
fn grammar_empty_nonterminal() {
    let err = load_grammar("Z := R").unwrap_err();
    assert!(matches!(err, SemqlError::EmptyGrammar(s) if s == "R"));
}

#[test]
fn wimmera_hand_derivation() {
    let g = Grammar::builtin();
    let schema = wimmera_schema();
    let sql = "SELECT MIN(draws) FROM wimmera WHERE byes > 1";
    let (actions, candidates) = sql_to_actions_auto(sql, &schema, &g).unwrap();
    assert_eq!(candidates, vec!["1".to_string()]);
    // Hand derivation: Z:=R, R:=Select Filter, Select:=A, A:=min C T,
    // C draws, T wimmera, Filter:= > A V, A:=none C T, C byes, T wimmera, V "1".
    let p = |lhs: &str, rhs: &[&str]| g.find_production(lhs, rhs).unwrap();
    let expected = vec![
        Action::ApplyRule(p("Z", &["R"])),
        Action::ApplyRule(p("R", &["Select", "Filter"])),
        Action::ApplyRule(p("Select", &["A"])),
        Action::ApplyRule(p("A", &["min", "C", "T"])),
        Action::SelectColumn(3),
        Action::SelectTable(0),
        Action::ApplyRule(p("Filter", &[">", "A", "V"])),
        Action::ApplyRule(p("A", &["none", "C", "T"])),
        Action::SelectColumn(1),
        Action::SelectTable(0),
        Action::SelectValue(0),
    ];
    assert_eq!(actions, expected);

    let sql2 = actions_to_sql(&actions, &schema, &g, &candidates).unwrap();
    assert_eq!(sql2, "SELECT MIN(draws) FROM wimmera WHERE byes > 1");
}

#[test]
fn join_query_roundtrip() {
    let g = Grammar::builtin();
    let schema = products_schema();
    let sql = "SELECT T1.product_name FROM Products AS T1 JOIN Ref_Colors AS T2 \
               WHERE T2.color_description = 1";
    let (actions, candidates) = sql_to_actions_auto(sql, &schema, &g).unwrap();
    let printed = actions_to_sql(&actions, &schema, &g, &candidates).unwrap();
    // Canonical join re-derives the ON clause from the foreign key.
    assert_eq!(
        printed,
        "SELECT T1.product_name FROM Products AS T1 JOIN Ref_Colors AS T2 \
         ON T1.color_code = T2.color_code WHERE T2.color_description = 1"
    );
    // Fixed point: reparsing the canonical form gives the same actions.
    let again = sql_to_actions(&printed, &schema, &g, &candidates).unwrap();
    assert_eq!(again, actions);
}

#[test]
fn subquery_roundtrip() {
    let g = Grammar::builtin();
    let schema = student_pet_schema();
    let sql = "SELECT AVG(age) FROM student WHERE sid NOT IN (SELECT sid FROM pet)";
    let (actions, candidates) = sql_to_actions_auto(sql, &schema, &g).unwrap();
    assert!(candidates.is_empty());
    let printed = actions_to_sql(&actions, &schema, &g, &candidates).unwrap();
    assert_eq!(
        printed,
        "SELECT AVG(age) FROM student WHERE sid NOT IN (SELECT sid FROM pet)"
    );
    let again = sql_to_actions(&printed, &schema, &g, &candidates).unwrap();
    assert_eq!(again, actions);
}

#[test]
fn unknown_column_is_reported() {
    let g = Grammar::builtin();
    let schema = wimmera_schema();
    let err = sql_to_actions_auto("SELECT foo FROM wimmera", &schema, &g).unwrap_err();
    assert!(matches!(err, SemqlError::UnknownColumn(c) if c == "foo"));
}

#[test]
fn conjunct_order_is_canonical() {
    let g = Grammar::builtin();
    let schema = wimmera_schema();
    let a = sql_to_actions_auto("SELECT wins FROM wimmera WHERE byes = 2 AND draws = 3", &schema, &g)
        .unwrap();
    let b = sql_to_actions_auto("SELECT wins FROM wimmera WHERE draws = 3 AND byes = 2", &schema, &g)
        .unwrap();
    // Same derivation modulo the candidate lists (literal order differs).
    let sql_a = actions_to_sql(&a.0, &schema, &g, &a.1).unwrap();
    let sql_b = actions_to_sql(&b.0, &schema, &g, &b.1).unwrap();
    assert_eq!(sql_a, sql_b);
}

#[test]
fn initial_mask_is_the_z_productions() {
    let g = Grammar::builtin();
    let schema = wimmera_schema();
    let inv = ColumnInventory::build(&schema);
    let state = DerivationState::new(&g, MAX_STEPS_DEFAULT);
    let mask = legal_actions(&state, &g, &inv, 0);
    let ActionMask::Rules(m) = &mask else {
        panic!("expected rule mask")
    };
    assert_eq!(mask.count(), 4);
    for &p in g.productions_of(g.nt_id("Z").unwrap()) {
        assert!(m[p]);
    }
}

#[test]
fn table_mask_restricted_to_column_tables() {
    let g = Grammar::builtin();
    let text = r#"{ "databases": [ {
        "db_id": "two",
        "tables": [
            { "name": "wimmera", "columns": [
                { "name": "draws", "type": "number" },
                { "name": "byes", "type": "number" } ] },
            { "name": "other", "columns": [
                { "name": "byes", "type": "number" },
                { "name": "x", "type": "number" } ] }
        ]
    } ] }"#;
    let schema = parse_schema_store(text).unwrap().remove("two").unwrap();
    let inv = ColumnInventory::build(&schema);
    let mut state = DerivationState::new(&g, MAX_STEPS_DEFAULT);
    let p = |lhs: &str, rhs: &[&str]| g.find_production(lhs, rhs).unwrap();
    for a in [
        Action::ApplyRule(p("Z", &["R"])),
        Action::ApplyRule(p("R", &["Select"])),
        Action::ApplyRule(p("Select", &["A"])),
        Action::ApplyRule(p("A", &["none", "C", "T"])),
        Action::SelectColumn(inv.index_of("draws").unwrap()),
    ] {
        let mask = legal_actions(&state, &g, &inv, 0);
        assert!(mask.allows(&a), "gold prefix action {a:?} must stay legal");
        state.apply(&g, &a);
    }
    let mask = legal_actions(&state, &g, &inv, 0);
    assert_eq!(mask, ActionMask::Tables(vec![true, false]));
    // byes lives in both tables
    state.apply(&g, &Action::SelectTable(0));
    assert!(state.is_complete());
    assert_eq!(legal_actions(&state, &g, &inv, 0), ActionMask::Done);
}

#[test]
fn illegal_table_choice_rejected() {
    let g = Grammar::builtin();
    let schema = products_schema();
    let p = |lhs: &str, rhs: &[&str]| g.find_production(lhs, rhs).unwrap();
    let inv = ColumnInventory::build(&schema);
    let actions = vec![
        Action::ApplyRule(p("Z", &["R"])),
        Action::ApplyRule(p("R", &["Select"])),
        Action::ApplyRule(p("Select", &["A"])),
        Action::ApplyRule(p("A", &["none", "C", "T"])),
        Action::SelectColumn(inv.index_of("product_name").unwrap()),
        // product_name is only in Products (table 0); table 1 is illegal
        Action::SelectTable(1),
    ];
    let err = replay(&actions, &g, &schema, 0, MAX_STEPS_DEFAULT).unwrap_err();
    assert!(matches!(err, SemqlError::IllegalAction { step: 5, .. }));
}

#[test]
fn incomplete_derivation_rejected() {
    let g = Grammar::builtin();
    let schema = wimmera_schema();
    let sql = "SELECT MIN(draws) FROM wimmera WHERE byes > 1";
    let (mut actions, candidates) = sql_to_actions_auto(sql, &schema, &g).unwrap();
    actions.pop(); // drop the final V selection
    let err = actions_to_sql(&actions, &schema, &g, &candidates).unwrap_err();
    assert!(matches!(err, SemqlError::IncompleteDerivation(1)));
}

/// Any walk that always picks a legal action completes within the step cap.
#[test]
fn random_legal_walks_terminate() {
    let g = Grammar::builtin();
    let schema = products_schema();
    let inv = ColumnInventory::build(&schema);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let mut state = DerivationState::new(&g, MAX_STEPS_DEFAULT);
        let mut actions = Vec::new();
        while !state.is_complete() {
            assert!(state.steps() < MAX_STEPS_DEFAULT, "walk exceeded budget");
            let mask = legal_actions(&state, &g, &inv, 3);
            let action = match &mask {
                ActionMask::Rules(m) => {
                    let open: Vec<usize> =
                        m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
                    assert!(!open.is_empty(), "budget guard starved the frontier");
                    Action::ApplyRule(open[rng.gen_range(0..open.len())])
                }
                ActionMask::Columns(m) => {
                    let open: Vec<usize> =
                        m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
                    Action::SelectColumn(open[rng.gen_range(0..open.len())])
                }
                ActionMask::Tables(m) => {
                    let open: Vec<usize> =
                        m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
                    assert!(!open.is_empty());
                    Action::SelectTable(open[rng.gen_range(0..open.len())])
                }
                ActionMask::Values(m) => {
                    let open: Vec<usize> =
                        m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
                    Action::SelectValue(open[rng.gen_range(0..open.len())])
                }
                ActionMask::Done => unreachable!(),
            };
            state.apply(&g, &action);
            actions.push(action);
        }
        assert!(actions.len() <= MAX_STEPS_DEFAULT);
        replay(&actions, &g, &schema, 3, MAX_STEPS_DEFAULT).expect("random walk replays");
    }
}

#[test]
fn order_and_set_op_roundtrips() {
    let g = Grammar::builtin();
    let schema = wimmera_schema();
    for sql in [
        "SELECT wins FROM wimmera ORDER BY draws DESC",
        "SELECT wins FROM wimmera ORDER BY draws ASC LIMIT 5",
        "SELECT wins FROM wimmera WHERE byes BETWEEN 1 AND 3 ORDER BY against ASC",
        "SELECT wins FROM wimmera WHERE byes = 1 OR draws = 2",
        "SELECT wins FROM wimmera WHERE NOT (byes = 1)",
        "SELECT wins FROM wimmera INTERSECT SELECT wins FROM wimmera WHERE byes = 1",
        "SELECT MAX(wins), MIN(byes) FROM wimmera",
        "SELECT wins FROM wimmera WHERE losses LIKE '1%'",
        "SELECT wins FROM wimmera WHERE draws > (SELECT AVG(draws) FROM wimmera)",
    ] {
        let (actions, candidates) = sql_to_actions_auto(sql, &schema, &g)
            .unwrap_or_else(|e| panic!("{sql}: {e}"));
        let printed = actions_to_sql(&actions, &schema, &g, &candidates).unwrap();
        let again = sql_to_actions(&printed, &schema, &g, &candidates)
            .unwrap_or_else(|e| panic!("reparse {printed}: {e}"));
        assert_eq!(again, actions, "fixed point for {sql} -> {printed}");
    }
}

#[test]
fn unsupported_sql_is_rejected() {
    let g = Grammar::builtin();
    let schema = wimmera_schema();
    for sql in [
        "SELECT * FROM wimmera",
        "SELECT COUNT(*) FROM wimmera",
        "SELECT wins FROM wimmera GROUP BY wins",
        "SELECT DISTINCT wins FROM wimmera",
        "SELECT wins FROM wimmera LIMIT 3",
    ] {
        let err = sql_to_actions_auto(sql, &schema, &g).unwrap_err();
        assert!(matches!(err, SemqlError::UnsupportedSQL(_)), "{sql}");
    }
}
