//! Grammar-guided LSTM decoder. Each step feeds the previous action and
//! frontier-type embeddings plus the attention context into an LSTM, attends
//! over the speech embedding, and scores either the grammar productions
//! (masked softmax over rules) or schema/value rows (pointer). Illegal
//! actions carry probability exactly zero, so decoding can only produce
//! grammatical derivations.

use crate::nn::{lstm_step, LstmWeights};
use crate::params::{ParamStore, Session};
use crate::semql::{
    legal_actions, Action, ActionMask, ActionSequence, ColumnInventory, DerivationState,
    FrontierKind, Grammar,
};
use crate::tensor::Var;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("step on a complete derivation")]
    CompleteDerivation,
    #[error("derivation incomplete after {0} steps")]
    MaxStepsExceeded(usize),
    #[error("gold action {action:?} masked at step {step}")]
    GoldActionMasked { step: usize, action: Action },
    #[error("empty speech embedding")]
    EmptyEmbedding,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub d_action: usize,
    pub d_type: usize,
    pub max_steps: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            d_action: 12,
            d_type: 12,
            max_steps: crate::semql::MAX_STEPS_DEFAULT,
        }
    }
}

pub fn init_decoder_params(
    store: &mut ParamStore,
    cfg: &DecoderConfig,
    n_rules: usize,
    n_nonterminals: usize,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.d_model;
    crate::nn::init_lstm(store, "dec.lstm", cfg.d_action + cfg.d_type + d, d, rng);
    // Bilinear score maps: amplitude ~3/d keeps attention and pointer logits
    // at unit variance, where xavier would saturate the softmax at init.
    store.init_uniform("dec.wa", d, d, 3.0 / d as f64, rng);
    store.init_xavier("dec.wu", 2 * d, d, rng);
    store.init_zeros("dec.bu", 1, d);
    store.init_xavier("dec.wp", d, n_rules, rng);
    store.init_zeros("dec.bp", 1, n_rules);
    store.init_uniform("dec.ws", d, d, 3.0 / d as f64, rng);
    store.init_embedding("dec.rule_emb", n_rules, cfg.d_action, 0.3, rng);
    // one embedding per selection family: column / table / value
    store.init_embedding("dec.family_emb", 3, cfg.d_action, 0.3, rng);
    store.init_embedding("dec.type_emb", n_nonterminals, cfg.d_type, 0.3, rng);
}

/// Everything a decode run reads but does not own.
pub struct DecodeInputs<'a> {
    /// Fused speech embedding `(l_a, d)`.
    pub z_a: Var,
    /// Fused schema embedding `(l_s, d)`, tables-first node order.
    pub z_s: Var,
    /// Candidate value embeddings `(n_candidates, d)`; `None` when empty.
    pub value_emb: Option<Var>,
    /// Valid (unpadded) speech rows.
    pub speech_mask: &'a [bool],
    pub grammar: &'a Grammar,
    pub inventory: &'a ColumnInventory,
    pub n_candidates: usize,
}

/// Mutable decoding state across steps.
pub struct DecoderState {
    pub h: Var,
    pub cell: Var,
    pub context: Var,
    pub derivation: DerivationState,
    prev_action: Option<Action>,
    prev_nt: Option<usize>,
}

/// Initialize: `h_0` is the column-wise max over valid speech rows; cell,
/// context and the previous-action embeddings start at zero.
pub fn init_state(
    sess: &mut Session,
    cfg: &DecoderConfig,
    inputs: &DecodeInputs,
) -> Result<DecoderState, DecoderError> {
    let n_valid = inputs.speech_mask.iter().filter(|&&b| b).count();
    if n_valid == 0 {
        return Err(DecoderError::EmptyEmbedding);
    }
    let valid = sess.tape.slice_rows(inputs.z_a, 0, n_valid);
    let h = sess.tape.max_pool_rows(valid);
    let zero = sess.tape.leaf2(1, cfg.d_model, vec![0.0; cfg.d_model]);
    Ok(DecoderState {
        h,
        cell: zero,
        context: zero,
        derivation: DerivationState::new(inputs.grammar, cfg.max_steps),
        prev_action: None,
        prev_nt: None,
    })
}

/// Probabilities over the current legal action set. The index space matches
/// the mask variant: rules, schema nodes (for columns and tables), or
/// candidate values.
pub struct StepDistribution {
    pub probs: Var,
    pub mask: ActionMask,
}

impl StepDistribution {
    /// Column index in `probs` for an action.
    pub fn index_of(&self, action: &Action, n_tables: usize) -> usize {
        match action {
            Action::ApplyRule(r) => *r,
            Action::SelectColumn(c) => n_tables + c,
            Action::SelectTable(t) => *t,
            Action::SelectValue(v) => *v,
        }
    }
}

/// Advance the LSTM one step and produce the masked action distribution.
/// The action itself is chosen by the caller; follow with [`advance`].
pub fn step(
    sess: &mut Session,
    cfg: &DecoderConfig,
    inputs: &DecodeInputs,
    state: &mut DecoderState,
) -> Result<StepDistribution, DecoderError> {
    if state.derivation.is_complete() {
        return Err(DecoderError::CompleteDerivation);
    }
    let mask = legal_actions(
        &state.derivation,
        inputs.grammar,
        inputs.inventory,
        inputs.n_candidates,
    );

    // previous action embedding
    let a_prev = match &state.prev_action {
        None => sess.tape.leaf2(1, cfg.d_action, vec![0.0; cfg.d_action]),
        Some(Action::ApplyRule(r)) => {
            let table = sess.param("dec.rule_emb");
            sess.tape.gather_rows(table, &[*r])
        }
        Some(Action::SelectColumn(_)) => {
            let table = sess.param("dec.family_emb");
            sess.tape.gather_rows(table, &[0])
        }
        Some(Action::SelectTable(_)) => {
            let table = sess.param("dec.family_emb");
            sess.tape.gather_rows(table, &[1])
        }
        Some(Action::SelectValue(_)) => {
            let table = sess.param("dec.family_emb");
            sess.tape.gather_rows(table, &[2])
        }
    };
    // previous frontier-type embedding
    let n_prev = match state.prev_nt {
        None => sess.tape.leaf2(1, cfg.d_type, vec![0.0; cfg.d_type]),
        Some(nt) => {
            let table = sess.param("dec.type_emb");
            sess.tape.gather_rows(table, &[nt])
        }
    };

    let an = sess.tape.concat_cols(a_prev, n_prev);
    let x = sess.tape.concat_cols(an, state.context);
    let w = LstmWeights::bind(sess, "dec.lstm");
    let (h, cell) = lstm_step(sess, w, x, state.h, state.cell, cfg.d_model);

    // Luong attention over the speech embedding
    let wa = sess.param("dec.wa");
    let hw = sess.tape.matmul(h, wa);
    let zt = sess.tape.transpose(inputs.z_a);
    let scores = sess.tape.matmul(hw, zt);
    let attn = sess.tape.softmax_rows_masked(scores, inputs.speech_mask);
    let context = sess.tape.matmul(attn, inputs.z_a);

    let hc = sess.tape.concat_cols(h, context);
    let wu = sess.param("dec.wu");
    let bu = sess.param("dec.bu");
    let u0 = sess.tape.matmul(hc, wu);
    let u1 = sess.tape.add(u0, bu);
    let u = sess.tape.tanh(u1);

    let kind = state
        .derivation
        .frontier_kind(inputs.grammar)
        .expect("incomplete derivation has a frontier");
    let probs = match (&mask, kind) {
        (ActionMask::Rules(m), FrontierKind::Rule(_)) => {
            let wp = sess.param("dec.wp");
            let bp = sess.param("dec.bp");
            let l0 = sess.tape.matmul(u, wp);
            let l1 = sess.tape.add(l0, bp);
            let logits = sess.tape.tanh(l1);
            sess.tape.softmax_rows_masked(logits, m)
        }
        (ActionMask::Columns(m), FrontierKind::Column) => {
            let node_mask = column_node_mask(m, inputs.inventory.n_tables);
            pointer_probs(sess, u, inputs.z_s, &node_mask)
        }
        (ActionMask::Tables(m), FrontierKind::Table) => {
            let l_s = crate::tensor::mat(sess.tape.value(inputs.z_s)).nrows();
            let mut node_mask = vec![false; l_s];
            for (t, &ok) in m.iter().enumerate() {
                node_mask[t] = ok;
            }
            pointer_probs(sess, u, inputs.z_s, &node_mask)
        }
        (ActionMask::Values(m), FrontierKind::Value) => {
            let ve = inputs.value_emb.expect("value frontier needs candidates");
            pointer_probs(sess, u, ve, m)
        }
        _ => unreachable!("mask variant follows frontier kind"),
    };

    state.h = h;
    state.cell = cell;
    state.context = context;
    Ok(StepDistribution { probs, mask })
}

fn column_node_mask(cols: &[bool], n_tables: usize) -> Vec<bool> {
    let mut mask = vec![false; n_tables + cols.len()];
    for (c, &ok) in cols.iter().enumerate() {
        mask[n_tables + c] = ok;
    }
    mask
}

fn pointer_probs(sess: &mut Session, u: Var, memory: Var, mask: &[bool]) -> Var {
    let ws = sess.param("dec.ws");
    let uw = sess.tape.matmul(u, ws);
    let mt = sess.tape.transpose(memory);
    let logits = sess.tape.matmul(uw, mt);
    sess.tape.softmax_rows_masked(logits, mask)
}

/// Record a chosen action: updates the derivation and the embeddings fed
/// into the next step.
pub fn advance(state: &mut DecoderState, grammar: &Grammar, action: Action) {
    state.prev_nt = state.derivation.frontier_nt();
    state.derivation.apply(grammar, &action);
    state.prev_action = Some(action);
}

/// Greedy decode: argmax of each step distribution until the derivation
/// completes. Masking guarantees every emitted sequence replays legally.
pub fn decode_greedy(
    sess: &mut Session,
    cfg: &DecoderConfig,
    inputs: &DecodeInputs,
) -> Result<ActionSequence, DecoderError> {
    let mut state = init_state(sess, cfg, inputs)?;
    let mut actions = Vec::new();
    while !state.derivation.is_complete() {
        if state.derivation.steps() >= cfg.max_steps {
            return Err(DecoderError::MaxStepsExceeded(cfg.max_steps));
        }
        let dist = step(sess, cfg, inputs, &mut state)?;
        if dist.mask.count() == 0 {
            return Err(DecoderError::MaxStepsExceeded(state.derivation.steps()));
        }
        let row = crate::tensor::mat(sess.tape.value(dist.probs));
        let action = match &dist.mask {
            ActionMask::Rules(m) => {
                let r = argmax_masked(row.row(0), m);
                Action::ApplyRule(r)
            }
            ActionMask::Columns(m) => {
                let node_mask = column_node_mask(m, inputs.inventory.n_tables);
                let node = argmax_masked(row.row(0), &node_mask);
                Action::SelectColumn(node - inputs.inventory.n_tables)
            }
            ActionMask::Tables(m) => {
                let l_s = row.ncols();
                let mut node_mask = vec![false; l_s];
                for (t, &ok) in m.iter().enumerate() {
                    node_mask[t] = ok;
                }
                Action::SelectTable(argmax_masked(row.row(0), &node_mask))
            }
            ActionMask::Values(m) => Action::SelectValue(argmax_masked(row.row(0), m)),
            ActionMask::Done => unreachable!(),
        };
        advance(&mut state, inputs.grammar, action);
        actions.push(action);
    }
    Ok(actions)
}

fn argmax_masked(row: ndarray::ArrayView1<f64>, mask: &[bool]) -> usize {
    let mut best = None;
    for (i, &ok) in mask.iter().enumerate() {
        if !ok {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if row[i] > row[b] => best = Some(i),
            _ => {}
        }
    }
    best.expect("mask has at least one legal action")
}

/// Teacher-forced negative log-likelihood of a gold action sequence.
/// Every gold action must be legal under the masks; a masked gold action is
/// a dataset/grammar inconsistency reported as [`DecoderError::GoldActionMasked`].
pub fn teacher_forced_nll(
    sess: &mut Session,
    cfg: &DecoderConfig,
    inputs: &DecodeInputs,
    gold: &[Action],
) -> Result<Var, DecoderError> {
    let mut state = init_state(sess, cfg, inputs)?;
    let mut terms = Vec::with_capacity(gold.len());
    for (i, action) in gold.iter().enumerate() {
        let dist = step(sess, cfg, inputs, &mut state)?;
        if !dist.mask.allows(action) {
            return Err(DecoderError::GoldActionMasked {
                step: i,
                action: *action,
            });
        }
        let col = dist.index_of(action, inputs.inventory.n_tables);
        let p = sess.tape.pick(dist.probs, 0, col);
        let lp = sess.tape.ln(p);
        terms.push(lp);
        advance(&mut state, inputs.grammar, *action);
    }
    let total = sess.tape.add_many(&terms);
    Ok(sess.tape.scale(total, -1.0))
}

/// Deterministic sampling decode used by robustness tests: picks a random
/// legal action regardless of the distribution.
pub fn decode_random_walk(
    sess: &mut Session,
    cfg: &DecoderConfig,
    inputs: &DecodeInputs,
    rng: &mut ChaCha8Rng,
) -> Result<ActionSequence, DecoderError> {
    use rand::Rng;
    let mut state = init_state(sess, cfg, inputs)?;
    let mut actions = Vec::new();
    while !state.derivation.is_complete() {
        if state.derivation.steps() >= cfg.max_steps {
            return Err(DecoderError::MaxStepsExceeded(cfg.max_steps));
        }
        let dist = step(sess, cfg, inputs, &mut state)?;
        // distribution sanity: probabilities on the legal set sum to one
        let row = crate::tensor::mat(sess.tape.value(dist.probs));
        let sum: f64 = row.row(0).sum();
        debug_assert!((sum - 1.0).abs() < 1e-6, "probability mass {sum}");
        let action = match &dist.mask {
            ActionMask::Rules(m) => Action::ApplyRule(pick_random(m, rng)),
            ActionMask::Columns(m) => Action::SelectColumn(pick_random(m, rng)),
            ActionMask::Tables(m) => Action::SelectTable(pick_random(m, rng)),
            ActionMask::Values(m) => Action::SelectValue(pick_random(m, rng)),
            ActionMask::Done => unreachable!(),
        };
        advance(&mut state, inputs.grammar, action);
        actions.push(action);
    }
    fn pick_random(mask: &[bool], rng: &mut ChaCha8Rng) -> usize {
        let open: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect();
        open[rng.gen_range(0..open.len())]
    }
    Ok(actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;
    use crate::semql::tests::{products_schema, wimmera_schema};
    use crate::semql::{load_grammar, replay};
    use crate::tensor::mat;
    use ndarray::Array2;
    use rand::Rng;

    fn toy_cfg(d: usize) -> DecoderConfig {
        DecoderConfig {
            d_model: d,
            d_action: 3,
            d_type: 3,
            max_steps: 40,
        }
    }

    fn rand_mat(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    struct Fixture {
        grammar: Grammar,
        inventory: ColumnInventory,
        z_a: Array2<f64>,
        z_s: Array2<f64>,
        v: Array2<f64>,
        mask: Vec<bool>,
    }

    fn fixture(seed: u64, d: usize) -> Fixture {
        let schema = products_schema();
        let grammar = Grammar::builtin();
        let inventory = ColumnInventory::build(&schema);
        let graph = crate::schema_encoder::build_schema_graph(&schema);
        let mut rng = seeded_rng(seed);
        Fixture {
            grammar,
            z_a: rand_mat(&mut rng, 6, d),
            z_s: rand_mat(&mut rng, graph.n_nodes(), d),
            v: rand_mat(&mut rng, 3, d),
            mask: vec![true, true, true, true, true, false],
            inventory,
        }
    }

    fn store_for(cfg: &DecoderConfig, grammar: &Grammar, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        init_decoder_params(
            &mut store,
            cfg,
            grammar.n_rules(),
            grammar.n_nonterminals(),
            &mut rng,
        );
        store
    }

    #[test]
    fn init_state_is_max_pool() {
        let fx = fixture(21, 4);
        let cfg = toy_cfg(4);
        let store = store_for(&cfg, &fx.grammar, 1);
        let mut sess = Session::new(&store);
        let z_a = sess.tape.leaf2(2, 4, vec![1.0, 0.0, 3.0, -1.0, 0.0, 2.0, 1.0, 5.0]);
        let z_s = sess.tape.leaf(fx.z_s.clone().into_dyn());
        let inputs = DecodeInputs {
            z_a,
            z_s,
            value_emb: None,
            speech_mask: &[true, true],
            grammar: &fx.grammar,
            inventory: &fx.inventory,
            n_candidates: 0,
        };
        let st = init_state(&mut sess, &cfg, &inputs).unwrap();
        let h0 = mat(sess.tape.value(st.h)).to_owned();
        assert_eq!(h0.row(0).to_vec(), vec![1.0, 2.0, 3.0, 5.0]);
        // single row: h0 equals the row itself
        let mut sess = Session::new(&store);
        let z_a = sess.tape.leaf2(1, 4, vec![0.5, -0.5, 0.25, 0.0]);
        let z_s = sess.tape.leaf(fx.z_s.clone().into_dyn());
        let inputs = DecodeInputs {
            z_a,
            z_s,
            value_emb: None,
            speech_mask: &[true],
            grammar: &fx.grammar,
            inventory: &fx.inventory,
            n_candidates: 0,
        };
        let st = init_state(&mut sess, &cfg, &inputs).unwrap();
        assert_eq!(
            mat(sess.tape.value(st.h)).row(0).to_vec(),
            vec![0.5, -0.5, 0.25, 0.0]
        );
    }

    /// Hand-set parameters on a 2-rule grammar: the step distribution must
    /// match a by-hand softmax computation.
    #[test]
    fn step_matches_hand_computation() {
        let grammar = load_grammar("Z := x\nZ := y").unwrap();
        let schema = wimmera_schema();
        let inventory = ColumnInventory::build(&schema);
        let d = 2usize;
        let cfg = DecoderConfig {
            d_model: d,
            d_action: 3,
            d_type: 3,
            max_steps: 10,
        };
        let mut store = store_for(&cfg, &grammar, 3);
        // zero the LSTM so h_1 = 0.5 * tanh(0.5 * 0) = 0 exactly
        store.get_mut("dec.lstm.wx").fill(0.0);
        store.get_mut("dec.lstm.wh").fill(0.0);
        store.get_mut("dec.lstm.b").fill(0.0);
        // attention scores 0 -> uniform over two frames -> context = mean
        store.get_mut("dec.wa").fill(0.0);
        // u = tanh([h; ctx] W_u), W_u top half zero, bottom half identity
        store.get_mut("dec.wu").fill(0.0);
        {
            let wu = store.get_mut("dec.wu");
            wu[[2, 0]] = 1.0;
            wu[[3, 1]] = 1.0;
        }
        store.get_mut("dec.bu").fill(0.0);
        {
            let wp = store.get_mut("dec.wp");
            wp.fill(0.0);
            wp[[0, 0]] = 1.0;
            wp[[1, 1]] = 1.0;
        }
        store.get_mut("dec.bp").fill(0.0);

        let z_rows = [[0.3f64, -0.7], [0.9, 0.1]];
        let mut sess = Session::new(&store);
        let z_a = sess
            .tape
            .leaf2(2, 2, z_rows.iter().flatten().copied().collect());
        let z_s = sess.tape.leaf2(1, 2, vec![0.0, 0.0]);
        let inputs = DecodeInputs {
            z_a,
            z_s,
            value_emb: None,
            speech_mask: &[true, true],
            grammar: &grammar,
            inventory: &inventory,
            n_candidates: 0,
        };
        let mut st = init_state(&mut sess, &cfg, &inputs).unwrap();
        let dist = step(&mut sess, &cfg, &inputs, &mut st).unwrap();
        let got = mat(sess.tape.value(dist.probs)).row(0).to_vec();

        // by hand: h1 = o * tanh(c1), gates all sigmoid(0)=0.5 except forget
        // bias 1: c1 = sigmoid(1)*0 + 0.5*tanh(0) = 0, h1 = 0.5*tanh(0) = 0.
        // ctx = mean of z rows; u = tanh(ctx); logits = tanh(u); softmax.
        let ctx: [f64; 2] = [(0.3 + 0.9) / 2.0, (-0.7 + 0.1) / 2.0];
        let u = [ctx[0].tanh(), ctx[1].tanh()];
        let logits = [u[0].tanh(), u[1].tanh()];
        let m = logits[0].max(logits[1]);
        let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
        let z = e[0] + e[1];
        let want = [e[0] / z, e[1] / z];
        assert!((got[0] - want[0]).abs() < 1e-9, "{got:?} vs {want:?}");
        assert!((got[1] - want[1]).abs() < 1e-9);
    }

    #[test]
    fn pointer_mass_restricted_to_legal_nodes() {
        let fx = fixture(22, 8);
        let cfg = toy_cfg(8);
        let store = store_for(&cfg, &fx.grammar, 4);
        let mut sess = Session::new(&store);
        let z_a = sess.tape.leaf(fx.z_a.clone().into_dyn());
        let z_s = sess.tape.leaf(fx.z_s.clone().into_dyn());
        let v = sess.tape.leaf(fx.v.clone().into_dyn());
        let inputs = DecodeInputs {
            z_a,
            z_s,
            value_emb: Some(v),
            speech_mask: &fx.mask,
            grammar: &fx.grammar,
            inventory: &fx.inventory,
            n_candidates: 3,
        };
        let mut st = init_state(&mut sess, &cfg, &inputs).unwrap();
        let p = |lhs: &str, rhs: &[&str]| fx.grammar.find_production(lhs, rhs).unwrap();
        for a in [
            Action::ApplyRule(p("Z", &["R"])),
            Action::ApplyRule(p("R", &["Select"])),
            Action::ApplyRule(p("Select", &["A"])),
            Action::ApplyRule(p("A", &["none", "C", "T"])),
        ] {
            let dist = step(&mut sess, &cfg, &inputs, &mut st).unwrap();
            assert!(dist.mask.allows(&a));
            advance(&mut st, &fx.grammar, a);
        }
        // frontier C: distribution over schema nodes, mass only on columns
        let dist = step(&mut sess, &cfg, &inputs, &mut st).unwrap();
        let row = mat(sess.tape.value(dist.probs)).row(0).to_owned();
        let n_tables = fx.inventory.n_tables;
        let sum: f64 = row.sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for t in 0..n_tables {
            assert_eq!(row[t], 0.0, "table node {t} must carry no mass");
        }
        // pick product_name (only in Products): next table mask is a point mass
        let col = fx.inventory.index_of("product_name").unwrap();
        advance(&mut st, &fx.grammar, Action::SelectColumn(col));
        let dist = step(&mut sess, &cfg, &inputs, &mut st).unwrap();
        let row = mat(sess.tape.value(dist.probs)).row(0).to_owned();
        assert!((row[0] - 1.0).abs() < 1e-9, "point mass on Products");
        assert_eq!(row[1], 0.0);
    }

    #[test]
    fn greedy_decode_is_deterministic_and_grammatical() {
        let fx = fixture(23, 8);
        let schema = products_schema();
        let cfg = toy_cfg(8);
        let store = store_for(&cfg, &fx.grammar, 5);
        let decode = || {
            let mut sess = Session::new(&store);
            let z_a = sess.tape.leaf(fx.z_a.clone().into_dyn());
            let z_s = sess.tape.leaf(fx.z_s.clone().into_dyn());
            let v = sess.tape.leaf(fx.v.clone().into_dyn());
            let inputs = DecodeInputs {
                z_a,
                z_s,
                value_emb: Some(v),
                speech_mask: &fx.mask,
                grammar: &fx.grammar,
                inventory: &fx.inventory,
                n_candidates: 3,
            };
            decode_greedy(&mut sess, &cfg, &inputs).unwrap()
        };
        let a = decode();
        let b = decode();
        assert_eq!(a, b);
        replay(&a, &fx.grammar, &schema, 3, cfg.max_steps).expect("greedy output replays");
    }

    /// Random rollouts with random parameters: every completed sequence
    /// replays legally; no rollout emits an illegal action.
    #[test]
    fn random_rollouts_always_grammatical() {
        let fx = fixture(24, 8);
        let schema = products_schema();
        let cfg = toy_cfg(8);
        let mut walk_rng = seeded_rng(77);
        for trial in 0..50 {
            let store = store_for(&cfg, &fx.grammar, 100 + trial);
            let mut sess = Session::new(&store);
            let z_a = sess.tape.leaf(fx.z_a.clone().into_dyn());
            let z_s = sess.tape.leaf(fx.z_s.clone().into_dyn());
            let v = sess.tape.leaf(fx.v.clone().into_dyn());
            let inputs = DecodeInputs {
                z_a,
                z_s,
                value_emb: Some(v),
                speech_mask: &fx.mask,
                grammar: &fx.grammar,
                inventory: &fx.inventory,
                n_candidates: 3,
            };
            let actions = decode_random_walk(&mut sess, &cfg, &inputs, &mut walk_rng).unwrap();
            replay(&actions, &fx.grammar, &schema, 3, cfg.max_steps).expect("rollout replays");
        }
    }

    #[test]
    fn teacher_forcing_gold_is_finite() {
        let fx = fixture(25, 8);
        let schema = products_schema();
        let cfg = toy_cfg(8);
        let store = store_for(&cfg, &fx.grammar, 6);
        let sql = "SELECT T1.product_name FROM Products AS T1 JOIN Ref_Colors AS T2 \
                   WHERE T2.color_description = 1";
        let (gold, values) =
            crate::semql::sql_to_actions_auto(sql, &schema, &fx.grammar).unwrap();
        let mut sess = Session::new(&store);
        let z_a = sess.tape.leaf(fx.z_a.clone().into_dyn());
        let z_s = sess.tape.leaf(fx.z_s.clone().into_dyn());
        let mut rng = seeded_rng(30);
        let v = sess
            .tape
            .leaf(rand_mat(&mut rng, values.len(), 8).into_dyn());
        let inputs = DecodeInputs {
            z_a,
            z_s,
            value_emb: Some(v),
            speech_mask: &fx.mask,
            grammar: &fx.grammar,
            inventory: &fx.inventory,
            n_candidates: values.len(),
        };
        let nll = teacher_forced_nll(&mut sess, &cfg, &inputs, &gold).unwrap();
        let l = sess.tape.scalar(nll);
        assert!(l.is_finite() && l > 0.0, "loss {l}");
    }
}
