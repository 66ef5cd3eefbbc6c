//! Shared network building blocks on top of the tape: LSTM cells, BiLSTM
//! encoders over short token sequences, two-layer feed-forward nets,
//! multi-head attention with key masking, sinusoidal positions and dropout.

use crate::params::Session;
use crate::tensor::Var;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Bound LSTM weights: `wx (d_in, 4h)`, `wh (h, 4h)`, `b (1, 4h)`.
/// Gate layout is `[input, forget, output, candidate]`.
#[derive(Clone, Copy)]
pub struct LstmWeights {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

impl LstmWeights {
    pub fn bind(sess: &mut Session, prefix: &str) -> Self {
        Self {
            wx: sess.param(&format!("{prefix}.wx")),
            wh: sess.param(&format!("{prefix}.wh")),
            b: sess.param(&format!("{prefix}.b")),
        }
    }
}

/// Register LSTM weights; forget gate bias starts at 1.
pub fn init_lstm(
    store: &mut crate::params::ParamStore,
    prefix: &str,
    d_in: usize,
    h: usize,
    rng: &mut ChaCha8Rng,
) {
    store.init_xavier(&format!("{prefix}.wx"), d_in, 4 * h, rng);
    store.init_xavier(&format!("{prefix}.wh"), h, 4 * h, rng);
    let mut b = ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 4 * h]));
    for j in h..2 * h {
        b[[0, j]] = 1.0;
    }
    store.insert(&format!("{prefix}.b"), b, true);
}

/// One LSTM step: inputs `(1, d_in)`, state `(1, h)` each.
pub fn lstm_step(
    sess: &mut Session,
    w: LstmWeights,
    x: Var,
    h: Var,
    c: Var,
    hidden: usize,
) -> (Var, Var) {
    let t = &mut sess.tape;
    let gx = t.matmul(x, w.wx);
    let gh = t.matmul(h, w.wh);
    let g0 = t.add(gx, gh);
    let gates = t.add(g0, w.b);
    let i = t.slice_cols(gates, 0, hidden);
    let f = t.slice_cols(gates, hidden, 2 * hidden);
    let o = t.slice_cols(gates, 2 * hidden, 3 * hidden);
    let g = t.slice_cols(gates, 3 * hidden, 4 * hidden);
    let i = t.sigmoid(i);
    let f = t.sigmoid(f);
    let o = t.sigmoid(o);
    let g = t.tanh(g);
    let fc = t.mul(f, c);
    let ig = t.mul(i, g);
    let c2 = t.add(fc, ig);
    let tc = t.tanh(c2);
    let h2 = t.mul(o, tc);
    (h2, c2)
}

/// Output of a bidirectional LSTM over a short sequence.
pub struct BiLstmOut {
    /// Per-position states, forward and backward concatenated: `(n, 2h)`.
    pub states: Var,
    /// Final forward state next to final backward state: `(1, 2h)`.
    pub finals: Var,
}

/// Run a BiLSTM over the rows of `xs (n, d_in)`.
pub fn bilstm(
    sess: &mut Session,
    fwd: LstmWeights,
    bwd: LstmWeights,
    xs: Var,
    hidden: usize,
) -> BiLstmOut {
    let n = crate::tensor::mat(sess.tape.value(xs)).nrows();
    assert!(n >= 1);
    let d = hidden;
    let zero = sess.tape.leaf2(1, d, vec![0.0; d]);
    let mut h = zero;
    let mut c = zero;
    let mut fwd_states = Vec::with_capacity(n);
    for i in 0..n {
        let x = sess.tape.slice_rows(xs, i, i + 1);
        let (h2, c2) = lstm_step(sess, fwd, x, h, c, d);
        h = h2;
        c = c2;
        fwd_states.push(h);
    }
    let fwd_final = h;
    let mut h = zero;
    let mut c = zero;
    let mut bwd_states = vec![zero; n];
    for i in (0..n).rev() {
        let x = sess.tape.slice_rows(xs, i, i + 1);
        let (h2, c2) = lstm_step(sess, bwd, x, h, c, d);
        h = h2;
        c = c2;
        bwd_states[i] = h;
    }
    let bwd_final = h;
    let rows: Vec<Var> = (0..n)
        .map(|i| sess.tape.concat_cols(fwd_states[i], bwd_states[i]))
        .collect();
    let states = sess.tape.concat_rows(&rows);
    let finals = sess.tape.concat_cols(fwd_final, bwd_final);
    BiLstmOut { states, finals }
}

/// Two-layer feed-forward with ReLU: `max(0, x W1 + b1) W2 + b2`.
pub fn ffn2(sess: &mut Session, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let t = &mut sess.tape;
    let h = t.matmul(x, w1);
    let h = t.add_row(h, b1);
    let h = t.relu(h);
    let y = t.matmul(h, w2);
    t.add_row(y, b2)
}

/// Multi-head scaled dot-product attention with a key-side mask; the output
/// projection is left to the caller. `q (lq, d)`, `k/v (lk, d)`.
pub fn multihead_attention(
    sess: &mut Session,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    key_mask: &[bool],
) -> Var {
    let d = crate::tensor::mat(sess.tape.value(q)).ncols();
    assert_eq!(d % n_heads, 0, "d_model must divide into heads");
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let t = &mut sess.tape;
        let qh = t.slice_cols(q, lo, hi);
        let kh = t.slice_cols(k, lo, hi);
        let vh = t.slice_cols(v, lo, hi);
        let kt = t.transpose(kh);
        let scores = t.matmul(qh, kt);
        let scores = t.scale(scores, scale);
        let attn = t.softmax_rows_masked(scores, key_mask);
        heads.push(t.matmul(attn, vh));
    }
    let mut out = heads[0];
    for h in &heads[1..] {
        out = sess.tape.concat_cols(out, *h);
    }
    out
}

/// Sinusoidal positional encoding matrix `(len, d)`.
pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((len, d));
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[pos, 2 * i]] = angle.sin();
            if 2 * i + 1 < d {
                pe[[pos, 2 * i + 1]] = angle.cos();
            }
        }
    }
    pe
}

/// Inverted dropout: identity at inference or p = 0.
pub fn dropout(sess: &mut Session, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else {
        return x;
    };
    if p <= 0.0 {
        return x;
    }
    let shape: Vec<usize> = sess.tape.value(x).shape().to_vec();
    let keep = 1.0 - p;
    let mask = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = sess.tape.leaf(mask);
    sess.tape.mul(x, m)
}

/// Map tokens to embedding rows through a stable hash into `buckets`.
pub fn token_ids(tokens: &[String], buckets: usize) -> Vec<usize> {
    tokens
        .iter()
        .map(|t| (crate::features::token_hash(t) % buckets as u64) as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ParamStore, Session};

    #[test]
    fn bilstm_shapes_and_determinism() {
        let mut rng = seeded_rng(4);
        let mut store = ParamStore::new();
        init_lstm(&mut store, "f", 5, 3, &mut rng);
        init_lstm(&mut store, "b", 5, 3, &mut rng);
        let xs_data: Vec<f64> = (0..20).map(|i| (i as f64 * 0.13).sin()).collect();
        let run = |store: &ParamStore| {
            let mut sess = Session::new(store);
            let xs = sess.tape.leaf2(4, 5, xs_data.clone());
            let f = LstmWeights::bind(&mut sess, "f");
            let b = LstmWeights::bind(&mut sess, "b");
            let out = bilstm(&mut sess, f, b, xs, 3);
            (
                crate::tensor::mat(sess.tape.value(out.states)).to_owned(),
                crate::tensor::mat(sess.tape.value(out.finals)).to_owned(),
            )
        };
        let (s1, f1) = run(&store);
        let (s2, f2) = run(&store);
        assert_eq!(s1.dim(), (4, 6));
        assert_eq!(f1.dim(), (1, 6));
        assert_eq!(s1, s2);
        assert_eq!(f1, f2);
        // finals = last forward state next to first-position backward state
        assert_eq!(f1[[0, 0]], s1[[3, 0]]);
        assert_eq!(f1[[0, 3]], s1[[0, 3]]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = seeded_rng(5);
        let mut store = ParamStore::new();
        store.init_xavier("unused", 1, 1, &mut rng);
        let mut sess = Session::new(&store);
        let q_data: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let k_data: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let q = sess.tape.leaf2(3, 4, q_data);
        let k = sess.tape.leaf2(5, 4, k_data.clone());
        let v = sess.tape.leaf2(5, 4, k_data);
        let mask = vec![true, true, false, true, true];
        let out = multihead_attention(&mut sess, q, k, v, 2, &mask);
        assert_eq!(crate::tensor::mat(sess.tape.value(out)).dim(), (3, 4));
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 6);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-12);
        assert!((pe[[2, 1]] - 2f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let x = sess.tape.leaf2(2, 3, vec![1.0; 6]);
        let y = dropout(&mut sess, x, 0.5, None);
        assert_eq!(y, x);
        let mut rng = seeded_rng(6);
        let z = dropout(&mut sess, x, 0.5, Some(&mut rng));
        let vz = crate::tensor::mat(sess.tape.value(z)).to_owned();
        for v in vz.iter() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }
    }
}
