//! Schema linking and the cross-modal transformer.
//!
//! Linking scores each (speech frame, schema node) pair by cosine similarity
//! and adds the score-weighted schema rows back into the speech stream. The
//! fusion encoder then runs stacked blocks where each modality applies
//! self-attention over itself plus cross-attention querying itself against
//! the other modality's keys/values; the two attention outputs are summed,
//! followed by residual layer norm and a feed-forward residual. Padded
//! speech frames are masked out of every softmax.

use crate::nn::{dropout, ffn2, multihead_attention};
use crate::params::{ParamStore, Session};
use crate::tensor::Var;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_model: usize,
    pub dropout: f64,
    pub use_positional_encoding: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_ff: 1024,
            d_model: 512,
            dropout: 0.3,
            use_positional_encoding: true,
        }
    }
}

pub fn init_fusion_params(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d_model;
    for l in 0..cfg.n_layers {
        for side in ["a", "s"] {
            let p = format!("fusion.l{l}.{side}");
            store.init_xavier(&format!("{p}.wq"), d, d, rng);
            store.init_xavier(&format!("{p}.wk"), d, d, rng);
            store.init_xavier(&format!("{p}.wv"), d, d, rng);
            store.init_xavier(&format!("{p}.wo_sa"), d, d, rng);
            store.init_xavier(&format!("{p}.wo_ca"), d, d, rng);
            store.init_const(&format!("{p}.ln1.g"), 1, d, 1.0);
            store.init_zeros(&format!("{p}.ln1.b"), 1, d);
            store.init_xavier(&format!("{p}.ffn.w1"), d, cfg.d_ff, rng);
            store.init_zeros(&format!("{p}.ffn.b1"), 1, cfg.d_ff);
            store.init_xavier(&format!("{p}.ffn.w2"), cfg.d_ff, d, rng);
            store.init_zeros(&format!("{p}.ffn.b2"), 1, d);
            store.init_const(&format!("{p}.ln2.g"), 1, d, 1.0);
            store.init_zeros(&format!("{p}.ln2.b"), 1, d);
        }
    }
}

/// Cosine similarity between every speech row and every schema row, entries
/// clamped into `[-1, 1]`; all-zero rows score 0.
pub fn link_scores(sess: &mut Session, z_a: Var, z_s: Var) -> Var {
    let t = &mut sess.tape;
    let an = t.normalize_rows(z_a);
    let sn = t.normalize_rows(z_s);
    let st = t.transpose(sn);
    let g = t.matmul(an, st);
    t.clamp11(g)
}

/// Add the score-weighted schema rows into the speech stream: `Z_a + g Z_s`.
pub fn apply_linking(sess: &mut Session, z_a: Var, z_s: Var, g: Var) -> Var {
    let t = &mut sess.tape;
    let c = t.matmul(g, z_s);
    t.add(z_a, c)
}

struct Projections {
    q: Var,
    k: Var,
    v: Var,
}

fn project(sess: &mut Session, prefix: &str, z: Var) -> Projections {
    let wq = sess.param(&format!("{prefix}.wq"));
    let wk = sess.param(&format!("{prefix}.wk"));
    let wv = sess.param(&format!("{prefix}.wv"));
    Projections {
        q: sess.tape.matmul(z, wq),
        k: sess.tape.matmul(z, wk),
        v: sess.tape.matmul(z, wv),
    }
}

#[allow(clippy::too_many_arguments)]
fn half_block(
    sess: &mut Session,
    prefix: &str,
    cfg: &FusionConfig,
    z_own: Var,
    own: &Projections,
    other: &Projections,
    own_mask: &[bool],
    other_mask: &[bool],
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Var {
    let sa = multihead_attention(sess, own.q, own.k, own.v, cfg.n_heads, own_mask);
    let wo_sa = sess.param(&format!("{prefix}.wo_sa"));
    let sa = sess.tape.matmul(sa, wo_sa);
    let ca = multihead_attention(sess, own.q, other.k, other.v, cfg.n_heads, other_mask);
    let wo_ca = sess.param(&format!("{prefix}.wo_ca"));
    let ca = sess.tape.matmul(ca, wo_ca);
    let y = sess.tape.add(sa, ca);
    let y = dropout(sess, y, cfg.dropout, rng.as_deref_mut());
    let y = sess.tape.add(y, z_own);
    let g1 = sess.param(&format!("{prefix}.ln1.g"));
    let b1 = sess.param(&format!("{prefix}.ln1.b"));
    let y = sess.tape.layer_norm(y, g1, b1, 1e-5);
    let w1 = sess.param(&format!("{prefix}.ffn.w1"));
    let fb1 = sess.param(&format!("{prefix}.ffn.b1"));
    let w2 = sess.param(&format!("{prefix}.ffn.w2"));
    let fb2 = sess.param(&format!("{prefix}.ffn.b2"));
    let f = ffn2(sess, y, w1, fb1, w2, fb2);
    let f = dropout(sess, f, cfg.dropout, rng.as_deref_mut());
    let f = sess.tape.add(f, y);
    let g2 = sess.param(&format!("{prefix}.ln2.g"));
    let b2 = sess.param(&format!("{prefix}.ln2.b"));
    sess.tape.layer_norm(f, g2, b2, 1e-5)
}

/// Run the stacked cross-modal blocks. `speech_mask` marks valid (unpadded)
/// speech rows; schema rows are never padded.
pub fn fuse(
    sess: &mut Session,
    cfg: &FusionConfig,
    z_a: Var,
    z_s: Var,
    speech_mask: &[bool],
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Var, Var) {
    let l_s = crate::tensor::mat(sess.tape.value(z_s)).nrows();
    let schema_mask = vec![true; l_s];
    let (mut za, mut zs) = (z_a, z_s);
    for l in 0..cfg.n_layers {
        let pa = format!("fusion.l{l}.a");
        let ps = format!("fusion.l{l}.s");
        let proj_a = project(sess, &pa, za);
        let proj_s = project(sess, &ps, zs);
        let new_a = half_block(
            sess, &pa, cfg, za, &proj_a, &proj_s, speech_mask, &schema_mask, &mut rng,
        );
        let new_s = half_block(
            sess, &ps, cfg, zs, &proj_s, &proj_a, &schema_mask, speech_mask, &mut rng,
        );
        za = new_a;
        zs = new_s;
    }
    (za, zs)
}
