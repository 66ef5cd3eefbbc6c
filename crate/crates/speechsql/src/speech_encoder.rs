//! Speech encoder: stacked convolution + batch-norm + ReLU blocks over the
//! `(time, mel)` feature plane, mel-axis mean pooling and a linear map to the
//! model width. Strided blocks halve the time axis with ceil rounding, so the
//! output length is `ceil(l / 2^{#strided blocks})`.

use crate::params::{ParamStore, Session};
use crate::tensor::{BatchStats, BnMode, ConvGeom, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeechEncoderConfig {
    pub n_blocks: usize,
    pub channels: usize,
    pub kernel: (usize, usize),
    /// 1-indexed blocks with stride 2 along time.
    pub time_stride_blocks: Vec<usize>,
    /// 1-indexed blocks with stride 2 along the mel axis (keeps the mel plane
    /// small enough for CPU training; the final mean pool removes it anyway).
    pub mel_stride_blocks: Vec<usize>,
    pub d_model: usize,
}

impl Default for SpeechEncoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 6,
            channels: 128,
            kernel: (3, 3),
            time_stride_blocks: vec![2, 4, 6],
            mel_stride_blocks: vec![2, 4, 6],
            d_model: 512,
        }
    }
}

impl SpeechEncoderConfig {
    /// Output length for an input of `l` frames.
    pub fn out_len(&self, l: usize) -> usize {
        let mut t = l;
        for b in 1..=self.n_blocks {
            if self.time_stride_blocks.contains(&b) {
                t = t.div_ceil(2);
            }
        }
        t
    }

    fn geom(&self, block: usize) -> ConvGeom {
        ConvGeom {
            k: self.kernel,
            stride: (
                if self.time_stride_blocks.contains(&block) { 2 } else { 1 },
                if self.mel_stride_blocks.contains(&block) { 2 } else { 1 },
            ),
            pad: (self.kernel.0 / 2, self.kernel.1 / 2),
        }
    }
}

pub fn init_speech_params(store: &mut ParamStore, cfg: &SpeechEncoderConfig, rng: &mut ChaCha8Rng) {
    for b in 1..=cfg.n_blocks {
        let cin = if b == 1 { 1 } else { cfg.channels };
        store.init_conv(
            &format!("speech.b{b}.w"),
            [cfg.channels, cin, cfg.kernel.0, cfg.kernel.1],
            rng,
        );
        store.init_zeros(&format!("speech.b{b}.b"), 1, cfg.channels);
        store.init_const(&format!("speech.b{b}.gamma"), 1, cfg.channels, 1.0);
        store.init_zeros(&format!("speech.b{b}.beta"), 1, cfg.channels);
        store.init_stat(&format!("speech.b{b}.run_mean"), cfg.channels, 0.0);
        store.init_stat(&format!("speech.b{b}.run_var"), cfg.channels, 1.0);
    }
    store.init_xavier("speech.proj.w", cfg.channels, cfg.d_model, rng);
    store.init_zeros("speech.proj.b", 1, cfg.d_model);
}

pub struct SpeechEncodeOut {
    /// Final convolution features `(channels, t_out, m_out)`.
    pub trunk: Var,
    /// Speech embedding `(t_out, d_model)`.
    pub z: Var,
    /// `(time, mel)` input plane of each block, outermost first; the
    /// autoencoder decoder mirrors these when upsampling.
    pub block_inputs: Vec<(usize, usize)>,
    /// Batch statistics per block in training mode, for running-stat updates.
    pub stats: Vec<(String, BatchStats)>,
}

/// Run the convolutional trunk and projection over `(l, 96)` features.
pub fn encode_speech(
    sess: &mut Session,
    cfg: &SpeechEncoderConfig,
    features: &Array2<f64>,
    training: bool,
) -> SpeechEncodeOut {
    let (l, m) = features.dim();
    let x = sess
        .tape
        .leaf2(l, m, features.iter().copied().collect());
    let mut cur = sess.tape.as_image(x);
    let mut block_inputs = Vec::with_capacity(cfg.n_blocks);
    let mut stats = Vec::new();
    let (mut t, mut mm) = (l, m);
    for b in 1..=cfg.n_blocks {
        block_inputs.push((t, mm));
        let geom = cfg.geom(b);
        let w = sess.param(&format!("speech.b{b}.w"));
        let bias = sess.param(&format!("speech.b{b}.b"));
        let gamma = sess.param(&format!("speech.b{b}.gamma"));
        let beta = sess.param(&format!("speech.b{b}.beta"));
        let conv = sess.tape.conv2d(cur, w, bias, geom);
        let mode = if training {
            BnMode::Training
        } else {
            let mean = crate::tensor::mat(sess.store().get(&format!("speech.b{b}.run_mean")))
                .row(0)
                .to_vec();
            let var = crate::tensor::mat(sess.store().get(&format!("speech.b{b}.run_var")))
                .row(0)
                .to_vec();
            BnMode::Inference { mean, var }
        };
        let (bn, batch_stats) = sess.tape.batch_norm(conv, gamma, beta, 1e-5, mode);
        if let Some(s) = batch_stats {
            stats.push((format!("speech.b{b}"), s));
        }
        cur = sess.tape.relu(bn);
        (t, mm) = geom.out_hw(t, mm);
    }
    let pooled = sess.tape.collapse_mel(cur);
    let w = sess.param("speech.proj.w");
    let b = sess.param("speech.proj.b");
    let proj = sess.tape.matmul(pooled, w);
    let z = sess.tape.add_row(proj, b);
    SpeechEncodeOut {
        trunk: cur,
        z,
        block_inputs,
        stats,
    }
}

/// Fold observed batch statistics into the running statistics.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, BatchStats)], momentum: f64) {
    for (prefix, s) in stats {
        let mean = store.get_mut(&format!("{prefix}.run_mean"));
        for (j, m) in s.mean.iter().enumerate() {
            mean[[0, j]] = (1.0 - momentum) * mean[[0, j]] + momentum * m;
        }
        let var = store.get_mut(&format!("{prefix}.run_var"));
        for (j, v) in s.var.iter().enumerate() {
            var[[0, j]] = (1.0 - momentum) * var[[0, j]] + momentum * v;
        }
    }
}
