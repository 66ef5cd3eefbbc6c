//! Schema encoder: typed undirected graph over table and column nodes (same-
//! name columns merged into one node), token-level BiLSTM node embeddings,
//! and a 2-layer graph convolution with symmetric-normalized adjacency.

use crate::nn::{bilstm, ffn2, token_ids, LstmWeights};
use crate::params::{ParamStore, Session};
use crate::schema::Schema;
use crate::semql::ColumnInventory;
use crate::tensor::Var;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaEncodeError {
    #[error("node {0:?} tokenizes to nothing")]
    EmptyNodeName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Table,
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeType {
    TableColumn,
    ForeignKey,
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub name: String,
    pub tokens: Vec<String>,
}

/// Undirected schema graph. Nodes are ordered tables-first, then the merged
/// column inventory, so node `n_tables + i` is column inventory entry `i`.
#[derive(Debug, Clone)]
pub struct SchemaGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize, EdgeType)>,
    /// Column name -> every (table, column) the merged node stands for.
    pub merged_map: HashMap<String, Vec<(String, String)>>,
    pub n_tables: usize,
}

impl SchemaGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Split an identifier on underscores, case changes and letter/digit
/// boundaries, lowercased: `color_code` and `ColorCode2` both tokenize.
pub fn tokenize_name(name: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut prev: Option<char> = None;
    for c in name.chars() {
        let boundary = match (prev, c) {
            (_, '_') => true,
            (Some(p), c) if p.is_ascii_lowercase() && c.is_ascii_uppercase() => true,
            (Some(p), c) if p.is_ascii_alphabetic() && c.is_ascii_digit() => true,
            (Some(p), c) if p.is_ascii_digit() && c.is_ascii_alphabetic() => true,
            _ => false,
        };
        if boundary && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if c != '_' {
            cur.push(c.to_ascii_lowercase());
        }
        prev = Some(c);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Build the schema graph: one node per table, one per distinct column name,
/// table-column membership edges, and foreign-key edges between the two
/// column nodes — or between the table nodes when merging collapsed both
/// endpoints into a single column node.
pub fn build_schema_graph(schema: &Schema) -> SchemaGraph {
    let inventory = ColumnInventory::build(schema);
    let n_tables = schema.tables.len();
    let mut nodes: Vec<GraphNode> = schema
        .tables
        .iter()
        .map(|t| GraphNode {
            kind: NodeKind::Table,
            name: t.name.clone(),
            tokens: tokenize_name(&t.name),
        })
        .collect();
    let mut merged_map: HashMap<String, Vec<(String, String)>> = HashMap::new();
    for (name, tables) in inventory.names.iter().zip(&inventory.tables) {
        nodes.push(GraphNode {
            kind: NodeKind::Column,
            name: name.clone(),
            tokens: tokenize_name(name),
        });
        merged_map.insert(
            name.clone(),
            tables
                .iter()
                .map(|&ti| (schema.tables[ti].name.clone(), name.clone()))
                .collect(),
        );
    }

    let mut edges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push = |a: usize, b: usize, ty: EdgeType, edges: &mut Vec<(usize, usize, EdgeType)>| {
        let key = (a.min(b), a.max(b), ty == EdgeType::ForeignKey);
        if a != b && seen.insert(key) {
            edges.push((a.min(b), a.max(b), ty));
        }
    };
    for (ti, t) in schema.tables.iter().enumerate() {
        for c in &t.columns {
            let ci = inventory.index_of(&c.name).expect("column in inventory");
            push(ti, n_tables + ci, EdgeType::TableColumn, &mut edges);
        }
    }
    for (st, sc, dt, dc) in &schema.foreign_keys {
        let sci = inventory.index_of(sc).expect("fk source column");
        let dci = inventory.index_of(dc).expect("fk target column");
        if sci == dci {
            let sti = schema.table_index(st).expect("fk source table");
            let dti = schema.table_index(dt).expect("fk target table");
            push(sti, dti, EdgeType::ForeignKey, &mut edges);
        } else {
            push(n_tables + sci, n_tables + dci, EdgeType::ForeignKey, &mut edges);
        }
    }
    SchemaGraph {
        nodes,
        edges,
        merged_map,
        n_tables,
    }
}

/// Symmetric-normalized adjacency with self loops.
pub fn normalized_adjacency(graph: &SchemaGraph) -> Array2<f64> {
    let n = graph.n_nodes();
    let mut a = Array2::<f64>::eye(n);
    for &(u, v, _) in &graph.edges {
        a[[u, v]] = 1.0;
        a[[v, u]] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if a[[i, j]] != 0.0 {
                out[[i, j]] = a[[i, j]] / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcnMode {
    /// 2-layer graph convolution (the full model).
    Gcn,
    /// Skip graph propagation entirely.
    Identity,
    /// BiLSTM over the node sequence instead of graph propagation.
    BilstmSeq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaEncoderConfig {
    pub d_token: usize,
    pub hidden: usize,
    pub d_model: usize,
    pub vocab_buckets: usize,
    pub gcn_mode: GcnMode,
}

impl Default for SchemaEncoderConfig {
    fn default() -> Self {
        Self {
            d_token: 512,
            hidden: 512,
            d_model: 512,
            vocab_buckets: 2048,
            gcn_mode: GcnMode::Gcn,
        }
    }
}

pub fn init_schema_params(store: &mut ParamStore, cfg: &SchemaEncoderConfig, rng: &mut ChaCha8Rng) {
    // token identity must survive the LSTM gate biases, so the embedding
    // amplitude matches the hidden scale rather than the usual small init
    store.init_embedding("schema.tok_emb", cfg.vocab_buckets, cfg.d_token, 0.5, rng);
    crate::nn::init_lstm(store, "schema.lstm.fwd", cfg.d_token, cfg.hidden, rng);
    crate::nn::init_lstm(store, "schema.lstm.bwd", cfg.d_token, cfg.hidden, rng);
    store.init_xavier("schema.head.w1", 2 * cfg.hidden, cfg.d_model, rng);
    store.init_zeros("schema.head.b1", 1, cfg.d_model);
    store.init_xavier("schema.head.w2", cfg.d_model, cfg.d_model, rng);
    store.init_zeros("schema.head.b2", 1, cfg.d_model);
    match cfg.gcn_mode {
        GcnMode::Gcn => {
            store.init_xavier("schema.gcn1.theta", cfg.d_model, cfg.d_model, rng);
            store.init_xavier("schema.gcn2.theta", cfg.d_model, cfg.d_model, rng);
        }
        GcnMode::Identity => {}
        GcnMode::BilstmSeq => {
            crate::nn::init_lstm(store, "schema.seq.fwd", cfg.d_model, cfg.d_model, rng);
            crate::nn::init_lstm(store, "schema.seq.bwd", cfg.d_model, cfg.d_model, rng);
            store.init_xavier("schema.seq.proj", 2 * cfg.d_model, cfg.d_model, rng);
        }
    }
}

/// Embed one token sequence through the shared token BiLSTM and FFN head.
/// Returns the per-token states `(n, 2h)` and the pooled `(1, d_model)` row.
pub fn embed_token_seq(
    sess: &mut Session,
    cfg: &SchemaEncoderConfig,
    tokens: &[String],
) -> Result<(Var, Var), SchemaEncodeError> {
    if tokens.is_empty() {
        return Err(SchemaEncodeError::EmptyNodeName(String::new()));
    }
    let ids = token_ids(tokens, cfg.vocab_buckets);
    let table = sess.param("schema.tok_emb");
    let xs = sess.tape.gather_rows(table, &ids);
    let fwd = LstmWeights::bind(sess, "schema.lstm.fwd");
    let bwd = LstmWeights::bind(sess, "schema.lstm.bwd");
    let out = bilstm(sess, fwd, bwd, xs, cfg.hidden);
    let w1 = sess.param("schema.head.w1");
    let b1 = sess.param("schema.head.b1");
    let w2 = sess.param("schema.head.w2");
    let b2 = sess.param("schema.head.b2");
    let pooled = ffn2(sess, out.finals, w1, b1, w2, b2);
    Ok((out.states, pooled))
}

/// Embed every node of a graph: `(l_s, d_model)` rows ordered as the nodes.
pub fn embed_nodes(
    sess: &mut Session,
    cfg: &SchemaEncoderConfig,
    graph: &SchemaGraph,
) -> Result<Var, SchemaEncodeError> {
    let mut rows = Vec::with_capacity(graph.n_nodes());
    for node in &graph.nodes {
        if node.tokens.is_empty() {
            return Err(SchemaEncodeError::EmptyNodeName(node.name.clone()));
        }
        let (_, pooled) = embed_token_seq(sess, cfg, &node.tokens)?;
        rows.push(pooled);
    }
    Ok(sess.tape.concat_rows(&rows))
}

/// Graph propagation over node embeddings according to the configured mode.
pub fn encode_graph(
    sess: &mut Session,
    cfg: &SchemaEncoderConfig,
    h: Var,
    graph: &SchemaGraph,
) -> Var {
    match cfg.gcn_mode {
        GcnMode::Identity => h,
        GcnMode::Gcn => {
            let adj = normalized_adjacency(graph);
            let (n, _) = adj.dim();
            let a = sess.tape.leaf2(n, n, adj.iter().copied().collect());
            let t1 = sess.param("schema.gcn1.theta");
            let t2 = sess.param("schema.gcn2.theta");
            let h1 = sess.tape.matmul(h, t1);
            let h1 = sess.tape.matmul(a, h1);
            let h1 = sess.tape.relu(h1);
            let h2 = sess.tape.matmul(h1, t2);
            sess.tape.matmul(a, h2)
        }
        GcnMode::BilstmSeq => {
            let fwd = LstmWeights::bind(sess, "schema.seq.fwd");
            let bwd = LstmWeights::bind(sess, "schema.seq.bwd");
            let out = bilstm(sess, fwd, bwd, h, cfg.d_model);
            let proj = sess.param("schema.seq.proj");
            sess.tape.matmul(out.states, proj)
        }
    }
}
