//! The neural core: embeddings, per-row transformer layers, cell pooling,
//! vertical self-attention across snapshot rows, and final pooling into
//! utterance/column/table representations.
//!
//! Rows are encoded independently by the base transformer. Pooling collapses
//! each row to `S = 1 + |utterance| + |columns|` aligned slot vectors (CLS,
//! one per utterance sub-token, one per column). Vertical layers then attend
//! only among the K vectors sharing a slot: the attention logits carry an
//! additive mask that is `-inf` across slots, so cross-slot attention mass
//! is exactly zero, not merely small.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearize::{build_input, EncodedInput, Linearization, RowEncoding, Tag};
use crate::nn::{truncated_normal, NodeId, Tape, Tensor};
use crate::rng::rng_for;
use crate::snapshot::ContentSnapshot;
use crate::table::{Table, Utterance};
use crate::tokenizer::Vocab;

/// How column representations are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnPooling {
    /// Mean over each column's post-vertical cell vectors across rows.
    #[default]
    CellPool,
    /// Mean over base-transformer outputs at column-name positions
    /// (required when K = 1).
    NameTokenPool,
}

impl ColumnPooling {
    pub fn as_str(self) -> &'static str {
        match self {
            ColumnPooling::CellPool => "cell_pool",
            ColumnPooling::NameTokenPool => "name_token_pool",
        }
    }
}

impl std::str::FromStr for ColumnPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cell_pool" => Ok(ColumnPooling::CellPool),
            "name_token_pool" => Ok(ColumnPooling::NameTokenPool),
            _ => Err(Error::InvalidConfig(format!("unknown column pooling `{s}`"))),
        }
    }
}

/// Model hyperparameters; embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_layers: usize,
    pub vertical_layers: usize,
    pub k: usize,
    pub max_seq_len: usize,
    pub linearization: Linearization,
    pub column_pooling: ColumnPooling,
    pub dropout: f64,
    pub cvr_positions: usize,
}

impl ModelConfig {
    /// The desk-scale default configuration for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            num_layers: 2,
            vertical_layers: 3,
            k: 3,
            max_seq_len: 256,
            linearization: Linearization::NameTypeValue,
            column_pooling: ColumnPooling::CellPool,
            dropout: 0.0,
            cvr_positions: 20,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return fail("hidden_dim, num_heads, and ffn_dim must be positive".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.k == 1 && self.vertical_layers != 0 {
            return fail("vertical_layers must be 0 when k = 1".into());
        }
        if self.k == 1 && self.column_pooling != ColumnPooling::NameTokenPool {
            return fail("column_pooling must be name_token_pool when k = 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_seq_len < 8 {
            return fail("max_seq_len must be at least 8".into());
        }
        if self.cvr_positions == 0 {
            return fail("cvr_positions must be positive".into());
        }
        Ok(())
    }
}

/// The named parameter store. Index order is creation order and is the
/// canonical parameter order everywhere (gradients, optimizer, checkpoints).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Initialization scale for weights and embeddings.
pub const INIT_STD: f64 = 0.02;

/// The per-layer parameter suffixes, shared by base and vertical layers.
fn layer_param_shapes(d: usize, ffn: usize) -> Vec<(&'static str, usize, usize, Init)> {
    vec![
        ("attn.q.weight", d, d, Init::Normal),
        ("attn.q.bias", 1, d, Init::Zero),
        ("attn.k.weight", d, d, Init::Normal),
        ("attn.k.bias", 1, d, Init::Zero),
        ("attn.v.weight", d, d, Init::Normal),
        ("attn.v.bias", 1, d, Init::Zero),
        ("attn.out.weight", d, d, Init::Normal),
        ("attn.out.bias", 1, d, Init::Zero),
        ("attn.norm.gain", 1, d, Init::One),
        ("attn.norm.bias", 1, d, Init::Zero),
        ("ffn.in.weight", d, ffn, Init::Normal),
        ("ffn.in.bias", 1, ffn, Init::Zero),
        ("ffn.out.weight", ffn, d, Init::Normal),
        ("ffn.out.bias", 1, d, Init::Zero),
        ("ffn.norm.gain", 1, d, Init::One),
        ("ffn.norm.bias", 1, d, Init::Zero),
    ]
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

/// Every named tensor of a model, with shape and initializer, in canonical
/// order.
fn param_specs(c: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = c.hidden_dim;
    let mut specs = vec![
        ("embed.token".to_string(), c.vocab_size, d, Init::Normal),
        ("embed.position".to_string(), c.max_seq_len, d, Init::Normal),
        ("embed.segment".to_string(), 2, d, Init::Normal),
        ("embed.norm.gain".to_string(), 1, d, Init::One),
        ("embed.norm.bias".to_string(), 1, d, Init::Zero),
    ];
    for i in 0..c.num_layers {
        for (suffix, r, cc, init) in layer_param_shapes(d, c.ffn_dim) {
            specs.push((format!("base.{i}.{suffix}"), r, cc, init));
        }
    }
    for i in 0..c.vertical_layers {
        for (suffix, r, cc, init) in layer_param_shapes(d, c.ffn_dim) {
            specs.push((format!("vertical.{i}.{suffix}"), r, cc, init));
        }
    }
    specs.extend([
        ("head.mlm.weight".to_string(), d, c.vocab_size, Init::Normal),
        ("head.mlm.bias".to_string(), 1, c.vocab_size, Init::Zero),
        ("head.mcp.weight".to_string(), d, c.vocab_size, Init::Normal),
        ("head.mcp.bias".to_string(), 1, c.vocab_size, Init::Zero),
        ("head.cvr.position".to_string(), c.cvr_positions, d, Init::Normal),
        ("head.cvr.in.weight".to_string(), 2 * d, d, Init::Normal),
        ("head.cvr.in.bias".to_string(), 1, d, Init::Zero),
        ("head.cvr.out.weight".to_string(), d, c.vocab_size, Init::Normal),
        ("head.cvr.out.bias".to_string(), 1, c.vocab_size, Init::Zero),
    ]);
    specs
}

impl ModelParams {
    /// Random initialization: truncated normal (std 0.02) weights, zero
    /// biases, unit layer-norm gains, drawn from one stream in canonical
    /// order so creation is seed-deterministic.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "init", 0);
        let mut params = ModelParams { names: vec![], tensors: vec![], index: HashMap::new() };
        for (name, rows, cols, init) in param_specs(config) {
            let tensor = match init {
                Init::Normal => truncated_normal(&mut rng, rows, cols, INIT_STD),
                Init::Zero => Tensor::zeros(rows, cols),
                Init::One => Tensor::from_vec(1, cols, vec![1.0; cols]),
            };
            params.push(name, tensor)?;
        }
        Ok(params)
    }

    /// Rebuild from named tensors (checkpoint load); shapes are checked
    /// against the config.
    pub fn from_named(config: &ModelConfig, mut tensors: HashMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut params = ModelParams { names: vec![], tensors: vec![], index: HashMap::new() };
        for (name, rows, cols, _) in param_specs(config) {
            let t = tensors.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter tensor `{name}`"))
            })?;
            if t.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected ({rows}, {cols})",
                    t.shape()
                )));
            }
            params.push(name, t)?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter tensor `{extra}`")));
        }
        Ok(params)
    }

    fn push(&mut self, name: String, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensor(self.id(name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let id = self.id(name);
        self.tensor_mut(id)
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Set every entry of every tensor to zero (analytic-loss testing).
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Slot layout of the aligned (post-pooling) matrices: row 0 is CLS, rows
/// 1..=n_utt are utterance sub-tokens, and the rest are columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotLayout {
    pub n_utt: usize,
    pub n_columns: usize,
}

impl SlotLayout {
    pub fn slots(&self) -> usize {
        1 + self.n_utt + self.n_columns
    }

    pub fn cls(&self) -> usize {
        0
    }

    pub fn utt(&self, i: usize) -> usize {
        1 + i
    }

    pub fn column(&self, j: usize) -> usize {
        1 + self.n_utt + j
    }
}

/// Additive attention mask for vertical layers over K stacked S-slot blocks:
/// 0 within a slot, `-inf` across slots.
pub fn vertical_mask(k: usize, s: usize) -> Tensor {
    let n = k * s;
    let mut m = Tensor::zeros(n, n);
    for p in 0..n {
        for q in 0..n {
            if p % s != q % s {
                m.set(p, q, f64::NEG_INFINITY);
            }
        }
    }
    m
}

/// Everything the objectives need from one forward pass.
pub struct ForwardPass {
    /// Base-transformer outputs per snapshot row (row length × d).
    pub base_rows: Vec<NodeId>,
    /// Pre-vertical aligned slot matrices per row (S × d).
    pub aligned: Vec<NodeId>,
    /// Post-vertical stacked slots ((K·S) × d); equals the stacked `aligned`
    /// when there are no vertical layers.
    pub joined: NodeId,
    /// Per-slot mean over rows (S × d).
    pub pooled: NodeId,
    /// Column representations c_j (n_columns × d), per `column_pooling`.
    pub column_reps: NodeId,
    pub layout: SlotLayout,
    /// Softmax probability nodes from base attention, then vertical
    /// attention, for invariant checks.
    pub base_attention: Vec<NodeId>,
    pub vertical_attention: Vec<NodeId>,
}

impl ForwardPass {
    /// Node row index of cell (snapshot row r, column j) inside `joined`.
    pub fn cell_row(&self, r: usize, j: usize) -> usize {
        r * self.layout.slots() + self.layout.column(j)
    }
}

/// Builds encoder graphs on a tape against a parameter store. Dropout is
/// active only when a training RNG is supplied.
pub struct EncoderGraph<'a> {
    pub tape: Tape,
    params: &'a ModelParams,
    config: &'a ModelConfig,
    bound: Vec<Option<NodeId>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> EncoderGraph<'a> {
    pub fn new(params: &'a ModelParams, config: &'a ModelConfig, dropout_rng: Option<ChaCha8Rng>) -> Self {
        EncoderGraph {
            tape: Tape::new(),
            params,
            config,
            bound: vec![None; params.len()],
            dropout_rng,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    /// The tape node for a named parameter, binding it on first use.
    pub fn p(&mut self, name: &str) -> NodeId {
        let id = self.params.id(name);
        if let Some(node) = self.bound[id] {
            return node;
        }
        let node = self.tape.param(id, self.params.tensor(id));
        self.bound[id] = Some(node);
        node
    }

    fn dropout(&mut self, x: NodeId) -> NodeId {
        match (&mut self.dropout_rng, self.config.dropout) {
            (Some(rng), rate) if rate > 0.0 => self.tape.dropout(x, rate, rng),
            _ => x,
        }
    }

    /// Token + position + segment embeddings, layer-normalized.
    pub fn embed(&mut self, ids: &[usize], segments: &[u8]) -> Result<NodeId> {
        assert_eq!(ids.len(), segments.len());
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        let tok_table = self.p("embed.token");
        let pos_table = self.p("embed.position");
        let seg_table = self.p("embed.segment");
        let gain = self.p("embed.norm.gain");
        let bias = self.p("embed.norm.bias");
        let tok = self.tape.gather_rows(tok_table, ids.to_vec());
        let pos = self.tape.gather_rows(pos_table, (0..ids.len()).collect());
        let seg = self.tape.gather_rows(seg_table, segments.iter().map(|&s| s as usize).collect());
        let sum = self.tape.add(tok, pos);
        let sum = self.tape.add(sum, seg);
        let normed = self.tape.layer_norm(sum, gain, bias);
        Ok(self.dropout(normed))
    }

    /// One post-LN transformer layer (attention + FFN) with an optional
    /// additive attention mask; returns the output and the per-head
    /// attention probability nodes.
    fn transformer_layer(
        &mut self,
        x: NodeId,
        prefix: &str,
        mask: Option<NodeId>,
    ) -> (NodeId, Vec<NodeId>) {
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let (wq, bq) = (self.p(&format!("{prefix}.attn.q.weight")), self.p(&format!("{prefix}.attn.q.bias")));
        let (wk, bk) = (self.p(&format!("{prefix}.attn.k.weight")), self.p(&format!("{prefix}.attn.k.bias")));
        let (wv, bv) = (self.p(&format!("{prefix}.attn.v.weight")), self.p(&format!("{prefix}.attn.v.bias")));
        let q = self.tape.matmul(x, wq, false, false);
        let q = self.tape.add_row(q, bq);
        let k = self.tape.matmul(x, wk, false, false);
        let k = self.tape.add_row(k, bk);
        let v = self.tape.matmul(x, wv, false, false);
        let v = self.tape.add_row(v, bv);

        let mut heads = Vec::with_capacity(self.config.num_heads);
        let mut probs = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let logits = self.tape.matmul(qh, kh, false, true);
            let logits = self.tape.scale(logits, 1.0 / (dh as f64).sqrt());
            let logits = match mask {
                Some(m) => self.tape.add(logits, m),
                None => logits,
            };
            let p = self.tape.softmax_rows(logits);
            probs.push(p);
            heads.push(self.tape.matmul(p, vh, false, false));
        }
        let ctx = self.tape.concat_cols(&heads);
        let (wo, bo) = (self.p(&format!("{prefix}.attn.out.weight")), self.p(&format!("{prefix}.attn.out.bias")));
        let out = self.tape.matmul(ctx, wo, false, false);
        let out = self.tape.add_row(out, bo);
        let out = self.dropout(out);
        let res = self.tape.add(x, out);
        let (g1, b1) = (self.p(&format!("{prefix}.attn.norm.gain")), self.p(&format!("{prefix}.attn.norm.bias")));
        let y = self.tape.layer_norm(res, g1, b1);

        let (wi, bi) = (self.p(&format!("{prefix}.ffn.in.weight")), self.p(&format!("{prefix}.ffn.in.bias")));
        let h1 = self.tape.matmul(y, wi, false, false);
        let h1 = self.tape.add_row(h1, bi);
        let h1 = self.tape.gelu(h1);
        let (wo2, bo2) = (self.p(&format!("{prefix}.ffn.out.weight")), self.p(&format!("{prefix}.ffn.out.bias")));
        let o2 = self.tape.matmul(h1, wo2, false, false);
        let o2 = self.tape.add_row(o2, bo2);
        let o2 = self.dropout(o2);
        let res2 = self.tape.add(y, o2);
        let (g2, b2) = (self.p(&format!("{prefix}.ffn.norm.gain")), self.p(&format!("{prefix}.ffn.norm.bias")));
        let z = self.tape.layer_norm(res2, g2, b2);
        debug_assert_eq!(self.tape.value(z).cols, d);
        (z, probs)
    }

    /// Run the base transformer over every row independently.
    pub fn encode_rows(&mut self, ei: &EncodedInput) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let mut outputs = Vec::with_capacity(ei.rows.len());
        let mut attn = Vec::new();
        for row in &ei.rows {
            let mut x = self.embed(&row.ids, &row.segments)?;
            for layer in 0..self.config.num_layers {
                let (y, probs) = self.transformer_layer(x, &format!("base.{layer}"), None);
                x = y;
                attn.extend(probs);
            }
            outputs.push(x);
        }
        Ok((outputs, attn))
    }

    /// Slot groups for one row: CLS, each utterance sub-token position, and
    /// each column's tagged positions.
    fn slot_groups(row: &RowEncoding, layout: SlotLayout) -> Result<Vec<Vec<usize>>> {
        let mut groups = vec![vec![0]];
        for i in 0..layout.n_utt {
            groups.push(vec![1 + i]);
        }
        for j in 0..layout.n_columns {
            let positions = row.column_positions(j);
            if positions.is_empty() {
                return Err(Error::Contract(format!("column {j} has no aligned positions")));
            }
            groups.push(positions);
        }
        Ok(groups)
    }

    /// Pool one row's base outputs into its S aligned slot vectors.
    pub fn pool_cells(&mut self, base: NodeId, row: &RowEncoding, layout: SlotLayout) -> Result<NodeId> {
        let groups = Self::slot_groups(row, layout)?;
        Ok(self.tape.group_mean_rows(base, groups))
    }

    /// Apply the vertical layers to the stacked aligned matrix.
    pub fn vertical_attend(&mut self, joined: NodeId, layout: SlotLayout, k: usize) -> (NodeId, Vec<NodeId>) {
        let mut x = joined;
        let mut attn = Vec::new();
        if self.config.vertical_layers == 0 {
            return (x, attn);
        }
        let mask = self.tape.constant(vertical_mask(k, layout.slots()));
        for layer in 0..self.config.vertical_layers {
            let (y, probs) = self.transformer_layer(x, &format!("vertical.{layer}"), Some(mask));
            x = y;
            attn.extend(probs);
        }
        (x, attn)
    }

    /// Full forward pass over an encoded input.
    pub fn forward(&mut self, ei: &EncodedInput) -> Result<ForwardPass> {
        if ei.rows.is_empty() {
            return Err(Error::Contract("encoded input has no rows".into()));
        }
        let layout = SlotLayout { n_utt: ei.utt_len(), n_columns: ei.n_columns };
        let (base_rows, base_attention) = self.encode_rows(ei)?;
        let mut aligned = Vec::with_capacity(base_rows.len());
        for (h, row) in base_rows.iter().zip(&ei.rows) {
            aligned.push(self.pool_cells(*h, row, layout)?);
        }
        let stacked = self.tape.concat_rows(&aligned);
        // A single-row input follows the K=1 rule: no vertical attention,
        // even when the model carries vertical layers.
        let (joined, vertical_attention) = if ei.rows.len() >= 2 {
            self.vertical_attend(stacked, layout, ei.rows.len())
        } else {
            (stacked, Vec::new())
        };

        // Per-slot mean over rows.
        let k = ei.rows.len();
        let s = layout.slots();
        let groups: Vec<Vec<usize>> = (0..s).map(|slot| (0..k).map(|r| r * s + slot).collect()).collect();
        let pooled = self.tape.group_mean_rows(joined, groups);

        let column_reps = match self.config.column_pooling {
            ColumnPooling::CellPool => {
                let rows: Vec<usize> = (0..layout.n_columns).map(|j| layout.column(j)).collect();
                self.tape.gather_rows(pooled, rows)
            }
            ColumnPooling::NameTokenPool => {
                let all = self.tape.concat_rows(&base_rows);
                let mut offsets = Vec::with_capacity(ei.rows.len());
                let mut at = 0;
                for row in &ei.rows {
                    offsets.push(at);
                    at += row.len();
                }
                let groups: Vec<Vec<usize>> = (0..layout.n_columns)
                    .map(|j| {
                        ei.rows
                            .iter()
                            .zip(&offsets)
                            .flat_map(|(row, &off)| {
                                row.tags.iter().enumerate().filter_map(move |(p, t)| {
                                    matches!(t, Tag::ColumnName { column } if *column == j)
                                        .then_some(off + p)
                                })
                            })
                            .collect()
                    })
                    .collect();
                for (j, g) in groups.iter().enumerate() {
                    if g.is_empty() {
                        return Err(Error::Contract(format!(
                            "column {j} has no name positions for name_token_pool"
                        )));
                    }
                }
                self.tape.group_mean_rows(all, groups)
            }
        };

        Ok(ForwardPass {
            base_rows,
            aligned,
            joined,
            pooled,
            column_reps,
            layout,
            base_attention,
            vertical_attention,
        })
    }
}

/// Final utterance/column/table representations, plus the per-row cell
/// vectors retained for value recovery and inspection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableEncoding {
    /// One d-vector per utterance sub-token.
    pub utterance: Vec<Vec<f64>>,
    /// One d-vector per column.
    pub columns: Vec<Vec<f64>>,
    /// One d-vector for the table.
    pub table: Vec<f64>,
    /// cells[r][j]: post-vertical cell vector of snapshot row r, column j.
    #[serde(skip)]
    pub cells: Vec<Vec<Vec<f64>>>,
}

/// Encode an utterance against a table in eval mode (no dropout):
/// snapshot → linearize → base transformer → pooling → vertical layers →
/// final pooling. Deterministic.
pub fn encode(
    u: &Utterance,
    t: &Table,
    params: &ModelParams,
    config: &ModelConfig,
    v: &Vocab,
) -> Result<TableEncoding> {
    let ei = build_input(u, t, config.k, config.linearization, v, config.max_seq_len)?;
    encode_input(&ei, params, config)
}

/// Encode a pre-built input (shared by `encode` and the CLI paths that
/// already hold a snapshot).
pub fn encode_input(ei: &EncodedInput, params: &ModelParams, config: &ModelConfig) -> Result<TableEncoding> {
    let mut g = EncoderGraph::new(params, config, None);
    let fp = g.forward(ei)?;
    let pooled = g.tape.value(fp.pooled);
    let col_reps = g.tape.value(fp.column_reps);
    let joined = g.tape.value(fp.joined);
    let layout = fp.layout;

    let utterance = (0..layout.n_utt).map(|i| pooled.row(layout.utt(i)).to_vec()).collect();
    let columns = (0..layout.n_columns).map(|j| col_reps.row(j).to_vec()).collect();
    let table = pooled.row(layout.cls()).to_vec();
    let cells = (0..ei.rows.len())
        .map(|r| {
            (0..layout.n_columns)
                .map(|j| joined.row(fp.cell_row(r, j)).to_vec())
                .collect()
        })
        .collect();
    let enc = TableEncoding { utterance, columns, table, cells };
    for vec in enc.utterance.iter().chain(enc.columns.iter()).chain(std::iter::once(&enc.table)) {
        if vec.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("table encoding".into()));
        }
    }
    Ok(enc)
}

/// Convenience wrapper exposing the snapshot used by `encode` (CLI inspect).
pub fn snapshot_for(u: &Utterance, t: &Table, config: &ModelConfig) -> Result<ContentSnapshot> {
    crate::snapshot::create_snapshot(u, t, config.k)
}
