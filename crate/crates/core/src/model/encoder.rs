//! Pre-norm encoder whose attention is a sum of per-head contributions.
//!
//! Each head owns its query/key/value projections and its slice of the
//! output projection (with a per-head output bias; keys have no bias), so
//! `mhatt = Σ_h att_h(x)` with every `att_h` already in model space. A gate
//! multiplies `att_h` after the output projection, and the same node is where
//! gradient soft-masks attach.

use crate::autodiff::{Graph, RngState, Tensor, Var};
use crate::error::{Error, Result};

use super::config::ModelConfig;

const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

/// Gate supplied to every attention head.
#[derive(Debug, Clone, PartialEq)]
pub enum GateMode {
    /// No gate node at all.
    Off,
    /// Gate fixed at 1 with gradient tracking, for importance estimation.
    Unit,
    /// Constant gates, row-major `[num_layers × heads_per_layer]`, in `[0, 1]`.
    Fixed(Vec<f32>),
}

/// Token ids `[batch, seq_len]` with a mask marking real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub padding_mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq_len: usize, padding_mask: Vec<bool>) -> Result<Self> {
        if ids.len() != batch * seq_len || padding_mask.len() != ids.len() {
            return Err(Error::Shape {
                op: "token_batch",
                left: vec![batch, seq_len],
                right: vec![ids.len(), padding_mask.len()],
            });
        }
        Ok(Self {
            ids,
            batch,
            seq_len,
            padding_mask,
        })
    }

    /// Right-pads each sequence with `pad_id` to the longest one.
    pub fn from_sequences(seqs: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(pad_id, seq_len - s.len()));
            mask.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Self::new(ids, seqs.len(), seq_len, mask)
    }

    pub fn real_tokens(&self) -> usize {
        self.padding_mask.iter().filter(|&&m| m).count()
    }
}

/// Indices of one head's parameters in the model's parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

impl HeadParams {
    pub fn all(&self) -> [usize; 7] {
        [self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub ln1_gamma: usize,
    pub ln1_beta: usize,
    pub heads: Vec<HeadParams>,
    pub ln2_gamma: usize,
    pub ln2_beta: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    token_embedding: usize,
    position_embedding: usize,
    layers: Vec<LayerParams>,
    final_gamma: usize,
    final_beta: usize,
    mlm_weight: Option<usize>,
    mlm_bias: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

impl Layout {
    /// Builds the layout and the ordered `(name, shape, init)` list.
    fn build(c: &ModelConfig) -> (Self, Vec<(String, Vec<usize>, Init)>) {
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push((name, shape, init));
            specs.len() - 1
        };
        let (d, dk, ff, v) = (c.d_model, c.head_dim(), c.d_ff, c.vocab_size);
        let token_embedding = add("embeddings.token".into(), vec![v, d], Init::Normal);
        let position_embedding = add("embeddings.position".into(), vec![c.max_seq_len, d], Init::Normal);
        let mut layers = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let p = format!("layers.{l}");
            let ln1_gamma = add(format!("{p}.ln1.gamma"), vec![d], Init::Ones);
            let ln1_beta = add(format!("{p}.ln1.beta"), vec![d], Init::Zeros);
            let mut heads = Vec::with_capacity(c.heads_per_layer);
            for h in 0..c.heads_per_layer {
                let hp = format!("{p}.heads.{h}");
                heads.push(HeadParams {
                    wq: add(format!("{hp}.wq"), vec![d, dk], Init::Normal),
                    bq: add(format!("{hp}.bq"), vec![dk], Init::Zeros),
                    wk: add(format!("{hp}.wk"), vec![d, dk], Init::Normal),
                    wv: add(format!("{hp}.wv"), vec![d, dk], Init::Normal),
                    bv: add(format!("{hp}.bv"), vec![dk], Init::Zeros),
                    wo: add(format!("{hp}.wo"), vec![dk, d], Init::Normal),
                    bo: add(format!("{hp}.bo"), vec![d], Init::Zeros),
                });
            }
            let ln2_gamma = add(format!("{p}.ln2.gamma"), vec![d], Init::Ones);
            let ln2_beta = add(format!("{p}.ln2.beta"), vec![d], Init::Zeros);
            let ff_w1 = add(format!("{p}.ffn.w1"), vec![d, ff], Init::Normal);
            let ff_b1 = add(format!("{p}.ffn.b1"), vec![ff], Init::Zeros);
            let ff_w2 = add(format!("{p}.ffn.w2"), vec![ff, d], Init::Normal);
            let ff_b2 = add(format!("{p}.ffn.b2"), vec![d], Init::Zeros);
            layers.push(LayerParams {
                ln1_gamma,
                ln1_beta,
                heads,
                ln2_gamma,
                ln2_beta,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
            });
        }
        let final_gamma = add("final_ln.gamma".into(), vec![d], Init::Ones);
        let final_beta = add("final_ln.beta".into(), vec![d], Init::Zeros);
        let mlm_weight = if c.tie_mlm_head_to_embeddings {
            None
        } else {
            Some(add("mlm.weight".into(), vec![d, v], Init::Normal))
        };
        let mlm_bias = add("mlm.bias".into(), vec![v], Init::Zeros);
        (
            Self {
                token_embedding,
                position_embedding,
                layers,
                final_gamma,
                final_beta,
                mlm_weight,
                mlm_bias,
            },
            specs,
        )
    }
}

/// Model parameters bound onto a graph, in the model's parameter order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn get(&self, index: usize) -> Var {
        self.0[index]
    }
}

/// Nodes of interest recorded during one encoder forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Final hidden states `[B, T, d]`.
    pub hidden: Var,
    /// Per-head post-projection outputs `[B, T, d]`, before gating.
    pub head_outputs: Vec<Vec<Var>>,
    /// Attention probabilities `[B, T, T]` per head, before dropout.
    pub attention: Vec<Vec<Var>>,
    /// The gate leaf, when gating is on.
    pub gates: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

impl EncoderModel {
    /// Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, rng: &RngState) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        let mut rng = rng.stream(crate::autodiff::Stream::Init);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let mut t = Tensor::zeros(&shape);
            match init {
                Init::Normal => t.data_mut().iter_mut().for_each(|v| *v = rng.truncated_normal(INIT_STD)),
                Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = 1.0),
                Init::Zeros => {}
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            layout,
        })
    }

    /// Reassembles a model from named tensors, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        if named.len() != specs.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for ((name, t), (want_name, want_shape, _)) in named.into_iter().zip(specs) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            layout,
        })
    }

    /// Ordered `(name, shape)` of every parameter for `config`.
    pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (_, specs) = Layout::build(config);
        specs.into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_index(name).map(move |i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn layer(&self, l: usize) -> &LayerParams {
        &self.layout.layers[l]
    }

    pub fn head(&self, l: usize, h: usize) -> HeadParams {
        self.layout.layers[l].heads[h]
    }

    /// Copies every parameter onto `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> ParamVars {
        ParamVars(self.params.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect())
    }

    /// Records the gate leaf for `gates`, validating fixed values.
    pub fn gate_var(&self, g: &mut Graph, gates: &GateMode) -> Result<Option<Var>> {
        let shape = [self.config.num_layers, self.config.heads_per_layer];
        match gates {
            GateMode::Off => Ok(None),
            GateMode::Unit => Ok(Some(g.leaf(Tensor::full(&shape, 1.0), true))),
            GateMode::Fixed(values) => {
                if values.len() != self.config.num_heads() {
                    return Err(Error::Gating(format!(
                        "expected {}x{} gates, got {}",
                        shape[0],
                        shape[1],
                        values.len()
                    )));
                }
                if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Gating(format!("gate value {v} outside [0, 1]")));
                }
                Ok(Some(g.constant(Tensor::new(shape.to_vec(), values.clone())?)))
            }
        }
    }

    /// Gated multi-head attention of layer `layer` applied to `x [B, T, d]`
    /// (the layer-normed residual stream). Returns the summed contribution,
    /// the per-head outputs and the per-head attention probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn gated_mha_forward(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        layer: usize,
        x: Var,
        key_mask: &[bool],
        gates: Option<Var>,
        mut rng: Option<&mut RngState>,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let c = &self.config;
        let lp = &self.layout.layers[layer];
        let scale = 1.0 / (c.head_dim() as f32).sqrt();
        let mut acc: Option<Var> = None;
        let mut heads = Vec::with_capacity(c.heads_per_layer);
        let mut probs = Vec::with_capacity(c.heads_per_layer);
        for (h, hp) in lp.heads.iter().enumerate() {
            let q = g.linear(x, p.get(hp.wq), p.get(hp.bq))?;
            let k = g.matmul(x, p.get(hp.wk), false)?;
            let v = g.linear(x, p.get(hp.wv), p.get(hp.bv))?;
            let scores = g.batch_matmul(q, k, true)?;
            let scores = g.scale(scores, scale);
            let scores = g.key_mask(scores, key_mask)?;
            let attn = g.softmax(scores, 2)?;
            probs.push(attn);
            let attn = match rng.as_deref_mut() {
                Some(r) => g.dropout(attn, c.dropout_p, r)?,
                None => attn,
            };
            let ctx = g.batch_matmul(attn, v, false)?;
            let out = g.linear(ctx, p.get(hp.wo), p.get(hp.bo))?;
            heads.push(out);
            let contrib = match gates {
                Some(gv) => g.scale_by_entry(out, gv, layer * c.heads_per_layer + h)?,
                None => out,
            };
            acc = Some(match acc {
                None => contrib,
                Some(a) => g.add(a, contrib)?,
            });
        }
        Ok((acc.expect("at least one head"), heads, probs))
    }

    /// Embeddings, `L` pre-norm layers and a final layer norm.
    ///
    /// `rng = None` runs without dropout.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        batch: &TokenBatch,
        gates: &GateMode,
        rng: Option<&mut RngState>,
    ) -> Result<ForwardTrace> {
        let gate = self.gate_var(g, gates)?;
        self.encoder_forward_with_gate(g, p, batch, gate, rng)
    }

    /// [`Self::encoder_forward`] with an already recorded gate node, so
    /// several passes can share one gate leaf.
    pub fn encoder_forward_with_gate(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        batch: &TokenBatch,
        gate: Option<Var>,
        mut rng: Option<&mut RngState>,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        let (b, t) = (batch.batch, batch.seq_len);
        if t > c.max_seq_len {
            return Err(Error::Shape {
                op: "encoder_forward",
                left: vec![b, t],
                right: vec![c.max_seq_len],
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab_size: c.vocab_size,
            });
        }
        if let Some(gv) = gate {
            if g.value(gv).numel() != c.num_heads() {
                return Err(Error::Gating(format!(
                    "gate node holds {} values for {} heads",
                    g.value(gv).numel(),
                    c.num_heads()
                )));
            }
        }
        let tok = g.embedding(p.get(self.layout.token_embedding), &batch.ids, &[b, t])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.embedding(p.get(self.layout.position_embedding), &positions, &[b, t])?;
        let mut x = g.add(tok, pos)?;
        let mut head_outputs = Vec::with_capacity(c.num_layers);
        let mut attention = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let lp = &self.layout.layers[l];
            let h1 = g.layer_norm(x, p.get(lp.ln1_gamma), p.get(lp.ln1_beta), LN_EPS)?;
            let (mha, heads, probs) =
                self.gated_mha_forward(g, p, l, h1, &batch.padding_mask, gate, rng.as_deref_mut())?;
            head_outputs.push(heads);
            attention.push(probs);
            let mha = match rng.as_deref_mut() {
                Some(r) => g.dropout(mha, c.dropout_p, r)?,
                None => mha,
            };
            x = g.add(x, mha)?;
            let h2 = g.layer_norm(x, p.get(lp.ln2_gamma), p.get(lp.ln2_beta), LN_EPS)?;
            let f = g.linear(h2, p.get(lp.ff_w1), p.get(lp.ff_b1))?;
            let f = g.gelu(f);
            let f = g.linear(f, p.get(lp.ff_w2), p.get(lp.ff_b2))?;
            let f = match rng.as_deref_mut() {
                Some(r) => g.dropout(f, c.dropout_p, r)?,
                None => f,
            };
            x = g.add(x, f)?;
        }
        let hidden = g.layer_norm(
            x,
            p.get(self.layout.final_gamma),
            p.get(self.layout.final_beta),
            LN_EPS,
        )?;
        Ok(ForwardTrace {
            hidden,
            head_outputs,
            attention,
            gates: gate,
        })
    }

    /// Vocabulary logits `[B, T, V]`; tied to the token embedding when configured.
    pub fn mlm_logits(&self, g: &mut Graph, p: &ParamVars, hidden: Var) -> Result<Var> {
        let y = match self.layout.mlm_weight {
            Some(w) => g.matmul(hidden, p.get(w), false)?,
            None => g.matmul(hidden, p.get(self.layout.token_embedding), true)?,
        };
        g.add_bias(y, p.get(self.layout.mlm_bias))
    }

    /// Parameter indices that only the head `(l, h)` uses.
    pub fn head_exclusive_params(&self, l: usize, h: usize) -> [usize; 7] {
        self.head(l, h).all()
    }
}

/// Mean of the hidden states over real (non-padded) positions.
pub fn pooled_representation(g: &mut Graph, hidden: Var, padding_mask: &[bool]) -> Result<Var> {
    g.mean_pool(hidden, padding_mask)
}
