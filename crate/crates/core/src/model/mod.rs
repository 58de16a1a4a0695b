//! Encoder-decoder with bottom-up local attention, pooled segment
//! self-attention and top-down token correction.

mod checkpoint;
mod config;
mod generate;
mod vocab;

use std::rc::Rc;

pub use checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_as, Dtype, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DecoderMemory, ModelConfig, PoolingMode, TopDownMode};
pub use generate::Strategy;
pub use vocab::Vocab;

use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention_topdown, local_self_attention, multi_head_attention, AttentionParams, CrossAttentionParams, MaskSpec, OpCounter};
use crate::error::{Error, Result};
use crate::nn::{add_and_norm, ffn_block, FfnParams, LayerNormParams, LinearParams, INIT_STD};
use crate::param::{ParamId, ParamStore};
use crate::pooling::{corresponding_segment, labels_to_weights, ImportanceLabels, ImportanceWeights, PoolPlan};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
/// First id available to task tokens.
pub const FIRST_FREE_ID: usize = 3;

/// Final or intermediate token representations, one row per real token.
#[derive(Clone, Debug)]
pub struct TokenStates {
    pub states: Var,
}

impl TokenStates {
    pub fn len(&self) -> usize {
        self.states.value().rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct SegmentStates {
    pub states: Var,
}

impl SegmentStates {
    pub fn len(&self) -> usize {
        self.states.value().rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Side inputs for the adaptive pooling modes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoolingInputs {
    /// Oracle labels, consumed by `oracle_ada`.
    pub labels: Option<ImportanceLabels>,
    /// Tagger scores, consumed by `ada`.
    pub weights: Option<ImportanceWeights>,
}

impl PoolingInputs {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn labels(labels: ImportanceLabels) -> Self {
        PoolingInputs { labels: Some(labels), weights: None }
    }

    pub fn weights(weights: ImportanceWeights) -> Self {
        PoolingInputs { labels: None, weights: Some(weights) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Encoder plus autoregressive decoder.
    Seq2Seq,
    /// Encoder plus a per-token sigmoid head.
    Tagger,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: AttentionParams,
    norm: LayerNormParams,
    ffn: FfnParams,
}

impl EncoderLayer {
    fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, root: &RngStream) -> Self {
        let d = cfg.d_model;
        EncoderLayer {
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), d, &mut root.split_named(&format!("{prefix}.attn"))),
            norm: LayerNormParams::init(store, &format!("{prefix}.attn_norm"), d),
            ffn: FfnParams::init(store, &format!("{prefix}.ffn"), d, cfg.ffn_hidden(), &mut root.split_named(&format!("{prefix}.ffn"))),
        }
    }
}

/// Projection and norm of the concatenation top-down update.
#[derive(Clone, Debug)]
pub struct ConcatParams {
    pub proj: LinearParams,
    pub norm: LayerNormParams,
}

impl ConcatParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut RngStream) -> Self {
        ConcatParams {
            proj: LinearParams::init(store, &format!("{prefix}.proj"), 2 * d, d, true, rng),
            norm: LayerNormParams::init(store, &format!("{prefix}.norm"), d),
        }
    }
}

#[derive(Clone, Debug)]
enum TopDownUpdate {
    Cross(CrossAttentionParams),
    Concat(ConcatParams),
}

#[derive(Clone, Debug)]
struct TopDownLayer {
    attn: AttentionParams,
    norm: LayerNormParams,
    update: TopDownUpdate,
    ffn: FfnParams,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: AttentionParams,
    self_norm: LayerNormParams,
    cross_attn: AttentionParams,
    cross_norm: LayerNormParams,
    ffn: FfnParams,
}

#[derive(Clone, Debug)]
struct Weights {
    tok_emb: ParamId,
    pos_emb: ParamId,
    seg_pos_emb: Option<ParamId>,
    bottom_up: Vec<EncoderLayer>,
    segment: Vec<EncoderLayer>,
    top_down: Vec<TopDownLayer>,
    dec_pos_emb: Option<ParamId>,
    decoder: Vec<DecoderLayer>,
    lm_head: Option<LinearParams>,
    tag_head: Option<LinearParams>,
}

#[derive(Clone, Debug)]
pub struct TopDownModel {
    config: ModelConfig,
    kind: ModelKind,
    params: ParamStore,
    weights: Weights,
}

impl TopDownModel {
    /// A sequence-to-sequence model initialized from `seed`. Every block
    /// draws from its own named stream, so two configurations that share a
    /// block name and shape start from identical weights there.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, ModelKind::Seq2Seq, seed)
    }

    /// Encoder with a per-token importance head.
    pub fn new_tagger(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, ModelKind::Tagger, seed)
    }

    pub(crate) fn build(config: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let d = cfg.d_model;
        let normal = |store: &mut ParamStore, name: &str, shape: &[usize]| {
            store.add_normal(name, shape, INIT_STD, &mut root.split_named(name))
        };
        let tok_emb = normal(&mut store, "embed.tokens", &[cfg.vocab_size, d]);
        let pos_emb = normal(&mut store, "embed.positions", &[cfg.max_positions, d]);
        let bottom_up = (0..cfg.n1).map(|l| EncoderLayer::init(&mut store, &format!("enc.bottom_up.{l}"), cfg, &root)).collect();

        let uses_segments = cfg.topdown_mode != TopDownMode::None;
        let seg_pos_emb = (uses_segments && cfg.n2 > 0).then(|| normal(&mut store, "embed.segment_positions", &[cfg.max_segments(), d]));
        let segment = if uses_segments {
            (0..cfg.n2).map(|l| EncoderLayer::init(&mut store, &format!("enc.segment.{l}"), cfg, &root)).collect()
        } else {
            Vec::new()
        };
        let top_down = if uses_segments {
            (0..cfg.n3)
                .map(|l| {
                    let p = format!("enc.top_down.{l}");
                    let attn = AttentionParams::init(&mut store, &format!("{p}.attn"), d, &mut root.split_named(&format!("{p}.attn")));
                    let norm = LayerNormParams::init(&mut store, &format!("{p}.attn_norm"), d);
                    let update = match cfg.topdown_mode {
                        TopDownMode::Concat => TopDownUpdate::Concat(ConcatParams::init(&mut store, &format!("{p}.concat"), d, &mut root.split_named(&format!("{p}.concat")))),
                        _ => TopDownUpdate::Cross(CrossAttentionParams::init(&mut store, &format!("{p}.cross"), d, &mut root.split_named(&format!("{p}.cross")))),
                    };
                    let ffn = FfnParams::init(&mut store, &format!("{p}.ffn"), d, cfg.ffn_hidden(), &mut root.split_named(&format!("{p}.ffn")));
                    TopDownLayer { attn, norm, update, ffn }
                })
                .collect()
        } else {
            Vec::new()
        };

        let (dec_pos_emb, decoder, lm_head, tag_head) = match kind {
            ModelKind::Seq2Seq => {
                let pos = normal(&mut store, "dec.positions", &[cfg.max_positions, d]);
                let layers = (0..cfg.n_dec)
                    .map(|l| {
                        let p = format!("dec.{l}");
                        let mut rng = root.split_named(&p);
                        DecoderLayer {
                            self_attn: AttentionParams::init(&mut store, &format!("{p}.self_attn"), d, &mut rng),
                            self_norm: LayerNormParams::init(&mut store, &format!("{p}.self_norm"), d),
                            cross_attn: AttentionParams::init(&mut store, &format!("{p}.cross_attn"), d, &mut rng),
                            cross_norm: LayerNormParams::init(&mut store, &format!("{p}.cross_norm"), d),
                            ffn: FfnParams::init(&mut store, &format!("{p}.ffn"), d, cfg.ffn_hidden(), &mut rng),
                        }
                    })
                    .collect();
                let head = (!cfg.tie_embeddings)
                    .then(|| LinearParams::init(&mut store, "dec.lm_head", d, cfg.vocab_size, false, &mut root.split_named("dec.lm_head")));
                (Some(pos), layers, head, None)
            }
            ModelKind::Tagger => {
                let head = LinearParams::init(&mut store, "tagger.head", d, 1, true, &mut root.split_named("tagger.head"));
                (None, Vec::new(), None, Some(head))
            }
        };

        let weights = Weights { tok_emb, pos_emb, seg_pos_emb, bottom_up, segment, top_down, dec_pos_emb, decoder, lm_head, tag_head };
        Ok(TopDownModel { config, kind, params: store, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Switches the pooling used by subsequent forward passes, e.g. to test an
    /// oracle-trained model with tagger weights.
    pub fn set_pooling_mode(&mut self, mode: PoolingMode) {
        self.config.pooling_mode = mode;
    }

    fn eps(&self) -> f64 {
        self.config.ln_eps
    }

    fn dropout(&self) -> f64 {
        self.config.dropout
    }

    /// Checks ids and length of a source or target sequence.
    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Token plus learned absolute position embeddings.
    pub fn embed(&self, tape: &Tape, tokens: &[usize]) -> Result<TokenStates> {
        self.check_tokens(tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.gather_rows(&tape.param(self.weights.tok_emb), tokens)?;
        let pos = tape.gather_rows(&tape.param(self.weights.pos_emb), &positions)?;
        Ok(TokenStates { states: tape.add(&tok, &pos)? })
    }

    /// `N1` post-norm blocks of band-masked self-attention and feed-forward.
    pub fn encode_bottom_up(&self, tape: &Tape, states: &TokenStates, counter: &mut OpCounter) -> Result<TokenStates> {
        let mut x = states.states.clone();
        for layer in &self.weights.bottom_up {
            let a = local_self_attention(tape, &x, &layer.attn, self.config.n_heads, self.config.w, counter)?;
            x = add_and_norm(tape, &x, &a, &layer.norm, self.eps(), self.dropout())?;
            x = ffn_block(tape, &x, &layer.ffn, self.eps(), self.dropout())?;
        }
        Ok(TokenStates { states: x })
    }

    /// The linear pooling map selected by the configured pooling mode.
    pub fn pool_plan(&self, n: usize, pooling: &PoolingInputs) -> Result<PoolPlan> {
        let spec = self.config.segmentation()?;
        match self.config.pooling_mode {
            PoolingMode::Avg => PoolPlan::average(n, &spec),
            PoolingMode::OracleAda => {
                let labels = pooling
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Config("oracle_ada pooling needs importance labels".into()))?;
                if labels.len() != n {
                    return Err(Error::Input(format!("{} importance labels for {n} tokens", labels.len())));
                }
                PoolPlan::weighted(&labels_to_weights(labels, 1.0, 0.0)?, &spec)
            }
            PoolingMode::Ada => {
                let weights = pooling
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::Config("ada pooling needs tagger importance weights".into()))?;
                if weights.len() != n {
                    return Err(Error::Input(format!("{} importance weights for {n} tokens", weights.len())));
                }
                PoolPlan::weighted(weights, &spec)
            }
        }
    }

    /// Pools token states into segments, then applies `N2` full
    /// self-attention blocks over the segments.
    pub fn encode_segments(
        &self,
        tape: &Tape,
        states: &TokenStates,
        pooling: &PoolingInputs,
        counter: &mut OpCounter,
    ) -> Result<SegmentStates> {
        let plan = Rc::new(self.pool_plan(states.len(), pooling)?);
        let m = plan.num_segments();
        let mut s = tape.pool(&states.states, &plan)?;
        if let Some(table) = self.weights.seg_pos_emb {
            if m > self.config.max_segments() {
                return Err(Error::Input(format!("{m} segments exceed the position table of {}", self.config.max_segments())));
            }
            let positions: Vec<usize> = (0..m).collect();
            let pos = tape.gather_rows(&tape.param(table), &positions)?;
            s = tape.add(&s, &pos)?;
        }
        for layer in &self.weights.segment {
            let a = multi_head_attention(tape, &s, &s, &s, &layer.attn, self.config.n_heads, &MaskSpec::Full, counter)?;
            s = add_and_norm(tape, &s, &a, &layer.norm, self.eps(), self.dropout())?;
            s = ffn_block(tape, &s, &layer.ffn, self.eps(), self.dropout())?;
        }
        Ok(SegmentStates { states: s })
    }

    /// `N3` layers of local self-attention, top-down update from the segments
    /// (cross-attention or concatenation) and feed-forward.
    pub fn encode_top_down(
        &self,
        tape: &Tape,
        tokens: &TokenStates,
        segments: &SegmentStates,
        counter: &mut OpCounter,
    ) -> Result<TokenStates> {
        let n = tokens.len();
        let sigma = if self.weights.top_down.iter().any(|l| matches!(l.update, TopDownUpdate::Concat(_))) {
            corresponding_segment(n, &self.config.segmentation()?)?
        } else {
            Vec::new()
        };
        let mut x = tokens.states.clone();
        for layer in &self.weights.top_down {
            let a = local_self_attention(tape, &x, &layer.attn, self.config.n_heads, self.config.w, counter)?;
            x = add_and_norm(tape, &x, &a, &layer.norm, self.eps(), self.dropout())?;
            x = match &layer.update {
                TopDownUpdate::Cross(p) => {
                    cross_attention_topdown(tape, &x, &segments.states, p, self.config.n_heads, self.eps(), counter)?
                }
                TopDownUpdate::Concat(p) => concat_topdown(tape, &x, &segments.states, &sigma, p, self.eps())?,
            };
            x = ffn_block(tape, &x, &layer.ffn, self.eps(), self.dropout())?;
        }
        Ok(TokenStates { states: x })
    }

    /// Full encoder: embed, bottom-up, segments, top-down.
    pub fn encode(&self, tape: &Tape, tokens: &[usize], pooling: &PoolingInputs, counter: &mut OpCounter) -> Result<TokenStates> {
        let e = self.embed(tape, tokens)?;
        let e = self.encode_bottom_up(tape, &e, counter)?;
        if self.config.topdown_mode == TopDownMode::None {
            return Ok(e);
        }
        let s = self.encode_segments(tape, &e, pooling, counter)?;
        self.encode_top_down(tape, &e, &s, counter)
    }

    /// Next-token logits (`T x vocab`) for every position of `prefix`.
    pub fn decode(&self, tape: &Tape, prefix: &[usize], enc: &TokenStates, counter: &mut OpCounter) -> Result<Var> {
        let (Some(dec_pos), ModelKind::Seq2Seq) = (self.weights.dec_pos_emb, self.kind) else {
            return Err(Error::Usage("decode called on a tagger model".into()));
        };
        self.check_tokens(prefix)?;
        let memory = match self.config.decoder_memory {
            DecoderMemory::All => enc.states.clone(),
            DecoderMemory::Last => tape.gather_rows(&enc.states, &[enc.len() - 1])?,
        };
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let tok_table = tape.param(self.weights.tok_emb);
        let tok = tape.gather_rows(&tok_table, prefix)?;
        let pos = tape.gather_rows(&tape.param(dec_pos), &positions)?;
        let mut x = tape.add(&tok, &pos)?;
        let heads = self.config.n_heads;
        for layer in &self.weights.decoder {
            let a = multi_head_attention(tape, &x, &x, &x, &layer.self_attn, heads, &MaskSpec::Causal, counter)?;
            x = add_and_norm(tape, &x, &a, &layer.self_norm, self.eps(), self.dropout())?;
            let c = multi_head_attention(tape, &x, &memory, &memory, &layer.cross_attn, heads, &MaskSpec::Full, counter)?;
            x = add_and_norm(tape, &x, &c, &layer.cross_norm, self.eps(), self.dropout())?;
            x = ffn_block(tape, &x, &layer.ffn, self.eps(), self.dropout())?;
        }
        match &self.weights.lm_head {
            Some(head) => head.forward(tape, &x),
            None => tape.matmul_nt(&x, &tok_table),
        }
    }

    /// Teacher-forced mean token cross-entropy of `target` (EOS appended)
    /// given `source`.
    pub fn sequence_loss(&self, tape: &Tape, source: &[usize], target: &[usize], pooling: &PoolingInputs) -> Result<Var> {
        let mut counter = OpCounter::new();
        let enc = self.encode(tape, source, pooling, &mut counter)?;
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(BOS_ID);
        input.extend_from_slice(target);
        let mut gold = target.to_vec();
        gold.push(EOS_ID);
        let logits = self.decode(tape, &input, &enc, &mut counter)?;
        tape.cross_entropy(&logits, &gold, PAD_ID)
    }

    /// Per-token importance logits (`N x 1`) of a tagger model.
    pub fn tag_logits(&self, tape: &Tape, tokens: &[usize], counter: &mut OpCounter) -> Result<Var> {
        let head = self.weights.tag_head.as_ref().ok_or_else(|| Error::Usage("tag_logits needs a tagger model".into()))?;
        let enc = self.encode(tape, tokens, &PoolingInputs::none(), counter)?;
        head.forward(tape, &enc.states)
    }

    /// Tagger logits used directly as adaptive pooling weights.
    pub fn importance_weights(&self, tokens: &[usize]) -> Result<ImportanceWeights> {
        let tape = Tape::inference(&self.params);
        let logits = self.tag_logits(&tape, tokens, &mut OpCounter::new())?;
        ImportanceWeights::new(logits.value().to_vec())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|(_, p)| (p.name.clone(), p.value().shape().to_vec())).collect()
    }
}

/// Top-down update by concatenation: `e_i + LayerNorm(W [e_i ; s_sigma(i)] + b)`
/// where `sigma` maps each token to its corresponding segment.
pub fn concat_topdown(tape: &Tape, tokens: &Var, segments: &Var, sigma: &[usize], params: &ConcatParams, eps: f64) -> Result<Var> {
    let (n, _) = tokens.value().dims2()?;
    if sigma.len() != n {
        return Err(Error::Shape(format!("{} segment assignments for {n} tokens", sigma.len())));
    }
    let paired = tape.gather_rows(segments, sigma)?;
    let joined = tape.concat_cols(tokens, &paired)?;
    let projected = params.proj.forward(tape, &joined)?;
    let normed = params.norm.forward(tape, &projected, eps)?;
    tape.add(tokens, &normed)
}
