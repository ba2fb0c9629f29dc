use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenereg_nn::layers::{
    causal_mask, feed_forward, init_attention, init_feed_forward, init_layer_norm, init_linear, layer_norm, linear,
    scaled_dot_product_attention,
};
use scenereg_nn::{Graph, NnError, ParameterStore, Real, ScalarFn, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::config::{Family, InputLayout, ModelConfig, SceneDims};
use super::decode::{argmax, NextTokenModel};
use super::inputs::ModelInputs;
use super::vocab::{TokenVocab, BOS, EOS, PAD};
use super::RegError;
use crate::features::{FeatureBundle, Variant};

type NnResult<T> = scenereg_nn::Result<T>;

const EMB_STD: f32 = 0.1;

/// One attention matrix, row-major `rows × cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl AttentionMap {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Attention probabilities of one sample, indexed `[layer][head]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layout: InputLayout,
    /// Encoder self-attention (encdec family).
    pub encoder: Vec<Vec<AttentionMap>>,
    /// Decoder attention onto the encoder output (encdec family).
    pub cross: Vec<Vec<AttentionMap>>,
    /// Decoder self-attention; for the prefix family its first
    /// `layout.len` columns are the prefix.
    pub decoder_self: Vec<Vec<AttentionMap>>,
    /// Decoder query rows (generated tokens including EOS when present).
    pub decoded_len: usize,
}

impl AttentionTrace {
    pub fn maps(&self) -> impl Iterator<Item = &AttentionMap> {
        self.encoder
            .iter()
            .chain(&self.cross)
            .chain(&self.decoder_self)
            .flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegModel {
    pub config: ModelConfig,
    pub dims: SceneDims,
    pub vocab: TokenVocab,
    pub params: ParameterStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[B, L, V]`, row-major.
    pub logits: Vec<f32>,
    pub shape: [usize; 3],
    pub traces: Vec<AttentionTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub token_ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<AttentionTrace>,
}

/// `[layer][sample][head]` probability nodes.
type Probs = Vec<Vec<Vec<Var>>>;

pub(crate) struct Net<'a> {
    cfg: &'a ModelConfig,
    dims: &'a SceneDims,
    layout: InputLayout,
}

fn attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore,
    name: &str,
    query: Var,
    memory: Var,
    batch: usize,
    heads: usize,
    mask: Option<Var>,
) -> NnResult<(Var, Vec<Vec<Var>>)> {
    let sq = g.shape(query)[0] / batch;
    let sk = g.shape(memory)[0] / batch;
    let d = g.shape(query)[1];
    let hd = d / heads;
    let q = linear(g, store, &format!("{name}.q"), query)?;
    let k = linear(g, store, &format!("{name}.k"), memory)?;
    let v = linear(g, store, &format!("{name}.v"), memory)?;
    let mut outs = Vec::with_capacity(batch);
    let mut probs = Vec::with_capacity(batch);
    for i in 0..batch {
        let (qi, ki, vi) = if batch == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 0, i * sq, (i + 1) * sq)?,
                g.slice(k, 0, i * sk, (i + 1) * sk)?,
                g.slice(v, 0, i * sk, (i + 1) * sk)?,
            )
        };
        let mut head_out = Vec::with_capacity(heads);
        let mut head_p = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let (qh, kh, vh) = if heads == 1 {
                (qi, ki, vi)
            } else {
                (g.slice(qi, 1, lo, hi)?, g.slice(ki, 1, lo, hi)?, g.slice(vi, 1, lo, hi)?)
            };
            let (o, p) = scaled_dot_product_attention(g, qh, kh, vh, mask)?;
            head_out.push(o);
            head_p.push(p);
        }
        outs.push(if heads == 1 { head_out[0] } else { g.concat(&head_out, 1)? });
        probs.push(head_p);
    }
    let merged = if batch == 1 { outs[0] } else { g.concat(&outs, 0)? };
    Ok((linear(g, store, &format!("{name}.o"), merged)?, probs))
}

/// Row indices `0..n` repeated `times`.
fn tiled(n: usize, times: usize) -> Vec<usize> {
    (0..times).flat_map(|_| 0..n).collect()
}

impl<'a> Net<'a> {
    pub(crate) fn new(cfg: &'a ModelConfig, dims: &'a SceneDims) -> Self {
        Self {
            cfg,
            dims,
            layout: InputLayout::of(cfg, dims),
        }
    }

    fn target_features(&self) -> usize {
        self.cfg.patch * self.cfg.patch * (self.dims.channels + 1)
    }

    fn target_tokens(&self) -> usize {
        let s = self.cfg.crop / self.cfg.patch;
        s * s
    }

    fn context_features(&self) -> usize {
        match self.cfg.variant {
            Variant::Vis => match self.cfg.family {
                Family::Encdec => self.cfg.context_patch * self.cfg.context_patch * (self.dims.channels + 1),
                Family::Prefix => self.dims.width * self.dims.height * (self.dims.channels + 1),
            },
            Variant::Sym => self.dims.categories,
            Variant::Tgt => 0,
        }
    }

    fn decoder_positions(&self) -> usize {
        match self.cfg.family {
            Family::Encdec => self.cfg.max_tokens(),
            Family::Prefix => self.layout.len + self.cfg.max_tokens(),
        }
    }

    pub(crate) fn init(&self, vocab_size: usize, seed: u64) -> NnResult<ParameterStore> {
        let cfg = self.cfg;
        let d = cfg.d_model;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        match cfg.family {
            Family::Encdec => {
                init_linear(&mut s, "enc.patch", self.target_features(), d, rng)?;
                s.init_normal("enc.pos_t", &[self.target_tokens(), d], EMB_STD, rng)?;
                s.init_normal("enc.tag", &[3, d], EMB_STD, rng)?;
                init_linear(&mut s, "enc.loc", 5, d, rng)?;
                match cfg.variant {
                    Variant::Vis => {
                        let (cols, rows) = self.layout.context_grid.expect("vis layout has a grid");
                        init_linear(&mut s, "enc.ctx", self.context_features(), d, rng)?;
                        s.init_normal("enc.pos_c", &[cols * rows, d], EMB_STD, rng)?;
                    }
                    Variant::Sym => s.init_normal("enc.cat", &[self.dims.categories, d], 1.0, rng)?,
                    Variant::Tgt => {}
                }
                for l in 0..cfg.enc_layers {
                    init_layer_norm(&mut s, &format!("enc.l{l}.ln1"), d)?;
                    init_attention(&mut s, &format!("enc.l{l}.attn"), d, rng)?;
                    init_layer_norm(&mut s, &format!("enc.l{l}.ln2"), d)?;
                    init_feed_forward(&mut s, &format!("enc.l{l}.ff"), d, cfg.ff_dim, rng)?;
                }
                init_layer_norm(&mut s, "enc.ln_f", d)?;
            }
            Family::Prefix => {
                let h = cfg.mapping_hidden;
                let tin = self.target_tokens() * self.target_features();
                init_linear(&mut s, "map.tgt.fc1", tin, h, rng)?;
                init_linear(&mut s, "map.tgt.fc2", h, cfg.prefix_target * d, rng)?;
                if cfg.variant != Variant::Tgt {
                    init_linear(&mut s, "map.ctx.fc1", self.context_features(), h, rng)?;
                    init_linear(&mut s, "map.ctx.fc2", h, cfg.prefix_context * d, rng)?;
                }
                init_linear(&mut s, "map.loc", 5, cfg.prefix_loc * d, rng)?;
            }
        }
        s.init_normal("dec.tok", &[vocab_size, d], EMB_STD, rng)?;
        s.init_normal("dec.pos", &[self.decoder_positions(), d], EMB_STD, rng)?;
        for l in 0..cfg.dec_layers {
            init_layer_norm(&mut s, &format!("dec.l{l}.ln1"), d)?;
            init_attention(&mut s, &format!("dec.l{l}.self"), d, rng)?;
            if cfg.family == Family::Encdec {
                init_layer_norm(&mut s, &format!("dec.l{l}.ln2"), d)?;
                init_attention(&mut s, &format!("dec.l{l}.cross"), d, rng)?;
            }
            init_layer_norm(&mut s, &format!("dec.l{l}.ln3"), d)?;
            init_feed_forward(&mut s, &format!("dec.l{l}.ff"), d, cfg.ff_dim, rng)?;
        }
        init_layer_norm(&mut s, "dec.ln_f", d)?;
        init_linear(&mut s, "dec.out", d, vocab_size, rng)?;
        Ok(s)
    }

    /// Conditioning rows `[B·S, d]` in layout order, before any encoder
    /// layer.
    fn input_tokens<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore, inputs: &[&ModelInputs]) -> NnResult<Var> {
        let b = inputs.len();
        let loc: Vec<f32> = inputs.iter().flat_map(|i| i.loc).collect();
        let loc = g.constant_f32(&[b, 5], &loc)?;
        let target: Vec<f32> = inputs.iter().flat_map(|i| i.target.iter().copied()).collect();
        let context: Vec<f32> = inputs
            .iter()
            .flat_map(|i| i.context.iter().chain(&i.coverage).flatten().copied())
            .collect();
        // (rows per sample, node) in layout order
        let mut groups: Vec<(usize, Var)> = Vec::new();
        match self.cfg.family {
            Family::Encdec => {
                let nt = self.target_tokens();
                let xt = g.constant_f32(&[b * nt, self.target_features()], &target)?;
                let xt = linear(g, store, "enc.patch", xt)?;
                let pos = g.param(store, "enc.pos_t")?;
                let pos = g.embedding(pos, &tiled(nt, b))?;
                let xt = g.add(xt, pos)?;
                let tag = g.param(store, "enc.tag")?;
                let tt = g.embedding(tag, &vec![0; b * nt])?;
                groups.push((nt, g.add(xt, tt)?));

                let xl = linear(g, store, "enc.loc", loc)?;
                let tl = g.embedding(tag, &vec![1; b])?;
                groups.push((1, g.add(xl, tl)?));

                match self.cfg.variant {
                    Variant::Vis => {
                        let (cols, rows) = self.layout.context_grid.expect("vis layout has a grid");
                        let nc = cols * rows;
                        let xc = g.constant_f32(&[b * nc, self.context_features()], &context)?;
                        let xc = linear(g, store, "enc.ctx", xc)?;
                        let pos = g.param(store, "enc.pos_c")?;
                        let pos = g.embedding(pos, &tiled(nc, b))?;
                        let xc = g.add(xc, pos)?;
                        let tc = g.embedding(tag, &vec![2; b * nc])?;
                        groups.push((nc, g.add(xc, tc)?));
                    }
                    Variant::Sym => {
                        // category embedding scaled by its coverage, nothing added
                        let k = self.dims.categories;
                        let cat = g.param(store, "enc.cat")?;
                        let e = g.embedding(cat, &tiled(k, b))?;
                        let w = context.iter().map(|&c| T::of_f32(c)).collect();
                        groups.push((k, g.scale_rows(e, w)?));
                    }
                    Variant::Tgt => {}
                }
            }
            Family::Prefix => {
                let d = self.cfg.d_model;
                let xt = g.constant_f32(&[b, self.target_tokens() * self.target_features()], &target)?;
                groups.push((self.cfg.prefix_target, self.mapping(g, store, "map.tgt", xt, self.cfg.prefix_target)?));
                if self.cfg.variant != Variant::Tgt {
                    let xc = g.constant_f32(&[b, self.context_features()], &context)?;
                    groups.push((self.cfg.prefix_context, self.mapping(g, store, "map.ctx", xc, self.cfg.prefix_context)?));
                }
                let xl = linear(g, store, "map.loc", loc)?;
                groups.push((self.cfg.prefix_loc, g.reshape(xl, &[b * self.cfg.prefix_loc, d])?));
            }
        }
        if b == 1 {
            let parts: Vec<Var> = groups.iter().map(|&(_, v)| v).collect();
            return if parts.len() == 1 { Ok(parts[0]) } else { g.concat(&parts, 0) };
        }
        let mut rows = Vec::with_capacity(b * groups.len());
        for i in 0..b {
            for &(n, v) in &groups {
                rows.push(g.slice(v, 0, i * n, (i + 1) * n)?);
            }
        }
        g.concat(&rows, 0)
    }

    /// Two-layer mapping network to `n` prefix rows per sample.
    fn mapping<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore, name: &str, x: Var, n: usize) -> NnResult<Var> {
        let b = g.shape(x)[0];
        let h = linear(g, store, &format!("{name}.fc1"), x)?;
        let h = g.relu(h)?;
        let y = linear(g, store, &format!("{name}.fc2"), h)?;
        g.reshape(y, &[b * n, self.cfg.d_model])
    }

    /// Encoder output (encdec) or prefix rows (prefix), plus encoder
    /// attention.
    fn condition<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore,
        inputs: &[&ModelInputs],
    ) -> NnResult<(Var, Probs)> {
        let b = inputs.len();
        let mut x = self.input_tokens(g, store, inputs)?;
        if self.cfg.family == Family::Prefix {
            return Ok((x, Vec::new()));
        }
        let p = self.cfg.dropout;
        x = g.dropout(x, p)?;
        let mut probs = Vec::with_capacity(self.cfg.enc_layers);
        for l in 0..self.cfg.enc_layers {
            let h = layer_norm(g, store, &format!("enc.l{l}.ln1"), x)?;
            let (a, pr) = attention(g, store, &format!("enc.l{l}.attn"), h, h, b, self.cfg.n_heads, None)?;
            let a = g.dropout(a, p)?;
            x = g.add(x, a)?;
            let h = layer_norm(g, store, &format!("enc.l{l}.ln2"), x)?;
            let f = feed_forward(g, store, &format!("enc.l{l}.ff"), h, self.cfg.activation, p)?;
            let f = g.dropout(f, p)?;
            x = g.add(x, f)?;
            probs.push(pr);
        }
        Ok((layer_norm(g, store, "enc.ln_f", x)?, probs))
    }

    /// Next-token logits `[B·L, V]` for equal-length token rows.
    fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore,
        cond: Var,
        tokens: &[Vec<usize>],
    ) -> NnResult<(Var, Probs, Probs)> {
        let b = tokens.len();
        let len = tokens[0].len();
        let p = self.cfg.dropout;
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let tok = g.param(store, "dec.tok")?;
        let emb = g.embedding(tok, &ids)?;
        let pos = g.param(store, "dec.pos")?;
        let (mut x, rows) = match self.cfg.family {
            Family::Encdec => {
                let pe = g.embedding(pos, &tiled(len, b))?;
                (g.add(emb, pe)?, len)
            }
            Family::Prefix => {
                let np = self.layout.len;
                let seq = if b == 1 {
                    g.concat(&[cond, emb], 0)?
                } else {
                    let mut parts = Vec::with_capacity(2 * b);
                    for i in 0..b {
                        parts.push(g.slice(cond, 0, i * np, (i + 1) * np)?);
                        parts.push(g.slice(emb, 0, i * len, (i + 1) * len)?);
                    }
                    g.concat(&parts, 0)?
                };
                let pe = g.embedding(pos, &tiled(np + len, b))?;
                (g.add(seq, pe)?, np + len)
            }
        };
        x = g.dropout(x, p)?;
        let mask = causal_mask(g, rows)?;
        let mut cross = Vec::new();
        let mut selfp = Vec::with_capacity(self.cfg.dec_layers);
        for l in 0..self.cfg.dec_layers {
            let h = layer_norm(g, store, &format!("dec.l{l}.ln1"), x)?;
            let (a, pr) = attention(g, store, &format!("dec.l{l}.self"), h, h, b, self.cfg.n_heads, Some(mask))?;
            let a = g.dropout(a, p)?;
            x = g.add(x, a)?;
            selfp.push(pr);
            if self.cfg.family == Family::Encdec {
                let h = layer_norm(g, store, &format!("dec.l{l}.ln2"), x)?;
                let (a, pr) = attention(g, store, &format!("dec.l{l}.cross"), h, cond, b, self.cfg.n_heads, None)?;
                let a = g.dropout(a, p)?;
                x = g.add(x, a)?;
                cross.push(pr);
            }
            let h = layer_norm(g, store, &format!("dec.l{l}.ln3"), x)?;
            let f = feed_forward(g, store, &format!("dec.l{l}.ff"), h, self.cfg.activation, p)?;
            let f = g.dropout(f, p)?;
            x = g.add(x, f)?;
        }
        let mut x = layer_norm(g, store, "dec.ln_f", x)?;
        if self.cfg.family == Family::Prefix {
            let np = self.layout.len;
            let mut parts = Vec::with_capacity(b);
            for i in 0..b {
                let start = i * rows + np;
                parts.push(g.slice(x, 0, start, start + len)?);
            }
            x = if b == 1 { parts[0] } else { g.concat(&parts, 0)? };
        }
        Ok((linear(g, store, "dec.out", x)?, cross, selfp))
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<(), RegError> {
        let max = self.cfg.max_tokens();
        if tokens.is_empty() {
            return Err(RegError::Config("empty batch".into()));
        }
        for t in tokens {
            if t.len() > max {
                return Err(RegError::SequenceTooLong { len: t.len(), max });
            }
            if t.first() != Some(&BOS) {
                return Err(RegError::Config("decoder input must start with BOS".into()));
            }
        }
        Ok(())
    }

    /// Mean cross-entropy of `[BOS, w…, EOS]` sequences.
    pub(crate) fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore,
        inputs: &[&ModelInputs],
        seqs: &[Vec<usize>],
    ) -> NnResult<Var> {
        let len = seqs.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0);
        if len == 0 {
            return Err(NnError::EmptyLoss);
        }
        let mut input = Vec::with_capacity(seqs.len());
        let mut targets = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let mut row = s[..s.len() - 1].to_vec();
            row.resize(len, PAD);
            input.push(row);
            targets.extend_from_slice(&s[1..]);
            targets.resize(targets.len() + len - (s.len() - 1), PAD);
        }
        let (cond, _) = self.condition(g, store, inputs)?;
        let (logits, _, _) = self.decode(g, store, cond, &input)?;
        g.cross_entropy(logits, &targets, PAD)
    }
}

fn maps<T: Real>(g: &Graph<T>, probs: &Probs, sample: usize) -> Vec<Vec<AttentionMap>> {
    probs
        .iter()
        .map(|layer| {
            layer[sample]
                .iter()
                .map(|&p| {
                    let s = g.shape(p);
                    AttentionMap {
                        rows: s[0],
                        cols: s[1],
                        data: g.value(p).iter().map(|v| v.as_f32()).collect(),
                    }
                })
                .collect()
        })
        .collect()
}

/// Training loss of a fixed batch as a function of the parameters.
pub struct LossFn<'a> {
    net: Net<'a>,
    inputs: Vec<ModelInputs>,
    seqs: Vec<Vec<usize>>,
}

impl ScalarFn for LossFn<'_> {
    fn eval<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore) -> NnResult<Var> {
        let refs: Vec<&ModelInputs> = self.inputs.iter().collect();
        self.net.loss(g, store, &refs, &self.seqs)
    }
}

impl RegModel {
    pub fn new(config: ModelConfig, dims: SceneDims, vocab: TokenVocab, seed: u64) -> Result<Self, RegError> {
        config.validate(&dims)?;
        let params = Net::new(&config, &dims).init(vocab.len(), seed)?;
        Ok(Self {
            config,
            dims,
            vocab,
            params,
        })
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net::new(&self.config, &self.dims)
    }

    pub fn layout(&self) -> InputLayout {
        InputLayout::of(&self.config, &self.dims)
    }

    pub fn inputs(&self, bundle: &FeatureBundle) -> Result<ModelInputs, RegError> {
        ModelInputs::from_bundle(&self.config, &self.dims, bundle)
    }

    /// The conditioning token sequence `[S, d]` before any encoder layer:
    /// `[V_t; Loc_t; context]` for encdec, the prefix rows for prefix.
    pub fn encode_inputs(&self, bundle: &FeatureBundle) -> Result<Tensor, RegError> {
        let inputs = self.inputs(bundle)?;
        let mut g = Graph::<f32>::inference();
        let x = self.net().input_tokens(&mut g, &self.params, &[&inputs])?;
        Ok(Tensor::new(g.shape(x), g.value(x).to_vec())?)
    }

    /// Teacher-forced logits for decoder inputs starting with BOS.
    pub fn forward(&self, bundles: &[FeatureBundle], tokens: &[Vec<usize>]) -> Result<ForwardOutput, RegError> {
        let net = self.net();
        net.check_tokens(tokens)?;
        if bundles.len() != tokens.len() {
            return Err(RegError::Config("bundles and token rows differ in count".into()));
        }
        let len = tokens.iter().map(Vec::len).max().unwrap_or(0);
        let padded: Vec<Vec<usize>> = tokens
            .iter()
            .map(|t| {
                let mut r = t.clone();
                r.resize(len, PAD);
                r
            })
            .collect();
        let inputs = bundles.iter().map(|b| self.inputs(b)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&ModelInputs> = inputs.iter().collect();
        let mut g = Graph::<f32>::inference();
        let (cond, enc) = net.condition(&mut g, &self.params, &refs)?;
        let (logits, cross, selfp) = net.decode(&mut g, &self.params, cond, &padded)?;
        let traces = (0..bundles.len())
            .map(|i| AttentionTrace {
                layout: net.layout.clone(),
                encoder: maps(&g, &enc, i),
                cross: maps(&g, &cross, i),
                decoder_self: maps(&g, &selfp, i),
                decoded_len: len,
            })
            .collect();
        Ok(ForwardOutput {
            logits: g.value(logits).to_vec(),
            shape: [bundles.len(), len, self.vocab.len()],
            traces,
        })
    }

    /// Loss of a batch of `[BOS, w…, EOS]` sequences, for gradient checks.
    pub fn loss_fn(&self, bundles: &[FeatureBundle], seqs: &[Vec<usize>]) -> Result<LossFn<'_>, RegError> {
        let net = self.net();
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len().saturating_sub(1)]).collect();
        net.check_tokens(&inputs.iter().map(|s| s.to_vec()).collect::<Vec<_>>())?;
        Ok(LossFn {
            net,
            inputs: bundles.iter().map(|b| self.inputs(b)).collect::<Result<_, _>>()?,
            seqs: seqs.to_vec(),
        })
    }

    /// Greedy decoding of a batch. Samples advance in lockstep and each is
    /// computed independently of the others, so results match decoding
    /// one sample at a time.
    pub fn decode(&self, bundles: &[FeatureBundle], max_len: usize, with_trace: bool) -> Result<Vec<Prediction>, RegError> {
        let inputs = bundles.iter().map(|b| self.inputs(b)).collect::<Result<Vec<_>, _>>()?;
        self.decode_inputs(&inputs, max_len, with_trace)
    }

    pub fn decode_inputs(&self, inputs: &[ModelInputs], max_len: usize, with_trace: bool) -> Result<Vec<Prediction>, RegError> {
        let b = inputs.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        if max_len == 0 {
            return Err(RegError::Config("max_len must be positive".into()));
        }
        let max_len = max_len.min(self.config.max_len);
        let net = self.net();
        let d = self.config.d_model;
        let refs: Vec<&ModelInputs> = inputs.iter().collect();
        let mut g = Graph::<f32>::inference();
        let (cond, enc) = net.condition(&mut g, &self.params, &refs)?;
        let rows = g.shape(cond)[0] / b;
        let cond_vals = g.value(cond).to_vec();
        let enc_maps: Vec<Vec<Vec<AttentionMap>>> = if with_trace {
            (0..b).map(|i| maps(&g, &enc, i)).collect()
        } else {
            vec![Vec::new(); b]
        };
        drop(g);

        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; b];
        let mut out: Vec<Option<Prediction>> = vec![None; b];
        for _ in 0..max_len {
            let active: Vec<usize> = (0..b).filter(|&i| out[i].is_none()).collect();
            if active.is_empty() {
                break;
            }
            let mut g = Graph::<f32>::inference();
            let data: Vec<f32> = active
                .iter()
                .flat_map(|&i| cond_vals[i * rows * d..(i + 1) * rows * d].iter().copied())
                .collect();
            let c = g.constant(&[active.len() * rows, d], data)?;
            let batch: Vec<Vec<usize>> = active.iter().map(|&i| seqs[i].clone()).collect();
            let len = batch[0].len();
            let (logits, cross, selfp) = net.decode(&mut g, &self.params, c, &batch)?;
            let v = self.vocab.len();
            let lv = g.value(logits);
            for (j, &i) in active.iter().enumerate() {
                let row = &lv[(j * len + len - 1) * v..(j * len + len) * v];
                let tok = argmax(row);
                seqs[i].push(tok);
                let generated = seqs[i].len() - 1;
                if tok == EOS || generated >= max_len {
                    let ids: Vec<usize> = seqs[i][1..].iter().copied().filter(|&t| t != EOS).collect();
                    let trace = with_trace.then(|| AttentionTrace {
                        layout: net.layout.clone(),
                        encoder: enc_maps[i].clone(),
                        cross: maps(&g, &cross, j),
                        decoder_self: maps(&g, &selfp, j),
                        decoded_len: len,
                    });
                    out[i] = Some(Prediction {
                        tokens: self.vocab.decode(&ids),
                        token_ids: ids,
                        truncated: tok != EOS,
                        trace,
                    });
                }
            }
        }
        Ok(out.into_iter().map(|p| p.expect("every sample finishes")).collect())
    }

    /// Single-sample decoder state for step-wise decoding.
    pub fn stepper(&self, bundle: &FeatureBundle) -> Result<Stepper<'_>, RegError> {
        let inputs = self.inputs(bundle)?;
        let mut g = Graph::<f32>::inference();
        let (cond, _) = self.net().condition(&mut g, &self.params, &[&inputs])?;
        Ok(Stepper {
            model: self,
            shape: [g.shape(cond)[0], g.shape(cond)[1]],
            cond: g.value(cond).to_vec(),
        })
    }
}

pub struct Stepper<'a> {
    model: &'a RegModel,
    cond: Vec<f32>,
    shape: [usize; 2],
}

impl NextTokenModel for Stepper<'_> {
    fn next_token_logits(&mut self, prefix: &[usize]) -> Result<Vec<f32>, RegError> {
        let net = self.model.net();
        net.check_tokens(&[prefix.to_vec()])?;
        let mut g = Graph::<f32>::inference();
        let c = g.constant(&self.shape, self.cond.clone())?;
        let (logits, _, _) = net.decode(&mut g, &self.model.params, c, &[prefix.to_vec()])?;
        let v = self.model.vocab.len();
        let lv = g.value(logits);
        Ok(lv[lv.len() - v..].to_vec())
    }
}
