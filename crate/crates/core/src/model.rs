//! Toy pre-norm encoder-decoder transformer with the three rescaling sites
//! (attention keys, attention values, FFN inner activations) exposed.
//!
//! Weights use the `x · W` convention: a projection `W` has shape
//! `[d_in, d_out]` and is applied to row-major activations `x: [T, d_in]`.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ia3::BoundAdapter;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Token id fed to the decoder before the first target token.
pub const DECODER_START: usize = 0;

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    /// Total key width across heads.
    pub d_k: usize,
    /// Total value width across heads.
    pub d_v: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelSpec {
    /// Spec used by tests and the default CLI config.
    pub fn toy() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            num_heads: 4,
            d_k: 32,
            d_v: 32,
            d_ff: 64,
            enc_layers: 2,
            dec_layers: 2,
            max_seq_len: 64,
            activation: Activation::Relu,
        }
    }

    /// Layer shapes of a 3B-parameter T5-style encoder-decoder.
    pub fn t0_3b_dims() -> Self {
        Self {
            vocab_size: 32128,
            d_model: 2048,
            num_heads: 32,
            d_k: 2048,
            d_v: 2048,
            d_ff: 5120,
            enc_layers: 24,
            dec_layers: 24,
            max_seq_len: 512,
            activation: Activation::Gelu,
        }
    }

    /// Layer shapes of an 11B-parameter T5-style encoder-decoder.
    pub fn t0_11b_dims() -> Self {
        Self {
            vocab_size: 32128,
            d_model: 4096,
            num_heads: 64,
            d_k: 4096,
            d_v: 4096,
            d_ff: 10240,
            enc_layers: 24,
            dec_layers: 24,
            max_seq_len: 512,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.d_k.is_multiple_of(self.num_heads) {
            return Err(Error::config("d_k", "must be divisible by num_heads"));
        }
        if !self.d_v.is_multiple_of(self.num_heads) {
            return Err(Error::config("d_v", "must be divisible by num_heads"));
        }
        Ok(())
    }

    pub fn head_dim_k(&self) -> usize {
        self.d_k / self.num_heads
    }

    pub fn head_dim_v(&self) -> usize {
        self.d_v / self.num_heads
    }

    /// Closed-form count of base-model scalars.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 2 * d * self.d_k + d * self.d_v + self.d_v * d;
        let ffn = 2 * d * self.d_ff;
        let enc_block = attn + ffn + 2 * d;
        let dec_block = 2 * attn + ffn + 3 * d;
        self.vocab_size * d * 2
            + self.max_seq_len * d
            + self.enc_layers * enc_block
            + self.dec_layers * dec_block
            + 2 * d
    }

    /// Every weight name with its shape, in a fixed order.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("embed".to_string(), vec![self.vocab_size, d]),
            ("pos".to_string(), vec![self.max_seq_len, d]),
            ("lm_head".to_string(), vec![d, self.vocab_size]),
            ("enc.final_norm".to_string(), vec![d]),
            ("dec.final_norm".to_string(), vec![d]),
        ];
        let attn = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{prefix}.q"), vec![d, self.d_k]));
            out.push((format!("{prefix}.k"), vec![d, self.d_k]));
            out.push((format!("{prefix}.v"), vec![d, self.d_v]));
            out.push((format!("{prefix}.o"), vec![self.d_v, d]));
        };
        let ffn = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{prefix}.w1"), vec![d, self.d_ff]));
            out.push((format!("{prefix}.w2"), vec![self.d_ff, d]));
        };
        for i in 0..self.enc_layers {
            out.push((format!("enc.{i}.attn_norm"), vec![d]));
            attn(&format!("enc.{i}.attn"), &mut out);
            out.push((format!("enc.{i}.ffn_norm"), vec![d]));
            ffn(&format!("enc.{i}.ffn"), &mut out);
        }
        for i in 0..self.dec_layers {
            out.push((format!("dec.{i}.self_norm"), vec![d]));
            attn(&format!("dec.{i}.self"), &mut out);
            out.push((format!("dec.{i}.cross_norm"), vec![d]));
            attn(&format!("dec.{i}.cross"), &mut out);
            out.push((format!("dec.{i}.ffn_norm"), vec![d]));
            ffn(&format!("dec.{i}.ffn"), &mut out);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    spec: ModelSpec,
    weights: BTreeMap<String, Tensor<F>>,
}

/// Builds a model with seeded random weights: projections and the output
/// head are drawn from `N(0, 1/d_model)`, embeddings from `N(0, 1)`, and
/// norm gains start at one.
pub fn build_model<F: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<F>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Normal::new(0.0, 1.0 / (spec.d_model as f64).sqrt()).expect("valid std");
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let mut weights = BTreeMap::new();
    for (name, shape) in spec.weight_shapes() {
        let tensor = if name.ends_with("norm") {
            Tensor::ones(&shape)?
        } else if name == "embed" || name == "pos" {
            Tensor::from_fn(&shape, |_| F::lit(unit.sample(&mut rng)))?
        } else {
            Tensor::from_fn(&shape, |_| F::lit(proj.sample(&mut rng)))?
        };
        weights.insert(name, tensor);
    }
    Ok(Model {
        spec: spec.clone(),
        weights,
    })
}

impl<F: Real> Model<F> {
    /// Assembles a model from named weights, checking every name and shape.
    pub fn from_weights(spec: ModelSpec, mut weights: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.weight_shapes();
        if weights.len() != expected.len() {
            return Err(Error::Contract(format!(
                "expected {} weight tensors, got {}",
                expected.len(),
                weights.len()
            )));
        }
        for (name, shape) in &expected {
            let t = weights
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("missing weight `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("Model::from_weights", shape, t.shape()));
            }
        }
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor<F>> {
        &mut self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<F>> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown weight `{name}`")))
    }

    pub fn num_scalars(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every weight on `tape`, trainable or constant.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> BoundModel<'t, F> {
        let vars = self
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect::<BTreeMap<_, _>>();
        let get = |name: &str| vars[name];
        let attn = |prefix: &str| AttnVars {
            q: get(&format!("{prefix}.q")),
            k: get(&format!("{prefix}.k")),
            v: get(&format!("{prefix}.v")),
            o: get(&format!("{prefix}.o")),
        };
        let ffn = |prefix: &str| FfnVars {
            w1: get(&format!("{prefix}.w1")),
            w2: get(&format!("{prefix}.w2")),
        };
        let enc = (0..self.spec.enc_layers)
            .map(|i| EncBlock {
                attn_norm: get(&format!("enc.{i}.attn_norm")),
                attn: attn(&format!("enc.{i}.attn")),
                ffn_norm: get(&format!("enc.{i}.ffn_norm")),
                ffn: ffn(&format!("enc.{i}.ffn")),
            })
            .collect();
        let dec = (0..self.spec.dec_layers)
            .map(|i| DecBlock {
                self_norm: get(&format!("dec.{i}.self_norm")),
                self_attn: attn(&format!("dec.{i}.self")),
                cross_norm: get(&format!("dec.{i}.cross_norm")),
                cross_attn: attn(&format!("dec.{i}.cross")),
                ffn_norm: get(&format!("dec.{i}.ffn_norm")),
                ffn: ffn(&format!("dec.{i}.ffn")),
            })
            .collect();
        BoundModel {
            spec: self.spec.clone(),
            tape,
            embed: get("embed"),
            pos: get("pos"),
            lm_head: get("lm_head"),
            enc_final_norm: get("enc.final_norm"),
            dec_final_norm: get("dec.final_norm"),
            enc,
            dec,
            vars,
        }
    }

    /// Teacher-forced decoder logits `[target.len(), vocab_size]` for one
    /// example, on a private tape.
    pub fn logits(
        &self,
        adapter: Option<&crate::ia3::IA3Adapter<F>>,
        input: &[usize],
        target: &[usize],
    ) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let bound_adapter = adapter.map(|a| a.bind(&tape, false)).transpose()?;
        Ok(bound.forward(bound_adapter.as_ref(), input, target)?.value())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnVars<'t, F> {
    pub q: Var<'t, F>,
    pub k: Var<'t, F>,
    pub v: Var<'t, F>,
    pub o: Var<'t, F>,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars<'t, F> {
    pub w1: Var<'t, F>,
    pub w2: Var<'t, F>,
}

#[derive(Clone, Copy, Debug)]
struct EncBlock<'t, F> {
    attn_norm: Var<'t, F>,
    attn: AttnVars<'t, F>,
    ffn_norm: Var<'t, F>,
    ffn: FfnVars<'t, F>,
}

#[derive(Clone, Copy, Debug)]
struct DecBlock<'t, F> {
    self_norm: Var<'t, F>,
    self_attn: AttnVars<'t, F>,
    cross_norm: Var<'t, F>,
    cross_attn: AttnVars<'t, F>,
    ffn_norm: Var<'t, F>,
    ffn: FfnVars<'t, F>,
}

/// Model weights recorded on a tape, ready for forward passes.
pub struct BoundModel<'t, F> {
    spec: ModelSpec,
    tape: &'t Tape<F>,
    embed: Var<'t, F>,
    pos: Var<'t, F>,
    lm_head: Var<'t, F>,
    enc_final_norm: Var<'t, F>,
    dec_final_norm: Var<'t, F>,
    enc: Vec<EncBlock<'t, F>>,
    dec: Vec<DecBlock<'t, F>>,
    vars: BTreeMap<String, Var<'t, F>>,
}

/// One decoder sequence in a packed batch: a target teacher-forced against
/// the encoder input of `example`.
#[derive(Clone, Copy, Debug)]
pub struct DecodeSegment<'a> {
    pub example: usize,
    pub target: &'a [usize],
}

/// Logits for every decoder row of a packed batch, with per-segment offsets.
pub struct PackedLogits<'t, F> {
    pub logits: Var<'t, F>,
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

/// Scaled dot-product attention with optional key/value rescaling:
/// `softmax(Q (l_k ⊙ K)ᵀ / √d_head) (l_v ⊙ V)` computed per head.
///
/// `l_k` and `l_v` may be rank-1 vectors of the full key/value width or
/// per-row scale matrices matching `k`/`v`. They are applied before the head
/// split. `mask` is added to every head's scores and should hold `-inf` at
/// blocked positions.
pub fn attention<'t, F: Real>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    l_k: Option<Var<'t, F>>,
    l_v: Option<Var<'t, F>>,
    mask: Option<Var<'t, F>>,
    num_heads: usize,
) -> Result<Var<'t, F>> {
    let k = match l_k {
        Some(l) => k.mul(l)?,
        None => k,
    };
    let v = match l_v {
        Some(l) => v.mul(l)?,
        None => v,
    };
    multi_head(q, k, v, mask, num_heads)
}

fn multi_head<'t, F: Real>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    mask: Option<Var<'t, F>>,
    num_heads: usize,
) -> Result<Var<'t, F>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if qs[1] % num_heads != 0 || vs[1] % num_heads != 0 {
        return Err(Error::shape("attention heads", &qs, &vs));
    }
    let dk = qs[1] / num_heads;
    let dv = vs[1] / num_heads;
    let inv_sqrt = F::one() / F::from_usize(dk).expect("usize fits").sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = if num_heads == 1 { q } else { q.slice_cols(h * dk, dk)? };
        let kh = if num_heads == 1 { k } else { k.slice_cols(h * dk, dk)? };
        let vh = if num_heads == 1 { v } else { v.slice_cols(h * dv, dv)? };
        let mut scores = qh.matmul(kh.transpose()?)?.scale(inv_sqrt)?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        heads.push(scores.softmax()?.matmul(vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        q.tape().concat_cols(&heads)
    }
}

/// Position-wise feed-forward network `(l_ff ⊙ γ(x W₁)) W₂`.
pub fn ffn<'t, F: Real>(
    x: Var<'t, F>,
    w1: Var<'t, F>,
    w2: Var<'t, F>,
    l_ff: Option<Var<'t, F>>,
    activation: Activation,
) -> Result<Var<'t, F>> {
    let h = x.matmul(w1)?;
    let h = match activation {
        Activation::Relu => h.relu()?,
        Activation::Gelu => h.gelu()?,
    };
    let h = match l_ff {
        Some(l) => h.mul(l)?,
        None => h,
    };
    h.matmul(w2)
}

/// Which adapter site of a block a scale refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) enum Site {
    EncK(usize),
    EncV(usize),
    EncFf(usize),
    SelfK(usize),
    SelfV(usize),
    CrossK(usize),
    CrossV(usize),
    DecFf(usize),
}

impl<'t, F: Real> BoundModel<'t, F> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    /// Weight vars keyed by name, for reading gradients after backward.
    pub fn vars(&self) -> &BTreeMap<String, Var<'t, F>> {
        &self.vars
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.spec.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.spec.max_seq_len
            )));
        }
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= self.spec.vocab_size) {
            return Err(Error::Input {
                token,
                position,
                vocab_size: self.spec.vocab_size,
            });
        }
        Ok(())
    }

    /// Teacher-forced logits `[target.len(), vocab_size]` for one example.
    pub fn forward(
        &self,
        adapter: Option<&BoundAdapter<'t, F>>,
        input: &[usize],
        target: &[usize],
    ) -> Result<Var<'t, F>> {
        let packed = self.forward_packed(&[adapter], &[input], &[DecodeSegment { example: 0, target }])?;
        Ok(packed.logits)
    }

    /// Runs several encoder inputs and decoder targets through the model in
    /// one pass. Rows of all sequences are stacked so projections are shared
    /// matmuls; attention stays within each sequence. `adapters[i]` rescales
    /// only the activations of example `i` and of the decoder segments that
    /// belong to it.
    pub fn forward_packed(
        &self,
        adapters: &[Option<&BoundAdapter<'t, F>>],
        inputs: &[&[usize]],
        decodes: &[DecodeSegment<'_>],
    ) -> Result<PackedLogits<'t, F>> {
        if adapters.len() != inputs.len() {
            return Err(Error::Contract(format!(
                "{} adapters for {} inputs",
                adapters.len(),
                inputs.len()
            )));
        }
        if inputs.is_empty() || decodes.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        for input in inputs {
            self.check_tokens(input)?;
        }
        for seg in decodes {
            if seg.example >= inputs.len() {
                return Err(Error::Contract(format!(
                    "decode segment refers to example {} of {}",
                    seg.example,
                    inputs.len()
                )));
            }
            self.check_tokens(seg.target)?;
        }
        for a in adapters.iter().flatten() {
            a.check_spec(&self.spec)?;
        }

        let tape = self.tape;
        let enc_lens: Vec<usize> = inputs.iter().map(|x| x.len()).collect();
        let enc_offsets = offsets(&enc_lens);
        let dec_lens: Vec<usize> = decodes.iter().map(|s| s.target.len()).collect();
        let dec_offsets = offsets(&dec_lens);
        let dec_owner: Vec<usize> = decodes.iter().map(|s| s.example).collect();
        let scales = ScaleBuilder {
            tape,
            adapters,
            enc_lens: &enc_lens,
            dec_lens: &dec_lens,
            dec_owner: &dec_owner,
        };

        // Encoder.
        let tokens: Vec<usize> = inputs.iter().flat_map(|x| x.iter().copied()).collect();
        let positions: Vec<usize> = enc_lens.iter().flat_map(|&n| 0..n).collect();
        let mut x = self
            .embed
            .gather_rows(&tokens)?
            .add(self.pos.gather_rows(&positions)?)?;
        let enc_segs: Vec<(usize, usize)> = enc_offsets.iter().copied().zip(enc_lens.iter().copied()).collect();
        for (i, block) in self.enc.iter().enumerate() {
            let a = x.rms_norm(block.attn_norm, F::lit(NORM_EPS))?;
            let q = a.matmul(block.attn.q)?;
            let k = scales.apply(a.matmul(block.attn.k)?, Site::EncK(i))?;
            let v = scales.apply(a.matmul(block.attn.v)?, Site::EncV(i))?;
            let att = self.segmented_attention(q, k, v, &enc_segs, &enc_segs, false)?;
            x = x.add(att.matmul(block.attn.o)?)?;
            let b = x.rms_norm(block.ffn_norm, F::lit(NORM_EPS))?;
            let l_ff = scales.get(Site::EncFf(i))?;
            x = x.add(ffn(b, block.ffn.w1, block.ffn.w2, l_ff, self.spec.activation)?)?;
        }
        let memory = x.rms_norm(self.enc_final_norm, F::lit(NORM_EPS))?;

        // Decoder.
        let dec_tokens: Vec<usize> = decodes
            .iter()
            .flat_map(|s| std::iter::once(DECODER_START).chain(s.target[..s.target.len() - 1].iter().copied()))
            .collect();
        let dec_positions: Vec<usize> = dec_lens.iter().flat_map(|&n| 0..n).collect();
        let mut y = self
            .embed
            .gather_rows(&dec_tokens)?
            .add(self.pos.gather_rows(&dec_positions)?)?;
        let dec_segs: Vec<(usize, usize)> = dec_offsets.iter().copied().zip(dec_lens.iter().copied()).collect();
        let cross_segs: Vec<(usize, usize)> = dec_owner.iter().map(|&e| enc_segs[e]).collect();
        for (i, block) in self.dec.iter().enumerate() {
            let a = y.rms_norm(block.self_norm, F::lit(NORM_EPS))?;
            let q = a.matmul(block.self_attn.q)?;
            let k = scales.apply(a.matmul(block.self_attn.k)?, Site::SelfK(i))?;
            let v = scales.apply(a.matmul(block.self_attn.v)?, Site::SelfV(i))?;
            let att = self.segmented_attention(q, k, v, &dec_segs, &dec_segs, true)?;
            y = y.add(att.matmul(block.self_attn.o)?)?;

            let c = y.rms_norm(block.cross_norm, F::lit(NORM_EPS))?;
            let q = c.matmul(block.cross_attn.q)?;
            let k = scales.apply(memory.matmul(block.cross_attn.k)?, Site::CrossK(i))?;
            let v = scales.apply(memory.matmul(block.cross_attn.v)?, Site::CrossV(i))?;
            let att = self.segmented_attention(q, k, v, &dec_segs, &cross_segs, false)?;
            y = y.add(att.matmul(block.cross_attn.o)?)?;

            let b = y.rms_norm(block.ffn_norm, F::lit(NORM_EPS))?;
            let l_ff = scales.get(Site::DecFf(i))?;
            y = y.add(ffn(b, block.ffn.w1, block.ffn.w2, l_ff, self.spec.activation)?)?;
        }
        let logits = y
            .rms_norm(self.dec_final_norm, F::lit(NORM_EPS))?
            .matmul(self.lm_head)?;
        Ok(PackedLogits {
            logits,
            offsets: dec_offsets,
            lens: dec_lens,
        })
    }

    /// Attention where query segment `i` attends only to key segment `i`.
    fn segmented_attention(
        &self,
        q: Var<'t, F>,
        k: Var<'t, F>,
        v: Var<'t, F>,
        q_segs: &[(usize, usize)],
        kv_segs: &[(usize, usize)],
        causal: bool,
    ) -> Result<Var<'t, F>> {
        let heads = self.spec.num_heads;
        let total_q = q.shape()[0];
        let total_kv = k.shape()[0];
        let mut masks: HashMap<usize, Var<'t, F>> = HashMap::new();
        let mut outs = Vec::with_capacity(q_segs.len());
        for (&(qo, ql), &(ko, kl)) in q_segs.iter().zip(kv_segs) {
            let qi = if ql == total_q { q } else { q.slice_rows(qo, ql)? };
            let (ki, vi) = if kl == total_kv {
                (k, v)
            } else {
                (k.slice_rows(ko, kl)?, v.slice_rows(ko, kl)?)
            };
            let mask = if causal {
                Some(*masks.entry(ql).or_insert_with(|| self.tape.constant(causal_mask(ql))))
            } else {
                None
            };
            outs.push(multi_head(qi, ki, vi, mask, heads)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            self.tape.concat(&outs)
        }
    }
}

fn offsets(lens: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    lens.iter()
        .map(|&n| {
            let o = acc;
            acc += n;
            o
        })
        .collect()
}

fn causal_mask<F: Real>(n: usize) -> Tensor<F> {
    Tensor::from_fn(&[n, n], |i| if i % n > i / n { F::neg_infinity() } else { F::zero() }).expect("square mask")
}

/// Resolves per-example adapters into the scale applied at one site of a
/// packed batch.
struct ScaleBuilder<'a, 't, F> {
    tape: &'t Tape<F>,
    adapters: &'a [Option<&'a BoundAdapter<'t, F>>],
    enc_lens: &'a [usize],
    dec_lens: &'a [usize],
    dec_owner: &'a [usize],
}

impl<'t, F: Real> ScaleBuilder<'_, 't, F> {
    /// `None` when no example carries an adapter. A rank-1 vector when all
    /// examples share one adapter; otherwise a per-row scale matrix.
    fn get(&self, site: Site) -> Result<Option<Var<'t, F>>> {
        let first = self.adapters[0];
        let shared = self.adapters.iter().all(|a| match (a, first) {
            (Some(a), Some(f)) => std::ptr::eq(*a, f),
            (None, None) => true,
            _ => false,
        });
        if shared {
            return Ok(first.map(|a| a.site(site)));
        }
        // Rows per sequence and which example owns each sequence.
        let (lens, owners): (&[usize], Vec<usize>) = match site {
            Site::EncK(_) | Site::EncV(_) | Site::EncFf(_) | Site::CrossK(_) | Site::CrossV(_) => {
                (self.enc_lens, (0..self.enc_lens.len()).collect())
            }
            Site::SelfK(_) | Site::SelfV(_) | Site::DecFf(_) => (self.dec_lens, self.dec_owner.to_vec()),
        };
        let mut parts = Vec::with_capacity(lens.len());
        for (&len, &owner) in lens.iter().zip(&owners) {
            let part = match self.adapters[owner] {
                Some(a) => a.site(site).repeat_rows(len)?,
                None => {
                    let width = self
                        .adapters
                        .iter()
                        .flatten()
                        .next()
                        .expect("at least one adapter when not shared")
                        .site(site)
                        .shape()[0];
                    self.tape.constant(Tensor::ones(&[len, width])?)
                }
            };
            parts.push(part);
        }
        Ok(Some(self.tape.concat(&parts)?))
    }

    fn apply(&self, x: Var<'t, F>, site: Site) -> Result<Var<'t, F>> {
        match self.get(site)? {
            Some(s) => x.mul(s),
            None => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Model<f64> {
        build_model(&ModelSpec::toy(), 7).unwrap()
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a: Model<f64> = build_model(&ModelSpec::toy(), 3).unwrap();
        let b: Model<f64> = build_model(&ModelSpec::toy(), 3).unwrap();
        assert_eq!(a, b);
        let c: Model<f64> = build_model(&ModelSpec::toy(), 4).unwrap();
        assert!(a.weights().iter().any(|(k, v)| c.weights()[k] != *v));
    }

    #[test]
    fn param_count_matches_enumeration() {
        let m = toy();
        assert_eq!(m.num_scalars(), m.spec().param_count());
    }

    #[test]
    fn invalid_spec_names_field() {
        let mut spec = ModelSpec::toy();
        spec.d_k = 30;
        let err = build_model::<f64>(&spec, 0).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "d_k"));
        spec = ModelSpec::toy();
        spec.enc_layers = 0;
        let err = build_model::<f64>(&spec, 0).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "enc_layers"));
    }

    #[test]
    fn logits_shape() {
        let m = toy();
        let out = m.logits(None, &[1, 2, 3, 4], &[5, 6, 7]).unwrap();
        assert_eq!(out.shape(), &[3, 64]);
    }

    #[test]
    fn out_of_range_token_reports_position() {
        let m = toy();
        let err = m.logits(None, &[1, 99, 3], &[5]).unwrap_err();
        assert!(matches!(
            err,
            Error::Input {
                token: 99,
                position: 1,
                ..
            }
        ));
    }

    #[test]
    fn decoder_is_causal() {
        let m = toy();
        let a = m.logits(None, &[3, 4, 5], &[10, 11, 12, 13]).unwrap();
        let b = m.logits(None, &[3, 4, 5], &[10, 11, 40, 41]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t), "position {t}");
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn attention_with_zero_values_is_zero() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1).unwrap());
        let k = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()).unwrap());
        let v = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).cos()).unwrap());
        let zeros = tape.constant(Tensor::zeros(&[4]).unwrap());
        let out = attention(q, k, v, None, Some(zeros), None, 2).unwrap().value();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_single_position_returns_scaled_value() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let k = tape.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, -3.0, 4.0]).unwrap());
        let v = tape.constant(Tensor::matrix(1, 4, vec![0.5, 1.5, -2.5, 3.0]).unwrap());
        let l_k = tape.constant(Tensor::vector(vec![9.0, -4.0, 0.1, 2.0]).unwrap());
        let l_v = tape.constant(Tensor::vector(vec![2.0, 0.5, 1.0, -1.0]).unwrap());
        let out = attention(q, k, v, Some(l_k), Some(l_v), None, 2).unwrap().value();
        assert_eq!(out.data(), &[1.0, 0.75, -2.5, -3.0]);
    }

    #[test]
    fn attention_ones_matches_plain() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin()).unwrap());
        let k = tape.constant(Tensor::from_fn(&[5, 4], |i| (i as f64 * 1.3).cos()).unwrap());
        let v = tape.constant(Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.3).sin()).unwrap());
        let ones = tape.constant(Tensor::ones(&[4]).unwrap());
        let plain = attention(q, k, v, None, None, None, 2).unwrap().value();
        let scaled = attention(q, k, v, Some(ones), Some(ones), None, 2).unwrap().value();
        assert_eq!(plain, scaled);
        let short = tape.constant(Tensor::ones(&[3]).unwrap());
        assert!(matches!(
            attention(q, k, v, Some(short), None, None, 2),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn ffn_matches_hand_computation() {
        // x = [1, -2]; W1 = [[1, 2], [3, -1]] -> xW1 = [-5, 4] -> relu [0, 4]
        // l_ff = [3, 0.5] -> [0, 2]; W2 = [[1, 1], [2, -1]] -> [4, -2]
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
        let w1 = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, -1.0]).unwrap());
        let w2 = tape.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 2.0, -1.0]).unwrap());
        let l = tape.constant(Tensor::vector(vec![3.0, 0.5]).unwrap());
        let out = ffn(x, w1, w2, Some(l), Activation::Relu).unwrap().value();
        assert_eq!(out.data(), &[4.0, -2.0]);

        let ones = tape.constant(Tensor::ones(&[2]).unwrap());
        let base = ffn(x, w1, w2, None, Activation::Relu).unwrap().value();
        let with_ones = ffn(x, w1, w2, Some(ones), Activation::Relu).unwrap().value();
        assert_eq!(base, with_ones);

        let zeros = tape.constant(Tensor::zeros(&[2]).unwrap());
        let z = ffn(x, w1, w2, Some(zeros), Activation::Relu).unwrap().value();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
