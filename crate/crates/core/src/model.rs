//! Encoder, split representation, projection heads and the cross-attention
//! reconstruction decoder.
//!
//! Parameters live in one [`ParamStore`]; a forward pass binds the store to a
//! tape (one leaf per tensor) and the graph-building functions address
//! parameters through the resulting `&[Var]` slice. Both views are encoded in
//! one concatenated batch, so they are produced by the same parameter leaves.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcore::{GradError, Scalar, Tape, Tensor, Var};
use crate::imageops::{batch_dims, ImageBatch, CHANNELS};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { image_size: 32, patch_size: 4, dim: 512, depth: 6, heads: 8, mlp_ratio: 4 }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    /// Width of each half of the pooled representation.
    pub fn split_dim(&self) -> usize {
        self.dim / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub out: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 256, out: 192 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { blocks: 6, dim: 192, heads: 4, mlp_ratio: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub decoder: DecoderConfig,
    /// Scale attention logits by `1/sqrt(d_head)`.
    pub attention_scaling: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            decoder: DecoderConfig::default(),
            attention_scaling: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let e = &self.encoder;
        let err = |m: String| Err(ModelError::Config(m));
        if e.patch_size == 0 || e.image_size == 0 || e.image_size % e.patch_size != 0 {
            return err(format!("image size {} is not divisible by patch size {}", e.image_size, e.patch_size));
        }
        if e.dim == 0 || e.heads == 0 || e.dim % e.heads != 0 {
            return err(format!("encoder dim {} is not divisible by {} heads", e.dim, e.heads));
        }
        if e.dim % 2 != 0 {
            return err(format!("encoder dim {} cannot be split in halves", e.dim));
        }
        if e.depth == 0 || e.mlp_ratio == 0 {
            return err("encoder depth and mlp ratio must be positive".into());
        }
        if self.head.hidden == 0 || self.head.out == 0 {
            return err("head widths must be positive".into());
        }
        let d = &self.decoder;
        if d.blocks == 0 {
            return err("decoder needs at least one block".into());
        }
        if d.dim != self.head.out {
            return err(format!("decoder dim {} must equal the head output dim {}", d.dim, self.head.out));
        }
        if d.heads == 0 || d.dim % d.heads != 0 || d.mlp_ratio == 0 {
            return err(format!("decoder dim {} is not divisible by {} heads", d.dim, d.heads));
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ parameters

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { tensors: IndexMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let (i, old) = self.tensors.insert_full(name.into(), value);
        assert!(old.is_none(), "duplicate parameter name");
        ParamId(i)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors.get_index(id.0).unwrap().0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.values_mut()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// One trainable leaf per tensor, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.values().map(|t| tape.param(t.clone())).collect()
    }

    /// Leaves that do not require gradients, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.values().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }
}

impl ParamStore<f32> {
    /// CRC32 over names, shapes and little-endian values.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(&x.to_le_bytes());
            }
        }
        h.finalize()
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    pub(crate) store: ParamStore<f32>,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), store: ParamStore::default() }
    }

    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(vec![fan_in, fan_out], |_| self.rng.gen_range(-a..a) as f32);
        self.store.insert(name, t)
    }

    /// Fixed 2-D sine-cosine table for a `grid x grid` layout: the first
    /// half of the channels encodes the row, the second half the column.
    fn sincos(&mut self, name: String, grid: usize, dim: usize) -> ParamId {
        let half = dim / 2;
        let t = Tensor::from_fn(vec![grid * grid, dim], |i| {
            let (token, c) = (i / dim, i % dim);
            let (pos, k, m) = if c < half { (token / grid, c, half) } else { (token % grid, c - half, dim - half) };
            let omega = 10000f64.powf(-((k / 2 * 2) as f64) / m as f64);
            let a = pos as f64 * omega;
            (if k % 2 == 0 { a.sin() } else { a.cos() }) as f32
        });
        self.store.insert(name, t)
    }

    fn fill(&mut self, name: String, shape: Vec<usize>, v: f32) -> ParamId {
        self.store.insert(name, Tensor::full(shape, v))
    }

    pub(crate) fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let w = self.xavier(format!("{}.weight", name), fan_in, fan_out);
        let b = bias.then(|| self.fill(format!("{}.bias", name), vec![fan_out], 0.0));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.fill(format!("{}.gamma", name), vec![dim], 1.0),
            beta: self.fill(format!("{}.beta", name), vec![dim], 0.0),
        }
    }

    fn attention(&mut self, name: &str, dim: usize, heads: usize, output: bool) -> Attention {
        Attention {
            wq: self.xavier(format!("{}.wq", name), dim, dim),
            wk: self.xavier(format!("{}.wk", name), dim, dim),
            wv: self.xavier(format!("{}.wv", name), dim, dim),
            out: output.then(|| self.linear(&format!("{}.out", name), dim, dim, true)),
            heads,
        }
    }

    fn block(&mut self, name: &str, dim: usize, heads: usize, ratio: usize, attn_out: bool, cross: bool) -> Block {
        Block {
            norm1: self.norm(&format!("{}.norm1", name), dim),
            norm_kv: cross.then(|| self.norm(&format!("{}.norm_kv", name), dim)),
            attn: self.attention(&format!("{}.attn", name), dim, heads, attn_out),
            norm2: self.norm(&format!("{}.norm2", name), dim),
            fc1: self.linear(&format!("{}.fc1", name), dim, dim * ratio, true),
            fc2: self.linear(&format!("{}.fc2", name), dim * ratio, dim, true),
        }
    }
}

// ------------------------------------------------------------------ layout

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Multi-head attention with `[dim, dim]` query/key/value projections and no
/// biases. The decoder's attention has no output projection, so each layer
/// computes `softmax(Q K^T) V` per head with heads concatenated.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Option<Linear>,
    pub heads: usize,
}

/// Pre-norm transformer block; `norm_kv` is present only on the
/// cross-attention block and normalizes the key/value tokens.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub norm_kv: Option<Norm>,
    pub attn: Attention,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    pub enc_pos: ParamId,
    pub enc_blocks: Vec<Block>,
    pub head_inv: (Linear, Linear),
    pub head_equi: (Linear, Linear),
    pub dec_pos: ParamId,
    pub dec_blocks: Vec<Block>,
    pub dec_out: Linear,
}

/// Parameter store plus the structure that addresses it.
#[derive(Clone, Debug)]
pub struct Model {
    pub layout: Layout,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init = Init::new(seed);
        let e = &config.encoder;
        let patch_embed = init.linear("encoder.patch_embed", e.patch_dim(), e.dim, true);
        let enc_pos = init.sincos("encoder.pos".into(), e.grid(), e.dim);
        let enc_blocks = (0..e.depth)
            .map(|i| init.block(&format!("encoder.blocks.{}", i), e.dim, e.heads, e.mlp_ratio, true, false))
            .collect();
        let h = &config.head;
        let mut head = |name: &str| {
            (
                init.linear(&format!("{}.fc1", name), e.split_dim(), h.hidden, true),
                init.linear(&format!("{}.fc2", name), h.hidden, h.out, true),
            )
        };
        let head_inv = head("head_inv");
        let head_equi = head("head_equi");
        let d = &config.decoder;
        let dec_pos = init.sincos("decoder.pos".into(), e.grid(), d.dim);
        let dec_blocks = (0..d.blocks)
            .map(|i| init.block(&format!("decoder.blocks.{}", i), d.dim, d.heads, d.mlp_ratio, false, i == 0))
            .collect();
        // zero-initialised: early reconstructions are the bias alone
        let dec_out = Linear {
            w: init.fill("decoder.out.weight".into(), vec![d.dim, e.patch_dim()], 0.0),
            b: Some(init.fill("decoder.out.bias".into(), vec![e.patch_dim()], 0.0)),
        };
        let layout = Layout {
            config,
            patch_embed,
            enc_pos,
            enc_blocks,
            head_inv,
            head_equi,
            dec_pos,
            dec_blocks,
            dec_out,
        };
        Ok(Self { layout, params: init.store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    /// Parameter names belonging to the reconstruction decoder.
    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("decoder.")
    }
}

// ------------------------------------------------------------------ graph pieces

/// Split pooled representation: `inv` and `equi` are `[N, dim/2]`.
#[derive(Clone, Copy, Debug)]
pub struct Split {
    pub pooled: Var,
    pub inv: Var,
    pub equi: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    pub inv: Var,
    pub equi: Var,
}

/// Graph nodes of one two-view forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub rep1: Split,
    pub rep2: Split,
    pub emb1: Embeddings,
    pub emb2: Embeddings,
    pub recon: Option<Var>,
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, p: &[Var], l: &Linear, x: Var) -> Result<Var, GradError> {
    let y = tape.matmul(x, p[l.w.0])?;
    match l.b {
        Some(b) => tape.add(y, p[b.0]),
        None => Ok(y),
    }
}

fn norm<T: Scalar>(tape: &mut Tape<T>, p: &[Var], n: &Norm, x: Var) -> Result<Var, GradError> {
    tape.layernorm(x, p[n.gamma.0], p[n.beta.0], 1e-6)
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var, GradError> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, t, heads, d / heads])?;
    tape.permute(x, &[0, 2, 1, 3])
}

/// Multi-head attention of `queries [B, Tq, D]` over `keys_values [B, Tk, D]`
/// with projection matrices `wq`, `wk`, `wv` of shape `[D, D]`.
/// Returns the `[B, Tq, D]` output and the `[B, H, Tq, Tk]` attention weights.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    keys_values: Var,
    (wq, wk, wv): (Var, Var, Var),
    heads: usize,
    scaling: bool,
) -> Result<(Var, Var), GradError> {
    let (sq, sk) = (tape.shape(queries).to_vec(), tape.shape(keys_values).to_vec());
    let d = *sq.last().unwrap_or(&0);
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sk[2] != d {
        return Err(GradError::Shape(format!("cross_attention: queries {:?} vs keys/values {:?}", sq, sk)));
    }
    for w in [wq, wk, wv] {
        if tape.shape(w) != [d, d] {
            return Err(GradError::Shape(format!(
                "cross_attention: projection {:?} does not match token dim {}",
                tape.shape(w),
                d
            )));
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(GradError::Shape(format!("cross_attention: dim {} not divisible by {} heads", d, heads)));
    }
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(keys_values, wk)?;
    let v = tape.matmul(keys_values, wv)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let kt = tape.transpose(k)?;
    let mut logits = tape.matmul(q, kt)?;
    if scaling {
        logits = tape.scale(logits, T::lit(1.0 / ((d / heads) as f64).sqrt()));
    }
    let probs = tape.softmax(logits, 3)?;
    let o = tape.matmul(probs, v)?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[sq[0], sq[1], d])?;
    Ok((o, probs))
}

fn block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &[Var],
    b: &Block,
    x: Var,
    kv: Option<Var>,
    scaling: bool,
) -> Result<Var, GradError> {
    let h = norm(tape, p, &b.norm1, x)?;
    let kv = match (kv, &b.norm_kv) {
        (Some(kv), Some(n)) => norm(tape, p, n, kv)?,
        (Some(kv), None) => kv,
        (None, _) => h,
    };
    let (mut a, _) = cross_attention(tape, h, kv, (p[b.attn.wq.0], p[b.attn.wk.0], p[b.attn.wv.0]), b.attn.heads, scaling)?;
    if let Some(out) = &b.attn.out {
        a = linear(tape, p, out, a)?;
    }
    let x = tape.add(x, a)?;
    let h = norm(tape, p, &b.norm2, x)?;
    let h = linear(tape, p, &b.fc1, h)?;
    let h = tape.gelu(h);
    let h = linear(tape, p, &b.fc2, h)?;
    tape.add(x, h)
}

/// `[N, 3, H, W]` to `[N, P, 3 * patch^2]`; tokens are row-major over the
/// patch grid, values ordered (channel, row, column) within a patch.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>, GradError> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(GradError::Shape(format!("patchify: {:?} is not divisible into {}x{} patches", s, patch, patch)));
    }
    let (n, c, gh, gw) = (s[0], s[1], s[2] / patch, s[3] / patch);
    let x = images.clone().reshape(vec![n, c, gh, patch, gw, patch])?;
    x.permute(&[0, 2, 4, 1, 3, 5])?.reshape(vec![n, gh * gw, c * patch * patch])
}

/// Inverse of [`patchify`] for an `h x w` image.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, patch: usize, h: usize, w: usize) -> Result<Tensor<T>, GradError> {
    let (n, gh, gw, c) = unpatchify_dims(tokens.shape(), patch, h, w)?;
    let x = tokens.clone().reshape(vec![n, gh, gw, c, patch, patch])?;
    x.permute(&[0, 3, 1, 4, 2, 5])?.reshape(vec![n, c, h, w])
}

fn unpatchify_dims(s: &[usize], patch: usize, h: usize, w: usize) -> Result<(usize, usize, usize, usize), GradError> {
    let ok = s.len() == 3 && patch > 0 && h % patch == 0 && w % patch == 0;
    let (gh, gw) = if ok { (h / patch, w / patch) } else { (0, 0) };
    if !ok || s[1] != gh * gw || s[2] % (patch * patch) != 0 {
        return Err(GradError::Shape(format!("unpatchify: tokens {:?} do not tile a {}x{} image", s, h, w)));
    }
    Ok((s[0], gh, gw, s[2] / (patch * patch)))
}

/// [`unpatchify`] as a differentiable graph node.
pub fn unpatchify_var<T: Scalar>(tape: &mut Tape<T>, tokens: Var, patch: usize, h: usize, w: usize) -> Result<Var, GradError> {
    let (n, gh, gw, c) = unpatchify_dims(tape.shape(tokens), patch, h, w)?;
    let x = tape.reshape(tokens, &[n, gh, gw, c, patch, patch])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(x, &[n, c, h, w])
}

impl Layout {
    /// Encodes a batch into the split pooled representation.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], images: &Tensor<T>) -> Result<Split, ModelError> {
        let e = &self.config.encoder;
        let s = images.shape();
        if s.len() != 4 || s[1] != CHANNELS || s[2] != e.image_size || s[3] != e.image_size {
            return Err(GradError::Shape(format!(
                "encode: images {:?} do not match configured {}x{} RGB input",
                s, e.image_size, e.image_size
            ))
            .into());
        }
        let tokens = tape.constant(patchify(images, e.patch_size)?);
        let mut x = linear(tape, p, &self.patch_embed, tokens)?;
        x = tape.add(x, p[self.enc_pos.0])?;
        for b in &self.enc_blocks {
            x = block(tape, p, b, x, None, self.config.attention_scaling)?;
        }
        let pooled = tape.mean_axis(x, 1)?;
        let half = e.split_dim();
        let inv = tape.narrow(pooled, 1, 0, half)?;
        let equi = tape.narrow(pooled, 1, half, half)?;
        Ok(Split { pooled, inv, equi })
    }

    fn head<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], h: &(Linear, Linear), y: Var) -> Result<Var, GradError> {
        let z = linear(tape, p, &h.0, y)?;
        let z = tape.gelu(z);
        linear(tape, p, &h.1, z)
    }

    /// Applies `g_inv` and `g_equi` to the two halves of the representation.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], rep: &Split) -> Result<Embeddings, ModelError> {
        let inv = self.head(tape, p, &self.head_inv, rep.inv)?;
        let equi = self.head(tape, p, &self.head_equi, rep.equi)?;
        Ok(Embeddings { inv, equi })
    }

    /// Reconstructs the second view from `[N, E]` equivariant embeddings:
    /// queries come from view 2, keys and values from view 1.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], z_equi_v1: Var, z_equi_v2: Var) -> Result<Var, ModelError> {
        let e = &self.config.encoder;
        let d = self.config.decoder.dim;
        for z in [z_equi_v1, z_equi_v2] {
            let s = tape.shape(z);
            if s.len() != 2 || s[1] != d {
                return Err(GradError::Shape(format!("decode: embedding {:?} is not [N, {}]", s, d)).into());
            }
        }
        if tape.shape(z_equi_v1) != tape.shape(z_equi_v2) {
            return Err(GradError::Shape(format!(
                "decode: view embeddings {:?} and {:?} differ",
                tape.shape(z_equi_v1),
                tape.shape(z_equi_v2)
            ))
            .into());
        }
        let tokens = |tape: &mut Tape<T>, z: Var| -> Result<Var, GradError> {
            let t = tape.expand(z, 1, e.num_patches())?;
            tape.add(t, p[self.dec_pos.0])
        };
        let mut x = tokens(tape, z_equi_v2)?;
        let kv = tokens(tape, z_equi_v1)?;
        for (i, b) in self.dec_blocks.iter().enumerate() {
            let kv = (i == 0).then_some(kv);
            x = block(tape, p, b, x, kv, self.config.attention_scaling)?;
        }
        let out = linear(tape, p, &self.dec_out, x)?;
        Ok(unpatchify_var(tape, out, e.patch_size, e.image_size, e.image_size)?)
    }

    /// Encodes both views in one shared-weight batch, projects, and
    /// optionally reconstructs view 2.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        v1: &Tensor<T>,
        v2: &Tensor<T>,
        reconstruct: bool,
    ) -> Result<Forward, ModelError> {
        if v1.shape() != v2.shape() {
            return Err(GradError::Shape(format!("forward: views {:?} and {:?} differ", v1.shape(), v2.shape())).into());
        }
        let n = v1.shape()[0];
        let mut both = v1.data().to_vec();
        both.extend_from_slice(v2.data());
        let mut shape = v1.shape().to_vec();
        shape[0] = 2 * n;
        let rep = self.encode(tape, p, &Tensor::from_vec(shape, both))?;
        let emb = self.project(tape, p, &rep)?;
        let halves = |tape: &mut Tape<T>, v: Var| -> Result<(Var, Var), GradError> {
            Ok((tape.narrow(v, 0, 0, n)?, tape.narrow(v, 0, n, n)?))
        };
        let (p1, p2) = halves(tape, rep.pooled)?;
        let (yi1, yi2) = halves(tape, rep.inv)?;
        let (ye1, ye2) = halves(tape, rep.equi)?;
        let (zi1, zi2) = halves(tape, emb.inv)?;
        let (ze1, ze2) = halves(tape, emb.equi)?;
        let recon = if reconstruct { Some(self.decode(tape, p, ze1, ze2)?) } else { None };
        Ok(Forward {
            rep1: Split { pooled: p1, inv: yi1, equi: ye1 },
            rep2: Split { pooled: p2, inv: yi2, equi: ye2 },
            emb1: Embeddings { inv: zi1, equi: ze1 },
            emb2: Embeddings { inv: zi2, equi: ze2 },
            recon,
        })
    }
}

/// Which part of the representation to read out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    Pooled,
    Inv,
    Equi,
}

impl Model {
    /// Inference-only representations of `images`, computed in chunks.
    pub fn features(&self, images: &ImageBatch, which: Feature, chunk: usize) -> Result<Vec<Vec<f32>>, ModelError> {
        let (n, h, w) = batch_dims(images);
        let per = CHANNELS * h * w;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let m = chunk.max(1).min(n - start);
            let part = Tensor::from_vec(vec![m, CHANNELS, h, w], images.data()[start * per..(start + m) * per].to_vec());
            let mut tape = Tape::<f32>::new();
            let p = self.params.bind_frozen(&mut tape);
            let rep = self.layout.encode(&mut tape, &p, &part)?;
            let v = match which {
                Feature::Pooled => rep.pooled,
                Feature::Inv => rep.inv,
                Feature::Equi => rep.equi,
            };
            let t = tape.value(v);
            let width = t.shape()[1];
            out.extend(t.data().chunks(width).map(|r| r.to_vec()));
            start += m;
        }
        Ok(out)
    }

    /// Reconstructs `v2` from the pair `(v1, v2)` without recording gradients.
    pub fn reconstruct(&self, v1: &ImageBatch, v2: &ImageBatch) -> Result<ImageBatch, ModelError> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind_frozen(&mut tape);
        let f = self.layout.forward(&mut tape, &p, v1, v2, true)?;
        Ok(tape.value(f.recon.unwrap()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { image_size: 4, patch_size: 2, dim: 8, depth: 1, heads: 2, mlp_ratio: 2 },
            head: HeadConfig { hidden: 6, out: 4 },
            decoder: DecoderConfig { blocks: 2, dim: 4, heads: 2, mlp_ratio: 2 },
            attention_scaling: true,
        }
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut c = tiny();
        c.encoder.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.decoder.dim = 6;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let m = Model::new(tiny(), 0).unwrap();
        let names: Vec<&str> = m.params.iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "encoder.patch_embed.weight");
        assert!(names.iter().any(|n| *n == "decoder.blocks.0.norm_kv.gamma"));
        assert!(!names.iter().any(|n| *n == "decoder.blocks.1.norm_kv.gamma"));
        assert_eq!(m.params.id("decoder.out.bias").map(|i| m.params.name(i)), Some("decoder.out.bias"));
    }

    #[test]
    fn default_dims_follow_the_512_split() {
        let c = ModelConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.encoder.split_dim(), 256);
        assert_eq!(c.head.out, 192);
    }
}
