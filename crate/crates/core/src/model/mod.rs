//! The CA-BERT network: token + learned position embeddings, a stack of
//! pre-norm self-attention encoder blocks with dropout on both sublayer
//! outputs, CLS pooling, and a two-class linear classifier.
//!
//! Forward and backward are written out by hand over [`crate::tensor`]
//! primitives. The classifier reads the raw final-layer CLS vector (no extra
//! pooler layer), and inference in eval mode is a pure function of the
//! parameters and the batch.

pub mod checkpoint;

pub use checkpoint::{checkpoint_id, load_checkpoint, save_checkpoint};

use crate::error::{Error, Result};
use crate::tensor::{
    add, add_assign, add_row_broadcast, col_sum, cross_entropy_weighted, dropout_backward,
    dropout_cached, gelu, gelu_backward, layer_norm, layer_norm_backward, matmul,
    matmul_backward, softmax_rows, softmax_rows_backward, transpose, Parameter, Scalar, Tensor,
};
use crate::tokenizer::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Standard deviation of the truncated-normal weight init.
const INIT_STD: f64 = 0.02;

/// Hyperparameters of the encoder and classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    /// Fixed at 2: context needed / context not needed.
    pub n_classes: usize,
}

impl ModelConfig {
    /// Desk-scale defaults; full BERT-base shapes remain expressible by
    /// setting the fields directly.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: 64,
            dropout_p: 0.1,
            n_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes != 2 {
            return Err(Error::Config(format!(
                "n_classes is fixed at 2, got {}",
                self.n_classes
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model and n_heads must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must cover the reserved tokens, got {}",
                self.vocab_size
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len < 2 {
            return Err(Error::Config(
                "n_layers and d_ff must be >= 1 and max_len >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Parameters of one encoder block.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub(crate) ln1_gamma: Parameter<T>,
    pub(crate) ln1_beta: Parameter<T>,
    pub(crate) wq: Parameter<T>,
    pub(crate) wk: Parameter<T>,
    pub(crate) wv: Parameter<T>,
    pub(crate) wo: Parameter<T>,
    pub(crate) ln2_gamma: Parameter<T>,
    pub(crate) ln2_beta: Parameter<T>,
    pub(crate) ff_w1: Parameter<T>,
    pub(crate) ff_b1: Parameter<T>,
    pub(crate) ff_w2: Parameter<T>,
    pub(crate) ff_b2: Parameter<T>,
}

/// The full model: embeddings, encoder blocks, classifier.
#[derive(Debug, Clone)]
pub struct CaBertModel<T> {
    pub config: ModelConfig,
    pub(crate) token_embedding: Parameter<T>,
    pub(crate) position_embedding: Parameter<T>,
    pub(crate) layers: Vec<LayerParams<T>>,
    pub(crate) classifier_weight: Parameter<T>,
    pub(crate) classifier_bias: Parameter<T>,
}

fn truncated_normal<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut().iter_mut() {
        // Box-Muller, resampled until the draw lands within two standard
        // deviations.
        let z = loop {
            let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                break z;
            }
        };
        *v = T::from_f64(z * INIT_STD);
    }
    t
}

impl<T: Scalar> CaBertModel<T> {
    /// Builds the parameter skeleton (stable names, zero values).
    fn zeroed(config: ModelConfig) -> Self {
        let d = config.d_model;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_gamma: Parameter::new(format!("layer.{i}.ln1.gamma"), Tensor::full(&[d], T::one())),
                ln1_beta: Parameter::new(format!("layer.{i}.ln1.beta"), Tensor::zeros(&[d])),
                wq: Parameter::new(format!("layer.{i}.attn.wq"), Tensor::zeros(&[d, d])),
                wk: Parameter::new(format!("layer.{i}.attn.wk"), Tensor::zeros(&[d, d])),
                wv: Parameter::new(format!("layer.{i}.attn.wv"), Tensor::zeros(&[d, d])),
                wo: Parameter::new(format!("layer.{i}.attn.wo"), Tensor::zeros(&[d, d])),
                ln2_gamma: Parameter::new(format!("layer.{i}.ln2.gamma"), Tensor::full(&[d], T::one())),
                ln2_beta: Parameter::new(format!("layer.{i}.ln2.beta"), Tensor::zeros(&[d])),
                ff_w1: Parameter::new(format!("layer.{i}.ff.w1"), Tensor::zeros(&[d, config.d_ff])),
                ff_b1: Parameter::new(format!("layer.{i}.ff.b1"), Tensor::zeros(&[config.d_ff])),
                ff_w2: Parameter::new(format!("layer.{i}.ff.w2"), Tensor::zeros(&[config.d_ff, d])),
                ff_b2: Parameter::new(format!("layer.{i}.ff.b2"), Tensor::zeros(&[d])),
            });
        }
        Self {
            token_embedding: Parameter::new(
                "embedding.token",
                Tensor::zeros(&[config.vocab_size, d]),
            ),
            position_embedding: Parameter::new(
                "embedding.position",
                Tensor::zeros(&[config.max_len, d]),
            ),
            layers,
            classifier_weight: Parameter::new(
                "classifier.weight",
                Tensor::zeros(&[d, config.n_classes]),
            ),
            classifier_bias: Parameter::new("classifier.bias", Tensor::zeros(&[config.n_classes])),
            config,
        }
    }

    /// Initializes a model deterministically from a seed: weights from a
    /// truncated normal (std 0.02), biases zero, layer-norm gamma 1 / beta 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeroed(config);
        let d = model.config.d_model;
        model.token_embedding.value = truncated_normal(&[model.config.vocab_size, d], &mut rng);
        model.position_embedding.value = truncated_normal(&[model.config.max_len, d], &mut rng);
        for layer in &mut model.layers {
            layer.wq.value = truncated_normal(&[d, d], &mut rng);
            layer.wk.value = truncated_normal(&[d, d], &mut rng);
            layer.wv.value = truncated_normal(&[d, d], &mut rng);
            layer.wo.value = truncated_normal(&[d, d], &mut rng);
            layer.ff_w1.value = truncated_normal(&[d, model.config.d_ff], &mut rng);
            layer.ff_w2.value = truncated_normal(&[model.config.d_ff, d], &mut rng);
        }
        model.classifier_weight.value =
            truncated_normal(&[d, model.config.n_classes], &mut rng);
        Ok(model)
    }

    /// All parameters in their stable checkpoint order.
    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut params = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            params.extend([
                &layer.ln1_gamma,
                &layer.ln1_beta,
                &layer.wq,
                &layer.wk,
                &layer.wv,
                &layer.wo,
                &layer.ln2_gamma,
                &layer.ln2_beta,
                &layer.ff_w1,
                &layer.ff_b1,
                &layer.ff_w2,
                &layer.ff_b2,
            ]);
        }
        params.push(&self.classifier_weight);
        params.push(&self.classifier_bias);
        params
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut params: Vec<&mut Parameter<T>> =
            vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            params.extend([
                &mut layer.ln1_gamma,
                &mut layer.ln1_beta,
                &mut layer.wq,
                &mut layer.wk,
                &mut layer.wv,
                &mut layer.wo,
                &mut layer.ln2_gamma,
                &mut layer.ln2_beta,
                &mut layer.ff_w1,
                &mut layer.ff_b1,
                &mut layer.ff_w2,
                &mut layer.ff_b2,
            ]);
        }
        params.push(&mut self.classifier_weight);
        params.push(&mut self.classifier_bias);
        params
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn validate_batch(&self, batch: &[&TokenSequence]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("forward over an empty batch".into()));
        }
        for (index, seq) in batch.iter().enumerate() {
            if seq.ids.len() != self.config.max_len || seq.attention_mask.len() != self.config.max_len {
                return Err(Error::Input {
                    index,
                    msg: format!(
                        "sequence length {} does not match model max_len {}",
                        seq.ids.len(),
                        self.config.max_len
                    ),
                });
            }
            if seq.true_length == 0 || seq.true_length > self.config.max_len {
                return Err(Error::Input {
                    index,
                    msg: format!("true_length {} out of range", seq.true_length),
                });
            }
            if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::Input {
                    index,
                    msg: format!(
                        "token id {bad} out of range for vocab_size {}",
                        self.config.vocab_size
                    ),
                });
            }
            // A prefix-of-ones mask also guarantees every attention row keeps
            // at least one unmasked key (position 0), so scores never go NaN.
            if seq
                .attention_mask
                .iter()
                .enumerate()
                .any(|(pos, &m)| m != u8::from(pos < seq.true_length))
            {
                return Err(Error::Input {
                    index,
                    msg: format!(
                        "attention mask is not a prefix of {} ones",
                        seq.true_length
                    ),
                });
            }
        }
        Ok(())
    }

    /// Runs the network and returns raw `[B, 2]` logits.
    pub fn forward<R: Rng>(
        &self,
        batch: &[&TokenSequence],
        train_mode: bool,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_impl(batch, train_mode, rng)?.0)
    }

    /// Eval-mode forward: deterministic, dropout disabled.
    pub fn forward_eval(&self, batch: &[&TokenSequence]) -> Result<Tensor<T>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0); // never drawn in eval mode
        Ok(self.forward_impl(batch, false, &mut unused)?.0)
    }

    /// Train-mode forward that keeps every intermediate needed by
    /// [`CaBertModel::backward`].
    pub fn forward_train<R: Rng>(
        &self,
        batch: &[&TokenSequence],
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.forward_impl(batch, true, rng)
    }

    fn forward_impl<R: Rng>(
        &self,
        batch: &[&TokenSequence],
        train_mode: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.validate_batch(batch)?;
        let bsz = batch.len();
        let len = self.config.max_len;
        let d = self.config.d_model;
        let p = self.config.dropout_p;

        // Token + position embeddings.
        let mut h = Tensor::zeros(&[bsz * len, d]);
        {
            let tok = self.token_embedding.value.data();
            let pos = self.position_embedding.value.data();
            let hv = h.data_mut();
            for (b, seq) in batch.iter().enumerate() {
                for (l, &id) in seq.ids.iter().enumerate() {
                    let row = &mut hv[(b * len + l) * d..(b * len + l + 1) * d];
                    let tok_row = &tok[id as usize * d..(id as usize + 1) * d];
                    let pos_row = &pos[l * d..(l + 1) * d];
                    for j in 0..d {
                        row[j] = tok_row[j] + pos_row[j];
                    }
                }
            }
        }

        let seq_masks: Vec<&[u8]> = batch.iter().map(|s| s.attention_mask.as_slice()).collect();
        let mut blocks = Vec::with_capacity(self.config.n_layers);
        for layer in &self.layers {
            let (h_out, cache) = encoder_block_forward(
                &h,
                &seq_masks,
                layer,
                self.config.n_heads,
                p,
                train_mode,
                rng,
            )?;
            blocks.push(cache);
            h = h_out;
        }

        // CLS pooling: the final-layer vector at position 0 of each sequence.
        let mut cls = Tensor::zeros(&[bsz, d]);
        {
            let hv = h.data();
            let cv = cls.data_mut();
            for b in 0..bsz {
                cv[b * d..(b + 1) * d].copy_from_slice(&hv[b * len * d..(b * len * d) + d]);
            }
        }

        let (cls_dropped, mask_cls) = if train_mode {
            let (y, m) = dropout_cached(&cls, p, true, rng)?;
            (y, Some(m))
        } else {
            (cls.clone(), None)
        };

        let logits = add_row_broadcast(
            &matmul(&cls_dropped, &self.classifier_weight.value)?,
            &self.classifier_bias.value,
        )?;

        let cache = ForwardCache {
            ids: batch.iter().map(|s| s.ids.clone()).collect(),
            bsz,
            len,
            blocks,
            cls_dropped,
            mask_cls,
        };
        Ok((logits, cache))
    }

    /// Accumulates gradients for a train-mode forward pass into every
    /// parameter's `grad`.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<()> {
        let bsz = cache.bsz;
        let len = cache.len;
        let d = self.config.d_model;

        // Classifier.
        let (dcls_dropped, dwc) =
            matmul_backward(&cache.cls_dropped, &self.classifier_weight.value, dlogits)?;
        add_assign(&mut self.classifier_weight.grad, &dwc)?;
        add_assign(&mut self.classifier_bias.grad, &col_sum(dlogits))?;
        let dcls = match &cache.mask_cls {
            Some(mask) => dropout_backward(&dcls_dropped, mask)?,
            None => dcls_dropped,
        };

        // Scatter CLS gradient back to position 0 of every sequence.
        let mut dh = Tensor::zeros(&[bsz * len, d]);
        {
            let dv = dh.data_mut();
            let cv = dcls.data();
            for b in 0..bsz {
                dv[b * len * d..(b * len * d) + d].copy_from_slice(&cv[b * d..(b + 1) * d]);
            }
        }

        for (layer, block) in self.layers.iter_mut().zip(&cache.blocks).rev() {
            dh = encoder_block_backward(layer, block, self.config.n_heads, &dh)?;
        }

        // Embedding lookup backward.
        {
            let dv = dh.data();
            let tok = self.token_embedding.grad.data_mut();
            for (b, ids) in cache.ids.iter().enumerate() {
                for (l, &id) in ids.iter().enumerate() {
                    let src = &dv[(b * len + l) * d..(b * len + l + 1) * d];
                    let dst = &mut tok[id as usize * d..(id as usize + 1) * d];
                    for j in 0..d {
                        dst[j] = dst[j] + src[j];
                    }
                }
            }
            let pos = self.position_embedding.grad.data_mut();
            for b in 0..bsz {
                for l in 0..len {
                    let src = &dv[(b * len + l) * d..(b * len + l + 1) * d];
                    let dst = &mut pos[l * d..(l + 1) * d];
                    for j in 0..d {
                        dst[j] = dst[j] + src[j];
                    }
                }
            }
        }
        Ok(())
    }

    /// Convenience: train-mode forward, loss, and backward in one call.
    /// Returns the loss.
    pub fn train_step<R: Rng>(
        &mut self,
        batch: &[&TokenSequence],
        labels: &[usize],
        class_weights: Option<&[T]>,
        rng: &mut R,
    ) -> Result<T> {
        let (logits, cache) = self.forward_train(batch, rng)?;
        let (loss, dlogits) = cross_entropy_weighted(&logits, labels, class_weights)?;
        self.backward(&cache, &dlogits)?;
        Ok(loss)
    }
}

/// Everything [`CaBertModel::backward`] needs from a train-mode forward.
pub struct ForwardCache<T> {
    ids: Vec<Vec<u32>>,
    bsz: usize,
    len: usize,
    blocks: Vec<BlockCache<T>>,
    cls_dropped: Tensor<T>,
    mask_cls: Option<Tensor<T>>,
}

pub(crate) struct AttnCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Attention probabilities, `[B * H * L, L]`.
    probs: Tensor<T>,
    /// Concatenated per-head context, `[B * L, d]`, before the O projection.
    ctx: Tensor<T>,
}

pub(crate) struct BlockCache<T> {
    h_in: Tensor<T>,
    x1: Tensor<T>,
    attn: AttnCache<T>,
    mask1: Option<Tensor<T>>,
    h_mid: Tensor<T>,
    x2: Tensor<T>,
    u: Tensor<T>,
    act: Tensor<T>,
    mask2: Option<Tensor<T>>,
}

fn gather_head<T: Scalar>(
    src: &Tensor<T>,
    b: usize,
    head: usize,
    len: usize,
    d: usize,
    dh: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(&[len, dh]);
    let sv = src.data();
    let ov = out.data_mut();
    for i in 0..len {
        let base = (b * len + i) * d + head * dh;
        ov[i * dh..(i + 1) * dh].copy_from_slice(&sv[base..base + dh]);
    }
    out
}

fn scatter_head_add<T: Scalar>(
    dst: &mut Tensor<T>,
    src: &Tensor<T>,
    b: usize,
    head: usize,
    len: usize,
    d: usize,
    dh: usize,
) {
    let sv = src.data();
    let dv = dst.data_mut();
    for i in 0..len {
        let base = (b * len + i) * d + head * dh;
        for j in 0..dh {
            dv[base + j] = dv[base + j] + sv[i * dh + j];
        }
    }
}

/// Multi-head scaled dot-product self-attention over `[B * L, d]` hidden
/// states. Masked key positions receive `-inf` scores before the softmax, so
/// they get exactly zero attention weight.
pub(crate) fn multi_head_attention<T: Scalar>(
    x: &Tensor<T>,
    seq_masks: &[&[u8]],
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    wo: &Tensor<T>,
    n_heads: usize,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    let d = x.last_dim();
    if d % n_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d} must be divisible by n_heads {n_heads}"
        )));
    }
    let bsz = seq_masks.len();
    let len = x.rows_2d() / bsz;
    if bsz * len != x.rows_2d() {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: x.shape().to_vec(),
            rhs: vec![bsz],
        });
    }
    let dh = d / n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let q = matmul(x, wq)?;
    let k = matmul(x, wk)?;
    let v = matmul(x, wv)?;

    let mut probs = Tensor::zeros(&[bsz * n_heads * len, len]);
    let mut ctx = Tensor::zeros(&[bsz * len, d]);
    for b in 0..bsz {
        for head in 0..n_heads {
            let qbh = gather_head(&q, b, head, len, d, dh);
            let kbh = gather_head(&k, b, head, len, d, dh);
            let vbh = gather_head(&v, b, head, len, d, dh);

            let mut scores = matmul(&qbh, &transpose(&kbh)?)?;
            {
                let sv = scores.data_mut();
                for (i, s) in sv.iter_mut().enumerate() {
                    *s = *s * scale;
                    if seq_masks[b][i % len] == 0 {
                        *s = T::neg_infinity();
                    }
                }
            }
            let a = softmax_rows(&scores);
            let ctx_bh = matmul(&a, &vbh)?;

            let dst_base = (b * n_heads + head) * len;
            probs.data_mut()[dst_base * len..(dst_base + len) * len]
                .copy_from_slice(a.data());
            scatter_head_add(&mut ctx, &ctx_bh, b, head, len, d, dh);
        }
    }
    let out = matmul(&ctx, wo)?;
    Ok((
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            ctx,
        },
    ))
}

/// Backward of [`multi_head_attention`]. Accumulates projection gradients
/// and returns the gradient with respect to the input hidden states.
fn multi_head_attention_backward<T: Scalar>(
    x1: &Tensor<T>,
    cache: &AttnCache<T>,
    wq: &mut Parameter<T>,
    wk: &mut Parameter<T>,
    wv: &mut Parameter<T>,
    wo: &mut Parameter<T>,
    n_heads: usize,
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = x1.last_dim();
    let dh = d / n_heads;
    let rows = x1.rows_2d();
    let len = cache.probs.last_dim();
    let bsz = rows / len;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    // out = ctx * Wo
    let (dctx, dwo) = matmul_backward(&cache.ctx, &wo.value, d_out)?;
    add_assign(&mut wo.grad, &dwo)?;

    let mut dq = Tensor::zeros(&[rows, d]);
    let mut dk = Tensor::zeros(&[rows, d]);
    let mut dv = Tensor::zeros(&[rows, d]);
    for b in 0..bsz {
        for head in 0..n_heads {
            let qbh = gather_head(&cache.q, b, head, len, d, dh);
            let kbh = gather_head(&cache.k, b, head, len, d, dh);
            let vbh = gather_head(&cache.v, b, head, len, d, dh);
            let dctx_bh = gather_head(&dctx, b, head, len, d, dh);

            let probs_base = (b * n_heads + head) * len;
            let a = Tensor::new(
                vec![len, len],
                cache.probs.data()[probs_base * len..(probs_base + len) * len].to_vec(),
            )?;

            // ctx_bh = A * V
            let da = matmul(&dctx_bh, &transpose(&vbh)?)?;
            let dvbh = matmul(&transpose(&a)?, &dctx_bh)?;
            // scores = scale * Q K^T (+ mask); masked entries have A = 0 and
            // therefore get zero gradient from the softmax backward.
            let mut ds = softmax_rows_backward(&a, &da)?;
            for s in ds.data_mut().iter_mut() {
                *s = *s * scale;
            }
            let dqbh = matmul(&ds, &kbh)?;
            let dkbh = matmul(&transpose(&ds)?, &qbh)?;

            scatter_head_add(&mut dq, &dqbh, b, head, len, d, dh);
            scatter_head_add(&mut dk, &dkbh, b, head, len, d, dh);
            scatter_head_add(&mut dv, &dvbh, b, head, len, d, dh);
        }
    }

    let (mut dx1, dwq) = matmul_backward(x1, &wq.value, &dq)?;
    add_assign(&mut wq.grad, &dwq)?;
    let (dx1_k, dwk) = matmul_backward(x1, &wk.value, &dk)?;
    add_assign(&mut wk.grad, &dwk)?;
    add_assign(&mut dx1, &dx1_k)?;
    let (dx1_v, dwv) = matmul_backward(x1, &wv.value, &dv)?;
    add_assign(&mut wv.grad, &dwv)?;
    add_assign(&mut dx1, &dx1_v)?;
    Ok(dx1)
}

/// Pre-norm encoder block:
/// `h + Dropout(MHA(LN1(h)))` followed by `+ Dropout(FF(LN2(.)))`.
pub(crate) fn encoder_block_forward<T: Scalar, R: Rng>(
    h: &Tensor<T>,
    seq_masks: &[&[u8]],
    layer: &LayerParams<T>,
    n_heads: usize,
    dropout_p: f64,
    train_mode: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let x1 = layer_norm(h, &layer.ln1_gamma.value, &layer.ln1_beta.value, eps)?;
    let (attn_out, attn_cache) = multi_head_attention(
        &x1,
        seq_masks,
        &layer.wq.value,
        &layer.wk.value,
        &layer.wv.value,
        &layer.wo.value,
        n_heads,
    )?;
    let (y1, mask1) = if train_mode {
        let (y, m) = dropout_cached(&attn_out, dropout_p, true, rng)?;
        (y, Some(m))
    } else {
        (attn_out, None)
    };
    let h_mid = add(h, &y1)?;

    let x2 = layer_norm(&h_mid, &layer.ln2_gamma.value, &layer.ln2_beta.value, eps)?;
    let u = add_row_broadcast(&matmul(&x2, &layer.ff_w1.value)?, &layer.ff_b1.value)?;
    let act = gelu(&u);
    let ff_out = add_row_broadcast(&matmul(&act, &layer.ff_w2.value)?, &layer.ff_b2.value)?;
    let (y2, mask2) = if train_mode {
        let (y, m) = dropout_cached(&ff_out, dropout_p, true, rng)?;
        (y, Some(m))
    } else {
        (ff_out, None)
    };
    let h_out = add(&h_mid, &y2)?;

    Ok((
        h_out,
        BlockCache {
            h_in: h.clone(),
            x1,
            attn: attn_cache,
            mask1,
            h_mid,
            x2,
            u,
            act,
            mask2,
        },
    ))
}

/// Backward of [`encoder_block_forward`]; returns the gradient with respect
/// to the block input.
fn encoder_block_backward<T: Scalar>(
    layer: &mut LayerParams<T>,
    cache: &BlockCache<T>,
    n_heads: usize,
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let eps = T::from_f64(LAYER_NORM_EPS);

    // h_out = h_mid + Dropout(FF(x2))
    let dff_out = match &cache.mask2 {
        Some(mask) => dropout_backward(d_out, mask)?,
        None => d_out.clone(),
    };
    let (dact, dw2) = matmul_backward(&cache.act, &layer.ff_w2.value, &dff_out)?;
    add_assign(&mut layer.ff_w2.grad, &dw2)?;
    add_assign(&mut layer.ff_b2.grad, &col_sum(&dff_out))?;
    let du = gelu_backward(&cache.u, &dact)?;
    let (dx2, dw1) = matmul_backward(&cache.x2, &layer.ff_w1.value, &du)?;
    add_assign(&mut layer.ff_w1.grad, &dw1)?;
    add_assign(&mut layer.ff_b1.grad, &col_sum(&du))?;
    let (dh_mid_ln, dg2, db2) =
        layer_norm_backward(&cache.h_mid, &layer.ln2_gamma.value, eps, &dx2)?;
    add_assign(&mut layer.ln2_gamma.grad, &dg2)?;
    add_assign(&mut layer.ln2_beta.grad, &db2)?;
    let dh_mid = add(d_out, &dh_mid_ln)?;

    // h_mid = h_in + Dropout(MHA(x1))
    let dattn_out = match &cache.mask1 {
        Some(mask) => dropout_backward(&dh_mid, mask)?,
        None => dh_mid.clone(),
    };
    let dx1 = multi_head_attention_backward(
        &cache.x1,
        &cache.attn,
        &mut layer.wq,
        &mut layer.wk,
        &mut layer.wv,
        &mut layer.wo,
        n_heads,
        &dattn_out,
    )?;
    let (dh_in_ln, dg1, db1) =
        layer_norm_backward(&cache.h_in, &layer.ln1_gamma.value, eps, &dx1)?;
    add_assign(&mut layer.ln1_gamma.grad, &dg1)?;
    add_assign(&mut layer.ln1_beta.grad, &db1)?;
    add(&dh_mid, &dh_in_ln)
}

/// A single decision for one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// 1 = context needed, 0 = context not needed.
    pub label: u8,
    /// Softmax probability of "context needed". A probability of exactly
    /// 0.5 maps to label 0 (ties favor skipping the context fetch).
    pub p_context: f64,
}

/// Argmax decisions with class-1 probabilities from `[B, 2]` logits.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Prediction>> {
    if logits.shape().len() != 2 || logits.last_dim() != 2 {
        return Err(Error::Shape {
            op: "predict",
            lhs: logits.shape().to_vec(),
            rhs: vec![0, 2],
        });
    }
    let mut out = Vec::with_capacity(logits.rows_2d());
    for row in logits.data().chunks(2) {
        let l0 = row[0].to_f64();
        let l1 = row[1].to_f64();
        let m = l0.max(l1);
        let e0 = (l0 - m).exp();
        let e1 = (l1 - m).exp();
        let p_context = e1 / (e0 + e1);
        out.push(Prediction {
            label: u8::from(p_context > 0.5),
            p_context,
        });
    }
    Ok(out)
}
