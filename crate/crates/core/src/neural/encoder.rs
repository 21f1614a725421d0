//! Post-norm transformer encoder with hand-written reverse mode.

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::linalg::{
    add_row_bias, col_sum_acc, dot, gelu, gelu_grad, matmul, matmul_acc, matmul_nt_acc,
    matmul_tn_acc,
};
use super::params::{Grads, ParamId, ParamStore};
use super::scalar::Real;
use super::tokenizer::EncodedSeq;
use super::Rng;
use crate::adapters::{AdapterSetup, ComposeTrace};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const NUM_SEGMENTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 256,
            max_len: 256,
            vocab_size,
            dropout: default_dropout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::InvalidArgument(
                "encoder dimensions must be positive".into(),
            ));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidArgument("max_len must be at least 2".into()));
        }
        if self.vocab_size <= super::tokenizer::NUM_SPECIAL as usize {
            return Err(Error::InvalidArgument(
                "vocabulary holds only special tokens".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of the base encoder (no heads, no adapters).
    pub fn param_count(&self) -> usize {
        let (v, h, f, l, p) = (
            self.vocab_size,
            self.hidden,
            self.ffn,
            self.layers,
            self.max_len,
        );
        let embeddings = v * h + p * h + NUM_SEGMENTS * h;
        let attention = 4 * (h * h + h);
        let norms = 2 * 2 * h;
        let feed_forward = (h * f + f) + (f * h + h);
        let pooler = h * h + h;
        embeddings + l * (attention + norms + feed_forward) + pooler
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct BaseIds {
    token: ParamId,
    position: ParamId,
    segment: ParamId,
    layers: Vec<LayerIds>,
    pool_w: ParamId,
    pool_b: ParamId,
}

/// Names of the base parameters, in creation order.
pub fn base_param_names(layers: usize) -> Vec<String> {
    let mut names = vec![
        "embeddings.token".to_string(),
        "embeddings.position".to_string(),
        "embeddings.segment".to_string(),
    ];
    for l in 0..layers {
        for part in [
            "attention.query.weight",
            "attention.query.bias",
            "attention.key.weight",
            "attention.key.bias",
            "attention.value.weight",
            "attention.value.bias",
            "attention.output.weight",
            "attention.output.bias",
            "attention.norm.gamma",
            "attention.norm.beta",
            "ffn.inner.weight",
            "ffn.inner.bias",
            "ffn.outer.weight",
            "ffn.outer.bias",
            "ffn.norm.gamma",
            "ffn.norm.beta",
        ] {
            names.push(format!("layer.{l}.{part}"));
        }
    }
    names.push("pooler.weight".into());
    names.push("pooler.bias".into());
    names
}

pub fn is_base_param(name: &str) -> bool {
    name.starts_with("embeddings.") || name.starts_with("layer.") || name.starts_with("pooler.")
}

/// Transformer encoder plus any heads and adapters registered in its store.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
    base: BaseIds,
    pub(crate) adapters: Option<AdapterSetup>,
}

pub(crate) fn normal_vec<T: Real>(rng: &mut Rng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
        .collect()
}

impl<T: Real> EncoderModel<T> {
    /// Freshly initialized encoder. Same seed, same weights.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let (v, h, f) = (config.vocab_size, config.hidden, config.ffn);
        let mut store = ParamStore::new();
        let emb_std = 0.1;
        let w_std = 1.0 / (h as f64).sqrt();
        let ff_std = 1.0 / (f as f64).sqrt();
        let zeros = |n: usize| vec![T::zero(); n];
        let ones = |n: usize| vec![T::one(); n];

        let token = store.add(
            "embeddings.token",
            &[v, h],
            normal_vec(&mut rng, v * h, emb_std),
        )?;
        let position = store.add(
            "embeddings.position",
            &[config.max_len, h],
            normal_vec(&mut rng, config.max_len * h, emb_std),
        )?;
        let segment = store.add(
            "embeddings.segment",
            &[NUM_SEGMENTS, h],
            normal_vec(&mut rng, NUM_SEGMENTS * h, emb_std),
        )?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            let mut lin =
                |store: &mut ParamStore<T>, name: &str, rows: usize, cols: usize, std: f64| {
                    let w = store.add(
                        &p(&format!("{name}.weight")),
                        &[rows, cols],
                        normal_vec(&mut rng, rows * cols, std),
                    )?;
                    let b = store.add(&p(&format!("{name}.bias")), &[cols], zeros(cols))?;
                    Ok::<_, Error>((w, b))
                };
            let (q_w, q_b) = lin(&mut store, "attention.query", h, h, w_std)?;
            let (k_w, k_b) = lin(&mut store, "attention.key", h, h, w_std)?;
            let (v_w, v_b) = lin(&mut store, "attention.value", h, h, w_std)?;
            let (o_w, o_b) = lin(&mut store, "attention.output", h, h, w_std)?;
            let ln1_g = store.add(&p("attention.norm.gamma"), &[h], ones(h))?;
            let ln1_b = store.add(&p("attention.norm.beta"), &[h], zeros(h))?;
            let (ff1_w, ff1_b) = lin(&mut store, "ffn.inner", h, f, w_std)?;
            let (ff2_w, ff2_b) = lin(&mut store, "ffn.outer", f, h, ff_std)?;
            let ln2_g = store.add(&p("ffn.norm.gamma"), &[h], ones(h))?;
            let ln2_b = store.add(&p("ffn.norm.beta"), &[h], zeros(h))?;
            layers.push(LayerIds {
                q_w,
                q_b,
                k_w,
                k_b,
                v_w,
                v_b,
                o_w,
                o_b,
                ln1_g,
                ln1_b,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
                ln2_g,
                ln2_b,
            });
        }
        let pool_w = store.add("pooler.weight", &[h, h], normal_vec(&mut rng, h * h, w_std))?;
        let pool_b = store.add("pooler.bias", &[h], zeros(h))?;
        Ok(EncoderModel {
            config,
            params: store,
            base: BaseIds {
                token,
                position,
                segment,
                layers,
                pool_w,
                pool_b,
            },
            adapters: None,
        })
    }

    /// Rebuilds a model around a loaded store; every base parameter must be
    /// present with the configured shape.
    pub fn from_store(config: EncoderConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = EncoderModel::<T>::new(config.clone(), 0)?;
        for (_, p) in reference.params.iter() {
            let id = params.require(&p.name)?;
            if params.get(id).shape != p.shape {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, found {:?}",
                    p.name,
                    p.shape,
                    params.get(id).shape
                )));
            }
        }
        let ids = |name: &str| params.require(name);
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let p = |s: &str| ids(&format!("layer.{l}.{s}"));
            layers.push(LayerIds {
                q_w: p("attention.query.weight")?,
                q_b: p("attention.query.bias")?,
                k_w: p("attention.key.weight")?,
                k_b: p("attention.key.bias")?,
                v_w: p("attention.value.weight")?,
                v_b: p("attention.value.bias")?,
                o_w: p("attention.output.weight")?,
                o_b: p("attention.output.bias")?,
                ln1_g: p("attention.norm.gamma")?,
                ln1_b: p("attention.norm.beta")?,
                ff1_w: p("ffn.inner.weight")?,
                ff1_b: p("ffn.inner.bias")?,
                ff2_w: p("ffn.outer.weight")?,
                ff2_b: p("ffn.outer.bias")?,
                ln2_g: p("ffn.norm.gamma")?,
                ln2_b: p("ffn.norm.beta")?,
            });
        }
        let base = BaseIds {
            token: ids("embeddings.token")?,
            position: ids("embeddings.position")?,
            segment: ids("embeddings.segment")?,
            layers,
            pool_w: ids("pooler.weight")?,
            pool_b: ids("pooler.bias")?,
        };
        Ok(EncoderModel {
            config,
            params,
            base,
            adapters: None,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.base.token
    }

    pub fn adapter_setup(&self) -> Option<&AdapterSetup> {
        self.adapters.as_ref()
    }

    /// Converts to another element type, keeping names, freeze flags and adapters.
    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            params: self.params.cast(),
            base: self.base.clone(),
            adapters: self.adapters.clone(),
        }
    }

    /// Runs the encoder over the unpadded prefix of `seq`. With `record`, the
    /// activations needed by [`EncoderModel::backward`] are kept. Dropout is
    /// applied only when an rng is supplied.
    pub fn forward(
        &self,
        seq: &EncodedSeq,
        record: bool,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Encoded<T>> {
        let cfg = &self.config;
        let h = cfg.hidden;
        let n = seq.valid_len();
        if n == 0 {
            return Err(Error::Shape("sequence has no unmasked positions".into()));
        }
        if n > cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence length {n} exceeds max_len {}",
                cfg.max_len
            )));
        }
        if seq.ids.len() != seq.mask.len() || seq.ids.len() != seq.segments.len() {
            return Err(Error::Shape(
                "ids, segments and mask differ in length".into(),
            ));
        }
        let ids = &seq.ids[..n];
        let segs = &seq.segments[..n];
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} out of vocabulary range"
            )));
        }
        if segs.iter().any(|&s| s as usize >= NUM_SEGMENTS) {
            return Err(Error::Shape("segment id out of range".into()));
        }
        let key_mask: Vec<bool> = seq.mask[..n].iter().map(|&m| m == 1).collect();
        let p_drop = cfg.dropout;

        let tok = self.params.data(self.base.token);
        let pos = self.params.data(self.base.position);
        let seg = self.params.data(self.base.segment);
        let mut x = vec![T::zero(); n * h];
        for t in 0..n {
            let row = &mut x[t * h..(t + 1) * h];
            let ti = ids[t] as usize;
            let si = segs[t] as usize;
            for d in 0..h {
                row[d] = tok[ti * h + d] + pos[t * h + d] + seg[si * h + d];
            }
        }
        let emb_drop = apply_dropout(&mut x, p_drop, dropout.as_deref_mut());

        let mut layer_caches = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (out, cache) =
                self.layer_forward(l, x, n, &key_mask, dropout.as_deref_mut(), record);
            x = out;
            if let Some(c) = cache {
                layer_caches.push(c);
            }
        }

        let pw = self.params.data(self.base.pool_w);
        let pb = self.params.data(self.base.pool_b);
        let mut pooled = pb.to_vec();
        matmul_acc(&x[..h], pw, &mut pooled, 1, h, h);
        for p in pooled.iter_mut() {
            *p = p.tanh();
        }

        let cache = record.then(|| {
            Box::new(Cache {
                ids: ids.to_vec(),
                segs: segs.to_vec(),
                emb_drop,
                layers: layer_caches,
            })
        });
        Ok(Encoded {
            n,
            hidden: x,
            pooled,
            cache,
        })
    }

    fn layer_forward(
        &self,
        l: usize,
        x: Vec<T>,
        n: usize,
        key_mask: &[bool],
        mut dropout: Option<&mut Rng>,
        record: bool,
    ) -> (Vec<T>, Option<LayerCache<T>>) {
        let cfg = &self.config;
        let (h, f, heads) = (cfg.hidden, cfg.ffn, cfg.heads);
        let dh = h / heads;
        let ids = &self.base.layers[l];
        let p = |id| self.params.data(id);

        let linear = |input: &[T], w: ParamId, b: ParamId, rows: usize, cin: usize, cout: usize| {
            let mut out = vec![T::zero(); rows * cout];
            matmul(input, p(w), &mut out, rows, cin, cout);
            add_row_bias(&mut out, p(b));
            out
        };
        let q = linear(&x, ids.q_w, ids.q_b, n, h, h);
        let k = linear(&x, ids.k_w, ids.k_b, n, h, h);
        let v = linear(&x, ids.v_w, ids.v_b, n, h, h);

        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * n];
        let mut ctx = vec![T::zero(); n * h];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let row = &mut probs[(hd * n + i) * n..(hd * n + i + 1) * n];
                let qi = &q[i * h + off..i * h + off + dh];
                for j in 0..n {
                    row[j] = if key_mask[j] {
                        dot(qi, &k[j * h + off..j * h + off + dh]) * scale
                    } else {
                        T::neg_infinity()
                    };
                }
                super::linalg::softmax_in_place(row);
                let ci = &mut ctx[i * h + off..i * h + off + dh];
                for j in 0..n {
                    let pij = row[j];
                    if pij != T::zero() {
                        super::linalg::axpy(pij, &v[j * h + off..j * h + off + dh], ci);
                    }
                }
            }
        }

        let mut attn = linear(&ctx, ids.o_w, ids.o_b, n, h, h);
        let attn_drop = apply_dropout(&mut attn, cfg.dropout, dropout.as_deref_mut());
        let mut s1 = x.clone();
        for (a, b) in s1.iter_mut().zip(&attn) {
            *a += *b;
        }
        let (x1, ln1) = layer_norm(&s1, p(ids.ln1_g), p(ids.ln1_b), h);

        let ff_pre = linear(&x1, ids.ff1_w, ids.ff1_b, n, h, f);
        let ff_act: Vec<T> = ff_pre.iter().map(|&z| gelu(z)).collect();
        let mut ff_out = linear(&ff_act, ids.ff2_w, ids.ff2_b, n, f, h);
        let ff_drop = apply_dropout(&mut ff_out, cfg.dropout, dropout.as_deref_mut());
        let mut r = x1.clone();
        for (a, b) in r.iter_mut().zip(&ff_out) {
            *a += *b;
        }

        let (out, ln2, adapter) = match &self.adapters {
            None => {
                let (y, c) = layer_norm(&r, p(ids.ln2_g), p(ids.ln2_b), h);
                (y, c, None)
            }
            Some(setup) => {
                // h = LN(r) feeds the adapters; their output replaces r as the
                // input of the same layer norm.
                let (hid, ln_h) = layer_norm(&r, p(ids.ln2_g), p(ids.ln2_b), h);
                let (composed, trace) = setup.forward(&self.params, l, &hid, &r, n, h);
                let (y, c) = layer_norm(&composed, p(ids.ln2_g), p(ids.ln2_b), h);
                (y, c, Some(AdapterCache { hid, ln_h, trace }))
            }
        };

        let cache = record.then(|| LayerCache {
            x_in: x,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            ln1,
            x1,
            ff_pre,
            ff_act,
            ff_drop,
            r,
            adapter,
            ln2,
        });
        (out, cache)
    }

    /// Accumulates parameter gradients given upstream gradients for the final
    /// hidden states (`n×h`) and/or the pooled vector.
    pub fn backward(
        &self,
        enc: &Encoded<T>,
        d_hidden: Option<&[T]>,
        d_pooled: Option<&[T]>,
        grads: &mut Grads<T>,
    ) -> Result<()> {
        let cache = enc.cache.as_ref().ok_or_else(|| {
            Error::InvalidArgument("backward called without a recorded forward pass".into())
        })?;
        let h = self.config.hidden;
        let n = enc.n;
        let mut dx = match d_hidden {
            Some(d) => {
                if d.len() != n * h {
                    return Err(Error::Shape(format!(
                        "hidden gradient has {} values, expected {}",
                        d.len(),
                        n * h
                    )));
                }
                d.to_vec()
            }
            None => vec![T::zero(); n * h],
        };

        if let Some(dp) = d_pooled {
            if dp.len() != h {
                return Err(Error::Shape("pooled gradient has wrong length".into()));
            }
            let d_pre: Vec<T> = dp
                .iter()
                .zip(&enc.pooled)
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect();
            let cls = &cache.cls(enc);
            if let Some(gw) = grads.get_mut(self.base.pool_w) {
                matmul_tn_acc(cls, &d_pre, gw, 1, h, h);
            }
            if let Some(gb) = grads.get_mut(self.base.pool_b) {
                for (g, &d) in gb.iter_mut().zip(&d_pre) {
                    *g += d;
                }
            }
            matmul_nt_acc(
                &d_pre,
                self.params.data(self.base.pool_w),
                &mut dx[..h],
                1,
                h,
                h,
            );
        }

        for l in (0..self.config.layers).rev() {
            dx = self.layer_backward(l, &cache.layers[l], dx, n, grads);
        }

        if let Some(mask) = &cache.emb_drop {
            for (d, &m) in dx.iter_mut().zip(mask) {
                *d *= m;
            }
        }
        if let Some(g) = grads.get_mut(self.base.token) {
            for t in 0..n {
                let row = cache.ids[t] as usize;
                for d in 0..h {
                    g[row * h + d] += dx[t * h + d];
                }
            }
        }
        if let Some(g) = grads.get_mut(self.base.position) {
            for t in 0..n {
                for d in 0..h {
                    g[t * h + d] += dx[t * h + d];
                }
            }
        }
        if let Some(g) = grads.get_mut(self.base.segment) {
            for t in 0..n {
                let row = cache.segs[t] as usize;
                for d in 0..h {
                    g[row * h + d] += dx[t * h + d];
                }
            }
        }
        Ok(())
    }

    fn layer_backward(
        &self,
        l: usize,
        c: &LayerCache<T>,
        d_out: Vec<T>,
        n: usize,
        grads: &mut Grads<T>,
    ) -> Vec<T> {
        let cfg = &self.config;
        let (h, f, heads) = (cfg.hidden, cfg.ffn, cfg.heads);
        let dh = h / heads;
        let ids = &self.base.layers[l];
        let p = |id| self.params.data(id);

        // second layer norm, and the adapter hook when present
        let d_ln2_in =
            layer_norm_backward(&d_out, &c.ln2, p(ids.ln2_g), ids.ln2_g, ids.ln2_b, h, grads);
        let mut dr = match (&self.adapters, &c.adapter) {
            (Some(setup), Some(ac)) => {
                let (d_hid, mut d_r) = setup.backward(
                    &self.params,
                    l,
                    &ac.hid,
                    &c.r,
                    &ac.trace,
                    &d_ln2_in,
                    n,
                    h,
                    grads,
                );
                let d_r2 = layer_norm_backward(
                    &d_hid,
                    &ac.ln_h,
                    p(ids.ln2_g),
                    ids.ln2_g,
                    ids.ln2_b,
                    h,
                    grads,
                );
                for (a, b) in d_r.iter_mut().zip(&d_r2) {
                    *a += *b;
                }
                d_r
            }
            _ => d_ln2_in,
        };

        // r = x1 + dropout(ffn(x1))
        let mut dx1 = dr.clone();
        if let Some(mask) = &c.ff_drop {
            for (d, &m) in dr.iter_mut().zip(mask) {
                *d *= m;
            }
        }
        let d_ff_out = dr;
        if let Some(g) = grads.get_mut(ids.ff2_w) {
            matmul_tn_acc(&c.ff_act, &d_ff_out, g, n, f, h);
        }
        if let Some(g) = grads.get_mut(ids.ff2_b) {
            col_sum_acc(&d_ff_out, g);
        }
        let mut d_ff_pre = vec![T::zero(); n * f];
        matmul_nt_acc(&d_ff_out, p(ids.ff2_w), &mut d_ff_pre, n, h, f);
        for (d, &z) in d_ff_pre.iter_mut().zip(&c.ff_pre) {
            *d *= gelu_grad(z);
        }
        if let Some(g) = grads.get_mut(ids.ff1_w) {
            matmul_tn_acc(&c.x1, &d_ff_pre, g, n, h, f);
        }
        if let Some(g) = grads.get_mut(ids.ff1_b) {
            col_sum_acc(&d_ff_pre, g);
        }
        matmul_nt_acc(&d_ff_pre, p(ids.ff1_w), &mut dx1, n, f, h);

        // x1 = LN(x + dropout(attn(x)))
        let d_s1 = layer_norm_backward(&dx1, &c.ln1, p(ids.ln1_g), ids.ln1_g, ids.ln1_b, h, grads);
        let mut dx = d_s1.clone();
        let mut d_attn = d_s1;
        if let Some(mask) = &c.attn_drop {
            for (d, &m) in d_attn.iter_mut().zip(mask) {
                *d *= m;
            }
        }
        if let Some(g) = grads.get_mut(ids.o_w) {
            matmul_tn_acc(&c.ctx, &d_attn, g, n, h, h);
        }
        if let Some(g) = grads.get_mut(ids.o_b) {
            col_sum_acc(&d_attn, g);
        }
        let mut d_ctx = vec![T::zero(); n * h];
        matmul_nt_acc(&d_attn, p(ids.o_w), &mut d_ctx, n, h, h);

        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = vec![T::zero(); n * h];
        let mut dk = vec![T::zero(); n * h];
        let mut dv = vec![T::zero(); n * h];
        let mut dp = vec![T::zero(); n];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let row = &c.probs[(hd * n + i) * n..(hd * n + i + 1) * n];
                let dci = &d_ctx[i * h + off..i * h + off + dh];
                let mut weighted = T::zero();
                for j in 0..n {
                    if row[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    dp[j] = dot(dci, &c.v[j * h + off..j * h + off + dh]);
                    weighted += dp[j] * row[j];
                    super::linalg::axpy(row[j], dci, &mut dv[j * h + off..j * h + off + dh]);
                }
                for j in 0..n {
                    if row[j] == T::zero() {
                        continue;
                    }
                    let ds = row[j] * (dp[j] - weighted) * scale;
                    super::linalg::axpy(
                        ds,
                        &c.k[j * h + off..j * h + off + dh],
                        &mut dq[i * h + off..i * h + off + dh],
                    );
                    super::linalg::axpy(
                        ds,
                        &c.q[i * h + off..i * h + off + dh],
                        &mut dk[j * h + off..j * h + off + dh],
                    );
                }
            }
        }
        for (dproj, w, b) in [
            (&dq, ids.q_w, ids.q_b),
            (&dk, ids.k_w, ids.k_b),
            (&dv, ids.v_w, ids.v_b),
        ] {
            if let Some(g) = grads.get_mut(w) {
                matmul_tn_acc(&c.x_in, dproj, g, n, h, h);
            }
            if let Some(g) = grads.get_mut(b) {
                col_sum_acc(dproj, g);
            }
            matmul_nt_acc(dproj, p(w), &mut dx, n, h, h);
        }
        dx
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    /// Number of positions processed (the unpadded prefix).
    pub n: usize,
    /// Final hidden states, `n × hidden`, row-major.
    pub hidden: Vec<T>,
    /// `tanh(W·h_cls + b)`.
    pub pooled: Vec<T>,
    cache: Option<Box<Cache<T>>>,
}

impl<T: Real> Encoded<T> {
    pub fn cls(&self, hidden_size: usize) -> &[T] {
        &self.hidden[..hidden_size]
    }

    pub fn has_trace(&self) -> bool {
        self.cache.is_some()
    }

    /// Softmax attention weights of one layer, `heads × n × n`, when recorded.
    pub fn attention(&self, layer: usize) -> Option<&[T]> {
        self.cache
            .as_ref()
            .and_then(|c| c.layers.get(layer))
            .map(|l| l.probs.as_slice())
    }
}

#[derive(Debug, Clone)]
struct Cache<T> {
    ids: Vec<u32>,
    segs: Vec<u8>,
    emb_drop: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> Cache<T> {
    fn cls(&self, enc: &Encoded<T>) -> Vec<T> {
        let h = enc.pooled.len();
        enc.hidden[..h].to_vec()
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    x_in: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    attn_drop: Option<Vec<T>>,
    ln1: LnCache<T>,
    x1: Vec<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
    ff_drop: Option<Vec<T>>,
    r: Vec<T>,
    adapter: Option<AdapterCache<T>>,
    ln2: LnCache<T>,
}

#[derive(Debug, Clone)]
struct AdapterCache<T> {
    hid: Vec<T>,
    ln_h: LnCache<T>,
    trace: ComposeTrace<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn apply_dropout<T: Real>(x: &mut [T], p: f64, rng: Option<&mut Rng>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    h: usize,
) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / h;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let hn = T::of(h as f64);
    for r in 0..rows {
        let row = &x[r * h..(r + 1) * h];
        let mean = row.iter().copied().sum::<T>() / hn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for d in 0..h {
            let xh = (row[d] - mean) * rs;
            xhat[r * h + d] = xh;
            y[r * h + d] = xh * gamma[d] + beta[d];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    gamma: &[T],
    gamma_id: ParamId,
    beta_id: ParamId,
    h: usize,
    grads: &mut Grads<T>,
) -> Vec<T> {
    let rows = dy.len() / h;
    if let Some(g) = grads.get_mut(gamma_id) {
        for r in 0..rows {
            for d in 0..h {
                g[d] += dy[r * h + d] * cache.xhat[r * h + d];
            }
        }
    }
    if let Some(g) = grads.get_mut(beta_id) {
        col_sum_acc(dy, g);
    }
    let hn = T::of(h as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); h];
    for r in 0..rows {
        let xh = &cache.xhat[r * h..(r + 1) * h];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for d in 0..h {
            dxhat[d] = dy[r * h + d] * gamma[d];
            mean_d += dxhat[d];
            mean_dx += dxhat[d] * xh[d];
        }
        mean_d /= hn;
        mean_dx /= hn;
        for d in 0..h {
            dx[r * h + d] = cache.rstd[r] * (dxhat[d] - mean_d - xh[d] * mean_dx);
        }
    }
    dx
}
