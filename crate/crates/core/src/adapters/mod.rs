//! Bottleneck adapters inserted into every transformer layer, and their
//! composition by stacking or fusion.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::encoder::{normal_vec, EncoderConfig, EncoderModel};
use crate::neural::linalg::{
    col_sum_acc, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place,
};
use crate::neural::{Grads, ParamId, ParamStore, Real, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => crate::neural::linalg::gelu(x),
        }
    }

    #[inline]
    fn grad<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => crate::neural::linalg::gelu_grad(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Compose {
    #[default]
    Single,
    Stack,
    Fuse,
}

impl std::str::FromStr for Compose {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Compose::Single),
            "stack" => Ok(Compose::Stack),
            "fuse" => Ok(Compose::Fuse),
            other => Err(Error::InvalidArgument(format!(
                "unknown composition {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Include b_D and b_U. Off gives the bias-free form `U·g(D·h) + r`.
    #[serde(default = "yes")]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

impl AdapterConfig {
    /// Bottleneck h/16 (at least 1), ReLU, with biases.
    pub fn for_hidden(hidden: usize) -> Self {
        AdapterConfig {
            bottleneck: (hidden / 16).max(1),
            activation: Activation::Relu,
            bias: true,
        }
    }
}

/// One adapter layer: `U·g(D·h + b_D) + b_U + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T> {
    /// `m × h`, row-major.
    pub down: Vec<T>,
    pub down_bias: Option<Vec<T>>,
    /// `h × m`, row-major.
    pub up: Vec<T>,
    pub up_bias: Option<Vec<T>>,
    pub activation: Activation,
    pub bottleneck: usize,
    pub hidden: usize,
}

impl<T: Real> AdapterParams<T> {
    pub fn validate(&self) -> Result<()> {
        let (m, h) = (self.bottleneck, self.hidden);
        if m == 0 || m >= h {
            return Err(Error::InvalidArgument(format!(
                "bottleneck {m} must satisfy 0 < m < h = {h}"
            )));
        }
        self.check_shapes()?;
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        if !finite(&self.down)
            || !finite(&self.up)
            || !self.down_bias.as_deref().is_none_or(finite)
            || !self.up_bias.as_deref().is_none_or(finite)
        {
            return Err(Error::Validation("adapter has non-finite entries".into()));
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<()> {
        let (m, h) = (self.bottleneck, self.hidden);
        if self.down.len() != m * h || self.up.len() != h * m {
            return Err(Error::Shape(format!(
                "adapter projections do not match m={m}, h={h}"
            )));
        }
        if self.down_bias.as_ref().is_some_and(|b| b.len() != m)
            || self.up_bias.as_ref().is_some_and(|b| b.len() != h)
        {
            return Err(Error::Shape("adapter bias length mismatch".into()));
        }
        Ok(())
    }

    fn view(&self) -> View<'_, T> {
        View {
            down: &self.down,
            down_bias: self.down_bias.as_deref(),
            up: &self.up,
            up_bias: self.up_bias.as_deref(),
            m: self.bottleneck,
            h: self.hidden,
            act: self.activation,
        }
    }

    /// Applies the adapter to one hidden vector `h` with residual `r`.
    pub fn forward(&self, h: &[T], r: &[T]) -> Result<Vec<T>> {
        self.check_shapes()?;
        if h.len() != self.hidden || r.len() != self.hidden {
            return Err(Error::Shape(format!(
                "adapter expects vectors of length {}, got {} and {}",
                self.hidden,
                h.len(),
                r.len()
            )));
        }
        Ok(apply_block(&self.view(), h, r, 1).0)
    }

    pub fn param_count(&self) -> usize {
        self.down.len()
            + self.up.len()
            + self.down_bias.as_ref().map_or(0, Vec::len)
            + self.up_bias.as_ref().map_or(0, Vec::len)
    }
}

/// Free-function form of [`AdapterParams::forward`].
pub fn adapter_forward<T: Real>(params: &AdapterParams<T>, h: &[T], r: &[T]) -> Result<Vec<T>> {
    params.forward(h, r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BankProvenance {
    pub objective: String,
    pub corpus: String,
    pub seed: u64,
}

/// Adapters for one domain, one per transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank<T> {
    pub domain: String,
    pub config: AdapterConfig,
    pub layers: Vec<AdapterParams<T>>,
    pub provenance: BankProvenance,
}

impl<T: Real> AdapterBank<T> {
    pub fn matches(&self, config: &EncoderConfig) -> Result<()> {
        if self.layers.len() != config.layers {
            return Err(Error::Shape(format!(
                "bank {:?} has {} layers, encoder has {}",
                self.domain,
                self.layers.len(),
                config.layers
            )));
        }
        for layer in &self.layers {
            if layer.hidden != config.hidden {
                return Err(Error::Shape(format!(
                    "bank {:?} built for hidden size {}, encoder has {}",
                    self.domain, layer.hidden, config.hidden
                )));
            }
            layer.validate()?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(AdapterParams::param_count).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            let p = bank_prefix(&self.domain, l);
            names.push(format!("{p}.down.weight"));
            if self.config.bias {
                names.push(format!("{p}.down.bias"));
            }
            names.push(format!("{p}.up.weight"));
            if self.config.bias {
                names.push(format!("{p}.up.bias"));
            }
        }
        names
    }

    /// Flattens into a standalone store using the in-model parameter names.
    pub fn to_store(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let (h, m) = (self.layers[0].hidden, self.config.bottleneck);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = bank_prefix(&self.domain, l);
            store.add(&format!("{p}.down.weight"), &[m, h], layer.down.clone())?;
            if let Some(b) = &layer.down_bias {
                store.add(&format!("{p}.down.bias"), &[m], b.clone())?;
            }
            store.add(&format!("{p}.up.weight"), &[h, m], layer.up.clone())?;
            if let Some(b) = &layer.up_bias {
                store.add(&format!("{p}.up.bias"), &[h], b.clone())?;
            }
        }
        Ok(store)
    }

    /// Reads the bank for `domain` out of any store holding its parameters.
    pub fn from_store(
        store: &ParamStore<T>,
        domain: &str,
        layers: usize,
        config: AdapterConfig,
        provenance: BankProvenance,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = bank_prefix(domain, l);
            let down_id = store.require(&format!("{p}.down.weight"))?;
            let up_id = store.require(&format!("{p}.up.weight"))?;
            let shape = &store.get(down_id).shape;
            let (m, h) = (shape[0], shape[1]);
            if m != config.bottleneck {
                return Err(Error::Shape(format!(
                    "{p}: bottleneck {m}, config says {}",
                    config.bottleneck
                )));
            }
            let bias = |name: &str| -> Result<Option<Vec<T>>> {
                if config.bias {
                    Ok(Some(
                        store.data(store.require(&format!("{p}.{name}"))?).to_vec(),
                    ))
                } else {
                    Ok(None)
                }
            };
            out.push(AdapterParams {
                down: store.data(down_id).to_vec(),
                down_bias: bias("down.bias")?,
                up: store.data(up_id).to_vec(),
                up_bias: bias("up.bias")?,
                activation: config.activation,
                bottleneck: m,
                hidden: h,
            });
        }
        Ok(AdapterBank {
            domain: domain.to_string(),
            config,
            layers: out,
            provenance,
        })
    }
}

pub fn bank_prefix(domain: &str, layer: usize) -> String {
    format!("adapter.{domain}.layer.{layer}")
}

pub fn fusion_name(layer: usize) -> String {
    format!("fusion.layer.{layer}.logits")
}

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("adapter.")
}

pub fn is_fusion_param(name: &str) -> bool {
    name.starts_with("fusion.")
}

/// Fresh bank: D ~ N(0, 1/h), U = 0, zero biases, so the adapter starts as
/// the identity on its residual input.
pub fn init_adapters<T: Real>(
    encoder: &EncoderConfig,
    config: &AdapterConfig,
    domain: &str,
    seed: u64,
) -> Result<AdapterBank<T>> {
    let (h, m) = (encoder.hidden, config.bottleneck);
    if m == 0 || m >= h {
        return Err(Error::InvalidArgument(format!(
            "bottleneck {m} must satisfy 0 < m < h = {h}"
        )));
    }
    if domain.is_empty() || domain.contains('.') {
        return Err(Error::InvalidArgument(format!(
            "invalid adapter domain name {domain:?}"
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let std = 1.0 / (h as f64).sqrt();
    let layers = (0..encoder.layers)
        .map(|_| AdapterParams {
            down: normal_vec(&mut rng, m * h, std),
            down_bias: config.bias.then(|| vec![T::zero(); m]),
            up: vec![T::zero(); h * m],
            up_bias: config.bias.then(|| vec![T::zero(); h]),
            activation: config.activation,
            bottleneck: m,
            hidden: h,
        })
        .collect();
    Ok(AdapterBank {
        domain: domain.to_string(),
        config: config.clone(),
        layers,
        provenance: BankProvenance {
            seed,
            ..Default::default()
        },
    })
}

/// Unnormalized per-layer mixing logits, one entry per fused bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub logits: Vec<Vec<f64>>,
}

impl FusionWeights {
    /// Equal logits, i.e. a uniform mixture.
    pub fn uniform(layers: usize, banks: usize) -> Self {
        FusionWeights {
            logits: vec![vec![0.0; banks]; layers],
        }
    }

    pub fn weights(&self, layer: usize) -> Vec<f64> {
        let mut w = self.logits[layer].clone();
        softmax_in_place(&mut w);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AdapterLayerIds {
    down: ParamId,
    down_bias: Option<ParamId>,
    up: ParamId,
    up_bias: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BankSlot {
    domain: String,
    config: AdapterConfig,
    layers: Vec<AdapterLayerIds>,
}

/// How the adapters of an injected model are wired; owned by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSetup {
    compose: Compose,
    banks: Vec<BankSlot>,
    fusion: Option<Vec<ParamId>>,
}

impl AdapterSetup {
    pub fn compose(&self) -> Compose {
        self.compose
    }

    pub fn domains(&self) -> Vec<&str> {
        self.banks.iter().map(|b| b.domain.as_str()).collect()
    }

    pub fn bank_config(&self, domain: &str) -> Option<&AdapterConfig> {
        self.banks
            .iter()
            .find(|b| b.domain == domain)
            .map(|b| &b.config)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AdapterTrace<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) enum ComposeTrace<T> {
    Single(AdapterTrace<T>),
    Stack {
        /// Input of every bank after the first.
        inputs: Vec<Vec<T>>,
        traces: Vec<AdapterTrace<T>>,
    },
    Fuse {
        outputs: Vec<Vec<T>>,
        weights: Vec<T>,
        traces: Vec<AdapterTrace<T>>,
    },
}

struct View<'a, T> {
    down: &'a [T],
    down_bias: Option<&'a [T]>,
    up: &'a [T],
    up_bias: Option<&'a [T]>,
    m: usize,
    h: usize,
    act: Activation,
}

/// Row-wise adapter over an `n × h` block.
fn apply_block<T: Real>(
    v: &View<'_, T>,
    x: &[T],
    res: &[T],
    n: usize,
) -> (Vec<T>, AdapterTrace<T>) {
    let (m, h) = (v.m, v.h);
    let mut pre = vec![T::zero(); n * m];
    matmul_nt_acc(x, v.down, &mut pre, n, h, m);
    if let Some(b) = v.down_bias {
        crate::neural::linalg::add_row_bias(&mut pre, b);
    }
    let act: Vec<T> = pre.iter().map(|&z| v.act.apply(z)).collect();
    let mut out = res.to_vec();
    matmul_nt_acc(&act, v.up, &mut out, n, m, h);
    if let Some(b) = v.up_bias {
        crate::neural::linalg::add_row_bias(&mut out, b);
    }
    (out, AdapterTrace { pre, act })
}

/// Accumulates parameter gradients and returns the gradient with respect to
/// the hidden input. The residual gradient equals `d_out` and is left to the
/// caller.
fn backward_block<T: Real>(
    v: &View<'_, T>,
    ids: &AdapterLayerIds,
    x: &[T],
    trace: &AdapterTrace<T>,
    d_out: &[T],
    n: usize,
    grads: &mut Grads<T>,
) -> Vec<T> {
    let (m, h) = (v.m, v.h);
    if let Some(g) = grads.get_mut(ids.up) {
        matmul_tn_acc(d_out, &trace.act, g, n, h, m);
    }
    if let Some(g) = ids.up_bias.and_then(|id| grads.get_mut(id)) {
        col_sum_acc(d_out, g);
    }
    let mut d_pre = vec![T::zero(); n * m];
    matmul_acc(d_out, v.up, &mut d_pre, n, h, m);
    for (d, &z) in d_pre.iter_mut().zip(&trace.pre) {
        *d *= v.act.grad(z);
    }
    if let Some(g) = grads.get_mut(ids.down) {
        matmul_tn_acc(&d_pre, x, g, n, m, h);
    }
    if let Some(g) = ids.down_bias.and_then(|id| grads.get_mut(id)) {
        col_sum_acc(&d_pre, g);
    }
    let mut dx = vec![T::zero(); n * h];
    matmul_acc(&d_pre, v.down, &mut dx, n, m, h);
    dx
}

impl AdapterSetup {
    fn view<'a, T: Real>(
        &self,
        store: &'a ParamStore<T>,
        bank: usize,
        layer: usize,
    ) -> View<'a, T> {
        let slot = &self.banks[bank];
        let ids = &slot.layers[layer];
        View {
            down: store.data(ids.down),
            down_bias: ids.down_bias.map(|id| store.data(id)),
            up: store.data(ids.up),
            up_bias: ids.up_bias.map(|id| store.data(id)),
            m: slot.config.bottleneck,
            h: store.get(ids.down).shape[1],
            act: slot.config.activation,
        }
    }

    pub(crate) fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        layer: usize,
        hid: &[T],
        r: &[T],
        n: usize,
        _h: usize,
    ) -> (Vec<T>, ComposeTrace<T>) {
        match self.compose {
            Compose::Single => {
                let (out, t) = apply_block(&self.view(store, 0, layer), hid, r, n);
                (out, ComposeTrace::Single(t))
            }
            Compose::Stack => {
                let (mut a, t0) = apply_block(&self.view(store, 0, layer), hid, r, n);
                let mut traces = vec![t0];
                let mut inputs = Vec::with_capacity(self.banks.len() - 1);
                for b in 1..self.banks.len() {
                    let (next, t) = apply_block(&self.view(store, b, layer), &a, &a, n);
                    inputs.push(a);
                    traces.push(t);
                    a = next;
                }
                (a, ComposeTrace::Stack { inputs, traces })
            }
            Compose::Fuse => {
                let logits_id = self.fusion.as_ref().expect("fusion logits registered")[layer];
                let mut weights = store.data(logits_id).to_vec();
                softmax_in_place(&mut weights);
                let mut out = vec![T::zero(); hid.len()];
                let mut outputs = Vec::with_capacity(self.banks.len());
                let mut traces = Vec::with_capacity(self.banks.len());
                for b in 0..self.banks.len() {
                    let (a, t) = apply_block(&self.view(store, b, layer), hid, r, n);
                    crate::neural::linalg::axpy(weights[b], &a, &mut out);
                    outputs.push(a);
                    traces.push(t);
                }
                (
                    out,
                    ComposeTrace::Fuse {
                        outputs,
                        weights,
                        traces,
                    },
                )
            }
        }
    }

    /// Returns gradients with respect to `hid` and `r`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        layer: usize,
        hid: &[T],
        _r: &[T],
        trace: &ComposeTrace<T>,
        d_out: &[T],
        n: usize,
        _h: usize,
        grads: &mut Grads<T>,
    ) -> (Vec<T>, Vec<T>) {
        let ids = |b: usize| &self.banks[b].layers[layer];
        match trace {
            ComposeTrace::Single(t) => {
                let d_hid =
                    backward_block(&self.view(store, 0, layer), ids(0), hid, t, d_out, n, grads);
                (d_hid, d_out.to_vec())
            }
            ComposeTrace::Stack { inputs, traces } => {
                let mut d = d_out.to_vec();
                for b in (1..self.banks.len()).rev() {
                    let x = &inputs[b - 1];
                    let dx = backward_block(
                        &self.view(store, b, layer),
                        ids(b),
                        x,
                        &traces[b],
                        &d,
                        n,
                        grads,
                    );
                    for (a, v) in d.iter_mut().zip(&dx) {
                        *a += *v;
                    }
                }
                let d_hid = backward_block(
                    &self.view(store, 0, layer),
                    ids(0),
                    hid,
                    &traces[0],
                    &d,
                    n,
                    grads,
                );
                (d_hid, d)
            }
            ComposeTrace::Fuse {
                outputs,
                weights,
                traces,
            } => {
                let logits_id = self.fusion.as_ref().expect("fusion logits registered")[layer];
                let dw: Vec<T> = outputs.iter().map(|a| dot(a, d_out)).collect();
                if let Some(g) = grads.get_mut(logits_id) {
                    let mean: T = dw.iter().zip(weights).map(|(&d, &w)| d * w).sum();
                    for j in 0..weights.len() {
                        g[j] += weights[j] * (dw[j] - mean);
                    }
                }
                let mut d_hid = vec![T::zero(); hid.len()];
                let mut d_r = vec![T::zero(); hid.len()];
                for b in 0..self.banks.len() {
                    let d_a: Vec<T> = d_out.iter().map(|&d| d * weights[b]).collect();
                    let dx = backward_block(
                        &self.view(store, b, layer),
                        ids(b),
                        hid,
                        &traces[b],
                        &d_a,
                        n,
                        grads,
                    );
                    for ((dh, dr), (x, da)) in d_hid
                        .iter_mut()
                        .zip(d_r.iter_mut())
                        .zip(dx.iter().zip(&d_a))
                    {
                        *dh += *x;
                        *dr += *da;
                    }
                }
                (d_hid, d_r)
            }
        }
    }
}

/// Returns a copy of `model` with the banks' parameters added and wired in.
/// Fusing a single bank degenerates to `Single`; the returned flag says so.
pub fn inject<T: Real>(
    model: &EncoderModel<T>,
    banks: &[AdapterBank<T>],
    compose: Compose,
    fusion: Option<&FusionWeights>,
) -> Result<(EncoderModel<T>, Option<String>)> {
    if model.adapters.is_some() {
        return Err(Error::InvalidArgument(
            "model already carries adapters".into(),
        ));
    }
    if banks.is_empty() {
        return Err(Error::InvalidArgument("no adapter banks to inject".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for bank in banks {
        bank.matches(&model.config)?;
        if !seen.insert(bank.domain.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "bank {:?} given twice",
                bank.domain
            )));
        }
    }
    let mut warning = None;
    let mut compose = compose;
    if compose == Compose::Single && banks.len() > 1 {
        return Err(Error::InvalidArgument(
            "single composition takes exactly one bank".into(),
        ));
    }
    if compose == Compose::Fuse && banks.len() == 1 {
        warning = Some("fusion over one bank degenerates to a single adapter".to_string());
        compose = Compose::Single;
    }
    if compose == Compose::Stack && banks.len() == 1 {
        compose = Compose::Single;
    }

    let mut out = model.clone();
    let layers = model.config.layers;
    let mut slots = Vec::with_capacity(banks.len());
    for bank in banks {
        let store = bank.to_store()?;
        let mut ids = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = bank_prefix(&bank.domain, l);
            let mut add = |suffix: &str| -> Result<ParamId> {
                let src = store.get(store.require(&format!("{p}.{suffix}"))?);
                out.params.add(&src.name, &src.shape, src.data.clone())
            };
            let down = add("down.weight")?;
            let down_bias = if bank.config.bias {
                Some(add("down.bias")?)
            } else {
                None
            };
            let up = add("up.weight")?;
            let up_bias = if bank.config.bias {
                Some(add("up.bias")?)
            } else {
                None
            };
            ids.push(AdapterLayerIds {
                down,
                down_bias,
                up,
                up_bias,
            });
        }
        slots.push(BankSlot {
            domain: bank.domain.clone(),
            config: bank.config.clone(),
            layers: ids,
        });
    }
    let fusion_ids = if compose == Compose::Fuse {
        let weights = fusion
            .cloned()
            .unwrap_or_else(|| FusionWeights::uniform(layers, banks.len()));
        if weights.logits.len() != layers || weights.logits.iter().any(|w| w.len() != banks.len()) {
            return Err(Error::Shape(format!(
                "fusion weights must be {layers} layers × {} banks",
                banks.len()
            )));
        }
        let mut ids = Vec::with_capacity(layers);
        for (l, w) in weights.logits.iter().enumerate() {
            ids.push(out.params.add(
                &fusion_name(l),
                &[banks.len()],
                w.iter().map(|&x| T::of(x)).collect(),
            )?);
        }
        Some(ids)
    } else {
        None
    };
    out.adapters = Some(AdapterSetup {
        compose,
        banks: slots,
        fusion: fusion_ids,
    });
    Ok((out, warning))
}

/// Re-wires adapters whose parameters are already in the model's store, as
/// when loading a checkpoint.
pub(crate) fn attach<T: Real>(
    model: &mut EncoderModel<T>,
    compose: Compose,
    banks: &[(String, AdapterConfig)],
) -> Result<()> {
    let layers = model.config.layers;
    let store = &model.params;
    let mut slots = Vec::with_capacity(banks.len());
    for (domain, config) in banks {
        let mut ids = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = bank_prefix(domain, l);
            let get = |s: &str| store.require(&format!("{p}.{s}"));
            ids.push(AdapterLayerIds {
                down: get("down.weight")?,
                down_bias: if config.bias {
                    Some(get("down.bias")?)
                } else {
                    None
                },
                up: get("up.weight")?,
                up_bias: if config.bias {
                    Some(get("up.bias")?)
                } else {
                    None
                },
            });
        }
        slots.push(BankSlot {
            domain: domain.clone(),
            config: config.clone(),
            layers: ids,
        });
    }
    let fusion = if compose == Compose::Fuse {
        Some(
            (0..layers)
                .map(|l| store.require(&fusion_name(l)))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    model.adapters = Some(AdapterSetup {
        compose,
        banks: slots,
        fusion,
    });
    Ok(())
}

/// Reads one injected bank back out of a (possibly trained) model.
pub fn extract_bank<T: Real>(
    model: &EncoderModel<T>,
    domain: &str,
    provenance: BankProvenance,
) -> Result<AdapterBank<T>> {
    let setup = model
        .adapters
        .as_ref()
        .ok_or_else(|| Error::Missing("model has no adapters".into()))?;
    let config = setup
        .bank_config(domain)
        .ok_or_else(|| Error::Missing(format!("adapter bank {domain:?}")))?
        .clone();
    AdapterBank::from_store(
        &model.params,
        domain,
        model.config.layers,
        config,
        provenance,
    )
}

/// Current fusion logits of an injected model.
pub fn extract_fusion<T: Real>(model: &EncoderModel<T>) -> Option<FusionWeights> {
    let ids = model.adapters.as_ref()?.fusion.as_ref()?;
    Some(FusionWeights {
        logits: ids
            .iter()
            .map(|&id| model.params.data(id).iter().map(|x| x.f64()).collect())
            .collect(),
    })
}

/// Freezes every parameter except adapters and fusion logits; task heads
/// (`head.*`) stay trainable when `train_heads` is set.
pub fn freeze_base<T: Real>(model: &mut EncoderModel<T>, train_heads: bool) {
    model.params.set_frozen_by(|name| {
        !(is_adapter_param(name)
            || is_fusion_param(name)
            || (train_heads && name.starts_with("head.")))
    });
}

/// The composed adapter output of one layer of an injected model for an
/// `n × h` block of hidden states `hid` and residuals `r`.
pub fn compose_forward<T: Real>(
    model: &EncoderModel<T>,
    layer: usize,
    hid: &[T],
    r: &[T],
) -> Result<Vec<T>> {
    let setup = model
        .adapter_setup()
        .ok_or_else(|| Error::Missing("model carries no adapters".into()))?;
    let h = model.hidden();
    if layer >= model.config.layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range"
        )));
    }
    if hid.len() != r.len() || hid.len() % h != 0 {
        return Err(Error::Shape(format!(
            "blocks of {} and {} values for hidden size {h}",
            hid.len(),
            r.len()
        )));
    }
    Ok(setup
        .forward(&model.params, layer, hid, r, hid.len() / h, h)
        .0)
}

/// Closed-form trainable count of one bank: `L·(2mh + m + h)` with biases.
pub fn bank_param_count(layers: usize, hidden: usize, bottleneck: usize, bias: bool) -> usize {
    let per = 2 * bottleneck * hidden + if bias { bottleneck + hidden } else { 0 };
    layers * per
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::tokenizer::{encode_pair, Vocab};

    fn tiny() -> (EncoderModel<f64>, Vocab) {
        let vocab = Vocab::build(["book a taxi to the centre please now"], 1).unwrap();
        let mut cfg = EncoderConfig::new(vocab.len());
        cfg.hidden = 16;
        cfg.heads = 2;
        cfg.ffn = 32;
        cfg.max_len = 16;
        (EncoderModel::new(cfg, 3).unwrap(), vocab)
    }

    fn random_bank(model: &EncoderModel<f64>, domain: &str, seed: u64) -> AdapterBank<f64> {
        let mut bank =
            init_adapters::<f64>(&model.config, &AdapterConfig::for_hidden(16), domain, seed)
                .unwrap();
        let mut rng = Rng::seed_from_u64(seed + 100);
        for layer in &mut bank.layers {
            layer.up = normal_vec(&mut rng, layer.up.len(), 0.5);
            layer.up_bias = Some(normal_vec(&mut rng, 16, 0.1));
        }
        bank
    }

    #[test]
    fn zero_path_returns_residual() {
        let p = AdapterParams {
            down: vec![0.0; 2 * 4],
            down_bias: Some(vec![0.0; 2]),
            up: vec![0.3; 4 * 2],
            up_bias: Some(vec![0.0; 4]),
            activation: Activation::Relu,
            bottleneck: 2,
            hidden: 4,
        };
        let r = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(adapter_forward(&p, &[5.0, 6.0, 7.0, 8.0], &r).unwrap(), r);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let bank = init_adapters::<f64>(
            &EncoderConfig {
                hidden: 16,
                heads: 2,
                ..EncoderConfig::new(10)
            },
            &AdapterConfig::for_hidden(16),
            "taxi",
            1,
        )
        .unwrap();
        assert!(adapter_forward(&bank.layers[0], &[0.0; 8], &[0.0; 16]).is_err());
    }

    #[test]
    fn bottleneck_must_be_below_hidden() {
        let cfg = EncoderConfig {
            hidden: 16,
            heads: 2,
            ..EncoderConfig::new(10)
        };
        let ac = AdapterConfig {
            bottleneck: 16,
            activation: Activation::Relu,
            bias: true,
        };
        assert!(init_adapters::<f64>(&cfg, &ac, "taxi", 1).is_err());
    }

    #[test]
    fn same_seed_same_bank_different_seed_different_down() {
        let cfg = EncoderConfig {
            hidden: 16,
            heads: 2,
            ..EncoderConfig::new(10)
        };
        let ac = AdapterConfig::for_hidden(16);
        let a = init_adapters::<f64>(&cfg, &ac, "taxi", 1).unwrap();
        let b = init_adapters::<f64>(&cfg, &ac, "taxi", 1).unwrap();
        let c = init_adapters::<f64>(&cfg, &ac, "taxi", 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers[0].down, c.layers[0].down);
    }

    #[test]
    fn injection_at_init_is_exact_identity() {
        let (model, vocab) = tiny();
        let seq = encode_pair("book a taxi", Some("to the centre"), &vocab, 16, None);
        let base = model.forward(&seq, false, None).unwrap();
        let cfg = AdapterConfig::for_hidden(16);
        let a = init_adapters(&model.config, &cfg, "taxi", 5).unwrap();
        let b = init_adapters(&model.config, &cfg, "hotel", 6).unwrap();
        for (banks, compose) in [
            (vec![a.clone()], Compose::Single),
            (vec![a.clone(), b.clone()], Compose::Stack),
            (vec![a.clone(), b.clone()], Compose::Fuse),
        ] {
            let (m, _) = inject(&model, &banks, compose, None).unwrap();
            let out = m.forward(&seq, false, None).unwrap();
            assert_eq!(out.hidden, base.hidden);
            assert_eq!(out.pooled, base.pooled);
        }
    }

    #[test]
    fn stack_order_matters() {
        let (model, vocab) = tiny();
        let seq = encode_pair("book a taxi now", None, &vocab, 16, None);
        let a = random_bank(&model, "taxi", 1);
        let b = random_bank(&model, "hotel", 2);
        let (ab, _) = inject(&model, &[a.clone(), b.clone()], Compose::Stack, None).unwrap();
        let (ba, _) = inject(&model, &[b, a], Compose::Stack, None).unwrap();
        let x = ab.forward(&seq, false, None).unwrap();
        let y = ba.forward(&seq, false, None).unwrap();
        assert_ne!(x.pooled, y.pooled);
    }

    #[test]
    fn fuse_of_one_bank_warns_and_degenerates() {
        let (model, _) = tiny();
        let a = random_bank(&model, "taxi", 1);
        let (m, warning) = inject(&model, &[a], Compose::Fuse, None).unwrap();
        assert!(warning.is_some());
        assert_eq!(m.adapter_setup().unwrap().compose(), Compose::Single);
    }

    #[test]
    fn freeze_base_leaves_adapter_count() {
        let (model, _) = tiny();
        let a = init_adapters(&model.config, &AdapterConfig::for_hidden(16), "taxi", 1).unwrap();
        let (mut m, _) = inject(&model, &[a], Compose::Single, None).unwrap();
        freeze_base(&mut m, true);
        assert_eq!(m.params.trainable_count(), bank_param_count(2, 16, 1, true));
    }

    #[test]
    fn bank_round_trips_through_store() {
        let (model, _) = tiny();
        let a = random_bank(&model, "taxi", 4);
        let (m, _) = inject(&model, &[a.clone()], Compose::Single, None).unwrap();
        let back = extract_bank(
            &m,
            "taxi",
            BankProvenance {
                seed: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(back.layers, a.layers);
    }
}
