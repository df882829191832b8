use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::denoiser::layers::{self, AttnCache, AttnParams, GroupNormCache};
use crate::edm::Conditioning;
use crate::error::{bail, Result};
use crate::ndcore::{conv3d, conv3d_backward, Padding, RngStream, Shape, Tensor};
use crate::scalar::Scalar;

/// Architecture knobs of the tiny video U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Resolution levels; spatial extents must be divisible by `2^(levels-1)`.
    pub levels: usize,
    /// Width of the σ-embedding MLP and of the class table.
    pub emb_dim: usize,
    pub groups: usize,
    /// 0 for an unconditional model.
    pub num_classes: usize,
    /// Frames covered by the learned positional bias; larger offsets clamp.
    pub max_frames: usize,
    pub temporal_enabled: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            levels: 2,
            emb_dim: 32,
            groups: 4,
            num_classes: 0,
            max_frames: 16,
            temporal_enabled: true,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.emb_dim == 0 {
            bail!(Config, "channel counts must be positive: {self:?}");
        }
        if self.levels == 0 {
            bail!(Config, "levels must be at least 1");
        }
        if self.groups == 0 || !self.base_channels.is_multiple_of(self.groups) {
            bail!(
                Config,
                "base_channels {} not divisible by groups {}",
                self.base_channels,
                self.groups
            );
        }
        if self.max_frames == 0 {
            bail!(Config, "max_frames must be positive");
        }
        Ok(())
    }

    /// Canonical description of everything that fixes the parameter layout.
    /// `temporal_enabled` is excluded: image and video models share a layout.
    pub fn arch_string(&self) -> String {
        format!(
            "in_channels={};base_channels={};levels={};emb_dim={};groups={};num_classes={};max_frames={};norm_eps={}",
            self.in_channels,
            self.base_channels,
            self.levels,
            self.emb_dim,
            self.groups,
            self.num_classes,
            self.max_frames,
            self.norm_eps
        )
    }

    pub fn arch_hash(&self) -> String {
        let digest = Sha256::digest(self.arch_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamView {
    pub name: String,
    pub offset: usize,
    pub dims: Vec<usize>,
}

impl ParamView {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Temporal additions: the 3×1×1 convolutions and the frame attention.
    pub fn is_temporal(&self) -> bool {
        is_temporal_name(&self.name)
    }
}

pub fn is_temporal_name(name: &str) -> bool {
    name.contains(".tconv.") || name.contains(".tattn.")
}

/// Named views into a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    views: Vec<ParamView>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    fn new() -> Self {
        Self {
            views: Vec::new(),
            index: HashMap::new(),
            total: 0,
        }
    }

    fn push(&mut self, name: String, dims: Vec<usize>) {
        let view = ParamView {
            name: name.clone(),
            offset: self.total,
            dims,
        };
        self.total += view.len();
        self.index.insert(name, self.views.len());
        self.views.push(view);
    }

    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut l = Self::new();
        let c = cfg.base_channels;
        let e = cfg.emb_dim;
        l.push("emb.fc1.weight".into(), vec![e, 1]);
        l.push("emb.fc1.bias".into(), vec![e]);
        l.push("emb.fc2.weight".into(), vec![e, e]);
        l.push("emb.fc2.bias".into(), vec![e]);
        if cfg.num_classes > 0 {
            l.push("emb.class_table".into(), vec![cfg.num_classes, e]);
        }
        l.push("conv_in.weight".into(), vec![c, cfg.in_channels, 1, 3, 3]);
        l.push("conv_in.bias".into(), vec![c]);
        let res = |l: &mut Self, p: &str| {
            l.push(format!("{p}.res.norm1.gamma"), vec![c]);
            l.push(format!("{p}.res.norm1.beta"), vec![c]);
            l.push(format!("{p}.res.conv1.weight"), vec![c, c, 1, 3, 3]);
            l.push(format!("{p}.res.conv1.bias"), vec![c]);
            l.push(format!("{p}.res.emb_proj.weight"), vec![c, e]);
            l.push(format!("{p}.res.emb_proj.bias"), vec![c]);
            l.push(format!("{p}.res.norm2.gamma"), vec![c]);
            l.push(format!("{p}.res.norm2.beta"), vec![c]);
            l.push(format!("{p}.res.conv2.weight"), vec![c, c, 1, 3, 3]);
            l.push(format!("{p}.res.conv2.bias"), vec![c]);
            l.push(format!("{p}.tconv.weight"), vec![c, c, 3, 1, 1]);
            l.push(format!("{p}.tconv.bias"), vec![c]);
        };
        for lv in 0..cfg.levels {
            res(&mut l, &format!("down.{lv}"));
        }
        for proj in ["q", "k", "v", "o"] {
            l.push(format!("mid.tattn.{proj}.weight"), vec![c, c, 1, 1, 1]);
            l.push(format!("mid.tattn.{proj}.bias"), vec![c]);
        }
        l.push("mid.tattn.pos_bias".into(), vec![2 * cfg.max_frames - 1]);
        for lv in (0..cfg.levels - 1).rev() {
            res(&mut l, &format!("up.{lv}"));
        }
        l.push("out.norm.gamma".into(), vec![c]);
        l.push("out.norm.beta".into(), vec![c]);
        l.push("out.conv.weight".into(), vec![cfg.in_channels, c, 1, 3, 3]);
        l.push("out.conv.bias".into(), vec![cfg.in_channels]);
        l
    }

    pub fn views(&self) -> &[ParamView] {
        &self.views
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamView> {
        self.index.get(name).map(|&i| &self.views[i])
    }

    fn view(&self, name: &str) -> &ParamView {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from layout"))
    }
}

/// The trainable network `F_θ` plus its flat parameter vector.
#[derive(Clone)]
pub struct DenoiserModel<T> {
    config: ModelConfig,
    layout: Arc<ParamLayout>,
    params: Vec<T>,
    steps_trained: u64,
}

impl<T> fmt::Debug for DenoiserModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenoiserModel")
            .field("config", &self.config)
            .field("num_params", &self.params.len())
            .field("steps_trained", &self.steps_trained)
            .finish()
    }
}

struct ResCache<T> {
    gn1: GroupNormCache<T>,
    n1: Tensor<T>,
    a1: Tensor<T>,
    gn2: GroupNormCache<T>,
    n2: Tensor<T>,
    a2: Tensor<T>,
}

struct LevelCache<T> {
    prefix: String,
    res: ResCache<T>,
    tconv_input: Option<Tensor<T>>,
}

struct CacheData<T> {
    batch: usize,
    labels: Option<Vec<usize>>,
    sigma_feature: Vec<T>,
    emb_h1: Vec<T>,
    emb_a1: Vec<T>,
    emb_e: Vec<T>,
    emb_act: Vec<T>,
    x_in: Tensor<T>,
    down: Vec<LevelCache<T>>,
    attn: Option<AttnCache<T>>,
    up: Vec<LevelCache<T>>,
    out_gn: GroupNormCache<T>,
    out_n: Tensor<T>,
    out_a: Tensor<T>,
    out_shape: Shape,
}

/// Activations recorded by a forward pass. Only caches produced with
/// `keep_activations = true` can be passed to [`DenoiserModel::backward`].
pub struct ForwardCache<T> {
    data: Option<CacheData<T>>,
}

impl<T> ForwardCache<T> {
    pub fn has_activations(&self) -> bool {
        self.data.is_some()
    }
}

const SAME_3X3: Padding = Padding::new(0, 1, 1);
const TEMPORAL_PAD: Padding = Padding::new(1, 0, 0);

impl<T: Scalar> DenoiserModel<T> {
    /// Fresh model: variance-scaled convolutions, unit norms, identity temporal
    /// convolutions, zero attention output projection and zero output conv.
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(ParamLayout::for_config(&config));
        let mut params = vec![T::zero(); layout.total()];
        for v in layout.views() {
            init_view(v, &mut params[v.range()], rng);
        }
        Ok(Self {
            config,
            layout,
            params,
            steps_trained: 0,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>, steps_trained: u64) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(ParamLayout::for_config(&config));
        if params.len() != layout.total() {
            bail!(
                Config,
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                layout.total()
            );
        }
        Ok(Self {
            config,
            layout,
            params,
            steps_trained,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn steps_trained(&self) -> u64 {
        self.steps_trained
    }

    pub fn set_steps_trained(&mut self, steps: u64) {
        self.steps_trained = steps;
    }

    pub fn temporal_enabled(&self) -> bool {
        self.config.temporal_enabled
    }

    pub fn set_temporal_enabled(&mut self, on: bool) {
        self.config.temporal_enabled = on;
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|v| &self.params[v.range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.get(name)?.range();
        Some(&mut self.params[r])
    }

    fn p(&self, name: &str) -> &[T] {
        &self.params[self.layout.view(name).range()]
    }

    fn pt(&self, name: &str) -> Tensor<T> {
        let v = self.layout.view(name);
        Tensor::from_dims(&v.dims, self.params[v.range()].to_vec()).expect("layout dims")
    }

    /// Overwrites every parameter with `N(0, scale²)` draws, for derivative tests.
    pub fn randomize(&mut self, rng: &mut RngStream, scale: f64) {
        rng.fill_normal(&mut self.params);
        let s = T::c(scale);
        for p in &mut self.params {
            *p *= s;
        }
    }

    /// Re-initializes the temporal additions to their identity-at-init state.
    pub fn reset_temporal(&mut self, rng: &mut RngStream) {
        let views: Vec<ParamView> = self
            .layout
            .views()
            .iter()
            .filter(|v| v.is_temporal())
            .cloned()
            .collect();
        for v in views {
            init_view(&v, &mut self.params[v.range()], rng);
        }
    }

    fn check_input(
        &self,
        x: &Tensor<T>,
        sigma_feature: &[T],
        cond: &Conditioning,
    ) -> Result<usize> {
        let (b, _, c, h, w) = x.shape().as_video()?;
        if c != self.config.in_channels {
            bail!(
                Shape,
                "model expects {} channels, input has {c}",
                self.config.in_channels
            );
        }
        let div = 1usize << (self.config.levels - 1);
        if h % div != 0 || w % div != 0 {
            bail!(
                Shape,
                "spatial extents {h}×{w} not divisible by {div} for {} levels",
                self.config.levels
            );
        }
        if sigma_feature.len() != b {
            bail!(
                Shape,
                "{} sigma features for batch of {b}",
                sigma_feature.len()
            );
        }
        if let Some(labels) = cond.labels() {
            if labels.len() != b {
                bail!(Shape, "{} labels for batch of {b}", labels.len());
            }
            if self.config.num_classes == 0 {
                bail!(Shape, "labels given to an unconditional model");
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_classes) {
                bail!(
                    Shape,
                    "label {bad} out of range for {} classes",
                    self.config.num_classes
                );
            }
        }
        Ok(b)
    }

    /// Evaluates `F_θ(x; cond, sigma_feature)` with one σ feature per batch item.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        sigma_feature: &[T],
        cond: &Conditioning,
    ) -> Result<Tensor<T>> {
        self.forward_cached(x, sigma_feature, cond, false)
            .map(|(y, _)| y)
    }

    pub fn forward_cached(
        &self,
        x: &Tensor<T>,
        sigma_feature: &[T],
        cond: &Conditioning,
        keep_activations: bool,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let b = self.check_input(x, sigma_feature, cond)?;
        let cfg = &self.config;
        let e = cfg.emb_dim;
        let t = x.dims()[1];
        let temporal = cfg.temporal_enabled && t > 1;

        let emb_h1 = layers::linear(
            sigma_feature,
            b,
            self.p("emb.fc1.weight"),
            self.p("emb.fc1.bias"),
        );
        let emb_a1 = layers::silu_vec(&emb_h1);
        let mut emb_e =
            layers::linear(&emb_a1, b, self.p("emb.fc2.weight"), self.p("emb.fc2.bias"));
        if let Some(labels) = cond.labels() {
            let table = self.p("emb.class_table");
            for (bi, &lab) in labels.iter().enumerate() {
                for k in 0..e {
                    emb_e[bi * e + k] += table[lab * e + k];
                }
            }
        }
        let emb_act = layers::silu_vec(&emb_e);

        let mut h = conv3d(
            x,
            &self.pt("conv_in.weight"),
            Some(self.p("conv_in.bias")),
            SAME_3X3,
        )?;
        let mut down = Vec::with_capacity(cfg.levels);
        let mut skips = Vec::new();
        for lv in 0..cfg.levels {
            let prefix = format!("down.{lv}");
            let (out, lc) = self.level_forward(&prefix, h, &emb_act, temporal)?;
            h = out;
            down.push(lc);
            if lv + 1 < cfg.levels {
                skips.push(h.clone());
                h = layers::avg_pool2(&h)?;
            }
        }
        let mut attn = None;
        if temporal {
            let (wq, wk, wv, wo) = (
                self.pt("mid.tattn.q.weight"),
                self.pt("mid.tattn.k.weight"),
                self.pt("mid.tattn.v.weight"),
                self.pt("mid.tattn.o.weight"),
            );
            let ap = self.attn_params(&wq, &wk, &wv, &wo);
            let (out, ac) = layers::temporal_attention(&h, &ap)?;
            h = out;
            attn = Some(ac);
        }
        let mut up = Vec::new();
        for lv in (0..cfg.levels - 1).rev() {
            let mut u = layers::upsample2(&h)?;
            u.axpy(T::one(), &skips[lv])?;
            let prefix = format!("up.{lv}");
            let (out, lc) = self.level_forward(&prefix, u, &emb_act, temporal)?;
            h = out;
            up.push(lc);
        }
        let (out_n, out_gn) = layers::group_norm(
            &h,
            self.p("out.norm.gamma"),
            self.p("out.norm.beta"),
            cfg.groups,
            cfg.norm_eps,
        )?;
        let out_a = layers::silu(&out_n);
        let y = conv3d(
            &out_a,
            &self.pt("out.conv.weight"),
            Some(self.p("out.conv.bias")),
            SAME_3X3,
        )?;
        let data = keep_activations.then(|| CacheData {
            batch: b,
            labels: cond.labels().map(|l| l.to_vec()),
            sigma_feature: sigma_feature.to_vec(),
            emb_h1,
            emb_a1,
            emb_e,
            emb_act,
            x_in: x.clone(),
            down,
            attn,
            up,
            out_gn,
            out_n,
            out_a,
            out_shape: y.shape().clone(),
        });
        Ok((y, ForwardCache { data }))
    }

    fn attn_params<'a>(
        &'a self,
        wq: &'a Tensor<T>,
        wk: &'a Tensor<T>,
        wv: &'a Tensor<T>,
        wo: &'a Tensor<T>,
    ) -> AttnParams<'a, T> {
        AttnParams {
            wq,
            bq: self.p("mid.tattn.q.bias"),
            wk,
            bk: self.p("mid.tattn.k.bias"),
            wv,
            bv: self.p("mid.tattn.v.bias"),
            wo,
            bo: self.p("mid.tattn.o.bias"),
            pos_bias: self.p("mid.tattn.pos_bias"),
        }
    }

    fn level_forward(
        &self,
        prefix: &str,
        x: Tensor<T>,
        emb_act: &[T],
        temporal: bool,
    ) -> Result<(Tensor<T>, LevelCache<T>)> {
        let (mut h, res) = self.res_forward(prefix, x, emb_act)?;
        let mut tconv_input = None;
        if temporal {
            let out = conv3d(
                &h,
                &self.pt(&format!("{prefix}.tconv.weight")),
                Some(self.p(&format!("{prefix}.tconv.bias"))),
                TEMPORAL_PAD,
            )?;
            tconv_input = Some(std::mem::replace(&mut h, out));
        }
        Ok((
            h,
            LevelCache {
                prefix: prefix.to_string(),
                res,
                tconv_input,
            },
        ))
    }

    fn res_forward(
        &self,
        prefix: &str,
        x: Tensor<T>,
        emb_act: &[T],
    ) -> Result<(Tensor<T>, ResCache<T>)> {
        let cfg = &self.config;
        let b = x.dims()[0];
        let n = |s: &str| format!("{prefix}.res.{s}");
        let (n1, gn1) = layers::group_norm(
            &x,
            self.p(&n("norm1.gamma")),
            self.p(&n("norm1.beta")),
            cfg.groups,
            cfg.norm_eps,
        )?;
        let a1 = layers::silu(&n1);
        let mut h = conv3d(
            &a1,
            &self.pt(&n("conv1.weight")),
            Some(self.p(&n("conv1.bias"))),
            SAME_3X3,
        )?;
        let bias = layers::linear(
            emb_act,
            b,
            self.p(&n("emb_proj.weight")),
            self.p(&n("emb_proj.bias")),
        );
        layers::add_channel_bias(&mut h, &bias)?;
        let (n2, gn2) = layers::group_norm(
            &h,
            self.p(&n("norm2.gamma")),
            self.p(&n("norm2.beta")),
            cfg.groups,
            cfg.norm_eps,
        )?;
        let a2 = layers::silu(&n2);
        let r = conv3d(
            &a2,
            &self.pt(&n("conv2.weight")),
            Some(self.p(&n("conv2.bias"))),
            SAME_3X3,
        )?;
        let mut out = x;
        out.axpy(T::one(), &r)?;
        Ok((
            out,
            ResCache {
                gn1,
                n1,
                a1,
                gn2,
                n2,
                a2,
            },
        ))
    }

    /// Exact gradient of `Σ grad_out ⊙ F_θ(x)` with respect to every parameter,
    /// laid out like [`DenoiserModel::params`].
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Tensor<T>) -> Result<Vec<T>> {
        let Some(c) = cache.data.as_ref() else {
            bail!(
                State,
                "backward needs a forward pass run with keep_activations = true"
            );
        };
        if grad_out.shape() != &c.out_shape {
            bail!(
                Shape,
                "output gradient {:?} does not match forward output {:?}",
                grad_out.shape(),
                c.out_shape
            );
        }
        let cfg = &self.config;
        let e = cfg.emb_dim;
        let mut grads = vec![T::zero(); self.params.len()];
        let mut g_emb_act = vec![T::zero(); c.batch * e];

        let cb = conv3d_backward(&c.out_a, &self.pt("out.conv.weight"), grad_out, SAME_3X3)?;
        self.acc(&mut grads, "out.conv.weight", cb.kernel.data());
        self.acc(&mut grads, "out.conv.bias", &cb.bias);
        let g_n = layers::silu_backward(&c.out_n, &cb.input);
        let (mut g_h, gg, gb) =
            layers::group_norm_backward(&c.out_gn, self.p("out.norm.gamma"), &g_n)?;
        self.acc(&mut grads, "out.norm.gamma", &gg);
        self.acc(&mut grads, "out.norm.beta", &gb);

        let mut g_skips: Vec<Option<Tensor<T>>> = (0..cfg.levels).map(|_| None).collect();
        for lc in c.up.iter().rev() {
            g_h = self.level_backward(lc, g_h, &c.emb_act, &mut g_emb_act, &mut grads)?;
            let lv: usize = lc.prefix["up.".len()..].parse().expect("level index");
            g_skips[lv] = Some(g_h.clone());
            g_h = layers::upsample2_backward(&g_h)?;
        }
        if let Some(ac) = &c.attn {
            let (wq, wk, wv, wo) = (
                self.pt("mid.tattn.q.weight"),
                self.pt("mid.tattn.k.weight"),
                self.pt("mid.tattn.v.weight"),
                self.pt("mid.tattn.o.weight"),
            );
            let ap = self.attn_params(&wq, &wk, &wv, &wo);
            let ag = layers::temporal_attention_backward(ac, &ap, &g_h)?;
            for (proj, w, bias) in [
                ("q", &ag.wq, &ag.bq),
                ("k", &ag.wk, &ag.bk),
                ("v", &ag.wv, &ag.bv),
                ("o", &ag.wo, &ag.bo),
            ] {
                self.acc(&mut grads, &format!("mid.tattn.{proj}.weight"), w.data());
                self.acc(&mut grads, &format!("mid.tattn.{proj}.bias"), bias);
            }
            self.acc(&mut grads, "mid.tattn.pos_bias", &ag.pos_bias);
            g_h = ag.x;
        }
        for (lv, lc) in c.down.iter().enumerate().rev() {
            if lv + 1 < cfg.levels {
                g_h = layers::avg_pool2_backward(&g_h)?;
                let skip = g_skips[lv]
                    .take()
                    .expect("skip gradient for every inner level");
                g_h.axpy(T::one(), &skip)?;
            }
            g_h = self.level_backward(lc, g_h, &c.emb_act, &mut g_emb_act, &mut grads)?;
        }
        let cb = conv3d_backward(&c.x_in, &self.pt("conv_in.weight"), &g_h, SAME_3X3)?;
        self.acc(&mut grads, "conv_in.weight", cb.kernel.data());
        self.acc(&mut grads, "conv_in.bias", &cb.bias);

        let g_e = layers::silu_vec_backward(&c.emb_e, &g_emb_act);
        if let Some(labels) = &c.labels {
            let v = self.layout.view("emb.class_table").clone();
            for (bi, &lab) in labels.iter().enumerate() {
                for k in 0..e {
                    grads[v.offset + lab * e + k] += g_e[bi * e + k];
                }
            }
        }
        let (w2, b2) = (
            self.layout.view("emb.fc2.weight"),
            self.layout.view("emb.fc2.bias"),
        );
        let mut gw = vec![T::zero(); w2.len()];
        let mut gbias = vec![T::zero(); b2.len()];
        let g_a1 = layers::linear_backward(
            &c.emb_a1,
            c.batch,
            self.p("emb.fc2.weight"),
            &g_e,
            &mut gw,
            &mut gbias,
        );
        self.acc(&mut grads, "emb.fc2.weight", &gw);
        self.acc(&mut grads, "emb.fc2.bias", &gbias);
        let g_h1 = layers::silu_vec_backward(&c.emb_h1, &g_a1);
        let mut gw = vec![T::zero(); e];
        let mut gbias = vec![T::zero(); e];
        layers::linear_backward(
            &c.sigma_feature,
            c.batch,
            self.p("emb.fc1.weight"),
            &g_h1,
            &mut gw,
            &mut gbias,
        );
        self.acc(&mut grads, "emb.fc1.weight", &gw);
        self.acc(&mut grads, "emb.fc1.bias", &gbias);
        Ok(grads)
    }

    fn level_backward(
        &self,
        lc: &LevelCache<T>,
        mut g: Tensor<T>,
        emb_act: &[T],
        g_emb_act: &mut [T],
        grads: &mut [T],
    ) -> Result<Tensor<T>> {
        let prefix = &lc.prefix;
        if let Some(tin) = &lc.tconv_input {
            let wname = format!("{prefix}.tconv.weight");
            let cb = conv3d_backward(tin, &self.pt(&wname), &g, TEMPORAL_PAD)?;
            self.acc(grads, &wname, cb.kernel.data());
            self.acc(grads, &format!("{prefix}.tconv.bias"), &cb.bias);
            g = cb.input;
        }
        self.res_backward(prefix, &lc.res, g, emb_act, g_emb_act, grads)
    }

    fn res_backward(
        &self,
        prefix: &str,
        rc: &ResCache<T>,
        g_out: Tensor<T>,
        emb_act: &[T],
        g_emb_act: &mut [T],
        grads: &mut [T],
    ) -> Result<Tensor<T>> {
        let n = |s: &str| format!("{prefix}.res.{s}");
        let b = g_out.dims()[0];
        let cb2 = conv3d_backward(&rc.a2, &self.pt(&n("conv2.weight")), &g_out, SAME_3X3)?;
        self.acc(grads, &n("conv2.weight"), cb2.kernel.data());
        self.acc(grads, &n("conv2.bias"), &cb2.bias);
        let g_n2 = layers::silu_backward(&rc.n2, &cb2.input);
        let (g_h, gg, gb) = layers::group_norm_backward(&rc.gn2, self.p(&n("norm2.gamma")), &g_n2)?;
        self.acc(grads, &n("norm2.gamma"), &gg);
        self.acc(grads, &n("norm2.beta"), &gb);
        let g_bias = layers::add_channel_bias_backward(&g_h)?;
        let pw = self.layout.view(&n("emb_proj.weight")).clone();
        let pb = self.layout.view(&n("emb_proj.bias")).clone();
        let mut gw = vec![T::zero(); pw.len()];
        let mut gbias = vec![T::zero(); pb.len()];
        let g_e = layers::linear_backward(
            emb_act,
            b,
            &self.params[pw.range()],
            &g_bias,
            &mut gw,
            &mut gbias,
        );
        for (acc, v) in g_emb_act.iter_mut().zip(g_e) {
            *acc += v;
        }
        self.acc(grads, &pw.name, &gw);
        self.acc(grads, &pb.name, &gbias);
        let cb1 = conv3d_backward(&rc.a1, &self.pt(&n("conv1.weight")), &g_h, SAME_3X3)?;
        self.acc(grads, &n("conv1.weight"), cb1.kernel.data());
        self.acc(grads, &n("conv1.bias"), &cb1.bias);
        let g_n1 = layers::silu_backward(&rc.n1, &cb1.input);
        let (g_x, gg, gb) = layers::group_norm_backward(&rc.gn1, self.p(&n("norm1.gamma")), &g_n1)?;
        self.acc(grads, &n("norm1.gamma"), &gg);
        self.acc(grads, &n("norm1.beta"), &gb);
        let mut g_in = g_out;
        g_in.axpy(T::one(), &g_x)?;
        Ok(g_in)
    }

    fn acc(&self, grads: &mut [T], name: &str, g: &[T]) {
        let v = self.layout.view(name);
        for (a, &b) in grads[v.range()].iter_mut().zip(g) {
            *a += b;
        }
    }
}

fn init_view<T: Scalar>(v: &ParamView, out: &mut [T], rng: &mut RngStream) {
    let name = v.name.as_str();
    let normal = |out: &mut [T], rng: &mut RngStream, std: f64| {
        rng.fill_normal(out);
        for p in out.iter_mut() {
            *p *= T::c(std);
        }
    };
    if name.ends_with(".tconv.weight") {
        // identity in time: w[o, i, kt, 0, 0] = δ(o, i) δ(kt, 1)
        let c = v.dims[0];
        out.fill(T::zero());
        for o in 0..c {
            out[(o * c + o) * 3 + 1] = T::one();
        }
    } else if name.ends_with(".gamma") {
        out.fill(T::one());
    } else if name.ends_with(".bias")
        || name.ends_with(".beta")
        || name.ends_with("pos_bias")
        || name == "mid.tattn.o.weight"
        || name == "out.conv.weight"
    {
        out.fill(T::zero());
    } else if name == "emb.class_table" {
        normal(out, rng, 1.0);
    } else {
        let fan_in: usize = v.dims[1..].iter().product();
        normal(out, rng, 1.0 / (fan_in as f64).sqrt());
    }
}
