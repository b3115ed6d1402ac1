//! The network: per-stream unified embedding, adaptive relevance learning
//! over metadata, cross-modal fusion with an extra token, and the
//! classification head. Every ablation switch is a [`ModelConfig`] option.

mod check;
mod config;
pub mod layers;

pub use check::{gradient_check, GRADCHECK_STEP};
pub use config::{Ablation, AblationFlag, ModelConfig};

use layers::{
    Builder, CrossBlock, Fwd, InitKind, Initializer, Linear, MetadataAttention, Mlp,
    TransformerLayer, ZeroInit,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Input stream of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Vision,
    Caption,
    Prompt,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Vision, Stream::Caption, Stream::Prompt];

    pub fn key(self) -> &'static str {
        match self {
            Stream::Vision => "v",
            Stream::Caption => "c",
            Stream::Prompt => "p",
        }
    }
}

/// Module that an MLP ablation replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleKind {
    Unified,
    Adaptive,
    Fusion,
}

/// Encoder outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTriple<S> {
    pub e_v: Vec<S>,
    pub e_c: Vec<S>,
    pub e_p: Vec<S>,
}

impl<S: Scalar> FeatureTriple<S> {
    pub fn validate(&self, d_e: usize) -> Result<()> {
        for (name, v) in [("e_v", &self.e_v), ("e_c", &self.e_c), ("e_p", &self.e_p)] {
            if v.len() != d_e {
                return Err(Error::dim("feature", &[v.len()], &[d_e]));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// A batch of samples as three `batch x d_e` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<S> {
    pub e_v: Tensor<S>,
    pub e_c: Tensor<S>,
    pub e_p: Tensor<S>,
}

impl<S: Scalar> FeatureBatch<S> {
    pub fn from_triples<'a>(
        samples: impl IntoIterator<Item = &'a FeatureTriple<S>>,
    ) -> Result<Self> {
        let samples: Vec<_> = samples.into_iter().collect();
        let Some(first) = samples.first() else {
            return Err(Error::Usage("empty batch".into()));
        };
        let d_e = first.e_v.len();
        let mut v = Vec::with_capacity(samples.len() * d_e);
        let mut c = Vec::with_capacity(samples.len() * d_e);
        let mut p = Vec::with_capacity(samples.len() * d_e);
        for s in &samples {
            s.validate(d_e)?;
            v.extend_from_slice(&s.e_v);
            c.extend_from_slice(&s.e_c);
            p.extend_from_slice(&s.e_p);
        }
        let shape = vec![samples.len(), d_e];
        Ok(FeatureBatch {
            e_v: Tensor::new(shape.clone(), v)?,
            e_c: Tensor::new(shape.clone(), c)?,
            e_p: Tensor::new(shape, p)?,
        })
    }

    pub fn len(&self) -> usize {
        self.e_v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_e(&self) -> usize {
        self.e_v.cols()
    }
}

/// Probability vector over the sentiment classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SentimentDistribution {
    pub p: Vec<f64>,
}

impl SentimentDistribution {
    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-probability of the labelled classes.
pub fn cross_entropy(probs: &[SentimentDistribution], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Usage(format!(
            "{} distributions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        if y >= p.p.len() {
            return Err(Error::Dataset(format!(
                "sample {i}: label {y} outside [0, {})",
                p.p.len()
            )));
        }
        total -= p.p[y].ln();
    }
    Ok(total / probs.len() as f64)
}

/// Per-stream unified embedding: FC to `d_h`, outer-product expansion to
/// `L x d_h`, then one transformer layer.
#[derive(Clone, Debug)]
pub struct UnifiedEmbedding {
    pub fc: Linear,
    pub expand_weight: ParamId,
    pub expand_bias: ParamId,
    pub layer: TransformerLayer,
}

#[derive(Clone, Debug)]
pub enum UnifiedModule {
    Embedding(UnifiedEmbedding),
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
pub struct AdaptiveLearning {
    pub image_layers: Vec<TransformerLayer>,
    pub caption: Option<MetadataAttention>,
    pub prompt: Option<MetadataAttention>,
    pub w_o: Option<ParamId>,
    pub initial_token: ParamId,
}

#[derive(Clone, Debug)]
pub enum AdaptiveModule {
    Attention(AdaptiveLearning),
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
pub struct CrossModalFusion {
    pub extra_token: ParamId,
    pub pos_source: ParamId,
    pub pos_target: ParamId,
    pub blocks: Vec<CrossBlock>,
}

#[derive(Clone, Debug)]
pub enum FusionModule {
    Blocks(CrossModalFusion),
    Mlp(Mlp),
}

/// Parameter handles for every module of the network.
#[derive(Clone, Debug)]
pub struct Layout {
    pub vision: UnifiedModule,
    pub caption: Option<UnifiedModule>,
    pub prompt: Option<UnifiedModule>,
    pub adaptive: AdaptiveModule,
    pub fusion: FusionModule,
    pub head: Linear,
}

/// Scalar counts of the attention-based modules a configuration would build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModuleParamCounts {
    pub unified_stream: usize,
    pub adaptive: usize,
    pub fusion: usize,
}

/// Unified states `H_i^1`, each `(batch * L) x d_h`. Dropped metadata
/// streams are absent.
#[derive(Clone, Copy, Debug)]
pub struct UnifiedStates {
    pub h_v: Var,
    pub h_c: Option<Var>,
    pub h_p: Option<Var>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Activations {
    pub unified: UnifiedStates,
    pub h_v: Var,
    pub h_m: Var,
    /// Target stream after fusion, `(batch * (L + 1)) x d_h`.
    pub fused: Var,
    /// Extra-token row of every sample, `batch x d_h`.
    pub pooled: Var,
    pub logits: Var,
}

/// The full network: configuration, parameter registry and layout.
#[derive(Clone, Debug)]
pub struct SentiFormer<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    layout: Layout,
}

fn build_unified<S: Scalar, I: Initializer<S>>(
    b: &mut Builder<'_, S, I>,
    cfg: &ModelConfig,
) -> UnifiedEmbedding {
    let fc = Linear::new(b, "fc", cfg.d_e, cfg.d_h, true);
    let expand_weight = b.param("expand.weight", InitKind::Weight, &[cfg.classes, 1]);
    let expand_bias = b.param("expand.bias", InitKind::Zeros, &[cfg.classes, cfg.d_h]);
    let layer = TransformerLayer::new(b, "layer", cfg);
    UnifiedEmbedding {
        fc,
        expand_weight,
        expand_bias,
        layer,
    }
}

fn build_adaptive<S: Scalar, I: Initializer<S>>(
    b: &mut Builder<'_, S, I>,
    cfg: &ModelConfig,
) -> AdaptiveLearning {
    let image_layers = (0..cfg.depth_n)
        .map(|j| TransformerLayer::new(b, &format!("image_layers.{j}"), cfg))
        .collect();
    let caption = cfg
        .uses_caption()
        .then(|| MetadataAttention::new(b, "caption_attn", cfg));
    let prompt = cfg
        .uses_prompt()
        .then(|| MetadataAttention::new(b, "prompt_attn", cfg));
    let w_o = (cfg.uses_caption() || cfg.uses_prompt())
        .then(|| b.param("w_o", InitKind::Weight, &[cfg.d_h, cfg.d_h]));
    let initial_token = b.param("initial_token", InitKind::Weight, &[cfg.classes, cfg.d_h]);
    AdaptiveLearning {
        image_layers,
        caption,
        prompt,
        w_o,
        initial_token,
    }
}

fn build_fusion<S: Scalar, I: Initializer<S>>(
    b: &mut Builder<'_, S, I>,
    cfg: &ModelConfig,
) -> CrossModalFusion {
    let seq = cfg.classes + 1;
    CrossModalFusion {
        extra_token: b.param("extra_token", InitKind::Weight, &[1, cfg.d_h]),
        pos_source: b.param("pos_source", InitKind::Zeros, &[seq, cfg.d_h]),
        pos_target: b.param("pos_target", InitKind::Zeros, &[seq, cfg.d_h]),
        blocks: (0..cfg.depth_m)
            .map(|m| CrossBlock::new(b, &format!("blocks.{m}"), cfg))
            .collect(),
    }
}

/// Parameter counts of the modules the MLP ablations replace, for `cfg`
/// with its MLP switches cleared.
pub fn module_param_counts(cfg: &ModelConfig) -> ModuleParamCounts {
    let mut cfg = cfg.clone();
    cfg.ablation.mlp_unified = false;
    cfg.ablation.mlp_adaptive = false;
    cfg.ablation.mlp_fusion = false;
    let count = |f: &dyn Fn(&mut Builder<'_, f32, ZeroInit>)| {
        let mut store = ParamStore::<f32>::new();
        let mut init = ZeroInit;
        f(&mut Builder::new(&mut store, &mut init));
        store.num_scalars()
    };
    ModuleParamCounts {
        unified_stream: count(&|b| {
            build_unified(b, &cfg);
        }),
        adaptive: count(&|b| {
            build_adaptive(b, &cfg);
        }),
        fusion: count(&|b| {
            build_fusion(b, &cfg);
        }),
    }
}

/// Input/output widths of the MLP standing in for `module`.
pub fn mlp_io(cfg: &ModelConfig, module: ModuleKind) -> (usize, usize) {
    let seq = cfg.classes * cfg.d_h;
    match module {
        ModuleKind::Unified => (cfg.d_e, seq),
        ModuleKind::Adaptive => (3 * seq, 2 * seq),
        ModuleKind::Fusion => (2 * seq, (cfg.classes + 1) * cfg.d_h),
    }
}

fn build_mlp<S: Scalar, I: Initializer<S>>(
    b: &mut Builder<'_, S, I>,
    cfg: &ModelConfig,
    module: ModuleKind,
    target: usize,
) -> Result<Mlp> {
    let (d_in, d_out) = mlp_io(cfg, module);
    let hidden = Mlp::matching_hidden(d_in, d_out, target);
    let count = Mlp::param_count(d_in, hidden, d_out);
    let rel = (count as f64 - target as f64).abs() / target as f64;
    if rel > 0.05 {
        return Err(Error::Config(format!(
            "{module:?} MLP substitute has {count} parameters, {:.1}% away from the \
             replaced module's {target}",
            rel * 100.0
        )));
    }
    Ok(Mlp::new(b, "mlp", d_in, hidden, d_out))
}

impl<S: Scalar> SentiFormer<S> {
    /// Builds every parameter the configuration uses, filled by `init`.
    pub fn new<I: Initializer<S>>(config: ModelConfig, init: &mut I) -> Result<Self> {
        config.validate()?;
        let counts = module_param_counts(&config);
        let ab = config.ablation;
        let mut params = ParamStore::new();
        let layout = {
            let mut root = Builder::new(&mut params, init);
            let unified = |root: &mut Builder<'_, S, I>, stream: Stream| -> Result<UnifiedModule> {
                let mut b = root.sub("unified");
                let mut b = b.sub(stream.key());
                Ok(if ab.mlp_unified {
                    UnifiedModule::Mlp(build_mlp(
                        &mut b,
                        &config,
                        ModuleKind::Unified,
                        counts.unified_stream,
                    )?)
                } else {
                    UnifiedModule::Embedding(build_unified(&mut b, &config))
                })
            };
            let vision = unified(&mut root, Stream::Vision)?;
            let caption = config
                .uses_caption()
                .then(|| unified(&mut root, Stream::Caption))
                .transpose()?;
            let prompt = config
                .uses_prompt()
                .then(|| unified(&mut root, Stream::Prompt))
                .transpose()?;
            let adaptive = {
                let mut b = root.sub("adaptive");
                if ab.mlp_adaptive {
                    AdaptiveModule::Mlp(build_mlp(
                        &mut b,
                        &config,
                        ModuleKind::Adaptive,
                        counts.adaptive,
                    )?)
                } else {
                    AdaptiveModule::Attention(build_adaptive(&mut b, &config))
                }
            };
            let fusion = {
                let mut b = root.sub("fusion");
                if ab.mlp_fusion {
                    FusionModule::Mlp(build_mlp(
                        &mut b,
                        &config,
                        ModuleKind::Fusion,
                        counts.fusion,
                    )?)
                } else {
                    FusionModule::Blocks(build_fusion(&mut b, &config))
                }
            };
            let head = Linear::new(&mut root, "head", config.d_h, config.classes, true);
            Layout {
                vision,
                caption,
                prompt,
                adaptive,
                fusion,
                head,
            }
        };
        Ok(SentiFormer {
            config,
            params,
            layout,
        })
    }

    /// Same architecture with all weights zero and gains one.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::new(config, &mut ZeroInit)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Replaces all parameter values with those of `other` (names and shapes
    /// must agree).
    pub fn load_params(&mut self, other: &ParamStore<S>) -> Result<()> {
        self.params.load_values_from(other)
    }

    fn unified_module(&self, stream: Stream) -> Result<&UnifiedModule> {
        match stream {
            Stream::Vision => Some(&self.layout.vision),
            Stream::Caption => self.layout.caption.as_ref(),
            Stream::Prompt => self.layout.prompt.as_ref(),
        }
        .ok_or_else(|| Error::Usage(format!("stream {stream:?} is ablated")))
    }

    /// `batch x d_e` encoder outputs to `(batch * L) x d_h` unified states.
    pub fn unified_embed(&self, f: &mut Fwd<'_, S>, stream: Stream, e: Var) -> Result<Var> {
        let cfg = &self.config;
        let width = f.tape.shape(e)[1];
        if width != cfg.d_e {
            return Err(Error::dim(
                "unified_embed",
                f.tape.shape(e),
                &[f.batch, cfg.d_e],
            ));
        }
        match self.unified_module(stream)? {
            UnifiedModule::Embedding(u) => {
                let h0 = u.fc.forward(f, e)?;
                let w = f.p(u.expand_weight);
                let b = f.p(u.expand_bias);
                let expanded = f.tape.expand_outer(h0, w, b)?;
                u.layer.forward(f, expanded)
            }
            UnifiedModule::Mlp(_) => {
                let out = self.mlp_substitute_for(f, ModuleKind::Unified, Some(stream), e)?;
                f.tape.reshape(out, &[f.batch * cfg.classes, cfg.d_h])
            }
        }
    }

    /// Applies the MLP that replaces `module`; `x` is one flattened row per
    /// sample. Fails unless the matching `mlp_*` switch is set.
    pub fn mlp_substitute(&self, f: &mut Fwd<'_, S>, module: ModuleKind, x: Var) -> Result<Var> {
        self.mlp_substitute_for(f, module, Some(Stream::Vision), x)
    }

    fn mlp_substitute_for(
        &self,
        f: &mut Fwd<'_, S>,
        module: ModuleKind,
        stream: Option<Stream>,
        x: Var,
    ) -> Result<Var> {
        let mlp = match module {
            ModuleKind::Unified => match self.unified_module(stream.unwrap_or(Stream::Vision))? {
                UnifiedModule::Mlp(m) => Some(m),
                UnifiedModule::Embedding(_) => None,
            },
            ModuleKind::Adaptive => match &self.layout.adaptive {
                AdaptiveModule::Mlp(m) => Some(m),
                AdaptiveModule::Attention(_) => None,
            },
            ModuleKind::Fusion => match &self.layout.fusion {
                FusionModule::Mlp(m) => Some(m),
                FusionModule::Blocks(_) => None,
            },
        };
        let mlp = mlp.ok_or_else(|| {
            Error::Usage(format!(
                "{module:?} module is not configured as an MLP substitute"
            ))
        })?;
        mlp.forward(f, x)
    }

    /// Runs the three unified embeddings (dropped streams are skipped; the
    /// vision input is zeroed under `no_vision`).
    pub fn unify(&self, f: &mut Fwd<'_, S>, batch: &FeatureBatch<S>) -> Result<UnifiedStates> {
        let e_v = if self.config.ablation.no_vision {
            Tensor::zeros(batch.e_v.shape())
        } else {
            batch.e_v.clone()
        };
        let e_v = f.tape.constant(e_v);
        let h_v = self.unified_embed(f, Stream::Vision, e_v)?;
        let h_c = if self.config.uses_caption() {
            let e = f.tape.constant(batch.e_c.clone());
            Some(self.unified_embed(f, Stream::Caption, e)?)
        } else {
            None
        };
        let h_p = if self.config.uses_prompt() {
            let e = f.tape.constant(batch.e_p.clone());
            Some(self.unified_embed(f, Stream::Prompt, e)?)
        } else {
            None
        };
        Ok(UnifiedStates { h_v, h_c, h_p })
    }

    fn attention_module(&self) -> Result<&AdaptiveLearning> {
        match &self.layout.adaptive {
            AdaptiveModule::Attention(a) => Ok(a),
            AdaptiveModule::Mlp(_) => Err(Error::Usage(
                "adaptive learning is replaced by an MLP in this configuration".into(),
            )),
        }
    }

    /// Learned initial metadata token, tiled over the batch.
    pub fn initial_metadata_token(&self, f: &mut Fwd<'_, S>) -> Result<Var> {
        let a = self.attention_module()?;
        let tok = f.p(a.initial_token);
        f.tape.tile(tok, f.batch)
    }

    /// One adaptive step `j` (1-based): the image stream goes through its
    /// `j`-th transformer layer while `H_m` accumulates
    /// `(MHA(H_v^j, H_c^1, H_c^1) + MHA(H_v^j, H_p^1, H_p^1)) W_O`.
    pub fn adaptive_step(
        &self,
        f: &mut Fwd<'_, S>,
        j: usize,
        h_v: Var,
        h_c1: Option<Var>,
        h_p1: Option<Var>,
        h_m: Var,
    ) -> Result<(Var, Var)> {
        let a = self.attention_module()?;
        if j == 0 || j > a.image_layers.len() {
            return Err(Error::Usage(format!(
                "adaptive step {j} outside [1, {}]",
                a.image_layers.len()
            )));
        }
        let h_v_next = a.image_layers[j - 1].forward(f, h_v)?;
        let mut metadata = None;
        for (attn, memory) in [(&a.caption, h_c1), (&a.prompt, h_p1)] {
            if let (Some(attn), Some(memory)) = (attn, memory) {
                let h = attn.forward(f, h_v, memory)?;
                metadata = Some(match metadata {
                    Some(acc) => f.tape.add(acc, h)?,
                    None => h,
                });
            }
        }
        let h_m_next = match (metadata, a.w_o) {
            (Some(sum), Some(w_o)) => {
                let w = f.p(w_o);
                let update = f.tape.matmul(sum, w)?;
                f.tape.add(h_m, update)?
            }
            _ => h_m,
        };
        Ok((h_v_next, h_m_next))
    }

    /// Returns `(H_v^{N+1}, H_m^{N+1})`.
    pub fn adaptive_learning(&self, f: &mut Fwd<'_, S>, u: &UnifiedStates) -> Result<(Var, Var)> {
        let cfg = &self.config;
        match &self.layout.adaptive {
            AdaptiveModule::Attention(a) => {
                let mut h_v = u.h_v;
                let mut h_m = self.initial_metadata_token(f)?;
                for j in 1..=a.image_layers.len() {
                    (h_v, h_m) = self.adaptive_step(f, j, h_v, u.h_c, u.h_p, h_m)?;
                }
                Ok((h_v, h_m))
            }
            AdaptiveModule::Mlp(_) => {
                let flat = cfg.classes * cfg.d_h;
                let mut parts = Vec::with_capacity(3);
                for h in [Some(u.h_v), u.h_c, u.h_p] {
                    let part = match h {
                        Some(h) => f.tape.reshape(h, &[f.batch, flat])?,
                        None => f.tape.constant(Tensor::zeros(&[f.batch, flat])),
                    };
                    parts.push(part);
                }
                let x = f.tape.concat_cols(&parts)?;
                let out = self.mlp_substitute(f, ModuleKind::Adaptive, x)?;
                let rows = [f.batch * cfg.classes, cfg.d_h];
                let h_v = f.tape.slice_cols(out, 0, flat)?;
                let h_v = f.tape.reshape(h_v, &rows)?;
                let h_m = f.tape.slice_cols(out, flat, 2 * flat)?;
                let h_m = f.tape.reshape(h_m, &rows)?;
                Ok((h_v, h_m))
            }
        }
    }

    /// Source and target sequences `H_e (+) H + P`, each
    /// `(batch * (L + 1)) x d_h`.
    pub fn fusion_inputs(&self, f: &mut Fwd<'_, S>, h_v: Var, h_m: Var) -> Result<(Var, Var)> {
        let FusionModule::Blocks(fu) = &self.layout.fusion else {
            return Err(Error::Usage(
                "fusion is replaced by an MLP in this configuration".into(),
            ));
        };
        let tok = f.p(fu.extra_token);
        let ps = f.p(fu.pos_source);
        let pt = f.p(fu.pos_target);
        let xs = f.tape.prepend_token(h_v, tok, f.batch)?;
        let ps = f.tape.tile(ps, f.batch)?;
        let xs = f.tape.add(xs, ps)?;
        let xt = f.tape.prepend_token(h_m, tok, f.batch)?;
        let pt = f.tape.tile(pt, f.batch)?;
        let xt = f.tape.add(xt, pt)?;
        Ok((xs, xt))
    }

    /// Target stream after the `M` fusion blocks, `(batch * (L + 1)) x d_h`.
    pub fn cross_modal_fuse(&self, f: &mut Fwd<'_, S>, h_v: Var, h_m: Var) -> Result<Var> {
        let cfg = &self.config;
        match &self.layout.fusion {
            FusionModule::Blocks(fu) => {
                let (source, mut target) = self.fusion_inputs(f, h_v, h_m)?;
                for block in &fu.blocks {
                    target = block.forward(f, target, source)?;
                }
                Ok(target)
            }
            FusionModule::Mlp(_) => {
                let flat = cfg.classes * cfg.d_h;
                let v = f.tape.reshape(h_v, &[f.batch, flat])?;
                let m = f.tape.reshape(h_m, &[f.batch, flat])?;
                let x = f.tape.concat_cols(&[v, m])?;
                let out = self.mlp_substitute(f, ModuleKind::Fusion, x)?;
                f.tape.reshape(out, &[f.batch * (cfg.classes + 1), cfg.d_h])
            }
        }
    }

    /// Extra-token rows and class logits `row0 W_f + b_f`.
    pub fn classify_logits(&self, f: &mut Fwd<'_, S>, fused: Var) -> Result<(Var, Var)> {
        let pooled = f.tape.select_rows(fused, self.config.classes + 1, 0)?;
        let logits = self.layout.head.forward(f, pooled)?;
        Ok((pooled, logits))
    }

    pub fn forward_with(&self, f: &mut Fwd<'_, S>, batch: &FeatureBatch<S>) -> Result<Activations> {
        if batch.len() != f.batch {
            return Err(Error::dim("forward", &[batch.len()], &[f.batch]));
        }
        if batch.d_e() != self.config.d_e {
            return Err(Error::ConfigMismatch(format!(
                "features have width {}, model expects d_e = {}",
                batch.d_e(),
                self.config.d_e
            )));
        }
        let unified = self.unify(f, batch)?;
        let (h_v, h_m) = self.adaptive_learning(f, &unified)?;
        let fused = self.cross_modal_fuse(f, h_v, h_m)?;
        let (pooled, logits) = self.classify_logits(f, fused)?;
        Ok(Activations {
            unified,
            h_v,
            h_m,
            fused,
            pooled,
            logits,
        })
    }

    /// Records a forward pass of `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape<S>, batch: &FeatureBatch<S>) -> Result<Activations> {
        let mut f = Fwd::new(tape, &self.params, batch.len());
        self.forward_with(&mut f, batch)
    }

    /// Records a forward pass and the mean cross-entropy against `labels`.
    pub fn loss(
        &self,
        tape: &mut Tape<S>,
        batch: &FeatureBatch<S>,
        labels: &[usize],
    ) -> Result<(Var, Activations)> {
        let acts = self.forward(tape, batch)?;
        let loss = tape.softmax_cross_entropy(acts.logits, labels)?;
        Ok((loss, acts))
    }

    /// Training-mode forward pass and loss: dropout with probability `p`,
    /// masks drawn from `rng`.
    pub fn train_loss(
        &self,
        tape: &mut Tape<S>,
        batch: &FeatureBatch<S>,
        labels: &[usize],
        p: f64,
        rng: rand_chacha::ChaCha8Rng,
    ) -> Result<(Var, Activations)> {
        let mut f = Fwd::new(tape, &self.params, batch.len()).with_dropout(p, rng);
        let acts = self.forward_with(&mut f, batch)?;
        let loss = tape.softmax_cross_entropy(acts.logits, labels)?;
        Ok((loss, acts))
    }

    /// Class distributions for every sample of `batch`.
    pub fn predict(&self, batch: &FeatureBatch<S>) -> Result<Vec<SentimentDistribution>> {
        let mut tape = Tape::new();
        let acts = self.forward(&mut tape, batch)?;
        let probs = tape.softmax_rows(acts.logits)?;
        Ok(tape
            .value(probs)
            .data()
            .chunks(self.config.classes)
            .map(|row| SentimentDistribution {
                p: row.iter().map(|v| v.to_f64_lossy()).collect(),
            })
            .collect())
    }

    /// Converts parameters to another precision.
    pub fn cast<T: Scalar>(&self) -> SentiFormer<T> {
        SentiFormer {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }
}
