//! The assembled attribute network and its parameter registry.
//!
//! Shared backbone -> M structurally identical branches (independent
//! parameters) -> per-branch classifier heads on the flattened branch
//! features. For graph-attention variants the branch features are
//! detached, projected to nodes, refined by attention, and classified by
//! a second set of heads. The registry tags every trainable tensor with
//! its subnetwork so the optimizer can route gradient streams.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMatrix;
use crate::gal::{gal_forward, prior_affinity, GalMode, PriorGraph, PriorGroup};
use crate::layers::{BatchNormLayer, Conv2dLayer, LinearLayer, Mode, PseModule};
use crate::tensor::{stack_axis1, Tensor};
use crate::{Error, Result};

// ── Configuration ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    GalJ,
    GalC,
    GalP,
}

impl Variant {
    pub fn has_correlation_net(self) -> bool {
        self != Variant::Baseline
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::GalJ => "gal-j",
            Variant::GalC => "gal-c",
            Variant::GalP => "gal-p",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "gal-j" => Ok(Variant::GalJ),
            "gal-c" => Ok(Variant::GalC),
            "gal-p" => Ok(Variant::GalP),
            other => Err(Error::Config(format!(
                "variant: expected baseline|gal-j|gal-c|gal-p, got '{other}'"
            ))),
        }
    }
}

/// One backbone stage: `kernel`×`kernel` conv (stride `stride`, padding
/// kernel/2), batchnorm, relu, then optional 2×2 max pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

impl ConvBlockSpec {
    pub fn plain(channels: usize) -> ConvBlockSpec {
        ConvBlockSpec {
            channels,
            kernel: 3,
            stride: 1,
            pool: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// attribute count
    pub m: usize,
    /// input image dims (H, W, C)
    pub input: (usize, usize, usize),
    pub backbone: Vec<ConvBlockSpec>,
    pub branch_channels: usize,
    pub projection_channels: usize,
    pub variant: Variant,
    pub prior_groups: Option<Vec<PriorGroup>>,
    /// divide node dot products by sqrt(D) before the softmax
    pub affinity_scale: bool,
}

impl ModelConfig {
    /// Desk-scale default: three pooled 3×3 blocks (16/32/64 channels)
    /// on 32×32 single-channel input.
    pub fn desk_default(m: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            m,
            input: (32, 32, 1),
            backbone: vec![
                ConvBlockSpec::plain(16),
                ConvBlockSpec::plain(32),
                ConvBlockSpec::plain(64),
            ],
            branch_channels: 32,
            projection_channels: 8,
            variant,
            prior_groups: None,
            affinity_scale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("m: need at least 2 attributes, got {}", self.m)));
        }
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!("input: dims must be positive, got {:?}", self.input)));
        }
        if self.backbone.is_empty() {
            return Err(Error::Config("backbone: need at least one block".into()));
        }
        for (i, b) in self.backbone.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::Config(format!(
                    "backbone[{i}]: channels/kernel/stride must be positive"
                )));
            }
        }
        if self.branch_channels == 0 {
            return Err(Error::Config("branch_channels: must be positive".into()));
        }
        if self.projection_channels == 0 {
            return Err(Error::Config("projection_channels: must be positive".into()));
        }
        if self.variant == Variant::GalP && self.prior_groups.is_none() {
            return Err(Error::Config("prior_groups: required for the gal-p variant".into()));
        }
        // spatial dims must survive every block
        let mut dh = h;
        let mut dw = w;
        for (i, b) in self.backbone.iter().enumerate() {
            let pad = b.kernel / 2;
            let oh = (dh + 2 * pad).checked_sub(b.kernel).map(|v| v / b.stride + 1);
            let ow = (dw + 2 * pad).checked_sub(b.kernel).map(|v| v / b.stride + 1);
            match (oh, ow) {
                (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => {
                    dh = oh;
                    dw = ow;
                }
                _ => {
                    return Err(Error::Config(format!(
                        "backbone[{i}]: kernel {} does not fit {dh}x{dw}",
                        b.kernel
                    )))
                }
            }
            if b.pool {
                if dh % 2 != 0 || dw % 2 != 0 {
                    return Err(Error::Config(format!(
                        "backbone[{i}]: pooling needs even dims, got {dh}x{dw}"
                    )));
                }
                dh /= 2;
                dw /= 2;
            }
        }
        Ok(())
    }

    /// Spatial dims of the shared features after the backbone.
    pub fn feature_dims(&self) -> (usize, usize) {
        let (mut h, mut w, _) = self.input;
        for b in &self.backbone {
            let pad = b.kernel / 2;
            h = (h + 2 * pad - b.kernel) / b.stride + 1;
            w = (w + 2 * pad - b.kernel) / b.stride + 1;
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        (h, w)
    }
}

// ── Parameter registry ───────────────────────────────────────────────

/// Subnetwork tag routing gradient streams during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamTag {
    /// backbone + branches (feature learning)
    Fln,
    /// node projections (correlation learning)
    Cln,
    /// pre-attention classifier heads
    HeadF,
    /// post-attention classifier heads
    HeadC,
}

impl ParamTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamTag::Fln => "FLN",
            ParamTag::Cln => "CLN",
            ParamTag::HeadF => "HEAD_F",
            ParamTag::HeadC => "HEAD_C",
        }
    }
}

pub struct RegistryEntry {
    pub name: String,
    pub tensor: Tensor,
    pub tag: ParamTag,
}

/// Every trainable tensor, registered exactly once under a unique name.
#[derive(Default)]
pub struct ParamRegistry {
    entries: Vec<RegistryEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> ParamRegistry {
        ParamRegistry::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor, tag: ParamTag) -> Result<()> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("parameter '{name}' registered twice")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(RegistryEntry { name, tensor, tag });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&RegistryEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.iter()
    }

    pub fn with_tag(&self, tag: ParamTag) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.iter().filter(move |e| e.tag == tag)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_parameters(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for e in &self.entries {
            e.tensor.zero_grad();
        }
    }
}

// ── Model ────────────────────────────────────────────────────────────

struct ConvBlock {
    conv: Conv2dLayer,
    bn: BatchNormLayer,
    pool: bool,
}

struct Branch {
    conv: Conv2dLayer,
    bn: BatchNormLayer,
    pse: PseModule,
}

pub struct AttributeModel {
    pub config: ModelConfig,
    backbone: Vec<ConvBlock>,
    branches: Vec<Branch>,
    heads_f: Vec<LinearLayer>,
    projections: Vec<Conv2dLayer>,
    heads_c: Vec<LinearLayer>,
    prior: Option<PriorGraph>,
}

/// Everything the forward pass produces.
pub struct ForwardOutput {
    /// `[B,M,2]` pre-attention logits
    pub logits_f: Tensor,
    /// `[B,M,2]` post-attention logits; present iff the variant has a
    /// correlation net
    pub logits_c: Option<Tensor>,
    /// `[B,M,M]` row-stochastic attention actually used
    pub attention: Option<Tensor>,
    /// the M branch feature maps `[B,H',W',Cb]`
    pub branch_features: Vec<Tensor>,
}

/// Head selection for prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadChoice {
    /// post-attention head when present, otherwise the feature head
    Auto,
    /// always the pre-attention head
    ForceF,
}

// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent deterministic RNG stream per named component, so adding or
/// removing one component never shifts another's initialization.
pub(crate) fn component_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15) ^ fnv1a(name.as_bytes()))
}

/// Builds the model and its registry with deterministic seed-derived
/// initialization. Branches are structurally identical with independent
/// parameters; feature-net components draw from streams that do not
/// depend on the variant, so two variants built from the same seed start
/// from bitwise-identical feature nets.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(AttributeModel, ParamRegistry)> {
    config.validate()?;
    let mut registry = ParamRegistry::new();
    let (h0, w0, c0) = config.input;
    let _ = (h0, w0);

    let mut backbone = Vec::with_capacity(config.backbone.len());
    let mut cin = c0;
    {
        let mut rng = component_rng(seed, "backbone");
        for (i, spec) in config.backbone.iter().enumerate() {
            let conv = Conv2dLayer::new(
                spec.kernel,
                spec.kernel,
                cin,
                spec.channels,
                spec.stride,
                spec.kernel / 2,
                &mut rng,
            );
            let bn = BatchNormLayer::new(spec.channels);
            // conv bias ahead of batchnorm is absorbed by the mean
            // subtraction; it stays zero and unregistered
            registry.register(format!("backbone.block{i}.conv.kernel"), conv.kernel.clone(), ParamTag::Fln)?;
            registry.register(format!("backbone.block{i}.bn.gamma"), bn.gamma.clone(), ParamTag::Fln)?;
            registry.register(format!("backbone.block{i}.bn.beta"), bn.beta.clone(), ParamTag::Fln)?;
            backbone.push(ConvBlock {
                conv,
                bn,
                pool: spec.pool,
            });
            cin = spec.channels;
        }
    }
    let shared_channels = cin;
    let (fh, fw) = config.feature_dims();
    let head_f_in = fh * fw * config.branch_channels;

    let mut branches = Vec::with_capacity(config.m);
    let mut heads_f = Vec::with_capacity(config.m);
    for i in 0..config.m {
        let mut rng = component_rng(seed, &format!("branch{i}"));
        let conv = Conv2dLayer::new(1, 1, shared_channels, config.branch_channels, 1, 0, &mut rng);
        let bn = BatchNormLayer::new(config.branch_channels);
        let pse = PseModule::new(&mut rng);
        registry.register(format!("branch{i}.conv.kernel"), conv.kernel.clone(), ParamTag::Fln)?;
        registry.register(format!("branch{i}.bn.gamma"), bn.gamma.clone(), ParamTag::Fln)?;
        registry.register(format!("branch{i}.bn.beta"), bn.beta.clone(), ParamTag::Fln)?;
        registry.register(format!("branch{i}.pse.conv1.kernel"), pse.conv1.kernel.clone(), ParamTag::Fln)?;
        registry.register(format!("branch{i}.pse.conv1.bias"), pse.conv1.bias.clone(), ParamTag::Fln)?;
        registry.register(format!("branch{i}.pse.conv2.kernel"), pse.conv2.kernel.clone(), ParamTag::Fln)?;
        registry.register(format!("branch{i}.pse.conv2.bias"), pse.conv2.bias.clone(), ParamTag::Fln)?;
        branches.push(Branch { conv, bn, pse });

        let mut rng = component_rng(seed, &format!("head_f{i}"));
        let head = LinearLayer::new(head_f_in, 2, &mut rng);
        registry.register(format!("head_f{i}.weight"), head.weight.clone(), ParamTag::HeadF)?;
        registry.register(format!("head_f{i}.bias"), head.bias.clone(), ParamTag::HeadF)?;
        heads_f.push(head);
    }

    let mut projections = Vec::new();
    let mut heads_c = Vec::new();
    let mut prior = None;
    if config.variant.has_correlation_net() {
        let node_dim = fh * fw * config.projection_channels;
        for i in 0..config.m {
            let mut rng = component_rng(seed, &format!("proj{i}"));
            let proj = Conv2dLayer::new(1, 1, config.branch_channels, config.projection_channels, 1, 0, &mut rng);
            registry.register(format!("proj{i}.kernel"), proj.kernel.clone(), ParamTag::Cln)?;
            registry.register(format!("proj{i}.bias"), proj.bias.clone(), ParamTag::Cln)?;
            projections.push(proj);

            let mut rng = component_rng(seed, &format!("head_c{i}"));
            let head = LinearLayer::new(node_dim, 2, &mut rng);
            registry.register(format!("head_c{i}.weight"), head.weight.clone(), ParamTag::HeadC)?;
            registry.register(format!("head_c{i}.bias"), head.bias.clone(), ParamTag::HeadC)?;
            heads_c.push(head);
        }
        if config.variant == Variant::GalP {
            let groups = config.prior_groups.as_ref().expect("validated");
            prior = Some(prior_affinity(groups, config.m)?);
        }
    }

    Ok((
        AttributeModel {
            config: config.clone(),
            backbone,
            branches,
            heads_f,
            projections,
            heads_c,
            prior,
        },
        registry,
    ))
}

impl AttributeModel {
    pub fn m(&self) -> usize {
        self.config.m
    }

    /// Runs the network. The backbone executes once; each branch yields
    /// its feature map X_i feeding its own classifier head. Correlation
    /// variants additionally project detached branch features to nodes,
    /// attend, and classify the refined nodes; the detachment keeps the
    /// feature-net path free of any correlation-net influence.
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let s = batch.shape();
        let (h, w, c) = self.config.input;
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != c {
            return Err(Error::Dimension(format!(
                "forward: batch shape {s:?} does not match configured input [B,{h},{w},{c}]"
            )));
        }
        let mut x = batch.clone();
        for block in &self.backbone {
            x = block.bn.forward(&block.conv.forward(&x)?, mode)?.relu();
            if block.pool {
                x = x.max_pool2()?;
            }
        }

        let mut branch_features = Vec::with_capacity(self.m());
        let mut logits_f_rows = Vec::with_capacity(self.m());
        for (branch, head) in self.branches.iter().zip(&self.heads_f) {
            let t = branch.conv.forward(&x)?;
            let t = branch.bn.forward(&t, mode)?;
            let t = crate::layers::pse_forward(&t, &branch.pse)?.relu();
            let fs = t.shape();
            let flat = t.reshape(&[fs[0], fs[1] * fs[2] * fs[3]])?;
            logits_f_rows.push(head.forward(&flat)?);
            branch_features.push(t);
        }
        let logits_f = stack_axis1(&logits_f_rows)?;

        let (logits_c, attention) = if self.config.variant.has_correlation_net() {
            let detached: Vec<Tensor> = branch_features.iter().map(Tensor::detach).collect();
            let gal_mode = match &self.prior {
                Some(p) => GalMode::Prior(p),
                None => GalMode::Learned,
            };
            let (refined, weights) =
                gal_forward(&detached, &self.projections, gal_mode, self.config.affinity_scale)?;
            let mut rows = Vec::with_capacity(self.m());
            for (i, head) in self.heads_c.iter().enumerate() {
                rows.push(head.forward(&refined.slice_axis1(i)?)?);
            }
            (Some(stack_axis1(&rows)?), Some(weights))
        } else {
            (None, None)
        };

        Ok(ForwardOutput {
            logits_f,
            logits_c,
            attention,
            branch_features,
        })
    }

    /// Binary predictions per attribute. Ties resolve to class 0.
    pub fn predict(&self, batch: &Tensor, head: HeadChoice) -> Result<LabelMatrix> {
        let out = self.forward(batch, Mode::Infer)?;
        let logits = match (head, &out.logits_c) {
            (HeadChoice::Auto, Some(c)) => c.clone(),
            _ => out.logits_f,
        };
        Ok(argmax_labels(&logits))
    }

    /// Batchnorm running statistics, name -> values.
    pub fn named_buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, block) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.block{i}.bn.running_mean"), block.bn.running_mean.borrow().clone()));
            out.push((format!("backbone.block{i}.bn.running_var"), block.bn.running_var.borrow().clone()));
        }
        for (i, branch) in self.branches.iter().enumerate() {
            out.push((format!("branch{i}.bn.running_mean"), branch.bn.running_mean.borrow().clone()));
            out.push((format!("branch{i}.bn.running_var"), branch.bn.running_var.borrow().clone()));
        }
        out
    }

    pub fn set_buffer(&self, name: &str, values: &[f64]) -> Result<()> {
        let assign = |slot: &std::cell::RefCell<Vec<f64>>| -> Result<()> {
            let mut s = slot.borrow_mut();
            if s.len() != values.len() {
                return Err(Error::Dimension(format!(
                    "buffer '{name}': expected {} values, got {}",
                    s.len(),
                    values.len()
                )));
            }
            s.copy_from_slice(values);
            Ok(())
        };
        for (i, block) in self.backbone.iter().enumerate() {
            if name == format!("backbone.block{i}.bn.running_mean") {
                return assign(&block.bn.running_mean);
            }
            if name == format!("backbone.block{i}.bn.running_var") {
                return assign(&block.bn.running_var);
            }
        }
        for (i, branch) in self.branches.iter().enumerate() {
            if name == format!("branch{i}.bn.running_mean") {
                return assign(&branch.bn.running_mean);
            }
            if name == format!("branch{i}.bn.running_var") {
                return assign(&branch.bn.running_var);
            }
        }
        Err(Error::Contract(format!("unknown buffer '{name}'")))
    }

    pub fn prior_graph(&self) -> Option<&PriorGraph> {
        self.prior.as_ref()
    }
}

/// Argmax over the trailing class axis of `[B,M,2]`; ties -> class 0.
pub fn argmax_labels(logits: &Tensor) -> LabelMatrix {
    let s = logits.shape();
    let (b, m) = (s[0], s[1]);
    let v = logits.values();
    let mut out = LabelMatrix::zeros(b, m);
    for bi in 0..b {
        for mi in 0..m {
            let off = (bi * m + mi) * 2;
            if v[off + 1] > v[off] {
                out.set(bi, mi, 1);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            m: 3,
            input: (8, 8, 1),
            backbone: vec![ConvBlockSpec::plain(4), ConvBlockSpec::plain(6)],
            branch_channels: 4,
            projection_channels: 2,
            variant,
            prior_groups: None,
            affinity_scale: false,
        }
    }

    fn rand_batch(config: &ModelConfig, b: usize, seed: u64) -> Tensor {
        let (h, w, c) = config.input;
        let mut rng = component_rng(seed, "test-batch");
        let vals: Vec<f64> = (0..b * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(&[b, h, w, c], vals).unwrap()
    }

    fn param_bits(reg: &ParamRegistry) -> Vec<(String, Vec<u64>)> {
        reg.iter()
            .map(|e| (e.name.clone(), e.tensor.to_vec().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = micro_config(Variant::GalJ);
        let (_, r1) = build_model(&cfg, 7).unwrap();
        let (_, r2) = build_model(&cfg, 7).unwrap();
        assert_eq!(param_bits(&r1), param_bits(&r2));
    }

    #[test]
    fn baseline_registry_has_no_correlation_entries() {
        let (_, reg) = build_model(&micro_config(Variant::Baseline), 0).unwrap();
        assert_eq!(reg.with_tag(ParamTag::Cln).count(), 0);
        assert_eq!(reg.with_tag(ParamTag::HeadC).count(), 0);
        assert!(reg.with_tag(ParamTag::Fln).count() > 0);
        assert!(reg.with_tag(ParamTag::HeadF).count() > 0);
    }

    #[test]
    #[allow(clippy::identity_op)] // the factors spell out kernel×kernel×cin×cout
    fn parameter_count_matches_closed_form() {
        // M=5, two-block backbone on 8x8: 8->4->2 spatial
        let cfg = ModelConfig {
            m: 5,
            input: (8, 8, 1),
            backbone: vec![ConvBlockSpec::plain(4), ConvBlockSpec::plain(6)],
            branch_channels: 4,
            projection_channels: 2,
            variant: Variant::GalJ,
            prior_groups: None,
            affinity_scale: false,
        };
        let (_, reg) = build_model(&cfg, 0).unwrap();
        // convs ahead of batchnorm carry no trainable bias
        let block1 = 3 * 3 * 1 * 4 + 2 * 4; // conv kernel, bn gamma+beta
        let block2 = 3 * 3 * 4 * 6 + 2 * 6;
        let branch = 1 * 1 * 6 * 4 + 2 * 4          // 1x1 conv + bn
            + (3 * 3 * 1 * 4 + 4) + (3 * 3 * 4 * 1 + 1); // pse conv1 + conv2
        let head_f = (2 * 2 * 4) * 2 + 2;
        let proj = 1 * 1 * 4 * 2 + 2;
        let head_c = (2 * 2 * 2) * 2 + 2;
        let expect = block1 + block2 + 5 * (branch + head_f + proj + head_c);
        assert_eq!(reg.total_parameters(), expect);
    }

    #[test]
    fn baseline_forward_has_no_correlation_outputs() {
        let (model, _) = build_model(&micro_config(Variant::Baseline), 1).unwrap();
        let batch = rand_batch(&model.config, 2, 1);
        let out = model.forward(&batch, Mode::Train).unwrap();
        assert!(out.logits_c.is_none());
        assert!(out.attention.is_none());
        assert_eq!(out.logits_f.shape(), &[2, 3, 2]);
        assert_eq!(out.branch_features.len(), 3);
    }

    #[test]
    fn zero_input_zero_heads_give_uniform_probabilities() {
        let (model, reg) = build_model(&micro_config(Variant::Baseline), 2).unwrap();
        for e in reg.iter() {
            if e.tag == ParamTag::HeadF {
                e.tensor.set_values(&vec![0.0; e.tensor.numel()]).unwrap();
            }
        }
        let (h, w, c) = model.config.input;
        let batch = Tensor::zeros(&[2, h, w, c]);
        let out = model.forward(&batch, Mode::Train).unwrap();
        for v in out.logits_f.to_vec() {
            assert_eq!(v, 0.0);
        }
        // softmax of equal logits is one half per class
        let probs = out
            .logits_f
            .reshape(&[2 * 3, 2])
            .unwrap()
            .softmax_rows()
            .unwrap();
        for v in probs.to_vec() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn feature_logits_invariant_to_correlation_net_presence() {
        let base_cfg = micro_config(Variant::Baseline);
        let gal_cfg = micro_config(Variant::GalJ);
        let (base, _) = build_model(&base_cfg, 11).unwrap();
        let (gal, _) = build_model(&gal_cfg, 11).unwrap();
        let batch = rand_batch(&base_cfg, 2, 3);
        let lf_base = base.forward(&batch, Mode::Infer).unwrap().logits_f;
        let lf_gal = gal.forward(&batch, Mode::Infer).unwrap().logits_f;
        assert_eq!(
            lf_base.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            lf_gal.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn perturbing_correlation_net_never_changes_feature_logits() {
        let (model, reg) = build_model(&micro_config(Variant::GalJ), 4).unwrap();
        let batch = rand_batch(&model.config, 2, 5);
        let before = model.forward(&batch, Mode::Infer).unwrap().logits_f;
        for e in reg.iter() {
            if matches!(e.tag, ParamTag::Cln | ParamTag::HeadC) {
                let bumped: Vec<f64> = e.tensor.to_vec().iter().map(|v| v + 17.0).collect();
                e.tensor.set_values(&bumped).unwrap();
            }
        }
        let after = model.forward(&batch, Mode::Infer).unwrap().logits_f;
        assert_eq!(
            before.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn branch_independence_before_attention() {
        let (model, reg) = build_model(&micro_config(Variant::Baseline), 6).unwrap();
        let batch = rand_batch(&model.config, 2, 7);
        let before = model.forward(&batch, Mode::Infer).unwrap().logits_f;
        // zero branch 1 and its head
        for e in reg.iter() {
            if e.name.starts_with("branch1.") || e.name.starts_with("head_f1.") {
                e.tensor.set_values(&vec![0.0; e.tensor.numel()]).unwrap();
            }
        }
        let after = model.forward(&batch, Mode::Infer).unwrap().logits_f;
        let b = before.to_vec();
        let a = after.to_vec();
        let m = model.m();
        for bi in 0..2 {
            for mi in 0..m {
                for k in 0..2 {
                    let idx = (bi * m + mi) * 2 + k;
                    if mi == 1 {
                        continue;
                    }
                    assert_eq!(b[idx].to_bits(), a[idx].to_bits(), "branch {mi} changed");
                }
            }
        }
        assert_ne!(
            b[2..4].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a[2..4].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn registry_completeness_under_both_losses() {
        let (model, reg) = build_model(&micro_config(Variant::GalJ), 8).unwrap();
        let batch = rand_batch(&model.config, 2, 9);
        let out = model.forward(&batch, Mode::Train).unwrap();
        let lf = out.logits_f.reduce_mean(&[], false).unwrap();
        let lc = out.logits_c.unwrap().reduce_mean(&[], false).unwrap();
        let total = lf.add(&lc).unwrap();
        total.backward().unwrap();
        for e in reg.iter() {
            assert!(
                e.tensor.grad().is_some(),
                "parameter {} received no gradient",
                e.name
            );
        }
    }

    #[test]
    fn forward_is_deterministic_in_infer_mode() {
        let (model, _) = build_model(&micro_config(Variant::GalJ), 10).unwrap();
        let batch = rand_batch(&model.config, 2, 11);
        let a = model.forward(&batch, Mode::Infer).unwrap();
        let b = model.forward(&batch, Mode::Infer).unwrap();
        assert_eq!(
            a.logits_f.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.logits_f.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            a.logits_c.unwrap().to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.logits_c.unwrap().to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn predict_argmax_and_tie_break() {
        let logits = Tensor::new(&[1, 2, 2], vec![2.0, -1.0, 0.7, 0.7]).unwrap();
        let labels = argmax_labels(&logits);
        assert_eq!(labels.get(0, 0), 0); // max at class 0
        assert_eq!(labels.get(0, 1), 0); // tie -> class 0
        let logits = Tensor::new(&[1, 1, 2], vec![-3.0, 4.0]).unwrap();
        assert_eq!(argmax_labels(&logits).get(0, 0), 1);
    }

    #[test]
    fn batch_prediction_equals_per_sample_loop() {
        let (model, _) = build_model(&micro_config(Variant::GalJ), 12).unwrap();
        let batch = rand_batch(&model.config, 4, 13);
        let all = model.predict(&batch, HeadChoice::Auto).unwrap();
        let (h, w, c) = model.config.input;
        let stride = h * w * c;
        let bv = batch.to_vec();
        for i in 0..4 {
            let one = Tensor::new(&[1, h, w, c], bv[i * stride..(i + 1) * stride].to_vec()).unwrap();
            let single = model.predict(&one, HeadChoice::Auto).unwrap();
            assert_eq!(single.row(0), all.row(i), "sample {i}");
        }
    }

    #[test]
    fn predict_head_choice_flag() {
        let (model, _) = build_model(&micro_config(Variant::GalJ), 14).unwrap();
        let batch = rand_batch(&model.config, 2, 15);
        let auto = model.predict(&batch, HeadChoice::Auto).unwrap();
        let forced = model.predict(&batch, HeadChoice::ForceF).unwrap();
        let out = model.forward(&batch, Mode::Infer).unwrap();
        assert_eq!(auto, argmax_labels(&out.logits_c.unwrap()));
        assert_eq!(forced, argmax_labels(&out.logits_f));
    }

    #[test]
    fn gal_p_requires_prior_groups() {
        let cfg = micro_config(Variant::GalP);
        assert!(matches!(build_model(&cfg, 0).err(), Some(Error::Config(_))));
        let mut cfg = micro_config(Variant::GalP);
        cfg.prior_groups = Some(vec![
            PriorGroup {
                name: "a".into(),
                members: vec![0, 1],
            },
            PriorGroup {
                name: "b".into(),
                members: vec![2],
            },
        ]);
        let (model, _) = build_model(&cfg, 0).unwrap();
        let batch = rand_batch(&model.config, 2, 16);
        let out = model.forward(&batch, Mode::Train).unwrap();
        // attention equals the tiled prior
        let w = out.attention.unwrap();
        let p = model.prior_graph().unwrap().affinity.to_vec();
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(w.at(&[b, i, j]), p[i * 3 + j]);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_name_the_offending_field() {
        let expect_config_err = |cfg: &ModelConfig, field: &str| match build_model(cfg, 0) {
            Err(Error::Config(msg)) => assert!(msg.contains(field), "'{msg}' lacks '{field}'"),
            Err(other) => panic!("expected config error, got {other:?}"),
            Ok(_) => panic!("expected config error, build succeeded"),
        };
        let mut cfg = micro_config(Variant::Baseline);
        cfg.m = 1;
        expect_config_err(&cfg, "m:");
        let mut cfg = micro_config(Variant::Baseline);
        cfg.branch_channels = 0;
        expect_config_err(&cfg, "branch_channels");
        // 10x10 input: one pooled block gives 5x5, second pool impossible
        let mut cfg = micro_config(Variant::Baseline);
        cfg.input = (10, 10, 1);
        expect_config_err(&cfg, "pool");
    }

    #[test]
    fn forward_rejects_wrong_batch_dims() {
        let (model, _) = build_model(&micro_config(Variant::Baseline), 0).unwrap();
        let bad = Tensor::zeros(&[2, 8, 8, 3]);
        assert!(matches!(model.forward(&bad, Mode::Infer).err(), Some(Error::Dimension(_))));
    }
}
