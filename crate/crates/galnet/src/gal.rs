//! Graph attention over attribute nodes.
//!
//! Each attribute's feature map is projected by an unshared 1×1
//! convolution and flattened into a node vector; the pairwise dot
//! products of the M nodes form an affinity matrix whose row softmax
//! weights a convex recombination of the nodes. A fixed prior graph can
//! replace the learned affinity: attributes are partitioned into groups,
//! every within-group edge (self included) carries weight 1/|group|, and
//! cross-group edges are zero.
//!
//! Node flattening order is row-major over (height, width, channel),
//! identical to the `[B,H,W,C]` value layout.

use serde::{Deserialize, Serialize};

use crate::layers::Conv2dLayer;
use crate::tensor::{stack_axis1, Tensor};
use crate::{Error, Result};

/// One named group of attribute indices in a prior graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorGroup {
    pub name: String,
    pub members: Vec<usize>,
}

/// Fixed prior-knowledge affinity built from an attribute partition.
/// Rows sum to 1 and need no further normalization.
pub struct PriorGraph {
    pub groups: Vec<PriorGroup>,
    /// `[M, M]` constant; not part of any gradient graph.
    pub affinity: Tensor,
}

/// Attention source: data-driven dot-product affinity, or a fixed prior.
pub enum GalMode<'a> {
    Learned,
    Prior(&'a PriorGraph),
}

/// Projects M feature maps `[B,H,W,C]` through their own 1×1 convolution
/// and flattens each result into a node row, producing `[B,M,D]` with
/// `D = H·W·C'` (row-major over height, then width, then channel).
pub fn project_to_nodes(features: &[Tensor], proj_layers: &[Conv2dLayer]) -> Result<Tensor> {
    if features.is_empty() || features.len() != proj_layers.len() {
        return Err(Error::Contract(format!(
            "project_to_nodes: {} feature maps but {} projection layers",
            features.len(),
            proj_layers.len()
        )));
    }
    let shape0 = features[0].shape().to_vec();
    let mut rows = Vec::with_capacity(features.len());
    for (f, layer) in features.iter().zip(proj_layers) {
        if f.shape() != shape0 {
            return Err(Error::Contract(format!(
                "project_to_nodes: feature shapes differ: {:?} vs {:?}",
                f.shape(),
                shape0
            )));
        }
        let projected = layer.forward(f)?;
        let s = projected.shape();
        let d = s[1] * s[2] * s[3];
        rows.push(projected.reshape(&[s[0], d])?);
    }
    stack_axis1(&rows)
}

/// Per-sample Gram matrix of the nodes: `A[b] = N[b]·N[b]ᵀ`, `[B,M,M]`.
pub fn affinity(nodes: &Tensor) -> Result<Tensor> {
    if nodes.shape().len() != 3 {
        return Err(Error::Dimension(format!(
            "affinity expects [B,M,D] nodes, got {:?}",
            nodes.shape()
        )));
    }
    nodes.batch_matmul(&nodes.transpose_last2()?)
}

/// Row-softmax of `[B,M,M]` affinities over the last axis.
pub fn attention_weights(a: &Tensor) -> Result<Tensor> {
    let s = a.shape().to_vec();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Dimension(format!(
            "attention_weights expects [B,M,M], got {s:?}"
        )));
    }
    a.reshape(&[s[0] * s[1], s[2]])?
        .softmax_rows()?
        .reshape(&s)
}

/// Refines nodes by their row-softmaxed affinities: each output node is a
/// convex combination of the M input nodes.
pub fn attend(a: &Tensor, nodes: &Tensor) -> Result<Tensor> {
    attention_weights(a)?.batch_matmul(nodes)
}

/// Builds the prior graph for a partition of `0..m`.
pub fn prior_affinity(groups: &[PriorGroup], m: usize) -> Result<PriorGraph> {
    if m < 2 {
        return Err(Error::Contract(format!(
            "prior_affinity: need at least 2 attributes, got {m}"
        )));
    }
    let mut owner = vec![None::<usize>; m];
    for (gi, g) in groups.iter().enumerate() {
        if g.members.is_empty() {
            return Err(Error::Contract(format!(
                "prior_affinity: group '{}' is empty",
                g.name
            )));
        }
        for &idx in &g.members {
            if idx >= m {
                return Err(Error::Contract(format!(
                    "prior_affinity: group '{}' references attribute {idx}, but M = {m}",
                    g.name
                )));
            }
            if owner[idx].is_some() {
                return Err(Error::Contract(format!(
                    "prior_affinity: attribute {idx} appears in more than one group"
                )));
            }
            owner[idx] = Some(gi);
        }
    }
    if let Some(missing) = owner.iter().position(|o| o.is_none()) {
        return Err(Error::Contract(format!(
            "prior_affinity: attribute {missing} is not assigned to any group"
        )));
    }
    let mut values = vec![0.0; m * m];
    for g in groups {
        let w = 1.0 / g.members.len() as f64;
        for &i in &g.members {
            for &j in &g.members {
                values[i * m + j] = w;
            }
        }
    }
    Ok(PriorGraph {
        groups: groups.to_vec(),
        affinity: Tensor::new(&[m, m], values)?,
    })
}

impl PriorGraph {
    pub fn m(&self) -> usize {
        self.affinity.shape()[0]
    }

    /// Constant `[B,M,M]` attention tensor (no gradient linkage).
    pub fn tiled(&self, batch: usize) -> Tensor {
        let m = self.m();
        let row = self.affinity.to_vec();
        let mut out = Vec::with_capacity(batch * m * m);
        for _ in 0..batch {
            out.extend_from_slice(&row);
        }
        Tensor::new(&[batch, m, m], out).expect("tile shape consistent")
    }
}

/// Full graph-attention pass: project features to nodes, derive the
/// attention weights (learned affinity or fixed prior), and recombine.
/// Returns `(refined_nodes [B,M,D], weights [B,M,M])`; weight rows sum
/// to 1 in both modes.
///
/// `scale_affinity` divides learned dot products by sqrt(D) before the
/// softmax (off by default at call sites; large D can otherwise saturate).
pub fn gal_forward(
    features: &[Tensor],
    proj_layers: &[Conv2dLayer],
    mode: GalMode,
    scale_affinity: bool,
) -> Result<(Tensor, Tensor)> {
    let nodes = project_to_nodes(features, proj_layers)?;
    let (batch, m, d) = (nodes.shape()[0], nodes.shape()[1], nodes.shape()[2]);
    match mode {
        GalMode::Learned => {
            let mut a = affinity(&nodes)?;
            if scale_affinity {
                a = a.mul_scalar(1.0 / (d as f64).sqrt());
            }
            let w = attention_weights(&a)?;
            let refined = w.batch_matmul(&nodes)?;
            Ok((refined, w))
        }
        GalMode::Prior(graph) => {
            if graph.m() != m {
                return Err(Error::Contract(format!(
                    "gal_forward: prior graph has {} attributes, features have {m}",
                    graph.m()
                )));
            }
            let w = graph.tiled(batch);
            let refined = w.batch_matmul(&nodes)?;
            Ok((refined, w))
        }
    }
}
