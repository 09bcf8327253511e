//! Identity, view and covariate conditioning signals.
//!
//! Identity enters the network as a token: the (possibly multi-hot) identity
//! weights select or sum rows of a learned table. View and covariate labels
//! are each embedded, projected to a `(C, 1, H, W)` slab and repeated over the
//! clip's frames; their sum is added to the noisy input.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::denoiser::layers::Linear;
use crate::denoiser::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityVector {
    weights: Vec<f64>,
    is_mixed: bool,
}

impl IdentityVector {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_mixed(&self) -> bool {
        self.is_mixed
    }

    pub fn n_ids(&self) -> usize {
        self.weights.len()
    }

    /// Indices with nonzero weight.
    pub fn active(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One-hot identity token.
pub fn make_identity(index: usize, n_ids: usize) -> Result<IdentityVector> {
    if index >= n_ids {
        return Err(Error::Parameter(format!("identity {index} outside [0, {n_ids})")));
    }
    let mut weights = vec![0.0; n_ids];
    weights[index] = 1.0;
    Ok(IdentityVector {
        weights,
        is_mixed: false,
    })
}

/// Multi-hot token activating several identities at once. With `normalize`
/// each active weight is `1 / k` instead of 1.
pub fn mix_identities(indices: &[usize], n_ids: usize, normalize: bool) -> Result<IdentityVector> {
    if indices.len() < 2 {
        return Err(Error::Parameter(format!(
            "mixing needs at least two identities, got {}",
            indices.len()
        )));
    }
    let unique: BTreeSet<usize> = indices.iter().copied().collect();
    if unique.len() != indices.len() {
        return Err(Error::Parameter(format!("duplicate identity in {indices:?}")));
    }
    if let Some(bad) = unique.iter().find(|&&i| i >= n_ids) {
        return Err(Error::Parameter(format!("identity {bad} outside [0, {n_ids})")));
    }
    let w = if normalize { 1.0 / indices.len() as f64 } else { 1.0 };
    let mut weights = vec![0.0; n_ids];
    for &i in indices {
        weights[i] = w;
    }
    Ok(IdentityVector {
        weights,
        is_mixed: true,
    })
}

/// Label vocabularies a model was trained with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub n_ids: usize,
    pub views: Vec<String>,
    pub covariates: Vec<String>,
}

impl Vocabulary {
    pub fn new(n_ids: usize, views: &[&str], covariates: &[&str]) -> Self {
        Self {
            n_ids,
            views: views.iter().map(|s| s.to_string()).collect(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_manifest(m: &crate::data::DatasetManifest) -> Self {
        Self {
            n_ids: m.n_ids,
            views: m.views.clone(),
            covariates: m.covariates.clone(),
        }
    }

    pub fn view_index(&self, label: &str) -> Result<usize> {
        self.views
            .iter()
            .position(|v| v == label)
            .ok_or_else(|| Error::Vocabulary {
                kind: "view",
                label: label.into(),
            })
    }

    pub fn covariate_index(&self, label: &str) -> Result<usize> {
        self.covariates
            .iter()
            .position(|v| v == label)
            .ok_or_else(|| Error::Vocabulary {
                kind: "covariate",
                label: label.into(),
            })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ids == 0 || self.views.is_empty() || self.covariates.is_empty() {
            return Err(Error::Config("vocabularies must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionBundle {
    pub identity: IdentityVector,
    pub view_label: String,
    pub covariate_label: String,
}

impl ConditionBundle {
    pub fn new(identity: IdentityVector, view: impl Into<String>, covariate: impl Into<String>) -> Self {
        Self {
            identity,
            view_label: view.into(),
            covariate_label: covariate.into(),
        }
    }

    pub fn check(&self, vocab: &Vocabulary) -> Result<()> {
        vocab.view_index(&self.view_label)?;
        vocab.covariate_index(&self.covariate_label)?;
        if self.identity.n_ids() != vocab.n_ids {
            return Err(Error::Parameter(format!(
                "identity vector has {} entries, model has {} ids",
                self.identity.n_ids(),
                vocab.n_ids
            )));
        }
        Ok(())
    }
}

/// Clip shape `(C, F, H, W)` without the batch axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipShape {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipShape {
    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }
}

fn one_hot(indices: &[usize], n: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0.0f64; indices.len() * n];
    for (row, &i) in indices.iter().enumerate() {
        data[row * n + i] = 1.0;
    }
    Ok(Tensor::from_vec(data, (indices.len(), n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Learned label table projected to a per-frame input slab.
#[derive(Debug, Clone)]
pub struct LabelEncoder {
    table: Tensor,
    proj: Linear,
    n_labels: usize,
    channels: usize,
    height: usize,
    width: usize,
}

impl LabelEncoder {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        n_labels: usize,
        embed_dim: usize,
        channels: usize,
        (height, width): (usize, usize),
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                table: pb.param("table", &[n_labels, embed_dim], Init::Normal(1.0))?,
                proj: Linear::new(pb, "proj", embed_dim, channels * height * width)?,
                n_labels,
                channels,
                height,
                width,
            })
        })
    }

    /// Encode a batch of label indices into `(B, C, F, H, W)`, constant along F.
    pub fn encode(&self, indices: &[usize], frames: usize) -> Result<Tensor> {
        if let Some(bad) = indices.iter().find(|&&i| i >= self.n_labels) {
            return Err(Error::Parameter(format!("label index {bad} >= {}", self.n_labels)));
        }
        let b = indices.len();
        let emb = one_hot(indices, self.n_labels, self.table.dtype())?.matmul(&self.table)?;
        let slab = self
            .proj
            .forward(&emb)?
            .reshape((b, self.channels, 1, self.height, self.width))?;
        Ok(slab
            .broadcast_as((b, self.channels, frames, self.height, self.width))?
            .contiguous()?)
    }
}

/// Identity rows; a token is the weight-combination of rows.
#[derive(Debug, Clone)]
pub struct IdentityEmbedding {
    table: Tensor,
}

impl IdentityEmbedding {
    pub fn new(pb: &mut ParamBuilder, name: &str, n_ids: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: pb.scoped(name, |pb| pb.param("table", &[n_ids, dim], Init::Normal(1.0)))?,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// `(B, D)` tokens for a batch of identity vectors.
    pub fn project(&self, ids: &[&IdentityVector]) -> Result<Tensor> {
        let n = self.table.dim(0)?;
        let mut data = Vec::with_capacity(ids.len() * n);
        for id in ids {
            if id.n_ids() != n {
                return Err(Error::Parameter(format!(
                    "identity vector has {} entries, table has {n}",
                    id.n_ids()
                )));
            }
            data.extend_from_slice(id.weights());
        }
        let w = Tensor::from_vec(data, (ids.len(), n), &Device::Cpu)?.to_dtype(self.table.dtype())?;
        Ok(w.matmul(&self.table)?)
    }
}

/// Encoders owned by the denoiser's parameter set.
#[derive(Debug, Clone)]
pub struct ConditionEncoders {
    pub view: LabelEncoder,
    pub covariate: LabelEncoder,
    pub identity: IdentityEmbedding,
    vocab: Vocabulary,
}

/// Encoded conditions for one clip.
#[derive(Debug, Clone)]
pub struct ConditionTensors {
    /// `(D_id,)`
    pub id_token: Tensor,
    /// `(C, F, H, W)`: view slab + covariate slab.
    pub input_bias: Tensor,
}

/// Batched counterpart of [`ConditionTensors`].
#[derive(Debug, Clone)]
pub struct BatchConditions {
    /// `(B, D_id)`
    pub id_tokens: Tensor,
    /// `(B, C, F, H, W)`
    pub input_bias: Tensor,
}

impl ConditionEncoders {
    pub fn new(
        pb: &mut ParamBuilder,
        vocab: &Vocabulary,
        label_dim: usize,
        id_dim: usize,
        channels: usize,
        frame_size: (usize, usize),
    ) -> Result<Self> {
        pb.scoped("cond", |pb| {
            Ok(Self {
                view: LabelEncoder::new(pb, "view", vocab.views.len(), label_dim, channels, frame_size)?,
                covariate: LabelEncoder::new(
                    pb,
                    "covariate",
                    vocab.covariates.len(),
                    label_dim,
                    channels,
                    frame_size,
                )?,
                identity: IdentityEmbedding::new(pb, "identity", vocab.n_ids, id_dim)?,
                vocab: vocab.clone(),
            })
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// `x_view` for a label: `(C, F, H, W)`.
    pub fn encode_view(&self, label: &str, shape: ClipShape) -> Result<Tensor> {
        let i = self.vocab.view_index(label)?;
        Ok(self.view.encode(&[i], shape.frames)?.squeeze(0)?)
    }

    /// `x_covariate` for a label: `(C, F, H, W)`.
    pub fn encode_covariate(&self, label: &str, shape: ClipShape) -> Result<Tensor> {
        let i = self.vocab.covariate_index(label)?;
        Ok(self.covariate.encode(&[i], shape.frames)?.squeeze(0)?)
    }

    pub fn build(&self, bundle: &ConditionBundle, shape: ClipShape) -> Result<ConditionTensors> {
        let batch = self.build_batch(std::slice::from_ref(bundle), shape)?;
        Ok(ConditionTensors {
            id_token: batch.id_tokens.squeeze(0)?,
            input_bias: batch.input_bias.squeeze(0)?,
        })
    }

    pub fn build_batch(&self, bundles: &[ConditionBundle], shape: ClipShape) -> Result<BatchConditions> {
        let mut views = Vec::with_capacity(bundles.len());
        let mut covs = Vec::with_capacity(bundles.len());
        for b in bundles {
            b.check(&self.vocab)?;
            views.push(self.vocab.view_index(&b.view_label)?);
            covs.push(self.vocab.covariate_index(&b.covariate_label)?);
        }
        let input_bias = (self.view.encode(&views, shape.frames)?
            + self.covariate.encode(&covs, shape.frames)?)?;
        let ids: Vec<&IdentityVector> = bundles.iter().map(|b| &b.identity).collect();
        Ok(BatchConditions {
            id_tokens: self.identity.project(&ids)?,
            input_bias,
        })
    }
}

/// Encode a bundle into the identity token and the additive input bias.
pub fn build_condition_tensors(
    encoders: &ConditionEncoders,
    bundle: &ConditionBundle,
    shape: ClipShape,
) -> Result<ConditionTensors> {
    encoders.build(bundle, shape)
}
