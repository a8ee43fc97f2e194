//! Descriptor selection and ensembling: turning per-token text features and
//! per-patch image features into one relevance map per class.
//!
//! The stages, in pipeline order:
//!
//! 1. [`select_text_features`] collapses each descriptor's token sequence to
//!    a single vector by taking the per-channel maximum over tokens, which
//!    keeps the strongest response each channel saw anywhere in the prompt.
//! 2. [`attention_map`] scores every descriptor against every image patch.
//! 3. [`select_image_features`] keeps, independently per channel, the `k`
//!    largest patch responses — a soft proxy for "what the image contains".
//! 4. [`fuse_descriptors`] relates the pooled image evidence back to the
//!    descriptors and softmax-weights them into one fused descriptor, so
//!    subclasses that the image actually exhibits dominate the ensemble and
//!    irrelevant ones are suppressed instead of averaged in.
//! 5. [`ensemble_attention`] scores the fused descriptor against the patches.
//! 6. [`mix_superclass`] blends the superclass map back in.
//!
//! [`alt_ensemble`] provides the simpler combination rules (mean, max,
//! image-conditioned cross attention) used for comparison runs.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{PatchImageFeatures, TokenTextFeatures};
use crate::real::Real;

/// One row per descriptor (the superclass and each subclass), one column per
/// embedding channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix<T: Real> {
    pub values: Array2<T>,
    pub descriptor_names: Vec<String>,
    /// Whether rows are L2-normalized. Informational; set by the ops that
    /// guarantee it.
    pub normalized: bool,
}

impl<T: Real> DescriptorMatrix<T> {
    pub fn new(values: Array2<T>, descriptor_names: Vec<String>) -> Result<Self> {
        let m = Self {
            values,
            descriptor_names,
            normalized: false,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.nrows() == 0 || self.values.ncols() == 0 {
            return Err(Error::ShapeMismatch("descriptor matrix is empty".into()));
        }
        if self.descriptor_names.len() != self.values.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} descriptor names for {} rows",
                self.descriptor_names.len(),
                self.values.nrows()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!(
                "descriptor matrix contains non-finite value {v:?}"
            )));
        }
        Ok(())
    }

    /// Copy with every row scaled to unit L2 norm. A zero row cannot be
    /// normalized and is reported with its descriptor name.
    pub fn normalized_rows(&self) -> Result<Self> {
        let values = normalize_rows(&self.values.view(), |i| {
            self.descriptor_names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("row {i}"))
        })?;
        Ok(Self {
            values,
            descriptor_names: self.descriptor_names.clone(),
            normalized: true,
        })
    }
}

/// Per-descriptor patch scores on the encoder's patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T: Real> {
    /// `[n_descriptors × n_patches]`.
    pub scores: Array2<T>,
    /// Patch grid `(rows, cols)`; `rows * cols` equals the patch count.
    pub grid: (usize, usize),
}

impl<T: Real> AttentionMap<T> {
    pub fn new(scores: Array2<T>, grid: (usize, usize)) -> Result<Self> {
        if grid.0 * grid.1 != scores.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{} does not cover {} patches",
                grid.0,
                grid.1,
                scores.ncols()
            )));
        }
        Ok(Self { scores, grid })
    }
}

pub(crate) fn normalize_rows<T: Real>(
    values: &ArrayView2<'_, T>,
    describe: impl Fn(usize) -> String,
) -> Result<Array2<T>> {
    let mut out = values.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if norm <= T::zero() || !norm.is_finite() {
            return Err(Error::DegenerateDescriptor(format!(
                "{} has zero norm and cannot be L2-normalized",
                describe(i)
            )));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

fn check_same_width<T: Real>(image: &ArrayView2<'_, T>, d: usize) -> Result<()> {
    if image.ncols() != d {
        return Err(Error::ShapeMismatch(format!(
            "image features have {} channels, text features have {d}",
            image.ncols()
        )));
    }
    Ok(())
}

/// Plain prompt-vs-patch similarity: each patch scored by the mean dot
/// product against the prompt's tokens. This is the no-subclass reference
/// the richer ensemble is measured against.
pub fn baseline_similarity<T: Real>(
    image: &ArrayView2<'_, T>,
    tokens: &ArrayView2<'_, T>,
) -> Result<Array1<T>> {
    if tokens.nrows() == 0 {
        return Err(Error::ShapeMismatch(
            "similarity needs at least one token".into(),
        ));
    }
    check_same_width(image, tokens.ncols())?;
    let m_t = T::from_usize(tokens.nrows()).expect("token count fits scalar");
    // [m_i × m_t] dots, then mean over tokens.
    let dots = image.dot(&tokens.t());
    Ok(dots.sum_axis(Axis(1)) / m_t)
}

/// Collapse token sequences to one vector per descriptor by per-channel max.
///
/// With padded token tensors, `valid_tokens` bounds the scan so padding rows
/// never win the max.
pub fn select_text_features<T: Real>(tokens: &TokenTextFeatures<T>) -> Result<DescriptorMatrix<T>> {
    tokens.validate()?;
    let (n, m_t, d) = tokens.values.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let m_valid = tokens.valid_tokens.as_ref().map_or(m_t, |v| v[i]);
        for c in 0..d {
            let mut best = tokens.values[[i, 0, c]];
            for j in 1..m_valid {
                let v = tokens.values[[i, j, c]];
                if v > best {
                    best = v;
                }
            }
            out[[i, c]] = best;
        }
    }
    DescriptorMatrix::new(out, tokens.descriptor_names.clone())
}

/// Score every descriptor against every patch: `scores[i][k] = <D_i, F_k>`.
///
/// With `normalize` set, rows of both operands are L2-normalized first, so
/// the scores are cosine similarities. Raw mode exists for callers that
/// already normalized (or deliberately want inner products).
pub fn attention_map<T: Real>(
    image: &PatchImageFeatures<T>,
    desc: &DescriptorMatrix<T>,
    normalize: bool,
) -> Result<AttentionMap<T>> {
    image.validate()?;
    desc.validate()?;
    check_same_width(&image.values.view(), desc.values.ncols())?;
    let scores = if normalize {
        let d = normalize_rows(&desc.values.view(), |i| format!("descriptor {i}"))?;
        let f = normalize_rows(&image.values.view(), |i| format!("patch {i}"))?;
        d.dot(&f.t())
    } else {
        desc.values.dot(&image.values.t())
    };
    AttentionMap::new(scores, image.grid)
}

/// Keep the `k` strongest patch responses per channel, sorted descending.
///
/// Channels are treated independently: row `r` of the result holds the
/// r-th largest value of each channel, generally drawn from different
/// patches. Ties keep patch order (the sort is stable), so the result is
/// deterministic.
pub fn select_image_features<T: Real>(image: &ArrayView2<'_, T>, k: usize) -> Result<Array2<T>> {
    let (m_i, d) = image.dim();
    if k == 0 || k > m_i {
        return Err(Error::InvalidParam(format!(
            "top-k of {k} is out of range for {m_i} patches"
        )));
    }
    let mut out = Array2::zeros((k, d));
    let mut column: Vec<T> = Vec::with_capacity(m_i);
    for c in 0..d {
        column.clear();
        column.extend(image.column(c).iter().copied());
        column.sort_by(|a, b| b.partial_cmp(a).expect("finite features"));
        for r in 0..k {
            out[[r, c]] = column[r];
        }
    }
    Ok(out)
}

/// Everything [`fuse_descriptors`] computes, kept for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace<T: Real> {
    /// Column mean of the top-k patch responses, one entry per channel.
    pub i_pool: Array1<T>,
    /// `relation[i][c] = i_pool[c] * D_i[c]`.
    pub relation: Array2<T>,
    /// Per-descriptor maximum over channels of `relation`.
    pub row_max: Array1<T>,
    /// `softmax(row_max)`; sums to one.
    pub weights: Array1<T>,
    /// Weighted sum of the descriptor rows.
    pub fused: Array1<T>,
}

/// Numerically safe softmax (max-shifted).
pub fn softmax_weights<T: Real>(scores: &ArrayView1<'_, T>) -> Result<Array1<T>> {
    if scores.is_empty() {
        return Err(Error::ShapeMismatch("softmax of empty score vector".into()));
    }
    let max = scores
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps = scores.mapv(|v| (v - max).exp());
    let total = exps.sum();
    Ok(exps / total)
}

/// Weight descriptors by how strongly the image supports them and collapse
/// the matrix into one fused descriptor.
///
/// The image evidence is the column mean of the top-`k` patch responses per
/// channel ([`select_image_features`]); each descriptor's support is the
/// best channel of its channel-wise product with that pool. Taking the max
/// rather than the full dot product means a descriptor must align with some
/// strong direction of the image, not merely spread mass across many — that
/// is what keeps loosely related subclasses from hijacking the ensemble.
pub fn fuse_descriptors<T: Real>(
    image: &ArrayView2<'_, T>,
    desc: &DescriptorMatrix<T>,
    k: usize,
    normalize: bool,
) -> Result<FusionTrace<T>> {
    desc.validate()?;
    check_same_width(image, desc.values.ncols())?;
    let (desc_values, image_values);
    let (desc_view, image_view) = if normalize {
        desc_values = normalize_rows(&desc.values.view(), |i| {
            desc.descriptor_names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("descriptor {i}"))
        })?;
        image_values = normalize_rows(&image.view(), |i| format!("patch {i}"))?;
        (desc_values.view(), image_values.view())
    } else {
        (desc.values.view(), image.view())
    };

    let top = select_image_features(&image_view, k)?;
    let i_pool = top
        .mean_axis(Axis(0))
        .expect("top-k selection is never empty");

    let relation = &desc_view * &i_pool; // broadcast over rows
    let row_max = relation.map_axis(Axis(1), |row| {
        row.iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    });
    let weights = softmax_weights(&row_max.view())?;

    let mut fused = Array1::zeros(desc_view.ncols());
    for (i, row) in desc_view.rows().into_iter().enumerate() {
        fused += &(&row * weights[i]);
    }

    Ok(FusionTrace {
        i_pool,
        relation,
        row_max,
        weights,
        fused,
    })
}

/// Patch scores of a single fused descriptor.
pub fn ensemble_attention<T: Real>(
    image: &ArrayView2<'_, T>,
    fused: &ArrayView1<'_, T>,
) -> Result<Array1<T>> {
    check_same_width(image, fused.len())?;
    Ok(image.dot(fused))
}

/// Convex blend of the superclass map and the subclass-ensemble map:
/// `lambda * superclass + (1 - lambda) * subclass`, elementwise.
///
/// Callers normalize both maps to `[0, 1]` first so the blend weight means
/// the same thing everywhere. At `lambda` 0 or 1 the result is bit-identical
/// to the surviving operand.
pub fn mix_superclass<T: Real>(
    a_super: &ArrayView1<'_, T>,
    a_sub: &ArrayView1<'_, T>,
    lambda: T,
) -> Result<Array1<T>> {
    if lambda < T::zero() || lambda > T::one() {
        return Err(Error::InvalidParam(format!(
            "superclass mix weight {lambda} is outside [0, 1]"
        )));
    }
    if a_super.len() != a_sub.len() {
        return Err(Error::ShapeMismatch(format!(
            "mixing maps of lengths {} and {}",
            a_super.len(),
            a_sub.len()
        )));
    }
    let inv = T::one() - lambda;
    Ok(a_super
        .iter()
        .zip(a_sub.iter())
        .map(|(&s, &b)| lambda * s + inv * b)
        .collect())
}

/// Elementwise mean of per-template descriptor matrices.
///
/// All matrices must agree on shape and descriptor name order. With
/// `renormalize`, rows of the mean are rescaled to unit norm (averaging
/// unit vectors shortens them); a zero mean row is an error, since it would
/// otherwise silently score everything as zero.
pub fn average_over_templates<T: Real>(
    matrices: &[DescriptorMatrix<T>],
    renormalize: bool,
) -> Result<DescriptorMatrix<T>> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::InvalidParam("no descriptor matrices to average".into()))?;
    first.validate()?;
    let dim = first.values.dim();
    let mut acc = Array2::<T>::zeros(dim);
    for m in matrices {
        m.validate()?;
        if m.values.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "descriptor matrices disagree on shape: {:?} vs {dim:?}",
                m.values.dim()
            )));
        }
        if m.descriptor_names != first.descriptor_names {
            return Err(Error::ShapeMismatch(
                "descriptor matrices disagree on names or order".into(),
            ));
        }
        acc += &m.values;
    }
    let count = T::from_usize(matrices.len()).expect("matrix count fits scalar");
    acc.mapv_inplace(|v| v / count);

    let mut out = DescriptorMatrix {
        values: acc,
        descriptor_names: first.descriptor_names.clone(),
        normalized: false,
    };
    if renormalize {
        out = out.normalized_rows()?;
    }
    Ok(out)
}

/// Comparison ensembling rules over per-descriptor maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMethod {
    /// The fused-descriptor path ([`fuse_descriptors`] + [`ensemble_attention`]).
    Fused,
    /// Unweighted mean of the per-descriptor maps.
    Average,
    /// Maps weighted by softmax of each descriptor's full dot product with
    /// the pooled image evidence.
    CrossAttention,
    /// Per-patch maximum over descriptors.
    MaxSimilarity,
}

impl fmt::Display for EnsembleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleMethod::Fused => "fused",
            EnsembleMethod::Average => "average",
            EnsembleMethod::CrossAttention => "cross_attention",
            EnsembleMethod::MaxSimilarity => "max_similarity",
        })
    }
}

impl std::str::FromStr for EnsembleMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(EnsembleMethod::Fused),
            "average" => Ok(EnsembleMethod::Average),
            "cross_attention" => Ok(EnsembleMethod::CrossAttention),
            "max_similarity" => Ok(EnsembleMethod::MaxSimilarity),
            other => Err(Error::InvalidParam(format!(
                "unknown ensemble method {other:?} (expected fused, average, cross_attention, or max_similarity)"
            ))),
        }
    }
}

/// Combine per-descriptor maps with one of the comparison rules.
///
/// `image` and `desc` are only consulted by `cross_attention`, which needs
/// the pooled image evidence; `k` is its top-k pool size. The fused-descriptor
/// method has its own entry points and is rejected here.
pub fn alt_ensemble<T: Real>(
    method: EnsembleMethod,
    image: &ArrayView2<'_, T>,
    desc: &DescriptorMatrix<T>,
    maps: &AttentionMap<T>,
    k: usize,
) -> Result<Array1<T>> {
    if maps.scores.nrows() != desc.values.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} attention rows for {} descriptors",
            maps.scores.nrows(),
            desc.values.nrows()
        )));
    }
    match method {
        EnsembleMethod::Fused => Err(Error::InvalidParam(
            "the fused-descriptor method is not an alternative rule; call fuse_descriptors".into(),
        )),
        EnsembleMethod::Average => maps
            .scores
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::ShapeMismatch("no attention rows to average".into())),
        EnsembleMethod::MaxSimilarity => Ok(maps.scores.map_axis(Axis(0), |col| {
            col.iter()
                .copied()
                .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
        })),
        EnsembleMethod::CrossAttention => {
            let top = select_image_features(image, k)?;
            let i_pool = top.mean_axis(Axis(0)).expect("non-empty top-k");
            let support = desc.values.dot(&i_pool);
            let weights = softmax_weights(&support.view())?;
            let mut out = Array1::zeros(maps.scores.ncols());
            for (i, row) in maps.scores.rows().into_iter().enumerate() {
                out += &(&row * weights[i]);
            }
            Ok(out)
        }
    }
}

/// Knobs for the ensemble stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Superclass blend weight in `[0, 1]`.
    pub lambda_super: f64,
    pub method: EnsembleMethod,
    /// L2-normalize descriptor and patch rows before similarity scoring.
    pub normalize_features: bool,
    /// Patches pooled per channel when relating image evidence to descriptors.
    pub top_k_image: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            lambda_super: 0.2,
            method: EnsembleMethod::Fused,
            normalize_features: true,
            top_k_image: 5,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_super) {
            return Err(Error::InvalidParam(format!(
                "lambda_super {} is outside [0, 1]",
                self.lambda_super
            )));
        }
        if self.top_k_image == 0 {
            return Err(Error::InvalidParam("top_k_image must be at least 1".into()));
        }
        Ok(())
    }
}
