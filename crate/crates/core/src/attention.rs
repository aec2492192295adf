//! Multi-modal attention with an explicit text/image/video key partition and
//! group-targeted query/key scaling.
//!
//! Scaling multiplies embedding rows, never logits. That each scaled key
//! group's logit columns come out multiplied by the same factor is a checked
//! consequence (see the tests), not the mechanism.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numkernel::{row_softmax, Matrix};
use crate::scalar::{logistic, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenGroup {
    Text,
    Image,
    Video,
}

impl TokenGroup {
    pub const ALL: [TokenGroup; 3] = [TokenGroup::Text, TokenGroup::Image, TokenGroup::Video];

    pub fn name(self) -> &'static str {
        match self {
            TokenGroup::Text => "text",
            TokenGroup::Image => "image",
            TokenGroup::Video => "video",
        }
    }

    pub fn is_conditioning(self) -> bool {
        !matches!(self, TokenGroup::Video)
    }
}

impl fmt::Display for TokenGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Disjoint partition of key indices `0..len` into text, image and video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct KeyPartition {
    text: Vec<usize>,
    image: Vec<usize>,
    video: Vec<usize>,
    owner: Vec<TokenGroup>,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    text: Vec<usize>,
    image: Vec<usize>,
    video: Vec<usize>,
}

impl TryFrom<PartitionRepr> for KeyPartition {
    type Error = Error;
    fn try_from(r: PartitionRepr) -> Result<Self> {
        KeyPartition::new(r.text, r.image, r.video)
    }
}

impl From<KeyPartition> for PartitionRepr {
    fn from(p: KeyPartition) -> Self {
        PartitionRepr { text: p.text, image: p.image, video: p.video }
    }
}

impl KeyPartition {
    pub fn new(mut text: Vec<usize>, mut image: Vec<usize>, mut video: Vec<usize>) -> Result<Self> {
        text.sort_unstable();
        image.sort_unstable();
        video.sort_unstable();
        let len = text.len() + image.len() + video.len();
        if len == 0 {
            return Err(Error::InvalidPartition("partition covers no keys".into()));
        }
        let mut owner: Vec<Option<TokenGroup>> = vec![None; len];
        for (group, set) in [(TokenGroup::Text, &text), (TokenGroup::Image, &image), (TokenGroup::Video, &video)] {
            for &j in set {
                if j >= len {
                    return Err(Error::InvalidPartition(format!(
                        "index {j} outside 0..{len}; groups must cover 0..m exactly"
                    )));
                }
                if let Some(prev) = owner[j] {
                    return Err(Error::InvalidPartition(format!("index {j} is in both {prev} and {group}")));
                }
                owner[j] = Some(group);
            }
        }
        // Disjoint and in range with the right count means every index is owned.
        let owner = owner.into_iter().map(|o| o.expect("covered")).collect();
        Ok(Self { text, image, video, owner })
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn indices(&self, group: TokenGroup) -> &[usize] {
        match group {
            TokenGroup::Text => &self.text,
            TokenGroup::Image => &self.image,
            TokenGroup::Video => &self.video,
        }
    }

    pub fn group_of(&self, key: usize) -> TokenGroup {
        self.owner[key]
    }

    /// Text and image keys, ascending.
    pub fn conditioning(&self) -> Vec<usize> {
        self.union(GroupFlags { text: true, image: true, video: false })
    }

    /// Keys belonging to any flagged group, ascending.
    pub fn union(&self, flags: GroupFlags) -> Vec<usize> {
        (0..self.len()).filter(|&j| flags.get(self.owner[j])).collect()
    }

    pub(crate) fn check_keys(&self, m: usize, context: &'static str) -> Result<()> {
        if m != self.len() {
            return Err(Error::DimensionMismatch {
                context,
                expected: format!("{} keys (partition size)", self.len()),
                found: format!("{m} keys"),
            });
        }
        Ok(())
    }
}

/// Contiguous text, image, video layout.
pub fn build_partition(n_text: usize, n_img: usize, n_vid: usize) -> Result<KeyPartition> {
    let text = (0..n_text).collect();
    let image = (n_text..n_text + n_img).collect();
    let video = (n_text + n_img..n_text + n_img + n_vid).collect();
    KeyPartition::new(text, image, video)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupFlags {
    #[serde(default)]
    pub text: bool,
    #[serde(default)]
    pub image: bool,
    #[serde(default)]
    pub video: bool,
}

impl GroupFlags {
    pub const NONE: GroupFlags = GroupFlags { text: false, image: false, video: false };
    pub const CONDITIONING: GroupFlags = GroupFlags { text: true, image: true, video: false };

    pub fn only(group: TokenGroup) -> Self {
        Self::NONE.with(group)
    }

    pub fn with(mut self, group: TokenGroup) -> Self {
        self.set(group, true);
        self
    }

    pub fn get(self, group: TokenGroup) -> bool {
        match group {
            TokenGroup::Text => self.text,
            TokenGroup::Image => self.image,
            TokenGroup::Video => self.video,
        }
    }

    pub fn set(&mut self, group: TokenGroup, on: bool) {
        match group {
            TokenGroup::Text => self.text = on,
            TokenGroup::Image => self.image = on,
            TokenGroup::Video => self.video = on,
        }
    }

    pub fn any(self) -> bool {
        self.text || self.image || self.video
    }

    pub fn union(self, other: Self) -> Self {
        Self { text: self.text || other.text, image: self.image || other.image, video: self.video || other.video }
    }
}

/// Which groups have their queries and/or keys scaled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingTargets {
    #[serde(default)]
    pub query: GroupFlags,
    #[serde(default)]
    pub key: GroupFlags,
}

impl ScalingTargets {
    pub fn keys(key: GroupFlags) -> Self {
        Self { query: GroupFlags::NONE, key }
    }

    /// Checks the per-architecture constraints.
    ///
    /// Factorized attention keeps the query/key distinction per stream, so a
    /// stream may scale its queries or its keys, never both.
    pub fn validate(&self, arch: ArchMode) -> Result<()> {
        if arch == ArchMode::FactorizedCrossAttention {
            for g in TokenGroup::ALL {
                if self.query.get(g) && self.key.get(g) {
                    return Err(invalid(format!(
                        "stream {g} scales both queries and keys; factorized attention allows one per stream"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Joint attention folds query-side flags onto the matching key group,
    /// since one fused softmax makes the two equivalent.
    pub fn normalized(self, arch: ArchMode) -> Self {
        match arch {
            ArchMode::JointSelfAttention => Self::keys(self.key.union(self.query)),
            ArchMode::FactorizedCrossAttention => self,
        }
    }

    /// Every group whose logits the targets affect.
    pub fn affected(&self) -> GroupFlags {
        self.query.union(self.key)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchMode {
    /// One fused self-attention over concatenated text, image and video tokens.
    #[default]
    JointSelfAttention,
    /// Video self-attention plus separate text and image cross-attention streams.
    FactorizedCrossAttention,
}

impl fmt::Display for ArchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchMode::JointSelfAttention => "joint_self_attention",
            ArchMode::FactorizedCrossAttention => "factorized_cross_attention",
        })
    }
}

/// Named scaling positions evaluated for the two architecture families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScalingPosition {
    #[serde(rename = "Key-image")]
    KeyImage,
    #[serde(rename = "Key-text")]
    KeyText,
    #[serde(rename = "Key-image and Key-text")]
    KeyImageKeyText,
    #[serde(rename = "Key in Self-attention")]
    KeySelfAttention,
    #[serde(rename = "Query-image")]
    QueryImage,
    #[serde(rename = "Query-text")]
    QueryText,
    #[serde(rename = "Key-image and Query-text")]
    KeyImageQueryText,
    #[serde(rename = "Query-image and Key-text")]
    QueryImageKeyText,
}

impl ScalingPosition {
    pub const ALL: [ScalingPosition; 8] = [
        ScalingPosition::KeyImage,
        ScalingPosition::KeyText,
        ScalingPosition::KeyImageKeyText,
        ScalingPosition::KeySelfAttention,
        ScalingPosition::QueryImage,
        ScalingPosition::QueryText,
        ScalingPosition::KeyImageQueryText,
        ScalingPosition::QueryImageKeyText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScalingPosition::KeyImage => "Key-image",
            ScalingPosition::KeyText => "Key-text",
            ScalingPosition::KeyImageKeyText => "Key-image and Key-text",
            ScalingPosition::KeySelfAttention => "Key in Self-attention",
            ScalingPosition::QueryImage => "Query-image",
            ScalingPosition::QueryText => "Query-text",
            ScalingPosition::KeyImageQueryText => "Key-image and Query-text",
            ScalingPosition::QueryImageKeyText => "Query-image and Key-text",
        }
    }

    fn flags(self) -> ScalingTargets {
        use TokenGroup::*;
        let (query, key) = match self {
            ScalingPosition::KeyImage => (GroupFlags::NONE, GroupFlags::only(Image)),
            ScalingPosition::KeyText => (GroupFlags::NONE, GroupFlags::only(Text)),
            ScalingPosition::KeyImageKeyText => (GroupFlags::NONE, GroupFlags::CONDITIONING),
            ScalingPosition::KeySelfAttention => (GroupFlags::NONE, GroupFlags::only(Video)),
            ScalingPosition::QueryImage => (GroupFlags::only(Image), GroupFlags::NONE),
            ScalingPosition::QueryText => (GroupFlags::only(Text), GroupFlags::NONE),
            ScalingPosition::KeyImageQueryText => (GroupFlags::only(Text), GroupFlags::only(Image)),
            ScalingPosition::QueryImageKeyText => (GroupFlags::only(Image), GroupFlags::only(Text)),
        };
        ScalingTargets { query, key }
    }

    /// Positions that exist for an architecture. Joint attention has no
    /// separate query streams, so only key-side conditioning positions apply.
    pub fn valid_for(self, arch: ArchMode) -> bool {
        match arch {
            ArchMode::JointSelfAttention => matches!(
                self,
                ScalingPosition::KeyImage | ScalingPosition::KeyText | ScalingPosition::KeyImageKeyText
            ),
            ArchMode::FactorizedCrossAttention => true,
        }
    }
}

impl fmt::Display for ScalingPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScalingPosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = |x: &str| x.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        let wanted = norm(s);
        ScalingPosition::ALL
            .into_iter()
            .find(|p| norm(p.name()) == wanted)
            .ok_or_else(|| invalid(format!("unknown scaling position {s:?}")))
    }
}

pub fn resolve_targets(arch: ArchMode, position: ScalingPosition) -> Result<ScalingTargets> {
    if !position.valid_for(arch) {
        return Err(Error::InvalidPosition { position: position.name().into(), arch: arch.to_string() });
    }
    let targets = position.flags();
    targets.validate(arch)?;
    Ok(targets.normalized(arch))
}

#[derive(Debug, Clone)]
pub struct AttentionResult<T> {
    pub output: Matrix<T>,
    pub probabilities: Matrix<T>,
    pub logits: Matrix<T>,
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn attention_forward<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, d_k: usize) -> Result<AttentionResult<T>> {
    if q.cols() != d_k || k.cols() != d_k {
        return Err(Error::DimensionMismatch {
            context: "attention_forward",
            expected: format!("Q and K with d_k = {d_k} columns"),
            found: format!("Q {}x{}, K {}x{}", q.rows(), q.cols(), k.rows(), k.cols()),
        });
    }
    if v.rows() != k.rows() {
        return Err(Error::DimensionMismatch {
            context: "attention_forward",
            expected: format!("V with {} rows (one per key)", k.rows()),
            found: format!("V {}x{}", v.rows(), v.cols()),
        });
    }
    if k.rows() == 0 {
        return Err(Error::Empty("attention keys"));
    }
    let inv_sqrt_d = T::one() / T::count(d_k).sqrt();
    let logits = q.matmul_transposed(k)?.scale(inv_sqrt_d);
    let probabilities = row_softmax(&logits)?;
    let output = probabilities.matmul(v)?;
    Ok(AttentionResult { output, probabilities, logits })
}

/// Queries as seen by each key stream.
#[derive(Debug, Clone)]
pub enum QueryStreams<T> {
    /// One query matrix against every key (joint attention).
    Shared(Matrix<T>),
    /// A query matrix per conditioning/self-attention stream.
    PerStream { text: Matrix<T>, image: Matrix<T>, video: Matrix<T> },
}

impl<T: Scalar> QueryStreams<T> {
    pub fn for_group(&self, group: TokenGroup) -> &Matrix<T> {
        match self {
            QueryStreams::Shared(q) => q,
            QueryStreams::PerStream { text, image, video } => match group {
                TokenGroup::Text => text,
                TokenGroup::Image => image,
                TokenGroup::Video => video,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScaledProjections<T> {
    pub queries: QueryStreams<T>,
    pub keys: Matrix<T>,
    /// Scalar multiplications spent applying the scaling.
    pub multiplications: u64,
}

fn check_gamma<T: Scalar>(gamma: T) -> Result<()> {
    if !(gamma > T::zero()) || !gamma.is_finite() {
        return Err(invalid(format!("scaling coefficient must be finite and > 0, got {gamma}")));
    }
    Ok(())
}

/// Multiplies the flagged key groups' rows of `K`, and in factorized mode the
/// flagged streams' queries, by `gamma`. Rows that are not targeted are copied
/// bit for bit.
pub fn apply_group_scaling<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    partition: &KeyPartition,
    targets: &ScalingTargets,
    gamma: T,
    arch: ArchMode,
) -> Result<ScaledProjections<T>> {
    check_gamma(gamma)?;
    partition.check_keys(k.rows(), "apply_group_scaling")?;
    targets.validate(arch)?;
    let targets = targets.normalized(arch);

    let mut multiplications = 0u64;
    let mut keys = k.clone();
    for g in TokenGroup::ALL.into_iter().filter(|&g| targets.key.get(g)) {
        let rows = partition.indices(g);
        if rows.is_empty() {
            log::warn!("key scaling requested for empty {g} group; ignored");
            continue;
        }
        for &r in rows {
            for x in keys.row_mut(r) {
                *x *= gamma;
            }
        }
        multiplications += (rows.len() * k.cols()) as u64;
    }

    let queries = match arch {
        ArchMode::JointSelfAttention => QueryStreams::Shared(q.clone()),
        ArchMode::FactorizedCrossAttention => {
            let mut stream = |g: TokenGroup| {
                if !targets.query.get(g) {
                    return q.clone();
                }
                if partition.indices(g).is_empty() {
                    log::warn!("query scaling requested for empty {g} stream; ignored");
                    return q.clone();
                }
                multiplications += (q.rows() * q.cols()) as u64;
                q.scale(gamma)
            };
            let text = stream(TokenGroup::Text);
            let image = stream(TokenGroup::Image);
            let video = stream(TokenGroup::Video);
            QueryStreams::PerStream { text, image, video }
        }
    };
    Ok(ScaledProjections { queries, keys, multiplications })
}

/// Factorized attention: one softmax per non-empty key stream, outputs summed.
#[derive(Debug, Clone)]
pub struct StreamedAttention<T> {
    pub streams: Vec<(TokenGroup, AttentionResult<T>)>,
    pub output: Matrix<T>,
}

pub fn factorized_forward<T: Scalar>(
    queries: &QueryStreams<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    partition: &KeyPartition,
    d_k: usize,
) -> Result<StreamedAttention<T>> {
    partition.check_keys(k.rows(), "factorized_forward")?;
    if v.rows() != k.rows() {
        return Err(Error::DimensionMismatch {
            context: "factorized_forward",
            expected: format!("V with {} rows", k.rows()),
            found: format!("V {}x{}", v.rows(), v.cols()),
        });
    }
    let n = queries.for_group(TokenGroup::Video).rows();
    let mut output = Matrix::zeros(n, v.cols());
    let mut streams = Vec::new();
    for g in TokenGroup::ALL {
        let idx = partition.indices(g);
        if idx.is_empty() {
            continue;
        }
        let res = attention_forward(queries.for_group(g), &k.select_rows(idx), &v.select_rows(idx), d_k)?;
        output = output.add(&res.output)?;
        streams.push((g, res));
    }
    Ok(StreamedAttention { streams, output })
}

/// Attention computed under either architecture.
#[derive(Debug, Clone)]
pub enum BlockAttention<T> {
    Joint(AttentionResult<T>),
    Factorized(StreamedAttention<T>),
}

impl<T: Scalar> BlockAttention<T> {
    pub fn output(&self) -> &Matrix<T> {
        match self {
            BlockAttention::Joint(r) => &r.output,
            BlockAttention::Factorized(s) => &s.output,
        }
    }

    /// Attention weights over all keys, in partition order.
    ///
    /// Joint attention returns its probabilities. Factorized attention returns
    /// each stream's distribution scaled by `1 / #streams`, which keeps rows
    /// stochastic and weights every stream equally, as the summed output does.
    pub fn effective_probabilities(&self, partition: &KeyPartition) -> Matrix<T> {
        match self {
            BlockAttention::Joint(r) => r.probabilities.clone(),
            BlockAttention::Factorized(s) => {
                let n = s.output.rows();
                let w = T::one() / T::count(s.streams.len());
                let mut p = Matrix::zeros(n, partition.len());
                for (g, res) in &s.streams {
                    for (c, &key) in partition.indices(*g).iter().enumerate() {
                        for i in 0..n {
                            p.set(i, key, res.probabilities.get(i, c) * w);
                        }
                    }
                }
                p
            }
        }
    }
}

/// Runs attention on already-scaled projections for the given architecture.
pub fn attend<T: Scalar>(
    scaled: &ScaledProjections<T>,
    v: &Matrix<T>,
    partition: &KeyPartition,
    d_k: usize,
    arch: ArchMode,
) -> Result<BlockAttention<T>> {
    match arch {
        ArchMode::JointSelfAttention => {
            let q = scaled.queries.for_group(TokenGroup::Video);
            partition.check_keys(scaled.keys.rows(), "attend")?;
            attention_forward(q, &scaled.keys, v, d_k).map(BlockAttention::Joint)
        }
        ArchMode::FactorizedCrossAttention => {
            factorized_forward(&scaled.queries, &scaled.keys, v, partition, d_k).map(BlockAttention::Factorized)
        }
    }
}

/// Plain (unmodulated) attention for either architecture.
pub fn attend_plain<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    partition: &KeyPartition,
    d_k: usize,
    arch: ArchMode,
) -> Result<BlockAttention<T>> {
    match arch {
        ArchMode::JointSelfAttention => {
            partition.check_keys(k.rows(), "attend_plain")?;
            attention_forward(q, k, v, d_k).map(BlockAttention::Joint)
        }
        ArchMode::FactorizedCrossAttention => {
            factorized_forward(&QueryStreams::Shared(q.clone()), k, v, partition, d_k).map(BlockAttention::Factorized)
        }
    }
}

/// Default ceiling of the energy-based coefficient.
pub const DEFAULT_GAMMA_MAX: f64 = 1.5;
/// Default logit-mean scale of the energy-based coefficient.
pub const DEFAULT_KAPPA: f64 = 1.0;

/// Energy-based coefficient `1 + (gamma_max - 1) * logistic(-mean(logits) / kappa)`.
///
/// Diffuse (low mean) logits push the coefficient towards `gamma_max`; sharp
/// ones towards 1.
pub fn energy_gamma<T: Scalar>(logits: &Matrix<T>, gamma_max: T, kappa: T) -> Result<T> {
    if logits.data().is_empty() {
        return Err(Error::Empty("energy_gamma logits"));
    }
    let mean = logits.data().iter().copied().sum::<T>() / T::count(logits.data().len());
    energy_gamma_from_mean(mean, gamma_max, kappa)
}

pub fn energy_gamma_from_mean<T: Scalar>(mean: T, gamma_max: T, kappa: T) -> Result<T> {
    if !(gamma_max >= T::one()) || !gamma_max.is_finite() {
        return Err(invalid(format!("gamma_max must be >= 1, got {gamma_max}")));
    }
    if !(kappa > T::zero()) || !kappa.is_finite() {
        return Err(invalid(format!("kappa must be > 0, got {kappa}")));
    }
    if mean.is_nan() {
        return Err(Error::NonFiniteLogits);
    }
    Ok(T::one() + (gamma_max - T::one()) * logistic(-mean / kappa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{sample_gaussian, Seed};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn contiguous_partitions() {
        let p = build_partition(3, 4, 5).unwrap();
        assert_eq!(p.indices(TokenGroup::Text), &[0, 1, 2]);
        assert_eq!(p.indices(TokenGroup::Image), &[3, 4, 5, 6]);
        assert_eq!(p.indices(TokenGroup::Video), &[7, 8, 9, 10, 11]);
        let v = build_partition(0, 0, 5).unwrap();
        assert_eq!(v.indices(TokenGroup::Video), &[0, 1, 2, 3, 4]);
        assert!(v.indices(TokenGroup::Text).is_empty());
        let s = build_partition(1, 1, 1).unwrap();
        assert_eq!(s.group_of(1), TokenGroup::Image);
        assert!(build_partition(0, 0, 0).is_err());
    }

    #[test]
    fn partition_validation() {
        assert!(KeyPartition::new(vec![0, 1], vec![1], vec![2]).is_err());
        assert!(KeyPartition::new(vec![0], vec![5], vec![2]).is_err());
        let p = KeyPartition::new(vec![2], vec![0], vec![1]).unwrap();
        assert_eq!(p.conditioning(), vec![0, 2]);
        let json = serde_json::to_string(&p).unwrap();
        let back: KeyPartition = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<KeyPartition>(r#"{"text":[0],"image":[0],"video":[]}"#).is_err());
    }

    #[test]
    fn single_key_attention() {
        let one = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let r = attention_forward(&one, &one, &one, 1).unwrap();
        assert_eq!(r.output.data(), &[1.0]);
        assert_eq!(r.probabilities.data(), &[1.0]);
    }

    #[test]
    fn two_key_attention() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Matrix::<f64>::identity(2);
        // d_k = 1 reads raw logits [1, 0]; use a 1-wide slice of the problem.
        let r = attention_forward(&q, &k, &Matrix::identity(2), 2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(r.logits.get(0, 0), s, epsilon = 1e-15);
        let q1 = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let k1 = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let r1 = attention_forward(&q1, &k1, &Matrix::identity(2), 1).unwrap();
        assert_abs_diff_eq!(r1.probabilities.get(0, 0), 0.731_058_578_630_004_9, epsilon = 1e-12);
        assert_abs_diff_eq!(r1.probabilities.get(0, 1), 0.268_941_421_369_995_1, epsilon = 1e-12);
        assert_eq!(r1.output.data(), r1.probabilities.data());
    }

    #[test]
    fn orthogonal_query_gives_uniform_row() {
        let q = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![-3.0, 0.0]]).unwrap();
        let v = Matrix::<f64>::identity(3);
        let r = attention_forward(&q, &k, &v, 2).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(r.probabilities.get(0, j), 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn dimension_errors_name_the_shapes() {
        let q = Matrix::<f64>::zeros(2, 3);
        let k = Matrix::<f64>::zeros(4, 2);
        let err = attention_forward(&q, &k, &Matrix::zeros(4, 1), 3).unwrap_err();
        assert!(err.to_string().contains("Q 2x3, K 4x2"), "{err}");
        let err = attention_forward(&q, &Matrix::zeros(4, 3), &Matrix::zeros(5, 1), 3).unwrap_err();
        assert!(err.to_string().contains("V 5x1"), "{err}");
    }

    fn random_qkv(seed: u64, n: usize, m: usize, d: usize) -> (Matrix<f64>, Matrix<f64>, Matrix<f64>) {
        let s = Seed(seed);
        (
            sample_gaussian(n, d, s.derive(0), 0.0, 1.0).unwrap(),
            sample_gaussian(m, d, s.derive(1), 0.0, 1.0).unwrap(),
            sample_gaussian(m, 3, s.derive(2), 0.0, 1.0).unwrap(),
        )
    }

    #[test]
    fn unit_gamma_is_bit_identical() {
        let (q, k, _) = random_qkv(1, 4, 9, 5);
        let p = build_partition(2, 3, 4).unwrap();
        for arch in [ArchMode::JointSelfAttention, ArchMode::FactorizedCrossAttention] {
            let t = ScalingTargets { query: GroupFlags::only(TokenGroup::Image), key: GroupFlags::only(TokenGroup::Text) };
            let s = apply_group_scaling(&q, &k, &p, &t, 1.0, arch).unwrap();
            assert!(s.keys.data().iter().zip(k.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            for g in TokenGroup::ALL {
                let qs = s.queries.for_group(g);
                assert!(qs.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn default_configuration_scales_conditioning_keys() {
        let targets = resolve_targets(ArchMode::JointSelfAttention, ScalingPosition::KeyImageKeyText).unwrap();
        assert_eq!(targets.key, GroupFlags::CONDITIONING);
        let (q, k, _) = random_qkv(2, 3, 9, 4);
        let p = build_partition(2, 3, 4).unwrap();
        let s = apply_group_scaling(&q, &k, &p, &targets, 1.35, ArchMode::JointSelfAttention).unwrap();
        for j in 0..9 {
            let factor = if j < 5 { 1.35 } else { 1.0 };
            for c in 0..4 {
                assert_eq!(s.keys.get(j, c), k.get(j, c) * factor);
            }
        }
        assert_eq!(s.multiplications, 5 * 4);
    }

    #[test]
    fn scaling_a_key_group_scales_its_logit_columns() {
        let (q, k, v) = random_qkv(3, 5, 10, 4);
        let p = build_partition(3, 3, 4).unwrap();
        let t = ScalingTargets::keys(GroupFlags::only(TokenGroup::Image));
        let gamma = 1.7;
        let s = apply_group_scaling(&q, &k, &p, &t, gamma, ArchMode::JointSelfAttention).unwrap();
        let base = attention_forward(&q, &k, &v, 4).unwrap();
        let mod_ = attention_forward(&q, &s.keys, &v, 4).unwrap();
        for i in 0..5 {
            for j in 0..10 {
                let (a, b) = (base.logits.get(i, j), mod_.logits.get(i, j));
                if p.group_of(j) == TokenGroup::Image {
                    assert_abs_diff_eq!(b, gamma * a, epsilon = 1e-13);
                } else {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn joint_mode_folds_query_flags_to_keys() {
        let t = ScalingTargets { query: GroupFlags::only(TokenGroup::Text), key: GroupFlags::NONE };
        let n = t.normalized(ArchMode::JointSelfAttention);
        assert_eq!(n.key, GroupFlags::only(TokenGroup::Text));
        assert!(!n.query.any());
    }

    #[test]
    fn factorized_query_scaling_touches_one_stream() {
        let (q, k, v) = random_qkv(4, 3, 8, 4);
        let p = build_partition(2, 2, 4).unwrap();
        let t = resolve_targets(ArchMode::FactorizedCrossAttention, ScalingPosition::QueryImageKeyText).unwrap();
        assert_eq!(t.query, GroupFlags::only(TokenGroup::Image));
        assert_eq!(t.key, GroupFlags::only(TokenGroup::Text));
        let s = apply_group_scaling(&q, &k, &p, &t, 2.0, ArchMode::FactorizedCrossAttention).unwrap();
        assert_eq!(s.queries.for_group(TokenGroup::Image), &q.scale(2.0));
        assert_eq!(s.queries.for_group(TokenGroup::Text), &q);
        assert_eq!(s.queries.for_group(TokenGroup::Video), &q);
        // Query-image doubles the image-stream logits.
        let modded = attend(&s, &v, &p, 4, ArchMode::FactorizedCrossAttention).unwrap();
        let base = attend_plain(&q, &k, &v, &p, 4, ArchMode::FactorizedCrossAttention).unwrap();
        let (BlockAttention::Factorized(m), BlockAttention::Factorized(b)) = (modded, base) else { unreachable!() };
        let img = |s: &StreamedAttention<f64>| s.streams.iter().find(|(g, _)| *g == TokenGroup::Image).unwrap().1.logits.clone();
        for (x, y) in img(&m).data().iter().zip(img(&b).data()) {
            assert_abs_diff_eq!(*x, 2.0 * y, epsilon = 1e-13);
        }
        let both = ScalingTargets { query: GroupFlags::only(TokenGroup::Text), key: GroupFlags::only(TokenGroup::Text) };
        assert!(apply_group_scaling(&q, &k, &p, &both, 2.0, ArchMode::FactorizedCrossAttention).is_err());
    }

    #[test]
    fn factorized_effective_probabilities_are_stochastic() {
        let (q, k, v) = random_qkv(5, 3, 8, 4);
        let p = build_partition(2, 2, 4).unwrap();
        let r = attend_plain(&q, &k, &v, &p, 4, ArchMode::FactorizedCrossAttention).unwrap();
        let e = r.effective_probabilities(&p);
        for i in 0..3 {
            assert_abs_diff_eq!(e.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma_must_be_positive() {
        let (q, k, _) = random_qkv(6, 2, 3, 2);
        let p = build_partition(1, 1, 1).unwrap();
        let t = ScalingTargets::keys(GroupFlags::CONDITIONING);
        assert!(apply_group_scaling(&q, &k, &p, &t, 0.0, ArchMode::JointSelfAttention).is_err());
        assert!(apply_group_scaling(&q, &k, &p, &t, -1.0, ArchMode::JointSelfAttention).is_err());
    }

    #[test]
    fn empty_group_flag_is_a_no_op() {
        let (q, k, _) = random_qkv(7, 2, 4, 2);
        let p = build_partition(0, 1, 3).unwrap();
        let t = ScalingTargets::keys(GroupFlags::only(TokenGroup::Text));
        let s = apply_group_scaling(&q, &k, &p, &t, 3.0, ArchMode::JointSelfAttention).unwrap();
        assert_eq!(s.keys, k);
        assert_eq!(s.multiplications, 0);
    }

    #[test]
    fn energy_gamma_examples() {
        let zero = Matrix::<f64>::zeros(2, 2);
        assert_abs_diff_eq!(energy_gamma(&zero, 1.5, 1.0).unwrap(), 1.25, epsilon = 1e-15);
        let hot = Matrix::from_rows(&[vec![800.0]]).unwrap();
        assert_abs_diff_eq!(energy_gamma(&hot, 1.5, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        let cold = Matrix::from_rows(&[vec![-800.0]]).unwrap();
        assert_abs_diff_eq!(energy_gamma(&cold, 1.5, 1.0).unwrap(), 1.5, epsilon = 1e-15);
        assert!(energy_gamma(&Matrix::<f64>::zeros(0, 0), 1.5, 1.0).is_err());
        assert!(energy_gamma(&zero, 0.5, 1.0).is_err());
        assert!(energy_gamma(&zero, 1.5, 0.0).is_err());
    }

    #[test]
    fn position_resolution() {
        use ScalingPosition::*;
        assert_eq!(
            resolve_targets(ArchMode::JointSelfAttention, KeyImageKeyText).unwrap(),
            ScalingTargets::keys(GroupFlags::CONDITIONING)
        );
        let f = resolve_targets(ArchMode::FactorizedCrossAttention, QueryImageKeyText).unwrap();
        assert!(f.query.image && f.key.text && !f.query.text && !f.key.image);
        assert!(matches!(
            resolve_targets(ArchMode::JointSelfAttention, QueryImage),
            Err(Error::InvalidPosition { .. })
        ));
        assert_eq!("key-image and key-text".parse::<ScalingPosition>().unwrap(), KeyImageKeyText);
        assert_eq!("Query-image and Key-text".parse::<ScalingPosition>().unwrap(), QueryImageKeyText);
        assert!("Query-video".parse::<ScalingPosition>().is_err());
        for p in ScalingPosition::ALL {
            assert!(resolve_targets(ArchMode::FactorizedCrossAttention, p).is_ok());
        }
    }

    proptest! {
        #[test]
        fn group_scaling_locality(seed in 0u64..10_000, gamma in 0.2f64..4.0, text in any::<bool>(), image in any::<bool>(), video in any::<bool>()) {
            let (q, k, v) = random_qkv(seed, 4, 9, 3);
            let p = build_partition(2, 3, 4).unwrap();
            let flags = GroupFlags { text, image, video };
            let s = apply_group_scaling(&q, &k, &p, &ScalingTargets::keys(flags), gamma, ArchMode::JointSelfAttention).unwrap();
            let base = attention_forward(&q, &k, &v, 3).unwrap();
            let modded = attention_forward(&q, &s.keys, &v, 3).unwrap();
            for i in 0..4 {
                for j in 0..9 {
                    if !flags.get(p.group_of(j)) {
                        prop_assert_eq!(base.logits.get(i, j).to_bits(), modded.logits.get(i, j).to_bits());
                    }
                }
            }
        }

        #[test]
        fn output_is_convex_combination(seed in 0u64..10_000) {
            let (q, k, v) = random_qkv(seed, 3, 7, 4);
            let r = attention_forward(&q, &k, &v, 4).unwrap();
            for c in 0..v.cols() {
                let col = v.column(c);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..3 {
                    let y = r.output.get(i, c);
                    prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
                }
            }
            let pv = r.probabilities.matmul(&v).unwrap();
            for (a, b) in pv.data().iter().zip(r.output.data()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
            for i in 0..3 {
                prop_assert!((r.probabilities.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn energy_gamma_strictly_decreasing(x in -15.0f64..15.0, dx in 1e-3f64..5.0, gmax in 1.01f64..4.0, kappa in 0.1f64..5.0) {
            // Kept where the logistic tail is still resolvable in f64.
            let (a, d) = (x * kappa, dx * kappa);
            let g1 = energy_gamma_from_mean(a, gmax, kappa).unwrap();
            let g2 = energy_gamma_from_mean(a + d, gmax, kappa).unwrap();
            prop_assert!(g1 > g2);
            prop_assert!(g1 > 1.0 && g1 < gmax);
        }
    }
}
