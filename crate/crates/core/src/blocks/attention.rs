use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, Mlp, ParamStore};
use crate::pointcloud::Point;
use crate::tensor::{Activation, Array, Segments, TensorError, Var};

/// Flattened (query, key) pairs for neighborhood attention.
///
/// Pairs are listed query by query, and each query's keys in the order of
/// its neighborhood list; `per_query` groups pair rows by query.
#[derive(Clone, Debug)]
pub struct AttentionPairs {
    pub query: Arc<Vec<usize>>,
    pub key: Arc<Vec<usize>>,
    pub per_query: Arc<Segments>,
    /// `x_query − x_key` per pair (`P × 3`).
    pub offsets: Array,
}

impl AttentionPairs {
    pub fn from_neighborhoods(positions: &[Point], neighborhoods: &[Vec<usize>]) -> Result<Self> {
        let n = positions.len();
        if neighborhoods.len() != n {
            return Err(Error::arg(format!(
                "{} neighborhoods for {n} points",
                neighborhoods.len()
            )));
        }
        let total: usize = neighborhoods.iter().map(Vec::len).sum();
        let mut query = Vec::with_capacity(total);
        let mut key = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(total * 3);
        for (i, nb) in neighborhoods.iter().enumerate() {
            if nb.is_empty() {
                return Err(Error::arg(format!("point {i} has an empty neighborhood")));
            }
            for &j in nb {
                if j >= n {
                    return Err(TensorError::IndexOutOfRange { index: j, len: n }.into());
                }
                query.push(i);
                key.push(j);
                offsets.extend((0..3).map(|a| positions[i][a] - positions[j][a]));
            }
        }
        let lens: Vec<usize> = neighborhoods.iter().map(Vec::len).collect();
        Ok(Self {
            query: Arc::new(query),
            key: Arc::new(key),
            per_query: Arc::new(Segments::contiguous(&lens)),
            offsets: Array::new(vec![total, 3], offsets)?,
        })
    }

    /// Every point attends to all members of its own cluster.
    pub fn from_clusters(positions: &[Point], clusters: &Segments) -> Result<Self> {
        let nbs: Vec<Vec<usize>> = (0..clusters.source_len())
            .map(|i| clusters.group(clusters.group_of(i)).to_vec())
            .collect();
        Self::from_neighborhoods(positions, &nbs)
    }

    /// All-to-all attention.
    pub fn dense(positions: &[Point]) -> Result<Self> {
        let all: Vec<usize> = (0..positions.len()).collect();
        Self::from_neighborhoods(positions, &vec![all; positions.len()])
    }

    pub fn num_pairs(&self) -> usize {
        self.query.len()
    }

    pub fn num_queries(&self) -> usize {
        self.per_query.num_groups()
    }
}

/// Grouped vector attention given projected `q`, `k`, `v` (`N × C`).
///
/// `weight_encoder` maps relation rows (`P × C`) to `P × g` logits. With a
/// positional encoding `pos` (`P × C`) the relation is `q_i − k_j + pos` and the
/// value is `v_j + pos`. Returns the aggregated features and the per-pair,
/// per-group weights.
pub fn grouped_vector_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    pos: Option<Var<'t>>,
    pairs: &AttentionPairs,
    groups: usize,
    weight_encoder: impl FnOnce(Var<'t>) -> Result<Var<'t>, TensorError>,
) -> Result<(Var<'t>, Var<'t>)> {
    let c = q.cols();
    if groups == 0 || c % groups != 0 {
        return Err(Error::arg(format!("{groups} groups do not divide {c} channels")));
    }
    let qi = q.gather_rows(pairs.query.clone())?;
    let kj = k.gather_rows(pairs.key.clone())?;
    let mut vj = v.gather_rows(pairs.key.clone())?;
    let mut rel = qi.sub(&kj)?;
    if let Some(pe) = pos {
        rel = rel.add(&pe)?;
        vj = vj.add(&pe)?;
    }
    let logits = weight_encoder(rel)?;
    if logits.cols() != groups {
        return Err(Error::arg(format!(
            "weight encoder produced {} columns for {groups} groups",
            logits.cols()
        )));
    }
    let weights = logits.segment_softmax(pairs.per_query.clone())?;
    let expanded = weights.repeat_cols(c / groups)?;
    let out = expanded.mul(&vj)?.segment_sum(pairs.per_query.clone())?;
    Ok((out, weights))
}

/// One backbone attention block: grouped vector attention over cluster
/// neighborhoods, output projection and a residual connection.
#[derive(Clone, Debug)]
pub struct GroupedAttentionBlock {
    pub channels: usize,
    pub groups: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// ω: C → C → g
    pub omega: Mlp,
    /// Positional encoding of `x_i − x_j`: 3 → C → C.
    pub pos: Option<Mlp>,
    pub out: Linear,
    pub act: Activation,
}

impl GroupedAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        groups: usize,
        positional: bool,
        act: Activation,
    ) -> Result<Self> {
        if groups == 0 || groups > channels || channels % groups != 0 {
            return Err(Error::arg(format!(
                "{name}: {groups} groups must divide {channels} channels"
            )));
        }
        let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, part: &str| {
            Linear::new(store, rng, &format!("{name}.{part}"), channels, channels, Init::Xavier)
        };
        let q = lin(store, rng, "q");
        let k = lin(store, rng, "k");
        let v = lin(store, rng, "v");
        let omega = Mlp::new(
            store,
            rng,
            &format!("{name}.omega"),
            channels,
            channels,
            groups,
            act,
            Init::Xavier,
        );
        let pos = positional.then(|| {
            Mlp::new(
                store,
                rng,
                &format!("{name}.pos"),
                3,
                channels,
                channels,
                act,
                Init::Xavier,
            )
        });
        let out = lin(store, rng, "out");
        Ok(Self {
            channels,
            groups,
            q,
            k,
            v,
            omega,
            pos,
            out,
            act,
        })
    }

    /// Aggregated attention features and weights (before projection and residual).
    pub fn attend<'t>(&self, p: &Bound<'t>, x: Var<'t>, pairs: &AttentionPairs) -> Result<(Var<'t>, Var<'t>)> {
        if x.cols() != self.channels {
            return Err(Error::arg(format!(
                "attention block expects {} channels, got {}",
                self.channels,
                x.cols()
            )));
        }
        if x.rows() != pairs.num_queries() {
            return Err(Error::arg("neighborhoods do not match the point count"));
        }
        let q = self.q.forward(p, x)?;
        let k = self.k.forward(p, x)?;
        let v = self.v.forward(p, x)?;
        let pos = match &self.pos {
            Some(mlp) => Some(mlp.forward(p, x.tape().constant(pairs.offsets.clone()))?),
            None => None,
        };
        grouped_vector_attention(q, k, v, pos, pairs, self.groups, |rel| self.omega.forward(p, rel))
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, pairs: &AttentionPairs) -> Result<Var<'t>> {
        let (agg, _) = self.attend(p, x, pairs)?;
        let proj = self.out.forward(p, agg.act(self.act)?)?;
        Ok(x.add(&proj)?)
    }
}
