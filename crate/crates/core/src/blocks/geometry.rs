use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::attention::AttentionPairs;
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, Mlp, ParamStore};
use crate::pointcloud::{bbox_min, grid_clusters, Point};
use crate::tensor::{Activation, Array, Segments, Var};

/// Token layout of one cloud at the encoder's grid size.
#[derive(Clone, Debug)]
pub struct GeometryTokens {
    pub clusters: Arc<Segments>,
    pub positions: Vec<Point>,
    pub pairs: AttentionPairs,
}

impl GeometryTokens {
    pub fn new(positions: &[Point], features: &Array, token_size: f64) -> Result<Self> {
        let origin = bbox_min(positions).ok_or_else(|| Error::cloud("empty cloud"))?;
        let cl = grid_clusters(positions, Some(features), token_size as _, origin)?;
        let token_pos = cl.centroids(positions);
        let pairs = AttentionPairs::dense(&token_pos)?;
        Ok(Self {
            clusters: cl.segments,
            positions: token_pos,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Global shape embedding: grid-pooled tokens, full vector self-attention with
/// relative positional encoding, mean over tokens.
#[derive(Clone, Debug)]
pub struct GeometryEncoder {
    pub token_size: f64,
    pub width: usize,
    pub embed: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub gamma_w: Mlp,
    pub gamma_p: Mlp,
}

impl GeometryEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        width: usize,
        token_size: f64,
        act: Activation,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::arg("embedding width must be positive"));
        }
        if !(token_size > 0.0) {
            return Err(Error::arg("token grid size must be positive"));
        }
        let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, part: &str| {
            Linear::new(store, rng, &format!("geometry.{part}"), width, width, Init::Xavier)
        };
        let embed = Linear::new(store, rng, "geometry.embed", in_dim, width, Init::Xavier);
        let q = lin(store, rng, "q");
        let k = lin(store, rng, "k");
        let v = lin(store, rng, "v");
        let gamma_w = Mlp::new(store, rng, "geometry.gamma_w", width, width, width, act, Init::Xavier);
        let gamma_p = Mlp::new(store, rng, "geometry.gamma_p", 3, width, width, act, Init::Xavier);
        Ok(Self {
            token_size,
            width,
            embed,
            q,
            k,
            v,
            gamma_w,
            gamma_p,
        })
    }

    /// Token features `z_k`: mean over each cell of the embedded input features.
    pub fn tokens<'t>(&self, p: &Bound<'t>, features: Var<'t>, tokens: &GeometryTokens) -> Result<Var<'t>> {
        let e = self.embed.forward(p, features)?;
        Ok(e.segment_reduce(tokens.clusters.clone(), crate::tensor::Reduce::Mean)?)
    }

    /// Attended tokens `z̃_k` (`K × width`).
    pub fn attend<'t>(&self, p: &Bound<'t>, z: Var<'t>, tokens: &GeometryTokens) -> Result<Var<'t>> {
        let pairs = &tokens.pairs;
        let q = self.q.forward(p, z)?;
        let k = self.k.forward(p, z)?;
        let v = self.v.forward(p, z)?;
        let pe = self.gamma_p.forward(p, z.tape().constant(pairs.offsets.clone()))?;
        let rel = q
            .gather_rows(pairs.query.clone())?
            .sub(&k.gather_rows(pairs.key.clone())?)?
            .add(&pe)?;
        let alpha = self.gamma_w.forward(p, rel)?.segment_softmax(pairs.per_query.clone())?;
        let val = v.gather_rows(pairs.key.clone())?.add(&pe)?;
        Ok(alpha.mul(&val)?.segment_sum(pairs.per_query.clone())?)
    }

    /// The `1 × width` embedding.
    pub fn encode<'t>(&self, p: &Bound<'t>, features: Var<'t>, tokens: &GeometryTokens) -> Result<Var<'t>> {
        let z = self.tokens(p, features, tokens)?;
        let zt = self.attend(p, z, tokens)?;
        Ok(zt.mean_axis(0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Real, Tape};
    use rand::{Rng, SeedableRng};

    fn setup(seed: u64, width: usize) -> (ParamStore, GeometryEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = GeometryEncoder::new(&mut store, &mut rng, 4, width, 0.3, Activation::Gelu).unwrap();
        (store, enc)
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, scale: Real) -> (Vec<Point>, Array) {
        let pos: Vec<Point> = (0..n)
            .map(|_| {
                [
                    scale * rng.random::<Real>(),
                    scale * rng.random::<Real>(),
                    scale * rng.random::<Real>(),
                ]
            })
            .collect();
        let f = Array::new(vec![n, 4], (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (pos, f)
    }

    fn embed(store: &ParamStore, enc: &GeometryEncoder, pos: &[Point], f: &Array) -> Array {
        let tokens = GeometryTokens::new(pos, f, enc.token_size).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        (*enc.encode(&p, tape.constant(f.clone()), &tokens).unwrap().value()).clone()
    }

    #[test]
    fn single_token_has_unit_weight() {
        let (store, enc) = setup(0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pos, f) = cloud(&mut rng, 10, 0.1);
        let tokens = GeometryTokens::new(&pos, &f, 0.3).unwrap();
        assert_eq!(tokens.len(), 1);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let z = enc.tokens(&p, tape.constant(f.clone()), &tokens).unwrap();
        // one token: weights are 1, offset 0, so z̃ = v + γ_p(0)
        let v = enc.v.forward(&p, z).unwrap().value();
        let pe0 = enc
            .gamma_p
            .forward(&p, tape.constant(Array::zeros(&[1, 3])))
            .unwrap()
            .value();
        let g = embed(&store, &enc, &pos, &f);
        assert_eq!(g.shape(), &[1, 8]);
        for c in 0..8 {
            assert!((g.get(0, c) - (v.get(0, c) + pe0.get(0, c))).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_is_permutation_invariant() {
        let (store, enc) = setup(2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pos, f) = cloud(&mut rng, 200, 1.0);
        let g = embed(&store, &enc, &pos, &f);
        let perm: Vec<usize> = (0..200).map(|i| (i * 37) % 200).collect();
        let pos2: Vec<Point> = perm.iter().map(|&i| pos[i]).collect();
        let f2 = Array::from_rows(&perm.iter().map(|&i| f.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let g2 = embed(&store, &enc, &pos2, &f2);
        for (a, b) in g.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicating_a_coincident_point_keeps_embedding() {
        let (store, enc) = setup(4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut pos, f) = cloud(&mut rng, 60, 1.0);
        let mut rows: Vec<Vec<Real>> = (0..60).map(|i| f.row(i).to_vec()).collect();
        // point 60 coincides with point 0, then 0 is duplicated once more
        pos.push(pos[0]);
        rows.push(rows[0].clone());
        let f1 = Array::from_rows(&rows).unwrap();
        let g1 = embed(&store, &enc, &pos, &f1);
        pos.push(pos[0]);
        rows.push(rows[0].clone());
        let f2 = Array::from_rows(&rows).unwrap();
        let g2 = embed(&store, &enc, &pos, &f2);
        let tokens1 = GeometryTokens::new(&pos[..61], &f1, 0.3).unwrap();
        let tokens2 = GeometryTokens::new(&pos, &f2, 0.3).unwrap();
        assert_eq!(tokens1.len(), tokens2.len());
        // only a cell holding exclusively the duplicated point keeps its mean bitwise
        let cell = tokens1.clusters.group_of(0);
        if tokens1.clusters.group(cell).len() == 2 {
            for (a, b) in g1.data().iter().zip(g2.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Two tokens expanded by hand.
    #[test]
    fn two_token_manual_expansion() {
        let (store, enc) = setup(6, 4);
        let pos = vec![[0.0, 0.0, 0.0], [1.0, 0.2, -0.3]];
        let f = Array::matrix(2, 4, vec![0.3, -0.2, 0.5, 1.0, -0.7, 0.1, 0.4, -0.9]).unwrap();
        let tokens = GeometryTokens::new(&pos, &f, 0.3).unwrap();
        assert_eq!(tokens.len(), 2);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let fv = tape.constant(f.clone());
        let z = enc.tokens(&p, fv, &tokens).unwrap();
        let zv = z.value();
        let q = enc.q.forward(&p, z).unwrap().value();
        let k = enc.k.forward(&p, z).unwrap().value();
        let v = enc.v.forward(&p, z).unwrap().value();
        let mlp = |m: &Mlp, x: &[Real]| -> Vec<Real> {
            let x = tape.constant(Array::from_rows(&[x.to_vec()]).unwrap());
            m.forward(&p, x).unwrap().value().data().to_vec()
        };
        let tp = &tokens.positions;
        let mut expect = vec![0.0; 4];
        for a in 0..2 {
            let mut logits = Vec::new();
            let mut vals = Vec::new();
            for b in 0..2 {
                let d: Vec<Real> = (0..3).map(|ax| tp[a][ax] - tp[b][ax]).collect();
                let pe = mlp(&enc.gamma_p, &d);
                let rel: Vec<Real> = (0..4).map(|c| q.get(a, c) - k.get(b, c) + pe[c]).collect();
                logits.push(mlp(&enc.gamma_w, &rel));
                vals.push((0..4).map(|c| v.get(b, c) + pe[c]).collect::<Vec<Real>>());
            }
            for c in 0..4 {
                let e0 = logits[0][c].exp();
                let e1 = logits[1][c].exp();
                let zt = (e0 * vals[0][c] + e1 * vals[1][c]) / (e0 + e1);
                expect[c] += zt / 2.0;
            }
        }
        assert_eq!(zv.rows(), 2);
        let g = enc.encode(&p, fv, &tokens).unwrap().value();
        for c in 0..4 {
            assert!((g.get(0, c) - expect[c]).abs() < 1e-12);
        }
    }
}
