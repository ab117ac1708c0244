//! The full encoder/decoder field network with geometry conditioning and
//! coarse-to-fine output heads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    build_condition, AttentionPairs, FilmAdapter, GeometryEncoder, GeometryTokens, GroupedAttentionBlock,
};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::pointcloud::{bbox_min, grid_clusters, Point, PointCloud};
use crate::tensor::{Activation, Array, Real, Reduce, Segments, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-point input feature width.
    pub in_features: usize,
    /// Pooling grid size of each encoder stage, strictly increasing.
    pub grid_sizes: Vec<Real>,
    /// Channel width of each encoder stage.
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Channels per attention group.
    pub group_size: usize,
    /// Grid size of the geometry encoder's tokens.
    pub token_size: Real,
    pub embed_width: usize,
    /// Width of the flow-condition vector (0 for unconditioned tasks).
    pub cond_width: usize,
    pub out_width: usize,
    pub activation: Activation,
    /// Relative positional encoding inside the backbone attention blocks.
    pub positional: bool,
    /// Modulate decoder blocks as well as encoder blocks.
    pub decoder_film: bool,
    /// Zero-initialize each adapter's output path.
    pub film_zero_init: bool,
    /// Subtract the cloud centroid from the first three feature channels.
    pub center_coords: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_features: 7,
            grid_sizes: vec![0.06, 0.12, 0.24, 0.48, 0.96],
            channels: vec![16, 32, 64, 128, 256],
            blocks_per_stage: 2,
            group_size: 8,
            token_size: 0.3,
            embed_width: 64,
            cond_width: 1,
            out_width: 1,
            activation: Activation::Gelu,
            positional: true,
            decoder_film: true,
            film_zero_init: true,
            center_coords: true,
        }
    }
}

impl ModelConfig {
    /// Wider stages used at full scale.
    pub fn full_scale() -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 512],
            ..Self::default()
        }
    }

    /// Two-stage network for unit-sized bodies sampled with about 2k points.
    pub fn desk() -> Self {
        Self {
            grid_sizes: vec![0.15, 0.3],
            channels: vec![24, 48],
            blocks_per_stage: 1,
            token_size: 0.5,
            embed_width: 32,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.grid_sizes.len()
    }

    /// Feature width at each level, level 0 being the input points.
    pub fn level_widths(&self) -> Vec<usize> {
        let mut w = vec![self.channels.first().copied().unwrap_or(0)];
        w.extend(&self.channels);
        w
    }

    /// Neighborhood cell size at level `l ≥ 1`.
    fn neighborhood_size(&self, level: usize) -> Real {
        let s = &self.grid_sizes;
        if level < s.len() {
            s[level]
        } else {
            2.0 * s[s.len() - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_features == 0 {
            return bad("in_features must be positive".into());
        }
        if self.center_coords && self.in_features < 3 {
            return bad("center_coords needs at least 3 coordinate features".into());
        }
        if self.grid_sizes.is_empty() {
            return bad("grid_sizes must list at least one stage".into());
        }
        if self.grid_sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("grid sizes must be positive, got {:?}", self.grid_sizes));
        }
        if self.grid_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!(
                "grid sizes must be strictly increasing, got {:?}",
                self.grid_sizes
            ));
        }
        if self.channels.len() != self.grid_sizes.len() {
            return bad(format!(
                "{} channel widths for {} stages",
                self.channels.len(),
                self.grid_sizes.len()
            ));
        }
        if self.group_size == 0 {
            return bad("group_size must be positive".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % self.group_size != 0) {
            return bad(format!(
                "stage width {c} is not a positive multiple of group size {}",
                self.group_size
            ));
        }
        if !(self.token_size.is_finite() && self.token_size > 0.0) {
            return bad("token_size must be positive".into());
        }
        if self.embed_width == 0 || self.out_width == 0 {
            return bad("embed_width and out_width must be positive".into());
        }
        Ok(())
    }
}

/// How the global condition reaches the adapters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    #[default]
    Full,
    /// Geometry embedding replaced by zeros; the flow condition is kept.
    NoGeometry,
    /// Adapters skipped entirely.
    Off,
}

/// Per-cloud structure that depends only on point positions.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    /// Point positions per level; level 0 is the input cloud.
    pub positions: Vec<Vec<Point>>,
    /// `pools[k]` groups level-`k` points into level-`k+1` points.
    pub pools: Vec<Arc<Segments>>,
    /// Attention neighborhoods per level (`None` at level 0).
    pub pairs: Vec<Option<AttentionPairs>>,
    pub tokens: GeometryTokens,
    pub origin: Point,
}

impl Hierarchy {
    pub fn build(config: &ModelConfig, positions: &[Point], features: &Array) -> Result<Self> {
        let origin = bbox_min(positions).ok_or_else(|| Error::cloud("empty cloud"))?;
        let stages = config.num_stages();
        let mut levels = vec![positions.to_vec()];
        let mut pools = Vec::with_capacity(stages);
        let mut pairs = vec![None];
        for k in 0..stages {
            let feats = (k == 0).then_some(features);
            let cl = grid_clusters(&levels[k], feats, config.grid_sizes[k], origin)?;
            let next = cl.centroids(&levels[k]);
            if k > 0 {
                pairs.push(Some(AttentionPairs::from_clusters(&levels[k], &cl.segments)?));
            }
            pools.push(cl.segments);
            levels.push(next);
        }
        let last = &levels[stages];
        let cl = grid_clusters(last, None, config.neighborhood_size(stages), origin)?;
        pairs.push(Some(AttentionPairs::from_clusters(last, &cl.segments)?));
        let tokens = GeometryTokens::new(positions, features, config.token_size as f64)?;
        Ok(Self {
            positions: levels,
            pools,
            pairs,
            tokens,
            origin,
        })
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.positions.iter().map(Vec::len).collect()
    }
}

/// A cloud ready for the network: centered features, hierarchy and condition.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub hierarchy: Hierarchy,
    pub features: Array,
    /// `1 × cond_width`.
    pub condition: Array,
}

/// The four per-point fields of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FieldPrediction<'t> {
    /// Level-1 prediction.
    pub coarse: Var<'t>,
    /// Coarse prediction copied to every fine point of its cluster.
    pub upsampled: Var<'t>,
    pub residual: Var<'t>,
    pub output: Var<'t>,
}

#[derive(Clone, Debug)]
struct Stage {
    pool: Linear,
    blocks: Vec<GroupedAttentionBlock>,
    films: Vec<FilmAdapter>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    fuse: Linear,
    blocks: Vec<GroupedAttentionBlock>,
    films: Vec<FilmAdapter>,
}

/// The network and its parameters.
#[derive(Clone, Debug)]
pub struct GaField {
    pub config: ModelConfig,
    pub params: ParamStore,
    embed: Linear,
    geometry: GeometryEncoder,
    encoder: Vec<Stage>,
    /// `decoder[k]` produces level `k`.
    decoder: Vec<DecoderStage>,
    head_coarse: Linear,
    head_refine: Linear,
}

impl GaField {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let act = config.activation;
        let widths = config.level_widths();
        let cplus = config.embed_width + config.cond_width;
        let groups = |w: usize| w / config.group_size;

        let embed = Linear::new(s, rng, "embed", config.in_features, widths[0], Init::Xavier);
        let geometry = GeometryEncoder::new(
            s,
            rng,
            config.in_features,
            config.embed_width,
            config.token_size as f64,
            act,
        )?;
        let mut encoder = Vec::new();
        for k in 0..config.num_stages() {
            let w = widths[k + 1];
            let pool = Linear::new(s, rng, &format!("enc{k}.pool"), widths[k], w, Init::Xavier);
            let mut blocks = Vec::new();
            let mut films = Vec::new();
            for b in 0..config.blocks_per_stage {
                let name = format!("enc{k}.block{b}");
                blocks.push(GroupedAttentionBlock::new(
                    s,
                    rng,
                    &name,
                    w,
                    groups(w),
                    config.positional,
                    act,
                )?);
                films.push(FilmAdapter::new(
                    s,
                    rng,
                    &format!("enc{k}.film{b}"),
                    cplus,
                    w,
                    act,
                    config.film_zero_init,
                ));
            }
            encoder.push(Stage { pool, blocks, films });
        }
        let mut decoder = Vec::new();
        for k in 0..config.num_stages() {
            let w = widths[k];
            let fuse = Linear::new(s, rng, &format!("dec{k}.fuse"), widths[k + 1] + w, w, Init::Xavier);
            let mut blocks = Vec::new();
            let mut films = Vec::new();
            if k > 0 {
                for b in 0..config.blocks_per_stage {
                    let name = format!("dec{k}.block{b}");
                    blocks.push(GroupedAttentionBlock::new(
                        s,
                        rng,
                        &name,
                        w,
                        groups(w),
                        config.positional,
                        act,
                    )?);
                    if config.decoder_film {
                        films.push(FilmAdapter::new(
                            s,
                            rng,
                            &format!("dec{k}.film{b}"),
                            cplus,
                            w,
                            act,
                            config.film_zero_init,
                        ));
                    }
                }
            }
            decoder.push(DecoderStage { fuse, blocks, films });
        }
        let head_coarse = Linear::new(s, rng, "head.coarse", widths[1], config.out_width, Init::Xavier);
        let head_refine = Linear::new(s, rng, "head.refine", widths[0], config.out_width, Init::Xavier);
        Ok(Self {
            config,
            params: store,
            embed,
            geometry,
            encoder,
            decoder,
            head_coarse,
            head_refine,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Validates a cloud and builds its hierarchy and network features.
    pub fn prepare(&self, pc: &PointCloud, condition: &[Real]) -> Result<Prepared> {
        let cfg = &self.config;
        if pc.is_empty() {
            return Err(Error::cloud("empty cloud"));
        }
        if pc.feature_width() != cfg.in_features {
            return Err(Error::arg(format!(
                "cloud has {} feature channels, model expects {}",
                pc.feature_width(),
                cfg.in_features
            )));
        }
        if condition.len() != cfg.cond_width {
            return Err(Error::arg(format!(
                "condition has width {}, model expects {}",
                condition.len(),
                cfg.cond_width
            )));
        }
        let mut features = pc.features().clone();
        if cfg.center_coords {
            let c = pc.centroid().ok_or_else(|| Error::cloud("empty cloud"))?;
            let cols = features.cols();
            for row in features.data_mut().chunks_mut(cols) {
                for a in 0..3 {
                    row[a] -= c[a];
                }
            }
        }
        let hierarchy = Hierarchy::build(cfg, pc.positions(), &features)?;
        Ok(Prepared {
            hierarchy,
            features,
            condition: Array::new(vec![1, condition.len()], condition.to_vec())?,
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        input: &Prepared,
        mode: Injection,
    ) -> Result<FieldPrediction<'t>> {
        let h = &input.hierarchy;
        let act = self.config.activation;
        let features = tape.constant(input.features.clone());

        let cond = match mode {
            Injection::Off => None,
            _ => {
                let g = match mode {
                    Injection::Full => self.geometry.encode(p, features, &h.tokens)?,
                    _ => tape.constant(Array::zeros(&[1, self.config.embed_width])),
                };
                let c = (self.config.cond_width > 0).then(|| tape.constant(input.condition.clone()));
                Some(build_condition(g, c)?)
            }
        };
        let modulate = |x: Var<'t>, film: Option<&FilmAdapter>| -> Result<Var<'t>> {
            match (film, cond) {
                (Some(f), Some(c)) => f.modulate(p, x, c),
                _ => Ok(x),
            }
        };

        let mut skips = vec![self.embed.forward(p, features)?.act(act)?];
        for (k, stage) in self.encoder.iter().enumerate() {
            let mut x = stage
                .pool
                .forward(p, skips[k])?
                .segment_reduce(h.pools[k].clone(), Reduce::Max)?;
            let pairs = h.pairs[k + 1].as_ref().expect("pooled level has neighborhoods");
            for (b, block) in stage.blocks.iter().enumerate() {
                x = modulate(block.forward(p, x, pairs)?, stage.films.get(b))?;
            }
            skips.push(x);
        }

        let stages = self.encoder.len();
        let mut x = skips[stages];
        let mut level1 = (stages == 1).then_some(x);
        for k in (0..stages).rev() {
            let stage = &self.decoder[k];
            let up = x.expand(h.pools[k].clone())?;
            x = stage.fuse.forward(p, Var::concat_cols(&[up, skips[k]])?)?.act(act)?;
            if let Some(pairs) = h.pairs[k].as_ref() {
                for (b, block) in stage.blocks.iter().enumerate() {
                    x = modulate(block.forward(p, x, pairs)?, stage.films.get(b))?;
                }
            }
            if k == 1 {
                level1 = Some(x);
            }
        }

        let coarse = self.head_coarse.forward(p, level1.expect("level 1 exists"))?;
        let upsampled = coarse.expand(h.pools[0].clone())?;
        let residual = self.head_refine.forward(p, x)?;
        let output = upsampled.add(&residual)?;
        Ok(FieldPrediction {
            coarse,
            upsampled,
            residual,
            output,
        })
    }

    /// Inference: the final field as an `N × out_width` array.
    pub fn predict(&self, input: &Prepared, mode: Injection) -> Result<Array> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let pred = self.forward(&p, &tape, input, mode)?;
        Ok((*pred.output.value()).clone())
    }

    pub fn coarse_head(&self) -> &Linear {
        &self.head_coarse
    }

    pub fn refine_head(&self) -> &Linear {
        &self.head_refine
    }

    /// Zeroes both output heads.
    pub fn zero_heads(&mut self) {
        self.head_coarse.zero(&mut self.params);
        self.head_refine.zero(&mut self.params);
    }
}
