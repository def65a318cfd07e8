use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_history, IntensityModel, ThinningBound, TypeSpace, MAX_ENUMERABLE};
use crate::autodiff::{Grads, Graph, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::event::{Occurrence, Timeline, TypeKey};

/// Shape of a continuous-time attention encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub space: TypeSpace,
    /// Width of each entity / predicate / category embedding.
    pub embed_dim: usize,
    /// Number of sinusoidal time features (even).
    pub time_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Key and query width per head.
    pub key_dim: usize,
    /// Longest period of the time features, in time units.
    pub time_scale: f64,
}

impl EncoderSpec {
    pub fn new(space: TypeSpace) -> Self {
        Self {
            space,
            embed_dim: 8,
            time_dim: 8,
            layers: 1,
            heads: 2,
            key_dim: 8,
            time_scale: 1000.0,
        }
    }

    /// Width of a single layer embedding.
    pub fn width(&self) -> usize {
        match self.space {
            TypeSpace::Categorical { .. } => self.embed_dim,
            TypeSpace::Structured { .. } => 3 * self.embed_dim,
        }
    }

    /// Width of the concatenation of all layer embeddings.
    pub fn output_width(&self) -> usize {
        self.width() * (self.layers + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        if self.layers == 0 || self.heads == 0 || self.key_dim == 0 || w == 0 {
            return Err(Error::Dimension(
                "encoder needs at least one layer, head, key and embedding dimension".into(),
            ));
        }
        if w % self.heads != 0 {
            return Err(Error::Dimension(format!(
                "embedding width {w} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Dimension("time_dim must be even".into()));
        }
        if !(self.time_scale > 1.0) {
            return Err(Error::InvalidArgument("time_scale must exceed 1".into()));
        }
        if self.space.size() == 0 {
            return Err(Error::Dimension("empty type space".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct HeadParams {
    v: ParamId,
    k: ParamId,
    q: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum TypeTables {
    Categorical { categories: ParamId },
    Structured { entities: ParamId, predicates: ParamId },
}

/// Continuous-time multi-head attention encoder whose parameters live in a
/// caller-owned [`ParamSet`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    spec: EncoderSpec,
    tables: TypeTables,
    layers: Vec<Vec<HeadParams>>,
}

/// Per-layer keys and values of every event in a history.
pub struct EncoderContext {
    times: Vec<f64>,
    /// `keys[layer][head][event]`
    keys: Vec<Vec<Vec<crate::autodiff::Var>>>,
    values: Vec<Vec<Vec<crate::autodiff::Var>>>,
}

impl EncoderContext {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of context events strictly before `t`.
    pub fn prefix_len(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s < t)
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        spec: EncoderSpec,
        params: &mut ParamSet,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let tables = match spec.space {
            TypeSpace::Categorical { categories } => TypeTables::Categorical {
                categories: params.add(
                    "enc.categories",
                    Tensor::uniform(categories as usize, d, init_scale, rng),
                ),
            },
            TypeSpace::Structured {
                entities,
                predicates,
            } => TypeTables::Structured {
                entities: params.add(
                    "enc.entities",
                    Tensor::uniform(entities as usize, d, init_scale, rng),
                ),
                predicates: params.add(
                    "enc.predicates",
                    Tensor::uniform(predicates as usize, d, init_scale, rng),
                ),
            },
        };
        let input = 1 + spec.time_dim + spec.width();
        let head_out = spec.width() / spec.heads;
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let mut heads = Vec::with_capacity(spec.heads);
            for h in 0..spec.heads {
                heads.push(HeadParams {
                    v: params.add(
                        format!("enc.l{l}.h{h}.value"),
                        Tensor::uniform(head_out, input, init_scale, rng),
                    ),
                    k: params.add(
                        format!("enc.l{l}.h{h}.key"),
                        Tensor::uniform(spec.key_dim, input, init_scale, rng),
                    ),
                    q: params.add(
                        format!("enc.l{l}.h{h}.query"),
                        Tensor::uniform(spec.key_dim, input, init_scale, rng),
                    ),
                });
            }
            layers.push(heads);
        }
        Ok(Self {
            spec,
            tables,
            layers,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// `[1; sin(ω_i t); cos(ω_i t)]` with geometrically spaced frequencies.
    pub fn time_features(&self, t: f64) -> Vec<f64> {
        let half = self.spec.time_dim / 2;
        let mut out = Vec::with_capacity(1 + self.spec.time_dim);
        out.push(1.0);
        for i in 0..half {
            let w = self.spec.time_scale.powf(-(i as f64) / half.max(1) as f64);
            out.push((w * t).sin());
        }
        for i in 0..half {
            let w = self.spec.time_scale.powf(-(i as f64) / half.max(1) as f64);
            out.push((w * t).cos());
        }
        out
    }

    fn type_embedding(&self, g: &mut Graph, key: TypeKey) -> Result<crate::autodiff::Var> {
        if !self.spec.space.contains(key) {
            return Err(Error::Dimension(format!(
                "type {key:?} lies outside the encoder's type space {:?}",
                self.spec.space
            )));
        }
        Ok(match (&self.tables, key) {
            (TypeTables::Categorical { categories }, TypeKey::Categorical(c)) => {
                g.gather(*categories, c as usize)
            }
            (
                TypeTables::Structured {
                    entities,
                    predicates,
                },
                TypeKey::Structured {
                    subject,
                    predicate,
                    object,
                },
            ) => {
                let s = g.gather(*entities, subject as usize);
                let r = g.gather(*predicates, predicate as usize);
                let o = g.gather(*entities, object as usize);
                g.concat(&[s, r, o])
            }
            _ => unreachable!("space membership checked above"),
        })
    }

    /// Runs every layer for one event; `visible` is how many context events it attends to.
    /// Returns the layer embeddings and, per layer and head, its own key and value.
    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        g: &mut Graph,
        ctx: &EncoderContext,
        visible: usize,
        key: TypeKey,
        t: f64,
    ) -> Result<(
        Vec<crate::autodiff::Var>,
        Vec<Vec<(crate::autodiff::Var, crate::autodiff::Var)>>,
    )> {
        let tf = g.input(self.time_features(t));
        let mut e = self.type_embedding(g, key)?;
        let mut layer_out = vec![e];
        let mut own = Vec::with_capacity(self.layers.len());
        let scale = 1.0 / (self.spec.key_dim as f64).sqrt();
        let head_out = self.spec.width() / self.spec.heads;
        for (l, heads) in self.layers.iter().enumerate() {
            let x = g.concat(&[tf, e]);
            let mut parts = Vec::with_capacity(heads.len());
            let mut kv = Vec::with_capacity(heads.len());
            for (h, hp) in heads.iter().enumerate() {
                let q = g.linear(hp.q, x);
                let k = g.linear(hp.k, x);
                let v = g.linear(hp.v, x);
                let att = g.attend(
                    q,
                    &ctx.keys[l][h][..visible],
                    &ctx.values[l][h][..visible],
                    scale,
                    head_out,
                );
                parts.push(att);
                kv.push((k, v));
            }
            let joined = if parts.len() == 1 {
                parts[0]
            } else {
                g.concat(&parts)
            };
            let upd = g.tanh(joined);
            e = g.add(e, upd);
            layer_out.push(e);
            own.push(kv);
        }
        Ok((layer_out, own))
    }

    /// Encodes each history event at its own time, attending to events strictly before it.
    pub fn context(&self, g: &mut Graph, history: &[Occurrence]) -> Result<EncoderContext> {
        let (nl, nh) = (self.layers.len(), self.spec.heads);
        let mut ctx = EncoderContext {
            times: Vec::with_capacity(history.len()),
            keys: vec![vec![Vec::with_capacity(history.len()); nh]; nl],
            values: vec![vec![Vec::with_capacity(history.len()); nh]; nl],
        };
        for (i, ev) in history.iter().enumerate() {
            if i > 0 && ev.time < history[i - 1].time {
                return Err(Error::InvalidArgument(format!(
                    "history out of order at index {i}"
                )));
            }
            let visible = ctx.prefix_len(ev.time);
            let (_, own) = self.run(g, &ctx, visible, ev.key, ev.time)?;
            for (l, heads) in own.into_iter().enumerate() {
                for (h, (k, v)) in heads.into_iter().enumerate() {
                    ctx.keys[l][h].push(k);
                    ctx.values[l][h].push(v);
                }
            }
            ctx.times.push(ev.time);
        }
        Ok(ctx)
    }

    /// Concatenated layer embeddings `[e^0; …; e^L]` of `key` at `t`, attending to
    /// the first `prefix` context events, all of which must precede `t`.
    pub fn embed(
        &self,
        g: &mut Graph,
        ctx: &EncoderContext,
        prefix: usize,
        key: TypeKey,
        t: f64,
    ) -> Result<crate::autodiff::Var> {
        if prefix > ctx.len() {
            return Err(Error::Dimension(format!(
                "prefix {prefix} exceeds context of {}",
                ctx.len()
            )));
        }
        if prefix > 0 && !(ctx.times[prefix - 1] < t) {
            return Err(Error::NotAfterHistory {
                t,
                last: ctx.times[prefix - 1],
            });
        }
        let (layers, _) = self.run(g, ctx, prefix, key, t)?;
        Ok(g.concat(&layers))
    }
}

/// Hyperparameters of [`AttentiveModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentiveConfig {
    pub encoder: EncoderSpec,
    /// Uniformly sampled negative types per survival point when the type space
    /// is too large to enumerate.
    pub survival_negatives: usize,
    /// Type spaces up to this size are summed exactly in the survival term.
    pub enumerate_limit: u64,
    /// Width of the window covered by one thinning bound.
    pub bound_lookahead: f64,
    pub init_scale: f64,
}

impl AttentiveConfig {
    pub fn new(space: TypeSpace) -> Self {
        Self {
            encoder: EncoderSpec::new(space),
            survival_negatives: 64,
            enumerate_limit: 4096,
            bound_lookahead: 1.0,
            init_scale: 0.1,
        }
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Intensity `softplus(w · [e^0; …; e^L](t) + b)` on top of an [`Encoder`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentiveModel {
    config: AttentiveConfig,
    params: ParamSet,
    encoder: Encoder,
    head_w: ParamId,
    head_b: ParamId,
}

impl AttentiveModel {
    /// `event_rate` is the total events per time unit; the head bias starts at
    /// the rate that spreads it evenly over all types.
    pub fn new<R: Rng + ?Sized>(config: AttentiveConfig, event_rate: f64, rng: &mut R) -> Result<Self> {
        if config.survival_negatives == 0 {
            return Err(Error::InvalidArgument("survival_negatives must be >= 1".into()));
        }
        if !(config.bound_lookahead > 0.0) {
            return Err(Error::InvalidArgument("bound_lookahead must be > 0".into()));
        }
        let mut params = ParamSet::default();
        let encoder = Encoder::new(config.encoder.clone(), &mut params, config.init_scale, rng)?;
        let width = config.encoder.output_width();
        let head_w = params.add("head.w", Tensor::uniform(1, width, config.init_scale, rng));
        let per_type = (event_rate.max(1e-9) / config.encoder.space.size() as f64).max(1e-300);
        let head_b = params.add(
            "head.b",
            Tensor {
                rows: 1,
                cols: 1,
                data: vec![inverse_softplus(per_type)],
            },
        );
        Ok(Self {
            config,
            params,
            encoder,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &AttentiveConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub(crate) fn param_set(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn head(&self, g: &mut Graph, emb: crate::autodiff::Var) -> crate::autodiff::Var {
        let z = g.linear(self.head_w, emb);
        let z = g.bias(z, self.head_b);
        g.softplus(z)
    }

    /// Concatenated layer embeddings of `key` at `t` given `history`.
    pub fn ct_attention_embed(&self, history: &[Occurrence], key: TypeKey, t: f64) -> Result<Vec<f64>> {
        check_history(history, t)?;
        let mut g = Graph::new(&self.params);
        let ctx = self.encoder.context(&mut g, history)?;
        let v = self.encoder.embed(&mut g, &ctx, history.len(), key, t)?;
        Ok(g.value(v).to_vec())
    }

    /// Gradient of one embedding coordinate with respect to all parameters.
    pub fn embed_coordinate_grad(
        &self,
        history: &[Occurrence],
        key: TypeKey,
        t: f64,
        coord: usize,
    ) -> Result<(f64, Grads)> {
        check_history(history, t)?;
        let mut g = Graph::new(&self.params);
        let ctx = self.encoder.context(&mut g, history)?;
        let v = self.encoder.embed(&mut g, &ctx, history.len(), key, t)?;
        let n = g.len(v);
        if coord >= n {
            return Err(Error::Dimension(format!("coordinate {coord} of {n}")));
        }
        let mut seed = vec![0.0; n];
        seed[coord] = 1.0;
        Ok((g.value(v)[coord], g.backward_with(v, &seed)))
    }

    /// `λ_key(t)` and its parameter gradient.
    pub fn intensity_grad(&self, history: &[Occurrence], key: TypeKey, t: f64) -> Result<(f64, Grads)> {
        check_history(history, t)?;
        let mut g = Graph::new(&self.params);
        let ctx = self.encoder.context(&mut g, history)?;
        let e = self.encoder.embed(&mut g, &ctx, history.len(), key, t)?;
        let lam = self.head(&mut g, e);
        Ok((g.scalar(lam), g.backward(lam)))
    }

    fn exhaustive(&self) -> bool {
        let n = self.config.encoder.space.size();
        n <= self.config.enumerate_limit && n <= MAX_ENUMERABLE
    }

    /// Types summed at one survival point and the weight applied to their sum.
    fn survival_types<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<TypeKey>, f64)> {
        let space = self.config.encoder.space;
        if self.exhaustive() {
            Ok((space.enumerate()?, 1.0))
        } else {
            let n = self.config.survival_negatives;
            let keys = (0..n).map(|_| space.sample(rng)).collect();
            Ok((keys, space.size() as f64 / n as f64))
        }
    }

    /// Monte Carlo log-likelihood with its gradient.
    pub fn ll_grad<R: Rng + ?Sized>(
        &self,
        timeline: &Timeline,
        mc_samples: usize,
        rng: &mut R,
    ) -> Result<(f64, Grads)> {
        if mc_samples == 0 {
            return Err(Error::InvalidArgument("mc_samples must be >= 1".into()));
        }
        let mut g = Graph::new(&self.params);
        let ctx = self.encoder.context(&mut g, &timeline.events)?;
        let mut terms = Vec::new();
        for (_, e) in timeline.observed() {
            let p = ctx.prefix_len(e.time);
            let emb = self.encoder.embed(&mut g, &ctx, p, e.key, e.time)?;
            let lam = self.head(&mut g, emb);
            let v = g.scalar(lam);
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::ZeroIntensity { t: e.time, value: v });
            }
            let l = g.ln(lam);
            terms.push((l, 1.0));
        }
        for (a, b) in super::survival_intervals(timeline) {
            let w = (b - a) / mc_samples as f64;
            for _ in 0..mc_samples {
                let u = a + (b - a) * rng.random::<f64>();
                if u <= a {
                    continue;
                }
                let p = ctx.prefix_len(u);
                let (keys, scale) = self.survival_types(rng)?;
                for key in keys {
                    let emb = self.encoder.embed(&mut g, &ctx, p, key, u)?;
                    let lam = self.head(&mut g, emb);
                    terms.push((lam, -w * scale));
                }
            }
        }
        if terms.is_empty() {
            return Ok((0.0, self.params.zero_grads()));
        }
        let out = g.weighted_sum(&terms);
        Ok((g.scalar(out), g.backward(out)))
    }

    fn rates(&self, history: &[Occurrence], keys: &[TypeKey], t: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let ctx = self.encoder.context(&mut g, history)?;
        let mut out = Vec::with_capacity(keys.len());
        for &k in keys {
            let emb = self.encoder.embed(&mut g, &ctx, history.len(), k, t)?;
            let lam = self.head(&mut g, emb);
            out.push(g.scalar(lam));
        }
        Ok(out)
    }
}

impl IntensityModel for AttentiveModel {
    fn type_space(&self) -> TypeSpace {
        self.config.encoder.space
    }

    fn intensities(&self, history: &[Occurrence], keys: &[TypeKey], t: f64) -> Result<Vec<f64>> {
        check_history(history, t)?;
        self.rates(history, keys, t)
    }

    fn total_intensity(&self, history: &[Occurrence], t: f64) -> Result<f64> {
        check_history(history, t)?;
        if self.exhaustive() {
            let keys = self.type_space().enumerate()?;
            return Ok(self.rates(history, &keys, t)?.iter().sum());
        }
        Err(Error::InvalidArgument(format!(
            "type space of {} types is too large to sum exactly",
            self.type_space().size()
        )))
    }

    fn survival_rate<R: Rng>(&self, history: &[Occurrence], t: f64, rng: &mut R) -> Result<f64> {
        check_history(history, t)?;
        let (keys, scale) = self.survival_types(rng)?;
        Ok(scale * self.rates(history, &keys, t)?.iter().sum::<f64>())
    }

    /// Twice the largest total intensity on a 16-point grid over the lookahead window.
    fn thinning_bound(&self, history: &[Occurrence], from: f64) -> Result<ThinningBound> {
        let h = self.config.bound_lookahead;
        let keys = self.type_space().enumerate()?;
        let mut g = Graph::new(&self.params);
        let ctx = self.encoder.context(&mut g, history)?;
        let p = history.partition_point(|e| e.time <= from);
        let mut peak: f64 = 0.0;
        for i in 1..=16 {
            let t = from + h * i as f64 / 16.0;
            let mut total = 0.0;
            for &k in &keys {
                let emb = self.encoder.embed(&mut g, &ctx, p, k, t)?;
                let lam = self.head(&mut g, emb);
                total += g.scalar(lam);
            }
            peak = peak.max(total);
        }
        Ok(ThinningBound {
            rate: 2.0 * peak,
            until: from + h,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(space: TypeSpace, layers: usize) -> AttentiveModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = AttentiveConfig::new(space);
        cfg.encoder.layers = layers;
        cfg.init_scale = 0.5;
        AttentiveModel::new(cfg, 3.0, &mut rng).unwrap()
    }

    fn history() -> Vec<Occurrence> {
        [(0.3, 1), (1.1, 0), (1.1, 2), (2.0, 1)]
            .iter()
            .map(|&(t, c)| Occurrence::new(t, TypeKey::Categorical(c)))
            .collect()
    }

    #[test]
    fn empty_history_layers_repeat_type_embedding() {
        let m = model(TypeSpace::Categorical { categories: 3 }, 2);
        let e = m.ct_attention_embed(&[], TypeKey::Categorical(1), 4.0).unwrap();
        let w = m.config.encoder.width();
        for l in 1..3 {
            assert_eq!(&e[l * w..(l + 1) * w], &e[..w]);
        }
    }

    #[test]
    fn future_events_do_not_change_embedding() {
        let m = model(TypeSpace::Categorical { categories: 3 }, 2);
        let h = history();
        let key = TypeKey::Categorical(0);
        let a = m.ct_attention_embed(&h[..3], key, 1.5).unwrap();
        let mut g = Graph::new(&m.params);
        let ctx = m.encoder.context(&mut g, &h).unwrap();
        let v = m.encoder.embed(&mut g, &ctx, ctx.prefix_len(1.5), key, 1.5).unwrap();
        assert_eq!(a, g.value(v));
    }

    #[test]
    fn structured_embedding_width() {
        let m = model(
            TypeSpace::Structured {
                entities: 4,
                predicates: 2,
            },
            1,
        );
        let key = TypeKey::Structured {
            subject: 3,
            predicate: 1,
            object: 0,
        };
        let e = m.ct_attention_embed(&[], key, 1.0).unwrap();
        assert_eq!(e.len(), 2 * 3 * m.config.encoder.embed_dim);
        let bad = TypeKey::Structured {
            subject: 4,
            predicate: 0,
            object: 0,
        };
        assert!(matches!(
            m.ct_attention_embed(&[], bad, 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn initial_total_rate_matches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = AttentiveConfig::new(TypeSpace::Categorical { categories: 4 });
        cfg.init_scale = 1e-6;
        let m = AttentiveModel::new(cfg, 2.0, &mut rng).unwrap();
        let total = m.total_intensity(&[], 1.0).unwrap();
        assert!((total - 2.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn mc_ll_matches_generic_estimator_for_same_draws() {
        let m = model(TypeSpace::Categorical { categories: 3 }, 1);
        let tl = Timeline::new(history(), 0.0, 3.0);
        let (a, _) = m.ll_grad(&tl, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = super::super::log_likelihood(&m, &tl, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}
