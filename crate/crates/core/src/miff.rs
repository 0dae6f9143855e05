//! Multi-image feature fusion: a view transformer over the extra views of
//! each ray point, then a ray transformer over the points of each pixel,
//! then a zero-initialized RGB head.
//!
//! Work is batched over target pixels. Token rows are ordered
//! `(pixel, point, view)`, so the `V` tokens of one ray point are
//! contiguous and form one attention group. No positional information is
//! attached to views; ray tokens carry their normalized inverse depth.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::cap::{ladder_positions, EpipolarTensor};
use crate::error::{shape_err, Error, Result};
use crate::graph::{AttnMask, Graph, Var};
use crate::nn::{self, AttnShape};
use crate::params::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Name prefix shared by every fusion parameter.
pub const PREFIX: &str = "miff.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MiffConfig {
    /// Width of the incoming feature maps.
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_width: usize,
}

impl Default for MiffConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            d_model: 32,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_width: 64,
        }
    }
}

impl MiffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config(
                "transformers need at least one encoder and one decoder layer".into(),
            ));
        }
        if self.channels == 0 || self.ffn_width == 0 {
            return Err(Error::Config("channels and ffn_width must be positive".into()));
        }
        Ok(())
    }
}

fn init_transformer<T: Scalar, R: Rng + ?Sized>(
    p: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    din: usize,
    cfg: &MiffConfig,
) {
    let d = cfg.d_model;
    nn::init_linear(p, rng, &format!("{prefix}.in"), din, d);
    nn::init_linear(p, rng, &format!("{prefix}.query"), cfg.channels, d);
    for l in 0..cfg.enc_layers {
        nn::init_encoder_layer(p, rng, &format!("{prefix}.enc{l}"), d, cfg.ffn_width);
    }
    nn::init_layer_norm(p, &format!("{prefix}.enc_norm"), d);
    for l in 0..cfg.dec_layers {
        nn::init_decoder_layer(p, rng, &format!("{prefix}.dec{l}"), d, cfg.ffn_width);
    }
    nn::init_layer_norm(p, &format!("{prefix}.out_norm"), d);
}

/// Writes freshly initialized fusion weights into `p`. The RGB head is zero.
pub fn init_miff<T: Scalar, R: Rng + ?Sized>(p: &mut ParamStore<T>, rng: &mut R, cfg: &MiffConfig) -> Result<()> {
    cfg.validate()?;
    init_transformer(p, rng, "miff.view", cfg.channels, cfg);
    init_transformer(p, rng, "miff.ray", cfg.d_model + 1, cfg);
    p.insert("miff.head.w", Tensor::zeros(&[cfg.d_model, 3]));
    p.insert("miff.head.b", Tensor::zeros(&[3]));
    Ok(())
}

/// Encoder over `tokens` (`groups` groups of `lk` rows), then decoder
/// layers where `query` (one row per group) cross-attends the normalized
/// encoder output. Returns the normalized decoder output and the last
/// cross-attention node.
fn encode_decode<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    prefix: &str,
    cfg: &MiffConfig,
    tokens: Var,
    query: Var,
    groups: usize,
    mask: &AttnMask,
) -> Result<(Var, Var)> {
    let shape = AttnShape {
        groups,
        heads: cfg.heads,
    };
    let mut x = tokens;
    for l in 0..cfg.enc_layers {
        x = nn::encoder_layer(g, b, &format!("{prefix}.enc{l}"), x, shape, mask)?;
    }
    let memory = nn::layer_norm(g, b, &format!("{prefix}.enc_norm"), x)?;
    let mut y = query;
    let mut last = None;
    for l in 0..cfg.dec_layers {
        let (out, att) = nn::decoder_layer(g, b, &format!("{prefix}.dec{l}"), y, memory, shape, mask)?;
        y = out;
        last = Some(att);
    }
    let y = nn::layer_norm(g, b, &format!("{prefix}.out_norm"), y)?;
    let att = last.ok_or_else(|| Error::Config("no decoder layers".into()))?;
    Ok((y, att))
}

fn mask_factors<T: Scalar>(valid: &[bool]) -> Vec<T> {
    valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect()
}

/// Fuses the `views` tokens of every `(pixel, point)` group into one
/// feature `[pixels*points, d]`. `tokens` is `[pixels*points*views, C]`
/// and `query` is the target feature of each pixel, `[pixels, C]`. Groups
/// without a valid token produce zero rows.
pub fn view_transformer<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &MiffConfig,
    tokens: Var,
    mask: &[bool],
    query: Var,
    points: usize,
    views: usize,
) -> Result<Var> {
    let pixels = g.shape(query)[0];
    let groups = pixels * points;
    if views == 0 {
        return Ok(g.constant(Tensor::zeros(&[groups, cfg.d_model])));
    }
    if mask.len() != groups * views || g.shape(tokens) != [groups * views, cfg.channels] {
        return Err(shape_err!(
            "view tokens {:?} with {} mask entries do not match {pixels} pixels x {points} points x {views} views x {} channels",
            g.shape(tokens),
            mask.len(),
            cfg.channels
        ));
    }
    let x = nn::linear(g, b, "miff.view.in", tokens)?;
    let q = nn::linear(g, b, "miff.view.query", query)?;
    let q = g.repeat_rows(q, points)?;
    let keys = AttnMask::Keys(mask.to_vec());
    let (fused, _) = encode_decode(g, b, "miff.view", cfg, x, q, groups, &keys)?;
    let any: Vec<bool> = mask.chunks(views).map(|c| c.iter().any(|&m| m)).collect();
    g.row_scale(fused, mask_factors(&any))
}

/// Attends over the `points` fused features of each pixel. `positions`
/// holds the normalized inverse depth of each point and `point_valid` is
/// `[pixels*points]`. Returns the pooled feature `[pixels, d]` (zero for
/// pixels without a valid point) and the last decoder cross-attention node,
/// whose weights are `[pixels, heads, 1, points]`.
pub fn ray_transformer<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &MiffConfig,
    fused: Var,
    point_valid: &[bool],
    query: Var,
    positions: &[f64],
) -> Result<(Var, Var)> {
    let pixels = g.shape(query)[0];
    let points = positions.len();
    if points == 0 {
        return Err(Error::Invalid("a ray needs at least one point".into()));
    }
    if point_valid.len() != pixels * points || g.shape(fused) != [pixels * points, cfg.d_model] {
        return Err(shape_err!(
            "ray tokens {:?} with {} mask entries do not match {pixels} pixels x {points} points",
            g.shape(fused),
            point_valid.len()
        ));
    }
    let col: Vec<T> = (0..pixels).flat_map(|_| positions.iter().map(|&u| T::of(u))).collect();
    let col = g.constant(Tensor::new(&[pixels * points, 1], col)?);
    let x = g.concat_cols(fused, col)?;
    let x = nn::linear(g, b, "miff.ray.in", x)?;
    let q = nn::linear(g, b, "miff.ray.query", query)?;
    let keys = AttnMask::Keys(point_valid.to_vec());
    let (y, att) = encode_decode(g, b, "miff.ray", cfg, x, q, pixels, &keys)?;
    let any: Vec<bool> = point_valid.chunks(points).map(|c| c.iter().any(|&m| m)).collect();
    Ok((g.row_scale(y, mask_factors(&any))?, att))
}

/// Fusion result for a batch of pixels.
#[derive(Debug, Clone)]
pub struct MiffOutput {
    /// Residual color `[pixels, 3]`.
    pub delta: Var,
    /// Last ray-decoder cross-attention; `None` when there are no views.
    pub ray_attention: Option<Var>,
    pub pixel_valid: Vec<bool>,
}

/// Full fusion for a batch of pixels; see [`view_transformer`] for the
/// token layout.
pub fn miff_batch<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &MiffConfig,
    tokens: Var,
    mask: &[bool],
    query: Var,
    views: usize,
    positions: &[f64],
) -> Result<MiffOutput> {
    cfg.validate()?;
    let pixels = g.shape(query)[0];
    if g.shape(query) != [pixels, cfg.channels] {
        return Err(shape_err!(
            "query rows {:?} must have {} channels",
            g.shape(query),
            cfg.channels
        ));
    }
    let points = positions.len();
    if views == 0 {
        return Ok(MiffOutput {
            delta: g.constant(Tensor::zeros(&[pixels, 3])),
            ray_attention: None,
            pixel_valid: vec![false; pixels],
        });
    }
    let fused = view_transformer(g, b, cfg, tokens, mask, query, points, views)?;
    let point_valid: Vec<bool> = mask.chunks(views).map(|c| c.iter().any(|&m| m)).collect();
    let (pooled, att) = ray_transformer(g, b, cfg, fused, &point_valid, query, positions)?;
    let pixel_valid: Vec<bool> = point_valid.chunks(points).map(|c| c.iter().any(|&m| m)).collect();
    let delta = nn::linear(g, b, "miff.head", pooled)?;
    let delta = g.row_scale(delta, mask_factors(&pixel_valid))?;
    Ok(MiffOutput {
        delta,
        ray_attention: Some(att),
        pixel_valid,
    })
}

/// Per-pixel ray attention of a full image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<T> {
    /// Last ray-decoder cross-attention, `[sH, sW, heads, P]`.
    pub raw: Tensor<T>,
    /// Head average, `[sH, sW, P]`.
    pub averaged: Tensor<T>,
}

impl<T: Scalar> AttentionMaps<T> {
    fn empty(h: usize, w: usize, heads: usize, p: usize) -> Self {
        Self {
            raw: Tensor::zeros(&[h, w, heads, p]),
            averaged: Tensor::zeros(&[h, w, p]),
        }
    }

    /// Copies `[n, heads, 1, P]` weights for pixels starting at flat index `start`.
    fn fill(&mut self, start: usize, weights: &[T], heads: usize, p: usize) {
        let n = weights.len() / (heads * p);
        let inv = T::of(1.0 / heads as f64);
        for i in 0..n {
            let src = &weights[i * heads * p..(i + 1) * heads * p];
            let pix = start + i;
            self.raw.data_mut()[pix * heads * p..(pix + 1) * heads * p].copy_from_slice(src);
            let avg = &mut self.averaged.data_mut()[pix * p..(pix + 1) * p];
            for (j, a) in avg.iter_mut().enumerate() {
                let mut s = T::zero();
                for h in 0..heads {
                    s += src[h * p + j];
                }
                *a = s * inv;
            }
        }
    }
}

/// Inference over whole epipolar tensors, `chunk` target pixels at a time.
/// `f0` is the target feature map `[sH, sW, C]`. Returns the residual image
/// `[sH, sW, 3]` and the ray attention maps.
pub fn miff_forward<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &MiffConfig,
    f0: &Tensor<T>,
    extras: &[EpipolarTensor<T>],
    chunk: usize,
) -> Result<(Tensor<T>, AttentionMaps<T>)> {
    cfg.validate()?;
    let (h, w, c) = match *f0.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(shape_err!("target features must be [h,w,c], got {:?}", s)),
    };
    if c != cfg.channels {
        return Err(shape_err!(
            "target features have {c} channels, config expects {}",
            cfg.channels
        ));
    }
    let p = extras.first().map_or(1, |e| e.depths.len());
    for e in extras {
        if e.features.shape() != [p, h, w, c] || e.mask.shape() != [p, h, w] {
            return Err(shape_err!(
                "epipolar tensor {:?} does not match [{p}, {h}, {w}, {c}]",
                e.features.shape()
            ));
        }
    }
    let v = extras.len();
    let mut delta = Tensor::zeros(&[h, w, 3]);
    let mut maps = AttentionMaps::empty(h, w, cfg.heads, p);
    if v == 0 {
        return Ok((delta, maps));
    }
    let positions = ladder_positions(p);
    let chunk = chunk.max(1);
    let n_pix = h * w;
    let mut start = 0;
    while start < n_pix {
        let end = (start + chunk).min(n_pix);
        let n = end - start;
        let mut tokens = Vec::with_capacity(n * p * v * c);
        let mut mask = Vec::with_capacity(n * p * v);
        for pix in start..end {
            for i in 0..p {
                let cell = i * n_pix + pix;
                for e in extras {
                    tokens.extend_from_slice(&e.features.data()[cell * c..(cell + 1) * c]);
                    mask.push(e.mask.data()[cell]);
                }
            }
        }
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let tok = g.constant(Tensor::new(&[n * p * v, c], tokens)?);
        let query = g.constant(Tensor::new(&[n, c], f0.data()[start * c..end * c].to_vec())?);
        let out = miff_batch(&mut g, &b, cfg, tok, &mask, query, v, &positions)?;
        delta.data_mut()[start * 3..end * 3].copy_from_slice(g.value(out.delta).data());
        if let Some(att) = out.ray_attention.and_then(|a| g.attention_weights(a)) {
            maps.fill(start, att, cfg.heads, p);
        }
        start = end;
    }
    Ok((delta, maps))
}

/// Depth at the strongest averaged attention of each pixel. Ties go to the
/// nearer depth; pixels with no attention mass get depth 0.
pub fn extract_depth_map<T: Scalar>(maps: &AttentionMaps<T>, depths: &[f64]) -> Result<Tensor<f64>> {
    let (h, w, p) = match *maps.averaged.shape() {
        [h, w, p] => (h, w, p),
        ref s => return Err(shape_err!("attention maps must be [h,w,P], got {:?}", s)),
    };
    if depths.len() != p {
        return Err(shape_err!("{} depths for {p} attention entries", depths.len()));
    }
    let mut out = vec![0.0; h * w];
    for (pix, d) in out.iter_mut().enumerate() {
        let a = &maps.averaged.data()[pix * p..(pix + 1) * p];
        let mut best = 0;
        for j in 1..p {
            if a[j] > a[best] {
                best = j;
            }
        }
        if a[best] > T::zero() {
            *d = depths[best];
        }
    }
    Tensor::new(&[h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::params::glorot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(channels: usize) -> MiffConfig {
        MiffConfig {
            channels,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_width: 12,
        }
    }

    fn params(cfg: &MiffConfig, seed: u64, head: bool) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_miff(&mut p, &mut rng, cfg).unwrap();
        if head {
            p.insert("miff.head.w", glorot(&mut rng, &[cfg.d_model, 3], cfg.d_model, 3));
            p.insert("miff.head.b", Tensor::from_f64(&[3], &[0.1, -0.2, 0.05]).unwrap());
        }
        p
    }

    fn features(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    use rand::Rng;

    fn epipolar(p: usize, h: usize, w: usize, c: usize, seed: u64, keep: f64) -> EpipolarTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = features(&[p, h, w, c], seed + 100);
        let mask = Tensor::from_fn(&[p, h, w], |_| rng.random_bool(keep));
        for (cell, &m) in mask.data().iter().enumerate() {
            if !m {
                features.data_mut()[cell * c..(cell + 1) * c].fill(0.0);
            }
        }
        EpipolarTensor {
            features,
            mask,
            depths: (0..p).map(|i| 1.0 + i as f64).collect(),
        }
    }

    #[test]
    fn fresh_head_gives_exact_zero() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 1, false);
        let f0 = features(&[3, 3, 4], 2);
        let e = [epipolar(4, 3, 3, 4, 3, 0.7), epipolar(4, 3, 3, 4, 4, 0.7)];
        let (delta, _) = miff_forward(&p, &cfg, &f0, &e, 4).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
        let (delta, maps) = miff_forward(&p, &cfg, &f0, &[], 4).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
        assert!(maps.averaged.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_views_gives_zero_even_with_trained_head() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 1, true);
        let f0 = features(&[2, 2, 4], 2);
        let (delta, _) = miff_forward(&p, &cfg, &f0, &[], 4).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn view_order_does_not_matter() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 5, true);
        let f0 = features(&[3, 4, 4], 6);
        let e: Vec<_> = (0..3).map(|k| epipolar(5, 3, 4, 4, 10 + k, 0.8)).collect();
        let (a, _) = miff_forward(&p, &cfg, &f0, &e, 5).unwrap();
        let shuffled = [e[2].clone(), e[0].clone(), e[1].clone()];
        let (b, _) = miff_forward(&p, &cfg, &f0, &shuffled, 7).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn any_view_permutation_gives_the_same_delta(
            order in proptest::strategy::Strategy::prop_shuffle(proptest::strategy::Just((0..4usize).collect::<Vec<_>>())),
            seed in 0u64..1000,
            keep in 0.3f64..1.0,
        ) {
            let cfg = small_cfg(3);
            let p = params(&cfg, seed, true);
            let f0 = features(&[2, 3, 3], seed + 1);
            let e: Vec<_> = (0..4).map(|k| epipolar(3, 2, 3, 3, seed + 10 + k, keep)).collect();
            let shuffled: Vec<_> = order.iter().map(|&k| e[k].clone()).collect();
            let (a, ma) = miff_forward(&p, &cfg, &f0, &e, 6).unwrap();
            let (b, mb) = miff_forward(&p, &cfg, &f0, &shuffled, 4).unwrap();
            proptest::prop_assert!(a.max_abs_diff(&b) < 1e-12);
            proptest::prop_assert!(ma.averaged.max_abs_diff(&mb.averaged) < 1e-12);
        }
    }

    #[test]
    fn duplicated_view_matches_single_view() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 8, true);
        let f0 = features(&[2, 3, 4], 9);
        let e = epipolar(4, 2, 3, 4, 11, 0.8);
        let (one, m1) = miff_forward(&p, &cfg, &f0, &[e.clone()], 16).unwrap();
        let (two, m2) = miff_forward(&p, &cfg, &f0, &[e.clone(), e], 16).unwrap();
        assert!(one.max_abs_diff(&two) < 1e-12);
        assert!(m1.averaged.max_abs_diff(&m2.averaged) < 1e-12);
    }

    #[test]
    fn chunking_does_not_change_results() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 8, true);
        let f0 = features(&[3, 3, 4], 9);
        let e = [epipolar(3, 3, 3, 4, 12, 0.6)];
        let (a, ma) = miff_forward(&p, &cfg, &f0, &e, 1).unwrap();
        let (b, mb) = miff_forward(&p, &cfg, &f0, &e, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn attention_is_a_distribution_over_valid_points() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 2, true);
        let f0 = features(&[4, 4, 4], 3);
        let e = [epipolar(6, 4, 4, 4, 20, 0.3), epipolar(6, 4, 4, 4, 21, 0.3)];
        let (delta, maps) = miff_forward(&p, &cfg, &f0, &e, 8).unwrap();
        for pix in 0..16 {
            let (y, x) = (pix / 4, pix % 4);
            let valid: Vec<bool> = (0..6).map(|i| e.iter().any(|t| t.mask.at(&[i, y, x]))).collect();
            let a = &maps.averaged.data()[pix * 6..(pix + 1) * 6];
            let total: f64 = a.iter().sum();
            if valid.iter().any(|&v| v) {
                assert!((total - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(total, 0.0);
                assert!((0..3).all(|c| delta.at(&[y, x, c]) == 0.0));
            }
            for (w, ok) in a.iter().zip(&valid) {
                assert!(*w >= 0.0);
                if !ok {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }

    #[test]
    fn single_point_and_single_view_get_full_weight() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 2, true);
        let f0 = features(&[2, 2, 4], 3);
        let mut e = epipolar(1, 2, 2, 4, 30, 1.0);
        e.depths = vec![2.5];
        let (_, maps) = miff_forward(&p, &cfg, &f0, &[e], 8).unwrap();
        assert!(maps.averaged.data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
        let d = extract_depth_map(&maps, &[2.5]).unwrap();
        assert!(d.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn fully_masked_rays_give_zero() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 2, true);
        let f0 = features(&[2, 2, 4], 3);
        let e = epipolar(3, 2, 2, 4, 30, 0.0);
        let (delta, maps) = miff_forward(&p, &cfg, &f0, &[e], 8).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
        assert!(maps.raw.data().iter().all(|&v| v == 0.0));
        let d = extract_depth_map(&maps, &[1.0, 2.0, 3.0]).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_map_argmax_and_ties() {
        let averaged = Tensor::<f64>::from_f64(&[1, 2, 3], &[0.1, 0.7, 0.2, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let maps = AttentionMaps {
            raw: Tensor::zeros(&[1, 2, 1, 3]),
            averaged,
        };
        let d = extract_depth_map(&maps, &[1.0, 1.5, 3.0]).unwrap();
        assert_eq!(d.data(), &[1.5, 1.0]);
        assert!(extract_depth_map(&maps, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn same_weights_run_for_any_view_and_point_count() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 2, true);
        let f0 = features(&[2, 2, 4], 3);
        for pts in [1, 3, 8] {
            for views in [1, 2, 4] {
                let e: Vec<_> = (0..views).map(|k| epipolar(pts, 2, 2, 4, 40 + k as u64, 0.9)).collect();
                let (delta, maps) = miff_forward(&p, &cfg, &f0, &e, 3).unwrap();
                assert_eq!(delta.shape(), &[2, 2, 3]);
                assert_eq!(maps.averaged.shape(), &[2, 2, pts]);
            }
        }
    }

    #[test]
    fn inconsistent_epipolar_shapes_are_rejected() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 2, false);
        let f0 = features(&[2, 2, 4], 3);
        let e = [epipolar(3, 2, 2, 4, 1, 1.0), epipolar(4, 2, 2, 4, 2, 1.0)];
        assert!(matches!(miff_forward(&p, &cfg, &f0, &e, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(4);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(4);
        cfg.dec_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ray_transformer_gradient_check() {
        let cfg = small_cfg(4);
        let p = params(&cfg, 3, true);
        let fused = features(&[2 * 3, 8], 4);
        let query = features(&[2, 4], 5);
        let valid = [true, false, true, true, true, false];
        let pos = [0.0, 0.5, 1.0];
        let weight = features(&[2, 8], 6);
        let err = check_params(
            |g, b| {
                let f = g.constant(fused.clone());
                let q = g.constant(query.clone());
                let (y, _) = ray_transformer(g, b, &cfg, f, &valid, q, &pos)?;
                let w = g.constant(weight.clone());
                let y = g.mul(y, w)?;
                g.sum(y)
            },
            &p.iter()
                .filter(|(n, _)| n.starts_with("miff.ray"))
                .fold(ParamStore::new(), |mut s, (n, t)| {
                    s.insert(n, t.clone());
                    s
                }),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
