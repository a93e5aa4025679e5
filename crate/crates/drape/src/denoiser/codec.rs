//! Displacement-map ⇄ latent codec.
//!
//! The analytic codec pools each normalized map channel 4×4 and adds one
//! channel of local residual energy; decoding upsamples the mean channels
//! with a mean-preserving bilinear kernel, which makes decode∘encode an
//! exact linear projection. The learned variant keeps the analytic encoder
//! and trains a small convolutional refinement on the decoder side against
//! the combined map + lifted-vertex reconstruction loss.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Latent;
use crate::mesh::{TriMesh, Vec3};
use crate::uvcodec::{lift_transpose, DisplacementMap, UvAtlas};
use crate::{Error, Result};

use super::nn::{conv3x3_backward, conv3x3_forward, silu, silu_grad, AdamW, Params, Tensor};

/// Spatial pooling factor between map and latent.
pub const POOL: usize = 4;
/// Latent channels: 3 pooled means + 1 residual-energy channel.
pub const LATENT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecKind {
    AnalyticPool,
    Learned,
}

/// Decoder refinement channels for the learned codec.
const DECODER_HIDDEN: usize = 16;

/// The latent codec. `scale` is the dataset displacement scale that
/// normalizes map values to roughly [−1, 1] before encoding.
#[derive(Debug, Clone)]
pub struct LatentCodec {
    pub kind: CodecKind,
    pub scale: f64,
    /// Decoder parameters; present only for the learned kind.
    pub decoder: Option<Params>,
}

impl LatentCodec {
    pub fn analytic(scale: f64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::InvalidParam("codec scale must be positive".into()));
        }
        Ok(Self {
            kind: CodecKind::AnalyticPool,
            scale,
            decoder: None,
        })
    }

    pub fn learned(scale: f64, seed: u64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::InvalidParam("codec scale must be positive".into()));
        }
        Ok(Self {
            kind: CodecKind::Learned,
            scale,
            decoder: Some(init_decoder_params(seed)),
        })
    }

    pub fn latent_shape(&self, map_resolution: (usize, usize)) -> (usize, usize, usize) {
        (
            map_resolution.0 / POOL,
            map_resolution.1 / POOL,
            LATENT_CHANNELS,
        )
    }
}

/// Zero-initialized output layer: a fresh learned decoder reproduces the
/// analytic decode exactly.
fn init_decoder_params(seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let mut w1 = Tensor::zeros(&[DECODER_HIDDEN, LATENT_CHANNELS, 3, 3]);
    let k = 1.0 / ((LATENT_CHANNELS * 9) as f64).sqrt();
    for v in &mut w1.data {
        *v = rng.random_range(-k..k);
    }
    params.add("dec1.weight", w1);
    params.add("dec1.bias", Tensor::zeros(&[DECODER_HIDDEN]));
    params.add("dec2.weight", Tensor::zeros(&[3, DECODER_HIDDEN, 3, 3]));
    params.add("dec2.bias", Tensor::zeros(&[3]));
    params
}

/// 4×4 average pooling of the normalized map channels plus one channel of
/// local residual energy (RMS deviation from the block means).
pub fn encode_map(map: &DisplacementMap, codec: &LatentCodec) -> Result<Latent> {
    let (rows, cols) = map.resolution();
    if rows % POOL != 0 || cols % POOL != 0 {
        return Err(Error::ResolutionMismatch {
            expected: (rows / POOL * POOL, cols / POOL * POOL),
            actual: (rows, cols),
        });
    }
    if !map.is_finite() {
        return Err(Error::NonFinite("displacement map"));
    }
    let (h, w) = (rows / POOL, cols / POOL);
    let mut grid = Array3::zeros((h, w, LATENT_CHANNELS));
    let inv_scale = 1.0 / codec.scale;
    for bi in 0..h {
        for bj in 0..w {
            let mut means = [0.0; 3];
            for (c, mean) in means.iter_mut().enumerate() {
                let mut sum = 0.0;
                for di in 0..POOL {
                    for dj in 0..POOL {
                        sum += map.data[(bi * POOL + di, bj * POOL + dj, c)] * inv_scale;
                    }
                }
                *mean = sum / (POOL * POOL) as f64;
                grid[(bi, bj, c)] = *mean;
            }
            let mut residual = 0.0;
            for (c, mean) in means.iter().enumerate() {
                for di in 0..POOL {
                    for dj in 0..POOL {
                        let d =
                            map.data[(bi * POOL + di, bj * POOL + dj, c)] * inv_scale - mean;
                        residual += d * d;
                    }
                }
            }
            grid[(bi, bj, 3)] = (residual / (3 * POOL * POOL) as f64).sqrt();
        }
    }
    Ok(Latent { grid, step: 0 })
}

/// Mean-preserving bilinear 4× upsampling: bilinear interpolation plus a
/// per-block constant that restores the block mean exactly, so pooling the
/// result returns the input.
fn upsample_channel(latent: &Array3<f64>, channel: usize) -> ndarray::Array2<f64> {
    let (h, w, _) = latent.dim();
    let (rows, cols) = (h * POOL, w * POOL);
    let mut out = ndarray::Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let y = (i as f64 + 0.5) / POOL as f64 - 0.5;
            let x = (j as f64 + 0.5) / POOL as f64 - 0.5;
            let i0 = y.floor();
            let j0 = x.floor();
            let (fy, fx) = (y - i0, x - j0);
            let ci = |v: f64| -> usize { (v.max(0.0) as usize).min(h - 1) };
            let cj = |v: f64| -> usize { (v.max(0.0) as usize).min(w - 1) };
            out[(i, j)] = latent[(ci(i0), cj(j0), channel)] * (1.0 - fy) * (1.0 - fx)
                + latent[(ci(i0), cj(j0 + 1.0), channel)] * (1.0 - fy) * fx
                + latent[(ci(i0 + 1.0), cj(j0), channel)] * fy * (1.0 - fx)
                + latent[(ci(i0 + 1.0), cj(j0 + 1.0), channel)] * fy * fx;
        }
    }
    // Restore block means.
    for bi in 0..h {
        for bj in 0..w {
            let mut mean = 0.0;
            for di in 0..POOL {
                for dj in 0..POOL {
                    mean += out[(bi * POOL + di, bj * POOL + dj)];
                }
            }
            mean /= (POOL * POOL) as f64;
            let correction = latent[(bi, bj, channel)] - mean;
            for di in 0..POOL {
                for dj in 0..POOL {
                    out[(bi * POOL + di, bj * POOL + dj)] += correction;
                }
            }
        }
    }
    out
}

/// Analytic part of decode in normalized units: upsampled mean channels.
fn analytic_decode_normalized(latent: &Array3<f64>) -> Array3<f64> {
    let (h, w, _) = latent.dim();
    let mut out = Array3::zeros((h * POOL, w * POOL, 3));
    for c in 0..3 {
        let up = upsample_channel(latent, c);
        for i in 0..h * POOL {
            for j in 0..w * POOL {
                out[(i, j, c)] = up[(i, j)];
            }
        }
    }
    out
}

/// Upsampled copy of all latent channels (decoder-refinement input).
fn upsample_all(latent: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = latent.dim();
    let mut out = Array3::zeros((h * POOL, w * POOL, c));
    for ch in 0..c {
        let up = upsample_channel(latent, ch);
        for i in 0..h * POOL {
            for j in 0..w * POOL {
                out[(i, j, ch)] = up[(i, j)];
            }
        }
    }
    out
}

/// Learned refinement in normalized units: conv(SiLU(conv(up(z)))).
/// Returns the refinement and the pre-activation of the hidden layer.
fn decoder_refinement(params: &Params, up_all: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
    let a = conv3x3_forward(up_all, params.get("dec1.weight"), params.get("dec1.bias"));
    let h = a.mapv(silu);
    let out = conv3x3_forward(&h, params.get("dec2.weight"), params.get("dec2.bias"));
    (out, a)
}

/// Decodes a latent into a displacement map (physical units).
pub fn decode_map(latent: &Latent, codec: &LatentCodec) -> Result<DisplacementMap> {
    let (h, w, c) = latent.grid.dim();
    if c != LATENT_CHANNELS || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "latent shape {:?} (expected (h, w, {LATENT_CHANNELS}))",
            latent.grid.dim()
        )));
    }
    let mut normalized = analytic_decode_normalized(&latent.grid);
    if codec.kind == CodecKind::Learned {
        let params = codec
            .decoder
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("learned codec has no decoder weights".into()))?;
        let up = upsample_all(&latent.grid);
        let (refinement, _) = decoder_refinement(params, &up);
        normalized += &refinement;
    }
    Ok(DisplacementMap {
        data: normalized * codec.scale,
    })
}

/// Cotangent of [`decode_map`] with respect to the latent: the transpose
/// of the (linear) analytic path, plus the learned refinement's input
/// Jacobian when present.
pub fn decode_map_vjp(
    latent: &Latent,
    codec: &LatentCodec,
    d_map: &DisplacementMap,
) -> Result<Array3<f64>> {
    let (h, w, _) = latent.grid.dim();
    let d_phys = &d_map.data * codec.scale;

    // Transpose of mean-preserving upsampling applied per mean channel.
    let mut d_latent = Array3::zeros((h, w, LATENT_CHANNELS));
    for c in 0..3 {
        let mut chan = ndarray::Array2::zeros((h * POOL, w * POOL));
        for i in 0..h * POOL {
            for j in 0..w * POOL {
                chan[(i, j)] = d_phys[(i, j, c)];
            }
        }
        let d_up = upsample_transpose(&chan, h, w);
        for i in 0..h {
            for j in 0..w {
                d_latent[(i, j, c)] += d_up[(i, j)];
            }
        }
    }

    if codec.kind == CodecKind::Learned {
        let params = codec
            .decoder
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("learned codec has no decoder weights".into()))?;
        let up = upsample_all(&latent.grid);
        let (_, a) = decoder_refinement(params, &up);
        let d_h = conv3x3_backward(&a.mapv(silu), params.get("dec2.weight"), &d_phys, "dec2", None);
        let mut d_a = d_h;
        for (g, x) in d_a.iter_mut().zip(a.iter()) {
            *g *= silu_grad(*x);
        }
        let d_up = conv3x3_backward(&up, params.get("dec1.weight"), &d_a, "dec1", None);
        for c in 0..LATENT_CHANNELS {
            let mut chan = ndarray::Array2::zeros((h * POOL, w * POOL));
            for i in 0..h * POOL {
                for j in 0..w * POOL {
                    chan[(i, j)] = d_up[(i, j, c)];
                }
            }
            let t = upsample_transpose(&chan, h, w);
            for i in 0..h {
                for j in 0..w {
                    d_latent[(i, j, c)] += t[(i, j)];
                }
            }
        }
    }
    Ok(d_latent)
}

/// Transpose of [`upsample_channel`] as a linear map.
fn upsample_transpose(d_out: &ndarray::Array2<f64>, h: usize, w: usize) -> ndarray::Array2<f64> {
    // out = bilinear(z) + blockrep(z − blockmean(bilinear(z))), so the
    // transpose routes block sums straight to z and the mean-free part of
    // d_out through the bilinear transpose.
    let mut block_sums = ndarray::Array2::zeros((h, w));
    for bi in 0..h {
        for bj in 0..w {
            let mut s = 0.0;
            for di in 0..POOL {
                for dj in 0..POOL {
                    s += d_out[(bi * POOL + di, bj * POOL + dj)];
                }
            }
            block_sums[(bi, bj)] = s;
        }
    }
    let mut residual = d_out.clone();
    for bi in 0..h {
        for bj in 0..w {
            let mean = block_sums[(bi, bj)] / (POOL * POOL) as f64;
            for di in 0..POOL {
                for dj in 0..POOL {
                    residual[(bi * POOL + di, bj * POOL + dj)] -= mean;
                }
            }
        }
    }

    let mut d_z = block_sums;
    for i in 0..h * POOL {
        for j in 0..w * POOL {
            let g = residual[(i, j)];
            if g == 0.0 {
                continue;
            }
            let y = (i as f64 + 0.5) / POOL as f64 - 0.5;
            let x = (j as f64 + 0.5) / POOL as f64 - 0.5;
            let i0 = y.floor();
            let j0 = x.floor();
            let (fy, fx) = (y - i0, x - j0);
            let ci = |v: f64| -> usize { (v.max(0.0) as usize).min(h - 1) };
            let cj = |v: f64| -> usize { (v.max(0.0) as usize).min(w - 1) };
            d_z[(ci(i0), cj(j0))] += g * (1.0 - fy) * (1.0 - fx);
            d_z[(ci(i0), cj(j0 + 1.0))] += g * (1.0 - fy) * fx;
            d_z[(ci(i0 + 1.0), cj(j0))] += g * fy * (1.0 - fx);
            d_z[(ci(i0 + 1.0), cj(j0 + 1.0))] += g * fy * fx;
        }
    }
    d_z
}

/// One training sample for the learned decoder.
pub struct CodecSample {
    pub map: DisplacementMap,
    pub deformed: TriMesh,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight of the lifted vertex-to-vertex term against the map term.
    pub vertex_weight: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 2e-3,
            weight_decay: 1e-5,
            seed: 0,
            vertex_weight: 1.0,
        }
    }
}

/// Combined reconstruction loss of one sample under the codec, in physical
/// units: Σ_texels |D̂ − D|² + vertex_weight · Σ_vertices |M̂ − M|².
pub fn codec_sample_loss(
    codec: &LatentCodec,
    sample: &CodecSample,
    template: &TriMesh,
    atlas: &UvAtlas,
    vertex_weight: f64,
) -> Result<f64> {
    let latent = encode_map(&sample.map, codec)?;
    let decoded = decode_map(&latent, codec)?;
    let map_term: f64 = decoded
        .data
        .iter()
        .zip(sample.map.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let lifted = crate::uvcodec::decode(&decoded, template, atlas)?;
    let vertex_term: f64 = lifted
        .vertices()
        .iter()
        .zip(sample.deformed.vertices())
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(map_term + vertex_weight * vertex_term)
}

/// Trains the decoder refinement of a learned codec; the encoder stays
/// analytic. Returns the per-step loss curve.
pub fn train_codec(
    codec: &mut LatentCodec,
    samples: &[CodecSample],
    template: &TriMesh,
    atlas: &UvAtlas,
    config: &CodecTrainConfig,
) -> Result<Vec<f64>> {
    if codec.kind != CodecKind::Learned {
        return Err(Error::InvalidParam(
            "train_codec requires a learned codec".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("codec training set"));
    }

    // Precompute encoder outputs; the encoder is frozen.
    let mut latents = Vec::with_capacity(samples.len());
    for s in samples {
        latents.push(encode_map(&s.map, codec)?);
    }
    let scale = codec.scale;
    let params = codec.decoder.as_mut().expect("learned codec has decoder");
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay, params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.steps);

    for _step in 0..config.steps {
        let idx = rng.random_range(0..samples.len());
        let sample = &samples[idx];
        let latent = &latents[idx];

        let up = upsample_all(&latent.grid);
        let analytic = analytic_decode_normalized(&latent.grid);
        let a = conv3x3_forward(&up, params.get("dec1.weight"), params.get("dec1.bias"));
        let hidden = a.mapv(silu);
        let refinement =
            conv3x3_forward(&hidden, params.get("dec2.weight"), params.get("dec2.bias"));
        let decoded = DisplacementMap {
            data: (&analytic + &refinement) * scale,
        };

        // Loss and its gradient with respect to the decoded physical map.
        let mut d_map = DisplacementMap {
            data: Array3::zeros(decoded.data.dim()),
        };
        let mut loss = 0.0;
        for ((d, t), g) in decoded
            .data
            .iter()
            .zip(sample.map.data.iter())
            .zip(d_map.data.iter_mut())
        {
            let r = d - t;
            loss += r * r;
            *g = 2.0 * r;
        }
        let lifted = crate::uvcodec::decode(&decoded, template, atlas)?;
        let vertex_grads: Vec<Vec3> = lifted
            .vertices()
            .iter()
            .zip(sample.deformed.vertices())
            .map(|(a, b)| {
                let r = a - b;
                loss += config.vertex_weight * r.norm_squared();
                2.0 * config.vertex_weight * r
            })
            .collect();
        let lifted_map_grad = lift_transpose(&vertex_grads, template, atlas)?;
        d_map.data += &lifted_map_grad.data;

        // Backprop into the refinement stack (the analytic path has no
        // trainable parameters).
        let d_refinement = &d_map.data * scale;
        let mut grads = params.zeros_like();
        let d_hidden = conv3x3_backward(
            &hidden,
            params.get("dec2.weight"),
            &d_refinement,
            "dec2",
            Some(&mut grads),
        );
        let mut d_a = d_hidden;
        for (g, x) in d_a.iter_mut().zip(a.iter()) {
            *g *= silu_grad(*x);
        }
        let _ = conv3x3_backward(&up, params.get("dec1.weight"), &d_a, "dec1", Some(&mut grads));

        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite("codec training"));
        }
        opt.step(params, &grads);
        history.push(loss);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{grid_mesh, GridUv};
    use crate::uvcodec::build_atlas;
    use approx::assert_relative_eq;

    fn constant_map(rows: usize, cols: usize, v: [f64; 3]) -> DisplacementMap {
        let mut m = DisplacementMap::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, Vec3::new(v[0], v[1], v[2]));
            }
        }
        m
    }

    #[test]
    fn constant_map_roundtrips_exactly() {
        let codec = LatentCodec::analytic(0.05).unwrap();
        let map = constant_map(16, 16, [0.01, -0.02, 0.03]);
        let latent = encode_map(&map, &codec).unwrap();
        // Pooled channels constant, residual channel zero.
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(latent.grid[(i, j, 0)], 0.01 / 0.05, epsilon = 1e-12);
                assert_relative_eq!(latent.grid[(i, j, 3)], 0.0, epsilon = 1e-12);
            }
        }
        let back = decode_map(&latent, &codec).unwrap();
        for (a, b) in back.data.iter().zip(map.data.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_map_zero_latent_and_back() {
        let codec = LatentCodec::analytic(1.0).unwrap();
        let map = DisplacementMap::zeros(16, 16);
        let latent = encode_map(&map, &codec).unwrap();
        assert!(latent.grid.iter().all(|&v| v == 0.0));
        let back = decode_map(&latent, &codec).unwrap();
        assert!(back.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_has_zero_means_and_max_residual() {
        let codec = LatentCodec::analytic(1.0).unwrap();
        let mut map = DisplacementMap::zeros(8, 8);
        for i in 0..8 {
            for j in 0..8 {
                let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                map.set(i, j, Vec3::new(s, s, s));
            }
        }
        let latent = encode_map(&map, &codec).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..3 {
                    assert_relative_eq!(latent.grid[(i, j, c)], 0.0, epsilon = 1e-12);
                }
                assert_relative_eq!(latent.grid[(i, j, 3)], 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn decode_encode_is_idempotent() {
        let codec = LatentCodec::analytic(1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut map = DisplacementMap::zeros(16, 16);
        for v in map.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let once = decode_map(&encode_map(&map, &codec).unwrap(), &codec).unwrap();
        let twice = decode_map(&encode_map(&once, &codec).unwrap(), &codec).unwrap();
        for (a, b) in once.data.iter().zip(twice.data.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn smooth_maps_reconstruct_better_than_rough() {
        let codec = LatentCodec::analytic(1.0).unwrap();
        let smooth = {
            let mut m = DisplacementMap::zeros(16, 16);
            for i in 0..16 {
                for j in 0..16 {
                    let v = ((i as f64) / 16.0 * std::f64::consts::PI).sin()
                        * ((j as f64) / 16.0 * std::f64::consts::PI).cos();
                    m.set(i, j, Vec3::new(v, 0.0, 0.0));
                }
            }
            m
        };
        let rough = {
            let mut m = DisplacementMap::zeros(16, 16);
            for i in 0..16 {
                for j in 0..16 {
                    let v = if (i + j) % 2 == 0 { 0.5 } else { -0.5 };
                    m.set(i, j, Vec3::new(v, 0.0, 0.0));
                }
            }
            m
        };
        let energy_err = |m: &DisplacementMap| -> f64 {
            let rec = decode_map(&encode_map(m, &codec).unwrap(), &codec).unwrap();
            rec.data
                .iter()
                .zip(m.data.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        assert!(energy_err(&smooth) < energy_err(&rough));
    }

    #[test]
    fn decode_vjp_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for kind in [CodecKind::AnalyticPool, CodecKind::Learned] {
            let mut codec = match kind {
                CodecKind::AnalyticPool => LatentCodec::analytic(0.7).unwrap(),
                CodecKind::Learned => LatentCodec::learned(0.7, 5).unwrap(),
            };
            if let Some(p) = codec.decoder.as_mut() {
                // Randomize so the refinement path is active.
                let names: Vec<String> = p.entries().map(|(n, _)| n.to_string()).collect();
                for n in names {
                    for v in &mut p.get_mut(&n).data {
                        *v += rng.random_range(-0.1..0.1);
                    }
                }
            }
            let latent = Latent {
                grid: Array3::from_shape_simple_fn((2, 2, 4), || rng.random_range(-1.0..1.0)),
                step: 0,
            };
            let d_map = DisplacementMap {
                data: Array3::from_shape_simple_fn((8, 8, 3), || rng.random_range(-1.0..1.0)),
            };
            let vjp = decode_map_vjp(&latent, &codec, &d_map).unwrap();

            let loss = |l: &Latent| -> f64 {
                decode_map(l, &codec)
                    .unwrap()
                    .data
                    .iter()
                    .zip(d_map.data.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let eps = 1e-6;
            for idx in 0..latent.grid.len() {
                let mut plus = latent.clone();
                let mut minus = latent.clone();
                plus.grid.as_slice_mut().unwrap()[idx] += eps;
                minus.grid.as_slice_mut().unwrap()[idx] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = vjp.as_slice().unwrap()[idx];
                assert!(
                    (an - fd).abs() < 1e-5 * (1.0 + an.abs().max(fd.abs())),
                    "{kind:?} idx {idx}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn vertex_term_equals_map_term_on_texel_center_atlas() {
        // Grid whose vertices all sit on texel centers of a fully covered
        // atlas: the lifted vertex error equals the texel error sum.
        let template = grid_mesh(7, 7, 1.0, 1.0, GridUv::TexelCenters);
        let atlas = build_atlas(&template, (8, 8)).unwrap();
        assert_eq!(atlas.covered_count(), 64);

        let codec = LatentCodec::analytic(1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut map = DisplacementMap::zeros(8, 8);
        for v in map.data.iter_mut() {
            *v = rng.random_range(-0.02..0.02);
        }
        let deformed = crate::uvcodec::decode(&map, &template, &atlas).unwrap();
        let sample = CodecSample {
            map: map.clone(),
            deformed,
        };

        let latent = encode_map(&map, &codec).unwrap();
        let decoded = decode_map(&latent, &codec).unwrap();
        let map_term: f64 = decoded
            .data
            .iter()
            .zip(map.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let total = codec_sample_loss(&codec, &sample, &template, &atlas, 1.0).unwrap();
        let vertex_term = total - map_term;
        assert_relative_eq!(vertex_term, map_term, max_relative = 1e-9);
    }

    #[test]
    fn training_constant_corpus_stays_at_zero() {
        let template = grid_mesh(7, 7, 1.0, 1.0, GridUv::TexelCenters);
        let atlas = build_atlas(&template, (8, 8)).unwrap();
        let mut codec = LatentCodec::learned(1.0, 7).unwrap();
        let map = constant_map(8, 8, [0.01, 0.0, -0.01]);
        let deformed = crate::uvcodec::decode(&map, &template, &atlas).unwrap();
        let samples = vec![CodecSample { map, deformed }];
        let history = train_codec(
            &mut codec,
            &samples,
            &template,
            &atlas,
            &CodecTrainConfig {
                steps: 30,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(history[0] < 1e-12);
        assert!(*history.last().unwrap() < 1e-9);
    }

    #[test]
    fn training_reduces_loss_on_structured_corpus() {
        // Smooth fields plus a fixed checker pattern whose amplitude is
        // recoverable from the residual channel: the learned decoder must
        // cut the combined loss by at least half.
        let template = grid_mesh(15, 15, 1.0, 1.0, GridUv::TexelCenters);
        let atlas = build_atlas(&template, (16, 16)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut samples = Vec::new();
        for _ in 0..12 {
            let amp = rng.random_range(0.0..0.03);
            let (ax, ay) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let mut map = DisplacementMap::zeros(16, 16);
            for i in 0..16 {
                for j in 0..16 {
                    let smooth = 0.02 * (ax * i as f64 / 16.0 * std::f64::consts::PI).sin()
                        * (ay * j as f64 / 16.0 * std::f64::consts::PI).cos();
                    let checker = if (i + j) % 2 == 0 { amp } else { -amp };
                    map.set(i, j, Vec3::new(smooth + checker, smooth, checker));
                }
            }
            let deformed = crate::uvcodec::decode(&map, &template, &atlas).unwrap();
            samples.push(CodecSample { map, deformed });
        }
        let mut codec = LatentCodec::learned(0.05, 9).unwrap();
        let initial: f64 = samples
            .iter()
            .map(|s| codec_sample_loss(&codec, s, &template, &atlas, 1.0).unwrap())
            .sum();
        train_codec(
            &mut codec,
            &samples,
            &template,
            &atlas,
            &CodecTrainConfig {
                steps: 600,
                learning_rate: 3e-3,
                ..Default::default()
            },
        )
        .unwrap();
        let trained: f64 = samples
            .iter()
            .map(|s| codec_sample_loss(&codec, s, &template, &atlas, 1.0).unwrap())
            .sum();
        assert!(
            trained < 0.5 * initial,
            "loss only went {initial} → {trained}"
        );
    }
}
