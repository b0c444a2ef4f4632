//! Target Proposal Perceiver: multi-head proposal cross-attention with
//! geometry-weighted softmax, applied iteratively between the two branch
//! encoders.
//!
//! Per head, query features attend over key/value features with affinity
//! `W_ij = U_ij exp(A_ij) / sum_k U_ik exp(A_ik)`, where `A` is scaled
//! dot-product similarity and `U` is a nonnegative geometry weight derived
//! from the proposal boxes. Head outputs are concatenated, projected by an
//! output summarizer, and added back to the query features as a residual.

use thiserror::Error;

use crate::detector::boxes::BBox;
use crate::rng::{rng_from, sample_normal};
use crate::tensor::{Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PerceiverError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected {expected} boxes for {rows} feature rows")]
    BoxCount { expected: usize, rows: usize },
    #[error("head configuration mismatch: {0}")]
    HeadMismatch(String),
}

/// Where the perceiver sits. Asymmetric (query branch only) is the default;
/// the other two exist for the ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Cross-attention on the source-adaptive branch only.
    Asym,
    /// Cross-attention on both branches.
    Sym,
    /// Query, key and value all from the query branch.
    SelfAttn,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerceiverConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_geo_emb: usize,
    pub iterations: usize,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        PerceiverConfig { d_model: 128, heads: 16, d_head: 8, d_geo_emb: 16, iterations: 2 }
    }
}

impl PerceiverConfig {
    pub fn validate(&self) -> Result<(), PerceiverError> {
        if self.heads * self.d_head != self.d_model {
            return Err(PerceiverError::HeadMismatch(format!(
                "heads ({}) * d_head ({}) must equal d_model ({})",
                self.heads, self.d_head, self.d_model
            )));
        }
        if self.d_geo_emb % 8 != 0 {
            return Err(PerceiverError::HeadMismatch(format!(
                "d_geo_emb ({}) must be a multiple of 8",
                self.d_geo_emb
            )));
        }
        if self.iterations == 0 {
            return Err(PerceiverError::HeadMismatch("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wgeo: Parameter,
}

#[derive(Clone, Debug)]
pub struct IterationParams {
    pub heads: Vec<HeadParams>,
    pub g_weight: Parameter,
    pub g_bias: Parameter,
}

#[derive(Clone, Debug)]
pub struct PerceiverParams {
    pub config: PerceiverConfig,
    pub iterations: Vec<IterationParams>,
}

/// Output projection scale at initialization: near-zero so a freshly added
/// perceiver starts as the identity on the query features.
const G_INIT_SCALE: f64 = 1e-3;

impl PerceiverParams {
    pub fn new(prefix: &str, config: PerceiverConfig, seed: u64, frozen: bool) -> Result<Self, PerceiverError> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * sample_normal(&mut rng)).collect()
        };
        let mk = |name: String, shape: &[usize], data: Vec<f64>| -> Parameter {
            Parameter::with_grad_flag(name, shape, data, !frozen).expect("consistent shape")
        };
        let qkv_scale = (1.0 / config.d_model as f64).sqrt();
        let geo_scale = (1.0 / config.d_geo_emb as f64).sqrt();
        let mut iterations = Vec::with_capacity(config.iterations);
        for it in 0..config.iterations {
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let base = format!("{prefix}.iter{it}.head{h}");
                heads.push(HeadParams {
                    wq: mk(format!("{base}.wq"), &[config.d_model, config.d_head], normal(config.d_model * config.d_head, qkv_scale)),
                    wk: mk(format!("{base}.wk"), &[config.d_model, config.d_head], normal(config.d_model * config.d_head, qkv_scale)),
                    wv: mk(format!("{base}.wv"), &[config.d_model, config.d_head], normal(config.d_model * config.d_head, qkv_scale)),
                    wgeo: mk(format!("{base}.wgeo"), &[config.d_geo_emb, 1], normal(config.d_geo_emb, geo_scale)),
                });
            }
            let g_in = config.heads * config.d_head;
            iterations.push(IterationParams {
                heads,
                g_weight: mk(
                    format!("{prefix}.iter{it}.out.weight"),
                    &[g_in, config.d_model],
                    normal(g_in * config.d_model, G_INIT_SCALE),
                ),
                g_bias: mk(format!("{prefix}.iter{it}.out.bias"), &[config.d_model], vec![0.0; config.d_model]),
            });
        }
        Ok(PerceiverParams { config, iterations })
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for it in &self.iterations {
            for h in &it.heads {
                out.extend([&h.wq, &h.wk, &h.wv, &h.wgeo]);
            }
            out.push(&it.g_weight);
            out.push(&it.g_bias);
        }
        out
    }

    /// Draw fresh values in place (used when the student gains its perceiver
    /// at the start of distillation).
    pub fn reinit(&self, seed: u64) {
        let fresh = PerceiverParams::new("fresh", self.config, seed, false).expect("config already validated");
        for (dst, src) in self.parameters().iter().zip(fresh.parameters()) {
            dst.set_values(&src.values());
        }
    }

    /// Zero the output projections, making every iteration exactly the
    /// identity on the query features.
    pub fn zero_output_projections(&self) {
        for it in &self.iterations {
            it.g_weight.apply_update(|d| d.fill(0.0));
            it.g_bias.apply_update(|d| d.fill(0.0));
        }
    }
}

const GEO_EPS: f64 = 1e-3;

/// Raw pairwise geometry descriptor between query box `i` and key box `j`:
/// `(log(|dx|/w_i + eps), log(|dy|/h_i + eps), log(w_j/w_i), log(h_j/h_i))`.
/// Row-major `[len(q) * len(k), 4]`.
pub fn geometry_features(boxes_q: &[BBox], boxes_k: &[BBox]) -> Vec<f64> {
    let mut out = Vec::with_capacity(boxes_q.len() * boxes_k.len() * 4);
    for q in boxes_q {
        let (qcx, qcy) = q.center();
        for k in boxes_k {
            let (kcx, kcy) = k.center();
            out.push(((kcx - qcx).abs() / q.w + GEO_EPS).ln());
            out.push(((kcy - qcy).abs() / q.h + GEO_EPS).ln());
            out.push((k.w / q.w).ln());
            out.push((k.h / q.h).ln());
        }
    }
    out
}

/// Sinusoidal embedding of 4-feature rows into `d_emb` dimensions:
/// per feature, `d_emb/8` (sin, cos) pairs at wavelengths `1000^(t/(d_emb/8))`.
pub fn sinusoidal_embedding(raw: &[f64], d_emb: usize) -> Vec<f64> {
    let rows = raw.len() / 4;
    let pairs = d_emb / 8;
    let mut out = Vec::with_capacity(rows * d_emb);
    for r in 0..rows {
        for f in 0..4 {
            let v = raw[r * 4 + f];
            for t in 0..pairs {
                let wave = 1000f64.powf(t as f64 / pairs as f64);
                out.push((v / wave).sin());
                out.push((v / wave).cos());
            }
        }
    }
    out
}

/// Nonnegative geometry weight matrix `U`: embedded descriptors projected to
/// a scalar per pair and rectified. Gradients reach only `wgeo`.
pub fn geometry_weight(boxes_q: &[BBox], boxes_k: &[BBox], wgeo: &Parameter) -> Result<Tensor, PerceiverError> {
    let d_emb = wgeo.shape()[0];
    let raw = geometry_features(boxes_q, boxes_k);
    let emb = sinusoidal_embedding(&raw, d_emb);
    let emb_t = Tensor::from_vec(&[boxes_q.len() * boxes_k.len(), d_emb], emb, false)?;
    let scalar = emb_t.matmul(wgeo.tensor())?;
    Ok(scalar.relu().reshape(&[boxes_q.len(), boxes_k.len()])?)
}

/// One cross-attention head with geometry-weighted softmax.
///
/// Rows of the affinity matrix sum to one; a row whose `U` entries are all
/// zero produces a zero context row instead.
pub fn proposal_cross_attention(
    phi_q: &Tensor,
    phi_kv: &Tensor,
    u: &Tensor,
    head: &HeadParams,
) -> Result<Tensor, PerceiverError> {
    let k_rows = phi_q.shape()[0];
    let d_head = head.wq.shape()[1];
    let q = phi_q.matmul(head.wq.tensor())?;
    let k = phi_kv.matmul(head.wk.tensor())?;
    let v = phi_kv.matmul(head.wv.tensor())?;
    let a = q.matmul(&k.transpose()?)?.scale(1.0 / (d_head as f64).sqrt());

    // Row max as a constant: mathematically cancels in the weighted softmax,
    // numerically keeps exp in range for |A| up to ~700.
    let a_vals = a.to_vec();
    let kv_rows = phi_kv.shape()[0];
    let mut row_max = vec![0.0; k_rows];
    for i in 0..k_rows {
        row_max[i] = a_vals[i * kv_rows..(i + 1) * kv_rows]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let m = Tensor::from_vec(&[k_rows, 1], row_max, false)?.repeat_cols(kv_rows)?;
    let e = a.sub(&m)?.exp();
    let numer = u.mul(&e)?;
    let denom = numer.row_sum()?;

    // Rows with all-zero geometry weight get denominator 1 and a zero
    // numerator, yielding the defined zero-context fallback.
    let u_vals = u.to_vec();
    let zero_row_fix: Vec<f64> = (0..k_rows)
        .map(|i| {
            if u_vals[i * kv_rows..(i + 1) * kv_rows].iter().all(|&x| x == 0.0) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let denom = denom.add(&Tensor::from_vec(&[k_rows, 1], zero_row_fix, false)?)?;
    let w = numer.div(&denom.repeat_cols(kv_rows)?)?;
    Ok(w.matmul(&v)?)
}

/// Multi-head proposal cross-attention with residual connection:
/// query features plus the output projection of the concatenated heads.
/// `U` is recomputed per head from that head's geometry projection.
pub fn mhpca(
    phi_q: &Tensor,
    phi_kv: &Tensor,
    boxes_q: &[BBox],
    boxes_kv: &[BBox],
    iter_params: &IterationParams,
) -> Result<Tensor, PerceiverError> {
    if boxes_q.len() != phi_q.shape()[0] {
        return Err(PerceiverError::BoxCount { expected: phi_q.shape()[0], rows: boxes_q.len() });
    }
    if boxes_kv.len() != phi_kv.shape()[0] {
        return Err(PerceiverError::BoxCount { expected: phi_kv.shape()[0], rows: boxes_kv.len() });
    }
    let mut contexts = Vec::with_capacity(iter_params.heads.len());
    for head in &iter_params.heads {
        let u = geometry_weight(boxes_q, boxes_kv, &head.wgeo)?;
        contexts.push(proposal_cross_attention(phi_q, phi_kv, &u, head)?);
    }
    let stacked = Tensor::concat_cols(&contexts)?;
    let projected = stacked.matmul(iter_params.g_weight.tensor())?.add_bias(iter_params.g_bias.tensor())?;
    Ok(phi_q.add(&projected)?)
}

/// One encoder stage of a detection branch: `relu(x W + b)`.
#[derive(Clone, Copy)]
pub struct EncoderStage<'a> {
    pub weight: &'a Parameter,
    pub bias: &'a Parameter,
}

pub fn encode_branch(features: &Tensor, stage: EncoderStage<'_>) -> Result<Tensor, PerceiverError> {
    Ok(features.matmul(stage.weight.tensor())?.add_bias(stage.bias.tensor())?.relu())
}

/// Key/value source for [`iterative_perceive`].
pub enum KvChain<'a> {
    /// Encode the raw features through the other branch's stages.
    Cross { stages: [EncoderStage<'a>; 2] },
    /// Attend over the query chain itself.
    SelfChain,
}

/// Two-round perceiver interleaved with the query branch's encoders.
///
/// Round 1 attends the first-stage query encoding against the first-stage
/// key/value encoding; its output passes through the second query encoder and
/// round 2 attends again at the matching depth.
pub fn iterative_perceive(
    features: &Tensor,
    boxes: &[BBox],
    q_stages: [EncoderStage<'_>; 2],
    kv: KvChain<'_>,
    params: &PerceiverParams,
) -> Result<Tensor, PerceiverError> {
    if params.iterations.len() != 2 {
        return Err(PerceiverError::HeadMismatch(format!(
            "iterative_perceive expects 2 iterations, model has {}",
            params.iterations.len()
        )));
    }
    let phi_q1 = encode_branch(features, q_stages[0])?;
    let phi_kv1 = match &kv {
        KvChain::Cross { stages } => encode_branch(features, stages[0])?,
        KvChain::SelfChain => phi_q1.clone(),
    };
    let psi1 = mhpca(&phi_q1, &phi_kv1, boxes, boxes, &params.iterations[0])?;

    let phi_q2 = encode_branch(&psi1, q_stages[1])?;
    let phi_kv2 = match &kv {
        KvChain::Cross { stages } => encode_branch(&phi_kv1, stages[1])?,
        KvChain::SelfChain => phi_q2.clone(),
    };
    Ok(mhpca(&phi_q2, &phi_kv2, boxes, boxes, &params.iterations[1])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    fn randn(shape: &[usize], seed: u64, grad: bool) -> Tensor {
        let mut rng = rng_from(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| sample_normal(&mut rng)).collect();
        Tensor::from_vec(shape, data, grad).unwrap()
    }

    fn boxes(n: usize, seed: u64) -> Vec<BBox> {
        use rand::Rng;
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| {
                BBox::new(
                    rng.random_range(0.0..40.0),
                    rng.random_range(0.0..40.0),
                    rng.random_range(4.0..20.0),
                    rng.random_range(4.0..20.0),
                )
            })
            .collect()
    }

    fn tiny_config() -> PerceiverConfig {
        PerceiverConfig { d_model: 8, heads: 2, d_head: 4, d_geo_emb: 16, iterations: 2 }
    }

    #[test]
    fn config_validation() {
        assert!(PerceiverConfig::default().validate().is_ok());
        let bad = PerceiverConfig { heads: 3, ..PerceiverConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn geometry_features_identical_boxes() {
        let b = vec![BBox::new(5.0, 7.0, 10.0, 12.0)];
        let g = geometry_features(&b, &b);
        let eps_log = GEO_EPS.ln();
        assert_eq!(g, vec![eps_log, eps_log, 0.0, 0.0]);
    }

    #[test]
    fn geometry_weight_is_nonnegative() {
        let params = PerceiverParams::new("p", tiny_config(), 3, false).unwrap();
        for seed in 0..10 {
            let bq = boxes(10, seed);
            let bk = boxes(10, seed + 100);
            let u = geometry_weight(&bq, &bk, &params.iterations[0].heads[0].wgeo).unwrap();
            assert!(u.to_vec().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn geometry_weight_matches_by_hand_pipeline() {
        // Single pair, hand-evaluated end to end.
        let q = BBox::new(0.0, 0.0, 10.0, 20.0);
        let k = BBox::new(5.0, 8.0, 14.0, 6.0);
        // centers: q (5,10), k (12,11)
        let g0 = (7.0f64 / 10.0 + 1e-3).ln();
        let g1 = (1.0f64 / 20.0 + 1e-3).ln();
        let g2 = (14.0f64 / 10.0).ln();
        let g3 = (6.0f64 / 20.0).ln();
        let raw = geometry_features(&[q], &[k]);
        assert!((raw[0] - g0).abs() < 1e-12);
        assert!((raw[1] - g1).abs() < 1e-12);
        assert!((raw[2] - g2).abs() < 1e-12);
        assert!((raw[3] - g3).abs() < 1e-12);

        // Embedding: per feature two (sin, cos) pairs at wavelengths 1, sqrt(1000).
        let emb = sinusoidal_embedding(&raw, 16);
        let w1 = 1000f64.powf(0.5);
        let expect = [
            g0.sin(), g0.cos(), (g0 / w1).sin(), (g0 / w1).cos(),
            g1.sin(), g1.cos(), (g1 / w1).sin(), (g1 / w1).cos(),
            g2.sin(), g2.cos(), (g2 / w1).sin(), (g2 / w1).cos(),
            g3.sin(), g3.cos(), (g3 / w1).sin(), (g3 / w1).cos(),
        ];
        for (a, b) in emb.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Projection + relu.
        let wgeo_vals: Vec<f64> = (0..16).map(|i| (i as f64 - 7.5) / 10.0).collect();
        let wgeo = Parameter::new("wgeo", &[16, 1], wgeo_vals.clone()).unwrap();
        let u = geometry_weight(&[q], &[k], &wgeo).unwrap();
        let dot: f64 = emb.iter().zip(&wgeo_vals).map(|(a, b)| a * b).sum();
        assert!((u.to_vec()[0] - dot.max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_u_and_zero_a_average_values() {
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 5, false).unwrap();
        let head = &params.iterations[0].heads[0];
        // Zero features make Q=K=0 so A = 0; uniform U -> plain average of V.
        let phi = Tensor::zeros(&[4, cfg.d_model]);
        let u = Tensor::ones(&[4, 4]);
        let h = proposal_cross_attention(&phi, &phi, &u, head).unwrap();
        // V of zero features is zero, mean of zeros is zero.
        assert!(h.to_vec().iter().all(|&x| x == 0.0));

        // Nonzero features, A forced to 0 by zero wq: W should be uniform.
        let phi_kv = randn(&[4, cfg.d_model], 9, false);
        let zero_q = HeadParams {
            wq: Parameter::zeros("wq", &[cfg.d_model, cfg.d_head]),
            wk: head.wk.clone(),
            wv: head.wv.clone(),
            wgeo: head.wgeo.clone(),
        };
        let h = proposal_cross_attention(&phi, &phi_kv, &u, &zero_q).unwrap();
        let v = phi_kv.matmul(zero_q.wv.tensor()).unwrap().to_vec();
        for col in 0..cfg.d_head {
            let mean: f64 = (0..4).map(|r| v[r * cfg.d_head + col]).sum::<f64>() / 4.0;
            for row in 0..4 {
                assert!((h.to_vec()[row * cfg.d_head + col] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_u_reduces_to_plain_softmax_attention() {
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 7, false).unwrap();
        let head = &params.iterations[0].heads[0];
        let phi_q = randn(&[5, cfg.d_model], 11, false);
        let phi_kv = randn(&[5, cfg.d_model], 12, false);
        let u = Tensor::ones(&[5, 5]);
        let got = proposal_cross_attention(&phi_q, &phi_kv, &u, head).unwrap();

        // Plain scaled dot-product attention.
        let q = phi_q.matmul(head.wq.tensor()).unwrap();
        let k = phi_kv.matmul(head.wk.tensor()).unwrap();
        let v = phi_kv.matmul(head.wv.tensor()).unwrap();
        let a = q
            .matmul(&k.transpose().unwrap())
            .unwrap()
            .scale(1.0 / (cfg.d_head as f64).sqrt());
        let want = a.softmax_rows().unwrap().matmul(&v).unwrap();
        let max_err = got
            .to_vec()
            .iter()
            .zip(want.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-9, "max err {max_err}");
    }

    #[test]
    fn one_hot_u_selects_single_value_row() {
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 13, false).unwrap();
        let head = &params.iterations[0].heads[0];
        let k = 4;
        let phi_q = randn(&[k, cfg.d_model], 21, false);
        let phi_kv = randn(&[k, cfg.d_model], 22, false);
        // U row i selects column (i + 1) mod k.
        let mut u = vec![0.0; k * k];
        for i in 0..k {
            u[i * k + (i + 1) % k] = 0.7;
        }
        let u = Tensor::from_vec(&[k, k], u, false).unwrap();
        let h = proposal_cross_attention(&phi_q, &phi_kv, &u, head).unwrap().to_vec();
        let v = phi_kv.matmul(head.wv.tensor()).unwrap().to_vec();
        for i in 0..k {
            let j = (i + 1) % k;
            for c in 0..cfg.d_head {
                assert!((h[i * cfg.d_head + c] - v[j * cfg.d_head + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_zero_u_row_gives_zero_context_row() {
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 15, false).unwrap();
        let head = &params.iterations[0].heads[0];
        let phi_q = randn(&[3, cfg.d_model], 31, false);
        let phi_kv = randn(&[3, cfg.d_model], 32, false);
        let mut u = vec![1.0; 9];
        for j in 0..3 {
            u[3 + j] = 0.0; // row 1 entirely zero
        }
        let u = Tensor::from_vec(&[3, 3], u, false).unwrap();
        let h = proposal_cross_attention(&phi_q, &phi_kv, &u, head).unwrap().to_vec();
        for c in 0..cfg.d_head {
            assert_eq!(h[cfg.d_head + c], 0.0);
        }
        // Other rows still sum-normalized (finite, nonzero in general).
        assert!(h.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn weighted_softmax_matches_direct_formula_oracle() {
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 17, false).unwrap();
        let head = &params.iterations[0].heads[0];
        let k = 5;
        let phi_q = randn(&[k, cfg.d_model], 41, false);
        let phi_kv = randn(&[k, cfg.d_model], 42, false);
        let u = geometry_weight(&boxes(k, 43), &boxes(k, 44), &head.wgeo).unwrap();
        let got = proposal_cross_attention(&phi_q, &phi_kv, &u, head).unwrap().to_vec();

        // Direct evaluation of the weighted-softmax formula at f64.
        let q = phi_q.matmul(head.wq.tensor()).unwrap().to_vec();
        let kk = phi_kv.matmul(head.wk.tensor()).unwrap().to_vec();
        let v = phi_kv.matmul(head.wv.tensor()).unwrap().to_vec();
        let uu = u.to_vec();
        let sigma = (cfg.d_head as f64).sqrt();
        let mut want = vec![0.0; k * cfg.d_head];
        for i in 0..k {
            let mut weights = vec![0.0; k];
            let mut denom = 0.0;
            for j in 0..k {
                let mut a = 0.0;
                for c in 0..cfg.d_head {
                    a += q[i * cfg.d_head + c] * kk[j * cfg.d_head + c];
                }
                weights[j] = uu[i * k + j] * (a / sigma).exp();
                denom += weights[j];
            }
            for j in 0..k {
                let w = if denom == 0.0 { 0.0 } else { weights[j] / denom };
                for c in 0..cfg.d_head {
                    want[i * cfg.d_head + c] += w * v[j * cfg.d_head + c];
                }
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn rows_of_w_sum_to_one_unless_zero() {
        // Exposed indirectly: with V = identity-ish this is covered by the
        // formula oracle; here check the row-stochastic property explicitly
        // by attending one-hot value columns.
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 19, false).unwrap();
        let head = &params.iterations[0].heads[0];
        let k = 6;
        let phi_q = randn(&[k, cfg.d_model], 51, false);
        let phi_kv = randn(&[k, cfg.d_model], 52, false);
        let u = geometry_weight(&boxes(k, 53), &boxes(k, 53), &head.wgeo).unwrap();
        // Replace V with a map that returns all-ones rows: then H row i equals
        // sum_j W_ij. Build via wv = 0 and bias trick: use direct computation.
        let q = phi_q.matmul(head.wq.tensor()).unwrap();
        let kk = phi_kv.matmul(head.wk.tensor()).unwrap();
        let a = q
            .matmul(&kk.transpose().unwrap())
            .unwrap()
            .scale(1.0 / (cfg.d_head as f64).sqrt());
        let e = a.exp();
        let numer = u.mul(&e).unwrap();
        let denom = numer.row_sum().unwrap();
        let uv = u.to_vec();
        for i in 0..k {
            let row_zero = uv[i * k..(i + 1) * k].iter().all(|&x| x == 0.0);
            if !row_zero {
                let w_row_sum: f64 = (0..k)
                    .map(|j| numer.to_vec()[i * k + j] / denom.to_vec()[i])
                    .sum();
                assert!((w_row_sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn numerically_stable_for_large_affinities() {
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 23, false).unwrap();
        let head = &params.iterations[0].heads[0];
        // Build features whose Q.K^T entries reach ~700 in magnitude.
        let scale = 700f64.sqrt();
        let phi_q = randn(&[3, cfg.d_model], 61, false).scale(scale / (cfg.d_model as f64));
        let phi_kv = randn(&[3, cfg.d_model], 62, false).scale(scale);
        let u = Tensor::ones(&[3, 3]);
        let h = proposal_cross_attention(&phi_q, &phi_kv, &u, head).unwrap();
        assert!(h.to_vec().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_output_projection_is_residual_identity() {
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 25, false).unwrap();
        params.zero_output_projections();
        let k = 4;
        let phi_q = randn(&[k, cfg.d_model], 71, false);
        let phi_kv = randn(&[k, cfg.d_model], 72, false);
        let bs = boxes(k, 73);
        let out = mhpca(&phi_q, &phi_kv, &bs, &bs, &params.iterations[0]).unwrap();
        assert_eq!(out.to_vec(), phi_q.to_vec());
    }

    #[test]
    fn single_head_equals_multi_head_with_one_head() {
        let cfg = PerceiverConfig { d_model: 4, heads: 1, d_head: 4, d_geo_emb: 16, iterations: 2 };
        let params = PerceiverParams::new("p", cfg, 27, false).unwrap();
        let k = 3;
        let phi_q = randn(&[k, 4], 81, false);
        let phi_kv = randn(&[k, 4], 82, false);
        let bs = boxes(k, 83);
        let it = &params.iterations[0];
        let u = geometry_weight(&bs, &bs, &it.heads[0].wgeo).unwrap();
        let ctx = proposal_cross_attention(&phi_q, &phi_kv, &u, &it.heads[0]).unwrap();
        let manual = phi_q
            .add(&ctx.matmul(it.g_weight.tensor()).unwrap().add_bias(it.g_bias.tensor()).unwrap())
            .unwrap();
        let got = mhpca(&phi_q, &phi_kv, &bs, &bs, it).unwrap();
        assert_eq!(got.to_vec(), manual.to_vec());
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 29, false).unwrap();
        let k = 5;
        let phi_q = randn(&[k, cfg.d_model], 91, false);
        let phi_kv = randn(&[k, cfg.d_model], 92, false);
        let bq = boxes(k, 93);
        let bkv = boxes(k, 94);
        let base = mhpca(&phi_q, &phi_kv, &bq, &bkv, &params.iterations[0]).unwrap().to_vec();

        let perm = [3usize, 1, 4, 0, 2];
        // Permuting key/value rows together with their boxes changes nothing.
        let phi_kv_p = phi_kv.gather_rows(&perm).unwrap().detach();
        let bkv_p: Vec<BBox> = perm.iter().map(|&i| bkv[i]).collect();
        let kv_perm = mhpca(&phi_q, &phi_kv_p, &bq, &bkv_p, &params.iterations[0]).unwrap().to_vec();
        for (a, b) in base.iter().zip(&kv_perm) {
            assert!((a - b).abs() < 1e-10);
        }

        // Permuting query rows permutes output rows identically.
        let phi_q_p = phi_q.gather_rows(&perm).unwrap().detach();
        let bq_p: Vec<BBox> = perm.iter().map(|&i| bq[i]).collect();
        let q_perm = mhpca(&phi_q_p, &phi_kv, &bq_p, &bkv, &params.iterations[0]).unwrap().to_vec();
        let dm = cfg.d_model;
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..dm {
                assert!((q_perm[r * dm + c] - base[src * dm + c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn encode_branch_contract_cases() {
        // Zero input with zero bias stays zero.
        let w = Parameter::new("w", &[3, 3], vec![0.5; 9]).unwrap();
        let b = Parameter::zeros("b", &[3]);
        let x = Tensor::zeros(&[2, 3]);
        let y = encode_branch(&x, EncoderStage { weight: &w, bias: &b }).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));

        // Identity weights with relu on nonnegative input pass through.
        let eye = Parameter::new("eye", &[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![0.3, 0.0, 1.2, 0.7, 2.0, 0.1], false).unwrap();
        let y = encode_branch(&x, EncoderStage { weight: &eye, bias: &b }).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    fn branch_stages(seed: u64, d_in: usize, d_model: usize) -> (Parameter, Parameter, Parameter, Parameter) {
        let mut rng = rng_from(seed);
        let mut normal = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| s * sample_normal(&mut rng)).collect() };
        (
            Parameter::new("fc1.w", &[d_in, d_model], normal(d_in * d_model, 0.4)).unwrap(),
            Parameter::new("fc1.b", &[d_model], normal(d_model, 0.1)).unwrap(),
            Parameter::new("fc2.w", &[d_model, d_model], normal(d_model * d_model, 0.4)).unwrap(),
            Parameter::new("fc2.b", &[d_model], normal(d_model, 0.1)).unwrap(),
        )
    }

    #[test]
    fn zero_g_iterative_perceive_equals_plain_two_stage_encoding() {
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 35, false).unwrap();
        params.zero_output_projections();
        let (q1w, q1b, q2w, q2b) = branch_stages(100, 6, cfg.d_model);
        let (k1w, k1b, k2w, k2b) = branch_stages(101, 6, cfg.d_model);
        let features = randn(&[4, 6], 102, false);
        let bs = boxes(4, 103);
        let out = iterative_perceive(
            &features,
            &bs,
            [
                EncoderStage { weight: &q1w, bias: &q1b },
                EncoderStage { weight: &q2w, bias: &q2b },
            ],
            KvChain::Cross {
                stages: [
                    EncoderStage { weight: &k1w, bias: &k1b },
                    EncoderStage { weight: &k2w, bias: &k2b },
                ],
            },
            &params,
        )
        .unwrap();
        let plain = encode_branch(
            &encode_branch(&features, EncoderStage { weight: &q1w, bias: &q1b }).unwrap(),
            EncoderStage { weight: &q2w, bias: &q2b },
        )
        .unwrap();
        assert_eq!(out.to_vec(), plain.to_vec());
    }

    #[test]
    fn iteration_count_changes_output() {
        let cfg = tiny_config();
        let params = PerceiverParams::new("p", cfg, 37, false).unwrap();
        let (q1w, q1b, q2w, q2b) = branch_stages(110, 6, cfg.d_model);
        let (k1w, k1b, k2w, k2b) = branch_stages(111, 6, cfg.d_model);
        let features = randn(&[4, 6], 112, false);
        let bs = boxes(4, 113);
        let q_stages = [
            EncoderStage { weight: &q1w, bias: &q1b },
            EncoderStage { weight: &q2w, bias: &q2b },
        ];
        let kv_stages = [
            EncoderStage { weight: &k1w, bias: &k1b },
            EncoderStage { weight: &k2w, bias: &k2b },
        ];
        let two = iterative_perceive(&features, &bs, q_stages, KvChain::Cross { stages: kv_stages }, &params)
            .unwrap();

        // One round only: attend once then finish the encoder chain.
        let phi_q1 = encode_branch(&features, q_stages[0]).unwrap();
        let phi_kv1 = encode_branch(&features, kv_stages[0]).unwrap();
        let psi1 = mhpca(&phi_q1, &phi_kv1, &bs, &bs, &params.iterations[0]).unwrap();
        let one = encode_branch(&psi1, q_stages[1]).unwrap();
        let diff = two
            .to_vec()
            .iter()
            .zip(one.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "iterations should matter, diff {diff}");
    }

    #[test]
    fn gradients_flow_through_full_perceiver() {
        let cfg = PerceiverConfig { d_model: 8, heads: 2, d_head: 4, d_geo_emb: 16, iterations: 2 };
        let params = PerceiverParams::new("p", cfg, 39, false).unwrap();
        let (q1w, q1b, q2w, q2b) = branch_stages(120, 4, cfg.d_model);
        let (k1w, k1b, k2w, k2b) = branch_stages(121, 4, cfg.d_model);
        let features = randn(&[3, 4], 122, true);
        let bs = boxes(3, 123);
        let cot = randn(&[3, cfg.d_model], 124, false);

        let build = || {
            iterative_perceive(
                &features,
                &bs,
                [
                    EncoderStage { weight: &q1w, bias: &q1b },
                    EncoderStage { weight: &q2w, bias: &q2b },
                ],
                KvChain::Cross {
                    stages: [
                        EncoderStage { weight: &k1w, bias: &k1b },
                        EncoderStage { weight: &k2w, bias: &k2b },
                    ],
                },
                &params,
            )
            .unwrap()
            .mul(&cot)
            .unwrap()
            .sum_all()
        };
        let head = &params.iterations[0].heads[0];
        let named: Vec<(&str, &Tensor)> = vec![
            ("features", &features),
            ("q1w", q1w.tensor()),
            ("q2w", q2w.tensor()),
            ("k1w", k1w.tensor()),
            ("k2b", k2b.tensor()),
            ("wq", head.wq.tensor()),
            ("wk", head.wk.tensor()),
            ("wv", head.wv.tensor()),
            ("wgeo", head.wgeo.tensor()),
            ("g0", params.iterations[0].g_weight.tensor()),
            ("g1", params.iterations[1].g_weight.tensor()),
            ("g1b", params.iterations[1].g_bias.tensor()),
        ];
        let report = check_gradients(build, &named, 1e-3, 1e-4, 48, 7).unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {}", report.max_rel_err);
    }
}
