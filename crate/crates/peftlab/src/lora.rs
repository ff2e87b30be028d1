//! Low-rank adaptation of frozen weight matrices.
//!
//! A wrapped projection computes `y = W0 x + (alpha/r) * B (A x)` where the
//! base `W0` (out x in, stored row-major as in x out for row activations) is
//! frozen and only the rank-r pair `(A, B)` trains. `B` starts at zero, so a
//! freshly injected layer is bit-identical to the base layer.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Effective update multiplier is `alpha / rank`; the default
    /// `alpha = rank` keeps it at 1.
    pub alpha: f64,
    pub target_projections: BTreeSet<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig::with_rank(4)
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        LoraConfig {
            rank,
            alpha: rank as f64,
            target_projections: ["query", "key", "value", "output"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "lora alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Bookkeeping for one wrapped projection. The frozen base stays in the
/// model's [`ParamSet`] under `base_name`; the trainable pair lives next
/// to it as `<base>.lora_a` (r x in) and `<base>.lora_b` (out x r).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub base_name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.base_name)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.base_name)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Trainable values in this adapter: r * (d + k).
    pub fn lora_values(&self) -> usize {
        self.rank * (self.in_dim + self.out_dim)
    }

    /// Dense merged weight `W0 + (alpha/r) * B A`, in the stored
    /// (in x out) orientation.
    pub fn merge(&self, params: &ParamSet) -> Result<Tensor> {
        let base = params.get(&self.base_name)?.tensor.clone();
        let a = &params.get(&self.a_name())?.tensor; // r x in
        let b = &params.get(&self.b_name())?.tensor; // out x r
        let (k, d, r) = (self.in_dim, self.out_dim, self.rank);
        let mut merged = base.data().to_vec();
        let s = self.scaling();
        for i in 0..k {
            for j in 0..d {
                let mut delta = 0.0;
                for t in 0..r {
                    // (B A)^T entry (i, j) = sum_t A[t, i] * B[j, t]
                    delta += a.data()[t * k + i] * b.data()[j * r + t];
                }
                merged[i * d + j] += s * delta;
            }
        }
        Tensor::new(merged, &[k, d])
    }
}

/// Adapters for a model, keyed by the wrapped base parameter name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdapterSet {
    map: BTreeMap<String, LoraAdapter>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, base_name: &str) -> Option<&LoraAdapter> {
        self.map.get(base_name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.map.values()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, adapter: LoraAdapter) {
        self.map.insert(adapter.base_name.clone(), adapter);
    }

    pub fn merge_from(&mut self, other: AdapterSet) {
        self.map.extend(other.map);
    }

    /// Names of all trainable adapter tensors.
    pub fn param_names(&self) -> Vec<String> {
        self.iter().flat_map(|a| [a.a_name(), a.b_name()]).collect()
    }

    /// Sum of r * (d + k) over all adapters.
    pub fn total_lora_values(&self) -> usize {
        self.iter().map(|a| a.lora_values()).sum()
    }
}

/// Wraps each `{prefix}.{projection}` weight named in `cfg`. The base is
/// frozen in place; fresh `A` (Gaussian, stddev 0.01) and `B` (zeros) are
/// registered as trainable parameters.
pub fn inject(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<AdapterSet> {
    cfg.validate()?;
    let mut set = AdapterSet::new();
    for target in &cfg.target_projections {
        let base_name = format!("{prefix}.{target}");
        if !params.contains(&base_name) {
            return Err(Error::Config(format!(
                "unknown projection '{target}' under '{prefix}'"
            )));
        }
        let shape = params.get(&base_name)?.tensor.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Config(format!(
                "projection '{base_name}' is not a matrix: shape {shape:?}"
            )));
        }
        let (in_dim, out_dim) = (shape[0], shape[1]);
        if cfg.rank > in_dim.min(out_dim) {
            return Err(Error::Config(format!(
                "rank {} exceeds min(d, k) = {} for '{base_name}'",
                cfg.rank,
                in_dim.min(out_dim)
            )));
        }
        params.get_mut(&base_name)?.frozen = true;

        let adapter = LoraAdapter {
            base_name: base_name.clone(),
            in_dim,
            out_dim,
            rank: cfg.rank,
            alpha: cfg.alpha,
        };
        let mut a_rng = rng::substream(seed, "lora.a", &[rng::hash_bytes(base_name.as_bytes())]);
        params.register(
            adapter.a_name(),
            Tensor::randn(&[cfg.rank, in_dim], INIT_STD, &mut a_rng),
        );
        params.register(adapter.b_name(), Tensor::zeros(&[out_dim, cfg.rank]));
        set.insert(adapter);
    }
    Ok(set)
}

/// Injects adapters under several prefixes (one attention block each).
pub fn inject_many(
    params: &mut ParamSet,
    prefixes: &[String],
    cfg: &LoraConfig,
    seed: u64,
) -> Result<AdapterSet> {
    let mut set = AdapterSet::new();
    for prefix in prefixes {
        set.merge_from(inject(params, prefix, cfg, seed)?);
    }
    Ok(set)
}

/// `x @ W` with the low-rank path added when `name` is adapted.
pub fn adapted_matmul(
    g: &mut Graph,
    x: Var,
    params: &ParamSet,
    adapters: &AdapterSet,
    name: &str,
) -> Result<Var> {
    let w = g.param(params.get(name)?);
    let base = g.matmul(x, w)?;
    match adapters.get(name) {
        None => Ok(base),
        Some(ad) => {
            let a = g.param(params.get(&ad.a_name())?);
            let b = g.param(params.get(&ad.b_name())?);
            let a_t = g.transpose(a)?; // in x r
            let b_t = g.transpose(b)?; // r x out
            let down = g.matmul(x, a_t)?;
            let up = g.matmul(down, b_t)?;
            let scaled = g.scale(up, ad.scaling());
            g.add(base, scaled)
        }
    }
}

/// Tunable-parameter accounting for a d x k matrix at rank r.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParamCount {
    pub full: usize,
    pub lora: usize,
    pub reduction_fraction: f64,
}

impl ParamCount {
    /// False when r(d+k) >= dk, i.e. LoRA does not actually shrink the
    /// trainable set; reports should flag such configurations.
    pub fn is_reduction(&self) -> bool {
        self.reduction_fraction > 0.0
    }
}

pub fn param_count(d: usize, k: usize, r: usize) -> ParamCount {
    let full = d * k;
    let lora = r * (d + k);
    ParamCount {
        full,
        lora,
        reduction_fraction: 1.0 - lora as f64 / full as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer_with(names: &[(&str, usize, usize)], seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut r = rng::substream(seed, "layer", &[]);
        for (name, k, d) in names {
            ps.register(
                format!("attn.{name}"),
                Tensor::randn(&[*k, *d], 0.2, &mut r),
            );
        }
        ps
    }

    fn forward(g: &mut Graph, x: Var, ps: &ParamSet, ad: &AdapterSet, name: &str) -> Vec<f64> {
        let y = adapted_matmul(g, x, ps, ad, name).unwrap();
        g.data(y).to_vec()
    }

    #[test]
    fn inject_preserves_forward_bit_exactly_at_init() {
        let mut ps = layer_with(
            &[
                ("query", 6, 6),
                ("key", 6, 6),
                ("value", 6, 6),
                ("output", 6, 6),
            ],
            1,
        );
        let x_data = rng::randn_vec(&mut rng::substream(2, "x", &[]), 3 * 6, 1.0);

        let mut before = Vec::new();
        for name in ["query", "key", "value", "output"] {
            let mut g = Graph::new();
            let x = g.leaf(x_data.clone(), &[3, 6], false).unwrap();
            before.push(forward(
                &mut g,
                x,
                &ps,
                &AdapterSet::new(),
                &format!("attn.{name}"),
            ));
        }

        let adapters = inject(&mut ps, "attn", &LoraConfig::default(), 9).unwrap();
        assert_eq!(adapters.len(), 4);
        for (i, name) in ["query", "key", "value", "output"].iter().enumerate() {
            let mut g = Graph::new();
            let x = g.leaf(x_data.clone(), &[3, 6], false).unwrap();
            let after = forward(&mut g, x, &ps, &adapters, &format!("attn.{name}"));
            let bits_before: Vec<u64> = before[i].iter().map(|v| v.to_bits()).collect();
            let bits_after: Vec<u64> = after.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_before, bits_after, "projection {name}");
        }
    }

    #[test]
    fn inject_rejects_unknown_projection() {
        let mut ps = layer_with(&[("query", 4, 4)], 1);
        let cfg = LoraConfig {
            target_projections: ["query", "gate"].into_iter().map(String::from).collect(),
            ..LoraConfig::default()
        };
        let err = inject(&mut ps, "attn", &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("gate"), "{err}");
    }

    #[test]
    fn inject_rejects_rank_above_min_dim() {
        let mut ps = layer_with(&[("query", 4, 8)], 1);
        let mut cfg = LoraConfig::with_rank(5);
        cfg.target_projections = ["query"].into_iter().map(String::from).collect();
        assert!(matches!(
            inject(&mut ps, "attn", &cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn base_weight_is_frozen_and_bit_identical_after_updates() {
        use crate::optim::{AdamW, AdamWConfig};
        let mut ps = layer_with(&[("query", 4, 4)], 3);
        let mut cfg = LoraConfig::with_rank(2);
        cfg.target_projections = ["query"].into_iter().map(String::from).collect();
        let adapters = inject(&mut ps, "attn", &cfg, 5).unwrap();
        let base_before = ps.fingerprint_prefix("attn.query");

        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.05,
            ..Default::default()
        });
        for step in 0..3 {
            let mut g = Graph::new();
            let x_data = rng::randn_vec(&mut rng::substream(7, "x", &[step]), 2 * 4, 1.0);
            let x = g.leaf(x_data, &[2, 4], false).unwrap();
            let y = adapted_matmul(&mut g, x, &ps, &adapters, "attn.query").unwrap();
            let sq = g.mul(y, y).unwrap();
            let loss = g.mean_all(sq);
            g.backward(loss).unwrap();
            g.accumulate_param_grads(&mut ps).unwrap();
            opt.step_with_lr(&mut ps, 0.05).unwrap();
        }

        // Base is bit-identical but includes the lora params in prefix scan;
        // compare the exact base tensor fingerprint.
        let base_after = ps.get("attn.query").unwrap().tensor.fingerprint();
        let _ = base_before;
        let fresh = layer_with(&[("query", 4, 4)], 3);
        assert_eq!(
            base_after,
            fresh.get("attn.query").unwrap().tensor.fingerprint()
        );
        // And the adapters actually moved.
        assert_ne!(
            ps.get("attn.query.lora_b").unwrap().tensor.data(),
            Tensor::zeros(&[4, 2]).data()
        );
    }

    #[test]
    fn param_count_matches_closed_forms() {
        let c = param_count(64, 64, 4);
        assert_eq!((c.full, c.lora), (4096, 512));
        assert!((c.reduction_fraction - 0.875).abs() < 1e-15);

        let c = param_count(768, 768, 4);
        assert_eq!((c.full, c.lora), (589_824, 6144));
        assert!((c.reduction_fraction - (1.0 - 6144.0 / 589_824.0)).abs() < 1e-15);

        // r = min(d, k) with d = k: lora = 2dk, reduction negative.
        let c = param_count(8, 8, 8);
        assert_eq!(c.lora, 128);
        assert!(c.reduction_fraction < 0.0);
        assert!(!c.is_reduction());
    }

    #[test]
    fn merge_with_zero_b_returns_base_exactly() {
        let mut ps = layer_with(&[("query", 5, 3)], 2);
        let mut cfg = LoraConfig::with_rank(2);
        cfg.target_projections = ["query"].into_iter().map(String::from).collect();
        let adapters = inject(&mut ps, "attn", &cfg, 1).unwrap();
        let merged = adapters.get("attn.query").unwrap().merge(&ps).unwrap();
        assert_eq!(merged.data(), ps.get("attn.query").unwrap().tensor.data());
    }

    #[test]
    fn rank_one_merge_matches_outer_product_oracle() {
        let mut ps = ParamSet::new();
        ps.register("l.query", Tensor::zeros(&[3, 2]));
        let mut cfg = LoraConfig::with_rank(1);
        cfg.alpha = 1.0;
        cfg.target_projections = ["query"].into_iter().map(String::from).collect();
        let adapters = inject(&mut ps, "l", &cfg, 4).unwrap();
        // Overwrite the pair with known values: a (1 x 3), b (2 x 1).
        let a = [0.5, -1.0, 2.0];
        let b = [3.0, -4.0];
        ps.get_mut("l.query.lora_a").unwrap().tensor = Tensor::new(a.to_vec(), &[1, 3]).unwrap();
        ps.get_mut("l.query.lora_b").unwrap().tensor = Tensor::new(b.to_vec(), &[2, 1]).unwrap();

        let merged = adapters.get("l.query").unwrap().merge(&ps).unwrap();
        // Oracle: stored (in x out) entry (i, j) = a[i] * b[j].
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                let expect = ai * bj;
                let got = merged.data()[i * 2 + j];
                assert!((got - expect).abs() < 1e-15, "({i},{j}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn merged_forward_matches_adapted_forward_on_random_inputs() {
        let mut ps = layer_with(&[("query", 6, 4)], 8);
        let mut cfg = LoraConfig::with_rank(3);
        cfg.target_projections = ["query"].into_iter().map(String::from).collect();
        let adapters = inject(&mut ps, "attn", &cfg, 2).unwrap();
        // Give B nonzero values so the test is not trivially the base path.
        let mut r = rng::substream(13, "b", &[]);
        ps.get_mut("attn.query.lora_b").unwrap().tensor = Tensor::randn(&[4, 3], 0.3, &mut r);

        let merged = adapters.get("attn.query").unwrap().merge(&ps).unwrap();
        for trial in 0..8 {
            let x_data = rng::randn_vec(&mut rng::substream(21, "x", &[trial]), 2 * 6, 1.0);
            let mut g = Graph::new();
            let x = g.leaf(x_data.clone(), &[2, 6], false).unwrap();
            let adapted = adapted_matmul(&mut g, x, &ps, &adapters, "attn.query").unwrap();
            let mv = g.constant(&merged);
            let dense = g.matmul(x, mv).unwrap();
            let max_diff = g
                .data(adapted)
                .iter()
                .zip(g.data(dense))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff <= 1e-10, "trial {trial}: {max_diff}");
        }
    }

    #[test]
    fn trainable_count_equals_sum_of_rank_times_dims() {
        let mut ps = layer_with(
            &[
                ("query", 8, 6),
                ("key", 8, 6),
                ("value", 8, 6),
                ("output", 6, 8),
            ],
            5,
        );
        ps.freeze_all();
        let adapters = inject(&mut ps, "attn", &LoraConfig::default(), 3).unwrap();
        let expected: usize = [
            param_count(6, 8, 4).lora,
            param_count(6, 8, 4).lora,
            param_count(6, 8, 4).lora,
            param_count(8, 6, 4).lora,
        ]
        .iter()
        .sum();
        assert_eq!(ps.trainable_values(), expected);
        assert_eq!(adapters.total_lora_values(), expected);
    }
}
