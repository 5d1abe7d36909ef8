//! Dynamics and geometry adapters: cross-attention from latent hidden states
//! over randomly masked visual embeddings, projected into teacher feature
//! space, plus the MSE alignment losses. Training-graph only; inference never
//! calls into this module.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::LastlabError;
use crate::math::graph::{Graph, Var};
use crate::math::params::ParamStore;
use crate::math::rng::gaussian;
use crate::policy::model::GraphParams;

/// Default visual mask ratio during training.
pub const DEFAULT_MASK_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
pub struct AdapterConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_teacher: usize,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), LastlabError> {
        if self.d_model % self.n_heads != 0 {
            return Err(LastlabError::Config(format!(
                "adapter heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Adds both adapter namespaces ("adapter.dyn.*", "adapter.geo.*") to a store.
/// The output projection starts at zero so initial projections are zero.
pub fn init_adapter_params(store: &mut ParamStore, cfg: &AdapterConfig, seed: u64) {
    cfg.validate().expect("valid adapter config");
    let mut rng = crate::math::rng::stream(seed, "init.adapter", &[]);
    let d = cfg.d_model;
    let normal = |r: usize, c: usize, std: f64, rng: &mut ChaCha8Rng| {
        Array2::from_shape_fn((r, c), |_| gaussian(rng) * std)
    };
    for ns in ["adapter.dyn", "adapter.geo"] {
        store.insert(&format!("{ns}.attn.wq"), normal(d, d, 0.02, &mut rng));
        store.insert(&format!("{ns}.attn.wk"), normal(d, d, 0.02, &mut rng));
        store.insert(&format!("{ns}.attn.wv"), normal(d, d, 0.02, &mut rng));
        store.insert(&format!("{ns}.attn.wo"), normal(d, d, 0.02, &mut rng));
        store.insert(&format!("{ns}.mlp.fc1.w"), normal(d, d, 0.02, &mut rng));
        store.insert(&format!("{ns}.mlp.fc1.b"), Array2::zeros((1, d)));
        store.insert(&format!("{ns}.mlp.fc2.w"), Array2::zeros((d, cfg.d_teacher)));
        store.insert(&format!("{ns}.mlp.fc2.b"), Array2::zeros((1, cfg.d_teacher)));
    }
}

/// Draw a whole-row binary keep mask for the visual embeddings: each patch is
/// zeroed independently with probability `ratio`; survivors are unscaled.
pub fn draw_visual_mask(
    n_patches: usize,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>, LastlabError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(LastlabError::Config(format!(
            "mask ratio {ratio} outside [0, 1)"
        )));
    }
    Ok((0..n_patches)
        .map(|_| rng.gen_range(0.0..1.0) >= ratio)
        .collect())
}

/// Apply a row mask in-graph: rows with `keep = false` become exactly zero.
pub fn apply_visual_mask(g: &mut Graph, e_img: Var, keep: &[bool]) -> Var {
    let d = g.value(e_img).ncols();
    assert_eq!(g.value(e_img).nrows(), keep.len(), "mask length mismatch");
    let m = Array2::from_shape_fn((keep.len(), d), |(i, _)| if keep[i] { 1.0 } else { 0.0 });
    g.mul_const(e_img, Arc::new(m))
}

/// One adapter: cross-attention (latents as queries, masked visual embeddings
/// as keys/values; keys carry no positional encoding), residual, then a
/// two-layer MLP into teacher space.
pub fn adapter_forward(
    g: &mut Graph,
    gp: &GraphParams,
    cfg: &AdapterConfig,
    namespace: &str,
    latents: Var,
    e_masked: Var,
) -> Result<Var, LastlabError> {
    cfg.validate()?;
    if g.value(latents).ncols() != cfg.d_model || g.value(e_masked).ncols() != cfg.d_model {
        return Err(LastlabError::Config("adapter input width mismatch".into()));
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let n_q = g.value(latents).nrows();
    let n_k = g.value(e_masked).nrows();
    let q = g.matmul(latents, gp.var(&format!("{namespace}.attn.wq")));
    let k = g.matmul(e_masked, gp.var(&format!("{namespace}.attn.wk")));
    let v = g.matmul(e_masked, gp.var(&format!("{namespace}.attn.wv")));
    let full = Arc::new(Array2::from_elem((n_q, n_k), true));
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hd in 0..cfg.n_heads {
        let qh = g.select_cols(q, hd * dh, (hd + 1) * dh);
        let kh = g.select_cols(k, hd * dh, (hd + 1) * dh);
        let vh = g.select_cols(v, hd * dh, (hd + 1) * dh);
        let scores = g.matmul_nt(qh, kh);
        let scaled = g.mul_scalar(scores, scale);
        let probs = g.softmax_rows_masked(scaled, full.clone());
        heads.push(g.matmul(probs, vh));
    }
    let ctx = g.concat_cols(&heads);
    let attn = g.matmul(ctx, gp.var(&format!("{namespace}.attn.wo")));
    let z = g.add(latents, attn);
    let a1 = g.matmul(z, gp.var(&format!("{namespace}.mlp.fc1.w")));
    let a1b = g.add_row_broadcast(a1, gp.var(&format!("{namespace}.mlp.fc1.b")));
    let a1g = g.gelu(a1b);
    let a2 = g.matmul(a1g, gp.var(&format!("{namespace}.mlp.fc2.w")));
    Ok(g.add_row_broadcast(a2, gp.var(&format!("{namespace}.mlp.fc2.b"))))
}

/// Geometry adapter: k_geo latent rows -> k_geo x d_teacher.
pub fn geometry_adapter(
    g: &mut Graph,
    gp: &GraphParams,
    cfg: &AdapterConfig,
    h_geo: Var,
    e_masked: Var,
) -> Result<Var, LastlabError> {
    adapter_forward(g, gp, cfg, "adapter.geo", h_geo, e_masked)
}

/// Dynamics adapter: the three horizon groups share one set of weights; the
/// stacked (groups * k_wm) x d input projects row-wise.
pub fn dynamics_adapter(
    g: &mut Graph,
    gp: &GraphParams,
    cfg: &AdapterConfig,
    h_dyn: Var,
    e_masked: Var,
) -> Result<Var, LastlabError> {
    adapter_forward(g, gp, cfg, "adapter.dyn", h_dyn, e_masked)
}

/// Mean-squared-error alignment losses (mean over all elements).
pub fn alignment_losses(
    g: &mut Graph,
    p_geo: Var,
    p_dyn: Var,
    teacher_geo: &Array2<f64>,
    teacher_dyn: &Array2<f64>,
) -> Result<(Var, Var), LastlabError> {
    if g.value(p_geo).dim() != teacher_geo.dim() || g.value(p_dyn).dim() != teacher_dyn.dim() {
        return Err(LastlabError::Config(format!(
            "alignment shape mismatch: {:?} vs {:?}, {:?} vs {:?}",
            g.value(p_geo).dim(),
            teacher_geo.dim(),
            g.value(p_dyn).dim(),
            teacher_dyn.dim()
        )));
    }
    let tg = g.constant(teacher_geo.clone());
    let td = g.constant(teacher_dyn.clone());
    let dg = g.sub(p_geo, tg);
    let dg2 = g.mul(dg, dg);
    let l_3d = g.mean_all(dg2);
    let dd = g.sub(p_dyn, td);
    let dd2 = g.mul(dd, dd);
    let l_wm = g.mean_all(dd2);
    Ok((l_3d, l_wm))
}

/// Scalar MSE oracle used by tests and reporting.
pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    acc / a.len() as f64
}

/// Convenience: adapter parameter gradients from a graph.
pub fn adapter_grads(gp: &GraphParams, g: &Graph) -> BTreeMap<String, Array2<f64>> {
    gp.grads(g)
        .into_iter()
        .filter(|(k, _)| k.starts_with("adapter."))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng::stream;
    use ndarray::Array2;

    fn cfg() -> AdapterConfig {
        AdapterConfig {
            d_model: 16,
            n_heads: 4,
            d_teacher: 8,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| gaussian(rng) * 0.5)
    }

    fn store_with_adapters(seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_adapter_params(&mut s, &cfg(), seed);
        s
    }

    /// Randomize the zero-initialized output layers too, so gradients flow.
    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = stream(seed, "test.randomize", &[]);
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let w = store.get_mut(&n);
            for v in w.iter_mut() {
                *v = gaussian(&mut rng) * 0.3;
            }
        }
    }

    #[test]
    fn mask_ratio_zero_is_identity() {
        let mut rng = stream(1, "mask", &[]);
        let keep = draw_visual_mask(64, 0.0, &mut rng).unwrap();
        assert!(keep.iter().all(|&k| k));
        let mut g = Graph::new();
        let e = g.leaf(randn(&mut rng, 64, 16));
        let before = g.value(e).clone();
        let masked = apply_visual_mask(&mut g, e, &keep);
        assert_eq!(g.value(masked), &before);
    }

    #[test]
    fn mask_ratio_is_monte_carlo_consistent() {
        let mut rng = stream(2, "mask", &[]);
        let keep = draw_visual_mask(10_000, 0.5, &mut rng).unwrap();
        let zeroed = keep.iter().filter(|&&k| !k).count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&zeroed), "zeroed fraction {zeroed}");
    }

    #[test]
    fn mask_is_reproducible_and_validated() {
        let a = draw_visual_mask(100, 0.3, &mut stream(3, "m", &[7])).unwrap();
        let b = draw_visual_mask(100, 0.3, &mut stream(3, "m", &[7])).unwrap();
        assert_eq!(a, b);
        assert!(draw_visual_mask(10, 1.0, &mut stream(3, "m", &[])).is_err());
        assert!(draw_visual_mask(10, -0.1, &mut stream(3, "m", &[])).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut store = store_with_adapters(0);
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            store.get_mut(&n).fill(0.0);
        }
        let mut rng = stream(4, "x", &[]);
        let mut g = Graph::new();
        let gp = GraphParams::bind(&mut g, &store, false);
        let lat = g.constant(randn(&mut rng, 4, 16));
        let e = g.constant(randn(&mut rng, 8, 16));
        let out = geometry_adapter(&mut g, &gp, &cfg(), lat, e).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn keys_are_permutation_invariant() {
        // no positional encoding on adapter keys, so shuffling rows of the
        // visual embedding matrix leaves the output unchanged
        let mut store = store_with_adapters(1);
        randomize(&mut store, 10);
        let mut rng = stream(5, "x", &[]);
        let lat = randn(&mut rng, 4, 16);
        let e = randn(&mut rng, 8, 16);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.reverse();
        perm.swap(0, 3);
        let e_perm = Array2::from_shape_fn((8, 16), |(i, j)| e[(perm[i], j)]);
        let run = |keys: &Array2<f64>| {
            let mut g = Graph::new();
            let gp = GraphParams::bind(&mut g, &store, false);
            let l = g.constant(lat.clone());
            let k = g.constant(keys.clone());
            let out = dynamics_adapter(&mut g, &gp, &cfg(), l, k).unwrap();
            g.value(out).clone()
        };
        let a = run(&e);
        let b = run(&e_perm);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_weights_map_identical_slices_identically() {
        let mut store = store_with_adapters(2);
        randomize(&mut store, 11);
        let mut rng = stream(6, "x", &[]);
        let slice = randn(&mut rng, 4, 16);
        // three identical groups stacked
        let mut h = Array2::zeros((12, 16));
        for grp in 0..3 {
            for i in 0..4 {
                for j in 0..16 {
                    h[(grp * 4 + i, j)] = slice[(i, j)];
                }
            }
        }
        let e = randn(&mut rng, 8, 16);
        let mut g = Graph::new();
        let gp = GraphParams::bind(&mut g, &store, false);
        let hv = g.constant(h);
        let ev = g.constant(e);
        let out = dynamics_adapter(&mut g, &gp, &cfg(), hv, ev).unwrap();
        let o = g.value(out);
        for grp in 1..3 {
            for i in 0..4 {
                for j in 0..8 {
                    assert!((o[(grp * 4 + i, j)] - o[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn alignment_loss_exact_match_and_unit_offset() {
        let mut rng = stream(7, "x", &[]);
        let tg = randn(&mut rng, 4, 8);
        let td = randn(&mut rng, 12, 8);
        let mut g = Graph::new();
        let pg = g.constant(tg.clone());
        let pd = g.constant(td.clone());
        let (l3d, lwm) = alignment_losses(&mut g, pg, pd, &tg, &td).unwrap();
        assert_eq!(g.scalar_value(l3d), 0.0);
        assert_eq!(g.scalar_value(lwm), 0.0);
        let pg1 = g.constant(tg.mapv(|v| v + 1.0));
        let pd1 = g.constant(td.mapv(|v| v + 1.0));
        let (l3d, lwm) = alignment_losses(&mut g, pg1, pd1, &tg, &td).unwrap();
        assert!((g.scalar_value(l3d) - 1.0).abs() < 1e-12);
        assert!((g.scalar_value(lwm) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_matches_double_loop_oracle() {
        let mut rng = stream(8, "x", &[]);
        let p = randn(&mut rng, 5, 8);
        let t = randn(&mut rng, 5, 8);
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let pv2 = g.constant(p.clone());
        let (l, _) = alignment_losses(&mut g, pv, pv2, &t, &p).unwrap();
        // independent double loop
        let mut acc = 0.0;
        let mut count = 0;
        for i in 0..5 {
            for j in 0..8 {
                acc += (p[(i, j)] - t[(i, j)]).powi(2);
                count += 1;
            }
        }
        assert!((g.scalar_value(l) - acc / count as f64).abs() < 1e-12);
    }

    #[test]
    fn loss_separation_between_adapters() {
        // gradient of the geometry loss w.r.t. dynamics-adapter params is zero
        let mut store = store_with_adapters(3);
        randomize(&mut store, 12);
        let mut rng = stream(9, "x", &[]);
        let mut g = Graph::new();
        let gp = GraphParams::bind(&mut g, &store, true);
        let lat_g = g.constant(randn(&mut rng, 4, 16));
        let lat_d = g.constant(randn(&mut rng, 12, 16));
        let e = g.constant(randn(&mut rng, 8, 16));
        let p_geo = geometry_adapter(&mut g, &gp, &cfg(), lat_g, e).unwrap();
        let p_dyn = dynamics_adapter(&mut g, &gp, &cfg(), lat_d, e).unwrap();
        let tg = randn(&mut rng, 4, 8);
        let td = randn(&mut rng, 12, 8);
        let (l3d, _lwm) = alignment_losses(&mut g, p_geo, p_dyn, &tg, &td).unwrap();
        g.backward(l3d);
        let grads = gp.grads(&g);
        for (name, grad) in grads {
            if name.starts_with("adapter.dyn.") {
                assert!(
                    grad.iter().all(|&v| v == 0.0),
                    "{name} picked up geometry-loss gradient"
                );
            }
        }
    }

    #[test]
    fn losses_stay_finite_under_extreme_masking() {
        let mut store = store_with_adapters(4);
        randomize(&mut store, 13);
        let mut rng = stream(10, "x", &[]);
        let keep = draw_visual_mask(8, 1.0 - 1e-9, &mut rng).unwrap();
        let mut g = Graph::new();
        let gp = GraphParams::bind(&mut g, &store, false);
        let e = g.constant(randn(&mut rng, 8, 16));
        let masked = apply_visual_mask(&mut g, e, &keep);
        let lat = g.constant(randn(&mut rng, 4, 16));
        let lat_d = g.constant(randn(&mut rng, 12, 16));
        let p_geo = geometry_adapter(&mut g, &gp, &cfg(), lat, masked).unwrap();
        let p_dyn = dynamics_adapter(&mut g, &gp, &cfg(), lat_d, masked).unwrap();
        let tg = randn(&mut rng, 4, 8);
        let td = randn(&mut rng, 12, 8);
        let (l3d, lwm) = alignment_losses(&mut g, p_geo, p_dyn, &tg, &td).unwrap();
        assert!(g.scalar_value(l3d).is_finite());
        assert!(g.scalar_value(lwm).is_finite());
    }

    /// Central finite differences over sampled coordinates of every adapter
    /// parameter, step 1e-4, max relative error 1e-4.
    #[test]
    fn gradients_match_finite_differences() {
        let mut store = store_with_adapters(5);
        randomize(&mut store, 14);
        let mut rng = stream(11, "x", &[]);
        let lat_g = randn(&mut rng, 4, 16);
        let lat_d = randn(&mut rng, 12, 16);
        let e = randn(&mut rng, 8, 16);
        let tg = randn(&mut rng, 4, 8);
        let td = randn(&mut rng, 12, 8);
        let loss_of = |s: &ParamStore| {
            let mut g = Graph::new();
            let gp = GraphParams::bind(&mut g, s, false);
            let l1 = g.constant(lat_g.clone());
            let l2 = g.constant(lat_d.clone());
            let ev = g.constant(e.clone());
            let p_geo = geometry_adapter(&mut g, &gp, &cfg(), l1, ev).unwrap();
            let p_dyn = dynamics_adapter(&mut g, &gp, &cfg(), l2, ev).unwrap();
            let (l3d, lwm) = alignment_losses(&mut g, p_geo, p_dyn, &tg, &td).unwrap();
            let sum = g.add(l3d, lwm);
            g.scalar_value(sum)
        };
        // analytic
        let mut g = Graph::new();
        let gp = GraphParams::bind(&mut g, &store, true);
        let l1 = g.constant(lat_g.clone());
        let l2 = g.constant(lat_d.clone());
        let ev = g.constant(e.clone());
        let p_geo = geometry_adapter(&mut g, &gp, &cfg(), l1, ev).unwrap();
        let p_dyn = dynamics_adapter(&mut g, &gp, &cfg(), l2, ev).unwrap();
        let (l3d, lwm) = alignment_losses(&mut g, p_geo, p_dyn, &tg, &td).unwrap();
        let total = g.add(l3d, lwm);
        g.backward(total);
        let grads = gp.grads(&g);

        let h = 1e-4;
        let mut sample_rng = stream(12, "fd.sample", &[]);
        let mut checked = 0;
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let dim = store.get(&name).dim();
            let n_coords = (dim.0 * dim.1).min(6);
            for _ in 0..n_coords {
                let i = sample_rng.gen_range(0..dim.0);
                let j = sample_rng.gen_range(0..dim.1);
                let orig = store.get(&name)[(i, j)];
                store.get_mut(&name)[(i, j)] = orig + h;
                let plus = loss_of(&store);
                store.get_mut(&name)[(i, j)] = orig - h;
                let minus = loss_of(&store);
                store.get_mut(&name)[(i, j)] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let a = grads.get(&name).map_or(0.0, |m| m[(i, j)]);
                let denom = a.abs().max(fd.abs());
                if denom < 1e-10 {
                    continue;
                }
                assert!(
                    (a - fd).abs() / denom < 1e-4,
                    "{name}[{i},{j}]: analytic {a} fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "only {checked} coordinates checked");
    }
}
