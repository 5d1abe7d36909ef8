// consistency: decoder-based rollout_logps equals the graph path and the
// sampling-time logps at the snapshot
#[test]
fn rollout_logps_match_sampling_logps() {
    use lastlab::grpo::rollout_logps;
    use lastlab::adapters::{init_adapter_params, AdapterConfig};
    use lastlab::math::rng::stream;
    use lastlab::microworld::dataset::SceneExample;
    use lastlab::microworld::scene::Difficulty;
    use lastlab::policy::generate::{generate, SceneInputs};
    use lastlab::policy::layout::LatentSpec;
    use lastlab::policy::mask::MaskMode;
    use lastlab::policy::model::{init_policy_params, ModelConfig};
    use lastlab::sft::{TrainContext, TrainExample};
    use lastlab::tokenizer::Vocabulary;

    let model = ModelConfig {
        d_model: 32, n_layers: 2, n_heads: 4, max_seq_len: 384,
        latent: Some(LatentSpec { k_geo: 4, k_wm: 4, wm_groups: 3 }),
    };
    let ctx = TrainContext {
        model,
        adapter: AdapterConfig { d_model: 32, n_heads: 4, d_teacher: 32 },
        mask_mode: MaskMode::Structured,
        mask_ratio: 0.5,
        latent_supervision: true,
        vocab: Vocabulary::new(),
    };
    let mut store = init_policy_params(&model, &ctx.vocab, 3);
    init_adapter_params(&mut store, &ctx.adapter, 3);
    let ex = SceneExample::build(5, Difficulty::Hard, 4, 4).unwrap();
    let tex = TrainExample::from_example(&ctx.vocab, &ex).unwrap();
    let inputs = SceneInputs { patches: tex.patches.as_ref().clone(), prompt: tex.prompt.clone() };
    let mut rng = stream(9, "roll", &[]);
    let gen = generate(&store, &model, &ctx.vocab, &inputs, 2.0, MaskMode::Structured, &mut rng).unwrap();
    let lp = rollout_logps(&store, &ctx, &tex, &gen, 2.0).unwrap();
    assert_eq!(lp.nrows(), gen.sampled.len());
    for (i, s) in gen.sampled.iter().enumerate() {
        assert!((lp[(i, 0)] - s.logp).abs() < 1e-9, "token {i}: {} vs {}", lp[(i, 0)], s.logp);
    }
}
