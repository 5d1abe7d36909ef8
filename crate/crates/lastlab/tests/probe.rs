// one-off inspection helper: decode a few scenes from a calibration
// checkpoint and show the raw strings (run with --ignored --nocapture)
use lastlab::harness::config::RunConfig;
use lastlab::math::params::load_checkpoint;
use lastlab::microworld::dataset::SceneExample;
use lastlab::microworld::scene::Difficulty;
use lastlab::policy::generate::{generate, SceneInputs};
use lastlab::sft::TrainExample;
use lastlab::tokenizer::{parse_trajectory, serialize_trajectory};

#[test]
#[ignore]
fn dump_greedy_decodes() {
    let path = std::env::var("PROBE_CKPT").unwrap_or("/tmp/cal1/ckpt_sft.json".to_string());
    let (store, _, _) = load_checkpoint(std::path::Path::new(&path)).unwrap();
    let cfg = RunConfig::default();
    let ctx = cfg.train_context();
    for i in 0..5u64 {
        let d = if i % 2 == 0 { Difficulty::Hard } else { Difficulty::Easy };
        let ex = SceneExample::build(20_000 + i, d, cfg.n_3d_tokens, cfg.n_wm_tokens).unwrap();
        let tex = TrainExample::from_example(&ctx.vocab, &ex).unwrap();
        let inputs = SceneInputs { patches: tex.patches.as_ref().clone(), prompt: tex.prompt.clone() };
        let mut rng = lastlab::math::rng::stream(0, "probe", &[i]);
        let gen = generate(&store, &ctx.model, &ctx.vocab, &inputs, 0.0, ctx.mask_mode, &mut rng).unwrap();
        let ids = gen.sequence.token_ids();
        let decoded: String = ids.iter().map(|&t| ctx.vocab.text(t)).collect();
        let gt = serialize_trajectory(&ctx.vocab, &ex.scene.gt_trajectory).unwrap();
        let gt_str: String = gt.iter().map(|&t| ctx.vocab.text(t)).collect();
        println!("scene {i} ({d:?}):");
        println!("  gen: {}", &decoded[decoded.find("<answer>").unwrap_or(0)..]);
        println!("  gt : {gt_str}");
        println!("  parse: {:?}", parse_trajectory(&ctx.vocab, &ids).err().map(|e| e.to_string()));
    }
}
